//! Order-independent sample reductions.

/// Pairwise (cascade) summation. The split points depend only on the length, so
/// the result is fixed for a given slice regardless of how it was produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

pub fn mean_stderr(xs: &[f64]) -> MeanStderr {
    let n = xs.len();
    if n == 0 {
        return MeanStderr { mean: f64::NAN, stderr: f64::NAN, n };
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n < 2 {
        return MeanStderr { mean, stderr: 0.0, n };
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    MeanStderr { mean, stderr: (var / n as f64).sqrt(), n }
}
