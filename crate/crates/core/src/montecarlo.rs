//! Brute-force sampling of the circuit ensemble on small rings.
//!
//! Operators live on the full `d^L`-dimensional space (site 0 is the most
//! significant digit) and are evolved gate by gate. Every sample draws its
//! randomness from a ChaCha20 stream keyed by `(master_seed, sample_index)`, so
//! results do not depend on scheduling.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::ChainGeometry;
use crate::moments::r2_image;
use crate::operators::LocalOperator;
use crate::stats::{mean_stderr, MeanStderr};
use crate::Time;

/// Largest Hilbert-space dimension the dense evolution accepts.
pub const DENSE_LIMIT: usize = 256;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Haar-random unitary: QR of a complex Ginibre matrix with the phases of
/// `diag(R)` moved into `Q`.
pub fn haar_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<Complex64> {
    assert!(dim >= 1, "unitary dimension must be positive");
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let z = DMatrix::from_fn(dim, dim, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re * scale, im * scale)
    });
    let qr = z.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        let rjj = r[(j, j)];
        let norm = rjj.norm();
        if norm > 0.0 {
            let phase = rjj / norm;
            for i in 0..dim {
                q[(i, j)] *= phase;
            }
        }
    }
    q
}

/// Reproducibility record of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedPath {
    pub master_seed: u64,
    pub sample_index: u64,
}

impl SeedPath {
    pub fn new(master_seed: u64, sample_index: u64) -> Self {
        SeedPath { master_seed, sample_index }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.sample_index);
        rng
    }
}

/// One circuit realization: `edges[k]` receives `unitaries[k]` at step `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitSample {
    pub geom: ChainGeometry,
    pub edges: Vec<usize>,
    pub unitaries: Vec<DMatrix<Complex64>>,
    pub seed_path: SeedPath,
}

impl CircuitSample {
    pub fn depth(&self) -> usize {
        self.edges.len()
    }
}

pub fn sample_circuit(geom: &ChainGeometry, t: usize, seed_path: SeedPath) -> CircuitSample {
    let mut rng = seed_path.rng();
    let gate_dim = geom.local_dim() * geom.local_dim();
    let mut edges = Vec::with_capacity(t);
    let mut unitaries = Vec::with_capacity(t);
    for _ in 0..t {
        edges.push(rng.random_range(0..geom.sites()));
        unitaries.push(haar_unitary(gate_dim, &mut rng));
    }
    CircuitSample { geom: *geom, edges, unitaries, seed_path }
}

/// Sites reached from `p` when the gates on `edges` act in the listed order.
pub fn support_after(geom: &ChainGeometry, p: usize, edges: &[usize]) -> Vec<bool> {
    let mut support = vec![false; geom.sites()];
    support[p] = true;
    for &e in edges {
        let (a, b) = geom.edge(e);
        if support[a] || support[b] {
            support[a] = true;
            support[b] = true;
        }
    }
    support
}

fn check_dense(geom: &ChainGeometry) -> Result<usize> {
    match geom.hilbert_dim() {
        Some(n) if n <= DENSE_LIMIT => Ok(n),
        _ => Err(Error::SizeGuard(format!(
            "dense evolution needs d^L <= {DENSE_LIMIT}; d={} L={} is too large, use the bound path instead",
            geom.local_dim(),
            geom.sites()
        ))),
    }
}

/// Index offsets of the local block on `sites` and the base indices of all blocks.
fn block_layout(geom: &ChainGeometry, sites: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let d = geom.local_dim();
    let l = geom.sites();
    let dim = d.pow(l as u32);
    let strides: Vec<usize> = sites.iter().map(|&s| d.pow((l - 1 - s) as u32)).collect();
    let local = d.pow(sites.len() as u32);
    let offsets: Vec<usize> = (0..local)
        .map(|mut lambda| {
            let mut off = 0;
            for stride in strides.iter().rev() {
                off += (lambda % d) * stride;
                lambda /= d;
            }
            off
        })
        .collect();
    let bases = (0..dim).filter(|&i| strides.iter().all(|&s| (i / s) % d == 0)).collect();
    (offsets, bases)
}

/// Dense operator on the ring, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    geom: ChainGeometry,
    dim: usize,
    data: Vec<Complex64>,
}

impl DenseOperator {
    /// `op` on `site`, identity elsewhere.
    pub fn embed(geom: &ChainGeometry, op: &LocalOperator, site: usize) -> Result<Self> {
        let dim = check_dense(geom)?;
        if op.dim() != geom.local_dim() || site >= geom.sites() {
            return Err(Error::InvalidArgument(format!("cannot embed a {}-level operator at site {site}", op.dim())));
        }
        let d = geom.local_dim();
        let stride = d.pow((geom.sites() - 1 - site) as u32);
        let mut data = vec![ZERO; dim * dim];
        for i in 0..dim {
            let di = (i / stride) % d;
            let base = i - di * stride;
            for dj in 0..d {
                data[i * dim + base + dj * stride] = op.matrix()[(di, dj)];
            }
        }
        Ok(DenseOperator { geom: *geom, dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.dim + j]
    }

    pub fn to_matrix(&self) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `self <- m · self` with `m` acting on `sites` (first listed most significant).
    fn left_local(&mut self, m: &DMatrix<Complex64>, sites: &[usize]) {
        let (offsets, bases) = block_layout(&self.geom, sites);
        let k = offsets.len();
        let mut v = vec![ZERO; k];
        for col in 0..self.dim {
            for &base in &bases {
                for (slot, off) in v.iter_mut().zip(&offsets) {
                    *slot = self.data[(base + off) * self.dim + col];
                }
                for (row, off) in offsets.iter().enumerate() {
                    let mut acc = ZERO;
                    for (lam, x) in v.iter().enumerate() {
                        acc += m[(row, lam)] * x;
                    }
                    self.data[(base + off) * self.dim + col] = acc;
                }
            }
        }
    }

    /// `self <- self · m` with `m` acting on `sites`.
    fn right_local(&mut self, m: &DMatrix<Complex64>, sites: &[usize]) {
        let (offsets, bases) = block_layout(&self.geom, sites);
        let k = offsets.len();
        let mut v = vec![ZERO; k];
        for row in 0..self.dim {
            let line = &mut self.data[row * self.dim..(row + 1) * self.dim];
            for &base in &bases {
                for (slot, off) in v.iter_mut().zip(&offsets) {
                    *slot = line[base + off];
                }
                for (col, off) in offsets.iter().enumerate() {
                    let mut acc = ZERO;
                    for (lam, x) in v.iter().enumerate() {
                        acc += x * m[(lam, col)];
                    }
                    line[base + off] = acc;
                }
            }
        }
    }

    /// `self <- U† self U` for a two-site gate on `edge`.
    pub fn conjugate_gate(&mut self, edge: usize, unitary: &DMatrix<Complex64>) {
        let (a, b) = self.geom.edge(edge);
        self.left_local(&unitary.adjoint(), &[a, b]);
        self.right_local(unitary, &[a, b]);
    }

    /// `||[self, O_q]||_2 / d^{L/2}` with `O_q` acting on `site`.
    pub fn commutator_norm_scaled(&self, op: &LocalOperator, site: usize) -> f64 {
        let mut xo = self.clone();
        xo.right_local(op.matrix(), &[site]);
        let mut ox = self.clone();
        ox.left_local(op.matrix(), &[site]);
        let sum: f64 = xo.data.iter().zip(&ox.data).map(|(a, b)| (a - b).norm_sqr()).sum();
        (sum / self.dim as f64).sqrt()
    }

    /// The same norm through the spectral resolution of `O_q`:
    /// `Σ_ij (o_i - o_j)^2 |<o_i| X |o_j>|^2`.
    pub fn commutator_norm_spectral(&self, op: &LocalOperator, site: usize) -> f64 {
        let eig = op.matrix().clone().symmetric_eigen();
        let w = eig.eigenvectors;
        let mut x = self.clone();
        x.left_local(&w.adjoint(), &[site]);
        x.right_local(&w, &[site]);
        let d = self.geom.local_dim();
        let stride = d.pow((self.geom.sites() - 1 - site) as u32);
        let mut sum = 0.0;
        for i in 0..self.dim {
            let oi = eig.eigenvalues[(i / stride) % d];
            for j in 0..self.dim {
                let oj = eig.eigenvalues[(j / stride) % d];
                sum += (oi - oj).powi(2) * x.get(i, j).norm_sqr();
            }
        }
        (sum / self.dim as f64).sqrt()
    }
}

/// `C^t(O) = U_1† ⋯ U_t† O U_t ⋯ U_1` for the sampled circuit.
pub fn heisenberg_evolve(op: &DenseOperator, sample: &CircuitSample) -> Result<DenseOperator> {
    if op.geom != sample.geom {
        return Err(Error::InvalidArgument("operator and circuit live on different rings".into()));
    }
    check_dense(&sample.geom)?;
    let mut x = op.clone();
    for (edge, u) in sample.edges.iter().zip(&sample.unitaries).rev() {
        x.conjugate_gate(*edge, u);
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtaEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
    /// Mean and standard error at every depth `0..=t`, when requested.
    pub per_t: Option<Vec<MeanStderr>>,
}

impl From<MeanStderr> for EtaEstimate {
    fn from(s: MeanStderr) -> Self {
        EtaEstimate { mean: s.mean, stderr: s.stderr, n_samples: s.n, per_t: None }
    }
}

fn check_samples(n_samples: usize) -> Result<()> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n_samples}")));
    }
    Ok(())
}

/// Per-sample commutator norms at each requested depth and probe site.
///
/// Each sample applies its gates in drawing order, `X <- U† X U`, and reads off
/// every depth on the way. Gates are i.i.d., so the depth-`t` prefix has the
/// distribution of a depth-`t` circuit.
///
/// `X` acts as the identity off its support, so gates missing the support are
/// skipped and probe sites outside it give exactly zero.
fn trajectory_norms(
    start: &DenseOperator,
    start_site: usize,
    op_q: &LocalOperator,
    qs: &[usize],
    times: &[usize],
    t_max: usize,
    seed_path: SeedPath,
) -> Vec<f64> {
    let geom = start.geom;
    let sample = sample_circuit(&geom, t_max, seed_path);
    let mut x = start.clone();
    let mut support = vec![false; geom.sites()];
    support[start_site] = true;
    let mut out = vec![0.0; times.len() * qs.len()];
    let record = |x: &DenseOperator, support: &[bool], t: usize, out: &mut Vec<f64>| {
        for (ti, &tt) in times.iter().enumerate() {
            if tt == t {
                for (qi, &q) in qs.iter().enumerate() {
                    out[ti * qs.len() + qi] = if support[q] { x.commutator_norm_scaled(op_q, q) } else { 0.0 };
                }
            }
        }
    };
    record(&x, &support, 0, &mut out);
    for (k, (edge, u)) in sample.edges.iter().zip(&sample.unitaries).enumerate() {
        let (a, b) = geom.edge(*edge);
        if support[a] || support[b] {
            support[a] = true;
            support[b] = true;
            x.conjugate_gate(*edge, u);
        }
        record(&x, &support, k + 1, &mut out);
    }
    out
}

/// One grid point of the sampled commutator norm.
#[derive(Debug, Clone, PartialEq)]
pub struct McPoint {
    pub q: usize,
    pub distance: usize,
    pub t: u64,
    pub estimate: EtaEstimate,
}

/// Sampled `||[C^t(O_p), O_q]||_2 / d^{L/2}` over every `(q, t)`, time-major.
/// Each sample is one circuit, shared by all grid points.
#[allow(clippy::too_many_arguments)]
pub fn eta_mc_grid(
    op_p: &LocalOperator,
    op_q: &LocalOperator,
    geom: &ChainGeometry,
    p: usize,
    qs: &[usize],
    times: &[u64],
    n_samples: usize,
    master_seed: u64,
) -> Result<Vec<McPoint>> {
    check_samples(n_samples)?;
    check_dense(geom)?;
    if qs.is_empty() || times.is_empty() {
        return Err(Error::InvalidArgument("sampling grid needs at least one q and one t".into()));
    }
    if let Some(&bad) = qs.iter().find(|&&q| q >= geom.sites()) {
        return Err(Error::InvalidArgument(format!("q = {bad} outside ring of {} sites", geom.sites())));
    }
    if op_q.dim() != geom.local_dim() {
        return Err(Error::Operator("O_q does not match the local dimension".into()));
    }
    let start = DenseOperator::embed(geom, op_p, p)?;
    let ts: Vec<usize> = times.iter().map(|&t| t as usize).collect();
    let t_max = *ts.iter().max().expect("non-empty");
    let per_sample: Vec<Vec<f64>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| trajectory_norms(&start, p, op_q, qs, &ts, t_max, SeedPath::new(master_seed, i)))
        .collect();
    let mut points = Vec::with_capacity(qs.len() * times.len());
    let mut column = vec![0.0; n_samples];
    for (ti, &t) in times.iter().enumerate() {
        for (qi, &q) in qs.iter().enumerate() {
            for (slot, row) in column.iter_mut().zip(&per_sample) {
                *slot = row[ti * qs.len() + qi];
            }
            points.push(McPoint { q, distance: geom.distance(p, q), t, estimate: mean_stderr(&column).into() });
        }
    }
    Ok(points)
}

/// Sampled commutator norm at depth `t`, with the trajectory `0..=t` in `per_t`.
#[allow(clippy::too_many_arguments)]
pub fn eta_mc(
    op_p: &LocalOperator,
    op_q: &LocalOperator,
    geom: &ChainGeometry,
    p: usize,
    q: usize,
    t: u64,
    n_samples: usize,
    master_seed: u64,
) -> Result<EtaEstimate> {
    let times: Vec<u64> = (0..=t).collect();
    let points = eta_mc_grid(op_p, op_q, geom, p, &[q], &times, n_samples, master_seed)?;
    let per_t: Vec<MeanStderr> = points
        .iter()
        .map(|pt| MeanStderr { mean: pt.estimate.mean, stderr: pt.estimate.stderr, n: pt.estimate.n_samples })
        .collect();
    let last = points.last().expect("t grid is non-empty").estimate.clone();
    Ok(EtaEstimate { per_t: Some(per_t), ..last })
}

/// Outcome of the light-cone sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightConeReport {
    pub samples: usize,
    /// Samples whose gate support never connected `p` to `q`.
    pub disconnected: usize,
    /// Largest scaled commutator norm among the disconnected samples.
    pub max_disconnected_norm: f64,
}

/// Evolves `n_samples` circuits of depth `t` and checks that `q` outside the
/// sampled support commutes with the evolved `O_p`.
#[allow(clippy::too_many_arguments)]
pub fn light_cone_sweep(
    op_p: &LocalOperator,
    op_q: &LocalOperator,
    geom: &ChainGeometry,
    p: usize,
    q: usize,
    t: usize,
    n_samples: usize,
    master_seed: u64,
) -> Result<LightConeReport> {
    check_dense(geom)?;
    let start = DenseOperator::embed(geom, op_p, p)?;
    let results: Vec<Option<f64>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| -> Result<Option<f64>> {
            let sample = sample_circuit(geom, t, SeedPath::new(master_seed, i));
            let reversed: Vec<usize> = sample.edges.iter().rev().copied().collect();
            if support_after(geom, p, &reversed)[q] {
                return Ok(None);
            }
            let x = heisenberg_evolve(&start, &sample)?;
            Ok(Some(x.commutator_norm_scaled(op_q, q)))
        })
        .collect::<Result<_>>()?;
    let norms: Vec<f64> = results.into_iter().flatten().collect();
    Ok(LightConeReport {
        samples: n_samples,
        disconnected: norms.len(),
        max_disconnected_norm: norms.iter().copied().fold(0.0, f64::max),
    })
}

fn kron(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    a.kronecker(b)
}

/// Permutation matrix on the doubled two-site space exchanging the copies on the
/// sites selected by `(swap_a, swap_b)`. Index layout: `((a b) of copy 1, (a b) of copy 2)`.
fn doubled_swap(d: usize, swap_a: bool, swap_b: bool) -> DMatrix<Complex64> {
    let big = d * d;
    let n = big * big;
    let mut m = DMatrix::from_element(n, n, ZERO);
    for i in 0..n {
        let (x, y) = (i / big, i % big);
        let (mut xa, mut xb, mut ya, mut yb) = (x / d, x % d, y / d, y % d);
        if swap_a {
            std::mem::swap(&mut xa, &mut ya);
        }
        if swap_b {
            std::mem::swap(&mut xb, &mut yb);
        }
        let j = (xa * d + xb) * big + ya * d + yb;
        m[(j, i)] = Complex64::new(1.0, 0.0);
    }
    m
}

/// Sampled coefficients of the one-edge twirl of the half swap `T_a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwirlEstimate {
    /// Coefficient of the identity.
    pub identity: MeanStderr,
    /// Coefficient of the full two-site swap.
    pub swap: MeanStderr,
    /// The analytic value of both, `d/(d^2+1)`.
    pub expected: f64,
}

/// Estimates `E[U⊗² (T_a ⊗ 1_b) U†⊗²] = c1 1 + c2 T_ab` on two qudits.
///
/// Per sample, `c1` is read from the entries `Y_{ij,ij}` and `c2` from `Y_{ij,ji}`
/// (`i ≠ j`), averaged over all ordered pairs. Writing row `i` of `U` as a `d x d`
/// matrix `R_i` these are `Tr(R_i R_i† R_j R_j†)` and `||R_i R_j†||_2^2`.
pub fn twirl_estimate(d: usize, n_samples: usize, master_seed: u64) -> Result<TwirlEstimate> {
    check_samples(n_samples)?;
    if d < 2 {
        return Err(Error::InvalidArgument("local dimension must be at least 2".into()));
    }
    let big = d * d;
    let pairs = (big * (big - 1)) as f64;
    let per_sample: Vec<(f64, f64)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeedPath::new(master_seed, i).rng();
            let u = haar_unitary(big, &mut rng);
            let rows: Vec<DMatrix<Complex64>> =
                (0..big).map(|k| DMatrix::from_fn(d, d, |x, y| u[(k, x * d + y)])).collect();
            let grams: Vec<DMatrix<Complex64>> = rows.iter().map(|r| r * r.adjoint()).collect();
            let (mut c1, mut c2) = (0.0, 0.0);
            for i in 0..big {
                for j in 0..big {
                    if i == j {
                        continue;
                    }
                    c1 += (&grams[i] * &grams[j]).trace().re;
                    c2 += (&rows[i] * rows[j].adjoint()).norm_squared();
                }
            }
            (c1 / pairs, c2 / pairs)
        })
        .collect();
    let c1: Vec<f64> = per_sample.iter().map(|x| x.0).collect();
    let c2: Vec<f64> = per_sample.iter().map(|x| x.1).collect();
    let df = d as f64;
    Ok(TwirlEstimate { identity: mean_stderr(&c1), swap: mean_stderr(&c2), expected: df / (df * df + 1.0) })
}

/// Sampled one-edge twirl of `(O ⊗ 1)⊗²` against `α 1 + β T_ab`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepR2Report {
    pub alpha: f64,
    pub beta: f64,
    /// Largest `|mean - analytic|` over all entries of the doubled two-site matrix.
    pub max_deviation: f64,
    /// Largest per-entry standard error.
    pub max_stderr: f64,
    /// Largest per-entry deviation beyond `1e-12`, in units of that entry's
    /// standard error.
    pub max_z: f64,
    pub identity_coeff: MeanStderr,
    pub swap_coeff: MeanStderr,
    /// `Tr(Y Π±) / Tr(Π±)` of the sampled mean, and the analytic `α ± β`.
    pub symmetric_weight: (f64, f64),
    pub antisymmetric_weight: (f64, f64),
}

impl OneStepR2Report {
    pub fn passes(&self) -> bool {
        self.max_z < 3.0
            && (self.symmetric_weight.0 - self.symmetric_weight.1).abs() < 1e-10
            && (self.antisymmetric_weight.0 - self.antisymmetric_weight.1).abs() < 1e-10
    }
}

/// Checks `∫dU U⊗² (O⊗1)⊗² U†⊗² = α 1 + β T` entrywise.
///
/// A sample gives `Y = Z ⊗ Z` with `Z = U (O⊗1) U†`. Conjugating by a diagonal phase
/// or a permutation of the two-qudit basis leaves the Haar average unchanged, so
/// each sample is averaged over that group: the entries `Y_{ii,ii}`, `Y_{ij,ij}` and
/// `Y_{ij,ji}` pool over indices and every other entry averages to zero.
pub fn one_step_r2_check(op: &LocalOperator, n_samples: usize, master_seed: u64) -> Result<OneStepR2Report> {
    check_samples(n_samples)?;
    let d = op.dim();
    if d.pow(4) > DENSE_LIMIT {
        return Err(Error::SizeGuard(format!("two-site doubled space d^4 = {} exceeds {DENSE_LIMIT}", d.pow(4))));
    }
    let big = d * d;
    let x1 = kron(op.matrix(), &DMatrix::identity(d, d));
    let per_sample: Vec<[f64; 3]> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeedPath::new(master_seed, i).rng();
            let u = haar_unitary(big, &mut rng);
            let z = &u * &x1 * u.adjoint();
            let mut diag = 0.0;
            let mut same = 0.0;
            let mut cross = 0.0;
            for a in 0..big {
                diag += (z[(a, a)] * z[(a, a)]).re;
                for b in 0..big {
                    if a != b {
                        same += (z[(a, a)] * z[(b, b)]).re;
                        cross += (z[(a, b)] * z[(b, a)]).re;
                    }
                }
            }
            let pairs = (big * (big - 1)) as f64;
            [diag / big as f64, same / pairs, cross / pairs]
        })
        .collect();
    let class = |k: usize| mean_stderr(&per_sample.iter().map(|s| s[k]).collect::<Vec<_>>());
    let (diag, same, cross) = (class(0), class(1), class(2));

    let df = d as f64;
    let tr = op.trace();
    let p2 = op.trace_of_square();
    let x2 = tr * tr / p2;
    let d4m1 = df.powi(4) - 1.0;
    let alpha = p2 * (x2 * df.powi(3) - 1.0) / (df * d4m1);
    let beta = p2 * (df - x2) / d4m1;

    let mut max_deviation: f64 = 0.0;
    let mut max_stderr: f64 = 0.0;
    let mut max_z: f64 = 0.0;
    for (est, expect) in [(diag, alpha + beta), (same, alpha), (cross, beta)] {
        let dev = (est.mean - expect).abs();
        max_deviation = max_deviation.max(dev);
        max_stderr = max_stderr.max(est.stderr);
        let excess = (dev - 1e-12).max(0.0);
        let z = if excess == 0.0 { 0.0 } else { excess / est.stderr };
        max_z = max_z.max(z);
    }

    // Π± contractions of the pooled mean matrix
    let n = big as f64;
    let trace_y = n * diag.mean + n * (n - 1.0) * same.mean;
    let trace_yt = n * diag.mean + n * (n - 1.0) * cross.mean;
    let symmetric = (trace_y + trace_yt) / (n * (n + 1.0));
    let antisymmetric = (trace_y - trace_yt) / (n * (n - 1.0));
    Ok(OneStepR2Report {
        alpha,
        beta,
        max_deviation,
        max_stderr,
        max_z,
        identity_coeff: same,
        swap_coeff: cross,
        symmetric_weight: (symmetric, alpha + beta),
        antisymmetric_weight: (antisymmetric, alpha - beta),
    })
}

/// One coefficient of the sampled one-step image against its analytic value.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientCheck {
    pub label: String,
    pub analytic: f64,
    pub sampled: MeanStderr,
}

impl CoefficientCheck {
    pub fn deviation(&self) -> f64 {
        (self.sampled.mean - self.analytic).abs()
    }

    pub fn passes(&self) -> bool {
        self.deviation() <= 3.0 * self.sampled.stderr + 1e-10
    }
}

/// Samples one full circuit step on `O_p ⊗ O_p` and expands each outcome in
/// `{O_p⊗², T_S}`, to compare with the analytic one-step image.
///
/// When the chosen edge misses `p` the image is `O_p⊗²` itself. Otherwise it is
/// `Z ⊗ Z` on the edge, which is projected onto
/// `{(O⊗1)⊗², 1, T_a, T_b, T_ab}` through their Gram matrix.
pub fn one_step_coefficients_mc(
    op_p: &LocalOperator,
    geom: &ChainGeometry,
    p: usize,
    n_samples: usize,
    master_seed: u64,
) -> Result<Vec<CoefficientCheck>> {
    check_samples(n_samples)?;
    let d = geom.local_dim();
    if d.pow(4) > DENSE_LIMIT || op_p.dim() != d || p >= geom.sites() {
        return Err(Error::InvalidArgument("one-step check needs d^4 <= 256 and a valid O_p, p".into()));
    }
    let big = d * d;
    let id_d = DMatrix::<Complex64>::identity(d, d);
    let x_first = kron(op_p.matrix(), &id_d);
    let x_second = kron(&id_d, op_p.matrix());
    let swaps = [
        DMatrix::<Complex64>::identity(big * big, big * big),
        doubled_swap(d, true, false),
        doubled_swap(d, false, true),
        doubled_swap(d, true, true),
    ];
    let basis_for = |x1: &DMatrix<Complex64>| {
        let mut b = vec![kron(x1, x1)];
        b.extend(swaps.iter().cloned());
        let gram = DMatrix::from_fn(5, 5, |i, j| b[i].dotc(&b[j]));
        (b, gram.lu())
    };
    let (basis_first, lu_first) = basis_for(&x_first);
    let (basis_second, lu_second) = basis_for(&x_second);

    let arcs = geom.num_arcs();
    let per_sample: Vec<Vec<f64>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeedPath::new(master_seed, i).rng();
            let edge = rng.random_range(0..geom.sites());
            let u = haar_unitary(big, &mut rng);
            let (a, b) = geom.edge(edge);
            let mut row = vec![0.0; arcs + 1];
            let (x1, basis, lu) = if a == p {
                (&x_first, &basis_first, &lu_first)
            } else if b == p {
                (&x_second, &basis_second, &lu_second)
            } else {
                row[0] = 1.0;
                return row;
            };
            let z = &u * x1 * u.adjoint();
            let y = kron(&z, &z);
            let rhs = nalgebra::DVector::from_fn(5, |k, _| basis[k].dotc(&y));
            let c = lu.solve(&rhs).expect("Gram matrix of an independent basis");
            let arc_index = |start: usize, len: usize| geom.arc_index(&geom.arc(start, len).expect("arc"));
            row[0] += c[0].re;
            row[1 + arc_index(0, 0)] += c[1].re;
            row[1 + arc_index(a, 1)] += c[2].re;
            row[1 + arc_index(b, 1)] += c[3].re;
            row[1 + arc_index(a, 2)] += c[4].re;
            row
        })
        .collect();

    let analytic = r2_image(op_p, geom, p, Time::Steps(1))?;
    let mut checks = Vec::with_capacity(arcs + 1);
    for k in 0..=arcs {
        let column: Vec<f64> = per_sample.iter().map(|r| r[k]).collect();
        let (label, value) = if k == 0 {
            ("O_p⊗O_p".to_string(), analytic.amp_op)
        } else {
            (format!("T{}", geom.arc_at(k - 1).label(geom)), analytic.amp_arcs[k - 1])
        };
        checks.push(CoefficientCheck { label, analytic: value, sampled: mean_stderr(&column) });
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ops() -> (LocalOperator, LocalOperator) {
        (LocalOperator::diagonal(&[0.5, 0.3]).unwrap(), LocalOperator::diagonal(&[0.7, 0.1]).unwrap())
    }

    #[test]
    fn haar_is_unitary() {
        let mut rng = SeedPath::new(1, 0).rng();
        for dim in [2, 4, 9] {
            let u = haar_unitary(dim, &mut rng);
            let err = (u.adjoint() * &u - DMatrix::identity(dim, dim)).camax();
            assert!(err < 1e-10);
        }
    }

    #[test]
    fn haar_low_moments() {
        let n = 100_000;
        let mut rng = SeedPath::new(7, 0).rng();
        let mut abs00 = Vec::with_capacity(n);
        let mut re01 = Vec::with_capacity(n);
        let mut im10 = Vec::with_capacity(n);
        for _ in 0..n {
            let u = haar_unitary(4, &mut rng);
            abs00.push(u[(0, 0)].norm_sqr());
            re01.push(u[(0, 1)].re);
            im10.push(u[(1, 0)].im);
        }
        let s = mean_stderr(&abs00);
        assert!((s.mean - 0.25).abs() < 3.0 * s.stderr);
        for xs in [re01, im10] {
            let s = mean_stderr(&xs);
            assert!(s.mean.abs() < 3.0 * s.stderr);
        }
    }

    #[test]
    fn haar_left_invariance() {
        for dim in [4usize, 9] {
            let mut rng = SeedPath::new(3, dim as u64).rng();
            let v0 = haar_unitary(dim, &mut rng);
            let n = 100_000;
            let mut plain = Vec::with_capacity(n);
            let mut shifted = Vec::with_capacity(n);
            for _ in 0..n {
                let u = haar_unitary(dim, &mut rng);
                plain.push(u.trace().norm_sqr());
                shifted.push((&v0 * &u).trace().norm_sqr());
            }
            for xs in [plain, shifted] {
                let s = mean_stderr(&xs);
                assert!((s.mean - 1.0).abs() < 3.0 * s.stderr, "dim {dim}: {s:?}");
            }
        }
    }

    #[test]
    fn phase_correction_matters() {
        // without the correction, Re(U_00) of a QR factor is biased towards one sign
        let mut rng = SeedPath::new(5, 0).rng();
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| haar_unitary(2, &mut rng)[(0, 0)].re).collect();
        let s = mean_stderr(&xs);
        assert!(s.mean.abs() < 3.0 * s.stderr);
    }

    #[test]
    fn circuits_are_reproducible() {
        let g = ChainGeometry::new(5, 2).unwrap();
        let a = sample_circuit(&g, 12, SeedPath::new(9, 4));
        let b = sample_circuit(&g, 12, SeedPath::new(9, 4));
        assert_eq!(a, b);
        let c = sample_circuit(&g, 12, SeedPath::new(9, 5));
        assert_ne!(a.edges, c.edges);
        assert_eq!(sample_circuit(&g, 0, SeedPath::new(1, 1)).depth(), 0);
    }

    #[test]
    fn edge_histogram_is_uniform() {
        let g = ChainGeometry::new(6, 2).unwrap();
        let mut rng = SeedPath::new(11, 0).rng();
        let n = 100_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            counts[rng.random_range(0..g.sites())] += 1;
        }
        let expected = n as f64 / 6.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 0.999 quantile of chi-square with 5 degrees of freedom
        assert!(chi2 < 20.515, "chi2 = {chi2}");
    }

    #[test]
    fn dense_embedding_matches_reference() {
        let g = ChainGeometry::new(3, 2).unwrap();
        let op = LocalOperator::from_row_major(2, &[(0.5, 0.0), (0.1, 0.2), (0.1, -0.2), (0.3, 0.0)]).unwrap();
        for site in 0..3 {
            let x = DenseOperator::embed(&g, &op, site).unwrap();
            let reference = crate::swapcalc::embed_dense(&g, &op, site);
            assert!((x.to_matrix() - reference).camax() < 1e-15);
        }
    }

    #[test]
    fn gate_conjugation_matches_dense_product() {
        let g = ChainGeometry::new(4, 2).unwrap();
        let (op_p, _) = ops();
        let mut rng = SeedPath::new(2, 0).rng();
        for edge in 0..4 {
            let u = haar_unitary(4, &mut rng);
            let mut x = DenseOperator::embed(&g, &op_p, 1).unwrap();
            let before = x.to_matrix();
            x.conjugate_gate(edge, &u);
            let (a, b) = g.edge(edge);
            let full = DMatrix::from_fn(16, 16, |i, j| {
                let digit = |k: usize, s: usize| (k >> (3 - s)) & 1;
                let rest_i = (0..4).filter(|&s| s != a && s != b).all(|s| digit(i, s) == digit(j, s));
                if rest_i {
                    u[(digit(i, a) * 2 + digit(i, b), digit(j, a) * 2 + digit(j, b))]
                } else {
                    ZERO
                }
            });
            let expect = full.adjoint() * before * &full;
            assert!((x.to_matrix() - expect).camax() < 1e-12, "edge {edge}");
        }
    }

    #[test]
    fn heisenberg_basics() {
        let g = ChainGeometry::new(5, 2).unwrap();
        let (op_p, op_q) = ops();
        let x = DenseOperator::embed(&g, &op_p, 2).unwrap();
        let empty = sample_circuit(&g, 0, SeedPath::new(1, 0));
        assert_eq!(heisenberg_evolve(&x, &empty).unwrap(), x);
        let long = sample_circuit(&g, 50, SeedPath::new(1, 1));
        let y = heisenberg_evolve(&x, &long).unwrap();
        assert_relative_eq!(y.frobenius_norm(), x.frobenius_norm(), max_relative = 1e-9);
        // one gate on (2,3): the image commutes with everything off {2,3}
        let mut one = sample_circuit(&g, 1, SeedPath::new(1, 2));
        one.edges[0] = 2;
        let z = heisenberg_evolve(&x, &one).unwrap();
        for site in [0, 1, 4] {
            assert!(z.commutator_norm_scaled(&op_q, site) < 1e-13);
        }
        assert!(z.commutator_norm_scaled(&op_q, 3) > 1e-3);
        let big = ChainGeometry::new(9, 2).unwrap();
        assert!(DenseOperator::embed(&big, &op_p, 0).is_err());
    }

    #[test]
    fn commutator_norm_forms_agree() {
        let g = ChainGeometry::new(4, 2).unwrap();
        let (op_p, _) = ops();
        let op_q = LocalOperator::from_row_major(2, &[(0.6, 0.0), (0.1, 0.05), (0.1, -0.05), (0.2, 0.0)]).unwrap();
        for i in 0..20 {
            let x = DenseOperator::embed(&g, &op_p, 0).unwrap();
            let y = heisenberg_evolve(&x, &sample_circuit(&g, 6, SeedPath::new(4, i))).unwrap();
            for q in 0..4 {
                let direct = y.commutator_norm_scaled(&op_q, q);
                let spectral = y.commutator_norm_spectral(&op_q, q);
                assert!((direct - spectral).abs() <= 1e-9 * direct.max(1e-300) + 1e-15);
            }
        }
    }

    #[test]
    fn eta_mc_basics() {
        let g = ChainGeometry::new(4, 2).unwrap();
        let (op_p, op_q) = ops();
        let e = eta_mc(&op_p, &op_q, &g, 0, 2, 6, 50, 3).unwrap();
        let per_t = e.per_t.as_ref().unwrap();
        assert_eq!(per_t.len(), 7);
        assert_eq!(per_t[0].mean, 0.0);
        assert_eq!(per_t[0].stderr, 0.0);
        // a gate away from p conjugates the identity factor, exact only up to roundoff
        assert_eq!(per_t[1].mean, 0.0);
        assert!(e.mean > 0.0 && e.stderr > 0.0);
        assert!(eta_mc(&op_p, &op_q, &g, 0, 2, 6, 1, 3).is_err());
        let again = eta_mc(&op_p, &op_q, &g, 0, 2, 6, 50, 3).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn trajectory_prefix_matches_fresh_evolution() {
        let g = ChainGeometry::new(4, 2).unwrap();
        let (op_p, op_q) = ops();
        let start = DenseOperator::embed(&g, &op_p, 1).unwrap();
        for i in 0..20 {
            let path = SeedPath::new(8, i);
            let norms = trajectory_norms(&start, 1, &op_q, &[3], &[5], 5, path);
            let mut sample = sample_circuit(&g, 5, path);
            sample.edges.reverse();
            sample.unitaries.reverse();
            let y = heisenberg_evolve(&start, &sample).unwrap();
            assert!((norms[0] - y.commutator_norm_scaled(&op_q, 3)).abs() < 1e-13, "sample {i}");
        }
    }

    #[test]
    fn stderr_shrinks_with_samples() {
        let g = ChainGeometry::new(4, 2).unwrap();
        let (op_p, op_q) = ops();
        let small = eta_mc_grid(&op_p, &op_q, &g, 0, &[1], &[8], 500, 21).unwrap();
        let large = eta_mc_grid(&op_p, &op_q, &g, 0, &[1], &[8], 2000, 21).unwrap();
        let ratio = small[0].estimate.stderr / large[0].estimate.stderr;
        assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn twirl_small_run() {
        let e = twirl_estimate(2, 2000, 1).unwrap();
        assert!((e.identity.mean - 0.4).abs() < 4.0 * e.identity.stderr);
        assert!((e.swap.mean - 0.4).abs() < 4.0 * e.swap.stderr);
    }

    #[test]
    fn twirl_entries_match_dense_conjugation() {
        let d = 2;
        let mut rng = SeedPath::new(1, 0).rng();
        let u = haar_unitary(4, &mut rng);
        let uu = kron(&u, &u);
        let y = &uu * doubled_swap(d, true, false) * uu.adjoint();
        let rows: Vec<DMatrix<Complex64>> = (0..4).map(|k| DMatrix::from_fn(2, 2, |x, z| u[(k, x * 2 + z)])).collect();
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let gi = &rows[i] * rows[i].adjoint();
                let gj = &rows[j] * rows[j].adjoint();
                assert_relative_eq!(y[(i * 4 + j, i * 4 + j)].re, (gi * gj).trace().re, epsilon = 1e-12);
                let h = &rows[i] * rows[j].adjoint();
                assert_relative_eq!(y[(i * 4 + j, j * 4 + i)].re, h.norm_squared(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn one_step_identity_is_exact() {
        let id = LocalOperator::identity(2).unwrap();
        let rep = one_step_r2_check(&id, 200, 4).unwrap();
        assert!(rep.max_deviation < 1e-12);
        assert_eq!(rep.beta, 0.0);
        assert!(rep.passes());
    }

    #[test]
    fn one_step_weights() {
        let (op_p, _) = ops();
        let rep = one_step_r2_check(&op_p, 5000, 12).unwrap();
        assert!((rep.symmetric_weight.0 - rep.symmetric_weight.1).abs() < 1e-12);
        assert!((rep.antisymmetric_weight.0 - rep.antisymmetric_weight.1).abs() < 1e-12);
    }

    #[test]
    fn one_step_coefficients_small_run() {
        let g = ChainGeometry::new(4, 2).unwrap();
        let (op_p, _) = ops();
        let checks = one_step_coefficients_mc(&op_p, &g, 1, 400, 6).unwrap();
        assert_eq!(checks.len(), 15);
        assert_eq!(checks[0].label, "O_p⊗O_p");
        let mean_total: f64 = checks.iter().map(|c| c.sampled.mean).sum();
        assert!(mean_total.is_finite());
        for c in &checks {
            assert!(c.deviation() < 5.0 * c.sampled.stderr + 1e-10, "{c:?}");
        }
    }

    #[test]
    fn support_tracking() {
        let g = ChainGeometry::new(6, 2).unwrap();
        let s = support_after(&g, 0, &[2, 0, 1, 5]);
        assert_eq!(s, vec![true, true, true, false, false, true]);
    }
}
