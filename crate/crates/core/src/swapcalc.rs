//! Overlaps of swap operators with `O_q ⊗ O_q T_V`.
//!
//! All values are divided by `d^L`. For an arc `S`,
//! `<T_S, O_q⊗² T_V> / d^L` is `d^{|S|-2} Tr(O_q)^2` when `q ∈ S` and
//! `d^{|S|-1} Tr(O_q^2)` otherwise; their difference `Δ_S` is non-negative by
//! Cauchy–Schwarz.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lattice::{Arc, ChainGeometry};
use crate::operators::LocalOperator;

/// Largest doubled-space dimension the dense oracle will enumerate.
pub const DENSE_ORACLE_LIMIT: usize = 4096;

/// Per-size overlaps for a fixed probe site `q` and observable `O_q`.
#[derive(Debug, Clone)]
pub struct OverlapTable {
    geom: ChainGeometry,
    q_site: usize,
    q1_by_size: Vec<f64>,
    q2_by_size: Vec<f64>,
    delta_by_size: Vec<f64>,
}

/// Rejects rings whose scaled overlaps `d^{|S|}` would leave double range.
pub(crate) fn check_scaled_range(geom: &ChainGeometry) -> Result<()> {
    let log = geom.sites() as f64 * (geom.local_dim() as f64).ln();
    if log > 700.0 {
        return Err(Error::SizeGuard(format!(
            "d^L = {}^{} overflows double precision in scaled arithmetic",
            geom.local_dim(),
            geom.sites()
        )));
    }
    Ok(())
}

fn check_site(geom: &ChainGeometry, site: usize, name: &str) -> Result<()> {
    if site >= geom.sites() {
        return Err(Error::InvalidArgument(format!("{name} = {site} outside ring of {} sites", geom.sites())));
    }
    Ok(())
}

fn check_dim(geom: &ChainGeometry, op: &LocalOperator) -> Result<()> {
    if op.dim() != geom.local_dim() {
        return Err(Error::Operator(format!(
            "operator dimension {} does not match local dimension {}",
            op.dim(),
            geom.local_dim()
        )));
    }
    Ok(())
}

impl OverlapTable {
    pub fn new(geom: &ChainGeometry, q_site: usize, op_q: &LocalOperator) -> Result<Self> {
        check_site(geom, q_site, "q")?;
        check_dim(geom, op_q)?;
        check_scaled_range(geom)?;
        let d = geom.local_dim() as f64;
        let tr = op_q.trace();
        let tr2 = op_q.trace_of_square();
        let gap = (d * tr2 - tr * tr).max(0.0);
        let mut q1 = Vec::with_capacity(geom.sites() + 1);
        let mut q2 = Vec::with_capacity(geom.sites() + 1);
        let mut delta = Vec::with_capacity(geom.sites() + 1);
        for size in 0..=geom.sites() {
            let scale = d.powi(size as i32 - 2);
            q1.push(scale * tr * tr);
            q2.push(scale * d * tr2);
            delta.push(scale * gap);
        }
        Ok(OverlapTable { geom: *geom, q_site, q1_by_size: q1, q2_by_size: q2, delta_by_size: delta })
    }

    pub fn q_site(&self) -> usize {
        self.q_site
    }

    pub fn q1_by_size(&self) -> &[f64] {
        &self.q1_by_size
    }

    pub fn q2_by_size(&self) -> &[f64] {
        &self.q2_by_size
    }

    pub fn delta_by_size(&self) -> &[f64] {
        &self.delta_by_size
    }

    /// `<T_S, O_q⊗² T_V> / d^L`.
    pub fn overlap(&self, arc: &Arc) -> f64 {
        if arc.contains(&self.geom, self.q_site) {
            self.q1_by_size[arc.len()]
        } else {
            self.q2_by_size[arc.len()]
        }
    }

    /// `Δ_S / d^L` for arcs containing `q`, zero otherwise.
    pub fn correction(&self, arc: &Arc) -> f64 {
        if arc.contains(&self.geom, self.q_site) {
            self.delta_by_size[arc.len()]
        } else {
            0.0
        }
    }
}

pub fn q_overlap(geom: &ChainGeometry, arc: &Arc, q_site: usize, op_q: &LocalOperator) -> Result<f64> {
    Ok(OverlapTable::new(geom, q_site, op_q)?.overlap(arc))
}

/// Scaled single-operator overlaps entering the bound for a pair of sites.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOverlaps {
    /// `Tr(O_p^2 O_q^2) / d^L` with both embedded.
    pub r1_op: f64,
    /// `<O_p⊗², O_q⊗² T_V> / d^L = Tr(O_p O_q O_p O_q) / d^L`.
    pub op_op: f64,
    /// `Tr(O_p^2) Tr(O_q^2) / d^2`, the overlap of the depolarized part.
    pub depolarized: f64,
}

/// Overlaps for arbitrary sites, including `p == q`.
pub fn pair_overlaps(
    op_p: &LocalOperator,
    op_q: &LocalOperator,
    geom: &ChainGeometry,
    p: usize,
    q: usize,
) -> Result<PairOverlaps> {
    check_site(geom, p, "p")?;
    check_site(geom, q, "q")?;
    check_dim(geom, op_p)?;
    check_dim(geom, op_q)?;
    let d = geom.local_dim() as f64;
    let depolarized = op_p.trace_of_square() * op_q.trace_of_square() / (d * d);
    if p != q {
        return Ok(PairOverlaps { r1_op: depolarized, op_op: depolarized, depolarized });
    }
    let a = op_p.matrix();
    let b = op_q.matrix();
    let a2b2 = (a * a * b * b).trace().re;
    let abab = (a * b * a * b).trace().re;
    Ok(PairOverlaps { r1_op: a2b2 / d, op_op: abab / d, depolarized })
}

fn reject_same_site(p: usize, q: usize) -> Result<()> {
    if p == q {
        return Err(Error::InvalidArgument(format!("p and q must be distinct sites, both are {p}")));
    }
    Ok(())
}

/// `<O_p⊗², O_q⊗² T_V> / d^L` for distinct sites.
pub fn op_op_overlap(
    op_p: &LocalOperator,
    op_q: &LocalOperator,
    geom: &ChainGeometry,
    p: usize,
    q: usize,
) -> Result<f64> {
    reject_same_site(p, q)?;
    Ok(pair_overlaps(op_p, op_q, geom, p, q)?.op_op)
}

/// `Tr(R_1^t(O_p^2) O_q^2) / d^L` for distinct sites. It carries no time argument:
/// the depolarized and untouched parts overlap `O_q^2` identically.
pub fn r1_overlap(op_p: &LocalOperator, op_q: &LocalOperator, geom: &ChainGeometry, p: usize, q: usize) -> Result<f64> {
    reject_same_site(p, q)?;
    Ok(pair_overlaps(op_p, op_q, geom, p, q)?.depolarized)
}

/// Digit of `site` in a row-major multi-index over `sites` qudits (site 0 most significant).
fn digit(index: usize, site: usize, sites: usize, d: usize) -> usize {
    (index / d.pow((sites - 1 - site) as u32)) % d
}

/// Permutation of doubled-space basis states exchanging the two copies on `mask` sites.
///
/// This is the nonzero pattern of the permutation matrix `T_S`, with
/// `T_S e_i = e_{perm[i]}`.
fn swap_permutation(geom: &ChainGeometry, mask: &[bool]) -> Vec<usize> {
    let d = geom.local_dim();
    let l = geom.sites();
    let dim = d.pow(l as u32);
    (0..dim * dim)
        .map(|i| {
            let (mut a, mut b) = (i / dim, i % dim);
            for (site, &swapped) in mask.iter().enumerate() {
                if swapped {
                    let stride = d.pow((l - 1 - site) as u32);
                    let (da, db) = (digit(a, site, l, d), digit(b, site, l, d));
                    a = a - da * stride + db * stride;
                    b = b - db * stride + da * stride;
                }
            }
            a * dim + b
        })
        .collect()
}

/// `op` acting on `site`, identity elsewhere, as a dense `d^L x d^L` matrix.
pub(crate) fn embed_dense(geom: &ChainGeometry, op: &LocalOperator, site: usize) -> DMatrix<Complex64> {
    let d = geom.local_dim();
    let l = geom.sites();
    let dim = d.pow(l as u32);
    let stride = d.pow((l - 1 - site) as u32);
    DMatrix::from_fn(dim, dim, |i, j| {
        let (di, dj) = (digit(i, site, l, d), digit(j, site, l, d));
        if i - di * stride == j - dj * stride {
            op.matrix()[(di, dj)]
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// Brute-force `Tr(T_S · O_q⊗² · T_V)` (unscaled) by enumerating the doubled space.
pub fn dense_swap_oracle(geom: &ChainGeometry, arc: &Arc, q_site: usize, op_q: &LocalOperator) -> Result<f64> {
    check_site(geom, q_site, "q")?;
    check_dim(geom, op_q)?;
    let dim = geom.hilbert_dim().filter(|&n| n.checked_mul(n).is_some_and(|n2| n2 <= DENSE_ORACLE_LIMIT)).ok_or_else(
        || {
            Error::SizeGuard(format!(
                "dense oracle needs d^(2L) <= {DENSE_ORACLE_LIMIT}, got d={} L={}",
                geom.local_dim(),
                geom.sites()
            ))
        },
    )?;
    let mask_s: Vec<bool> = (0..geom.sites()).map(|s| arc.contains(geom, s)).collect();
    let mask_v = vec![true; geom.sites()];
    let t_s = swap_permutation(geom, &mask_s);
    let t_v = swap_permutation(geom, &mask_v);
    let o = embed_dense(geom, op_q, q_site);
    // (T_S X T_V)_{ii} = X[π_S(i), π_V(i)] since both permutations are involutions
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..dim * dim {
        let (row, col) = (t_s[i], t_v[i]);
        acc += o[(row / dim, col / dim)] * o[(row % dim, col % dim)];
    }
    Ok(acc.re)
}
