//! The second-moment map restricted to swaps on contiguous arcs.
//!
//! One circuit step acts on `T_S` as follows: with probability `(L-2)/L` the chosen
//! edge lies inside or outside `S` and `T_S` is unchanged. Each of the two boundary
//! edges of a non-sink arc (probability `1/L` each) twirls the half-swap into
//! `N_d (T_{S grown} + T_{S shrunk})`. The empty arc and the full ring are fixed.
//! Collecting these weights column by column gives the sparse matrix `M`.
//!
//! `R_2^t(O_p ⊗ O_p)` then expands as
//! `r^t O_p⊗² + (2A/L)(1-r^t)/(1-r) 1 + (B/L) Σ_S a(S,t) T_S`, where
//! `a(S,t) = Σ_{l<t} r^l (M^{t-1-l} c0)_S` and `c0` has unit entries on the two
//! fiducial arcs next to `p`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lattice::{Arc, ChainGeometry};
use crate::operators::{model_constants, LocalOperator, ModelConstants};
use crate::Time;

/// Sparse moment matrix over the arc basis, stored by rows.
#[derive(Debug, Clone)]
pub struct MomentMatrix {
    geom: ChainGeometry,
    r: f64,
    u: f64,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl MomentMatrix {
    pub fn build(geom: &ChainGeometry) -> Self {
        let l = geom.sites() as f64;
        let d = geom.local_dim() as f64;
        let r = (l - 2.0) / l;
        let u = d / ((d * d + 1.0) * l);
        let last = geom.num_arcs() - 1;
        let mut triplets = Vec::with_capacity(5 * geom.num_arcs());
        triplets.push((0, 0, 1.0));
        triplets.push((last, last, 1.0));
        for col in 1..last {
            let arc = geom.arc_at(col);
            triplets.push((col, col, r));
            for nb in geom.derived_neighbors(&arc).expect("interior arc") {
                triplets.push((geom.arc_index(&nb), col, u));
            }
        }
        Self::from_triplets(geom, r, u, triplets)
    }

    fn from_triplets(geom: &ChainGeometry, r: f64, u: f64, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(row, col, _)| (row, col));
        let dim = geom.num_arcs();
        let mut row_ptr = vec![0; dim + 1];
        let mut cols: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (row, col, w) in triplets {
            if last == Some((row, col)) {
                *vals.last_mut().expect("merged entry") += w;
                continue;
            }
            cols.push(col);
            vals.push(w);
            row_ptr[row + 1] += 1;
            last = Some((row, col));
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        MomentMatrix { geom: *geom, r, u, row_ptr, cols, vals }
    }

    /// Copy of the matrix with `delta` added at `(row, col)`; used by the check
    /// suite as a negative control.
    #[doc(hidden)]
    pub fn perturbed(&self, row: usize, col: usize, delta: f64) -> Self {
        let mut triplets: Vec<(usize, usize, f64)> = self.entries().collect();
        triplets.push((row, col, delta));
        Self::from_triplets(&self.geom, self.r, self.u, triplets)
    }

    pub fn geometry(&self) -> &ChainGeometry {
        &self.geom
    }

    pub fn dim(&self) -> usize {
        self.geom.num_arcs()
    }

    /// Diagonal weight of non-sink arcs, `(L-2)/L`.
    pub fn r(&self) -> f64 {
        self.r
    }

    /// Weight of a single grow or shrink move, `d/((d^2+1)L)`.
    pub fn u(&self) -> f64 {
        self.u
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        let span = self.row_ptr[row]..self.row_ptr[row + 1];
        match self.cols[span.clone()].binary_search(&col) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn get(&self, row: &Arc, col: &Arc) -> f64 {
        self.entry(self.geom.arc_index(row), self.geom.arc_index(col))
    }

    /// Nonzero entries as `(row, col, weight)`, row-major.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim()).flat_map(move |row| {
            (self.row_ptr[row]..self.row_ptr[row + 1]).map(move |k| (row, self.cols[k], self.vals[k]))
        })
    }

    /// `y = M x`. Each row adds its terms in ascending order, which makes the
    /// result independent of the basis order: arcs related by a reflection of
    /// the ring get bitwise equal coefficients from mirror-symmetric input.
    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.dim());
        assert_eq!(y.len(), self.dim());
        let mut terms: Vec<f64> = Vec::with_capacity(8);
        for (row, out) in y.iter_mut().enumerate() {
            let span = self.row_ptr[row]..self.row_ptr[row + 1];
            terms.clear();
            terms.extend(self.cols[span.clone()].iter().zip(&self.vals[span]).map(|(&c, &w)| w * x[c]));
            terms.sort_unstable_by(f64::total_cmp);
            *out = terms.iter().sum();
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.apply_into(x, &mut y);
        y
    }

    /// Dense `M'`: rows and columns of the two sinks removed.
    pub fn sink_deleted(&self) -> DMatrix<f64> {
        let n = self.dim() - 2;
        let mut dense = DMatrix::zeros(n, n);
        for (row, col, w) in self.entries() {
            if (1..=n).contains(&row) && (1..=n).contains(&col) {
                dense[(row - 1, col - 1)] += w;
            }
        }
        dense
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut dense = DMatrix::zeros(self.dim(), self.dim());
        for (row, col, w) in self.entries() {
            dense[(row, col)] += w;
        }
        dense
    }
}

fn check_seed(m: &MomentMatrix, c0: &[f64]) -> Result<()> {
    if c0.len() != m.dim() {
        return Err(Error::InvalidArgument(format!(
            "coefficient vector has length {}, basis has {}",
            c0.len(),
            m.dim()
        )));
    }
    Ok(())
}

/// `c^(0), ..., c^(steps)` with `c^(n) = M^n c0`.
pub fn iterate_coefficients(m: &MomentMatrix, c0: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
    check_seed(m, c0)?;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(c0.to_vec());
    for n in 0..steps {
        let next = m.apply(&out[n]);
        out.push(next);
    }
    Ok(out)
}

/// Unit vectors on the fiducial arcs `{p-1,p}` and `{p,p+1}`.
pub fn fiducial_seeds(geom: &ChainGeometry, p: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if p >= geom.sites() {
        return Err(Error::InvalidArgument(format!("p = {p} outside ring of {} sites", geom.sites())));
    }
    let (left, right) = geom.fiducials(p);
    let mut c1 = vec![0.0; geom.num_arcs()];
    let mut c2 = vec![0.0; geom.num_arcs()];
    c1[geom.arc_index(&left)] = 1.0;
    c2[geom.arc_index(&right)] = 1.0;
    Ok((c1, c2))
}

fn discounted_history(m: &MomentMatrix, c0: &[f64], t: u64) -> Result<Vec<f64>> {
    let history = iterate_coefficients(m, c0, t as usize - 1)?;
    let mut a = vec![0.0; m.dim()];
    for l in 0..t as usize {
        let weight = m.r().powi(l as i32);
        for (acc, c) in a.iter_mut().zip(&history[t as usize - 1 - l]) {
            *acc += weight * c;
        }
    }
    Ok(a)
}

/// `a_1(S,t)` and `a_2(S,t)` separately, summed term by term from the stored history.
pub fn a_coefficients_split(m: &MomentMatrix, p: usize, t: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if t == 0 {
        return Err(Error::InvalidArgument("a(S,t) needs t >= 1".into()));
    }
    let (c1, c2) = fiducial_seeds(m.geometry(), p)?;
    Ok((discounted_history(m, &c1, t)?, discounted_history(m, &c2, t)?))
}

/// `a_1(S,t) + a_2(S,t)` over the arc basis.
pub fn a_coefficients(m: &MomentMatrix, p: usize, t: u64) -> Result<Vec<f64>> {
    let (a1, a2) = a_coefficients_split(m, p, t)?;
    Ok(a1.iter().zip(&a2).map(|(x, y)| x + y).collect())
}

/// Running form of the discounted history: `a(t+1) = M a(t) + r^t c0`, `a(0) = 0`.
#[derive(Debug, Clone)]
pub struct HistoryAccumulator<'m> {
    matrix: &'m MomentMatrix,
    seed: Vec<f64>,
    a: Vec<f64>,
    scratch: Vec<f64>,
    r_pow: f64,
    t: u64,
}

impl<'m> HistoryAccumulator<'m> {
    pub fn new(matrix: &'m MomentMatrix, seed: Vec<f64>) -> Result<Self> {
        check_seed(matrix, &seed)?;
        let dim = matrix.dim();
        Ok(HistoryAccumulator { matrix, seed, a: vec![0.0; dim], scratch: vec![0.0; dim], r_pow: 1.0, t: 0 })
    }

    pub fn time(&self) -> u64 {
        self.t
    }

    pub fn values(&self) -> &[f64] {
        &self.a
    }

    pub fn step(&mut self) {
        self.matrix.apply_into(&self.a, &mut self.scratch);
        for (out, s) in self.scratch.iter_mut().zip(&self.seed) {
            *out += self.r_pow * s;
        }
        std::mem::swap(&mut self.a, &mut self.scratch);
        self.r_pow *= self.matrix.r();
        self.t += 1;
    }

    pub fn advance_to(&mut self, t: u64) -> Result<()> {
        if t < self.t {
            return Err(Error::InvalidArgument(format!("cannot rewind from t = {} to t = {t}", self.t)));
        }
        while self.t < t {
            self.step();
        }
        Ok(())
    }
}

/// Sink coefficients `a(∅,t)` and `a(V,t)` from the running sum over the sinks'
/// neighbours: `a(sink,t) = 2u Σ_{S' ~ sink} Σ_{n=1}^{t-1} a(S',n)`.
pub fn sink_running_sum(m: &MomentMatrix, p: usize, t: u64) -> Result<(f64, f64)> {
    let geom = *m.geometry();
    let (c1, c2) = fiducial_seeds(&geom, p)?;
    let seed: Vec<f64> = c1.iter().zip(&c2).map(|(x, y)| x + y).collect();
    let mut acc = HistoryAccumulator::new(m, seed)?;
    let l = geom.sites();
    let singles: Vec<usize> = (0..l).map(|s| geom.arc_index(&geom.arc(s, 1).expect("arc"))).collect();
    let co_singles: Vec<usize> = (0..l).map(|s| geom.arc_index(&geom.arc(s, l - 1).expect("arc"))).collect();
    let (mut empty, mut full) = (0.0, 0.0);
    for _ in 1..t {
        acc.step();
        empty += singles.iter().map(|&i| acc.values()[i]).sum::<f64>();
        full += co_singles.iter().map(|&i| acc.values()[i]).sum::<f64>();
    }
    Ok((2.0 * m.u() * empty, 2.0 * m.u() * full))
}

/// Expansion of `R_2^t(O_p ⊗ O_p)` in `{O_p⊗², T_S : S ∈ W}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapCoefficients {
    pub amp_op: f64,
    /// Coefficient of each `T_S`, indexed like [`ChainGeometry::arcs`]. The `∅`
    /// entry holds the identity weight.
    pub amp_arcs: Vec<f64>,
    pub t: Time,
}

impl SwapCoefficients {
    /// `(Tr R_2^t(O⊗²), Tr O⊗²)`, both divided by `d^{2L}`.
    pub fn trace_balance(&self, geom: &ChainGeometry, model: &ModelConstants) -> (f64, f64) {
        let d = geom.local_dim() as f64;
        let target = model.x_squared * model.tr_square / (d * d);
        let mut total = self.amp_op * target;
        for (i, amp) in self.amp_arcs.iter().enumerate() {
            total += amp * d.powi(-(geom.arc_at(i).len() as i32));
        }
        (total, target)
    }

    /// `(Tr R_2^t(O⊗²) T_V, Tr O⊗² T_V)`, both divided by `d^L`.
    pub fn swap_trace_balance(&self, geom: &ChainGeometry, model: &ModelConstants) -> (f64, f64) {
        let d = geom.local_dim() as f64;
        let target = model.tr_square / d;
        let mut total = self.amp_op * target;
        for (i, amp) in self.amp_arcs.iter().enumerate() {
            total += amp * d.powi(geom.arc_at(i).len() as i32);
        }
        (total, target)
    }
}

/// Incremental evaluation of `R_2^t(O_p ⊗ O_p)` for increasing `t`.
#[derive(Debug, Clone)]
pub struct R2Evolution<'m> {
    model: ModelConstants,
    history: HistoryAccumulator<'m>,
}

impl<'m> R2Evolution<'m> {
    pub fn new(matrix: &'m MomentMatrix, op_p: &LocalOperator, p: usize) -> Result<Self> {
        let geom = *matrix.geometry();
        let model = model_constants(op_p, &geom)?;
        let (c1, c2) = fiducial_seeds(&geom, p)?;
        let seed = c1.iter().zip(&c2).map(|(x, y)| x + y).collect();
        Ok(R2Evolution { model, history: HistoryAccumulator::new(matrix, seed)? })
    }

    pub fn model(&self) -> &ModelConstants {
        &self.model
    }

    pub fn time(&self) -> u64 {
        self.history.time()
    }

    pub fn advance_to(&mut self, t: u64) -> Result<()> {
        self.history.advance_to(t)
    }

    pub fn step(&mut self) {
        self.history.step()
    }

    /// The summed history `a_1 + a_2` at the current time.
    pub fn a_values(&self) -> &[f64] {
        self.history.values()
    }

    pub fn coefficients(&self) -> SwapCoefficients {
        let m = &self.model;
        let t = self.history.time();
        let r_t = crate::pow_u64(m.r, t);
        let l = m.sites as f64;
        let scale = m.b / l;
        let mut amp_arcs: Vec<f64> = self.history.values().iter().map(|a| scale * a).collect();
        // (1 - r^t)/(1 - r) with 1 - r = 2/L
        amp_arcs[0] += 2.0 * m.a / l * (1.0 - r_t) * l / 2.0;
        SwapCoefficients { amp_op: r_t, amp_arcs, t: Time::Steps(t) }
    }
}

/// The stationary expansion: only `∅` and `V` survive, fixed by conservation of
/// `Tr X` and `Tr X T_V`.
pub fn stationary_coefficients(model: &ModelConstants, geom: &ChainGeometry) -> SwapCoefficients {
    let d = geom.local_dim() as f64;
    let dl = d.powi(geom.sites() as i32);
    let gap = (d - model.x_squared).max(0.0);
    let full = model.tr_square * gap / (d * d) / (dl - 1.0 / dl);
    let empty = model.x_squared * model.tr_square / (d * d) - full / dl;
    let mut amp_arcs = vec![0.0; geom.num_arcs()];
    amp_arcs[0] = empty;
    *amp_arcs.last_mut().expect("non-empty basis") = full;
    SwapCoefficients { amp_op: 0.0, amp_arcs, t: Time::Infinite }
}

pub fn r2_image(op_p: &LocalOperator, geom: &ChainGeometry, p: usize, t: Time) -> Result<SwapCoefficients> {
    match t {
        Time::Infinite => {
            if p >= geom.sites() {
                return Err(Error::InvalidArgument(format!("p = {p} outside ring of {} sites", geom.sites())));
            }
            Ok(stationary_coefficients(&model_constants(op_p, geom)?, geom))
        }
        Time::Steps(steps) => {
            let m = MomentMatrix::build(geom);
            let mut evo = R2Evolution::new(&m, op_p, p)?;
            evo.advance_to(steps)?;
            Ok(evo.coefficients())
        }
    }
}

/// `R_1^t(O_p^2) = r^t O_p^2 + (1-r^t) Tr(O_p^2)/d · 1`, returned as the two coefficients.
pub fn r1_image(op_p: &LocalOperator, geom: &ChainGeometry, t: Time) -> Result<(f64, f64)> {
    let m = model_constants(op_p, geom)?;
    let r_t = t.power(m.r);
    Ok((r_t, (1.0 - r_t) * m.tr_square / geom.local_dim() as f64))
}
