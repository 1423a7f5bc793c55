//! The averaged commutator bound and its closed-form approximations.
//!
//! All bound values are divided by `d^{L/2}`. The exact evaluator pairs the
//! expansion of `R_2^t(O_p ⊗ O_p)` with the swap overlaps of `O_q ⊗ O_q`:
//!
//! `η_max^2 / d^L = 2 Tr(R_1^t(O_p^2) O_q^2) - 2 Tr(R_2^t(O_p⊗²) O_q⊗² T_V)`.
//!
//! Because `R_2` preserves `Tr(X T_V)`, this equals
//! `2 r^t (Tr(O_p^2 O_q^2) - Tr(O_p O_q O_p O_q)) + 2 Σ_{S ∋ q} amp_S Δ_S`,
//! which is the form returned. The first term vanishes for `p ≠ q`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::ChainGeometry;
use crate::moments::{a_coefficients_split, stationary_coefficients, MomentMatrix, R2Evolution, SwapCoefficients};
use crate::operators::{asymptotic_max, model_constants, LocalOperator, ModelConstants};
use crate::swapcalc::{check_scaled_range, pair_overlaps, OverlapTable, PairOverlaps};
use crate::Time;

const RADICAND_FLOOR: f64 = -1e-12;
const FORM_AGREEMENT: f64 = 1e-9;

fn clamp_radicand(x: f64, what: &str) -> Result<f64> {
    if x < RADICAND_FLOOR {
        return Err(Error::Inconsistent(format!("{what} radicand is {x:e}")));
    }
    Ok(x.max(0.0))
}

/// `Σ_{S ∋ q} amp_S Δ_S`, scaled by `d^{-L}`. Terms are added in ascending order,
/// so mirror-image probe sites give bitwise equal results.
pub fn spatial_correction(geom: &ChainGeometry, coeffs: &SwapCoefficients, table: &OverlapTable) -> f64 {
    let mut terms: Vec<f64> = coeffs
        .amp_arcs
        .iter()
        .enumerate()
        .map(|(i, amp)| amp * table.correction(&geom.arc_at(i)))
        .filter(|&x| x != 0.0)
        .collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// `Tr(R_2^t(O_p⊗²) O_q⊗² T_V) / d^L`.
pub fn swap_trace_term(
    geom: &ChainGeometry,
    coeffs: &SwapCoefficients,
    pair: &PairOverlaps,
    table: &OverlapTable,
) -> f64 {
    let arcs: f64 = coeffs.amp_arcs.iter().enumerate().map(|(i, amp)| amp * table.overlap(&geom.arc_at(i))).sum();
    coeffs.amp_op * pair.op_op + arcs
}

/// `η_max / d^{L/2}` from a precomputed expansion.
pub fn eta_from_coefficients(
    geom: &ChainGeometry,
    coeffs: &SwapCoefficients,
    pair: &PairOverlaps,
    table: &OverlapTable,
) -> Result<f64> {
    let r_t = coeffs.amp_op;
    let r1 = r_t * pair.r1_op + (1.0 - r_t) * pair.depolarized;
    let second = swap_trace_term(geom, coeffs, pair, table);
    let direct = clamp_radicand(2.0 * r1 - 2.0 * second, "direct")?;

    let correction = spatial_correction(geom, coeffs, table);
    let structured = clamp_radicand(2.0 * r_t * (pair.r1_op - pair.op_op) + 2.0 * correction, "structured")?;

    let magnitude: f64 = 2.0 * r1.abs()
        + 2.0 * (r_t * pair.op_op).abs()
        + 2.0
            * coeffs
                .amp_arcs
                .iter()
                .enumerate()
                .map(|(i, amp)| (amp * table.overlap(&geom.arc_at(i))).abs())
                .sum::<f64>();
    if (direct - structured).abs() > FORM_AGREEMENT * magnitude.max(f64::MIN_POSITIVE) {
        return Err(Error::Inconsistent(format!(
            "direct radicand {direct:e} disagrees with structured radicand {structured:e}"
        )));
    }
    Ok(structured.sqrt())
}

/// The exact scaled bound `η_max(t) / d^{L/2}` for one probe site.
pub fn eta_max_exact(
    op_p: &LocalOperator,
    op_q: &LocalOperator,
    geom: &ChainGeometry,
    p: usize,
    q: usize,
    t: Time,
) -> Result<f64> {
    check_scaled_range(geom)?;
    let pair = pair_overlaps(op_p, op_q, geom, p, q)?;
    let table = OverlapTable::new(geom, q, op_q)?;
    let coeffs = crate::moments::r2_image(op_p, geom, p, t)?;
    eta_from_coefficients(geom, &coeffs, &pair, &table)
}

/// Constants of the closed-form short- and long-time bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegimeConstants {
    pub m: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub h1: f64,
    /// Natural log of `h2`; `h2` itself underflows for a few hundred sites.
    pub ln_h2: f64,
    pub k1: f64,
    pub k2: f64,
    pub m_cal: f64,
    pub y_squared: f64,
}

impl RegimeConstants {
    pub fn new(op_p: &LocalOperator, op_q: &LocalOperator, geom: &ChainGeometry) -> Result<Self> {
        let model = model_constants(op_p, geom)?;
        if op_q.dim() != geom.local_dim() {
            return Err(Error::Operator("O_q does not match the local dimension".into()));
        }
        let d = geom.local_dim() as f64;
        let l = geom.sites() as f64;
        let x2 = model.x_squared;
        let y2 = op_q.norms()?.x_squared;
        let m = (d - x2) * (d - y2) / (d * d);
        if d - x2 <= 1e-12 * d || d - y2 <= 1e-12 * d {
            return Err(Error::Operator(
                "closed-form bounds need both operators away from the identity (x^2 < d, y^2 < d)".into(),
            ));
        }
        let d2 = d * d;
        let d4m1 = d2 * d2 - 1.0;
        let m1 = d.powi(3) * (d - x2) / d4m1 / m;
        let h1 = d.powi(3) * (d - x2) / (m * d4m1 * (d2 + 1.0).powi(2));
        let n_d = model.twirl_coeff;
        let ln_h2 = ((d2 - d * x2) * (d - x2) / d4m1).ln() + (l - 1.0).ln() + (2.0 * l + 1.0) * n_d.ln()
            - l * l.ln()
            - (2.0 * l + 1.0) * (l - 2.0).ln();
        let mut out = RegimeConstants {
            m,
            m1,
            m2: 0.0,
            m3: 0.0,
            h1,
            ln_h2,
            k1: 1.0,
            k2: 1.0,
            m_cal: asymptotic_max(op_p, op_q)?,
            y_squared: y2,
        };
        out.set_k(1.0, 1.0, &model);
        Ok(out)
    }

    /// Override the higher-order factors in `m2` and `m3`.
    pub fn with_k(mut self, k1: f64, k2: f64, model: &ModelConstants) -> Self {
        self.set_k(k1, k2, model);
        self
    }

    fn set_k(&mut self, k1: f64, k2: f64, model: &ModelConstants) {
        let d = model.local_dim as f64;
        let x2 = model.x_squared;
        self.k1 = k1;
        self.k2 = k2;
        self.m2 = 2.0 * d * (d - x2) / (self.m * (d * d - 1.0)) * k1;
        self.m3 = 2.0 * (d - x2) * (d - self.y_squared) / (self.m * (d * d - 1.0)) * k2;
    }

    pub fn h2(&self) -> f64 {
        self.ln_h2.exp()
    }
}

/// A closed-form value with a flag telling whether `t` lies in the formula's regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegimeBound {
    pub value: f64,
    pub in_regime: bool,
}

/// `(T1, T2) = ((1 + 1/d^2)(L-2), e (L+1)(L-2)(d^2+1)/d)`.
pub fn time_scales(geom: &ChainGeometry) -> (f64, f64) {
    let d = geom.local_dim() as f64;
    let l = geom.sites() as f64;
    let t1 = (1.0 + 1.0 / (d * d)) * (l - 2.0);
    let t2 = std::f64::consts::E * (l + 1.0) * (l - 2.0) * (d * d + 1.0) / d;
    (t1, t2)
}

fn check_distance(distance: usize) -> Result<()> {
    if distance == 0 {
        return Err(Error::InvalidArgument("closed-form bounds need D >= 1".into()));
    }
    Ok(())
}

/// Short-time closed form, `Θ(t-D) M [m1(1-r^t) - m2 r^t (udt/r) + m3 r^t (udt/(rD))^D]^{1/2}`.
pub fn short_time_bound(
    consts: &RegimeConstants,
    model: &ModelConstants,
    distance: usize,
    t: Time,
) -> Result<RegimeBound> {
    check_distance(distance)?;
    let geom = ChainGeometry::new(model.sites, model.local_dim)?;
    let (t1, _) = time_scales(&geom);
    let in_regime = t.as_f64() <= t1;
    if let Time::Steps(steps) = t {
        if (steps as usize) < distance {
            return Ok(RegimeBound { value: 0.0, in_regime });
        }
    }
    let r = model.r;
    let r_t = t.power(r);
    let bracket = if r_t == 0.0 {
        consts.m1
    } else {
        let tf = t.as_f64();
        let d = model.local_dim as f64;
        let x = model.u * d * tf / r;
        let dd = distance as f64;
        consts.m1 * (1.0 - r_t) - consts.m2 * r_t * x + consts.m3 * r_t * (x / dd).powf(dd)
    };
    let value = consts.m_cal * clamp_radicand(bracket, "short-time")?.sqrt();
    Ok(RegimeBound { value, in_regime })
}

/// `f(t) = (1-r^t) - t r^t (1-r)/r - t(t-1)/2 (1-r)^2 r^{t-1}/r`.
pub fn f_time(r: f64, t: Time) -> f64 {
    match t {
        Time::Infinite => 1.0,
        Time::Steps(0) => 0.0,
        Time::Steps(steps) => {
            let tf = steps as f64;
            let r_t = crate::pow_u64(r, steps);
            let r_tm1 = crate::pow_u64(r, steps - 1);
            (1.0 - r_t) - tf * r_t * (1.0 - r) / r - 0.5 * tf * (tf - 1.0) * (1.0 - r).powi(2) * r_tm1 / r
        }
    }
}

/// `ln g(t, D)` with `g = t^{2(L+1)} r^{t-1} (d r/(u t))^D`; `-∞` at `t = 0` and `t = ∞`.
pub fn g_log(model: &ModelConstants, distance: usize, t: Time) -> f64 {
    match t {
        Time::Infinite | Time::Steps(0) => f64::NEG_INFINITY,
        Time::Steps(steps) => {
            let tf = steps as f64;
            let l = model.sites as f64;
            let d = model.local_dim as f64;
            2.0 * (l + 1.0) * tf.ln()
                + (tf - 1.0) * model.r.ln()
                + distance as f64 * (d * model.r / (model.u * tf)).ln()
        }
    }
}

/// Long-time closed form, `M [m1(1-r^t) - h1 f(t) + h2 g(t,D)]^{1/2}`.
pub fn long_time_bound(
    consts: &RegimeConstants,
    model: &ModelConstants,
    geom: &ChainGeometry,
    distance: usize,
    t: Time,
) -> Result<RegimeBound> {
    check_distance(distance)?;
    let (_, t2) = time_scales(geom);
    let in_regime = t.as_f64() >= t2;
    let r_t = t.power(model.r);
    let h2g = (consts.ln_h2 + g_log(model, distance, t)).exp();
    let bracket = consts.m1 * (1.0 - r_t) - consts.h1 * f_time(model.r, t) + h2g;
    let value = consts.m_cal * clamp_radicand(bracket, "long-time")?.sqrt();
    Ok(RegimeBound { value, in_regime })
}

/// `a*(D,t) = u^D r^{t-1-D} t^{D+1} / (D+1)^{D+1}`, zero outside `D <= t-1`.
pub fn a_star_estimate(model: &ModelConstants, distance: usize, t: Time) -> f64 {
    let steps = match t {
        Time::Infinite => return 0.0,
        Time::Steps(s) => s,
    };
    if steps == 0 || distance as u64 > steps - 1 {
        return 0.0;
    }
    let dd = distance as f64;
    let tf = steps as f64;
    let ln = dd * model.u.ln() + (tf - 1.0 - dd) * model.r.ln() + (dd + 1.0) * tf.ln() - (dd + 1.0) * (dd + 1.0).ln();
    ln.exp()
}

/// For each `D` in `0..L`, the smallest `a_1(S,t)` over non-sink arcs at derived
/// distance `D` from `{p-1,p}`; `None` where no such arc exists.
pub fn a_exact_profile(geom: &ChainGeometry, p: usize, t: u64) -> Result<Vec<Option<f64>>> {
    let m = MomentMatrix::build(geom);
    let (a1, _) = a_coefficients_split(&m, p, t)?;
    let (left, _) = geom.fiducials(p);
    let dist = geom.derived_distances_from(&left);
    let mut out: Vec<Option<f64>> = vec![None; geom.sites()];
    for (i, di) in dist.iter().enumerate() {
        let arc = geom.arc_at(i);
        if arc.is_sink(geom) {
            continue;
        }
        if let Some(di) = *di {
            if di < out.len() {
                out[di] = Some(out[di].map_or(a1[i], |v: f64| v.min(a1[i])));
            }
        }
    }
    Ok(out)
}

/// `binom(n, D) u^D r^{n-D}`, zero for `D > n`.
pub fn binomial_lower_bound(model: &ModelConstants, n: u64, distance: usize) -> f64 {
    let dd = distance as u64;
    if dd > n {
        return 0.0;
    }
    let ln_binom: f64 = (0..dd).map(|i| ((n - i) as f64 / (i + 1) as f64).ln()).sum();
    (ln_binom + distance as f64 * model.u.ln() + (n - dd) as f64 * model.r.ln()).exp()
}

/// Worst relative shortfall of the exact coefficients below their lower estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerEstimateSweep {
    /// `max (binom - c) / binom` over arcs, both fiducial seeds and `n <= n_max`.
    pub binomial_violation: f64,
    /// `max (a* - a) / a*` over arcs, both seeds and `1 <= t <= n_max`.
    pub a_star_violation: f64,
    pub comparisons: usize,
}

pub fn lower_estimate_sweep(geom: &ChainGeometry, p: usize, n_max: u64) -> Result<LowerEstimateSweep> {
    let m = MomentMatrix::build(geom);
    // the bounds depend only on r and u, so any operator gives the same model weights
    let model = model_constants(&LocalOperator::identity(geom.local_dim())?, geom)?;
    let (left, right) = geom.fiducials(p);
    let (c1, c2) = crate::moments::fiducial_seeds(geom, p)?;
    let mut out = LowerEstimateSweep { binomial_violation: 0.0, a_star_violation: 0.0, comparisons: 0 };
    for (seed, fid) in [(c1, left), (c2, right)] {
        let dist = geom.derived_distances_from(&fid);
        let history = crate::moments::iterate_coefficients(&m, &seed, n_max as usize)?;
        let mut acc = crate::moments::HistoryAccumulator::new(&m, seed)?;
        for n in 0..=n_max {
            if n > 0 {
                acc.advance_to(n)?;
            }
            for (i, di) in dist.iter().enumerate() {
                let Some(di) = *di else { continue };
                let bound = binomial_lower_bound(&model, n, di);
                if bound > 0.0 {
                    let c = history[n as usize][i];
                    out.binomial_violation = out.binomial_violation.max((bound - c) / bound);
                    out.comparisons += 1;
                }
                if n > 0 {
                    let star = a_star_estimate(&model, di, Time::Steps(n));
                    if star > 0.0 {
                        out.a_star_violation = out.a_star_violation.max((star - acc.values()[i]) / star);
                        out.comparisons += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `M sqrt((1-r) m1 t)`, the leading diffusive growth for `1 << D < t << L`.
pub fn diffusive_leading_term(model: &ModelConstants, consts: &RegimeConstants, t: f64) -> f64 {
    consts.m_cal * ((1.0 - model.r) * consts.m1 * t).sqrt()
}

/// Run-level constants recorded alongside bound data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundMeta {
    pub r: f64,
    pub u: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "M_cal")]
    pub m_cal: f64,
    #[serde(rename = "T1")]
    pub t1: f64,
    #[serde(rename = "T2")]
    pub t2: f64,
    /// Absent when one of the operators is proportional to the identity.
    pub regime: Option<RegimeConstants>,
}

impl BoundMeta {
    pub fn new(op_p: &LocalOperator, op_q: &LocalOperator, geom: &ChainGeometry) -> Result<Self> {
        let model = model_constants(op_p, geom)?;
        let (t1, t2) = time_scales(geom);
        Ok(BoundMeta {
            r: model.r,
            u: model.u,
            a: model.a,
            b: model.b,
            m_cal: asymptotic_max(op_p, op_q)?,
            t1,
            t2,
            regime: RegimeConstants::new(op_p, op_q, geom).ok(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundPoint {
    pub q: usize,
    /// Ring distance between `p` and `q`.
    pub distance: usize,
    pub t: Time,
    pub value: f64,
}

/// Exact bound over a grid of probe sites and times.
#[derive(Debug, Clone)]
pub struct BoundSeries {
    pub geom: ChainGeometry,
    pub p: usize,
    pub op_p: LocalOperator,
    pub op_q: LocalOperator,
    /// Time-major: all `q` for the first time, then the next time.
    pub points: Vec<BoundPoint>,
    pub meta: BoundMeta,
}

impl BoundSeries {
    /// Evaluates every `(q, t)` pair. One evolution serves all probe sites; the
    /// probe sites are evaluated in parallel and the result does not depend on the
    /// number of worker threads.
    pub fn evaluate(
        op_p: &LocalOperator,
        op_q: &LocalOperator,
        geom: &ChainGeometry,
        p: usize,
        qs: &[usize],
        times: &[Time],
    ) -> Result<Self> {
        if qs.is_empty() || times.is_empty() {
            return Err(Error::InvalidArgument("bound grid needs at least one q and one t".into()));
        }
        check_scaled_range(geom)?;
        let meta = BoundMeta::new(op_p, op_q, geom)?;
        let probes: Vec<(PairOverlaps, OverlapTable)> = qs
            .iter()
            .map(|&q| Ok((pair_overlaps(op_p, op_q, geom, p, q)?, OverlapTable::new(geom, q, op_q)?)))
            .collect::<Result<_>>()?;

        let mut sorted: Vec<Time> = times.to_vec();
        sorted.sort();
        sorted.dedup();
        let matrix = MomentMatrix::build(geom);
        let mut evo = R2Evolution::new(&matrix, op_p, p)?;
        let mut by_time: Vec<(Time, Vec<f64>)> = Vec::with_capacity(sorted.len());
        for &t in &sorted {
            let coeffs = match t {
                Time::Steps(steps) => {
                    evo.advance_to(steps)?;
                    evo.coefficients()
                }
                Time::Infinite => stationary_coefficients(evo.model(), geom),
            };
            let values = probes
                .par_iter()
                .map(|(pair, table)| eta_from_coefficients(geom, &coeffs, pair, table))
                .collect::<Result<Vec<f64>>>()?;
            by_time.push((t, values));
        }

        let mut points = Vec::with_capacity(qs.len() * times.len());
        for &t in times {
            let (_, values) = &by_time[sorted.binary_search(&t).expect("time was evaluated")];
            for (&q, &value) in qs.iter().zip(values) {
                points.push(BoundPoint { q, distance: geom.distance(p, q), t, value });
            }
        }
        Ok(BoundSeries { geom: *geom, p, op_p: op_p.clone(), op_q: op_q.clone(), points, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ops() -> (LocalOperator, LocalOperator) {
        (LocalOperator::diagonal(&[0.5, 0.3]).unwrap(), LocalOperator::diagonal(&[0.7, 0.1]).unwrap())
    }

    #[test]
    fn zero_at_t0() {
        let (op_p, op_q) = ops();
        let g = ChainGeometry::new(7, 2).unwrap();
        for q in 1..7 {
            assert_eq!(eta_max_exact(&op_p, &op_q, &g, 0, q, Time::Steps(0)).unwrap(), 0.0);
        }
    }

    #[test]
    fn same_site_at_t0_is_local_commutator() {
        let g = ChainGeometry::new(5, 2).unwrap();
        let op_p = LocalOperator::from_row_major(2, &[(0.5, 0.0), (0.1, 0.0), (0.1, 0.0), (0.3, 0.0)]).unwrap();
        let op_q = LocalOperator::diagonal(&[0.7, 0.1]).unwrap();
        let a = op_p.matrix();
        let b = op_q.matrix();
        let comm = a * b - b * a;
        // ||[A,B] ⊗ 1||_2^2 / d^L = ||[A,B]||_2^2 / d
        let expect = (comm.norm_squared() / 2.0).sqrt();
        let got = eta_max_exact(&op_p, &op_q, &g, 2, 2, Time::Steps(0)).unwrap();
        assert_relative_eq!(got, expect, max_relative = 1e-12);
    }

    #[test]
    fn reference_asymptote() {
        let (op_p, op_q) = ops();
        let g = ChainGeometry::new(15, 2).unwrap();
        let m_cal = asymptotic_max(&op_p, &op_q).unwrap();
        for q in 1..15 {
            let v = eta_max_exact(&op_p, &op_q, &g, 0, q, Time::Steps(100_000)).unwrap();
            assert!((v - 0.0424).abs() < 0.01 * 0.0424);
            let inf = eta_max_exact(&op_p, &op_q, &g, 0, q, Time::Infinite).unwrap();
            let exact = m_cal / (1.0 - 2f64.powi(-30)).sqrt();
            assert_relative_eq!(inf, exact, max_relative = 1e-12);
            assert!(v >= inf * (1.0 - 1e-12));
        }
    }

    #[test]
    fn light_cone_is_exact() {
        let (op_p, op_q) = ops();
        let g = ChainGeometry::new(15, 2).unwrap();
        let m = MomentMatrix::build(&g);
        let mut evo = R2Evolution::new(&m, &op_p, 0).unwrap();
        for t in 0..8u64 {
            evo.advance_to(t).unwrap();
            let c = evo.coefficients();
            for q in 1..15 {
                let table = OverlapTable::new(&g, q, &op_q).unwrap();
                let corr = spatial_correction(&g, &c, &table);
                if g.distance(0, q) as u64 > t {
                    assert_eq!(corr, 0.0, "t={t} q={q}");
                } else if t > 0 {
                    assert!(corr > 0.0, "t={t} q={q}");
                }
            }
        }
    }

    #[test]
    fn reflection_symmetry() {
        let (op_p, op_q) = ops();
        let g = ChainGeometry::new(9, 2).unwrap();
        let p = 3;
        let qs: Vec<usize> = (0..9).collect();
        let times = [Time::Steps(4), Time::Steps(25)];
        let s = BoundSeries::evaluate(&op_p, &op_q, &g, p, &qs, &times).unwrap();
        for pt in &s.points {
            let mirror = (2 * p + 9 - pt.q) % 9;
            let other = s.points.iter().find(|o| o.q == mirror && o.t == pt.t).unwrap();
            assert_eq!(pt.value, other.value);
        }
    }

    #[test]
    fn grid_matches_pointwise() {
        let (op_p, op_q) = ops();
        let g = ChainGeometry::new(8, 2).unwrap();
        let qs = [5, 1, 0];
        let times = [Time::Steps(30), Time::Infinite, Time::Steps(3)];
        let s = BoundSeries::evaluate(&op_p, &op_q, &g, 0, &qs, &times).unwrap();
        assert_eq!(s.points.len(), 9);
        assert_eq!(s.points[0].t, Time::Steps(30));
        assert_eq!(s.points[0].q, 5);
        assert_eq!(s.points[0].distance, 3);
        for pt in &s.points {
            let v = eta_max_exact(&op_p, &op_q, &g, 0, pt.q, pt.t).unwrap();
            assert_relative_eq!(pt.value, v, max_relative = 1e-13);
        }
        assert!(BoundSeries::evaluate(&op_p, &op_q, &g, 0, &qs, &[]).is_err());
    }

    #[test]
    fn time_scale_examples() {
        let (t1, t2) = time_scales(&ChainGeometry::new(15, 2).unwrap());
        assert_relative_eq!(t1, 16.25);
        assert_relative_eq!(t2, std::f64::consts::E * 16.0 * 13.0 * 2.5);
        assert!((t2 - 1413.5).abs() < 0.1);
        let (t1, t2) = time_scales(&ChainGeometry::new(10, 2).unwrap());
        assert_relative_eq!(t1, 10.0);
        assert!((t2 - 598.0).abs() < 0.1);
    }

    #[test]
    fn short_time_examples() {
        let (op_p, op_q) = ops();
        let g = ChainGeometry::new(15, 2).unwrap();
        let model = model_constants(&op_p, &g).unwrap();
        let c = RegimeConstants::new(&op_p, &op_q, &g).unwrap();
        assert_eq!(short_time_bound(&c, &model, 4, Time::Steps(3)).unwrap().value, 0.0);
        let at_zero = short_time_bound(&c, &model, 1, Time::Steps(0)).unwrap();
        assert_eq!(at_zero.value, 0.0);
        let v = short_time_bound(&c, &model, 3, Time::Steps(10)).unwrap();
        assert!(v.in_regime && v.value > 0.0);
        let late = short_time_bound(&c, &model, 3, Time::Steps(100)).unwrap();
        assert!(!late.in_regime);
        // Θ includes the boundary D = t
        assert!(short_time_bound(&c, &model, 3, Time::Steps(3)).unwrap().value > 0.0);
        assert!(short_time_bound(&c, &model, 0, Time::Steps(3)).is_err());
    }

    #[test]
    fn long_time_examples() {
        let (op_p, op_q) = ops();
        let g = ChainGeometry::new(10, 2).unwrap();
        let model = model_constants(&op_p, &g).unwrap();
        let c = RegimeConstants::new(&op_p, &op_q, &g).unwrap();
        let h2 = c.h2();
        assert!(h2 > 0.0 && h2 < 1e-8);
        let inf = long_time_bound(&c, &model, &g, 3, Time::Infinite).unwrap();
        assert_relative_eq!(inf.value, c.m_cal * (c.m1 - c.h1).sqrt(), max_relative = 1e-14);
        assert!(inf.in_regime);
        let (_, t2) = time_scales(&g);
        for t in (t2.ceil() as u64)..(t2.ceil() as u64 + 500) {
            assert!(g_log(&model, 3, Time::Steps(t + 1)) < g_log(&model, 3, Time::Steps(t)));
        }
        assert_relative_eq!(f_time(model.r, Time::Steps(100_000)), 1.0);
        assert_eq!(f_time(model.r, Time::Steps(0)), 0.0);
        assert!(long_time_bound(&c, &model, &g, 0, Time::Steps(10)).is_err());
    }

    #[test]
    fn f_is_binomial_tail() {
        let r = 0.8f64;
        for t in 1..40u64 {
            let p = 1.0 - r;
            let tail: f64 = (3..=t)
                .map(|k| {
                    let binom: f64 = (0..k).map(|i| (t - i) as f64 / (i + 1) as f64).product();
                    binom * p.powi(k as i32) * r.powi((t - k) as i32)
                })
                .sum();
            assert!((f_time(r, Time::Steps(t)) - tail).abs() < 1e-12);
        }
    }

    #[test]
    fn regime_constants_examples() {
        let (op_p, op_q) = ops();
        let g = ChainGeometry::new(15, 2).unwrap();
        let model = model_constants(&op_p, &g).unwrap();
        let c = RegimeConstants::new(&op_p, &op_q, &g).unwrap();
        assert!(c.m1 > 0.0);
        assert!(c.h2() < model.u);
        assert_relative_eq!(c.h1, c.m1 / 25.0, max_relative = 1e-12);
        let k = c.with_k(2.0, 0.5, &model);
        assert_relative_eq!(k.m2, 2.0 * c.m2);
        assert_relative_eq!(k.m3, 0.5 * c.m3);
        let id = LocalOperator::identity(2).unwrap();
        assert!(RegimeConstants::new(&id, &op_q, &g).is_err());
    }

    #[test]
    fn a_star_examples() {
        let (op_p, _) = ops();
        let g = ChainGeometry::new(10, 2).unwrap();
        let model = model_constants(&op_p, &g).unwrap();
        assert_relative_eq!(a_star_estimate(&model, 0, Time::Steps(7)), model.r.powi(6) * 7.0, max_relative = 1e-12);
        assert_eq!(a_star_estimate(&model, 7, Time::Steps(7)), 0.0);
        assert_eq!(a_star_estimate(&model, 0, Time::Steps(0)), 0.0);
        for d in 0..9 {
            assert!(a_star_estimate(&model, d + 1, Time::Steps(10)) < a_star_estimate(&model, d, Time::Steps(10)));
        }
    }

    #[test]
    fn a_exact_profile_shape() {
        let g = ChainGeometry::new(10, 2).unwrap();
        let prof = a_exact_profile(&g, 0, 1).unwrap();
        assert_eq!(prof[0], Some(1.0));
        assert!(prof[1..].iter().all(|v| *v == Some(0.0)));
    }

    #[test]
    fn lower_estimates_hold_small() {
        let g = ChainGeometry::new(6, 2).unwrap();
        let sweep = lower_estimate_sweep(&g, 2, 40).unwrap();
        assert!(sweep.binomial_violation <= 1e-12);
        assert!(sweep.a_star_violation <= 1e-12);
        assert!(sweep.comparisons > 1000);
        let model = model_constants(&LocalOperator::identity(2).unwrap(), &g).unwrap();
        assert_relative_eq!(
            binomial_lower_bound(&model, 5, 2),
            10.0 * model.u.powi(2) * model.r.powi(3),
            max_relative = 1e-12
        );
        assert_eq!(binomial_lower_bound(&model, 1, 2), 0.0);
    }

    #[test]
    fn diffusive_term_scaling() {
        let (op_p, op_q) = ops();
        let g = ChainGeometry::new(10_000, 2).unwrap();
        let model = model_constants(&op_p, &g).unwrap();
        let c = RegimeConstants::new(&op_p, &op_q, &ChainGeometry::new(400, 2).unwrap()).unwrap();
        assert_relative_eq!(
            diffusive_leading_term(&model, &c, 40.0) / diffusive_leading_term(&model, &c, 10.0),
            2.0,
            max_relative = 1e-15
        );
        for t in 1..=100u64 {
            let exact = c.m_cal * (c.m1 * (1.0 - model.r.powi(t as i32))).sqrt();
            let lead = diffusive_leading_term(&model, &c, t as f64);
            assert!((lead - exact).abs() / exact < 0.02);
        }
    }
}
