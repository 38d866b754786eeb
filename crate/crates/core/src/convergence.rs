//! Convergence diagnostics for the radius recursion: finite-horizon and
//! steady-state error bounds, the high-probability bound on the calibration
//! perturbation `eta`, a synthetic fixed-point testbed, and a Monte-Carlo
//! check of the DKW empirical-quantile bound.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{empirical_quantile, format_full, inflated_level, ScoreSet};
use crate::error::{Error, Result};
use crate::radius_update::explicit_update;
use crate::seeds::{SeedKey, Stream};

/// `gamma = 2 kappa / (1 - kappa)` and `B = 1 / (1 - kappa)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionParams {
    pub kappa: f64,
    pub gamma: f64,
    pub b: f64,
}

impl ContractionParams {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0 && kappa < 1.0) {
            return Err(Error::InvalidGain(kappa));
        }
        Ok(Self {
            kappa,
            gamma: 2.0 * kappa / (1.0 - kappa),
            b: 1.0 / (1.0 - kappa),
        })
    }

    /// `gamma < 1`, equivalently `kappa < 1/3`.
    pub fn contracts(&self) -> bool {
        self.kappa < 1.0 / 3.0
    }
}

/// Bounds on `e_1, ..., e_J` given `e_0` and `eta_0, ..., eta_{J-1}`:
/// entry `j` is `gamma^{j+1} e0 + B sum_{m<=j} gamma^{j-m} |eta_m|`.
pub fn error_bound_horizon(e0: f64, etas: &[f64], kappa: f64) -> Result<Vec<f64>> {
    let p = ContractionParams::new(kappa)?;
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(etas.len());
    for (j, eta) in etas.iter().enumerate() {
        // acc_j = sum_{m<=j} gamma^{j-m} |eta_m|
        acc = p.gamma * acc + eta.abs();
        out.push(p.gamma.powi(j as i32 + 1) * e0 + p.b * acc);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyBound {
    /// Bound on `e_{j+1}` under `|eta_m| <= C`.
    pub finite: f64,
    /// `C / (1 - 3 kappa)`, defined only for `kappa < 1/3`.
    pub limsup: Option<f64>,
}

pub fn error_bound_steady(e0: f64, c: f64, kappa: f64, j: usize) -> Result<SteadyBound> {
    let p = ContractionParams::new(kappa)?;
    let g = p.gamma.powi(j as i32 + 1);
    let series = if (1.0 - p.gamma).abs() < 1e-12 {
        (j + 1) as f64
    } else {
        (1.0 - g) / (1.0 - p.gamma)
    };
    let limsup = p.contracts().then(|| c / (1.0 - 3.0 * kappa));
    Ok(SteadyBound {
        finite: g * e0 + p.b * c * series,
        limsup,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaBoundInputs {
    pub alpha: f64,
    pub alpha_bar: f64,
    pub n: usize,
    pub delta_j: f64,
    pub f_star: f64,
}

/// `|alpha - alpha_bar| / f* + sqrt(ln(2/delta_j) / (2n)) / f*`.
pub fn eta_bound(inp: &EtaBoundInputs) -> Result<f64> {
    if !(inp.f_star > 0.0) || inp.n == 0 || !(inp.delta_j > 0.0 && inp.delta_j < 1.0) {
        return Err(Error::InvalidArgument(format!("invalid eta-bound inputs {inp:?}")));
    }
    Ok((inp.alpha - inp.alpha_bar).abs() / inp.f_star + dkw_epsilon(inp.n, inp.delta_j) / inp.f_star)
}

/// `sqrt(ln(2/delta) / (2n))`.
pub fn dkw_epsilon(n: usize, delta: f64) -> f64 {
    ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// Score distribution with known quantiles, for Monte-Carlo checks.
pub trait ScoreDistribution: Sync {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64;
    fn quantile(&self, p: f64) -> f64;
    fn cdf(&self, s: f64) -> f64;
    /// Lower bound on the density near the quantiles of interest, if any.
    fn density_lower_bound(&self) -> Option<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uniform01;

impl ScoreDistribution for Uniform01 {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.random::<f64>()
    }
    fn quantile(&self, p: f64) -> f64 {
        p.clamp(0.0, 1.0)
    }
    fn cdf(&self, s: f64) -> f64 {
        s.clamp(0.0, 1.0)
    }
    fn density_lower_bound(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// `|Z|` with `Z ~ N(0, scale^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfNormal {
    pub scale: f64,
}

impl ScoreDistribution for HalfNormal {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        (self.scale * z).abs()
    }
    fn quantile(&self, p: f64) -> f64 {
        // invert the cdf by bisection
        let (mut lo, mut hi) = (0.0, 40.0 * self.scale);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
    fn cdf(&self, s: f64) -> f64 {
        if s <= 0.0 {
            0.0
        } else {
            statrs::function::erf::erf(s / (self.scale * std::f64::consts::SQRT_2))
        }
    }
    fn density_lower_bound(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMass {
    pub at: f64,
}

impl ScoreDistribution for PointMass {
    fn sample<R: Rng + ?Sized>(&self, _rng: &mut R) -> f64 {
        self.at
    }
    fn quantile(&self, _p: f64) -> f64 {
        self.at
    }
    fn cdf(&self, s: f64) -> f64 {
        if s >= self.at {
            1.0
        } else {
            0.0
        }
    }
    fn density_lower_bound(&self) -> Option<f64> {
        None
    }
}

/// Empirical quantile `inf { t : F_n(t) >= p }`, the `ceil(n p)`-th order
/// statistic.
pub fn empirical_cdf_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let raw = n as f64 * p;
    let k = ((raw - raw.abs() * 4.0 * f64::EPSILON).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DkwReport {
    pub violation_rate: f64,
    /// Binomial standard error at rate `delta`.
    pub standard_error: f64,
    pub threshold: f64,
    pub delta: f64,
    pub trials: usize,
}

impl DkwReport {
    /// `violation_rate <= delta + 3 se`.
    pub fn within_bound(&self) -> bool {
        self.violation_rate <= self.delta + 3.0 * self.standard_error
    }
}

/// Fraction of `trials` resamples with `|q_{n,p} - Q_p| > eps_n(delta) / f*`.
pub fn dkw_quantile_error_mc<D: ScoreDistribution>(
    dist: &D,
    n: usize,
    level: f64,
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<DkwReport> {
    let f_star = match dist.density_lower_bound() {
        Some(f) if f > 0.0 => f,
        _ => {
            return Err(Error::InvalidArgument(
                "distribution has no positive density lower bound near its quantile".into(),
            ))
        }
    };
    if n == 0 || trials == 0 || !(level > 0.0 && level < 1.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument("invalid DKW Monte-Carlo parameters".into()));
    }
    let threshold = dkw_epsilon(n, delta) / f_star;
    let truth = dist.quantile(level);
    let violations: usize = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeedKey::new(seed, Stream::Synthetic, 0, i as u32).rng();
            let mut xs: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            xs.sort_by(f64::total_cmp);
            usize::from((empirical_cdf_quantile(&xs, level) - truth).abs() > threshold)
        })
        .sum();
    Ok(DkwReport {
        violation_rate: violations as f64 / trials as f64,
        standard_error: (delta * (1.0 - delta) / trials as f64).sqrt(),
        threshold,
        delta,
        trials,
    })
}

/// Crude density estimate at `q`: the empirical CDF increment over a window
/// of width `window_frac * (max - min)` centred at `q`, divided by the width.
pub fn f_star_estimate(scores: &[f64], q: f64, window_frac: f64) -> Option<f64> {
    if scores.is_empty() || !(window_frac > 0.0) {
        return None;
    }
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    let width = window_frac * (hi - lo);
    if !(width > 0.0) {
        return None;
    }
    let inside = scores
        .iter()
        .filter(|&&s| s > q - 0.5 * width && s <= q + 0.5 * width)
        .count();
    let f = inside as f64 / scores.len() as f64 / width;
    (f > 0.0).then_some(f)
}

/// Affine map `T(r) = kappa (r - r*) + r*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub kappa: f64,
    pub r_star: f64,
}

impl AffineMap {
    pub fn eval(&self, r: f64) -> f64 {
        self.kappa * (r - self.r_star) + self.r_star
    }
}

/// Source of the calibration perturbation `eta_j = q_j - T(r_j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaInjector {
    Zero,
    /// `eta ~ U[-c, c]`.
    UniformBounded { c: f64, seed: u64 },
    /// `q_j` is the conformal quantile of `n` scores `T(r_j) - (1 - alpha) + U`
    /// with `U ~ U[0, 1]` (so the true `1 - alpha` quantile is `T(r_j)` and
    /// the density is 1), computed at the inflated level.
    Calibrated {
        n: usize,
        alpha: f64,
        delta: f64,
        delta_j: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub j: usize,
    pub r: f64,
    pub e: f64,
    /// Eq.-style unrolled bound on `e_j` from realized `eta_0..eta_{j-1}`.
    pub bound_u: f64,
    /// Closed-form bound under `|eta| <= C`.
    pub bound_c: f64,
    pub eta: f64,
    pub eta_bound: f64,
    pub delta_budget: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointTrace {
    pub rows: Vec<TraceRow>,
    pub kappa: f64,
    /// Uniform perturbation bound used for `bound_c`.
    pub c: f64,
}

impl FixedPointTrace {
    /// Episodes where `e_j` exceeds the unrolled bound.
    pub fn bound_violations(&self) -> usize {
        self.rows
            .iter()
            .filter(|row| row.e > row.bound_u * (1.0 + 1e-12) + 1e-12)
            .count()
    }

    pub fn terminal_error(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.e)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["j", "e", "bound_U", "bound_C", "eta", "eta_bound", "delta_budget"])?;
        for row in &self.rows {
            w.write_record([
                row.j.to_string(),
                format_full(row.e),
                format_full(row.bound_u),
                format_full(row.bound_c),
                format_full(row.eta),
                format_full(row.eta_bound),
                format_full(row.delta_budget),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Run `q_j = T(r_j) + eta_j`, `r_{j+1} = explicit_update(q_j, r_j, kappa)`
/// for `episodes` steps and record `e_j = |r_j - r*|` against its bounds.
/// Row `j` holds `e_j` and the `eta_j` drawn at that episode.
pub fn synthetic_fixed_point_run(
    map: AffineMap,
    r0: f64,
    injector: EtaInjector,
    episodes: usize,
) -> Result<FixedPointTrace> {
    let params = ContractionParams::new(map.kappa)?;
    let c = match injector {
        EtaInjector::Zero => 0.0,
        EtaInjector::UniformBounded { c, .. } => c,
        EtaInjector::Calibrated { n, alpha, delta, delta_j, .. } => {
            let alpha_bar = inflated_level(alpha, delta, n)?;
            eta_bound(&EtaBoundInputs { alpha, alpha_bar, n, delta_j, f_star: 1.0 })?
        }
    };
    let e0 = (r0 - map.r_star).abs();
    let mut rows = Vec::with_capacity(episodes + 1);
    let mut r = r0;
    // acc = sum_{m<j} gamma^{j-1-m} |eta_m|
    let mut acc = 0.0;
    let mut budget = 0.0;
    for j in 0..=episodes {
        let e = (r - map.r_star).abs();
        let bound_u = if j == 0 {
            e0
        } else {
            params.gamma.powi(j as i32) * e0 + params.b * acc
        };
        let bound_c = if j == 0 {
            e0
        } else {
            error_bound_steady(e0, c, map.kappa, j - 1)?.finite
        };
        let target = map.eval(r);
        let (q, eta_bnd, dj) = match injector {
            EtaInjector::Zero => (target, 0.0, 0.0),
            EtaInjector::UniformBounded { c, seed } => {
                let mut rng = SeedKey::new(seed, Stream::Synthetic, j as u32, 0).rng();
                (target + rng.random_range(-c..=c), c, 0.0)
            }
            EtaInjector::Calibrated { n, alpha, delta, delta_j, seed } => {
                let mut rng = SeedKey::new(seed, Stream::Synthetic, j as u32, 1).rng();
                let shift = target - (1.0 - alpha);
                let scores: Vec<f64> = (0..n).map(|_| shift + rng.random::<f64>()).collect();
                let alpha_bar = inflated_level(alpha, delta, n)?;
                // scores may be negative after the shift; conformal quantiles are
                // translation-equivariant so calibrate the unshifted sample
                let raw = ScoreSet::new(scores.iter().map(|s| s - shift).collect(), j)?;
                let q = empirical_quantile(&raw, 1.0 - alpha_bar)?.q + shift;
                (q, c, delta_j)
            }
        };
        let eta = q - target;
        rows.push(TraceRow {
            j,
            r,
            e,
            bound_u,
            bound_c,
            eta,
            eta_bound: eta_bnd,
            delta_budget: budget,
        });
        if j == episodes {
            break;
        }
        budget += dj;
        acc = params.gamma * acc + eta.abs();
        r = explicit_update(q.max(0.0), r, map.kappa)?.r_next;
    }
    Ok(FixedPointTrace {
        rows,
        kappa: map.kappa,
        c,
    })
}
