//! Next-radius computation: the closed-form minimal solution of
//! `r' >= q + kappa |r' - r|`, the bisection solver for the implicit
//! requirement `r' >= q + beta_T ||pi*(r') - pi||_inf`, and projection onto
//! the admissible interval.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::dynamics::Policy;
use crate::error::{Error, Result};
use crate::planner::PolicyMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusInterval {
    pub r_min: f64,
    pub r_max: f64,
}

impl RadiusInterval {
    pub fn new(r_min: f64, r_max: f64) -> Result<Self> {
        let i = Self { r_min, r_max };
        i.validate()?;
        Ok(i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_min >= 0.0 && self.r_min <= self.r_max && self.r_max.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "radius interval must satisfy 0 <= r_min <= r_max, got [{}, {}]",
                self.r_min, self.r_max
            )))
        }
    }

    pub fn contains(&self, r: f64) -> bool {
        r >= self.r_min && r <= self.r_max
    }
}

pub fn project(r: f64, interval: &RadiusInterval) -> f64 {
    r.max(interval.r_min).min(interval.r_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Shrinkage,
    Expansion,
    Bisection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateOutcome {
    pub r_next: f64,
    pub branch: Branch,
    pub projected: bool,
    /// `r_next - (q + shift)`, with the shift measured by the solver that
    /// produced `r_next`.
    pub slack: f64,
    /// Planner calls spent by the implicit solver.
    pub probes: usize,
}

/// Minimal solution of `r' >= q + kappa |r' - r|` for `0 <= kappa < 1`.
pub fn explicit_update(q: f64, r: f64, kappa: f64) -> Result<UpdateOutcome> {
    if !(kappa >= 0.0 && kappa < 1.0) {
        return Err(Error::InvalidGain(kappa));
    }
    if !(q >= 0.0 && r >= 0.0) || !q.is_finite() || !r.is_finite() {
        return Err(Error::InvalidArgument(format!("q and r must be finite and >= 0, got q = {q}, r = {r}")));
    }
    let (r_next, branch) = if q <= r {
        ((q + kappa * r) / (1.0 + kappa), Branch::Shrinkage)
    } else {
        ((q - kappa * r) / (1.0 - kappa), Branch::Expansion)
    };
    Ok(UpdateOutcome {
        r_next,
        branch,
        projected: false,
        slack: r_next - (q + kappa * (r_next - r).abs()),
        probes: 0,
    })
}

/// Explicit update followed by projection. Projection up to `r_min` keeps
/// the inequality; projection down to `r_max` is re-checked and rejected if
/// it breaks it.
pub fn explicit_update_projected(
    q: f64,
    r: f64,
    kappa: f64,
    interval: &RadiusInterval,
) -> Result<UpdateOutcome> {
    let mut out = explicit_update(q, r, kappa)?;
    let clamped = project(out.r_next, interval);
    if clamped != out.r_next {
        out.projected = true;
        out.r_next = clamped;
        out.slack = clamped - (q + kappa * (clamped - r).abs());
        if out.slack < -1e-9 {
            return Err(Error::NoSafeRadius {
                low: interval.r_min,
                high: interval.r_max,
            });
        }
    }
    Ok(out)
}

/// Bisection for the smallest `r` in `[max(q, r_min), r_max]` with
/// `r >= q + beta_T ||pi*(r) - pi_prev||_inf`. Each probe is warm-started
/// from the previous probe's policy. Returns the final upper end.
pub fn implicit_update(
    q: f64,
    pi_prev: &Policy,
    beta_t: f64,
    interval: &RadiusInterval,
    bisect_tol: f64,
    map: &dyn PolicyMap,
) -> Result<UpdateOutcome> {
    if !(bisect_tol > 0.0) {
        return Err(Error::InvalidArgument(format!("bisection tolerance must be > 0, got {bisect_tol}")));
    }
    if !(beta_t >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta_T must be >= 0, got {beta_t}")));
    }
    let mut low = q.max(interval.r_min);
    if q < interval.r_min {
        debug!("implicit solver: q = {q} below r_min, starting at r_min = {}", interval.r_min);
    }
    let mut high = interval.r_max;
    if low > high {
        return Err(Error::NoSafeRadius { low, high });
    }

    let required = |pi: &Policy| -> Result<f64> { Ok(q + beta_t * pi.dist_inf(pi_prev)?) };

    let mut probes = 1;
    let pi_high = map.policy_at(high, pi_prev)?;
    let mut need_high = required(&pi_high)?;
    if high < need_high {
        return Err(Error::NoSafeRadius { low, high });
    }

    let mut warm = pi_high;
    while high - low > bisect_tol {
        let cand = 0.5 * (low + high);
        probes += 1;
        match map.policy_at(cand, &warm) {
            Ok(pi) => {
                let need = required(&pi)?;
                if cand >= need {
                    high = cand;
                    need_high = need;
                } else {
                    low = cand;
                }
                warm = pi;
            }
            Err(Error::Infeasible { radius, reason }) => {
                warn!("implicit solver: probe at r = {radius} infeasible ({reason}); searching higher");
                low = cand;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(UpdateOutcome {
        r_next: high,
        branch: Branch::Bisection,
        projected: false,
        slack: high - need_high,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::State;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::cell::Cell;

    /// `pi*(r) = c r` along a fixed unit direction.
    struct LinearMap {
        c: f64,
        calls: Cell<usize>,
    }

    impl LinearMap {
        fn new(c: f64) -> Self {
            Self { c, calls: Cell::new(0) }
        }
        fn at(&self, r: f64) -> Policy {
            Policy::constant(3, State::xy(0.6 * self.c * r, 0.8 * self.c * r))
        }
    }

    impl PolicyMap for LinearMap {
        fn policy_at(&self, r: f64, _warm: &Policy) -> Result<Policy> {
            self.calls.set(self.calls.get() + 1);
            Ok(self.at(r))
        }
    }

    #[test]
    fn explicit_examples() {
        for &k in &[0.0, 0.3, 0.9] {
            let o = explicit_update(1.7, 1.7, k).unwrap();
            assert_relative_eq!(o.r_next, 1.7, epsilon = 1e-15);
        }
        let o = explicit_update(1.0, 2.0, 0.5).unwrap();
        assert_eq!(o.branch, Branch::Shrinkage);
        assert_relative_eq!(o.r_next, 4.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(o.r_next, 1.0 + 0.5 * (2.0 - o.r_next), epsilon = 1e-15);
        let o = explicit_update(2.0, 1.0, 0.5).unwrap();
        assert_eq!(o.branch, Branch::Expansion);
        assert_relative_eq!(o.r_next, 3.0, epsilon = 1e-15);
        assert_relative_eq!(o.r_next, 2.0 + 0.5 * (o.r_next - 1.0), epsilon = 1e-15);
        assert_eq!(explicit_update(0.42, 3.0, 0.0).unwrap().r_next, 0.42);
        assert_eq!(explicit_update(4.2, 3.0, 0.0).unwrap().r_next, 4.2);
    }

    #[test]
    fn explicit_rejects_large_gain() {
        assert!(matches!(explicit_update(1.0, 1.0, 1.0), Err(Error::InvalidGain(_))));
        assert!(matches!(explicit_update(1.0, 1.0, -0.1), Err(Error::InvalidGain(_))));
        assert!(explicit_update(-1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn projection_examples() {
        let i = RadiusInterval::new(0.1, 3.0).unwrap();
        assert_eq!(project(1.0, &i), 1.0);
        assert_eq!(project(0.01, &i), 0.1);
        assert_eq!(project(5.0, &i), 3.0);
        assert!(RadiusInterval::new(2.0, 1.0).is_err());
        assert!(RadiusInterval::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn projected_update_rechecks_upper_clamp() {
        let i = RadiusInterval::new(0.5, 3.0).unwrap();
        // lower clamp is always safe
        let o = explicit_update_projected(0.1, 0.2, 0.2, &i).unwrap();
        assert!(o.projected);
        assert_eq!(o.r_next, 0.5);
        assert!(o.slack >= 0.0);
        // the minimal solution 4.5 exceeds r_max
        assert!(matches!(
            explicit_update_projected(4.0, 3.0, 0.1, &i),
            Err(Error::NoSafeRadius { .. })
        ));
    }

    #[test]
    fn implicit_decoupled_returns_lower_end() {
        let map = LinearMap::new(1.0);
        let i = RadiusInterval::new(0.0, 5.0).unwrap();
        let o = implicit_update(1.3, &map.at(2.0), 0.0, &i, 1e-4, &map).unwrap();
        assert!(o.r_next >= 1.3 && o.r_next <= 1.3 + 1e-4);
        let i = RadiusInterval::new(2.0, 5.0).unwrap();
        let o = implicit_update(1.3, &map.at(2.0), 0.0, &i, 1e-4, &map).unwrap();
        assert!(o.r_next >= 2.0 && o.r_next <= 2.0 + 1e-4);
    }

    #[test]
    fn implicit_constant_map_returns_lower_end() {
        let map = LinearMap::new(0.0);
        let i = RadiusInterval::new(0.0, 5.0).unwrap();
        let o = implicit_update(0.7, &map.at(0.0), 3.0, &i, 1e-4, &map).unwrap();
        assert!(o.r_next >= 0.7 && o.r_next <= 0.7 + 1e-4);
    }

    #[test]
    fn implicit_matches_explicit_on_linear_map() {
        let map = LinearMap::new(0.8);
        let beta = 0.5;
        let i = RadiusInterval::new(0.0, 100.0).unwrap();
        for &(q, r_prev) in &[(1.0, 2.0), (2.0, 1.0), (0.3, 0.3), (5.0, 0.0)] {
            let o = implicit_update(q, &map.at(r_prev), beta, &i, 1e-6, &map).unwrap();
            let want = explicit_update(q, r_prev, beta * 0.8).unwrap().r_next;
            assert!((o.r_next - want).abs() <= 1e-6, "q={q} r={r_prev}: {} vs {want}", o.r_next);
            assert!(o.slack >= 0.0);
        }
    }

    #[test]
    fn implicit_probe_count_bound() {
        let map = LinearMap::new(0.5);
        let i = RadiusInterval::new(0.0, 10.0).unwrap();
        let q = 1.0;
        let tol = 1e-4;
        let o = implicit_update(q, &map.at(1.5), 0.6, &i, tol, &map).unwrap();
        let bound = ((10.0 - q) / tol).log2().ceil() as usize;
        // one extra call checks r_max
        assert!(o.probes <= bound + 1, "{} probes", o.probes);
        assert_eq!(o.probes, map.calls.get());
    }

    #[test]
    fn implicit_no_safe_radius() {
        let map = LinearMap::new(2.0);
        let i = RadiusInterval::new(0.0, 1.0).unwrap();
        // need r >= 0.9 + 0.9 * 2 |r - 0|: impossible below 1
        let err = implicit_update(0.9, &map.at(0.0), 0.9, &i, 1e-4, &map).unwrap_err();
        assert!(matches!(err, Error::NoSafeRadius { .. }));
        let err = implicit_update(2.0, &map.at(0.0), 0.0, &i, 1e-4, &map).unwrap_err();
        assert!(matches!(err, Error::NoSafeRadius { .. }));
    }

    proptest! {
        #[test]
        fn explicit_saturates_inequality(q in 0.0..10.0f64, r in 0.0..10.0f64, k in 0.0..0.99f64) {
            let o = explicit_update(q, r, k).unwrap();
            prop_assert!((o.r_next - q - k * (o.r_next - r).abs()).abs() <= 1e-9);
            prop_assert!(o.slack >= -1e-9);
        }

        #[test]
        fn stability_and_shrinkage(q in 0.0..10.0f64, r in 0.0..10.0f64, k in 0.0..0.99f64) {
            let o = explicit_update(q, r, k).unwrap();
            prop_assert!((o.r_next - r).abs() <= (q - r).abs() / (1.0 - k) + 1e-12);
            if q < r {
                prop_assert!(o.r_next < r);
            }
        }

        #[test]
        fn branch_consistency(q in 0.0..10.0f64, r in 0.0..10.0f64, k in 0.0..0.99f64) {
            let o = explicit_update(q, r, k).unwrap();
            match o.branch {
                Branch::Shrinkage => prop_assert!(o.r_next <= r),
                Branch::Expansion => prop_assert!(o.r_next > r),
                Branch::Bisection => unreachable!(),
            }
        }
    }
}
