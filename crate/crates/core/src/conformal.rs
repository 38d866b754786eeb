//! Nonconformity scores, trajectory tubes and split-conformal calibration
//! with a finite-sample inflated miscoverage level.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

/// Nonconformity scores collected in one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    pub episode: usize,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, episode: usize) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InsufficientSamples("empty score set".into()));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scores must be finite and nonnegative, found {bad}"
            )));
        }
        Ok(Self { scores, episode })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn sorted(&self) -> Vec<f64> {
        let mut s = self.scores.clone();
        s.sort_by(f64::total_cmp);
        s
    }

    /// CSV with a `score` header and one value per line.
    pub fn write_csv<W: Write>(&self, out: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["score"])?;
        for s in &self.scores {
            w.write_record([format_full(*s)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, episode: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r
            .headers()
            .map_err(|e| Error::InvalidArgument(format!("score csv: {e}")))?
            .clone();
        if headers.len() != 1 || &headers[0] != "score" {
            return Err(Error::InvalidArgument(
                "score csv must have a single `score` column".into(),
            ));
        }
        let mut scores = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::InvalidArgument(format!("score csv: {e}")))?;
            let v: f64 = rec[0].trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("score csv line {}: cannot parse {:?}", line + 2, &rec[0]))
            })?;
            scores.push(v);
        }
        Self::new(scores, episode)
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
            .map_err(|e| Error::csv(path, e))
    }

    pub fn read_csv_file(path: &Path, episode: usize) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f), episode)
    }
}

/// Shortest representation that round-trips to the same `f64`.
pub(crate) fn format_full(v: f64) -> String {
    format!("{v:?}")
}

/// Outcome of one calibration step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub q: f64,
    pub alpha_bar: f64,
    pub n: usize,
    pub k_index: usize,
}

/// Tube of radius `radius` around a predicted trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeSpec {
    pub center: Trajectory,
    pub radius: f64,
}

impl TubeSpec {
    pub fn new(center: Trajectory, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::InvalidArgument(format!("tube radius must be >= 0, got {radius}")));
        }
        Ok(Self { center, radius })
    }
}

/// `max_t ||y_hat_t - y_t||_2`.
pub fn score(y_hat: &Trajectory, y: &Trajectory) -> Result<f64> {
    y_hat.dist_inf(y)
}

fn check_unit_open(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {v}")));
    }
    Ok(())
}

/// `alpha - sqrt(ln(1/delta) / (2n))`.
pub fn inflated_level(alpha: f64, delta: f64, n: usize) -> Result<f64> {
    check_unit_open("alpha", alpha)?;
    check_unit_open("delta", delta)?;
    if n == 0 {
        return Err(Error::InsufficientSamples("n must be at least 1".into()));
    }
    let alpha_bar = inflated_level_unchecked(alpha, delta, n);
    if alpha_bar <= 0.0 {
        return Err(Error::InsufficientSamples(format!(
            "n = {n} is too small for alpha = {alpha}, delta = {delta} (inflated level {alpha_bar:.4} <= 0)"
        )));
    }
    Ok(alpha_bar)
}

/// Formula without domain checks; accepts `delta = 1` and any `n >= 1`.
pub fn inflated_level_unchecked(alpha: f64, delta: f64, n: usize) -> f64 {
    alpha - ((1.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// Order-statistic index `ceil((n + 1) * level)`.
///
/// A relative slack of a few ulps absorbs representation error in products
/// that are mathematically integral, e.g. `10 * 0.9`.
pub fn conformal_index(n: usize, level: f64) -> usize {
    let raw = (n as f64 + 1.0) * level;
    let k = (raw - raw.abs() * 4.0 * f64::EPSILON).ceil();
    k.max(1.0) as usize
}

/// `k`-th smallest score with `k = ceil((N + 1) * level)`.
pub fn empirical_quantile(scores: &ScoreSet, level: f64) -> Result<CalibrationResult> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level must lie in (0, 1), got {level}")));
    }
    let n = scores.len();
    let k = conformal_index(n, level);
    if k > n {
        return Err(Error::InsufficientSamples(format!(
            "need k = {k} <= n = {n} for level {level}"
        )));
    }
    let mut buf = scores.as_slice().to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(CalibrationResult {
        q: *kth,
        alpha_bar: 1.0 - level,
        n,
        k_index: k,
    })
}

/// Inflate the level and take the conformal quantile of one episode's scores.
pub fn calibrate(scores: &ScoreSet, alpha: f64, delta: f64) -> Result<CalibrationResult> {
    let alpha_bar = inflated_level(alpha, delta, scores.len())?;
    let mut res = empirical_quantile(scores, 1.0 - alpha_bar)?;
    res.alpha_bar = alpha_bar;
    Ok(res)
}

/// Closed-tube membership, `score <= r`.
pub fn tube_contains(tube: &TubeSpec, y: &Trajectory) -> Result<bool> {
    Ok(score(&tube.center, y)? <= tube.radius)
}

pub fn coverage_estimate(tube: &TubeSpec, rollouts: &[Trajectory]) -> Result<f64> {
    if rollouts.is_empty() {
        return Err(Error::InsufficientSamples("no rollouts for coverage".into()));
    }
    let mut hit = 0usize;
    for y in rollouts {
        if tube_contains(tube, y)? {
            hit += 1;
        }
    }
    Ok(hit as f64 / rollouts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{State, TrajectoryKind};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(points: &[(f64, f64)]) -> Trajectory {
        Trajectory::new(
            points.iter().map(|&(a, b)| State::xy(a, b)).collect(),
            TrajectoryKind::Environment,
        )
    }

    #[test]
    fn score_examples() {
        let a = traj(&[(0.0, 0.0), (1.0, 2.0)]);
        assert_eq!(score(&a, &a).unwrap(), 0.0);
        let c = traj(&[(0.0, 0.0), (0.0, 0.0)]);
        let y = traj(&[(0.0, 0.0), (3.0, 4.0)]);
        assert_relative_eq!(score(&c, &y).unwrap(), 5.0);
        assert_eq!(score(&c, &y).unwrap(), score(&y, &c).unwrap());
        assert!(matches!(
            score(&c, &traj(&[(0.0, 0.0)])),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn inflated_level_values() {
        let ab = inflated_level(0.1, 0.05, 1000).unwrap();
        assert_relative_eq!(ab, 0.1 - (20.0_f64.ln() / 2000.0).sqrt(), epsilon = 1e-15);
        assert!((ab - 0.06130).abs() < 5e-6);
        assert_eq!(inflated_level_unchecked(0.1, 1.0, 10), 0.1);
        let big = inflated_level(0.1, 0.05, 10_000_000_000).unwrap();
        assert!((big - 0.1).abs() < 1e-4);
        assert!(matches!(inflated_level(0.1, 0.05, 1), Err(Error::InsufficientSamples(_))));
        assert!(inflated_level(0.1, 1.0, 10).is_err());
    }

    #[test]
    fn quantile_examples() {
        let s = ScoreSet::new((1..=9).map(f64::from).collect(), 0).unwrap();
        let r = empirical_quantile(&s, 0.9).unwrap();
        assert_eq!(r.k_index, 9);
        assert_eq!(r.q, 9.0);
        let s = ScoreSet::new(vec![5.0], 0).unwrap();
        let r = empirical_quantile(&s, 0.4).unwrap();
        assert_eq!((r.k_index, r.q), (1, 5.0));
    }

    #[test]
    fn quantile_undefined_when_k_exceeds_n() {
        let s = ScoreSet::new(vec![1.0, 2.0, 3.0], 0).unwrap();
        assert!(matches!(empirical_quantile(&s, 0.9), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn quantile_duplicates_count() {
        let s = ScoreSet::new(vec![2.0, 1.0, 2.0, 2.0, 3.0], 0).unwrap();
        // k = ceil(6 * 0.5) = 3 -> sorted [1,2,2,2,3][2] = 2
        assert_eq!(empirical_quantile(&s, 0.5).unwrap().q, 2.0);
    }

    #[test]
    fn quantile_matches_quadratic_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..200).map(|_| rng.random::<f64>() * 4.0).collect();
            let level = rng.random_range(0.05..0.95);
            let set = ScoreSet::new(scores.clone(), 0).unwrap();
            let got = empirical_quantile(&set, level).unwrap();
            // O(N^2) oracle: the k-th smallest is the value with exactly k-1
            // strictly smaller entries (up to ties).
            let k = got.k_index;
            let oracle = scores
                .iter()
                .copied()
                .find(|&v| {
                    let below = scores.iter().filter(|&&w| w < v).count();
                    let at_or_below = scores.iter().filter(|&&w| w <= v).count();
                    below < k && k <= at_or_below
                })
                .unwrap();
            assert_eq!(got.q, oracle);
        }
    }

    #[test]
    fn tube_examples() {
        let c = traj(&[(0.0, 0.0), (0.0, 0.0)]);
        let tube0 = TubeSpec::new(c.clone(), 0.0).unwrap();
        assert!(tube_contains(&tube0, &c).unwrap());
        let y = traj(&[(0.0, 0.0), (3.0, 4.0)]);
        assert!(!tube_contains(&TubeSpec::new(c.clone(), 4.999).unwrap(), &y).unwrap());
        assert!(tube_contains(&TubeSpec::new(c, 5.0).unwrap(), &y).unwrap());
        assert!(TubeSpec::new(traj(&[(0.0, 0.0)]), -1.0).is_err());
    }

    #[test]
    fn coverage_examples() {
        let c = traj(&[(0.0, 0.0), (0.0, 0.0)]);
        let tube = TubeSpec::new(c.clone(), 2.0).unwrap();
        assert_eq!(coverage_estimate(&tube, &[c.clone(), c.clone()]).unwrap(), 1.0);
        let rollouts = [
            traj(&[(0.0, 0.0), (0.5, 0.0)]),
            traj(&[(0.0, 0.0), (0.0, 1.5)]),
            traj(&[(0.0, 0.0), (2.5, 0.0)]),
        ];
        assert_relative_eq!(coverage_estimate(&tube, &rollouts).unwrap(), 2.0 / 3.0);
        let tight = TubeSpec::new(c, 0.0).unwrap();
        assert_eq!(coverage_estimate(&tight, &rollouts).unwrap(), 0.0);
        assert!(coverage_estimate(&tight, &[]).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_bits() {
        let s = ScoreSet::new(vec![0.1, 1.0 / 3.0, 2.0e-17, 7.0], 3).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("score\n"));
        let back = ScoreSet::read_csv(buf.as_slice(), 3).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn csv_rejects_wrong_header() {
        assert!(ScoreSet::read_csv("value\n1.0\n".as_bytes(), 0).is_err());
        assert!(ScoreSet::read_csv("score\nabc\n".as_bytes(), 0).is_err());
    }

    #[test]
    fn split_cp_coverage_property() {
        // P(new <= q) = k/(n+1) for continuous scores; check by Monte Carlo.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 50;
        let level = 0.8;
        let reps = 10_000;
        let mut hits = 0usize;
        let mut k = 0;
        for _ in 0..reps {
            let set = ScoreSet::new((0..n).map(|_| rng.random::<f64>()).collect(), 0).unwrap();
            let res = empirical_quantile(&set, level).unwrap();
            k = res.k_index;
            if rng.random::<f64>() <= res.q {
                hits += 1;
            }
        }
        let p = k as f64 / (n as f64 + 1.0);
        let mean = hits as f64 / reps as f64;
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        assert!(p >= level);
        assert!((mean - p).abs() <= 3.0 * se, "mean {mean} vs {p}");
    }

    proptest! {
        #[test]
        fn score_is_one_lipschitz(
            c in prop::collection::vec(prop::array::uniform2(-5.0..5.0f64), 4),
            a in prop::collection::vec(prop::array::uniform2(-5.0..5.0f64), 4),
            b in prop::collection::vec(prop::array::uniform2(-5.0..5.0f64), 4),
        ) {
            let t = |v: &Vec<[f64; 2]>| traj(&v.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>());
            let (c, a, b) = (t(&c), t(&a), t(&b));
            let lhs = (score(&c, &a).unwrap() - score(&c, &b).unwrap()).abs();
            prop_assert!(lhs <= a.dist_inf(&b).unwrap() + 1e-12);
        }

        #[test]
        fn quantile_monotone_in_level(
            scores in prop::collection::vec(0.0..10.0f64, 20..60),
            l1 in 0.01..0.9f64,
            dl in 0.0..0.09f64,
        ) {
            let set = ScoreSet::new(scores, 0).unwrap();
            let lo = empirical_quantile(&set, l1).unwrap();
            let hi = empirical_quantile(&set, l1 + dl);
            if let Ok(hi) = hi {
                prop_assert!(hi.q >= lo.q);
            }
        }

        #[test]
        fn tube_nesting(r in 0.0..3.0f64, extra in 0.0..3.0f64, p in prop::array::uniform2(-2.0..2.0f64)) {
            let c = traj(&[(0.0, 0.0), (0.0, 0.0)]);
            let y = traj(&[(0.0, 0.0), (p[0], p[1])]);
            let inner = TubeSpec::new(c.clone(), r).unwrap();
            let outer = TubeSpec::new(c, r + extra).unwrap();
            if tube_contains(&inner, &y).unwrap() {
                prop_assert!(tube_contains(&outer, &y).unwrap());
            }
        }
    }
}
