//! Agreement between metric scores and human ratings: Pearson, Spearman with
//! average ranks for ties, and Bland–Altman limits of agreement.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::exec;

/// Multiplier for the 95% limits of agreement.
pub const LOA_Z: f64 = 1.96;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("degenerate input {input}: {reason}")]
    DegenerateInput { input: String, reason: String },
    #[error("length mismatch: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("scores file: {0}")]
    Csv(String),
    #[error("scores file is missing column {0:?}")]
    MissingColumn(String),
    #[error("scores file row {row}: missing value for column {column:?}")]
    MissingCell { row: usize, column: String },
    #[error("scores file row {row}: column {column:?} has non-numeric value {value:?}")]
    BadCell { row: usize, column: String, value: String },
}

fn degenerate(input: &str, reason: impl Into<String>) -> StatsError {
    StatsError::DegenerateInput { input: input.into(), reason: reason.into() }
}

fn check_pair(x: &[f64], y: &[f64], min_n: usize) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch { x: x.len(), y: y.len() });
    }
    for (name, v) in [("x", x), ("y", y)] {
        if v.len() < min_n {
            return Err(degenerate(name, format!("{} values, need at least {min_n}", v.len())));
        }
        if let Some(i) = v.iter().position(|f| !f.is_finite()) {
            return Err(degenerate(name, format!("non-finite value at index {i}")));
        }
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-sided p-value of a correlation coefficient via the t distribution.
pub fn correlation_p(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    match StudentsT::new(0.0, 1.0, df) {
        Ok(dist) => (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0),
        Err(_) => f64::NAN,
    }
}

/// Sample Pearson correlation and its two-sided p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64), StatsError> {
    let r = pearson_r(x, y)?;
    Ok((r, correlation_p(r, x.len())))
}

fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check_pair(x, y, 3)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(degenerate("x", "zero variance"));
    }
    if syy == 0.0 {
        return Err(degenerate("y", "zero variance"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    // exact linear dependence can land a few ulps short of ±1
    Ok(if 1.0 - r.abs() <= 4.0 * f64::EPSILON { r.signum() } else { r })
}

/// 1-based ranks; ties share the mean of the positions they occupy.
pub fn rank(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let shared = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = shared;
        }
        start = end;
    }
    ranks
}

/// Spearman's rho (Pearson on average ranks) and its t-approximation p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64), StatsError> {
    check_pair(x, y, 3)?;
    let rho = pearson_r(&rank(x), &rank(y))?;
    Ok((rho, correlation_p(rho, x.len())))
}

/// Permutation p-value for Spearman's rho: the share of `shuffles` random
/// pairings whose |rho| reaches the observed one, with the usual +1
/// correction. Shuffle `i` is seeded from `(seed, i)`, so the result does not
/// depend on `workers`.
pub fn permutation_p(x: &[f64], y: &[f64], shuffles: usize, seed: u64, workers: usize) -> Result<f64, StatsError> {
    check_pair(x, y, 3)?;
    let (rx, ry) = (rank(x), rank(y));
    let observed = pearson_r(&rx, &ry)?.abs();
    let idx: Vec<u64> = (0..shuffles as u64).collect();
    let hits = exec::map_ordered(&idx, workers, |_, &i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i);
        let mut perm = ry.clone();
        perm.shuffle(&mut rng);
        // ranks are never constant here, so this cannot fail
        pearson_r(&rx, &perm).map(|r| r.abs() >= observed - 1e-12).unwrap_or(false)
    });
    let count = hits.iter().filter(|h| **h).count();
    Ok((count + 1) as f64 / (shuffles + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// `(mean, difference)` per item.
    pub points: Vec<(f64, f64)>,
}

/// Bland–Altman summary of `a − b`.
pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch { x: a.len(), y: b.len() });
    }
    for (name, v) in [("a", a), ("b", b)] {
        if v.len() < 2 {
            return Err(degenerate(name, format!("{} values, need at least 2", v.len())));
        }
        if let Some(i) = v.iter().position(|f| !f.is_finite()) {
            return Err(degenerate(name, format!("non-finite value at index {i}")));
        }
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_diff = mean(&diffs);
    let var = diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
    let sd_diff = var.sqrt();
    Ok(BlandAltman {
        mean_diff,
        sd_diff,
        loa_low: mean_diff - LOA_Z * sd_diff,
        loa_high: mean_diff + LOA_Z * sd_diff,
        points: a.iter().zip(b).map(|(x, y)| ((x + y) / 2.0, x - y)).collect(),
    })
}

/// Min–max maps `scores` onto `[lo, hi]`.
pub fn rescale(scores: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>, StatsError> {
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return Err(degenerate("range", format!("target range [{lo}, {hi}] is empty")));
    }
    if let Some(i) = scores.iter().position(|f| !f.is_finite()) {
        return Err(degenerate("scores", format!("non-finite value at index {i}")));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() || max == min {
        return Err(degenerate("scores", "constant scores cannot be rescaled"));
    }
    Ok(scores.iter().map(|s| lo + (s - min) / (max - min) * (hi - lo)).collect())
}

/// Human and metric scores for the same items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedScores {
    pub ids: Vec<String>,
    pub human: Vec<f64>,
    pub metric: Vec<f64>,
    pub metric_name: String,
}

impl PairedScores {
    pub fn new(ids: Vec<String>, human: Vec<f64>, metric: Vec<f64>, metric_name: impl Into<String>) -> Result<Self, StatsError> {
        if ids.len() != human.len() {
            return Err(StatsError::LengthMismatch { x: ids.len(), y: human.len() });
        }
        check_pair(&human, &metric, 3)?;
        Ok(PairedScores { ids, human, metric, metric_name: metric_name.into() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PValueMethod {
    T,
    Permutation,
}

/// How agreement is computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementOptions {
    /// Min–max rescale both series onto this range before Bland–Altman.
    pub rescale: Option<(f64, f64)>,
    /// `(shuffles, seed)` for a permutation Spearman p-value.
    pub permutation: Option<(usize, u64)>,
    pub workers: usize,
}

impl Default for AgreementOptions {
    fn default() -> Self {
        AgreementOptions { rescale: Some((0.0, 10.0)), permutation: None, workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub metric: String,
    pub n: usize,
    pub pearson_r: f64,
    pub pearson_p: f64,
    pub spearman_rho: f64,
    pub spearman_p: f64,
    pub spearman_p_method: PValueMethod,
    pub rescaled: bool,
    /// Bland–Altman of metric minus human.
    pub bland_altman: BlandAltman,
}

pub fn agreement(scores: &PairedScores, opts: &AgreementOptions) -> Result<AgreementReport, StatsError> {
    let (pearson_r, pearson_p) = pearson(&scores.human, &scores.metric)?;
    let (spearman_rho, t_p) = spearman(&scores.human, &scores.metric)?;
    let (spearman_p, spearman_p_method) = match opts.permutation {
        Some((shuffles, seed)) => {
            (permutation_p(&scores.human, &scores.metric, shuffles, seed, opts.workers)?, PValueMethod::Permutation)
        }
        None => (t_p, PValueMethod::T),
    };
    let (metric, human) = match opts.rescale {
        Some((lo, hi)) => (rescale(&scores.metric, lo, hi)?, rescale(&scores.human, lo, hi)?),
        None => (scores.metric.clone(), scores.human.clone()),
    };
    Ok(AgreementReport {
        metric: scores.metric_name.clone(),
        n: scores.human.len(),
        pearson_r,
        pearson_p,
        spearman_rho,
        spearman_p,
        spearman_p_method,
        rescaled: opts.rescale.is_some(),
        bland_altman: bland_altman(&metric, &human)?,
    })
}

/// Contents of a scores CSV: `id,human,<metric>,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub ids: Vec<String>,
    pub human: Vec<f64>,
    pub metrics: Vec<(String, Vec<f64>)>,
}

impl ScoreTable {
    pub fn load(path: &Path) -> Result<Self, StatsError> {
        let text = std::fs::read_to_string(path).map_err(|e| StatsError::Csv(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, StatsError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(text.as_bytes());
        let header: Vec<String> =
            reader.headers().map_err(|e| StatsError::Csv(e.to_string()))?.iter().map(str::to_string).collect();
        for (i, want) in ["id", "human"].iter().enumerate() {
            if header.get(i).map(String::as_str) != Some(*want) {
                return Err(StatsError::Csv(format!("header must start with id,human; got {:?}", header.join(","))));
            }
        }
        let mut table = ScoreTable {
            ids: Vec::new(),
            human: Vec::new(),
            metrics: header[2..].iter().map(|h| (h.clone(), Vec::new())).collect(),
        };
        for (i, record) in reader.records().enumerate() {
            let row = i + 2;
            let record = record.map_err(|e| StatsError::Csv(e.to_string()))?;
            let cell = |col: usize| -> Result<&str, StatsError> {
                match record.get(col) {
                    Some(v) if !v.is_empty() => Ok(v),
                    _ => Err(StatsError::MissingCell { row, column: header[col].clone() }),
                }
            };
            let number = |col: usize| -> Result<f64, StatsError> {
                let v = cell(col)?;
                v.parse::<f64>().ok().filter(|f| f.is_finite()).ok_or_else(|| StatsError::BadCell {
                    row,
                    column: header[col].clone(),
                    value: v.to_string(),
                })
            };
            if record.len() > header.len() {
                return Err(StatsError::Csv(format!("row {row} has {} cells, header has {}", record.len(), header.len())));
            }
            table.ids.push(cell(0)?.to_string());
            table.human.push(number(1)?);
            for (j, (_, values)) in table.metrics.iter_mut().enumerate() {
                values.push(number(j + 2)?);
            }
        }
        Ok(table)
    }

    pub fn metric_names(&self) -> Vec<&str> {
        self.metrics.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn paired(&self, metric: &str) -> Result<PairedScores, StatsError> {
        let (_, values) = self
            .metrics
            .iter()
            .find(|(n, _)| n == metric)
            .ok_or_else(|| StatsError::MissingColumn(metric.to_string()))?;
        PairedScores::new(self.ids.clone(), self.human.clone(), values.clone(), metric)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Textbook single-pass sums formula, independent of the two-pass code.
    fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    /// Rank by counting: less-than count plus half the other equal values.
    fn oracle_rank(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn pearson_examples() {
        assert_relative_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().0, 1.0);
        assert_relative_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().0, -1.0);
        let (x, y) = ([1.0, 2.0, 4.0, 5.0], [1.0, 3.0, 3.0, 6.0]);
        assert!((pearson(&x, &y).unwrap().0 - oracle_pearson(&x, &y)).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().1, 0.0);
    }

    #[test]
    fn degenerate_inputs_name_the_side() {
        match pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]) {
            Err(StatsError::DegenerateInput { input, .. }) => assert_eq!(input, "x"),
            other => panic!("{other:?}"),
        }
        match spearman(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]) {
            Err(StatsError::DegenerateInput { input, .. }) => assert_eq!(input, "y"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(StatsError::DegenerateInput { .. })));
        assert!(matches!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]), Err(StatsError::LengthMismatch { .. })));
    }

    #[test]
    fn p_value_matches_reference() {
        // r = 0.5, n = 10: t = 1.6330 on 8 degrees of freedom
        let p = correlation_p(0.5, 10);
        assert!((p - 0.141_113_281_25).abs() < 1e-9, "{p}");
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank(&[10.0, 20.0, 30.0]), [1.0, 2.0, 3.0]);
        assert_eq!(rank(&[5.0, 5.0]), [1.5, 1.5]);
        assert_eq!(rank(&[7.0, 3.0, 7.0, 1.0]), [3.5, 2.0, 3.5, 1.0]);
    }

    #[test]
    fn spearman_examples() {
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]).unwrap().0, 1.0);
        let (x, y) = ([1.0, 2.0, 2.0, 4.0], [3.0, 1.0, 2.0, 4.0]);
        assert_eq!(oracle_rank(&x), [1.0, 2.5, 2.5, 4.0]);
        let want = oracle_pearson(&oracle_rank(&x), &oracle_rank(&y));
        assert!((spearman(&x, &y).unwrap().0 - want).abs() < 1e-12);
        assert!(spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn bland_altman_fixture() {
        let ba = bland_altman(&[2.0, 4.0, 6.0], &[1.0, 5.0, 6.0]).unwrap();
        assert_eq!(ba.mean_diff, 0.0);
        // diffs 1, -1, 0: sum of squares 2 over n-1 = 2 gives variance 1
        assert_relative_eq!(ba.sd_diff, 1.0);
        assert_relative_eq!(ba.loa_low, -1.96);
        assert_relative_eq!(ba.loa_high, 1.96);
        assert_eq!(ba.points, [(1.5, 1.0), (4.5, -1.0), (6.0, 0.0)]);
        let same = bland_altman(&[3.0, 1.0, 4.0], &[3.0, 1.0, 4.0]).unwrap();
        assert_eq!((same.mean_diff, same.loa_low, same.loa_high), (0.0, 0.0, 0.0));
        assert!(bland_altman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale(&[0.0, 0.5, 1.0], 0.0, 10.0).unwrap(), [0.0, 5.0, 10.0]);
        let r = rescale(&[0.0, 3.0, 10.0], 0.0, 10.0).unwrap();
        assert_eq!((r[0], r[2]), (0.0, 10.0));
        assert!(rescale(&[4.0, 4.0], 0.0, 10.0).is_err());
        assert!(rescale(&[1.0, 2.0], 5.0, 5.0).is_err());
    }

    #[test]
    fn permutation_is_worker_independent() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let y = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0, 8.0, 7.0, 9.0, 11.0, 10.0, 12.0];
        let a = permutation_p(&x, &y, 2000, 7, 1).unwrap();
        let b = permutation_p(&x, &y, 2000, 7, 8).unwrap();
        assert_eq!(a, b);
        assert!(a < 0.01);
        let noise = [5.0, 1.0, 9.0, 3.0, 7.0, 2.0, 8.0, 4.0, 6.0, 0.0, 11.0, 10.0];
        assert!(permutation_p(&x, &noise, 2000, 7, 4).unwrap() > 0.01);
    }

    #[test]
    fn scores_csv() {
        let t = ScoreTable::parse("id,human,vice,clip\na,1,2,0.1\nb,5,4,0.3\nc,9,9,0.2\n").unwrap();
        assert_eq!(t.metric_names(), ["vice", "clip"]);
        let p = t.paired("clip").unwrap();
        assert_eq!(p.metric, [0.1, 0.3, 0.2]);
        assert_eq!(t.paired("llm"), Err(StatsError::MissingColumn("llm".into())));
        assert!(matches!(
            ScoreTable::parse("id,human,vice\na,1,2\nb,5,\n"),
            Err(StatsError::MissingCell { row: 3, .. })
        ));
        assert!(matches!(ScoreTable::parse("id,human,vice\na,1,x\n"), Err(StatsError::BadCell { .. })));
        assert!(matches!(ScoreTable::parse("human,id\n1,a\n"), Err(StatsError::Csv(_))));
    }

    #[test]
    fn identical_columns_agree_perfectly() {
        let t = ScoreTable::parse("id,human,copy\na,2,2\nb,7,7\nc,4,4\nd,9,9\n").unwrap();
        let r = agreement(&t.paired("copy").unwrap(), &AgreementOptions::default()).unwrap();
        assert_eq!((r.pearson_r, r.spearman_rho), (1.0, 1.0));
        let ba = r.bland_altman;
        assert_eq!((ba.mean_diff, ba.loa_low, ba.loa_high), (0.0, 0.0, 0.0));
    }

    fn series() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 3..40)
    }

    proptest! {
        #[test]
        fn affine_maps_are_perfectly_correlated(x in series(), a in 0.1f64..10.0, b in -50.0f64..50.0, neg in any::<bool>()) {
            prop_assume!(x.iter().any(|v| (v - x[0]).abs() > 1e-3));
            let a = if neg { -a } else { a };
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let r = pearson(&x, &y).unwrap().0;
            prop_assert!((r - a.signum()).abs() < 1e-9, "{}", r);
        }

        #[test]
        fn spearman_ignores_monotone_transforms(x in series(), y in series()) {
            let n = x.len().min(y.len());
            let (x, y) = (&x[..n], &y[..n]);
            prop_assume!(x.iter().any(|v| *v != x[0]) && y.iter().any(|v| *v != y[0]));
            let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            let a = spearman(x, y).unwrap().0;
            let b = spearman(&tx, y).unwrap().0;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn rank_sum_is_fixed(v in prop::collection::vec(0u8..6, 1..60)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let n = v.len() as f64;
            prop_assert_eq!(rank(&v).iter().sum::<f64>(), n * (n + 1.0) / 2.0);
            prop_assert_eq!(rank(&v), oracle_rank(&v));
        }

        #[test]
        fn bland_altman_is_antisymmetric(a in series(), b in series()) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            let ab = bland_altman(a, b).unwrap();
            let ba = bland_altman(b, a).unwrap();
            prop_assert!((ab.mean_diff + ba.mean_diff).abs() < 1e-12);
            prop_assert!((ab.sd_diff - ba.sd_diff).abs() < 1e-12);
        }

        #[test]
        fn matches_sum_oracle(x in series(), y in series()) {
            let n = x.len().min(y.len());
            let (x, y) = (&x[..n], &y[..n]);
            prop_assume!(x.iter().any(|v| *v != x[0]) && y.iter().any(|v| *v != y[0]));
            prop_assert!((pearson(x, y).unwrap().0 - oracle_pearson(x, y)).abs() < 1e-12);
        }
    }
}
