//! Evaluation statistics: interquartile mean, stratified bootstrap
//! confidence intervals, percentage improvements, best-over-variants
//! aggregation, weight-norm ratios and two rank tests used by the
//! benchmarks' directional checks.

use std::collections::BTreeMap;

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::seed;

/// Interquartile mean: mean of the middle 50% of the sorted sample.
///
/// Each sorted value owns an equal slice of probability mass; values
/// straddling the 25% or 75% quantile contribute only the part of their
/// slice that lies inside `[0.25, 0.75]`. For `n` divisible by 4 this is the
/// plain mean of the middle `n/2` values.
pub fn iqm(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Usage("iqm of an empty sample".into()));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(sorted_iqm(&v))
}

fn sorted_iqm(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    // in units of one sample's mass
    let (lo, hi) = (n / 4.0, 3.0 * n / 4.0);
    let mut acc = 0.0;
    for (i, x) in v.iter().enumerate() {
        let a = (i as f64).max(lo);
        let b = ((i + 1) as f64).min(hi);
        if b > a {
            acc += x * (b - a);
        }
    }
    acc / (hi - lo)
}

/// Scores of `n_runs` independent runs on each of `n_tasks` tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    n_runs: usize,
    n_tasks: usize,
    values: Vec<f64>,
    pub run_labels: Vec<String>,
    pub task_labels: Vec<String>,
}

impl ScoreMatrix {
    /// `rows[run][task]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_runs = rows.len();
        let n_tasks = rows.first().map_or(0, Vec::len);
        if n_runs == 0 || n_tasks == 0 {
            return Err(Error::Usage("score matrix needs at least one run and one task".into()));
        }
        if rows.iter().any(|r| r.len() != n_tasks) {
            return Err(Error::Usage("score matrix rows have different task counts".into()));
        }
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Usage("score matrix contains non-finite entries".into()));
        }
        Ok(Self {
            n_runs,
            n_tasks,
            values,
            run_labels: (0..n_runs).map(|i| format!("run{i}")).collect(),
            task_labels: (0..n_tasks).map(|i| format!("task{i}")).collect(),
        })
    }

    pub fn n_runs(&self) -> usize {
        self.n_runs
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn get(&self, run: usize, task: usize) -> f64 {
        self.values[run * self.n_tasks + task]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// IQM over every entry of the matrix.
    pub fn iqm(&self) -> f64 {
        iqm(&self.values).expect("matrix is non-empty")
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    /// Set when resampling cannot vary the data (a single run per task).
    pub degenerate: bool,
}

/// Linear-interpolation quantile of a sorted sample.
fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let (f, c) = (h.floor() as usize, h.ceil() as usize);
    v[f] + (h - h.floor()) * (v[c] - v[f])
}

/// Percentile bootstrap interval with runs resampled independently within
/// each task.
pub fn stratified_bootstrap_ci<F>(
    sm: &ScoreMatrix,
    statistic: F,
    n_boot: usize,
    alpha: f64,
    seed_value: u64,
) -> Result<ConfidenceInterval>
where
    F: Fn(&ScoreMatrix) -> f64,
{
    if n_boot < 100 {
        return Err(Error::Usage(format!("n_boot must be >= 100, got {n_boot}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Usage(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if sm.n_runs == 1 {
        let s = statistic(sm);
        return Ok(ConfidenceInterval {
            lo: s,
            hi: s,
            degenerate: true,
        });
    }
    let mut rng = seed::rng(seed_value);
    let mut resample = sm.clone();
    let mut stats = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        for t in 0..sm.n_tasks {
            for r in 0..sm.n_runs {
                let pick = rng.random_range(0..sm.n_runs);
                resample.values[r * sm.n_tasks + t] = sm.get(pick, t);
            }
        }
        stats.push(statistic(&resample));
    }
    stats.sort_by(f64::total_cmp);
    Ok(ConfidenceInterval {
        lo: quantile_sorted(&stats, alpha / 2.0),
        hi: quantile_sorted(&stats, 1.0 - alpha / 2.0),
        degenerate: false,
    })
}

/// `100·(a − b)/|b|`.
pub fn percent_improvement(a: f64, b: f64) -> Result<f64> {
    if b == 0.0 {
        return Err(Error::UndefinedBaseline);
    }
    Ok(100.0 * (a - b) / b.abs())
}

/// Mean of the trailing `fraction` of a series (at least one point).
pub fn final_window_mean(series: &[f64], fraction: f64) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::Usage("final window of an empty series".into()));
    }
    let n = ((series.len() as f64 * fraction).ceil() as usize).clamp(1, series.len());
    let tail = &series[series.len() - n..];
    Ok(tail.iter().sum::<f64>() / n as f64)
}

/// Fraction of evaluation points averaged into a run's final score.
pub const FINAL_WINDOW: f64 = 0.1;

/// Per task, the maximum over variants of the final-window mean score.
///
/// Each variant maps task label to its score series; every variant must
/// cover the same task labels.
pub fn best_over_variants(variants: &[BTreeMap<String, Vec<f64>>]) -> Result<BTreeMap<String, f64>> {
    let first = variants
        .first()
        .ok_or_else(|| Error::Usage("best_over_variants needs at least one variant".into()))?;
    let tasks: Vec<&String> = first.keys().collect();
    let mut best = BTreeMap::new();
    for (i, v) in variants.iter().enumerate() {
        if v.keys().collect::<Vec<_>>() != tasks {
            return Err(Error::Usage(format!("variant {i} covers a different task set")));
        }
        for (task, series) in v {
            let score = final_window_mean(series, FINAL_WINDOW)?;
            best.entry(task.clone())
                .and_modify(|b: &mut f64| *b = b.max(score))
                .or_insert(score);
        }
    }
    Ok(best)
}

/// Final-to-initial weight norm of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct NormRatio {
    pub run_id: String,
    pub initial: f64,
    pub final_norm: f64,
    pub ratio: f64,
    /// First step whose norm exceeds `factor × initial`.
    pub crossing_step: Option<u64>,
}

/// Ratio table from `(run_id, [(step, norm)])` samples; the first sample
/// must be at step 0.
pub fn norm_ratio_report(runs: &[(String, Vec<(u64, f64)>)], factor: f64) -> Result<Vec<NormRatio>> {
    runs.iter()
        .map(|(run_id, samples)| {
            let (first, last) = match (samples.first(), samples.last()) {
                (Some(f), Some(l)) if f.0 == 0 => (f, l),
                _ => {
                    return Err(Error::Usage(format!(
                        "run {run_id} lacks a weight_norm record at step 0"
                    )))
                }
            };
            if !(first.1 > 0.0) {
                return Err(Error::Usage(format!("run {run_id} has a zero initial norm")));
            }
            let crossing_step = samples
                .iter()
                .find(|(_, n)| *n > factor * first.1)
                .map(|(s, _)| *s);
            Ok(NormRatio {
                run_id: run_id.clone(),
                initial: first.1,
                final_norm: last.1,
                ratio: last.1 / first.1,
                crossing_step,
            })
        })
        .collect()
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

/// Kendall's tau between `ys` and their index, with the large-sample normal
/// approximation of the two-sided p-value.
pub fn kendall_trend_test(ys: &[f64]) -> Result<(f64, f64)> {
    let n = ys.len();
    if n < 3 {
        return Err(Error::Usage("trend test needs at least 3 points".into()));
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += match ys[j].partial_cmp(&ys[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    let nf = n as f64;
    let pairs = nf * (nf - 1.0) / 2.0;
    let tau = s as f64 / pairs;
    let var = nf * (nf - 1.0) * (2.0 * nf + 5.0) / 18.0;
    let z = s as f64 / var.sqrt();
    let p = 2.0 * (1.0 - standard_normal().cdf(z.abs()));
    Ok((tau, p.min(1.0)))
}

/// Two-sided Mann-Whitney U test (normal approximation, tie-corrected).
/// Returns `(U_a, p)`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("Mann-Whitney needs two non-empty samples".into()));
    }
    let mut all: Vec<(f64, usize)> = a
        .iter()
        .map(|x| (*x, 0))
        .chain(b.iter().map(|x| (*x, 1)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for rk in ranks.iter_mut().take(j + 1).skip(i) {
            *rk = r;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let r1: f64 = all
        .iter()
        .zip(&ranks)
        .filter(|((_, g), _)| *g == 0)
        .map(|(_, r)| r)
        .sum();
    let u1 = r1 - n1 * (n1 + 1.0) / 2.0;
    let mu = n1 * n2 / 2.0;
    let nn = n1 + n2;
    let var = n1 * n2 / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if var <= 0.0 {
        return Ok((u1, 1.0));
    }
    let z = (u1 - mu).abs() / var.sqrt();
    let p = 2.0 * (1.0 - standard_normal().cdf(z));
    Ok((u1, p.min(1.0)))
}
