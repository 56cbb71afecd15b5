//! Reads the run logs of one experiment directory and summarizes them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use plasticity::continual::{TASK_END_MSE, TRAIN_MSE};
use plasticity::interventions::InterventionKind;
use plasticity::metrics::{MetricSeries, CSV_HEADER};
use plasticity::rl::run::{EVAL_RETURN, WEIGHT_NORM};
use plasticity::stats::{
    best_over_variants, final_window_mean, iqm, norm_ratio_report, percent_improvement, stratified_bootstrap_ci,
    ScoreMatrix, FINAL_WINDOW,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::runner::{run_id, Manifest, RunStatus, MANIFEST, METRICS, STATUS};
use crate::CliError;

pub const N_BOOT: usize = 2000;
pub const ALPHA: f64 = 0.05;
pub const BOOT_SEED: u64 = 0;
/// Weight-norm growth flagged in the norm-ratio report.
pub const NORM_FACTOR: f64 = 3.0;
pub const SUMMARY: &str = "summary.json";

#[derive(Debug)]
pub struct LoadedRun {
    pub manifest: Manifest,
    pub series: MetricSeries,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub name: String,
    pub n_runs: usize,
    pub iqm: f64,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub ci_degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Improvement {
    pub variant: String,
    pub baseline: String,
    pub percent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BestInjection {
    pub variants: Vec<String>,
    pub iqm: f64,
    pub percent_vs_baseline: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormRow {
    pub run_id: String,
    pub initial: f64,
    pub final_norm: f64,
    pub ratio: f64,
    pub crossing_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Excluded {
    pub run_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: String,
    pub kind: ExperimentKind,
    pub code_version: String,
    pub score: String,
    pub higher_is_better: bool,
    pub n_boot: usize,
    pub alpha: f64,
    pub variants: Vec<VariantSummary>,
    pub percent_improvement: Vec<Improvement>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_injection: Option<BestInjection>,
    pub norm_factor: f64,
    pub norm_ratios: Vec<NormRow>,
    pub excluded_runs: Vec<Excluded>,
}

/// A plot-ready table: key columns, then one column per variant holding the
/// across-seed mean (blank where no run logged that key).
#[derive(Clone, Debug, PartialEq)]
pub struct PlotTable {
    pub name: String,
    pub key_columns: Vec<String>,
    pub keys: Vec<Vec<u64>>,
    pub variants: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    /// x positions of vertical markers (task boundaries).
    pub markers: Vec<u64>,
}

impl PlotTable {
    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let header: Vec<&str> = self.key_columns.iter().chain(&self.variants).map(String::as_str).collect();
        let err = |e: csv::Error| CliError::Run(format!("plot csv: {e}"));
        w.write_record(&header).map_err(err)?;
        for (k, row) in self.keys.iter().zip(&self.values) {
            let mut rec: Vec<String> = k.iter().map(u64::to_string).collect();
            rec.extend(row.iter().map(|v| v.map_or_else(String::new, |v| v.to_string())));
            w.write_record(&rec).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Run(format!("plot csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

#[derive(Debug)]
pub struct Aggregation {
    pub summary: Summary,
    pub plots: Vec<PlotTable>,
    pub warnings: Vec<String>,
}

fn parse_metrics(path: &Path) -> Result<MetricSeries, CliError> {
    let bad = |m: String| CliError::Config(format!("{}: {m}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = rdr.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    if header.join(",") != CSV_HEADER {
        return Err(bad(format!("unexpected header {:?}", header.join(","))));
    }
    let mut series = MetricSeries::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |j: usize| rec.get(j).unwrap_or_default();
        let parse_u = |j: usize| field(j).parse::<u64>().map_err(|e| bad(format!("row {}: {e}", i + 1)));
        let seed = parse_u(1)?;
        if i == 0 {
            series.run_id = field(0).into();
            series.seed = seed;
        } else if field(0) != series.run_id || seed != series.seed {
            return Err(bad(format!("row {} belongs to another run", i + 1)));
        }
        let value = field(5).parse::<f64>().map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
        series.push(field(2), parse_u(3)?, field(4), value);
    }
    Ok(series)
}

/// Loads complete runs; partial logs become warnings.
pub fn load_runs(dir: &Path, warnings: &mut Vec<String>) -> Result<Vec<LoadedRun>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let mut dirs: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    let mut runs = Vec::new();
    for d in dirs {
        let name = d.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let manifest_path = d.join(MANIFEST);
        if !manifest_path.exists() {
            continue;
        }
        let status: Option<RunStatus> =
            fs::read_to_string(d.join(STATUS)).ok().and_then(|t| serde_json::from_str(&t).ok());
        if !status.as_ref().is_some_and(|s| s.complete) {
            warnings.push(format!("{name}: partial run log excluded"));
            continue;
        }
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
        if manifest.run_id != name || manifest.run_id != run_id(&manifest.variant, manifest.seed) {
            return Err(CliError::Config(format!("{name}: manifest run id {:?} does not match", manifest.run_id)));
        }
        let mut series = parse_metrics(&d.join(METRICS))?;
        if !series.records.is_empty() && (series.run_id != manifest.run_id || series.seed != manifest.seed) {
            return Err(CliError::Config(format!("{name}: metrics belong to another run")));
        }
        series.run_id = manifest.run_id.clone();
        series.seed = manifest.seed;
        series.aborted = status.and_then(|s| s.aborted);
        runs.push(LoadedRun { manifest, series });
    }
    runs.sort_by(|a, b| a.manifest.run_id.cmp(&b.manifest.run_id));
    Ok(runs)
}

fn check_consistent(runs: &[LoadedRun]) -> Result<&ExperimentConfig, CliError> {
    let first = runs.first().ok_or_else(|| CliError::Config("no complete run logs found".into()))?;
    for r in runs {
        let m = &r.manifest;
        if m.experiment != first.manifest.experiment || m.code_version != first.manifest.code_version {
            return Err(CliError::Config(format!(
                "inconsistent manifests: {} and {} come from different configs or code versions",
                first.manifest.run_id, m.run_id
            )));
        }
        if !m.experiment.variant_names().contains(&m.variant.as_str()) || !m.experiment.seeds.contains(&m.seed) {
            return Err(CliError::Config(format!("{}: variant or seed not in its config", m.run_id)));
        }
    }
    Ok(&first.manifest.experiment)
}

fn task_index(context: &str) -> Option<u64> {
    context.strip_prefix("task:")?.parse().ok()
}

/// Across-seed mean of `metric` per key, one column per variant.
fn mean_table(
    name: &str,
    runs: &[&LoadedRun],
    variants: &[String],
    metric: &str,
    key: impl Fn(&plasticity::metrics::MetricRecord) -> Vec<u64>,
    key_columns: &[&str],
) -> PlotTable {
    let mut acc: BTreeMap<Vec<u64>, Vec<(f64, usize)>> = BTreeMap::new();
    for r in runs {
        let col = variants.iter().position(|v| *v == r.manifest.variant).expect("known variant");
        for rec in r.series.metric(metric) {
            let cell = &mut acc.entry(key(rec)).or_insert_with(|| vec![(0.0, 0); variants.len()])[col];
            cell.0 += rec.value;
            cell.1 += 1;
        }
    }
    let (keys, values) = acc
        .into_iter()
        .map(|(k, cells)| (k, cells.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect()))
        .unzip();
    PlotTable {
        name: name.into(),
        key_columns: key_columns.iter().map(|s| s.to_string()).collect(),
        keys,
        variants: variants.to_vec(),
        values,
        markers: Vec::new(),
    }
}

fn has_injection(cfg: &ExperimentConfig, variant: &str) -> bool {
    cfg.rl.as_ref().is_some_and(|r| {
        r.variants.iter().any(|v| {
            v.name == variant && v.config.schedule.iter().any(|s| matches!(s.intervention, InterventionKind::Inject(_)))
        })
    })
}

pub fn aggregate(dir: &Path) -> Result<Aggregation, CliError> {
    let mut warnings = Vec::new();
    let all = load_runs(dir, &mut warnings)?;
    let cfg = check_consistent(&all)?.clone();
    let code_version = all[0].manifest.code_version.clone();
    let mut excluded = Vec::new();
    let mut runs: Vec<&LoadedRun> = Vec::new();
    for r in &all {
        match &r.series.aborted {
            Some(reason) => {
                warnings.push(format!("{}: aborted ({reason}), excluded from statistics", r.manifest.run_id));
                excluded.push(Excluded { run_id: r.manifest.run_id.clone(), reason: reason.clone() });
            }
            None => runs.push(r),
        }
    }
    let variants: Vec<String> = cfg
        .variant_names()
        .into_iter()
        .filter(|v| runs.iter().any(|r| r.manifest.variant == *v))
        .map(String::from)
        .collect();
    for v in cfg.variant_names() {
        for s in &cfg.seeds {
            let id = run_id(v, *s);
            if !all.iter().any(|r| r.manifest.run_id == id) {
                warnings.push(format!("{id}: no complete log"));
            }
        }
    }
    if variants.is_empty() {
        return Err(CliError::Config("every run aborted; nothing to aggregate".into()));
    }

    let (score, higher_is_better) = match cfg.kind {
        ExperimentKind::Continual => (format!("{TASK_END_MSE} per run and task"), false),
        ExperimentKind::Rl => (format!("mean {EVAL_RETURN} over the final {} of evaluations", FINAL_WINDOW), true),
    };
    let score_rows = |r: &LoadedRun| -> Result<Vec<f64>, CliError> {
        let v = match cfg.kind {
            ExperimentKind::Continual => r.series.values(TASK_END_MSE),
            ExperimentKind::Rl => vec![final_window_mean(&r.series.values(EVAL_RETURN), FINAL_WINDOW)
                .map_err(|e| CliError::Config(format!("{}: {e}", r.manifest.run_id)))?],
        };
        Ok(v)
    };

    let mut summaries = Vec::new();
    for v in &variants {
        let rows = runs
            .iter()
            .filter(|r| r.manifest.variant == *v)
            .map(|r| score_rows(r))
            .collect::<Result<Vec<_>, _>>()?;
        let sm = ScoreMatrix::from_rows(&rows).map_err(|e| CliError::Config(format!("variant {v}: {e}")))?;
        let ci = stratified_bootstrap_ci(&sm, ScoreMatrix::iqm, N_BOOT, ALPHA, BOOT_SEED)
            .map_err(|e| CliError::Config(format!("variant {v}: {e}")))?;
        summaries.push(VariantSummary {
            name: v.clone(),
            n_runs: sm.n_runs(),
            iqm: sm.iqm(),
            mean: sm.mean(),
            ci_lo: ci.lo,
            ci_hi: ci.hi,
            ci_degenerate: ci.degenerate,
        });
    }

    let base = &summaries[0];
    let improvement = |name: &str, value: f64| match percent_improvement(value, base.iqm) {
        Ok(p) => Improvement { variant: name.into(), baseline: base.name.clone(), percent: Some(p), note: None },
        Err(e) => Improvement { variant: name.into(), baseline: base.name.clone(), percent: None, note: Some(e.to_string()) },
    };
    let percent = summaries[1..].iter().map(|s| improvement(&s.name, s.iqm)).collect();

    let injected: Vec<String> = variants.iter().filter(|v| has_injection(&cfg, v)).cloned().collect();
    let best_injection = if injected.len() >= 2 {
        let mut per_seed = Vec::new();
        for s in &cfg.seeds {
            let maps: Vec<BTreeMap<String, Vec<f64>>> = injected
                .iter()
                .filter_map(|v| runs.iter().find(|r| r.manifest.variant == *v && r.manifest.seed == *s))
                .map(|r| BTreeMap::from([("catch".to_string(), r.series.values(EVAL_RETURN))]))
                .collect();
            if maps.len() == injected.len() {
                let best = best_over_variants(&maps).map_err(|e| CliError::Config(e.to_string()))?;
                per_seed.push(best["catch"]);
            }
        }
        match iqm(&per_seed) {
            Ok(v) => Some(BestInjection {
                variants: injected,
                iqm: v,
                percent_vs_baseline: percent_improvement(v, base.iqm).ok(),
            }),
            Err(_) => None,
        }
    } else {
        None
    };

    let norms: Vec<(String, Vec<(u64, f64)>)> = all
        .iter()
        .map(|r| (r.manifest.run_id.clone(), r.series.metric(WEIGHT_NORM).map(|m| (m.step, m.value)).collect()))
        .collect();
    let norm_ratios = norm_ratio_report(&norms, NORM_FACTOR)
        .map_err(|e| CliError::Config(e.to_string()))?
        .into_iter()
        .map(|n| NormRow {
            run_id: n.run_id,
            initial: n.initial,
            final_norm: n.final_norm,
            ratio: n.ratio,
            crossing_step: n.crossing_step,
        })
        .collect();

    let mut plots = Vec::new();
    match cfg.kind {
        ExperimentKind::Continual => {
            let mut t = mean_table(
                TRAIN_MSE,
                &runs,
                &variants,
                TRAIN_MSE,
                |r| vec![r.step, task_index(&r.context).unwrap_or(0)],
                &["step", "task"],
            );
            let mut markers = BTreeSet::new();
            for w in t.keys.windows(2) {
                if w[0][1] != w[1][1] {
                    markers.insert(w[1][0]);
                }
            }
            t.markers = markers.into_iter().collect();
            plots.push(t);
            plots.push(mean_table(
                TASK_END_MSE,
                &runs,
                &variants,
                TASK_END_MSE,
                |r| vec![task_index(&r.context).unwrap_or(0)],
                &["task"],
            ));
        }
        ExperimentKind::Rl => {
            plots.push(mean_table(EVAL_RETURN, &runs, &variants, EVAL_RETURN, |r| vec![r.step], &["step"]));
        }
    }
    plots.push(mean_table(WEIGHT_NORM, &runs, &variants, WEIGHT_NORM, |r| vec![r.step], &["step"]));

    let summary = Summary {
        experiment: cfg.name.clone(),
        kind: cfg.kind,
        code_version,
        score,
        higher_is_better,
        n_boot: N_BOOT,
        alpha: ALPHA,
        variants: summaries,
        percent_improvement: percent,
        best_injection,
        norm_factor: NORM_FACTOR,
        norm_ratios,
        excluded_runs: excluded,
    };
    Ok(Aggregation { summary, plots, warnings })
}

/// Writes `summary.json`, `plot_<name>.csv` and, on request, SVG charts.
pub fn write_outputs(dir: &Path, agg: &Aggregation, svg: bool) -> Result<(), CliError> {
    let w = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| CliError::Run(format!("{}: {e}", p.display())))
    };
    let mut json = serde_json::to_string_pretty(&agg.summary).expect("summary serializes");
    json.push('\n');
    w(SUMMARY, &json)?;
    for t in &agg.plots {
        w(&format!("plot_{}.csv", t.name), &t.to_csv()?)?;
        if svg {
            w(&format!("plot_{}.svg", t.name), &crate::svg::line_chart(t))?;
        }
    }
    Ok(())
}
