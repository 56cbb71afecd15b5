use std::fmt::Write as _;

/// One logged value.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub context: String,
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

/// Every record produced by one run, in emission order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricSeries {
    pub run_id: String,
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    /// Set when the run stopped early; the reason is also logged as a record.
    pub aborted: Option<String>,
}

pub const CSV_HEADER: &str = "run_id,seed,context,step,metric,value";

impl MetricSeries {
    pub fn new(run_id: impl Into<String>, seed: u64) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            records: Vec::new(),
            aborted: None,
        }
    }

    pub fn push(&mut self, context: impl Into<String>, step: u64, metric: impl Into<String>, value: f64) {
        self.records.push(MetricRecord {
            context: context.into(),
            step,
            metric: metric.into(),
            value,
        });
    }

    pub fn abort(&mut self, step: u64, reason: impl Into<String>) {
        let reason = reason.into();
        self.push("abort", step, "aborted", step as f64);
        self.aborted = Some(reason);
    }

    pub fn metric<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a MetricRecord> + 'a {
        self.records.iter().filter(move |r| r.metric == name)
    }

    pub fn values(&self, name: &str) -> Vec<f64> {
        self.metric(name).map(|r| r.value).collect()
    }

    /// CSV rows (without header), LF-terminated. Floats use the shortest
    /// representation that round-trips, so identical values give identical bytes.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.run_id, self.seed, r.context, r.step, r.metric, r.value
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}", self.csv_rows())
    }
}
