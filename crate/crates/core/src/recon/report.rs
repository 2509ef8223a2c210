use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::PhaseSource;
use crate::error::{Error, Result};
use crate::mask::MaskSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ssim,
    Psnr,
    Nrmse,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ssim, Metric::Psnr, Metric::Nrmse];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ssim => "ssim",
            Metric::Psnr => "psnr",
            Metric::Nrmse => "nrmse",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssim" => Ok(Metric::Ssim),
            "psnr" => Ok(Metric::Psnr),
            "nrmse" => Ok(Metric::Nrmse),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

pub const ZERO_FILLED: &str = "zero_filled";
pub const VARNET: &str = "varnet";

/// Per-slice values of one metric for one method at one mask point.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub method: String,
    pub phase_source: Option<PhaseSource>,
    pub spec: MaskSpec,
    pub r_eff: f64,
    pub metric: Metric,
    pub values: Vec<f64>,
}

impl ScoreSet {
    fn key(&self) -> (&str, Option<PhaseSource>, MaskSpec, Metric) {
        (&self.method, self.phase_source, self.spec, self.metric)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub phase_source: Option<PhaseSource>,
    pub spec: MaskSpec,
    pub r_eff: f64,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MetricRow {
    pub fn phase_label(&self) -> &'static str {
        self.phase_source.map_or("none", PhaseSource::as_str)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for a single value or identical values
/// (including repeated infinities), NaN when infinities are mixed with others.
fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 || v.iter().all(|&x| x == v[0]) {
        return 0.0;
    }
    let m = mean(v);
    if !m.is_finite() {
        return f64::NAN;
    }
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn json_num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(fmt_num(v))
    }
}

impl MetricReport {
    /// One row per score set, in input order.
    pub fn from_sets(sets: &[ScoreSet]) -> Self {
        Self::aggregate(&[sets.to_vec()])
    }

    /// Combines repeated runs (e.g. training seeds). A key's mean is the
    /// arithmetic mean of its per-run means; std and `n` pool every value.
    /// Row order follows first appearance.
    pub fn aggregate(runs: &[Vec<ScoreSet>]) -> Self {
        let mut order: Vec<&ScoreSet> = Vec::new();
        for set in runs.iter().flatten() {
            if !order.iter().any(|s| s.key() == set.key()) {
                order.push(set);
            }
        }
        let rows = order
            .into_iter()
            .map(|first| {
                let matching: Vec<&ScoreSet> = runs
                    .iter()
                    .flatten()
                    .filter(|s| s.key() == first.key() && !s.values.is_empty())
                    .collect();
                let per_run: Vec<f64> = matching.iter().map(|s| mean(&s.values)).collect();
                let pooled: Vec<f64> = matching.iter().flat_map(|s| s.values.iter().copied()).collect();
                MetricRow {
                    method: first.method.clone(),
                    phase_source: first.phase_source,
                    spec: first.spec,
                    r_eff: first.r_eff,
                    metric: first.metric,
                    mean: if per_run.is_empty() { f64::NAN } else { mean(&per_run) },
                    std: sample_std(&pooled),
                    n: pooled.len(),
                }
            })
            .collect();
        Self { rows }
    }

    pub fn find(&self, method: &str, phase: Option<PhaseSource>, spec: MaskSpec, metric: Metric) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.phase_source == phase && r.spec == spec && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,phase_source,R,n_acs,R_eff,metric,mean,std,n\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.method,
                r.phase_label(),
                r.spec.r,
                r.spec.n_acs,
                fmt_num(r.r_eff),
                r.metric.as_str(),
                fmt_num(r.mean),
                fmt_num(r.std),
                r.n
            );
        }
        s
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                json!({
                    "method": r.method,
                    "phase_source": r.phase_label(),
                    "R": r.spec.r,
                    "n_acs": r.spec.n_acs,
                    "R_eff": json_num(r.r_eff),
                    "metric": r.metric.as_str(),
                    "mean": json_num(r.mean),
                    "std": json_num(r.std),
                    "n": r.n,
                })
            })
            .collect();
        json!({ "rows": rows })
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        for p in [csv_path, json_path] {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let mut json = serde_json::to_string_pretty(&self.to_json())?;
        json.push('\n');
        std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(method: &str, metric: Metric, values: Vec<f64>) -> ScoreSet {
        ScoreSet {
            method: method.into(),
            phase_source: Some(PhaseSource::Gt),
            spec: MaskSpec { r: 4, n_acs: 16 },
            r_eff: 3.2,
            metric,
            values,
        }
    }

    #[test]
    fn aggregate_mean_is_mean_of_run_means() {
        let runs = vec![
            vec![set(VARNET, Metric::Nrmse, vec![0.1, 0.2])],
            vec![set(VARNET, Metric::Nrmse, vec![0.4, 0.4])],
            vec![set(VARNET, Metric::Nrmse, vec![0.3, 0.0])],
        ];
        let report = MetricReport::aggregate(&runs);
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        let means = [0.15, 0.4, 0.15];
        assert!((row.mean - means.iter().sum::<f64>() / 3.0).abs() < 1e-15);
        assert_eq!(row.n, 6);
    }

    #[test]
    fn std_and_non_finite_formatting() {
        assert_eq!(sample_std(&[1.0]), 0.0);
        assert!((sample_std(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(sample_std(&[f64::INFINITY, f64::INFINITY]), 0.0);
        assert!(sample_std(&[f64::INFINITY, 1.0]).is_nan());
        let report = MetricReport::from_sets(&[set(VARNET, Metric::Psnr, vec![f64::INFINITY; 3])]);
        let csv = report.to_csv();
        assert_eq!(csv.lines().nth(1).unwrap(), "varnet,gt,4,16,3.2,psnr,inf,0,3");
        assert_eq!(report.to_json()["rows"][0]["mean"], "inf");
    }

    #[test]
    fn rows_keep_first_appearance_order() {
        let sets = vec![
            set(VARNET, Metric::Ssim, vec![0.9]),
            set(ZERO_FILLED, Metric::Ssim, vec![0.5]),
            set(VARNET, Metric::Nrmse, vec![0.1]),
        ];
        let report = MetricReport::from_sets(&sets);
        let methods: Vec<_> = report.rows.iter().map(|r| (r.method.as_str(), r.metric)).collect();
        assert_eq!(
            methods,
            vec![(VARNET, Metric::Ssim), (ZERO_FILLED, Metric::Ssim), (VARNET, Metric::Nrmse)]
        );
    }
}
