//! Report types, their long-format CSV views and atomic artifact writing.
//!
//! JSON is canonical. Every CSV table is derived from the same report value,
//! with floats printed at 17 significant digits so that parsing a cell gives
//! back the exact `f64` stored in the JSON.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use crate::decoding::{StressReport, UpdateOperator};
use crate::dependence::DependenceReport;
use crate::error::Result;
use crate::model::{ModelFile, PartialContext};
use crate::order_error::{RankedOrder, StrataReport};
use crate::pseudo_joint::{ConsistencyReport, CurlScanStats};
use crate::synthetic::{SyntheticTaskSpec, TrainConfig, TrainingHistory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    /// `bayes`, `perturbed` or `trained`.
    pub kind: String,
    pub vocab_size: usize,
    pub positions: usize,
    /// SHA-256 of the model's JSON serialization.
    pub model_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurlSampleRow {
    pub i: usize,
    pub j: usize,
    pub a: usize,
    pub b: usize,
    pub curl: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurlScanEntry {
    pub context_id: usize,
    pub stats: CurlScanStats,
    pub samples: Vec<CurlSampleRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependenceEntry {
    pub context_id: usize,
    pub report: DependenceReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderErrorEntry {
    pub context_id: usize,
    pub rankings: Vec<RankedOrder>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderErrorSection {
    pub entries: Vec<OrderErrorEntry>,
    pub strata: StrataReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyEntry {
    pub context_id: usize,
    pub report: ConsistencyReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommutatorRow {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommutatorEntry {
    pub context_id: usize,
    pub operator: UpdateOperator,
    pub pairs: Vec<CommutatorRow>,
    /// Pairs whose two commits leave nothing to compare.
    pub excluded: Vec<(usize, usize)>,
    pub conflict: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderGapRow {
    /// Block assignment in block order.
    pub assignment: Vec<usize>,
    pub log_gap: f64,
    pub curl_sum: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderGapEntry {
    pub context_id: usize,
    pub start: Vec<usize>,
    pub end: Vec<usize>,
    pub steps: Vec<usize>,
    pub rows: Vec<OrderGapRow>,
    pub max_abs_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSection {
    pub task: SyntheticTaskSpec,
    /// TC of the whole sequence with nothing observed.
    pub tc: f64,
    pub joint_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub config: TrainConfig,
    pub history: TrainingHistory,
    pub ecirc_prefix_like: f64,
    pub ecirc_random_mask: f64,
}

/// Excluded from reproducibility comparisons.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix_ms: u128,
    pub elapsed_ms: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelSummary,
    pub contexts: Vec<PartialContext>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curl_scan: Option<Vec<CurlScanEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dependence: Option<Vec<DependenceEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_error: Option<OrderErrorSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_gap: Option<Vec<OrderGapEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commutator: Option<Vec<CommutatorEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stress: Option<StressReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<Vec<ConsistencyEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    pub wall_clock: WallClock,
}

impl DiagnosticReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The report as JSON with wall-clock metadata blanked; equal across
    /// runs of the same config.
    pub fn numeric_content(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_clock = WallClock::default();
        Ok(serde_json::to_string(&r)?)
    }
}

/// One long-format table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &'static str, header: &[&'static str]) -> Self {
        Self { name, header: header.to_vec(), rows: Vec::new() }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn f(x: f64) -> String {
    format_float(x)
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

/// Long-format CSV views of every section present in the report. A present
/// but empty section gives a header-only table.
pub fn emit_plot_data(report: &DiagnosticReport) -> Vec<Table> {
    let mut tables = Vec::new();
    if let Some(entries) = &report.curl_scan {
        let mut summary = Table::new(
            "curl_summary",
            &["context_id", "selection", "ecirc_abs", "ecirc_abs_std_err", "ecirc_norm", "max_curl"],
        );
        let mut pairs = Table::new("curl_pairs", &["context_id", "i", "j", "order_swap_kl"]);
        let mut samples = Table::new("curl_samples", &["context_id", "i", "j", "a", "b", "curl", "normalized"]);
        for e in entries {
            let s = &e.stats;
            summary.rows.push(vec![
                e.context_id.to_string(),
                s.selection.clone(),
                f(s.ecirc_abs.mean),
                f(s.ecirc_abs.std_err),
                f(s.ecirc_norm.mean),
                f(s.max_curl),
            ]);
            for p in &s.order_swap_kl {
                pairs.rows.push(vec![e.context_id.to_string(), p.i.to_string(), p.j.to_string(), f(p.kl.mean)]);
            }
            for r in &e.samples {
                samples.rows.push(vec![
                    e.context_id.to_string(),
                    r.i.to_string(),
                    r.j.to_string(),
                    r.a.to_string(),
                    r.b.to_string(),
                    f(r.curl),
                    f(r.normalized),
                ]);
            }
        }
        tables.extend([summary, pairs, samples]);
    }
    if let Some(entries) = &report.dependence {
        let mut tc = Table::new(
            "tc",
            &["context_id", "tc", "sum_marginal_entropies", "joint_entropy", "independent_parallel_kl", "sum_pairwise_cmi"],
        );
        let mut cmi = Table::new("pairwise_cmi", &["context_id", "i", "j", "cmi"]);
        for e in entries {
            let r = &e.report;
            tc.rows.push(vec![
                e.context_id.to_string(),
                f(r.tc),
                f(r.sum_marginal_entropies),
                f(r.joint_entropy),
                f(r.independent_parallel_kl),
                f(r.sum_pairwise_cmi),
            ]);
            for p in &r.pairwise_cmi {
                cmi.rows.push(vec![e.context_id.to_string(), p.i.to_string(), p.j.to_string(), f(p.cmi)]);
            }
        }
        tables.extend([tc, cmi]);
    }
    if let Some(section) = &report.order_error {
        let mut ranks = Table::new("order_rankings", &["context_id", "rank", "order", "kl_total", "cross_entropy"]);
        for e in &section.entries {
            for r in &e.rankings {
                ranks.rows.push(vec![
                    e.context_id.to_string(),
                    r.rank.to_string(),
                    join(&r.order),
                    f(r.kl_total),
                    f(r.cross_entropy),
                ]);
            }
        }
        let mut strata = Table::new("order_strata", &["stratum", "count", "mean_kl"]);
        for r in &section.strata.rows {
            strata.rows.push(vec![r.stratum.label().to_string(), r.count.to_string(), r.mean_kl.map(f).unwrap_or_default()]);
        }
        tables.extend([ranks, strata]);
    }
    if let Some(entries) = &report.order_gap {
        let mut t = Table::new("order_gap", &["context_id", "start", "end", "assignment", "log_gap", "curl_sum", "residual"]);
        for e in entries {
            for r in &e.rows {
                t.rows.push(vec![
                    e.context_id.to_string(),
                    join(&e.start),
                    join(&e.end),
                    join(&r.assignment),
                    f(r.log_gap),
                    f(r.curl_sum),
                    f(r.residual),
                ]);
            }
        }
        tables.push(t);
    }
    if let Some(entries) = &report.commutator {
        let mut t = Table::new("commutator", &["context_id", "i", "j", "value"]);
        for e in entries {
            for r in &e.pairs {
                t.rows.push(vec![e.context_id.to_string(), r.i.to_string(), r.j.to_string(), f(r.value)]);
            }
        }
        tables.push(t);
    }
    if let Some(stress) = &report.stress {
        let mut t = Table::new(
            "stress",
            &[
                "context_id",
                "scheduler",
                "width",
                "nll",
                "nll_std_err",
                "degradation",
                "ecirc_abs",
                "tc",
                "mean_eps",
                "conflict",
            ],
        );
        for r in &stress.rows {
            t.rows.push(vec![
                r.context_id.to_string(),
                r.scheduler.clone(),
                r.width.to_string(),
                f(r.nll),
                f(r.nll_std_err),
                f(r.degradation),
                f(r.ecirc_abs),
                f(r.tc),
                f(r.mean_eps),
                f(r.conflict),
            ]);
        }
        let mut c = Table::new("stress_correlations", &["predictor", "spearman", "rows"]);
        for r in &stress.correlations {
            c.rows.push(vec![r.predictor.clone(), r.spearman.map(f).unwrap_or_default(), r.rows.to_string()]);
        }
        tables.extend([t, c]);
    }
    if let Some(entries) = &report.consistency {
        let mut t = Table::new(
            "consistency",
            &["context_id", "consistent", "verdicts_agree", "max_order_gap", "max_square_curl", "orders_checked", "squares_checked"],
        );
        for e in entries {
            let r = &e.report;
            t.rows.push(vec![
                e.context_id.to_string(),
                r.consistent.to_string(),
                r.verdicts_agree.to_string(),
                f(r.max_order_gap),
                f(r.max_square_curl),
                r.orders_checked.to_string(),
                r.squares_checked.to_string(),
            ]);
        }
        tables.push(t);
    }
    if let Some(train) = &report.train {
        let mut t = Table::new("train_history", &["step", "loss", "denoising_loss", "ecirc", "grad_norm"]);
        let h = &train.history;
        for k in 0..h.loss.len() {
            t.rows.push(vec![k.to_string(), f(h.loss[k]), f(h.denoising_loss[k]), f(h.ecirc[k]), f(h.grad_norm[k])]);
        }
        tables.push(t);
    }
    tables
}

/// What to write next to the JSON report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    Json,
    JsonCsv,
}

/// Writes `report.json`, the CSV tables (for [`OutputFormat::JsonCsv`]) and
/// `model.json` when given. Every file goes to a temporary in `dir` first and
/// is renamed into place only once all of them are complete.
pub fn write_artifacts(
    dir: &Path,
    report: &DiagnosticReport,
    model: Option<&ModelFile>,
    format: OutputFormat,
) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(String, String)> = vec![("report.json".into(), report.to_json()?)];
    if format == OutputFormat::JsonCsv {
        for t in emit_plot_data(report) {
            files.push((format!("{}.csv", t.name), t.to_csv()?));
        }
    }
    if let Some(m) = model {
        files.push(("model.json".into(), serde_json::to_string_pretty(m)?));
    }
    std::fs::create_dir_all(dir)?;
    let mut staged = Vec::with_capacity(files.len());
    for (name, body) in files {
        let mut tmp = NamedTempFile::new_in(dir)?;
        tmp.write_all(body.as_bytes())?;
        tmp.as_file().sync_all()?;
        staged.push((tmp, dir.join(name)));
    }
    let mut written = Vec::with_capacity(staged.len());
    for (tmp, path) in staged {
        tmp.persist(&path).map_err(|e| e.error)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::StressRow;

    fn empty_report() -> DiagnosticReport {
        DiagnosticReport {
            tool_version: crate::VERSION.into(),
            command: "stress".into(),
            config_hash: String::new(),
            seed: 0,
            model: ModelSummary { kind: "bayes".into(), vocab_size: 2, positions: 2, model_id: String::new() },
            contexts: vec![],
            curl_scan: None,
            dependence: None,
            order_error: None,
            order_gap: None,
            commutator: None,
            stress: None,
            consistency: None,
            synth: None,
            train: None,
            wall_clock: WallClock::default(),
        }
    }

    fn stress_row(cid: usize, scheduler: &str, width: usize, x: f64) -> StressRow {
        StressRow {
            context_id: cid,
            scheduler: scheduler.into(),
            width,
            nll: x,
            nll_std_err: x / 7.0,
            degradation: x - 1.0 / 3.0,
            ecirc_abs: x * std::f64::consts::PI,
            tc: 1e-300 * x,
            mean_eps: x.sqrt(),
            conflict: -x / 11.0,
        }
    }

    #[test]
    fn empty_section_gives_header_only_csv() {
        let mut r = empty_report();
        r.stress = Some(StressReport { runs: 1, seed: 0, rows: vec![], correlations: vec![] });
        let tables = emit_plot_data(&r);
        let stress = tables.iter().find(|t| t.name == "stress").unwrap();
        let csv = stress.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("context_id,scheduler,width,nll"));
        assert!(emit_plot_data(&empty_report()).is_empty());
    }

    #[test]
    fn stress_rows_round_trip_through_csv() {
        let mut r = empty_report();
        let mut rows = Vec::new();
        for cid in 0..4 {
            for s in ["left-to-right", "confidence"] {
                for w in 1..=3 {
                    rows.push(stress_row(cid, s, w, 0.1 + cid as f64 * 0.37 + w as f64 / 3.0));
                }
            }
        }
        r.stress = Some(StressReport { runs: 5, seed: 1, rows: rows.clone(), correlations: vec![] });
        let t = emit_plot_data(&r).into_iter().find(|t| t.name == "stress").unwrap();
        assert_eq!(t.rows.len(), 24);
        let csv = t.to_csv().unwrap();
        let mut reader = csv::Reader::from_reader(csv.as_bytes());
        let back: Vec<StressRow> = reader.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn float_format_is_exact() {
        for x in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, f64::MIN_POSITIVE, 123456.789] {
            assert_eq!(format_float(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn numeric_content_ignores_wall_clock() {
        let a = empty_report();
        let mut b = empty_report();
        b.wall_clock.elapsed_ms = 99;
        assert_eq!(a.numeric_content().unwrap(), b.numeric_content().unwrap());
    }

    #[test]
    fn artifacts_land_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = empty_report();
        r.stress = Some(StressReport { runs: 1, seed: 0, rows: vec![stress_row(0, "random", 1, 0.5)], correlations: vec![] });
        let written = write_artifacts(dir.path(), &r, None, OutputFormat::JsonCsv).unwrap();
        let names: Vec<String> =
            written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["report.json", "stress.csv", "stress_correlations.csv"]);
        let entries = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(entries, 3);
        let back: DiagnosticReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
