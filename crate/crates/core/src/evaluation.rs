//! Partition-level metrics, age/sex strata and per-runner ranking.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AgeRange, RunnerProfile, Segment, Sex};
use crate::features::LogMelSpectrogram;
use crate::model::{Cnn14, ModelError};
use crate::training::{ccc, mae, predict, Example};

pub const PAIRS_FILE: &str = "pairs.csv";
pub const STRATA_FILE: &str = "strata.csv";
pub const RUNNERS_FILE: &str = "per_runner.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const STRATA_PLOT_FILE: &str = "strata_plot.dat";
pub const RUNNERS_PLOT_FILE: &str = "per_runner_plot.dat";
/// Written in place of a metric that needs more data than it has.
pub const UNDEFINED: &str = "undefined";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("nothing to evaluate")]
    Empty,
    #[error("no features for segment `{0}`")]
    MissingFeatures(String),
    #[error("runner `{0}` has no profile")]
    UnknownRunner(String),
    #[error("malformed report table {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Mean absolute error; errors on empty or unequal inputs.
pub fn mean_absolute_error(preds: &[f64], targets: &[f64]) -> Result<f64, EvalError> {
    if preds.len() != targets.len() {
        return Err(EvalError::LengthMismatch(preds.len(), targets.len()));
    }
    mae(preds, targets).ok_or(EvalError::Empty)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub segment_id: String,
    pub runner_id: String,
    pub prediction: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub age_range: AgeRange,
    pub sex: Sex,
    pub mae: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerRow {
    pub runner_id: String,
    pub mae: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Sorted by segment id.
    pub pairs: Vec<Pair>,
    pub global_mae: f64,
    /// `None` with fewer than two pairs.
    pub global_ccc: Option<f64>,
    /// Non-empty cells in (age range, sex) order.
    pub strata: Vec<StratumRow>,
    /// Ascending MAE, ties by runner id.
    pub per_runner: Vec<RunnerRow>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Clamp predictions to [6, 20] before scoring.
    pub clip: bool,
    pub batch_size: usize,
}

fn abs_err(p: &Pair) -> f64 {
    (p.prediction - p.target).abs()
}

/// MAE and count per (age range, sex) cell; empty cells are omitted.
pub fn stratify(pairs: &[Pair], profiles: &[RunnerProfile]) -> Result<Vec<StratumRow>, EvalError> {
    let by_id: HashMap<&str, &RunnerProfile> = profiles.iter().map(|p| (p.runner_id.as_str(), p)).collect();
    let mut cells: BTreeMap<(AgeRange, Sex), (f64, usize)> = BTreeMap::new();
    for p in pairs {
        let prof = by_id
            .get(p.runner_id.as_str())
            .ok_or_else(|| EvalError::UnknownRunner(p.runner_id.clone()))?;
        let c = cells.entry((prof.age_range, prof.sex)).or_default();
        c.0 += abs_err(p);
        c.1 += 1;
    }
    Ok(cells
        .into_iter()
        .map(|((age_range, sex), (sum, count))| StratumRow {
            age_range,
            sex,
            mae: sum / count as f64,
            count,
        })
        .collect())
}

/// Per-runner MAE sorted best first.
pub fn per_runner(pairs: &[Pair]) -> Vec<RunnerRow> {
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for p in pairs {
        let c = acc.entry(p.runner_id.as_str()).or_default();
        c.0 += abs_err(p);
        c.1 += 1;
    }
    let mut rows: Vec<RunnerRow> = acc
        .into_iter()
        .map(|(id, (sum, count))| RunnerRow {
            runner_id: id.to_string(),
            mae: sum / count as f64,
            count,
        })
        .collect();
    rows.sort_by(|a, b| a.mae.total_cmp(&b.mae).then_with(|| a.runner_id.cmp(&b.runner_id)));
    rows
}

/// Builds the full report from prediction/target pairs.
pub fn report_from_pairs(mut pairs: Vec<Pair>, profiles: &[RunnerProfile]) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    pairs.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));
    let preds: Vec<f64> = pairs.iter().map(|p| p.prediction).collect();
    let targets: Vec<f64> = pairs.iter().map(|p| p.target).collect();
    let global_mae = mean_absolute_error(&preds, &targets)?;
    let global_ccc = (pairs.len() >= 2).then(|| ccc(&preds, &targets).expect("lengths checked"));
    let strata = stratify(&pairs, profiles)?;
    let per_runner = per_runner(&pairs);
    Ok(EvalReport {
        pairs,
        global_mae,
        global_ccc,
        strata,
        per_runner,
    })
}

/// Predicts every example with `model` in eval mode and scores the result.
pub fn evaluate(
    model: &Cnn14,
    examples: &[Example],
    profiles: &[RunnerProfile],
    opts: EvalOptions,
) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    let refs: Vec<&Example> = examples.iter().collect();
    let preds = predict(model, &refs, opts.batch_size.max(1))?;
    let pairs = examples
        .iter()
        .zip(preds)
        .map(|(e, p)| Pair {
            segment_id: e.segment_id.clone(),
            runner_id: e.runner_id.clone(),
            prediction: if opts.clip { p.clamp(6.0, 20.0) } else { p },
            target: e.target,
        })
        .collect();
    report_from_pairs(pairs, profiles)
}

/// Loads each segment's cached features; relative feature paths resolve
/// against `base`.
pub fn load_examples(segments: &[&Segment], base: &Path, hop_seconds: f64) -> Result<Vec<Example>, EvalError> {
    segments
        .iter()
        .map(|s| {
            let rel = s
                .feature_path
                .as_deref()
                .ok_or_else(|| EvalError::MissingFeatures(s.segment_id.clone()))?;
            let path = base.join(rel);
            let features = LogMelSpectrogram::read(&path, hop_seconds)
                .map_err(|_| EvalError::MissingFeatures(s.segment_id.clone()))?;
            Ok(Example {
                segment_id: s.segment_id.clone(),
                runner_id: s.runner_id.clone(),
                features,
                target: s.fatigue as f64,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Summary {
    count: usize,
    mae: f64,
    /// A number, or the string "undefined".
    ccc: serde_json::Value,
}

fn write_text(path: &Path, text: &str) -> Result<(), EvalError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Writes the pairs, strata and per-runner tables, a JSON summary, and two
/// whitespace-separated plot files (`index mae` per stratum, `rank mae` per
/// runner).
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut s = String::from("segment_id,runner_id,prediction,target\n");
    for p in &report.pairs {
        s.push_str(&format!("{},{},{},{}\n", p.segment_id, p.runner_id, p.prediction, p.target));
    }
    write_text(&out_dir.join(PAIRS_FILE), &s)?;

    let mut s = String::from("age_range,sex,mae,count\n");
    let mut plot = String::from("# stratum_index mae\n");
    for (i, r) in report.strata.iter().enumerate() {
        s.push_str(&format!("{},{},{},{}\n", r.age_range, r.sex, r.mae, r.count));
        plot.push_str(&format!("{} {}\n", i + 1, r.mae));
    }
    write_text(&out_dir.join(STRATA_FILE), &s)?;
    write_text(&out_dir.join(STRATA_PLOT_FILE), &plot)?;

    let mut s = String::from("runner_id,mae,count\n");
    let mut plot = String::from("# rank mae\n");
    for (i, r) in report.per_runner.iter().enumerate() {
        s.push_str(&format!("{},{},{}\n", r.runner_id, r.mae, r.count));
        plot.push_str(&format!("{} {}\n", i + 1, r.mae));
    }
    write_text(&out_dir.join(RUNNERS_FILE), &s)?;
    write_text(&out_dir.join(RUNNERS_PLOT_FILE), &plot)?;

    let summary = Summary {
        count: report.pairs.len(),
        mae: report.global_mae,
        ccc: match report.global_ccc {
            Some(c) if c.is_finite() => serde_json::json!(c),
            _ => serde_json::json!(UNDEFINED),
        },
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    write_text(&out_dir.join(SUMMARY_FILE), &json)
}

/// Parses a pairs table written by [`emit_report`].
pub fn read_pairs(path: &Path) -> Result<Vec<Pair>, EvalError> {
    let parse_err = |message: String| EvalError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let header = rdr.headers().map_err(|e| parse_err(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["segment_id", "runner_id", "prediction", "target"] {
        return Err(parse_err(format!("unexpected header {header:?}")));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e: csv::Error| parse_err(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(seg: &str, runner: &str, p: f64, t: f64) -> Pair {
        Pair {
            segment_id: seg.into(),
            runner_id: runner.into(),
            prediction: p,
            target: t,
        }
    }

    fn profile(id: &str, age_range: AgeRange, sex: Sex) -> RunnerProfile {
        RunnerProfile {
            runner_id: id.into(),
            age_range,
            sex,
        }
    }

    #[test]
    fn mae_examples_and_errors() {
        assert_eq!(mean_absolute_error(&[10.0, 10.0], &[6.0, 20.0]).unwrap(), 7.0);
        assert_eq!(mean_absolute_error(&[3.0], &[3.0]).unwrap(), 0.0);
        assert!(matches!(mean_absolute_error(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(mean_absolute_error(&[1.0], &[]), Err(EvalError::LengthMismatch(1, 0))));
    }

    #[test]
    fn single_pair_has_undefined_ccc() {
        let profs = [profile("a", AgeRange::From21To30, Sex::M)];
        let r = report_from_pairs(vec![pair("s1", "a", 10.0, 12.0)], &profs).unwrap();
        assert_eq!(r.global_mae, 2.0);
        assert_eq!(r.global_ccc, None);
    }

    #[test]
    fn weighted_strata() {
        let profs = [
            profile("a", AgeRange::From21To30, Sex::M),
            profile("b", AgeRange::From41To50, Sex::F),
        ];
        let pairs = vec![
            pair("1", "a", 10.0, 11.0),
            pair("2", "a", 10.0, 9.0),
            pair("3", "b", 10.0, 13.0),
            pair("4", "b", 10.0, 7.0),
        ];
        let r = report_from_pairs(pairs, &profs).unwrap();
        assert_eq!(r.strata.len(), 2);
        assert_eq!((r.strata[0].mae, r.strata[0].count), (1.0, 2));
        assert_eq!((r.strata[1].mae, r.strata[1].count), (3.0, 2));
        assert_eq!(r.global_mae, 2.0);
        assert_eq!(r.per_runner[0].runner_id, "a");
    }

    #[test]
    fn single_cell_equals_global() {
        let profs = [profile("a", AgeRange::From31To40, Sex::F), profile("b", AgeRange::From31To40, Sex::F)];
        let pairs = vec![pair("1", "a", 8.0, 11.0), pair("2", "b", 10.0, 9.5), pair("3", "b", 14.0, 13.0)];
        let r = report_from_pairs(pairs, &profs).unwrap();
        assert_eq!(r.strata.len(), 1);
        assert!((r.strata[0].mae - r.global_mae).abs() < 1e-12);
    }

    #[test]
    fn unknown_runner() {
        let r = report_from_pairs(vec![pair("1", "ghost", 1.0, 2.0)], &[]);
        assert!(matches!(r, Err(EvalError::UnknownRunner(id)) if id == "ghost"));
    }

    #[test]
    fn per_runner_ranking() {
        let pairs = vec![
            pair("1", "b", 10.0, 10.0),
            pair("2", "a", 10.0, 12.0),
            pair("3", "c", 10.0, 12.0),
            pair("4", "d", 15.0, 15.0),
        ];
        let rows = per_runner(&pairs);
        let ids: Vec<&str> = rows.iter().map(|r| r.runner_id.as_str()).collect();
        assert_eq!(ids, ["b", "d", "a", "c"]);
        assert_eq!(rows[0].mae, 0.0);
        let single = per_runner(&pairs[..1]);
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn emitted_tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let profs = [profile("a", AgeRange::From21To30, Sex::M), profile("b", AgeRange::From51To60, Sex::F)];
        let pairs = vec![
            pair("x1", "a", 10.123456789012345, 11.0),
            pair("x2", "b", 0.1 + 0.2, 9.0),
            pair("x3", "b", 17.25, 16.0),
        ];
        let r = report_from_pairs(pairs, &profs).unwrap();
        emit_report(&r, dir.path()).unwrap();
        let back = read_pairs(&dir.path().join(PAIRS_FILE)).unwrap();
        assert_eq!(back, r.pairs);
        let p: Vec<f64> = back.iter().map(|p| p.prediction).collect();
        let t: Vec<f64> = back.iter().map(|p| p.target).collect();
        assert_eq!(mean_absolute_error(&p, &t).unwrap(), r.global_mae);
        let plot = fs::read_to_string(dir.path().join(RUNNERS_PLOT_FILE)).unwrap();
        assert_eq!(plot.lines().filter(|l| !l.starts_with('#')).count(), 2);
    }

    #[test]
    fn empty_strata_file_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let r = EvalReport {
            pairs: vec![],
            global_mae: 0.0,
            global_ccc: None,
            strata: vec![],
            per_runner: vec![],
        };
        emit_report(&r, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join(STRATA_FILE)).unwrap(), "age_range,sex,mae,count\n");
        let summary = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert!(summary.contains(UNDEFINED));
    }
}
