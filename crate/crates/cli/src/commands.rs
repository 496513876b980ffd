//! The `run`, `score`, `synth` and `roc` subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use seqanomaly::data::{
    fit_and_normalize, inject_gaussian_anomalies, load_csv, load_jsonl, split_train_test, synth_generate,
    write_jsonl, NormalizationStats,
};
use seqanomaly::eval::{crossval_select, roc_curve, CrossValReport, RocCurve};
use seqanomaly::rng::derive_seed;
use seqanomaly::trainer::{train, StopReason};
use seqanomaly::{Label, Sequence, SequenceBatch, TrainedDetector};

use crate::config::{Experiment, SynthSpec};
use crate::error::{CliError, Result};
use crate::output::{write_or_stdout, Artifacts};

/// On-disk model: the trained detector plus the normalization it expects.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub detector: serde_json::Value,
    pub normalization: NormalizationStats,
}

pub struct LoadedModel {
    pub detector: TrainedDetector,
    pub normalization: NormalizationStats,
}

impl LoadedModel {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: not a model file: {e}", path.display())))?;
        let detector = TrainedDetector::from_json(&file.detector.to_string())
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if file.normalization.dim() != detector.params.p() {
            return Err(CliError::Data(format!(
                "{}: normalization covers {} features but the encoder expects {}",
                path.display(),
                file.normalization.dim(),
                detector.params.p()
            )));
        }
        Ok(Self {
            detector,
            normalization: file.normalization,
        })
    }
}

pub fn load_dataset(path: &Path) -> Result<SequenceBatch> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    Ok(if is_csv { load_csv(path)? } else { load_jsonl(path)? })
}

fn to_json(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    Ok(text.into_bytes())
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::Io(e.to_string()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn roc_bytes(curve: &RocCurve) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    curve.write_csv(&mut buf)?;
    Ok(buf)
}

// ---------------------------------------------------------------------------
// run

#[derive(Debug, Serialize)]
struct TrainingRecord<'a> {
    iterations: usize,
    converged: bool,
    stop_reason: StopReason,
    inner_converged: bool,
    trace: &'a [f64],
}

#[derive(Debug, Serialize)]
struct CrossvalEntry {
    index: usize,
    mean_auc: Option<f64>,
    fold_aucs: Option<[f64; 2]>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct CrossvalRecord {
    best_index: usize,
    entries: Vec<CrossvalEntry>,
}

impl From<&CrossValReport> for CrossvalRecord {
    fn from(r: &CrossValReport) -> Self {
        Self {
            best_index: r.best_index,
            entries: r
                .results
                .iter()
                .enumerate()
                .map(|(index, g)| CrossvalEntry {
                    index,
                    mean_auc: g.mean_auc,
                    fold_aucs: g.fold_aucs,
                    error: g.error.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    auc: f64,
    n_train: usize,
    n_test: usize,
    n_test_normal: usize,
    n_test_anomalous: usize,
    training: TrainingRecord<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    crossval: Option<CrossvalRecord>,
    config: &'a Experiment,
}

#[derive(Debug, Serialize)]
struct Timing {
    wall_seconds: f64,
}

pub struct RunReport {
    pub auc: f64,
    pub out_dir: PathBuf,
}

/// Marks unlabeled items as normal so that injected anomalies are the only
/// anomalous class.
fn label_nominal(batch: SequenceBatch) -> Result<SequenceBatch> {
    let p = batch.p();
    let items: Vec<Sequence> = batch
        .into_items()
        .into_iter()
        .map(|mut s| {
            s.label.get_or_insert(Label::Normal);
            s
        })
        .collect();
    Ok(SequenceBatch::new(p, items)?)
}

fn prepare_data(exp: &Experiment) -> Result<(SequenceBatch, SequenceBatch, NormalizationStats)> {
    let seeds = exp.seeds();
    let raw = match (exp.data_path(), &exp.data.synth) {
        (Some(path), _) => load_dataset(&path)?,
        (None, Some(spec)) => synth_generate(&spec.profile(), spec.n_normal, spec.n_anomalous, seeds.data)?,
        (None, None) => unreachable!("config parsing requires a data source"),
    };
    let (normalized, stats) = fit_and_normalize(&raw)?;
    let full = if exp.data.inject_anomalies > 0 {
        inject_gaussian_anomalies(
            &label_nominal(normalized)?,
            exp.data.inject_anomalies,
            derive_seed(seeds.data, "inject"),
        )?
    } else {
        normalized
    };
    let (train_part, test_part) = split_train_test(
        &full,
        exp.data.train_fraction,
        exp.data.anomaly_fraction,
        derive_seed(seeds.data, "split"),
    )?;
    Ok((train_part, test_part, stats))
}

pub fn run(exp: &Experiment, out_dir: &Path, mut progress: impl FnMut(&str)) -> Result<RunReport> {
    let start = Instant::now();
    progress("preparing data");
    let (train_part, test_part, stats) = prepare_data(exp)?;

    let (cfg, crossval) = match &exp.crossval_grid {
        Some(grid) => {
            progress(&format!("cross-validating {} configurations", grid.len()));
            let report = crossval_select(&train_part, grid, exp.seeds().fold)?;
            (report.best.clone(), Some(CrossvalRecord::from(&report)))
        }
        None => (exp.train.clone(), None),
    };

    progress(&format!("training on {} sequences", train_part.len()));
    let detector = train(&train_part, &cfg)?;
    let scores = detector.margins(&test_part)?;
    let labels: Vec<Label> = test_part
        .items()
        .iter()
        .map(|s| s.label.expect("split items are labeled"))
        .collect();
    let curve = roc_curve(&scores, &labels)?;
    let auc = curve.summary().auc;

    let model = ModelFile {
        detector: serde_json::to_value(&detector).map_err(|e| CliError::Io(e.to_string()))?,
        normalization: stats,
    };
    let score_rows = test_part.items().iter().zip(&scores).map(|(s, score)| {
        vec![
            s.id.clone(),
            score.to_string(),
            Label::from_margin(*score).to_string(),
            s.label.map(|l| l.to_string()).unwrap_or_default(),
        ]
    });
    let summary = Summary {
        auc,
        n_train: train_part.len(),
        n_test: test_part.len(),
        n_test_normal: curve.n_pos,
        n_test_anomalous: curve.n_neg,
        training: TrainingRecord {
            iterations: detector.iterations,
            converged: detector.converged,
            stop_reason: detector.stop_reason,
            inner_converged: detector.inner_converged,
            trace: &detector.trace,
        },
        crossval,
        config: exp,
    };

    let mut artifacts = Artifacts::new();
    artifacts.add(out_dir.join("model.json"), to_json(&model)?);
    artifacts.add(out_dir.join("roc.csv"), roc_bytes(&curve)?);
    artifacts.add(
        out_dir.join("scores.csv"),
        csv_bytes(&["id", "score", "label_pred", "label"], score_rows)?,
    );
    artifacts.add(out_dir.join("summary.json"), to_json(&summary)?);
    artifacts.add(
        out_dir.join("timing.json"),
        to_json(&Timing {
            wall_seconds: start.elapsed().as_secs_f64(),
        })?,
    );
    artifacts.commit()?;
    Ok(RunReport {
        auc,
        out_dir: out_dir.to_path_buf(),
    })
}

// ---------------------------------------------------------------------------
// score

pub fn score(model_path: &Path, data_path: &Path, out: Option<&Path>) -> Result<usize> {
    let model = LoadedModel::read(model_path)?;
    let data = load_dataset(data_path)?;
    let rows: Vec<Vec<String>> = if data.is_empty() {
        Vec::new()
    } else {
        let expected = model.detector.params.p();
        if data.p() != expected {
            return Err(CliError::Data(format!(
                "{}: sequences have {} features, the model expects {expected}",
                data_path.display(),
                data.p()
            )));
        }
        let normalized = model.normalization.apply(&data)?;
        let margins = model.detector.margins(&normalized)?;
        normalized
            .items()
            .iter()
            .zip(margins)
            .map(|(s, m)| vec![s.id.clone(), m.to_string(), Label::from_margin(m).to_string()])
            .collect()
    };
    let n = rows.len();
    write_or_stdout(out, &csv_bytes(&["id", "score", "label_pred"], rows.into_iter())?)?;
    Ok(n)
}

// ---------------------------------------------------------------------------
// synth

pub fn synth(spec_path: &Path, seed: u64, out: Option<&Path>) -> Result<usize> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| CliError::io(spec_path, e))?;
    let spec: SynthSpec =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", spec_path.display())))?;
    let batch = synth_generate(
        &spec.profile(),
        spec.n_normal,
        spec.n_anomalous,
        derive_seed(seed, "data"),
    )
    .map_err(|e| CliError::Config(format!("{}: {e}", spec_path.display())))?;
    let mut buf = Vec::new();
    write_jsonl(&batch, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    write_or_stdout(out, &buf)?;
    Ok(batch.len())
}

// ---------------------------------------------------------------------------
// roc

/// Reads `score` and `label` columns from a scores CSV.
pub fn read_scores(path: &Path) -> Result<(Vec<f64>, Vec<Label>)> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing `{name}` column", path.display())))
    };
    let (score_col, label_col) = (column("score")?, column("label")?);
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let field = |c: usize| record.get(c).unwrap_or("").trim().to_string();
        let score: f64 = field(score_col)
            .parse()
            .map_err(|e| CliError::Data(format!("{}:{line}: bad score: {e}", path.display())))?;
        let label = field(label_col)
            .parse::<i64>()
            .map_err(|e| e.to_string())
            .and_then(Label::try_from)
            .map_err(|e| CliError::Data(format!("{}:{line}: bad label: {e}", path.display())))?;
        scores.push(score);
        labels.push(label);
    }
    Ok((scores, labels))
}

pub fn roc(scores_path: &Path, out: Option<&Path>) -> Result<f64> {
    let (scores, labels) = read_scores(scores_path)?;
    let curve = roc_curve(&scores, &labels)?;
    write_or_stdout(out, &roc_bytes(&curve)?)?;
    Ok(curve.summary().auc)
}
