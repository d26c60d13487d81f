//! Evaluation protocols, the harmonic mean, multi-seed summaries and
//! ablation sweeps.
//!
//! Every accuracy here is top-1 over cosine similarity between prompted image
//! and class-text embeddings, with the style shift off.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{make_split, Dataset, FewShotSplit, SplitSpec};
use crate::encoders::{Backbone, DualEncoder};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::tensor::Tensor;
use crate::train::{prompt_tune, Augmentation, RunRecord, TuneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    BaseToNovel,
    DomainGeneralization,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::BaseToNovel => "base_to_novel",
            Protocol::DomainGeneralization => "domain_generalization",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base_to_novel" => Ok(Protocol::BaseToNovel),
            "domain_generalization" => Ok(Protocol::DomainGeneralization),
            other => Err(Error::Configuration(format!(
                "unknown protocol {other:?} (expected base_to_novel or domain_generalization)"
            ))),
        }
    }
}

fn row_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index into `class_ids` of the best-matching class for every image.
/// Ties resolve to the lowest index.
pub fn predict(
    model: &DualEncoder,
    images: &[&Tensor],
    class_ids: &[usize],
    prompted: bool,
) -> Result<Vec<usize>> {
    if class_ids.is_empty() {
        return Err(Error::Contract("cannot classify against an empty class set".into()));
    }
    let img = model.embed_images(images, prompted)?;
    let txt = model.embed_classes(class_ids, prompted)?;
    let d = model.config().embed_dim;
    Ok(img
        .data()
        .chunks(d)
        .map(|row| {
            let mut best = (0, f64::NEG_INFINITY);
            for (c, t) in txt.data().chunks(d).enumerate() {
                let s = row_dot(row, t);
                if s > best.1 {
                    best = (c, s);
                }
            }
            best.0
        })
        .collect())
}

/// Percentage of positions where `predicted` equals `truth`.
pub fn accuracy_from_predictions(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::Contract("accuracy of an empty sample set".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / predicted.len() as f64)
}

/// Top-1 accuracy (percent) of the prompted model on `indices` over `class_ids`.
pub fn accuracy(model: &DualEncoder, dataset: &Dataset, indices: &[usize], class_ids: &[usize]) -> Result<f64> {
    accuracy_with(model, dataset, indices, class_ids, true)
}

/// As [`accuracy`], choosing the prompted or frozen view.
pub fn accuracy_with(
    model: &DualEncoder,
    dataset: &Dataset,
    indices: &[usize],
    class_ids: &[usize],
    prompted: bool,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Contract("accuracy of an empty sample set".into()));
    }
    let mut images = Vec::with_capacity(indices.len());
    let mut truth = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = dataset
            .samples
            .get(i)
            .ok_or_else(|| Error::Contract(format!("sample index {i} outside dataset")))?;
        let label = class_ids.iter().position(|&c| c == s.class_id).ok_or_else(|| {
            Error::Contract(format!("sample {i} has class {} outside the class set", s.class_id))
        })?;
        images.push(&s.image);
        truth.push(label);
    }
    let predicted = predict(model, &images, class_ids, prompted)?;
    accuracy_from_predictions(&predicted, &truth)
}

/// 2BN / (B + N) for positive accuracies.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    if !(base > 0.0 && novel > 0.0) {
        return Err(Error::Contract(format!(
            "harmonic mean needs positive inputs, got {base} and {novel}"
        )));
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Mean squared difference between prompted and frozen embeddings, for
/// images and class texts separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDrift {
    pub image: f64,
    pub text: f64,
}

impl EmbeddingDrift {
    pub fn mean(&self) -> f64 {
        0.5 * (self.image + self.text)
    }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

pub fn embedding_drift(
    model: &DualEncoder,
    dataset: &Dataset,
    indices: &[usize],
    class_ids: &[usize],
) -> Result<EmbeddingDrift> {
    if indices.is_empty() || class_ids.is_empty() {
        return Err(Error::Contract("embedding drift needs samples and classes".into()));
    }
    let images: Vec<&Tensor> = indices.iter().map(|&i| &dataset.samples[i].image).collect();
    Ok(EmbeddingDrift {
        image: mse(&model.embed_images(&images, true)?, &model.embed_images(&images, false)?),
        text: mse(&model.embed_classes(class_ids, true)?, &model.embed_classes(class_ids, false)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    /// Named accuracies in percent ("base", "novel", "target", ...).
    pub accuracies: BTreeMap<String, f64>,
    pub harmonic_mean: Option<f64>,
    /// Accuracy per target domain, keyed "domain_<id>".
    pub per_domain: BTreeMap<String, f64>,
    pub provenance: Value,
}

impl EvalReport {
    /// Flat metric map: accuracies, "hm" and per-domain entries.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = self.accuracies.clone();
        if let Some(h) = self.harmonic_mean {
            m.insert("hm".into(), h);
        }
        for (k, v) in &self.per_domain {
            m.insert(format!("target_{k}"), *v);
        }
        m
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.metrics() {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        for (k, v) in self.metrics() {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::InvariantViolation(format!("{k} = {v} outside [0, 100]")));
            }
        }
        Ok(())
    }
}

/// Base accuracy on held-out base-class samples, novel accuracy on
/// novel-class samples (both from the source domains), and their harmonic mean.
pub fn base_to_novel_eval(
    model: &DualEncoder,
    dataset: &Dataset,
    split: &FewShotSplit,
    provenance: Value,
) -> Result<EvalReport> {
    split.check_no_leakage(dataset)?;
    let base = accuracy(model, dataset, &split.test_base, &split.base_classes)?;
    let novel = accuracy(model, dataset, &split.test_novel, &split.novel_classes)?;
    let report = EvalReport {
        protocol: Protocol::BaseToNovel,
        accuracies: BTreeMap::from([("base".into(), base), ("novel".into(), novel)]),
        harmonic_mean: Some(harmonic_mean(base, novel)?),
        per_domain: BTreeMap::new(),
        provenance,
    };
    report.validate()?;
    Ok(report)
}

/// Accuracy on each held-out target domain over the trained classes, their
/// average, and source accuracy for reference.
pub fn domain_gen_eval(
    model: &DualEncoder,
    dataset: &Dataset,
    split: &FewShotSplit,
    provenance: Value,
) -> Result<EvalReport> {
    split.check_no_leakage(dataset)?;
    if split.test_target.is_empty() {
        return Err(Error::Contract("split has no target domains".into()));
    }
    let mut per_domain = BTreeMap::new();
    for (d, idx) in &split.test_target {
        per_domain.insert(
            format!("domain_{d}"),
            accuracy(model, dataset, idx, &split.base_classes)?,
        );
    }
    let target = per_domain.values().sum::<f64>() / per_domain.len() as f64;
    let mut accuracies = BTreeMap::from([("target".into(), target)]);
    if !split.test_base.is_empty() {
        accuracies.insert(
            "source".into(),
            accuracy(model, dataset, &split.test_base, &split.base_classes)?,
        );
    }
    let report = EvalReport {
        protocol: Protocol::DomainGeneralization,
        accuracies,
        harmonic_mean: None,
        per_domain,
        provenance,
    };
    report.validate()?;
    Ok(report)
}

pub fn evaluate(
    protocol: Protocol,
    model: &DualEncoder,
    dataset: &Dataset,
    split: &FewShotSplit,
    provenance: Value,
) -> Result<EvalReport> {
    match protocol {
        Protocol::BaseToNovel => base_to_novel_eval(model, dataset, split, provenance),
        Protocol::DomainGeneralization => domain_gen_eval(model, dataset, split, provenance),
    }
}

/// Base, novel, harmonic mean, target accuracies and embedding drift of one
/// tuned model on a split that has both novel classes and target domains.
pub fn split_metrics(model: &DualEncoder, dataset: &Dataset, split: &FewShotSplit) -> Result<BTreeMap<String, f64>> {
    let mut m = base_to_novel_eval(model, dataset, split, Value::Null)?.metrics();
    if !split.test_target.is_empty() {
        m.extend(domain_gen_eval(model, dataset, split, Value::Null)?.metrics());
        m.remove("source");
    }
    let drift = embedding_drift(model, dataset, &split.test_base, &split.base_classes)?;
    m.insert("drift_image".into(), drift.image);
    m.insert("drift_text".into(), drift.text);
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Contract("mean of no values".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(MeanStd { mean, std, n })
}

/// Reports of one protocol over several seeds, with per-metric mean and std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MeanStd>,
    pub runs: Vec<EvalReport>,
    pub provenance: Value,
}

impl SeedSummary {
    pub fn new(protocol: Protocol, seeds: Vec<u64>, runs: Vec<EvalReport>, provenance: Value) -> Result<Self> {
        if runs.is_empty() || runs.len() != seeds.len() {
            return Err(Error::Contract(format!(
                "{} reports for {} seeds",
                runs.len(),
                seeds.len()
            )));
        }
        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &runs {
            for (k, v) in r.metrics() {
                columns.entry(k).or_default().push(v);
            }
        }
        let metrics = columns
            .into_iter()
            .map(|(k, v)| Ok((k, mean_std(&v)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            protocol,
            seeds,
            metrics,
            runs,
            provenance,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,std,n\n");
        for (k, s) in &self.metrics {
            out.push_str(&format!("{k},{},{},{}\n", s.mean, s.std, s.n));
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        let jp = dir.join(format!("{stem}.json"));
        fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
        let cp = dir.join(format!("{stem}.csv"));
        fs::write(&cp, self.to_csv()).map_err(|e| Error::io(&cp, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    LossTerms,
    StyleLayer,
    NBases,
    Augmentation,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss-terms" => Ok(Self::LossTerms),
            "style-layer" => Ok(Self::StyleLayer),
            "n-bases" => Ok(Self::NBases),
            "augmentation" => Ok(Self::Augmentation),
            other => Err(Error::Configuration(format!(
                "unknown ablation axis {other:?} (expected loss-terms, style-layer, n-bases or augmentation)"
            ))),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LossTerms => "loss-terms",
            Self::StyleLayer => "style-layer",
            Self::NBases => "n-bases",
            Self::Augmentation => "augmentation",
        })
    }
}

pub const N_BASES_GRID: [usize; 6] = [1, 4, 8, 12, 16, 24];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub config: TuneConfig,
}

/// Default grid for `axis`, built around `full` (the complete method).
/// `layers` is the vision depth, bounding the style-layer axis.
pub fn ablation_grid(axis: AblationAxis, full: &TuneConfig, layers: usize) -> Vec<AblationCell> {
    let cell = |label: String, config: TuneConfig| AblationCell { label, config };
    match axis {
        AblationAxis::LossTerms => {
            // Terms are switched on cumulatively, starting from the plain baseline.
            let w = full.weights;
            let off = LossWeights {
                lambda_f: 0.0,
                lambda_g: 0.0,
                lambda1: 0.0,
                lambda2: 0.0,
                lambda_cm: 0.0,
                ..w
            };
            let feat = LossWeights { lambda_f: w.lambda_f, lambda_g: w.lambda_g, ..off };
            let cm = LossWeights { lambda_cm: w.lambda_cm, ..feat };
            let content = LossWeights { lambda2: w.lambda2, ..cm };
            let no_style = |weights| TuneConfig {
                weights,
                augmentation: Augmentation::None,
                ..full.clone()
            };
            let styled = |weights| TuneConfig {
                weights,
                augmentation: Augmentation::StyleShift,
                ..full.clone()
            };
            vec![
                cell("baseline".into(), no_style(off)),
                cell("feat".into(), no_style(feat)),
                cell("feat+cm".into(), no_style(cm)),
                cell("feat+cm+shift+content".into(), styled(content)),
                cell("full".into(), styled(w)),
            ]
        }
        AblationAxis::StyleLayer => (1..layers)
            .map(|l| {
                cell(
                    format!("layer{l}"),
                    TuneConfig {
                        style_layer: l,
                        augmentation: Augmentation::StyleShift,
                        ..full.clone()
                    },
                )
            })
            .collect(),
        AblationAxis::NBases => N_BASES_GRID
            .iter()
            .map(|&n| cell(format!("n{n}"), TuneConfig { n_bases: n, ..full.clone() }))
            .collect(),
        AblationAxis::Augmentation => [
            ("none", Augmentation::None),
            ("crop", Augmentation::Crop),
            ("style_shift", Augmentation::StyleShift),
        ]
        .into_iter()
        .map(|(l, a)| cell(l.into(), TuneConfig { augmentation: a, ..full.clone() }))
        .collect(),
    }
}

/// Tunes with `config` on `split` and measures the result.
pub fn tune_and_measure(
    config: &TuneConfig,
    backbone: &Backbone,
    dataset: &Dataset,
    split: &FewShotSplit,
) -> Result<(DualEncoder, RunRecord, BTreeMap<String, f64>)> {
    let (state, record) = prompt_tune(config, backbone, dataset, split)?;
    let metrics = split_metrics(&state.model, dataset, split)?;
    Ok((state.model, record, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    pub provenance: Value,
}

impl AblationTable {
    /// Tidy CSV: one line per (cell, seed), one column per metric.
    pub fn to_csv(&self) -> String {
        let names: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.metrics.keys()).collect();
        let mut out = String::from("cell,seed");
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{}", r.cell, r.seed));
            for n in &names {
                out.push(',');
                if let Some(v) = r.metrics.get(*n) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    /// Mean and std per (cell, metric), cells in sweep order.
    pub fn summary(&self) -> Result<Vec<(String, BTreeMap<String, MeanStd>)>> {
        let mut order: Vec<String> = Vec::new();
        let mut cols: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            if !order.contains(&r.cell) {
                order.push(r.cell.clone());
            }
            for (k, v) in &r.metrics {
                cols.entry((r.cell.clone(), k.clone())).or_default().push(*v);
            }
        }
        order
            .into_iter()
            .map(|c| {
                let m = cols
                    .iter()
                    .filter(|((cell, _), _)| *cell == c)
                    .map(|((_, k), v)| Ok((k.clone(), mean_std(v)?)))
                    .collect::<Result<_>>()?;
                Ok((c, m))
            })
            .collect()
    }
}

/// Shared inputs of a sweep: the frozen backbone, the dataset and the split
/// recipe (its seed is replaced by each run's seed).
pub struct SweepContext<'a> {
    pub backbone: &'a Backbone,
    pub dataset: &'a Dataset,
    pub split: SplitSpec,
}

#[derive(Serialize, Deserialize)]
struct CellFile {
    cell: AblationCell,
    seeds: Vec<u64>,
    rows: Vec<AblationRow>,
}

/// Runs every cell for every seed. When `out_dir` is given, each finished
/// cell is written to `out_dir/cells/<label>.json` as soon as it completes,
/// and cells already present there with the same config and seeds are reused.
pub fn ablation_sweep(
    axis: AblationAxis,
    cells: &[AblationCell],
    seeds: &[u64],
    ctx: &SweepContext<'_>,
    out_dir: Option<&Path>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Contract("ablation grid and seed list must be nonempty".into()));
    }
    let cell_dir = out_dir.map(|d| d.join("cells"));
    if let Some(d) = &cell_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rows = Vec::new();
    for cell in cells {
        let path = cell_dir.as_ref().map(|d| d.join(format!("{}.json", cell.label)));
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            if let Ok(done) = serde_json::from_str::<CellFile>(&text) {
                if done.cell == *cell && done.seeds == seeds {
                    done.rows.iter().for_each(&mut on_row);
                    rows.extend(done.rows);
                    continue;
                }
            }
        }
        let mut cell_rows = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let split = make_split(ctx.dataset, &SplitSpec { seed, ..ctx.split.clone() })?;
            let config = TuneConfig { seed, ..cell.config.clone() };
            let (_, _, metrics) = tune_and_measure(&config, ctx.backbone, ctx.dataset, &split)?;
            let row = AblationRow {
                cell: cell.label.clone(),
                seed,
                metrics,
            };
            on_row(&row);
            cell_rows.push(row);
        }
        if let Some(p) = &path {
            let file = CellFile {
                cell: cell.clone(),
                seeds: seeds.to_vec(),
                rows: cell_rows.clone(),
            };
            let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))?;
            fs::write(p, json).map_err(|e| Error::io(p, e))?;
        }
        rows.extend(cell_rows);
    }
    Ok(AblationTable {
        axis,
        rows,
        provenance: Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_examples() {
        assert_eq!(harmonic_mean(63.0, 63.0).unwrap(), 63.0);
        assert!((harmonic_mean(77.58, 71.68).unwrap() - 74.51).abs() <= 0.01);
        assert!((harmonic_mean(94.52, 82.74).unwrap() - 88.24).abs() <= 0.01);
        assert!(matches!(harmonic_mean(0.0, 50.0), Err(Error::Contract(_))));
        assert!(matches!(harmonic_mean(50.0, -1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy_from_predictions(&[2], &[2]).unwrap(), 100.0);
        assert_eq!(accuracy_from_predictions(&[0, 1, 2, 3], &[1, 1, 0, 3]).unwrap(), 50.0);
        assert!(matches!(accuracy_from_predictions(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn mean_std_uses_sample_deviation() {
        let s = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        // sum of squared deviations 5, over n-1 = 3
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]).unwrap().std, 0.0);
    }

    #[test]
    fn grids_cover_their_axes() {
        let full = TuneConfig::default();
        let layers: Vec<usize> = ablation_grid(AblationAxis::StyleLayer, &full, 4)
            .iter()
            .map(|c| c.config.style_layer)
            .collect();
        assert_eq!(layers, vec![1, 2, 3]);
        let n: Vec<usize> = ablation_grid(AblationAxis::NBases, &full, 4)
            .iter()
            .map(|c| c.config.n_bases)
            .collect();
        assert_eq!(n, N_BASES_GRID);
        let terms = ablation_grid(AblationAxis::LossTerms, &full, 4);
        let base = TuneConfig::baseline();
        assert_eq!(terms[0].config.weights, base.weights);
        assert_eq!(terms[0].config.augmentation, base.augmentation);
        assert_eq!(terms.last().unwrap().config, full);
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in [Protocol::BaseToNovel, Protocol::DomainGeneralization] {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
        assert!("cross_dataset".parse::<Protocol>().is_err());
    }
}
