//! Procedural multi-domain image data and few-shot splits.
//!
//! A class is a shape program; a domain is a style (per-channel color
//! statistics, grating texture band, noise). Every image is the class mask
//! rendered with the domain's texture and noise, standardized per channel and
//! re-colored to the domain's mean and standard deviation. Shape programs are
//! shared across domains, so content is domain-invariant by construction.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::{rng_for, stream};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    /// Grating frequency range in cycles per image side.
    pub texture_band: (f64, f64),
    /// Grating amplitude relative to the shape signal.
    pub texture_strength: f64,
    pub noise: f64,
    pub seed: u64,
}

impl DomainSpec {
    fn validate(&self, channels: usize) -> Result<()> {
        if self.channel_mean.len() != channels || self.channel_std.len() != channels {
            return Err(Error::Contract(format!(
                "domain {} describes {} / {} channels, images have {channels}",
                self.id,
                self.channel_mean.len(),
                self.channel_std.len()
            )));
        }
        if self.channel_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Contract(format!(
                "domain {} has a nonpositive channel std",
                self.id
            )));
        }
        let (lo, hi) = self.texture_band;
        if !(lo > 0.0 && hi >= lo) || self.noise < 0.0 || self.texture_strength < 0.0 {
            return Err(Error::Contract(format!(
                "domain {} has an invalid texture band or noise level",
                self.id
            )));
        }
        Ok(())
    }
}

/// The fixed family of parametric masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    HBars,
    VBars,
    Disk,
    Cross,
    Ring,
    Checker,
    Wedge,
    Triangle,
    Diagonal,
    Frame,
    Dots,
    Square,
    XShape,
    HalfPlane,
    Target,
    Corner,
}

impl Shape {
    pub const ALL: [Shape; 16] = [
        Shape::HBars,
        Shape::VBars,
        Shape::Disk,
        Shape::Cross,
        Shape::Ring,
        Shape::Checker,
        Shape::Wedge,
        Shape::Triangle,
        Shape::Diagonal,
        Shape::Frame,
        Shape::Dots,
        Shape::Square,
        Shape::XShape,
        Shape::HalfPlane,
        Shape::Target,
        Shape::Corner,
    ];

    /// Whether the point `(u, v)` (shape-local, roughly [-1, 1]²) lies inside.
    fn contains(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        match self {
            Shape::HBars => (1.5 * PI * v).sin() > 0.0,
            Shape::VBars => (1.5 * PI * u).sin() > 0.0,
            Shape::Disk => r < 0.6,
            Shape::Cross => (u.abs() < 0.2 || v.abs() < 0.2) && u.abs().max(v.abs()) < 0.8,
            Shape::Ring => (0.35..0.7).contains(&r),
            Shape::Checker => (PI * u).sin() * (PI * v).sin() > 0.0,
            Shape::Wedge => v.atan2(u).abs() < PI / 4.0 && r < 0.9,
            Shape::Triangle => v > -0.5 && u.abs() < 0.6 * (0.7 - v) && v < 0.7,
            Shape::Diagonal => (1.5 * PI * (u + v) / 2f64.sqrt()).sin() > 0.0,
            Shape::Frame => {
                let m = u.abs().max(v.abs());
                (0.45..0.75).contains(&m)
            }
            Shape::Dots => {
                let du = u.abs() - 0.45;
                let dv = v.abs() - 0.45;
                du * du + dv * dv < 0.25 * 0.25
            }
            Shape::Square => u.abs().max(v.abs()) < 0.5,
            Shape::XShape => ((u - v).abs() < 0.25 || (u + v).abs() < 0.25) && r < 0.95,
            Shape::HalfPlane => u > 0.0,
            Shape::Target => (2.0 * PI * r).cos() > 0.0,
            Shape::Corner => u > -0.1 && v > -0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub shape: Shape,
    /// Relative scale jitter: scale ~ U(1 − s, 1 + s).
    pub scale_jitter: f64,
    /// Center jitter as a fraction of the half-width.
    pub position_jitter: f64,
}

/// `count` classes with distinct shapes, in the order of [`Shape::ALL`].
pub fn default_classes(count: usize) -> Result<Vec<ClassSpec>> {
    if count > Shape::ALL.len() {
        return Err(Error::Contract(format!(
            "at most {} distinct shape programs, asked for {count}",
            Shape::ALL.len()
        )));
    }
    Ok(Shape::ALL[..count]
        .iter()
        .enumerate()
        .map(|(id, &shape)| ClassSpec {
            id,
            shape,
            scale_jitter: 0.15,
            position_jitter: 0.15,
        })
        .collect())
}

/// Four domains with well-separated color statistics and texture bands.
pub fn default_domains() -> Vec<DomainSpec> {
    let d = |id: usize, mean: [f64; 3], std: [f64; 3], band: (f64, f64), tex: f64, noise: f64| DomainSpec {
        id,
        channel_mean: mean.to_vec(),
        channel_std: std.to_vec(),
        texture_band: band,
        texture_strength: tex,
        noise,
        seed: 1000 + id as u64,
    };
    vec![
        d(0, [0.55, 0.45, 0.40], [0.20, 0.18, 0.16], (1.0, 2.0), 0.4, 0.15),
        d(1, [0.40, 0.55, 0.50], [0.15, 0.22, 0.18], (2.0, 3.5), 0.5, 0.20),
        d(2, [0.30, 0.35, 0.65], [0.28, 0.12, 0.24], (3.5, 5.0), 1.1, 0.45),
        d(3, [0.70, 0.62, 0.25], [0.10, 0.26, 0.20], (5.0, 7.0), 1.3, 0.50),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[channels, size, size]`
    pub image: Tensor,
    pub class_id: usize,
    pub domain_id: usize,
    /// Position within its (domain, class) cell.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub samples_per_cell: usize,
    pub domains: Vec<DomainSpec>,
    pub classes: Vec<ClassSpec>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 || self.classes.len() < 4 {
            return Err(Error::Contract(format!(
                "need at least 2 domains and 4 classes, got {} and {}",
                self.domains.len(),
                self.classes.len()
            )));
        }
        if self.samples_per_cell == 0 || self.image_size < 2 || self.channels == 0 {
            return Err(Error::Contract(
                "samples per cell, image size and channels must be positive".into(),
            ));
        }
        for d in &self.domains {
            d.validate(self.channels)?;
        }
        let shapes: BTreeSet<Shape> = self.classes.iter().map(|c| c.shape).collect();
        if shapes.len() != self.classes.len() {
            return Err(Error::Contract("shape programs must be pairwise distinct".into()));
        }
        let ids: BTreeSet<usize> = self.domains.iter().map(|d| d.id).collect();
        if ids.len() != self.domains.len() {
            return Err(Error::Contract("duplicate domain id".into()));
        }
        let ids: BTreeSet<usize> = self.classes.iter().map(|c| c.id).collect();
        if ids.len() != self.classes.len() {
            return Err(Error::Contract("duplicate class id".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Ordered by domain, then class, then index.
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn class_ids(&self) -> Vec<usize> {
        self.spec.classes.iter().map(|c| c.id).collect()
    }

    pub fn domain_ids(&self) -> Vec<usize> {
        self.spec.domains.iter().map(|d| d.id).collect()
    }

    /// Sample indices of one (domain, class) cell.
    pub fn cell(&self, domain: usize, class: usize) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].domain_id == domain && self.samples[i].class_id == class)
            .collect()
    }
}

/// Renders one image.
pub fn render_sample<R: Rng>(
    domain: &DomainSpec,
    class: &ClassSpec,
    size: usize,
    channels: usize,
    rng: &mut R,
) -> Tensor {
    let scale = 1.0 + class.scale_jitter * rng.gen_range(-1.0..=1.0);
    let cx = class.position_jitter * rng.gen_range(-1.0..=1.0);
    let cy = class.position_jitter * rng.gen_range(-1.0..=1.0);
    let freq = rng.gen_range(domain.texture_band.0..=domain.texture_band.1);
    let theta = rng.gen_range(0.0..PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let phases: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    let n = size * size;
    let mut mask = Vec::with_capacity(n);
    let mut along = Vec::with_capacity(n);
    for y in 0..size {
        for x in 0..size {
            let px = 2.0 * (x as f64 + 0.5) / size as f64 - 1.0;
            let py = 2.0 * (y as f64 + 0.5) / size as f64 - 1.0;
            let inside = class.shape.contains((px - cx) / scale, (py - cy) / scale);
            mask.push(if inside { 1.0 } else { -1.0 });
            // Position along the grating normal in units of image sides.
            along.push(((px + 1.0) * ct + (py + 1.0) * st) / 2.0);
        }
    }

    let mut data = Vec::with_capacity(channels * n);
    for c in 0..channels {
        let z: Vec<f64> = (0..n)
            .map(|i| {
                let tex = (2.0 * PI * freq * along[i] + phases[c]).sin();
                let eps: f64 = rng.sample(StandardNormal);
                mask[i] + domain.texture_strength * tex + domain.noise * eps
            })
            .collect();
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        let (m, s) = (domain.channel_mean[c], domain.channel_std[c]);
        data.extend(z.iter().map(|v| m + s * (v - mean) * inv));
    }
    Tensor::from_parts(vec![channels, size, size], data)
}

/// Deterministic in `spec.seed`: each sample draws from a stream keyed by
/// (seed, domain seed, class id, index).
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.domains.len() * spec.classes.len() * spec.samples_per_cell);
    for d in &spec.domains {
        for c in &spec.classes {
            for index in 0..spec.samples_per_cell {
                let mut rng = rng_for(&[spec.seed, stream::SAMPLES, d.seed, c.id as u64, index as u64]);
                samples.push(Sample {
                    image: render_sample(d, c, spec.image_size, spec.channels, &mut rng),
                    class_id: c.id,
                    domain_id: d.id,
                    index,
                });
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

/// Train and test sample indices for few-shot tuning and evaluation.
///
/// Training uses only base classes in source domains. Test sets: held-out
/// base-class samples in source domains, novel-class samples in source
/// domains, and base- and novel-class samples per target domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub source_domains: Vec<usize>,
    pub target_domains: Vec<usize>,
    pub shots: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub test_base: Vec<usize>,
    pub test_novel: Vec<usize>,
    /// Base-class samples of each target domain.
    pub test_target: BTreeMap<usize, Vec<usize>>,
    /// Novel-class samples of each target domain.
    pub test_target_novel: BTreeMap<usize, Vec<usize>>,
}

impl FewShotSplit {
    /// Fails if any training sample belongs to a novel class or a target domain.
    pub fn check_no_leakage(&self, dataset: &Dataset) -> Result<()> {
        for &i in &self.train {
            let s = dataset.samples.get(i).ok_or_else(|| {
                Error::Contract(format!("train index {i} outside dataset"))
            })?;
            if self.novel_classes.contains(&s.class_id) || !self.base_classes.contains(&s.class_id) {
                return Err(Error::Contract(format!(
                    "class leakage: train sample {i} has non-base class {}",
                    s.class_id
                )));
            }
            if !self.source_domains.contains(&s.domain_id) {
                return Err(Error::Contract(format!(
                    "domain leakage: train sample {i} comes from domain {}",
                    s.domain_id
                )));
            }
        }
        Ok(())
    }
}

/// Splitting parameters shared by both protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fraction_base: f64,
    pub shots: usize,
    pub seed: u64,
    pub source_domains: Vec<usize>,
    pub target_domains: Vec<usize>,
}

/// General split: the first `fraction_base` of the sorted class ids are base
/// classes; `shots` training samples per base class are drawn (seeded) from
/// the pooled source-domain cells.
pub fn make_split(dataset: &Dataset, spec: &SplitSpec) -> Result<FewShotSplit> {
    let src: BTreeSet<usize> = spec.source_domains.iter().copied().collect();
    let tgt: BTreeSet<usize> = spec.target_domains.iter().copied().collect();
    if src.is_empty() {
        return Err(Error::Contract("no source domains".into()));
    }
    if let Some(d) = src.intersection(&tgt).next() {
        return Err(Error::Contract(format!(
            "domain {d} is both source and target"
        )));
    }
    let known: BTreeSet<usize> = dataset.domain_ids().into_iter().collect();
    if let Some(d) = src.union(&tgt).find(|d| !known.contains(d)) {
        return Err(Error::Contract(format!("unknown domain {d}")));
    }
    if !(spec.fraction_base > 0.0 && spec.fraction_base <= 1.0) || spec.shots == 0 {
        return Err(Error::Contract(format!(
            "fraction_base must lie in (0, 1] and shots be positive, got {} and {}",
            spec.fraction_base, spec.shots
        )));
    }
    let mut classes = dataset.class_ids();
    classes.sort_unstable();
    let n_base = ((classes.len() as f64 * spec.fraction_base).round() as usize).clamp(1, classes.len());
    let base = classes[..n_base].to_vec();
    let novel = classes[n_base..].to_vec();

    let mut rng = rng_for(&[spec.seed, stream::SPLIT]);
    let mut train = Vec::new();
    let mut test_base = Vec::new();
    for &c in &base {
        let mut pool: Vec<usize> = src.iter().flat_map(|&d| dataset.cell(d, c)).collect();
        if pool.len() <= spec.shots {
            return Err(Error::Contract(format!(
                "class {c} has {} source samples, need more than {} shots",
                pool.len(),
                spec.shots
            )));
        }
        pool.shuffle(&mut rng);
        let (tr, te) = pool.split_at(spec.shots);
        train.extend_from_slice(tr);
        test_base.extend_from_slice(te);
    }
    train.sort_unstable();
    test_base.sort_unstable();
    let test_novel: Vec<usize> = novel
        .iter()
        .flat_map(|&c| src.iter().flat_map(move |&d| dataset.cell(d, c)))
        .collect();
    let per_target = |classes: &[usize]| -> BTreeMap<usize, Vec<usize>> {
        tgt.iter()
            .map(|&d| (d, classes.iter().flat_map(|&c| dataset.cell(d, c)).collect()))
            .collect()
    };
    let split = FewShotSplit {
        test_target: per_target(&base),
        test_target_novel: per_target(&novel),
        base_classes: base,
        novel_classes: novel,
        source_domains: src.into_iter().collect(),
        target_domains: tgt.into_iter().collect(),
        shots: spec.shots,
        seed: spec.seed,
        train,
        test_base,
        test_novel,
    };
    split.check_no_leakage(dataset)?;
    Ok(split)
}

/// Base-to-novel protocol over all domains.
pub fn make_base_to_novel_split(
    dataset: &Dataset,
    fraction_base: f64,
    shots: usize,
    seed: u64,
) -> Result<FewShotSplit> {
    make_split(
        dataset,
        &SplitSpec {
            fraction_base,
            shots,
            seed,
            source_domains: dataset.domain_ids(),
            target_domains: vec![],
        },
    )
}

/// Domain protocol: all classes, training on every source-domain sample.
pub fn make_domain_split(
    dataset: &Dataset,
    source_domains: &[usize],
    target_domains: &[usize],
) -> Result<FewShotSplit> {
    let min_cell = source_domains.len() * dataset.spec.samples_per_cell;
    let shots = min_cell.saturating_sub(1).max(1);
    let mut split = make_split(
        dataset,
        &SplitSpec {
            fraction_base: 1.0,
            shots,
            seed: 0,
            source_domains: source_domains.to_vec(),
            target_domains: target_domains.to_vec(),
        },
    )?;
    // Use every source sample for training.
    split.train.extend(split.test_base.drain(..));
    split.train.sort_unstable();
    split.shots = min_cell;
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub files: Vec<ManifestEntry>,
    /// Free-form record of how the dataset was produced (effective config, seed).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

fn sample_path(s: &Sample) -> String {
    format!(
        "domain_{}/class_{}/sample_{}.bin",
        s.domain_id, s.class_id, s.index
    )
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    save_dataset_with(dataset, root, serde_json::Value::Null)
}

pub fn save_dataset_with(dataset: &Dataset, root: &Path, provenance: serde_json::Value) -> Result<()> {
    let mut files = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let rel = sample_path(s);
        let path = root.join(&rel);
        let dir = path.parent().unwrap();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = s.image.to_bytes();
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.push(ManifestEntry {
            path: rel,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        spec: dataset.spec.clone(),
        files,
        provenance,
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "dataset manifest {} not found",
            path.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::integrity(&path, e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "dataset format version {} (supported: {DATASET_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads and checksum-verifies a dataset directory.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let spec = manifest.spec;
    spec.validate()?;
    let mut by_path: BTreeMap<&str, &str> = BTreeMap::new();
    for f in &manifest.files {
        by_path.insert(&f.path, &f.sha256);
    }
    let mut samples = Vec::new();
    for d in &spec.domains {
        for c in &spec.classes {
            for index in 0..spec.samples_per_cell {
                let rel = format!("domain_{}/class_{}/sample_{index}.bin", d.id, c.id);
                let path: PathBuf = root.join(&rel);
                let expected = by_path
                    .get(rel.as_str())
                    .ok_or_else(|| Error::integrity(&path, "not listed in manifest"))?;
                let bytes = fs::read(&path).map_err(|e| Error::integrity(&path, e.to_string()))?;
                if sha256_hex(&bytes) != *expected {
                    return Err(Error::integrity(&path, "checksum mismatch"));
                }
                let image = Tensor::from_bytes(&bytes).map_err(|e| Error::integrity(&path, e.to_string()))?;
                if image.shape() != [spec.channels, spec.image_size, spec.image_size] {
                    return Err(Error::integrity(
                        &path,
                        format!("image shape {:?}", image.shape()),
                    ));
                }
                samples.push(Sample {
                    image,
                    class_id: c.id,
                    domain_id: d.id,
                    index,
                });
            }
        }
    }
    if manifest.files.len() != samples.len() {
        return Err(Error::integrity(
            root.join(MANIFEST_FILE),
            format!("lists {} files, spec implies {}", manifest.files.len(), samples.len()),
        ));
    }
    Ok(Dataset { spec, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            seed,
            image_size: 12,
            channels: 3,
            samples_per_cell: 6,
            domains: default_domains(),
            classes: default_classes(8).unwrap(),
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_dataset(&small_spec(3)).unwrap();
        let b = generate_dataset(&small_spec(3)).unwrap();
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.image.bit_eq(&y.image)));
        let c = generate_dataset(&small_spec(4)).unwrap();
        assert!(!a.samples[0].image.bit_eq(&c.samples[0].image));
    }

    #[test]
    fn class_counts_exact() {
        let ds = generate_dataset(&small_spec(1)).unwrap();
        assert_eq!(ds.samples.len(), 4 * 8 * 6);
        for d in 0..4 {
            for c in 0..8 {
                assert_eq!(ds.cell(d, c).len(), 6);
            }
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut s = small_spec(1);
        s.samples_per_cell = 0;
        assert!(matches!(generate_dataset(&s), Err(Error::Contract(_))));
        let mut s = small_spec(1);
        s.classes.truncate(3);
        assert!(generate_dataset(&s).is_err());
        let mut s = small_spec(1);
        s.classes[1].shape = s.classes[0].shape;
        assert!(generate_dataset(&s).is_err());
    }

    #[test]
    fn base_to_novel_bookkeeping() {
        let ds = generate_dataset(&small_spec(2)).unwrap();
        let s = make_base_to_novel_split(&ds, 0.5, 4, 9).unwrap();
        assert_eq!(s.base_classes, vec![0, 1, 2, 3]);
        assert_eq!(s.novel_classes, vec![4, 5, 6, 7]);
        assert_eq!(s.train.len(), 16);
        assert!(s.train.iter().all(|&i| ds.samples[i].class_id < 4));
        assert_eq!(s, make_base_to_novel_split(&ds, 0.5, 4, 9).unwrap());
        assert_ne!(s.train, make_base_to_novel_split(&ds, 0.5, 4, 10).unwrap().train);
        assert!(matches!(
            make_base_to_novel_split(&ds, 0.5, 24, 9),
            Err(Error::Contract(_))
        ));
        let mut bad = s.clone();
        bad.train.push(ds.cell(0, 5)[0]);
        assert!(bad.check_no_leakage(&ds).is_err());
    }

    #[test]
    fn domain_split_bookkeeping() {
        let ds = generate_dataset(&small_spec(2)).unwrap();
        let s = make_domain_split(&ds, &[0, 1], &[2, 3]).unwrap();
        assert_eq!(s.train.len(), 2 * 8 * 6);
        assert!(s.train.iter().all(|&i| ds.samples[i].domain_id < 2));
        assert_eq!(s.test_target[&2].len(), 8 * 6);
        assert!(matches!(
            make_domain_split(&ds, &[0, 1], &[1, 2]),
            Err(Error::Contract(_))
        ));
        assert_eq!(s, make_domain_split(&ds, &[0, 1], &[2, 3]).unwrap());
    }
}
