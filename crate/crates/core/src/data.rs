//! Open-set datasets: a seeded synthetic generator, the CIFAR-10 binary
//! format, labeled/unlabeled splitting, augmentation and a flat on-disk
//! export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Geometry, Image, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;
/// bird, cat, deer, dog, frog, horse.
pub const CIFAR_ANIMAL_CLASSES: [usize; 6] = [2, 3, 4, 5, 6, 7];

/// Hidden ground truth: whether a sample's class is one of the labeled classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TruthTag {
    Id,
    Ood,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Image<f32>,
    /// Class index in the full class space; `None` for unlabeled samples.
    pub label: Option<usize>,
    // Read through `eval::truth_tag` only.
    pub(crate) truth: TruthTag,
}

impl ImageSample {
    pub fn new(pixels: Image<f32>, label: Option<usize>, truth: TruthTag) -> Self {
        Self {
            pixels,
            label,
            truth,
        }
    }

    fn hidden(mut self) -> Self {
        self.label = None;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetSplit {
    pub labeled: Vec<ImageSample>,
    pub unlabeled: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    /// Labeled class space, sorted. Position in this list is the classifier index.
    pub id_classes: Vec<usize>,
    pub all_classes: Vec<usize>,
}

impl OpenSetSplit {
    /// Classifier output index for a class, if it is an ID class.
    pub fn local_label(&self, class: usize) -> Option<usize> {
        self.id_classes.iter().position(|&c| c == class)
    }

    pub fn num_id_classes(&self) -> usize {
        self.id_classes.len()
    }

    pub fn geometry(&self) -> Option<Geometry> {
        self.labeled.first().map(|s| s.pixels.geometry())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_id_classes: usize,
    pub n_ood_classes: usize,
    pub channels: usize,
    pub side: usize,
    pub labeled_per_class: usize,
    pub unlabeled_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_id_classes: 2,
            n_ood_classes: 1,
            channels: 3,
            side: 32,
            labeled_per_class: 50,
            unlabeled_per_class: 100,
            test_per_class: 50,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_id_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 ID classes, got {}",
                self.n_id_classes
            )));
        }
        if self.n_ood_classes == 0 {
            return Err(Error::Config(
                "n_ood_classes must be positive: the labeled class space O_l must be a strict subset of O_u (O_l ≠ O_u)".into(),
            ));
        }
        if self.side < 8 {
            return Err(Error::Config(format!("image side must be at least 8, got {}", self.side)));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.labeled_per_class == 0 {
            return Err(Error::Config("labeled_per_class must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and ≥ 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::square(self.channels, self.side)
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Low-frequency class pattern: a base colour per channel plus a few sinusoids
/// with integer frequencies below 3 cycles per image.
pub fn class_template(seed: u64, class: usize, geometry: Geometry) -> Image<f32> {
    let mut rng = stream(seed, 1_000 + class as u64);
    let Geometry {
        channels,
        height,
        width,
    } = geometry;
    let mut data = Vec::with_capacity(geometry.len());
    for _ in 0..channels {
        let base = rng.gen_range(0.25..0.75);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.08..0.2),
                    rng.gen_range(0..3) as f64,
                    rng.gen_range(0..3) as f64,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        for r in 0..height {
            for c in 0..width {
                let (y, x) = (r as f64 / height as f64, c as f64 / width as f64);
                let v = waves.iter().fold(base, |acc, &(amp, fx, fy, phase)| {
                    acc + amp * (std::f64::consts::TAU * (fx * x + fy * y) + phase).sin()
                });
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(geometry, data).expect("template geometry")
}

fn noisy_sample(template: &Image<f32>, noise: f64, rng: &mut ChaCha8Rng) -> Image<f32> {
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid noise");
    let data = template
        .data()
        .iter()
        .map(|&v| {
            let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            (v as f64 + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    Image::new(template.geometry(), data).expect("same geometry")
}

/// Classes `0..n_id` are ID, the rest OOD. OOD samples only go to the
/// unlabeled and test sets.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<OpenSetSplit> {
    cfg.validate()?;
    let g = cfg.geometry();
    let n_classes = cfg.n_id_classes + cfg.n_ood_classes;
    let mut split = OpenSetSplit {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
        id_classes: (0..cfg.n_id_classes).collect(),
        all_classes: (0..n_classes).collect(),
    };
    for class in 0..n_classes {
        let template = class_template(cfg.seed, class, g);
        let mut rng = stream(cfg.seed, 2_000 + class as u64);
        let is_id = class < cfg.n_id_classes;
        let truth = if is_id { TruthTag::Id } else { TruthTag::Ood };
        let make = |rng: &mut ChaCha8Rng| {
            ImageSample::new(noisy_sample(&template, cfg.noise, rng), Some(class), truth)
        };
        if is_id {
            for _ in 0..cfg.labeled_per_class {
                split.labeled.push(make(&mut rng));
            }
        }
        for _ in 0..cfg.unlabeled_per_class {
            split.unlabeled.push(make(&mut rng).hidden());
        }
        for _ in 0..cfg.test_per_class {
            split.test.push(make(&mut rng));
        }
    }
    let mut rng = stream(cfg.seed, 3);
    split.unlabeled.shuffle(&mut rng);
    split.test.shuffle(&mut rng);
    Ok(split)
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<ImageSample>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::Parse {
            offset,
            message: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() % CIFAR_RECORD
            ),
        });
    }
    let g = Geometry::square(3, CIFAR_SIDE);
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::Parse {
                    offset: i * CIFAR_RECORD,
                    message: format!("label byte {label} exceeds 9"),
                });
            }
            let pixels = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(ImageSample::new(
                Image::new(g, pixels)?,
                Some(label),
                TruthTag::Id,
            ))
        })
        .collect()
}

pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<Vec<ImageSample>> {
    parse_cifar10(&fs::read(path)?)
}

/// Inverse of [`parse_cifar10`] for one sample.
pub fn encode_cifar10_record(sample: &ImageSample) -> Result<Vec<u8>> {
    let label = sample
        .label
        .filter(|&l| l < CIFAR_CLASSES)
        .ok_or_else(|| Error::Invalid("CIFAR record needs a label in 0..10".into()))?;
    if sample.pixels.geometry() != Geometry::square(3, CIFAR_SIDE) {
        return Err(Error::shape("3x32x32", sample.pixels.geometry()));
    }
    let mut out = Vec::with_capacity(CIFAR_RECORD);
    out.push(label as u8);
    out.extend(
        sample
            .pixels
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Draws `n_labeled_per_class` labeled samples from each ID class; everything
/// else becomes unlabeled with its label hidden. `test` is passed through with
/// truth tags assigned.
pub fn make_open_set_split_with_test(
    samples: Vec<ImageSample>,
    test: Vec<ImageSample>,
    id_classes: &[usize],
    n_labeled_per_class: usize,
    seed: u64,
) -> Result<OpenSetSplit> {
    let present: BTreeSet<usize> = samples.iter().filter_map(|s| s.label).collect();
    if samples.iter().any(|s| s.label.is_none()) {
        return Err(Error::Invalid("every input sample needs a class label".into()));
    }
    let id_set: BTreeSet<usize> = id_classes.iter().copied().collect();
    if id_set.is_empty() || !id_set.is_subset(&present) || id_set == present {
        return Err(Error::Config(format!(
            "ID classes {id_set:?} must be a strict subset of the classes present {present:?} (O_l ⊂ O_u, O_l ≠ O_u)"
        )));
    }
    let tag = |class: usize| {
        if id_set.contains(&class) {
            TruthTag::Id
        } else {
            TruthTag::Ood
        }
    };
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label.unwrap()).or_default().push(i);
    }
    let mut rng = stream(seed, 4);
    let mut chosen = vec![false; samples.len()];
    for &class in &id_set {
        let pool = &by_class[&class];
        if pool.len() < n_labeled_per_class {
            return Err(Error::InsufficientSamples {
                class,
                needed: n_labeled_per_class,
                available: pool.len(),
            });
        }
        for &i in pool.choose_multiple(&mut rng, n_labeled_per_class) {
            chosen[i] = true;
        }
    }
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (s, pick) in samples.into_iter().zip(chosen) {
        let class = s.label.unwrap();
        let s = ImageSample { truth: tag(class), ..s };
        if pick {
            labeled.push(s);
        } else {
            unlabeled.push(s.hidden());
        }
    }
    let mut test = test;
    for s in &mut test {
        if let Some(class) = s.label {
            s.truth = tag(class);
        }
    }
    let mut all: BTreeSet<usize> = present;
    all.extend(test.iter().filter_map(|s| s.label));
    Ok(OpenSetSplit {
        labeled,
        unlabeled,
        test,
        id_classes: id_set.into_iter().collect(),
        all_classes: all.into_iter().collect(),
    })
}

pub fn make_open_set_split(
    samples: Vec<ImageSample>,
    id_classes: &[usize],
    n_labeled_per_class: usize,
    seed: u64,
) -> Result<OpenSetSplit> {
    make_open_set_split_with_test(samples, Vec::new(), id_classes, n_labeled_per_class, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strength {
    Weak,
    Strong,
}

/// Random choices behind one augmentation, drawn separately so they can be
/// inspected or fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub shift_x: isize,
    pub shift_y: isize,
    /// Per-channel (brightness factor, contrast factor); strong only.
    pub jitter: Vec<(f32, f32)>,
    /// Top-left corner and side of the cutout square; strong only.
    pub cutout: Option<(usize, usize, usize)>,
}

pub const MAX_SHIFT_FRACTION: f64 = 0.125;
pub const JITTER: f32 = 0.4;

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            flip: false,
            shift_x: 0,
            shift_y: 0,
            jitter: Vec::new(),
            cutout: None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(strength: Strength, geometry: Geometry, rng: &mut R) -> Self {
        let max_x = (geometry.width as f64 * MAX_SHIFT_FRACTION).round() as isize;
        let max_y = (geometry.height as f64 * MAX_SHIFT_FRACTION).round() as isize;
        let mut draw = Self {
            flip: rng.gen_bool(0.5),
            shift_x: rng.gen_range(-max_x..=max_x),
            shift_y: rng.gen_range(-max_y..=max_y),
            jitter: Vec::new(),
            cutout: None,
        };
        if strength == Strength::Strong {
            draw.jitter = (0..geometry.channels)
                .map(|_| {
                    (
                        1.0 + rng.gen_range(-JITTER..=JITTER),
                        1.0 + rng.gen_range(-JITTER..=JITTER),
                    )
                })
                .collect();
            let side = (geometry.height.min(geometry.width) / 4).max(1);
            draw.cutout = Some((
                rng.gen_range(0..=geometry.height - side),
                rng.gen_range(0..=geometry.width - side),
                side,
            ));
        }
        draw
    }

    pub fn apply(&self, image: &Image<f32>) -> Image<f32> {
        let g = image.geometry();
        let (h, w) = (g.height as isize, g.width as isize);
        let mut out = Image::zeros(g);
        for c in 0..g.channels {
            for r in 0..g.height {
                for col in 0..g.width {
                    // Edge padding: clamp the source coordinate.
                    let sr = (r as isize - self.shift_y).clamp(0, h - 1) as usize;
                    let mut sc = (col as isize - self.shift_x).clamp(0, w - 1) as usize;
                    if self.flip {
                        sc = g.width - 1 - sc;
                    }
                    out.set(c, r, col, image.get(c, sr, sc));
                }
            }
        }
        for (c, &(brightness, contrast)) in self.jitter.iter().enumerate() {
            let plane = &mut out.data_mut()[c * g.height * g.width..(c + 1) * g.height * g.width];
            let mean = plane.iter().sum::<f32>() / plane.len() as f32;
            for v in plane {
                *v = (((*v - mean) * contrast + mean) * brightness).clamp(0.0, 1.0);
            }
        }
        if let Some((top, left, side)) = self.cutout {
            for c in 0..g.channels {
                for r in top..top + side {
                    for col in left..left + side {
                        out.set(c, r, col, 0.5);
                    }
                }
            }
        }
        out
    }
}

/// Weak: horizontal flip and a translation of up to 12.5% with edge padding.
/// Strong: weak plus per-channel brightness/contrast jitter and one cutout square.
pub fn augment<R: Rng + ?Sized>(sample: &ImageSample, strength: Strength, rng: &mut R) -> ImageSample {
    let draw = AugmentDraw::sample(strength, sample.pixels.geometry(), rng);
    ImageSample {
        pixels: draw.apply(&sample.pixels),
        ..sample.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub file: String,
    pub count: usize,
    pub labels: Vec<Option<usize>>,
    pub truth_tags: Vec<TruthTag>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub geometry: Geometry,
    pub id_classes: Vec<usize>,
    pub all_classes: Vec<usize>,
    pub seed: u64,
    pub source: serde_json::Value,
    pub labeled: SplitManifest,
    pub unlabeled: SplitManifest,
    pub test: SplitManifest,
}

impl DatasetManifest {
    /// Digest over the three split checksums; identifies the exact data a run saw.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in [&self.labeled, &self.unlabeled, &self.test] {
            h.update(s.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub const DATASET_MANIFEST: &str = "manifest.json";

fn tensor_bytes(samples: &[ImageSample]) -> Vec<u8> {
    samples
        .iter()
        .flat_map(|s| s.pixels.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `labeled.f32`, `unlabeled.f32`, `test.f32` (little-endian f32,
/// samples concatenated C×H×W) and `manifest.json`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    split: &OpenSetSplit,
    seed: u64,
    source: serde_json::Value,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let geometry = split
        .geometry()
        .ok_or_else(|| Error::Invalid("cannot export a split with no labeled samples".into()))?;
    let write = |name: &str, samples: &[ImageSample]| -> Result<SplitManifest> {
        let bytes = tensor_bytes(samples);
        let file = format!("{name}.f32");
        fs::write(dir.join(&file), &bytes)?;
        Ok(SplitManifest {
            file,
            count: samples.len(),
            labels: samples.iter().map(|s| s.label).collect(),
            truth_tags: samples.iter().map(|s| s.truth).collect(),
            sha256: sha256_hex(&bytes),
        })
    };
    let manifest = DatasetManifest {
        geometry,
        id_classes: split.id_classes.clone(),
        all_classes: split.all_classes.clone(),
        seed,
        source,
        labeled: write("labeled", &split.labeled)?,
        unlabeled: write("unlabeled", &split.unlabeled)?,
        test: write("test", &split.test)?,
    };
    fs::write(dir.join(DATASET_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(OpenSetSplit, DatasetManifest)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(DATASET_MANIFEST);
    let raw = fs::read(&manifest_path).map_err(|e| Error::Artifact {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let manifest: DatasetManifest = serde_json::from_slice(&raw).map_err(|e| Error::Artifact {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let g = manifest.geometry;
    let read = |m: &SplitManifest| -> Result<Vec<ImageSample>> {
        let path = dir.join(&m.file);
        let bytes = fs::read(&path).map_err(|e| Error::Artifact {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if sha256_hex(&bytes) != m.sha256 {
            return Err(Error::Artifact {
                path,
                reason: "checksum mismatch".into(),
            });
        }
        if bytes.len() != m.count * g.len() * 4 || m.labels.len() != m.count || m.truth_tags.len() != m.count {
            return Err(Error::Artifact {
                path,
                reason: format!("expected {} samples of {g}", m.count),
            });
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        values
            .chunks_exact(g.len().max(1))
            .zip(&m.labels)
            .zip(&m.truth_tags)
            .map(|((px, &label), &truth)| Ok(ImageSample::new(Image::new(g, px.to_vec())?, label, truth)))
            .collect()
    };
    let split = OpenSetSplit {
        labeled: read(&manifest.labeled)?,
        unlabeled: read(&manifest.unlabeled)?,
        test: read(&manifest.test)?,
        id_classes: manifest.id_classes.clone(),
        all_classes: manifest.all_classes.clone(),
    };
    Ok((split, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            side: 8,
            labeled_per_class: 5,
            unlabeled_per_class: 4,
            test_per_class: 3,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticConfig { seed: 1, ..small_cfg() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_rejects_closed_set() {
        let err = generate_synthetic(&SyntheticConfig { n_ood_classes: 0, ..small_cfg() }).unwrap_err();
        assert!(err.to_string().contains("O_l ≠ O_u"));
        assert!(generate_synthetic(&SyntheticConfig { n_id_classes: 1, ..small_cfg() }).is_err());
        assert!(generate_synthetic(&SyntheticConfig { side: 7, ..small_cfg() }).is_err());
    }

    #[test]
    fn synthetic_counts_and_partition() {
        let cfg = SyntheticConfig { side: 8, ..SyntheticConfig::default() };
        let s = generate_synthetic(&cfg).unwrap();
        assert_eq!(s.labeled.len(), 100);
        assert!(s.labeled.iter().all(|x| matches!(x.label, Some(0 | 1)) && x.truth == TruthTag::Id));
        assert_eq!(s.unlabeled.len(), 300);
        assert!(s.unlabeled.iter().all(|x| x.label.is_none()));
        assert_eq!(s.unlabeled.iter().filter(|x| x.truth == TruthTag::Ood).count(), 100);
        assert_eq!(s.test.len(), 150);
        assert!(s.test.iter().all(|x| (x.label == Some(2)) == (x.truth == TruthTag::Ood)));
        for x in s.labeled.iter().chain(&s.unlabeled).chain(&s.test) {
            assert!(x.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn synthetic_classes_are_separable() {
        let cfg = SyntheticConfig {
            labeled_per_class: 20,
            n_id_classes: 3,
            ..SyntheticConfig::default()
        };
        let s = generate_synthetic(&cfg).unwrap();
        let dist = |a: &ImageSample, b: &ImageSample| -> f64 {
            a.pixels.data().iter().zip(b.pixels.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
        };
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
        for (i, a) in s.labeled.iter().enumerate() {
            for b in &s.labeled[i + 1..] {
                if a.label == b.label {
                    within += dist(a, b);
                    nw += 1;
                } else {
                    between += dist(a, b);
                    nb += 1;
                }
            }
        }
        assert!((within / nw as f64) < (between / nb as f64));
    }

    fn cifar_bytes(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            out.push(l);
            out.extend((0..3072).map(|p| ((p + 7 * i) % 256) as u8));
        }
        out
    }

    #[test]
    fn cifar_parsing() {
        let bytes = cifar_bytes(&[3, 9]);
        let samples = parse_cifar10(&bytes).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].label, Some(3));
        assert_eq!(samples[0].pixels.get(0, 0, 0), 0.0);
        assert_eq!(samples[0].pixels.data()[255], 1.0);
        // plane order: byte 1024 of the pixel block is the first green value.
        assert_eq!(samples[0].pixels.get(1, 0, 0), (1024 % 256) as f32 / 255.0);
        for (s, chunk) in samples.iter().zip(bytes.chunks(CIFAR_RECORD)) {
            assert_eq!(encode_cifar10_record(s).unwrap(), chunk);
        }
    }

    #[test]
    fn cifar_errors() {
        let err = parse_cifar10(&vec![0u8; 3072]).unwrap_err();
        assert!(err.to_string().contains("truncated record"), "{err}");
        let mut bytes = cifar_bytes(&[1, 2]);
        bytes[CIFAR_RECORD] = 10;
        match parse_cifar10(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, CIFAR_RECORD),
            other => panic!("{other:?}"),
        }
    }

    fn fake_cifar(per_class: usize) -> Vec<ImageSample> {
        let g = Geometry::square(3, 4);
        (0..10)
            .flat_map(|c| {
                (0..per_class).map(move |i| {
                    ImageSample::new(Image::filled(g, (c * per_class + i) as f32 / 1000.0), Some(c), TruthTag::Id)
                })
            })
            .collect()
    }

    #[test]
    fn open_set_split_counts() {
        let s = make_open_set_split(fake_cifar(60), &CIFAR_ANIMAL_CLASSES, 50, 1).unwrap();
        assert_eq!(s.id_classes.len(), 6);
        assert_eq!(s.all_classes.len(), 10);
        assert_eq!(s.labeled.len(), 300);
        assert_eq!(s.unlabeled.len(), 300);
        assert!(s.labeled.iter().all(|x| x.truth == TruthTag::Id && CIFAR_ANIMAL_CLASSES.contains(&x.label.unwrap())));
        assert_eq!(s.unlabeled.iter().filter(|x| x.truth == TruthTag::Ood).count(), 240);
        assert_eq!(s.local_label(2), Some(0));
        assert_eq!(s.local_label(0), None);
    }

    #[test]
    fn open_set_split_partitions_input() {
        let input = fake_cifar(8);
        let s = make_open_set_split(input.clone(), &[0, 1, 2], 5, 9).unwrap();
        let key = |x: &ImageSample| x.pixels.data()[0].to_bits();
        let mut got: Vec<u32> = s.labeled.iter().chain(&s.unlabeled).chain(&s.test).map(key).collect();
        let mut want: Vec<u32> = input.iter().map(key).collect();
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn open_set_split_errors() {
        let err = make_open_set_split(fake_cifar(3), &[0, 1], 5, 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { class: 0, .. }));
        assert!(make_open_set_split(fake_cifar(3), &(0..10).collect::<Vec<_>>(), 1, 0).is_err());
    }

    #[test]
    fn augmentation_contracts() {
        let s = &generate_synthetic(&small_cfg()).unwrap().labeled[0];
        assert_eq!(AugmentDraw::identity().apply(&s.pixels), s.pixels);
        for strength in [Strength::Weak, Strength::Strong] {
            let a = augment(s, strength, &mut ChaCha8Rng::seed_from_u64(3));
            let b = augment(s, strength, &mut ChaCha8Rng::seed_from_u64(3));
            assert_eq!(a, b);
            assert_eq!(a.pixels.geometry(), s.pixels.geometry());
            assert_eq!((a.label, a.truth), (s.label, s.truth));
        }
    }

    #[test]
    fn shift_uses_edge_padding() {
        let g = Geometry::square(1, 8);
        let img = Image::new(g, (0..64).map(|v| v as f32).collect()).unwrap();
        let draw = AugmentDraw { shift_x: 2, ..AugmentDraw::identity() };
        let out = draw.apply(&img);
        assert_eq!(out.get(0, 3, 0), img.get(0, 3, 0));
        assert_eq!(out.get(0, 3, 1), img.get(0, 3, 0));
        assert_eq!(out.get(0, 3, 5), img.get(0, 3, 3));
        let flip = AugmentDraw { flip: true, ..AugmentDraw::identity() };
        assert_eq!(flip.apply(&img).get(0, 2, 0), img.get(0, 2, 7));
    }

    #[test]
    fn dataset_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_synthetic(&small_cfg()).unwrap();
        let m = write_dataset(dir.path(), &split, 0, serde_json::json!({"kind": "synthetic"})).unwrap();
        let (back, m2) = read_dataset(dir.path()).unwrap();
        assert_eq!(back, split);
        assert_eq!(m, m2);
        let path = dir.path().join("test.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Artifact { .. })));
    }
}
