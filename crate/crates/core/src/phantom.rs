//! Procedural stomach phantoms with optional low-contrast wall tumors, and
//! the on-disk dataset layout.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_key, SplitMix64};
use crate::tensor::Tensor;
use crate::volume::{voxels, Extents, LabelMap, SampleMeta, VolumeSample, STOMACH, TUMOR};

pub const MIN_EXTENT: usize = 16;
pub const DATASET_VERSION: &str = "cimt-dataset/1";
pub const DATASET_LAYOUT: &str = "X_<id>.bin: f32 little-endian, C-order [1, D, H, W]; \
Y_<id>.bin: u8 class per voxel, C-order [D, H, W] (0 background, 1 stomach, 2 tumor)";

const WALL_MEAN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DifficultyConfig {
    /// Tumor minus wall mean intensity, in units of `noise_std`.
    pub contrast_delta: f64,
    /// Relative amplitude of the wall's radial deformation.
    pub deform_amp: f64,
    pub noise_std: f64,
    /// Probability of a bright confounding blob inside the lumen.
    pub lumen_content_prob: f64,
    /// Probability of a tumor when sampling cases individually.
    pub tumor_prob: f64,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        Self {
            contrast_delta: 1.5,
            deform_amp: 0.15,
            noise_std: 0.25,
            lumen_content_prob: 0.3,
            tumor_prob: 0.5,
        }
    }
}

impl DifficultyConfig {
    pub fn with_contrast(contrast_delta: f64) -> Self {
        Self {
            contrast_delta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [("lumen_content_prob", self.lumen_content_prob), ("tumor_prob", self.tumor_prob)];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.contrast_delta >= 0.0) || !(self.noise_std >= 0.0) || !(self.deform_amp >= 0.0) {
            return Err(Error::Config(
                "contrast_delta, noise_std and deform_amp must be non-negative".into(),
            ));
        }
        if self.deform_amp >= 0.5 {
            return Err(Error::Config(format!("deform_amp {} too large (< 0.5)", self.deform_amp)));
        }
        Ok(())
    }
}

fn check_extents(extents: Extents) -> Result<()> {
    if extents.iter().any(|&e| e < MIN_EXTENT) {
        return Err(Error::Config(format!(
            "extents {extents:?} too small to fit a stomach shell (need at least {MIN_EXTENT} per axis)"
        )));
    }
    Ok(())
}

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(rng: &mut SplitMix64, normal: &Normal<f64>) -> V3 {
    loop {
        let v = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        let n = dot(v, v).sqrt();
        if n > 1e-6 {
            return v.map(|c| c / n);
        }
    }
}

/// Rotation matrix of a uniformly random unit quaternion.
fn rotation(rng: &mut SplitMix64, normal: &Normal<f64>) -> [V3; 3] {
    let mut q = [0.0; 4];
    loop {
        q.iter_mut().for_each(|c| *c = normal.sample(rng));
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.iter_mut().for_each(|c| *c /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Stomach shell: rotated, deformed ellipsoid with a wall of given thickness.
struct Shell {
    center: V3,
    semi: V3,
    rot: [V3; 3],
    harmonics: Vec<(V3, f64, f64, f64)>,
    deform_amp: f64,
    inner: f64,
}

impl Shell {
    fn sample(rng: &mut SplitMix64, extents: Extents, deform_amp: f64) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let center = [0, 1, 2].map(|a| {
            let e = extents[a] as f64;
            (e - 1.0) / 2.0 + rng.random_range(-0.08..0.08) * e
        });
        let semi = [0, 1, 2].map(|a| extents[a] as f64 * rng.random_range(0.24..0.32));
        let rot = rotation(rng, &normal);
        let harmonics = (0..3)
            .map(|_| {
                let dir = unit(rng, &normal);
                let freq = rng.random_range(1.5..3.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let weight = rng.random_range(0.5..1.0);
                (dir, freq, phase, weight)
            })
            .collect();
        let mean_semi = semi.iter().sum::<f64>() / 3.0;
        let thickness = rng.random_range(1.3..2.0);
        Self {
            center,
            semi,
            rot,
            harmonics,
            deform_amp,
            inner: 1.0 - thickness / mean_semi,
        }
    }

    /// Normalized radius: `< inner` lumen, `[inner, 1]` wall, `> 1` outside.
    fn radius(&self, p: V3) -> f64 {
        let d = [0, 1, 2].map(|a| p[a] - self.center[a]);
        let local = [0, 1, 2].map(|r| dot(self.rot[r], d) / self.semi[r]);
        let norm = dot(local, local).sqrt();
        if norm < 1e-9 {
            return 0.0;
        }
        let u = local.map(|c| c / norm);
        let total_w: f64 = self.harmonics.iter().map(|h| h.3).sum();
        let bump: f64 = self
            .harmonics
            .iter()
            .map(|(dir, freq, phase, w)| w * (freq * std::f64::consts::PI * dot(*dir, u) + phase).cos())
            .sum::<f64>()
            / total_w;
        norm / (1.0 + self.deform_amp * bump)
    }
}

fn coords(i: usize, e: Extents) -> V3 {
    [i / (e[1] * e[2]), (i / e[2]) % e[1], i % e[2]].map(|c| c as f64)
}

fn dist2(a: V3, b: V3) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn shell_radii(rng: &mut SplitMix64, extents: Extents, deform_amp: f64) -> (Shell, Vec<f64>) {
    let shell = Shell::sample(rng, extents, deform_amp);
    let radius = (0..voxels(extents)).map(|i| shell.radius(coords(i, extents))).collect();
    (shell, radius)
}

/// The stomach wall of the case `seed` generates, before any tumor is drawn.
pub fn wall_mask(seed: u64, cfg: &DifficultyConfig, extents: Extents) -> Result<Vec<bool>> {
    cfg.validate()?;
    check_extents(extents)?;
    let mut rng = SplitMix64::named(seed, "phantom");
    let (shell, radius) = shell_radii(&mut rng, extents, cfg.deform_amp);
    Ok(radius.iter().map(|&r| r <= 1.0 && r >= shell.inner).collect())
}

/// Draws the tumor flag from `cfg.tumor_prob`, then generates the case.
pub fn generate_sample(seed: u64, cfg: &DifficultyConfig, extents: Extents) -> Result<VolumeSample> {
    cfg.validate()?;
    let mut rng = SplitMix64::named(seed, "tumor-flag");
    let tumor = rng.random_bool(cfg.tumor_prob);
    generate_case(seed, cfg, extents, tumor)
}

/// Generates one case with the tumor flag fixed.
pub fn generate_case(seed: u64, cfg: &DifficultyConfig, extents: Extents, tumor: bool) -> Result<VolumeSample> {
    cfg.validate()?;
    check_extents(extents)?;
    let mut rng = SplitMix64::named(seed, "phantom");
    let (shell, radius) = shell_radii(&mut rng, extents, cfg.deform_amp);
    let n = voxels(extents);

    let mut labels = vec![0u8; n];
    let mut wall = Vec::new();
    for (i, &r) in radius.iter().enumerate() {
        if r <= 1.0 {
            labels[i] = STOMACH;
            if r >= shell.inner {
                wall.push(i);
            }
        }
    }
    if wall.len() < 20 {
        return Err(Error::Config(format!(
            "stomach wall has only {} voxels in {extents:?}",
            wall.len()
        )));
    }

    let lumen_mean = rng.random_range(0.25..0.55);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let field: Vec<(V3, f64, f64)> = (0..2)
        .map(|_| {
            let dir = unit(&mut rng, &normal);
            (dir, rng.random_range(0.1..0.3), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();

    let mut blob: Option<(V3, f64, f64)> = None;
    if rng.random_bool(cfg.lumen_content_prob) {
        let deep: Vec<usize> = (0..n).filter(|&i| radius[i] < shell.inner * 0.6).collect();
        if !deep.is_empty() {
            let c = coords(deep[rng.random_range(0..deep.len())], extents);
            let r = rng.random_range(1.0..2.0);
            let level = rng.random_range(0.5..1.0) * cfg.contrast_delta.max(1.0) * cfg.noise_std;
            blob = Some((c, r, level));
        }
    }

    let mut tumor_set = Vec::new();
    if tumor {
        let seed_voxel = coords(wall[rng.random_range(0..wall.len())], extents);
        let frac = rng.random_range(0.02f64.ln()..0.15f64.ln()).exp();
        let count = ((wall.len() as f64 * frac).round() as usize).max(1);
        let mut by_dist: Vec<(f64, usize)> = wall
            .iter()
            .map(|&i| (dist2(coords(i, extents), seed_voxel), i))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        tumor_set = by_dist[..count].iter().map(|&(_, i)| i).collect();
        let reach = by_dist[count - 1].0.sqrt();
        // Inward thickening: lumen voxels next to the lesion near its center.
        let lesion: Vec<V3> = tumor_set.iter().map(|&i| coords(i, extents)).collect();
        for i in 0..n {
            if radius[i] >= shell.inner {
                continue;
            }
            let p = coords(i, extents);
            if dist2(p, seed_voxel).sqrt() <= 0.8 * reach
                && lesion.iter().any(|&q| dist2(p, q) <= 2.25)
            {
                tumor_set.push(i);
            }
        }
        tumor_set.sort_unstable();
        for &i in &tumor_set {
            labels[i] = TUMOR;
        }
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let tumor_mean = WALL_MEAN + cfg.contrast_delta * cfg.noise_std;
    let mut image = Vec::with_capacity(n);
    for i in 0..n {
        let p = coords(i, extents);
        let base = if labels[i] == TUMOR {
            tumor_mean
        } else if radius[i] <= 1.0 && radius[i] >= shell.inner {
            WALL_MEAN
        } else if radius[i] < shell.inner {
            match blob {
                Some((c, r, level)) if dist2(p, c) <= r * r => WALL_MEAN + level,
                _ => lumen_mean,
            }
        } else {
            field
                .iter()
                .map(|(d, f, ph)| 0.1 * (f * dot(*d, p) + ph).cos())
                .sum::<f64>()
        };
        image.push((base + noise.sample(&mut rng)) as f32);
    }

    let tumor_voxels = tumor_set.len();
    let labels = LabelMap::new(extents, labels)?;
    let [d, h, w] = extents;
    Ok(VolumeSample {
        image: Tensor::new(vec![1, d, h, w], image)?,
        labels,
        patient_label: u8::from(tumor_voxels > 0),
        seed,
        meta: SampleMeta {
            difficulty: cfg.contrast_delta,
            tumor_voxels,
            tumor_radius_equiv: (3.0 * tumor_voxels as f64 / (4.0 * std::f64::consts::PI)).cbrt(),
            spacing: "iso-1.0".to_string(),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (train, val, test)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub prevalence: f64,
    pub base_seed: u64,
    pub extents: Extents,
    pub difficulty: DifficultyConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 50,
            n_test: 100,
            prevalence: 0.5,
            base_seed: 0,
            extents: [32, 32, 32],
            difficulty: DifficultyConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn positives(&self, split: Split) -> usize {
        (self.count(split) as f64 * self.prevalence).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.difficulty.validate()?;
        check_extents(self.extents)?;
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config(format!(
                "prevalence must lie in (0, 1), got {}",
                self.prevalence
            )));
        }
        for split in Split::ALL {
            let (n, k) = (self.count(split), self.positives(split));
            if n > 0 && (k == 0 || k == n) {
                return Err(Error::Config(format!(
                    "{} split of {n} cases cannot hold both classes at prevalence {}",
                    split.name(),
                    self.prevalence
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub patient_label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config: DatasetConfig,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Assigns disjoint seed ranges to train, val and test, with exactly
/// `round(n * prevalence)` positives per split.
pub fn make_splits(cfg: &DatasetConfig) -> Result<DatasetIndex> {
    cfg.validate()?;
    let mut entries = Vec::new();
    let mut next = 0u64;
    for split in Split::ALL {
        let n = cfg.count(split);
        let mut flags: Vec<bool> = (0..n).map(|i| i < cfg.positives(split)).collect();
        flags.shuffle(&mut SplitMix64::named(cfg.base_seed, split.name()));
        for flag in flags {
            entries.push(IndexEntry {
                id: format!("{next:05}"),
                seed: derive_key(cfg.base_seed, next),
                split,
                patient_label: u8::from(flag),
            });
            next += 1;
        }
    }
    Ok(DatasetIndex {
        config: cfg.clone(),
        entries,
    })
}

/// Generates the case an index entry describes.
pub fn realize(cfg: &DatasetConfig, entry: &IndexEntry) -> Result<VolumeSample> {
    generate_case(entry.seed, &cfg.difficulty, cfg.extents, entry.patient_label == 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub samples: Vec<VolumeSample>,
}

impl Dataset {
    pub fn generate(index: DatasetIndex) -> Result<Self> {
        let samples = index
            .entries
            .iter()
            .map(|e| realize(&index.config, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { index, samples })
    }

    pub fn split(&self, split: Split) -> Vec<(&IndexEntry, &VolumeSample)> {
        self.index
            .entries
            .iter()
            .zip(&self.samples)
            .filter(|(e, _)| e.split == split)
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    seed: u64,
    split: Split,
    patient_label: u8,
    x_shape: Vec<usize>,
    y_shape: Vec<usize>,
    x_file: String,
    y_file: String,
    meta: SampleMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: String,
    layout: String,
    config: DatasetConfig,
    entries: Vec<ManifestEntry>,
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn f32_to_le(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes `manifest.json` plus one image and one label file per case.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.samples.len());
    for (e, s) in ds.index.entries.iter().zip(&ds.samples) {
        let x_file = format!("X_{}.bin", e.id);
        let y_file = format!("Y_{}.bin", e.id);
        write_file(&dir.join(&x_file), &f32_to_le(s.image.data()))?;
        write_file(&dir.join(&y_file), s.labels.data())?;
        entries.push(ManifestEntry {
            id: e.id.clone(),
            seed: e.seed,
            split: e.split,
            patient_label: e.patient_label,
            x_shape: s.image.shape().to_vec(),
            y_shape: s.labels.extents().to_vec(),
            x_file,
            y_file,
            meta: s.meta.clone(),
        });
    }
    let manifest = Manifest {
        version: DATASET_VERSION.to_string(),
        layout: DATASET_LAYOUT.to_string(),
        config: ds.index.config.clone(),
        entries,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    write_file(&path, text.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = read_file(&path)?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported dataset version `{}`",
            path.display(),
            manifest.version
        )));
    }
    let mut entries = Vec::with_capacity(manifest.entries.len());
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for m in manifest.entries {
        let bad = |file: &str, what: String| Error::Data(format!("{}: {what}", dir.join(file).display()));
        if m.x_shape.len() != 4 || m.x_shape[0] != 1 || m.y_shape.len() != 3 || m.x_shape[1..] != m.y_shape[..] {
            return Err(bad(&m.x_file, format!("inconsistent shapes {:?} / {:?}", m.x_shape, m.y_shape)));
        }
        let extents = [m.y_shape[0], m.y_shape[1], m.y_shape[2]];
        let xb = read_file(&dir.join(&m.x_file))?;
        if xb.len() != 4 * voxels(extents) {
            return Err(bad(&m.x_file, format!("expected {} bytes, found {}", 4 * voxels(extents), xb.len())));
        }
        let yb = read_file(&dir.join(&m.y_file))?;
        if yb.len() != voxels(extents) {
            return Err(bad(&m.y_file, format!("expected {} bytes, found {}", voxels(extents), yb.len())));
        }
        let labels = LabelMap::new(extents, yb).map_err(|e| bad(&m.y_file, e.to_string()))?;
        let has_tumor = labels.count(TUMOR) > 0;
        if has_tumor != (m.patient_label == 1) {
            return Err(bad(&m.y_file, format!("patient label {} disagrees with tumor voxels", m.patient_label)));
        }
        samples.push(VolumeSample {
            image: Tensor::new(m.x_shape.clone(), le_to_f32(&xb))?,
            labels,
            patient_label: m.patient_label,
            seed: m.seed,
            meta: m.meta,
        });
        entries.push(IndexEntry {
            id: m.id,
            seed: m.seed,
            split: m.split,
            patient_label: m.patient_label,
        });
    }
    Ok(Dataset {
        index: DatasetIndex {
            config: manifest.config,
            entries,
        },
        samples,
    })
}
