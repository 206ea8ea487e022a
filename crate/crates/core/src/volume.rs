//! Volumes, voxel label maps and training/evaluation cases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Segmentation classes: background, stomach, tumor.
pub const NUM_CLASSES: usize = 3;
pub const BACKGROUND: u8 = 0;
pub const STOMACH: u8 = 1;
pub const TUMOR: u8 = 2;

pub type Extents = [usize; 3];

pub fn voxels(e: Extents) -> usize {
    e[0] * e[1] * e[2]
}

/// Voxel class map in `[D, H, W]` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    extents: Extents,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(extents: Extents, data: Vec<u8>) -> Result<Self> {
        if data.len() != voxels(extents) {
            return Err(Error::Shape(format!(
                "label map {extents:?} needs {} voxels, got {}",
                voxels(extents),
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {bad} out of range 0..{NUM_CLASSES}")));
        }
        Ok(Self { extents, data })
    }

    pub fn filled(extents: Extents, class: u8) -> Self {
        Self {
            extents,
            data: vec![class; voxels(extents)],
        }
    }

    pub fn extents(&self) -> Extents {
        self.extents
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&c| c == class).collect()
    }

    /// One-hot encoding `[K, D, H, W]`.
    pub fn one_hot<T: Real>(&self) -> Tensor<T> {
        let v = self.data.len();
        let mut out = vec![T::zero(); NUM_CLASSES * v];
        for (i, &c) in self.data.iter().enumerate() {
            out[c as usize * v + i] = T::one();
        }
        let [d, h, w] = self.extents;
        Tensor::new(vec![NUM_CLASSES, d, h, w], out).expect("consistent shape")
    }

    /// Nearest-neighbour resampling, matching the tape's `interpolate_nearest`.
    pub fn resize_nearest(&self, target: Extents) -> Self {
        let [d, h, w] = self.extents;
        let src = |i, s, t| crate::tensor::kernels::nearest_src(i, s, t);
        let mut data = Vec::with_capacity(voxels(target));
        for z in 0..target[0] {
            let sz = src(z, d, target[0]);
            for y in 0..target[1] {
                let sy = src(y, h, target[1]);
                for x in 0..target[2] {
                    let sx = src(x, w, target[2]);
                    data.push(self.data[(sz * h + sy) * w + sx]);
                }
            }
        }
        Self {
            extents: target,
            data,
        }
    }

    /// Half-open bounding box `(low, high)` of voxels whose class satisfies `pred`.
    pub fn bounding_box(&self, pred: impl Fn(u8) -> bool) -> Option<(Extents, Extents)> {
        let [_, h, w] = self.extents;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &c) in self.data.iter().enumerate() {
            if !pred(c) {
                continue;
            }
            any = true;
            let p = [i / (h * w), (i / w) % h, i % w];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a] + 1);
            }
        }
        any.then_some((lo, hi))
    }
}

/// Per-case generation metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct SampleMeta {
    /// Tumor-vs-wall contrast used to generate the case.
    pub difficulty: f64,
    pub tumor_voxels: usize,
    /// Radius of a sphere with the tumor's volume, in voxels.
    pub tumor_radius_equiv: f64,
    pub spacing: String,
}

/// One case: image, voxel labels and patient-level label.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    /// `[1, D, H, W]` intensities.
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    /// 1 = tumor present.
    pub patient_label: u8,
    pub seed: u64,
    pub meta: SampleMeta,
}

impl VolumeSample {
    pub fn extents(&self) -> Extents {
        self.labels.extents()
    }
}
