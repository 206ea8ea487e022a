//! Small 3D U-Net: feature pyramid, segmentation head, ROI handling.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::{Real, Tensor, Var};
use crate::volume::{voxels, Extents, LabelMap, VolumeSample, BACKGROUND, NUM_CLASSES};

/// Number of resolution levels; the coarsest has stride `2^(LEVELS-1)`.
pub const LEVELS: usize = 4;
pub const COARSEST_STRIDE: usize = 1 << (LEVELS - 1);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    /// Channel width per level, finest first.
    pub widths: [usize; LEVELS],
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { widths: [8, 16, 32, 64] }
    }
}

/// Feature maps ordered coarse to fine.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
}

pub struct UnetOutput {
    pub pyramid: FeaturePyramid,
    /// `[K, D, H, W]`.
    pub seg_logits: Var,
    /// Coarsest encoder features.
    pub bottleneck: Var,
}

/// Parameter names and shapes of the U-Net under `prefix`.
pub fn unet_param_shapes(cfg: &UnetConfig, prefix: &str) -> Vec<(String, Vec<usize>)> {
    let w = cfg.widths;
    let mut out = Vec::new();
    let norm = |out: &mut Vec<(String, Vec<usize>)>, block: &str, c: usize| {
        out.push((format!("{prefix}.{block}.norm.w"), vec![c]));
        out.push((format!("{prefix}.{block}.norm.b"), vec![c]));
    };
    out.push((format!("{prefix}.enc0.conv.w"), vec![w[0], 1, 3, 3, 3]));
    norm(&mut out, "enc0", w[0]);
    for l in 1..LEVELS {
        out.push((format!("{prefix}.down{l}.conv.w"), vec![w[l], w[l - 1], 2, 2, 2]));
        norm(&mut out, &format!("down{l}"), w[l]);
        out.push((format!("{prefix}.enc{l}.conv.w"), vec![w[l], w[l], 3, 3, 3]));
        norm(&mut out, &format!("enc{l}"), w[l]);
    }
    for l in (0..LEVELS - 1).rev() {
        out.push((format!("{prefix}.dec{l}.up.w"), vec![w[l], w[l + 1], 1, 1, 1]));
        out.push((format!("{prefix}.dec{l}.conv.w"), vec![w[l], 2 * w[l], 3, 3, 3]));
        norm(&mut out, &format!("dec{l}"), w[l]);
    }
    out.push((format!("{prefix}.head.w"), vec![NUM_CLASSES, w[0], 1, 1, 1]));
    out.push((format!("{prefix}.head.b"), vec![NUM_CLASSES, 1, 1, 1]));
    out
}

pub fn check_extents(e: &[usize]) -> Result<()> {
    if e.len() != 3 || e.iter().any(|&v| v == 0 || v % COARSEST_STRIDE != 0) {
        return Err(Error::Shape(format!(
            "volume extents {e:?} must be positive multiples of {COARSEST_STRIDE}; pad or crop the input"
        )));
    }
    Ok(())
}

fn conv_block<T: Real>(
    s: &mut Session<'_, T>,
    x: Var,
    name: &str,
    k: usize,
    stride: usize,
) -> Result<Var> {
    let w = s.param(&format!("{name}.conv.w"))?;
    let pad = if k == 3 { 1 } else { 0 };
    let y = s.tape.conv3(x, w, stride, pad)?;
    let g = s.param(&format!("{name}.norm.w"))?;
    let b = s.param(&format!("{name}.norm.b"))?;
    let y = s.tape.layer_norm(y, g, b, 0)?;
    Ok(s.tape.gelu(y))
}

/// Runs the U-Net on `x: [1, D, H, W]`.
pub fn unet_forward<T: Real>(s: &mut Session<'_, T>, x: Var, prefix: &str) -> Result<UnetOutput> {
    let shape = s.tape.shape(x).to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::Shape(format!("U-Net input must be [1, D, H, W], got {shape:?}")));
    }
    check_extents(&shape[1..])?;

    let mut skips = Vec::with_capacity(LEVELS);
    let mut h = conv_block(s, x, &format!("{prefix}.enc0"), 3, 1)?;
    skips.push(h);
    for l in 1..LEVELS {
        h = conv_block(s, h, &format!("{prefix}.down{l}"), 2, 2)?;
        h = conv_block(s, h, &format!("{prefix}.enc{l}"), 3, 1)?;
        skips.push(h);
    }
    let bottleneck = h;

    let mut levels = vec![bottleneck];
    for l in (0..LEVELS - 1).rev() {
        let up_w = s.param(&format!("{prefix}.dec{l}.up.w"))?;
        let reduced = s.tape.conv3(h, up_w, 1, 0)?;
        let target = s.tape.shape(skips[l])[1..].to_vec();
        let up = s.tape.interpolate_nearest(reduced, &target)?;
        let cat = s.tape.concat(&[up, skips[l]], 0)?;
        h = conv_block(s, cat, &format!("{prefix}.dec{l}"), 3, 1)?;
        levels.push(h);
    }

    let hw = s.param(&format!("{prefix}.head.w"))?;
    let hb = s.param(&format!("{prefix}.head.b"))?;
    let z = s.tape.conv3(h, hw, 1, 0)?;
    let seg_logits = s.tape.add(z, hb)?;
    Ok(UnetOutput {
        pyramid: FeaturePyramid {
            levels,
            strides: (0..LEVELS).rev().map(|l| 1 << l).collect(),
        },
        seg_logits,
        bottleneck,
    })
}

/// Per-voxel argmax over the class axis of `[K, D, H, W]` logits.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Result<LabelMap> {
    let s = logits.shape();
    if s.len() != 4 || s[0] != NUM_CLASSES {
        return Err(Error::Shape(format!("expected [{NUM_CLASSES}, D, H, W] logits, got {s:?}")));
    }
    let v = s[1] * s[2] * s[3];
    let d = logits.data();
    let labels = (0..v)
        .map(|i| {
            let mut best = 0;
            for k in 1..NUM_CLASSES {
                if d[k * v + i] > d[best * v + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new([s[1], s[2], s[3]], labels)
}

/// Zero mean, unit variance. Constant volumes map to zeros.
pub fn normalize_volume(x: &Tensor<f32>) -> Tensor<f32> {
    let n = x.numel().max(1) as f64;
    let mean = x.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = x
        .data()
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let data = if std < 1e-8 {
        vec![0.0; x.numel()]
    } else {
        x.data().iter().map(|&v| ((f64::from(v) - mean) / std) as f32).collect()
    };
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Half-open voxel box `[low, high)` with the margin it was grown by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub low: Extents,
    pub high: Extents,
    pub margin: Extents,
}

impl RoiBox {
    pub fn full(extents: Extents) -> Self {
        Self {
            low: [0; 3],
            high: extents,
            margin: [0; 3],
        }
    }

    /// Grows `[low, high)` by `margin`, clamped to `extents`.
    pub fn around(low: Extents, high: Extents, margin: Extents, extents: Extents) -> Result<Self> {
        let mut b = Self { low, high, margin };
        for a in 0..3 {
            if high[a] <= low[a] || high[a] > extents[a] {
                return Err(Error::Shape(format!(
                    "box [{low:?}, {high:?}) invalid in volume {extents:?}"
                )));
            }
            b.low[a] = low[a].saturating_sub(margin[a]);
            b.high[a] = (high[a] + margin[a]).min(extents[a]);
        }
        Ok(b)
    }

    pub fn extents(&self) -> Extents {
        [0, 1, 2].map(|a| self.high[a] - self.low[a])
    }

    /// Smallest enlargement whose extents are multiples of `multiple`, kept
    /// inside `extents` (which must themselves be multiples).
    pub fn aligned(&self, multiple: usize, extents: Extents) -> Self {
        let mut b = *self;
        for a in 0..3 {
            let len = (b.high[a] - b.low[a]).div_ceil(multiple) * multiple;
            let len = len.min(extents[a]);
            let grow = len - (b.high[a] - b.low[a]);
            let hi = (b.high[a] + grow).min(extents[a]);
            b.low[a] = hi - len;
            b.high[a] = hi;
        }
        b
    }

    pub fn contains(&self, p: Extents) -> bool {
        (0..3).all(|a| p[a] >= self.low[a] && p[a] < self.high[a])
    }
}

/// Box around the non-background voxels of `labels`, or `None` when empty.
pub fn box_from_mask(labels: &LabelMap, margin: Extents) -> Option<RoiBox> {
    let (lo, hi) = labels.bounding_box(|c| c != BACKGROUND)?;
    RoiBox::around(lo, hi, margin, labels.extents()).ok()
}

/// A located region, flagged when nothing was found and the full volume is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Located {
    pub roi: RoiBox,
    pub fallback: bool,
}

impl Located {
    fn from_labels(labels: &LabelMap, margin: Extents, what: &str) -> Self {
        match box_from_mask(labels, margin) {
            Some(roi) => Self {
                roi,
                fallback: false,
            },
            None => {
                warn!("{what}: no stomach voxels; using the full volume");
                Self {
                    roi: RoiBox::full(labels.extents()),
                    fallback: true,
                }
            }
        }
    }
}

/// Ground-truth box plus margin.
pub fn locate_oracle(labels: &LabelMap, margin: Extents) -> Located {
    Located::from_labels(labels, margin, "oracle mask")
}

/// Box around the voxels the U-Net under `prefix` labels stomach or tumor.
/// `x` is the normalized `[1, D, H, W]` volume.
pub fn locate_stomach(
    x: &Tensor<f32>,
    params: &ParamStore<f32>,
    prefix: &str,
    margin: Extents,
) -> Result<Located> {
    let labels = predict_labels(x, params, prefix)?;
    Ok(Located::from_labels(&labels, margin, "localizer"))
}

/// Argmax segmentation of the U-Net under `prefix`.
pub fn predict_labels(x: &Tensor<f32>, params: &ParamStore<f32>, prefix: &str) -> Result<LabelMap> {
    let mut s = Session::inference(params);
    let xv = s.tape.constant(x.clone());
    let out = unet_forward(&mut s, xv, prefix)?;
    argmax_labels(s.tape.value(out.seg_logits))
}

fn crop_slice<E: Copy>(data: &[E], extents: Extents, roi: &RoiBox) -> Vec<E> {
    let [_, h, w] = extents;
    let mut out = Vec::with_capacity(voxels(roi.extents()));
    for z in roi.low[0]..roi.high[0] {
        for y in roi.low[1]..roi.high[1] {
            let row = (z * h + y) * w;
            out.extend_from_slice(&data[row + roi.low[2]..row + roi.high[2]]);
        }
    }
    out
}

fn paste_slice<E: Copy>(dst: &mut [E], extents: Extents, src: &[E], roi: &RoiBox) {
    let [_, h, w] = extents;
    let cw = roi.high[2] - roi.low[2];
    let mut i = 0;
    for z in roi.low[0]..roi.high[0] {
        for y in roi.low[1]..roi.high[1] {
            let row = (z * h + y) * w;
            dst[row + roi.low[2]..row + roi.high[2]].copy_from_slice(&src[i..i + cw]);
            i += cw;
        }
    }
}

fn check_roi(roi: &RoiBox, extents: Extents) -> Result<()> {
    if (0..3).any(|a| roi.high[a] <= roi.low[a] || roi.high[a] > extents[a]) {
        return Err(Error::Shape(format!("ROI {roi:?} outside volume {extents:?}")));
    }
    Ok(())
}

/// A sub-volume and the box it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Cropped {
    pub sample: VolumeSample,
    pub roi: RoiBox,
}

pub fn crop_roi(sample: &VolumeSample, roi: &RoiBox) -> Result<Cropped> {
    let e = sample.extents();
    check_roi(roi, e)?;
    let ce = roi.extents();
    let image = Tensor::new(vec![1, ce[0], ce[1], ce[2]], crop_slice(sample.image.data(), e, roi))?;
    let labels = LabelMap::new(ce, crop_slice(sample.labels.data(), e, roi))?;
    Ok(Cropped {
        sample: VolumeSample {
            image,
            labels,
            patient_label: sample.patient_label,
            seed: sample.seed,
            meta: sample.meta.clone(),
        },
        roi: *roi,
    })
}

/// Crops every channel of a `[C, D, H, W]` tensor.
pub fn crop_tensor<T: Real>(x: &Tensor<T>, roi: &RoiBox) -> Result<Tensor<T>> {
    let s = x.shape();
    let e = [s[1], s[2], s[3]];
    check_roi(roi, e)?;
    let v = voxels(e);
    let ce = roi.extents();
    let mut data = Vec::with_capacity(s[0] * voxels(ce));
    for c in 0..s[0] {
        data.extend(crop_slice(&x.data()[c * v..(c + 1) * v], e, roi));
    }
    Tensor::new(vec![s[0], ce[0], ce[1], ce[2]], data)
}

/// Writes `crop` into a copy of `base` at `roi`.
pub fn paste_labels(base: &LabelMap, crop: &LabelMap, roi: &RoiBox) -> Result<LabelMap> {
    check_roi(roi, base.extents())?;
    if crop.extents() != roi.extents() {
        return Err(Error::Shape(format!(
            "crop {:?} does not match ROI {:?}",
            crop.extents(),
            roi.extents()
        )));
    }
    let mut out = base.clone();
    let e = base.extents();
    paste_slice(out.data_mut(), e, crop.data(), roi);
    Ok(out)
}

/// Writes a `[C, d, h, w]` crop into a copy of the `[C, D, H, W]` `base`.
pub fn paste_tensor<T: Real>(base: &Tensor<T>, crop: &Tensor<T>, roi: &RoiBox) -> Result<Tensor<T>> {
    let s = base.shape();
    let e = [s[1], s[2], s[3]];
    check_roi(roi, e)?;
    let ce = roi.extents();
    if crop.shape() != [s[0], ce[0], ce[1], ce[2]] {
        return Err(Error::Shape(format!("crop {:?} does not match ROI {ce:?}", crop.shape())));
    }
    let (v, cv) = (voxels(e), voxels(ce));
    let mut out = base.clone();
    for c in 0..s[0] {
        paste_slice(
            &mut out.data_mut()[c * v..(c + 1) * v],
            e,
            &crop.data()[c * cv..(c + 1) * cv],
            roi,
        );
    }
    Ok(out)
}
