//! Model presets, parameter initialization, forward pass, loss and scores.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{unet_forward, unet_param_shapes, UnetConfig, UnetOutput, LEVELS};
use crate::error::{Error, Result};
use crate::layers::{linear, linear_shapes, norm, norm_shapes};
use crate::maskformer::{
    cls_loss, joint_loss, predict, run_decoder, seg_loss, target_onehot, ClusterAssignment,
    ClusterState, DecoderConfig, JointPrediction, LossParts, LossWeights,
};
use crate::params::{ModelParams, ParamStore, Session};
use crate::rng::SplitMix64;
use crate::tensor::{PoolKind, Real, Tensor, Var};
use crate::volume::{Extents, LabelMap, NUM_CLASSES, TUMOR};

/// Prefix of the segmentation network's parameters.
pub const BACKBONE: &str = "backbone";
/// Prefix of the frozen stage-A copy used to find the stomach at test time.
pub const LOCALIZER: &str = "localizer";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// U-Net backbone, cluster mask transformer and dual-path classifier.
    Cimt,
    /// U-Net segmentation; classify by thresholding tumor volume.
    UnetS4c,
    /// U-Net with a pooled-bottleneck classification head.
    UnetJoint,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Cimt, Preset::UnetS4c, Preset::UnetJoint];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Cimt => "cimt",
            Preset::UnetS4c => "unet-s4c",
            Preset::UnetJoint => "unet-joint",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (cimt, unet-s4c, unet-joint)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub unet: UnetConfig,
    pub decoder: DecoderConfig,
    /// Hidden width of the unet-joint classification head.
    pub joint_hidden: usize,
    /// Voxels added around the located stomach before cropping.
    pub roi_margin: Extents,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            unet: UnetConfig::default(),
            decoder: DecoderConfig::default(),
            joint_hidden: 32,
            roi_margin: [2, 2, 2],
        }
    }
}

impl ModelConfig {
    /// Decoder widths at the published scale.
    pub fn paper_dims() -> Self {
        Self {
            decoder: DecoderConfig {
                channels: 128,
                heads: 8,
                ffn_hidden: 256,
                cls_hidden: 128,
                ..DecoderConfig::default()
            },
            joint_hidden: 128,
            ..Self::default()
        }
    }

    /// Tiny dimensions for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            unet: UnetConfig { widths: [3, 4, 4, 5] },
            decoder: DecoderConfig {
                num_clusters: 3,
                channels: 4,
                heads: 2,
                ffn_hidden: 5,
                cls_hidden: 4,
                stages: LEVELS,
                query_init_std: 0.5,
            },
            joint_hidden: 4,
            roi_margin: [2, 2, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unet.widths.iter().any(|&w| w == 0) || self.joint_hidden == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.decoder.stages > LEVELS {
            return Err(Error::Config(format!(
                "decoder stages ({}) exceed pyramid levels ({LEVELS})",
                self.decoder.stages
            )));
        }
        self.decoder.validate()
    }

    /// Widths of the pyramid levels consumed by the decoder, coarse to fine.
    fn decoder_level_widths(&self) -> Vec<usize> {
        let coarse_to_fine: Vec<usize> = self.unet.widths.iter().rev().copied().collect();
        coarse_to_fine[LEVELS - self.decoder.stages..].to_vec()
    }
}

/// Every parameter name and shape of `preset`.
pub fn param_shapes(preset: Preset, cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = unet_param_shapes(&cfg.unet, BACKBONE);
    match preset {
        Preset::Cimt => out.extend(crate::maskformer::decoder_param_shapes(
            &cfg.decoder,
            &cfg.decoder_level_widths(),
            cfg.unet.widths[0],
        )),
        Preset::UnetJoint => {
            let (coarse, fine) = (cfg.unet.widths[LEVELS - 1], cfg.unet.widths[0]);
            out.extend(norm_shapes("head.joint.norm_coarse", coarse));
            out.extend(norm_shapes("head.joint.norm_fine", fine));
            out.extend(linear_shapes("head.joint.l1", coarse + fine, cfg.joint_hidden));
            out.extend(linear_shapes("head.joint.l2", cfg.joint_hidden, 2));
        }
        Preset::UnetS4c => {}
    }
    out
}

/// Initial distribution of a parameter, decided by its name and shape.
fn init_std(name: &str, shape: &[usize], cfg: &ModelConfig) -> Option<f64> {
    let block = name.rsplit('.').nth(1).unwrap_or("");
    if name == "decoder.queries" {
        return Some(cfg.decoder.query_init_std);
    }
    if name.ends_with(".b") || block.starts_with("norm") {
        return None;
    }
    let fan_in = match shape.len() {
        5 => shape[1..].iter().product::<usize>(),
        // `W·X` projections of voxel features are stored `[out, in]`.
        2 if name.contains(".cross.k.") || name.contains(".cross.v.") || name.contains(".pixel.") => {
            shape[1]
        }
        2 => shape[0],
        _ => 1,
    };
    let gain = if shape.len() == 5 { 2.0 } else { 1.0 };
    Some((gain / fan_in as f64).sqrt())
}

/// Deterministic initialization: each tensor draws from its own stream keyed
/// by `(seed, name)`.
pub fn init_params(preset: Preset, cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(preset, cfg) {
        let n: usize = shape.iter().product();
        let block = name.rsplit('.').nth(1).unwrap_or("");
        let data = match init_std(&name, &shape, cfg) {
            Some(std) => {
                let mut rng = SplitMix64::named(seed, &name);
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            }
            None if block.starts_with("norm") && name.ends_with(".w") => vec![1.0; n],
            None => vec![0.0; n],
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// Checks that `params` holds exactly the tensors `preset` needs (plus an
/// optional localizer copy), with matching shapes.
pub fn check_params(preset: Preset, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let expected = param_shapes(preset, cfg);
    for (name, shape) in &expected {
        match params.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, preset {preset} expects {shape:?}",
                    t.shape()
                )))
            }
            None => {
                return Err(Error::Checkpoint(format!("preset {preset} needs tensor `{name}`")))
            }
        }
    }
    for name in params.names() {
        let known = expected.iter().any(|(n, _)| n == name)
            || name
                .strip_prefix(LOCALIZER)
                .is_some_and(|rest| params.contains(&format!("{BACKBONE}{rest}")));
        if !known {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` does not belong to preset {preset}"
            )));
        }
    }
    Ok(())
}

/// Copies the backbone tensors under the localizer prefix.
pub fn snapshot_localizer(params: &mut ModelParams) {
    let copies: Vec<(String, Tensor<f32>)> = params
        .iter()
        .filter_map(|(n, t)| {
            n.strip_prefix(BACKBONE)
                .map(|rest| (format!("{LOCALIZER}{rest}"), t.clone()))
        })
        .collect();
    for (n, t) in copies {
        params.insert(n, t);
    }
}

/// Prefix of the network that localizes the stomach for `params`.
pub fn localizer_prefix(params: &ModelParams) -> &'static str {
    if params.contains(&format!("{LOCALIZER}.head.w")) {
        LOCALIZER
    } else {
        BACKBONE
    }
}

/// Everything one forward pass produced.
pub struct Forward {
    pub unet: UnetOutput,
    /// `[K, V]` final segmentation logits.
    pub seg_logits: Var,
    /// `[1, 2]` classification logits (absent for unet-s4c).
    pub cls_logits: Option<Var>,
    pub cluster: Option<(ClusterState, JointPrediction, ClusterAssignment)>,
}

/// Runs `preset` on a normalized `[1, D, H, W]` input.
pub fn forward<T: Real>(
    s: &mut Session<'_, T>,
    x: Var,
    preset: Preset,
    cfg: &ModelConfig,
) -> Result<Forward> {
    let unet = unet_forward(s, x, BACKBONE)?;
    let v: usize = s.tape.shape(x)[1..].iter().product();
    match preset {
        Preset::UnetS4c => {
            let seg_logits = s.tape.reshape(unet.seg_logits, vec![NUM_CLASSES, v])?;
            Ok(Forward {
                unet,
                seg_logits,
                cls_logits: None,
                cluster: None,
            })
        }
        Preset::UnetJoint => {
            let seg_logits = s.tape.reshape(unet.seg_logits, vec![NUM_CLASSES, v])?;
            // Bottleneck average plus finest-level maximum.
            let finest = *unet.pyramid.levels.last().expect("pyramid levels");
            let mut paths = Vec::with_capacity(2);
            for (x, kind, name) in [
                (unet.bottleneck, PoolKind::Avg, "head.joint.norm_coarse"),
                (finest, PoolKind::Max, "head.joint.norm_fine"),
            ] {
                let p = s.tape.global_pool(x, kind)?;
                let c = s.tape.shape(p)[0];
                let p = s.tape.reshape(p, vec![1, c])?;
                paths.push(norm(s, p, name, 1)?);
            }
            let pooled = s.tape.concat(&paths, 1)?;
            let h = linear(s, pooled, "head.joint.l1")?;
            let h = s.tape.gelu(h);
            let cls = linear(s, h, "head.joint.l2")?;
            Ok(Forward {
                unet,
                seg_logits,
                cls_logits: Some(cls),
                cluster: None,
            })
        }
        Preset::Cimt => {
            let levels = &unet.pyramid.levels[LEVELS - cfg.decoder.stages..];
            let state = run_decoder(s, levels, &cfg.decoder)?;
            let finest = *unet.pyramid.levels.last().expect("pyramid levels");
            let (pred, assignment) = predict(s, &state, finest)?;
            Ok(Forward {
                seg_logits: pred.seg_logits,
                cls_logits: Some(pred.cls_logits),
                cluster: Some((state, pred, assignment)),
                unet,
            })
        }
    }
}

/// Training loss of `preset`.
pub fn loss<T: Real>(
    s: &mut Session<'_, T>,
    out: &Forward,
    labels: &LabelMap,
    patient_label: u8,
    w: &LossWeights,
) -> Result<(Var, LossParts)> {
    if let Some((state, pred, _)) = &out.cluster {
        return joint_loss(s, pred, state, labels, patient_label, w);
    }
    let target = target_onehot(&mut s.tape, labels)?;
    let (dice, ce) = seg_loss(&mut s.tape, out.seg_logits, target)?;
    let seg = s.tape.add(dice, ce)?;
    let mut total = s.tape.scale(seg, w.seg);
    let mut parts = LossParts {
        dice: s.tape.value(dice).item().to_f64_lossy(),
        ce: s.tape.value(ce).item().to_f64_lossy(),
        ..LossParts::default()
    };
    if let Some(cls_logits) = out.cls_logits {
        let cls = cls_loss(&mut s.tape, cls_logits, patient_label)?;
        parts.cls = s.tape.value(cls).item().to_f64_lossy();
        let c = s.tape.scale(cls, w.cls);
        total = s.tape.add(total, c)?;
    }
    parts.total = s.tape.value(total).item().to_f64_lossy();
    Ok((total, parts))
}

/// Segmentation-only loss of the U-Net head (backbone pretraining).
pub fn unet_loss<T: Real>(
    s: &mut Session<'_, T>,
    unet: &UnetOutput,
    labels: &LabelMap,
) -> Result<(Var, LossParts)> {
    let v = labels.data().len();
    let z = s.tape.reshape(unet.seg_logits, vec![NUM_CLASSES, v])?;
    let target = target_onehot(&mut s.tape, labels)?;
    let (dice, ce) = seg_loss(&mut s.tape, z, target)?;
    let total = s.tape.add(dice, ce)?;
    Ok((
        total,
        LossParts {
            total: s.tape.value(total).item().to_f64_lossy(),
            dice: s.tape.value(dice).item().to_f64_lossy(),
            ce: s.tape.value(ce).item().to_f64_lossy(),
            ..LossParts::default()
        },
    ))
}

/// Probability of the tumor class from `[1, 2]` logits.
pub fn tumor_probability(logits: &[f32]) -> f64 {
    let (a, b) = (f64::from(logits[0]), f64::from(logits[1]));
    1.0 / (1.0 + (a - b).exp())
}

/// Monotone map of a tumor voxel count into `[0, 1)`.
pub fn volume_score(tumor_voxels: usize) -> f64 {
    let v = tumor_voxels as f64;
    v / (v + 1.0)
}

/// Inverse of [`volume_score`].
pub fn score_volume(score: f64) -> f64 {
    score / (1.0 - score)
}

/// Per-case inference result on a (cropped) input.
#[derive(Clone, Debug)]
pub struct Inference {
    pub labels: LabelMap,
    pub tumor_voxels: usize,
    /// Tumor probability; volume score for unet-s4c.
    pub score: f64,
}

/// Forward pass without gradients on a normalized `[1, D, H, W]` volume.
pub fn infer(params: &ModelParams, preset: Preset, cfg: &ModelConfig, x: &Tensor<f32>) -> Result<Inference> {
    let mut s = Session::inference(params);
    let xv = s.tape.constant(x.clone());
    let out = forward(&mut s, xv, preset, cfg)?;
    let e = &x.shape()[1..];
    let z = s.tape.value(out.seg_logits).clone().reshape(vec![NUM_CLASSES, e[0], e[1], e[2]])?;
    let labels = crate::backbone::argmax_labels(&z)?;
    let tumor_voxels = labels.count(TUMOR);
    let score = match out.cls_logits {
        Some(c) => tumor_probability(s.tape.value(c).data()),
        None => volume_score(tumor_voxels),
    };
    Ok(Inference {
        labels,
        tumor_voxels,
        score,
    })
}
