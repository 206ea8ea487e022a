//! Two-stage training (U-Net pretraining, then the full model with a frozen
//! backbone warm-up), augmentation, and the S4C threshold protocol.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{crop_roi, locate_oracle, normalize_volume, unet_forward, RoiBox, COARSEST_STRIDE};
use crate::error::{Error, Result};
use crate::maskformer::{LossParts, LossWeights};
use crate::metrics::{auc, select_threshold, ThresholdChoice};
use crate::model::{
    forward, infer, init_params, loss, snapshot_localizer, unet_loss, ModelConfig, Preset, BACKBONE,
    LOCALIZER,
};
use crate::optim::{Radam, RadamConfig, Slot};
use crate::params::{ModelParams, ParamStore, Session};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::volume::{Extents, LabelMap, VolumeSample, TUMOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flips: bool,
    /// Intensities are scaled by a factor drawn from `1 ± intensity_scale`.
    pub intensity_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flips: true,
            intensity_scale: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flips: false,
            intensity_scale: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs of the full model (stage B).
    pub epochs: usize,
    /// Epochs of segmentation-only U-Net pretraining (stage A).
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub backbone_lr_multiplier: f64,
    /// Stage-B epochs during which the backbone stays frozen.
    pub freeze_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    pub optimizer: RadamConfig,
    /// Non-finite steps tolerated before training is declared diverged.
    pub max_skipped_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            pretrain_epochs: 20,
            lr: 1e-4,
            backbone_lr_multiplier: 0.1,
            freeze_epochs: 5,
            batch_size: 2,
            seed: 0,
            augment: AugmentConfig::default(),
            loss: LossWeights::default(),
            optimizer: RadamConfig::default(),
            max_skipped_steps: 10,
        }
    }
}

impl TrainConfig {
    /// Schedule of the original clinical training, kept for reference.
    pub fn paper_schedule() -> Self {
        Self {
            epochs: 1000,
            freeze_epochs: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.backbone_lr_multiplier >= 0.0) {
            return Err(Error::Config("train.lr must be positive and the multiplier non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if self.freeze_epochs > self.epochs {
            return Err(Error::Config(format!(
                "train.freeze_epochs ({}) exceeds train.epochs ({})",
                self.freeze_epochs, self.epochs
            )));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("optimizer betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(0.0..1.0).contains(&self.augment.intensity_scale) {
            return Err(Error::Config("augment.intensity_scale must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Mirrors a `[1, D, H, W]` image and its labels along spatial `axis`.
pub fn flip_axis(image: &Tensor<f32>, labels: &LabelMap, axis: usize) -> (Tensor<f32>, LabelMap) {
    let e = labels.extents();
    let strides = [e[1] * e[2], e[2], 1];
    let src = |i: usize| {
        let c = (i / strides[axis]) % e[axis];
        i - c * strides[axis] + (e[axis] - 1 - c) * strides[axis]
    };
    let n = e[0] * e[1] * e[2];
    let img: Vec<f32> = (0..n).map(|i| image.data()[src(i)]).collect();
    let lab: Vec<u8> = (0..n).map(|i| labels.data()[src(i)]).collect();
    (
        Tensor::new(image.shape().to_vec(), img).expect("same shape"),
        LabelMap::new(e, lab).expect("same labels"),
    )
}

/// Random axis flips and intensity scaling, applied consistently to labels.
pub fn augment(
    image: &Tensor<f32>,
    labels: &LabelMap,
    rng: &mut SplitMix64,
    cfg: &AugmentConfig,
) -> (Tensor<f32>, LabelMap) {
    let (mut img, mut lab) = (image.clone(), labels.clone());
    if cfg.flips {
        for axis in 0..3 {
            if rng.random_bool(0.5) {
                (img, lab) = flip_axis(&img, &lab, axis);
            }
        }
    }
    if cfg.intensity_scale > 0.0 {
        let s = rng.random_range(1.0 - cfg.intensity_scale..1.0 + cfg.intensity_scale) as f32;
        img.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    (img, lab)
}

/// Normalized input ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub patient_label: u8,
    pub roi: RoiBox,
}

/// Normalized full volume.
pub fn prepare_full(sample: &VolumeSample) -> Prepared {
    Prepared {
        image: normalize_volume(&sample.image),
        labels: sample.labels.clone(),
        patient_label: sample.patient_label,
        roi: RoiBox::full(sample.extents()),
    }
}

/// Crop of the normalized volume around `roi`, grown to network-compatible extents.
pub fn prepare_roi(sample: &VolumeSample, roi: &RoiBox) -> Result<Prepared> {
    let e = sample.extents();
    crate::backbone::check_extents(&e)?;
    let roi = roi.aligned(COARSEST_STRIDE, e);
    let normalized = VolumeSample {
        image: normalize_volume(&sample.image),
        labels: sample.labels.clone(),
        patient_label: sample.patient_label,
        seed: sample.seed,
        meta: sample.meta.clone(),
    };
    let c = crop_roi(&normalized, &roi)?;
    Ok(Prepared {
        image: c.sample.image,
        labels: c.sample.labels,
        patient_label: sample.patient_label,
        roi,
    })
}

/// Crop around the ground-truth stomach plus `margin`.
pub fn prepare_oracle(sample: &VolumeSample, margin: Extents) -> Result<Prepared> {
    prepare_roi(sample, &locate_oracle(&sample.labels, margin).roi)
}

/// Youden-optimal threshold on predicted tumor voxel counts.
pub fn s4c_select_threshold(volumes: &[f64], labels: &[u8]) -> Result<f64> {
    select_threshold(volumes, labels).map(|c| c.threshold)
}

/// Positive iff the tumor voxel count exceeds `threshold`.
pub fn s4c_classify(seg: &LabelMap, threshold: f64) -> (bool, usize) {
    let v = seg.count(TUMOR);
    (v as f64 > threshold, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Joint,
}

/// One JSON-lines training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: LossParts,
    pub val_auc: Option<f64>,
    pub lr: f64,
    pub backbone_lr: f64,
    pub frozen: bool,
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_auc: f64,
    pub params: ModelParams,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Radam,
    /// Epochs completed over both stages.
    pub epochs_done: usize,
    pub best: Option<BestSnapshot>,
    pub pretrain_log: Vec<EpochLog>,
    pub log: Vec<EpochLog>,
    pub skipped: usize,
}

const OPT_M: &str = "optim.m.";
const OPT_V: &str = "optim.v.";
const BEST: &str = "best.";

/// Scalar part of a [`TrainState`]; the tensors travel separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResumeMeta {
    pub epochs_done: usize,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    /// Optimizer step count per parameter.
    pub steps: BTreeMap<String, u64>,
    pub skipped: usize,
    pub pretrain_log: Vec<EpochLog>,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    /// Flattens the state into named tensors plus metadata.
    pub fn to_parts(&self) -> (ParamStore<f32>, ResumeMeta) {
        let mut tensors = self.params.clone();
        for (name, slot) in &self.optimizer.slots {
            tensors.insert(format!("{OPT_M}{name}"), slot.m.clone());
            tensors.insert(format!("{OPT_V}{name}"), slot.v.clone());
        }
        if let Some(b) = &self.best {
            for (name, t) in b.params.iter() {
                tensors.insert(format!("{BEST}{name}"), t.clone());
            }
        }
        let meta = ResumeMeta {
            epochs_done: self.epochs_done,
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            best_val_auc: self.best.as_ref().map(|b| b.val_auc),
            steps: self.optimizer.slots.iter().map(|(n, s)| (n.clone(), s.t)).collect(),
            skipped: self.skipped,
            pretrain_log: self.pretrain_log.clone(),
            log: self.log.clone(),
        };
        (tensors, meta)
    }

    /// Inverse of [`TrainState::to_parts`].
    pub fn from_parts(tensors: &ParamStore<f32>, meta: ResumeMeta, optimizer: RadamConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut best_params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in tensors.iter() {
            if let Some(n) = name.strip_prefix(OPT_M) {
                m.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix(OPT_V) {
                v.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix(BEST) {
                best_params.insert(n, t.clone());
            } else {
                params.insert(name, t.clone());
            }
        }
        let mut opt = Radam::new(optimizer);
        for (name, t) in &meta.steps {
            let (Some(mt), Some(vt)) = (m.remove(name), v.remove(name)) else {
                return Err(Error::Checkpoint(format!("optimizer moments of `{name}` are missing")));
            };
            opt.slots.insert(name.clone(), Slot { m: mt, v: vt, t: *t });
        }
        if !m.is_empty() || !v.is_empty() {
            return Err(Error::Checkpoint("optimizer moments without step counts".into()));
        }
        let best = match (meta.best_epoch, meta.best_val_auc) {
            (Some(epoch), Some(val_auc)) => Some(BestSnapshot {
                epoch,
                val_auc,
                params: best_params,
            }),
            (None, None) if best_params.is_empty() => None,
            _ => return Err(Error::Checkpoint("inconsistent best-epoch record".into())),
        };
        Ok(Self {
            params,
            optimizer: opt,
            epochs_done: meta.epochs_done,
            best,
            pretrain_log: meta.pretrain_log,
            log: meta.log,
            skipped: meta.skipped,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters, including the localizer copy.
    pub params: ModelParams,
    pub pretrain_log: Vec<EpochLog>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    /// Operating point selected on validation scores.
    pub threshold: ThresholdChoice,
    /// For unet-s4c, the same threshold in tumor voxels.
    pub volume_threshold: Option<f64>,
    pub skipped: usize,
}

fn has_head(preset: Preset) -> bool {
    preset != Preset::UnetS4c
}

fn is_backbone(name: &str) -> bool {
    name.starts_with("backbone.")
}

pub struct Trainer<'a> {
    pub preset: Preset,
    pub model: &'a ModelConfig,
    pub cfg: &'a TrainConfig,
    full: Vec<Prepared>,
    crops: Vec<Prepared>,
    val: Vec<Prepared>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        preset: Preset,
        model: &'a ModelConfig,
        cfg: &'a TrainConfig,
        train: &[&VolumeSample],
        val: &[&VolumeSample],
    ) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        if val.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        let pos = val.iter().filter(|s| s.patient_label == 1).count();
        if pos == 0 || pos == val.len() {
            return Err(Error::Config("validation split must contain both classes".into()));
        }
        let full = train.iter().map(|s| prepare_full(s)).collect();
        let crops = train
            .iter()
            .map(|s| prepare_oracle(s, model.roi_margin))
            .collect::<Result<_>>()?;
        let val = val
            .iter()
            .map(|s| prepare_oracle(s, model.roi_margin))
            .collect::<Result<_>>()?;
        Ok(Self {
            preset,
            model,
            cfg,
            full,
            crops,
            val,
        })
    }

    pub fn total_epochs(&self) -> usize {
        self.cfg.pretrain_epochs + self.cfg.epochs
    }

    pub fn init_state(&self) -> Result<TrainState> {
        Ok(TrainState {
            params: init_params(self.preset, self.model, self.cfg.seed)?,
            optimizer: Radam::new(self.cfg.optimizer.clone()),
            epochs_done: 0,
            best: None,
            pretrain_log: Vec::new(),
            log: Vec::new(),
            skipped: 0,
        })
    }

    /// Continues from a state that finished stage A under any preset with
    /// the same backbone, seed and training data. Stage A does not depend on
    /// the preset, so the result equals training this preset from scratch.
    pub fn fork(&self, pretrained: &TrainState) -> Result<TrainState> {
        if pretrained.epochs_done != self.cfg.pretrain_epochs {
            return Err(Error::Contract(format!(
                "fork needs a state at the end of pretraining ({} epochs), got {}",
                self.cfg.pretrain_epochs, pretrained.epochs_done
            )));
        }
        let mut state = self.init_state()?;
        for (name, t) in pretrained.params.iter().filter(|(n, _)| is_backbone(n)) {
            if state.params.get(name).map(|p| p.shape()) != Some(t.shape()) {
                return Err(Error::Contract(format!("pretrained `{name}` does not fit this model")));
            }
            state.params.insert(name, t.clone());
        }
        state.optimizer = pretrained.optimizer.clone();
        state.epochs_done = pretrained.epochs_done;
        state.pretrain_log = pretrained.pretrain_log.clone();
        state.skipped = pretrained.skipped;
        Ok(state)
    }

    /// Trains until all epochs are done, or until `stop_after` epochs in
    /// total have completed.
    pub fn run(&self, state: &mut TrainState, stop_after: Option<usize>) -> Result<()> {
        let end = stop_after.map_or(self.total_epochs(), |s| s.min(self.total_epochs()));
        while state.epochs_done < end {
            self.epoch(state)?;
        }
        Ok(())
    }

    fn lr_for(&self, name: &str, pretrain: bool) -> f64 {
        if !pretrain && has_head(self.preset) && is_backbone(name) {
            self.cfg.lr * self.cfg.backbone_lr_multiplier
        } else {
            self.cfg.lr
        }
    }

    fn epoch(&self, state: &mut TrainState) -> Result<()> {
        let e = state.epochs_done;
        let pretrain = e < self.cfg.pretrain_epochs;
        let stage_epoch = if pretrain { e } else { e - self.cfg.pretrain_epochs };
        if !pretrain && stage_epoch == 0 {
            snapshot_localizer(&mut state.params);
            state.optimizer.reset();
        }
        let frozen = !pretrain && has_head(self.preset) && stage_epoch < self.cfg.freeze_epochs;
        let data = if pretrain { &self.full } else { &self.crops };

        let mut rng = SplitMix64::keyed(self.cfg.seed, e as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = LossParts::default();
        let mut counted = 0usize;
        let mut skipped_here = 0usize;
        for batch in order.chunks(self.cfg.batch_size) {
            let mut acc: Option<ParamStore<f32>> = None;
            let mut finite = true;
            let mut batch_parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let (img, lab) = augment(&data[i].image, &data[i].labels, &mut rng, &self.cfg.augment);
                let filter = move |n: &str| {
                    if n.starts_with(LOCALIZER) {
                        false
                    } else if pretrain || frozen {
                        pretrain == is_backbone(n)
                    } else {
                        true
                    }
                };
                let mut s = Session::with_filter(&state.params, filter);
                let x = s.tape.constant(img);
                let (l, parts) = if pretrain {
                    let out = unet_forward(&mut s, x, BACKBONE)?;
                    unet_loss(&mut s, &out, &lab)?
                } else {
                    let out = forward(&mut s, x, self.preset, self.model)?;
                    loss(&mut s, &out, &lab, data[i].patient_label, &self.cfg.loss)?
                };
                let grads = s.gradients(l)?;
                finite &= parts.total.is_finite() && grads.is_finite();
                batch_parts.push(parts);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (name, g) in grads.iter() {
                            let t = a.get_mut(name).expect("same parameter set");
                            t.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|(_, g)| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            if !finite || state.optimizer.step(&mut state.params, &grads, |n| self.lr_for(n, pretrain)).is_err() {
                state.skipped += 1;
                skipped_here += 1;
                warn!("epoch {e}: skipped a step with non-finite loss or gradient");
                if state.skipped > self.cfg.max_skipped_steps {
                    return Err(Error::Diverged(format!(
                        "{} non-finite steps (limit {})",
                        state.skipped, self.cfg.max_skipped_steps
                    )));
                }
                continue;
            }
            for p in batch_parts {
                add_parts(&mut sums, &p);
                counted += 1;
            }
        }
        let mean = scale_parts(&sums, counted);

        let val_auc = if pretrain {
            None
        } else {
            let a = self.val_auc(&state.params)?;
            if state.best.as_ref().is_none_or(|b| a >= b.val_auc) {
                state.best = Some(BestSnapshot {
                    epoch: stage_epoch,
                    val_auc: a,
                    params: state.params.clone(),
                });
            }
            Some(a)
        };
        let record = EpochLog {
            epoch: stage_epoch,
            stage: if pretrain { Stage::Pretrain } else { Stage::Joint },
            loss: mean,
            val_auc,
            lr: self.cfg.lr,
            backbone_lr: if pretrain || !has_head(self.preset) {
                self.cfg.lr
            } else if frozen {
                0.0
            } else {
                self.cfg.lr * self.cfg.backbone_lr_multiplier
            },
            frozen,
            skipped_steps: skipped_here,
        };
        info!(
            "{} {:?} epoch {}: loss {:.4} val_auc {:?}",
            self.preset, record.stage, stage_epoch, record.loss.total, val_auc
        );
        if pretrain {
            state.pretrain_log.push(record);
        } else {
            state.log.push(record);
        }
        state.epochs_done += 1;
        Ok(())
    }

    /// Scores of the validation crops under `params`.
    pub fn val_scores(&self, params: &ModelParams) -> Result<Vec<f64>> {
        self.val
            .iter()
            .map(|p| infer(params, self.preset, self.model, &p.image).map(|r| r.score))
            .collect()
    }

    fn val_labels(&self) -> Vec<u8> {
        self.val.iter().map(|p| p.patient_label).collect()
    }

    pub fn val_auc(&self, params: &ModelParams) -> Result<f64> {
        auc(&self.val_scores(params)?, &self.val_labels())
    }

    /// Best-validation parameters and the validation operating threshold.
    pub fn finish(&self, state: TrainState) -> Result<TrainOutcome> {
        if state.epochs_done < self.total_epochs() {
            return Err(Error::Contract("training has not completed".into()));
        }
        let best = state
            .best
            .ok_or_else(|| Error::Contract("no validated epoch".into()))?;
        let scores = self.val_scores(&best.params)?;
        let labels = self.val_labels();
        let (threshold, volume_threshold) = if self.preset == Preset::UnetS4c {
            let volumes: Vec<f64> = scores.iter().map(|&s| crate::model::score_volume(s).round()).collect();
            let choice = select_threshold(&volumes, &labels)?;
            let t = choice.threshold;
            (
                ThresholdChoice {
                    threshold: volume_score_threshold(t),
                    ..choice
                },
                Some(t),
            )
        } else {
            (select_threshold(&scores, &labels)?, None)
        };
        Ok(TrainOutcome {
            params: best.params,
            pretrain_log: state.pretrain_log,
            log: state.log,
            best_epoch: best.epoch,
            best_val_auc: best.val_auc,
            threshold,
            volume_threshold,
            skipped: state.skipped,
        })
    }
}

/// Score-space image of a voxel-count threshold.
pub fn volume_score_threshold(t: f64) -> f64 {
    t / (t + 1.0)
}

fn add_parts(acc: &mut LossParts, p: &LossParts) {
    acc.total += p.total;
    acc.dice += p.dice;
    acc.ce += p.ce;
    acc.cls += p.cls;
    if acc.deep.len() < p.deep.len() {
        acc.deep.resize(p.deep.len(), 0.0);
    }
    acc.deep.iter_mut().zip(&p.deep).for_each(|(a, b)| *a += b);
}

fn scale_parts(p: &LossParts, n: usize) -> LossParts {
    let k = if n == 0 { f64::NAN } else { 1.0 / n as f64 };
    LossParts {
        total: p.total * k,
        dice: p.dice * k,
        ce: p.ce * k,
        cls: p.cls * k,
        deep: p.deep.iter().map(|d| d * k).collect(),
    }
}

/// Trains `preset` from scratch to completion.
pub fn train(
    preset: Preset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    train: &[&VolumeSample],
    val: &[&VolumeSample],
) -> Result<TrainOutcome> {
    let trainer = Trainer::new(preset, model, cfg, train, val)?;
    let mut state = trainer.init_state()?;
    trainer.run(&mut state, None)?;
    trainer.finish(state)
}

/// U-Net with a pooled-bottleneck classification head, trained by the same
/// two-stage harness.
pub fn joint_baseline(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[&VolumeSample],
    val: &[&VolumeSample],
) -> Result<TrainOutcome> {
    train(Preset::UnetJoint, model, cfg, train_set, val)
}

/// Tumor voxels from a unet-s4c score.
pub fn s4c_volume(score: f64) -> usize {
    crate::model::score_volume(score).round() as usize
}
