//! Cluster-induced mask transformer: decoder over the feature pyramid,
//! cluster assignment, segmentation and classification heads, joint loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{linear, linear_shapes, norm, norm_shapes, project};
use crate::params::{ParamStore, Session};
use crate::tensor::{ReduceKind, Real, Tape, Tensor, Var};
use crate::volume::{Extents, LabelMap, NUM_CLASSES};

/// Logits are clamped to this magnitude before softmax cross-entropy.
pub const LOGIT_CLAMP: f64 = 10.0;
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Object queries N.
    pub num_clusters: usize,
    /// Query channel width C.
    pub channels: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub cls_hidden: usize,
    /// Decoder stages, fed the `stages` finest pyramid levels coarse to fine.
    pub stages: usize,
    pub query_init_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_clusters: 8,
            channels: 32,
            heads: 4,
            ffn_hidden: 64,
            cls_hidden: 32,
            stages: 4,
            query_init_std: 0.02,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters < 2 {
            return Err(Error::Config(format!(
                "num_clusters must be at least 2, got {}",
                self.num_clusters
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels ({}) must be divisible by heads ({})",
                self.channels, self.heads
            )));
        }
        if self.stages == 0 || self.ffn_hidden == 0 || self.cls_hidden == 0 {
            return Err(Error::Config("decoder widths and stage count must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter shapes of the decoder and heads. `level_widths` lists the channel
/// counts of the pyramid levels each stage consumes; `pixel_width` is the
/// finest level's width.
pub fn decoder_param_shapes(
    cfg: &DecoderConfig,
    level_widths: &[usize],
    pixel_width: usize,
) -> Vec<(String, Vec<usize>)> {
    let (n, c) = (cfg.num_clusters, cfg.channels);
    let mut out = vec![
        ("decoder.queries".to_string(), vec![n, c]),
        ("decoder.pixel.proj.w".to_string(), vec![c, pixel_width]),
    ];
    out.extend(norm_shapes("decoder.pixel.norm", c));
    for (l, &cl) in level_widths.iter().enumerate() {
        let p = format!("decoder.s{l}");
        out.push((format!("{p}.cross.q.w"), vec![c, c]));
        out.push((format!("{p}.cross.k.w"), vec![c, cl]));
        out.push((format!("{p}.cross.v.w"), vec![c, cl]));
        out.extend(norm_shapes(&format!("{p}.cross.norm"), c));
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.attn.{m}.w"), vec![c, c]));
        }
        out.extend(norm_shapes(&format!("{p}.attn.norm"), c));
        out.extend(linear_shapes(&format!("{p}.ffn.l1"), c, cfg.ffn_hidden));
        out.extend(linear_shapes(&format!("{p}.ffn.l2"), cfg.ffn_hidden, c));
        out.extend(norm_shapes(&format!("{p}.ffn.norm"), c));
    }
    out.extend(linear_shapes("head.ck.l1", c, c));
    out.extend(linear_shapes("head.ck.l2", c, NUM_CLASSES));
    out.extend(norm_shapes("head.cls.norm_c", c));
    out.extend(norm_shapes("head.cls.norm_r", n));
    out.extend(linear_shapes("head.cls.l1", c + n, cfg.cls_hidden));
    out.extend(linear_shapes("head.cls.l2", cfg.cls_hidden, 2));
    out
}

/// Centers after each decoder stage plus the assignment logits each stage used.
#[derive(Clone, Debug)]
pub struct ClusterState {
    /// `[N, C]` final centers.
    pub centers: Var,
    /// Centers entering each stage.
    pub stage_inputs: Vec<Var>,
    /// `R_l: [N, voxels at stage l]`.
    pub per_stage_logits: Vec<Var>,
    pub stage_extents: Vec<Extents>,
}

#[derive(Clone, Copy, Debug)]
pub struct ClusterAssignment {
    /// `R: [N, V]`.
    pub logits: Var,
    /// `M = softmax_N(R)`.
    pub probs: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct JointPrediction {
    /// `Z: [K, V]`.
    pub seg_logits: Var,
    /// `[1, 2]`: normal, tumor.
    pub cls_logits: Var,
    /// `C̄: [C]`.
    pub cluster_path: Var,
    /// `R̄: [N]`.
    pub pixel_path: Var,
}

fn spatial(tape: &Tape<impl Real>, feat: Var) -> Result<(usize, Extents)> {
    let s = tape.shape(feat);
    if s.len() != 4 {
        return Err(Error::Shape(format!("feature map must be [c, D, H, W], got {s:?}")));
    }
    Ok((s[0], [s[1], s[2], s[3]]))
}

/// Multi-head self-attention across the `N` centers.
fn self_attention<T: Real>(
    s: &mut Session<'_, T>,
    x: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let c = s.tape.shape(x)[1];
    let d = c / heads;
    let q = project(s, x, &format!("{prefix}.q"))?;
    let k = project(s, x, &format!("{prefix}.k"))?;
    let v = project(s, x, &format!("{prefix}.v"))?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.tape.narrow(q, 1, h * d, d)?;
        let kh = s.tape.narrow(k, 1, h * d, d)?;
        let vh = s.tape.narrow(v, 1, h * d, d)?;
        let kt = s.tape.transpose(kh)?;
        let scores = s.tape.matmul(qh, kt)?;
        let scores = s.tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = s.tape.softmax(scores, 1)?;
        outs.push(s.tape.matmul(attn, vh)?);
    }
    let cat = s.tape.concat(&outs, 1)?;
    project(s, cat, &format!("{prefix}.o"))
}

/// One decoder block: hard-assignment cross-attention, self-attention, FFN.
/// Returns the updated centers and the scaled logits `Q·K^p/√C`.
pub fn decoder_stage<T: Real>(
    s: &mut Session<'_, T>,
    centers: Var,
    feat: Var,
    stage: usize,
    cfg: &DecoderConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let p = format!("decoder.s{stage}");
    let (cl, e) = spatial(&s.tape, feat)?;
    let x = s.tape.reshape(feat, vec![cl, e[0] * e[1] * e[2]])?;

    let q = project(s, centers, &format!("{p}.cross.q"))?;
    let wk = s.param(&format!("{p}.cross.k.w"))?;
    let wv = s.param(&format!("{p}.cross.v.w"))?;
    let kp = s.tape.matmul(wk, x)?;
    let vp = s.tape.matmul(wv, x)?;
    let logits = s.tape.matmul(q, kp)?;
    let logits = s.tape.scale(logits, 1.0 / (cfg.channels as f64).sqrt());
    let a = s.hard_assignment(logits, 0)?;
    let vt = s.tape.transpose(vp)?;
    let update = s.tape.matmul(a, vt)?;
    let h = s.tape.add(centers, update)?;
    let h = norm(s, h, &format!("{p}.cross.norm"), 1)?;

    let att = self_attention(s, h, &format!("{p}.attn"), cfg.heads)?;
    let h2 = s.tape.add(h, att)?;
    let h2 = norm(s, h2, &format!("{p}.attn.norm"), 1)?;

    let f = linear(s, h2, &format!("{p}.ffn.l1"))?;
    let f = s.tape.gelu(f);
    let f = linear(s, f, &format!("{p}.ffn.l2"))?;
    let h3 = s.tape.add(h2, f)?;
    let out = norm(s, h3, &format!("{p}.ffn.norm"), 1)?;
    Ok((out, logits))
}

/// Applies one decoder stage per level, coarse to fine, starting from the
/// learned queries.
pub fn run_decoder<T: Real>(
    s: &mut Session<'_, T>,
    levels: &[Var],
    cfg: &DecoderConfig,
) -> Result<ClusterState> {
    cfg.validate()?;
    if levels.len() != cfg.stages {
        return Err(Error::Config(format!(
            "decoder has {} stages but received {} pyramid levels",
            cfg.stages,
            levels.len()
        )));
    }
    let mut centers = s.param("decoder.queries")?;
    let mut state = ClusterState {
        centers,
        stage_inputs: Vec::with_capacity(levels.len()),
        per_stage_logits: Vec::with_capacity(levels.len()),
        stage_extents: Vec::with_capacity(levels.len()),
    };
    for (l, &feat) in levels.iter().enumerate() {
        state.stage_inputs.push(centers);
        state.stage_extents.push(spatial(&s.tape, feat)?.1);
        let (next, logits) = decoder_stage(s, centers, feat, l, cfg)?;
        state.per_stage_logits.push(logits);
        centers = next;
    }
    state.centers = centers;
    Ok(state)
}

/// Pixel features `F: [C, V]` from the finest decoder level.
pub fn pixel_features<T: Real>(s: &mut Session<'_, T>, finest: Var) -> Result<Var> {
    let (c0, e) = spatial(&s.tape, finest)?;
    let x = s.tape.reshape(finest, vec![c0, e[0] * e[1] * e[2]])?;
    let w = s.param("decoder.pixel.proj.w")?;
    let f = s.tape.matmul(w, x)?;
    norm(s, f, "decoder.pixel.norm", 0)
}

/// `R = centers·F`, `M = softmax_N(R)`.
pub fn assign<T: Real>(tape: &mut Tape<T>, centers: Var, features: Var) -> Result<ClusterAssignment> {
    let logits = tape.matmul(centers, features)?;
    let probs = tape.softmax(logits, 0)?;
    Ok(ClusterAssignment { logits, probs })
}

/// `C_K: [N, K]`, the per-cluster class logits.
pub fn cluster_classes<T: Real>(s: &mut Session<'_, T>, centers: Var) -> Result<Var> {
    let h = linear(s, centers, "head.ck.l1")?;
    let h = s.tape.gelu(h);
    linear(s, h, "head.ck.l2")
}

/// `Z = C_Kᵀ·M`.
pub fn segment<T: Real>(
    s: &mut Session<'_, T>,
    assignment: &ClusterAssignment,
    centers: Var,
) -> Result<Var> {
    let ck = cluster_classes(s, centers)?;
    let ckt = s.tape.transpose(ck)?;
    s.tape.matmul(ckt, assignment.probs)
}

/// Two-path classification from the center mean and the voxel-max of `R`.
pub fn classify<T: Real>(
    s: &mut Session<'_, T>,
    centers: Var,
    assignment: &ClusterAssignment,
) -> Result<(Var, Var, Var)> {
    let c_bar = s.tape.reduce(centers, 0, ReduceKind::Mean)?;
    let r_bar = s.tape.reduce(assignment.logits, 1, ReduceKind::Max)?;
    let (c, n) = (s.tape.shape(c_bar)[0], s.tape.shape(r_bar)[0]);
    let cr = s.tape.reshape(c_bar, vec![1, c])?;
    let rr = s.tape.reshape(r_bar, vec![1, n])?;
    let cn = norm(s, cr, "head.cls.norm_c", 1)?;
    let rn = norm(s, rr, "head.cls.norm_r", 1)?;
    let cat = s.tape.concat(&[cn, rn], 1)?;
    let h = linear(s, cat, "head.cls.l1")?;
    let h = s.tape.gelu(h);
    let logits = linear(s, h, "head.cls.l2")?;
    Ok((logits, c_bar, r_bar))
}

/// Full head on top of a decoded cluster state and the finest features.
pub fn predict<T: Real>(
    s: &mut Session<'_, T>,
    state: &ClusterState,
    finest: Var,
) -> Result<(JointPrediction, ClusterAssignment)> {
    let f = pixel_features(s, finest)?;
    let assignment = assign(&mut s.tape, state.centers, f)?;
    let seg_logits = segment(s, &assignment, state.centers)?;
    let (cls_logits, cluster_path, pixel_path) = classify(s, state.centers, &assignment)?;
    Ok((
        JointPrediction {
            seg_logits,
            cls_logits,
            cluster_path,
            pixel_path,
        },
        assignment,
    ))
}

/// Mean soft Dice loss over the foreground classes of `probs` and one-hot
/// `target`, both `[K, V]`.
pub fn soft_dice<T: Real>(tape: &mut Tape<T>, probs: Var, target: Var) -> Result<Var> {
    let k = tape.shape(probs)[0];
    let inter = tape.mul(probs, target)?;
    let inter = tape.reduce(inter, 1, ReduceKind::Sum)?;
    let psum = tape.reduce(probs, 1, ReduceKind::Sum)?;
    let ysum = tape.reduce(target, 1, ReduceKind::Sum)?;
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_SMOOTH);
    let den = tape.add(psum, ysum)?;
    let den = tape.add_scalar(den, DICE_SMOOTH);
    let ratio = tape.div(num, den)?;
    let fg = tape.narrow(ratio, 0, 1, k - 1)?;
    let m = tape.mean(fg);
    let neg = tape.neg(m);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean voxel cross-entropy of clamped `logits: [K, V]` against one-hot `target`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, target: Var) -> Result<Var> {
    let v = tape.shape(logits)[1];
    let z = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
    let lp = tape.log_softmax(z, 0)?;
    let picked = tape.mul(lp, target)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / v as f64))
}

/// Soft Dice and cross-entropy terms of `logits: [K, V]` against `target`.
pub fn seg_loss<T: Real>(tape: &mut Tape<T>, logits: Var, target: Var) -> Result<(Var, Var)> {
    let z = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
    let probs = tape.softmax(z, 0)?;
    let dice = soft_dice(tape, probs, target)?;
    let ce = cross_entropy(tape, logits, target)?;
    Ok((dice, ce))
}

/// Binary cross-entropy of `[1, 2]` logits against a patient label.
pub fn cls_loss<T: Real>(tape: &mut Tape<T>, logits: Var, label: u8) -> Result<Var> {
    if label > 1 {
        return Err(Error::Data(format!("patient label {label} is not 0 or 1")));
    }
    let z = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
    let lp = tape.log_softmax(z, 1)?;
    let picked = tape.narrow(lp, 1, label as usize, 1)?;
    let s = tape.sum(picked);
    Ok(tape.neg(s))
}

/// One-hot `[K, V]` constant for `labels`.
pub fn target_onehot<T: Real>(tape: &mut Tape<T>, labels: &LabelMap) -> Result<Var> {
    let v = labels.data().len();
    let oh = labels.one_hot::<T>().reshape(vec![NUM_CLASSES, v])?;
    Ok(tape.constant(oh))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub seg: f64,
    pub cls: f64,
    /// Weight of each deep-supervision stage.
    pub deep: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            cls: 1.0,
            deep: 0.25,
        }
    }
}

/// Scalar loss components after a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
    pub cls: f64,
    pub deep: Vec<f64>,
}

/// Joint segmentation, classification and deep-supervision loss.
pub fn joint_loss<T: Real>(
    s: &mut Session<'_, T>,
    pred: &JointPrediction,
    state: &ClusterState,
    labels: &LabelMap,
    patient_label: u8,
    w: &LossWeights,
) -> Result<(Var, LossParts)> {
    let target = target_onehot(&mut s.tape, labels)?;
    let (dice, ce) = seg_loss(&mut s.tape, pred.seg_logits, target)?;
    let cls = cls_loss(&mut s.tape, pred.cls_logits, patient_label)?;

    let seg = s.tape.add(dice, ce)?;
    let seg = s.tape.scale(seg, w.seg);
    let clsw = s.tape.scale(cls, w.cls);
    let mut total = s.tape.add(seg, clsw)?;

    let mut parts = LossParts {
        dice: s.tape.value(dice).item().to_f64_lossy(),
        ce: s.tape.value(ce).item().to_f64_lossy(),
        cls: s.tape.value(cls).item().to_f64_lossy(),
        ..LossParts::default()
    };
    if w.deep != 0.0 {
        for l in 0..state.per_stage_logits.len() {
            let term = deep_term(s, state, l, labels)?;
            parts.deep.push(s.tape.value(term).item().to_f64_lossy());
            let term = s.tape.scale(term, w.deep);
            total = s.tape.add(total, term)?;
        }
    }
    parts.total = s.tape.value(total).item().to_f64_lossy();
    Ok((total, parts))
}

/// Segmentation loss of stage `l`'s `C_Kᵀ·softmax_N(R_l)` against the labels
/// resampled to that stage's resolution.
pub fn deep_term<T: Real>(
    s: &mut Session<'_, T>,
    state: &ClusterState,
    l: usize,
    labels: &LabelMap,
) -> Result<Var> {
    let small = labels.resize_nearest(state.stage_extents[l]);
    let target = target_onehot(&mut s.tape, &small)?;
    let m = s.tape.softmax(state.per_stage_logits[l], 0)?;
    let ck = cluster_classes(s, state.stage_inputs[l])?;
    let ckt = s.tape.transpose(ck)?;
    let z = s.tape.matmul(ckt, m)?;
    let (dice, ce) = seg_loss(&mut s.tape, z, target)?;
    s.tape.add(dice, ce)
}

/// Relabels clusters: new cluster `i` is old cluster `perm[i]`. Permutes the
/// query rows and the pixel-path blocks of the classification head so the
/// model's outputs are unchanged.
pub fn permute_clusters<T: Real>(params: &ParamStore<T>, perm: &[usize]) -> Result<ParamStore<T>> {
    let q = params
        .get("decoder.queries")
        .ok_or_else(|| Error::Config("missing decoder.queries".into()))?;
    let (n, c) = (q.shape()[0], q.shape()[1]);
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    if sorted != (0..n).collect::<Vec<_>>() {
        return Err(Error::Config(format!("{perm:?} is not a permutation of 0..{n}")));
    }
    let mut out = params.clone();
    let rows = |t: &Tensor<T>, width: usize| -> Result<Tensor<T>> {
        let mut d = Vec::with_capacity(t.numel());
        for &p in perm {
            d.extend_from_slice(&t.data()[p * width..(p + 1) * width]);
        }
        Tensor::new(t.shape().to_vec(), d)
    };
    out.insert("decoder.queries", rows(q, c)?);
    for name in ["head.cls.norm_r.w", "head.cls.norm_r.b"] {
        let t = params.get(name).ok_or_else(|| Error::Config(format!("missing {name}")))?;
        out.insert(name, rows(t, 1)?);
    }
    let w1 = params
        .get("head.cls.l1.w")
        .ok_or_else(|| Error::Config("missing head.cls.l1.w".into()))?;
    let hidden = w1.shape()[1];
    let mut d = w1.data()[..c * hidden].to_vec();
    for &p in perm {
        d.extend_from_slice(&w1.data()[(c + p) * hidden..(c + p + 1) * hidden]);
    }
    out.insert("head.cls.l1.w", Tensor::new(w1.shape().to_vec(), d)?);
    Ok(out)
}
