//! Finite-difference checks of each preset's full training loss on a tiny
//! model, with the hard cluster assignment frozen between evaluations.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::maskformer::LossWeights;
use crate::model::{forward, init_params, loss, ModelConfig, Preset};
use crate::params::{AssignmentMode, ParamStore, Session};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::volume::{LabelMap, NUM_CLASSES};

/// Side of the cubic micro input.
pub const MICRO_EXTENT: usize = 8;
pub const EPS: f64 = 1e-6;
/// Gradient magnitude below which errors are measured in absolute terms;
/// central differences of an O(1) loss carry about 1e-10 of roundoff.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Tolerance on the relative error of an end-to-end check.
pub fn tolerance(_preset: Preset) -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub preset: Preset,
    pub seed: u64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub tensors: Vec<TensorCheck>,
    /// With deep supervision off, the cross-attention query and key
    /// projections only feed the argmax; their gradients must be exactly 0.
    pub qk_zero: Option<bool>,
    pub passed: bool,
}

struct Problem {
    params: ParamStore<f64>,
    x: Tensor<f64>,
    labels: LabelMap,
    patient_label: u8,
    cfg: ModelConfig,
}

/// Relative error whose denominator never drops below [`GRAD_FLOOR`].
pub fn scaled_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn problem(preset: Preset, seed: u64) -> Result<Problem> {
    let cfg = ModelConfig::micro();
    let mut params = init_params(preset, &cfg, seed)?.cast::<f64>();
    let mut rng = SplitMix64::named(seed, "gradcheck");
    let jitter = Normal::new(0.0, 0.1).expect("valid std");
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += jitter.sample(&mut rng));
    }
    let n = MICRO_EXTENT.pow(3);
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    let x = Tensor::new(
        vec![1, MICRO_EXTENT, MICRO_EXTENT, MICRO_EXTENT],
        (0..n).map(|_| unit.sample(&mut rng)).collect(),
    )?;
    let labels = LabelMap::new(
        [MICRO_EXTENT; 3],
        (0..n).map(|_| rng.random_range(0..NUM_CLASSES as u8)).collect(),
    )?;
    Ok(Problem {
        params,
        x,
        labels,
        patient_label: rng.random_range(0..2),
        cfg,
    })
}

fn loss_value(
    p: &Problem,
    params: &ParamStore<f64>,
    preset: Preset,
    w: &LossWeights,
    replay: &[Tensor<f64>],
) -> Result<f64> {
    let mut s = Session::inference(params);
    s.assignments = AssignmentMode::Replay(replay.to_vec());
    let x = s.tape.constant(p.x.clone());
    let out = forward(&mut s, x, preset, &p.cfg)?;
    let (_, parts) = loss(&mut s, &out, &p.labels, p.patient_label, w)?;
    Ok(parts.total)
}

fn analytic(
    p: &Problem,
    preset: Preset,
    w: &LossWeights,
) -> Result<(ParamStore<f64>, Vec<Tensor<f64>>)> {
    let mut s = Session::training(&p.params);
    s.assignments = AssignmentMode::Record(Vec::new());
    let x = s.tape.constant(p.x.clone());
    let out = forward(&mut s, x, preset, &p.cfg)?;
    let (l, _) = loss(&mut s, &out, &p.labels, p.patient_label, w)?;
    let grads = s.gradients(l)?;
    let recorded = match std::mem::take(&mut s.assignments) {
        AssignmentMode::Record(v) => v,
        _ => unreachable!("assignment mode set above"),
    };
    Ok((grads, recorded))
}

/// Checks up to `per_tensor` coordinates of every parameter tensor.
pub fn check_preset(preset: Preset, seed: u64, per_tensor: usize) -> Result<GradcheckSummary> {
    let p = problem(preset, seed)?;
    let w = LossWeights::default();
    let (grads, recorded) = analytic(&p, preset, &w)?;
    let tol = tolerance(preset);
    let mut rng = SplitMix64::named(seed, "gradcheck-coords");
    let mut probe = p.params.clone();
    let mut tensors = Vec::new();
    for (name, g) in grads.iter() {
        let n = g.numel();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = probe.get(name).expect("param").data()[c];
            probe.get_mut(name).expect("param").data_mut()[c] = orig + EPS;
            let up = loss_value(&p, &probe, preset, &w, &recorded)?;
            probe.get_mut(name).expect("param").data_mut()[c] = orig - EPS;
            let down = loss_value(&p, &probe, preset, &w, &recorded)?;
            probe.get_mut(name).expect("param").data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max(scaled_error(g.data()[c], numeric));
        }
        tensors.push(TensorCheck {
            name: name.to_string(),
            coords: coords.len(),
            max_rel_err: worst,
            passed: worst < tol,
        });
    }

    let qk_zero = if preset == Preset::Cimt {
        let no_deep = LossWeights { deep: 0.0, ..w };
        let (g, _) = analytic(&p, preset, &no_deep)?;
        let zero = g
            .iter()
            .filter(|(n, _)| n.contains(".cross.q.") || n.contains(".cross.k."))
            .all(|(_, t)| t.data().iter().all(|&v| v == 0.0));
        Some(zero)
    } else {
        None
    };
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    let passed = tensors.iter().all(|t| t.passed) && qk_zero != Some(false);
    Ok(GradcheckSummary {
        preset,
        seed,
        tolerance: tol,
        max_rel_err,
        tensors,
        qk_zero,
        passed,
    })
}
