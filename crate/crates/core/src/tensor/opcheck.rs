//! Finite-difference check of every differentiable tape op on random inputs.

use super::{grad_check, PoolKind, ReduceKind, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::SplitMix64;

/// Central-difference step used by [`check_ops`].
pub const OP_EPS: f64 = 1e-5;

/// Uniform entries in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect()).expect("shape matches data")
}

type OpFn<'a> = &'a dyn Fn(&mut Tape<f64>, Var) -> Result<Var>;

/// Maximum relative gradient error of each op, with inputs drawn from `seed`.
pub fn check_ops(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let mut run = |name: &'static str, x: Tensor<f64>, f: OpFn<'_>| -> Result<()> {
        out.push((name, grad_check(f, &x, OP_EPS)?.max_rel_err));
        Ok(())
    };
    let random = random_tensor;
    let b = random(&[3, 4], seed ^ 0xb);
    let w = random(&[2, 2, 3, 3, 3], seed ^ 0xc);
    let gain = random(&[4], seed ^ 0xd);
    let bias = random(&[4], seed ^ 0x10);
    let pos_vals: Vec<f64> = random(&[3, 4], seed).to_f64_vec().iter().map(|v| v.abs() + 0.5).collect();
    let pos = Tensor::from_f64(vec![3, 4], &pos_vals)?;
    let vol = random(&[2, 4, 4, 4], seed ^ 0x11);
    // Weighted sum keeps gradients away from degenerate constants.
    let weights = random(&[3, 4], seed ^ 0xe);
    let wsum = move |t: &mut Tape<f64>, y: Var| -> Result<Var> {
        let n = t.value(y).numel();
        let wv = t.constant(Tensor::new(t.shape(y).to_vec(), weights.data().iter().cycle().take(n).copied().collect())?);
        let p = t.mul(y, wv)?;
        Ok(t.sum(p))
    };
    let square_sum = |t: &mut Tape<f64>, y: Var| -> Result<Var> {
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    };
    let x = random(&[3, 4], seed);

    run("add", x.clone(), &|t, v| {
        let c = t.constant(b.clone());
        let y = t.add(v, c)?;
        let y = t.mul(y, y)?;
        wsum(t, y)
    })?;
    run("sub", x.clone(), &|t, v| {
        let c = t.constant(b.clone());
        let y = t.sub(c, v)?;
        let y = t.mul(y, y)?;
        wsum(t, y)
    })?;
    run("mul_broadcast", x.clone(), &|t, v| {
        let c = t.constant(gain.clone());
        let y = t.mul(v, c)?;
        wsum(t, y)
    })?;
    run("div", pos.clone(), &|t, v| {
        let c = t.constant(b.clone());
        let y = t.div(c, v)?;
        wsum(t, y)
    })?;
    run("exp", x.clone(), &|t, v| {
        let y = t.exp(v);
        wsum(t, y)
    })?;
    run("log", pos, &|t, v| {
        let y = t.log(v);
        wsum(t, y)
    })?;
    run("gelu", x.clone(), &|t, v| {
        let y = t.gelu(v);
        wsum(t, y)
    })?;
    run("scale", x.clone(), &|t, v| {
        let y = t.scale(v, -1.7);
        let y = t.mul(y, y)?;
        wsum(t, y)
    })?;
    run("matmul", x.clone(), &|t, v| {
        let c = t.constant(random(&[4, 3], seed ^ 0xf));
        let y = t.matmul(v, c)?;
        square_sum(t, y)
    })?;
    run("transpose", x.clone(), &|t, v| {
        let y = t.transpose(v)?;
        let c = t.constant(b.clone());
        let z = t.matmul(y, c)?;
        square_sum(t, z)
    })?;
    run("softmax", x.clone(), &|t, v| {
        let y = t.softmax(v, 1)?;
        wsum(t, y)
    })?;
    run("log_softmax", x.clone(), &|t, v| {
        let y = t.log_softmax(v, 0)?;
        wsum(t, y)
    })?;
    run("layer_norm", x.clone(), &|t, v| {
        let g = t.constant(gain.clone());
        let bb = t.constant(bias.clone());
        let y = t.layer_norm(v, g, bb, 1)?;
        wsum(t, y)
    })?;
    run("layer_norm_gain", gain.clone(), &|t, g| {
        let xv = t.constant(x.clone());
        let bb = t.constant(bias.clone());
        let y = t.layer_norm(xv, g, bb, 1)?;
        wsum(t, y)
    })?;
    run("reduce_sum", x.clone(), &|t, v| {
        let y = t.reduce(v, 0, ReduceKind::Sum)?;
        square_sum(t, y)
    })?;
    run("reduce_mean", x.clone(), &|t, v| {
        let y = t.reduce(v, 1, ReduceKind::Mean)?;
        square_sum(t, y)
    })?;
    run("reduce_max", x.clone(), &|t, v| {
        let y = t.reduce(v, 1, ReduceKind::Max)?;
        square_sum(t, y)
    })?;
    run("mean", x.clone(), &|t, v| {
        let y = t.mul(v, v)?;
        Ok(t.mean(y))
    })?;
    run("concat_narrow", x.clone(), &|t, v| {
        let c = t.constant(b.clone());
        let y = t.concat(&[v, c, v], 1)?;
        let y = t.narrow(y, 1, 2, 7)?;
        square_sum(t, y)
    })?;
    run("reshape", x.clone(), &|t, v| {
        let y = t.reshape(v, vec![2, 6])?;
        square_sum(t, y)
    })?;
    run("conv3", vol.clone(), &|t, v| {
        let c = t.constant(w.clone());
        let y = t.conv3(v, c, 1, 1)?;
        square_sum(t, y)
    })?;
    run("conv3_weight", w.clone(), &|t, v| {
        let c = t.constant(vol.clone());
        let y = t.conv3(c, v, 2, 1)?;
        square_sum(t, y)
    })?;
    run("interpolate", random(&[2, 2, 3, 2], seed ^ 0x12), &|t, v| {
        let y = t.interpolate_nearest(v, &[4, 3, 5])?;
        square_sum(t, y)
    })?;
    run("avg_pool", random(&[2, 4, 4, 4], seed ^ 0x13), &|t, v| {
        let y = t.pool3(v, PoolKind::Avg, 2, 2)?;
        square_sum(t, y)
    })?;
    Ok(out)
}
