//! Named dense layers bound through a [`Session`].

use crate::error::Result;
use crate::params::Session;
use crate::tensor::{Real, Var};

/// `x·W + b` for `x: [n, in]`, `W = {name}.w: [in, out]`, `b = {name}.b: [out]`.
pub fn linear<T: Real>(s: &mut Session<'_, T>, x: Var, name: &str) -> Result<Var> {
    let w = s.param(&format!("{name}.w"))?;
    let b = s.param(&format!("{name}.b"))?;
    let y = s.tape.matmul(x, w)?;
    s.tape.add(y, b)
}

/// `x·W` without bias.
pub fn project<T: Real>(s: &mut Session<'_, T>, x: Var, name: &str) -> Result<Var> {
    let w = s.param(&format!("{name}.w"))?;
    s.tape.matmul(x, w)
}

/// Layer norm along `axis` with gain `{name}.w` and bias `{name}.b`.
pub fn norm<T: Real>(s: &mut Session<'_, T>, x: Var, name: &str, axis: usize) -> Result<Var> {
    let g = s.param(&format!("{name}.w"))?;
    let b = s.param(&format!("{name}.b"))?;
    s.tape.layer_norm(x, g, b, axis)
}

pub fn linear_shapes(name: &str, fan_in: usize, fan_out: usize) -> [(String, Vec<usize>); 2] {
    [
        (format!("{name}.w"), vec![fan_in, fan_out]),
        (format!("{name}.b"), vec![fan_out]),
    ]
}

pub fn norm_shapes(name: &str, width: usize) -> [(String, Vec<usize>); 2] {
    [
        (format!("{name}.w"), vec![width]),
        (format!("{name}.b"), vec![width]),
    ]
}
