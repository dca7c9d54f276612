//! Small layer building blocks shared by the transform and entropy model.

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Binding, ParamBuilder, ParamId};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = b.weight(format!("{name}.weight"), &[in_dim, out_dim]);
        let bias = Some(b.zeros(format!("{name}.bias"), &[out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn no_bias(b: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = b.weight(format!("{name}.weight"), &[in_dim, out_dim]);
        Self { weight, bias: None, in_dim, out_dim }
    }

    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let bias = self.bias.map(|b| bind.p(b));
        x.linear(&bind.p(self.weight), bias.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        Self { gamma: b.full(format!("{name}.gamma"), &[dim], 1.0), beta: b.zeros(format!("{name}.beta"), &[dim]) }
    }

    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&bind.p(self.gamma), &bind.p(self.beta), LN_EPS)
    }
}

/// Two linear layers with a GELU between; the hidden width is the larger
/// of the two end widths.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let hidden = in_dim.max(out_dim);
        Self { fc1: Linear::new(b, &format!("{name}.fc1"), in_dim, hidden), fc2: Linear::new(b, &format!("{name}.fc2"), hidden, out_dim) }
    }

    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(bind, x)?.gelu()?;
        self.fc2.forward(bind, &h)
    }
}
