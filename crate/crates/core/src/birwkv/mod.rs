//! Bi-RWKV block: bidirectional WKV spatial mix followed by a gated
//! squared-ReLU channel mix, both pre-LN residual.

mod wkv;

use std::rc::Rc;

pub use wkv::{bi_wkv_backward, bi_wkv_naive, bi_wkv_scan, WkvForward, WkvGrads};

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Binding, ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// Default channel-mix hidden ratio.
pub const HIDDEN_RATIO: usize = 4;

/// Tape op for the scan kernel. `w` must already be positive.
pub fn bi_wkv<'t>(k: &Var<'t>, v: &Var<'t>, w: &Var<'t>, u: &Var<'t>) -> Result<Var<'t>> {
    let (kv, vv, wv, uv) = (k.value(), v.value(), w.value(), u.value());
    let (t, c) = kv.dims2()?;
    if vv.shape() != kv.shape() {
        return shape_err("bi_wkv", format!("k {:?} vs v {:?}", kv.shape(), vv.shape()));
    }
    let fwd = Rc::new(bi_wkv_scan(kv.data(), vv.data(), wv.data(), uv.data(), t, c)?);
    let out = Tensor::new(vec![t, c], fwd.out.clone())?;
    k.tape().custom(
        "bi_wkv",
        out,
        &[*k, *v, *w, *u],
        Box::new(move |g| {
            let gr = bi_wkv_backward(kv.data(), vv.data(), wv.data(), uv.data(), &fwd, g, t, c);
            vec![Some(gr.k), Some(gr.v), Some(gr.w), Some(gr.u)]
        }),
    )
}

#[derive(Clone, Debug)]
pub struct BiWkvParams {
    /// `w = exp(w_raw)` keeps the decay non-negative.
    pub w_raw: ParamId,
    pub u: ParamId,
}

impl BiWkvParams {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize) -> Self {
        // Spread decays across channels so some stay global and some local.
        let w_raw = (0..c)
            .map(|d| {
                let frac = if c > 1 { d as f64 / (c - 1) as f64 } else { 0.0 };
                (0.5 + 7.5 * frac).ln()
            })
            .collect();
        Self {
            w_raw: b.tensor(format!("{name}.w_raw"), Tensor::new(vec![c], w_raw).expect("len c")),
            u: b.zeros(format!("{name}.u"), &[c]),
        }
    }

    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, k: &Var<'t>, v: &Var<'t>) -> Result<Var<'t>> {
        let w = bind.p(self.w_raw).exp()?;
        bi_wkv(k, v, &w, &bind.p(self.u))
    }
}

#[derive(Clone, Debug)]
pub struct SpatialMix {
    pub ln: LayerNorm,
    pub receptance: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub wkv: BiWkvParams,
}

impl SpatialMix {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize) -> Self {
        Self {
            ln: LayerNorm::new(b, &format!("{name}.ln"), c),
            receptance: Linear::no_bias(b, &format!("{name}.receptance"), c, c),
            key: Linear::no_bias(b, &format!("{name}.key"), c, c),
            value: Linear::no_bias(b, &format!("{name}.value"), c, c),
            output: Linear::new(b, &format!("{name}.output"), c, c),
            wkv: BiWkvParams::new(b, &format!("{name}.wkv"), c),
        }
    }

    /// `Proj_out(sigmoid(R) * BiWKV(K, V))` on the normalized input, without
    /// the residual.
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.ln.forward(bind, x)?;
        let r = self.receptance.forward(bind, &h)?.sigmoid()?;
        let k = self.key.forward(bind, &h)?;
        let v = self.value.forward(bind, &h)?;
        let att = self.wkv.forward(bind, &k, &v)?;
        self.output.forward(bind, &r.mul(&att)?)
    }
}

#[derive(Clone, Debug)]
pub struct ChannelMix {
    pub ln: LayerNorm,
    pub receptance: Linear,
    pub key: Linear,
    pub down: Linear,
}

impl ChannelMix {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize, ratio: usize) -> Self {
        Self {
            ln: LayerNorm::new(b, &format!("{name}.ln"), c),
            receptance: Linear::no_bias(b, &format!("{name}.receptance"), c, c),
            key: Linear::no_bias(b, &format!("{name}.key"), c, ratio * c),
            down: Linear::new(b, &format!("{name}.down"), ratio * c, c),
        }
    }

    /// `sigmoid(R) * Proj_down(relu(K)^2)`, token-wise, without the residual.
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.ln.forward(bind, x)?;
        let r = self.receptance.forward(bind, &h)?.sigmoid()?;
        let k = self.key.forward(bind, &h)?.squared_relu()?;
        r.mul(&self.down.forward(bind, &k)?)
    }
}

#[derive(Clone, Debug)]
pub struct BiRwkvBlock {
    pub spatial: SpatialMix,
    pub channel: ChannelMix,
}

impl BiRwkvBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize, ratio: usize) -> Self {
        Self {
            spatial: SpatialMix::new(b, &format!("{name}.spatial"), c),
            channel: ChannelMix::new(b, &format!("{name}.channel"), c, ratio),
        }
    }

    /// Accepts any sequence length; parameters do not depend on it.
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let x = x.add(&self.spatial.forward(bind, x)?)?;
        x.add(&self.channel.forward(bind, &x)?)
    }

    /// Names of the projections whose zeroing turns the block into the
    /// identity map.
    pub fn output_params(&self) -> Vec<ParamId> {
        let mut v = vec![self.spatial.output.weight, self.channel.down.weight];
        v.extend(self.spatial.output.bias);
        v.extend(self.channel.down.bias);
        v
    }
}
