//! Windowed ViT blocks: multi-head softmax attention restricted to the
//! tokens of one window, followed by a GELU MLP.

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Binding, ParamBuilder, ParamId, INIT_STD};

#[derive(Clone, Debug)]
pub struct VitBlock {
    /// Per-window-slot embedding, shared by all windows.
    pub pos: ParamId,
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
    pub heads: usize,
    pub window_tokens: usize,
}

impl VitBlock {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        dim: usize,
        heads: usize,
        ratio: usize,
        window_tokens: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            pos: b.normal(format!("{name}.pos"), &[window_tokens, dim], INIT_STD),
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim),
            qkv: Linear::new(b, &format!("{name}.qkv"), dim, 3 * dim),
            proj: Linear::new(b, &format!("{name}.proj"), dim, dim),
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim),
            fc1: Linear::new(b, &format!("{name}.fc1"), dim, ratio * dim),
            fc2: Linear::new(b, &format!("{name}.fc2"), ratio * dim, dim),
            dim,
            heads,
            window_tokens,
        })
    }

    fn check_window(&self, x: &Var<'_>) -> Result<()> {
        let shape = x.shape();
        if shape != [self.window_tokens, self.dim] {
            return shape_err(
                "vit_block",
                format!("expected one window [{} x {}], got {:?}", self.window_tokens, self.dim, shape),
            );
        }
        Ok(())
    }

    /// Attention weights per head (`[tokens x tokens]`, rows sum to one) and
    /// the attended values, for one window.
    fn attend<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<(Vec<Var<'t>>, Var<'t>)> {
        let h = self.ln1.forward(bind, &x.add(&bind.p(self.pos))?)?;
        let qkv = self.qkv.forward(bind, &h)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = Vec::with_capacity(self.heads);
        let mut heads = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = qkv.slice_cols(head * dh, (head + 1) * dh)?;
            let k = qkv.slice_cols(self.dim + head * dh, self.dim + (head + 1) * dh)?;
            let v = qkv.slice_cols(2 * self.dim + head * dh, 2 * self.dim + (head + 1) * dh)?;
            let p = q.matmul(&k.transpose()?)?.scale(scale)?.softmax_lastdim()?;
            heads.push(p.matmul(&v)?);
            probs.push(p);
        }
        Ok((probs, Var::concat_cols(&heads)?))
    }

    /// Softmax attention weights of each head for one window.
    pub fn attention_weights<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Vec<Var<'t>>> {
        self.check_window(x)?;
        Ok(self.attend(bind, x)?.0)
    }

    /// Attention branch for one window (pre-LN), without the residual.
    pub fn window_self_attention<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        self.check_window(x)?;
        let (_, att) = self.attend(bind, x)?;
        self.proj.forward(bind, &att)
    }

    /// Attention then MLP, both residual, for one window.
    pub fn forward_window<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let x = x.add(&self.window_self_attention(bind, x)?)?;
        let h = self.fc1.forward(bind, &self.ln2.forward(bind, &x)?)?.gelu()?;
        x.add(&self.fc2.forward(bind, &h)?)
    }

    /// Applies the block independently to each of the `[window_tokens x c]`
    /// row groups of `x`.
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let (rows, _) = x.value().dims2()?;
        if rows % self.window_tokens != 0 {
            return shape_err("vit_block", format!("{rows} tokens is not a whole number of windows"));
        }
        let n = rows / self.window_tokens;
        if n == 1 {
            return self.forward_window(bind, x);
        }
        let outs = (0..n)
            .map(|i| self.forward_window(bind, &x.slice_rows(i * self.window_tokens, (i + 1) * self.window_tokens)?))
            .collect::<Result<Vec<_>>>()?;
        Var::concat_rows(&outs)
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        let mut v = vec![self.proj.weight, self.fc2.weight];
        v.extend(self.proj.bias);
        v.extend(self.fc2.bias);
        v
    }
}
