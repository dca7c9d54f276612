//! Small convolutional stand-ins for the perceptual feature network and the
//! adversarial critic. Every convolution has stride equal to its kernel.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::image::dims;
use crate::nn::Linear;
use crate::params::{Binding, ParamBuilder, ParamStore};

#[derive(Clone, Debug)]
struct ConvLayer {
    kernel: usize,
    linear: Linear,
}

/// Stack of non-overlapping convolutions with GELU between layers.
#[derive(Clone, Debug)]
pub struct ConvStack {
    layers: Vec<ConvLayer>,
}

/// `[3 x H x W]` to `[(H/k * W/k) x 3kk]` raster-ordered patches.
fn image_patches<'t>(image: &Var<'t>, k: usize) -> Result<(Var<'t>, usize, usize)> {
    let shape = image.shape();
    let (h, w) = match shape.as_slice() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::Shape { op: "conv", detail: format!("expected [3, H, W], got {s:?}") }),
    };
    let (rows, cols) = (h / k, w / k);
    let mut idx = Vec::with_capacity(rows * cols * 3 * k * k);
    for ty in 0..rows {
        for tx in 0..cols {
            for ch in 0..3 {
                for py in 0..k {
                    let base = ch * h * w + (ty * k + py) * w + tx * k;
                    idx.extend(base..base + k);
                }
            }
        }
    }
    Ok((image.gather(Rc::new(idx), &[rows * cols, 3 * k * k])?, rows, cols))
}

/// Raster feature map `[(rows * cols) x c]` to `k x k` patches.
fn feature_patches<'t>(x: &Var<'t>, rows: usize, cols: usize, k: usize) -> Result<(Var<'t>, usize, usize)> {
    let c = x.value().last_dim();
    let (r2, c2) = (rows / k, cols / k);
    let mut idx = Vec::with_capacity(r2 * c2 * k * k * c);
    for ty in 0..r2 {
        for tx in 0..c2 {
            for py in 0..k {
                for px in 0..k {
                    let base = ((ty * k + py) * cols + tx * k + px) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    Ok((x.gather(Rc::new(idx), &[r2 * c2, k * k * c])?, r2, c2))
}

impl ConvStack {
    /// `spec` lists `(kernel, out_channels)` per layer; weights get
    /// He-style scaling so activations keep their magnitude.
    pub fn new(b: &mut ParamBuilder, name: &str, spec: &[(usize, usize)]) -> Self {
        let mut in_ch = 3;
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, &(kernel, out))| {
                let fan_in = kernel * kernel * in_ch;
                let linear = Linear {
                    weight: b.normal(format!("{name}.conv{i}.weight"), &[fan_in, out], (2.0 / fan_in as f64).sqrt()),
                    bias: Some(b.zeros(format!("{name}.conv{i}.bias"), &[out])),
                    in_dim: fan_in,
                    out_dim: out,
                };
                in_ch = out;
                ConvLayer { kernel, linear }
            })
            .collect();
        Self { layers }
    }

    /// Total downsampling factor.
    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.kernel).product()
    }

    /// Feature maps after each layer, pixels mapped to `[-1, 1]` first.
    pub fn features<'t>(&self, bind: &Binding<'t, '_>, image: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let (h, w) = dims(&image.value())?;
        let s = self.stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Dimensions { width: w, height: h, multiple: s });
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let x = image.scale(2.0)?.add_scalar(-1.0)?;
        let (mut cur, mut rows, mut cols) = image_patches(&x, self.layers[0].kernel)?;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                (cur, rows, cols) = feature_patches(out.last().expect("previous layer"), rows, cols, layer.kernel)?;
            }
            let mut y = layer.linear.forward(bind, &cur)?;
            if i + 1 < self.layers.len() {
                y = y.gelu()?;
            }
            out.push(y);
        }
        Ok(out)
    }
}

/// Fixed random feature extractor used for the perceptual term.
#[derive(Clone, Debug)]
pub struct PerceptualProxy {
    pub net: ConvStack,
    pub store: ParamStore,
}

impl PerceptualProxy {
    pub fn new(seed: u64) -> Self {
        let mut b = ParamBuilder::new(seed);
        let net = ConvStack::new(&mut b, "percep", &[(4, 8), (2, 16), (2, 32)]);
        Self { net, store: b.finish() }
    }

    /// Sum over layers of the mean squared feature difference.
    pub fn loss<'t>(&self, bind: &Binding<'t, '_>, x_hat: &Var<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let a = self.net.features(bind, x_hat)?;
        let b = self.net.features(bind, x)?;
        let mut total: Option<Var<'t>> = None;
        for (fa, fb) in a.iter().zip(&b) {
            let term = fa.sub(fb)?.square()?.mean()?;
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one layer"))
    }
}

/// Patch critic producing one logit per 16x16 region.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub net: ConvStack,
}

impl PatchDiscriminator {
    pub fn new(b: &mut ParamBuilder) -> Self {
        Self { net: ConvStack::new(b, "disc", &[(4, 16), (2, 32), (2, 1)]) }
    }

    pub fn logits<'t>(&self, bind: &Binding<'t, '_>, image: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.net.features(bind, image)?.pop().expect("at least one layer"))
    }
}
