//! Image to 1-D latent token flow and its mirrored decoder.
//!
//! Images are `[3 x H x W]` tensors in `[0, 1]`. Patch tokens live on a
//! `grid_rows x grid_cols` grid (one token per 16x16 patch), and windows of
//! `window_side x window_side` tokens are processed with their latent tokens
//! appended.

mod config;

use std::rc::Rc;

pub use config::{parse_kv, ModelConfig};

use crate::autodiff::Var;
use crate::birwkv::BiRwkvBlock;
use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::params::{Binding, ParamBuilder, ParamId, INIT_STD};
use crate::vit::VitBlock;

/// Row layout of a [`TokenSequence`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `n_windows` groups of patch tokens followed by latent tokens.
    Windowed,
    /// The windowed rows seen as one long sequence.
    Global,
    /// Latent tokens only, in window order.
    Latent,
}

#[derive(Clone, Copy, Debug)]
pub struct TokenSequence<'t> {
    pub data: Var<'t>,
    pub n_windows: usize,
    pub tokens_per_window: usize,
    pub layout: Layout,
}

impl<'t> TokenSequence<'t> {
    pub fn new(data: Var<'t>, n_windows: usize, tokens_per_window: usize, layout: Layout) -> Result<Self> {
        let rows = data.shape()[0];
        if data.shape().len() != 2 || rows != n_windows * tokens_per_window {
            return shape_err(
                "token_sequence",
                format!("{:?} is not {n_windows} windows of {tokens_per_window}", data.shape()),
            );
        }
        Ok(Self { data, n_windows, tokens_per_window, layout })
    }

    pub fn len(&self) -> usize {
        self.n_windows * self.tokens_per_window
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_global(self) -> Result<Self> {
        self.expect(Layout::Windowed, "to_global")?;
        Ok(Self { layout: Layout::Global, ..self })
    }

    pub fn to_windowed(self) -> Result<Self> {
        self.expect(Layout::Global, "to_windowed")?;
        Ok(Self { layout: Layout::Windowed, ..self })
    }

    /// The trailing `latents` rows of every window, concatenated in window
    /// order.
    pub fn extract_latents(&self, latents: usize) -> Result<Self> {
        self.expect(Layout::Windowed, "extract_latents")?;
        let patches = self.tokens_per_window.checked_sub(latents).ok_or_else(|| Error::Shape {
            op: "extract_latents",
            detail: format!("{latents} latents in windows of {}", self.tokens_per_window),
        })?;
        let rows: Vec<usize> = (0..self.n_windows)
            .flat_map(|w| (0..latents).map(move |j| w * self.tokens_per_window + patches + j))
            .collect();
        Self::new(gather_rows(&self.data, &rows)?, self.n_windows, latents, Layout::Latent)
    }

    fn expect(&self, layout: Layout, op: &'static str) -> Result<()> {
        if self.layout != layout {
            return shape_err(op, format!("expected {layout:?} layout, got {:?}", self.layout));
        }
        Ok(())
    }
}

/// Token grid of an image, in tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn for_image(cfg: &ModelConfig, height: usize, width: usize) -> Result<Self> {
        cfg.windows_for(height, width)?;
        Ok(Self { rows: height / cfg.patch_size, cols: width / cfg.patch_size })
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    /// Grid row index of each patch token in window order.
    fn window_order(&self, side: usize) -> Result<Vec<usize>> {
        if self.rows % side != 0 || self.cols % side != 0 {
            return shape_err("partition", format!("{}x{} grid is not divisible into {side}x{side} windows", self.rows, self.cols));
        }
        let mut order = Vec::with_capacity(self.tokens());
        for wy in 0..self.rows / side {
            for wx in 0..self.cols / side {
                for ly in 0..side {
                    for lx in 0..side {
                        order.push((wy * side + ly) * self.cols + wx * side + lx);
                    }
                }
            }
        }
        Ok(order)
    }
}

/// Selects whole rows of a rank-2 variable, repeats allowed.
pub fn gather_rows<'t>(x: &Var<'t>, rows: &[usize]) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return shape_err("gather_rows", format!("rank-2 input expected, got {shape:?}"));
    }
    let c = shape[1];
    let idx: Vec<usize> = rows.iter().flat_map(|&r| (0..c).map(move |j| r * c + j)).collect();
    x.gather(Rc::new(idx), &[rows.len(), c])
}

fn image_dims(image: &Var<'_>) -> Result<(usize, usize)> {
    match image.shape()[..] {
        [3, h, w] => Ok((h, w)),
        ref s => shape_err("image", format!("expected [3, H, W], got {s:?}")),
    }
}

/// Splits windows of patch tokens (raster order inside the grid) and
/// appends the shared latent embedding to each window.
pub fn partition_and_append<'t>(
    tokens: &Var<'t>,
    latent: &Var<'t>,
    grid: TokenGrid,
    cfg: &ModelConfig,
) -> Result<TokenSequence<'t>> {
    let n_tokens = grid.tokens();
    if tokens.shape()[0] != n_tokens {
        return shape_err("partition", format!("{} tokens for a {}x{} grid", tokens.shape()[0], grid.rows, grid.cols));
    }
    let order = grid.window_order(cfg.window_side)?;
    let per = cfg.patch_tokens_per_window();
    let n_windows = n_tokens / per;
    let mut rows = Vec::with_capacity(n_windows * cfg.tokens_per_window());
    for w in 0..n_windows {
        rows.extend_from_slice(&order[w * per..(w + 1) * per]);
        rows.extend((0..cfg.latents_per_window).map(|j| n_tokens + j));
    }
    let all = Var::concat_rows(&[*tokens, *latent])?;
    TokenSequence::new(gather_rows(&all, &rows)?, n_windows, cfg.tokens_per_window(), Layout::Windowed)
}

/// Inverse of [`partition_and_append`]: drops the latent slots and restores
/// raster token order.
pub fn unpartition<'t>(seq: &TokenSequence<'t>, grid: TokenGrid, cfg: &ModelConfig) -> Result<Var<'t>> {
    seq.expect(Layout::Windowed, "unpartition")?;
    let per = cfg.patch_tokens_per_window();
    if seq.tokens_per_window != cfg.tokens_per_window() || seq.n_windows * per != grid.tokens() {
        return shape_err("unpartition", format!("{} windows do not cover a {}x{} grid", seq.n_windows, grid.rows, grid.cols));
    }
    let order = grid.window_order(cfg.window_side)?;
    let mut rows = vec![0; grid.tokens()];
    for (slot, &g) in order.iter().enumerate() {
        let (w, j) = (slot / per, slot % per);
        rows[g] = w * seq.tokens_per_window + j;
    }
    gather_rows(&seq.data, &rows)
}

/// One stack element: global Bi-RWKV blocks over all windows, then ViT
/// blocks inside each window.
#[derive(Clone, Debug)]
pub struct TransformLayer {
    pub rwkv: Vec<BiRwkvBlock>,
    pub vit: Vec<VitBlock>,
}

impl TransformLayer {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let rwkv = (0..cfg.rwkv_blocks_per_layer)
            .map(|i| BiRwkvBlock::new(b, &format!("{name}.rwkv{i}"), cfg.dim, cfg.ratio))
            .collect();
        let vit = (0..cfg.vit_blocks_per_layer)
            .map(|i| VitBlock::new(b, &format!("{name}.vit{i}"), cfg.dim, cfg.heads, cfg.ratio, cfg.tokens_per_window()))
            .collect::<Result<_>>()?;
        Ok(Self { rwkv, vit })
    }

    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, seq: TokenSequence<'t>) -> Result<TokenSequence<'t>> {
        let mut g = seq.to_global()?;
        for blk in &self.rwkv {
            g.data = blk.forward(bind, &g.data)?;
        }
        let mut w = g.to_windowed()?;
        for blk in &self.vit {
            w.data = blk.forward(bind, &w.data)?;
        }
        Ok(w)
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.rwkv.iter().flat_map(BiRwkvBlock::output_params).collect();
        v.extend(self.vit.iter().flat_map(VitBlock::output_params));
        v
    }
}

/// Image to latent tokens.
#[derive(Clone, Debug)]
pub struct MrtEncoder {
    pub cfg: ModelConfig,
    /// Strided 16x16 convolution written as a linear map on flattened patches.
    pub embed: Linear,
    pub latent: ParamId,
    pub layers: Vec<TransformLayer>,
}

impl MrtEncoder {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let p = cfg.patch_size;
        Ok(Self {
            cfg: cfg.clone(),
            embed: Linear::new(b, &format!("{name}.embed"), 3 * p * p, cfg.dim),
            latent: b.normal(format!("{name}.latent"), &[cfg.latents_per_window, cfg.dim], INIT_STD),
            layers: (0..cfg.n_layers)
                .map(|i| TransformLayer::new(b, &format!("{name}.layer{i}"), cfg))
                .collect::<Result<_>>()?,
        })
    }

    /// Patch tokens in raster order, `[(H/16 * W/16) x c]`. Pixels are
    /// mapped to `[-1, 1]` first.
    pub fn patch_embed<'t>(&self, bind: &Binding<'t, '_>, image: &Var<'t>) -> Result<Var<'t>> {
        let (h, w) = image_dims(image)?;
        let grid = TokenGrid::for_image(&self.cfg, h, w)?;
        let p = self.cfg.patch_size;
        let mut idx = Vec::with_capacity(3 * h * w);
        for ty in 0..grid.rows {
            for tx in 0..grid.cols {
                for ch in 0..3 {
                    for py in 0..p {
                        let base = ch * h * w + (ty * p + py) * w + tx * p;
                        idx.extend(base..base + p);
                    }
                }
            }
        }
        let patches = image.gather(Rc::new(idx), &[grid.tokens(), 3 * p * p])?.scale(2.0)?.add_scalar(-1.0)?;
        self.embed.forward(bind, &patches)
    }

    /// Final windowed sequence, latent slots included.
    pub fn encode_sequence<'t>(&self, bind: &Binding<'t, '_>, image: &Var<'t>) -> Result<TokenSequence<'t>> {
        let (h, w) = image_dims(image)?;
        let grid = TokenGrid::for_image(&self.cfg, h, w)?;
        let tokens = self.patch_embed(bind, image)?;
        let mut seq = partition_and_append(&tokens, &bind.p(self.latent), grid, &self.cfg)?;
        for layer in &self.layers {
            seq = layer.forward(bind, seq)?;
        }
        Ok(seq)
    }

    /// `[(N * 32) x c]` latent tokens in window order.
    pub fn encode_to_latents<'t>(&self, bind: &Binding<'t, '_>, image: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.encode_sequence(bind, image)?.extract_latents(self.cfg.latents_per_window)?.data)
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(TransformLayer::output_params).collect()
    }
}

/// Two transposed convolutions with kernel = stride (4, then patch/4) and a
/// GELU between, turning each token into a patch of pixels.
#[derive(Clone, Debug)]
pub struct PixelGenerator {
    pub up1: Linear,
    pub bias1: ParamId,
    pub up2: Linear,
    pub bias2: ParamId,
    pub dim: usize,
    pub hidden: usize,
    pub stride1: usize,
    pub stride2: usize,
}

impl PixelGenerator {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Self {
        let (s1, s2, g) = (4, cfg.patch_size / 4, cfg.generator_dim);
        Self {
            up1: Linear::no_bias(b, &format!("{name}.up1"), cfg.dim, s1 * s1 * g),
            bias1: b.zeros(format!("{name}.up1.bias"), &[g]),
            up2: Linear::no_bias(b, &format!("{name}.up2"), g, s2 * s2 * 3),
            bias2: b.zeros(format!("{name}.up2.bias"), &[3]),
            dim: cfg.dim,
            hidden: g,
            stride1: s1,
            stride2: s2,
        }
    }

    /// Per-output-channel bias broadcast over the `s x s` kernel positions.
    fn kernel_bias<'t>(bind: &Binding<'t, '_>, bias: ParamId, s: usize, ch: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (0..s * s * ch).map(|i| i % ch).collect();
        bind.p(bias).gather(Rc::new(idx), &[s * s * ch])
    }

    /// `f` holds raster-ordered tokens of `grid`; output is `[3 x H x W]`,
    /// offset so zero output means mid-gray.
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, f: &Var<'t>, grid: TokenGrid) -> Result<Var<'t>> {
        if f.shape() != [grid.tokens(), self.dim] {
            return shape_err("pixel_generate", format!("{:?} for a {}x{} grid", f.shape(), grid.rows, grid.cols));
        }
        let (s1, s2, g) = (self.stride1, self.stride2, self.hidden);
        let y1 = self.up1.forward(bind, f)?.add_bias(&Self::kernel_bias(bind, self.bias1, s1, g)?)?;
        let (r1, c1) = (grid.rows * s1, grid.cols * s1);
        let mut idx = Vec::with_capacity(r1 * c1 * g);
        for oy in 0..r1 {
            for ox in 0..c1 {
                let src = (oy / s1) * grid.cols + ox / s1;
                let col = ((oy % s1) * s1 + ox % s1) * g;
                let base = src * s1 * s1 * g + col;
                idx.extend(base..base + g);
            }
        }
        let h1 = y1.gather(Rc::new(idx), &[r1 * c1, g])?.gelu()?;
        let y2 = self.up2.forward(bind, &h1)?.add_bias(&Self::kernel_bias(bind, self.bias2, s2, 3)?)?;
        let (h, w) = (r1 * s2, c1 * s2);
        let mut idx = Vec::with_capacity(3 * h * w);
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let src = (y / s2) * c1 + x / s2;
                    idx.push(src * s2 * s2 * 3 + ((y % s2) * s2 + x % s2) * 3 + ch);
                }
            }
        }
        y2.gather(Rc::new(idx), &[3, h, w])?.add_scalar(0.5)
    }
}

/// Latent tokens back to an image.
#[derive(Clone, Debug)]
pub struct MrtDecoder {
    pub cfg: ModelConfig,
    pub mask: ParamId,
    pub layers: Vec<TransformLayer>,
    pub generator: PixelGenerator,
}

impl MrtDecoder {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            mask: b.normal(format!("{name}.mask"), &[1, cfg.dim], INIT_STD),
            layers: (0..cfg.n_layers)
                .map(|i| TransformLayer::new(b, &format!("{name}.layer{i}"), cfg))
                .collect::<Result<_>>()?,
            generator: PixelGenerator::new(b, &format!("{name}.generator"), cfg),
        })
    }

    /// Mask tokens in every patch slot, followed by each window's latents.
    pub fn assemble<'t>(&self, bind: &Binding<'t, '_>, latents: &Var<'t>) -> Result<TokenSequence<'t>> {
        let l = self.cfg.latents_per_window;
        let shape = latents.shape();
        if shape.len() != 2 || shape[1] != self.cfg.dim || shape[0] == 0 || shape[0] % l != 0 {
            return shape_err("decode", format!("latents {shape:?} are not whole windows of {l} x {}", self.cfg.dim));
        }
        let n = shape[0] / l;
        let per = self.cfg.patch_tokens_per_window();
        let mut rows = Vec::with_capacity(n * self.cfg.tokens_per_window());
        for w in 0..n {
            rows.extend(std::iter::repeat_n(shape[0], per));
            rows.extend(w * l..(w + 1) * l);
        }
        let all = Var::concat_rows(&[*latents, bind.p(self.mask)])?;
        TokenSequence::new(gather_rows(&all, &rows)?, n, self.cfg.tokens_per_window(), Layout::Windowed)
    }

    pub fn decode_from_latents<'t>(
        &self,
        bind: &Binding<'t, '_>,
        latents: &Var<'t>,
        height: usize,
        width: usize,
    ) -> Result<Var<'t>> {
        let (f, grid) = self.decode_features(bind, latents, height, width)?;
        self.generator.forward(bind, &f, grid)
    }

    /// Decoder patch tokens in raster order, before the pixel generator.
    pub fn decode_features<'t>(
        &self,
        bind: &Binding<'t, '_>,
        latents: &Var<'t>,
        height: usize,
        width: usize,
    ) -> Result<(Var<'t>, TokenGrid)> {
        let grid = TokenGrid::for_image(&self.cfg, height, width)?;
        let mut seq = self.assemble(bind, latents)?;
        let expected = self.cfg.windows_for(height, width)?;
        if seq.n_windows != expected {
            return Err(Error::InvalidArgument(format!(
                "{} latent windows cannot fill a {width}x{height} image ({expected} windows)",
                seq.n_windows
            )));
        }
        for layer in &self.layers {
            seq = layer.forward(bind, seq)?;
        }
        Ok((unpartition(&seq, grid, &self.cfg)?, grid))
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(TransformLayer::output_params).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::autodiff::Tape;
    use crate::params::{ParamStore, Trainable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { dim: 8, ..ModelConfig::tiny() }
    }

    fn build(cfg: &ModelConfig) -> (MrtEncoder, MrtDecoder, ParamStore) {
        let mut b = ParamBuilder::new(11);
        let enc = MrtEncoder::new(&mut b, "enc", cfg).unwrap();
        let dec = MrtDecoder::new(&mut b, "dec", cfg).unwrap();
        (enc, dec, b.finish())
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn shape_contracts() {
        let cfg = tiny();
        let (enc, dec, store) = build(&cfg);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, Trainable::Nothing);
        for (h, w, tokens, latents) in [(256, 256, 256, 32), (512, 512, 1024, 128), (256, 512, 512, 64)] {
            let x = tape.constant(image(h, w, 1));
            assert_eq!(enc.patch_embed(&bind, &x).unwrap().shape(), vec![tokens, cfg.dim]);
            let seq = enc.encode_sequence(&bind, &x).unwrap();
            assert_eq!(seq.len(), tokens / 256 * 288);
            let lat = enc.encode_to_latents(&bind, &x).unwrap();
            assert_eq!(lat.shape(), vec![latents, cfg.dim]);
            let y = dec.decode_from_latents(&bind, &lat, h, w).unwrap();
            assert_eq!(y.shape(), vec![3, h, w]);
            assert!(y.value().is_finite());
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        let cfg = tiny();
        let (enc, dec, store) = build(&cfg);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, Trainable::Nothing);
        let x = tape.constant(image(256, 240, 1));
        assert!(matches!(enc.encode_to_latents(&bind, &x), Err(Error::Dimensions { .. })));
        let lat = tape.constant(Tensor::zeros(&[32, cfg.dim]));
        assert!(dec.decode_from_latents(&bind, &lat, 512, 512).is_err());
        let odd = tape.constant(Tensor::zeros(&[31, cfg.dim]));
        assert!(dec.decode_from_latents(&bind, &odd, 256, 256).is_err());
    }

    #[test]
    fn partition_roundtrip_restores_order() {
        let cfg = tiny();
        let tape = Tape::new();
        let grid = TokenGrid { rows: 16, cols: 32 };
        let tokens = Tensor::new(vec![512, 2], (0..1024).map(|v| v as f64).collect()).unwrap();
        let latent = Tensor::full(&[32, 2], -1.0);
        let seq = partition_and_append(&tape.constant(tokens.clone()), &tape.constant(latent), grid, &cfg).unwrap();
        assert_eq!((seq.n_windows, seq.len()), (2, 576));
        let v = seq.data.value();
        // Second token of window 1 is grid (0, 17); latents trail each window.
        assert_eq!(v.row(288 + 1), &[34.0, 35.0]);
        assert_eq!(v.row(256), &[-1.0, -1.0]);
        assert_eq!(v.row(575), &[-1.0, -1.0]);
        let back = unpartition(&seq, grid, &cfg).unwrap();
        assert_eq!(*back.value(), tokens);
        assert!(partition_and_append(&tape.constant(Tensor::zeros(&[24 * 16, 2])), &tape.constant(Tensor::zeros(&[32, 2])), TokenGrid { rows: 16, cols: 24 }, &cfg).is_err());
    }

    #[test]
    fn layout_transitions_are_checked() {
        let tape = Tape::new();
        let seq = TokenSequence::new(tape.constant(Tensor::zeros(&[288, 2])), 1, 288, Layout::Windowed).unwrap();
        assert!(seq.to_windowed().is_err());
        let g = seq.to_global().unwrap();
        assert!(g.extract_latents(32).is_err());
        assert!(TokenSequence::new(tape.constant(Tensor::zeros(&[287, 2])), 1, 288, Layout::Windowed).is_err());
    }

    #[test]
    fn zero_output_projections_give_latent_embedding() {
        let cfg = tiny();
        let (enc, _, mut store) = build(&cfg);
        for id in enc.output_params() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, Trainable::Nothing);
        let lat = enc.encode_to_latents(&bind, &tape.constant(image(256, 512, 3))).unwrap();
        let table = store.get(enc.latent);
        let v = lat.value();
        assert_eq!(&v.data()[..table.len()], table.data());
        assert_eq!(&v.data()[table.len()..], table.data());
    }

    /// Fraction of d|latents of window 0|^2 / d pixels outside window 0.
    fn outside_mass(enc: &MrtEncoder, store: &ParamStore, x: &Tensor) -> f64 {
        let tape = Tape::new();
        let bind = Binding::new(&tape, store, Trainable::Nothing);
        let xv = tape.param(x.clone());
        let lat = enc.encode_to_latents(&bind, &xv).unwrap();
        let loss = lat.slice_rows(0, 32).unwrap().square().unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap().tensor(&xv);
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (mut inside, mut total) = (0.0, 0.0);
        for ch in 0..3 {
            for y in 0..h {
                for xx in 0..w {
                    let a = g.data()[ch * h * w + y * w + xx].abs();
                    total += a;
                    if y < 256 && xx < 256 {
                        inside += a;
                    }
                }
            }
        }
        (total - inside) / total
    }

    #[test]
    fn cross_window_influence_needs_rwkv() {
        let cfg = tiny();
        let x = image(256, 512, 4);
        let (enc, _, store) = build(&cfg);
        assert!(outside_mass(&enc, &store, &x) > 1e-3);
        let ablated = cfg.without_rwkv();
        let (enc, _, store) = build(&ablated);
        assert_eq!(outside_mass(&enc, &store, &x), 0.0);
    }

    #[test]
    fn generator_is_a_per_token_upsampler() {
        let cfg = tiny();
        let mut b = ParamBuilder::new(2);
        let gen = PixelGenerator::new(&mut b, "g", &cfg);
        let store = b.finish();
        let grid = TokenGrid { rows: 16, cols: 16 };
        let f = Tensor::rand_uniform(&[256, cfg.dim], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let run = |f: &Tensor| {
            let tape = Tape::new();
            let bind = Binding::new(&tape, &store, Trainable::Nothing);
            (*gen.forward(&bind, &tape.constant(f.clone()), grid).unwrap().value()).clone()
        };
        let y = run(&f);
        assert_eq!(y.shape(), &[3, 256, 256]);
        let mut f2 = f.clone();
        f2.data_mut()[17 * cfg.dim] += 1.0;
        let y2 = run(&f2);
        // Token 17 is grid (1, 1), which covers pixels [16, 32) x [16, 32).
        for ch in 0..3 {
            for yy in 0..256 {
                for xx in 0..256 {
                    let i = ch * 65536 + yy * 256 + xx;
                    let inside = (16..32).contains(&yy) && (16..32).contains(&xx);
                    if !inside {
                        assert_eq!(y.data()[i], y2.data()[i]);
                    }
                }
            }
        }
        assert!(y.max_abs_diff(&y2) > 0.0);
    }
}
