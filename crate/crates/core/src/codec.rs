//! Image to `.mrt` bitstream and back.
//!
//! The hyper payload carries the sign code under the learned Bernoulli
//! prior. The latent payload carries the rounded latents slice by slice in
//! context-model order, each element coded against a Gaussian table built
//! from fixed-point `(mu, sigma)`.

use std::collections::HashMap;

use crate::autodiff::Tape;
use crate::coder::{
    bernoulli_cdf, from_gaussian_symbol, gaussian_to_cdf, to_gaussian_symbol, FixedGaussian, GaussianSymbol,
    MrtBitstream, QuantizedCdf, RangeDecoder, RangeEncoder, ESCAPE_HIGH, ESCAPE_LOW,
};
use crate::error::{Error, Result};
use crate::image::{crop, dims, reflect_pad, round_up};
use crate::model::MrtModel;
use crate::params::{Binding, ParamStore, Trainable};
use crate::rcm::{hyper_rate_estimate, quantize_round, rate_estimate, slice_of, LfqCode, STAGES};
use crate::tensor::Tensor;

/// Encoder-side values, kept for consistency checks and rate accounting.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub stream: MrtBitstream,
    pub bytes: Vec<u8>,
    pub y_hat: Tensor,
    pub z_code: LfqCode,
    /// Ideal bits of both payloads under the integer coding tables.
    pub model_bits: f64,
    /// Bits of the latents under the continuous Gaussian model.
    pub continuous_latent_bits: f64,
    pub continuous_hyper_bits: f64,
}

impl Encoded {
    pub fn payload_bits(&self) -> usize {
        8 * (self.stream.hyper.len() + self.stream.latent.len())
    }
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// Clamped to `[0, 1]` and cropped to the original size.
    pub image: Tensor,
    pub y_hat: Tensor,
    pub z_code: LfqCode,
    pub header: crate::coder::Header,
}

/// Gaussian tables memoized by fixed-point parameters.
#[derive(Default)]
struct TableCache {
    tables: HashMap<FixedGaussian, QuantizedCdf>,
}

impl TableCache {
    fn get(&mut self, g: FixedGaussian) -> &QuantizedCdf {
        self.tables.entry(g).or_insert_with(|| gaussian_to_cdf(g))
    }
}

/// Elements of one slice in coding order: token-major, channel-minor.
fn slice_elements(tokens: usize, c_y: usize, group0: usize, stage: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..tokens).flat_map(move |t| (0..c_y).map(move |ch| (t, ch))).filter(move |&(t, ch)| slice_of(t, ch, group0) == stage)
}

fn hyper_tables(store: &ParamStore, model: &MrtModel) -> Vec<QuantizedCdf> {
    store.get(model.rcm.hyper_logits).data().iter().map(|&l| bernoulli_cdf(l)).collect()
}

pub fn encode(model: &MrtModel, store: &ParamStore, image: &Tensor, lambda_index: u8) -> Result<Encoded> {
    let (h, w) = dims(image)?;
    let m = model.cfg.window_pixels();
    let (ph, pw) = (round_up(h, m), round_up(w, m));
    let padded = reflect_pad(image, ph, pw)?;
    let tape = Tape::new();
    let bind = Binding::new(&tape, store, Trainable::Nothing);
    let rcm = &model.rcm;

    let latents = model.encoder.encode_to_latents(&bind, &tape.constant(padded))?;
    let y = rcm.analysis(&bind, &latents)?;
    let y_hat = quantize_round(&y.value());
    let z = rcm.hyper_analysis(&bind, &y)?;
    let z_code = LfqCode::quantize(&z.value())?;

    let mut model_bits = 0.0;
    let mut hyper_enc = RangeEncoder::new();
    let hyper_cdfs = hyper_tables(store, model);
    for (i, &s) in z_code.signs().iter().enumerate() {
        let cdf = &hyper_cdfs[i % rcm.c_z];
        let sym = usize::from(s > 0);
        model_bits += cdf.bits(sym);
        hyper_enc.encode_symbol(cdf, sym)?;
    }
    let hyper_payload = hyper_enc.finish();

    let z_hat = tape.constant(z_code.to_tensor());
    let ctx = rcm.hyper_synthesis(&bind, &z_hat)?;
    let y_hat_var = tape.constant(y_hat.clone());
    let tokens = y_hat.rows();
    let c_y = rcm.c_y;
    let group0 = rcm.scctx.group0_width();
    let mut latent_enc = RangeEncoder::new();
    let mut cache = TableCache::default();
    let mut mu_full = Tensor::zeros(&[tokens, c_y]);
    let mut sigma_full = Tensor::zeros(&[tokens, c_y]);
    for stage in 0..STAGES {
        let (mu, sigma) = rcm.scctx.stage_params(&bind, &ctx, &y_hat_var, &[true; STAGES], stage)?;
        let (mu, sigma) = (mu.value(), sigma.value());
        let first = rcm.scctx.stage_channels(stage).start;
        let width = mu.shape()[1];
        for (t, ch) in slice_elements(tokens, c_y, group0, stage) {
            let (m, s) = (mu.data()[t * width + ch - first], sigma.data()[t * width + ch - first]);
            mu_full.data_mut()[t * c_y + ch] = m;
            sigma_full.data_mut()[t * c_y + ch] = s;
            let cdf = cache.get(FixedGaussian::quantize(m, s));
            let value = y_hat.data()[t * c_y + ch] as i32;
            match to_gaussian_symbol(value)? {
                GaussianSymbol::Direct(sym) => {
                    model_bits += cdf.bits(sym);
                    latent_enc.encode_symbol(cdf, sym)?;
                }
                GaussianSymbol::Escape(sym, raw) => {
                    model_bits += cdf.bits(sym) + 16.0;
                    latent_enc.encode_symbol(cdf, sym)?;
                    latent_enc.encode_raw16(raw);
                }
            }
        }
    }
    let latent_payload = latent_enc.finish();
    let continuous_latent_bits = rate_estimate(&y_hat, &mu_full, &sigma_full)?;
    let continuous_hyper_bits = hyper_rate_estimate(&z_code.to_tensor(), store.get(rcm.hyper_logits))?;

    let as_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidArgument("image too large".into()));
    let stream = MrtBitstream::new(
        (as_u32(w)?, as_u32(h)?),
        (as_u32(pw)?, as_u32(ph)?),
        lambda_index,
        rcm.c_z as u8,
        hyper_payload,
        latent_payload,
    )?;
    let bytes = stream.to_bytes();
    Ok(Encoded { stream, bytes, y_hat, z_code, model_bits, continuous_latent_bits, continuous_hyper_bits })
}

pub fn decode(model: &MrtModel, store: &ParamStore, bytes: &[u8]) -> Result<Decoded> {
    let stream = MrtBitstream::from_bytes(bytes)?;
    let header = stream.header;
    let rcm = &model.rcm;
    if usize::from(header.c_z) != rcm.c_z {
        return Err(Error::InvalidArgument(format!("stream has c_z {}, model has {}", header.c_z, rcm.c_z)));
    }
    let (ph, pw) = (header.padded_height as usize, header.padded_width as usize);
    let tokens = model.cfg.latent_tokens_for(ph, pw).map_err(|_| Error::Corrupt("padded size is not a window multiple".into()))?;
    // A window of latents needs at least one coded bit per sign, so wildly
    // large headers are rejected before allocating.
    let c_y = rcm.c_y;
    if tokens > 8 * (stream.hyper.len() + 8) * 64 {
        return Err(Error::Corrupt("header size does not match payload".into()));
    }

    let mut hyper_dec = RangeDecoder::new(&stream.hyper);
    let hyper_cdfs = hyper_tables(store, model);
    let mut signs = Vec::with_capacity(tokens * rcm.c_z);
    for i in 0..tokens * rcm.c_z {
        let sym = hyper_dec.decode_symbol(&hyper_cdfs[i % rcm.c_z])?;
        signs.push(if sym == 1 { 1 } else { -1 });
    }
    let z_code = LfqCode::from_signs(signs, rcm.c_z)?;

    let tape = Tape::new();
    let bind = Binding::new(&tape, store, Trainable::Nothing);
    let ctx = rcm.hyper_synthesis(&bind, &tape.constant(z_code.to_tensor()))?;
    let group0 = rcm.scctx.group0_width();
    let mut y_hat = Tensor::zeros(&[tokens, c_y]);
    let mut available = [false; STAGES];
    let mut latent_dec = RangeDecoder::new(&stream.latent);
    let mut cache = TableCache::default();
    for stage in 0..STAGES {
        let known = tape.constant(y_hat.clone());
        let (mu, sigma) = rcm.scctx.stage_params(&bind, &ctx, &known, &available, stage)?;
        let (mu, sigma) = (mu.value(), sigma.value());
        let first = rcm.scctx.stage_channels(stage).start;
        let width = mu.shape()[1];
        for (t, ch) in slice_elements(tokens, c_y, group0, stage) {
            let g = FixedGaussian::quantize(mu.data()[t * width + ch - first], sigma.data()[t * width + ch - first]);
            let sym = latent_dec.decode_symbol(cache.get(g))?;
            let raw = if sym == ESCAPE_LOW || sym == ESCAPE_HIGH { latent_dec.decode_raw16()? } else { 0 };
            y_hat.data_mut()[t * c_y + ch] = f64::from(from_gaussian_symbol(sym, raw));
        }
        available[stage] = true;
    }
    if hyper_dec.consumed() < stream.hyper.len() || latent_dec.consumed() < stream.latent.len() {
        return Err(Error::Corrupt("payload longer than its coded content".into()));
    }

    let latents_hat = rcm.synthesis(&bind, &tape.constant(y_hat.clone()))?;
    let x_hat = model.decoder.decode_from_latents(&bind, &latents_hat, ph, pw)?;
    let image = crop(&x_hat.value().map(|v| v.clamp(0.0, 1.0)), header.orig_height as usize, header.orig_width as usize)?;
    Ok(Decoded { image, y_hat, z_code, header })
}
