//! Analysis procedures: effective receptive field maps, token and channel
//! redundancy, codebook usage and rate-distortion tables.

use std::io::Write;

use crate::autodiff::Tape;
use crate::codec;
use crate::error::{Error, Result};
use crate::image::dims;
use crate::model::MrtModel;
use crate::params::{Binding, ParamStore, Trainable};
use crate::rcm::{codebook_entropy, quantize_round, LfqCode};
use crate::tensor::Tensor;
use crate::training::PerceptualProxy;

/// Default share of pixels whose gradients are clipped to the K-th value.
pub const DEFAULT_CLIP_FRACTION: f64 = 0.001;

/// Per-pixel input-gradient magnitude for one target window.
#[derive(Clone, Debug, PartialEq)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    /// Row-major `H x W`, channel-summed absolute gradients after clipping.
    pub values: Vec<f64>,
    pub target_window: usize,
    /// Clip level: the K-th largest raw magnitude.
    pub threshold: f64,
    /// `(top, left, side)` of the target window in pixels.
    pub window: (usize, usize, usize),
}

impl ErfMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Share of the gradient mass outside the target window; 0 for an
    /// all-zero map.
    pub fn outside_fraction(&self) -> f64 {
        let (top, left, side) = self.window;
        let mut outside = 0.0;
        for (y, row) in self.values.chunks(self.width).enumerate() {
            for (x, &v) in row.iter().enumerate() {
                if !((top..top + side).contains(&y) && (left..left + side).contains(&x)) {
                    outside += v;
                }
            }
        }
        let total = self.total();
        if total > 0.0 {
            outside / total
        } else {
            0.0
        }
    }

    /// One CSV row per image row.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for row in self.values.chunks(self.width) {
            w.write_record(row.iter().map(|&v| format_sig6(v))).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// Gradient of the squared norm of one window's latent tokens with respect
/// to the input pixels. `clip_fraction` of the pixels (at least one when
/// positive) are clipped to the smallest of them.
pub fn compute_erf(model: &MrtModel, store: &ParamStore, image: &Tensor, target_window: usize, clip_fraction: f64) -> Result<ErfMap> {
    let (h, w) = dims(image)?;
    let cfg = &model.cfg;
    let windows = cfg.windows_for(h, w)?;
    if target_window >= windows {
        return Err(Error::InvalidArgument(format!("window {target_window} out of range for {windows} windows")));
    }
    if !(0.0..=1.0).contains(&clip_fraction) {
        return Err(Error::InvalidArgument(format!("clip fraction {clip_fraction} outside [0, 1]")));
    }
    let tape = Tape::new();
    let bind = Binding::new(&tape, store, Trainable::Nothing);
    let x = tape.param(image.clone());
    let latents = model.encoder.encode_to_latents(&bind, &x)?;
    let k = cfg.latents_per_window;
    let target = latents.slice_rows(target_window * k, (target_window + 1) * k)?.square()?.sum()?;
    let grads = tape.backward(&target)?.tensor(&x);
    let plane = h * w;
    let mut values: Vec<f64> = (0..plane).map(|i| (0..3).map(|ch| grads.data()[ch * plane + i].abs()).sum()).collect();

    let mut sorted = values.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = if clip_fraction > 0.0 {
        let kth = ((clip_fraction * plane as f64).ceil() as usize).clamp(1, plane);
        sorted[kth - 1]
    } else {
        sorted[0]
    };
    values.iter_mut().for_each(|v| *v = v.min(threshold));

    let side = cfg.window_pixels();
    let cols = w / side;
    Ok(ErfMap {
        height: h,
        width: w,
        values,
        target_window,
        threshold,
        window: ((target_window / cols) * side, (target_window % cols) * side, side),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RedundancyReport {
    /// Mean absolute Pearson correlation over channel pairs.
    pub mfc: f64,
    /// Mean cosine similarity over token pairs.
    pub mean_cosine: f64,
    /// Mean Euclidean distance over token pairs.
    pub mean_l2: f64,
    /// Token pairs left out of the cosine mean because a token has zero norm.
    pub skipped_token_pairs: usize,
    /// Channel pairs left out of the MFC because a channel is constant.
    pub skipped_channel_pairs: usize,
}

/// Spatial and channel redundancy of `[n x c]` features. Means over empty
/// sets (every pair skipped) are reported as 0.
pub fn redundancy_metrics(features: &Tensor) -> Result<RedundancyReport> {
    let (n, c) = features.dims2()?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("redundancy needs at least 2 tokens, got {n}")));
    }
    let rows: Vec<&[f64]> = (0..n).map(|i| features.row(i)).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let (mut cos_sum, mut cos_n, mut l2_sum, mut skipped_tokens) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (rows[i], rows[j]);
            l2_sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if norms[i] == 0.0 || norms[j] == 0.0 {
                skipped_tokens += 1;
                continue;
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            cos_sum += (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            cos_n += 1;
        }
    }
    let token_pairs = n * (n - 1) / 2;

    let centered: Vec<Vec<f64>> = (0..c)
        .map(|ch| {
            let mean = rows.iter().map(|r| r[ch]).sum::<f64>() / n as f64;
            rows.iter().map(|r| r[ch] - mean).collect()
        })
        .collect();
    let spreads: Vec<f64> = centered.iter().map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let (mut corr_sum, mut corr_n, mut skipped_channels) = (0.0, 0usize, 0usize);
    for a in 0..c {
        for b in a + 1..c {
            if spreads[a] == 0.0 || spreads[b] == 0.0 {
                skipped_channels += 1;
                continue;
            }
            let cov: f64 = centered[a].iter().zip(&centered[b]).map(|(x, y)| x * y).sum();
            corr_sum += (cov / (spreads[a] * spreads[b])).clamp(-1.0, 1.0).abs();
            corr_n += 1;
        }
    }
    let mean = |s: f64, k: usize| if k == 0 { 0.0 } else { s / k as f64 };
    Ok(RedundancyReport {
        mfc: mean(corr_sum, corr_n),
        mean_cosine: mean(cos_sum, cos_n),
        mean_l2: l2_sum / token_pairs as f64,
        skipped_token_pairs: skipped_tokens,
        skipped_channel_pairs: skipped_channels,
    })
}

/// Quantized latent `y` of an image, the representation whose redundancy
/// is reported.
pub fn latent_features(model: &MrtModel, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(image)?;
    let m = model.cfg.window_pixels();
    let padded = crate::image::reflect_pad(image, crate::image::round_up(h, m), crate::image::round_up(w, m))?;
    let tape = Tape::new();
    let bind = Binding::new(&tape, store, Trainable::Nothing);
    let latents = model.encoder.encode_to_latents(&bind, &tape.constant(padded))?;
    Ok(quantize_round(&model.rcm.analysis(&bind, &latents)?.value()))
}

/// Entropy in bits of the sign-code usage over all tokens of `images`.
pub fn corpus_codebook_entropy(model: &MrtModel, store: &ParamStore, images: &[Tensor]) -> Result<f64> {
    let mut indices = Vec::new();
    for image in images {
        let (h, w) = dims(image)?;
        let m = model.cfg.window_pixels();
        let padded = crate::image::reflect_pad(image, crate::image::round_up(h, m), crate::image::round_up(w, m))?;
        let tape = Tape::new();
        let bind = Binding::new(&tape, store, Trainable::Nothing);
        let latents = model.encoder.encode_to_latents(&bind, &tape.constant(padded))?;
        let y = model.rcm.analysis(&bind, &latents)?;
        let z = model.rcm.hyper_analysis(&bind, &y)?;
        indices.extend(LfqCode::quantize(&z.value())?.indices());
    }
    codebook_entropy(&indices)
}

/// One rate-distortion measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct RdRow {
    pub lambda: f64,
    /// Image name, or `mean` for the per-checkpoint average.
    pub image: String,
    pub bpp: f64,
    pub l1: f64,
    pub perceptual: f64,
}

/// Encodes and decodes every image with every checkpoint. Rates come from
/// the produced bitstream sizes.
pub fn rd_harness(
    corpus: &[(String, Tensor)],
    checkpoints: &[(f64, MrtModel, ParamStore)],
    perceptual: &PerceptualProxy,
) -> Result<Vec<RdRow>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let mut rows = Vec::new();
    for (lambda, model, store) in checkpoints {
        let lambda_index = crate::training::LAMBDAS.iter().position(|l| l == lambda).unwrap_or(u8::MAX as usize) as u8;
        let mut per_ckpt = Vec::with_capacity(corpus.len());
        for (name, image) in corpus {
            let enc = codec::encode(model, store, image, lambda_index)?;
            let dec = codec::decode(model, store, &enc.bytes)?;
            let tape = Tape::new();
            let pbind = Binding::new(&tape, &perceptual.store, Trainable::Nothing);
            let (x, x_hat) = (tape.constant(image.clone()), tape.constant(dec.image.clone()));
            let l1 = crate::training::l1_loss(&x_hat, &x)?.item();
            let per = match perceptual.loss(&pbind, &x_hat, &x) {
                Ok(v) => v.item(),
                // Sizes that the feature stride does not divide are scored
                // on the padded reconstruction instead.
                Err(Error::Dimensions { .. }) => padded_perceptual(perceptual, image, &dec.image)?,
                Err(e) => return Err(e),
            };
            per_ckpt.push(RdRow { lambda: *lambda, image: name.clone(), bpp: enc.stream.bpp(), l1, perceptual: per });
        }
        let n = per_ckpt.len() as f64;
        let mean = RdRow {
            lambda: *lambda,
            image: "mean".into(),
            bpp: per_ckpt.iter().map(|r| r.bpp).sum::<f64>() / n,
            l1: per_ckpt.iter().map(|r| r.l1).sum::<f64>() / n,
            perceptual: per_ckpt.iter().map(|r| r.perceptual).sum::<f64>() / n,
        };
        rows.extend(per_ckpt);
        rows.push(mean);
    }
    Ok(rows)
}

fn padded_perceptual(p: &PerceptualProxy, x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    let (h, w) = dims(x)?;
    let s = p.net.stride();
    let (ph, pw) = (crate::image::round_up(h, s), crate::image::round_up(w, s));
    let tape = Tape::new();
    let bind = Binding::new(&tape, &p.store, Trainable::Nothing);
    let a = tape.constant(crate::image::reflect_pad(x_hat, ph, pw)?);
    let b = tape.constant(crate::image::reflect_pad(x, ph, pw)?);
    Ok(p.loss(&bind, &a, &b)?.item())
}

/// `%g`-style formatting with 6 significant digits.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let s = if (-5..6).contains(&exp) {
        format!("{:.*}", (5 - exp).max(0) as usize, v)
    } else {
        format!("{v:.5e}")
    };
    trim_zeros(&s)
}

fn trim_zeros(s: &str) -> String {
    let (mantissa, exp) = match s.find('e') {
        Some(i) => (&s[..i], &s[i..]),
        None => (s, ""),
    };
    let mantissa = if mantissa.contains('.') { mantissa.trim_end_matches('0').trim_end_matches('.') } else { mantissa };
    format!("{mantissa}{exp}")
}

pub fn write_rd_csv(rows: &[RdRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "image", "bpp", "l1", "perceptual"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([format_sig6(r.lambda), r.image.clone(), format_sig6(r.bpp), format_sig6(r.l1), format_sig6(r.perceptual)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_redundancy_csv(rows: &[(String, RedundancyReport)], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image", "mfc", "mean_cosine", "mean_l2", "skipped_token_pairs", "skipped_channel_pairs"]).map_err(csv_err)?;
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            format_sig6(r.mfc),
            format_sig6(r.mean_cosine),
            format_sig6(r.mean_l2),
            r.skipped_token_pairs.to_string(),
            r.skipped_channel_pairs.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
