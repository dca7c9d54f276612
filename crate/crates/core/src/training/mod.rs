//! Two-stage training: latent alignment of the whole codec against a
//! discrete target tokenizer, then rate-distortion fine-tuning of the
//! compression model, decoder and pixel generator with the encoder frozen.

pub mod data;
pub mod losses;
pub mod proxies;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::dims;
use crate::model::{MrtModel, FROZEN_IN_STAGE2};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{Binding, ParamBuilder, ParamStore, Trainable};
use crate::tensor::Tensor;
use crate::transform::{parse_kv, ModelConfig};

pub use data::{synthetic_corpus, synthetic_image, BlockTokenizer};
pub use losses::*;
pub use proxies::{PatchDiscriminator, PerceptualProxy};

/// Rate weights of the released operating points, index = header lambda index.
pub const LAMBDAS: [f64; 4] = [20.0, 10.0, 5.0, 2.5];

/// Plain `key=value` training configuration. Keys not listed here are model
/// configuration keys (`preset=desk`, `dim=64`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch: usize,
    pub image_size: usize,
    /// Number of synthetic corpus images; ignored when `data_dir` is set.
    pub corpus_size: usize,
    pub data_dir: Option<PathBuf>,
    pub lr: f64,
    pub seed: u64,
    pub lambda: f64,
    pub init: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            steps: 300,
            batch: 4,
            image_size: 256,
            corpus_size: 4,
            data_dir: None,
            lr: 1e-3,
            seed: 0,
            lambda: LAMBDAS[1],
            init: None,
            output: None,
            log: None,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = parse_kv(text)?;
        let mut cfg = Self::default();
        fn num<T: std::str::FromStr>(key: &str, raw: String) -> Result<T> {
            raw.parse().map_err(|_| Error::Parse(format!("{key}: cannot parse {raw:?}")))
        }
        for key in ["steps", "batch", "image_size", "corpus_size", "data_dir", "lr", "seed", "lambda", "init", "output", "log"] {
            let Some(raw) = map.remove(key) else { continue };
            match key {
                "steps" => cfg.steps = num(key, raw)?,
                "batch" => cfg.batch = num(key, raw)?,
                "image_size" => cfg.image_size = num(key, raw)?,
                "corpus_size" => cfg.corpus_size = num(key, raw)?,
                "data_dir" => cfg.data_dir = Some(raw.into()),
                "lr" => cfg.lr = num(key, raw)?,
                "seed" => cfg.seed = num(key, raw)?,
                "lambda" => cfg.lambda = num(key, raw)?,
                "init" => cfg.init = Some(raw.into()),
                "output" => cfg.output = Some(raw.into()),
                "log" => cfg.log = Some(raw.into()),
                _ => unreachable!(),
            }
        }
        cfg.model.apply_kv(&mut map)?;
        if let Some(k) = map.keys().next() {
            return Err(Error::Parse(format!("unknown training key {k}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.windows_for(self.image_size, self.image_size)?;
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr {} must be positive", self.lr)));
        }
        LossWeights { lambda: self.lambda, ..Default::default() }.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda, ..Default::default() }
    }

    /// Training images: every PPM in `data_dir` padded or cropped to the
    /// square training size, or the synthetic corpus.
    pub fn load_images(&self) -> Result<Vec<Tensor>> {
        let s = self.image_size;
        let Some(dir) = &self.data_dir else {
            return Ok(synthetic_corpus(self.corpus_size, s, s, self.seed));
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidArgument(format!("no .ppm files in {}", dir.display())));
        }
        paths
            .iter()
            .map(|p| {
                let img = crate::image::read_ppm(p)?;
                let (h, w) = dims(&img)?;
                let padded = crate::image::reflect_pad(&img, h.max(s), w.max(s))?;
                crate::image::crop(&padded, s, s)
            })
            .collect()
    }
}

/// Scalar values of the stage-1 terms for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage1Terms {
    pub cross_entropy: f64,
    pub lfq: f64,
    /// Latent plus hyper bits per latent token.
    pub rate: f64,
    pub latent: f64,
    pub total: f64,
}

impl Stage1Terms {
    pub fn all_finite(&self) -> bool {
        [self.cross_entropy, self.lfq, self.rate, self.latent, self.total].iter().all(|v| v.is_finite())
    }
}

/// Scalar values of the stage-2 terms for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage2Terms {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub bpp: f64,
    pub total: f64,
    pub discriminator: f64,
}

impl Stage2Terms {
    pub fn all_finite(&self) -> bool {
        [self.l1, self.perceptual, self.adversarial, self.bpp, self.total, self.discriminator]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn sum_all<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let mut it = parts.iter();
    let mut acc = *it.next().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    for p in it {
        acc = acc.add(p)?;
    }
    Ok(acc)
}

/// Stage-1 objective over a batch: cross-entropy of the aux head against
/// the target codes, LFQ regularizer, rate per latent token and latent
/// reconstruction error.
pub fn stage1_loss<'t>(
    model: &MrtModel,
    bind: &Binding<'t, '_>,
    images: &[Var<'t>],
    targets: &[Vec<usize>],
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'t>, Stage1Terms)> {
    if images.len() != targets.len() || images.is_empty() {
        return Err(Error::InvalidArgument(format!("{} images for {} target grids", images.len(), targets.len())));
    }
    let (mut logits, mut z, mut z_hat, mut l, mut l_hat, mut bits) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut all_targets = Vec::new();
    for (x, t) in images.iter().zip(targets) {
        let (h, w) = dims(&x.value())?;
        let latents = model.encoder.encode_to_latents(bind, x)?;
        let f = model.rcm.forward_train(bind, &latents, rng)?;
        let (features, grid) = model.decoder.decode_features(bind, &f.latents_hat, h, w)?;
        let lg = model.aux_logits(bind, &features, grid.rows, grid.cols)?;
        if lg.shape()[0] != t.len() {
            return Err(Error::Shape { op: "stage1_loss", detail: format!("{} logits rows for {} targets", lg.shape()[0], t.len()) });
        }
        logits.push(lg);
        all_targets.extend_from_slice(t);
        z.push(f.z);
        z_hat.push(f.z_hat);
        l.push(latents);
        l_hat.push(f.latents_hat);
        bits.push(f.latent_bits.add(&f.hyper_bits)?);
    }
    let tokens: usize = l.iter().map(|v| v.shape()[0]).sum();
    let ce = Var::concat_rows(&logits)?.cross_entropy(&all_targets)?;
    let lfq = lfq_loss(&Var::concat_rows(&z)?, &Var::concat_rows(&z_hat)?, weights)?;
    let rate = sum_all(&bits)?.scale(1.0 / tokens as f64)?;
    let latent = latent_alignment_loss(&Var::concat_rows(&l_hat)?, &Var::concat_rows(&l)?)?;
    let total = ce.add(&lfq)?.add(&rate)?.add(&latent)?;
    let terms = Stage1Terms {
        cross_entropy: ce.item(),
        lfq: lfq.item(),
        rate: rate.item(),
        latent: latent.item(),
        total: total.item(),
    };
    Ok((total, terms))
}

/// Reconstructions and rate of a batch with the encoder evaluated off-tape.
fn stage2_forward<'t>(
    model: &MrtModel,
    bind: &Binding<'t, '_>,
    images: &[Tensor],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Var<'t>>, Var<'t>)> {
    let mut recon = Vec::with_capacity(images.len());
    let mut bits = Vec::with_capacity(images.len());
    let mut pixels = 0usize;
    for x in images {
        let (h, w) = dims(x)?;
        let latents = {
            let tape = Tape::new();
            let frozen = Binding::new(&tape, bind.store(), Trainable::Nothing);
            (*model.encoder.encode_to_latents(&frozen, &tape.constant(x.clone()))?.value()).clone()
        };
        let f = model.rcm.forward_train(bind, &bind.constant(latents), rng)?;
        recon.push(model.decoder.decode_from_latents(bind, &f.latents_hat, h, w)?);
        bits.push(f.latent_bits.add(&f.hyper_bits)?);
        pixels += h * w;
    }
    Ok((recon, sum_all(&bits)?.scale(1.0 / pixels as f64)?))
}

/// Stage-2 objective: l1 + perceptual + weighted adversarial + weighted
/// bits per pixel. Returns the generator-side loss and the reconstructions.
pub fn stage2_loss<'t>(
    x_hat: &[Var<'t>],
    x: &[Var<'t>],
    bpp: &Var<'t>,
    weights: &LossWeights,
    perceptual: (&PerceptualProxy, &Binding<'t, '_>),
    critic: Option<(&PatchDiscriminator, &Binding<'t, '_>)>,
) -> Result<(Var<'t>, Stage2Terms)> {
    if x_hat.len() != x.len() || x.is_empty() {
        return Err(Error::InvalidArgument(format!("{} reconstructions for {} images", x_hat.len(), x.len())));
    }
    let n = x.len() as f64;
    let mut l1 = Vec::new();
    let mut per = Vec::new();
    let mut adv = Vec::new();
    for (a, b) in x_hat.iter().zip(x) {
        l1.push(l1_loss(a, b)?);
        per.push(perceptual.0.loss(perceptual.1, a, b)?);
        if let Some((d, bind)) = critic {
            adv.push(generator_adversarial_loss(&d.logits(bind, a)?)?);
        }
    }
    let l1 = sum_all(&l1)?.scale(1.0 / n)?;
    let per = sum_all(&per)?.scale(1.0 / n)?;
    let mut total = l1.add(&per)?.add(&bpp.scale(weights.lambda)?)?;
    let mut adversarial = 0.0;
    if !adv.is_empty() {
        let a = sum_all(&adv)?.scale(1.0 / n)?;
        adversarial = a.item();
        total = total.add(&a.scale(weights.adversarial)?)?;
    }
    let terms = Stage2Terms {
        l1: l1.item(),
        perceptual: per.item(),
        adversarial,
        bpp: bpp.item(),
        total: total.item(),
        discriminator: 0.0,
    };
    Ok((total, terms))
}

/// Model, optimizer state and fixed auxiliaries for both stages.
pub struct Trainer {
    pub model: MrtModel,
    pub store: ParamStore,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    state: AdamState,
    rng: ChaCha8Rng,
    tokenizer: BlockTokenizer,
    perceptual: PerceptualProxy,
    critic: PatchDiscriminator,
    critic_store: ParamStore,
    critic_state: AdamState,
}

impl Trainer {
    pub fn new(model: MrtModel, store: ParamStore, weights: LossWeights, lr: f64, seed: u64) -> Result<Self> {
        weights.validate()?;
        let mut b = ParamBuilder::new(seed ^ 0xd15c);
        let critic = PatchDiscriminator::new(&mut b);
        let tokenizer = BlockTokenizer::new(model.cfg.target_codebook, model.cfg.target_block, seed ^ 0x70c);
        Ok(Self {
            model,
            store,
            weights,
            adam: AdamConfig { lr, ..Default::default() },
            state: AdamState::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            tokenizer,
            perceptual: PerceptualProxy::new(seed ^ 0xfea7),
            critic,
            critic_store: b.finish(),
            critic_state: AdamState::default(),
        })
    }

    pub fn targets(&self, image: &Tensor) -> Result<Vec<usize>> {
        Ok(self.tokenizer.codes(image)?.2)
    }

    /// One joint update of encoder, decoder, compression model and aux head.
    pub fn stage1_step(&mut self, images: &[Tensor]) -> Result<Stage1Terms> {
        let targets = images.iter().map(|x| self.targets(x)).collect::<Result<Vec<_>>>()?;
        let tape = Tape::new();
        let bind = Binding::new(&tape, &self.store, Trainable::All);
        let xs: Vec<Var<'_>> = images.iter().map(|x| tape.constant(x.clone())).collect();
        let (loss, terms) = stage1_loss(&self.model, &bind, &xs, &targets, &self.weights, &mut self.rng)?;
        if !terms.all_finite() {
            return Err(Error::NonFinite { op: "stage1_loss" });
        }
        let grads = bind.param_grads(&tape.backward(&loss)?);
        drop(bind);
        adam_step(&mut self.store, &grads, &mut self.state, &self.adam);
        Ok(terms)
    }

    /// One generator update followed by one critic update.
    pub fn stage2_step(&mut self, images: &[Tensor]) -> Result<Stage2Terms> {
        let (mut terms, fakes) = {
            let tape = Tape::new();
            let frozen: Vec<String> = FROZEN_IN_STAGE2.iter().map(|s| s.to_string()).collect();
            let bind = Binding::new(&tape, &self.store, Trainable::Except(frozen));
            let pbind = Binding::new(&tape, &self.perceptual.store, Trainable::Nothing);
            let cbind = Binding::new(&tape, &self.critic_store, Trainable::Nothing);
            let (recon, bpp) = stage2_forward(&self.model, &bind, images, &mut self.rng)?;
            let xs: Vec<Var<'_>> = images.iter().map(|x| tape.constant(x.clone())).collect();
            let (loss, terms) =
                stage2_loss(&recon, &xs, &bpp, &self.weights, (&self.perceptual, &pbind), Some((&self.critic, &cbind)))?;
            if !terms.all_finite() {
                return Err(Error::NonFinite { op: "stage2_loss" });
            }
            let grads = bind.param_grads(&tape.backward(&loss)?);
            let fakes: Vec<Tensor> = recon.iter().map(|r| (*r.value()).clone()).collect();
            drop(bind);
            adam_step(&mut self.store, &grads, &mut self.state, &self.adam);
            (terms, fakes)
        };
        let tape = Tape::new();
        let cbind = Binding::new(&tape, &self.critic_store, Trainable::All);
        let mut parts = Vec::with_capacity(images.len());
        for (x, f) in images.iter().zip(&fakes) {
            let real = self.critic.logits(&cbind, &tape.constant(x.clone()))?;
            let fake = self.critic.logits(&cbind, &tape.constant(f.clone()))?;
            parts.push(discriminator_loss(&real, &fake)?);
        }
        let loss = sum_all(&parts)?.scale(1.0 / images.len() as f64)?;
        terms.discriminator = loss.item();
        if !terms.discriminator.is_finite() {
            return Err(Error::NonFinite { op: "discriminator_loss" });
        }
        let grads = cbind.param_grads(&tape.backward(&loss)?);
        drop(cbind);
        adam_step(&mut self.critic_store, &grads, &mut self.critic_state, &self.adam);
        Ok(terms)
    }

    pub fn into_parts(self) -> (MrtModel, ParamStore) {
        (self.model, self.store)
    }
}

/// Batches cycle through `images` in order.
fn batch_at(images: &[Tensor], batch: usize, step: usize) -> Vec<Tensor> {
    (0..batch).map(|i| images[(step * batch + i) % images.len()].clone()).collect()
}

/// Runs `steps` stage-1 updates, calling `log` after each.
pub fn run_stage1(trainer: &mut Trainer, images: &[Tensor], batch: usize, steps: usize, mut log: impl FnMut(usize, &Stage1Terms)) -> Result<Vec<Stage1Terms>> {
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let terms = trainer.stage1_step(&batch_at(images, batch, step))?;
        log(step, &terms);
        out.push(terms);
    }
    Ok(out)
}

/// Runs `steps` alternating stage-2 updates, calling `log` after each.
pub fn run_stage2(trainer: &mut Trainer, images: &[Tensor], batch: usize, steps: usize, mut log: impl FnMut(usize, &Stage2Terms)) -> Result<Vec<Stage2Terms>> {
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let terms = trainer.stage2_step(&batch_at(images, batch, step))?;
        log(step, &terms);
        out.push(terms);
    }
    Ok(out)
}
