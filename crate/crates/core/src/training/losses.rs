//! Loss terms for both training stages.

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Weights of the composite objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub entropy: f64,
    pub commitment: f64,
    pub adversarial: f64,
    /// Rate weight of the fine-tuning stage.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { entropy: 0.25, commitment: 0.00625, adversarial: 0.05, lambda: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("entropy", self.entropy),
            ("commitment", self.commitment),
            ("adversarial", self.adversarial),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("loss weight {name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) });
    }
    Ok(())
}

/// Mean squared error between reconstructed and original latent tokens.
pub fn latent_alignment_loss<'t>(reconstructed: &Var<'t>, original: &Var<'t>) -> Result<Var<'t>> {
    same_shape("latent_alignment_loss", reconstructed, original)?;
    reconstructed.sub(original)?.square()?.mean()
}

/// Mean per-row entropy of the soft sign code minus the entropy of the
/// batch-mean code, in bits. `z` is `[rows x c_z]` pre-quantization.
pub fn lfq_entropy_loss<'t>(z: &Var<'t>) -> Result<Var<'t>> {
    let (rows, _) = z.value().dims2()?;
    let p = z.scale(2.0)?.sigmoid()?;
    let per_sample = p.binary_entropy_bits()?.sum()?.scale(1.0 / rows as f64)?;
    let batch = p.mean_rows()?.binary_entropy_bits()?.sum()?;
    per_sample.sub(&batch)
}

/// Mean squared gap between `z` and its quantized value. The quantized side
/// is treated as a constant.
pub fn lfq_commitment_loss<'t>(z: &Var<'t>, z_quantized: &Var<'t>) -> Result<Var<'t>> {
    same_shape("lfq_commitment_loss", z, z_quantized)?;
    let target = z.tape().constant((*z_quantized.value()).clone());
    z.sub(&target)?.square()?.mean()
}

pub fn lfq_loss<'t>(z: &Var<'t>, z_quantized: &Var<'t>, w: &LossWeights) -> Result<Var<'t>> {
    lfq_entropy_loss(z)?.scale(w.entropy)?.add(&lfq_commitment_loss(z, z_quantized)?.scale(w.commitment)?)
}

/// Mean absolute pixel error.
pub fn l1_loss<'t>(x_hat: &Var<'t>, x: &Var<'t>) -> Result<Var<'t>> {
    same_shape("l1_loss", x_hat, x)?;
    x_hat.sub(x)?.abs()?.mean()
}

/// Non-saturating generator loss: mean softplus(-logits).
pub fn generator_adversarial_loss<'t>(fake_logits: &Var<'t>) -> Result<Var<'t>> {
    fake_logits.neg()?.softplus()?.mean()
}

/// Discriminator loss: mean softplus(-real) + mean softplus(fake).
pub fn discriminator_loss<'t>(real_logits: &Var<'t>, fake_logits: &Var<'t>) -> Result<Var<'t>> {
    real_logits.neg()?.softplus()?.mean()?.add(&fake_logits.softplus()?.mean()?)
}
