//! Generator reconstruction losses, adversarial losses and the
//! conditional per-frame hinge loss for the discriminators.
//!
//! Per-frame scores are always aggregated by mean, so loss magnitude does
//! not depend on utterance length.

use crate::tensor::{Real, Result, TensorError, Var};

fn same_shape<F: Real>(op: &'static str, a: &Var<'_, F>, b: &Var<'_, F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn non_empty<F: Real>(op: &'static str, s: &Var<'_, F>) -> Result<()> {
    if s.shape().iter().product::<usize>() == 0 {
        return Err(TensorError::EmptyReduction(op));
    }
    Ok(())
}

/// Mean absolute error between predicted and true acoustic frames.
pub fn gen_acoustic_loss<'t, F: Real>(pred: Var<'t, F>, truth: Var<'t, F>) -> Result<Var<'t, F>> {
    same_shape("gen_acoustic_loss", &pred, &truth)?;
    Ok(pred.sub(&truth)?.abs().mean_all())
}

/// The four prosodic channels, all token-aligned.
#[derive(Clone, Copy)]
pub struct Prosody<'t, F: Real> {
    pub pitch: Var<'t, F>,
    pub energy: Var<'t, F>,
    pub duration: Var<'t, F>,
    pub embedding: Var<'t, F>,
}

impl<'t, F: Real> Prosody<'t, F> {
    pub fn channels(&self) -> [Var<'t, F>; 4] {
        [self.pitch, self.energy, self.duration, self.embedding]
    }

    pub fn detach(&self) -> Self {
        Self {
            pitch: self.pitch.detach(),
            energy: self.energy.detach(),
            duration: self.duration.detach(),
            embedding: self.embedding.detach(),
        }
    }
}

/// Per-channel MSE averaged with equal weight over the four channels.
pub fn gen_prosodic_loss<'t, F: Real>(pred: &Prosody<'t, F>, truth: &Prosody<'t, F>) -> Result<Var<'t, F>> {
    let mut total: Option<Var<'t, F>> = None;
    for (p, t) in pred.channels().iter().zip(truth.channels().iter()) {
        same_shape("gen_prosodic_loss", p, t)?;
        let mse = p.sub(t)?.square().mean_all();
        total = Some(match total {
            None => mse,
            Some(acc) => acc.add(&mse)?,
        });
    }
    Ok(total.expect("four channels").scale(F::of(0.25)))
}

/// `-mean(D(fake))`.
pub fn adv_generator_loss<'t, F: Real>(scores_fake: Var<'t, F>) -> Result<Var<'t, F>> {
    non_empty("adv_generator_loss", &scores_fake)?;
    Ok(scores_fake.mean_all().neg())
}

/// `mean(-min(0, s_real - 1)) + mean(-min(0, -s_fake - 1))`.
pub fn hinge_discriminator_loss<'t, F: Real>(scores_real: Var<'t, F>, scores_fake: Var<'t, F>) -> Result<Var<'t, F>> {
    non_empty("hinge_discriminator_loss", &scores_real)?;
    non_empty("hinge_discriminator_loss", &scores_fake)?;
    let one = F::one();
    let real = scores_real.add_const(-one).min_const(F::zero()).mean_all().neg();
    let fake = scores_fake.neg().add_const(-one).min_const(F::zero()).mean_all().neg();
    real.add(&fake)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("non-finite loss component {name} = {value}")]
    NonFinite { name: &'static str, value: f64 },
}

fn finite(name: &'static str, value: f64) -> std::result::Result<f64, LossError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(LossError::NonFinite { name, value })
    }
}

/// `l_ga + l_gp + lambda_a * (l_aa + l_ap)`, summed in that order.
pub fn total_generator_loss(l_ga: f64, l_gp: f64, l_aa: f64, l_ap: f64, lambda_a: f64) -> std::result::Result<f64, LossError> {
    let recon = finite("l_ga", l_ga)? + finite("l_gp", l_gp)?;
    let adv = finite("l_aa", l_aa)? + finite("l_ap", l_ap)?;
    Ok(recon + finite("lambda_a", lambda_a)? * adv)
}

/// `l_da + l_dp`.
pub fn total_discriminator_loss(l_da: f64, l_dp: f64) -> std::result::Result<f64, LossError> {
    Ok(finite("l_da", l_da)? + finite("l_dp", l_dp)?)
}

/// Scalar values of every loss term for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBundle {
    pub l_ga: f64,
    pub l_gp: f64,
    pub l_aa: f64,
    pub l_ap: f64,
    pub l_da: f64,
    pub l_dp: f64,
    pub lambda_a: f64,
}

impl LossBundle {
    pub fn generator_total(&self) -> std::result::Result<f64, LossError> {
        total_generator_loss(self.l_ga, self.l_gp, self.l_aa, self.l_ap, self.lambda_a)
    }

    pub fn discriminator_total(&self) -> std::result::Result<f64, LossError> {
        total_discriminator_loss(self.l_da, self.l_dp)
    }

    /// Elementwise sum, used to average bundles over a batch.
    pub fn accumulate(&mut self, other: &LossBundle) {
        self.l_ga += other.l_ga;
        self.l_gp += other.l_gp;
        self.l_aa += other.l_aa;
        self.l_ap += other.l_ap;
        self.l_da += other.l_da;
        self.l_dp += other.l_dp;
    }

    pub fn scaled(&self, c: f64) -> LossBundle {
        LossBundle {
            l_ga: self.l_ga * c,
            l_gp: self.l_gp * c,
            l_aa: self.l_aa * c,
            l_ap: self.l_ap * c,
            l_da: self.l_da * c,
            l_dp: self.l_dp * c,
            lambda_a: self.lambda_a,
        }
    }
}
