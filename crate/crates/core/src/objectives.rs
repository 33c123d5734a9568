//! Adversarial and reconstruction objectives.
//!
//! Discriminator (maximised, so `-L_D` is minimised):
//!
//! ```text
//! L_D = E[log D(I)] + E[log(1 - D(G(I,T̂)))]
//!     + γ₁ E[log D(I,T)] + γ₁ E[log(1 - D(G(I,T̂),T̂))]
//! ```
//!
//! Generator (minimised):
//!
//! ```text
//! L_G = -(E[log D(G(I,T̂))] + γ₁ E[log D(G(I,T̂),T̂)]) + γ₂ L_R
//! ```
//!
//! with `L_R` the mean absolute error between `I` and `G(I,T)` on positive
//! pairs. Scores are clamped to `[ε, 1-ε]` before any logarithm.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorMode;
use crate::nn::scalar;

pub const SCORE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the conditional terms relative to the unconditional ones.
    pub gamma1: f64,
    /// Weight of the reconstruction term.
    pub gamma2: f64,
}

impl LossWeights {
    pub fn for_mode(mode: GeneratorMode) -> Self {
        Self {
            gamma1: 10.0,
            gamma2: match mode {
                GeneratorMode::Single => 2.0,
                GeneratorMode::Multi => 3.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0) {
            return Err(Error::Data(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Rejects scores outside `[0, 1]` or non-finite, then clamps.
pub fn clamp_scores(scores: &Tensor, what: &str) -> Result<Tensor> {
    let lo = scalar(&scores.min_all()?)?;
    let hi = scalar(&scores.max_all()?)?;
    if !(lo >= 0.0 && hi <= 1.0) {
        return Err(Error::NumericalFailure(format!(
            "{what} scores outside [0, 1]: min {lo}, max {hi}"
        )));
    }
    Ok(scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)?)
}

fn mean_log(scores: &Tensor, what: &str) -> Result<Tensor> {
    Ok(clamp_scores(scores, what)?.log()?.mean_all()?)
}

fn mean_log_complement(scores: &Tensor, what: &str) -> Result<Tensor> {
    Ok((1.0 - clamp_scores(scores, what)?)?.log()?.mean_all()?)
}

/// Discriminator outputs for one batch.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorScores<'a> {
    pub real_unconditional: &'a Tensor,
    pub fake_unconditional: &'a Tensor,
    pub real_conditional: &'a Tensor,
    pub fake_conditional: &'a Tensor,
}

/// `-L_D` with its four signed, weighted contributions.
#[derive(Clone, Debug)]
pub struct DiscriminatorLoss {
    pub total: Tensor,
    pub real_unconditional: f64,
    pub fake_unconditional: f64,
    pub real_conditional: f64,
    pub fake_conditional: f64,
}

pub fn discriminator_loss(scores: DiscriminatorScores, weights: &LossWeights) -> Result<DiscriminatorLoss> {
    weights.validate()?;
    let ru = mean_log(scores.real_unconditional, "real unconditional")?.neg()?;
    let fu = mean_log_complement(scores.fake_unconditional, "fake unconditional")?.neg()?;
    let rc = (mean_log(scores.real_conditional, "real conditional")? * -weights.gamma1)?;
    let fc = (mean_log_complement(scores.fake_conditional, "fake conditional")? * -weights.gamma1)?;
    let total = (((&ru + &fu)? + &rc)? + &fc)?;
    Ok(DiscriminatorLoss {
        real_unconditional: scalar(&ru)?,
        fake_unconditional: scalar(&fu)?,
        real_conditional: scalar(&rc)?,
        fake_conditional: scalar(&fc)?,
        total,
    })
}

/// `L_G` with its three signed, weighted contributions.
#[derive(Clone, Debug)]
pub struct GeneratorLoss {
    pub total: Tensor,
    pub unconditional: f64,
    pub conditional: f64,
    pub reconstruction: f64,
}

/// `reconstruction` is the scalar `L_R`, already computed on positive pairs.
pub fn generator_loss(
    fake_unconditional: &Tensor,
    fake_conditional: &Tensor,
    reconstruction: &Tensor,
    weights: &LossWeights,
) -> Result<GeneratorLoss> {
    weights.validate()?;
    let u = mean_log(fake_unconditional, "generated unconditional")?.neg()?;
    let c = (mean_log(fake_conditional, "generated conditional")? * -weights.gamma1)?;
    let r = (reconstruction * weights.gamma2)?;
    let total = ((&u + &c)? + &r)?;
    Ok(GeneratorLoss {
        unconditional: scalar(&u)?,
        conditional: scalar(&c)?,
        reconstruction: scalar(&r)?,
        total,
    })
}

/// Mean absolute per-element difference (scalar tensor).
pub fn reconstruction_loss(original: &Tensor, reconstructed: &Tensor) -> Result<Tensor> {
    if original.dims() != reconstructed.dims() {
        return Err(Error::Shape(format!(
            "reconstruction of shape {:?} compared with {:?}",
            reconstructed.dims(),
            original.dims()
        )));
    }
    Ok((original - reconstructed)?.abs()?.mean_all()?)
}

/// Converts an L1 value computed in `[-1, 1]` to the `[0, 1]` display range.
pub fn to_display_l1(l1: f64) -> f64 {
    l1 / 2.0
}

/// Loss values of one training step. Totals are the sums of their terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub discriminator_total: f64,
    pub generator_total: f64,
    pub real_unconditional: f64,
    pub fake_unconditional: f64,
    pub real_conditional: f64,
    pub fake_conditional: f64,
    pub generator_unconditional: f64,
    pub generator_conditional: f64,
    /// `γ₂ · L_R`.
    pub reconstruction: f64,
    /// Unweighted `L_R` in the `[0, 1]` display range.
    pub reconstruction_l1: f64,
}

impl LossReport {
    pub fn from_parts(d: &DiscriminatorLoss, g: &GeneratorLoss, l1: f64) -> Result<Self> {
        Ok(Self {
            discriminator_total: scalar(&d.total)?,
            generator_total: scalar(&g.total)?,
            real_unconditional: d.real_unconditional,
            fake_unconditional: d.fake_unconditional,
            real_conditional: d.real_conditional,
            fake_conditional: d.fake_conditional,
            generator_unconditional: g.unconditional,
            generator_conditional: g.conditional,
            reconstruction: g.reconstruction,
            reconstruction_l1: to_display_l1(l1),
        })
    }

    /// Largest deviation between a total and the sum of its terms.
    pub fn term_sum_error(&self) -> f64 {
        let d = self.real_unconditional
            + self.fake_unconditional
            + self.real_conditional
            + self.fake_conditional;
        let g = self.generator_unconditional + self.generator_conditional + self.reconstruction;
        (d - self.discriminator_total)
            .abs()
            .max((g - self.generator_total).abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;
    use candle_core::DType;

    fn full(v: f64, n: usize) -> Tensor {
        Tensor::full(v, n, &device()).unwrap()
    }

    fn d_loss(s: f64, g1: f64) -> DiscriminatorLoss {
        let t = full(s, 4);
        discriminator_loss(
            DiscriminatorScores {
                real_unconditional: &t,
                fake_unconditional: &t,
                real_conditional: &t,
                fake_conditional: &t,
            },
            &LossWeights {
                gamma1: g1,
                gamma2: 0.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn half_scores_closed_forms() {
        let l = d_loss(0.5, 0.0);
        assert!((scalar(&l.total).unwrap() - (-2.0 * 0.5f64.ln())).abs() < 1e-12);
        assert!((scalar(&l.total).unwrap() - 1.3863).abs() < 1e-4);
        let l = d_loss(0.5, 10.0);
        assert!((scalar(&l.total).unwrap() + 22.0 * 0.5f64.ln()).abs() < 1e-12);

        let half = full(0.5, 4);
        let g = generator_loss(&half, &half, &full(0.0, 1).sum_all().unwrap(), &LossWeights {
            gamma1: 10.0,
            gamma2: 3.0,
        })
        .unwrap();
        assert!((scalar(&g.total).unwrap() + 11.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_weight_dominates_at_saturated_scores() {
        let one = full(1.0, 4);
        let r = Tensor::new(1.0f64, &device()).unwrap();
        let g = generator_loss(&one, &one, &r, &LossWeights {
            gamma1: 10.0,
            gamma2: 3.0,
        })
        .unwrap();
        assert!((scalar(&g.total).unwrap() - 3.0).abs() < 1e-5);
    }

    #[test]
    fn out_of_range_scores_are_numerical_failures() {
        let bad = full(1.5, 2);
        let ok = full(0.5, 2);
        let err = discriminator_loss(
            DiscriminatorScores {
                real_unconditional: &bad,
                fake_unconditional: &ok,
                real_conditional: &ok,
                fake_conditional: &ok,
            },
            &LossWeights::for_mode(GeneratorMode::Multi),
        );
        assert!(matches!(err, Err(Error::NumericalFailure(_))));
        let nan = full(f64::NAN, 2);
        assert!(matches!(
            generator_loss(&nan, &ok, &Tensor::new(0.0f64, &device()).unwrap(), &LossWeights::for_mode(GeneratorMode::Single)),
            Err(Error::NumericalFailure(_))
        ));
    }

    #[test]
    fn reconstruction_simple_cases() {
        let a = Tensor::ones((1, 3, 2, 2), DType::F64, &device()).unwrap();
        let z = a.zeros_like().unwrap();
        assert_eq!(scalar(&reconstruction_loss(&a, &a).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&reconstruction_loss(&a, &z).unwrap()).unwrap(), 1.0);
        let other = Tensor::ones((1, 3, 2, 1), DType::F64, &device()).unwrap();
        assert!(matches!(reconstruction_loss(&a, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn default_weights() {
        assert_eq!(LossWeights::for_mode(GeneratorMode::Single), LossWeights { gamma1: 10.0, gamma2: 2.0 });
        assert_eq!(LossWeights::for_mode(GeneratorMode::Multi), LossWeights { gamma1: 10.0, gamma2: 3.0 });
    }
}
