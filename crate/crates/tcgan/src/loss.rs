//! Loss terms of the coupled-GAN objective and their weighted combination.
//!
//! All losses are graph operations so one backward pass covers the full
//! objective. Every expectation is a mean reduction, which keeps the weights
//! resolution-independent. The adversarial terms use the least-squares form.

use crate::autodiff::{lit, Graph, Scalar, VarId};
use crate::error::{Error, Result};

/// Weights of the combined objective: adversarial, target-consistency,
/// identity. Defaults to (1, 40, 5).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 40.0,
            lambda3: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda3 >= 0.0;
        let finite =
            self.lambda1.is_finite() && self.lambda2.is_finite() && self.lambda3.is_finite();
        if !(ok && finite) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got ({}, {}, {})",
                self.lambda1, self.lambda2, self.lambda3
            )));
        }
        Ok(())
    }
}

/// Generator-phase loss components for one iteration, as plain numbers for
/// logging. `total` equals `λ1·(gan1+gan2) + λ2·tc + λ3·(idt1+idt2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub gan1: f64,
    pub gan2: f64,
    pub tc: f64,
    pub idt1: f64,
    pub idt2: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn csv_header() -> &'static str {
        "iter,gan1,gan2,tc,idt1,idt2,total"
    }

    pub fn csv_row(&self, iter: u64) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            iter, self.gan1, self.gan2, self.tc, self.idt1, self.idt2, self.total
        )
    }
}

/// Mean absolute difference between the two composed restoration targets
/// `(x + r1)` and `(x + r2)`. The image terms cancel algebraically, so the
/// value is computed directly on the residuals — exactly invariant in `x`,
/// which is passed for shape validation only.
pub fn target_consistency<F: Scalar>(
    g: &mut Graph<F>,
    x: VarId,
    r1: VarId,
    r2: VarId,
) -> Result<VarId> {
    let xs = g.value(x).shape().to_vec();
    for r in [r1, r2] {
        let rs = g.value(r).shape();
        if rs != xs.as_slice() {
            return Err(Error::ShapeMismatch {
                context: "target consistency",
                expected: xs.clone(),
                got: rs.to_vec(),
            });
        }
    }
    let d = g.sub(r1, r2);
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Mean absolute value of the residual a generator predicts for a real
/// non-shadow image; pulls the generator toward the identity map there.
pub fn identity_loss<F: Scalar>(g: &mut Graph<F>, residual_on_nonshadow: VarId) -> VarId {
    let a = g.abs(residual_on_nonshadow);
    g.mean(a)
}

/// Least-squares generator loss: `mean((fake_scores − 1)²)`.
pub fn lsgan_generator_loss<F: Scalar>(g: &mut Graph<F>, fake_scores: VarId) -> VarId {
    let shifted = g.add_scalar(fake_scores, -F::one());
    let sq = g.square(shifted);
    g.mean(sq)
}

/// Least-squares discriminator loss:
/// `0.5·mean((real − 1)²) + 0.5·mean(fake²)`. The two maps are reduced
/// independently and may have different shapes.
pub fn lsgan_discriminator_loss<F: Scalar>(
    g: &mut Graph<F>,
    real_scores: VarId,
    fake_scores: VarId,
) -> VarId {
    let rs = g.add_scalar(real_scores, -F::one());
    let rsq = g.square(rs);
    let real_term = g.mean(rsq);
    let fsq = g.square(fake_scores);
    let fake_term = g.mean(fsq);
    let half = lit::<F>(0.5);
    g.weighted_sum(&[(real_term, half), (fake_term, half)])
}

/// Assembles the total objective node and a logging bundle from the five
/// scalar component nodes. Rejects non-finite components by name.
pub fn combine<F: Scalar>(
    g: &mut Graph<F>,
    w: &LossWeights,
    gan1: VarId,
    gan2: VarId,
    tc: VarId,
    idt1: VarId,
    idt2: VarId,
) -> Result<(VarId, LossBundle)> {
    let components = [
        ("gan1", gan1),
        ("gan2", gan2),
        ("tc", tc),
        ("idt1", idt1),
        ("idt2", idt2),
    ];
    for (name, id) in components {
        if !g.scalar(id).to_f64().is_finite() {
            return Err(Error::NonFinite {
                term: name,
                iteration: 0,
            });
        }
    }
    let l1 = lit::<F>(w.lambda1);
    let l2 = lit::<F>(w.lambda2);
    let l3 = lit::<F>(w.lambda3);
    let total = g.weighted_sum(&[(gan1, l1), (gan2, l1), (tc, l2), (idt1, l3), (idt2, l3)]);
    let total_v = g.scalar(total).to_f64();
    if !total_v.is_finite() {
        return Err(Error::NonFinite {
            term: "total",
            iteration: 0,
        });
    }
    Ok((
        total,
        LossBundle {
            gan1: g.scalar(gan1).to_f64(),
            gan2: g.scalar(gan2).to_f64(),
            tc: g.scalar(tc).to_f64(),
            idt1: g.scalar(idt1).to_f64(),
            idt2: g.scalar(idt2).to_f64(),
            total: total_v,
        },
    ))
}
