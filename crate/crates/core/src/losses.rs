//! Contrastive objectives over pairs of assignment batches.
//!
//! Both losses are InfoNCE over a cosine-similarity matrix whose diagonal holds the
//! positive pairs: rows of `U` against rows of `U'` for the sample view, columns
//! for the class view. The expectation is the uniform mean over anchors.

use crate::error::{DcdcError, Result};
use crate::matrix::{prob_cosine_cols, prob_cosine_rows, Matrix, ProbBatch};

/// Temperature dividing the similarities before exponentiation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Temperature(tau))
        } else {
            Err(DcdcError::config(format!("temperature must be > 0, got {tau}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Which side of the similarity matrix supplies the anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Anchoring {
    /// Rows (or columns) of the original batch anchor against the augmented batch.
    #[default]
    OneWay,
    /// Mean of both anchoring directions.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub sample_loss: f64,
    pub class_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(sample_loss: f64, class_loss: f64) -> Self {
        LossBreakdown {
            sample_loss,
            class_loss,
            total: sample_loss + class_loss,
        }
    }

    pub fn weighted(self, sample_weight: f64, class_weight: f64) -> Self {
        LossBreakdown::new(sample_weight * self.sample_loss, class_weight * self.class_loss)
    }

    pub fn scaled(self, w: f64) -> Self {
        self.weighted(w, w)
    }

    pub fn add(self, other: LossBreakdown) -> Self {
        LossBreakdown::new(
            self.sample_loss + other.sample_loss,
            self.class_loss + other.class_loss,
        )
    }
}

/// `exp(cos / tau)`.
pub fn density_ratio(cos_value: f64, tau: Temperature) -> f64 {
    debug_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&cos_value));
    (cos_value / tau.0).exp()
}

fn check_square(sim: &Matrix) -> Result<()> {
    if sim.rows() != sim.cols() {
        return Err(DcdcError::shape(format!(
            "similarity matrix must be square, got {}x{}",
            sim.rows(),
            sim.cols()
        )));
    }
    Ok(())
}

/// Per-row terms `logsumexp_j(sim[i][j]/tau) - sim[i][i]/tau`.
pub(crate) fn info_nce_terms(sim: &Matrix, tau: Temperature) -> Vec<f64> {
    (0..sim.rows())
        .map(|i| {
            let row = sim.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau.0;
            let sum: f64 = row.iter().map(|s| (s / tau.0 - max).exp()).sum();
            sum.ln() - (row[i] / tau.0 - max)
        })
        .collect()
}

/// Mean negative log-softmax of the diagonal entries of `sim / tau`.
pub fn info_nce(sim: &Matrix, tau: Temperature) -> Result<f64> {
    check_square(sim)?;
    let n = sim.rows();
    if n == 0 {
        return Err(DcdcError::shape("empty similarity matrix"));
    }
    if !sim.is_finite() {
        return Err(DcdcError::NonFinite("similarity matrix".into()));
    }
    Ok(info_nce_terms(sim, tau).iter().sum::<f64>() / n as f64)
}

fn anchored_info_nce(sim: &Matrix, tau: Temperature, anchoring: Anchoring) -> Result<f64> {
    match anchoring {
        Anchoring::OneWay => info_nce(sim, tau),
        Anchoring::Symmetric => {
            Ok(0.5 * (info_nce(sim, tau)? + info_nce(&sim.transpose(), tau)?))
        }
    }
}

fn check_pair(u: &ProbBatch, u_aug: &ProbBatch) -> Result<()> {
    if u.matrix().shape() != u_aug.matrix().shape() {
        return Err(DcdcError::shape(format!(
            "assignment batches {:?} vs {:?}",
            u.matrix().shape(),
            u_aug.matrix().shape()
        )));
    }
    Ok(())
}

/// Sample-view loss: InfoNCE over row cosines, original rows anchoring.
pub fn sample_contrastive(u: &ProbBatch, u_aug: &ProbBatch, tau: Temperature) -> Result<f64> {
    sample_contrastive_with(u, u_aug, tau, Anchoring::OneWay)
}

pub fn sample_contrastive_with(
    u: &ProbBatch,
    u_aug: &ProbBatch,
    tau: Temperature,
    anchoring: Anchoring,
) -> Result<f64> {
    check_pair(u, u_aug)?;
    let sim = prob_cosine_rows(u, u_aug)?;
    anchored_info_nce(&sim, tau, anchoring)
}

/// Class-view loss: InfoNCE over column cosines. An all-zero column has cosine 0
/// with every other column.
pub fn class_contrastive(u: &ProbBatch, u_aug: &ProbBatch, tau: Temperature) -> Result<f64> {
    class_contrastive_with(u, u_aug, tau, Anchoring::OneWay)
}

pub fn class_contrastive_with(
    u: &ProbBatch,
    u_aug: &ProbBatch,
    tau: Temperature,
    anchoring: Anchoring,
) -> Result<f64> {
    check_pair(u, u_aug)?;
    let sim = prob_cosine_cols(u, u_aug)?;
    anchored_info_nce(&sim, tau, anchoring)
}

/// Sum of the sample-view and class-view losses, both reported.
pub fn dcdc_loss(u: &ProbBatch, u_aug: &ProbBatch, tau: Temperature) -> Result<LossBreakdown> {
    dcdc_loss_with(u, u_aug, tau, Anchoring::OneWay)
}

pub fn dcdc_loss_with(
    u: &ProbBatch,
    u_aug: &ProbBatch,
    tau: Temperature,
    anchoring: Anchoring,
) -> Result<LossBreakdown> {
    Ok(LossBreakdown::new(
        sample_contrastive_with(u, u_aug, tau, anchoring)?,
        class_contrastive_with(u, u_aug, tau, anchoring)?,
    ))
}

/// Upper bound `log(1 + (n-1) e^{1/tau})` for similarities in [0, 1].
pub fn info_nce_upper_bound(n: usize, tau: Temperature) -> f64 {
    (1.0 + (n as f64 - 1.0) * (1.0 / tau.0).exp()).ln()
}
