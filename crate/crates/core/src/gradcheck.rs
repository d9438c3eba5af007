//! End-to-end check of parameter gradients against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_rows, VectorAugment};
use crate::error::{DcdcError, Result};
use crate::gradients::{dcdc_loss_grad, finite_diff_check_slice};
use crate::losses::Temperature;
use crate::matrix::Matrix;
use crate::model::{Model, ModelConfig};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-4;
/// Largest `batch * (num_clusters + over_clusters)` accepted.
pub const MAX_ENTRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSpec {
    pub batch: usize,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_clusters: usize,
    pub over_clusters: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            batch: 8,
            input_dim: 4,
            hidden_dims: vec![6],
            num_clusters: 5,
            over_clusters: 10,
            tau: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub params: usize,
    pub loss: f64,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < PASS_THRESHOLD
    }
}

/// Loss of both heads on a pair of views, and its gradient w.r.t. every parameter.
fn objective(model: &Model, x: &Matrix, x_aug: &Matrix, tau: Temperature) -> Result<(f64, Vec<f64>)> {
    let a = model.forward(x)?;
    let b = model.forward(x_aug)?;
    let (main, g) = dcdc_loss_grad(&a.logits, &b.logits, tau)?;
    let (over, h) = dcdc_loss_grad(&a.logits_over, &b.logits_over, tau)?;
    let mut grads = model.backward(&a.cache, &g.d_logits, &h.d_logits)?;
    grads.add_assign(&model.backward(&b.cache, &g.d_logits_aug, &h.d_logits_aug)?);
    Ok((main.total + over.total, grads.flatten()))
}

/// Random model and batch from `spec.seed`; compares the analytic gradient of the
/// two-head loss with central differences over every parameter.
pub fn run(spec: &GradCheckSpec) -> Result<GradCheckReport> {
    let tau = Temperature::new(spec.tau)?;
    if spec.batch == 0 {
        return Err(DcdcError::Config("batch must be >= 1".into()));
    }
    let entries = spec.batch * (spec.num_clusters + spec.over_clusters);
    if entries > MAX_ENTRIES {
        return Err(DcdcError::Config(format!(
            "{entries} logit entries exceeds the limit of {MAX_ENTRIES}"
        )));
    }
    let mut model = Model::init(ModelConfig {
        input_dim: spec.input_dim,
        hidden_dims: spec.hidden_dims.clone(),
        num_clusters: spec.num_clusters,
        over_clusters: spec.over_clusters,
        seed: spec.seed,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let x = Matrix::from_fn(spec.batch, spec.input_dim, |_, _| rng.random_range(-1.0..1.0));
    let streams: Vec<u64> = (0..spec.batch as u64).collect();
    let x_aug = augment_rows(&x, &VectorAugment::default(), spec.seed, &streams);

    let (loss, analytic) = objective(&model, &x, &x_aug, tau)?;
    let theta = model.flatten();
    let mut probe_error = None;
    let max_rel_error = finite_diff_check_slice(
        |p| {
            let run = model
                .set_flat(p)
                .and_then(|_| objective(&model, &x, &x_aug, tau));
            match run {
                Ok((l, _)) => l,
                Err(e) => {
                    probe_error.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &theta,
        &analytic,
        DEFAULT_STEP,
    );
    if let Some(e) = probe_error {
        return Err(e);
    }
    if !max_rel_error.is_finite() {
        return Err(DcdcError::NonFinite("finite-difference gradient".into()));
    }
    Ok(GradCheckReport {
        params: theta.len(),
        loss,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_passes() {
        let r = run(&GradCheckSpec::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.params, 4 * 6 + 6 + 6 * 5 + 5 + 6 * 10 + 10);
    }

    #[test]
    fn single_row_single_cluster_is_exactly_zero() {
        let spec = GradCheckSpec {
            batch: 1,
            num_clusters: 1,
            over_clusters: 2,
            ..GradCheckSpec::default()
        };
        assert_eq!(run(&spec).unwrap().max_rel_error, 0.0);
    }

    #[test]
    fn reports_are_deterministic() {
        let spec = GradCheckSpec {
            seed: 9,
            ..GradCheckSpec::default()
        };
        assert_eq!(run(&spec).unwrap(), run(&spec).unwrap());
    }

    #[test]
    fn oversized_and_invalid_specs_are_rejected() {
        let big = GradCheckSpec {
            batch: 1000,
            num_clusters: 10,
            over_clusters: 70,
            ..GradCheckSpec::default()
        };
        assert!(matches!(run(&big), Err(DcdcError::Config(_))));
        let bad = GradCheckSpec {
            over_clusters: 2,
            ..GradCheckSpec::default()
        };
        assert!(run(&bad).is_err());
    }
}
