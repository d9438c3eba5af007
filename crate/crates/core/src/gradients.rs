//! Hand-derived backward pass for softmax -> l2 normalise -> cosine -> InfoNCE,
//! and a central-difference harness to check it.

use crate::error::{DcdcError, Result};
use crate::losses::{info_nce_terms, Anchoring, LossBreakdown, Temperature};
use crate::matrix::{normalize_rows_clamped, softmax_rows, Matrix, EPS_NORM};

/// Gradients of a scalar loss with respect to both logit batches.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub d_logits: Matrix,
    pub d_logits_aug: Matrix,
}

/// Per-term weights and anchoring applied to one head's combined contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub sample_weight: f64,
    pub class_weight: f64,
    pub anchoring: Anchoring,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            sample_weight: 1.0,
            class_weight: 1.0,
            anchoring: Anchoring::OneWay,
        }
    }
}

/// Loss and `d loss / d sim` for the InfoNCE of a square similarity matrix.
fn info_nce_with_grad(sim: &Matrix, tau: Temperature) -> (f64, Matrix) {
    let n = sim.rows();
    let t = tau.value();
    let loss = info_nce_terms(sim, tau).iter().sum::<f64>() / n as f64;
    let mut grad = sim.clone();
    let scale = 1.0 / (n as f64 * t);
    for i in 0..n {
        let row = grad.row_mut(i);
        row.iter_mut().for_each(|v| *v /= t);
        crate::matrix::softmax_in_place(row);
        row[i] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    (loss, grad)
}

fn anchored_with_grad(sim: &Matrix, tau: Temperature, anchoring: Anchoring) -> (f64, Matrix) {
    match anchoring {
        Anchoring::OneWay => info_nce_with_grad(sim, tau),
        Anchoring::Symmetric => {
            let (fwd, mut g) = info_nce_with_grad(sim, tau);
            let (bwd, gt) = info_nce_with_grad(&sim.transpose(), tau);
            g.add_assign(&gt.transpose()).expect("square");
            g.scale(0.5);
            (0.5 * (fwd + bwd), g)
        }
    }
}

/// Backward through row normalisation `a = p / max(|p|, eps)`.
fn normalize_rows_backward(unit: &Matrix, norms: &[f64], d_unit: &Matrix) -> Matrix {
    let mut out = d_unit.clone();
    for (i, &n) in norms.iter().enumerate() {
        if n <= EPS_NORM {
            out.row_mut(i).iter_mut().for_each(|v| *v /= EPS_NORM);
            continue;
        }
        let a = unit.row(i);
        let proj: f64 = a.iter().zip(d_unit.row(i)).map(|(x, y)| x * y).sum();
        for (o, &ai) in out.row_mut(i).iter_mut().zip(a) {
            *o = (*o - ai * proj) / n;
        }
    }
    out
}

/// InfoNCE over cosines between rows of `p` and rows of `q`, with gradients w.r.t. both.
fn row_view_loss_grad(
    p: &Matrix,
    q: &Matrix,
    tau: Temperature,
    anchoring: Anchoring,
) -> Result<(f64, Matrix, Matrix)> {
    let (a, na) = normalize_rows_clamped(p);
    let (b, nb) = normalize_rows_clamped(q);
    let sim = a.matmul_nt(&b)?;
    let (loss, g) = anchored_with_grad(&sim, tau, anchoring);
    let da = g.matmul(&b)?;
    let db = g.matmul_tn(&a)?;
    Ok((
        loss,
        normalize_rows_backward(&a, &na, &da),
        normalize_rows_backward(&b, &nb, &db),
    ))
}

fn softmax_backward(probs: &Matrix, d_probs: &Matrix) -> Matrix {
    let mut out = d_probs.clone();
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let inner: f64 = p.iter().zip(d_probs.row(i)).map(|(x, y)| x * y).sum();
        for (o, &pi) in out.row_mut(i).iter_mut().zip(p) {
            *o = pi * (*o - inner);
        }
    }
    out
}

/// Combined sample-view and class-view loss of `softmax(z)` vs `softmax(z_aug)` and its exact gradients.
pub fn dcdc_loss_grad(
    z: &Matrix,
    z_aug: &Matrix,
    tau: Temperature,
) -> Result<(LossBreakdown, GradPair)> {
    dcdc_loss_grad_with(z, z_aug, tau, &LossOptions::default())
}

/// As [`dcdc_loss_grad`] with per-term weights; the breakdown reports weighted terms.
pub fn dcdc_loss_grad_with(
    z: &Matrix,
    z_aug: &Matrix,
    tau: Temperature,
    opts: &LossOptions,
) -> Result<(LossBreakdown, GradPair)> {
    if z.shape() != z_aug.shape() {
        return Err(DcdcError::shape(format!(
            "logit batches {:?} vs {:?}",
            z.shape(),
            z_aug.shape()
        )));
    }
    let p = softmax_rows(z)?.into_matrix();
    let q = softmax_rows(z_aug)?.into_matrix();

    let (sample, mut dp, mut dq) = row_view_loss_grad(&p, &q, tau, opts.anchoring)?;
    dp.scale(opts.sample_weight);
    dq.scale(opts.sample_weight);

    let (class, dpt, dqt) =
        row_view_loss_grad(&p.transpose(), &q.transpose(), tau, opts.anchoring).map_err(
            |e| match e {
                DcdcError::Degenerate { index, eps, .. } => DcdcError::Degenerate {
                    what: "column",
                    index,
                    eps,
                },
                e => e,
            },
        )?;
    let (mut dpc, mut dqc) = (dpt.transpose(), dqt.transpose());
    dpc.scale(opts.class_weight);
    dqc.scale(opts.class_weight);
    dp.add_assign(&dpc)?;
    dq.add_assign(&dqc)?;

    let breakdown = LossBreakdown::new(opts.sample_weight * sample, opts.class_weight * class);
    let grads = GradPair {
        d_logits: softmax_backward(&p, &dp),
        d_logits_aug: softmax_backward(&q, &dq),
    };
    if !breakdown.total.is_finite() || !grads.d_logits.is_finite() || !grads.d_logits_aug.is_finite()
    {
        return Err(DcdcError::NonFinite("loss gradient".into()));
    }
    Ok((breakdown, grads))
}

/// Relative error with the floor used throughout the checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + step;
            let plus = f(&probe);
            probe[k] = x[k] - step;
            let minus = f(&probe);
            probe[k] = x[k];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Max relative error between `analytic` and central differences of `f` around `x`.
pub fn finite_diff_check_slice(
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(x.len(), analytic.len());
    numeric_gradient(f, x, step)
        .iter()
        .zip(analytic)
        .map(|(&n, &a)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// [`finite_diff_check_slice`] for functions of a matrix.
pub fn finite_diff_check(
    mut f: impl FnMut(&Matrix) -> f64,
    x: &Matrix,
    analytic: &Matrix,
    step: f64,
) -> f64 {
    let (rows, cols) = x.shape();
    finite_diff_check_slice(
        |v| f(&Matrix::from_vec(rows, cols, v.to_vec()).expect("finite probe")),
        x.as_slice(),
        analytic.as_slice(),
        step,
    )
}
