//! Finite-difference gradient verification.
//!
//! The central-difference computation here is the independent oracle used
//! by the test suites: it never touches the reverse-mode sweep it checks.

use std::collections::BTreeMap;

use crate::data::TrainExample;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::GenRerankerModel;
use crate::scalar::Scalar;
use crate::training::{omtp_loss, TrainConfig};

/// Compare an analytic gradient against central finite differences.
///
/// `value` evaluates the scalar function at a point; `analytic` is the
/// gradient to verify, one entry per coordinate of `point`. Returns the
/// maximum over coordinates of
/// `|analytic_i - fd_i| / (|analytic_i| + 1e-8)`.
///
/// Large errors are reported, not failed on; callers assert their own
/// thresholds. `epsilon` must be strictly positive.
pub fn finite_diff_check(
    mut value: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    epsilon: f64,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if analytic.len() != point.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient has {} coordinates but the point has {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut work = point.to_vec();
    for i in 0..point.len() {
        let saved = work[i];
        work[i] = saved + epsilon;
        let plus = value(&work);
        work[i] = saved - epsilon;
        let minus = value(&work);
        work[i] = saved;
        let fd = (plus - minus) / (2.0 * epsilon);
        let err = (analytic[i] - fd).abs() / (analytic[i].abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Like [`finite_diff_check`] but normalized by the gradient's largest
/// magnitude instead of per coordinate.
///
/// The per-coordinate ratio is meaningless for coordinates whose true
/// gradient is near zero: the truncation error of central differences
/// (~epsilon^2) dwarfs a denominator of 1e-8. Whole-tensor checks over a
/// model's parameters use this scale-relative form.
pub fn finite_diff_check_scaled(
    mut value: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    epsilon: f64,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if analytic.len() != point.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient has {} coordinates but the point has {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut work = point.to_vec();
    let mut fds = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let saved = work[i];
        work[i] = saved + epsilon;
        let plus = value(&work);
        work[i] = saved - epsilon;
        let minus = value(&work);
        work[i] = saved;
        fds.push((plus - minus) / (2.0 * epsilon));
    }
    let scale = analytic
        .iter()
        .chain(fds.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let denom = scale + 1e-8;
    let worst = analytic
        .iter()
        .zip(&fds)
        .fold(0.0f64, |m, (&a, &fd)| m.max((a - fd).abs() / denom));
    Ok(worst)
}

/// Worst scale-relative gradient error per parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter name, max_i |analytic_i - fd_i| / (scale + 1e-8))`
    /// where `scale` is the larger infinity norm of the two gradients.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> (&str, f64) {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(name, err)| (name.as_str(), *err))
            .expect("empty gradcheck report")
    }
}

fn combined_loss_value<E: Scalar>(
    model: &GenRerankerModel<E>,
    batch: &[TrainExample],
    cfg: &TrainConfig,
    pair_seed: u64,
) -> Result<f64> {
    let mut g: Graph<E> = Graph::new();
    let bound = model.bind(&mut g);
    let loss = omtp_loss(model, &mut g, &bound, batch, cfg, pair_seed)?;
    Ok(g.scalar_value(loss.node))
}

/// Verify every parameter's analytic gradient of the combined
/// pre-training loss against central finite differences.
///
/// The error is normalized per tensor by the gradient's largest
/// magnitude: near-zero coordinates cannot beat the truncation error of
/// central differences in any precision, so a per-coordinate ratio there
/// measures the oracle, not the gradient.
pub fn model_loss_gradcheck<E: Scalar>(
    model: &GenRerankerModel<E>,
    batch: &[TrainExample],
    cfg: &TrainConfig,
    pair_seed: u64,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut g: Graph<E> = Graph::new();
    let bound = model.bind(&mut g);
    let loss = omtp_loss(model, &mut g, &bound, batch, cfg, pair_seed)?;
    g.backward(loss.node)?;
    let analytic: BTreeMap<String, Vec<f64>> = bound
        .iter()
        .map(|(name, &id)| (name.clone(), g.grad(id).iter().map(|v| v.to_f64()).collect()))
        .collect();
    drop(g);

    let mut work = model.clone();
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
    let mut per_param = Vec::with_capacity(names.len());
    for name in names {
        let numel = model.params().get(&name).numel();
        let mut fds = Vec::with_capacity(numel);
        for i in 0..numel {
            let original = work.params().get(&name).data()[i];
            let x = original.to_f64();
            work.params_mut().get_mut(&name).data_mut()[i] = E::from_f64(x + epsilon);
            let plus = combined_loss_value(&work, batch, cfg, pair_seed)?;
            work.params_mut().get_mut(&name).data_mut()[i] = E::from_f64(x - epsilon);
            let minus = combined_loss_value(&work, batch, cfg, pair_seed)?;
            work.params_mut().get_mut(&name).data_mut()[i] = original;
            fds.push((plus - minus) / (2.0 * epsilon));
        }
        let grads = &analytic[&name];
        let scale = grads
            .iter()
            .copied()
            .chain(fds.iter().copied())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let denom = scale + 1e-8;
        let err = grads
            .iter()
            .zip(&fds)
            .fold(0.0f64, |worst, (&a, &fd)| worst.max((a - fd).abs() / denom));
        per_param.push((name, err));
    }
    Ok(GradCheckReport { per_param })
}
