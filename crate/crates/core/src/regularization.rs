//! Weight regularizers `f(W)` and the hidden-activation sparsity penalty
//! `g(h)`, each returning a value together with its analytic gradient.
//!
//! Weight matrices are `inputs x features`; the group kinds sum a per-group
//! term over every feature column `j` and every mode `r` of a
//! [`ModalityMask`] over the rows. All group kinds see weights through the
//! smoothed magnitude `s(w) = sqrt(w^2 + eps)`, which is `|w|` when
//! `eps = 0`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::patch::ModalityMask;
use crate::{Error, Result};

pub const DEFAULT_EPS_G: f64 = 1e-6;
pub const DEFAULT_ALPHA: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    L1,
    L2,
    GroupPnorm,
    GroupMaxLse,
    GroupL0Max,
}

impl RegKind {
    pub const ALL: [RegKind; 5] = [
        RegKind::L1,
        RegKind::L2,
        RegKind::GroupPnorm,
        RegKind::GroupMaxLse,
        RegKind::GroupL0Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegKind::L1 => "l1",
            RegKind::L2 => "l2",
            RegKind::GroupPnorm => "group_pnorm",
            RegKind::GroupMaxLse => "group_max_lse",
            RegKind::GroupL0Max => "group_l0_max",
        }
    }

    /// Default weight of `f` for this kind.
    pub fn default_beta(self) -> f64 {
        match self {
            RegKind::L1 | RegKind::L2 => 3e-3,
            _ => 5e-3,
        }
    }
}

impl fmt::Display for RegKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown regularizer '{s}' (expected one of l1, l2, group_pnorm, group_max_lse, group_l0_max)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub kind: RegKind,
    /// Norm order for `group_pnorm`.
    pub p: f64,
    /// Log-sum-exp sharpness for the smooth-max kinds.
    pub alpha: f64,
    /// Weight of `f(W)`.
    pub beta: f64,
    /// Weight of `g(h)`.
    pub lambda: f64,
    pub eps_g: f64,
}

impl RegConfig {
    pub fn new(kind: RegKind) -> Self {
        RegConfig {
            kind,
            p: 2.0,
            alpha: DEFAULT_ALPHA,
            beta: kind.default_beta(),
            lambda: 3.0,
            eps_g: DEFAULT_EPS_G,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0) {
            return Err(Error::invalid(format!("norm order p must be >= 1, got {}", self.p)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::invalid("beta and lambda must be non-negative"));
        }
        if !(self.eps_g > 0.0) {
            return Err(Error::invalid(format!("eps_g must be positive, got {}", self.eps_g)));
        }
        Ok(())
    }

    /// Unweighted `f(W)` and its gradient for this configuration's kind.
    pub fn f(&self, w: ArrayView2<f64>, modality: &ModalityMask) -> Result<(f64, Array2<f64>)> {
        match self.kind {
            RegKind::L1 => Ok(reg_l1(w, self.eps_g)),
            RegKind::L2 => Ok(reg_l2(w)),
            RegKind::GroupPnorm => group_pnorm(w, modality, self.p, self.eps_g),
            RegKind::GroupMaxLse => group_max_lse(w, modality, self.alpha, self.eps_g),
            RegKind::GroupL0Max => group_l0_max(w, modality, self.alpha, self.eps_g),
        }
    }
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig::new(RegKind::GroupL0Max)
    }
}

#[inline]
fn smooth_abs(w: f64, eps: f64) -> (f64, f64) {
    let s = (w * w + eps).sqrt();
    let ds = if s > 0.0 { w / s } else { 0.0 };
    (s, ds)
}

/// `sum_j sqrt(h_j^2 + eps)` and its gradient.
pub fn sparsity_g(h: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let grad = h
        .iter()
        .map(|&v| {
            let (s, ds) = smooth_abs(v, eps);
            value += s;
            ds
        })
        .collect();
    (value, grad)
}

/// Smoothed L1: `sum sqrt(w^2 + eps)`.
pub fn reg_l1(w: ArrayView2<f64>, eps: f64) -> (f64, Array2<f64>) {
    let mut value = 0.0;
    let grad = w.mapv(|v| {
        let (s, ds) = smooth_abs(v, eps);
        value += s;
        ds
    });
    (value, grad)
}

/// Squared Frobenius norm.
pub fn reg_l2(w: ArrayView2<f64>) -> (f64, Array2<f64>) {
    (w.iter().map(|v| v * v).sum(), w.mapv(|v| 2.0 * v))
}

fn check_rows(w: &ArrayView2<f64>, modality: &ModalityMask) -> Result<()> {
    if w.nrows() != modality.len() {
        return Err(Error::DimensionMismatch {
            context: "weight rows vs modality matrix",
            expected: modality.len(),
            actual: w.nrows(),
        });
    }
    Ok(())
}

/// `sum_j sum_r (sum_{i in r} s(W_ij)^p)^(1/p)`.
pub fn group_pnorm(
    w: ArrayView2<f64>,
    modality: &ModalityMask,
    p: f64,
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("norm order p must be >= 1, got {p}")));
    }
    check_rows(&w, modality)?;
    let k = w.ncols();
    // Rescale each group by its largest entry so s^p cannot overflow.
    let mut top = Array2::<f64>::zeros((modality.num_modes(), k));
    for (i, row) in w.rows().into_iter().enumerate() {
        let r = modality.mode_of(i);
        for (j, &v) in row.iter().enumerate() {
            let s = smooth_abs(v, eps).0;
            if s > top[[r, j]] {
                top[[r, j]] = s;
            }
        }
    }
    let mut sums = Array2::<f64>::zeros(top.dim());
    for (i, row) in w.rows().into_iter().enumerate() {
        let r = modality.mode_of(i);
        for (j, &v) in row.iter().enumerate() {
            let t = top[[r, j]];
            if t > 0.0 {
                sums[[r, j]] += (smooth_abs(v, eps).0 / t).powf(p);
            }
        }
    }
    let norms = Array2::from_shape_fn(top.dim(), |(r, j)| top[[r, j]] * sums[[r, j]].powf(1.0 / p));
    let value = norms.sum();
    let mut grad = Array2::zeros(w.dim());
    for (i, row) in w.rows().into_iter().enumerate() {
        let r = modality.mode_of(i);
        for (j, &v) in row.iter().enumerate() {
            let norm = norms[[r, j]];
            if norm > 0.0 {
                let (s, ds) = smooth_abs(v, eps);
                // d/ds (sum s^p)^(1/p) = (s / norm)^(p-1)
                grad[[i, j]] = (s / norm).powf(p - 1.0) * ds;
            }
        }
    }
    Ok((value, grad))
}

/// Per-group smooth max `m = max + (1/alpha) ln sum exp(alpha (s - max))`
/// and the softmax weights of each entry.
struct SmoothMax {
    m: Array2<f64>,
    top: Array2<f64>,
    denom: Array2<f64>,
}

fn smooth_max(w: &ArrayView2<f64>, modality: &ModalityMask, alpha: f64, eps: f64) -> SmoothMax {
    let k = w.ncols();
    let mut top = Array2::from_elem((modality.num_modes(), k), f64::NEG_INFINITY);
    for (i, row) in w.rows().into_iter().enumerate() {
        let r = modality.mode_of(i);
        for (j, &v) in row.iter().enumerate() {
            top[[r, j]] = top[[r, j]].max(smooth_abs(v, eps).0);
        }
    }
    let mut denom = Array2::<f64>::zeros(top.dim());
    for (i, row) in w.rows().into_iter().enumerate() {
        let r = modality.mode_of(i);
        for (j, &v) in row.iter().enumerate() {
            denom[[r, j]] += (alpha * (smooth_abs(v, eps).0 - top[[r, j]])).exp();
        }
    }
    let m = Array2::from_shape_fn(top.dim(), |(r, j)| top[[r, j]] + denom[[r, j]].ln() / alpha);
    SmoothMax { m, top, denom }
}

/// Gradient of `sum_{r,j} outer(m_rj)` where `outer_grad` gives the
/// derivative of the outer function at `m`.
fn smooth_max_grad(
    w: &ArrayView2<f64>,
    modality: &ModalityMask,
    alpha: f64,
    eps: f64,
    sm: &SmoothMax,
    outer_grad: impl Fn(f64) -> f64,
) -> Array2<f64> {
    let dm = sm.m.mapv(outer_grad);
    let mut grad = Array2::zeros(w.dim());
    for (i, row) in w.rows().into_iter().enumerate() {
        let r = modality.mode_of(i);
        for (j, &v) in row.iter().enumerate() {
            let (s, ds) = smooth_abs(v, eps);
            let weight = (alpha * (s - sm.top[[r, j]])).exp() / sm.denom[[r, j]];
            grad[[i, j]] = dm[[r, j]] * weight * ds;
        }
    }
    grad
}

/// `sum_j sum_r (1/alpha) ln sum_{i in r} exp(alpha s(W_ij))`.
pub fn group_max_lse(
    w: ArrayView2<f64>,
    modality: &ModalityMask,
    alpha: f64,
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    check_alpha(alpha)?;
    check_rows(&w, modality)?;
    let sm = smooth_max(&w, modality, alpha, eps);
    let grad = smooth_max_grad(&w, modality, alpha, eps, &sm, |_| 1.0);
    Ok((sm.m.sum(), grad))
}

/// `sum_j sum_r ln(1 + m_rj^2)` with `m_rj` the smooth group max.
pub fn group_l0_max(
    w: ArrayView2<f64>,
    modality: &ModalityMask,
    alpha: f64,
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    check_alpha(alpha)?;
    check_rows(&w, modality)?;
    let sm = smooth_max(&w, modality, alpha, eps);
    let value = sm.m.iter().map(|&m| (m * m).ln_1p()).sum();
    let grad = smooth_max_grad(&w, modality, alpha, eps, &sm, |m| 2.0 * m / (1.0 + m * m));
    Ok((value, grad))
}

/// Exact per-group maximum `max_{i in r} |W_ij|`, shape `modes x features`.
pub fn group_max_abs(w: ArrayView2<f64>, modality: &ModalityMask) -> Result<Array2<f64>> {
    check_rows(&w, modality)?;
    let mut out = Array2::zeros((modality.num_modes(), w.ncols()));
    for (i, row) in w.rows().into_iter().enumerate() {
        let r = modality.mode_of(i);
        for (j, &v) in row.iter().enumerate() {
            if v.abs() > out[[r, j]] {
                out[[r, j]] = v.abs();
            }
        }
    }
    Ok(out)
}

/// Smooth per-group maximum, shape `modes x features`.
pub fn group_smooth_max(
    w: ArrayView2<f64>,
    modality: &ModalityMask,
    alpha: f64,
    eps: f64,
) -> Result<Array2<f64>> {
    check_alpha(alpha)?;
    check_rows(&w, modality)?;
    Ok(smooth_max(&w, modality, alpha, eps).m)
}

/// Fraction of (feature, mode) groups, over modes not in `exclude`, whose
/// group weight exceeds `rel_threshold` times the largest group weight.
pub fn active_group_fraction(groups: &Array2<f64>, exclude: &[usize], rel_threshold: f64) -> f64 {
    let global = groups.iter().copied().fold(0.0, f64::max);
    let (mut total, mut active) = (0usize, 0usize);
    for (r, row) in groups.rows().into_iter().enumerate() {
        if exclude.contains(&r) {
            continue;
        }
        total += row.len();
        active += row.iter().filter(|&&m| m > rel_threshold * global).count();
    }
    if total == 0 {
        0.0
    } else {
        active as f64 / total as f64
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}
