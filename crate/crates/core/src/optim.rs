//! Unconstrained smooth minimisation: L-BFGS or steepest descent, both with
//! Armijo backtracking.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lbfgs,
    GradientDescent,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Lbfgs => "lbfgs",
            Method::GradientDescent => "gradient_descent",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lbfgs" => Ok(Method::Lbfgs),
            "gradient_descent" | "gd" => Ok(Method::GradientDescent),
            _ => Err(Error::invalid(format!(
                "unknown optimizer '{s}' (expected lbfgs or gradient_descent)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub method: Method,
    pub max_iters: usize,
    /// Stop when the objective fell by less than `tol` (relative) over the
    /// last `tol_window` iterations.
    pub tol: f64,
    pub tol_window: usize,
    /// Correction pairs kept by L-BFGS.
    pub memory: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    pub max_backtracks: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            method: Method::Lbfgs,
            max_iters: 400,
            tol: 1e-6,
            tol_window: 5,
            memory: 10,
            c1: 1e-4,
            max_backtracks: 60,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        if self.tol_window == 0 || self.memory == 0 || self.max_backtracks == 0 {
            return Err(Error::invalid("tol_window, memory and max_backtracks must be positive"));
        }
        if !(self.c1 > 0.0 && self.c1 < 1.0) {
            return Err(Error::invalid("c1 must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Tolerance,
    ZeroGradient,
    MaxIters,
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Objective/gradient evaluations, including line-search trials.
    pub evaluations: usize,
    pub stop: StopReason,
    /// Entry 0 is the starting point; one entry per accepted step after.
    pub trace: Vec<TraceRecord>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimise `f`, which returns the objective and its gradient.
pub fn minimize(
    mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    x0: &[f64],
    cfg: &OptimConfig,
) -> Result<OptimResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    let mut gnorm = norm(&g);
    if !fx.is_finite() || !gnorm.is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            grad_norm: gnorm,
        });
    }
    let mut trace = vec![TraceRecord {
        iteration: 0,
        objective: fx,
        grad_norm: gnorm,
        wall_time_s: start.elapsed().as_secs_f64(),
    }];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut gd_step = 1.0;
    let mut stop = StopReason::MaxIters;
    let mut iterations = 0;

    for iter in 1..=cfg.max_iters {
        if gnorm == 0.0 {
            stop = StopReason::ZeroGradient;
            break;
        }
        let mut d = match cfg.method {
            Method::Lbfgs => two_loop(&g, &s_hist, &y_hist),
            Method::GradientDescent => g.iter().map(|v| -v).collect(),
        };
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut t = match cfg.method {
            Method::Lbfgs if !s_hist.is_empty() => 1.0,
            Method::Lbfgs => (1.0 / gnorm).min(1.0),
            Method::GradientDescent => gd_step,
        };
        let mut accepted = None;
        let mut any_finite = false;
        for _ in 0..cfg.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let (ft, gt) = f(&trial);
            evaluations += 1;
            let finite = ft.is_finite() && gt.iter().all(|v| v.is_finite());
            if finite {
                any_finite = true;
                if ft <= fx + cfg.c1 * t * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if !any_finite {
                return Err(Error::NonFinite {
                    iteration: iter,
                    grad_norm: gnorm,
                });
            }
            stop = StopReason::LineSearchFailed;
            break;
        };
        iterations = iter;
        if cfg.method == Method::GradientDescent {
            gd_step = t * 2.0;
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            if s_hist.len() == cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        gnorm = norm(&g);
        trace.push(TraceRecord {
            iteration: iter,
            objective: fx,
            grad_norm: gnorm,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if trace.len() > cfg.tol_window {
            let old = trace[trace.len() - 1 - cfg.tol_window].objective;
            if old - fx <= cfg.tol * old.abs().max(f64::MIN_POSITIVE) {
                stop = StopReason::Tolerance;
                break;
            }
        }
    }
    Ok(OptimResult {
        x,
        objective: fx,
        iterations,
        evaluations,
        stop,
        trace,
    })
}

/// L-BFGS two-loop recursion: returns `-H g`.
fn two_loop(g: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>]) -> Vec<f64> {
    let mut q = g.to_vec();
    let m = s_hist.len();
    let mut alpha = vec![0.0; m];
    let rho: Vec<f64> = (0..m).map(|i| 1.0 / dot(&s_hist[i], &y_hist[i])).collect();
    for i in (0..m).rev() {
        alpha[i] = rho[i] * dot(&s_hist[i], &q);
        for (qk, yk) in q.iter_mut().zip(&y_hist[i]) {
            *qk -= alpha[i] * yk;
        }
    }
    if m > 0 {
        let gamma = dot(&s_hist[m - 1], &y_hist[m - 1]) / dot(&y_hist[m - 1], &y_hist[m - 1]);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for i in 0..m {
        let beta = rho[i] * dot(&y_hist[i], &q);
        for (qk, sk) in q.iter_mut().zip(&s_hist[i]) {
            *qk += (alpha[i] - beta) * sk;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        (f, g)
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let cfg = OptimConfig {
            tol: 1e-14,
            max_iters: 500,
            ..Default::default()
        };
        let r = minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
        assert!(r.trace.windows(2).all(|w| w[1].objective <= w[0].objective));
    }

    #[test]
    fn gradient_descent_on_quadratic() {
        let cfg = OptimConfig {
            method: Method::GradientDescent,
            tol: 1e-12,
            ..Default::default()
        };
        let r = minimize(
            |x| (x[0] * x[0] + 4.0 * x[1] * x[1], vec![2.0 * x[0], 8.0 * x[1]]),
            &[3.0, -2.0],
            &cfg,
        )
        .unwrap();
        assert!(r.objective < 1e-8);
        assert!(r.trace.windows(2).all(|w| w[1].objective <= w[0].objective));
    }

    #[test]
    fn non_finite_start_is_reported() {
        let r = minimize(|_| (f64::NAN, vec![0.0]), &[0.0], &OptimConfig::default());
        assert!(matches!(r, Err(Error::NonFinite { iteration: 0, .. })));
    }

    #[test]
    fn all_trials_non_finite() {
        let r = minimize(
            |x| {
                if x[0] == 1.0 {
                    (1.0, vec![1.0])
                } else {
                    (f64::INFINITY, vec![f64::NAN])
                }
            },
            &[1.0],
            &OptimConfig {
                max_backtracks: 20,
                ..Default::default()
            },
        );
        assert!(matches!(r, Err(Error::NonFinite { iteration: 1, grad_norm }) if grad_norm == 1.0));
    }

    #[test]
    fn config_checks() {
        let cfg = OptimConfig {
            max_iters: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!("lbfgs".parse::<Method>().unwrap(), Method::Lbfgs);
    }
}
