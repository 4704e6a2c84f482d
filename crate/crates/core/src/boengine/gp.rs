//! Exact Gaussian-process regression with a stationary isotropic kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-4;
pub const LENGTH_SCALE_GRID: [f64; 9] = [0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Matern52,
    SquaredExponential,
}

impl Kernel {
    pub fn eval(self, a: &[f64], b: &[f64], length_scale: f64, amplitude: f64) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let r = d2.sqrt() / length_scale;
        match self {
            Kernel::Matern52 => {
                let s = 5f64.sqrt() * r;
                amplitude * (1.0 + s + s * s / 3.0) * (-s).exp()
            }
            Kernel::SquaredExponential => amplitude * (-0.5 * r * r).exp(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpHyper {
    pub kernel: Kernel,
    pub length_scale: f64,
    pub amplitude: f64,
}

/// A fitted GP. With `standardize` the targets are centred and scaled to
/// unit variance before fitting and predictions are mapped back.
#[derive(Clone, Debug)]
pub struct GpModel {
    pub hyper: GpHyper,
    pub jitter: f64,
    x: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    y_shift: f64,
    y_scale: f64,
    lml: f64,
}

impl GpModel {
    pub fn fit(x: &[Vec<f64>], y: &[f64], hyper: GpHyper, standardize: bool) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid(
                "GP needs at least one point and matching targets",
            ));
        }
        let (y_shift, y_scale) = if standardize {
            let n = y.len() as f64;
            let mean = y.iter().sum::<f64>() / n;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, if var > 1e-24 { var.sqrt() } else { 1.0 })
        } else {
            (0.0, 1.0)
        };
        let yt = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_shift) / y_scale));
        let n = x.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            hyper
                .kernel
                .eval(&x[i], &x[j], hyper.length_scale, hyper.amplitude)
        });
        let mut jitter = JITTER_START;
        let chol = loop {
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += jitter;
            }
            if let Some(c) = Cholesky::new(kj) {
                break c;
            }
            jitter *= 10.0;
            if jitter > JITTER_MAX * (1.0 + 1e-9) {
                return Err(Error::Numeric(format!(
                    "covariance not positive definite with jitter up to {JITTER_MAX:e}"
                )));
            }
        };
        let alpha = chol.solve(&yt);
        let log_det: f64 = chol
            .l_dirty()
            .diagonal()
            .iter()
            .take(n)
            .map(|d| d.ln())
            .sum::<f64>()
            * 2.0;
        let lml = -0.5 * yt.dot(&alpha)
            - 0.5 * log_det
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(Self {
            hyper,
            jitter,
            x: x.to_vec(),
            chol,
            alpha,
            y_shift,
            y_scale,
            lml,
        })
    }

    /// Standardized fit with amplitude 1 and the length scale from
    /// [`LENGTH_SCALE_GRID`] maximizing the log marginal likelihood.
    pub fn fit_auto(x: &[Vec<f64>], y: &[f64], kernel: Kernel) -> Result<Self> {
        let mut best: Option<GpModel> = None;
        let mut last_err = None;
        for &length_scale in &LENGTH_SCALE_GRID {
            let hyper = GpHyper {
                kernel,
                length_scale,
                amplitude: 1.0,
            };
            match Self::fit(x, y, hyper, true) {
                Ok(m) => {
                    if best.as_ref().is_none_or(|b| m.lml > b.lml) {
                        best = Some(m);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        best.ok_or_else(|| last_err.expect("grid is non-empty"))
    }

    /// Log marginal likelihood of the (transformed) targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Posterior mean and variance of the latent function in target units.
    pub fn posterior(&self, point: &[f64]) -> (f64, f64) {
        let h = self.hyper;
        let ks = DVector::from_iterator(
            self.x.len(),
            self.x
                .iter()
                .map(|xi| h.kernel.eval(xi, point, h.length_scale, h.amplitude)),
        );
        let mean = ks.dot(&self.alpha);
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&ks)
            .expect("non-singular factor");
        let var = (h.amplitude - v.dot(&v)).max(0.0);
        (
            mean * self.y_scale + self.y_shift,
            var * self.y_scale * self.y_scale,
        )
    }
}

pub fn gp_posterior(model: &GpModel, point: &[f64]) -> (f64, f64) {
    model.posterior(point)
}
