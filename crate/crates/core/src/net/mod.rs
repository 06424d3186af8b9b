//! Two-hidden-layer sigmoid network with a logistic output unit.
//!
//! ```text
//! h1 = sigma(x W1 + b1)          x: N,  W1: N x K1
//! h2 = sigma(h1 W2 + b2)         W2: K1 x K2
//! p  = sigma(h2 . w3 + b3)       w3: K2
//! ```
//!
//! Biases are an extension over the bias-free model equations; they start at
//! zero. The autoencoder decoder used in pretraining is tied: `x_hat = W h`.
//!
//! Inference evaluates each input row with a fixed accumulation order, so a
//! row's output does not depend on which batch it was scored in. Detection
//! relies on this to make cascaded and exhaustive search agree bit for bit.

pub mod io;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::patch::InputSpec;
use crate::{Error, Result};

pub const PROB_EPS: f64 = 1e-12;

/// Logistic function, evaluated without overflow for any finite input. A
/// result that would round to exactly 0 or 1 is pulled to `PROB_EPS` or
/// `1 - PROB_EPS`.
#[inline]
pub fn sigmoid(a: f64) -> f64 {
    let r = if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    };
    if r >= 1.0 {
        1.0 - PROB_EPS
    } else if r <= 0.0 {
        PROB_EPS
    } else {
        r
    }
}

/// `ln(1 + e^a)` without overflow.
#[inline]
pub fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSizes {
    pub n: usize,
    pub k1: usize,
    pub k2: usize,
}

impl LayerSizes {
    pub fn new(n: usize, k1: usize, k2: usize) -> Self {
        LayerSizes { n, k1, k2 }
    }

    pub fn num_params(&self) -> usize {
        self.n * self.k1 + self.k1 + self.k1 * self.k2 + self.k2 + self.k2 + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array1<f64>,
    pub b3: f64,
    /// How rectangles become inputs for this network.
    pub input: InputSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardActivations {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub p: f64,
}

impl NetworkParams {
    pub fn sizes(&self) -> LayerSizes {
        LayerSizes::new(self.w1.nrows(), self.w1.ncols(), self.w2.ncols())
    }

    /// Check that all shapes agree with each other and with the input spec,
    /// and that every weight is finite.
    pub fn validate(&self) -> Result<()> {
        let s = self.sizes();
        let checks = [
            ("layer-1 bias", s.k1, self.b1.len()),
            ("layer-2 rows", s.k1, self.w2.nrows()),
            ("layer-2 bias", s.k2, self.b2.len()),
            ("output weights", s.k2, self.w3.len()),
            ("input length", self.input.input_len(), s.n),
            ("modality matrix width", s.n, self.input.modality.len()),
        ];
        for (context, expected, actual) in checks {
            if expected != actual {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    actual,
                });
            }
        }
        if s.n == 0 || s.k1 == 0 || s.k2 == 0 {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        let finite = self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .chain(&self.w3)
            .chain(std::iter::once(&self.b3))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("network weights must be finite"));
        }
        Ok(())
    }

    /// Parameters as one flat vector: W1 row-major, b1, W2 row-major, b2, w3,
    /// b3.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.sizes().num_params());
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.extend(self.b2.iter());
        v.extend(self.w3.iter());
        v.push(self.b3);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let s = self.sizes();
        if flat.len() != s.num_params() {
            return Err(Error::DimensionMismatch {
                context: "flat parameter vector",
                expected: s.num_params(),
                actual: flat.len(),
            });
        }
        let mut off = 0;
        let mut take = |n: usize| {
            let sl = &flat[off..off + n];
            off += n;
            sl
        };
        self.w1 = Array2::from_shape_vec((s.n, s.k1), take(s.n * s.k1).to_vec()).expect("shape");
        self.b1 = Array1::from(take(s.k1).to_vec());
        self.w2 = Array2::from_shape_vec((s.k1, s.k2), take(s.k1 * s.k2).to_vec()).expect("shape");
        self.b2 = Array1::from(take(s.k2).to_vec());
        self.w3 = Array1::from(take(s.k2).to_vec());
        self.b3 = take(1)[0];
        Ok(())
    }

    /// Multiply-adds for one forward pass of a single input.
    pub fn forward_flops(&self) -> u64 {
        let s = self.sizes();
        2 * (s.n * s.k1 + s.k1 * s.k2 + s.k2) as u64
    }
}

/// Forward pass for a single input vector.
pub fn forward(params: &NetworkParams, x: &[f64]) -> Result<ForwardActivations> {
    let s = params.sizes();
    if x.len() != s.n {
        return Err(Error::DimensionMismatch {
            context: "network input",
            expected: s.n,
            actual: x.len(),
        });
    }
    let mut h1 = vec![0.0; s.k1];
    let mut h2 = vec![0.0; s.k2];
    affine_sigmoid(x, 1, params.w1.view(), params.b1.as_slice().expect("contiguous"), &mut h1);
    affine_sigmoid(&h1, 1, params.w2.view(), params.b2.as_slice().expect("contiguous"), &mut h2);
    let p = sigmoid(output_logit(&h2, params));
    Ok(ForwardActivations { h1, h2, p })
}

/// Output probabilities for `rows` inputs stored row-major in `xs`.
pub fn forward_batch(params: &NetworkParams, xs: &[f64], rows: usize) -> Result<Vec<f64>> {
    let mut out = forward_batch_logits(params, xs, rows)?;
    out.iter_mut().for_each(|a| *a = sigmoid(*a));
    Ok(out)
}

/// Output pre-activations `a` with `p = sigma(a)`. Ranking by `a` orders
/// inputs exactly like ranking by `p` but without ties from `p` rounding to
/// 1.
pub fn forward_batch_logits(params: &NetworkParams, xs: &[f64], rows: usize) -> Result<Vec<f64>> {
    let s = params.sizes();
    if xs.len() != rows * s.n {
        return Err(Error::DimensionMismatch {
            context: "network input batch",
            expected: rows * s.n,
            actual: xs.len(),
        });
    }
    let mut h1 = vec![0.0; rows * s.k1];
    let mut h2 = vec![0.0; rows * s.k2];
    affine_sigmoid(xs, rows, params.w1.view(), params.b1.as_slice().expect("contiguous"), &mut h1);
    affine_sigmoid(&h1, rows, params.w2.view(), params.b2.as_slice().expect("contiguous"), &mut h2);
    Ok(h2.chunks_exact(s.k2).map(|h| output_logit(h, params)).collect())
}

fn output_logit(h2: &[f64], params: &NetworkParams) -> f64 {
    let mut a = params.b3;
    for (h, w) in h2.iter().zip(params.w3.iter()) {
        a += h * w;
    }
    a
}

const ROW_BLOCK: usize = 16;

/// `out = sigma(input W + b)` row by row. Each output element accumulates
/// `b[j] + sum_k input[k] * W[k][j]` in increasing `k`, whatever the batch.
fn affine_sigmoid(input: &[f64], rows: usize, w: ArrayView2<f64>, b: &[f64], out: &mut [f64]) {
    let (n, k) = w.dim();
    let w = w.as_standard_layout();
    let w = w.as_slice().expect("standard layout");
    for block in (0..rows).step_by(ROW_BLOCK) {
        let end = (block + ROW_BLOCK).min(rows);
        for r in block..end {
            out[r * k..(r + 1) * k].copy_from_slice(b);
        }
        for i in 0..n {
            let wrow = &w[i * k..(i + 1) * k];
            for r in block..end {
                let xv = input[r * n + i];
                if xv == 0.0 {
                    continue;
                }
                let acc = &mut out[r * k..(r + 1) * k];
                for (a, wv) in acc.iter_mut().zip(wrow) {
                    *a += xv * wv;
                }
            }
        }
        for v in out[block * k..end * k].iter_mut() {
            *v = sigmoid(*v);
        }
    }
}

/// Tied-weight linear decode `x_hat_i = sum_j h_j W[i][j]`.
pub fn reconstruct(w: ArrayView2<f64>, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != w.ncols() {
        return Err(Error::DimensionMismatch {
            context: "hidden vector for reconstruction",
            expected: w.ncols(),
            actual: h.len(),
        });
    }
    Ok(w.rows()
        .into_iter()
        .map(|row| row.iter().zip(h).map(|(a, b)| a * b).sum())
        .collect())
}

/// Uniform Glorot initialisation `+-sqrt(6 / (fan_in + fan_out))`, zero
/// biases, deterministic per seed.
pub fn init_params(seed: u64, sizes: LayerSizes, input: InputSpec) -> Result<NetworkParams> {
    if sizes.n == 0 || sizes.k1 == 0 || sizes.k2 == 0 {
        return Err(Error::invalid("layer sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut glorot = |rows: usize, cols: usize, fan_out: usize| {
        let bound = (6.0 / (rows + fan_out) as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
    };
    let w1 = glorot(sizes.n, sizes.k1, sizes.k1);
    let w2 = glorot(sizes.k1, sizes.k2, sizes.k2);
    let w3 = glorot(sizes.k2, 1, 1).into_shape_with_order(sizes.k2).expect("column");
    let params = NetworkParams {
        w1,
        b1: Array1::zeros(sizes.k1),
        w2,
        b2: Array1::zeros(sizes.k2),
        w3,
        b3: 0.0,
        input,
    };
    params.validate()?;
    Ok(params)
}

/// Glorot bound used by [`init_params`] for a layer.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// The small first-pass and large re-ranking networks of the cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeParams {
    pub small: NetworkParams,
    pub large: NetworkParams,
}

impl CascadeParams {
    pub fn new(small: NetworkParams, large: NetworkParams) -> Result<Self> {
        let c = CascadeParams { small, large };
        c.validate()?;
        Ok(c)
    }

    /// Both networks must read identical inputs.
    pub fn validate(&self) -> Result<()> {
        self.small.validate()?;
        self.large.validate()?;
        if self.small.input != self.large.input {
            return Err(Error::invalid(
                "cascade networks must share patch side, modality, normalisation and cap",
            ));
        }
        Ok(())
    }
}
