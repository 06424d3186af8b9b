//! Layerwise sparse-autoencoder pretraining followed by supervised
//! fine-tuning of the whole network.
//!
//! Pretraining layer 1 minimises
//!
//! ```text
//! sum_t sum_i w_ti (x_hat_ti - y_ti)^2 + lambda sum_t sum_j g(h_tj) + beta f(W)
//! h_t = sigma(x_t W + b),  x_hat_t = W h_t
//! ```
//!
//! where `x_t` is the mode-scaled input, `y_t` the same patch before mode
//! scaling, and `w_ti = psi_mode(i)` on masked-in coordinates, zero
//! elsewhere. Layer 2 reconstructs the fixed layer-1 activations with unit
//! weights.
//!
//! Fine-tuning minimises the negative log-likelihood of the labels plus
//! `beta1 f(W1) + beta2 f(W2)`. Layer 2 has no modality structure, so its
//! group regularizers treat every input unit as its own group.

use std::borrow::Borrow;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::net::{init_params, sigmoid, softplus, LayerSizes, NetworkParams};
use crate::optim::{minimize, OptimConfig, OptimResult, TraceRecord};
use crate::patch::{extract_patch, InputSpec, ModalityMask, NormStats, PatchInput};
use crate::regularization::{sparsity_g, RegConfig};
use crate::rgbd::AnnotatedScene;
use crate::{CascadeParams, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Regularizer and sparsity weight for layer 1 (`beta1`, `lambda`).
    pub reg1: RegConfig,
    /// Regularizer and sparsity weight for layer 2 (`beta2`, `lambda`).
    pub reg2: RegConfig,
    pub optim: OptimConfig,
    /// Iteration cap for each pretraining phase; `optim.max_iters` when
    /// `None`.
    pub pretrain_iters: Option<usize>,
    pub seed: u64,
    /// Pretrain on a seeded random subset of this many examples.
    pub minibatch: Option<usize>,
    pub pretrain: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            reg1: RegConfig::default(),
            reg2: RegConfig::default(),
            optim: OptimConfig::default(),
            pretrain_iters: None,
            seed: 0,
            minibatch: None,
            pretrain: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.reg1.validate()?;
        self.reg2.validate()?;
        self.optim.validate()?;
        if self.pretrain_iters == Some(0) || self.minibatch == Some(0) {
            return Err(Error::invalid("pretrain_iters and minibatch must be positive"));
        }
        Ok(())
    }

    fn pretrain_optim(&self) -> OptimConfig {
        OptimConfig {
            max_iters: self.pretrain_iters.unwrap_or(self.optim.max_iters),
            ..self.optim.clone()
        }
    }
}

/// Featurised training examples with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Vec<PatchInput>,
    pub labels: Vec<bool>,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<PatchInput>, labels: Vec<bool>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "labels vs inputs",
                expected: inputs.len(),
                actual: labels.len(),
            });
        }
        let n = inputs[0].x.len();
        if inputs.iter().any(|p| p.x.len() != n || p.mu.len() != n) {
            return Err(Error::invalid("inputs have differing lengths"));
        }
        Ok(LabeledDataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.inputs[0].x.len()
    }

    /// Scaled inputs as an `M x N` matrix.
    pub fn x_matrix(&self) -> Array2<f64> {
        let n = self.input_len();
        Array2::from_shape_fn((self.len(), n), |(t, i)| self.inputs[t].x[i])
    }

    pub fn y_vector(&self) -> Array1<f64> {
        self.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l).count() as f64 / self.len() as f64
    }
}

/// Extract every annotated rectangle of `scenes`, fit normalisation on them
/// and return the resulting input spec together with the dataset.
/// Rectangles that miss the image are skipped.
pub fn build_dataset<S: Borrow<AnnotatedScene>>(
    scenes: &[S],
    side: usize,
    modality: ModalityMask,
    cap: f64,
) -> Result<(InputSpec, LabeledDataset)> {
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    for scene in scenes.iter().map(Borrow::borrow) {
        for (rect, label) in scene.labeled_rects() {
            match extract_patch(&scene.image, &rect, side) {
                Ok(p) => {
                    raw.push(p);
                    labels.push(label);
                }
                Err(Error::RectOutsideImage { .. }) => {
                    log::warn!("image {}: skipping rectangle outside the frame", scene.image_id)
                }
                Err(e) => return Err(e),
            }
        }
    }
    if raw.is_empty() {
        return Err(Error::invalid("no annotated rectangles in the training scenes"));
    }
    let spec = InputSpec {
        side,
        modality,
        norm: NormStats::fit(&raw, side),
        cap,
    };
    if spec.modality.len() != spec.input_len() {
        return Err(Error::DimensionMismatch {
            context: "modality matrix vs patch size",
            expected: spec.input_len(),
            actual: spec.modality.len(),
        });
    }
    for p in &mut raw {
        p.psi = spec.finish(&mut p.x, &p.mu)?;
    }
    Ok((spec, LabeledDataset::new(raw, labels)?))
}

/// Featurise the annotated rectangles of `scenes` with a fixed input spec.
pub fn dataset_with_spec<S: Borrow<AnnotatedScene>>(
    scenes: &[S],
    spec: &InputSpec,
) -> Result<LabeledDataset> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for scene in scenes.iter().map(Borrow::borrow) {
        for (rect, label) in scene.labeled_rects() {
            match spec.featurize(&scene.image, &rect) {
                Ok(p) => {
                    inputs.push(p);
                    labels.push(label);
                }
                Err(Error::RectOutsideImage { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    LabeledDataset::new(inputs, labels)
}

/// One autoencoder pretraining problem: inputs, targets and per-coordinate
/// reconstruction weights, all `M x N`.
#[derive(Clone, Debug)]
pub struct SaeProblem {
    pub x: Array2<f64>,
    pub target: Array2<f64>,
    pub weight: Array2<f64>,
    pub modality: ModalityMask,
}

impl SaeProblem {
    /// Layer 1: scaled input, unscaled target, weights `psi` on masked-in
    /// coordinates.
    pub fn layer1(inputs: &[&PatchInput], modality: &ModalityMask) -> Result<Self> {
        let n = modality.len();
        if inputs.iter().any(|p| p.x.len() != n) {
            return Err(Error::DimensionMismatch {
                context: "pretraining input",
                expected: n,
                actual: inputs.iter().map(|p| p.x.len()).find(|&l| l != n).unwrap_or(0),
            });
        }
        let m = inputs.len();
        let mut x = Array2::zeros((m, n));
        let mut target = Array2::zeros((m, n));
        let mut weight = Array2::zeros((m, n));
        for (t, p) in inputs.iter().enumerate() {
            let y = p.unscaled(modality);
            let w = p.coordinate_scale(modality);
            for i in 0..n {
                x[[t, i]] = p.x[i];
                target[[t, i]] = y[i];
                weight[[t, i]] = w[i];
            }
        }
        Ok(SaeProblem {
            x,
            target,
            weight,
            modality: modality.clone(),
        })
    }

    /// Layer 2: reconstruct fixed hidden activations with unit weights.
    pub fn layer2(h1: Array2<f64>) -> Self {
        let k = h1.ncols();
        SaeProblem {
            target: h1.clone(),
            weight: Array2::ones(h1.dim()),
            x: h1,
            modality: ModalityMask::singletons(k),
        }
    }

    pub fn examples(&self) -> usize {
        self.x.nrows()
    }

    pub fn input_len(&self) -> usize {
        self.x.ncols()
    }
}

/// The three terms of the pretraining objective, unweighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaeTerms {
    pub reconstruction: f64,
    pub sparsity: f64,
    pub regularizer: f64,
}

fn split_layer(theta: &[f64], n: usize, k: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
    let w = ArrayView2::from_shape((n, k), &theta[..n * k]).expect("layer shape");
    let b = ArrayView1::from(&theta[n * k..n * k + k]);
    (w, b)
}

fn encode(x: &ArrayView2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let mut a = x.dot(w);
    a += b;
    a.mapv_inplace(sigmoid);
    a
}

/// Pretraining objective terms and gradient at `theta = [W row-major, b]`.
pub fn sae_objective(
    problem: &SaeProblem,
    k: usize,
    reg: &RegConfig,
    theta: &[f64],
) -> Result<(SaeTerms, f64, Vec<f64>)> {
    let n = problem.input_len();
    if theta.len() != n * k + k {
        return Err(Error::DimensionMismatch {
            context: "pretraining parameters",
            expected: n * k + k,
            actual: theta.len(),
        });
    }
    let (w, b) = split_layer(theta, n, k);
    let h = encode(&problem.x.view(), &w, &b);
    let x_hat = h.dot(&w.t());
    let resid = &x_hat - &problem.target;
    let reconstruction = (&resid * &resid * &problem.weight).sum();
    let e = &resid * &problem.weight * 2.0;
    let mut sparsity = 0.0;
    let mut dh = e.dot(&w);
    if reg.lambda > 0.0 {
        for (row, mut drow) in h.rows().into_iter().zip(dh.rows_mut()) {
            let (v, g) = sparsity_g(row.as_slice().expect("contiguous"), reg.eps_g);
            sparsity += v;
            drow.iter_mut().zip(g).for_each(|(d, gi)| *d += reg.lambda * gi);
        }
    } else {
        sparsity = h.iter().map(|v| (v * v + reg.eps_g).sqrt()).sum();
    }
    let (regularizer, greg) = reg.f(w, &problem.modality)?;
    let da = dh * &h.mapv(|v| v * (1.0 - v));
    let mut gw = e.t().dot(&h);
    gw += &problem.x.t().dot(&da);
    gw.scaled_add(reg.beta, &greg);
    let gb = da.sum_axis(Axis(0));
    let terms = SaeTerms {
        reconstruction,
        sparsity,
        regularizer,
    };
    let value = reconstruction + reg.lambda * sparsity + reg.beta * regularizer;
    let mut grad = gw.into_raw_vec_and_offset().0;
    grad.extend(gb.iter());
    Ok((terms, value, grad))
}

/// Learn one autoencoder layer starting from `(w0, b0)`.
pub fn pretrain_layer(
    problem: &SaeProblem,
    w0: &Array2<f64>,
    b0: &Array1<f64>,
    reg: &RegConfig,
    optim: &OptimConfig,
) -> Result<(Array2<f64>, Array1<f64>, OptimResult)> {
    reg.validate()?;
    let (n, k) = w0.dim();
    if n != problem.input_len() || b0.len() != k {
        return Err(Error::DimensionMismatch {
            context: "initial layer weights",
            expected: problem.input_len(),
            actual: n,
        });
    }
    let mut theta: Vec<f64> = w0.iter().copied().collect();
    theta.extend(b0.iter());
    let result = minimize(
        |t| match sae_objective(problem, k, reg, t) {
            Ok((_, v, g)) => (v, g),
            Err(_) => (f64::NAN, vec![f64::NAN; t.len()]),
        },
        &theta,
        optim,
    )?;
    let (w, b) = split_layer(&result.x, n, k);
    Ok((w.to_owned(), b.to_owned(), result))
}

/// Fine-tuning problem data: `M x N` inputs, labels in {0, 1}.
#[derive(Clone, Debug)]
pub struct FinetuneProblem {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub modality1: ModalityMask,
    pub modality2: ModalityMask,
}

impl FinetuneProblem {
    pub fn new(data: &LabeledDataset, modality: &ModalityMask, k1: usize) -> Self {
        FinetuneProblem {
            x: data.x_matrix(),
            y: data.y_vector(),
            modality1: modality.clone(),
            modality2: ModalityMask::singletons(k1),
        }
    }
}

/// Terms of the fine-tuning objective, unweighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneTerms {
    pub nll: f64,
    pub f1: f64,
    pub f2: f64,
}

/// Negative log-likelihood plus `beta1 f(W1) + beta2 f(W2)` and its gradient
/// with respect to the flat parameter vector (see
/// [`NetworkParams::to_flat`]).
pub fn finetune_objective(
    problem: &FinetuneProblem,
    sizes: LayerSizes,
    reg1: &RegConfig,
    reg2: &RegConfig,
    theta: &[f64],
) -> Result<(FinetuneTerms, f64, Vec<f64>)> {
    let LayerSizes { n, k1, k2 } = sizes;
    if theta.len() != sizes.num_params() {
        return Err(Error::DimensionMismatch {
            context: "fine-tuning parameters",
            expected: sizes.num_params(),
            actual: theta.len(),
        });
    }
    if problem.x.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "fine-tuning input",
            expected: n,
            actual: problem.x.ncols(),
        });
    }
    let (w1, b1) = split_layer(theta, n, k1);
    let rest = &theta[n * k1 + k1..];
    let (w2, b2) = split_layer(rest, k1, k2);
    let w3 = ArrayView1::from(&rest[k1 * k2 + k2..k1 * k2 + 2 * k2]);
    let b3 = rest[k1 * k2 + 2 * k2];

    let h1 = encode(&problem.x.view(), &w1, &b1);
    let h2 = encode(&h1.view(), &w2, &b2);
    let a = h2.dot(&w3) + b3;
    let mut nll = 0.0;
    let mut da = Array1::zeros(a.len());
    for ((&at, &yt), d) in a.iter().zip(&problem.y).zip(da.iter_mut()) {
        nll += softplus(at) - yt * at;
        *d = sigmoid(at) - yt;
    }
    let gw3 = h2.t().dot(&da);
    let gb3 = da.sum();
    let dz2 = {
        let mut dh2 = Array2::zeros(h2.dim());
        for (mut row, &d) in dh2.rows_mut().into_iter().zip(&da) {
            row.assign(&(&w3 * d));
        }
        dh2 * &h2.mapv(|v| v * (1.0 - v))
    };
    let (f2, g2) = reg2.f(w2, &problem.modality2)?;
    let mut gw2 = h1.t().dot(&dz2);
    gw2.scaled_add(reg2.beta, &g2);
    let gb2 = dz2.sum_axis(Axis(0));
    let dz1 = dz2.dot(&w2.t()) * &h1.mapv(|v| v * (1.0 - v));
    let (f1, g1) = reg1.f(w1, &problem.modality1)?;
    let mut gw1 = problem.x.t().dot(&dz1);
    gw1.scaled_add(reg1.beta, &g1);
    let gb1 = dz1.sum_axis(Axis(0));

    let mut grad = Vec::with_capacity(theta.len());
    grad.extend(gw1.iter());
    grad.extend(gb1.iter());
    grad.extend(gw2.iter());
    grad.extend(gb2.iter());
    grad.extend(gw3.iter());
    grad.push(gb3);
    let terms = FinetuneTerms { nll, f1, f2 };
    Ok((terms, nll + reg1.beta * f1 + reg2.beta * f2, grad))
}

/// Fine-tuning objective and flat gradient for `params` on `data`.
pub fn full_objective(
    params: &NetworkParams,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let sizes = params.sizes();
    let problem = FinetuneProblem::new(data, &params.input.modality, sizes.k1);
    finetune_objective(&problem, sizes, &cfg.reg1, &cfg.reg2, &params.to_flat())
        .map(|(_, v, g)| (v, g))
}

/// Jointly optimise all layers on the labelled data.
pub fn finetune(
    params: &NetworkParams,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, OptimResult)> {
    cfg.validate()?;
    let sizes = params.sizes();
    if data.input_len() != sizes.n {
        return Err(Error::DimensionMismatch {
            context: "dataset input length vs network",
            expected: sizes.n,
            actual: data.input_len(),
        });
    }
    let problem = FinetuneProblem::new(data, &params.input.modality, sizes.k1);
    let result = minimize(
        |t| match finetune_objective(&problem, sizes, &cfg.reg1, &cfg.reg2, t) {
            Ok((_, v, g)) => (v, g),
            Err(_) => (f64::NAN, vec![f64::NAN; t.len()]),
        },
        &params.to_flat(),
        &cfg.optim,
    )?;
    let mut out = params.clone();
    out.set_flat(&result.x)?;
    Ok((out, result))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: String,
    pub iterations: usize,
    pub evaluations: usize,
    pub objective: f64,
    pub trace: Vec<TraceRecord>,
    /// Floating-point operations of one objective/gradient evaluation.
    pub flops_per_eval: u64,
}

impl PhaseReport {
    fn new(phase: &str, r: &OptimResult, flops_per_eval: u64) -> Self {
        PhaseReport {
            phase: phase.to_string(),
            iterations: r.iterations,
            evaluations: r.evaluations,
            objective: r.objective,
            trace: r.trace.clone(),
            flops_per_eval,
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.flops_per_eval * self.evaluations as u64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub sizes: LayerSizes,
    pub phases: Vec<PhaseReport>,
}

impl TrainReport {
    /// Flops of one fine-tuning objective evaluation.
    pub fn finetune_flops_per_eval(&self) -> u64 {
        self.phases
            .iter()
            .find(|p| p.phase == "finetune")
            .map_or(0, |p| p.flops_per_eval)
    }

    pub fn total_flops(&self) -> u64 {
        self.phases.iter().map(PhaseReport::total_flops).sum()
    }
}

/// Approximate flops of one pretraining evaluation: five `M x N x K`
/// products.
pub fn sae_flops(m: usize, n: usize, k: usize) -> u64 {
    10 * (m * n * k) as u64
}

/// Approximate flops of one fine-tuning evaluation: forward plus backward.
pub fn finetune_flops(m: usize, sizes: LayerSizes) -> u64 {
    6 * (m * (sizes.n * sizes.k1 + sizes.k1 * sizes.k2 + sizes.k2)) as u64
}

/// Initialise a network of the given hidden sizes and pretrain both hidden
/// layers as sparse autoencoders. The output layer keeps its initial values.
pub fn pretrain_network(
    data: &LabeledDataset,
    input: &InputSpec,
    k1: usize,
    k2: usize,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, Vec<PhaseReport>)> {
    cfg.validate()?;
    let sizes = LayerSizes::new(input.input_len(), k1, k2);
    let mut params = init_params(cfg.seed, sizes, input.clone())?;
    let mut refs: Vec<&PatchInput> = data.inputs.iter().collect();
    if let Some(b) = cfg.minibatch.filter(|&b| b < refs.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        refs.shuffle(&mut rng);
        refs.truncate(b);
    }
    let optim = cfg.pretrain_optim();
    let p1 = SaeProblem::layer1(&refs, &input.modality)?;
    let (w1, b1, r1) = pretrain_layer(&p1, &params.w1, &params.b1, &cfg.reg1, &optim)?;
    log::info!("pretrain layer 1 ({k1}): {} iterations, objective {:.6e}", r1.iterations, r1.objective);
    let mut phases = vec![PhaseReport::new("pretrain1", &r1, sae_flops(refs.len(), sizes.n, k1))];
    let h1 = encode(&p1.x.view(), &w1.view(), &b1.view());
    let p2 = SaeProblem::layer2(h1);
    let (w2, b2, r2) = pretrain_layer(&p2, &params.w2, &params.b2, &cfg.reg2, &optim)?;
    log::info!("pretrain layer 2 ({k2}): {} iterations, objective {:.6e}", r2.iterations, r2.objective);
    phases.push(PhaseReport::new("pretrain2", &r2, sae_flops(refs.len(), k1, k2)));
    params.w1 = w1;
    params.b1 = b1;
    params.w2 = w2;
    params.b2 = b2;
    Ok((params, phases))
}

/// Pretrain both layers (unless disabled) and fine-tune a network of the
/// given hidden sizes.
pub fn train_network(
    data: &LabeledDataset,
    input: &InputSpec,
    k1: usize,
    k2: usize,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, TrainReport)> {
    cfg.validate()?;
    let sizes = LayerSizes::new(input.input_len(), k1, k2);
    let (params, mut phases) = if cfg.pretrain {
        pretrain_network(data, input, k1, k2, cfg)?
    } else {
        (init_params(cfg.seed, sizes, input.clone())?, Vec::new())
    };
    let (params, rf) = finetune(&params, data, cfg)?;
    log::info!("finetune ({k1}, {k2}): {} iterations, objective {:.6e}", rf.iterations, rf.objective);
    phases.push(PhaseReport::new("finetune", &rf, finetune_flops(data.len(), sizes)));
    Ok((params, TrainReport { sizes, phases }))
}

/// Hidden sizes of the cascade networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeSizes {
    pub small: (usize, usize),
    pub large: (usize, usize),
}

impl Default for CascadeSizes {
    fn default() -> Self {
        CascadeSizes {
            small: (50, 50),
            large: (200, 200),
        }
    }
}

/// Train the small and large networks independently on the same extracted
/// data.
pub fn train_cascade(
    data: &LabeledDataset,
    input: &InputSpec,
    sizes: CascadeSizes,
    cfg: &TrainConfig,
) -> Result<(CascadeParams, TrainReport, TrainReport)> {
    let (small, rs) = train_network(data, input, sizes.small.0, sizes.small.1, cfg)?;
    let (large, rl) = train_network(data, input, sizes.large.0, sizes.large.1, cfg)?;
    Ok((CascadeParams::new(small, large)?, rs, rl))
}

/// Fraction of examples whose prediction `p > 0.5` matches the label.
pub fn recognition_accuracy(params: &NetworkParams, data: &LabeledDataset) -> Result<f64> {
    let n = data.input_len();
    let mut xs = Vec::with_capacity(data.len() * n);
    for p in &data.inputs {
        xs.extend_from_slice(&p.x);
    }
    let probs = crate::net::forward_batch(params, &xs, data.len())?;
    let correct = probs
        .iter()
        .zip(&data.labels)
        .filter(|(&p, &l)| (p > 0.5) == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
