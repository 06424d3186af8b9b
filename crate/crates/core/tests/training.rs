use deepgrasp::net::{forward, init_params, sigmoid, LayerSizes};
use deepgrasp::optim::{Method, OptimConfig};
use deepgrasp::patch::{mask_scale, InputSpec, ModalityMask, PatchInput};
use deepgrasp::regularization::{RegConfig, RegKind};
use deepgrasp::rgbd::synth::{synth_suite, SynthSpec};
use deepgrasp::training::{
    build_dataset, finetune, finetune_objective, full_objective, pretrain_layer, recognition_accuracy,
    sae_objective, train_cascade, train_network, CascadeSizes, FinetuneProblem, LabeledDataset, SaeProblem,
    TrainConfig,
};
use deepgrasp::GraspRect;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rect() -> GraspRect {
    GraspRect::new(5.0, 5.0, 0.0, 4.0, 2.0).unwrap()
}

/// Input spec with one pixel per channel, so a patch is a plain 7-vector.
fn pixel_spec() -> InputSpec {
    InputSpec::new(1)
}

fn pixel_patch(values: &[f64]) -> PatchInput {
    let mut x = vec![0.0; 7];
    x[..values.len()].copy_from_slice(values);
    let raw = PatchInput {
        x,
        mu: vec![true; 7],
        psi: Vec::new(),
        source: rect(),
    };
    mask_scale(&raw, &ModalityMask::per_channel(1), 2.0).unwrap()
}

fn unregularized() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for reg in [&mut cfg.reg1, &mut cfg.reg2] {
        reg.beta = 0.0;
        reg.lambda = 0.0;
    }
    cfg
}

fn toy_dataset(seed: u64, m: usize) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    while inputs.len() < m {
        let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let margin = a + 0.5 * b;
        if margin.abs() < 0.2 {
            continue;
        }
        inputs.push(pixel_patch(&[a, b]));
        labels.push(margin > 0.0);
    }
    LabeledDataset::new(inputs, labels).unwrap()
}

fn hidden_means(problem: &SaeProblem, w: &Array2<f64>, b: &Array1<f64>) -> f64 {
    let a = problem.x.dot(w) + b;
    a.mapv(sigmoid).mean().unwrap()
}

#[test]
fn pretraining_trace_is_non_increasing() {
    let data = toy_dataset(1, 60);
    let modality = ModalityMask::per_channel(1);
    let refs: Vec<&PatchInput> = data.inputs.iter().collect();
    let problem = SaeProblem::layer1(&refs, &modality).unwrap();
    let params = init_params(3, LayerSizes::new(7, 4, 3), pixel_spec()).unwrap();
    for method in [Method::Lbfgs, Method::GradientDescent] {
        let optim = OptimConfig {
            method,
            max_iters: 100,
            ..OptimConfig::default()
        };
        let (_, _, r) = pretrain_layer(&problem, &params.w1, &params.b1, &RegConfig::default(), &optim).unwrap();
        for pair in r.trace.windows(2) {
            assert!(pair[1].objective <= pair[0].objective, "{method:?}: {pair:?}");
        }
    }
}

#[test]
fn three_dim_subspace_is_reconstructed() {
    // Coefficients centred at 1 sit where a unit with weight 2 and zero net
    // input is locally linear with unit gain, so an exact fit exists.
    let (n, m) = (12, 200);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let basis = {
        let raw: Array2<f64> = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let mut q = raw.clone();
        for j in 0..3 {
            for i in 0..j {
                let proj = q.column(i).dot(&raw.column(j));
                let ci = q.column(i).to_owned();
                q.column_mut(j).scaled_add(-proj, &ci);
            }
            let norm = q.column(j).dot(&q.column(j)).sqrt();
            q.column_mut(j).mapv_inplace(|v| v / norm);
        }
        q
    };
    let z = Array2::from_shape_fn((m, 3), |_| 1.0 + rng.random_range(-0.15..0.15));
    let x = z.dot(&basis.t());
    let problem = SaeProblem {
        target: x.clone(),
        weight: Array2::ones((m, n)),
        x: x.clone(),
        modality: ModalityMask::singletons(n),
    };
    let mut reg = RegConfig::new(RegKind::L2);
    reg.beta = 0.0;
    reg.lambda = 0.0;
    let optim = OptimConfig {
        max_iters: 3000,
        tol: 1e-12,
        ..OptimConfig::default()
    };
    let w0 = Array2::from_shape_fn((n, 3), |_| rng.random_range(-0.5..0.5));
    let (w, b, _) = pretrain_layer(&problem, &w0, &Array1::zeros(3), &reg, &optim).unwrap();
    let mut theta: Vec<f64> = w.iter().copied().collect();
    theta.extend(b.iter());
    let (terms, _, _) = sae_objective(&problem, 3, &reg, &theta).unwrap();
    let mean_error = terms.reconstruction / m as f64;
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let variance = (&x - &mean).mapv(|v| v * v).sum() / m as f64;
    assert!(mean_error < 1e-3 * variance, "error {mean_error:e} variance {variance:e}");
}

#[test]
fn huge_sparsity_weight_silences_hidden_units() {
    let data = toy_dataset(2, 80);
    let modality = ModalityMask::per_channel(1);
    let refs: Vec<&PatchInput> = data.inputs.iter().collect();
    let problem = SaeProblem::layer1(&refs, &modality).unwrap();
    let params = init_params(5, LayerSizes::new(7, 6, 3), pixel_spec()).unwrap();
    let mut reg = RegConfig::default();
    reg.lambda = 1e6;
    let optim = OptimConfig {
        max_iters: 200,
        ..OptimConfig::default()
    };
    let (w, b, _) = pretrain_layer(&problem, &params.w1, &params.b1, &reg, &optim).unwrap();
    let mean = hidden_means(&problem, &w, &b);
    assert!(mean < 0.05, "mean activation {mean}");
}

#[test]
fn separable_toy_set_is_learned() {
    let data = toy_dataset(3, 100);
    let mut cfg = unregularized();
    cfg.optim.max_iters = 500;
    let (params, _) = train_network(&data, &pixel_spec(), 4, 4, &cfg).unwrap();
    assert_eq!(recognition_accuracy(&params, &data).unwrap(), 1.0);
}

#[test]
fn single_positive_example_probability_rises() {
    let data = LabeledDataset::new(vec![pixel_patch(&[0.3, -0.7, 1.1])], vec![true]).unwrap();
    let cfg = unregularized();
    let params = init_params(9, LayerSizes::new(7, 3, 2), pixel_spec()).unwrap();
    let p0 = forward(&params, &data.inputs[0].x).unwrap().p;
    let (trained, r) = finetune(&params, &data, &cfg).unwrap();
    // The objective is -ln p, so a non-increasing trace means p never falls.
    let ps: Vec<f64> = r.trace.iter().map(|t| (-t.objective).exp()).collect();
    for pair in ps.windows(2) {
        assert!(pair[1] >= pair[0]);
    }
    let p1 = forward(&trained, &data.inputs[0].x).unwrap().p;
    assert!(p1 > p0 && p1 > 0.99, "{p0} -> {p1}");
}

#[test]
fn flipped_labels_and_output_weights_mirror_the_trace() {
    let data = toy_dataset(4, 40);
    let flipped = LabeledDataset::new(data.inputs.clone(), data.labels.iter().map(|l| !l).collect()).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.optim.max_iters = 40;
    let params = init_params(10, LayerSizes::new(7, 4, 3), pixel_spec()).unwrap();
    let mut negated = params.clone();
    negated.w3.mapv_inplace(|v| -v);
    negated.b3 = -negated.b3;
    let (a, ra) = finetune(&params, &data, &cfg).unwrap();
    let (b, rb) = finetune(&negated, &flipped, &cfg).unwrap();
    assert_eq!(ra.trace.len(), rb.trace.len());
    for (x, y) in ra.trace.iter().zip(&rb.trace) {
        assert!((x.objective - y.objective).abs() <= 1e-9 * x.objective.abs().max(1.0));
    }
    for (x, y) in a.w3.iter().zip(&b.w3) {
        assert!((x + y).abs() < 1e-6);
    }
}

#[test]
fn duplicated_examples_double_the_data_terms() {
    let data = toy_dataset(5, 15);
    let mut doubled_inputs = data.inputs.clone();
    doubled_inputs.extend(data.inputs.iter().cloned());
    let mut doubled_labels = data.labels.clone();
    doubled_labels.extend(&data.labels);
    let doubled = LabeledDataset::new(doubled_inputs, doubled_labels).unwrap();

    let sizes = LayerSizes::new(7, 3, 2);
    let params = init_params(6, sizes, pixel_spec()).unwrap();
    let modality = ModalityMask::per_channel(1);
    let reg = RegConfig::default();
    let theta = params.to_flat();
    let one = FinetuneProblem::new(&data, &modality, 3);
    let two = FinetuneProblem::new(&doubled, &modality, 3);
    let (t1, _, _) = finetune_objective(&one, sizes, &reg, &reg, &theta).unwrap();
    let (t2, _, _) = finetune_objective(&two, sizes, &reg, &reg, &theta).unwrap();
    assert!((t2.nll - 2.0 * t1.nll).abs() <= 1e-12 * t1.nll);
    assert_eq!(t1.f1, t2.f1);

    let r1: Vec<&PatchInput> = data.inputs.iter().collect();
    let r2: Vec<&PatchInput> = doubled.inputs.iter().collect();
    let mut sae_theta: Vec<f64> = params.w1.iter().copied().collect();
    sae_theta.extend(params.b1.iter());
    let (s1, _, _) = sae_objective(&SaeProblem::layer1(&r1, &modality).unwrap(), 3, &reg, &sae_theta).unwrap();
    let (s2, _, _) = sae_objective(&SaeProblem::layer1(&r2, &modality).unwrap(), 3, &reg, &sae_theta).unwrap();
    assert!((s2.reconstruction - 2.0 * s1.reconstruction).abs() <= 1e-12 * s1.reconstruction);
    assert!((s2.sparsity - 2.0 * s1.sparsity).abs() <= 1e-12 * s1.sparsity);
}

#[test]
fn zero_weights_reduce_to_negative_log_likelihood() {
    let data = toy_dataset(6, 20);
    let cfg = unregularized();
    let params = init_params(2, LayerSizes::new(7, 3, 3), pixel_spec()).unwrap();
    let (value, _) = full_objective(&params, &data, &cfg).unwrap();
    let oracle: f64 = data
        .inputs
        .iter()
        .zip(&data.labels)
        .map(|(p, &y)| {
            let prob = forward(&params, &p.x).unwrap().p;
            -(if y { prob.ln() } else { (1.0 - prob).ln() })
        })
        .sum();
    assert!((value - oracle).abs() <= 1e-10 * oracle);
}

#[test]
fn training_is_deterministic() {
    let data = toy_dataset(7, 50);
    let mut cfg = TrainConfig::default();
    cfg.optim.max_iters = 30;
    cfg.minibatch = Some(20);
    let (a, _) = train_network(&data, &pixel_spec(), 5, 4, &cfg).unwrap();
    let (b, _) = train_network(&data, &pixel_spec(), 5, 4, &cfg).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(a.to_flat()), bits(b.to_flat()));
}

#[test]
fn masked_constant_channel_targets_are_unscaled() {
    let side = 4;
    let modality = ModalityMask::per_channel(side);
    let n = modality.len();
    let raw = PatchInput {
        x: vec![0.8; n],
        mu: (0..n).map(|i| i % 2 == 0).collect(),
        psi: Vec::new(),
        source: rect(),
    };
    let scaled = mask_scale(&raw, &modality, 2.0).unwrap();
    let problem = SaeProblem::layer1(&[&scaled], &modality).unwrap();
    for i in 0..n {
        let (x, t, w) = (problem.x[[0, i]], problem.target[[0, i]], problem.weight[[0, i]]);
        if raw.mu[i] {
            assert_eq!((x, t, w), (1.6, 0.8, 2.0));
        } else {
            assert_eq!((x, t, w), (0.0, 0.0, 0.0));
        }
    }
}

#[test]
fn cascade_on_synthetic_patches() {
    let side = 24;
    let mut scenes = Vec::new();
    let mut seed = 7;
    let (input, mut data) = loop {
        scenes.extend(synth_suite(seed, 4, &SynthSpec::default()).unwrap());
        seed += 4;
        let built = build_dataset(&scenes, side, ModalityMask::per_channel(side), 2.0).unwrap();
        if built.1.len() >= 400 {
            break built;
        }
    };
    data.inputs.truncate(400);
    data.labels.truncate(400);
    let mut cfg = TrainConfig::default();
    cfg.optim.max_iters = 100;
    cfg.pretrain_iters = Some(50);
    let (cascade, small, large) = train_cascade(&data, &input, CascadeSizes::default(), &cfg).unwrap();
    assert!(small.finetune_flops_per_eval() < large.finetune_flops_per_eval());
    for net in [&cascade.small, &cascade.large] {
        let acc = recognition_accuracy(net, &data).unwrap();
        assert!(acc >= 0.95, "training accuracy {acc}");
    }
}
