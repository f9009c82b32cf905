//! Helpers shared by the integration tests: a finite-difference gradient
//! checker and small synthetic datasets.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use multiscale_tiles::class::TissueClass;
use multiscale_tiles::dataset::{samples_from_archive, Sample};
use multiscale_tiles::nn::{Mode, ModelWeights, Sequential, Tensor};
use multiscale_tiles::pipeline::cohort_specs;
use multiscale_tiles::pyramid::{generate_synthetic, SyntheticSpec};
use multiscale_tiles::tiling::{extract_regions, ExtractionPlan, TileArchive};
use multiscale_tiles::training::FeatureSet;

pub const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Scalar objective `sum(output * projection)`, whose gradient with respect
/// to the output is exactly `projection`.
fn projected(
    net: &Sequential,
    w: &ModelWeights<f64>,
    x: &Tensor<f64>,
    mode: Mode,
    seed: u64,
    proj: &Tensor<f64>,
) -> f64 {
    let out = net.forward(w, x.clone(), mode, seed).unwrap();
    out.output()
        .data()
        .iter()
        .zip(proj.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Largest relative error between analytic and centered-difference gradients
/// of `sum(output * projection)` over up to `per_tensor` random coordinates
/// of every trainable tensor and of the input.
pub fn max_gradient_error(
    net: &Sequential,
    weights: &ModelWeights<f64>,
    input: &Tensor<f64>,
    mode: Mode,
    seed: u64,
    rng: &mut ChaCha8Rng,
    per_tensor: usize,
) -> f64 {
    let acts = net.forward(weights, input.clone(), mode, seed).unwrap();
    let proj = random_tensor(rng, acts.output().shape(), 1.0);
    let (grads, input_grad) = net.backward_from(weights, &acts, proj.clone()).unwrap();
    let mut worst = 0.0f64;

    for (name, g) in &grads {
        for _ in 0..per_tensor.min(g.len()) {
            let i = rng.gen_range(0..g.len());
            let mut w = weights.clone();
            let base = w.tensor(name).unwrap().data()[i];
            w.tensor_mut(name).unwrap().data_mut()[i] = base + FD_STEP;
            let up = projected(net, &w, input, mode, seed, &proj);
            w.tensor_mut(name).unwrap().data_mut()[i] = base - FD_STEP;
            let down = projected(net, &w, input, mode, seed, &proj);
            worst = worst.max(relative_error(g.data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    for _ in 0..per_tensor.min(input.len()) {
        let i = rng.gen_range(0..input.len());
        let mut x = input.clone();
        let base = x.data()[i];
        x.data_mut()[i] = base + FD_STEP;
        let up = projected(net, weights, &x, mode, seed, &proj);
        x.data_mut()[i] = base - FD_STEP;
        let down = projected(net, weights, &x, mode, seed, &proj);
        worst = worst.max(relative_error(
            input_grad.data()[i],
            (up - down) / (2.0 * FD_STEP),
        ));
    }
    worst
}

/// Same check for the mean cross-entropy loss of a softmax network.
pub fn max_loss_gradient_error(
    net: &Sequential,
    weights: &ModelWeights<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
    per_tensor: usize,
) -> f64 {
    use multiscale_tiles::nn::cross_entropy;
    let loss = |w: &ModelWeights<f64>| {
        let acts = net.forward(w, input.clone(), Mode::Eval, 0).unwrap();
        cross_entropy(acts.output(), labels).unwrap()
    };
    let acts = net.forward(weights, input.clone(), Mode::Eval, 0).unwrap();
    let grads = net.backward(weights, &acts, labels).unwrap();
    let mut worst = 0.0f64;
    for (name, g) in &grads {
        for _ in 0..per_tensor.min(g.len()) {
            let i = rng.gen_range(0..g.len());
            let mut w = weights.clone();
            let base = w.tensor(name).unwrap().data()[i];
            w.tensor_mut(name).unwrap().data_mut()[i] = base + FD_STEP;
            let up = loss(&w);
            w.tensor_mut(name).unwrap().data_mut()[i] = base - FD_STEP;
            let down = loss(&w);
            worst = worst.max(relative_error(g.data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Small synthetic slides (2048², 512-pixel cells) tiled at stride 128.
pub fn mini_cohort(slides: usize, seed: u64) -> Vec<TileArchive> {
    cohort_specs(slides, 2048, 2048, seed)
        .into_iter()
        .map(|spec| {
            let spec = SyntheticSpec {
                cell_size: 512,
                margin: 128,
                ..spec
            };
            let (p, regions) = generate_synthetic(&spec).unwrap();
            TileArchive::new(extract_regions(&p, &regions, &ExtractionPlan::default()).unwrap())
                .unwrap()
        })
        .collect()
}

pub fn all_samples(archives: &[TileArchive]) -> Vec<Sample> {
    archives
        .iter()
        .enumerate()
        .flat_map(|(i, a)| samples_from_archive(i as u32, a))
        .collect()
}

/// Six noisy, well separated clusters in `width` dimensions.
pub fn clusters(n_per_class: usize, width: usize, rng: &mut ChaCha8Rng) -> FeatureSet {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n_per_class * TissueClass::ALL.len() {
        let class = i % 6;
        for d in 0..width {
            let centre = if d % 6 == class { 1.5 } else { 0.0 };
            data.push(centre + rng.gen_range(-0.6f32..0.6));
        }
        labels.push(class);
    }
    FeatureSet::new(
        Tensor::from_vec(&[labels.len(), width], data).unwrap(),
        labels,
    )
    .unwrap()
}
