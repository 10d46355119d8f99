//! In-process numerical self-checks: finite-difference gradient checks,
//! the direct-convolution oracle and file-format roundtrips.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{synthesize_dataset, DatasetArchive};
use crate::models::{decode_model, encode_model, Arch, ModelSpec};
use crate::nn::{cross_entropy, one_hot, softmax_cross_entropy_grad, Conv2d, LayerSpec, Mode, Network, Padding};
use crate::tensor::{Element, Tensor};
use crate::train::{EpochRecord, History};

/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-3;
pub const GRAD_TOL_F32: f64 = 1e-2;
pub const GRAD_TOL_F64: f64 = 1e-4;
pub const CONV_ORACLE_TOL: f64 = 1e-4;
pub const CONV_ORACLE_CASES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Fast,
    Full,
}

/// One named check and its measured value against a tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        CheckOutcome {
            name: name.into(),
            value,
            tolerance,
            passed: value.is_finite() && value <= tolerance,
        }
    }

    fn flag(name: impl Into<String>, ok: bool) -> Self {
        CheckOutcome {
            name: name.into(),
            value: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            passed: ok,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub level: Level,
    pub checks: Vec<CheckOutcome>,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `L = Σ r·y` for a fixed random `r`; also checks the input gradient.
    Projection,
    /// Cross-entropy on a softmax output via the fused logit gradient.
    CrossEntropy,
}

/// A network, an input batch and the loss used for a gradient check.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: String,
    pub specs: Vec<LayerSpec>,
    pub input: Vec<usize>,
    pub batch: usize,
    pub loss: LossKind,
    pub coords_per_tensor: usize,
}

impl GradCase {
    fn new(name: &str, specs: Vec<LayerSpec>, input: &[usize], batch: usize, loss: LossKind) -> Self {
        GradCase {
            name: name.into(),
            specs,
            input: input.to_vec(),
            batch,
            loss,
            coords_per_tensor: 6,
        }
    }
}

/// One case per layer type plus the fused loss head.
pub fn layer_cases() -> Vec<GradCase> {
    use LossKind::*;
    let conv = |out_channels, k: usize, stride, padding| LayerSpec::Conv2d {
        out_channels,
        kernel: [k, k],
        stride,
        padding,
    };
    vec![
        GradCase::new("conv2d_3x3_valid", vec![conv(3, 3, 1, Padding::Valid)], &[2, 7, 7], 2, Projection),
        GradCase::new("conv2d_5x5_same", vec![conv(4, 5, 1, Padding::Same)], &[3, 6, 6], 2, Projection),
        GradCase::new("conv2d_1x1", vec![conv(2, 1, 1, Padding::Valid)], &[3, 4, 5], 2, Projection),
        GradCase::new("conv2d_stride2", vec![conv(3, 3, 2, Padding::Valid)], &[2, 9, 9], 2, Projection),
        GradCase::new("max_pool2d", vec![LayerSpec::pool2()], &[2, 6, 6], 2, Projection),
        GradCase::new("dense", vec![LayerSpec::Dense { out_features: 5 }], &[7], 3, Projection),
        GradCase::new("batch_norm_spatial", vec![LayerSpec::batch_norm(3)], &[3, 4, 4], 4, Projection),
        GradCase::new("batch_norm_flat", vec![LayerSpec::batch_norm(6)], &[6], 5, Projection),
        GradCase::new("relu", vec![LayerSpec::Relu], &[10], 3, Projection),
        GradCase::new("flatten", vec![LayerSpec::Flatten], &[2, 3, 3], 2, Projection),
        GradCase::new("softmax", vec![LayerSpec::Softmax], &[5], 3, Projection),
        GradCase::new(
            "inception",
            vec![LayerSpec::Inception {
                b1: 2,
                b3: 3,
                b5: 2,
                bpool: 2,
            }],
            &[3, 6, 6],
            2,
            Projection,
        ),
        GradCase::new(
            "softmax_cross_entropy",
            vec![LayerSpec::Dense { out_features: 3 }, LayerSpec::Softmax],
            &[6],
            4,
            CrossEntropy,
        ),
    ]
}

/// The custom CNN on full-size input with the cross-entropy loss.
pub fn custom_cnn_case(width_mult: f64, coords_per_tensor: usize) -> GradCase {
    let spec = ModelSpec::new(Arch::CustomCnn, 1, width_mult).expect("valid custom cnn");
    GradCase {
        name: format!("custom_cnn_wm{width_mult}"),
        specs: spec.layers.clone(),
        input: spec.input_shape().to_vec(),
        // Batch norm over very few samples normalizes near-constant features,
        // and the O(ε²) truncation error of the central difference then
        // exceeds the f64 tolerance. Sixteen samples keep it well below.
        batch: 16,
        loss: LossKind::CrossEntropy,
        coords_per_tensor,
    }
}

struct Problem {
    net: Network<f64>,
    x: Tensor<f64>,
    upstream: Tensor<f64>,
    labels: Vec<usize>,
}

fn build_problem(case: &GradCase, seed: u64) -> Problem {
    let mut net = Network::<f64>::build(&case.specs, &case.input, seed).expect("gradient case builds");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    // Move biases, γ and β off their initial constants so every term of the
    // backward pass is exercised.
    for p in net.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let mut shape = vec![case.batch];
    shape.extend(&case.input);
    let x = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)).expect("input shape");
    let mut out = vec![case.batch];
    out.extend(net.output_shape());
    let upstream = Tensor::from_fn(&out, |_| rng.random_range(-1.0..1.0)).expect("output shape");
    let labels = (0..case.batch).map(|i| (i + seed as usize) % 3).collect();
    Problem {
        net,
        x,
        upstream,
        labels,
    }
}

fn loss_of<T: Element>(y: &Tensor<T>, kind: LossKind, r: &Tensor<T>, labels: &[usize]) -> f64 {
    match kind {
        LossKind::Projection => y
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy())
            .sum(),
        LossKind::CrossEntropy => {
            let k = y.shape()[1];
            cross_entropy(y, &one_hot(labels, k).expect("labels"), None).expect("loss")
        }
    }
}

fn pick(len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, count).into_vec()
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over all compared coordinates.
    pub rel_error: f64,
    pub coords: usize,
}

/// Runs one gradient check in precision `T`, comparing backprop against
/// central differences on sampled coordinates of every parameter tensor (and
/// of the input, for projection losses).
///
/// The differences are taken with ReLU masks and pool winners frozen at the
/// unperturbed point (see [`Network::replay_from`]), so a ±ε step that
/// crosses a switch still measures the one-sided piece back-propagation
/// differentiates. Each perturbation re-runs the network only from the layer
/// that owns the coordinate.
pub fn gradient_check<T: Element>(case: &GradCase, seed: u64) -> GradCheck {
    let problem = build_problem(case, seed);
    let mut net: Network<T> = problem.net.cast();
    let x: Tensor<T> = problem.x.cast();
    let r: Tensor<T> = problem.upstream.cast();
    let labels = problem.labels;

    net.zero_grads();
    let y = net.forward(&x, Mode::Train).expect("forward");
    let dx = match case.loss {
        LossKind::Projection => Some(net.backward_to_input(&r).expect("backward")),
        LossKind::CrossEntropy => {
            let target = one_hot::<T>(&labels, y.shape()[1]).expect("labels");
            let g = softmax_cross_entropy_grad(&y, &target, None).expect("grad");
            net.backward_from_logits(&g).expect("backward");
            None
        }
    };

    // Input of every layer at the unperturbed point.
    let mut acts = vec![x.clone()];
    for layer in net.layers() {
        let next = layer.replay(acts.last().expect("non-empty")).expect("replay");
        acts.push(next);
    }
    let owners: Vec<usize> = net
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(li, l)| std::iter::repeat_n(li, l.params().len()))
        .collect();
    let grads: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| p.grad.data().iter().map(|v| v.to_f64_lossy()).collect())
        .collect();

    let eps = T::from_f64_lossy(FD_EPSILON);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let (mut diff, mut an, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let mut coords = 0;
    let mut compare = |a: f64, n: f64| {
        diff += (a - n).powi(2);
        an += a * a;
        nn += n * n;
        coords += 1;
    };

    for (pi, g) in grads.iter().enumerate() {
        let layer = owners[pi];
        for i in pick(g.len(), case.coords_per_tensor, &mut rng) {
            let original = net.params_mut()[pi].value.data()[i];
            let mut at = |v: T| {
                net.params_mut()[pi].value.data_mut()[i] = v;
                loss_of(&net.replay_from(layer, &acts[layer]).expect("replay"), case.loss, &r, &labels)
            };
            let (plus, minus) = (original + eps, original - eps);
            let n = (at(plus) - at(minus)) / (plus - minus).to_f64_lossy();
            net.params_mut()[pi].value.data_mut()[i] = original;
            compare(g[i], n);
        }
    }
    if let Some(dx) = dx {
        let mut xp = x.clone();
        for i in pick(dx.len(), case.coords_per_tensor.max(8), &mut rng) {
            let original = x.data()[i];
            let mut at = |v: T| {
                xp.data_mut()[i] = v;
                loss_of(&net.replay_from(0, &xp).expect("replay"), case.loss, &r, &labels)
            };
            let (plus, minus) = (original + eps, original - eps);
            let n = (at(plus) - at(minus)) / (plus - minus).to_f64_lossy();
            xp.data_mut()[i] = original;
            compare(dx.data()[i].to_f64_lossy(), n);
        }
    }
    let scale = an.sqrt().max(nn.sqrt());
    GradCheck {
        rel_error: if scale < 1e-12 { 0.0 } else { diff.sqrt() / scale },
        coords,
    }
}

/// Direct six-loop convolution in f64.
pub fn direct_conv(
    x: &Tensor<f32>,
    weight: &Tensor<f32>,
    bias: &[f32],
    stride: usize,
    pad: (usize, usize),
) -> Tensor<f32> {
    let [n, c, h, w] = x.shape().try_into().expect("rank 4 input");
    let [f, _, kh, kw] = weight.shape().try_into().expect("rank 4 weight");
    let ho = (h + 2 * pad.0 - kh) / stride + 1;
    let wo = (w + 2 * pad.1 - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * f * ho * wo);
    for s in 0..n {
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[fi] as f64;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad.0 as isize;
                                let ix = (ox * stride + kx) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                    continue;
                                }
                                let xv = x.data()[((s * c + ci) * h + iy as usize) * w + ix as usize];
                                let wv = weight.data()[((fi * c + ci) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    Tensor::new(&[n, f, ho, wo], out).expect("conv output shape")
}

/// Compares the production convolution against [`direct_conv`] on `cases`
/// random configurations (1×1, 3×3 and 5×5 kernels, both paddings, strides 1
/// and 2). Returns the worst `max|a − b| / max|b|`.
pub fn conv_oracle(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let k = [1, 3, 5][case % 3];
        let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        let stride = rng.random_range(1..=2);
        let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=6));
        let (h, w) = (rng.random_range(k..k + 9), rng.random_range(k..k + 9));
        let n = rng.random_range(1..=3);
        let mut conv = Conv2d::<f32>::new(cin, cout, [k, k], stride, padding).expect("valid conv");
        conv.weight.value = Tensor::from_fn(&[cout, cin, k, k], |_| rng.random_range(-1.0..1.0)).expect("w");
        conv.bias.value = Tensor::from_fn(&[cout], |_| rng.random_range(-1.0..1.0)).expect("b");
        let x = Tensor::from_fn(&[n, cin, h, w], |_| rng.random_range(-1.0..1.0)).expect("x");
        let pad = match padding {
            Padding::Same => ((k - 1) / 2, (k - 1) / 2),
            Padding::Valid => (0, 0),
        };
        let got = conv.infer(&x).expect("conv forward");
        let want = direct_conv(&x, &conv.weight.value, conv.bias.value.data(), stride, pad);
        assert_eq!(got.shape(), want.shape(), "case {case}");
        let scale = want.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-12);
        let err = got
            .data()
            .iter()
            .zip(want.data())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max((err / scale) as f64);
    }
    worst
}

fn archive_roundtrip() -> bool {
    let Ok(archive) = synthesize_dataset(4, 11, 1) else {
        return false;
    };
    let bytes = archive.encode();
    matches!(DatasetArchive::decode(&bytes), Ok(back) if back == archive && back.encode() == bytes)
}

fn model_roundtrip() -> bool {
    let spec = ModelSpec::new(Arch::CustomCnn, 1, 0.25).expect("valid spec");
    let net = spec.network(5).expect("network");
    let Ok(bytes) = encode_model(&spec, &net) else {
        return false;
    };
    let Ok((_, loaded)) = decode_model(&bytes) else {
        return false;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn(&[2, 1, 90, 90], |_| rng.random_range(0.0..1.0)).expect("x");
    match (net.predict(&x), loaded.predict(&x)) {
        (Ok(a), Ok(b)) => a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()),
        _ => false,
    }
}

fn history_roundtrip() -> bool {
    let h = History {
        epochs: (1..=10)
            .map(|e| EpochRecord {
                epoch: e,
                train_loss: 1.0 / (e as f64 + 0.3),
                train_acc: e as f64 / 11.0,
                val_loss: 0.7 / e as f64,
                val_acc: 0.3 + e as f64 / 17.0,
            })
            .collect(),
    };
    matches!(History::parse_csv(&h.to_csv()), Ok(back) if back == h)
}

/// Runs the self-check suite. `fast` checks the custom CNN at a quarter of
/// its width; `full` checks it at full width.
pub fn run(level: Level) -> VerifyReport {
    let start = Instant::now();
    let mut checks = Vec::new();
    let mut cases = layer_cases();
    cases.push(match level {
        Level::Fast => custom_cnn_case(0.25, 4),
        Level::Full => custom_cnn_case(1.0, 3),
    });
    for case in &cases {
        let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
        for seed in 0..5 {
            worst32 = worst32.max(gradient_check::<f32>(case, seed).rel_error);
            worst64 = worst64.max(gradient_check::<f64>(case, seed).rel_error);
        }
        checks.push(CheckOutcome::below(format!("grad/{}/f32", case.name), worst32, GRAD_TOL_F32));
        checks.push(CheckOutcome::below(format!("grad/{}/f64", case.name), worst64, GRAD_TOL_F64));
    }
    checks.push(CheckOutcome::below(
        "conv_oracle",
        conv_oracle(CONV_ORACLE_CASES, 2024),
        CONV_ORACLE_TOL,
    ));
    checks.push(CheckOutcome::flag("roundtrip/archive", archive_roundtrip()));
    checks.push(CheckOutcome::flag("roundtrip/model", model_roundtrip()));
    checks.push(CheckOutcome::flag("roundtrip/history", history_roundtrip()));
    VerifyReport {
        level,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes_in_both_precisions() {
        for case in layer_cases() {
            for seed in 0..5 {
                let c32 = gradient_check::<f32>(&case, seed);
                let c64 = gradient_check::<f64>(&case, seed);
                let (e32, e64) = (c32.rel_error, c64.rel_error);
                println!("{} seed {seed}: f32 {e32:.3e} f64 {e64:.3e}", case.name);
                assert!(c64.coords >= case.coords_per_tensor);
                assert!(e32 <= GRAD_TOL_F32, "{} seed {seed}: f32 {e32}", case.name);
                assert!(e64 <= GRAD_TOL_F64, "{} seed {seed}: f64 {e64}", case.name);
            }
        }
    }

    #[test]
    fn conv_oracle_agrees() {
        assert!(conv_oracle(CONV_ORACLE_CASES, 1) <= CONV_ORACLE_TOL);
    }
}
