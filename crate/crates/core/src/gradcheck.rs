//! Finite-difference gradient checking and random small networks to run it
//! on.
//!
//! Checks run in `f64` through the same generic kernels used for training.
//! Coordinates whose perturbation flips a ReLU sign or moves a max-pool
//! argmax sit on a kink of the objective, where a central difference is not
//! a derivative; those are counted as skipped rather than compared.

use rand::Rng;

use crate::error::Result;
use crate::network::{ActivationTrace, Checkpoint, LayerKind, LayerSpec, NetworkSpec};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-4;
/// Denominator floor for relative errors between near-zero gradients.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates on a kink, not compared.
    pub skipped: usize,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
    }
}

/// The piecewise-linear pieces selected by a forward pass.
fn pattern(ck: &Checkpoint<f64>, trace: &ActivationTrace<f64>) -> Vec<Vec<usize>> {
    ck.spec()
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, layer)| match layer.kind {
            LayerKind::Relu => Some(
                trace
                    .layer_input(i)
                    .data()
                    .iter()
                    .map(|&v| (v > 0.0) as usize)
                    .collect(),
            ),
            LayerKind::MaxPool { .. } => trace.pool_argmax(i).map(<[usize]>::to_vec),
            _ => None,
        })
        .collect()
}

fn objective(ck: &Checkpoint<f64>, image: &Tensor<f64>, target: usize) -> Result<(f64, Vec<Vec<usize>>)> {
    let (probs, trace) = ck.forward(image)?;
    Ok((-probs.data()[target].ln(), pattern(ck, &trace)))
}

/// Compares [`Checkpoint::backward`] with central differences of
/// `−ln P(target)` over every input coordinate and every trainable
/// parameter.
pub fn check_gradients(ck: &Checkpoint<f64>, image: &Tensor<f64>, target: usize, eps: f64) -> Result<GradCheckReport> {
    let (_, trace) = ck.forward(image)?;
    let base = pattern(ck, &trace);
    let grads = ck.backward(&trace, target)?;
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_relative_error: 0.0,
    };

    let mut compare = |analytic: f64, plus: (f64, Vec<Vec<usize>>), minus: (f64, Vec<Vec<usize>>)| {
        if plus.1 != base || minus.1 != base {
            report.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * eps);
        report.checked += 1;
        report.max_relative_error = report
            .max_relative_error
            .max(relative_error(analytic, numeric, RELATIVE_FLOOR));
    };

    let mut x = image.clone();
    for j in 0..x.len() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + eps;
        let plus = objective(ck, &x, target)?;
        x.data_mut()[j] = orig - eps;
        let minus = objective(ck, &x, target)?;
        x.data_mut()[j] = orig;
        compare(grads.input.data()[j], plus, minus);
    }

    let mut net = ck.clone();
    for (i, g) in grads.params.iter().enumerate() {
        let Some(g) = g else { continue };
        for (bias, analytic) in [(false, &g.weights), (true, &g.bias)] {
            for j in 0..analytic.len() {
                let orig = *param_mut(&mut net, i, bias, j);
                *param_mut(&mut net, i, bias, j) = orig + eps;
                let plus = objective(&net, image, target)?;
                *param_mut(&mut net, i, bias, j) = orig - eps;
                let minus = objective(&net, image, target)?;
                *param_mut(&mut net, i, bias, j) = orig;
                compare(analytic.data()[j], plus, minus);
            }
        }
    }
    Ok(report)
}

fn param_mut(net: &mut Checkpoint<f64>, layer: usize, bias: bool, j: usize) -> &mut f64 {
    let p = net.params_mut()[layer].as_mut().expect("layer has parameters");
    let t = if bias { &mut p.bias } else { &mut p.weights };
    &mut t.data_mut()[j]
}

/// Checks several targets on one network and merges the reports.
pub fn check_all_targets(ck: &Checkpoint<f64>, image: &Tensor<f64>, eps: f64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_relative_error: 0.0,
    };
    for target in 0..ck.spec().class_count() {
        report.merge(check_gradients(ck, image, target, eps)?);
    }
    Ok(report)
}

/// A random small network using every layer kind:
/// conv, relu, maxpool, flatten, dense, relu, dense, softmax.
pub fn random_spec(rng: &mut impl Rng) -> NetworkSpec {
    loop {
        let c: usize = rng.gen_range(1..=2);
        let h: usize = rng.gen_range(4..=7);
        let w: usize = rng.gen_range(4..=7);
        let k = rng.gen_range(1..=3);
        let kh = rng.gen_range(1..=3);
        let kw = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let window = 2;
        let pool_stride = rng.gen_range(1..=2);
        let hidden = rng.gen_range(2..=5);
        let classes = rng.gen_range(2..=4);
        let Some(conv_h) = (h + 2 * pad).checked_sub(kh).map(|d| d / stride + 1) else { continue };
        let Some(conv_w) = (w + 2 * pad).checked_sub(kw).map(|d| d / stride + 1) else { continue };
        if conv_h < window || conv_w < window {
            continue;
        }
        let pooled = k * ((conv_h - window) / pool_stride + 1) * ((conv_w - window) / pool_stride + 1);
        let layers = vec![
            LayerSpec::conv(k, c, kh, kw, stride, pad),
            LayerSpec::relu(),
            LayerSpec::maxpool(window, pool_stride),
            LayerSpec::flatten(),
            LayerSpec::dense(hidden, pooled),
            LayerSpec::relu(),
            LayerSpec::dense(classes, hidden),
            LayerSpec::softmax(),
        ];
        if let Ok(spec) = NetworkSpec::new([c, h, w], layers) {
            return spec;
        }
    }
}

/// Glorot weights from `rng` plus small random biases.
pub fn random_checkpoint(spec: NetworkSpec, rng: &mut impl Rng) -> Checkpoint<f64> {
    let mut ck = Checkpoint::<f64>::init(spec, rng.gen());
    for p in ck.params_mut().iter_mut().flatten() {
        for b in p.bias.data_mut() {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
    ck
}

pub fn random_image(shape: [usize; 3], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).expect("positive dims")
}

/// A random network and image whose input gradient is not identically zero,
/// so that a check on it exercises every layer.
pub fn random_case(rng: &mut impl Rng) -> (Checkpoint<f64>, Tensor<f64>) {
    loop {
        let ck = random_checkpoint(random_spec(rng), rng);
        let image = random_image(ck.spec().input_shape(), rng);
        let (_, trace) = ck.forward(&image).expect("shapes agree");
        let grad = ck.backward(&trace, 0).expect("class 0 exists").input;
        if grad.data().iter().any(|&g| g != 0.0) {
            return (ck, image);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3);
    }

    #[test]
    fn random_specs_use_every_layer_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let spec = random_spec(&mut rng);
            let names: Vec<_> = spec.layers().iter().map(|l| l.kind.name()).collect();
            for kind in ["conv", "relu", "maxpool", "flatten", "dense", "softmax"] {
                assert!(names.contains(&kind), "{names:?}");
            }
        }
    }

    #[test]
    fn random_cases_pass_and_are_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let (ck, image) = random_case(&mut rng);
            let report = check_all_targets(&ck, &image, DEFAULT_EPSILON).unwrap();
            assert!(report.checked > report.skipped, "{report:?}");
            assert!(report.max_relative_error < 1e-4, "{report:?}");
        }
    }
}
