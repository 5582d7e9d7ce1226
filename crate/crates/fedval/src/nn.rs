//! Minimal dense-network trainer: softmax regression or a small MLP with
//! tanh hidden layers, mean cross-entropy loss, and plain SGD steps.
//!
//! Everything here is a pure function of its inputs; parameter vectors are
//! flat `f64` buffers laid out layer by layer (row-major weights, then
//! biases).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the dense network: input width, hidden widths (possibly empty,
/// giving plain softmax regression), and the number of classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes < 2 || hidden.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "invalid architecture: input_dim={input_dim}, hidden={hidden:?}, num_classes={num_classes}"
            )));
        }
        Ok(Self { input_dim, hidden, num_classes })
    }

    /// Per-layer (fan_in, fan_out) pairs, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.num_classes));
        dims
    }

    /// Total number of parameters (weights + biases over all layers).
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Flat parameter vector together with the architecture that interprets it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub arch: Architecture,
}

impl ModelParams {
    pub fn new(values: Vec<f64>, arch: Architecture) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::InvalidInput(format!(
                "parameter vector length {} does not match architecture count {}",
                values.len(),
                arch.param_count()
            )));
        }
        Ok(Self { values, arch })
    }
}

/// A mini-batch: row-major feature matrix plus one integer label per row.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if labels.is_empty() || features.len() != labels.len() * input_dim {
            return Err(Error::InvalidInput(format!(
                "batch shape mismatch: {} feature values, {} labels, input_dim {}",
                features.len(),
                labels.len(),
                input_dim
            )));
        }
        Ok(Self { features, labels, input_dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Deterministic initialization: weights ~ N(0, 1/fan_in), biases zero.
pub fn init_params(arch: &Architecture, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(arch.param_count());
    for (fan_in, fan_out) in arch.layer_dims() {
        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
        for _ in 0..fan_in * fan_out {
            values.push(dist.sample(&mut rng));
        }
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ModelParams { values, arch: arch.clone() }
}

/// Forward pass activations kept for backprop: one matrix per hidden layer
/// plus the final probabilities.
struct ForwardPass {
    hidden: Vec<Vec<f64>>,
    probs: Vec<f64>,
    log_probs_true: Option<Vec<f64>>,
}

fn forward_inner(
    params: &ModelParams,
    features: &[f64],
    n: usize,
    labels: Option<&[usize]>,
) -> ForwardPass {
    let arch = &params.arch;
    let dims = arch.layer_dims();
    let mut hidden = Vec::with_capacity(arch.hidden.len());
    let mut act: Vec<f64> = features.to_vec();
    let mut offset = 0usize;
    let mut act_dim = arch.input_dim;

    for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
        debug_assert_eq!(fan_in, act_dim);
        let w = &params.values[offset..offset + fan_in * fan_out];
        let b = &params.values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;

        let mut z = vec![0.0f64; n * fan_out];
        for r in 0..n {
            let x = &act[r * fan_in..(r + 1) * fan_in];
            let zr = &mut z[r * fan_out..(r + 1) * fan_out];
            zr.copy_from_slice(b);
            for (i, &xi) in x.iter().enumerate() {
                let wrow = &w[i * fan_out..(i + 1) * fan_out];
                for (zj, &wij) in zr.iter_mut().zip(wrow) {
                    *zj += xi * wij;
                }
            }
        }

        let last = layer == dims.len() - 1;
        if last {
            // Stable softmax: subtract the row max; keep exact log-probs of
            // the true class around for the loss when labels are given.
            let c = fan_out;
            let mut probs = vec![0.0f64; n * c];
            let mut log_probs_true = labels.map(|_| Vec::with_capacity(n));
            for r in 0..n {
                let zr = &z[r * c..(r + 1) * c];
                let zmax = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for &v in zr {
                    denom += (v - zmax).exp();
                }
                let pr = &mut probs[r * c..(r + 1) * c];
                for (p, &v) in pr.iter_mut().zip(zr) {
                    *p = (v - zmax).exp() / denom;
                }
                if let (Some(out), Some(lab)) = (log_probs_true.as_mut(), labels) {
                    out.push(zr[lab[r]] - zmax - denom.ln());
                }
            }
            return ForwardPass { hidden, probs, log_probs_true };
        }

        for v in z.iter_mut() {
            *v = v.tanh();
        }
        act_dim = fan_out;
        act = z.clone();
        hidden.push(z);
    }
    unreachable!("layer_dims is never empty")
}

/// Class-probability matrix (row-major, n x C) for the given feature rows.
pub fn forward(params: &ModelParams, features: &[f64], n: usize) -> Result<Vec<f64>> {
    if features.len() != n * params.arch.input_dim {
        return Err(Error::InvalidInput(format!(
            "feature matrix has {} values, expected {} rows x {} cols",
            features.len(),
            n,
            params.arch.input_dim
        )));
    }
    Ok(forward_inner(params, features, n, None).probs)
}

/// Mean cross-entropy over the batch and its gradient w.r.t. every
/// parameter, via backpropagation.
pub fn loss_and_grad(params: &ModelParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let arch = &params.arch;
    if batch.input_dim != arch.input_dim {
        return Err(Error::InvalidInput(format!(
            "batch input_dim {} does not match architecture input_dim {}",
            batch.input_dim, arch.input_dim
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= arch.num_classes) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {} classes",
            arch.num_classes
        )));
    }

    let n = batch.len();
    let pass = forward_inner(params, &batch.features, n, Some(&batch.labels));
    let loss = -pass.log_probs_true.as_ref().unwrap().iter().sum::<f64>() / n as f64;

    let dims = arch.layer_dims();
    let c = arch.num_classes;
    let inv_n = 1.0 / n as f64;

    // delta at the softmax output: (p - onehot) / n
    let mut delta = pass.probs.clone();
    for r in 0..n {
        delta[r * c + batch.labels[r]] -= 1.0;
    }
    for v in delta.iter_mut() {
        *v *= inv_n;
    }

    let mut grad = vec![0.0f64; params.values.len()];
    let mut layer_offsets = Vec::with_capacity(dims.len());
    let mut off = 0usize;
    for &(fi, fo) in &dims {
        layer_offsets.push(off);
        off += fi * fo + fo;
    }

    for layer in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[layer];
        let offset = layer_offsets[layer];
        let input: &[f64] = if layer == 0 { &batch.features } else { &pass.hidden[layer - 1] };

        {
            let (gw, gb) =
                grad[offset..offset + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for r in 0..n {
                let x = &input[r * fan_in..(r + 1) * fan_in];
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                for (i, &xi) in x.iter().enumerate() {
                    let grow = &mut gw[i * fan_out..(i + 1) * fan_out];
                    for (g, &dj) in grow.iter_mut().zip(d) {
                        *g += xi * dj;
                    }
                }
                for (g, &dj) in gb.iter_mut().zip(d) {
                    *g += dj;
                }
            }
        }

        if layer > 0 {
            // delta_prev = (delta . W^T) * tanh'(a) with tanh' = 1 - a^2
            let w = &params.values[offset..offset + fan_in * fan_out];
            let mut prev = vec![0.0f64; n * fan_in];
            for r in 0..n {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                let a = &input[r * fan_in..(r + 1) * fan_in];
                let pr = &mut prev[r * fan_in..(r + 1) * fan_in];
                for i in 0..fan_in {
                    let wrow = &w[i * fan_out..(i + 1) * fan_out];
                    let mut s = 0.0;
                    for (dj, wij) in d.iter().zip(wrow) {
                        s += dj * wij;
                    }
                    pr[i] = s * (1.0 - a[i] * a[i]);
                }
            }
            delta = prev;
        }
    }

    Ok((loss, grad))
}

/// One plain SGD step: `out[i] = params[i] - eta * grad[i]`.
pub fn sgd_step(params: &ModelParams, grad: &[f64], eta: f64) -> Result<ModelParams> {
    if grad.len() != params.values.len() {
        return Err(Error::InvalidInput(format!(
            "gradient length {} does not match parameter length {}",
            grad.len(),
            params.values.len()
        )));
    }
    if eta <= 0.0 {
        return Err(Error::InvalidInput(format!("learning rate must be positive, got {eta}")));
    }
    if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient entry {bad}")));
    }
    let values = params.values.iter().zip(grad).map(|(p, g)| p - eta * g).collect();
    Ok(ModelParams { values, arch: params.arch.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(input: usize, hidden: Vec<usize>, classes: usize) -> Architecture {
        Architecture::new(input, hidden, classes).unwrap()
    }

    #[test]
    fn param_count_matches_shapes() {
        assert_eq!(arch(4, vec![], 3).param_count(), 4 * 3 + 3);
        assert_eq!(arch(2, vec![5], 3).param_count(), 2 * 5 + 5 + 5 * 3 + 3);
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let a = arch(4, vec![], 3);
        let p1 = init_params(&a, 7);
        let p2 = init_params(&a, 7);
        assert_eq!(p1, p2);
        assert_eq!(p1.values.len(), 15);
        // biases are the trailing 3 entries of the single layer
        assert!(p1.values[12..].iter().all(|&b| b == 0.0));
        assert!(p1.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let a = arch(4, vec![], 3);
        let p = ModelParams::new(vec![0.0; 15], a).unwrap();
        let probs = forward(&p, &[1.0, -2.0, 0.5, 3.0, 0.0, 0.0, 1.0, 1.0], 2).unwrap();
        for &v in &probs {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_rows_sum_to_one() {
        let a = arch(3, vec![4], 5);
        let p = init_params(&a, 11);
        let feats: Vec<f64> = (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let probs = forward(&p, &feats, 4).unwrap();
        for r in 0..4 {
            let s: f64 = probs[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(probs[r * 5..(r + 1) * 5].iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn stable_softmax_survives_huge_logits() {
        // softmax regression on 1 feature: logit_0 = 1000*x, others 0
        let a = arch(1, vec![], 3);
        let mut values = vec![0.0; 6];
        values[0] = 1000.0; // weight from the single input to class 0
        let p = ModelParams::new(values, a).unwrap();
        let probs = forward(&p, &[1.0], 1).unwrap();
        assert!(probs[0] >= 1.0 - 1e-9);
        assert!(probs.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_param_loss_is_ln_c() {
        let a = arch(4, vec![], 3);
        let p = ModelParams::new(vec![0.0; 15], a).unwrap();
        let batch = Batch::new(vec![0.3; 8], vec![0, 2], 4).unwrap();
        let (loss, grad) = loss_and_grad(&p, &batch).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-9);
        assert_eq!(grad.len(), 15);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let a = arch(2, vec![], 3);
        let p = init_params(&a, 0);
        let batch = Batch::new(vec![0.1, 0.2], vec![3], 2).unwrap();
        assert!(matches!(loss_and_grad(&p, &batch), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn duplicated_batch_has_identical_loss_and_grad() {
        let a = arch(3, vec![4], 2);
        let p = init_params(&a, 5);
        let feats = vec![0.5, -1.0, 2.0, 0.0, 1.0, -0.5];
        let labels = vec![1, 0];
        let batch = Batch::new(feats.clone(), labels.clone(), 3).unwrap();
        let doubled =
            Batch::new([feats.clone(), feats].concat(), [labels.clone(), labels].concat(), 3)
                .unwrap();
        let (l1, g1) = loss_and_grad(&p, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&p, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let a = arch(1, vec![], 2);
        let p = ModelParams::new(vec![1.0, 2.0, 0.0, 0.0], a).unwrap();
        let stepped = sgd_step(&p, &[0.5, -1.0, 0.0, 0.0], 0.1).unwrap();
        assert_eq!(stepped.values[0], 0.95);
        assert_eq!(stepped.values[1], 2.1);
    }

    #[test]
    fn sgd_step_zero_grad_is_fixed_point() {
        let a = arch(2, vec![], 2);
        let p = init_params(&a, 3);
        let stepped = sgd_step(&p, &[0.0; 6], 0.5).unwrap();
        assert_eq!(stepped, p);
    }

    #[test]
    fn sgd_steps_compose_linearly_for_fixed_grads() {
        let a = arch(1, vec![], 2);
        let p = ModelParams::new(vec![1.0, -1.0, 0.5, 0.0], a).unwrap();
        let g1 = [0.2, 0.1, -0.3, 0.4];
        let g2 = [-0.1, 0.5, 0.2, 0.0];
        let eta = 0.05;
        let two = sgd_step(&sgd_step(&p, &g1, eta).unwrap(), &g2, eta).unwrap();
        let summed: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let one = sgd_step(&p, &summed, eta).unwrap();
        for (a, b) in two.values.iter().zip(&one.values) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_rejects_non_finite_grad() {
        let a = arch(1, vec![], 2);
        let p = init_params(&a, 0);
        let r = sgd_step(&p, &[f64::NAN, 0.0, 0.0, 0.0], 0.1);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    /// Central finite differences, the independent oracle for the analytic
    /// gradient.
    fn fd_grad(params: &ModelParams, batch: &Batch, h: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(params.values.len());
        for i in 0..params.values.len() {
            let mut plus = params.clone();
            plus.values[i] += h;
            let mut minus = params.clone();
            minus.values[i] -= h;
            let (lp, _) = loss_and_grad(&plus, batch).unwrap();
            let (lm, _) = loss_and_grad(&minus, batch).unwrap();
            g.push((lp - lm) / (2.0 * h));
        }
        g
    }

    pub(crate) fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::Rng;
        for seed in 0..25u64 {
            let hidden = if seed % 2 == 0 { vec![] } else { vec![4] };
            let a = arch(3, hidden, 3);
            let p = init_params(&a, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
            let feats: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
            let batch = Batch::new(feats, labels, 3).unwrap();
            let (_, analytic) = loss_and_grad(&p, &batch).unwrap();
            let numeric = fd_grad(&p, &batch, 1e-6);
            let err = max_rel_error(&analytic, &numeric);
            assert!(err < 1e-5, "seed {seed}: max relative error {err}");
        }
    }
}
