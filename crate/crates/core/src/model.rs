//! Dense ReLU classifier with a softmax cross-entropy head.
//!
//! Parameters live in one flat vector. Each layer stores its weight matrix
//! (`fan_out x fan_in`, row-major) followed by its bias vector. An empty
//! `hidden_dims` gives multinomial logistic regression.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub n_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

/// Shape of one dense layer and where it sits in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl Layer {
    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.fan_in * self.fan_out]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.fan_in * self.fan_out;
        &params[start..start + self.fan_out]
    }

    fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, n_classes: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            n_classes,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn logistic(input_dim: usize, n_classes: usize) -> Result<Self> {
        Self::new(input_dim, Vec::new(), n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(invalid("input_dim must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(invalid("hidden layer widths must be positive"));
        }
        if self.n_classes < 2 {
            return Err(invalid("n_classes must be at least 2"));
        }
        Ok(())
    }

    /// Widths from input to output: `[input, hidden.., n_classes]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.n_classes);
        dims
    }

    pub fn layers(&self) -> Vec<Layer> {
        let dims = self.layer_dims();
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += layer.len();
                layer
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(Layer::len).sum()
    }
}

macro_rules! flat_vector {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn zeros(len: usize) -> Self {
                Self(vec![0.0; len])
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn norm(&self) -> f64 {
                self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(values: Vec<f64>) -> Self {
                Self(values)
            }
        }

        impl std::ops::Index<usize> for $name {
            type Output = f64;

            fn index(&self, i: usize) -> &f64 {
                &self.0[i]
            }
        }
    };
}

flat_vector!(ParameterVector);
flat_vector!(GradientVector);

impl ParameterVector {
    /// Builds a parameter vector, rejecting non-finite entries.
    pub fn try_from_vec(values: Vec<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Self(values))
        } else {
            Err(Error::NonFinite("parameter construction".into()))
        }
    }

    pub fn distance(&self, other: &ParameterVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl GradientVector {
    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }
}

/// A borrowed view of `n` labelled rows.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    features: &'a [f64],
    labels: &'a [usize],
    dim: usize,
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], labels: &'a [usize], dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(invalid("batch must contain at least one sample"));
        }
        check_len(labels.len() * dim, features.len())?;
        Ok(Self {
            features,
            labels,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }
}

fn check_inputs(params: &ParameterVector, spec: &ModelSpec, batch: &Batch<'_>) -> Result<()> {
    check_len(spec.parameter_count(), params.len())?;
    check_len(spec.input_dim, batch.dim())?;
    if let Some(&bad) = batch.labels().iter().find(|&&y| y >= spec.n_classes) {
        return Err(invalid(format!(
            "label {bad} out of range for {} classes",
            spec.n_classes
        )));
    }
    Ok(())
}

/// Per-sample activations kept for backpropagation.
struct Trace {
    /// Layer inputs: `inputs[0]` is the sample, `inputs[l]` the post-ReLU output of layer `l - 1`.
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl Trace {
    fn new(layers: &[Layer]) -> Self {
        Self {
            inputs: layers.iter().map(|l| vec![0.0; l.fan_in]).collect(),
            logits: vec![0.0; layers.last().map_or(0, |l| l.fan_out)],
        }
    }
}

fn forward_sample(params: &[f64], layers: &[Layer], x: &[f64], trace: &mut Trace) {
    trace.inputs[0].copy_from_slice(x);
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let w = layer.weights(params);
        let b = layer.bias(params);
        let (head, tail) = trace.inputs.split_at_mut(l + 1);
        let input = &head[l];
        let out: &mut [f64] = if l == last {
            &mut trace.logits
        } else {
            &mut tail[0]
        };
        for (o, out_o) in out.iter_mut().enumerate() {
            let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
            let z = b[o] + row.iter().zip(input).map(|(a, v)| a * v).sum::<f64>();
            *out_o = if l == last { z } else { z.max(0.0) };
        }
    }
}

/// Returns `log(sum(exp(z)))` computed stably.
fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Deterministic initialization: weights ~ N(0, 1) / sqrt(fan_in), biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = rng_from_seed(seed);
    let mut values = vec![0.0; spec.parameter_count()];
    for layer in spec.layers() {
        let scale = 1.0 / (layer.fan_in as f64).sqrt();
        let n_weights = layer.fan_in * layer.fan_out;
        for v in &mut values[layer.offset..layer.offset + n_weights] {
            let draw: f64 = rng.sample(StandardNormal);
            *v = draw * scale;
        }
    }
    ParameterVector(values)
}

/// Mean cross-entropy over the batch. Cheaper than [`forward_loss`] when the
/// probabilities are not needed.
pub fn loss(params: &ParameterVector, spec: &ModelSpec, batch: &Batch<'_>) -> Result<f64> {
    check_inputs(params, spec, batch)?;
    let layers = spec.layers();
    let mut trace = Trace::new(&layers);
    let mut mean = 0.0;
    for i in 0..batch.len() {
        forward_sample(params.as_slice(), &layers, batch.row(i), &mut trace);
        let sample = log_sum_exp(&trace.logits) - trace.logits[batch.label(i)];
        mean += (sample - mean) / (i + 1) as f64;
    }
    Ok(mean)
}

/// Mean cross-entropy and the `n x n_classes` row-major class probabilities.
pub fn forward_loss(
    params: &ParameterVector,
    spec: &ModelSpec,
    batch: &Batch<'_>,
) -> Result<(f64, Vec<f64>)> {
    check_inputs(params, spec, batch)?;
    let layers = spec.layers();
    let c = spec.n_classes;
    let mut trace = Trace::new(&layers);
    let mut probs = vec![0.0; batch.len() * c];
    let mut mean = 0.0;
    for i in 0..batch.len() {
        forward_sample(params.as_slice(), &layers, batch.row(i), &mut trace);
        softmax_into(&trace.logits, &mut probs[i * c..(i + 1) * c]);
        let sample = log_sum_exp(&trace.logits) - trace.logits[batch.label(i)];
        mean += (sample - mean) / (i + 1) as f64;
    }
    Ok((mean, probs))
}

/// Mean loss together with its exact gradient.
pub fn loss_and_gradient(
    params: &ParameterVector,
    spec: &ModelSpec,
    batch: &Batch<'_>,
) -> Result<(f64, GradientVector)> {
    check_inputs(params, spec, batch)?;
    let layers = spec.layers();
    let p = params.as_slice();
    let mut grad = vec![0.0; params.len()];
    let mut trace = Trace::new(&layers);
    // delta buffers: deltas[l] is dLoss/dz for layer l
    let mut deltas: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.fan_out]).collect();
    let mut mean = 0.0;

    for i in 0..batch.len() {
        forward_sample(p, &layers, batch.row(i), &mut trace);
        let y = batch.label(i);
        let sample = log_sum_exp(&trace.logits) - trace.logits[y];
        mean += (sample - mean) / (i + 1) as f64;

        let last = layers.len() - 1;
        softmax_into(&trace.logits, &mut deltas[last]);
        deltas[last][y] -= 1.0;

        for l in (0..layers.len()).rev() {
            let layer = layers[l];
            let input = &trace.inputs[l];
            let delta = &deltas[l];
            let w_start = layer.offset;
            let b_start = layer.offset + layer.fan_in * layer.fan_out;
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[w_start + o * layer.fan_in..w_start + (o + 1) * layer.fan_in];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[b_start + o] += d;
            }
            if l > 0 {
                let w = layer.weights(p);
                let (lower, upper) = deltas.split_at_mut(l);
                let prev = &mut lower[l - 1];
                let delta = &upper[0];
                for (k, prev_k) in prev.iter_mut().enumerate() {
                    // ReLU derivative, taken as zero at the kink
                    if input[k] > 0.0 {
                        *prev_k = delta
                            .iter()
                            .enumerate()
                            .map(|(o, d)| d * w[o * layer.fan_in + k])
                            .sum();
                    } else {
                        *prev_k = 0.0;
                    }
                }
            }
        }
    }

    let inv_n = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv_n);
    Ok((mean, GradientVector(grad)))
}

pub fn gradient(
    params: &ParameterVector,
    spec: &ModelSpec,
    batch: &Batch<'_>,
) -> Result<GradientVector> {
    loss_and_gradient(params, spec, batch).map(|(_, g)| g)
}

/// `params - lr * grad`.
pub fn sgd_step(
    params: &ParameterVector,
    grad: &GradientVector,
    lr: f64,
) -> Result<ParameterVector> {
    check_len(params.len(), grad.len())?;
    if lr == 0.0 {
        return Ok(params.clone());
    }
    Ok(ParameterVector(
        params
            .as_slice()
            .iter()
            .zip(grad.as_slice())
            .map(|(p, g)| p - lr * g)
            .collect(),
    ))
}

/// Index of the largest logit; ties resolve to the lowest class index.
pub fn predict(
    params: &ParameterVector,
    spec: &ModelSpec,
    batch: &Batch<'_>,
) -> Result<Vec<usize>> {
    check_inputs(params, spec, batch)?;
    let layers = spec.layers();
    let mut trace = Trace::new(&layers);
    Ok((0..batch.len())
        .map(|i| {
            forward_sample(params.as_slice(), &layers, batch.row(i), &mut trace);
            let mut best = 0;
            for (c, &z) in trace.logits.iter().enumerate().skip(1) {
                if z > trace.logits[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

pub fn accuracy(params: &ParameterVector, spec: &ModelSpec, batch: &Batch<'_>) -> Result<f64> {
    let predictions = predict(params, spec, batch)?;
    let correct = predictions
        .iter()
        .zip(batch.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_batch() -> (Vec<f64>, Vec<usize>) {
        (vec![0.5, -1.0, 2.0, 0.25, -0.3, 0.8], vec![0, 2, 1])
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelSpec::logistic(4, 3).unwrap().parameter_count(), 15);
        assert_eq!(ModelSpec::new(2, vec![3], 2).unwrap().parameter_count(), 17);
        assert_eq!(
            init_params(&ModelSpec::logistic(4, 3).unwrap(), 1).len(),
            15
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ModelSpec::new(0, vec![], 2).is_err());
        assert!(ModelSpec::new(2, vec![0], 2).is_err());
        assert!(ModelSpec::new(2, vec![], 1).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = ModelSpec::new(3, vec![4], 2).unwrap();
        let a = init_params(&spec, 9);
        assert_eq!(a, init_params(&spec, 9));
        assert_ne!(a, init_params(&spec, 10));
        for layer in spec.layers() {
            assert!(layer.bias(a.as_slice()).iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_params_give_log_c() {
        let spec = ModelSpec::new(2, vec![3], 3).unwrap();
        let (x, y) = toy_batch();
        let batch = Batch::new(&x, &y, 2).unwrap();
        let params = ParameterVector::zeros(spec.parameter_count());
        let (l, probs) = forward_loss(&params, &spec, &batch).unwrap();
        assert_eq!(l, 3f64.ln());
        assert!(probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_sample_hand_value() {
        // identity weights so logits equal the input (1, 0)
        let spec = ModelSpec::logistic(2, 2).unwrap();
        let params = ParameterVector::from(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let x = [1.0, 0.0];
        let batch = Batch::new(&x, &[0], 2).unwrap();
        let l = loss(&params, &spec, &batch).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_prediction_has_tiny_loss_and_gradient() {
        let spec = ModelSpec::logistic(1, 3).unwrap();
        // bias gives class 1 a +1000 lead
        let params = ParameterVector::from(vec![0.0, 0.0, 0.0, 0.0, 1e3, 0.0]);
        let x = [0.7, -0.2];
        let batch = Batch::new(&x, &[1, 1], 1).unwrap();
        let (l, g) = loss_and_gradient(&params, &spec, &batch).unwrap();
        assert!(l < 1e-6);
        assert!(g.norm() < 1e-6);
        assert_eq!(accuracy(&params, &spec, &batch).unwrap(), 1.0);
    }

    #[test]
    fn probabilities_rows_sum_to_one() {
        let spec = ModelSpec::new(2, vec![5], 3).unwrap();
        let params = init_params(&spec, 3);
        let (x, y) = toy_batch();
        let (_, probs) = forward_loss(&params, &spec, &Batch::new(&x, &y, 2).unwrap()).unwrap();
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_batch_gives_same_gradient() {
        let spec = ModelSpec::new(2, vec![4], 3).unwrap();
        let params = init_params(&spec, 5);
        let (x, y) = toy_batch();
        let mut x2 = Vec::new();
        let mut y2 = Vec::new();
        for i in 0..y.len() {
            for _ in 0..2 {
                x2.extend_from_slice(&x[i * 2..i * 2 + 2]);
                y2.push(y[i]);
            }
        }
        let g1 = gradient(&params, &spec, &Batch::new(&x, &y, 2).unwrap()).unwrap();
        let g2 = gradient(&params, &spec, &Batch::new(&x2, &y2, 2).unwrap()).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn sgd_step_cases() {
        let p = ParameterVector::from(vec![1.0, -2.5]);
        let g = GradientVector::from(vec![2.0, 0.5]);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        assert_eq!(sgd_step(&p, &GradientVector::zeros(2), 0.3).unwrap(), p);
        let single = sgd_step(
            &ParameterVector::from(vec![1.0]),
            &GradientVector::from(vec![2.0]),
            0.1,
        )
        .unwrap();
        assert!((single[0] - 0.8).abs() < 1e-15);
        assert!(sgd_step(&p, &GradientVector::zeros(3), 0.1).is_err());
    }

    #[test]
    fn accuracy_counts_and_ties() {
        let spec = ModelSpec::logistic(1, 2).unwrap();
        let zeros = ParameterVector::zeros(4);
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(
            accuracy(&zeros, &spec, &Batch::new(&x, &[0, 0, 0, 0], 1).unwrap()).unwrap(),
            1.0
        );
        // logit_1 = x, logit_0 = 0: predicts class 1 for every positive x
        let params = ParameterVector::from(vec![0.0, 1.0, 0.0, 0.0]);
        let acc = accuracy(&params, &spec, &Batch::new(&x, &[1, 1, 1, 0], 1).unwrap()).unwrap();
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn dimension_mismatches_are_errors() {
        let spec = ModelSpec::logistic(2, 2).unwrap();
        let x = [1.0, 2.0];
        let batch = Batch::new(&x, &[0], 2).unwrap();
        assert!(loss(&ParameterVector::zeros(5), &spec, &batch).is_err());
        assert!(Batch::new(&x, &[0, 1], 2).is_err());
        assert!(Batch::new(&[], &[], 2).is_err());
        assert!(loss(
            &ParameterVector::zeros(6),
            &spec,
            &Batch::new(&x, &[2], 2).unwrap()
        )
        .is_err());
        let wide = ModelSpec::logistic(1, 2).unwrap();
        assert!(loss(&ParameterVector::zeros(4), &wide, &batch).is_err());
    }
}
