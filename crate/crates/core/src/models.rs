//! Softmax classifiers with hand-written backprop over a flat parameter vector.
//!
//! Layout (weights row-major, one row per output unit, then the bias):
//!
//! * `Mlr`:  `W[classes x input]`, `b[classes]`
//! * `Mlp2`: `W1[hidden x input]`, `b1[hidden]`, `W2[classes x hidden]`, `b2[classes]`
//!
//! Every strategy works on [`ParamVector`] and never looks at this layout.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlr,
    Mlp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn mlr(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlr,
            input_dim,
            hidden_dim: 0,
            num_classes,
        }
    }

    pub fn mlp2(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp2,
            input_dim,
            hidden_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        match self.kind {
            ModelKind::Mlr if self.hidden_dim != 0 => {
                Err(Error::invalid("hidden_dim must be 0 for an MLR model"))
            }
            ModelKind::Mlp2 if self.hidden_dim == 0 => {
                Err(Error::invalid("hidden_dim must be positive for an MLP2 model"))
            }
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        match self.kind {
            ModelKind::Mlr => d * c + c,
            ModelKind::Mlp2 => d * h + h + h * c + c,
        }
    }
}

/// Model parameters, flattened in the layout documented at module level.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    spec: ModelSpec,
}

impl ParamVector {
    pub fn new(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                expected: spec.param_count(),
                got: values.len(),
                context: "parameter vector length",
            });
        }
        let p = Self { values, spec };
        p.check_finite()?;
        Ok(p)
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            spec,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn check_same_shape(&self, other: &ParamVector) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: other.len(),
                context: "parameter vectors with different model specs",
            });
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn dist_sq(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Examples as rows plus integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                got: labels.len(),
                context: "label count vs input rows",
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn label_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &l in &self.labels {
            if l < num_classes {
                h[l] += 1;
            }
        }
        h
    }

    fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if self.input_dim() != spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: spec.input_dim,
                got: self.input_dim(),
                context: "batch input dimension",
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= spec.num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                spec.num_classes
            )));
        }
        Ok(())
    }
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
pub fn init_params<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<ParamVector> {
    spec.validate()?;
    let mut values = Vec::with_capacity(spec.param_count());
    let mut layer = |fan_out: usize, fan_in: usize, values: &mut Vec<f64>| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        values.extend((0..fan_out * fan_in).map(|_| rng.random_range(-bound..bound)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    };
    match spec.kind {
        ModelKind::Mlr => layer(spec.num_classes, spec.input_dim, &mut values),
        ModelKind::Mlp2 => {
            layer(spec.hidden_dim, spec.input_dim, &mut values);
            layer(spec.num_classes, spec.hidden_dim, &mut values);
        }
    }
    Ok(ParamVector {
        values,
        spec: *spec,
    })
}

struct Layer<'a> {
    weight: ArrayView2<'a, f64>,
    bias: ArrayView1<'a, f64>,
}

/// Offsets of (weight, bias) blocks for each layer.
fn layer_shapes(spec: &ModelSpec) -> Vec<(usize, usize)> {
    match spec.kind {
        ModelKind::Mlr => vec![(spec.num_classes, spec.input_dim)],
        ModelKind::Mlp2 => vec![
            (spec.hidden_dim, spec.input_dim),
            (spec.num_classes, spec.hidden_dim),
        ],
    }
}

fn layers<'a>(spec: &ModelSpec, p: &'a [f64]) -> Vec<Layer<'a>> {
    let mut out = Vec::new();
    let mut at = 0;
    for (o, i) in layer_shapes(spec) {
        let weight = ArrayView2::from_shape((o, i), &p[at..at + o * i]).expect("layout");
        at += o * i;
        let bias = ArrayView1::from(&p[at..at + o]);
        at += o;
        out.push(Layer { weight, bias });
    }
    out
}

fn affine(x: &ArrayView2<f64>, layer: &Layer) -> Array2<f64> {
    // explicit row-major output: `dot` may pick column-major for thin inputs
    let mut z = Array2::zeros((x.nrows(), layer.weight.nrows()));
    general_mat_mul(1.0, x, &layer.weight.t(), 0.0, &mut z);
    z += &layer.bias;
    z
}

/// Row-wise log-sum-exp and per-row cross-entropy; turns `logits` into softmax probabilities.
fn softmax_xent_in_place(logits: &mut Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (mut row, &y) in logits.rows_mut().into_iter().zip(labels) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
        row.mapv_inplace(|z| (z - lse).exp());
    }
    total / labels.len() as f64
}

fn forward_logits(spec: &ModelSpec, p: &[f64], x: &ArrayView2<f64>) -> Array2<f64> {
    let ls = layers(spec, p);
    match spec.kind {
        ModelKind::Mlr => affine(x, &ls[0]),
        ModelKind::Mlp2 => {
            let mut h = affine(x, &ls[0]);
            h.mapv_inplace(|v| v.max(0.0));
            affine(&h.view(), &ls[1])
        }
    }
}

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    let spec = params.spec;
    batch.check_against(&spec)?;
    let n = batch.len() as f64;
    let x = batch.inputs.view();
    let p = params.values();
    let mut grad = vec![0.0; p.len()];

    let loss = match spec.kind {
        ModelKind::Mlr => {
            let ls = layers(&spec, p);
            let mut probs = affine(&x, &ls[0]);
            let loss = softmax_xent_in_place(&mut probs, &batch.labels);
            let delta = output_delta(probs, &batch.labels, n);
            write_layer_grad(&mut grad, 0, &delta.view(), &x);
            loss
        }
        ModelKind::Mlp2 => {
            let ls = layers(&spec, p);
            let pre = affine(&x, &ls[0]);
            let hidden = pre.mapv(|v| v.max(0.0));
            let mut probs = affine(&hidden.view(), &ls[1]);
            let loss = softmax_xent_in_place(&mut probs, &batch.labels);
            let delta2 = output_delta(probs, &batch.labels, n);
            let (h, d) = (spec.hidden_dim, spec.input_dim);
            let second = h * d + h;
            write_layer_grad(&mut grad, second, &delta2.view(), &hidden.view());
            // back through W2 and the ReLU (subgradient 0 at 0)
            let mut delta1 = delta2.dot(&ls[1].weight);
            ndarray::Zip::from(&mut delta1)
                .and(&pre)
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            write_layer_grad(&mut grad, 0, &delta1.view(), &x);
            loss
        }
    };
    Ok((loss, ParamVector { values: grad, spec }))
}

fn output_delta(mut probs: Array2<f64>, labels: &[usize], n: f64) -> Array2<f64> {
    for (i, &y) in labels.iter().enumerate() {
        probs[[i, y]] -= 1.0;
    }
    probs.mapv_inplace(|v| v / n);
    probs
}

/// Writes `delta^T * input` and the column sums of `delta` into the layer block at `offset`.
fn write_layer_grad(
    grad: &mut [f64],
    offset: usize,
    delta: &ArrayView2<f64>,
    input: &ArrayView2<f64>,
) {
    let (o, i) = (delta.ncols(), input.ncols());
    {
        let mut gw =
            ArrayViewMut2::from_shape((o, i), &mut grad[offset..offset + o * i]).expect("layout");
        general_mat_mul(1.0, &delta.t(), input, 0.0, &mut gw);
    }
    let gb = delta.sum_axis(Axis(0));
    grad[offset + o * i..offset + o * i + o].copy_from_slice(gb.as_slice().expect("contiguous"));
}

/// Accuracy (argmax, ties to the lowest class index) and mean cross-entropy.
pub fn evaluate(params: &ParamVector, data: &Batch) -> Result<(f64, f64)> {
    let spec = params.spec;
    data.check_against(&spec)?;
    let mut logits = forward_logits(&spec, params.values(), &data.inputs.view());
    let mut correct = 0usize;
    for (row, &y) in logits.rows().into_iter().zip(&data.labels) {
        if argmax(&row.to_vec()) == y {
            correct += 1;
        }
    }
    let loss = softmax_xent_in_place(&mut logits, &data.labels);
    Ok((correct as f64 / data.len() as f64, loss))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Index range of the output-layer bias inside the flat layout.
pub fn output_bias_range(spec: &ModelSpec) -> std::ops::Range<usize> {
    let n = spec.param_count();
    n - spec.num_classes..n
}

/// View of the first layer's weight block, used by tests and reporting.
pub fn first_layer_weights<'a>(params: &'a ParamVector) -> ArrayView2<'a, f64> {
    let (o, i) = layer_shapes(&params.spec)[0];
    ArrayView2::from_shape((o, i), &params.values[..o * i])
        .expect("layout")
        .slice_move(s![.., ..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize) -> Batch {
        let inputs = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
        Batch::new(inputs, labels).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, spec: ModelSpec) -> ParamVector {
        let v = (0..spec.param_count())
            .map(|_| rng.random_range(-0.8..0.8))
            .collect();
        ParamVector::new(spec, v).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelSpec::mlr(4, 3).param_count(), 15);
        assert_eq!(ModelSpec::mlp2(784, 100, 10).param_count(), 79_510);
        assert_eq!(ModelSpec::mlr(60, 10).param_count(), 610);
    }

    #[test]
    fn init_layout_and_determinism() {
        let spec = ModelSpec::mlr(4, 3);
        let a = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert!(a.values()[12..].iter().all(|&v| v == 0.0));
        assert!(a.values()[..12].iter().all(|&v| v.abs() <= 0.5));

        let big = ModelSpec::mlp2(784, 100, 10);
        let p = init_params(&big, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.len(), 79_510);
    }

    #[test]
    fn zero_params_give_log_c_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in [2usize, 3, 10] {
            let spec = ModelSpec::mlr(5, c);
            let batch = random_batch(&mut rng, 7, 5, c);
            let (loss, _) = loss_and_grad(&ParamVector::zeros(spec), &batch).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
            let (_, mean_loss) = evaluate(&ParamVector::zeros(spec), &batch).unwrap();
            assert!((mean_loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_break_to_class_zero() {
        let spec = ModelSpec::mlr(2, 2);
        let batch = Batch::new(
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 2.0]],
            vec![0, 1, 0, 1],
        )
        .unwrap();
        let (acc, _) = evaluate(&ParamVector::zeros(spec), &batch).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn separable_toy_set_is_perfectly_classified() {
        // class = sign of the first coordinate; W rows (-1,0),(1,0)
        let spec = ModelSpec::mlr(2, 2);
        let batch = Batch::new(
            array![[1.0, 0.3], [2.0, -1.0], [-1.0, 0.5], [-0.5, -2.0]],
            vec![1, 1, 0, 0],
        )
        .unwrap();
        let p = ParamVector::new(spec, vec![-1.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(evaluate(&p, &batch).unwrap().0, 1.0);
    }

    #[test]
    fn duplicating_batch_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ModelSpec::mlp2(4, 6, 3);
        let p = random_params(&mut rng, spec);
        let b = random_batch(&mut rng, 5, 4, 3);
        let idx: Vec<usize> = (0..5).chain(0..5).collect();
        let doubled = b.select(&idx);
        let (l1, g1) = loss_and_grad(&p, &b).unwrap();
        let (l2, g2) = loss_and_grad(&p, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn output_bias_shift_leaves_predictions_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in [ModelSpec::mlr(4, 3), ModelSpec::mlp2(4, 5, 3)] {
            let p = random_params(&mut rng, spec);
            let b = random_batch(&mut rng, 9, 4, 3);
            let mut q = p.clone();
            for i in output_bias_range(&spec) {
                q.values_mut()[i] += 2.5;
            }
            let (acc1, loss1) = evaluate(&p, &b).unwrap();
            let (acc2, loss2) = evaluate(&q, &b).unwrap();
            assert_eq!(acc1, acc2);
            assert!((loss1 - loss2).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_and_grad_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ModelSpec::mlp2(3, 4, 2);
        let p = random_params(&mut rng, spec);
        let b = random_batch(&mut rng, 6, 3, 2);
        let (l1, g1) = loss_and_grad(&p, &b).unwrap();
        let (l2, g2) = loss_and_grad(&p, &b).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn dimension_errors() {
        let spec = ModelSpec::mlr(3, 2);
        let b = Batch::new(Array2::zeros((2, 4)), vec![0, 1]).unwrap();
        assert!(loss_and_grad(&ParamVector::zeros(spec), &b).is_err());
        let bad_label = Batch::new(Array2::zeros((1, 3)), vec![5]).unwrap();
        assert!(evaluate(&ParamVector::zeros(spec), &bad_label).is_err());
        assert!(Batch::new(Array2::zeros((2, 3)), vec![0]).is_err());
        assert!(ParamVector::new(spec, vec![0.0; 3]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::mlr(3, 1).validate().is_err());
        assert!(ModelSpec::mlp2(3, 0, 2).validate().is_err());
        assert!(ModelSpec::mlr(0, 2).validate().is_err());
        assert!(ModelSpec::mlp2(3, 4, 2).validate().is_ok());
    }
}
