//! Binary MLP classifier: ReLU hidden layers, one logistic output unit,
//! cross-entropy loss with L2 penalty, trained by Adam with early stopping.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::defaults;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub l2_penalty: f64,
    /// Mini-batch size is `min(max_batch, n_train)`.
    pub max_batch: usize,
    pub validation_fraction: f64,
    pub improvement_tolerance: f64,
}

impl MlpSpec {
    pub fn new(hidden_layers: &[usize], learning_rate: f64) -> Self {
        MlpSpec {
            hidden_layers: hidden_layers.to_vec(),
            learning_rate,
            max_epochs: defaults::MAX_EPOCHS,
            patience: defaults::PATIENCE,
            seed: defaults::SEED,
            l2_penalty: defaults::L2_PENALTY,
            max_batch: defaults::MAX_BATCH,
            validation_fraction: defaults::VALIDATION_FRACTION,
            improvement_tolerance: defaults::IMPROVEMENT_TOLERANCE,
        }
    }

    /// The default search grid, hidden layout in the outer loop.
    pub fn default_grid() -> Vec<MlpSpec> {
        defaults::HIDDEN_GRID
            .iter()
            .flat_map(|h| {
                defaults::LEARNING_RATE_GRID
                    .iter()
                    .map(move |&lr| MlpSpec::new(h, lr))
            })
            .collect()
    }

    /// Grid restricted to models without hidden layers.
    pub fn linear_grid() -> Vec<MlpSpec> {
        defaults::LEARNING_RATE_GRID
            .iter()
            .map(|&lr| MlpSpec::new(&[], lr))
            .collect()
    }

    pub fn label(&self) -> String {
        let h: Vec<String> = self.hidden_layers.iter().map(|w| w.to_string()).collect();
        format!("({}) lr={}", h.join(","), self.learning_rate)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if self.hidden_layers.contains(&0) {
            return Err(EstimatorError::Spec(
                "hidden widths must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(EstimatorError::Spec(
                "learning rate must be positive".into(),
            ));
        }
        if self.max_batch == 0 || self.max_epochs == 0 {
            return Err(EstimatorError::Spec(
                "batch size and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(EstimatorError::Spec(
                "validation fraction must be in [0, 1)".into(),
            ));
        }
        if self.l2_penalty.is_nan() || self.l2_penalty < 0.0 {
            return Err(EstimatorError::Spec(
                "L2 penalty must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Weight and bias gradients for one layer.
pub type LayerGrad = (Array2<f64>, Array1<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_in x fan_out`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_validation_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
    pub spec: MlpSpec,
    pub meta: TrainMeta,
}

fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl MlpModel {
    /// Randomly initialised network: weights and biases uniform on
    /// `+-sqrt(6 / (fan_in + fan_out))` per layer.
    pub fn init(input_dim: usize, spec: &MlpSpec, rng: &mut impl Rng) -> Self {
        let mut dims = vec![input_dim];
        dims.extend(&spec.hidden_layers);
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let weights =
                    Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-bound..bound));
                let bias = Array1::from_shape_simple_fn(w[1], || rng.random_range(-bound..bound));
                DenseLayer { weights, bias }
            })
            .collect();
        MlpModel {
            layers,
            spec: spec.clone(),
            meta: TrainMeta::default(),
        }
    }

    /// Builds a model from explicit layers, checking that shapes chain to one output.
    pub fn from_layers(layers: Vec<DenseLayer>, spec: MlpSpec) -> Result<Self, EstimatorError> {
        if layers.is_empty() {
            return Err(EstimatorError::Spec(
                "model needs at least one layer".into(),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.ncols() {
                return Err(EstimatorError::Spec(format!(
                    "layer {i}: bias length mismatch"
                )));
            }
            if i > 0 && layers[i - 1].weights.ncols() != l.weights.nrows() {
                return Err(EstimatorError::Spec(format!(
                    "layer {i}: input width mismatch"
                )));
            }
        }
        if layers.last().unwrap().weights.ncols() != 1 {
            return Err(EstimatorError::Spec(
                "last layer must have one output".into(),
            ));
        }
        Ok(MlpModel {
            layers,
            spec,
            meta: TrainMeta::default(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    /// Input to every layer, plus the output logits.
    fn forward(&self, x: ArrayView2<'_, f64>) -> (Vec<Array2<f64>>, Array1<f64>) {
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = current.dot(&layer.weights) + &layer.bias;
            if i == last {
                acts.push(current);
                return (acts, z.column(0).to_owned());
            }
            acts.push(current);
            current = z.mapv(|v| v.max(0.0));
        }
        unreachable!("model has at least one layer")
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>, EstimatorError> {
        if x.ncols() != self.input_dim() {
            return Err(EstimatorError::Dimension {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(self.forward(x).1)
    }

    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>, EstimatorError> {
        Ok(self.logits(x)?.iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn predict_proba_row(&self, row: &[f64]) -> Result<f64, EstimatorError> {
        let x = ArrayView2::from_shape((1, row.len()), row).expect("row shape");
        Ok(self.predict_proba(x)?[0])
    }

    /// Penalised cross-entropy and its gradient for one batch.
    pub fn loss_gradient(&self, x: ArrayView2<'_, f64>, y: &[f64]) -> (f64, Vec<LayerGrad>) {
        let n = x.nrows() as f64;
        let (inputs, z) = self.forward(x);
        let mut loss = z
            .iter()
            .zip(y)
            .map(|(&z, &t)| softplus(z) - t * z)
            .sum::<f64>()
            / n;
        let l2 = self.spec.l2_penalty;
        loss += 0.5 * l2 / n
            * self
                .layers
                .iter()
                .map(|l| l.weights.mapv(|w| w * w).sum())
                .sum::<f64>();

        let mut delta =
            Array2::from_shape_fn((z.len(), 1), |(i, _)| (sigmoid_raw(z[i]) - y[i]) / n);
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let a = &inputs[i];
            let gw = a.t().dot(&delta) + &(&layer.weights * (l2 / n));
            let gb = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&layer.weights.t());
                Zip::from(&mut back).and(a).for_each(|d, &act| {
                    if act <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        (loss, grads)
    }

    /// All weights and biases, layer by layer, weights row-major then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "parameter vector too long");
    }

    pub fn loss_gradient_flat(&self, x: ArrayView2<'_, f64>, y: &[f64]) -> (f64, Vec<f64>) {
        let (loss, grads) = self.loss_gradient(x, y);
        let flat = grads
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect();
        (loss, flat)
    }
}

// Unclamped logistic used by the gradient so it matches the loss exactly.
fn sigmoid_raw(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Adam {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    t: i32,
}

impl Adam {
    fn new(model: &MlpModel) -> Self {
        let zeros: Vec<_> = model
            .layers
            .iter()
            .map(|l| {
                (
                    Array2::zeros(l.weights.raw_dim()),
                    Array1::zeros(l.bias.len()),
                )
            })
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &[(Array2<f64>, Array1<f64>)], lr: f64) {
        let (b1, b2, eps) = (
            defaults::ADAM_BETA1,
            defaults::ADAM_BETA2,
            defaults::ADAM_EPSILON,
        );
        self.t += 1;
        let lr_t = lr * (1.0 - b2.powi(self.t)).sqrt() / (1.0 - b1.powi(self.t));
        for (i, (gw, gb)) in grads.iter().enumerate() {
            let layer = &mut model.layers[i];
            let (mw, mb) = &mut self.m[i];
            let (vw, vb) = &mut self.v[i];
            Zip::from(&mut layer.weights)
                .and(mw)
                .and(vw)
                .and(gw)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr_t * *m / (v.sqrt() + eps);
                });
            Zip::from(&mut layer.bias)
                .and(mb)
                .and(vb)
                .and(gb)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr_t * *m / (v.sqrt() + eps);
                });
        }
    }
}

fn gather(x: ArrayView2<'_, f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Stratified train/validation split. Returns `None` when either class has
/// fewer than two members or the fraction is zero.
fn validation_split(
    y: &[bool],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Option<Vec<usize>>) {
    let all: Vec<usize> = (0..y.len()).collect();
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &t) in y.iter().enumerate() {
        by_class[usize::from(t)].push(i);
    }
    if fraction <= 0.0 || by_class.iter().any(|c| c.len() < 2) {
        return (all, None);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in &mut by_class {
        class.shuffle(rng);
        let take = ((class.len() as f64 * fraction).round() as usize).clamp(1, class.len() - 1);
        val.extend_from_slice(&class[..take]);
        train.extend_from_slice(&class[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, Some(val))
}

/// Negative mean cross-entropy, so that higher is better.
fn validation_score(model: &MlpModel, x: ArrayView2<'_, f64>, y: &[bool]) -> f64 {
    let z = model.forward(x).1;
    let loss: f64 = z
        .iter()
        .zip(y)
        .map(|(&z, &t)| softplus(z) - if t { z } else { 0.0 })
        .sum();
    -loss / y.len() as f64
}

/// Trains a classifier on standardized features.
///
/// Stops after `max_epochs`, or once the validation score (negative
/// cross-entropy on a stratified held-out split) has failed to improve by
/// `improvement_tolerance` for `patience` consecutive epochs; the
/// best-scoring weights are then restored. Without a validation split the
/// training loss plays the same role.
pub fn train_mlp(
    x: ArrayView2<'_, f64>,
    y: &[bool],
    spec: &MlpSpec,
    seed: u64,
) -> Result<MlpModel, EstimatorError> {
    spec.validate()?;
    if x.nrows() != y.len() {
        return Err(EstimatorError::RowMismatch {
            rows: x.nrows(),
            labels: y.len(),
        });
    }
    let positives = y.iter().filter(|&&t| t).count();
    if positives == 0 || positives == y.len() {
        return Err(EstimatorError::SingleClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MlpModel::init(x.ncols(), spec, &mut rng);
    let (mut train_idx, val_idx) = validation_split(y, spec.validation_fraction, &mut rng);
    let val = val_idx.map(|idx| {
        let labels: Vec<bool> = idx.iter().map(|&i| y[i]).collect();
        (gather(x, &idx), labels)
    });
    let targets: Vec<f64> = y.iter().map(|&t| f64::from(u8::from(t))).collect();
    let batch = spec.max_batch.min(train_idx.len());
    let mut adam = Adam::new(&model);

    let mut best_score = f64::NEG_INFINITY;
    let mut best_layers = model.layers.clone();
    let mut stale = 0usize;
    let mut meta = TrainMeta::default();
    for epoch in 0..spec.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in train_idx.chunks(batch) {
            let xb = gather(x, chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grads) = model.loss_gradient(xb.view(), &yb);
            epoch_loss += loss * chunk.len() as f64;
            adam.step(&mut model, &grads, spec.learning_rate);
        }
        meta.epochs_run = epoch + 1;
        // Higher is better for both criteria.
        let score = match &val {
            Some((xv, yv)) => validation_score(&model, xv.view(), yv),
            None => -epoch_loss / train_idx.len() as f64,
        };
        if score > best_score + spec.improvement_tolerance {
            stale = 0;
        } else {
            stale += 1;
        }
        if score > best_score {
            best_score = score;
            best_layers.clone_from(&model.layers);
        }
        if stale >= spec.patience {
            meta.stopped_early = true;
            break;
        }
    }
    model.layers = best_layers;
    if val.is_some() {
        meta.best_validation_score = Some(best_score);
    }
    model.meta = meta;
    Ok(model)
}

/// Accuracy of thresholded probabilities (label 1 iff p >= 0.5).
pub fn proba_accuracy(proba: &[f64], y: &[bool]) -> f64 {
    let hits = proba
        .iter()
        .zip(y)
        .filter(|(&p, &t)| (p >= 0.5) == t)
        .count();
    hits as f64 / y.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    fn two_blobs(n: usize, d: usize, margin: f64, seed: u64) -> (Array2<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let y: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let x = Array2::from_shape_fn((n, d), |(i, j)| {
            let shift = if j == 0 {
                if y[i] {
                    margin / 2.0
                } else {
                    -margin / 2.0
                }
            } else {
                0.0
            };
            shift + noise.sample(&mut rng)
        });
        (x, y)
    }

    fn toy_net() -> MlpModel {
        let spec = MlpSpec::new(&[2], 1e-3);
        MlpModel::from_layers(
            vec![
                DenseLayer {
                    weights: array![[0.5, -1.0], [0.25, 2.0]],
                    bias: array![0.1, -0.2],
                },
                DenseLayer {
                    weights: array![[1.5], [-0.5]],
                    bias: array![0.3],
                },
            ],
            spec,
        )
        .unwrap()
    }

    #[test]
    fn forward_matches_hand_computation() {
        let net = toy_net();
        // h = relu([0.5*1 + 0.25*2 + 0.1, -1*1 + 2*2 - 0.2]) = [1.1, 2.8]
        // z = 1.5*1.1 - 0.5*2.8 + 0.3 = 0.55
        let p = net.predict_proba_row(&[1.0, 2.0]).unwrap();
        assert!((p - 1.0 / (1.0 + (-0.55f64).exp())).abs() < 1e-15);
        // Negative pre-activation is cut: h = relu([-0.9, ...]).
        // x = (-2, 0): h = [relu(-0.9), relu(1.8)] = [0, 1.8]; z = -0.9 + 0.3 = -0.6
        let p = net.predict_proba_row(&[-2.0, 0.0]).unwrap();
        assert!((p - 1.0 / (1.0 + 0.6f64.exp())).abs() < 1e-15);
        assert!(net.predict_proba_row(&[1.0]).is_err());
    }

    #[test]
    fn symmetric_net_gives_one_half() {
        let net = MlpModel::from_layers(
            vec![
                DenseLayer {
                    weights: array![[1.0, 1.0], [1.0, 1.0]],
                    bias: array![0.0, 0.0],
                },
                DenseLayer {
                    weights: array![[1.0], [-1.0]],
                    bias: array![0.0],
                },
            ],
            MlpSpec::new(&[2], 1e-3),
        )
        .unwrap();
        assert_eq!(net.predict_proba_row(&[0.3, -0.7]).unwrap(), 0.5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut spec = MlpSpec::new(&[2], 1e-3);
        spec.l2_penalty = 1e-2;
        let net = MlpModel::init(2, &spec, &mut rng);
        let x = Array2::from_shape_fn((100, 2), |_| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..100)
            .map(|_| f64::from(u8::from(rng.random_bool(0.5))))
            .collect();
        let (_, analytic) = net.loss_gradient_flat(x.view(), &y);
        let base = net.params_flat();
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(base.len());
        let mut probe = net.clone();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            probe.set_params_flat(&p);
            let up = probe.loss_gradient_flat(x.view(), &y).0;
            p[i] -= 2.0 * h;
            probe.set_params_flat(&p);
            let down = probe.loss_gradient_flat(x.view(), &y).0;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
            + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = two_blobs(500, 64, 6.0, 42);
        let model = train_mlp(x.view(), &y, &MlpSpec::new(&[128], 1e-3), 42).unwrap();
        let p = model.predict_proba(x.view()).unwrap();
        assert!(proba_accuracy(&p, &y) >= 0.99);
    }

    #[test]
    fn same_seed_same_weights() {
        let (x, y) = two_blobs(120, 8, 2.0, 5);
        let spec = MlpSpec::new(&[16], 1e-3);
        let a = train_mlp(x.view(), &y, &spec, 7).unwrap();
        let b = train_mlp(x.view(), &y, &spec, 7).unwrap();
        let bits = |m: &MlpModel| {
            m.params_flat()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.meta, b.meta);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Array2::zeros((4, 2));
        let err = train_mlp(x.view(), &[true; 4], &MlpSpec::new(&[], 1e-3), 0).unwrap_err();
        assert!(matches!(err, EstimatorError::SingleClass));
    }

    #[test]
    fn no_hidden_layer_matches_logistic_boundary() {
        // 1-d logistic data with true boundary at x = 0.5.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 2000;
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..4.0)).collect();
        let y: Vec<bool> = xs
            .iter()
            .map(|&v| rng.random_bool(1.0 / (1.0 + (-(2.0 * (v - 0.5))).exp())))
            .collect();
        let x = Array2::from_shape_vec((n, 1), xs.clone()).unwrap();

        // Reference: Newton's method on the unpenalised scalar logistic likelihood.
        let (mut a, mut b) = (0.0f64, 0.0f64);
        for _ in 0..50 {
            let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (&v, &t) in xs.iter().zip(&y) {
                let p = 1.0 / (1.0 + (-(a * v + b)).exp());
                let r = p - f64::from(u8::from(t));
                ga += r * v;
                gb += r;
                let w = p * (1.0 - p);
                haa += w * v * v;
                hab += w * v;
                hbb += w;
            }
            let det = haa * hbb - hab * hab;
            a -= (hbb * ga - hab * gb) / det;
            b -= (haa * gb - hab * ga) / det;
        }
        let reference = -b / a;

        let mut spec = MlpSpec::new(&[], 1e-2);
        spec.max_epochs = 300;
        spec.validation_fraction = 0.0;
        spec.improvement_tolerance = 1e-9;
        let model = train_mlp(x.view(), &y, &spec, 1).unwrap();
        let w = model.layers[0].weights[[0, 0]];
        let c = model.layers[0].bias[0];
        let boundary = -c / w;
        assert!(
            (boundary - reference).abs() < 1e-2,
            "{boundary} vs {reference}"
        );
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(&[0], 1e-3).validate().is_err());
        assert!(MlpSpec::new(&[4], 0.0).validate().is_err());
        assert_eq!(MlpSpec::default_grid().len(), 10);
        assert_eq!(MlpSpec::default_grid()[1].label(), "() lr=0.0001");
    }
}
