//! Soft-signature compatibility scorer: a feedforward network over paired
//! callsite/callee feature encodings, trained with binary cross-entropy on
//! direct-call examples and applied to indirect-call candidates.
//!
//! Everything here is deterministic: weight initialization, the
//! train/validation split, per-epoch shuffling, and dropout masks all come
//! from one seeded stream, so training the same data with the same seeds is
//! bit-identical. Inference uses batch-norm running statistics and no
//! dropout.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{TrainingPair, ENCODED_DIM};

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Layer widths of the default network, input to output.
pub const DEFAULT_DIMS: [usize; 6] = [ENCODED_DIM, 1024, 512, 256, 128, 1];
/// Dropout rates of the default network, one per hidden layer.
pub const DEFAULT_DROPOUT: [f64; 4] = [0.4, 0.4, 0.3, 0.2];

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MAGIC: &[u8; 8] = b"ICFGSCR1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ScorerError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("need at least two examples to split off validation data, got {0}")]
    InsufficientData(usize),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bad network shape: {0}")]
    BadShape(String),
    #[error("bad model file: {0}")]
    BadFormat(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// Per-feature affine normalization fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// The do-nothing standardizer (zero mean, unit scale).
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fit population moments: mean and the biased (divide-by-n) standard
    /// deviation per column. Zero-variance columns get scale 1 so constant
    /// features pass through centered instead of dividing by zero.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, ScorerError> {
        let n = rows.len();
        if n == 0 {
            return Err(ScorerError::EmptyTrainingSet);
        }
        let d = rows[0].len();
        for row in rows {
            if row.len() != d {
                return Err(ScorerError::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
        }
        let mut mean = vec![0.0; d];
        for row in rows {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for row in rows {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|&s| {
                let sd = (s / n as f64).sqrt();
                if sd == 0.0 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    /// Normalize one row.
    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>, ScorerError> {
        if row.len() != self.mean.len() {
            return Err(ScorerError::DimensionMismatch {
                expected: self.mean.len(),
                got: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&v, &m), &s)| (v - m) / s)
            .collect())
    }
}

#[derive(Debug, Clone)]
struct Linear {
    /// Weights, `out × in`.
    w: Array2<f64>,
    b: Array1<f64>,
}

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
    run_mean: Array1<f64>,
    run_var: Array1<f64>,
}

#[derive(Debug, Clone)]
struct HiddenLayer {
    lin: Linear,
    bn: BatchNorm,
}

/// Everything the backward pass needs about one hidden layer's forward.
struct LayerCache {
    /// Input to the linear map.
    x: Array2<f64>,
    /// `sqrt(var + eps)` actually used to normalize.
    s: Array1<f64>,
    xhat: Array2<f64>,
    /// Batch-norm output, which is the rectifier input.
    act_in: Array2<f64>,
    /// Inverted dropout factors (0 or `1/(1-p)`); `None` in inference.
    mask: Option<Array2<f64>>,
    /// Whether normalization used batch statistics (training) or running
    /// statistics (inference); the backward pass differs.
    batch_stats: bool,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    out_in: Array2<f64>,
    logits: Array1<f64>,
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop after this many epochs without a strict validation-loss
    /// improvement; the best snapshot is restored.
    pub early_stop_patience: usize,
    /// Halve the learning rate after this many epochs without improvement.
    pub lr_halve_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            max_epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            early_stop_patience: 8,
            lr_halve_patience: 4,
        }
    }
}

/// What a training run did.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_val_loss: f64,
    pub final_learning_rate: f64,
    pub train_size: usize,
    pub val_size: usize,
}

/// The scorer: standardizer plus network weights and normalization state.
#[derive(Debug, Clone)]
pub struct ScorerModel {
    dims: Vec<usize>,
    dropout: Vec<f64>,
    seed: u64,
    standardizer: Standardizer,
    hidden: Vec<HiddenLayer>,
    out: Linear,
}

/// One draw from the standard normal via Box-Muller.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1], keeps the log finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy straight from the logit.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl ScorerModel {
    /// The default architecture over paired feature encodings.
    pub fn new(seed: u64) -> Self {
        Self::with_dims(&DEFAULT_DIMS, &DEFAULT_DROPOUT, seed)
            .expect("default architecture is well formed")
    }

    /// A network with explicit layer widths (`dims[0]` inputs through a
    /// single output) and one dropout rate per hidden layer. Weights are
    /// He-normal in the fan-in, biases zero, batch-norm at identity.
    pub fn with_dims(dims: &[usize], dropout: &[f64], seed: u64) -> Result<Self, ScorerError> {
        if dims.len() < 2 {
            return Err(ScorerError::BadShape(
                "need at least an input and an output layer".into(),
            ));
        }
        if *dims.last().unwrap() != 1 {
            return Err(ScorerError::BadShape("output layer must have width 1".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(ScorerError::BadShape("zero-width layer".into()));
        }
        if dropout.len() != dims.len() - 2 {
            return Err(ScorerError::BadShape(format!(
                "expected {} dropout rates, got {}",
                dims.len() - 2,
                dropout.len()
            )));
        }
        if dropout.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            return Err(ScorerError::BadShape("dropout rates must be in [0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init_linear = |fan_in: usize, fan_out: usize| {
            let sigma = (2.0 / fan_in as f64).sqrt();
            let mut vals = Vec::with_capacity(fan_out * fan_in);
            for _ in 0..fan_out * fan_in {
                vals.push(standard_normal(&mut rng) * sigma);
            }
            Linear {
                w: Array2::from_shape_vec((fan_out, fan_in), vals).unwrap(),
                b: Array1::zeros(fan_out),
            }
        };
        let mut hidden = Vec::new();
        for i in 0..dims.len() - 2 {
            let lin = init_linear(dims[i], dims[i + 1]);
            hidden.push(HiddenLayer {
                lin,
                bn: BatchNorm {
                    gamma: Array1::ones(dims[i + 1]),
                    beta: Array1::zeros(dims[i + 1]),
                    run_mean: Array1::zeros(dims[i + 1]),
                    run_var: Array1::ones(dims[i + 1]),
                },
            });
        }
        let out = init_linear(dims[dims.len() - 2], 1);
        Ok(ScorerModel {
            dims: dims.to_vec(),
            dropout: dropout.to_vec(),
            seed,
            standardizer: Standardizer::identity(dims[0]),
            hidden,
            out,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// Inference forward pass: running statistics, no dropout.
    fn forward_eval(&self, x: &Array2<f64>) -> ForwardCache {
        let mut cur = x.clone();
        let mut layers = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let z = cur.dot(&layer.lin.w.t()) + &layer.lin.b;
            let s = layer.bn.run_var.mapv(|v| (v + BN_EPS).sqrt());
            let xhat = (&z - &layer.bn.run_mean) / &s;
            let act_in = &xhat * &layer.bn.gamma + &layer.bn.beta;
            let a = act_in.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
            layers.push(LayerCache {
                x: cur,
                s,
                xhat,
                act_in,
                mask: None,
                batch_stats: false,
            });
            cur = a;
        }
        let logits = cur.dot(&self.out.w.t()) + &self.out.b;
        ForwardCache {
            layers,
            out_in: cur,
            logits: logits.column(0).to_owned(),
        }
    }

    /// Training forward pass: batch statistics (with a running-average
    /// update) and freshly drawn inverted-dropout masks.
    fn forward_train(&mut self, x: &Array2<f64>, rng: &mut ChaCha8Rng) -> ForwardCache {
        let mut cur = x.clone();
        let mut layers = Vec::with_capacity(self.hidden.len());
        for (li, layer) in self.hidden.iter_mut().enumerate() {
            let z = cur.dot(&layer.lin.w.t()) + &layer.lin.b;
            let mu = z.mean_axis(Axis(0)).unwrap();
            let var = (&z - &mu).mapv(|d| d * d).mean_axis(Axis(0)).unwrap();
            layer.bn.run_mean = &layer.bn.run_mean * BN_MOMENTUM + &mu * (1.0 - BN_MOMENTUM);
            layer.bn.run_var = &layer.bn.run_var * BN_MOMENTUM + &var * (1.0 - BN_MOMENTUM);
            let s = var.mapv(|v| (v + BN_EPS).sqrt());
            let xhat = (&z - &mu) / &s;
            let act_in = &xhat * &layer.bn.gamma + &layer.bn.beta;
            let a = act_in.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
            let p = self.dropout[li];
            let mask = Array2::from_shape_fn(a.dim(), |_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    1.0 / (1.0 - p)
                }
            });
            let dropped = &a * &mask;
            layers.push(LayerCache {
                x: cur,
                s,
                xhat,
                act_in,
                mask: Some(mask),
                batch_stats: true,
            });
            cur = dropped;
        }
        let logits = cur.dot(&self.out.w.t()) + &self.out.b;
        ForwardCache {
            layers,
            out_in: cur,
            logits: logits.column(0).to_owned(),
        }
    }

    /// Mean BCE loss plus gradients for every parameter, flattened in the
    /// fixed traversal order (`params_flat`). Works for both cached modes;
    /// inference-mode caches differentiate through the fixed normalization.
    fn backward(&self, cache: &ForwardCache, y: &Array1<f64>) -> (f64, Vec<f64>) {
        let m = cache.logits.len();
        let mf = m as f64;
        let loss = cache
            .logits
            .iter()
            .zip(y)
            .map(|(&z, &t)| bce_from_logit(z, t))
            .sum::<f64>()
            / mf;
        // d loss / d logit of the mean BCE.
        let dlogit =
            Array2::from_shape_fn((m, 1), |(i, _)| (sigmoid(cache.logits[i]) - y[i]) / mf);
        let d_out_w = dlogit.t().dot(&cache.out_in);
        let d_out_b = dlogit.sum_axis(Axis(0));
        let mut da = dlogit.dot(&self.out.w);

        let mut per_layer = Vec::with_capacity(self.hidden.len());
        for (layer, lc) in self.hidden.iter().zip(&cache.layers).rev() {
            if let Some(mask) = &lc.mask {
                da = &da * mask;
            }
            let dbn = &da * &lc.act_in.mapv(|v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE });
            let dgamma = (&dbn * &lc.xhat).sum_axis(Axis(0));
            let dbeta = dbn.sum_axis(Axis(0));
            let dxhat = &dbn * &layer.bn.gamma;
            let dz = if lc.batch_stats {
                let rows = dbn.nrows() as f64;
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * &lc.xhat).sum_axis(Axis(0));
                (&(&dxhat * rows) - &sum_dxhat - &(&lc.xhat * &sum_dxhat_xhat))
                    / &(&lc.s * rows)
            } else {
                &dxhat / &lc.s
            };
            let dw = dz.t().dot(&lc.x);
            let db = dz.sum_axis(Axis(0));
            da = dz.dot(&layer.lin.w);
            per_layer.push((dw, db, dgamma, dbeta));
        }
        per_layer.reverse();

        let mut flat = Vec::with_capacity(self.param_count());
        for (dw, db, dgamma, dbeta) in &per_layer {
            flat.extend(dw.iter());
            flat.extend(db.iter());
            flat.extend(dgamma.iter());
            flat.extend(dbeta.iter());
        }
        flat.extend(d_out_w.iter());
        flat.extend(d_out_b.iter());
        (loss, flat)
    }

    /// Number of trainable parameters (running statistics excluded).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for i in 0..self.dims.len() - 2 {
            n += self.dims[i + 1] * self.dims[i] + 3 * self.dims[i + 1];
        }
        n + self.dims[self.dims.len() - 2] + 1
    }

    fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for layer in &mut self.hidden {
            for v in layer.lin.w.iter_mut() {
                f(v);
            }
            for v in layer.lin.b.iter_mut() {
                f(v);
            }
            for v in layer.bn.gamma.iter_mut() {
                f(v);
            }
            for v in layer.bn.beta.iter_mut() {
                f(v);
            }
        }
        for v in self.out.w.iter_mut() {
            f(v);
        }
        for v in self.out.b.iter_mut() {
            f(v);
        }
    }

    /// All trainable parameters in the fixed traversal order: per hidden
    /// layer weights (row-major), bias, gamma, beta; then the output
    /// weights and bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.hidden {
            flat.extend(layer.lin.w.iter());
            flat.extend(layer.lin.b.iter());
            flat.extend(layer.bn.gamma.iter());
            flat.extend(layer.bn.beta.iter());
        }
        flat.extend(self.out.w.iter());
        flat.extend(self.out.b.iter());
        flat
    }

    /// Overwrite all trainable parameters from `params_flat` order.
    pub fn set_params_flat(&mut self, vals: &[f64]) -> Result<(), ScorerError> {
        if vals.len() != self.param_count() {
            return Err(ScorerError::DimensionMismatch {
                expected: self.param_count(),
                got: vals.len(),
            });
        }
        let mut i = 0;
        self.for_each_param_mut(|p| {
            *p = vals[i];
            i += 1;
        });
        Ok(())
    }

    fn standardize_rows(&self, rows: &[Vec<f64>]) -> Result<Array2<f64>, ScorerError> {
        let mut x = Array2::zeros((rows.len(), self.dims[0]));
        for (i, row) in rows.iter().enumerate() {
            let t = self.standardizer.transform(row)?;
            x.row_mut(i).assign(&ArrayView1::from(&t[..]));
        }
        Ok(x)
    }

    /// Mean BCE of the model on raw feature rows, inference mode.
    pub fn eval_loss(&self, rows: &[Vec<f64>], labels: &[f64]) -> Result<f64, ScorerError> {
        if rows.is_empty() || rows.len() != labels.len() {
            return Err(ScorerError::DimensionMismatch {
                expected: rows.len(),
                got: labels.len(),
            });
        }
        let x = self.standardize_rows(rows)?;
        let cache = self.forward_eval(&x);
        Ok(cache
            .logits
            .iter()
            .zip(labels)
            .map(|(&z, &y)| bce_from_logit(z, y))
            .sum::<f64>()
            / rows.len() as f64)
    }

    /// Mean BCE plus its analytic gradient for every trainable parameter,
    /// inference mode (running statistics, no dropout). The numeric
    /// counterpart is central finite differences over `eval_loss`.
    pub fn eval_loss_and_grads(
        &self,
        rows: &[Vec<f64>],
        labels: &[f64],
    ) -> Result<(f64, Vec<f64>), ScorerError> {
        if rows.is_empty() || rows.len() != labels.len() {
            return Err(ScorerError::DimensionMismatch {
                expected: rows.len(),
                got: labels.len(),
            });
        }
        let x = self.standardize_rows(rows)?;
        let cache = self.forward_eval(&x);
        let y = Array1::from_vec(labels.to_vec());
        Ok(self.backward(&cache, &y))
    }

    /// Score one raw feature row; the result is a probability in (0, 1).
    pub fn score(&self, features: &[f64]) -> Result<f64, ScorerError> {
        Ok(self.score_many(std::slice::from_ref(&features.to_vec()))?[0])
    }

    /// Score a batch of raw feature rows.
    pub fn score_many(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, ScorerError> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.standardize_rows(rows)?;
        let cache = self.forward_eval(&x);
        Ok(cache.logits.iter().map(|&z| sigmoid(z)).collect())
    }

    /// Train on labeled pairs. The standardizer is fitted on the training
    /// split; the validation split is the first `max(1, round(0.2 n))`
    /// entries of a seeded shuffle. Early stopping restores the best
    /// validation snapshot (weights and running statistics).
    pub fn train(
        &mut self,
        pairs: &[TrainingPair],
        cfg: &TrainConfig,
    ) -> Result<TrainReport, ScorerError> {
        let n = pairs.len();
        if n < 2 {
            return Err(ScorerError::InsufficientData(n));
        }
        if cfg.batch_size == 0 || cfg.max_epochs == 0 {
            return Err(ScorerError::BadShape(
                "batch size and epoch count must be positive".into(),
            ));
        }
        for p in pairs {
            if p.features.len() != self.dims[0] {
                return Err(ScorerError::DimensionMismatch {
                    expected: self.dims[0],
                    got: p.features.len(),
                });
            }
            if !(0.0..=1.0).contains(&p.label) {
                return Err(ScorerError::BadShape(format!(
                    "label {} is outside [0, 1]",
                    p.label
                )));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_val = ((0.2 * n as f64).round() as usize).max(1);
        if n_val >= n {
            return Err(ScorerError::InsufficientData(n));
        }
        let (val_idx, train_idx) = order.split_at(n_val);

        let train_rows: Vec<Vec<f64>> =
            train_idx.iter().map(|&i| pairs[i].features.clone()).collect();
        self.standardizer = Standardizer::fit(&train_rows)?;

        let to_matrix = |model: &ScorerModel, idx: &[usize]| -> Result<(Array2<f64>, Array1<f64>), ScorerError> {
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| pairs[i].features.clone()).collect();
            let x = model.standardize_rows(&rows)?;
            let y = Array1::from_vec(idx.iter().map(|&i| pairs[i].label).collect());
            Ok((x, y))
        };
        let (x_train, y_train) = to_matrix(self, train_idx)?;
        let (x_val, y_val) = to_matrix(self, val_idx)?;

        let mut adam_m = vec![0.0; self.param_count()];
        let mut adam_v = vec![0.0; self.param_count()];
        let mut adam_t = 0u64;
        let mut lr = cfg.learning_rate;
        let mut best_val = f64::INFINITY;
        let mut best_snapshot = (self.hidden.clone(), self.out.clone());
        let mut since_improve = 0usize;
        let mut since_halve = 0usize;
        let mut epochs_run = 0usize;

        let mut batch_order: Vec<usize> = (0..train_idx.len()).collect();
        for _epoch in 0..cfg.max_epochs {
            epochs_run += 1;
            batch_order.shuffle(&mut rng);
            for chunk in batch_order.chunks(cfg.batch_size) {
                let mut xb = Array2::zeros((chunk.len(), self.dims[0]));
                let mut yb = Array1::zeros(chunk.len());
                for (bi, &ri) in chunk.iter().enumerate() {
                    xb.row_mut(bi).assign(&x_train.row(ri));
                    yb[bi] = y_train[ri];
                }
                let cache = self.forward_train(&xb, &mut rng);
                let (_, grads) = self.backward(&cache, &yb);
                adam_t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powf(adam_t as f64);
                let bc2 = 1.0 - ADAM_BETA2.powf(adam_t as f64);
                let mut i = 0;
                let (m_s, v_s) = (&mut adam_m, &mut adam_v);
                self.for_each_param_mut(|p| {
                    let g = grads[i];
                    m_s[i] = ADAM_BETA1 * m_s[i] + (1.0 - ADAM_BETA1) * g;
                    v_s[i] = ADAM_BETA2 * v_s[i] + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (m_s[i] / bc1) / ((v_s[i] / bc2).sqrt() + ADAM_EPS);
                    i += 1;
                });
            }
            let val_cache = self.forward_eval(&x_val);
            let val_loss = val_cache
                .logits
                .iter()
                .zip(&y_val)
                .map(|(&z, &y)| bce_from_logit(z, y))
                .sum::<f64>()
                / y_val.len() as f64;
            if val_loss < best_val {
                best_val = val_loss;
                best_snapshot = (self.hidden.clone(), self.out.clone());
                since_improve = 0;
                since_halve = 0;
            } else {
                since_improve += 1;
                since_halve += 1;
                if since_halve >= cfg.lr_halve_patience {
                    lr *= 0.5;
                    since_halve = 0;
                }
                if since_improve >= cfg.early_stop_patience {
                    break;
                }
            }
        }
        self.hidden = best_snapshot.0;
        self.out = best_snapshot.1;
        Ok(TrainReport {
            epochs_run,
            best_val_loss: best_val,
            final_learning_rate: lr,
            train_size: train_idx.len(),
            val_size: n_val,
        })
    }

    /// Serialize to the flat little-endian format. Adam moments are
    /// transient training state and are not stored.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.dropout.len() as u32).to_le_bytes());
        for &p in &self.dropout {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.standardizer.mean.len() as u32).to_le_bytes());
        for &v in &self.standardizer.mean {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.standardizer.std {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut dump = |vals: &mut dyn Iterator<Item = &f64>| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for layer in &self.hidden {
            dump(&mut layer.lin.w.iter());
            dump(&mut layer.lin.b.iter());
            dump(&mut layer.bn.gamma.iter());
            dump(&mut layer.bn.beta.iter());
            dump(&mut layer.bn.run_mean.iter());
            dump(&mut layer.bn.run_var.iter());
        }
        dump(&mut self.out.w.iter());
        dump(&mut self.out.b.iter());
        out
    }

    /// Deserialize the flat format, validating shape metadata and exact
    /// length.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ScorerError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let bad = |msg: &str| ScorerError::BadFormat(msg.into());
        if r.take(8)? != MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ScorerError::BadFormat(format!(
                "unsupported version {version}"
            )));
        }
        let ndims = r.u32()? as usize;
        if !(2..=64).contains(&ndims) {
            return Err(bad("implausible layer count"));
        }
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u32()? as usize);
        }
        let ndrop = r.u32()? as usize;
        if ndrop != ndims - 2 {
            return Err(bad("dropout count does not match layer count"));
        }
        let mut dropout = Vec::with_capacity(ndrop);
        for _ in 0..ndrop {
            dropout.push(r.f64()?);
        }
        let seed = r.u64()?;
        let std_len = r.u32()? as usize;
        if std_len != dims[0] {
            return Err(bad("standardizer width does not match the input layer"));
        }
        let mean = r.f64s(std_len)?;
        let std = r.f64s(std_len)?;
        let mut model = ScorerModel::with_dims(&dims, &dropout, seed)?;
        model.standardizer = Standardizer { mean, std };
        for li in 0..dims.len() - 2 {
            let (fan_in, fan_out) = (dims[li], dims[li + 1]);
            let layer = &mut model.hidden[li];
            layer.lin.w =
                Array2::from_shape_vec((fan_out, fan_in), r.f64s(fan_out * fan_in)?).unwrap();
            layer.lin.b = Array1::from_vec(r.f64s(fan_out)?);
            layer.bn.gamma = Array1::from_vec(r.f64s(fan_out)?);
            layer.bn.beta = Array1::from_vec(r.f64s(fan_out)?);
            layer.bn.run_mean = Array1::from_vec(r.f64s(fan_out)?);
            layer.bn.run_var = Array1::from_vec(r.f64s(fan_out)?);
        }
        let last_in = dims[dims.len() - 2];
        model.out.w = Array2::from_shape_vec((1, last_in), r.f64s(last_in)?).unwrap();
        model.out.b = Array1::from_vec(r.f64s(1)?);
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScorerError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| ScorerError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        let bytes = std::fs::read(path).map_err(|e| ScorerError::Io(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ScorerError> {
        if self.pos + n > self.buf.len() {
            return Err(ScorerError::BadFormat("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ScorerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ScorerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ScorerError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ScorerError> {
        // Validate the byte span before reserving, so a corrupt length
        // field cannot trigger a huge allocation.
        let span = n
            .checked_mul(8)
            .ok_or_else(|| ScorerError::BadFormat("truncated".into()))?;
        if span > self.buf.len() - self.pos {
            return Err(ScorerError::BadFormat("truncated".into()));
        }
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f64()?);
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(features: Vec<f64>, label: f64) -> TrainingPair {
        TrainingPair {
            callsite: 0,
            callee: 0,
            features,
            label,
        }
    }

    /// A linearly separable synthetic set: label is whether the first
    /// coordinate exceeds the second, with the rest noise.
    fn separable_pairs(n: usize, dim: usize, seed: u64) -> Vec<TrainingPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let features: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let label = if features[0] > features[1] { 1.0 } else { 0.0 };
                pair(features, label)
            })
            .collect()
    }

    fn accuracy(model: &ScorerModel, pairs: &[TrainingPair]) -> f64 {
        let rows: Vec<Vec<f64>> = pairs.iter().map(|p| p.features.clone()).collect();
        let scores = model.score_many(&rows).unwrap();
        let hits = scores
            .iter()
            .zip(pairs)
            .filter(|(&s, p)| (s >= 0.5) == (p.label >= 0.5))
            .count();
        hits as f64 / pairs.len() as f64
    }

    #[test]
    fn standardizer_uses_population_moments() {
        let rows = vec![vec![1.0, 2.0, 5.0], vec![3.0, 4.0, 5.0], vec![5.0, 12.0, 5.0]];
        let s = Standardizer::fit(&rows).unwrap();
        assert_eq!(s.mean, vec![3.0, 6.0, 5.0]);
        assert!((s.std[0] - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.std[1] - (56.0f64 / 3.0).sqrt()).abs() < 1e-12);
        // Zero variance passes through with unit scale.
        assert_eq!(s.std[2], 1.0);
        let t = s.transform(&[3.0, 6.0, 7.0]).unwrap();
        assert_eq!(t[0], 0.0);
        assert_eq!(t[2], 2.0);

        assert_eq!(Standardizer::fit(&[]).unwrap_err(), ScorerError::EmptyTrainingSet);
        assert!(Standardizer::fit(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(s.transform(&[1.0]).is_err());
    }

    #[test]
    fn shape_validation_rejects_bad_architectures() {
        assert!(ScorerModel::with_dims(&[8], &[], 1).is_err());
        assert!(ScorerModel::with_dims(&[8, 4, 2], &[0.1], 1).is_err()); // output != 1
        assert!(ScorerModel::with_dims(&[8, 0, 1], &[0.1], 1).is_err());
        assert!(ScorerModel::with_dims(&[8, 4, 1], &[], 1).is_err()); // dropout count
        assert!(ScorerModel::with_dims(&[8, 4, 1], &[1.0], 1).is_err()); // rate = 1
        let m = ScorerModel::with_dims(&[8, 4, 1], &[0.5], 1).unwrap();
        assert_eq!(m.param_count(), 8 * 4 + 4 * 3 + 4 + 1);
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut model = ScorerModel::with_dims(&[8, 16, 8, 1], &[0.4, 0.3], 7).unwrap();
        // Exercise a non-identity standardizer too.
        model.standardizer = Standardizer {
            mean: (0..8).map(|i| i as f64 * 0.1).collect(),
            std: (0..8).map(|i| 1.0 + i as f64 * 0.05).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();

        let (_, analytic) = model.eval_loss_and_grads(&rows, &labels).unwrap();
        let params = model.params_flat();
        assert_eq!(analytic.len(), params.len());
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += eps;
            model.set_params_flat(&plus).unwrap();
            let lp = model.eval_loss(&rows, &labels).unwrap();
            let mut minus = params.clone();
            minus[i] -= eps;
            model.set_params_flat(&minus).unwrap();
            let lm = model.eval_loss(&rows, &labels).unwrap();
            let numeric = (lp - lm) / (2.0 * eps);
            let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
        model.set_params_flat(&params).unwrap();
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn learns_a_separable_problem() {
        let pairs = separable_pairs(240, 6, 5);
        let mut model = ScorerModel::with_dims(&[6, 24, 12, 1], &[0.1, 0.1], 3).unwrap();
        let report = model
            .train(
                &pairs,
                &TrainConfig {
                    max_epochs: 200,
                    batch_size: 64,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
        assert_eq!(report.val_size, 48);
        assert_eq!(report.train_size, 192);
        assert!(report.epochs_run <= 200);
        assert!(report.best_val_loss.is_finite());
        assert!(
            accuracy(&model, &pairs) >= 0.95,
            "train accuracy {}",
            accuracy(&model, &pairs)
        );
        // Scores are probabilities.
        let s = model.score(&pairs[0].features).unwrap();
        assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn training_is_bit_identical_across_runs() {
        let pairs = separable_pairs(80, 5, 21);
        let cfg = TrainConfig {
            max_epochs: 12,
            batch_size: 32,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut a = ScorerModel::with_dims(&[5, 12, 1], &[0.25], 4).unwrap();
        let mut b = ScorerModel::with_dims(&[5, 12, 1], &[0.25], 4).unwrap();
        a.train(&pairs, &cfg).unwrap();
        b.train(&pairs, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());

        // A different training seed takes a different path.
        let mut c = ScorerModel::with_dims(&[5, 12, 1], &[0.25], 4).unwrap();
        c.train(&pairs, &TrainConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn early_stopping_counts_strict_improvements_and_halves_the_rate() {
        // A zero-initialized net with no hidden layers on all-0.5 labels
        // sits exactly at the BCE stationary point: every gradient is zero,
        // parameters never move, and the validation loss repeats exactly.
        // The first epoch is the only strict improvement, so training stops
        // after the patience window, halving the rate every four stale
        // epochs along the way.
        let pairs: Vec<TrainingPair> = (0..50)
            .map(|i| pair(vec![i as f64, 1.0, -2.0, 0.5], 0.5))
            .collect();
        let mut model = ScorerModel::with_dims(&[4, 1], &[], 1).unwrap();
        model.set_params_flat(&[0.0; 5]).unwrap();
        let report = model
            .train(
                &pairs,
                &TrainConfig {
                    max_epochs: 100,
                    learning_rate: 1.0,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
        assert_eq!(report.epochs_run, 1 + 8);
        // Halved at the 4th and 8th stale epoch.
        assert_eq!(report.final_learning_rate, 0.25);
        assert!((report.best_val_loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn persistence_round_trips_bit_exactly() {
        let pairs = separable_pairs(60, 4, 11);
        let mut model = ScorerModel::with_dims(&[4, 10, 6, 1], &[0.3, 0.2], 8).unwrap();
        model
            .train(
                &pairs,
                &TrainConfig {
                    max_epochs: 5,
                    batch_size: 16,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
        let bytes = model.to_bytes();
        let back = ScorerModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let probe = vec![0.3, -0.7, 1.1, 0.0];
        assert_eq!(
            model.score(&probe).unwrap().to_bits(),
            back.score(&probe).unwrap().to_bits()
        );
        assert_eq!(back.dims(), model.dims());
        assert_eq!(back.seed(), model.seed());
        assert_eq!(back.standardizer(), model.standardizer());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scorer.bin");
        model.save(&path).unwrap();
        let loaded = ScorerModel::load(&path).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn deserialization_rejects_corrupt_bytes() {
        let model = ScorerModel::with_dims(&[3, 4, 1], &[0.1], 2).unwrap();
        let good = model.to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            ScorerModel::from_bytes(&bad_magic),
            Err(ScorerError::BadFormat(_))
        ));

        let mut bad_version = good.clone();
        bad_version[8] = 99;
        assert!(ScorerModel::from_bytes(&bad_version).is_err());

        assert!(ScorerModel::from_bytes(&good[..good.len() - 4]).is_err());

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0u8; 8]);
        assert!(matches!(
            ScorerModel::from_bytes(&trailing),
            Err(ScorerError::BadFormat(msg)) if msg == "trailing bytes"
        ));

        assert!(ScorerModel::from_bytes(b"short").is_err());
        assert_eq!(ScorerModel::from_bytes(&good).unwrap().to_bytes(), good);
    }

    #[test]
    fn training_input_is_validated() {
        let mut model = ScorerModel::with_dims(&[4, 6, 1], &[0.2], 1).unwrap();
        let cfg = TrainConfig::default();
        assert_eq!(
            model.train(&[], &cfg).unwrap_err(),
            ScorerError::InsufficientData(0)
        );
        assert_eq!(
            model.train(&[pair(vec![0.0; 4], 1.0)], &cfg).unwrap_err(),
            ScorerError::InsufficientData(1)
        );
        let bad_dim = vec![pair(vec![0.0; 3], 1.0), pair(vec![0.0; 4], 0.0)];
        assert!(matches!(
            model.train(&bad_dim, &cfg).unwrap_err(),
            ScorerError::DimensionMismatch { expected: 4, got: 3 }
        ));
        let bad_label = vec![pair(vec![0.0; 4], 2.0), pair(vec![0.0; 4], 0.0)];
        assert!(matches!(
            model.train(&bad_label, &cfg).unwrap_err(),
            ScorerError::BadShape(_)
        ));
        assert!(model.score(&[0.0; 3]).is_err());
    }

    #[test]
    fn default_architecture_matches_the_feature_encoding() {
        let model = ScorerModel::new(1);
        assert_eq!(model.input_dim(), ENCODED_DIM);
        assert_eq!(model.dims(), &[ENCODED_DIM, 1024, 512, 256, 128, 1]);
        let s = model.score(&vec![0.0; ENCODED_DIM]).unwrap();
        assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn batch_scoring_matches_single_scoring() {
        let model = ScorerModel::with_dims(&[5, 8, 1], &[0.4], 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let batch = model.score_many(&rows).unwrap();
        for (row, &b) in rows.iter().zip(&batch) {
            assert_eq!(model.score(row).unwrap().to_bits(), b.to_bits());
        }
    }
}
