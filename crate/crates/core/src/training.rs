//! Local client optimisation and server-side aggregation.
//!
//! Models are small and differentiable by hand: multinomial logistic
//! regression, or a one-hidden-layer tanh MLP. Parameters live in one flat
//! vector so aggregation never needs to know the architecture.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::reward::LossTrace;
use crate::rng::{rng_from, tag};
use crate::{ClientId, Scalar};

/// Labelled samples held by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> ClientDataset<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!("{} feature rows but {} labels", features.rows(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::shape("a client dataset needs at least one sample"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::domain(format!("label {l} outside 0..{classes}")));
        }
        Ok(Self { features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn cast<U: Scalar>(&self) -> ClientDataset<U> {
        let data = self.features.as_slice().iter().map(|&x| U::of(x.to_f64_lossy())).collect();
        ClientDataset {
            features: Matrix::from_vec(self.features.rows(), self.features.cols(), data).expect("same shape"),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

/// Flat vector of trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![T::zero(); len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Softmax,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub inputs: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn num_params(&self) -> usize {
        let (d, c) = (self.inputs, self.classes);
        match self.arch {
            Architecture::Softmax => c * d + c,
            Architecture::Mlp { hidden: h } => h * d + h + c * h + c,
        }
    }

    /// Initial parameters. Softmax regression starts at zero; the MLP's
    /// hidden layer gets a seeded uniform Glorot draw.
    pub fn init<T: Scalar>(&self, seed: u64) -> ModelParams<T> {
        let mut params = ModelParams::zeros(self.num_params());
        if let Architecture::Mlp { hidden } = self.arch {
            let mut rng = rng_from(seed, &[tag::MODEL_INIT]);
            let limit1 = (6.0 / (self.inputs + hidden) as f64).sqrt();
            let limit2 = (6.0 / (hidden + self.classes) as f64).sqrt();
            let (w1, rest) = params.values.split_at_mut(hidden * self.inputs);
            w1.iter_mut().for_each(|w| *w = T::of(rng.random_range(-limit1..limit1)));
            let w2 = &mut rest[hidden..hidden + self.classes * hidden];
            w2.iter_mut().for_each(|w| *w = T::of(rng.random_range(-limit2..limit2)));
        }
        params
    }

    fn check<T: Scalar>(&self, params: &ModelParams<T>, data: &ClientDataset<T>) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape(format!("model has {} parameters, architecture needs {}", params.len(), self.num_params())));
        }
        if data.dim() != self.inputs || data.classes != self.classes {
            return Err(Error::shape(format!(
                "dataset is {}-dimensional with {} classes, model expects {} and {}",
                data.dim(),
                data.classes,
                self.inputs,
                self.classes
            )));
        }
        Ok(())
    }

    /// Class scores for one sample, written into `logits`; the hidden
    /// activations are written into `hidden` for the MLP.
    fn forward<T: Scalar>(&self, p: &[T], x: &[T], hidden: &mut Vec<T>, logits: &mut [T]) {
        let (d, c) = (self.inputs, self.classes);
        match self.arch {
            Architecture::Softmax => {
                let (w, b) = p.split_at(c * d);
                for k in 0..c {
                    logits[k] = b[k] + w[k * d..(k + 1) * d].iter().zip(x).map(|(&a, &v)| a * v).sum::<T>();
                }
            }
            Architecture::Mlp { hidden: h } => {
                let (w1, rest) = p.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                hidden.clear();
                hidden.extend((0..h).map(|u| (b1[u] + w1[u * d..(u + 1) * d].iter().zip(x).map(|(&a, &v)| a * v).sum::<T>()).tanh()));
                for k in 0..c {
                    logits[k] = b2[k] + w2[k * h..(k + 1) * h].iter().zip(hidden.iter()).map(|(&a, &v)| a * v).sum::<T>();
                }
            }
        }
    }

    pub fn predict<T: Scalar>(&self, params: &ModelParams<T>, x: &[T]) -> usize {
        let mut hidden = Vec::new();
        let mut logits = vec![T::zero(); self.classes];
        self.forward(&params.values, x, &mut hidden, &mut logits);
        let mut best = 0;
        for k in 1..self.classes {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        best
    }

    pub fn predict_all<T: Scalar>(&self, params: &ModelParams<T>, data: &ClientDataset<T>) -> Vec<usize> {
        data.features.iter_rows().map(|x| self.predict(params, x)).collect()
    }

    /// Mean cross-entropy over `batch` (indices into `data`), accumulating its
    /// gradient into `grad` when given.
    pub fn cross_entropy<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        data: &ClientDataset<T>,
        batch: &[usize],
        mut grad: Option<&mut [T]>,
    ) -> T {
        let (d, c) = (self.inputs, self.classes);
        let p = &params.values;
        let inv_n = T::one() / T::of_usize(batch.len());
        let mut hidden = Vec::new();
        let mut logits = vec![T::zero(); c];
        let mut total = T::zero();
        for &i in batch {
            let x = data.features.row(i);
            let y = data.labels[i];
            self.forward(p, x, &mut hidden, &mut logits);
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = logits.iter().map(|&l| (l - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            total += log_z - logits[y];
            let Some(g) = grad.as_deref_mut() else { continue };
            // dL/dlogit_k = softmax_k - [k == y], scaled by 1/|batch|
            let delta: Vec<T> = (0..c)
                .map(|k| {
                    let s = (logits[k] - log_z).exp();
                    (if k == y { s - T::one() } else { s }) * inv_n
                })
                .collect();
            match self.arch {
                Architecture::Softmax => {
                    let (gw, gb) = g.split_at_mut(c * d);
                    for k in 0..c {
                        gb[k] += delta[k];
                        for (gv, &xv) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                            *gv += delta[k] * xv;
                        }
                    }
                }
                Architecture::Mlp { hidden: h } => {
                    let w2 = &p[h * d + h..h * d + h + c * h];
                    let (gw1, rest) = g.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    for k in 0..c {
                        gb2[k] += delta[k];
                        for u in 0..h {
                            gw2[k * h + u] += delta[k] * hidden[u];
                        }
                    }
                    for u in 0..h {
                        let back: T = (0..c).map(|k| delta[k] * w2[k * h + u]).sum();
                        let pre = back * (T::one() - hidden[u] * hidden[u]);
                        gb1[u] += pre;
                        for (gv, &xv) in gw1[u * d..(u + 1) * d].iter_mut().zip(x) {
                            *gv += pre * xv;
                        }
                    }
                }
            }
        }
        total * inv_n
    }

    /// Full local objective on a batch: mean cross-entropy plus
    /// `(wd/2)‖θ‖²` plus `(μ/2)‖θ − anchor‖²`. Returns the value and gradient.
    pub fn objective<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        data: &ClientDataset<T>,
        batch: &[usize],
        cfg: &TrainerConfig,
        anchor: &ModelParams<T>,
    ) -> (T, Vec<T>) {
        let mut grad = vec![T::zero(); params.len()];
        let ce = self.cross_entropy(params, data, batch, Some(&mut grad));
        let (wd, mu, half) = (T::of(cfg.weight_decay), T::of(cfg.prox_mu), T::of(0.5));
        let mut reg = T::zero();
        for ((g, &v), &a) in grad.iter_mut().zip(&params.values).zip(&anchor.values) {
            *g += wd * v + mu * (v - a);
            reg += half * (wd * v * v + mu * (v - a) * (v - a));
        }
        (ce + reg, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Proximal coefficient; zero disables the term.
    pub prox_mu: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, weight_decay: 4e-4, batch_size: 64, local_epochs: 1, prox_mu: 0.0 }
    }
}

impl TrainerConfig {
    /// Local iterations per round for a client holding `n` samples.
    pub fn iterations(&self, n: usize) -> usize {
        self.local_epochs * n.div_ceil(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.prox_mu >= 0.0) {
            return Err(Error::config("weight decay and proximal coefficient must be non-negative"));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::config("batch size and local epochs must be positive"));
        }
        Ok(())
    }
}

/// Mini-batch SGD from `model`, recording each batch's loss before its step.
pub fn local_train<T: Scalar>(
    spec: &ModelSpec,
    model: &ModelParams<T>,
    data: &ClientDataset<T>,
    cfg: &TrainerConfig,
    client: ClientId,
    seed: u64,
) -> Result<(ModelParams<T>, LossTrace<T>)> {
    spec.check(model, data)?;
    cfg.validate()?;
    let mut rng = rng_from(seed, &[tag::BATCHES]);
    let mut params = model.clone();
    let lr = T::of(cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.iterations(data.len()));
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, grad) = spec.objective(&params, data, batch, cfg, model);
            let loss = spec.cross_entropy(&params, data, batch, None);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { client: client.0, detail: format!("batch loss {loss}") });
            }
            trace.push(loss.max(T::zero()));
            for (v, g) in params.values.iter_mut().zip(grad) {
                *v -= lr * g;
            }
        }
    }
    if !params.is_finite() {
        return Err(Error::Divergence { client: client.0, detail: "non-finite parameters".into() });
    }
    Ok((params, LossTrace::new(client, trace)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Aggregator {
    FedAvg,
    FairAvg,
    FedAvgM { momentum: f64 },
    FedProx,
}

/// Server-side optimiser state of one cluster.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ServerState<T> {
    pub velocity: Option<Vec<T>>,
}

/// `ref + Σ_i w_i (θ_i − ref) / Σ w`, with `ref` the first update; returns
/// `ref` bit-exactly when all updates coincide.
fn weighted_mean<T: Scalar>(updates: &[(ModelParams<T>, usize)], weight: impl Fn(usize) -> T) -> ModelParams<T> {
    let reference = &updates[0].0;
    let total: T = updates.iter().map(|(_, n)| weight(*n)).sum();
    let mut out = reference.clone();
    for (m, n) in &updates[1..] {
        let w = weight(*n) / total;
        for ((o, &v), &r) in out.values.iter_mut().zip(&m.values).zip(&reference.values) {
            *o += w * (v - r);
        }
    }
    out
}

pub fn aggregate<T: Scalar>(
    updates: &[(ModelParams<T>, usize)],
    method: &Aggregator,
    current: &ModelParams<T>,
    server: &mut ServerState<T>,
) -> Result<ModelParams<T>> {
    if updates.is_empty() {
        return Err(Error::shape("no client updates to aggregate"));
    }
    let dim = current.len();
    if let Some((m, _)) = updates.iter().find(|(m, _)| m.len() != dim) {
        return Err(Error::shape(format!("update has {} parameters, model has {dim}", m.len())));
    }
    match *method {
        Aggregator::FedAvg | Aggregator::FedProx => {
            if updates.iter().all(|(_, n)| *n == 0) {
                return Err(Error::shape("all client sample counts are zero"));
            }
            Ok(weighted_mean(updates, |n| T::of_usize(n)))
        }
        Aggregator::FairAvg => Ok(weighted_mean(updates, |_| T::one())),
        Aggregator::FedAvgM { momentum } => {
            let avg = weighted_mean(updates, |n| T::of_usize(n));
            let m = T::of(momentum);
            let prev = server.velocity.take().unwrap_or_else(|| vec![T::zero(); dim]);
            // θ_new = θ_old − v_new = θ_avg − m·v_prev
            let next: Vec<T> = prev.iter().zip(&current.values).zip(&avg.values).map(|((&v, &old), &a)| m * v + (old - a)).collect();
            let values = avg.values.iter().zip(&prev).map(|(&a, &v)| a - m * v).collect();
            server.velocity = Some(next);
            Ok(ModelParams { values })
        }
    }
}
