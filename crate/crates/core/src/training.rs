//! Local fine-tuning of an adapter on a frozen linear model `y = (W + BA)x`.

use ndarray::{Array1, Axis};

use crate::data::{ClientShard, Sample};
use crate::error::{invalid, Result};
use crate::lora::{BaseWeights, LoraAdapter, Matrix};
use crate::rng::{derive_seed, permutation};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub base: BaseWeights,
    pub adapter: LoraAdapter,
}

impl ToyModel {
    pub fn new(base: BaseWeights, adapter: LoraAdapter) -> Result<Self> {
        if base.dim() != adapter.dim() {
            return Err(invalid(format!(
                "adapter {:?} does not match base {:?}",
                adapter.dim(),
                base.dim()
            )));
        }
        Ok(ToyModel { base, adapter })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// `½‖y − t‖²`
    SquaredError,
    /// `logsumexp(y) − y[label]`
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::SquaredError => "squared-error",
            LossKind::SoftmaxCrossEntropy => "softmax-cross-entropy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "squared-error" => Some(LossKind::SquaredError),
            "softmax-cross-entropy" => Some(LossKind::SoftmaxCrossEntropy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0003,
            batch_size: 16,
            local_epochs: 1,
            loss: LossKind::SquaredError,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(invalid("local epochs must be at least 1"));
        }
        Ok(())
    }
}

/// `y = W·x + b·(a·x)`, never forming `b·a`.
pub fn forward(model: &ToyModel, x: &Array1<f64>) -> Result<Array1<f64>> {
    let n = model.base.dim().n;
    if x.len() != n {
        return Err(invalid(format!("input has length {}, expected {n}", x.len())));
    }
    let ax = model.adapter.a().dot(x);
    Ok(model.base.w().dot(x) + model.adapter.b().dot(&ax))
}

/// Loss value and `∂loss/∂y` for one output.
fn loss_and_residual(y: &Array1<f64>, sample: &Sample, kind: LossKind) -> (f64, Array1<f64>) {
    match kind {
        LossKind::SquaredError => {
            let g = y - &sample.y;
            (0.5 * g.dot(&g), g)
        }
        LossKind::SoftmaxCrossEntropy => {
            let max = y.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let exp = y.mapv(|v| (v - max).exp());
            let z: f64 = exp.sum();
            let mut g = exp / z;
            let loss = max + z.ln() - y[sample.label];
            g[sample.label] -= 1.0;
            (loss, g)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Batch-mean loss.
    pub loss: f64,
    /// `r × n`
    pub d_a: Matrix,
    /// `m × r`
    pub d_b: Matrix,
}

/// Batch-mean loss and its gradients with respect to `a` and `b`.
///
/// With `g = ∂loss/∂y` per sample: `dB = mean g·(a·x)ᵀ` and `dA = mean (bᵀ·g)·xᵀ`.
pub fn loss_and_grads(model: &ToyModel, batch: &[&Sample], kind: LossKind) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let a = model.adapter.a();
    let b = model.adapter.b();
    let mut d_a = Matrix::zeros(a.raw_dim());
    let mut d_b = Matrix::zeros(b.raw_dim());
    let mut loss = 0.0;
    for s in batch {
        let n = model.base.dim().n;
        if s.x.len() != n {
            return Err(invalid(format!("input has length {}, expected {n}", s.x.len())));
        }
        let ax = a.dot(&s.x);
        let y = model.base.w().dot(&s.x) + b.dot(&ax);
        let (l, g) = loss_and_residual(&y, s, kind);
        loss += l;
        let btg = b.t().dot(&g);
        d_b += &outer(&g, &ax);
        d_a += &outer(&btg, &s.x);
    }
    let scale = 1.0 / batch.len() as f64;
    Ok(Gradients {
        loss: loss * scale,
        d_a: d_a * scale,
        d_b: d_b * scale,
    })
}

fn outer(u: &Array1<f64>, v: &Array1<f64>) -> Matrix {
    let col = u.view().insert_axis(Axis(1));
    let row = v.view().insert_axis(Axis(0));
    col.dot(&row)
}

/// One plain SGD step on both factors.
pub fn sgd_step(adapter: &LoraAdapter, grads: &Gradients, learning_rate: f64) -> Result<LoraAdapter> {
    let a = adapter.a() - &(&grads.d_a * learning_rate);
    let b = adapter.b() - &(&grads.d_b * learning_rate);
    LoraAdapter::new(a, b)
}

/// Product change after one SGD step, computed two ways.
#[derive(Debug, Clone)]
pub struct ProductStep {
    /// `B'A' − BA`
    pub actual: Matrix,
    /// `−η(dB·A + B·dA) + η²·dB·dA`
    pub predicted: Matrix,
    /// `η²·dB·dA`, the part a dense gradient step would not have.
    pub second_order: Matrix,
    /// Entrywise `|B'||A'| + |B||A|`, the magnitude the subtraction works at.
    pub scale: Matrix,
}

pub fn product_step(adapter: &LoraAdapter, grads: &Gradients, learning_rate: f64) -> Result<ProductStep> {
    let next = sgd_step(adapter, grads, learning_rate)?;
    let actual = next.delta() - adapter.delta();
    let first = grads.d_b.dot(adapter.a()) + adapter.b().dot(&grads.d_a);
    let second_order = grads.d_b.dot(&grads.d_a) * (learning_rate * learning_rate);
    let predicted = &second_order - &(first * learning_rate);
    let scale = next.b().mapv(f64::abs).dot(&next.a().mapv(f64::abs))
        + adapter.b().mapv(f64::abs).dot(&adapter.a().mapv(f64::abs));
    Ok(ProductStep {
        actual,
        predicted,
        second_order,
        scale,
    })
}

/// Runs `local_epochs` of mini-batch SGD over a seeded shuffle of the shard.
///
/// The order of epoch `e` comes from `derive_seed([cfg.seed, e])`. A batch size
/// larger than the shard is clamped to the shard size. The base is not touched.
pub fn local_train(model: &ToyModel, shard: &ClientShard, cfg: &TrainConfig) -> Result<LoraAdapter> {
    cfg.validate()?;
    if shard.samples.is_empty() {
        return Err(invalid(format!("client {} has no samples", shard.client_id)));
    }
    let batch_size = cfg.batch_size.min(shard.size());
    let mut current = model.clone();
    for epoch in 0..cfg.local_epochs {
        let order = permutation(shard.size(), derive_seed(&[cfg.seed, epoch as u64]));
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &shard.samples[i]).collect();
            let grads = loss_and_grads(&current, &batch, cfg.loss)?;
            current.adapter = sgd_step(&current.adapter, &grads, cfg.learning_rate)?;
        }
    }
    Ok(current.adapter)
}

/// Mean loss of the dense weights over `samples`; 0 for an empty set.
pub fn evaluate(weights: &Matrix, samples: &[Sample], kind: LossKind) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = samples
        .iter()
        .map(|s| loss_and_residual(&weights.dot(&s.x), s, kind).0)
        .sum();
    total / samples.len() as f64
}
