//! Frozen linear classifier `W_pre` with a trainable LoRA residual:
//! `logits = W_pre x + scale · B (A x)`.
//!
//! The loss is mean softmax cross-entropy plus `λ/2 (‖B_I‖² + ‖A_I‖²)` over
//! the trainable rank-1 indices `I` only. Frozen indices still take part in
//! the forward pass.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{argmax, Dataset, Sample};
use crate::error::{HaflError, Result};
use crate::lora::LoraAdapter;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenBase {
    w_pre: Matrix,
}

impl FrozenBase {
    pub fn new(w_pre: Matrix) -> Result<Self> {
        if w_pre.rows() == 0 || w_pre.cols() == 0 {
            return Err(HaflError::ZeroDimension { name: "W_pre" });
        }
        Ok(FrozenBase { w_pre })
    }

    pub fn weights(&self) -> &Matrix {
        &self.w_pre
    }

    pub fn class_count(&self) -> usize {
        self.w_pre.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_pre.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub eta: f64,
    pub lambda: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            eta: 0.001,
            lambda: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            local_epochs: 1,
            batch_size: 32,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HaflError::InvalidArgument(m));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if self.batch_size == 0 {
            return Err(HaflError::ZeroDimension { name: "batch_size" });
        }
        Ok(())
    }
}

/// Gradients for the trainable rank-1 indices, in `indices` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub indices: Vec<usize>,
    /// `d × |indices|`
    pub b_cols: Matrix,
    /// `|indices| × l`
    pub a_rows: Matrix,
}

/// Bias-corrected Adam moments over the trainable slices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m_b: Matrix,
    v_b: Matrix,
    m_a: Matrix,
    v_a: Matrix,
    step: u64,
}

impl AdamState {
    pub fn new(d: usize, l: usize, trainable: usize) -> Self {
        AdamState {
            m_b: Matrix::zeros(d, trainable),
            v_b: Matrix::zeros(d, trainable),
            m_a: Matrix::zeros(trainable, l),
            v_a: Matrix::zeros(trainable, l),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

fn check_shapes(base: &FrozenBase, adapter: &LoraAdapter) -> Result<()> {
    if adapter.out_dim() != base.class_count() || adapter.in_dim() != base.feature_dim() {
        return Err(HaflError::shape(
            "adapter vs base",
            format!("{}x{}", base.class_count(), base.feature_dim()),
            format!("{}x{}", adapter.out_dim(), adapter.in_dim()),
        ));
    }
    Ok(())
}

fn logits_unchecked(base: &FrozenBase, adapter: &LoraAdapter, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h = adapter.a().matvec(x);
    let mut z = base.weights().matvec(x);
    let s = adapter.scale();
    let b = adapter.b();
    for (row, zr) in z.iter_mut().enumerate() {
        let br = b.row(row);
        *zr += s * br.iter().zip(&h).map(|(u, v)| u * v).sum::<f64>();
    }
    (z, h)
}

pub fn forward(base: &FrozenBase, adapter: &LoraAdapter, x: &[f64]) -> Result<Vec<f64>> {
    check_shapes(base, adapter)?;
    if x.len() != base.feature_dim() {
        return Err(HaflError::shape(
            "forward input",
            base.feature_dim(),
            x.len(),
        ));
    }
    Ok(logits_unchecked(base, adapter, x).0)
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn cross_entropy(z: &[f64], y: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[y]
}

fn masked_indices(mask: &[bool], rank: usize) -> Result<Vec<usize>> {
    if mask.len() != rank {
        return Err(HaflError::shape("mask length", rank, mask.len()));
    }
    let idx: Vec<usize> = (0..rank).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(HaflError::InvalidArgument(
            "mask has no trainable index".into(),
        ));
    }
    Ok(idx)
}

/// Regularised loss and its analytic gradient on the masked indices.
pub fn loss_and_grads(
    base: &FrozenBase,
    adapter: &LoraAdapter,
    mask: &[bool],
    batch: &[&Sample],
    cfg: &TrainingConfig,
) -> Result<(f64, Gradients)> {
    check_shapes(base, adapter)?;
    if batch.is_empty() {
        return Err(HaflError::Empty("batch"));
    }
    let indices = masked_indices(mask, adapter.rank())?;
    let (d, l, m) = (adapter.out_dim(), adapter.in_dim(), indices.len());
    let s = adapter.scale();
    let (b, a) = (adapter.b(), adapter.a());
    let mut gb = Matrix::zeros(d, m);
    let mut ga = Matrix::zeros(m, l);
    let mut data_loss = 0.0;

    for sample in batch {
        if sample.x.len() != l || sample.y >= d {
            return Err(HaflError::shape(
                "training sample",
                format!("{l} features, label < {d}"),
                format!("{} features, label {}", sample.x.len(), sample.y),
            ));
        }
        let (mut g, h) = logits_unchecked(base, adapter, &sample.x);
        data_loss += cross_entropy(&g, sample.y);
        softmax_in_place(&mut g);
        g[sample.y] -= 1.0;
        for (k, &i) in indices.iter().enumerate() {
            let coeff = s * h[i];
            for (r, gr) in g.iter().enumerate() {
                let v = gb.get(r, k) + coeff * gr;
                gb.set(r, k, v);
            }
            let bg: f64 = (0..d).map(|r| b.get(r, i) * g[r]).sum::<f64>() * s;
            for (dst, xv) in ga.row_mut(k).iter_mut().zip(&sample.x) {
                *dst += bg * xv;
            }
        }
    }

    let n = batch.len() as f64;
    let lam = cfg.lambda;
    let mut reg = 0.0;
    for (k, &i) in indices.iter().enumerate() {
        for r in 0..d {
            let w = b.get(r, i);
            reg += w * w;
            gb.set(r, k, gb.get(r, k) / n + lam * w);
        }
        for (q, dst) in ga.row_mut(k).iter_mut().enumerate() {
            let w = a.get(i, q);
            reg += w * w;
            *dst = *dst / n + lam * w;
        }
    }
    let loss = data_loss / n + 0.5 * lam * reg;
    Ok((
        loss,
        Gradients {
            indices,
            b_cols: gb,
            a_rows: ga,
        },
    ))
}

pub fn adam_step(
    adapter: &mut LoraAdapter,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainingConfig,
) -> Result<()> {
    let (d, l, m) = (adapter.out_dim(), adapter.in_dim(), grads.indices.len());
    if state.m_b.shape() != (d, m)
        || state.m_a.shape() != (m, l)
        || grads.b_cols.shape() != (d, m)
        || grads.a_rows.shape() != (m, l)
    {
        return Err(HaflError::shape(
            "adam_step",
            format!("B slices {d}x{m}, A slices {m}x{l}"),
            format!(
                "state B {:?} / A {:?}, grads B {:?} / A {:?}",
                state.m_b.shape(),
                state.m_a.shape(),
                grads.b_cols.shape(),
                grads.a_rows.shape()
            ),
        ));
    }
    if let Some(&bad) = grads.indices.iter().find(|&&i| i >= adapter.rank()) {
        return Err(HaflError::IndexOutOfRange {
            what: "gradient rank-1",
            index: bad,
            limit: adapter.rank(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = |g: f64, mo: &mut f64, ve: &mut f64| -> f64 {
        *mo = b1 * *mo + (1.0 - b1) * g;
        *ve = b2 * *ve + (1.0 - b2) * g * g;
        let m_hat = *mo / c1;
        let v_hat = *ve / c2;
        cfg.eta * m_hat / (v_hat.sqrt() + cfg.adam_eps)
    };
    for (k, &i) in grads.indices.iter().enumerate() {
        for r in 0..d {
            let mut mo = state.m_b.get(r, k);
            let mut ve = state.v_b.get(r, k);
            let delta = update(grads.b_cols.get(r, k), &mut mo, &mut ve);
            state.m_b.set(r, k, mo);
            state.v_b.set(r, k, ve);
            let w = adapter.b().get(r, i) - delta;
            adapter.b_mut().set(r, i, w);
        }
        for q in 0..l {
            let mut mo = state.m_a.get(k, q);
            let mut ve = state.v_a.get(k, q);
            let delta = update(grads.a_rows.get(k, q), &mut mo, &mut ve);
            state.m_a.set(k, q, mo);
            state.v_a.set(k, q, ve);
            let w = adapter.a().get(i, q) - delta;
            adapter.a_mut().set(i, q, w);
        }
    }
    Ok(())
}

/// `local_epochs` passes of shuffled mini-batch Adam over `shard`.
pub fn local_train(
    base: &FrozenBase,
    adapter: &LoraAdapter,
    mask: &[bool],
    shard: &Dataset,
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<LoraAdapter> {
    if shard.is_empty() {
        return Err(HaflError::Empty("training shard"));
    }
    let trainable = masked_indices(mask, adapter.rank())?.len();
    let mut local = adapter.clone();
    let mut state = AdamState::new(adapter.out_dim(), adapter.in_dim(), trainable);
    let mut rng = crate::seed::rng_for(seed, &[crate::seed::TAG_TRAIN]);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &shard.samples[i]).collect();
            let (_, grads) = loss_and_grads(base, &local, mask, &batch, cfg)?;
            adam_step(&mut local, &grads, &mut state, cfg)?;
        }
    }
    Ok(local)
}

pub fn evaluate(base: &FrozenBase, adapter: &LoraAdapter, dataset: &Dataset) -> Result<Evaluation> {
    check_shapes(base, adapter)?;
    if dataset.is_empty() {
        return Err(HaflError::Empty("evaluation dataset"));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for s in &dataset.samples {
        let (z, _) = logits_unchecked(base, adapter, &s.x);
        if argmax(&z) == s.y {
            correct += 1;
        }
        loss += cross_entropy(&z, s.y);
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}
