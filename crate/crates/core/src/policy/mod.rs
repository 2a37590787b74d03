//! The autoregressive policy: model, training loops, gradient checks and
//! checkpoints.

mod checkpoint;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use model::{argmax, log_softmax, softmax, Decoder, Forward, Layout, ModelConfig, PolicyParams};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStage, MaskedSequence, StageKind};
use crate::error::{Error, Result};
use crate::rng;

/// Sequences per parallel work unit. Fixed so that the reduction order, and
/// therefore every floating-point sum, is independent of the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to a tenth of the base rate over each training run.
    Cosine,
}

impl LrSchedule {
    /// Learning rate for step `step` of a run lasting `total` steps.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub context_length: usize,
    pub temperature: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr_schedule: LrSchedule::Constant,
            learning_rate: 3e-3,
            batch_size: 16,
            epochs: 1,
            context_length: 128,
            temperature: 1.0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be a nonnegative number".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.context_length == 0 || self.context_length > model.max_len {
            return Err(Error::Config(format!(
                "context_length {} outside [1, {}]",
                self.context_length, model.max_len
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Exact log-probabilities of the supervised tokens of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLogProb {
    pub total: f64,
    /// Indices `j` of the scored tokens (those with `loss_mask[j]`).
    pub targets: Vec<usize>,
    /// `log p(token[j] | token[..j])` for each entry of `targets`.
    pub per_position: Vec<f64>,
}

pub fn evaluate_logprob(params: &PolicyParams, seq: &MaskedSequence) -> Result<SequenceLogProb> {
    let targets: Vec<usize> = (1..seq.len()).filter(|&j| seq.loss_mask[j]).collect();
    let positions: Vec<usize> = targets.iter().map(|j| j - 1).collect();
    let fwd = params.forward(&seq.tokens, &positions)?;
    let per_position: Vec<f64> = targets
        .iter()
        .zip(&fwd.logits)
        .map(|(&j, z)| log_softmax(z)[seq.tokens[j] as usize])
        .collect();
    let total = per_position.iter().sum();
    Ok(SequenceLogProb {
        total,
        targets,
        per_position,
    })
}

/// Summed masked cross-entropy of `seq`; accumulates `scale * d(loss)/d(theta)`
/// into `grad`.
pub fn sequence_loss_grad(params: &PolicyParams, seq: &MaskedSequence, scale: f64, grad: &mut [f64]) -> Result<f64> {
    let targets: Vec<usize> = (1..seq.len()).filter(|&j| seq.loss_mask[j]).collect();
    let positions: Vec<usize> = targets.iter().map(|j| j - 1).collect();
    let fwd = params.forward(&seq.tokens, &positions)?;
    let mut loss = 0.0;
    let dlogits: Vec<Vec<f64>> = targets
        .iter()
        .zip(&fwd.logits)
        .map(|(&j, z)| {
            let lp = log_softmax(z);
            let y = seq.tokens[j] as usize;
            loss -= lp[y];
            let mut dz: Vec<f64> = lp.iter().map(|l| scale * l.exp()).collect();
            dz[y] -= scale;
            dz
        })
        .collect();
    params.backward(&fwd, &dlogits, grad);
    Ok(loss)
}

/// Mean masked cross-entropy over all supervised tokens in `batch` and its
/// gradient.
pub fn batch_loss_grad(params: &PolicyParams, batch: &[&MaskedSequence]) -> Result<(f64, Vec<f64>)> {
    let n_targets: usize = batch.iter().map(|s| s.supervised()).sum();
    if n_targets == 0 {
        return Err(Error::Input("batch has no supervised tokens".into()));
    }
    let scale = 1.0 / n_targets as f64;
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; params.len()];
            let mut loss = 0.0;
            for seq in chunk {
                loss += sequence_loss_grad(params, seq, scale, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss * scale, grad))
}

/// Rescale `grad` to at most `max_norm` in global L2 norm; returns the
/// pre-clipping norm.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Update rule plus its per-parameter state. The state lives outside
/// `PolicyParams`, so snapshots and checkpoints hold parameters only.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        let n = if kind == OptimizerKind::Adam { n_params } else { 0 };
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn for_params(config: &TrainConfig, params: &PolicyParams) -> Self {
        Self::new(config.optimizer, params.len())
    }

    /// Clip `grad` to `grad_clip` in global norm and apply one update.
    /// Non-finite gradients are rejected before the parameters are touched.
    /// Returns the pre-clipping gradient norm.
    pub fn apply(
        &mut self,
        params: &mut PolicyParams,
        mut grad: Vec<f64>,
        learning_rate: f64,
        grad_clip: f64,
        step: usize,
    ) -> Result<f64> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at batch {step}")));
        }
        let norm = clip_global_norm(&mut grad, grad_clip);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.data.iter_mut().zip(&grad) {
                    *p -= learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - ADAM_B1.powi(self.t as i32);
                let c2 = 1.0 - ADAM_B2.powi(self.t as i32);
                for (((p, g), m), v) in params
                    .data
                    .iter_mut()
                    .zip(&grad)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
                    *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
                    *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::Numeric(format!("non-finite parameters after batch {step}")));
        }
        Ok(norm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One clipped gradient step on the mean masked cross-entropy of `batch`.
pub fn train_step(
    params: &mut PolicyParams,
    opt: &mut Optimizer,
    batch: &[&MaskedSequence],
    config: &TrainConfig,
    batch_id: usize,
) -> Result<StepStats> {
    train_step_at(params, opt, batch, config, config.learning_rate, batch_id)
}

/// `train_step` with an explicit learning rate (for scheduled runs).
pub fn train_step_at(
    params: &mut PolicyParams,
    opt: &mut Optimizer,
    batch: &[&MaskedSequence],
    config: &TrainConfig,
    learning_rate: f64,
    batch_id: usize,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    if let Some(s) = batch.iter().find(|s| s.len() > config.context_length) {
        return Err(Error::Input(format!(
            "sequence of length {} exceeds context_length {}",
            s.len(),
            config.context_length
        )));
    }
    let (loss, grad) = batch_loss_grad(params, batch)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at batch {batch_id}")));
    }
    let grad_norm = opt.apply(params, grad, learning_rate, config.grad_clip, batch_id)?;
    Ok(StepStats { loss, grad_norm })
}

/// Number of optimizer steps `epochs` passes over `n` sequences take.
pub fn steps_for(n: usize, config: &TrainConfig) -> usize {
    config.epochs * n.div_ceil(config.batch_size)
}

/// Train for `epochs` passes over `data`, reshuffling each epoch. Returns the
/// per-step losses.
pub fn train_epochs(
    params: &mut PolicyParams,
    opt: &mut Optimizer,
    data: &[MaskedSequence],
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    config.validate(&params.config)?;
    if data.is_empty() {
        return Err(Error::Input("no training sequences".into()));
    }
    let mut r = rng::stream(seed, rng::stream_id(31, 0));
    let total = steps_for(data.len(), config);
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&MaskedSequence> = chunk.iter().map(|&i| &data[i]).collect();
            let id = losses.len();
            let lr = config.lr_schedule.rate(config.learning_rate, id, total);
            losses.push(train_step_at(params, opt, &batch, config, lr, id)?.loss);
        }
    }
    Ok(losses)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Curriculum,
    Mixed,
}

/// Result of pre-training. For the curriculum schedule `stage_snapshots`
/// holds the parameters after each stage.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: PolicyParams,
    pub losses: Vec<f64>,
    pub steps: usize,
    pub stage_snapshots: Vec<PolicyParams>,
}

/// How the curriculum phases are sized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainPlan {
    /// Passes over each stage's own corpus.
    pub stage_epochs: [usize; 3],
    /// Extra sequences replayed from earlier stages in each later phase, as a
    /// fraction of that phase's own sequence count.
    pub replay: f64,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        Self {
            stage_epochs: [8, 8, 16],
            replay: 1.0,
        }
    }
}

/// The multiset of sequences each curriculum phase trains on, in drawing
/// order. Phase `k` holds `stage_epochs[k]` shuffled passes over stage `k`
/// plus replayed sequences cycled from the earlier stages.
fn phase_pools<'a>(ordered: &[&'a CorpusStage], plan: &PretrainPlan, seed: u64) -> Vec<Vec<&'a MaskedSequence>> {
    let mut r = rng::stream(seed, rng::stream_id(32, 1));
    (0..ordered.len())
        .map(|k| {
            let own = &ordered[k].sequences;
            let mut pool: Vec<&MaskedSequence> = Vec::new();
            for _ in 0..plan.stage_epochs[k] {
                let mut idx: Vec<usize> = (0..own.len()).collect();
                idx.shuffle(&mut r);
                pool.extend(idx.into_iter().map(|i| &own[i]));
            }
            if k > 0 {
                let extra = (plan.replay * pool.len() as f64).round() as usize;
                for j in 0..k {
                    let src = &ordered[j].sequences;
                    let take = extra / k + usize::from(j < extra % k);
                    let mut idx: Vec<usize> = Vec::new();
                    while idx.len() < take {
                        let mut fresh: Vec<usize> = (0..src.len()).collect();
                        fresh.shuffle(&mut r);
                        idx.extend(fresh);
                    }
                    pool.extend(idx[..take].iter().map(|&i| &src[i]));
                }
                pool.shuffle(&mut r);
            }
            pool
        })
        .collect()
}

/// Multi-stage pre-training.
///
/// The curriculum schedule runs the phases in order (objective, subjective,
/// preference), with per-stage epochs and replay as set by `plan`. The mixed
/// schedule pools every sequence of the three corpora, reshuffles the pool
/// on each pass, and takes exactly as many steps as the curriculum would.
pub fn pretrain(
    mut params: PolicyParams,
    stages: &[CorpusStage],
    schedule: Schedule,
    config: &TrainConfig,
    plan: &PretrainPlan,
    seed: u64,
) -> Result<PretrainOutcome> {
    config.validate(&params.config)?;
    if !(plan.replay >= 0.0 && plan.replay.is_finite()) {
        return Err(Error::Config("replay fraction must be nonnegative".into()));
    }
    for kind in StageKind::ALL {
        let n = stages.iter().filter(|s| s.stage == kind).count();
        if n != 1 {
            return Err(Error::Config(format!(
                "pre-training needs exactly one {kind:?} stage, got {n}"
            )));
        }
    }
    let mut ordered: Vec<&CorpusStage> = stages.iter().collect();
    ordered.sort_by_key(|s| s.stage);
    if let Some(s) = ordered.iter().find(|s| s.sequences.is_empty()) {
        return Err(Error::Config(format!("{:?} stage has no sequences", s.stage)));
    }
    let pools = phase_pools(&ordered, plan, seed);
    let bs = config.batch_size;
    let steps: usize = pools.iter().map(|p| p.len().div_ceil(bs)).sum();
    let mut losses = Vec::with_capacity(steps);
    let mut stage_snapshots = Vec::new();
    let mut opt = Optimizer::for_params(config, &params);
    match schedule {
        Schedule::Curriculum => {
            for pool in &pools {
                let phase_steps = pool.len().div_ceil(bs);
                for (k, batch) in pool.chunks(bs).enumerate() {
                    let id = losses.len();
                    let lr = config.lr_schedule.rate(config.learning_rate, k, phase_steps);
                    losses.push(train_step_at(&mut params, &mut opt, batch, config, lr, id)?.loss);
                }
                stage_snapshots.push(params.clone());
            }
        }
        Schedule::Mixed => {
            let all: Vec<&MaskedSequence> = ordered.iter().flat_map(|s| &s.sequences).collect();
            let mut r = rng::stream(seed, rng::stream_id(32, 2));
            let mut order: Vec<usize> = Vec::new();
            while losses.len() < steps {
                if order.len() < bs {
                    let mut fresh: Vec<usize> = (0..all.len()).collect();
                    fresh.shuffle(&mut r);
                    order.extend(fresh);
                }
                let batch: Vec<&MaskedSequence> = order.drain(..bs).map(|i| all[i]).collect();
                let id = losses.len();
                let lr = config.lr_schedule.rate(config.learning_rate, id, steps);
                losses.push(train_step_at(&mut params, &mut opt, &batch, config, lr, id)?.loss);
            }
        }
    }
    Ok(PretrainOutcome {
        params,
        losses,
        steps,
        stage_snapshots,
    })
}

/// Maximum relative error between the analytic gradient of the summed masked
/// cross-entropy and central finite differences, over 200 sampled
/// coordinates that `seq` actually touches.
pub fn check_gradients(params: &PolicyParams, seq: &MaskedSequence, epsilon: f64, seed: u64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    let mut grad = vec![0.0; params.len()];
    sequence_loss_grad(params, seq, 1.0, &mut grad)?;
    let coords = sample_coordinates(params, seq, 200, seed);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in coords {
        let fd = finite_difference(&mut probe, seq, i, epsilon)?;
        let ga = grad[i];
        let err = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Central difference `(L(θ+εe_i) − L(θ−εe_i)) / 2ε` of the summed masked
/// cross-entropy; restores `params` before returning.
pub fn finite_difference(params: &mut PolicyParams, seq: &MaskedSequence, index: usize, epsilon: f64) -> Result<f64> {
    let orig = params.data[index];
    params.data[index] = orig + epsilon;
    let up = -evaluate_logprob(params, seq)?.total;
    params.data[index] = orig - epsilon;
    let down = -evaluate_logprob(params, seq)?.total;
    params.data[index] = orig;
    Ok((up - down) / (2.0 * epsilon))
}

/// Half the sample from the dense weight matrices, half from the embedding
/// rows of the tokens and positions present in `seq`.
fn sample_coordinates(params: &PolicyParams, seq: &MaskedSequence, n: usize, seed: u64) -> Vec<usize> {
    let l = params.layout();
    let d = params.config.d_model;
    let mut r = rng::stream(seed, rng::stream_id(33, 0));
    let dense = l.wq.start..l.w2.end;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k % 2 == 0 {
            out.push(r.random_range(dense.clone()));
        } else {
            let t = r.random_range(0..seq.len());
            let j = r.random_range(0..d);
            out.push(if r.random::<bool>() {
                l.tok_emb.start + seq.tokens[t] as usize * d + j
            } else {
                l.pos_emb.start + t * d + j
            });
        }
    }
    out
}
