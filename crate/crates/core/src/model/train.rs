//! Fixed-window one-step training: sample a target position, feed the
//! preceding `context` tokens (with coordinates), and descend the hybrid
//! cross-entropy + midpoint-MSE loss. Deterministic for a fixed seed.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::net::{self, Trace};
use crate::model::{round_to_f32, Model, ModelConfig};
use crate::predictor::Context;
use crate::quant::{QuantizerModel, TokenSequence};

/// How target positions are drawn during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingKind {
    /// Uniformly random positions.
    Random,
    /// Deterministic even stride across the sequence.
    Uniform,
    /// Bucket candidate positions by target token and cycle the buckets,
    /// so rare tokens are supervised as often as common ones.
    #[default]
    TargetAware,
}

impl SamplingKind {
    pub fn parse(name: &str) -> Option<SamplingKind> {
        match name {
            "random" => Some(SamplingKind::Random),
            "uniform" => Some(SamplingKind::Uniform),
            "target-aware" => Some(SamplingKind::TargetAware),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SamplingKind::Random => "random",
            SamplingKind::Uniform => "uniform",
            SamplingKind::TargetAware => "target-aware",
        }
    }
}

/// Parameter update rule. Plain gradient descent is the default; Adam is
/// available behind the flag with fixed (0.9, 0.999, 1e-8) moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(name: &str) -> Option<OptimizerKind> {
        match name {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

/// Step budget: an explicit count (0 is a legal no-op run), or derived
/// from `sampling_ratio` so the run visits that fraction of windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepCount {
    #[default]
    Auto,
    Fixed(u64),
}

/// Knobs for one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    /// Weight of the midpoint-MSE term.
    pub alpha: f64,
    /// Learning rate.
    pub lr: f64,
    pub steps: StepCount,
    pub batch: u32,
    pub sampling: SamplingKind,
    /// Fraction of candidate windows visited under `StepCount::Auto`.
    pub sampling_ratio: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            alpha: 0.1,
            lr: 0.1,
            steps: StepCount::Auto,
            batch: 16,
            sampling: SamplingKind::TargetAware,
            sampling_ratio: 0.01,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::BadTrainConfig("alpha must be finite and >= 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::BadTrainConfig("lr must be finite and > 0"));
        }
        if self.batch == 0 {
            return Err(Error::BadTrainConfig("batch must be >= 1"));
        }
        if !(self.sampling_ratio > 0.0 && self.sampling_ratio <= 1.0) {
            return Err(Error::BadTrainConfig("sampling_ratio must be in (0, 1]"));
        }
        Ok(())
    }

    /// Effective step count for a sequence with `candidates` target
    /// positions: an explicit count wins, otherwise the ratio decides.
    pub fn effective_steps(&self, candidates: u64) -> u64 {
        match self.steps {
            StepCount::Fixed(n) => n,
            StepCount::Auto => {
                let visits = libm::ceil(self.sampling_ratio * candidates as f64) as u64;
                visits.div_ceil(u64::from(self.batch)).max(1)
            }
        }
    }
}

/// Draws target positions in [context, len) under a sampling strategy.
/// Stateful so round-robin schemes distribute across consecutive draws.
#[derive(Debug, Clone)]
pub struct Sampler {
    kind: SamplerImpl,
}

#[derive(Debug, Clone)]
enum SamplerImpl {
    Random {
        lo: u64,
        hi: u64,
    },
    Uniform {
        lo: u64,
        span: u64,
        stride: u64,
        cursor: u64,
    },
    TargetAware {
        /// Candidate positions per target token; empty buckets removed.
        buckets: Vec<Vec<u64>>,
        cursor: usize,
    },
}

impl Sampler {
    /// `expected_draws` shapes the uniform stride; other kinds ignore it.
    pub fn new(
        kind: SamplingKind,
        tokens: &[u32],
        context: u32,
        expected_draws: u64,
    ) -> Result<Sampler> {
        let len = tokens.len() as u64;
        let c = u64::from(context);
        if len <= c {
            return Err(Error::NoCandidates);
        }
        let span = len - c;
        let imp = match kind {
            SamplingKind::Random => SamplerImpl::Random { lo: c, hi: len },
            SamplingKind::Uniform => {
                let stride = (span / expected_draws.max(1)).max(1);
                SamplerImpl::Uniform { lo: c, span, stride, cursor: 0 }
            }
            SamplingKind::TargetAware => {
                let vocab = tokens.iter().copied().max().unwrap_or(0) as usize + 1;
                let mut buckets = alloc::vec![Vec::new(); vocab];
                for pos in c..len {
                    buckets[tokens[pos as usize] as usize].push(pos);
                }
                buckets.retain(|b| !b.is_empty());
                SamplerImpl::TargetAware { buckets, cursor: 0 }
            }
        };
        Ok(Sampler { kind: imp })
    }

    /// Next target position. Never fails once constructed.
    pub fn draw(&mut self, rng: &mut ChaCha8Rng) -> u64 {
        match &mut self.kind {
            SamplerImpl::Random { lo, hi } => rng.gen_range(*lo..*hi),
            SamplerImpl::Uniform { lo, span, stride, cursor } => {
                let pos = *lo + *cursor;
                *cursor = (*cursor + *stride) % *span;
                pos
            }
            SamplerImpl::TargetAware { buckets, cursor } => {
                let bucket = &buckets[*cursor];
                *cursor = (*cursor + 1) % buckets.len();
                bucket[rng.gen_range(0..bucket.len())]
            }
        }
    }
}

/// Convenience wrapper for the round-robin scheme: draw `batch` windows
/// (context slice, coord slice, target) from the sequence.
pub fn target_aware_sample<'a>(
    seq: &'a TokenSequence,
    context: u32,
    batch: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Context<'a>, u32)>> {
    let mut sampler = Sampler::new(SamplingKind::TargetAware, &seq.tokens, context, u64::from(batch))?;
    let mut out = Vec::with_capacity(batch as usize);
    for _ in 0..batch {
        let pos = sampler.draw(rng) as usize;
        let c = context as usize;
        let ctx = Context::new(&seq.tokens[pos - c..pos], &seq.coords[pos - c..=pos])?;
        out.push((ctx, seq.tokens[pos]));
    }
    Ok(out)
}

/// Per-step loss averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub ce: f64,
    pub mse: f64,
    pub total: f64,
}

/// Held-out evaluation snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub step: u64,
    /// Fraction of held-out windows whose true token is the model's top-1.
    pub top1: f64,
    /// Mean squared error of the argmax bin midpoint on held-out windows.
    pub mse_argmax: f64,
}

/// Everything a caller may want to inspect after training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepStats>,
    pub evals: Vec<EvalStats>,
    /// Final held-out top-1 accuracy (last entry of `evals`).
    pub final_top1: f64,
}

/// Number of held-out windows reserved for accuracy tracking.
const HOLDOUT_WINDOWS: usize = 128;
/// Evaluation cadence: eight snapshots per run plus the final one.
const EVAL_POINTS: u64 = 8;

/// Train a fresh model on a token sequence. Deterministic for a fixed
/// `training.seed`; the returned parameters are rounded to the f32 grid so
/// the in-memory model equals its checkpoint bit for bit.
pub fn train(
    seq: &TokenSequence,
    quantizer: &QuantizerModel,
    config: &ModelConfig,
    training: &TrainingConfig,
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    training.validate()?;
    if quantizer.vocab() != config.vocab {
        return Err(Error::BadTrainConfig("quantizer vocab differs from model config"));
    }
    let len = seq.tokens.len() as u64;
    let c = config.context;
    if len <= u64::from(c) {
        return Err(Error::SequenceTooShort { len, context: c });
    }
    if seq.dims.m > config.max_rows || seq.dims.n > config.max_cols {
        return Err(Error::CoordOutOfEmbed {
            x: seq.dims.m - 1,
            y: seq.dims.n - 1,
            max_m: config.max_rows,
            max_n: config.max_cols,
        });
    }

    let mut model = Model::init(*config, training.seed)?;
    let midpoints = quantizer.midpoints();
    let candidates = len - u64::from(c);
    let steps = training.effective_steps(candidates);
    let batch = u64::from(training.batch);

    // Held-out windows: a fixed even stride over the candidate range,
    // chosen before any sampling so the set is independent of strategy.
    let holdout: Vec<u64> = {
        let n = (HOLDOUT_WINDOWS as u64).min(candidates);
        (0..n).map(|i| u64::from(c) + i * candidates / n).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(training.seed);
    let mut sampler = Sampler::new(training.sampling, &seq.tokens, c, steps * batch)?;
    let mut grads = alloc::vec![0.0f64; model.param_count()];
    let mut trace = Trace::new();
    let mut dlogits = alloc::vec![0.0f64; config.vocab as usize];
    let mut opt = match training.optimizer {
        OptimizerKind::Sgd => OptState::Sgd,
        OptimizerKind::Adam => OptState::Adam {
            m: alloc::vec![0.0f64; model.param_count()],
            v: alloc::vec![0.0f64; model.param_count()],
            t: 0,
        },
    };

    let eval_every = steps.div_ceil(EVAL_POINTS).max(1);
    let mut report = TrainReport { steps: Vec::new(), evals: Vec::new(), final_top1: 0.0 };

    for step in 0..steps {
        grads.fill(0.0);
        let (mut ce_sum, mut mse_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for _ in 0..batch {
            let pos = sampler.draw(&mut rng) as usize;
            let cl = c as usize;
            let tokens = &seq.tokens[pos - cl..pos];
            let coords = &seq.coords[pos - cl..=pos];
            let target = seq.tokens[pos];
            let logits = net::forward_logits(&model, tokens, coords, Some(&mut trace))?;
            let probs = net::softmax(&logits);
            let parts =
                net::loss_and_dlogits(&probs, target, &midpoints, training.alpha, &mut dlogits);
            ce_sum += parts.ce;
            mse_sum += parts.mse;
            total_sum += parts.total;
            net::backward(&model, tokens, coords, &trace, &dlogits, &mut grads);
        }
        let inv_b = 1.0 / batch as f64;
        let stats = StepStats {
            step,
            ce: ce_sum * inv_b,
            mse: mse_sum * inv_b,
            total: total_sum * inv_b,
        };
        if !stats.total.is_finite() {
            return Err(Error::TrainDiverged { step, loss: stats.total });
        }
        for g in grads.iter_mut() {
            *g *= inv_b;
        }
        opt.apply(model.params_mut(), &grads, training.lr);
        log::debug!(
            "step {} ce {:.4} mse {:.4} total {:.4}",
            stats.step,
            stats.ce,
            stats.mse,
            stats.total
        );
        report.steps.push(stats);

        if (step + 1) % eval_every == 0 || step + 1 == steps {
            let eval = evaluate(&model, seq, &holdout, &midpoints, step + 1)?;
            log::info!(
                "step {} holdout top1 {:.3} argmax-mse {:.5}",
                step + 1,
                eval.top1,
                eval.mse_argmax
            );
            report.evals.push(eval);
        }
    }

    round_to_f32(model.params_mut());
    report.final_top1 = report.evals.last().map_or(0.0, |e| e.top1);
    Ok((model, report))
}

enum OptState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl OptState {
    fn apply(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        match self {
            OptState::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptState::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let t = *t as i32;
                let c1 = 1.0 - libm::pow(B1, f64::from(t));
                let c2 = 1.0 - libm::pow(B2, f64::from(t));
                for i in 0..params.len() {
                    m[i] = B1 * m[i] + (1.0 - B1) * grads[i];
                    v[i] = B2 * v[i] + (1.0 - B2) * grads[i] * grads[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    params[i] -= lr * mhat / (libm::sqrt(vhat) + EPS);
                }
            }
        }
    }
}

fn evaluate(
    model: &Model,
    seq: &TokenSequence,
    holdout: &[u64],
    midpoints: &[f64],
    step: u64,
) -> Result<EvalStats> {
    let c = model.config().context as usize;
    let mut hits = 0usize;
    let mut se = 0.0;
    for &pos in holdout {
        let pos = pos as usize;
        let ctx = Context::new(&seq.tokens[pos - c..pos], &seq.coords[pos - c..=pos])?;
        let p = model.forward(&ctx)?;
        let mut best = 0usize;
        for (i, &pv) in p.iter().enumerate() {
            if pv > p[best] {
                best = i;
            }
        }
        let target = seq.tokens[pos] as usize;
        if best == target {
            hits += 1;
        }
        let e = midpoints[best] - midpoints[target];
        se += e * e;
    }
    let n = holdout.len().max(1) as f64;
    Ok(EvalStats { step, top1: hits as f64 / n, mse_argmax: se / n })
}
