//! Epoch loops: act-only warm-up, then joint (or single-branch) training.

use crate::corpus::{batchify, Example};
use crate::error::{Error, Result};
use crate::model::{Cogen, LossMode};
use crate::tensor::{Adam, Graph, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: LossMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Main,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Main => "main",
        }
    }
}

/// Batch-averaged losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub act_loss: f64,
    pub response_loss: f64,
    pub total: f64,
    pub sigma2_act: f64,
    pub sigma2_resp: f64,
}

impl EpochLog {
    pub fn to_line(&self, mode: LossMode) -> String {
        let mut s = format!(
            "{}\t{}\t{}\tL_a={:.6}\tL_r={:.6}\ttotal={:.6}",
            self.phase.as_str(),
            self.epoch,
            mode.label(),
            self.act_loss,
            self.response_loss,
            self.total
        );
        if mode == LossMode::Uncertainty && self.phase == Phase::Main {
            s.push_str(&format!("\tsigma2_a={:.6}\tsigma2_r={:.6}", self.sigma2_act, self.sigma2_resp));
        }
        s
    }
}

/// Where training stands; stored in checkpoints so a run can resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Progress {
    pub warmup_done: usize,
    pub epochs_done: usize,
}

/// Batch order for one epoch depends only on the run seed and the epoch.
pub fn epoch_seed(seed: u64, phase: Phase, epoch: usize) -> u64 {
    let tag = match phase {
        Phase::Warmup => 0x5741_524d,
        Phase::Main => 0x4d41_494e,
    };
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag ^ (epoch as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

pub fn run_epoch<T: Scalar>(
    model: &Cogen,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    examples: &[Example],
    batch_size: usize,
    seed: u64,
    mode: LossMode,
) -> Result<(f64, f64, f64)> {
    if examples.is_empty() {
        return Err(Error::contract("no training examples"));
    }
    let batches = batchify(examples, batch_size, seed)?;
    let (mut a, mut r, mut t) = (0.0, 0.0, 0.0);
    for b in &batches {
        let s = model.train_step(store, adam, &b.rows(), mode)?;
        a += s.act_loss;
        r += s.response_loss;
        t += s.total;
    }
    let n = batches.len() as f64;
    Ok((a / n, r / n, t / n))
}

/// Runs the remaining warm-up and main epochs after `progress`, calling
/// `on_epoch` after each. Returning `false` from the callback stops early.
pub fn train<T: Scalar>(
    model: &Cogen,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    examples: &[Example],
    cfg: &TrainConfig,
    progress: &mut Progress,
    mut on_epoch: impl FnMut(&EpochLog, &Cogen, &ParamStore<T>) -> Result<bool>,
) -> Result<()> {
    while progress.warmup_done < cfg.warmup_epochs {
        let e = progress.warmup_done;
        let seed = epoch_seed(cfg.seed, Phase::Warmup, e);
        let (a, _, t) = run_epoch(model, store, adam, examples, cfg.batch_size, seed, LossMode::ActOnly)?;
        progress.warmup_done += 1;
        let (s1, s2) = model.sigmas(store);
        let log = EpochLog {
            phase: Phase::Warmup,
            epoch: e,
            act_loss: a,
            response_loss: f64::NAN,
            total: t,
            sigma2_act: s1,
            sigma2_resp: s2,
        };
        if !on_epoch(&log, model, store)? {
            return Ok(());
        }
    }
    while progress.epochs_done < cfg.epochs {
        let e = progress.epochs_done;
        let seed = epoch_seed(cfg.seed, Phase::Main, e);
        let (a, r, t) = run_epoch(model, store, adam, examples, cfg.batch_size, seed, cfg.mode)?;
        progress.epochs_done += 1;
        let (s1, s2) = model.sigmas(store);
        let log = EpochLog {
            phase: Phase::Main,
            epoch: e,
            act_loss: a,
            response_loss: r,
            total: t,
            sigma2_act: s1,
            sigma2_resp: s2,
        };
        if !on_epoch(&log, model, store)? {
            return Ok(());
        }
    }
    Ok(())
}

/// Fraction of teacher-forced steps whose argmax equals the gold next
/// token, for acts and responses.
pub fn teacher_forced_accuracy<T: Scalar>(
    model: &Cogen,
    store: &ParamStore<T>,
    examples: &[Example],
) -> Result<(f64, f64)> {
    let argmax_hits = |g: &Graph<'_, T>, logits: crate::tensor::Var, targets: &[u32]| -> usize {
        let v = g.shape(logits)[1];
        g.value(logits)
            .chunks(v)
            .zip(targets)
            .filter(|(row, &t)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, row[0]), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
                best.0 as u32 == t
            })
            .count()
    };
    let (mut ah, mut an, mut rh, mut rn) = (0, 0, 0, 0);
    for ex in examples {
        let mut g = Graph::new();
        let dual = model.encode_shared(&mut g, store, &ex.source, &ex.act_mask)?;
        let a_in = &ex.acts[..ex.acts.len() - 1];
        let act = model.act_forward(&mut g, store, &dual, &ex.belief, a_in)?;
        ah += argmax_hits(&g, act.logits, &ex.acts[1..]);
        an += a_in.len();
        let r_in = &ex.response[..ex.response.len() - 1];
        let resp = model.response_forward(&mut g, store, &dual, act.hidden, r_in)?;
        rh += argmax_hits(&g, resp.logits, &ex.response[1..]);
        rn += r_in.len();
    }
    Ok((ah as f64 / an.max(1) as f64, rh as f64 / rn.max(1) as f64))
}
