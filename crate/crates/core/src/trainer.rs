//! The offline training loop: double-DQN targets from prioritized
//! minibatches, Adam updates, periodic target-network synchronization,
//! and validation-driven checkpointing.
//!
//! Offline means offline: the buffer is filled once from logged
//! transitions and no environment interaction happens during training.
//! Everything downstream of the seed is deterministic — sampling uses a
//! dedicated ChaCha stream, validation rollouts use their own streams,
//! and the log/checkpoint bytes are reproducible bit for bit.
//!
//! Checkpoint selection: the best simulator mean return when rollouts
//! are configured, otherwise the best validation TD error, otherwise the
//! final parameters. On divergence (non-finite loss, exploding Q, or a
//! poisoned optimizer step) the last good parameters — best-so-far, or
//! the latest interval snapshot — are written before the error returns.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{simulate_policy, RolloutPolicy};
use crate::mdp::{Normalizer, TransitionSet, ACTION_COUNT, STATE_DIM};
use crate::qnet::{save_checkpoint, Adam, AdamConfig, LossKind, NetConfig, QNet};
use crate::replay::PrioritizedReplay;
use crate::seeding::{stream_rng, streams};
use crate::synth::ParamRanges;

/// Prioritized-replay exponents and the β annealing schedule (linear
/// from `beta_start` at step 1 to `beta_end` at the final step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerSchedule {
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eps: f64,
}

impl Default for PerSchedule {
    fn default() -> Self {
        PerSchedule {
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            eps: 1e-3,
        }
    }
}

/// Simulator-based validation: greedy rollouts on freshly sampled
/// synthetic patients. Uses its own master seed so the rollout patients
/// do not shift when training hyperparameters change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimValidation {
    pub ranges: ParamRanges,
    pub rollouts: u32,
    pub horizon_hours: u64,
    pub master_seed: u64,
}

/// Everything the training loop needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    /// Discount factor. 0.99 keeps credit assignment useful across a
    /// multi-day stay on an hourly grid; recorded in the provenance file.
    pub gamma: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub target_sync_interval: u64,
    pub adam: AdamConfig,
    pub loss: LossKind,
    pub per: PerSchedule,
    pub seed: u64,
    /// Validate (and snapshot) every this many steps; 0 → only at the end.
    pub eval_interval: u64,
    pub checkpoint_dir: PathBuf,
    /// Abort when |mean Q| exceeds this (catches silent explosions).
    pub divergence_q_limit: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            gamma: 0.99,
            batch_size: 32,
            total_steps: 100_000,
            target_sync_interval: 1000,
            adam: AdamConfig::default(),
            loss: LossKind::default(),
            per: PerSchedule::default(),
            seed: 0,
            eval_interval: 1000,
            checkpoint_dir: PathBuf::from("out/train"),
            divergence_q_limit: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0,1)", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.target_sync_interval == 0 {
            return Err(Error::Config("target_sync_interval must be ≥ 1".into()));
        }
        for (name, v) in [
            ("per.alpha", self.per.alpha),
            ("per.beta_start", self.per.beta_start),
            ("per.beta_end", self.per.beta_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0,1]")));
            }
        }
        if !self.divergence_q_limit.is_finite() || self.divergence_q_limit <= 0.0 {
            return Err(Error::Config("divergence_q_limit must be positive".into()));
        }
        Ok(())
    }

    fn beta_at(&self, step: u64) -> f64 {
        if self.total_steps <= 1 {
            return self.per.beta_end;
        }
        let frac = (step - 1) as f64 / (self.total_steps - 1) as f64;
        self.per.beta_start + (self.per.beta_end - self.per.beta_start) * frac
    }
}

/// One network-ready transition: the state is already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTransition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    /// `None` marks a terminal transition (no bootstrap).
    pub next_state: Option<Vec<f64>>,
}

/// A transition dataset in network coordinates, with the normalizer that
/// produced it (when it came from the pipeline) kept for checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub dim: usize,
    pub actions: usize,
    pub entries: Vec<TrainTransition>,
    pub normalizer: Option<Normalizer>,
}

impl TrainData {
    /// Normalizes a pipeline transition set into network coordinates.
    pub fn from_transition_set(set: &TransitionSet) -> Result<Self> {
        if set.transitions.is_empty() {
            return Err(Error::InsufficientData { have: 0, need: 1 });
        }
        let entries = set
            .transitions
            .iter()
            .map(|t| TrainTransition {
                state: set.normalizer.normalize(&t.state).to_vec(),
                action: t.action.index(),
                reward: t.reward,
                next_state: t.next_state.as_ref().map(|s| set.normalizer.normalize(s).to_vec()),
            })
            .collect();
        Ok(TrainData {
            dim: STATE_DIM,
            actions: ACTION_COUNT,
            entries,
            normalizer: Some(set.normalizer.clone()),
        })
    }

    /// Direct construction for small experiments and tests.
    pub fn from_parts(dim: usize, actions: usize, entries: Vec<TrainTransition>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InsufficientData { have: 0, need: 1 });
        }
        for t in &entries {
            if t.state.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: t.state.len(),
                });
            }
            if let Some(next) = &t.next_state {
                if next.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: next.len(),
                    });
                }
            }
            if t.action >= actions {
                return Err(Error::DimensionMismatch {
                    expected: actions,
                    got: t.action,
                });
            }
            if !t.reward.is_finite() || !t.state.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("training transition".into()));
            }
        }
        Ok(TrainData {
            dim,
            actions,
            entries,
            normalizer: None,
        })
    }
}

/// Double-DQN targets: the online network selects the bootstrap action,
/// the target network evaluates it. Terminal transitions and γ = 0 give
/// exactly y = r.
pub fn compute_target(
    online: &QNet,
    target: &QNet,
    batch: &[&TrainTransition],
    gamma: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.len());
    for t in batch {
        let y = match (&t.next_state, gamma == 0.0) {
            (None, _) | (_, true) => t.reward,
            (Some(next), false) => {
                let q_online = online.forward(next)?;
                let best = crate::qnet::argmax(&q_online);
                let q_target = target.forward(next)?;
                t.reward + gamma * q_target[best]
            }
        };
        out.push(y);
    }
    Ok(out)
}

/// Outcome of one validation pass. `note` carries soft failures (for
/// example an empty validation set) without aborting training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: u64,
    pub mean_abs_td: Option<f64>,
    pub sim_mean_return: Option<f64>,
    pub note: Option<String>,
}

impl ValRecord {
    /// The scalar used for checkpoint selection, if any: simulator mean
    /// return preferred (higher better), else negated TD error so that
    /// "higher is better" holds uniformly.
    fn selection_score(&self) -> Option<f64> {
        self.sim_mean_return.or(self.mean_abs_td.map(|td| -td))
    }
}

/// Measures the current networks: mean |TD error| over the validation
/// transitions, plus greedy-rollout mean return when a simulator is
/// configured. Failures are reported inside the record, not as errors.
pub fn validate(
    online: &QNet,
    target: &QNet,
    cfg: &TrainConfig,
    step: u64,
    val: Option<&TrainData>,
    sim: Option<&SimValidation>,
    normalizer: Option<&Normalizer>,
) -> ValRecord {
    let mut record = ValRecord {
        step,
        mean_abs_td: None,
        sim_mean_return: None,
        note: None,
    };
    let mut notes: Vec<String> = Vec::new();

    match val {
        None => {}
        Some(data) if data.entries.is_empty() => notes.push("empty validation set".into()),
        Some(data) => {
            let refs: Vec<&TrainTransition> = data.entries.iter().collect();
            let mut sum = 0.0;
            let mut ok = true;
            match compute_target(online, target, &refs, cfg.gamma) {
                Err(e) => {
                    ok = false;
                    notes.push(format!("validation targets failed: {e}"));
                }
                Ok(ys) => {
                    for (t, y) in refs.iter().zip(&ys) {
                        match online.forward(&t.state) {
                            Ok(q) => sum += (q[t.action] - y).abs(),
                            Err(e) => {
                                ok = false;
                                notes.push(format!("validation forward failed: {e}"));
                                break;
                            }
                        }
                    }
                }
            }
            if ok {
                record.mean_abs_td = Some(sum / data.entries.len() as f64);
            }
        }
    }

    if let Some(sim) = sim {
        match normalizer {
            None => notes.push("simulator validation needs pipeline normalization".into()),
            Some(norm) => {
                let rolled = simulate_policy(
                    RolloutPolicy::Greedy { net: online, norm },
                    &sim.ranges,
                    sim.rollouts,
                    sim.horizon_hours,
                    cfg.gamma,
                    sim.master_seed,
                );
                match rolled {
                    Ok(summary) => record.sim_mean_return = Some(summary.mean_return),
                    Err(e) => notes.push(format!("simulator validation failed: {e}")),
                }
            }
        }
    }

    if !notes.is_empty() {
        record.note = Some(notes.join("; "));
    }
    record
}

/// What `train` leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps_completed: u64,
    /// Step whose parameters were checkpointed (0 = initialization).
    pub checkpoint_step: u64,
    /// Selection score of the checkpointed parameters, when validation ran.
    pub checkpoint_score: Option<f64>,
    pub final_loss: Option<f64>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub validations: Vec<ValRecord>,
}

/// Trains with a per-step probe (used by tests to watch the target
/// network). The probe sees the step number just completed and both
/// networks after any sync for that step.
pub fn train_with_probe(
    cfg: &TrainConfig,
    data: &TrainData,
    val: Option<&TrainData>,
    sim: Option<&SimValidation>,
    mut probe: impl FnMut(u64, &QNet, &QNet),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.dim != cfg.net.state_dim || data.actions != cfg.net.actions {
        return Err(Error::DimensionMismatch {
            expected: cfg.net.state_dim,
            got: data.dim,
        });
    }
    if let Some(v) = val {
        if v.dim != data.dim || v.actions != data.actions {
            return Err(Error::DimensionMismatch {
                expected: data.dim,
                got: v.dim,
            });
        }
    }

    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    let checkpoint_path = cfg.checkpoint_dir.join("model.ckpt");
    let log_path = cfg.checkpoint_dir.join("training_log.csv");
    let config_path = cfg.checkpoint_dir.join("train_config.json");
    std::fs::write(
        &config_path,
        serde_json::to_string_pretty(cfg).map_err(|e| Error::format(&config_path, e.to_string()))?,
    )?;

    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log, "step,loss,mean_q,beta,lr,val_metric")?;

    let mut online = QNet::init(cfg.net, cfg.seed, streams::INIT)?;
    let mut target = QNet::init(cfg.net, cfg.seed, streams::INIT)?;
    let mut adam = Adam::new(online.param_count(), cfg.adam);
    let mut grads = vec![0.0; online.param_count()];
    let normalizer = data
        .normalizer
        .clone()
        .unwrap_or_else(|| Normalizer::identity(data.dim));

    // Fill the buffer once — the offline regime.
    let mut buffer: PrioritizedReplay<usize> =
        PrioritizedReplay::new(data.entries.len(), cfg.per.alpha, cfg.per.eps)?;
    for idx in 0..data.entries.len() {
        buffer.push(idx)?;
    }
    let mut rng = stream_rng(cfg.seed, streams::BATCH);

    let mut validations: Vec<ValRecord> = Vec::new();
    // (step, selection score, params) of the best validation so far.
    let mut best: Option<(u64, f64, Vec<f64>)> = None;
    // Fallback for divergence aborts: params at the last interval boundary.
    let mut snapshot: (u64, Vec<f64>) = (0, online.params.clone());
    let mut final_loss = None;

    let run_validation =
        |step: u64, online: &QNet, target: &QNet, best: &mut Option<(u64, f64, Vec<f64>)>| {
            let record = validate(online, target, cfg, step, val, sim, Some(&normalizer));
            if let Some(note) = &record.note {
                log::warn!("validation at step {step}: {note}");
            }
            let score = record.selection_score();
            if let Some(s) = score {
                let improved = best.as_ref().is_none_or(|(_, b, _)| s > *b);
                if improved {
                    *best = Some((step, s, online.params.clone()));
                }
            }
            (record, score)
        };

    for step in 1..=cfg.total_steps {
        let beta = cfg.beta_at(step);
        let batch = buffer.sample(cfg.batch_size, beta, &mut rng)?;
        let entries: Vec<&TrainTransition> =
            batch.indices.iter().map(|&slot| &data.entries[*buffer.get(slot)]).collect();

        let step_result: Result<(f64, f64)> = (|| {
            let targets = compute_target(&online, &target, &entries, cfg.gamma)?;
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut loss_sum = 0.0;
            let mut q_sum = 0.0;
            let mut td_errors = Vec::with_capacity(entries.len());
            for ((t, &y), &w) in entries.iter().zip(&targets).zip(&batch.weights) {
                let cache = online.forward_cached(&t.state)?;
                let td = cache.q[t.action] - y;
                td_errors.push(td);
                loss_sum += w * cfg.loss.loss(td);
                q_sum += cache.q[t.action];
                online.backward_td(&cache, t.action, td, w, cfg.loss, &mut grads)?;
            }
            let inv_b = 1.0 / cfg.batch_size as f64;
            grads.iter_mut().for_each(|g| *g *= inv_b);
            online.apply_update(&mut adam, &grads)?;
            buffer.update_priorities(&batch.indices, &td_errors)?;
            Ok((loss_sum * inv_b, q_sum * inv_b))
        })();

        let (loss, mean_q) = match step_result {
            Ok((loss, mean_q)) if loss.is_finite() && mean_q.abs() <= cfg.divergence_q_limit => {
                (loss, mean_q)
            }
            other => {
                let detail = match other {
                    Ok((loss, mean_q)) => format!("loss {loss}, mean_q {mean_q}"),
                    Err(e) => e.to_string(),
                };
                log::error!("divergence at step {step}: {detail}");
                let (good_step, good_params) = match &best {
                    Some((s, _, p)) => (*s, p.clone()),
                    None => (snapshot.0, snapshot.1.clone()),
                };
                let rescue = QNet::from_params(cfg.net, good_params)?;
                save_checkpoint(&checkpoint_path, &rescue, &normalizer)?;
                log.flush()?;
                log::error!("wrote last good parameters (step {good_step}) to {checkpoint_path:?}");
                return Err(Error::Divergence { step });
            }
        };
        final_loss = Some(loss);

        if step % cfg.target_sync_interval == 0 {
            target.copy_from(&online)?;
        }

        let validated_now = cfg.eval_interval != 0 && step % cfg.eval_interval == 0;
        let val_metric = if validated_now {
            snapshot = (step, online.params.clone());
            let (record, score) = run_validation(step, &online, &target, &mut best);
            validations.push(record);
            score
        } else {
            None
        };

        let metric_field = val_metric.map(|m| m.to_string()).unwrap_or_default();
        writeln!(
            log,
            "{step},{loss},{mean_q},{beta},{lr},{metric_field}",
            lr = cfg.adam.lr
        )?;

        probe(step, &online, &target);
    }

    // Final validation (covers eval_interval = 0 and non-multiple ends).
    let already = validations.last().map(|r| r.step) == Some(cfg.total_steps);
    if !already && (val.is_some() || sim.is_some()) && cfg.total_steps > 0 {
        let (record, _) = run_validation(cfg.total_steps, &online, &target, &mut best);
        validations.push(record);
    }

    let (checkpoint_step, checkpoint_score, chosen) = match &best {
        Some((s, score, p)) => (*s, Some(*score), QNet::from_params(cfg.net, p.clone())?),
        None => {
            let mut clone = QNet::from_params(cfg.net, online.params.clone())?;
            clone.copy_from(&online)?;
            (cfg.total_steps, None, clone)
        }
    };
    save_checkpoint(&checkpoint_path, &chosen, &normalizer)?;
    log.flush()?;

    Ok(TrainReport {
        steps_completed: cfg.total_steps,
        checkpoint_step,
        checkpoint_score,
        final_loss,
        checkpoint_path,
        log_path,
        validations,
    })
}

/// Offline training: see the module docs. Returns the checkpoint and log
/// paths; the checkpoint holds the best-validation parameters when any
/// validation was configured, otherwise the final parameters.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    val: Option<&TrainData>,
    sim: Option<&SimValidation>,
) -> Result<TrainReport> {
    train_with_probe(cfg, data, val, sim, |_, _, _| {})
}
