//! Training loop: collection under a frozen snapshot, advantage estimation,
//! epochs of shuffled minibatches with gradient accumulation, value warm-up,
//! cosine learning rate, periodic greedy evaluation, checkpoint and resume.

pub mod checkpoint;
pub mod format;
pub mod optim;
pub mod replay;
pub mod rollout;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algos::{
    compute_gae, kl_penalty, kl_value, mixed_logprob, normalize_advantages, polyak_update, rl4vlm_mixed_logprob,
    rl4vlm_policy_loss, td0_targets, total_loss, value_loss, vldac_policy_loss, AlgoError,
};
use crate::config::{Algorithm, ConfigError, TrainConfig};
use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::envs::EnvError;
use crate::exec::Execution;
use crate::policy::{ActionEmission, Observation, Policy, PolicyError, Vocabulary};

use checkpoint::Checkpoint;
use optim::{scheduled_lr, Adam};
use replay::{ReplayBuffer, Transition};
use rollout::{collect_rollouts, evaluate, CollectConfig, EvalResult, GreedyAgent, RolloutBatch};

pub use rollout::{Agent, OracleAgent, RandomAgent, EVAL_SEED_BASE};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("rollout worker {worker} failed during update {update}: {source}")]
    Rollout {
        worker: usize,
        update: usize,
        source: Box<TrainError>,
    },
    #[error("non-finite loss in update {update}: {detail}")]
    Numerics { update: usize, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Nominal grid position (a multiple of `eval_interval * rollout_size`).
    pub env_steps: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_length: f64,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update: usize,
    pub env_steps: usize,
    pub optimizer_steps: usize,
    pub episodes: usize,
    pub mean_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub parse_failure_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub theta_frozen: bool,
    pub eval: Option<EvalPoint>,
}

#[derive(Debug, Clone, Copy, Default)]
struct LossStats {
    policy: f64,
    value: f64,
    kl: f64,
    grad_norm: f64,
    minibatches: usize,
    steps: usize,
}

/// Interrupts a run after the given update (simulates a killed process:
/// no final checkpoint is written).
#[derive(Debug, Clone, Copy, Default)]
pub struct RunControl {
    pub stop_after_update: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub interrupted: bool,
}

impl RunOutcome {
    pub fn eval_curve(&self) -> Vec<EvalPoint> {
        eval_curve(&self.metrics)
    }

    pub fn final_success_rate(&self) -> Option<f64> {
        final_success_rate(&self.eval_curve())
    }
}

pub fn eval_curve(metrics: &[MetricsRecord]) -> Vec<EvalPoint> {
    metrics.iter().filter_map(|m| m.eval).collect()
}

/// Number of trailing eval points averaged into the final success rate.
pub const FINAL_POINTS: usize = 5;

/// Mean success rate over the last [`FINAL_POINTS`] eval points.
pub fn final_success_rate(curve: &[EvalPoint]) -> Option<f64> {
    if curve.is_empty() {
        return None;
    }
    let tail = &curve[curve.len().saturating_sub(FINAL_POINTS)..];
    Some(tail.iter().map(|p| p.success_rate).sum::<f64>() / tail.len() as f64)
}

/// Training state for one seed.
pub struct Trainer {
    cfg: TrainConfig,
    seed: u64,
    policy: Policy,
    adam: Adam,
    rng: ChaCha8Rng,
    update: usize,
    env_steps: usize,
    optimizer_steps: usize,
    target: Option<Vec<Tensor>>,
    replay: Option<ReplayBuffer>,
    metrics: Vec<MetricsRecord>,
    exec: Execution,
}

const MASTER_STREAM: u64 = 0x6d61_7374_6572;

impl Trainer {
    /// Fresh run: seeded initialization followed by the format warm-start.
    pub fn new(cfg: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        cfg.validate()?;
        let vocab = Arc::new(cfg.env.vocabulary());
        let mut policy = Policy::new(cfg.model.policy_config(), vocab, cfg.env.obs_dims(), seed);
        format::format_warmstart(&mut policy, &cfg.env, &cfg.format, seed)?;
        Ok(Self::from_policy(cfg, seed, policy))
    }

    /// Fresh run around a given initial policy (no warm-start).
    pub fn from_policy(cfg: TrainConfig, seed: u64, policy: Policy) -> Self {
        let adam = Adam::new(policy.params());
        let td = cfg.run.algorithm == Algorithm::TdBaseline;
        let target = td.then(|| {
            policy
                .value_param_indices()
                .into_iter()
                .map(|i| {
                    let t = policy.params().get(i);
                    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("same shape")
                })
                .collect()
        });
        let replay = td.then(|| {
            let cap = if cfg.replay.on_policy {
                cfg.run.rollout_size
            } else {
                cfg.replay.capacity
            };
            ReplayBuffer::new(cap)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(MASTER_STREAM);
        let exec = Execution::from_flag(cfg.run.parallel);
        Self {
            cfg,
            seed,
            policy,
            adam,
            rng,
            update: 0,
            env_steps: 0,
            optimizer_steps: 0,
            target,
            replay,
            metrics: Vec::new(),
            exec,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut Policy {
        &mut self.policy
    }

    pub fn update_index(&self) -> usize {
        self.update
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.metrics
    }

    pub fn replay(&self) -> Option<&ReplayBuffer> {
        self.replay.as_ref()
    }

    pub fn target_network(&self) -> Option<&[Tensor]> {
        self.target.as_deref()
    }

    pub fn set_execution(&mut self, exec: Execution) {
        self.exec = exec;
    }

    pub fn is_finished(&self) -> bool {
        self.env_steps >= self.cfg.run.total_env_steps
    }

    /// Whether the policy (everything outside the value head) is frozen in
    /// the current update.
    pub fn theta_frozen(&self) -> bool {
        self.cfg.run.algorithm.has_critic() && self.update < self.cfg.optim.warmup_updates
    }

    fn collect_config(&self) -> CollectConfig {
        let algo = self.cfg.run.algorithm;
        CollectConfig {
            rollout_size: self.cfg.run.rollout_size,
            num_workers: self.cfg.run.num_workers,
            max_tokens: self.cfg.model.max_tokens,
            with_value: matches!(algo, Algorithm::Vldac | Algorithm::Rl4vlm),
            loo_group: (algo == Algorithm::Loop).then_some(self.cfg.ppo.loo_k),
        }
    }

    /// Collects one rollout with a snapshot of the current policy.
    pub fn collect(&self) -> Result<RolloutBatch, TrainError> {
        let snapshot = self.policy.snapshot();
        collect_rollouts(
            &snapshot,
            &self.cfg.env,
            &self.collect_config(),
            self.seed,
            self.update as u64,
            self.exec,
        )
    }

    /// Step-level advantages and value targets for a PPO-style batch.
    pub fn advantages(&self, batch: &RolloutBatch) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
        let ppo = &self.cfg.ppo;
        let (mut adv, targets) = match &batch.loo_advantages {
            Some(a) => (a.clone(), vec![0.0; a.len()]),
            None => {
                let mut adv = Vec::with_capacity(batch.len());
                let mut tg = Vec::with_capacity(batch.len());
                for seg in &batch.segments {
                    let s = &batch.steps[seg.start..seg.end];
                    let r: Vec<f64> = s.iter().map(|x| x.reward).collect();
                    let v: Vec<f64> = s.iter().map(|x| x.value).collect();
                    let d: Vec<bool> = s.iter().map(|x| x.done).collect();
                    let a = compute_gae(&r, &v, &d, seg.bootstrap, ppo.gamma, ppo.gae_lambda)?;
                    adv.extend(a.advantages);
                    tg.extend(a.targets);
                }
                (adv, tg)
            }
        };
        if ppo.normalize_advantages && adv.len() >= 2 {
            adv = normalize_advantages(&adv)?;
        }
        Ok((adv, targets))
    }

    fn param_mask(&self) -> Vec<bool> {
        let frozen = self.theta_frozen();
        let value_idx = self.policy.value_param_indices();
        (0..self.policy.params().len())
            .map(|i| value_idx.contains(&i) || !frozen)
            .collect()
    }

    fn total_optimizer_steps(&self) -> usize {
        self.cfg.planned_optimizer_steps()
    }

    fn optimizer_step(&mut self, mask: &[bool]) -> f64 {
        let o = self.cfg.optim;
        let lr = scheduled_lr(o.schedule, self.optimizer_steps, self.total_optimizer_steps(), o.lr_init, o.lr_final);
        let norm = self.adam.step(self.policy.params_mut(), lr, mask, o.max_grad_norm);
        self.optimizer_steps += 1;
        norm
    }

    fn current_lr(&self) -> f64 {
        let o = self.cfg.optim;
        scheduled_lr(o.schedule, self.optimizer_steps, self.total_optimizer_steps(), o.lr_init, o.lr_final)
    }

    /// Builds the loss of one minibatch on `tape`. Returns (total, policy,
    /// value, kl) where the last three are plain values for reporting.
    fn minibatch_loss(
        &self,
        tape: &mut Tape,
        items: &[MinibatchItem<'_>],
    ) -> Result<(Var, f64, f64, f64), TrainError> {
        let algo = self.cfg.run.algorithm;
        let ppo = &self.cfg.ppo;
        let with_value = algo.has_critic();
        let p = self.policy.bind(tape);
        let mut new_lps = Vec::with_capacity(items.len());
        let mut old_lps = Vec::with_capacity(items.len());
        let mut mixed_new = Vec::new();
        let mut mixed_old = Vec::new();
        let mut probs = Vec::new();
        let mut old_dists = Vec::new();
        let mut values = Vec::new();
        let mut kl_plain = 0.0;
        for it in items {
            let fw = self
                .policy
                .forward_step(tape, &p, it.obs, it.tokens, with_value, self.cfg.model.stop_grad)?;
            if algo == Algorithm::Rl4vlm {
                let (thought, _) = ActionEmission::spans(it.tokens);
                // Thought tokens occupy logprob slots [0, thought.end - 1).
                let cut = thought.end - 1;
                let m = rl4vlm_mixed_logprob(tape, &fw.token_logps[..cut], &fw.token_logps[cut..], ppo.thought_lambda)?;
                mixed_new.push(m);
                let lt: f64 = it.old_logprobs[..cut].iter().sum();
                let la: f64 = it.old_logprobs[cut..].iter().sum();
                mixed_old.push(mixed_logprob(lt, la, ppo.thought_lambda));
            } else {
                new_lps.push(fw.token_logps.clone());
                old_lps.push(it.old_logprobs.to_vec());
            }
            for (q, d) in fw.probs.iter().zip(it.old_dists) {
                kl_plain += kl_value(d, tape.value(*q), ppo.kl_direction);
            }
            probs.extend_from_slice(&fw.probs);
            old_dists.extend(it.old_dists.iter().cloned());
            if let Some(v) = fw.value {
                values.push(v);
            }
        }
        kl_plain /= probs.len().max(1) as f64;
        let adv: Vec<f64> = items.iter().map(|i| i.advantage).collect();
        let pl = if algo == Algorithm::Rl4vlm {
            rl4vlm_policy_loss(tape, &mixed_new, &mixed_old, &adv, ppo.clip_eps)?
        } else {
            vldac_policy_loss(tape, &new_lps, &old_lps, &adv, ppo.clip_eps)?
        };
        let kl = if ppo.kl_beta > 0.0 {
            Some(kl_penalty(tape, &probs, &old_dists, ppo.kl_direction)?)
        } else {
            None
        };
        let vl = if with_value {
            let targets: Vec<f64> = items.iter().map(|i| i.target).collect();
            Some(value_loss(tape, &values, &targets)?)
        } else {
            None
        };
        let total = total_loss(tape, pl, kl, vl, ppo.value_coef, ppo.kl_beta)?;
        let vl_val = vl.map(|v| tape.scalar_value(v)).unwrap_or(0.0);
        Ok((total, tape.scalar_value(pl), vl_val, kl_plain))
    }

    /// Forward + backward of one minibatch, accumulating `scale * loss`
    /// gradients into the live parameters.
    fn accumulate(&mut self, items: &[MinibatchItem<'_>], scale: f64, stats: &mut LossStats) -> Result<(), TrainError> {
        let mut tape = Tape::new();
        let (total, pl, vl, kl) = self.minibatch_loss(&mut tape, items)?;
        let lv = tape.scalar_value(total);
        if !lv.is_finite() {
            return Err(TrainError::Numerics {
                update: self.update,
                detail: format!(
                    "loss {lv} (policy {pl}, value {vl}, kl {kl}) at optimizer step {}, episode seeds {:?}",
                    self.optimizer_steps,
                    items.iter().map(|i| i.episode_seed).collect::<Vec<_>>()
                ),
            });
        }
        let scaled = tape.scale(total, scale);
        tape.backward(scaled, Some(self.policy.params_mut()))?;
        stats.policy += pl;
        stats.value += vl;
        stats.kl += kl;
        stats.minibatches += 1;
        stats.steps += items.len();
        Ok(())
    }

    /// Runs the configured epochs over a PPO-style batch.
    pub fn ppo_update(&mut self, batch: &RolloutBatch) -> Result<MetricsRecord, TrainError> {
        let (adv, targets) = self.advantages(batch)?;
        let mask = self.param_mask();
        let o = self.cfg.optim;
        let mut stats = LossStats::default();
        let mut norms = Vec::new();
        let n = batch.len();
        for _ in 0..o.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.rng);
            let minibatches: Vec<&[usize]> = order.chunks(o.minibatch_size).collect();
            for group in minibatches.chunks(o.grad_accum) {
                let scale = 1.0 / group.len() as f64;
                for mb in group {
                    let items: Vec<MinibatchItem<'_>> = mb
                        .iter()
                        .map(|&i| {
                            let s = &batch.steps[i];
                            MinibatchItem {
                                obs: &s.obs,
                                tokens: &s.tokens,
                                old_logprobs: &s.logprobs,
                                old_dists: &s.dists,
                                advantage: adv[i],
                                target: targets[i],
                                episode_seed: s.episode_seed,
                            }
                        })
                        .collect();
                    self.accumulate(&items, scale, &mut stats)?;
                }
                norms.push(self.optimizer_step(&mask));
            }
        }
        stats.grad_norm = norms.iter().sum::<f64>() / norms.len().max(1) as f64;
        Ok(self.record(batch, stats))
    }

    /// One-step TD critic with a Polyak target head; the actor uses the
    /// token-level clipped surrogate with the detached TD advantage,
    /// normalized per accumulation group when `normalize_advantages` is set.
    pub fn td_update(&mut self, batch: &RolloutBatch) -> Result<MetricsRecord, TrainError> {
        let buffer = self.replay.as_mut().expect("td_baseline has a replay buffer");
        for s in &batch.steps {
            buffer.push(Transition {
                obs: s.obs.clone(),
                tokens: s.tokens.clone(),
                reward: s.reward,
                done: s.done,
                next_obs: s.next_obs.clone(),
            });
        }
        let snapshot = self.policy.snapshot();
        let mask = self.param_mask();
        let value_idx = self.policy.value_param_indices();
        let o = self.cfg.optim;
        let gamma = self.cfg.ppo.gamma;
        let mut stats = LossStats::default();
        let mut norms = Vec::new();
        let n = batch.len();
        for _ in 0..o.epochs {
            let idx = self.replay.as_ref().unwrap().sample_indices(&mut self.rng, n);
            let minibatches: Vec<&[usize]> = idx.chunks(o.minibatch_size).collect();
            for group in minibatches.chunks(o.grad_accum) {
                let scale = 1.0 / group.len() as f64;
                // Targets, old log-probabilities and advantages of the whole
                // group come from the parameters before its optimizer step.
                let target_policy = self.policy.with_value_head(self.target.as_ref().unwrap());
                let buf = self.replay.as_ref().unwrap();
                let flat: Vec<usize> = group.iter().flat_map(|mb| mb.iter().copied()).collect();
                let mut owned = Vec::with_capacity(flat.len());
                let mut olds = Vec::with_capacity(flat.len());
                let mut y = Vec::with_capacity(flat.len());
                let mut advs = Vec::with_capacity(flat.len());
                for &i in &flat {
                    let t = buf.get(i);
                    let next_v = if t.done { 0.0 } else { target_policy.value(&t.next_obs)? };
                    let yi = td0_targets(&[t.reward], &[next_v], &[t.done], gamma)?[0];
                    advs.push(yi - self.policy.value(&t.obs)?);
                    y.push(yi);
                    olds.push(snapshot.action_logprob(&t.obs, &t.tokens)?);
                    owned.push((t.obs.clone(), t.tokens.clone()));
                }
                if self.cfg.ppo.normalize_advantages && advs.len() >= 2 {
                    advs = normalize_advantages(&advs)?;
                }
                let mut at = 0;
                for mb in group {
                    let items: Vec<MinibatchItem<'_>> = (at..at + mb.len())
                        .map(|k| MinibatchItem {
                            obs: &owned[k].0,
                            tokens: &owned[k].1,
                            old_logprobs: &olds[k].0,
                            old_dists: &olds[k].1,
                            advantage: advs[k],
                            target: y[k],
                            episode_seed: 0,
                        })
                        .collect();
                    at += mb.len();
                    self.accumulate(&items, scale, &mut stats)?;
                }
                norms.push(self.optimizer_step(&mask));
                let live: Vec<&Tensor> = value_idx.iter().map(|&i| self.policy.params().get(i)).collect();
                polyak_update(self.target.as_mut().unwrap(), &live, self.cfg.replay.tau)?;
            }
        }
        stats.grad_norm = norms.iter().sum::<f64>() / norms.len().max(1) as f64;
        Ok(self.record(batch, stats))
    }

    fn record(&self, batch: &RolloutBatch, s: LossStats) -> MetricsRecord {
        let mb = s.minibatches.max(1) as f64;
        let eps = batch.episodes.len();
        MetricsRecord {
            update: self.update,
            env_steps: self.env_steps + batch.len(),
            optimizer_steps: self.optimizer_steps,
            episodes: eps,
            mean_return: (eps > 0).then(|| batch.episodes.iter().map(|e| e.ret).sum::<f64>() / eps as f64),
            success_rate: (eps > 0).then(|| batch.episodes.iter().filter(|e| e.success).count() as f64 / eps as f64),
            parse_failure_rate: batch.steps.iter().filter(|s| !s.parsed).count() as f64 / batch.len().max(1) as f64,
            policy_loss: s.policy / mb,
            value_loss: s.value / mb,
            kl: s.kl / mb,
            grad_norm: s.grad_norm,
            lr: self.current_lr(),
            theta_frozen: self.theta_frozen(),
            eval: None,
        }
    }

    pub fn evaluate(&self, episodes: usize) -> Result<EvalResult, TrainError> {
        let agent = GreedyAgent {
            policy: &self.policy,
            max_tokens: self.cfg.model.max_tokens,
        };
        evaluate(&agent, &self.cfg.env, episodes, self.exec)
    }

    fn eval_every(&self) -> usize {
        self.cfg.run.eval_interval * self.cfg.run.rollout_size
    }

    /// One full update round: collect, optimize, maybe evaluate.
    pub fn step(&mut self) -> Result<MetricsRecord, TrainError> {
        let batch = self.collect()?;
        let mut rec = match self.cfg.run.algorithm {
            Algorithm::TdBaseline => self.td_update(&batch)?,
            _ => self.ppo_update(&batch)?,
        };
        let before = self.env_steps;
        self.env_steps += batch.len();
        let every = self.eval_every();
        if self.env_steps / every > before / every {
            let e = self.evaluate(self.cfg.run.eval_episodes)?;
            rec.eval = Some(EvalPoint {
                env_steps: (self.env_steps / every) * every,
                success_rate: e.success_rate,
                mean_return: e.mean_return,
                mean_length: e.mean_length,
            });
        }
        self.update += 1;
        self.metrics.push(rec.clone());
        Ok(rec)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.cfg.hash(),
            config_text: self.cfg.render(),
            seed: self.seed,
            update: self.update as u64,
            env_steps: self.env_steps as u64,
            optimizer_steps: self.optimizer_steps as u64,
            vocab: self.policy.vocab().tokens().to_vec(),
            params: self.policy.params().clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            target: self.target.clone(),
            replay: self.replay.clone(),
            metrics: self.metrics.iter().map(metrics_line).collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, TrainError> {
        let cfg = TrainConfig::parse(&ck.config_text)?;
        if cfg.hash() != ck.config_hash {
            return Err(TrainError::Checkpoint("config hash does not match embedded config".into()));
        }
        let vocab = Vocabulary::new(&ck.vocab[4..])?;
        if vocab.tokens() != ck.vocab.as_slice() {
            return Err(TrainError::Checkpoint("vocabulary mismatch".into()));
        }
        let policy = Policy::from_params(cfg.model.policy_config(), Arc::new(vocab), cfg.env.obs_dims(), ck.params)?;
        let metrics = ck
            .metrics
            .iter()
            .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Checkpoint(e.to_string())))
            .collect::<Result<Vec<MetricsRecord>, _>>()?;
        let exec = Execution::from_flag(cfg.run.parallel);
        Ok(Self {
            cfg,
            seed: ck.seed,
            policy,
            adam: ck.adam,
            rng: ck.rng,
            update: ck.update as usize,
            env_steps: ck.env_steps as usize,
            optimizer_steps: ck.optimizer_steps as usize,
            target: ck.target,
            replay: ck.replay,
            metrics,
            exec,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = Checkpoint::read_file(path)?;
        let ck = Checkpoint::from_bytes(&bytes, |text| Ok(TrainConfig::parse(text)?.env.obs_dims()))?;
        Self::from_checkpoint(ck)
    }
}

struct MinibatchItem<'a> {
    obs: &'a Observation,
    tokens: &'a [usize],
    old_logprobs: &'a [f64],
    old_dists: &'a [Vec<f64>],
    advantage: f64,
    target: f64,
    episode_seed: u64,
}

pub fn metrics_line(m: &MetricsRecord) -> String {
    serde_json::to_string(m).expect("metrics serialize")
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const DUMP_FILE: &str = "numerics_dump.txt";

/// Output directory of one seed of a named run.
pub fn seed_dir(root: &Path, name: &str, seed: u64) -> PathBuf {
    root.join(name).join(format!("seed_{seed}"))
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), TrainError> {
    let mut f = File::create(path).map_err(|e| TrainError::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| TrainError::io(path, e))?;
    }
    Ok(())
}

fn drive(mut trainer: Trainer, dir: Option<&Path>, control: RunControl) -> Result<RunOutcome, TrainError> {
    let interval = trainer.cfg.run.checkpoint_interval;
    let mut files = None;
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| TrainError::io(d, e))?;
        std::fs::write(d.join(CONFIG_FILE), trainer.cfg.render()).map_err(|e| TrainError::io(d, e))?;
        // Keep exactly the records covered by the current state.
        let lines: Vec<String> = trainer.metrics.iter().map(metrics_line).collect();
        write_lines(&d.join(METRICS_FILE), &lines)?;
        let open = |p: PathBuf| {
            OpenOptions::new()
                .append(true)
                .create(true)
                .open(&p)
                .map_err(|e| TrainError::io(&p, e))
        };
        files = Some((open(d.join(METRICS_FILE))?, open(d.join(TIMING_FILE))?));
    }
    let started = Instant::now();
    while !trainer.is_finished() {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                if let (Some(d), TrainError::Numerics { .. }) = (dir, &e) {
                    let _ = std::fs::write(
                        d.join(DUMP_FILE),
                        format!("{e}\nupdate {}\nenv_steps {}\n", trainer.update, trainer.env_steps),
                    );
                    let _ = trainer.to_checkpoint().save(&d.join("numerics_state.bin"));
                }
                return Err(e);
            }
        };
        if let (Some(d), Some((mf, tf))) = (dir, files.as_mut()) {
            writeln!(mf, "{}", metrics_line(&rec)).map_err(|e| TrainError::io(d, e))?;
            mf.flush().map_err(|e| TrainError::io(d, e))?;
            writeln!(
                tf,
                "{{\"update\":{},\"wall_seconds\":{:.3}}}",
                rec.update,
                started.elapsed().as_secs_f64()
            )
            .map_err(|e| TrainError::io(d, e))?;
            if interval > 0 && trainer.update % interval == 0 && !trainer.is_finished() {
                trainer.to_checkpoint().save(&d.join(CHECKPOINT_FILE))?;
            }
        }
        if control.stop_after_update == Some(rec.update) {
            return Ok(RunOutcome {
                metrics: trainer.metrics,
                interrupted: true,
            });
        }
    }
    if let Some(d) = dir {
        trainer.to_checkpoint().save(&d.join(CHECKPOINT_FILE))?;
    }
    Ok(RunOutcome {
        metrics: trainer.metrics,
        interrupted: false,
    })
}

/// Trains one seed from scratch, writing artifacts to `dir` when given.
pub fn run_seed(cfg: &TrainConfig, seed: u64, dir: Option<&Path>, control: RunControl) -> Result<RunOutcome, TrainError> {
    drive(Trainer::new(cfg.clone(), seed)?, dir, control)
}

/// Continues the run in `dir` from its latest checkpoint; metrics written
/// after that checkpoint are discarded and regenerated.
pub fn resume_seed(dir: &Path, control: RunControl) -> Result<RunOutcome, TrainError> {
    let trainer = Trainer::load(&dir.join(CHECKPOINT_FILE))?;
    drive(trainer, Some(dir), control)
}

/// Reads a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display()))))
        .collect()
}
