//! Rollout collection under a frozen snapshot, and greedy evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algos::loo_advantages;
use crate::envs::{oracle_plan, action_token, Env, EnvAction, EnvSpec};
use crate::exec::Execution;
use crate::policy::{Observation, Policy, BOS, EOS, SEP};

use super::TrainError;

/// Evaluation episodes use seeds at or above this value; training seeds are
/// drawn below it.
pub const EVAL_SEED_BASE: u64 = 1 << 63;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs: Observation,
    /// BOS-prefixed emission.
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub dists: Vec<Vec<f64>>,
    /// Snapshot value V_old(s_t); 0 when no critic is trained.
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub next_obs: Observation,
    pub parsed: bool,
    pub success: bool,
    pub episode_seed: u64,
}

/// Contiguous steps from one worker; `bootstrap` is V_old of the state after
/// the last step when that step is not terminal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub bootstrap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub ret: f64,
    pub success: bool,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBatch {
    pub steps: Vec<StepRecord>,
    pub segments: Vec<Segment>,
    /// Completed episodes only.
    pub episodes: Vec<EpisodeStat>,
    /// Per-step leave-one-out advantages (group collection only).
    pub loo_advantages: Option<Vec<f64>>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectConfig {
    pub rollout_size: usize,
    pub num_workers: usize,
    pub max_tokens: usize,
    /// Record V_old with the snapshot's value head.
    pub with_value: bool,
    /// Collect groups of this many same-seed complete episodes.
    pub loo_group: Option<usize>,
}

/// Deterministic per-(run, update, worker) stream seed.
pub fn worker_seed(seed: u64, update: u64, worker: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(update.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(worker.wrapping_mul(0x94D0_49BB_1331_11EB))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn shares(total: usize, workers: usize) -> Vec<usize> {
    (0..workers)
        .map(|w| total / workers + usize::from(w < total % workers))
        .collect()
}

struct WorkerOut {
    steps: Vec<StepRecord>,
    bootstrap: f64,
    episodes: Vec<EpisodeStat>,
    loo: Vec<f64>,
}

/// Collects `rollout_size` steps (at least that many under group collection)
/// with `num_workers` independent environments. Every rollout starts fresh
/// episodes; worker outputs are concatenated in worker order.
pub fn collect_rollouts(
    snapshot: &Policy,
    spec: &EnvSpec,
    cfg: &CollectConfig,
    seed: u64,
    update: u64,
    exec: Execution,
) -> Result<RolloutBatch, TrainError> {
    let jobs: Vec<(usize, usize)> = shares(cfg.rollout_size, cfg.num_workers).into_iter().enumerate().collect();
    let outs = exec.map(&jobs, |&(w, share)| {
        let mut rng = ChaCha8Rng::seed_from_u64(worker_seed(seed, update, w as u64));
        match cfg.loo_group {
            None => run_worker(snapshot, spec, cfg, share, &mut rng),
            Some(k) => run_group_worker(snapshot, spec, cfg, share, k, &mut rng),
        }
        .map_err(|e| TrainError::Rollout {
            worker: w,
            update: update as usize,
            source: Box::new(e),
        })
    });
    let mut batch = RolloutBatch::default();
    let mut loo = Vec::new();
    for out in outs {
        let out = out?;
        let start = batch.steps.len();
        batch.steps.extend(out.steps);
        batch.segments.push(Segment {
            start,
            end: batch.steps.len(),
            bootstrap: out.bootstrap,
        });
        batch.episodes.extend(out.episodes);
        loo.extend(out.loo);
    }
    if cfg.loo_group.is_some() {
        batch.loo_advantages = Some(loo);
    }
    Ok(batch)
}

fn training_episode_seed(rng: &mut ChaCha8Rng) -> u64 {
    rng.gen::<u64>() >> 1
}

fn one_step(
    snapshot: &Policy,
    env: &mut Env,
    obs: &Observation,
    cfg: &CollectConfig,
    rng: &mut ChaCha8Rng,
    episode_seed: u64,
) -> Result<StepRecord, TrainError> {
    let em = snapshot.sample_action(obs, rng, cfg.max_tokens)?;
    let value = if cfg.with_value { snapshot.value(obs)? } else { 0.0 };
    let out = env.step_tokens(&em.tokens)?;
    Ok(StepRecord {
        obs: obs.clone(),
        tokens: em.tokens,
        logprobs: em.logprobs,
        dists: em.dists,
        value,
        reward: out.reward,
        done: out.done,
        next_obs: out.next_obs,
        parsed: out.info.parsed,
        success: out.info.success,
        episode_seed,
    })
}

fn run_worker(
    snapshot: &Policy,
    spec: &EnvSpec,
    cfg: &CollectConfig,
    share: usize,
    rng: &mut ChaCha8Rng,
) -> Result<WorkerOut, TrainError> {
    let mut env = Env::new(spec.clone())?;
    let mut steps = Vec::with_capacity(share);
    let mut episodes = Vec::new();
    let mut obs: Option<(Observation, u64)> = None;
    let (mut ret, mut len) = (0.0, 0);
    while steps.len() < share {
        let (o, ep_seed) = match obs.take() {
            Some(x) => x,
            None => {
                let s = training_episode_seed(rng);
                (env.reset(s)?, s)
            }
        };
        let rec = one_step(snapshot, &mut env, &o, cfg, rng, ep_seed)?;
        ret += rec.reward;
        len += 1;
        if rec.done {
            episodes.push(EpisodeStat {
                ret,
                success: rec.success,
                length: len,
            });
            ret = 0.0;
            len = 0;
        } else {
            obs = Some((rec.next_obs.clone(), ep_seed));
        }
        steps.push(rec);
    }
    let bootstrap = match (steps.last(), cfg.with_value) {
        (Some(last), true) if !last.done => snapshot.value(&last.next_obs)?,
        _ => 0.0,
    };
    Ok(WorkerOut {
        steps,
        bootstrap,
        episodes,
        loo: Vec::new(),
    })
}

fn run_group_worker(
    snapshot: &Policy,
    spec: &EnvSpec,
    cfg: &CollectConfig,
    share: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<WorkerOut, TrainError> {
    let mut env = Env::new(spec.clone())?;
    let mut steps = Vec::with_capacity(share + k * spec.horizon);
    let mut episodes = Vec::new();
    let mut loo = Vec::new();
    while steps.len() < share {
        let s = training_episode_seed(rng);
        let mut lens = Vec::with_capacity(k);
        let mut rets = Vec::with_capacity(k);
        for _ in 0..k {
            let mut o = env.reset(s)?;
            let (mut ret, mut len) = (0.0, 0);
            loop {
                let rec = one_step(snapshot, &mut env, &o, cfg, rng, s)?;
                ret += rec.reward;
                len += 1;
                let done = rec.done;
                if done {
                    episodes.push(EpisodeStat {
                        ret,
                        success: rec.success,
                        length: len,
                    });
                } else {
                    o = rec.next_obs.clone();
                }
                steps.push(rec);
                if done {
                    break;
                }
            }
            lens.push(len);
            rets.push(ret);
        }
        let adv = loo_advantages(&rets)?;
        for (a, n) in adv.iter().zip(&lens) {
            loo.extend(std::iter::repeat(*a).take(*n));
        }
    }
    Ok(WorkerOut {
        steps,
        bootstrap: 0.0,
        episodes,
        loo,
    })
}

/// Something that emits a token sequence for an observation.
pub trait Agent: Sync {
    fn act(&self, obs: &Observation, episode_seed: u64, t: usize) -> Result<Vec<usize>, TrainError>;
}

/// Greedy decoding with a policy.
pub struct GreedyAgent<'a> {
    pub policy: &'a Policy,
    pub max_tokens: usize,
}

impl Agent for GreedyAgent<'_> {
    fn act(&self, obs: &Observation, _seed: u64, _t: usize) -> Result<Vec<usize>, TrainError> {
        Ok(self.policy.greedy_action(obs, self.max_tokens)?.tokens)
    }
}

/// Replays the shortest-path plan of a navigation episode.
pub struct OracleAgent {
    pub spec: EnvSpec,
}

impl Agent for OracleAgent {
    fn act(&self, _obs: &Observation, episode_seed: u64, t: usize) -> Result<Vec<usize>, TrainError> {
        let plan = oracle_plan(&self.spec, episode_seed)?;
        let vocab = self.spec.vocabulary();
        let a = plan.get(t).copied().unwrap_or(EnvAction::TurnLeft);
        let tok = action_token(a, &vocab).expect("navigation token");
        Ok(vec![BOS, SEP, tok, EOS])
    }
}

/// Uniformly random well-formed commands.
pub struct RandomAgent {
    pub spec: EnvSpec,
    pub seed: u64,
}

impl Agent for RandomAgent {
    fn act(&self, _obs: &Observation, episode_seed: u64, t: usize) -> Result<Vec<usize>, TrainError> {
        let vocab = self.spec.vocabulary();
        let actions = self.spec.action_tokens();
        let mut rng = ChaCha8Rng::seed_from_u64(worker_seed(self.seed, episode_seed, t as u64));
        let tok = vocab.expect_id(&actions[rng.gen_range(0..actions.len())]);
        Ok(vec![BOS, SEP, tok, EOS])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_length: f64,
}

/// Runs `episodes` evaluation episodes with seeds `EVAL_SEED_BASE + i`.
pub fn evaluate(agent: &dyn Agent, spec: &EnvSpec, episodes: usize, exec: Execution) -> Result<EvalResult, TrainError> {
    let seeds: Vec<u64> = (0..episodes as u64).map(|i| EVAL_SEED_BASE + i).collect();
    let stats = exec.map(&seeds, |&s| -> Result<EpisodeStat, TrainError> {
        let mut env = Env::new(spec.clone())?;
        let mut obs = env.reset(s)?;
        let (mut ret, mut t) = (0.0, 0);
        loop {
            let toks = agent.act(&obs, s, t)?;
            let out = env.step_tokens(&toks)?;
            ret += out.reward;
            t += 1;
            if out.done {
                return Ok(EpisodeStat {
                    ret,
                    success: out.info.success,
                    length: t,
                });
            }
            obs = out.next_obs;
        }
    });
    let stats: Vec<EpisodeStat> = stats.into_iter().collect::<Result<_, _>>()?;
    let n = stats.len().max(1) as f64;
    Ok(EvalResult {
        success_rate: stats.iter().filter(|e| e.success).count() as f64 / n,
        mean_return: stats.iter().map(|e| e.ret).sum::<f64>() / n,
        mean_length: stats.iter().map(|e| e.length as f64).sum::<f64>() / n,
    })
}
