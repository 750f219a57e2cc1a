//! Supervised warm-start on well-formed emissions.
//!
//! A freshly initialized token head almost never produces `... SEP action EOS`
//! by chance, so RL from scratch sees only parse failures. Before RL, the
//! policy is fit by maximum likelihood to synthetic emissions: a random
//! number of random thought tokens, SEP, one uniformly chosen command, EOS,
//! on states reached by short random walks. The target carries no task
//! information, so any task competence still has to come from RL.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::FormatConfig;
use crate::diffcore::Tape;
use crate::envs::{EnvSpec, Env, THOUGHT_TOKENS};
use crate::policy::{Observation, Policy, BOS, EOS, SEP};

use super::optim::Adam;
use super::TrainError;

const FORMAT_STREAM: u64 = 0x666f_726d_6174;

fn sample_state(env: &mut Env, rng: &mut ChaCha8Rng, actions: &[usize]) -> Result<Observation, TrainError> {
    let mut obs = env.reset(rng.gen::<u64>() >> 1)?;
    let walk = rng.gen_range(0..=env.spec().horizon / 2);
    for _ in 0..walk {
        let a = actions[rng.gen_range(0..actions.len())];
        let out = env.step_tokens(&[BOS, SEP, a, EOS])?;
        if out.done {
            break;
        }
        obs = out.next_obs;
    }
    Ok(obs)
}

const GRAMMAR_PARAMS: [&str; 6] = ["head.tok_emb", "head.pos_emb", "head.z_b", "head.c_b", "head.out_w", "head.out_b"];

/// Fits `policy` to the emission grammar; returns the final mean token NLL.
pub fn format_warmstart(policy: &mut Policy, spec: &EnvSpec, cfg: &FormatConfig, seed: u64) -> Result<f64, TrainError> {
    if cfg.steps == 0 {
        return Ok(f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ FORMAT_STREAM);
    let mut env = Env::new(spec.clone())?;
    let vocab = policy.vocab().clone();
    let thoughts: Vec<usize> = THOUGHT_TOKENS.iter().map(|t| vocab.expect_id(t)).collect();
    let actions: Vec<usize> = spec.action_tokens().iter().map(|t| vocab.expect_id(t)).collect();
    let mut adam = Adam::new(policy.params());
    // Targets ignore the state, so training the recurrence here would teach
    // the head to ignore it too. Only embeddings, gate biases and the readout
    // adapt.
    let mask: Vec<bool> = policy.params().names().iter().map(|n| GRAMMAR_PARAMS.contains(&n.as_str())).collect();
    let mut last = f64::NAN;
    for _ in 0..cfg.steps {
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let obs = sample_state(&mut env, &mut rng, &actions)?;
            let k = rng.gen_range(cfg.thought_min..=cfg.thought_max);
            let mut tokens = vec![BOS];
            tokens.extend((0..k).map(|_| thoughts[rng.gen_range(0..thoughts.len())]));
            tokens.push(SEP);
            tokens.push(actions[rng.gen_range(0..actions.len())]);
            tokens.push(EOS);
            let mut tape = Tape::new();
            let p = policy.bind(&mut tape);
            let fw = policy.forward_step(&mut tape, &p, &obs, &tokens, false, true)?;
            let n = fw.token_logps.len() as f64;
            let s = tape.add_all(&fw.token_logps)?;
            let loss = tape.scale(s, -1.0 / (n * cfg.batch as f64));
            total += tape.scalar_value(loss);
            tape.backward(loss, Some(policy.params_mut()))?;
        }
        adam.step(policy.params_mut(), cfg.lr, &mask, 1.0);
        last = total;
    }
    Ok(last)
}
