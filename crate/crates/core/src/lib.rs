//! Decoupled token/step actor-critic training on miniature token-action
//! environments.
//!
//! * [`diffcore`]: tensors, a reverse-mode tape, finite-difference checks.
//! * [`policy`]: backbone encoder, autoregressive token head, value head.
//! * [`envs`]: navigation, card-arithmetic and shop environments.
//! * [`algos`]: advantage estimators and losses.
//! * [`trainer`]: rollouts, updates, evaluation, checkpoints.
//! * [`config`], [`expcli`]: configuration and the experiment commands.

pub mod algos;
pub mod config;
pub mod diffcore;
pub mod envs;
pub mod exec;
pub mod expcli;
pub mod policy;
pub mod trainer;
