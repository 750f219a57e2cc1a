//! Operator surface: sweeps over config grids, curve aggregation for
//! plotting, two-group comparisons, checkpoint evaluation and the
//! finite-difference suite over every loss.
//!
//! Standard deviations are population (divide-by-N) throughout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Value;

use crate::algos::{
    self, clipped_objective, kl_penalty, loo_advantages, ratio, rl4vlm_mixed_logprob, rl4vlm_policy_loss, td0_targets,
    total_loss, value_loss, vldac_policy_loss, AlgoError, KlDirection,
};
use crate::config::{ConfigError, TrainConfig};
use crate::diffcore::{finite_diff_check, DiffError, Tape, Tensor, Var};
use crate::envs::{EnvKind, EnvSpec};
use crate::exec::Execution;
use crate::trainer::rollout::{evaluate, EvalResult, GreedyAgent};
use crate::trainer::{
    final_success_rate, read_metrics, run_seed, EvalPoint, RunControl, TrainError, Trainer, FINAL_POINTS, METRICS_FILE,
};

pub const OUTPUT_ROOT_VAR: &str = "VLDAC_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const SUMMARY_FILE: &str = "summary.tsv";
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("eval grid mismatch in {run}: {detail}")]
    Alignment { run: String, detail: String },
    #[error("no runs found under {0}")]
    NoRuns(String),
    #[error("{0}")]
    Incompatible(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> ExpError {
    ExpError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Output root from `VLDAC_OUTPUT_ROOT`, else `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

// ---------------------------------------------------------------- train / eval

/// Trains every seed listed in the config under `root/<run.name>/seed_N`.
/// With `resume`, seeds that already have a checkpoint continue from it.
pub fn run_train(cfg: &TrainConfig, root: &Path, resume: bool) -> Result<Vec<(u64, Option<f64>)>, ExpError> {
    let mut out = Vec::new();
    for &seed in &cfg.run.seeds {
        let dir = crate::trainer::seed_dir(root, &cfg.run.name, seed);
        let ckpt = dir.join(crate::trainer::CHECKPOINT_FILE);
        let outcome = if resume && ckpt.exists() {
            crate::trainer::resume_seed(&dir, RunControl::default())?
        } else {
            run_seed(cfg, seed, Some(&dir), RunControl::default())?
        };
        out.push((seed, final_success_rate(&outcome.eval_curve())));
    }
    Ok(out)
}

/// Greedy evaluation of a checkpoint on `env`. The checkpoint's own env
/// settings are used when `env` names the same kind; otherwise that kind's
/// defaults, which must match the policy's observation layout and vocabulary.
pub fn run_eval(checkpoint: &Path, env: &str, episodes: usize) -> Result<EvalResult, ExpError> {
    let trainer = Trainer::load(checkpoint)?;
    let kind = EnvKind::parse(env).ok_or_else(|| ExpError::Incompatible(format!("unknown environment `{env}`")))?;
    let own = &trainer.config().env;
    let spec = if own.kind == kind { own.clone() } else { EnvSpec::defaults(kind) };
    let policy = trainer.policy();
    if spec.obs_dims() != policy.dims() {
        return Err(ExpError::Incompatible(format!(
            "{} observations {:?} do not match the policy's {:?}",
            kind.name(),
            spec.obs_dims(),
            policy.dims()
        )));
    }
    let vocab = spec.vocabulary();
    if vocab.tokens() != policy.vocab().tokens() {
        return Err(ExpError::Incompatible(format!(
            "{} uses a different token vocabulary than the checkpoint",
            kind.name()
        )));
    }
    let agent = GreedyAgent {
        policy,
        max_tokens: trainer.config().model.max_tokens,
    };
    Ok(evaluate(&agent, &spec, episodes, Execution::from_flag(trainer.config().run.parallel))?)
}

// ---------------------------------------------------------------- manifests

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    sweep: SweepSection,
    #[serde(default)]
    cell: Vec<CellSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    name: String,
    /// Base config file, relative to the manifest.
    #[serde(default)]
    base: Option<String>,
    /// Inline base config (sections as in a config file).
    #[serde(default)]
    config: Option<toml::Table>,
    seeds: Vec<u64>,
    #[serde(default = "one")]
    workers: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellSection {
    label: String,
    #[serde(default)]
    overrides: BTreeMap<String, Value>,
    /// Each key expands the cell into one cell per listed value.
    #[serde(default)]
    grid: BTreeMap<String, Vec<Value>>,
}

/// One fully resolved configuration of a sweep.
#[derive(Debug, Clone)]
pub struct ManifestCell {
    pub label: String,
    pub overrides: Vec<(String, Value)>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentManifest {
    pub name: String,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub cells: Vec<ManifestCell>,
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl ExperimentManifest {
    /// Parses a manifest. `base_dir` resolves a relative `base` path.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ExpError> {
        let file: ManifestFile = toml::from_str(text).map_err(|e| ExpError::Manifest(e.message().to_string()))?;
        let s = file.sweep;
        if s.seeds.is_empty() {
            return Err(ExpError::Manifest("sweep.seeds is empty".into()));
        }
        if file.cell.is_empty() {
            return Err(ExpError::Manifest("no [[cell]] entries".into()));
        }
        let base_text = match (&s.base, &s.config) {
            (Some(_), Some(_)) => return Err(ExpError::Manifest("give either sweep.base or sweep.config, not both".into())),
            (Some(p), None) => {
                let path = base_dir.join(p);
                std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?
            }
            (None, Some(t)) => toml::to_string(t).map_err(|e| ExpError::Manifest(e.to_string()))?,
            (None, None) => String::new(),
        };
        let mut cells = Vec::new();
        for c in &file.cell {
            let mut combos: Vec<(String, Vec<(String, Value)>)> = vec![(c.label.clone(), Vec::new())];
            for (key, values) in &c.grid {
                if values.is_empty() {
                    return Err(ExpError::Manifest(format!("cell `{}`: grid key `{key}` has no values", c.label)));
                }
                let short = key.rsplit('.').next().unwrap_or(key);
                combos = combos
                    .into_iter()
                    .flat_map(|(label, ov)| {
                        values.iter().map(move |v| {
                            let mut ov = ov.clone();
                            ov.push((key.clone(), v.clone()));
                            (format!("{label}_{short}={}", value_label(v)), ov)
                        })
                    })
                    .collect();
            }
            for (label, grid_ov) in combos {
                let mut ov: Vec<(String, Value)> = c.overrides.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
                ov.extend(grid_ov);
                ov.push(("run.name".into(), Value::String(label.clone())));
                let config = TrainConfig::parse_with(&base_text, &ov)?;
                cells.push(ManifestCell {
                    label,
                    overrides: ov,
                    config,
                });
            }
        }
        let mut seen = BTreeSet::new();
        for c in &cells {
            if !seen.insert(c.label.as_str()) {
                return Err(ExpError::Manifest(format!("duplicate cell label `{}`", c.label)));
            }
        }
        Ok(Self {
            name: s.name,
            seeds: s.seeds,
            workers: s.workers.max(1),
            cells,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExpError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Number of (cell, seed) runs.
    pub fn runs(&self) -> usize {
        self.cells.len() * self.seeds.len()
    }
}

// ---------------------------------------------------------------- sweeps

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub dir: PathBuf,
    /// Final SR on success, the error message otherwise.
    pub outcome: Result<Option<f64>, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub label: String,
    pub completed: usize,
    pub failed: usize,
    pub final_mean: Option<f64>,
    pub final_std: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub dir: PathBuf,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<CellSummary>,
}

/// Runs every (cell, seed) pair under `root/<sweep name>/<label>/seed_N` and
/// writes `summary.tsv` next to the cell directories. A failing run is
/// recorded (and its message written to `error.txt`) without stopping the
/// sweep.
pub fn run_sweep(manifest: &ExperimentManifest, root: &Path) -> Result<SweepReport, ExpError> {
    let sweep_dir = root.join(&manifest.name);
    let jobs: Vec<(usize, u64)> = manifest
        .cells
        .iter()
        .enumerate()
        .flat_map(|(i, _)| manifest.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let exec = if manifest.workers > 1 {
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    let runs = exec.map(&jobs, |&(ci, seed)| {
        let cell = &manifest.cells[ci];
        let dir = crate::trainer::seed_dir(&sweep_dir, &cell.label, seed);
        let outcome = run_seed(&cell.config, seed, Some(&dir), RunControl::default())
            .map(|o| final_success_rate(&o.eval_curve()))
            .map_err(|e| {
                let msg = e.to_string();
                let _ = std::fs::create_dir_all(&dir);
                let _ = std::fs::write(dir.join("error.txt"), format!("{msg}\n"));
                msg
            });
        RunRecord {
            label: cell.label.clone(),
            seed,
            dir,
            outcome,
        }
    });
    let mut summary = Vec::new();
    for cell in &manifest.cells {
        let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.label == cell.label).collect();
        let finals: Vec<f64> = mine
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().copied().flatten())
            .collect();
        let failed = mine.iter().filter(|r| r.outcome.is_err()).count();
        let (m, s) = if finals.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&finals);
            (Some(m), Some(s))
        };
        summary.push(CellSummary {
            label: cell.label.clone(),
            completed: mine.len() - failed,
            failed,
            final_mean: m,
            final_std: s,
        });
    }
    std::fs::create_dir_all(&sweep_dir).map_err(|e| io_err(&sweep_dir, e))?;
    let path = sweep_dir.join(SUMMARY_FILE);
    std::fs::write(&path, summary_table(&summary)).map_err(|e| io_err(&path, e))?;
    Ok(SweepReport {
        dir: sweep_dir,
        runs,
        summary,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into())
}

/// Tab-separated final-SR table, one row per cell.
pub fn summary_table(rows: &[CellSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# final SR = mean of the last {FINAL_POINTS} eval points per seed; std is population (divide by N)"
    );
    out.push_str("label\tcompleted\tfailed\tfinal_sr_mean\tfinal_sr_std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.label,
            r.completed,
            r.failed,
            fmt_opt(r.final_mean),
            fmt_opt(r.final_std)
        );
    }
    out
}

// ---------------------------------------------------------------- curves

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Trailing moving average: point `i` averages `xs[i+1-w ..= i]`, clipped at
/// the start.
pub fn trailing_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Eval curves of one labeled group of runs.
#[derive(Debug, Clone)]
pub struct RunGroup {
    pub label: String,
    pub runs: Vec<(PathBuf, Vec<EvalPoint>)>,
}

impl RunGroup {
    /// Loads `dir` as a single run (it holds a metrics file) or as a group of
    /// `seed_*` subdirectories.
    pub fn load(dir: &Path) -> Result<Self, ExpError> {
        let label = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let mut run_dirs = Vec::new();
        if dir.join(METRICS_FILE).exists() {
            run_dirs.push(dir.to_path_buf());
        } else {
            let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
            let mut seeded = Vec::new();
            for e in entries {
                let p = e.map_err(|e| io_err(dir, e))?.path();
                let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                if let Some(n) = name.strip_prefix("seed_").and_then(|s| s.parse::<u64>().ok()) {
                    if p.join(METRICS_FILE).exists() {
                        seeded.push((n, p));
                    }
                }
            }
            seeded.sort();
            run_dirs.extend(seeded.into_iter().map(|(_, p)| p));
        }
        if run_dirs.is_empty() {
            return Err(ExpError::NoRuns(dir.display().to_string()));
        }
        let mut runs = Vec::new();
        for d in run_dirs {
            let m = read_metrics(&d.join(METRICS_FILE))?;
            runs.push((d, crate::trainer::eval_curve(&m)));
        }
        Ok(Self { label, runs })
    }

    /// The shared eval grid, or an alignment error naming the first run
    /// whose grid differs from the first run's.
    pub fn grid(&self) -> Result<Vec<usize>, ExpError> {
        let first: Vec<usize> = self.runs[0].1.iter().map(|p| p.env_steps).collect();
        for (d, c) in &self.runs[1..] {
            let g: Vec<usize> = c.iter().map(|p| p.env_steps).collect();
            if g != first {
                return Err(ExpError::Alignment {
                    run: d.display().to_string(),
                    detail: format!("{} eval points vs {} in {}", g.len(), first.len(), self.runs[0].0.display()),
                });
            }
        }
        Ok(first)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub env_steps: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveSummary {
    pub label: String,
    pub seeds: usize,
    pub points: Vec<CurvePoint>,
    pub final_mean: f64,
    pub final_std: f64,
}

impl CurveSummary {
    /// Each run's SR curve is smoothed with a trailing window first, then
    /// mean and std are taken across runs at every grid point. The final SR
    /// statistics always use the raw curves.
    pub fn from_group(group: &RunGroup, window: usize) -> Result<Self, ExpError> {
        let grid = group.grid()?;
        if grid.is_empty() {
            return Err(ExpError::Alignment {
                run: group.runs[0].0.display().to_string(),
                detail: "no eval points".into(),
            });
        }
        let smoothed: Vec<Vec<f64>> = group
            .runs
            .iter()
            .map(|(_, c)| trailing_average(&c.iter().map(|p| p.success_rate).collect::<Vec<_>>(), window))
            .collect();
        let points = grid
            .iter()
            .enumerate()
            .map(|(i, &env_steps)| {
                let col: Vec<f64> = smoothed.iter().map(|s| s[i]).collect();
                let (mean, std) = mean_std(&col);
                CurvePoint { env_steps, mean, std }
            })
            .collect();
        let finals: Vec<f64> = group.runs.iter().filter_map(|(_, c)| final_success_rate(c)).collect();
        let (final_mean, final_std) = mean_std(&finals);
        Ok(Self {
            label: group.label.clone(),
            seeds: group.runs.len(),
            points,
            final_mean,
            final_std,
        })
    }

    pub fn to_tsv(&self, window: usize) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {}: {} seed(s); trailing window {}; std is population (divide by N)",
            self.label,
            self.seeds,
            window.max(1)
        );
        out.push_str("env_steps\tmean_sr\tstd_sr\n");
        for p in &self.points {
            let _ = writeln!(out, "{}\t{:.6}\t{:.6}", p.env_steps, p.mean, p.std);
        }
        out
    }
}

/// Writes `<out_dir>/<label>.tsv` for every group directory.
pub fn emit_plot_data(dirs: &[PathBuf], window: usize, out_dir: &Path) -> Result<Vec<PathBuf>, ExpError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut written = Vec::new();
    for d in dirs {
        let s = CurveSummary::from_group(&RunGroup::load(d)?, window)?;
        let path = out_dir.join(format!("{}.tsv", s.label));
        std::fs::write(&path, s.to_tsv(window)).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareVerdict {
    pub label_a: String,
    pub label_b: String,
    pub final_mean_a: f64,
    pub final_mean_b: f64,
    /// `final_mean_a - final_mean_b`.
    pub difference: f64,
    /// `sqrt((std_a^2 + std_b^2) / 2)`.
    pub pooled_std: f64,
    /// Mean curve of A at or above B's at every point with index
    /// `>= floor(3n/4)`.
    pub a_ahead_last_quartile: bool,
}

pub fn compare_groups(a: &RunGroup, b: &RunGroup) -> Result<CompareVerdict, ExpError> {
    let (ga, gb) = (a.grid()?, b.grid()?);
    if ga != gb {
        return Err(ExpError::Alignment {
            run: b.runs[0].0.display().to_string(),
            detail: format!("grid differs from group {}", a.label),
        });
    }
    let sa = CurveSummary::from_group(a, 1)?;
    let sb = CurveSummary::from_group(b, 1)?;
    let n = sa.points.len();
    let start = 3 * n / 4;
    let flag = (start..n).all(|i| sa.points[i].mean >= sb.points[i].mean);
    Ok(CompareVerdict {
        label_a: a.label.clone(),
        label_b: b.label.clone(),
        final_mean_a: sa.final_mean,
        final_mean_b: sb.final_mean,
        difference: sa.final_mean - sb.final_mean,
        pooled_std: ((sa.final_std.powi(2) + sb.final_std.powi(2)) / 2.0).sqrt(),
        a_ahead_last_quartile: flag,
    })
}

pub fn compare_dirs(a: &Path, b: &Path) -> Result<CompareVerdict, ExpError> {
    compare_groups(&RunGroup::load(a)?, &RunGroup::load(b)?)
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCheck {
    pub name: &'static str,
    pub instances: usize,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOL
    }
}

/// A random small batch: per step a handful of token rows over a small
/// vocabulary, frozen log-probabilities kept away from the clip kinks, and
/// scalar values.
struct Instance {
    logits: Vec<Tensor>,
    tokens: Vec<Vec<usize>>,
    old_lp: Vec<Vec<f64>>,
    old_dists: Vec<Vec<f64>>,
    advantages: Vec<f64>,
    values: Vec<Tensor>,
    targets: Vec<f64>,
    /// Index of the first action token per step (thought tokens before it).
    split: Vec<usize>,
    eps: f64,
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    crate::diffcore::softmax_into(xs, &mut out);
    out
}

const KINK_MARGIN: f64 = 1e-3;
/// Central-difference step.
const FD_STEP: f64 = 1e-5;

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let steps = rng.gen_range(1..=4);
    let vocab = rng.gen_range(3..=6);
    let eps = rng.gen_range(0.1..0.3);
    let mut inst = Instance {
        logits: Vec::new(),
        tokens: Vec::new(),
        old_lp: Vec::new(),
        old_dists: Vec::new(),
        advantages: Vec::new(),
        values: Vec::new(),
        targets: Vec::new(),
        split: Vec::new(),
        eps,
    };
    for _ in 0..steps {
        let n = rng.gen_range(2..=4);
        let data: Vec<f64> = (0..n * vocab).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let mut toks = Vec::with_capacity(n);
        let mut old = Vec::with_capacity(n);
        for r in 0..n {
            let p = softmax(&data[r * vocab..(r + 1) * vocab]);
            let t = rng.gen_range(0..vocab);
            toks.push(t);
            // Old log-prob offset so the ratio sits clear of 1 +- eps.
            let lp = p[t].ln();
            let off = loop {
                let o: f64 = rng.gen_range(-0.4..0.4);
                let r = (-o).exp();
                if (r - (1.0 + eps)).abs() > KINK_MARGIN && (r - (1.0 - eps)).abs() > KINK_MARGIN {
                    break o;
                }
            };
            old.push(lp + off);
            let mut d: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
            let z: f64 = d.iter().sum();
            d.iter_mut().for_each(|x| *x /= z);
            inst.old_dists.push(d);
        }
        inst.split.push(rng.gen_range(1..n));
        inst.logits.push(Tensor::new(vec![n, vocab], data).expect("shape"));
        inst.tokens.push(toks);
        inst.old_lp.push(old);
        inst.advantages.push(rng.gen_range(-2.0..2.0));
        inst.values.push(Tensor::scalar(rng.gen_range(-1.0..1.0)));
        inst.targets.push(rng.gen_range(-1.0..1.0));
    }
    inst
}

/// Per step: `[1, V]` probability rows and scalar token log-probabilities.
fn token_path(tape: &mut Tape, inst: &Instance, logits: &[Var]) -> Result<(Vec<Vec<Var>>, Vec<Var>), DiffError> {
    let mut lps = Vec::new();
    let mut probs = Vec::new();
    for (s, &l) in logits.iter().enumerate() {
        let mut step = Vec::new();
        for (r, &t) in inst.tokens[s].iter().enumerate() {
            let row = tape.gather_rows(l, &[r])?;
            let p = tape.softmax_rows(row);
            let lp = tape.log(p);
            let g = tape.gather_index(lp, &[t])?;
            step.push(tape.sum(g));
            probs.push(p);
        }
        lps.push(step);
    }
    Ok((lps, probs))
}

fn algo(e: AlgoError) -> DiffError {
    match e {
        AlgoError::Diff(d) => d,
        other => DiffError::Numerics(other.to_string()),
    }
}

type LossFn = fn(&mut Tape, &Instance, &[Var], &[Var]) -> Result<Var, DiffError>;

fn loss_vldac(tape: &mut Tape, i: &Instance, l: &[Var], _: &[Var]) -> Result<Var, DiffError> {
    let (lps, _) = token_path(tape, i, l)?;
    vldac_policy_loss(tape, &lps, &i.old_lp, &i.advantages, i.eps).map_err(algo)
}

fn loss_value(tape: &mut Tape, i: &Instance, _: &[Var], v: &[Var]) -> Result<Var, DiffError> {
    value_loss(tape, v, &i.targets).map_err(algo)
}

fn kl_with(tape: &mut Tape, i: &Instance, l: &[Var], dir: KlDirection) -> Result<Var, DiffError> {
    let (_, probs) = token_path(tape, i, l)?;
    kl_penalty(tape, &probs, &i.old_dists, dir).map_err(algo)
}

fn loss_kl_old_new(tape: &mut Tape, i: &Instance, l: &[Var], _: &[Var]) -> Result<Var, DiffError> {
    kl_with(tape, i, l, KlDirection::OldNew)
}

fn loss_kl_new_old(tape: &mut Tape, i: &Instance, l: &[Var], _: &[Var]) -> Result<Var, DiffError> {
    kl_with(tape, i, l, KlDirection::NewOld)
}

fn loss_composite(tape: &mut Tape, i: &Instance, l: &[Var], v: &[Var]) -> Result<Var, DiffError> {
    let (lps, probs) = token_path(tape, i, l)?;
    let pl = vldac_policy_loss(tape, &lps, &i.old_lp, &i.advantages, i.eps).map_err(algo)?;
    let kl = kl_penalty(tape, &probs, &i.old_dists, KlDirection::OldNew).map_err(algo)?;
    let vl = value_loss(tape, v, &i.targets).map_err(algo)?;
    total_loss(tape, pl, Some(kl), Some(vl), 0.15, 0.05).map_err(algo)
}

fn loss_rl4vlm(tape: &mut Tape, i: &Instance, l: &[Var], v: &[Var]) -> Result<Var, DiffError> {
    let (lps, probs) = token_path(tape, i, l)?;
    let mut mixed_new = Vec::new();
    let mut mixed_old = Vec::new();
    for (s, step) in lps.iter().enumerate() {
        let cut = i.split[s];
        mixed_new.push(rl4vlm_mixed_logprob(tape, &step[..cut], &step[cut..], 0.3).map_err(algo)?);
        let lt: f64 = i.old_lp[s][..cut].iter().sum();
        let la: f64 = i.old_lp[s][cut..].iter().sum();
        mixed_old.push(algos::mixed_logprob(lt, la, 0.3));
    }
    // Mixed ratios can land on a kink even when token ratios do not; the
    // sign-aware clip is evaluated per step below with the same margin.
    let mut ok_adv = i.advantages.clone();
    for (s, a) in ok_adv.iter_mut().enumerate() {
        let r = (tape.scalar_value(mixed_new[s]) - mixed_old[s]).exp();
        if (r - (1.0 + i.eps)).abs() <= KINK_MARGIN || (r - (1.0 - i.eps)).abs() <= KINK_MARGIN {
            *a = 0.0;
        }
    }
    let pl = rl4vlm_policy_loss(tape, &mixed_new, &mixed_old, &ok_adv, i.eps).map_err(algo)?;
    let kl = kl_penalty(tape, &probs, &i.old_dists, KlDirection::OldNew).map_err(algo)?;
    let vl = value_loss(tape, v, &i.targets).map_err(algo)?;
    total_loss(tape, pl, Some(kl), Some(vl), 0.15, 0.05).map_err(algo)
}

fn loss_loo(tape: &mut Tape, i: &Instance, l: &[Var], _: &[Var]) -> Result<Var, DiffError> {
    let (lps, probs) = token_path(tape, i, l)?;
    let adv = if i.advantages.len() >= 2 {
        loo_advantages(&i.advantages).map_err(algo)?
    } else {
        i.advantages.clone()
    };
    let pl = vldac_policy_loss(tape, &lps, &i.old_lp, &adv, i.eps).map_err(algo)?;
    let kl = kl_penalty(tape, &probs, &i.old_dists, KlDirection::OldNew).map_err(algo)?;
    total_loss(tape, pl, Some(kl), None, 0.15, 0.05).map_err(algo)
}

fn loss_td(tape: &mut Tape, i: &Instance, l: &[Var], v: &[Var]) -> Result<Var, DiffError> {
    let (lps, probs) = token_path(tape, i, l)?;
    let n = i.targets.len();
    let dones: Vec<bool> = (0..n).map(|k| k + 1 == n).collect();
    let y = td0_targets(&i.advantages, &i.targets, &dones, 0.99).map_err(algo)?;
    // Advantages use the frozen snapshot values, as in training.
    let adv: Vec<f64> = y.iter().zip(&i.values).map(|(y, v0)| y - v0.data()[0]).collect();
    let pl = vldac_policy_loss(tape, &lps, &i.old_lp, &adv, i.eps).map_err(algo)?;
    let kl = kl_penalty(tape, &probs, &i.old_dists, KlDirection::OldNew).map_err(algo)?;
    let vl = value_loss(tape, v, &y).map_err(algo)?;
    total_loss(tape, pl, Some(kl), Some(vl), 0.15, 0.05).map_err(algo)
}

/// Sign-aware clip on a lone ratio, including both dead zones.
fn loss_clip(tape: &mut Tape, i: &Instance, l: &[Var], _: &[Var]) -> Result<Var, DiffError> {
    let (lps, _) = token_path(tape, i, l)?;
    let mut terms = Vec::new();
    for (s, step) in lps.iter().enumerate() {
        for (k, &lp) in step.iter().enumerate() {
            let r = ratio(tape, lp, i.old_lp[s][k]);
            terms.push(clipped_objective(tape, r, i.advantages[s], i.eps));
        }
    }
    tape.add_all(&terms)
}

const LOSSES: [(&str, LossFn); 9] = [
    ("vldac_policy", loss_vldac),
    ("sign_aware_clip", loss_clip),
    ("value", loss_value),
    ("kl_old_new", loss_kl_old_new),
    ("kl_new_old", loss_kl_new_old),
    ("composite", loss_composite),
    ("rl4vlm_path", loss_rl4vlm),
    ("loo_path", loss_loo),
    ("td_path", loss_td),
];

/// Central-difference check of every loss on `instances` random batches each.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<Vec<LossCheck>, ExpError> {
    let mut out = Vec::new();
    for (li, (name, f)) in LOSSES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (li as u64) << 40);
        let mut check = LossCheck {
            name,
            instances: 0,
            entries: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..instances {
            let inst = random_instance(&mut rng);
            let ns = inst.logits.len();
            let mut params = inst.logits.clone();
            params.extend(inst.values.iter().cloned());
            let rep = finite_diff_check(
                |tape, vars| f(tape, &inst, &vars[..ns], &vars[ns..]),
                &params,
                FD_STEP,
                GRADCHECK_TOL,
            )?;
            check.instances += 1;
            check.entries += rep.entries_checked;
            check.max_rel_error = check.max_rel_error.max(rep.max_rel_error);
        }
        out.push(check);
    }
    Ok(out)
}
