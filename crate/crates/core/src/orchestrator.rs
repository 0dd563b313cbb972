//! The outer loop: alternate model fitting and policy improvement, run the
//! filtered policy on the plant to grow the dataset, evaluate, checkpoint.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/config.toml               resolved configuration
//! <out>/dataset.csv               transitions collected so far
//! <out>/checkpoints/cycle_NN.json full resumable state after cycle NN
//! <out>/reports/cycle_NN.json     cycle report (cycle_NN_partial.json on error)
//! <out>/traces/cycle_NN.csv       policy-improvement trace
//! <out>/episodes/cycle_NN_K.csv   plant runs collected in cycle NN
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_learning::{
    collect_initial, collect_with_policy, estimate_sigma, policy_episode, train_model, LearnedModel, ModelError,
    TrainOptions, TransitionDataset,
};
use crate::nets::{Controller, FeedforwardPolicy, LstmPolicy, NetError};
use crate::policy_opt::{improve_policy, ImproveOptions, Improvement, PolicyOptError, StopReason};
use crate::safety::{BarrierSpec, CbfSettings, SafetyError, SafetyFilter};
use crate::stl::{parse_formula, robustness_classic, Formula, StlError};
use crate::world::{PlantConfig, PlantKind, Trajectory, WorldError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Stl(#[from] StlError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    PolicyOpt(#[from] PolicyOptError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint {path} is corrupt: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is for a {found:?} plant, configuration expects {expected:?}")]
    PlantKindMismatch { expected: PlantKind, found: PlantKind },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecSection {
    pub formula: String,
    /// planning horizon; must equal the formula horizon when given
    #[serde(default)]
    pub horizon: Option<usize>,
    /// temperature of the smooth robustness
    pub k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// random-control episodes before the first fit
    pub n0: usize,
    /// filtered policy episodes added per cycle
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub epochs_initial: usize,
    pub epochs_refit: usize,
    pub batch: usize,
    pub lr: f64,
    pub sigma_inputs: usize,
    pub sigma_masks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Recurrent,
    Feedforward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKind,
    /// recurrent cell width and stack depth
    pub hidden: usize,
    pub layers: usize,
    /// hidden widths of the feedforward alternative
    pub ff_hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub k_fast: usize,
    pub k_confirm: usize,
    /// success rate that ends the run
    pub target: f64,
    pub max_cycles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub plant: PlantConfig,
    pub spec: SpecSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub policy: PolicySection,
    pub optimizer: ImproveOptions,
    pub cbf: CbfSettings,
    pub eval: EvalSection,
}

pub const CASE1_CONFIG: &str = include_str!("../configs/case1.cfg");
pub const CASE2_CONFIG: &str = include_str!("../configs/case2.cfg");

/// Sets `section.key` (dotted path) in a parsed TOML table. The value is read
/// as a TOML literal, or taken as a string when it does not parse.
fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), OrchestratorError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| OrchestratorError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut table = root;
    for key in &keys[..keys.len() - 1] {
        table = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| OrchestratorError::Config(format!("{path}: {key} is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, OrchestratorError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| OrchestratorError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, overrides)
    }

    pub fn case1() -> Self {
        Self::parse(CASE1_CONFIG, &[]).expect("shipped config")
    }

    pub fn case2() -> Self {
        Self::parse(CASE2_CONFIG, &[]).expect("shipped config")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn formula(&self) -> Result<Formula, OrchestratorError> {
        Ok(parse_formula(&self.spec.formula, &self.plant.predicates())?)
    }

    pub fn horizon(&self) -> Result<usize, OrchestratorError> {
        Ok(self.formula()?.horizon())
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        self.plant.validate()?;
        self.cbf.validate()?;
        let hrz = self.horizon()?;
        if let Some(t) = self.spec.horizon {
            if t != hrz {
                return bad(format!("horizon {t} differs from the formula horizon {hrz}"));
            }
        }
        if hrz == 0 {
            return bad("formula horizon must be positive".into());
        }
        if self.cbf.weights.len() != self.plant.kind.control_dim() {
            return bad("cbf.weights needs one entry per control".into());
        }
        let counts = [
            ("data.n0", self.data.n0),
            ("model.epochs_initial", self.model.epochs_initial),
            ("model.batch", self.model.batch),
            ("model.sigma_masks", self.model.sigma_masks.saturating_sub(1)),
            ("optimizer.batch", self.optimizer.batch),
            ("optimizer.window", self.optimizer.window),
            ("eval.k_fast", self.eval.k_fast),
            ("eval.k_confirm", self.eval.k_confirm),
            ("eval.max_cycles", self.eval.max_cycles),
            ("policy.hidden", self.policy.hidden),
            ("policy.layers", self.policy.layers),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} is too small"));
            }
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad("model.dropout must lie in [0, 1)".into());
        }
        for (name, lr) in [("model.lr", self.model.lr), ("optimizer.lr", self.optimizer.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive and finite"));
            }
        }
        if !(self.spec.k > 0.0) {
            return bad("spec.k must be positive".into());
        }
        if self.plant.unsafe_region().is_some() {
            BarrierSpec::from_region(self.plant.unsafe_region().unwrap())?;
        }
        Ok(())
    }

    pub fn barrier(&self) -> Result<Option<BarrierSpec>, OrchestratorError> {
        Ok(match self.plant.unsafe_region() {
            Some(r) => Some(BarrierSpec::from_region(r)?),
            None => None,
        })
    }

    fn new_policy<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Controller, NetError> {
        let n = self.plant.state_dim();
        let bounds = self.plant.control_box();
        Ok(match self.policy.kind {
            PolicyKind::Recurrent => Controller::Recurrent(LstmPolicy::new(n, self.policy.hidden, self.policy.layers, bounds, rng)?),
            PolicyKind::Feedforward => Controller::Feedforward(FeedforwardPolicy::new(n, &self.policy.ff_hidden, bounds, rng)?),
        })
    }
}

/// Outcome of one batch of evaluation rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub k: usize,
    /// fraction with strictly positive classical robustness
    pub gamma: f64,
    pub collision_rate: f64,
    pub mean_rho: f64,
    pub rollouts: Vec<RolloutSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub rho: f64,
    pub collided: bool,
    pub filtered_steps: usize,
    pub fallback_steps: usize,
}

impl Evaluation {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,rho,success,collided,filtered_steps,fallback_steps\n");
        for (i, r) in self.rollouts.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{},{}\n",
                r.rho,
                (r.rho > 0.0) as u8,
                r.collided as u8,
                r.filtered_steps,
                r.fallback_steps
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub first_avg_smooth: f64,
    pub last_avg_smooth: f64,
    pub last_avg_classic: f64,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub dataset_size: usize,
    /// plant episodes used for learning so far
    pub episodes: usize,
    pub model_loss: f64,
    pub trace: TraceSummary,
    pub gamma_fast: f64,
    /// confirmed rate when the fast rate reached the target, otherwise the fast rate
    pub gamma: f64,
    pub eval_k: usize,
    pub collision_rate: f64,
    pub mean_rho: f64,
    /// filtered steps (adjusted or fallback) during this cycle's data collection
    pub collection_filtered_steps: usize,
    pub collection_fallback_steps: usize,
    pub collection_collisions: usize,
    pub converged: bool,
    pub wall_time_s: f64,
}

impl CycleReport {
    /// Equality of everything except timing.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_time_s = other.wall_time_s;
        &a == other
    }
}

/// Everything needed to resume a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub version: u32,
    pub config: ExperimentConfig,
    /// completed cycles
    pub cycle: usize,
    pub episodes: usize,
    pub dataset: TransitionDataset,
    pub model: LearnedModel,
    pub policy: Controller,
    pub rng: ChaCha8Rng,
    pub reports: Vec<CycleReport>,
    pub converged: bool,
}

/// Runs `f` on a pool capped by `STLSEEKER_THREADS` when that is set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match std::env::var("STLSEEKER_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

fn rollout_rng(base: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index as u64);
    rng
}

impl RunState {
    pub fn new(config: ExperimentConfig) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.plant.state_dim();
        let m = config.plant.kind.control_dim();
        let mut model = LearnedModel::new(n, m, &config.model.hidden, config.model.dropout, &mut rng)?;
        model.angle_dims = config.plant.kind.angle_dims().to_vec();
        let policy = config.new_policy(&mut rng)?;
        Ok(Self {
            version: CHECKPOINT_VERSION,
            config,
            cycle: 0,
            episodes: 0,
            dataset: TransitionDataset::default(),
            model,
            policy,
            rng,
            reports: Vec::new(),
            converged: false,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), OrchestratorError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let text = serde_json::to_string(self).expect("state serializes");
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| OrchestratorError::Corrupt {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(OrchestratorError::Version {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        // parse from text rather than the Value so floats stay bit-exact
        serde_json::from_str(&text).map_err(|e| OrchestratorError::Corrupt {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Loads a checkpoint that must belong to a plant of the given kind.
    pub fn load_for(path: &Path, expected: PlantKind) -> Result<Self, OrchestratorError> {
        let state = Self::load(path)?;
        if state.config.plant.kind != expected {
            return Err(OrchestratorError::PlantKindMismatch {
                expected,
                found: state.config.plant.kind,
            });
        }
        Ok(state)
    }

    pub fn formula(&self) -> Result<Formula, OrchestratorError> {
        self.config.formula()
    }

    /// Closed-loop run on the true plant, filtered or not.
    pub fn rollout<R: Rng + ?Sized>(&self, with_cbf: bool, rng: &mut R) -> Result<Trajectory, OrchestratorError> {
        let horizon = self.config.horizon()?;
        let barrier = self.config.barrier()?;
        let bounds = self.config.plant.control_box();
        let filter = match (&barrier, with_cbf) {
            (Some(b), true) => Some(SafetyFilter {
                model: &self.model,
                barrier: b,
                bounds: &bounds,
                settings: &self.config.cbf,
            }),
            _ => None,
        };
        let x0 = self.config.plant.sample_initial(rng);
        Ok(policy_episode(&self.config.plant, &self.policy, filter.as_ref(), horizon, x0, rng)?)
    }

    /// `k` independent filtered rollouts on the true plant. Rollout `i` draws
    /// from its own stream of `base_seed`, so results do not depend on
    /// scheduling.
    pub fn evaluate(&self, k: usize, base_seed: u64, with_cbf: bool) -> Result<Evaluation, OrchestratorError> {
        let phi = self.formula()?;
        let barrier = self.config.barrier()?;
        let results: Vec<Result<RolloutSummary, OrchestratorError>> = with_thread_cap(|| {
            (0..k)
                .into_par_iter()
                .map(|i| {
                    let mut rng = rollout_rng(base_seed, i);
                    let traj = self.rollout(with_cbf, &mut rng)?;
                    let rho = robustness_classic(&phi, &traj.states, 0)?;
                    let collided = barrier
                        .as_ref()
                        .is_some_and(|b| traj.states.iter().any(|x| b.value(x) < 0.0));
                    let fallback_steps = traj
                        .filter
                        .iter()
                        .flatten()
                        .filter(|r| r.status == crate::world::FilterStatus::InfeasibleFallback)
                        .count();
                    Ok(RolloutSummary {
                        rho,
                        collided,
                        filtered_steps: traj.filtered_steps(),
                        fallback_steps,
                    })
                })
                .collect()
        });
        let rollouts = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        let kf = k.max(1) as f64;
        Ok(Evaluation {
            k,
            gamma: rollouts.iter().filter(|r| r.rho > 0.0).count() as f64 / kf,
            collision_rate: rollouts.iter().filter(|r| r.collided).count() as f64 / kf,
            mean_rho: rollouts.iter().map(|r| r.rho).sum::<f64>() / kf,
            rollouts,
        })
    }

    fn fit_model(&mut self, epochs: usize) -> Result<f64, OrchestratorError> {
        let m = &self.config.model;
        let opts = TrainOptions {
            epochs,
            batch: m.batch,
            lr: m.lr,
        };
        let hist = train_model(&self.dataset, &mut self.model, &opts, &mut self.rng)?;
        let (lo, hi) = self.dataset.input_bounds().expect("dataset is not empty");
        self.model.sigma = estimate_sigma(&self.model, &lo, &hi, m.sigma_inputs, m.sigma_masks, &mut self.rng)?;
        Ok(*hist.last().unwrap())
    }

    /// One cycle; artifacts go to `out` when given. Returns the report and
    /// the policy-improvement trace.
    pub fn step_cycle(&mut self, out: Option<&Path>) -> Result<(CycleReport, Improvement), OrchestratorError> {
        let start = Instant::now();
        let cycle = self.cycle + 1;
        let horizon = self.config.horizon()?;
        let phi = self.formula()?;
        let mut new_runs = Vec::new();
        if cycle == 1 {
            let (data, runs) = collect_initial(&self.config.plant, self.config.data.n0, horizon, &mut self.rng)?;
            self.dataset = data;
            self.episodes += runs.len();
            new_runs = runs;
        }
        let epochs = if cycle == 1 {
            self.config.model.epochs_initial
        } else {
            self.config.model.epochs_refit
        };
        let model_loss = self.fit_model(epochs)?;
        let plant = self.config.plant.clone();
        let sampler = move |r: &mut ChaCha8Rng| plant.sample_initial(r);
        let improvement = improve_policy(
            &mut self.policy,
            &self.model,
            &phi,
            horizon,
            &sampler,
            &ImproveOptions {
                k: self.config.spec.k,
                ..self.config.optimizer.clone()
            },
            &mut self.rng,
        )?;
        let fast_seed: u64 = self.rng.gen();
        let fast = self.evaluate(self.config.eval.k_fast, fast_seed, true)?;
        let mut eval = fast.clone();
        if fast.gamma >= self.config.eval.target {
            let confirm_seed: u64 = self.rng.gen();
            eval = self.evaluate(self.config.eval.k_confirm, confirm_seed, true)?;
        }
        let converged = fast.gamma >= self.config.eval.target && eval.gamma >= self.config.eval.target;
        let mut collection = Vec::new();
        if !converged && cycle < self.config.eval.max_cycles {
            let barrier = self.config.barrier()?;
            let bounds = self.config.plant.control_box();
            let filter = barrier.as_ref().map(|b| SafetyFilter {
                model: &self.model,
                barrier: b,
                bounds: &bounds,
                settings: &self.config.cbf,
            });
            collection = collect_with_policy(
                &self.config.plant,
                &self.policy,
                filter.as_ref(),
                self.config.data.n,
                horizon,
                cycle as u32,
                &mut self.dataset,
                &mut self.rng,
            )?;
            self.episodes += collection.len();
            new_runs.extend(collection.iter().cloned());
        }
        let barrier = self.config.barrier()?;
        let report = CycleReport {
            cycle,
            dataset_size: self.dataset.len(),
            episodes: self.episodes,
            model_loss,
            trace: TraceSummary {
                steps: improvement.trace.len(),
                first_avg_smooth: improvement.trace.first().map_or(f64::NAN, |r| r.avg_smooth_rho),
                last_avg_smooth: improvement.trace.last().map_or(f64::NAN, |r| r.avg_smooth_rho),
                last_avg_classic: improvement.trace.last().map_or(f64::NAN, |r| r.avg_classic_rho),
                stop: improvement.stop,
            },
            gamma_fast: fast.gamma,
            gamma: eval.gamma,
            eval_k: eval.k,
            collision_rate: eval.collision_rate,
            mean_rho: eval.mean_rho,
            collection_filtered_steps: collection.iter().map(Trajectory::filtered_steps).sum(),
            collection_fallback_steps: collection
                .iter()
                .flat_map(|t| t.filter.iter().flatten())
                .filter(|r| r.status == crate::world::FilterStatus::InfeasibleFallback)
                .count(),
            collection_collisions: collection
                .iter()
                .filter(|t| barrier.as_ref().is_some_and(|b| t.states.iter().any(|x| b.value(x) < 0.0)))
                .count(),
            converged,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.cycle = cycle;
        self.converged = converged;
        self.reports.push(report.clone());
        if let Some(dir) = out {
            self.write_cycle_artifacts(dir, &report, &improvement, &new_runs)?;
        }
        Ok((report, improvement))
    }

    fn write_cycle_artifacts(
        &self,
        dir: &Path,
        report: &CycleReport,
        improvement: &Improvement,
        runs: &[Trajectory],
    ) -> Result<(), OrchestratorError> {
        let c = report.cycle;
        let write = |rel: String, text: String| -> Result<(), OrchestratorError> {
            let path = dir.join(rel);
            if let Some(p) = path.parent() {
                std::fs::create_dir_all(p).map_err(io_err(p))?;
            }
            std::fs::write(&path, text).map_err(io_err(&path))
        };
        write(format!("reports/cycle_{c:02}.json"), serde_json::to_string_pretty(report).unwrap())?;
        write(format!("traces/cycle_{c:02}.csv"), improvement.trace_csv())?;
        write("dataset.csv".into(), self.dataset.to_csv())?;
        for (i, t) in runs.iter().enumerate() {
            write(format!("episodes/cycle_{c:02}_{i:02}.csv"), t.to_csv())?;
        }
        self.save(&dir.join(format!("checkpoints/cycle_{c:02}.json")))
    }

    fn write_partial(&self, dir: &Path, err: &OrchestratorError) {
        let path = dir.join(format!("reports/cycle_{:02}_partial.json", self.cycle + 1));
        let body = serde_json::json!({
            "cycle": self.cycle + 1,
            "dataset_size": self.dataset.len(),
            "episodes": self.episodes,
            "error": err.to_string(),
        });
        let _ = std::fs::create_dir_all(dir.join("reports"));
        let _ = std::fs::write(path, serde_json::to_string_pretty(&body).unwrap());
    }

    /// Cycles until convergence or the cycle cap. `on_cycle` sees every report.
    pub fn run_to_end(
        &mut self,
        out: Option<&Path>,
        mut on_cycle: impl FnMut(&RunState, &CycleReport),
    ) -> Result<(), OrchestratorError> {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("config.toml");
            std::fs::write(&path, self.config.to_toml()).map_err(io_err(&path))?;
        }
        while !self.converged && self.cycle < self.config.eval.max_cycles {
            match self.step_cycle(out) {
                Ok((report, _)) => on_cycle(self, &report),
                Err(e) => {
                    if let Some(dir) = out {
                        self.write_partial(dir, &e);
                    }
                    return Err(e);
                }
            }
        }
        Ok(())
    }
}

/// Runs an experiment from scratch.
pub fn run(config: ExperimentConfig, out: Option<&Path>) -> Result<RunState, OrchestratorError> {
    let mut state = RunState::new(config)?;
    state.run_to_end(out, |_, _| {})?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_parse() {
        let c1 = ExperimentConfig::case1();
        assert_eq!(c1.horizon().unwrap(), 20);
        assert_eq!((c1.data.n0, c1.data.n, c1.optimizer.batch), (10, 3, 4));
        assert_eq!(c1.cbf.alpha, 0.7);
        assert_eq!(c1.model.dropout, 0.1);
        assert_eq!(c1.cbf.weights, vec![1.0, 0.01]);
        let c2 = ExperimentConfig::case2();
        assert_eq!(c2.horizon().unwrap(), 22);
        assert_eq!((c2.data.n0, c2.data.n), (10, 6));
        assert_eq!((c2.cbf.alpha, c2.model.dropout), (0.98, 0.05));
    }

    #[test]
    fn overrides_apply_and_validate() {
        let c = ExperimentConfig::parse(CASE1_CONFIG, &["data.n=5".into(), "seed=42".into(), "name=trial".into()]).unwrap();
        assert_eq!((c.data.n, c.seed, c.name.as_str()), (5, 42, "trial"));
        assert!(ExperimentConfig::parse(CASE1_CONFIG, &["spec.horizon=7".into()]).is_err());
        assert!(ExperimentConfig::parse(CASE1_CONFIG, &["model.dropout=1.5".into()]).is_err());
        assert!(ExperimentConfig::parse(CASE1_CONFIG, &["bogus".into()]).is_err());
        assert!(ExperimentConfig::parse(CASE1_CONFIG, &["model.unknown_key=1".into()]).is_err());
        assert!(ExperimentConfig::parse("not toml [", &[]).is_err());
        let round = ExperimentConfig::parse(&c.to_toml(), &[]).unwrap();
        assert_eq!(round, c);
    }
}
