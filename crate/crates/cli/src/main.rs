//! `stlseeker` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 the run hit its
//! cycle cap without converging (or a check failed), 3 internal error.

mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stlseeker::orchestrator::{CycleReport, ExperimentConfig, OrchestratorError, RunState};
use stlseeker::policy_opt::check_gradients;

#[derive(Parser)]
#[command(name = "stlseeker", version, about = "Learn STL-satisfying control policies from plant data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the learning loop from a config file
    Train(TrainArgs),
    /// Success rate, collision rate and mean robustness of a checkpoint
    Eval(EvalArgs),
    /// One closed-loop trajectory from a checkpoint
    Rollout(RolloutArgs),
    /// Learning curve and success-rate table of a finished run directory
    Export(ExportArgs),
    /// Compare co-state gradients with a full unroll and finite differences
    CheckGrad(CheckGradArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// run directory
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value` override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// continue from this checkpoint instead of starting fresh
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// number of rollouts
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// per-rollout CSV
    #[arg(long)]
    out: Option<PathBuf>,
    /// evaluate the raw policy without the safety filter
    #[arg(long)]
    no_cbf: bool,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, conflicts_with = "no_cbf")]
    with_cbf: bool,
    #[arg(long)]
    no_cbf: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// trajectory CSV; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// region and path overlay
    #[arg(long)]
    svg: Option<PathBuf>,
    /// trajectories drawn in the overlay
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args)]
struct ExportArgs {
    /// run directory written by `train`
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    NotConverged,
    Internal(String),
}

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Config(_)
            | OrchestratorError::Corrupt { .. }
            | OrchestratorError::Version { .. }
            | OrchestratorError::PlantKindMismatch { .. }
            | OrchestratorError::Io { .. } => Failure::Usage(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Usage(format!("{}: {e}", path.display()))
}

fn print_report(r: &CycleReport) {
    println!(
        "cycle {:2}  data {:5}  episodes {:3}  loss {:.3e}  rho {:+.3} -> {:+.3} ({} steps, {:?})  gamma {:.3} (k={})  collisions {:.3}  {:.1}s",
        r.cycle,
        r.dataset_size,
        r.episodes,
        r.model_loss,
        r.trace.first_avg_smooth,
        r.trace.last_avg_smooth,
        r.trace.steps,
        r.trace.stop,
        r.gamma,
        r.eval_k,
        r.collision_rate,
        r.wall_time_s
    );
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut state = match &a.checkpoint {
        Some(path) => {
            let state = RunState::load(path)?;
            if !a.overrides.is_empty() || a.seed.is_some() {
                return Err(Failure::Usage("--set and --seed cannot change a resumed run".into()));
            }
            let text = std::fs::read_to_string(&a.config).map_err(io(&a.config))?;
            let cfg = ExperimentConfig::parse(&text, &[])?;
            if cfg.plant.kind != state.config.plant.kind {
                return Err(OrchestratorError::PlantKindMismatch {
                    expected: cfg.plant.kind,
                    found: state.config.plant.kind,
                }
                .into());
            }
            state
        }
        None => {
            let mut overrides = a.overrides.clone();
            if let Some(s) = a.seed {
                overrides.push(format!("seed={s}"));
            }
            RunState::new(ExperimentConfig::load(&a.config, &overrides)?)?
        }
    };
    state.run_to_end(Some(&a.out), |_, r| print_report(r))?;
    if state.converged {
        println!("converged after {} cycles, {} plant episodes", state.cycle, state.episodes);
        Ok(())
    } else {
        println!("no convergence within {} cycles", state.cycle);
        Err(Failure::NotConverged)
    }
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    if a.k == 0 {
        return Err(Failure::Usage("--k must be positive".into()));
    }
    let state = RunState::load(&a.checkpoint)?;
    let seed = a.seed.unwrap_or(state.config.seed);
    let ev = state.evaluate(a.k, seed, !a.no_cbf)?;
    println!("gamma {:.4}", ev.gamma);
    println!("collision_rate {:.4}", ev.collision_rate);
    println!("mean_rho {:.4}", ev.mean_rho);
    if let Some(path) = &a.out {
        std::fs::write(path, ev.to_csv()).map_err(io(path))?;
    }
    Ok(())
}

fn rollout(a: RolloutArgs) -> Result<(), Failure> {
    let state = RunState::load(&a.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(state.config.seed));
    let with_cbf = !a.no_cbf;
    let runs = (0..a.count.max(1))
        .map(|_| state.rollout(with_cbf, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let csv = runs[0].to_csv();
    match &a.out {
        Some(path) => std::fs::write(path, csv).map_err(io(path))?,
        None => print!("{csv}"),
    }
    if let Some(path) = &a.svg {
        std::fs::write(path, svg::trajectories(&state.config.plant.regions, &runs)).map_err(io(path))?;
    }
    Ok(())
}

fn read_reports(run: &Path) -> Result<Vec<CycleReport>, Failure> {
    let dir = run.join("reports");
    let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(io(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("cycle_") && n.ends_with(".json") && !n.contains("partial"))
        })
        .collect();
    names.sort();
    names
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(io(p))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn export(a: ExportArgs) -> Result<(), Failure> {
    let out = a.out.clone().unwrap_or_else(|| a.run.join("export"));
    std::fs::create_dir_all(&out).map_err(io(&out))?;
    let reports = read_reports(&a.run)?;
    if reports.is_empty() {
        return Err(Failure::Usage(format!("no cycle reports under {}", a.run.display())));
    }
    // policy-improvement curve over all cycles, model updates at cycle starts
    let mut curve = String::from("global_step,cycle,step,avg_smooth_rho,avg_classic_rho\n");
    let mut points = Vec::new();
    let mut markers = Vec::new();
    let mut offset = 0usize;
    for r in &reports {
        markers.push(offset as f64);
        let path = a.run.join(format!("traces/cycle_{:02}.csv", r.cycle));
        let text = std::fs::read_to_string(&path).map_err(io(&path))?;
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 3 {
                continue;
            }
            let step: usize = f[0].parse().unwrap_or(0);
            let smooth: f64 = f[1].parse().unwrap_or(f64::NAN);
            curve.push_str(&format!("{},{},{},{},{}\n", offset + step, r.cycle, step, f[1], f[2]));
            points.push(((offset + step) as f64, smooth));
        }
        offset += r.trace.steps;
    }
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
    };
    write("curve.csv", curve)?;
    write("curve.svg", svg::curve(&points, &markers, "avg smooth robustness"))?;
    let mut table = String::from("| cycle | episodes | dataset | gamma | rollouts | collision rate | mean rho |\n|---|---|---|---|---|---|---|\n");
    let mut gamma_csv = String::from("cycle,episodes,dataset_size,gamma,eval_k,collision_rate,mean_rho\n");
    for r in &reports {
        table.push_str(&format!(
            "| {} | {} | {} | {:.1}% | {} | {:.1}% | {:.3} |\n",
            r.cycle,
            r.episodes,
            r.dataset_size,
            100.0 * r.gamma,
            r.eval_k,
            100.0 * r.collision_rate,
            r.mean_rho
        ));
        gamma_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.cycle, r.episodes, r.dataset_size, r.gamma, r.eval_k, r.collision_rate, r.mean_rho
        ));
    }
    write("gamma.md", table.clone())?;
    write("gamma.csv", gamma_csv)?;
    print!("{table}");
    Ok(())
}

fn check_grad(a: CheckGradArgs) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let checks = check_gradients(a.instances, &mut rng).map_err(|e| Failure::Internal(e.to_string()))?;
    let worst_u = checks.iter().map(|c| c.adjoint_vs_unrolled).fold(0.0, f64::max);
    let worst_fd = checks.iter().map(|c| c.unrolled_vs_fd).fold(0.0, f64::max);
    println!("instances {}", checks.len());
    println!("max relative error adjoint vs unrolled {worst_u:.3e} (limit 1e-6)");
    println!("max relative error unrolled vs finite differences {worst_fd:.3e} (limit 1e-4)");
    if worst_u <= 1e-6 && worst_fd <= 1e-4 {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Rollout(a) => rollout(a),
        Command::Export(a) => export(a),
        Command::CheckGrad(a) => check_grad(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::NotConverged) => ExitCode::from(2),
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(3)
        }
    }
}
