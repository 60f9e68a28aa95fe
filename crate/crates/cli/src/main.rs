use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use pidtune::harness::{
    emit_report, run_baseline, run_evaluation, run_robustness_suite, run_training_experiment, write_baseline_table,
    write_evaluation, write_process_file, write_robustness_table, ExperimentConfig, Rig,
};
use pidtune::pid::PidGains;
use pidtune::plant::{flow_controller, flow_loop_step, LogRecord, PlantState};
use pidtune::reward::RewardPreset;
use pidtune::td3::latest_gains;

#[derive(Parser)]
#[command(name = "pidtune", version, about = "Reinforcement-learning PID tuning on a simulated two-tank level loop")]
struct Cli {
    /// TOML experiment configuration; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Input-constrained protocol with inverting gradients.
    #[arg(long, global = true)]
    constrained: bool,
    #[arg(long, global = true, value_parser = parse_reward)]
    reward: Option<RewardPreset>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the plant and write the log as CSV.
    Simulate(SimulateArgs),
    /// Run the full training experiment.
    Train,
    /// Score gains on the evaluation setpoint sequence.
    Evaluate(GainsArgs),
    /// Identify the process model and score SIMC PI baselines.
    Baseline,
    /// Score gains under nominal and perturbed plants.
    Robustness(GainsArgs),
    /// Collect artifacts in the output directory into report tables.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum Loop {
    Open,
    Closed,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "closed")]
    mode: Loop,
    /// Seconds per setpoint (closed loop) or total duration (open loop).
    #[arg(long, default_value_t = 240.0)]
    duration: f64,
    /// Level setpoints in cm, visited in order (closed loop).
    #[arg(long, value_delimiter = ',')]
    setpoints: Option<Vec<f64>>,
    /// Flow-setpoint step applied after 20 s (open loop).
    #[arg(long, default_value_t = 2.0)]
    flow_step: f64,
    #[command(flatten)]
    gains: GainsArgs,
}

#[derive(Args)]
struct GainsArgs {
    #[arg(long)]
    kp: Option<f64>,
    #[arg(long)]
    ki: Option<f64>,
    #[arg(long)]
    kd: Option<f64>,
    #[arg(long)]
    ktau: Option<f64>,
    /// Take the most recent row of a gains CSV; explicit gain flags override it.
    #[arg(long)]
    gains_file: Option<PathBuf>,
}

impl GainsArgs {
    fn resolve(&self, default: PidGains) -> Result<PidGains> {
        let mut g = match &self.gains_file {
            Some(p) => latest_gains(p).with_context(|| format!("reading {}", p.display()))?,
            None => default,
        };
        g.kp = self.kp.unwrap_or(g.kp);
        g.ki = self.ki.unwrap_or(g.ki);
        g.kd = self.kd.unwrap_or(g.kd);
        g.ktau = self.ktau.unwrap_or(g.ktau);
        g.validate()?;
        Ok(g)
    }
}

fn parse_reward(s: &str) -> std::result::Result<RewardPreset, String> {
    s.parse().map_err(|e: pidtune::Error| e.to_string())
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if cli.constrained {
        cfg = cfg.constrained_protocol();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(r) = cli.reward {
        cfg.reward = r.spec();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_log(path: &Path, rows: &[LogRecord]) -> Result<()> {
    write_process_file(path, rows)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn simulate(cfg: &ExperimentConfig, args: &SimulateArgs) -> Result<()> {
    if !(args.duration > 0.0) {
        bail!("--duration must be positive");
    }
    let n = cfg.steps(args.duration);
    match args.mode {
        Loop::Closed => {
            let gains = args.gains.resolve(cfg.initial_gains)?;
            let setpoints = args.setpoints.clone().unwrap_or_else(|| cfg.evaluation_setpoints.clone());
            let mut rig = Rig::settled(cfg, cfg.plant, gains, cfg.evaluation_limits())?;
            let mut rows = Vec::with_capacity(n * setpoints.len());
            for (k, &sp) in setpoints.iter().enumerate() {
                for _ in 0..n {
                    rows.push(rig.step(sp, 0.0, k as u32)?);
                }
            }
            write_log(&cfg.output_dir.join("simulate_closed.csv"), &rows)
        }
        Loop::Open => {
            let mut state = PlantState::steady_at_level(&cfg.plant, cfg.initial_level)?;
            let mut pid = flow_controller(&cfg.plant, &state, cfg.control_dt)?;
            let base = state.f_in;
            let mut rows = Vec::with_capacity(n);
            for _ in 0..n {
                let t = state.time;
                let sp = if t >= 20.0 { base + args.flow_step } else { base };
                let pump = flow_loop_step(&mut state, sp, &mut pid, &cfg.plant, cfg.timing())?;
                rows.push(LogRecord {
                    t_s: t,
                    level_sp_cm: cfg.initial_level,
                    level_cm: state.measured_level,
                    flow_sp: sp,
                    flow: state.f_in,
                    pump_pct: pump,
                    u_hat: sp,
                    u: sp,
                    episode_id: 0,
                });
            }
            write_log(&cfg.output_dir.join("simulate_open.csv"), &rows)
        }
    }
}

fn print_mean(label: &str, e: &pidtune::harness::Evaluation) {
    let m = &e.report.mean;
    println!(
        "{label}: IAE {:.4}  ISE {:.4}  TV {:.4}  %OS {:.2}  ST {:.1} s  Ms {}",
        m.iae,
        m.ise,
        m.tv,
        m.percent_os,
        m.settling_time,
        e.report.ms.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
    );
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    if cli.dump_defaults {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let Some(command) = &cli.command else {
        bail!("no command given; see --help");
    };
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)?;
    match command {
        Command::Simulate(args) => simulate(&cfg, args)?,
        Command::Train => {
            let r = run_training_experiment(&cfg)?;
            write_evaluation(&out, "initial", &r.initial)?;
            let last = run_evaluation(r.final_gains, &cfg)?;
            write_evaluation(&out, "final", &last)?;
            print_mean("initial", &r.initial);
            print_mean("final", &last);
            let g = r.final_gains;
            println!(
                "final gains kp {:.4} ki {:.5} kd {:.4} ktau {:.3}; {} fallbacks; {:.1} s",
                g.kp, g.ki, g.kd, g.ktau, r.fallbacks, r.elapsed_s
            );
            if !r.gains_valid {
                println!("warning: the trainer published unusable gains at least once");
            }
        }
        Command::Evaluate(args) => {
            let e = run_evaluation(args.resolve(cfg.initial_gains)?, &cfg)?;
            write_evaluation(&out, "evaluation", &e)?;
            print_mean("evaluation", &e);
        }
        Command::Baseline => {
            let b = run_baseline(&cfg)?;
            println!("model: k {:.4}  tau1 {:.2} s  theta_d {:.2} s", b.model.k, b.model.tau1, b.model.theta_d);
            write_baseline_table(&out.join("baseline.csv"), &b)?;
            for row in &b.rows {
                write_evaluation(&out, &format!("simc_tc{}", row.tc), &row.evaluation)?;
                print_mean(&format!("SIMC Tc={}", row.tc), &row.evaluation);
            }
        }
        Command::Robustness(args) => {
            let r = run_robustness_suite(args.resolve(cfg.initial_gains)?, &cfg)?;
            write_robustness_table(&out.join("robustness.csv"), &r)?;
            for c in &r.conditions {
                print_mean(c.name, &c.evaluation);
            }
            println!("IAE {:.4} ± {:.4}", r.summary.mean.iae, r.summary.std.iae);
        }
        Command::Report => {
            let s = emit_report(&out)?;
            for p in &s.written {
                println!("wrote {}", p.display());
            }
            for w in &s.warnings {
                println!("warning: {w}");
            }
        }
    }
    info!("outputs in {}", out.display());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
