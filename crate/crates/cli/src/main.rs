use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use marlab_core::ndiff::Fault;
use marlab_core::run::{self, OracleQuery, SEED_ENV_VAR};
use marlab_core::Error;
use serde_json::{json, Value};

/// Desk-scale multi-agent RL lab.
#[derive(Parser)]
#[command(name = "marlab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run and write metrics.csv, checkpoint.json, config_echo.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint with greedy / noise-free policies.
    Eval(EvalArgs),
    /// Exact solvers on a fixture name or game file.
    Oracle {
        #[command(subcommand)]
        query: OracleCmd,
    },
    /// Check backward passes against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Episode-generation threads (selfplay only).
    #[arg(long)]
    threads: Option<usize>,
    /// Override any config key, e.g. `--set lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on another env than the one trained on.
    #[arg(long)]
    env: Option<String>,
    #[arg(long, default_value_t = 500)]
    episodes: usize,
    #[arg(long, env = SEED_ENV_VAR, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Zero-sum Nash equilibrium of a two-player matrix game.
    Nash { env: String },
    /// Best joint action of the team payoff.
    Argmax {
        env: String,
        #[arg(long, default_value_t = 0)]
        state: usize,
    },
    /// Optimal joint-action values by Q-iteration.
    Qiter {
        env: String,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Best response of `--me` against a frozen opponent mix.
    Bestresp {
        env: String,
        #[arg(long, default_value_t = 0)]
        me: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        mix: Vec<f64>,
    },
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn train(a: TrainArgs) -> Result<Value, Error> {
    let mut overrides = Vec::new();
    if let Some(x) = a.algo {
        overrides.push(format!("algo={}", json!(x)));
    }
    if let Some(x) = a.env {
        overrides.push(format!("env={}", json!(x)));
    }
    if let Some(x) = a.seed {
        overrides.push(format!("seed={x}"));
    }
    if let Some(x) = a.total_steps {
        overrides.push(format!("total_steps={x}"));
    }
    if let Some(x) = a.out_dir {
        overrides.push(format!("out_dir={}", json!(x)));
    }
    if let Some(x) = a.threads {
        overrides.push(format!("threads={x}"));
    }
    overrides.extend(a.set);
    let env_seed = std::env::var(SEED_ENV_VAR).ok();
    let cfg = run::load_config(a.config.as_deref(), &overrides, env_seed.as_deref())?;
    let s = run::train(&cfg)?;
    Ok(json!({
        "out_dir": s.out_dir,
        "steps": s.steps,
        "final_eval_per_agent": s.final_eval,
    }))
}

fn eval(a: EvalArgs) -> Result<Value, Error> {
    let s = run::eval(&a.checkpoint, a.env.as_deref(), a.episodes, a.seed)?;
    let v = serde_json::to_value(&s)?;
    let dir = a.checkpoint.parent().map(PathBuf::from).unwrap_or_default();
    std::fs::write(dir.join("eval_summary.json"), serde_json::to_string_pretty(&v)?)?;
    Ok(v)
}

fn oracle(q: OracleCmd) -> Result<Value, Error> {
    let (query, env) = match q {
        OracleCmd::Nash { env } => (OracleQuery::Nash, env),
        OracleCmd::Argmax { env, state } => (OracleQuery::Argmax { state }, env),
        OracleCmd::Qiter { env, gamma } => (OracleQuery::Qiter { gamma }, env),
        OracleCmd::Bestresp { env, me, mix } => (OracleQuery::BestResp { me, mix }, env),
    };
    run::oracle_cmd(&query, &env)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Oracle { query } => oracle(query),
        Cmd::Gradcheck(a) => {
            let fault = match a.inject_fault.as_deref().map(str::parse::<Fault>).transpose() {
                Ok(f) => f,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            match run::gradcheck_suites(a.instances, a.seed, fault) {
                Ok(r) => {
                    for s in &r.suites {
                        eprintln!(
                            "{:<10} instances={} max_rel_error={:.3e} {}",
                            s.name,
                            s.instances,
                            s.max_rel_error,
                            if s.passed { "PASS" } else { "FAIL" }
                        );
                    }
                    println!("{}", serde_json::to_string(&r).expect("report serializes"));
                    return if r.passed { ExitCode::SUCCESS } else { ExitCode::from(1) };
                }
                Err(e) => Err(e),
            }
        }
    };
    match result {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(run::exit_code(&e) as u8)
        }
    }
}
