use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msb_core::auction::property_check;
use msb_core::chart::{render_chart, ChartSpec};
use msb_core::experiment::{
    run_convergence, run_sweep, save, sweep_with, train_agents, write_convergence, write_results, AgentKind,
    ExperimentSpec, MechanismKind, Method, TrainedAgents,
};
use msb_core::nn::Checkpoint;
use msb_core::rl::{write_train_log, DmsbAgent};
use msb_core::diffusion::SampleMode;
use msb_core::Result;

#[derive(Parser)]
#[command(name = "msb", version, about = "MSB auction experiments for UAV-assisted vehicular twin migration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the learning agents and write convergence curves and checkpoints.
    Train(ExperimentArgs),
    /// Evaluate mechanisms and agents on the base scenario.
    Evaluate {
        #[command(flatten)]
        args: ExperimentArgs,
        /// Use this diffusion checkpoint instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate every method over the experiment's sweep grid.
    Sweep(ExperimentArgs),
    /// Render a results or convergence CSV as SVG.
    Chart {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ChartKind::Sweep)]
        kind: ChartKind,
        #[arg(long, default_value = "Total surplus")]
        title: String,
        #[arg(long, default_value = "Sweep value")]
        x_label: String,
    },
    /// Search random markets for truthfulness and homogeneity violations.
    PropertyCheck {
        #[arg(long, default_value_t = 10_000)]
        markets: usize,
        /// Deviations tried per bidder.
        #[arg(long, default_value_t = 100)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ChartKind {
    Sweep,
    Convergence,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment spec (TOML). Built-in defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Run this single seed instead of the experiment's repetitions.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Training rounds per agent and seed.
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated subset of DMSB, SPA, MyopicMSB, OptimalMSB.
    #[arg(long, value_delimiter = ',')]
    mechanisms: Option<Vec<String>>,
    /// Comma-separated subset of diffusion, ppo, greedy, random.
    #[arg(long, value_delimiter = ',')]
    agents: Option<Vec<String>>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.spec {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        if let Some(seed) = self.seed {
            spec.seed = seed;
            spec.repetitions = 1;
        }
        if let Some(dir) = &self.out_dir {
            spec.out_dir = dir.clone();
        }
        if let Some(steps) = self.steps {
            spec.train_steps = steps;
        }
        if let Some(list) = &self.mechanisms {
            spec.mechanisms = list
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| match Method::parse(s)? {
                    Method::Mechanism(m) => Ok(m),
                    Method::Agent(_) => Err(usage(format!("'{s}' is an agent, not a mechanism"))),
                })
                .collect::<Result<Vec<MechanismKind>>>()?;
        }
        if let Some(list) = &self.agents {
            spec.agents = list
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| match Method::parse(s)? {
                    Method::Agent(a) => Ok(a),
                    Method::Mechanism(_) => Err(usage(format!("'{s}' is a mechanism, not an agent"))),
                })
                .collect::<Result<Vec<AgentKind>>>()?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn usage(msg: String) -> msb_core::Error {
    msb_core::Error::Config(msg)
}

fn report(path: &Path) {
    println!("wrote {}", path.display());
}

fn write_checkpoints(spec: &ExperimentSpec, trained: &[TrainedAgents]) -> Result<()> {
    for t in trained {
        if let Some(agent) = &t.diffusion {
            let path = spec.out_dir.join(format!("{}-diffusion-seed{}.ckpt", spec.name, t.seed));
            std::fs::create_dir_all(&spec.out_dir)?;
            agent.checkpoint().save(&path)?;
            report(&path);
        }
        for (label, log) in [("diffusion", &t.diffusion_log), ("ppo", &t.ppo_log)] {
            if !log.is_empty() {
                let name = format!("{}-{label}-log-seed{}.csv", spec.name, t.seed);
                report(&save(&spec.out_dir, &name, |buf| write_train_log(log, buf))?);
            }
        }
    }
    Ok(())
}

fn train_cmd(args: &ExperimentArgs) -> Result<()> {
    let spec = args.resolve()?;
    let (rows, trained) = run_convergence(&spec)?;
    let csv = save(&spec.out_dir, &format!("{}-convergence.csv", spec.name), |buf| {
        write_convergence(&rows, spec.smoothing_window, buf)
    })?;
    report(&csv);
    let svg = csv.with_extension("svg");
    render_chart(&csv, &ChartSpec::convergence(&spec.name), &svg)?;
    report(&svg);
    write_checkpoints(&spec, &trained)
}

fn evaluate_cmd(args: &ExperimentArgs, checkpoint: Option<&Path>) -> Result<()> {
    let mut spec = args.resolve()?;
    spec.sweep = None;
    let mut trained = Vec::new();
    for seed in spec.seeds() {
        let mut t = match checkpoint {
            Some(path) => {
                // The checkpoint stands in for training; other learners still train.
                let mut without = spec.clone();
                without.mechanisms.retain(|m| *m != MechanismKind::Dmsb);
                without.agents.retain(|a| *a != AgentKind::Diffusion);
                let mut t = train_agents(&without, seed)?;
                t.diffusion = Some(DmsbAgent::from_checkpoint(&Checkpoint::load(path)?, SampleMode::Greedy, seed)?);
                t
            }
            None => train_agents(&spec, seed)?,
        };
        t.seed = seed;
        trained.push(t);
    }
    let rows = sweep_with(&spec, &mut trained)?;
    for r in &rows {
        println!(
            "{:<11} seed {:<4} surplus {:>10.4}  latency {:>8.4} s",
            r.method, r.seed, r.total_surplus, r.latency
        );
    }
    report(&save(&spec.out_dir, &format!("{}-results.csv", spec.name), |buf| write_results(&rows, buf))?);
    Ok(())
}

fn sweep_cmd(args: &ExperimentArgs) -> Result<()> {
    let spec = args.resolve()?;
    let (rows, _) = run_sweep(&spec)?;
    let csv = save(&spec.out_dir, &format!("{}-results.csv", spec.name), |buf| write_results(&rows, buf))?;
    report(&csv);
    let x_label = rows.first().map(|r| r.sweep_variable.clone()).unwrap_or_default();
    let svg = csv.with_extension("svg");
    render_chart(&csv, &ChartSpec::sweep(&spec.name, &x_label), &svg)?;
    report(&svg);
    Ok(())
}

fn chart_cmd(csv: &Path, out: &Path, kind: ChartKind, title: &str, x_label: &str) -> Result<()> {
    let spec = match kind {
        ChartKind::Sweep => ChartSpec::sweep(title, x_label),
        ChartKind::Convergence => ChartSpec::convergence(title),
    };
    render_chart(csv, &spec, out)?;
    report(out);
    Ok(())
}

fn property_cmd(markets: usize, grid: usize, seed: u64) -> Result<bool> {
    let r = property_check(markets, grid, seed)?;
    println!("markets checked:        {}", r.markets);
    println!("truthfulness violations: {}", r.counterexamples.len());
    println!("homogeneity max rel err: {:.3e}", r.homogeneity_error);
    println!("winner changes on scale: {}", r.winner_changes);
    if let Some((market, rho, c)) = r.counterexamples.first() {
        println!(
            "first violation: rho {rho}, market {market:?}, BS {} bids {} (utility {} > {})",
            c.bidder, c.deviation, c.deviated_utility, c.truthful_utility
        );
    }
    Ok(r.passed(1e-12))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => train_cmd(args).map(|_| true),
        Command::Evaluate { args, checkpoint } => evaluate_cmd(args, checkpoint.as_deref()).map(|_| true),
        Command::Sweep(args) => sweep_cmd(args).map(|_| true),
        Command::Chart {
            csv,
            out,
            kind,
            title,
            x_label,
        } => chart_cmd(csv, out, *kind, title, x_label).map(|_| true),
        Command::PropertyCheck { markets, grid, seed } => property_cmd(*markets, *grid, *seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("property check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
