use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use guard_lab::config::{ExperimentConfig, Format};
use guard_lab::experiment::{self, RunError, Stage};

#[derive(Parser)]
#[command(name = "guard-lab", version, about = "Retention-aware machine unlearning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, fine-tune, unlearn with every configured method and report metrics.
    Run(Common),
    /// Re-run the first unlearning entry with weighting at each temperature.
    SweepTau {
        #[command(flatten)]
        common: Common,
        /// Comma-separated temperatures; defaults to `[sweep] taus` in the config.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
    /// Check the first-order predictions on the configured instance.
    VerifyTheory(Common),
    /// Write the generated dataset and held-out samples.
    GenData(Common),
    /// Per-forget-sample attribution scores at the fine-tuned parameters.
    Attribute(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output format; defaults to `[output] formats`.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

struct Loaded {
    cfg: ExperimentConfig,
    text: String,
    out: PathBuf,
    formats: Vec<Format>,
}

fn load(c: &Common) -> Result<Loaded, RunError> {
    let (mut cfg, text) = ExperimentConfig::load(&c.config).map_err(|e| RunError::new(Stage::Config, e))?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let formats = match c.format {
        Some(FormatArg::Csv) => vec![Format::Csv],
        Some(FormatArg::Json) => vec![Format::Json],
        None => cfg.output.formats.clone(),
    };
    let out = c.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok(Loaded { cfg, text, out, formats })
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run(c) => {
            let l = load(&c)?;
            let rows = experiment::cmd_run(&l.cfg, &l.text, &l.out, &l.formats)?;
            println!("{} runs written to {}", rows.len(), l.out.display());
        }
        Command::SweepTau { common, taus } => {
            let l = load(&common)?;
            let taus = taus.unwrap_or_else(|| l.cfg.sweep.taus.clone());
            let s = experiment::cmd_sweep_tau(&l.cfg, &l.text, &taus, &l.out, &l.formats)?;
            println!(
                "{} temperatures written to {}; retain gap non-increasing on {}/{} adjacent pairs",
                s.rows.len(),
                l.out.display(),
                s.non_increasing_pairs,
                s.pairs
            );
        }
        Command::VerifyTheory(c) => {
            let l = load(&c)?;
            let v = experiment::cmd_verify_theory(&l.cfg, &l.text, &l.out, &l.formats)?;
            print!("{}", v.render());
            if !v.all_pass() {
                let failed: Vec<&str> =
                    v.checks.iter().filter(|c| c.status == experiment::Status::Fail).map(|c| c.name).collect();
                return Err(RunError::new(Stage::Verify, format!("failed checks: {}", failed.join(", "))));
            }
        }
        Command::GenData(c) => {
            let l = load(&c)?;
            let (data, test) = experiment::cmd_gen_data(&l.cfg, &l.text, &l.out)?;
            println!(
                "{} training samples ({} forget) and {} held-out written to {}",
                data.samples.len(),
                data.n_forget(),
                test.len(),
                l.out.display()
            );
        }
        Command::Attribute(c) => {
            let l = load(&c)?;
            let r = experiment::cmd_attribute(&l.cfg, &l.text, &l.out, &l.formats)?;
            println!("{} forget samples scored, written to {}", r.samples.len(), l.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = experiment::init_pool() {
        eprintln!("guard-lab: config error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("guard-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
