use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use selcal::cli::{cmd_eval, cmd_gen, cmd_train, RunConfig};

#[derive(Parser)]
#[command(name = "selcal", version, about = "Train and evaluate calibrated selective classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Caps worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/tune/test CSVs.
    Gen(Common),
    /// Train a selector and save it with its extractor and base model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Exact number of optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the evaluation trials and write curve and AUC tables.
    Eval(Common),
}

fn load(common: &Common) -> selcal::Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    let threads = common.threads.or(cfg.threads);
    if let Some(n) = threads {
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> selcal::Result<()> {
    match cli.command {
        Command::Gen(common) => {
            let (cfg, out) = load(&common)?;
            for (path, rows) in cmd_gen(&cfg, &out)? {
                println!("{}: {rows} rows", path.display());
            }
        }
        Command::Train { common, steps } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(s) = steps {
                cfg = cfg.with_steps(s);
            }
            let o = cmd_train(&cfg, &out)?;
            match o.final_loss {
                Some(l) => println!("trained {} steps, final loss {l}", o.steps),
                None => println!("no training steps run"),
            }
            println!("selector: {}", o.selector_path.display());
            println!("report: {}", o.report_path.display());
        }
        Command::Eval(common) => {
            let (cfg, out) = load(&common)?;
            let o = cmd_eval(&cfg, &out)?;
            println!("curves: {}", o.curves_path.display());
            println!("aucs: {}", o.aucs_path.display());
            if o.flagged > 0 {
                eprintln!("warning: {} cells had too little selected data and were skipped", o.flagged);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
