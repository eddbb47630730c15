use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffusion_core::cli_harness::{exit_code, run, Command, RESOLVED_CONFIG, SEED_ENV};

#[derive(Parser)]
#[command(
    name = "diffusion",
    version,
    about = "Toy diffusion experiments driven by TOML configs",
    after_help = format!(
        "Every command writes {RESOLVED_CONFIG} next to its outputs; rerunning from it reproduces the CSVs exactly.\n\
         {SEED_ENV} supplies the seed when the config has none.\n\
         Exit codes: 0 success, 2 config error, 3 numeric failure, 4 missing artifact."
    )
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Io {
    /// TOML config; missing fields take their defaults
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if needed
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate forward noising trajectories.
    ///
    /// Outputs: schedule.csv (t,beta,alpha,alpha_bar,sigma_sq),
    /// trajectories.csv (traj_id,t,component_index,value),
    /// hist_t{t}.csv (bin_lo,bin_hi,count) for t in {0, T/4, T/2, T},
    /// moments.csv (t,mean,var).
    ForwardSim(Io),
    /// Train a noise-prediction network.
    ///
    /// Outputs: schedule.csv, log.csv (step,loss,grad_norm,eval_metric),
    /// ckpt_{step}.bin every eval_every steps and at the last step.
    Train(Io),
    /// Draw samples from a trained checkpoint.
    ///
    /// Outputs: samples.csv (sample_id,[t,]component_index,value),
    /// histogram.csv (bin_lo,bin_hi,count) of component 0.
    Sample(Io),
    /// Train or load a restoration network and compare one-step with
    /// iterative restoration on held-out data.
    ///
    /// Outputs: log.csv and restorer.bin when training,
    /// report.csv (input_id,t,one_step_l1,iterative_l1),
    /// summary.csv (t,mean_one_step_l1,mean_iterative_l1).
    Cold(Io),
    /// Observer-based novelty and realism metrics.
    ///
    /// Outputs: metrics.csv (metric,value,exact,brute_force), with
    /// `undefined` for rates over an empty set; items.csv
    /// (item_id,nu,nu_brute_force,new).
    Metrics(Io),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, io) = match cli.command {
        Cmd::ForwardSim(io) => (Command::ForwardSim, io),
        Cmd::Train(io) => (Command::Train, io),
        Cmd::Sample(io) => (Command::Sample, io),
        Cmd::Cold(io) => (Command::Cold, io),
        Cmd::Metrics(io) => (Command::Metrics, io),
    };
    match run(cmd, &io.config, &io.out) {
        Ok(summary) => {
            for n in &summary.notes {
                println!("{n}");
            }
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
