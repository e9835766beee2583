mod args;
mod commands;
mod config;

use anyhow::{bail, Result};
use clap::Parser;

use args::{Cli, Command};
use config::{RunConfig, RunManifest};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    if let Command::Rerun { manifest } = &cli.command {
        let recorded = RunManifest::read(manifest)?;
        let argv = commands::rerun_args(&recorded, cli.common.out.as_deref());
        let again = Cli::try_parse_from(&argv)?;
        if matches!(again.command, Command::Rerun { .. }) {
            bail!("{} records a rerun, not a run", manifest.display());
        }
        log::info!("repeating: {}", argv[1..].join(" "));
        return run(again, argv[1..].to_vec());
    }
    let common = &cli.common;
    let run = RunConfig::resolve(common)?;
    if let Some(out) = &common.out {
        RunManifest::new(cli.command.name(), args, common, &run).write(out)?;
    }
    match &cli.command {
        Command::Train => commands::cmd_train(common, &run),
        Command::Quantize { checkpoint } => commands::cmd_quantize(common, &run, checkpoint),
        Command::Eval { model, uint8, mode, shave, split } => {
            commands::cmd_eval(common, &run, model, uint8.as_deref(), *mode, *shave, *split)
        }
        Command::Infer { model, input, output } => commands::cmd_infer(common, model, input, output),
        Command::Inspect { model } => commands::cmd_inspect(common, &run, model.as_deref()),
        Command::Ablate => commands::cmd_ablate(common, &run),
        Command::Synth { count, size } => commands::cmd_synth(common, *count, *size),
        Command::Rerun { .. } => unreachable!("handled above"),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let args = std::env::args().skip(1).collect();
    if let Err(e) = run(cli, args) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
