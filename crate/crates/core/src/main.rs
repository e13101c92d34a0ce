use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vlmdiff::captioner::Mode;
use vlmdiff::config::RunConfig;
use vlmdiff::pipeline::Pipeline;
use vlmdiff::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "vlmdiff", version, about = "Caption-conditioned latent diffusion for anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set diff.T=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set mode=<mode>`.
    #[arg(long, value_parser = ["industrial", "natural"])]
    mode: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic shapes dataset.
    Synth(Common),
    /// Describe dataset images with the configured provider.
    Caption(Common),
    /// Pretrain and finetune the autoencoder.
    TrainAe(Common),
    /// Train the latent denoiser.
    TrainDiff(Common),
    /// Reconstruct test images and write anomaly maps.
    Infer(Common),
    /// Score anomaly maps against ground truth.
    Eval(Common),
    /// Write the report and contact sheets.
    Report(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c)
            | Command::Caption(c)
            | Command::TrainAe(c)
            | Command::TrainDiff(c)
            | Command::Infer(c)
            | Command::Eval(c)
            | Command::Report(c) => c,
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut overrides = c.set.clone();
    if let Some(m) = &c.mode {
        m.parse::<Mode>()?;
        overrides.push(format!("mode=\"{m}\""));
    }
    RunConfig::load(&c.config, &overrides)
}

fn run(cmd: &Command) -> Result<()> {
    let cfg = load_config(cmd.common())?;
    let p = Pipeline::new(cfg);
    match cmd {
        Command::Synth(_) => {
            let idx = p.synth()?;
            println!("wrote {} images to {}", idx.records.len(), idx.root.display());
        }
        Command::Caption(_) => {
            let s = p.caption()?;
            println!(
                "captions: {} cached, {} new, {} failed ({})",
                s.hits,
                s.misses - s.failures.len(),
                s.failures.len(),
                p.captions_path().display()
            );
            if !s.failures.is_empty() {
                return Err(Error::Provider {
                    path: s.failures[0].0.clone(),
                    msg: format!("{} (and {} more failures)", s.failures[0].1, s.failures.len() - 1),
                });
            }
        }
        Command::TrainAe(_) => {
            let o = p.train_ae()?;
            println!("autoencoder {} in {}", o.key, o.dir.display());
        }
        Command::TrainDiff(_) => {
            let o = p.train_diff()?;
            println!(
                "denoiser {} in {} (tail loss {:.5}, conditioned {})",
                o.stage.key,
                o.stage.dir.display(),
                o.tail_loss,
                o.conditioned
            );
        }
        Command::Infer(_) => {
            let o = p.infer()?;
            println!("{} anomaly maps in {}", o.records.len(), o.stage.dir.join("maps").display());
        }
        Command::Eval(_) => {
            let o = p.eval()?;
            print!("{}", o.report.to_kv());
            println!("written to {}", o.stage.dir.display());
        }
        Command::Report(_) => {
            let o = p.report()?;
            println!("report in {}", o.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
