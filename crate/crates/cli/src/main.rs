use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use crnn_cli::{exit_code, kind_name, run_command, Outcome, Overrides, RunConfig, Verb, EXIT_CONFIG, EXIT_NUMERIC};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Train,
    Eval,
    Gradcheck,
    ExtractFeatures,
}

/// Train, evaluate and gradient-check convolutional recurrent classifiers.
#[derive(Debug, Parser)]
#[command(name = "crnn", version)]
struct Args {
    #[arg(value_enum)]
    verb: Command,
    /// Run configuration (key=value).
    #[arg(long)]
    config: PathBuf,
    /// Manifest to use instead of the configured one.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory instead of the configured `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn fail(kind: &str, msg: impl std::fmt::Display) -> String {
    let one_line = msg.to_string().replace('\n', " ");
    format!("error[{kind}]: {}", one_line.trim())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("bad arguments");
            eprintln!("{}", fail("config", first.trim_start_matches("error: ")));
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let verb = match args.verb {
        Command::Train => Verb::Train,
        Command::Eval => Verb::Eval,
        Command::Gradcheck => Verb::GradCheck,
        Command::ExtractFeatures => Verb::ExtractFeatures,
    };
    let over = Overrides {
        data: args.data,
        out: args.out,
        seed: args.seed,
    };
    let result = RunConfig::load(&args.config)
        .and_then(|cfg| run_command(verb, cfg, &over, &mut std::io::stderr()));
    match result {
        Ok(Outcome::Done(summary)) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Ok(Outcome::GradCheckFailed(summary)) => {
            println!("{summary}");
            eprintln!("{}", fail("numeric", "gradient check exceeded the 1e-4 relative error limit"));
            ExitCode::from(EXIT_NUMERIC as u8)
        }
        Err(e) => {
            let kind = e.kind();
            eprintln!("{}", fail(kind_name(kind), &e));
            ExitCode::from(exit_code(kind) as u8)
        }
    }
}
