use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use grpo_lab::runner::{self, error_json, Loaded, OutputFormat, RunOptions};

#[derive(Parser)]
#[command(name = "grpo-lab", version, about = "Run and validate group-relative policy gradient experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment described by a spec file.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Parent of the timestamped run directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Worker threads for replications and sweep cells.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// List every schema violation of a spec without running it.
    Validate {
        #[arg(long)]
        spec: PathBuf,
    },
}

fn fail(code: i32, kind: &str, message: &str, diagnostics: &[String]) -> ExitCode {
    eprintln!("{}", error_json(code, kind, message, diagnostics));
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match catch_unwind(AssertUnwindSafe(|| dispatch(cli))) {
        Ok(code) => code,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            fail(4, "internal", &msg, &[])
        }
    }
}

fn dispatch(cli: Cli) -> ExitCode {
    match cli.cmd {
        Cmd::Validate { spec } => match runner::validate(&spec) {
            Ok(d) => {
                println!("{}", serde_json::json!({ "spec": spec, "diagnostics": d }));
                if d.is_empty() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(2)
                }
            }
            Err(e) => fail(2, "unreadable_spec", &e.to_string(), &[]),
        },
        Cmd::Run {
            spec,
            seed,
            out,
            workers,
            format,
        } => {
            let exp = match runner::load_spec(&spec, seed) {
                Ok(Loaded::Ok(exp)) => exp,
                Ok(Loaded::Invalid(d)) => return fail(2, "validation", "the spec has schema violations", &d),
                Err(e) => return fail(2, "unreadable_spec", &e.to_string(), &[]),
            };
            let opts = RunOptions {
                out,
                workers,
                format: match format {
                    Format::Csv => OutputFormat::Csv,
                    Format::Json => OutputFormat::Json,
                    Format::Both => OutputFormat::Both,
                },
            };
            match runner::run(&exp, &opts) {
                Ok(res) => {
                    print!("{}", res.summary);
                    println!("wrote {}", res.dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    let code = runner::exit_code(&e);
                    fail(code, runner::error_kind(&e), &e.to_string(), &[])
                }
            }
        }
    }
}
