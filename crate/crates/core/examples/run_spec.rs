//! Loads an experiment spec, runs it through the library runner and prints
//! where the artifacts went. Usage: `run_spec [SPEC] [OUT]`.

use std::path::PathBuf;

use grpo_lab::runner::{load_spec, run, Loaded, OutputFormat, RunOptions};

fn main() -> grpo_lab::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let spec = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("specs/scaling_law.toml"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("grpo-lab-runs"));
    let exp = match load_spec(&spec, None)? {
        Loaded::Ok(e) => e,
        Loaded::Invalid(d) => {
            for m in d {
                eprintln!("{m}");
            }
            std::process::exit(2);
        }
    };
    let res = run(&exp, &RunOptions { out, workers: None, format: OutputFormat::Both })?;
    print!("{}", res.summary);
    println!("{} -> {:?}", res.dir.display(), res.files);
    Ok(())
}
