use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mvinfo::config::Mode;
use mvinfo::run::{run, RunOptions};

/// Run an mvinfo experiment.
#[derive(Debug, Parser)]
#[command(name = "mvinfo", version)]
struct Args {
    /// One of: verify-theorems, bounds, train, eval, mi-convergence, gen-data.
    mode: Mode,
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides MVINFO_OUT and the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let opts = RunOptions {
        config: args.config,
        out: args.out,
        seeds: args.seeds,
    };
    match run(args.mode, &opts) {
        Ok(outcome) => {
            let m = &outcome.manifest;
            for c in &m.checks {
                println!("[{}] {} ({:.3e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value);
            }
            println!(
                "{}: {} seed(s), {} in {:.1}s, reports in {}",
                m.mode,
                m.results.len(),
                if m.pass { "passed" } else { "FAILED" },
                m.wall_clock_secs,
                outcome.out_dir.display()
            );
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
