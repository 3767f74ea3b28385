use std::process::ExitCode;

use clap::Parser;

use brw_lab::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(w) = cli.common.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: cannot start {w} workers: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
