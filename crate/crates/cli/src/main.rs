use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use lowflow_cli::args::{self, Cli, Command};
use lowflow_cli::error::{code, exit_code, usage, CliError};
use lowflow_cli::{Job, RunManifest};

fn execute(job: Job, manifest_path: Option<PathBuf>, argv: Vec<String>) -> Result<(), CliError> {
    let manifest_path = manifest_path.or_else(|| job.default_manifest_path());
    let mut manifest = RunManifest::start(&job, argv);
    if let Some(p) = &manifest_path {
        manifest.write(p)?;
    }
    let outcome = job.run();
    manifest.finish(&outcome);
    if let Some(p) = &manifest_path {
        manifest.write(p)?;
    }
    outcome.map(|_| ())
}

fn real_main(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("cannot set up {n} threads: {e}")))?;
    }
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Replay(r) => {
            let recorded = RunManifest::load(&r.manifest_file)?;
            let job = match r.out {
                Some(out) => recorded.config.with_out(out),
                None => recorded.config,
            };
            execute(job, cli.manifest, argv)
        }
        cmd => {
            let job = args::resolve(cmd, args::env_seed()?)?;
            execute(job, cli.manifest, argv)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::from(code::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
