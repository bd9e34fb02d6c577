use std::io;
use std::process::ExitCode;

use clap::Parser;
use swdist_gate::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Not locked up front: the server prints from other threads.
    match run(&cli, &mut io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("swdist: {}", report(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error and its causes, skipping causes already spelled out above them.
fn report(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}
