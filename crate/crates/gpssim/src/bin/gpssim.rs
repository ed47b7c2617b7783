//! Simulator command line entry point.
//!
//! Usage: gpssim <simulation model file> [<setting>[=<value>]] [...]
//!
//! The first argument after the model file may be `ConfigFile=<path>`;
//! otherwise the arguments are configuration settings and defaults fill the
//! rest. With `ParseModelOnly` the parsed model is printed and no simulation
//! is performed. During an interactive run, G + <Enter> forces a GVT
//! calculation and X + <Enter> terminates the simulation.

use std::io::BufRead;
use std::process::ExitCode;
use std::sync::Arc;

use gpssim::config::Config;
use gpssim::logging::Log;
use gpssim::model::parse_model;
use gpssim::runner::{run_deterministic, run_threaded, RunOptions};
use gpssim::transport::{Envelope, Payload, UserCommand, CONTROLLER};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(model_file) = args.first() else {
        eprintln!("usage: gpssim <simulation model file> [<setting>[=<value>]] [...]");
        return ExitCode::FAILURE;
    };

    let config = match Config::load(&args[1..]) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::FAILURE;
        }
    };

    let text = match std::fs::read_to_string(model_file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read simulation model file '{model_file}': {e}");
            return ExitCode::FAILURE;
        }
    };

    let mut model = match parse_model(&text) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("model parse error: {e}");
            return ExitCode::FAILURE;
        }
    };

    println!("Simulation model file read and parsed successfully.");
    println!(
        "{} partition(s) found in simulation model file.",
        model.partitions.len()
    );
    println!();

    if config.log_config_details {
        eprintln!("Configuration: {config:?}");
    }

    if config.parse_model_only {
        println!("Model details:");
        print!("{}", model.render());
        return ExitCode::SUCCESS;
    }

    let unresolved = model.resolve_termination_counters(config.default_tc);
    if !unresolved.is_empty() {
        eprintln!(
            "no termination counter for partition(s) {} and no DefaultTC configured",
            unresolved.join(", ")
        );
        return ExitCode::FAILURE;
    }

    let log = Log::to_stdout(config.logger_levels.clone(), !config.deterministic);
    let model = Arc::new(model);

    let outcome = if config.deterministic {
        run_deterministic(model, &config, log, &RunOptions::default(), None).map(|(_, r)| r)
    } else {
        // Interactive command reader: G forces a GVT round, X terminates.
        let (tx, rx) = std::sync::mpsc::channel::<Envelope>();
        std::thread::spawn(move || {
            let stdin = std::io::stdin();
            for line in stdin.lock().lines() {
                let Ok(line) = line else { break };
                let cmd = match line.trim() {
                    "G" | "g" => Some(UserCommand::ForceGvt),
                    "X" | "x" => Some(UserCommand::Terminate),
                    _ => None,
                };
                if let Some(cmd) = cmd {
                    let env = Envelope {
                        sender: CONTROLLER,
                        dest: CONTROLLER,
                        seq: 0,
                        payload: Payload::User(cmd),
                    };
                    if tx.send(env).is_err() {
                        break;
                    }
                }
            }
        });
        run_threaded(model, &config, log, Some(rx))
    };

    // The combined report was already printed through the
    // simulation.report logging channels.
    match outcome {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("simulation failed: {e}");
            ExitCode::FAILURE
        }
    }
}
