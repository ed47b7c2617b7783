//! Simulation run orchestration: wiring a controller and one logical
//! process per partition onto the deterministic world or the threaded
//! transport.

use std::sync::Arc;

use crate::config::Config;
use crate::controller::SimulationController;
use crate::logging::Log;
use crate::lp::LogicalProcess;
use crate::model::ModelSpec;
use crate::report::ReportSet;
use crate::rng::ScriptedDraws;
use crate::transport::{Actor, World};

/// Options for the deterministic harness.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Seed for the harness scheduling policy (not the model RNG).
    pub harness_seed: u64,
    /// Steps per round granted to each actor; index 0 is the controller.
    pub weights: Option<Vec<u64>>,
    /// Virtual milliseconds one harness step represents.
    pub ms_per_step: u64,
    /// Step budget before the run is declared stuck.
    pub max_steps: u64,
}

impl Default for RunOptions {
    fn default() -> RunOptions {
        RunOptions {
            harness_seed: 0,
            weights: None,
            ms_per_step: 1,
            max_steps: 50_000_000,
        }
    }
}

fn check_model(model: &ModelSpec) -> Result<(), String> {
    let unresolved: Vec<String> = model
        .partitions
        .iter()
        .filter(|p| p.termination_counter.is_none())
        .map(|p| p.name.clone())
        .collect();
    if unresolved.is_empty() {
        Ok(())
    } else {
        Err(format!(
            "no termination counter for partition(s) {} and no DefaultTC configured",
            unresolved.join(", ")
        ))
    }
}

/// Assembles a deterministic world: controller at endpoint 0 and one LP per
/// partition at endpoints 1..=n. Per-actor logs and draw scripts are
/// optional; by default everything shares one log.
pub struct WorldBuilder {
    model: Arc<ModelSpec>,
    config: Config,
    opts: RunOptions,
    log: Log,
    actor_logs: Option<Vec<Log>>,
    script: Option<ScriptedDraws>,
}

impl WorldBuilder {
    pub fn new(model: Arc<ModelSpec>, config: &Config) -> WorldBuilder {
        WorldBuilder {
            model,
            config: config.clone(),
            opts: RunOptions::default(),
            log: Log::off(),
            actor_logs: None,
            script: None,
        }
    }

    pub fn options(mut self, opts: RunOptions) -> WorldBuilder {
        self.opts = opts;
        self
    }

    pub fn log(mut self, log: Log) -> WorldBuilder {
        self.log = log;
        self
    }

    /// One log per endpoint (index 0 = controller, then LP1..LPn).
    pub fn actor_logs(mut self, logs: Vec<Log>) -> WorldBuilder {
        self.actor_logs = Some(logs);
        self
    }

    pub fn script(mut self, script: ScriptedDraws) -> WorldBuilder {
        self.script = Some(script);
        self
    }

    pub fn build(self) -> Result<World, String> {
        check_model(&self.model)?;
        let n = self.model.partitions.len();
        if let Some(logs) = &self.actor_logs {
            if logs.len() != n + 1 {
                return Err(format!("expected {} actor logs, got {}", n + 1, logs.len()));
            }
        }
        let log_for = |i: usize| -> Log {
            match &self.actor_logs {
                Some(logs) => logs[i].clone(),
                None => self.log.clone(),
            }
        };
        let mut actors: Vec<Box<dyn Actor>> = Vec::with_capacity(n + 1);
        actors.push(Box::new(SimulationController::new(
            n,
            self.config.lpcc_enabled,
            self.config.lpcc_update_interval,
            self.config.include_chain_report,
            log_for(0),
        )));
        for lp in 1..=n {
            actors.push(Box::new(LogicalProcess::new(
                self.model.clone(),
                lp,
                n,
                &self.config,
                self.script.clone(),
                log_for(lp),
            )));
        }
        let weights = self
            .opts
            .weights
            .clone()
            .unwrap_or_else(|| vec![1; actors.len()]);
        Ok(World::new(
            actors,
            self.opts.harness_seed,
            &weights,
            self.opts.ms_per_step,
        ))
    }
}

/// Steps a built world until the controller finishes; returns the world for
/// inspection plus the assembled report.
pub fn drive_world(mut world: World, max_steps: u64) -> Result<(World, ReportSet), String> {
    world.run_until(max_steps, |w| {
        w.actors[0]
            .as_any()
            .downcast_ref::<SimulationController>()
            .map(|c| c.done())
            .unwrap_or(true)
    });
    let outcome = world
        .actor::<SimulationController>(0)
        .outcome()
        .cloned()
        .ok_or_else(|| "run did not finish within the step budget".to_string())?;
    match outcome {
        Ok(report) => Ok((world, report)),
        Err(e) => Err(e),
    }
}

/// Runs the model on the deterministic harness until the controller
/// finishes; returns the world (for inspection) and the outcome.
pub fn run_deterministic(
    model: Arc<ModelSpec>,
    config: &Config,
    log: Log,
    opts: &RunOptions,
    script: Option<ScriptedDraws>,
) -> Result<(World, ReportSet), String> {
    let max_steps = opts.max_steps;
    let mut builder = WorldBuilder::new(model, config)
        .options(opts.clone())
        .log(log);
    if let Some(s) = script {
        builder = builder.script(s);
    }
    drive_world(builder.build()?, max_steps)
}

/// Runs the model on the threaded transport (one thread per actor). Used by
/// the interactive CLI.
pub fn run_threaded(
    model: Arc<ModelSpec>,
    config: &Config,
    log: Log,
    user_input: Option<std::sync::mpsc::Receiver<crate::transport::Envelope>>,
) -> Result<ReportSet, String> {
    check_model(&model)?;
    let n = model.partitions.len();
    let mut actors: Vec<Box<dyn Actor + Send>> = Vec::with_capacity(n + 1);
    actors.push(Box::new(SimulationController::new(
        n,
        config.lpcc_enabled,
        config.lpcc_update_interval,
        config.include_chain_report,
        log.clone(),
    )));
    for lp in 1..=n {
        actors.push(Box::new(LogicalProcess::new(
            model.clone(),
            lp,
            n,
            config,
            None,
            log.clone(),
        )));
    }
    let finished = crate::transport::run_threaded(actors, user_input);
    let controller = finished[0]
        .as_any()
        .downcast_ref::<SimulationController>()
        .expect("controller type");
    controller
        .outcome()
        .cloned()
        .unwrap_or_else(|| Err("simulation ended without an outcome".to_string()))
}
