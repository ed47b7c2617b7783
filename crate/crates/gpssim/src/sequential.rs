//! Sequential reference driver.
//!
//! Simulates the whole model in one engine, all partitions merged, using the
//! same per-block draw streams and the same partitioned transaction-id
//! scheme as a parallel run. A confirmed parallel run must reach exactly
//! this end state.

use std::sync::Arc;

use crate::engine::{Engine, RuntimeError, Transaction};
use crate::logging::Log;
use crate::model::{BlockRef, ModelSpec};
use crate::report::EngineReport;
use crate::rng::ScriptedDraws;

#[derive(Debug, Clone)]
pub struct SequentialOutcome {
    pub end_time: i64,
    pub end_xact: Transaction,
    pub report: EngineReport,
    pub block_totals: Vec<(BlockRef, u64, u64)>,
    pub total_moves: u64,
}

/// Runs the model to its termination-counter end. `max_ticks` bounds the
/// number of clock updates so a model that never terminates errors out
/// instead of spinning.
pub fn run_sequential(
    model: Arc<ModelSpec>,
    seed: u64,
    script: Option<ScriptedDraws>,
    log: Log,
    max_ticks: u64,
) -> Result<SequentialOutcome, RuntimeError> {
    let partitions: Vec<u32> = model.partitions.iter().map(|p| p.number).collect();
    let mut engine = Engine::new(
        model.clone(),
        &partitions,
        partitions.len(),
        seed,
        script,
        log,
    );
    engine.initialize_generate_blocks();
    let mut ticks = 0u64;
    loop {
        if !engine.update_clock() {
            return Err(RuntimeError::Starved);
        }
        engine.move_all_transactions_at_current_time()?;
        if engine.end_reached() {
            break;
        }
        ticks += 1;
        if ticks > max_ticks {
            return Err(RuntimeError::Starved);
        }
    }
    let end_xact = engine.end_xact().expect("end transaction").clone();
    let end_time = end_xact.move_time;
    let block_totals = engine
        .block_counters()
        .iter()
        .map(|(r, c)| (*r, c.current, c.total))
        .collect();
    Ok(SequentialOutcome {
        end_time,
        end_xact,
        report: engine.build_report(end_time),
        block_totals,
        total_moves: engine.total_moves(),
    })
}
