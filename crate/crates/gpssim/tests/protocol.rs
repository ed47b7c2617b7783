//! Protocol-level tests that drive logical processes and the controller
//! directly with hand-built envelopes: state saving and rollback semantics,
//! fossil collection, lazy cancellation, cancelback edge cases and GVT-round
//! decisions.

#![allow(clippy::field_reassign_with_default)]

mod common;

use std::sync::Arc;

use gpssim::config::Config;
use gpssim::controller::{RunPhase, SimulationController};
use gpssim::engine::Transaction;
use gpssim::logging::{names, Log};
use gpssim::lp::LogicalProcess;
use gpssim::model::{parse_model, BlockRef};
use gpssim::rng::ScriptedDraws;
use gpssim::runner::{drive_world, RunOptions, WorldBuilder};
use gpssim::transport::{
    Actor, Envelope, LocalGvtParameter, Payload, ProvisionalEnd, StepCtx, CONTROLLER,
};

use common::*;

fn step(actor: &mut dyn Actor, inbox: Vec<Envelope>, now_ms: u64) -> Vec<Envelope> {
    let mut ctx = StepCtx {
        now_ms,
        inbox,
        out: Vec::new(),
    };
    actor.step(&mut ctx);
    ctx.out
}

fn envelope(sender: usize, dest: usize, seq: u64, payload: Payload) -> Envelope {
    Envelope {
        sender,
        dest,
        seq,
        payload,
    }
}

fn incoming_xact(id: u64, move_time: i64, priority: i64, next: BlockRef) -> Transaction {
    Transaction {
        id,
        move_time,
        priority,
        current_block: BlockRef::new(9, 9),
        next_block: next,
        origin_generate: BlockRef::new(9, 9),
        in_generate: false,
        held_facilities: Vec::new(),
        held_storage: Vec::new(),
        queue_memberships: Vec::new(),
        blocked_on: None,
        receive_tag: None,
    }
}

/// Builds an LP over a one-partition model whose clock visits exactly the
/// ticks 0, 3, 8 and 12 (then 22), with a buffered debug log.
fn fig22_lp() -> (LogicalProcess, Log) {
    let model = Arc::new(parse_model("PARTITION P,100\nGENERATE 9,8\nTERMINATE 1\n").unwrap());
    let script = ScriptedDraws::new().ticks(BlockRef::new(1, 1), &[0, 3, 5, 4, 10, 10, 10]);
    let mut config = Config::default();
    config.lpcc_enabled = false;
    let log = Log::debug_buffer();
    let lp = LogicalProcess::new(model, 1, 1, &config, Some(script), log.clone());
    (lp, log)
}

#[test]
fn state_is_saved_once_per_visited_tick() {
    let (mut lp, _log) = fig22_lp();
    for _ in 0..5 {
        step(&mut lp, Vec::new(), 0);
    }
    let times: Vec<i64> = lp.saved_states().iter().map(|s| s.time).collect();
    assert_eq!(times, vec![0, 3, 8, 12]);
}

#[test]
fn rollback_without_a_matching_state_restores_the_next_later_one() {
    let (mut lp, log) = fig22_lp();
    for _ in 0..5 {
        step(&mut lp, Vec::new(), 0);
    }
    assert_eq!(lp.engine().clock(), 12);
    // A transaction for time 5 has no snapshot; the state of time 8 is the
    // same state that existed at time 5. The injection cycle first advances
    // the clock to 22, then handles the straggler.
    let xact = incoming_xact(900, 5, 0, BlockRef::new(1, 2));
    step(
        &mut lp,
        vec![envelope(2, 1, 1, Payload::Xact(xact))],
        0,
    );
    let rollbacks = log.messages_for(names::LP_ROLLBACK);
    assert_eq!(
        rollbacks.last().unwrap(),
        "Rollback for time 5, state restored for time 8, time before rollback 22"
    );
    // The corrected snapshot for the new tick replaces the stale one.
    let times: Vec<i64> = lp.saved_states().iter().map(|s| s.time).collect();
    assert_eq!(times, vec![0, 3, 5]);
    assert_eq!(lp.engine().clock(), 5);
}

#[test]
fn rollback_to_a_saved_tick_restores_it_exactly() {
    let (mut lp, log) = fig22_lp();
    for _ in 0..5 {
        step(&mut lp, Vec::new(), 0);
    }
    let xact = incoming_xact(901, 3, 9, BlockRef::new(1, 2));
    step(&mut lp, vec![envelope(2, 1, 1, Payload::Xact(xact))], 0);
    let rollbacks = log.messages_for(names::LP_ROLLBACK);
    assert_eq!(
        rollbacks.last().unwrap(),
        "Rollback for time 3, state restored for time 3, time before rollback 22"
    );
}

#[test]
fn commit_prunes_states_and_keeps_the_boundary() {
    // gvt between saved times: keep the greatest below it.
    let (mut lp, _) = fig22_lp();
    for _ in 0..5 {
        step(&mut lp, Vec::new(), 0);
    }
    lp.commit_state(10);
    let times: Vec<i64> = lp.saved_states().iter().map(|s| s.time).collect();
    assert_eq!(times, vec![8, 12]);

    // gvt equal to a saved time: states below prune to the closest.
    let (mut lp, _) = fig22_lp();
    for _ in 0..5 {
        step(&mut lp, Vec::new(), 0);
    }
    lp.commit_state(8);
    let times: Vec<i64> = lp.saved_states().iter().map(|s| s.time).collect();
    assert_eq!(times, vec![3, 8, 12]);

    // gvt beyond all saved states: only the latest remains.
    let (mut lp, _) = fig22_lp();
    for _ in 0..5 {
        step(&mut lp, Vec::new(), 0);
    }
    lp.commit_state(20);
    let times: Vec<i64> = lp.saved_states().iter().map(|s| s.time).collect();
    assert_eq!(times, vec![12]);
}

#[test]
fn future_transaction_chains_in_without_rollback() {
    let (mut lp, log) = fig22_lp();
    for _ in 0..3 {
        step(&mut lp, Vec::new(), 0);
    }
    let before = log.messages_for(names::LP_ROLLBACK).len();
    let xact = incoming_xact(902, 50, 0, BlockRef::new(1, 2));
    step(&mut lp, vec![envelope(2, 1, 1, Payload::Xact(xact))], 0);
    assert_eq!(log.messages_for(names::LP_ROLLBACK).len(), before);
}

/// A rolled-back transfer that re-draws to a different path must emit an
/// anti-transaction for its earlier send; the newly preceding transaction's
/// own transfer takes over the draw index.
#[test]
fn diverging_reexecution_sends_an_anti_transaction() {
    let text = "PARTITION P1,100\nGENERATE 9,8\nTRANSFER 0.5,Entry2\nTERMINATE 0\nPARTITION P2,100\nEntry2 TERMINATE 1\n";
    let model = Arc::new(parse_model(text).unwrap());
    let script = ScriptedDraws::new()
        .ticks(BlockRef::new(1, 1), &[5, 10, 10, 10])
        .units(BlockRef::new(1, 2), &[0.3, 0.9, 0.9]);
    let mut config = Config::default();
    config.lpcc_enabled = false;
    let log = Log::debug_buffer();
    let mut lp = LogicalProcess::new(model, 1, 2, &config, Some(script), log.clone());

    step(&mut lp, Vec::new(), 0);
    let out = step(&mut lp, Vec::new(), 0);
    // Transaction 1 moved at tick 5, drew 0.3 <= 0.5 and crossed to LP2.
    let sent: Vec<&Envelope> = out
        .iter()
        .filter(|e| matches!(e.payload, Payload::Xact(_)))
        .collect();
    assert_eq!(sent.len(), 1);
    assert_eq!(sent[0].dest, 2);
    let original_seq = sent[0].seq;

    // A straggler for tick 3 arrives and consumes the first transfer draw;
    // transaction 1 re-executes with the next draw (0.9) and stays local.
    let straggler = incoming_xact(42, 3, 0, BlockRef::new(1, 2));
    let out = step(&mut lp, vec![envelope(3, 1, 1, Payload::Xact(straggler))], 0);
    assert!(
        out.iter().any(|e| matches!(e.payload, Payload::Xact(ref x) if x.id == 42)),
        "the straggler drew 0.3 and crossed to LP2"
    );
    let mut anti_seen = false;
    for _ in 0..4 {
        let out = step(&mut lp, Vec::new(), 0);
        for e in &out {
            if let Payload::AntiXact { orig_seq, .. } = e.payload {
                assert_eq!(e.dest, 2);
                assert_eq!(orig_seq, original_seq, "anti names the diverged send");
                anti_seen = true;
            }
        }
    }
    assert!(anti_seen, "the no longer re-sent transaction must be cancelled");
}

#[test]
fn cancelback_with_nothing_received_is_a_noop() {
    // Tight memory budget forces cancelback mode, but with no received
    // transactions the LP simply stalls without sending anything back.
    let model = Arc::new(parse_model("PARTITION P,100\nGENERATE 2,1\nTERMINATE 1\n").unwrap());
    let mut config = Config::default();
    config.lpcc_enabled = false;
    config.memory_budget_bytes = 12_000;
    config.memory_limit1 = 6_000;
    config.memory_limit2 = 5_000;
    let log = Log::debug_buffer();
    let mut lp = LogicalProcess::new(model, 1, 1, &config, None, log.clone());
    let mut cancel_messages = 0;
    for _ in 0..40 {
        let out = step(&mut lp, Vec::new(), 0);
        cancel_messages += out
            .iter()
            .filter(|e| matches!(e.payload, Payload::Cancelback { .. }))
            .count();
    }
    assert!(lp.in_cancelback(), "budget pressure must reach cancelback mode");
    assert_eq!(cancel_messages, 0, "nothing received, nothing to cancel back");
}

#[test]
fn duplicate_forced_gvt_times_trigger_one_request() {
    let (mut lp, _) = fig22_lp();
    step(&mut lp, Vec::new(), 0);
    let inbox = vec![
        envelope(0, 1, 1, Payload::ForceGvtAt { time: 5 }),
        envelope(0, 1, 2, Payload::ForceGvtAt { time: 5 }),
    ];
    let mut requests = 0;
    let out = step(&mut lp, inbox, 0);
    requests += out
        .iter()
        .filter(|e| matches!(e.payload, Payload::GvtCalculationRequest { .. }))
        .count();
    for _ in 0..4 {
        let out = step(&mut lp, Vec::new(), 0);
        requests += out
            .iter()
            .filter(|e| matches!(e.payload, Payload::GvtCalculationRequest { .. }))
            .count();
    }
    assert_eq!(requests, 1, "one request once the time is passed");
}

fn reply(lp_index: usize, min_time: i64, end: Option<(i64, i64)>) -> Envelope {
    let provisional_end = end.map(|(time, priority)| ProvisionalEnd {
        time,
        priority,
        xact: incoming_xact(7, time, priority, BlockRef::new(2, 1)),
    });
    envelope(
        lp_index,
        CONTROLLER,
        1,
        Payload::GvtParamReply(LocalGvtParameter {
            lp_index,
            min_time,
            provisional_end,
        }),
    )
}

fn fresh_controller() -> SimulationController {
    SimulationController::new(2, false, 10, false, Log::off())
}

#[test]
fn controller_confirms_an_end_all_others_have_passed() {
    let mut c = fresh_controller();
    step(&mut c, Vec::new(), 0);
    let out = step(
        &mut c,
        vec![envelope(2, 0, 1, Payload::GvtCalculationRequest { lp_index: 2 })],
        0,
    );
    assert_eq!(
        out.iter()
            .filter(|e| matches!(e.payload, Payload::GvtParamRequest))
            .count(),
        2
    );
    let out = step(
        &mut c,
        vec![
            reply(1, 26, None),
            reply(2, gpssim::engine::TIME_INFINITE, Some((11, 0))),
        ],
        0,
    );
    let ends: Vec<&Envelope> = out
        .iter()
        .filter(|e| matches!(e.payload, Payload::EndByXact(_)))
        .collect();
    assert_eq!(ends.len(), 2, "end broadcast to every LP");
    assert_eq!(c.phase(), RunPhase::Finished);
}

#[test]
fn controller_broadcasts_gvt_when_no_end_is_pending() {
    let mut c = fresh_controller();
    step(&mut c, Vec::new(), 0);
    step(
        &mut c,
        vec![envelope(1, 0, 1, Payload::GvtCalculationRequest { lp_index: 1 })],
        0,
    );
    let out = step(&mut c, vec![reply(1, 841, None), reply(2, 2154, None)], 0);
    let gvts: Vec<i64> = out
        .iter()
        .filter_map(|e| match e.payload {
            Payload::Gvt { gvt, .. } => Some(gvt),
            _ => None,
        })
        .collect();
    assert_eq!(gvts, vec![841, 841], "minimum of the reported times");
    assert_eq!(c.last_gvt(), Some(841));
}

#[test]
fn controller_forces_gvt_at_the_unconfirmed_end_time() {
    let mut c = fresh_controller();
    step(&mut c, Vec::new(), 0);
    step(
        &mut c,
        vec![envelope(1, 0, 1, Payload::GvtCalculationRequest { lp_index: 1 })],
        0,
    );
    // LP1 reports a provisional end at 84652; LP2 is still behind it.
    let out = step(
        &mut c,
        vec![
            reply(1, gpssim::engine::TIME_INFINITE, Some((84652, 0))),
            reply(2, 83196, None),
        ],
        0,
    );
    let forces: Vec<(usize, i64)> = out
        .iter()
        .filter_map(|e| match e.payload {
            Payload::ForceGvtAt { time } => Some((e.dest, time)),
            _ => None,
        })
        .collect();
    assert_eq!(forces, vec![(2, 84652)], "only the other LP is told");
    assert!(
        out.iter()
            .any(|e| matches!(e.payload, Payload::Gvt { gvt: 83196, .. })),
        "the round still broadcasts the GVT"
    );
    assert_eq!(c.phase(), RunPhase::Simulating);
}

#[test]
fn controller_picks_the_earliest_end_by_time_then_priority() {
    let mut c = fresh_controller();
    step(&mut c, Vec::new(), 0);
    step(
        &mut c,
        vec![envelope(1, 0, 1, Payload::GvtCalculationRequest { lp_index: 1 })],
        0,
    );
    let out = step(
        &mut c,
        vec![
            reply(1, gpssim::engine::TIME_INFINITE, Some((11, 2))),
            reply(2, gpssim::engine::TIME_INFINITE, Some((11, 5))),
        ],
        0,
    );
    let end_priority = out
        .iter()
        .find_map(|e| match &e.payload {
            Payload::EndByXact(x) => Some(x.priority),
            _ => None,
        })
        .expect("end confirmed");
    assert_eq!(end_priority, 5, "higher priority wins at equal time");
}

#[test]
fn deterministic_harness_runs_are_reproducible() {
    let mut traces = Vec::new();
    for _ in 0..2 {
        let m = random_model(3);
        let mut config = Config::default();
        config.rng_seed = 3;
        config.lpcc_enabled = true;
        config.lpcc_update_interval = 1;
        let log = Log::debug_buffer();
        let opts = RunOptions {
            harness_seed: 3,
            max_steps: 2_000_000,
            ..RunOptions::default()
        };
        let world = WorldBuilder::new(m, &config)
            .options(opts)
            .log(log.clone())
            .build()
            .unwrap();
        drive_world(world, 2_000_000).unwrap();
        traces.push(log.lines());
    }
    assert!(!traces[0].is_empty());
    assert_eq!(traces[0], traces[1], "same seeds give bit-identical logs");
}

#[test]
fn random_models_round_trip_through_model_text() {
    for seed in 0..60u64 {
        let m = random_model(seed);
        let again = parse_model(&m.to_model_text()).unwrap();
        assert_eq!(*m, again, "seed {seed}");
        assert_eq!(m.render(), again.render(), "seed {seed}");
    }
}

#[test]
fn transaction_conservation_holds_across_lps_at_quiescence() {
    for seed in [5u64, 9, 14] {
        let m = random_model(seed);
        let n = m.partitions.len();
        let mut config = Config::default();
        config.rng_seed = seed;
        config.lpcc_enabled = false;
        let opts = RunOptions {
            harness_seed: seed,
            max_steps: 2_000_000,
            ..RunOptions::default()
        };
        let (mut world, _) =
            gpssim::runner::run_deterministic(m, &config, Log::off(), &opts, None).unwrap();
        assert!(world.run_to_quiescence(100_000));
        let mut created = 0;
        let mut terminated = 0;
        let mut in_chains = 0;
        let mut crossed = 0;
        let mut received = 0;
        for lp in 1..=n {
            let e = world.actor::<LogicalProcess>(lp).engine();
            let (c, r, t, x) = e.counts();
            created += c;
            received += r;
            terminated += t;
            crossed += x;
            in_chains += e.chain_len() as u64;
        }
        assert_eq!(crossed, received, "seed {seed}: no transaction is in transit");
        assert_eq!(
            created,
            terminated + in_chains,
            "seed {seed}: created = terminated + in chains at quiescence"
        );
    }
}

#[test]
fn sequential_runs_are_a_pure_function_of_model_and_seed() {
    let (mut reports, mut totals) = (Vec::new(), Vec::new());
    for _ in 0..2 {
        let m = model(MODEL_VALIDATION_2);
        let out =
            gpssim::sequential::run_sequential(m, 123, None, Log::off(), 100_000).unwrap();
        totals.push(out.block_totals.clone());
        reports.push(out.report.clone());
    }
    assert_eq!(totals[0], totals[1]);
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn missing_termination_counter_is_a_startup_error() {
    let m = Arc::new(parse_model("GENERATE 1,0\nTERMINATE 1\n").unwrap());
    let err = match gpssim::runner::WorldBuilder::new(m, &Config::default()).build() {
        Err(e) => e,
        Ok(_) => panic!("model without a termination counter must not build"),
    };
    assert!(err.contains("no termination counter"), "{err}");
}

#[test]
fn ending_partition_terminate_totals_cover_its_counter() {
    // The decrements accumulated by the ending partition's TERMINATE blocks
    // must reach at least its initial termination counter.
    for seed in [0u64, 6, 13] {
        let m = random_model(seed);
        let mut config = Config::default();
        config.rng_seed = seed;
        config.lpcc_enabled = false;
        let opts = RunOptions {
            harness_seed: seed,
            max_steps: 2_000_000,
            ..RunOptions::default()
        };
        let (_, report) =
            gpssim::runner::run_deterministic(m.clone(), &config, Log::off(), &opts, None)
                .unwrap();
        let end_partition = report.end_xact.current_block.partition_no;
        let partition = m.partition(end_partition).unwrap();
        let tc = partition.termination_counter.unwrap();
        let mut decremented = 0i64;
        for (i, b) in partition.blocks.iter().enumerate() {
            if let gpssim::model::BlockKind::Terminate { decrement } = b.kind {
                let r = BlockRef::new(end_partition, i as u32 + 1);
                let total = report
                    .block_totals()
                    .iter()
                    .find(|(br, _, _)| *br == r)
                    .unwrap()
                    .2;
                decremented += decrement * total as i64;
            }
        }
        assert!(
            decremented >= tc,
            "seed {seed}: decrements {decremented} below counter {tc}"
        );
    }
}

#[test]
fn threaded_run_reaches_the_sequential_end_state() {
    let m = model(MODEL_VALIDATION_3_1);
    let mut config = Config::default();
    config.rng_seed = 4;
    config.lpcc_enabled = false;
    let report =
        gpssim::runner::run_threaded(m.clone(), &config, Log::off(), None).expect("threaded run");
    let seq = gpssim::sequential::run_sequential(m, 4, None, Log::off(), 100_000).unwrap();
    assert_eq!(report.end_time, seq.end_time);
    assert_eq!(report.end_xact.id, seq.end_xact.id);
    assert_eq!(report.block_totals(), seq.block_totals);
}

#[test]
fn runtime_errors_abort_the_run_with_diagnostics() {
    // RELEASE of a facility the transaction does not hold.
    let m = Arc::new(
        parse_model("PARTITION P,5\nGENERATE 2,0\nRELEASE F\nTERMINATE 1\nSEIZE F\n").unwrap(),
    );
    let mut config = Config::default();
    config.lpcc_enabled = false;
    let err = match gpssim::runner::run_deterministic(
        m,
        &config,
        Log::off(),
        &RunOptions::default(),
        None,
    ) {
        Err(e) => e,
        Ok(_) => panic!("the run must abort on a runtime error"),
    };
    assert!(err.contains("LP1"), "{err}");
    assert!(err.contains("released facility 'F'"), "{err}");
}

#[test]
fn single_partition_run_degenerates_to_sequential_behavior() {
    // Validation 2 with its logged draw script, through the full parallel
    // stack with one LP: identical end state and statistics, and the exact
    // frozen event trace.
    let script = ScriptedDraws::new()
        .ticks(BlockRef::new(1, 1), &[4, 3, 3, 4, 3, 2])
        .ticks(BlockRef::new(1, 4), &[5, 6, 5, 4, 5])
        .units(BlockRef::new(1, 7), &[0.3, 0.3, 0.3, 0.3]);
    let m = model(MODEL_VALIDATION_2);
    let mut config = Config::default();
    config.lpcc_enabled = false;
    let logs: Vec<Log> = (0..2).map(|_| Log::debug_buffer()).collect();
    let world = WorldBuilder::new(m.clone(), &config)
        .script(script.clone())
        .actor_logs(logs.clone())
        .build()
        .unwrap();
    let (_, report) = drive_world(world, 100_000).unwrap();
    let seq = gpssim::sequential::run_sequential(m, 0, Some(script), Log::off(), 100_000).unwrap();
    assert_eq!(report.end_time, 18);
    assert_eq!(report.end_time, seq.end_time);
    assert_eq!(report.end_xact.id, seq.end_xact.id);
    assert_eq!(report.block_totals(), seq.block_totals);
    assert_eq!(report.queues, seq.report.queues);
    assert_eq!(report.storages, seq.report.storages);
    assert_eq!(report.facilities, seq.report.facilities);

    let trace: Vec<String> = logs[1]
        .lines()
        .into_iter()
        .filter(|l| {
            l.channel.starts_with("parallelJavaGpssSimulator.gpss")
                || l.channel == "parallelJavaGpssSimulator.lp"
        })
        .map(|l| l.message)
        .collect();
    let golden = include_str!("fixtures/validation2_lp.log");
    let want: Vec<&str> = golden.lines().collect();
    assert_eq!(
        trace.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        want,
        "LP event trace must match the frozen golden log"
    );
}

#[test]
fn chain_report_section_is_included_on_request() {
    let m = model(MODEL_VALIDATION_3_1);
    let mut config = Config::default();
    config.lpcc_enabled = false;
    config.include_chain_report = true;
    let opts = RunOptions {
        harness_seed: 2,
        max_steps: 1_000_000,
        ..RunOptions::default()
    };
    config.rng_seed = 2;
    let (_, report) =
        gpssim::runner::run_deterministic(m, &config, Log::off(), &opts, None).unwrap();
    assert_eq!(report.chains.len(), 2, "one chain section per LP");
    let rendered = report.render();
    assert!(rendered.contains("Transaction chain report section (LP1):"));
    // LP1's armed generator transaction is still in its chain at the end.
    assert!(report.chains.iter().any(|(_, c)| !c.is_empty()));
}
