//! Optimistic logical process.
//!
//! Wraps one simulation engine in the extended parallel scheduling cycle:
//! drain requests, update the clock, save the state, handle received
//! transactions (with rollbacks), send lazy-cancellation anti-transactions,
//! move local transactions, and check memory and actuator limits. The LP
//! participates in GVT rounds, performs fossil collection on received GVTs,
//! honors the provisional-end protocol and can cancel received transactions
//! back to their senders when memory or the actuator limit demands it.

use std::any::Any;
use std::sync::Arc;

use crate::config::Config;
use crate::engine::{Engine, Transaction, TIME_INFINITE};
use crate::logging::{names, Log};
use crate::lpcc::LpControlComponent;
use crate::model::ModelSpec;
use crate::report::{LpReportFragment, LpStats};
use crate::rng::ScriptedDraws;
use crate::transport::{
    Actor, AckLedger, EndpointId, Envelope, LocalGvtParameter, Payload, Port, ProvisionalEnd,
    StepCtx, CONTROLLER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpPhase {
    Initialized,
    Simulating,
    Terminated,
}

/// One saved engine snapshot: the state at the beginning of `time`, before
/// any transactions were moved at that tick.
#[derive(Debug, Clone)]
pub struct SavedState {
    pub time: i64,
    pub snapshot: Vec<u8>,
    /// Engine move counter at save time, used for committed-move sensing.
    pub committed_move_count: u64,
    /// Receive-order watermark: records above it are not in the snapshot.
    pub receive_watermark: u64,
}

#[derive(Debug, Clone)]
pub struct SentRecord {
    pub seq: u64,
    pub dest: EndpointId,
    pub xact: Transaction,
    pub send_time: i64,
    pub rolled_back: bool,
}

#[derive(Debug, Clone)]
pub struct ReceivedRecord {
    pub sender: EndpointId,
    pub seq: u64,
    pub xact: Transaction,
    pub order: u64,
}

const BYTES_PER_STATE_OVERHEAD: u64 = 128;
const BYTES_PER_HISTORY_RECORD: u64 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LazyFlush {
    PastOnly,
    IncludeCurrentTick,
    Everything,
}

pub struct LogicalProcess {
    port: Port,
    lp_index: usize,
    phase: LpPhase,
    engine: Engine,
    state_list: Vec<SavedState>,
    sent: Vec<SentRecord>,
    received: Vec<ReceivedRecord>,
    receive_order: u64,
    input: Vec<Envelope>,
    ack_ledger: AckLedger,
    provisional_end: Option<ProvisionalEnd>,
    cancelback: bool,
    forced_gvt_times: Vec<i64>,
    gvt_requested: bool,
    last_gvt: Option<i64>,

    committed_moves: u64,
    simulated_moves: u64,
    last_engine_moves: u64,
    moves_rolled_back: u64,
    xacts_sent: u64,
    anti_xacts_sent: u64,
    xacts_received: u64,
    anti_xacts_received: u64,

    lpcc: Option<LpControlComponent>,
    lpcc_enabled: bool,
    memory_budget: u64,
    memory_limit1: u64,
    memory_limit2: u64,
    cancelback_batch: u64,

    moved_last_cycle: bool,
    fatal: Option<String>,
    log: Log,
}

impl LogicalProcess {
    /// Creates and initializes the LP for one model partition. The engine
    /// is created and its GENERATE blocks initialized here, before the
    /// scheduling loop starts.
    pub fn new(
        model: Arc<ModelSpec>,
        lp_index: usize,
        lp_count: usize,
        config: &Config,
        script: Option<ScriptedDraws>,
        log: Log,
    ) -> LogicalProcess {
        let partition_name = model
            .partition(lp_index as u32)
            .map(|p| p.name.clone())
            .unwrap_or_default();
        let mut engine = Engine::new(
            model,
            &[lp_index as u32],
            lp_count,
            config.rng_seed,
            script,
            log.clone(),
        );
        log.debug(
            names::LP,
            &format!("Simulation engine created for partition: {partition_name}"),
        );
        engine.initialize_generate_blocks();
        log.debug(
            names::LP,
            &format!("LP{lp_index} with partition '{partition_name}' initialized"),
        );
        let lpcc = if config.lpcc_stubbed_out {
            None
        } else {
            Some(LpControlComponent::new(config.lpcc_cluster_number))
        };
        LogicalProcess {
            port: Port::new(lp_index),
            lp_index,
            phase: LpPhase::Initialized,
            engine,
            state_list: Vec::new(),
            sent: Vec::new(),
            received: Vec::new(),
            receive_order: 0,
            input: Vec::new(),
            ack_ledger: AckLedger::default(),
            provisional_end: None,
            cancelback: false,
            forced_gvt_times: Vec::new(),
            gvt_requested: false,
            last_gvt: None,
            committed_moves: 0,
            simulated_moves: 0,
            last_engine_moves: 0,
            moves_rolled_back: 0,
            xacts_sent: 0,
            anti_xacts_sent: 0,
            xacts_received: 0,
            anti_xacts_received: 0,
            lpcc,
            lpcc_enabled: config.lpcc_enabled,
            memory_budget: config.memory_budget_bytes,
            memory_limit1: config.memory_limit1,
            memory_limit2: config.memory_limit2,
            cancelback_batch: config.cancelback_batch,
            moved_last_cycle: true,
            fatal: None,
            log,
        }
    }

    pub fn lp_index(&self) -> usize {
        self.lp_index
    }

    pub fn phase(&self) -> LpPhase {
        self.phase
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn last_gvt(&self) -> Option<i64> {
        self.last_gvt
    }

    pub fn saved_states(&self) -> &[SavedState] {
        &self.state_list
    }

    pub fn ack_ledger(&self) -> &AckLedger {
        &self.ack_ledger
    }

    pub fn provisional_end(&self) -> Option<&ProvisionalEnd> {
        self.provisional_end.as_ref()
    }

    pub fn in_cancelback(&self) -> bool {
        self.cancelback
    }

    pub fn lpcc(&self) -> Option<&LpControlComponent> {
        self.lpcc.as_ref()
    }

    /// The error that terminated this LP, if any.
    pub fn fatal(&self) -> Option<&str> {
        self.fatal.as_deref()
    }

    fn sync_simulated_moves(&mut self) {
        let now = self.engine.total_moves();
        if now > self.last_engine_moves {
            self.simulated_moves += now - self.last_engine_moves;
        }
        self.last_engine_moves = now;
    }

    /// Current sensor values.
    pub fn sensors(&self) -> LpStats {
        LpStats {
            committed_moves: self.committed_moves,
            moves_rolled_back: self.moves_rolled_back,
            simulated_moves: self.simulated_moves,
            xacts_sent: self.xacts_sent,
            anti_xacts_sent: self.anti_xacts_sent,
            xacts_received: self.xacts_received,
            anti_xacts_received: self.anti_xacts_received,
        }
    }

    /// Uncommitted transaction moves: moves on the current trajectory that
    /// no GVT has confirmed yet.
    pub fn uncommitted_moves(&self) -> u64 {
        self.engine.total_moves().saturating_sub(self.committed_moves)
    }

    fn fatal_error(&mut self, out: &mut Vec<Envelope>, message: String) {
        self.log.error(names::LP, &format!("LP{}: {message}", self.lp_index));
        self.fatal = Some(message.clone());
        out.push(self.port.make(
            CONTROLLER,
            Payload::ErrorReport {
                lp_index: self.lp_index,
                message,
            },
        ));
        self.phase = LpPhase::Terminated;
    }

    fn request_gvt_calculation(&mut self, out: &mut Vec<Envelope>) {
        if self.gvt_requested {
            return;
        }
        self.gvt_requested = true;
        self.log
            .debug(names::LP, "Sent GVT calculation request to SimulationController");
        out.push(self.port.make(
            CONTROLLER,
            Payload::GvtCalculationRequest {
                lp_index: self.lp_index,
            },
        ));
    }

    /// Estimated bytes retained by snapshots and history lists.
    pub fn retained_bytes(&self) -> u64 {
        let states: u64 = self
            .state_list
            .iter()
            .map(|s| s.snapshot.len() as u64 + BYTES_PER_STATE_OVERHEAD)
            .sum();
        let history =
            (self.sent.len() + self.received.len() + self.input.len()) as u64 * BYTES_PER_HISTORY_RECORD;
        states + history
    }

    fn save_current_state(&mut self) {
        if self.provisional_end.is_some() || self.cancelback {
            return;
        }
        let time = self.engine.clock();
        if self.state_list.iter().any(|s| s.time == time) {
            return;
        }
        self.store_state_at(time);
    }

    fn store_state_at(&mut self, time: i64) {
        let state = SavedState {
            time,
            snapshot: self.engine.snapshot(),
            committed_move_count: self.engine.total_moves(),
            receive_watermark: self.receive_order,
        };
        match self.state_list.iter().position(|s| s.time == time) {
            Some(i) => self.state_list[i] = state,
            None => {
                let pos = self
                    .state_list
                    .iter()
                    .position(|s| s.time > time)
                    .unwrap_or(self.state_list.len());
                self.state_list.insert(pos, state);
            }
        }
    }

    /// Rolls the engine back to the state for `time`, or the next later
    /// saved state. Re-chains received transactions the restored snapshot
    /// does not contain, marks sent transactions from the rolled-back range
    /// for lazy cancellation and clears an undone provisional end.
    pub fn rollback_state(&mut self, time: i64) {
        if let Some(gvt) = self.last_gvt {
            assert!(
                time >= gvt,
                "LP{}: rollback to {time} below GVT {gvt}",
                self.lp_index
            );
        }
        let before_clock = self.engine.clock();
        let before_moves = self.engine.total_moves();
        self.sync_simulated_moves();

        let idx = match self.state_list.iter().position(|s| s.time >= time) {
            Some(i) => i,
            None => match self.state_list.len() {
                0 => panic!("LP{}: no saved state for rollback to {time}", self.lp_index),
                n => n - 1,
            },
        };
        let restored_time = self.state_list[idx].time;
        let snapshot = self.state_list[idx].snapshot.clone();
        let watermark = self.state_list[idx].receive_watermark;
        let restored_moves = self.state_list[idx].committed_move_count;
        self.engine.restore(&snapshot);
        self.last_engine_moves = restored_moves;
        // States above the target describe undone execution. When the
        // restore fell onto a later snapshot (the target tick was never
        // visited), that snapshot's time label no longer matches the new
        // trajectory either; re-execution re-creates it.
        self.state_list.retain(|s| s.time <= time);

        for rec in &self.received {
            if rec.order > watermark && !self.engine.chain_contains_tag((rec.sender, rec.seq)) {
                self.engine.chain_in_received(rec.xact.clone());
            }
        }
        for s in &mut self.sent {
            if s.send_time >= time {
                s.rolled_back = true;
            }
        }
        if let Some(pe) = &self.provisional_end {
            if pe.time >= time {
                self.provisional_end = None;
            }
        }
        self.moves_rolled_back += before_moves.saturating_sub(restored_moves);
        self.log.debug(
            names::LP_ROLLBACK,
            &format!(
                "Rollback for time {time}, state restored for time {restored_time}, time before rollback {before_clock}"
            ),
        );
    }

    fn handle_received_transactions(&mut self, out: &mut Vec<Envelope>) {
        if self.input.is_empty() {
            return;
        }
        let batch = std::mem::take(&mut self.input);
        let mut rolled = false;
        let mut cancelbacks: Vec<(EndpointId, u64, Transaction)> = Vec::new();

        for env in batch {
            match env.payload {
                Payload::Xact(mut xact) => {
                    self.xacts_received += 1;
                    let clock = self.engine.clock();
                    let needs_rollback = xact.move_time < clock
                        || (xact.move_time == clock
                            && self
                                .engine
                                .min_moved_priority_this_tick()
                                .is_some_and(|p| xact.priority > p));
                    if needs_rollback {
                        self.rollback_state(xact.move_time);
                        rolled = true;
                    }
                    xact.receive_tag = Some((env.sender, env.seq));
                    self.receive_order += 1;
                    self.received.push(ReceivedRecord {
                        sender: env.sender,
                        seq: env.seq,
                        xact: xact.clone(),
                        order: self.receive_order,
                    });
                    self.engine.chain_in_received(xact);
                    out.push(self.port.make(
                        env.sender,
                        Payload::Ack { acked_seq: env.seq },
                    ));
                }
                Payload::AntiXact { orig_seq, move_time } => {
                    self.anti_xacts_received += 1;
                    let tag = (env.sender, orig_seq);
                    let Some(pos) = self
                        .received
                        .iter()
                        .position(|r| r.sender == env.sender && r.seq == orig_seq)
                    else {
                        self.fatal_error(
                            out,
                            format!(
                                "anti-transaction from LP{} seq {orig_seq} (time {move_time}) has no matching received transaction",
                                env.sender
                            ),
                        );
                        return;
                    };
                    let rec = self.received.remove(pos);
                    let untouched = self
                        .engine
                        .find_chain_by_tag(tag)
                        .is_some_and(|t| *t == rec.xact);
                    if !untouched {
                        self.rollback_state(rec.xact.move_time);
                        rolled = true;
                    }
                    if self.engine.remove_chain_by_tag(tag).is_none() {
                        self.fatal_error(
                            out,
                            format!(
                                "annihilated transaction {} not present after rollback",
                                rec.xact
                            ),
                        );
                        return;
                    }
                    out.push(self.port.make(
                        env.sender,
                        Payload::Ack { acked_seq: env.seq },
                    ));
                }
                Payload::Cancelback { xact, orig_seq } => {
                    cancelbacks.push((env.sender, orig_seq, xact));
                    out.push(self.port.make(
                        env.sender,
                        Payload::Ack { acked_seq: env.seq },
                    ));
                }
                other => {
                    debug_assert!(false, "unexpected payload in input list: {}", other.kind());
                }
            }
        }

        if !cancelbacks.is_empty() {
            let min_time = cancelbacks.iter().map(|(_, _, x)| x.move_time).min().unwrap();
            self.log.debug(
                names::LP,
                &format!(
                    "{} received cancelbacks require rollback to time {min_time}",
                    cancelbacks.len()
                ),
            );
            self.rollback_state(min_time);
            rolled = true;
            for (canceller, orig_seq, _) in cancelbacks {
                // Dropping the record entirely makes re-execution send the
                // transaction again as a fresh send.
                self.sent
                    .retain(|s| !(s.dest == canceller && s.seq == orig_seq));
            }
        }

        if rolled {
            // The restored snapshot's clock may lie above newly chained
            // transactions; move this cycle's work at the corrected tick.
            self.engine.update_clock();
            // The corrected state at the (possibly lowered) current tick,
            // including transactions chained in above, becomes the
            // authoritative snapshot for that tick.
            if self.provisional_end.is_none() && !self.cancelback {
                self.store_state_at(self.engine.clock());
            }
        }
    }

    /// Sends anti-transactions for sent-and-rolled-back transactions that
    /// were not re-sent in identical form. `LazyFlush::PastOnly` is the
    /// per-cycle rule (the current tick may still re-send); the wider modes
    /// run when the LP stops simulating and nothing can be re-sent anymore.
    fn send_lazy_cancellation_anti_transactions(
        &mut self,
        out: &mut Vec<Envelope>,
        flush: LazyFlush,
    ) {
        let clock = self.engine.clock();
        let mut i = 0;
        while i < self.sent.len() {
            let fire = self.sent[i].rolled_back
                && match flush {
                    LazyFlush::PastOnly => self.sent[i].send_time < clock,
                    LazyFlush::IncludeCurrentTick => self.sent[i].send_time <= clock,
                    LazyFlush::Everything => true,
                };
            if fire {
                let rec = self.sent.remove(i);
                let env = self.port.make(
                    rec.dest,
                    Payload::AntiXact {
                        orig_seq: rec.seq,
                        move_time: rec.xact.move_time,
                    },
                );
                self.ack_ledger.record(rec.dest, env.seq, rec.xact.move_time);
                self.anti_xacts_sent += 1;
                if self.log.enabled(names::LP, crate::logging::Level::Debug) {
                    self.log.debug(
                        names::LP,
                        &format!("Sent anti-transaction for {} to LP{}", rec.xact, rec.dest),
                    );
                }
                out.push(env);
            } else {
                i += 1;
            }
        }
    }

    /// Sends a transaction leaving the local partition, unless an identical
    /// rolled-back send exists, in which case the original send stands.
    fn send_outgoing_xact(&mut self, out: &mut Vec<Envelope>, xact: Transaction) {
        let dest = xact.next_block.partition_no as EndpointId;
        if let Some(rec) = self
            .sent
            .iter_mut()
            .find(|r| r.rolled_back && r.dest == dest && r.xact.same_payload(&xact))
        {
            rec.rolled_back = false;
            return;
        }
        let send_time = xact.move_time;
        let env = self.port.make(dest, Payload::Xact(xact.clone()));
        self.ack_ledger.record(dest, env.seq, send_time);
        self.sent.push(SentRecord {
            seq: env.seq,
            dest,
            xact,
            send_time,
            rolled_back: false,
        });
        self.xacts_sent += 1;
        out.push(env);
    }

    /// GVT-round parameters: the minimum over movable chain time, received
    /// but unhandled transactions and unacknowledged sends, plus the
    /// provisional end when one was reached. The chain contributes the
    /// infinite sentinel in provisional end mode or when it has nothing
    /// movable; in cancelback mode the chain minimum still counts, since the
    /// unprocessed transactions anchor the GVT until they move or leave.
    pub fn request_gvt_parameter(&self) -> LocalGvtParameter {
        let chain_min = if self.provisional_end.is_some() {
            None
        } else {
            self.engine.min_movable_time()
        };
        let input_min = self
            .input
            .iter()
            .filter_map(|env| match &env.payload {
                Payload::Xact(x) => Some(x.move_time),
                Payload::AntiXact { move_time, .. } => Some(*move_time),
                Payload::Cancelback { xact, .. } => Some(xact.move_time),
                _ => None,
            })
            .min();
        let min_time = [chain_min, input_min, self.ack_ledger.min_time()]
            .into_iter()
            .flatten()
            .min()
            .unwrap_or(TIME_INFINITE);
        LocalGvtParameter {
            lp_index: self.lp_index,
            min_time,
            provisional_end: self.provisional_end.clone(),
        }
    }

    fn describe_min_time(&self, p: &LocalGvtParameter) -> String {
        if let Some(pe) = &p.provisional_end {
            format!("Infinite (unconfirmed end of simulation for time {})", pe.time)
        } else if p.min_time == TIME_INFINITE {
            "Infinite (no movable transaction)".to_string()
        } else {
            p.min_time.to_string()
        }
    }

    /// Fossil collection on a received GVT, optionally followed by LPCC
    /// processing.
    pub fn receive_gvt(&mut self, gvt: i64, lpcc_needed: bool, now_ms: u64) {
        self.log.debug(
            names::LP,
            &format!(
                "Received new GVT of {gvt} from SimulationController, LPCC processing needed = {lpcc_needed}"
            ),
        );
        if let Some(prev) = self.last_gvt {
            assert!(gvt >= prev, "GVT regressed from {prev} to {gvt}");
        }
        self.last_gvt = Some(gvt);
        self.commit_state(gvt);
        self.gvt_requested = false;
        if lpcc_needed && self.lpcc_enabled {
            self.sync_simulated_moves();
            let sensors = self.sensors();
            if let Some(lpcc) = &mut self.lpcc {
                lpcc.process_sensor_values(now_ms, &sensors, &self.log);
            }
        }
    }

    /// Removes saved states below the GVT except the closest one, prunes
    /// history lists and advances the committed-move sensor.
    pub fn commit_state(&mut self, gvt: i64) {
        self.committed_moves = self
            .state_list
            .iter()
            .find(|s| s.time >= gvt)
            .map(|s| s.committed_move_count)
            .unwrap_or_else(|| self.engine.total_moves());
        let boundary = self
            .state_list
            .iter()
            .filter(|s| s.time < gvt)
            .map(|s| s.time)
            .max();
        if let Some(b) = boundary {
            self.state_list.retain(|s| s.time >= gvt || s.time == b);
        }
        self.sent
            .retain(|s| s.send_time >= gvt || s.rolled_back);
        self.received.retain(|r| r.xact.move_time >= gvt);
        self.log.debug(
            names::LP_COMMIT,
            &format!("Simulation state committed for time {gvt}"),
        );
    }

    /// Adds a time at which this LP must request a GVT calculation once its
    /// clock passes it.
    pub fn force_gvt_at(&mut self, time: i64) {
        self.log.debug(
            names::LP,
            &format!(
                "Received a request from other LP for local LP to initiate GVT calculation when it passed the simulation time {time}"
            ),
        );
        if !self.forced_gvt_times.contains(&time) {
            self.forced_gvt_times.push(time);
        }
    }

    /// Cancels up to `count` received transactions back to their senders,
    /// picking from the chain tail (furthest ahead in simulation time).
    fn need_to_cancel_back(&mut self, count: u64, out: &mut Vec<Envelope>) {
        let mut victims: Vec<(usize, u64)> = Vec::new();
        for t in self.engine.chain().iter().rev() {
            if victims.len() as u64 >= count {
                break;
            }
            if let Some(tag) = t.receive_tag {
                victims.push(tag);
            }
        }
        if victims.is_empty() {
            return;
        }
        // A victim that already moved must be rolled back first so that all
        // local traces of it disappear with the removal below.
        let mut rollback_to: Option<i64> = None;
        for tag in &victims {
            if let Some(rec) = self
                .received
                .iter()
                .find(|r| (r.sender, r.seq) == *tag)
            {
                let untouched = self
                    .engine
                    .find_chain_by_tag(*tag)
                    .is_some_and(|t| *t == rec.xact);
                if !untouched {
                    rollback_to = Some(match rollback_to {
                        Some(t) => t.min(rec.xact.move_time),
                        None => rec.xact.move_time,
                    });
                }
            }
        }
        if let Some(t) = rollback_to {
            self.rollback_state(t);
        }
        let mut cancelled = 0;
        for tag in victims {
            let Some(pos) = self
                .received
                .iter()
                .position(|r| (r.sender, r.seq) == tag)
            else {
                continue;
            };
            let rec = self.received.remove(pos);
            self.engine.remove_chain_by_tag(tag);
            let env = self.port.make(
                rec.sender,
                Payload::Cancelback {
                    xact: rec.xact.clone(),
                    orig_seq: rec.seq,
                },
            );
            self.ack_ledger.record(rec.sender, env.seq, rec.xact.move_time);
            out.push(env);
            cancelled += 1;
        }
        if cancelled > 0 {
            self.log.debug(
                names::LP,
                &format!("Cancelback mode cancelled back {cancelled} received transactions"),
            );
        }
    }

    fn enter_provisional_end(&mut self, out: &mut Vec<Envelope>) {
        let xact = self
            .engine
            .end_xact()
            .expect("provisional end requires an end transaction")
            .clone();
        self.log.debug(
            names::LP,
            &format!("Unconfirmed End Of Simulation reached by xact: {xact}"),
        );
        self.provisional_end = Some(ProvisionalEnd {
            time: xact.move_time,
            priority: xact.priority,
            xact,
        });
        // The move phase for this tick is over for good unless a rollback
        // revives it: flush pending lazy cancellations up to the end tick.
        self.send_lazy_cancellation_anti_transactions(out, LazyFlush::IncludeCurrentTick);
        self.gvt_requested = false;
        self.request_gvt_calculation(out);
    }

    /// Confirmed-end synchronization: roll back to the end time and replay
    /// exactly the local work a sequential run would have completed before
    /// the ending transaction terminated.
    fn end_of_simulation_by_transaction(&mut self, end_xact: Transaction, out: &mut Vec<Envelope>) {
        self.log.debug(
            names::LP,
            &format!(
                "SimulationController reported confirmed End of Simulation by xact: {end_xact}"
            ),
        );
        let own_end = self
            .provisional_end
            .as_ref()
            .is_some_and(|pe| pe.xact.id == end_xact.id && pe.time == end_xact.move_time);
        if !own_end {
            if self.engine.clock() >= end_xact.move_time {
                self.rollback_state(end_xact.move_time);
            }
            if let Err(e) = self.engine.move_transactions_for_end_replay(
                end_xact.move_time,
                end_xact.priority,
                end_xact.id,
            ) {
                self.fatal_error(out, format!("end replay failed: {e}"));
                return;
            }
            let outgoing = self.engine.take_outgoing();
            for xact in outgoing {
                self.send_outgoing_xact(out, xact);
            }
        }
        // Nothing will ever be re-sent now; cancel every remaining
        // rolled-back send, including those above the end time.
        self.send_lazy_cancellation_anti_transactions(out, LazyFlush::Everything);
        self.sync_simulated_moves();
        self.phase = LpPhase::Terminated;
        self.log.debug(
            names::LP,
            "Simulation stopped and simulation state changed to TERMINATED",
        );
        out.push(self.port.make(
            CONTROLLER,
            Payload::EndConfirm {
                lp_index: self.lp_index,
            },
        ));
    }

    /// Per-LP report fragment with statistics closed at the LP clock.
    pub fn simulation_report(&self, include_chain: bool) -> LpReportFragment {
        let stats = self.sensors();
        self.log.debug(
            names::LP_STATS,
            &format!(
                "Statistics about the simulation processing of this LP:\n\
                 Total committed transaction moves: {}\n\
                 Total transaction moves rolled back: {}\n\
                 Total simulated transaction moves: {}\n\
                 Total transactions sent: {}\n\
                 Total anti-transactions sent: {}\n\
                 Total transactions received: {}\n\
                 Total anti-transactions received: {}",
                stats.committed_moves,
                stats.moves_rolled_back,
                stats.simulated_moves,
                stats.xacts_sent,
                stats.anti_xacts_sent,
                stats.xacts_received,
                stats.anti_xacts_received
            ),
        );
        LpReportFragment {
            lp_index: self.lp_index,
            engine: self.engine.build_report(self.engine.clock()),
            stats,
            include_chain,
        }
    }

    fn memory_check(&mut self, out: &mut Vec<Envelope>) {
        let retained = self.retained_bytes();
        let free = self.memory_budget.saturating_sub(retained);
        if self.log.enabled(names::LP_MEMORY, crate::logging::Level::Debug) {
            self.log.debug(
                names::LP_MEMORY,
                &format!(
                    "Memory accounting: retained {retained} byte of budget {} byte",
                    self.memory_budget
                ),
            );
        }
        if free < self.memory_limit1 && !self.gvt_requested {
            self.request_gvt_calculation(out);
            self.log.debug(
                names::LP,
                &format!(
                    "Requested GVT calculation because memory limit 1 (free memory below {} byte) reached",
                    self.memory_limit1
                ),
            );
        }
        let memory_cb = free < self.memory_limit2;
        let uncommitted = self.uncommitted_moves();
        let actuator_cb = if self.lpcc_enabled {
            match &self.lpcc {
                Some(lpcc) if !lpcc.is_within_actuator_range(uncommitted) => {
                    lpcc.log_limit_exceeded(uncommitted, &self.log);
                    true
                }
                _ => false,
            }
        } else {
            false
        };
        let new_cb = memory_cb || actuator_cb;
        if new_cb && !self.cancelback {
            let reason = if memory_cb {
                format!(
                    "memory limit 2 (free memory below {} byte) reached",
                    self.memory_limit2
                )
            } else {
                "actuator limit reached".to_string()
            };
            self.log.debug(
                names::LP,
                &format!("Changed Cancelback mode to ON because of {reason}"),
            );
        } else if !new_cb && self.cancelback {
            self.log.debug(names::LP, "Changed Cancelback mode to OFF");
        }
        self.cancelback = new_cb;
        if self.cancelback {
            self.need_to_cancel_back(self.cancelback_batch, out);
        }
    }

    fn handle_control(&mut self, env: Envelope, now_ms: u64, out: &mut Vec<Envelope>) {
        match env.payload {
            Payload::Xact(_) | Payload::AntiXact { .. } | Payload::Cancelback { .. } => {
                self.input.push(env);
            }
            Payload::Ack { acked_seq } => {
                self.ack_ledger.acknowledge(env.sender, acked_seq);
            }
            Payload::GvtParamRequest => {
                let param = self.request_gvt_parameter();
                self.log.debug(
                    names::LP,
                    &format!(
                        "GVT parameter requested by SimulationController, min. time: {}",
                        self.describe_min_time(&param)
                    ),
                );
                out.push(self.port.make(CONTROLLER, Payload::GvtParamReply(param)));
            }
            Payload::Gvt { gvt, lpcc_needed } => self.receive_gvt(gvt, lpcc_needed, now_ms),
            Payload::ForceGvtAt { time } => self.force_gvt_at(time),
            Payload::EndByXact(xact) => self.end_of_simulation_by_transaction(xact, out),
            Payload::ReportRequest { include_chain } => {
                let fragment = self.simulation_report(include_chain);
                out.push(
                    self.port
                        .make(CONTROLLER, Payload::ReportReply(Box::new(fragment))),
                );
            }
            Payload::Terminate => {
                self.phase = LpPhase::Terminated;
            }
            _ => {}
        }
    }

    /// One extended scheduling cycle.
    fn scheduling_cycle(&mut self, out: &mut Vec<Envelope>) {
        if self.provisional_end.is_none() {
            self.engine.update_clock();
            let clock = self.engine.clock();
            let passed = self.forced_gvt_times.iter().any(|t| clock > *t);
            // An LP whose chain has run dry below a forced time can never
            // pass it; its reported minimum is final, so trigger the round
            // now instead of stalling the end confirmation forever.
            let stalled = self.engine.min_movable_time().is_none() && self.input.is_empty();
            if passed || (stalled && !self.forced_gvt_times.is_empty()) {
                if passed {
                    self.forced_gvt_times.retain(|t| clock <= *t);
                } else {
                    self.forced_gvt_times.clear();
                }
                self.request_gvt_calculation(out);
            }
        }
        self.save_current_state();
        self.handle_received_transactions(out);
        if self.phase != LpPhase::Simulating {
            return;
        }
        self.send_lazy_cancellation_anti_transactions(out, LazyFlush::PastOnly);

        let movable = self.provisional_end.is_none()
            && !self.cancelback
            && self.engine.has_movable_at_clock();
        if movable {
            match self.engine.move_all_transactions_at_current_time() {
                Ok(moved) => {
                    self.moved_last_cycle = moved > 0;
                    let outgoing = self.engine.take_outgoing();
                    for xact in outgoing {
                        self.send_outgoing_xact(out, xact);
                    }
                    if self.engine.end_reached() && self.provisional_end.is_none() {
                        self.enter_provisional_end(out);
                    }
                }
                Err(e) => {
                    self.fatal_error(out, format!("runtime error: {e}"));
                    return;
                }
            }
        } else {
            if self.moved_last_cycle {
                self.log
                    .debug(names::LP, "No transactions moved in moveTransactionsAtCurrentTime()");
            }
            self.moved_last_cycle = false;
        }
        self.sync_simulated_moves();

        if self.lpcc_enabled {
            let uncommitted = self.uncommitted_moves();
            if let Some(lpcc) = &mut self.lpcc {
                lpcc.record_cycle_sample(uncommitted);
            }
        }
        self.memory_check(out);
    }
}

impl Actor for LogicalProcess {
    fn step(&mut self, ctx: &mut StepCtx) -> bool {
        let had_mail = !ctx.inbox.is_empty();
        for env in ctx.inbox.drain(..) {
            self.handle_control(env, ctx.now_ms, &mut ctx.out);
        }
        match self.phase {
            LpPhase::Initialized => {
                self.phase = LpPhase::Simulating;
                self.log.debug(
                    names::LP,
                    "LP simulation state changed from INITIALIZED to SIMULATING",
                );
                if let Some(lpcc) = &mut self.lpcc {
                    lpcc.note_started(ctx.now_ms);
                }
                true
            }
            LpPhase::Simulating => {
                let mut out = std::mem::take(&mut ctx.out);
                self.scheduling_cycle(&mut out);
                ctx.out = out;
                true
            }
            LpPhase::Terminated => {
                // Late annihilations and cancellations still need handling
                // so reports and conservation stay clean.
                if !self.input.is_empty() {
                    let mut out = std::mem::take(&mut ctx.out);
                    self.handle_terminated_input(&mut out);
                    ctx.out = out;
                }
                had_mail
            }
        }
    }

    fn idle(&self) -> bool {
        if !self.input.is_empty() {
            return false;
        }
        match self.phase {
            LpPhase::Initialized => false,
            LpPhase::Terminated => true,
            LpPhase::Simulating => {
                if self.provisional_end.is_some() {
                    return true;
                }
                if self.cancelback {
                    return !self
                        .engine
                        .chain()
                        .iter()
                        .any(|t| t.receive_tag.is_some());
                }
                self.engine.min_movable_time().is_none()
                    && !self
                        .sent
                        .iter()
                        .any(|r| r.rolled_back && r.send_time < self.engine.clock())
            }
        }
    }

    fn done(&self) -> bool {
        self.phase == LpPhase::Terminated
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

impl LogicalProcess {
    fn handle_terminated_input(&mut self, out: &mut Vec<Envelope>) {
        let batch = std::mem::take(&mut self.input);
        for env in batch {
            match env.payload {
                Payload::AntiXact { orig_seq, .. } => {
                    let tag = (env.sender, orig_seq);
                    if let Some(pos) = self
                        .received
                        .iter()
                        .position(|r| r.sender == env.sender && r.seq == orig_seq)
                    {
                        self.received.remove(pos);
                    }
                    self.engine.remove_chain_by_tag(tag);
                    self.anti_xacts_received += 1;
                    out.push(self.port.make(
                        env.sender,
                        Payload::Ack { acked_seq: env.seq },
                    ));
                }
                Payload::Xact(_) | Payload::Cancelback { .. } => {
                    // The run has ended; acknowledge so the sender's ledger
                    // drains, but the payload no longer matters.
                    out.push(self.port.make(
                        env.sender,
                        Payload::Ack { acked_seq: env.seq },
                    ));
                }
                _ => {}
            }
        }
    }
}
