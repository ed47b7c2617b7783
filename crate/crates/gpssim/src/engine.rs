//! Sequential GPSS kernel for one or more model partitions.
//!
//! The engine owns the transaction chain, the simulation clock, the entity
//! states and the statistics accumulators of the partitions it simulates. A
//! logical process wraps an engine over exactly one partition; the reference
//! sequential driver wraps an engine over all partitions of a model. The
//! dynamic part of the engine is serializable as one unit so a logical
//! process can snapshot and restore it for rollbacks.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logging::{names, Log};
use crate::model::{BlockKind, BlockRef, ModelSpec};
use crate::report::{BlockRow, EngineReport, FacilityRow, PartitionBlocks, QueueRow, StorageRow};
use crate::rng::{DrawStreams, ScriptedDraws};

/// Sentinel for "infinite" simulation times in GVT parameters and logs.
pub const TIME_INFINITE: i64 = i64::MAX;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityKey {
    pub partition: u32,
    pub name: String,
}

impl EntityKey {
    fn new(partition: u32, name: &str) -> EntityKey {
        EntityKey {
            partition,
            name: name.to_string(),
        }
    }
}

/// The mobile GPSS entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: u64,
    pub move_time: i64,
    pub priority: i64,
    pub current_block: BlockRef,
    pub next_block: BlockRef,
    pub origin_generate: BlockRef,
    /// Still inside its generating block; cleared when the GENERATE executes
    /// on leave.
    pub in_generate: bool,
    pub held_facilities: Vec<(EntityKey, i64)>,
    pub held_storage: Vec<(EntityKey, (i64, i64))>,
    pub queue_memberships: Vec<(EntityKey, i64)>,
    pub blocked_on: Option<EntityKey>,
    /// Set when this transaction was received from another logical process:
    /// (sender endpoint, send sequence). Used to match anti-transactions and
    /// to identify received transactions for cancelback.
    pub receive_tag: Option<(usize, u64)>,
}

impl fmt::Display for Transaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "xact(Id: {}, move time: {}, current block: {}, next block: {})",
            self.id, self.move_time, self.current_block, self.next_block
        )
    }
}

impl Transaction {
    /// Payload identity used by lazy cancellation to detect an identical
    /// re-send after a rollback.
    pub fn same_payload(&self, other: &Transaction) -> bool {
        self.id == other.id
            && self.move_time == other.move_time
            && self.priority == other.priority
            && self.current_block == other.current_block
            && self.next_block == other.next_block
            && self.held_facilities == other.held_facilities
            && self.held_storage == other.held_storage
            && self.queue_memberships == other.queue_memberships
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveOutcome {
    Continued,
    Delayed,
    Blocked,
    Terminated,
    CrossedPartition,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RuntimeError {
    #[error("transaction {xact} released facility '{name}' which it does not hold")]
    ReleaseNotHeld { xact: u64, name: String },
    #[error("transaction {xact} leaves {units} units of storage '{name}' but holds {held}")]
    LeaveExceedsHeld {
        xact: u64,
        name: String,
        units: i64,
        held: i64,
    },
    #[error("transaction {xact} departs queue '{name}' which it never entered")]
    DepartNotMember { xact: u64, name: String },
    #[error("transaction {xact} fell off the end of partition {partition}")]
    FellOffEnd { xact: u64, partition: u32 },
    #[error("no movable transaction remains but the simulation has not ended")]
    Starved,
    #[error("invalid block reference {0}")]
    InvalidBlockRef(BlockRef),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityState {
    pub owner: Option<u64>,
    pub seize_tick: i64,
    pub captures: u64,
    pub busy_ticks: i64,
    pub last_tick: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageState {
    pub capacity: i64,
    pub available: i64,
    pub entries: u64,
    pub unit_ticks: i64,
    pub last_tick: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    pub content: i64,
    pub max_content: i64,
    pub entries: u64,
    pub zero_entries: u64,
    pub content_ticks: i64,
    pub last_tick: i64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockCounts {
    pub current: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct GenerateState {
    remaining: Option<i64>,
}

/// The serializable dynamic state of an engine. Restoring a serialized
/// state reproduces the engine bit for bit, including the draw-stream
/// counters, so re-execution after a rollback replays identical draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub clock: i64,
    chain: Vec<Transaction>,
    facilities: Vec<(EntityKey, FacilityState)>,
    storages: Vec<(EntityKey, StorageState)>,
    queues: Vec<(EntityKey, QueueState)>,
    termination_counters: Vec<(u32, i64)>,
    id_alloc: Vec<(u32, u64)>,
    id_stride: u64,
    generate_states: Vec<(BlockRef, GenerateState)>,
    block_counters: Vec<(BlockRef, BlockCounts)>,
    total_moves: u64,
    rng: DrawStreams,
    end_xact: Option<Transaction>,
    out_list: Vec<Transaction>,
    moved_tick: i64,
    moved_min_priority: Option<i64>,
    created: u64,
    received_in: u64,
    terminated: u64,
    crossed_out: u64,
}

pub struct Engine {
    model: Arc<ModelSpec>,
    local_partitions: Vec<u32>,
    state: EngineState,
    log: Log,
}

impl Engine {
    /// Builds an engine over `local_partitions` of `model`. `total_lp_count`
    /// is the total number of partitions in the whole simulation; it defines
    /// the transaction id stride so ids stay globally unique.
    pub fn new(
        model: Arc<ModelSpec>,
        local_partitions: &[u32],
        total_lp_count: usize,
        seed: u64,
        script: Option<ScriptedDraws>,
        log: Log,
    ) -> Engine {
        let mut facilities = Vec::new();
        let mut storages = Vec::new();
        let mut queues = Vec::new();
        let mut termination_counters = Vec::new();
        let mut id_alloc = Vec::new();
        let mut generate_states = Vec::new();
        let mut block_counters = Vec::new();
        for &pno in local_partitions {
            let p = model.partition(pno).expect("partition exists");
            for name in &p.facilities {
                facilities.push((
                    EntityKey::new(pno, name),
                    FacilityState {
                        owner: None,
                        seize_tick: 0,
                        captures: 0,
                        busy_ticks: 0,
                        last_tick: 0,
                    },
                ));
            }
            for (name, capacity) in &p.storages {
                storages.push((
                    EntityKey::new(pno, name),
                    StorageState {
                        capacity: *capacity,
                        available: *capacity,
                        entries: 0,
                        unit_ticks: 0,
                        last_tick: 0,
                    },
                ));
            }
            for name in &p.queues {
                queues.push((
                    EntityKey::new(pno, name),
                    QueueState {
                        content: 0,
                        max_content: 0,
                        entries: 0,
                        zero_entries: 0,
                        content_ticks: 0,
                        last_tick: 0,
                    },
                ));
            }
            termination_counters.push((pno, p.termination_counter.unwrap_or(0)));
            id_alloc.push((pno, pno as u64));
            for (i, b) in p.blocks.iter().enumerate() {
                let r = BlockRef::new(pno, i as u32 + 1);
                block_counters.push((r, BlockCounts::default()));
                if let BlockKind::Generate { limit, .. } = b.kind {
                    generate_states.push((r, GenerateState { remaining: limit }));
                }
            }
        }
        let rng = match script {
            Some(s) => DrawStreams::with_script(seed, s),
            None => DrawStreams::new(seed),
        };
        Engine {
            model,
            local_partitions: local_partitions.to_vec(),
            state: EngineState {
                clock: 0,
                chain: Vec::new(),
                facilities,
                storages,
                queues,
                termination_counters,
                id_alloc,
                id_stride: total_lp_count as u64,
                generate_states,
                block_counters,
                total_moves: 0,
                rng,
                end_xact: None,
                out_list: Vec::new(),
                moved_tick: -1,
                moved_min_priority: None,
                created: 0,
                received_in: 0,
                terminated: 0,
                crossed_out: 0,
            },
            log,
        }
    }

    pub fn model(&self) -> &Arc<ModelSpec> {
        &self.model
    }

    pub fn clock(&self) -> i64 {
        self.state.clock
    }

    pub fn total_moves(&self) -> u64 {
        self.state.total_moves
    }

    pub fn end_xact(&self) -> Option<&Transaction> {
        self.state.end_xact.as_ref()
    }

    pub fn end_reached(&self) -> bool {
        self.state.end_xact.is_some()
    }

    pub fn chain(&self) -> &[Transaction] {
        &self.state.chain
    }

    pub fn chain_len(&self) -> usize {
        self.state.chain.len()
    }

    pub fn counts(&self) -> (u64, u64, u64, u64) {
        (
            self.state.created,
            self.state.received_in,
            self.state.terminated,
            self.state.crossed_out,
        )
    }

    pub fn block_counters(&self) -> &[(BlockRef, BlockCounts)] {
        &self.state.block_counters
    }

    fn is_local(&self, r: BlockRef) -> bool {
        self.local_partitions.contains(&r.partition_no)
    }

    /// Allocates the next transaction id for a partition. Ids are
    /// partitioned by initializing each counter with the partition number
    /// and striding by the total partition count.
    pub fn next_transaction_id(&mut self, partition: u32) -> u64 {
        let stride = self.state.id_stride;
        let entry = self
            .state
            .id_alloc
            .iter_mut()
            .find(|(p, _)| *p == partition)
            .expect("id allocator for partition");
        let id = entry.1;
        entry.1 += stride;
        id
    }

    fn counters_mut(&mut self, r: BlockRef) -> Option<&mut BlockCounts> {
        self.state
            .block_counters
            .iter_mut()
            .find(|(b, _)| *b == r)
            .map(|(_, c)| c)
    }

    fn facility_mut(&mut self, key: &EntityKey) -> &mut FacilityState {
        self.state
            .facilities
            .iter_mut()
            .find(|(k, _)| k == key)
            .map(|(_, s)| s)
            .expect("facility state")
    }

    fn storage_mut(&mut self, key: &EntityKey) -> &mut StorageState {
        self.state
            .storages
            .iter_mut()
            .find(|(k, _)| k == key)
            .map(|(_, s)| s)
            .expect("storage state")
    }

    fn queue_mut(&mut self, key: &EntityKey) -> &mut QueueState {
        self.state
            .queues
            .iter_mut()
            .find(|(k, _)| k == key)
            .map(|(_, s)| s)
            .expect("queue state")
    }

    /// Creates the first transaction of every GENERATE block.
    pub fn initialize_generate_blocks(&mut self) {
        self.log.debug(names::GPSS, "Initialize GENERATE blocks");
        for &pno in &self.local_partitions.clone() {
            let partition = self.model.partition(pno).expect("partition").clone();
            for (i, b) in partition.blocks.iter().enumerate() {
                let r = BlockRef::new(pno, i as u32 + 1);
                if let BlockKind::Generate {
                    avg_interarrival,
                    half_range,
                    offset,
                    priority,
                    ..
                } = b.kind
                {
                    let remaining = self
                        .state
                        .generate_states
                        .iter()
                        .find(|(gr, _)| *gr == r)
                        .and_then(|(_, g)| g.remaining);
                    if remaining == Some(0) {
                        continue;
                    }
                    let move_time = match offset {
                        Some(o) => o,
                        None => self.state.rng.uniform_ticks(r, avg_interarrival, half_range),
                    };
                    let id = self.next_transaction_id(pno);
                    let next = self.model.following(r).unwrap_or(r);
                    let xact = Transaction {
                        id,
                        move_time,
                        priority,
                        current_block: r,
                        next_block: next,
                        origin_generate: r,
                        in_generate: true,
                        held_facilities: Vec::new(),
                        held_storage: Vec::new(),
                        queue_memberships: Vec::new(),
                        blocked_on: None,
                        receive_tag: None,
                    };
                    self.state.created += 1;
                    if let Some(g) = self
                        .state
                        .generate_states
                        .iter_mut()
                        .find(|(gr, _)| *gr == r)
                    {
                        if let Some(rem) = &mut g.1.remaining {
                            *rem -= 1;
                        }
                    }
                    if let Some(c) = self.counters_mut(r) {
                        c.current += 1;
                    }
                    self.chain_in(xact);
                }
            }
        }
        self.log.debug(names::GPSS, "GENERATE blocks initialized");
    }

    /// Inserts a transaction at its sorted chain position: ascending move
    /// time, descending priority within a time, insertion order within equal
    /// time and priority.
    pub fn chain_in(&mut self, xact: Transaction) {
        if self.log.enabled(names::GPSS, crate::logging::Level::Debug) {
            self.log.debug(names::GPSS, &format!("{xact} chained in"));
        }
        let key = (xact.move_time, std::cmp::Reverse(xact.priority));
        let pos = self
            .state
            .chain
            .iter()
            .position(|t| (t.move_time, std::cmp::Reverse(t.priority)) > key)
            .unwrap_or(self.state.chain.len());
        self.state.chain.insert(pos, xact);
    }

    /// Chains in a transaction received from another logical process.
    pub fn chain_in_received(&mut self, xact: Transaction) {
        self.state.received_in += 1;
        self.chain_in(xact);
    }

    /// Minimum move time over movable (not blocked) chain members.
    pub fn min_movable_time(&self) -> Option<i64> {
        self.state
            .chain
            .iter()
            .filter(|t| t.blocked_on.is_none())
            .map(|t| t.move_time)
            .min()
    }

    pub fn has_movable_at_clock(&self) -> bool {
        self.state
            .chain
            .iter()
            .any(|t| t.blocked_on.is_none() && t.move_time == self.state.clock)
    }

    /// Sets the clock to the move time of the earliest movable transaction.
    /// Returns false and leaves the clock unchanged when nothing is movable.
    pub fn update_clock(&mut self) -> bool {
        match self.min_movable_time() {
            Some(t) => {
                if t != self.state.clock {
                    self.state.clock = t;
                }
                self.log.debug(
                    names::GPSS,
                    &format!("Local simulation clock updated to {t}"),
                );
                true
            }
            None => false,
        }
    }

    /// Lowest priority moved at the current clock tick, if any.
    pub fn min_moved_priority_this_tick(&self) -> Option<i64> {
        if self.state.moved_tick == self.state.clock {
            self.state.moved_min_priority
        } else {
            None
        }
    }

    fn note_move(&mut self, priority: i64) {
        if self.state.moved_tick != self.state.clock {
            self.state.moved_tick = self.state.clock;
            self.state.moved_min_priority = Some(priority);
        } else {
            let m = self.state.moved_min_priority.get_or_insert(priority);
            *m = (*m).min(priority);
        }
    }

    /// Removes and returns the first chain member that is movable at the
    /// current simulation time.
    pub fn chain_out_next_movable_for_current_time(&mut self) -> Option<Transaction> {
        let clock = self.state.clock;
        let pos = self
            .state
            .chain
            .iter()
            .position(|t| t.blocked_on.is_none() && t.move_time == clock)?;
        let xact = self.state.chain.remove(pos);
        if self.log.enabled(names::GPSS, crate::logging::Level::Debug) {
            self.log.debug(names::GPSS, &format!("{xact} chained out"));
        }
        Some(xact)
    }

    /// Moves all movable transactions for the current simulation time.
    /// Stops immediately when a termination counter reaches zero or less.
    /// Returns the number of transactions moved.
    pub fn move_all_transactions_at_current_time(&mut self) -> Result<u64, RuntimeError> {
        let mut moved = 0;
        loop {
            if self.end_reached() {
                break;
            }
            let Some(xact) = self.chain_out_next_movable_for_current_time() else {
                break;
            };
            self.move_transaction(xact)?;
            moved += 1;
        }
        Ok(moved)
    }

    /// Moves one transaction as far as possible: executes its GENERATE on
    /// leave if it is still inside one, then executes following blocks until
    /// it is delayed, blocked, terminated or leaves the local partitions.
    pub fn move_transaction(&mut self, mut xact: Transaction) -> Result<MoveOutcome, RuntimeError> {
        if self.log.enabled(names::GPSS, crate::logging::Level::Debug) {
            self.log.debug(names::GPSS, &format!("Move {xact}"));
        }
        self.state.total_moves += 1;
        self.note_move(xact.priority);

        if xact.in_generate {
            self.execute_generate_leave(&mut xact)?;
        }
        let outcome = loop {
            let next = xact.next_block;
            if !self.is_local(next) {
                // Leaves the local partitions; the owning LP sends it on.
                if let Some(c) = self.counters_mut(xact.current_block) {
                    c.current = c.current.saturating_sub(1);
                }
                self.state.crossed_out += 1;
                if self.log.enabled(names::GPSS, crate::logging::Level::Debug) {
                    self.log.debug(names::GPSS, &format!("Finished moving {xact}"));
                }
                self.state.out_list.push(xact);
                return Ok(MoveOutcome::CrossedPartition);
            }
            if next == xact.current_block && !xact.in_generate {
                // A transaction may sit on the partition's last block only
                // after a TERMINATE; anything else has fallen off the model.
                return Err(RuntimeError::FellOffEnd {
                    xact: xact.id,
                    partition: next.partition_no,
                });
            }
            match self.execute_block(&mut xact, next)? {
                MoveOutcome::Continued => continue,
                other => break other,
            }
        };
        if self.log.enabled(names::GPSS, crate::logging::Level::Debug) {
            self.log.debug(names::GPSS, &format!("Finished moving {xact}"));
        }
        match outcome {
            MoveOutcome::Delayed | MoveOutcome::Blocked => self.chain_in(xact),
            MoveOutcome::Terminated => {}
            _ => unreachable!("move loop only breaks on delayed/blocked/terminated"),
        }
        Ok(outcome)
    }

    fn execute_generate_leave(&mut self, xact: &mut Transaction) -> Result<(), RuntimeError> {
        let r = xact.origin_generate;
        let block = self
            .model
            .block_at(r)
            .ok_or(RuntimeError::InvalidBlockRef(r))?
            .clone();
        if let BlockKind::Generate {
            avg_interarrival,
            half_range,
            priority,
            ..
        } = block.kind
        {
            let remaining = self
                .state
                .generate_states
                .iter()
                .find(|(gr, _)| *gr == r)
                .and_then(|(_, g)| g.remaining);
            if remaining != Some(0) {
                let draw = self.state.rng.uniform_ticks(r, avg_interarrival, half_range);
                let id = self.next_transaction_id(r.partition_no);
                let next = self.model.following(r).unwrap_or(r);
                let successor = Transaction {
                    id,
                    move_time: self.state.clock + draw,
                    priority,
                    current_block: r,
                    next_block: next,
                    origin_generate: r,
                    in_generate: true,
                    held_facilities: Vec::new(),
                    held_storage: Vec::new(),
                    queue_memberships: Vec::new(),
                    blocked_on: None,
                    receive_tag: None,
                };
                self.state.created += 1;
                if let Some(g) = self
                    .state
                    .generate_states
                    .iter_mut()
                    .find(|(gr, _)| *gr == r)
                {
                    if let Some(rem) = &mut g.1.remaining {
                        *rem -= 1;
                    }
                }
                if let Some(c) = self.counters_mut(r) {
                    c.current += 1;
                }
                self.chain_in(successor);
            }
            xact.in_generate = false;
            if let Some(c) = self.counters_mut(r) {
                c.total += 1;
            }
            if self.log.enabled(names::GPSS, crate::logging::Level::Debug) {
                self.log.debug(
                    names::GPSS,
                    &format!("{xact} executed block {r} Block: {}", self.model.block_text(r)),
                );
            }
        }
        Ok(())
    }

    /// Executes one block with a transaction entering it.
    pub fn execute_block(
        &mut self,
        xact: &mut Transaction,
        r: BlockRef,
    ) -> Result<MoveOutcome, RuntimeError> {
        let block = self
            .model
            .block_at(r)
            .ok_or(RuntimeError::InvalidBlockRef(r))?
            .clone();
        let clock = self.state.clock;

        // SEIZE and ENTER refuse entry when the entity is unavailable; the
        // transaction then stays at its previous block, flagged blocked.
        match &block.kind {
            BlockKind::Seize { facility } => {
                let key = EntityKey::new(r.partition_no, facility);
                if self.facility_mut(&key).owner.is_some() {
                    xact.blocked_on = Some(key);
                    return Ok(MoveOutcome::Blocked);
                }
            }
            BlockKind::Enter {
                storage,
                usage_count,
            } => {
                let key = EntityKey::new(r.partition_no, storage);
                if self.storage_mut(&key).available < *usage_count {
                    xact.blocked_on = Some(key);
                    return Ok(MoveOutcome::Blocked);
                }
            }
            _ => {}
        }

        // Enter the block: transfer residency, advance the default next
        // block (TRANSFER may overwrite it below) and count the execution.
        if let Some(c) = self.counters_mut(xact.current_block) {
            c.current = c.current.saturating_sub(1);
        }
        xact.current_block = r;
        xact.next_block = self.model.following(r).unwrap_or(r);
        if let Some(c) = self.counters_mut(r) {
            c.current += 1;
            c.total += 1;
        }

        let outcome = match block.kind {
            BlockKind::Generate {
                avg_interarrival,
                half_range,
                ..
            } => {
                // Entering a GENERATE via TRANSFER is degenerate; treat it
                // like the leave execution and continue.
                let _ = (avg_interarrival, half_range);
                MoveOutcome::Continued
            }
            BlockKind::Advance {
                avg_hold,
                half_range,
            } => {
                let draw = self.state.rng.uniform_ticks(r, avg_hold, half_range);
                if draw > 0 {
                    xact.move_time = clock + draw;
                    MoveOutcome::Delayed
                } else {
                    MoveOutcome::Continued
                }
            }
            BlockKind::Seize { facility } => {
                let key = EntityKey::new(r.partition_no, &facility);
                let f = self.facility_mut(&key);
                f.busy_ticks += 0; // owner was None; nothing to integrate
                f.owner = Some(xact.id);
                f.seize_tick = clock;
                f.last_tick = clock;
                f.captures += 1;
                xact.held_facilities.push((key, clock));
                MoveOutcome::Continued
            }
            BlockKind::Release { facility } => {
                let key = EntityKey::new(r.partition_no, &facility);
                let held = xact.held_facilities.iter().position(|(k, _)| *k == key);
                let f = self.facility_mut(&key);
                if f.owner != Some(xact.id) || held.is_none() {
                    return Err(RuntimeError::ReleaseNotHeld {
                        xact: xact.id,
                        name: facility,
                    });
                }
                f.busy_ticks += clock - f.last_tick;
                f.last_tick = clock;
                f.owner = None;
                let (_, seized_at) = xact.held_facilities.remove(held.unwrap());
                if self
                    .log
                    .enabled(names::GPSS_FACILITY, crate::logging::Level::Debug)
                {
                    self.log.debug(
                        names::GPSS_FACILITY,
                        &format!(
                            "Facility: {facility}, Xact id: {}, seized at time: {seized_at}, released at time: {clock}",
                            xact.id
                        ),
                    );
                }
                self.unblock_waiters(&key);
                MoveOutcome::Continued
            }
            BlockKind::Enter {
                storage,
                usage_count,
            } => {
                let key = EntityKey::new(r.partition_no, &storage);
                let s = self.storage_mut(&key);
                s.unit_ticks += (s.capacity - s.available) * (clock - s.last_tick);
                s.last_tick = clock;
                s.available -= usage_count;
                s.entries += 1;
                match xact.held_storage.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, (units, _))) => *units += usage_count,
                    None => xact.held_storage.push((key, (usage_count, clock))),
                }
                MoveOutcome::Continued
            }
            BlockKind::Leave {
                storage,
                usage_count,
            } => {
                let key = EntityKey::new(r.partition_no, &storage);
                let held_units = xact
                    .held_storage
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, (u, _))| *u)
                    .unwrap_or(0);
                if held_units < usage_count {
                    return Err(RuntimeError::LeaveExceedsHeld {
                        xact: xact.id,
                        name: storage,
                        units: usage_count,
                        held: held_units,
                    });
                }
                let s = self.storage_mut(&key);
                s.unit_ticks += (s.capacity - s.available) * (clock - s.last_tick);
                s.last_tick = clock;
                s.available += usage_count;
                let idx = xact
                    .held_storage
                    .iter()
                    .position(|(k, _)| *k == key)
                    .unwrap();
                let entered_at = xact.held_storage[idx].1 .1;
                xact.held_storage[idx].1 .0 -= usage_count;
                if xact.held_storage[idx].1 .0 == 0 {
                    xact.held_storage.remove(idx);
                }
                if self
                    .log
                    .enabled(names::GPSS_STORAGE, crate::logging::Level::Debug)
                {
                    self.log.debug(
                        names::GPSS_STORAGE,
                        &format!(
                            "Storage: {storage}, Xact id: {}, entered at time: {entered_at}, left at time: {clock}, used capacity: {usage_count}",
                            xact.id
                        ),
                    );
                }
                self.unblock_waiters(&key);
                MoveOutcome::Continued
            }
            BlockKind::Queue { queue } => {
                let key = EntityKey::new(r.partition_no, &queue);
                let q = self.queue_mut(&key);
                q.content_ticks += q.content * (clock - q.last_tick);
                q.last_tick = clock;
                q.content += 1;
                q.max_content = q.max_content.max(q.content);
                q.entries += 1;
                xact.queue_memberships.push((key, clock));
                MoveOutcome::Continued
            }
            BlockKind::Depart { queue } => {
                let key = EntityKey::new(r.partition_no, &queue);
                let idx = xact
                    .queue_memberships
                    .iter()
                    .position(|(k, _)| *k == key)
                    .ok_or_else(|| RuntimeError::DepartNotMember {
                        xact: xact.id,
                        name: queue.clone(),
                    })?;
                let (_, entered_at) = xact.queue_memberships.remove(idx);
                let q = self.queue_mut(&key);
                q.content_ticks += q.content * (clock - q.last_tick);
                q.last_tick = clock;
                q.content -= 1;
                if entered_at == clock {
                    q.zero_entries += 1;
                }
                if self
                    .log
                    .enabled(names::GPSS_QUEUE, crate::logging::Level::Debug)
                {
                    self.log.debug(
                        names::GPSS_QUEUE,
                        &format!(
                            "Queue: {queue}, Xact id: {}, entered at time: {entered_at}, left at time: {clock}",
                            xact.id
                        ),
                    );
                }
                MoveOutcome::Continued
            }
            BlockKind::Transfer {
                probability,
                destination,
                ..
            } => {
                let u = self.state.rng.unit(r);
                if u <= probability {
                    xact.next_block = destination;
                }
                MoveOutcome::Continued
            }
            BlockKind::Terminate { decrement } => {
                let tc = self
                    .state
                    .termination_counters
                    .iter_mut()
                    .find(|(p, _)| *p == r.partition_no)
                    .expect("termination counter");
                tc.1 -= decrement;
                let ended = tc.1 <= 0;
                self.state.terminated += 1;
                if ended && self.state.end_xact.is_none() {
                    self.state.end_xact = Some(xact.clone());
                }
                MoveOutcome::Terminated
            }
        };

        if self.log.enabled(names::GPSS, crate::logging::Level::Debug) {
            self.log.debug(
                names::GPSS,
                &format!("{xact} executed block {r} Block: {}", self.model.block_text(r)),
            );
        }
        Ok(outcome)
    }

    /// Unflags every transaction blocked on the given entity. The waiters
    /// compete again in chain order at the current tick.
    fn unblock_waiters(&mut self, key: &EntityKey) {
        let clock = self.state.clock;
        let mut waiters = Vec::new();
        let mut i = 0;
        while i < self.state.chain.len() {
            if self.state.chain[i].blocked_on.as_ref() == Some(key) {
                waiters.push(self.state.chain.remove(i));
            } else {
                i += 1;
            }
        }
        for mut w in waiters {
            w.blocked_on = None;
            w.move_time = clock;
            self.chain_in(w);
        }
    }

    /// Drains transactions that left the local partitions.
    pub fn take_outgoing(&mut self) -> Vec<Transaction> {
        std::mem::take(&mut self.state.out_list)
    }

    /// Replays, at the confirmed end time, the local transactions that a
    /// sequential run would have moved before the ending transaction: those
    /// with strictly higher priority plus the ending transaction itself.
    pub fn move_transactions_for_end_replay(
        &mut self,
        end_time: i64,
        end_priority: i64,
        end_id: u64,
    ) -> Result<(), RuntimeError> {
        self.state.clock = end_time;
        loop {
            let pos = self.state.chain.iter().position(|t| {
                t.blocked_on.is_none()
                    && t.move_time == end_time
                    && (t.priority > end_priority || t.id == end_id)
            });
            let Some(pos) = pos else { break };
            let xact = self.state.chain.remove(pos);
            if self.log.enabled(names::GPSS, crate::logging::Level::Debug) {
                self.log.debug(names::GPSS, &format!("{xact} chained out"));
            }
            self.move_transaction(xact)?;
        }
        Ok(())
    }

    /// Serializes the dynamic engine state.
    pub fn snapshot(&self) -> Vec<u8> {
        serde_json::to_vec(&self.state).expect("engine state serializes")
    }

    /// Restores a state produced by [`Engine::snapshot`].
    pub fn restore(&mut self, bytes: &[u8]) {
        self.state = serde_json::from_slice(bytes).expect("engine state deserializes");
    }

    /// Removes a received transaction (annihilation or cancelback). The
    /// entity leaves this engine's books entirely, as if never received.
    pub fn remove_chain_by_tag(&mut self, tag: (usize, u64)) -> Option<Transaction> {
        let pos = self
            .state
            .chain
            .iter()
            .position(|t| t.receive_tag == Some(tag))?;
        self.state.received_in = self.state.received_in.saturating_sub(1);
        Some(self.state.chain.remove(pos))
    }

    pub fn find_chain_by_tag(&self, tag: (usize, u64)) -> Option<&Transaction> {
        self.state.chain.iter().find(|t| t.receive_tag == Some(tag))
    }

    pub fn chain_contains_tag(&self, tag: (usize, u64)) -> bool {
        self.find_chain_by_tag(tag).is_some()
    }

    /// Live transactions residing in local partitions (current block local),
    /// used by the block-counter conservation invariant.
    pub fn live_residents(&self) -> u64 {
        self.state
            .chain
            .iter()
            .filter(|t| self.is_local(t.current_block))
            .count() as u64
    }

    /// Consistency check: every created or received transaction is either
    /// terminated, in the chain, or has crossed to another partition.
    pub fn conservation_holds(&self) -> bool {
        self.state.created + self.state.received_in
            == self.state.terminated + self.state.chain.len() as u64 + self.state.crossed_out
    }

    /// Storage conservation: capacity equals available plus held units.
    pub fn storage_conservation_holds(&self) -> bool {
        self.state.storages.iter().all(|(key, s)| {
            let held: i64 = self
                .state
                .chain
                .iter()
                .flat_map(|t| t.held_storage.iter())
                .filter(|(k, _)| k == key)
                .map(|(_, (u, _))| *u)
                .sum();
            s.capacity == s.available + held
        })
    }

    /// Builds the post-simulation report rows for the local partitions with
    /// statistics closed at `end_time` (tick accounting divides by
    /// `end_time + 1`).
    pub fn build_report(&self, end_time: i64) -> EngineReport {
        let horizon = end_time + 1;
        let mut partitions = Vec::new();
        for &pno in &self.local_partitions {
            let p = self.model.partition(pno).expect("partition");
            let mut rows = Vec::new();
            for i in 0..p.blocks.len() {
                let r = BlockRef::new(pno, i as u32 + 1);
                let counts = self
                    .state
                    .block_counters
                    .iter()
                    .find(|(b, _)| *b == r)
                    .map(|(_, c)| *c)
                    .unwrap_or_default();
                rows.push(BlockRow {
                    reference: r,
                    current: counts.current,
                    total: counts.total,
                    text: self.model.block_text(r),
                });
            }
            partitions.push(PartitionBlocks {
                number: pno,
                name: p.name.clone(),
                blocks: rows,
            });
        }

        let facilities = self
            .state
            .facilities
            .iter()
            .map(|(key, f)| {
                let busy = f.busy_ticks
                    + match f.owner {
                        Some(_) => horizon - f.last_tick,
                        None => 0,
                    };
                FacilityRow {
                    partition: key.partition,
                    name: key.name.clone(),
                    average_usage: busy as f64 / horizon as f64,
                    captures: f.captures,
                    average_hold: if f.captures > 0 {
                        busy as f64 / f.captures as f64
                    } else {
                        0.0
                    },
                    owner: f.owner,
                }
            })
            .collect();

        let queues = self
            .state
            .queues
            .iter()
            .map(|(key, q)| {
                let ticks = q.content_ticks + q.content * (horizon - q.last_tick);
                QueueRow {
                    partition: key.partition,
                    name: key.name.clone(),
                    max_content: q.max_content,
                    average_content: ticks as f64 / horizon as f64,
                    entries: q.entries,
                    zero_entries: q.zero_entries,
                    percent_zeros: if q.entries > 0 {
                        q.zero_entries as f64 * 100.0 / q.entries as f64
                    } else {
                        0.0
                    },
                    average_time_per_unit: if q.entries > 0 {
                        ticks as f64 / q.entries as f64
                    } else {
                        0.0
                    },
                    current_content: q.content,
                }
            })
            .collect();

        let storages = self
            .state
            .storages
            .iter()
            .map(|(key, s)| {
                let in_use = s.capacity - s.available;
                let ticks = s.unit_ticks + in_use * (horizon - s.last_tick);
                StorageRow {
                    partition: key.partition,
                    name: key.name.clone(),
                    average_usage: ticks as f64 / (horizon as f64 * s.capacity as f64),
                    entries: s.entries,
                    average_time_per_unit: if s.entries > 0 {
                        ticks as f64 / s.entries as f64
                    } else {
                        0.0
                    },
                }
            })
            .collect();

        let chain = self.state.chain.iter().map(|t| t.to_string()).collect();

        EngineReport {
            partitions,
            facilities,
            queues,
            storages,
            chain,
        }
    }
}
