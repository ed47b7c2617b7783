//! In-process message-passing fabric.
//!
//! Endpoints exchange immutable envelopes over per-link FIFO mailboxes.
//! Transaction-carrying envelopes are acknowledged explicitly so a sender
//! can account for in-transit transactions during GVT calculation. The
//! deterministic world steps one actor at a time under a seeded weighted
//! round-robin policy with optional per-link delivery delays; the threaded
//! runner drives the same actors with one thread per actor.

use std::any::Any;
use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::Transaction;
use crate::report::LpReportFragment;

pub type EndpointId = usize;

/// Endpoint 0 is the simulation controller; LPs are 1-based.
pub const CONTROLLER: EndpointId = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvisionalEnd {
    pub time: i64,
    pub priority: i64,
    pub xact: Transaction,
}

/// Per-LP GVT-round report: minimum relevant local time plus a provisional
/// end reached, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalGvtParameter {
    pub lp_index: usize,
    pub min_time: i64,
    pub provisional_end: Option<ProvisionalEnd>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UserCommand {
    ForceGvt,
    Terminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Xact(Transaction),
    AntiXact { orig_seq: u64, move_time: i64 },
    Cancelback { xact: Transaction, orig_seq: u64 },
    Ack { acked_seq: u64 },
    GvtCalculationRequest { lp_index: usize },
    GvtParamRequest,
    GvtParamReply(LocalGvtParameter),
    Gvt { gvt: i64, lpcc_needed: bool },
    ForceGvtAt { time: i64 },
    EndByXact(Transaction),
    EndConfirm { lp_index: usize },
    ReportRequest { include_chain: bool },
    ReportReply(Box<LpReportFragment>),
    User(UserCommand),
    ErrorReport { lp_index: usize, message: String },
    Terminate,
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Xact(_) => "XACT",
            Payload::AntiXact { .. } => "ANTI_XACT",
            Payload::Cancelback { .. } => "CANCELBACK",
            Payload::Ack { .. } => "ACK",
            Payload::GvtCalculationRequest { .. } => "GVT_REQUEST",
            Payload::GvtParamRequest => "GVT_PARAM_REQUEST",
            Payload::GvtParamReply(_) => "GVT_PARAM_REPLY",
            Payload::Gvt { .. } => "GVT",
            Payload::ForceGvtAt { .. } => "FORCE_GVT_AT",
            Payload::EndByXact(_) => "END_BY_XACT",
            Payload::EndConfirm { .. } => "END_CONFIRM",
            Payload::ReportRequest { .. } => "REPORT_REQUEST",
            Payload::ReportReply(_) => "REPORT_REPLY",
            Payload::User(_) => "USER",
            Payload::ErrorReport { .. } => "ERROR",
            Payload::Terminate => "TERMINATE",
        }
    }

    /// Envelope kinds that are acknowledged by the receiver.
    pub fn needs_ack(&self) -> bool {
        matches!(
            self,
            Payload::Xact(_) | Payload::AntiXact { .. } | Payload::Cancelback { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub sender: EndpointId,
    pub dest: EndpointId,
    /// Monotone per (sender, dest) link.
    pub seq: u64,
    pub payload: Payload,
}

/// Sender-side endpoint handle that stamps per-link sequence numbers.
#[derive(Debug, Clone)]
pub struct Port {
    id: EndpointId,
    seqs: Vec<(EndpointId, u64)>,
}

impl Port {
    pub fn new(id: EndpointId) -> Port {
        Port {
            id,
            seqs: Vec::new(),
        }
    }

    pub fn id(&self) -> EndpointId {
        self.id
    }

    pub fn make(&mut self, dest: EndpointId, payload: Payload) -> Envelope {
        let seq = match self.seqs.iter_mut().find(|(d, _)| *d == dest) {
            Some((_, s)) => {
                *s += 1;
                *s
            }
            None => {
                self.seqs.push((dest, 1));
                1
            }
        };
        Envelope {
            sender: self.id,
            dest,
            seq,
            payload,
        }
    }
}

/// Sender-side record of transaction envelopes not yet acknowledged; the
/// payload times count as in transit for GVT purposes until acknowledged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AckLedger {
    pending: Vec<(EndpointId, u64, i64)>,
}

impl AckLedger {
    pub fn record(&mut self, dest: EndpointId, seq: u64, move_time: i64) {
        self.pending.push((dest, seq, move_time));
    }

    pub fn acknowledge(&mut self, dest: EndpointId, seq: u64) -> bool {
        match self
            .pending
            .iter()
            .position(|(d, s, _)| *d == dest && *s == seq)
        {
            Some(i) => {
                self.pending.remove(i);
                true
            }
            None => false,
        }
    }

    pub fn min_time(&self) -> Option<i64> {
        self.pending.iter().map(|(_, _, t)| *t).min()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

#[derive(Debug)]
struct Delivery {
    available_at: u64,
    env: Envelope,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SendError {
    #[error("unknown destination endpoint {0}")]
    UnknownDestination(EndpointId),
    #[error("send to closed endpoint {0}")]
    Closed(EndpointId),
}

/// Mailbox fabric shared by all endpoints of one simulation.
#[derive(Debug)]
pub struct Net {
    mailboxes: Vec<VecDeque<Delivery>>,
    closed: Vec<bool>,
    link_delays: Vec<((EndpointId, EndpointId), u64)>,
    now_step: u64,
}

impl Net {
    pub fn new(endpoints: usize) -> Net {
        Net {
            mailboxes: (0..endpoints).map(|_| VecDeque::new()).collect(),
            closed: vec![false; endpoints],
            link_delays: Vec::new(),
            now_step: 0,
        }
    }

    /// Constant delivery delay, in harness steps, for one ordered link.
    pub fn set_link_delay(&mut self, sender: EndpointId, dest: EndpointId, steps: u64) {
        self.link_delays.push(((sender, dest), steps));
    }

    fn delay(&self, sender: EndpointId, dest: EndpointId) -> u64 {
        self.link_delays
            .iter()
            .find(|((s, d), _)| *s == sender && *d == dest)
            .map(|(_, delay)| *delay)
            .unwrap_or(0)
    }

    pub fn close(&mut self, ep: EndpointId) {
        if ep < self.closed.len() {
            self.closed[ep] = true;
        }
    }

    pub fn send(&mut self, env: Envelope) -> Result<(), SendError> {
        if env.dest >= self.mailboxes.len() {
            return Err(SendError::UnknownDestination(env.dest));
        }
        if self.closed[env.dest] {
            return Err(SendError::Closed(env.dest));
        }
        let available_at = self.now_step + self.delay(env.sender, env.dest);
        self.mailboxes[env.dest].push_back(Delivery { available_at, env });
        Ok(())
    }

    /// Removes and returns every envelope currently deliverable to `ep`,
    /// preserving per-link order.
    pub fn drain(&mut self, ep: EndpointId) -> Vec<Envelope> {
        let now = self.now_step;
        let mailbox = &mut self.mailboxes[ep];
        let mut out = Vec::new();
        let mut rest = VecDeque::new();
        while let Some(d) = mailbox.pop_front() {
            if d.available_at <= now {
                out.push(d.env);
            } else {
                rest.push_back(d);
            }
        }
        *mailbox = rest;
        out
    }

    pub fn mailbox_len(&self, ep: EndpointId) -> usize {
        self.mailboxes[ep].len()
    }

    pub fn all_mailboxes_empty(&self) -> bool {
        self.mailboxes.iter().all(|m| m.is_empty())
    }
}

/// One cycle's execution context: the drained inbox and an outbox.
pub struct StepCtx {
    pub now_ms: u64,
    pub inbox: Vec<Envelope>,
    pub out: Vec<Envelope>,
}

pub trait Actor: Any {
    /// Runs one scheduling-cycle iteration. Returns true when the step did
    /// observable work.
    fn step(&mut self, ctx: &mut StepCtx) -> bool;

    /// True when the actor would do nothing if stepped without new mail.
    fn idle(&self) -> bool;

    /// True when the actor has terminated for good.
    fn done(&self) -> bool;

    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// Deterministic single-threaded world.
pub struct World {
    pub net: Net,
    pub actors: Vec<Box<dyn Actor>>,
    schedule: Vec<usize>,
    schedule_pos: usize,
    steps: u64,
    /// Virtual milliseconds that one harness step represents.
    pub ms_per_step: u64,
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl World {
    /// Builds a world over the given actors (index = endpoint id). Each
    /// actor is stepped `weights[i]` times per round; the round order is
    /// shuffled deterministically by `seed`.
    pub fn new(actors: Vec<Box<dyn Actor>>, seed: u64, weights: &[u64], ms_per_step: u64) -> World {
        let n = actors.len();
        let mut schedule = Vec::new();
        for (i, _) in actors.iter().enumerate() {
            let w = weights.get(i).copied().unwrap_or(1).max(1);
            for _ in 0..w {
                schedule.push(i);
            }
        }
        // Deterministic Fisher-Yates driven by the seed.
        let mut state = seed;
        for i in (1..schedule.len()).rev() {
            state = mix(state);
            let j = (state % (i as u64 + 1)) as usize;
            schedule.swap(i, j);
        }
        World {
            net: Net::new(n),
            actors,
            schedule,
            schedule_pos: 0,
            steps: 0,
            ms_per_step,
        }
    }

    pub fn uniform(actors: Vec<Box<dyn Actor>>, seed: u64) -> World {
        let weights = vec![1; actors.len()];
        World::new(actors, seed, &weights, 1)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn now_ms(&self) -> u64 {
        self.steps * self.ms_per_step
    }

    /// True when every mailbox is empty and every actor is idle.
    pub fn quiescent(&self) -> bool {
        self.net.all_mailboxes_empty() && self.actors.iter().all(|a| a.idle())
    }

    /// Runs exactly one actor's loop iteration according to the seeded
    /// round-robin policy. Returns false at quiescence without stepping.
    pub fn harness_step(&mut self) -> bool {
        if self.quiescent() {
            return false;
        }
        let i = self.schedule[self.schedule_pos];
        self.schedule_pos = (self.schedule_pos + 1) % self.schedule.len();
        self.steps += 1;
        self.net.now_step = self.steps;
        let inbox = self.net.drain(i);
        let mut ctx = StepCtx {
            now_ms: self.now_ms(),
            inbox,
            out: Vec::new(),
        };
        self.actors[i].step(&mut ctx);
        for env in ctx.out {
            let sender = env.sender;
            if let Err(e) = self.net.send(env) {
                // Surface transport failures to the controller.
                if sender != CONTROLLER && !self.net.closed[CONTROLLER] {
                    let report = Envelope {
                        sender,
                        dest: CONTROLLER,
                        seq: 0,
                        payload: Payload::ErrorReport {
                            lp_index: sender,
                            message: e.to_string(),
                        },
                    };
                    let _ = self.net.send(report);
                }
            }
        }
        true
    }

    /// Steps until `stop` returns true or quiescence or the step budget is
    /// exhausted; returns the number of steps taken.
    pub fn run_until<F: FnMut(&World) -> bool>(&mut self, max_steps: u64, mut stop: F) -> u64 {
        let start = self.steps;
        while self.steps - start < max_steps {
            if stop(self) {
                break;
            }
            if !self.harness_step() {
                break;
            }
        }
        self.steps - start
    }

    /// Runs to quiescence within the step budget.
    pub fn run_to_quiescence(&mut self, max_steps: u64) -> bool {
        self.run_until(max_steps, |_| false);
        self.quiescent()
    }

    pub fn actor<T: 'static>(&self, i: usize) -> &T {
        self.actors[i].as_any().downcast_ref::<T>().expect("actor type")
    }

    pub fn actor_mut<T: 'static>(&mut self, i: usize) -> &mut T {
        self.actors[i]
            .as_any_mut()
            .downcast_mut::<T>()
            .expect("actor type")
    }
}

/// Threaded driver: one thread per actor with blocking mailboxes. Used by
/// the interactive CLI; the deterministic world remains the contractual
/// baseline for tests.
pub fn run_threaded(
    actors: Vec<Box<dyn Actor + Send>>,
    user_input: Option<std::sync::mpsc::Receiver<Envelope>>,
) -> Vec<Box<dyn Actor + Send>> {
    use std::sync::mpsc;
    use std::time::{Duration, Instant};

    let n = actors.len();
    let mut senders = Vec::new();
    let mut receivers = Vec::new();
    for _ in 0..n {
        let (tx, rx) = mpsc::channel::<Envelope>();
        senders.push(tx);
        receivers.push(rx);
    }
    let stop = Arc::new(AtomicBool::new(false));
    let started = Instant::now();

    // Forward user commands into the controller mailbox.
    let user_thread = user_input.map(|rx| {
        let tx = senders[CONTROLLER].clone();
        let stop = stop.clone();
        std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                match rx.recv_timeout(Duration::from_millis(50)) {
                    Ok(env) => {
                        let _ = tx.send(env);
                    }
                    Err(mpsc::RecvTimeoutError::Timeout) => continue,
                    Err(mpsc::RecvTimeoutError::Disconnected) => break,
                }
            }
        })
    });

    let mut handles = Vec::new();
    for (i, mut actor) in actors.into_iter().enumerate() {
        let rx = receivers.remove(0);
        let senders = senders.clone();
        let stop = stop.clone();
        handles.push(std::thread::spawn(move || {
            loop {
                let mut inbox = Vec::new();
                if actor.idle() && !actor.done() {
                    match rx.recv_timeout(Duration::from_millis(2)) {
                        Ok(env) => inbox.push(env),
                        Err(mpsc::RecvTimeoutError::Timeout) => {}
                        Err(mpsc::RecvTimeoutError::Disconnected) => {}
                    }
                }
                while let Ok(env) = rx.try_recv() {
                    inbox.push(env);
                }
                let had_mail = !inbox.is_empty();
                let mut ctx = StepCtx {
                    now_ms: started.elapsed().as_millis() as u64,
                    inbox,
                    out: Vec::new(),
                };
                actor.step(&mut ctx);
                for env in ctx.out {
                    if env.dest < senders.len() {
                        let _ = senders[env.dest].send(env);
                    }
                }
                if actor.done() && !had_mail {
                    if i == CONTROLLER {
                        stop.store(true, Ordering::Relaxed);
                    }
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                }
                if stop.load(Ordering::Relaxed) && actor.done() {
                    break;
                }
            }
            (i, actor)
        }));
    }

    let mut finished: Vec<(usize, Box<dyn Actor + Send>)> = handles
        .into_iter()
        .map(|h| h.join().expect("actor thread"))
        .collect();
    if let Some(h) = user_thread {
        let _ = h.join();
    }
    finished.sort_by_key(|(i, _)| *i);
    finished.into_iter().map(|(_, a)| a).collect()
}
