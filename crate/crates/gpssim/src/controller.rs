//! Simulation controller.
//!
//! Creates and coordinates the logical processes: serves GVT calculation
//! requests one round at a time, schedules LPCC-linked rounds on the update
//! interval, confirms provisional simulation ends, drives the end protocol
//! and assembles the combined post-simulation report.

use std::any::Any;

use crate::engine::{Transaction, TIME_INFINITE};
use crate::logging::{names, Log};
use crate::report::{LpReportFragment, ReportSet};
use crate::transport::{
    Actor, Envelope, LocalGvtParameter, Payload, Port, StepCtx, UserCommand,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunPhase {
    Created,
    Simulating,
    Finished,
    Terminated,
}

#[derive(Debug)]
struct GvtRound {
    lpcc_needed: bool,
    replies: Vec<LocalGvtParameter>,
}

pub struct SimulationController {
    port: Port,
    lp_count: usize,
    phase: RunPhase,
    last_gvt: Option<i64>,
    round: Option<GvtRound>,
    pending_round: bool,
    pending_lpcc: bool,
    lpcc_enabled: bool,
    lpcc_interval_ms: u64,
    last_lpcc_ms: u64,
    include_chain: bool,
    confirmed_end: Option<Transaction>,
    end_confirms: Vec<usize>,
    fragments: Vec<LpReportFragment>,
    start_ms: u64,
    outcome: Option<Result<ReportSet, String>>,
    gvt_history: Vec<i64>,
    log: Log,
}

impl SimulationController {
    pub fn new(
        lp_count: usize,
        lpcc_enabled: bool,
        lpcc_update_interval_secs: u64,
        include_chain: bool,
        log: Log,
    ) -> SimulationController {
        SimulationController {
            port: Port::new(crate::transport::CONTROLLER),
            lp_count,
            phase: RunPhase::Created,
            last_gvt: None,
            round: None,
            pending_round: false,
            pending_lpcc: false,
            lpcc_enabled,
            lpcc_interval_ms: lpcc_update_interval_secs * 1000,
            last_lpcc_ms: 0,
            include_chain,
            confirmed_end: None,
            end_confirms: Vec::new(),
            fragments: Vec::new(),
            start_ms: 0,
            outcome: None,
            gvt_history: Vec::new(),
            log,
        }
    }

    pub fn phase(&self) -> RunPhase {
        self.phase
    }

    pub fn outcome(&self) -> Option<&Result<ReportSet, String>> {
        self.outcome.as_ref()
    }

    pub fn last_gvt(&self) -> Option<i64> {
        self.last_gvt
    }

    /// GVT values broadcast over the run, in order.
    pub fn gvt_history(&self) -> &[i64] {
        &self.gvt_history
    }

    fn broadcast(&mut self, out: &mut Vec<Envelope>, payload: Payload) {
        for lp in 1..=self.lp_count {
            out.push(self.port.make(lp, payload.clone()));
        }
    }

    fn abort(&mut self, out: &mut Vec<Envelope>, message: String) {
        self.log
            .error(names::SIMULATION, &format!("Simulation aborted: {message}"));
        self.broadcast(out, Payload::Terminate);
        self.outcome = Some(Err(message));
        self.phase = RunPhase::Terminated;
    }

    fn start_round(&mut self, out: &mut Vec<Envelope>) {
        self.log.debug(names::SIMULATION_GVT, "Initiated GVT calculation");
        let lpcc_needed = self.pending_lpcc;
        self.pending_round = false;
        self.pending_lpcc = false;
        self.round = Some(GvtRound {
            lpcc_needed,
            replies: Vec::new(),
        });
        self.broadcast(out, Payload::GvtParamRequest);
    }

    fn describe_min_time(p: &LocalGvtParameter) -> String {
        if let Some(pe) = &p.provisional_end {
            format!("Infinite (unconfirmed end of simulation for time {})", pe.time)
        } else if p.min_time == TIME_INFINITE {
            "Infinite (no movable transaction)".to_string()
        } else {
            p.min_time.to_string()
        }
    }

    /// Completes a GVT round: either confirms the earliest provisional end
    /// or broadcasts the new GVT (telling other LPs to force a GVT at the
    /// still-unconfirmed end time, when one exists).
    fn finish_round(&mut self, out: &mut Vec<Envelope>) {
        let round = self.round.take().expect("round in progress");
        let gvt = round
            .replies
            .iter()
            .map(|p| p.min_time)
            .min()
            .unwrap_or(TIME_INFINITE);

        // Earliest provisional end: by time, then by higher priority, then
        // by LP index for determinism.
        let end = round
            .replies
            .iter()
            .filter_map(|p| p.provisional_end.as_ref().map(|pe| (p.lp_index, pe.clone())))
            .min_by_key(|(lp, pe)| (pe.time, std::cmp::Reverse(pe.priority), *lp));

        if let Some((end_lp, pe)) = &end {
            let confirmed = round
                .replies
                .iter()
                .filter(|p| p.lp_index != *end_lp)
                .all(|p| p.min_time > pe.time);
            if confirmed {
                self.log.info(names::SIMULATION, "Simulation finished");
                self.confirmed_end = Some(pe.xact.clone());
                self.phase = RunPhase::Finished;
                self.broadcast(out, Payload::EndByXact(pe.xact.clone()));
                return;
            }
            // Unconfirmed: every other LP must request a GVT calculation
            // once it passes the provisional end time.
            let time = pe.time;
            let end_lp = *end_lp;
            for lp in 1..=self.lp_count {
                if lp != end_lp {
                    out.push(self.port.make(lp, Payload::ForceGvtAt { time }));
                }
            }
        }

        if gvt == TIME_INFINITE {
            self.abort(
                out,
                "no movable transaction remains anywhere and no simulation end was reached"
                    .to_string(),
            );
            return;
        }
        if let Some(prev) = self.last_gvt {
            if gvt < prev {
                self.abort(out, format!("GVT regressed from {prev} to {gvt}"));
                return;
            }
        }
        self.last_gvt = Some(gvt);
        self.gvt_history.push(gvt);
        self.log.debug(
            names::SIMULATION_GVT,
            &format!("Simulation reached Global Virtual Time: {gvt}"),
        );
        self.broadcast(
            out,
            Payload::Gvt {
                gvt,
                lpcc_needed: round.lpcc_needed,
            },
        );
    }

    fn assemble_and_finish(&mut self, now_ms: u64, out: &mut Vec<Envelope>) {
        let end_xact = self.confirmed_end.clone().expect("confirmed end");
        let wall_seconds = (now_ms.saturating_sub(self.start_ms)) as f64 / 1000.0;
        let report = ReportSet::assemble(
            end_xact.move_time,
            end_xact,
            wall_seconds,
            std::mem::take(&mut self.fragments),
        );

        for line in report.header_lines() {
            self.log.info(names::SIMULATION_REPORT, &line);
        }
        for line in report.block_section_lines() {
            self.log.info(names::SIMULATION_REPORT_BLOCK, &line);
        }
        for line in report.summary_section_lines() {
            self.log.info(names::SIMULATION_REPORT_SUMMARY, &line);
        }
        for (_, lines) in report.chain_section_lines() {
            for line in lines {
                self.log.info(names::SIMULATION_REPORT_CHAIN, &line);
            }
        }

        self.broadcast(out, Payload::Terminate);
        self.log
            .debug(names::SIMULATION, "SimulationController.terminateLPs() called");
        self.outcome = Some(Ok(report));
        self.phase = RunPhase::Terminated;
    }

    fn handle(&mut self, env: Envelope, now_ms: u64, out: &mut Vec<Envelope>) {
        match env.payload {
            Payload::GvtCalculationRequest { .. } => {
                if self.phase == RunPhase::Simulating {
                    self.pending_round = true;
                }
            }
            Payload::User(UserCommand::ForceGvt) => {
                if self.phase == RunPhase::Simulating {
                    self.pending_round = true;
                }
            }
            Payload::User(UserCommand::Terminate) => {
                if self.phase == RunPhase::Simulating || self.phase == RunPhase::Created {
                    self.broadcast(out, Payload::Terminate);
                    self.outcome = Some(Err("simulation terminated by user".to_string()));
                    self.phase = RunPhase::Terminated;
                }
            }
            Payload::GvtParamReply(param) => {
                self.log.debug(
                    names::SIMULATION_GVT,
                    &format!(
                        "Min time received from LP{}: {}",
                        param.lp_index,
                        Self::describe_min_time(&param)
                    ),
                );
                let complete = match &mut self.round {
                    Some(round) => {
                        round.replies.retain(|p| p.lp_index != param.lp_index);
                        round.replies.push(param);
                        round.replies.len() == self.lp_count
                    }
                    None => false,
                };
                if complete && self.phase == RunPhase::Simulating {
                    self.finish_round(out);
                } else if complete {
                    self.round = None;
                }
            }
            Payload::EndConfirm { lp_index } => {
                if !self.end_confirms.contains(&lp_index) {
                    self.end_confirms.push(lp_index);
                }
                if self.end_confirms.len() == self.lp_count && self.phase == RunPhase::Finished {
                    self.broadcast(
                        out,
                        Payload::ReportRequest {
                            include_chain: self.include_chain,
                        },
                    );
                }
            }
            Payload::ReportReply(fragment) => {
                self.fragments.retain(|f| f.lp_index != fragment.lp_index);
                self.fragments.push(*fragment);
                if self.fragments.len() == self.lp_count && self.phase == RunPhase::Finished {
                    self.assemble_and_finish(now_ms, out);
                }
            }
            Payload::ErrorReport { lp_index, message } => {
                self.abort(out, format!("LP{lp_index} reported: {message}"));
            }
            _ => {}
        }
    }
}

impl Actor for SimulationController {
    fn step(&mut self, ctx: &mut StepCtx) -> bool {
        let mut out = std::mem::take(&mut ctx.out);
        let had_mail = !ctx.inbox.is_empty();

        if self.phase == RunPhase::Created {
            self.phase = RunPhase::Simulating;
            self.start_ms = ctx.now_ms;
            self.last_lpcc_ms = ctx.now_ms;
            self.log.info(names::SIMULATION, "Simulation started");
            self.log.info(
                names::SIMULATION,
                "\nPlease press:\nG + <Enter> to force GVT calculation\nX + <Enter> to terminate the simulation\n",
            );
        }

        for env in ctx.inbox.drain(..) {
            self.handle(env, ctx.now_ms, &mut out);
        }

        if self.phase == RunPhase::Simulating {
            if self.lpcc_enabled
                && ctx.now_ms.saturating_sub(self.last_lpcc_ms) >= self.lpcc_interval_ms
            {
                self.pending_round = true;
                self.pending_lpcc = true;
                self.last_lpcc_ms = ctx.now_ms;
            }
            if self.round.is_none() && self.pending_round {
                self.start_round(&mut out);
            }
        }

        let progressed = had_mail || !out.is_empty();
        ctx.out = out;
        progressed
    }

    fn idle(&self) -> bool {
        match self.phase {
            RunPhase::Created => false,
            RunPhase::Terminated => true,
            RunPhase::Finished => false,
            RunPhase::Simulating => {
                // With the LPCC enabled the interval timer keeps firing, so
                // the controller never idles mid-run.
                !self.lpcc_enabled && self.round.is_none() && !self.pending_round
            }
        }
    }

    fn done(&self) -> bool {
        self.phase == RunPhase::Terminated
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
