//! Post-simulation report structures and text rendering.

use serde::{Deserialize, Serialize};

use crate::engine::Transaction;
use crate::model::BlockRef;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRow {
    pub reference: BlockRef,
    pub current: u64,
    pub total: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionBlocks {
    pub number: u32,
    pub name: String,
    pub blocks: Vec<BlockRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityRow {
    pub partition: u32,
    pub name: String,
    pub average_usage: f64,
    pub captures: u64,
    pub average_hold: f64,
    pub owner: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueRow {
    pub partition: u32,
    pub name: String,
    pub max_content: i64,
    pub average_content: f64,
    pub entries: u64,
    pub zero_entries: u64,
    pub percent_zeros: f64,
    pub average_time_per_unit: f64,
    pub current_content: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageRow {
    pub partition: u32,
    pub name: String,
    pub average_usage: f64,
    pub entries: u64,
    pub average_time_per_unit: f64,
}

/// Report rows produced by one engine for its local partitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineReport {
    pub partitions: Vec<PartitionBlocks>,
    pub facilities: Vec<FacilityRow>,
    pub queues: Vec<QueueRow>,
    pub storages: Vec<StorageRow>,
    pub chain: Vec<String>,
}

/// Logical-process processing statistics printed at the end of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LpStats {
    pub committed_moves: u64,
    pub moves_rolled_back: u64,
    pub simulated_moves: u64,
    pub xacts_sent: u64,
    pub anti_xacts_sent: u64,
    pub xacts_received: u64,
    pub anti_xacts_received: u64,
}

/// One logical process' contribution to the combined report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpReportFragment {
    pub lp_index: usize,
    pub engine: EngineReport,
    pub stats: LpStats,
    pub include_chain: bool,
}

/// The assembled post-simulation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub end_time: i64,
    pub end_xact: Transaction,
    /// Simulation time units per second of real time.
    pub performance: f64,
    pub partitions: Vec<PartitionBlocks>,
    pub facilities: Vec<FacilityRow>,
    pub queues: Vec<QueueRow>,
    pub storages: Vec<StorageRow>,
    pub lp_stats: Vec<(usize, LpStats)>,
    pub chains: Vec<(usize, Vec<String>)>,
}

impl ReportSet {
    /// Merges per-LP fragments into one report, partitions in model order.
    pub fn assemble(
        end_time: i64,
        end_xact: Transaction,
        wall_seconds: f64,
        mut fragments: Vec<LpReportFragment>,
    ) -> ReportSet {
        fragments.sort_by_key(|f| f.lp_index);
        let mut partitions = Vec::new();
        let mut facilities = Vec::new();
        let mut queues = Vec::new();
        let mut storages = Vec::new();
        let mut lp_stats = Vec::new();
        let mut chains = Vec::new();
        for f in fragments {
            partitions.extend(f.engine.partitions);
            facilities.extend(f.engine.facilities);
            queues.extend(f.engine.queues);
            storages.extend(f.engine.storages);
            lp_stats.push((f.lp_index, f.stats));
            if f.include_chain {
                chains.push((f.lp_index, f.engine.chain));
            }
        }
        partitions.sort_by_key(|p| p.number);
        let performance = if wall_seconds > 0.0 {
            end_time as f64 / wall_seconds
        } else {
            0.0
        };
        ReportSet {
            end_time,
            end_xact,
            performance,
            partitions,
            facilities,
            queues,
            storages,
            lp_stats,
            chains,
        }
    }

    /// Block totals keyed by reference, used by equivalence checks.
    pub fn block_totals(&self) -> Vec<(BlockRef, u64, u64)> {
        let mut rows: Vec<(BlockRef, u64, u64)> = self
            .partitions
            .iter()
            .flat_map(|p| p.blocks.iter().map(|b| (b.reference, b.current, b.total)))
            .collect();
        rows.sort_by_key(|(r, _, _)| *r);
        rows
    }

    /// Header lines: banner, end time, end transaction, performance.
    pub fn header_lines(&self) -> Vec<String> {
        vec![
            "***** Simulation report *****".to_string(),
            format!(
                "The simulation was completed at the simulation time: {}",
                self.end_time
            ),
            format!("by the transaction {}", self.end_xact),
            format!(
                "The average simulation performance in simulation time per second real time was: {:.6} (time units/s)",
                self.performance
            ),
        ]
    }

    /// Block report section lines.
    pub fn block_section_lines(&self) -> Vec<String> {
        let mut out = vec![
            "Block report section:".to_string(),
            "Block          current        total".to_string(),
            "               xacts          xacts".to_string(),
        ];
        for p in &self.partitions {
            out.push(format!("Partition: {}", p.name));
            for b in &p.blocks {
                out.push(format!(
                    "{:<14} {:<14} {:<5} Block: {}",
                    b.reference.to_string(),
                    b.current,
                    b.total,
                    b.text
                ));
            }
        }
        out
    }

    /// Summary entity report section lines.
    pub fn summary_section_lines(&self) -> Vec<String> {
        let mut out = vec!["Summary entity report section:".to_string()];
        if !self.facilities.is_empty() {
            out.push(
                "Facility       average usage  total          average        current xact ID"
                    .to_string(),
            );
            for f in &self.facilities {
                let owner = f.owner.map(|o| o.to_string()).unwrap_or_default();
                out.push(format!(
                    "{:<14} {:<14} {:<14} {:<14} {}",
                    f.name,
                    short_float(f.average_usage),
                    f.captures,
                    short_float(f.average_hold),
                    owner
                ));
            }
        }
        if !self.queues.is_empty() {
            out.push(
                "Queue          maximum        average        total          zero           percent        average        current"
                    .to_string(),
            );
            out.push(
                "               content        content        entries        entries        zeros          time/unit      content"
                    .to_string(),
            );
            for q in &self.queues {
                out.push(format!(
                    "{:<14} {:<14} {:<14} {:<14} {:<14} {:<14} {:<14} {}",
                    q.name,
                    q.max_content,
                    short_float(q.average_content),
                    q.entries,
                    q.zero_entries,
                    short_float(q.percent_zeros),
                    short_float(q.average_time_per_unit),
                    q.current_content
                ));
            }
        }
        if !self.storages.is_empty() {
            out.push("Storage        average usage  total          average time/unit".to_string());
            for s in &self.storages {
                out.push(format!(
                    "{:<14} {:<14} {:<14} {}",
                    s.name,
                    short_float(s.average_usage),
                    s.entries,
                    short_float(s.average_time_per_unit)
                ));
            }
        }
        out
    }

    /// Optional transaction chain section lines, one list per LP.
    pub fn chain_section_lines(&self) -> Vec<(usize, Vec<String>)> {
        self.chains
            .iter()
            .map(|(lp, chain)| {
                let mut lines = vec![format!("Transaction chain report section (LP{lp}):")];
                lines.extend(chain.iter().cloned());
                (*lp, lines)
            })
            .collect()
    }

    /// Renders the whole report in the simulate-process layout.
    pub fn render(&self) -> String {
        let mut out = self.header_lines().join("\n");
        out.push_str("\n\n");
        out.push_str(&self.block_section_lines().join("\n"));
        out.push_str("\n\n");
        out.push_str(&self.summary_section_lines().join("\n"));
        out.push('\n');
        for (_, lines) in self.chain_section_lines() {
            out.push('\n');
            out.push_str(&lines.join("\n"));
            out.push('\n');
        }
        out
    }
}

/// Seven-significant-digit float rendering used by the summary section,
/// e.g. 1.1578947 and 0.57894737; integral values keep one decimal.
pub fn short_float(v: f64) -> String {
    let f = v as f32;
    if f == f.trunc() {
        format!("{f:.1}")
    } else {
        format!("{f}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_float_matches_report_precision() {
        assert_eq!(short_float(22.0 / 19.0), "1.1578947");
        assert_eq!(short_float(22.0 / 38.0), "0.57894737");
        assert_eq!(short_float(22.0 / 5.0), "4.4");
        assert_eq!(short_float(0.0), "0.0");
        assert_eq!(short_float(100.0), "100.0");
    }
}
