//! GPSS model parsing, validation and rendering.
//!
//! Model files are line based. Each line holds a PARTITION definition, a
//! STORAGE definition or a block definition of one of the ten supported
//! kinds. Omitted optional parameters are filled with their documented
//! defaults, labels are resolved to global block references and the parsed
//! model can be rendered back in the same textual layout the simulator
//! prints for `ParseModelOnly` runs.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest representable storage capacity, used when a STORAGE definition
/// omits the capacity parameter.
pub const MAX_STORAGE_CAPACITY: i64 = 2_147_483_647;

const RESERVED: &[&str] = &[
    "GENERATE",
    "TERMINATE",
    "ADVANCE",
    "SEIZE",
    "RELEASE",
    "ENTER",
    "LEAVE",
    "QUEUE",
    "DEPART",
    "TRANSFER",
    "STORAGE",
    "PARTITION",
];

/// Uniquely identifies a block within the whole simulation model:
/// 1-based partition number plus 1-based block number within the partition.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct BlockRef {
    pub partition_no: u32,
    pub block_no: u32,
}

impl BlockRef {
    pub fn new(partition_no: u32, block_no: u32) -> BlockRef {
        BlockRef {
            partition_no,
            block_no,
        }
    }
}

impl fmt::Display for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.partition_no, self.block_no)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockKind {
    Generate {
        avg_interarrival: i64,
        half_range: i64,
        offset: Option<i64>,
        limit: Option<i64>,
        priority: i64,
    },
    Terminate {
        decrement: i64,
    },
    Advance {
        avg_hold: i64,
        half_range: i64,
    },
    Seize {
        facility: String,
    },
    Release {
        facility: String,
    },
    Enter {
        storage: String,
        usage_count: i64,
    },
    Leave {
        storage: String,
        usage_count: i64,
    },
    Queue {
        queue: String,
    },
    Depart {
        queue: String,
    },
    Transfer {
        probability: f64,
        label: String,
        destination: BlockRef,
    },
}

impl BlockKind {
    pub fn keyword(&self) -> &'static str {
        match self {
            BlockKind::Generate { .. } => "GENERATE",
            BlockKind::Terminate { .. } => "TERMINATE",
            BlockKind::Advance { .. } => "ADVANCE",
            BlockKind::Seize { .. } => "SEIZE",
            BlockKind::Release { .. } => "RELEASE",
            BlockKind::Enter { .. } => "ENTER",
            BlockKind::Leave { .. } => "LEAVE",
            BlockKind::Queue { .. } => "QUEUE",
            BlockKind::Depart { .. } => "DEPART",
            BlockKind::Transfer { .. } => "TRANSFER",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub name: String,
    pub number: u32,
    pub termination_counter: Option<i64>,
    pub blocks: Vec<BlockSpec>,
    /// Storage declarations in declaration order.
    pub storages: Vec<(String, i64)>,
    /// Queue names in order of first appearance.
    pub queues: Vec<String>,
    /// Facility names in order of first appearance.
    pub facilities: Vec<String>,
    /// Labels defined on blocks of this partition.
    pub labels: Vec<(String, BlockRef)>,
}

impl PartitionSpec {
    pub fn storage_capacity(&self, name: &str) -> Option<i64> {
        self.storages
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| *c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub partitions: Vec<PartitionSpec>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("line {line}: unknown reserved word '{word}'")]
    UnknownReservedWord { line: usize, word: String },
    #[error("line {line}: a label is not allowed on a {keyword} definition")]
    LabelNotAllowed { line: usize, keyword: String },
    #[error("line {line}: invalid name '{name}'")]
    InvalidName { line: usize, name: String },
    #[error("line {line}: duplicate label '{label}'")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: TRANSFER destination label '{label}' cannot be resolved")]
    UnresolvedDestination { line: usize, label: String },
    #[error("line {line}: storage '{name}' used before its declaration")]
    StorageNotDeclared { line: usize, name: String },
    #[error("line {line}: half range greater than average")]
    HalfRangeExceedsAverage { line: usize },
    #[error("line {line}: usage count {usage} exceeds capacity {capacity} of storage '{name}'")]
    UsageExceedsCapacity {
        line: usize,
        name: String,
        usage: i64,
        capacity: i64,
    },
    #[error("line {line}: invalid parameter: {detail}")]
    InvalidParameter { line: usize, detail: String },
    #[error("line {line}: transfer probability must lie within [0,1]")]
    ProbabilityOutOfRange { line: usize },
    #[error("line {line}: missing required parameter: {detail}")]
    MissingParameter { line: usize, detail: String },
    #[error("line {line}: trailing comma without a value")]
    TrailingComma { line: usize },
    #[error("model file contains no definitions")]
    EmptyModel,
}

fn is_reserved(word: &str) -> bool {
    RESERVED.iter().any(|r| r.eq_ignore_ascii_case(word))
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn check_name(line: usize, name: &str) -> Result<String, ParseError> {
    if !valid_name(name) || is_reserved(name) {
        return Err(ParseError::InvalidName {
            line,
            name: name.to_string(),
        });
    }
    Ok(name.to_string())
}

fn parse_count(line: usize, slot: &str, what: &str) -> Result<i64, ParseError> {
    match slot.parse::<i64>() {
        Ok(v) if v >= 0 => Ok(v),
        _ => Err(ParseError::InvalidParameter {
            line,
            detail: format!("{what} must be a non-negative integer, got '{slot}'"),
        }),
    }
}

/// Splits a parameter list on commas. Empty slots are allowed and map to
/// `None`, e.g. "3,2,,10" leaves the third parameter unset.
fn split_params(list: Option<&str>) -> Vec<Option<&str>> {
    match list {
        None => Vec::new(),
        Some(s) => s
            .split(',')
            .map(|p| if p.is_empty() { None } else { Some(p) })
            .collect(),
    }
}

struct PendingTransfer {
    line: usize,
    block: BlockRef,
    label: String,
}

/// Parses GPSS model text into a validated [`ModelSpec`].
pub fn parse_model(text: &str) -> Result<ModelSpec, ParseError> {
    let mut partitions: Vec<PartitionSpec> = Vec::new();
    let mut labels: Vec<(String, BlockRef, usize)> = Vec::new();
    let mut pending_transfers: Vec<PendingTransfer> = Vec::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw_line.trim();
        if trimmed.is_empty() || trimmed.starts_with('*') {
            continue;
        }

        // Label, keyword and parameter list are separated by runs of spaces
        // or tabs; anything after the parameter list is a comment.
        let mut tokens = trimmed.split_whitespace();
        let first = tokens.next().unwrap();
        let (label, keyword) = if is_reserved(first) {
            (None, first)
        } else {
            let keyword = tokens.next().ok_or_else(|| ParseError::UnknownReservedWord {
                line,
                word: first.to_string(),
            })?;
            if !is_reserved(keyword) {
                return Err(ParseError::UnknownReservedWord {
                    line,
                    word: keyword.to_string(),
                });
            }
            (Some(check_name(line, first)?), keyword)
        };
        let params = tokens.next();
        let keyword = keyword.to_ascii_uppercase();

        if keyword == "PARTITION" || keyword == "STORAGE" {
            if let Some(l) = label {
                return Err(ParseError::LabelNotAllowed { line, keyword: l });
            }
        }

        if keyword == "PARTITION" {
            let slots = split_params(params);
            if params.map(|p| p.ends_with(',')) == Some(true) {
                return Err(ParseError::TrailingComma { line });
            }
            let number = partitions.len() as u32 + 1;
            let name = match slots.first().copied().flatten() {
                Some(n) => check_name(line, n)?,
                None => format!("Partition {number}"),
            };
            let termination_counter = match slots.get(1).copied().flatten() {
                Some(v) => Some(parse_count(line, v, "termination counter")?),
                None => None,
            };
            if slots.len() > 2 {
                return Err(ParseError::InvalidParameter {
                    line,
                    detail: "too many parameters for PARTITION".to_string(),
                });
            }
            partitions.push(PartitionSpec {
                name,
                number,
                termination_counter,
                blocks: Vec::new(),
                storages: Vec::new(),
                queues: Vec::new(),
                facilities: Vec::new(),
                labels: Vec::new(),
            });
            continue;
        }

        // Any other definition before the first PARTITION creates the
        // default partition.
        if partitions.is_empty() {
            partitions.push(PartitionSpec {
                name: "Partition 1".to_string(),
                number: 1,
                termination_counter: None,
                blocks: Vec::new(),
                storages: Vec::new(),
                queues: Vec::new(),
                facilities: Vec::new(),
                labels: Vec::new(),
            });
        }
        let partition = partitions.last_mut().unwrap();

        if keyword == "STORAGE" {
            let slots = split_params(params);
            let name = match slots.first().copied().flatten() {
                Some(n) => check_name(line, n)?,
                None => {
                    return Err(ParseError::MissingParameter {
                        line,
                        detail: "STORAGE requires a storage name".to_string(),
                    })
                }
            };
            let capacity = match slots.get(1).copied().flatten() {
                Some(v) => {
                    let c = parse_count(line, v, "storage capacity")?;
                    if c < 1 {
                        return Err(ParseError::InvalidParameter {
                            line,
                            detail: "storage capacity must be at least 1".to_string(),
                        });
                    }
                    c
                }
                None => MAX_STORAGE_CAPACITY,
            };
            partition.storages.push((name, capacity));
            continue;
        }

        let block_no = partition.blocks.len() as u32 + 1;
        let block_ref = BlockRef::new(partition.number, block_no);
        let slots = split_params(params);
        let slot = |i: usize| slots.get(i).copied().flatten();

        let kind = match keyword.as_str() {
            "GENERATE" => {
                let avg = slot(0).map(|v| parse_count(line, v, "average interarrival time"));
                let half = slot(1).map(|v| parse_count(line, v, "half range"));
                let offset = slot(2).map(|v| parse_count(line, v, "time offset"));
                let limit = slot(3).map(|v| parse_count(line, v, "limit count"));
                let priority = slot(4).map(|v| parse_count(line, v, "priority"));
                let avg_interarrival = avg.transpose()?.unwrap_or(0);
                let half_range = half.transpose()?.unwrap_or(0);
                if half_range > avg_interarrival {
                    return Err(ParseError::HalfRangeExceedsAverage { line });
                }
                BlockKind::Generate {
                    avg_interarrival,
                    half_range,
                    offset: offset.transpose()?,
                    limit: limit.transpose()?,
                    priority: priority.transpose()?.unwrap_or(0),
                }
            }
            "TERMINATE" => BlockKind::Terminate {
                decrement: slot(0)
                    .map(|v| parse_count(line, v, "termination counter decrement"))
                    .transpose()?
                    .unwrap_or(0),
            },
            "ADVANCE" => {
                let avg_hold = slot(0)
                    .map(|v| parse_count(line, v, "average holding time"))
                    .transpose()?
                    .unwrap_or(0);
                let half_range = slot(1)
                    .map(|v| parse_count(line, v, "half range"))
                    .transpose()?
                    .unwrap_or(0);
                if half_range > avg_hold {
                    return Err(ParseError::HalfRangeExceedsAverage { line });
                }
                BlockKind::Advance {
                    avg_hold,
                    half_range,
                }
            }
            "SEIZE" | "RELEASE" => {
                let facility = match slot(0) {
                    Some(n) => check_name(line, n)?,
                    None => {
                        return Err(ParseError::MissingParameter {
                            line,
                            detail: format!("{keyword} requires a facility name"),
                        })
                    }
                };
                if !partition.facilities.contains(&facility) {
                    partition.facilities.push(facility.clone());
                }
                if keyword == "SEIZE" {
                    BlockKind::Seize { facility }
                } else {
                    BlockKind::Release { facility }
                }
            }
            "ENTER" | "LEAVE" => {
                let storage = match slot(0) {
                    Some(n) => check_name(line, n)?,
                    None => {
                        return Err(ParseError::MissingParameter {
                            line,
                            detail: format!("{keyword} requires a storage name"),
                        })
                    }
                };
                let capacity = partition.storage_capacity(&storage).ok_or_else(|| {
                    ParseError::StorageNotDeclared {
                        line,
                        name: storage.clone(),
                    }
                })?;
                let usage_count = match slot(1) {
                    Some(v) => {
                        let c = parse_count(line, v, "usage count")?;
                        if c < 1 {
                            return Err(ParseError::InvalidParameter {
                                line,
                                detail: "usage count must be at least 1".to_string(),
                            });
                        }
                        c
                    }
                    None => 1,
                };
                if usage_count > capacity {
                    return Err(ParseError::UsageExceedsCapacity {
                        line,
                        name: storage,
                        usage: usage_count,
                        capacity,
                    });
                }
                if keyword == "ENTER" {
                    BlockKind::Enter {
                        storage,
                        usage_count,
                    }
                } else {
                    BlockKind::Leave {
                        storage,
                        usage_count,
                    }
                }
            }
            "QUEUE" | "DEPART" => {
                let queue = match slot(0) {
                    Some(n) => check_name(line, n)?,
                    None => {
                        return Err(ParseError::MissingParameter {
                            line,
                            detail: format!("{keyword} requires a queue name"),
                        })
                    }
                };
                if !partition.queues.contains(&queue) {
                    partition.queues.push(queue.clone());
                }
                if keyword == "QUEUE" {
                    BlockKind::Queue { queue }
                } else {
                    BlockKind::Depart { queue }
                }
            }
            "TRANSFER" => {
                let (probability, dest) = match (slot(0), slot(1)) {
                    (Some(label), None) if slots.len() == 1 => (1.0, label),
                    (Some(prob), Some(label)) => {
                        let p: f64 = prob.parse().map_err(|_| ParseError::InvalidParameter {
                            line,
                            detail: format!("transfer probability '{prob}' is not a number"),
                        })?;
                        if !(0.0..=1.0).contains(&p) {
                            return Err(ParseError::ProbabilityOutOfRange { line });
                        }
                        (p, label)
                    }
                    _ => {
                        return Err(ParseError::MissingParameter {
                            line,
                            detail: "TRANSFER requires a destination label".to_string(),
                        })
                    }
                };
                let label = check_name(line, dest)?;
                pending_transfers.push(PendingTransfer {
                    line,
                    block: block_ref,
                    label: label.clone(),
                });
                BlockKind::Transfer {
                    probability,
                    label,
                    destination: BlockRef::default(),
                }
            }
            other => {
                return Err(ParseError::UnknownReservedWord {
                    line,
                    word: other.to_string(),
                })
            }
        };

        if let Some(l) = &label {
            if labels.iter().any(|(existing, _, _)| existing == l) {
                return Err(ParseError::DuplicateLabel {
                    line,
                    label: l.clone(),
                });
            }
            labels.push((l.clone(), block_ref, line));
            partition.labels.push((l.clone(), block_ref));
        }
        partition.blocks.push(BlockSpec { kind, label });
    }

    if partitions.is_empty() {
        return Err(ParseError::EmptyModel);
    }

    // Resolve TRANSFER destinations now that all labels are known.
    for pending in pending_transfers {
        let dest = labels
            .iter()
            .find(|(l, _, _)| *l == pending.label)
            .map(|(_, r, _)| *r)
            .ok_or(ParseError::UnresolvedDestination {
                line: pending.line,
                label: pending.label,
            })?;
        let p = &mut partitions[pending.block.partition_no as usize - 1];
        let b = &mut p.blocks[pending.block.block_no as usize - 1];
        if let BlockKind::Transfer { destination, .. } = &mut b.kind {
            *destination = dest;
        }
    }

    Ok(ModelSpec { partitions })
}

impl ModelSpec {
    pub fn partition(&self, number: u32) -> Option<&PartitionSpec> {
        self.partitions.get(number as usize - 1)
    }

    pub fn block_at(&self, r: BlockRef) -> Option<&BlockSpec> {
        self.partition(r.partition_no)?
            .blocks
            .get(r.block_no as usize - 1)
    }

    /// Reference of the block following `r` within the same partition, or
    /// `None` when `r` is the partition's last block.
    pub fn following(&self, r: BlockRef) -> Option<BlockRef> {
        let p = self.partition(r.partition_no)?;
        if (r.block_no as usize) < p.blocks.len() {
            Some(BlockRef::new(r.partition_no, r.block_no + 1))
        } else {
            None
        }
    }

    /// Fills unset partition termination counters from the configured
    /// default; returns the names of partitions that remain unset.
    pub fn resolve_termination_counters(&mut self, default_tc: Option<i64>) -> Vec<String> {
        let mut unresolved = Vec::new();
        for p in &mut self.partitions {
            if p.termination_counter.is_none() {
                match default_tc {
                    Some(tc) => p.termination_counter = Some(tc),
                    None => unresolved.push(p.name.clone()),
                }
            }
        }
        unresolved
    }

    /// Textual parameter list of one block, as used in model dumps, block
    /// reports and transaction movement logs.
    pub fn block_text(&self, r: BlockRef) -> String {
        let block = match self.block_at(r) {
            Some(b) => b,
            None => return format!("<invalid block {r}>"),
        };
        let partition = self.partition(r.partition_no).unwrap();
        match &block.kind {
            BlockKind::Generate {
                avg_interarrival,
                half_range,
                offset,
                limit,
                priority,
            } => {
                let offset = match offset {
                    Some(o) => o.to_string(),
                    None => "(no offset)".to_string(),
                };
                let limit = match limit {
                    Some(l) => l.to_string(),
                    None => "(no limit)".to_string(),
                };
                format!("GENERATE {avg_interarrival},{half_range},{offset},{limit},{priority}")
            }
            BlockKind::Terminate { decrement } => format!("TERMINATE {decrement}"),
            BlockKind::Advance {
                avg_hold,
                half_range,
            } => format!("ADVANCE {avg_hold},{half_range}"),
            BlockKind::Seize { facility } => format!("SEIZE (Facility: {facility})"),
            BlockKind::Release { facility } => format!("RELEASE (Facility: {facility})"),
            BlockKind::Enter {
                storage,
                usage_count,
            } => {
                let capacity = partition.storage_capacity(storage).unwrap_or(0);
                format!("ENTER (Storage: {storage}, capacity: {capacity}),{usage_count}")
            }
            BlockKind::Leave {
                storage,
                usage_count,
            } => {
                let capacity = partition.storage_capacity(storage).unwrap_or(0);
                format!("LEAVE (Storage: {storage}, capacity: {capacity}),{usage_count}")
            }
            BlockKind::Queue { queue } => format!("QUEUE (Queue: {queue})"),
            BlockKind::Depart { queue } => format!("DEPART (Queue: {queue})"),
            BlockKind::Transfer {
                probability,
                label,
                destination,
            } => format!(
                "TRANSFER {},(Label: {label}, partition: {}, block: {})",
                format_probability(*probability),
                destination.partition_no,
                destination.block_no
            ),
        }
    }

    /// Renders the parsed model in the layout printed for ParseModelOnly
    /// runs: one "Partition details:" section per partition with entity
    /// declarations followed by the numbered block list.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for p in &self.partitions {
            out.push_str("  Partition details:\n");
            out.push_str(&format!("    Name: {}\n", p.name));
            out.push_str(&format!("    Partition No: {}\n", p.number));
            match p.termination_counter {
                Some(tc) => {
                    out.push_str(&format!("    Partition's termination counter: {tc}\n"))
                }
                None => out.push_str("    Partition's termination counter: unspecified\n"),
            }
            for (label, r) in &p.labels {
                out.push_str(&format!(
                    "    Label: {label}, partition: {}, block: {}\n",
                    r.partition_no, r.block_no
                ));
            }
            for (name, capacity) in &p.storages {
                out.push_str(&format!("    Storage: {name}, capacity: {capacity}\n"));
            }
            for name in &p.queues {
                out.push_str(&format!("    Queue: {name}\n"));
            }
            for name in &p.facilities {
                out.push_str(&format!("    Facility: {name}\n"));
            }
            for (i, _) in p.blocks.iter().enumerate() {
                let r = BlockRef::new(p.number, i as u32 + 1);
                out.push_str(&format!("   ({}) Block: {}\n", i + 1, self.block_text(r)));
            }
        }
        out
    }
}

impl ModelSpec {
    /// Emits the model back as parseable model-file text. Parsing the
    /// emitted text yields a structurally equal model.
    pub fn to_model_text(&self) -> String {
        let mut out = String::new();
        for p in &self.partitions {
            let name_slot = if valid_name(&p.name) {
                p.name.clone()
            } else {
                // Default partition names contain a space and cannot be
                // written back literally; an empty slot re-derives them.
                String::new()
            };
            match p.termination_counter {
                Some(tc) => out.push_str(&format!("PARTITION {name_slot},{tc}\n")),
                None if name_slot.is_empty() => out.push_str("PARTITION\n"),
                None => out.push_str(&format!("PARTITION {name_slot}\n")),
            }
            for (name, capacity) in &p.storages {
                out.push_str(&format!("STORAGE {name},{capacity}\n"));
            }
            for b in &p.blocks {
                if let Some(label) = &b.label {
                    out.push_str(label);
                    out.push(' ');
                }
                let params = match &b.kind {
                    BlockKind::Generate {
                        avg_interarrival,
                        half_range,
                        offset,
                        limit,
                        priority,
                    } => {
                        let offset = offset.map(|v| v.to_string()).unwrap_or_default();
                        let limit = limit.map(|v| v.to_string()).unwrap_or_default();
                        format!(
                            "GENERATE {avg_interarrival},{half_range},{offset},{limit},{priority}"
                        )
                    }
                    BlockKind::Terminate { decrement } => format!("TERMINATE {decrement}"),
                    BlockKind::Advance {
                        avg_hold,
                        half_range,
                    } => format!("ADVANCE {avg_hold},{half_range}"),
                    BlockKind::Seize { facility } => format!("SEIZE {facility}"),
                    BlockKind::Release { facility } => format!("RELEASE {facility}"),
                    BlockKind::Enter {
                        storage,
                        usage_count,
                    } => format!("ENTER {storage},{usage_count}"),
                    BlockKind::Leave {
                        storage,
                        usage_count,
                    } => format!("LEAVE {storage},{usage_count}"),
                    BlockKind::Queue { queue } => format!("QUEUE {queue}"),
                    BlockKind::Depart { queue } => format!("DEPART {queue}"),
                    BlockKind::Transfer {
                        probability,
                        label,
                        ..
                    } => format!("TRANSFER {},{label}", format_probability(*probability)),
                };
                out.push_str(&params);
                out.push('\n');
            }
        }
        out
    }
}

/// Formats a transfer probability the way the model dump prints it:
/// "1.0", "0.5", "0.25".
pub fn format_probability(p: f64) -> String {
    if p == p.trunc() {
        format!("{p:.1}")
    } else {
        format!("{p}")
    }
}
