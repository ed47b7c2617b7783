//! Shared fixtures and helpers for integration tests: the validation model
//! corpus, a seeded random-model generator and trace utilities.

// Each integration test target compiles this module separately and uses a
// different subset of it.
#![allow(dead_code)]

use std::sync::Arc;

use gpssim::config::Config;
use gpssim::logging::Log;
use gpssim::model::{parse_model, ModelSpec};

pub const MODEL_VALIDATION_1_1: &str = "\
PARTITION Partition1,5
STORAGE Storage1,2
GENERATE 1,0,100,50,5
ENTER Storage1,1
ADVANCE 5,3
LEAVE Storage1,1
TRANSFER 0.5,Label1
TERMINATE 1
PARTITION Partition2,10
Label1 QUEUE Queue1
DEPART Queue1
SEIZE Facility1
RELEASE Facility1
TERMINATE 1
";

pub const MODEL_VALIDATION_1_2: &str = "\
STORAGE Storage1
GENERATE
ENTER Storage1
ADVANCE
LEAVE Storage1
TRANSFER Label1
TERMINATE
PARTITION Partition2
Label1 QUEUE Queue1
DEPART Queue1
SEIZE Facility1
RELEASE Facility1
TERMINATE
";

pub const MODEL_VALIDATION_2: &str = "\
PARTITION Partition1,4
STORAGE Storage1,2
GENERATE 3,2
QUEUE Queue1
ENTER Storage1,1
ADVANCE 5,3
LEAVE Storage1,1
DEPART Queue1
TRANSFER 0.5,Label1
SEIZE Facility1
RELEASE Facility1
Label1 TERMINATE 1
";

pub const MODEL_VALIDATION_3_1: &str = "\
PARTITION Partition1,4
GENERATE 3,2,,10
TRANSFER Label1
PARTITION Partition2,4
Label1 TERMINATE 1
";

pub const MODEL_VALIDATION_3_2: &str = "\
PARTITION Partition1,750
GENERATE 3,2
TRANSFER 0.25,Label1
TERMINATE 1
PARTITION Partition2,750
Label1 TERMINATE 1
";

pub const MODEL_VALIDATION_4: &str = "\
PARTITION Partition1,2000
GENERATE 1,0
Label1 QUEUE Queue1
DEPART Queue1
TERMINATE 1
PARTITION Partition2
GENERATE 1,0,2000
TRANSFER Label1
";

pub const MODEL_VALIDATION_5: &str = "\
PARTITION Partition1,20000
GENERATE 1,0
TRANSFER 0.001,Label1
TERMINATE 0
PARTITION Partition2,20000
GENERATE 4,0,5000
Label1 TERMINATE 1
";

/// Zero-delay transfer loop across two partitions: a transaction leaves
/// partition 1, bounces off partition 2 and returns at the same tick.
pub const MODEL_ZERO_DELAY_LOOP: &str = "\
PARTITION Partition1,1
GENERATE 5,0,,1
TRANSFER ToP2
Back TERMINATE 1
PARTITION Partition2,1000
ToP2 TRANSFER Back
";

pub fn model(text: &str) -> Arc<ModelSpec> {
    Arc::new(parse_model(text).expect("fixture model parses"))
}

pub fn model_with_default_tc(text: &str, default_tc: i64) -> Arc<ModelSpec> {
    let mut m = parse_model(text).expect("fixture model parses");
    m.resolve_termination_counters(Some(default_tc));
    Arc::new(m)
}

pub fn quiet_config() -> Config {
    Config::default()
}

pub fn debug_log() -> Log {
    Log::debug_buffer()
}

/// Collapses runs of whitespace and drops blank lines, the normalization
/// under which golden outputs are compared.
pub fn normalize_whitespace(text: &str) -> String {
    text.lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Deterministic mixing used by the random model generator.
pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub struct Pick {
    state: u64,
}

impl Pick {
    pub fn new(seed: u64) -> Pick {
        Pick { state: mix(seed) }
    }

    pub fn next(&mut self, bound: u64) -> u64 {
        self.state = mix(self.state);
        self.state % bound
    }

    pub fn range(&mut self, lo: i64, hi: i64) -> i64 {
        lo + self.next((hi - lo + 1) as u64) as i64
    }
}

/// Generates a random 2..=4-partition model for the parallel/sequential
/// equivalence oracle. Every GENERATE block gets a globally distinct
/// priority and strictly positive interarrival times, which pins the global
/// transaction order so the confirmed parallel end state must equal the
/// sequential reference exactly.
pub fn random_model(seed: u64) -> Arc<ModelSpec> {
    let mut pick = Pick::new(seed);
    let partitions = 2 + pick.next(3) as usize;
    let mut text = String::new();
    // Every partition terminates transactions; labels route cross-partition
    // transfers at the head of each partition. Globally distinct GENERATE
    // priorities are the partition numbers themselves.
    for p in 1..=partitions {
        let priority = p;
        let tc = pick.range(8, 30);
        text.push_str(&format!("PARTITION P{p},{tc}\n"));
        let avg = pick.range(2, 6);
        let half = pick.range(0, avg - 1);
        let limit = if pick.next(3) == 0 {
            format!(",{}", pick.range(30, 60))
        } else {
            String::new()
        };
        text.push_str(&format!("GENERATE {avg},{half},{}", pick.range(0, 3)));
        if !limit.is_empty() {
            text.push_str(&limit);
            text.push_str(&format!(",{priority}"));
        } else {
            text.push_str(&format!(",,{priority}"));
        }
        text.push('\n');
        let queued = pick.next(2) == 0;
        if queued {
            text.push_str(&format!("QUEUE Q{p}\n"));
        }
        if pick.next(2) == 0 {
            let hold = pick.range(1, 5);
            let hhalf = pick.range(0, hold - 1);
            text.push_str(&format!("ADVANCE {hold},{hhalf}\n"));
        }
        if queued {
            text.push_str(&format!("DEPART Q{p}\n"));
        }
        // Transfer some transactions to the entry label of another
        // partition.
        let dest = loop {
            let d = 1 + pick.next(partitions as u64) as usize;
            if d != p || partitions == 1 {
                break d;
            }
        };
        let prob = [0.1, 0.25, 0.5][pick.next(3) as usize];
        text.push_str(&format!("TRANSFER {prob},Entry{dest}\n"));
        text.push_str(&format!("Entry{p} TERMINATE 1\n"));
    }
    model(&text)
}
