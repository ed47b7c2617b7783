//! Hierarchical logging channels.
//!
//! Channel names form a dot-separated hierarchy rooted at
//! `parallelJavaGpssSimulator`. A channel that has no explicitly configured
//! level inherits the level of its closest configured ancestor, so setting
//! only the root channel configures everything. Output goes either to stderr
//! (optionally with wall-clock timestamps) or into an in-memory buffer used
//! by the deterministic test harness.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Off,
    Error,
    Info,
    Debug,
}

impl Level {
    pub fn parse(s: &str) -> Option<Level> {
        match s.to_ascii_uppercase().as_str() {
            "OFF" => Some(Level::Off),
            "ERROR" | "FATAL" => Some(Level::Error),
            "INFO" => Some(Level::Info),
            "DEBUG" => Some(Level::Debug),
            _ => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Level::Off => "OFF",
            Level::Error => "ERROR",
            Level::Info => "INFO",
            Level::Debug => "DEBUG",
        };
        f.write_str(s)
    }
}

/// Channel names used by the simulator.
pub mod names {
    pub const ROOT: &str = "parallelJavaGpssSimulator";
    pub const GPSS: &str = "parallelJavaGpssSimulator.gpss";
    pub const GPSS_FACILITY: &str = "parallelJavaGpssSimulator.gpss.facility";
    pub const GPSS_QUEUE: &str = "parallelJavaGpssSimulator.gpss.queue";
    pub const GPSS_STORAGE: &str = "parallelJavaGpssSimulator.gpss.storage";
    pub const LP: &str = "parallelJavaGpssSimulator.lp";
    pub const LP_COMMIT: &str = "parallelJavaGpssSimulator.lp.commit";
    pub const LP_ROLLBACK: &str = "parallelJavaGpssSimulator.lp.rollback";
    pub const LP_MEMORY: &str = "parallelJavaGpssSimulator.lp.memory";
    pub const LP_STATS: &str = "parallelJavaGpssSimulator.lp.stats";
    pub const LP_LPCC: &str = "parallelJavaGpssSimulator.lp.lpcc";
    pub const LP_LPCC_STATESPACE: &str = "parallelJavaGpssSimulator.lp.lpcc.statespace";
    pub const SIMULATION: &str = "parallelJavaGpssSimulator.simulation";
    pub const SIMULATION_GVT: &str = "parallelJavaGpssSimulator.simulation.gvt";
    pub const SIMULATION_REPORT: &str = "parallelJavaGpssSimulator.simulation.report";
    pub const SIMULATION_REPORT_BLOCK: &str = "parallelJavaGpssSimulator.simulation.report.block";
    pub const SIMULATION_REPORT_SUMMARY: &str = "parallelJavaGpssSimulator.simulation.report.summary";
    pub const SIMULATION_REPORT_CHAIN: &str = "parallelJavaGpssSimulator.simulation.report.chain";

    pub const ALL: &[&str] = &[
        ROOT,
        GPSS,
        GPSS_FACILITY,
        GPSS_QUEUE,
        GPSS_STORAGE,
        LP,
        LP_COMMIT,
        LP_ROLLBACK,
        LP_MEMORY,
        LP_STATS,
        LP_LPCC,
        LP_LPCC_STATESPACE,
        SIMULATION,
        SIMULATION_GVT,
        SIMULATION_REPORT,
        SIMULATION_REPORT_BLOCK,
        SIMULATION_REPORT_SUMMARY,
        SIMULATION_REPORT_CHAIN,
    ];
}

/// One captured log line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogLine {
    pub channel: String,
    pub message: String,
}

#[derive(Debug)]
enum SinkKind {
    Stderr { timestamps: bool },
    Stdout { timestamps: bool },
    Buffer(Vec<LogLine>),
}

#[derive(Debug)]
struct LogInner {
    levels: BTreeMap<String, Level>,
    sink: SinkKind,
}

/// Shared handle to the logging configuration and sink.
#[derive(Debug, Clone)]
pub struct Log {
    inner: Arc<Mutex<LogInner>>,
}

impl Log {
    fn with_sink(levels: BTreeMap<String, Level>, sink: SinkKind) -> Log {
        let mut levels = levels;
        levels.entry(names::ROOT.to_string()).or_insert(Level::Info);
        Log {
            inner: Arc::new(Mutex::new(LogInner { levels, sink })),
        }
    }

    pub fn to_stderr(levels: BTreeMap<String, Level>, timestamps: bool) -> Log {
        Log::with_sink(levels, SinkKind::Stderr { timestamps })
    }

    pub fn to_stdout(levels: BTreeMap<String, Level>, timestamps: bool) -> Log {
        Log::with_sink(levels, SinkKind::Stdout { timestamps })
    }

    /// Buffering log used by tests and the deterministic harness.
    pub fn buffered(levels: BTreeMap<String, Level>) -> Log {
        Log::with_sink(levels, SinkKind::Buffer(Vec::new()))
    }

    /// Buffering log with every channel at DEBUG.
    pub fn debug_buffer() -> Log {
        let mut levels = BTreeMap::new();
        levels.insert(names::ROOT.to_string(), Level::Debug);
        Log::buffered(levels)
    }

    /// Silent log for tests that do not inspect output.
    pub fn off() -> Log {
        let mut levels = BTreeMap::new();
        levels.insert(names::ROOT.to_string(), Level::Off);
        Log::buffered(levels)
    }

    /// Effective level of a channel, walking up the name hierarchy.
    pub fn level_for(&self, channel: &str) -> Level {
        let inner = self.inner.lock().unwrap();
        let mut name = channel;
        loop {
            if let Some(l) = inner.levels.get(name) {
                return *l;
            }
            match name.rfind('.') {
                Some(i) => name = &name[..i],
                None => return Level::Info,
            }
        }
    }

    pub fn enabled(&self, channel: &str, level: Level) -> bool {
        level <= self.level_for(channel)
    }

    pub fn log(&self, channel: &str, level: Level, message: &str) {
        if !self.enabled(channel, level) {
            return;
        }
        let mut inner = self.inner.lock().unwrap();
        match &mut inner.sink {
            SinkKind::Stderr { timestamps } => {
                if *timestamps {
                    eprintln!("{} {}", wallclock_stamp(), message);
                } else {
                    eprintln!("{message}");
                }
            }
            SinkKind::Stdout { timestamps } => {
                if *timestamps {
                    println!("{} {}", wallclock_stamp(), message);
                } else {
                    println!("{message}");
                }
            }
            SinkKind::Buffer(buf) => buf.push(LogLine {
                channel: channel.to_string(),
                message: message.to_string(),
            }),
        }
    }

    pub fn debug(&self, channel: &str, message: &str) {
        self.log(channel, Level::Debug, message);
    }

    pub fn info(&self, channel: &str, message: &str) {
        self.log(channel, Level::Info, message);
    }

    pub fn error(&self, channel: &str, message: &str) {
        self.log(channel, Level::Error, message);
    }

    /// Snapshot of the buffered lines; empty for stream sinks.
    pub fn lines(&self) -> Vec<LogLine> {
        let inner = self.inner.lock().unwrap();
        match &inner.sink {
            SinkKind::Buffer(buf) => buf.clone(),
            _ => Vec::new(),
        }
    }

    /// Buffered messages of one channel.
    pub fn messages_for(&self, channel: &str) -> Vec<String> {
        self.lines()
            .into_iter()
            .filter(|l| l.channel == channel)
            .map(|l| l.message)
            .collect()
    }

    /// All buffered messages in emission order.
    pub fn messages(&self) -> Vec<String> {
        self.lines().into_iter().map(|l| l.message).collect()
    }
}

fn wallclock_stamp() -> String {
    use std::time::{SystemTime, UNIX_EPOCH};
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default();
    let secs = now.as_secs();
    let ms = now.subsec_millis();
    let (h, m, s) = ((secs / 3600) % 24, (secs / 60) % 60, secs % 60);
    format!("{h:02}:{m:02}:{s:02},{ms:03}")
}
