//! Simulator configuration.
//!
//! Settings come from command line arguments or a configuration file in
//! `<name>=<value>` form; boolean settings may be given without a value, in
//! which case they are set to true. Logger levels are configured in the same
//! file with `log4j.logger.<channel>=<LEVEL>` (or `logger.<channel>=`) keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::logging::Level;

pub const DEFAULT_CONFIG_FILE: &str = "simulate.config";
const MIB: u64 = 1024 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub config_file: PathBuf,
    pub default_tc: Option<i64>,
    pub lpcc_enabled: bool,
    pub lpcc_cluster_number: usize,
    /// Seconds between LPCC processing rounds.
    pub lpcc_update_interval: u64,
    pub parse_model_only: bool,
    pub log_config_details: bool,
    pub memory_budget_bytes: u64,
    pub memory_limit1: u64,
    pub memory_limit2: u64,
    pub cancelback_batch: u64,
    pub rng_seed: u64,
    pub deterministic: bool,
    pub include_chain_report: bool,
    /// Test hook: build LPs without any control component at all, as
    /// opposed to `lpcc_enabled = false` which keeps it but never uses it.
    pub lpcc_stubbed_out: bool,
    pub logger_levels: BTreeMap<String, Level>,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            config_file: PathBuf::from(DEFAULT_CONFIG_FILE),
            default_tc: None,
            lpcc_enabled: true,
            lpcc_cluster_number: 1000,
            lpcc_update_interval: 10,
            parse_model_only: false,
            log_config_details: false,
            memory_budget_bytes: 64 * MIB,
            memory_limit1: 5 * MIB,
            memory_limit2: MIB,
            cancelback_batch: 25,
            rng_seed: 0,
            deterministic: false,
            include_chain_report: false,
            lpcc_stubbed_out: false,
            logger_levels: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown configuration setting '{0}'")]
    UnknownKey(String),
    #[error("malformed value for '{key}': {value}")]
    MalformedValue { key: String, value: String },
    #[error("configuration file '{0}' cannot be read")]
    UnreadableFile(String),
    #[error("{0}")]
    Invalid(String),
}

fn parse_bool(key: &str, value: Option<&str>) -> Result<bool, ConfigError> {
    match value {
        None => Ok(true),
        Some(v) => match v.to_ascii_lowercase().as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(ConfigError::MalformedValue {
                key: key.to_string(),
                value: v.to_string(),
            }),
        },
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: Option<&str>) -> Result<T, ConfigError> {
    let v = value.ok_or_else(|| ConfigError::MalformedValue {
        key: key.to_string(),
        value: "<missing>".to_string(),
    })?;
    v.parse().map_err(|_| ConfigError::MalformedValue {
        key: key.to_string(),
        value: v.to_string(),
    })
}

impl Config {
    fn apply(&mut self, key: &str, value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(channel) = key
            .strip_prefix("log4j.logger.")
            .or_else(|| key.strip_prefix("logger."))
        {
            let v = value.ok_or_else(|| ConfigError::MalformedValue {
                key: key.to_string(),
                value: "<missing>".to_string(),
            })?;
            let level = Level::parse(v).ok_or_else(|| ConfigError::MalformedValue {
                key: key.to_string(),
                value: v.to_string(),
            })?;
            self.logger_levels.insert(channel.to_string(), level);
            return Ok(());
        }
        match key {
            "ConfigFile" => {
                self.config_file = PathBuf::from(value.ok_or_else(|| {
                    ConfigError::MalformedValue {
                        key: key.to_string(),
                        value: "<missing>".to_string(),
                    }
                })?)
            }
            "DefaultTC" => self.default_tc = Some(parse_num(key, value)?),
            "LpccEnabled" => self.lpcc_enabled = parse_bool(key, value)?,
            "LpccClusterNumber" => self.lpcc_cluster_number = parse_num(key, value)?,
            "LpccUpdateInterval" => self.lpcc_update_interval = parse_num(key, value)?,
            "ParseModelOnly" => self.parse_model_only = parse_bool(key, value)?,
            "LogConfigDetails" => self.log_config_details = parse_bool(key, value)?,
            "MemoryBudgetBytes" => self.memory_budget_bytes = parse_num(key, value)?,
            "MemoryLimit1" => self.memory_limit1 = parse_num(key, value)?,
            "MemoryLimit2" => self.memory_limit2 = parse_num(key, value)?,
            "CancelbackBatch" => self.cancelback_batch = parse_num(key, value)?,
            "RngSeed" => self.rng_seed = parse_num(key, value)?,
            "Deterministic" => self.deterministic = parse_bool(key, value)?,
            "IncludeChainReport" => self.include_chain_report = parse_bool(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn apply_setting(&mut self, setting: &str) -> Result<(), ConfigError> {
        let setting = setting.trim();
        if setting.is_empty() {
            return Ok(());
        }
        match setting.split_once('=') {
            Some((k, v)) => self.apply(k.trim(), Some(v.trim())),
            None => self.apply(setting, None),
        }
    }

    fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| ConfigError::UnreadableFile(path.display().to_string()))?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('*') {
                continue;
            }
            self.apply_setting(line)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lpcc_update_interval == 0 {
            return Err(ConfigError::Invalid(
                "LpccUpdateInterval must be greater than zero".to_string(),
            ));
        }
        if !(self.memory_limit2 < self.memory_limit1 && self.memory_limit1 < self.memory_budget_bytes)
        {
            return Err(ConfigError::Invalid(
                "memory limits must satisfy limit2 < limit1 < budget".to_string(),
            ));
        }
        Ok(())
    }

    /// Loads the configuration from the command line arguments following
    /// the model file name. A first argument of `ConfigFile=...` selects a
    /// configuration file; otherwise the arguments themselves are settings;
    /// with no arguments the default configuration file is used when it
    /// exists.
    pub fn load(args: &[String]) -> Result<Config, ConfigError> {
        let mut config = Config::default();
        match args.first() {
            Some(first) if first.starts_with("ConfigFile=") => {
                config.apply_setting(first)?;
                let file = config.config_file.clone();
                config.apply_file(&file)?;
                for arg in &args[1..] {
                    config.apply_setting(arg)?;
                }
            }
            Some(_) => {
                for arg in args {
                    config.apply_setting(arg)?;
                }
            }
            None => {
                let file = config.config_file.clone();
                if file.exists() {
                    config.apply_file(&file)?;
                }
            }
        }
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(args: &[&str]) -> Vec<String> {
        args.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bare_boolean_argument_sets_true() {
        let c = Config::load(&strings(&["ParseModelOnly"])).unwrap();
        assert!(c.parse_model_only);
    }

    #[test]
    fn key_value_arguments_override_defaults() {
        let c = Config::load(&strings(&[
            "LpccEnabled=false",
            "LpccUpdateInterval=5",
            "DefaultTC=100",
            "RngSeed=42",
        ]))
        .unwrap();
        assert!(!c.lpcc_enabled);
        assert_eq!(c.lpcc_update_interval, 5);
        assert_eq!(c.default_tc, Some(100));
        assert_eq!(c.rng_seed, 42);
        assert_eq!(c.cancelback_batch, 25);
    }

    #[test]
    fn config_file_argument_reads_the_file() {
        let dir = std::env::temp_dir().join(format!("gpssim-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.cfg");
        std::fs::write(
            &path,
            "# comment\nLpccClusterNumber=500\nLpccUpdateInterval=5\nlog4j.logger.parallelJavaGpssSimulator.lp=DEBUG\n",
        )
        .unwrap();
        let c = Config::load(&strings(&[&format!("ConfigFile={}", path.display())])).unwrap();
        assert_eq!(c.lpcc_cluster_number, 500);
        assert_eq!(c.lpcc_update_interval, 5);
        assert_eq!(
            c.logger_levels.get("parallelJavaGpssSimulator.lp"),
            Some(&Level::Debug)
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_key_and_malformed_value_error() {
        assert!(matches!(
            Config::load(&strings(&["NoSuchSetting=1"])),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            Config::load(&strings(&["LpccUpdateInterval=abc"])),
            Err(ConfigError::MalformedValue { .. })
        ));
    }

    #[test]
    fn memory_limit_ordering_is_validated() {
        assert!(matches!(
            Config::load(&strings(&["MemoryBudgetBytes=1000", "MemoryLimit1=2000"])),
            Err(ConfigError::Invalid(_))
        ));
    }
}
