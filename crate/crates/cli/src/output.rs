//! Config loading, artifact writing and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{CliError, CliResult, Format};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Fully resolved settings; passing this file back via `--config`
    /// reproduces the run.
    pub config: Value,
    pub artifacts: Vec<String>,
}

/// Reads a config file over the defaults, or returns the defaults when no
/// path is given.
/// A run manifest written by `command` is accepted in place of a config.
pub fn load_config<C: DeserializeOwned + Serialize + Default>(
    path: Option<&Path>,
    command: &str,
) -> CliResult<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if let Ok(manifest) = serde_json::from_str::<RunManifest>(&text) {
        if manifest.command != command {
            return Err(CliError::Validation(format!(
                "{} is a manifest for `{}`, not `{command}`",
                path.display(),
                manifest.command
            )));
        }
        let text = serde_json::to_string(&manifest.config)?;
        return dsmdp::config::from_config_str_over(&text, &C::default())
            .map_err(|e| located(path, e));
    }
    dsmdp::config::from_config_str_over(&text, &C::default()).map_err(|e| located(path, e))
}

/// Prefixes parse errors with the file they came from.
pub fn located(path: &Path, e: dsmdp::Error) -> CliError {
    match e {
        dsmdp::Error::Parse { location, message } => {
            CliError::Parse(format!("{}, {location}: {message}", path.display()))
        }
        other => other.into(),
    }
}

/// Prints the resolved config as `key = value` text.
pub fn dump_config<C: Serialize>(config: &C) -> CliResult<()> {
    print!("{}", dsmdp::config::to_kv_string(config)?);
    Ok(())
}

/// An output directory that records every artifact written into it.
pub struct OutputDir {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> CliResult<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn write_json<S: Serialize + ?Sized>(&mut self, name: &str, value: &S) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// Comma-separated, header row, LF line endings.
    pub fn write_csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> CliResult<()> {
        let path = self.path(name);
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<stem>.csv` or `<stem>.json` depending on the format.
    pub fn write_table<S: Serialize + ?Sized>(
        &mut self,
        format: Format,
        stem: &str,
        header: &[&str],
        rows: &[Vec<String>],
        json: &S,
    ) -> CliResult<()> {
        match format {
            Format::Csv => self.write_csv(&format!("{stem}.csv"), header, rows),
            Format::Json => self.write_json(&format!("{stem}.json"), json),
        }
    }

    pub fn finish<C: Serialize>(
        self,
        command: &str,
        seed: Option<u64>,
        config: &C,
    ) -> CliResult<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config)?,
            artifacts: self.artifacts,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

pub fn fmt<T: std::fmt::Display>(v: T) -> String {
    v.to_string()
}

pub fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
