//! `manifest.txt`: one `key=value` per line, in insertion order, with a
//! 64-bit FNV-1a hash for every artifact written by the command.

use std::fmt::Display;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use sws_core::store::write_atomic;

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

pub fn file_hash(path: &Path) -> Result<u64, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut h = FnvHasher::default();
    h.write(&bytes);
    Ok(h.finish())
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Records `dir/name` as `artifact.<name>=<fnv64 hex>`.
    pub fn artifact(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        let h = file_hash(&dir.join(name))?;
        self.set(&format!("artifact.{name}"), format!("{h:016x}"));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        Ok(write_atomic(&dir.join(MANIFEST_FILE), self.render().as_bytes())?)
    }
}
