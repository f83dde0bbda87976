//! Checkpoint file: magic string, version, config block, stage flags,
//! then named tensor blobs in canonical (registration) order.
//!
//! Canonical ordering plus shortest-round-trip float formatting makes
//! load→save byte-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{RunConfig, TrainError};
use crate::tensor::{read_tensor, write_tensor, Tensor};

const MAGIC: &str = "PCRECON";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkCheckpoint {
    pub version: u32,
    pub config: RunConfig,
    pub stage1_done: bool,
    pub stage2_done: bool,
    /// Named parameter blobs, canonical order.
    pub tensors: Vec<(String, Tensor)>,
}

impl NetworkCheckpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}{}", MAGIC, self.version)?;
        let lines = self.config.to_kv_lines();
        writeln!(w, "config {}", lines.len())?;
        for line in &lines {
            writeln!(w, "{line}")?;
        }
        writeln!(
            w,
            "flags stage1={} stage2={}",
            u8::from(self.stage1_done),
            u8::from(self.stage2_done)
        )?;
        writeln!(w, "tensors {}", self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_tensor(&mut w, name, t)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();

        r.read_line(&mut line)?;
        let header = line.trim();
        if !header.starts_with(MAGIC) {
            return Err(TrainError::BadCheckpoint("missing magic string".into()));
        }
        let version: u32 = header[MAGIC.len()..]
            .parse()
            .map_err(|_| TrainError::BadCheckpoint("bad version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::BadCheckpoint(format!(
                "unsupported version {version}"
            )));
        }

        line.clear();
        r.read_line(&mut line)?;
        let n_config: usize = line
            .trim()
            .strip_prefix("config ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TrainError::BadCheckpoint("missing config block".into()))?;
        let mut kv = Vec::with_capacity(n_config);
        for _ in 0..n_config {
            line.clear();
            r.read_line(&mut line)?;
            kv.push(line.trim().to_string());
        }
        let config = RunConfig::from_kv_lines(&kv)
            .map_err(|e| TrainError::BadCheckpoint(format!("config: {e}")))?;

        line.clear();
        r.read_line(&mut line)?;
        let flags = line.trim();
        let parse_flag = |tag: &str| -> Result<bool, TrainError> {
            flags
                .split_whitespace()
                .find_map(|tok| tok.strip_prefix(&format!("{tag}=")))
                .and_then(|v| match v {
                    "0" => Some(false),
                    "1" => Some(true),
                    _ => None,
                })
                .ok_or_else(|| TrainError::BadCheckpoint(format!("missing flag {tag}")))
        };
        if !flags.starts_with("flags ") {
            return Err(TrainError::BadCheckpoint("missing flags line".into()));
        }
        let stage1_done = parse_flag("stage1")?;
        let stage2_done = parse_flag("stage2")?;

        line.clear();
        r.read_line(&mut line)?;
        let n_tensors: usize = line
            .trim()
            .strip_prefix("tensors ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TrainError::BadCheckpoint("missing tensor count".into()))?;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            tensors.push(read_tensor(&mut r)?);
        }

        Ok(Self {
            version,
            config,
            stage1_done,
            stage2_done,
            tensors,
        })
    }
}
