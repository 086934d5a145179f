use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Channel plan and block shape of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    /// Output channels of encoding blocks 1-4. The decoder mirrors 3-1.
    pub block_depths: [usize; 4],
    pub main_convs_per_block: usize,
    pub input_channels: usize,
    /// `false` drops every refining branch.
    pub refine: bool,
}

impl ArchConfig {
    pub fn paper() -> Self {
        ArchConfig {
            block_depths: [64, 128, 256, 512],
            main_convs_per_block: 2,
            input_channels: 1,
            refine: true,
        }
    }

    pub fn tiny() -> Self {
        ArchConfig {
            block_depths: [8, 16, 32, 64],
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!(
                "unknown preset {other:?}, expected \"paper\" or \"tiny\""
            ))),
        }
    }

    pub fn without_refine(mut self) -> Self {
        self.refine = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_depths.contains(&0) {
            return Err(Error::config(format!(
                "block depths must be positive, got {:?}",
                self.block_depths
            )));
        }
        if self.main_convs_per_block == 0 {
            return Err(Error::config("main_convs_per_block must be positive"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be positive"));
        }
        Ok(())
    }

    /// `key=value` lines, one field per line.
    pub fn to_kv(&self) -> String {
        let d = self.block_depths;
        let mut s = String::new();
        let _ = writeln!(s, "block_depths={},{},{},{}", d[0], d[1], d[2], d[3]);
        let _ = writeln!(s, "main_convs_per_block={}", self.main_convs_per_block);
        let _ = writeln!(s, "input_channels={}", self.input_channels);
        let _ = writeln!(s, "refine={}", self.refine);
        s
    }

    /// Inverse of [`ArchConfig::to_kv`]. Every key is required.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut depths = None;
        let mut convs = None;
        let mut channels = None;
        let mut refine = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {line:?} is not key=value")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("{key}: {v:?} is not a non-negative integer")))
            };
            match key.trim() {
                "block_depths" => {
                    let parts = value.split(',').map(num).collect::<Result<Vec<_>>>()?;
                    let arr: [usize; 4] = parts.try_into().map_err(|v: Vec<usize>| {
                        Error::config(format!("block_depths needs 4 values, got {}", v.len()))
                    })?;
                    depths = Some(arr);
                }
                "main_convs_per_block" => convs = Some(num(value)?),
                "input_channels" => channels = Some(num(value)?),
                "refine" => {
                    refine = Some(value.trim().parse::<bool>().map_err(|_| {
                        Error::config(format!("refine: {value:?} is not true/false"))
                    })?)
                }
                other => return Err(Error::config(format!("unknown config key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::config(format!("config is missing {k}"));
        let cfg = ArchConfig {
            block_depths: depths.ok_or_else(|| missing("block_depths"))?,
            main_convs_per_block: convs.ok_or_else(|| missing("main_convs_per_block"))?,
            input_channels: channels.ok_or_else(|| missing("input_channels"))?,
            refine: refine.ok_or_else(|| missing("refine"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
