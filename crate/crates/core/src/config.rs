//! Run configuration: one TOML file drives every stage.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cls::ClsConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::io::phantom::PhantomSpec;
use crate::io::preprocess::PreprocessConfig;
use crate::seg::SegConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    /// Time indices (after preprocessing) of the end-diastolic and
    /// end-systolic masks.
    #[serde(default = "default_mask_frames")]
    pub mask_frames: [usize; 2],
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub seg: SegConfig,
    #[serde(default)]
    pub cls: ClsConfig,
    #[serde(default)]
    pub synth: PhantomSpec,
}

fn default_mask_frames() -> [usize; 2] {
    [0, 6]
}

fn config_err(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::Config(m),
        other => other,
    }
}

/// SplitMix64 step; decorrelates per-stage seeds drawn from one master.
/// Results keep 63 bits so they survive TOML's signed integers.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) >> 1
}

/// Recursive table merge; non-table values and arrays replace wholesale.
fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            paths: PathsConfig::default(),
            preprocess: PreprocessConfig::default(),
            mask_frames: default_mask_frames(),
            encoder: EncoderConfig::default(),
            seg: SegConfig::default(),
            cls: ClsConfig::default(),
            synth: PhantomSpec::default(),
        }
    }

    /// Parses a config whose tables overlay the stage defaults key by key,
    /// so `[cls.gbt]\nrounds = 10` keeps the classifier's other defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !user.contains_key("seed") {
            return Err(Error::Config("missing field `seed`".into()));
        }
        let mut merged = toml::Table::try_from(RunConfig::with_seed(0)).map_err(|e| Error::Config(e.to_string()))?;
        overlay(&mut merged, user);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        (|| -> Result<()> {
            crate::error::ensure!(self.seed <= i64::MAX as u64, "seed must be at most {}", i64::MAX);
            self.encoder.validate()?;
            self.seg.validate()?;
            self.cls.gbt.validate()?;
            self.synth.validate()?;
            crate::error::ensure!(self.preprocess.frames > 0, "preprocess.frames must be positive");
            crate::error::ensure!(
                self.mask_frames.iter().all(|&t| t < self.preprocess.frames),
                "mask_frames {:?} fall outside {} preprocessed frames",
                self.mask_frames,
                self.preprocess.frames
            );
            crate::error::ensure!(
                self.synth.size == self.preprocess.size && self.synth.frames >= self.preprocess.frames,
                "synth volumes ({}x{}, {} frames) do not match preprocessing ({}x{}, {} frames)",
                self.synth.size,
                self.synth.size,
                self.synth.frames,
                self.preprocess.size,
                self.preprocess.size,
                self.preprocess.frames
            );
            Ok(())
        })()
        .map_err(config_err)
    }

    /// Copies derived seeds into every stage config.
    pub fn resolved(mut self) -> Self {
        let s = self.seed;
        self.synth.seed = derive_seed(s, 1);
        self.encoder.seed = derive_seed(s, 2);
        self.seg.seed = derive_seed(s, 3);
        self.seg.initial.seed = derive_seed(s, 4);
        self.seg.residual.seed = derive_seed(s, 5);
        self.cls.seed = derive_seed(s, 6);
        self.cls.gbt.seed = derive_seed(s, 7);
        self
    }
}
