//! Layered configuration: built-in defaults, then an optional JSON file,
//! then command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use polyot::raster::{DEFAULT_HEIGHT, DEFAULT_WIDTH};
use polyot::{FitConfig64, SinkhornConfig64};
use serde::{Deserialize, Serialize};

/// Image size written `WxH`, e.g. `640x480`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Resolution {
    pub const DEFAULT: Self = Self {
        width: DEFAULT_WIDTH,
        height: DEFAULT_HEIGHT,
    };

    pub fn pair(self) -> (u32, u32) {
        (self.width, self.height)
    }
}

impl FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
        let (width, height) = (parse(w)?, parse(h)?);
        if width == 0 || height == 0 {
            return Err(format!("resolution must be positive, got {s}"));
        }
        Ok(Self { width, height })
    }
}

impl TryFrom<String> for Resolution {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<Resolution> for String {
    fn from(r: Resolution) -> String {
        r.to_string()
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Contents of a `--config` file. Every section is optional; missing
/// fields inside a section take their defaults. The top-level `sinkhorn`
/// section also replaces `fit.sinkhorn`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub sinkhorn: SinkhornConfig64,
    pub fit: FitConfig64,
    pub resolution: Option<Resolution>,
}

impl CliConfig {
    /// Reads `path`, or the file named by `POLYOT_CONFIG` (already folded
    /// into `path` by clap), or returns the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        // A file that only sets `steps` should not trip the schedule check.
        cfg.fit.loss_schedule.total_steps = cfg.fit.steps;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sinkhorn.validate().context("sinkhorn config")?;
        self.fit.validate().context("fit config")?;
        Ok(())
    }

    /// Prints the effective configuration to standard error.
    pub fn echo(&self) {
        match serde_json::to_string(self) {
            Ok(s) => eprintln!("config: {s}"),
            Err(e) => eprintln!("config: <unprintable: {e}>"),
        }
    }

    pub fn resolution_or_default(&self) -> Resolution {
        self.resolution.unwrap_or(Resolution::DEFAULT)
    }
}

pub fn ensure_parent(path: &Path) -> Result<PathBuf> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    if !parent.is_dir() {
        bail!("directory {} does not exist", parent.display());
    }
    Ok(parent)
}
