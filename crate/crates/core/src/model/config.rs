//! Model hyperparameters and the flat `key=value` text format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::heads::{MixerKind, MixerSpec};
use crate::spiking::LifParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shortcut {
    /// Residuals on spikes, merged with a logical OR.
    Vanilla,
    /// Residuals on membrane potentials before thresholding.
    Membrane,
}

impl FromStr for Shortcut {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Shortcut::Vanilla),
            "ms" | "membrane" => Ok(Shortcut::Membrane),
            other => Err(Error::Config(format!("unknown shortcut '{other}' (expected vanilla or ms)"))),
        }
    }
}

impl std::fmt::Display for Shortcut {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Shortcut::Vanilla => "vanilla",
            Shortcut::Membrane => "ms",
        })
    }
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", i + 1)))?;
        let key = k.trim().to_string();
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{key}'", i + 1)));
        }
    }
    Ok(map)
}

/// Parses `map[key]` if present, otherwise keeps `default`.
pub fn take<T: FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        Some(v) => v
            .parse()
            .map_err(|e| Error::Config(format!("bad value '{v}' for {key}: {e}"))),
        None => Ok(default),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub time_steps: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub mixer: MixerSpec,
    pub mlp_ratio: usize,
    pub shortcut: Shortcut,
    pub classes: usize,
    pub lif: LifParams,
}

impl Default for ModelConfig {
    /// Desk-scale event-camera configuration: 4 steps of 2×32×32 frames.
    fn default() -> Self {
        ModelConfig {
            time_steps: 4,
            channels: 2,
            height: 32,
            width: 32,
            patch: 8,
            dim: 64,
            layers: 2,
            mixer: MixerSpec::default(),
            mlp_ratio: 4,
            shortcut: Shortcut::Vanilla,
            classes: 4,
            lif: LifParams::default(),
        }
    }
}

impl ModelConfig {
    pub fn with_head(mut self, kind: MixerKind) -> Self {
        self.mixer.kind = kind;
        self
    }

    /// Token count `(H/patch)·(W/patch)`.
    pub fn seq_len(&self) -> usize {
        (self.height / self.patch.max(1)) * (self.width / self.patch.max(1))
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Number of patch-embedding blocks that end in a 2×2 max pool.
    pub fn pooled_blocks(&self) -> usize {
        self.patch.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.time_steps == 0 || self.layers == 0 || self.classes == 0 || self.channels == 0 {
            return bad("time_steps, layers, classes and channels must be >= 1".into());
        }
        if !self.patch.is_power_of_two() || self.pooled_blocks() > 4 {
            return bad(format!("patch {} must be a power of two no larger than 16", self.patch));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad(format!(
                "input {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        let (gh, gw) = self.grid();
        if gh != gw {
            return bad(format!("patch grid {gh}x{gw} is not square"));
        }
        if self.dim < 8 || !self.dim.is_multiple_of(8) {
            return bad(format!("dim {} must be a positive multiple of 8", self.dim));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        self.mixer.validate(self.dim)?;
        self.lif.validate()
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("time_steps", self.time_steps.to_string());
        put("channels", self.channels.to_string());
        put("height", self.height.to_string());
        put("width", self.width.to_string());
        put("patch", self.patch.to_string());
        put("dim", self.dim.to_string());
        put("layers", self.layers.to_string());
        put("head", self.mixer.kind.name());
        put("heads", self.mixer.heads.to_string());
        put("attn_scale", self.mixer.scale.to_string());
        put("mult_order", self.mixer.mult_order.to_string());
        put("mlp_ratio", self.mlp_ratio.to_string());
        put("shortcut", self.shortcut.to_string());
        put("classes", self.classes.to_string());
        put("tau", self.lif.tau.to_string());
        put("v_th", self.lif.v_th.to_string());
        put("v_reset", self.lif.v_reset.to_string());
        put("surrogate_width", self.lif.surrogate_width.to_string());
        s
    }

    /// Reads model keys from `map`, defaulting absent ones; unknown keys are ignored.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            time_steps: take(map, "time_steps", d.time_steps)?,
            channels: take(map, "channels", d.channels)?,
            height: take(map, "height", d.height)?,
            width: take(map, "width", d.width)?,
            patch: take(map, "patch", d.patch)?,
            dim: take(map, "dim", d.dim)?,
            layers: take(map, "layers", d.layers)?,
            mixer: MixerSpec {
                kind: take(map, "head", d.mixer.kind)?,
                heads: take(map, "heads", d.mixer.heads)?,
                scale: take(map, "attn_scale", d.mixer.scale)?,
                mult_order: take(map, "mult_order", d.mixer.mult_order)?,
            },
            mlp_ratio: take(map, "mlp_ratio", d.mlp_ratio)?,
            shortcut: take(map, "shortcut", d.shortcut)?,
            classes: take(map, "classes", d.classes)?,
            lif: LifParams {
                tau: take(map, "tau", d.lif.tau)?,
                v_th: take(map, "v_th", d.lif.v_th)?,
                v_reset: take(map, "v_reset", d.lif.v_reset)?,
                surrogate_width: take(map, "surrogate_width", d.lif.surrogate_width)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        Self::from_map(&parse_kv(text)?)
    }
}
