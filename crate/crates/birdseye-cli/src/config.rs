//! Flat `key=value` run configuration.
//!
//! Keys use section prefixes (`stabilize.ssim_threshold=0.70`). Every key has
//! a default; a config file overrides defaults and command-line flags
//! override the file. The fully resolved ("effective") configuration is
//! dumped to the artifact directory and hashed, and the hash is stamped into
//! every output's provenance header.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    F64,
    U64,
    Usize,
    Bool,
    Str,
}

/// Registry of every known key with its type and default. Unknown keys are
/// rejected so typos fail at load time instead of silently using defaults.
const KEYS: &[(&str, Kind, &str)] = &[
    ("seed", Kind::U64, "0"),
    ("gen.n_pairs", Kind::Usize, "12"),
    ("gen.width", Kind::Usize, "256"),
    ("gen.height", Kind::Usize, "256"),
    ("gen.meters_per_pixel", Kind::F64, "0.35"),
    ("gen.frame_rate_hz", Kind::F64, "10"),
    ("gen.n_frames", Kind::Usize, "200"),
    ("gen.t_start_s", Kind::F64, "0"),
    ("gen.detection_noise_sigma_m", Kind::F64, "0.15"),
    ("gen.supersample", Kind::Usize, "1"),
    ("gen.jitter", Kind::Bool, "true"),
    ("gen.jitter_translation_px", Kind::F64, "10"),
    ("gen.jitter_rotation_deg", Kind::F64, "1"),
    ("gen.jitter_perspective", Kind::F64, "0.0001"),
    ("gen.jitter_smoothing", Kind::F64, "0.8"),
    ("gen.split_train", Kind::F64, "0.6"),
    ("gen.split_val", Kind::F64, "0.2"),
    ("gen.split_test", Kind::F64, "0.2"),
    ("stabilize.ssim_threshold", Kind::F64, "0.70"),
    ("stabilize.ds_factor", Kind::Usize, "2"),
    ("stabilize.ecc_max_iters", Kind::Usize, "50"),
    ("stabilize.ecc_eps", Kind::F64, "0.00001"),
    ("stabilize.ransac_iters", Kind::Usize, "2000"),
    ("stabilize.ransac_inlier_px", Kind::F64, "2"),
    ("transform.drop_off_road", Kind::Bool, "false"),
    ("track.dt_s", Kind::F64, "0.1"),
    ("track.accel_var", Kind::F64, "9"),
    ("track.meas_var", Kind::F64, "0.09"),
    ("track.gate_m", Kind::F64, "3"),
    ("track.confirm_hits", Kind::U64, "3"),
    ("track.max_misses", Kind::U64, "5"),
    ("track.init_vel_var", Kind::F64, "100"),
    ("predict.window", Kind::Usize, "10"),
    ("predict.horizon", Kind::Usize, "30"),
    ("predict.stride", Kind::Usize, "5"),
    ("predict.hidden_intention", Kind::Usize, "24"),
    ("predict.hidden_trajectory", Kind::Usize, "32"),
    ("predict.batch_size", Kind::Usize, "16"),
    ("predict.intention_epochs", Kind::Usize, "200"),
    ("predict.intention_epochs_2", Kind::Usize, "200"),
    ("predict.intention_lr", Kind::F64, "0.01"),
    ("predict.intention_lr_2", Kind::F64, "0.002"),
    ("predict.trajectory_epochs", Kind::Usize, "80"),
    ("predict.trajectory_epochs_2", Kind::Usize, "80"),
    ("predict.trajectory_lr", Kind::F64, "0.005"),
    ("predict.trajectory_lr_2", Kind::F64, "0.001"),
    ("predict.modes", Kind::Str, "plain,with_intention,conditioned"),
    ("predict.eval_stride", Kind::Usize, "5"),
    ("predict.route_lo", Kind::F64, "-10"),
    ("predict.route_hi", Kind::F64, "40"),
    ("predict.closed_loop", Kind::Bool, "true"),
    ("predict.eval_oracle", Kind::Bool, "true"),
    ("pipeline.stages", Kind::Str, "stabilize,transform,track,smooth"),
];

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, k, _)| *k)
}

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn defaults() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, _, d)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }

    /// Sets a key, rejecting unknown names and unparseable values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let kind = kind_of(key).ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
        check_value(key, kind, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` lines from a file. Blank lines and `#` comments
    /// are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected key=value, got `{line}`", path.display(), n + 1);
            };
            self.set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), n + 1))?;
        }
        Ok(())
    }

    /// Sorted `key=value` lines of the fully resolved configuration.
    pub fn effective_body(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// First 16 hex chars of the SHA-256 of the effective body.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.effective_body().as_bytes());
        let mut s = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key `{key}` missing from registry"))
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.raw(key).parse().unwrap()
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.raw(key).parse().unwrap()
    }

    pub fn usize(&self, key: &str) -> usize {
        self.raw(key).parse().unwrap()
    }

    pub fn u32(&self, key: &str) -> u32 {
        self.u64(key) as u32
    }

    pub fn bool(&self, key: &str) -> bool {
        self.raw(key).parse().unwrap()
    }

    pub fn str(&self, key: &str) -> &str {
        self.raw(key)
    }

    /// Comma-separated list value; empty string → empty list.
    pub fn list(&self, key: &str) -> Vec<String> {
        let raw = self.raw(key).trim();
        if raw.is_empty() {
            return Vec::new();
        }
        raw.split(',').map(|s| s.trim().to_string()).collect()
    }
}

fn check_value(key: &str, kind: Kind, value: &str) -> Result<()> {
    let ok = match kind {
        Kind::F64 => value.parse::<f64>().map(|v| v.is_finite()).unwrap_or(false),
        Kind::U64 => value.parse::<u64>().is_ok(),
        Kind::Usize => value.parse::<usize>().is_ok(),
        Kind::Bool => value.parse::<bool>().is_ok(),
        Kind::Str => true,
    };
    if ok {
        Ok(())
    } else {
        bail!("config key `{key}`: cannot parse `{value}` as {kind:?}")
    }
}
