use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use gxz::percolation::Family;
use gxz::renorm::{Coupling, Mode};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum FamilyArg {
    #[value(name = "A")]
    A,
    #[value(name = "B")]
    B,
    #[value(name = "S")]
    S,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Family {
        match f {
            FamilyArg::A => Family::A,
            FamilyArg::B => Family::B,
            FamilyArg::S => Family::S,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Strict,
    Relaxed,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Strict => Mode::Strict,
            ModeArg::Relaxed => Mode::Relaxed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingArg {
    Shared,
    Independent,
}

impl From<CouplingArg> for Coupling {
    fn from(c: CouplingArg) -> Coupling {
        match c {
            CouplingArg::Shared => Coupling::Shared,
            CouplingArg::Independent => Coupling::Independent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricArg {
    Anisotropic,
    SupNorm,
}

/// Job parameters. Every field can come from the config file or a flag; flags win.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct JobConfig {
    /// TOML or JSON job file.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// `z-lattice:d=D[,r=R][xz:Z]`, `gasket:level=K[xz:Z]` or `point[xz:Z]`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long, value_enum, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricArg>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,
    /// Level grid: `a:b:n` (n evenly spaced values) or a comma list.
    #[arg(long, global = true, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_max: Option<f64>,
    /// Scales `L`, comma separated.
    #[arg(long = "L", global = true, value_delimiter = ',')]
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub ls: Option<Vec<u32>>,
    /// Probabilities for `stretch-fit`, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    #[arg(long, value_enum, global = true, ignore_case = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilyArg>,

    /// Site as base coordinates followed by height, e.g. `0,0,0`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<String>,
    /// `ball:r=R`, `point` or `pair:d=D`, centred at `--x`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub set: Option<String>,
    /// Killing radii, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncation_radius: Option<f64>,
    /// Truncation radius `factor * reach * L + 1` for event estimates.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trunc_factor: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_estimate: Option<bool>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ell: Option<u64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ell0: Option<u64>,
    #[arg(long = "L0", global = true)]
    #[serde(rename = "L0", skip_serializing_if = "Option::is_none")]
    pub l0: Option<u64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<u32>,
    #[arg(long, value_enum, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coupling: Option<CouplingArg>,
    /// Schedule constants for `renorm schedule` / `decouple`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu_prime: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,

    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_distance: Option<u32>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,

    /// Output directory.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "GXZ_WORKERS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl JobConfig {
    /// File values (if `--config` is given) overridden by flags.
    pub fn resolve(flags: &JobConfig) -> Result<JobConfig, Failure> {
        let mut cfg = match &flags.config {
            Some(p) => load(p)?,
            None => JobConfig::default(),
        };
        overlay!(cfg, flags; model, alpha, beta, metric, seed, trials, u, u_max, ls, p, family, x, y, set, radii,
            truncation_radius, trunc_factor, bias_estimate, ell, ell0, l0, depth, mode, coupling, k, nu_prime, c1,
            max_distance, theta, out, workers);
        cfg.config = flags.config.clone();
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64, Failure> {
        self.seed.ok_or_else(|| Failure::usage("--seed is required for sampling commands"))
    }

    pub fn trials(&self, default: u64) -> Result<u64, Failure> {
        match self.trials {
            Some(0) => Err(Failure::usage("--trials must be positive")),
            Some(t) => Ok(t),
            None => Ok(default),
        }
    }

    pub fn family(&self) -> Result<Family, Failure> {
        self.family.map(Family::from).ok_or_else(|| Failure::usage("--family is required"))
    }

    pub fn mode(&self) -> Mode {
        self.mode.map(Mode::from).unwrap_or(Mode::Relaxed)
    }

    pub fn ls(&self) -> Result<Vec<u32>, Failure> {
        let ls = self.ls.clone().ok_or_else(|| Failure::usage("--L is required"))?;
        if ls.is_empty() || ls.contains(&0) {
            return Err(Failure::usage("--L values must be positive"));
        }
        Ok(ls)
    }

    pub fn us(&self) -> Result<Vec<f64>, Failure> {
        parse_grid(self.u.as_deref().ok_or_else(|| Failure::usage("--u is required"))?)
    }

    /// First value of `--u`, for commands working at a single level.
    pub fn u_single(&self) -> Result<f64, Failure> {
        let us = self.us()?;
        if us.len() != 1 {
            return Err(Failure::usage("this command takes a single level --u"));
        }
        Ok(us[0])
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("gxz-out"))
    }
}

fn load(path: &Path) -> Result<JobConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let parsed = if is_json {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
}

/// `a:b:n` gives `n` evenly spaced values from `a` to `b`; otherwise a comma list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, Failure> {
    let bad = || Failure::usage(format!("bad level grid '{s}' (expected a:b:n or a comma list)"));
    let vals: Vec<f64> = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
        match n {
            0 => return Err(bad()),
            1 => vec![a],
            _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
        }
    } else {
        s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if vals.iter().any(|u| !(*u >= 0.0) || !u.is_finite()) {
        return Err(Failure::usage(format!("levels must be finite and >= 0 (got '{s}')")));
    }
    if vals.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Failure::usage(format!("levels must increase (got '{s}')")));
    }
    Ok(vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(parse_grid("0.5:8:6").unwrap(), vec![0.5, 2.0, 3.5, 5.0, 6.5, 8.0]);
        assert_eq!(parse_grid("1,2.5").unwrap(), vec![1.0, 2.5]);
        assert_eq!(parse_grid("3:3:1").unwrap(), vec![3.0]);
        for bad in ["1:2", "a:b:3", "2,1", "-1", "1:2:0"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn strict_schema() {
        let ok: JobConfig = toml::from_str("model = \"z-lattice:d=2\"\nseed = 3\nL = [2, 4]\nfamily = \"A\"").unwrap();
        assert_eq!(ok.ls, Some(vec![2, 4]));
        assert_eq!(ok.family, Some(FamilyArg::A));
        assert!(toml::from_str::<JobConfig>("sed = 3").is_err());
        assert!(serde_json::from_str::<JobConfig>(r#"{"seed": 1, "bogus": true}"#).is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("job.toml");
        std::fs::write(&p, "seed = 3\ntrials = 10\n").unwrap();
        let flags = JobConfig { config: Some(p), trials: Some(99), ..Default::default() };
        let cfg = JobConfig::resolve(&flags).unwrap();
        assert_eq!((cfg.seed, cfg.trials), (Some(3), Some(99)));
    }
}
