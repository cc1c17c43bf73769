//! Flat `key = value` configuration with dotted section prefixes. Blank
//! lines and lines starting with `#` are ignored; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use spatfactor::covspatial::{default_bounds, default_psi_bounds, SpatialKind, SpatialSpec};
use spatfactor::covtemporal::{TemporalKind, TemporalSpec};
use spatfactor::data::Dataset;
use spatfactor::gibbs::{ModelSpec, PriorSet, Schedule, Variant};
use spatfactor::nngp::DEFAULT_H;

use crate::CliError;

pub const FIT_KEYS: &[&str] = &[
    "data.path",
    "data.sort",
    "model.variant",
    "model.k",
    "model.L",
    "model.h",
    "model.temporal",
    "model.period",
    "model.spatial",
    "model.alpha_block_max_attempts",
    "model.baseline_nngp",
    "priors.a",
    "priors.b",
    "priors.beta_mean",
    "priors.beta_var",
    "priors.zeta",
    "priors.omega",
    "priors.nu",
    "priors.theta",
    "priors.psi_lower",
    "priors.psi_upper",
    "priors.rho_lower",
    "priors.rho_upper",
    "priors.psi_gamma",
    "priors.psi_beta",
    "priors.a1",
    "priors.a2",
    "priors.shrinkage",
    "schedule.burnin",
    "schedule.post_burnin",
    "schedule.thin",
    "schedule.seed",
    "schedule.adapt_window",
    "schedule.chains",
];

pub const SIM_KEYS: &[&str] = &[
    "sim.design",
    "sim.side",
    "sim.O",
    "sim.T",
    "sim.k",
    "sim.temporal",
    "sim.psi",
    "sim.period",
    "sim.rho",
    "sim.sigma2",
    "sim.max_clusters",
    "sim.atoms",
    "sim.seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub entries: BTreeMap<String, String>,
    /// Directory relative paths are resolved against.
    pub base: PathBuf,
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl Config {
    pub fn parse(text: &str, allowed: &[&str], base: PathBuf) -> Result<Config, CliError> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !allowed.contains(&k) {
                return Err(cfg_err(format!("line {}: unknown key '{k}'", no + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(cfg_err(format!("line {}: duplicate key '{k}'", no + 1)));
            }
        }
        Ok(Config { entries, base })
    }

    pub fn load(path: &Path, allowed: &[&str]) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Config::parse(&text, allowed, base)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| cfg_err(format!("{key}: cannot parse '{v}'"))),
        }
    }

    pub fn flag(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(cfg_err(format!("{key}: expected true or false, got '{v}'"))),
        }
    }

    pub fn list(&self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|x| x.trim().parse().map_err(|_| cfg_err(format!("{key}: cannot parse '{x}'"))))
                    .collect()
            })
            .transpose()
    }

    /// Resolved data path.
    pub fn data_path(&self) -> Result<PathBuf, CliError> {
        let p = self.get("data.path").ok_or_else(|| cfg_err("data.path is required"))?;
        let p = PathBuf::from(p);
        Ok(if p.is_absolute() { p } else { self.base.join(p) })
    }

    /// Canonical text form, one sorted `key = value` per line.
    pub fn echo(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn scaled_identity(c: &Config, key: &str, dim: usize, default: f64) -> Result<DMatrix<f64>, CliError> {
    Ok(DMatrix::identity(dim, dim) * c.num(key, default)?)
}

/// Build the model spec for a dataset. Errors are configuration errors.
pub fn model_spec(c: &Config, data: &Dataset) -> Result<ModelSpec, CliError> {
    let variant_s = c.get("model.variant").unwrap_or("NNGPsequenFixedL");
    let variant = Variant::parse(variant_s).ok_or_else(|| cfg_err(format!("unknown variant '{variant_s}'")))?;
    let k: usize = c.num("model.k", 2)?;
    let m = data.m();
    let default_l = if variant.vary_l() { m.min(100) } else { m.min(60) };
    let l: usize = c.num("model.L", default_l)?;
    let h: usize = c.num("model.h", DEFAULT_H)?;
    let tk_s = c.get("model.temporal").unwrap_or("exponential");
    let tkind = TemporalKind::parse(tk_s).ok_or_else(|| cfg_err(format!("unknown temporal structure '{tk_s}'")))?;
    let period: usize = c.num("model.period", 1)?;
    let sk_s = c.get("model.spatial").unwrap_or("exponential");
    let skind = SpatialKind::parse(sk_s).ok_or_else(|| cfg_err(format!("unknown spatial structure '{sk_s}'")))?;

    let times = data.timepoints.clone();
    let equi = times.windows(2).all(|w| ((w[1] - w[0]) - 1.0).abs() <= 1e-9);
    let dpsi = default_psi_bounds(tkind.psi_is_rho(), &times);
    let psi_bounds = (c.num("priors.psi_lower", dpsi.0)?, c.num("priors.psi_upper", dpsi.1)?);
    let drho = default_bounds(&data.coords).map_err(|e| cfg_err(e.to_string()))?;
    let rho_bounds = (c.num("priors.rho_lower", drho.0)?, c.num("priors.rho_upper", drho.1)?);
    let mid = |b: (f64, f64)| 0.5 * (b.0 + b.1);
    let temporal =
        TemporalSpec::with_timepoints(tkind, mid(psi_bounds), period, times, equi).map_err(|e| cfg_err(e.to_string()))?;
    let spatial = SpatialSpec::new(skind, mid(rho_bounds), data.coords.clone(), Some(rho_bounds)).map_err(|e| cfg_err(e.to_string()))?;

    let p = data.p();
    let mut priors = PriorSet::defaults(k, data.o, p, psi_bounds, rho_bounds);
    priors.a = c.num("priors.a", priors.a)?;
    priors.b = c.num("priors.b", priors.b)?;
    if let Some(v) = c.list("priors.beta_mean")? {
        priors.beta_mean = match v.len() {
            1 => vec![v[0]; p],
            n if n == p => v,
            n => return Err(cfg_err(format!("priors.beta_mean has {n} entries, expected 1 or {p}"))),
        };
    }
    priors.beta_var = scaled_identity(c, "priors.beta_var", p, 100.0)?;
    priors.zeta = c.num("priors.zeta", priors.zeta)?;
    priors.omega = scaled_identity(c, "priors.omega", k, 1.0)?;
    priors.nu = c.num("priors.nu", priors.nu)?;
    priors.theta_scale = scaled_identity(c, "priors.theta", data.o, 1.0)?;
    priors.psi_gamma = c.num("priors.psi_gamma", priors.psi_gamma)?;
    priors.psi_beta = c.num("priors.psi_beta", priors.psi_beta)?;
    priors.a1 = c.num("priors.a1", priors.a1)?;
    priors.a2 = c.num("priors.a2", priors.a2)?;
    priors.use_shrinkage = c.flag("priors.shrinkage", true)?;

    let d = Schedule::default();
    let schedule = Schedule {
        burnin: c.num("schedule.burnin", d.burnin)?,
        post_burnin: c.num("schedule.post_burnin", d.post_burnin)?,
        thin: c.num("schedule.thin", d.thin)?,
        seed: c.num("schedule.seed", d.seed)?,
        adapt_window: c.num("schedule.adapt_window", d.adapt_window)?,
    };
    let spec = ModelSpec {
        variant,
        k,
        l,
        h,
        temporal,
        spatial,
        priors,
        schedule,
        alpha_block_max_attempts: c.num("model.alpha_block_max_attempts", 10_000)?,
        baseline_nngp: c.flag("model.baseline_nngp", false)?,
    };
    spec.validate(data).map_err(|e| cfg_err(e.to_string()))?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(Config::parse("model.k = 2\nmodel.kk = 3\n", FIT_KEYS, PathBuf::new()).is_err());
        assert!(Config::parse("model.k = 2\nmodel.k = 3\n", FIT_KEYS, PathBuf::new()).is_err());
        assert!(Config::parse("model.k 2\n", FIT_KEYS, PathBuf::new()).is_err());
        let c = Config::parse("# comment\n\n model.k = 2 \n", FIT_KEYS, PathBuf::new()).unwrap();
        assert_eq!(c.get("model.k"), Some("2"));
        assert_eq!(c.echo(), "model.k = 2\n");
    }

    #[test]
    fn typed_access() {
        let c = Config::parse("priors.shrinkage = no\npriors.beta_mean = 1, 2\nmodel.k = x\n", FIT_KEYS, PathBuf::from("/d")).unwrap();
        assert!(!c.flag("priors.shrinkage", true).unwrap());
        assert_eq!(c.list("priors.beta_mean").unwrap(), Some(vec![1.0, 2.0]));
        assert!(c.num::<usize>("model.k", 1).is_err());
        assert_eq!(c.num("model.h", 7usize).unwrap(), 7);
        assert!(c.data_path().is_err());
    }
}
