//! Run configuration: a strict, versioned JSON document.

use std::path::{Path, PathBuf};

use ethfilter::evolution::GridStrategy;
use ethfilter::filters::Regime;
use ethfilter::model::{build_chain, ChainSpec, ObservableSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable naming the cache root.
pub const CACHE_ENV: &str = "ETHFILTER_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub chain: ChainConfig,
    #[serde(default)]
    pub observable: Option<ObservableSpec>,
    #[serde(default)]
    pub filters: FilterSettings,
    #[serde(default)]
    pub engine: EngineSettings,
    #[serde(default)]
    pub grids: GridSettings,
    #[serde(default)]
    pub compare: CompareSettings,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub io: IoSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub n: usize,
    #[serde(default = "one")]
    pub j: f64,
    #[serde(default)]
    pub j2: f64,
    pub g: f64,
    #[serde(default)]
    pub r: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSettings {
    /// `σ = q √N` unless `sigma` is given.
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub x: Option<f64>,
    #[serde(default)]
    pub sigma_omega: Option<f64>,
    #[serde(default)]
    pub x_omega: Option<f64>,
    /// Overrides the estimated rescaling factor.
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings { q: default_q(), sigma: None, x: None, sigma_omega: None, x_omega: None, alpha: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSettings {
    #[serde(default = "default_bond")]
    pub bond: usize,
    #[serde(default)]
    pub shadow_ratio: Option<f64>,
    #[serde(default = "default_shadow_tol")]
    pub shadow_tol: f64,
    #[serde(default = "default_trotter_dt")]
    pub trotter_dt: f64,
    #[serde(default = "default_stop")]
    pub stop_threshold: f64,
    /// Hard cap on `t_m` for the trace series.
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    /// Cap on `t_n`; `None` picks 10 (clean) or 20 (disordered).
    #[serde(default)]
    pub tn_cap: Option<f64>,
    /// Disables the `t_n` cap entirely.
    #[serde(default)]
    pub uncapped: bool,
    #[serde(default = "default_trunc_cap")]
    pub trunc_cap: f64,
    #[serde(default = "default_dmrg_bond")]
    pub dmrg_bond: usize,
    #[serde(default = "default_strategy")]
    pub strategy: GridStrategy,
    /// Compute only these correlation rows.
    #[serde(default)]
    pub rows: Option<Vec<usize>>,
}

impl Default for EngineSettings {
    fn default() -> Self {
        EngineSettings {
            bond: default_bond(),
            shadow_ratio: None,
            shadow_tol: default_shadow_tol(),
            trotter_dt: default_trotter_dt(),
            stop_threshold: default_stop(),
            t_max: default_t_max(),
            tn_cap: None,
            uncapped: false,
            trunc_cap: default_trunc_cap(),
            dmrg_bond: default_dmrg_bond(),
            strategy: default_strategy(),
            rows: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl RangeSpec {
    pub fn points(&self) -> Result<Vec<f64>, CliError> {
        if !(self.step > 0.0) {
            return Err(CliError::Config(format!("grid step must be positive, got {}", self.step)));
        }
        if self.max < self.min {
            return Ok(vec![]);
        }
        let k = ((self.max - self.min) / self.step + 1e-9).floor() as i64;
        Ok((0..=k).map(|j| self.min + j as f64 * self.step).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSettings {
    /// Energy grid in units of `N`; default `[-0.8, 0.8]` step `0.025`.
    #[serde(default)]
    pub e_over_n: Option<RangeSpec>,
    /// Default `[-8, 8]` step `σ_ω/2`.
    #[serde(default)]
    pub omega: Option<RangeSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSettings {
    #[serde(default = "default_compare_e")]
    pub e_over_n: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Points with `S'` below this fraction of its maximum are not compared.
    #[serde(default = "default_rel_cut")]
    pub rel_cut: f64,
    #[serde(default = "default_omega_span")]
    pub omega_span: f64,
    #[serde(default = "default_symmetry_tol")]
    pub symmetry_tolerance: f64,
}

impl Default for CompareSettings {
    fn default() -> Self {
        CompareSettings {
            e_over_n: default_compare_e(),
            tolerance: default_tolerance(),
            rel_cut: default_rel_cut(),
            omega_span: default_omega_span(),
            symmetry_tolerance: default_symmetry_tol(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Bounds,
    Evolve,
    Assemble,
    Oracle,
    Compare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSettings {
    /// Exact cache directory; otherwise a keyed subdirectory of the cache root.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl Default for IoSettings {
    fn default() -> Self {
        IoSettings { cache_dir: None, output_dir: default_output() }
    }
}

fn one() -> f64 {
    1.0
}
fn default_q() -> f64 {
    0.2
}
fn default_bond() -> usize {
    128
}
fn default_shadow_tol() -> f64 {
    1e-2
}
fn default_trotter_dt() -> f64 {
    0.01
}
fn default_stop() -> f64 {
    1e-5
}
fn default_t_max() -> f64 {
    50.0
}
fn default_trunc_cap() -> f64 {
    ethfilter::evolution::DEFAULT_TRUNC_CAP
}
fn default_dmrg_bond() -> usize {
    32
}
fn default_strategy() -> GridStrategy {
    GridStrategy::Auto
}
fn default_compare_e() -> f64 {
    0.5
}
fn default_tolerance() -> f64 {
    0.02
}
fn default_rel_cut() -> f64 {
    1e-3
}
fn default_omega_span() -> f64 {
    5.0
}
fn default_symmetry_tol() -> f64 {
    1e-6
}
fn default_stages() -> Vec<Stage> {
    vec![Stage::Bounds, Stage::Evolve, Stage::Assemble]
}
fn default_output() -> PathBuf {
    PathBuf::from("ethfilter-out")
}

/// Parameters after regime defaults are applied.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub spec: ChainSpec,
    pub obs: ObservableSpec,
    pub regime: Regime,
    pub sigma: f64,
    pub x: f64,
    pub sigma_omega: f64,
    pub x_omega: f64,
    pub tn_cap: Option<f64>,
    /// Late-time floor of `2^{-N}|Tr O(t)O|` assumed by the error budget.
    pub corr_floor: f64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.check_version()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Load with `key.path=value` overrides applied to the raw document first.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?
            }
            None => serde_json::json!({ "version": CONFIG_VERSION }),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.check_version()?;
        Ok(cfg)
    }

    fn check_version(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config version {} unsupported, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let c = &self.chain;
        let spec = build_chain(c.n, c.j, c.j2, c.g, c.r, c.seed).map_err(|e| CliError::Config(e.to_string()))?;
        let obs = self.observable.unwrap_or_else(|| ObservableSpec::central_z(c.n));
        if obs.site < 1 || obs.site > c.n {
            return Err(CliError::Config(format!("observable site {} outside [1, {}]", obs.site, c.n)));
        }
        let regime = if c.r > 0.0 { Regime::Disordered } else { Regime::Clean };
        let clean = regime == Regime::Clean;
        let f = &self.filters;
        let sigma = f.sigma.unwrap_or(f.q * (c.n as f64).sqrt());
        let e = &self.engine;
        let tn_cap = if e.uncapped { None } else { Some(e.tn_cap.unwrap_or(if clean { 10.0 } else { 20.0 })) };
        for (name, v) in [("trotter_dt", e.trotter_dt), ("stop_threshold", e.stop_threshold), ("t_max", e.t_max)] {
            if !(v > 0.0) {
                return Err(CliError::Config(format!("engine.{name} must be positive")));
            }
        }
        if e.bond == 0 {
            return Err(CliError::Config("engine.bond must be at least 1".into()));
        }
        Ok(Resolved {
            spec,
            obs,
            regime,
            sigma,
            x: f.x.unwrap_or(if clean { 2.0 } else { 3.0 }),
            sigma_omega: f.sigma_omega.unwrap_or(if clean { 0.1 } else { 0.3 }),
            x_omega: f.x_omega.unwrap_or(if clean { 2.0 } else { 3.0 }),
            tn_cap,
            corr_floor: if clean { 1e-6 } else { 1e-1 },
        })
    }

    pub fn e_grid(&self) -> Result<Vec<f64>, CliError> {
        let n = self.chain.n as f64;
        let r = self.grids.e_over_n.clone().unwrap_or(RangeSpec { min: -0.8, max: 0.8, step: 0.025 });
        Ok(r.points()?.into_iter().map(|x| x * n).collect())
    }

    pub fn omega_grid(&self, sigma_omega: f64) -> Result<Vec<f64>, CliError> {
        match &self.grids.omega {
            Some(r) => r.points(),
            None => Ok(ethfilter::spectral::default_omega_grid(sigma_omega)),
        }
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| CliError::Config(format!("override `{spec}` lacks `=`")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        if k.is_empty() {
            return Err(CliError::Config(format!("empty key in override `{spec}`")));
        }
        let obj =
            cur.as_object_mut().ok_or_else(|| CliError::Config(format!("`{path}` does not name an object field")))?;
        if i + 1 == keys.len() {
            obj.insert((*k).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*k).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
