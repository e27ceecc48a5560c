//! Experiment configuration: the on-disk schema, dotted-path overrides,
//! and the canned model recipes.
//!
//! Config files are TOML first, JSON accepted. Both parse into one
//! `toml::Value` tree, command-line overrides land on that tree, and the
//! typed [`ExperimentConfig`] is read off at the end, so every knob goes
//! through a single validation path. Unknown keys are a hard error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qcd::asymptotics::{rstar, MgfProfile};
use qcd::model::{ChangeTimeLaw, ObservationLaw, QcdModel, CAUCHY_MATCH_GAMMA};
use qcd::qlearn::{TrainConfig, ZapConfig};
use qcd::rng::child_seed;
use qcd::sis::{DriftFn, DriftKind, SisComponent, SisSpec, StatKind};
use qcd::{Error, Result};

/// Stream tags hung off the master seed, one per consumer, so commands
/// never share randomness by accident. Sweeps and policy evaluation
/// deliberately share [`streams::EVAL`]: common paths make their cost
/// comparisons paired.
pub mod streams {
    pub const TRAIN: u64 = 1;
    pub const BASIS: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const FLOW: u64 = 5;
}

fn default_output_dir() -> PathBuf {
    std::env::var_os("QCD_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// Master experiment description, the single source every command reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. Every random stream in a run derives from it.
    pub seed: u64,
    /// Where artifacts land. Defaults to `$QCD_OUT_DIR`, then the working
    /// directory. Excluded from the config hash, so moving output never
    /// changes a run's identity.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: QcdModel,
    pub sis: SisConfig,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub eval: EvalBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SisConfig {
    pub components: Vec<ComponentConfig>,
}

/// One statistic component as written in a config file; the drift shift
/// may still be symbolic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub stat: StatKind,
    pub drift: DriftKind,
    pub shift: ShiftSpec,
}

/// A drift shift: either a literal value or the keyword `"rstar"`, which
/// solves for the cost-optimal shift from the model at resolve time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShiftSpec {
    Value(f64),
    Keyword(ShiftKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKeyword {
    RStar,
}

/// Radial-basis settings: cluster count, width, and how many explored
/// statistic samples the k-means fit sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub k: usize,
    pub b: f64,
    pub fit_samples: u64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { k: 20, b: 0.4, fit_samples: 10_000 }
    }
}

/// Trainer settings as configured. The stage-cost weight comes from
/// `model.kappa` and the trainer seed from the master seed, so neither
/// appears here; [`ExperimentConfig::resolve`] injects both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBlock {
    pub n_regens: u64,
    pub alpha0: f64,
    pub rho: f64,
    pub gamma: f64,
    pub eta: f64,
    pub explore_p: f64,
    pub reset_bound: f64,
    pub zap: ZapConfig,
    pub averaging: bool,
}

impl Default for TrainBlock {
    fn default() -> Self {
        TrainBlock {
            n_regens: 200_000,
            alpha0: 1.0,
            rho: 1.0,
            gamma: 1.0,
            eta: 30.0,
            explore_p: 0.5,
            reset_bound: 5e3,
            zap: ZapConfig::default(),
            averaging: true,
        }
    }
}

/// Monte-Carlo evaluation settings shared by sweeps, policy evaluation,
/// the posterior benchmark, batch-means, and region scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    pub n_paths: u64,
    /// Upper end of the threshold grids, `[0, h_max]` per component.
    pub h_max: f64,
    pub grid_points: usize,
    pub batch_runs: u32,
    /// Points per axis in decision-region scans.
    pub region_points: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock {
            n_paths: 2_000_000,
            h_max: 20.0,
            grid_points: 1000,
            batch_runs: 400,
            region_points: 201,
        }
    }
}

impl BasisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("basis needs k >= 2 clusters, got {}", self.k)));
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(Error::InvalidConfig(format!("basis width b must be positive, got {}", self.b)));
        }
        if self.fit_samples < self.k as u64 {
            return Err(Error::InvalidConfig(format!(
                "fitting {} clusters needs at least as many samples, got {}",
                self.k, self.fit_samples
            )));
        }
        Ok(())
    }
}

impl EvalBlock {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(Error::InvalidConfig(format!("evaluation needs at least 2 paths, got {}", self.n_paths)));
        }
        if !(self.h_max > 0.0 && self.h_max.is_finite()) {
            return Err(Error::InvalidConfig(format!("h_max must be positive, got {}", self.h_max)));
        }
        if self.grid_points == 0 {
            return Err(Error::InvalidConfig("grid_points must be positive".into()));
        }
        if self.batch_runs < 2 {
            return Err(Error::InvalidConfig(format!("batch_runs must be at least 2, got {}", self.batch_runs)));
        }
        if self.region_points < 2 {
            return Err(Error::InvalidConfig(format!("region_points must be at least 2, got {}", self.region_points)));
        }
        Ok(())
    }
}

/// Everything a command needs, derived from one config. `config` echoes
/// the input with every `rstar` shift replaced by its solved value; that
/// echo is what artifacts embed and hash.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub model: QcdModel,
    pub spec: SisSpec,
    pub train: TrainConfig,
}

/// The per-step change hazard the shift optimization conditions on; the
/// slow component drives the tail for mixtures.
pub fn hazard_rate(change: &ChangeTimeLaw) -> f64 {
    match change {
        ChangeTimeLaw::Geometric { p } => *p,
        ChangeTimeLaw::Mixture { p_slow, .. } => *p_slow,
    }
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        let model = QcdModel::new(
            self.model.pre.clone(),
            self.model.post.clone(),
            self.model.change.clone(),
            self.model.kappa,
        )?;
        self.basis.validate()?;
        self.eval.validate()?;

        let mut config = self.clone();
        let mut components = Vec::with_capacity(self.sis.components.len());
        for (i, c) in self.sis.components.iter().enumerate() {
            let shift = match c.shift {
                ShiftSpec::Value(v) => v,
                ShiftSpec::Keyword(ShiftKeyword::RStar) => {
                    let unshifted = DriftFn { kind: c.drift.clone(), shift: 0.0 };
                    let profile = MgfProfile::new(
                        unshifted,
                        model.pre.clone(),
                        model.post.clone(),
                        hazard_rate(&model.change),
                    )?;
                    rstar(&profile)?
                }
            };
            config.sis.components[i].shift = ShiftSpec::Value(shift);
            components.push(SisComponent {
                stat: c.stat,
                drift: DriftFn { kind: c.drift.clone(), shift },
            });
        }
        let spec = SisSpec::new(components)?;

        let train = TrainConfig {
            n_regens: self.train.n_regens,
            alpha0: self.train.alpha0,
            rho: self.train.rho,
            gamma: self.train.gamma,
            kappa: model.kappa,
            eta: self.train.eta,
            explore_p: self.train.explore_p,
            reset_bound: self.train.reset_bound,
            zap: self.train.zap,
            averaging: self.train.averaging,
            seed: child_seed(self.seed, streams::TRAIN),
        };
        train.validate()?;

        Ok(ResolvedExperiment { config, model, spec, train })
    }
}

// ---------------------------------------------------------------------------
// Recipes
// ---------------------------------------------------------------------------

pub const RECIPE_NAMES: [&str; 8] = [
    "model1a", "model1b", "model1c", "model2a", "model2b", "model2c", "model3a", "model3b",
];

/// A canned experiment: three observation families on an i.i.d. mean
/// shift, the same three on an autoregressive coefficient change, and
/// two two-component variants. Shifts carry the values the asymptotic
/// analysis produces for each family, rounded as published alongside the
/// reference runs; the mismatched component of `model3b` solves its
/// shift at resolve time.
pub fn recipe(name: &str) -> Result<ExperimentConfig> {
    let gaussian = |mu: f64| ObservationLaw::Gaussian { mu, sigma: 1.0 };
    let laplace = |mu: f64| ObservationLaw::Laplace { mu, b: 0.5f64.sqrt() };
    let cauchy = |x0: f64| ObservationLaw::Cauchy { x0, gamma: CAUCHY_MATCH_GAMMA };
    let geometric = ChangeTimeLaw::Geometric { p: 0.02 };

    let iid = |f0: ObservationLaw, f1: ObservationLaw| DriftKind::IidLlr { f0, f1 };
    let markov = |noise: ObservationLaw| DriftKind::MarkovLlr {
        a0: 0.8,
        a1: 0.5,
        noise0: noise.clone(),
        noise1: noise,
    };
    let comp = |drift: DriftKind, shift: f64| ComponentConfig {
        stat: StatKind::Cusum,
        drift,
        shift: ShiftSpec::Value(shift),
    };

    let mean_shift_model = QcdModel {
        pre: gaussian(0.0),
        post: gaussian(0.5),
        change: geometric.clone(),
        kappa: 27.0,
    };
    let ar_model = QcdModel {
        pre: ObservationLaw::Ar1 { a: 0.8, sigma_w: 1.0 },
        post: ObservationLaw::Ar1 { a: 0.5, sigma_w: 1.0 },
        change: geometric,
        kappa: 27.0,
    };

    let (model, components, k) = match name {
        "model1a" => (mean_shift_model, vec![comp(iid(gaussian(0.0), gaussian(0.5)), 0.02)], 20),
        "model1b" => (mean_shift_model, vec![comp(iid(laplace(0.0), laplace(0.5)), 0.031)], 20),
        "model1c" => (mean_shift_model, vec![comp(iid(cauchy(0.0), cauchy(0.5)), 0.036)], 20),
        "model2a" => (ar_model, vec![comp(markov(gaussian(0.0)), 0.02)], 20),
        "model2b" => (ar_model, vec![comp(markov(laplace(0.0)), 0.031)], 20),
        "model2c" => (ar_model, vec![comp(markov(cauchy(0.0)), 0.036)], 20),
        "model3a" => (
            mean_shift_model,
            vec![
                comp(iid(laplace(0.0), laplace(0.5)), 0.031),
                comp(iid(cauchy(0.0), cauchy(0.5)), 0.036),
            ],
            40,
        ),
        "model3b" => (
            mean_shift_model,
            vec![
                comp(iid(gaussian(0.0), gaussian(0.5)), 0.02),
                ComponentConfig {
                    stat: StatKind::Cusum,
                    drift: iid(
                        gaussian(0.0),
                        ObservationLaw::Gaussian { mu: 0.1, sigma: 1.4f64.sqrt() },
                    ),
                    shift: ShiftSpec::Keyword(ShiftKeyword::RStar),
                },
            ],
            40,
        ),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown recipe {other:?}; known recipes: {}",
                RECIPE_NAMES.join(" ")
            )))
        }
    };

    Ok(ExperimentConfig {
        seed: 1,
        output_dir: default_output_dir(),
        model,
        sis: SisConfig { components },
        basis: BasisConfig { k, ..BasisConfig::default() },
        train: TrainBlock::default(),
        eval: EvalBlock::default(),
    })
}

// ---------------------------------------------------------------------------
// Trees, overrides, and the typed finish
// ---------------------------------------------------------------------------

/// Parse a config file into a value tree. JSON when the extension says
/// so, TOML otherwise.
pub fn read_tree(path: &Path) -> Result<toml::Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|s| s.eq_ignore_ascii_case("json"));
    let mut tree: toml::Value = if is_json {
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
    };
    normalize_numbers(&mut tree);
    Ok(tree)
}

/// Serialize a config back into a tree, the starting point for applying
/// overrides to a recipe.
pub fn to_tree(config: &ExperimentConfig) -> Result<toml::Value> {
    toml::Value::try_from(config)
        .map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))
}

/// Exponent literals such as `2e4` arrive as floats; fold integral
/// floats back to integers so fields of either kind accept them.
fn normalize_numbers(value: &mut toml::Value) {
    const EXACT: f64 = (1u64 << 53) as f64;
    match value {
        toml::Value::Float(f)
            if f.is_finite() && f.fract() == 0.0 && f.abs() <= EXACT =>
        {
            *value = toml::Value::Integer(*f as i64);
        }
        toml::Value::Table(t) => t.iter_mut().for_each(|(_, v)| normalize_numbers(v)),
        toml::Value::Array(a) => a.iter_mut().for_each(normalize_numbers),
        _ => {}
    }
}

/// Apply one `a.b.c=value` override. Numeric path segments index
/// arrays, so `sis.components.0.shift` reaches the first component.
/// Values parse as TOML scalars, falling back to plain strings.
pub fn apply_override(tree: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("override path {path:?} has an empty segment")));
    }
    let leaf = parts.pop().expect("split yields at least one part");
    let mut node = tree;
    for part in parts {
        node = descend(node, part, path)?;
    }
    let table = node.as_table_mut().ok_or_else(|| {
        Error::InvalidConfig(format!("override {path:?}: parent of {leaf:?} is not a table"))
    })?;
    let mut value = parse_scalar(raw);
    normalize_numbers(&mut value);
    table.insert(leaf.to_string(), value);
    Ok(())
}

fn descend<'a>(node: &'a mut toml::Value, part: &str, path: &str) -> Result<&'a mut toml::Value> {
    if let Ok(index) = part.parse::<usize>() {
        let array = node.as_array_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("override {path:?}: segment {part:?} indexes a non-array"))
        })?;
        array.get_mut(index).ok_or_else(|| {
            Error::InvalidConfig(format!("override {path:?}: index {index} is out of range"))
        })
    } else {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("override {path:?}: segment {part:?} indexes a non-table"))
        })?;
        Ok(table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default())))
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Value>(&format!("v = {raw}")) {
        Ok(toml::Value::Table(mut t)) => {
            t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string()))
        }
        _ => toml::Value::String(raw.to_string()),
    }
}

/// Turn a tree into a validated config. Unknown keys anywhere in the
/// tree are collected and reported together.
pub fn from_tree(tree: toml::Value) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = tree
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
    let echo = to_tree(&config)?;
    let mut unknown = Vec::new();
    collect_unknown(&tree, &echo, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "unknown configuration keys: {}",
            unknown.join(", ")
        )));
    }
    Ok(config)
}

/// Keys present in the input but absent from the round-tripped config
/// were silently dropped during deserialization; flag them. This covers
/// the spots `deny_unknown_fields` cannot reach, such as internally
/// tagged enum contents.
fn collect_unknown(input: &toml::Value, echo: &toml::Value, path: &str, out: &mut Vec<String>) {
    match (input, echo) {
        (toml::Value::Table(a), toml::Value::Table(b)) => {
            for (key, value) in a {
                let child = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                match b.get(key) {
                    Some(w) => collect_unknown(value, w, &child, out),
                    None => out.push(child),
                }
            }
        }
        (toml::Value::Array(a), toml::Value::Array(b)) => {
            for (i, value) in a.iter().enumerate() {
                if let Some(w) = b.get(i) {
                    collect_unknown(value, w, &format!("{path}.{i}"), out);
                }
            }
        }
        _ => {}
    }
}
