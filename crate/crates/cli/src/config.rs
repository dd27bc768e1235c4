//! Run configuration: a nested TOML document with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use renewal_core::optimizer::MultiperiodConfig;
use renewal_core::portfolio::{CsvSchema, SynthConfig};
use renewal_core::propensity::PsConfig;
use renewal_core::response::{penalty_grid, BoostedDrConfig, BootstrapConfig, LassoConfig};

use crate::tune::TuneConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentKind {
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Portfolio CSV to analyse; the simulated one in `out_dir` when unset.
    pub input: Option<PathBuf>,
    pub schema: CsvSchema,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: PathBuf::from("out"),
            input: None,
            schema: CsvSchema::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub intervals: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { intervals: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeConfig {
    pub intervals: Vec<usize>,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        ConvergeConfig {
            intervals: vec![5, 10, 20, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingConfig {
    pub donors: usize,
    pub imputations: usize,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig {
            donors: 10,
            imputations: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseModelKind {
    Quadratic,
    Boosted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResponseConfig {
    pub lasso: LassoConfig,
    pub boosted: BoostedDrConfig,
    pub bootstrap: BootstrapConfig,
    /// Competitiveness values of the churn surface.
    pub surface_competitiveness: Vec<f64>,
    /// Number of equally spaced doses on the dose-response curve.
    pub curve_points: usize,
    /// Dose-response model used by the optimizer on the continuous arm.
    pub optimizer_model: DoseModelKind,
}

impl Default for ResponseConfig {
    fn default() -> Self {
        ResponseConfig {
            lasso: LassoConfig::default(),
            boosted: BoostedDrConfig::default(),
            bootstrap: BootstrapConfig {
                resamples: 20,
                ..BootstrapConfig::default()
            },
            surface_competitiveness: (0..=12).map(|k| -0.3 + 0.05 * k as f64).collect(),
            curve_points: 41,
            optimizer_model: DoseModelKind::Boosted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    CompetitorsFixed,
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiperiodSection {
    pub tau: usize,
    /// Yearly churn caps; the observed plan's churn repeated when empty.
    pub caps: Vec<f64>,
    /// Action step on the continuous arm (coarser than the frontier's, since
    /// paths grow as `A^tau`).
    pub step: f64,
    pub feedback: Feedback,
    pub solver: MultiperiodConfig,
}

impl Default for MultiperiodSection {
    fn default() -> Self {
        MultiperiodSection {
            tau: 2,
            caps: Vec::new(),
            step: 0.025,
            feedback: Feedback::CompetitorsFixed,
            solver: MultiperiodConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Action step on the continuous arm; 0.001 is 0.1 percentage points.
    pub step: f64,
    /// Ascending churn caps of the frontier.
    pub alphas: Vec<f64>,
    pub multiperiod: MultiperiodSection,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step: 0.001,
            alphas: (1..=20).map(|k| 0.02 * k as f64).collect(),
            multiperiod: MultiperiodSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Append the convergence study and both tuning drivers.
    pub studies: bool,
}

#[allow(clippy::derivable_impls)]
impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { studies: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub kind: TreatmentKind,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub grid: GridConfig,
    pub ps: PsConfig,
    pub converge: ConvergeConfig,
    pub matching: MatchingConfig,
    pub response: ResponseConfig,
    pub optimizer: OptimizerConfig,
    pub tune: TuneConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut ps = PsConfig::default();
        ps.boost.eta = 0.1;
        ps.boost.max_depth = 2;
        ps.boost.max_rounds = 600;
        ps.boost.early_stop_patience = 30;
        RunConfig {
            seed: 7,
            kind: TreatmentKind::Discrete,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            grid: GridConfig::default(),
            ps,
            converge: ConvergeConfig::default(),
            matching: MatchingConfig::default(),
            response: ResponseConfig::default(),
            optimizer: OptimizerConfig::default(),
            tune: TuneConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    /// Loads a TOML file, or the `config` object of a JSON manifest, then
    /// applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let mut table = match path {
            None => Table::new(),
            Some(p) => read_table(p)?,
        };
        for (key, value) in overrides {
            set_path(&mut table, key, value.clone())?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Validation(m.to_string()));
        if self.grid.intervals < 2 {
            return bad("grid.intervals must be at least 2");
        }
        if self.converge.intervals.is_empty() || self.converge.intervals.iter().any(|&c| c < 2) {
            return bad("converge.intervals must be non-empty with every count at least 2");
        }
        if self.matching.donors == 0 || self.matching.imputations == 0 {
            return bad("matching.donors and matching.imputations must be positive");
        }
        if self.optimizer.alphas.is_empty() || self.optimizer.alphas.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("optimizer.alphas must be non-empty and strictly ascending");
        }
        if !(self.optimizer.step > 0.0) || !(self.optimizer.multiperiod.step > 0.0) {
            return bad("optimizer steps must be positive");
        }
        let mp = &self.optimizer.multiperiod;
        if mp.tau == 0 {
            return bad("optimizer.multiperiod.tau must be at least 1");
        }
        if !mp.caps.is_empty() && mp.caps.len() != mp.tau {
            return bad("optimizer.multiperiod.caps must hold one cap per year");
        }
        if self.response.curve_points < 2 {
            return bad("response.curve_points must be at least 2");
        }
        self.ps
            .boost
            .validate()
            .map_err(|e| CliError::Validation(format!("ps.boost: {e}")))?;
        self.tune.validate()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let doc: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut config = doc.get("config").cloned().unwrap_or(doc);
        strip_nulls(&mut config);
        return toml::Table::try_from(config)
            .map_err(|e| CliError::Validation(format!("{}: not a config object: {e}", path.display())));
    }
    text.parse::<Table>()
        .map_err(|e| CliError::Validation(format!("{}: {}", path.display(), e.message())))
}

/// TOML has no null; unset optional fields are simply absent.
fn strip_nulls(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.retain(|_, x| !x.is_null());
            m.values_mut().for_each(strip_nulls);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back to
/// a bare string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn parse_override(arg: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{arg}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Validation(format!("malformed override key `{key}`")));
    }
    Ok((key.to_string(), parse_value(raw.trim())))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Overrides selecting the published search grids and training budgets.
pub fn published_grid_overrides() -> Vec<(String, Value)> {
    let floats = |v: Vec<f64>| Value::Array(v.into_iter().map(Value::Float).collect());
    let ints = |v: &[i64]| Value::Array(v.iter().map(|&x| Value::Integer(x)).collect());
    let tenths: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
    let penalties = [0.0, 0.1, 1.0, 10.0, 100.0];
    vec![
        ("ps.boost.max_rounds".into(), Value::Integer(10_000)),
        ("ps.boost.early_stop_patience".into(), Value::Integer(250)),
        ("response.boosted.boost.max_rounds".into(), Value::Integer(10_000)),
        ("response.boosted.boost.early_stop_patience".into(), Value::Integer(250)),
        ("response.lasso.penalties".into(), floats(penalty_grid(0.01))),
        ("response.lasso.folds".into(), Value::Integer(10)),
        (
            "tune.grid.eta".into(),
            floats(vec![0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 0.15, 0.2, 0.25, 0.5]),
        ),
        ("tune.grid.max_depth".into(), ints(&[0, 1, 2, 4, 6, 8, 10, 25, 50])),
        (
            "tune.grid.min_child_weight".into(),
            ints(&[0, 1, 2, 3, 4, 5, 10, 25, 50]),
        ),
        ("tune.grid.subsample".into(), floats(tenths.clone())),
        ("tune.grid.colsample".into(), floats(tenths)),
        ("tune.grid.gamma".into(), floats(penalties.to_vec())),
        ("tune.grid.lambda".into(), floats(penalties.to_vec())),
        ("tune.grid.alpha".into(), floats(penalties.to_vec())),
        ("tune.folds".into(), Value::Integer(10)),
    ]
}
