//! Experiment configuration: per-experiment defaults, a TOML file merged over
//! them, then `--set` overrides on single leaves.

use std::path::{Path, PathBuf};

use cdlab_core::extrapolation::{
    demeaned_population, price_ccs_population, GmmConfig, InstrumentBasis, MuBasis, RuleKind, TestFunctionSet, Transform,
};
use cdlab_core::micro::{LevelFamily, LevelFeature, MicroFamily, MicroSpec};
use cdlab_core::diagnostics::Fig1Spec;
use cdlab_core::population::SCHEMA_VERSION;
use cdlab_core::{Bundle, HFamily, InversionConfig, PopulationSpec, ShareMapConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Simulate,
    Invert,
    Predict,
    Fig1,
    Fig2,
    VerifyThm1,
    VerifyThm2,
    Extrapolate,
    Prop32,
    MicroIdentify,
    PriceCcs,
    Acceptance,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Invert => "invert",
            Experiment::Predict => "predict",
            Experiment::Fig1 => "fig1",
            Experiment::Fig2 => "fig2",
            Experiment::VerifyThm1 => "verify-thm1",
            Experiment::VerifyThm2 => "verify-thm2",
            Experiment::Extrapolate => "extrapolate",
            Experiment::Prop32 => "prop32",
            Experiment::MicroIdentify => "micro-identify",
            Experiment::PriceCcs => "price-ccs",
            Experiment::Acceptance => "acceptance",
        }
    }

    fn uses_population(self) -> bool {
        matches!(
            self,
            Experiment::Simulate
                | Experiment::Invert
                | Experiment::Predict
                | Experiment::VerifyThm1
                | Experiment::Extrapolate
                | Experiment::Prop32
                | Experiment::PriceCcs
        )
    }
}

/// Inverts observed shares; `demand` defaults to the population's first type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InvertSection {
    #[serde(default)]
    pub demand: Option<ShareMapConfig>,
    #[serde(default)]
    pub inversion: InversionConfig,
    /// A `markets.csv` as written by `simulate`; simulated when absent.
    #[serde(default)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    #[serde(default)]
    pub demand: Option<ShareMapConfig>,
    #[serde(default)]
    pub inversion: InversionConfig,
    #[serde(default)]
    pub input: Option<PathBuf>,
    pub targets: Vec<Bundle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fig2Section {
    pub micro: MicroSpec,
    /// Markets drawn in each panel, from the start of the sample.
    pub plotted_markets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thm1Section {
    /// Defaults to the inverse of the population's first type map.
    #[serde(default)]
    pub h: Option<HFamily>,
    /// Defaults to the population's median bundle.
    #[serde(default)]
    pub a0: Option<Bundle>,
    pub grid: Vec<Bundle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thm2Section {
    pub micro: MicroSpec,
    pub treatments: Vec<Bundle>,
    /// Defaults to the first market's treatment.
    #[serde(default)]
    pub a0: Option<Bundle>,
}

/// Shared by `extrapolate` and `prop32`. Empty cell lists and an empty
/// indicator basis are filled from the population's finite support; empty
/// `targets` means the support itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrapolateSection {
    pub family: RuleKind,
    pub tests: TestFunctionSet,
    pub gmm: GmmConfig,
    #[serde(default)]
    pub targets: Vec<Bundle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroIdentifySection {
    pub micro: MicroSpec,
    pub family: MicroFamily,
    pub level: LevelFamily,
    pub basis: InstrumentBasis,
    /// Treatments at which every market's profile is predicted.
    #[serde(default)]
    pub targets: Vec<Bundle>,
    /// Grid point of the instrument step; defaults to `w0`.
    #[serde(default)]
    pub w_index: Option<usize>,
    /// Points of the share grid on which `h_hat.csv` is tabulated.
    pub share_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceCcsSection {
    pub h: HFamily,
    #[serde(default)]
    pub a0: Option<Bundle>,
    pub price_grid: Vec<f64>,
    pub x1_shifts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptanceSection {
    /// Added to the seed of every simulated population.
    pub seed_offset: u64,
    /// Replications of the endogenous-treatment Monte Carlo.
    pub mc_reps: usize,
    /// A previous output directory whose CSVs must match byte for byte.
    #[serde(default)]
    pub baseline: Option<PathBuf>,
}

impl Default for AcceptanceSection {
    fn default() -> Self {
        Self { seed_offset: 0, mc_reps: 20, baseline: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: Experiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<PopulationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invert: Option<InvertSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict: Option<PredictSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fig1: Option<Fig1Spec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fig2: Option<Fig2Section>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_thm1: Option<Thm1Section>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_thm2: Option<Thm2Section>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extrapolate: Option<ExtrapolateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_identify: Option<MicroIdentifySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_ccs: Option<PriceCcsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<AcceptanceSection>,
}

/// A one-product bundle with an empty `x2` row, as the micro populations use.
pub fn micro_bundle(p: f64, x1: f64) -> Bundle {
    Bundle { x1: vec![x1], p: vec![p], x2: vec![Vec::new()] }
}

/// Ten bundles moving price and `x1` together, one value per product.
pub fn thm1_grid(j: usize) -> Vec<Bundle> {
    (0..10)
        .map(|k| Bundle {
            x1: vec![-0.5 + 0.1 * k as f64; j],
            p: vec![0.6 + 0.25 * k as f64; j],
            x2: Vec::new(),
        })
        .collect()
}

pub fn thm1_population() -> PopulationSpec {
    let mut spec = PopulationSpec::single_type_default();
    spec.market_count = 100;
    spec
}

fn sample_population_default() -> PopulationSpec {
    let mut spec = PopulationSpec::fig1_default();
    spec.market_count = 500;
    spec
}

pub fn thm2_micro() -> MicroSpec {
    let mut spec = MicroSpec::common_treatment_default();
    spec.population.market_count = 50;
    spec
}

pub fn thm2_treatments() -> Vec<Bundle> {
    (0..5).map(|k| micro_bundle(0.5 + 0.5 * k as f64, 0.25 * k as f64 - 0.5)).collect()
}

pub fn extrapolate_default() -> ExtrapolateSection {
    ExtrapolateSection {
        family: RuleKind::Demeaned { f: Transform::LogRatio, mu: MuBasis::CellIndicators { cells: Vec::new() } },
        tests: TestFunctionSet::MeanIndependence,
        gmm: GmmConfig { basis: InstrumentBasis::Indicators { values: Vec::new() }, ..GmmConfig::default() },
        targets: Vec::new(),
    }
}

pub fn micro_identify_default() -> MicroIdentifySection {
    MicroIdentifySection {
        micro: MicroSpec::randomized_default(),
        family: MicroFamily::mixed_logit_sd(),
        level: LevelFamily::Linear { features: vec![LevelFeature::Price, LevelFeature::X1] },
        basis: InstrumentBasis::Indicators { values: (0..8).map(f64::from).collect() },
        targets: vec![micro_bundle(1.25, 0.25)],
        w_index: None,
        share_points: 49,
    }
}

pub fn price_ccs_default() -> PriceCcsSection {
    PriceCcsSection {
        h: HFamily::logit_inverse(1.0),
        a0: None,
        price_grid: (0..10).map(|k| 0.5 + 0.25 * k as f64).collect(),
        x1_shifts: vec![-0.5, 0.5, 1.0],
    }
}

impl ExperimentConfig {
    /// The complete configuration `experiment` runs with when no file is given.
    pub fn defaults(experiment: Experiment) -> Self {
        let mut c = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            experiment,
            output_dir: None,
            population: None,
            invert: None,
            predict: None,
            fig1: None,
            fig2: None,
            verify_thm1: None,
            verify_thm2: None,
            extrapolate: None,
            micro_identify: None,
            price_ccs: None,
            acceptance: None,
        };
        match experiment {
            Experiment::Simulate => c.population = Some(sample_population_default()),
            Experiment::Invert => {
                c.population = Some(sample_population_default());
                c.invert = Some(InvertSection::default());
            }
            Experiment::Predict => {
                c.population = Some(sample_population_default());
                c.predict = Some(PredictSection {
                    demand: None,
                    inversion: InversionConfig::default(),
                    input: None,
                    targets: [1.0, 1.75, 2.5].iter().map(|p| Bundle::from_prices(vec![*p])).collect(),
                });
            }
            Experiment::Fig1 => c.fig1 = Some(Fig1Spec::default()),
            Experiment::Fig2 => {
                c.fig2 = Some(Fig2Section { micro: MicroSpec::common_treatment_default(), plotted_markets: 20 })
            }
            Experiment::VerifyThm1 => {
                c.population = Some(thm1_population());
                c.verify_thm1 = Some(Thm1Section { h: None, a0: None, grid: thm1_grid(1) });
            }
            Experiment::VerifyThm2 => {
                c.verify_thm2 = Some(Thm2Section { micro: thm2_micro(), treatments: thm2_treatments(), a0: None })
            }
            Experiment::Extrapolate | Experiment::Prop32 => {
                c.population = Some(demeaned_population());
                c.extrapolate = Some(extrapolate_default());
            }
            Experiment::MicroIdentify => c.micro_identify = Some(micro_identify_default()),
            Experiment::PriceCcs => {
                c.population = Some(price_ccs_population());
                c.price_ccs = Some(price_ccs_default());
            }
            Experiment::Acceptance => c.acceptance = Some(AcceptanceSection::default()),
        }
        c
    }

    /// Replaces the seed of every population this experiment simulates.
    pub fn override_seed(&mut self, seed: u64) {
        if self.experiment.uses_population() {
            if let Some(p) = &mut self.population {
                p.seed = seed;
            }
        }
        if let Some(f) = &mut self.fig1 {
            f.seed = seed;
        }
        for m in [
            self.fig2.as_mut().map(|s| &mut s.micro),
            self.verify_thm2.as_mut().map(|s| &mut s.micro),
            self.micro_identify.as_mut().map(|s| &mut s.micro),
        ]
        .into_iter()
        .flatten()
        {
            m.population.seed = seed;
        }
        if let Some(a) = &mut self.acceptance {
            a.seed_offset = seed;
        }
    }

    fn missing(&self, what: &str) -> CliError {
        CliError::Validation(format!("{} needs a [{what}] section", self.experiment.name()))
    }

    pub fn population(&self) -> CliResult<&PopulationSpec> {
        self.population.as_ref().ok_or_else(|| self.missing("population"))
    }
}

macro_rules! section_getter {
    ($name:ident, $field:ident, $ty:ty, $label:literal) => {
        impl ExperimentConfig {
            pub fn $name(&self) -> CliResult<&$ty> {
                self.$field.as_ref().ok_or_else(|| self.missing($label))
            }
        }
    };
}

section_getter!(invert_section, invert, InvertSection, "invert");
section_getter!(predict_section, predict, PredictSection, "predict");
section_getter!(fig1_section, fig1, Fig1Spec, "fig1");
section_getter!(fig2_section, fig2, Fig2Section, "fig2");
section_getter!(thm1_section, verify_thm1, Thm1Section, "verify_thm1");
section_getter!(thm2_section, verify_thm2, Thm2Section, "verify_thm2");
section_getter!(extrapolate_section, extrapolate, ExtrapolateSection, "extrapolate");
section_getter!(micro_section, micro_identify, MicroIdentifySection, "micro_identify");
section_getter!(price_ccs_section, price_ccs, PriceCcsSection, "price_ccs");
section_getter!(acceptance_section, acceptance, AcceptanceSection, "acceptance");

/// Tables merge key by key; any other value, and any table whose `kind` tag
/// differs, is replaced whole.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            let same_kind = match (b.get("kind"), o.get("kind")) {
                (Some(x), Some(y)) => x == y,
                _ => true,
            };
            if !same_kind {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `value` as a TOML literal when it parses as one, else as a string.
fn parse_leaf(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

fn apply_set(root: &mut toml::Value, assignment: &str) -> CliResult<()> {
    let (path, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("--set expects key=value, got {assignment:?}")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Validation(format!("bad --set key {path:?}")));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("--set {path}: {key} is not inside a table")))?;
        node = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CliError::Validation(format!("--set {path}: parent is not a table")))?;
    table.insert(keys[keys.len() - 1].to_string(), parse_leaf(value.trim()));
    Ok(())
}

/// Command-line inputs that shape the configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Defaults for `experiment`, then the config file, then `--set`, `--seed`
/// and `--out`.
pub fn load(experiment: Experiment, overrides: &Overrides) -> CliResult<ExperimentConfig> {
    let mut value = toml::Value::try_from(ExperimentConfig::defaults(experiment))
        .map_err(|e| CliError::Validation(format!("default configuration: {e}")))?;
    if let Some(path) = &overrides.config {
        let user = read_config_file(path)?;
        if let Some(named) = user.get("experiment") {
            if named.as_str() != Some(experiment.name()) {
                return Err(CliError::Validation(format!(
                    "config names experiment {named} but the subcommand is {}",
                    experiment.name()
                )));
            }
        }
        merge(&mut value, toml::Value::Table(user));
    }
    for s in &overrides.sets {
        apply_set(&mut value, s)?;
    }
    let mut cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Validation(e.to_string()))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::Validation(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    if cfg.experiment != experiment {
        return Err(CliError::Validation("experiment cannot be changed by --set".into()));
    }
    if let Some(seed) = overrides.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &overrides.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn read_config_file(path: &Path) -> CliResult<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Validation(format!("{}: {e}", path.display())))?;
    if !table.contains_key("schema_version") {
        return Err(CliError::Validation(format!("{}: schema_version is missing", path.display())));
    }
    Ok(table)
}
