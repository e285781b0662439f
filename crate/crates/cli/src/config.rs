//! Experiment configuration: JSON schema, defaults and validation.

use std::path::{Path, PathBuf};

use sbcascade::io::{read_kernel_csv, AxisSpec, Density};
use sbcascade::{Axis, BlockStructure, GridMeasure, Kernel, KernelTable};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Block dimensions; one block per coordinate when absent.
    #[serde(default)]
    pub blocks: Option<Vec<usize>>,
    pub source: MeasureConfig,
    pub target: MeasureConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub seed: u64,
    /// Not embedded in summaries, so relocating a run keeps them identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default)]
    pub stability: StabilityConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub bernstein: BernsteinConfig,
    #[serde(default)]
    pub zero_noise: ZeroNoiseConfig,
}

fn default_tolerance() -> f64 {
    1e-10
}

fn default_max_iterations() -> usize {
    50_000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    pub axes: Vec<AxisSpec>,
    pub density: Density,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    /// Product heat kernel; a single variance applies to every coordinate.
    GaussianHeat { variances: Vec<f64> },
    /// `exp(-c(x, y) / t)` with `c` given row-major over source × target cells.
    Gibbs { cost: Vec<f64>, t: f64 },
    /// Dense `source,target,value` CSV, relative to the config file.
    Table { path: PathBuf },
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig::GaussianHeat { variances: vec![1.0] }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    /// Keep and emit every per-prefix conditional coupling.
    pub retain_per_prefix: bool,
    /// Compare against the brute-force oracle (oracle-scale grids only).
    pub oracle_comparison: bool,
    pub stability_probe: bool,
    /// Start every Fortet run from random positive potentials drawn from `seed`.
    pub random_init: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    pub epsilons: Vec<f64>,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self { epsilons: vec![1e-1, 1e-2, 1e-3] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Random feasible couplings checked against the solver value.
    pub feasible_samples: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { feasible_samples: 1000 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BernsteinConfig {
    pub paths: usize,
    /// Paths are recorded at `k / 2^dyadic_level`.
    pub dyadic_level: u32,
    pub density_times: Vec<f64>,
    /// Grid for the time-marginal densities; the target grid when absent.
    pub density_axes: Option<Vec<AxisSpec>>,
    /// Cells merged per axis in the endpoint chi-square test.
    pub chi_square_block: usize,
    pub min_expected_count: f64,
    /// Write every path to `paths.csv`.
    pub write_paths: bool,
}

impl Default for BernsteinConfig {
    fn default() -> Self {
        Self {
            paths: 10_000,
            dyadic_level: 3,
            density_times: vec![0.25, 0.5, 0.75],
            density_axes: None,
            chi_square_block: 4,
            min_expected_count: 50.0,
            write_paths: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroNoiseConfig {
    pub variances: Vec<f64>,
}

impl Default for ZeroNoiseConfig {
    fn default() -> Self {
        Self { variances: vec![1.0, 0.1, 0.01] }
    }
}

/// A validated configuration with its measures and kernel built.
pub struct Problem {
    pub config: ExperimentConfig,
    pub structure: BlockStructure,
    pub mu: GridMeasure,
    pub nu: GridMeasure,
    pub kernel: Kernel,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::ConfigInvalid(msg.into())
}

fn build_measure(name: &str, m: &MeasureConfig) -> Result<GridMeasure, CliError> {
    if m.axes.is_empty() {
        return Err(invalid(format!("{name}: no axes")));
    }
    let axes = m
        .axes
        .iter()
        .map(AxisSpec::build)
        .collect::<Result<Vec<Axis>, _>>()
        .map_err(|e| invalid(format!("{name}: {e}")))?;
    m.density.discretize(&axes).map_err(|e| invalid(format!("{name} density: {e}")))
}

fn check_positive(name: &str, values: &[f64]) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(invalid(format!("{name}: empty")));
    }
    match values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        Some(v) => Err(invalid(format!("{name} must be positive, got {v}"))),
        None => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if let KernelConfig::Table { path: table } = &mut cfg.kernel {
            if table.is_relative() {
                if let Some(dir) = path.parent() {
                    *table = dir.join(&*table);
                }
            }
        }
        Ok(cfg)
    }

    /// Checks every field and builds the measures and kernel. Fills in the
    /// default block structure so the embedded config is fully resolved.
    pub fn resolve(mut self) -> Result<Problem, CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(invalid(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be positive"));
        }
        let mu = build_measure("source", &self.source)?;
        let nu = build_measure("target", &self.target)?;
        let d = mu.dim();
        let blocks = self.blocks.clone().unwrap_or_else(|| vec![1; d]);
        let structure = BlockStructure::new(blocks.clone()).map_err(|e| invalid(e.to_string()))?;
        self.blocks = Some(blocks);

        let kernel = match &mut self.kernel {
            KernelConfig::GaussianHeat { variances } => {
                check_positive("kernel variances", variances)?;
                if variances.len() == 1 {
                    *variances = vec![variances[0]; d];
                }
                if nu.dim() != d {
                    return Err(invalid("a heat kernel needs source and target of equal dimension"));
                }
                if variances.len() != d {
                    return Err(invalid(format!("kernel needs 1 or {d} variances, got {}", variances.len())));
                }
                Kernel::gaussian_heat(mu.axes().to_vec(), nu.axes().to_vec(), variances)
            }
            KernelConfig::Gibbs { cost, t } => {
                check_positive("kernel t", &[*t])?;
                let inst = sbcascade::cascade::BridgeInstance::gibbs(mu.clone(), nu.clone(), cost, *t)
                    .map_err(|e| invalid(e.to_string()))?;
                Kernel::from_table(mu.axes().to_vec(), nu.axes().to_vec(), inst.kernel)
            }
            KernelConfig::Table { path } => {
                let file = std::fs::File::open(&*path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
                let values = read_kernel_csv(file, mu.len(), nu.len()).map_err(|e| invalid(e.to_string()))?;
                KernelTable::from_values(mu.len(), nu.len(), &values)
                    .and_then(|t| Kernel::from_table(mu.axes().to_vec(), nu.axes().to_vec(), t))
            }
        }
        .map_err(|e| invalid(format!("kernel: {e}")))?;

        if structure.total_dim() != d {
            return Err(invalid(format!(
                "blocks {:?} cover {} coordinates but the source has {d}",
                structure.block_dims(),
                structure.total_dim()
            )));
        }
        // only a single block may join grids of different dimension
        if structure.depth() > 1 && nu.dim() != d {
            return Err(invalid("a cascade needs source and target of equal dimension"));
        }
        if let Some(e) = self.stability.epsilons.iter().find(|e| !(0.0..1.0).contains(*e)) {
            return Err(invalid(format!("stability epsilons must lie in [0, 1), got {e}")));
        }
        check_positive("zero_noise variances", &self.zero_noise.variances)?;
        let b = &self.bernstein;
        if b.paths == 0 {
            return Err(invalid("bernstein paths must be positive"));
        }
        if b.dyadic_level > 16 {
            return Err(invalid("bernstein dyadic_level must be at most 16"));
        }
        if b.chi_square_block == 0 {
            return Err(invalid("bernstein chi_square_block must be positive"));
        }
        if let Some(t) = b.density_times.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(invalid(format!("bernstein density times must lie in (0, 1], got {t}")));
        }
        if let Some(axes) = &b.density_axes {
            for a in axes {
                a.build().map_err(|e| invalid(format!("bernstein density axes: {e}")))?;
            }
        }
        Ok(Problem { config: self, structure, mu, nu, kernel })
    }
}

impl Problem {
    pub fn fortet(&self) -> sbcascade::FortetOptions {
        sbcascade::FortetOptions { tol: self.config.tolerance, max_iter: self.config.max_iterations, init_log_h: None }
    }

    pub fn cascade_options(&self) -> sbcascade::cascade::CascadeOptions {
        sbcascade::cascade::CascadeOptions {
            fortet: self.fortet(),
            retain_per_prefix: self.config.flags.retain_per_prefix,
            init: if self.config.flags.random_init {
                sbcascade::cascade::Init::RandomPositive { seed: self.config.seed }
            } else {
                sbcascade::cascade::Init::Zero
            },
        }
    }

    /// The config as embedded in summaries.
    pub fn embedded_config(&self) -> ExperimentConfig {
        let mut c = self.config.clone();
        c.output_dir = None;
        c
    }
}
