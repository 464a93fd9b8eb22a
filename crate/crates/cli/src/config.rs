//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comment
//! source = builtin:gaussian          # or grid:path/to/density.grid
//! distribution.sigma = 0.1,0.2
//! pyramid.base_size = 44
//! ncg.max_line_searches = 1000
//! window.pad = 16
//! outputs.padded_field = false
//! seed = 7
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use manifold_potential::diffops::DerivativeKernel;
use manifold_potential::multigrid::{DensitySource, PyramidConfig};
use manifold_potential::optimizer::NcgConfig;
use manifold_potential::pde::WindowShape;
use manifold_potential::reference::TestDistribution;

use crate::error::{CliError, CliResult};
use crate::formats;

pub const BUILTINS: [&str; 5] = ["uniform", "gaussian", "bimodal", "concave", "ring"];

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Builtin(String),
    GridFile(PathBuf),
}

/// Which artifacts `solve` writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outputs {
    /// `g.grid`
    pub potential: bool,
    /// `field.field`, valid region only.
    pub field: bool,
    /// `field_full.field`, the padded finest field.
    pub padded_field: bool,
    /// `p.grid`, the target density on the valid region with unit mass.
    pub density: bool,
    /// `phat.grid`, and reconstruction metrics in the report.
    pub reconstruction: bool,
    /// `report.json`
    pub report: bool,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            potential: true,
            field: true,
            padded_field: true,
            density: true,
            reconstruction: true,
            report: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KernelName {
    Farid5,
    Central3,
}

impl KernelName {
    pub fn kernel(&self) -> DerivativeKernel {
        match self {
            KernelName::Farid5 => DerivativeKernel::farid5(),
            KernelName::Central3 => DerivativeKernel::central3(),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            KernelName::Farid5 => "farid5",
            KernelName::Central3 => "central3",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: Option<Source>,
    /// `distribution.*` overrides, applied to the builtin at resolve time.
    pub distribution: Vec<(String, String)>,
    pub pyramid: PyramidConfig,
    pub ncg: NcgConfig,
    pub kernel: KernelName,
    pub outputs: Outputs,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source: None,
            distribution: Vec::new(),
            pyramid: PyramidConfig::default(),
            ncg: NcgConfig::default(),
            kernel: KernelName::Farid5,
            outputs: Outputs::default(),
            seed: 0,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> CliError {
    CliError::parse(format!("{key} = {value:?}: expected {want}"))
}

fn parse_usize(key: &str, v: &str) -> CliResult<usize> {
    v.parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn parse_f64(key: &str, v: &str) -> CliResult<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(bad(key, v, "a finite number")),
    }
}

fn parse_bool(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn parse_list<const N: usize>(key: &str, v: &str) -> CliResult<[f64; N]> {
    let vals: Vec<f64> = v
        .split(',')
        .map(|t| parse_f64(key, t.trim()))
        .collect::<CliResult<_>>()?;
    vals.try_into()
        .map_err(|_| bad(key, v, &format!("{N} comma-separated numbers")))
}

pub fn parse_builtin_name(name: &str) -> CliResult<String> {
    if BUILTINS.contains(&name) {
        Ok(name.to_string())
    } else {
        Err(CliError::parse(format!(
            "unknown builtin {name:?}, expected one of {}",
            BUILTINS.join(", ")
        )))
    }
}

impl RunConfig {
    /// Parses config text. Relative grid paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::parse(format!("config line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::parse(format!("config line {}: duplicate key {key}", n + 1)));
            }
            cfg.set(key, value, base_dir)
                .map_err(|e| CliError::parse(format!("config line {}: {}", n + 1, e.message)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("reading config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    fn set(&mut self, key: &str, v: &str, base_dir: &Path) -> CliResult<()> {
        match key {
            "source" => {
                self.source = Some(if let Some(name) = v.strip_prefix("builtin:") {
                    Source::Builtin(parse_builtin_name(name)?)
                } else if let Some(p) = v.strip_prefix("grid:") {
                    Source::GridFile(base_dir.join(p))
                } else {
                    return Err(bad(key, v, "builtin:NAME or grid:PATH"));
                })
            }
            "seed" => self.seed = v.parse().map_err(|_| bad(key, v, "a non-negative integer"))?,
            "kernel" => {
                self.kernel = match v {
                    "farid5" => KernelName::Farid5,
                    "central3" => KernelName::Central3,
                    _ => return Err(bad(key, v, "farid5 or central3")),
                }
            }
            "pyramid.base_size" => self.pyramid.base_size = parse_usize(key, v)?,
            "pyramid.levels" => self.pyramid.levels = parse_usize(key, v)?,
            "pyramid.target_size" => {
                self.pyramid.target_size = match v {
                    "none" | "finest" => None,
                    _ => Some(parse_usize(key, v)?),
                }
            }
            "window.pad" => self.pyramid.window.pad = parse_usize(key, v)?,
            "window.transition" => self.pyramid.window.transition = parse_usize(key, v)?,
            "window.shape" => {
                self.pyramid.window.shape = match v {
                    "rectangular" => WindowShape::Rectangular,
                    "radial" => WindowShape::Radial,
                    _ => return Err(bad(key, v, "rectangular or radial")),
                }
            }
            "ncg.max_line_searches" => self.ncg.max_line_searches = parse_usize(key, v)?,
            "ncg.max_evals_per_search" => self.ncg.max_evals_per_search = parse_usize(key, v)?,
            "ncg.wolfe_c1" => self.ncg.wolfe_c1 = parse_f64(key, v)?,
            "ncg.wolfe_c2" => self.ncg.wolfe_c2 = parse_f64(key, v)?,
            "ncg.grad_tol" => self.ncg.grad_tol = parse_f64(key, v)?,
            "ncg.max_extrapolation" => self.ncg.max_extrapolation = parse_f64(key, v)?,
            "ncg.restart_on_nonnegative_beta" => self.ncg.restart_on_nonnegative_beta = parse_bool(key, v)?,
            "outputs.potential" => self.outputs.potential = parse_bool(key, v)?,
            "outputs.field" => self.outputs.field = parse_bool(key, v)?,
            "outputs.padded_field" => self.outputs.padded_field = parse_bool(key, v)?,
            "outputs.density" => self.outputs.density = parse_bool(key, v)?,
            "outputs.reconstruction" => self.outputs.reconstruction = parse_bool(key, v)?,
            "outputs.report" => self.outputs.report = parse_bool(key, v)?,
            k if k.starts_with("distribution.") => {
                let field = &k["distribution.".len()..];
                const FIELDS: [&str; 8] = [
                    "center",
                    "centers",
                    "sigma",
                    "weights",
                    "radius",
                    "radial_sigma",
                    "direction",
                    "concentration",
                ];
                if !FIELDS.contains(&field) {
                    return Err(CliError::parse(format!("unknown key {k}")));
                }
                self.distribution.push((field.to_string(), v.to_string()));
            }
            _ => return Err(CliError::parse(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// The builtin named by the source with `distribution.*` overrides applied.
    pub fn builtin(&self) -> CliResult<Option<TestDistribution>> {
        let Some(Source::Builtin(name)) = &self.source else {
            return Ok(None);
        };
        let mut spec = TestDistribution::builtin(name).expect("name checked at parse time");
        for (field, v) in &self.distribution {
            let key = format!("distribution.{field}");
            let mismatch = || CliError::parse(format!("{key} does not apply to builtin {name}"));
            match (&mut spec, field.as_str()) {
                (TestDistribution::Gaussian { center, .. }, "center")
                | (TestDistribution::Ring { center, .. }, "center")
                | (TestDistribution::Concave { center, .. }, "center") => *center = parse_list::<2>(&key, v)?,
                (TestDistribution::Gaussian { sigma, .. }, "sigma") => *sigma = parse_list::<2>(&key, v)?,
                (TestDistribution::Bimodal { sigma, .. }, "sigma") => *sigma = parse_f64(&key, v)?,
                (TestDistribution::Bimodal { centers, .. }, "centers") => {
                    let c = parse_list::<4>(&key, v)?;
                    *centers = [[c[0], c[1]], [c[2], c[3]]];
                }
                (TestDistribution::Bimodal { weights, .. }, "weights") => *weights = parse_list::<2>(&key, v)?,
                (TestDistribution::Ring { radius, .. }, "radius")
                | (TestDistribution::Concave { radius, .. }, "radius") => *radius = parse_f64(&key, v)?,
                (TestDistribution::Ring { radial_sigma, .. }, "radial_sigma")
                | (TestDistribution::Concave { radial_sigma, .. }, "radial_sigma") => *radial_sigma = parse_f64(&key, v)?,
                (TestDistribution::Concave { direction, .. }, "direction") => *direction = parse_f64(&key, v)?,
                (TestDistribution::Concave { concentration, .. }, "concentration") => {
                    *concentration = parse_f64(&key, v)?
                }
                _ => return Err(mismatch()),
            }
        }
        let positive = match &spec {
            TestDistribution::Uniform => true,
            TestDistribution::Gaussian { sigma, .. } => sigma.iter().all(|&s| s > 0.0),
            TestDistribution::Bimodal { sigma, weights, .. } => {
                *sigma > 0.0 && weights.iter().all(|&w| w >= 0.0) && weights.iter().sum::<f64>() > 0.0
            }
            TestDistribution::Ring { radial_sigma, .. } => *radial_sigma > 0.0,
            TestDistribution::Concave {
                radial_sigma,
                concentration,
                ..
            } => *radial_sigma > 0.0 && *concentration >= 0.0,
        };
        if !positive {
            return Err(CliError::parse(format!(
                "distribution parameters for {name} need positive widths and non-negative weights"
            )));
        }
        Ok(Some(spec))
    }

    /// Checks everything that can be checked without running the solver.
    pub fn validate(&self) -> CliResult<()> {
        let kernel = self.kernel.kernel();
        self.pyramid.validate(&kernel)?;
        self.ncg.validate()?;
        match &self.source {
            None => return Err(CliError::parse("no density source: set source or pass --builtin")),
            Some(Source::Builtin(_)) => {
                let spec = self.builtin()?.expect("builtin source");
                // Rejects specs whose mass escapes the domain.
                manifold_potential::reference::generate(&spec, 8, 8)?;
            }
            Some(Source::GridFile(_)) => {
                if !self.distribution.is_empty() {
                    return Err(CliError::parse("distribution.* keys need a builtin source"));
                }
            }
        }
        Ok(())
    }

    pub fn density_source(&self) -> CliResult<DensitySource> {
        match &self.source {
            Some(Source::GridFile(path)) => Ok(DensitySource::Grid(formats::read_grid(path)?)),
            Some(Source::Builtin(_)) => Ok(DensitySource::Analytic(self.builtin()?.expect("builtin source"))),
            None => Err(CliError::parse("no density source: set source or pass --builtin")),
        }
    }
}
