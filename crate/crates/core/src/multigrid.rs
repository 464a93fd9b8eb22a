//! Coarse-to-fine solve driver.
//!
//! Each level rebuilds `rho` from the source at its own resolution, pads and
//! windows it, and minimizes the energy with NCG starting from the prolonged
//! solution of the previous level (zero at the first level).

use std::time::Instant;

use crate::diffops::DerivativeKernel;
use crate::error::{Error, Result};
use crate::grid::{compute_rho, normalize_density, resample_bilinear, ScalarGrid};
use crate::optimizer::{minimize_grid, NcgConfig, SolveTrace, Termination};
use crate::pde::{window_rho, GradientMode, PdeProblem, Region, WindowSpec};
use crate::reference::TestDistribution;
use crate::transport;

/// Smallest pad used at any level.
const MIN_PAD: usize = 6;
/// Smallest taper width used at any level.
const MIN_TRANSITION: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    /// Samples per side at the coarsest level.
    pub base_size: usize,
    pub levels: usize,
    /// Final crop of the finest level, samples per side.
    pub target_size: Option<usize>,
    /// Padding and taper at the finest level; coarser levels scale it down.
    pub window: WindowSpec,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            base_size: 44,
            levels: 4,
            target_size: Some(351),
            window: WindowSpec::default(),
        }
    }
}

impl PyramidConfig {
    pub const GROWTH: usize = 2;

    pub fn level_size(&self, level: usize) -> usize {
        self.base_size * Self::GROWTH.pow(level as u32)
    }

    pub fn finest_size(&self) -> usize {
        self.level_size(self.levels - 1)
    }

    pub fn output_size(&self) -> usize {
        self.target_size.unwrap_or_else(|| self.finest_size())
    }

    /// Window at `level`, scaled from the finest-level window.
    pub fn level_window(&self, level: usize) -> WindowSpec {
        if level + 1 == self.levels {
            return self.window;
        }
        let scale = self.level_size(level) as f64 / self.finest_size() as f64;
        let pad = ((self.window.pad as f64 * scale).round() as usize).max(MIN_PAD);
        let transition = ((self.window.transition as f64 * scale).round() as usize)
            .max(MIN_TRANSITION)
            .min(pad);
        WindowSpec {
            pad,
            transition,
            shape: self.window.shape,
        }
    }

    pub fn validate(&self, kernel: &DerivativeKernel) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidConfig("pyramid needs at least one level".into()));
        }
        if self.base_size < 3 * kernel.len() {
            return Err(Error::InvalidConfig(format!(
                "base size {} is below 3x the filter support {}",
                self.base_size,
                kernel.len()
            )));
        }
        if let Some(t) = self.target_size {
            if t < 2 || t > self.finest_size() {
                return Err(Error::InvalidConfig(format!(
                    "target size {t} must lie in [2, {}]",
                    self.finest_size()
                )));
            }
        }
        for level in 0..self.levels {
            self.level_window(level).validate(kernel)?;
        }
        Ok(())
    }
}

/// Where level densities come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DensitySource {
    /// Evaluated exactly at each level's lattice nodes.
    Analytic(TestDistribution),
    /// Resampled bilinearly to each level.
    Grid(ScalarGrid),
}

impl DensitySource {
    /// The (unnormalized) density on an `n x n` node lattice over the domain.
    pub fn sample(&self, n: usize) -> Result<ScalarGrid> {
        match self {
            DensitySource::Analytic(spec) => spec.sample_grid(n, n),
            DensitySource::Grid(g) => resample_bilinear(g, n, n),
        }
    }
}

/// Builds one windowed problem per level, coarsest first.
pub fn build_pyramid(source: &DensitySource, cfg: &PyramidConfig, kernel: &DerivativeKernel) -> Result<Vec<PdeProblem>> {
    cfg.validate(kernel)?;
    if let DensitySource::Grid(g) = source {
        if g.height() < cfg.base_size || g.width() < cfg.base_size {
            return Err(Error::InvalidConfig(format!(
                "source grid {}x{} is below the coarsest level {}",
                g.height(),
                g.width(),
                cfg.base_size
            )));
        }
    }
    (0..cfg.levels)
        .map(|level| {
            let n = cfg.level_size(level);
            let density = normalize_density(&source.sample(n)?)?;
            window_rho(&compute_rho(&density), cfg.level_window(level), kernel.clone())
        })
        .collect()
}

/// Bilinear upsampling over the unit-square parameterization followed by the
/// curvature-preserving scale `(s_y s_x)`, where `s` is the ratio of lattice
/// spacings (2 for a dyadic `n -> 2n - 1` refinement, so the factor is 4).
pub fn prolong(g_coarse: &ScalarGrid, fine_shape: (usize, usize)) -> Result<ScalarGrid> {
    let (fh, fw) = fine_shape;
    let (ch, cw) = g_coarse.shape();
    if fh < ch || fw < cw {
        return Err(Error::ShapeMismatch {
            expected: (2 * ch, 2 * cw),
            found: fine_shape,
        });
    }
    let scale = ((fh - 1) as f64 / (ch - 1) as f64) * ((fw - 1) as f64 / (cw - 1) as f64);
    resample_bilinear(g_coarse, fh, fw)?.map(|v| v * scale)
}

/// `[1 2 1] / 4` in both directions with replicated edges. Removes the
/// odd-even content that the derivative filters barely see on the coarse
/// lattice but which interpolation turns into visible curvature.
fn binomial_smooth(g: &ScalarGrid) -> ScalarGrid {
    let (h, w) = g.shape();
    let rows = ScalarGrid::from_parts(
        h,
        w,
        (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                0.25 * g.get(r, c.saturating_sub(1)) + 0.5 * g.get(r, c) + 0.25 * g.get(r, (c + 1).min(w - 1))
            })
            .collect(),
    );
    ScalarGrid::from_parts(
        h,
        w,
        (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                0.25 * rows.get(r.saturating_sub(1), c) + 0.5 * rows.get(r, c) + 0.25 * rows.get((r + 1).min(h - 1), c)
            })
            .collect(),
    )
}

/// Prolongs a padded coarse solution onto a padded fine lattice, aligning the
/// valid regions of the two levels; the margin extends by edge replication.
/// The coarse potential is binomially smoothed first.
pub fn prolong_padded(g_coarse: &ScalarGrid, coarse: &PdeProblem, fine: &PdeProblem) -> Result<ScalarGrid> {
    coarse.rho().same_shape(g_coarse)?;
    let g_coarse = &binomial_smooth(g_coarse);
    let (cv, fv) = (coarse.valid_region(), fine.valid_region());
    let sy = (cv.height - 1) as f64 / (fv.height - 1) as f64;
    let sx = (cv.width - 1) as f64 / (fv.width - 1) as f64;
    let scale = 1.0 / (sy * sx);
    let (fh, fw) = fine.shape();
    ScalarGrid::from_fn(fh, fw, |r, c| {
        let y = (r as f64 - fv.top as f64) * sy + cv.top as f64;
        let x = (c as f64 - fv.left as f64) * sx + cv.left as f64;
        scale * g_coarse.sample_bilinear(y, x)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelResult {
    pub level_index: usize,
    /// Potential on the padded lattice of this level.
    pub g: ScalarGrid,
    pub trace: SolveTrace,
    pub valid_size: usize,
    pub padded_shape: (usize, usize),
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub levels: Vec<LevelResult>,
    pub total_seconds: f64,
    /// Root-mean-square residual `h(g) - rho` over the finest valid region.
    pub final_rms_residual: f64,
    /// Largest boundary-normal displacement on the output region.
    pub boundary_normal_max: f64,
    /// Fraction of output samples with `|I + H(g)| > 0`.
    pub jacobian_positive_fraction: f64,
}

impl SolveReport {
    pub fn converged_immediately(&self) -> bool {
        self.levels
            .iter()
            .all(|l| l.trace.line_searches_used == 0 && l.trace.terminated_by == Termination::GradientTolerance)
    }
}

/// Result of a complete coarse-to-fine solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// Potential on the output region.
    pub g: ScalarGrid,
    /// Forward displacement `grad g` on the output region, computed on the
    /// padded finest lattice before cropping.
    pub forward: crate::grid::VectorGrid,
    /// The map on the padded finest lattice, restricted to the output region.
    pub map: transport::TransportMap,
    /// The normalized density the finest level targeted, on the output region.
    pub p: ScalarGrid,
    pub report: SolveReport,
}

/// Solves every level in turn and crops the finest solution.
pub fn solve(source: &DensitySource, pcfg: &PyramidConfig, ncfg: &NcgConfig, kernel: &DerivativeKernel) -> Result<Solution> {
    ncfg.validate()?;
    let started = Instant::now();
    let problems = build_pyramid(source, pcfg, kernel)?;
    let mut levels: Vec<LevelResult> = Vec::with_capacity(problems.len());
    for (k, problem) in problems.iter().enumerate() {
        let t0 = Instant::now();
        let x0 = match levels.last() {
            None => ScalarGrid::zeros(problem.shape().0, problem.shape().1)?,
            Some(prev) => prolong_padded(&prev.g, &problems[k - 1], problem)?,
        };
        let mut objective = |x: &[f64]| {
            let g = ScalarGrid::new(problem.shape().0, problem.shape().1, x.to_vec())
                .expect("optimizer keeps iterates finite");
            let (e, grad) = problem
                .energy_and_gradient(&g, GradientMode::Exact)
                .expect("iterate has the problem shape");
            (e, grad.into_data())
        };
        let (g, trace) = minimize_grid(&x0, &mut objective, ncfg).map_err(|e| match e {
            Error::LineSearchFailed { .. } => Error::LineSearchFailed { level: Some(k) },
            other => other,
        })?;
        levels.push(LevelResult {
            level_index: k,
            g,
            trace,
            valid_size: problem.valid_region().height,
            padded_shape: problem.shape(),
            seconds: t0.elapsed().as_secs_f64(),
        });
    }

    let finest = problems.last().expect("at least one level");
    let g_padded = &levels.last().expect("at least one level").g;
    let out = pcfg.output_size();
    let v = finest.valid_region();
    let g = g_padded.crop(v.top, v.left, out, out)?;
    let map = transport::forward_field(g_padded, kernel)?.with_valid(Region {
        top: v.top,
        left: v.left,
        height: out,
        width: out,
    })?;
    let forward = map.forward_valid();
    let p_full = finest.rho().crop(v.top, v.left, out, out)?.map(|r| r + 1.0)?;
    let p = normalize_density(&p_full)?.p;

    let residual = finest.residual(g_padded)?.crop(v.top, v.left, out, out)?;
    let h = finest.h_of_g(g_padded)?.crop(v.top, v.left, out, out)?;
    let report = SolveReport {
        total_seconds: started.elapsed().as_secs_f64(),
        final_rms_residual: (residual.norm_sq() / residual.len() as f64).sqrt(),
        boundary_normal_max: transport::boundary_normal_max(&forward),
        jacobian_positive_fraction: h.data().iter().filter(|&&v| 1.0 + v > 0.0).count() as f64 / h.len() as f64,
        levels,
    };
    Ok(Solution {
        g,
        forward,
        map,
        p,
        report,
    })
}
