//! One function per subcommand. Each validates its inputs, computes
//! everything in memory, and only then commits its outputs.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use manifold_potential::grid::{ScalarGrid, VectorGrid};
use manifold_potential::multigrid::{self, Solution};
use manifold_potential::pde::{Region, WindowShape};
use manifold_potential::transport::{self, Reconstruction, TransportMap};
use manifold_potential::Error as CoreError;

use crate::config::{parse_builtin_name, RunConfig, Source};
use crate::error::{CliError, CliResult};
use crate::formats;
use crate::output::OutputSet;
use crate::plot;

/// Loads the config file (if any) and applies command-line overrides.
pub fn resolve_config(
    config: Option<&Path>,
    builtin: Option<&str>,
    size: Option<usize>,
    seed: Option<u64>,
) -> CliResult<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(name) = builtin {
        let name = parse_builtin_name(name)?;
        if cfg.source != Some(Source::Builtin(name.clone())) {
            // Overrides written for another source no longer apply.
            cfg.distribution.clear();
        }
        cfg.source = Some(Source::Builtin(name));
    }
    if let Some(n) = size {
        cfg.pyramid.target_size = Some(n);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `top,left,height,width`.
pub fn parse_region(text: &str) -> CliResult<Region> {
    let v: Vec<usize> = text
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::parse(format!("bad region {text:?}, expected top,left,height,width")))?;
    match v[..] {
        [top, left, height, width] => Ok(Region {
            top,
            left,
            height,
            width,
        }),
        _ => Err(CliError::parse(format!("bad region {text:?}, expected top,left,height,width"))),
    }
}

fn map_for(field: VectorGrid, valid: Option<Region>) -> CliResult<TransportMap> {
    let map = TransportMap::from_field(field);
    match valid {
        Some(v) => Ok(map.with_valid(v)?),
        None => Ok(map),
    }
}

/// Reconstruction failures are solver failures; the message carries the fold
/// or inversion diagnostics.
fn reconstruct(map: &TransportMap, shape: (usize, usize)) -> CliResult<Reconstruction> {
    transport::reconstruct_density(map, shape).map_err(|e| match e {
        CoreError::FoldedCells { .. } | CoreError::NonInvertible { .. } => CliError::from(e),
        other => CliError::solver(other.to_string()),
    })
}

fn region_json(v: Region) -> Value {
    json!({"top": v.top, "left": v.left, "height": v.height, "width": v.width})
}

pub struct SolveOutcome {
    pub solution: Solution,
    pub reconstruction: Option<Reconstruction>,
    /// `1 - beta` between the target and reconstructed densities.
    pub error: Option<f64>,
    pub report: Value,
    pub written: Vec<PathBuf>,
}

pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> CliResult<SolveOutcome> {
    cfg.validate()?;
    let source = cfg.density_source()?;
    let kernel = cfg.kernel.kernel();
    let solution = multigrid::solve(&source, &cfg.pyramid, &cfg.ncg, &kernel)?;
    let valid = solution.map.valid_region();
    let n = cfg.pyramid.output_size();

    let (reconstruction, beta) = if cfg.outputs.reconstruction {
        let rec = reconstruct(&solution.map, (n, n))?;
        let beta = transport::bhattacharyya(&solution.p, &rec.density)?;
        (Some(rec), Some(beta))
    } else {
        (None, None)
    };
    let error = beta.map(|b| 1.0 - b);
    // Unit mass, like the reconstruction, so the two compare sample by sample.
    let total = solution.p.sum();
    let p_unit = solution.p.map(|v| v / total)?;

    let r = &solution.report;
    let levels: Vec<Value> = r
        .levels
        .iter()
        .map(|l| {
            json!({
                "level": l.level_index,
                "size": cfg.pyramid.level_size(l.level_index),
                "padded_shape": [l.padded_shape.0, l.padded_shape.1],
                "initial_energy": l.trace.initial_energy(),
                "final_energy": l.trace.final_energy(),
                "energies": l.trace.energies,
                "line_searches": l.trace.line_searches_used,
                "evaluations": l.trace.evaluations,
                "terminated_by": format!("{:?}", l.trace.terminated_by),
                "seconds": l.seconds,
            })
        })
        .collect();
    let source_name = match &cfg.source {
        Some(Source::Builtin(name)) => format!("builtin:{name}"),
        Some(Source::GridFile(p)) => format!("grid:{}", p.display()),
        None => unreachable!("validated"),
    };
    let mut report = json!({
        "source": source_name,
        "seed": cfg.seed,
        "kernel": cfg.kernel.as_str(),
        "pyramid": {
            "base_size": cfg.pyramid.base_size,
            "levels": cfg.pyramid.levels,
            "output_size": n,
            "window": {
                "pad": cfg.pyramid.window.pad,
                "transition": cfg.pyramid.window.transition,
                "shape": match cfg.pyramid.window.shape {
                    WindowShape::Rectangular => "rectangular",
                    WindowShape::Radial => "radial",
                },
            },
        },
        "valid_region": region_json(valid),
        "padded_shape": [solution.map.shape().0, solution.map.shape().1],
        "levels": levels,
        "total_seconds": r.total_seconds,
        "final_rms_residual": r.final_rms_residual,
        "boundary_normal_max": r.boundary_normal_max,
        "jacobian_positive_fraction": r.jacobian_positive_fraction,
        "converged_immediately": r.converged_immediately(),
    });
    if let (Some(rec), Some(b)) = (&reconstruction, beta) {
        report["reconstruction"] = json!({
            "bhattacharyya": b,
            "error": 1.0 - b,
            "mass_ratio": rec.mass_ratio,
            "folded_cells": rec.folded.len(),
        });
    }

    let mut files = OutputSet::new();
    if cfg.outputs.potential {
        files.add("g.grid", formats::format_grid(&solution.g));
    }
    if cfg.outputs.field {
        files.add("field.field", formats::format_field(&solution.forward));
    }
    if cfg.outputs.padded_field {
        files.add("field_full.field", formats::format_field(solution.map.forward()));
    }
    if cfg.outputs.density {
        files.add("p.grid", formats::format_grid(&p_unit));
    }
    if let Some(rec) = &reconstruction {
        files.add("phat.grid", formats::format_grid(&rec.density));
    }
    if cfg.outputs.report {
        let text = serde_json::to_string_pretty(&report).expect("report is valid JSON") + "\n";
        files.add("report.json", text);
    }
    let written = files.commit(out)?;
    Ok(SolveOutcome {
        solution,
        reconstruction,
        error,
        report,
        written,
    })
}

/// Human-readable summary of a solve for standard output.
pub fn solve_summary(o: &SolveOutcome) -> String {
    let r = &o.solution.report;
    let mut s = String::new();
    for l in &r.levels {
        s += &format!(
            "level {} ({}x{} padded): energy {:.6e} -> {:.6e}, {} line searches, {:.2}s\n",
            l.level_index,
            l.padded_shape.0,
            l.padded_shape.1,
            l.trace.initial_energy(),
            l.trace.final_energy(),
            l.trace.line_searches_used,
            l.seconds
        );
    }
    s += &format!(
        "boundary normal max {:.3e}, jacobian positive {:.6}\n",
        r.boundary_normal_max, r.jacobian_positive_fraction
    );
    if let (Some(e), Some(rec)) = (o.error, &o.reconstruction) {
        s += &format!("reconstruction error {e:.6}, mass ratio {:.6}\n", rec.mass_ratio);
    }
    s
}

/// Reconstructs the density from a field file. `valid` marks the domain
/// inside a padded field; `size` sets the output lattice (default: the valid
/// region's shape).
pub fn cmd_reconstruct(field: &Path, valid: Option<Region>, size: Option<usize>, out: &Path) -> CliResult<Reconstruction> {
    let map = map_for(formats::read_field(field)?, valid)?;
    let v = map.valid_region();
    let shape = match size {
        Some(n) => (n, n),
        None => (v.height, v.width),
    };
    if shape.0 < 2 || shape.1 < 2 {
        return Err(CliError::parse(format!("output size {}x{} is degenerate", shape.0, shape.1)));
    }
    let rec = reconstruct(&map, shape)?;
    let mut files = OutputSet::new();
    files.add("phat.grid", formats::format_grid(&rec.density));
    files.commit(out)?;
    Ok(rec)
}

/// `(beta, 1 - beta)` between two grid files.
pub fn cmd_eval(p: &Path, q: &Path) -> CliResult<(f64, f64)> {
    let (a, b) = (formats::read_grid(p)?, formats::read_grid(q)?);
    let beta = transport::bhattacharyya(&a, &b)?;
    Ok((beta, 1.0 - beta))
}

pub fn eval_text(beta: f64, error: f64) -> String {
    format!("bhattacharyya {beta:.6}\nerror {error:.6}\n")
}

/// Contours of `grid` (and of `compare` at the same levels), arrows for
/// `field`, and a preview of `grid` (or of the field magnitude).
pub fn cmd_plot(grid: Option<&Path>, compare: Option<&Path>, field: Option<&Path>, out: &Path) -> CliResult<Vec<PathBuf>> {
    if grid.is_none() && field.is_none() {
        return Err(CliError::parse("plot needs --grid or --field"));
    }
    if compare.is_some() && grid.is_none() {
        return Err(CliError::parse("--compare needs --grid"));
    }
    let mut files = OutputSet::new();
    let g = grid.map(formats::read_grid).transpose()?;
    let f = field.map(formats::read_field).transpose()?;
    if let Some(g) = &g {
        let levels = plot::equal_levels(g, plot::CONTOUR_LEVELS);
        files.add("contours.csv", plot::contours_csv(g, &levels));
        if let Some(c) = compare {
            let c = formats::read_grid(c)?;
            g.same_shape(&c)?;
            files.add("contours_compare.csv", plot::contours_csv(&c, &levels));
        }
        files.add("preview.pgm", plot::pgm(g));
    }
    if let Some(f) = &f {
        files.add("field_arrows.csv", plot::arrows_csv(f));
        if g.is_none() {
            let (h, w) = f.shape();
            let mag = ScalarGrid::from_fn(h, w, |r, c| {
                let (dx, dy) = f.get(r, c);
                dx.hypot(dy)
            })?;
            files.add("preview.pgm", plot::pgm(&mag));
        }
    }
    files.commit(out)
}

/// Draws `n` samples through the inverse map; points are in unit-square
/// coordinates over the valid region.
pub fn cmd_sample(field: &Path, n: usize, seed: u64, valid: Option<Region>, out: &Path) -> CliResult<Vec<[f64; 2]>> {
    let map = map_for(formats::read_field(field)?, valid)?;
    let v = map.valid_region();
    let pts: Vec<[f64; 2]> = transport::draw_samples(&map, n, seed)?
        .into_iter()
        .map(|p| [p[0] / (v.width - 1) as f64, p[1] / (v.height - 1) as f64])
        .collect();
    let mut csv = String::with_capacity(40 * n + 4);
    csv.push_str("x,y\n");
    for p in &pts {
        csv += &format!("{:.16e},{:.16e}\n", p[0], p[1]);
    }
    let mut files = OutputSet::new();
    files.add("points.csv", csv);
    files.commit(out)?;
    Ok(pts)
}
