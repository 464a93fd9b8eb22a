//! Everything downstream of the potential: the displacement field, its
//! inverse, density reconstruction from warped cell areas, Bhattacharyya
//! scoring, and sampling.
//!
//! Points are `[x, y]` in lattice units (`x` along columns, `y` along rows).
//! The forward map is `T(x) = x + f(x)` with `f = grad g` interpolated
//! bilinearly between lattice samples and held constant past the edges.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffops::DerivativeKernel;
use crate::error::{Error, Result};
use crate::grid::{neumaier_sum, ScalarGrid, VectorGrid};
use crate::pde::{h_of_g, Region};

/// Newton iterations allowed per inverted point.
const MAX_INVERSION_ITERATIONS: usize = 100;
/// Step size below which an inversion has settled, lattice units.
const INVERSION_STEP_TOL: f64 = 1e-6;
/// Residual `|T(y) - x_hat|` accepted as converged, lattice units.
const INVERSION_RESIDUAL_TOL: f64 = 1e-8;
/// Smallest batch of uniforms drawn per sampling round.
const MIN_SAMPLE_BATCH: usize = 64;
/// Consecutive rounds without an accepted point before sampling gives up.
const MAX_EMPTY_BATCHES: usize = 8;
/// Largest fraction of nodes allowed to fail inversion.
const MAX_FAILED_FRACTION: f64 = 1e-3;

/// The map `x -> x + f(x)` over a lattice, with the sub-rectangle that holds
/// the density of interest. Outside `valid` the lattice is padding: it takes
/// part in inversion but not in reconstructed or sampled output.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportMap {
    g: Option<ScalarGrid>,
    forward: VectorGrid,
    valid: Region,
}

impl TransportMap {
    /// Wraps a displacement field directly, e.g. one read from disk.
    pub fn from_field(forward: VectorGrid) -> Self {
        let (height, width) = forward.shape();
        Self {
            g: None,
            forward,
            valid: Region {
                top: 0,
                left: 0,
                height,
                width,
            },
        }
    }

    /// Restricts output to `valid`, keeping the rest of the lattice as padding.
    pub fn with_valid(mut self, valid: Region) -> Result<Self> {
        let (h, w) = self.shape();
        if valid.height < 2 || valid.width < 2 || valid.top + valid.height > h || valid.left + valid.width > w {
            return Err(Error::InvalidConfig(format!(
                "valid region {valid:?} does not fit a {h}x{w} lattice"
            )));
        }
        self.valid = valid;
        Ok(self)
    }

    pub fn potential(&self) -> Option<&ScalarGrid> {
        self.g.as_ref()
    }

    pub fn forward(&self) -> &VectorGrid {
        &self.forward
    }

    /// The forward field cropped to the valid region.
    pub fn forward_valid(&self) -> VectorGrid {
        let v = self.valid;
        self.forward
            .crop(v.top, v.left, v.height, v.width)
            .expect("valid region fits the lattice")
    }

    pub fn valid_region(&self) -> Region {
        self.valid
    }

    pub fn shape(&self) -> (usize, usize) {
        self.forward.shape()
    }

    /// `T(p) = p + f(p)`.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let ((fx, fy), _) = self.forward.sample_with_jacobian(p[1], p[0]);
        [p[0] + fx, p[1] + fy]
    }
}

/// `f = grad g` by one derivative pass per axis.
pub fn forward_field(g: &ScalarGrid, kernel: &DerivativeKernel) -> Result<TransportMap> {
    let (gx, gy) = kernel.gradient(g)?;
    let mut map = TransportMap::from_field(VectorGrid::from_components(gx, gy)?);
    map.g = Some(g.clone());
    Ok(map)
}

/// Outcome of inverting the map at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointInversion {
    pub point: [f64; 2],
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves `y + f(y) = target` by damped Newton iteration on the bilinear
/// field, halving the step until the residual decreases. Starts at `target`.
pub fn invert_point(field: &VectorGrid, target: [f64; 2]) -> PointInversion {
    invert_point_from(field, target, target)
}

/// As [`invert_point`], starting the iteration at `start`.
pub fn invert_point_from(field: &VectorGrid, target: [f64; 2], start: [f64; 2]) -> PointInversion {
    let residual_at = |p: [f64; 2]| {
        let ((fx, fy), jac) = field.sample_with_jacobian(p[1], p[0]);
        ([p[0] + fx - target[0], p[1] + fy - target[1]], jac)
    };
    let norm = |r: [f64; 2]| r[0].abs().max(r[1].abs());
    let mut p = start;
    let (mut r, mut jac) = residual_at(p);
    for it in 0..MAX_INVERSION_ITERATIONS {
        if norm(r) < INVERSION_RESIDUAL_TOL * 1e-2 {
            return PointInversion {
                point: p,
                residual: norm(r),
                iterations: it,
                converged: true,
            };
        }
        let (a, b, c, d) = (1.0 + jac[0][0], jac[0][1], jac[1][0], 1.0 + jac[1][1]);
        let det = a * d - b * c;
        let delta = if det > 1e-12 {
            [(d * r[0] - b * r[1]) / det, (a * r[1] - c * r[0]) / det]
        } else {
            r
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = [p[0] - t * delta[0], p[1] - t * delta[1]];
            let (rc, jc) = residual_at(cand);
            if norm(rc) < norm(r) {
                accepted = Some((cand, rc, jc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, rc, jc)) = accepted else {
            break;
        };
        let step = t * norm(delta);
        p = cand;
        r = rc;
        jac = jc;
        if step < INVERSION_STEP_TOL && norm(r) < INVERSION_RESIDUAL_TOL {
            return PointInversion {
                point: p,
                residual: norm(r),
                iterations: it + 1,
                converged: true,
            };
        }
    }
    PointInversion {
        point: p,
        residual: norm(r),
        iterations: MAX_INVERSION_ITERATIONS,
        converged: norm(r) < INVERSION_RESIDUAL_TOL,
    }
}

/// The inverse displacement field `T^{-1}(x_hat) - x_hat` at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub displacement: VectorGrid,
    /// Largest `|T(T^{-1}(x_hat)) - x_hat|` over converged nodes.
    pub max_residual: f64,
    /// Nodes that did not converge (row-major); at most 0.1% of the lattice.
    pub failed: Vec<usize>,
    /// Nodes outside the image of the domain; they have no preimage.
    pub outside: Vec<usize>,
}

/// Forward images of the lattice triangles, bucketed for point location.
/// Gives Newton a starting point inside the right cell, which matters where
/// the map nearly collapses and the field has small folds.
struct ImageIndex {
    images: Vec<[f64; 2]>,
    sources: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    origin: [f64; 2],
    bucket: f64,
    nx: usize,
    ny: usize,
    starts: Vec<usize>,
    entries: Vec<usize>,
}

impl ImageIndex {
    fn new(field: &VectorGrid) -> Self {
        let (h, w) = field.shape();
        let mut images = Vec::with_capacity(h * w);
        let mut sources = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (fx, fy) = field.get(r, c);
                sources.push([c as f64, r as f64]);
                images.push([c as f64 + fx, r as f64 + fy]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * (h - 1) * (w - 1));
        for r in 0..h - 1 {
            for c in 0..w - 1 {
                let (a, b, cc, d) = (r * w + c, r * w + c + 1, (r + 1) * w + c + 1, (r + 1) * w + c);
                for t in [[a, b, cc], [a, cc, d]] {
                    if tri_area(images[t[0]], images[t[1]], images[t[2]]) > 0.0 {
                        triangles.push(t);
                    }
                }
            }
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &images {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        // about one bucket per lattice cell
        let bucket = (((hi[0] - lo[0]) * (hi[1] - lo[1])) / (h * w) as f64).sqrt().max(1.0);
        let nx = ((hi[0] - lo[0]) / bucket) as usize + 1;
        let ny = ((hi[1] - lo[1]) / bucket) as usize + 1;
        let mut idx = Self {
            images,
            sources,
            triangles,
            origin: lo,
            bucket,
            nx,
            ny,
            starts: vec![0; nx * ny + 1],
            entries: Vec::new(),
        };
        let spans: Vec<(usize, usize, usize, usize)> = idx.triangles.iter().map(|t| idx.span(t)).collect();
        for &(x0, x1, y0, y1) in &spans {
            for by in y0..=y1 {
                for bx in x0..=x1 {
                    idx.starts[by * nx + bx + 1] += 1;
                }
            }
        }
        for i in 0..nx * ny {
            idx.starts[i + 1] += idx.starts[i];
        }
        let mut fill = idx.starts.clone();
        idx.entries = vec![0; idx.starts[nx * ny]];
        for (ti, &(x0, x1, y0, y1)) in spans.iter().enumerate() {
            for by in y0..=y1 {
                for bx in x0..=x1 {
                    let slot = &mut fill[by * nx + bx];
                    idx.entries[*slot] = ti;
                    *slot += 1;
                }
            }
        }
        idx
    }

    fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        let bx = ((p[0] - self.origin[0]) / self.bucket).max(0.0) as usize;
        let by = ((p[1] - self.origin[1]) / self.bucket).max(0.0) as usize;
        (bx.min(self.nx - 1), by.min(self.ny - 1))
    }

    fn span(&self, t: &[usize; 3]) -> (usize, usize, usize, usize) {
        let pts = t.map(|i| self.images[i]);
        let lo = [pts[0][0].min(pts[1][0]).min(pts[2][0]), pts[0][1].min(pts[1][1]).min(pts[2][1])];
        let hi = [pts[0][0].max(pts[1][0]).max(pts[2][0]), pts[0][1].max(pts[1][1]).max(pts[2][1])];
        let (x0, y0) = self.cell_of(lo);
        let (x1, y1) = self.cell_of(hi);
        (x0, x1, y0, y1)
    }

    /// Preimage of `target` under the piecewise-linear image mesh.
    fn locate(&self, target: [f64; 2]) -> Option<[f64; 2]> {
        if target[0] < self.origin[0] || target[1] < self.origin[1] {
            return None;
        }
        let (bx, by) = self.cell_of(target);
        let b = by * self.nx + bx;
        for &ti in &self.entries[self.starts[b]..self.starts[b + 1]] {
            let t = self.triangles[ti];
            let [a, bb, c] = t.map(|i| self.images[i]);
            let area = tri_area(a, bb, c);
            let eps = -1e-12 * area;
            let wa = tri_area(target, bb, c);
            let wb = tri_area(a, target, c);
            let wc = tri_area(a, bb, target);
            if wa >= eps && wb >= eps && wc >= eps {
                let [sa, sb, sc] = t.map(|i| self.sources[i]);
                return Some([
                    (wa * sa[0] + wb * sb[0] + wc * sc[0]) / area,
                    (wa * sa[1] + wb * sb[1] + wc * sc[1]) / area,
                ]);
            }
        }
        None
    }
}

/// How the inversion of one target ended.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Outcome {
    Converged,
    /// No preimage in the lattice domain.
    Outside,
    Failed,
}

fn invert_points(field: &VectorGrid, targets: &[[f64; 2]]) -> Result<Vec<(PointInversion, Outcome)>> {
    let index = ImageIndex::new(field);
    let (h, w) = field.shape();
    let in_domain = |p: [f64; 2]| {
        let tol = 1e-9;
        p[0] >= -tol && p[1] >= -tol && p[0] <= (w - 1) as f64 + tol && p[1] <= (h - 1) as f64 + tol
    };
    let results: Vec<(PointInversion, Outcome)> = targets
        .par_iter()
        .map(|&t| {
            let Some(seed) = index.locate(t) else {
                let plain = invert_point(field, t);
                let outcome = if plain.converged && in_domain(plain.point) {
                    Outcome::Converged
                } else {
                    Outcome::Outside
                };
                return (plain, outcome);
            };
            let misfit = |p: [f64; 2]| {
                let ((fx, fy), _) = field.sample_with_jacobian(p[1], p[0]);
                (p[0] + fx - t[0]).abs().max((p[1] + fy - t[1]).abs())
            };
            let best = if misfit(t) <= misfit(seed) {
                invert_point(field, t)
            } else {
                let seeded = invert_point_from(field, t, seed);
                if seeded.converged {
                    seeded
                } else {
                    let plain = invert_point(field, t);
                    if plain.converged || plain.residual < seeded.residual {
                        plain
                    } else {
                        seeded
                    }
                }
            };
            let outcome = if best.converged { Outcome::Converged } else { Outcome::Failed };
            (best, outcome)
        })
        .collect();
    let failed = results.iter().filter(|r| r.1 == Outcome::Failed).count();
    if failed as f64 > MAX_FAILED_FRACTION * targets.len() as f64 {
        return Err(Error::NonInvertible {
            failed,
            total: targets.len(),
            mask: results.iter().map(|r| r.1 == Outcome::Failed).collect(),
        });
    }
    Ok(results)
}

/// Inverts the map at every lattice node.
pub fn invert_field(map: &TransportMap) -> Result<Inversion> {
    let (h, w) = map.shape();
    let targets: Vec<[f64; 2]> = (0..h * w).map(|i| [(i % w) as f64, (i / w) as f64]).collect();
    let results = invert_points(&map.forward, &targets)?;
    let mut dx = Vec::with_capacity(h * w);
    let mut dy = Vec::with_capacity(h * w);
    let mut failed = Vec::new();
    let mut outside = Vec::new();
    let mut max_residual = 0.0f64;
    for (i, ((res, outcome), t)) in results.iter().zip(&targets).enumerate() {
        dx.push(res.point[0] - t[0]);
        dy.push(res.point[1] - t[1]);
        match outcome {
            Outcome::Converged => max_residual = max_residual.max(res.residual),
            Outcome::Outside => outside.push(i),
            Outcome::Failed => failed.push(i),
        }
    }
    Ok(Inversion {
        displacement: VectorGrid::new(h, w, dx, dy)?,
        max_residual,
        failed,
        outside,
    })
}

/// A uniform lattice after warping by the inverse map.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedLattice {
    /// Warped node positions; `dx` holds `x`, `dy` holds `y`.
    pub positions: VectorGrid,
    /// Nodes with a usable preimage.
    pub valid: Vec<bool>,
    /// Mass carried by every cell.
    pub cell_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Regridded density normalized to unit total mass.
    pub density: ScalarGrid,
    /// Regridded density relative to the uniform level, before normalization.
    pub raw: ScalarGrid,
    /// Mean of `raw`; 1 when mass is conserved.
    pub mass_ratio: f64,
    /// Warped cells with non-positive area, as `(row, col)`; they carry no
    /// mass. More than 0.1% of all cells is an error.
    pub folded: Vec<(usize, usize)>,
    pub warped: WarpedLattice,
}

fn tri_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Estimates the source density from the field: warps the uniform lattice by
/// the inverse map, assigns each warped cell `cell_mass / area` at its
/// centroid, then regrids onto an `out_shape` lattice spanning the valid
/// region. Cells with a corner outside the image of the domain carry no mass.
/// Folded cells are dropped up to the 0.1% tolerance used for inversion.
pub fn reconstruct_density(map: &TransportMap, out_shape: (usize, usize)) -> Result<Reconstruction> {
    reconstruct_density_with(map, out_shape, Regrid::default())
}

/// How warped-cell densities are moved onto the output lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Regrid {
    /// Mass of every warped triangle split exactly among the output cells it
    /// overlaps; conserves mass.
    #[default]
    Conservative,
    /// Densities at warped cell centroids, interpolated linearly over the
    /// triangulated centroid mesh.
    Barycentric,
}

/// [`reconstruct_density`] with an explicit regridding scheme.
pub fn reconstruct_density_with(map: &TransportMap, out_shape: (usize, usize), method: Regrid) -> Result<Reconstruction> {
    crate::grid::check_shape(out_shape.0, out_shape.1)?;
    let inv = invert_field(map)?;
    let (h, w) = map.shape();
    let pos = |r: usize, c: usize| {
        let (dx, dy) = inv.displacement.get(r, c);
        [c as f64 + dx, r as f64 + dy]
    };
    let mut valid = vec![true; h * w];
    for &i in inv.failed.iter().chain(&inv.outside) {
        valid[i] = false;
    }

    let cell_mass = 1.0;
    let (ch, cw) = (h - 1, w - 1);
    let mut cells: Vec<Option<([f64; 2], f64)>> = Vec::with_capacity(ch * cw);
    let mut folded = Vec::new();
    for r in 0..ch {
        for c in 0..cw {
            if ![(r, c), (r, c + 1), (r + 1, c + 1), (r + 1, c)].iter().all(|&(i, j)| valid[i * w + j]) {
                cells.push(None);
                continue;
            }
            let (p00, p01, p11, p10) = (pos(r, c), pos(r, c + 1), pos(r + 1, c + 1), pos(r + 1, c));
            let a1 = tri_area(p00, p01, p11);
            let a2 = tri_area(p00, p11, p10);
            if a1 <= 0.0 || a2 <= 0.0 {
                folded.push((r, c));
                cells.push(None);
                continue;
            }
            let area = a1 + a2;
            let centroid = |k: usize| {
                let t1 = (p00[k] + p01[k] + p11[k]) / 3.0;
                let t2 = (p00[k] + p11[k] + p10[k]) / 3.0;
                (a1 * t1 + a2 * t2) / area
            };
            cells.push(Some(([centroid(0), centroid(1)], cell_mass / area)));
        }
    }
    if folded.len() as f64 > MAX_FAILED_FRACTION * (ch * cw) as f64 {
        let (row, col) = folded[0];
        return Err(Error::FoldedCells {
            count: folded.len(),
            row,
            col,
        });
    }

    let raw = match method {
        Regrid::Barycentric => regrid(&cells, ch, cw, map.valid, out_shape)?,
        Regrid::Conservative => {
            let quads: Vec<Option<([[f64; 2]; 4], f64)>> = (0..ch * cw)
                .map(|i| {
                    let (r, c) = (i / cw, i % cw);
                    cells[i].map(|(_, d)| ([pos(r, c), pos(r, c + 1), pos(r + 1, c + 1), pos(r + 1, c)], d))
                })
                .collect();
            regrid_conservative(&quads, map.valid, out_shape)?
        }
    };
    let mass_ratio = trapezoid_mean(&raw);
    let total = raw.sum();
    let density = raw.map(|v| v / total)?;
    let mut xs = Vec::with_capacity(h * w);
    let mut ys = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let p = pos(r, c);
            xs.push(p[0]);
            ys.push(p[1]);
        }
    }
    Ok(Reconstruction {
        density,
        raw,
        mass_ratio,
        folded,
        warped: WarpedLattice {
            positions: VectorGrid::new(h, w, xs, ys)?,
            valid,
            cell_mass,
        },
    })
}

/// Mean under node-centred trapezoid weights: edge nodes own half a cell.
fn trapezoid_mean(g: &ScalarGrid) -> f64 {
    let (h, w) = g.shape();
    let weight = |i: usize, n: usize| if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
    let total = neumaier_sum((0..h * w).map(|i| weight(i / w, h) * weight(i % w, w) * g.data()[i]));
    total / ((h - 1) * (w - 1)) as f64
}

/// Area of the part of a convex polygon inside an axis-aligned box.
fn clipped_area(poly: &[[f64; 2]], lo: [f64; 2], hi: [f64; 2]) -> f64 {
    let mut cur = [[0.0; 2]; 8];
    let mut n = poly.len();
    cur[..n].copy_from_slice(poly);
    for (axis, bound, keep_above) in [(0, lo[0], true), (0, hi[0], false), (1, lo[1], true), (1, hi[1], false)] {
        let inside = |p: [f64; 2]| if keep_above { p[axis] >= bound } else { p[axis] <= bound };
        let mut next = [[0.0; 2]; 8];
        let mut m = 0;
        for i in 0..n {
            let (a, b) = (cur[i], cur[(i + 1) % n]);
            let (ia, ib) = (inside(a), inside(b));
            if ia {
                next[m] = a;
                m += 1;
            }
            if ia != ib {
                let t = (bound - a[axis]) / (b[axis] - a[axis]);
                next[m] = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                m += 1;
            }
        }
        cur = next;
        n = m;
        if n < 3 {
            return 0.0;
        }
    }
    let mut twice = 0.0;
    for i in 0..n {
        let (a, b) = (cur[i], cur[(i + 1) % n]);
        twice += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * twice.abs()
}

/// Spreads the mass of each warped quad (split into the same two triangles
/// used for its area) over the node boxes of an `out_shape` lattice spanning
/// `region`; each node gets mass over box area. Uncovered nodes copy the
/// nearest covered node.
fn regrid_conservative(quads: &[Option<([[f64; 2]; 4], f64)>], region: Region, out_shape: (usize, usize)) -> Result<ScalarGrid> {
    let (oh, ow) = out_shape;
    let sy = (region.height - 1) as f64 / (oh - 1) as f64;
    let sx = (region.width - 1) as f64 / (ow - 1) as f64;
    let (oy, ox) = (region.top as f64, region.left as f64);
    let (ymax, xmax) = ((region.height - 1) as f64, (region.width - 1) as f64);
    let node_box = |r: usize, c: usize| {
        let lo = [((c as f64 - 0.5) * sx).max(0.0), ((r as f64 - 0.5) * sy).max(0.0)];
        let hi = [((c as f64 + 0.5) * sx).min(xmax), ((r as f64 + 0.5) * sy).min(ymax)];
        (lo, hi)
    };
    let mut mass = vec![0.0; oh * ow];
    let mut touched = vec![false; oh * ow];
    for (corners, density) in quads.iter().flatten() {
        let q = corners.map(|p| [p[0] - ox, p[1] - oy]);
        for tri in [[q[0], q[1], q[2]], [q[0], q[2], q[3]]] {
            let bx0 = tri.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let bx1 = tri.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            let by0 = tri.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let by1 = tri.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            if bx1 < 0.0 || by1 < 0.0 || bx0 > xmax || by0 > ymax {
                continue;
            }
            let c0 = ((bx0 / sx - 0.5).ceil().max(0.0) as usize).min(ow - 1);
            let c1 = ((bx1 / sx + 0.5).floor().max(0.0) as usize).min(ow - 1);
            let r0 = ((by0 / sy - 0.5).ceil().max(0.0) as usize).min(oh - 1);
            let r1 = ((by1 / sy + 0.5).floor().max(0.0) as usize).min(oh - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let (lo, hi) = node_box(r, c);
                    let a = clipped_area(&tri, lo, hi);
                    if a > 0.0 {
                        mass[r * ow + c] += a * density;
                        touched[r * ow + c] = true;
                    }
                }
            }
        }
    }
    let mut out = vec![f64::NAN; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let i = r * ow + c;
            if touched[i] {
                let (lo, hi) = node_box(r, c);
                out[i] = mass[i] / ((hi[0] - lo[0]) * (hi[1] - lo[1]));
            }
        }
    }
    fill_nearest(&mut out, &mut touched, oh, ow)?;
    ScalarGrid::new(oh, ow, out)
}

/// Breadth-first fill of uncovered nodes from covered neighbours.
fn fill_nearest(out: &mut [f64], covered: &mut [bool], oh: usize, ow: usize) -> Result<()> {
    let mut queue: VecDeque<usize> = (0..oh * ow).filter(|&i| covered[i]).collect();
    if queue.is_empty() {
        return Err(Error::NonInvertible {
            failed: oh * ow,
            total: oh * ow,
            mask: vec![true; oh * ow],
        });
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / ow, i % ow);
        let mut visit = |j: usize| {
            if !covered[j] {
                covered[j] = true;
                out[j] = out[i];
                queue.push_back(j);
            }
        };
        if r > 0 {
            visit(i - ow);
        }
        if r + 1 < oh {
            visit(i + ow);
        }
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < ow {
            visit(i + 1);
        }
    }
    Ok(())
}

/// Barycentric interpolation of scattered `(point, value)` samples on an
/// `mh x mw` mesh at the nodes of an `out_shape` lattice spanning `region`.
/// Missing samples drop their triangles; nodes outside the mesh copy the
/// nearest covered node.
fn regrid(
    cells: &[Option<([f64; 2], f64)>],
    mh: usize,
    mw: usize,
    region: Region,
    out_shape: (usize, usize),
) -> Result<ScalarGrid> {
    let (oh, ow) = out_shape;
    let sy = (region.height - 1) as f64 / (oh - 1) as f64;
    let sx = (region.width - 1) as f64 / (ow - 1) as f64;
    let (oy, ox) = (region.top as f64, region.left as f64);
    let mut out = vec![f64::NAN; oh * ow];
    let mut covered = vec![false; oh * ow];
    let mut rasterize = |ia: usize, ib: usize, ic: usize| {
        let (Some((a, va)), Some((b, vb)), Some((c, vc))) = (cells[ia], cells[ib], cells[ic]) else {
            return;
        };
        let shift = |p: [f64; 2]| [p[0] - ox, p[1] - oy];
        let (a, b, c) = (shift(a), shift(b), shift(c));
        let area = tri_area(a, b, c);
        if area <= 0.0 {
            return;
        }
        let eps = 1e-12 * area.max(1.0);
        let ymin = a[1].min(b[1]).min(c[1]);
        let ymax = a[1].max(b[1]).max(c[1]);
        let xmin = a[0].min(b[0]).min(c[0]);
        let xmax = a[0].max(b[0]).max(c[0]);
        let r0 = (ymin / sy).ceil().max(0.0) as usize;
        let r1 = ((ymax / sy).floor()).min((oh - 1) as f64);
        let c0 = (xmin / sx).ceil().max(0.0) as usize;
        let c1 = ((xmax / sx).floor()).min((ow - 1) as f64);
        if r1 < 0.0 || c1 < 0.0 {
            return;
        }
        for r in r0..=r1 as usize {
            for col in c0..=c1 as usize {
                let i = r * ow + col;
                if covered[i] {
                    continue;
                }
                let q = [col as f64 * sx, r as f64 * sy];
                let wa = tri_area(q, b, c);
                let wb = tri_area(a, q, c);
                let wc = tri_area(a, b, q);
                if wa >= -eps && wb >= -eps && wc >= -eps {
                    out[i] = (wa * va + wb * vb + wc * vc) / area;
                    covered[i] = true;
                }
            }
        }
    };
    for r in 0..mh - 1 {
        for c in 0..mw - 1 {
            let (a, b, cc, d) = (r * mw + c, r * mw + c + 1, (r + 1) * mw + c + 1, (r + 1) * mw + c);
            rasterize(a, b, cc);
            rasterize(a, cc, d);
        }
    }

    fill_nearest(&mut out, &mut covered, oh, ow)?;
    ScalarGrid::new(oh, ow, out)
}

/// `sum sqrt(p q)` for two mass functions, each normalized to unit sum first.
pub fn bhattacharyya_coefficient(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            expected: (1, p.len()),
            found: (1, q.len()),
        });
    }
    for v in [p, q] {
        if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| !(**x >= 0.0)) {
            return Err(Error::NegativeInput { index, value });
        }
    }
    let (sp, sq) = (neumaier_sum(p.iter().copied()), neumaier_sum(q.iter().copied()));
    if sp <= 0.0 || sq <= 0.0 {
        return Err(Error::EmptyDensity);
    }
    let beta = neumaier_sum(p.iter().zip(q).map(|(a, b)| (a * b).sqrt())) / (sp * sq).sqrt();
    Ok(beta.clamp(0.0, 1.0))
}

/// Bhattacharyya coefficient of two density grids on the same lattice.
pub fn bhattacharyya(p: &ScalarGrid, q: &ScalarGrid) -> Result<f64> {
    p.same_shape(q)?;
    bhattacharyya_coefficient(p.data(), q.data())
}

/// Draws `n` points from the density encoded by the map: uniform points on
/// the lattice domain pulled back through `T^{-1}`. Points without a
/// preimage, or whose preimage falls outside the valid region, are rejected
/// and redrawn. Output coordinates are relative to the valid region.
pub fn draw_samples(map: &TransportMap, n: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    let (h, w) = map.shape();
    let v = map.valid;
    let (x0, y0) = (v.left as f64, v.top as f64);
    let (x1, y1) = (x0 + (v.width - 1) as f64, y0 + (v.height - 1) as f64);
    let inside = |p: [f64; 2]| p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut empty_batches = 0;
    while out.len() < n {
        let need = n - out.len();
        let batch = need.max(MIN_SAMPLE_BATCH);
        let uniforms: Vec<[f64; 2]> = (0..batch)
            .map(|_| {
                let x: f64 = rng.gen();
                let y: f64 = rng.gen();
                [x * (w - 1) as f64, y * (h - 1) as f64]
            })
            .collect();
        let results = invert_points(&map.forward, &uniforms)?;
        let before = out.len();
        out.extend(
            results
                .into_iter()
                .filter(|r| r.1 == Outcome::Converged && inside(r.0.point))
                .map(|r| [r.0.point[0] - x0, r.0.point[1] - y0])
                .take(need),
        );
        if out.len() == before {
            empty_batches += 1;
            if empty_batches == MAX_EMPTY_BATCHES {
                return Err(Error::NonInvertible {
                    failed: batch,
                    total: batch,
                    mask: vec![true; batch],
                });
            }
        } else {
            empty_batches = 0;
        }
    }
    Ok(out)
}

/// Largest displacement component normal to the lattice boundary.
pub fn boundary_normal_max(forward: &VectorGrid) -> f64 {
    let (h, w) = forward.shape();
    let mut m = 0.0f64;
    for r in 0..h {
        m = m.max(forward.get(r, 0).0.abs()).max(forward.get(r, w - 1).0.abs());
    }
    for c in 0..w {
        m = m.max(forward.get(0, c).1.abs()).max(forward.get(h - 1, c).1.abs());
    }
    m
}

/// `|I + H(g)|` at every sample.
pub fn jacobian_determinant(g: &ScalarGrid, kernel: &DerivativeKernel) -> Result<ScalarGrid> {
    h_of_g(g, kernel)?.map(|v| v + 1.0)
}

/// Largest `|T(T^{-1}(x_hat)) - x_hat|` over the lattice nodes, re-evaluated
/// from the inverse displacement.
pub fn round_trip_residual(map: &TransportMap, inv: &Inversion) -> f64 {
    let (h, w) = map.shape();
    (0..h * w)
        .filter(|i| !inv.failed.contains(i) && !inv.outside.contains(i))
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let (dx, dy) = inv.displacement.get(r, c);
            let t = map.apply([c as f64 + dx, r as f64 + dy]);
            (t[0] - c as f64).abs().max((t[1] - r as f64).abs())
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffops::{dense, Axis};

    fn field_from_fn(h: usize, w: usize, f: impl Fn(f64, f64) -> (f64, f64)) -> VectorGrid {
        let mut dx = Vec::new();
        let mut dy = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let (a, b) = f(c as f64, r as f64);
                dx.push(a);
                dy.push(b);
            }
        }
        VectorGrid::new(h, w, dx, dy).unwrap()
    }

    #[test]
    fn constant_potential_gives_identity() {
        let g = ScalarGrid::filled(12, 12, 4.0).unwrap();
        let map = forward_field(&g, &DerivativeKernel::farid5()).unwrap();
        assert!(map.forward().max_abs_component() < 1e-14);
        assert_eq!(map.apply([3.5, 2.25]), [3.5, 2.25]);
    }

    #[test]
    fn quadratic_potential_gradient() {
        let c = 0.05;
        let g = ScalarGrid::from_fn(16, 16, |r, col| c * ((r * r + col * col) as f64)).unwrap();
        let map = forward_field(&g, &DerivativeKernel::farid5()).unwrap();
        for r in 2..14 {
            for col in 2..14 {
                let (fx, fy) = map.forward().get(r, col);
                assert!((fx - 2.0 * c * col as f64).abs() < 1e-8);
                assert!((fy - 2.0 * c * r as f64).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let k = DerivativeKernel::farid5();
        let g = ScalarGrid::from_fn(11, 13, |r, c| ((r as f64) * 0.3).sin() * ((c as f64) * 0.2).cos()).unwrap();
        let map = forward_field(&g, &k).unwrap();
        let mx = dense::pass_matrix(&k, Axis::X, 11, 13).mul(g.data());
        let my = dense::pass_matrix(&k, Axis::Y, 11, 13).mul(g.data());
        for i in 0..11 * 13 {
            assert!((map.forward().dx()[i] - mx[i]).abs() < 1e-13);
            assert!((map.forward().dy()[i] - my[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn invert_zero_and_constant_fields() {
        let zero = TransportMap::from_field(VectorGrid::zeros(9, 9).unwrap());
        let inv = invert_field(&zero).unwrap();
        assert_eq!(inv.displacement.max_abs_component(), 0.0);

        let shift = TransportMap::from_field(field_from_fn(9, 9, |_, _| (1.5, -0.75)));
        let inv = invert_field(&shift).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                let (dx, dy) = inv.displacement.get(r, c);
                assert!((dx + 1.5).abs() < 1e-12 && (dy - 0.75).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invert_linear_field() {
        let alpha = 0.2;
        let map = TransportMap::from_field(field_from_fn(21, 21, |x, y| (alpha * x, alpha * y)));
        let inv = invert_field(&map).unwrap();
        for r in 0..21 {
            for c in 0..21 {
                let (dx, dy) = inv.displacement.get(r, c);
                assert!((dx + alpha / (1.0 + alpha) * c as f64).abs() < 1e-6);
                assert!((dy + alpha / (1.0 + alpha) * r as f64).abs() < 1e-6);
            }
        }
        assert!(round_trip_residual(&map, &inv) < 1e-8);
    }

    #[test]
    fn invert_strongly_compressive_field() {
        // T(x) = x + grad g for g = -0.45 (x - c)^2: factor 0.1 contraction,
        // far outside the contraction range of plain fixed-point iteration
        let c = 10.0;
        let map = TransportMap::from_field(field_from_fn(21, 21, |x, y| (-0.9 * (x - c), -0.9 * (y - c))));
        let inv = invert_field(&map).unwrap();
        assert!(inv.failed.is_empty());
        assert!(round_trip_residual(&map, &inv) < 1e-6);
    }

    #[test]
    fn non_invertible_field_is_reported() {
        // a mirror in x reverses orientation
        let map = TransportMap::from_field(field_from_fn(15, 15, |x, _| (-2.0 * (x - 7.0), 0.0)));
        match reconstruct_density(&map, (15, 15)) {
            Err(Error::FoldedCells { .. }) | Err(Error::NonInvertible { .. }) => {}
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn identity_reconstruction_is_uniform() {
        let map = TransportMap::from_field(VectorGrid::zeros(17, 23).unwrap());
        let rec = reconstruct_density(&map, (17, 23)).unwrap();
        let expected = 1.0 / (17.0 * 23.0);
        assert!(rec.density.data().iter().all(|v| (v - expected).abs() < 1e-10 * expected));
        assert!((rec.mass_ratio - 1.0).abs() < 1e-12);
        assert!((rec.density.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dilation_quadruples_density_on_the_contracted_image() {
        // T(x) = c + 2 (x - c): the uniform lattice pulls back to half size,
        // so the source density is 4x uniform there
        let n = 33;
        let c = 16.0;
        let map = TransportMap::from_field(field_from_fn(n, n, |x, y| (x - c, y - c)));
        let rec = reconstruct_density(&map, (n, n)).unwrap();
        for r in 10..=22 {
            for col in 10..=22 {
                assert!((rec.raw.get(r, col) - 4.0).abs() < 1e-9, "({r},{col}) {}", rec.raw.get(r, col));
            }
        }
    }

    #[test]
    fn bhattacharyya_cases() {
        let p = [0.1, 0.2, 0.3, 0.4];
        assert!((bhattacharyya_coefficient(&p, &p).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(bhattacharyya_coefficient(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(
            bhattacharyya_coefficient(&[1.0, -0.1], &[1.0, 1.0]),
            Err(Error::NegativeInput { index: 1, .. })
        ));
        let a = ScalarGrid::filled(3, 3, 1.0).unwrap();
        let b = ScalarGrid::filled(3, 4, 1.0).unwrap();
        assert!(matches!(bhattacharyya(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn bhattacharyya_of_shifted_gaussians() {
        // unit-variance normals two apart: exp(-d^2 / 8)
        let n = 1024;
        let (lo, hi) = (-10.0, 12.0);
        let step = (hi - lo) / (n - 1) as f64;
        let pdf = |x: f64, m: f64| (-(x - m) * (x - m) / 2.0).exp();
        let p: Vec<f64> = (0..n).map(|i| pdf(lo + i as f64 * step, 0.0)).collect();
        let q: Vec<f64> = (0..n).map(|i| pdf(lo + i as f64 * step, 2.0)).collect();
        let beta = bhattacharyya_coefficient(&p, &q).unwrap();
        assert!((beta - (-0.5f64).exp()).abs() < 1e-3);
        // quadrature cross-check of the closed form
        let quad: f64 = (0..200_000)
            .map(|i| {
                let x = -10.0 + (i as f64 + 0.5) * 22.0 / 200_000.0;
                (pdf(x, 0.0) * pdf(x, 2.0)).sqrt() / (2.0 * std::f64::consts::PI).sqrt()
            })
            .sum::<f64>()
            * 22.0
            / 200_000.0;
        assert!((quad - (-0.5f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn identity_samples_are_the_raw_uniforms() {
        let map = TransportMap::from_field(VectorGrid::zeros(11, 21).unwrap());
        let pts = draw_samples(&map, 100, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in pts {
            let x: f64 = rng.gen();
            let y: f64 = rng.gen();
            assert_eq!(p, [x * 20.0, y * 10.0]);
        }
        assert!(draw_samples(&map, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn sampling_is_deterministic() {
        let map = TransportMap::from_field(field_from_fn(21, 21, |x, y| (0.1 * (x - 10.0), 0.05 * (y - 10.0))));
        let a = draw_samples(&map, 1000, 42).unwrap();
        let b = draw_samples(&map, 1000, 42).unwrap();
        assert_eq!(a, b);
        let c = draw_samples(&map, 1000, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn boundary_normal_and_jacobian_helpers() {
        let f = field_from_fn(5, 5, |x, y| (if x == 0.0 { 0.3 } else { 0.0 }, if y == 4.0 { -0.7 } else { 0.0 }));
        assert_eq!(boundary_normal_max(&f), 0.7);
        let g = ScalarGrid::from_fn(12, 12, |r, c| 0.1 * ((r * r + c * c) as f64)).unwrap();
        let j = jacobian_determinant(&g, &DerivativeKernel::farid5()).unwrap();
        assert!((j.get(6, 6) - 1.44).abs() < 1e-10);
    }
}
