//! Contours, arrow tables and grayscale previews. Coordinates are lattice
//! units: `x` is the column, `y` the row.

use std::collections::HashMap;
use std::fmt::Write;

use manifold_potential::grid::{ScalarGrid, VectorGrid};

use crate::error::{CliError, CliResult};

pub const CONTOUR_LEVELS: usize = 5;
/// Arrows per side along the longer axis.
const ARROWS_PER_SIDE: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub level: f64,
    pub points: Vec<[f64; 2]>,
    pub closed: bool,
}

/// `n` equally spaced levels strictly between the grid's extremes; none for a
/// constant grid.
pub fn equal_levels(g: &ScalarGrid, n: usize) -> Vec<f64> {
    let (lo, hi) = (g.min(), g.max());
    if !(hi > lo) {
        return Vec::new();
    }
    (1..=n).map(|k| lo + (hi - lo) * k as f64 / (n + 1) as f64).collect()
}

/// Identifies a lattice edge: horizontal edges run from `(r, c)` to
/// `(r, c + 1)`, vertical ones from `(r, c)` to `(r + 1, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Edge {
    H(usize, usize),
    V(usize, usize),
}

fn crossing(g: &ScalarGrid, e: Edge, level: f64) -> [f64; 2] {
    let (a, b, r, c, horizontal) = match e {
        Edge::H(r, c) => (g.get(r, c), g.get(r, c + 1), r, c, true),
        Edge::V(r, c) => (g.get(r, c), g.get(r + 1, c), r, c, false),
    };
    let t = (level - a) / (b - a);
    if horizontal {
        [c as f64 + t, r as f64]
    } else {
        [c as f64, r as f64 + t]
    }
}

/// Marching squares for one level, joined into polylines. Closed curves
/// repeat their first point at the end.
pub fn contour(g: &ScalarGrid, level: f64) -> Vec<Polyline> {
    let (h, w) = g.shape();
    let above = |r: usize, c: usize| g.get(r, c) > level;
    let mut segments: Vec<(Edge, Edge)> = Vec::new();
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let (tl, tr, br, bl) = (above(r, c), above(r, c + 1), above(r + 1, c + 1), above(r + 1, c));
            let (top, right, bottom, left) = (Edge::H(r, c), Edge::V(r, c + 1), Edge::H(r + 1, c), Edge::V(r, c));
            let case = (tl as u8) << 3 | (tr as u8) << 2 | (br as u8) << 1 | bl as u8;
            match case {
                0 | 15 => {}
                1 | 14 => segments.push((left, bottom)),
                2 | 13 => segments.push((bottom, right)),
                3 | 12 => segments.push((left, right)),
                4 | 11 => segments.push((top, right)),
                6 | 9 => segments.push((top, bottom)),
                7 | 8 => segments.push((left, top)),
                5 | 10 => {
                    // Saddle: the cell centre decides which corners connect.
                    let centre = 0.25 * (g.get(r, c) + g.get(r, c + 1) + g.get(r + 1, c + 1) + g.get(r + 1, c)) > level;
                    if centre == tl {
                        segments.push((left, bottom));
                        segments.push((top, right));
                    } else {
                        segments.push((left, top));
                        segments.push((bottom, right));
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    let mut adjacency: HashMap<Edge, Vec<usize>> = HashMap::new();
    for (i, &(a, b)) in segments.iter().enumerate() {
        adjacency.entry(a).or_default().push(i);
        adjacency.entry(b).or_default().push(i);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let walk = |start_seg: usize, start: Edge, used: &mut Vec<bool>| -> (Vec<Edge>, bool) {
        let mut chain = vec![start];
        let (mut seg, mut at) = (start_seg, start);
        loop {
            used[seg] = true;
            let (a, b) = segments[seg];
            let next = if a == at { b } else { a };
            chain.push(next);
            if next == start {
                return (chain, true);
            }
            match adjacency[&next].iter().find(|&&s| !used[s]) {
                Some(&s) => {
                    seg = s;
                    at = next;
                }
                None => return (chain, false),
            }
        }
    };
    // Open curves start at boundary edges, which touch a single segment.
    // Iterating segments in order keeps the output deterministic.
    for i in 0..segments.len() {
        for end in [segments[i].0, segments[i].1] {
            if !used[i] && adjacency[&end].len() == 1 {
                let (chain, closed) = walk(i, end, &mut used);
                lines.push((chain, closed));
            }
        }
    }
    for i in 0..segments.len() {
        if !used[i] {
            let (chain, closed) = walk(i, segments[i].0, &mut used);
            lines.push((chain, closed));
        }
    }
    lines
        .into_iter()
        .map(|(chain, closed)| Polyline {
            level,
            points: chain.iter().map(|&e| crossing(g, e, level)).collect(),
            closed,
        })
        .collect()
}

/// Contours at `CONTOUR_LEVELS` equal levels as `level,poly_id,x,y` rows.
pub fn contours_csv(g: &ScalarGrid, levels: &[f64]) -> String {
    let mut out = String::from("level,poly_id,x,y\n");
    let mut id = 0usize;
    for &level in levels {
        for line in contour(g, level) {
            for p in &line.points {
                writeln!(out, "{level:.10e},{id},{:.6},{:.6}", p[0], p[1]).expect("writing to a String");
            }
            id += 1;
        }
    }
    out
}

/// Subsampled arrows `x,y,u,v,magnitude`: `(u, v)` is the displacement scaled
/// so the longest arrow spans 0.9 of the sampling step; `magnitude` is the
/// unscaled length.
pub fn arrows_csv(f: &VectorGrid) -> String {
    let (h, w) = f.shape();
    let step = h.max(w).div_ceil(ARROWS_PER_SIDE).max(1);
    let offset = |n: usize| ((n - 1) % step) / 2;
    let mut picks = Vec::new();
    let mut longest = 0.0f64;
    for r in (offset(h)..h).step_by(step) {
        for c in (offset(w)..w).step_by(step) {
            let (dx, dy) = f.get(r, c);
            longest = longest.max(dx.hypot(dy));
            picks.push((r, c, dx, dy));
        }
    }
    let scale = if longest > 0.0 { 0.9 * step as f64 / longest } else { 0.0 };
    let mut out = String::from("x,y,u,v,magnitude\n");
    for (r, c, dx, dy) in picks {
        writeln!(out, "{c},{r},{:.6e},{:.6e},{:.6e}", dx * scale, dy * scale, dx.hypot(dy)).expect("writing to a String");
    }
    out
}

/// Binary 8-bit PGM, min mapped to 0 and max to 255. A constant grid is black.
pub fn pgm(g: &ScalarGrid) -> Vec<u8> {
    let (h, w) = g.shape();
    let (lo, hi) = (g.min(), g.max());
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(g.data().iter().map(|&v| {
        if span > 0.0 {
            (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Reads a binary PGM written by [`pgm`] back as values in `[0, 1]`.
pub fn read_pgm(bytes: &[u8]) -> CliResult<ScalarGrid> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CliError::parse("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| CliError::parse(format!("bad PGM field {s:?}")));
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return Err(CliError::parse("expected an 8-bit P5 PGM"));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..).filter(|b| b.len() == w * h).ok_or_else(|| CliError::parse("PGM body length mismatch"))?;
    Ok(ScalarGrid::new(h, w, body.iter().map(|&b| b as f64 / 255.0).collect())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(n: usize, sigma: f64) -> ScalarGrid {
        let c = (n - 1) as f64 / 2.0;
        ScalarGrid::from_fn(n, n, |r, k| {
            let (x, y) = (k as f64 - c, r as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .unwrap()
    }

    fn area_perimeter(pts: &[[f64; 2]]) -> (f64, f64) {
        let mut a = 0.0;
        let mut p = 0.0;
        for w in pts.windows(2) {
            a += w[0][0] * w[1][1] - w[1][0] * w[0][1];
            p += (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        }
        (0.5 * a.abs(), p)
    }

    #[test]
    fn constant_grid_has_no_contours() {
        let g = ScalarGrid::filled(10, 12, 3.5).unwrap();
        assert!(equal_levels(&g, 5).is_empty());
        assert_eq!(contours_csv(&g, &equal_levels(&g, 5)), "level,poly_id,x,y\n");
    }

    #[test]
    fn isotropic_gaussian_contours_are_round_and_closed() {
        let g = gaussian(81, 12.0);
        let levels = equal_levels(&g, CONTOUR_LEVELS);
        assert_eq!(levels.len(), 5);
        for &level in &levels {
            let lines = contour(&g, level);
            assert_eq!(lines.len(), 1, "level {level}");
            let line = &lines[0];
            assert!(line.closed);
            assert_eq!(line.points.first(), line.points.last());
            let (a, p) = area_perimeter(&line.points);
            let circularity = 4.0 * std::f64::consts::PI * a / (p * p);
            assert!(circularity > 0.95, "level {level}: circularity {circularity}");
            // Oracle: the level set of exp(-r^2 / 2 s^2) is a circle of radius
            // s * sqrt(-2 ln level).
            let radius = 12.0 * (-2.0 * level.ln()).sqrt();
            let expect = std::f64::consts::PI * radius * radius;
            assert!((a - expect).abs() / expect < 0.01, "area {a} vs {expect}");
        }
    }

    #[test]
    fn crossings_lie_on_the_level() {
        let g = ScalarGrid::from_fn(20, 30, |r, c| 0.3 * c as f64 + 0.1 * r as f64).unwrap();
        for line in contour(&g, 4.05) {
            assert!(!line.closed);
            for p in &line.points {
                assert!((0.3 * p[0] + 0.1 * p[1] - 4.05).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saddle_and_multiple_components() {
        // Two bumps give two closed curves at a high level and one at a low one.
        let g = ScalarGrid::from_fn(40, 60, |r, c| {
            let b = |cx: f64| (-((c as f64 - cx).powi(2) + (r as f64 - 19.5).powi(2)) / 50.0).exp();
            b(20.0) + b(40.0)
        })
        .unwrap();
        let high = contour(&g, 0.8);
        assert_eq!(high.len(), 2);
        assert!(high.iter().all(|l| l.closed));
        let low = contour(&g, 0.2);
        assert_eq!(low.len(), 1);
        let csv = contours_csv(&g, &[0.2, 0.8]);
        let ids: std::collections::BTreeSet<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn pgm_reloads_within_quantization() {
        let g = gaussian(33, 6.0).map(|v| 2.0 * v - 0.5).unwrap();
        let bytes = pgm(&g);
        assert!(bytes.starts_with(b"P5\n33 33\n255\n"));
        let back = read_pgm(&bytes).unwrap();
        let (lo, hi) = (g.min(), g.max());
        for (a, b) in g.data().iter().zip(back.data()) {
            assert!(((a - lo) / (hi - lo) - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn arrows_are_scaled_to_the_step() {
        let f = VectorGrid::from_components(
            ScalarGrid::from_fn(48, 48, |_, c| c as f64).unwrap(),
            ScalarGrid::zeros(48, 48).unwrap(),
        )
        .unwrap();
        let csv = arrows_csv(&f);
        let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(|l| l.split(',').map(|t| t.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 24 * 24);
        let longest = rows.iter().map(|r| r[2].hypot(r[3])).fold(0.0, f64::max);
        assert!((longest - 1.8).abs() < 1e-5);
        for r in &rows {
            assert_eq!(r[4], r[0]);
        }
        let zero = arrows_csv(&VectorGrid::zeros(10, 10).unwrap());
        assert!(zero.lines().skip(1).all(|l| l.contains("0.000000e0,0.000000e0,0.000000e0")));
    }
}
