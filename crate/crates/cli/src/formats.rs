//! Plain-text grid and field files.
//!
//! ```text
//! MPGRID 1 <height> <width>
//! <width space-separated floats>      (height lines)
//! ```
//!
//! Field files use the header `MPFIELD 1` and `dx,dy` pairs. Floats are
//! written with 17 significant digits, so write, read, write is byte-exact.

use manifold_potential::grid::{ScalarGrid, VectorGrid};

use crate::error::{CliError, CliResult};

const GRID_MAGIC: &str = "MPGRID";
const FIELD_MAGIC: &str = "MPFIELD";
const VERSION: &str = "1";

fn push_float(out: &mut String, v: f64) {
    use std::fmt::Write;
    write!(out, "{v:.16e}").expect("writing to a String");
}

pub fn format_grid(g: &ScalarGrid) -> String {
    let (h, w) = g.shape();
    let mut out = String::with_capacity(h * w * 24 + 32);
    out.push_str(&format!("{GRID_MAGIC} {VERSION} {h} {w}\n"));
    for r in 0..h {
        for (c, &v) in g.row(r).iter().enumerate() {
            if c > 0 {
                out.push(' ');
            }
            push_float(&mut out, v);
        }
        out.push('\n');
    }
    out
}

pub fn format_field(f: &VectorGrid) -> String {
    let (h, w) = f.shape();
    let mut out = String::with_capacity(h * w * 48 + 32);
    out.push_str(&format!("{FIELD_MAGIC} {VERSION} {h} {w}\n"));
    for r in 0..h {
        for c in 0..w {
            if c > 0 {
                out.push(' ');
            }
            let (dx, dy) = f.get(r, c);
            push_float(&mut out, dx);
            out.push(',');
            push_float(&mut out, dy);
        }
        out.push('\n');
    }
    out
}

fn parse_header(line: Option<&str>, magic: &str) -> CliResult<(usize, usize)> {
    let line = line.ok_or_else(|| CliError::parse("empty file"))?;
    let parts: Vec<&str> = line.split(' ').collect();
    if parts.len() != 4 || parts[0] != magic || parts[1] != VERSION {
        return Err(CliError::parse(format!(
            "bad header {line:?}, expected \"{magic} {VERSION} <height> <width>\""
        )));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| CliError::parse(format!("bad dimension {s:?} in header")))
    };
    let (h, w) = (dim(parts[2])?, dim(parts[3])?);
    if h < 2 || w < 2 {
        return Err(CliError::parse(format!("degenerate shape {h}x{w} in header")));
    }
    Ok((h, w))
}

fn parse_float(tok: &str, line: usize) -> CliResult<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| CliError::parse(format!("line {line}: bad number {tok:?}")))?;
    if !v.is_finite() {
        return Err(CliError::parse(format!("line {line}: non-finite value {tok:?}")));
    }
    Ok(v)
}

/// Splits the body into exactly `h` rows of exactly `w` tokens.
fn body_rows<'a>(lines: &mut impl Iterator<Item = &'a str>, h: usize, w: usize) -> CliResult<Vec<Vec<&'a str>>> {
    let mut rows = Vec::with_capacity(h);
    for r in 0..h {
        let line = lines
            .next()
            .ok_or_else(|| CliError::parse(format!("expected {h} rows, found {r}")))?;
        let toks: Vec<&str> = line.split_ascii_whitespace().collect();
        if toks.len() != w {
            return Err(CliError::parse(format!(
                "line {}: expected {w} values, found {}",
                r + 2,
                toks.len()
            )));
        }
        rows.push(toks);
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(CliError::parse(format!("more than {h} rows in body")));
    }
    Ok(rows)
}

pub fn parse_grid(text: &str) -> CliResult<ScalarGrid> {
    let mut lines = text.split('\n');
    let (h, w) = parse_header(lines.next(), GRID_MAGIC)?;
    let rows = body_rows(&mut lines, h, w)?;
    let mut data = Vec::with_capacity(h * w);
    for (r, toks) in rows.iter().enumerate() {
        for tok in toks {
            data.push(parse_float(tok, r + 2)?);
        }
    }
    Ok(ScalarGrid::new(h, w, data)?)
}

pub fn parse_field(text: &str) -> CliResult<VectorGrid> {
    let mut lines = text.split('\n');
    let (h, w) = parse_header(lines.next(), FIELD_MAGIC)?;
    let rows = body_rows(&mut lines, h, w)?;
    let mut dx = Vec::with_capacity(h * w);
    let mut dy = Vec::with_capacity(h * w);
    for (r, toks) in rows.iter().enumerate() {
        for tok in toks {
            let (a, b) = tok
                .split_once(',')
                .ok_or_else(|| CliError::parse(format!("line {}: expected dx,dy pair, found {tok:?}", r + 2)))?;
            dx.push(parse_float(a, r + 2)?);
            dy.push(parse_float(b, r + 2)?);
        }
    }
    Ok(VectorGrid::new(h, w, dx, dy)?)
}

fn read_text(path: &std::path::Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("reading {}: {e}", path.display())))?;
    String::from_utf8(bytes).map_err(|_| CliError::parse(format!("{} is not UTF-8", path.display())))
}

pub fn read_grid(path: &std::path::Path) -> CliResult<ScalarGrid> {
    parse_grid(&read_text(path)?).map_err(|e| CliError::parse(format!("{}: {}", path.display(), e.message)))
}

pub fn read_field(path: &std::path::Path) -> CliResult<VectorGrid> {
    parse_field(&read_text(path)?).map_err(|e| CliError::parse(format!("{}: {}", path.display(), e.message)))
}
