//! Regular-lattice scalar and vector fields.
//!
//! Storage is row-major with `(row, col) = (y, x)` indexing everywhere. All
//! coordinates, derivatives and displacements are in lattice units (sample
//! spacing 1). Lattices are node-centred: sample `(r, c)` sits at `(x, y) =
//! (c, r)`.

use crate::error::{Error, Result};

/// Samples of a scalar field on a regular `height x width` lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(height, width)?;
        if data.len() != height * width {
            return Err(Error::DataLength {
                height,
                width,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    /// Builds a grid by evaluating `f(row, col)` at every sample.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        check_shape(height, width)?;
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    /// Internal constructor for results of operations that preserve finiteness.
    pub(crate) fn from_parts(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn same_shape(&self, other: &ScalarGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }

    /// Applies `f` samplewise. Fails if any result is non-finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ScalarGrid> {
        Self::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        neumaier_sum(self.data.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &ScalarGrid) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    /// Copies the `height x width` window whose top-left sample is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ScalarGrid> {
        check_shape(height, width)?;
        if top + height > self.height || left + width > self.width {
            return Err(Error::ShapeMismatch {
                expected: (self.height, self.width),
                found: (top + height, left + width),
            });
        }
        let mut data = Vec::with_capacity(height * width);
        for r in top..top + height {
            data.extend_from_slice(&self.data[r * self.width + left..r * self.width + left + width]);
        }
        Ok(Self::from_parts(height, width, data))
    }

    /// Extends the grid by `pad` samples per side, replicating edge samples.
    pub fn pad_replicate(&self, pad: usize) -> ScalarGrid {
        let h = self.height + 2 * pad;
        let w = self.width + 2 * pad;
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            let sr = r.saturating_sub(pad).min(self.height - 1);
            for c in 0..w {
                let sc = c.saturating_sub(pad).min(self.width - 1);
                data.push(self.data[sr * self.width + sc]);
            }
        }
        Self::from_parts(h, w, data)
    }

    /// Bilinear interpolation at lattice coordinates `(y, x)`; points outside
    /// the lattice take the value of the nearest edge.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> f64 {
        let (r0, r1, ty) = bracket(y, self.height);
        let (c0, c1, tx) = bracket(x, self.width);
        let top = lerp(self.get(r0, c0), self.get(r0, c1), tx);
        let bottom = lerp(self.get(r1, c0), self.get(r1, c1), tx);
        lerp(top, bottom, ty)
    }
}

/// Samples of a 2-vector field on a regular lattice, stored as separate
/// `dx` (along columns) and `dy` (along rows) component planes.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorGrid {
    height: usize,
    width: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl VectorGrid {
    pub fn new(height: usize, width: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        check_shape(height, width)?;
        for comp in [&dx, &dy] {
            if comp.len() != height * width {
                return Err(Error::DataLength {
                    height,
                    width,
                    len: comp.len(),
                });
            }
            if let Some(index) = comp.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
        }
        Ok(Self { height, width, dx, dy })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width], vec![0.0; height * width])
    }

    /// Builds a field from its two component grids.
    pub fn from_components(dx: ScalarGrid, dy: ScalarGrid) -> Result<Self> {
        dx.same_shape(&dy)?;
        let (h, w) = dx.shape();
        Ok(Self {
            height: h,
            width: w,
            dx: dx.into_data(),
            dy: dy.into_data(),
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    /// `(dx, dy)` at a lattice sample.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> (f64, f64) {
        let i = row * self.width + col;
        (self.dx[i], self.dy[i])
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<VectorGrid> {
        let dx = ScalarGrid::from_parts(self.height, self.width, self.dx.clone());
        let dy = ScalarGrid::from_parts(self.height, self.width, self.dy.clone());
        Self::from_components(dx.crop(top, left, height, width)?, dy.crop(top, left, height, width)?)
    }

    pub fn max_norm(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .fold(0.0, |m, (a, b)| m.max(a.hypot(*b)))
    }

    pub fn max_abs_component(&self) -> f64 {
        self.dx
            .iter()
            .chain(&self.dy)
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Bilinear interpolation of both components at `(y, x)`, together with the
    /// 2x2 Jacobian of the interpolant `[[ddx/dx, ddx/dy], [ddy/dx, ddy/dy]]`.
    /// Outside the lattice the field is extended by its edge values.
    pub fn sample_with_jacobian(&self, y: f64, x: f64) -> ((f64, f64), [[f64; 2]; 2]) {
        let (r0, r1, ty) = bracket(y, self.height);
        let (c0, c1, tx) = bracket(x, self.width);
        // clamped coordinates have zero derivative along the clamped axis
        let ky = if y <= 0.0 || y >= (self.height - 1) as f64 { 0.0 } else { 1.0 };
        let kx = if x <= 0.0 || x >= (self.width - 1) as f64 { 0.0 } else { 1.0 };
        let w = self.width;
        let eval = |comp: &[f64]| {
            let a = comp[r0 * w + c0];
            let b = comp[r0 * w + c1];
            let c = comp[r1 * w + c0];
            let d = comp[r1 * w + c1];
            let top = a + tx * (b - a);
            let bottom = c + tx * (d - c);
            let value = top + ty * (bottom - top);
            let ddx = kx * ((b - a) + ty * ((d - c) - (b - a)));
            let ddy = ky * (bottom - top);
            (value, ddx, ddy)
        };
        let (fx, fxx, fxy) = eval(&self.dx);
        let (fy, fyx, fyy) = eval(&self.dy);
        ((fx, fy), [[fxx, fxy], [fyx, fyy]])
    }
}

/// A normalized density together with the level of the uniform density over
/// the same lattice support.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPair {
    pub p: ScalarGrid,
    pub u_level: f64,
}

/// Scales a nonnegative grid so its lattice mean is 1, which is then also the
/// uniform level `u`.
pub fn normalize_density(raw: &ScalarGrid) -> Result<DensityPair> {
    for (i, &v) in raw.data().iter().enumerate() {
        if v < 0.0 {
            return Err(Error::InvalidDensity {
                row: i / raw.width(),
                col: i % raw.width(),
                value: v,
            });
        }
    }
    let mean = raw.mean();
    if mean <= 0.0 {
        return Err(Error::EmptyDensity);
    }
    // already normalized up to summation rounding: keep bits unchanged
    let p = if (mean - 1.0).abs() <= 1e-13 {
        raw.clone()
    } else {
        raw.map(|v| v / mean)?
    };
    Ok(DensityPair { p, u_level: 1.0 })
}

/// Normalized change in density, `p / u - 1`.
pub fn compute_rho(d: &DensityPair) -> ScalarGrid {
    let u = d.u_level;
    let data = d.p.data().iter().map(|&v| v / u - 1.0).collect();
    ScalarGrid::from_parts(d.p.height(), d.p.width(), data)
}

/// Bilinear resampling over the unit-square parameterization of `src`: the
/// corner samples of source and target coincide.
pub fn resample_bilinear(src: &ScalarGrid, out_h: usize, out_w: usize) -> Result<ScalarGrid> {
    check_shape(out_h, out_w)?;
    let sy = (src.height() - 1) as f64 / (out_h - 1) as f64;
    let sx = (src.width() - 1) as f64 / (out_w - 1) as f64;
    let mut data = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let y = r as f64 * sy;
        for c in 0..out_w {
            data.push(src.sample_bilinear(y, c as f64 * sx));
        }
    }
    Ok(ScalarGrid::from_parts(out_h, out_w, data))
}

pub(crate) fn check_shape(height: usize, width: usize) -> Result<()> {
    if height < 2 || width < 2 {
        return Err(Error::DegenerateShape { height, width });
    }
    Ok(())
}

/// Lower/upper sample indices and fractional offset for coordinate `t` on an
/// axis of `n` samples, clamped to the lattice.
#[inline]
fn bracket(t: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, max) };
    let i0 = (t.floor() as usize).min(n - 2);
    (i0, i0 + 1, t - i0 as f64)
}

/// `a + t (b - a)`, clamped to the closed segment between `a` and `b`.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let v = a + t * (b - a);
    if a <= b {
        v.clamp(a, b)
    } else {
        v.clamp(b, a)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    neumaier_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

/// Compensated summation.
pub(crate) fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
