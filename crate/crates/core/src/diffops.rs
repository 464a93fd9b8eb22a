//! Separable derivative convolutions with boundary replication.
//!
//! Every operator is built from two "passes". A pass along `x` applies the
//! first-derivative taps along each row and the prefilter along each column;
//! a pass along `y` does the opposite. Second derivatives are two passes:
//! `XX = Px Px`, `YY = Py Py`, `XY = Py Px`. Filters are correlations,
//! `out[i] = sum_k w[k] in[clamp(i + k)]` with `k = -r..=r`, so samples past
//! the edge repeat the boundary value.
//!
//! `apply_adjoint` is the exact transpose of `apply`, boundary rows included.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::ScalarGrid;

/// Raw 5-tap matched prefilter / first-derivative pair (Farid & Simoncelli),
/// before moment normalization.
const FARID5_PREFILTER: [f64; 5] = [0.037659, 0.249153, 0.426375, 0.249153, 0.037659];
const FARID5_DERIVATIVE: [f64; 5] = [-0.109604, -0.276691, 0.0, 0.276691, 0.109604];

/// Matched interpolator / differentiator taps, indexed `k = -r..=r`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeKernel {
    prefilter: Vec<f64>,
    d1: Vec<f64>,
}

impl DerivativeKernel {
    /// Builds a kernel after rescaling so that the prefilter sums to one and
    /// the derivative taps have unit first moment.
    pub fn new(prefilter: &[f64], d1: &[f64]) -> Result<Self> {
        if prefilter.len() != d1.len() || prefilter.len() % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel taps must share an odd length, got {} and {}",
                prefilter.len(),
                d1.len()
            )));
        }
        let r = (prefilter.len() / 2) as isize;
        let dc: f64 = prefilter.iter().sum();
        let moment: f64 = d1
            .iter()
            .enumerate()
            .map(|(i, w)| (i as isize - r) as f64 * w)
            .sum();
        if dc.abs() < 1e-12 || moment.abs() < 1e-12 {
            return Err(Error::InvalidConfig("kernel has no DC gain or no first moment".into()));
        }
        let n = prefilter.len();
        for i in 0..n / 2 {
            let j = n - 1 - i;
            if (prefilter[i] - prefilter[j]).abs() > 1e-12 || (d1[i] + d1[j]).abs() > 1e-12 {
                return Err(Error::InvalidConfig(
                    "prefilter must be symmetric and derivative antisymmetric".into(),
                ));
            }
        }
        if d1[n / 2].abs() > 1e-12 {
            return Err(Error::InvalidConfig("derivative centre tap must be zero".into()));
        }
        Ok(Self {
            prefilter: prefilter.iter().map(|w| w / dc).collect(),
            d1: d1.iter().map(|w| w / moment).collect(),
        })
    }

    /// The default 5-tap optimal pair.
    pub fn farid5() -> Self {
        Self::new(&FARID5_PREFILTER, &FARID5_DERIVATIVE).expect("valid built-in kernel")
    }

    /// Plain central differences; for debugging.
    pub fn central3() -> Self {
        Self::new(&[0.0, 1.0, 0.0], &[-0.5, 0.0, 0.5]).expect("valid built-in kernel")
    }

    pub fn prefilter(&self) -> &[f64] {
        &self.prefilter
    }

    pub fn d1(&self) -> &[f64] {
        &self.d1
    }

    /// Number of taps.
    pub fn len(&self) -> usize {
        self.d1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d1.is_empty()
    }

    pub fn half_support(&self) -> usize {
        self.d1.len() / 2
    }

    fn check(&self, g: &ScalarGrid) -> Result<()> {
        if g.height() < self.len() || g.width() < self.len() {
            return Err(Error::GridTooSmall {
                height: g.height(),
                width: g.width(),
                support: self.len(),
            });
        }
        Ok(())
    }

    /// Single first-derivative pass: derivative taps along `axis`, prefilter
    /// along the other axis.
    pub fn pass(&self, axis: Axis, g: &ScalarGrid) -> Result<ScalarGrid> {
        self.check(g)?;
        Ok(self.pass_unchecked(axis, g, false))
    }

    /// Exact transpose of [`DerivativeKernel::pass`].
    pub fn pass_adjoint(&self, axis: Axis, g: &ScalarGrid) -> Result<ScalarGrid> {
        self.check(g)?;
        Ok(self.pass_unchecked(axis, g, true))
    }

    pub(crate) fn pass_unchecked(&self, axis: Axis, g: &ScalarGrid, transpose: bool) -> ScalarGrid {
        let (along_rows, along_cols) = match axis {
            Axis::X => (&self.d1, &self.prefilter),
            Axis::Y => (&self.prefilter, &self.d1),
        };
        let (h, w) = g.shape();
        let data = if transpose {
            let t = filter_cols_adjoint(g.data(), h, w, along_cols);
            filter_rows_adjoint(&t, h, w, along_rows)
        } else {
            let t = filter_rows(g.data(), h, w, along_rows);
            filter_cols(&t, h, w, along_cols)
        };
        ScalarGrid::from_parts(h, w, data)
    }

    /// Gradient `(d/dx, d/dy)` by one pass per axis.
    pub fn gradient(&self, g: &ScalarGrid) -> Result<(ScalarGrid, ScalarGrid)> {
        self.check(g)?;
        Ok((
            self.pass_unchecked(Axis::X, g, false),
            self.pass_unchecked(Axis::Y, g, false),
        ))
    }

    /// All three second derivatives, sharing the first `x` pass between `XX`
    /// and `XY`. Returns `(xx, yy, xy)`.
    pub fn hessian(&self, g: &ScalarGrid) -> Result<(ScalarGrid, ScalarGrid, ScalarGrid)> {
        self.check(g)?;
        let gx = self.pass_unchecked(Axis::X, g, false);
        let gy = self.pass_unchecked(Axis::Y, g, false);
        let xx = self.pass_unchecked(Axis::X, &gx, false);
        let xy = self.pass_unchecked(Axis::Y, &gx, false);
        let yy = self.pass_unchecked(Axis::Y, &gy, false);
        Ok((xx, yy, xy))
    }
}

impl Default for DerivativeKernel {
    fn default() -> Self {
        Self::farid5()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    XX,
    YY,
    XY,
}

impl OperatorKind {
    /// Passes in application order.
    fn passes(self) -> [Axis; 2] {
        match self {
            OperatorKind::XX => [Axis::X, Axis::X],
            OperatorKind::YY => [Axis::Y, Axis::Y],
            OperatorKind::XY => [Axis::X, Axis::Y],
        }
    }
}

/// One of the second-derivative matrices `C_xx`, `C_yy`, `C_xy`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeOperator {
    pub kind: OperatorKind,
    pub kernel: DerivativeKernel,
}

impl DerivativeOperator {
    pub fn new(kind: OperatorKind, kernel: DerivativeKernel) -> Self {
        Self { kind, kernel }
    }

    pub fn apply(&self, g: &ScalarGrid) -> Result<ScalarGrid> {
        self.kernel.check(g)?;
        let [first, second] = self.kind.passes();
        let t = self.kernel.pass_unchecked(first, g, false);
        Ok(self.kernel.pass_unchecked(second, &t, false))
    }

    pub fn apply_adjoint(&self, r: &ScalarGrid) -> Result<ScalarGrid> {
        self.kernel.check(r)?;
        let [first, second] = self.kind.passes();
        let t = self.kernel.pass_unchecked(second, r, true);
        Ok(self.kernel.pass_unchecked(first, &t, true))
    }
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn filter_rows(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(row, dst)| {
        let line = &src[row * w..(row + 1) * w];
        for (c, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &tap) in taps.iter().enumerate() {
                if tap != 0.0 {
                    acc += tap * line[clamp_index(c as isize + k as isize - r, w)];
                }
            }
            *d = acc;
        }
    });
    out
}

fn filter_rows_adjoint(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(row, dst)| {
        let line = &src[row * w..(row + 1) * w];
        for (c, &v) in line.iter().enumerate() {
            for (k, &tap) in taps.iter().enumerate() {
                if tap != 0.0 {
                    dst[clamp_index(c as isize + k as isize - r, w)] += tap * v;
                }
            }
        }
    });
    out
}

fn filter_cols(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(row, dst)| {
        for (k, &tap) in taps.iter().enumerate() {
            if tap == 0.0 {
                continue;
            }
            let sr = clamp_index(row as isize + k as isize - r, h);
            let line = &src[sr * w..(sr + 1) * w];
            for (d, &s) in dst.iter_mut().zip(line) {
                *d += tap * s;
            }
        }
    });
    out
}

fn filter_cols_adjoint(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    // output row j gathers every (input row i, tap k) with clamp(i + k) == j
    out.par_chunks_mut(w).enumerate().for_each(|(j, dst)| {
        let lo = (j as isize - 2 * r).max(0) as usize;
        let hi = ((j as isize + 2 * r) as usize).min(h - 1);
        for i in lo..=hi {
            for (k, &tap) in taps.iter().enumerate() {
                if tap == 0.0 || clamp_index(i as isize + k as isize - r, h) != j {
                    continue;
                }
                let line = &src[i * w..(i + 1) * w];
                for (d, &s) in dst.iter_mut().zip(line) {
                    *d += tap * s;
                }
            }
        }
    });
    out
}

#[cfg(test)]
pub(crate) mod dense {
    //! Dense-matrix oracle: explicit convolution matrices with replicated
    //! boundary rows, assembled independently of the filtering code above.

    use super::{Axis, DerivativeKernel, OperatorKind};

    pub struct Dense {
        pub n: usize,
        pub a: Vec<f64>,
    }

    impl Dense {
        pub fn mul(&self, x: &[f64]) -> Vec<f64> {
            (0..self.n)
                .map(|i| (0..self.n).map(|j| self.a[i * self.n + j] * x[j]).sum())
                .collect()
        }

        pub fn mul_t(&self, x: &[f64]) -> Vec<f64> {
            (0..self.n)
                .map(|j| (0..self.n).map(|i| self.a[i * self.n + j] * x[i]).sum())
                .collect()
        }

        pub fn matmul(&self, other: &Dense) -> Dense {
            let n = self.n;
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    let v = self.a[i * n + k];
                    if v != 0.0 {
                        for j in 0..n {
                            a[i * n + j] += v * other.a[k * n + j];
                        }
                    }
                }
            }
            Dense { n, a }
        }
    }

    /// 1-D replicate-boundary convolution matrix for `n` samples.
    fn line_matrix(n: usize, taps: &[f64]) -> Vec<f64> {
        let r = taps.len() as isize / 2;
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for (k, &t) in taps.iter().enumerate() {
                let j = (i as isize + k as isize - r).clamp(0, n as isize - 1) as usize;
                m[i * n + j] += t;
            }
        }
        m
    }

    /// Kronecker product `A_rows (x) B_cols` acting on row-major `h x w` grids.
    pub fn pass_matrix(kernel: &DerivativeKernel, axis: Axis, h: usize, w: usize) -> Dense {
        let (row_taps, col_taps) = match axis {
            Axis::X => (kernel.d1(), kernel.prefilter()),
            Axis::Y => (kernel.prefilter(), kernel.d1()),
        };
        let along_x = line_matrix(w, row_taps);
        let along_y = line_matrix(h, col_taps);
        let n = h * w;
        let mut a = vec![0.0; n * n];
        for r in 0..h {
            for r2 in 0..h {
                let vy = along_y[r * h + r2];
                if vy == 0.0 {
                    continue;
                }
                for c in 0..w {
                    for c2 in 0..w {
                        a[(r * w + c) * n + r2 * w + c2] = vy * along_x[c * w + c2];
                    }
                }
            }
        }
        Dense { n, a }
    }

    pub fn operator_matrix(kernel: &DerivativeKernel, kind: OperatorKind, h: usize, w: usize) -> Dense {
        let px = pass_matrix(kernel, Axis::X, h, w);
        let py = pass_matrix(kernel, Axis::Y, h, w);
        match kind {
            OperatorKind::XX => px.matmul(&px),
            OperatorKind::YY => py.matmul(&py),
            OperatorKind::XY => py.matmul(&px),
        }
    }
}
