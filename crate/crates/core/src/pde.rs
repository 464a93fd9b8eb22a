//! The discrete determinant equation, its least-squares energy and gradient.
//!
//! For a potential `g` on the lattice,
//!
//! ```text
//! h(g) = (Cxx g)(Cyy g) - (Cxy g)^2 + Cxx g + Cyy g
//! E(g) = || h(g) - rho ||^2
//! ```
//!
//! where `rho = p/u - 1`, so that `h(g) = rho` is `|I + H(g)| = p/u`.

use crate::diffops::{Axis, DerivativeKernel};
use crate::error::{Error, Result};
use crate::grid::ScalarGrid;

/// Shape of the taper applied to `rho` in the padded margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowShape {
    /// Raised cosine in the Euclidean distance to the valid rectangle: flat on
    /// the whole valid region, circular arcs around its corners.
    #[default]
    Rectangular,
    /// Raised cosine in the radius about the domain centre, flat on the disk
    /// bounded by the valid region's circumscribed circle.
    Radial,
}

/// Padding and taper widths, in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub pad: usize,
    pub transition: usize,
    pub shape: WindowShape,
}

impl WindowSpec {
    pub fn new(pad: usize, transition: usize) -> Self {
        Self {
            pad,
            transition,
            shape: WindowShape::default(),
        }
    }

    pub fn validate(&self, kernel: &DerivativeKernel) -> Result<()> {
        let min_transition = kernel.half_support();
        if self.pad < self.transition || self.transition < min_transition {
            return Err(Error::InvalidWindow {
                pad: self.pad,
                transition: self.transition,
                min_transition,
            });
        }
        Ok(())
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self::new(16, 12)
    }
}

/// Placement of the unpadded domain inside the padded lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Which form of the gradient to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// True gradient of [`PdeProblem::energy`]; outer operators are applied
    /// as exact adjoints.
    #[default]
    Exact,
    /// Outer operators re-applied as if the convolution matrices were
    /// symmetric. Agrees with `Exact` away from the boundary.
    Symmetric,
}

/// A windowed, padded right-hand side together with the derivative kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeProblem {
    rho: ScalarGrid,
    kernel: DerivativeKernel,
    valid: Region,
    window: WindowSpec,
}

impl PdeProblem {
    /// Wraps an already prepared right-hand side without padding or windowing.
    pub fn unwindowed(rho: ScalarGrid, kernel: DerivativeKernel) -> Result<Self> {
        if rho.height() < kernel.len() || rho.width() < kernel.len() {
            return Err(Error::GridTooSmall {
                height: rho.height(),
                width: rho.width(),
                support: kernel.len(),
            });
        }
        let valid = Region {
            top: 0,
            left: 0,
            height: rho.height(),
            width: rho.width(),
        };
        Ok(Self {
            rho,
            kernel,
            valid,
            window: WindowSpec {
                pad: 0,
                transition: 0,
                shape: WindowShape::default(),
            },
        })
    }

    pub fn rho(&self) -> &ScalarGrid {
        &self.rho
    }

    pub fn kernel(&self) -> &DerivativeKernel {
        &self.kernel
    }

    pub fn valid_region(&self) -> Region {
        self.valid
    }

    pub fn window(&self) -> WindowSpec {
        self.window
    }

    pub fn shape(&self) -> (usize, usize) {
        self.rho.shape()
    }

    /// Restricts a padded-lattice grid to the valid region.
    pub fn crop_valid(&self, g: &ScalarGrid) -> Result<ScalarGrid> {
        self.rho.same_shape(g)?;
        g.crop(self.valid.top, self.valid.left, self.valid.height, self.valid.width)
    }

    /// `h(g)`.
    pub fn h_of_g(&self, g: &ScalarGrid) -> Result<ScalarGrid> {
        self.rho.same_shape(g)?;
        h_of_g(g, &self.kernel)
    }

    pub fn residual(&self, g: &ScalarGrid) -> Result<ScalarGrid> {
        let h = self.h_of_g(g)?;
        let data = h.data().iter().zip(self.rho.data()).map(|(a, b)| a - b).collect();
        Ok(ScalarGrid::from_parts(h.height(), h.width(), data))
    }

    /// `E(g) = ||h(g) - rho||^2` over the whole padded lattice.
    pub fn energy(&self, g: &ScalarGrid) -> Result<f64> {
        Ok(self.residual(g)?.norm_sq())
    }

    pub fn energy_gradient(&self, g: &ScalarGrid, mode: GradientMode) -> Result<ScalarGrid> {
        self.energy_and_gradient(g, mode).map(|(_, grad)| grad)
    }

    /// Energy and gradient sharing one evaluation of the second derivatives.
    pub fn energy_and_gradient(&self, g: &ScalarGrid, mode: GradientMode) -> Result<(f64, ScalarGrid)> {
        self.rho.same_shape(g)?;
        let (h, w) = g.shape();
        let (xx, yy, xy) = self.kernel.hessian(g)?;
        let n = h * w;
        let mut u = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut m = vec![0.0; n];
        let mut resid = vec![0.0; n];
        for i in 0..n {
            let (a, b, c) = (xx.data()[i], yy.data()[i], xy.data()[i]);
            let r = a * b - c * c + a + b - self.rho.data()[i];
            resid[i] = r;
            u[i] = (1.0 + b) * r;
            v[i] = (1.0 + a) * r;
            m[i] = c * r;
        }
        let energy = crate::grid::dot(&resid, &resid);
        let (u, v, m) = (
            ScalarGrid::from_parts(h, w, u),
            ScalarGrid::from_parts(h, w, v),
            ScalarGrid::from_parts(h, w, m),
        );
        let k = &self.kernel;
        let grad = match mode {
            GradientMode::Exact => {
                // Cxx^T u + Cyy^T v - 2 Cxy^T m, with Cxy = Py Px
                let a = k.pass_unchecked(Axis::X, &u, true);
                let b = k.pass_unchecked(Axis::Y, &m, true);
                let ab = combine(&a, 1.0, &b, -2.0);
                let xterm = k.pass_unchecked(Axis::X, &ab, true);
                let t = k.pass_unchecked(Axis::Y, &v, true);
                let yterm = k.pass_unchecked(Axis::Y, &t, true);
                combine(&xterm, 2.0, &yterm, 2.0)
            }
            GradientMode::Symmetric => {
                let a = k.pass_unchecked(Axis::X, &u, false);
                let xterm = k.pass_unchecked(Axis::X, &a, false);
                let t = k.pass_unchecked(Axis::Y, &v, false);
                let yterm = k.pass_unchecked(Axis::Y, &t, false);
                let s = k.pass_unchecked(Axis::X, &m, false);
                let mixed = k.pass_unchecked(Axis::Y, &s, false);
                let data = xterm
                    .data()
                    .iter()
                    .zip(yterm.data())
                    .zip(mixed.data())
                    .map(|((a, b), c)| 2.0 * (a + b - 2.0 * c))
                    .collect();
                ScalarGrid::from_parts(h, w, data)
            }
        };
        Ok((energy, grad))
    }
}

fn combine(a: &ScalarGrid, wa: f64, b: &ScalarGrid, wb: f64) -> ScalarGrid {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| wa * x + wb * y).collect();
    ScalarGrid::from_parts(a.height(), a.width(), data)
}

/// `h(g) = (Cxx g)(Cyy g) - (Cxy g)^2 + Cxx g + Cyy g`.
pub fn h_of_g(g: &ScalarGrid, kernel: &DerivativeKernel) -> Result<ScalarGrid> {
    let (xx, yy, xy) = kernel.hessian(g)?;
    let data = xx
        .data()
        .iter()
        .zip(yy.data())
        .zip(xy.data())
        .map(|((a, b), c)| a * b - c * c + a + b)
        .collect();
    Ok(ScalarGrid::from_parts(g.height(), g.width(), data))
}

/// Taper weight at Euclidean distance `d` (samples) outside the flat region.
fn taper(d: f64, transition: usize) -> f64 {
    if d <= 0.0 {
        1.0
    } else if d >= transition as f64 {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * d / transition as f64).cos())
    }
}

/// Window weight at padded-lattice coordinates `(y, x)` for a valid region
/// of `h x w` samples.
pub fn window_weight(y: f64, x: f64, h: usize, w: usize, spec: &WindowSpec) -> f64 {
    let pad = spec.pad as f64;
    let (top, bottom) = (pad, pad + (h - 1) as f64);
    let (left, right) = (pad, pad + (w - 1) as f64);
    let d = match spec.shape {
        WindowShape::Rectangular => {
            let dy = (top - y).max(y - bottom).max(0.0);
            let dx = (left - x).max(x - right).max(0.0);
            dy.hypot(dx)
        }
        WindowShape::Radial => {
            let (cy, cx) = (0.5 * (top + bottom), 0.5 * (left + right));
            let radius = 0.5 * (((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64).sqrt();
            (y - cy).hypot(x - cx) - radius
        }
    };
    taper(d, spec.transition)
}

/// Window weights on the padded lattice for a valid region of `h x w`.
pub fn window_weights(h: usize, w: usize, spec: &WindowSpec) -> ScalarGrid {
    let (ph, pw) = (h + 2 * spec.pad, w + 2 * spec.pad);
    let data = (0..ph * pw)
        .map(|i| window_weight((i / pw) as f64, (i % pw) as f64, h, w, spec))
        .collect();
    ScalarGrid::from_parts(ph, pw, data)
}

/// Pads `rho` by edge replication and tapers it to zero across the margin.
pub fn window_rho(rho: &ScalarGrid, spec: WindowSpec, kernel: DerivativeKernel) -> Result<PdeProblem> {
    spec.validate(&kernel)?;
    let (h, w) = rho.shape();
    let weights = window_weights(h, w, &spec);
    let padded = rho.pad_replicate(spec.pad);
    let data = padded
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&r, &wt)| if wt == 1.0 { r } else { r * wt })
        .collect();
    let rho = ScalarGrid::from_parts(padded.height(), padded.width(), data);
    if rho.height() < kernel.len() || rho.width() < kernel.len() {
        return Err(Error::GridTooSmall {
            height: rho.height(),
            width: rho.width(),
            support: kernel.len(),
        });
    }
    Ok(PdeProblem {
        rho,
        kernel,
        valid: Region {
            top: spec.pad,
            left: spec.pad,
            height: h,
            width: w,
        },
        window: spec,
    })
}
