//! Analytic baselines: the 1-D cumulative transform, its separable product
//! form, and the built-in test densities.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::ScalarGrid;

/// Fraction of analytic mass that must fall inside the unit square for a
/// generated density to be accepted.
pub const MIN_INSIDE_MASS: f64 = 0.99;

/// A nonnegative density sampled on a uniform 1-D lattice spanning `[lo, hi]`,
/// normalized to unit trapezoidal mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Density1D {
    samples: Vec<f64>,
    lo: f64,
    hi: f64,
    /// Trapezoidal cumulative at each node, from 0 to 1.
    cumulative: Vec<f64>,
}

impl Density1D {
    pub fn new(samples: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        if samples.len() < 2 || !(hi > lo) {
            return Err(Error::InvalidConfig("1-D density needs >= 2 samples and lo < hi".into()));
        }
        if let Some((i, &v)) = samples.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::NegativeInput { index: i, value: v });
        }
        let step = (hi - lo) / (samples.len() - 1) as f64;
        let mut cumulative = Vec::with_capacity(samples.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for pair in samples.windows(2) {
            acc += 0.5 * (pair[0] + pair[1]) * step;
            cumulative.push(acc);
        }
        if acc <= 0.0 {
            return Err(Error::EmptyDensity);
        }
        let samples = samples.iter().map(|v| v / acc).collect();
        for c in cumulative.iter_mut() {
            *c /= acc;
        }
        *cumulative.last_mut().expect("non-empty") = 1.0;
        Ok(Self {
            samples,
            lo,
            hi,
            cumulative,
        })
    }

    /// Samples `f` at `n` evenly spaced nodes of `[lo, hi]`.
    pub fn from_fn(n: usize, lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidConfig("1-D density needs >= 2 samples".into()));
        }
        let step = (hi - lo) / (n - 1) as f64;
        Self::new((0..n).map(|i| f(lo + i as f64 * step)).collect(), lo, hi)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.samples.len() - 1) as f64
    }

    /// Cumulative distribution at `x`, linearly interpolated between nodes.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        if !(x >= self.lo - 1e-12 && x <= self.hi + 1e-12) {
            return Err(Error::OutsideSupport {
                x,
                lo: self.lo,
                hi: self.hi,
            });
        }
        let t = ((x - self.lo) / self.step()).clamp(0.0, (self.samples.len() - 1) as f64);
        let i = (t.floor() as usize).min(self.samples.len() - 2);
        let frac = t - i as f64;
        Ok(self.cumulative[i] + frac * (self.cumulative[i + 1] - self.cumulative[i]))
    }

    /// Inverse of [`Density1D::cdf`] for `q` in `[0, 1]`; flat stretches of
    /// the cumulative resolve to their left end.
    pub fn quantile(&self, q: f64) -> f64 {
        let q = q.clamp(0.0, 1.0);
        let i = self.cumulative.partition_point(|&c| c < q);
        if i == 0 {
            return self.lo;
        }
        let (c0, c1) = (self.cumulative[i - 1], self.cumulative[i.min(self.cumulative.len() - 1)]);
        let frac = if c1 > c0 { (q - c0) / (c1 - c0) } else { 0.0 };
        self.lo + ((i - 1) as f64 + frac) * self.step()
    }
}

/// `x_hat = a P(x) + b` with `(a, b)` mapping `[0, 1]` onto the support.
pub fn cdf_transform_1d(d: &Density1D, xs: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = d.support();
    xs.iter().map(|&x| d.cdf(x).map(|p| (hi - lo) * p + lo)).collect()
}

/// A product density, one 1-D factor per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableDensity {
    pub factors: Vec<Density1D>,
}

impl SeparableDensity {
    pub fn new(factors: Vec<Density1D>) -> Self {
        Self { factors }
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }
}

/// Applies the 1-D cumulative transform per axis. Points are flat slices of
/// `dim` coordinates each.
pub fn separable_cdf_transform(d: &SeparableDensity, points: &[f64]) -> Result<Vec<f64>> {
    let dim = d.dim();
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::InvalidConfig("point buffer length must be a multiple of the dimension".into()));
    }
    let mut out = Vec::with_capacity(points.len());
    for p in points.chunks(dim) {
        for (x, factor) in p.iter().zip(&d.factors) {
            out.push(cdf_transform_1d(factor, std::slice::from_ref(x))?[0]);
        }
    }
    Ok(out)
}

/// Built-in densities on the unit square `[0, 1]^2`, with `x` along columns
/// and `y` along rows. Lengths are fractions of the domain width.
#[derive(Debug, Clone, PartialEq)]
pub enum TestDistribution {
    Uniform,
    Gaussian {
        center: [f64; 2],
        sigma: [f64; 2],
    },
    Bimodal {
        centers: [[f64; 2]; 2],
        sigma: f64,
        weights: [f64; 2],
    },
    /// Crescent: a ring with von Mises angular weighting, densest towards
    /// `direction` (radians, measured from +x).
    Concave {
        center: [f64; 2],
        radius: f64,
        radial_sigma: f64,
        direction: f64,
        concentration: f64,
    },
    Ring {
        center: [f64; 2],
        radius: f64,
        radial_sigma: f64,
    },
}

impl TestDistribution {
    pub fn default_gaussian() -> Self {
        Self::Gaussian {
            center: [0.5, 0.5],
            sigma: [0.12, 0.18],
        }
    }

    pub fn default_bimodal() -> Self {
        Self::Bimodal {
            centers: [[0.35, 0.5], [0.65, 0.5]],
            sigma: 0.08,
            weights: [0.5, 0.5],
        }
    }

    pub fn default_concave() -> Self {
        Self::Concave {
            center: [0.5, 0.5],
            radius: 0.2,
            radial_sigma: 0.08,
            direction: PI,
            concentration: 2.0,
        }
    }

    pub fn default_ring() -> Self {
        Self::Ring {
            center: [0.5, 0.5],
            radius: 0.25,
            radial_sigma: 0.06,
        }
    }

    /// Built-in by name: `uniform`, `gaussian`, `bimodal`, `concave`, `ring`.
    pub fn builtin(name: &str) -> Option<Self> {
        Some(match name {
            "uniform" => Self::Uniform,
            "gaussian" => Self::default_gaussian(),
            "bimodal" => Self::default_bimodal(),
            "concave" => Self::default_concave(),
            "ring" => Self::default_ring(),
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Gaussian { .. } => "gaussian",
            Self::Bimodal { .. } => "bimodal",
            Self::Concave { .. } => "concave",
            Self::Ring { .. } => "ring",
        }
    }

    /// Unnormalized density at domain coordinates `(x, y)`.
    pub fn density(&self, x: f64, y: f64) -> f64 {
        let gauss2 = |c: [f64; 2], sx: f64, sy: f64| {
            let (dx, dy) = ((x - c[0]) / sx, (y - c[1]) / sy);
            (-0.5 * (dx * dx + dy * dy)).exp() / (2.0 * PI * sx * sy)
        };
        match *self {
            Self::Uniform => 1.0,
            Self::Gaussian { center, sigma } => gauss2(center, sigma[0], sigma[1]),
            Self::Bimodal {
                centers,
                sigma,
                weights,
            } => weights[0] * gauss2(centers[0], sigma, sigma) + weights[1] * gauss2(centers[1], sigma, sigma),
            Self::Ring {
                center,
                radius,
                radial_sigma,
            } => {
                let r = (x - center[0]).hypot(y - center[1]);
                (-0.5 * ((r - radius) / radial_sigma).powi(2)).exp()
            }
            Self::Concave {
                center,
                radius,
                radial_sigma,
                direction,
                concentration,
            } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                let r = dx.hypot(dy);
                let theta = dy.atan2(dx);
                (-0.5 * ((r - radius) / radial_sigma).powi(2)).exp()
                    * (concentration * ((theta - direction).cos() - 1.0)).exp()
            }
        }
    }

    /// Fraction of the analytic mass inside the unit square, by midpoint
    /// quadrature over `[-1.5, 2.5]^2`.
    pub fn inside_mass_fraction(&self) -> f64 {
        if matches!(self, Self::Uniform) {
            return 1.0;
        }
        let n = 800;
        let h = 4.0 / n as f64;
        let (mut inside, mut total) = (0.0, 0.0);
        for i in 0..n {
            let y = -1.5 + (i as f64 + 0.5) * h;
            for j in 0..n {
                let x = -1.5 + (j as f64 + 0.5) * h;
                let v = self.density(x, y);
                total += v;
                if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
                    inside += v;
                }
            }
        }
        inside / total
    }

    /// Samples the density on an `h x w` node lattice over the unit square
    /// (unnormalized).
    pub fn sample_grid(&self, h: usize, w: usize) -> Result<ScalarGrid> {
        crate::grid::check_shape(h, w)?;
        ScalarGrid::from_fn(h, w, |r, c| {
            self.density(c as f64 / (w - 1) as f64, r as f64 / (h - 1) as f64)
        })
    }
}

/// Samples `spec` on an `h x w` lattice and normalizes it to unit total mass
/// (samples sum to one).
pub fn generate(spec: &TestDistribution, h: usize, w: usize) -> Result<ScalarGrid> {
    let inside = spec.inside_mass_fraction();
    if inside < MIN_INSIDE_MASS {
        return Err(Error::MassEscape {
            inside,
            required: MIN_INSIDE_MASS,
        });
    }
    let raw = spec.sample_grid(h, w)?;
    let total = raw.sum();
    if total <= 0.0 {
        return Err(Error::EmptyDensity);
    }
    raw.map(|v| v / total)
}
