//! Synthetic test objects built from sums of ellipses.
//!
//! Ellipses live in normalised coordinates `[-1, 1]^2` (y pointing up);
//! each pixel value is the supersampled average of the ellipse sum, clipped
//! to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::tomo::Image;

/// One additive ellipse: value, semi-axes, centre, rotation (degrees).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub value: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub centre_x: f64,
    pub centre_y: f64,
    pub angle_deg: f64,
}

impl Ellipse {
    const fn new(value: f64, semi_x: f64, semi_y: f64, centre_x: f64, centre_y: f64, angle_deg: f64) -> Self {
        Self { value, semi_x, semi_y, centre_x, centre_y, angle_deg }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let dx = x - self.centre_x;
        let dy = y - self.centre_y;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }
}

/// The ten-ellipse Shepp-Logan head with the higher-contrast intensities
/// that keep every region inside `[0, 1]`.
pub const SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse::new(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    Ellipse::new(-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    Ellipse::new(-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    Ellipse::new(-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    Ellipse::new(0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    Ellipse::new(0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    Ellipse::new(0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    Ellipse::new(0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    Ellipse::new(0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    Ellipse::new(0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp-logan" => Ok(PhantomKind::SheppLogan),
            "random-ellipses" => Ok(PhantomKind::RandomEllipses),
            other => invalid(format!("unknown phantom kind {other:?}")),
        }
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhantomKind::SheppLogan => "shepp-logan",
            PhantomKind::RandomEllipses => "random-ellipses",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    /// Square image side in pixels.
    pub size: usize,
    /// Inclusive range for the number of inner ellipses (random kind).
    pub ellipse_count: (usize, usize),
    /// Range of the additive value of each inner ellipse (random kind).
    pub intensity: (f64, f64),
    pub seed: u64,
    /// Samples per pixel along each axis.
    pub supersample: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            kind: PhantomKind::RandomEllipses,
            size: 64,
            ellipse_count: (4, 8),
            intensity: (-0.2, 0.5),
            seed: 0,
            supersample: 4,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return invalid("phantom size must be at least 2");
        }
        if self.supersample == 0 {
            return invalid("supersample factor must be positive");
        }
        let (lo, hi) = self.ellipse_count;
        if lo > hi {
            return invalid(format!("ellipse count range {lo}..={hi} is empty"));
        }
        let (a, b) = self.intensity;
        if !(a.is_finite() && b.is_finite() && a <= b) {
            return invalid(format!("intensity range ({a}, {b}) is invalid"));
        }
        Ok(())
    }
}

/// Rasterises a set of ellipses onto a `size x size` grid.
pub fn rasterize(ellipses: &[Ellipse], size: usize, supersample: usize) -> Image {
    let n = size as f64;
    let ss = supersample as f64;
    Image::from_fn(size, size, |r, c| {
        let mut acc = 0.0;
        for i in 0..supersample {
            for j in 0..supersample {
                // Sub-sample centres, mapped so the grid spans [-1, 1].
                let x = (c as f64 + (j as f64 + 0.5) / ss) * 2.0 / n - 1.0;
                let y = 1.0 - (r as f64 + (i as f64 + 0.5) / ss) * 2.0 / n;
                acc += ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.value).sum::<f64>();
            }
        }
        (acc / (ss * ss)).clamp(0.0, 1.0)
    })
}

pub fn shepp_logan(size: usize, supersample: usize) -> Image {
    rasterize(&SHEPP_LOGAN, size, supersample)
}

fn random_ellipses(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let mut out = Vec::new();
    let body_x = rng.random_range(0.6..0.85);
    let body_y = rng.random_range(0.6..0.85);
    out.push(Ellipse::new(
        rng.random_range(0.2..0.4),
        body_x,
        body_y,
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(0.0..180.0),
    ));
    let count = rng.random_range(spec.ellipse_count.0..=spec.ellipse_count.1);
    let (lo, hi) = spec.intensity;
    for _ in 0..count {
        let radius = 0.55 * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let value = if hi > lo { rng.random_range(lo..hi) } else { lo };
        out.push(Ellipse::new(
            value,
            rng.random_range(0.05..0.3),
            rng.random_range(0.05..0.3),
            radius * phi.cos() * body_x,
            radius * phi.sin() * body_y,
            rng.random_range(0.0..180.0),
        ));
    }
    out
}

/// Generates `n` phantoms; identical `(spec, n)` give identical output.
pub fn generate_phantoms(spec: &PhantomSpec, n: usize) -> Result<Vec<Image>> {
    spec.validate()?;
    if n == 0 {
        return invalid("at least one phantom must be requested");
    }
    match spec.kind {
        PhantomKind::SheppLogan => {
            let img = shepp_logan(spec.size, spec.supersample);
            Ok(vec![img; n])
        }
        PhantomKind::RandomEllipses => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            Ok((0..n).map(|_| rasterize(&random_ellipses(spec, &mut rng), spec.size, spec.supersample)).collect())
        }
    }
}
