//! 2D parallel-beam tomography.
//!
//! Pixel `(r, c)` of an `H x W` image has its centre at
//! `x = (c - (W-1)/2) * pixel_spacing`, `y = ((H-1)/2 - r) * pixel_spacing`.
//! The ray of angle `theta` and detector offset `t` is the line
//! `x cos(theta) + y sin(theta) = t`; detector bin `b` sits at
//! `t = (b - (n_detectors-1)/2) * detector_spacing`.
//!
//! The forward projector is Joseph's method: each ray is stepped along the
//! image axis it is most aligned with, and the image is linearly
//! interpolated across the other axis. [`backproject`] visits exactly the
//! same `(pixel, weight)` pairs, so it is the literal transpose of [`radon`].
//! [`fbp`] instead backprojects pixel-driven with cubic interpolation along
//! the detector, which resolves edges noticeably better.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Error, Result};

/// Reconstruction-domain pixel grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return invalid(format!("image data has {} values, expected {height}x{width}", data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return invalid(format!("image shapes differ: {:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }
}

/// Line-integral data over a subset of a geometry's angles.
///
/// Row `i` holds the projection at `geometry.angles()[angle_ids[i]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    angle_ids: Vec<usize>,
    n_detectors: usize,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(angle_ids: Vec<usize>, n_detectors: usize) -> Result<Self> {
        check_angle_ids(&angle_ids, usize::MAX)?;
        let data = vec![0.0; angle_ids.len() * n_detectors];
        Ok(Self { angle_ids, n_detectors, data })
    }

    pub fn from_vec(angle_ids: Vec<usize>, n_detectors: usize, data: Vec<f64>) -> Result<Self> {
        check_angle_ids(&angle_ids, usize::MAX)?;
        if data.len() != angle_ids.len() * n_detectors {
            return invalid(format!(
                "sinogram data has {} values, expected {}x{n_detectors}",
                data.len(),
                angle_ids.len()
            ));
        }
        Ok(Self { angle_ids, n_detectors, data })
    }

    pub fn angle_ids(&self) -> &[usize] {
        &self.angle_ids
    }

    pub fn n_rows(&self) -> usize {
        self.angle_ids.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_detectors..(i + 1) * self.n_detectors]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn check_geometry(&self, geom: &Geometry) -> Result<()> {
        if self.n_detectors != geom.n_detectors {
            return invalid(format!(
                "sinogram has {} detector bins, geometry has {}",
                self.n_detectors, geom.n_detectors
            ));
        }
        check_angle_ids(&self.angle_ids, geom.n_angles())
    }
}

fn check_angle_ids(ids: &[usize], n_angles: usize) -> Result<()> {
    if ids.is_empty() {
        return invalid("angle set is empty");
    }
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("angle ids must be strictly increasing");
    }
    if let Some(&last) = ids.last() {
        if last >= n_angles {
            return invalid(format!("angle id {last} out of range for {n_angles} angles"));
        }
    }
    Ok(())
}

/// Parallel-beam acquisition geometry with `l` equidistant angles on `[0, pi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    image_height: usize,
    image_width: usize,
    n_detectors: usize,
    detector_spacing: f64,
    pixel_spacing: f64,
    angles: Vec<f64>,
}

impl Geometry {
    /// Unit pixel and detector spacing, `l` uniform angles, and the smallest
    /// odd detector count covering `sqrt(2) * max(H, W)`.
    pub fn new(image_height: usize, image_width: usize, n_angles: usize) -> Result<Self> {
        let side = image_height.max(image_width) as f64;
        let mut n_detectors = (std::f64::consts::SQRT_2 * side).ceil() as usize;
        if n_detectors.is_multiple_of(2) {
            n_detectors += 1;
        }
        Self::with_detectors(image_height, image_width, n_angles, n_detectors, 1.0, 1.0)
    }

    pub fn with_detectors(
        image_height: usize,
        image_width: usize,
        n_angles: usize,
        n_detectors: usize,
        detector_spacing: f64,
        pixel_spacing: f64,
    ) -> Result<Self> {
        if image_height == 0 || image_width == 0 {
            return invalid("image dimensions must be positive");
        }
        if n_angles == 0 {
            return invalid("at least one projection angle is required");
        }
        if !(detector_spacing > 0.0 && pixel_spacing > 0.0) {
            return invalid("detector and pixel spacing must be positive");
        }
        let diagonal = ((image_height * image_height + image_width * image_width) as f64).sqrt();
        if (n_detectors as f64) * detector_spacing < diagonal.ceil() * pixel_spacing {
            return invalid(format!(
                "{n_detectors} detector bins do not cover the image diagonal ({diagonal:.2} pixels)"
            ));
        }
        let angles = (0..n_angles).map(|j| j as f64 * PI / n_angles as f64).collect();
        Ok(Self { image_height, image_width, n_detectors, detector_spacing, pixel_spacing, angles })
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_spacing
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.pixel_spacing
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn all_angle_ids(&self) -> Vec<usize> {
        (0..self.n_angles()).collect()
    }

    fn detector_offset(&self, bin: usize) -> f64 {
        (bin as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.shape() != (self.image_height, self.image_width) {
            return invalid(format!(
                "image is {:?}, geometry expects {}x{}",
                img.shape(),
                self.image_height,
                self.image_width
            ));
        }
        Ok(())
    }

    fn driver(&self, angle_id: usize) -> RayDriver {
        let theta = self.angles[angle_id];
        let (sin, cos) = theta.sin_cos();
        let ps = self.pixel_spacing;
        let cx = (self.image_width as f64 - 1.0) / 2.0;
        let cy = (self.image_height as f64 - 1.0) / 2.0;
        if sin.abs() >= cos.abs() {
            // Step over columns, interpolate between rows.
            RayDriver {
                along_columns: true,
                weight: ps / sin.abs(),
                base: cy - cx * cos / sin,
                t_coef: -1.0 / (ps * sin),
                slope: cos / sin,
            }
        } else {
            // Step over rows, interpolate between columns.
            RayDriver {
                along_columns: false,
                weight: ps / cos.abs(),
                base: cx - cy * sin / cos,
                t_coef: 1.0 / (ps * cos),
                slope: sin / cos,
            }
        }
    }
}

struct RayDriver {
    along_columns: bool,
    weight: f64,
    base: f64,
    t_coef: f64,
    slope: f64,
}

impl RayDriver {
    /// Calls `visit(pixel_index, weight)` for every nonzero entry of the
    /// system-matrix row belonging to detector offset `t`.
    #[inline(always)]
    fn trace(&self, t: f64, height: usize, width: usize, mut visit: impl FnMut(usize, f64)) {
        let (n_outer, n_inner) = if self.along_columns { (width, height) } else { (height, width) };
        let start = self.base + self.t_coef * t;
        let limit = n_inner as f64;
        for o in 0..n_outer {
            let pos = start + o as f64 * self.slope;
            let fl = pos.floor();
            if fl < -1.0 || fl >= limit {
                continue;
            }
            let frac = pos - fl;
            let i0 = fl as isize;
            let pixel = |inner: usize| {
                if self.along_columns {
                    inner * width + o
                } else {
                    o * width + inner
                }
            };
            if i0 >= 0 {
                visit(pixel(i0 as usize), self.weight * (1.0 - frac));
            }
            if i0 + 1 < n_inner as isize {
                visit(pixel((i0 + 1) as usize), self.weight * frac);
            }
        }
    }
}

/// Discrete Radon transform of `img` at the given angles.
pub fn radon(img: &Image, geom: &Geometry, angle_ids: &[usize]) -> Result<Sinogram> {
    geom.check_image(img)?;
    check_angle_ids(angle_ids, geom.n_angles())?;
    let (h, w) = img.shape();
    let nd = geom.n_detectors;
    let pixels = img.data();
    let mut data = vec![0.0; angle_ids.len() * nd];
    for (row, &id) in angle_ids.iter().enumerate() {
        let driver = geom.driver(id);
        for (bin, out) in data[row * nd..(row + 1) * nd].iter_mut().enumerate() {
            let mut acc = 0.0;
            driver.trace(geom.detector_offset(bin), h, w, |p, wt| acc += wt * pixels[p]);
            *out = acc;
        }
    }
    Ok(Sinogram { angle_ids: angle_ids.to_vec(), n_detectors: nd, data })
}

/// Transpose of [`radon`] over the rows present in `sino`.
pub fn backproject(sino: &Sinogram, geom: &Geometry) -> Result<Image> {
    sino.check_geometry(geom)?;
    let (h, w) = (geom.image_height, geom.image_width);
    let mut out = Image::zeros(h, w);
    let pixels = out.data_mut();
    for (row, &id) in sino.angle_ids.iter().enumerate() {
        let driver = geom.driver(id);
        for (bin, &value) in sino.row(row).iter().enumerate() {
            if value == 0.0 {
                continue;
            }
            driver.trace(geom.detector_offset(bin), h, w, |p, wt| pixels[p] += wt * value);
        }
    }
    Ok(out)
}

/// Reconstruction filter applied on top of the ramp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Filter {
    #[default]
    RamLak,
    SheppLogan,
    Hann,
}

impl FromStr for Filter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ram-lak" | "ramlak" | "ramp" => Ok(Filter::RamLak),
            "shepp-logan" | "shepplogan" => Ok(Filter::SheppLogan),
            "hann" | "hanning" => Ok(Filter::Hann),
            other => invalid(format!("unknown filter {other:?}")),
        }
    }
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Filter::RamLak => "ram-lak",
            Filter::SheppLogan => "shepp-logan",
            Filter::Hann => "hann",
        })
    }
}

/// Frequency response of the discrete ramp (band-limited, built from its
/// spatial-domain samples so that the DC term is not zeroed), times the
/// window of `filter`. Scaled by 2 to pair with the `pi / 2n` backprojection
/// factor.
fn filter_response(len: usize, filter: Filter) -> Vec<f64> {
    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    kernel[0].re = 0.25;
    for (i, k) in kernel.iter_mut().enumerate().skip(1) {
        let n = if i <= len / 2 { i } else { len - i };
        if n % 2 == 1 {
            k.re = -1.0 / (PI * n as f64).powi(2);
        }
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut kernel);
    kernel
        .iter()
        .enumerate()
        .map(|(i, k)| {
            // Signed frequency in cycles per sample, in [-0.5, 0.5).
            let f = if i < len / 2 { i as f64 } else { i as f64 - len as f64 } / len as f64;
            let window = match filter {
                Filter::RamLak => 1.0,
                Filter::SheppLogan => {
                    let w = PI * f;
                    if w == 0.0 {
                        1.0
                    } else {
                        w.sin() / w
                    }
                }
                Filter::Hann => 0.5 * (1.0 + (2.0 * PI * f).cos()),
            };
            2.0 * k.re * window
        })
        .collect()
}

/// Ramp-filters each row of `sino`, zero-padded to the next power of two
/// at least twice the detector count.
pub fn filter_sinogram(sino: &Sinogram, filter: Filter) -> Sinogram {
    let nd = sino.n_detectors;
    let len = (2 * nd).next_power_of_two().max(64);
    let response = filter_response(len, filter);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    let mut out = sino.clone();
    for row in out.data.chunks_mut(nd) {
        for (b, v) in buf.iter_mut().enumerate() {
            *v = Complex::new(if b < nd { row[b] } else { 0.0 }, 0.0);
        }
        fwd.process(&mut buf);
        for (v, r) in buf.iter_mut().zip(&response) {
            *v *= *r;
        }
        inv.process(&mut buf);
        for (dst, v) in row.iter_mut().zip(&buf) {
            *dst = v.re / len as f64;
        }
    }
    out
}

/// Cubic convolution (Keys, a = -0.5) weights for offset `f` in `[0, 1)`
/// relative to samples `i-1, i, i+1, i+2`.
#[inline]
fn cubic_weights(f: f64) -> [f64; 4] {
    let f2 = f * f;
    let f3 = f2 * f;
    [-0.5 * f3 + f2 - 0.5 * f, 1.5 * f3 - 2.5 * f2 + 1.0, -1.5 * f3 + 2.0 * f2 + 0.5 * f, 0.5 * f3 - 0.5 * f2]
}

/// Pixel-driven backprojection: every pixel samples each row at its own
/// detector offset with cubic interpolation. Used by [`fbp`] only; unlike
/// [`backproject`] it is not the transpose of [`radon`].
fn interpolating_backprojection(sino: &Sinogram, geom: &Geometry) -> Image {
    let (h, w) = (geom.image_height, geom.image_width);
    let nd = sino.n_detectors as isize;
    let ps = geom.pixel_spacing;
    let ds = geom.detector_spacing;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let centre_bin = (nd as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(h, w);
    let pixels = out.data_mut();
    for (row, &id) in sino.angle_ids.iter().enumerate() {
        let (sin, cos) = geom.angles[id].sin_cos();
        let q = sino.row(row);
        let sample = |i: isize| if (0..nd).contains(&i) { q[i as usize] } else { 0.0 };
        for r in 0..h {
            let y = (cy - r as f64) * ps;
            let row_start = (y * sin - cx * ps * cos) / ds + centre_bin;
            let step = ps * cos / ds;
            for (c, px) in pixels[r * w..(r + 1) * w].iter_mut().enumerate() {
                let pos = row_start + c as f64 * step;
                let fl = pos.floor();
                let i = fl as isize;
                let wts = cubic_weights(pos - fl);
                *px += wts[0] * sample(i - 1) + wts[1] * sample(i) + wts[2] * sample(i + 1) + wts[3] * sample(i + 2);
            }
        }
    }
    out
}

/// Filtered backprojection over the rows present in `sino`, scaled by
/// `pi / (2 n)` for `n` rows so that reconstructions from disjoint equal-size
/// angle subsets average to the reconstruction from their union.
pub fn fbp(sino: &Sinogram, geom: &Geometry, filter: Filter) -> Result<Image> {
    sino.check_geometry(geom)?;
    let filtered = filter_sinogram(sino, filter);
    let mut img = interpolating_backprojection(&filtered, geom);
    let scale = PI / (2.0 * sino.n_rows() as f64) / geom.detector_spacing;
    img.data_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(img)
}

/// Keeps only the rows of `sino` whose angle ids are listed in `angle_ids`.
pub fn restrict(sino: &Sinogram, angle_ids: &[usize]) -> Result<Sinogram> {
    check_angle_ids(angle_ids, usize::MAX)?;
    let nd = sino.n_detectors;
    let mut data = Vec::with_capacity(angle_ids.len() * nd);
    let mut row = 0;
    for &id in angle_ids {
        while row < sino.angle_ids.len() && sino.angle_ids[row] < id {
            row += 1;
        }
        if row == sino.angle_ids.len() || sino.angle_ids[row] != id {
            return invalid(format!("angle id {id} is not present in the sinogram"));
        }
        data.extend_from_slice(sino.row(row));
    }
    Ok(Sinogram { angle_ids: angle_ids.to_vec(), n_detectors: nd, data })
}

/// Sorted complement of `ids` within `0..n`.
pub fn complement(ids: &[usize], n: usize) -> Vec<usize> {
    let mut keep = vec![true; n];
    for &i in ids {
        if i < n {
            keep[i] = false;
        }
    }
    (0..n).filter(|&i| keep[i]).collect()
}
