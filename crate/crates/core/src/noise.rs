//! Post-log Poisson transmission noise.
//!
//! A clean line integral `y` is scaled to an attenuation `s = scale * y`,
//! photon counts `c ~ Poisson(I0 * exp(-s))` are drawn, and the noisy line
//! integral is `-ln(max(c, 1) / I0) / scale`. Every bin draws from its own
//! generator, seeded from `(seed, angle id, bin)`, so a bin's noise does not
//! depend on which other rows are simulated or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{invalid, Result};
use crate::tomo::Sinogram;

/// Attenuation that the largest clean line integral is mapped to when the
/// scale is calibrated from data.
pub const TARGET_MAX_ATTENUATION: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    /// Expected incident photons per detector bin.
    pub photon_count: f64,
    pub seed: u64,
    /// Multiplier applied to line integrals before exponentiation. `None`
    /// calibrates from the sinogram being corrupted.
    pub attenuation_scale: Option<f64>,
}

impl NoiseModel {
    pub fn new(photon_count: f64, seed: u64) -> Self {
        Self { photon_count, seed, attenuation_scale: None }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.attenuation_scale = Some(scale);
        self
    }
}

/// Scale mapping `max_value` to [`TARGET_MAX_ATTENUATION`]; 1 for empty data.
pub fn calibrate_scale(max_value: f64) -> f64 {
    if max_value > 0.0 && max_value.is_finite() {
        TARGET_MAX_ATTENUATION / max_value
    } else {
        1.0
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn bin_seed(seed: u64, angle_id: usize, bin: usize) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(angle_id as u64)) ^ bin as u64)
}

pub fn apply_noise(clean: &Sinogram, model: &NoiseModel) -> Result<Sinogram> {
    let i0 = model.photon_count;
    if !(i0 > 0.0 && i0.is_finite()) {
        return invalid(format!("photon count must be positive, got {i0}"));
    }
    let scale = model.attenuation_scale.unwrap_or_else(|| calibrate_scale(clean.max_value()));
    if !(scale > 0.0 && scale.is_finite()) {
        return invalid(format!("attenuation scale must be positive, got {scale}"));
    }
    let mut out = clean.clone();
    let nd = clean.n_detectors();
    for (row, &angle_id) in clean.angle_ids().iter().enumerate() {
        for (bin, v) in out.data_mut()[row * nd..(row + 1) * nd].iter_mut().enumerate() {
            let s = scale * v.max(0.0);
            let mean = i0 * (-s).exp();
            let mut rng = ChaCha8Rng::seed_from_u64(bin_seed(model.seed, angle_id, bin));
            let counts = if mean > 0.0 {
                Poisson::new(mean)
                    .map_err(|e| crate::Error::InvalidArgument(format!("poisson mean {mean}: {e}")))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            *v = -(counts.max(1.0) / i0).ln() / scale;
        }
    }
    Ok(out)
}
