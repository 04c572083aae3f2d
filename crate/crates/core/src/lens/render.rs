//! Ray tracing, PSF convolution, noise and the χ² statistic.

use crate::ad::{Dual, Real};

use super::profiles::{shear_deflection, Sersic, Sie};
use super::{Instrument, LensObservation, LensScene, N_PARAMS};

/// Normalized 1-d Gaussian taps for the PSF, truncated at 4σ. The 2-d kernel
/// is their outer product and therefore also sums to one.
pub fn psf_taps(instrument: &Instrument) -> Vec<f64> {
    let sigma = instrument.psf_fwhm / (8.0 * 2f64.ln()).sqrt() / instrument.pixel_scale;
    let radius = (4.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable convolution with zero padding. The kernel is symmetric, so this
/// is also its own adjoint.
pub fn convolve(image: &[f64], size: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let n = size as i64;
    let mut tmp = vec![0.0; image.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (k, &w) in taps.iter().enumerate() {
                let xx = x + k as i64 - r;
                if (0..n).contains(&xx) {
                    acc += w * image[(y * n + xx) as usize];
                }
            }
            tmp[(y * n + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; image.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (k, &w) in taps.iter().enumerate() {
                let yy = y + k as i64 - r;
                if (0..n).contains(&yy) {
                    acc += w * tmp[(yy * n + x) as usize];
                }
            }
            out[(y * n + x) as usize] = acc;
        }
    }
    out
}

/// Pixel-centre coordinates in arcseconds, row-major with y along rows.
pub fn pixel_coords(instrument: &Instrument) -> Vec<(f64, f64)> {
    let n = instrument.size;
    let c = 0.5 * n as f64;
    let s = instrument.pixel_scale;
    (0..n * n).map(|i| (((i % n) as f64 + 0.5 - c) * s, ((i / n) as f64 + 0.5 - c) * s)).collect()
}

/// Per-scene state for evaluating surface brightness before the PSF.
pub struct Tracer<T> {
    sie: Sie<T>,
    shear: [T; 4],
    source: Sersic<T>,
    light: Sersic<T>,
}

impl<T: Real> Tracer<T> {
    pub fn new(p: &[T; N_PARAMS]) -> Self {
        Self {
            sie: Sie::new(p[0], p[1], p[2], p[3], p[4]),
            shear: [p[5], p[6], p[7], p[8]],
            source: Sersic::new(p[9], p[10], p[11], p[12], p[13], p[14], p[15]),
            light: Sersic::new(p[16], p[17], p[18], p[19], p[20], p[21], p[22]),
        }
    }

    /// Source light at β = Θ − α(Θ) plus lens light at Θ.
    pub fn brightness(&self, x: f64, y: f64) -> T {
        let (ax, ay) = self.sie.deflection(x, y);
        let [g1, g2, ra, dec] = self.shear;
        let (sx, sy) = shear_deflection(g1, g2, ra, dec, x, y);
        let bx = T::cst(x) - ax - sx;
        let by = T::cst(y) - ay - sy;
        self.source.brightness(bx, by) + self.light.brightness(T::cst(x), T::cst(y))
    }
}

/// Noise-free model image: surface brightness convolved with the PSF.
pub fn render_noiseless(scene: &LensScene, instrument: &Instrument) -> Vec<f64> {
    let tracer = Tracer::new(&scene.to_array());
    let raw: Vec<f64> = pixel_coords(instrument).iter().map(|&(x, y)| tracer.brightness(x, y)).collect();
    convolve(&raw, instrument.size, &psf_taps(instrument))
}

/// Per-pixel noise level for a model (or observed) image.
pub fn noise_sigma(model: &[f64], instrument: &Instrument) -> Vec<f64> {
    let b2 = instrument.background_rms * instrument.background_rms;
    model.iter().map(|&m| (b2 + m.max(0.0) / instrument.exposure_time).sqrt()).collect()
}

/// Noisy observation driven by one standard-normal draw per pixel.
pub fn render(scene: &LensScene, instrument: &Instrument, z: &[f64]) -> LensObservation {
    let model = render_noiseless(scene, instrument);
    let sigma = noise_sigma(&model, instrument);
    let image = model.iter().zip(&sigma).zip(z).map(|((m, s), zi)| m + s * zi).collect();
    LensObservation { size: instrument.size, image, sigma }
}

fn chi2_of(model: &[f64], image: &[f64], sigma: &[f64]) -> f64 {
    let n = model.len() as f64;
    model.iter().zip(image).zip(sigma).map(|((m, x), s)| ((m - x) / s).powi(2)).sum::<f64>() / n
}

/// Mean over pixels of ((model − image)/σ)².
pub fn chi2(scene: &LensScene, obs: &LensObservation, instrument: &Instrument) -> f64 {
    chi2_of(&render_noiseless(scene, instrument), &obs.image, &obs.sigma)
}

/// χ² for raw parameters, sharing a PSF and pixel grid across calls.
#[derive(Clone, Debug)]
pub struct Chi2Eval {
    instrument: Instrument,
    coords: Vec<(f64, f64)>,
    taps: Vec<f64>,
}

impl Chi2Eval {
    pub fn new(instrument: &Instrument) -> Self {
        Self { instrument: instrument.clone(), coords: pixel_coords(instrument), taps: psf_taps(instrument) }
    }

    pub fn instrument(&self) -> &Instrument {
        &self.instrument
    }

    pub fn model(&self, p: &[f64; N_PARAMS]) -> Vec<f64> {
        let tracer = Tracer::new(p);
        let raw: Vec<f64> = self.coords.iter().map(|&(x, y)| tracer.brightness(x, y)).collect();
        convolve(&raw, self.instrument.size, &self.taps)
    }

    pub fn value(&self, p: &[f64; N_PARAMS], image: &[f64], sigma: &[f64]) -> f64 {
        chi2_of(&self.model(p), image, sigma)
    }

    /// χ² and its exact gradient. The PSF is linear and self-adjoint, so the
    /// residual weights are convolved once and only the unconvolved surface
    /// brightness carries tangents.
    pub fn value_grad(&self, p: &[f64; N_PARAMS], image: &[f64], sigma: &[f64]) -> (f64, [f64; N_PARAMS]) {
        let model = self.model(p);
        let n = model.len() as f64;
        let w: Vec<f64> = model.iter().zip(image).zip(sigma).map(|((m, x), s)| 2.0 * (m - x) / (s * s) / n).collect();
        let w = convolve(&w, self.instrument.size, &self.taps);
        let tracer = Tracer::new(&Dual::<N_PARAMS>::vars(p));
        let mut grad = [0.0; N_PARAMS];
        for (&(x, y), &wi) in self.coords.iter().zip(&w) {
            if wi == 0.0 {
                continue;
            }
            let b = tracer.brightness(x, y);
            for (g, d) in grad.iter_mut().zip(&b.d) {
                *g += wi * d;
            }
        }
        (chi2_of(&model, image, sigma), grad)
    }
}
