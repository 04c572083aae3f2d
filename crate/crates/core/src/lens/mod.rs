//! Parametric strong-lensing simulator: SIE plus external shear, Sérsic
//! source and lens light, Gaussian PSF, and shot plus background noise.

pub mod image;
pub mod profiles;
pub mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::Simulator;
use crate::tasks::TaskError;

pub use image::{write_pgm, write_scene_files};
pub use profiles::{angle_from_ellipticity, ellipticity_from_angle, sersic_bn, shear_from_polar, shear_deflection, sis_deflection, Sersic, Sie};
pub use render::{chi2, convolve, noise_sigma, pixel_coords, psf_taps, render, render_noiseless, Chi2Eval, Tracer};

pub const N_PARAMS: usize = 23;
pub const N_FREE: usize = 17;

/// Positions of the free parameters inside the 23-vector; the lens-light
/// centre and ellipticity follow the mass, and the shear origin is 0.
pub const FREE_INDEX: [usize; N_FREE] = [0, 1, 2, 3, 4, 5, 6, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18];

pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "theta_e", "mass_e1", "mass_e2", "mass_x", "mass_y", "gamma1", "gamma2", "ra0", "dec0", "src_amp", "src_r_eff",
    "src_n", "src_e1", "src_e2", "src_x", "src_y", "light_amp", "light_r_eff", "light_n", "light_e1", "light_e2",
    "light_x", "light_y",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensMass {
    pub theta_e: f64,
    pub e1: f64,
    pub e2: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalShear {
    pub gamma1: f64,
    pub gamma2: f64,
    pub ra0: f64,
    pub dec0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SersicLight {
    pub amplitude: f64,
    pub r_eff: f64,
    pub n: f64,
    pub e1: f64,
    pub e2: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensScene {
    pub mass: LensMass,
    pub shear: ExternalShear,
    pub source: SersicLight,
    pub lens_light: SersicLight,
}

impl SersicLight {
    fn array(&self) -> [f64; 7] {
        [self.amplitude, self.r_eff, self.n, self.e1, self.e2, self.x, self.y]
    }

    fn from_slice(p: &[f64]) -> Self {
        Self { amplitude: p[0], r_eff: p[1], n: p[2], e1: p[3], e2: p[4], x: p[5], y: p[6] }
    }
}

impl LensScene {
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        let m = &self.mass;
        let s = &self.shear;
        let mut p = [0.0; N_PARAMS];
        p[..9].copy_from_slice(&[m.theta_e, m.e1, m.e2, m.x, m.y, s.gamma1, s.gamma2, s.ra0, s.dec0]);
        p[9..16].copy_from_slice(&self.source.array());
        p[16..].copy_from_slice(&self.lens_light.array());
        p
    }

    pub fn from_array(p: &[f64; N_PARAMS]) -> Self {
        Self {
            mass: LensMass { theta_e: p[0], e1: p[1], e2: p[2], x: p[3], y: p[4] },
            shear: ExternalShear { gamma1: p[5], gamma2: p[6], ra0: p[7], dec0: p[8] },
            source: SersicLight::from_slice(&p[9..16]),
            lens_light: SersicLight::from_slice(&p[16..]),
        }
    }

    /// Fills the tied parameters from the 17 free ones.
    pub fn from_free(r: &[f64; N_FREE]) -> Self {
        let mut p = [0.0; N_PARAMS];
        for (&i, &v) in FREE_INDEX.iter().zip(r) {
            p[i] = v;
        }
        p[19] = p[1];
        p[20] = p[2];
        p[21] = p[3];
        p[22] = p[4];
        Self::from_array(&p)
    }

    pub fn free(&self) -> [f64; N_FREE] {
        let p = self.to_array();
        FREE_INDEX.map(|i| p[i])
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |what: &str| Err(TaskError::Simulation(format!("invalid lens scene: {what}")));
        let p = self.to_array();
        if p.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        if !(self.mass.theta_e > 0.0) {
            return bad("Einstein radius must be positive");
        }
        for (name, l) in [("source", &self.source), ("lens light", &self.lens_light)] {
            if !(l.r_eff > 0.0) || !(0.5..=8.0).contains(&l.n) || l.e1.hypot(l.e2) >= 1.0 {
                return bad(name);
            }
        }
        if self.mass.e1.hypot(self.mass.e2) >= 1.0 {
            return bad("mass ellipticity");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instrument {
    pub size: usize,
    /// Arcseconds per pixel.
    pub pixel_scale: f64,
    /// Arcseconds.
    pub psf_fwhm: f64,
    pub background_rms: f64,
    /// Seconds.
    pub exposure_time: f64,
}

impl Default for Instrument {
    /// 64×64 pixels covering the same 6.4″ field as 160 pixels at 0.04″.
    fn default() -> Self {
        Self { size: 64, pixel_scale: 0.1, psf_fwhm: 0.3, background_rms: 0.01, exposure_time: 1000.0 }
    }
}

impl Instrument {
    pub fn full_resolution() -> Self {
        Self { size: 160, pixel_scale: 0.04, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.size == 0 || [self.pixel_scale, self.psf_fwhm, self.background_rms, self.exposure_time].iter().any(|v| !(*v > 0.0)) {
            return Err(TaskError::Config("instrument values must be positive".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensObservation {
    pub size: usize,
    pub image: Vec<f64>,
    /// Per-pixel noise standard deviation.
    pub sigma: Vec<f64>,
}

impl LensObservation {
    /// An observed image with the noise level estimated from the image itself.
    pub fn from_image(image: Vec<f64>, instrument: &Instrument) -> Self {
        let sigma = noise_sigma(&image, instrument);
        Self { size: instrument.size, image, sigma }
    }
}

/// Uniform prior ranges; angles in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensPrior {
    pub theta_e: (f64, f64),
    pub center: (f64, f64),
    pub angle_deg: (f64, f64),
    pub axis_ratio: (f64, f64),
    pub gamma_ext: (f64, f64),
    pub amplitude: (f64, f64),
    pub r_eff: (f64, f64),
    pub sersic_n: (f64, f64),
}

impl Default for LensPrior {
    fn default() -> Self {
        Self {
            theta_e: (0.5, 2.0),
            center: (-0.2, 0.2),
            angle_deg: (0.0, 180.0),
            axis_ratio: (0.25, 1.0),
            gamma_ext: (0.0, 0.1),
            amplitude: (5.0, 10.0),
            r_eff: (0.5, 2.0),
            sersic_n: (1.5, 4.0),
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..hi)
}

fn width((lo, hi): (f64, f64)) -> f64 {
    hi - lo
}

fn inside(v: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&v)
}

impl LensPrior {
    fn ellipticity(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let phi = draw(rng, self.angle_deg).to_radians();
        ellipticity_from_angle(phi, draw(rng, self.axis_ratio))
    }

    /// Mock-data convention: lens light shares the mass centre and
    /// ellipticity, and the shear origin is 0.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> LensScene {
        let theta_e = draw(rng, self.theta_e);
        let (e1, e2) = self.ellipticity(rng);
        let (x, y) = (draw(rng, self.center), draw(rng, self.center));
        let g = draw(rng, self.gamma_ext);
        let (gamma1, gamma2) = shear_from_polar(g, draw(rng, self.angle_deg).to_radians());
        let light = |rng: &mut ChaCha8Rng| SersicLight {
            amplitude: draw(rng, self.amplitude),
            r_eff: draw(rng, self.r_eff),
            n: draw(rng, self.sersic_n),
            e1: 0.0,
            e2: 0.0,
            x: 0.0,
            y: 0.0,
        };
        let mut source = light(rng);
        let (se1, se2) = self.ellipticity(rng);
        source.e1 = se1;
        source.e2 = se2;
        source.x = draw(rng, self.center);
        source.y = draw(rng, self.center);
        let mut lens_light = light(rng);
        lens_light.e1 = e1;
        lens_light.e2 = e2;
        lens_light.x = x;
        lens_light.y = y;
        LensScene {
            mass: LensMass { theta_e, e1, e2, x, y },
            shear: ExternalShear { gamma1, gamma2, ra0: 0.0, dec0: 0.0 },
            source,
            lens_light,
        }
    }

    /// Log density of the 17 free parameters, with the (e1, e2) and
    /// (γ1, γ2) densities induced by the uniform angle, axis-ratio and
    /// strength priors.
    pub fn log_prob_free(&self, r: &[f64; N_FREE]) -> f64 {
        let angle_width = width(self.angle_deg).to_radians();
        let ellip = |e1: f64, e2: f64| -> f64 {
            let c = e1.hypot(e2);
            let q = (1.0 - c) / (1.0 + c);
            if !inside(q, self.axis_ratio) || c == 0.0 {
                return f64::NEG_INFINITY;
            }
            // p(e) = p(φ) p(q) / (2c · |dc/dq|), dc/dq = −2/(1+q)²
            -(angle_width * width(self.axis_ratio)).ln() - (4.0 * c / (1.0 + q).powi(2)).ln()
        };
        let shear = |g1: f64, g2: f64| -> f64 {
            let g = g1.hypot(g2);
            if !inside(g, self.gamma_ext) || g == 0.0 {
                return f64::NEG_INFINITY;
            }
            -(angle_width * width(self.gamma_ext)).ln() - (2.0 * g).ln()
        };
        let uni = |v: f64, range: (f64, f64)| if inside(v, range) { -width(range).ln() } else { f64::NEG_INFINITY };
        uni(r[0], self.theta_e)
            + ellip(r[1], r[2])
            + uni(r[3], self.center)
            + uni(r[4], self.center)
            + shear(r[5], r[6])
            + uni(r[7], self.amplitude)
            + uni(r[8], self.r_eff)
            + uni(r[9], self.sersic_n)
            + ellip(r[10], r[11])
            + uni(r[12], self.center)
            + uni(r[13], self.center)
            + uni(r[14], self.amplitude)
            + uni(r[15], self.r_eff)
            + uni(r[16], self.sersic_n)
    }
}

/// Affine standardization of the 23 scene parameters by prior moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowCoords {
    pub loc: [f64; N_PARAMS],
    pub scale: [f64; N_PARAMS],
}

impl FlowCoords {
    /// Moments from a fixed-seed prior sample; parameters that never vary
    /// (the shear origin) get unit scale.
    pub fn from_prior(prior: &LensPrior) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1e45);
        let n = 20_000;
        let mut s1 = [0.0; N_PARAMS];
        let mut s2 = [0.0; N_PARAMS];
        for _ in 0..n {
            let p = prior.sample(&mut rng).to_array();
            for i in 0..N_PARAMS {
                s1[i] += p[i] / n as f64;
                s2[i] += p[i] * p[i] / n as f64;
            }
        }
        let scale = std::array::from_fn(|i| {
            let sd = (s2[i] - s1[i] * s1[i]).max(0.0).sqrt();
            if sd < 1e-9 {
                1.0
            } else {
                sd
            }
        });
        Self { loc: s1, scale }
    }

    pub fn to_flow(&self, scene: &LensScene) -> Vec<f64> {
        let p = scene.to_array();
        (0..N_PARAMS).map(|i| (p[i] - self.loc[i]) / self.scale[i]).collect()
    }

    pub fn from_flow(&self, u: &[f64]) -> LensScene {
        LensScene::from_array(&std::array::from_fn(|i| self.loc[i] + self.scale[i] * u[i]))
    }
}

/// Observation transform for the flow: asinh compresses the bright lens core.
pub fn image_to_flow(image: &[f64]) -> Vec<f64> {
    image.iter().map(|v| v.asinh()).collect()
}

/// The lensing simulator in flow coordinates, for training and controls.
#[derive(Clone, Debug)]
pub struct LensSimulator {
    pub prior: LensPrior,
    pub coords: FlowCoords,
    eval: Chi2Eval,
}

impl LensSimulator {
    pub fn new(instrument: Instrument, prior: LensPrior) -> Result<Self, TaskError> {
        instrument.validate()?;
        Ok(Self { coords: FlowCoords::from_prior(&prior), prior, eval: Chi2Eval::new(&instrument) })
    }

    pub fn instrument(&self) -> &Instrument {
        self.eval.instrument()
    }

    pub fn chi2_eval(&self) -> &Chi2Eval {
        &self.eval
    }

    /// A prior draw and its noisy observation.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (LensScene, LensObservation) {
        let scene = self.prior.sample(rng);
        let z = crate::flow::normal_vec(self.instrument().pixels(), rng);
        (scene, render(&scene, self.instrument(), &z))
    }
}

impl Simulator for LensSimulator {
    fn dim_theta(&self) -> usize {
        N_PARAMS
    }
    fn dim_x(&self) -> usize {
        self.instrument().pixels()
    }
    fn noise_dim(&self) -> usize {
        self.instrument().pixels()
    }
    fn differentiable(&self) -> bool {
        true
    }

    fn simulate(&self, u: &[f64], z: &[f64]) -> Result<Vec<f64>, TaskError> {
        let scene = self.coords.from_flow(u);
        scene.validate()?;
        Ok(image_to_flow(&render(&scene, self.instrument(), z).image))
    }

    /// χ² of the noiseless render against the raw image, with the noise level
    /// estimated from the image.
    fn cost_grad(&self, u: &[f64], x_raw: &[f64], _z: &[f64]) -> Result<(f64, Vec<f64>), TaskError> {
        if u.len() != N_PARAMS || x_raw.len() != self.instrument().pixels() {
            return Err(TaskError::Config("lens parameter or image size mismatch".into()));
        }
        let scene = self.coords.from_flow(u);
        scene.validate()?;
        let sigma = noise_sigma(x_raw, self.instrument());
        let (c, g) = self.eval.value_grad(&scene.to_array(), x_raw, &sigma);
        if !c.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(TaskError::Simulation("non-finite χ²".into()));
        }
        Ok((c, (0..N_PARAMS).map(|i| g[i] * self.coords.scale[i]).collect()))
    }
}

