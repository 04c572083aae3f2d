//! Deflection and light profiles, generic over the scalar type.

use crate::ad::Real;

/// Axis ratio below which the SIE switches to its circular form.
pub const SIE_CIRCULAR_TOL: f64 = 1e-4;

/// (e1, e2) from position angle φ (radians) and axis ratio q.
pub fn ellipticity_from_angle(phi: f64, q: f64) -> (f64, f64) {
    let c = (1.0 - q) / (1.0 + q);
    (c * (2.0 * phi).cos(), c * (2.0 * phi).sin())
}

/// Inverse of [`ellipticity_from_angle`]: (φ in [0, π), q).
pub fn angle_from_ellipticity(e1: f64, e2: f64) -> (f64, f64) {
    let c = e1.hypot(e2);
    let phi = 0.5 * e2.atan2(e1);
    (phi.rem_euclid(std::f64::consts::PI), (1.0 - c) / (1.0 + c))
}

/// Shear components from strength and orientation (radians).
pub fn shear_from_polar(gamma: f64, phi: f64) -> (f64, f64) {
    (gamma * (2.0 * phi).cos(), gamma * (2.0 * phi).sin())
}

pub fn sersic_bn(n: f64) -> f64 {
    1.9992 * n - 0.3271
}

/// Per-scene SIE quantities, computed once and reused for every pixel.
#[derive(Clone, Copy, Debug)]
pub struct Sie<T> {
    theta_e: T,
    cx: T,
    cy: T,
    /// None in the circular branch.
    ellip: Option<SieEllip<T>>,
}

#[derive(Clone, Copy, Debug)]
struct SieEllip<T> {
    cos: T,
    sin: T,
    q: T,
    /// θ_E·√q / √(1 − q²)
    amp: T,
    /// √(1 − q²)
    f: T,
}

impl<T: Real> Sie<T> {
    pub fn new(theta_e: T, e1: T, e2: T, cx: T, cy: T) -> Self {
        let c = (e1 * e1 + e2 * e2).sqrt();
        let q = (T::cst(1.0) - c) / (c + 1.0);
        let ellip = if 1.0 - q.val() < SIE_CIRCULAR_TOL {
            None
        } else {
            let phi = e2.atan2(e1) * 0.5;
            let f = (T::cst(1.0) - q * q).sqrt();
            Some(SieEllip { cos: phi.cos(), sin: phi.sin(), q, amp: theta_e * q.sqrt() / f, f })
        };
        Self { theta_e, cx, cy, ellip }
    }

    pub fn is_circular(&self) -> bool {
        self.ellip.is_none()
    }

    /// Deflection at (x, y); zero exactly at the centre.
    pub fn deflection(&self, x: f64, y: f64) -> (T, T) {
        let dx = T::cst(x) - self.cx;
        let dy = T::cst(y) - self.cy;
        match &self.ellip {
            None => {
                let r = (dx * dx + dy * dy).sqrt();
                if r.val() == 0.0 {
                    return (T::cst(0.0), T::cst(0.0));
                }
                (self.theta_e * dx / r, self.theta_e * dy / r)
            }
            Some(e) => {
                let xp = e.cos * dx + e.sin * dy;
                let yp = e.cos * dy - e.sin * dx;
                let psi = (e.q * e.q * xp * xp + yp * yp).sqrt();
                if psi.val() == 0.0 {
                    return (T::cst(0.0), T::cst(0.0));
                }
                let ax = e.amp * (e.f * xp / psi).atan();
                let ay = e.amp * (e.f * yp / psi).atanh();
                (e.cos * ax - e.sin * ay, e.sin * ax + e.cos * ay)
            }
        }
    }
}

/// Circular isothermal reference form, for checks.
pub fn sis_deflection(theta_e: f64, x: f64, y: f64) -> (f64, f64) {
    let r = x.hypot(y);
    if r == 0.0 {
        return (0.0, 0.0);
    }
    (theta_e * x / r, theta_e * y / r)
}

/// External shear about (ra0, dec0).
pub fn shear_deflection<T: Real>(g1: T, g2: T, ra0: T, dec0: T, x: f64, y: f64) -> (T, T) {
    let dx = T::cst(x) - ra0;
    let dy = T::cst(y) - dec0;
    (g1 * dx + g2 * dy, g2 * dx - g1 * dy)
}

/// Per-scene Sérsic quantities.
#[derive(Clone, Copy, Debug)]
pub struct Sersic<T> {
    amp: T,
    inv_reff2: T,
    inv_n: T,
    bn: T,
    e1: T,
    e2: T,
    /// (1 + c²)/(1 − c²) and 2/(1 − c²)
    k0: T,
    k1: T,
    cx: T,
    cy: T,
}

impl<T: Real> Sersic<T> {
    pub fn new(amp: T, r_eff: T, n: T, e1: T, e2: T, cx: T, cy: T) -> Self {
        let c2 = e1 * e1 + e2 * e2;
        let den = T::cst(1.0) - c2;
        Self {
            amp,
            inv_reff2: T::cst(1.0) / (r_eff * r_eff),
            inv_n: T::cst(1.0) / n,
            bn: n * 1.9992 - 0.3271,
            e1,
            e2,
            k0: (c2 + 1.0) / den,
            k1: T::cst(2.0) / den,
            cx,
            cy,
        }
    }

    /// Elliptical radius squared: q·x'² + y'²/q in the profile frame,
    /// written directly in (e1, e2).
    pub fn radius2(&self, x: T, y: T) -> T {
        let dx = x - self.cx;
        let dy = y - self.cy;
        self.k0 * (dx * dx + dy * dy) - self.k1 * (self.e1 * (dx * dx - dy * dy) + self.e2 * dx * dy * 2.0)
    }

    pub fn brightness(&self, x: T, y: T) -> T {
        // Softened at the centre so derivatives stay finite.
        let r2 = self.radius2(x, y) * self.inv_reff2 + 1e-12;
        let s = (r2.ln() * 0.5 * self.inv_n).exp();
        self.amp * (self.bn * (T::cst(1.0) - s)).exp()
    }
}
