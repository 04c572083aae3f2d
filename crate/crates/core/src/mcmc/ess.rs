use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Normalized autocorrelation of one series via zero-padded FFT.
fn autocorr(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = (2 * n).next_power_of_two();
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(m, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(m).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(m).process(&mut buf);
    let c0 = buf[0].re;
    if c0 <= 0.0 {
        return vec![1.0; n];
    }
    buf[..n].iter().map(|c| c.re / c0).collect()
}

/// Integrated autocorrelation time, averaging the autocorrelation over
/// walkers and truncating with Sokal's window (c = 5).
pub fn autocorr_time(traces: &[Vec<f64>]) -> f64 {
    let n = traces.first().map_or(0, Vec::len);
    if n < 2 {
        return 1.0;
    }
    let mut rho = vec![0.0; n];
    for t in traces {
        for (r, a) in rho.iter_mut().zip(autocorr(t)) {
            *r += a / traces.len() as f64;
        }
    }
    let mut tau = 1.0;
    for (m, r) in rho.iter().enumerate().skip(1) {
        tau += 2.0 * r;
        if m as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(1.0)
}

pub fn effective_sample_size(traces: &[Vec<f64>]) -> f64 {
    let total: usize = traces.iter().map(Vec::len).sum();
    total as f64 / autocorr_time(traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn ar1_time() {
        // τ = (1+φ)/(1−φ) for AR(1).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = 0.8;
        let traces: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let mut x = 0.0;
                (0..20_000)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        x = phi * x + e;
                        x
                    })
                    .collect()
            })
            .collect();
        let tau = autocorr_time(&traces);
        assert!((tau - 9.0).abs() < 0.5, "{tau}");
    }
}
