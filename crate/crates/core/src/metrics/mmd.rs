use super::{check_sets, MetricError, MetricReport};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance of the pooled sample (first 1000 points of each).
pub fn median_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pool: Vec<&Vec<f64>> = a.iter().take(1000).chain(b.iter().take(1000)).collect();
    let mut d = Vec::with_capacity(pool.len() * pool.len() / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            d.push(sq_dist(pool[i], pool[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    d.get(d.len() / 2).copied().unwrap_or(1.0).max(1e-12)
}

/// Unbiased MMD² with k(x, y) = exp(−‖x−y‖²/(2γ²)).
pub fn mmd2_unbiased(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: Option<f64>) -> Result<MetricReport, MetricError> {
    check_sets(a, b, 2)?;
    let gamma = bandwidth.unwrap_or_else(|| median_bandwidth(a, b));
    if !(gamma > 0.0) {
        return Err(MetricError::Input("bandwidth must be positive".into()));
    }
    let c = -0.5 / (gamma * gamma);
    let within = |s: &[Vec<f64>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                t += (c * sq_dist(&s[i], &s[j])).exp();
            }
        }
        2.0 * t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += (c * sq_dist(x, y)).exp();
        }
    }
    let v = within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64;
    Ok(MetricReport::new("mmd2", v).with_config(serde_json::json!({ "bandwidth": gamma })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_sets() {
        let a = vec![vec![0.0], vec![1.0]];
        let v = mmd2_unbiased(&a, &a, Some(1.0)).unwrap().value;
        assert!((v - ((-0.5f64).exp() - 1.0)).abs() < 1e-12);
    }
}
