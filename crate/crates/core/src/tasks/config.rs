//! Task constants. Everything a benchmark task depends on lives here so a
//! deviation from the upstream definitions is a one-line change.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ode::OdeGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LotkaVolterraConstants {
    pub x0: f64,
    pub y0: f64,
    pub grid: OdeGrid,
    pub sigma_obs: f64,
    pub prior_log_mean: [f64; 4],
    pub prior_log_std: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SirConstants {
    pub population: f64,
    pub i0: f64,
    pub grid: OdeGrid,
    pub trials: u64,
    pub prior_log_mean: [f64; 2],
    pub prior_log_std: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoMoonsConstants {
    pub r_mean: f64,
    pub r_std: f64,
    pub offset: f64,
    pub prior_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlcpConstants {
    pub prior_bound: f64,
    pub draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianConstants {
    pub dim: usize,
    pub prior_std: f64,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConstants {
    pub lotka_volterra: LotkaVolterraConstants,
    pub sir: SirConstants,
    pub two_moons: TwoMoonsConstants,
    pub slcp: SlcpConstants,
    pub linear_gaussian: LinearGaussianConstants,
}

impl Default for TaskConstants {
    fn default() -> Self {
        Self {
            lotka_volterra: LotkaVolterraConstants {
                x0: 30.0,
                y0: 1.0,
                grid: OdeGrid {
                    t0: 0.0,
                    t1: 20.0,
                    n_internal_steps: 400,
                    obs_times: (0..10).map(|i| 2.1 * i as f64).collect(),
                },
                sigma_obs: 0.1,
                prior_log_mean: [-0.125, -3.0, -0.125, -3.0],
                prior_log_std: [0.5; 4],
            },
            sir: SirConstants {
                population: 1e6,
                i0: 1.0,
                grid: OdeGrid {
                    t0: 0.0,
                    t1: 160.0,
                    n_internal_steps: 800,
                    obs_times: (1..=10).map(|i| 16.0 * i as f64).collect(),
                },
                trials: 1000,
                prior_log_mean: [0.4f64.ln(), 0.125f64.ln()],
                prior_log_std: [0.5, 0.2],
            },
            two_moons: TwoMoonsConstants { r_mean: 0.1, r_std: 0.01, offset: 0.25, prior_bound: 1.0 },
            slcp: SlcpConstants { prior_bound: 3.0, draws: 4 },
            linear_gaussian: LinearGaussianConstants { dim: 2, prior_std: 1.0, noise_std: 0.5 },
        }
    }
}

impl TaskConstants {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Stable hash of the serialized constants, embedded in dataset headers.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("serializable");
        crate::ad::hex(&Sha256::digest(bytes))[..16].to_string()
    }
}
