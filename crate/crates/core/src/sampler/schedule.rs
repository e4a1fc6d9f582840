use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constants of the Karras et al. noise-level discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }
}

/// Strictly decreasing noise levels `sigma_T > ... > sigma_1 > sigma_0 = 0`,
/// stored from the noisiest level down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    pub rho: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl NoiseSchedule {
    /// Number of positive levels (sampling steps).
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    /// All `T + 1` levels, noisiest first, ending in 0.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// `sigma_T`, the starting level.
    pub fn sigma_start(&self) -> f64 {
        self.sigmas[0]
    }

    /// Builds a schedule from explicit levels, checking the invariants.
    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 || *sigmas.last().unwrap() != 0.0 {
            return Err(Error::InvalidParameter(
                "a schedule needs at least one positive level and must end at 0".into(),
            ));
        }
        if sigmas.windows(2).any(|w| !(w[0] > w[1])) || !sigmas[0].is_finite() {
            return Err(Error::InvalidParameter(
                "schedule levels must be finite and strictly decreasing".into(),
            ));
        }
        let sigma_min = sigmas[sigmas.len() - 2];
        let sigma_max = sigmas[0];
        Ok(Self {
            sigmas,
            rho: f64::NAN,
            sigma_min,
            sigma_max,
        })
    }
}

/// `sigma_i = (max^(1/rho) + i/(T-1) (min^(1/rho) - max^(1/rho)))^rho` for
/// `i = 0..T`, followed by a final 0. With `T = 1` the only level is `sigma_max`.
pub fn karras_schedule(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidParameter("schedule needs at least one step".into()));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidParameter(format!("rho must be positive, got {rho}")));
    }
    let max_inv = sigma_max.powf(1.0 / rho);
    let min_inv = sigma_min.powf(1.0 / rho);
    let mut sigmas: Vec<f64> = if steps == 1 {
        vec![sigma_max]
    } else {
        (0..steps)
            .map(|i| {
                let frac = i as f64 / (steps - 1) as f64;
                (max_inv + frac * (min_inv - max_inv)).powf(rho)
            })
            .collect()
    };
    // Pin the endpoints exactly; powf round trips can be off by an ulp.
    sigmas[0] = sigma_max;
    if steps > 1 {
        sigmas[steps - 1] = sigma_min;
    }
    sigmas.push(0.0);
    Ok(NoiseSchedule {
        sigmas,
        rho,
        sigma_min,
        sigma_max,
    })
}

impl ScheduleParams {
    pub fn build(&self, steps: usize) -> Result<NoiseSchedule> {
        karras_schedule(steps, self.sigma_min, self.sigma_max, self.rho)
    }
}
