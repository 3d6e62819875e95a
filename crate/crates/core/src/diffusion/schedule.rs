use std::f64::consts::FRAC_PI_2;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest signal level at `t = t_max`.
pub const ALPHA_BAR_MIN: f64 = 5e-3;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid(format!("unknown schedule '{other}'"))),
        }
    }
}

/// Cumulative signal coefficients over `[0, t_max]`.
///
/// The cosine curve is stretched so that `alpha_bar(t_max) == ALPHA_BAR_MIN`
/// instead of reaching zero; time is continuous, the training grid is the
/// integers `0..=t_max`. Noise levels `sigma = sqrt((1 - ab) / ab)` are the
/// variance-exploding view of the same process and are what the trajectory
/// jumps and gamma-sampling operate on.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    t_max: usize,
    theta0: f64,
    u_max: f64,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let s = COSINE_OFFSET;
        let theta0 = FRAC_PI_2 * s / (1.0 + s);
        let theta_end = (ALPHA_BAR_MIN.sqrt() * theta0.cos()).acos();
        let u_max = theta_end / FRAC_PI_2 * (1.0 + s) - s;
        Ok(Self {
            kind,
            t_max,
            theta0,
            u_max,
        })
    }

    pub fn cosine(t_max: usize) -> Self {
        Self::new(ScheduleKind::Cosine, t_max).expect("t_max > 0")
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    fn theta(&self, t: f64) -> f64 {
        let u = self.u_max * t / self.t_max as f64;
        FRAC_PI_2 * (u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
    }

    pub fn alpha_bar(&self, t: f64) -> f64 {
        let c = self.theta(t).cos() / self.theta0.cos();
        c * c
    }

    /// Variance-exploding noise level at time `t`.
    pub fn sigma(&self, t: f64) -> f64 {
        let ab = self.alpha_bar(t);
        ((1.0 - ab) / ab).max(0.0).sqrt()
    }

    /// Inverse of [`sigma`](Self::sigma).
    pub fn time_for_sigma(&self, sigma: f64) -> f64 {
        if sigma <= 0.0 {
            return 0.0;
        }
        let ab = 1.0 / (1.0 + sigma * sigma);
        let theta = (ab.sqrt() * self.theta0.cos()).clamp(-1.0, 1.0).acos();
        let u = theta / FRAC_PI_2 * (1.0 + COSINE_OFFSET) - COSINE_OFFSET;
        (u * self.t_max as f64 / self.u_max).clamp(0.0, self.t_max as f64)
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.t_max as f64).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, {}]", self.t_max)));
        }
        Ok(())
    }

    /// `steps + 1` evenly spaced grid indices from `t_max` down to 0.
    pub fn evenly_spaced(&self, steps: usize) -> Result<Vec<f64>> {
        if steps == 0 || steps > self.t_max {
            return Err(Error::invalid(format!(
                "step count {steps} outside [1, {}]",
                self.t_max
            )));
        }
        Ok((0..=steps)
            .map(|i| {
                let frac = (steps - i) as f64 / steps as f64;
                (self.t_max as f64 * frac).round()
            })
            .collect())
    }
}
