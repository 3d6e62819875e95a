use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Zero-initialized moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first_moment: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        let second_moment = first_moment.clone();
        Self {
            config,
            first_moment,
            second_moment,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }
}

/// One bias-corrected Adam update over every parameter.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "param #{i} {:?}, grad {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    state.first_moment[i].shape()
                ),
            ));
        }
    }

    state.step_count += 1;
    let AdamConfig { lr, beta1, beta2, epsilon } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .into_iter()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(lr: f64) -> AdamState {
        AdamState::new(AdamConfig::with_lr(lr), [&[1usize][..]])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut st = scalar_state(0.1);
        adam_step([&mut p], &[Tensor::scalar(1.0)], &mut st).unwrap();
        // m_hat = 1, v_hat = 1 -> 0.1 / (1 + 1e-8)
        assert!((p.data()[0] + 0.1).abs() < 1e-8);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), [&[3usize][..]]);
        adam_step([&mut p], &[Tensor::zeros(&[3])], &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn two_steps_second_is_smaller_than_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut st = scalar_state(0.1);
        adam_step([&mut p], &[Tensor::scalar(1.0)], &mut st).unwrap();
        let after_one = p.data()[0];
        adam_step([&mut p], &[Tensor::scalar(1.0)], &mut st).unwrap();
        let second = (p.data()[0] - after_one).abs();
        assert_eq!(st.step_count(), 2);
        assert!(second < 0.1, "{second}");
        assert!(second > 0.099, "{second}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(AdamConfig::default(), [&[2usize][..]]);
        assert!(adam_step([&mut p], &[Tensor::zeros(&[3])], &mut st).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
