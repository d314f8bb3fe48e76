use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning-rate schedule over a run of `total_steps` optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `initial · drop_factor^(milestones passed)`; milestones are fractions
    /// of the run.
    StepDecay {
        initial: f64,
        drop_factor: f64,
        milestones: Vec<f64>,
    },
    /// `initial · ½(1 + cos(π·step/total))`.
    Cosine { initial: f64 },
}

pub fn lr_at(schedule: &LrSchedule, step: usize, total_steps: usize) -> f64 {
    match schedule {
        LrSchedule::StepDecay {
            initial,
            drop_factor,
            milestones,
        } => {
            let passed = milestones
                .iter()
                .filter(|&&m| step as f64 >= m * total_steps as f64)
                .count();
            initial * drop_factor.powi(passed as i32)
        }
        LrSchedule::Cosine { initial } => {
            if total_steps == 0 {
                return *initial;
            }
            initial * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
        }
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(pub Vec<Tensor>);

impl Velocity {
    pub fn zeros(net: &Network) -> Self {
        Self(net.zero_grads())
    }
}

/// `v ← momentum·v + g; θ ← θ − lr·v`.
///
/// Gradients are checked before anything is modified, so a divergence error
/// leaves the network untouched.
pub fn sgd_step(net: &mut Network, grads: &[Tensor], velocity: &mut Velocity, lr: f64, momentum: f64) -> Result<()> {
    let params = net.params_mut();
    if grads.len() != params.len() || velocity.0.len() != params.len() {
        return Err(Error::Consistency(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.0.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::Dimension(format!(
                "gradient for `{}` is {:?}, parameter is {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Divergence { param: p.name.clone() });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.0.iter_mut()) {
        for ((theta, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *theta -= lr * *vi;
        }
        if !p.value.is_finite() {
            return Err(Error::Divergence { param: p.name.clone() });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn tiny() -> Network {
        Network::new(vec![2], vec![LayerSpec::Dense { in_dim: 2, out_dim: 2 }], 2, 5).unwrap()
    }

    #[test]
    fn step_decay_at_sixty_percent() {
        let s = LrSchedule::StepDecay {
            initial: 0.1,
            drop_factor: 0.1,
            milestones: vec![0.5, 0.75],
        };
        assert!((lr_at(&s, 60, 100) - 0.01).abs() < 1e-15);
        assert_eq!(lr_at(&s, 49, 100), 0.1);
        assert!((lr_at(&s, 75, 100) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::Cosine { initial: 0.001 };
        assert_eq!(lr_at(&s, 0, 100), 0.001);
        assert!((lr_at(&s, 50, 100) - 0.0005).abs() < 1e-18);
        assert!(lr_at(&s, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn plain_step_to_zero() {
        let mut net = tiny();
        let grads: Vec<Tensor> = net.params().iter().map(|p| p.value.clone()).collect();
        let mut v = Velocity::zeros(&net);
        sgd_step(&mut net, &grads, &mut v, 1.0, 0.0).unwrap();
        assert!(net.params().iter().all(|p| p.value.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn momentum_two_steps() {
        let mut net = tiny();
        let start: Vec<f64> = net.params()[0].value.data().to_vec();
        let g = Tensor::filled(&[2, 2], 0.5);
        let grads = vec![g.clone(), Tensor::zeros(&[2])];
        let mut v = Velocity::zeros(&net);
        let lr = 0.1;
        sgd_step(&mut net, &grads, &mut v, lr, 0.9).unwrap();
        let after1: Vec<f64> = net.params()[0].value.data().to_vec();
        sgd_step(&mut net, &grads, &mut v, lr, 0.9).unwrap();
        let after2: Vec<f64> = net.params()[0].value.data().to_vec();
        for i in 0..4 {
            assert!((start[i] - after1[i] - lr * 0.5).abs() < 1e-15);
            assert!((after1[i] - after2[i] - lr * 1.9 * 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut net = tiny();
        let before = net.clone();
        let grads: Vec<Tensor> = net.params().iter().map(|p| p.value.map(|x| x * 3.0 + 1.0)).collect();
        let mut v = Velocity::zeros(&net);
        sgd_step(&mut net, &grads, &mut v, 0.0, 0.9).unwrap();
        for (a, b) in net.params().iter().zip(before.params()) {
            assert!(a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut net = tiny();
        let mut grads = net.zero_grads();
        grads[1].data_mut()[0] = f64::NAN;
        let mut v = Velocity::zeros(&net);
        match sgd_step(&mut net, &grads, &mut v, 0.1, 0.9) {
            Err(Error::Divergence { param }) => assert_eq!(param, "layer0_bias"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
