use serde::{Deserialize, Serialize};

use super::{lr_at, sgd_step, stack_logits, LrSchedule, Network, Velocity};
use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, oecc_loss, OeccConfig};

/// Optimizer settings for one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// In-distribution examples per step.
    pub batch_in: usize,
    /// Outlier-exposure examples per step; only read when an OE set is given.
    pub batch_oe: usize,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_in == 0 || self.batch_oe == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// OE batches are drawn from their own shuffle stream so the in-distribution
/// batch order is the same with or without an OE set.
const OE_STREAM_SALT: u64 = 0x0E0E_5EED_0E0E_5EED;

struct OeCursor {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl OeCursor {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            n,
            batch,
            seed: seed ^ OE_STREAM_SALT,
            epoch: 0,
            pending: batch_indices(n, batch, seed ^ OE_STREAM_SALT, 0).into_iter(),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        match self.pending.next() {
            Some(b) => b,
            None => {
                self.epoch += 1;
                self.pending = batch_indices(self.n, self.batch, self.seed, self.epoch).into_iter();
                self.pending.next().expect("non-empty OE set")
            }
        }
    }
}

enum Objective<'a> {
    CrossEntropy,
    Oecc { oe: &'a Dataset, cfg: OeccConfig },
}

fn check_labels(net: &Network, d_in: &Dataset) -> Result<()> {
    let k = net.num_classes();
    if let Some(&label) = d_in.labels()?.iter().find(|&&y| y >= k) {
        return Err(Error::Label { label, num_classes: k });
    }
    if d_in.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    Ok(())
}

fn run(
    net: &mut Network,
    d_in: &Dataset,
    config: &TrainConfig,
    objective: Objective<'_>,
    observer: &mut dyn FnMut(usize, &Network),
) -> Result<()> {
    config.validate()?;
    check_labels(net, d_in)?;
    let labels = d_in.labels()?;
    let n = d_in.len();
    let total_steps = config.epochs * n.div_ceil(config.batch_in);
    let mut velocity = Velocity::zeros(net);
    let mut oe_cursor = match &objective {
        Objective::Oecc { oe, .. } => {
            if oe.is_empty() {
                return Err(Error::InsufficientData("empty outlier-exposure set".into()));
            }
            Some(OeCursor::new(oe.len(), config.batch_oe, config.seed))
        }
        Objective::CrossEntropy => None,
    };

    let mut step = 0;
    for epoch in 0..config.epochs {
        for idx in batch_indices(n, config.batch_in, config.seed, epoch as u64) {
            let lr = lr_at(&config.lr_schedule, step, total_steps);
            let xs = d_in.images.tensor().select(&idx)?;
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let traces = net.forward_batch(&xs)?;
            let logits = stack_logits(&traces)?;
            let mut grads = net.zero_grads();
            let loss = match &objective {
                Objective::CrossEntropy => {
                    let l = ce_loss(&logits, &ys)?;
                    net.accumulate_backward_batch(&traces, &l.grad, &mut grads)?;
                    l.value
                }
                Objective::Oecc { oe, cfg } => {
                    let oe_idx = oe_cursor.as_mut().expect("cursor exists").next_batch();
                    let oe_xs = oe.images.tensor().select(&oe_idx)?;
                    let oe_traces = net.forward_batch(&oe_xs)?;
                    let oe_logits = stack_logits(&oe_traces)?;
                    let l = oecc_loss(&logits, &ys, &oe_logits, cfg)?;
                    net.accumulate_backward_batch(&traces, &l.grad_in, &mut grads)?;
                    if cfg.lambda2 != 0.0 {
                        net.accumulate_backward_batch(&oe_traces, &l.grad_oe, &mut grads)?;
                    }
                    l.value
                }
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { param: "loss".into() });
            }
            sgd_step(net, &grads, &mut velocity, lr, config.momentum)?;
            step += 1;
            observer(step, net);
        }
    }
    Ok(())
}

/// Fraction of examples whose argmax logit equals the label.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    let labels = data.labels()?;
    let predicted = net.predict_batch(data.images.tensor())?;
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Cross-entropy training; returns the network and its training accuracy
/// measured after the last epoch.
pub fn train(net: Network, d_in: &Dataset, config: &TrainConfig) -> Result<(Network, f64)> {
    train_observed(net, d_in, config, &mut |_, _| {})
}

/// [`train`] with a callback after every optimizer step.
pub fn train_observed(
    mut net: Network,
    d_in: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn FnMut(usize, &Network),
) -> Result<(Network, f64)> {
    run(&mut net, d_in, config, Objective::CrossEntropy, observer)?;
    let acc = accuracy(&net, d_in)?;
    Ok((net, acc))
}

/// Cross-entropy fine-tuning: [`train`] without the accuracy pass.
pub fn finetune_ce(mut net: Network, d_in: &Dataset, config: &TrainConfig) -> Result<Network> {
    run(&mut net, d_in, config, Objective::CrossEntropy, &mut |_, _| {})?;
    Ok(net)
}

/// Fine-tunes with the OECC objective on joint in-distribution / OE batches.
pub fn finetune_oecc(
    net: Network,
    d_in: &Dataset,
    d_oe: &Dataset,
    config: &TrainConfig,
    oecc: OeccConfig,
) -> Result<Network> {
    finetune_oecc_observed(net, d_in, d_oe, config, oecc, &mut |_, _| {})
}

pub fn finetune_oecc_observed(
    mut net: Network,
    d_in: &Dataset,
    d_oe: &Dataset,
    config: &TrainConfig,
    oecc: OeccConfig,
    observer: &mut dyn FnMut(usize, &Network),
) -> Result<Network> {
    oecc.validate()?;
    run(
        &mut net,
        d_in,
        config,
        Objective::Oecc { oe: d_oe, cfg: oecc },
        observer,
    )?;
    Ok(net)
}
