use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{hardest_contrastive_on_tape, Model, NetworkInput, TrainConfig};
use crate::autodiff::{Binder, Tape};
use crate::data::RegistrationPair;
use crate::error::{Error, Result};
use crate::registration::{KdTree, RigidTransform};
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    /// Pairs skipped because fewer than two positives were found.
    pub skipped_pairs: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (e, l) in self.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{},{:.12e}\n", e + 1, l));
        }
        s
    }
}

/// Source voxels whose ground-truth image has a target voxel within
/// `max_dist`, paired with that nearest target voxel.
pub fn positive_pairs(
    src_xyz: &[[f64; 3]],
    dst_xyz: &[[f64; 3]],
    gt: &RigidTransform,
    max_dist: f64,
) -> Vec<(usize, usize)> {
    let tree = KdTree::from_points(dst_xyz);
    let lim = max_dist * max_dist;
    src_xyz
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| {
            let (j, d2) = tree.nearest(&gt.apply(p))?;
            (d2 <= lim).then_some((i, j))
        })
        .collect()
}

/// SGD with momentum, one pair per step.
pub fn train(model: &mut Model, dataset: &[RegistrationPair], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("train: empty dataset"));
    }
    let inputs: Vec<(NetworkInput, NetworkInput)> = dataset
        .iter()
        .map(|p| {
            Ok((
                model.prepare(&p.src.points, Some(&p.src_image))?,
                model.prepare(&p.dst.points, Some(&p.dst_image))?,
            ))
        })
        .collect::<Result<_>>()?;
    let radius = cfg.positive_radius * model.config.voxel_size;
    let positives: Vec<Vec<(usize, usize)>> = dataset
        .iter()
        .zip(&inputs)
        .map(|(p, (a, b))| positive_pairs(&a.points_xyz, &b.points_xyz, &p.gt, radius))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<DenseTensor> = model
        .params
        .iter()
        .map(|(_, p)| DenseTensor::zeros(p.value.shape()))
        .collect();
    let per_epoch = if cfg.pairs_per_epoch == 0 {
        dataset.len()
    } else {
        cfg.pairs_per_epoch
    };
    let mut report = TrainReport::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = Vec::with_capacity(per_epoch);
        while order.len() < per_epoch {
            let mut round: Vec<usize> = (0..dataset.len()).collect();
            round.shuffle(&mut rng);
            order.extend(round);
        }
        order.truncate(per_epoch);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0;
        for idx in order {
            let pos = &positives[idx];
            if pos.len() < 2 {
                report.skipped_pairs += 1;
                continue;
            }
            let take = cfg.anchors_per_pair.min(pos.len());
            let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, pos.len(), take).into_vec();
            picks.sort_unstable();
            let batch: Vec<(usize, usize)> = picks.iter().map(|&k| pos[k]).collect();

            let mut tape = Tape::new();
            let mut binder = Binder::new(&model.params);
            let (a, b) = &inputs[idx];
            let fa = model.forward(&mut tape, &mut binder, a)?;
            let fb = model.forward(&mut tape, &mut binder, b)?;
            let loss =
                match hardest_contrastive_on_tape(&mut tape, fa.descriptors, fb.descriptors, &batch, cfg) {
                    Ok(l) => l,
                    Err(Error::Contract(_)) => {
                        report.skipped_pairs += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training { step, loss: value });
            }
            let grads = tape.backward(loss)?;
            drop(binder);
            model.params.zero_grad();
            model.params.accumulate(&tape, &grads);
            for (param, v) in model.params.iter_mut().zip(velocity.iter_mut()) {
                for ((vi, gi), pi) in v
                    .data_mut()
                    .iter_mut()
                    .zip(param.grad.data())
                    .zip(param.value.data_mut())
                {
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= cfg.learning_rate * *vi;
                }
            }
            report.step_losses.push(value);
            epoch_sum += value;
            epoch_steps += 1;
            step += 1;
        }
        if epoch_steps == 0 {
            return Err(Error::Empty(
                "train: no pair yielded enough positive correspondences",
            ));
        }
        report.epoch_losses.push(epoch_sum / epoch_steps as f64);
    }
    Ok(report)
}
