use rand::seq::SliceRandom;

use super::posenet::{heatmap_targets, PoseNet};
use crate::data::{compute_pck, mean_keypoint_error, skeleton::sample_rng, Point, SkeletonSample, NUM_JOINTS};
use crate::error::{ensure, Error, Result};
use crate::exec;
use crate::numcore::optim::{average, Adam};
use crate::numcore::{ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
    /// Held-out PCK@`radius` that must be reached.
    pub target_pck: f64,
    pub radius: f64,
}

impl Default for PoseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 2e-3,
            batch: 16,
            seed: 0,
            target_pck: 0.9,
            radius: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f32,
    pub pck: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseTrainReport {
    pub curve: Vec<EpochStats>,
    pub pck: f64,
}

impl PoseTrainReport {
    pub fn render_curve(&self) -> String {
        let mut s = String::from("epoch,loss,pck\n");
        for e in &self.curve {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.pck));
        }
        s
    }
}

/// Ground-truth figure closest to `pred`.
pub fn nearest_figure<'a>(pred: &[Point], keypoints: &'a [Point]) -> Result<&'a [Point]> {
    let mut best: Option<(f64, &[Point])> = None;
    for fig in keypoints.chunks(NUM_JOINTS) {
        let e = mean_keypoint_error(pred, fig)?;
        if best.is_none_or(|(b, _)| e < b) {
            best = Some((e, fig));
        }
    }
    best.map(|(_, f)| f).ok_or_else(|| Error::contract("sample has no keypoints"))
}

/// Mean PCK of `net` on the target images of `samples`.
pub fn evaluate_pck(net: &PoseNet, store: &ParamStore, samples: &[SkeletonSample], radius: f64) -> Result<f64> {
    ensure!(!samples.is_empty(), "no samples to evaluate");
    let scores = exec::try_map_indexed(samples.len(), |i| {
        let s = &samples[i];
        let pred = net.predict(store, &s.target_image)?;
        compute_pck(&pred, nearest_figure(&pred, &s.keypoints)?, radius)
    })?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Heatmap regression on target images until held-out PCK reaches the target.
/// Leaves the network frozen in `store`.
pub fn train_posenet(
    net: &PoseNet,
    store: &mut ParamStore,
    train: &[SkeletonSample],
    heldout: &[SkeletonSample],
    cfg: &PoseTrainConfig,
) -> Result<PoseTrainReport> {
    ensure!(!train.is_empty() && !heldout.is_empty(), "pose training needs train and held-out samples");
    ensure!(cfg.batch >= 1, "batch must be at least 1");
    let side = train[0].target_image.dims()[0] / 2;
    let targets = exec::try_map_indexed(train.len(), |i| {
        heatmap_targets(&train[i].keypoints, side, net.cfg.sigma)
    })?;
    store.set_trainable(&format!("{}/", net.prefix), true);
    let mut opt = Adam::new(cfg.lr);
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut sample_rng(cfg.seed, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch) {
            let st: &ParamStore = store;
            let per = exec::try_map_indexed(batch.len(), |b| {
                let i = batch[b];
                let mut tape = Tape::new();
                let x = tape.constant(train[i].target_image.clone());
                let y = tape.constant(targets[i].clone());
                let out = net.forward(&mut tape, st, x)?;
                let loss = tape.mse(out.heatmaps, y)?;
                let l = tape.value(loss).item();
                Ok::<_, Error>((l, tape.backward(loss)?.into_params()))
            })?;
            let (l, grads) = average(per)?;
            opt.step(store, &grads)?;
            epoch_loss += l;
            batches += 1;
        }
        let pck = evaluate_pck(net, store, heldout, cfg.radius)?;
        curve.push(EpochStats {
            epoch,
            loss: epoch_loss / batches as f32,
            pck,
        });
        if pck >= cfg.target_pck {
            break;
        }
    }
    store.set_trainable(&format!("{}/", net.prefix), false);
    let report = PoseTrainReport {
        pck: curve.last().map_or(0.0, |e| e.pck),
        curve,
    };
    if report.pck < cfg.target_pck {
        return Err(Error::NotConverged(format!(
            "{} reached PCK@{} = {:.3} < {} after {} epochs\n{}",
            net.prefix,
            cfg.radius,
            report.pck,
            cfg.target_pck,
            report.curve.len(),
            report.render_curve()
        )));
    }
    Ok(report)
}
