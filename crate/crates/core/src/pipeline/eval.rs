use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunConfig;
use crate::data::{compute_pck, mean_keypoint_error, SkeletonSample, NUM_JOINTS};
use crate::diffusion::ddim_sample;
use crate::error::{ensure, Error, Result};
use crate::exec;
use crate::model::Denoiser;
use crate::numcore::params::hex;
use crate::numcore::{ParamStore, Tensor};
use crate::perception::{count_modes, PoseNet};

/// Hash of a network's weights with its namespace stripped, so copies of one
/// network under different prefixes compare equal.
pub fn weights_fingerprint(store: &ParamStore, prefix: &str) -> String {
    let mut h = Sha256::new();
    let p = format!("{prefix}/");
    for (name, param) in store.iter() {
        if let Some(rel) = name.strip_prefix(&p) {
            h.update(rel.as_bytes());
            h.update([0]);
            for &d in param.tensor.dims() {
                h.update((d as u64).to_le_bytes());
            }
            for v in param.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex(&h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: usize,
    pub keypoint_error: f64,
    pub pck_05: f64,
    pub pck_10: f64,
    pub figures_true: usize,
    pub figures_detected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub mean_keypoint_error: f64,
    pub pck_05: f64,
    pub pck_10: f64,
    pub figure_count_error: f64,
    pub rows: Vec<SampleRow>,
}

impl AlignmentReport {
    fn from_rows(rows: Vec<SampleRow>) -> Self {
        let n = rows.len() as f64;
        let mean = |f: fn(&SampleRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            mean_keypoint_error: mean(|r| r.keypoint_error),
            pck_05: mean(|r| r.pck_05),
            pck_10: mean(|r| r.pck_10),
            figure_count_error: mean(|r| r.figures_true.abs_diff(r.figures_detected) as f64),
            rows,
        }
    }

    pub fn render_rows(&self) -> String {
        let mut s = String::from("id,keypoint_error,pck_05,pck_10,figures_true,figures_detected\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{},{}\n",
                r.id, r.keypoint_error, r.pck_05, r.pck_10, r.figures_true, r.figures_detected
            ));
        }
        s
    }

    pub fn render_summary(&self) -> String {
        format!(
            "mean_keypoint_error = {:.6}\npck_05 = {:.6}\npck_10 = {:.6}\nfigure_count_error = {:.6}\nsamples = {}\n",
            self.mean_keypoint_error,
            self.pck_05,
            self.pck_10,
            self.figure_count_error,
            self.rows.len()
        )
    }
}

/// Heatmap peaks of the head channel above this value count as figures.
pub const FIGURE_THRESHOLD: f32 = 0.4;

fn score(net: &PoseNet, store: &ParamStore, img: &Tensor, s: &SkeletonSample) -> Result<SampleRow> {
    let hm = net.predict_heatmaps(store, img)?;
    let pred = crate::perception::decode_heatmaps(&hm)?;
    let gt = crate::perception::nearest_figure(&pred, &s.keypoints)?;
    Ok(SampleRow {
        id: s.id,
        keypoint_error: mean_keypoint_error(&pred, gt)?,
        pck_05: compute_pck(&pred, gt, 0.05)?,
        pck_10: compute_pck(&pred, gt, 0.1)?,
        figures_true: s.keypoints.len() / NUM_JOINTS,
        figures_detected: count_modes(&hm, 0, FIGURE_THRESHOLD)?,
    })
}

/// Scores images (one per test sample) with the evaluation network.
pub fn score_images(
    eval_net: &PoseNet,
    eval_store: &ParamStore,
    images: &[Tensor],
    test: &[SkeletonSample],
) -> Result<AlignmentReport> {
    ensure!(
        images.len() == test.len() && !test.is_empty(),
        "{} images for {} test samples",
        images.len(),
        test.len()
    );
    let rows = exec::try_map_indexed(test.len(), |i| score(eval_net, eval_store, &images[i], &test[i]))?;
    Ok(AlignmentReport::from_rows(rows))
}

/// One DDIM sample per test pose, guided by its pose image and style slot.
/// `store` holds the base weights and, if the denoiser has one, the adapter.
pub fn generate(cfg: &RunConfig, d: &Denoiser, store: &ParamStore, test: &[SkeletonSample]) -> Result<Vec<Tensor>> {
    let schedule = cfg.schedule()?;
    let sampler = cfg.sampler();
    let dims = cfg.unet().image_dims();
    exec::try_map_indexed(test.len(), |i| {
        let s = &test[i];
        let grids = d.pose_grids(store, &s.pose_image)?;
        let slot = s.style.text_slot();
        let model = |z: &Tensor, t: usize| d.eps_guided(store, z, t, &grids, slot, sampler.guidance);
        ddim_sample(&model, &schedule, &dims, &sampler, s.id as u64)
    })
}

/// Generates from every test pose and measures how well the evaluation
/// network recovers the requested keypoints. Refuses to run when the
/// evaluation network is the loss network.
pub fn eval_alignment(
    cfg: &RunConfig,
    d: &Denoiser,
    store: &ParamStore,
    loss_net_fingerprint: &str,
    eval_net: &PoseNet,
    eval_store: &ParamStore,
    test: &[SkeletonSample],
) -> Result<(AlignmentReport, Vec<Tensor>)> {
    if weights_fingerprint(eval_store, &eval_net.prefix) == loss_net_fingerprint {
        return Err(Error::contract(
            "the evaluation pose network is identical to the training-loss network",
        ));
    }
    let images = generate(cfg, d, store, test)?;
    Ok((score_images(eval_net, eval_store, &images, test)?, images))
}
