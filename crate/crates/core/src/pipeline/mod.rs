//! Run configuration, the three training phases, evaluation and ablations.

mod ablate;
mod config;
mod eval;
pub mod suite;
pub mod run_dir;
mod train;

pub use ablate::{AblationReport, Lab, Preset, Variant, VariantRow};
pub use config::{
    AdapterSection, BaseSection, DataSection, DiffusionSection, ModelSection, PosenetSection, RunConfig, RunSection,
    SECTIONS,
};
pub use eval::{eval_alignment, generate, score_images, weights_fingerprint, AlignmentReport, SampleRow};
pub use run_dir::RunDir;
pub use train::{
    adapter_params, denoiser, init_adapter, render_log, train_adapter, train_base, train_pose_network, EpochLog,
    Splits,
};

use std::path::Path;

use crate::data::save_png;
use crate::error::{ensure, Error, Result};
use crate::numcore::ParamStore;
use crate::perception::{PoseNet, POSENET_EVAL_PREFIX, POSENET_PREFIX};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Base,
    Posenet,
    Adapter,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Phase::Base),
            "posenet" => Ok(Phase::Posenet),
            "adapter" => Ok(Phase::Adapter),
            _ => Err(Error::contract(format!("unknown phase {s} (expected base, posenet or adapter)"))),
        }
    }
}

pub const BASE_CKPT: &str = "base";
pub const POSENET_CKPT: &str = "posenet";
pub const POSENET_EVAL_CKPT: &str = "posenet_eval";
pub const ADAPTER_CKPT: &str = "adapter";

/// Runs one training phase into `run`. Later phases read their prerequisites
/// from `from`, which may be the same directory.
pub fn run_phase(phase: Phase, cfg: &RunConfig, run: &Path, from: &Path) -> Result<String> {
    cfg.validate()?;
    let base_in = (phase == Phase::Adapter)
        .then(|| run_dir::load_checkpoint(from, BASE_CKPT, "base"))
        .transpose()?;
    let net_in = (phase == Phase::Adapter)
        .then(|| run_dir::load_checkpoint(from, POSENET_CKPT, "posenet"))
        .transpose()?;
    let dir = RunDir::create(run, cfg)?;
    let splits = Splits::generate(cfg)?;
    match phase {
        Phase::Base => {
            let (store, log) = train_base(cfg, &splits.train)?;
            dir.write("base_loss.csv", render_log(&log).as_bytes())?;
            dir.save_checkpoint(BASE_CKPT, &store)
        }
        Phase::Posenet => {
            let (store, report) = train_pose_network(cfg, &splits, false)?;
            dir.write("posenet_curve.csv", report.render_curve().as_bytes())?;
            let h = dir.save_checkpoint(POSENET_CKPT, &store)?;
            let (store, report) = train_pose_network(cfg, &splits, true)?;
            dir.write("posenet_eval_curve.csv", report.render_curve().as_bytes())?;
            let he = dir.save_checkpoint(POSENET_EVAL_CKPT, &store)?;
            Ok(format!("{h}\n{he}"))
        }
        Phase::Adapter => {
            let (store, log) = train_adapter(cfg, &base_in.expect("loaded"), &net_in.expect("loaded"), &splits.train)?;
            dir.write("adapter_loss.csv", render_log(&log).as_bytes())?;
            dir.save_checkpoint(ADAPTER_CKPT, &store)
        }
    }
}

/// Base weights plus the adapter from `run` when `with_adapter`.
pub fn load_denoiser_store(cfg: &RunConfig, run: &Path, from: &Path, with_adapter: bool) -> Result<ParamStore> {
    let mut store = run_dir::load_checkpoint(from, BASE_CKPT, "base")?;
    if with_adapter {
        let adapter = run_dir::load_checkpoint(run, ADAPTER_CKPT, "adapter")?;
        let expected = init_adapter(cfg, &store)?;
        ensure!(
            adapter.names().eq(expected.names()),
            "adapter checkpoint does not match the configured architecture"
        );
        store.merge(adapter)?;
    }
    store.freeze_all();
    Ok(store)
}

/// Evaluates `run` (or the plain base model without `with_adapter`) and writes
/// `eval_summary.txt`, `eval_rows.csv` and, when `save_images`, the samples.
pub fn run_eval(cfg: &RunConfig, run: &Path, from: &Path, with_adapter: bool, save_images: bool) -> Result<AlignmentReport> {
    let store = load_denoiser_store(cfg, run, from, with_adapter)?;
    let loss_net = run_dir::load_checkpoint(from, POSENET_CKPT, "posenet")?;
    let eval_store = run_dir::load_checkpoint(from, POSENET_EVAL_CKPT, "posenet")?;
    let eval_net = PoseNet::new(POSENET_EVAL_PREFIX, cfg.posenet_net())?;
    let d = denoiser(cfg, with_adapter)?;
    let splits = Splits::generate(cfg)?;
    let (report, images) = eval_alignment(
        cfg,
        &d,
        &store,
        &weights_fingerprint(&loss_net, POSENET_PREFIX),
        &eval_net,
        &eval_store,
        &splits.test,
    )?;
    std::fs::create_dir_all(run)?;
    let write = |name: &str, text: &str| crate::numcore::checkpoint::write_atomic(&run.join(name), text.as_bytes());
    write("eval_summary.txt", &report.render_summary())?;
    write("eval_rows.csv", &report.render_rows())?;
    if save_images {
        for (s, img) in splits.test.iter().zip(&images) {
            save_png(img, &run.join("eval_samples").join(format!("{:06}.png", s.id)))?;
        }
    }
    Ok(report)
}

/// Samples test poses `indices` and writes `{index}.png` plus `{index}.txt`
/// sidecars to `out`.
pub fn run_sample(cfg: &RunConfig, run: &Path, from: &Path, with_adapter: bool, indices: &[usize], out: &Path) -> Result<()> {
    let store = load_denoiser_store(cfg, run, from, with_adapter)?;
    let d = denoiser(cfg, with_adapter)?;
    let splits = Splits::generate(cfg)?;
    let picked = indices
        .iter()
        .map(|&i| {
            splits
                .test
                .get(i)
                .cloned()
                .ok_or_else(|| Error::contract(format!("test index {i} out of range 0..{}", splits.test.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    let images = generate(cfg, &d, &store, &picked)?;
    let ckpt_hash = store.checksum();
    for ((i, s), img) in indices.iter().zip(&picked).zip(&images) {
        save_png(img, &out.join(format!("{i:04}.png")))?;
        let sidecar = format!(
            "seed = {}\nsample_index = {}\nsteps = {}\nguidance = {}\ntext_slot = {}\nadapter = {}\ncheckpoint_hash = {}\n",
            cfg.run.seed,
            s.id,
            cfg.diffusion.ddim_steps,
            cfg.diffusion.guidance,
            s.style.text_slot(),
            with_adapter,
            ckpt_hash
        );
        crate::numcore::checkpoint::write_atomic(&out.join(format!("{i:04}.txt")), sidecar.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
