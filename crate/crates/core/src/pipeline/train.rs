use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RunConfig;
use crate::data::{generate_range, skeleton::sample_rng, SkeletonSample};
use crate::diffusion::{add_noise, gaussian, predict_x0, NoiseSchedule};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{BaseUnet, Cond, Denoiser, BASE_PREFIX};
use crate::numcore::optim::{average, Adam};
use crate::numcore::{ParamStore, Tape};
use crate::perception::{
    pose_perception_loss, train_posenet, PoseNet, PoseTrainReport, POSENET_EVAL_PREFIX, POSENET_PREFIX,
};
use crate::pgi::{Adapter, ADAPTER_PREFIX, POSE_ENC_PREFIX, TEXT_NULL_SLOT};

/// Stream tags keep the random draws of different phases independent.
const BASE_STREAM: u64 = 1 << 40;
const ADAPTER_STREAM: u64 = 2 << 40;
const SHUFFLE_STREAM: u64 = 3 << 40;

/// Train, held-out and test splits of one corpus.
pub struct Splits {
    pub train: Vec<SkeletonSample>,
    pub heldout: Vec<SkeletonSample>,
    pub test: Vec<SkeletonSample>,
}

impl Splits {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let c = cfg.corpus()?;
        let d = &cfg.data;
        Ok(Self {
            train: generate_range(d.seed, 0, d.train_samples, &c)?,
            heldout: generate_range(d.seed, d.train_samples, d.heldout_samples, &c)?,
            test: generate_range(d.seed, d.train_samples + d.heldout_samples, d.test_samples, &c)?,
        })
    }
}

/// One row of a training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub loss_d: f32,
    /// Mean pose term over the samples it was evaluated on.
    pub loss_p: Option<f32>,
    pub lp_active: bool,
}

pub fn render_log(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss_d,loss_p,lp_active\n");
    for e in log {
        let lp = e.loss_p.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss_d, lp, e.lp_active as u8));
    }
    s
}

/// Sample order for `epoch`, truncated to `take` when nonzero.
fn epoch_order(n: usize, seed: u64, epoch: usize, take: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut sample_rng(seed, SHUFFLE_STREAM + epoch as u64));
    if take > 0 && take < n {
        order.truncate(take);
    }
    order
}

fn draw_noise(rng: &mut ChaCha8Rng, schedule: &NoiseSchedule, dims: &[usize]) -> (usize, crate::numcore::Tensor) {
    let t = rng.random_range(0..schedule.len());
    (t, gaussian(dims, rng))
}

/// Unconditional noise-prediction training of the base denoiser.
pub fn train_base(cfg: &RunConfig, train: &[SkeletonSample]) -> Result<(ParamStore, Vec<EpochLog>)> {
    let unet = BaseUnet::new(cfg.unet());
    let schedule = cfg.schedule()?;
    let mut store = ParamStore::new();
    unet.init(&mut store, &mut ChaCha8Rng::seed_from_u64(cfg.base.seed), true)?;
    let mut opt = Adam::new(cfg.base.lr);
    let dims = cfg.unet().image_dims();
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.base.epochs {
        let order = epoch_order(train.len(), cfg.base.seed, epoch, 0);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.base.batch) {
            let st = &store;
            let per = exec::try_map_indexed(batch.len(), |b| {
                let s = &train[batch[b]];
                let mut rng = sample_rng(cfg.base.seed, BASE_STREAM + step * cfg.base.batch as u64 + b as u64);
                let (t, eps) = draw_noise(&mut rng, &schedule, &dims);
                let mut tape = Tape::new();
                let z = tape.constant(add_noise(&schedule, &s.target_image, t, &eps)?);
                let target = tape.constant(eps);
                let pred = unet.forward(&mut tape, st, z, t)?;
                let loss = tape.mse(pred, target)?;
                Ok::<_, Error>((tape.value(loss).item(), tape.backward(loss)?.into_params()))
            })?;
            let (l, grads) = average(per)?;
            check_finite(l, "base", epoch)?;
            opt.step(&mut store, &grads)?;
            total += l;
            batches += 1;
            step += 1;
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            loss_d: total / batches as f32,
            loss_p: None,
            lp_active: false,
        });
    }
    store.freeze_all();
    Ok((store, log))
}

fn check_finite(l: f32, phase: &str, epoch: usize) -> Result<()> {
    if l.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{phase} loss in epoch {}", epoch + 1)))
    }
}

pub fn posenet(prefix: &str, cfg: &RunConfig) -> Result<PoseNet> {
    PoseNet::new(prefix, cfg.posenet_net())
}

/// Trains the loss network (`posenet/...`) or, with `eval`, the independent
/// evaluation network (`posenet_eval/...`).
pub fn train_pose_network(cfg: &RunConfig, splits: &Splits, eval: bool) -> Result<(ParamStore, PoseTrainReport)> {
    let (prefix, seed) = if eval {
        (POSENET_EVAL_PREFIX, cfg.posenet.eval_seed)
    } else {
        (POSENET_PREFIX, cfg.posenet.seed)
    };
    let net = posenet(prefix, cfg)?;
    let mut store = ParamStore::new();
    net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), true)?;
    let report = train_posenet(&net, &mut store, &splits.train, &splits.heldout, &cfg.posenet_train(seed))?;
    Ok((store, report))
}

pub fn denoiser(cfg: &RunConfig, with_adapter: bool) -> Result<Denoiser> {
    let unet = BaseUnet::new(cfg.unet());
    let adapter = if with_adapter {
        Some(Adapter::new(&cfg.unet(), cfg.adapter_config()?)?)
    } else {
        None
    };
    Ok(Denoiser::new(unet, adapter))
}

/// Entries produced by adapter training.
pub fn adapter_params(store: &ParamStore) -> ParamStore {
    let mut out = store.subset(&format!("{ADAPTER_PREFIX}/"));
    for prefix in [format!("{POSE_ENC_PREFIX}/"), "pgi/".to_string()] {
        out.merge(store.subset(&prefix)).expect("disjoint prefixes");
    }
    out
}

/// Fresh adapter parameters on top of frozen base weights.
pub fn init_adapter(cfg: &RunConfig, base: &ParamStore) -> Result<ParamStore> {
    let d = denoiser(cfg, true)?;
    let mut store = base.clone();
    store.freeze_all();
    d.adapter
        .as_ref()
        .expect("adapter requested")
        .init(&mut store, BASE_PREFIX, &mut ChaCha8Rng::seed_from_u64(cfg.run.seed))?;
    Ok(adapter_params(&store))
}

/// Adapter fine-tuning with the diffusion loss, plus the pose perception loss
/// on the one-step clean estimate during the scheduled final epochs. Returns
/// the adapter entries only.
pub fn train_adapter(
    cfg: &RunConfig,
    base: &ParamStore,
    loss_net: &ParamStore,
    train: &[SkeletonSample],
) -> Result<(ParamStore, Vec<EpochLog>)> {
    let d = denoiser(cfg, true)?;
    let adapter = d.adapter.as_ref().expect("adapter requested");
    let net = posenet(POSENET_PREFIX, cfg)?;
    let schedule = cfg.schedule()?;
    let loss_cfg = cfg.loss()?;
    let dims = cfg.unet().image_dims();
    let a = &cfg.adapter;

    let mut store = base.clone();
    store.merge(init_adapter(cfg, base)?)?;
    store.merge(loss_net.clone())?;
    store.set_trainable(&format!("{BASE_PREFIX}/"), false);
    store.set_trainable(&format!("{POSENET_PREFIX}/"), false);
    let frozen = store.subset(&format!("{BASE_PREFIX}/")).checksum();

    let mut opt = Adam::new(a.lr);
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..a.epochs {
        let lp_active = loss_cfg.active(epoch);
        let order = epoch_order(train.len(), cfg.run.seed, epoch, a.samples_per_epoch);
        let (mut total, mut batches) = (0.0, 0);
        let (mut lp_sum, mut lp_n) = (0.0, 0);
        for batch in order.chunks(a.batch) {
            let st = &store;
            let per = exec::try_map_indexed(batch.len(), |b| {
                let s = &train[batch[b]];
                let mut rng = sample_rng(cfg.run.seed, ADAPTER_STREAM + step * a.batch as u64 + b as u64);
                let (t, eps) = draw_noise(&mut rng, &schedule, &dims);
                let slot = if rng.random_bool(a.text_drop) {
                    TEXT_NULL_SLOT
                } else {
                    s.style.text_slot()
                };
                let mut tape = Tape::new();
                let z = tape.constant(add_noise(&schedule, &s.target_image, t, &eps)?);
                let pose = tape.constant(s.pose_image.clone());
                let grids = adapter.pose_grids(&mut tape, st, pose)?;
                let cond = Cond {
                    pose_grids: &grids,
                    slot,
                };
                let (pred, _) = d.eps(&mut tape, st, z, t, Some(cond))?;
                let target = tape.constant(eps);
                let l_d = tape.mse(pred, target)?;
                let (loss, l_p) = if lp_active && t <= a.lp_max_t {
                    let x0 = predict_x0(&mut tape, &schedule, z, pred, t)?;
                    let reference = tape.constant(s.target_image.clone());
                    let l_p = pose_perception_loss(&mut tape, st, &net, x0, reference)?;
                    let weighted = tape.scale(l_p, loss_cfg.alpha);
                    (tape.add(l_d, weighted)?, Some(tape.value(l_p).item()))
                } else {
                    (l_d, None)
                };
                let ld = tape.value(l_d).item();
                Ok::<_, Error>(((ld, l_p), tape.backward(loss)?.into_params()))
            })?;
            let mut grads_only = Vec::with_capacity(per.len());
            for ((ld, lp), g) in per {
                if let Some(v) = lp {
                    lp_sum += v;
                    lp_n += 1;
                }
                grads_only.push((ld, g));
            }
            let (l, grads) = average(grads_only)?;
            check_finite(l, "adapter", epoch)?;
            opt.step(&mut store, &grads)?;
            total += l;
            batches += 1;
            step += 1;
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            loss_d: total / batches as f32,
            loss_p: (lp_n > 0).then(|| lp_sum / lp_n as f32),
            lp_active,
        });
    }
    if store.subset(&format!("{BASE_PREFIX}/")).checksum() != frozen {
        return Err(Error::contract("frozen base weights changed during adapter training"));
    }
    Ok((adapter_params(&store), log))
}
