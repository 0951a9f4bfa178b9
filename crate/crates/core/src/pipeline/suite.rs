//! Registered gradient-check fragments, each small enough to run in seconds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphConvLayer};
use crate::model::{BaseUnet, UnetConfig};
use crate::numcore::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, Probe};
use crate::numcore::layers::uniform;
use crate::numcore::{Activation, ConvBlock, ParamStore, Tape, Tensor, Var};
use crate::perception::{pose_perception_loss, PoseNet, PoseNetConfig, POSENET_PREFIX};
use crate::pgi::{Adapter, AdapterConfig, PgiStage, PoseEncoder};

pub const FRAGMENTS: [&str; 8] = [
    "conv_block",
    "graph_conv",
    "pgi_stage",
    "pose_encoder",
    "adapter",
    "base_unet",
    "posenet",
    "pose_loss",
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn grid(dims: &[usize], seed: u64) -> Tensor<f64> {
    uniform(dims, 1.0, &mut rng(seed))
}

fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let w = tape.constant(grid(tape.dims(x), seed));
    let m = tape.mul(x, w).expect("same dims");
    tape.sum(m)
}

fn sum_all(tape: &mut Tape<f64>, xs: &[Var], seed: u64) -> Result<Var> {
    let mut total = weighted_sum(tape, xs[0], seed);
    for (i, &x) in xs.iter().enumerate().skip(1) {
        let part = weighted_sum(tape, x, seed + i as u64);
        total = tape.add(total, part)?;
    }
    Ok(total)
}

fn small_unet() -> UnetConfig {
    UnetConfig {
        image: 32,
        stem: 4,
        channels: [4, 6, 6, 8],
        temb: 8,
    }
}

/// Replaces zero-initialised tensors, which would hide upstream gradients.
fn perturb(s: &mut ParamStore<f64>, names: &[String], seed: u64) -> Result<()> {
    let mut r = rng(seed);
    for n in names {
        let dims = s.get(n)?.dims().to_vec();
        *s.get_mut(n)? = uniform(&dims, 0.5, &mut r);
    }
    Ok(())
}

/// Runs fragment `name` through the finite-difference check.
pub fn check_fragment(name: &str, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut s = ParamStore::<f64>::new();
    match name {
        "conv_block" => {
            let conv = ConvBlock::new("conv", 3, 5, 6, 2, Activation::Silu);
            conv.init(&mut s, &mut rng(27), true)?;
            let x = grid(&[9, 8, 5], 28);
            gradcheck(
                &s,
                |tape, st| {
                    let xv = tape.constant(x.clone());
                    let o = conv.forward(tape, st, xv)?;
                    Ok(weighted_sum(tape, o, 29))
                },
                cfg,
            )
        }
        "graph_conv" => {
            let layer = GraphConvLayer::new("gc", 16, Activation::Gelu);
            layer.init(&mut s, &mut rng(1), true)?;
            let x = grid(&[8, 8, 16], 2);
            let graph = build_graph(&x, 9)?;
            gradcheck(
                &s,
                |tape, st| {
                    let xv = tape.constant(x.clone());
                    let o = layer.forward(tape, st, &graph, xv)?;
                    Ok(weighted_sum(tape, o, 3))
                },
                cfg,
            )
        }
        "pgi_stage" => {
            let stage = PgiStage::new(0, 16, 9, Activation::Gelu);
            stage.init(&mut s, &mut rng(4), true)?;
            perturb(&mut s, &[stage.fusion()[2].weight_name()], 26)?;
            let (xp, xl) = (grid(&[8, 8, 16], 5), grid(&[8, 8, 16], 6));
            gradcheck(
                &s,
                |tape, st| {
                    let a = tape.constant(xp.clone());
                    let b = tape.constant(xl.clone());
                    let o = stage.forward(tape, st, a, b)?;
                    Ok(Probe {
                        loss: weighted_sum(tape, o.out, 7),
                        structure: o.structure,
                    })
                },
                cfg,
            )
        }
        "pose_encoder" => {
            let enc = PoseEncoder::new([4, 6, 6, 8]);
            enc.init(&mut s, &mut rng(8), true)?;
            let img = grid(&[32, 32, 3], 9);
            gradcheck(
                &s,
                |tape, st| {
                    let x = tape.constant(img.clone());
                    let grids = enc.forward(tape, st, x)?;
                    sum_all(tape, &grids, 10)
                },
                cfg,
            )
        }
        "adapter" => {
            let adapter = Adapter::new(&small_unet(), AdapterConfig::default())?;
            BaseUnet::new(small_unet()).init(&mut s, &mut rng(11), false)?;
            adapter.init(&mut s, "base", &mut rng(12))?;
            let mut names: Vec<String> = (0..4).map(|l| adapter.zero_proj(l).weight_name()).collect();
            names.extend((0..4).map(|l| PgiStage::new(l, 0, 9, Activation::Gelu).fusion()[2].weight_name()));
            names.push(adapter.text_table_name());
            perturb(&mut s, &names, 13)?;
            let (pose, z) = (grid(&[32, 32, 3], 14), grid(&[32, 32, 3], 15));
            gradcheck(
                &s,
                |tape, st| {
                    let p = tape.constant(pose.clone());
                    let zv = tape.constant(z.clone());
                    let grids = adapter.pose_grids(tape, st, p)?;
                    let out = adapter.forward(tape, st, zv, 400, 1, &grids)?;
                    Ok(Probe {
                        loss: sum_all(tape, &out.residuals, 16)?,
                        structure: out.structure,
                    })
                },
                cfg,
            )
        }
        "base_unet" => {
            let unet = BaseUnet::new(small_unet());
            unet.init(&mut s, &mut rng(17), true)?;
            let (z, target) = (grid(&[32, 32, 3], 18), grid(&[32, 32, 3], 19));
            gradcheck(
                &s,
                |tape, st| {
                    let zv = tape.constant(z.clone());
                    let tv = tape.constant(target.clone());
                    let eps = unet.forward(tape, st, zv, 321)?;
                    tape.mse(eps, tv)
                },
                cfg,
            )
        }
        "posenet" => {
            let net = PoseNet::new(
                POSENET_PREFIX,
                PoseNetConfig {
                    channels: [4, 6, 8],
                    ..PoseNetConfig::default()
                },
            )?;
            net.init(&mut s, &mut rng(20), true)?;
            let (img, target) = (grid(&[16, 16, 3], 21), grid(&[8, 8, 9], 22));
            gradcheck(
                &s,
                |tape, st| {
                    let x = tape.constant(img.clone());
                    let out = net.forward(tape, st, x)?;
                    let y = tape.constant(target.clone());
                    tape.mse(out.heatmaps, y)
                },
                cfg,
            )
        }
        "pose_loss" => {
            let net = PoseNet::new(POSENET_PREFIX, PoseNetConfig::default())?;
            net.init(&mut s, &mut rng(23), false)?;
            s.insert("gen", grid(&[16, 16, 3], 24), true)?;
            let reference = grid(&[16, 16, 3], 25);
            gradcheck(
                &s,
                |tape, st| {
                    let g = tape.param(st, "gen")?;
                    let r = tape.constant(reference.clone());
                    pose_perception_loss(tape, st, &net, g, r)
                },
                &GradcheckConfig {
                    fraction: cfg.fraction.max(0.05),
                    ..cfg.clone()
                },
            )
        }
        other => Err(Error::contract(format!(
            "unknown gradcheck fragment {other} (expected one of {})",
            FRAGMENTS.join(", ")
        ))),
    }
}
