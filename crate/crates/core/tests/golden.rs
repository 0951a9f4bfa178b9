//! Residuals of a trained toy adapter against stored bit patterns.
//! Regenerate with `GRPOSE_BLESS=1 cargo test --test golden` after an
//! intentional numerical change.

use std::path::Path;

use serde::{Deserialize, Serialize};

use grpose_core::numcore::Tape;
use grpose_core::pipeline::{denoiser, train_adapter, train_base, train_pose_network, RunConfig, Splits};

const GOLDEN: &str = "tests/golden/adapter_residuals.json";

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Golden {
    dims: Vec<Vec<usize>>,
    bits: Vec<Vec<u32>>,
}

fn toy() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("data.train_samples", "6"),
        ("data.heldout_samples", "4"),
        ("data.test_samples", "1"),
        ("model.stem", "4"),
        ("model.channels", "[4, 6, 6, 8]"),
        ("model.temb", "8"),
        ("base.epochs", "1"),
        ("posenet.epochs", "1"),
        ("posenet.target_pck", "0.0"),
        ("adapter.epochs", "3"),
        ("adapter.pose_loss_last_epochs", "1"),
        ("adapter.batch", "3"),
        ("adapter.lr", "0.01"),
        ("adapter.lp_max_t", "1000"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

#[test]
fn trained_toy_adapter_reproduces_golden_residuals() {
    let cfg = toy();
    let splits = Splits::generate(&cfg).unwrap();
    let (base, _) = train_base(&cfg, &splits.train).unwrap();
    let (loss_net, _) = train_pose_network(&cfg, &splits, false).unwrap();
    let (adapter_params, _) = train_adapter(&cfg, &base, &loss_net, &splits.train).unwrap();
    let mut store = base;
    store.merge(adapter_params).unwrap();

    let d = denoiser(&cfg, true).unwrap();
    let adapter = d.adapter.as_ref().unwrap();
    let s = &splits.test[0];
    let mut tape = Tape::new();
    let pose = tape.constant(s.pose_image.clone());
    let z = tape.constant(s.target_image.map(|v| 0.6 * v));
    let grids = adapter.pose_grids(&mut tape, &store, pose).unwrap();
    let out = adapter.forward(&mut tape, &store, z, 250, s.style.text_slot(), &grids).unwrap();
    let got = Golden {
        dims: out.residuals.iter().map(|&r| tape.dims(r).to_vec()).collect(),
        bits: out
            .residuals
            .iter()
            .map(|&r| tape.value(r).data().iter().map(|v| v.to_bits()).collect())
            .collect(),
    };
    assert!(got.bits.iter().flatten().any(|&b| b != 0), "training left the residuals at zero");

    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    if std::env::var_os("GRPOSE_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string(&got).unwrap()).unwrap();
    }
    let want: Golden = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(got.dims, want.dims);
    for (level, (g, w)) in got.bits.iter().zip(&want.bits).enumerate() {
        let first = g.iter().zip(w).position(|(a, b)| a != b);
        assert!(first.is_none(), "level {level} differs first at element {first:?}");
    }
}
