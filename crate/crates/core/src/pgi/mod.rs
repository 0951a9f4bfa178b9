//! Progressive graph integrator: per-level fusion of pose and latent feature
//! grids through KNN graph convolutions, the hierarchical pose encoder that
//! feeds it, and the adapter that hosts one stage per level.

mod adapter;
mod encoder;

pub use adapter::{Adapter, AdapterConfig, AdapterOutput, ADAPTER_PREFIX, TEXT_NULL_SLOT};
pub use encoder::{PoseEncoder, POSE_ENC_PREFIX};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{ensure, Result};
use crate::graph::{build_graph, GraphConvLayer, SpatialGraph};
use crate::numcore::{Activation, ConvBlock, ParamStore, Real, Tape, Var};

/// One integrator: graph convolutions on the pose and latent grids, a
/// three-block fusion stack, and a graph convolution on the fused grid, added
/// to the pose grid. The last fusion block starts at zero, so a fresh stage
/// passes the pose grid through unchanged. Parameters live under
/// `pgi/level{l}/...`.
#[derive(Clone, Debug, PartialEq)]
pub struct PgiStage {
    pub level: usize,
    pub channels: usize,
    pub k: usize,
    pub act: Activation,
}

/// Result of [`PgiStage::forward`].
#[derive(Clone, Copy, Debug)]
pub struct PgiOutput {
    pub out: Var,
    /// Hash of the three graphs' edge sets.
    pub structure: u64,
}

impl PgiStage {
    pub fn new(level: usize, channels: usize, k: usize, act: Activation) -> Self {
        Self {
            level,
            channels,
            k,
            act,
        }
    }

    pub fn prefix(&self) -> String {
        format!("pgi/level{}", self.level)
    }

    pub fn pose_gc(&self) -> GraphConvLayer {
        GraphConvLayer::new(format!("{}/pose_gc", self.prefix()), self.channels, self.act)
    }

    pub fn latent_gc(&self) -> GraphConvLayer {
        GraphConvLayer::new(format!("{}/latent_gc", self.prefix()), self.channels, self.act)
    }

    pub fn fused_gc(&self) -> GraphConvLayer {
        GraphConvLayer::new(format!("{}/fused_gc", self.prefix()), self.channels, self.act)
    }

    pub fn fusion(&self) -> [ConvBlock; 3] {
        let c = self.channels;
        let p = self.prefix();
        [
            ConvBlock::new(format!("{p}/fusion/0"), 3, 2 * c, c, 1, self.act),
            ConvBlock::new(format!("{p}/fusion/1"), 3, c, c, 1, self.act),
            ConvBlock::new(format!("{p}/fusion/2"), 3, c, c, 1, Activation::Identity),
        ]
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng, trainable: bool) -> Result<()> {
        ensure!(self.k >= 1, "PGI neighbour count must be positive");
        self.pose_gc().init(store, rng, trainable)?;
        self.latent_gc().init(store, rng, trainable)?;
        let [f0, f1, f2] = self.fusion();
        f0.init(store, rng, trainable)?;
        f1.init(store, rng, trainable)?;
        f2.init_zero(store, trainable)?;
        self.fused_gc().init(store, rng, trainable)
    }

    /// Fuses an encoded pose grid `x_p` with latent features `x_l`, both
    /// `H x W x C`, into an `H x W x C` grid.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x_p: Var, x_l: Var) -> Result<PgiOutput> {
        ensure!(
            tape.dims(x_p) == tape.dims(x_l),
            "pose grid {:?} and latent grid {:?} differ",
            tape.dims(x_p),
            tape.dims(x_l)
        );
        let (h, w, c) = tape.value(x_p).grid_dims()?;
        ensure!(
            c == self.channels,
            "{}: grids have {c} channels, stage expects {}",
            self.prefix(),
            self.channels
        );
        let g_p = build_graph(tape.value(x_p), self.k)?;
        let g_l = build_graph(tape.value(x_l), self.k)?;
        let p_hat = graph_conv_grid(tape, store, &g_p, x_p, &self.pose_gc())?;
        let l_hat = graph_conv_grid(tape, store, &g_l, x_l, &self.latent_gc())?;
        let mut fused = tape.concat(p_hat, l_hat)?;
        for block in self.fusion() {
            fused = block.forward(tape, store, fused)?;
        }
        let g_f = build_graph(tape.value(fused), self.k)?;
        let refined = graph_conv_grid(tape, store, &g_f, fused, &self.fused_gc())?;
        let out = tape.add(x_p, refined)?;
        debug_assert_eq!(tape.dims(out), [h, w, c]);
        let mut hasher = DefaultHasher::new();
        for g in [&g_p, &g_l, &g_f] {
            g.fingerprint().hash(&mut hasher);
        }
        Ok(PgiOutput {
            out,
            structure: hasher.finish(),
        })
    }
}

/// Free-function form of [`PgiStage::forward`].
pub fn pgi_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    stage: &PgiStage,
    x_p: Var,
    x_l: Var,
) -> Result<PgiOutput> {
    stage.forward(tape, store, x_p, x_l)
}

/// Graph convolution on an `H x W x C` grid viewed as `N x C` node features.
fn graph_conv_grid<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    graph: &SpatialGraph<T>,
    grid: Var,
    layer: &GraphConvLayer,
) -> Result<Var> {
    let dims = tape.dims(grid).to_vec();
    let nodes = tape.reshape(grid, &[dims[0] * dims[1], dims[2]])?;
    let out = layer.forward(tape, store, graph, nodes)?;
    tape.reshape(out, &dims)
}
