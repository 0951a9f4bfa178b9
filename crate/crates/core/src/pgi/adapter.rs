use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PgiStage, PoseEncoder};
use crate::error::{ensure, Result};
use crate::graph::DEFAULT_K;
use crate::model::{UnetConfig, UnetEncoder, LEVELS};
use crate::numcore::{Activation, ConvBlock, ParamStore, Real, Tape, Tensor, Var};

pub const ADAPTER_PREFIX: &str = "adapter";

/// Row of the text table that stands for "no prompt".
pub const TEXT_NULL_SLOT: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Number of levels, counted from the finest, that run a PGI stage. The
    /// remaining levels add the encoded pose grid directly.
    pub graph_stages: usize,
    pub k: usize,
    /// Activation of graph layers and the first two fusion blocks.
    pub activation: Activation,
    /// Rows of the text table, including the null slot.
    pub text_slots: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            graph_stages: LEVELS,
            k: DEFAULT_K,
            activation: Activation::Gelu,
            text_slots: 9,
        }
    }
}

/// Trainable copy of the base encoder, fed the encoded pose at every level and
/// emitting one zero-initialised residual per level for the base decoder skips.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub cfg: AdapterConfig,
    pub encoder: UnetEncoder,
    pub pose: PoseEncoder,
    pub stages: Vec<PgiStage>,
}

/// Result of [`Adapter::forward`].
#[derive(Clone, Debug)]
pub struct AdapterOutput {
    pub residuals: Vec<Var>,
    /// Level features before the zero projections.
    pub features: Vec<Var>,
    /// Hash of every graph built by the enabled stages.
    pub structure: u64,
}

impl Adapter {
    pub fn new(unet: &UnetConfig, cfg: AdapterConfig) -> Result<Self> {
        unet.validate()?;
        ensure!(
            cfg.graph_stages <= LEVELS,
            "graph_stages must be in 0..={LEVELS}, got {}",
            cfg.graph_stages
        );
        ensure!(cfg.k >= 1, "k must be at least 1, got {}", cfg.k);
        ensure!(cfg.text_slots >= 1, "the text table needs at least the null slot");
        let stages = (0..cfg.graph_stages)
            .map(|l| PgiStage::new(l, unet.channels[l], cfg.k, cfg.activation))
            .collect();
        Ok(Self {
            encoder: UnetEncoder::new(ADAPTER_PREFIX, unet.clone()),
            pose: PoseEncoder::new(unet.channels),
            stages,
            cfg,
        })
    }

    pub fn text_table_name(&self) -> String {
        format!("{ADAPTER_PREFIX}/text")
    }

    pub fn zero_proj(&self, l: usize) -> ConvBlock {
        let c = self.encoder.cfg.channels[l];
        ConvBlock::new(format!("{ADAPTER_PREFIX}/zero{l}"), 1, c, c, 1, Activation::Identity)
    }

    /// Adds trainable adapter parameters to `store`. The encoder copy starts
    /// from the base encoder's weights found under `base_prefix`.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, base_prefix: &str, rng: &mut impl Rng) -> Result<()> {
        for rel in self.encoder.relative_names() {
            let src = store.get(&format!("{base_prefix}/{rel}"))?.clone();
            store.insert(format!("{ADAPTER_PREFIX}/{rel}"), src, true)?;
        }
        store.insert(
            self.text_table_name(),
            Tensor::zeros(&[self.cfg.text_slots, self.encoder.cfg.temb]),
            true,
        )?;
        for l in 0..LEVELS {
            self.zero_proj(l).init_zero(store, true)?;
        }
        self.pose.init(store, rng, true)?;
        for stage in &self.stages {
            stage.init(store, rng, true)?;
        }
        Ok(())
    }

    /// Encodes the pose image once; the grids do not depend on the timestep.
    pub fn pose_grids<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, pose_image: Var) -> Result<Vec<Var>> {
        self.pose.forward(tape, store, pose_image)
    }

    /// Residuals for the four decoder skips. `slot` selects the text row.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
        t: usize,
        slot: usize,
        pose_grids: &[Var],
    ) -> Result<AdapterOutput> {
        ensure!(
            pose_grids.len() == LEVELS,
            "adapter has {LEVELS} levels but got {} pose grids",
            pose_grids.len()
        );
        ensure!(
            slot < self.cfg.text_slots,
            "text slot {slot} out of range for {} slots",
            self.cfg.text_slots
        );
        let time = self.encoder.time_embedding(tape, store, t)?;
        let table = tape.param(store, &self.text_table_name())?;
        let text = tape.row(table, slot)?;
        let temb = tape.add(time, text)?;

        let mut hasher = DefaultHasher::new();
        let mut inject = |l: usize, tape: &mut Tape<T>, h: Var| -> Result<Var> {
            let x_p = pose_grids[l];
            let signal = match self.stages.get(l) {
                Some(stage) => {
                    let o = stage.forward(tape, store, x_p, h)?;
                    o.structure.hash(&mut hasher);
                    o.out
                }
                None => x_p,
            };
            tape.add(h, signal)
        };
        let levels = self.encoder.forward(tape, store, z, temb, &mut inject)?;
        let residuals = levels
            .iter()
            .copied()
            .enumerate()
            .map(|(l, h)| self.zero_proj(l).forward(tape, store, h))
            .collect::<Result<Vec<_>>>()?;
        Ok(AdapterOutput {
            residuals,
            features: levels,
            structure: hasher.finish(),
        })
    }
}
