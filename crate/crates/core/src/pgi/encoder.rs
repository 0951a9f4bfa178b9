use rand::Rng;

use crate::error::{ensure, Result};
use crate::model::LEVELS;
use crate::numcore::{Activation, ConvBlock, ParamStore, Real, Tape, Var};

pub const POSE_ENC_PREFIX: &str = "pose_enc";

/// Hierarchical pose encoder: each level halves the resolution with a strided
/// convolution and refines with a second convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseEncoder {
    pub prefix: String,
    pub channels: [usize; LEVELS],
}

impl PoseEncoder {
    pub fn new(channels: [usize; LEVELS]) -> Self {
        Self {
            prefix: POSE_ENC_PREFIX.into(),
            channels,
        }
    }

    pub fn down(&self, l: usize) -> ConvBlock {
        let cin = if l == 0 { 3 } else { self.channels[l - 1] };
        ConvBlock::new(
            format!("{}/level{l}/down", self.prefix),
            3,
            cin,
            self.channels[l],
            2,
            Activation::Silu,
        )
    }

    pub fn conv(&self, l: usize) -> ConvBlock {
        let c = self.channels[l];
        ConvBlock::new(format!("{}/level{l}/conv", self.prefix), 3, c, c, 1, Activation::Silu)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng, trainable: bool) -> Result<()> {
        for l in 0..LEVELS {
            self.down(l).init(store, rng, trainable)?;
            self.conv(l).init(store, rng, trainable)?;
        }
        Ok(())
    }

    /// Grids at 1/2, 1/4, 1/8 and 1/16 of the input resolution.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<Vec<Var>> {
        let (h, w, c) = tape.value(image).grid_dims()?;
        ensure!(
            h % 16 == 0 && w % 16 == 0 && h > 0 && w > 0,
            "pose image {h}x{w} must have sides divisible by 16"
        );
        ensure!(c == 3, "pose image must be RGB, got {c} channels");
        let mut x = image;
        let mut grids = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            x = self.down(l).forward(tape, store, x)?;
            x = self.conv(l).forward(tape, store, x)?;
            grids.push(x);
        }
        Ok(grids)
    }
}
