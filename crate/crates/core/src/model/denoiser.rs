use super::BaseUnet;
use crate::diffusion::guide;
use crate::error::Result;
use crate::numcore::{ParamStore, Real, Tape, Tensor, Var};
use crate::pgi::{Adapter, TEXT_NULL_SLOT};

/// Pose and text conditioning for one noise prediction.
#[derive(Clone, Copy, Debug)]
pub struct Cond<'a> {
    pub pose_grids: &'a [Var],
    pub slot: usize,
}

/// Frozen base UNet, optionally steered by an adapter.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub unet: BaseUnet,
    pub adapter: Option<Adapter>,
}

impl Denoiser {
    pub fn new(unet: BaseUnet, adapter: Option<Adapter>) -> Self {
        Self { unet, adapter }
    }

    /// Noise prediction on a tape, plus the hash of any graphs built on the way.
    pub fn eps<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
        t: usize,
        cond: Option<Cond<'_>>,
    ) -> Result<(Var, u64)> {
        let (temb, skips) = self.unet.encode(tape, store, z, t)?;
        match (&self.adapter, cond) {
            (Some(adapter), Some(c)) => {
                let out = adapter.forward(tape, store, z, t, c.slot, c.pose_grids)?;
                let eps = self.unet.decode(tape, store, z, temb, &skips, Some(&out.residuals))?;
                Ok((eps, out.structure))
            }
            _ => Ok((self.unet.decode(tape, store, z, temb, &skips, None)?, 0)),
        }
    }

    /// Encoded pose grids for inference.
    pub fn pose_grids(&self, store: &ParamStore, pose_image: &Tensor) -> Result<Vec<Tensor>> {
        let Some(adapter) = &self.adapter else {
            return Ok(Vec::new());
        };
        let mut tape = Tape::new();
        let img = tape.constant(pose_image.clone());
        let grids = adapter.pose_grids(&mut tape, store, img)?;
        Ok(grids.into_iter().map(|g| tape.value(g).clone()).collect())
    }

    pub fn eps_uncond(&self, store: &ParamStore, z: &Tensor, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let eps = self.unet.forward(&mut tape, store, zv, t)?;
        Ok(tape.value(eps).clone())
    }

    /// Guided prediction `eps(null) + s (eps(slot) - eps(null))`, both branches
    /// pose-conditioned. The base encoder runs once and is shared.
    pub fn eps_guided(
        &self,
        store: &ParamStore,
        z: &Tensor,
        t: usize,
        pose_grids: &[Tensor],
        slot: usize,
        scale: f32,
    ) -> Result<Tensor> {
        let Some(adapter) = &self.adapter else {
            return self.eps_uncond(store, z, t);
        };
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let grids: Vec<Var> = pose_grids.iter().map(|g| tape.constant(g.clone())).collect();
        let (temb, skips) = self.unet.encode(&mut tape, store, zv, t)?;
        let branch = |tape: &mut Tape, slot: usize| -> Result<Tensor> {
            let out = adapter.forward(tape, store, zv, t, slot, &grids)?;
            let eps = self.unet.decode(tape, store, zv, temb, &skips, Some(&out.residuals))?;
            Ok(tape.value(eps).clone())
        };
        let uncond = branch(&mut tape, TEXT_NULL_SLOT)?;
        if slot == TEXT_NULL_SLOT {
            return Ok(uncond);
        }
        let cond = branch(&mut tape, slot)?;
        guide(&uncond, &cond, scale)
    }
}
