use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numcore::{Activation, ConvBlock, Linear, ParamStore, Real, Tape, Tensor, Var};

/// Encoder depth of both the base denoiser and the adapter.
pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetConfig {
    /// Side of the square RGB canvas.
    pub image: usize,
    /// Channels of the full-resolution stem.
    pub stem: usize,
    /// Channels of encoder levels at 1/2, 1/4, 1/8 and 1/16 resolution.
    pub channels: [usize; LEVELS],
    /// Width of the time embedding.
    pub temb: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            image: 32,
            stem: 12,
            channels: [16, 24, 32, 32],
            temb: 32,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.image >= 32 && self.image % 16 == 0,
            "image size must be a multiple of 16 and at least 32, got {}",
            self.image
        );
        ensure!(
            self.stem > 0 && self.temb >= 2 && self.temb % 2 == 0 && self.channels.iter().all(|&c| c > 0),
            "model widths must be positive (temb even), got {self:?}"
        );
        Ok(())
    }

    pub fn image_dims(&self) -> [usize; 3] {
        [self.image, self.image, 3]
    }

    /// Input channels of encoder level `l`.
    pub fn level_input(&self, l: usize) -> usize {
        if l == 0 {
            self.stem
        } else {
            self.channels[l - 1]
        }
    }
}

/// Sinusoidal embedding of a timestep, `dim` values: sines then cosines.
pub fn timestep_embedding<T: Real>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[dim], |i| {
        let j = i % half;
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        T::from_f64(if i < half { angle.sin() } else { angle.cos() })
    })
}

/// Stem, time MLP and the four down-sampling levels, shared in shape by the
/// base denoiser (`base/...`) and its trainable copy (`adapter/...`).
#[derive(Clone, Debug, PartialEq)]
pub struct UnetEncoder {
    pub prefix: String,
    pub cfg: UnetConfig,
}

impl UnetEncoder {
    pub fn new(prefix: impl Into<String>, cfg: UnetConfig) -> Self {
        Self {
            prefix: prefix.into(),
            cfg,
        }
    }

    fn time_mlp(&self) -> [Linear; 2] {
        let e = self.cfg.temb;
        [
            Linear::new(format!("{}/time/0", self.prefix), e, e, Activation::Silu),
            Linear::new(format!("{}/time/1", self.prefix), e, e, Activation::Silu),
        ]
    }

    pub fn stem(&self) -> ConvBlock {
        ConvBlock::new(format!("{}/stem", self.prefix), 3, 3, self.cfg.stem, 1, Activation::Silu)
    }

    pub fn down(&self, l: usize) -> ConvBlock {
        ConvBlock::new(
            format!("{}/enc{l}/down", self.prefix),
            3,
            self.cfg.level_input(l),
            self.cfg.channels[l],
            2,
            Activation::Silu,
        )
    }

    pub fn temb_proj(&self, l: usize) -> Linear {
        Linear::new(
            format!("{}/enc{l}/temb", self.prefix),
            self.cfg.temb,
            self.cfg.channels[l],
            Activation::Identity,
        )
    }

    pub fn conv(&self, l: usize) -> ConvBlock {
        let c = self.cfg.channels[l];
        ConvBlock::new(format!("{}/enc{l}/conv", self.prefix), 3, c, c, 1, Activation::Silu)
    }

    /// Parameter names relative to the prefix, e.g. `enc0/down/w`.
    pub fn relative_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..2 {
            names.push(format!("time/{i}/w"));
            names.push(format!("time/{i}/b"));
        }
        names.push("stem/w".into());
        names.push("stem/b".into());
        for l in 0..LEVELS {
            for part in ["down", "temb", "conv"] {
                names.push(format!("enc{l}/{part}/w"));
                names.push(format!("enc{l}/{part}/b"));
            }
        }
        names
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng, trainable: bool) -> Result<()> {
        self.cfg.validate()?;
        for layer in self.time_mlp() {
            layer.init(store, rng, trainable)?;
        }
        self.stem().init(store, rng, trainable)?;
        for l in 0..LEVELS {
            self.down(l).init(store, rng, trainable)?;
            self.temb_proj(l).init(store, rng, trainable)?;
            self.conv(l).init(store, rng, trainable)?;
        }
        Ok(())
    }

    pub fn time_embedding<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, t: usize) -> Result<Var> {
        let mut h = tape.constant(timestep_embedding(t, self.cfg.temb));
        for layer in self.time_mlp() {
            h = layer.forward(tape, store, h)?;
        }
        Ok(h)
    }

    /// Runs the encoder and returns the output of every level. `inject(l, h)`
    /// is applied right after level `l`'s down-sampling.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
        temb: Var,
        inject: &mut dyn FnMut(usize, &mut Tape<T>, Var) -> Result<Var>,
    ) -> Result<Vec<Var>> {
        let d = self.cfg.image_dims();
        ensure!(
            tape.dims(z) == d,
            "{}: input dims {:?}, expected {d:?}",
            self.prefix,
            tape.dims(z)
        );
        let mut h = self.stem().forward(tape, store, z)?;
        let mut levels = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            h = self.down(l).forward(tape, store, h)?;
            h = inject(l, tape, h)?;
            let bias = self.temb_proj(l).forward(tape, store, temb)?;
            h = tape.add_channel(h, bias)?;
            h = self.conv(l).forward(tape, store, h)?;
            levels.push(h);
        }
        Ok(levels)
    }
}

/// Small four-level UNet predicting noise in pixel space.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseUnet {
    pub encoder: UnetEncoder,
}

pub const BASE_PREFIX: &str = "base";

impl BaseUnet {
    pub fn new(cfg: UnetConfig) -> Self {
        Self {
            encoder: UnetEncoder::new(BASE_PREFIX, cfg),
        }
    }

    pub fn cfg(&self) -> &UnetConfig {
        &self.encoder.cfg
    }

    fn mid(&self) -> ConvBlock {
        let c = self.cfg().channels[LEVELS - 1];
        ConvBlock::new(format!("{BASE_PREFIX}/mid"), 3, c, c, 1, Activation::Silu)
    }

    fn dec_conv(&self, l: usize) -> ConvBlock {
        let c = self.cfg().channels[l];
        ConvBlock::new(format!("{BASE_PREFIX}/dec{l}/conv"), 3, 2 * c, c, 1, Activation::Silu)
    }

    fn dec_temb(&self, l: usize) -> Linear {
        Linear::new(
            format!("{BASE_PREFIX}/dec{l}/temb"),
            self.cfg().temb,
            self.cfg().channels[l],
            Activation::Identity,
        )
    }

    fn dec_up(&self, l: usize) -> ConvBlock {
        let c = self.cfg().channels[l];
        ConvBlock::new(
            format!("{BASE_PREFIX}/dec{l}/up"),
            3,
            c,
            self.cfg().level_input(l),
            1,
            Activation::Silu,
        )
    }

    fn fine(&self) -> ConvBlock {
        ConvBlock::new(format!("{BASE_PREFIX}/fine"), 3, 3, self.cfg().stem, 1, Activation::Silu)
    }

    fn head(&self) -> ConvBlock {
        let c = self.cfg().stem;
        ConvBlock::new(format!("{BASE_PREFIX}/head"), 3, 2 * c, c, 1, Activation::Silu)
    }

    fn out(&self) -> ConvBlock {
        ConvBlock::new(format!("{BASE_PREFIX}/out"), 3, self.cfg().stem, 3, 1, Activation::Identity)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng, trainable: bool) -> Result<()> {
        self.encoder.init(store, rng, trainable)?;
        self.mid().init(store, rng, trainable)?;
        for l in 0..LEVELS {
            self.dec_conv(l).init(store, rng, trainable)?;
            self.dec_temb(l).init(store, rng, trainable)?;
            self.dec_up(l).init(store, rng, trainable)?;
        }
        self.fine().init(store, rng, trainable)?;
        self.head().init(store, rng, trainable)?;
        self.out().init(store, rng, trainable)
    }

    /// Encoder pass: time embedding and the four skip tensors.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
        t: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let temb = self.encoder.time_embedding(tape, store, t)?;
        let skips = self.encoder.forward(tape, store, z, temb, &mut |_, _, h| Ok(h))?;
        Ok((temb, skips))
    }

    /// Decoder pass. `residuals`, when given, are added to the skips. The
    /// noisy input `z` also feeds a full-resolution branch joined before the
    /// output convolution.
    pub fn decode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
        temb: Var,
        skips: &[Var],
        residuals: Option<&[Var]>,
    ) -> Result<Var> {
        ensure!(skips.len() == LEVELS, "expected {LEVELS} skips, got {}", skips.len());
        if let Some(r) = residuals {
            ensure!(r.len() == LEVELS, "expected {LEVELS} residuals, got {}", r.len());
        }
        let mut h = self.mid().forward(tape, store, skips[LEVELS - 1])?;
        for l in (0..LEVELS).rev() {
            let skip = match residuals {
                Some(r) => tape.add(skips[l], r[l])?,
                None => skips[l],
            };
            h = tape.concat(h, skip)?;
            h = self.dec_conv(l).forward_linear(tape, store, h)?;
            let bias = self.dec_temb(l).forward(tape, store, temb)?;
            h = tape.add_channel(h, bias)?;
            h = tape.act(h, Activation::Silu);
            h = tape.upsample2(h)?;
            h = self.dec_up(l).forward(tape, store, h)?;
        }
        let fine = self.fine().forward(tape, store, z)?;
        let h = tape.concat(h, fine)?;
        let h = self.head().forward(tape, store, h)?;
        self.out().forward(tape, store, h)
    }

    /// Unconditional noise prediction.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var, t: usize) -> Result<Var> {
        let (temb, skips) = self.encode(tape, store, z, t)?;
        self.decode(tape, store, z, temb, &skips, None)
    }
}
