use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Point, NUM_JOINTS};
use crate::error::{ensure, Result};
use crate::numcore::{Activation, ConvBlock, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseNetConfig {
    /// Channels of the three stride-2 encoder stages.
    pub channels: [usize; 3],
    /// Encoder stage whose output feeds the pose perception loss.
    pub feature_stage: usize,
    /// Heatmap Gaussian width, in heatmap cells.
    pub sigma: f64,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        Self {
            channels: [16, 24, 32],
            feature_stage: 2,
            sigma: 1.0,
        }
    }
}

/// Convolutional keypoint estimator: three stride-2 encoder stages and a
/// heatmap head at half the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseNet {
    pub prefix: String,
    pub cfg: PoseNetConfig,
}

pub struct PoseNetOutput {
    pub stages: Vec<Var>,
    /// `H/2 x W/2 x NUM_JOINTS`.
    pub heatmaps: Var,
}

impl PoseNet {
    pub fn new(prefix: impl Into<String>, cfg: PoseNetConfig) -> Result<Self> {
        ensure!(cfg.feature_stage < 3, "feature_stage must be 0, 1 or 2, got {}", cfg.feature_stage);
        ensure!(cfg.sigma > 0.0, "heatmap sigma must be positive");
        Ok(Self {
            prefix: prefix.into(),
            cfg,
        })
    }

    fn enc(&self, i: usize) -> ConvBlock {
        let cin = if i == 0 { 3 } else { self.cfg.channels[i - 1] };
        ConvBlock::new(
            format!("{}/enc{i}", self.prefix),
            3,
            cin,
            self.cfg.channels[i],
            2,
            Activation::Silu,
        )
    }

    fn up(&self, i: usize) -> ConvBlock {
        let c = self.cfg.channels;
        let cin = if i == 1 { c[2] + c[1] } else { c[1] + c[0] };
        ConvBlock::new(format!("{}/up{i}", self.prefix), 3, cin, c[i], 1, Activation::Silu)
    }

    fn head(&self) -> ConvBlock {
        ConvBlock::new(
            format!("{}/head", self.prefix),
            1,
            self.cfg.channels[0],
            NUM_JOINTS,
            1,
            Activation::Identity,
        )
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng, trainable: bool) -> Result<()> {
        for i in 0..3 {
            self.enc(i).init(store, rng, trainable)?;
        }
        self.up(1).init(store, rng, trainable)?;
        self.up(0).init(store, rng, trainable)?;
        self.head().init(store, rng, trainable)
    }

    fn check_input<T: Real>(&self, tape: &Tape<T>, img: Var) -> Result<()> {
        let d = tape.dims(img);
        ensure!(
            d.len() == 3 && d[2] == 3 && d[0] % 8 == 0 && d[1] % 8 == 0,
            "{}: expected an RGB image with sides divisible by 8, got {d:?}",
            self.prefix
        );
        Ok(())
    }

    /// Encoder stages up to the feature stage.
    pub fn features<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, img: Var) -> Result<Var> {
        self.check_input(tape, img)?;
        let mut h = img;
        for i in 0..=self.cfg.feature_stage {
            h = self.enc(i).forward(tape, store, h)?;
        }
        Ok(h)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, img: Var) -> Result<PoseNetOutput> {
        self.check_input(tape, img)?;
        let mut stages = Vec::with_capacity(3);
        let mut h = img;
        for i in 0..3 {
            h = self.enc(i).forward(tape, store, h)?;
            stages.push(h);
        }
        for i in [1, 0] {
            h = tape.upsample2(h)?;
            h = tape.concat(h, stages[i])?;
            h = self.up(i).forward(tape, store, h)?;
        }
        let heatmaps = self.head().forward(tape, store, h)?;
        Ok(PoseNetOutput { stages, heatmaps })
    }

    pub fn predict_heatmaps(&self, store: &ParamStore, img: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let out = self.forward(&mut tape, store, x)?;
        Ok(tape.value(out.heatmaps).clone())
    }

    /// Keypoints of the strongest figure in `img`.
    pub fn predict(&self, store: &ParamStore, img: &Tensor) -> Result<Vec<Point>> {
        decode_heatmaps(&self.predict_heatmaps(store, img)?)
    }
}

/// Gaussian heatmaps of side `size`, one channel per joint; overlapping figures
/// take the maximum.
pub fn heatmap_targets(keypoints: &[Point], size: usize, sigma: f64) -> Result<Tensor> {
    ensure!(
        !keypoints.is_empty() && keypoints.len() % NUM_JOINTS == 0,
        "expected a multiple of {NUM_JOINTS} keypoints, got {}",
        keypoints.len()
    );
    let mut t = Tensor::zeros(&[size, size, NUM_JOINTS]);
    let s = size as f64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for fig in keypoints.chunks(NUM_JOINTS) {
        for (j, p) in fig.iter().enumerate() {
            let (cx, cy) = (p[0] * s - 0.5, p[1] * s - 0.5);
            for y in 0..size {
                for x in 0..size {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let v = (-d2 * inv).exp() as f32;
                    let cell: &mut f32 = &mut t.data_mut()[(y * size + x) * NUM_JOINTS + j];
                    *cell = cell.max(v);
                }
            }
        }
    }
    Ok(t)
}

/// Per-joint argmax refined by the positive-weighted centroid of its 3x3
/// neighbourhood, in normalised image coordinates.
pub fn decode_heatmaps(hm: &Tensor) -> Result<Vec<Point>> {
    let (h, w, j) = hm.grid_dims()?;
    ensure!(j == NUM_JOINTS, "expected {NUM_JOINTS} heatmap channels, got {j}");
    let at = |y: usize, x: usize, c: usize| hm.data()[(y * w + x) * j + c];
    let mut out = Vec::with_capacity(j);
    for c in 0..j {
        let mut best = (0, 0);
        for y in 0..h {
            for x in 0..w {
                if at(y, x, c) > at(best.0, best.1, c) {
                    best = (y, x);
                }
            }
        }
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for y in best.0.saturating_sub(1)..(best.0 + 2).min(h) {
            for x in best.1.saturating_sub(1)..(best.1 + 2).min(w) {
                let v = at(y, x, c).max(0.0) as f64;
                sx += v * x as f64;
                sy += v * y as f64;
                sw += v;
            }
        }
        let (fx, fy) = if sw > 0.0 {
            (sx / sw, sy / sw)
        } else {
            (best.1 as f64, best.0 as f64)
        };
        out.push([(fx + 0.5) / w as f64, (fy + 0.5) / h as f64]);
    }
    Ok(out)
}

/// Strict local maxima of channel `joint` above `threshold`.
pub fn count_modes(hm: &Tensor, joint: usize, threshold: f32) -> Result<usize> {
    let (h, w, j) = hm.grid_dims()?;
    ensure!(joint < j, "joint {joint} out of range for {j} channels");
    let at = |y: usize, x: usize| hm.data()[(y * w + x) * j + joint];
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            let v = at(y, x);
            if v <= threshold {
                continue;
            }
            let mut peak = true;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let u = at(yy, xx);
                    // ties count once, at the first cell in raster order
                    if (yy, xx) != (y, x) && (u > v || (u == v && (yy, xx) < (y, x))) {
                        peak = false;
                    }
                }
            }
            if peak {
                n += 1;
            }
        }
    }
    Ok(n)
}
