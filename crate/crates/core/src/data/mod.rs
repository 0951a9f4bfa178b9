//! Synthetic stick-figure corpus: skeleton sampling, rasterisation, on-disk
//! layout and pose-alignment metrics.

mod metrics;
pub mod render;
pub mod skeleton;

pub use metrics::{compute_pck, figure_count_error, mean_keypoint_error};
pub use skeleton::{sample_figure, Figure, JointAngles, Point, SkeletonConfig, NUM_JOINTS};

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::exec;
use crate::numcore::checkpoint::write_atomic;
use crate::numcore::Tensor;

/// Rendering attributes of a target image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    /// Limb thickness in pixels at a 32 pixel canvas.
    pub limb_width: f64,
    /// Index into [`render::BACKGROUNDS`].
    pub background: usize,
}

impl Style {
    /// Text-table row describing this style; row 0 is the null prompt.
    pub fn text_slot(&self) -> usize {
        self.background + 1
    }
}

/// Number of text slots, including the null slot.
pub const TEXT_SLOTS: usize = render::BACKGROUNDS.len() + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub image: usize,
    pub skeleton: SkeletonConfig,
    pub two_figure_prob: f64,
    pub limb_width: [f64; 2],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            image: 32,
            skeleton: SkeletonConfig::default(),
            two_figure_prob: 0.0,
            limb_width: [1.6, 2.4],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        ensure!(self.image >= 8, "image size must be at least 8, got {}", self.image);
        ensure!(
            (0.0..=1.0).contains(&self.two_figure_prob),
            "two_figure_prob must lie in [0, 1], got {}",
            self.two_figure_prob
        );
        ensure!(
            self.limb_width[0] > 0.0 && self.limb_width[0] <= self.limb_width[1],
            "limb_width must be a positive ordered pair, got {:?}",
            self.limb_width
        );
        Ok(())
    }
}

/// One corpus entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSample {
    pub id: usize,
    /// `NUM_JOINTS` keypoints per figure, figures in order.
    pub keypoints: Vec<Point>,
    pub figure_count: usize,
    pub angles: Vec<JointAngles>,
    pub style: Style,
    pub pose_image: Tensor,
    pub target_image: Tensor,
}

impl SkeletonSample {
    pub fn figures(&self) -> Vec<Vec<Point>> {
        self.keypoints.chunks(NUM_JOINTS).map(|c| c.to_vec()).collect()
    }
}

/// Sample `index` of the corpus drawn with `seed`.
pub fn generate_sample(seed: u64, index: usize, cfg: &CorpusConfig) -> SkeletonSample {
    let mut rng = skeleton::sample_rng(seed, index as u64);
    let figure_count = if cfg.two_figure_prob > 0.0 && rng.random_bool(cfg.two_figure_prob) {
        2
    } else {
        1
    };
    let limb_width = if cfg.limb_width[0] == cfg.limb_width[1] {
        cfg.limb_width[0]
    } else {
        rng.random_range(cfg.limb_width[0]..=cfg.limb_width[1])
    };
    let style = Style {
        limb_width: skeleton::quantize(limb_width),
        background: rng.random_range(0..render::BACKGROUNDS.len()),
    };
    let figures: Vec<Figure> = (0..figure_count)
        .map(|i| skeleton::place(&sample_figure(&cfg.skeleton, &mut rng), i, figure_count))
        .collect();
    let points: Vec<Vec<Point>> = figures.iter().map(|f| f.keypoints.clone()).collect();
    SkeletonSample {
        id: index,
        keypoints: points.concat(),
        figure_count,
        angles: figures.into_iter().map(|f| f.angles).collect(),
        pose_image: render::render_pose(&points, cfg.image),
        target_image: render::render_target(&points, cfg.image, style.background, style.limb_width),
        style,
    }
}

/// Samples `offset .. offset + count`, generated in parallel.
pub fn generate_range(seed: u64, offset: usize, count: usize, cfg: &CorpusConfig) -> Result<Vec<SkeletonSample>> {
    cfg.validate()?;
    ensure!(count >= 1, "corpus needs at least one sample");
    Ok(exec::map_indexed(count, |i| generate_sample(seed, offset + i, cfg)))
}

pub fn generate_corpus(seed: u64, count: usize, cfg: &CorpusConfig) -> Result<Vec<SkeletonSample>> {
    generate_range(seed, 0, count, cfg)
}

/// Writes an image with values in `[-1, 1]` as 8-bit RGB.
pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    let (h, w, c) = img.grid_dims()?;
    ensure!(c == 3, "PNG export needs 3 channels, got {c}");
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("image buffer size");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    write_atomic(path, &out.into_inner())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: usize,
    pub keypoints: Vec<Point>,
    pub figure_count: usize,
    pub angles: Vec<JointAngles>,
    pub style: Style,
    pub pose_image: String,
    pub target_image: String,
}

impl ManifestRecord {
    pub fn of(s: &SkeletonSample) -> Self {
        Self {
            id: s.id,
            keypoints: s.keypoints.clone(),
            figure_count: s.figure_count,
            angles: s.angles.clone(),
            style: s.style.clone(),
            pose_image: format!("pose/{:06}.png", s.id),
            target_image: format!("target/{:06}.png", s.id),
        }
    }
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Writes `manifest.jsonl` plus `pose/` and `target/` PNGs under `dir`.
pub fn save_corpus(dir: &Path, samples: &[SkeletonSample]) -> Result<()> {
    fs::create_dir_all(dir.join("pose"))?;
    fs::create_dir_all(dir.join("target"))?;
    let mut manifest = Vec::new();
    for s in samples {
        let rec = ManifestRecord::of(s);
        save_png(&s.pose_image, &dir.join(&rec.pose_image))?;
        save_png(&s.target_image, &dir.join(&rec.target_image))?;
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.write_all(b"\n")?;
    }
    write_atomic(&dir.join(MANIFEST), &manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(&path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Reads a corpus written by [`save_corpus`]. Images come back through 8-bit
/// quantisation.
pub fn load_corpus(dir: &Path) -> Result<Vec<SkeletonSample>> {
    load_manifest(dir)?
        .into_iter()
        .map(|r| {
            ensure!(
                r.keypoints.len() == r.figure_count * NUM_JOINTS,
                "sample {}: {} keypoints for {} figures",
                r.id,
                r.keypoints.len(),
                r.figure_count
            );
            Ok(SkeletonSample {
                id: r.id,
                pose_image: load_png(&dir.join(&r.pose_image))?,
                target_image: load_png(&dir.join(&r.target_image))?,
                keypoints: r.keypoints,
                figure_count: r.figure_count,
                angles: r.angles,
                style: r.style,
            })
        })
        .collect()
}
