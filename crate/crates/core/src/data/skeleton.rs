use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub const NUM_JOINTS: usize = 9;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "head", "neck", "pelvis", "elbow_l", "elbow_r", "hand_l", "hand_r", "foot_l", "foot_r",
];

pub const HEAD: usize = 0;
pub const NECK: usize = 1;
pub const PELVIS: usize = 2;
pub const ELBOW_L: usize = 3;
pub const ELBOW_R: usize = 4;
pub const HAND_L: usize = 5;
pub const HAND_R: usize = 6;
pub const FOOT_L: usize = 7;
pub const FOOT_R: usize = 8;

/// Bones as joint pairs. Index order fixes the pose-image palette.
pub const BONES: [(usize, usize); 8] = [
    (NECK, HEAD),
    (PELVIS, NECK),
    (NECK, ELBOW_L),
    (ELBOW_L, HAND_L),
    (NECK, ELBOW_R),
    (ELBOW_R, HAND_R),
    (PELVIS, FOOT_L),
    (PELVIS, FOOT_R),
];

/// Side of a bone in the styled image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Center,
    Left,
    Right,
}

pub fn bone_side(bone: usize) -> Side {
    match bone {
        2 | 3 | 6 => Side::Left,
        4 | 5 | 7 => Side::Right,
        _ => Side::Center,
    }
}

/// Normalised `(x, y)` with `y` growing downwards.
pub type Point = [f64; 2];

/// Sampled angles, in degrees. Arm and leg angles are measured from straight
/// down, positive away from the body's midline; elbow bends are relative to
/// the upper arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointAngles {
    pub torso: f64,
    pub head: f64,
    pub arm_l: f64,
    pub arm_r: f64,
    pub bend_l: f64,
    pub bend_r: f64,
    pub leg_l: f64,
    pub leg_r: f64,
}

impl JointAngles {
    pub fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("torso", self.torso),
            ("head", self.head),
            ("arm_l", self.arm_l),
            ("arm_r", self.arm_r),
            ("bend_l", self.bend_l),
            ("bend_r", self.bend_r),
            ("leg_l", self.leg_l),
            ("leg_r", self.leg_r),
        ]
    }
}

/// Sampling ranges. Every range is closed and in degrees or normalised units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkeletonConfig {
    pub torso_angle: [f64; 2],
    pub head_angle: [f64; 2],
    pub arm_angle: [f64; 2],
    pub elbow_bend: [f64; 2],
    pub leg_angle: [f64; 2],
    pub torso_length: [f64; 2],
    pub pelvis_x: [f64; 2],
    pub pelvis_y: [f64; 2],
    /// Bone lengths as fractions of the torso length.
    pub head_ratio: [f64; 2],
    pub upper_arm_ratio: [f64; 2],
    pub forearm_ratio: [f64; 2],
    pub leg_ratio: [f64; 2],
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        Self {
            torso_angle: [-15.0, 15.0],
            head_angle: [-20.0, 20.0],
            arm_angle: [15.0, 165.0],
            elbow_bend: [-90.0, 90.0],
            leg_angle: [0.0, 45.0],
            torso_length: [0.16, 0.2],
            pelvis_x: [0.4, 0.6],
            pelvis_y: [0.5, 0.62],
            head_ratio: [0.45, 0.55],
            upper_arm_ratio: [0.55, 0.7],
            forearm_ratio: [0.5, 0.65],
            leg_ratio: [0.9, 1.1],
        }
    }
}

impl SkeletonConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in self.ranges() {
            ensure!(
                r[0].is_finite() && r[1].is_finite() && r[0] <= r[1],
                "skeleton range {name} must be an ordered pair, got {r:?}"
            );
        }
        Ok(())
    }

    fn ranges(&self) -> [(&'static str, [f64; 2]); 12] {
        [
            ("torso_angle", self.torso_angle),
            ("head_angle", self.head_angle),
            ("arm_angle", self.arm_angle),
            ("elbow_bend", self.elbow_bend),
            ("leg_angle", self.leg_angle),
            ("torso_length", self.torso_length),
            ("pelvis_x", self.pelvis_x),
            ("pelvis_y", self.pelvis_y),
            ("head_ratio", self.head_ratio),
            ("upper_arm_ratio", self.upper_arm_ratio),
            ("forearm_ratio", self.forearm_ratio),
            ("leg_ratio", self.leg_ratio),
        ]
    }

    /// Range of the angle reported under `name` by [`JointAngles::named`].
    pub fn angle_range(&self, name: &str) -> Option<[f64; 2]> {
        Some(match name {
            "torso" => self.torso_angle,
            "head" => self.head_angle,
            "arm_l" | "arm_r" => self.arm_angle,
            "bend_l" | "bend_r" => self.elbow_bend,
            "leg_l" | "leg_r" => self.leg_angle,
            _ => return None,
        })
    }
}

/// One articulated figure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    pub keypoints: Vec<Point>,
    pub angles: JointAngles,
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Decimal places kept for keypoint coordinates.
pub const KEYPOINT_DECIMALS: usize = 6;

/// Rounds to [`KEYPOINT_DECIMALS`] places, returning the value that the fixed
/// precision decimal text parses back to.
pub fn quantize(v: f64) -> f64 {
    format!("{v:.KEYPOINT_DECIMALS$}").parse().expect("formatted float")
}

/// Direction at `deg` degrees from straight down, rotated towards `+x` when
/// `sign` is positive.
fn from_down(deg: f64, sign: f64) -> Point {
    let a = deg * PI / 180.0;
    [sign * a.sin(), a.cos()]
}

fn step(p: Point, dir: Point, len: f64) -> Point {
    [p[0] + dir[0] * len, p[1] + dir[1] * len]
}

/// Samples a figure in the unit canvas.
pub fn sample_figure(cfg: &SkeletonConfig, rng: &mut impl Rng) -> Figure {
    let torso = uniform(rng, cfg.torso_length);
    let pelvis = [uniform(rng, cfg.pelvis_x), uniform(rng, cfg.pelvis_y)];
    let torso_angle = uniform(rng, cfg.torso_angle);
    let head_angle = uniform(rng, cfg.head_angle);
    // upward direction tilted by the torso angle
    let up = |deg: f64| {
        let a = deg * PI / 180.0;
        [a.sin(), -a.cos()]
    };
    let neck = step(pelvis, up(torso_angle), torso);
    let head = step(neck, up(torso_angle + head_angle), torso * uniform(rng, cfg.head_ratio));

    let mut limb = |side: f64| {
        let arm = uniform(rng, cfg.arm_angle);
        let bend = uniform(rng, cfg.elbow_bend);
        let leg = uniform(rng, cfg.leg_angle);
        let upper = torso * uniform(rng, cfg.upper_arm_ratio);
        let fore = torso * uniform(rng, cfg.forearm_ratio);
        let leg_len = torso * uniform(rng, cfg.leg_ratio);
        let elbow = step(neck, from_down(arm, side), upper);
        let hand = step(elbow, from_down(arm + bend, side), fore);
        let foot = step(pelvis, from_down(leg, side), leg_len);
        (arm, bend, leg, elbow, hand, foot)
    };
    // the figure faces the viewer: its left side is image right
    let (arm_l, bend_l, leg_l, elbow_l, hand_l, foot_l) = limb(1.0);
    let (arm_r, bend_r, leg_r, elbow_r, hand_r, foot_r) = limb(-1.0);

    let keypoints = [head, neck, pelvis, elbow_l, elbow_r, hand_l, hand_r, foot_l, foot_r]
        .iter()
        .map(|p| [quantize(p[0]), quantize(p[1])])
        .collect();
    Figure {
        keypoints,
        angles: JointAngles {
            torso: torso_angle,
            head: head_angle,
            arm_l,
            arm_r,
            bend_l,
            bend_r,
            leg_l,
            leg_r,
        },
    }
}

/// Places figure `i` of `n` side by side, each shrunk to fit its column.
pub fn place(fig: &Figure, i: usize, n: usize) -> Figure {
    if n <= 1 {
        return fig.clone();
    }
    let s = 1.0 / n as f64;
    let keypoints = fig
        .keypoints
        .iter()
        .map(|p| {
            let x = (i as f64 + p[0]) * s;
            let y = 0.5 + (p[1] - 0.5) * s;
            [quantize(x), quantize(y)]
        })
        .collect();
    Figure {
        keypoints,
        angles: fig.angles.clone(),
    }
}

/// Independent generator stream for `(seed, index)`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn bone_length(kp: &[Point], bone: usize) -> f64 {
    let (a, b) = BONES[bone];
    ((kp[a][0] - kp[b][0]).powi(2) + (kp[a][1] - kp[b][1]).powi(2)).sqrt()
}
