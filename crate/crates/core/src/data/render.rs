use super::skeleton::{bone_side, Point, Side, BONES, HEAD};
use crate::numcore::Tensor;

pub type Rgb = [f32; 3];

/// Pose-image colour of each bone, on black.
pub const BONE_COLORS: [Rgb; 8] = [
    [1.0, 1.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 0.5, 0.0],
    [0.0, 0.3, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 0.0],
];

/// Background palette of target images; the index doubles as the text slot.
pub const BACKGROUNDS: [Rgb; 8] = [
    [0.08, 0.08, 0.10],
    [0.20, 0.25, 0.45],
    [0.15, 0.40, 0.20],
    [0.45, 0.40, 0.35],
    [0.35, 0.15, 0.35],
    [0.10, 0.35, 0.40],
    [0.50, 0.45, 0.20],
    [0.30, 0.30, 0.30],
];

pub const LEFT_COLOR: Rgb = [1.0, 0.55, 0.15];
pub const RIGHT_COLOR: Rgb = [0.25, 0.85, 1.0];
pub const BODY_COLOR: Rgb = [0.95, 0.95, 0.85];

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

/// RGB canvas in `[0, 1]` that shapes are blended onto.
pub struct Canvas {
    size: usize,
    pixels: Vec<Rgb>,
}

impl Canvas {
    pub fn new(size: usize, background: Rgb) -> Self {
        Self {
            size,
            pixels: vec![background; size * size],
        }
    }

    /// Blends `color` with per-pixel coverage `coverage(pixel centre)`.
    fn paint(&mut self, color: Rgb, coverage: impl Fn(Point) -> f64) {
        for y in 0..self.size {
            for x in 0..self.size {
                let c = coverage([x as f64 + 0.5, y as f64 + 0.5]).clamp(0.0, 1.0) as f32;
                if c > 0.0 {
                    let px = &mut self.pixels[y * self.size + x];
                    for ch in 0..3 {
                        px[ch] = px[ch] * (1.0 - c) + color[ch] * c;
                    }
                }
            }
        }
    }

    /// Anti-aliased segment of the given width; endpoints in normalised units.
    pub fn line(&mut self, a: Point, b: Point, width: f64, color: Rgb) {
        let s = self.size as f64;
        let (pa, pb) = ([a[0] * s, a[1] * s], [b[0] * s, b[1] * s]);
        self.paint(color, |p| width / 2.0 + 0.5 - segment_distance(p, pa, pb));
    }

    pub fn disk(&mut self, center: Point, radius: f64, color: Rgb) {
        let s = self.size as f64;
        let c = [center[0] * s, center[1] * s];
        self.paint(color, |p| radius + 0.5 - segment_distance(p, c, c));
    }

    /// `H x W x 3` tensor with values mapped from `[0, 1]` to `[-1, 1]`.
    pub fn into_tensor(self) -> Tensor {
        let data = self
            .pixels
            .iter()
            .flat_map(|px| px.iter().map(|&v| v * 2.0 - 1.0))
            .collect();
        Tensor::new(vec![self.size, self.size, 3], data).expect("canvas dims")
    }
}

/// Thin per-bone-coloured skeletons on black.
pub fn render_pose(figures: &[Vec<Point>], size: usize) -> Tensor {
    let mut canvas = Canvas::new(size, [0.0; 3]);
    for kp in figures {
        for (i, &(a, b)) in BONES.iter().enumerate() {
            canvas.line(kp[a], kp[b], 1.0, BONE_COLORS[i]);
        }
    }
    canvas.into_tensor()
}

/// Styled figures: thick limbs (left warm, right cool), a head disk, and the
/// palette background.
pub fn render_target(figures: &[Vec<Point>], size: usize, background: usize, limb_width: f64) -> Tensor {
    let mut canvas = Canvas::new(size, BACKGROUNDS[background % BACKGROUNDS.len()]);
    let scale = size as f64 / 32.0;
    for kp in figures {
        for (i, &(a, b)) in BONES.iter().enumerate() {
            if a == super::skeleton::NECK && b == HEAD {
                continue;
            }
            let color = match bone_side(i) {
                Side::Left => LEFT_COLOR,
                Side::Right => RIGHT_COLOR,
                Side::Center => BODY_COLOR,
            };
            canvas.line(kp[a], kp[b], limb_width * scale, color);
        }
        canvas.line(kp[super::skeleton::NECK], kp[HEAD], limb_width * scale * 0.8, BODY_COLOR);
        canvas.disk(kp[HEAD], 1.6 * scale, BODY_COLOR);
    }
    canvas.into_tensor()
}
