//! Scene description and rasterization.
//!
//! Camera at the origin looking down +z with image y pointing down; focal
//! length equals the image width in pixels. The flat shape is a
//! fronto-parallel rectangle parameterized directly in normalized image
//! coordinates, always nearer than the other objects.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{SceneConfig, BACKGROUND, BOX_SLOTS, FIGURE, PLANE, SHAPE};
use crate::task::{POSE_DIMS, POSE_JOINTS};
use crate::tensor::Tensor;

/// Pose coordinates are reported relative to this point.
const POSE_ORIGIN: [f64; 3] = [0.0, 0.0, 5.0];
const PLANE_ANCHOR: [f64; 3] = [0.0, 1.5, 5.0];
const FACING_CAMERA: [f64; 3] = [0.0, 0.0, -1.0];
const FOG_SCALE: f64 = 12.0;

/// Parent-child joint pairs of the 25-joint stick figure.
pub const BONES: [(usize, usize); 24] = [
    (0, 1),
    (1, 20),
    (20, 2),
    (2, 3),
    (20, 4),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 21),
    (6, 22),
    (20, 8),
    (8, 9),
    (9, 10),
    (10, 11),
    (11, 23),
    (10, 24),
    (0, 12),
    (12, 13),
    (13, 14),
    (14, 15),
    (0, 16),
    (16, 17),
    (17, 18),
    (18, 19),
];

/// Rest pose relative to the spine base, figure height about 1.7.
const REST: [[f64; 3]; POSE_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, -0.3, 0.0],
    [0.0, -0.62, 0.0],
    [0.0, -0.78, 0.0],
    [-0.2, -0.52, 0.0],
    [-0.24, -0.25, 0.0],
    [-0.26, 0.0, 0.0],
    [-0.27, 0.06, 0.0],
    [0.2, -0.52, 0.0],
    [0.24, -0.25, 0.0],
    [0.26, 0.0, 0.0],
    [0.27, 0.06, 0.0],
    [-0.1, 0.02, 0.0],
    [-0.11, 0.44, 0.0],
    [-0.12, 0.84, 0.0],
    [-0.12, 0.88, -0.1],
    [0.1, 0.02, 0.0],
    [0.11, 0.44, 0.0],
    [0.12, 0.84, 0.0],
    [0.12, 0.88, -0.1],
    [0.0, -0.55, 0.0],
    [-0.28, 0.11, 0.0],
    [-0.23, 0.05, -0.03],
    [0.28, 0.11, 0.0],
    [0.23, 0.05, -0.03],
];

/// Joints that swing with the left leg / right arm phase and the opposite.
const LEFT_LEG: [usize; 3] = [13, 14, 15];
const RIGHT_LEG: [usize; 3] = [17, 18, 19];
const LEFT_ARM: [usize; 5] = [5, 6, 7, 21, 22];
const RIGHT_ARM: [usize; 5] = [9, 10, 11, 23, 24];

#[derive(Clone, Debug)]
pub struct Scene {
    frames: usize,
    plane_normal: [f64; 3],
    sky: [f64; 3],
    checker: [[f64; 3]; 2],
    checker_size: f64,
    shape_kind: usize,
    direction: usize,
    shape_size: (f64, f64),
    shape_start: (f64, f64),
    shape_depth: f64,
    shape_color: [f64; 3],
    travel: f64,
    figure_root: [f64; 3],
    figure_scale: f64,
    figure_speed: f64,
    gait_phase: f64,
    figure_color: [f64; 3],
    noise_seed: u64,
    noise: f64,
}

pub(super) struct RenderedFrames {
    pub pixels: Tensor,
    /// `[T, H, W, 1]` flattened
    pub depth: Vec<f64>,
    /// `[T, H, W, 3]` flattened
    pub normal: Vec<f64>,
    /// `[T, H, W]` flattened
    pub segm: Vec<usize>,
}

/// Backdrop and figure colors stay dark so the moving shape is the
/// brightest thing in view.
fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.1..0.6),
        rng.gen_range(0.1..0.6),
        rng.gen_range(0.1..0.6),
    ]
}

fn bright(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.85..1.0),
        rng.gen_range(0.85..1.0),
        rng.gen_range(0.85..1.0),
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Scene {
    pub fn sample(config: &SceneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape_kind = rng.gen_range(0..super::SHAPE_KINDS);
        let direction = rng.gen_range(0..super::DIRECTIONS);
        let long = rng.gen_range(0.26..0.34);
        let short = rng.gen_range(0.12..0.17);
        let shape_size = if shape_kind == 0 { (long, short) } else { (short, long) };
        let j = config.start_jitter;
        let shape_start = (0.5 + rng.gen_range(-j..=j), 0.5 + rng.gen_range(-j..=j));
        let plane_normal = normalize([rng.gen_range(-0.15..0.15), -1.0, -rng.gen_range(0.0..0.25)]);
        let figure_x = if rng.gen_bool(0.5) { -1.0 } else { 1.0 } * rng.gen_range(0.4..1.1);
        let figure_z = rng.gen_range(4.0..5.5);
        let mut scene = Self {
            frames: config.frames,
            plane_normal,
            sky: color(&mut rng),
            checker: [color(&mut rng), color(&mut rng)],
            checker_size: rng.gen_range(0.4..0.9),
            shape_kind,
            direction,
            shape_size,
            shape_start,
            shape_depth: rng.gen_range(1.8..2.4),
            shape_color: bright(&mut rng),
            travel: config.travel,
            figure_root: [figure_x, 0.0, figure_z],
            figure_scale: rng.gen_range(0.85..1.1),
            figure_speed: rng.gen_range(-0.03..0.03),
            gait_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            figure_color: color(&mut rng),
            noise_seed: rng.gen(),
            noise: config.noise,
        };
        // stand on the plane: feet reach about 0.88 * scale below the root
        let foot = 0.88 * scene.figure_scale;
        scene.figure_root[1] = scene.plane_height(figure_x, figure_z) - foot;
        scene
    }

    pub fn action(&self) -> usize {
        self.shape_kind * super::DIRECTIONS + self.direction
    }

    pub fn shape_kind(&self) -> usize {
        self.shape_kind
    }

    pub fn direction(&self) -> usize {
        self.direction
    }

    pub fn plane_normal(&self) -> [f64; 3] {
        self.plane_normal
    }

    fn plane_height(&self, x: f64, z: f64) -> f64 {
        let n = self.plane_normal;
        PLANE_ANCHOR[1] - (n[0] * (x - PLANE_ANCHOR[0]) + n[2] * (z - PLANE_ANCHOR[2])) / n[1]
    }

    /// Distance along a camera ray `(dx, dy, 1)` to the plane, if in front.
    pub fn plane_depth(&self, dx: f64, dy: f64) -> Option<f64> {
        let n = self.plane_normal;
        let denom = dot(n, [dx, dy, 1.0]);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = dot(n, PLANE_ANCHOR) / denom;
        (t > 0.0).then_some(t)
    }

    /// Shape center in normalized image coordinates at frame `f`.
    fn shape_center(&self, f: usize) -> (f64, f64) {
        let s = self.travel * f as f64 / (self.frames - 1) as f64;
        let (x, y) = self.shape_start;
        match self.direction {
            0 => (x + s, y),
            1 => (x - s, y),
            2 => (x, y + s),
            _ => (x, y - s),
        }
    }

    fn shape_box(&self, f: usize) -> [f64; 4] {
        let (cx, cy) = self.shape_center(f);
        let (w, h) = self.shape_size;
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0].map(|v| v.clamp(0.0, 1.0))
    }

    /// Joint positions in scene units at frame `f`.
    pub fn joints(&self, f: usize) -> [[f64; 3]; POSE_JOINTS] {
        let phase = self.gait_phase + 0.25 * f as f64;
        let swing = 0.25 * phase.sin();
        let mut out = [[0.0; 3]; POSE_JOINTS];
        for (j, rest) in REST.iter().enumerate() {
            let mut p = *rest;
            // rotate limbs about the hip/shoulder in the x-y plane
            let (pivot, angle) = if LEFT_LEG.contains(&j) {
                (REST[12], swing)
            } else if RIGHT_LEG.contains(&j) {
                (REST[16], -swing)
            } else if LEFT_ARM.contains(&j) {
                (REST[4], -0.8 * swing)
            } else if RIGHT_ARM.contains(&j) {
                (REST[8], 0.8 * swing)
            } else {
                (p, 0.0)
            };
            let (s, c) = angle.sin_cos();
            let (dx, dy) = (p[0] - pivot[0], p[1] - pivot[1]);
            p[0] = pivot[0] + c * dx - s * dy;
            p[1] = pivot[1] + s * dx + c * dy;
            let k = self.figure_scale;
            out[j] = [
                self.figure_root[0] + self.figure_speed * f as f64 + k * p[0],
                self.figure_root[1] + k * p[1],
                self.figure_root[2] + k * p[2],
            ];
        }
        out
    }

    /// Ground-truth pose `[1, 75]` at the final frame.
    pub fn pose(&self) -> Tensor {
        let joints = self.joints(self.frames - 1);
        let data = joints
            .iter()
            .flat_map(|p| [p[0] - POSE_ORIGIN[0], p[1] - POSE_ORIGIN[1], p[2] - POSE_ORIGIN[2]])
            .collect();
        Tensor::new(&[1, POSE_DIMS], data).expect("pose shape")
    }

    fn project(&self, p: [f64; 3], config: &SceneConfig) -> (f64, f64) {
        let f = config.width as f64;
        (
            f * p[0] / p[2] + config.width as f64 / 2.0,
            f * p[1] / p[2] + config.height as f64 / 2.0,
        )
    }

    fn figure_radius(&self, config: &SceneConfig) -> f64 {
        0.035 * config.width as f64 * self.figure_scale
    }

    /// Boxes `[2, 4]` at the final frame: shape then figure.
    pub fn boxes(&self, config: &SceneConfig) -> Tensor {
        let last = self.frames - 1;
        let shape = self.shape_box(last);
        let r = self.figure_radius(config);
        let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in self.joints(last) {
            let (u, v) = self.project(p, config);
            x1 = x1.min(u - r);
            y1 = y1.min(v - r);
            x2 = x2.max(u + r);
            y2 = y2.max(v + r);
        }
        let (w, h) = (config.width as f64, config.height as f64);
        let figure = [x1 / w, y1 / h, x2 / w, y2 / h].map(|v| v.clamp(0.0, 1.0));
        let mut data = Vec::with_capacity(BOX_SLOTS * 4);
        data.extend_from_slice(&shape);
        data.extend_from_slice(&figure);
        Tensor::new(&[BOX_SLOTS, 4], data).expect("box shape")
    }

    pub(super) fn render(&self, config: &SceneConfig) -> RenderedFrames {
        let (t, h, w) = (config.frames, config.height, config.width);
        let hw = h * w;
        let mut pixels = vec![0.0; t * 3 * hw];
        let mut depth = vec![0.0; t * hw];
        let mut normal = vec![0.0; t * hw * 3];
        let mut segm = vec![BACKGROUND; t * hw];
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let gauss = Normal::new(0.0, self.noise.max(0.0)).expect("noise std");
        let focal = w as f64;
        let radius = self.figure_radius(config);
        for f in 0..t {
            let shape = self.shape_box(f);
            let joints = self.joints(f);
            let projected: Vec<(f64, f64, f64)> = joints
                .iter()
                .map(|&p| {
                    let (u, v) = self.project(p, config);
                    (u, v, p[2])
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let (dx, dy) = ((px - w as f64 / 2.0) / focal, (py - h as f64 / 2.0) / focal);
                    let mut z = config.far_depth;
                    let mut class = BACKGROUND;
                    let mut nrm = FACING_CAMERA;
                    let mut rgb = self.sky;
                    if let Some(tp) = self.plane_depth(dx, dy).filter(|&tp| tp < config.far_depth) {
                        z = tp;
                        class = PLANE;
                        nrm = self.plane_normal;
                        let (wx, wz) = (dx * tp, tp);
                        let cell = (wx / self.checker_size).floor() + (wz / self.checker_size).floor();
                        rgb = self.checker[(cell.rem_euclid(2.0)) as usize];
                    }
                    if let Some(zf) = figure_hit(&projected, px, py, radius) {
                        if zf < z {
                            z = zf;
                            class = FIGURE;
                            nrm = FACING_CAMERA;
                            rgb = self.figure_color;
                        }
                    }
                    let (nx, ny) = (px / w as f64, py / h as f64);
                    if nx >= shape[0] && nx <= shape[2] && ny >= shape[1] && ny <= shape[3] && self.shape_depth < z {
                        z = self.shape_depth;
                        class = SHAPE;
                        nrm = FACING_CAMERA;
                        rgb = self.shape_color;
                    }
                    let fog = 1.0 - (-z / FOG_SCALE).exp();
                    let i = (f * h + y) * w + x;
                    depth[i] = z;
                    segm[i] = class;
                    normal[i * 3..i * 3 + 3].copy_from_slice(&nrm);
                    for c in 0..3 {
                        let v = rgb[c] * (1.0 - fog) + self.sky[c] * fog + gauss.sample(&mut rng);
                        pixels[((f * 3 + c) * h + y) * w + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
        RenderedFrames {
            pixels: Tensor::new(&[t, 3, h, w], pixels).expect("pixel shape"),
            depth,
            normal,
            segm,
        }
    }
}

/// Depth of the nearest bone within `radius` pixels of `(px, py)`.
fn figure_hit(joints: &[(f64, f64, f64)], px: f64, py: f64, radius: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for &(a, b) in BONES.iter() {
        let (ax, ay, az) = joints[a];
        let (bx, by, bz) = joints[b];
        let (ex, ey) = (bx - ax, by - ay);
        let len2 = ex * ex + ey * ey;
        let s = if len2 > 0.0 {
            (((px - ax) * ex + (py - ay) * ey) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (ax + s * ex, ay + s * ey);
        if (px - cx).powi(2) + (py - cy).powi(2) <= radius * radius {
            let z = az + s * (bz - az);
            best = Some(best.map_or(z, |b: f64| b.min(z)));
        }
    }
    // head disc
    let (hx, hy, hz) = joints[3];
    if (px - hx).powi(2) + (py - hy).powi(2) <= (2.0 * radius).powi(2) {
        best = Some(best.map_or(hz, |b| b.min(hz)));
    }
    best
}
