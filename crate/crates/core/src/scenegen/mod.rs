//! Procedural labeled videos: a moving flat shape and a walking stick figure
//! over a tilted ground plane, with analytic depth, normals, segmentation,
//! boxes and 3D pose.
//!
//! The downstream action of a sample is `shape_kind * 4 + motion_direction`,
//! so the scene geometry the auxiliary labels describe determines the class.

mod format;
mod render;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use format::{config_digest, read_dataset, write_dataset, DatasetHeader, PRNG_ID};
pub use render::{Scene, BONES};

use crate::error::SceneError;
use crate::task::Task;
use crate::tensor::Tensor;

pub type TaskSet = BTreeSet<Task>;

/// Segmentation classes.
pub const BACKGROUND: usize = 0;
pub const PLANE: usize = 1;
pub const SHAPE: usize = 2;
pub const FIGURE: usize = 3;
pub const SEG_CLASSES: usize = 4;

pub const SHAPE_KINDS: usize = 2;
pub const DIRECTIONS: usize = 4;
pub const ACTION_CLASSES: usize = SHAPE_KINDS * DIRECTIONS;
/// Box slots: the shape in slot 0, the figure in slot 1.
pub const BOX_SLOTS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Ground-truth maps are pooled onto cells of this size.
    pub cell_h: usize,
    pub cell_w: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Depth assigned to pixels that hit no surface.
    pub far_depth: f64,
    /// Distance the shape center covers over the clip, normalized units.
    pub travel: f64,
    /// Half-width of the uniform jitter on the shape's start position.
    pub start_jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            height: 32,
            width: 32,
            cell_h: 8,
            cell_w: 8,
            noise: 0.03,
            far_depth: 20.0,
            travel: 0.26,
            start_jitter: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.cell_h, self.width / self.cell_w)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.frames < 2
            || self.cell_h == 0
            || self.cell_w == 0
            || !self.height.is_multiple_of(self.cell_h)
            || !self.width.is_multiple_of(self.cell_w)
        {
            return Err(SceneError::ShapeMismatch {
                shape: vec![self.frames, self.height, self.width],
                rows: self.cell_h,
                cols: self.cell_w,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

/// Integer class per cell, `dims = [T, rows, cols]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub dims: [usize; 3],
    pub classes: Vec<usize>,
}

/// Per-sample labels; every field is optional.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSet {
    /// `[T, h̃, w̃, 1]`
    pub depth: Option<Tensor>,
    /// `[T, h̃, w̃, 3]`, unit vectors
    pub normal: Option<Tensor>,
    pub segm: Option<ClassMap>,
    /// `[O, 4]` normalized `(x1, y1, x2, y2)`
    pub boxes: Option<Tensor>,
    /// `[1, 75]`
    pub pose: Option<Tensor>,
    pub action: Option<usize>,
}

impl AnnotationSet {
    pub fn has(&self, task: Task) -> bool {
        match task {
            Task::Depth => self.depth.is_some(),
            Task::Normal => self.normal.is_some(),
            Task::Segm => self.segm.is_some(),
            Task::Pose => self.pose.is_some(),
            Task::Boxes => self.boxes.is_some(),
        }
    }

    pub fn tasks(&self) -> TaskSet {
        Task::ALL.into_iter().filter(|t| self.has(*t)).collect()
    }

    /// Drops every auxiliary label not in `keep`.
    pub fn retain(&mut self, keep: &TaskSet) {
        for task in Task::ALL {
            if !keep.contains(&task) {
                self.clear(task);
            }
        }
    }

    pub fn clear(&mut self, task: Task) {
        match task {
            Task::Depth => self.depth = None,
            Task::Normal => self.normal = None,
            Task::Segm => self.segm = None,
            Task::Pose => self.pose = None,
            Task::Boxes => self.boxes = None,
        }
    }

    fn swap_task(&mut self, other: &mut AnnotationSet, task: Task) {
        match task {
            Task::Depth => std::mem::swap(&mut self.depth, &mut other.depth),
            Task::Normal => std::mem::swap(&mut self.normal, &mut other.normal),
            Task::Segm => std::mem::swap(&mut self.segm, &mut other.segm),
            Task::Pose => std::mem::swap(&mut self.pose, &mut other.pose),
            Task::Boxes => std::mem::swap(&mut self.boxes, &mut other.boxes),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    /// `[T, 3, H, W]` in `[0, 1]`; shared between clones.
    pub pixels: Arc<Tensor>,
    pub annotations: AnnotationSet,
    pub origin: Origin,
    pub seed: u64,
}

/// Renders the scene for `seed` and fills the annotations in `task_mask`.
///
/// Real samples always carry the action label and only the auxiliary labels
/// named in `task_mask` (usually none); synthetic samples never carry the
/// action and need at least one auxiliary label.
pub fn generate_sample(
    config: &SceneConfig,
    seed: u64,
    origin: Origin,
    task_mask: &TaskSet,
) -> Result<VideoSample, SceneError> {
    if origin == Origin::Synthetic && task_mask.is_empty() {
        return Err(SceneError::InvalidMask);
    }
    config.validate()?;
    let scene = Scene::sample(config, seed);
    let frames = scene.render(config);
    let (gh, gw) = config.grid();
    let t = config.frames;
    let mut ann = AnnotationSet::default();
    for task in task_mask {
        match task {
            Task::Depth => {
                let pooled = downsample_mean(&frames.depth, &[t, config.height, config.width, 1], gh, gw)?;
                ann.depth = Some(pooled);
            }
            Task::Normal => {
                let mut pooled = downsample_mean(&frames.normal, &[t, config.height, config.width, 3], gh, gw)?;
                for v in pooled.data_mut().chunks_mut(3) {
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    v.iter_mut().for_each(|x| *x /= n);
                }
                ann.normal = Some(pooled);
            }
            Task::Segm => {
                let full = ClassMap {
                    dims: [t, config.height, config.width],
                    classes: frames.segm.clone(),
                };
                ann.segm = Some(downsample_mode(&full, gh, gw)?);
            }
            Task::Boxes => ann.boxes = Some(scene.boxes(config)),
            Task::Pose => ann.pose = Some(scene.pose()),
        }
    }
    if origin == Origin::Real {
        ann.action = Some(scene.action());
    }
    Ok(VideoSample {
        pixels: Arc::new(frames.pixels),
        annotations: ann,
        origin,
        seed,
    })
}

/// Average pooling of a `[T, H, W, C]` map onto a `rows × cols` grid.
pub fn downsample_mean(data: &[f64], shape: &[usize; 4], rows: usize, cols: usize) -> Result<Tensor, SceneError> {
    let [t, h, w, c] = *shape;
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 || data.len() != t * h * w * c {
        return Err(SceneError::ShapeMismatch {
            shape: shape.to_vec(),
            rows,
            cols,
        });
    }
    let (ch, cw) = (h / rows, w / cols);
    let mut out = vec![0.0; t * rows * cols * c];
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let cell = (f * rows + y / ch) * cols + x / cw;
                for k in 0..c {
                    out[cell * c + k] += data[((f * h + y) * w + x) * c + k];
                }
            }
        }
    }
    let area = (ch * cw) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(Tensor::new(&[t, rows, cols, c], out).expect("pooled shape"))
}

/// Majority-class pooling; ties go to the lowest class index.
pub fn downsample_mode(map: &ClassMap, rows: usize, cols: usize) -> Result<ClassMap, SceneError> {
    let [t, h, w] = map.dims;
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 || map.classes.len() != t * h * w {
        return Err(SceneError::ShapeMismatch {
            shape: map.dims.to_vec(),
            rows,
            cols,
        });
    }
    let (ch, cw) = (h / rows, w / cols);
    let n_classes = map.classes.iter().max().map_or(1, |m| m + 1);
    let mut counts = vec![0usize; t * rows * cols * n_classes];
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let cell = (f * rows + y / ch) * cols + x / cw;
                counts[cell * n_classes + map.classes[(f * h + y) * w + x]] += 1;
            }
        }
    }
    let classes = counts
        .chunks(n_classes)
        .map(|c| {
            // first maximum wins, i.e. the lowest class index
            c.iter()
                .enumerate()
                .fold((0, 0), |best, (k, &n)| if n > best.1 { (k, n) } else { best })
                .0
        })
        .collect();
    Ok(ClassMap {
        dims: [t, rows, cols],
        classes,
    })
}

/// For each task independently, permutes that task's labels across the
/// samples carrying it. Pixels and action labels are untouched.
pub fn shuffle_annotations(samples: &mut [VideoSample], seed: u64) {
    for task in Task::ALL {
        let carriers: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].annotations.has(task))
            .collect();
        if carriers.len() < 2 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(task.index() as u64 + 1);
        let mut perm = carriers.clone();
        perm.shuffle(&mut rng);
        let mut moved: Vec<AnnotationSet> = perm
            .iter()
            .map(|&src| {
                let mut holder = AnnotationSet::default();
                holder.swap_task(&mut samples[src].annotations.clone(), task);
                holder
            })
            .collect();
        for (slot, &dst) in carriers.iter().enumerate() {
            samples[dst].annotations.swap_task(&mut moved[slot], task);
        }
    }
}

/// A generated collection of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub samples: Vec<VideoSample>,
}

impl Dataset {
    /// Samples with seeds `base_seed, base_seed + 1, ...`.
    pub fn generate(
        config: &SceneConfig,
        base_seed: u64,
        count: usize,
        origin: Origin,
        task_mask: &TaskSet,
    ) -> Result<Self, SceneError> {
        let samples = (0..count as u64)
            .map(|i| generate_sample(config, base_seed.wrapping_add(i), origin, task_mask))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            config: config.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
