//! Synthetic multi-person stick-figure world.
//!
//! Scenes are generated procedurally from a seed, rendered into a limb-coded
//! pose raster and a colour raster, decomposed into per-person stages, and
//! checked by an exact alignment oracle.

mod dataset;
mod decode;
mod oracle;
mod render;
mod scene;
mod stages;

pub use dataset::{read_dataset, read_dataset_str, write_dataset, write_dataset_string, DATASET_VERSION};
pub use decode::{decode_pose, PoseDecode};
pub use oracle::{classify_action, dominant_color, oracle_check, AlignmentReport, PersonReport};
pub use render::{limb_value, render_pose, render_rgb, render_scene_pose, LIMBS, PALETTE};
pub use scene::{gen_scene, ACTION_NAMES, ACTION_TEMPLATES, FRAME_PX};
pub use stages::{decompose_stages, StagePrompt, StageSample};

use crate::error::{Error, Result};

/// Joints per skeleton: head, left hand, right hand, left foot, right foot.
pub const JOINT_COUNT: usize = 5;
/// Channels in both the pose raster and the colour raster.
pub const CHANNELS: usize = 3;
/// Boxes extend this many patches beyond the joint hull.
pub const BOX_MARGIN: usize = 1;

/// Pixel dimensions of a raster.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
}

impl Canvas {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] < self.width as f64 && p[1] < self.height as f64
    }
}

/// A single stick figure in continuous pixel coordinates (`[x, y]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub joints: Vec<[f64; 2]>,
}

impl Skeleton {
    pub fn new(joints: Vec<[f64; 2]>) -> Self {
        Self { joints }
    }

    pub fn head(&self) -> [f64; 2] {
        self.joints[0]
    }

    pub fn max_joint_error(&self, other: &Skeleton) -> f64 {
        self.joints
            .iter()
            .zip(&other.joints)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Half-open rectangle in patch-grid units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PatchRect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains(&self, gx: usize, gy: usize) -> bool {
        gx >= self.x0 && gx < self.x1 && gy >= self.y0 && gy < self.y1
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn intersects(&self, other: &PatchRect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    /// Whether pixel `(px, py)` falls in the rectangle for the given patch size.
    pub fn contains_pixel(&self, px: usize, py: usize, patch: usize) -> bool {
        self.contains(px / patch, py / patch)
    }

    /// Whether a continuous point lies inside the pixel footprint.
    pub fn contains_point(&self, p: [f64; 2], patch: usize) -> bool {
        let s = patch as f64;
        p[0] >= self.x0 as f64 * s
            && p[0] < self.x1 as f64 * s
            && p[1] >= self.y0 as f64 * s
            && p[1] < self.y1 as f64 * s
    }

    /// Centre in pixel coordinates.
    pub fn center_px(&self, patch: usize) -> [f64; 2] {
        let s = patch as f64;
        [
            (self.x0 + self.x1) as f64 * s / 2.0,
            (self.y0 + self.y1) as f64 * s / 2.0,
        ]
    }
}

/// One person in a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonSpec {
    /// 1-based position in the generation order.
    pub index: usize,
    pub color_id: usize,
    pub action_id: usize,
    pub skeleton: Skeleton,
    pub bbox: PatchRect,
    /// Pixel origin of the action-template frame the skeleton was placed in.
    pub anchor: [usize; 2],
    pub desc_tokens: Vec<u32>,
}

/// A full multi-person scene: the prompt-side fields plus ground-truth skeletons.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub num_people: usize,
    pub persons: Vec<PersonSpec>,
    pub global_tokens: Vec<u32>,
    pub canvas: Canvas,
    pub patch: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn grid(&self) -> (usize, usize) {
        (self.canvas.width / self.patch, self.canvas.height / self.patch)
    }

    pub fn skeletons(&self) -> Vec<Skeleton> {
        self.persons.iter().map(|p| p.skeleton.clone()).collect()
    }

    pub fn boxes(&self) -> Vec<(usize, PatchRect)> {
        self.persons.iter().map(|p| (p.index, p.bbox)).collect()
    }

    pub fn desc_len(&self) -> usize {
        self.persons.first().map_or(0, |p| p.desc_tokens.len())
    }

    /// Checks every structural invariant of a scene.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_people != self.persons.len() {
            return bad(format!(
                "num_people {} but {} persons",
                self.num_people,
                self.persons.len()
            ));
        }
        if self.patch == 0
            || !self.canvas.width.is_multiple_of(self.patch)
            || !self.canvas.height.is_multiple_of(self.patch)
        {
            return bad(format!("patch {} does not tile the canvas", self.patch));
        }
        let center = [self.canvas.width as f64 / 2.0, self.canvas.height as f64 / 2.0];
        let mut last = f64::NEG_INFINITY;
        for (k, p) in self.persons.iter().enumerate() {
            if p.index != k + 1 {
                return bad(format!("person {} has index {}", k + 1, p.index));
            }
            if p.skeleton.joints.len() != JOINT_COUNT {
                return bad(format!("person {} has {} joints", p.index, p.skeleton.joints.len()));
            }
            for &j in &p.skeleton.joints {
                if !self.canvas.contains(j) {
                    return bad(format!("person {} joint {:?} off canvas", p.index, j));
                }
                if !p.bbox.contains_point(j, self.patch) {
                    return bad(format!("person {} joint {:?} outside box", p.index, j));
                }
            }
            let c = p.bbox.center_px(self.patch);
            let d = ((c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2)).sqrt();
            if d + 1e-12 < last {
                return bad(format!("person {} breaks centre-out ordering", p.index));
            }
            last = d;
        }
        Ok(())
    }
}

/// Knobs for the procedural generator.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub joint_count: usize,
    pub palette_size: usize,
    pub max_people: usize,
    pub num_people: usize,
    pub desc_len: usize,
    /// Permit two people with the same `(color, action)` pair.
    pub allow_duplicates: bool,
    /// Require pairwise disjoint boxes rather than merely disjoint figures.
    pub disjoint_boxes: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            patch: 4,
            joint_count: JOINT_COUNT,
            palette_size: 4,
            max_people: 4,
            num_people: 1,
            desc_len: 6,
            allow_duplicates: false,
            disjoint_boxes: false,
        }
    }
}

impl WorldConfig {
    pub fn canvas(&self) -> Canvas {
        Canvas::new(self.height, self.width)
    }

    pub fn with_people(mut self, n: usize) -> Self {
        self.num_people = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.height < 16 || self.width < 16 {
            return bad(format!("canvas {}x{} below 16x16", self.height, self.width));
        }
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad(format!("patch {} does not tile the canvas", self.patch));
        }
        if self.joint_count != JOINT_COUNT {
            return bad(format!("joint_count must be {JOINT_COUNT}"));
        }
        if self.palette_size == 0 || self.palette_size > PALETTE.len() {
            return bad(format!("palette_size must be in 1..={}", PALETTE.len()));
        }
        if self.max_people == 0 || self.max_people > crate::vocab::MAX_SLOTS {
            return bad(format!("max_people must be in 1..={}", crate::vocab::MAX_SLOTS));
        }
        if self.num_people == 0 || self.num_people > self.max_people {
            return bad(format!(
                "num_people {} outside 1..={}",
                self.num_people, self.max_people
            ));
        }
        if self.desc_len < crate::vocab::DESC_INFORMATIVE {
            return bad(format!("desc_len must be at least {}", crate::vocab::DESC_INFORMATIVE));
        }
        if !self.allow_duplicates && self.num_people > self.palette_size * ACTION_TEMPLATES.len() {
            return bad("more people than distinct (color, action) pairs".into());
        }
        Ok(())
    }
}
