use std::collections::VecDeque;

use super::render::render_pose;
use super::scene::FRAME_PX;
use super::{Canvas, Skeleton, CHANNELS, LIMBS};
use crate::raster::Raster;

/// A pixel counts as stroke when any channel exceeds this.
const ON: f64 = -0.5;
/// Splits a shared channel into its first-pass (1.0) and second-pass (0.0) limbs.
const HIGH: f64 = 0.5;
/// Components smaller than this are treated as speckle.
const MIN_COMPONENT: usize = 4;
/// Largest fraction of a region's pixels that may disagree with the re-drawn
/// skeleton before the region is called ambiguous.
const MAX_REDRAW_MISMATCH: f64 = 0.25;

/// Result of decoding a pose raster.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseDecode {
    pub skeletons: Vec<Skeleton>,
    /// Pixel bounding boxes `[x0, y0, x1, y1)` of stroke regions that could not
    /// be read as exactly one skeleton.
    pub ambiguous: Vec<[usize; 4]>,
}

impl PoseDecode {
    pub fn is_clean(&self) -> bool {
        self.ambiguous.is_empty()
    }
}

fn limb_member(raster: &Raster, k: usize, x: usize, y: usize) -> bool {
    let ch = k % CHANNELS;
    let v = raster.get(ch, y, x);
    let shares_channel = ch + CHANNELS < LIMBS.len();
    if !shares_channel {
        return v > ON;
    }
    if k < CHANNELS {
        v > HIGH
    } else {
        v > ON && v <= HIGH
    }
}

fn components(mask: &[bool], w: usize, h: usize) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            comp.push((x, y));
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        comp.sort_by_key(|&(x, y)| (y, x));
        out.push(comp);
    }
    out
}

fn d2(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    dx * dx + dy * dy
}

fn decode_component(raster: &Raster, comp: &[(usize, usize)]) -> Option<Skeleton> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &(x, y) in comp {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    if x1 - x0 > FRAME_PX + 2 || y1 - y0 > FRAME_PX + 2 {
        return None;
    }
    let limbs: Vec<Vec<(usize, usize)>> = (0..LIMBS.len())
        .map(|k| {
            comp.iter()
                .copied()
                .filter(|&(x, y)| limb_member(raster, k, x, y))
                .collect()
        })
        .collect();
    if limbs.iter().any(|l| l.is_empty()) {
        return None;
    }
    // the head is the pixel shared by the most limbs, ties going to the one
    // every limb passes closest to
    let shared = |p: (usize, usize)| limbs.iter().filter(|l| l.contains(&p)).count();
    let spread = |p: (usize, usize)| -> f64 {
        limbs
            .iter()
            .map(|l| l.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min))
            .sum()
    };
    let head = comp
        .iter()
        .copied()
        .min_by(|&a, &b| shared(b).cmp(&shared(a)).then_with(|| spread(a).total_cmp(&spread(b))))?;
    let mut joints = vec![[head.0 as f64 + 0.5, head.1 as f64 + 0.5]];
    for l in &limbs {
        let tip = l
            .iter()
            .copied()
            .reduce(|best, q| if d2(head, q) > d2(head, best) { q } else { best })?;
        // a single limb is a thin line; far more pixels than its length means
        // two figures have merged
        let len = (tip.0.abs_diff(head.0)).max(tip.1.abs_diff(head.1)) + 1;
        if l.len() as f64 > 2.0 * len as f64 + 2.0 {
            return None;
        }
        joints.push([tip.0 as f64 + 0.5, tip.1 as f64 + 0.5]);
    }
    let skeleton = Skeleton::new(joints);
    let (_, h, w) = raster.dims();
    let redrawn = render_pose(std::slice::from_ref(&skeleton), Canvas::new(h, w)).stroke_mask();
    let mut in_comp = vec![false; w * h];
    for &(x, y) in comp {
        in_comp[y * w + x] = true;
    }
    let mismatch = in_comp.iter().zip(&redrawn).filter(|(a, b)| a != b).count();
    if mismatch as f64 > MAX_REDRAW_MISMATCH * comp.len() as f64 {
        return None;
    }
    Some(skeleton)
}

/// Recovers skeletons from a limb-coded pose raster.
///
/// Each 8-connected stroke region is read as one figure: the head is the
/// pixel closest to all limb channels and each limb tip is the farthest
/// pixel of that limb from the head. Regions that are too large, miss a
/// limb, or do not match their own re-drawn skeleton are reported in
/// [`PoseDecode::ambiguous`] instead of being guessed.
pub fn decode_pose(raster: &Raster) -> PoseDecode {
    let (_, h, w) = raster.dims();
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            mask[y * w + x] = (0..raster.channels()).any(|c| raster.get(c, y, x) > ON);
        }
    }
    let mut out = PoseDecode::default();
    for comp in components(&mask, w, h) {
        if comp.len() < MIN_COMPONENT {
            continue;
        }
        match decode_component(raster, &comp) {
            Some(s) => out.skeletons.push(s),
            None => {
                let x0 = comp.iter().map(|p| p.0).min().unwrap_or(0);
                let y0 = comp.iter().map(|p| p.1).min().unwrap_or(0);
                let x1 = comp.iter().map(|p| p.0 + 1).max().unwrap_or(0);
                let y1 = comp.iter().map(|p| p.1 + 1).max().unwrap_or(0);
                out.ambiguous.push([x0, y0, x1, y1]);
            }
        }
    }
    out
}
