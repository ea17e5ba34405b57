use super::scene::{template_points, FRAME_PX};
use super::{decode_pose, PatchRect, SceneSpec, Skeleton, ACTION_TEMPLATES, PALETTE};
use crate::raster::Raster;

/// Per-person verdicts of the alignment oracle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PersonReport {
    /// A decoded skeleton lies entirely inside the person's box.
    pub present: bool,
    /// Dominant colour in the person's exclusive box region matches the prompt.
    pub color_correct: bool,
    /// Matched skeleton's nearest action template matches the prompt.
    pub action_correct: bool,
    /// Dominant palette index found in the person's region.
    pub decoded_color: Option<usize>,
    /// Action template nearest to the matched skeleton.
    pub decoded_action: Option<usize>,
}

/// Oracle output for one generated `(image, pose)` pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentReport {
    pub persons: Vec<PersonReport>,
    pub decoded_count: usize,
    pub ambiguous_regions: usize,
    pub count_correct: bool,
    /// Every question answered correctly.
    pub all_correct: bool,
}

/// Nearest action template to `skeleton`, measured in the frame anchored at `anchor`.
pub fn classify_action(skeleton: &Skeleton, anchor: [usize; 2]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for a in 0..ACTION_TEMPLATES.len() {
        let t = template_points(a);
        let d: f64 = skeleton
            .joints
            .iter()
            .zip(&t)
            .map(|(j, p)| {
                let dx = j[0] - anchor[0] as f64 - p[0];
                let dy = j[1] - anchor[1] as f64 - p[1];
                dx * dx + dy * dy
            })
            .sum();
        if d < best.0 {
            best = (d, a);
        }
    }
    best.1
}

/// Palette index dominating the stroke pixels of `region`, if any.
///
/// A pixel counts as stroke when some channel is above zero; it is assigned
/// to its nearest palette entry.
pub fn dominant_color(rgb: &Raster, region: impl Fn(usize, usize) -> bool) -> Option<usize> {
    let palette_size = PALETTE.len();
    let (_, h, w) = rgb.dims();
    let mut counts = vec![0usize; palette_size];
    for y in 0..h {
        for x in 0..w {
            if !region(x, y) {
                continue;
            }
            let px = [rgb.get(0, y, x), rgb.get(1, y, x), rgb.get(2, y, x)];
            if px.iter().all(|&v| v <= 0.0) {
                continue;
            }
            let nearest = (0..palette_size)
                .min_by(|&a, &b| {
                    let da: f64 = px.iter().zip(&PALETTE[a]).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = px.iter().zip(&PALETTE[b]).map(|(p, q)| (p - q).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap_or(0);
            counts[nearest] += 1;
        }
    }
    let (best, &n) = counts.iter().enumerate().max_by_key(|&(i, &c)| (c, usize::MAX - i))?;
    (n > 0).then_some(best)
}

/// Cells of `boxes[i]` covered by no other box; falls back to the whole box.
fn exclusive_region(boxes: &[PatchRect], i: usize) -> impl Fn(usize, usize) -> bool + '_ {
    let own = boxes[i];
    let any_exclusive = (own.y0..own.y1)
        .flat_map(|y| (own.x0..own.x1).map(move |x| (x, y)))
        .any(|(x, y)| boxes.iter().enumerate().all(|(j, b)| j == i || !b.contains(x, y)));
    move |gx, gy| {
        own.contains(gx, gy) && (!any_exclusive || boxes.iter().enumerate().all(|(j, b)| j == i || !b.contains(gx, gy)))
    }
}

/// Checks a generated scene against its scene spec.
///
/// Pose decides presence, count and action; the colour raster decides colour
/// binding. `all_correct` is the strict conjunction of every answer.
pub fn oracle_check(spec: &SceneSpec, rgb: &Raster, pose: &Raster) -> AlignmentReport {
    let decoded = decode_pose(pose);
    let boxes: Vec<PatchRect> = spec.persons.iter().map(|p| p.bbox).collect();
    let patch = spec.patch;

    let persons: Vec<PersonReport> = spec
        .persons
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let half = FRAME_PX as f64 / 2.0;
            let frame_center = [p.anchor[0] as f64 + half, p.anchor[1] as f64 + half];
            let matched = decoded
                .skeletons
                .iter()
                .filter(|s| s.joints.iter().all(|&j| p.bbox.contains_point(j, patch)))
                .min_by(|a, b| {
                    let da = centroid_dist(a, frame_center);
                    let db = centroid_dist(b, frame_center);
                    da.total_cmp(&db)
                });
            let region = exclusive_region(&boxes, i);
            let color = dominant_color(rgb, |x, y| region(x / patch, y / patch));
            let action = matched.map(|s| classify_action(s, p.anchor));
            PersonReport {
                present: matched.is_some(),
                color_correct: color == Some(p.color_id),
                action_correct: action == Some(p.action_id),
                decoded_color: color,
                decoded_action: action,
            }
        })
        .collect();

    let count_correct = decoded.is_clean() && decoded.skeletons.len() == spec.num_people;
    let all_correct = count_correct && persons.iter().all(|r| r.present && r.color_correct && r.action_correct);
    AlignmentReport {
        persons,
        decoded_count: decoded.skeletons.len(),
        ambiguous_regions: decoded.ambiguous.len(),
        count_correct,
        all_correct,
    }
}

fn centroid_dist(s: &Skeleton, c: [f64; 2]) -> f64 {
    let n = s.joints.len() as f64;
    let mx = s.joints.iter().map(|j| j[0]).sum::<f64>() / n;
    let my = s.joints.iter().map(|j| j[1]).sum::<f64>() / n;
    ((mx - c[0]).powi(2) + (my - c[1]).powi(2)).sqrt()
}
