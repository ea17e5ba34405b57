use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PatchRect, PersonSpec, SceneSpec, Skeleton, WorldConfig, BOX_MARGIN};
use crate::error::{Error, Result};
use crate::vocab;

/// Side length in pixels of the square frame an action template occupies.
pub const FRAME_PX: usize = 8;

/// Action templates as pixel indices `(col, row)` inside the frame, joint order
/// head, left hand, right hand, left foot, right foot.
///
/// Joints land on pixel centres and jitter is a whole pixel, so for every pair
/// of templates `a`, `b` the per-coordinate gaps satisfy
/// `sum(|d| * (|d| - 2)) > 0`: no ±1 jitter can move a skeleton closer to a
/// foreign template than to its own.
pub const ACTION_TEMPLATES: [[(i32, i32); 5]; 8] = [
    [(5, 2), (1, 5), (1, 2), (4, 6), (6, 6)],
    [(2, 2), (6, 1), (1, 6), (6, 4), (4, 6)],
    [(2, 1), (6, 2), (6, 6), (3, 6), (1, 5)],
    [(5, 2), (1, 1), (4, 6), (6, 6), (1, 6)],
    [(2, 2), (6, 3), (6, 1), (6, 6), (1, 6)],
    [(5, 2), (1, 1), (1, 6), (4, 6), (6, 6)],
    [(5, 2), (6, 6), (1, 1), (3, 6), (1, 5)],
    [(6, 2), (1, 1), (6, 6), (1, 4), (4, 6)],
];

pub const ACTION_NAMES: [&str; 8] = [
    "crouch", "reach", "lunge", "stride", "brace", "straddle", "twist", "lean",
];

/// Shortest head-to-tip Chebyshev distance a jittered limb may have.
pub(crate) const MIN_LIMB_PX: f64 = 4.0;

/// Whole-pixel jitter for a limb tip; draws that would shorten the limb below
/// [`MIN_LIMB_PX`] are redrawn.
fn tip_jitter(rng: &mut ChaCha8Rng, head: [f64; 2], tip: [f64; 2]) -> [f64; 2] {
    loop {
        let j = [rng.random_range(-1i32..=1) as f64, rng.random_range(-1i32..=1) as f64];
        let reach = (tip[0] + j[0] - head[0]).abs().max((tip[1] + j[1] - head[1]).abs());
        if reach >= MIN_LIMB_PX {
            return j;
        }
    }
}

/// Template joints in frame-relative pixel coordinates.
pub(crate) fn template_points(action_id: usize) -> [[f64; 2]; 5] {
    let t = ACTION_TEMPLATES[action_id];
    let mut out = [[0.0; 2]; 5];
    for (o, &(c, r)) in out.iter_mut().zip(&t) {
        *o = [c as f64 + 0.5, r as f64 + 0.5];
    }
    out
}

/// Number of patches the template frame spans per axis.
pub(crate) fn frame_patches(patch: usize) -> usize {
    FRAME_PX.div_ceil(patch)
}

/// Patch cells covered by the joint hull, dilated by the box margin and clamped.
pub(crate) fn box_for_joints(joints: &[[f64; 2]], patch: usize, grid: (usize, usize)) -> PatchRect {
    let cell = |v: f64| (v.max(0.0) as usize) / patch;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for j in joints {
        x0 = x0.min(cell(j[0]));
        y0 = y0.min(cell(j[1]));
        x1 = x1.max(cell(j[0]) + 1);
        y1 = y1.max(cell(j[1]) + 1);
    }
    PatchRect::new(
        x0.saturating_sub(BOX_MARGIN),
        y0.saturating_sub(BOX_MARGIN),
        (x1 + BOX_MARGIN).min(grid.0),
        (y1 + BOX_MARGIN).min(grid.1),
    )
}

const PLACEMENT_ATTEMPTS: usize = 4000;

fn place_origins(
    rng: &mut ChaCha8Rng,
    n: usize,
    grid: (usize, usize),
    inner: usize,
    gap: usize,
) -> Result<Vec<(usize, usize)>> {
    // frames keep a full margin of patches inside the grid so boxes never clamp
    let lo = BOX_MARGIN;
    let hi_x = grid.0 as isize - (BOX_MARGIN + inner) as isize;
    let hi_y = grid.1 as isize - (BOX_MARGIN + inner) as isize;
    if hi_x < lo as isize || hi_y < lo as isize {
        return Err(Error::PlacementInfeasible(format!(
            "grid {}x{} cannot hold a {inner}-patch frame with margin",
            grid.0, grid.1
        )));
    }
    let (hi_x, hi_y) = (hi_x as usize, hi_y as usize);
    let separated = |a: (usize, usize), b: (usize, usize)| a.0.abs_diff(b.0) >= gap || a.1.abs_diff(b.1) >= gap;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut placed: Vec<(usize, usize)> = Vec::with_capacity(n);
        for _ in 0..n {
            let cand = (rng.random_range(lo..=hi_x), rng.random_range(lo..=hi_y));
            if placed.iter().all(|&p| separated(p, cand)) {
                placed.push(cand);
            } else {
                break;
            }
        }
        if placed.len() == n {
            return Ok(placed);
        }
    }
    Err(Error::PlacementInfeasible(format!(
        "could not place {n} people on a {}x{} patch grid",
        grid.0, grid.1
    )))
}

fn choose_attributes(rng: &mut ChaCha8Rng, cfg: &WorldConfig) -> Vec<(usize, usize)> {
    let n = cfg.num_people;
    let actions = ACTION_TEMPLATES.len();
    if cfg.allow_duplicates {
        return (0..n)
            .map(|_| (rng.random_range(0..cfg.palette_size), rng.random_range(0..actions)))
            .collect();
    }
    if n <= cfg.palette_size {
        let mut colors: Vec<usize> = (0..cfg.palette_size).collect();
        colors.shuffle(rng);
        colors[..n].iter().map(|&c| (c, rng.random_range(0..actions))).collect()
    } else {
        let mut pairs: Vec<(usize, usize)> = (0..cfg.palette_size)
            .flat_map(|c| (0..actions).map(move |a| (c, a)))
            .collect();
        pairs.shuffle(rng);
        pairs.truncate(n);
        pairs
    }
}

fn band(center: f64, extent: usize) -> usize {
    let b = (center * vocab::POSITION_BANDS as f64 / extent as f64).floor() as usize;
    b.min(vocab::POSITION_BANDS - 1)
}

/// Generates a scene deterministically from `(seed, cfg)`.
pub fn gen_scene(seed: u64, cfg: &WorldConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = (cfg.width / cfg.patch, cfg.height / cfg.patch);
    let inner = frame_patches(cfg.patch);
    let gap = inner + if cfg.disjoint_boxes { 2 * BOX_MARGIN } else { BOX_MARGIN };
    let origins = place_origins(&mut rng, cfg.num_people, grid, inner, gap)?;
    let attributes = choose_attributes(&mut rng, cfg);

    let mut drafts: Vec<(f64, PersonSpec)> = origins
        .iter()
        .zip(&attributes)
        .map(|(&(ox, oy), &(color_id, action_id))| {
            let anchor = [ox * cfg.patch, oy * cfg.patch];
            let template = template_points(action_id);
            let head = template[0];
            let joints = template
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let [jx, jy] = if j == 0 {
                        [0.0, 0.0]
                    } else {
                        tip_jitter(&mut rng, head, *p)
                    };
                    [anchor[0] as f64 + p[0] + jx, anchor[1] as f64 + p[1] + jy]
                })
                .collect::<Vec<_>>();
            let bbox = box_for_joints(&joints, cfg.patch, grid);
            let c = bbox.center_px(cfg.patch);
            let dist = ((c[0] - cfg.width as f64 / 2.0).powi(2) + (c[1] - cfg.height as f64 / 2.0).powi(2)).sqrt();
            let person = PersonSpec {
                index: 0,
                color_id,
                action_id,
                skeleton: Skeleton::new(joints),
                bbox,
                anchor,
                desc_tokens: Vec::new(),
            };
            (dist, person)
        })
        .collect();
    // stable: equal distances keep draw order
    drafts.sort_by(|a, b| a.0.total_cmp(&b.0));

    let persons = drafts
        .into_iter()
        .enumerate()
        .map(|(k, (_, mut p))| {
            p.index = k + 1;
            let c = p.bbox.center_px(cfg.patch);
            let bands = (band(c[1], cfg.height), band(c[0], cfg.width));
            p.desc_tokens = vocab::describe_person(p.index, p.color_id, p.action_id, bands, cfg.desc_len);
            p
        })
        .collect::<Vec<_>>();

    Ok(SceneSpec {
        num_people: cfg.num_people,
        persons,
        global_tokens: vocab::describe_scene(cfg.num_people),
        canvas: cfg.canvas(),
        patch: cfg.patch,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_fit_and_span_two_cells() {
        for t in ACTION_TEMPLATES {
            let xs: Vec<i32> = t.iter().map(|p| p.0).collect();
            let ys: Vec<i32> = t.iter().map(|p| p.1).collect();
            assert!(xs.iter().chain(&ys).all(|&v| (1..=6).contains(&v)));
            assert!(*xs.iter().min().unwrap() <= 2 && *xs.iter().max().unwrap() >= 5);
            assert!(*ys.iter().min().unwrap() <= 2 && *ys.iter().max().unwrap() >= 5);
        }
    }

    #[test]
    fn limbs_survive_jitter() {
        // the unjittered template is always an acceptable draw
        for t in ACTION_TEMPLATES {
            for tip in &t[1..] {
                let reach = (tip.0 - t[0].0).abs().max((tip.1 - t[0].1).abs());
                assert!(reach as f64 >= MIN_LIMB_PX);
            }
        }
        for seed in 0..200 {
            let s = gen_scene(seed, &WorldConfig::default().with_people(2)).unwrap();
            for p in &s.persons {
                let h = p.skeleton.head();
                for t in &p.skeleton.joints[1..] {
                    let reach = (t[0] - h[0]).abs().max((t[1] - h[1]).abs());
                    assert!(reach >= MIN_LIMB_PX);
                }
            }
        }
    }

    #[test]
    fn template_margin_beats_unit_jitter() {
        for (a, ta) in ACTION_TEMPLATES.iter().enumerate() {
            for (b, tb) in ACTION_TEMPLATES.iter().enumerate().skip(a + 1) {
                let m: i32 = ta
                    .iter()
                    .zip(tb)
                    .flat_map(|(p, q)| [p.0 - q.0, p.1 - q.1])
                    .map(|d| d.abs() * (d.abs() - 2))
                    .sum();
                assert!(m > 0, "templates {a} and {b} too close ({m})");
            }
        }
    }

    #[test]
    fn single_person_box_holds_all_joints() {
        let s = gen_scene(7, &WorldConfig::default().with_people(1)).unwrap();
        assert_eq!(s.persons.len(), 1);
        assert_eq!(s.persons[0].index, 1);
        for &j in &s.persons[0].skeleton.joints {
            assert!(s.persons[0].bbox.contains_point(j, s.patch));
        }
        s.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig::default().with_people(3);
        assert_eq!(gen_scene(7, &cfg).unwrap(), gen_scene(7, &cfg).unwrap());
    }

    #[test]
    fn two_people_ordered_centre_out() {
        let s = gen_scene(11, &WorldConfig::default().with_people(2)).unwrap();
        let c = [16.0, 16.0];
        let d: Vec<f64> = s
            .persons
            .iter()
            .map(|p| {
                let b = p.bbox.center_px(s.patch);
                ((b[0] - c[0]).powi(2) + (b[1] - c[1]).powi(2)).sqrt()
            })
            .collect();
        assert!(d[0] <= d[1]);
    }

    #[test]
    fn distinct_color_action_pairs() {
        for seed in 0..50 {
            let s = gen_scene(seed, &WorldConfig::default().with_people(4)).unwrap();
            let mut pairs: Vec<_> = s.persons.iter().map(|p| (p.color_id, p.action_id)).collect();
            pairs.sort();
            pairs.dedup();
            assert_eq!(pairs.len(), 4);
        }
    }

    #[test]
    fn tiny_canvas_rejects_crowds() {
        let cfg = WorldConfig {
            height: 16,
            width: 16,
            ..WorldConfig::default()
        }
        .with_people(2);
        assert!(matches!(gen_scene(1, &cfg), Err(Error::PlacementInfeasible(_))));
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = WorldConfig::default().with_people(0);
        assert!(gen_scene(1, &cfg).is_err());
        let cfg = WorldConfig {
            height: 8,
            width: 8,
            ..WorldConfig::default()
        };
        assert!(gen_scene(1, &cfg).is_err());
    }
}
