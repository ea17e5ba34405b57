use super::{Canvas, SceneSpec, Skeleton, CHANNELS};
use crate::raster::Raster;

/// Limbs as `(from, to)` joint indices; every limb starts at the head.
pub const LIMBS: [(usize, usize); 4] = [(0, 1), (0, 2), (0, 3), (0, 4)];

/// RGB palette in `[-1, 1]`.
pub const PALETTE: [[f64; 3]; 8] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.0, -1.0],
];

/// Stroke value of limb `k`. Limb `k` lives in channel `k % CHANNELS`; limbs
/// sharing a channel are told apart by value.
pub fn limb_value(k: usize) -> f64 {
    if k < CHANNELS {
        1.0
    } else {
        0.0
    }
}

fn pixels_on_segment(a: [f64; 2], b: [f64; 2], canvas: Canvas) -> Vec<(usize, usize)> {
    let span = (b[0] - a[0]).abs().max((b[1] - a[1]).abs());
    let n = (span * 4.0).ceil() as usize + 1;
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
        let x = a[0] + t * (b[0] - a[0]);
        let y = a[1] + t * (b[1] - a[1]);
        if x < 0.0 || y < 0.0 {
            continue;
        }
        let (px, py) = (x as usize, y as usize);
        if px < canvas.width && py < canvas.height && out.last() != Some(&(px, py)) {
            out.push((px, py));
        }
    }
    out
}

/// Renders limb-coded strokes for every skeleton; overlapping strokes take the max.
pub fn render_pose(skeletons: &[Skeleton], canvas: Canvas) -> Raster {
    let mut r = Raster::background(CHANNELS, canvas.height, canvas.width);
    let data = r.data_mut();
    for s in skeletons {
        for (k, &(a, b)) in LIMBS.iter().enumerate() {
            let ch = k % CHANNELS;
            let v = limb_value(k);
            for (x, y) in pixels_on_segment(s.joints[a], s.joints[b], canvas) {
                let cell = &mut data[[ch, y, x]];
                *cell = cell.max(v);
            }
        }
    }
    r
}

/// Pose raster for all people of a scene.
pub fn render_scene_pose(spec: &SceneSpec) -> Raster {
    render_pose(&spec.skeletons(), spec.canvas)
}

fn paint(r: &mut Raster, x: isize, y: isize, color: &[f64; 3]) {
    let (_, h, w) = r.dims();
    if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
        return;
    }
    let data = r.data_mut();
    for (c, &v) in color.iter().enumerate() {
        data[[c, y as usize, x as usize]] = v;
    }
}

/// Renders each person as a thick stick figure in its palette colour. Later
/// people paint over earlier ones.
pub fn render_rgb(spec: &SceneSpec) -> Raster {
    let canvas = spec.canvas;
    let mut r = Raster::background(CHANNELS, canvas.height, canvas.width);
    for p in &spec.persons {
        let color = &PALETTE[p.color_id];
        for &(a, b) in &LIMBS {
            for (x, y) in pixels_on_segment(p.skeleton.joints[a], p.skeleton.joints[b], canvas) {
                let (x, y) = (x as isize, y as isize);
                for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
                    paint(&mut r, x + dx, y + dy, color);
                }
            }
        }
        let h = p.skeleton.head();
        let (hx, hy) = (h[0] as isize, h[1] as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                paint(&mut r, hx + dx, hy + dy, color);
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{gen_scene, WorldConfig};

    #[test]
    fn empty_list_is_all_background() {
        let r = render_pose(&[], Canvas::new(32, 32));
        assert!(r.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn strokes_stay_inside_box() {
        for seed in 0..20 {
            let s = gen_scene(seed, &WorldConfig::default()).unwrap();
            let p = &s.persons[0];
            let r = render_pose(std::slice::from_ref(&p.skeleton), s.canvas);
            let mask = r.stroke_mask();
            for y in 0..32 {
                for x in 0..32 {
                    if mask[y * 32 + x] {
                        assert!(p.bbox.contains_pixel(x, y, s.patch));
                    }
                }
            }
            let rgb = render_rgb(&s);
            let mask = rgb.stroke_mask();
            for y in 0..32 {
                for x in 0..32 {
                    if mask[y * 32 + x] {
                        assert!(p.bbox.contains_pixel(x, y, s.patch));
                    }
                }
            }
        }
    }

    #[test]
    fn union_renders_as_pixel_max() {
        let s = gen_scene(3, &WorldConfig::default().with_people(2)).unwrap();
        let a = render_pose(&[s.persons[0].skeleton.clone()], s.canvas);
        let b = render_pose(&[s.persons[1].skeleton.clone()], s.canvas);
        assert_eq!(render_scene_pose(&s), a.max_with(&b));
    }

    #[test]
    fn strokes_are_in_range() {
        let s = gen_scene(5, &WorldConfig::default().with_people(3)).unwrap();
        for r in [render_scene_pose(&s), render_rgb(&s)] {
            assert!(r.data().iter().all(|&v| v == -1.0 || (v > -1.0 && v <= 1.0)));
        }
    }
}
