//! Oracle-based alignment metrics and sample-diversity metrics.
//!
//! Alignment uses the exact oracle of the synthetic world in place of a
//! visual question answering judge. Diversity compares the `k` samples drawn
//! for one scene spec: a patch-feature cosine distance, an RMS pixel
//! distance and the normalised entropy of the decoded attributes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array3};
use rayon::prelude::*;

use crate::error::{Error, PathContext, Result};
use crate::iterate::GenerationTrace;
use crate::raster::{Raster, BACKGROUND};
use crate::world::{oracle_check, SceneSpec, ACTION_TEMPLATES, PALETTE};

/// Samples drawn per scene spec by default.
pub const DEFAULT_SAMPLES: usize = 5;

/// One generated scene as seen by the metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub image: Raster,
    pub pose: Raster,
}

impl From<&GenerationTrace> for Generated {
    fn from(t: &GenerationTrace) -> Self {
        Self {
            image: t.final_image.clone(),
            pose: t.final_pose.clone(),
        }
    }
}

/// Oracle rates for one set of samples; each lies in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Alignment {
    pub count_accuracy: f64,
    /// Mean over samples of the fraction of people with the right colour.
    pub color_binding_accuracy: f64,
    /// Mean over samples of the fraction of people with the right action.
    pub action_binding_accuracy: f64,
    /// Fraction of samples where every oracle answer is correct.
    pub all_correct_rate: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Diversity {
    /// Mean pairwise mean-over-patches cosine distance.
    pub feature_distance: f64,
    /// Mean pairwise RMS pixel difference.
    pub pixel_distance: f64,
    /// Normalised attribute entropy averaged over attributes, in `[0, 1]`.
    pub attribute_entropy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecReport {
    pub seed: u64,
    pub num_people: usize,
    pub samples: usize,
    pub alignment: Alignment,
    pub diversity: Option<Diversity>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub specs: Vec<SpecReport>,
    pub alignment: Alignment,
    pub diversity: Option<Diversity>,
}

fn check_canvas(spec: &SceneSpec, r: &Raster, what: &str) -> Result<()> {
    let (_, h, w) = r.dims();
    if (h, w) != (spec.canvas.height, spec.canvas.width) {
        return Err(Error::ShapeMismatch(format!(
            "{what} is {h}x{w}, scene {} canvas is {}x{}",
            spec.seed, spec.canvas.height, spec.canvas.width
        )));
    }
    Ok(())
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Oracle rates of one scene spec's samples.
pub fn spec_alignment(spec: &SceneSpec, samples: &[Generated]) -> Result<Alignment> {
    if samples.is_empty() {
        return Err(Error::InsufficientSamples(0));
    }
    let mut reports = Vec::with_capacity(samples.len());
    for g in samples {
        check_canvas(spec, &g.image, "image")?;
        check_canvas(spec, &g.pose, "pose")?;
        reports.push(oracle_check(spec, &g.image, &g.pose));
    }
    let frac = |r: &crate::world::AlignmentReport, f: fn(&crate::world::PersonReport) -> bool| {
        mean(r.persons.iter().map(|p| f(p) as u8 as f64))
    };
    Ok(Alignment {
        count_accuracy: mean(reports.iter().map(|r| r.count_correct as u8 as f64)),
        color_binding_accuracy: mean(reports.iter().map(|r| frac(r, |p| p.color_correct))),
        action_binding_accuracy: mean(reports.iter().map(|r| frac(r, |p| p.action_correct))),
        all_correct_rate: mean(reports.iter().map(|r| r.all_correct as u8 as f64)),
    })
}

fn mean_alignment(items: &[Alignment]) -> Alignment {
    Alignment {
        count_accuracy: mean(items.iter().map(|a| a.count_accuracy)),
        color_binding_accuracy: mean(items.iter().map(|a| a.color_binding_accuracy)),
        action_binding_accuracy: mean(items.iter().map(|a| a.action_binding_accuracy)),
        all_correct_rate: mean(items.iter().map(|a| a.all_correct_rate)),
    }
}

/// Per-spec and aggregate oracle rates.
pub fn alignment_metrics(specs: &[SceneSpec], samples: &[Vec<Generated>]) -> Result<EvalReport> {
    if specs.len() != samples.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} specs but {} sample sets",
            specs.len(),
            samples.len()
        )));
    }
    let reports: Vec<SpecReport> = specs
        .par_iter()
        .zip(samples)
        .map(|(spec, set)| {
            Ok(SpecReport {
                seed: spec.seed,
                num_people: spec.num_people,
                samples: set.len(),
                alignment: spec_alignment(spec, set)?,
                diversity: None,
            })
        })
        .collect::<Result<_>>()?;
    let alignment = mean_alignment(&reports.iter().map(|r| r.alignment).collect::<Vec<_>>());
    Ok(EvalReport {
        specs: reports,
        alignment,
        diversity: None,
    })
}

/// Centre-pads every image to the largest height and width with the
/// background value.
pub fn pad_to_common(images: &[Raster]) -> Vec<Raster> {
    let c = images.iter().map(Raster::channels).max().unwrap_or(0);
    let h = images.iter().map(Raster::height).max().unwrap_or(0);
    let w = images.iter().map(Raster::width).max().unwrap_or(0);
    images
        .iter()
        .map(|r| {
            if r.dims() == (c, h, w) {
                return r.clone();
            }
            let mut out = Array3::from_elem((c, h, w), BACKGROUND);
            let (rc, rh, rw) = r.dims();
            let (y0, x0) = ((h - rh) / 2, (w - rw) / 2);
            out.slice_mut(s![..rc, y0..y0 + rh, x0..x0 + rw]).assign(r.data());
            Raster::from_array(out)
        })
        .collect()
}

fn patch_vectors(r: &Raster, patch: usize) -> Vec<Vec<f64>> {
    let (c, h, w) = r.dims();
    let mut out = Vec::new();
    for py in 0..h / patch {
        for px in 0..w / patch {
            let mut v = Vec::with_capacity(c * patch * patch);
            for ch in 0..c {
                for y in 0..patch {
                    for x in 0..patch {
                        v.push(r.get(ch, py * patch + y, px * patch + x));
                    }
                }
            }
            out.push(v);
        }
    }
    out
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    1.0 - (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

fn require_pairs(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InsufficientSamples(n));
    }
    Ok(())
}

/// Mean over image pairs of the mean-over-patches cosine distance between
/// non-overlapping `patch`x`patch` patch vectors.
pub fn feature_distance(images: &[Raster], patch: usize) -> Result<f64> {
    require_pairs(images.len())?;
    if patch == 0 {
        return Err(Error::InvalidConfig("patch must be positive".into()));
    }
    let feats: Vec<Vec<Vec<f64>>> = pad_to_common(images).iter().map(|r| patch_vectors(r, patch)).collect();
    Ok(mean(pairs(images.len()).map(|(i, j)| {
        mean(feats[i].iter().zip(&feats[j]).map(|(a, b)| cosine_distance(a, b)))
    })))
}

/// Mean over image pairs of the root-mean-square pixel difference.
pub fn pixel_distance(images: &[Raster]) -> Result<f64> {
    require_pairs(images.len())?;
    let padded = pad_to_common(images);
    Ok(mean(pairs(images.len()).map(|(i, j)| {
        let a = padded[i].data();
        let b = padded[j].data();
        let ss: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        (ss / a.len().max(1) as f64).sqrt()
    })))
}

/// Shannon entropy of `values`, normalised by the log of the largest number
/// of distinct outcomes the sample could show: `min(values.len(), categories)`.
pub fn normalized_entropy<T: std::hash::Hash + Eq>(values: &[T], categories: usize) -> Result<f64> {
    require_pairs(values.len())?;
    let reach = values.len().min(categories);
    if reach < 2 {
        return Ok(0.0);
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let n = values.len() as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok((h / (reach as f64).ln()).clamp(0.0, 1.0))
}

/// Attribute entropy of one scene spec's samples: per person slot the
/// decoded colour and action (missing counts as its own outcome), each
/// normalised, then averaged over attributes.
pub fn attribute_entropy(spec: &SceneSpec, samples: &[Generated]) -> Result<f64> {
    require_pairs(samples.len())?;
    let reports: Vec<_> = samples.iter().map(|g| oracle_check(spec, &g.image, &g.pose)).collect();
    let mut per_attr = Vec::new();
    for slot in 0..spec.num_people {
        let colors: Vec<Option<usize>> = reports.iter().map(|r| r.persons[slot].decoded_color).collect();
        let actions: Vec<Option<usize>> = reports.iter().map(|r| r.persons[slot].decoded_action).collect();
        per_attr.push(normalized_entropy(&colors, PALETTE.len() + 1)?);
        per_attr.push(normalized_entropy(&actions, ACTION_TEMPLATES.len() + 1)?);
    }
    Ok(mean(per_attr))
}

/// Diversity of one scene spec's sample set.
pub fn spec_diversity(spec: &SceneSpec, samples: &[Generated]) -> Result<Diversity> {
    require_pairs(samples.len())?;
    for g in samples {
        check_canvas(spec, &g.image, "image")?;
    }
    let images: Vec<Raster> = samples.iter().map(|g| g.image.clone()).collect();
    Ok(Diversity {
        feature_distance: feature_distance(&images, spec.patch)?,
        pixel_distance: pixel_distance(&images)?,
        attribute_entropy: attribute_entropy(spec, samples)?,
    })
}

/// Alignment plus diversity for every scene spec.
pub fn evaluate(specs: &[SceneSpec], samples: &[Vec<Generated>]) -> Result<EvalReport> {
    let mut report = alignment_metrics(specs, samples)?;
    let divs: Vec<Diversity> = specs
        .par_iter()
        .zip(samples)
        .map(|(spec, set)| spec_diversity(spec, set))
        .collect::<Result<_>>()?;
    for (r, d) in report.specs.iter_mut().zip(&divs) {
        r.diversity = Some(*d);
    }
    report.diversity = Some(Diversity {
        feature_distance: mean(divs.iter().map(|d| d.feature_distance)),
        pixel_distance: mean(divs.iter().map(|d| d.pixel_distance)),
        attribute_entropy: mean(divs.iter().map(|d| d.attribute_entropy)),
    });
    Ok(report)
}

pub const CSV_HEADER: &str = "seed,num_people,samples,count_accuracy,color_binding_accuracy,action_binding_accuracy,all_correct_rate,feature_distance,pixel_distance,attribute_entropy";

fn csv_row(label: &str, people: &str, samples: usize, a: &Alignment, d: Option<&Diversity>) -> String {
    let div = |f: fn(&Diversity) -> f64| d.map_or(String::new(), |d| format!("{:.6}", f(d)));
    format!(
        "{label},{people},{samples},{:.6},{:.6},{:.6},{:.6},{},{},{}",
        a.count_accuracy,
        a.color_binding_accuracy,
        a.action_binding_accuracy,
        a.all_correct_rate,
        div(|d| d.feature_distance),
        div(|d| d.pixel_distance),
        div(|d| d.attribute_entropy),
    )
}

impl EvalReport {
    /// Whether the aggregate and every per-spec rate satisfy
    /// `all_correct <= min(count, colour, action)`.
    pub fn strictness_holds(&self) -> bool {
        let ok = |a: &Alignment| {
            a.all_correct_rate
                <= a.count_accuracy
                    .min(a.color_binding_accuracy)
                    .min(a.action_binding_accuracy)
        };
        ok(&self.alignment) && self.specs.iter().all(|s| ok(&s.alignment))
    }

    /// One row per scene spec followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.specs {
            s.push_str(&csv_row(
                &r.seed.to_string(),
                &r.num_people.to_string(),
                r.samples,
                &r.alignment,
                r.diversity.as_ref(),
            ));
            s.push('\n');
        }
        let total: usize = self.specs.iter().map(|r| r.samples).sum();
        s.push_str(&csv_row("mean", "", total, &self.alignment, self.diversity.as_ref()));
        s.push('\n');
        s
    }

    pub fn summary(&self) -> String {
        let a = &self.alignment;
        let mut s = String::new();
        let samples: usize = self.specs.iter().map(|r| r.samples).sum();
        let _ = writeln!(s, "specs: {}  samples: {samples}", self.specs.len());
        let _ = writeln!(s, "count accuracy:          {:.3}", a.count_accuracy);
        let _ = writeln!(s, "colour binding accuracy: {:.3}", a.color_binding_accuracy);
        let _ = writeln!(s, "action binding accuracy: {:.3}", a.action_binding_accuracy);
        let _ = writeln!(s, "all-correct rate:        {:.3}", a.all_correct_rate);
        if let Some(d) = &self.diversity {
            let _ = writeln!(s, "feature distance:        {:.4}", d.feature_distance);
            let _ = writeln!(s, "pixel distance:          {:.4}", d.pixel_distance);
            let _ = writeln!(s, "attribute entropy:       {:.4}", d.attribute_entropy);
        }
        s
    }

    /// Writes `report.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_path(dir)?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).with_path(&csv)?;
        let txt = dir.join("summary.txt");
        std::fs::write(&txt, self.summary()).with_path(&txt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{gen_scene, render_rgb, render_scene_pose, WorldConfig};

    fn truth(spec: &SceneSpec) -> Generated {
        Generated {
            image: render_rgb(spec),
            pose: render_scene_pose(spec),
        }
    }

    fn blank(spec: &SceneSpec) -> Generated {
        let (h, w) = (spec.canvas.height, spec.canvas.width);
        Generated {
            image: Raster::background(3, h, w),
            pose: Raster::background(3, h, w),
        }
    }

    #[test]
    fn ground_truth_scores_one() {
        let specs: Vec<SceneSpec> = (0..6)
            .map(|i| gen_scene(i, &WorldConfig::default().with_people(1 + i as usize % 3)).unwrap())
            .collect();
        let sets: Vec<Vec<Generated>> = specs.iter().map(|s| vec![truth(s); 2]).collect();
        let r = alignment_metrics(&specs, &sets).unwrap();
        assert_eq!(
            r.alignment,
            Alignment {
                count_accuracy: 1.0,
                color_binding_accuracy: 1.0,
                action_binding_accuracy: 1.0,
                all_correct_rate: 1.0,
            }
        );
        assert!(r.strictness_holds());
    }

    #[test]
    fn blank_generations_score_zero() {
        let spec = gen_scene(3, &WorldConfig::default().with_people(2)).unwrap();
        let r = alignment_metrics(std::slice::from_ref(&spec), &[vec![blank(&spec); 3]]).unwrap();
        assert_eq!(r.alignment.count_accuracy, 0.0);
        assert_eq!(r.alignment.all_correct_rate, 0.0);
    }

    #[test]
    fn half_passing_set_gives_half() {
        let spec = gen_scene(5, &WorldConfig::default().with_people(2)).unwrap();
        let set = vec![truth(&spec), blank(&spec), truth(&spec), blank(&spec)];
        let r = alignment_metrics(std::slice::from_ref(&spec), &[set]).unwrap();
        assert_eq!(r.alignment.all_correct_rate, 0.5);
        assert!(r.strictness_holds());
    }

    #[test]
    fn canvas_mismatch_is_an_error() {
        let spec = gen_scene(1, &WorldConfig::default()).unwrap();
        let bad = Generated {
            image: Raster::background(3, 16, 16),
            pose: Raster::background(3, 16, 16),
        };
        assert!(matches!(
            alignment_metrics(std::slice::from_ref(&spec), &[vec![bad]]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn identical_sets_have_no_diversity() {
        let spec = gen_scene(2, &WorldConfig::default().with_people(2)).unwrap();
        let d = spec_diversity(&spec, &vec![truth(&spec); 5]).unwrap();
        assert_eq!(d, Diversity::default());
    }

    #[test]
    fn antipodal_images_have_cosine_distance_two() {
        let a = Raster::filled(3, 8, 8, -1.0);
        let b = Raster::filled(3, 8, 8, 1.0);
        assert_eq!(feature_distance(&[a.clone(), b.clone()], 4).unwrap(), 2.0);
        assert_eq!(pixel_distance(&[a, b]).unwrap(), 2.0);
    }

    #[test]
    fn uniform_values_have_entropy_one() {
        assert_eq!(normalized_entropy(&[0, 1, 2, 3], 5).unwrap(), 1.0);
        assert_eq!(normalized_entropy(&[2, 2, 2], 5).unwrap(), 0.0);
        assert!(matches!(
            normalized_entropy(&[1], 5),
            Err(Error::InsufficientSamples(1))
        ));
    }

    #[test]
    fn single_sample_is_rejected() {
        let spec = gen_scene(2, &WorldConfig::default()).unwrap();
        assert!(matches!(
            spec_diversity(&spec, &[truth(&spec)]),
            Err(Error::InsufficientSamples(1))
        ));
        assert!(matches!(pixel_distance(&[]), Err(Error::InsufficientSamples(0))));
    }

    #[test]
    fn padding_centres_with_background() {
        let small = Raster::filled(3, 2, 2, 1.0);
        let big = Raster::filled(3, 4, 6, 0.5);
        let out = pad_to_common(&[small, big.clone()]);
        assert_eq!(out[1], big);
        assert_eq!(out[0].dims(), (3, 4, 6));
        assert_eq!(out[0].get(0, 1, 2), 1.0);
        assert_eq!(out[0].get(0, 2, 3), 1.0);
        assert_eq!(out[0].get(0, 0, 0), BACKGROUND);
        assert_eq!(out[0].get(2, 3, 5), BACKGROUND);
    }
}
