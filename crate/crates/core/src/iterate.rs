//! Person-by-person scene generation.
//!
//! Stage `i` denoises the cumulative pose raster of persons `1..=i` and an
//! image, conditioned on the descriptions of those persons and on the clean
//! pose raster produced by stage `i - 1`. Only that pose raster crosses
//! stage boundaries; the image of every stage but the last is discarded
//! (kept in the trace for inspection only).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, PathContext, Result};
use crate::flow::{cfg_combine, euler_sample, gaussian_raster, SampleConfig};
use crate::model::Model;
use crate::raster::Raster;
use crate::seq::{assemble_sequence, AssembleOptions, TokenBatch};
use crate::world::{SceneSpec, StagePrompt, CHANNELS};

/// Values this close to the background are snapped to it before a pose
/// raster is reused as context.
pub const CLEANUP_TOLERANCE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerationMode {
    /// One stage per person, pose state carried forward.
    Iterative,
    /// Every person in a single stage with the full text and no context.
    SinglePass,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    pub sample: SampleConfig,
    pub mode: GenerationMode,
    /// Give per-person text tokens their person index on the tau axis.
    pub text_tau: bool,
    /// Reuse one noise draw for every stage instead of fresh noise per stage.
    pub share_noise: bool,
    /// Keep the (discarded) intermediate-stage images in the trace.
    pub keep_intermediate_images: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            sample: SampleConfig::default(),
            mode: GenerationMode::Iterative,
            text_tau: true,
            share_noise: false,
            keep_intermediate_images: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    pub stage: usize,
    /// Cleaned pose raster; exactly what the next stage receives as context.
    pub pose: Raster,
    pub image: Option<Raster>,
    pub noise_seed: u64,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    pub stages: Vec<StageTrace>,
    pub final_pose: Raster,
    pub final_image: Raster,
    /// Sequences passed through the model.
    pub model_evals: usize,
}

impl GenerationTrace {
    /// The trace with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timings(&self) -> GenerationTrace {
        let mut t = self.clone();
        t.stages.iter_mut().for_each(|s| s.elapsed_ms = 0.0);
        t
    }
}

/// Seed for the noise of one stage of one scene.
pub fn stage_noise_seed(sample_seed: u64, scene_seed: u64, stage: usize) -> u64 {
    let mut h = sample_seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [scene_seed, stage as u64] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

fn stage_prompts(spec: &SceneSpec, mode: GenerationMode) -> Vec<StagePrompt> {
    match mode {
        GenerationMode::Iterative => (1..=spec.num_people).map(|i| StagePrompt::for_stage(spec, i)).collect(),
        GenerationMode::SinglePass => vec![StagePrompt::for_stage(spec, spec.num_people)],
    }
}

/// Everything one stage of one scene depends on.
#[derive(Clone, Copy, Debug)]
pub struct StageInput<'a> {
    pub prompt: &'a StagePrompt,
    /// Clean pose raster from the previous stage; `None` at stage 1.
    pub context: Option<&'a Raster>,
    pub noise_seed: u64,
    pub dims: (usize, usize, usize),
    pub patch: usize,
}

/// Denoises one stage for several scenes at once, returning the cleaned
/// `(pose, image)` of each.
pub fn denoise_stage(model: &Model, inputs: &[StageInput], opts: &GenerateOptions) -> Result<Vec<(Raster, Raster)>> {
    opts.sample.validate()?;
    let assemble = AssembleOptions {
        text_tau: opts.text_tau,
        include_pose: true,
    };
    let guided = opts.sample.evals_per_step() == 2;
    let init: Vec<Vec<Raster>> = inputs
        .iter()
        .map(|inp| {
            let mut rng = ChaCha8Rng::seed_from_u64(inp.noise_seed);
            vec![gaussian_raster(&mut rng, inp.dims), gaussian_raster(&mut rng, inp.dims)]
        })
        .collect();
    let velocity = |x: &Vec<Vec<Raster>>, t: f64, _step: usize| -> Result<Vec<Vec<Raster>>> {
        let mut seqs: Vec<TokenBatch> = Vec::with_capacity(inputs.len() * 2);
        for (inp, state) in inputs.iter().zip(x) {
            let b = assemble_sequence(
                inp.prompt,
                inp.context,
                Some(&state[0]),
                &state[1],
                t,
                t,
                inp.patch,
                assemble,
            )?;
            if guided {
                seqs.push(b.without_text());
            }
            seqs.push(b);
        }
        let out = model.forward(&seqs)?;
        let per = if guided { 2 } else { 1 };
        out.chunks(per)
            .map(|c| {
                let split = |v: &crate::model::Velocity| -> Result<Vec<Raster>> {
                    let pose = v
                        .pose
                        .clone()
                        .ok_or_else(|| Error::Pipeline("model returned no pose velocity".into()))?;
                    Ok(vec![pose, v.image.clone()])
                };
                let cond = split(&c[per - 1])?;
                if guided {
                    Ok(cfg_combine(&cond, &split(&c[0])?, opts.sample.guidance))
                } else {
                    Ok(cond)
                }
            })
            .collect()
    };
    let result = euler_sample(velocity, init, opts.sample.steps)?;
    Ok(result
        .into_iter()
        .map(|r| (r[0].cleaned(CLEANUP_TOLERANCE), r[1].cleaned(0.0)))
        .collect())
}

/// Generates one scene.
pub fn generate_scene(model: &Model, spec: &SceneSpec, opts: &GenerateOptions) -> Result<GenerationTrace> {
    Ok(generate_scenes(model, std::slice::from_ref(spec), opts)?.remove(0))
}

/// Generates several scenes, running the same stage of every scene in one
/// model call per sampling step.
pub fn generate_scenes(model: &Model, specs: &[SceneSpec], opts: &GenerateOptions) -> Result<Vec<GenerationTrace>> {
    opts.sample.validate()?;
    if !model.has_pose_stream() {
        return Err(Error::Pipeline("generation needs a model with a pose stream".into()));
    }
    for s in specs {
        if s.num_people == 0 || s.persons.is_empty() {
            return Err(Error::InvalidConfig("cannot generate a scene with no people".into()));
        }
    }
    let prompts: Vec<Vec<StagePrompt>> = specs.iter().map(|s| stage_prompts(s, opts.mode)).collect();
    let mut context: Vec<Option<Raster>> = vec![None; specs.len()];
    let mut traces: Vec<Vec<StageTrace>> = vec![Vec::new(); specs.len()];
    let mut evals = vec![0usize; specs.len()];
    let max_stages = prompts.iter().map(Vec::len).max().unwrap_or(0);

    for stage in 1..=max_stages {
        let active: Vec<usize> = (0..specs.len()).filter(|&k| prompts[k].len() >= stage).collect();
        let start = Instant::now();
        let inputs: Vec<StageInput> = active
            .iter()
            .map(|&k| {
                let noise_stage = if opts.share_noise { 0 } else { stage };
                StageInput {
                    prompt: &prompts[k][stage - 1],
                    context: context[k].as_ref(),
                    noise_seed: stage_noise_seed(opts.sample.seed, specs[k].seed, noise_stage),
                    dims: (CHANNELS, specs[k].canvas.height, specs[k].canvas.width),
                    patch: specs[k].patch,
                }
            })
            .collect();
        let seeds: Vec<u64> = inputs.iter().map(|i| i.noise_seed).collect();
        let result = denoise_stage(model, &inputs, opts)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3 / active.len() as f64;
        for ((&k, seed), (pose, image)) in active.iter().zip(seeds).zip(result) {
            let last = stage == prompts[k].len();
            evals[k] += opts.sample.steps * opts.sample.evals_per_step();
            traces[k].push(StageTrace {
                stage,
                pose: pose.clone(),
                image: (last || opts.keep_intermediate_images).then_some(image),
                noise_seed: seed,
                elapsed_ms: elapsed,
            });
            context[k] = Some(pose);
        }
    }
    Ok(traces
        .into_iter()
        .zip(evals)
        .map(|(stages, model_evals)| {
            let last = stages.last().expect("at least one stage");
            GenerationTrace {
                final_pose: last.pose.clone(),
                final_image: last.image.clone().expect("final image kept"),
                stages,
                model_evals,
            }
        })
        .collect())
}

/// Encodes a 3-channel raster in `[-1, 1]` as a binary PPM (P6).
pub fn to_ppm(r: &Raster) -> Vec<u8> {
    let (c, h, w) = r.dims();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = if ch < c { r.get(ch, y, x) } else { -1.0 };
                let byte = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                out.push(byte);
            }
        }
    }
    out
}

/// Writes stage rasters as PPM files plus a `manifest.txt`.
///
/// With `timings` off the manifest omits wall-clock times, which makes two
/// runs with the same seed byte-identical.
pub fn export_trace(trace: &GenerationTrace, dir: &Path, timings: bool) -> Result<()> {
    fs::create_dir_all(dir).with_path(dir)?;
    let mut manifest = String::from("stage\tpose\timage\tnoise_seed");
    if timings {
        manifest.push_str("\telapsed_ms");
    }
    manifest.push('\n');
    for s in &trace.stages {
        let pose = format!("stage{}_pose.ppm", s.stage);
        let p = dir.join(&pose);
        fs::write(&p, to_ppm(&s.pose)).with_path(&p)?;
        let image = match &s.image {
            Some(img) => {
                let name = format!("stage{}_image.ppm", s.stage);
                let p = dir.join(&name);
                fs::write(&p, to_ppm(img)).with_path(&p)?;
                name
            }
            None => "-".into(),
        };
        let _ = write!(manifest, "{}\t{pose}\t{image}\t{}", s.stage, s.noise_seed);
        if timings {
            let _ = write!(manifest, "\t{:.1}", s.elapsed_ms);
        }
        manifest.push('\n');
    }
    for (name, r) in [
        ("final_pose.ppm", &trace.final_pose),
        ("final_image.ppm", &trace.final_image),
    ] {
        let p = dir.join(name);
        fs::write(&p, to_ppm(r)).with_path(&p)?;
    }
    let _ = writeln!(manifest, "model_evals\t{}", trace.model_evals);
    let p = dir.join("manifest.txt");
    fs::write(&p, manifest).with_path(&p)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::world::{gen_scene, WorldConfig};

    fn tiny_model() -> Model {
        let mut m = Model::init(ModelConfig::tiny(), 1).unwrap();
        m.params.perturb(&mut ChaCha8Rng::seed_from_u64(2), 0.1);
        m.init_pose_stream(3).unwrap();
        m.params.perturb(&mut ChaCha8Rng::seed_from_u64(4), 0.05);
        m
    }

    fn opts(steps: usize, guidance: f64) -> GenerateOptions {
        GenerateOptions {
            sample: SampleConfig {
                steps,
                guidance,
                seed: 11,
            },
            ..GenerateOptions::default()
        }
    }

    #[test]
    fn single_person_has_one_stage() {
        let m = tiny_model();
        let spec = gen_scene(1, &WorldConfig::default()).unwrap();
        let t = generate_scene(&m, &spec, &opts(2, 4.0)).unwrap();
        assert_eq!(t.stages.len(), 1);
        assert_eq!(t.model_evals, 2 * 2);
    }

    #[test]
    fn pose_state_is_carried_forward() {
        let m = tiny_model();
        let spec = gen_scene(2, &WorldConfig::default().with_people(3)).unwrap();
        let t = generate_scene(&m, &spec, &opts(2, 1.0)).unwrap();
        assert_eq!(t.stages.len(), 3);
        assert_eq!(t.model_evals, 3 * 2);
        assert_eq!(t.final_pose, t.stages[2].pose);
        let again = generate_scene(&m, &spec, &opts(2, 1.0)).unwrap();
        assert_eq!(t.without_timings(), again.without_timings());
    }

    #[test]
    fn later_stages_depend_only_on_pose_state() {
        let m = tiny_model();
        let spec = gen_scene(5, &WorldConfig::default().with_people(2)).unwrap();
        let o = opts(3, 4.0);
        let t = generate_scene(&m, &spec, &o).unwrap();
        let prompt = StagePrompt::for_stage(&spec, 2);
        let input = StageInput {
            prompt: &prompt,
            context: Some(&t.stages[0].pose),
            noise_seed: t.stages[1].noise_seed,
            dims: (3, 32, 32),
            patch: 4,
        };
        let (pose, image) = denoise_stage(&m, &[input], &o).unwrap().remove(0);
        assert_eq!(pose, t.stages[1].pose);
        assert_eq!(Some(image), t.stages[1].image);
    }

    #[test]
    fn single_pass_is_one_stage() {
        let m = tiny_model();
        let spec = gen_scene(3, &WorldConfig::default().with_people(2)).unwrap();
        let o = GenerateOptions {
            mode: GenerationMode::SinglePass,
            ..opts(2, 4.0)
        };
        assert_eq!(generate_scene(&m, &spec, &o).unwrap().stages.len(), 1);
    }

    #[test]
    fn ppm_encoding() {
        let mut r = Raster::background(3, 1, 2);
        r.data_mut()[[0, 0, 1]] = 1.0;
        let b = to_ppm(&r);
        assert!(b.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&b[b.len() - 6..], &[0, 0, 0, 255, 0, 0]);
    }
}
