//! Command-line front end.
//!
//! Every subcommand writes a `manifest.txt` into `--out` before doing any
//! work, honours `--seed`, and reports failures as a single `error:` line
//! with exit code 1. Usage errors exit with code 2.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, PathContext, Result};
use crate::evalkit::{evaluate, Generated, DEFAULT_SAMPLES};
use crate::flow::{make_training_batch, BatchOptions, SampleConfig};
use crate::iterate::{export_trace, generate_scenes, GenerateOptions, GenerationMode};
use crate::model::{LossWeights, Model, ModelConfig};
use crate::train::{
    self, generate_specs, grad_check, load_checkpoint, parse_range, phase_samples, train_phase, DataConfig,
    GradCheckOptions, Phase, RunConfig, TrainConfig, TrainOutputs,
};
use crate::world::{read_dataset, render_rgb, render_scene_pose, write_dataset, SceneSpec, WorldConfig};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "PPC_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "ppc",
    version,
    about = "Pose-conditioned multi-person scene generation at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scenes to train on, in the `gen-data` format; generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub scenes: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Generate every person in one stage instead of one stage per person.
    #[arg(long)]
    pub single_pass: bool,
    /// Put every text token at person index 0 on the tau axis.
    #[arg(long)]
    pub no_text_tau: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a scene dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        /// People per scene as `a..b` (inclusive) or a single number.
        #[arg(long, default_value = "1")]
        people: String,
        /// Require pairwise disjoint person boxes.
        #[arg(long)]
        disjoint: bool,
    },
    /// Train the text and image streams on single-person scenes.
    Pretrain(TrainArgs),
    /// Adapt the pose stream of a pretrained checkpoint on multi-person scenes.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        /// Pretrained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Generate one scene and export its per-stage trace.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset file holding the scene; generated from `--seed` when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Record of `--spec` to use.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 2)]
        people: usize,
        #[command(flatten)]
        sampling: SampleArgs,
        /// Also write per-stage wall times to the manifest.
        #[arg(long)]
        timings: bool,
    },
    /// Evaluate alignment and diversity on a set of scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to sample from; required unless `--ground-truth`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Dataset file of scenes; generated from `--seed` when absent.
        #[arg(long)]
        specs: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value = "2")]
        people: String,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        /// Score the ground-truth renders instead of model samples.
        #[arg(long)]
        ground_truth: bool,
        #[command(flatten)]
        sampling: SampleArgs,
    },
    /// Compare analytic and finite-difference gradients.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to check; a fresh small model otherwise.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 6)]
        samples_per_tensor: usize,
    },
    /// Print the parameter table of a checkpoint.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::GradCheck { .. } => "grad-check",
            Command::Inspect { .. } => "inspect",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Sample { common, .. }
            | Command::Eval { common, .. }
            | Command::GradCheck { common, .. }
            | Command::Inspect { common, .. } => common,
            Command::Pretrain(t) | Command::Finetune { train: t, .. } => &t.common,
        }
    }

    fn config_path(&self) -> Option<&Path> {
        match self {
            Command::Pretrain(t) | Command::Finetune { train: t, .. } => t.config.as_deref(),
            _ => None,
        }
    }
}

/// Record of one invocation, written before any work starts.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub resolved_config: String,
    pub seed: u64,
    pub version: String,
    pub out: PathBuf,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let cfg = self
            .config_path
            .as_ref()
            .map_or("-".into(), |p| p.display().to_string());
        let _ = writeln!(s, "config = {cfg}");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "version = {}", self.version);
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "[resolved]");
        s.push_str(&self.resolved_config);
        s
    }

    pub fn write(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).with_path(&self.out)?;
        let path = self.out.join("manifest.txt");
        std::fs::write(&path, self.to_text()).with_path(&path)
    }
}

/// `git describe`-style version: the tag-like package version, followed by
/// the commit when the binary runs inside a checkout.
pub fn version_string() -> String {
    let base = format!("v{}", env!("CARGO_PKG_VERSION"));
    let describe = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty());
    match describe {
        Some(d) => format!("{base}-g{d}"),
        None => base,
    }
}

fn resolve_run_config(t: &TrainArgs, phase: Phase) -> Result<RunConfig> {
    let mut cfg = RunConfig {
        train: TrainConfig::for_phase(phase),
        ..RunConfig::default()
    };
    if phase == Phase::Finetune {
        (cfg.data.min_people, cfg.data.max_people) = (2, 3);
    }
    if let Some(p) = &t.config {
        cfg.apply_str(&std::fs::read_to_string(p).with_path(p)?)?;
    }
    let usage = |reason: String| Error::Parse { line: 0, reason };
    for kv in &t.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    cfg.train.phase = phase;
    cfg.train.seed = t.common.seed;
    if let Some(v) = t.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = t.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = t.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = t.scenes {
        cfg.data.scenes = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sample_options(args: &SampleArgs, seed: u64) -> Result<GenerateOptions> {
    let mut opts = GenerateOptions::default();
    opts.sample = SampleConfig {
        steps: args.steps.unwrap_or(opts.sample.steps),
        guidance: args.guidance.unwrap_or(opts.sample.guidance),
        seed,
    };
    opts.sample.validate()?;
    if args.single_pass {
        opts.mode = GenerationMode::SinglePass;
    }
    opts.text_tau = !args.no_text_tau;
    Ok(opts)
}

fn gen_specs(seed: u64, scenes: usize, people: &str, disjoint: bool) -> Result<Vec<SceneSpec>> {
    let (min_people, max_people) = parse_range(people).map_err(|reason| Error::Parse { line: 0, reason })?;
    let world = WorldConfig {
        disjoint_boxes: disjoint,
        max_people: WorldConfig::default().max_people.max(max_people),
        ..WorldConfig::default()
    };
    generate_specs(
        &DataConfig {
            scenes,
            min_people,
            max_people,
            data_seed: seed,
        },
        &world,
    )
}

fn load_specs_or_generate(path: Option<&Path>, seed: u64, scenes: usize, people: &str) -> Result<Vec<SceneSpec>> {
    match path {
        Some(p) => read_dataset(p),
        None => gen_specs(seed, scenes, people, false),
    }
}

fn training_specs(t: &TrainArgs, cfg: &RunConfig) -> Result<Vec<SceneSpec>> {
    match &t.data {
        Some(p) => read_dataset(p),
        None => {
            let world = WorldConfig {
                max_people: WorldConfig::default().max_people.max(cfg.data.max_people),
                ..WorldConfig::default()
            };
            generate_specs(&cfg.data, &world)
        }
    }
}

fn run_training(t: &TrainArgs, cfg: &RunConfig, model: Model) -> Result<()> {
    let specs = training_specs(t, cfg)?;
    let samples = phase_samples(cfg.train.phase, &specs)?;
    let out = &t.common.out;
    let outputs = TrainOutputs {
        metrics: Some(out.join("metrics.csv")),
        checkpoints: Some(out.to_path_buf()),
    };
    let every = (cfg.train.steps / 10).max(1);
    let result = train_phase(&cfg.train, samples, model, &outputs, |row| {
        if row.step % every == 0 {
            eprintln!(
                "step {:>6}  loss {:.5}  ({:.0} ms)",
                row.step, row.loss.total, row.wall_ms
            );
        }
    })?;
    if let Some(last) = result.log.last() {
        eprintln!("final step {}  loss {:.5}", last.step, last.loss.total);
    }
    Ok(())
}

fn inspect_table(model: &Model) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<40} {:>12} {:>8} {:>10}", "name", "shape", "frozen", "count");
    for (name, t) in model.params.iter() {
        let shape = format!("{}x{}", t.nrows(), t.ncols());
        let _ = writeln!(
            s,
            "{name:<40} {shape:>12} {:>8} {:>10}",
            model.params.is_frozen(name),
            t.len()
        );
    }
    let _ = writeln!(
        s,
        "total {}  trainable {}  frozen-checksum {:016x}",
        model.params.total_count(),
        model.params.trainable_count(),
        model.params.frozen_checksum()
    );
    s
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).with_path(&p)
}

fn grad_check_fixture(
    model: Option<Model>,
    seed: u64,
) -> Result<(Model, Vec<crate::seq::TokenBatch>, Vec<crate::model::VelocityTarget>)> {
    use rand::SeedableRng;
    let model = match model {
        Some(m) => m,
        None => {
            let mut m = Model::init(ModelConfig::tiny(), seed)?;
            m.init_pose_stream(seed.wrapping_add(1))?;
            m.params
                .perturb(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xfeed), 0.1);
            m
        }
    };
    let spec = crate::world::gen_scene(seed, &WorldConfig::default().with_people(2))?;
    let stage = crate::world::decompose_stages(&spec).remove(1);
    let opts = BatchOptions {
        p_drop: 0.0,
        patch: spec.patch,
        assemble: train::phase_assemble(if model.has_pose_stream() {
            Phase::Finetune
        } else {
            Phase::Pretrain
        }),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (tokens, flow) = make_training_batch(&stage, &mut rng, &opts)?;
    Ok((model, vec![tokens], vec![flow.target()]))
}

fn execute(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let out = &common.out;
    let seed = common.seed;
    let resolved = match cmd {
        Command::Pretrain(t) => Some(resolve_run_config(t, Phase::Pretrain)?),
        Command::Finetune { train, .. } => Some(resolve_run_config(train, Phase::Finetune)?),
        _ => None,
    };
    let manifest = RunManifest {
        command: cmd.name().into(),
        config_path: cmd.config_path().map(Path::to_path_buf),
        resolved_config: resolved
            .as_ref()
            .map_or_else(|| format!("{cmd:?}\n"), RunConfig::to_text),
        seed,
        version: version_string(),
        out: out.clone(),
    };
    manifest.write()?;

    match cmd {
        Command::GenData {
            scenes,
            people,
            disjoint,
            ..
        } => {
            let specs = gen_specs(seed, *scenes, people, *disjoint)?;
            write_dataset(&out.join("scenes.txt"), &specs)?;
            eprintln!("wrote {} scenes to {}", specs.len(), out.join("scenes.txt").display());
        }
        Command::Pretrain(t) => {
            let cfg = resolved.expect("resolved above");
            let model = Model::init(cfg.model.clone(), seed)?;
            run_training(t, &cfg, model)?;
        }
        Command::Finetune { train, ckpt } => {
            let cfg = resolved.expect("resolved above");
            if !ckpt.exists() {
                return Err(Error::Pipeline(format!(
                    "pretrained checkpoint {} not found",
                    ckpt.display()
                )));
            }
            let model = load_checkpoint(ckpt)?;
            if model.has_pose_stream() {
                return Err(Error::Pipeline(format!("{} is already fine-tuned", ckpt.display())));
            }
            run_training(train, &cfg, model)?;
        }
        Command::Sample {
            ckpt,
            spec,
            index,
            people,
            sampling,
            timings,
            ..
        } => {
            let model = load_checkpoint(ckpt)?;
            let scene = match spec {
                Some(p) => read_dataset(p)?
                    .into_iter()
                    .nth(*index)
                    .ok_or_else(|| Error::InvalidConfig(format!("{} has no record {index}", p.display())))?,
                None => gen_specs(seed, 1, &people.to_string(), false)?.remove(0),
            };
            let opts = sample_options(sampling, seed)?;
            let trace = generate_scenes(&model, std::slice::from_ref(&scene), &opts)?.remove(0);
            export_trace(&trace, &out.join("trace"), *timings)?;
            write_dataset(&out.join("scene.txt"), std::slice::from_ref(&scene))?;
        }
        Command::Eval {
            ckpt,
            specs,
            scenes,
            people,
            samples,
            ground_truth,
            sampling,
            ..
        } => {
            let specs = load_specs_or_generate(specs.as_deref(), seed, *scenes, people)?;
            let sets: Vec<Vec<Generated>> = if *ground_truth {
                specs
                    .iter()
                    .map(|s| {
                        let g = Generated {
                            image: render_rgb(s),
                            pose: render_scene_pose(s),
                        };
                        vec![g; *samples]
                    })
                    .collect()
            } else {
                let path = ckpt
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("eval needs --ckpt or --ground-truth".into()))?;
                let model = load_checkpoint(path)?;
                let mut sets = vec![Vec::with_capacity(*samples); specs.len()];
                for k in 0..*samples {
                    let opts = sample_options(sampling, train::derive_seed(seed, &[k as u64]))?;
                    for (set, t) in sets.iter_mut().zip(generate_scenes(&model, &specs, &opts)?) {
                        set.push(Generated::from(&t));
                    }
                }
                sets
            };
            let report = evaluate(&specs, &sets)?;
            report.write(out)?;
            print!("{}", report.summary());
        }
        Command::GradCheck {
            ckpt,
            tolerance,
            samples_per_tensor,
            ..
        } => {
            let model = ckpt.as_deref().map(load_checkpoint).transpose()?;
            let (model, tokens, targets) = grad_check_fixture(model, seed)?;
            let opts = GradCheckOptions {
                tolerance: *tolerance,
                samples_per_tensor: *samples_per_tensor,
                seed,
            };
            let report = grad_check(&model, &tokens, &targets, LossWeights::default(), opts)?;
            let table = report.to_table();
            write_text(out, "grad_check.txt", &table)?;
            print!("{table}");
            if !report.passed() {
                return Err(Error::Pipeline(format!(
                    "{} tensors exceed tolerance {tolerance:e}",
                    report.failures().len()
                )));
            }
        }
        Command::Inspect { ckpt, .. } => {
            let model = load_checkpoint(ckpt)?;
            let table = inspect_table(&model);
            write_text(out, "inspect.txt", &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    configure_threads();
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["ppc", "frobnicate"]), 2);
        assert_eq!(run(["ppc", "gen-data", "--bogus"]), 2);
        assert_eq!(run(["ppc", "--help"]), 0);
        assert_eq!(run(["ppc", "sample", "--help"]), 0);
    }

    #[test]
    fn missing_checkpoint_exits_one_after_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = run([
            "ppc",
            "inspect",
            "--out",
            out.to_str().unwrap(),
            "--ckpt",
            dir.path().join("none.ppc").to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
        let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
        assert!(manifest.starts_with("command = inspect\n"));
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.cfg");
        std::fs::write(&cfg_path, "lr = 0.5\nsteps = 9\n").unwrap();
        let cli = Cli::try_parse_from([
            "ppc",
            "pretrain",
            "--out",
            "x",
            "--config",
            cfg_path.to_str().unwrap(),
            "--steps",
            "3",
            "--set",
            "batch_size=2",
        ])
        .unwrap();
        let Command::Pretrain(t) = &cli.command else { panic!() };
        let cfg = resolve_run_config(t, Phase::Pretrain).unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.batch_size, 2);
    }
}
