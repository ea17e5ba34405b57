//! Generates a scene person by person and exports every stage as images.
//!
//! Pass a fine-tuned checkpoint (for instance from the `train_tiny` example)
//! to see learned output; without one a randomly initialised model is used.
//!
//! ```text
//! cargo run --release --example iterative_sampling -- target/train_tiny/finetune.ppc
//! ```

use std::path::Path;

use ppc::flow::SampleConfig;
use ppc::iterate::{export_trace, generate_scene, GenerateOptions, GenerationMode};
use ppc::model::{Model, ModelConfig};
use ppc::train::load_checkpoint;
use ppc::world::{gen_scene, oracle_check, WorldConfig};

fn main() -> ppc::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(Path::new(&path))?,
        None => {
            let mut m = Model::init(ModelConfig::tiny(), 0)?;
            m.init_pose_stream(1)?;
            m
        }
    };
    let spec = gen_scene(3, &WorldConfig::default().with_people(3))?;
    let out = Path::new("target/iterative_sampling");

    for (name, mode) in [
        ("iterative", GenerationMode::Iterative),
        ("single_pass", GenerationMode::SinglePass),
    ] {
        let opts = GenerateOptions {
            sample: SampleConfig {
                steps: 20,
                guidance: 4.0,
                seed: 7,
            },
            mode,
            ..GenerateOptions::default()
        };
        let trace = generate_scene(&model, &spec, &opts)?;
        for (i, s) in trace.stages.iter().enumerate() {
            println!(
                "{name} stage {}: {} strokes, {:.0} ms",
                i + 1,
                s.pose.stroke_count(),
                s.elapsed_ms
            );
        }
        let report = oracle_check(&spec, &trace.final_image, &trace.final_pose);
        println!(
            "{name}: {} model evaluations, decoded {} people, all correct {}",
            trace.model_evals, report.decoded_count, report.all_correct
        );
        export_trace(&trace, &out.join(name), true)?;
    }
    println!("traces written under {}", out.display());
    Ok(())
}
