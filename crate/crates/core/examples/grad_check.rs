//! Compares analytic gradients of a small fine-tuning model against central
//! differences and prints the per-tensor table.

use ppc::flow::{make_training_batch, BatchOptions};
use ppc::model::{LossWeights, Model, ModelConfig};
use ppc::seq::AssembleOptions;
use ppc::train::{grad_check, GradCheckOptions};
use ppc::world::{decompose_stages, gen_scene, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ppc::Result<()> {
    let mut model = Model::init(ModelConfig::tiny(), 1)?;
    model.params.perturb(&mut ChaCha8Rng::seed_from_u64(2), 0.2);
    model.init_pose_stream(3)?;
    model.params.perturb(&mut ChaCha8Rng::seed_from_u64(4), 0.1);

    let spec = gen_scene(6, &WorldConfig::default().with_people(2))?;
    let opts = BatchOptions {
        p_drop: 0.0,
        patch: spec.patch,
        assemble: AssembleOptions::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut batches, mut targets) = (Vec::new(), Vec::new());
    for stage in decompose_stages(&spec) {
        let (tokens, flow) = make_training_batch(&stage, &mut rng, &opts)?;
        batches.push(tokens);
        targets.push(flow.target());
    }
    let report = grad_check(
        &model,
        &batches,
        &targets,
        LossWeights { pose: 1.0, image: 1.0 },
        GradCheckOptions::default(),
    )?;
    print!("{}", report.to_table());
    println!(
        "passed: {}, worst relative error {:.2e}",
        report.passed(),
        report.worst()
    );
    Ok(())
}
