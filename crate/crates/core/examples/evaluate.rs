//! Scores ground-truth renders and corrupted copies with the alignment and
//! diversity metrics.

use ppc::evalkit::{evaluate, Generated};
use ppc::train::{generate_specs, DataConfig};
use ppc::world::{render_rgb, render_scene_pose, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ppc::Result<()> {
    let specs = generate_specs(
        &DataConfig {
            scenes: 8,
            min_people: 1,
            max_people: 3,
            data_seed: 9,
        },
        &WorldConfig::default(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for flip in [0.0, 0.02, 0.1] {
        let samples: Vec<Vec<Generated>> = specs
            .iter()
            .map(|s| {
                (0..4)
                    .map(|_| {
                        let mut g = Generated {
                            image: render_rgb(s),
                            pose: render_scene_pose(s),
                        };
                        for r in [&mut g.image, &mut g.pose] {
                            r.data_mut()
                                .mapv_inplace(|v| if rng.random_bool(flip) { -v } else { v });
                        }
                        g
                    })
                    .collect()
            })
            .collect();
        let report = evaluate(&specs, &samples)?;
        println!("corruption {flip}:\n{}", report.summary());
    }
    Ok(())
}
