//! Shows the (tau, x, y) positions given to each token of a stage and checks
//! that rotated attention logits only see position offsets.

use ndarray::Array2;
use ppc::rope::{apply_rope, build_rope_tables};
use ppc::seq::{assemble_sequence, AssembleOptions, PositionId};
use ppc::world::{decompose_stages, gen_scene, WorldConfig};
use ppc::Raster;

fn main() -> ppc::Result<()> {
    let spec = gen_scene(5, &WorldConfig::default().with_people(2))?;
    let stage = &decompose_stages(&spec)[1];
    let noise = Raster::background(3, 32, 32);
    let batch = assemble_sequence(
        &stage.prompt,
        Some(&stage.context_pose),
        Some(&noise),
        &noise,
        1.0,
        1.0,
        spec.patch,
        AssembleOptions::default(),
    )?;

    let text: Vec<u32> = batch.layout.text().map(|i| batch.positions[i].tau).collect();
    println!("text tau: {text:?}");
    let (gw, gh) = (batch.layout.grid_w, batch.layout.grid_h);
    for (name, range) in [
        ("context", batch.layout.ctx()),
        ("pose", batch.layout.pose()),
        ("image", batch.layout.image()),
    ] {
        println!("{name} tau grid:");
        let taus: Vec<u32> = range.map(|i| batch.positions[i].tau).collect();
        for row in taus.chunks(gw).take(gh) {
            println!("  {}", row.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "));
        }
    }

    let tables = build_rope_tables(32, [8, 12, 12], 10_000.0)?;
    let q = Array2::from_shape_fn((1, 32), |(_, j)| (j as f64 * 0.37).sin());
    let k = Array2::from_shape_fn((1, 32), |(_, j)| (j as f64 * 0.91).cos());
    let logit = |a: PositionId, b: PositionId| -> ppc::Result<f64> {
        let (qa, kb) = (apply_rope(&q, &[a], &tables)?, apply_rope(&k, &[b], &tables)?);
        Ok(qa.iter().zip(kb.iter()).map(|(x, y)| x * y).sum())
    };
    let near = logit(PositionId::new(1, 2, 3), PositionId::new(2, 4, 4))?;
    let shifted = logit(PositionId::new(3, 7, 9), PositionId::new(4, 9, 10))?;
    println!("logit at offset (1,2,1): {near:.12} vs shifted pair {shifted:.12}");
    Ok(())
}
