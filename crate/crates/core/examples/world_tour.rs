//! Generates a three-person scene, walks its stages and checks the renders
//! with the oracle.
//!
//! ```text
//! cargo run --example world_tour -- 42
//! ```

use ppc::world::{
    decode_pose, decompose_stages, gen_scene, oracle_check, render_rgb, render_scene_pose, write_dataset_string,
    WorldConfig, ACTION_NAMES,
};
use ppc::Raster;

fn ascii(r: &Raster) -> String {
    let mut out = String::new();
    for y in 0..r.height() {
        for x in 0..r.width() {
            let on = (0..r.channels()).any(|c| r.get(c, y, x) > -0.5);
            out.push(if on { '#' } else { '.' });
        }
        out.push('\n');
    }
    out
}

fn main() -> ppc::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(42);
    let spec = gen_scene(seed, &WorldConfig::default().with_people(3))?;
    print!("{}", write_dataset_string(std::slice::from_ref(&spec)));

    for p in &spec.persons {
        println!(
            "person {}: color {} action {} box {:?}",
            p.index, p.color_id, ACTION_NAMES[p.action_id], p.bbox
        );
    }
    for stage in decompose_stages(&spec) {
        println!(
            "stage {}: {} text ids, context strokes {}, target strokes {}",
            stage.stage(),
            stage.prompt.text_tokens.len(),
            stage.context_pose.stroke_count(),
            stage.target_pose.stroke_count()
        );
    }

    let pose = render_scene_pose(&spec);
    println!("\npose raster:\n{}", ascii(&pose));
    let decoded = decode_pose(&pose);
    println!(
        "decoded {} skeletons, {} ambiguous regions",
        decoded.skeletons.len(),
        decoded.ambiguous.len()
    );
    let report = oracle_check(&spec, &render_rgb(&spec), &pose);
    println!(
        "oracle on ground truth: count ok {}, all correct {}",
        report.count_correct, report.all_correct
    );
    Ok(())
}
