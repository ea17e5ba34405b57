//! Writes a checkpoint, reads it back bit for bit and shows how damaged
//! files are reported.

use ppc::model::{Model, ModelConfig};
use ppc::train::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};

fn main() -> ppc::Result<()> {
    let mut model = Model::init(ModelConfig::tiny(), 4)?;
    model.init_pose_stream(5)?;
    let dir = std::env::temp_dir().join("ppc_checkpoint_io");
    let path = dir.join("model.ppc");
    save_checkpoint(&model, &path)?;
    let back = load_checkpoint(&path)?;
    println!(
        "{} bytes, {} tensors ({} frozen), identical after reload: {}",
        std::fs::metadata(&path).map_or(0, |m| m.len()),
        back.params.names().count(),
        back.params.frozen_names().count(),
        to_bytes(&back) == to_bytes(&model)
    );

    let bytes = to_bytes(&model);
    match from_bytes(&bytes[..bytes.len() / 2]) {
        Err(e) => println!("truncated file: {e}"),
        Ok(_) => println!("truncated file unexpectedly loaded"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    if let Err(e) = from_bytes(&bad) {
        println!("wrong magic: {e}");
    }
    Ok(())
}
