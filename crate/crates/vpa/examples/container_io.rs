//! Round-trip the binary tensor container format: save a prompt and a
//! model, reload them, and confirm bit-identity; also demonstrate the
//! truncation check.
//!
//!     cargo run --release --example container_io

use vpa::io::{load_container, save_container, Entry};
use vpa::prompt::{init_prompts, PromptSpec, VisualPrompt};
use vpa::tensor::Tensor;
use vpa::vit::{ViTConfig, ViTModel};

fn main() -> vpa::Result<()> {
    let dir = std::env::temp_dir().join("vpa_example_io");
    std::fs::create_dir_all(&dir).expect("temp dir");

    let model = ViTModel::init(ViTConfig::tiny(), 3)?;
    let mpath = dir.join("model.vpac");
    model.save(&mpath)?;
    let back = ViTModel::load(&mpath)?;
    println!("model round trip bit-identical: {}", back == model);

    let spec = PromptSpec::prependitive_default(2, 4, 8, 5);
    let prompt = init_prompts(&spec, 2)?;
    let ppath = dir.join("prompt.vpac");
    prompt.save(&ppath)?;
    println!(
        "prompt round trip bit-identical: {}",
        VisualPrompt::load(&ppath)? == prompt
    );

    // a hand-rolled container with mixed dtypes
    let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])?;
    let entries = vec![Entry::f64("weights", &t), Entry::i64("labels", vec![3], vec![7, 8, 9])];
    let cpath = dir.join("mixed.vpac");
    save_container(&cpath, &entries)?;
    let loaded = load_container(&cpath)?;
    println!("mixed container holds {} tensors", loaded.len());

    // truncate the payload and watch the loader name the damaged tensor
    let bytes = std::fs::read(&cpath).expect("read container");
    let tpath = dir.join("truncated.vpac");
    std::fs::write(&tpath, &bytes[..bytes.len() - 8]).expect("write truncated");
    match load_container(&tpath) {
        Err(e) => println!("truncated load rejected: {e}"),
        Ok(_) => println!("unexpected: truncated container loaded"),
    }
    Ok(())
}
