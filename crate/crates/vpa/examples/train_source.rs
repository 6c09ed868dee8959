//! Train a small source classifier on clean procedural shapes and report
//! clean test accuracy.
//!
//!     cargo run --release --example train_source

use vpa::cli::{cmd_train_source, RunConfig};
use vpa::vit::{TrainConfig, ViTConfig};

fn main() -> vpa::Result<()> {
    let mut cfg = RunConfig::toy_default();
    // trimmed so the example finishes in about a minute
    cfg.model = ViTConfig {
        image_size: 16,
        patch: 4,
        dim: 32,
        layers: 2,
        heads: 4,
        mlp_ratio: 2.0,
        ..ViTConfig::default()
    };
    cfg.data.image_size = 16;
    cfg.data.train_n = 800;
    cfg.data.test_n = 100;
    cfg.train = TrainConfig { epochs: 40, batch_size: 25, lr: 0.03, momentum: 0.9, seed: 0 };
    cfg.prompt.dim = cfg.model.dim;
    cfg.prompt.layers = vec![0];

    let out = std::env::temp_dir().join("vpa_example_source.vpac");
    let report = cmd_train_source(&cfg, &out)?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>2}: loss {l:.4}", i + 1);
    }
    println!("clean test accuracy: {:.3}", report.clean_accuracy);
    println!("checkpoint saved to {}", out.display());
    Ok(())
}
