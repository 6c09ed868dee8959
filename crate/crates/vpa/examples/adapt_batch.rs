//! Batched-image adaptation (entropy minimization over a corrupted batch):
//! train a small source model, then watch mean prediction entropy fall and
//! accuracy move as the prompt adapts.
//!
//!     cargo run --release --example adapt_batch

use vpa::cli::{cmd_train_source, RunConfig, ShiftSpec};
use vpa::data::CorruptionFamily;
use vpa::engine::{AdaptationConfig, AdaptationSession, Lifecycle, Regime};
use vpa::prompt::PromptSpec;
use vpa::vit::{TrainConfig, ViTConfig, ViTModel};

fn main() -> vpa::Result<()> {
    let mut cfg = RunConfig::toy_default();
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
    cfg.data.test_n = 60;
    cfg.data.batch_size = 20;
    cfg.data.shift =
        ShiftSpec::Corruption { family: CorruptionFamily::GaussianNoise, severity: 3 };
    cfg.train = TrainConfig { epochs: 40, batch_size: 25, lr: 0.03, momentum: 0.9, seed: 0 };
    cfg.prompt = PromptSpec::prependitive_default(cfg.model.layers, 8, cfg.model.dim, 0);

    let ckpt = std::env::temp_dir().join("vpa_example_bia.vpac");
    let report = cmd_train_source(&cfg, &ckpt)?;
    println!("source clean accuracy: {:.3}", report.clean_accuracy);

    let model = ViTModel::load(&ckpt)?;
    let stream = cfg.test_stream()?;
    let source_acc = model.accuracy(&stream, None)?;
    println!("source accuracy under corruption: {source_acc:.3}");

    let mut acfg = AdaptationConfig::new(Regime::Bia, Lifecycle::Continual);
    acfg.steps = 5;
    acfg.lr = 0.01;
    acfg.tau = 3.0;
    let mut session = AdaptationSession::new(&model, &cfg.prompt, acfg, 32)?;
    let result = session.run_stream(&stream.batches(cfg.data.batch_size))?;
    for row in &result.rows {
        println!(
            "batch {}: entropy {:.3} -> {:.3}, accuracy {:.3}",
            row.stream_index, row.entropy_pre, row.entropy_post, row.accuracy
        );
    }
    println!(
        "adapted accuracy: {:.3} (delta {:+.3})",
        result.accuracy,
        result.accuracy - source_acc
    );
    Ok(())
}
