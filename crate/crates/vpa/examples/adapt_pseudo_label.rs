//! Continual pseudo-label adaptation: weak views feed a FIFO memory queue,
//! kNN over stored CLS features builds soft teachers, and strong views are
//! trained against them. Early batches fall back to entropy minimization
//! until the queue can answer kNN queries.
//!
//!     cargo run --release --example adapt_pseudo_label

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
    cfg.data.test_n = 80;
    cfg.data.batch_size = 16;
    cfg.data.shift =
        ShiftSpec::Corruption { family: CorruptionFamily::Contrast, severity: 3 };
    cfg.train = TrainConfig { epochs: 40, batch_size: 25, lr: 0.03, momentum: 0.9, seed: 0 };
    cfg.prompt = PromptSpec::prependitive_default(cfg.model.layers, 8, cfg.model.dim, 0);

    let ckpt = std::env::temp_dir().join("vpa_example_pla.vpac");
    cmd_train_source(&cfg, &ckpt)?;
    let model = ViTModel::load(&ckpt)?;
    let stream = cfg.test_stream()?;
    let source_acc = model.accuracy(&stream, None)?;

    let mut acfg = AdaptationConfig::new(Regime::Pla, Lifecycle::Continual);
    acfg.steps = 2;
    acfg.lr = 1e-3;
    acfg.tau = 1.0;
    acfg.k = 7;
    // desk-scale stream: a large queue and a mild student view keep the
    // kNN teacher from degenerating into a majority vote
    acfg.queue_frac = 0.5;
    acfg.strong = acfg.weak.clone();
    let capacity = acfg.queue_capacity_for(stream.len());
    let mut session = AdaptationSession::new(&model, &cfg.prompt, acfg, capacity)?;

    for (bi, (images, labels)) in stream.batches(cfg.data.batch_size).iter().enumerate() {
        let m = session.adapt_pla(images)?;
        let acc = m
            .predictions
            .iter()
            .zip(labels)
            .filter(|(&p, &y)| p == y as usize)
            .count() as f64
            / labels.len() as f64;
        let mode = if bi == 0 { "warm-up" } else { "pseudo-label" };
        println!(
            "batch {bi} ({mode}): accuracy {acc:.3}, queue {}/{}",
            session.queue().len(),
            session.queue().capacity()
        );
    }
    println!("source accuracy under corruption was {source_acc:.3}");
    Ok(())
}
