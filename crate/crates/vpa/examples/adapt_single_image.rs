//! Single-image adaptation: expand one corrupted image into weak views,
//! minimize the marginal entropy of the confident views, predict on the
//! original, and reset (episodic).
//!
//!     cargo run --release --example adapt_single_image

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
    cfg.data.test_n = 10;
    cfg.data.shift =
        ShiftSpec::Corruption { family: CorruptionFamily::DefocusBlur, severity: 3 };
    cfg.train = TrainConfig { epochs: 40, batch_size: 25, lr: 0.03, momentum: 0.9, seed: 0 };
    cfg.prompt = PromptSpec::prependitive_default(cfg.model.layers, 8, cfg.model.dim, 0);

    let ckpt = std::env::temp_dir().join("vpa_example_sia.vpac");
    cmd_train_source(&cfg, &ckpt)?;
    let model = ViTModel::load(&ckpt)?;
    let stream = cfg.test_stream()?;

    let mut acfg = AdaptationConfig::new(Regime::Sia, Lifecycle::Episodic);
    acfg.steps = 5;
    acfg.lr = 0.003;
    acfg.views = 16;
    acfg.eta = 0.25;
    let mut session = AdaptationSession::new(&model, &cfg.prompt, acfg, 32)?;

    let mut correct_src = 0;
    let mut correct_adapted = 0;
    for (img, &label) in stream.images.iter().zip(&stream.labels) {
        let z = model.logits(std::slice::from_ref(img), None)?;
        let src_pred = vpa::vit::argmax_row(&z, 0);
        let m = session.adapt_sia(img)?;
        println!(
            "label {label}: source pred {src_pred}, adapted pred {}, view entropy {:.3} -> {:.3}",
            m.predictions[0], m.entropy_pre, m.entropy_post
        );
        correct_src += usize::from(src_pred == label as usize);
        correct_adapted += usize::from(m.predictions[0] == label as usize);
    }
    println!("source {correct_src}/{} vs adapted {correct_adapted}/{}", stream.len(), stream.len());
    Ok(())
}
