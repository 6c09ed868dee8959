//! Sweep the number of adaptation steps and show the per-step loss curve:
//! the first step should account for the largest share of the total
//! entropy reduction.
//!
//!     cargo run --release --example ablate_steps

use vpa::cli::{cmd_ablate, cmd_train_source, AblationAxis, RunConfig, ShiftSpec};
use vpa::data::CorruptionFamily;
use vpa::engine::{Lifecycle, Regime};
use vpa::prompt::PromptSpec;
use vpa::vit::{TrainConfig, ViTConfig};

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
    cfg.data.test_n = 40;
    cfg.data.batch_size = 20;
    cfg.data.shift =
        ShiftSpec::Corruption { family: CorruptionFamily::GaussianNoise, severity: 4 };
    cfg.train = TrainConfig { epochs: 40, batch_size: 25, lr: 0.03, momentum: 0.9, seed: 0 };
    // additive prompts: every learnable scalar gets gradient from step one,
    // which is what makes the first-step drop visible
    cfg.prompt = PromptSpec::additive_default(cfg.model.layers, cfg.model.patches(), cfg.model.dim, 0);
    cfg.adapt.regime = Regime::Bia;
    cfg.adapt.lifecycle = Lifecycle::Episodic;
    cfg.adapt.lr = 0.3;

    let ckpt = std::env::temp_dir().join("vpa_example_ablate.vpac");
    cmd_train_source(&cfg, &ckpt)?;
    let out = std::env::temp_dir().join("vpa_example_ablate_out");
    let grid: Vec<String> = ["1", "2", "4", "8"].iter().map(|s| s.to_string()).collect();
    let rows = cmd_ablate(&cfg, &ckpt, AblationAxis::Steps, &grid, &out)?;

    println!("{:<6} {:>10} {:>13} {:>14}", "steps", "accuracy", "entropy_pre", "entropy_post");
    for r in &rows {
        println!(
            "{:<6} {:>10.4} {:>13.4} {:>14.4}",
            r.value, r.accuracy, r.entropy_pre, r.entropy_post
        );
    }
    if let Some(r) = rows.last() {
        println!("\nper-step mean loss at steps = {}:", r.value);
        let mut prev: Option<f64> = None;
        for (i, l) in r.mean_loss_per_step.iter().enumerate() {
            let drop = prev.map_or(String::new(), |p| format!("  (drop {:.4})", p - l));
            println!("  step {:>2}: {l:.4}{drop}", i + 1);
            prev = Some(*l);
        }
    }
    println!("csv outputs in {}", out.display());
    Ok(())
}
