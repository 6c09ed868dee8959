//! Show that freshly initialized prompts leave the source model's
//! predictions exactly unchanged: additive offsets start at zero, and
//! prepended tokens are hidden behind a zero attention gate.
//!
//!     cargo run --release --example init_invariance

use vpa::data::{generate_shapes, ShapesConfig};
use vpa::prompt::{init_prompts, PromptSpec};
use vpa::vit::{ViTConfig, ViTModel};

fn main() -> vpa::Result<()> {
    let cfg = ViTConfig { image_size: 16, patch: 4, dim: 32, layers: 2, ..ViTConfig::default() };
    let model = ViTModel::init(cfg.clone(), 7)?;
    let ds = generate_shapes(&ShapesConfig::new(20, cfg.image_size, 1))?;
    let base = model.logits(&ds.images, None)?;

    let additive = init_prompts(
        &PromptSpec::additive_default(cfg.layers, cfg.patches(), cfg.dim, 0),
        cfg.layers,
    )?;
    let prepend = init_prompts(
        &PromptSpec::prependitive_default(cfg.layers, 8, cfg.dim, 0),
        cfg.layers,
    )?;

    for (name, prompt) in [("additive", &additive), ("prependitive", &prepend)] {
        let with = model.logits(&ds.images, Some(prompt))?;
        let max_diff = base
            .data
            .iter()
            .zip(&with.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        println!(
            "{name}: {} learnable scalars, max |logit difference| at init = {max_diff:e}",
            prompt.param_count()
        );
    }
    Ok(())
}
