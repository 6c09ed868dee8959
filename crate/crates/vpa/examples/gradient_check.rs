//! Verify analytic prompt gradients against central finite differences on
//! a tiny two-layer model, across all three adaptation objectives.
//!
//!     cargo run --release --example gradient_check

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpa::objectives::{bia_loss_var, confidence_select, pla_loss_var, sharpen_teacher, sia_loss_var};
use vpa::prompt::{init_prompts, PromptSpec, VisualPrompt};
use vpa::tensor::fd::{finite_diff_gradient, relative_error};
use vpa::tensor::tape::Graph;
use vpa::tensor::Tensor;
use vpa::vit::{Trainable, ViTConfig, ViTModel};

fn main() -> vpa::Result<()> {
    let cfg = ViTConfig::tiny();
    let mut model = ViTModel::init(cfg.clone(), 1)?;
    // a freshly initialized model predicts near-uniformly, which parks the
    // entropy objectives at their flat maximum; sharpen the head so the
    // gradients being checked are not vanishingly small
    for v in &mut model.weights.head_w.data {
        *v *= 8.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = cfg.channels * cfg.image_size * cfg.image_size;
    let images: Vec<Tensor> = (0..3)
        .map(|_| {
            Tensor::new(
                vec![cfg.channels, cfg.image_size, cfg.image_size],
                (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap()
        })
        .collect();

    let spec = PromptSpec::prependitive_default(cfg.layers, 2, cfg.dim, 3);
    let mut prompt = init_prompts(&spec, cfg.layers)?;
    // open the gates so token gradients are nonzero
    if let VisualPrompt::Prependitive { gates, .. } = &mut prompt {
        for g in gates {
            g.data[0] = 0.5;
        }
    }

    let teacher = sharpen_teacher(
        &Tensor::new(
            vec![3, cfg.classes],
            (0..3 * cfg.classes).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )?,
        0.5,
    )?;

    for name in ["bia", "sia", "pla"] {
        let loss_of = |p: &VisualPrompt| -> f64 {
            let g = Graph::new();
            let bw = model.bind(&g, Trainable::Frozen);
            let bp = p.bind(&g);
            let logits = model.forward_batch(&g, &bw, &images, Some(&bp)).unwrap().logits;
            match name {
                "bia" => bia_loss_var(&logits, 1.0).unwrap().value().item(),
                "sia" => {
                    let mask = confidence_select(&logits.value(), 1.0, 0.67).unwrap();
                    sia_loss_var(&logits, 1.0, &mask).unwrap().value().item()
                }
                _ => pla_loss_var(&g, &logits, &teacher).unwrap().value().item(),
            }
        };

        let g = Graph::new();
        let bw = model.bind(&g, Trainable::Frozen);
        let bp = prompt.bind(&g);
        let logits = model.forward_batch(&g, &bw, &images, Some(&bp))?.logits;
        let loss = match name {
            "bia" => bia_loss_var(&logits, 1.0)?,
            "sia" => {
                let mask = confidence_select(&logits.value(), 1.0, 0.67)?;
                sia_loss_var(&logits, 1.0, &mask)?
            }
            _ => pla_loss_var(&g, &logits, &teacher)?,
        };
        let grads = g.backward(&loss)?;
        let analytic = grads.wrt(&bp.blocks[0]).unwrap().clone();

        let base = match &prompt {
            VisualPrompt::Prependitive { tokens, .. } => tokens[0].clone(),
            _ => unreachable!(),
        };
        let oracle = finite_diff_gradient(
            &|t: &Tensor| {
                let mut p2 = prompt.clone();
                if let VisualPrompt::Prependitive { tokens, .. } = &mut p2 {
                    tokens[0] = t.clone();
                }
                loss_of(&p2)
            },
            &base,
            1e-4,
        )?;
        let err = relative_error(&analytic, &oracle);
        println!("{name}: loss {:.5}, gradient rel err {err:.2e}", loss.value().item());
    }
    Ok(())
}
