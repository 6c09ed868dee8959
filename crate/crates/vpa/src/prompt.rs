//! Learnable visual prompts. Two families:
//!
//! * additive: per-layer offset tensors added to the patch tokens entering
//!   selected layers (zero-initialized, so the initial network is untouched)
//! * prependitive: per-layer learnable tokens prepended to the sequence at
//!   selected layers, with a per-layer scalar attention gate that starts at
//!   zero so prompt keys contribute nothing to attention at initialization
//!
//! Prompt parameters are the only thing adaptation ever updates; backbone
//! weights stay frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Result, VpaError};
use crate::io::{self, Entry, TensorData};
use crate::tensor::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Gates are clamped to this magnitude after every update step.
pub const GATE_CLAMP: f64 = 4.0;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Additive,
    Prependitive,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PromptSpec {
    pub kind: PromptKind,
    /// 0-based indices of layers the prompt attaches to.
    pub layers: Vec<usize>,
    /// Tokens per placement. For additive prompts this must equal the
    /// model's patch count; for prependitive it is the prompt length.
    pub tokens_per_layer: usize,
    pub dim: usize,
    /// Init std for prependitive tokens (additive offsets are always zero).
    pub init_std: f64,
    pub seed: u64,
}

impl PromptSpec {
    /// Additive default: first layer and the middle layer.
    pub fn additive_default(n_layers: usize, patches: usize, dim: usize, seed: u64) -> Self {
        let mut layers = vec![0];
        if n_layers > 1 {
            layers.push(n_layers / 2);
        }
        PromptSpec {
            kind: PromptKind::Additive,
            layers,
            tokens_per_layer: patches,
            dim,
            init_std: 0.0,
            seed,
        }
    }

    /// Prependitive default: every other layer, starting at layer 0.
    pub fn prependitive_default(n_layers: usize, tokens: usize, dim: usize, seed: u64) -> Self {
        PromptSpec {
            kind: PromptKind::Prependitive,
            layers: (0..n_layers).step_by(2).collect(),
            tokens_per_layer: tokens,
            dim,
            init_std: 0.02,
            seed,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(VpaError::Config("prompt has no placement layers".into()));
        }
        let mut sorted = self.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.layers.len() || sorted != self.layers {
            return Err(VpaError::Config(format!(
                "placement layers must be sorted and unique, got {:?}",
                self.layers
            )));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= n_layers) {
            return Err(VpaError::Config(format!("placement layer {l} >= n_layers {n_layers}")));
        }
        if self.tokens_per_layer == 0 || self.dim == 0 {
            return Err(VpaError::Config("prompt tokens and dim must be positive".into()));
        }
        if self.init_std < 0.0 {
            return Err(VpaError::Param(format!("init_std must be >= 0, got {}", self.init_std)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VisualPrompt {
    Additive {
        layers: Vec<usize>,
        /// One [tokens, dim] offset per placement.
        offsets: Vec<Tensor>,
    },
    Prependitive {
        layers: Vec<usize>,
        /// One [tokens, dim] block per placement.
        tokens: Vec<Tensor>,
        /// One scalar gate per placement, zero at init.
        gates: Vec<Tensor>,
    },
}

impl VisualPrompt {
    pub fn layers(&self) -> &[usize] {
        match self {
            VisualPrompt::Additive { layers, .. } => layers,
            VisualPrompt::Prependitive { layers, .. } => layers,
        }
    }

    pub fn kind(&self) -> PromptKind {
        match self {
            VisualPrompt::Additive { .. } => PromptKind::Additive,
            VisualPrompt::Prependitive { .. } => PromptKind::Prependitive,
        }
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        match self {
            VisualPrompt::Additive { offsets, .. } => {
                offsets.iter().map(|t| t.numel()).sum()
            }
            VisualPrompt::Prependitive { tokens, gates, .. } => {
                tokens.iter().map(|t| t.numel()).sum::<usize>() + gates.len()
            }
        }
    }

    /// Learnable tensors in a fixed order (placements in layer order;
    /// for prependitive, each placement's token block then its gate).
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            VisualPrompt::Additive { offsets, .. } => offsets.iter().collect(),
            VisualPrompt::Prependitive { tokens, gates, .. } => tokens
                .iter()
                .zip(gates)
                .flat_map(|(t, g)| [t, g])
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            VisualPrompt::Additive { offsets, .. } => offsets.iter_mut().collect(),
            VisualPrompt::Prependitive { tokens, gates, .. } => tokens
                .iter_mut()
                .zip(gates)
                .flat_map(|(t, g)| [t as &mut Tensor, g])
                .collect(),
        }
    }

    /// Register every learnable tensor as a graph leaf, same order as
    /// `params`.
    pub fn bind(&self, g: &Graph) -> BoundPrompt {
        match self {
            VisualPrompt::Additive { layers, offsets } => BoundPrompt {
                kind: PromptKind::Additive,
                layers: layers.clone(),
                blocks: offsets.iter().map(|t| g.leaf(t.clone())).collect(),
                gates: Vec::new(),
            },
            VisualPrompt::Prependitive { layers, tokens, gates } => BoundPrompt {
                kind: PromptKind::Prependitive,
                layers: layers.clone(),
                blocks: tokens.iter().map(|t| g.leaf(t.clone())).collect(),
                gates: gates.iter().map(|t| g.leaf(t.clone())).collect(),
            },
        }
    }

    /// Container entries encoding this prompt (used by `save` and by
    /// session snapshots that bundle extra state alongside).
    pub fn to_entries(&self) -> Vec<Entry> {
        let mut entries = Vec::new();
        match self {
            VisualPrompt::Additive { layers, offsets } => {
                for (l, t) in layers.iter().zip(offsets) {
                    entries.push(Entry::f64(&format!("additive/layer{l}/offsets"), t));
                }
            }
            VisualPrompt::Prependitive { layers, tokens, gates } => {
                for ((l, t), gate) in layers.iter().zip(tokens).zip(gates) {
                    entries.push(Entry::f64(&format!("prependitive/layer{l}/tokens"), t));
                    entries.push(Entry::f64(&format!("prependitive/layer{l}/gate"), gate));
                }
            }
        }
        entries
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_container(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<VisualPrompt> {
        let entries = io::load_container(path)?;
        Self::from_entries(&entries, &path.display().to_string())
    }

    /// Rebuild a prompt from container entries; `ctx` names the source in
    /// errors.
    pub fn from_entries(entries: &[Entry], ctx: &str) -> Result<VisualPrompt> {
        let bad = |msg: String| VpaError::Format { path: ctx.to_string(), msg };
        let mut add: Vec<(usize, Tensor)> = Vec::new();
        let mut toks: Vec<(usize, Tensor)> = Vec::new();
        let mut gts: Vec<(usize, Tensor)> = Vec::new();
        for e in entries {
            if !matches!(e.data, TensorData::F64(_)) {
                return Err(bad(format!("prompt tensor {} must be f64", e.name)));
            }
            let t = e.as_tensor()?;
            let parse_layer = |mid: &str| -> Result<usize> {
                let rest = e
                    .name
                    .strip_prefix(mid)
                    .and_then(|r| r.split('/').next())
                    .ok_or_else(|| bad(format!("unexpected entry {}", e.name)))?;
                rest.parse().map_err(|_| bad(format!("bad layer index in {}", e.name)))
            };
            if e.name.starts_with("additive/layer") && e.name.ends_with("/offsets") {
                add.push((parse_layer("additive/layer")?, t));
            } else if e.name.starts_with("prependitive/layer") && e.name.ends_with("/tokens") {
                toks.push((parse_layer("prependitive/layer")?, t));
            } else if e.name.starts_with("prependitive/layer") && e.name.ends_with("/gate") {
                gts.push((parse_layer("prependitive/layer")?, t));
            } else {
                return Err(bad(format!("unexpected entry {}", e.name)));
            }
        }
        if !add.is_empty() {
            if !toks.is_empty() || !gts.is_empty() {
                return Err(bad("container mixes prompt kinds".into()));
            }
            add.sort_by_key(|(l, _)| *l);
            let (layers, offsets) = add.into_iter().unzip();
            return Ok(VisualPrompt::Additive { layers, offsets });
        }
        if toks.is_empty() {
            return Err(bad("container holds no prompt tensors".into()));
        }
        toks.sort_by_key(|(l, _)| *l);
        gts.sort_by_key(|(l, _)| *l);
        let tok_layers: Vec<usize> = toks.iter().map(|(l, _)| *l).collect();
        let gate_layers: Vec<usize> = gts.iter().map(|(l, _)| *l).collect();
        if tok_layers != gate_layers {
            return Err(bad("token and gate placements disagree".into()));
        }
        Ok(VisualPrompt::Prependitive {
            layers: tok_layers,
            tokens: toks.into_iter().map(|(_, t)| t).collect(),
            gates: gts.into_iter().map(|(_, t)| t).collect(),
        })
    }
}

/// Graph-registered prompt leaves for one adaptation step.
pub struct BoundPrompt {
    pub kind: PromptKind,
    pub layers: Vec<usize>,
    /// Additive offsets or prependitive token blocks, in layer order.
    pub blocks: Vec<Var>,
    /// Prependitive gates, in layer order (empty for additive).
    pub gates: Vec<Var>,
}

impl BoundPrompt {
    /// Leaves in the same order as `VisualPrompt::params`.
    pub fn leaves(&self) -> Vec<&Var> {
        match self.kind {
            PromptKind::Additive => self.blocks.iter().collect(),
            PromptKind::Prependitive => {
                self.blocks.iter().zip(&self.gates).flat_map(|(b, g)| [b, g]).collect()
            }
        }
    }

    /// The placement position of `layer`, if this prompt attaches there.
    pub fn placement(&self, layer: usize) -> Option<usize> {
        self.layers.iter().position(|&l| l == layer)
    }
}

/// Build a freshly initialized prompt from a spec. Additive offsets start
/// at exact zero; prependitive tokens are small gaussian draws and every
/// gate is exactly zero, so both kinds leave the initial forward pass
/// unchanged.
pub fn init_prompts(spec: &PromptSpec, n_layers: usize) -> Result<VisualPrompt> {
    spec.validate(n_layers)?;
    let shape = [spec.tokens_per_layer, spec.dim];
    match spec.kind {
        PromptKind::Additive => Ok(VisualPrompt::Additive {
            layers: spec.layers.clone(),
            offsets: spec.layers.iter().map(|_| Tensor::zeros(&shape)).collect(),
        }),
        PromptKind::Prependitive => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let tokens = spec
                .layers
                .iter()
                .map(|_| {
                    if spec.init_std == 0.0 {
                        Tensor::zeros(&shape)
                    } else {
                        Tensor::randn(&shape, spec.init_std, &mut rng)
                    }
                })
                .collect();
            Ok(VisualPrompt::Prependitive {
                layers: spec.layers.clone(),
                tokens,
                gates: spec.layers.iter().map(|_| Tensor::zeros(&[1])).collect(),
            })
        }
    }
}
