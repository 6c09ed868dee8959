//! Small pre-norm vision transformer: patch embedding, CLS token, learned
//! position embeddings, multi-head self-attention, GELU MLP, linear head.
//!
//! The forward pass accepts an optional bound prompt. Additive prompts add
//! per-layer offsets to the patch tokens entering their placement layers.
//! Prependitive prompts append learnable tokens before their placement
//! layer; the prompt keys are multiplied by a scalar gate inside the
//! attention softmax, and the prompt rows are dropped again after the layer
//! (replacement style), so a zero gate reproduces the promptless forward
//! pass exactly.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Result, VpaError};
use crate::io::{self, Entry};
use crate::prompt::{BoundPrompt, PromptKind, VisualPrompt};
use crate::tensor::tape::{concat_rows, gated_softmax_rows, layer_norm, Graph, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub channels: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch: 8,
            dim: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4.0,
            classes: 10,
            channels: 3,
        }
    }
}

impl ViTConfig {
    /// A much smaller model for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ViTConfig {
            image_size: 8,
            patch: 4,
            dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2.0,
            classes: 4,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(VpaError::Config(format!(
                "patch {} must divide image_size {}",
                self.patch, self.image_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(VpaError::Config(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.layers == 0 || self.classes == 0 || self.channels == 0 {
            return Err(VpaError::Config("layers, classes, channels must be positive".into()));
        }
        if self.mlp_hidden() == 0 {
            return Err(VpaError::Config(format!("mlp_ratio {} too small", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTWeights {
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub pos_embed: Tensor,
    pub cls: Tensor,
    pub layers: Vec<LayerWeights>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1",
    "b1", "w2", "b2",
];

impl LayerWeights {
    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

impl ViTWeights {
    fn zeros(cfg: &ViTConfig) -> Self {
        let d = cfg.dim;
        let h = cfg.mlp_hidden();
        let layer = || LayerWeights {
            ln1_g: Tensor::zeros(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::zeros(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, h]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, d]),
            b2: Tensor::zeros(&[d]),
        };
        ViTWeights {
            patch_proj: Tensor::zeros(&[cfg.patch_dim(), d]),
            patch_bias: Tensor::zeros(&[d]),
            pos_embed: Tensor::zeros(&[cfg.patches() + 1, d]),
            cls: Tensor::zeros(&[1, d]),
            layers: (0..cfg.layers).map(|_| layer()).collect(),
            head_w: Tensor::zeros(&[d, cfg.classes]),
            head_b: Tensor::zeros(&[cfg.classes]),
        }
    }

    fn init(cfg: &ViTConfig, seed: u64) -> Self {
        let mut w = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in w.named_mut() {
            let base = name.rsplit('/').next().unwrap();
            match base {
                "ln1_g" | "ln2_g" => *t = Tensor::full(&t.shape, 1.0),
                "ln1_b" | "ln2_b" | "patch_bias" | "head_b" => {}
                b if b.starts_with('b') => {}
                "pos_embed" | "cls" => {
                    let shape = t.shape.clone();
                    *t = Tensor::randn(&shape, 0.02, &mut rng);
                }
                _ => {
                    // fan-in scaled init keeps activations and gradients O(1)
                    let shape = t.shape.clone();
                    let std = (1.0 / shape[0] as f64).sqrt();
                    *t = Tensor::randn(&shape, std, &mut rng);
                }
            }
        }
        w
    }

    /// Named tensors in a fixed traversal order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_proj".into(), &self.patch_proj),
            ("patch_bias".into(), &self.patch_bias),
            ("pos_embed".into(), &self.pos_embed),
            ("cls".into(), &self.cls),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (f, t) in LAYER_FIELDS.iter().zip(l.fields()) {
                out.push((format!("layer{i}/{f}"), t));
            }
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_proj".into(), &mut self.patch_proj),
            ("patch_bias".into(), &mut self.patch_bias),
            ("pos_embed".into(), &mut self.pos_embed),
            ("cls".into(), &mut self.cls),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (f, t) in LAYER_FIELDS.iter().zip(l.fields_mut()) {
                out.push((format!("layer{i}/{f}"), t));
            }
        }
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }
}

/// Which backbone tensors become gradient leaves when binding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// Everything is a constant (prompt adaptation).
    Frozen,
    /// Only layer-norm scales and shifts (norm-affine baseline).
    NormAffine,
    /// Every weight (source training).
    All,
}

pub fn is_norm_affine(name: &str) -> bool {
    let base = name.rsplit('/').next().unwrap();
    matches!(base, "ln1_g" | "ln1_b" | "ln2_g" | "ln2_b")
}

pub struct BoundLayer {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct BoundWeights {
    pub patch_proj: Var,
    pub patch_bias: Var,
    pub pos_embed: Var,
    pub cls: Var,
    pub layers: Vec<BoundLayer>,
    pub head_w: Var,
    pub head_b: Var,
}

impl BoundWeights {
    /// Same order and names as `ViTWeights::named`.
    pub fn named(&self) -> Vec<(String, &Var)> {
        let mut out: Vec<(String, &Var)> = vec![
            ("patch_proj".into(), &self.patch_proj),
            ("patch_bias".into(), &self.patch_bias),
            ("pos_embed".into(), &self.pos_embed),
            ("cls".into(), &self.cls),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let fields: [&Var; 16] = [
                &l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2,
            ];
            for (f, v) in LAYER_FIELDS.iter().zip(fields) {
                out.push((format!("layer{i}/{f}"), v));
            }
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    pub cfg: ViTConfig,
    pub weights: ViTWeights,
}

/// One forward pass worth of differentiable outputs.
pub struct BatchTrace {
    /// [batch, classes]
    pub logits: Var,
    /// [batch, dim] CLS features entering the head.
    pub cls: Var,
}

impl ViTModel {
    pub fn init(cfg: ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let weights = ViTWeights::init(&cfg, seed);
        Ok(ViTModel { cfg, weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.weights.named();
        let entries: Vec<Entry> =
            named.iter().map(|(n, t)| Entry::f64(n, t)).collect();
        io::save_container(path, &entries)?;
        io::save_sidecar(path, &self.cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ViTConfig = io::load_sidecar(path)?;
        cfg.validate()?;
        let entries = io::load_container(path)?;
        let mut weights = ViTWeights::zeros(&cfg);
        for (name, t) in weights.named_mut() {
            let e = entries.iter().find(|e| e.name == name).ok_or_else(|| VpaError::Format {
                path: path.display().to_string(),
                msg: format!("missing weight {name}"),
            })?;
            let loaded = e.as_tensor()?;
            if loaded.shape != t.shape {
                return Err(VpaError::Format {
                    path: path.display().to_string(),
                    msg: format!("{name}: expected {:?}, found {:?}", t.shape, loaded.shape),
                });
            }
            *t = loaded;
        }
        Ok(ViTModel { cfg, weights })
    }

    pub fn bind(&self, g: &Graph, trainable: Trainable) -> BoundWeights {
        let reg = |name: &str, t: &Tensor| -> Var {
            let leaf = match trainable {
                Trainable::Frozen => false,
                Trainable::NormAffine => is_norm_affine(name),
                Trainable::All => true,
            };
            if leaf {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let layers = self
            .weights
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let f = |n: &str, t: &Tensor| reg(&format!("layer{i}/{n}"), t);
                BoundLayer {
                    ln1_g: f("ln1_g", &l.ln1_g),
                    ln1_b: f("ln1_b", &l.ln1_b),
                    wq: f("wq", &l.wq),
                    bq: f("bq", &l.bq),
                    wk: f("wk", &l.wk),
                    bk: f("bk", &l.bk),
                    wv: f("wv", &l.wv),
                    bv: f("bv", &l.bv),
                    wo: f("wo", &l.wo),
                    bo: f("bo", &l.bo),
                    ln2_g: f("ln2_g", &l.ln2_g),
                    ln2_b: f("ln2_b", &l.ln2_b),
                    w1: f("w1", &l.w1),
                    b1: f("b1", &l.b1),
                    w2: f("w2", &l.w2),
                    b2: f("b2", &l.b2),
                }
            })
            .collect();
        BoundWeights {
            patch_proj: reg("patch_proj", &self.weights.patch_proj),
            patch_bias: reg("patch_bias", &self.weights.patch_bias),
            pos_embed: reg("pos_embed", &self.weights.pos_embed),
            cls: reg("cls", &self.weights.cls),
            layers,
            head_w: reg("head_w", &self.weights.head_w),
            head_b: reg("head_b", &self.weights.head_b),
        }
    }

    /// Differentiable forward pass over a batch of images.
    pub fn forward_batch(
        &self,
        g: &Graph,
        bw: &BoundWeights,
        images: &[Tensor],
        prompt: Option<&BoundPrompt>,
    ) -> Result<BatchTrace> {
        if images.is_empty() {
            return Err(VpaError::Contract("forward_batch on empty batch".into()));
        }
        let mut logit_rows = Vec::with_capacity(images.len());
        let mut cls_rows = Vec::with_capacity(images.len());
        for img in images {
            let (logits, cls) = self.forward_one(g, bw, img, prompt)?;
            logit_rows.push(logits);
            cls_rows.push(cls);
        }
        Ok(BatchTrace { logits: concat_rows(&logit_rows)?, cls: concat_rows(&cls_rows)? })
    }

    fn forward_one(
        &self,
        g: &Graph,
        bw: &BoundWeights,
        image: &Tensor,
        prompt: Option<&BoundPrompt>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.cfg;
        let m = cfg.patches();
        let base_len = m + 1;
        let patches = extract_patches(image, cfg)?;
        let x = g.constant(patches).matmul(&bw.patch_proj)?.add(&bw.patch_bias)?;
        let mut tokens = concat_rows(&[bw.cls.clone(), x])?.add(&bw.pos_embed)?;

        for (li, layer) in bw.layers.iter().enumerate() {
            let placement = prompt.and_then(|p| p.placement(li).map(|pos| (p, pos)));
            let mut gate_spec: Option<(&Var, std::ops::Range<usize>)> = None;
            if let Some((p, pos)) = placement {
                match p.kind {
                    PromptKind::Additive => {
                        let block = &p.blocks[pos];
                        if block.shape() != [m, cfg.dim] {
                            return Err(VpaError::Shape(format!(
                                "additive offsets at layer {li}: expected [{m}, {}], got {:?}",
                                cfg.dim,
                                block.shape()
                            )));
                        }
                        // CLS row gets no offset
                        let pad = concat_rows(&[
                            g.constant(Tensor::zeros(&[1, cfg.dim])),
                            block.clone(),
                        ])?;
                        tokens = tokens.add(&pad)?;
                    }
                    PromptKind::Prependitive => {
                        let block = &p.blocks[pos];
                        if block.shape().len() != 2 || block.shape()[1] != cfg.dim {
                            return Err(VpaError::Shape(format!(
                                "prompt tokens at layer {li}: expected [*, {}], got {:?}",
                                cfg.dim,
                                block.shape()
                            )));
                        }
                        let n_p = block.shape()[0];
                        tokens = concat_rows(&[tokens, block.clone()])?;
                        gate_spec = Some((&p.gates[pos], base_len..base_len + n_p));
                    }
                }
            }

            tokens = transformer_layer(cfg, layer, &tokens, gate_spec)?;

            if let Some((p, _)) = placement {
                if p.kind == PromptKind::Prependitive {
                    // replacement style: prompt rows do not carry over
                    tokens = tokens.slice_rows(0..base_len)?;
                }
            }
        }

        let cls = tokens.slice_rows(0..1)?;
        let logits = cls.matmul(&bw.head_w)?.add(&bw.head_b)?;
        Ok((logits, cls))
    }

    /// Forward pass without gradients; returns [batch, classes] logits.
    pub fn logits(&self, images: &[Tensor], prompt: Option<&VisualPrompt>) -> Result<Tensor> {
        let g = Graph::new();
        let bw = self.bind(&g, Trainable::Frozen);
        let bp = prompt.map(|p| p.bind(&g));
        let trace = self.forward_batch(&g, &bw, images, bp.as_ref())?;
        Ok(trace.logits.value())
    }

    /// CLS features without gradients; returns [batch, dim].
    pub fn features(&self, images: &[Tensor], prompt: Option<&VisualPrompt>) -> Result<Tensor> {
        let g = Graph::new();
        let bw = self.bind(&g, Trainable::Frozen);
        let bp = prompt.map(|p| p.bind(&g));
        let trace = self.forward_batch(&g, &bw, images, bp.as_ref())?;
        Ok(trace.cls.value())
    }

    pub fn accuracy(&self, ds: &Dataset, prompt: Option<&VisualPrompt>) -> Result<f64> {
        if ds.is_empty() {
            return Err(VpaError::Contract("accuracy on empty dataset".into()));
        }
        let mut correct = 0usize;
        for (images, labels) in ds.batches(64) {
            let z = self.logits(&images, prompt)?;
            for (i, &y) in labels.iter().enumerate() {
                if argmax_row(&z, i) == y as usize {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / ds.len() as f64)
    }
}

pub fn argmax_row(z: &Tensor, row: usize) -> usize {
    let c = z.cols();
    let mut best = 0;
    for j in 1..c {
        if z.at2(row, j) > z.at2(row, best) {
            best = j;
        }
    }
    best
}

/// Flatten an image into [patches, channels * patch * patch] rows in raster
/// order; within a patch, features are channel-major.
pub fn extract_patches(image: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let s = cfg.image_size;
    if image.shape != [cfg.channels, s, s] {
        return Err(VpaError::Shape(format!(
            "expected [{}, {s}, {s}] image, got {:?}",
            cfg.channels, image.shape
        )));
    }
    let p = cfg.patch;
    let grid = s / p;
    let mut data = Vec::with_capacity(cfg.patches() * cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..cfg.channels {
                for y in 0..p {
                    for x in 0..p {
                        data.push(image.data[c * s * s + (gy * p + y) * s + gx * p + x]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.patches(), cfg.patch_dim()], data)
}

fn concat_cols(vars: &[Var]) -> Result<Var> {
    let ts: Result<Vec<Var>> = vars.iter().map(|v| v.transpose()).collect();
    concat_rows(&ts?)?.transpose()
}

/// One pre-norm transformer block. `gate_spec` optionally marks a key
/// range that contributes exactly `gate` units of attention mass on top
/// of the ordinary softmax inside every head.
fn transformer_layer(
    cfg: &ViTConfig,
    l: &BoundLayer,
    tokens: &Var,
    gate_spec: Option<(&Var, std::ops::Range<usize>)>,
) -> Result<Var> {
    let dh = cfg.head_dim();

    let h = layer_norm(tokens, &l.ln1_g, &l.ln1_b, LN_EPS)?;
    let q = h.matmul(&l.wq)?.add(&l.bq)?;
    let k = h.matmul(&l.wk)?.add(&l.bk)?;
    let v = h.matmul(&l.wv)?.add(&l.bv)?;

    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let r = i * dh..(i + 1) * dh;
        let qh = q.slice_cols(r.clone())?;
        let kh = k.slice_cols(r.clone())?;
        let vh = v.slice_cols(r)?;
        let scores = qh.matmul(&kh.transpose()?)?.mul_scalar(1.0 / (dh as f64).sqrt());
        let att = match &gate_spec {
            Some((gate, range)) => gated_softmax_rows(&scores, gate, range.clone())?,
            None => scores.softmax_temp(1.0)?,
        };
        heads.push(att.matmul(&vh)?);
    }
    let attn = concat_cols(&heads)?.matmul(&l.wo)?.add(&l.bo)?;
    let tokens = tokens.add(&attn)?;

    let h2 = layer_norm(&tokens, &l.ln2_g, &l.ln2_b, LN_EPS)?;
    let mlp = h2.matmul(&l.w1)?.add(&l.b1)?.gelu().matmul(&l.w2)?.add(&l.b2)?;
    tokens.add(&mlp)
}

/// Mean cross-entropy of logits [b, c] against integer labels, built on
/// the graph so it can drive training.
pub fn cross_entropy(g: &Graph, logits: &Var, labels: &[i64]) -> Result<Var> {
    let [b, c] = logits.shape()[..] else {
        return Err(VpaError::Shape(format!("logits must be 2-d, got {:?}", logits.shape())));
    };
    if labels.len() != b {
        return Err(VpaError::Contract(format!("{} labels for {b} logit rows", labels.len())));
    }
    let mut onehot = Tensor::zeros(&[b, c]);
    for (i, &y) in labels.iter().enumerate() {
        if y < 0 || y as usize >= c {
            return Err(VpaError::Contract(format!("label {y} out of range 0..{c}")));
        }
        onehot.data[i * c + y as usize] = 1.0;
    }
    let logp = logits.softmax_temp(1.0)?.ln_floored();
    let picked = logp.mul(&g.constant(onehot))?.sum_all();
    Ok(picked.mul_scalar(-1.0 / b as f64))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, batch_size: 32, lr: 0.05, momentum: 0.9, seed: 0 }
    }
}

/// Supervised source training with momentum SGD and cosine learning-rate
/// decay. Returns the per-epoch mean loss; `epochs = 0` leaves the model
/// at initialization.
pub fn train_source(model: &mut ViTModel, data: &Dataset, tc: &TrainConfig) -> Result<Vec<f64>> {
    if tc.lr <= 0.0 || !(0.0..1.0).contains(&tc.momentum) {
        return Err(VpaError::Param(format!(
            "lr must be > 0 and momentum in [0, 1), got {} / {}",
            tc.lr, tc.momentum
        )));
    }
    if tc.batch_size == 0 {
        return Err(VpaError::Param("batch_size must be positive".into()));
    }
    if data.is_empty() {
        return Err(VpaError::Contract("training on empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut velocity: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
    let mut losses = Vec::with_capacity(tc.epochs);
    let total_steps = (tc.epochs * data.len().div_ceil(tc.batch_size)).max(1);
    let mut step = 0usize;
    for _ in 0..tc.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let images: Vec<Tensor> = chunk.iter().map(|&i| data.images[i].clone()).collect();
            let labels: Vec<i64> = chunk.iter().map(|&i| data.labels[i]).collect();
            let g = Graph::new();
            let bw = model.bind(&g, Trainable::All);
            let trace = model.forward_batch(&g, &bw, &images, None)?;
            let loss = cross_entropy(&g, &trace.logits, &labels)?;
            let lv = loss.value().item();
            if !lv.is_finite() {
                return Err(VpaError::Numeric("non-finite training loss".into()));
            }
            let grads = g.backward(&loss)?;
            if !grads.all_finite() {
                return Err(VpaError::Numeric("non-finite training gradient".into()));
            }
            let warmup = (total_steps / 20).max(1);
            let lr_t = if step < warmup {
                tc.lr * (step + 1) as f64 / warmup as f64
            } else {
                let p = (step - warmup) as f64 / (total_steps - warmup).max(1) as f64;
                tc.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            };
            let bound = bw.named();
            for ((name, w), (bn, bv)) in model.weights.named_mut().into_iter().zip(&bound) {
                debug_assert_eq!(&name, bn);
                let Some(gr) = grads.wrt(bv) else { continue };
                let vel = velocity.entry(name).or_insert_with(|| Tensor::zeros(&w.shape));
                for (v, gv) in vel.data.iter_mut().zip(&gr.data) {
                    *v = tc.momentum * *v + gv;
                }
                for (wv, v) in w.data.iter_mut().zip(&vel.data) {
                    *wv -= lr_t * *v;
                }
            }
            epoch_loss += lv;
            batches += 1;
            step += 1;
        }
        losses.push(epoch_loss / batches as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes, ShapesConfig};
    use crate::prompt::{init_prompts, PromptSpec};
    use crate::tensor::fd::{finite_diff_gradient, relative_error};
    use rand::Rng;

    fn tiny_model(seed: u64) -> ViTModel {
        ViTModel::init(ViTConfig::tiny(), seed).unwrap()
    }

    fn rand_image(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Tensor {
        let n = cfg.channels * cfg.image_size * cfg.image_size;
        Tensor::new(
            vec![cfg.channels, cfg.image_size, cfg.image_size],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn extract_patches_matches_hand_layout() {
        let cfg = ViTConfig {
            image_size: 4,
            patch: 2,
            channels: 1,
            dim: 4,
            layers: 1,
            heads: 1,
            mlp_ratio: 1.0,
            classes: 2,
        };
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let p = extract_patches(&img, &cfg).unwrap();
        assert_eq!(p.shape, vec![4, 4]);
        assert_eq!(&p.data[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn forward_shapes() {
        let model = tiny_model(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images: Vec<Tensor> = (0..3).map(|_| rand_image(&model.cfg, &mut rng)).collect();
        let z = model.logits(&images, None).unwrap();
        assert_eq!(z.shape, vec![3, model.cfg.classes]);
        let f = model.features(&images, None).unwrap();
        assert_eq!(f.shape, vec![3, model.cfg.dim]);
        assert!(z.all_finite() && f.all_finite());
    }

    #[test]
    fn zero_additive_prompt_is_exact_identity() {
        let model = tiny_model(3);
        let cfg = &model.cfg;
        let spec = PromptSpec::additive_default(cfg.layers, cfg.patches(), cfg.dim, 0);
        let prompt = init_prompts(&spec, cfg.layers).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let images: Vec<Tensor> = (0..2).map(|_| rand_image(cfg, &mut rng)).collect();
        let base = model.logits(&images, None).unwrap();
        let with = model.logits(&images, Some(&prompt)).unwrap();
        assert_eq!(base, with);
    }

    #[test]
    fn zero_gate_prependitive_prompt_is_exact_identity() {
        let model = tiny_model(7);
        let cfg = &model.cfg;
        let spec = PromptSpec::prependitive_default(cfg.layers, 3, cfg.dim, 9);
        let prompt = init_prompts(&spec, cfg.layers).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let images: Vec<Tensor> = (0..2).map(|_| rand_image(cfg, &mut rng)).collect();
        let base = model.logits(&images, None).unwrap();
        let with = model.logits(&images, Some(&prompt)).unwrap();
        for (a, b) in base.data.iter().zip(&with.data) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gate_gradient_is_nonzero_at_init() {
        let model = tiny_model(13);
        let cfg = &model.cfg;
        let spec = PromptSpec::prependitive_default(cfg.layers, 3, cfg.dim, 17);
        let prompt = init_prompts(&spec, cfg.layers).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let image = rand_image(cfg, &mut rng);
        let g = Graph::new();
        let bw = model.bind(&g, Trainable::Frozen);
        let bp = prompt.bind(&g);
        let trace = model.forward_batch(&g, &bw, &[image], Some(&bp)).unwrap();
        let loss = trace.logits.square().sum_all();
        let grads = g.backward(&loss).unwrap();
        let ggate = grads.wrt(&bp.gates[0]).unwrap();
        assert!(ggate.item().abs() > 1e-12, "gate grad {}", ggate.item());
    }

    #[test]
    fn prompt_gradients_match_finite_differences() {
        let model = tiny_model(23);
        let cfg = model.cfg.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let images: Vec<Tensor> = (0..2).map(|_| rand_image(&cfg, &mut rng)).collect();
        let spec = PromptSpec::prependitive_default(cfg.layers, 2, cfg.dim, 31);
        let mut prompt = init_prompts(&spec, cfg.layers).unwrap();
        // at zero gates the token gradient vanishes identically, so open
        // the gates before differentiating
        if let crate::prompt::VisualPrompt::Prependitive { gates, .. } = &mut prompt {
            for g in gates {
                g.data[0] = 0.7;
            }
        }

        let g = Graph::new();
        let bw = model.bind(&g, Trainable::Frozen);
        let bp = prompt.bind(&g);
        let trace = model.forward_batch(&g, &bw, &images, Some(&bp)).unwrap();
        let loss = trace.logits.square().mean_all();
        let grads = g.backward(&loss).unwrap();
        let analytic = grads.wrt(&bp.blocks[0]).unwrap().clone();

        let f = |t: &Tensor| -> f64 {
            let mut p2 = prompt.clone();
            if let crate::prompt::VisualPrompt::Prependitive { tokens, .. } = &mut p2 {
                tokens[0] = t.clone();
            }
            let g = Graph::new();
            let bw = model.bind(&g, Trainable::Frozen);
            let bp = p2.bind(&g);
            let trace = model.forward_batch(&g, &bw, &images, Some(&bp)).unwrap();
            trace.logits.square().mean_all().value().item()
        };
        let base = match &prompt {
            crate::prompt::VisualPrompt::Prependitive { tokens, .. } => tokens[0].clone(),
            _ => unreachable!(),
        };
        let oracle = finite_diff_gradient(&f, &base, 1e-5).unwrap();
        let err = relative_error(&analytic, &oracle);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn save_load_round_trip_preserves_predictions() {
        let model = tiny_model(37);
        let dir = std::env::temp_dir().join("vpa-vit-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.vpac");
        model.save(&path).unwrap();
        let back = ViTModel::load(&path).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn training_reduces_loss() {
        let ds = generate_shapes(&ShapesConfig::new(60, 8, 41)).unwrap();
        let cfg = ViTConfig { classes: 10, ..ViTConfig::tiny() };
        let mut model = ViTModel::init(cfg, 43).unwrap();
        let tc = TrainConfig { epochs: 5, batch_size: 20, lr: 0.1, momentum: 0.9, seed: 1 };
        let losses = train_source(&mut model, &ds, &tc).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let ds = generate_shapes(&ShapesConfig::new(20, 8, 41)).unwrap();
        let cfg = ViTConfig { classes: 10, ..ViTConfig::tiny() };
        let mut model = ViTModel::init(cfg.clone(), 43).unwrap();
        let snapshot = model.clone();
        let tc = TrainConfig { epochs: 0, ..Default::default() };
        let losses = train_source(&mut model, &ds, &tc).unwrap();
        assert!(losses.is_empty());
        assert_eq!(model, snapshot);
    }

    #[test]
    fn norm_affine_binding_marks_only_layer_norms() {
        let model = tiny_model(47);
        let g = Graph::new();
        let bw = model.bind(&g, Trainable::NormAffine);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let image = rand_image(&model.cfg, &mut rng);
        let trace = model.forward_batch(&g, &bw, &[image], None).unwrap();
        let loss = trace.logits.square().sum_all();
        let grads = g.backward(&loss).unwrap();
        for (name, v) in bw.named() {
            let has = grads.wrt(v).is_some();
            assert_eq!(has, is_norm_affine(&name), "{name}");
        }
    }
}
