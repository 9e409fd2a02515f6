//! Expert encoder: patch embedding, `[CLS]`, absolute positions and a stack
//! of pre-norm transformer layers.

use serde::{Deserialize, Serialize};

use crate::autograd::{Var, LAYERNORM_EPS};
use crate::dsp::{Spectrogram, SPEC_SIZE};
use crate::error::{Error, Result};
use crate::param::{Graph, Param, Parameters, INIT_STD};
use crate::prompt;
use crate::tensor::Tensor;

pub const EXPERT_NAMES: [&str; 3] = ["LTE", "WiFi", "5G"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// Side of a square patch in spectrogram pixels.
    pub patch_size: usize,
    /// Extra LayerNorm after the last block.
    #[serde(default)]
    pub final_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 12,
            n_heads: 4,
            ffn_mult: 4,
            patch_size: 16,
            final_norm: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.patch_size == 0 || SPEC_SIZE % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} does not tile a {SPEC_SIZE}×{SPEC_SIZE} spectrogram",
                self.patch_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn n_patches(&self) -> usize {
        let per_side = SPEC_SIZE / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Token rows at module boundaries: patches plus `[CLS]`.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    /// Closed-form parameter count of one layer.
    pub fn layer_param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ffn_dim();
        4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * 2 * d
    }

    pub fn embedder_param_count(&self) -> usize {
        let d = self.d_model;
        self.patch_dim() * d + d + d + self.seq_len() * d
    }

    pub fn expert_param_count(&self) -> usize {
        let final_norm = if self.final_norm { 2 * self.d_model } else { 0 };
        self.n_layers * self.layer_param_count() + self.embedder_param_count() + final_norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedder {
    pub proj_weight: Param,
    pub proj_bias: Param,
    pub cls: Param,
    pub pos: Param,
    pub patch_size: usize,
}

impl PatchEmbedder {
    pub fn new(prefix: &str, cfg: &BackboneConfig, seed: u64) -> Self {
        let d = cfg.d_model;
        Self {
            proj_weight: Param::trunc_normal(
                format!("{prefix}.embed.proj.weight"),
                &[cfg.patch_dim(), d],
                INIT_STD,
                seed,
            ),
            proj_bias: Param::zeros(format!("{prefix}.embed.proj.bias"), &[1, d]),
            cls: Param::zeros(format!("{prefix}.embed.cls"), &[1, d]),
            pos: Param::normal(format!("{prefix}.embed.pos"), &[cfg.seq_len(), d], INIT_STD, seed),
            patch_size: cfg.patch_size,
        }
    }
}

impl Parameters for PatchEmbedder {
    fn params(&self) -> Vec<&Param> {
        vec![&self.proj_weight, &self.proj_bias, &self.cls, &self.pos]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.cls,
            &mut self.pos,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Weight stored `in × out` so the forward is `x·W + b`.
    pub fn new(name: &str, d_in: usize, d_out: usize, seed: u64) -> Self {
        Self {
            weight: Param::trunc_normal(format!("{name}.weight"), &[d_in, d_out], INIT_STD, seed),
            bias: Param::zeros(format!("{name}.bias"), &[1, d_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.tape.matmul(x, w)?;
        g.tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNormParams {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gamma: Param::ones(format!("{name}.gamma"), &[1, d]),
            beta: Param::zeros(format!("{name}.beta"), &[1, d]),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.tape.layernorm(x, gamma, beta, LAYERNORM_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub n_heads: usize,
}

impl TransformerLayer {
    pub fn new(prefix: &str, cfg: &BackboneConfig, seed: u64) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        Self {
            ln1: LayerNormParams::new(&format!("{prefix}.ln1"), d),
            q: Linear::new(&format!("{prefix}.attn.q"), d, d, seed),
            k: Linear::new(&format!("{prefix}.attn.k"), d, d, seed),
            v: Linear::new(&format!("{prefix}.attn.v"), d, d, seed),
            o: Linear::new(&format!("{prefix}.attn.o"), d, d, seed),
            ln2: LayerNormParams::new(&format!("{prefix}.ln2"), d),
            fc1: Linear::new(&format!("{prefix}.ffn.fc1"), d, f, seed),
            fc2: Linear::new(&format!("{prefix}.ffn.fc2"), f, d, seed),
            n_heads: cfg.n_heads,
        }
    }
}

impl Parameters for TransformerLayer {
    fn params(&self) -> Vec<&Param> {
        vec![
            &self.ln1.gamma,
            &self.ln1.beta,
            &self.q.weight,
            &self.q.bias,
            &self.k.weight,
            &self.k.bias,
            &self.v.weight,
            &self.v.bias,
            &self.o.weight,
            &self.o.bias,
            &self.ln2.gamma,
            &self.ln2.beta,
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.ln1.gamma,
            &mut self.ln1.beta,
            &mut self.q.weight,
            &mut self.q.bias,
            &mut self.k.weight,
            &mut self.k.bias,
            &mut self.v.weight,
            &mut self.v.bias,
            &mut self.o.weight,
            &mut self.o.bias,
            &mut self.ln2.gamma,
            &mut self.ln2.beta,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEncoder {
    pub id: usize,
    pub config: BackboneConfig,
    pub embedder: PatchEmbedder,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: Option<LayerNormParams>,
}

impl ExpertEncoder {
    /// Fresh weights. Each expert draws from its own keyed streams, so no two
    /// experts share values even under one seed.
    pub fn new(id: usize, cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let prefix = format!("expert.{id}");
        Ok(Self {
            id,
            config: *cfg,
            embedder: PatchEmbedder::new(&prefix, cfg, seed),
            layers: (0..cfg.n_layers)
                .map(|l| TransformerLayer::new(&format!("{prefix}.layer.{l}"), cfg, seed))
                .collect(),
            final_norm: cfg
                .final_norm
                .then(|| LayerNormParams::new(&format!("{prefix}.final_norm"), cfg.d_model)),
        })
    }

    pub fn name(&self) -> &'static str {
        EXPERT_NAMES.get(self.id).copied().unwrap_or("expert")
    }
}

impl Parameters for ExpertEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.embedder.params();
        for l in &self.layers {
            v.extend(l.params());
        }
        if let Some(n) = &self.final_norm {
            v.push(&n.gamma);
            v.push(&n.beta);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.embedder.params_mut();
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        if let Some(n) = &mut self.final_norm {
            v.push(&mut n.gamma);
            v.push(&mut n.beta);
        }
        v
    }
}

/// Cuts the spectrogram into non-overlapping square patches, grid row-major,
/// each flattened row-major: `n_patches × patch²`.
pub fn patchify(spec: &Spectrogram, patch: usize) -> Result<Tensor> {
    if patch == 0 || SPEC_SIZE % patch != 0 {
        return Err(Error::Config(format!("patch size {patch} does not tile the spectrogram")));
    }
    let per_side = SPEC_SIZE / patch;
    let vals = spec.values();
    let mut data = Vec::with_capacity(SPEC_SIZE * SPEC_SIZE);
    for pr in 0..per_side {
        for pc in 0..per_side {
            for r in 0..patch {
                let start = (pr * patch + r) * SPEC_SIZE + pc * patch;
                data.extend_from_slice(&vals[start..start + patch]);
            }
        }
    }
    Tensor::matrix(per_side * per_side, patch * patch, data)
}

/// Patch projection, `[CLS]` prepend and positional add:
/// `(N_p+1) × d` with row 0 the `[CLS]` token.
pub fn embed_patches(g: &mut Graph<'_>, emb: &PatchEmbedder, spec: &Spectrogram) -> Result<Var> {
    let patches = g.input(patchify(spec, emb.patch_size)?);
    let w = g.param(&emb.proj_weight);
    let b = g.param(&emb.proj_bias);
    let proj = g.tape.matmul(patches, w)?;
    let proj = g.tape.add_row(proj, b)?;
    let cls = g.param(&emb.cls);
    let tokens = g.tape.concat_rows(&[cls, proj])?;
    let pos = g.param(&emb.pos);
    g.tape.add(tokens, pos)
}

/// `softmax(q·kᵀ/√d_k)·v` for one head.
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (kr, vr) = (g.tape.value(k).rows(), g.tape.value(v).rows());
    if kr != vr {
        return Err(Error::Shape {
            op: "attention",
            lhs: g.tape.value(k).shape().to_vec(),
            rhs: g.tape.value(v).shape().to_vec(),
        });
    }
    let dk = g.tape.value(q).cols();
    let scores = g.tape.matmul_nt(q, k)?;
    let scores = g.tape.scale(scores, 1.0 / (dk as f32).sqrt())?;
    let weights = g.tape.softmax_rows(scores)?;
    g.tape.matmul(weights, v)
}

/// Multi-head self-attention over `x` (already normalized), heads split from
/// full `d × d` projections and concatenated before the output projection.
pub fn multi_head_attention(g: &mut Graph<'_>, layer: &TransformerLayer, x: Var) -> Result<Var> {
    let q = layer.q.forward(g, x)?;
    let k = layer.k.forward(g, x)?;
    let v = layer.v.forward(g, x)?;
    let d = g.tape.value(q).cols();
    let dk = d / layer.n_heads;
    let mut heads = Vec::with_capacity(layer.n_heads);
    for h in 0..layer.n_heads {
        let (a, b) = (h * dk, (h + 1) * dk);
        let qh = g.tape.slice_cols(q, a, b)?;
        let kh = g.tape.slice_cols(k, a, b)?;
        let vh = g.tape.slice_cols(v, a, b)?;
        heads.push(attention(g, qh, kh, vh)?);
    }
    let mixed = if heads.len() == 1 {
        heads[0]
    } else {
        g.tape.concat_cols(&heads)?
    };
    layer.o.forward(g, mixed)
}

/// `x + MHSA(LN(x))`, then `+ FFN(LN(·))`. Any sequence length.
pub fn layer_forward(g: &mut Graph<'_>, layer: &TransformerLayer, x: Var) -> Result<Var> {
    let d = layer.ln1.gamma.numel();
    if g.tape.value(x).cols() != d {
        return Err(Error::Shape {
            op: "layer_forward",
            lhs: g.tape.value(x).shape().to_vec(),
            rhs: vec![d],
        });
    }
    let h = layer.ln1.forward(g, x)?;
    let attn = multi_head_attention(g, layer, h)?;
    let x = g.tape.add(x, attn)?;
    let h = layer.ln2.forward(g, x)?;
    let h = layer.fc1.forward(g, h)?;
    let h = g.tape.gelu(h)?;
    let h = layer.fc2.forward(g, h)?;
    g.tape.add(x, h)
}

/// Output of one expert: the final 65-row sequence and its `[CLS]` row.
#[derive(Debug, Clone, Copy)]
pub struct ExpertOutput {
    pub tokens: Var,
    pub cls: Var,
}

/// Runs every layer; with prompts, layer `l` sees `[P_l ; Z]` and its first
/// `M` output rows are dropped again.
pub fn expert_forward(
    g: &mut Graph<'_>,
    expert: &ExpertEncoder,
    spec: &Spectrogram,
    prompts: Option<&[Param]>,
) -> Result<ExpertOutput> {
    let x = embed_patches(g, &expert.embedder, spec)?;
    expert_forward_tokens(g, expert, x, 0, prompts)
}

/// One layer call, with optional prompt inject/strip around it.
pub fn run_layer(
    g: &mut Graph<'_>,
    layer: &TransformerLayer,
    x: Var,
    prompt: Option<&Param>,
) -> Result<Var> {
    match prompt {
        Some(p) => {
            let m = p.value.rows();
            let pv = g.param(p);
            let aug = prompt::inject(g, pv, x)?;
            let out = layer_forward(g, layer, aug)?;
            prompt::strip(g, out, m)
        }
        None => layer_forward(g, layer, x),
    }
}

/// Runs layers `start..L` on `x`. `prompts`, when given, holds one entry per
/// remaining layer.
pub fn expert_forward_tokens(
    g: &mut Graph<'_>,
    expert: &ExpertEncoder,
    mut x: Var,
    start: usize,
    prompts: Option<&[Param]>,
) -> Result<ExpertOutput> {
    let layers = expert.layers.get(start..).ok_or(Error::OutOfRange {
        op: "expert_forward",
        index: start,
        len: expert.layers.len() + 1,
    })?;
    if let Some(p) = prompts {
        if p.len() != layers.len() {
            return Err(Error::InvalidArgument(format!(
                "expert {} runs {} layers but {} prompt entries were given",
                expert.id,
                layers.len(),
                p.len()
            )));
        }
        if p.iter().any(|t| t.value.rows() != p[0].value.rows()) {
            return Err(Error::InvalidArgument("prompt lengths differ across layers".into()));
        }
    }
    for (l, layer) in layers.iter().enumerate() {
        x = run_layer(g, layer, x, prompts.map(|p| &p[l]))?;
    }
    if let Some(n) = &expert.final_norm {
        x = n.forward(g, x)?;
    }
    let cls = g.tape.slice_rows(x, 0, 1)?;
    Ok(ExpertOutput { tokens: x, cls })
}

pub fn count_expert_params(expert: &ExpertEncoder) -> usize {
    expert.param_count()
}
