//! The full model: three expert encoders, optional prompt bank, router and
//! head, plus cached per-input features for frozen prefixes.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{embed_patches, expert_forward_tokens, BackboneConfig, ExpertEncoder};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::param::{Graph, Param, Parameters};
use crate::prompt::{PromptBank, DEFAULT_SIGMA};
use crate::rng::mix;
use crate::router::{
    route_and_fuse, shared_cls, ClassifierHead, Router, RouterInput, RoutingDecision, N_EXPERTS,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub classes: usize,
    pub top_k: usize,
    #[serde(default)]
    pub router_input: RouterInput,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            classes: 5,
            top_k: 2,
            router_input: RouterInput::default(),
            head_hidden: crate::router::HEAD_HIDDEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub config: ModelConfig,
    pub experts: Vec<ExpertEncoder>,
    pub router: Router,
    pub head: ClassifierHead,
    pub prompts: Option<PromptBank>,
}

/// Per-input activations that stay fixed while the parameters producing
/// them are frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFeatures {
    /// Router input row; unused in [`RouterInput::MeanExpertCls`] mode.
    pub shared: Tensor,
    /// Index of the first layer still to run.
    pub start_layer: usize,
    /// Token sequence entering `start_layer`, one per expert.
    pub tokens: Vec<Tensor>,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub decision: RoutingDecision,
    pub fused: Var,
}

impl MoeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        let experts = (0..N_EXPERTS)
            .map(|i| ExpertEncoder::new(i, &config.backbone, mix(seed, i as u64)))
            .collect::<Result<_>>()?;
        let d = config.backbone.d_model;
        Ok(Self {
            config,
            experts,
            router: Router::new(d, config.top_k, mix(seed, 10))?,
            head: ClassifierHead::with_hidden(d, config.head_hidden, config.classes, mix(seed, 11))?,
            prompts: None,
        })
    }

    /// Replaces router and head with fresh ones for a `classes`-way task.
    pub fn reset_task(&mut self, classes: usize, seed: u64) -> Result<()> {
        let d = self.config.backbone.d_model;
        self.config.classes = classes;
        self.router = Router::new(d, self.config.top_k, mix(seed, 10))?;
        self.head = ClassifierHead::with_hidden(d, self.config.head_hidden, classes, mix(seed, 11))?;
        Ok(())
    }

    pub fn attach_prompts(&mut self, m: usize, sigma: f32, seed: u64) -> Result<()> {
        let b = &self.config.backbone;
        self.prompts = Some(PromptBank::init(
            m,
            b.d_model,
            b.n_layers,
            N_EXPERTS,
            sigma,
            mix(seed, 12),
        )?);
        Ok(())
    }

    pub fn attach_default_prompts(&mut self, m: usize, seed: u64) -> Result<()> {
        self.attach_prompts(m, DEFAULT_SIGMA, seed)
    }

    pub fn prompt_len(&self) -> usize {
        self.prompts.as_ref().map_or(0, |p| p.len)
    }

    fn expert_prompts(&self, i: usize) -> Option<&[Param]> {
        self.prompts.as_ref().and_then(|p| p.expert(i))
    }

    /// Activations that can be reused while everything before `start_layer`
    /// (and the prompts of those layers) stays frozen.
    pub fn features(&self, spec: &Spectrogram, start_layer: usize) -> Result<ExpertFeatures> {
        let n_layers = self.config.backbone.n_layers;
        if start_layer > n_layers {
            return Err(Error::OutOfRange {
                op: "features",
                index: start_layer,
                len: n_layers + 1,
            });
        }
        let mut g = Graph::inference();
        let shared = match self.config.router_input {
            RouterInput::MeanExpertCls => Tensor::zeros(&[1, self.config.backbone.d_model]),
            mode => {
                let v = shared_cls(&mut g, &self.experts[0].embedder, spec, mode)?;
                g.tape.value(v).clone()
            }
        };
        let mut tokens = Vec::with_capacity(N_EXPERTS);
        for (i, e) in self.experts.iter().enumerate() {
            let mut x = embed_patches(&mut g, &e.embedder, spec)?;
            let prompts = self.expert_prompts(i);
            for l in 0..start_layer {
                x = crate::backbone::run_layer(&mut g, &e.layers[l], x, prompts.map(|p| &p[l]))?;
            }
            if start_layer == n_layers {
                // only the [CLS] row is read past the last layer
                x = g.tape.slice_rows(x, 0, 1)?;
            }
            tokens.push(g.tape.value(x).clone());
        }
        Ok(ExpertFeatures {
            shared,
            start_layer,
            tokens,
        })
    }

    /// One input through the model on `g`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        spec: &Spectrogram,
        cached: Option<&ExpertFeatures>,
    ) -> Result<ForwardOutput> {
        let mode = self.config.router_input;
        let expert_cls = |g: &mut Graph<'_>, i: usize| -> Result<Var> {
            let e = &self.experts[i];
            let prompts = self.expert_prompts(i);
            match cached {
                Some(f) => {
                    let x = g.input(f.tokens[i].clone());
                    let prompts = prompts.map(|p| &p[f.start_layer..]);
                    Ok(expert_forward_tokens(g, e, x, f.start_layer, prompts)?.cls)
                }
                None => {
                    let x = embed_patches(g, &e.embedder, spec)?;
                    Ok(expert_forward_tokens(g, e, x, 0, prompts)?.cls)
                }
            }
        };
        let (fused, decision) = if mode == RouterInput::MeanExpertCls {
            let all: Vec<Var> = (0..N_EXPERTS)
                .map(|i| expert_cls(g, i))
                .collect::<Result<_>>()?;
            let stacked = g.tape.concat_rows(&all)?;
            let shared = g.tape.mean_rows(stacked)?;
            route_and_fuse(g, &self.router, shared, |_, i| Ok(all[i]))?
        } else {
            let shared = match cached {
                Some(f) => g.input(f.shared.clone()),
                None => shared_cls(g, &self.experts[0].embedder, spec, mode)?,
            };
            let mut expert_cls = expert_cls;
            route_and_fuse(g, &self.router, shared, &mut expert_cls)?
        };
        let logits = self.head.forward(g, fused)?;
        if !g.tape.value(logits).is_finite() {
            return Err(Error::NonFinite { op: "forward" });
        }
        Ok(ForwardOutput {
            logits,
            decision,
            fused,
        })
    }

    /// Logits without gradient tracking.
    pub fn predict(&self, spec: &Spectrogram, cached: Option<&ExpertFeatures>) -> Result<Vec<f32>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, spec, cached)?;
        Ok(g.tape.value(out.logits).data().to_vec())
    }

    /// Fused representation fed to the head.
    pub fn embed(&self, spec: &Spectrogram, cached: Option<&ExpertFeatures>) -> Result<Vec<f32>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, spec, cached)?;
        Ok(g.tape.value(out.fused).data().to_vec())
    }

    pub fn expert_params(&self) -> Vec<&Param> {
        self.experts.iter().flat_map(|e| e.params()).collect()
    }

    pub fn expert_param_count(&self) -> usize {
        self.experts.iter().map(|e| e.param_count()).sum()
    }

    /// Digest of every expert parameter.
    pub fn backbone_checksum(&self) -> u64 {
        self.experts
            .iter()
            .fold(0, |h: u64, e| h.rotate_left(17) ^ e.checksum())
    }
}

impl Parameters for MoeModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.expert_params();
        if let Some(p) = &self.prompts {
            v.extend(p.params());
        }
        v.extend(self.router.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.experts.iter_mut().flat_map(|e| e.params_mut()).collect();
        if let Some(p) = &mut self.prompts {
            v.extend(p.params_mut());
        }
        v.extend(self.router.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}
