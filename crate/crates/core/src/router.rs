//! Expert routing, top-k fusion and the classification head.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{embed_patches, LayerNormParams, Linear, PatchEmbedder};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::param::{Graph, Param, Parameters};
use crate::tensor::Tensor;

pub const N_EXPERTS: usize = 3;
pub const HEAD_HIDDEN: usize = 256;

/// What the router sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterInput {
    /// Row 0 of the first expert's embedder output. This row is `cls + pos₀`
    /// and does not depend on the spectrogram.
    EmbedderCls,
    /// Mean over all rows of the first expert's embedder output.
    #[default]
    EmbedderMeanPool,
    /// Mean of the three experts' final `[CLS]` rows. Runs every expert.
    MeanExpertCls,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub fc1: Linear,
    pub fc2: Linear,
    pub top_k: usize,
}

impl Router {
    pub fn new(d: usize, top_k: usize, seed: u64) -> Result<Self> {
        if top_k == 0 || top_k > N_EXPERTS {
            return Err(Error::Config(format!("top_k must be in 1..={N_EXPERTS}, got {top_k}")));
        }
        Ok(Self {
            fc1: Linear::new("router.fc1", d, d, seed),
            fc2: Linear::new("router.fc2", d, N_EXPERTS, seed),
            top_k,
        })
    }

    /// `1 × 3` logits.
    pub fn logits(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

impl Parameters for Router {
    fn params(&self) -> Vec<&Param> {
        vec![&self.fc1.weight, &self.fc1.bias, &self.fc2.weight, &self.fc2.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub fc1: Linear,
    pub ln: LayerNormParams,
    pub fc2: Linear,
}

impl ClassifierHead {
    pub fn new(d: usize, classes: usize, seed: u64) -> Result<Self> {
        Self::with_hidden(d, HEAD_HIDDEN, classes, seed)
    }

    pub fn with_hidden(d: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        Ok(Self {
            fc1: Linear::new("head.fc1", d, hidden, seed),
            ln: LayerNormParams::new("head.ln", hidden),
            fc2: Linear::new("head.fc2", hidden, classes, seed),
        })
    }

    pub fn classes(&self) -> usize {
        self.fc2.bias.numel()
    }

    /// `W₂·GELU(LN(W₁z + b₁)) + b₂`, row-wise.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let h = self.fc1.forward(g, z)?;
        let h = self.ln.forward(g, h)?;
        let h = g.tape.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

impl Parameters for ClassifierHead {
    fn params(&self) -> Vec<&Param> {
        vec![
            &self.fc1.weight,
            &self.fc1.bias,
            &self.ln.gamma,
            &self.ln.beta,
            &self.fc2.weight,
            &self.fc2.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.ln.gamma,
            &mut self.ln.beta,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Softmax over all expert logits.
    pub weights: Vec<f32>,
    /// Kept experts, ordered by descending weight.
    pub selected: Vec<usize>,
    /// Kept weights renormalized to sum 1, aligned with `selected`.
    pub selected_weights: Vec<f32>,
}

/// Softmax, top-k (ties to the lower index), renormalize.
pub fn decide(logits: &[f32], k: usize) -> Result<RoutingDecision> {
    if k == 0 || k > logits.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k {k} with {} experts",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "route" });
    }
    let mut weights = logits.to_vec();
    crate::autograd::softmax_in_place(&mut weights);
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Sorting by logit keeps ties exact where softmax rounding might not.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    let mut kept: Vec<f32> = order.iter().map(|&i| logits[i]).collect();
    crate::autograd::softmax_in_place(&mut kept);
    Ok(RoutingDecision {
        weights,
        selected: order,
        selected_weights: kept,
    })
}

/// Routes one input vector given as values.
pub fn route(router: &Router, shared_cls: &[f32]) -> Result<RoutingDecision> {
    let mut g = Graph::inference();
    let x = g.input(Tensor::row_vector(shared_cls.to_vec()));
    let logits = router.logits(&mut g, x)?;
    decide(g.tape.value(logits).data(), router.top_k)
}

/// `Σ w_i · cls_i` over the selected experts. `expert_cls[i]` may be `None`
/// for experts that were not run.
pub fn fuse(decision: &RoutingDecision, expert_cls: &[Option<&[f32]>]) -> Result<Vec<f32>> {
    let mut out: Option<Vec<f32>> = None;
    for (&i, &w) in decision.selected.iter().zip(&decision.selected_weights) {
        let cls = expert_cls
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::InvalidArgument(format!("missing embedding for expert {i}")))?;
        match &mut out {
            None => out = Some(cls.iter().map(|&c| w * c).collect()),
            Some(acc) => {
                if acc.len() != cls.len() {
                    return Err(Error::Shape {
                        op: "fuse",
                        lhs: vec![acc.len()],
                        rhs: vec![cls.len()],
                    });
                }
                for (a, &c) in acc.iter_mut().zip(cls) {
                    *a += w * c;
                }
            }
        }
    }
    out.ok_or_else(|| Error::InvalidArgument("routing decision selects no expert".into()))
}

/// Tape form of routing plus fusion. Returns the fused `1 × d` row and the
/// decision taken on the current logit values.
pub fn route_and_fuse<F>(
    g: &mut Graph<'_>,
    router: &Router,
    shared: Var,
    mut expert_cls: F,
) -> Result<(Var, RoutingDecision)>
where
    F: FnMut(&mut Graph<'_>, usize) -> Result<Var>,
{
    let logits = router.logits(g, shared)?;
    let decision = decide(g.tape.value(logits).data(), router.top_k)?;
    let cls: Vec<Var> = decision
        .selected
        .iter()
        .map(|&i| expert_cls(g, i))
        .collect::<Result<_>>()?;
    if cls.len() == 1 {
        // softmax of one logit is 1 with zero gradient
        return Ok((cls[0], decision));
    }
    let kept = g.tape.gather_cols(logits, &decision.selected)?;
    let w = g.tape.softmax_rows(kept)?;
    let stacked = g.tape.concat_rows(&cls)?;
    Ok((g.tape.matmul(w, stacked)?, decision))
}

pub fn classify(head: &ClassifierHead, z: &[f32]) -> Result<Vec<f32>> {
    let mut g = Graph::inference();
    let x = g.input(Tensor::row_vector(z.to_vec()));
    let y = head.forward(&mut g, x)?;
    Ok(g.tape.value(y).data().to_vec())
}

/// Router input from the first expert's embedder.
pub fn shared_cls(
    g: &mut Graph<'_>,
    embedder: &PatchEmbedder,
    spec: &Spectrogram,
    mode: RouterInput,
) -> Result<Var> {
    let tokens = embed_patches(g, embedder, spec)?;
    match mode {
        RouterInput::EmbedderCls => g.tape.slice_rows(tokens, 0, 1),
        RouterInput::EmbedderMeanPool => g.tape.mean_rows(tokens),
        RouterInput::MeanExpertCls => Err(Error::InvalidArgument(
            "mean-expert routing input needs the expert outputs".into(),
        )),
    }
}

pub fn count_router_head_params(router: &Router, head: &ClassifierHead) -> (usize, usize) {
    (router.param_count(), head.param_count())
}
