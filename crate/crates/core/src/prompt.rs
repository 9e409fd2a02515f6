//! Deep prompt tokens: one learnable `M × d` block per expert and layer,
//! prepended before each layer call and dropped after it.

use rand_distr::{Distribution, Normal};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::param::{Graph, Param, Parameters};
use crate::rng::keyed_stream;
use crate::tensor::{self, Tensor};

pub const DEFAULT_PROMPT_LEN: usize = 16;
pub const DEFAULT_SIGMA: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    /// `prompts[expert][layer]`, each `M × d`.
    pub prompts: Vec<Vec<Param>>,
    pub len: usize,
    pub d_model: usize,
    pub sigma: f32,
}

pub fn prompt_name(expert: usize, layer: usize) -> String {
    format!("prompts.expert.{expert}.layer.{layer}")
}

impl PromptBank {
    /// Entries i.i.d. `N(0, σ²)`, each block from its own keyed stream.
    pub fn init(
        m: usize,
        d: usize,
        n_layers: usize,
        n_experts: usize,
        sigma: f32,
        seed: u64,
    ) -> Result<Self> {
        if m == 0 || d == 0 || n_layers == 0 || n_experts == 0 {
            return Err(Error::Config(format!(
                "prompt bank dims must be positive (M={m}, d={d}, L={n_layers}, experts={n_experts})"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("prompt sigma must be positive, got {sigma}")));
        }
        let dist = Normal::new(0.0f32, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let prompts = (0..n_experts)
            .map(|i| {
                (0..n_layers)
                    .map(|l| {
                        let name = prompt_name(i, l);
                        let mut rng = keyed_stream(seed, &name);
                        let data = (0..m * d).map(|_| dist.sample(&mut rng)).collect();
                        Param::new(name, Tensor::from_parts(vec![m, d], data))
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            prompts,
            len: m,
            d_model: d,
            sigma,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.prompts.len()
    }

    pub fn n_layers(&self) -> usize {
        self.prompts.first().map_or(0, Vec::len)
    }

    pub fn expert(&self, i: usize) -> Option<&[Param]> {
        self.prompts.get(i).map(Vec::as_slice)
    }
}

impl Parameters for PromptBank {
    fn params(&self) -> Vec<&Param> {
        self.prompts.iter().flatten().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.prompts.iter_mut().flatten().collect()
    }
}

/// `[P ; Z]`: prompt rows first, tokens after.
pub fn inject(g: &mut Graph<'_>, prompts: Var, tokens: Var) -> Result<Var> {
    let (pc, tc) = (g.tape.value(prompts).cols(), g.tape.value(tokens).cols());
    if pc != tc {
        return Err(Error::Shape {
            op: "inject",
            lhs: g.tape.value(prompts).shape().to_vec(),
            rhs: g.tape.value(tokens).shape().to_vec(),
        });
    }
    if g.tape.value(prompts).rows() == 0 {
        return Ok(tokens);
    }
    g.tape.concat_rows(&[prompts, tokens])
}

/// Drops the first `m` rows.
pub fn strip(g: &mut Graph<'_>, aug: Var, m: usize) -> Result<Var> {
    let rows = g.tape.value(aug).rows();
    if m >= rows {
        return Err(Error::OutOfRange {
            op: "strip",
            index: m,
            len: rows,
        });
    }
    if m == 0 {
        return Ok(aug);
    }
    g.tape.slice_rows(aug, m, rows)
}

/// Pre-softmax score of one query toward each prompt key: `q·k_p / √d_k`.
pub fn attention_scores_to_prompts(query: &[f32], prompt_keys: &Tensor) -> Result<Vec<f32>> {
    let dk = prompt_keys.cols();
    if query.len() != dk {
        return Err(Error::Shape {
            op: "attention_scores_to_prompts",
            lhs: vec![query.len()],
            rhs: prompt_keys.shape().to_vec(),
        });
    }
    let scale = 1.0 / (dk as f32).sqrt();
    Ok((0..prompt_keys.rows())
        .map(|p| tensor::dot(query, prompt_keys.row(p)) * scale)
        .collect())
}

pub fn count_prompt_params(bank: &PromptBank) -> usize {
    bank.param_count()
}
