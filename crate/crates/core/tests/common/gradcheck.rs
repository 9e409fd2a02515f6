//! Finite-difference checks shared by the gradient tests and the acceptance
//! run. Each returns the number of checked tensors and the worst relative
//! error, or a description of the first failure.

use std::collections::HashSet;

use promptmoe::backbone::{expert_forward, BackboneConfig};
use promptmoe::model::{ModelConfig, MoeModel};
use promptmoe::param::{Graph, Param, Parameters, TrainableSet};
use promptmoe::router::RouterInput;

use super::*;

pub const EPS: f32 = 0.1;
pub const TOL: f64 = 1e-3;

pub fn mini_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_mult: 4,
            patch_size: 64,
            final_norm: false,
        },
        classes: 3,
        top_k: 2,
        router_input: RouterInput::EmbedderMeanPool,
        head_hidden: 256,
    }
}

pub const DIMS: RefDims = RefDims {
    n_layers: 2,
    n_heads: 2,
    patch: 64,
};

/// Replaces every value with a draw large enough to exercise the
/// nonlinearities; norm gains stay near 1.
fn scramble(model: &mut MoeModel, seed: u64) {
    for p in model.params_mut() {
        let shape = p.value.shape().to_vec();
        let std = if p.name.contains("embed.proj.weight") { 0.02 } else { 0.3 };
        let mut fresh = Param::normal(p.name.clone(), &shape, std, seed);
        if p.name.ends_with(".gamma") {
            fresh.value.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        p.value = fresh.value;
    }
}

pub fn mini_model(seed: u64) -> MoeModel {
    let mut m = MoeModel::new(mini_config(), seed).unwrap();
    m.attach_prompts(2, 0.02, seed).unwrap();
    scramble(&mut m, seed);
    m
}

fn analytic(g: &Graph<'_>) -> Vec<(String, Vec<f64>)> {
    g.param_grads()
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|&x| x as f64).collect()))
        .collect()
}

fn compare(
    grads: &[(String, Vec<f64>)],
    reference: &RefParams,
    limit: Option<usize>,
    f: impl Fn(&RefParams) -> f64,
) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (name, a) in grads {
        let fd = fd_grad(reference, name, 1e-5, limit, &f);
        let picked: Vec<f64> = fd.iter().map(|&(j, _)| a[j]).collect();
        let numeric: Vec<f64> = fd.iter().map(|&(_, v)| v).collect();
        let peak = picked.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        if name.ends_with("attn.k.bias") {
            // q·(k + b) shifts every score in a row by the same amount, which
            // softmax ignores: this gradient is zero up to round-off.
            if peak >= 1e-6 {
                return Err(format!("{name}: expected a vanishing gradient, peak {peak:e}"));
            }
            continue;
        }
        if peak <= 1e-6 {
            return Err(format!("{name}: gradient vanishes in the probe"));
        }
        let err = rel_err(&picked, &numeric);
        if err > TOL {
            return Err(format!("{name}: relative error {err:e}"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn forward_matches(ours: f64, reference: f64) -> Result<(), String> {
    if (ours - reference).abs() < 1e-4 {
        Ok(())
    } else {
        Err(format!("forward mismatch: {ours} vs reference {reference}"))
    }
}

/// One expert with deep prompts and the head; every tensor is checked in full.
pub fn single_expert() -> Result<(usize, f64), String> {
    let m = mini_model(11);
    let spec = test_spectrogram(3, 1.0);
    let y = 1;
    let prompts = m.prompts.as_ref().unwrap().expert(0).unwrap();

    let mut names = m.experts[0].param_names();
    names.extend(prompts.iter().map(|p| p.name.clone()));
    names.extend(m.head.param_names());
    let set = TrainableSet::from_names(names.clone());
    let mut g = Graph::new(&set);
    let out = expert_forward(&mut g, &m.experts[0], &spec, Some(prompts)).map_err(|e| e.to_string())?;
    let logits = m.head.forward(&mut g, out.cls).map_err(|e| e.to_string())?;
    let loss = g.tape.smoothed_cross_entropy(logits, &[y], EPS).map_err(|e| e.to_string())?;
    let loss_f32 = g.tape.value(loss).data()[0] as f64;
    g.backward_scaled(loss, 1.0).map_err(|e| e.to_string())?;
    let grads = analytic(&g);
    if grads.len() != names.len() {
        return Err(format!("{} gradients for {} trainable tensors", grads.len(), names.len()));
    }

    let reference = RefParams::of(&m);
    let f = |p: &RefParams| {
        let cls = expert_cls_ref(p, 0, spec.values(), DIMS, true);
        smoothed_ce(&head_ref(p, &cls), y, EPS as f64)
    };
    forward_matches(loss_f32, f(&reference))?;
    Ok((grads.len(), compare(&grads, &reference, None, f)?))
}

/// The full routed model; large tensors are sampled.
pub fn routed_model() -> Result<(usize, f64), String> {
    let m = mini_model(5);
    let spec = test_spectrogram(9, 1.0);
    let y = 2;
    let set = TrainableSet::from_names(m.param_names());
    let mut g = Graph::new(&set);
    let out = m.forward(&mut g, &spec, None).map_err(|e| e.to_string())?;
    let loss = g.tape.smoothed_cross_entropy(out.logits, &[y], EPS).map_err(|e| e.to_string())?;
    let loss_f32 = g.tape.value(loss).data()[0] as f64;
    g.backward_scaled(loss, 1.0).map_err(|e| e.to_string())?;
    let grads = analytic(&g);
    let selected = out.decision.selected.clone();
    if selected.len() != 2 {
        return Err(format!("top-2 selected {selected:?}"));
    }

    let reference = RefParams::of(&m);
    let f = |p: &RefParams| moe_loss_ref(p, spec.values(), DIMS, &selected, true, y, EPS as f64);
    forward_matches(loss_f32, f(&reference))?;
    // unselected experts and their prompts are absent from the graph
    let dropped = (0..3).find(|i| !selected.contains(i)).unwrap();
    let dropped_layer = format!("expert.{dropped}.layer.");
    if let Some((n, _)) = grads.iter().find(|(n, _)| n.starts_with(&dropped_layer)) {
        return Err(format!("{n} has a gradient although expert {dropped} was not selected"));
    }
    let names: HashSet<_> = grads.iter().map(|(n, _)| n).collect();
    if names.len() != grads.len() {
        return Err("a parameter is reported more than once".into());
    }
    Ok((grads.len(), compare(&grads, &reference, Some(24), f)?))
}
