//! Backbone, routing and head checked against hand computations in f64.

mod common;

use common::{layer_ref, rel_err, test_spectrogram, Mat, RefParams};
use promptmoe::backbone::{
    attention, embed_patches, expert_forward, layer_forward, BackboneConfig, ExpertEncoder, PatchEmbedder,
    TransformerLayer,
};
use promptmoe::dsp::{Spectrogram, SPEC_SIZE};
use promptmoe::model::{ModelConfig, MoeModel};
use promptmoe::param::{Graph, Param, Parameters};
use promptmoe::router::{classify, decide, fuse, shared_cls, ClassifierHead, RouterInput};
use promptmoe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn perturb(params: Vec<&mut Param>, std: f32, rng: &mut ChaCha8Rng) {
    for p in params {
        let noise = normal(p.numel(), rng);
        let v: Vec<f32> = p.value.data().iter().zip(noise).map(|(a, n)| a + std * n).collect();
        p.value = Tensor::matrix(p.value.rows(), p.value.cols(), v).unwrap();
    }
}

fn small(d: usize, layers: usize) -> BackboneConfig {
    BackboneConfig {
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        ..BackboneConfig::default()
    }
}

fn swap_patches(spec: &Spectrogram, patch: usize, a: usize, b: usize) -> Spectrogram {
    let per = SPEC_SIZE / patch;
    let mut v = spec.values().to_vec();
    for r in 0..patch {
        for c in 0..patch {
            let at = |p: usize| ((p / per) * patch + r) * SPEC_SIZE + (p % per) * patch + c;
            v.swap(at(a), at(b));
        }
    }
    Spectrogram::new(v).unwrap()
}

#[test]
fn without_positions_swapping_patches_swaps_tokens() {
    let cfg = small(16, 1);
    let mut emb = PatchEmbedder::new("e", &cfg, 3);
    emb.pos.value = Tensor::zeros(&[cfg.seq_len(), 16]);
    let layer = TransformerLayer::new("l", &cfg, 3);
    let spec = test_spectrogram(5, 1.0);
    let swapped = swap_patches(&spec, cfg.patch_size, 2, 40);
    let run = |s: &Spectrogram| {
        let mut g = Graph::inference();
        let x = embed_patches(&mut g, &emb, s).unwrap();
        let y = layer_forward(&mut g, &layer, x).unwrap();
        (g.tape.value(x).clone(), g.tape.value(y).clone())
    };
    let ((x0, y0), (x1, y1)) = (run(&spec), run(&swapped));
    let perm = |r: usize| match r {
        3 => 41,
        41 => 3,
        r => r,
    };
    for r in 0..cfg.seq_len() {
        for c in 0..16 {
            assert!((x0.get(r, c) - x1.get(perm(r), c)).abs() <= 1e-6, "row {r}");
            assert!((y0.get(r, c) - y1.get(perm(r), c)).abs() <= 1e-5, "row {r}");
        }
    }

    // with positions the same swap is visible
    let with_pos = PatchEmbedder::new("e", &cfg, 3);
    let mut g = Graph::inference();
    let a = embed_patches(&mut g, &with_pos, &spec).unwrap();
    let b = embed_patches(&mut g, &with_pos, &swapped).unwrap();
    assert_ne!(g.tape.value(a).get(3, 0), g.tape.value(b).get(41, 0));
}

#[test]
fn three_token_attention_matches_hand_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (q, k, v) = (normal(12, &mut rng), normal(12, &mut rng), normal(12, &mut rng));
    let mut g = Graph::inference();
    let t = |x: &[f32]| Tensor::matrix(3, 4, x.to_vec()).unwrap();
    let (qv, kv, vv) = (g.input(t(&q)), g.input(t(&k)), g.input(t(&v)));
    let out = attention(&mut g, qv, kv, vv).unwrap();
    let out = g.tape.value(out);
    for i in 0..3 {
        let s: Vec<f64> = (0..3)
            .map(|j| (0..4).map(|c| q[i * 4 + c] as f64 * k[j * 4 + c] as f64).sum::<f64>() / 2.0)
            .collect();
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        for c in 0..4 {
            let want: f64 = (0..3).map(|j| (s[j] - m).exp() / z * v[j * 4 + c] as f64).sum();
            assert!((out.get(i, c) as f64 - want).abs() <= 1e-5, "({i},{c})");
        }
    }
}

#[test]
fn layer_jacobian_matches_central_differences() {
    let cfg = small(8, 1);
    let mut layer = TransformerLayer::new("l", &cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    perturb(layer.params_mut(), 0.3, &mut rng);
    let reference = RefParams::of(&layer);
    let x: Vec<f32> = normal(32, &mut rng);
    let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let step = 1e-3;
    let mut worst: f64 = 0.0;
    for out in 0..32 {
        let (i, j) = (out / 8, out % 8);
        let mut g = Graph::inference();
        let xv = g.tape.leaf(Tensor::matrix(4, 8, x.clone()).unwrap(), true);
        let y = layer_forward(&mut g, &layer, xv).unwrap();
        let row = g.tape.slice_rows(y, i, i + 1).unwrap();
        let el = g.tape.slice_cols(row, j, j + 1).unwrap();
        let s = g.tape.sum(el).unwrap();
        g.tape.backward(s).unwrap();
        let analytic: Vec<f64> = g.tape.grad(xv).unwrap().data().iter().map(|&v| v as f64).collect();
        let numeric: Vec<f64> = (0..32)
            .map(|k| {
                let mut up = x64.clone();
                let mut down = x64.clone();
                up[k] += step;
                down[k] -= step;
                let f = |v: Vec<f64>| layer_ref(&reference, "l", &Mat::new(4, 8, v), 2).at(i, j);
                (f(up) - f(down)) / (2.0 * step)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    assert!(worst <= 1e-3, "worst Jacobian row error {worst:e}");
}

#[test]
fn zero_prompts_still_change_the_cls_row() {
    let cfg = small(32, 2);
    let expert = ExpertEncoder::new(0, &cfg, 8).unwrap();
    let prompts: Vec<Param> = (0..2).map(|l| Param::zeros(format!("p{l}"), &[16, 32])).collect();
    let spec = test_spectrogram(2, 1.0);
    let mut g = Graph::inference();
    let plain = expert_forward(&mut g, &expert, &spec, None).unwrap();
    let prompted = expert_forward(&mut g, &expert, &spec, Some(&prompts)).unwrap();
    assert_eq!(g.tape.value(plain.tokens).rows(), 65);
    assert_eq!(g.tape.value(prompted.tokens).rows(), 65);
    let (a, b) = (g.tape.value(plain.cls).data(), g.tape.value(prompted.cls).data());
    let gap: f32 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    assert!(gap > 1e-4, "zero prompts left the CLS row unchanged ({gap})");
}

#[test]
fn top2_weights_are_renormalized_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let l: Vec<f32> = (0..3).map(|_| rng.random_range(-6.0..6.0)).collect();
        let d = decide(&l, 2).unwrap();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| l[b].total_cmp(&l[a]).then(a.cmp(&b)));
        assert_eq!(d.selected, order[..2].to_vec());
        let e: Vec<f64> = order[..2].iter().map(|&i| (l[i] as f64).exp()).collect();
        for (w, ei) in d.selected_weights.iter().zip(&e) {
            assert!((*w as f64 - ei / (e[0] + e[1])).abs() <= 1e-6);
        }
    }
}

#[test]
fn fusion_is_the_weighted_sum_of_selected_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let l: Vec<f32> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
        let rows: Vec<Vec<f32>> = (0..3).map(|_| normal(6, &mut rng)).collect();
        let d = decide(&l, 2).unwrap();
        let cls: Vec<Option<&[f32]>> = rows.iter().map(|r| Some(r.as_slice())).collect();
        let fused = fuse(&d, &cls).unwrap();
        for c in 0..6 {
            let want: f64 = d
                .selected
                .iter()
                .zip(&d.selected_weights)
                .map(|(&i, &w)| w as f64 * rows[i][c] as f64)
                .sum();
            assert!((fused[c] as f64 - want).abs() <= 1e-6);
        }
    }
}

#[test]
fn hand_set_head_gives_hand_computed_logits() {
    let mut head = ClassifierHead::with_hidden(4, 3, 2, 0).unwrap();
    let set = |p: &mut Param, v: Vec<f32>| p.value = Tensor::matrix(p.value.rows(), p.value.cols(), v).unwrap();
    let w1 = vec![1.0, 0.0, -1.0, 0.5, 1.0, 0.0, 0.0, -0.5, 2.0, 1.0, 0.0, 0.0];
    set(&mut head.fc1.weight, w1.clone());
    set(&mut head.fc1.bias, vec![0.1, -0.2, 0.3]);
    set(&mut head.ln.gamma, vec![1.0, 2.0, 0.5]);
    set(&mut head.ln.beta, vec![0.0, 0.1, -0.1]);
    set(&mut head.fc2.weight, vec![1.0, -1.0, 0.5, 0.25, -2.0, 1.0]);
    set(&mut head.fc2.bias, vec![0.05, -0.05]);
    let z = [0.4f32, -1.2, 0.7, 2.0];

    let h: Vec<f64> = (0..3)
        .map(|j| [0.1, -0.2, 0.3][j] + (0..4).map(|i| z[i] as f64 * w1[i * 3 + j] as f64).sum::<f64>())
        .collect();
    let mean = h.iter().sum::<f64>() / 3.0;
    let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
    let (gamma, beta) = ([1.0, 2.0, 0.5], [0.0, 0.1, -0.1]);
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let a: Vec<f64> = (0..3)
        .map(|j| {
            let n = (h[j] - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j];
            0.5 * n * (1.0 + (k * (n + 0.044715 * n.powi(3))).tanh())
        })
        .collect();
    let w2 = [[1.0, -1.0], [0.5, 0.25], [-2.0, 1.0]];
    let want: Vec<f64> = (0..2)
        .map(|c| [0.05, -0.05][c] + (0..3).map(|j| a[j] * w2[j][c]).sum::<f64>())
        .collect();
    let got = classify(&head, &z).unwrap();
    for (g, w) in got.iter().zip(&want) {
        assert!((*g as f64 - w).abs() <= 1e-5, "{g} vs {w}");
    }
}

#[test]
fn routing_ignores_prompts_but_follows_the_embedder() {
    let cfg = ModelConfig {
        backbone: small(16, 2),
        classes: 3,
        head_hidden: 16,
        ..ModelConfig::default()
    };
    let spec = test_spectrogram(9, 1.0);
    let mut model = MoeModel::new(cfg, 4).unwrap();
    let route_of = |m: &MoeModel| {
        let mut g = Graph::inference();
        let out = m.forward(&mut g, &spec, None).unwrap();
        let shared = shared_cls(&mut g, &m.experts[0].embedder, &spec, RouterInput::EmbedderMeanPool).unwrap();
        (out.decision.weights, g.tape.value(shared).data().to_vec())
    };
    let bare = route_of(&model);
    model.attach_prompts(8, 0.5, 4).unwrap();
    assert_eq!(route_of(&model), bare);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    perturb(model.experts[0].embedder.params_mut(), 0.1, &mut rng);
    let moved = route_of(&model);
    assert_ne!(moved.1, bare.1);
    assert_ne!(moved.0, bare.0);
}
