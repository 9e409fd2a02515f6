//! Test-only helpers: an independent double-precision implementation of the
//! model, a naive DFT, and small fixtures.
#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeMap;

use num_complex::Complex64;
use promptmoe::dsp::Spectrogram;
use promptmoe::param::{Param, Parameters};
use promptmoe::train::SpecSet;

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub r: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn new(r: usize, c: usize, v: Vec<f64>) -> Self {
        assert_eq!(r * c, v.len());
        Self { r, c, v }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.v[i * self.c..(i + 1) * self.c].to_vec()
    }

    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.c, b.r);
        let mut out = vec![0.0; self.r * b.c];
        for i in 0..self.r {
            for j in 0..b.c {
                let mut s = 0.0;
                for k in 0..self.c {
                    s += self.at(i, k) * b.at(k, j);
                }
                out[i * b.c + j] = s;
            }
        }
        Mat::new(self.r, b.c, out)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = vec![0.0; self.v.len()];
        for i in 0..self.r {
            for j in 0..self.c {
                out[j * self.r + i] = self.at(i, j);
            }
        }
        Mat::new(self.c, self.r, out)
    }

    pub fn add(&self, b: &Mat) -> Mat {
        assert_eq!((self.r, self.c), (b.r, b.c));
        Mat::new(self.r, self.c, self.v.iter().zip(&b.v).map(|(x, y)| x + y).collect())
    }

    pub fn add_row(&self, b: &[f64]) -> Mat {
        assert_eq!(self.c, b.len());
        let mut out = self.v.clone();
        for i in 0..self.r {
            for j in 0..self.c {
                out[i * self.c + j] += b[j];
            }
        }
        Mat::new(self.r, self.c, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::new(self.r, self.c, self.v.iter().map(|&x| f(x)).collect())
    }

    pub fn cols(&self, from: usize, to: usize) -> Mat {
        let mut out = Vec::new();
        for i in 0..self.r {
            for j in from..to {
                out.push(self.at(i, j));
            }
        }
        Mat::new(self.r, to - from, out)
    }

    pub fn rows(&self, from: usize, to: usize) -> Mat {
        Mat::new(to - from, self.c, self.v[from * self.c..to * self.c].to_vec())
    }

    pub fn vstack(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.c, b.c);
        let mut v = a.v.clone();
        v.extend_from_slice(&b.v);
        Mat::new(a.r + b.r, a.c, v)
    }

    pub fn hstack(parts: &[Mat]) -> Mat {
        let r = parts[0].r;
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut v = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                v.extend(p.row(i));
            }
        }
        Mat::new(r, c, v)
    }
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut v = Vec::with_capacity(m.v.len());
    for i in 0..m.r {
        v.extend(softmax(&m.row(i)));
    }
    Mat::new(m.r, m.c, v)
}

pub fn layernorm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    let mut v = Vec::with_capacity(x.v.len());
    for i in 0..x.r {
        let row = x.row(i);
        let n = row.len() as f64;
        let mu = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..x.c {
            v.push((row[j] - mu) * inv * g[j] + b[j]);
        }
    }
    Mat::new(x.r, x.c, v)
}

/// `−Σ ỹ_c log p_c` with `ỹ = (1−ε)·onehot + ε/C`.
pub fn smoothed_ce(logits: &[f64], y: usize, eps: f64) -> f64 {
    let c = logits.len() as f64;
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits
        .iter()
        .enumerate()
        .map(|(k, &z)| {
            let t = if k == y { 1.0 - eps + eps / c } else { eps / c };
            -t * (z - lse)
        })
        .sum()
}

/// Named parameters in double precision.
#[derive(Debug, Clone, Default)]
pub struct RefParams {
    pub vals: BTreeMap<String, Mat>,
}

impl RefParams {
    pub fn from_params<'a>(params: impl IntoIterator<Item = &'a Param>) -> Self {
        let mut vals = BTreeMap::new();
        for p in params {
            let t = &p.value;
            let v = t.data().iter().map(|&x| x as f64).collect();
            vals.insert(p.name.clone(), Mat::new(t.rows(), t.cols(), v));
        }
        Self { vals }
    }

    pub fn of(model: &impl Parameters) -> Self {
        Self::from_params(model.params())
    }

    pub fn get(&self, name: &str) -> &Mat {
        self.vals.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn vec(&self, name: &str) -> Vec<f64> {
        self.get(name).v.clone()
    }

    pub fn linear(&self, x: &Mat, name: &str) -> Mat {
        x.matmul(self.get(&format!("{name}.weight")))
            .add_row(&self.vec(&format!("{name}.bias")))
    }

    pub fn ln(&self, x: &Mat, name: &str) -> Mat {
        layernorm(
            x,
            &self.vec(&format!("{name}.gamma")),
            &self.vec(&format!("{name}.beta")),
            1e-5,
        )
    }
}

pub fn patchify_ref(spec: &[f32], side: usize, patch: usize) -> Mat {
    let per = side / patch;
    let mut v = Vec::new();
    for pi in 0..per * per {
        let (pr, pc) = (pi / per, pi % per);
        for r in 0..patch {
            for c in 0..patch {
                v.push(spec[(pr * patch + r) * side + pc * patch + c] as f64);
            }
        }
    }
    Mat::new(per * per, patch * patch, v)
}

#[derive(Debug, Clone, Copy)]
pub struct RefDims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch: usize,
}

/// Expert `i` embedder output: `[CLS; patches·W + b] + pos`.
pub fn embed_ref(p: &RefParams, i: usize, spec: &[f32], dims: RefDims) -> Mat {
    let pre = format!("expert.{i}.embed");
    let patches = patchify_ref(spec, 128, dims.patch);
    let proj = p.linear(&patches, &format!("{pre}.proj"));
    let tokens = Mat::vstack(p.get(&format!("{pre}.cls")), &proj);
    tokens.add(p.get(&format!("{pre}.pos")))
}

pub fn layer_ref(p: &RefParams, pre: &str, x: &Mat, heads: usize) -> Mat {
    let h = p.ln(x, &format!("{pre}.ln1"));
    let q = p.linear(&h, &format!("{pre}.attn.q"));
    let k = p.linear(&h, &format!("{pre}.attn.k"));
    let v = p.linear(&h, &format!("{pre}.attn.v"));
    let dk = q.c / heads;
    let outs: Vec<Mat> = (0..heads)
        .map(|hd| {
            let (a, b) = (hd * dk, (hd + 1) * dk);
            let s = q.cols(a, b).matmul(&k.cols(a, b).transpose());
            let s = s.map(|z| z / (dk as f64).sqrt());
            softmax_rows(&s).matmul(&v.cols(a, b))
        })
        .collect();
    let attn = p.linear(&Mat::hstack(&outs), &format!("{pre}.attn.o"));
    let x = x.add(&attn);
    let h = p.ln(&x, &format!("{pre}.ln2"));
    let h = p.linear(&h, &format!("{pre}.ffn.fc1")).map(gelu);
    x.add(&p.linear(&h, &format!("{pre}.ffn.fc2")))
}

/// Final `[CLS]` row of expert `i`, with prompts when `with_prompts`.
pub fn expert_cls_ref(p: &RefParams, i: usize, spec: &[f32], dims: RefDims, with_prompts: bool) -> Vec<f64> {
    let mut x = embed_ref(p, i, spec, dims);
    for l in 0..dims.n_layers {
        let pre = format!("expert.{i}.layer.{l}");
        if with_prompts {
            let pr = p.get(&format!("prompts.expert.{i}.layer.{l}"));
            let aug = Mat::vstack(pr, &x);
            let out = layer_ref(p, &pre, &aug, dims.n_heads);
            x = out.rows(pr.r, out.r);
        } else {
            x = layer_ref(p, &pre, &x, dims.n_heads);
        }
    }
    x.row(0)
}

pub fn head_ref(p: &RefParams, z: &[f64]) -> Vec<f64> {
    let z = Mat::new(1, z.len(), z.to_vec());
    let h = p.linear(&z, "head.fc1");
    let h = p.ln(&h, "head.ln").map(gelu);
    p.linear(&h, "head.fc2").v
}

pub fn router_logits_ref(p: &RefParams, x: &[f64]) -> Vec<f64> {
    let x = Mat::new(1, x.len(), x.to_vec());
    let h = p.linear(&x, "router.fc1").map(gelu);
    p.linear(&h, "router.fc2").v
}

/// Full routed model with mean-pooled embedder routing input; the selected
/// experts are fixed by the caller so the loss is smooth.
pub fn moe_loss_ref(
    p: &RefParams,
    spec: &[f32],
    dims: RefDims,
    selected: &[usize],
    with_prompts: bool,
    y: usize,
    eps: f64,
) -> f64 {
    let emb = embed_ref(p, 0, spec, dims);
    let shared: Vec<f64> = (0..emb.c)
        .map(|j| (0..emb.r).map(|i| emb.at(i, j)).sum::<f64>() / emb.r as f64)
        .collect();
    let logits = router_logits_ref(p, &shared);
    let kept: Vec<f64> = selected.iter().map(|&i| logits[i]).collect();
    let w = softmax(&kept);
    let mut z = vec![0.0; shared.len()];
    for (&i, &wi) in selected.iter().zip(&w) {
        let cls = expert_cls_ref(p, i, spec, dims, with_prompts);
        for (a, c) in z.iter_mut().zip(cls) {
            *a += wi * c;
        }
    }
    smoothed_ce(&head_ref(p, &z), y, eps)
}

/// Central finite differences of `f` with respect to every element of
/// `name`, or of `limit` evenly spaced elements when given.
pub fn fd_grad(
    p: &RefParams,
    name: &str,
    h: f64,
    limit: Option<usize>,
    f: impl Fn(&RefParams) -> f64,
) -> Vec<(usize, f64)> {
    let n = p.get(name).v.len();
    let idx: Vec<usize> = match limit {
        Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
        _ => (0..n).collect(),
    };
    let mut q = p.clone();
    idx.into_iter()
        .map(|j| {
            let orig = q.vals[name].v[j];
            q.vals.get_mut(name).unwrap().v[j] = orig + h;
            let up = f(&q);
            q.vals.get_mut(name).unwrap().v[j] = orig - h;
            let down = f(&q);
            q.vals.get_mut(name).unwrap().v[j] = orig;
            (j, (up - down) / (2.0 * h))
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let den = na.max(nn);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}

/// Direct `O(N²)` DFT magnitude of one frame.
pub fn naive_dft_mag(x: &[Complex64]) -> Vec<f64> {
    let n = x.len();
    let twiddle: Vec<Complex64> = (0..n)
        .map(|j| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * j as f64 / n as f64))
        .collect();
    (0..n)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                acc += v * twiddle[(k * t) % n];
            }
            acc.norm()
        })
        .collect()
}

/// Deterministic pseudo-random spectrogram with values in `[0, scale)`.
pub fn test_spectrogram(seed: u64, scale: f32) -> Spectrogram {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let v = (0..128 * 128)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 24) as f32 * scale
        })
        .collect();
    Spectrogram::new(v).unwrap()
}

/// Toy task separable by mean pixel: class `y` blends a flat field near 1
/// with uniform noise on `[0, 4]` in proportion `y / (C − 1)`. The flat and
/// noisy patches also point in different token directions, which a frozen
/// backbone at initialization still resolves; class-dependent position alone
/// does not survive it.
pub fn level_set(n: usize, classes: usize, seed: u64) -> SpecSet {
    let (specs, labels) = (0..n)
        .map(|i| {
            let y = i % classes;
            let a = y as f32 / (classes - 1) as f32;
            let noise = test_spectrogram(seed.wrapping_add(i as u64), 1.0);
            let v = noise
                .values()
                .iter()
                .map(|&x| (1.0 - a) * (0.9 + 0.2 * x) + a * 4.0 * x)
                .collect();
            (Spectrogram::new(v).unwrap(), y)
        })
        .unzip();
    SpecSet::new(specs, labels).unwrap()
}
