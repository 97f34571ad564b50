#![allow(dead_code)]

pub mod checks;

use gafl_core::encoder::{Block, EncoderParams, VideoFeatures};
use gafl_core::rng::{seeded, standard_normal, SeededRng};
use rand::Rng;

pub fn rng(seed: u64) -> SeededRng {
    seeded(seed)
}

pub fn random_video(rng: &mut SeededRng, id: &str, persons: usize, frames: usize, dim: usize) -> VideoFeatures {
    let appearance = (0..frames * persons * dim).map(|_| standard_normal(rng)).collect();
    let positions = (0..frames * persons).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    VideoFeatures::new(id, None, frames, persons, dim, appearance, positions).unwrap()
}

pub fn labelled_video(rng: &mut SeededRng, id: &str, class: &str, persons: usize, frames: usize, dim: usize) -> VideoFeatures {
    let mut v = random_video(rng, id, persons, frames, dim);
    v.class_label = Some(class.to_string());
    v
}

/// Random weights and biases (biases are non-zero, unlike a fresh init).
pub fn random_params(rng: &mut SeededRng, dim: usize, hidden: usize) -> EncoderParams {
    let mut p = EncoderParams::init(dim, hidden, 10_000.0, rng).unwrap();
    for block in Block::ALL {
        for v in p.block_mut(block) {
            *v += 0.1 * standard_normal(rng);
        }
    }
    p
}

/// Sinusoidal court-position encoding computed with std math.
pub fn pe_oracle(pos: [f64; 2], dim: usize, base: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for v in pos {
        for i in 0..half / 2 {
            let freq = base.powf((2 * i) as f64 / half as f64);
            let arg = 2.0 * std::f64::consts::PI * v / freq;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

fn matvec(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (o, out_o) in out.iter_mut().enumerate() {
        for (k, xk) in x.iter().enumerate() {
            *out_o += w[o * x.len() + k] * xk;
        }
    }
    out
}

/// Straight-line GAF: `F[t][i] = app + PE`; TS takes, per visible person, the
/// max over frames, projects, then maxes over persons; ST maxes over persons
/// per frame, projects, then maxes over frames.
pub fn encode_oracle(v: &VideoFeatures, p: &EncoderParams, masked: &[usize]) -> Vec<f64> {
    let c = v.dim;
    let visible: Vec<usize> = (0..v.persons).filter(|i| !masked.contains(i)).collect();
    let f = |t: usize, i: usize| -> Vec<f64> {
        let pe = pe_oracle(v.position_at(t, i), c, p.pe_base());
        v.appearance_at(t, i).iter().zip(&pe).map(|(a, e)| a + e).collect()
    };

    let mut ts = vec![f64::NEG_INFINITY; c];
    for &i in &visible {
        let mut pooled = vec![f64::NEG_INFINITY; c];
        for t in 0..v.frames {
            for (d, x) in f(t, i).into_iter().enumerate() {
                pooled[d] = pooled[d].max(x);
            }
        }
        let y = matvec(p.block(Block::TsWeight), p.block(Block::TsBias), &pooled);
        for d in 0..c {
            ts[d] = ts[d].max(y[d]);
        }
    }

    let mut st = vec![f64::NEG_INFINITY; c];
    for t in 0..v.frames {
        let mut pooled = vec![f64::NEG_INFINITY; c];
        for &i in &visible {
            for (d, x) in f(t, i).into_iter().enumerate() {
                pooled[d] = pooled[d].max(x);
            }
        }
        let y = matvec(p.block(Block::StWeight), p.block(Block::StBias), &pooled);
        for d in 0..c {
            st[d] = st[d].max(y[d]);
        }
    }
    ts.extend(st);
    ts
}

/// Three-layer head on `concat(gaf, PE(pos))`, ReLU between layers.
pub fn head_oracle(gaf: &[f64], pos: [f64; 2], p: &EncoderParams) -> Vec<f64> {
    let mut input = gaf.to_vec();
    input.extend(pe_oracle(pos, p.dim(), p.pe_base()));
    let relu = |v: Vec<f64>| v.into_iter().map(|x| if x > 0.0 { x } else { 0.0 }).collect::<Vec<_>>();
    let h1 = relu(matvec(p.block(Block::Afh1Weight), p.block(Block::Afh1Bias), &input));
    let h2 = relu(matvec(p.block(Block::Afh2Weight), p.block(Block::Afh2Bias), &h1));
    matvec(p.block(Block::Afh3Weight), p.block(Block::Afh3Bias), &h2)
}

pub fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn euclid_oracle(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}
