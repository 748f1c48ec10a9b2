//! Shared helpers: a per-token reference Transformer written with plain
//! loops, random inputs, and finite differences.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use subtoken_merge::autodiff::Tensor;
use subtoken_merge::tokenizer::{TokenizedSequence, BOS_ID, EOS_ID};
use subtoken_merge::transformer::{Attention, FeedForward, ModelParams, Norm, Transformer};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random sequence of `words` lexemes with CLS/SEP around them; every word
/// gets 1 to 3 subtokens with ids in `6..vocab`.
pub fn random_sequence(rng: &mut ChaCha8Rng, words: usize, vocab: usize) -> TokenizedSequence {
    let mut token_ids = vec![1];
    let mut word_ids = vec![None];
    for w in 0..words {
        for _ in 0..rng.gen_range(1..=3) {
            token_ids.push(rng.gen_range(6..vocab));
            word_ids.push(Some(w));
        }
    }
    token_ids.push(2);
    word_ids.push(None);
    TokenizedSequence { token_ids, word_ids }
}

fn row(t: &Tensor, r: usize) -> &[f64] {
    let c = t.last_dim();
    &t.data()[r * c..(r + 1) * c]
}

/// `x . W` for a row vector `x` and `W[k x p]`.
fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let p = w.last_dim();
    let mut out = vec![0.0; p];
    for (k, &xk) in x.iter().enumerate() {
        for j in 0..p {
            out[j] += xk * w.data()[k * p + j];
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn layer_norm(x: &[f64], n: &Norm<Tensor>) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    x.iter()
        .enumerate()
        .map(|(i, v)| n.gamma.data()[i] * (v - mean) / (var + 1e-5).sqrt() + n.beta.data()[i])
        .collect()
}

fn ffn(x: &[f64], f: &FeedForward<Tensor>) -> Vec<f64> {
    let h: Vec<f64> = add(&vecmat(x, &f.w1), f.b1.data()).into_iter().map(|v| v.max(0.0)).collect();
    add(&vecmat(&h, &f.w2), f.b2.data())
}

fn pe(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Attention of each query over the keys it may see, one head at a time.
fn mha(
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    a: &Attention<Tensor>,
    heads: usize,
    visible: impl Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let d = queries[0].len();
    let dk = d / heads;
    let q: Vec<Vec<f64>> = queries.iter().map(|x| vecmat(x, &a.wq)).collect();
    let k: Vec<Vec<f64>> = keys.iter().map(|x| vecmat(x, &a.wk)).collect();
    let v: Vec<Vec<f64>> = keys.iter().map(|x| vecmat(x, &a.wv)).collect();
    queries
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let mut concat = vec![0.0; d];
            for h in 0..heads {
                let cols = h * dk..(h + 1) * dk;
                let js: Vec<usize> = (0..keys.len()).filter(|&j| visible(i, j)).collect();
                let scores: Vec<f64> = js
                    .iter()
                    .map(|&j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, &j) in e.iter().zip(&js) {
                    for c in cols.clone() {
                        concat[c] += w / z * v[j][c];
                    }
                }
            }
            vecmat(&concat, &a.wo)
        })
        .collect()
}

fn embed(p: &ModelParams, ids: &[usize]) -> Vec<Vec<f64>> {
    let d = p.embedding.last_dim();
    ids.iter()
        .enumerate()
        .map(|(i, &t)| add(row(&p.embedding, t), &pe(i, d)))
        .collect()
}

/// Encoder states of one unpadded sequence, without merging.
pub fn reference_encode(model: &Transformer, ids: &[usize]) -> Vec<Vec<f64>> {
    let p = &model.params;
    let mut h = embed(p, ids);
    for layer in &p.encoder {
        let a = mha(&h, &h, &layer.attn, model.config.heads, |_, _| true);
        let x: Vec<Vec<f64>> = h.iter().zip(&a).map(|(u, v)| layer_norm(&add(u, v), &layer.norm1)).collect();
        h = x.iter().map(|u| layer_norm(&add(u, &ffn(u, &layer.ffn)), &layer.norm2)).collect();
    }
    h
}

pub fn reference_classify(model: &Transformer, ids: &[usize]) -> Vec<f64> {
    let h = reference_encode(model, ids);
    let head = model.params.classifier.as_ref().unwrap();
    add(&vecmat(&h[0], &head.weight), head.bias.data())
}

/// Teacher-forced logits for one pair; the decoder input is BOS followed by
/// `target`.
pub fn reference_decode(model: &Transformer, src: &[usize], target: &[usize]) -> Vec<Vec<f64>> {
    let p = &model.params;
    let memory = reference_encode(model, src);
    let mut inputs = vec![BOS_ID];
    inputs.extend_from_slice(target);
    let mut y = embed(p, &inputs);
    for layer in &p.decoder {
        let s = mha(&y, &y, &layer.self_attn, model.config.heads, |i, j| j <= i);
        let y1: Vec<Vec<f64>> = y.iter().zip(&s).map(|(u, v)| layer_norm(&add(u, v), &layer.norm1)).collect();
        let c = mha(&y1, &memory, &layer.cross_attn, model.config.heads, |_, _| true);
        let y2: Vec<Vec<f64>> = y1.iter().zip(&c).map(|(u, v)| layer_norm(&add(u, v), &layer.norm2)).collect();
        y = y2.iter().map(|u| layer_norm(&add(u, &ffn(u, &layer.ffn)), &layer.norm3)).collect();
    }
    let out = p.output.as_ref().unwrap();
    y.iter().map(|u| add(&vecmat(u, &out.weight), out.bias.data())).collect()
}

/// Labels matching [`reference_decode`]'s positions.
pub fn reference_labels(target: &[usize]) -> Vec<usize> {
    let mut l = target.to_vec();
    l.push(EOS_ID);
    l
}

/// Central difference of `f` at `x[i]`.
pub fn central_difference(x: &mut [f64], i: usize, eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + eps;
    let up = f(x);
    x[i] = orig - eps;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * eps)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
