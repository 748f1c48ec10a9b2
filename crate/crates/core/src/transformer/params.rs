//! Parameter containers, generic over the leaf type so the same layout holds
//! tensors, tape variables, gradients and optimizer state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{Arch, MergeKind, ModelConfig};
use crate::autodiff::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

/// Per-head projections are column blocks of the `d_model x d_model`
/// matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub attn: Attention<T>,
    pub norm1: Norm<T>,
    pub ffn: FeedForward<T>,
    pub norm2: Norm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_attn: Attention<T>,
    pub norm1: Norm<T>,
    pub cross_attn: Attention<T>,
    pub norm2: Norm<T>,
    pub ffn: FeedForward<T>,
    pub norm3: Norm<T>,
}

/// All trainable state of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    /// Token embedding table, shared by encoder and decoder inputs.
    pub embedding: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
    /// Classification head over the CLS position (encoder-only).
    pub classifier: Option<Linear<T>>,
    /// Vocabulary projection (encoder-decoder).
    pub output: Option<Linear<T>>,
    /// Score vector of the learnable merge.
    pub merge_w: Option<T>,
}

pub type ModelParams = Params<Tensor>;

type MapFn<'f, 'a, T, U, E> = dyn FnMut(&str, &'a T) -> Result<U, E> + 'f;

impl<T> Linear<T> {
    fn map<'a, U, E>(&'a self, p: &str, f: &mut MapFn<'_, 'a, T, U, E>) -> Result<Linear<U>, E> {
        Ok(Linear {
            weight: f(&format!("{p}.weight"), &self.weight)?,
            bias: f(&format!("{p}.bias"), &self.bias)?,
        })
    }

    fn each_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{p}.weight"), &mut self.weight);
        f(&format!("{p}.bias"), &mut self.bias);
    }
}

impl<T> Attention<T> {
    fn map<'a, U, E>(&'a self, p: &str, f: &mut MapFn<'_, 'a, T, U, E>) -> Result<Attention<U>, E> {
        Ok(Attention {
            wq: f(&format!("{p}.wq"), &self.wq)?,
            wk: f(&format!("{p}.wk"), &self.wk)?,
            wv: f(&format!("{p}.wv"), &self.wv)?,
            wo: f(&format!("{p}.wo"), &self.wo)?,
        })
    }

    fn each_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{p}.wq"), &mut self.wq);
        f(&format!("{p}.wk"), &mut self.wk);
        f(&format!("{p}.wv"), &mut self.wv);
        f(&format!("{p}.wo"), &mut self.wo);
    }
}

impl<T> FeedForward<T> {
    fn map<'a, U, E>(&'a self, p: &str, f: &mut MapFn<'_, 'a, T, U, E>) -> Result<FeedForward<U>, E> {
        Ok(FeedForward {
            w1: f(&format!("{p}.w1"), &self.w1)?,
            b1: f(&format!("{p}.b1"), &self.b1)?,
            w2: f(&format!("{p}.w2"), &self.w2)?,
            b2: f(&format!("{p}.b2"), &self.b2)?,
        })
    }

    fn each_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{p}.w1"), &mut self.w1);
        f(&format!("{p}.b1"), &mut self.b1);
        f(&format!("{p}.w2"), &mut self.w2);
        f(&format!("{p}.b2"), &mut self.b2);
    }
}

impl<T> Norm<T> {
    fn map<'a, U, E>(&'a self, p: &str, f: &mut MapFn<'_, 'a, T, U, E>) -> Result<Norm<U>, E> {
        Ok(Norm {
            gamma: f(&format!("{p}.gamma"), &self.gamma)?,
            beta: f(&format!("{p}.beta"), &self.beta)?,
        })
    }

    fn each_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{p}.gamma"), &mut self.gamma);
        f(&format!("{p}.beta"), &mut self.beta);
    }
}

impl<T> Params<T> {
    /// Rebuild the same layout with every leaf transformed. Leaves are visited
    /// in a fixed order and named like `encoder.0.attn.wq`.
    pub fn try_map<'a, U, E>(
        &'a self,
        mut f: impl FnMut(&str, &'a T) -> Result<U, E>,
    ) -> Result<Params<U>, E> {
        let f: &mut MapFn<'_, 'a, T, U, E> = &mut f;
        let embedding = f("embedding", &self.embedding)?;
        let encoder = self
            .encoder
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = format!("encoder.{i}");
                Ok(EncoderLayer {
                    attn: l.attn.map(&format!("{p}.attn"), f)?,
                    norm1: l.norm1.map(&format!("{p}.norm1"), f)?,
                    ffn: l.ffn.map(&format!("{p}.ffn"), f)?,
                    norm2: l.norm2.map(&format!("{p}.norm2"), f)?,
                })
            })
            .collect::<Result<Vec<_>, E>>()?;
        let decoder = self
            .decoder
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = format!("decoder.{i}");
                Ok(DecoderLayer {
                    self_attn: l.self_attn.map(&format!("{p}.self_attn"), f)?,
                    norm1: l.norm1.map(&format!("{p}.norm1"), f)?,
                    cross_attn: l.cross_attn.map(&format!("{p}.cross_attn"), f)?,
                    norm2: l.norm2.map(&format!("{p}.norm2"), f)?,
                    ffn: l.ffn.map(&format!("{p}.ffn"), f)?,
                    norm3: l.norm3.map(&format!("{p}.norm3"), f)?,
                })
            })
            .collect::<Result<Vec<_>, E>>()?;
        let classifier = self
            .classifier
            .as_ref()
            .map(|c| c.map("classifier", f))
            .transpose()?;
        let output = self.output.as_ref().map(|c| c.map("output", f)).transpose()?;
        let merge_w = self.merge_w.as_ref().map(|w| f("merge_w", w)).transpose()?;
        Ok(Params {
            embedding,
            encoder,
            decoder,
            classifier,
            output,
            merge_w,
        })
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> Params<U> {
        self.try_map(|n, t| Ok::<U, std::convert::Infallible>(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }

    /// Visit every leaf mutably, in the same order as [`Params::try_map`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        let f: &mut dyn FnMut(&str, &mut T) = &mut f;
        f("embedding", &mut self.embedding);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            let p = format!("encoder.{i}");
            l.attn.each_mut(&format!("{p}.attn"), f);
            l.norm1.each_mut(&format!("{p}.norm1"), f);
            l.ffn.each_mut(&format!("{p}.ffn"), f);
            l.norm2.each_mut(&format!("{p}.norm2"), f);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.{i}");
            l.self_attn.each_mut(&format!("{p}.self_attn"), f);
            l.norm1.each_mut(&format!("{p}.norm1"), f);
            l.cross_attn.each_mut(&format!("{p}.cross_attn"), f);
            l.norm2.each_mut(&format!("{p}.norm2"), f);
            l.ffn.each_mut(&format!("{p}.ffn"), f);
            l.norm3.each_mut(&format!("{p}.norm3"), f);
        }
        if let Some(c) = self.classifier.as_mut() {
            c.each_mut("classifier", f);
        }
        if let Some(c) = self.output.as_mut() {
            c.each_mut("output", f);
        }
        if let Some(w) = self.merge_w.as_mut() {
            f("merge_w", w);
        }
    }

    /// Leaves paired with their names, in visiting order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(|n, t| out.push((n.to_string(), t)));
        out
    }
}

impl<T: Clone> Params<T> {
    /// Pair up two parameter sets of identical layout.
    pub fn zip<U: Clone>(&self, other: &Params<U>) -> Vec<(String, T, U)> {
        self.named()
            .into_iter()
            .zip(other.named())
            .map(|((n, a), (_, b))| (n, a.clone(), b.clone()))
            .collect()
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(&[rows, cols], (6.0 / (rows + cols) as f64).sqrt(), rng)
}

fn attention(d: usize, rng: &mut ChaCha8Rng) -> Attention<Tensor> {
    Attention {
        wq: xavier(d, d, rng),
        wk: xavier(d, d, rng),
        wv: xavier(d, d, rng),
        wo: xavier(d, d, rng),
    }
}

fn ffn(d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> FeedForward<Tensor> {
    FeedForward {
        w1: xavier(d, d_ff, rng),
        b1: Tensor::zeros(&[d_ff]),
        w2: xavier(d_ff, d, rng),
        b2: Tensor::zeros(&[d]),
    }
}

fn norm(d: usize) -> Norm<Tensor> {
    Norm {
        gamma: Tensor::ones(&[d]),
        beta: Tensor::zeros(&[d]),
    }
}

impl ModelParams {
    /// Random initialization. Draws happen in a fixed order that does not
    /// depend on the merge strategy; the merge vector starts at zero, so a
    /// learnable merge initially behaves exactly like the mean.
    pub fn init(config: &ModelConfig, merge: Option<MergeKind>, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        let embedding = uniform(&[config.vocab_size, d], 3f64.sqrt(), rng);
        let encoder = (0..config.layers)
            .map(|_| EncoderLayer {
                attn: attention(d, rng),
                norm1: norm(d),
                ffn: ffn(d, config.d_ff, rng),
                norm2: norm(d),
            })
            .collect();
        let (decoder, classifier, output) = match config.arch {
            Arch::EncoderOnly => (
                Vec::new(),
                Some(Linear {
                    weight: xavier(d, config.num_classes, rng),
                    bias: Tensor::zeros(&[config.num_classes]),
                }),
                None,
            ),
            Arch::EncoderDecoder => {
                let decoder = (0..config.layers)
                    .map(|_| DecoderLayer {
                        self_attn: attention(d, rng),
                        norm1: norm(d),
                        cross_attn: attention(d, rng),
                        norm2: norm(d),
                        ffn: ffn(d, config.d_ff, rng),
                        norm3: norm(d),
                    })
                    .collect();
                let output = Linear {
                    weight: xavier(d, config.vocab_size, rng),
                    bias: Tensor::zeros(&[config.vocab_size]),
                };
                (decoder, None, Some(output))
            }
        };
        let merge_w = (merge == Some(MergeKind::Learnable)).then(|| Tensor::zeros(&[d]));
        Params {
            embedding,
            encoder,
            decoder,
            classifier,
            output,
            merge_w,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}
