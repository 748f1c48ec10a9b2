use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Arch, MergeSpec, ModelConfig};
use super::params::{Attention, FeedForward, ModelParams, Norm, Params};
use crate::autodiff::{Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::grouping::{group_subwords, GroupIndices, WordIdBatch};
use crate::tokenizer::{TokenizedSequence, BOS_ID, EOS_ID, PAD_ID};

/// A padded batch of encoder inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    /// Row-major `batch x seq_len`, padded with `PAD_ID`.
    pub token_ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub word_ids: WordIdBatch,
}

impl Batch {
    pub fn from_sequences(seqs: &[&TokenizedSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if seq_len == 0 {
            return Err(Error::contract("every sequence in the batch is empty"));
        }
        let mut token_ids = vec![PAD_ID; seqs.len() * seq_len];
        for (b, s) in seqs.iter().enumerate() {
            token_ids[b * seq_len..b * seq_len + s.len()].copy_from_slice(&s.token_ids);
        }
        Ok(Self {
            batch: seqs.len(),
            seq_len,
            token_ids,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            word_ids: WordIdBatch::from_sequences(seqs, seq_len)?,
        })
    }

    pub fn mask(&self) -> Vec<bool> {
        length_mask(&self.lengths, self.seq_len)
    }
}

/// Decoder inputs and labels for teacher forcing: inputs are `BOS t_1 .. t_k`
/// and labels `t_1 .. t_k EOS`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    /// `None` at padding positions.
    pub labels: Vec<Option<usize>>,
    pub lengths: Vec<usize>,
}

impl TargetBatch {
    /// `targets` hold token ids without BOS/EOS.
    pub fn from_targets(targets: &[&[usize]]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::contract("empty target batch"));
        }
        let seq_len = targets.iter().map(|t| t.len() + 1).max().unwrap_or(1);
        let mut inputs = vec![PAD_ID; targets.len() * seq_len];
        let mut labels = vec![None; targets.len() * seq_len];
        for (b, t) in targets.iter().enumerate() {
            let row = b * seq_len;
            inputs[row] = BOS_ID;
            inputs[row + 1..row + 1 + t.len()].copy_from_slice(t);
            for (i, &tok) in t.iter().enumerate() {
                labels[row + i] = Some(tok);
            }
            labels[row + t.len()] = Some(EOS_ID);
        }
        Ok(Self {
            batch: targets.len(),
            seq_len,
            inputs,
            labels,
            lengths: targets.iter().map(|t| t.len() + 1).collect(),
        })
    }

    /// Decoder prefixes without labels, as used during generation.
    pub fn from_prefixes(prefixes: &[Vec<usize>]) -> Result<Self> {
        let seq_len = prefixes.first().map_or(0, Vec::len);
        if seq_len == 0 || prefixes.iter().any(|p| p.len() != seq_len) {
            return Err(Error::contract("prefixes must be non-empty and of equal length"));
        }
        Ok(Self {
            batch: prefixes.len(),
            seq_len,
            inputs: prefixes.concat(),
            labels: vec![None; prefixes.len() * seq_len],
            lengths: vec![seq_len; prefixes.len()],
        })
    }
}

/// Encoder result on a tape.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[B, M, d_model]`.
    pub memory: Var,
    /// `B x M` validity of memory positions.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub groups: Option<GroupIndices>,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `[B, T, vocab_size]`.
    pub logits: Var,
    /// Per decoder layer, cross-attention weights `[B * heads, T, M]`.
    pub cross_attention: Vec<Var>,
}

fn length_mask(lengths: &[usize], n: usize) -> Vec<bool> {
    lengths
        .iter()
        .flat_map(|&l| (0..n).map(move |i| i < l))
        .collect()
}

/// Sinusoidal encoding: `sin(p / 10000^(2i/d))` on even and `cos` on odd
/// dimensions.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[n, d], |idx| {
        let (pos, j) = (idx / d, idx % d);
        let angle = pos as f64 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// A model with its parameters and merge placement.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub merge: Option<MergeSpec>,
    pub params: ModelParams,
}

impl Transformer {
    pub fn new(config: ModelConfig, merge: Option<MergeSpec>, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(m) = &merge {
            m.validate(&config)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, merge.map(|m| m.strategy), &mut rng);
        Ok(Self {
            config,
            merge,
            params,
        })
    }

    /// Assemble a model from existing parameters, checking their layout
    /// against a freshly initialized one.
    pub fn from_parts(
        config: ModelConfig,
        merge: Option<MergeSpec>,
        params: ModelParams,
    ) -> Result<Self> {
        let reference = Self::new(config, merge, 0)?;
        let expect = reference.params.named();
        let got = params.named();
        if expect.len() != got.len() {
            return Err(Error::config(format!(
                "parameter set has {} tensors, the configuration needs {}",
                got.len(),
                expect.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in expect.iter().zip(&got) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::config(format!(
                    "parameter {n2} {:?} does not match expected {n1} {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        Ok(Self {
            config: reference.config,
            merge,
            params,
        })
    }

    /// Put every parameter on the tape, as gradient-tracked leaves or as
    /// constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Params<Var> {
        self.params.map(|_, t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    fn embed(&self, tape: &mut Tape, p: &Params<Var>, ids: &[usize], b: usize, n: usize) -> Result<Var> {
        if n > self.config.max_len {
            return Err(Error::contract(format!(
                "sequence length {n} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let h = tape.embedding(p.embedding, ids, &[b, n])?;
        let pe = tape.constant(positional_encoding(n, self.config.d_model));
        tape.add(h, pe)
    }

    fn maybe_merge(
        &self,
        tape: &mut Tape,
        p: &Params<Var>,
        at: usize,
        h: Var,
        mask: &mut Vec<bool>,
        lengths: &mut Vec<usize>,
        groups: &GroupIndices,
    ) -> Result<Var> {
        match self.merge {
            Some(spec) if spec.position == at => {
                let (out, m, l) = tape.merge(h, mask, groups, p.merge_w)?;
                *mask = m;
                *lengths = l;
                Ok(out)
            }
            _ => Ok(h),
        }
    }

    pub fn encode_on(&self, tape: &mut Tape, p: &Params<Var>, batch: &Batch) -> Result<EncoderOutput> {
        let mut h = self.embed(tape, p, &batch.token_ids, batch.batch, batch.seq_len)?;
        let mut mask = batch.mask();
        let mut lengths = batch.lengths.clone();
        let groups = self.merge.map(|_| group_subwords(&batch.word_ids));
        if let Some(g) = &groups {
            h = self.maybe_merge(tape, p, 0, h, &mut mask, &mut lengths, g)?;
        }
        for (l, layer) in p.encoder.iter().enumerate() {
            let a = attention(tape, &layer.attn, h, h, &mask, false, self.config.heads)?.0;
            let r = tape.add(h, a)?;
            let x = norm(tape, &layer.norm1, r)?;
            let f = feed_forward(tape, &layer.ffn, x)?;
            let r = tape.add(x, f)?;
            h = norm(tape, &layer.norm2, r)?;
            if let Some(g) = &groups {
                h = self.maybe_merge(tape, p, l + 1, h, &mut mask, &mut lengths, g)?;
            }
        }
        Ok(EncoderOutput {
            memory: h,
            mask,
            lengths,
            groups,
        })
    }

    /// Logits `[B, num_classes]` from the CLS position.
    pub fn classify_on(&self, tape: &mut Tape, p: &Params<Var>, batch: &Batch) -> Result<Var> {
        let head = match (self.config.arch, &p.classifier) {
            (Arch::EncoderOnly, Some(head)) => head.clone(),
            _ => return Err(Error::contract("classify needs an encoder-only model")),
        };
        let enc = self.encode_on(tape, p, batch)?;
        let pooled = tape.select_position(enc.memory, 0)?;
        let z = tape.matmul(pooled, head.weight)?;
        tape.add(z, head.bias)
    }

    pub fn decode_on(
        &self,
        tape: &mut Tape,
        p: &Params<Var>,
        memory: Var,
        memory_mask: &[bool],
        target: &TargetBatch,
    ) -> Result<DecoderOutput> {
        let out = match (self.config.arch, &p.output) {
            (Arch::EncoderDecoder, Some(o)) => o.clone(),
            _ => return Err(Error::contract("decoding needs an encoder-decoder model")),
        };
        let (b, t) = (target.batch, target.seq_len);
        let mut y = self.embed(tape, p, &target.inputs, b, t)?;
        let mask = length_mask(&target.lengths, t);
        let mut cross = Vec::with_capacity(p.decoder.len());
        for layer in &p.decoder {
            let s = attention(tape, &layer.self_attn, y, y, &mask, true, self.config.heads)?.0;
            let r = tape.add(y, s)?;
            let y1 = norm(tape, &layer.norm1, r)?;
            let (c, probs) =
                attention(tape, &layer.cross_attn, y1, memory, memory_mask, false, self.config.heads)?;
            cross.push(probs);
            let r = tape.add(y1, c)?;
            let y2 = norm(tape, &layer.norm2, r)?;
            let f = feed_forward(tape, &layer.ffn, y2)?;
            let r = tape.add(y2, f)?;
            y = norm(tape, &layer.norm3, r)?;
        }
        let z = tape.matmul(y, out.weight)?;
        let logits = tape.add(z, out.bias)?;
        Ok(DecoderOutput {
            logits,
            cross_attention: cross,
        })
    }

    /// Final encoder states, their validity mask and the groups used.
    pub fn encode(&self, batch: &Batch) -> Result<(Tensor, Vec<bool>, Option<GroupIndices>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let enc = self.encode_on(&mut tape, &p, batch)?;
        Ok((tape.value(enc.memory).clone(), enc.mask, enc.groups))
    }

    pub fn classify(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let z = self.classify_on(&mut tape, &p, batch)?;
        Ok(tape.value(z).clone())
    }

    pub fn decode_teacher_forced(&self, src: &Batch, target: &TargetBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let enc = self.encode_on(&mut tape, &p, src)?;
        let dec = self.decode_on(&mut tape, &p, enc.memory, &enc.mask, target)?;
        Ok(tape.value(dec.logits).clone())
    }

    /// Greedy generation from BOS until EOS or `max_steps` tokens. The
    /// returned sequences exclude BOS and EOS.
    pub fn greedy_decode(&self, src: &Batch, max_steps: usize) -> Result<Vec<Vec<usize>>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let enc = self.encode_on(&mut tape, &p, src)?;
        let memory = tape.value(enc.memory).clone();
        let steps = max_steps.min(self.config.max_len.saturating_sub(1));
        let mut prefixes = vec![vec![BOS_ID]; src.batch];
        let mut done = vec![false; src.batch];
        let mut outputs = vec![Vec::new(); src.batch];
        for _ in 0..steps {
            let mut step = Tape::new();
            let p = self.bind(&mut step, false);
            let mem = step.constant(memory.clone());
            let target = TargetBatch::from_prefixes(&prefixes)?;
            let dec = self.decode_on(&mut step, &p, mem, &enc.mask, &target)?;
            let logits = step.value(dec.logits);
            let (t, v) = (target.seq_len, self.config.vocab_size);
            for (b, prefix) in prefixes.iter_mut().enumerate() {
                let row = &logits.data()[(b * t + t - 1) * v..(b * t + t) * v];
                let next = argmax(row);
                if !done[b] {
                    if next == EOS_ID {
                        done[b] = true;
                    } else {
                        outputs[b].push(next);
                    }
                }
                prefix.push(next);
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(outputs)
    }
}

/// Index of the largest value; the first wins ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn norm(tape: &mut Tape, n: &Norm<Var>, x: Var) -> Result<Var> {
    tape.layer_norm(x, n.gamma, n.beta, LAYER_NORM_EPS)
}

fn feed_forward(tape: &mut Tape, f: &FeedForward<Var>, x: Var) -> Result<Var> {
    let h = tape.matmul(x, f.w1)?;
    let h = tape.add(h, f.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, f.w2)?;
    tape.add(o, f.b2)
}

/// Multi-head attention of `q_in[B, n, d]` over `kv_in[B, m, d]`. Keys where
/// `key_mask` is false, and future keys when `causal`, are excluded. Returns
/// the output and the attention weights `[B * heads, n, m]`.
fn attention(
    tape: &mut Tape,
    a: &Attention<Var>,
    q_in: Var,
    kv_in: Var,
    key_mask: &[bool],
    causal: bool,
    heads: usize,
) -> Result<(Var, Var)> {
    let (b, n, d) = match tape.shape(q_in) {
        [b, n, d] => (*b, *n, *d),
        s => return Err(Error::shape("attention", format!("query input {s:?} is not rank 3"))),
    };
    let m = tape.shape(kv_in)[1];
    if key_mask.len() != b * m {
        return Err(Error::shape(
            "attention",
            format!("key mask of length {} for {b} x {m} keys", key_mask.len()),
        ));
    }
    let q = tape.matmul(q_in, a.wq)?;
    let k = tape.matmul(kv_in, a.wk)?;
    let v = tape.matmul(kv_in, a.wv)?;
    let q = tape.split_heads(q, heads)?;
    let k = tape.split_heads(k, heads)?;
    let v = tape.split_heads(v, heads)?;
    let kt = tape.transpose(k)?;
    let scores = tape.batch_matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
    let mut blocked = Vec::with_capacity(b * heads * n * m);
    for bi in 0..b {
        for _ in 0..heads {
            for i in 0..n {
                for j in 0..m {
                    blocked.push(!key_mask[bi * m + j] || (causal && j > i));
                }
            }
        }
    }
    let scores = tape.masked_fill(scores, &blocked, f64::NEG_INFINITY)?;
    let probs = tape.softmax(scores)?;
    let ctx = tape.batch_matmul(probs, v)?;
    let ctx = tape.join_heads(ctx, heads)?;
    Ok((tape.matmul(ctx, a.wo)?, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::config::MergeKind;

    fn seq(ids: &[usize], words: &[Option<usize>]) -> TokenizedSequence {
        TokenizedSequence {
            token_ids: ids.to_vec(),
            word_ids: words.to_vec(),
        }
    }

    fn cfg(arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_len: 16,
            num_classes: 3,
        }
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.data()[0], 0.0);
        assert_eq!(pe.data()[1], 1.0);
        assert!((pe.data()[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.data()[4 + 2] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn merge_at_zero_shortens_memory() {
        let s = seq(
            &[1, 6, 7, 8, 2],
            &[None, Some(1), Some(1), Some(2), None],
        );
        let batch = Batch::from_sequences(&[&s]).unwrap();
        let plain = Transformer::new(cfg(Arch::EncoderOnly), None, 1).unwrap();
        assert_eq!(plain.encode(&batch).unwrap().0.shape(), &[1, 5, 8]);
        for pos in [0, 2] {
            let m = Transformer::new(
                cfg(Arch::EncoderOnly),
                Some(MergeSpec::new(MergeKind::Mean, pos)),
                1,
            )
            .unwrap();
            assert_eq!(m.encode(&batch).unwrap().0.shape(), &[1, 4, 8]);
        }
    }

    #[test]
    fn target_batch_layout() {
        let t = TargetBatch::from_targets(&[&[7, 8], &[9]]).unwrap();
        assert_eq!(t.seq_len, 3);
        assert_eq!(t.inputs, vec![BOS_ID, 7, 8, BOS_ID, 9, PAD_ID]);
        assert_eq!(
            t.labels,
            vec![Some(7), Some(8), Some(EOS_ID), Some(9), Some(EOS_ID), None]
        );
    }

    #[test]
    fn arch_mismatch_is_an_error() {
        let s = seq(&[1, 6, 2], &[None, Some(0), None]);
        let batch = Batch::from_sequences(&[&s]).unwrap();
        let m = Transformer::new(cfg(Arch::EncoderDecoder), None, 0).unwrap();
        assert!(matches!(m.classify(&batch), Err(Error::Contract(_))));
        let c = Transformer::new(cfg(Arch::EncoderOnly), None, 0).unwrap();
        let t = TargetBatch::from_targets(&[&[6]]).unwrap();
        assert!(matches!(c.decode_teacher_forced(&batch, &t), Err(Error::Contract(_))));
    }

    #[test]
    fn rigged_eos_gives_empty_output() {
        let mut m = Transformer::new(cfg(Arch::EncoderDecoder), None, 3).unwrap();
        let out = m.params.output.as_mut().unwrap();
        out.bias.data_mut()[EOS_ID] = 1e6;
        let s = seq(&[1, 6, 2], &[None, Some(0), None]);
        let batch = Batch::from_sequences(&[&s, &s]).unwrap();
        assert_eq!(m.greedy_decode(&batch, 5).unwrap(), vec![Vec::<usize>::new(); 2]);
        assert_eq!(m.greedy_decode(&batch, 0).unwrap(), vec![Vec::<usize>::new(); 2]);
    }

    #[test]
    fn too_long_input_is_rejected() {
        let ids = vec![6; 17];
        let words: Vec<Option<usize>> = (0..17).map(Some).collect();
        let s = seq(&ids, &words);
        let batch = Batch::from_sequences(&[&s]).unwrap();
        let m = Transformer::new(cfg(Arch::EncoderOnly), None, 0).unwrap();
        assert!(m.classify(&batch).is_err());
    }

    #[test]
    fn bad_position_rejected() {
        let r = Transformer::new(
            cfg(Arch::EncoderOnly),
            Some(MergeSpec::new(MergeKind::Mean, 3)),
            0,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
