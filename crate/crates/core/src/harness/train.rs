use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{DataSource, ExperimentConfig, Task};
use super::data::{
    generate_classification_dataset, generate_translation_dataset, load_splits,
    ClassificationExample, Splits, TranslationExample,
};
use super::metrics::{corpus_bleu, macro_f1};
use super::optim::Adam;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flops::{count_encdec_flops, count_encoder_flops, LengthSchedule};
use crate::grouping::{group_subwords, WordIdBatch};
use crate::tokenizer::{encode, train_bpe, TokenizedSequence, Vocab};
use crate::transformer::{argmax, Batch, MergeSpec, ModelConfig, ModelParams, Params, TargetBatch, Transformer};

/// One encoded example. `label` is used by classification, `target` (token
/// ids without BOS/EOS) by translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub src: TokenizedSequence,
    pub label: usize,
    pub target: Vec<usize>,
}

/// Tokenized splits plus the vocabulary trained on the training split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub task: Task,
    pub vocab: Vocab,
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl PreparedData {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let (vs, ml) = (cfg.vocab_size, cfg.model.max_len);
        match (&cfg.task, &cfg.data) {
            (Task::Classify, DataSource::SyntheticClassification { num_classes, per_class, seed }) => {
                Self::classification(&generate_classification_dataset(*num_classes, *per_class, *seed)?, vs, ml)
            }
            (Task::Translate, DataSource::SyntheticTranslation { n, seed }) => {
                Self::translation(&generate_translation_dataset(*n, *seed)?, vs, ml)
            }
            (Task::Classify, DataSource::Jsonl { train, valid, test }) => {
                Self::classification(&load_splits(train, valid, test)?, vs, ml)
            }
            (Task::Translate, DataSource::Jsonl { train, valid, test }) => {
                Self::translation(&load_splits(train, valid, test)?, vs, ml)
            }
            _ => Err(Error::config("the data source does not match the task")),
        }
    }

    pub fn classification(
        splits: &Splits<ClassificationExample>,
        vocab_size: usize,
        max_len: usize,
    ) -> Result<Self> {
        let corpus: Vec<&str> = splits.train.iter().map(|e| e.text.as_str()).collect();
        let vocab = train_bpe(&corpus, vocab_size)?;
        let enc = |xs: &[ClassificationExample]| -> Result<Vec<Sample>> {
            xs.iter()
                .map(|e| {
                    let src = encode(&e.text, &vocab, true);
                    check_len(src.len(), max_len, &e.text)?;
                    Ok(Sample {
                        src,
                        label: e.label,
                        target: Vec::new(),
                    })
                })
                .collect()
        };
        let (train, valid, test) = (enc(&splits.train)?, enc(&splits.valid)?, enc(&splits.test)?);
        let num_classes = train.iter().chain(&valid).chain(&test).map(|s| s.label).max().unwrap_or(0) + 1;
        Self::checked(Task::Classify, vocab, num_classes.max(2), train, valid, test)
    }

    pub fn translation(
        splits: &Splits<TranslationExample>,
        vocab_size: usize,
        max_len: usize,
    ) -> Result<Self> {
        let corpus: Vec<&str> = splits
            .train
            .iter()
            .flat_map(|e| [e.source.as_str(), e.target.as_str()])
            .collect();
        let vocab = train_bpe(&corpus, vocab_size)?;
        let enc = |xs: &[TranslationExample]| -> Result<Vec<Sample>> {
            xs.iter()
                .map(|e| {
                    let src = encode(&e.source, &vocab, true);
                    check_len(src.len(), max_len, &e.source)?;
                    let target = encode(&e.target, &vocab, false).token_ids;
                    check_len(target.len() + 1, max_len, &e.target)?;
                    Ok(Sample { src, label: 0, target })
                })
                .collect()
        };
        let (train, valid, test) = (enc(&splits.train)?, enc(&splits.valid)?, enc(&splits.test)?);
        Self::checked(Task::Translate, vocab, 0, train, valid, test)
    }

    fn checked(
        task: Task,
        vocab: Vocab,
        num_classes: usize,
        train: Vec<Sample>,
        valid: Vec<Sample>,
        test: Vec<Sample>,
    ) -> Result<Self> {
        if train.is_empty() || valid.is_empty() || test.is_empty() {
            return Err(Error::config("train, valid and test splits must all be non-empty"));
        }
        Ok(Self {
            task,
            vocab,
            num_classes,
            train,
            valid,
            test,
        })
    }

    pub fn model_config(&self, cfg: &ExperimentConfig) -> ModelConfig {
        cfg.model_config(self.vocab.len(), self.num_classes)
    }
}

fn check_len(len: usize, max_len: usize, text: &str) -> Result<()> {
    if len > max_len {
        return Err(Error::config(format!(
            "{len} tokens exceed max_len {max_len}: {text:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches; absent for epoch 0,
    /// which is measured before any update.
    pub train_loss: Option<f64>,
    pub valid_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters of the best validation epoch.
    pub model: Transformer,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test_metric: f64,
    /// Analytic forward FLOPs summed over the test split.
    pub test_flops: u64,
}

fn batches(samples: &[Sample], size: usize) -> impl Iterator<Item = &[Sample]> {
    samples.chunks(size.max(1))
}

fn source_batch(samples: &[Sample]) -> Result<Batch> {
    let seqs: Vec<&TokenizedSequence> = samples.iter().map(|s| &s.src).collect();
    Batch::from_sequences(&seqs)
}

fn target_batch(samples: &[Sample]) -> Result<TargetBatch> {
    let targets: Vec<&[usize]> = samples.iter().map(|s| s.target.as_slice()).collect();
    TargetBatch::from_targets(&targets)
}

/// Mean cross-entropy of a batch on `tape`.
pub fn batch_loss(model: &Transformer, tape: &mut Tape, p: &Params<Var>, samples: &[Sample], task: Task) -> Result<Var> {
    let src = source_batch(samples)?;
    match task {
        Task::Classify => {
            let logits = model.classify_on(tape, p, &src)?;
            let labels: Vec<Option<usize>> = samples.iter().map(|s| Some(s.label)).collect();
            tape.cross_entropy(logits, &labels)
        }
        Task::Translate => {
            let tgt = target_batch(samples)?;
            let enc = model.encode_on(tape, p, &src)?;
            let dec = model.decode_on(tape, p, enc.memory, &enc.mask, &tgt)?;
            let v = model.config.vocab_size;
            let flat = tape.reshape(dec.logits, &[tgt.batch * tgt.seq_len, v])?;
            tape.cross_entropy(flat, &tgt.labels)
        }
    }
}

/// Macro-F1 for classification, corpus BLEU-4 over subtoken ids of greedy
/// decodes for translation.
pub fn evaluate(model: &Transformer, samples: &[Sample], task: Task, batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation on an empty split"));
    }
    match task {
        Task::Classify => {
            let mut preds = Vec::with_capacity(samples.len());
            for chunk in batches(samples, batch_size) {
                let logits = model.classify(&source_batch(chunk)?)?;
                preds.extend(logits.data().chunks(logits.last_dim()).map(argmax));
            }
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            macro_f1(&preds, &labels)
        }
        Task::Translate => {
            let mut hyps = Vec::with_capacity(samples.len());
            for chunk in batches(samples, batch_size) {
                hyps.extend(model.greedy_decode(&source_batch(chunk)?, model.config.max_len)?);
            }
            let refs: Vec<Vec<usize>> = samples.iter().map(|s| s.target.clone()).collect();
            corpus_bleu(&hyps, &refs)
        }
    }
}

/// Number of merge groups in one sequence, i.e. its length after merging.
pub fn merged_length(seq: &TokenizedSequence) -> Result<usize> {
    let words = WordIdBatch::from_sequences(&[seq], seq.len())?;
    Ok(group_subwords(&words).counts()[0])
}

/// Analytic FLOPs of one forward pass per sample, summed. Lengths are the
/// unpadded ones; translation charges a teacher-forced decoder over the
/// reference plus BOS.
pub fn evaluation_flops(
    config: &ModelConfig,
    merge: Option<MergeSpec>,
    samples: &[Sample],
    task: Task,
) -> Result<u64> {
    let mut total = 0u64;
    for s in samples {
        let n = s.src.len();
        let n_prime = merge.map(|_| merged_length(&s.src)).transpose()?.unwrap_or(n);
        let schedule = LengthSchedule::new(config.layers, n, n_prime, merge.map(|m| m.position))?;
        total += match task {
            Task::Classify => count_encoder_flops(config, &schedule)?.total,
            Task::Translate => count_encdec_flops(config, &schedule, s.target.len() + 1, n_prime)?.total,
        };
    }
    Ok(total)
}

/// Train one configuration from `seed`, keeping the best validation epoch
/// (ties go to the earlier epoch). Epoch 0 of the curve is the untrained
/// model.
fn first_non_finite(params: &ModelParams) -> Option<String> {
    params
        .named()
        .into_iter()
        .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
        .map(|(name, _)| name)
}

pub fn train(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    merge: Option<MergeSpec>,
    seed: u64,
) -> Result<TrainResult> {
    let model_config = data.model_config(cfg);
    let mut model = Transformer::new(model_config.clone(), merge, seed)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let task = data.task;
    let mut curve = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        valid_metric: evaluate(&model, &data.valid, task, cfg.batch_size)?,
    }];
    let mut best: Option<(usize, f64, Transformer)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let samples: Vec<Sample> = idx.iter().map(|&i| data.train[i].clone()).collect();
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, true);
            let loss = batch_loss(&model, &mut tape, &p, &samples, task)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {value} at epoch {epoch}, step {}",
                    steps + 1
                )));
            }
            let g = tape.backward(loss)?;
            let grads = p.map(|_, v| g.wrt(*v));
            adam.step(&mut model.params, &grads)?;
            if let Some(name) = first_non_finite(&model.params) {
                return Err(Error::Diverged(format!(
                    "non-finite value in {name} after epoch {epoch}, step {}",
                    steps + 1
                )));
            }
            loss_sum += value;
            steps += 1;
        }
        let metric = evaluate(&model, &data.valid, task, cfg.batch_size)?;
        log::debug!("seed {seed} epoch {epoch}: loss {:.4} valid {metric:.4}", loss_sum / steps as f64);
        curve.push(EpochRecord {
            epoch,
            train_loss: Some(loss_sum / steps as f64),
            valid_metric: metric,
        });
        if best.as_ref().is_none_or(|(_, m, _)| metric > *m) {
            best = Some((epoch, metric, model.clone()));
        }
    }
    let (best_epoch, _, model) = best.expect("at least one epoch");
    let test_metric = evaluate(&model, &data.test, task, cfg.batch_size)?;
    let test_flops = evaluation_flops(&model_config, merge, &data.test, task)?;
    Ok(TrainResult {
        model,
        curve,
        best_epoch,
        test_metric,
        test_flops,
    })
}
