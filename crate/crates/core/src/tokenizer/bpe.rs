use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::lexer::pretokenize;
use super::vocab::{Vocab, CLS_ID, SEP_ID, SPECIAL_TOKENS, UNK_ID};
use crate::error::{Error, Result};

/// Subtoken ids with the lexeme each one came from.
///
/// `word_ids[i]` is `None` for special tokens (CLS, SEP, and any padding a
/// caller adds later).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSequence {
    pub token_ids: Vec<usize>,
    pub word_ids: Vec<Option<usize>>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-special subtokens.
    pub fn subtoken_count(&self) -> usize {
        self.word_ids.iter().filter(|w| w.is_some()).count()
    }

    /// Word ids with specials encoded as `-1`.
    pub fn word_id_row(&self) -> Vec<i64> {
        self.word_ids
            .iter()
            .map(|w| w.map_or(-1, |w| w as i64))
            .collect()
    }
}

/// Learn merge rules from `corpus` until the vocabulary holds `vocab_size`
/// tokens or no adjacent pair occurs at least twice.
///
/// Merges never cross lexeme boundaries. Among pairs with equal frequency the
/// lexicographically smallest `(left, right)` wins.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Vocab> {
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for text in corpus {
        for lx in pretokenize(text.as_ref()) {
            *word_freq.entry(lx.text).or_default() += 1;
        }
    }

    let alphabet: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    let base = SPECIAL_TOKENS.len() + alphabet.len();
    if vocab_size < base {
        return Err(Error::config(format!(
            "vocab_size {vocab_size} is below the base size {base} ({} specials + {} alphabet symbols)",
            SPECIAL_TOKENS.len(),
            alphabet.len()
        )));
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().map(|c| c.to_string()));
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .into_iter()
        .map(|(w, f)| (w.chars().map(String::from).collect(), f))
        .collect();
    let mut merges = Vec::new();

    while tokens.len() < vocab_size {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *counts.entry((&pair[0], &pair[1])).or_default() += freq;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((left, right), count)) = best else {
            break;
        };
        if count < 2 {
            break;
        }
        let (left, right) = (left.to_string(), right.to_string());
        let joined = format!("{left}{right}");
        for (symbols, _) in &mut words {
            apply_merge(symbols, &left, &right, &joined);
        }
        if known.insert(joined.clone()) {
            tokens.push(joined);
        }
        merges.push((left, right));
    }

    Vocab::from_parts(tokens, merges)
}

/// Merge every left-to-right, non-overlapping occurrence of `(left, right)`.
fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str, joined: &str) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(joined.to_string());
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Segment one lexeme by applying the vocabulary's merge rules in order.
///
/// Characters outside the alphabet become UNK and take no part in merges.
pub fn segment_lexeme(lexeme: &str, vocab: &Vocab) -> Vec<usize> {
    // `None` marks an out-of-alphabet character.
    let mut symbols: Vec<Option<String>> = lexeme
        .chars()
        .map(|c| {
            let s = c.to_string();
            vocab.id(&s).map(|_| s)
        })
        .collect();
    for (left, right) in vocab.merges() {
        if symbols.len() < 2 {
            break;
        }
        let hit_at = |s: &[Option<String>], i: usize| {
            s[i].as_deref() == Some(left.as_str()) && s[i + 1].as_deref() == Some(right.as_str())
        };
        if !(0..symbols.len() - 1).any(|i| hit_at(&symbols, i)) {
            continue;
        }
        let mut i = 0;
        let mut out = Vec::with_capacity(symbols.len());
        while i < symbols.len() {
            if i + 1 < symbols.len() && hit_at(&symbols, i) {
                out.push(Some(format!("{left}{right}")));
                i += 2;
            } else {
                out.push(symbols[i].take());
                i += 1;
            }
        }
        symbols = out;
    }
    symbols
        .into_iter()
        .map(|s| s.and_then(|s| vocab.id(&s)).unwrap_or(UNK_ID))
        .collect()
}

/// Tokenize `text`: pre-tokenize into lexemes, segment each lexeme
/// independently, and tag each subtoken with its lexeme index.
///
/// With `add_specials`, CLS is prepended and SEP appended, both with word id
/// `None`.
pub fn encode(text: &str, vocab: &Vocab, add_specials: bool) -> TokenizedSequence {
    let mut token_ids = Vec::new();
    let mut word_ids = Vec::new();
    if add_specials {
        token_ids.push(CLS_ID);
        word_ids.push(None);
    }
    for lx in pretokenize(text) {
        for id in segment_lexeme(&lx.text, vocab) {
            token_ids.push(id);
            word_ids.push(Some(lx.index));
        }
    }
    if add_specials {
        token_ids.push(SEP_ID);
        word_ids.push(None);
    }
    TokenizedSequence {
        token_ids,
        word_ids,
    }
}

/// Surface strings for a list of ids; unknown ids render as UNK.
pub fn decode_tokens(ids: &[usize], vocab: &Vocab) -> Vec<String> {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or(SPECIAL_TOKENS[UNK_ID]).to_string())
        .collect()
}
