use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Surface strings of the special tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 6] = ["<pad>", "<cls>", "<sep>", "<unk>", "<bos>", "<eos>"];

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const BOS_ID: usize = 4;
pub const EOS_ID: usize = 5;

/// A BPE vocabulary: dense token ids plus the ordered merge rules.
///
/// Ids `0..6` are the specials (see [`SPECIAL_TOKENS`]), followed by the
/// single-character alphabet and then the merged symbols in creation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
    merges: Vec<(String, String)>,
}

impl Vocab {
    /// Build from an id-ordered token list and merge rules, checking the
    /// structural invariants.
    pub fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::Parse(
                "vocabulary must start with the six special tokens".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Parse(format!("empty token at id {id}")));
            }
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Parse(format!("duplicate token {tok:?}")));
            }
        }
        for (a, b) in &merges {
            let joined = format!("{a}{b}");
            if !token_to_id.contains_key(&joined) {
                return Err(Error::Parse(format!(
                    "merge ({a:?}, {b:?}) produces {joined:?}, which is not in the vocabulary"
                )));
            }
        }
        Ok(Self {
            tokens,
            token_to_id,
            merges,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    /// Line-oriented text form: one escaped token per line in id order, a
    /// blank line, then one `left right` merge rule per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            let _ = writeln!(out, "{}", escape(tok));
        }
        out.push('\n');
        for (a, b) in &self.merges {
            let _ = writeln!(out, "{} {}", escape(a), escape(b));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut tokens = Vec::new();
        for line in lines.by_ref() {
            if line.is_empty() {
                break;
            }
            tokens.push(unescape(line)?);
        }
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("merge line {}: expected two fields", n + 1)))?;
            merges.push((unescape(a)?, unescape(b)?));
        }
        Self::from_parts(tokens, merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('s') => out.push(' '),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(Error::Parse(format!(
                    "bad escape sequence \\{} in {s:?}",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}
