//! Synthetic desk-scale datasets and JSONL ingestion.

use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::pretokenize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationExample {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Sizes of a 70:15:15 split of `n` items; the test split takes the rest.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let valid = n * 15 / 100;
    (train, valid, n - train - valid)
}

const WORDS: &[&str] = &[
    "get", "set", "user", "details", "count", "index", "buffer", "total", "value", "node", "list",
    "item", "calc", "max", "min", "temp", "result", "data", "size", "alpha", "parse", "entry",
];

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
        .unwrap_or_default()
}

/// camelCase identifier of two or three words, e.g. `getUserDetails`.
fn compound_identifier(rng: &mut ChaCha8Rng, words: &[&str]) -> String {
    let parts = rng.gen_range(2..=3);
    let mut id = words[rng.gen_range(0..words.len())].to_string();
    for _ in 1..parts {
        id.push_str(&capitalize(words[rng.gen_range(0..words.len())]));
    }
    id
}

pub const CLASSIFICATION_TEMPLATES: usize = 8;

fn class_snippet(class: usize, rng: &mut ChaCha8Rng) -> String {
    let mut ids: Vec<String> = Vec::new();
    while ids.len() < 3 {
        let id = compound_identifier(rng, WORDS);
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let (a, b, c) = (&ids[0], &ids[1], &ids[2]);
    let k = rng.gen_range(1..100);
    let body = match class {
        0 => format!("for (int i = 0; i < {k}; i++) {{ {a} += {b}[i]; }}"),
        1 => format!("if ({a} > {b}) {{ {c} = {a}; }} else {{ {c} = {b}; }}"),
        2 => format!("while ({a} != 0) {{ {a} = {a} / 10; {b}++; }}"),
        3 => format!("{c} = {a} * {b} + {k} - {a}; return {c};"),
        4 => format!("switch ({a}) {{ case {k}: {b} = 1; break; default: {b} = 0; }}"),
        5 => format!("do {{ {a}--; {b} += {a}; }} while ({a} > {k});"),
        6 => format!("{a}.{b}({c}).{b}({k});"),
        _ => format!("int {a}[{k}] = {{{k}, {k}, {k}}}; return {a}[0];"),
    };
    if rng.gen_bool(0.5) {
        let noise = compound_identifier(rng, WORDS);
        format!("int {noise} = {}; {body}", rng.gen_range(0..1000))
    } else {
        body
    }
}

/// Templated C-like snippets, one control-flow skeleton per class, with
/// random compound identifiers. Each class is split 70:15:15 on its own, so
/// every split is balanced.
pub fn generate_classification_dataset(
    num_classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<Splits<ClassificationExample>> {
    if !(2..=CLASSIFICATION_TEMPLATES).contains(&num_classes) {
        return Err(Error::config(format!(
            "num_classes must lie in 2..={CLASSIFICATION_TEMPLATES}, got {num_classes}"
        )));
    }
    if per_class < 10 {
        return Err(Error::config("per_class must be >= 10"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    let (n_train, n_valid, _) = split_sizes(per_class);
    for label in 0..num_classes {
        for i in 0..per_class {
            let ex = ClassificationExample {
                text: class_snippet(label, &mut rng),
                label,
            };
            match i {
                i if i < n_train => splits.train.push(ex),
                i if i < n_train + n_valid => splits.valid.push(ex),
                _ => splits.test.push(ex),
            }
        }
    }
    splits.train.shuffle(&mut rng);
    splits.valid.shuffle(&mut rng);
    splits.test.shuffle(&mut rng);
    Ok(splits)
}

const TOY_WORDS: &[&str] = &["user", "count", "total", "node", "size", "item", "max", "data"];

fn toy_statement(rng: &mut ChaCha8Rng) -> String {
    let a = compound_identifier(rng, TOY_WORDS);
    match rng.gen_range(0..3) {
        0 => format!("let {a} = {} ;", rng.gen_range(0..100)),
        1 => format!("print {a} ;"),
        _ => format!("call {a} with {} ;", compound_identifier(rng, TOY_WORDS)),
    }
}

/// Translate a toy "lang-A" program into the C-like "lang-B":
///
/// * `let x = e ;` becomes `int x = e ;`
/// * `print x ;` becomes `printf ( x ) ;`
/// * `call f with a ;` becomes `f ( a ) ;`
///
/// Any other statement is copied. Output lexemes are separated by single
/// spaces.
pub fn rewrite_lang_a(source: &str) -> String {
    let lexemes: Vec<String> = pretokenize(source).into_iter().map(|l| l.text).collect();
    let mut out: Vec<String> = Vec::new();
    for stmt in lexemes.split_inclusive(|t| t == ";") {
        let (body, semi) = match stmt.last().map(String::as_str) {
            Some(";") => (&stmt[..stmt.len() - 1], true),
            _ => (stmt, false),
        };
        let s = |x: &str| x.to_string();
        let rewritten: Vec<String> = match body {
            [kw, rest @ ..] if kw == "let" => std::iter::once(s("int")).chain(rest.iter().cloned()).collect(),
            [kw, x] if kw == "print" => vec![s("printf"), s("("), x.clone(), s(")")],
            [kw, f, with, args @ ..] if kw == "call" && with == "with" => std::iter::once(f.clone())
                .chain(std::iter::once(s("(")))
                .chain(args.iter().cloned())
                .chain(std::iter::once(s(")")))
                .collect(),
            other => other.to_vec(),
        };
        out.extend(rewritten);
        if semi {
            out.push(s(";"));
        }
    }
    out.join(" ")
}

/// Pairs of one or two toy statements and their rewrites.
pub fn generate_translation_dataset(n: usize, seed: u64) -> Result<Splits<TranslationExample>> {
    if n < 10 {
        return Err(Error::config("translation datasets need n >= 10"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<TranslationExample> = (0..n)
        .map(|_| {
            let stmts = rng.gen_range(1..=2);
            let source = (0..stmts)
                .map(|_| toy_statement(&mut rng))
                .collect::<Vec<_>>()
                .join(" ");
            let target = rewrite_lang_a(&source);
            TranslationExample { source, target }
        })
        .collect();
    let (n_train, n_valid, _) = split_sizes(n);
    let test = all.split_off(n_train + n_valid);
    let valid = all.split_off(n_train);
    Ok(Splits {
        train: all,
        valid,
        test,
    })
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn load_splits<T: for<'de> Deserialize<'de>>(
    train: &Path,
    valid: &Path,
    test: &Path,
) -> Result<Splits<T>> {
    Ok(Splits {
        train: read_jsonl(train)?,
        valid: read_jsonl(valid)?,
        test: read_jsonl(test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        let s = generate_classification_dataset(4, 100, 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (280, 60, 60));
        let t = generate_translation_dataset(200, 3).unwrap();
        assert_eq!((t.train.len(), t.valid.len(), t.test.len()), (140, 30, 30));
    }

    #[test]
    fn stratified_balance() {
        let s = generate_classification_dataset(3, 23, 9).unwrap();
        for split in [&s.train, &s.valid, &s.test] {
            let counts: Vec<usize> = (0..3).map(|c| split.iter().filter(|e| e.label == c).count()).collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_classification_dataset(4, 12, 5).unwrap(),
            generate_classification_dataset(4, 12, 5).unwrap()
        );
        assert_eq!(
            generate_translation_dataset(20, 5).unwrap(),
            generate_translation_dataset(20, 5).unwrap()
        );
        assert_ne!(
            generate_classification_dataset(4, 12, 5).unwrap(),
            generate_classification_dataset(4, 12, 6).unwrap()
        );
    }

    #[test]
    fn targets_follow_the_rewrite() {
        let t = generate_translation_dataset(50, 1).unwrap();
        for ex in t.train.iter().chain(&t.valid).chain(&t.test) {
            assert_eq!(rewrite_lang_a(&ex.source), ex.target);
        }
    }

    #[test]
    fn rewrite_rules() {
        assert_eq!(
            rewrite_lang_a("let userCount = 4 ; print userCount ; call maxNode with sizeItem ;"),
            "int userCount = 4 ; printf ( userCount ) ; maxNode ( sizeItem ) ;"
        );
        assert_eq!(rewrite_lang_a("x + 1"), "x + 1");
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_classification_dataset(1, 20, 0).is_err());
        assert!(generate_classification_dataset(4, 9, 0).is_err());
        assert!(generate_translation_dataset(9, 0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, "{\"text\":\"a b\",\"label\":1}\n\n{\"text\":\"c\",\"label\":0}\n").unwrap();
        let rows: Vec<ClassificationExample> = read_jsonl(&p).unwrap();
        assert_eq!(rows.len(), 2);
        std::fs::write(&p, "{\"text\":1}\n").unwrap();
        assert!(matches!(read_jsonl::<ClassificationExample>(&p), Err(Error::Parse(_))));
    }
}
