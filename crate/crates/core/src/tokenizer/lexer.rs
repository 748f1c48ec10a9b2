//! Grammar-level pre-tokenization for C-family source text.

use serde::{Deserialize, Serialize};

/// One grammar-level token ("word") of the source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexeme {
    pub text: String,
    /// 0-based position among the lexemes of the sequence.
    pub index: usize,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Split `text` into lexemes.
///
/// Identifiers (`[A-Za-z_][A-Za-z0-9_]*`), integer and decimal literals, and
/// quoted string or character literals are single lexemes. Every other
/// non-whitespace character stands alone, so `==` yields two lexemes.
/// Whitespace only separates.
///
/// A quote that is not closed before the end of the line swallows the rest
/// of that line (trailing whitespace trimmed) as one lexeme.
pub fn pretokenize(text: &str) -> Vec<Lexeme> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let end_idx = if is_ident_start(c) {
            let mut j = i + 1;
            while j < chars.len() && is_ident_continue(chars[j].1) {
                j += 1;
            }
            j
        } else if c.is_ascii_digit() {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_ascii_digit() {
                j += 1;
            }
            // A fraction only counts when a digit follows the dot.
            if j + 1 < chars.len() && chars[j].1 == '.' && chars[j + 1].1.is_ascii_digit() {
                j += 2;
                while j < chars.len() && chars[j].1.is_ascii_digit() {
                    j += 1;
                }
            }
            j
        } else if c == '"' || c == '\'' {
            match scan_quoted(&chars, i, c) {
                Some(j) => j,
                None => {
                    // Unterminated: take the rest of the line.
                    let mut j = i + 1;
                    while j < chars.len() && chars[j].1 != '\n' {
                        j += 1;
                    }
                    let byte_end = byte_at(text, &chars, j);
                    let piece = text[start..byte_end].trim_end();
                    out.push(Lexeme {
                        text: piece.to_string(),
                        index: out.len(),
                    });
                    i = j;
                    continue;
                }
            }
        } else {
            i + 1
        };
        let byte_end = byte_at(text, &chars, end_idx);
        out.push(Lexeme {
            text: text[start..byte_end].to_string(),
            index: out.len(),
        });
        i = end_idx;
    }
    out
}

/// Index one past the closing quote, or `None` if the line ends first.
fn scan_quoted(chars: &[(usize, char)], open: usize, quote: char) -> Option<usize> {
    let mut j = open + 1;
    while j < chars.len() {
        match chars[j].1 {
            '\\' => j += 2,
            '\n' => return None,
            c if c == quote => return Some(j + 1),
            _ => j += 1,
        }
    }
    None
}

fn byte_at(text: &str, chars: &[(usize, char)], idx: usize) -> usize {
    chars.get(idx).map_or(text.len(), |&(b, _)| b)
}
