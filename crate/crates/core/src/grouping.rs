//! Merge-group indices from word-id rows.
//!
//! A group is a maximal run of consecutive positions carrying the same
//! non-negative word id. Every special or padding position (word id `-1`)
//! is a group of its own.

use crate::error::{Error, Result};
use crate::tokenizer::TokenizedSequence;

/// Word id used for special and padding positions.
pub const SPECIAL: i64 = -1;

/// Sentinel prepended before the first column when looking for boundaries.
const SENTINEL: i64 = -2;

/// A `B x N` batch of word ids, row-major. Specials and pads hold `-1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordIdBatch {
    batch: usize,
    seq_len: usize,
    data: Vec<i64>,
}

impl WordIdBatch {
    /// Build from equal-length rows.
    ///
    /// Rejects ragged rows, values below `-1`, and non-negative ids that
    /// decrease along a row.
    pub fn from_rows(rows: &[Vec<i64>]) -> Result<Self> {
        let seq_len = rows.first().map_or(0, Vec::len);
        if !rows.is_empty() && seq_len == 0 {
            return Err(Error::contract("word-id rows must have length >= 1"));
        }
        let mut data = Vec::with_capacity(rows.len() * seq_len);
        for (b, row) in rows.iter().enumerate() {
            if row.len() != seq_len {
                return Err(Error::shape(
                    "WordIdBatch",
                    format!("row {b} has length {}, expected {seq_len}", row.len()),
                ));
            }
            let mut last = i64::MIN;
            for (p, &w) in row.iter().enumerate() {
                if w < SPECIAL {
                    return Err(Error::contract(format!(
                        "row {b} position {p}: word id {w} is below -1"
                    )));
                }
                if w >= 0 {
                    if w < last {
                        return Err(Error::contract(format!(
                            "row {b} position {p}: word id {w} follows {last}; ids must be non-decreasing"
                        )));
                    }
                    last = w;
                }
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            batch: rows.len(),
            seq_len,
            data,
        })
    }

    /// Right-pad tokenized sequences with `-1` to `seq_len`.
    pub fn from_sequences(seqs: &[&TokenizedSequence], seq_len: usize) -> Result<Self> {
        let rows = seqs
            .iter()
            .map(|s| {
                if s.len() > seq_len {
                    return Err(Error::shape(
                        "WordIdBatch::from_sequences",
                        format!("sequence of length {} exceeds padded length {seq_len}", s.len()),
                    ));
                }
                let mut row = s.word_id_row();
                row.resize(seq_len, SPECIAL);
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(&rows)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn row(&self, b: usize) -> &[i64] {
        &self.data[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

/// Per-position 0-based group ids and the group count of each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndices {
    batch: usize,
    seq_len: usize,
    data: Vec<usize>,
    counts: Vec<usize>,
}

impl GroupIndices {
    /// Build from explicit rows, checking that each starts at 0 and steps by
    /// 0 or +1.
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq_len = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * seq_len);
        let mut counts = Vec::with_capacity(rows.len());
        for (b, row) in rows.iter().enumerate() {
            if row.len() != seq_len || seq_len == 0 {
                return Err(Error::shape(
                    "GroupIndices",
                    format!("row {b} has length {}, expected {seq_len} >= 1", row.len()),
                ));
            }
            if row[0] != 0 || row.windows(2).any(|w| w[1] != w[0] && w[1] != w[0] + 1) {
                return Err(Error::contract(format!(
                    "row {b} is not a monotone 0-based group assignment: {row:?}"
                )));
            }
            counts.push(row[seq_len - 1] + 1);
            data.extend_from_slice(row);
        }
        Ok(Self {
            batch: rows.len(),
            seq_len,
            data,
            counts,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.data[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Largest group count over the batch.
    pub fn max_count(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.batch).map(|b| self.row(b).to_vec()).collect()
    }
}

/// Vectorized grouping.
///
/// Shift the ids right by one column behind a `-2` sentinel, mark a boundary
/// wherever an id differs from its predecessor or is `-1`, take the inclusive
/// prefix sum of the boundary flags and subtract one.
pub fn group_subwords(word_ids: &WordIdBatch) -> GroupIndices {
    let (batch, n) = (word_ids.batch, word_ids.seq_len);
    let prev: Vec<i64> = (0..batch)
        .flat_map(|b| std::iter::once(SENTINEL).chain(word_ids.row(b)[..n - 1].iter().copied()))
        .collect();
    let is_new: Vec<usize> = word_ids
        .data
        .iter()
        .zip(&prev)
        .map(|(&w, &p)| usize::from(w != p || w == SPECIAL))
        .collect();

    let mut data = Vec::with_capacity(batch * n);
    let mut counts = Vec::with_capacity(batch);
    for row in is_new.chunks(n.max(1)).take(batch) {
        let cumsum = row.iter().scan(0usize, |acc, &f| {
            *acc += f;
            Some(*acc)
        });
        data.extend(cumsum.map(|c| c - 1));
        counts.push(data.last().map_or(0, |&g| g + 1));
    }
    GroupIndices {
        batch,
        seq_len: n,
        data,
        counts,
    }
}

/// Reference grouping with explicit nested loops: for each position, walk
/// the members of the currently open group and join it only if every member
/// carries the same non-special id.
pub fn group_subwords_naive(word_ids: &WordIdBatch) -> GroupIndices {
    let (batch, n) = (word_ids.batch, word_ids.seq_len);
    let mut data = vec![0usize; batch * n];
    let mut counts = vec![0usize; batch];
    for b in 0..batch {
        let row = word_ids.row(b);
        let mut group = 0usize;
        let mut open_start = 0usize;
        for p in 0..n {
            let mut joins = p > 0;
            if joins {
                for q in open_start..p {
                    if row[q] != row[p] || row[q] == SPECIAL {
                        joins = false;
                        break;
                    }
                }
            }
            if p > 0 && !joins {
                group += 1;
                open_start = p;
            }
            data[b * n + p] = group;
        }
        counts[b] = if n == 0 { 0 } else { group + 1 };
    }
    GroupIndices {
        batch,
        seq_len: n,
        data,
        counts,
    }
}

/// Number of groups lying inside the first `valid_lens[b]` positions of each
/// row.
pub fn merged_lengths(groups: &GroupIndices, valid_lens: &[usize]) -> Result<Vec<usize>> {
    if valid_lens.len() != groups.batch {
        return Err(Error::shape(
            "merged_lengths",
            format!(
                "{} valid lengths for a batch of {}",
                valid_lens.len(),
                groups.batch
            ),
        ));
    }
    valid_lens
        .iter()
        .enumerate()
        .map(|(b, &len)| match len {
            0 => Ok(0),
            len if len <= groups.seq_len => Ok(groups.row(b)[len - 1] + 1),
            len => Err(Error::contract(format!(
                "valid length {len} exceeds sequence length {}",
                groups.seq_len
            ))),
        })
        .collect()
}
