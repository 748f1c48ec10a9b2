//! Analytic forward-pass cost. Only matrix products are counted, as `2mkp`
//! for an `(m x k)(k x p)` product; softmax, LayerNorm, bias and residual
//! additions are left out. The merge itself is charged `2 N d`.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::transformer::ModelConfig;

/// Input length of every encoder layer, plus the length entering the merge
/// when there is one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LengthSchedule {
    pub layers: Vec<usize>,
    pub merge_input: Option<usize>,
}

impl LengthSchedule {
    /// Layers `1..=position` see `n`, the rest see `n_prime`; `None` means no
    /// merge and every layer sees `n`.
    pub fn new(layers: usize, n: usize, n_prime: usize, position: Option<usize>) -> Result<Self> {
        match position {
            None => Ok(Self::unmerged(layers, n)),
            Some(p) if p > layers => Err(Error::config(format!(
                "merge position {p} exceeds the layer count {layers}"
            ))),
            Some(p) => {
                if n_prime > n {
                    return Err(Error::config(format!(
                        "merged length {n_prime} exceeds the input length {n}"
                    )));
                }
                Ok(Self {
                    layers: (0..layers).map(|l| if l < p { n } else { n_prime }).collect(),
                    merge_input: Some(n),
                })
            }
        }
    }

    pub fn unmerged(layers: usize, n: usize) -> Self {
        Self {
            layers: vec![n; layers],
            merge_input: None,
        }
    }
}

/// Matmul FLOPs of one layer. The `cross_*` terms are zero for encoder
/// layers; `cross_qkv_proj` counts the query projection of the target and the
/// key/value projections of the memory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub qkv_proj: u64,
    pub attn_scores: u64,
    pub attn_apply: u64,
    pub out_proj: u64,
    pub cross_qkv_proj: u64,
    pub cross_attn_scores: u64,
    pub cross_attn_apply: u64,
    pub cross_out_proj: u64,
    pub ffnn: u64,
}

impl LayerFlops {
    fn parts(&self) -> [(&'static str, u64); 9] {
        [
            ("qkv_proj", self.qkv_proj),
            ("attn_scores", self.attn_scores),
            ("attn_apply", self.attn_apply),
            ("out_proj", self.out_proj),
            ("cross_qkv_proj", self.cross_qkv_proj),
            ("cross_attn_scores", self.cross_attn_scores),
            ("cross_attn_apply", self.cross_attn_apply),
            ("cross_out_proj", self.cross_out_proj),
            ("ffnn", self.ffnn),
        ]
    }

    pub fn total(&self) -> u64 {
        self.parts().iter().map(|(_, v)| v).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsBreakdown {
    pub encoder: Vec<LayerFlops>,
    pub decoder: Vec<LayerFlops>,
    pub merge: u64,
    pub output_proj: u64,
    /// Sum of each component over all layers, plus `merge` and `output_proj`.
    pub totals: BTreeMap<String, u64>,
    pub total: u64,
}

impl FlopsBreakdown {
    fn assemble(encoder: Vec<LayerFlops>, decoder: Vec<LayerFlops>, merge: u64, output_proj: u64) -> Self {
        let mut totals: BTreeMap<String, u64> = BTreeMap::new();
        for layer in encoder.iter().chain(&decoder) {
            for (k, v) in layer.parts() {
                *totals.entry(k.to_string()).or_default() += v;
            }
        }
        totals.insert("merge".into(), merge);
        totals.insert("output_proj".into(), output_proj);
        let total = totals.values().sum();
        Self {
            encoder,
            decoder,
            merge,
            output_proj,
            totals,
            total,
        }
    }
}

fn self_attention_layer(n: u64, d: u64, d_ff: u64) -> LayerFlops {
    LayerFlops {
        qkv_proj: 3 * 2 * n * d * d,
        attn_scores: 2 * n * n * d,
        attn_apply: 2 * n * n * d,
        out_proj: 2 * n * d * d,
        ffnn: 2 * n * d * d_ff + 2 * n * d_ff * d,
        ..LayerFlops::default()
    }
}

fn encoder_part(config: &ModelConfig, schedule: &LengthSchedule) -> Result<(Vec<LayerFlops>, u64)> {
    if schedule.layers.len() != config.layers {
        return Err(Error::config(format!(
            "schedule covers {} layers, model has {}",
            schedule.layers.len(),
            config.layers
        )));
    }
    let (d, d_ff) = (config.d_model as u64, config.d_ff as u64);
    let layers = schedule
        .layers
        .iter()
        .map(|&n| self_attention_layer(n as u64, d, d_ff))
        .collect();
    let merge = schedule.merge_input.map_or(0, |n| 2 * n as u64 * d);
    Ok((layers, merge))
}

pub fn count_encoder_flops(config: &ModelConfig, schedule: &LengthSchedule) -> Result<FlopsBreakdown> {
    let (encoder, merge) = encoder_part(config, schedule)?;
    Ok(FlopsBreakdown::assemble(encoder, Vec::new(), merge, 0))
}

/// Encoder plus a decoder of `tgt_len` positions attending over
/// `memory_len` memory positions, and the vocabulary projection. With no
/// target positions the decoder does not run and costs nothing.
pub fn count_encdec_flops(
    config: &ModelConfig,
    src_schedule: &LengthSchedule,
    tgt_len: usize,
    memory_len: usize,
) -> Result<FlopsBreakdown> {
    let (encoder, merge) = encoder_part(config, src_schedule)?;
    if tgt_len == 0 {
        return Ok(FlopsBreakdown::assemble(encoder, Vec::new(), merge, 0));
    }
    let (d, d_ff) = (config.d_model as u64, config.d_ff as u64);
    let (t, m) = (tgt_len as u64, memory_len as u64);
    let layer = LayerFlops {
        cross_qkv_proj: 2 * t * d * d + 2 * 2 * m * d * d,
        cross_attn_scores: 2 * t * m * d,
        cross_attn_apply: 2 * t * m * d,
        cross_out_proj: 2 * t * d * d,
        ..self_attention_layer(t, d, d_ff)
    };
    let output_proj = 2 * t * d * config.vocab_size as u64;
    Ok(FlopsBreakdown::assemble(
        encoder,
        vec![layer; config.layers],
        merge,
        output_proj,
    ))
}

/// `baseline / merged`, as an "x-times fewer FLOPs" factor.
pub fn total_ratio(baseline: f64, merged: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::contract("baseline FLOPs must be positive"));
    }
    if merged == 0.0 {
        return Err(Error::contract("savings ratio is undefined for zero merged FLOPs"));
    }
    Ok(baseline / merged)
}

pub fn savings_ratio(baseline: &FlopsBreakdown, merged: &FlopsBreakdown) -> Result<f64> {
    total_ratio(baseline.total as f64, merged.total as f64)
}
