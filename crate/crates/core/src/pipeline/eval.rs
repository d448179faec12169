use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::{adjacent_duplicate_rate, bleu, cider_d, CiderCorpusStats};
use crate::model::{greedy_joint, truncate_at_period, DecodingMode, ImageFeatures, Model, TokenId};
use crate::synth::DatasetRecord;

/// How a caption is produced from a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "decoder")]
pub enum Decoder {
    /// One parallel pass, argmax per agent.
    NonAutoregressive,
    ArGreedy,
    ArBeam { width: usize },
}

impl Decoder {
    pub fn for_mode(mode: DecodingMode, beam_width: usize) -> Self {
        match mode {
            DecodingMode::NonAutoregressive => Decoder::NonAutoregressive,
            DecodingMode::Autoregressive => Decoder::ArBeam { width: beam_width },
        }
    }

    pub fn label(&self) -> String {
        match self {
            Decoder::NonAutoregressive => "na".into(),
            Decoder::ArGreedy => "ar-greedy".into(),
            Decoder::ArBeam { width } => format!("ar-beam-{width}"),
        }
    }
}

/// The caption for one image, cut at the first period (which is dropped).
pub fn caption(model: &Model, decoder: Decoder, feat: &ImageFeatures) -> Result<Vec<TokenId>> {
    let ctx = model.encode(feat)?;
    let max_len = model.config.num_agents;
    let tokens = match decoder {
        Decoder::NonAutoregressive => greedy_joint(&model.decode_na(&ctx)?)?.tokens().to_vec(),
        Decoder::ArGreedy => model.decode_ar_greedy(&ctx, max_len)?,
        Decoder::ArBeam { width } => model.decode_ar_beam(&ctx, width, max_len)?.tokens,
    };
    Ok(truncate_at_period(&tokens).to_vec())
}

/// Caption quality on one split. BLEU is the mean sentence-level score;
/// CIDEr-D document frequencies come from the split's own references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub decoder: String,
    pub num_images: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    pub cider_d: f64,
    pub duplicate_rate: f64,
    pub mean_length: f64,
}

pub fn evaluate(model: &Model, decoder: Decoder, records: &[&DatasetRecord], split: &str) -> Result<EvalReport> {
    if records.is_empty() {
        return invalid(format!("split {split} is empty"));
    }
    if let Some(r) = records.iter().find(|r| r.references.is_empty()) {
        return invalid(format!("image {} has no references to evaluate against", r.id));
    }
    let corpus: Vec<Vec<Vec<TokenId>>> = records.iter().map(|r| r.references.clone()).collect();
    let stats = CiderCorpusStats::build(&corpus)?;
    let captions: Vec<Vec<TokenId>> = records
        .par_iter()
        .map(|r| caption(model, decoder, &r.image))
        .collect::<Result<_>>()?;
    let (mut b1, mut b4, mut c) = (0.0, 0.0, 0.0);
    for (cap, r) in captions.iter().zip(records) {
        b1 += bleu(cap, &r.references, 1)?;
        b4 += bleu(cap, &r.references, 4)?;
        c += cider_d(cap, &r.references, &stats)?;
    }
    let n = records.len() as f64;
    Ok(EvalReport {
        split: split.to_string(),
        decoder: decoder.label(),
        num_images: records.len(),
        bleu1: b1 / n,
        bleu4: b4 / n,
        cider_d: c / n,
        duplicate_rate: adjacent_duplicate_rate(&captions),
        mean_length: captions.iter().map(|c| c.len() as f64).sum::<f64>() / n,
    })
}

/// Per-decoder single-image latency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub decoder: String,
    pub mean_ms: f64,
    /// Decoder-stack invocations per image.
    pub decoder_calls_per_image: f64,
    /// Emitted tokens per image, period included when produced.
    pub mean_emitted: f64,
    pub speedup_vs_ar_beam: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub num_images: usize,
    pub warmup: usize,
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub fn row(&self, decoder: &str) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.decoder == decoder)
    }
}

fn emitted(model: &Model, decoder: Decoder, ctx: &crate::autodiff::Tensor) -> Result<usize> {
    let max_len = model.config.num_agents;
    Ok(match decoder {
        Decoder::NonAutoregressive => greedy_joint(&model.decode_na(ctx)?)?.len(),
        Decoder::ArGreedy => model.decode_ar_greedy(ctx, max_len)?.len(),
        Decoder::ArBeam { width } => model.decode_ar_beam(ctx, width, max_len)?.tokens.len(),
    })
}

/// Times each decoder on one image at a time, without batching, after
/// `warmup` untimed runs. Encoding is included, feature generation is not.
pub fn bench_latency(
    student: &Model,
    teacher: &Model,
    images: &[&ImageFeatures],
    beam_width: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if images.is_empty() {
        return invalid("no images to time");
    }
    let decoders = [
        (student, Decoder::NonAutoregressive),
        (teacher, Decoder::ArGreedy),
        (teacher, Decoder::ArBeam { width: beam_width }),
    ];
    let mut rows = Vec::new();
    for (model, decoder) in decoders {
        for i in 0..warmup {
            let ctx = model.encode(images[i % images.len()])?;
            emitted(model, decoder, &ctx)?;
        }
        model.reset_decoder_calls();
        let (mut total_s, mut tokens) = (0.0, 0usize);
        for feat in images {
            let t = Instant::now();
            let ctx = model.encode(feat)?;
            tokens += emitted(model, decoder, &ctx)?;
            total_s += t.elapsed().as_secs_f64();
        }
        let n = images.len() as f64;
        rows.push(LatencyRow {
            decoder: decoder.label(),
            mean_ms: 1e3 * total_s / n,
            decoder_calls_per_image: model.decoder_calls() as f64 / n,
            mean_emitted: tokens as f64 / n,
            speedup_vs_ar_beam: 0.0,
        });
    }
    let beam_ms = rows[2].mean_ms;
    for r in &mut rows {
        r.speedup_vs_ar_beam = beam_ms / r.mean_ms;
    }
    Ok(LatencyReport {
        num_images: images.len(),
        warmup,
        rows,
    })
}
