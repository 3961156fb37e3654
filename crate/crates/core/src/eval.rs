//! Decoding and evaluation: Levenshtein distance, word/phoneme error
//! rates, seed aggregation, and greedy/beam phoneme decoding.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::data::{LexiconEntry, BOS_ID, EOS_ID};
use crate::models::{G2pModel, ModelError};
use crate::tensor::Tape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("hypothesis and reference counts differ: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("nothing to score")]
    Empty,
    #[error("total reference length is zero")]
    EmptyReferences,
}

/// Minimal number of unit-cost insertions, deletions, and substitutions
/// turning `a` into `b`. Two-row dynamic program.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Percentage of hypotheses that are not exactly their reference.
pub fn word_error_rate(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
) -> Result<f32, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if refs.is_empty() {
        return Err(EvalError::Empty);
    }
    let wrong = hyps.iter().zip(refs).filter(|(h, r)| h != r).count();
    Ok(100.0 * wrong as f32 / refs.len() as f32)
}

/// 100 · (sum of edit distances) / (sum of reference lengths). Can exceed
/// 100 for hypotheses much longer than their references.
pub fn phoneme_error_rate(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
) -> Result<f32, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if refs.is_empty() {
        return Err(EvalError::Empty);
    }
    let total_ref: usize = refs.iter().map(|r| r.len()).sum();
    if total_ref == 0 {
        return Err(EvalError::EmptyReferences);
    }
    let dist: usize = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| levenshtein(h, r))
        .sum();
    Ok(100.0 * dist as f32 / total_ref as f32)
}

/// Mean and sample (n-1) standard deviation; the deviation exists only
/// with two or more values.
pub fn mean_std(values: &[f32]) -> (f32, Option<f32>) {
    if values.is_empty() {
        return (f32::NAN, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    if values.len() < 2 {
        return (mean as f32, None);
    }
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / (n - 1.0);
    (mean as f32, Some(crate::fmath::sqrt64(var) as f32))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Emission cap; `None` means 2 · grapheme_len + 5.
    pub max_decode_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            max_decode_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub phonemes: Vec<String>,
    /// Total log-probability of the returned sequence (including its
    /// end-of-sequence step when not truncated).
    pub score: f64,
    /// True when the hypothesis hit the emission cap instead of `<eos>`.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
struct Hyp {
    ids: Vec<u32>,
    score: f64,
    truncated: bool,
}

/// Order: best score first; ties prefer shorter, then lexicographically
/// smaller id sequences.
fn hyp_order(a: &Hyp, b: &Hyp) -> core::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.ids.len().cmp(&b.ids.len()))
        .then_with(|| a.ids.cmp(&b.ids))
}

fn log_softmax_f64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max
        + crate::fmath::ln64(
            row.iter().map(|&v| crate::fmath::exp64(v as f64 - max)).sum::<f64>(),
        );
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Beam-search decoding (`beam_size` 1 is greedy). Hypotheses may only
/// emit regular phoneme tokens or `<eos>`; hitting the emission cap is a
/// recorded, non-fatal truncation.
pub fn decode(
    model: &G2pModel,
    word: &str,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput, ModelError> {
    let src = model.source_ids(word)?;
    let grapheme_len = word.chars().count();
    let cap = cfg
        .max_decode_len
        .unwrap_or(2 * grapheme_len + 5)
        .min(model.config.max_len.saturating_sub(1))
        .max(1);
    let beam = cfg.beam_size.max(1);
    let first = model.phoneme_vocab.first_regular();
    let vocab_size = model.phoneme_vocab.size() as u32;

    let mut live = vec![Hyp {
        ids: Vec::new(),
        score: 0.0,
        truncated: false,
    }];
    let mut done: Vec<Hyp> = Vec::new();

    for _ in 0..cap {
        let mut next: Vec<Hyp> = Vec::new();
        for h in &live {
            let mut dec_in = Vec::with_capacity(h.ids.len() + 1);
            dec_in.push(BOS_ID);
            dec_in.extend_from_slice(&h.ids);
            let mut tape = Tape::new();
            let logits = model.forward_logits(&mut tape, &src, &dec_in)?;
            let value = tape.value(logits);
            let v = value.last_dim();
            let row = &value.data()[(dec_in.len() - 1) * v..dec_in.len() * v];
            let lp = log_softmax_f64(row);

            done.push(Hyp {
                ids: h.ids.clone(),
                score: h.score + lp[EOS_ID as usize],
                truncated: false,
            });
            for id in first..vocab_size {
                let mut ids = Vec::with_capacity(h.ids.len() + 1);
                ids.extend_from_slice(&h.ids);
                ids.push(id);
                next.push(Hyp {
                    ids,
                    score: h.score + lp[id as usize],
                    truncated: false,
                });
            }
        }
        next.sort_by(hyp_order);
        next.truncate(beam);
        done.sort_by(hyp_order);
        done.truncate(beam);
        // Scores only fall with length, so once the best finished
        // hypothesis beats every live one nothing can improve.
        if next.is_empty()
            || done
                .first()
                .is_some_and(|d| next.first().is_none_or(|l| d.score >= l.score))
        {
            live = next;
            break;
        }
        live = next;
    }

    for mut h in live {
        h.truncated = true;
        done.push(h);
    }
    done.sort_by(hyp_order);
    let best = done.into_iter().next().unwrap_or(Hyp {
        ids: Vec::new(),
        score: f64::NEG_INFINITY,
        truncated: true,
    });
    Ok(DecodeOutput {
        phonemes: best
            .ids
            .iter()
            .map(|&id| {
                model
                    .phoneme_vocab
                    .token(id)
                    .expect("decoded ids come from the vocabulary")
                    .into()
            })
            .collect(),
        score: best.score,
        truncated: best.truncated,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub word: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub distance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub wer: f32,
    pub per: f32,
}

impl EvalReport {
    /// `word<TAB>ref<TAB>hyp<TAB>distance` lines (phonemes space-joined)
    /// with a WER/PER footer.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.word,
                r.reference.join(" "),
                r.hypothesis.join(" "),
                r.distance
            ));
        }
        out.push_str(&format!("# WER {:.2}\n# PER {:.2}\n", self.wer, self.per));
        out
    }
}

/// Decode every entry and score the result.
pub fn evaluate_model(
    model: &G2pModel,
    test: &[LexiconEntry],
    cfg: &DecodeConfig,
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rows = Vec::with_capacity(test.len());
    let mut refs = Vec::with_capacity(test.len());
    let mut hyps = Vec::with_capacity(test.len());
    for e in test {
        let out = decode(model, &e.word, cfg)?;
        rows.push(EvalRow {
            word: e.word.clone(),
            reference: e.phonemes.clone(),
            hypothesis: out.phonemes.clone(),
            distance: levenshtein(&out.phonemes, &e.phonemes),
        });
        refs.push(e.phonemes.clone());
        hyps.push(out.phonemes);
    }
    let wer = word_error_rate(&hyps, &refs)?;
    let per = phoneme_error_rate(&hyps, &refs)?;
    Ok(EvalReport { rows, wer, per })
}
