//! Masked-grapheme pretraining: a bidirectional Transformer encoder over
//! word spellings, trained to recover corrupted graphemes.
//!
//! Corruption follows the standard masked-LM recipe: a fixed fraction of
//! maskable positions per word (at least one) is selected without
//! replacement; each selected grapheme becomes the mask token with
//! probability 0.8, a random regular grapheme with 0.1, and stays itself
//! with 0.1. Only regular tokens are maskable; padding and reserved ids
//! are never corrupted and never scored.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Vocabulary, PAD_ID};
use crate::fmath;
use crate::models::ModelError;
use crate::rng::{SeedRng, Stream};
use crate::tensor::{Array, Init, ParamGroup, ParamStore, Tape, TensorRef, IGNORE_ID};
use crate::train::{Adam, AdamConfig, TrainError};
use crate::transformer::{
    encoder_layer, stack_bias, AttentionMask, AttentionParams, Dropout, EncoderLayerParams,
    FfnParams, ModelConfig, NormParams,
};

/// Fixed-width batch of id rows, padded with `<pad>` and tracking which
/// positions are real.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub ids: Vec<u32>,
    /// Per-position language indices, parallel to `ids`; `None` when the
    /// model has no language embedding.
    pub lang_ids: Option<Vec<u32>>,
    pub valid: Vec<Vec<bool>>,
    pub batch: usize,
    pub t: usize,
}

/// Pad id rows to a common width. `langs` gives one language index per row.
pub fn pad_rows(rows: &[Vec<u32>], langs: Option<&[u32]>) -> PaddedBatch {
    let batch = rows.len();
    let t = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut ids = Vec::with_capacity(batch * t);
    let mut lang_ids = langs.map(|_| Vec::with_capacity(batch * t));
    let mut valid = Vec::with_capacity(batch);
    for (r, row) in rows.iter().enumerate() {
        ids.extend_from_slice(row);
        ids.extend(core::iter::repeat(PAD_ID).take(t - row.len()));
        if let (Some(out), Some(ls)) = (lang_ids.as_mut(), langs) {
            out.extend(core::iter::repeat(ls[r]).take(t));
        }
        let mut v = vec![true; row.len()];
        v.resize(t, false);
        valid.push(v);
    }
    PaddedBatch {
        ids,
        lang_ids,
        valid,
        batch,
        t,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    /// Replaced by the mask token.
    Mask,
    /// Replaced by a uniformly random regular token.
    Random,
    /// Left unchanged but still predicted.
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    /// Ids after corruption; feed these to the encoder.
    pub input_ids: Vec<u32>,
    /// Original ids at selected positions, [`IGNORE_ID`] elsewhere.
    pub target_ids: Vec<u32>,
    /// Selected positions in ascending order with the action applied.
    pub actions: Vec<(usize, MaskAction)>,
}

/// Corrupt one word. Exactly `max(1, round(ratio * maskable))` positions
/// are chosen without replacement among maskable ids; a word with no
/// maskable position comes back unchanged. Draw order is fixed (selection
/// first, then one action draw per position in ascending order), so a
/// seeded RNG reproduces the corruption exactly.
pub fn apply_masking(
    ids: &[u32],
    vocab: &Vocabulary,
    ratio: f32,
    rng: &mut SeedRng,
) -> MaskedExample {
    let maskable: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| vocab.is_maskable(id))
        .map(|(i, _)| i)
        .collect();
    let mut out = MaskedExample {
        input_ids: ids.to_vec(),
        target_ids: vec![IGNORE_ID; ids.len()],
        actions: Vec::new(),
    };
    if maskable.is_empty() {
        return out;
    }
    let count = (fmath::round(ratio * maskable.len() as f32) as usize).max(1);
    let count = count.min(maskable.len());
    let chosen = rng.sample_indices(maskable.len(), count);
    for sel in chosen {
        let pos = maskable[sel];
        let u = rng.next_f32();
        let action = if u < 0.8 {
            MaskAction::Mask
        } else if u < 0.9 {
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        out.target_ids[pos] = ids[pos];
        out.input_ids[pos] = match action {
            MaskAction::Mask => crate::data::MASK_ID,
            MaskAction::Random => vocab.first_regular() + rng.index(vocab.num_regular()) as u32,
            MaskAction::Keep => ids[pos],
        };
        out.actions.push((pos, action));
    }
    out
}

/// Register the encoder parameters under `gbert.*`; `with_mlm_head` adds
/// the pretraining prediction head, which the G2P variants do not carry.
pub fn register_gbert_params(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    vocab_size: usize,
    with_mlm_head: bool,
) -> Result<(), ModelError> {
    let d = cfg.d_model;
    let g = ParamGroup::Encoder;
    store.register("gbert.tok_emb", &[vocab_size, d], Init::Embedding, g)?;
    if cfg.num_languages > 0 {
        store.register("gbert.lang_emb", &[cfg.num_languages, d], Init::Embedding, g)?;
    }
    for i in 0..cfg.gbert_layers {
        register_encoder_layer(store, &format!("gbert.enc.{i}"), d, cfg.d_ffn, g)?;
    }
    if with_mlm_head {
        store.register("gbert.mlm.w", &[d, vocab_size], Init::Glorot, g)?;
        store.register("gbert.mlm.b", &[vocab_size], Init::Constant(0.0), g)?;
    }
    Ok(())
}

pub(crate) fn register_attention(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    group: ParamGroup,
) -> Result<(), ModelError> {
    for w in ["wq", "wk", "wv", "wo"] {
        store.register(&format!("{prefix}.{w}"), &[d, d], Init::Glorot, group)?;
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.register(&format!("{prefix}.{b}"), &[d], Init::Constant(0.0), group)?;
    }
    Ok(())
}

pub(crate) fn register_norm(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    group: ParamGroup,
) -> Result<(), ModelError> {
    store.register(&format!("{prefix}.gain"), &[d], Init::Constant(1.0), group)?;
    store.register(&format!("{prefix}.bias"), &[d], Init::Constant(0.0), group)?;
    Ok(())
}

pub(crate) fn register_ffn(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    d_ffn: usize,
    group: ParamGroup,
) -> Result<(), ModelError> {
    store.register(&format!("{prefix}.w1"), &[d, d_ffn], Init::Glorot, group)?;
    store.register(&format!("{prefix}.b1"), &[d_ffn], Init::Constant(0.0), group)?;
    store.register(&format!("{prefix}.w2"), &[d_ffn, d], Init::Glorot, group)?;
    store.register(&format!("{prefix}.b2"), &[d], Init::Constant(0.0), group)?;
    Ok(())
}

fn register_encoder_layer(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    d_ffn: usize,
    group: ParamGroup,
) -> Result<(), ModelError> {
    register_attention(store, &format!("{prefix}.attn"), d, group)?;
    register_norm(store, &format!("{prefix}.ln1"), d, group)?;
    register_ffn(store, &format!("{prefix}.ffn"), d, d_ffn, group)?;
    register_norm(store, &format!("{prefix}.ln2"), d, group)
}

pub(crate) fn attention_refs(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
) -> Result<AttentionParams, ModelError> {
    let mut get = |suffix: &str| -> Result<TensorRef, ModelError> {
        let name = format!("{prefix}.{suffix}");
        let id = store
            .lookup(&name)
            .ok_or(ModelError::MissingParam { name })?;
        Ok(tape.param(store, id))
    };
    Ok(AttentionParams {
        wq: get("wq")?,
        bq: get("bq")?,
        wk: get("wk")?,
        bk: get("bk")?,
        wv: get("wv")?,
        bv: get("bv")?,
        wo: get("wo")?,
        bo: get("bo")?,
    })
}

pub(crate) fn norm_refs(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
) -> Result<NormParams, ModelError> {
    let mut get = |suffix: &str| -> Result<TensorRef, ModelError> {
        let name = format!("{prefix}.{suffix}");
        let id = store
            .lookup(&name)
            .ok_or(ModelError::MissingParam { name })?;
        Ok(tape.param(store, id))
    };
    Ok(NormParams {
        gain: get("gain")?,
        bias: get("bias")?,
    })
}

pub(crate) fn ffn_refs(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
) -> Result<FfnParams, ModelError> {
    let mut get = |suffix: &str| -> Result<TensorRef, ModelError> {
        let name = format!("{prefix}.{suffix}");
        let id = store
            .lookup(&name)
            .ok_or(ModelError::MissingParam { name })?;
        Ok(tape.param(store, id))
    };
    Ok(FfnParams {
        w1: get("w1")?,
        b1: get("b1")?,
        w2: get("w2")?,
        b2: get("b2")?,
    })
}

pub(crate) fn encoder_layer_refs(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
) -> Result<EncoderLayerParams, ModelError> {
    Ok(EncoderLayerParams {
        attn: attention_refs(tape, store, &format!("{prefix}.attn"))?,
        ln1: norm_refs(tape, store, &format!("{prefix}.ln1"))?,
        ffn: ffn_refs(tape, store, &format!("{prefix}.ffn"))?,
        ln2: norm_refs(tape, store, &format!("{prefix}.ln2"))?,
    })
}

fn lookup(store: &ParamStore, name: &str) -> Result<crate::tensor::ParamId, ModelError> {
    store.lookup(name).ok_or_else(|| ModelError::MissingParam {
        name: name.into(),
    })
}

/// Run the pretrained-encoder stack out of `store` (parameters under
/// `gbert.*`), returning the final layer's output `[batch, t, d]`.
pub fn gbert_encode_with(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &PaddedBatch,
    drop: &mut Dropout,
) -> Result<TensorRef, ModelError> {
    if batch.t > cfg.max_len {
        return Err(ModelError::TooLong {
            len: batch.t,
            max: cfg.max_len,
        });
    }
    let d = cfg.d_model;
    let tok_table = {
        let id = lookup(store, "gbert.tok_emb")?;
        tape.param(store, id)
    };
    let e = tape.embedding(tok_table, &batch.ids)?;
    let mut x = tape.reshape(e, &[batch.batch, batch.t, d])?;
    if cfg.num_languages > 0 {
        let lang_ids = batch.lang_ids.as_ref().ok_or(ModelError::MissingParam {
            name: "language indices for a language-aware encoder".into(),
        })?;
        let lang_table = {
            let id = lookup(store, "gbert.lang_emb")?;
            tape.param(store, id)
        };
        let le = tape.embedding(lang_table, lang_ids)?;
        let le = tape.reshape(le, &[batch.batch, batch.t, d])?;
        x = tape.add(x, le)?;
    }
    let pos = tape.constant(crate::transformer::sinusoidal_positions(batch.t, d));
    x = tape.add_broadcast(x, pos)?;
    x = drop.apply(tape, x);

    let masks: Vec<AttentionMask> = batch
        .valid
        .iter()
        .map(|v| AttentionMask::padding(batch.t, v))
        .collect();
    let bias = tape.constant(stack_bias(&masks)?);
    for i in 0..cfg.gbert_layers {
        let params = encoder_layer_refs(tape, store, &format!("gbert.enc.{i}"))?;
        x = encoder_layer(tape, x, &params, cfg.num_heads, Some(bias), drop)?;
    }
    Ok(x)
}

/// Grapheme-prediction logits `[batch * t, vocab]` from encoder output.
pub fn mlm_logits(
    tape: &mut Tape,
    store: &ParamStore,
    hb: TensorRef,
    batch: usize,
    t: usize,
) -> Result<TensorRef, ModelError> {
    let d = tape.value(hb).last_dim();
    let flat = tape.reshape(hb, &[batch * t, d])?;
    let w = {
        let id = lookup(store, "gbert.mlm.w")?;
        tape.param(store, id)
    };
    let b = {
        let id = lookup(store, "gbert.mlm.b")?;
        tape.param(store, id)
    };
    let logits = tape.matmul(flat, w)?;
    Ok(tape.add_broadcast(logits, b)?)
}

/// Count argmax hits at scored positions: `(correct, total)`.
pub fn masked_accuracy(logits: &Array, targets: &[u32]) -> (usize, usize) {
    let classes = logits.last_dim();
    let mut correct = 0;
    let mut total = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == IGNORE_ID {
            continue;
        }
        let row = &logits.data()[r * classes..(r + 1) * classes];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best as u32 == t {
            correct += 1;
        }
        total += 1;
    }
    (correct, total)
}

/// A pretrained grapheme encoder: parameters, vocabulary, and the language
/// list (empty for monolingual models).
#[derive(Debug, Clone)]
pub struct GbertModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub languages: Vec<String>,
    pub store: ParamStore,
}

impl GbertModel {
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        languages: Vec<String>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut config = config;
        config.num_languages = languages.len();
        config.validate()?;
        let mut store = ParamStore::new(seed);
        register_gbert_params(&mut store, &config, vocab.size(), true)?;
        Ok(GbertModel {
            config,
            vocab,
            languages,
            store,
        })
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        batch: &PaddedBatch,
        drop: &mut Dropout,
    ) -> Result<TensorRef, ModelError> {
        gbert_encode_with(tape, &self.store, &self.config, batch, drop)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub mask_ratio: f32,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Steps between validation passes (also the logging cadence).
    pub eval_interval: usize,
    /// Consecutive validations without improvement before stopping;
    /// 0 disables early stopping.
    pub patience: usize,
    pub lr: f32,
    pub grad_clip: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ModelConfig::default(),
            mask_ratio: 0.2,
            batch_size: 128,
            max_steps: 20_000,
            eval_interval: 500,
            patience: 5,
            lr: 1e-4,
            grad_clip: 1.0,
            seed: 1,
        }
    }
}

/// Words to pretrain on; `langs[i]` indexes `languages` for `words[i]`.
/// Leave `languages` empty for a monolingual model.
#[derive(Debug, Clone, Default)]
pub struct PretrainData {
    pub words: Vec<String>,
    pub langs: Vec<u32>,
    pub languages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainLogRecord {
    pub step: usize,
    pub train_loss: f32,
    pub valid_loss: f32,
    pub masked_acc: f32,
}

pub struct PretrainOutcome {
    pub model: GbertModel,
    pub log: Vec<PretrainLogRecord>,
    pub best_valid_loss: f32,
    pub best_masked_acc: f32,
    pub steps_run: usize,
    /// Words dropped for exceeding `max_len`.
    pub dropped_too_long: usize,
}

/// Masked-grapheme pretraining over a wordlist. Deduplicates, splits 9:1
/// into train/validation, and early-stops on validation loss; the returned
/// model carries the best-validation parameters. Validation masks are
/// redrawn from the same substream every pass, so scores across
/// validations are comparable.
pub fn pretrain(data: &PretrainData, cfg: &PretrainConfig) -> Result<PretrainOutcome, TrainError> {
    if !(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0) {
        return Err(TrainError::BadConfig("mask_ratio must lie in (0, 1)"));
    }
    if cfg.batch_size == 0 || cfg.max_steps == 0 || cfg.eval_interval == 0 {
        return Err(TrainError::BadConfig(
            "batch_size, max_steps, and eval_interval must be positive",
        ));
    }
    if data.words.len() != data.langs.len() && !data.languages.is_empty() {
        return Err(TrainError::BadConfig(
            "words and language indices must be parallel",
        ));
    }

    // Canonical corpus: unique (word, language) pairs, length-filtered.
    let mut pairs: Vec<(String, u32)> = data
        .words
        .iter()
        .cloned()
        .zip(if data.languages.is_empty() {
            vec![0u32; data.words.len()]
        } else {
            data.langs.clone()
        })
        .collect();
    pairs.sort();
    pairs.dedup();
    let before = pairs.len();
    pairs.retain(|(w, _)| {
        let n = w.chars().count();
        n > 0 && n <= cfg.model.max_len
    });
    let dropped_too_long = before - pairs.len();
    if pairs.len() < 2 {
        return Err(TrainError::DataTooSmall(
            "pretraining needs at least two usable words",
        ));
    }

    let vocab = Vocabulary::build(
        pairs.iter().flat_map(|(w, _)| w.chars().map(String::from)),
        &[],
    );
    let model = GbertModel::new(cfg.model.clone(), vocab, data.languages.clone(), cfg.seed)?;
    let GbertModel {
        config,
        vocab,
        languages,
        mut store,
    } = model;

    let n_valid = (pairs.len() / 10).max(1);
    let n_train = pairs.len() - n_valid;
    let split = crate::data::sample_split(&pairs, &[n_train, n_valid], cfg.seed)?;
    let (train, valid) = (&split[0], &split[1]);

    let encode = |word: &str| -> Vec<u32> {
        word.chars()
            .map(|c| vocab.id_or_unk(&String::from(c)))
            .collect()
    };
    let train_ids: Vec<(Vec<u32>, u32)> =
        train.iter().map(|(w, l)| (encode(w), *l)).collect();
    let valid_ids: Vec<(Vec<u32>, u32)> =
        valid.iter().map(|(w, l)| (encode(w), *l)).collect();

    let mut adam = Adam::new(
        &store,
        AdamConfig {
            grad_clip: cfg.grad_clip,
            ..AdamConfig::default()
        },
        cfg.lr,
        cfg.lr,
    );
    let mut batch_rng = SeedRng::for_stream(cfg.seed, Stream::Batches);
    let mut mask_rng = SeedRng::for_stream(cfg.seed, Stream::Masking);
    let mut drop_rng = SeedRng::for_stream(cfg.seed, Stream::Dropout);

    let has_langs = config.num_languages > 0;
    let run_batch = |store: &ParamStore,
                     items: &[(Vec<u32>, u32)],
                     mask_rng: &mut SeedRng,
                     drop: &mut Dropout|
     -> Result<(Tape, TensorRef, Vec<u32>), TrainError> {
        let mut rows = Vec::with_capacity(items.len());
        let mut targets = Vec::new();
        let mut langs = Vec::with_capacity(items.len());
        let mut masked = Vec::with_capacity(items.len());
        for (ids, l) in items {
            masked.push(apply_masking(ids, &vocab, cfg.mask_ratio, mask_rng));
            langs.push(*l);
        }
        let t = masked
            .iter()
            .map(|m| m.input_ids.len())
            .max()
            .unwrap_or(1);
        for m in &masked {
            rows.push(m.input_ids.clone());
            targets.extend_from_slice(&m.target_ids);
            targets.extend(core::iter::repeat(IGNORE_ID).take(t - m.target_ids.len()));
        }
        let padded = pad_rows(&rows, has_langs.then_some(langs.as_slice()));
        let mut tape = Tape::new();
        let hb = gbert_encode_with(&mut tape, store, &config, &padded, drop)?;
        let logits = mlm_logits(&mut tape, store, hb, padded.batch, padded.t)?;
        Ok((tape, logits, targets))
    };

    let evaluate = |store: &ParamStore| -> Result<(f32, f32), TrainError> {
        let mut vrng = SeedRng::for_stream(cfg.seed, Stream::ValidMasking);
        let mut loss_sum = 0.0f64;
        let mut n_rows = 0usize;
        let mut correct = 0usize;
        let mut total = 0usize;
        for chunk in valid_ids.chunks(cfg.batch_size) {
            let (mut tape, logits, targets) =
                run_batch(store, chunk, &mut vrng, &mut Dropout::off())?;
            let loss = tape.cross_entropy(logits, &targets, 0.0)?;
            let n = targets.iter().filter(|&&t| t != IGNORE_ID).count();
            loss_sum += tape.value(loss).item() as f64 * n as f64;
            n_rows += n;
            let (c, tot) = masked_accuracy(tape.value(logits), &targets);
            correct += c;
            total += tot;
        }
        Ok((
            (loss_sum / n_rows.max(1) as f64) as f32,
            correct as f32 / total.max(1) as f32,
        ))
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut log = Vec::new();
    let mut running_loss = 0.0f64;
    let mut running_count = 0usize;
    let mut best_valid = f32::INFINITY;
    let mut best_acc = 0.0f32;
    let mut best_store = store.clone();
    let mut stall = 0usize;
    let mut steps_run = 0usize;

    for step in 1..=cfg.max_steps {
        let mut items: Vec<(Vec<u32>, u32)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(train_ids.len()) {
            if cursor >= order.len() {
                order = (0..train_ids.len()).collect();
                batch_rng.shuffle(&mut order);
                cursor = 0;
            }
            items.push(train_ids[order[cursor]].clone());
            cursor += 1;
        }
        let (mut tape, logits, targets) = run_batch(
            &store,
            &items,
            &mut mask_rng,
            &mut Dropout::train(config.dropout_p, &mut drop_rng),
        )?;
        let loss = tape.cross_entropy(logits, &targets, 0.0)?;
        running_loss += tape.value(loss).item() as f64;
        running_count += 1;
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut store);
        adam.step(&mut store)?;
        store.zero_grads();
        steps_run = step;

        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let (valid_loss, acc) = evaluate(&store)?;
            log.push(PretrainLogRecord {
                step,
                train_loss: (running_loss / running_count.max(1) as f64) as f32,
                valid_loss,
                masked_acc: acc,
            });
            running_loss = 0.0;
            running_count = 0;
            if valid_loss < best_valid {
                best_valid = valid_loss;
                best_acc = acc;
                best_store = store.clone();
                stall = 0;
            } else {
                stall += 1;
                if cfg.patience > 0 && stall >= cfg.patience {
                    break;
                }
            }
        }
    }

    Ok(PretrainOutcome {
        model: GbertModel {
            config,
            vocab,
            languages,
            store: best_store,
        },
        log,
        best_valid_loss: best_valid,
        best_masked_acc: best_acc,
        steps_run,
        dropped_too_long,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MASK_ID;

    fn small_vocab() -> Vocabulary {
        Vocabulary::build(["a", "b", "c", "d", "e"], &[])
    }

    #[test]
    fn masking_count_follows_rounding_rule() {
        let vocab = small_vocab();
        let mut rng = SeedRng::for_stream(9, Stream::Masking);
        for (len, want) in [(1usize, 1usize), (2, 1), (5, 1), (8, 2), (10, 2), (13, 3)] {
            let ids: Vec<u32> = (0..len).map(|i| 5 + (i % 5) as u32).collect();
            let m = apply_masking(&ids, &vocab, 0.2, &mut rng);
            assert_eq!(m.actions.len(), want, "len {len}");
            assert_eq!(
                m.target_ids.iter().filter(|&&t| t != IGNORE_ID).count(),
                want
            );
        }
    }

    #[test]
    fn masking_skips_reserved_positions() {
        let vocab = small_vocab();
        let mut rng = SeedRng::for_stream(3, Stream::Masking);
        // PAD and UNK are not maskable; only the two regular ids are.
        let ids = vec![PAD_ID, 5, crate::data::UNK_ID, 6];
        for _ in 0..50 {
            let m = apply_masking(&ids, &vocab, 0.5, &mut rng);
            for (pos, _) in &m.actions {
                assert!(*pos == 1 || *pos == 3, "corrupted reserved position");
            }
            assert_eq!(m.input_ids[0], PAD_ID);
            assert_eq!(m.input_ids[2], crate::data::UNK_ID);
        }
    }

    #[test]
    fn masking_without_maskable_positions_is_identity() {
        let vocab = small_vocab();
        let mut rng = SeedRng::for_stream(3, Stream::Masking);
        let ids = vec![PAD_ID, crate::data::BOS_ID];
        let m = apply_masking(&ids, &vocab, 0.2, &mut rng);
        assert!(m.actions.is_empty());
        assert_eq!(m.input_ids, ids);
    }

    #[test]
    fn masking_actions_change_inputs_as_declared() {
        let vocab = small_vocab();
        let mut rng = SeedRng::for_stream(17, Stream::Masking);
        let ids: Vec<u32> = (0..40).map(|i| 5 + (i % 5) as u32).collect();
        let mut saw = [false; 3];
        for _ in 0..200 {
            let m = apply_masking(&ids, &vocab, 0.2, &mut rng);
            for &(pos, action) in &m.actions {
                assert_eq!(m.target_ids[pos], ids[pos], "target keeps the original");
                match action {
                    MaskAction::Mask => {
                        assert_eq!(m.input_ids[pos], MASK_ID);
                        saw[0] = true;
                    }
                    MaskAction::Random => {
                        assert!(vocab.is_maskable(m.input_ids[pos]));
                        saw[1] = true;
                    }
                    MaskAction::Keep => {
                        assert_eq!(m.input_ids[pos], ids[pos]);
                        saw[2] = true;
                    }
                }
            }
        }
        assert!(saw.iter().all(|&s| s), "all three actions should occur");
    }

    #[test]
    fn masking_is_reproducible_per_seed() {
        let vocab = small_vocab();
        let ids: Vec<u32> = (0..12).map(|i| 5 + (i % 5) as u32).collect();
        let mut a = SeedRng::for_stream(5, Stream::Masking);
        let mut b = SeedRng::for_stream(5, Stream::Masking);
        for _ in 0..20 {
            assert_eq!(
                apply_masking(&ids, &vocab, 0.2, &mut a),
                apply_masking(&ids, &vocab, 0.2, &mut b)
            );
        }
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            gbert_layers: 2,
            d_model: 16,
            num_heads: 2,
            d_ffn: 32,
            dropout_p: 0.1,
            max_len: 16,
            num_languages: 0,
        }
    }

    #[test]
    fn encoder_and_head_shapes() {
        let vocab = small_vocab();
        let model = GbertModel::new(tiny_config(), vocab, Vec::new(), 7).unwrap();
        let batch = pad_rows(&[vec![5, 6, 7], vec![8, 9]], None);
        let mut tape = Tape::new();
        let hb = model.encode(&mut tape, &batch, &mut Dropout::off()).unwrap();
        assert_eq!(tape.value(hb).shape(), &[2, 3, 16]);
        let logits = mlm_logits(&mut tape, &model.store, hb, 2, 3).unwrap();
        assert_eq!(tape.value(logits).shape(), &[6, model.vocab.size()]);
        assert!(tape.value(logits).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn language_embedding_changes_output() {
        let vocab = small_vocab();
        let model = GbertModel::new(
            tiny_config(),
            vocab,
            vec!["<dut>".into(), "<eng>".into()],
            7,
        )
        .unwrap();
        let rows = [vec![5u32, 6, 7]];
        let b0 = pad_rows(&rows, Some(&[0]));
        let b1 = pad_rows(&rows, Some(&[1]));
        let mut tape = Tape::new();
        let h0 = model.encode(&mut tape, &b0, &mut Dropout::off()).unwrap();
        let h1 = model.encode(&mut tape, &b1, &mut Dropout::off()).unwrap();
        assert_ne!(tape.value(h0).data(), tape.value(h1).data());
    }

    #[test]
    fn too_long_input_is_rejected() {
        let vocab = small_vocab();
        let model = GbertModel::new(tiny_config(), vocab, Vec::new(), 7).unwrap();
        let batch = pad_rows(&[(0..17).map(|i| 5 + (i % 5) as u32).collect()], None);
        let mut tape = Tape::new();
        let err = model
            .encode(&mut tape, &batch, &mut Dropout::off())
            .unwrap_err();
        assert!(matches!(err, ModelError::TooLong { len: 17, max: 16 }));
    }

    #[test]
    fn pretraining_reduces_loss_on_tiny_corpus() {
        let words: Vec<String> = ["abcde", "bcdea", "cdeab", "deabc", "eabcd", "abcab", "cdecd"]
            .iter()
            .flat_map(|w| core::iter::repeat(w.to_string()).take(1))
            .collect();
        let cfg = PretrainConfig {
            model: tiny_config(),
            batch_size: 4,
            max_steps: 60,
            eval_interval: 10,
            patience: 0,
            lr: 3e-3,
            ..PretrainConfig::default()
        };
        let out = pretrain(
            &PretrainData {
                words,
                langs: Vec::new(),
                languages: Vec::new(),
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(out.steps_run, 60);
        let first = out.log.first().unwrap();
        let last = out.log.last().unwrap();
        assert!(
            last.train_loss < first.train_loss,
            "training loss should fall: {} -> {}",
            first.train_loss,
            last.train_loss
        );
        assert!(out.best_valid_loss.is_finite());
    }
}
