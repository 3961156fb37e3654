//! Adam optimization with per-group learning rates, and the supervised
//! G2P training loop (teacher forcing, early stopping on validation WER).

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::data::LexiconEntry;
use crate::eval::{decode, phoneme_error_rate, word_error_rate, DecodeConfig, EvalError};
use crate::models::{G2pModel, Mode, ModelError, StepRngs};
use crate::rng::{SeedRng, Stream};
use crate::tensor::{ParamGroup, ParamStore, Tape, TensorError, IGNORE_ID};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("non-finite gradient in `{name}` at optimizer step {step}")]
    NonFiniteGrad { name: String, step: usize },
    #[error("{0}")]
    DataTooSmall(&'static str),
    #[error("{0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            grad_clip: 1.0,
        }
    }
}

/// Bias-corrected Adam over a `ParamStore`, with one learning rate per
/// parameter group. Moment buffers are laid out in store order; the store
/// must not gain or lose parameters once the optimizer exists.
pub struct Adam {
    cfg: AdamConfig,
    lr_encoder: f32,
    lr_decoder: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: usize,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig, lr_encoder: f32, lr_decoder: f32) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| alloc::vec![0.0f32; p.value.numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            cfg,
            lr_encoder,
            lr_decoder,
            m,
            v,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update over every trainable parameter. Returns the pre-clip
    /// global gradient norm. Non-finite gradients abort before any
    /// parameter changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f32, TrainError> {
        assert_eq!(
            store.len(),
            self.m.len(),
            "optimizer built for a different parameter set"
        );
        let mut sq = 0.0f64;
        for (_, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            for &g in &p.grad {
                if !g.is_finite() {
                    return Err(TrainError::NonFiniteGrad {
                        name: p.name.clone(),
                        step: self.step + 1,
                    });
                }
                sq += g as f64 * g as f64;
            }
        }
        let norm = crate::fmath::sqrt64(sq) as f32;
        let scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };

        self.step += 1;
        let bc1 = 1.0 - powi64(self.cfg.beta1 as f64, self.step);
        let bc2 = 1.0 - powi64(self.cfg.beta2 as f64, self.step);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);

        let ids: Vec<_> = store.ids().collect();
        for (ix, id) in ids.into_iter().enumerate() {
            let lr = match store.get(id).group {
                ParamGroup::Encoder => self.lr_encoder,
                ParamGroup::Decoder => self.lr_decoder,
            };
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let m = &mut self.m[ix];
            let v = &mut self.v[ix];
            let data = p.value.data_mut();
            for j in 0..data.len() {
                let g = p.grad[j] * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = (m[j] as f64 / bc1) as f32;
                let v_hat = (v[j] as f64 / bc2) as f32;
                data[j] -= lr * m_hat / (crate::fmath::sqrt(v_hat) + eps);
            }
        }
        Ok(norm)
    }
}

fn powi64(base: f64, exp: usize) -> f64 {
    let mut out = 1.0;
    let mut b = base;
    let mut e = exp;
    while e > 0 {
        if e & 1 == 1 {
            out *= b;
        }
        b *= b;
        e >>= 1;
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f32,
    pub lr_decoder: f32,
    pub label_smoothing: f32,
    pub grad_clip: f32,
    /// Epochs without a validation-WER improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            batch_size: 32,
            lr_encoder: 3e-4,
            lr_decoder: 3e-4,
            label_smoothing: 0.1,
            grad_clip: 1.0,
            patience: 10,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub valid_wer: f32,
    pub valid_per: f32,
    pub lr_encoder: f32,
    pub lr_decoder: f32,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<TrainLogRecord>,
    pub best_epoch: usize,
    pub best_wer: f32,
    pub best_per: f32,
    pub epochs_run: usize,
}

fn validate_train_config(cfg: &TrainConfig) -> Result<(), TrainError> {
    if cfg.max_epochs == 0 || cfg.batch_size == 0 {
        return Err(TrainError::BadConfig(
            "max_epochs and batch_size must be positive",
        ));
    }
    if !(cfg.lr_encoder > 0.0 && cfg.lr_decoder > 0.0) {
        return Err(TrainError::BadConfig("learning rates must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.label_smoothing) {
        return Err(TrainError::BadConfig(
            "label_smoothing must lie in [0, 1)",
        ));
    }
    if cfg.patience == 0 {
        return Err(TrainError::BadConfig("patience must be at least 1"));
    }
    Ok(())
}

/// Check every grapheme and phoneme in `entries` against the model's
/// vocabularies, so mismatches surface before training instead of at some
/// arbitrary batch.
fn check_vocabulary(model: &G2pModel, entries: &[LexiconEntry]) -> Result<(), TrainError> {
    if !model.allow_unk {
        let mut missing = alloc::collections::BTreeSet::new();
        for e in entries {
            for c in e.word.chars() {
                let g = String::from(c);
                if model.grapheme_vocab.id(&g).is_none() {
                    missing.insert(g);
                }
            }
        }
        if let Some(first) = missing.iter().next().cloned() {
            return Err(ModelError::VocabMismatch {
                count: missing.len(),
                first,
            }
            .into());
        }
    }
    for e in entries {
        for p in &e.phonemes {
            if model.phoneme_vocab.id(p).is_none() {
                return Err(ModelError::UnknownPhoneme { symbol: p.clone() }.into());
            }
        }
    }
    Ok(())
}

/// Supervised training with teacher forcing. Batches bucket words of
/// similar length; batch order reshuffles every epoch. After each epoch
/// the validation set is decoded greedily and scored; the best-WER
/// parameters (earliest epoch on ties) are restored into `model` at the
/// end.
pub fn train_g2p(
    model: &mut G2pModel,
    train: &[LexiconEntry],
    valid: &[LexiconEntry],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    validate_train_config(cfg)?;
    if train.is_empty() {
        return Err(TrainError::DataTooSmall("empty training split"));
    }
    if valid.is_empty() {
        return Err(TrainError::DataTooSmall("empty validation split"));
    }
    check_vocabulary(model, train)?;
    check_vocabulary(model, valid)?;

    // Length buckets: stable order by grapheme count, chunked, with the
    // chunk order reshuffled each epoch.
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by_key(|&i| (train[i].word.chars().count(), i));
    let chunks: Vec<Vec<usize>> = order
        .chunks(cfg.batch_size)
        .map(|c| c.to_vec())
        .collect();

    let mut adam = Adam::new(
        &model.store,
        AdamConfig {
            grad_clip: cfg.grad_clip,
            ..AdamConfig::default()
        },
        cfg.lr_encoder,
        cfg.lr_decoder,
    );
    let mut batch_rng = SeedRng::for_stream(cfg.seed, Stream::Batches);
    let mut rngs = StepRngs::new(cfg.seed);
    let decode_cfg = DecodeConfig {
        beam_size: 1,
        max_decode_len: None,
    };

    let mut log = Vec::new();
    let mut best_wer = f32::INFINITY;
    let mut best_per = f32::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_store = model.store.clone();
    let mut stall = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut chunk_order: Vec<usize> = (0..chunks.len()).collect();
        batch_rng.shuffle(&mut chunk_order);

        let mut loss_sum = 0.0f64;
        let mut token_sum = 0usize;
        for &ci in &chunk_order {
            let entries: Vec<LexiconEntry> =
                chunks[ci].iter().map(|&i| train[i].clone()).collect();
            let batch = model.make_batch(&entries)?;
            let n_tokens = batch.targets.iter().filter(|&&t| t != IGNORE_ID).count();
            let mut tape = Tape::new();
            let loss = model.loss(
                &mut tape,
                &batch,
                Mode::Train { rngs: &mut rngs },
                cfg.label_smoothing,
            )?;
            loss_sum += tape.value(loss).item() as f64 * n_tokens as f64;
            token_sum += n_tokens;
            tape.backward(loss)?;
            tape.accumulate_param_grads(&mut model.store);
            adam.step(&mut model.store)?;
            model.store.zero_grads();
        }
        let train_loss = (loss_sum / token_sum.max(1) as f64) as f32;
        epochs_run = epoch;

        let mut refs = Vec::with_capacity(valid.len());
        let mut hyps = Vec::with_capacity(valid.len());
        for e in valid {
            let hyp = decode(model, &e.word, &decode_cfg)?;
            refs.push(e.phonemes.clone());
            hyps.push(hyp.phonemes);
        }
        let valid_wer = word_error_rate(&hyps, &refs)?;
        let valid_per = phoneme_error_rate(&hyps, &refs)?;

        log.push(TrainLogRecord {
            epoch,
            train_loss,
            valid_wer,
            valid_per,
            lr_encoder: cfg.lr_encoder,
            lr_decoder: cfg.lr_decoder,
        });

        if valid_wer < best_wer {
            best_wer = valid_wer;
            best_per = valid_per;
            best_epoch = epoch;
            best_store = model.store.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
    }

    model.store = best_store;
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_wer,
        best_per,
        epochs_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn store_with(values: &[(&str, &[f32], ParamGroup)]) -> ParamStore {
        let mut s = ParamStore::new(7);
        for (name, vals, group) in values {
            let id = s
                .register(name, &[vals.len()], Init::Constant(0.0), *group)
                .unwrap();
            s.get_mut(id).value.data_mut().copy_from_slice(vals);
        }
        s
    }

    fn set_grad(s: &mut ParamStore, name: &str, grad: &[f32]) {
        let id = s.lookup(name).unwrap();
        s.get_mut(id).grad.copy_from_slice(grad);
    }

    #[test]
    fn adam_defaults() {
        let c = AdamConfig::default();
        assert_eq!(c.beta1, 0.9);
        assert_eq!(c.beta2, 0.98);
        assert_eq!(c.eps, 1e-9);
        assert_eq!(c.grad_clip, 1.0);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut s = store_with(&[("x", &[1.5, -2.0], ParamGroup::Encoder)]);
        let mut adam = Adam::new(&s, AdamConfig::default(), 1e-3, 1e-3);
        let norm = adam.step(&mut s).unwrap();
        assert_eq!(norm, 0.0);
        let id = s.lookup("x").unwrap();
        assert_eq!(s.get(id).value.data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // Bias correction makes the first update lr * g/sqrt(g^2) = lr * sign(g).
        let mut s = store_with(&[("x", &[0.0, 0.0], ParamGroup::Decoder)]);
        set_grad(&mut s, "x", &[0.3, -0.04]);
        let mut adam = Adam::new(
            &s,
            AdamConfig {
                grad_clip: 0.0,
                ..AdamConfig::default()
            },
            0.5,
            1e-2,
        );
        adam.step(&mut s).unwrap();
        let id = s.lookup("x").unwrap();
        let x = s.get(id).value.data();
        assert!((x[0] + 1e-2).abs() < 1e-5, "got {}", x[0]);
        assert!((x[1] - 1e-2).abs() < 1e-5, "got {}", x[1]);
    }

    #[test]
    fn groups_use_their_own_learning_rate() {
        let mut s = store_with(&[
            ("e", &[0.0], ParamGroup::Encoder),
            ("d", &[0.0], ParamGroup::Decoder),
        ]);
        set_grad(&mut s, "e", &[1.0]);
        set_grad(&mut s, "d", &[1.0]);
        let mut adam = Adam::new(
            &s,
            AdamConfig {
                grad_clip: 0.0,
                ..AdamConfig::default()
            },
            0.1,
            0.001,
        );
        adam.step(&mut s).unwrap();
        let e = s.get(s.lookup("e").unwrap()).value.data()[0];
        let d = s.get(s.lookup("d").unwrap()).value.data()[0];
        assert!((e + 0.1).abs() < 1e-6, "encoder step {e}");
        assert!((d + 0.001).abs() < 1e-7, "decoder step {d}");
    }

    #[test]
    fn clipping_reports_preclip_norm_and_scales_gradients() {
        let mut a = store_with(&[("x", &[0.0, 0.0], ParamGroup::Encoder)]);
        set_grad(&mut a, "x", &[3.0, 4.0]);
        let mut adam_a = Adam::new(
            &a,
            AdamConfig {
                grad_clip: 1.0,
                ..AdamConfig::default()
            },
            1e-2,
            1e-2,
        );
        let norm = adam_a.step(&mut a).unwrap();
        assert!((norm - 5.0).abs() < 1e-6);

        // Pre-scaled gradients with clipping off must produce the same update.
        let mut b = store_with(&[("x", &[0.0, 0.0], ParamGroup::Encoder)]);
        set_grad(&mut b, "x", &[3.0 / 5.0, 4.0 / 5.0]);
        let mut adam_b = Adam::new(
            &b,
            AdamConfig {
                grad_clip: 0.0,
                ..AdamConfig::default()
            },
            1e-2,
            1e-2,
        );
        adam_b.step(&mut b).unwrap();
        let xa = a.get(a.lookup("x").unwrap()).value.data().to_vec();
        let xb = b.get(b.lookup("x").unwrap()).value.data().to_vec();
        assert_eq!(xa, xb);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = store_with(&[("gbert.w", &[1.0], ParamGroup::Encoder)]);
        s.freeze_prefix("gbert.");
        set_grad(&mut s, "gbert.w", &[10.0]);
        let mut adam = Adam::new(&s, AdamConfig::default(), 0.5, 0.5);
        let norm = adam.step(&mut s).unwrap();
        assert_eq!(norm, 0.0, "frozen grads stay out of the norm");
        assert_eq!(s.get(s.lookup("gbert.w").unwrap()).value.data(), &[1.0]);
    }

    #[test]
    fn nan_gradient_aborts_with_parameter_name() {
        let mut s = store_with(&[("layer.w", &[0.0], ParamGroup::Encoder)]);
        set_grad(&mut s, "layer.w", &[f32::NAN]);
        let mut adam = Adam::new(&s, AdamConfig::default(), 1e-3, 1e-3);
        match adam.step(&mut s) {
            Err(TrainError::NonFiniteGrad { name, step }) => {
                assert_eq!(name, "layer.w");
                assert_eq!(step, 1);
            }
            other => panic!("expected NonFiniteGrad, got {other:?}"),
        }
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = x^2, grad 2x, from x = 5.
        let mut s = store_with(&[("x", &[5.0], ParamGroup::Encoder)]);
        let mut adam = Adam::new(
            &s,
            AdamConfig {
                grad_clip: 0.0,
                ..AdamConfig::default()
            },
            1e-2,
            1e-2,
        );
        for _ in 0..2000 {
            let id = s.lookup("x").unwrap();
            let x = s.get(id).value.data()[0];
            s.get_mut(id).grad[0] = 2.0 * x;
            adam.step(&mut s).unwrap();
        }
        let x = s.get(s.lookup("x").unwrap()).value.data()[0];
        assert!(x.abs() < 1e-2, "x = {x}");
    }
}
