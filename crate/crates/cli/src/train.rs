//! `train`: fit a G2P model on a train/valid lexicon pair and write the
//! best-validation checkpoint.

use gbert_core::checkpoint::{decode_gbert, encode_g2p, CheckpointMeta};
use gbert_core::data::{word_graphemes, LexiconEntry, Vocabulary};
use gbert_core::models::{G2pModel, VariantKind};
use gbert_core::transformer::ModelConfig;
use gbert_core::train::{train_g2p, TrainConfig};

use crate::config::{resolve, resolve_opt, ConfigFile};
use crate::manifest::RunManifest;
use crate::util;
use crate::{CliError, TrainArgs};

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(args.config.as_deref())?;

    let kind = VariantKind::parse(&args.variant).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown variant `{}`; expected baseline, frozen, finetune, or fused",
            args.variant
        ))
    })?;
    let gbert_path = resolve_opt(args.gbert.clone(), cfg.string("gbert")?);
    if kind.uses_gbert() && gbert_path.is_none() {
        return Err(CliError::Usage(format!(
            "variant `{}` needs a pretrained encoder; pass --gbert",
            kind.name()
        )));
    }
    if !kind.uses_gbert() && gbert_path.is_some() {
        return Err(CliError::Usage(
            "the baseline has no use for --gbert; drop the flag or pick a gbert variant".into(),
        ));
    }

    // Explicit files win over --data-dir so a prepared directory can be
    // partially overridden.
    let data_dir = resolve_opt(args.data_dir.clone(), cfg.string("data_dir")?);
    let train_path = resolve_opt(args.train.clone(), cfg.string("train")?)
        .or_else(|| data_dir.as_deref().map(|d| util::join(d, "train.tsv")));
    let valid_path = resolve_opt(args.valid.clone(), cfg.string("valid")?)
        .or_else(|| data_dir.as_deref().map(|d| util::join(d, "valid.tsv")));
    let (Some(train_path), Some(valid_path)) = (train_path, valid_path) else {
        return Err(CliError::Usage(
            "pass --data-dir or both --train and --valid".into(),
        ));
    };

    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        max_epochs: resolve(args.max_epochs, cfg.usize("max_epochs")?, defaults.max_epochs),
        batch_size: resolve(args.batch_size, cfg.usize("batch_size")?, defaults.batch_size),
        lr_encoder: resolve(args.lr_encoder, cfg.f32("lr_encoder")?, defaults.lr_encoder),
        lr_decoder: resolve(args.lr_decoder, cfg.f32("lr_decoder")?, defaults.lr_decoder),
        label_smoothing: resolve(
            args.label_smoothing,
            cfg.f32("label_smoothing")?,
            defaults.label_smoothing,
        ),
        grad_clip: resolve(args.grad_clip, cfg.f32("grad_clip")?, defaults.grad_clip),
        patience: resolve(args.patience, cfg.usize("patience")?, defaults.patience),
        seed: resolve(args.seed, cfg.u64("seed")?, defaults.seed),
    };

    let md = ModelConfig::default();
    let mut mc = ModelConfig {
        num_encoder_layers: resolve(
            args.enc_layers,
            cfg.usize("enc_layers")?,
            md.num_encoder_layers,
        ),
        num_decoder_layers: resolve(
            args.dec_layers,
            cfg.usize("dec_layers")?,
            md.num_decoder_layers,
        ),
        d_model: resolve(args.d_model, cfg.usize("d_model")?, md.d_model),
        num_heads: resolve(args.heads, cfg.usize("heads")?, md.num_heads),
        d_ffn: resolve(args.ffn, cfg.usize("ffn")?, md.d_ffn),
        max_len: resolve(args.max_len, cfg.usize("max_len")?, md.max_len),
        dropout_p: resolve(args.dropout, cfg.f32("dropout")?, md.dropout_p),
        ..md
    };

    let lang_tag = resolve_opt(args.lang_tag.clone(), cfg.string("lang_tag")?);
    let allow_unk = args.allow_unk || cfg.bool("allow_unk")?.unwrap_or(false);
    let drop_net_p = resolve(args.drop_net_p, cfg.f32("drop_net_p")?, 1.0);

    let mut manifest = RunManifest::new("train", tc.seed);
    manifest.setting("variant", kind.name());
    manifest.setting_opt("gbert", gbert_path.as_deref());
    manifest.setting("out", &args.out);
    manifest.setting_opt("lang_tag", lang_tag.as_deref());
    manifest.setting("allow_unk", allow_unk);
    manifest.setting("drop_net_p", drop_net_p);
    manifest.setting("enc_layers", mc.num_encoder_layers);
    manifest.setting("dec_layers", mc.num_decoder_layers);
    manifest.setting("d_model", mc.d_model);
    manifest.setting("heads", mc.num_heads);
    manifest.setting("ffn", mc.d_ffn);
    manifest.setting("max_len", mc.max_len);
    manifest.setting("dropout", mc.dropout_p);
    manifest.setting("max_epochs", tc.max_epochs);
    manifest.setting("batch_size", tc.batch_size);
    manifest.setting("lr_encoder", tc.lr_encoder);
    manifest.setting("lr_decoder", tc.lr_decoder);
    manifest.setting("label_smoothing", tc.label_smoothing);
    manifest.setting("grad_clip", tc.grad_clip);
    manifest.setting("patience", tc.patience);

    let (train_set, train_bytes) = util::load_lexicon(&train_path)?;
    manifest.input(&train_path, &train_bytes);
    let (valid_set, valid_bytes) = util::load_lexicon(&valid_path)?;
    manifest.input(&valid_path, &valid_bytes);

    let phoneme_vocab = phoneme_vocab_from(&train_set, &valid_set);

    let mut model = if kind == VariantKind::Baseline {
        let grapheme_vocab = grapheme_vocab_from(&train_set, &valid_set, lang_tag.as_deref());
        let mut m = G2pModel::new_baseline(mc, grapheme_vocab, phoneme_vocab, lang_tag, tc.seed)?;
        m.allow_unk = allow_unk;
        m
    } else {
        let path = gbert_path.as_deref().unwrap();
        let bytes = util::read_input(path)?;
        manifest.input(path, &bytes);
        let (gbert, gmeta) = decode_gbert(&bytes)?;
        manifest.setting("gbert_pretrain_steps", gmeta.step);
        // The encoder defines grapheme geometry; only the G2P-side widths
        // are free. Keep them aligned unless explicitly overridden.
        if args.d_model.is_none() && cfg.usize("d_model")?.is_none() {
            mc.d_model = gbert.config.d_model;
        }
        if args.heads.is_none() && cfg.usize("heads")?.is_none() {
            mc.num_heads = gbert.config.num_heads;
        }
        if args.max_len.is_none() && cfg.usize("max_len")?.is_none() {
            mc.max_len = gbert.config.max_len;
        }
        G2pModel::with_gbert(kind, mc, &gbert, phoneme_vocab, lang_tag, tc.seed, allow_unk)?
    };
    model.drop_net_p = drop_net_p;

    let outcome = train_g2p(&mut model, &train_set, &valid_set, &tc)?;

    let meta = CheckpointMeta {
        seed: tc.seed,
        step: outcome.best_epoch as u64,
        metric: outcome.best_wer,
    };
    let bytes = encode_g2p(&model, &meta);
    util::write_output(&args.out, &bytes)?;
    manifest.output(&args.out, &bytes);

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| util::default_log_path(&args.out));
    let mut log = String::from("epoch\ttrain_loss\tvalid_wer\tvalid_per\tlr_encoder\tlr_decoder\n");
    for r in &outcome.log {
        log.push_str(&format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.6}\t{:.6}\n",
            r.epoch, r.train_loss, r.valid_wer, r.valid_per, r.lr_encoder, r.lr_decoder
        ));
    }
    util::write_output(&log_path, log.as_bytes())?;
    manifest.output(&log_path, log.as_bytes());

    println!(
        "trained {} for {} epoch(s); best epoch {} with WER {:.2} PER {:.2}",
        kind.name(),
        outcome.epochs_run,
        outcome.best_epoch,
        outcome.best_wer,
        outcome.best_per
    );
    manifest.write(&util::manifest_path_for(&args.out))
}

/// Grapheme vocabulary over both splits, with the language tag (when any)
/// registered as a tag token.
fn grapheme_vocab_from(
    train: &[LexiconEntry],
    valid: &[LexiconEntry],
    lang_tag: Option<&str>,
) -> Vocabulary {
    let mut observed = Vec::new();
    for e in train.iter().chain(valid) {
        observed.extend(word_graphemes(&e.word));
    }
    let tags: Vec<&str> = lang_tag.into_iter().collect();
    Vocabulary::build(observed, &tags)
}

fn phoneme_vocab_from(train: &[LexiconEntry], valid: &[LexiconEntry]) -> Vocabulary {
    let mut observed = Vec::new();
    for e in train.iter().chain(valid) {
        observed.extend(e.phonemes.iter().cloned());
    }
    Vocabulary::build(observed, &[])
}
