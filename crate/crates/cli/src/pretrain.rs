//! `pretrain`: masked grapheme prediction over wordlists, producing an
//! encoder checkpoint the `train` command can build on.

use gbert_core::checkpoint::{encode_gbert, CheckpointMeta};
use gbert_core::gbert::{pretrain, PretrainConfig, PretrainData};

use crate::config::{resolve, ConfigFile};
use crate::manifest::RunManifest;
use crate::util;
use crate::{CliError, PretrainArgs};

pub fn run(args: PretrainArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(args.config.as_deref())?;
    let defaults = PretrainConfig::default();

    if !args.lang.is_empty() && args.lang.len() != args.wordlist.len() {
        return Err(CliError::Usage(format!(
            "{} --lang tag(s) for {} wordlist(s); pass one per wordlist or none",
            args.lang.len(),
            args.wordlist.len()
        )));
    }

    let mut pc = PretrainConfig {
        mask_ratio: resolve(args.mask_ratio, cfg.f32("mask_ratio")?, defaults.mask_ratio),
        batch_size: resolve(args.batch_size, cfg.usize("batch_size")?, defaults.batch_size),
        max_steps: resolve(args.max_steps, cfg.usize("max_steps")?, defaults.max_steps),
        eval_interval: resolve(
            args.eval_interval,
            cfg.usize("eval_interval")?,
            defaults.eval_interval,
        ),
        patience: resolve(args.patience, cfg.usize("patience")?, defaults.patience),
        lr: resolve(args.lr, cfg.f32("lr")?, defaults.lr),
        grad_clip: resolve(args.grad_clip, cfg.f32("grad_clip")?, defaults.grad_clip),
        seed: resolve(args.seed, cfg.u64("seed")?, defaults.seed),
        ..defaults
    };
    pc.model.gbert_layers = resolve(args.layers, cfg.usize("layers")?, pc.model.gbert_layers);
    pc.model.d_model = resolve(args.d_model, cfg.usize("d_model")?, pc.model.d_model);
    pc.model.num_heads = resolve(args.heads, cfg.usize("heads")?, pc.model.num_heads);
    pc.model.d_ffn = resolve(args.ffn, cfg.usize("ffn")?, pc.model.d_ffn);
    pc.model.max_len = resolve(args.max_len, cfg.usize("max_len")?, pc.model.max_len);
    pc.model.dropout_p = resolve(args.dropout, cfg.f32("dropout")?, pc.model.dropout_p);

    let mut manifest = RunManifest::new("pretrain", pc.seed);
    manifest.setting("out", &args.out);
    manifest.setting("mask_ratio", pc.mask_ratio);
    manifest.setting("layers", pc.model.gbert_layers);
    manifest.setting("d_model", pc.model.d_model);
    manifest.setting("heads", pc.model.num_heads);
    manifest.setting("ffn", pc.model.d_ffn);
    manifest.setting("max_len", pc.model.max_len);
    manifest.setting("dropout", pc.model.dropout_p);
    manifest.setting("batch_size", pc.batch_size);
    manifest.setting("max_steps", pc.max_steps);
    manifest.setting("eval_interval", pc.eval_interval);
    manifest.setting("patience", pc.patience);
    manifest.setting("lr", pc.lr);
    manifest.setting("grad_clip", pc.grad_clip);

    // Gather (word, language index) pairs across all wordlists.
    let languages: Vec<String> = if args.lang.is_empty() {
        Vec::new()
    } else {
        let mut seen = Vec::new();
        for tag in &args.lang {
            if !seen.contains(tag) {
                seen.push(tag.clone());
            }
        }
        seen
    };
    let mut words = Vec::new();
    let mut langs = Vec::new();
    for (i, path) in args.wordlist.iter().enumerate() {
        let text = util::read_input_text(path)?;
        manifest.input(path, text.as_bytes());
        let list = gbert_core::data::parse_wordlist(&text);
        if list.is_empty() {
            return Err(CliError::Data(format!("wordlist `{path}` has no words")));
        }
        let lang_ix = if languages.is_empty() {
            0
        } else {
            languages.iter().position(|t| t == &args.lang[i]).unwrap() as u32
        };
        langs.extend(std::iter::repeat(lang_ix).take(list.len()));
        words.extend(list);
    }
    manifest.setting("languages", languages.join(","));

    // Held-out hygiene: drop every word that appears in an exclusion file.
    let mut excluded = Vec::new();
    for path in &args.exclude {
        let text = util::read_input_text(path)?;
        manifest.input(path, text.as_bytes());
        excluded.extend(exclusion_words(&text));
    }
    let before = words.len();
    let (words, langs) = filter_excluded(words, langs, &excluded);
    let removed = before - words.len();
    if removed > 0 {
        eprintln!("excluded {removed} word(s) found in exclusion files");
    }
    manifest.setting("excluded_words", removed);
    if words.is_empty() {
        return Err(CliError::Data(
            "no words left to pretrain on after exclusion".into(),
        ));
    }

    let data = PretrainData {
        words,
        langs,
        languages,
    };
    let outcome = pretrain(&data, &pc)?;
    if outcome.dropped_too_long > 0 {
        eprintln!(
            "warning: dropped {} word(s) longer than max_len {}",
            outcome.dropped_too_long, pc.model.max_len
        );
    }

    let meta = CheckpointMeta {
        seed: pc.seed,
        step: outcome.steps_run as u64,
        metric: outcome.best_masked_acc,
    };
    let bytes = encode_gbert(&outcome.model, &meta);
    util::write_output(&args.out, &bytes)?;
    manifest.output(&args.out, &bytes);

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| util::default_log_path(&args.out));
    let mut log = String::from("step\ttrain_loss\tvalid_loss\tmasked_acc\n");
    for r in &outcome.log {
        log.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\n",
            r.step, r.train_loss, r.valid_loss, r.masked_acc
        ));
    }
    util::write_output(&log_path, log.as_bytes())?;
    manifest.output(&log_path, log.as_bytes());

    println!(
        "pretrained {} steps, best validation loss {:.4}, masked accuracy {:.4}",
        outcome.steps_run, outcome.best_valid_loss, outcome.best_masked_acc
    );
    manifest.write(&util::manifest_path_for(&args.out))
}

/// Words from an exclusion file: a lexicon when tab-separated, a plain
/// wordlist otherwise.
fn exclusion_words(text: &str) -> Vec<String> {
    let looks_like_lexicon = text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .find(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .is_some_and(|l| l.contains('\t'));
    if looks_like_lexicon {
        match gbert_core::data::parse_lexicon(text) {
            Ok(entries) => entries.into_iter().map(|e| e.word).collect(),
            Err(_) => gbert_core::data::parse_wordlist(text),
        }
    } else {
        gbert_core::data::parse_wordlist(text)
    }
}

fn filter_excluded(
    words: Vec<String>,
    langs: Vec<u32>,
    excluded: &[String],
) -> (Vec<String>, Vec<u32>) {
    let block: std::collections::BTreeSet<&String> = excluded.iter().collect();
    words
        .into_iter()
        .zip(langs)
        .filter(|(w, _)| !block.contains(w))
        .unzip()
}
