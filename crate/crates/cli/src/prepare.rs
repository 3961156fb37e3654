//! `prepare-data`: deduplicate a lexicon and split it into train/valid/test
//! files, plus a wordlist of training words safe to pretrain on.

use std::collections::BTreeSet;

use gbert_core::data::{decompose_hangul, sample_split, LexiconEntry};

use crate::config::{resolve, resolve_opt, ConfigFile};
use crate::manifest::RunManifest;
use crate::util;
use crate::{CliError, PrepareArgs};

pub fn run(args: PrepareArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(args.config.as_deref())?;
    let valid_n = resolve(args.valid, cfg.usize("valid")?, 1000);
    let test_n = resolve(args.test, cfg.usize("test")?, 1000);
    let train_n = resolve_opt(args.train, cfg.usize("train")?);
    let low_n = resolve_opt(args.low_resource_n, cfg.usize("low_resource_n")?);
    let jamo = args.jamo || cfg.bool("jamo")?.unwrap_or(false);
    let seed = resolve(args.seed, cfg.u64("seed")?, 1);

    let mut manifest = RunManifest::new("prepare-data", seed);
    manifest.setting("lexicon", &args.lexicon);
    manifest.setting("out_dir", &args.out_dir);
    manifest.setting("valid", valid_n);
    manifest.setting("test", test_n);
    manifest.setting_opt("low_resource_n", low_n);
    manifest.setting("jamo", jamo);

    let (raw_entries, lexicon_bytes) = util::load_lexicon(&args.lexicon)?;
    manifest.input(&args.lexicon, &lexicon_bytes);

    let (mut entries, dropped) = dedupe_entries(raw_entries);
    if dropped > 0 {
        eprintln!("warning: dropped {dropped} duplicate lexicon entries");
    }
    manifest.setting("duplicates_dropped", dropped);

    if jamo {
        for e in &mut entries {
            e.word = decompose_hangul(&e.word);
        }
    }

    let reserved = valid_n + test_n;
    let train_size = match train_n {
        Some(n) => n,
        None => entries.len().checked_sub(reserved).ok_or_else(|| {
            CliError::Data(format!(
                "lexicon has {} entries, fewer than valid + test = {reserved}",
                entries.len()
            ))
        })?,
    };
    if train_size == 0 && train_n.is_none() {
        return Err(CliError::Data(
            "no entries left for the training split".into(),
        ));
    }
    manifest.setting("train", train_size);

    let mut splits = sample_split(&entries, &[train_size, valid_n, test_n], seed)?;
    let test = splits.pop().unwrap();
    let valid = splits.pop().unwrap();
    let train = splits.pop().unwrap();

    let mut write_split = |name: &str, rows: &[LexiconEntry]| -> Result<(), CliError> {
        let path = util::join(&args.out_dir, name);
        let body = util::render_lexicon(rows);
        util::write_output(&path, body.as_bytes())?;
        manifest.output(&path, body.as_bytes());
        Ok(())
    };
    write_split("train.tsv", &train)?;
    write_split("valid.tsv", &valid)?;
    write_split("test.tsv", &test)?;

    if let Some(n) = low_n {
        // Low-resource subsets come from the train split only, so the
        // valid/test records stay unseen at every budget.
        let low = sample_split(&train, &[n], seed.wrapping_add(1))?
            .pop()
            .unwrap();
        write_split("train_low.tsv", &low)?;
    }

    // Training words are the only lexicon words safe to pretrain on.
    let mut words: Vec<&str> = train.iter().map(|e| e.word.as_str()).collect();
    words.sort_unstable();
    words.dedup();
    let wordlist_path = util::join(&args.out_dir, "wordlist.txt");
    let mut body = String::new();
    for w in &words {
        body.push_str(w);
        body.push('\n');
    }
    util::write_output(&wordlist_path, body.as_bytes())?;
    manifest.output(&wordlist_path, body.as_bytes());

    println!(
        "prepared {} train / {} valid / {} test entries in {}",
        train.len(),
        valid.len(),
        test.len(),
        args.out_dir
    );
    manifest.write(&util::join(&args.out_dir, "manifest.json"))
}

/// Keep the first occurrence of each (word, pronunciation) pair. Distinct
/// pronunciations of one word are legitimate variants and all stay.
fn dedupe_entries(entries: Vec<LexiconEntry>) -> (Vec<LexiconEntry>, usize) {
    let mut seen: BTreeSet<(String, Vec<String>)> = BTreeSet::new();
    let mut kept = Vec::with_capacity(entries.len());
    let mut dropped = 0usize;
    for e in entries {
        if seen.insert((e.word.clone(), e.phonemes.clone())) {
            kept.push(e);
        } else {
            dropped += 1;
        }
    }
    (kept, dropped)
}
