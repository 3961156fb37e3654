//! `evaluate`: score checkpoints on a held-out lexicon. With several models
//! (typically the same recipe under different seeds) the summary reports
//! mean and sample standard deviation.

use std::path::Path;

use gbert_core::checkpoint::decode_g2p;
use gbert_core::eval::{evaluate_model, mean_std, DecodeConfig};

use crate::config::{resolve, resolve_opt, ConfigFile};
use crate::manifest::RunManifest;
use crate::util;
use crate::{CliError, EvaluateArgs};

pub fn run(args: EvaluateArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(args.config.as_deref())?;
    let beam = resolve(args.beam, cfg.usize("beam")?, 5);
    let max_decode_len = resolve_opt(args.max_decode_len, cfg.usize("max_decode_len")?);
    let out_dir = resolve_opt(args.out_dir.clone(), cfg.string("out_dir")?);
    if beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }

    // Decoding is deterministic; there is no seed to record.
    let mut manifest = RunManifest::new("evaluate", 0);
    manifest.setting("test", &args.test);
    manifest.setting("beam", beam);
    manifest.setting_opt("max_decode_len", max_decode_len);
    manifest.setting_opt("out_dir", out_dir.as_deref());

    let (test_set, test_bytes) = util::load_lexicon(&args.test)?;
    manifest.input(&args.test, &test_bytes);

    let dc = DecodeConfig {
        beam_size: beam,
        max_decode_len,
    };

    let mut wers = Vec::with_capacity(args.model.len());
    let mut pers = Vec::with_capacity(args.model.len());
    for (i, path) in args.model.iter().enumerate() {
        let bytes = util::read_input(path)?;
        manifest.input(path, &bytes);
        let (model, _) = decode_g2p(&bytes)?;
        let report = evaluate_model(&model, &test_set, &dc)?;
        println!(
            "{path}: {} WER {:.2} PER {:.2}",
            model.kind.name(),
            report.wer,
            report.per
        );
        if let Some(dir) = &out_dir {
            let name = report_name(path, i, &args.model);
            let out_path = util::join(dir, &name);
            let body = report.to_tsv();
            util::write_output(&out_path, body.as_bytes())?;
            manifest.output(&out_path, body.as_bytes());
        }
        wers.push(report.wer);
        pers.push(report.per);
    }

    if args.model.len() >= 2 {
        let (wm, ws) = mean_std(&wers);
        let (pm, ps) = mean_std(&pers);
        println!(
            "aggregate over {} models: WER {:.2} \u{b1} {:.2} PER {:.2} \u{b1} {:.2}",
            args.model.len(),
            wm,
            ws.unwrap_or(0.0),
            pm,
            ps.unwrap_or(0.0)
        );
    }

    let manifest_path = out_dir.as_deref().map(|d| util::join(d, "manifest.json"));
    manifest.emit(manifest_path.as_deref())
}

/// Per-model report filename: the checkpoint stem, index-suffixed when two
/// checkpoints share one.
fn report_name(path: &str, index: usize, all: &[String]) -> String {
    let stem = |p: &str| {
        Path::new(p)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("model{index}"))
    };
    let mine = stem(path);
    let clash = all
        .iter()
        .enumerate()
        .any(|(j, other)| j != index && stem(other) == mine);
    if clash {
        format!("{mine}-{index}.eval.tsv")
    } else {
        format!("{mine}.eval.tsv")
    }
}
