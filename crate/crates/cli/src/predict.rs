//! `predict`: pronounce words with a trained checkpoint, one line of
//! space-separated phonemes per word on stdout.

use gbert_core::checkpoint::decode_g2p;
use gbert_core::eval::{decode, DecodeConfig};

use crate::config::{resolve, resolve_opt, ConfigFile};
use crate::manifest::RunManifest;
use crate::util;
use crate::{CliError, PredictArgs};

pub fn run(args: PredictArgs) -> Result<(), CliError> {
    let cfg = ConfigFile::load(args.config.as_deref())?;
    let beam = resolve(args.beam, cfg.usize("beam")?, 5);
    let max_decode_len = resolve_opt(args.max_decode_len, cfg.usize("max_decode_len")?);
    if beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }

    let mut manifest = RunManifest::new("predict", 0);
    manifest.setting("model", &args.model);
    manifest.setting("beam", beam);
    manifest.setting_opt("max_decode_len", max_decode_len);
    manifest.setting("words", args.word.len());

    let bytes = util::read_input(&args.model)?;
    manifest.input(&args.model, &bytes);
    let (mut model, _) = decode_g2p(&bytes)?;
    // Ad-hoc words may contain graphemes the model never saw; map them to
    // `<unk>` and pronounce the rest rather than refuse.
    model.allow_unk = true;

    let dc = DecodeConfig {
        beam_size: beam,
        max_decode_len,
    };
    for word in &args.word {
        let out = decode(&model, word, &dc)?;
        println!("{}", out.phonemes.join(" "));
        if out.truncated {
            eprintln!("warning: `{word}` hit the emission cap before <eos>");
        }
    }

    manifest.emit(args.manifest.as_deref())
}
