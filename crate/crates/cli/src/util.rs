//! File IO shared by the commands. Input failures are data errors (exit 2),
//! output failures are runtime errors (exit 3).

use std::fs;
use std::path::Path;

use gbert_core::data::LexiconEntry;

use crate::CliError;

pub fn read_input(path: &str) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Data(format!("cannot read `{path}`: {e}")))
}

pub fn read_input_text(path: &str) -> Result<String, CliError> {
    let bytes = read_input(path)?;
    String::from_utf8(bytes).map_err(|_| CliError::Data(format!("`{path}` is not valid UTF-8")))
}

/// Write `bytes` to `path`, creating parent directories as needed.
pub fn write_output(path: &str, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = Path::new(path).parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::Runtime(format!("cannot create `{}`: {e}", parent.display())))?;
        }
    }
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write `{path}`: {e}")))
}

/// Parse a lexicon file, returning its entries and raw bytes (for hashing).
pub fn load_lexicon(path: &str) -> Result<(Vec<LexiconEntry>, Vec<u8>), CliError> {
    let bytes = read_input(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| CliError::Data(format!("`{path}` is not valid UTF-8")))?;
    let entries = gbert_core::data::parse_lexicon(text)
        .map_err(|e| CliError::Data(format!("{path}: {e}")))?;
    Ok((entries, bytes))
}

/// One `word<TAB>phoneme phoneme ...` line per entry.
pub fn render_lexicon(entries: &[LexiconEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.word);
        out.push('\t');
        out.push_str(&e.phonemes.join(" "));
        out.push('\n');
    }
    out
}

pub fn join(dir: &str, file: &str) -> String {
    Path::new(dir).join(file).to_string_lossy().into_owned()
}

/// Default log path when `--log` is absent: `<out>.log`.
pub fn default_log_path(out: &str) -> String {
    format!("{out}.log")
}

/// Manifest path for a single-file output: `<out>.manifest.json`.
pub fn manifest_path_for(out: &str) -> String {
    format!("{out}.manifest.json")
}
