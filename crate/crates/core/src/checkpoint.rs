//! Binary model checkpoints.
//!
//! Layout: magic `GBCK`, a format version, a 64-bit FNV-1a integrity hash
//! over everything after the hash field, a kind byte, then the kind's
//! payload. All integers and floats are little-endian. Tensors carry
//! their name, trainability, group, shape, and an explicit element count,
//! in registration order, so a loaded checkpoint re-serializes
//! byte-identically.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::data::Vocabulary;
use crate::gbert::GbertModel;
use crate::hash::fnv1a64;
use crate::models::{G2pModel, VariantKind};
use crate::tensor::{Array, ParamGroup, ParamStore};
use crate::transformer::ModelConfig;

pub const MAGIC: &[u8; 4] = b"GBCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("integrity hash mismatch: the checkpoint is corrupt")]
    Corrupt,
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("malformed checkpoint field: {0}")]
    Malformed(&'static str),
    #[error("tensor `{name}`: payload does not match its shape")]
    TensorShape { name: String },
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("checkpoint contents rejected: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Gbert,
    G2p,
}

impl CheckpointKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Gbert => "pretrained-encoder",
            CheckpointKind::G2p => "g2p-model",
        }
    }

    fn code(self) -> u8 {
        match self {
            CheckpointKind::Gbert => 0,
            CheckpointKind::G2p => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(CheckpointKind::Gbert),
            1 => Some(CheckpointKind::G2p),
            _ => None,
        }
    }
}

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    /// Validation metric at save time (MLM loss or WER, by kind).
    pub metric: f32,
}

// ---------------------------------------------------------------- writing

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn strings(&mut self, items: &[String]) {
        self.u32(items.len() as u32);
        for s in items {
            self.string(s);
        }
    }

    fn opt_string(&mut self, s: Option<&str>) {
        match s {
            None => self.u8(0),
            Some(s) => {
                self.u8(1);
                self.string(s);
            }
        }
    }

    fn config(&mut self, c: &ModelConfig) {
        self.u32(c.num_encoder_layers as u32);
        self.u32(c.num_decoder_layers as u32);
        self.u32(c.gbert_layers as u32);
        self.u32(c.d_model as u32);
        self.u32(c.num_heads as u32);
        self.u32(c.d_ffn as u32);
        self.u32(c.max_len as u32);
        self.u32(c.num_languages as u32);
        self.f32(c.dropout_p);
    }

    fn vocab(&mut self, v: &Vocabulary) {
        self.u32(v.num_tags() as u32);
        self.strings(v.tokens());
    }

    fn meta(&mut self, m: &CheckpointMeta) {
        self.u64(m.seed);
        self.u64(m.step);
        self.f32(m.metric);
    }

    fn params(&mut self, store: &ParamStore) {
        self.u32(store.len() as u32);
        for (_, p) in store.iter() {
            self.string(&p.name);
            self.u8(u8::from(p.trainable));
            self.u8(match p.group {
                ParamGroup::Encoder => 0,
                ParamGroup::Decoder => 1,
            });
            let shape = p.value.shape();
            self.u32(shape.len() as u32);
            for &d in shape {
                self.u32(d as u32);
            }
            self.u32(p.value.numel() as u32);
            for &v in p.value.data() {
                self.f32(v);
            }
        }
    }

    fn seal(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.buf.len() + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&fnv1a64(&self.buf).to_le_bytes());
        out.extend_from_slice(&self.buf);
        out
    }
}

// ---------------------------------------------------------------- reading

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

type R<T> = Result<T, CheckpointError>;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> R<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> R<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> R<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> R<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> R<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> R<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        core::str::from_utf8(bytes)
            .map(String::from)
            .map_err(|_| CheckpointError::Malformed("string is not UTF-8"))
    }

    fn strings(&mut self) -> R<Vec<String>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            out.push(self.string()?);
        }
        Ok(out)
    }

    fn opt_string(&mut self) -> R<Option<String>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.string()?)),
            _ => Err(CheckpointError::Malformed("optional-string flag")),
        }
    }

    fn config(&mut self) -> R<ModelConfig> {
        Ok(ModelConfig {
            num_encoder_layers: self.u32()? as usize,
            num_decoder_layers: self.u32()? as usize,
            gbert_layers: self.u32()? as usize,
            d_model: self.u32()? as usize,
            num_heads: self.u32()? as usize,
            d_ffn: self.u32()? as usize,
            max_len: self.u32()? as usize,
            num_languages: self.u32()? as usize,
            dropout_p: self.f32()?,
        })
    }

    fn vocab(&mut self) -> R<Vocabulary> {
        let num_tags = self.u32()? as usize;
        let tokens = self.strings()?;
        Vocabulary::from_tokens(tokens, num_tags)
            .map_err(|e| CheckpointError::Invalid(format!("vocabulary: {e}")))
    }

    fn meta(&mut self) -> R<CheckpointMeta> {
        Ok(CheckpointMeta {
            seed: self.u64()?,
            step: self.u64()?,
            metric: self.f32()?,
        })
    }

    fn params(&mut self, seed: u64) -> R<ParamStore> {
        let count = self.u32()? as usize;
        let mut store = ParamStore::new(seed);
        for _ in 0..count {
            let name = self.string()?;
            let trainable = match self.u8()? {
                0 => false,
                1 => true,
                _ => return Err(CheckpointError::Malformed("trainable flag")),
            };
            let group = match self.u8()? {
                0 => ParamGroup::Encoder,
                1 => ParamGroup::Decoder,
                _ => return Err(CheckpointError::Malformed("parameter group")),
            };
            let rank = self.u32()? as usize;
            if rank > 8 {
                return Err(CheckpointError::Malformed("tensor rank"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let numel = self.u32()? as usize;
            if numel != shape.iter().product::<usize>() {
                return Err(CheckpointError::TensorShape { name });
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(self.f32()?);
            }
            let value = Array::new(shape, data)
                .map_err(|_| CheckpointError::TensorShape { name: name.clone() })?;
            store
                .insert_raw(&name, value, trainable, group)
                .map_err(|e| CheckpointError::Invalid(format!("{e}")))?;
        }
        Ok(store)
    }

    fn finished(&self) -> R<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(CheckpointError::Malformed("trailing bytes"))
        }
    }
}

/// Validate the envelope (magic, version, hash) and hand back the kind
/// byte plus payload reader.
fn open(bytes: &[u8]) -> R<(CheckpointKind, Reader<'_>)> {
    if bytes.len() < 16 {
        return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            CheckpointError::BadMagic
        } else {
            CheckpointError::Truncated
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let stored = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[16..];
    if fnv1a64(body) != stored {
        return Err(CheckpointError::Corrupt);
    }
    let mut r = Reader { buf: body, pos: 0 };
    let kind = CheckpointKind::from_code(r.u8()?)
        .ok_or(CheckpointError::Malformed("checkpoint kind"))?;
    Ok((kind, r))
}

pub fn peek_kind(bytes: &[u8]) -> R<CheckpointKind> {
    Ok(open(bytes)?.0)
}

pub fn encode_gbert(model: &GbertModel, meta: &CheckpointMeta) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(CheckpointKind::Gbert.code());
    w.config(&model.config);
    w.vocab(&model.vocab);
    w.strings(&model.languages);
    w.meta(meta);
    w.params(&model.store);
    w.seal()
}

pub fn decode_gbert(bytes: &[u8]) -> R<(GbertModel, CheckpointMeta)> {
    let (kind, mut r) = open(bytes)?;
    if kind != CheckpointKind::Gbert {
        return Err(CheckpointError::WrongKind {
            expected: CheckpointKind::Gbert.name(),
            found: kind.name(),
        });
    }
    let config = r.config()?;
    let vocab = r.vocab()?;
    let languages = r.strings()?;
    let meta = r.meta()?;
    let store = r.params(meta.seed)?;
    r.finished()?;
    config
        .validate()
        .map_err(|e| CheckpointError::Invalid(format!("{e}")))?;
    if config.num_languages != languages.len() {
        return Err(CheckpointError::Malformed(
            "language count disagrees with config",
        ));
    }
    Ok((
        GbertModel {
            config,
            vocab,
            languages,
            store,
        },
        meta,
    ))
}

pub fn encode_g2p(model: &G2pModel, meta: &CheckpointMeta) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(CheckpointKind::G2p.code());
    w.u8(model.kind.code());
    w.f32(model.drop_net_p);
    w.u8(u8::from(model.allow_unk));
    w.opt_string(model.lang_tag.as_deref());
    w.config(&model.config);
    match &model.gbert_config {
        None => w.u8(0),
        Some(c) => {
            w.u8(1);
            w.config(c);
        }
    }
    w.strings(&model.gbert_languages);
    w.vocab(&model.grapheme_vocab);
    w.vocab(&model.phoneme_vocab);
    w.meta(meta);
    w.params(&model.store);
    w.seal()
}

pub fn decode_g2p(bytes: &[u8]) -> R<(G2pModel, CheckpointMeta)> {
    let (kind, mut r) = open(bytes)?;
    if kind != CheckpointKind::G2p {
        return Err(CheckpointError::WrongKind {
            expected: CheckpointKind::G2p.name(),
            found: kind.name(),
        });
    }
    let variant = VariantKind::from_code(r.u8()?)
        .ok_or(CheckpointError::Malformed("model variant"))?;
    let drop_net_p = r.f32()?;
    let allow_unk = match r.u8()? {
        0 => false,
        1 => true,
        _ => return Err(CheckpointError::Malformed("allow_unk flag")),
    };
    let lang_tag = r.opt_string()?;
    let config = r.config()?;
    let gbert_config = match r.u8()? {
        0 => None,
        1 => Some(r.config()?),
        _ => return Err(CheckpointError::Malformed("gbert-config flag")),
    };
    let gbert_languages = r.strings()?;
    let grapheme_vocab = r.vocab()?;
    let phoneme_vocab = r.vocab()?;
    let meta = r.meta()?;
    let store = r.params(meta.seed)?;
    r.finished()?;
    let model = G2pModel::from_parts(
        variant,
        config,
        gbert_config,
        store,
        grapheme_vocab,
        phoneme_vocab,
        gbert_languages,
        lang_tag,
        drop_net_p,
        allow_unk,
    )
    .map_err(|e| CheckpointError::Invalid(format!("{e}")))?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LexiconEntry, Vocabulary};
    use crate::models::{Mode, VariantKind};
    use crate::tensor::Tape;
    use alloc::string::ToString;
    use alloc::vec;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            gbert_layers: 1,
            d_model: 8,
            num_heads: 2,
            d_ffn: 16,
            dropout_p: 0.1,
            max_len: 12,
            num_languages: 0,
        }
    }

    fn gbert() -> GbertModel {
        let vocab = Vocabulary::build(["a", "b", "c"], &[]);
        GbertModel::new(tiny_config(), vocab, vec!["<dut>".to_string()], 4).unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            seed: 4,
            step: 123,
            metric: 2.5,
        }
    }

    #[test]
    fn gbert_round_trip_is_bitwise() {
        let model = gbert();
        let bytes = encode_gbert(&model, &meta());
        assert_eq!(peek_kind(&bytes).unwrap(), CheckpointKind::Gbert);
        let (loaded, m) = decode_gbert(&bytes).unwrap();
        assert_eq!(m, meta());
        assert_eq!(loaded.languages, model.languages);
        assert_eq!(loaded.vocab.tokens(), model.vocab.tokens());
        assert_eq!(loaded.store.len(), model.store.len());
        for ((_, a), (_, b)) in loaded.store.iter().zip(model.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.value.shape(), b.value.shape());
            // Bitwise equality, not approximate.
            let ab: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "{}", a.name);
        }
        // Re-encoding reproduces the file exactly.
        assert_eq!(encode_gbert(&loaded, &m), bytes);
    }

    #[test]
    fn g2p_round_trip_preserves_predictions() {
        let gb = gbert();
        let phonemes = Vocabulary::build(["A", "B"], &[]);
        let model = G2pModel::with_gbert(
            VariantKind::GbertFused,
            tiny_config(),
            &gb,
            phonemes,
            Some("<dut>".to_string()),
            9,
            false,
        )
        .unwrap();
        let bytes = encode_g2p(&model, &meta());
        let (loaded, _) = decode_g2p(&bytes).unwrap();
        assert_eq!(loaded.kind, VariantKind::GbertFused);
        assert_eq!(loaded.lang_tag.as_deref(), Some("<dut>"));
        assert_eq!(loaded.gbert_languages, vec!["<dut>".to_string()]);

        let entry = LexiconEntry {
            word: "ab".into(),
            phonemes: vec!["A".into(), "B".into()],
        };
        let batch = model.make_batch(core::slice::from_ref(&entry)).unwrap();
        let mut t1 = Tape::new();
        let l1 = model
            .forward_batch(&mut t1, &batch.src, &batch.dec, Mode::Infer)
            .unwrap();
        let mut t2 = Tape::new();
        let l2 = loaded
            .forward_batch(&mut t2, &batch.src, &batch.dec, Mode::Infer)
            .unwrap();
        assert_eq!(t1.value(l1).data(), t2.value(l2).data());

        assert_eq!(encode_g2p(&loaded, &meta()), bytes);
    }

    #[test]
    fn header_failures_are_distinct() {
        let bytes = encode_gbert(&gbert(), &meta());

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert_eq!(decode_gbert(&bad_magic).unwrap_err(), CheckpointError::BadMagic);

        let mut bad_version = bytes.clone();
        bad_version[4] = 99;
        // Version is outside the hashed body, so it fails on its own.
        assert_eq!(
            decode_gbert(&bad_version).unwrap_err(),
            CheckpointError::UnsupportedVersion(99)
        );

        assert_eq!(
            decode_gbert(&bytes[..10]).unwrap_err(),
            CheckpointError::Truncated
        );
        assert_eq!(
            decode_gbert(&bytes[..bytes.len() - 3]).unwrap_err(),
            CheckpointError::Corrupt,
            "dropping payload bytes breaks the hash"
        );
    }

    #[test]
    fn payload_corruption_is_detected_at_any_position()
    {
        let bytes = encode_gbert(&gbert(), &meta());
        // Flip one byte at a spread of payload offsets; FNV-1a catches
        // every single-byte change.
        let positions = [16usize, 17, 40, bytes.len() / 2, bytes.len() - 1];
        for &pos in &positions {
            let mut corrupt = bytes.clone();
            corrupt[pos] ^= 0x5A;
            assert_eq!(
                decode_gbert(&corrupt).unwrap_err(),
                CheckpointError::Corrupt,
                "flip at {pos}"
            );
        }
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let gb_bytes = encode_gbert(&gbert(), &meta());
        assert!(matches!(
            decode_g2p(&gb_bytes).unwrap_err(),
            CheckpointError::WrongKind { .. }
        ));
        let phonemes = Vocabulary::build(["A"], &[]);
        let baseline = G2pModel::new_baseline(
            tiny_config(),
            Vocabulary::build(["a"], &[]),
            phonemes,
            None,
            1,
        )
        .unwrap();
        let g2p_bytes = encode_g2p(&baseline, &meta());
        assert!(matches!(
            decode_gbert(&g2p_bytes).unwrap_err(),
            CheckpointError::WrongKind { .. }
        ));
    }

    #[test]
    fn frozen_flags_survive_the_trip() {
        let gb = gbert();
        let phonemes = Vocabulary::build(["A"], &[]);
        let model = G2pModel::with_gbert(
            VariantKind::FrozenGbert,
            tiny_config(),
            &gb,
            phonemes,
            Some("<dut>".to_string()),
            2,
            false,
        )
        .unwrap();
        let bytes = encode_g2p(&model, &meta());
        let (loaded, _) = decode_g2p(&bytes).unwrap();
        for (_, p) in loaded.store.iter() {
            assert_eq!(
                p.trainable,
                !p.name.starts_with("gbert."),
                "{}",
                p.name
            );
        }
    }
}
