//! Binary artifact formats: datasets, checkpoints, and trial lists.
//!
//! Every file is `magic | body | crc32(body)` with little-endian integers and
//! IEEE-754 doubles. Loads report the byte offset of the first defect and
//! verify the trailing CRC32 before any payload is trusted structurally.

use crate::error::Error;
use crate::features::FeatureMatrix;
use crate::synth::{Trial, TrialLabel, TrialSet, Utterance};
use crate::tensor::Tensor;
use std::path::Path;
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 8] = b"ADVASVDS";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVASVCK";
pub const TRIALS_MAGIC: &[u8; 8] = b"ADVASVTR";

const FORMAT_VERSION: u8 = 1;
const MAX_CELLS_PER_UTTERANCE: u64 = 1 << 24;

/// Name of the checkpoint entry that carries the config hash, stored as two
/// exact-integer doubles (high and low 32 bits).
const META_ENTRY: &str = "__meta";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {version} at byte {offset}")]
    Version { version: u8, offset: usize },
    #[error("truncated file: needed {needed} more bytes at offset {offset}, only {have} left")]
    Truncated {
        offset: usize,
        needed: usize,
        have: usize,
    },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid {what} at byte {offset}: {detail}")]
    Field {
        what: &'static str,
        offset: usize,
        detail: String,
    },
    #[error("{extra} trailing bytes after checksum")]
    Trailing { extra: usize },
}

// ─── byte-level reader/writer ───────────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                have: self.buf.len() - self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16_le(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32_le(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64_le(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_le(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn push_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Wraps a body with magic and trailing CRC32 and writes it out.
fn write_file(path: &Path, magic: &[u8; 8], body: &[u8]) -> Result<(), Error> {
    let mut out = Vec::with_capacity(8 + body.len() + 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(body);
    push_u32(&mut out, crc32fast::hash(body));
    std::fs::write(path, &out).map_err(|e| Error::io(path, e))
}

/// Reads a file, checks magic and CRC, and returns the verified body.
fn read_file(path: &Path, magic: &'static [u8; 8]) -> Result<Vec<u8>, Error> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() < 12 {
        return Err(FormatError::Truncated {
            offset: raw.len(),
            needed: 12 - raw.len(),
            have: 0,
        }
        .into());
    }
    if &raw[..8] != magic {
        return Err(FormatError::BadMagic {
            expected: std::str::from_utf8(magic).unwrap(),
        }
        .into());
    }
    let body = &raw[8..raw.len() - 4];
    let stored = u32::from_le_bytes(raw[raw.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    Ok(body.to_vec())
}

// ─── dataset ────────────────────────────────────────────────────────────

/// A bag of utterances plus provenance: whether they are adversarial outputs,
/// whether the attacker saw a purifier in the loop (`aware`), and which
/// experiment config produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub adversarial: bool,
    pub aware: bool,
    pub config_hash: u64,
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), Error> {
    if ds.aware && !ds.adversarial {
        return Err(FormatError::Field {
            what: "flags",
            offset: 1,
            detail: "aware flag requires adversarial flag".into(),
        }
        .into());
    }
    let mut body = Vec::new();
    body.push(FORMAT_VERSION);
    body.push(u8::from(ds.adversarial) | u8::from(ds.aware) << 1);
    push_u64(&mut body, ds.config_hash);
    push_u64(&mut body, ds.utterances.len() as u64);
    for u in &ds.utterances {
        push_u32(&mut body, u.speaker_id);
        push_u32(&mut body, u.features.frames() as u32);
        push_u32(&mut body, u.features.channels() as u32);
        for &v in u.features.data() {
            push_f64(&mut body, v);
        }
    }
    write_file(path, DATASET_MAGIC, &body)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, Error> {
    let body = read_file(path, DATASET_MAGIC)?;
    let mut r = Reader::new(&body);
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version {
            version,
            offset: r.pos - 1,
        }
        .into());
    }
    let flags = r.u8()?;
    if flags > 3 || flags == 2 {
        return Err(FormatError::Field {
            what: "flags",
            offset: r.pos - 1,
            detail: format!("bad flag combination: {flags:#04x}"),
        }
        .into());
    }
    let config_hash = r.u64_le()?;
    let count = r.u64_le()?;
    let mut utterances = Vec::new();
    for i in 0..count {
        let record_offset = r.pos;
        let speaker_id = r.u32_le()?;
        let frames = r.u32_le()? as u64;
        let channels = r.u32_le()? as u64;
        let cells = frames.checked_mul(channels).unwrap_or(u64::MAX);
        if frames == 0 || channels == 0 || cells > MAX_CELLS_PER_UTTERANCE {
            return Err(FormatError::Field {
                what: "utterance dims",
                offset: record_offset,
                detail: format!("record {i}: {frames} x {channels}"),
            }
            .into());
        }
        let mut data = Vec::with_capacity(cells as usize);
        for _ in 0..cells {
            data.push(r.f64_le()?);
        }
        let features =
            FeatureMatrix::new(frames as usize, channels as usize, data).map_err(|e| {
                FormatError::Field {
                    what: "utterance payload",
                    offset: record_offset,
                    detail: e.to_string(),
                }
            })?;
        utterances.push(Utterance {
            speaker_id,
            features,
            seed: 0,
        });
    }
    if r.pos != body.len() {
        return Err(FormatError::Trailing {
            extra: body.len() - r.pos,
        }
        .into());
    }
    Ok(Dataset {
        utterances,
        adversarial: flags & 1 == 1,
        aware: flags & 2 == 2,
        config_hash,
    })
}

// ─── checkpoint ─────────────────────────────────────────────────────────

/// Ordered named-tensor bundle: the on-disk form of a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config_hash: u64) -> Self {
        Checkpoint {
            config_hash,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), Error> {
    let meta = Tensor::vector(vec![
        (ck.config_hash >> 32) as f64,
        (ck.config_hash & 0xFFFF_FFFF) as f64,
    ])?;
    let mut body = Vec::new();
    body.push(FORMAT_VERSION);
    push_u32(&mut body, (ck.entries.len() + 1) as u32);
    for (name, tensor) in std::iter::once(&(META_ENTRY.to_string(), meta)).chain(&ck.entries) {
        let bytes = name.as_bytes();
        push_u16(&mut body, bytes.len() as u16);
        body.extend_from_slice(bytes);
        body.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            push_u32(&mut body, d as u32);
        }
        for &v in tensor.values() {
            push_f64(&mut body, v);
        }
    }
    write_file(path, CHECKPOINT_MAGIC, &body)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, Error> {
    let body = read_file(path, CHECKPOINT_MAGIC)?;
    let mut r = Reader::new(&body);
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version {
            version,
            offset: r.pos - 1,
        }
        .into());
    }
    let count = r.u32_le()?;
    let mut config_hash = None;
    let mut entries = Vec::new();
    for i in 0..count {
        let entry_offset = r.pos;
        let name_len = r.u16_le()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| FormatError::Field {
                what: "tensor name",
                offset: entry_offset,
                detail: e.to_string(),
            })?
            .to_string();
        let rank = r.u8()? as usize;
        if rank == 0 || rank > 4 {
            return Err(FormatError::Field {
                what: "tensor rank",
                offset: entry_offset,
                detail: format!("entry {i} ({name}): rank {rank}"),
            }
            .into());
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32_le()? as usize);
        }
        let cells: usize = shape.iter().product();
        if cells == 0 || cells as u64 > MAX_CELLS_PER_UTTERANCE {
            return Err(FormatError::Field {
                what: "tensor shape",
                offset: entry_offset,
                detail: format!("entry {i} ({name}): {shape:?}"),
            }
            .into());
        }
        let mut data = Vec::with_capacity(cells);
        for _ in 0..cells {
            data.push(r.f64_le()?);
        }
        let tensor = Tensor::new(shape, data).map_err(|e| FormatError::Field {
            what: "tensor payload",
            offset: entry_offset,
            detail: e.to_string(),
        })?;
        if name == META_ENTRY {
            if tensor.len() != 2 {
                return Err(FormatError::Field {
                    what: "meta entry",
                    offset: entry_offset,
                    detail: format!("expected 2 values, got {}", tensor.len()),
                }
                .into());
            }
            config_hash =
                Some(((tensor.values()[0] as u64) << 32) | (tensor.values()[1] as u64));
        } else {
            entries.push((name, tensor));
        }
    }
    if r.pos != body.len() {
        return Err(FormatError::Trailing {
            extra: body.len() - r.pos,
        }
        .into());
    }
    let config_hash = config_hash.ok_or(FormatError::Field {
        what: "meta entry",
        offset: 0,
        detail: "missing".into(),
    })?;
    Ok(Checkpoint {
        config_hash,
        entries,
    })
}

// ─── trials ─────────────────────────────────────────────────────────────

/// Trial list plus the hash of the config that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialFile {
    pub config_hash: u64,
    pub set: TrialSet,
}

pub fn save_trials(path: &Path, tf: &TrialFile) -> Result<(), Error> {
    let mut body = Vec::new();
    body.push(FORMAT_VERSION);
    push_u64(&mut body, tf.config_hash);
    push_u64(&mut body, tf.set.trials.len() as u64);
    for t in &tf.set.trials {
        push_u32(&mut body, t.enroll as u32);
        push_u32(&mut body, t.test as u32);
        body.push(match t.label {
            TrialLabel::Nontarget => 0,
            TrialLabel::Target => 1,
        });
    }
    write_file(path, TRIALS_MAGIC, &body)
}

pub fn load_trials(path: &Path) -> Result<TrialFile, Error> {
    let body = read_file(path, TRIALS_MAGIC)?;
    let mut r = Reader::new(&body);
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version {
            version,
            offset: r.pos - 1,
        }
        .into());
    }
    let config_hash = r.u64_le()?;
    let count = r.u64_le()?;
    let mut trials = Vec::new();
    for i in 0..count {
        let offset = r.pos;
        let enroll = r.u32_le()? as usize;
        let test = r.u32_le()? as usize;
        let label = match r.u8()? {
            0 => TrialLabel::Nontarget,
            1 => TrialLabel::Target,
            other => {
                return Err(FormatError::Field {
                    what: "trial label",
                    offset,
                    detail: format!("trial {i}: byte {other}"),
                }
                .into())
            }
        };
        trials.push(Trial {
            enroll,
            test,
            label,
        });
    }
    if r.pos != body.len() {
        return Err(FormatError::Trailing {
            extra: body.len() - r.pos,
        }
        .into());
    }
    Ok(TrialFile {
        config_hash,
        set: TrialSet { trials },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_speakers, synth_corpus};
    use tempfile::tempdir;

    fn sample_dataset() -> Dataset {
        let speakers = make_speakers(3, 6, 12).unwrap();
        let utterances = synth_corpus(&speakers, 2, 16, 0.3, 12).unwrap();
        Dataset {
            utterances,
            adversarial: false,
            aware: false,
            config_hash: 0xDEAD_BEEF_0123_4567,
        }
    }

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ds");
        let ds = sample_dataset();
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.adversarial, ds.adversarial);
        assert_eq!(back.config_hash, ds.config_hash);
        assert_eq!(back.utterances.len(), ds.utterances.len());
        for (a, b) in back.utterances.iter().zip(&ds.utterances) {
            assert_eq!(a.speaker_id, b.speaker_id);
            assert_eq!(a.features, b.features);
        }
    }

    #[test]
    fn threat_flags_round_trip_and_reject_nonsense() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("adv.ds");
        let mut ds = sample_dataset();
        ds.adversarial = true;
        ds.aware = true;
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert!(back.adversarial && back.aware);

        ds.adversarial = false;
        assert!(save_dataset(&path, &ds).is_err());
    }

    #[test]
    fn truncated_dataset_fails_cleanly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ds");
        save_dataset(&path, &sample_dataset()).unwrap();
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() / 2]).unwrap();
        match load_dataset(&path) {
            Err(Error::Format(FormatError::Checksum { .. }))
            | Err(Error::Format(FormatError::Truncated { .. })) => {}
            other => panic!("expected clean failure, got {other:?}"),
        }
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ds");
        let mut small = sample_dataset();
        small.utterances.truncate(1);
        save_dataset(&path, &small).unwrap();
        let raw = std::fs::read(&path).unwrap();
        let mut rng_positions: Vec<usize> = (0..raw.len()).step_by(37).collect();
        rng_positions.push(raw.len() - 1);
        for pos in rng_positions {
            let mut bad = raw.clone();
            bad[pos] ^= 0x40;
            std::fs::write(&path, &bad).unwrap();
            assert!(
                load_dataset(&path).is_err(),
                "flip at byte {pos} went undetected"
            );
        }
    }

    #[test]
    fn checkpoint_round_trips_with_hash() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ck");
        let mut ck = Checkpoint::new(42);
        ck.push("layer0.w", Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        ck.push("layer0.b", Tensor::vector(vec![0.5, -0.5, 0.25]).unwrap());
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get("layer0.b").unwrap().values(), &[0.5, -0.5, 0.25]);
        assert!(back.get("nope").is_none());
    }

    #[test]
    fn checkpoint_hash_survives_full_u64_range() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ck");
        for hash in [0u64, 1, u64::MAX, 0xFFFF_FFFF_0000_0001] {
            let mut ck = Checkpoint::new(hash);
            ck.push("t", Tensor::scalar(1.0).unwrap());
            save_checkpoint(&path, &ck).unwrap();
            assert_eq!(load_checkpoint(&path).unwrap().config_hash, hash);
        }
    }

    #[test]
    fn trials_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.tr");
        let tf = TrialFile {
            config_hash: 7,
            set: TrialSet {
                trials: vec![
                    Trial {
                        enroll: 0,
                        test: 1,
                        label: TrialLabel::Target,
                    },
                    Trial {
                        enroll: 2,
                        test: 5,
                        label: TrialLabel::Nontarget,
                    },
                ],
            },
        };
        save_trials(&path, &tf).unwrap();
        assert_eq!(load_trials(&path).unwrap(), tf);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.tr");
        let tf = TrialFile {
            config_hash: 7,
            set: TrialSet { trials: vec![] },
        };
        save_trials(&path, &tf).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
    }
}
