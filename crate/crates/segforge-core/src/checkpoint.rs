//! Checkpoint codec: full model state to and from one little-endian blob.
//!
//! Layout: magic "SFCK", u32 version, u32 config length + config JSON, u32
//! record count, then records. Record: u16 name length, name bytes, u8 dtype
//! tag, u8 rank, u32 dims[rank], raw values. Parameters are written in
//! registration order, then each batchnorm's running_mean / running_var /
//! initialized triple, so save -> load -> save is the byte identity.
//!
//! Decoding treats the input as untrusted: every length is bounds-checked
//! against the remaining bytes before anything is allocated, so a corrupted
//! count or dim field reports truncation instead of attempting a huge
//! allocation.

use std::fs;
use std::path::Path;

use crate::element::{Dtype, Element};
use crate::error::CheckpointError;
use crate::model::{Model, ModelConfig};
use crate::params::{ParamId, BN_SUFFIXES};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"SFCK";
pub const VERSION: u32 = 1;

pub fn save_checkpoint<T: Element>(
    model: &Model<T>,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<Model<T>, CheckpointError> {
    let bytes = fs::read(path)?;
    load_checkpoint_bytes(&bytes)
}

pub fn checkpoint_bytes<T: Element>(model: &Model<T>) -> Vec<u8> {
    let config_json = serde_json::to_string(&model.config).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    let n_records = model.reg.n_params() + BN_SUFFIXES.len() * model.reg.n_bns();
    out.extend_from_slice(&(n_records as u32).to_le_bytes());
    for (_, p) in model.reg.iter_params() {
        push_record(&mut out, &p.name, p.value.shape(), p.value.data());
    }
    for (_, b) in model.reg.iter_bns() {
        let vec_shape = Shape::new(vec![b.state.channels()]).expect("rank 1");
        push_record(
            &mut out,
            &format!("{}.running_mean", b.name),
            &vec_shape,
            &b.state.running_mean,
        );
        push_record(
            &mut out,
            &format!("{}.running_var", b.name),
            &vec_shape,
            &b.state.running_var,
        );
        let flag = if b.state.initialized { T::ONE } else { T::ZERO };
        push_record(
            &mut out,
            &format!("{}.initialized", b.name),
            &Shape::scalar(),
            &[flag],
        );
    }
    out
}

fn push_record<T: Element>(out: &mut Vec<u8>, name: &str, shape: &Shape, values: &[T]) {
    debug_assert!(name.len() <= u16::MAX as usize);
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(shape.rank() as u8);
    for &d in shape.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in values {
        v.write_le(out);
    }
}

/// Element type stored in a checkpoint, read from the first record without
/// touching the values. Lets a caller pick the right `load_checkpoint_bytes`
/// instantiation.
pub fn peek_dtype(bytes: &[u8]) -> Result<Dtype, CheckpointError> {
    let (mut r, _, count) = read_preamble(bytes)?;
    if count == 0 {
        return Err(CheckpointError::Truncated {
            context: "record table is empty",
        });
    }
    let name_len = r.u16("record name length")? as usize;
    r.take(name_len, "record name")?;
    let tag = r.u8("record dtype")?;
    Dtype::from_tag(tag).ok_or(CheckpointError::BadDtype { index: 0, tag })
}

pub fn load_checkpoint_bytes<T: Element>(bytes: &[u8]) -> Result<Model<T>, CheckpointError> {
    let (mut r, config, count) = read_preamble(bytes)?;
    // Seed is irrelevant: every parameter must be overwritten below or the
    // load fails with MissingParameter.
    let mut model = Model::<T>::build(config, 0)?;
    let mut param_seen = vec![false; model.reg.n_params()];
    let mut bn_seen = vec![[false; BN_SUFFIXES.len()]; model.reg.n_bns()];

    for index in 0..count {
        let rec = read_record::<T>(&mut r, index)?;
        apply_record(&mut model, rec, &mut param_seen, &mut bn_seen)?;
    }
    if r.remaining() > 0 {
        return Err(CheckpointError::TrailingBytes { n: r.remaining() });
    }
    if let Some(i) = param_seen.iter().position(|&s| !s) {
        return Err(CheckpointError::MissingParameter {
            name: model.reg.param(ParamId(i)).name.clone(),
        });
    }
    for (i, seen) in bn_seen.iter().enumerate() {
        if let Some(j) = seen.iter().position(|&s| !s) {
            let bn_name = model.reg.iter_bns().nth(i).expect("index in range").1;
            return Err(CheckpointError::MissingParameter {
                name: format!("{}.{}", bn_name.name, BN_SUFFIXES[j]),
            });
        }
    }
    Ok(model)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated { context });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &'static str) -> Result<u16, CheckpointError> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn read_preamble(bytes: &[u8]) -> Result<(Reader<'_>, ModelConfig, usize), CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            found: version,
            supported: VERSION,
        });
    }
    let config_len = r.u32("config length")? as usize;
    let config_str = std::str::from_utf8(r.take(config_len, "config blob")?)
        .map_err(|_| CheckpointError::BadConfig("config is not valid UTF-8".into()))?;
    let config: ModelConfig =
        serde_json::from_str(config_str).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let count = r.u32("record count")? as usize;
    Ok((r, config, count))
}

struct Record<T: Element> {
    name: String,
    value: Tensor<T>,
}

fn read_record<T: Element>(r: &mut Reader<'_>, index: usize) -> Result<Record<T>, CheckpointError> {
    let name_len = r.u16("record name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "record name")?)
        .map_err(|_| CheckpointError::BadName)?
        .to_string();
    let tag = r.u8("record dtype")?;
    let dtype = Dtype::from_tag(tag).ok_or(CheckpointError::BadDtype { index, tag })?;
    if dtype != T::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            expected: T::DTYPE,
            found: dtype,
        });
    }
    let rank = r.u8("record rank")?;
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        dims.push(r.u32("record dims")? as usize);
    }
    let shape = Shape::new(dims).map_err(|_| CheckpointError::BadRank { index, rank })?;
    let numel = shape
        .dims()
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or(CheckpointError::DimsOverflow)?;
    let byte_len = numel
        .checked_mul(dtype.byte_width())
        .ok_or(CheckpointError::DimsOverflow)?;
    let raw = r.take(byte_len, "record values")?;
    let data: Vec<T> = raw
        .chunks_exact(dtype.byte_width())
        .map(T::read_le)
        .collect();
    let value = Tensor::new(shape, data).expect("numel matches by construction");
    Ok(Record { name, value })
}

fn apply_record<T: Element>(
    model: &mut Model<T>,
    rec: Record<T>,
    param_seen: &mut [bool],
    bn_seen: &mut [[bool; 3]],
) -> Result<(), CheckpointError> {
    // Batchnorm state records are "<bn name>.<suffix>"; the registry reserves
    // those names, so they can never collide with a real parameter.
    if let Some((prefix, suffix)) = rec.name.rsplit_once('.') {
        if let Some(si) = BN_SUFFIXES.iter().position(|&s| s == suffix) {
            if let Some(id) = model.reg.find_bn(prefix) {
                let entry = model.reg.bn_mut(id);
                let expected = match suffix {
                    "initialized" => Shape::scalar(),
                    _ => Shape::new(vec![entry.state.channels()]).expect("rank 1"),
                };
                if *rec.value.shape() != expected {
                    return Err(CheckpointError::ShapeMismatch {
                        name: rec.name,
                        expected: expected.to_string(),
                        got: rec.value.shape().to_string(),
                    });
                }
                if std::mem::replace(&mut bn_seen[id.0][si], true) {
                    return Err(CheckpointError::DuplicateParameter { name: rec.name });
                }
                match suffix {
                    "running_mean" => entry.state.running_mean = rec.value.data().to_vec(),
                    "running_var" => entry.state.running_var = rec.value.data().to_vec(),
                    _ => entry.state.initialized = rec.value.scalar_value() != T::ZERO,
                }
                return Ok(());
            }
        }
    }
    let id = model
        .reg
        .find(&rec.name)
        .ok_or_else(|| CheckpointError::UnknownParameter {
            name: rec.name.clone(),
        })?;
    let param = model.reg.param_mut(id);
    if param.value.shape() != rec.value.shape() {
        return Err(CheckpointError::ShapeMismatch {
            name: rec.name,
            expected: param.value.shape().to_string(),
            got: rec.value.shape().to_string(),
        });
    }
    if std::mem::replace(&mut param_seen[id.0], true) {
        return Err(CheckpointError::DuplicateParameter { name: rec.name });
    }
    param.value = rec.value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use crate::rng::SeedStream;
    use crate::tape::Mode;

    /// Smallest legal config; keeps crafted-byte tests fast.
    fn tiny_config() -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            filters: [2, 2, 2, 2, 2],
            se_reduction: 1,
            aspp_rates: vec![1, 6],
            input_size: 8,
            arch: Arch::Resunetpp,
        }
    }

    /// Model whose BN state is past the all-default init, so round-trips
    /// exercise a non-trivial payload.
    fn trained_tiny() -> Model<f64> {
        let mut model = Model::<f64>::build(tiny_config(), 9).unwrap();
        let mut stream = SeedStream::derived(1, "ckpt.test.input", &[]);
        let x = Tensor::randn(Shape::nchw(2, 1, 8, 8), &mut stream);
        model.forward(&x, Mode::Train).unwrap();
        model
    }

    #[test]
    fn save_load_save_is_byte_identity() {
        let model = trained_tiny();
        let bytes = checkpoint_bytes(&model);
        let loaded = load_checkpoint_bytes::<f64>(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&loaded), bytes);
    }

    #[test]
    fn loaded_model_forwards_bitwise_identically() {
        let mut model = trained_tiny();
        let bytes = checkpoint_bytes(&model);
        let mut loaded = load_checkpoint_bytes::<f64>(&bytes).unwrap();
        let mut stream = SeedStream::derived(2, "ckpt.test.probe", &[]);
        for _ in 0..3 {
            let x = Tensor::randn(Shape::nchw(1, 1, 8, 8), &mut stream);
            let a = model.forward(&x, Mode::Infer).unwrap();
            let b = loaded.forward(&x, Mode::Infer).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn record_count_matches_registry() {
        let model = trained_tiny();
        let bytes = checkpoint_bytes(&model);
        let (mut r, _, count) = read_preamble(&bytes).unwrap();
        assert_eq!(count, model.reg.n_params() + 3 * model.reg.n_bns());
        for i in 0..count {
            read_record::<f64>(&mut r, i).unwrap();
        }
        assert_eq!(r.remaining(), 0);
    }

    #[test]
    fn every_truncation_errors_instead_of_panicking() {
        let bytes = checkpoint_bytes(&trained_tiny());
        for len in 0..bytes.len() {
            let err = load_checkpoint_bytes::<f64>(&bytes[..len]).unwrap_err();
            if len + 1 == bytes.len() {
                assert!(matches!(err, CheckpointError::Truncated { .. }));
            }
        }
    }

    #[test]
    fn bad_magic_and_version_are_distinct() {
        let mut bytes = checkpoint_bytes(&trained_tiny());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            load_checkpoint_bytes::<f64>(&wrong).unwrap_err(),
            CheckpointError::BadMagic
        ));
        bytes[4] = 2;
        match load_checkpoint_bytes::<f64>(&bytes).unwrap_err() {
            CheckpointError::BadVersion { found, supported } => {
                assert_eq!((found, supported), (2, 1));
            }
            other => panic!("expected BadVersion, got {other:?}"),
        }
    }

    #[test]
    fn wrong_element_type_is_a_dtype_mismatch() {
        let model = Model::<f32>::build(tiny_config(), 9).unwrap();
        let bytes = checkpoint_bytes(&model);
        assert_eq!(peek_dtype(&bytes).unwrap(), Dtype::F32);
        assert!(matches!(
            load_checkpoint_bytes::<f64>(&bytes).unwrap_err(),
            CheckpointError::DtypeMismatch { .. }
        ));
    }

    /// Preamble plus hand-picked records, for the name/shape error paths.
    fn crafted(records: &[(&str, Shape, Vec<f64>)]) -> Vec<u8> {
        let config_json = serde_json::to_string(&tiny_config()).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(config_json.as_bytes());
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, shape, values) in records {
            push_record(&mut out, name, shape, values);
        }
        out
    }

    #[test]
    fn unknown_duplicate_and_missing_names_are_distinct() {
        let model = trained_tiny();
        let first = model.reg.param(ParamId(0));
        let rec = (
            first.name.as_str(),
            first.value.shape().clone(),
            first.value.data().to_vec(),
        );

        let unknown = crafted(&[("nope.w", Shape::new(vec![1]).unwrap(), vec![0.0])]);
        assert!(matches!(
            load_checkpoint_bytes::<f64>(&unknown).unwrap_err(),
            CheckpointError::UnknownParameter { name } if name == "nope.w"
        ));

        let duplicate = crafted(&[rec.clone(), rec.clone()]);
        assert!(matches!(
            load_checkpoint_bytes::<f64>(&duplicate).unwrap_err(),
            CheckpointError::DuplicateParameter { .. }
        ));

        let missing = crafted(&[rec]);
        match load_checkpoint_bytes::<f64>(&missing).unwrap_err() {
            CheckpointError::MissingParameter { name } => {
                assert_eq!(name, model.reg.param(ParamId(1)).name);
            }
            other => panic!("expected MissingParameter, got {other:?}"),
        }
    }

    #[test]
    fn wrong_shape_is_reported_with_both_shapes() {
        let model = trained_tiny();
        let name = model.reg.param(ParamId(0)).name.clone();
        let bad = crafted(&[(name.as_str(), Shape::new(vec![3]).unwrap(), vec![0.0; 3])]);
        match load_checkpoint_bytes::<f64>(&bad).unwrap_err() {
            CheckpointError::ShapeMismatch { expected, got, .. } => {
                assert_eq!(got, "[3]");
                assert_ne!(expected, got);
            }
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = checkpoint_bytes(&trained_tiny());
        bytes.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(
            load_checkpoint_bytes::<f64>(&bytes).unwrap_err(),
            CheckpointError::TrailingBytes { n: 3 }
        ));
    }

    #[test]
    fn huge_declared_dims_error_without_allocating() {
        // Rank-4 record claiming ~4e36 elements; must report corruption, not
        // attempt the allocation.
        let config_json = serde_json::to_string(&tiny_config()).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(config_json.as_bytes());
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&6u16.to_le_bytes());
        out.extend_from_slice(b"stem.w");
        out.push(Dtype::F64.tag());
        out.push(4);
        for _ in 0..4 {
            out.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let err = load_checkpoint_bytes::<f64>(&out).unwrap_err();
        assert!(matches!(
            err,
            CheckpointError::DimsOverflow | CheckpointError::Truncated { .. }
        ));
    }
}
