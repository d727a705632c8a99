//! Versioned little-endian container shared by model checkpoints and cached
//! datasets.
//!
//! ```text
//! "ANRM" | u32 version | u32 header_len | header (UTF-8 TOML)
//! u32 record_count | records...
//! record: kind[4] | u32 name_len | name | u8 dtype | u32 rank | u64 dims[rank] | data
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u64. Model records use kind `TENS`,
//! dataset records `DSET`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ANRM";
pub const VERSION: u32 = 1;
pub const KIND_TENSOR: [u8; 4] = *b"TENS";
pub const KIND_DATASET: [u8; 4] = *b"DSET";

const DTYPE_U64: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => f32::DTYPE_CODE,
            Payload::F64(_) => f64::DTYPE_CODE,
            Payload::U64(_) => DTYPE_U64,
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE_CODE {
            0 => Payload::F32(t.data().iter().map(|v| v.to_f64_lossy() as f32).collect()),
            _ => Payload::F64(t.data().iter().map(|v| v.to_f64_lossy()).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub kind: [u8; 4],
    pub name: String,
    pub dims: Vec<u64>,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: String,
    pub records: Vec<Record>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.kind);
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.payload.dtype());
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &r.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(at as u64, format!("unsupported version {version}")));
        }
        let len = r.u32("header length")? as usize;
        let at = r.pos;
        let header = std::str::from_utf8(r.take(len, "header")?)
            .map_err(|e| Error::format(at as u64 + e.valid_up_to() as u64, "header is not UTF-8"))?
            .to_string();
        let count = r.u32("record count")?;
        let mut records = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let kind: [u8; 4] = r.take(4, "record kind")?.try_into().unwrap();
            if kind != KIND_TENSOR && kind != KIND_DATASET {
                return Err(Error::format(at as u64, format!("unknown record kind {kind:?}")));
            }
            let name_len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "record name")?)
                .map_err(|_| Error::format(at as u64, "record name is not UTF-8"))?
                .to_string();
            let at = r.pos;
            let dtype = r.take(1, "dtype")?[0];
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u64("dimension")?);
            }
            let n = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= bytes.len() as u64)
                .ok_or_else(|| Error::format(r.pos as u64, format!("record {name} is too large")))?
                as usize;
            let payload = match dtype {
                0 => Payload::F32(
                    r.take(n * 4, "tensor data")?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => Payload::F64(
                    r.take(n * 8, "tensor data")?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => Payload::U64(
                    r.take(n * 8, "tensor data")?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(Error::format(at as u64, format!("unknown dtype {other}"))),
            };
            records.push(Record {
                kind,
                name,
                dims,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after last record"));
        }
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn record(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::format(0, format!("missing record {name}")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn tensor_record<T: Scalar>(name: String, t: &Tensor<T>) -> Record {
    Record {
        kind: KIND_TENSOR,
        name,
        dims: t.shape().iter().map(|&d| d as u64).collect(),
        payload: Payload::from_tensor(t),
    }
}

fn model_container<T: Scalar>(model: &Model<T>) -> Container {
    let mut records: Vec<Record> = model
        .params()
        .iter()
        .map(|p| tensor_record(format!("param/{}", p.name), &p.value))
        .collect();
    for layer in model.norm_layers() {
        let r = &layer.running;
        records.push(tensor_record(
            format!("running/{}/mean", layer.name),
            &Tensor::from_vec(r.mean.clone()),
        ));
        records.push(tensor_record(
            format!("running/{}/sq", layer.name),
            &Tensor::from_vec(r.sq.clone()),
        ));
        records.push(Record {
            kind: KIND_TENSOR,
            name: format!("running/{}/updates_seen", layer.name),
            dims: vec![1],
            payload: Payload::U64(vec![r.updates_seen]),
        });
    }
    Container {
        header: model.config().to_canonical(),
        records,
    }
}

pub fn checkpoint_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    model_container(model).to_bytes()
}

pub fn checkpoint_write<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    model_container(model).write(path)
}

pub fn checkpoint_read<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let c = Container::from_bytes(bytes)?;
    let config = ModelConfig::from_canonical(&c.header)
        .map_err(|e| Error::format(12, format!("header: {e}")))?;
    let mut model = build_model::<T>(&config).map_err(|e| Error::format(12, format!("header: {e}")))?;
    let expected = 3 * model.norm_layers().len() + model.params().len();
    if c.records.len() != expected {
        return Err(Error::format(
            0,
            format!("expected {expected} records, found {}", c.records.len()),
        ));
    }
    for p in model.params_mut() {
        let data = floats::<T>(c.record(&format!("param/{}", p.name))?, p.value.shape())?;
        p.value.data_mut().copy_from_slice(&data);
    }
    for layer in model.norm_layers_mut() {
        let ch = [layer.running.channels()];
        layer.running.mean = floats::<T>(c.record(&format!("running/{}/mean", layer.name))?, &ch)?;
        layer.running.sq = floats::<T>(c.record(&format!("running/{}/sq", layer.name))?, &ch)?;
        let seen = c.record(&format!("running/{}/updates_seen", layer.name))?;
        layer.running.updates_seen = match &seen.payload {
            Payload::U64(v) if v.len() == 1 => v[0],
            _ => return Err(Error::format(0, format!("bad record {}", seen.name))),
        };
    }
    Ok(model)
}

fn floats<T: Scalar>(r: &Record, shape: &[usize]) -> Result<Vec<T>> {
    if r.dims.iter().map(|&d| d as usize).collect::<Vec<_>>() != shape {
        return Err(Error::format(
            0,
            format!("record {} has dims {:?}, expected {shape:?}", r.name, r.dims),
        ));
    }
    match (&r.payload, T::DTYPE_CODE) {
        (Payload::F32(v), 0) => Ok(v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect()),
        (Payload::F64(v), 1) => Ok(v.iter().map(|&x| T::from_f64_lossy(x)).collect()),
        _ => Err(Error::format(
            0,
            format!("record {} has the wrong dtype for this build", r.name),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Mode, ModelConfig, SensorConfig};
    use crate::normalization::NormSpec;
    use crate::tape::{PaddingMode, Tape};

    fn trained() -> Model<f32> {
        let mut cfg = ModelConfig::sensor(2, 3, NormSpec::batch_norm());
        cfg.sensor = SensorConfig {
            per_channel_blocks: 1,
            merged_blocks: 1,
            convs_per_block: 2,
            per_channel_growth: 2,
            merged_growth: 3,
            kernel_size: 3,
            padding: PaddingMode::Zero,
        };
        let mut m = build_model::<f32>(&cfg).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::from_fn(&[3, 2, 8], |i| (i as f32 * 0.37).sin());
        m.forward_train(&mut tape, x).unwrap();
        m
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = trained();
        let bytes = checkpoint_bytes(&m);
        let back: Model<f32> = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(checkpoint_bytes(&back), bytes);
    }

    #[test]
    fn restores_running_stats_for_eval() {
        let m = trained();
        let back: Model<f32> = checkpoint_from_bytes(&checkpoint_bytes(&m)).unwrap();
        let x = Tensor::from_fn(&[2, 2, 8], |i| (i as f32 * 0.11).cos());
        assert_eq!(
            m.predict(x.clone(), Mode::EvalNonAdaptive).unwrap(),
            back.predict(x, Mode::EvalNonAdaptive).unwrap()
        );
    }

    #[test]
    fn corrupted_bytes_are_format_errors() {
        let bytes = checkpoint_bytes(&trained());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes::<f32>(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(checkpoint_from_bytes::<f32>(&bad), Err(Error::Format { offset: 4, .. })));
        // Flip a byte inside the TOML header.
        let mut bad = bytes.clone();
        bad[14] = 0xFF;
        assert!(matches!(checkpoint_from_bytes::<f32>(&bad), Err(Error::Format { .. })));
        for cut in [3, 11, 40, bytes.len() - 1] {
            assert!(matches!(
                checkpoint_from_bytes::<f32>(&bytes[..cut]),
                Err(Error::Format { .. })
            ));
        }
        assert!(checkpoint_from_bytes::<f64>(&bytes).is_err());
    }

    #[test]
    fn every_header_byte_flip_is_handled() {
        let bytes = checkpoint_bytes(&trained());
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        for i in 0..12 + header_len {
            let mut bad = bytes.clone();
            bad[i] ^= 0x5A;
            // Either rejected cleanly or (for benign edits) still a valid model.
            let _ = checkpoint_from_bytes::<f32>(&bad);
        }
    }
}
