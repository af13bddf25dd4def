//! Binary dataset and checkpoint files. All integers and floats are
//! little-endian and both formats end with a CRC32 of every preceding byte.
//!
//! Dataset (`CSIP`):
//!
//! ```text
//! magic "CSIP" | version u32 | M_R u32 | W u32 | D u32 | count u64
//! count x { timestamp f64 | ue_id u32 | position D x f32 | H M_R x W x (re f32, im f32), row-major }
//! crc32 u32
//! ```
//!
//! Checkpoint (`CSLK`):
//!
//! ```text
//! magic "CSLK" | version u32
//! header_len u32 | header JSON (model layout and the configuration echo)
//! param_count u32 | param_count x { name_len u16 | name | kind u8 | rank u8 | dims rank x u32 | f32 data }
//! stage_count u32 | stage_count x { stage u8 | n u32 | n x f64 loss }
//! adam_step u64 | param_count x { len u32 | m len x f32 | v len x f32 }
//! crc32 u32
//! ```
//!
//! Batch-norm running statistics are ordinary entries of kind 1.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel_sim::{CsiMeasurement, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::numerics::optim::AdamState;
use crate::numerics::{ComplexMatrix, ParamKind, ParamStore, Tensor};
use crate::train::{Progress, Stage, StageLog};

pub const DATASET_MAGIC: &[u8; 4] = b"CSIP";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSLK";
pub const CHECKPOINT_VERSION: u32 = 1;
const POSITION_DIMS: u32 = 2;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the trailing CRC and the magic, returning a reader positioned
    /// after the magic.
    fn open(data: &'a [u8], magic: &[u8; 4], what: &str) -> Result<Self> {
        if data.len() < 8 {
            return Err(Error::Format(format!("{what} file is truncated ({} bytes)", data.len())));
        }
        let (body, tail) = data.split_at(data.len() - 4);
        if &body[..4] != magic {
            return Err(Error::Format(format!("not a {what} file (magic {:?})", &body[..4])));
        }
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Format(format!("{what} CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        Ok(Reader { data: body, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Format(format!("unexpected end of file at byte {}", self.pos)))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn version(&mut self, expected: u32, what: &str) -> Result<()> {
        let v = self.u32()?;
        if v != expected {
            return Err(Error::Format(format!("{what} format version {v} is not supported (expected {expected})")));
        }
        Ok(())
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

fn finite(v: f32, what: &str, record: usize) -> Result<f32> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Format(format!("non-finite {what} in record {record}")))
    }
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(ds.m_r as u32);
    w.u32(ds.w as u32);
    w.u32(POSITION_DIMS);
    w.u64(ds.records.len() as u64);
    for (i, r) in ds.records.iter().enumerate() {
        if r.h.rows() != ds.m_r || r.h.cols() != ds.w {
            return Err(Error::dim("dataset", format!("record {i} is {}x{}", r.h.rows(), r.h.cols())));
        }
        w.f64(r.timestamp);
        w.u32(r.ue_id);
        r.position.iter().for_each(|&p| w.f32(p));
        for (&re, &im) in r.h.re().data().iter().zip(r.h.im().data()) {
            w.f32(re);
            w.f32(im);
        }
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, DATASET_MAGIC, "dataset")?;
    r.version(DATASET_VERSION, "dataset")?;
    let m_r = r.u32()? as usize;
    let w = r.u32()? as usize;
    let d = r.u32()?;
    let count = r.u64()?;
    if d != POSITION_DIMS {
        return Err(Error::Format(format!("positions have {d} dimensions, only {POSITION_DIMS} are supported")));
    }
    if m_r == 0 || w == 0 {
        return Err(Error::Format(format!("channel dimensions {m_r}x{w}")));
    }
    let record_len = 8 + 4 + 4 * d as u64 + 8 * (m_r * w) as u64;
    let remaining = (bytes.len() - 4 - r.pos) as u64;
    if count.checked_mul(record_len) != Some(remaining) {
        return Err(Error::Format(format!("header says {count} records, body holds {remaining} bytes of {record_len}-byte records")));
    }
    let mut records = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let timestamp = r.f64()?;
        if !timestamp.is_finite() {
            return Err(Error::Format(format!("non-finite timestamp in record {i}")));
        }
        let ue_id = r.u32()?;
        let position = [finite(r.f32()?, "position", i)?, finite(r.f32()?, "position", i)?];
        let mut re = Vec::with_capacity(m_r * w);
        let mut im = Vec::with_capacity(m_r * w);
        for _ in 0..m_r * w {
            re.push(finite(r.f32()?, "channel", i)?);
            im.push(finite(r.f32()?, "channel", i)?);
        }
        let h = ComplexMatrix::new(Tensor::new(&[m_r, w], re)?, Tensor::new(&[m_r, w], im)?)?;
        records.push(CsiMeasurement {
            h,
            position,
            timestamp,
            ue_id,
        });
    }
    r.done()?;
    Ok(Dataset { m_r, w, records })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelSpec,
    config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    /// Echo of the configuration the model was trained with.
    pub config: serde_json::Value,
    pub store: ParamStore<f32>,
    pub progress: Progress,
}

fn stage_code(s: Stage) -> u8 {
    match s {
        Stage::Base => 0,
        Stage::FeatureFusion => 1,
        Stage::MapFusion => 2,
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let header = serde_json::to_vec(&Header {
        model: ck.spec.clone(),
        config: ck.config.clone(),
    })?;
    w.u32(header.len() as u32);
    w.bytes(&header);

    let entries = ck.store.entries();
    w.u32(entries.len() as u32);
    for e in entries {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("parameter name too long: {}", e.name)))?;
        w.u16(name_len);
        w.bytes(name);
        w.u8(match e.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        w.u8(e.value.shape().len() as u8);
        e.value.shape().iter().for_each(|&d| w.u32(d as u32));
        e.value.data().iter().for_each(|&v| w.f32(v));
    }

    w.u32(ck.progress.stages.len() as u32);
    for s in &ck.progress.stages {
        w.u8(stage_code(s.stage));
        w.u32(s.losses.len() as u32);
        s.losses.iter().for_each(|&l| w.f64(l));
    }

    let adam = &ck.progress.adam;
    w.u64(adam.step);
    for i in 0..entries.len() {
        let m = adam.m.get(i).map_or(&[][..], Vec::as_slice);
        let v = adam.v.get(i).map_or(&[][..], Vec::as_slice);
        w.u32(m.len() as u32);
        m.iter().chain(v).for_each(|&x| w.f32(x));
    }
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    r.version(CHECKPOINT_VERSION, "checkpoint")?;
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let kind = match r.u8()? {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(Error::Format(format!("unknown parameter kind {k} for {name}"))),
        };
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("shape overflow".into()))?;
        let data = r.f32s(n)?;
        store.add(name, Tensor::new(&shape, data)?, kind)?;
    }

    let stages = r.u32()? as usize;
    let mut progress = Progress::default();
    for _ in 0..stages {
        let stage = match r.u8()? {
            0 => Stage::Base,
            1 => Stage::FeatureFusion,
            2 => Stage::MapFusion,
            s => return Err(Error::Format(format!("unknown training stage {s}"))),
        };
        let n = r.u32()? as usize;
        let losses = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        progress.stages.push(StageLog { stage, losses });
    }

    let mut adam = AdamState {
        step: r.u64()?,
        ..Default::default()
    };
    for _ in 0..count {
        let n = r.u32()? as usize;
        adam.m.push(r.f32s(n)?);
        adam.v.push(r.f32s(n)?);
    }
    // An optimizer that never stepped has no moment vectors.
    if adam.m.iter().all(Vec::is_empty) && adam.step == 0 {
        adam.m.clear();
        adam.v.clear();
    }
    progress.adam = adam;
    r.done()?;
    Ok(Checkpoint {
        spec: header.model,
        config: header.config,
        store,
        progress,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
