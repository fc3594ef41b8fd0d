//! Canonical binary encoding of models and protocol messages.
//!
//! Every document starts with a four-byte magic and the schema string
//! `eflsim/1`. Integers are little-endian, reals are little-endian IEEE-754
//! doubles, strings and blobs are length-prefixed. Field order is fixed, so
//! equal values always encode to equal bytes. Model documents double as the
//! on-disk `.eflmodel` checkpoint format.
//!
//! ```text
//! model    := "EFLM" schema tree
//! tree     := 'B' id config params | 'E' id fusion:u8 n:u32 tree{n}
//! id       := label:str version:u32 origin lineage:u64
//! origin   := 0 index:u32 | 1 round:u32 | 2 node:u32 round:u32
//! config   := n:u32 width:u32{n} activation:u8 lr:f64 batch:u64
//!             max_epochs:u32 patience:u32 validation_fraction:f64 l2:f64
//! params   := n:u32 dim:u32{n} m:u64 value:f64{m}
//! report   := "EFLR" schema node:u32 round:u32 changed:u8 lel_acc:f64
//!             entry entry n:u32 entry{n} lel:blob(model)
//! entry    := id accuracy:f64
//! gel      := "EFLG" schema round:u32 gel:blob(model)
//! ```

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::ensemble::gel_label;
use crate::error::{EflError, Result};
use crate::learners::{Activation, LearnerConfig};
use crate::model::{FusionRule, ModelId, ModelTree, Origin, ParamVector};
use crate::node::{AccuracyEntry, NodeReport};

pub const SCHEMA: &str = "eflsim/1";
const MODEL_MAGIC: &[u8; 4] = b"EFLM";
const REPORT_MAGIC: &[u8; 4] = b"EFLR";
const BROADCAST_MAGIC: &[u8; 4] = b"EFLG";
const TAG_BASE: u8 = b'B';
const TAG_ENSEMBLE: u8 = b'E';

/// The server's per-round message to every node.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalBroadcast {
    pub round: u32,
    pub gel: Arc<ModelTree>,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn header(&mut self, magic: &[u8; 4]) {
        self.buf.extend_from_slice(magic);
        self.str(SCHEMA);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn err(&self, reason: impl Into<String>) -> EflError {
        EflError::Decode { offset: self.pos, reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Reads a count of items at least `min_item` bytes each, rejecting counts
    /// the remaining input cannot hold.
    fn count(&mut self, wide: bool, min_item: usize) -> Result<usize> {
        let at = self.pos;
        let n = if wide { self.u64()? } else { u64::from(self.u32()?) };
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(min_item as u64) > left {
            return Err(EflError::Decode { offset: at, reason: format!("count {n} exceeds remaining input") });
        }
        Ok(n as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.count(true, 1)?;
        self.take(n)
    }

    fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let b = self.bytes()?;
        core::str::from_utf8(b)
            .map(String::from)
            .map_err(|_| EflError::Decode { offset: at, reason: "string is not UTF-8".into() })
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(EflError::Decode { offset: 0, reason: format!("bad magic {m:?}") });
        }
        let at = self.pos;
        let schema = self.str()?;
        if schema != SCHEMA {
            return Err(EflError::Decode { offset: at, reason: format!("unsupported schema version {schema:?}") });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_id(w: &mut Writer, id: &ModelId) {
    w.str(&id.label);
    w.u32(id.version);
    match id.origin {
        Origin::Roster(i) => {
            w.u8(0);
            w.u32(i);
        }
        Origin::GlobalRound(r) => {
            w.u8(1);
            w.u32(r);
        }
        Origin::Local { node, round } => {
            w.u8(2);
            w.u32(node);
            w.u32(round);
        }
    }
    w.u64(id.lineage);
}

fn get_id(r: &mut Reader<'_>) -> Result<ModelId> {
    let label = r.str()?;
    let version = r.u32()?;
    let at = r.pos;
    let origin = match r.u8()? {
        0 => Origin::Roster(r.u32()?),
        1 => Origin::GlobalRound(r.u32()?),
        2 => Origin::Local { node: r.u32()?, round: r.u32()? },
        t => return Err(EflError::Decode { offset: at, reason: format!("unknown origin tag {t}") }),
    };
    let lineage = r.u64()?;
    Ok(ModelId { label, version, origin, lineage })
}

fn put_config(w: &mut Writer, c: &LearnerConfig) {
    w.u32(c.hidden_layers.len() as u32);
    for &h in &c.hidden_layers {
        w.u32(h as u32);
    }
    w.u8(match c.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    w.f64(c.learning_rate);
    w.u64(c.batch_size as u64);
    w.u32(c.max_epochs);
    w.u32(c.early_stop_patience);
    w.f64(c.validation_fraction);
    w.f64(c.l2_penalty);
}

fn get_config(r: &mut Reader<'_>) -> Result<LearnerConfig> {
    let n = r.count(false, 4)?;
    let hidden_layers = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let at = r.pos;
    let activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        t => return Err(EflError::Decode { offset: at, reason: format!("unknown activation tag {t}") }),
    };
    Ok(LearnerConfig {
        hidden_layers,
        activation,
        learning_rate: r.f64()?,
        batch_size: r.u64()? as usize,
        max_epochs: r.u32()?,
        early_stop_patience: r.u32()?,
        validation_fraction: r.f64()?,
        l2_penalty: r.f64()?,
    })
}

fn put_tree(w: &mut Writer, t: &ModelTree) {
    match t {
        ModelTree::Base(b) => {
            w.u8(TAG_BASE);
            put_id(w, &b.id);
            put_config(w, &b.config);
            w.u32(b.params.dims().len() as u32);
            for &d in b.params.dims() {
                w.u32(d as u32);
            }
            w.u64(b.params.values().len() as u64);
            for &v in b.params.values() {
                w.f64(v);
            }
        }
        ModelTree::Ensemble(e) => {
            w.u8(TAG_ENSEMBLE);
            put_id(w, &e.id);
            w.u8(match e.fusion {
                FusionRule::MaxProb => 0,
                FusionRule::MeanProb => 1,
            });
            w.u32(e.children.len() as u32);
            for c in &e.children {
                put_tree(w, c);
            }
        }
    }
}

fn get_tree(r: &mut Reader<'_>) -> Result<ModelTree> {
    let at = r.pos;
    match r.u8()? {
        TAG_BASE => {
            let id = get_id(r)?;
            let config = get_config(r)?;
            let nd = r.count(false, 4)?;
            let dims = (0..nd).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let params_at = r.pos;
            let nv = r.count(true, 8)?;
            let values = (0..nv).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let params = ParamVector::new(dims, values)
                .map_err(|e| EflError::Decode { offset: params_at, reason: format!("{e}") })?;
            let tree = ModelTree::base(id, config, params);
            tree.validate().map_err(|e| EflError::Decode { offset: at, reason: format!("{e}") })?;
            Ok(tree)
        }
        TAG_ENSEMBLE => {
            let id = get_id(r)?;
            let fat = r.pos;
            let fusion = match r.u8()? {
                0 => FusionRule::MaxProb,
                1 => FusionRule::MeanProb,
                t => return Err(EflError::Decode { offset: fat, reason: format!("unknown fusion tag {t}") }),
            };
            let n = r.count(false, 1)?;
            let children = (0..n).map(|_| get_tree(r).map(Arc::new)).collect::<Result<Vec<_>>>()?;
            ModelTree::ensemble(id, children, fusion)
                .map_err(|e| EflError::Decode { offset: at, reason: format!("{e}") })
        }
        t => Err(EflError::Decode { offset: at, reason: format!("unknown record tag {t}") }),
    }
}

pub fn serialize_model(model: &ModelTree) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(MODEL_MAGIC);
    put_tree(&mut w, model);
    w.buf
}

pub fn deserialize_model(bytes: &[u8]) -> Result<ModelTree> {
    let mut r = Reader::new(bytes);
    r.header(MODEL_MAGIC)?;
    let t = get_tree(&mut r)?;
    r.finish()?;
    Ok(t)
}

fn put_entry(w: &mut Writer, e: &AccuracyEntry) {
    put_id(w, &e.id);
    w.f64(e.accuracy);
}

fn get_entry(r: &mut Reader<'_>) -> Result<AccuracyEntry> {
    Ok(AccuracyEntry { id: get_id(r)?, accuracy: r.f64()? })
}

pub fn encode_report(report: &NodeReport) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(REPORT_MAGIC);
    w.u32(report.node_id);
    w.u32(report.round);
    w.u8(u8::from(report.changed));
    w.f64(report.lel_accuracy);
    put_entry(&mut w, &report.b2m[0]);
    put_entry(&mut w, &report.b2m[1]);
    w.u32(report.accuracies.len() as u32);
    for e in &report.accuracies {
        put_entry(&mut w, e);
    }
    w.bytes(&serialize_model(&report.lel));
    w.buf
}

pub fn decode_report(bytes: &[u8]) -> Result<NodeReport> {
    let mut r = Reader::new(bytes);
    r.header(REPORT_MAGIC)?;
    let node_id = r.u32()?;
    let round = r.u32()?;
    let at = r.pos;
    let changed = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(EflError::Decode { offset: at, reason: format!("bad flag byte {v}") }),
    };
    let lel_accuracy = r.f64()?;
    let b2m = [get_entry(&mut r)?, get_entry(&mut r)?];
    let n = r.count(false, 1)?;
    let accuracies = (0..n).map(|_| get_entry(&mut r)).collect::<Result<Vec<_>>>()?;
    let lel_at = r.pos;
    let lel = deserialize_model(r.bytes()?).map_err(|e| offset_by(e, lel_at + 8))?;
    r.finish()?;
    Ok(NodeReport { node_id, round, lel: Arc::new(lel), lel_accuracy, b2m, accuracies, changed })
}

pub fn encode_broadcast(msg: &GlobalBroadcast) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(BROADCAST_MAGIC);
    w.u32(msg.round);
    w.bytes(&serialize_model(&msg.gel));
    w.buf
}

pub fn decode_broadcast(bytes: &[u8]) -> Result<GlobalBroadcast> {
    let mut r = Reader::new(bytes);
    r.header(BROADCAST_MAGIC)?;
    let round = r.u32()?;
    let gel_at = r.pos;
    let gel = deserialize_model(r.bytes()?).map_err(|e| offset_by(e, gel_at + 8))?;
    r.finish()?;
    if gel.label() != gel_label(round) {
        return Err(EflError::Decode {
            offset: gel_at,
            reason: format!("round {round} broadcast carries {}", gel.label()),
        });
    }
    Ok(GlobalBroadcast { round, gel: Arc::new(gel) })
}

/// Rebases a nested document's error offset into the outer buffer.
fn offset_by(e: EflError, base: usize) -> EflError {
    match e {
        EflError::Decode { offset, reason } => EflError::Decode { offset: offset + base, reason },
        other => other,
    }
}
