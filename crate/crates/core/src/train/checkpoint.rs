//! Versioned binary checkpoints.
//!
//! Layout (all integers and floats little-endian, every float stored as
//! f64 regardless of the training precision):
//!
//! ```text
//! magic               8 bytes  "SARMPCKP"
//! format version      u32      currently 1
//! precision tag       u8       4 = f32 state, 8 = f64 state
//! entity vocabulary   u64      FNV-1a fingerprint
//! relation vocabulary u64      FNV-1a fingerprint
//! hyperparameters     k u64, tau f64, hops u64, d_e u64, d_p u64,
//!                     heads u64, max_neighbors u64, aggregator u8,
//!                     selector u8
//! num_relations       u64      embedding rows (inverses included)
//! epoch               u64
//! best_valid_mrr      f64
//! best_epoch          u64
//! optimizer kind      u8       0 = sgd, 1 = adam
//! optimizer t         u64
//! group count         u64
//! per group           name_len u64, name bytes, rank u64, dims u64...,
//!                     values f64 * numel
//! adam moments        (iff kind == 1) per group in the same order:
//!                     first-moment values, then second-moment values
//! checksum            u64      FNV-1a over all preceding bytes
//! ```
//!
//! Round-trips are byte-exact: saving a loaded checkpoint reproduces the
//! identical file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::optim::{OptimizerKind, OptState};
use super::TrainState;
use crate::kg::KnowledgeGraph;
use crate::model::{Aggregator, HyperParams, ModelParams, Selector};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SARMPCKP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(
        "checkpoint was trained on a different vocabulary \
         (entities {expected_entities:#x}/{got_entities:#x}, \
         relations {expected_relations:#x}/{got_relations:#x})"
    )]
    VocabMismatch {
        expected_entities: u64,
        got_entities: u64,
        expected_relations: u64,
        got_relations: u64,
    },
}

/// A trained state pinned to its hyperparameters and vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub hyper: HyperParams,
    pub num_relations: usize,
    pub entity_fingerprint: u64,
    pub relation_fingerprint: u64,
    pub state: TrainState<S>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn verify_vocab(&self, kg: &KnowledgeGraph) -> Result<(), CheckpointError> {
        let ents = kg.entities().fingerprint();
        let rels = kg.relations().fingerprint();
        if ents != self.entity_fingerprint || rels != self.relation_fingerprint {
            return Err(CheckpointError::VocabMismatch {
                expected_entities: self.entity_fingerprint,
                got_entities: ents,
                expected_relations: self.relation_fingerprint,
                got_relations: rels,
            });
        }
        Ok(())
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
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
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn tensor<S: Scalar>(&mut self, t: &Tensor<S>) {
        for &v in t.data() {
            self.f64(v.widen());
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    ckpt: &Checkpoint<S>,
) -> Result<(), CheckpointError> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u8(std::mem::size_of::<S>() as u8);
    w.u64(ckpt.entity_fingerprint);
    w.u64(ckpt.relation_fingerprint);

    let h = &ckpt.hyper;
    w.u64(h.k as u64);
    w.f64(h.tau);
    w.u64(h.hops as u64);
    w.u64(h.d_e as u64);
    w.u64(h.d_p as u64);
    w.u64(h.heads as u64);
    w.u64(h.max_neighbors as u64);
    w.u8(match h.aggregator {
        Aggregator::MultiHeadAttention => 0,
        Aggregator::Mean => 1,
        Aggregator::ConcatMlp => 2,
    });
    w.u8(match h.selector {
        Selector::SemanticTopK => 0,
        Selector::RandomK => 1,
        Selector::DotProductTopK => 2,
    });
    w.u64(ckpt.num_relations as u64);

    let st = &ckpt.state;
    w.u64(st.epoch as u64);
    w.f64(st.best_valid_mrr);
    w.u64(st.best_epoch as u64);
    w.u8(match st.opt.kind {
        OptimizerKind::Sgd => 0,
        OptimizerKind::Adam => 1,
    });
    w.u64(st.opt.t);

    let groups = st.params.groups();
    w.u64(groups.len() as u64);
    for (name, tensor) in &groups {
        w.u64(name.len() as u64);
        w.bytes(name.as_bytes());
        w.u64(tensor.shape().len() as u64);
        for &d in tensor.shape() {
            w.u64(d as u64);
        }
        w.tensor(tensor);
    }
    if st.opt.kind == OptimizerKind::Adam {
        for (m, v) in st.opt.first_moment.iter().zip(&st.opt.second_moment) {
            w.tensor(m);
            w.tensor(v);
        }
    }

    let checksum = fnv1a(&w.buf);
    w.u64(checksum);

    let tmp = path.with_extension("tmp");
    let io_err = |source: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(&w.buf).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor<S: Scalar>(&mut self, shape: Vec<usize>) -> Result<Tensor<S>, CheckpointError> {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(S::of(self.f64()?));
        }
        Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>, CheckpointError> {
    let io_err = |source: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut buf)
        .map_err(io_err)?;

    if buf.len() < MAGIC.len() + 4 + 8 {
        return Err(CheckpointError::Corrupt("file shorter than header".into()));
    }
    let (payload, checksum_bytes) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(checksum_bytes.try_into().unwrap());
    if fnv1a(payload) != stored {
        return Err(CheckpointError::Corrupt("checksum mismatch".into()));
    }

    let mut r = Reader { buf: payload, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let _precision = r.u8()?;
    let entity_fingerprint = r.u64()?;
    let relation_fingerprint = r.u64()?;

    let k = r.u64()? as usize;
    let tau = r.f64()?;
    let hops = r.u64()? as usize;
    let d_e = r.u64()? as usize;
    let d_p = r.u64()? as usize;
    let heads = r.u64()? as usize;
    let max_neighbors = r.u64()? as usize;
    let aggregator = match r.u8()? {
        0 => Aggregator::MultiHeadAttention,
        1 => Aggregator::Mean,
        2 => Aggregator::ConcatMlp,
        x => return Err(CheckpointError::Corrupt(format!("bad aggregator tag {x}"))),
    };
    let selector = match r.u8()? {
        0 => Selector::SemanticTopK,
        1 => Selector::RandomK,
        2 => Selector::DotProductTopK,
        x => return Err(CheckpointError::Corrupt(format!("bad selector tag {x}"))),
    };
    let hyper = HyperParams {
        k,
        tau,
        hops,
        d_e,
        d_p,
        heads,
        aggregator,
        selector,
        max_neighbors,
    };
    let num_relations = r.u64()? as usize;

    let epoch = r.u64()? as usize;
    let best_valid_mrr = r.f64()?;
    let best_epoch = r.u64()? as usize;
    let opt_kind = match r.u8()? {
        0 => OptimizerKind::Sgd,
        1 => OptimizerKind::Adam,
        x => return Err(CheckpointError::Corrupt(format!("bad optimizer tag {x}"))),
    };
    let opt_t = r.u64()?;

    let group_count = r.u64()? as usize;
    let mut named: Vec<(String, Tensor<S>)> = Vec::with_capacity(group_count);
    for _ in 0..group_count {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("group name not utf-8".into()))?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        named.push((name, r.tensor(shape)?));
    }

    // Rebuild params by name over a freshly shaped skeleton.
    let mut params = ModelParams::<S>::init(num_relations, &hyper, 0);
    {
        let mut groups = params.groups_mut();
        if groups.len() != named.len() {
            return Err(CheckpointError::Corrupt(format!(
                "expected {} parameter groups, file has {}",
                groups.len(),
                named.len()
            )));
        }
        for ((want_name, slot), (got_name, tensor)) in groups.iter_mut().zip(named) {
            if *want_name != got_name {
                return Err(CheckpointError::Corrupt(format!(
                    "parameter group order mismatch: expected {want_name}, found {got_name}"
                )));
            }
            if slot.shape() != tensor.shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "shape mismatch for {got_name}: {:?} vs {:?}",
                    slot.shape(),
                    tensor.shape()
                )));
            }
            **slot = tensor;
        }
    }

    let mut opt = OptState::new(opt_kind, &params);
    opt.t = opt_t;
    if opt_kind == OptimizerKind::Adam {
        for gi in 0..group_count {
            let shape = opt.first_moment[gi].shape().to_vec();
            opt.first_moment[gi] = r.tensor(shape.clone())?;
            opt.second_moment[gi] = r.tensor(shape)?;
        }
    }

    if r.pos != payload.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            payload.len() - r.pos
        )));
    }

    Ok(Checkpoint {
        hyper,
        num_relations,
        entity_fingerprint,
        relation_fingerprint,
        state: TrainState {
            params,
            opt,
            epoch,
            best_valid_mrr,
            best_epoch,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_checkpoint() -> Checkpoint<f64> {
        let hyper = HyperParams {
            d_e: 8,
            d_p: 8,
            heads: 2,
            ..Default::default()
        };
        let params = ModelParams::init(6, &hyper, 42);
        let mut opt = OptState::new(OptimizerKind::Adam, &params);
        opt.t = 17;
        opt.first_moment[0].data_mut()[3] = 0.125;
        opt.second_moment[2].data_mut()[0] = 1.5;
        Checkpoint {
            hyper,
            num_relations: 6,
            entity_fingerprint: 0xdead_beef,
            relation_fingerprint: 0x1234_5678,
            state: TrainState {
                params,
                opt,
                epoch: 9,
                best_valid_mrr: 0.875,
                best_epoch: 7,
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = toy_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);

        // Saving the loaded state reproduces the identical bytes.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected_not_a_crash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &toy_checkpoint()).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [10, bytes.len() / 2, bytes.len() - 3] {
            fs::write(&path, &bytes[..cut]).unwrap();
            let err = load_checkpoint::<f64>(&path).unwrap_err();
            assert!(matches!(err, CheckpointError::Corrupt(_)), "{err}");
        }
    }

    #[test]
    fn flipped_byte_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &toy_checkpoint()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &toy_checkpoint()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99; // version field follows the magic
        // repair the checksum so only the version check can fire
        let len = bytes.len();
        let sum = fnv1a(&bytes[..len - 8]);
        bytes[len - 8..].copy_from_slice(&sum.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(CheckpointError::UnsupportedVersion(99))
        ));
    }

    #[test]
    fn vocab_mismatch_is_detected() {
        let ckpt = toy_checkpoint();
        let kg = crate::kg::KnowledgeGraph::from_surface(
            &crate::kg::surface(&[("a", "r", "b")]),
            &[],
            &[],
            true,
        )
        .unwrap();
        assert!(matches!(
            ckpt.verify_vocab(&kg),
            Err(CheckpointError::VocabMismatch { .. })
        ));
    }
}
