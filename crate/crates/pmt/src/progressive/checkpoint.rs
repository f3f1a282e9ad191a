//! Checkpoint format `PMTCKPT1`: full trainer round trips.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "PMTCKPT1" | version u32 | pair_count u32
//! per pair:  pair_id u32 | ema_alpha f64 | record_count u32 | records...
//!   record:  name_len u32 | name bytes | rank u32 | dims u32[rank] | f32 data
//! trainer block:
//!   config_json_len u32 | config json (trainer + net + weights)
//!   n_models u32 | iters u64[n] | round u64
//!   phase u8 { 0 | 1 -> model u32, end u64 }
//!   per model: velocity record_count u32 | records...
//!   buffer_base u64 | buffer_len u32
//!   per batch: n_labeled u32, ids u32[] | n_unlabeled u32, ids u32[]
//! crc32 u32 over every preceding byte
//! ```
//!
//! Student records are prefixed `student.`, teacher records `teacher.`.
//! A resumed run reproduces the uninterrupted run's history bitwise: model
//! parameters, optimizer velocity, cursors, the active phase, and the buffer
//! window all round-trip; batch composition and teacher noise are pure
//! functions of `(seed, index)`, so no RNG state beyond the config seed is
//! needed.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{ParamSet, SgdState, Tensor};
use crate::losses::LossWeights;
use crate::segnet::{ModelPair, SegNet, SegNetConfig};

use super::scheduler::{BatchBuffer, GapScheduler, Phase};
use super::{Batch, TrainError, TrainerConfig, TrainerState};

pub const CKPT_MAGIC: &[u8; 8] = b"PMTCKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {got} (expected {CKPT_VERSION})")]
    VersionMismatch { got: u32 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checksum failure: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    trainer: TrainerConfig,
    net: SegNetConfig,
    weights: LossWeights,
}

// ── writing ─────────────────────────────────────────────────────────

fn put_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_param_set(buf: &mut Vec<u8>, prefix: &str, params: &ParamSet<f32>) {
    for (name, t) in params.iter() {
        t.with_data(|d| put_record(buf, &format!("{prefix}{name}"), &t.shape(), d));
    }
}

/// Serializes the full trainer state and writes it atomically.
pub fn checkpoint_save(state: &TrainerState, path: &Path) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(state.pairs.len() as u32).to_le_bytes());
    for pair in &state.pairs {
        buf.extend_from_slice(&(pair.pair_id as u32).to_le_bytes());
        buf.extend_from_slice(&pair.ema_alpha.to_le_bytes());
        let record_count = pair.student.len() + pair.teacher.len();
        buf.extend_from_slice(&(record_count as u32).to_le_bytes());
        put_param_set(&mut buf, "student.", &pair.student);
        put_param_set(&mut buf, "teacher.", &pair.teacher);
    }

    let cfg_json = serde_json::to_vec(&ConfigBlock {
        trainer: state.cfg.clone(),
        net: state.net.config().clone(),
        weights: state.weights.clone(),
    })
    .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);

    let n = state.pairs.len();
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for &i in state.sched.iters() {
        buf.extend_from_slice(&(i as u64).to_le_bytes());
    }
    buf.extend_from_slice(&(state.sched.round() as u64).to_le_bytes());
    match state.sched.phase() {
        Some(Phase { model, end }) => {
            buf.push(1);
            buf.extend_from_slice(&(model as u32).to_le_bytes());
            buf.extend_from_slice(&(end as u64).to_le_bytes());
        }
        None => buf.push(0),
    }
    for (pair, sgd) in state.pairs.iter().zip(&state.sgd) {
        let vel = sgd.velocity();
        buf.extend_from_slice(&(vel.len() as u32).to_le_bytes());
        for ((name, t), v) in pair.student.iter().zip(vel) {
            put_record(&mut buf, name, &t.shape(), v);
        }
    }
    buf.extend_from_slice(&(state.buffer.base() as u64).to_le_bytes());
    buf.extend_from_slice(&(state.buffer.len() as u32).to_le_bytes());
    for batch in state.buffer.iter() {
        buf.extend_from_slice(&(batch.labeled.len() as u32).to_le_bytes());
        for &i in &batch.labeled {
            buf.extend_from_slice(&(i as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(batch.unlabeled.len() as u32).to_le_bytes());
        for &i in &batch.unlabeled {
            buf.extend_from_slice(&(i as u32).to_le_bytes());
        }
    }

    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, &buf).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

// ── reading ─────────────────────────────────────────────────────────

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { offset: self.pos });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
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

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f32>), CheckpointError> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("record name is not utf-8".into()))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("rank {rank} out of range")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        if numel > (1 << 28) {
            return Err(CheckpointError::Corrupt(format!("record too large: {dims:?}")));
        }
        let data = self
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, dims, data))
    }
}

/// Loads a checkpoint. The returned state resumes exactly where the saved
/// run stopped; its history starts empty.
pub fn checkpoint_load(path: &Path) -> Result<TrainerState, TrainError> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated { offset: bytes.len() }.into());
    }
    let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed }.into());
    }
    let mut c = Cursor {
        bytes: payload,
        pos: 0,
    };
    if c.take(8)? != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::VersionMismatch { got: version }.into());
    }

    let pair_count = c.u32()? as usize;
    let mut raw_pairs = Vec::with_capacity(pair_count);
    for _ in 0..pair_count {
        let pair_id = c.u32()? as usize;
        let ema_alpha = c.f64()?;
        let record_count = c.u32()? as usize;
        let mut student = ParamSet::new();
        let mut teacher = ParamSet::new();
        for _ in 0..record_count {
            let (name, dims, data) = c.record()?;
            let tensor = Tensor::from_vec(data, &dims)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let (set, plain) = if let Some(rest) = name.strip_prefix("student.") {
                (&mut student, rest.to_string())
            } else if let Some(rest) = name.strip_prefix("teacher.") {
                (&mut teacher, rest.to_string())
            } else {
                return Err(CheckpointError::Corrupt(format!("unprefixed record {name}")).into());
            };
            set.push(plain, tensor)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        }
        raw_pairs.push((pair_id, ema_alpha, student, teacher));
    }

    let json_len = c.u32()? as usize;
    let cfg_block: ConfigBlock = serde_json::from_slice(c.take(json_len)?)
        .map_err(|e| CheckpointError::Corrupt(format!("config block: {e}")))?;

    let n = c.u32()? as usize;
    if n != pair_count {
        return Err(CheckpointError::Corrupt("model count mismatch".into()).into());
    }
    let mut iters = Vec::with_capacity(n);
    for _ in 0..n {
        iters.push(c.u64()? as usize);
    }
    let round = c.u64()? as usize;
    let phase = match c.u8()? {
        0 => None,
        1 => Some(Phase {
            model: c.u32()? as usize,
            end: c.u64()? as usize,
        }),
        other => {
            return Err(CheckpointError::Corrupt(format!("phase flag {other}")).into());
        }
    };

    let mut velocities = Vec::with_capacity(n);
    for _ in 0..n {
        let count = c.u32()? as usize;
        let mut vel = Vec::with_capacity(count);
        for _ in 0..count {
            let (_, _, data) = c.record()?;
            vel.push(data);
        }
        velocities.push(vel);
    }

    let base = c.u64()? as usize;
    let buf_len = c.u32()? as usize;
    let mut batches = Vec::with_capacity(buf_len);
    for i in 0..buf_len {
        let n_lab = c.u32()? as usize;
        let mut labeled = Vec::with_capacity(n_lab);
        for _ in 0..n_lab {
            labeled.push(c.u32()? as usize);
        }
        let n_unl = c.u32()? as usize;
        let mut unlabeled = Vec::with_capacity(n_unl);
        for _ in 0..n_unl {
            unlabeled.push(c.u32()? as usize);
        }
        batches.push(Rc::new(Batch {
            labeled,
            unlabeled,
            stream_index: base + i,
        }));
    }

    let net = SegNet::new(cfg_block.net)?;
    let pairs: Vec<ModelPair<f32>> = raw_pairs
        .into_iter()
        .map(|(pair_id, ema_alpha, student, teacher)| {
            ModelPair::from_parts(student, teacher, ema_alpha, pair_id)
        })
        .collect();
    let sgd = pairs
        .iter()
        .zip(velocities)
        .map(|(_, vel)| {
            let mut s = SgdState::new(
                cfg_block.trainer.lr0,
                cfg_block.trainer.momentum,
                cfg_block.trainer.weight_decay,
            )?;
            s.set_velocity(vel);
            Ok(s)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let lead = cfg_block.trainer.resolved_lead();
    Ok(TrainerState {
        cfg: cfg_block.trainer,
        net,
        weights: cfg_block.weights,
        pairs,
        sched: GapScheduler::from_parts(iters, lead, round, phase),
        buffer: BatchBuffer::from_parts(base, batches),
        sgd,
        history: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::progressive::{Mode, TrainingSet};
    use crate::synthdata::{generate, split, DataGenConfig};

    fn setup(seed: u64, total_iters: usize) -> (TrainerState, TrainingSet) {
        let data_cfg = DataGenConfig {
            count: 24,
            height: 16,
            width: 16,
            ..Default::default()
        };
        let samples = generate(&data_cfg).unwrap();
        let sp = split(samples.len(), 0.3, seed).unwrap();
        let (tset, _) = TrainingSet::from_split(&samples, &sp);
        let cfg = TrainerConfig {
            total_iters,
            buffer_len: 4,
            seed,
            mode: Mode::Pmt,
            ..Default::default()
        };
        let net_cfg = SegNetConfig {
            base_filters: 2,
            depth: 1,
            ..Default::default()
        };
        let state = TrainerState::init(cfg, net_cfg, LossWeights::default()).unwrap();
        (state, tset)
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let (mut state, data) = setup(23, 16);
        state.run_steps(&data, Some(9)).unwrap(); // mid-phase on purpose
        checkpoint_save(&state, &path).unwrap();
        let loaded = checkpoint_load(&path).unwrap();
        assert_eq!(loaded.sched.iters(), state.sched.iters());
        assert_eq!(loaded.sched.round(), state.sched.round());
        assert_eq!(loaded.sched.phase(), state.sched.phase());
        assert_eq!(loaded.buffer.base(), state.buffer.base());
        assert_eq!(loaded.buffer.len(), state.buffer.len());
        for (a, b) in loaded.pairs.iter().zip(&state.pairs) {
            assert!(a.student.bitwise_eq(&b.student));
            assert!(a.teacher.bitwise_eq(&b.teacher));
            assert_eq!(a.ema_alpha, b.ema_alpha);
        }
        for (a, b) in loaded.sgd.iter().zip(&state.sgd) {
            assert_eq!(a.velocity().len(), b.velocity().len());
            for (va, vb) in a.velocity().iter().zip(b.velocity()) {
                assert!(va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn resume_reproduces_continuous_history_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");

        let (mut full, data) = setup(31, 20);
        full.run(&data).unwrap();
        let full_csv = crate::progressive::history_csv(&full.history);

        let (mut first, data2) = setup(31, 20);
        first.run_steps(&data2, Some(13)).unwrap();
        checkpoint_save(&first, &path).unwrap();
        let head_csv = crate::progressive::history_csv(&first.history);

        let mut resumed = checkpoint_load(&path).unwrap();
        resumed.run(&data2).unwrap();
        let tail_csv = crate::progressive::history_csv(&resumed.history);

        let tail_body = tail_csv.split_once('\n').unwrap().1;
        let stitched = format!("{head_csv}{tail_body}");
        assert_eq!(stitched, full_csv);
    }

    #[test]
    fn corrupting_any_payload_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let (mut state, data) = setup(5, 8);
        state.run_steps(&data, Some(3)).unwrap();
        checkpoint_save(&state, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        match checkpoint_load(&path) {
            Err(TrainError::Checkpoint(CheckpointError::ChecksumMismatch { .. })) => {}
            Err(other) => panic!("expected checksum failure, got {other}"),
            Ok(_) => panic!("corrupt checkpoint loaded successfully"),
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");

        // wrong magic (valid crc)
        let mut buf = b"NOTMAGIC".to_vec();
        buf.extend_from_slice(&1u32.to_le_bytes());
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        fs::write(&path, &buf).unwrap();
        assert!(matches!(
            checkpoint_load(&path),
            Err(TrainError::Checkpoint(CheckpointError::BadMagic))
        ));

        // wrong version (valid crc)
        let mut buf = CKPT_MAGIC.to_vec();
        buf.extend_from_slice(&9u32.to_le_bytes());
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        fs::write(&path, &buf).unwrap();
        assert!(matches!(
            checkpoint_load(&path),
            Err(TrainError::Checkpoint(CheckpointError::VersionMismatch { got: 9 }))
        ));
    }
}
