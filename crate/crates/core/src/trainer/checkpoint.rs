//! Checkpoint container.
//!
//! ```text
//! "SPCK" | version u32 = 1 | meta_len u64 | meta (UTF-8 JSON)
//! | array_count u32 | per array:
//!     name_len u32 | name (UTF-8) | rank u32 | rank x u32 dims | numel x f32
//! ```
//!
//! All integers and floats are little-endian. Array names are
//! `param/<name>`, `best/<name>`, `adam_m/<name>`, `adam_v/<name>`,
//! `bn/<block>/{mean,var}` and `best_bn/<block>/{mean,var}`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamState, Checkpoint, EpochRecord, Snapshot, TrainError, TrainSetup, TrainStatus};
use crate::engine::{RunningStats, Tensor};
use crate::predictors::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (`u128` does not fit JSON numbers).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, TrainError> {
        let pos: u128 = self.word_pos.parse().map_err(|_| {
            TrainError::Checkpoint(format!("bad word position `{}`", self.word_pos))
        })?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    setup: TrainSetup,
    n_labels: usize,
    d_in: usize,
    epoch: usize,
    best_val: Option<f64>,
    best_epoch: Option<usize>,
    evals_since_best: usize,
    status: TrainStatus,
    rng: RngState,
    adam_step: u64,
    history: Vec<EpochRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.buf.len() - self.pos < n {
            return Err(TrainError::Checkpoint(format!(
                "truncated at offset {} (wanted {n} bytes)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn bn_arrays(out: &mut Vec<(String, Vec<usize>, Vec<f32>)>, prefix: &str, stats: &[RunningStats]) {
    for (l, s) in stats.iter().enumerate() {
        out.push((
            format!("{prefix}/{l}/mean"),
            vec![s.mean.len()],
            s.mean.clone(),
        ));
        out.push((
            format!("{prefix}/{l}/var"),
            vec![s.var.len()],
            s.var.clone(),
        ));
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let meta = Meta {
            setup: self.setup.clone(),
            n_labels: self.model.n_labels,
            d_in: self.model.d_in,
            epoch: self.epoch,
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            evals_since_best: self.evals_since_best,
            status: self.status.clone(),
            rng: RngState::capture(&self.rng),
            adam_step: self.adam.step,
            history: self.history.clone(),
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?;

        let mut arrays: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        for (i, p) in self.model.params.iter().enumerate() {
            let shape = p.value.shape().to_vec();
            arrays.push((
                format!("param/{}", p.name),
                shape.clone(),
                p.value.data().to_vec(),
            ));
            arrays.push((
                format!("adam_m/{}", p.name),
                shape.clone(),
                self.adam.m[i].clone(),
            ));
            arrays.push((format!("adam_v/{}", p.name), shape, self.adam.v[i].clone()));
        }
        bn_arrays(&mut arrays, "bn", &self.model.bn_stats);
        if let Some(best) = &self.best {
            for (name, t) in &best.params {
                arrays.push((
                    format!("best/{name}"),
                    t.shape().to_vec(),
                    t.data().to_vec(),
                ));
            }
            bn_arrays(&mut arrays, "best_bn", &best.bn_stats);
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        put_u32(&mut out, arrays.len() as u32);
        for (name, shape, data) in &arrays {
            put_array(&mut out, name, shape, data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let meta_len = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| TrainError::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = std::collections::BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| TrainError::Checkpoint("array name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = r
                .take(4 * numel)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.insert(name, (shape, data));
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Checkpoint("trailing bytes".into()));
        }

        // Rebuild the architecture, then overwrite every value.
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::build(
            meta.setup.predictor.clone(),
            meta.n_labels,
            meta.d_in,
            &mut scratch,
        )?;
        let mut take = |name: String, shape: &[usize]| -> Result<Vec<f32>, TrainError> {
            let (s, d) = arrays
                .remove(&name)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing array `{name}`")))?;
            if s != shape {
                return Err(TrainError::Checkpoint(format!(
                    "array `{name}` has shape {s:?}, expected {shape:?}"
                )));
            }
            Ok(d)
        };
        let mut adam = AdamState::new(&model.params);
        adam.step = meta.adam_step;
        let has_best = meta.best_val.is_some();
        let mut best_params = Vec::new();
        for (i, p) in model.params.iter_mut().enumerate() {
            let shape = p.value.shape().to_vec();
            let value = take(format!("param/{}", p.name), &shape)?;
            p.value = Tensor::new(shape.clone(), value)?;
            adam.m[i] = take(format!("adam_m/{}", p.name), &shape)?;
            adam.v[i] = take(format!("adam_v/{}", p.name), &shape)?;
            if has_best {
                let b = take(format!("best/{}", p.name), &shape)?;
                best_params.push((p.name.clone(), Tensor::new(shape, b)?));
            }
        }
        let n_blocks = model.bn_stats.len();
        let mut read_bn = |prefix: &str, stats: &mut Vec<RunningStats>| -> Result<(), TrainError> {
            for (l, s) in stats.iter_mut().enumerate().take(n_blocks) {
                let width = [s.mean.len()];
                s.mean = take(format!("{prefix}/{l}/mean"), &width)?;
                s.var = take(format!("{prefix}/{l}/var"), &width)?;
            }
            Ok(())
        };
        read_bn("bn", &mut model.bn_stats)?;
        let best = if has_best {
            let mut bn = model.bn_stats.clone();
            read_bn("best_bn", &mut bn)?;
            Some(Snapshot {
                params: best_params,
                bn_stats: bn,
            })
        } else {
            None
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(TrainError::Checkpoint(format!(
                "unexpected array `{extra}`"
            )));
        }
        Ok(Checkpoint {
            setup: meta.setup,
            model,
            adam,
            rng: meta.rng.restore()?,
            epoch: meta.epoch,
            best_val: meta.best_val,
            best_epoch: meta.best_epoch,
            evals_since_best: meta.evals_since_best,
            status: meta.status,
            best,
            history: meta.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
