//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic   b"VLDACKPT"
//! u32     format version (1)
//! u64     config hash (FNV-1a of the resolved config text)
//! str     resolved config text              (str = u64 length + UTF-8 bytes)
//! u64 x4  seed, update, env_steps, optimizer_steps
//! vocab   u64 count, then str per token
//! params  u64 count, then per tensor: str name, u32 rank, u64 dims, f64 data
//! adam    u64 count, then per tensor: u64 step, f64 m[numel], f64 v[numel]
//! rng     32-byte seed, u64 stream, u128 word position
//! target  u8 present; if 1: u64 count, then f64 data per value-head tensor
//! replay  u8 present; if 1: u64 capacity, u64 len, then per transition:
//!         obs, u64 ntokens, u64 tokens, f64 reward, u8 done, obs
//!         (obs = u64 ncells, u8 cells, u64 nctx, u64 ctx)
//! metrics u64 count, then str per JSON line already emitted
//! ```

use std::io::Read;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::diffcore::{ParamSet, Tensor};
use crate::policy::{ObsDims, Observation};

use super::replay::{ReplayBuffer, Transition};
use super::optim::Adam;
use super::TrainError;

pub const MAGIC: &[u8; 8] = b"VLDACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub config_text: String,
    pub seed: u64,
    pub update: u64,
    pub env_steps: u64,
    pub optimizer_steps: u64,
    pub vocab: Vec<String>,
    pub params: ParamSet,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub target: Option<Vec<Tensor>>,
    pub replay: Option<ReplayBuffer>,
    pub metrics: Vec<String>,
}

struct W(Vec<u8>);

impl W {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u128(&mut self, x: u128) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn obs(&mut self, o: &Observation) {
        self.u64(o.cells.len() as u64);
        self.0.extend_from_slice(&o.cells);
        self.u64(o.context_tokens.len() as u64);
        for &t in &o.context_tokens {
            self.u64(t as u64);
        }
    }
}

struct R<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> R<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize, TrainError> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(TrainError::Checkpoint(format!("implausible length {n}")));
        }
        Ok(n)
    }
    fn u128(&mut self) -> Result<u128, TrainError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, TrainError> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn str(&mut self) -> Result<String, TrainError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }
    fn obs(&mut self, dims: ObsDims) -> Result<Observation, TrainError> {
        let n = self.len()?;
        let cells = self.take(n)?.to_vec();
        let m = self.len()?;
        let mut ctx = Vec::with_capacity(m);
        for _ in 0..m {
            ctx.push(self.u64()? as usize);
        }
        Ok(Observation {
            dims,
            cells,
            context_tokens: ctx,
        })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = W(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.config_hash);
        w.str(&self.config_text);
        for x in [self.seed, self.update, self.env_steps, self.optimizer_steps] {
            w.u64(x);
        }
        w.u64(self.vocab.len() as u64);
        for t in &self.vocab {
            w.str(t);
        }
        w.u64(self.params.len() as u64);
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            w.str(name);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        w.u64(self.adam.t.len() as u64);
        for i in 0..self.adam.t.len() {
            w.u64(self.adam.t[i]);
            w.f64s(&self.adam.m[i]);
            w.f64s(&self.adam.v[i]);
        }
        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.u128(self.rng.get_word_pos());
        match &self.target {
            None => w.u8(0),
            Some(ts) => {
                w.u8(1);
                w.u64(ts.len() as u64);
                for t in ts {
                    w.f64s(t.data());
                }
            }
        }
        match &self.replay {
            None => w.u8(0),
            Some(b) => {
                w.u8(1);
                w.u64(b.capacity() as u64);
                w.u64(b.len() as u64);
                for tr in b.iter() {
                    w.obs(&tr.obs);
                    w.u64(tr.tokens.len() as u64);
                    for &t in &tr.tokens {
                        w.u64(t as u64);
                    }
                    w.f64s(&[tr.reward]);
                    w.u8(tr.done as u8);
                    w.obs(&tr.next_obs);
                }
            }
        }
        w.u64(self.metrics.len() as u64);
        for m in &self.metrics {
            w.str(m);
        }
        w.0
    }

    /// Decodes a checkpoint. `dims_for` maps the embedded config text to the
    /// observation layout of stored replay entries.
    pub fn from_bytes(
        buf: &[u8],
        dims_for: impl FnOnce(&str) -> Result<ObsDims, TrainError>,
    ) -> Result<Self, TrainError> {
        let mut r = R { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash = r.u64()?;
        let config_text = r.str()?;
        let dims = dims_for(&config_text)?;
        let (seed, update, env_steps, optimizer_steps) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let nv = r.len()?;
        let mut vocab = Vec::with_capacity(nv);
        for _ in 0..nv {
            vocab.push(r.str()?);
        }
        let np = r.len()?;
        let mut params = ParamSet::new();
        for _ in 0..np {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len()?);
            }
            let n: usize = shape.iter().product();
            let data = r.f64s(n)?;
            let t = Tensor::new(shape, data).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            params.push(name, t.with_grad());
        }
        let na = r.len()?;
        if na != np {
            return Err(TrainError::Checkpoint("optimizer state does not match parameters".into()));
        }
        let mut adam = Adam::new(&params);
        for i in 0..na {
            adam.t[i] = r.u64()?;
            let n = params.get(i).numel();
            adam.m[i] = r.f64s(n)?;
            adam.v[i] = r.f64s(n)?;
        }
        let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let mut rng = ChaCha8Rng::from_seed(rng_seed);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(r.u128()?);
        let target = if r.u8()? == 1 {
            let n = r.len()?;
            let value_idx: Vec<usize> = params
                .names()
                .iter()
                .enumerate()
                .filter(|(_, n)| n.starts_with(crate::policy::VALUE_PREFIX))
                .map(|(i, _)| i)
                .collect();
            if n != value_idx.len() {
                return Err(TrainError::Checkpoint("target network size mismatch".into()));
            }
            let mut ts = Vec::with_capacity(n);
            for &i in &value_idx {
                let shape = params.get(i).shape().to_vec();
                let data = r.f64s(params.get(i).numel())?;
                ts.push(Tensor::new(shape, data).map_err(|e| TrainError::Checkpoint(e.to_string()))?);
            }
            Some(ts)
        } else {
            None
        };
        let replay = if r.u8()? == 1 {
            let cap = r.len()?;
            let n = r.len()?;
            let mut b = ReplayBuffer::new(cap);
            for _ in 0..n {
                let obs = r.obs(dims)?;
                let nt = r.len()?;
                let mut tokens = Vec::with_capacity(nt);
                for _ in 0..nt {
                    tokens.push(r.u64()? as usize);
                }
                let reward = r.f64s(1)?[0];
                let done = r.u8()? == 1;
                let next_obs = r.obs(dims)?;
                b.push(Transition {
                    obs,
                    tokens,
                    reward,
                    done,
                    next_obs,
                });
            }
            Some(b)
        } else {
            None
        };
        let nm = r.len()?;
        let mut metrics = Vec::with_capacity(nm);
        for _ in 0..nm {
            metrics.push(r.str()?);
        }
        if r.pos != buf.len() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_hash,
            config_text,
            seed,
            update,
            env_steps,
            optimizer_steps,
            vocab,
            params,
            adam,
            rng,
            target,
            replay,
            metrics,
        })
    }

    /// Writes via a temporary file and rename so a crash never leaves a
    /// partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| TrainError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Vec<u8>, TrainError> {
        let mut f = std::fs::File::open(path).map_err(|e| TrainError::io(path, e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| TrainError::io(path, e))?;
        Ok(buf)
    }
}
