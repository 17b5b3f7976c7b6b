//! Binary checkpoint format.
//!
//! ```text
//! "GGLCKPT1"  magic
//! u32         format version
//! u64         iteration
//! u8          rng present; then [u8; 32] seed, u64 stream, u128 word position
//! u8          optimizer present; then u8 kind, u64 step count
//! u32         array count; per array:
//!             u32 name length, name (UTF-8), u32 rank, rank x u32 extents,
//!             f32 data
//! ```
//! Every integer and float is little-endian. Optimizer slots are stored as
//! arrays named `opt.<slot>.<param>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamStore;
use crate::error::{GaitError, Result};
use crate::net::CLASSIFIER_PREFIX;
use crate::real::Real;
use crate::tensor::Tensor;

use super::optim::{Optimizer, OptimizerKind};

pub const MAGIC: &[u8; 8] = b"GGLCKPT1";
pub const VERSION: u32 = 1;
const OPT_PREFIX: &str = "opt.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub rng: Option<RngState>,
    pub optimizer: Option<OptimizerMeta>,
    pub arrays: Vec<NamedArray>,
}

fn corrupt(detail: impl Into<String>) -> GaitError {
    GaitError::Checkpoint(detail.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        match &self.optimizer {
            Some(o) => {
                out.push(1);
                out.push(o.kind.tag());
                out.extend_from_slice(&o.step.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic").ok() != Some(MAGIC.as_slice()) {
            return Err(corrupt("missing GGLCKPT1 header"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported format version {version} (expected {VERSION})")));
        }
        let iteration = r.u64("iteration")?;
        let rng = match r.u8("rng flag")? {
            0 => None,
            1 => Some(RngState {
                seed: r.take(32, "rng seed")?.try_into().unwrap(),
                stream: r.u64("rng stream")?,
                word_pos: r.u128("rng position")?,
            }),
            f => return Err(corrupt(format!("bad rng flag {f}"))),
        };
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let tag = r.u8("optimizer kind")?;
                let kind = OptimizerKind::from_tag(tag).ok_or_else(|| corrupt(format!("unknown optimizer tag {tag}")))?;
                Some(OptimizerMeta { kind, step: r.u64("optimizer step")? })
            }
            f => return Err(corrupt(format!("bad optimizer flag {f}"))),
        };
        let count = r.u32("array count")? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "array name")?)
                .map_err(|_| corrupt(format!("array {i} has a non-UTF-8 name")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if !(1..=5).contains(&rank) {
                return Err(corrupt(format!("array '{name}' has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| corrupt(format!("array '{name}' is too large")))?;
            let bytes = r.take(n, &format!("data of '{name}'"))?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { iteration, rng, optimizer, arrays })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        Self::from_bytes(&buf)
    }

    /// Snapshot of every parameter.
    pub fn from_params<F: Real>(iteration: u64, params: &ParamStore<F>) -> Self {
        let arrays = params
            .iter()
            .map(|(_, p)| NamedArray {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Checkpoint { iteration, rng: None, optimizer: None, arrays }
    }

    pub fn with_optimizer<F: Real>(mut self, params: &ParamStore<F>, opt: &Optimizer<F>) -> Self {
        self.optimizer = Some(OptimizerMeta { kind: opt.kind, step: opt.steps_taken() });
        for (slot_i, slot) in opt.kind.slots().iter().enumerate() {
            for ((_, p), state) in params.iter().zip(opt.state()) {
                let t = &state[slot_i];
                self.arrays.push(NamedArray {
                    name: format!("{OPT_PREFIX}{slot}.{}", p.name),
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
                });
            }
        }
        self
    }

    /// Drops optimizer state, rng and the classifier bank.
    pub fn inference_export(&self) -> Self {
        Checkpoint {
            iteration: self.iteration,
            rng: None,
            optimizer: None,
            arrays: self
                .arrays
                .iter()
                .filter(|a| !a.name.starts_with(OPT_PREFIX) && !a.name.starts_with(CLASSIFIER_PREFIX))
                .cloned()
                .collect(),
        }
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    fn tensor_for<F: Real>(&self, name: &str, expected: &[usize]) -> Result<Tensor<F>> {
        let a = self
            .array(name)
            .ok_or_else(|| corrupt(format!("array '{name}' is missing")))?;
        if a.shape != expected {
            return Err(corrupt(format!(
                "array '{name}' has shape {:?} but the model expects {expected:?}",
                a.shape
            )));
        }
        Tensor::from_vec(&a.shape, a.data.iter().map(|&v| F::of(v as f64)).collect())
    }

    /// Loads every model parameter. All arrays are validated before any is
    /// applied; the first missing or mis-shaped one is named in the error.
    /// Parameter arrays the model does not know are rejected, except the
    /// classifier bank when the model has none.
    pub fn load_params<F: Real>(&self, params: &mut ParamStore<F>) -> Result<()> {
        let mut staged = Vec::with_capacity(params.len());
        for (id, p) in params.iter() {
            staged.push((id, self.tensor_for::<F>(&p.name, p.value.shape())?));
        }
        if let Some(extra) = self.arrays.iter().find(|a| {
            !a.name.starts_with(OPT_PREFIX) && !a.name.starts_with(CLASSIFIER_PREFIX) && params.id(&a.name).is_none()
        }) {
            return Err(corrupt(format!("array '{}' does not belong to this model", extra.name)));
        }
        for (id, t) in staged {
            params.set_value(id, t)?;
        }
        Ok(())
    }

    /// Restores optimizer slots saved by [`Checkpoint::with_optimizer`].
    pub fn load_optimizer<F: Real>(&self, params: &ParamStore<F>, opt: &mut Optimizer<F>) -> Result<()> {
        let meta = self
            .optimizer
            .ok_or_else(|| corrupt("checkpoint has no optimizer state"))?;
        if meta.kind != opt.kind {
            return Err(corrupt(format!("checkpoint optimizer is {}, run uses {}", meta.kind, opt.kind)));
        }
        let mut state = Vec::with_capacity(params.len());
        for (_, p) in params.iter() {
            let mut slots = Vec::new();
            for slot in meta.kind.slots() {
                slots.push(self.tensor_for::<F>(&format!("{OPT_PREFIX}{slot}.{}", p.name), p.value.shape())?);
            }
            state.push(slots);
        }
        opt.restore(meta.step, state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        Checkpoint {
            iteration: 7,
            rng: Some(RngState { seed: [3; 32], stream: 5, word_pos: 1 << 70 }),
            optimizer: Some(OptimizerMeta { kind: OptimizerKind::Adam, step: 7 }),
            arrays: vec![
                NamedArray { name: "a".into(), shape: vec![2, 3], data: vec![0.5, -1.0, 2.0, 3.5, f32::MIN_POSITIVE, -0.0] },
                NamedArray { name: "b.c".into(), shape: vec![1], data: vec![6.5] },
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes();
        for n in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..n]).is_err(), "prefix {n}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn header_and_version_checked() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 2;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"));
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("header"));
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..13 {
            rng.gen::<u32>();
        }
        let mut resumed = RngState::capture(&rng).restore();
        let a: Vec<u64> = (0..5).map(|_| rng.gen()).collect();
        let b: Vec<u64> = (0..5).map(|_| resumed.gen()).collect();
        assert_eq!(a, b);
    }
}
