//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CVXK1" | version u32 | count u32
//! count × ( name_len u16 | name utf-8 | dtype u8 (0 = f32) | rank u8 | dims u64 × rank | data f32 × numel )
//! crc32 u32   over every preceding byte
//! ```
//!
//! Integer metadata (step counters, RNG positions) is stored bit-cast into
//! f32 tensors so the container stays single-typed.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Adam, ParamStore, Rng, RngState, Tensor};

pub const MAGIC: &[u8; 5] = b"CVXK1";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn words_to_tensor(words: &[u32]) -> Tensor<f32> {
    let data = words.iter().map(|&w| f32::from_bits(w)).collect();
    Tensor::new(&[words.len()], data).expect("rank-1 tensor")
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
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
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| corrupt(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| corrupt("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| corrupt(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            let rank = u8::try_from(t.rank()).map_err(|_| corrupt(format!("rank too large: {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 {
            return Err(corrupt("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(corrupt("CRC mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| corrupt("tensor name is not utf-8"))?
                .to_owned();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(corrupt(format!("{name}: unknown dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| corrupt("dimension overflow"))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| corrupt("size overflow"))?;
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| corrupt(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.push(name, words_to_tensor(&[v as u32, (v >> 32) as u32]));
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let w = self.words(name, 2)?;
        Ok(w[0] as u64 | (w[1] as u64) << 32)
    }

    pub fn put_f64(&mut self, name: &str, v: f64) {
        self.put_u64(name, v.to_bits());
    }

    pub fn get_f64(&self, name: &str) -> Result<f64> {
        Ok(f64::from_bits(self.get_u64(name)?))
    }

    fn words(&self, name: &str, n: usize) -> Result<Vec<u32>> {
        let t = self.require(name)?;
        if t.shape() != [n] {
            return Err(corrupt(format!("{name}: expected {n} words, found shape {:?}", t.shape())));
        }
        Ok(t.data().iter().map(|x| x.to_bits()).collect())
    }

    /// Stores a generator's seed and stream position.
    pub fn put_rng(&mut self, name: &str, rng: &Rng) {
        let s = rng.state();
        let p = s.word_pos;
        let words = [
            s.seed as u32,
            (s.seed >> 32) as u32,
            p as u32,
            (p >> 32) as u32,
            (p >> 64) as u32,
            (p >> 96) as u32,
        ];
        self.push(name, words_to_tensor(&words));
    }

    pub fn get_rng(&self, name: &str) -> Result<Rng> {
        let w = self.words(name, 6)?;
        let seed = w[0] as u64 | (w[1] as u64) << 32;
        let word_pos = (w[2] as u128) | (w[3] as u128) << 32 | (w[4] as u128) << 64 | (w[5] as u128) << 96;
        Ok(Rng::from_state(RngState { seed, word_pos }))
    }

    /// Adds every parameter under `prefix.name`.
    pub fn put_params(&mut self, prefix: &str, ps: &ParamStore<f32>) {
        for (name, t) in ps.iter() {
            self.push(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Overwrites every parameter of `ps` from `prefix.name`; shapes must
    /// match and every parameter must be present.
    pub fn load_params(&self, prefix: &str, ps: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let key = format!("{prefix}.{}", ps.name(id));
            let t = self.require(&key)?;
            if t.shape() != ps.get(id).shape() {
                return Err(corrupt(format!(
                    "{key}: shape {:?} does not match model {:?}",
                    t.shape(),
                    ps.get(id).shape()
                )));
            }
            *ps.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Adam moments and step count; moment tensors follow parameter order.
    pub fn put_adam(&mut self, prefix: &str, adam: &Adam, ps: &ParamStore<f32>) {
        self.put_u64(&format!("{prefix}.step"), adam.step);
        for id in ps.ids() {
            let name = ps.name(id);
            self.push(format!("{prefix}.m.{name}"), adam.m[id.index()].clone());
            self.push(format!("{prefix}.v.{name}"), adam.v[id.index()].clone());
        }
    }

    pub fn load_adam(&self, prefix: &str, adam: &mut Adam, ps: &ParamStore<f32>) -> Result<()> {
        adam.step = self.get_u64(&format!("{prefix}.step"))?;
        for id in ps.ids() {
            let name = ps.name(id);
            for (kind, dst) in [("m", &mut adam.m[id.index()]), ("v", &mut adam.v[id.index()])] {
                let key = format!("{prefix}.{kind}.{name}");
                let t = self.require(&key)?;
                if t.shape() != ps.get(id).shape() {
                    return Err(corrupt(format!("{key}: shape mismatch")));
                }
                *dst = t.clone();
            }
        }
        Ok(())
    }
}
