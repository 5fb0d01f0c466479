//! Named parameter tensors, gradient buffers and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian): 4-byte magic, `u32` version, then
//! tensors until end of file, each as `u16` name length, name bytes, `u8`
//! rank, `u32` per dimension and an `f32` payload.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use super::Real;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch for {name}"
        );
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.tensors.push(Tensor { name, shape, data });
        ParamId(id)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![T::ZERO; n])
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: Vec<usize>, v: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![T::from_f64(v); n])
    }

    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)), fans taken from
    /// the last two dimensions.
    pub fn xavier<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, rng: &mut R) -> ParamId {
        let fan_out = *shape.last().unwrap();
        let fan_in = if shape.len() >= 2 {
            shape[shape.len() - 2]
        } else {
            fan_out
        };
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.random_range(-a..a))).collect();
        self.add(name, shape, data)
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.tensors[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.tensors[id.0].data
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            data: self.tensors.iter().map(|t| vec![T::ZERO; t.data.len()]).collect(),
        }
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, magic: &[u8; 4], mut w: W) -> Result<()> {
        w.write_all(magic)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len =
                u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {}", t.name)))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for &v in &t.data {
                buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads tensors written by [`ParamStore::write_checkpoint`].
    pub fn read_checkpoint<R: Read>(magic: &[u8; 4], mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != magic {
            return Err(Error::data(format!(
                "bad checkpoint magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "incompatible checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut store = ParamStore::new();
        while cur.pos < bytes.len() {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name =
                String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| Error::data("tensor name is not utf-8"))?;
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let payload = cur.take(n * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            if store.index.contains_key(&name) {
                return Err(Error::data(format!("duplicate tensor {name} in checkpoint")));
            }
            store.add(name, shape, data);
        }
        Ok(store)
    }

    /// Copies values from `other` for every tensor with matching name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for t in &mut self.tensors {
            let src = other
                .id(&t.name)
                .map(|id| &other.tensors[id.0])
                .ok_or_else(|| Error::data(format!("checkpoint lacks tensor {}", t.name)))?;
            if src.shape != t.shape {
                return Err(Error::data(format!(
                    "tensor {} has shape {:?} in checkpoint, expected {:?}",
                    t.name, src.shape, t.shape
                )));
            }
            t.data.clone_from(&src.data);
        }
        Ok(())
    }

    /// Rounds every value through f32, matching a checkpoint round trip.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = T::from_f64(v.to_f64() as f32 as f64);
            }
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub data: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.iter().all(|x| x.is_finite()))
    }

    pub fn zero(&mut self) {
        for a in &mut self.data {
            a.fill(T::ZERO);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        s.xavier("a.w", vec![3, 4], &mut rng);
        s.zeros("a.b", vec![4]);
        s.filled("scalar", vec![], 2.5);
        let mut buf = Vec::new();
        s.write_checkpoint(b"GTAL", &mut buf).unwrap();
        assert_eq!(&buf[..4], b"GTAL");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        let back = ParamStore::<f32>::read_checkpoint(b"GTAL", &buf[..]).unwrap();
        assert_eq!(back, s);
        assert!(ParamStore::<f32>::read_checkpoint(b"GTSM", &buf[..]).is_err());
        assert!(ParamStore::<f32>::read_checkpoint(b"GTAL", &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut buf = b"GTAL".to_vec();
        buf.extend_from_slice(&7u32.to_le_bytes());
        let err = ParamStore::<f32>::read_checkpoint(b"GTAL", &buf[..]).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
