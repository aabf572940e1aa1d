//! Single-file tensor container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "OMCK"
//! version    u32      1
//! n_meta     u32
//!   key      u32 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! n_records  u32
//!   name     u32 length + UTF-8 bytes
//!   dtype    u8       0 = f32, 1 = f64
//!   rank     u32
//!   dims     rank × u64
//!   values   product(dims) × (4 | 8) bytes, IEEE-754 little-endian, row-major
//! ```
//!
//! Metadata is a string map; records are stored in insertion order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"OMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Values {
    pub fn dtype(&self) -> DType {
        match self {
            Values::F32(_) => DType::F32,
            Values::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Values,
}

impl Record {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let values = match T::DTYPE {
            DType::F32 => Values::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => Values::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            values,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data = match &self.values {
            Values::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            Values::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.records.push(Record::from_tensor(name, t));
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key `{key}`")))
    }

    pub fn meta_parsed<V: std::str::FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        self.meta(key)?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("metadata `{key}`: {e}")))
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Adds every parameter under its own name.
    pub fn push_params<T: Real>(&mut self, ps: &ParamStore<T>) {
        for (_, p) in ps.iter() {
            self.push(p.name.clone(), &p.value);
        }
    }

    /// Overwrites every parameter of `ps` from the records of the same name.
    /// Fails without modifying `ps` if any name is missing or any shape
    /// differs; the error lists every discrepancy.
    pub fn load_params<T: Real>(&self, ps: &mut ParamStore<T>) -> Result<()> {
        let mut diffs = Vec::new();
        let mut loaded = Vec::new();
        for (id, p) in ps.iter() {
            match self.record(&p.name) {
                None => diffs.push(format!("missing `{}` {:?}", p.name, p.value.shape())),
                Some(r) if r.shape != p.value.shape() => {
                    diffs.push(format!("`{}`: checkpoint {:?}, network {:?}", p.name, r.shape, p.value.shape()))
                }
                Some(r) => loaded.push((id, r.to_tensor::<T>()?)),
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint does not match the network:\n  {}",
                diffs.join("\n  ")
            )));
        }
        for (id, t) in loaded {
            ps.get_mut(id).value = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, &r.name);
            out.push(r.values.dtype().tag());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &r.values {
                Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            ck.meta.insert(k, r.string()?);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("`{name}`: unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let bytes = r.take(n * dtype.size_in_bytes())?;
            let values = match dtype {
                DType::F32 => Values::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()),
                DType::F64 => Values::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
            };
            debug_assert_eq!(values.len(), n);
            ck.records.push(Record { name, shape, values });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(ck)
    }

    /// Writes via a temporary sibling file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("omck.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{NetConfig, Network};
    use crate::param::RngState;

    #[test]
    fn byte_layout_of_a_small_file() {
        let mut ck = Checkpoint::new();
        ck.set_meta("k", "v");
        ck.push("w", &Tensor::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap());
        let b = ck.to_bytes();
        let mut want = b"OMCK".to_vec();
        want.extend([1, 0, 0, 0]);
        want.extend([1, 0, 0, 0, 1, 0, 0, 0, b'k', 1, 0, 0, 0, b'v']);
        want.extend([1, 0, 0, 0, 1, 0, 0, 0, b'w', 0, 1, 0, 0, 0]);
        want.extend(2u64.to_le_bytes());
        want.extend(1f32.to_le_bytes());
        want.extend((-2f32).to_le_bytes());
        assert_eq!(b, want);
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), ck);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut ck = Checkpoint::new();
        ck.push("w", &Tensor::<f64>::ones(vec![3, 2]));
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = b;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    fn roundtrip_forward<T: Real>() {
        let cfg = NetConfig {
            zero_init_heads: false,
            ..NetConfig::tiny()
        };
        let mut ps = ParamStore::<T>::new();
        let mut rng = RngState::new(4);
        let net = Network::build(&cfg, &mut ps, &mut rng).unwrap();
        let x = rng.uniform_tensor::<T>(vec![1, 3, 8, 8], 0.0, 1.0);
        let before = net.predict(&ps, &x).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.omck");
        let mut ck = Checkpoint::new();
        ck.push_params(&ps);
        ck.save(&path).unwrap();

        let mut fresh = ParamStore::<T>::new();
        let net2 = Network::build(&cfg, &mut fresh, &mut RngState::new(99)).unwrap();
        Checkpoint::load(&path).unwrap().load_params(&mut fresh).unwrap();
        let after = net2.predict(&fresh, &x).unwrap();
        for (a, b) in before.iter().zip(&after) {
            // f32 widens to f64 injectively, so this compares bit patterns
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits()));
        }
    }

    #[test]
    fn save_load_forward_bit_identical() {
        roundtrip_forward::<f64>();
        roundtrip_forward::<f32>();
    }

    #[test]
    fn shape_diff_reported_and_store_untouched() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add("a", Tensor::zeros(vec![2, 2])).unwrap();
        ps.add("b", Tensor::zeros(vec![3])).unwrap();
        let mut ck = Checkpoint::new();
        ck.push("a", &Tensor::<f64>::ones(vec![2, 2]));
        ck.push("b", &Tensor::<f64>::ones(vec![4]));
        let err = ck.load_params(&mut ps).unwrap_err().to_string();
        assert!(err.contains("`b`") && err.contains("[4]") && err.contains("[3]"), "{err}");
        assert_eq!(ps.get(a).value, Tensor::zeros(vec![2, 2]));
    }
}
