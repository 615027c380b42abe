//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MODC" | u32 version | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 dtype (0 = f64, 1 = f32) | u8 rank | u32 dims[rank] | payload
//! u32 config length | UTF-8 JSON config
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::Error;

pub const MAGIC: &[u8; 4] = b"MODC";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
    /// JSON of the configuration that produced the parameters.
    pub config: String,
}

fn bad(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, Error> {
        let mut buf = vec![0; n];
        self.inner.read_exact(&mut buf).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], Error> {
        let mut buf = [0; N];
        self.inner.read_exact(&mut buf).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8, Error> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, Error> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn string(&mut self, n: usize) -> Result<String, Error> {
        String::from_utf8(self.bytes(n)?).map_err(|_| bad("string is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParameterStore, config: impl Into<String>) -> Self {
        let entries = store
            .iter()
            .map(|(_, name, t)| (name.to_string(), Tensor::from_vec(t.shape().to_vec(), t.data().to_vec())))
            .collect();
        Self { entries, config: config.into() }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), Error> {
        let io = |e: std::io::Error| bad(format!("write failed: {e}"));
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&u32::try_from(self.entries.len()).map_err(|_| bad("too many entries"))?.to_le_bytes());
        for (name, t) in &self.entries {
            let n = u16::try_from(name.len()).map_err(|_| bad(format!("parameter name {name:?} too long")))?;
            buf.extend_from_slice(&n.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(DTYPE_F64);
            buf.push(u8::try_from(t.shape().len()).map_err(|_| bad("rank above 255"))?);
            for &d in t.shape() {
                buf.extend_from_slice(&u32::try_from(d).map_err(|_| bad("dimension above u32"))?.to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&u32::try_from(self.config.len()).map_err(|_| bad("config too long"))?.to_le_bytes());
        buf.extend_from_slice(self.config.as_bytes());
        w.write_all(&buf).map_err(io)
    }

    pub fn read_from(r: impl Read) -> Result<Self, Error> {
        let mut r = Reader { inner: r };
        if &r.array::<4>()? != MAGIC {
            return Err(bad("not a checkpoint (bad magic bytes)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = r.string(len)?;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            if dims.contains(&0) {
                return Err(bad(format!("parameter {name:?}: zero extent in {dims:?}")));
            }
            let n: usize = dims.iter().product();
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => r.bytes(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                DTYPE_F32 => r.bytes(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                other => return Err(bad(format!("parameter {name:?}: unknown dtype code {other}"))),
            };
            entries.push((name, Tensor::from_vec(dims, data)));
        }
        let len = r.u32()? as usize;
        let config = r.string(len)?;
        let mut rest = [0u8; 1];
        if r.inner.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
            return Err(bad("trailing bytes after the config blob"));
        }
        Ok(Self { entries, config })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// Copies the stored values into a store built for the same model.
    pub fn restore_into(&self, store: &mut ParameterStore) -> Result<(), Error> {
        if self.entries.len() != store.len() {
            return Err(bad(format!("checkpoint holds {} parameters, model has {}", self.entries.len(), store.len())));
        }
        let mut loaded = ParameterStore::new();
        for (name, t) in &self.entries {
            loaded.register(name.clone(), t.clone());
        }
        store.copy_values_from(&loaded).map_err(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn sample_store() -> ParameterStore {
        let mut store = ParameterStore::new();
        let mut rng = RngStream::new(5);
        store.uniform("b.w", 3, 4, 0.5, &mut rng);
        store.uniform("a.bias", 1, 4, 0.5, &mut rng);
        store.register("c.odd", Tensor::from_vec(vec![2, 1, 3], vec![f64::MIN_POSITIVE, -0.0, 1e300, 1.0 / 3.0, -2.5, 7.0]));
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let store = sample_store();
        let ck = Checkpoint::from_store(&store, r#"{"seed":3}"#);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.config, r#"{"seed":3}"#);
        assert_eq!(back.entries.len(), 3);
        for ((n1, t1), (n2, t2)) in ck.entries.iter().zip(&back.entries) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        let mut fresh = ParameterStore::new();
        let mut rng = RngStream::new(99);
        fresh.uniform("b.w", 3, 4, 0.5, &mut rng);
        fresh.uniform("a.bias", 1, 4, 0.5, &mut rng);
        fresh.register("c.odd", Tensor::zeros(vec![2, 1, 3]));
        back.restore_into(&mut fresh).unwrap();
        for ((_, n, t), (_, _, u)) in fresh.iter().zip(store.iter()) {
            assert_eq!(t.data(), u.data(), "{n}");
        }
    }

    #[test]
    fn header_layout() {
        let mut store = ParameterStore::new();
        store.register("w", Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let mut bytes = Vec::new();
        Checkpoint::from_store(&store, "{}").write_to(&mut bytes).unwrap();
        let mut expected = b"MODC".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&[0, 2]);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&2.0f64.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"{}");
        assert_eq!(bytes, expected);
    }

    #[test]
    fn reads_single_precision_payloads() {
        let mut bytes = b"MODC".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'v');
        bytes.extend_from_slice(&[1, 1]);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-3.0f32).to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let ck = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(ck.entries[0].1.data(), &[0.5, -3.0]);
        assert_eq!(ck.entries[0].1.shape(), &[2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Checkpoint::read_from(&b"MODX"[..]), Err(Error::Checkpoint(_))));
        let mut bytes = Vec::new();
        Checkpoint::from_store(&sample_store(), "{}").write_to(&mut bytes).unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(Checkpoint::read_from(wrong_version.as_slice()).is_err());
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Checkpoint::read_from(trailing.as_slice()).is_err());

        let ck = Checkpoint::read_from(bytes.as_slice()).unwrap();
        let mut other = ParameterStore::new();
        other.register("w", Tensor::zeros(vec![1, 1]));
        assert!(ck.restore_into(&mut other).is_err());
    }
}
