//! `ARCK` binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "ARCK"  u32 version (=1)  u32 entry count
//! per entry:
//!   u32 name length, UTF-8 name, u8 frozen (0/1),
//!   u32 rank, rank x u32 extents, product(extents) x f64 values
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ARCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub frozen: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        Self {
            entries: store
                .iter()
                .map(|(_, p)| CheckpointEntry {
                    name: p.name.clone(),
                    frozen: p.frozen,
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.to_f64_vec(),
                })
                .collect(),
        }
    }

    pub fn to_store<T: Scalar>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            let id = store.insert(e.name.clone(), Tensor::from_f64(e.shape.clone(), &e.values)?)?;
            store.get_mut(id).frozen = e.frozen;
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(u8::from(e.frozen));
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(bad("unknown magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("entry name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(bad(format!("duplicate entry `{name}`")));
            }
            let frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                f => return Err(bad(format!("`{name}`: frozen flag {f} is not 0/1"))),
            };
            let rank = r.u32()? as usize;
            if rank == 0 {
                return Err(bad(format!("`{name}`: rank 0")));
            }
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            if shape.contains(&0) {
                return Err(bad(format!("`{name}`: zero extent in {shape:?}")));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad(format!("`{name}`: shape overflows")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push(CheckpointEntry {
                name,
                frozen,
                shape,
                values,
            });
        }
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            entries: vec![
                CheckpointEntry {
                    name: "backbone.conv0.weight".into(),
                    frozen: true,
                    shape: vec![2, 1, 1, 1],
                    values: vec![1.5, -0.0],
                },
                CheckpointEntry {
                    name: "bridge.0.alpha".into(),
                    frozen: false,
                    shape: vec![1],
                    values: vec![0.0],
                },
            ],
        }
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"ARCK");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &21u32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
        let mut b = sample().to_bytes();
        b[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(m)) if m.contains("version")));
        let b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn store_round_trip_keeps_flags() {
        let store: ParamStore<f64> = sample().to_store().unwrap();
        assert!(store.by_name("backbone.conv0.weight").unwrap().frozen);
        assert_eq!(Checkpoint::from_store(&store), sample());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            entries in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 1..4), any::<bool>(), any::<u64>()),
                0..5,
            )
        ) {
            let ck = Checkpoint {
                entries: entries
                    .into_iter()
                    .enumerate()
                    .map(|(i, (shape, frozen, bits))| {
                        let n: usize = shape.iter().product();
                        CheckpointEntry {
                            name: format!("p{i}.w"),
                            frozen,
                            shape,
                            values: (0..n as u64).map(|k| f64::from_bits(bits.rotate_left(k as u32) & !(0x7ffu64 << 52) | (0x3ffu64 << 52))).collect(),
                        }
                    })
                    .collect(),
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), ck.to_bytes());
        }
    }
}
