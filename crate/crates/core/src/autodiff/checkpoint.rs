//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `REATCKPT1`, optimizer step (u64), record
//! count (u64), then per record: name length (u32) and UTF-8 name, rank (u32),
//! dims (u64 each), followed by the value, first-moment and second-moment
//! arrays as raw f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::array::Array;
use super::params::ParameterSet;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"REATCKPT1";

/// One saved parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub value: Array,
    pub m: Array,
    pub v: Array,
}

/// Contents of a checkpoint file. Several parameter sets may share one file
/// under distinct name prefixes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub records: Vec<Record>,
    /// Per-namespace optimizer steps, stored as `<prefix>#step` records.
    pub namespace_steps: Vec<(String, u64)>,
}

impl Checkpoint {
    /// Captures every parameter of `ps`; names should carry a namespace prefix.
    pub fn from_params(ps: &ParameterSet) -> Self {
        let mut ck = Checkpoint::default();
        ck.add(ps);
        ck.step = ps.step;
        ck
    }

    pub fn add(&mut self, ps: &ParameterSet) {
        for p in ps.iter() {
            self.records.push(Record {
                name: p.name.clone(),
                value: p.value.clone(),
                m: p.m.clone(),
                v: p.v.clone(),
            });
        }
        if let Some(ns) = ps.iter().next().and_then(|p| p.name.split('.').next()) {
            self.namespace_steps.push((ns.to_string(), ps.step));
        }
    }

    /// Copies matching records into `ps`. Every parameter of `ps` must be
    /// present with an identical shape.
    pub fn restore(&self, ps: &mut ParameterSet) -> Result<()> {
        for id in ps.ids().collect::<Vec<_>>() {
            let name = ps.get(id).name.clone();
            let rec = self
                .records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            let expected = ps.value(id).shape();
            if rec.value.shape() != expected {
                return Err(Error::Shape {
                    name,
                    expected: expected.to_vec(),
                    found: rec.value.shape().to_vec(),
                });
            }
            let p = ps.get_mut(id);
            p.value = rec.value.clone();
            p.m = rec.m.clone();
            p.v = rec.v.clone();
            p.grad.fill(0.0);
        }
        let ns = ps
            .iter()
            .next()
            .and_then(|p| p.name.split('.').next().map(str::to_string));
        ps.step = ns
            .and_then(|ns| {
                self.namespace_steps
                    .iter()
                    .find(|(n, _)| *n == ns)
                    .map(|(_, s)| *s)
            })
            .unwrap_or(self.step);
        Ok(())
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u64::<LittleEndian>(self.step)?;
        let total = self.records.len() + self.namespace_steps.len();
        w.write_u64::<LittleEndian>(total as u64)?;
        for rec in &self.records {
            write_name(w, &rec.name)?;
            let [r, c] = rec.value.shape();
            w.write_u32::<LittleEndian>(2)?;
            w.write_u64::<LittleEndian>(r as u64)?;
            w.write_u64::<LittleEndian>(c as u64)?;
            for arr in [&rec.value, &rec.m, &rec.v] {
                for &x in arr.data() {
                    w.write_f64::<LittleEndian>(x)?;
                }
            }
        }
        for (ns, step) in &self.namespace_steps {
            write_name(w, &format!("{ns}#step"))?;
            w.write_u32::<LittleEndian>(0)?;
            w.write_u64::<LittleEndian>(*step)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, origin: &str) -> Result<Self> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(origin, "truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "bad magic"));
        }
        let step = r.read_u64::<LittleEndian>()?;
        let count = r.read_u64::<LittleEndian>()?;
        let mut ck = Checkpoint {
            step,
            ..Checkpoint::default()
        };
        for _ in 0..count {
            let name = read_name(r, origin)?;
            let rank = r.read_u32::<LittleEndian>()?;
            if rank == 0 {
                let ns = name
                    .strip_suffix("#step")
                    .ok_or_else(|| Error::format(origin, "rank-0 record without #step"))?;
                ck.namespace_steps
                    .push((ns.to_string(), r.read_u64::<LittleEndian>()?));
                continue;
            }
            if rank != 2 {
                return Err(Error::format(origin, format!("unsupported rank {rank}")));
            }
            let rows = r.read_u64::<LittleEndian>()? as usize;
            let cols = r.read_u64::<LittleEndian>()? as usize;
            let mut arrays = Vec::with_capacity(3);
            for _ in 0..3 {
                let mut data = vec![0.0; rows * cols];
                r.read_f64_into::<LittleEndian>(&mut data)?;
                arrays.push(Array::from_vec(rows, cols, data)?);
            }
            let v = arrays.pop().expect("three arrays");
            let m = arrays.pop().expect("three arrays");
            let value = arrays.pop().expect("three arrays");
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("{name} in {origin}")));
            }
            ck.records.push(Record { name, value, m, v });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, &path.display().to_string())
    }
}

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name<R: Read>(r: &mut R, origin: &str) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::format(origin, "parameter name is not UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_and_shape_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParameterSet::new();
        ps.uniform("gen.a", 2, 3, &mut rng).unwrap();
        ps.uniform("gen.b", 1, 4, &mut rng).unwrap();
        ps.step = 7;
        for p in ps.iter_mut() {
            p.m.fill(0.5);
        }
        let ck = Checkpoint::from_params(&ps);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..9], b"REATCKPT1");
        let back = Checkpoint::read_from(&mut bytes.as_slice(), "mem").unwrap();
        assert_eq!(back, ck);

        let mut fresh = ParameterSet::new();
        fresh.zeros("gen.a", 2, 3).unwrap();
        fresh.zeros("gen.b", 1, 4).unwrap();
        back.restore(&mut fresh).unwrap();
        assert_eq!(fresh, ps);

        let mut wrong = ParameterSet::new();
        wrong.zeros("gen.a", 3, 2).unwrap();
        assert!(matches!(back.restore(&mut wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = b"NOTACKPT1\0\0\0".to_vec();
        assert!(Checkpoint::read_from(&mut bytes.as_slice(), "mem").is_err());
    }
}
