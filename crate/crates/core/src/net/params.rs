//! Named parameter tensors and the checkpoint section format.

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` over (rows, cols).
    Xavier,
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Array2<f64>,
    frozen: bool,
}

/// Parameters in registration order. Frozen entries are stored and
/// checkpointed but never updated by an optimizer.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
    seed: u64,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        self.add_entry(name, rows, cols, init, false)
    }

    pub fn add_frozen(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
    ) -> Result<ParamId> {
        self.add_entry(name, rows, cols, init, true)
    }

    fn add_entry(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        frozen: bool,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name}"
            )));
        }
        let value = match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| self.rng.random_range(-a..=a))
            }
            Init::Normal(std) => Array2::from_shape_fn((rows, cols), |_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            }),
        };
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            frozen,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        Ok(self.value(self.id(name)?))
    }

    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let id = self.id(name)?;
        if self.entries[id.0].value.dim() != value.dim() {
            return Err(Error::Shape {
                op: "set",
                detail: format!(
                    "{name}: {:?} vs {:?}",
                    self.entries[id.0].value.dim(),
                    value.dim()
                ),
            });
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Writes every section: name length, name, rows, cols, f64 values.
    pub fn write_sections<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_u32(w, self.entries.len() as u32)?;
        for e in &self.entries {
            binio::write_u32(w, e.name.len() as u32)?;
            w.write_all(e.name.as_bytes())?;
            binio::write_u32(w, e.value.nrows() as u32)?;
            binio::write_u32(w, e.value.ncols() as u32)?;
            for &v in e.value.iter() {
                binio::write_f64(w, v)?;
            }
        }
        Ok(())
    }

    /// Reads sections into a store whose structure (names, shapes, order)
    /// must already match.
    pub fn read_sections_into<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let count = binio::read_u32(r)? as usize;
        if count != self.entries.len() {
            return Err(Error::ConfigMismatch(format!(
                "{count} parameter sections, expected {}",
                self.entries.len()
            )));
        }
        for e in &mut self.entries {
            let len = binio::read_len(r, 4096, "name length")?;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("non-utf8 parameter name".into()))?;
            let rows = binio::read_u32(r)? as usize;
            let cols = binio::read_u32(r)? as usize;
            if name != e.name || (rows, cols) != e.value.dim() {
                return Err(Error::ConfigMismatch(format!(
                    "section {name} {rows}x{cols} does not match {} {:?}",
                    e.name,
                    e.value.dim()
                )));
            }
            for v in e.value.iter_mut() {
                *v = binio::read_f64(r)?;
                if !v.is_finite() {
                    return Err(Error::Format(format!("non-finite value in {name}")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let build = |seed| {
            let mut s = ParamStore::new(seed);
            s.add("a", 3, 4, Init::Xavier).unwrap();
            s.add("b", 1, 4, Init::Normal(0.1)).unwrap();
            s
        };
        assert_eq!(build(5), build(5));
        assert_ne!(build(5), build(6));
    }

    #[test]
    fn xavier_bound_holds() {
        let mut s = ParamStore::new(1);
        let id = s.add("w", 10, 30, Init::Xavier).unwrap();
        let a = (6.0f64 / 40.0).sqrt();
        assert!(s.value(id).iter().all(|v| v.abs() <= a));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(1);
        s.add("w", 1, 1, Init::Zeros).unwrap();
        assert!(s.add("w", 1, 1, Init::Zeros).is_err());
    }

    #[test]
    fn sections_roundtrip_and_detect_mismatch() {
        let mut s = ParamStore::new(2);
        s.add("w", 2, 3, Init::Xavier).unwrap();
        s.add_frozen("t", 4, 3, Init::Normal(1.0)).unwrap();
        let mut buf = Vec::new();
        s.write_sections(&mut buf).unwrap();
        let mut fresh = ParamStore::new(99);
        fresh.add("w", 2, 3, Init::Zeros).unwrap();
        fresh.add_frozen("t", 4, 3, Init::Zeros).unwrap();
        fresh.read_sections_into(&mut buf.as_slice()).unwrap();
        assert_eq!(fresh.get("w").unwrap(), s.get("w").unwrap());
        assert!(fresh.is_frozen(fresh.id("t").unwrap()));
        let mut wrong = ParamStore::new(0);
        wrong.add("w", 3, 3, Init::Zeros).unwrap();
        wrong.add("t", 4, 3, Init::Zeros).unwrap();
        assert!(matches!(
            wrong.read_sections_into(&mut buf.as_slice()),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
