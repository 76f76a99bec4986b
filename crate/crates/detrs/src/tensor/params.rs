//! Named parameter storage, weight initialization, and the serialized
//! weights format.
//!
//! Every learnable array and every persistent buffer (batch-norm running
//! statistics) lives in a [`ParamStore`] under a dotted path such as
//! `backbone.stem.conv1.weight`. Checkpoints serialize the store as a flat
//! name -> array mapping; see [`ParamStore::save`] for the byte layout.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DetError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    /// SGD momentum slot; zero until the first optimizer step.
    pub momentum: ArrayD<f64>,
    /// Buffers (running statistics) are not trainable.
    pub trainable: bool,
    /// Normalization scale/offset parameters are exempt from weight decay.
    pub decay_exempt: bool,
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: ArrayD<f64>,
        trainable: bool,
        decay_exempt: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let momentum = ArrayD::zeros(value.raw_dim());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            momentum,
            trainable,
            decay_exempt,
        });
        ParamId(self.entries.len() - 1)
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

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total number of trainable scalar parameters.
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Serialize to the native weights format:
    ///
    /// ```text
    /// magic  b"DETRSW01"
    /// u32    entry count
    /// entry* u32 name length | name (utf-8) | u8 flags (bit0 trainable,
    ///        bit1 decay-exempt) | u32 ndim | u64*ndim dims |
    ///        f64-le*numel value | f64-le*numel momentum
    /// ```
    ///
    /// All integers and floats are little-endian. The round trip is
    /// bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"DETRSW01")?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            let flags = u8::from(e.trainable) | (u8::from(e.decay_exempt) << 1);
            w.write_all(&[flags])?;
            w.write_all(&(e.value.ndim() as u32).to_le_bytes())?;
            for d in e.value.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in e.value.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in e.momentum.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"DETRSW01" {
            return Err(DetError::Checkpoint("bad magic in weights file".into()));
        }
        let count = read_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| DetError::Checkpoint("non-utf8 parameter name".into()))?;
            let mut flags = [0u8; 1];
            r.read_exact(&mut flags)?;
            let ndim = read_u32(r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(r)? as usize);
            }
            let numel: usize = dims.iter().product();
            let value = read_f64_array(r, &dims, numel)?;
            let momentum = read_f64_array(r, &dims, numel)?;
            let id = store.add(name, value, flags[0] & 1 != 0, flags[0] & 2 != 0);
            store.entry_mut(id).momentum = momentum;
        }
        Ok(store)
    }

    /// Copy values (and momentum) from another store with identical layout.
    /// Names and shapes must match exactly.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(DetError::Checkpoint(format!(
                "parameter count mismatch: model has {}, checkpoint has {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name {
                return Err(DetError::Checkpoint(format!(
                    "parameter name mismatch: model `{}` vs checkpoint `{}`",
                    mine.name, theirs.name
                )));
            }
            if mine.value.shape() != theirs.value.shape() {
                return Err(DetError::Checkpoint(format!(
                    "shape mismatch for `{}`: {:?} vs {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
            mine.momentum = theirs.momentum.clone();
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64_array<R: Read>(r: &mut R, dims: &[usize], numel: usize) -> Result<ArrayD<f64>> {
    let mut buf = vec![0u8; numel * 8];
    r.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(dims), data)
        .map_err(|e| DetError::Checkpoint(format!("bad array shape: {e}")))
}

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

/// Standard normal via Box-Muller on the given generator.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Conv weight: normal with std sqrt(2 / fan_out), fan_out = k*k*c_out.
pub fn conv_init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> ArrayD<f64> {
    let std = (2.0 / (k * k * c_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[c_out, c_in, k, k]), |_| normal_sample(rng) * std)
}

/// Transposed-conv weight (IOHW layout), fan_out over the output channels.
pub fn conv_transpose_init(
    rng: &mut ChaCha8Rng,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> ArrayD<f64> {
    let std = (2.0 / (k * k * c_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[c_in, c_out, k, k]), |_| normal_sample(rng) * std)
}

/// Normal with explicit std (prediction layers).
pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal_sample(rng) * std)
}

/// Linear weight: normal with std sqrt(2 / fan_in).
pub fn linear_init(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> ArrayD<f64> {
    let std = (2.0 / in_dim as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[out_dim, in_dim]), |_| normal_sample(rng) * std)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn full(shape: &[usize], v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let mut store = ParamStore::new();
        let a = store.add("layer.weight", full(&[2, 3], 0.1234567890123), true, false);
        store.add("norm.gamma", arr1(&[1.0, 2.0]).into_dyn(), true, true);
        store.add("norm.running_mean", zeros(&[2]), false, false);
        store.entry_mut(a).momentum = full(&[2, 3], -0.5);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();

        assert_eq!(loaded.len(), 3);
        for (e1, e2) in store.entries().iter().zip(loaded.entries()) {
            assert_eq!(e1.name, e2.name);
            assert_eq!(e1.trainable, e2.trainable);
            assert_eq!(e1.decay_exempt, e2.decay_exempt);
            assert_eq!(e1.value, e2.value);
            assert_eq!(e1.momentum, e2.momentum);
        }
        // bytes themselves are stable
        let bytes1 = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("weights2.bin");
        loaded.save(&path2).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_values_rejects_mismatched_names() {
        let mut a = ParamStore::new();
        a.add("w1", zeros(&[2]), true, false);
        let mut b = ParamStore::new();
        b.add("w2", zeros(&[2]), true, false);
        assert!(a.load_values_from(&b).is_err());
    }

    #[test]
    fn conv_init_is_deterministic_per_seed() {
        use rand::SeedableRng;
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(conv_init(&mut r1, 8, 4, 3), conv_init(&mut r2, 8, 4, 3));
    }
}
