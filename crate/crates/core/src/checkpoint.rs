//! Named parameter store backed by a JSON manifest and a sibling blob.
//!
//! The manifest (`model.json`) is an array of `{name, dims, byte_offset}`
//! entries sorted by name; the blob (`model.bin`, same stem) holds every
//! entry's little-endian `f32` values back to back at the listed offsets.
//!
//! Seeded initialization draws each entry from its own SplitMix64 stream
//! keyed by `seed` and the entry name, so adding or removing entries never
//! perturbs the values of the others.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Tensor};

/// One stored parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub byte_offset: u64,
}

/// How a parameter is initialized when no checkpoint is supplied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform {
        fan_in: usize,
    },
    Constant(f32),
}

/// Declared shape and initializer of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    /// Weight and bias specs for a convolution at `prefix`.
    pub fn conv(prefix: &str, out_ch: usize, in_ch: usize, k: usize) -> [ParamSpec; 2] {
        Self::conv_with_bias(prefix, out_ch, in_ch, k, 0.0)
    }

    pub fn conv_with_bias(prefix: &str, out_ch: usize, in_ch: usize, k: usize, bias: f32) -> [ParamSpec; 2] {
        [
            ParamSpec {
                name: format!("{prefix}.conv"),
                dims: vec![out_ch, in_ch, k, k],
                init: Init::HeUniform { fan_in: in_ch * k * k },
            },
            ParamSpec { name: format!("{prefix}.bias"), dims: vec![out_ch], init: Init::Constant(bias) },
        ]
    }
}

/// FNV-1a over the entry name, mixed into the seed of its stream.
fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Uniform sample in `[0, 1)` with 24 bits of resolution.
fn unit_f32(rng: &mut SplitMix64) -> f32 {
    (rng.next_u64() >> 40) as f32 / (1u64 << 24) as f32
}

/// Deterministic uniform `[lo, hi)` values for a named stream.
pub fn seeded_uniform(seed: u64, name: &str, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    let mut rng = SplitMix64::seed_from_u64(seed ^ name_key(name));
    (0..len).map(|_| lo + (hi - lo) * unit_f32(&mut rng)).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materializes every spec from seeded streams.
    pub fn seeded(specs: &[ParamSpec], seed: u64) -> Self {
        let mut ckpt = Self::new();
        for spec in specs {
            let len = spec.dims.iter().product();
            let data = match spec.init {
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in.max(1) as f32).sqrt();
                    seeded_uniform(seed, &spec.name, len, -bound, bound)
                }
                Init::Constant(v) => vec![v; len],
            };
            ckpt.entries.insert(spec.name.clone(), Entry { dims: spec.dims.clone(), data });
        }
        ckpt
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape("checkpoint", format!("{dims:?}"), format!("{} values for `{name}`", data.len())));
        }
        self.entries.insert(name, Entry { dims, data });
        Ok(())
    }

    pub fn insert_conv(&mut self, prefix: &str, params: &ConvParams) {
        let w = params.weight();
        self.entries.insert(format!("{prefix}.conv"), Entry { dims: w.dims().to_vec(), data: w.data().to_vec() });
        self.entries
            .insert(format!("{prefix}.bias"), Entry { dims: vec![params.bias().len()], data: params.bias().to_vec() });
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Entry> {
        self.entries.get_mut(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Entry> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A vector entry of exactly `len` values.
    pub fn vector(&self, name: &str, len: usize) -> Result<&[f32]> {
        let e = self.get(name)?;
        if e.data.len() != len {
            return Err(Error::shape("checkpoint", format!("`{name}` of {len} values"), e.data.len()));
        }
        Ok(&e.data)
    }

    /// Loads `{prefix}.conv` / `{prefix}.bias`, checking the expected geometry.
    pub fn conv(&self, prefix: &str, out_ch: usize, in_ch: usize, k: usize) -> Result<ConvParams> {
        let name = format!("{prefix}.conv");
        let w = self.get(&name)?;
        if w.dims != [out_ch, in_ch, k, k] {
            return Err(Error::shape(
                "checkpoint",
                format!("`{name}` {:?}", [out_ch, in_ch, k, k]),
                format!("{:?}", w.dims),
            ));
        }
        let bias = self.vector(&format!("{prefix}.bias"), out_ch)?.to_vec();
        ConvParams::new(Tensor::from_shape(&w.dims, w.data.clone())?, bias)
    }

    /// Zeroes the weight and bias of the convolution at `prefix`.
    pub fn zero_conv(&mut self, prefix: &str) -> Result<()> {
        for suffix in ["conv", "bias"] {
            self.get_mut(&format!("{prefix}.{suffix}"))?.data.fill(0.0);
        }
        Ok(())
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.entries
            .iter()
            .map(|(name, e)| {
                let m = ManifestEntry { name: name.clone(), dims: e.dims.clone(), byte_offset: offset };
                offset += 4 * e.data.len() as u64;
                m
            })
            .collect()
    }

    /// Blob path that accompanies a manifest path.
    pub fn blob_path(manifest: &Path) -> PathBuf {
        manifest.with_extension("bin")
    }

    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<()> {
        let manifest_path = manifest_path.as_ref();
        let json = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
        let mut blob = Vec::new();
        for e in self.entries.values() {
            for v in &e.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let blob_path = Self::blob_path(manifest_path);
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        let blob_path = Self::blob_path(manifest_path);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut ckpt = Self::new();
        for m in manifest {
            let len: usize = m.dims.iter().product();
            let start = m.byte_offset as usize;
            let end = start + 4 * len;
            let bytes = blob.get(start..end).ok_or_else(|| Error::Format {
                path: blob_path.clone(),
                reason: format!("entry `{}` spans bytes {start}..{end} beyond blob of {}", m.name, blob.len()),
            })?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if ckpt.entries.insert(m.name.clone(), Entry { dims: m.dims, data }).is_some() {
                return Err(Error::Schema(format!("duplicate checkpoint entry `{}`", m.name)));
            }
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_keyed_by_name() {
        let a = seeded_uniform(7, "subnet.cls.stage1.conv", 16, -1.0, 1.0);
        let b = seeded_uniform(7, "subnet.cls.stage1.conv", 16, -1.0, 1.0);
        let c = seeded_uniform(7, "subnet.reg.stage1.conv", 16, -1.0, 1.0);
        let d = seeded_uniform(8, "subnet.cls.stage1.conv", 16, -1.0, 1.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert!(a.iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn seeded_entries_do_not_depend_on_neighbours() {
        let [w, b] = ParamSpec::conv("x", 2, 3, 3);
        let [w2, b2] = ParamSpec::conv("y", 4, 4, 1);
        let small = Checkpoint::seeded(&[w.clone(), b.clone()], 3);
        let big = Checkpoint::seeded(&[w2, b2, w, b], 3);
        assert_eq!(small.get("x.conv").unwrap(), big.get("x.conv").unwrap());
        assert!(small.get("x.bias").unwrap().data.iter().all(|&v| v == 0.0));
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(small.get("x.conv").unwrap().data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut specs = ParamSpec::conv("a", 3, 2, 3).to_vec();
        specs.extend(ParamSpec::conv_with_bias("b", 1, 1, 1, -2.0));
        let ckpt = Checkpoint::seeded(&specs, 11);
        ckpt.save(&path).unwrap();
        assert!(dir.path().join("model.bin").exists());
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let offsets: Vec<u64> = back.manifest().iter().map(|m| m.byte_offset).collect();
        assert_eq!(offsets, vec![0, 12, 12 + 4 * 54, 12 + 4 * 54 + 4]);
    }

    #[test]
    fn missing_and_misshaped_entries() {
        let ckpt = Checkpoint::seeded(&ParamSpec::conv("a", 3, 2, 3), 0);
        match ckpt.conv("b", 3, 2, 3) {
            Err(Error::MissingWeight(name)) => assert_eq!(name, "b.conv"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(ckpt.conv("a", 3, 2, 1).is_err());
        assert!(ckpt.conv("a", 3, 2, 3).is_ok());
    }
}
