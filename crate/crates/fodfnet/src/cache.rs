//! Training-set cache: `manifest.json` plus one `*.f32le` payload per volume.

use std::path::{Path, PathBuf};

use fodfnet_core::sh::BASIS_CONVENTION;
use fodfnet_core::{Mask, Volume4D};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::files::{f32le_bytes, from_f32le, read_bytes, sha256_hex, to_json, write_bytes};

pub const CACHE_FORMAT: &str = "fodfnet-dataset";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Volumes a training run draws its samples from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetVolumes {
    pub input_sh: Volume4D,
    pub target_sh: Volume4D,
    pub fractions: Volume4D,
    pub mask: Mask,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    /// x, y, z, volumes; x fastest.
    pub shape: [usize; 4],
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    pub format: String,
    pub format_version: u32,
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub sh_order: usize,
    pub sh_convention: String,
    pub seed: Option<u64>,
    pub masked_voxels: usize,
    pub arrays: Vec<ArrayEntry>,
}

const ARRAYS: [&str; 4] = ["input_sh", "target_sh", "fractions", "mask"];

impl DatasetVolumes {
    fn arrays(&self) -> [Volume4D; 4] {
        [
            self.input_sh.clone(),
            self.target_sh.clone(),
            self.fractions.clone(),
            self.mask.to_volume(self.input_sh.voxel_size()),
        ]
    }

    /// Payload files and manifest, in write order. Values are stored as
    /// float32, so reading back yields the float32-rounded volumes.
    pub fn to_files(&self) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut entries = Vec::new();
        for (name, vol) in ARRAYS.iter().zip(self.arrays()) {
            let file = format!("{name}.f32le");
            let bytes = f32le_bytes(vol.data());
            entries.push(ArrayEntry {
                name: name.to_string(),
                file: file.clone(),
                shape: vol.dims(),
                sha256: sha256_hex(&bytes),
            });
            files.push((file, bytes));
        }
        let manifest = CacheManifest {
            format: CACHE_FORMAT.into(),
            format_version: 1,
            dims: self.mask.dims(),
            voxel_size: self.input_sh.voxel_size(),
            sh_order: 8,
            sh_convention: BASIS_CONVENTION.into(),
            seed: self.seed,
            masked_voxels: self.mask.count(),
            arrays: entries,
        };
        files.push((MANIFEST_FILE.into(), to_json(&manifest).into_bytes()));
        files
    }

    pub fn write(&self, dir: &Path) -> CliResult<Vec<PathBuf>> {
        self.to_files()
            .into_iter()
            .map(|(name, bytes)| {
                let p = dir.join(name);
                write_bytes(&p, &bytes).map(|_| p)
            })
            .collect()
    }

    /// Decode from a file lookup; `origin` labels errors.
    pub fn from_files(origin: &Path, get: impl Fn(&str) -> CliResult<Vec<u8>>) -> CliResult<Self> {
        let mp = origin.join(MANIFEST_FILE);
        let bad = |detail: String| CliError::input("dataset_cache", detail).at(&mp);
        let text = String::from_utf8(get(MANIFEST_FILE)?).map_err(|_| bad("manifest is not UTF-8".into()))?;
        let m: CacheManifest =
            serde_json::from_str(&text).map_err(|e| bad(format!("manifest is not valid: {e}")))?;
        if m.format != CACHE_FORMAT {
            return Err(bad(format!("format is {:?}, expected {CACHE_FORMAT:?}", m.format)));
        }
        if m.sh_convention != BASIS_CONVENTION {
            return Err(bad(format!("SH convention {:?} is not {BASIS_CONVENTION:?}", m.sh_convention)));
        }
        let mut vols = Vec::with_capacity(ARRAYS.len());
        for name in ARRAYS {
            let entry = m
                .arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| bad(format!("array `{name}` missing")))?;
            if entry.file.contains('/') || entry.file.contains('\\') {
                return Err(bad(format!("array file {:?} must be a bare name", entry.file)));
            }
            let bytes = get(&entry.file)?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(bad(format!("{} does not match its sha256", entry.file)));
            }
            let expected = 4 * entry.shape.iter().product::<usize>();
            if bytes.len() != expected {
                return Err(bad(format!("{} holds {} bytes, shape needs {expected}", entry.file, bytes.len())));
            }
            let vol = Volume4D::new(entry.shape, m.voxel_size, from_f32le(&bytes)).map_err(|e| bad(e.to_string()))?;
            if vol.spatial_dims() != m.dims {
                return Err(bad(format!("`{name}` has dims {:?}, manifest says {:?}", vol.spatial_dims(), m.dims)));
            }
            vols.push(vol);
        }
        let mask = Mask::from_volume(&vols[3]);
        let mut it = vols.into_iter();
        Ok(Self {
            input_sh: it.next().expect("input"),
            target_sh: it.next().expect("target"),
            fractions: it.next().expect("fractions"),
            mask,
            seed: m.seed,
        })
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        Self::from_files(dir, |name| read_bytes(&dir.join(name)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vol = |n: usize, s: f64| Volume4D::new([2, 3, 2, n], [1.0; 3], (0..12 * n).map(|i| i as f64 * s).collect()).unwrap();
        let mut mask = Mask::full([2, 3, 2]);
        mask.set(4, false);
        let d = DatasetVolumes {
            input_sh: vol(45, 0.25),
            target_sh: vol(45, -0.5),
            fractions: vol(3, 0.125),
            mask,
            seed: Some(9),
        };
        d.write(dir.path()).unwrap();
        assert_eq!(DatasetVolumes::read(dir.path()).unwrap(), d);
        std::fs::write(dir.path().join("fractions.f32le"), [0u8; 4]).unwrap();
        let e = DatasetVolumes::read(dir.path()).unwrap_err();
        assert_eq!(e.kind, "dataset_cache");
    }
}
