//! On-disk dataset: a little-endian binary body plus a JSON manifest next to
//! it (same path, `.json` extension).
//!
//! Body layout:
//!
//! ```text
//! "FDIA"            4 bytes magic
//! version           u32
//! n_samples         u64
//! n_features        u64
//! n_classes         u16
//! seed              u64
//! features          n_samples * n_features f64, row-major
//! labels            n_samples u16
//! timesteps         n_samples u32
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"FDIA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub n_samples: usize,
    pub n_features: usize,
    pub seed: u64,
    pub config_hash: String,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
    /// Present when each sample is a flattened image: [channels, height, width].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_shape: Option<[usize; 3]>,
    pub feature_names: Vec<String>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_dataset(ds: &Dataset, path: &Path, config_hash: &str, image_shape: Option<[usize; 3]>) -> Result<()> {
    ds.validate()?;
    if ds.num_classes() > u16::MAX as usize {
        return Err(Error::input("too many classes for a u16 label"));
    }
    let mut buf = Vec::with_capacity(32 + ds.len() * (ds.num_features() * 8 + 6));
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.num_features() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.num_classes() as u16).to_le_bytes());
    buf.extend_from_slice(&ds.seed.to_le_bytes());
    for s in &ds.samples {
        for v in &s.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in &ds.samples {
        buf.extend_from_slice(&(s.label as u16).to_le_bytes());
    }
    for s in &ds.samples {
        let t = u32::try_from(s.timestep).map_err(|_| Error::input("timestep exceeds u32"))?;
        buf.extend_from_slice(&t.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;

    let manifest = DatasetManifest {
        format: "FDIA".into(),
        version: DATASET_VERSION,
        n_samples: ds.len(),
        n_features: ds.num_features(),
        seed: ds.seed,
        config_hash: config_hash.into(),
        class_names: ds.class_names.clone(),
        class_counts: ds.class_counts(),
        image_shape,
        feature_names: ds.feature_names.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(manifest_path(path), text)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("truncated dataset file".into()))?;
        self.pos = end;
        Ok(bytes.try_into().expect("length checked"))
    }
}

/// Reads a dataset and its manifest.
pub fn read_dataset(path: &Path) -> Result<(Dataset, DatasetManifest)> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(manifest_path(path)).map_err(|e| {
        io::Error::new(e.kind(), format!("reading manifest for {}: {e}", path.display()))
    })?)?;

    let mut c = Cursor { buf: &buf, pos: 0 };
    if &c.take::<4>()? != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(c.take()?);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("dataset version {version}, expected {DATASET_VERSION}")));
    }
    let n = u64::from_le_bytes(c.take()?) as usize;
    let f = u64::from_le_bytes(c.take()?) as usize;
    let k = u16::from_le_bytes(c.take()?) as usize;
    let seed = u64::from_le_bytes(c.take()?);
    if manifest.n_samples != n || manifest.n_features != f || manifest.class_names.len() != k {
        return Err(Error::Format("manifest disagrees with dataset header".into()));
    }
    if manifest.feature_names.len() != f {
        return Err(Error::Format("manifest feature names disagree with header".into()));
    }
    let expected = c.pos + n * (f * 8 + 2 + 4);
    if buf.len() != expected {
        return Err(Error::Format(format!("dataset body is {} bytes, expected {expected}", buf.len())));
    }

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut features = Vec::with_capacity(f);
        for _ in 0..f {
            features.push(f64::from_le_bytes(c.take()?));
        }
        samples.push(Sample { features, label: 0, timestep: 0 });
    }
    for s in samples.iter_mut() {
        s.label = u16::from_le_bytes(c.take()?) as usize;
    }
    for s in samples.iter_mut() {
        s.timestep = u32::from_le_bytes(c.take()?) as usize;
    }
    let ds = Dataset {
        samples,
        class_names: manifest.class_names.clone(),
        feature_names: manifest.feature_names.clone(),
        seed,
    };
    ds.validate()?;
    Ok((ds, manifest))
}
