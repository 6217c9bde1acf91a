//! FSET: little-endian container for feature grids and label lists.
//!
//! ```text
//! "FSET" | version u32 = 1 | N u32 | sample_count u32 | d u32 | w u32 | h u32
//! per sample: split_tag u8 (0 train, 1 val, 2 test) | K u32 | K x u32 labels
//!             | w*h*d x f32 features, row-major [w, h, d]
//! ```
//!
//! The dictionary, dataset name and generation spec travel in a JSON
//! sidecar named `<file>.json`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    validate_labels, DataError, Dataset, Dictionary, GridShape, Sample, Split, SyntheticSpec,
};
use crate::engine::Tensor;

pub const FSET_MAGIC: &[u8; 4] = b"FSET";
pub const FSET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub dictionary: Dictionary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SyntheticSpec>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn to_u32(v: usize, what: &str) -> Result<u32, DataError> {
    u32::try_from(v).map_err(|_| DataError::Inconsistent(format!("{what} {v} exceeds u32")))
}

pub(crate) fn encode_fset(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    let g = ds.grid;
    let mut out = Vec::with_capacity(28 + ds.len() * (9 + 4 * g.numel()));
    out.extend_from_slice(FSET_MAGIC);
    for v in [
        FSET_VERSION,
        to_u32(ds.n_labels(), "N")?,
        to_u32(ds.len(), "sample count")?,
        to_u32(g.d, "d")?,
        to_u32(g.w, "w")?,
        to_u32(g.h, "h")?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (s, split) in ds.samples.iter().zip(&ds.splits) {
        out.push(split.tag());
        out.extend_from_slice(&to_u32(s.labels.len(), "K")?.to_le_bytes());
        for &l in &s.labels {
            out.extend_from_slice(&to_u32(l, "label")?.to_le_bytes());
        }
        for v in s.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes the FSET payload and its JSON manifest.
pub fn write_features(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let bytes = encode_fset(ds)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    let manifest = Manifest {
        name: ds.name.clone(),
        seed: ds.seed,
        dictionary: ds.dictionary.clone(),
        spec: ds.spec.clone(),
    };
    fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.buf.len() - self.pos < n {
            return Err(DataError::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DataError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub(crate) fn decode_fset(bytes: &[u8], manifest: Option<Manifest>) -> Result<Dataset, DataError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != FSET_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != FSET_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let n = cur.u32("N")? as usize;
    let count = cur.u32("sample count")? as usize;
    let d = cur.u32("d")? as usize;
    let w = cur.u32("w")? as usize;
    let h = cur.u32("h")? as usize;
    if n == 0 || d == 0 || w == 0 || h == 0 {
        return Err(DataError::Inconsistent(format!(
            "zero extent in header: N={n} d={d} w={w} h={h}"
        )));
    }
    let grid = GridShape { w, h, d };
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    let mut splits = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let tag = cur.u8("split tag")?;
        let split = Split::from_tag(tag)
            .ok_or_else(|| DataError::Inconsistent(format!("sample {i}: split tag {tag}")))?;
        let k = cur.u32("cardinality")? as usize;
        if k > n {
            return Err(DataError::Inconsistent(format!(
                "sample {i}: K={k} exceeds N={n}"
            )));
        }
        let raw = cur.take(4 * k, "labels")?;
        let labels: Vec<usize> = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        validate_labels(&labels, n)
            .map_err(|e| DataError::Inconsistent(format!("sample {i}: {e}")))?;
        let raw = cur.take(4 * grid.numel(), "features")?;
        let feats: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let features = Tensor::new(vec![w, h, d], feats)
            .map_err(|e| DataError::Inconsistent(format!("sample {i}: {e}")))?;
        samples.push(Sample { features, labels });
        splits.push(split);
    }
    if cur.pos != bytes.len() {
        return Err(DataError::Inconsistent(format!(
            "{} trailing bytes after {count} samples",
            bytes.len() - cur.pos
        )));
    }

    let (name, seed, dictionary, spec) = match manifest {
        Some(m) => {
            if m.dictionary.len() != n {
                return Err(DataError::Inconsistent(format!(
                    "manifest dictionary has {} labels, payload N={n}",
                    m.dictionary.len()
                )));
            }
            (m.name, m.seed, m.dictionary, m.spec)
        }
        None => (String::from("unnamed"), 0, Dictionary::numbered(n)?, None),
    };
    let mut ds = Dataset::new(name, dictionary, grid, samples, splits)?;
    ds.seed = seed;
    ds.spec = spec;
    Ok(ds)
}

/// Reads an FSET file, plus its manifest when one sits next to it.
pub fn read_features(path: &Path) -> Result<Dataset, DataError> {
    let bytes = fs::read(path)?;
    let mp = manifest_path(path);
    let manifest = if mp.exists() {
        Some(serde_json::from_str(&fs::read_to_string(mp)?)?)
    } else {
        None
    };
    decode_fset(&bytes, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn tiny() -> Dataset {
        let spec = SyntheticSpec {
            n_labels: 4,
            feature_dim: 3,
            grid_w: 2,
            grid_h: 1,
            max_cardinality: 2,
            p_empty: 0.3,
            n_train: 6,
            n_val: 2,
            n_test: 2,
            ..Default::default()
        };
        generate_synthetic(&spec, 5).unwrap()
    }

    #[test]
    fn file_round_trip_keeps_everything() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.fset");
        write_features(&p, &ds).unwrap();
        assert!(manifest_path(&p).exists());
        assert_eq!(read_features(&p).unwrap(), ds);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = encode_fset(&tiny()).unwrap();
        assert_eq!(&bytes[..4], b"FSET");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..12], 4u32.to_le_bytes());
        assert_eq!(bytes[12..16], 10u32.to_le_bytes());
        assert_eq!(bytes[16..20], 3u32.to_le_bytes());
        assert_eq!(bytes[20..24], 2u32.to_le_bytes());
        assert_eq!(bytes[24..28], 1u32.to_le_bytes());
    }

    #[test]
    fn each_corruption_has_its_own_error() {
        let bytes = encode_fset(&tiny()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_fset(&bad, None), Err(DataError::BadMagic)));

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_fset(&bad, None),
            Err(DataError::UnsupportedVersion(2))
        ));

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_fset(cut, None),
            Err(DataError::Truncated(_))
        ));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(
            decode_fset(&bad, None),
            Err(DataError::Inconsistent(_))
        ));

        let mut bad = bytes.clone();
        bad[28] = 7; // split tag of the first sample
        assert!(matches!(
            decode_fset(&bad, None),
            Err(DataError::Inconsistent(_))
        ));
    }
}
