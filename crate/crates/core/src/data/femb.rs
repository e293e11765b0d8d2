//! The FEMB embedding container and its JSON-lines manifest.
//!
//! Binary file (little-endian):
//!
//! ```text
//! "FEMB" | u16 version | u16 n_modalities (=2) | u32 d_image | u32 d_text
//!        | u64 n_samples | u32 crc32(previous 24 bytes)
//! payload: per sample, image then text, f32 values, present modalities only
//! u32 crc32(payload)
//! ```
//!
//! Which modalities each sample carries lives in the manifest, written next
//! to the binary with the extension `.jsonl`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{Availability, EmbeddingSet, Modality, SamplePair};
use crate::error::{Error, Result};

pub const FEMB_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"FEMB";
const HEADER_LEN: usize = 24;
const FILE: &str = "FEMB";

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u16,
    d_image: usize,
    d_text: usize,
    count: usize,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct Restored {
    image: bool,
    text: bool,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    label: usize,
    availability: Availability,
    restored: Restored,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("jsonl")
}

fn format_err(section: &str, detail: impl Into<String>) -> Error {
    Error::Format {
        file: FILE,
        section: section.into(),
        detail: detail.into(),
    }
}

fn truncated(section: &str) -> Error {
    Error::Truncated {
        file: FILE,
        section: section.into(),
    }
}

/// Serializes a set into `(binary, manifest)`.
pub fn encode(set: &EmbeddingSet) -> Result<(Vec<u8>, String)> {
    let mut header = Vec::with_capacity(HEADER_LEN + 4);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&FEMB_VERSION.to_le_bytes());
    header.extend_from_slice(&2u16.to_le_bytes());
    header.extend_from_slice(&(set.d_image as u32).to_le_bytes());
    header.extend_from_slice(&(set.d_text as u32).to_le_bytes());
    header.extend_from_slice(&(set.samples.len() as u64).to_le_bytes());
    header.extend_from_slice(&crc32fast::hash(&header).to_le_bytes());

    let mut payload = Vec::new();
    let mut manifest = serde_json::to_string(&ManifestHeader {
        format: "FEMB".into(),
        version: FEMB_VERSION,
        d_image: set.d_image,
        d_text: set.d_text,
        count: set.samples.len(),
    })?;
    manifest.push('\n');
    for s in &set.samples {
        let availability = s.availability();
        if availability == Availability::Empty {
            return Err(Error::Contract(format!("sample {} has no modality to store", s.id)));
        }
        for m in [Modality::Image, Modality::Text] {
            if let Some(v) = s.feature(m) {
                if v.len() != set.dim(m) {
                    return Err(Error::Dimension {
                        what: format!("{m:?} feature of sample {}", s.id),
                        expected: set.dim(m),
                        found: v.len(),
                    });
                }
                for &x in v {
                    payload.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
        manifest.push_str(&serde_json::to_string(&ManifestEntry {
            id: s.id.clone(),
            label: s.label,
            availability,
            restored: Restored {
                image: s.restored_image,
                text: s.restored_text,
            },
        })?);
        manifest.push('\n');
    }
    let mut bytes = header;
    let crc = crc32fast::hash(&payload);
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&crc.to_le_bytes());
    Ok((bytes, manifest))
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Parses a binary container together with its manifest text.
pub fn decode(bytes: &[u8], manifest: &str) -> Result<EmbeddingSet> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(truncated("header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err("header", "magic is not FEMB"));
    }
    if read_u32(bytes, HEADER_LEN) != crc32fast::hash(&bytes[..HEADER_LEN]) {
        return Err(Error::Crc {
            file: FILE,
            section: "header".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEMB_VERSION {
        return Err(format_err("header", format!("unsupported version {version}")));
    }
    let n_mod = u16::from_le_bytes([bytes[6], bytes[7]]);
    if n_mod != 2 {
        return Err(format_err("header", format!("expected 2 modalities, found {n_mod}")));
    }
    let d_image = read_u32(bytes, 8) as usize;
    let d_text = read_u32(bytes, 12) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;

    let mut lines = manifest.lines().filter(|l| !l.trim().is_empty());
    let head: ManifestHeader = serde_json::from_str(lines.next().ok_or_else(|| truncated("manifest"))?)
        .map_err(|e| format_err("manifest", e.to_string()))?;
    if head.format != "FEMB" || head.version != FEMB_VERSION {
        return Err(format_err("manifest", format!("format {} version {}", head.format, head.version)));
    }
    for (what, expected, found) in [
        ("d_image", d_image, head.d_image),
        ("d_text", d_text, head.d_text),
        ("sample count", count, head.count),
    ] {
        if expected != found {
            return Err(Error::Dimension {
                what: format!("manifest {what}"),
                expected,
                found,
            });
        }
    }
    let entries: Vec<ManifestEntry> = lines
        .map(|l| serde_json::from_str(l).map_err(|e| format_err("manifest", e.to_string())))
        .collect::<Result<_>>()?;
    if entries.len() != count {
        return Err(Error::Dimension {
            what: "manifest entries".into(),
            expected: count,
            found: entries.len(),
        });
    }

    let floats: usize = entries
        .iter()
        .map(|e| match e.availability {
            Availability::Complete => d_image + d_text,
            Availability::ImageOnly => d_image,
            Availability::TextOnly => d_text,
            Availability::Empty => 0,
        })
        .sum();
    let payload_end = HEADER_LEN + 4 + floats * 4;
    if bytes.len() < payload_end + 4 {
        return Err(truncated("payload"));
    }
    if bytes.len() > payload_end + 4 {
        return Err(format_err("payload", format!("{} trailing bytes", bytes.len() - payload_end - 4)));
    }
    let payload = &bytes[HEADER_LEN + 4..payload_end];
    if read_u32(bytes, payload_end) != crc32fast::hash(payload) {
        return Err(Error::Crc {
            file: FILE,
            section: "payload".into(),
        });
    }

    let mut pos = 0;
    let mut take = |d: usize| {
        let v = Array1::from_iter(
            payload[pos..pos + 4 * d]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
        );
        pos += 4 * d;
        v
    };
    let mut samples = Vec::with_capacity(count);
    for e in entries {
        let (has_img, has_txt) = match e.availability {
            Availability::Complete => (true, true),
            Availability::ImageOnly => (true, false),
            Availability::TextOnly => (false, true),
            Availability::Empty => {
                return Err(format_err("manifest", format!("sample {} has no modality", e.id)));
            }
        };
        let image = has_img.then(|| take(d_image));
        let text = has_txt.then(|| take(d_text));
        samples.push(SamplePair {
            id: e.id,
            image,
            text,
            label: e.label,
            restored_image: e.restored.image,
            restored_text: e.restored.text,
        });
    }
    Ok(EmbeddingSet {
        d_image,
        d_text,
        samples,
    })
}

/// Writes `path` and its manifest.
pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let (bytes, manifest) = encode(set)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path)?;
    let manifest = fs::read_to_string(manifest_path(path))?;
    decode(&bytes, &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_set() -> EmbeddingSet {
        let mut a = SamplePair::complete("a", array![1.0, -2.5, 0.25], array![0.5, 4.0], 1);
        a.restored_text = true;
        let mut b = SamplePair::complete("b", array![3.0, 0.0, -1.0], array![1.5, -0.75], 0);
        b.text = None;
        let mut c = SamplePair::complete("c", array![0.0, 0.0, 0.0], array![-8.0, 2.0], 2);
        c.image = None;
        EmbeddingSet {
            d_image: 3,
            d_text: 2,
            samples: vec![a, b, c],
        }
    }

    #[test]
    fn round_trip_keeps_availability() {
        let set = small_set();
        let (bytes, manifest) = encode(&set).unwrap();
        assert_eq!(bytes.len(), 32 + 4 * (5 + 3 + 2));
        let back = decode(&bytes, &manifest).unwrap();
        assert_eq!(back, set);
        let (bytes2, manifest2) = encode(&back).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(manifest, manifest2);
    }

    #[test]
    fn corrupt_sections_are_named() {
        let (bytes, manifest) = encode(&small_set()).unwrap();
        let mut bad = bytes.clone();
        bad[10] ^= 1;
        assert!(matches!(decode(&bad, &manifest), Err(Error::Crc { section, .. }) if section == "header"));
        let mut bad = bytes.clone();
        bad[30] ^= 1;
        assert!(matches!(decode(&bad, &manifest), Err(Error::Crc { section, .. }) if section == "payload"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, &manifest), Err(Error::Format { section, .. }) if section == "header"));
        assert!(matches!(decode(&bytes[..40], &manifest), Err(Error::Truncated { section, .. }) if section == "payload"));
    }

    #[test]
    fn manifest_dimension_mismatch() {
        let (bytes, manifest) = encode(&small_set()).unwrap();
        let edited = manifest.replacen("\"d_image\":3", "\"d_image\":4", 1);
        assert!(matches!(decode(&bytes, &edited), Err(Error::Dimension { expected: 3, found: 4, .. })));
    }

    #[test]
    fn wrong_feature_length_is_rejected_on_write() {
        let mut set = small_set();
        set.samples[0].image = Some(array![1.0]);
        assert!(matches!(encode(&set), Err(Error::Dimension { .. })));
    }
}
