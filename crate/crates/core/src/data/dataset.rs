//! Dataset directory: `manifest.jsonl` plus one tensor file per modality.
//!
//! The first manifest line is a header `{"format", "version", "count",
//! "resolution", "entries_sha256", "files_sha256"}`; each following line
//! describes one sample and the byte offsets of its three images in
//! `raw.gzt`, `depth.gzt` and `pose.gzt`. The digests cover the sample lines
//! and each tensor file.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use gazecast_tensor::serialize::{encode_tensor, read_tensor};
use gazecast_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SampleMeta, SceneSample};
use crate::config::ModalityId;
use crate::error::{GazeError, Result};

pub const MANIFEST: &str = "manifest.jsonl";
const FORMAT: &str = "gazecast-dataset";
const VERSION: u32 = 2;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
    resolution: usize,
    entries_sha256: String,
    /// raw, depth, pose.
    files_sha256: [String; 3],
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    #[serde(flatten)]
    meta: SampleMeta,
    /// Byte offsets in raw, depth and pose files.
    offsets: [u64; 3],
}

fn modality_file(m: ModalityId) -> String {
    format!("{}.gzt", m.name())
}

pub fn write_dataset(samples: &[SceneSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blobs: [Vec<u8>; 3] = Default::default();
    let mut lines = Vec::new();
    for s in samples {
        let mut offsets = [0u64; 3];
        for m in ModalityId::ALL {
            let img = s.image_unchecked(m).ok_or_else(|| {
                GazeError::Data(format!("sample {} lacks modality {m}", s.sample_id))
            })?;
            offsets[m.index()] = blobs[m.index()].len() as u64;
            encode_tensor(img, &mut blobs[m.index()]);
        }
        let entry = Entry {
            meta: SampleMeta {
                sample_id: s.sample_id,
                head_box: s.head_box,
                eye: s.eye,
                gaze_points: s.gaze_points.clone(),
                in_frame: s.in_frame,
                oracle_gaze_dir: s.oracle_gaze_dir,
                scenario: s.scenario,
            },
            offsets,
        };
        serde_json::to_writer(&mut lines, &entry)?;
        lines.push(b'\n');
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        count: samples.len(),
        resolution: samples.first().map_or(0, |s| s.resolution()),
        entries_sha256: sha_hex(&lines),
        files_sha256: blobs.each_ref().map(|b| sha_hex(b)),
    };
    let mut manifest = serde_json::to_vec(&header)?;
    manifest.push(b'\n');
    manifest.extend_from_slice(&lines);
    for m in ModalityId::ALL {
        fs::File::create(dir.join(modality_file(m)))?.write_all(&blobs[m.index()])?;
    }
    fs::File::create(dir.join(MANIFEST))?.write_all(&manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    read_dataset_modalities(dir, &ModalityId::ALL)
}

/// Loads only the listed modalities; the other tensor files are never
/// opened.
pub fn read_dataset_modalities(dir: &Path, modalities: &[ModalityId]) -> Result<Vec<SceneSample>> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read(&manifest_path)
        .map_err(|e| GazeError::Data(format!("{}: {e}", manifest_path.display())))?;
    let split = text.iter().position(|&b| b == b'\n').unwrap_or(text.len());
    let (first, rest) = (&text[..split], text.get(split + 1..).unwrap_or(&[]));
    if first.is_empty() {
        return Err(GazeError::Data("manifest is empty (missing header)".into()));
    }
    let header: Header =
        serde_json::from_slice(first).map_err(|e| GazeError::Data(format!("manifest header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(GazeError::Data(format!(
            "unsupported dataset format {} v{}",
            header.format, header.version
        )));
    }
    if sha_hex(rest) != header.entries_sha256 {
        return Err(GazeError::Data("manifest sample lines do not match their digest".into()));
    }
    let mut entries = Vec::with_capacity(header.count);
    for (i, line) in rest.split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let e: Entry = serde_json::from_slice(line)
            .map_err(|e| GazeError::Data(format!("manifest line {}: {e}", i + 2)))?;
        entries.push(e);
    }
    if entries.len() != header.count {
        return Err(GazeError::Data(format!(
            "manifest header announces {} samples but lists {}",
            header.count,
            entries.len()
        )));
    }

    let mut images: Vec<[Option<Tensor<f32>>; 3]> = (0..entries.len()).map(|_| Default::default()).collect();
    for &m in modalities {
        let bytes = fs::read(dir.join(modality_file(m)))?;
        if sha_hex(&bytes) != header.files_sha256[m.index()] {
            return Err(GazeError::Data(format!("{} does not match its digest", modality_file(m))));
        }
        let mut pos = 0u64;
        for (k, e) in entries.iter().enumerate() {
            if e.offsets[m.index()] != pos {
                return Err(GazeError::Data(format!(
                    "{}: record {k} expected at byte {pos}, manifest says {}",
                    modality_file(m),
                    e.offsets[m.index()]
                )));
            }
            let mut cur = Cursor::new(&bytes[pos as usize..]);
            let t: Tensor<f32> = read_tensor(&mut cur)?;
            pos += cur.position();
            images[k][m.index()] = Some(t);
        }
        if pos != bytes.len() as u64 {
            return Err(GazeError::Data(format!(
                "{} holds more records than the manifest's {} samples",
                modality_file(m),
                entries.len()
            )));
        }
    }
    entries
        .into_iter()
        .zip(images)
        .map(|(e, imgs)| SceneSample::from_parts(imgs, e.meta))
        .collect()
}

/// SHA-256 over the manifest and tensor files, hex encoded.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(dir.join(MANIFEST))?);
    for m in ModalityId::ALL {
        h.update(fs::read(dir.join(modality_file(m)))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
