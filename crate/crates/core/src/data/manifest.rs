use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tensor::Tensor;

/// `frames × dim` feature matrix, row-major, stored exactly as read (`f32`).
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Features {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if frames == 0 || dim == 0 || frames * dim != data.len() {
            return Err(DataError::Integrity(format!(
                "feature matrix {frames}x{dim} with {} values",
                data.len()
            )));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.frames,
            self.dim,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("validated shape")
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn bit_eq(&self, other: &Features) -> bool {
        self.frames == other.frames
            && self.dim == other.dim
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Features,
    pub lang_src: String,
    pub lang_tgt: Option<String>,
    pub transcript: Option<String>,
    pub translation: Option<String>,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub feat: String,
    pub frames: usize,
    pub dim: usize,
    pub lang_src: String,
    #[serde(default)]
    pub lang_tgt: Option<String>,
    #[serde(default)]
    pub transcript: Option<String>,
    #[serde(default)]
    pub translation: Option<String>,
}

fn read_features(path: &Path, frames: usize, dim: usize) -> Result<Features, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let expected = frames * dim * 4;
    if bytes.len() != expected {
        return Err(DataError::Integrity(format!(
            "{}: declared {frames}x{dim} f32 ({expected} bytes) but file has {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Features::new(frames, dim, data)
}

/// Reads a manifest; relative feature paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        if *dim.get_or_insert(rec.dim) != rec.dim {
            return Err(DataError::Integrity(format!(
                "utterance {} has dim {} but manifest dim is {}",
                rec.id,
                rec.dim,
                dim.unwrap_or_default()
            )));
        }
        let feat_path = {
            let p = PathBuf::from(&rec.feat);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let features = read_features(&feat_path, rec.frames, rec.dim)?;
        out.push(Utterance {
            id: rec.id,
            features,
            lang_src: rec.lang_src,
            lang_tgt: rec.lang_tgt,
            transcript: rec.transcript,
            translation: rec.translation,
        });
    }
    Ok(out)
}

/// Writes `<dir>/<name>.jsonl` plus one `<dir>/feats/<id>.f32` per utterance.
pub fn write_manifest(dir: &Path, name: &str, utts: &[Utterance]) -> Result<PathBuf, DataError> {
    let feat_dir = dir.join("feats");
    fs::create_dir_all(&feat_dir).map_err(|e| DataError::io(&feat_dir, e))?;
    let manifest = dir.join(format!("{name}.jsonl"));
    let mut out = Vec::new();
    for u in utts {
        let rel = format!("feats/{}.f32", u.id);
        let fp = dir.join(&rel);
        fs::write(&fp, u.features.to_le_bytes()).map_err(|e| DataError::io(&fp, e))?;
        let rec = ManifestRecord {
            id: u.id.clone(),
            feat: rel,
            frames: u.features.frames(),
            dim: u.features.dim(),
            lang_src: u.lang_src.clone(),
            lang_tgt: u.lang_tgt.clone(),
            transcript: u.transcript.clone(),
            translation: u.translation.clone(),
        };
        serde_json::to_writer(&mut out, &rec).expect("in-memory write");
        out.push(b'\n');
    }
    let mut f = fs::File::create(&manifest).map_err(|e| DataError::io(&manifest, e))?;
    f.write_all(&out).map_err(|e| DataError::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(id: &str, frames: usize, dim: usize) -> Utterance {
        let data = (0..frames * dim).map(|i| i as f32 * 0.1 - 1.7).collect();
        Utterance {
            id: id.into(),
            features: Features::new(frames, dim, data).unwrap(),
            lang_src: "aa".into(),
            lang_tgt: Some("Bb".into()),
            transcript: Some("ka ro".into()),
            translation: Some("Ro Ka, !".into()),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let utts = vec![utt("u1", 10, 4), utt("u0", 3, 4)];
        let path = write_manifest(dir.path(), "train", &utts).unwrap();
        assert_eq!(fs::metadata(dir.path().join("feats/u1.f32")).unwrap().len(), 160);
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].id, "u1");
        assert_eq!(back[0].features.frames(), 10);
        assert_eq!(back[0].features.dim(), 4);
        for (a, b) in utts.iter().zip(&back) {
            assert!(a.features.bit_eq(&b.features));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn short_feature_file_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "m", &[utt("x", 10, 4)]).unwrap();
        fs::write(dir.path().join("feats/x.f32"), vec![0u8; 159]).unwrap();
        assert!(matches!(load_manifest(&path), Err(DataError::Integrity(_))));
    }

    #[test]
    fn missing_feature_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "m", &[utt("x", 2, 2)]).unwrap();
        fs::remove_file(dir.path().join("feats/x.f32")).unwrap();
        assert!(matches!(load_manifest(&path), Err(DataError::Io { .. })));
        assert!(matches!(
            load_manifest(&dir.path().join("nope.jsonl")),
            Err(DataError::Io { .. })
        ));
    }
}
