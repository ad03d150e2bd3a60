//! On-disk formats: binary feature files, label CSVs and dataset manifests.
//!
//! Feature file, little-endian:
//!
//! ```text
//! "AFFEAT01" | u32 version = 1 | u8 modality | 3 zero bytes | u32 T | u32 D | T·D × f32
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{align, AlignedSample, FeatureSequence, LabelSequence, Modality};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"AFFEAT01";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Serializes `seq` in the feature-file layout.
pub fn encode_features(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let (t, d) = (seq.frames.rows(), seq.frames.cols());
    let (t32, d32) = match (u32::try_from(t), u32::try_from(d)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(Error::dimension(format!("feature extents {t}x{d} exceed the file format"))),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.push(seq.modality.code());
    out.extend_from_slice(&[0; 3]);
    out.extend_from_slice(&t32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for v in seq.frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a feature file image. `path` is used for error messages and, via its
/// file stem, as the sequence id.
pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < HEADER_LEN {
        return if bytes.len() >= 8 && &bytes[..8] != FEATURE_MAGIC {
            Err(format_err(path, "bad magic"))
        } else {
            Err(Error::Truncated { path: path.to_path_buf(), msg: format!("{} bytes is shorter than the header", bytes.len()) })
        };
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8]))));
    }
    let version = u32_at(bytes, 8);
    if version != FEATURE_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let modality = Modality::from_code(bytes[12]).ok_or_else(|| format_err(path, format!("unknown modality code {}", bytes[12])))?;
    if bytes[13..16] != [0, 0, 0] {
        return Err(format_err(path, "reserved header bytes are not zero"));
    }
    let (t, d) = (u32_at(bytes, 16) as usize, u32_at(bytes, 20) as usize);
    if t == 0 || d == 0 {
        return Err(format_err(path, format!("empty extents T={t}, D={d}")));
    }
    let expected = t.checked_mul(d).and_then(|n| n.checked_mul(4)).ok_or_else(|| format_err(path, "extents overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            msg: format!("header T={t}, D={d} needs {expected} payload bytes, found {}", payload.len()),
        });
    }
    let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data { path: path.to_path_buf(), msg: format!("non-finite value at frame {}, dim {}", i / d, i % d) });
    }
    let sequence_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(FeatureSequence { sequence_id, modality, frames: Tensor::new(&[t, d], data)? })
}

pub fn write_feature_file(path: &Path, seq: &FeatureSequence) -> Result<()> {
    fs::write(path, encode_features(seq)?).map_err(|e| Error::io(path, e))
}

/// Reads a feature file. The sequence id is taken from the file stem; callers
/// that know the id (e.g. from a manifest) overwrite it.
pub fn load_feature_file(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(path, &bytes)
}

fn data_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data { path: path.to_path_buf(), msg: msg.into() }
}

/// Reads a `frame,valence,arousal` CSV. Frame indices must be 0, 1, 2, ….
pub fn load_label_file(path: &Path, sequence_id: &str) -> Result<LabelSequence> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| data_err(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| data_err(path, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["frame", "valence", "arousal"] {
        return Err(format_err(path, format!("expected header frame,valence,arousal, found {:?}", headers)));
    }
    let (mut valence, mut arousal) = (Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| data_err(path, e.to_string()))?;
        let field = |k: usize| record.get(k).unwrap_or("");
        let frame: usize = field(0).parse().map_err(|_| data_err(path, format!("row {}: bad frame index {:?}", i + 1, field(0))))?;
        if frame != i {
            return Err(data_err(path, format!("row {}: frame index {frame}, expected {i}", i + 1)));
        }
        let parse = |k: usize| -> Result<f32> {
            let v: f32 = field(k).parse().map_err(|_| data_err(path, format!("frame {i}: bad value {:?}", field(k))))?;
            if v.is_nan() {
                return Err(data_err(path, format!("frame {i}: NaN label")));
            }
            Ok(v)
        };
        valence.push(parse(1)?);
        arousal.push(parse(2)?);
    }
    LabelSequence::from_raw(sequence_id, valence, arousal)
}

/// Writes a label CSV. Invalid frames are written as `-5` (the sentinel).
pub fn write_label_file(path: &Path, labels: &LabelSequence) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| data_err(path, e.to_string()))?;
    let csv_err = |e: csv::Error| data_err(path, e.to_string());
    w.write_record(["frame", "valence", "arousal"]).map_err(csv_err)?;
    for t in 0..labels.len() {
        let (v, a) = if labels.valid[t] { (labels.valence[t], labels.arousal[t]) } else { (-5.0, -5.0) };
        w.write_record([t.to_string(), v.to_string(), a.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sequence_id: String,
    pub visual: PathBuf,
    pub vggish: PathBuf,
    pub logmel: PathBuf,
    pub labels: PathBuf,
}

impl ManifestEntry {
    /// Loads all four files and aligns them.
    pub fn load(&self) -> Result<AlignedSample> {
        let mut streams = Vec::with_capacity(3);
        for (m, p) in [(Modality::Visual, &self.visual), (Modality::Vggish, &self.vggish), (Modality::Logmel, &self.logmel)] {
            let mut seq = load_feature_file(p)?;
            if seq.modality != m {
                return Err(format_err(p, format!("listed as {m} but header says {}", seq.modality)));
            }
            seq.sequence_id = self.sequence_id.clone();
            streams.push(seq);
        }
        let labels = load_label_file(&self.labels, &self.sequence_id)?;
        let mut it = streams.into_iter();
        let (v, a1, a2) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        Ok(align(v, a1, a2, labels)?.sample)
    }
}

/// `sequence_id,visual_path,vggish_path,logmel_path,labels_path`; relative
/// paths resolve against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_HEADER: [&str; 5] = ["sequence_id", "visual_path", "vggish_path", "logmel_path", "labels_path"];

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| data_err(path, e.to_string()))?;
        let headers = reader.headers().map_err(|e| data_err(path, e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(format_err(path, format!("expected header {}, found {:?}", MANIFEST_HEADER.join(","), headers)));
        }
        let mut entries = Vec::new();
        for record in reader.records() {
            let r = record.map_err(|e| data_err(path, e.to_string()))?;
            let get = |k: usize| r.get(k).unwrap_or("").to_string();
            if get(0).is_empty() {
                return Err(data_err(path, "empty sequence id"));
            }
            if entries.iter().any(|e: &ManifestEntry| e.sequence_id == get(0)) {
                return Err(data_err(path, format!("duplicate sequence id {}", get(0))));
            }
            entries.push(ManifestEntry {
                sequence_id: get(0),
                visual: base.join(get(1)),
                vggish: base.join(get(2)),
                logmel: base.join(get(3)),
                labels: base.join(get(4)),
            });
        }
        Ok(Self { entries })
    }

    /// Writes the manifest, storing paths relative to its directory when possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        let mut w = csv::Writer::from_path(path).map_err(|e| data_err(path, e.to_string()))?;
        let csv_err = |e: csv::Error| data_err(path, e.to_string());
        w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
        for e in &self.entries {
            w.write_record([e.sequence_id.clone(), rel(&e.visual), rel(&e.vggish), rel(&e.logmel), rel(&e.labels)]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: usize, d: usize) -> FeatureSequence {
        let data = (0..t * d).map(|i| (i as f32).sin() * 1e3).collect();
        FeatureSequence { sequence_id: "clip".into(), modality: Modality::Vggish, frames: Tensor::new(&[t, d], data).unwrap() }
    }

    #[test]
    fn feature_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.bin");
        let s = seq(7, 5);
        write_feature_file(&path, &s).unwrap();
        let back = load_feature_file(&path).unwrap();
        assert_eq!(back.sequence_id, "clip");
        assert_eq!(back.modality, Modality::Vggish);
        let bits = |x: &FeatureSequence| x.frames.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&s));
    }

    #[test]
    fn byte_layout() {
        let bytes = encode_features(&seq(3, 2)).unwrap();
        assert_eq!(bytes.len(), 24 + 24);
        assert_eq!(&bytes[..8], b"AFFEAT01");
        assert_eq!(bytes[12], 1);
        assert_eq!(u32_at(&bytes, 16), 3);
        assert_eq!(u32_at(&bytes, 20), 2);
        let back = decode_features(Path::new("x.bin"), &bytes).unwrap();
        assert_eq!(back.frames.shape(), &[3, 2]);
    }

    #[test]
    fn format_errors() {
        let p = Path::new("broken.bin");
        let mut bytes = encode_features(&seq(3, 2)).unwrap();

        let mut bad = bytes.clone();
        bad[..8].copy_from_slice(b"XXXXXXXX");
        let err = decode_features(p, &bad).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("broken.bin"));

        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(decode_features(p, &bad), Err(Error::Format { .. })));

        assert!(matches!(decode_features(p, &bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_features(p, &bytes[..10]), Err(Error::Truncated { .. })));

        bytes[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features(p, &bytes), Err(Error::Data { .. })));
    }

    #[test]
    fn labels_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lp = dir.path().join("l.csv");
        let labels = LabelSequence::from_raw("s", vec![0.25, -5.0, 1.0], vec![-0.5, 0.0, 0.125]).unwrap();
        write_label_file(&lp, &labels).unwrap();
        assert_eq!(load_label_file(&lp, "s").unwrap(), LabelSequence::from_raw("s", vec![0.25, -5.0, 1.0], vec![-0.5, -5.0, 0.125]).unwrap());

        fs::write(&lp, "frame,valence,arousal\n0,0.1,0.2\n2,0.1,0.2\n").unwrap();
        assert!(matches!(load_label_file(&lp, "s"), Err(Error::Data { .. })));

        let mp = dir.path().join("manifest.csv");
        let m = Manifest {
            entries: vec![ManifestEntry {
                sequence_id: "s".into(),
                visual: dir.path().join("v.bin"),
                vggish: dir.path().join("a.bin"),
                logmel: dir.path().join("m.bin"),
                labels: lp.clone(),
            }],
        };
        m.save(&mp).unwrap();
        assert!(fs::read_to_string(&mp).unwrap().contains("s,v.bin,a.bin,m.bin,l.csv"));
        assert_eq!(Manifest::load(&mp).unwrap(), m);
    }
}
