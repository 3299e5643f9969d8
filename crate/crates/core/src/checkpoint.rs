//! Model checkpoints: a text header followed by little-endian `f64` payload.
//!
//! ```text
//! FBGS-CKPT 1
//! kind classifier
//! meta {"classifier":{...}}
//! tensor classifier.trunk.0.w 2 16
//! tensor classifier.trunk.0.b 1 16
//! data
//! <raw bytes>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{read_file, write_file, Error, Result};
use crate::models::{Classifier, ClassifierShape, Denoiser, DenoiserShape, EncoderShape, InstanceEncoder, Module};
use crate::ndiff::Array;

pub const MAGIC: &str = "FBGS-CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC} {VERSION}\nkind {}\nmeta {}\n", self.kind, self.meta);
        for (name, a) in &self.tensors {
            let _ = writeln!(head, "tensor {name} {} {}", a.rows(), a.cols());
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        for (_, a) in &self.tensors {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str, String> {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or("truncated header")?;
            let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| "header is not text")?;
            pos += end + 1;
            Ok(line)
        };
        let magic = next_line()?;
        if magic != format!("{MAGIC} {VERSION}") {
            return Err(format!("expected `{MAGIC} {VERSION}`, found `{}`", magic.chars().take(40).collect::<String>()));
        }
        let kind = next_line()?.strip_prefix("kind ").ok_or("missing kind")?.to_string();
        let meta_text = next_line()?.strip_prefix("meta ").ok_or("missing meta")?;
        let meta: serde_json::Value = serde_json::from_str(meta_text).map_err(|e| format!("bad meta: {e}"))?;
        let mut shapes = Vec::new();
        loop {
            let line = next_line()?;
            if line == "data" {
                break;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["tensor", name, r, c] => {
                    let r: usize = r.parse().map_err(|_| format!("bad row count in `{line}`"))?;
                    let c: usize = c.parse().map_err(|_| format!("bad column count in `{line}`"))?;
                    shapes.push((name.to_string(), r, c));
                }
                _ => return Err(format!("unexpected header line `{line}`")),
            }
        }
        let payload = &bytes[pos..];
        let expected: usize = shapes.iter().map(|(_, r, c)| r * c * 8).sum();
        if payload.len() != expected {
            return Err(format!("payload has {} bytes, header describes {expected}", payload.len()));
        }
        let mut offset = 0;
        let tensors = shapes
            .into_iter()
            .map(|(name, r, c)| {
                let data = payload[offset..offset + r * c * 8]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect();
                offset += r * c * 8;
                (name, Array::from_vec(r, c, data).expect("sized from header"))
            })
            .collect();
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_bytes())
    }

    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let bytes = read_file(path)?;
        let schema = |msg: String| Error::Schema { path: path.to_path_buf(), msg };
        let ck = Self::from_bytes(&bytes).map_err(schema)?;
        if ck.kind != kind {
            return Err(schema(format!("checkpoint holds `{}`, expected `{kind}`", ck.kind)));
        }
        Ok(ck)
    }

    fn meta_field<T: DeserializeOwned>(&self, key: &str) -> Result<T, String> {
        let v = self.meta.get(key).ok_or_else(|| format!("meta lacks `{key}`"))?;
        serde_json::from_value(v.clone()).map_err(|e| format!("meta `{key}`: {e}"))
    }

    /// Copies stored tensors into `module`, requiring identical names and shapes.
    fn fill<M: Module>(&self, module: &mut M, offset: usize) -> Result<usize, String> {
        let names: Vec<String> = module.tensors().into_iter().map(|(n, _)| n).collect();
        for (i, (slot, name)) in module.tensors_mut().into_iter().zip(&names).enumerate() {
            let (stored, a) = self.tensors.get(offset + i).ok_or_else(|| format!("missing tensor {name}"))?;
            if stored != name {
                return Err(format!("expected tensor {name}, found {stored}"));
            }
            if a.shape() != slot.shape() {
                return Err(format!("tensor {name} has shape {:?}, expected {:?}", a.shape(), slot.shape()));
            }
            *slot = a.clone();
        }
        Ok(offset + names.len())
    }
}

fn collect<M: Module>(m: &M, out: &mut Vec<(String, Array)>) {
    out.extend(m.tensors().into_iter().map(|(n, a)| (n, a.clone())));
}

fn meta_of(pairs: &[(&str, serde_json::Value)]) -> serde_json::Value {
    serde_json::Value::Object(pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect())
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("shapes serialize")
}

pub const DIFFUSION_KIND: &str = "diffusion";
pub const CLASSIFIER_KIND: &str = "classifier";

pub fn save_diffusion(path: &Path, den: &Denoiser, enc: &InstanceEncoder) -> Result<()> {
    let mut tensors = Vec::new();
    collect(den, &mut tensors);
    collect(enc, &mut tensors);
    let meta = meta_of(&[("denoiser", to_json(&den.shape)), ("encoder", to_json(&enc.shape))]);
    Checkpoint { kind: DIFFUSION_KIND.into(), meta, tensors }.save(path)
}

pub fn load_diffusion(path: &Path) -> Result<(Denoiser, InstanceEncoder)> {
    let ck = Checkpoint::load(path, DIFFUSION_KIND)?;
    let schema = |msg: String| Error::Schema { path: path.to_path_buf(), msg };
    let dshape: DenoiserShape = ck.meta_field("denoiser").map_err(schema)?;
    let eshape: EncoderShape = ck.meta_field("encoder").map_err(schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut den = Denoiser::init(dshape, &mut rng);
    let mut enc = InstanceEncoder::init(eshape, &mut rng);
    let used = ck.fill(&mut den, 0).and_then(|o| ck.fill(&mut enc, o)).map_err(schema)?;
    if used != ck.tensors.len() {
        return Err(schema(format!("{} unexpected trailing tensors", ck.tensors.len() - used)));
    }
    Ok((den, enc))
}

pub fn save_classifier(path: &Path, clf: &Classifier) -> Result<()> {
    let mut tensors = Vec::new();
    collect(clf, &mut tensors);
    let meta = meta_of(&[("classifier", to_json(&clf.shape))]);
    Checkpoint { kind: CLASSIFIER_KIND.into(), meta, tensors }.save(path)
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let ck = Checkpoint::load(path, CLASSIFIER_KIND)?;
    let schema = |msg: String| Error::Schema { path: path.to_path_buf(), msg };
    let shape: ClassifierShape = ck.meta_field("classifier").map_err(schema)?;
    let mut clf = Classifier::init(shape, &mut ChaCha8Rng::seed_from_u64(0));
    let used = ck.fill(&mut clf, 0).map_err(schema)?;
    if used != ck.tensors.len() {
        return Err(schema(format!("{} unexpected trailing tensors", ck.tensors.len() - used)));
    }
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let ck = Checkpoint {
            kind: "x".into(),
            meta: serde_json::json!({"a": 1}),
            tensors: vec![
                ("w".into(), Array::from_fn(2, 3, |i, j| i as f64 * 0.1 - j as f64 / 3.0)),
                ("b".into(), Array::zeros(1, 0)),
            ],
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[10] = b'9';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().contains("expected"));
    }

    #[test]
    fn models_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let den = Denoiser::init(DenoiserShape::default(), &mut rng);
        let enc = InstanceEncoder::init(EncoderShape::default(), &mut rng);
        let p = dir.path().join("d.ckpt");
        save_diffusion(&p, &den, &enc).unwrap();
        let (d2, e2) = load_diffusion(&p).unwrap();
        assert_eq!((d2, e2), (den, enc));
        assert!(matches!(load_classifier(&p), Err(Error::Schema { .. })));

        let clf = Classifier::init(ClassifierShape { hidden: vec![4], ..Default::default() }, &mut rng);
        let q = dir.path().join("c.ckpt");
        save_classifier(&q, &clf).unwrap();
        assert_eq!(load_classifier(&q).unwrap(), clf);
        assert!(matches!(load_classifier(&dir.path().join("none")), Err(Error::MissingFile(_))));
    }
}
