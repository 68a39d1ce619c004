//! Checkpoint container: a documented key-value text header followed by raw
//! little-endian f64 tensor data.
//!
//! Layout:
//! ```text
//! DIFFSEG-CHECKPOINT v1
//! kind: <backbone|head|...>
//! meta.<key>: <value>           (any number of lines; values are JSON or plain text)
//! tensor: <name> f64 <d0> <d1> ...   (one line per tensor, in storage order)
//! data:
//! <tensor values, f64 little-endian, concatenated in declared order>
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneDescriptor};
use crate::error::{Error, Result};

const MAGIC: &str = "DIFFSEG-CHECKPOINT v1";

/// A parsed checkpoint: kind, metadata map, and named tensors in file order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Load(format!("checkpoint is missing tensor \"{name}\"")))
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Config(format!("checkpoint is missing metadata \"{key}\"")))
    }
}

/// Writes a checkpoint file. Metadata values must be single-line.
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    meta: &[(String, String)],
    tensors: &[(String, ndarray::ArrayViewD<'_, f64>)],
) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("kind: {kind}\n"));
    for (k, v) in meta {
        if v.contains('\n') {
            return Err(Error::Parameter(format!("metadata value for \"{k}\" contains a newline")));
        }
        header.push_str(&format!("meta.{k}: {v}\n"));
    }
    for (name, t) in tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor: {name} f64 {}\n", dims.join(" ")));
    }
    header.push_str("data:\n");
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(header.as_bytes())?;
    for (_, t) in tensors {
        let owned;
        let slice = match t.as_slice() {
            Some(s) => s,
            None => {
                owned = t.to_owned();
                owned.as_slice().unwrap()
            }
        };
        for v in slice {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Reads and validates a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Load(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let data_marker = b"data:\n";
    let header_end = find_subslice(&bytes, data_marker)
        .ok_or_else(|| Error::Load("checkpoint has no data section".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Load("checkpoint header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Load(format!(
            "not a checkpoint file (expected magic \"{MAGIC}\")"
        )));
    }
    let mut kind = None;
    let mut meta = BTreeMap::new();
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines {
        if let Some(v) = line.strip_prefix("kind: ") {
            kind = Some(v.to_string());
        } else if let Some(rest) = line.strip_prefix("meta.") {
            let (k, v) = rest
                .split_once(": ")
                .ok_or_else(|| Error::Load(format!("malformed metadata line: {line}")))?;
            meta.insert(k.to_string(), v.to_string());
        } else if let Some(rest) = line.strip_prefix("tensor: ") {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| Error::Load("tensor line missing name".into()))?;
            let dtype = parts
                .next()
                .ok_or_else(|| Error::Load("tensor line missing dtype".into()))?;
            if dtype != "f64" {
                return Err(Error::Load(format!("unsupported tensor dtype \"{dtype}\"")));
            }
            let dims = parts
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| Error::Load(format!("bad tensor dimension \"{d}\"")))
                })
                .collect::<Result<Vec<_>>>()?;
            specs.push((name.to_string(), dims));
        } else if !line.is_empty() {
            return Err(Error::Load(format!("unrecognized header line: {line}")));
        }
    }
    let kind = kind.ok_or_else(|| Error::Load("checkpoint header missing kind".into()))?;
    let mut offset = header_end + data_marker.len();
    let mut tensors = Vec::with_capacity(specs.len());
    for (name, dims) in specs {
        let count: usize = dims.iter().product();
        let nbytes = count * 8;
        if offset + nbytes > bytes.len() {
            return Err(Error::Load(format!(
                "checkpoint truncated: tensor \"{name}\" needs {nbytes} bytes past offset {offset}"
            )));
        }
        let mut values = Vec::with_capacity(count);
        for chunk in bytes[offset..offset + nbytes].chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        offset += nbytes;
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| Error::Load(format!("tensor \"{name}\" shape error: {e}")))?;
        tensors.push((name, arr));
    }
    if offset != bytes.len() {
        return Err(Error::Load(format!(
            "checkpoint has {} trailing bytes after declared tensors",
            bytes.len() - offset
        )));
    }
    Ok(Checkpoint { kind, meta, tensors })
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// SHA-256 over every persistent backbone parameter (names, shapes, and
/// little-endian values); bit-identical weights give identical hashes.
pub fn backbone_weight_hash(backbone: &Backbone) -> String {
    let mut hasher = Sha256::new();
    for p in backbone.persistent_params() {
        hasher.update(p.name.as_bytes());
        for d in p.value.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in p.value.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Saves a backbone: descriptor as JSON metadata, persistent parameters as
/// tensors. The transient reconstruction decoder is not serialized.
pub fn save_backbone(backbone: &Backbone, path: &Path) -> Result<()> {
    let descriptor_json = serde_json::to_string(&backbone.descriptor)?;
    let meta = vec![("descriptor".to_string(), descriptor_json)];
    let params = backbone.persistent_params();
    let tensors: Vec<(String, ndarray::ArrayViewD<'_, f64>)> =
        params.iter().map(|p| (p.name.clone(), p.value.view())).collect();
    save_checkpoint(path, "backbone", &meta, &tensors)
}

/// Loads a backbone checkpoint; the result is frozen by default.
pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != "backbone" {
        return Err(Error::Load(format!(
            "expected a backbone checkpoint, found kind \"{}\"",
            ckpt.kind
        )));
    }
    let descriptor: BackboneDescriptor = serde_json::from_str(ckpt.meta_value("descriptor")?)
        .map_err(|e| Error::Config(format!("checkpoint descriptor invalid: {e}")))?;
    descriptor.validate()?;
    let mut backbone = Backbone::new_toy(0);
    backbone.descriptor = descriptor;
    {
        let mut params = backbone.persistent_params_mut();
        if params.len() != ckpt.tensors.len() {
            return Err(Error::Load(format!(
                "checkpoint has {} tensors, backbone expects {}",
                ckpt.tensors.len(),
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let t = ckpt.tensor(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Load(format!(
                    "tensor \"{}\" has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value.assign(t);
        }
    }
    backbone.freeze();
    Ok(backbone)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Latent;
    use crate::tensor::{randn_array, stream_rng};
    use ndarray::Array2;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // Leak the dir so the file outlives the handle within the test.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn generic_roundtrip() {
        let path = tmpfile("c.ckpt");
        let a = Array2::from_shape_fn((3, 4), |(i, j)| i as f64 * 10.0 + j as f64);
        let b = ndarray::Array1::from_vec(vec![1.5, -2.5]);
        save_checkpoint(
            &path,
            "head",
            &[("note".into(), "hello world".into())],
            &[("a".into(), a.view().into_dyn()), ("b".into(), b.view().into_dyn())],
        )
        .unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.kind, "head");
        assert_eq!(ck.meta_value("note").unwrap(), "hello world");
        assert_eq!(ck.tensor("a").unwrap().shape(), &[3, 4]);
        assert_eq!(ck.tensor("a").unwrap()[[2, 3]], 23.0);
        assert_eq!(ck.tensor("b").unwrap()[[1]], -2.5);
        assert!(ck.tensor("missing").is_err());
    }

    #[test]
    fn backbone_roundtrip_preserves_activations() {
        let mut bb = crate::backbone::Backbone::new_toy(42);
        bb.descriptor.latent_scale = 0.37;
        bb.freeze();
        let path = tmpfile("bb.ckpt");
        save_backbone(&bb, &path).unwrap();
        let loaded = load_backbone(&path).unwrap();
        assert!(loaded.descriptor.frozen);
        assert_eq!(loaded.descriptor.latent_scale, 0.37);
        let mut rng = stream_rng(1, "ckpt-test");
        let z = Latent { values: randn_array(&mut rng, 8, 8, 4), timestep: 50 };
        let y = bb.null_condition();
        let t1 = bb.run_unet_with_taps(&z, &y).unwrap();
        let t2 = loaded.run_unet_with_taps(&z, &loaded.null_condition()).unwrap();
        for (a, b) in t1.iter().zip(t2.iter()) {
            assert_eq!(a.values, b.values);
        }
        assert_eq!(backbone_weight_hash(&bb), backbone_weight_hash(&loaded));
    }

    #[test]
    fn corrupt_files_are_load_errors() {
        let path = tmpfile("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Load(_))));

        let path2 = tmpfile("trunc.ckpt");
        let a = Array2::<f64>::zeros((4, 4));
        save_checkpoint(&path2, "head", &[], &[("a".into(), a.view().into_dyn())]).unwrap();
        let mut bytes = std::fs::read(&path2).unwrap();
        bytes.truncate(bytes.len() - 16);
        std::fs::write(&path2, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path2), Err(Error::Load(_))));

        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/x.ckpt")),
            Err(Error::Load(_))
        ));
    }

    #[test]
    fn invalid_descriptor_is_validation_error() {
        let bb = crate::backbone::Backbone::new_toy(7);
        let path = tmpfile("bb2.ckpt");
        save_backbone(&bb, &path).unwrap();
        // Rewrite the descriptor metadata with an empty block list.
        let content = std::fs::read(&path).unwrap();
        let text_end = content.windows(6).position(|w| w == b"data:\n").unwrap();
        let header = std::str::from_utf8(&content[..text_end]).unwrap();
        let mut desc = bb.descriptor.clone();
        desc.block_ids.clear();
        desc.block_channels.clear();
        let new_header = header
            .lines()
            .map(|l| {
                if l.starts_with("meta.descriptor: ") {
                    format!("meta.descriptor: {}", serde_json::to_string(&desc).unwrap())
                } else {
                    l.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        let mut out = new_header.into_bytes();
        out.push(b'\n');
        out.extend_from_slice(&content[text_end..]);
        std::fs::write(&path, out).unwrap();
        assert!(matches!(load_backbone(&path), Err(Error::Config(_))));
    }

    #[test]
    fn weight_hash_tracks_changes() {
        let bb1 = crate::backbone::Backbone::new_toy(1);
        let bb2 = crate::backbone::Backbone::new_toy(1);
        let bb3 = crate::backbone::Backbone::new_toy(2);
        assert_eq!(backbone_weight_hash(&bb1), backbone_weight_hash(&bb2));
        assert_ne!(backbone_weight_hash(&bb1), backbone_weight_hash(&bb3));
    }
}
