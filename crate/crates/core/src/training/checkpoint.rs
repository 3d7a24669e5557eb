//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, a JSON
//! manifest, then every array as little-endian `f64` in manifest order
//! (parameters first, then each optimizer moment pair).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use autograd::Tensor;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HatError, Result};
use crate::params::{ParamKind, ParamStore};
use crate::training::optim::AdamState;

const MAGIC: &[u8; 8] = b"HATCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Last completed epoch.
    pub epoch: usize,
    /// Run seed; all sampling and augmentation streams derive from it and the
    /// epoch, so no generator state needs storing.
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: AdamState,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config_hash: String,
    epoch: usize,
    seed: u64,
    config: serde_json::Value,
    arrays: Vec<ArrayEntry>,
    optimizer_step: u64,
    /// Parameters with stored moments; each contributes `m` then `v`.
    moments: Vec<String>,
    payload_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

fn push_array(buf: &mut Vec<u8>, a: &Tensor) {
    for v in a.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut payload = Vec::new();
    let mut arrays = Vec::with_capacity(ckpt.params.len());
    for (name, entry) in ckpt.params.iter() {
        arrays.push(ArrayEntry {
            name: name.clone(),
            shape: entry.value.shape().to_vec(),
            kind: entry.kind,
        });
        push_array(&mut payload, &entry.value);
    }
    let mut moments = Vec::with_capacity(ckpt.optimizer.moments.len());
    for (name, (m, v)) in &ckpt.optimizer.moments {
        let shape = ckpt.params.get(name).map(|e| e.value.shape().to_vec());
        if shape.as_deref() != Some(m.shape()) || m.shape() != v.shape() {
            return Err(HatError::Checkpoint(format!(
                "optimizer moments for {name} do not match a parameter"
            )));
        }
        moments.push(name.clone());
        push_array(&mut payload, m);
        push_array(&mut payload, v);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: ckpt.config_hash.clone(),
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        config: ckpt.config.clone(),
        arrays,
        optimizer_step: ckpt.optimizer.step,
        moments,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let manifest = serde_json::to_vec(&manifest)?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(manifest.len() as u64).to_le_bytes())?;
        f.write_all(&manifest)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| HatError::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ArrayD::from_shape_vec(IxDyn(shape), data).expect("length matches shape"))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(HatError::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(HatError::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(len)?)
        .map_err(|e| HatError::Checkpoint(format!("corrupt manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(HatError::Checkpoint("manifest version disagrees with header".into()));
    }
    let payload = &bytes[r.pos..];
    if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(HatError::Checkpoint("payload checksum mismatch".into()));
    }

    let mut params = ParamStore::new();
    for entry in &manifest.arrays {
        let value = r.array(&entry.shape)?;
        params.insert(entry.name.clone(), value, entry.kind);
    }
    let mut moments = BTreeMap::new();
    for name in &manifest.moments {
        let shape = params
            .get(name)
            .map(|e| e.value.shape().to_vec())
            .ok_or_else(|| HatError::Checkpoint(format!("moments for unknown array {name}")))?;
        let m = r.array(&shape)?;
        let v = r.array(&shape)?;
        moments.insert(name.clone(), (m, v));
    }
    if r.pos != bytes.len() {
        return Err(HatError::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        epoch: manifest.epoch,
        seed: manifest.seed,
        config_hash: manifest.config_hash,
        config: manifest.config,
        params,
        optimizer: AdamState {
            step: manifest.optimizer_step,
            moments,
        },
    })
}

/// All arrays stored in a checkpoint, keyed by module path.
pub fn read_arrays(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let ckpt = load_checkpoint(path)?;
    Ok(ckpt
        .params
        .iter()
        .map(|(k, e)| (k.clone(), e.value.as_ref().clone()))
        .collect())
}

/// Key-by-key differences between a model's state and a checkpoint's.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyDiff {
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    pub shape_mismatch: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl KeyDiff {
    pub fn between(model: &ParamStore, stored: &ParamStore) -> Self {
        let mut diff = KeyDiff::default();
        for (name, entry) in model.iter() {
            match stored.get(name) {
                None => diff.missing.push(name.clone()),
                Some(s) if s.value.shape() != entry.value.shape() => diff.shape_mismatch.push((
                    name.clone(),
                    entry.value.shape().to_vec(),
                    s.value.shape().to_vec(),
                )),
                Some(_) => {}
            }
        }
        diff.unexpected = stored
            .names()
            .filter(|k| !model.contains(k))
            .cloned()
            .collect();
        diff
    }

    pub fn is_empty(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.shape_mismatch.is_empty()
    }
}

impl std::fmt::Display for KeyDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for k in &self.missing {
            writeln!(f, "  missing from checkpoint: {k}")?;
        }
        for k in &self.unexpected {
            writeln!(f, "  not in model: {k}")?;
        }
        for (k, m, s) in &self.shape_mismatch {
            writeln!(f, "  shape differs for {k}: model {m:?}, checkpoint {s:?}")?;
        }
        Ok(())
    }
}

/// Replaces every array in `model` with the checkpoint's; any key or shape
/// difference is an error listing all of them.
pub fn restore_params(model: &mut ParamStore, stored: &ParamStore) -> Result<()> {
    let diff = KeyDiff::between(model, stored);
    if !diff.is_empty() {
        return Err(HatError::Checkpoint(format!(
            "architecture mismatch:\n{diff}"
        )));
    }
    for (name, entry) in stored.iter() {
        model.set(name, entry.value.as_ref().clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use ndarray::arr1;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", arr1(&[1.5, -0.25, f64::MIN_POSITIVE]).into_dyn(), ParamKind::Trainable(ParamGroup::Base));
        params.insert("b.rm", arr1(&[3.0]).into_dyn(), ParamKind::Buffer);
        let mut moments = BTreeMap::new();
        moments.insert(
            "a.w".to_string(),
            (arr1(&[0.1, 0.2, 0.3]).into_dyn(), arr1(&[1.0, 2.0, 3.0]).into_dyn()),
        );
        Checkpoint {
            epoch: 3,
            seed: 7,
            config_hash: "abc".into(),
            config: serde_json::json!({"seed": 7}),
            params,
            optimizer: AdamState { step: 12, moments },
        }
    }

    #[test]
    fn round_trip_and_stable_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        let ck = sample();
        save_checkpoint(&p1, &ck).unwrap();
        let back = load_checkpoint(&p1).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.optimizer, ck.optimizer);
        for (k, e) in ck.params.iter() {
            assert_eq!(back.params.get(k).unwrap().value, e.value);
            assert_eq!(back.params.get(k).unwrap().kind, e.kind);
        }
        save_checkpoint(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(HatError::Checkpoint(_))));
        bytes[last] ^= 1;
        bytes[8] = 9;
        fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn restore_reports_keyed_diff() {
        let ck = sample();
        let mut model = ParamStore::new();
        model.insert("a.w", arr1(&[0.0, 0.0]).into_dyn(), ParamKind::Trainable(ParamGroup::Base));
        model.insert("c.x", arr1(&[0.0]).into_dyn(), ParamKind::Buffer);
        let diff = KeyDiff::between(&model, &ck.params);
        assert_eq!(diff.missing, vec!["c.x".to_string()]);
        assert_eq!(diff.unexpected, vec!["b.rm".to_string()]);
        assert_eq!(diff.shape_mismatch.len(), 1);
        assert!(restore_params(&mut model, &ck.params).is_err());
    }
}
