//! Parameter checkpoints: a flat binary of little-endian f32 tensors plus a
//! text manifest of `name<TAB>rows,cols<TAB>offset` (offset in floats).

use std::io::Write;
use std::path::Path;

use crate::nn::ParamStore;
use crate::{Error, Result};

pub const TENSORS_FILE: &str = "tensors.bin";
pub const MANIFEST_FILE: &str = "params.manifest";

/// Writes the store's parameters under `dir`.
pub fn save_params(store: &ParamStore, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::with_capacity(store.num_values() * 4);
    let mut manifest = String::new();
    let mut offset = 0usize;
    for (name, p) in store.iter() {
        manifest.push_str(&format!("{name}\t{},{}\t{offset}\n", p.rows, p.cols));
        for v in &p.value {
            blob.extend((*v as f32).to_le_bytes());
        }
        offset += p.value.len();
    }
    std::fs::write(dir.join(TENSORS_FILE), blob)?;
    let mut f = std::fs::File::create(dir.join(MANIFEST_FILE))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

/// Loads a checkpoint into an existing store; every entry must match the
/// store's registered name and shape.
pub fn load_params(store: &mut ParamStore, dir: &Path) -> Result<()> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Input(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let blob = std::fs::read(dir.join(TENSORS_FILE))?;
    let floats: Vec<f64> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let mut seen = 0usize;
    for (ln, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::input(format!("manifest line {} malformed", ln + 1)));
        }
        let name = parts[0];
        let dims: Vec<usize> = parts[1]
            .split(',')
            .map(|d| d.parse().map_err(|_| Error::input("bad shape")))
            .collect::<Result<_>>()?;
        let offset: usize = parts[2].parse().map_err(|_| Error::input("bad offset"))?;
        if dims.len() != 2 {
            return Err(Error::input(format!("{name}: expected 2-d shape")));
        }
        if !store.contains(name) {
            return Err(Error::input(format!("checkpoint has unknown tensor {name}")));
        }
        let p = store.get_mut(name);
        if (p.rows, p.cols) != (dims[0], dims[1]) {
            return Err(Error::input(format!(
                "{name}: checkpoint shape {}x{} vs model {}x{}",
                dims[0], dims[1], p.rows, p.cols
            )));
        }
        let n = dims[0] * dims[1];
        let slice = floats
            .get(offset..offset + n)
            .ok_or_else(|| Error::input(format!("{name}: tensor data out of range")))?;
        p.value.copy_from_slice(slice);
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::input(format!(
            "checkpoint holds {seen} tensors, model has {}",
            store.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_f32() {
        let mut store = ParamStore::new();
        store.insert("a.w", 2, 3, vec![0.5, -1.25, 3.0, 0.0, 2.5, -0.75]);
        store.insert("b", 1, 2, vec![1.0, -2.0]);
        let dir = tempfile::tempdir().unwrap();
        save_params(&store, dir.path()).unwrap();

        let mut other = store.clone();
        for p in ["a.w", "b"] {
            other.get_mut(p).value.iter_mut().for_each(|v| *v = 9.0);
        }
        load_params(&mut other, dir.path()).unwrap();
        // All values here are exactly representable in f32.
        assert_eq!(other.get("a.w").value, store.get("a.w").value);
        assert_eq!(other.get("b").value, store.get("b").value);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", 2, 2, vec![1.0; 4]);
        let dir = tempfile::tempdir().unwrap();
        save_params(&store, dir.path()).unwrap();
        let mut other = ParamStore::new();
        other.insert("a", 1, 4, vec![0.0; 4]);
        assert!(load_params(&mut other, dir.path()).is_err());
    }

    #[test]
    fn missing_tensor_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", 1, 1, vec![1.0]);
        let dir = tempfile::tempdir().unwrap();
        save_params(&store, dir.path()).unwrap();
        let mut other = ParamStore::new();
        other.insert("a", 1, 1, vec![0.0]);
        other.insert("b", 1, 1, vec![0.0]);
        assert!(load_params(&mut other, dir.path()).is_err());
    }
}
