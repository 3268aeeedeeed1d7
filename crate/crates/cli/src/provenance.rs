//! Self-describing outputs: resolved configuration plus content hashes of
//! every input, written next to the results.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use sgtc::dataset::Manifest;

use crate::error::{CliError, Result};

/// SHA-256 over `blob <len>\0<bytes>`, the object framing git uses.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash over sorted `(name, blob hash)` entries, like a flat git tree.
pub fn tree_hash(entries: &[(String, String)]) -> String {
    let mut sorted: Vec<&(String, String)> = entries.iter().collect();
    sorted.sort();
    let mut body = Vec::new();
    for (name, hash) in sorted {
        body.extend_from_slice(format!("{hash} {name}\n").as_bytes());
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", body.len()).as_bytes());
    h.update(&body);
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(blob_hash(&bytes))
}

/// The manifest plus every image and mask it references, keyed by path
/// relative to the manifest root.
pub fn dataset_inputs(manifest_path: &Path, manifest: &Manifest) -> Vec<(String, PathBuf)> {
    let mut out = vec![("manifest".to_string(), manifest_path.to_path_buf())];
    for v in &manifest.volumes {
        for rel in [&v.image, &v.mask] {
            out.push((format!("data/{}", rel.display()), manifest.root.join(rel)));
        }
    }
    out
}

/// Writes an atomically replaced file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Writes `<label>.resolved.toml` and `<label>.inputs.sha256` into `dir`.
/// The hash file lists one `hash  name` line per input and ends with the
/// combined tree hash. Returns the tree hash.
pub fn record(dir: &Path, label: &str, resolved: &str, inputs: &[(String, PathBuf)]) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut entries = vec![("resolved-config".to_string(), blob_hash(resolved.as_bytes()))];
    for (name, path) in inputs {
        entries.push((name.clone(), hash_file(path)?));
    }
    let tree = tree_hash(&entries);
    let mut text = String::new();
    for (name, hash) in &entries {
        text.push_str(&format!("{hash}  {name}\n"));
    }
    text.push_str(&format!("{tree}  (tree)\n"));
    write_atomic(&dir.join(format!("{label}.resolved.toml")), resolved.as_bytes())?;
    write_atomic(&dir.join(format!("{label}.inputs.sha256")), text.as_bytes())?;
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_framing() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn tree_hash_ignores_entry_order() {
        let a = ("a".to_string(), blob_hash(b"1"));
        let b = ("b".to_string(), blob_hash(b"2"));
        assert_eq!(tree_hash(&[a.clone(), b.clone()]), tree_hash(&[b, a]));
    }
}
