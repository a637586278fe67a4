//! SHA-256 checksum manifests (`<hex digest>  <relative path>` per line).

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes a manifest covering `files` (paths relative to `root`).
pub fn write_manifest(root: &Path, files: &[&str], manifest: &Path) -> Result<()> {
    let mut text = String::new();
    for f in files {
        text.push_str(&format!("{}  {f}\n", digest_file(&root.join(f))?));
    }
    crate::io::write_atomic(manifest, text.as_bytes())
}

/// Checks every file listed in `manifest` against its digest.
pub fn verify_manifest(root: &Path, manifest: &Path) -> Result<()> {
    let text = std::fs::read_to_string(manifest)
        .map_err(|e| Error::Ingestion { path: manifest.to_path_buf(), reason: e.to_string() })?;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (digest, rel) = line.split_once("  ").ok_or_else(|| Error::Ingestion {
            path: manifest.to_path_buf(),
            reason: format!("line {} is not '<digest>  <path>'", n + 1),
        })?;
        let path = root.join(rel.trim());
        let actual = digest_file(&path)?;
        if actual != digest.trim().to_ascii_lowercase() {
            return Err(Error::Ingestion { path, reason: "checksum mismatch".into() });
        }
    }
    Ok(())
}
