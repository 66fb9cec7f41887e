use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::StoreError;

pub const MANIFEST_FILE: &str = "trajectory.json";

/// One checkpoint along a training trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative paths are resolved against the manifest's directory.
    pub checkpoint_path: String,
    pub step: u64,
    pub tokens: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
}

/// Ordered record of the checkpoints a run emitted, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub entries: Vec<ManifestEntry>,
}

impl TrajectoryManifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last(&self) -> Option<&ManifestEntry> {
        self.entries.last()
    }

    /// Appends an entry, enforcing ordering and value ranges.
    pub fn push(&mut self, entry: ManifestEntry) -> Result<(), StoreError> {
        check_entry(&entry)?;
        if let Some(prev) = self.entries.last() {
            check_order(prev, &entry)?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        for e in &self.entries {
            check_entry(e)?;
        }
        for pair in self.entries.windows(2) {
            check_order(&pair[0], &pair[1])?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| StoreError::Open(path.display().to_string(), e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Rewrites every relative checkpoint path to be rooted at `base_dir`.
    pub fn rooted_at(&self, base_dir: &Path) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| ManifestEntry { checkpoint_path: resolve(base_dir, &e.checkpoint_path), ..e.clone() })
            .collect();
        Self { entries }
    }

    pub fn find_step(&self, step: u64) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.step == step)
    }
}

fn resolve(base_dir: &Path, p: &str) -> String {
    let path = PathBuf::from(p);
    if path.is_absolute() {
        p.to_string()
    } else {
        base_dir.join(path).to_string_lossy().into_owned()
    }
}

fn check_entry(e: &ManifestEntry) -> Result<(), StoreError> {
    let fail = |what: &str| Err(StoreError::Manifest(format!("step {}: {what}", e.step)));
    if e.checkpoint_path.is_empty() {
        return fail("empty checkpoint_path");
    }
    if !(e.lr >= 0.0 && e.lr.is_finite()) {
        return fail("lr must be a finite value >= 0");
    }
    if !e.train_loss.is_finite() {
        return fail("train_loss must be finite");
    }
    if !(e.grad_norm >= 0.0 && e.grad_norm.is_finite()) {
        return fail("grad_norm must be a finite value >= 0");
    }
    Ok(())
}

fn check_order(prev: &ManifestEntry, next: &ManifestEntry) -> Result<(), StoreError> {
    if next.step <= prev.step {
        return Err(StoreError::Manifest(format!(
            "steps must strictly increase ({} then {})",
            prev.step, next.step
        )));
    }
    if next.tokens < prev.tokens {
        return Err(StoreError::Manifest(format!(
            "tokens must not decrease ({} then {})",
            prev.tokens, next.tokens
        )));
    }
    Ok(())
}
