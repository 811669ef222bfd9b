//! Corpus manifest: a JSON list of utterances. Relative paths resolve
//! against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Asr,
    St,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub wav_path: PathBuf,
    /// Gold transcript or translation, space separated.
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_path: Option<PathBuf>,
    #[serde(default)]
    pub target_task: Task,
}

impl Entry {
    pub fn reference_words(&self) -> Vec<String> {
        self.reference.split_whitespace().map(str::to_string).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<Entry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<Entry>, base_dir: impl Into<PathBuf>) -> Result<Self, CliError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.id.is_empty() || e.id.contains(['/', '\\']) {
                return Err(CliError::Config(format!("invalid utterance id {:?}", e.id)));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(CliError::Config(format!("duplicate utterance id {:?}", e.id)));
            }
        }
        Ok(Self {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let entries: Vec<Entry> = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(entries, base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.entries).expect("manifest serializes");
        std::fs::write(path, text + "\n")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn wav_path(&self, e: &Entry) -> PathBuf {
        self.resolve(&e.wav_path)
    }

    pub fn alignment_path(&self, e: &Entry) -> Option<PathBuf> {
        e.alignment_path.as_deref().map(|p| self.resolve(p))
    }

    /// Errors listing every entry whose audio is missing.
    pub fn check_files(&self) -> Result<(), CliError> {
        let missing: Vec<&str> = self
            .entries
            .iter()
            .filter(|e| !self.wav_path(e).is_file())
            .map(|e| e.id.as_str())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!("audio missing for: {}", missing.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str) -> Entry {
        Entry {
            id: id.into(),
            wav_path: format!("{id}.wav").into(),
            reference: "A  B".into(),
            alignment_path: None,
            target_task: Task::Asr,
        }
    }

    #[test]
    fn ids_are_unique() {
        assert!(Manifest::new(vec![entry("a"), entry("b")], ".").is_ok());
        assert!(matches!(Manifest::new(vec![entry("a"), entry("a")], "."), Err(CliError::Config(_))));
        assert!(Manifest::new(vec![entry("x/y")], ".").is_err());
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(
            &path,
            r#"[{"id": "u1", "wav_path": "u1.wav", "reference": "A B", "target_task": "st"}]"#,
        )
        .unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.wav_path(&m.entries[0]), dir.path().join("u1.wav"));
        assert_eq!(m.entries[0].target_task, Task::St);
        assert_eq!(m.entries[0].reference_words(), vec!["A", "B"]);
        let err = m.check_files().unwrap_err();
        assert!(err.to_string().contains("u1"));
    }
}
