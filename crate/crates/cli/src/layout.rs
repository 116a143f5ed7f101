//! Where each step reads and writes its artifacts under the output root.

use std::path::{Path, PathBuf};

use placevalue::format::{Approach, Operation};

use crate::error::MissingArtifact;

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: PathBuf) -> Self {
        Layout { root }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn dataset(&self, op: Operation, approach: Approach) -> PathBuf {
        self.data_dir().join(format!("{op}-{approach}.txt"))
    }

    pub fn test_set(&self, op: Operation) -> PathBuf {
        self.data_dir().join(format!("{op}-test.tsv"))
    }

    pub fn model_dir(&self, op: Operation, approach: Approach) -> PathBuf {
        self.root.join("models").join(format!("{op}-{approach}"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn saliency_dir(&self) -> PathBuf {
        self.root.join("saliency")
    }

    pub fn remote_dir(&self) -> PathBuf {
        self.root.join("remote")
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TOKENIZER_FILE: &str = "tokenizer.txt";

/// Fails with the command that produces `path` when it does not exist.
pub fn require(path: &Path, hint: impl Into<String>) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingArtifact {
            path: path.display().to_string(),
            hint: hint.into(),
        }
        .into())
    }
}

pub fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| anyhow::Error::new(e).context(format!("creating {}", dir.display())))
}
