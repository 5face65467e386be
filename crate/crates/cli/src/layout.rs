//! File layout under the work directory.

use std::path::{Path, PathBuf};

use sgn_core::corpus::Split;

#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn corpus(&self, split: Split) -> PathBuf {
        self.corpus_dir().join(format!("{split}.jsonl"))
    }

    pub fn features(&self, split: Split) -> PathBuf {
        self.corpus_dir().join(format!("{split}.features"))
    }

    pub fn trees(&self, split: Split) -> PathBuf {
        self.root.join("trees").join(format!("{split}.trees"))
    }

    pub fn trees_meta(&self, split: Split) -> PathBuf {
        self.root.join("trees").join(format!("{split}.trees.meta.json"))
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.ckpt"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.jsonl"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.root.join("outputs").join(name)
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(format!("{name}.svg"))
    }
}
