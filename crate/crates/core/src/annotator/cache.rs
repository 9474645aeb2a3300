use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::{AnnotationResult, Tasks, PROMPT_VERSION};
use crate::corpus::AnnotatedDialogue;
use crate::error::{Error, Result};

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes via a unique temporary file and a rename, so concurrent writers
/// never expose a partial file.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("cache"),
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Content-addressed store of successful per-dialogue annotation results.
#[derive(Debug, Clone)]
pub struct ResultCache {
    dir: PathBuf,
}

impl ResultCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResultCache { dir: dir.into() }
    }

    pub fn key(dialogue: &AnnotatedDialogue, model_id: &str, tasks: Tasks) -> String {
        let mut h = Sha256::new();
        h.update(dialogue.content_hash().as_bytes());
        h.update([0]);
        h.update(PROMPT_VERSION.as_bytes());
        h.update([0]);
        h.update(model_id.as_bytes());
        h.update([u8::from(tasks.correctness), u8::from(tasks.kcs)]);
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<AnnotationResult> {
        let text = std::fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put(&self, key: &str, result: &AnnotationResult) -> Result<()> {
        let path = self.path(key);
        let bytes = serde_json::to_vec_pretty(result)?;
        atomic_write(&path, &bytes).map_err(|e| Error::io(path, e))
    }
}
