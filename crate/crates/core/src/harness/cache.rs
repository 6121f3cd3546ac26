//! Content-addressed artifact cache.
//!
//! Every artifact lives in `<root>/<kind>-<hash>/`, where the hash covers the
//! JSON key material (relevant config sections plus the hashes of upstream
//! artifacts). Entries are built in a scratch directory and renamed into place,
//! so a crashed run never leaves a half-written entry behind.

use std::cell::Cell;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::Result;
use crate::harness::config::content_hash;

pub const CACHE_ENV: &str = "AFL_CACHE_DIR";
const META_FILE: &str = "meta.json";

#[derive(Debug)]
pub struct Cache {
    root: Option<PathBuf>,
    hits: Cell<usize>,
    misses: Cell<usize>,
}

/// Artifact plus the diagnostics recorded when it was built.
#[derive(Clone, Debug)]
pub struct Cached<T, M> {
    pub value: T,
    pub meta: M,
    pub key: String,
}

impl Cache {
    /// Cache rooted at `root`; `None` disables caching.
    pub fn new(root: Option<PathBuf>) -> Self {
        Self {
            root,
            hits: Cell::new(0),
            misses: Cell::new(0),
        }
    }

    /// `$AFL_CACHE_DIR` if set, otherwise `<out>/cache`.
    pub fn for_output(out: &Path) -> Self {
        let root = std::env::var_os(CACHE_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| out.join("cache"));
        Self::new(Some(root))
    }

    pub fn disabled() -> Self {
        Self::new(None)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn hits(&self) -> usize {
        self.hits.get()
    }

    pub fn misses(&self) -> usize {
        self.misses.get()
    }

    /// Returns the cached artifact for `(kind, material)` or builds and stores it.
    pub fn get_or_build<T, M, K>(
        &self,
        kind: &str,
        material: &K,
        load: impl FnOnce(&Path) -> Result<T>,
        save: impl FnOnce(&T, &Path) -> Result<()>,
        build: impl FnOnce() -> Result<(T, M)>,
    ) -> Result<Cached<T, M>>
    where
        M: Serialize + DeserializeOwned,
        K: Serialize + ?Sized,
    {
        let key = content_hash(&serde_json::to_string(material)?);
        let Some(root) = &self.root else {
            self.misses.set(self.misses.get() + 1);
            let (value, meta) = build()?;
            return Ok(Cached { value, meta, key });
        };
        let dir = root.join(format!("{kind}-{key}"));
        let meta_path = dir.join(META_FILE);
        if meta_path.is_file() {
            let loaded = std::fs::read_to_string(&meta_path)
                .map_err(Into::into)
                .and_then(|t| serde_json::from_str::<M>(&t).map_err(Into::into))
                .and_then(|meta| load(&dir).map(|v| (v, meta)));
            match loaded {
                Ok((value, meta)) => {
                    log::debug!("cache hit {kind}-{key}");
                    self.hits.set(self.hits.get() + 1);
                    return Ok(Cached { value, meta, key });
                }
                Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", dir.display()),
            }
        }
        self.misses.set(self.misses.get() + 1);
        let (value, meta) = build()?;
        let scratch = root.join(format!(".tmp-{kind}-{key}-{}", std::process::id()));
        if scratch.exists() {
            std::fs::remove_dir_all(&scratch)?;
        }
        std::fs::create_dir_all(&scratch)?;
        save(&value, &scratch)?;
        std::fs::write(scratch.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::rename(&scratch, &dir)?;
        Ok(Cached { value, meta, key })
    }
}
