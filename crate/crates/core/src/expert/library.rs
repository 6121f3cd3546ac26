use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{FileKind, TensorFile};
use crate::error::{Error, Result};
use crate::expert::adapter::{LoraAdapter, SiteFactors};
use crate::lm::BaseLm;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Ordered set of experts sharing one base model. Index `i` always names the same
/// adapter in every coefficient vector derived from the library.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertLibrary {
    names: Vec<String>,
    adapters: Vec<LoraAdapter>,
    fingerprint: u64,
    pub notes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    base_fingerprint: String,
    rank: usize,
    alpha: f64,
    experts: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    notes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    task: Option<String>,
    file: String,
}

pub fn fingerprint_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

impl ExpertLibrary {
    pub fn new(entries: Vec<(String, LoraAdapter)>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::Invalid("expert library needs at least one adapter".into()))?;
        let fingerprint = first.1.fingerprint;
        let mut seen_names = HashSet::new();
        let mut seen_tasks = HashSet::new();
        for (name, ad) in &entries {
            if ad.fingerprint != fingerprint {
                return Err(Error::FingerprintMismatch);
            }
            if !ad.same_layout(&first.1) {
                return Err(Error::Shape(format!("expert `{name}` differs in layout")));
            }
            if !seen_names.insert(name.clone()) {
                return Err(Error::Invalid(format!("duplicate expert name `{name}`")));
            }
            if let Some(t) = &ad.task {
                if !seen_tasks.insert(t.clone()) {
                    return Err(Error::Invalid(format!("duplicate task label `{t}`")));
                }
            }
        }
        let (names, adapters) = entries.into_iter().unzip();
        Ok(Self {
            names,
            adapters,
            fingerprint,
            notes: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &LoraAdapter {
        &self.adapters[i]
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn rank(&self) -> usize {
        self.adapters[0].rank
    }

    pub fn alpha(&self) -> f64 {
        self.adapters[0].alpha
    }

    pub fn tasks(&self) -> Vec<Option<String>> {
        self.adapters.iter().map(|a| a.task.clone()).collect()
    }

    /// Index of the expert labelled with `task`.
    pub fn index_of_task(&self, task: &str) -> Option<usize> {
        self.adapters.iter().position(|a| a.task.as_deref() == Some(task))
    }

    pub fn check_compatible(&self, base: &BaseLm) -> Result<()> {
        self.adapters.iter().try_for_each(|a| a.check_compatible(base))
    }

    /// Copy with every task label removed; methods that must not see task identity
    /// are handed this view.
    pub fn without_labels(&self) -> ExpertLibrary {
        let mut lib = self.clone();
        for a in &mut lib.adapters {
            a.task = None;
        }
        lib
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut experts = Vec::with_capacity(self.len());
        for (name, ad) in self.names.iter().zip(&self.adapters) {
            let file = format!("{name}.afl");
            adapter_to_file(ad).write(&dir.join(&file))?;
            experts.push(ManifestEntry {
                name: name.clone(),
                task: ad.task.clone(),
                file,
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            base_fingerprint: fingerprint_hex(self.fingerprint),
            rank: self.rank(),
            alpha: self.alpha(),
            experts,
            notes: self.notes.clone(),
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(mpath.clone()),
            _ => e.into(),
        })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion(manifest.version));
        }
        let fp = u64::from_str_radix(&manifest.base_fingerprint, 16)
            .map_err(|_| Error::Manifest("base_fingerprint is not hex".into()))?;
        let mut entries = Vec::with_capacity(manifest.experts.len());
        for e in &manifest.experts {
            let path = dir.join(&e.file);
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
            let mut ad = adapter_from_file(&TensorFile::read(&path)?)?;
            if ad.fingerprint != fp {
                return Err(Error::FingerprintMismatch);
            }
            if ad.rank != manifest.rank || ad.alpha != manifest.alpha {
                return Err(Error::Manifest(format!(
                    "expert `{}` rank/alpha disagree with manifest",
                    e.name
                )));
            }
            ad.task = e.task.clone();
            entries.push((e.name.clone(), ad));
        }
        let mut lib = Self::new(entries)?;
        lib.notes = manifest.notes;
        Ok(lib)
    }
}

pub fn adapter_to_file(ad: &LoraAdapter) -> TensorFile {
    let mut tensors = Vec::with_capacity(2 * ad.sites.len());
    for (s, f) in ad.sites.iter().enumerate() {
        tensors.push((format!("site{s}.a"), f.a.clone()));
        tensors.push((format!("site{s}.b"), f.b.clone()));
    }
    TensorFile {
        kind: FileKind::Adapter,
        dims: vec![ad.rank as u64, ad.sites.len() as u64],
        scalars: vec![ad.alpha],
        fingerprint: ad.fingerprint,
        tensors,
    }
}

pub fn adapter_from_file(file: &TensorFile) -> Result<LoraAdapter> {
    file.expect_kind(FileKind::Adapter)?;
    let (rank, nsites) = match file.dims.as_slice() {
        [r, n] => (*r as usize, *n as usize),
        _ => return Err(Error::Invalid("adapter header needs 2 dims".into())),
    };
    let alpha = *file
        .scalars
        .first()
        .ok_or_else(|| Error::Invalid("adapter header lacks alpha".into()))?;
    let mut sites = Vec::with_capacity(nsites);
    for s in 0..nsites {
        let a = file.tensor(&format!("site{s}.a"))?.clone();
        let b = file.tensor(&format!("site{s}.b"))?.clone();
        if a.cols() != rank || b.rows() != rank {
            return Err(Error::Shape(format!("site {s} factors do not have rank {rank}")));
        }
        sites.push(SiteFactors { a, b });
    }
    Ok(LoraAdapter {
        sites,
        rank,
        alpha,
        fingerprint: file.fingerprint,
        task: None,
    })
}

impl LoraAdapter {
    pub fn save(&self, path: &Path) -> Result<()> {
        adapter_to_file(self).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        adapter_from_file(&TensorFile::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::numerics::{Params, Rng};

    fn library(n: usize) -> (BaseLm, ExpertLibrary) {
        let base = BaseLm::build(LmConfig::default(), &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        let entries = (0..n)
            .map(|i| {
                let mut a = LoraAdapter::zeros(&base, 4, 16.0).unwrap();
                for v in a.blocks_mut().into_iter().flatten() {
                    *v = rng.normal();
                }
                (format!("e{i}"), a.with_task(format!("t{i}")))
            })
            .collect();
        (base, ExpertLibrary::new(entries).unwrap())
    }

    #[test]
    fn save_load_bit_identical() {
        let (base, lib) = library(3);
        let dir = tempfile::tempdir().unwrap();
        lib.save(dir.path()).unwrap();
        let back = ExpertLibrary::load(dir.path()).unwrap();
        assert_eq!(back, lib);
        back.check_compatible(&base).unwrap();
    }

    #[test]
    fn corrupted_fingerprint_byte() {
        let (_, lib) = library(2);
        let dir = tempfile::tempdir().unwrap();
        lib.save(dir.path()).unwrap();
        let p = dir.path().join("e1.afl");
        let mut bytes = std::fs::read(&p).unwrap();
        // header: magic 4, version 4, kind 4, ndims 4, dims 16, nscalars 4, alpha 8
        bytes[44] ^= 0xff;
        std::fs::write(&p, bytes).unwrap();
        let err = ExpertLibrary::load(dir.path()).unwrap_err();
        assert_eq!(err.to_string(), "adapter/base mismatch");
    }

    #[test]
    fn missing_file_is_named() {
        let (_, lib) = library(2);
        let dir = tempfile::tempdir().unwrap();
        lib.save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("e0.afl")).unwrap();
        let err = ExpertLibrary::load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
        assert!(err.to_string().contains("e0.afl"));
    }

    #[test]
    fn truncated_and_version_errors_are_distinct() {
        let (_, lib) = library(1);
        let dir = tempfile::tempdir().unwrap();
        lib.save(dir.path()).unwrap();
        let p = dir.path().join("e0.afl");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(ExpertLibrary::load(dir.path()), Err(Error::Truncated(_))));
        std::fs::write(&p, &bytes).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).unwrap().replace("\"version\": 1", "\"version\": 9");
        std::fs::write(&mpath, text).unwrap();
        assert!(matches!(
            ExpertLibrary::load(dir.path()),
            Err(Error::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn duplicate_task_labels_rejected() {
        let (base, _) = library(1);
        let a = LoraAdapter::zeros(&base, 4, 16.0).unwrap().with_task("x");
        assert!(ExpertLibrary::new(vec![("a".into(), a.clone()), ("b".into(), a)]).is_err());
    }
}
