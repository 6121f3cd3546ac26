use std::path::Path;

use crate::binfmt::{FileKind, TensorFile};
use crate::error::{Error, Result};
use crate::lm::model::{BaseLm, LmConfig};
use crate::numerics::{Matrix, Params, Rng};

impl BaseLm {
    pub fn to_tensor_file(&self) -> TensorFile {
        let c = &self.config;
        let shapes = self.block_shapes();
        let tensors = self
            .block_names()
            .into_iter()
            .zip(self.blocks())
            .zip(shapes)
            .map(|((name, data), (r, cols))| {
                (name, Matrix::from_vec(r, cols, data.to_vec()).expect("block shape"))
            })
            .collect();
        TensorFile {
            kind: FileKind::BaseModel,
            dims: [c.vocab, c.width, c.layers, c.heads, c.ffn, c.max_len]
                .iter()
                .map(|&d| d as u64)
                .collect(),
            scalars: vec![],
            fingerprint: self.fingerprint(),
            tensors,
        }
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        file.expect_kind(FileKind::BaseModel)?;
        if file.dims.len() != 6 {
            return Err(Error::Invalid("base model header needs 6 dims".into()));
        }
        let d: Vec<usize> = file.dims.iter().map(|&v| v as usize).collect();
        let config = LmConfig {
            vocab: d[0],
            width: d[1],
            layers: d[2],
            heads: d[3],
            ffn: d[4],
            max_len: d[5],
        };
        // shapes come from a throwaway build; every weight is overwritten below
        let mut lm = BaseLm::build(config, &mut Rng::new(0))?;
        let names = lm.block_names();
        if names.len() != file.tensors.len() {
            return Err(Error::Shape(format!(
                "{} tensors in file, model has {}",
                file.tensors.len(),
                names.len()
            )));
        }
        for ((name, dst), (fname, m)) in names.iter().zip(lm.blocks_mut()).zip(&file.tensors) {
            if name != fname || dst.len() != m.data().len() {
                return Err(Error::Shape(format!("tensor `{fname}` does not fit `{name}`")));
            }
            dst.copy_from_slice(m.data());
        }
        lm.set_fingerprint_unchecked(file.fingerprint);
        if lm.compute_fingerprint() != file.fingerprint {
            return Err(Error::FingerprintMismatch);
        }
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }

    fn block_shapes(&self) -> Vec<(usize, usize)> {
        let c = &self.config;
        let (m, f) = (c.width, c.ffn);
        let mut s = vec![(c.vocab, m), (c.max_len, m)];
        for _ in 0..c.layers {
            s.extend([
                (1, m),
                (1, m),
                (3 * m, m),
                (1, 3 * m),
                (m, m),
                (1, m),
                (1, m),
                (1, m),
                (f, m),
                (1, f),
                (m, f),
                (1, m),
            ]);
        }
        s.extend([(1, m), (1, m), (c.vocab, m), (1, c.vocab)]);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("base.afl");
        let lm = BaseLm::build(LmConfig::default(), &mut Rng::new(7)).unwrap();
        lm.save(&p).unwrap();
        let back = BaseLm::load(&p).unwrap();
        assert_eq!(back, lm);
        assert_eq!(back.fingerprint(), lm.fingerprint());
    }

    #[test]
    fn corrupted_weight_is_detected() {
        let lm = BaseLm::build(LmConfig::default(), &mut Rng::new(7)).unwrap();
        let mut f = lm.to_tensor_file();
        f.tensors[0].1.data_mut()[0] += 1.0;
        assert!(matches!(
            BaseLm::from_tensor_file(&f),
            Err(Error::FingerprintMismatch)
        ));
    }
}
