use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Params, Rng};

/// Architecture of the frozen base model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            width: 32,
            layers: 2,
            heads: 2,
            ffn: 64,
            max_len: 32,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(format!("model config: {msg}")));
        if self.vocab < 2 {
            return bad("vocab must be at least 2");
        }
        if self.width == 0 || self.ffn == 0 || self.max_len == 0 {
            return bad("width, ffn and max_len must be positive");
        }
        if self.layers == 0 {
            return bad("at least one layer is required");
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad("heads must divide width");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// The two adapter injection points in every layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Fused query/key/value projection; input is the first normalized stream.
    AttnQkv,
    /// Feed-forward up projection; input is the second normalized stream.
    FfnUp,
}

pub const SITES_PER_LAYER: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn from_index(index: usize) -> Self {
        let kind = if index % SITES_PER_LAYER == 0 {
            SiteKind::AttnQkv
        } else {
            SiteKind::FfnUp
        };
        Self {
            layer: index / SITES_PER_LAYER,
            kind,
        }
    }

    pub fn index(self) -> usize {
        self.layer * SITES_PER_LAYER
            + match self.kind {
                SiteKind::AttnQkv => 0,
                SiteKind::FfnUp => 1,
            }
    }

    pub fn name(self) -> String {
        let k = match self.kind {
            SiteKind::AttnQkv => "attn_qkv",
            SiteKind::FfnUp => "ffn_up",
        };
        format!("layer{}.{k}", self.layer)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Linear {
    fn init(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self {
            w: Matrix::from_fn(out_dim, in_dim, |_, _| std * rng.normal()),
            b: vec![0.0; out_dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

/// Tiny pre-norm causal transformer with frozen weights and named adapter sites.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseLm {
    pub config: LmConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
    fingerprint: u64,
}

impl BaseLm {
    pub fn build(config: LmConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let m = config.width;
        let tok_emb = Matrix::from_fn(config.vocab, m, |_, _| 0.5 * rng.normal());
        let pos_emb = Matrix::from_fn(config.max_len, m, |_, _| 0.5 * rng.normal());
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1: LayerNorm::new(m),
                qkv: Linear::init(3 * m, m, rng),
                proj: Linear::init(m, m, rng),
                ln2: LayerNorm::new(m),
                up: Linear::init(config.ffn, m, rng),
                down: Linear::init(m, config.ffn, rng),
            })
            .collect();
        let head = Linear::init(config.vocab, m, rng);
        let mut lm = Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(m),
            head,
            fingerprint: 0,
        };
        lm.refresh_fingerprint();
        Ok(lm)
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Recomputes the fingerprint after the weights change (e.g. after pre-training).
    pub fn refresh_fingerprint(&mut self) {
        self.fingerprint = self.compute_fingerprint();
    }

    pub(crate) fn set_fingerprint_unchecked(&mut self, fp: u64) {
        self.fingerprint = fp;
    }

    pub fn compute_fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        let c = &self.config;
        for d in [c.vocab, c.width, c.layers, c.heads, c.ffn, c.max_len] {
            h.update((d as u64).to_le_bytes());
        }
        for block in self.blocks() {
            for v in block {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }

    pub fn num_sites(&self) -> usize {
        self.config.layers * SITES_PER_LAYER
    }

    /// `(out_dim, in_dim)` for every site in canonical order.
    pub fn site_dims(&self) -> Vec<(usize, usize)> {
        let m = self.config.width;
        (0..self.num_sites())
            .map(|s| match SiteId::from_index(s).kind {
                SiteKind::AttnQkv => (3 * m, m),
                SiteKind::FfnUp => (self.config.ffn, m),
            })
            .collect()
    }

    pub fn site_weight(&self, site: usize) -> &Matrix {
        let id = SiteId::from_index(site);
        match id.kind {
            SiteKind::AttnQkv => &self.blocks[id.layer].qkv.w,
            SiteKind::FfnUp => &self.blocks[id.layer].up.w,
        }
    }

    /// Names of the parameter blocks in [`Params::blocks`] order.
    pub fn block_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.blocks.len() {
            for n in [
                "ln1.gain", "ln1.bias", "qkv.w", "qkv.b", "proj.w", "proj.b", "ln2.gain",
                "ln2.bias", "up.w", "up.b", "down.w", "down.b",
            ] {
                names.push(format!("layer{l}.{n}"));
            }
        }
        names.extend(
            ["ln_f.gain", "ln_f.bias", "head.w", "head.b"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }
}

impl Params for BaseLm {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.tok_emb.data(), self.pos_emb.data()];
        for b in &self.blocks {
            out.extend([
                b.ln1.gain.as_slice(),
                b.ln1.bias.as_slice(),
                b.qkv.w.data(),
                b.qkv.b.as_slice(),
                b.proj.w.data(),
                b.proj.b.as_slice(),
                b.ln2.gain.as_slice(),
                b.ln2.bias.as_slice(),
                b.up.w.data(),
                b.up.b.as_slice(),
                b.down.w.data(),
                b.down.b.as_slice(),
            ]);
        }
        out.extend([
            self.ln_f.gain.as_slice(),
            self.ln_f.bias.as_slice(),
            self.head.w.data(),
            self.head.b.as_slice(),
        ]);
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.tok_emb.data_mut(), self.pos_emb.data_mut()];
        for b in &mut self.blocks {
            out.push(b.ln1.gain.as_mut_slice());
            out.push(b.ln1.bias.as_mut_slice());
            out.push(b.qkv.w.data_mut());
            out.push(b.qkv.b.as_mut_slice());
            out.push(b.proj.w.data_mut());
            out.push(b.proj.b.as_mut_slice());
            out.push(b.ln2.gain.as_mut_slice());
            out.push(b.ln2.bias.as_mut_slice());
            out.push(b.up.w.data_mut());
            out.push(b.up.b.as_mut_slice());
            out.push(b.down.w.data_mut());
            out.push(b.down.b.as_mut_slice());
        }
        out.push(self.ln_f.gain.as_mut_slice());
        out.push(self.ln_f.bias.as_mut_slice());
        out.push(self.head.w.data_mut());
        out.push(self.head.b.as_mut_slice());
        out
    }
}
