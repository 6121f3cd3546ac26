use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything the optimizer can update: an ordered list of flat parameter blocks.
///
/// Gradients are carried in a value of the same type, so block shapes line up.
pub trait Params {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    fn flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.blocks().iter().map(|b| b.len()).sum();
        if total != values.len() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                total
            )));
        }
        let mut off = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `self += s · other`, block by block.
    fn accumulate(&mut self, s: f64, other: &Self) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            crate::numerics::matrix::axpy(s, src, dst);
        }
    }
}

impl Params for Vec<f64> {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

impl Params for crate::numerics::Matrix {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![self.data()]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.data_mut()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainGradient,
    AdaptiveMoment,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let gblocks = grads.blocks();
        let mut pblocks = params.blocks_mut();
        if gblocks.len() != pblocks.len()
            || gblocks.iter().zip(&pblocks).any(|(g, p)| g.len() != p.len())
        {
            return Err(Error::Shape("gradient blocks do not match parameters".into()));
        }
        if self.steps == 0 && self.kind == OptimizerKind::AdaptiveMoment {
            self.first = pblocks.iter().map(|b| vec![0.0; b.len()]).collect();
            self.second = self.first.clone();
        } else if self.kind == OptimizerKind::AdaptiveMoment
            && (self.first.len() != pblocks.len()
                || self.first.iter().zip(&pblocks).any(|(m, p)| m.len() != p.len()))
        {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::PlainGradient => {
                for (p, g) in pblocks.iter_mut().zip(&gblocks) {
                    for (pi, gi) in p.iter_mut().zip(g.iter()) {
                        *pi -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::AdaptiveMoment => {
                let t = self.steps as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for (b, (p, g)) in pblocks.iter_mut().zip(&gblocks).enumerate() {
                    let m = &mut self.first[b];
                    let v = &mut self.second[b];
                    for i in 0..p.len() {
                        let gi = g[i];
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
