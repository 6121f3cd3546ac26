//! Forward and reverse-mode passes through the base model with an optional
//! adapter configuration at every site.
//!
//! All four adapter configurations share one code path so that losses are
//! computed under identical tokenization, masking and arithmetic.

use crate::error::{Error, Result};
use crate::expert::LoraAdapter;
use crate::fusion::DenseDelta;
use crate::lm::model::{BaseLm, LayerNorm, SiteId, SiteKind};
use crate::numerics::{axpy, dot, softmax_in_place, Matrix, Rng};
use crate::routing::router::renormalize;
use crate::routing::{topk_mask, Router, ScoreMode};

const LN_EPS: f64 = 1e-5;

/// What is attached to the adapter sites during a pass.
#[derive(Clone, Copy)]
pub enum AdapterRef<'a> {
    None,
    Lora(&'a LoraAdapter),
    Dense(&'a DenseDelta),
    /// Per-token parameter fusion: `A*(h) = Σ λ_i(h) A_i`, `B*(h) = Σ λ_i(h) B_i`.
    Routed {
        experts: &'a [LoraAdapter],
        router: &'a Router,
    },
}

impl<'a> AdapterRef<'a> {
    pub fn check(&self, base: &BaseLm) -> Result<()> {
        match self {
            AdapterRef::None => Ok(()),
            AdapterRef::Lora(a) => a.check_compatible(base),
            AdapterRef::Dense(d) => d.check_compatible(base),
            AdapterRef::Routed { experts, router } => {
                let first = experts
                    .first()
                    .ok_or_else(|| Error::Invalid("routing over zero experts".into()))?;
                for e in experts.iter() {
                    e.check_compatible(base)?;
                    if !e.same_layout(first) {
                        return Err(Error::Shape("experts differ in rank or scaling".into()));
                    }
                }
                if router.sites.len() != base.num_sites() {
                    return Err(Error::Shape(format!(
                        "router covers {} sites, base has {}",
                        router.sites.len(),
                        base.num_sites()
                    )));
                }
                for w in &router.sites {
                    if w.shape() != (experts.len(), base.config.width) {
                        return Err(Error::Shape(format!(
                            "router matrix {:?} for {} experts of width {}",
                            w.shape(),
                            experts.len(),
                            base.config.width
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Adapter-branch dropout, active only when supplied (training).
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut Rng,
}

/// Receives gradients during [`BaseLm::backward`]. Unset fields are skipped.
#[derive(Default)]
pub struct GradSink<'g> {
    pub base: Option<&'g mut BaseLm>,
    pub lora: Option<&'g mut LoraAdapter>,
    pub router: Option<&'g mut Router>,
    pub experts: Option<&'g mut [LoraAdapter]>,
}

#[derive(Clone, Debug)]
struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Clone, Debug)]
enum SiteTape {
    Plain,
    Lora {
        u: Vec<f64>,
        mask: Option<Vec<f64>>,
    },
    Routed {
        /// final coefficients after top-k, `T × N`
        lam: Vec<f64>,
        /// softmax output before top-k
        soft: Vec<f64>,
        raw: Vec<f64>,
        topk: Option<Vec<bool>>,
        /// per-expert `B_i h`, `T × N × r`
        u: Vec<f64>,
        /// fused `B* h`, `T × r`
        ustar: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct LayerTape {
    ln1: LnCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    up_pre: Vec<f64>,
    act: Vec<f64>,
    sites: [SiteTape; 2],
}

/// Everything recorded by a forward pass over one token sequence.
#[derive(Clone, Debug)]
pub struct Tape {
    pub tokens: Vec<u32>,
    layers: Vec<LayerTape>,
    lnf: LnCache,
    z: Vec<f64>,
    /// `T × V` pre-softmax scores.
    pub logits: Matrix,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Next-token distribution at position `t`.
    pub fn probs(&self, t: usize) -> Vec<f64> {
        let mut p = self.logits.row(t).to_vec();
        softmax_in_place(&mut p);
        p
    }

    /// Routing coefficients recorded at `site`, position `t` (routed passes only).
    pub fn routing_coeffs(&self, site: usize, t: usize) -> Option<&[f64]> {
        let id = SiteId::from_index(site);
        let k = match id.kind {
            SiteKind::AttnQkv => 0,
            SiteKind::FfnUp => 1,
        };
        match &self.layers.get(id.layer)?.sites[k] {
            SiteTape::Routed { lam, soft, .. } => {
                let n = soft.len() / self.tokens.len();
                Some(&lam[t * n..(t + 1) * n])
            }
            _ => None,
        }
    }
}

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let inner = K * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
}

fn ln_forward(ln: &LayerNorm, x: &[f64], dim: usize) -> (Vec<f64>, LnCache) {
    let rows = x.len() / dim;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for t in 0..rows {
        let xr = &x[t * dim..(t + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for j in 0..dim {
            let h = (xr[j] - mean) * r;
            xhat[t * dim + j] = h;
            y[t * dim + j] = ln.gain[j] * h + ln.bias[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates `dx` and optionally gain/bias gradients.
fn ln_backward(
    ln: &LayerNorm,
    cache: &LnCache,
    dy: &[f64],
    dim: usize,
    dx: &mut [f64],
    grads: Option<&mut LayerNorm>,
) {
    let rows = dy.len() / dim;
    let mut dxhat = vec![0.0; dim];
    let mut grads = grads;
    for t in 0..rows {
        let xh = &cache.xhat[t * dim..(t + 1) * dim];
        let dyr = &dy[t * dim..(t + 1) * dim];
        for j in 0..dim {
            dxhat[j] = dyr[j] * ln.gain[j];
        }
        if let Some(g) = grads.as_deref_mut() {
            for j in 0..dim {
                g.gain[j] += dyr[j] * xh[j];
                g.bias[j] += dyr[j];
            }
        }
        let mean_d = dxhat.iter().sum::<f64>() / dim as f64;
        let mean_dx = dot(&dxhat, xh) / dim as f64;
        let r = cache.rstd[t];
        for j in 0..dim {
            dx[t * dim + j] += r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
}

/// `out[t] = W·x[t] + b` for every row.
fn linear_rows(w: &Matrix, b: &[f64], x: &[f64], out: &mut [f64]) {
    let (n, m) = w.shape();
    let rows = x.len() / m;
    for t in 0..rows {
        let o = &mut out[t * n..(t + 1) * n];
        w.matvec(&x[t * m..(t + 1) * m], o);
        for (oi, bi) in o.iter_mut().zip(b) {
            *oi += bi;
        }
    }
}

/// Backprop through `linear_rows`: accumulates `dx` and optionally `dW`, `db`.
fn linear_rows_backward(
    w: &Matrix,
    x: &[f64],
    dout: &[f64],
    dx: &mut [f64],
    grads: Option<(&mut Matrix, &mut [f64])>,
) {
    let (n, m) = w.shape();
    let rows = x.len() / m;
    for t in 0..rows {
        w.matvec_t_acc(&dout[t * n..(t + 1) * n], &mut dx[t * m..(t + 1) * m]);
    }
    if let Some((dw, db)) = grads {
        for t in 0..rows {
            let d = &dout[t * n..(t + 1) * n];
            dw.add_outer(1.0, d, &x[t * m..(t + 1) * m]);
            axpy(1.0, d, db);
        }
    }
}

impl BaseLm {
    /// Runs the model over `tokens` and records a tape for [`BaseLm::backward`].
    pub fn forward(
        &self,
        tokens: &[u32],
        adapter: AdapterRef<'_>,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Tape> {
        adapter.check(self)?;
        let cfg = &self.config;
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if t_len > cfg.max_len {
            return Err(Error::Invalid(format!(
                "sequence of {t_len} exceeds max length {}",
                cfg.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::OutOfRange {
                index: bad as usize,
                size: cfg.vocab,
            });
        }
        let m = cfg.width;
        let f = cfg.ffn;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let mut x = vec![0.0; t_len * m];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut x[t * m..(t + 1) * m];
            row.copy_from_slice(self.tok_emb.row(tok as usize));
            axpy(1.0, self.pos_emb.row(t), row);
        }

        let mut layers = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (a, ln1) = ln_forward(&block.ln1, &x, m);
            let mut qkv = vec![0.0; t_len * 3 * m];
            linear_rows(&block.qkv.w, &block.qkv.b, &a, &mut qkv);
            let site0 = self.site_forward(adapter, 2 * l, &a, &mut qkv, 3 * m, dropout.as_mut())?;

            let mut att = vec![0.0; heads * t_len * t_len];
            let mut ctx = vec![0.0; t_len * m];
            for hd in 0..heads {
                let off = hd * dh;
                for t in 0..t_len {
                    let q = &qkv[t * 3 * m + off..t * 3 * m + off + dh];
                    let row = &mut att[(hd * t_len + t) * t_len..(hd * t_len + t + 1) * t_len];
                    for s in 0..=t {
                        let k = &qkv[s * 3 * m + m + off..s * 3 * m + m + off + dh];
                        row[s] = dot(q, k) * inv_sqrt;
                    }
                    softmax_in_place(&mut row[..=t]);
                    let c = &mut ctx[t * m + off..t * m + off + dh];
                    for s in 0..=t {
                        let v = &qkv[s * 3 * m + 2 * m + off..s * 3 * m + 2 * m + off + dh];
                        axpy(row[s], v, c);
                    }
                }
            }
            let mut o = vec![0.0; t_len * m];
            linear_rows(&block.proj.w, &block.proj.b, &ctx, &mut o);
            axpy(1.0, &o, &mut x);

            let (c, ln2) = ln_forward(&block.ln2, &x, m);
            let mut up_pre = vec![0.0; t_len * f];
            linear_rows(&block.up.w, &block.up.b, &c, &mut up_pre);
            let site1 = self.site_forward(adapter, 2 * l + 1, &c, &mut up_pre, f, dropout.as_mut())?;
            let act: Vec<f64> = up_pre.iter().map(|&v| gelu(v)).collect();
            let mut d = vec![0.0; t_len * m];
            linear_rows(&block.down.w, &block.down.b, &act, &mut d);
            axpy(1.0, &d, &mut x);

            layers.push(LayerTape {
                ln1,
                a,
                qkv,
                att,
                ctx,
                ln2,
                c,
                up_pre,
                act,
                sites: [site0, site1],
            });
        }

        let (z, lnf) = ln_forward(&self.ln_f, &x, m);
        let mut logits = vec![0.0; t_len * cfg.vocab];
        linear_rows(&self.head.w, &self.head.b, &z, &mut logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Tape {
            tokens: tokens.to_vec(),
            layers,
            lnf,
            z,
            logits: Matrix::from_vec(t_len, cfg.vocab, logits)?,
        })
    }

    fn site_forward(
        &self,
        adapter: AdapterRef<'_>,
        site: usize,
        input: &[f64],
        out: &mut [f64],
        n: usize,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<SiteTape> {
        let m = self.config.width;
        let t_len = input.len() / m;
        match adapter {
            AdapterRef::None => Ok(SiteTape::Plain),
            AdapterRef::Dense(d) => {
                let w = &d.sites[site];
                let mut tmp = vec![0.0; n];
                for t in 0..t_len {
                    w.matvec(&input[t * m..(t + 1) * m], &mut tmp);
                    axpy(1.0, &tmp, &mut out[t * n..(t + 1) * n]);
                }
                Ok(SiteTape::Plain)
            }
            AdapterRef::Lora(ad) => {
                let sf = &ad.sites[site];
                let r = ad.rank;
                let s = ad.scaling();
                let mask = dropout.filter(|d| d.p > 0.0).map(|d| {
                    let keep = 1.0 / (1.0 - d.p);
                    (0..t_len * m)
                        .map(|_| if d.rng.uniform() < d.p { 0.0 } else { keep })
                        .collect::<Vec<f64>>()
                });
                let mut u = vec![0.0; t_len * r];
                let mut hbuf = vec![0.0; m];
                let mut tmp = vec![0.0; n];
                for t in 0..t_len {
                    let h = &input[t * m..(t + 1) * m];
                    let h = match &mask {
                        Some(mk) => {
                            for j in 0..m {
                                hbuf[j] = h[j] * mk[t * m + j];
                            }
                            &hbuf[..]
                        }
                        None => h,
                    };
                    let ut = &mut u[t * r..(t + 1) * r];
                    sf.b.matvec(h, ut);
                    sf.a.matvec(ut, &mut tmp);
                    axpy(s, &tmp, &mut out[t * n..(t + 1) * n]);
                }
                Ok(SiteTape::Lora { u, mask })
            }
            AdapterRef::Routed { experts, router } => {
                let ne = experts.len();
                let r = experts[0].rank;
                let s = experts[0].scaling();
                let w = &router.sites[site];
                let mut lam = vec![0.0; t_len * ne];
                let mut soft = vec![0.0; t_len * ne];
                let mut raw = vec![0.0; t_len * ne];
                let mut topk = router.top_k.filter(|&k| k < ne).map(|_| vec![false; t_len * ne]);
                let mut u = vec![0.0; t_len * ne * r];
                let mut ustar = vec![0.0; t_len * r];
                let mut tmp = vec![0.0; n];
                let mut fused = vec![0.0; n];
                for t in 0..t_len {
                    let h = &input[t * m..(t + 1) * m];
                    let rw = &mut raw[t * ne..(t + 1) * ne];
                    let sc = &mut soft[t * ne..(t + 1) * ne];
                    for i in 0..ne {
                        rw[i] = dot(w.row(i), h);
                        sc[i] = match router.score {
                            ScoreMode::Absolute => rw[i].abs(),
                            ScoreMode::Plain => rw[i],
                        };
                    }
                    softmax_in_place(sc);
                    let lt = &mut lam[t * ne..(t + 1) * ne];
                    match (&mut topk, router.top_k) {
                        (Some(masks), Some(k)) => {
                            let mk = topk_mask(sc, k);
                            lt.copy_from_slice(&renormalize(sc, &mk)?);
                            masks[t * ne..(t + 1) * ne].copy_from_slice(&mk);
                        }
                        _ => lt.copy_from_slice(sc),
                    }
                    let us = &mut ustar[t * r..(t + 1) * r];
                    for (i, e) in experts.iter().enumerate() {
                        let ui = &mut u[(t * ne + i) * r..(t * ne + i + 1) * r];
                        e.sites[site].b.matvec(h, ui);
                        if lt[i] != 0.0 {
                            axpy(lt[i], ui, us);
                        }
                    }
                    fused.iter_mut().for_each(|v| *v = 0.0);
                    for (i, e) in experts.iter().enumerate() {
                        if lt[i] != 0.0 {
                            e.sites[site].a.matvec(us, &mut tmp);
                            axpy(lt[i], &tmp, &mut fused);
                        }
                    }
                    axpy(s, &fused, &mut out[t * n..(t + 1) * n]);
                }
                Ok(SiteTape::Routed {
                    lam,
                    soft,
                    raw,
                    topk,
                    u,
                    ustar,
                })
            }
        }
    }

    /// Reverse pass from `dlogits` (`T × V`, gradient of the loss w.r.t. logits).
    ///
    /// The adapter must be the one used for the forward pass.
    pub fn backward(
        &self,
        tape: &Tape,
        adapter: AdapterRef<'_>,
        dlogits: &Matrix,
        sink: &mut GradSink<'_>,
    ) -> Result<()> {
        let cfg = &self.config;
        let t_len = tape.len();
        if dlogits.shape() != (t_len, cfg.vocab) {
            return Err(Error::Shape(format!(
                "dlogits {:?} for tape of {t_len} positions",
                dlogits.shape()
            )));
        }
        let m = cfg.width;
        let f = cfg.ffn;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let mut dz = vec![0.0; t_len * m];
        {
            let grads = sink
                .base
                .as_deref_mut()
                .map(|g| (&mut g.head.w, g.head.b.as_mut_slice()));
            linear_rows_backward(&self.head.w, &tape.z, dlogits.data(), &mut dz, grads);
        }
        let mut dx = vec![0.0; t_len * m];
        ln_backward(
            &self.ln_f,
            &tape.lnf,
            &dz,
            m,
            &mut dx,
            sink.base.as_deref_mut().map(|g| &mut g.ln_f),
        );

        for (l, block) in self.blocks.iter().enumerate().rev() {
            let lt = &tape.layers[l];

            // feed-forward branch
            let mut dact = vec![0.0; t_len * f];
            {
                let grads = sink
                    .base
                    .as_deref_mut()
                    .map(|g| { let lin = &mut g.blocks[l].down; (&mut lin.w, lin.b.as_mut_slice()) });
                linear_rows_backward(&block.down.w, &lt.act, &dx, &mut dact, grads);
            }
            let dup: Vec<f64> = dact
                .iter()
                .zip(&lt.up_pre)
                .map(|(d, &u)| d * gelu_grad(u))
                .collect();
            let mut dc = vec![0.0; t_len * m];
            {
                let grads = sink
                    .base
                    .as_deref_mut()
                    .map(|g| { let lin = &mut g.blocks[l].up; (&mut lin.w, lin.b.as_mut_slice()) });
                linear_rows_backward(&block.up.w, &lt.c, &dup, &mut dc, grads);
            }
            self.site_backward(adapter, 2 * l + 1, &lt.sites[1], &lt.c, &dup, f, &mut dc, sink);
            ln_backward(
                &block.ln2,
                &lt.ln2,
                &dc,
                m,
                &mut dx,
                sink.base.as_deref_mut().map(|g| &mut g.blocks[l].ln2),
            );

            // attention branch
            let mut dctx = vec![0.0; t_len * m];
            {
                let grads = sink
                    .base
                    .as_deref_mut()
                    .map(|g| { let lin = &mut g.blocks[l].proj; (&mut lin.w, lin.b.as_mut_slice()) });
                linear_rows_backward(&block.proj.w, &lt.ctx, &dx, &mut dctx, grads);
            }
            let mut dqkv = vec![0.0; t_len * 3 * m];
            let mut dp = vec![0.0; t_len];
            for hd in 0..heads {
                let off = hd * dh;
                for t in 0..t_len {
                    let p = &lt.att[(hd * t_len + t) * t_len..(hd * t_len + t + 1) * t_len];
                    let dc_t = &dctx[t * m + off..t * m + off + dh];
                    for s in 0..=t {
                        let v = &lt.qkv[s * 3 * m + 2 * m + off..s * 3 * m + 2 * m + off + dh];
                        dp[s] = dot(dc_t, v);
                        axpy(p[s], dc_t, &mut dqkv[s * 3 * m + 2 * m + off..s * 3 * m + 2 * m + off + dh]);
                    }
                    let inner: f64 = (0..=t).map(|s| p[s] * dp[s]).sum();
                    for s in 0..=t {
                        let ds = p[s] * (dp[s] - inner) * inv_sqrt;
                        if ds == 0.0 {
                            continue;
                        }
                        let (qo, ko) = (t * 3 * m + off, s * 3 * m + m + off);
                        for j in 0..dh {
                            dqkv[qo + j] += ds * lt.qkv[ko + j];
                            dqkv[ko + j] += ds * lt.qkv[qo + j];
                        }
                    }
                }
            }
            let mut da = vec![0.0; t_len * m];
            {
                let grads = sink
                    .base
                    .as_deref_mut()
                    .map(|g| { let lin = &mut g.blocks[l].qkv; (&mut lin.w, lin.b.as_mut_slice()) });
                linear_rows_backward(&block.qkv.w, &lt.a, &dqkv, &mut da, grads);
            }
            self.site_backward(adapter, 2 * l, &lt.sites[0], &lt.a, &dqkv, 3 * m, &mut da, sink);
            ln_backward(
                &block.ln1,
                &lt.ln1,
                &da,
                m,
                &mut dx,
                sink.base.as_deref_mut().map(|g| &mut g.blocks[l].ln1),
            );
        }

        if let Some(g) = sink.base.as_deref_mut() {
            for (t, &tok) in tape.tokens.iter().enumerate() {
                axpy(1.0, &dx[t * m..(t + 1) * m], g.tok_emb.row_mut(tok as usize));
                axpy(1.0, &dx[t * m..(t + 1) * m], g.pos_emb.row_mut(t));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn site_backward(
        &self,
        adapter: AdapterRef<'_>,
        site: usize,
        tape: &SiteTape,
        input: &[f64],
        dout: &[f64],
        n: usize,
        dinput: &mut [f64],
        sink: &mut GradSink<'_>,
    ) {
        let m = self.config.width;
        let t_len = input.len() / m;
        match (adapter, tape) {
            (AdapterRef::Dense(d), _) => {
                let w = &d.sites[site];
                for t in 0..t_len {
                    w.matvec_t_acc(&dout[t * n..(t + 1) * n], &mut dinput[t * m..(t + 1) * m]);
                }
            }
            (AdapterRef::Lora(ad), SiteTape::Lora { u, mask }) => {
                let sf = &ad.sites[site];
                let r = ad.rank;
                let s = ad.scaling();
                let mut g = vec![0.0; n];
                let mut du = vec![0.0; r];
                let mut dh = vec![0.0; m];
                let mut hbuf = vec![0.0; m];
                for t in 0..t_len {
                    for (gi, di) in g.iter_mut().zip(&dout[t * n..(t + 1) * n]) {
                        *gi = s * di;
                    }
                    du.iter_mut().for_each(|v| *v = 0.0);
                    sf.a.matvec_t_acc(&g, &mut du);
                    dh.iter_mut().for_each(|v| *v = 0.0);
                    sf.b.matvec_t_acc(&du, &mut dh);
                    let h = &input[t * m..(t + 1) * m];
                    let dst = &mut dinput[t * m..(t + 1) * m];
                    match mask {
                        Some(mk) => {
                            for j in 0..m {
                                dst[j] += dh[j] * mk[t * m + j];
                                hbuf[j] = h[j] * mk[t * m + j];
                            }
                        }
                        None => {
                            axpy(1.0, &dh, dst);
                            hbuf.copy_from_slice(h);
                        }
                    }
                    if let Some(gr) = sink.lora.as_deref_mut() {
                        let gs = &mut gr.sites[site];
                        gs.a.add_outer(1.0, &g, &u[t * r..(t + 1) * r]);
                        gs.b.add_outer(1.0, &du, &hbuf);
                    }
                }
            }
            (AdapterRef::Routed { experts, router }, SiteTape::Routed { lam, soft, raw, topk, u, ustar }) => {
                let ne = experts.len();
                let r = experts[0].rank;
                let s = experts[0].scaling();
                let w = &router.sites[site];
                let mut g = vec![0.0; n];
                let mut wi = vec![0.0; ne * r];
                let mut dus = vec![0.0; r];
                let mut dlam = vec![0.0; ne];
                for t in 0..t_len {
                    let h = &input[t * m..(t + 1) * m];
                    let lt = &lam[t * ne..(t + 1) * ne];
                    let us = &ustar[t * r..(t + 1) * r];
                    for (gi, di) in g.iter_mut().zip(&dout[t * n..(t + 1) * n]) {
                        *gi = s * di;
                    }
                    // w_i = A_iᵀ g ; du* = Σ λ_i w_i
                    dus.iter_mut().for_each(|v| *v = 0.0);
                    for (i, e) in experts.iter().enumerate() {
                        let wr = &mut wi[i * r..(i + 1) * r];
                        wr.iter_mut().for_each(|v| *v = 0.0);
                        e.sites[site].a.matvec_t_acc(&g, wr);
                        if lt[i] != 0.0 {
                            axpy(lt[i], wr, &mut dus);
                        }
                    }
                    // dλ_i = w_i·u* + du*·u_i
                    for i in 0..ne {
                        let ui = &u[(t * ne + i) * r..(t * ne + i + 1) * r];
                        dlam[i] = dot(&wi[i * r..(i + 1) * r], us) + dot(&dus, ui);
                    }
                    let dst = &mut dinput[t * m..(t + 1) * m];
                    for (i, e) in experts.iter().enumerate() {
                        if lt[i] != 0.0 {
                            let mut tmp = vec![0.0; m];
                            e.sites[site].b.matvec_t_acc(&dus, &mut tmp);
                            axpy(lt[i], &tmp, dst);
                        }
                    }
                    if let Some(eg) = sink.experts.as_deref_mut() {
                        for i in 0..ne {
                            if lt[i] != 0.0 {
                                eg[i].sites[site].a.add_outer(lt[i], &g, us);
                                eg[i].sites[site].b.add_outer(lt[i], &dus, h);
                            }
                        }
                    }
                    // back through top-k renormalization (mask held fixed)
                    let sc = &soft[t * ne..(t + 1) * ne];
                    let dsoft: Vec<f64> = match topk {
                        Some(masks) => {
                            let mk = &masks[t * ne..(t + 1) * ne];
                            let z: f64 = sc.iter().zip(mk).filter(|(_, b)| **b).map(|(v, _)| v).sum();
                            let inner: f64 = (0..ne).filter(|&i| mk[i]).map(|i| lt[i] * dlam[i]).sum();
                            (0..ne)
                                .map(|i| if mk[i] { (dlam[i] - inner) / z } else { 0.0 })
                                .collect()
                        }
                        None => dlam.clone(),
                    };
                    let inner: f64 = sc.iter().zip(&dsoft).map(|(a, b)| a * b).sum();
                    for i in 0..ne {
                        let dscore = sc[i] * (dsoft[i] - inner);
                        let draw = match router.score {
                            ScoreMode::Absolute => dscore * raw[t * ne + i].signum(),
                            ScoreMode::Plain => dscore,
                        };
                        if draw == 0.0 {
                            continue;
                        }
                        axpy(draw, w.row(i), dst);
                        if let Some(rg) = sink.router.as_deref_mut() {
                            axpy(draw, h, rg.sites[site].row_mut(i));
                        }
                    }
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::numerics::{finite_diff_grad, relative_error, Params};

    fn small() -> (BaseLm, Rng) {
        let cfg = LmConfig {
            vocab: 7,
            width: 8,
            layers: 2,
            heads: 2,
            ffn: 12,
            max_len: 8,
        };
        let mut rng = Rng::new(5);
        (BaseLm::build(cfg, &mut rng).unwrap(), rng)
    }

    fn loss(base: &BaseLm, adapter: AdapterRef<'_>, tokens: &[u32], weights: &Matrix) -> f64 {
        let tape = base.forward(tokens, adapter, None).unwrap();
        tape.logits.inner(weights)
    }

    #[test]
    fn rejects_bad_tokens() {
        let (base, _) = small();
        assert!(base.forward(&[], AdapterRef::None, None).is_err());
        assert!(base.forward(&[9], AdapterRef::None, None).is_err());
        assert!(base.forward(&[0; 9], AdapterRef::None, None).is_err());
    }

    #[test]
    fn base_gradient_matches_finite_differences() {
        let (base, mut rng) = small();
        let tokens = [1u32, 4, 2, 6, 0];
        let w = Matrix::from_fn(5, 7, |_, _| rng.normal());
        let tape = base.forward(&tokens, AdapterRef::None, None).unwrap();
        let mut g = base.zeroed();
        base.backward(&tape, AdapterRef::None, &w, &mut GradSink { base: Some(&mut g), ..Default::default() })
            .unwrap();
        let flat = base.flat();
        let fd = finite_diff_grad(
            |p| {
                let mut b = base.clone();
                b.set_flat(p).unwrap();
                loss(&b, AdapterRef::None, &tokens, &w)
            },
            &flat,
        )
        .unwrap();
        assert!(relative_error(&g.flat(), &fd) < 1e-6);
    }

    #[test]
    fn lora_gradient_matches_finite_differences() {
        let (base, mut rng) = small();
        let mut ad = LoraAdapter::init_for_training(&base, 2, 4.0, &mut rng).unwrap();
        for v in ad.blocks_mut().into_iter().flatten() {
            *v = 0.3 * rng.normal();
        }
        let tokens = [3u32, 1, 5, 2];
        let w = Matrix::from_fn(4, 7, |_, _| rng.normal());
        let tape = base.forward(&tokens, AdapterRef::Lora(&ad), None).unwrap();
        let mut g = ad.zeroed();
        base.backward(&tape, AdapterRef::Lora(&ad), &w, &mut GradSink { lora: Some(&mut g), ..Default::default() })
            .unwrap();
        let fd = finite_diff_grad(
            |p| {
                let mut a = ad.clone();
                a.set_flat(p).unwrap();
                loss(&base, AdapterRef::Lora(&a), &tokens, &w)
            },
            &ad.flat(),
        )
        .unwrap();
        assert!(relative_error(&g.flat(), &fd) < 1e-6);
    }

    #[test]
    fn routed_gradients_match_finite_differences() {
        let (base, mut rng) = small();
        let experts: Vec<LoraAdapter> = (0..3)
            .map(|_| {
                let mut a = LoraAdapter::zeros(&base, 2, 4.0).unwrap();
                for v in a.blocks_mut().into_iter().flatten() {
                    *v = 0.3 * rng.normal();
                }
                a
            })
            .collect();
        for score in [ScoreMode::Plain, ScoreMode::Absolute] {
            let mut router = Router::zeros(base.num_sites(), 3, 8, score);
            for v in router.blocks_mut().into_iter().flatten() {
                *v = 0.5 * rng.normal();
            }
            let tokens = [2u32, 6, 1, 3, 3];
            let w = Matrix::from_fn(5, 7, |_, _| rng.normal());
            let ad = AdapterRef::Routed { experts: &experts, router: &router };
            let tape = base.forward(&tokens, ad, None).unwrap();
            let mut rg = router.zeroed();
            let mut eg: Vec<LoraAdapter> = experts.iter().map(|e| e.zeroed()).collect();
            base.backward(
                &tape,
                ad,
                &w,
                &mut GradSink { router: Some(&mut rg), experts: Some(&mut eg), ..Default::default() },
            )
            .unwrap();
            let fd = finite_diff_grad(
                |p| {
                    let mut r = router.clone();
                    r.set_flat(p).unwrap();
                    loss(&base, AdapterRef::Routed { experts: &experts, router: &r }, &tokens, &w)
                },
                &router.flat(),
            )
            .unwrap();
            assert!(relative_error(&rg.flat(), &fd) < 1e-6, "{score:?}");
            let e1 = experts[1].flat();
            let fd = finite_diff_grad(
                |p| {
                    let mut ex = experts.clone();
                    ex[1].set_flat(p).unwrap();
                    loss(&base, AdapterRef::Routed { experts: &ex, router: &router }, &tokens, &w)
                },
                &e1,
            )
            .unwrap();
            assert!(relative_error(&eg[1].flat(), &fd) < 1e-6);
        }
    }

    #[test]
    fn causal_masking() {
        let (base, _) = small();
        let a = base.forward(&[1, 2, 3, 4], AdapterRef::None, None).unwrap();
        let b = base.forward(&[1, 2, 5, 4], AdapterRef::None, None).unwrap();
        for t in 0..2 {
            assert_eq!(a.logits.row(t), b.logits.row(t));
        }
        assert_ne!(a.logits.row(2), b.logits.row(2));
    }
}
