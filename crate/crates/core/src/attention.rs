//! Global ("all-to-all") 2D multi-head self-attention with learned relative
//! position encodings.
//!
//! For a feature map flattened to `n = H·W` positions, each head computes
//!
//! ```text
//! q = x·W_Q   k = x·W_K   v = x·W_V
//! b_ij = q_i · (R_h[Δh] + R_w[Δw])            Δh = h_j - h_i, Δw = w_j - w_i
//! e_ij = (q_i·k_j + b_ij) / sqrt(d_head)
//! α_i  = softmax_j(e_ij)
//! z_i  = Σ_j α_ij (v_j [+ r^V_ij])
//! ```
//!
//! and the head outputs are concatenated back to `d_model` channels. The
//! offset tables `R_h` (`2H-1` rows) and `R_w` (`2W-1` rows) are shared by all
//! heads of a layer.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::faults::{self, Fault};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhsaConfig {
    pub heads: usize,
    pub d_model: usize,
    pub use_value_relative: bool,
}

impl MhsaConfig {
    pub fn new(heads: usize, d_model: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 || d_model % heads != 0 {
            return Err(Error::invalid(
                "mhsa",
                format!("d_model {d_model} must be a positive multiple of heads {heads}"),
            ));
        }
        Ok(MhsaConfig { heads, d_model, use_value_relative: false })
    }

    pub fn with_value_relative(mut self, on: bool) -> Self {
        self.use_value_relative = on;
        self
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Signed-offset lookup tables for an `H×W` grid.
#[derive(Clone, Debug)]
pub struct RelativeIndex {
    pub height: usize,
    pub width: usize,
    /// `[n·n]`, entry `(i,j)` is `h_j - h_i + H - 1`.
    pub rows: Arc<[usize]>,
    /// `[n·n]`, entry `(i,j)` is `w_j - w_i + W - 1`.
    pub cols: Arc<[usize]>,
}

impl RelativeIndex {
    pub fn new(height: usize, width: usize) -> Self {
        let n = height * width;
        let mut rows = Vec::with_capacity(n * n);
        let mut cols = Vec::with_capacity(n * n);
        for i in 0..n {
            let (hi, wi) = (i / width, i % width);
            for j in 0..n {
                let (hj, wj) = (j / width, j % width);
                let dh = hj as isize - hi as isize + height as isize - 1;
                let dw = wj as isize - wi as isize + width as isize - 1;
                assert!(dh >= 0 && (dh as usize) < 2 * height - 1, "row offset in table range");
                assert!(dw >= 0 && (dw as usize) < 2 * width - 1, "column offset in table range");
                rows.push(dh as usize);
                cols.push(dw as usize);
            }
        }
        RelativeIndex { height, width, rows: rows.into(), cols: cols.into() }
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// One MHSA layer: per-head projections plus shared relative tables.
#[derive(Clone, Debug)]
pub struct MhsaLayer {
    pub config: MhsaConfig,
    pub index: RelativeIndex,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub rh: ParamId,
    pub rw: ParamId,
    /// Value-side tables `(height, width)`, present when `use_value_relative`.
    pub value_rel: Option<(ParamId, ParamId)>,
}

/// Per-head intermediate logits and weights, each `[N, n, n]`.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub content: Tensor,
    pub positional: Tensor,
    pub weights: Tensor,
}

impl MhsaLayer {
    /// Registers parameters as `{prefix}.{wq,wk,wv}[head]`, `{prefix}.rh`, `{prefix}.rw`.
    pub fn new<R: Rng>(
        config: MhsaConfig,
        height: usize,
        width: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mhsa", "feature map must be at least 1x1"));
        }
        let (d, dh) = (config.d_model, config.d_head());
        let proj_std = (d as f64).powf(-0.5);
        let rel_std = (dh as f64).powf(-0.5);
        let mut proj = |kind: &str, rng: &mut R| -> Result<Vec<ParamId>> {
            (0..config.heads)
                .map(|h| store.add(format!("{prefix}.{kind}[{h}]"), Tensor::randn(&[d, dh], proj_std, rng)))
                .collect()
        };
        let wq = proj("wq", rng)?;
        let wk = proj("wk", rng)?;
        let wv = proj("wv", rng)?;
        let rh = store.add(format!("{prefix}.rh"), Tensor::randn(&[2 * height - 1, dh], rel_std, rng))?;
        let rw = store.add(format!("{prefix}.rw"), Tensor::randn(&[2 * width - 1, dh], rel_std, rng))?;
        let value_rel = if config.use_value_relative {
            let vh = store.add(format!("{prefix}.rvh"), Tensor::randn(&[2 * height - 1, dh], rel_std, rng))?;
            let vw = store.add(format!("{prefix}.rvw"), Tensor::randn(&[2 * width - 1, dh], rel_std, rng))?;
            Some((vh, vw))
        } else {
            None
        };
        Ok(MhsaLayer { config, index: RelativeIndex::new(height, width), wq, wk, wv, rh, rw, value_rel })
    }

    /// `[N, d_model, H, W] -> [N, d_model, H, W]`.
    pub fn forward(&self, g: &mut Graph, params: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_impl(g, params, x, false)?.0)
    }

    /// Forward pass that also returns per-head logits and weights.
    pub fn forward_traced(&self, g: &mut Graph, params: &Bound, x: Var) -> Result<(Var, Vec<AttentionTrace>)> {
        self.forward_impl(g, params, x, true)
    }

    fn forward_impl(&self, g: &mut Graph, params: &Bound, x: Var, trace: bool) -> Result<(Var, Vec<AttentionTrace>)> {
        let s = g.shape(x).to_vec();
        let (h, w) = (self.index.height, self.index.width);
        if s.len() != 4 || s[1] != self.config.d_model || s[2] != h || s[3] != w {
            return Err(Error::shape(
                "mhsa2d",
                format!("input {s:?} for layer d_model={} on {h}x{w}", self.config.d_model),
            ));
        }
        let (batch, d, n) = (s[0], s[1], h * w);
        let dh = self.config.d_head();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let xt = g.permute(x, &[0, 2, 3, 1])?;
        let xf = g.reshape(xt, &[batch, n, d])?;
        let rh = params.var(self.rh);
        let rw = params.var(self.rw);
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut traces = Vec::new();
        for head in 0..self.config.heads {
            let q = g.matmul(xf, params.var(self.wq[head]))?;
            let k = g.matmul(xf, params.var(self.wk[head]))?;
            let kt = g.transpose_last2(k)?;
            let qk = g.matmul(q, kt)?;
            let b = relative_logits(g, q, rh, rw, &self.index)?;
            let logits = if faults::active(Fault::UnscaledRelativeLogits) {
                let content = g.scale(qk, inv_sqrt);
                g.add(content, b)?
            } else {
                let raw = g.add(qk, b)?;
                g.scale(raw, inv_sqrt)
            };
            let alpha = attention_weights(g, logits)?;
            let value_rel = self.value_rel.map(|(vh, vw)| (params.var(vh), params.var(vw), &self.index));
            let z = attention_output(g, alpha, xf, params.var(self.wv[head]), value_rel)?;
            if trace {
                traces.push(AttentionTrace {
                    content: g.value(qk).map(|v| v * inv_sqrt),
                    positional: g.value(b).clone(),
                    weights: g.value(alpha).clone(),
                });
            }
            heads.push(z);
        }
        let zf = g.concat(&heads, 2)?;
        let zs = g.reshape(zf, &[batch, h, w, d])?;
        let out = g.permute(zs, &[0, 3, 1, 2])?;
        Ok((out, traces))
    }
}

/// Content logits `(x·W_Q)(x·W_K)ᵀ / sqrt(d_head)` for `x` of shape `[n,d]` or `[B,n,d]`.
pub fn content_logits(g: &mut Graph, x: Var, wq: Var, wk: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let (ws, ks) = (g.shape(wq).to_vec(), g.shape(wk).to_vec());
    if ws != ks || ws.len() != 2 || xs.last() != Some(&ws[0]) {
        return Err(Error::shape("content_logits", format!("x {xs:?}, W_Q {ws:?}, W_K {ks:?}")));
    }
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let kt = g.transpose_last2(k)?;
    let qk = g.matmul(q, kt)?;
    Ok(g.scale(qk, 1.0 / (ws[1] as f64).sqrt()))
}

/// Positional logits `b_ij = q_i · (R_h[Δh] + R_w[Δw])`, unscaled, for `q:[B,n,d_head]`.
pub fn relative_logits(g: &mut Graph, q: Var, rh: Var, rw: Var, index: &RelativeIndex) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let n = index.positions();
    let (hs, ws) = (g.shape(rh).to_vec(), g.shape(rw).to_vec());
    if qs.len() != 3 || qs[1] != n {
        return Err(Error::shape("relative_logits", format!("queries {qs:?} for {n} positions")));
    }
    if hs != [2 * index.height - 1, qs[2]] || ws != [2 * index.width - 1, qs[2]] {
        return Err(Error::shape(
            "relative_logits",
            format!(
                "tables R_h {hs:?}, R_w {ws:?} do not fit a {}x{} grid with d_head {}",
                index.height, index.width, qs[2]
            ),
        ));
    }
    let rht = g.transpose_last2(rh)?;
    let rwt = g.transpose_last2(rw)?;
    let qh = g.matmul(q, rht)?;
    let qw = g.matmul(q, rwt)?;
    let bh = g.gather_cols(qh, index.rows.clone(), n)?;
    let bw = g.gather_cols(qw, index.cols.clone(), n)?;
    g.add(bh, bw)
}

/// Row-wise softmax over the last axis.
pub fn attention_weights(g: &mut Graph, logits: Var) -> Result<Var> {
    let rank = g.shape(logits).len();
    if rank == 0 {
        return Err(Error::shape("attention_weights", "empty logits"));
    }
    g.softmax(logits, rank - 1)
}

/// `z_i = Σ_j α_ij (x_j·W_V [+ r^V_ij])` for `α:[B,n,n]`, `x:[B,n,d]`.
pub fn attention_output(
    g: &mut Graph,
    alpha: Var,
    x: Var,
    wv: Var,
    value_rel: Option<(Var, Var, &RelativeIndex)>,
) -> Result<Var> {
    let (a, xs) = (g.shape(alpha).to_vec(), g.shape(x).to_vec());
    if a.len() != xs.len() || a[a.len() - 1] != xs[xs.len() - 2] || a[a.len() - 2] != xs[xs.len() - 2] {
        return Err(Error::shape("attention_output", format!("weights {a:?} for values {xs:?}")));
    }
    let v = g.matmul(x, wv)?;
    let z = g.matmul(alpha, v)?;
    let Some((vh, vw, index)) = value_rel else {
        return Ok(z);
    };
    let alpha3 = if a.len() == 2 { g.reshape(alpha, &[1, a[0], a[1]])? } else { alpha };
    let ah = g.scatter_cols(alpha3, index.rows.clone(), 2 * index.height - 1)?;
    let aw = g.scatter_cols(alpha3, index.cols.clone(), 2 * index.width - 1)?;
    let zh = g.matmul(ah, vh)?;
    let zw = g.matmul(aw, vw)?;
    let rel = g.add(zh, zw)?;
    let rel = if a.len() == 2 { g.reshape(rel, g.shape(z).to_vec().as_slice())? } else { rel };
    g.add(z, rel)
}
