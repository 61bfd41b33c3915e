//! Cross-attention fusion blocks and the transformer encoder.
//!
//! One attention primitive serves both uses: the fuzzy-guided block calls
//! it with [projected class token || fuzzy patch tokens] as queries and the
//! branch sequence as keys/values; the encoder layer calls it with the same
//! sequence on both sides. Per-head query/key/value projections carry no
//! bias, so attention logits are linear in the query sequence, a property
//! the tests lean on. The output projection is also bias-free, which makes
//! zero-initialized value/output projections an exact identity through the
//! residual.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::num;
use crate::params::{xavier_normal, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlpMode {
    /// MLP(LN(z') + z'): no residual around the MLP.
    Paper,
    /// z' + MLP(LN(z')): conventional pre-norm form.
    Prenorm,
}

pub struct LnIds {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LnIds {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Self::with_eps(store, prefix, dim, crate::graph::LN_EPS)
    }

    pub fn with_eps(store: &mut ParamStore, prefix: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(LnIds {
            gain: store.add(&alloc::format!("{prefix}.g"), Tensor::full(&[dim], 1.0))?,
            bias: store.add(&alloc::format!("{prefix}.b"), Tensor::zeros(&[dim]))?,
            eps,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = store.on_graph(g, self.gain);
        let bias = store.on_graph(g, self.bias);
        g.layer_norm_eps(x, gain, bias, self.eps)
    }
}

pub struct AttnIds {
    pub q: Vec<ParamId>,
    pub k: Vec<ParamId>,
    pub v: Vec<ParamId>,
    pub out: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl AttnIds {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(alloc::format!(
                "dim {dim} not divisible by {heads} heads"
            )));
        }
        let dk = dim / heads;
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for h in 0..heads {
            q.push(store.add(
                &alloc::format!("{prefix}.q{h}"),
                xavier_normal(rng, &[dim, dk], dim, dk),
            )?);
            k.push(store.add(
                &alloc::format!("{prefix}.k{h}"),
                xavier_normal(rng, &[dim, dk], dim, dk),
            )?);
            v.push(store.add(
                &alloc::format!("{prefix}.v{h}"),
                xavier_normal(rng, &[dim, dk], dim, dk),
            )?);
        }
        let out = store.add(
            &alloc::format!("{prefix}.out"),
            xavier_normal(rng, &[dim, dim], dim, dim),
        )?;
        Ok(AttnIds {
            q,
            k,
            v,
            out,
            heads,
            dim,
        })
    }
}

pub struct AttnOut {
    pub out: Var,
    /// Pre-softmax scaled scores per head, [Nq, Nk].
    pub scores: Vec<Var>,
    /// Row-stochastic attention maps per head.
    pub attn: Vec<Var>,
}

/// Multi-head scaled dot-product attention. Queries from `q_seq`, keys and
/// values from `kv_seq`; heads concatenated then output-projected. No
/// normalization or residual here; callers own those.
pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    ids: &AttnIds,
    q_seq: Var,
    kv_seq: Var,
) -> Result<AttnOut> {
    let dq = g.value(q_seq).cols();
    let dkv = g.value(kv_seq).cols();
    if dq != ids.dim || dkv != ids.dim {
        return Err(Error::Dimension(alloc::format!(
            "attention: sequence dims {dq}/{dkv} vs configured {}",
            ids.dim
        )));
    }
    let dk = ids.dim / ids.heads;
    let scale = 1.0 / num::sqrt(dk as f64);
    let mut ctxs = Vec::with_capacity(ids.heads);
    let mut scores_out = Vec::with_capacity(ids.heads);
    let mut attn_out = Vec::with_capacity(ids.heads);
    for h in 0..ids.heads {
        let wq = store.on_graph(g, ids.q[h]);
        let wk = store.on_graph(g, ids.k[h]);
        let wv = store.on_graph(g, ids.v[h]);
        let q = g.matmul(q_seq, wq)?;
        let k = g.matmul(kv_seq, wk)?;
        let v = g.matmul(kv_seq, wv)?;
        let logits = g.matmul_nt(q, k)?;
        let scores = g.mul_const(logits, scale);
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        ctxs.push(ctx);
        scores_out.push(scores);
        attn_out.push(attn);
    }
    let cat = if ctxs.len() == 1 {
        ctxs[0]
    } else {
        g.concat(&ctxs, 1)?
    };
    let wo = store.on_graph(g, ids.out);
    let out = g.matmul(cat, wo)?;
    Ok(AttnOut {
        out,
        scores: scores_out,
        attn: attn_out,
    })
}

/// Fuzzy-guided cross-attention block parameters for one layer.
pub struct FcaBlockIds {
    pub f_cls: ParamId,
    pub ln_q: LnIds,
    pub ln_kv: LnIds,
    pub attn: AttnIds,
}

impl FcaBlockIds {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(FcaBlockIds {
            f_cls: store.add(
                &alloc::format!("{prefix}.f_cls"),
                xavier_normal(rng, &[dim, dim], dim, dim),
            )?,
            ln_q: LnIds::new(store, &alloc::format!("{prefix}.ln_q"), dim)?,
            ln_kv: LnIds::new(store, &alloc::format!("{prefix}.ln_kv"), dim)?,
            attn: AttnIds::new(store, rng, &alloc::format!("{prefix}.attn"), dim, heads)?,
        })
    }
}

/// One cross-attention step on a branch sequence.
///
/// With fuzzy tokens: queries are [f(cls) || fuzzy tokens] (N+1 rows), the
/// result is added to the whole sequence. Without them (plain class-token
/// cross-attention), the single-row result is added to the class row only.
/// Keys and values always come from the layer-normed branch sequence.
pub fn fca_block(
    g: &mut Graph,
    store: &ParamStore,
    ids: &FcaBlockIds,
    z_prev: Var,
    fuzzy_tokens: Option<Var>,
) -> Result<Var> {
    let rows = g.value(z_prev).rows();
    let cls = g.slice_rows(z_prev, 0, 1)?;
    let f = store.on_graph(g, ids.f_cls);
    let cls_proj = g.matmul(cls, f)?;
    let q_seq = match fuzzy_tokens {
        Some(ft) => {
            if g.value(ft).rows() + 1 != rows {
                return Err(Error::Dimension(alloc::format!(
                    "fca_block: {} fuzzy tokens vs branch rows {rows}",
                    g.value(ft).rows()
                )));
            }
            g.concat(&[cls_proj, ft], 0)?
        }
        None => cls_proj,
    };
    let q_ln = ids.ln_q.apply(g, store, q_seq)?;
    let kv_ln = ids.ln_kv.apply(g, store, z_prev)?;
    let a = attention(g, store, &ids.attn, q_ln, kv_ln)?;
    if fuzzy_tokens.is_some() {
        g.add(a.out, z_prev)
    } else {
        let patched = g.add(cls, a.out)?;
        let rest = g.slice_rows(z_prev, 1, rows - 1)?;
        g.concat(&[patched, rest], 0)
    }
}

pub struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpIds {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(MlpIds {
            w1: store.add(
                &alloc::format!("{prefix}.w1"),
                xavier_normal(rng, &[dim, hidden], dim, hidden),
            )?,
            b1: store.add(&alloc::format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?,
            w2: store.add(
                &alloc::format!("{prefix}.w2"),
                xavier_normal(rng, &[hidden, dim], hidden, dim),
            )?,
            b2: store.add(&alloc::format!("{prefix}.b2"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = store.on_graph(g, self.w1);
        let b1 = store.on_graph(g, self.b1);
        let w2 = store.on_graph(g, self.w2);
        let b2 = store.on_graph(g, self.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_row_bias(h, b1)?;
        let h = g.gelu(h);
        let y = g.matmul(h, w2)?;
        g.add_row_bias(y, b2)
    }
}

pub struct MlpBlockIds {
    pub ln: LnIds,
    pub mlp: MlpIds,
}

impl MlpBlockIds {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(MlpBlockIds {
            ln: LnIds::new(store, &alloc::format!("{prefix}.ln"), dim)?,
            mlp: MlpIds::new(store, rng, prefix, dim, hidden)?,
        })
    }
}

/// The feed-forward step after cross-attention. `Paper` mode feeds
/// LN(z') + z' through the MLP with nothing around it; `Prenorm` is the
/// conventional residual form.
pub fn mlp_block(
    g: &mut Graph,
    store: &ParamStore,
    ids: &MlpBlockIds,
    z: Var,
    mode: MlpMode,
) -> Result<Var> {
    let normed = ids.ln.apply(g, store, z)?;
    match mode {
        MlpMode::Paper => {
            let mixed = g.add(normed, z)?;
            ids.mlp.apply(g, store, mixed)
        }
        MlpMode::Prenorm => {
            let out = ids.mlp.apply(g, store, normed)?;
            g.add(z, out)
        }
    }
}

pub struct EncoderLayerIds {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub mlp: MlpIds,
}

impl EncoderLayerIds {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(EncoderLayerIds {
            ln1: LnIds::new(store, &alloc::format!("{prefix}.ln1"), dim)?,
            attn: AttnIds::new(store, rng, &alloc::format!("{prefix}.attn"), dim, heads)?,
            ln2: LnIds::new(store, &alloc::format!("{prefix}.ln2"), dim)?,
            mlp: MlpIds::new(store, rng, &alloc::format!("{prefix}.mlp"), dim, hidden)?,
        })
    }
}

/// Standard pre-norm transformer encoder layer:
/// x = z + MSA(LN1(z)); out = x + MLP(LN2(x)).
pub fn encoder_layer(
    g: &mut Graph,
    store: &ParamStore,
    ids: &EncoderLayerIds,
    z: Var,
) -> Result<Var> {
    let normed = ids.ln1.apply(g, store, z)?;
    let a = attention(g, store, &ids.attn, normed, normed)?;
    let x = g.add(z, a.out)?;
    let normed2 = ids.ln2.apply(g, store, x)?;
    let m = ids.mlp.apply(g, store, normed2)?;
    g.add(x, m)
}

/// Variance floor for the logit norm. With few classes the default floor
/// makes normalization a near-sign function of the margin (the Jacobian
/// scales like eps/margin^3), which starves everything below the head of
/// gradient; a floor of 1 keeps the norm close to linear for small margins
/// and only softly saturates large ones.
pub const HEAD_LN_EPS: f64 = 1.0;

pub struct HeadIds {
    pub w: ParamId,
    pub ln: LnIds,
}

impl HeadIds {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        branches: usize,
        dim: usize,
        classes: usize,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(alloc::format!(
                "classification head needs >= 2 classes, got {classes}"
            )));
        }
        if branches == 0 {
            return Err(Error::Config("classification head needs >= 1 branch".into()));
        }
        Ok(HeadIds {
            w: store.add(
                "head.w",
                xavier_normal(rng, &[branches * dim, classes], branches * dim, classes),
            )?,
            ln: LnIds::with_eps(store, "head.ln", classes, HEAD_LN_EPS)?,
        })
    }
}

/// Concatenate the branch class tokens, project to class space, layer-norm
/// the logits (in that order). Softmax lives in the loss, not here.
pub fn classification_head(
    g: &mut Graph,
    store: &ParamStore,
    ids: &HeadIds,
    cls_tokens: &[Var],
) -> Result<Var> {
    if cls_tokens.is_empty() {
        return Err(Error::Dimension("head: no class tokens".into()));
    }
    let cat = if cls_tokens.len() == 1 {
        cls_tokens[0]
    } else {
        g.concat(cls_tokens, 1)?
    };
    let w = store.on_graph(g, ids.w);
    let proj = g.matmul(cat, w)?;
    let normed = ids.ln.apply(g, store, proj)?;
    let k = g.value(normed).cols();
    g.reshape(normed, &[k])
}
