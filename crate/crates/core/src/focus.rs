//! Dual focus mapping and multi-grained focus projection.
//!
//! Visual focus mapping lets an image and its dominant segmentation attend
//! to each other at the token level, fuses both directions with a
//! per-token linear map, and then pushes the raw, segmented and fused
//! tokens through the image encoder's final block to get three global rows.
//! Textual focus mapping does the same at the global level only, between
//! the modification text and the reference segmentation.
//!
//! Multi-grained focus projection turns a `K×D` feature into `P×D` by
//! computing, for each focus channel, a softmax distribution over the `K`
//! source rows and taking the weighted sum.
//!
//! Every stage has a graph-level form (`*_g`) used by the model and the
//! trainer, and a [`FeatureMatrix`] form that validates roles on the way in
//! and out.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::backbones::FinalBlock;
use crate::data::{check_role, Dims, FeatureMatrix, Role};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, Mat, ParamGroup, ParamId, ParamStore, Var};

/// Logit offset that removes padded positions from a softmax.
pub const MASKED_LOGIT: f64 = -1e9;

/// Single-head cross attention with square, bias-free projections.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub width: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl CrossAttention {
    pub fn register(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Head;
        Self {
            width,
            wq: store.add_glorot(format!("{prefix}.wq"), g, width, width, rng),
            wk: store.add_glorot(format!("{prefix}.wk"), g, width, width, rng),
            wv: store.add_glorot(format!("{prefix}.wv"), g, width, width, rng),
        }
    }

    /// Row-stochastic attention matrix `softmax(Q·Wq·(KV·Wk)ᵀ/√d)`.
    pub fn weights_g(&self, g: &mut Graph, p: &Bound, q: Var, kv: Var) -> Var {
        let qp = g.matmul(q, p.var(self.wq));
        let kp = g.matmul(kv, p.var(self.wk));
        let logits = g.matmul_t(qp, kp);
        let scaled = g.scale(logits, 1.0 / (self.width as f64).sqrt());
        g.softmax_rows(scaled)
    }

    pub fn forward_g(&self, g: &mut Graph, p: &Bound, q: Var, kv: Var) -> Var {
        let attn = self.weights_g(g, p, q, kv);
        let v = g.matmul(kv, p.var(self.wv));
        g.matmul(attn, v)
    }
}

/// Two-layer per-row map producing the `P×K` projection weights.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Hidden width of the projection stack: `max(P, ⌈D/2⌉)`.
pub fn projection_hidden(focus: usize, embed: usize) -> usize {
    focus.max(embed.div_ceil(2))
}

impl Projection {
    pub fn register(store: &mut ParamStore, prefix: &str, dims: &Dims, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Head;
        let h = projection_hidden(dims.focus, dims.embed_dim);
        Self {
            w1: store.add_glorot(format!("{prefix}.w1"), g, dims.embed_dim, h, rng),
            b1: store.add_zeros(format!("{prefix}.b1"), g, (1, h)),
            w2: store.add_glorot(format!("{prefix}.w2"), g, h, dims.focus, rng),
            b2: store.add_zeros(format!("{prefix}.b2"), g, (1, dims.focus)),
        }
    }
}

/// Parameters of the visual focus mapping, shared by reference and target.
#[derive(Clone, Copy, Debug)]
pub struct VisualFocus {
    /// Segmentation tokens query the image tokens.
    pub seg_queries: CrossAttention,
    /// Image tokens query the segmentation tokens.
    pub image_queries: CrossAttention,
    /// `2D_I → D_I`, bias-free, identity activation.
    pub fuse: ParamId,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    /// `D → D_I` bridge so the fused tokens can re-enter the final block.
    pub bridge_w: ParamId,
    pub bridge_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct TextualFocus {
    /// Segmentation global feature queries the text global feature.
    pub seg_queries: CrossAttention,
    pub text_queries: CrossAttention,
    /// `2D → D`, bias-free.
    pub fuse: ParamId,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
}

/// Which stream a projection belongs to; each has its own parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Reference,
    Modification,
    Target,
}

#[derive(Clone, Copy, Debug)]
pub struct StreamProjections {
    pub local: Projection,
    pub global: Projection,
}

#[derive(Clone, Copy, Debug)]
pub struct FocusMapParams {
    pub visual: VisualFocus,
    pub textual: TextualFocus,
    pub reference: StreamProjections,
    pub modification: StreamProjections,
    pub target: StreamProjections,
}

impl FocusMapParams {
    pub fn register(store: &mut ParamStore, dims: &Dims, rng: &mut ChaCha8Rng) -> Self {
        let h = ParamGroup::Head;
        let (di, d, dt) = (dims.visual_dim, dims.embed_dim, dims.text_dim);
        let visual = VisualFocus {
            seg_queries: CrossAttention::register(store, "vfm.attn_seg", di, rng),
            image_queries: CrossAttention::register(store, "vfm.attn_img", di, rng),
            fuse: store.add_glorot("vfm.fuse", h, 2 * di, di, rng),
            fc_w: store.add_glorot("vfm.fc.w", h, di, d, rng),
            fc_b: store.add_zeros("vfm.fc.b", h, (1, d)),
            bridge_w: store.add_glorot("vfm.bridge.w", h, d, di, rng),
            bridge_b: store.add_zeros("vfm.bridge.b", h, (1, di)),
        };
        let textual = TextualFocus {
            seg_queries: CrossAttention::register(store, "tfm.attn_seg", d, rng),
            text_queries: CrossAttention::register(store, "tfm.attn_txt", d, rng),
            fuse: store.add_glorot("tfm.fuse", h, 2 * d, d, rng),
            fc_w: store.add_glorot("tfm.fc.w", h, dt, d, rng),
            fc_b: store.add_zeros("tfm.fc.b", h, (1, d)),
        };
        let mut streams = |name: &str| StreamProjections {
            local: Projection::register(store, &format!("mgfp.{name}.local"), dims, rng),
            global: Projection::register(store, &format!("mgfp.{name}.global"), dims, rng),
        };
        Self {
            visual,
            textual,
            reference: streams("ref"),
            modification: streams("mod"),
            target: streams("tgt"),
        }
    }

    pub fn projections(&self, stream: Stream) -> &StreamProjections {
        match stream {
            Stream::Reference => &self.reference,
            Stream::Modification => &self.modification,
            Stream::Target => &self.target,
        }
    }
}

fn linear(g: &mut Graph, p: &Bound, x: Var, w: ParamId, b: ParamId) -> Var {
    let y = g.matmul(x, p.var(w));
    g.add_row(y, p.var(b))
}

/// Focus-mapped local visual feature.
/// Returns `(fused C×D_I, fused-and-projected C×D)`.
pub fn vfm_local_g(g: &mut Graph, p: &Bound, vf: &VisualFocus, local: Var, seg_local: Var) -> (Var, Var) {
    let image_from_seg = vf.seg_queries.forward_g(g, p, seg_local, local);
    let seg_from_image = vf.image_queries.forward_g(g, p, local, seg_local);
    let cat = g.concat_cols(&[image_from_seg, seg_from_image]);
    let fused = g.matmul(cat, p.var(vf.fuse));
    let projected = linear(g, p, fused, vf.fc_w, vf.fc_b);
    (fused, projected)
}

/// Stack `[final(F); final(F̌); final(bridge(F̃))]`, `3×D`.
pub fn vfm_global_g(
    g: &mut Graph,
    p: &Bound,
    vf: &VisualFocus,
    image_final: &FinalBlock,
    local: Var,
    seg_local: Var,
    mapped: Var,
) -> Var {
    let raw = image_final.forward(g, p, local, None);
    let seg = image_final.forward(g, p, seg_local, None);
    let bridged = linear(g, p, mapped, vf.bridge_w, vf.bridge_b);
    let fused = image_final.forward(g, p, bridged, None);
    g.concat_rows(&[raw, seg, fused])
}

/// Textual focus mapping. `text_global` and `seg_global` are `1×D`,
/// `tokens` is `S×D_T`. Returns `(global stack 3×D, local S×D)`.
pub fn tfm_g(
    g: &mut Graph,
    p: &Bound,
    tf: &TextualFocus,
    text_global: Var,
    seg_global: Var,
    tokens: Var,
) -> (Var, Var) {
    let text_from_seg = tf.seg_queries.forward_g(g, p, seg_global, text_global);
    let seg_from_text = tf.text_queries.forward_g(g, p, text_global, seg_global);
    let cat = g.concat_cols(&[text_from_seg, seg_from_text]);
    let fused = g.matmul(cat, p.var(tf.fuse));
    let global = g.concat_rows(&[text_global, seg_global, fused]);
    let local = linear(g, p, tokens, tf.fc_w, tf.fc_b);
    (global, local)
}

/// Multi-grained focus projection of a `K×D` feature.
/// `mask` is an optional `1×K` additive logit row.
/// Returns `(weighted P×D, projection weights P×K)`.
pub fn mgfp_g(g: &mut Graph, p: &Bound, proj: &Projection, feature: Var, mask: Option<Var>) -> (Var, Var) {
    let hidden = linear(g, p, feature, proj.w1, proj.b1);
    let hidden = g.tanh(hidden);
    let logits = linear(g, p, hidden, proj.w2, proj.b2);
    let mut per_channel = g.transpose(logits);
    if let Some(m) = mask {
        per_channel = g.add_row(per_channel, m);
    }
    let weights = g.softmax_rows(per_channel);
    let weighted = g.matmul(weights, feature);
    (weighted, weights)
}

/// Replacement for the projection when it is ablated: mean over source
/// rows (weighted by `pool` when given), replicated to `P` rows.
pub fn mean_project_g(g: &mut Graph, feature: Var, focus: usize, pool: Option<Var>) -> Var {
    let mean = match pool {
        Some(w) => g.matmul(w, feature),
        None => g.mean_rows(feature),
    };
    g.repeat_rows(mean, focus)
}

/// Local rows `0..P` followed by global rows `P..2P`.
pub fn focused_g(g: &mut Graph, local: Var, global: Var) -> Var {
    g.concat_rows(&[local, global])
}

/// Row-stochastic `P×K` matrix produced by the projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights(pub Mat);

impl ProjectionWeights {
    /// Largest deviation of a row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        self.0
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn width_check(what: &str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Width(format!("{what}: {a} vs {b}")))
    }
}

fn inference(store: &ParamStore) -> (Graph, Bound) {
    let mut g = Graph::new();
    let p = store.bind(&mut g, &[]);
    (g, p)
}

/// Cross attention on feature matrices; the output takes the query's shape.
pub fn cross_attend(
    unit: &CrossAttention,
    store: &ParamStore,
    q: &FeatureMatrix,
    kv: &FeatureMatrix,
    dims: &Dims,
) -> Result<FeatureMatrix> {
    width_check("query width vs key/value width", q.cols(), kv.cols())?;
    width_check("feature width vs attention width", q.cols(), unit.width)?;
    let (mut g, p) = inference(store);
    let qv = g.constant(q.data().clone());
    let kvv = g.constant(kv.data().clone());
    let out = unit.forward_g(&mut g, &p, qv, kvv);
    FeatureMatrix::new(g.value(out).clone(), Role::Attended, dims)
}

/// Attention matrix of [`cross_attend`] (rows sum to one).
pub fn attention_weights(
    unit: &CrossAttention,
    store: &ParamStore,
    q: &Mat,
    kv: &Mat,
) -> Result<Mat> {
    width_check("query width vs key/value width", q.ncols(), kv.ncols())?;
    width_check("feature width vs attention width", q.ncols(), unit.width)?;
    let (mut g, p) = inference(store);
    let qv = g.constant(q.clone());
    let kvv = g.constant(kv.clone());
    let w = unit.weights_g(&mut g, &p, qv, kvv);
    Ok(g.value(w).clone())
}

fn expect_role(m: &FeatureMatrix, role: Role, dims: &Dims) -> Result<()> {
    check_role(m.data(), role, dims)
}

pub fn vfm_local(
    params: &FocusMapParams,
    store: &ParamStore,
    local: &FeatureMatrix,
    seg_local: &FeatureMatrix,
    dims: &Dims,
) -> Result<FeatureMatrix> {
    expect_role(local, Role::LocalVisual, dims)?;
    expect_role(seg_local, Role::LocalVisual, dims)?;
    let (mut g, p) = inference(store);
    let l = g.constant(local.data().clone());
    let s = g.constant(seg_local.data().clone());
    let (_, out) = vfm_local_g(&mut g, &p, &params.visual, l, s);
    FeatureMatrix::new(g.value(out).clone(), Role::FusedLocal, dims)
}

pub fn vfm_global(
    params: &FocusMapParams,
    image_final: &FinalBlock,
    store: &ParamStore,
    local: &FeatureMatrix,
    seg_local: &FeatureMatrix,
    mapped: &FeatureMatrix,
    dims: &Dims,
) -> Result<FeatureMatrix> {
    expect_role(local, Role::LocalVisual, dims)?;
    expect_role(seg_local, Role::LocalVisual, dims)?;
    expect_role(mapped, Role::FusedLocal, dims)?;
    let (mut g, p) = inference(store);
    let l = g.constant(local.data().clone());
    let s = g.constant(seg_local.data().clone());
    let m = g.constant(mapped.data().clone());
    let out = vfm_global_g(&mut g, &p, &params.visual, image_final, l, s, m);
    FeatureMatrix::new(g.value(out).clone(), Role::GlobalStack, dims)
}

pub fn tfm(
    params: &FocusMapParams,
    store: &ParamStore,
    text_global: &FeatureMatrix,
    seg_global: &FeatureMatrix,
    tokens: &FeatureMatrix,
    dims: &Dims,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    expect_role(text_global, Role::Pooled, dims)?;
    expect_role(seg_global, Role::Pooled, dims)?;
    expect_role(tokens, Role::TextTokens, dims)?;
    let (mut g, p) = inference(store);
    let tg = g.constant(text_global.data().clone());
    let sg = g.constant(seg_global.data().clone());
    let tk = g.constant(tokens.data().clone());
    let (global, local) = tfm_g(&mut g, &p, &params.textual, tg, sg, tk);
    Ok((
        FeatureMatrix::new(g.value(global).clone(), Role::GlobalStack, dims)?,
        FeatureMatrix::new(g.value(local).clone(), Role::LocalText, dims)?,
    ))
}

/// Projects a `K×D` feature (`K` ∈ {C, S, 3}) onto `P` focus channels.
pub fn mgfp(
    proj: &Projection,
    store: &ParamStore,
    feature: &FeatureMatrix,
    dims: &Dims,
) -> Result<(FeatureMatrix, ProjectionWeights)> {
    let k = feature.rows();
    if ![dims.channels, dims.text_len, 3].contains(&k) || feature.cols() != dims.embed_dim {
        return Err(Error::Shape {
            role: "projection input".into(),
            expected: (dims.channels, dims.embed_dim),
            got: (k, feature.cols()),
        });
    }
    let (mut g, p) = inference(store);
    let f = g.constant(feature.data().clone());
    let (weighted, weights) = mgfp_g(&mut g, &p, proj, f, None);
    let role = if k == 3 {
        Role::WeightedGlobal
    } else {
        Role::WeightedLocal
    };
    Ok((
        FeatureMatrix::new(g.value(weighted).clone(), role, dims)?,
        ProjectionWeights(g.value(weights).clone()),
    ))
}

pub fn focused_feature(local: &FeatureMatrix, global: &FeatureMatrix, dims: &Dims) -> Result<FeatureMatrix> {
    expect_role(local, Role::WeightedLocal, dims)?;
    expect_role(global, Role::WeightedLocal, dims)?;
    let data = ndarray::concatenate(ndarray::Axis(0), &[local.data().view(), global.data().view()])
        .expect("equal widths");
    FeatureMatrix::new(data, Role::Focused, dims)
}

/// Splits a focused feature back into its local and global halves.
pub fn split_focused(f: &FeatureMatrix, dims: &Dims) -> Result<(Mat, Mat)> {
    expect_role(f, Role::Focused, dims)?;
    let p = dims.focus;
    let d = f.data();
    Ok((
        d.slice(ndarray::s![..p, ..]).to_owned(),
        d.slice(ndarray::s![p.., ..]).to_owned(),
    ))
}

/// Additive logit mask (`1×n`) hiding invalid positions.
pub fn logit_mask(valid: &[bool]) -> Mat {
    Array2::from_shape_fn((1, valid.len()), |(_, j)| if valid[j] { 0.0 } else { MASKED_LOGIT })
}
