//! Embedding, the causal self-attention encoder, the extra routing blocks,
//! and the inference heads. Forward passes return explicit caches; the
//! matching backward passes consume them and accumulate into a gradient
//! container shaped like the parameters.
//!
//! Wiring per layer (pre-norm residuals):
//!   a = x + Drop(Attn(LN1(x)))
//!   y = a + Drop(PFFN(LN2(a)))
//! A block is one such layer followed by a second feed-forward with an
//! identity residual and no extra norm:
//!   out = y + Drop(PFFN'(y))

use ndarray::{s, Array1, Array2, Array3, Array4};

use crate::error::{Error, Result};
use crate::model::ops::{
    gelu, gelu_grad, layer_norm_backward, layer_norm_forward, linear_backward, linear_forward,
    masked_softmax_rows, softmax_backward_rows, DropoutCtx,
};
use crate::model::params::{BlockParams, EncoderLayerParams, ModelParams};

/// Batch activations plus the padding mask (true = real item).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub values: Array3<f64>,
    pub mask: Array2<bool>,
}

impl HiddenStates {
    pub fn batch_size(&self) -> usize {
        self.values.dim().0
    }

    pub fn seq_len(&self) -> usize {
        self.values.dim().1
    }
}

/// How a whole sequence collapses to one contrastive vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Hidden state at the last real position.
    Last,
    /// Mean over all real positions.
    Mean,
}

/// Look up item + positional embeddings. Padding (index 0) rows are exactly
/// zero; indices beyond the vocabulary are a hard error.
pub fn embed(batch: &Array2<usize>, params: &ModelParams) -> Result<HiddenStates> {
    let (b, t) = batch.dim();
    let d = params.dims.d;
    if t > params.dims.max_len {
        return Err(Error::Config(format!(
            "batch window {t} exceeds model max_len {}",
            params.dims.max_len
        )));
    }
    let mut values = Array3::zeros((b, t, d));
    let mut mask = Array2::from_elem((b, t), false);
    for bi in 0..b {
        for ti in 0..t {
            let item = batch[[bi, ti]];
            if item > params.dims.n_items {
                return Err(Error::Data(format!(
                    "item index {item} out of vocabulary (|V| = {})",
                    params.dims.n_items
                )));
            }
            if item == 0 {
                continue;
            }
            mask[[bi, ti]] = true;
            for di in 0..d {
                values[[bi, ti, di]] =
                    params.item_embedding[[item, di]] + params.positional[[ti, di]];
            }
        }
    }
    Ok(HiddenStates { values, mask })
}

/// Scatter d(values) back into the embedding tables. The padding row is
/// never touched.
pub fn embed_backward(dvalues: &Array3<f64>, batch: &Array2<usize>, grads: &mut ModelParams) {
    let (b, t, d) = dvalues.dim();
    for bi in 0..b {
        for ti in 0..t {
            let item = batch[[bi, ti]];
            if item == 0 {
                continue;
            }
            for di in 0..d {
                let g = dvalues[[bi, ti, di]];
                grads.item_embedding[[item, di]] += g;
                grads.positional[[ti, di]] += g;
            }
        }
    }
}

/// Everything the layer backward pass needs, kept instead of recomputing
/// the forward. Dropout masks are regenerated from (seed, site), never
/// stored.
pub struct LayerCache {
    xhat1: Array3<f64>,
    invstd1: Array2<f64>,
    q: Array3<f64>,
    k: Array3<f64>,
    v: Array3<f64>,
    /// Pre-dropout attention probabilities, (B, heads, T, T).
    probs: Array4<f64>,
    ctx: Array3<f64>,
    xhat2: Array3<f64>,
    invstd2: Array2<f64>,
    u: Array3<f64>,
}

fn affine_from_xhat(xhat: &Array3<f64>, scale: &Array1<f64>, shift: &Array1<f64>) -> Array3<f64> {
    let mut n = xhat.clone();
    for mut row in n.rows_mut() {
        for (di, x) in row.iter_mut().enumerate() {
            *x = *x * scale[di] + shift[di];
        }
    }
    n
}

/// One encoder layer. `site` must be unique per (pass, layer) so dropout
/// masks never collide across calls.
pub fn layer_forward(
    x: &Array3<f64>,
    mask: &Array2<bool>,
    p: &EncoderLayerParams,
    heads: usize,
    drop: &DropoutCtx,
    site: &str,
) -> (Array3<f64>, LayerCache) {
    let (b, t, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (n1, xhat1, invstd1) = layer_norm_forward(x, &p.ln1.scale, &p.ln1.shift);
    let zero_bias = Array1::zeros(d);
    let q = linear_forward(&n1, &p.wq.view(), &zero_bias);
    let k = linear_forward(&n1, &p.wk.view(), &zero_bias);
    let v = linear_forward(&n1, &p.wv.view(), &zero_bias);

    let mut probs = Array4::zeros((b, heads, t, t));
    for bi in 0..b {
        let allowed = Array2::from_shape_fn((t, t), |(i, j)| j <= i && mask[[bi, j]]);
        for h in 0..heads {
            let qh = q.slice(s![bi, .., h * dh..(h + 1) * dh]);
            let kh = k.slice(s![bi, .., h * dh..(h + 1) * dh]);
            let mut logits = qh.dot(&kh.t());
            logits *= scale;
            masked_softmax_rows(&mut logits, &allowed);
            probs.slice_mut(s![bi, h, .., ..]).assign(&logits);
        }
    }

    let mut dropped = probs.clone();
    drop.apply(
        &format!("{site}.attnprobs"),
        dropped.as_slice_mut().expect("standard layout"),
    );

    let mut ctx = Array3::zeros((b, t, d));
    for bi in 0..b {
        for h in 0..heads {
            let ah = dropped.slice(s![bi, h, .., ..]);
            let vh = v.slice(s![bi, .., h * dh..(h + 1) * dh]);
            let ch = ah.dot(&vh);
            ctx.slice_mut(s![bi, .., h * dh..(h + 1) * dh]).assign(&ch);
        }
    }

    let mut attn = linear_forward(&ctx, &p.wo.view(), &zero_bias);
    drop.apply(
        &format!("{site}.attnout"),
        attn.as_slice_mut().expect("standard layout"),
    );
    let a = x + &attn;

    let (n2, xhat2, invstd2) = layer_norm_forward(&a, &p.ln2.scale, &p.ln2.shift);
    let u = linear_forward(&n2, &p.pffn.w1.view(), &p.pffn.b1);
    let g = u.mapv(gelu);
    let mut f = linear_forward(&g, &p.pffn.w2.view(), &p.pffn.b2);
    drop.apply(
        &format!("{site}.ffn"),
        f.as_slice_mut().expect("standard layout"),
    );
    let y = &a + &f;

    let cache = LayerCache {
        xhat1,
        invstd1,
        q,
        k,
        v,
        probs,
        ctx,
        xhat2,
        invstd2,
        u,
    };
    (y, cache)
}

/// Backward of `layer_forward`; accumulates into `grads` and returns dx.
#[allow(clippy::too_many_arguments)]
pub fn layer_backward(
    dy: &Array3<f64>,
    cache: &LayerCache,
    p: &EncoderLayerParams,
    grads: &mut EncoderLayerParams,
    heads: usize,
    drop: &DropoutCtx,
    site: &str,
) -> Array3<f64> {
    let (b, t, d) = dy.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // y = a + Drop(f); f = PFFN(n2); n2 = LN2(a).
    let mut df = dy.clone();
    drop.apply(
        &format!("{site}.ffn"),
        df.as_slice_mut().expect("standard layout"),
    );
    let g = cache.u.mapv(gelu);
    let mut dg = Array3::zeros((b, t, 4 * d));
    {
        let dgv = linear_backward(&g, &p.pffn.w2.view(), &df, &mut grads.pffn.w2, &mut grads.pffn.b2);
        dg.assign(&dgv);
    }
    let du = &dg * &cache.u.mapv(gelu_grad);
    let n2 = affine_from_xhat(&cache.xhat2, &p.ln2.scale, &p.ln2.shift);
    let dn2 = linear_backward(&n2, &p.pffn.w1.view(), &du, &mut grads.pffn.w1, &mut grads.pffn.b1);
    let mut da = dy
        + &layer_norm_backward(
            &dn2,
            &cache.xhat2,
            &cache.invstd2,
            &p.ln2.scale,
            &mut grads.ln2.scale,
            &mut grads.ln2.shift,
        );

    // a = x + Drop(attn); attn = ctx·Wo.
    let mut dattn = da.clone();
    drop.apply(
        &format!("{site}.attnout"),
        dattn.as_slice_mut().expect("standard layout"),
    );
    let mut db_unused = Array1::zeros(d);
    let dctx = linear_backward(&cache.ctx, &p.wo.view(), &dattn, &mut grads.wo, &mut db_unused);

    // ctx = Drop(probs)·v per head.
    let mut dropped = cache.probs.clone();
    drop.apply(
        &format!("{site}.attnprobs"),
        dropped.as_slice_mut().expect("standard layout"),
    );
    let mut dprobs_dropped = Array4::zeros((b, heads, t, t));
    let mut dq = Array3::zeros((b, t, d));
    let mut dk = Array3::zeros((b, t, d));
    let mut dv = Array3::zeros((b, t, d));
    for bi in 0..b {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let dctx_h = dctx.slice(s![bi, .., cols.clone()]);
            let vh = cache.v.slice(s![bi, .., cols.clone()]);
            let ah = dropped.slice(s![bi, h, .., ..]);
            dprobs_dropped
                .slice_mut(s![bi, h, .., ..])
                .assign(&dctx_h.dot(&vh.t()));
            dv.slice_mut(s![bi, .., cols.clone()])
                .assign(&ah.t().dot(&dctx_h));
        }
    }
    let mut dprobs = dprobs_dropped;
    drop.apply(
        &format!("{site}.attnprobs"),
        dprobs.as_slice_mut().expect("standard layout"),
    );
    for bi in 0..b {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let probs_h = cache.probs.slice(s![bi, h, .., ..]).to_owned();
            let dprobs_h = dprobs.slice(s![bi, h, .., ..]).to_owned();
            let mut dlogits = softmax_backward_rows(&probs_h, &dprobs_h);
            dlogits *= scale;
            let qh = cache.q.slice(s![bi, .., cols.clone()]);
            let kh = cache.k.slice(s![bi, .., cols.clone()]);
            dq.slice_mut(s![bi, .., cols.clone()])
                .assign(&dlogits.dot(&kh));
            dk.slice_mut(s![bi, .., cols.clone()])
                .assign(&dlogits.t().dot(&qh));
        }
    }

    let n1 = affine_from_xhat(&cache.xhat1, &p.ln1.scale, &p.ln1.shift);
    let mut dzero = Array1::zeros(d);
    let mut dn1 = linear_backward(&n1, &p.wq.view(), &dq, &mut grads.wq, &mut dzero);
    dn1 += &linear_backward(&n1, &p.wk.view(), &dk, &mut grads.wk, &mut dzero);
    dn1 += &linear_backward(&n1, &p.wv.view(), &dv, &mut grads.wv, &mut dzero);
    da += &layer_norm_backward(
        &dn1,
        &cache.xhat1,
        &cache.invstd1,
        &p.ln1.scale,
        &mut grads.ln1.scale,
        &mut grads.ln1.shift,
    );
    da
}

pub struct EncodeCache {
    pub layers: Vec<LayerCache>,
}

/// Run all encoder layers. `site_prefix` distinguishes independent passes
/// (main pass vs each view) for dropout.
pub fn encode(
    h0: &HiddenStates,
    params: &ModelParams,
    drop: &DropoutCtx,
    site_prefix: &str,
) -> (HiddenStates, EncodeCache) {
    let mut x = h0.values.clone();
    let mut layers = Vec::with_capacity(params.encoder.len());
    for (l, p) in params.encoder.iter().enumerate() {
        let (y, cache) = layer_forward(
            &x,
            &h0.mask,
            p,
            params.dims.heads,
            drop,
            &format!("{site_prefix}.layer{l}"),
        );
        x = y;
        layers.push(cache);
    }
    (
        HiddenStates {
            values: x,
            mask: h0.mask.clone(),
        },
        EncodeCache { layers },
    )
}

/// Backward through all encoder layers; returns d(h0.values).
pub fn encode_backward(
    dy: &Array3<f64>,
    cache: &EncodeCache,
    params: &ModelParams,
    grads: &mut ModelParams,
    drop: &DropoutCtx,
    site_prefix: &str,
) -> Array3<f64> {
    let mut dx = dy.clone();
    for l in (0..params.encoder.len()).rev() {
        dx = layer_backward(
            &dx,
            &cache.layers[l],
            &params.encoder[l],
            &mut grads.encoder[l],
            params.dims.heads,
            drop,
            &format!("{site_prefix}.layer{l}"),
        );
    }
    dx
}

pub struct BlockCache {
    layer: LayerCache,
    y1: Array3<f64>,
    u2: Array3<f64>,
}

/// One routing block: encoder layer, then an extra feed-forward with an
/// identity residual (zero extra weights make the block collapse to its
/// inner layer).
pub fn block_forward(
    h: &HiddenStates,
    block: &BlockParams,
    heads: usize,
    drop: &DropoutCtx,
    site: &str,
) -> (HiddenStates, BlockCache) {
    let (y1, layer) = layer_forward(
        &h.values,
        &h.mask,
        &block.layer,
        heads,
        drop,
        &format!("{site}.inner"),
    );
    let u2 = linear_forward(&y1, &block.extra.w1.view(), &block.extra.b1);
    let g2 = u2.mapv(gelu);
    let mut f2 = linear_forward(&g2, &block.extra.w2.view(), &block.extra.b2);
    drop.apply(
        &format!("{site}.extra"),
        f2.as_slice_mut().expect("standard layout"),
    );
    let out = &y1 + &f2;
    (
        HiddenStates {
            values: out,
            mask: h.mask.clone(),
        },
        BlockCache { layer, y1, u2 },
    )
}

#[allow(clippy::too_many_arguments)]
pub fn block_backward(
    dy: &Array3<f64>,
    cache: &BlockCache,
    block: &BlockParams,
    grads: &mut BlockParams,
    heads: usize,
    drop: &DropoutCtx,
    site: &str,
    mask: &Array2<bool>,
) -> Array3<f64> {
    let _ = mask;
    let mut df2 = dy.clone();
    drop.apply(
        &format!("{site}.extra"),
        df2.as_slice_mut().expect("standard layout"),
    );
    let g2 = cache.u2.mapv(gelu);
    let dg2 = linear_backward(
        &g2,
        &block.extra.w2.view(),
        &df2,
        &mut grads.extra.w2,
        &mut grads.extra.b2,
    );
    let du2 = &dg2 * &cache.u2.mapv(gelu_grad);
    let dy1_extra = linear_backward(
        &cache.y1,
        &block.extra.w1.view(),
        &du2,
        &mut grads.extra.w1,
        &mut grads.extra.b1,
    );
    let dy1 = dy + &dy1_extra;
    layer_backward(
        &dy1,
        &cache.layer,
        &block.layer,
        &mut grads.layer,
        heads,
        drop,
        &format!("{site}.inner"),
    )
}

/// Route a level-m view through blocks 1..m−1 (none for m = 1). The cache
/// length always equals the number of blocks applied.
pub fn hierarchical_forward(
    h: &HiddenStates,
    m: usize,
    params: &ModelParams,
    drop: &DropoutCtx,
    site_prefix: &str,
) -> Result<(HiddenStates, Vec<BlockCache>)> {
    if m == 0 || m > params.blocks.len() + 1 {
        return Err(Error::Config(format!(
            "level {m} out of range for {} blocks",
            params.blocks.len()
        )));
    }
    let mut out = h.clone();
    let mut caches = Vec::with_capacity(m - 1);
    for j in 0..m - 1 {
        let (next, cache) = block_forward(
            &out,
            &params.blocks[j],
            params.dims.heads,
            drop,
            &format!("{site_prefix}.block{j}"),
        );
        out = next;
        caches.push(cache);
    }
    Ok((out, caches))
}

/// Backward through blocks m−1..1; returns the gradient at the encoder
/// output.
pub fn hierarchical_backward(
    dy: &Array3<f64>,
    caches: &[BlockCache],
    mask: &Array2<bool>,
    params: &ModelParams,
    grads: &mut ModelParams,
    drop: &DropoutCtx,
    site_prefix: &str,
) -> Array3<f64> {
    let mut dx = dy.clone();
    for j in (0..caches.len()).rev() {
        dx = block_backward(
            &dx,
            &caches[j],
            &params.blocks[j],
            &mut grads.blocks[j],
            params.dims.heads,
            drop,
            &format!("{site_prefix}.block{j}"),
            mask,
        );
    }
    dx
}

/// Index of the last real position per row; error on an all-padding row.
pub fn last_real_positions(mask: &Array2<bool>) -> Result<Vec<usize>> {
    let (b, t) = mask.dim();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let pos = (0..t).rev().find(|&ti| mask[[bi, ti]]);
        match pos {
            Some(p) => out.push(p),
            None => {
                return Err(Error::Data(format!(
                    "row {bi} is entirely padding, no representation exists"
                )))
            }
        }
    }
    Ok(out)
}

/// Collapse each sequence to a single d-vector per the aggregation rule.
pub fn sequence_representation(h: &HiddenStates, agg: Aggregation) -> Result<Array2<f64>> {
    let (b, _, d) = h.values.dim();
    let mut out = Array2::zeros((b, d));
    match agg {
        Aggregation::Last => {
            let last = last_real_positions(&h.mask)?;
            for bi in 0..b {
                out.row_mut(bi).assign(&h.values.slice(s![bi, last[bi], ..]));
            }
        }
        Aggregation::Mean => {
            last_real_positions(&h.mask)?; // validates no all-padding row
            for bi in 0..b {
                let mut count = 0.0;
                for ti in 0..h.seq_len() {
                    if h.mask[[bi, ti]] {
                        let row = h.values.slice(s![bi, ti, ..]).to_owned();
                        out.row_mut(bi).scaled_add(1.0, &row);
                        count += 1.0;
                    }
                }
                out.row_mut(bi).mapv_inplace(|x| x / count);
            }
        }
    }
    Ok(out)
}

/// Spread d(representation) back over the positions it came from.
pub fn sequence_representation_backward(
    drep: &Array2<f64>,
    mask: &Array2<bool>,
    seq_len: usize,
    agg: Aggregation,
) -> Result<Array3<f64>> {
    let (b, d) = drep.dim();
    let mut out = Array3::zeros((b, seq_len, d));
    match agg {
        Aggregation::Last => {
            let last = last_real_positions(mask)?;
            for bi in 0..b {
                out.slice_mut(s![bi, last[bi], ..]).assign(&drep.row(bi));
            }
        }
        Aggregation::Mean => {
            for bi in 0..b {
                let count = (0..seq_len).filter(|&ti| mask[[bi, ti]]).count();
                if count == 0 {
                    return Err(Error::Data(format!("row {bi} is entirely padding")));
                }
                for ti in 0..seq_len {
                    if mask[[bi, ti]] {
                        let scaled = drep.row(bi).mapv(|x| x / count as f64);
                        out.slice_mut(s![bi, ti, ..]).assign(&scaled);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Full-catalog scores from the last real position. Column 0 (padding) is
/// pinned to −∞ so it can never rank.
pub fn predict_scores(h: &HiddenStates, params: &ModelParams) -> Result<Array2<f64>> {
    let rep = sequence_representation(h, Aggregation::Last)?;
    let mut scores = rep.dot(&params.item_embedding.t());
    scores.column_mut(0).fill(f64::NEG_INFINITY);
    Ok(scores)
}
