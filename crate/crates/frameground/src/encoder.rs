//! Feature projection, the shared sequence encoder, and cross-modal
//! interaction.
//!
//! Both modalities are projected into a common latent space by independent
//! affine maps, then encoded by one weight-shared stack of conv blocks
//! (conv + GELU + residual + layer norm) topped with multi-head
//! self-attention. Interaction builds a query-conditioned video
//! representation: scaled dot-product similarities between encoded frames
//! and tokens, row/column softmaxes, two attention readbacks, and an FFN
//! over the concatenated views.
//!
//! Padding discipline: padded rows are zero on entry and re-zeroed after
//! every sublayer (layer norm maps zero rows to its bias, so an explicit
//! mask multiply follows it), attention and softmaxes exclude padded
//! positions, and reductions are masked. Changing features at padded
//! positions therefore never changes valid outputs.

use ndarray::Array2;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{Model, TapeParams};

/// Encoded video/query pair in the shared latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    /// n x D.
    pub video: Array2<f64>,
    /// m x D.
    pub query: Array2<f64>,
}

/// Query-conditioned video features with the similarity maps that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionOutput {
    /// n x D.
    pub features: Array2<f64>,
    /// Raw scaled similarities, n x m.
    pub similarity: Array2<f64>,
    /// Row softmax of `similarity` over valid tokens, n x m.
    pub row_softmax: Array2<f64>,
    /// Column softmax of `similarity` over valid frames, n x m.
    pub col_softmax: Array2<f64>,
}

/// 0/1 mask that keeps the first `valid` rows.
pub(crate) fn row_mask(rows: usize, valid: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, _)| if i < valid { 1.0 } else { 0.0 })
}

/// x . w + b with named parameters.
pub(crate) fn affine_node(
    tape: &mut Tape,
    p: &TapeParams,
    w: &str,
    b: &str,
    x: NodeId,
) -> NodeId {
    let h = tape.matmul(x, p.id(w));
    tape.add_row_broadcast(h, p.id(b))
}

/// Re-zero padded rows; a no-op when nothing is padded.
pub(crate) fn masked(tape: &mut Tape, x: NodeId, valid: usize) -> NodeId {
    let (rows, cols) = tape.value(x).dim();
    if valid == rows {
        x
    } else {
        tape.hadamard_const(x, row_mask(rows, valid, cols))
    }
}

/// Modality projection: affine map into the latent space, padded rows
/// re-zeroed. `prefix` is `proj_v` or `proj_q`.
pub(crate) fn project_node(
    tape: &mut Tape,
    p: &TapeParams,
    prefix: &str,
    x: NodeId,
    valid: usize,
) -> NodeId {
    let h = affine_node(tape, p, &format!("{prefix}.w"), &format!("{prefix}.b"), x);
    masked(tape, h, valid)
}

/// Shared sequence encoder over one (possibly padded) sequence: conv blocks
/// then multi-head self-attention, residual + layer norm around each.
pub(crate) fn encode_node(
    tape: &mut Tape,
    p: &TapeParams,
    model: &Model,
    x: NodeId,
    valid: usize,
) -> NodeId {
    let cfg = &model.config;
    let mut h = x;
    for layer in 0..cfg.num_conv_layers {
        let prefix = format!("enc.conv{layer}");
        let c = tape.conv1d_same(
            h,
            p.id(&format!("{prefix}.w")),
            p.id(&format!("{prefix}.b")),
            cfg.conv_kernel,
        );
        let c = tape.gelu(c);
        let r = tape.add(c, h);
        let n = tape.layer_norm_rows(
            r,
            p.id(&format!("{prefix}.ln_g")),
            p.id(&format!("{prefix}.ln_b")),
        );
        h = masked(tape, n, valid);
    }

    let q = affine_node(tape, p, "enc.attn.wq", "enc.attn.bq", h);
    let k = affine_node(tape, p, "enc.attn.wk", "enc.attn.bk", h);
    let v = affine_node(tape, p, "enc.attn.wv", "enc.attn.bv", h);
    let head_dim = cfg.d / cfg.num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let qh = tape.slice_cols(q, head * head_dim, head_dim);
        let kh = tape.slice_cols(k, head * head_dim, head_dim);
        let vh = tape.slice_cols(v, head * head_dim, head_dim);
        let logits = tape.matmul_nt(qh, kh);
        let logits = tape.scale(logits, scale);
        // Padded keys are excluded; padded query rows produce junk that the
        // final mask removes.
        let weights = tape.softmax_rows_masked(logits, valid);
        heads.push(tape.matmul(weights, vh));
    }
    let ctx = tape.concat_cols(&heads);
    let out = affine_node(tape, p, "enc.attn.wo", "enc.attn.bo", ctx);
    let r = tape.add(out, h);
    let n = tape.layer_norm_rows(r, p.id("enc.attn.ln_g"), p.id("enc.attn.ln_b"));
    masked(tape, n, valid)
}

/// Cross-modal interaction up to the concatenated view
/// [V~, cal_V, V~*cal_V, V~*cal_Q] (n x 4D), leaving the FFN to the caller
/// so batched training can stack many pairs into one FFN evaluation.
pub(crate) struct InteractParts {
    /// n x 4D concatenation feeding the interaction FFN.
    pub concat: NodeId,
    /// Raw scaled similarities, n x m.
    pub similarity: NodeId,
    /// Row softmax over valid tokens.
    pub row_softmax: NodeId,
    /// Column softmax over valid frames.
    pub col_softmax: NodeId,
}

pub(crate) fn interact_parts(
    tape: &mut Tape,
    model: &Model,
    video: NodeId,
    query: NodeId,
    n_valid: usize,
    m_valid: usize,
) -> InteractParts {
    let d = model.config.d as f64;
    let raw = tape.matmul_nt(video, query);
    let similarity = tape.scale(raw, 1.0 / d.sqrt());
    let row_softmax = tape.softmax_rows_masked(similarity, m_valid);
    let col_softmax = tape.softmax_cols_masked(similarity, n_valid);
    // Query-aligned view of the video: each frame's mixture of tokens.
    let cal_v = tape.matmul(row_softmax, query);
    // Frame-aligned readback: tokens pool frames, frames re-gather the pool.
    let inner = tape.matmul_tn(col_softmax, video);
    let cal_q = tape.matmul(row_softmax, inner);
    let h1 = tape.hadamard(video, cal_v);
    let h2 = tape.hadamard(video, cal_q);
    let concat = tape.concat_cols(&[video, cal_v, h1, h2]);
    InteractParts { concat, similarity, row_softmax, col_softmax }
}

/// The interaction FFN: 4D -> ffn_hidden -> D with one nonlinearity between
/// the affine layers. The caller masks padded rows afterwards.
pub(crate) fn interaction_ffn(tape: &mut Tape, p: &TapeParams, concat: NodeId) -> NodeId {
    let h = affine_node(tape, p, "ffn.w1", "ffn.b1", concat);
    let h = tape.gelu(h);
    affine_node(tape, p, "ffn.w2", "ffn.b2", h)
}

fn check_dims(model: &Model, video: &Array2<f64>, query: &Array2<f64>) -> Result<()> {
    if video.ncols() != model.d_v {
        return Err(Error::Data(format!(
            "video features have {} columns, model projects from {}",
            video.ncols(),
            model.d_v
        )));
    }
    if query.ncols() != model.d_q {
        return Err(Error::Data(format!(
            "query features have {} columns, model projects from {}",
            query.ncols(),
            model.d_q
        )));
    }
    if video.nrows() == 0 || query.nrows() == 0 {
        return Err(Error::Data("empty video or query".into()));
    }
    Ok(())
}

/// Project one sample's raw features into the latent space.
pub fn project_features(
    model: &Model,
    video: &Array2<f64>,
    query: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_dims(model, video, query)?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let vx = tape.leaf(video.clone());
    let qx = tape.leaf(query.clone());
    let v = project_node(&mut tape, &p, "proj_v", vx, video.nrows());
    let q = project_node(&mut tape, &p, "proj_q", qx, query.nrows());
    Ok((tape.value(v).clone(), tape.value(q).clone()))
}

/// Encode both projected modalities with the shared encoder.
pub fn encode_modalities(
    model: &Model,
    v_proj: &Array2<f64>,
    q_proj: &Array2<f64>,
) -> Result<EncodedPair> {
    let d = model.config.d;
    if v_proj.ncols() != d || q_proj.ncols() != d {
        return Err(Error::Data(format!(
            "projected features must have {d} columns, got {} and {}",
            v_proj.ncols(),
            q_proj.ncols()
        )));
    }
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let vx = tape.leaf(v_proj.clone());
    let qx = tape.leaf(q_proj.clone());
    let v = encode_node(&mut tape, &p, model, vx, v_proj.nrows());
    let q = encode_node(&mut tape, &p, model, qx, q_proj.nrows());
    Ok(EncodedPair { video: tape.value(v).clone(), query: tape.value(q).clone() })
}

/// Compute the query-conditioned video representation for one encoded pair.
pub fn interact(model: &Model, pair: &EncodedPair) -> Result<InteractionOutput> {
    let d = model.config.d;
    if pair.video.ncols() != d || pair.query.ncols() != d {
        return Err(Error::Data(format!(
            "encoded pair must have {d} columns, got {} and {}",
            pair.video.ncols(),
            pair.query.ncols()
        )));
    }
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let vx = tape.leaf(pair.video.clone());
    let qx = tape.leaf(pair.query.clone());
    let parts = interact_parts(&mut tape, model, vx, qx, pair.video.nrows(), pair.query.nrows());
    let features = interaction_ffn(&mut tape, &p, parts.concat);
    Ok(InteractionOutput {
        features: tape.value(features).clone(),
        similarity: tape.value(parts.similarity).clone(),
        row_softmax: tape.value(parts.row_softmax).clone(),
        col_softmax: tape.value(parts.col_softmax).clone(),
    })
}

/// Full single-sample encoding path: project, encode, interact.
pub fn encode_sample(
    model: &Model,
    video: &Array2<f64>,
    query: &Array2<f64>,
) -> Result<(EncodedPair, InteractionOutput)> {
    let (v_proj, q_proj) = project_features(model, video, query)?;
    let pair = encode_modalities(model, &v_proj, &q_proj)?;
    let interaction = interact(model, &pair)?;
    Ok((pair, interaction))
}
