//! Frame-wise matching scores and the batch pairing objective.
//!
//! Two independent three-layer heads map the interacted features to a
//! per-frame sigmoid score and a softmax weight; their weighted sum is the
//! video-level matching score for one (video, query) pairing. Across a batch
//! every video is scored against every query, and the loss rewards mass on
//! the matched diagonal:
//!
//! ```text
//! L = -log( sum_k (s_hat[k,k] + sim[k,k]) / sum_{k,j} (s_hat[k,j] + sim[k,j]) )
//! ```
//!
//! `sim` is a pooled cosine-style similarity squashed through a sigmoid, so
//! every addend is strictly positive and the log is always defined.

use ndarray::Array2;

use crate::autodiff::{sigmoid_scalar, NodeId, Tape};
use crate::encoder::{affine_node, interact, EncodedPair, InteractionOutput};
use crate::error::{Error, Result};
use crate::model::{Model, TapeParams};

/// Per-frame matching scores, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores {
    pub s: Vec<f64>,
}

/// Per-frame importance weights; nonnegative, summing to 1 over valid
/// frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWeights {
    pub w: Vec<f64>,
}

/// All-pairs matching scores for a batch: `s_hat[k, j]` scores video k
/// against query j, `sim` is the pooled encoded-feature similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScoreMatrix {
    pub s_hat: Array2<f64>,
    pub sim: Array2<f64>,
}

/// Three affine layers (D -> D -> D -> 1) with GELU between; raw output.
pub(crate) fn head_node(tape: &mut Tape, p: &TapeParams, prefix: &str, x: NodeId) -> NodeId {
    let h = affine_node(tape, p, &format!("{prefix}.w1"), &format!("{prefix}.b1"), x);
    let h = tape.gelu(h);
    let h = affine_node(tape, p, &format!("{prefix}.w2"), &format!("{prefix}.b2"), h);
    let h = tape.gelu(h);
    affine_node(tape, p, &format!("{prefix}.w3"), &format!("{prefix}.b3"), h)
}

/// Per-frame similarity against the pooled query: u = sigmoid(V~ qbar^T / sqrt(D)).
/// `qbar` is 1 x D; the result is n x 1. Padded rows give sigmoid(0) = 0.5
/// and must be excluded by the caller's masks.
pub(crate) fn frame_similarity_node(
    tape: &mut Tape,
    d: usize,
    video: NodeId,
    qbar: NodeId,
) -> NodeId {
    let raw = tape.matmul_nt(video, qbar);
    let scaled = tape.scale(raw, 1.0 / (d as f64).sqrt());
    tape.sigmoid(scaled)
}

/// Predict frame scores and weights from interacted features (n x D).
pub fn predict_scores(model: &Model, features: &Array2<f64>) -> Result<(FrameScores, FrameWeights)> {
    if features.ncols() != model.config.d {
        return Err(Error::Data(format!(
            "interacted features must have {} columns, got {}",
            model.config.d,
            features.ncols()
        )));
    }
    if features.nrows() == 0 {
        return Err(Error::Data("no frames to score".into()));
    }
    let n = features.nrows();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let x = tape.leaf(features.clone());
    let s_raw = head_node(&mut tape, &p, "head_s", x);
    let s = tape.sigmoid(s_raw);
    let w_raw = head_node(&mut tape, &p, "head_w", x);
    let w = tape.softmax_cols_masked(w_raw, n);
    let s = tape.value(s).column(0).to_vec();
    let w = tape.value(w).column(0).to_vec();
    Ok((FrameScores { s }, FrameWeights { w }))
}

/// Weighted sum of frame scores: the video-level matching score.
pub fn pair_score(scores: &FrameScores, weights: &FrameWeights) -> Result<f64> {
    if scores.s.len() != weights.w.len() {
        return Err(Error::Data(format!(
            "scores ({}) and weights ({}) differ in length",
            scores.s.len(),
            weights.w.len()
        )));
    }
    Ok(scores.s.iter().zip(&weights.w).map(|(s, w)| s * w).sum())
}

fn pooled_rows(x: &Array2<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    (0..x.ncols()).map(|j| x.column(j).sum() / n).collect()
}

/// Pooled video/query similarity for every pairing in a batch: mean-pool
/// both sequences, then sigmoid of the scaled dot product.
pub fn similarity_matrix(pairs: &[EncodedPair]) -> Array2<f64> {
    let k = pairs.len();
    if k == 0 {
        return Array2::zeros((0, 0));
    }
    let d = pairs[0].video.ncols();
    let vbar: Vec<Vec<f64>> = pairs.iter().map(|p| pooled_rows(&p.video)).collect();
    let qbar: Vec<Vec<f64>> = pairs.iter().map(|p| pooled_rows(&p.query)).collect();
    let scale = 1.0 / (d as f64).sqrt();
    Array2::from_shape_fn((k, k), |(a, b)| {
        let dot: f64 = vbar[a].iter().zip(&qbar[b]).map(|(x, y)| x * y).sum();
        sigmoid_scalar(dot * scale)
    })
}

/// Per-frame similarities of one sample's frames against its pooled query,
/// the vector the mining losses contrast.
pub fn frame_query_similarity(pair: &EncodedPair) -> Vec<f64> {
    let d = pair.video.ncols();
    let qbar = pooled_rows(&pair.query);
    let scale = 1.0 / (d as f64).sqrt();
    pair.video
        .rows()
        .into_iter()
        .map(|row| {
            let dot: f64 = row.iter().zip(&qbar).map(|(x, y)| x * y).sum();
            sigmoid_scalar(dot * scale)
        })
        .collect()
}

/// Score every video against every query by full re-interaction. Row k,
/// column j pairs video k with query j; the diagonal holds the matched
/// pairs.
pub fn cross_pair_scores(model: &Model, pairs: &[EncodedPair]) -> Result<PairScoreMatrix> {
    let k = pairs.len();
    let mut s_hat = Array2::zeros((k, k));
    for a in 0..k {
        for b in 0..k {
            let cross = EncodedPair {
                video: pairs[a].video.clone(),
                query: pairs[b].query.clone(),
            };
            let out: InteractionOutput = interact(model, &cross)?;
            let (scores, weights) = predict_scores(model, &out.features)?;
            s_hat[[a, b]] = pair_score(&scores, &weights)?;
        }
    }
    Ok(PairScoreMatrix { s_hat, sim: similarity_matrix(pairs) })
}

/// The batch pairing objective; see the module docs. Nonnegative because the
/// diagonal terms are a subset of the (all-positive) denominator terms.
pub fn score_loss(p: &PairScoreMatrix) -> f64 {
    let k = p.s_hat.nrows();
    assert_eq!(p.s_hat.dim(), p.sim.dim(), "pair matrix shapes");
    let mut num = 0.0;
    let mut den = 0.0;
    for a in 0..k {
        for b in 0..k {
            let t = p.s_hat[[a, b]] + p.sim[[a, b]];
            den += t;
            if a == b {
                num += t;
            }
        }
    }
    -(num / den).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_gradients, DEFAULT_EPS, DEFAULT_TOL};
    use crate::model::ModelConfig;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            d: 8,
            num_conv_layers: 2,
            conv_kernel: 3,
            num_heads: 2,
            ffn_hidden: 8,
            param_init_seed: 9,
        };
        Model::new(cfg, 12, 12).unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
    }

    #[test]
    fn scores_live_in_the_open_unit_interval() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let features = randn(&mut rng, 10, 8) * 3.0;
        let (scores, weights) = predict_scores(&model, &features).unwrap();
        assert_eq!(scores.s.len(), 10);
        assert!(scores.s.iter().all(|&s| s > 0.0 && s < 1.0));
        let wsum: f64 = weights.w.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-6);
        assert!(weights.w.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn single_frame_weight_is_one() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let features = randn(&mut rng, 1, 8);
        let (_, weights) = predict_scores(&model, &features).unwrap();
        assert_eq!(weights.w.len(), 1);
        assert!((weights.w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let features = randn(&mut rng, 5, 8);
        let report = check_param_gradients(&mut model, DEFAULT_EPS, |_, tape, p| {
            let x = tape.leaf(features.clone());
            let raw = head_node(tape, p, "head_s", x);
            let s = tape.sigmoid(raw);
            tape.sum_all(s)
        });
        assert!(report.max_rel_err < DEFAULT_TOL, "max err {:.3e}", report.max_rel_err);
    }

    #[test]
    fn pair_score_matches_hand_arithmetic() {
        let s = FrameScores { s: vec![0.5, 0.5] };
        let w = FrameWeights { w: vec![0.5, 0.5] };
        assert!((pair_score(&s, &w).unwrap() - 0.5).abs() < 1e-15);

        let s = FrameScores { s: vec![0.3, 0.7, 0.9] };
        let w = FrameWeights { w: vec![0.0, 1.0, 0.0] };
        assert!((pair_score(&s, &w).unwrap() - 0.7).abs() < 1e-15);

        let s = FrameScores { s: vec![0.9, 0.1, 0.5] };
        let w = FrameWeights { w: vec![0.2, 0.3, 0.5] };
        assert!((pair_score(&s, &w).unwrap() - 0.46).abs() < 1e-12);
    }

    #[test]
    fn pair_score_rejects_length_mismatch() {
        let s = FrameScores { s: vec![0.5] };
        let w = FrameWeights { w: vec![0.5, 0.5] };
        assert!(pair_score(&s, &w).is_err());
    }

    #[test]
    fn pair_score_is_a_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
            let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let t: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= t);
            let p = pair_score(&FrameScores { s: s.clone() }, &FrameWeights { w }).unwrap();
            let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }

    #[test]
    fn zero_features_give_half_similarity() {
        let pairs = vec![
            EncodedPair { video: Array2::zeros((3, 4)), query: Array2::zeros((2, 4)) },
            EncodedPair { video: Array2::zeros((5, 4)), query: Array2::zeros((2, 4)) },
        ];
        let sim = similarity_matrix(&pairs);
        assert!(sim.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn similarity_matches_hand_arithmetic() {
        // Single-row sequences make the pooled vectors explicit.
        let pairs = vec![
            EncodedPair { video: array![[1.0, 0.0]], query: array![[1.0, 0.0]] },
            EncodedPair { video: array![[0.0, 1.0]], query: array![[1.0, 1.0]] },
        ];
        let sim = similarity_matrix(&pairs);
        let e = sigmoid_scalar(1.0 / 2.0f64.sqrt());
        assert!((sim[[0, 0]] - e).abs() < 1e-4 && (e - 0.6698).abs() < 1e-4);
        assert!((sim[[0, 1]] - e).abs() < 1e-12);
        assert!((sim[[1, 0]] - 0.5).abs() < 1e-12);
        assert!((sim[[1, 1]] - e).abs() < 1e-12);
    }

    #[test]
    fn swapping_modality_roles_transposes_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let a = EncodedPair { video: randn(&mut rng, 3, 6), query: randn(&mut rng, 2, 6) };
        let b = EncodedPair { video: randn(&mut rng, 4, 6), query: randn(&mut rng, 5, 6) };
        // Build pairs where sample i's video comes with sample i's query,
        // then swap which sample supplies which modality.
        let forward = vec![
            EncodedPair { video: a.video.clone(), query: a.query.clone() },
            EncodedPair { video: b.video.clone(), query: b.query.clone() },
        ];
        let swapped = vec![
            EncodedPair { video: a.query.clone(), query: a.video.clone() },
            EncodedPair { video: b.query.clone(), query: b.video.clone() },
        ];
        let sim_f = similarity_matrix(&forward);
        let sim_s = similarity_matrix(&swapped);
        for i in 0..2 {
            for j in 0..2 {
                assert!((sim_f[[i, j]] - sim_s[[j, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_pair_diagonal_matches_direct_interaction() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let pairs = vec![EncodedPair { video: randn(&mut rng, 4, 8), query: randn(&mut rng, 3, 8) }];
        let matrix = cross_pair_scores(&model, &pairs).unwrap();
        assert_eq!(matrix.s_hat.dim(), (1, 1));
        let out = interact(&model, &pairs[0]).unwrap();
        let (s, w) = predict_scores(&model, &out.features).unwrap();
        let direct = pair_score(&s, &w).unwrap();
        assert!((matrix.s_hat[[0, 0]] - direct).abs() < 1e-12);
        assert!(matrix.s_hat[[0, 0]] > 0.0 && matrix.s_hat[[0, 0]] < 1.0);
    }

    #[test]
    fn duplicated_sample_duplicates_its_column() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = EncodedPair { video: randn(&mut rng, 4, 8), query: randn(&mut rng, 3, 8) };
        let b = EncodedPair { video: randn(&mut rng, 5, 8), query: randn(&mut rng, 2, 8) };
        let dup = EncodedPair { video: randn(&mut rng, 6, 8), query: a.query.clone() };
        let pairs = vec![a, b, dup];
        let matrix = cross_pair_scores(&model, &pairs).unwrap();
        // Queries of samples 0 and 2 coincide, so columns 0 and 2 agree.
        for row in 0..3 {
            assert!((matrix.s_hat[[row, 0]] - matrix.s_hat[[row, 2]]).abs() < 1e-6);
        }
    }

    #[test]
    fn score_loss_is_zero_for_a_single_pair() {
        let p = PairScoreMatrix {
            s_hat: array![[0.73]],
            sim: array![[0.41]],
        };
        assert!(score_loss(&p).abs() < 1e-15);
    }

    #[test]
    fn score_loss_matches_hand_arithmetic() {
        let p = PairScoreMatrix {
            s_hat: array![[0.9, 0.1], [0.1, 0.9]],
            sim: Array2::from_elem((2, 2), 0.5),
        };
        let loss = score_loss(&p);
        assert!((loss - (-(2.8f64 / 4.0).ln())).abs() < 1e-12);
        assert!((loss - 0.35667).abs() < 1e-4);
    }

    #[test]
    fn uniform_pair_matrix_gives_log_k() {
        for k in 1..6 {
            let p = PairScoreMatrix {
                s_hat: Array2::from_elem((k, k), 0.3),
                sim: Array2::from_elem((k, k), 0.6),
            };
            assert!((score_loss(&p) - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn score_loss_is_nonnegative_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        for _ in 0..100 {
            let k = rng.gen_range(1..8);
            let s_hat = Array2::from_shape_fn((k, k), |_| rng.gen_range(0.001..0.999));
            let sim = Array2::from_shape_fn((k, k), |_| rng.gen_range(0.001..0.999));
            let p = PairScoreMatrix { s_hat: s_hat.clone(), sim: sim.clone() };
            let base = score_loss(&p);
            assert!(base >= 0.0);

            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let permuted = PairScoreMatrix {
                s_hat: Array2::from_shape_fn((k, k), |(a, b)| s_hat[[perm[a], perm[b]]]),
                sim: Array2::from_shape_fn((k, k), |(a, b)| sim[[perm[a], perm[b]]]),
            };
            assert!((score_loss(&permuted) - base).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_query_similarity_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let pair = EncodedPair { video: randn(&mut rng, 7, 8), query: randn(&mut rng, 3, 8) };
        let u = frame_query_similarity(&pair);
        assert_eq!(u.len(), 7);
        assert!(u.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
