//! Training loop: warm-up, coarse-to-fine mining, total-loss optimization,
//! checkpointing.
//!
//! One "iteration" is one epoch over the shuffled dataset. Every batch builds
//! a single autodiff graph covering all K x K cross pairs, takes one backward
//! pass and one optimizer step. Mining decisions (bounds, masks, segments)
//! are made from detached frame scores and enter the graph only as frozen
//! 0/1 constants, so gradients flow exclusively through the frame-similarity
//! values being contrasted.

use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{NodeId, Tape};
use crate::data::{batchify, sub_seed, Batch, FeatureSample};
use crate::encoder::{encode_node, project_node};
use crate::error::{Error, Result};
use crate::mining::{extract_segments, frame_masks, BoundScheduler, MaskSet, SegmentSet};
use crate::model::{Model, ModelConfig, TapeParams};
use crate::scoring::frame_similarity_node;

/// Adaptive-moment optimizer with bias correction. Moment buffers are
/// aligned with the parameter store's insertion order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(model: &Model, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Array2<f64>> = model
            .params
            .entries()
            .iter()
            .map(|(_, value)| Array2::zeros(value.dim()))
            .collect();
        Adam { beta1, beta2, eps, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`; `grads` must be aligned with the
    /// model's parameter order.
    pub fn step(&mut self, model: &mut Model, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient/parameter count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, param)) in model.params.entries_mut().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

/// Training hyperparameters. Defaults reproduce the reference schedule:
/// 200 epochs, batches of 16, lr 0.01 decaying linearly to 0, loss weights
/// 10 (frame) and 5 (segment), 50 warm-up epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lambda_fra: f64,
    pub lambda_seg: f64,
    pub warmup_epochs: usize,
    pub scheduler: BoundScheduler,
    pub seed: u64,
    /// Extra checkpoint cadence in epochs; the final state is always saved
    /// by the driver. None = final only.
    pub checkpoint_every: Option<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            lr0: 0.01,
            lambda_fra: 10.0,
            lambda_seg: 5.0,
            warmup_epochs: 50,
            scheduler: BoundScheduler::default(),
            seed: 7,
            checkpoint_every: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.epochs <= self.warmup_epochs {
            return Err(Error::Config(format!(
                "epochs ({}) must exceed warmup_epochs ({})",
                self.epochs, self.warmup_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.lambda_fra < 0.0 || self.lambda_seg < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.scheduler.warmup_epochs != self.warmup_epochs {
            return Err(Error::Config(format!(
                "scheduler warm-up ({}) disagrees with warmup_epochs ({})",
                self.scheduler.warmup_epochs, self.warmup_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("moment decay rates must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("optimizer epsilon must be positive".into()));
        }
        self.scheduler.validate()
    }

    /// Per-epoch learning rate: linear decay from lr0 to 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * (1.0 - epoch as f64 / self.epochs as f64)
    }
}

/// Weighted total loss. During warm-up the mined components are forced to
/// zero regardless of their values.
pub fn total_loss(l_score: f64, l_fra: f64, l_seg: f64, config: &TrainConfig, epoch: usize) -> f64 {
    if epoch < config.warmup_epochs {
        l_score
    } else {
        l_score + config.lambda_fra * l_fra + config.lambda_seg * l_seg
    }
}

/// One line of the training log. `b_l` is the scheduled (pre-clamp) lower
/// bound; `clamp_margin_max` is the largest per-sample post-clamp excess
/// of b_l over b_u seen this epoch and must never be positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_score: f64,
    pub l_fra: f64,
    pub l_seg: f64,
    pub total: f64,
    pub b_l: f64,
    pub b_u_mean: f64,
    pub clamp_margin_max: f64,
    pub fra_skipped: usize,
    pub seg_skipped: usize,
}

/// Per-sample mining snapshot for one epoch: which frames were contrasted at
/// each scale. `b_l` here is the post-clamp per-sample bound. Frame indices
/// are valid-range indices; `n` is the sample's true length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningTraceRecord {
    pub epoch: usize,
    pub sample_id: String,
    pub n: usize,
    pub b_l: f64,
    pub b_u: f64,
    pub positive_frames: Vec<usize>,
    pub negative_frames: Vec<usize>,
    pub positive_segment_frames: Vec<usize>,
    pub negative_segment_frames: Vec<usize>,
}

/// Frozen mining decisions for one sample.
#[derive(Debug, Clone)]
pub struct SampleMining {
    pub sample_id: String,
    pub n: usize,
    /// Post-clamp lower bound, min(scheduled, b_u).
    pub b_l: f64,
    pub b_u: f64,
    pub frames: MaskSet,
    pub segments: SegmentSet,
}

/// Mining decisions for a whole batch, in batch order.
#[derive(Debug, Clone)]
pub struct MinedBatch {
    pub samples: Vec<SampleMining>,
}

/// Handles into the per-batch loss graph. Optional nodes are absent when the
/// corresponding loss is inactive (warm-up, zero weight, or skipped by
/// degenerate masks).
pub struct BatchGraph {
    pub l_score: NodeId,
    pub l_fra: Option<NodeId>,
    pub l_seg: Option<NodeId>,
    pub total: NodeId,
    /// K x K weighted pair scores.
    pub s_hat: NodeId,
    /// K x K pooled cross similarities.
    pub sim: NodeId,
    /// Per-sample mean frame score (detached), always populated.
    pub b_u: Vec<f64>,
    /// Mining decisions used by the loss nodes; None during warm-up or when
    /// both mined losses have zero weight.
    pub mining: Option<MinedBatch>,
    /// Mining ran but the frame loss had no positives or no negatives.
    pub fra_skipped: bool,
    pub seg_skipped: bool,
}

/// 0/1 column (rows x 1) from valid-range mask positions.
fn mask_column(rows: usize, mask: &[bool]) -> Array2<f64> {
    let mut col = Array2::zeros((rows, 1));
    for (i, &on) in mask.iter().enumerate() {
        if on {
            col[[i, 0]] = 1.0;
        }
    }
    col
}

/// Sum a non-empty list of scalar nodes.
fn sum_nodes(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n);
    }
    acc
}

/// Ratio loss -log(num/den) over pre-summed scalar terms; None when either
/// side has no contributing frames.
fn ratio_loss_nodes(
    tape: &mut Tape,
    num_terms: &[NodeId],
    den_terms: &[NodeId],
    num_count: usize,
    den_count: usize,
) -> Option<NodeId> {
    if num_count == 0 || den_count == 0 {
        return None;
    }
    let num = sum_nodes(tape, num_terms);
    let den = sum_nodes(tape, den_terms);
    let ln_num = tape.ln(num);
    let ln_den = tape.ln(den);
    Some(tape.sub(ln_den, ln_num))
}

/// Build the full loss graph for one batch on the caller's tape.
///
/// All K² pair interactions share one stacked FFN/head evaluation; padded
/// rows are kept at zero by masking and excluded from every reduction. When
/// `frozen` is given, its mining decisions are reused instead of re-mining
/// from the current scores (the contract under finite-difference probing:
/// masks are constants, not functions of the parameters).
pub fn batch_graph(
    tape: &mut Tape,
    p: &TapeParams,
    model: &Model,
    batch: &Batch,
    epoch: usize,
    config: &TrainConfig,
    frozen: Option<&MinedBatch>,
) -> Result<BatchGraph> {
    let k = batch.len();
    let n_max = batch.n_max();
    let d = model.config.d;
    let timing = std::env::var("FG_TIME").is_ok();
    let t0 = std::time::Instant::now();

    // Per-sample encoding; convolution windows must not straddle samples.
    let mut enc_v = Vec::with_capacity(k);
    let mut enc_q = Vec::with_capacity(k);
    let mut vbar = Vec::with_capacity(k);
    let mut qbar = Vec::with_capacity(k);
    for i in 0..k {
        let v_leaf = tape.leaf(batch.padded_video(i));
        let q_leaf = tape.leaf(batch.padded_query(i));
        let n_valid = batch.n_valid(i);
        let m_valid = batch.m_valid(i);
        let v_proj = project_node(tape, p, "proj_v", v_leaf, n_valid);
        let q_proj = project_node(tape, p, "proj_q", q_leaf, m_valid);
        let v_enc = encode_node(tape, p, model, v_proj, n_valid);
        let q_enc = encode_node(tape, p, model, q_proj, m_valid);
        vbar.push(tape.mean_rows_masked(v_enc, n_valid));
        qbar.push(tape.mean_rows_masked(q_enc, m_valid));
        enc_v.push(v_enc);
        enc_q.push(q_enc);
    }

    if timing {
        eprintln!("  encode: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);
    }
    let t1 = std::time::Instant::now();

    // Pooled cross-pair similarity matrix, K x K.
    let vbar_stack = tape.concat_rows(&vbar);
    let qbar_stack = tape.concat_rows(&qbar);
    let sim_raw = tape.matmul_nt(vbar_stack, qbar_stack);
    let sim_scaled = tape.scale(sim_raw, 1.0 / (d as f64).sqrt());
    let sim = tape.sigmoid(sim_scaled);

    // All pair interactions, stacked row-major (video k, query j) into one
    // FFN + head evaluation. The fused node carries the same math as the
    // per-pair reference path in `cross_pair_scores`.
    let n_valids: Vec<usize> = (0..k).map(|i| batch.n_valid(i)).collect();
    let m_valids: Vec<usize> = (0..k).map(|i| batch.m_valid(i)).collect();
    let stacked = tape.pair_interact(&enc_v, &enc_q, &n_valids, &m_valids);
    if timing {
        eprintln!("  pair_interact: {:.1} ms", t1.elapsed().as_secs_f64() * 1e3);
    }
    let t2 = std::time::Instant::now();
    let head_params = [
        p.id("ffn.w1"),
        p.id("ffn.b1"),
        p.id("ffn.w2"),
        p.id("ffn.b2"),
        p.id("head_s.w1"),
        p.id("head_s.b1"),
        p.id("head_s.w2"),
        p.id("head_s.b2"),
        p.id("head_s.w3"),
        p.id("head_s.b3"),
        p.id("head_w.w1"),
        p.id("head_w.b1"),
        p.id("head_w.w2"),
        p.id("head_w.b2"),
        p.id("head_w.w3"),
        p.id("head_w.b3"),
    ];
    let head_cols = tape.ffn_heads(stacked, &head_params);
    let scores_all = tape.slice_cols(head_cols, 0, 1);
    let weight_raw = tape.slice_cols(head_cols, 1, 1);
    if timing {
        eprintln!("  ffn+heads: {:.1} ms", t2.elapsed().as_secs_f64() * 1e3);
    }
    let t4 = std::time::Instant::now();

    // Weighted per-pair scores. The weight softmax zeroes padded rows, so
    // the stacked features need no re-masking before this reduction.
    let s_hat = tape.pair_score_readout(scores_all, weight_raw, &n_valids);
    if timing {
        eprintln!("  readout+rest: {:.1} ms", t4.elapsed().as_secs_f64() * 1e3);
    }

    // Score loss: matched pairs on the diagonal against all pairs.
    let t_mat = tape.add(s_hat, sim);
    let eye = Array2::from_shape_fn((k, k), |(i, j)| if i == j { 1.0 } else { 0.0 });
    let diag = tape.hadamard_const(t_mat, eye);
    let num = tape.sum_all(diag);
    let den = tape.sum_all(t_mat);
    let ln_num = tape.ln(num);
    let ln_den = tape.ln(den);
    let l_score = tape.sub(ln_den, ln_num);

    // Detached diagonal frame scores drive mining and the b_u log.
    let all_scores = tape.value(scores_all);
    let detached: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let offset = (i * k + i) * n_max;
            (0..batch.n_valid(i)).map(|r| all_scores[[offset + r, 0]]).collect()
        })
        .collect();
    let b_u: Vec<f64> = detached
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();

    let mine_now = epoch >= config.warmup_epochs
        && (config.lambda_fra > 0.0 || config.lambda_seg > 0.0);
    let mining = if mine_now {
        Some(match frozen {
            Some(m) => m.clone(),
            None => {
                let samples = (0..k)
                    .map(|i| {
                        let (b_l, b_u_i) = config.scheduler.bounds_at(epoch, &detached[i]);
                        SampleMining {
                            sample_id: batch.samples[i].sample_id.clone(),
                            n: batch.n_valid(i),
                            b_l,
                            b_u: b_u_i,
                            frames: frame_masks(&detached[i], b_l, b_u_i),
                            segments: extract_segments(&detached[i], b_u_i),
                        }
                    })
                    .collect();
                MinedBatch { samples }
            }
        })
    } else {
        None
    };

    // Contrastive losses on frame-query similarities u, with the mined masks
    // entering as constants. Sums run across the whole batch inside the
    // ratio; a side with no frames anywhere skips the loss.
    let mut l_fra = None;
    let mut l_seg = None;
    let mut fra_skipped = false;
    let mut seg_skipped = false;
    if let Some(mined) = &mining {
        let u_nodes: Vec<NodeId> = (0..k)
            .map(|i| frame_similarity_node(tape, d, enc_v[i], qbar[i]))
            .collect();
        let masked_sums = |tape: &mut Tape, select: &dyn Fn(&SampleMining) -> &[bool]| {
            let mut terms = Vec::new();
            let mut count = 0usize;
            for (i, sm) in mined.samples.iter().enumerate() {
                let mask = select(sm);
                let on = mask.iter().filter(|&&b| b).count();
                if on == 0 {
                    continue;
                }
                count += on;
                let col = mask_column(n_max, mask);
                let picked = tape.hadamard_const(u_nodes[i], col);
                terms.push(tape.sum_all(picked));
            }
            (terms, count)
        };

        if config.lambda_fra > 0.0 {
            let (pos_terms, pos_n) = masked_sums(tape, &|sm| &sm.frames.positive);
            let (neg_terms, neg_n) = masked_sums(tape, &|sm| &sm.frames.negative);
            l_fra = ratio_loss_nodes(tape, &pos_terms, &neg_terms, pos_n, neg_n);
            fra_skipped = l_fra.is_none();
        }
        if config.lambda_seg > 0.0 {
            let (pos_terms, pos_n) = masked_sums(tape, &|sm| &sm.segments.positive_mask);
            let (neg_terms, neg_n) = masked_sums(tape, &|sm| &sm.segments.negative_mask);
            l_seg = ratio_loss_nodes(tape, &pos_terms, &neg_terms, pos_n, neg_n);
            seg_skipped = l_seg.is_none();
        }
    }

    let mut total = l_score;
    if let Some(f) = l_fra {
        let weighted = tape.scale(f, config.lambda_fra);
        total = tape.add(total, weighted);
    }
    if let Some(s) = l_seg {
        let weighted = tape.scale(s, config.lambda_seg);
        total = tape.add(total, weighted);
    }

    Ok(BatchGraph {
        l_score,
        l_fra,
        l_seg,
        total,
        s_hat,
        sim,
        b_u,
        mining,
        fra_skipped,
        seg_skipped,
    })
}

/// Scalar outcomes plus parameter gradients for one batch.
struct BatchEval {
    l_score: f64,
    l_fra: f64,
    l_seg: f64,
    total: f64,
    fra_skipped: bool,
    seg_skipped: bool,
    b_u: Vec<f64>,
    mining: Option<MinedBatch>,
    grads: Vec<Array2<f64>>,
}

fn eval_batch(
    model: &Model,
    batch: &Batch,
    epoch: usize,
    config: &TrainConfig,
    frozen: Option<&MinedBatch>,
) -> Result<BatchEval> {
    let timing = std::env::var("FG_TIME").is_ok();
    let tb0 = std::time::Instant::now();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let graph = batch_graph(&mut tape, &p, model, batch, epoch, config, frozen)?;
    let tb1 = std::time::Instant::now();
    let mut grads_by_id = tape.backward(graph.total);
    let tb2 = std::time::Instant::now();
    if timing {
        eprintln!(
            "  graph {:.1} backward {:.1} ms",
            (tb1 - tb0).as_secs_f64() * 1e3,
            (tb2 - tb1).as_secs_f64() * 1e3
        );
    }
    let grads = p
        .ordered_ids()
        .iter()
        .zip(model.params.entries())
        .map(|(&id, (_, value))| {
            grads_by_id
                .take(id)
                .unwrap_or_else(|| Array2::zeros(value.dim()))
        })
        .collect();
    Ok(BatchEval {
        l_score: tape.scalar(graph.l_score),
        l_fra: graph.l_fra.map_or(0.0, |n| tape.scalar(n)),
        l_seg: graph.l_seg.map_or(0.0, |n| tape.scalar(n)),
        total: tape.scalar(graph.total),
        fra_skipped: graph.fra_skipped,
        seg_skipped: graph.seg_skipped,
        b_u: graph.b_u,
        mining: graph.mining,
        grads,
    })
}

/// Stateful training driver: owns the model, optimizer, and epoch counter.
#[derive(Debug)]
pub struct TrainSession {
    pub model: Model,
    config: TrainConfig,
    adam: Adam,
    completed_epochs: usize,
}

impl TrainSession {
    pub fn new(
        model_config: ModelConfig,
        d_v: usize,
        d_q: usize,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, d_v, d_q)?;
        let adam = Adam::new(&model, config.adam_beta1, config.adam_beta2, config.adam_eps);
        Ok(TrainSession { model, config, adam, completed_epochs: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn completed_epochs(&self) -> usize {
        self.completed_epochs
    }

    pub fn is_complete(&self) -> bool {
        self.completed_epochs >= self.config.epochs
    }

    /// Run one epoch over `data` in a seed-derived shuffle order, stepping
    /// the optimizer once per batch. Appends one mining trace record per
    /// sample to `trace` for post-warm-up epochs.
    pub fn run_epoch(
        &mut self,
        data: &[FeatureSample],
        mut trace: Option<&mut Vec<MiningTraceRecord>>,
    ) -> Result<TrainLogRecord> {
        if data.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        let epoch = self.completed_epochs;
        if epoch >= self.config.epochs {
            return Err(Error::Config(format!(
                "training already complete at {} epochs",
                self.config.epochs
            )));
        }
        let lr = self.config.lr_at(epoch);

        let timing = std::env::var("FG_TIME_EPOCH").is_ok();
        let te = std::time::Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let shuffled: Vec<FeatureSample> = order.iter().map(|&i| data[i].clone()).collect();
        let batches = batchify(&shuffled, self.config.batch_size)?;
        let mut t_eval = 0.0;
        let mut t_step = 0.0;

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut skips = (0usize, 0usize);
        let mut b_u_sum = 0.0;
        let mut b_u_count = 0usize;
        let mut clamp_margin_max = f64::NEG_INFINITY;
        let scheduled_b_l = self.config.scheduler.lower_bound(epoch);

        for (bi, batch) in batches.iter().enumerate() {
            let tb = std::time::Instant::now();
            let eval = eval_batch(&self.model, batch, epoch, &self.config, None)?;
            t_eval += tb.elapsed().as_secs_f64();
            if !eval.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at epoch {epoch}, batch {bi}",
                    eval.total
                )));
            }
            let tb = std::time::Instant::now();
            self.adam.step(&mut self.model, &eval.grads, lr);
            t_step += tb.elapsed().as_secs_f64();

            sums.0 += eval.l_score;
            sums.1 += eval.l_fra;
            sums.2 += eval.l_seg;
            sums.3 += eval.total;
            skips.0 += eval.fra_skipped as usize;
            skips.1 += eval.seg_skipped as usize;
            for &b in &eval.b_u {
                b_u_sum += b;
                b_u_count += 1;
                let margin = scheduled_b_l.min(b) - b;
                clamp_margin_max = clamp_margin_max.max(margin);
            }
            if let (Some(out), Some(mined)) = (trace.as_deref_mut(), &eval.mining) {
                for sm in &mined.samples {
                    out.push(MiningTraceRecord {
                        epoch,
                        sample_id: sm.sample_id.clone(),
                        n: sm.n,
                        b_l: sm.b_l,
                        b_u: sm.b_u,
                        positive_frames: mask_indices(&sm.frames.positive),
                        negative_frames: mask_indices(&sm.frames.negative),
                        positive_segment_frames: mask_indices(&sm.segments.positive_mask),
                        negative_segment_frames: mask_indices(&sm.segments.negative_mask),
                    });
                }
            }
        }

        if timing {
            eprintln!(
                "epoch {:.1} ms: eval {:.1} step {:.1} other {:.1}",
                te.elapsed().as_secs_f64() * 1e3,
                t_eval * 1e3,
                t_step * 1e3,
                (te.elapsed().as_secs_f64() - t_eval - t_step) * 1e3
            );
        }

        let nb = batches.len() as f64;
        self.completed_epochs += 1;
        Ok(TrainLogRecord {
            epoch,
            lr,
            l_score: sums.0 / nb,
            l_fra: sums.1 / nb,
            l_seg: sums.2 / nb,
            total: sums.3 / nb,
            b_l: scheduled_b_l,
            b_u_mean: b_u_sum / b_u_count as f64,
            clamp_margin_max,
            fra_skipped: skips.0,
            seg_skipped: skips.1,
        })
    }

    /// Run all remaining epochs, collecting one log record per epoch.
    pub fn train_remaining(&mut self, data: &[FeatureSample]) -> Result<Vec<TrainLogRecord>> {
        let mut log = Vec::with_capacity(self.config.epochs - self.completed_epochs);
        while !self.is_complete() {
            log.push(self.run_epoch(data, None)?);
        }
        Ok(log)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            model: self.model.config.clone(),
            d_v: self.model.d_v,
            d_q: self.model.d_q,
            train: self.config.clone(),
            completed_epochs: self.completed_epochs,
            adam_t: self.adam.t,
            params: self
                .model
                .params
                .entries()
                .iter()
                .map(|(name, value)| ParamMeta {
                    name: name.clone(),
                    rows: value.nrows(),
                    cols: value.ncols(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

        let mut bytes = Vec::new();
        bytes.extend_from_slice(CKPT_MAGIC);
        bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for (_, value) in self.model.params.entries() {
            write_f64s(&mut bytes, value);
        }
        for m in &self.adam.m {
            write_f64s(&mut bytes, m);
        }
        for v in &self.adam.v {
            write_f64s(&mut bytes, v);
        }
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

        if bytes.len() < CKPT_MAGIC.len() + 4 + 8 + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        if &body[..CKPT_MAGIC.len()] != CKPT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut at = CKPT_MAGIC.len();
        let version = u32::from_le_bytes(body[at..at + 4].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(corrupt(&format!(
                "unsupported version {version}, expected {CKPT_VERSION}"
            )));
        }
        at += 4;
        let header_len = u64::from_le_bytes(body[at..at + 8].try_into().unwrap()) as usize;
        at += 8;
        if body.len() < at + header_len {
            return Err(corrupt("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[at..at + header_len])
            .map_err(|e| corrupt(&format!("unreadable header: {e}")))?;
        at += header_len;

        header.train.validate()?;
        let mut model = Model::new(header.model.clone(), header.d_v, header.d_q)?;
        let scalar_count: usize = header.params.iter().map(|m| m.rows * m.cols).sum();
        if body.len() - at != scalar_count * 3 * 8 {
            return Err(corrupt("payload size disagrees with header shapes"));
        }
        let read_tensors = |at: &mut usize| -> Result<Vec<Array2<f64>>> {
            header
                .params
                .iter()
                .map(|meta| {
                    let n = meta.rows * meta.cols;
                    let vals = read_f64s(&body[*at..*at + n * 8]);
                    *at += n * 8;
                    Array2::from_shape_vec((meta.rows, meta.cols), vals)
                        .map_err(|e| corrupt(&format!("tensor {}: {e}", meta.name)))
                })
                .collect()
        };
        let params = read_tensors(&mut at)?;
        let m = read_tensors(&mut at)?;
        let v = read_tensors(&mut at)?;
        for (meta, value) in header.params.iter().zip(params) {
            model
                .params
                .set(&meta.name, value)
                .map_err(|e| corrupt(&format!("parameter {}: {e}", meta.name)))?;
        }

        let mut adam = Adam::new(
            &model,
            header.train.adam_beta1,
            header.train.adam_beta2,
            header.train.adam_eps,
        );
        for (slot, loaded) in adam.m.iter_mut().zip(m) {
            if slot.dim() != loaded.dim() {
                return Err(corrupt("optimizer moment shape mismatch"));
            }
            *slot = loaded;
        }
        for (slot, loaded) in adam.v.iter_mut().zip(v) {
            if slot.dim() != loaded.dim() {
                return Err(corrupt("optimizer moment shape mismatch"));
            }
            *slot = loaded;
        }
        adam.t = header.adam_t;

        Ok(TrainSession {
            model,
            config: header.train,
            adam,
            completed_epochs: header.completed_epochs,
        })
    }
}

/// Train a fresh model to completion; dimensions are taken from the data.
pub fn train(
    data: &[FeatureSample],
    model_config: ModelConfig,
    config: TrainConfig,
) -> Result<(Model, Vec<TrainLogRecord>)> {
    let first = data
        .first()
        .ok_or_else(|| Error::Data("cannot train on an empty dataset".into()))?;
    let mut session = TrainSession::new(
        model_config,
        first.video_features.ncols(),
        first.query_features.ncols(),
        config,
    )?;
    let log = session.train_remaining(data)?;
    Ok((session.model, log))
}

fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

const CKPT_MAGIC: &[u8; 4] = b"FGCK";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    d_v: usize,
    d_q: usize,
    train: TrainConfig,
    completed_epochs: usize,
    adam_t: u64,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
}

fn write_f64s(out: &mut Vec<u8>, values: &Array2<f64>) {
    for &v in values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}
