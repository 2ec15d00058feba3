//! Train briefly, then plot one sample's frame score curve as ASCII art
//! next to its ground truth, the mean-score bound, and the localized
//! intervals. This is the same data the `plot-scores` command writes as CSV.
//!
//! Run with: cargo run --release --example score_curves

use frameground::data::{generate_synthetic, SyntheticSpec};
use frameground::encoder::encode_sample;
use frameground::localize::localize;
use frameground::mining::{extract_segments, BoundScheduler};
use frameground::model::ModelConfig;
use frameground::scoring::predict_scores;
use frameground::train::{train, TrainConfig};

fn main() -> frameground::Result<()> {
    let spec = SyntheticSpec {
        num_samples: 48,
        n: 40,
        m: 6,
        d_v: 16,
        d_q: 16,
        min_seg_frames: 5,
        max_seg_frames: 10,
        noise_std: 0.5,
        seed: 33,
    };
    let data = generate_synthetic(&spec)?;

    let model_config = ModelConfig {
        d: 16,
        num_conv_layers: 2,
        conv_kernel: 3,
        num_heads: 2,
        ffn_hidden: 16,
        param_init_seed: 17,
    };
    let config = TrainConfig {
        epochs: 80,
        batch_size: 8,
        warmup_epochs: 25,
        scheduler: BoundScheduler { warmup_epochs: 25, ..BoundScheduler::default() },
        seed: 7,
        ..TrainConfig::default()
    };
    println!("training on {} samples...", data.len());
    let (model, _) = train(&data, model_config, config)?;

    let sample = &data[0];
    let (_, interaction) =
        encode_sample(&model, &sample.video_features, &sample.query_features)?;
    let (scores, weights) = predict_scores(&model, &interaction.features)?;
    let b_u = scores.s.iter().sum::<f64>() / scores.s.len() as f64;
    let segments = extract_segments(&scores.s, b_u);
    let gt = sample.ground_truth.as_ref().unwrap();
    let dt = sample.frame_duration;

    println!("\nsample {}: b_u = {b_u:.4}, ground truth [{:.0}s, {:.0}s]", sample.sample_id, gt.start, gt.end);
    println!("{:>5} {:>7} {:>7}  {:<24} {:>4} {:>3}", "frame", "score", "weight", "score bar (| marks b_u)", "top", "gt");
    for (i, (&s, &w)) in scores.s.iter().zip(&weights.w).enumerate() {
        let mut bar: Vec<char> = vec![' '; 24];
        let fill = (s * 23.0).round() as usize;
        for c in bar.iter_mut().take(fill + 1) {
            *c = '=';
        }
        let bu_pos = (b_u * 23.0).round() as usize;
        bar[bu_pos] = '|';
        let mid = (i as f64 + 0.5) * dt;
        let in_gt = mid >= gt.start && mid < gt.end;
        println!(
            "{i:>5} {s:>7.4} {w:>7.4}  {} {:>4} {:>3}",
            bar.into_iter().collect::<String>(),
            if segments.positive_mask[i] { "*" } else { "" },
            if in_gt { "x" } else { "" },
        );
    }

    println!("\nlocalized intervals (ranked):");
    for interval in localize(&scores.s, dt)?.iter().take(3) {
        println!(
            "  [{:>5.1}s, {:>5.1}s] rank score {:.4}",
            interval.start, interval.end, interval.rank_score
        );
    }
    Ok(())
}
