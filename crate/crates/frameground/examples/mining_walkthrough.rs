//! Walk through the self-contrastive mining rules on a hand-written score
//! curve: bounds, frame masks, segment extraction, and how the lower bound
//! tightens the negative band over training.
//!
//! Run with: cargo run --example mining_walkthrough

use frameground::mining::{extract_segments, frame_masks, BoundScheduler};

fn band(scores: &[f64], mask: &[bool]) -> String {
    scores
        .iter()
        .zip(mask)
        .map(|(_, &m)| if m { '#' } else { '.' })
        .collect()
}

fn main() {
    // Two runs above the mean of different quality, a flat background, and
    // one hard negative (0.42) sitting just under the mean.
    let scores = vec![
        0.21, 0.24, 0.80, 0.85, 0.90, 0.83, 0.25, 0.22, 0.55, 0.60, 0.23, 0.20, 0.18, 0.42,
    ];
    let b_u = scores.iter().sum::<f64>() / scores.len() as f64;
    println!("frame scores: {scores:?}");
    println!("upper bound b_u (mean score) = {b_u:.4}\n");

    let scheduler = BoundScheduler::default();
    println!("lower-bound schedule (pre-clamp), cycle length {}:", scheduler.e0);
    for epoch in [0, 49, 50, 100, 150, 200] {
        println!("  epoch {epoch:>3}: b_l = {:.6e}", scheduler.lower_bound(epoch));
    }
    println!();

    // The negative band is [b_l, b_u]: raising b_l drops the easiest
    // negatives first, leaving only hard near-boundary frames late on.
    for epoch in [50, 150, 200, 250] {
        let (b_l, b_u) = scheduler.bounds_at(epoch, &scores);
        let masks = frame_masks(&scores, b_l, b_u);
        println!(
            "epoch {epoch:>3}: b_l = {b_l:.4e}  positives {}  negatives {}",
            band(&scores, &masks.positive),
            band(&scores, &masks.negative),
        );
    }
    println!();

    let set = extract_segments(&scores, b_u);
    println!("maximal runs above b_u:");
    for seg in &set.segments {
        println!(
            "  frames {:>2}-{:<2} mean score {:.4}",
            seg.start_frame, seg.end_frame, seg.score
        );
    }
    println!("segment positives {}", band(&scores, &set.positive_mask));
    println!("segment negatives {}", band(&scores, &set.negative_mask));
}
