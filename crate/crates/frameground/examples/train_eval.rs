//! Smallest complete pipeline: synthesize a dataset, train with the full
//! objective, localize on held-out samples, and print the recall table.
//!
//! Takes roughly half a minute. The warm-up phase trains the pairing
//! objective alone; the contrastive losses switch on afterwards and the log
//! lines below show them start moving.
//!
//! Run with: cargo run --release --example train_eval

use frameground::data::{generate_synthetic, SyntheticSpec};
use frameground::encoder::encode_sample;
use frameground::localize::localize;
use frameground::localize::TimeInterval;
use frameground::metrics::evaluate_dataset;
use frameground::mining::BoundScheduler;
use frameground::model::ModelConfig;
use frameground::scoring::predict_scores;
use frameground::train::{train, TrainConfig};

fn main() -> frameground::Result<()> {
    let spec = SyntheticSpec {
        num_samples: 80,
        n: 32,
        m: 6,
        d_v: 16,
        d_q: 16,
        min_seg_frames: 4,
        max_seg_frames: 8,
        noise_std: 0.5,
        seed: 21,
    };
    let data = generate_synthetic(&spec)?;
    let (train_set, test_set) = data.split_at(60);

    let model_config = ModelConfig {
        d: 16,
        num_conv_layers: 2,
        conv_kernel: 3,
        num_heads: 2,
        ffn_hidden: 16,
        param_init_seed: 17,
    };
    let config = TrainConfig {
        epochs: 100,
        batch_size: 8,
        warmup_epochs: 30,
        scheduler: BoundScheduler { warmup_epochs: 30, ..BoundScheduler::default() },
        seed: 7,
        ..TrainConfig::default()
    };

    println!("training on {} samples, testing on {}", train_set.len(), test_set.len());
    let (model, log) = train(train_set, model_config, config)?;
    for record in log.iter().step_by(20).chain(log.last()) {
        println!(
            "epoch {:>3}: lr {:.4} score {:.4} frame {:.4} segment {:.4} total {:.4}",
            record.epoch, record.lr, record.l_score, record.l_fra, record.l_seg, record.total
        );
    }

    let predictions: Vec<(String, Vec<TimeInterval>)> = test_set
        .iter()
        .map(|s| {
            let (_, interaction) =
                encode_sample(&model, &s.video_features, &s.query_features)?;
            let (scores, _) = predict_scores(&model, &interaction.features)?;
            Ok((s.sample_id.clone(), localize(&scores.s, s.frame_duration)?))
        })
        .collect::<frameground::Result<_>>()?;
    let ground_truths: Vec<(String, TimeInterval)> = test_set
        .iter()
        .map(|s| (s.sample_id.clone(), s.ground_truth.clone().unwrap()))
        .collect();

    let report = evaluate_dataset(&predictions, &ground_truths, &[1, 5], &[0.3, 0.5, 0.7])?;
    println!("\n{}", report.to_table_string());
    Ok(())
}
