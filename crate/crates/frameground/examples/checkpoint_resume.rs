//! Interrupt training, save a checkpoint, reload it, and show the resumed
//! run reproduces the straight run exactly. Works because the optimizer
//! state rides along in the checkpoint and each epoch's shuffle is seeded
//! independently of history.
//!
//! Run with: cargo run --example checkpoint_resume

use frameground::data::{generate_synthetic, SyntheticSpec};
use frameground::mining::BoundScheduler;
use frameground::model::ModelConfig;
use frameground::train::{TrainConfig, TrainSession};

fn main() -> frameground::Result<()> {
    let spec = SyntheticSpec {
        num_samples: 12,
        n: 12,
        m: 4,
        d_v: 8,
        d_q: 8,
        min_seg_frames: 3,
        max_seg_frames: 5,
        noise_std: 0.5,
        seed: 5,
    };
    let data = generate_synthetic(&spec)?;
    let model_config = ModelConfig {
        d: 8,
        num_conv_layers: 2,
        conv_kernel: 3,
        num_heads: 2,
        ffn_hidden: 8,
        param_init_seed: 17,
    };
    let config = TrainConfig {
        epochs: 10,
        batch_size: 4,
        warmup_epochs: 3,
        scheduler: BoundScheduler { warmup_epochs: 3, ..BoundScheduler::default() },
        seed: 3,
        ..TrainConfig::default()
    };

    // Straight run to completion.
    let mut straight = TrainSession::new(model_config.clone(), 8, 8, config.clone())?;
    let mut straight_log = Vec::new();
    while !straight.is_complete() {
        straight_log.push(straight.run_epoch(&data, None)?);
    }

    // Same run, interrupted after 5 epochs and resumed from disk.
    let mut first_half = TrainSession::new(model_config, 8, 8, config)?;
    for _ in 0..5 {
        first_half.run_epoch(&data, None)?;
    }
    let path = std::env::temp_dir().join("frameground_example_resume.bin");
    first_half.save_checkpoint(&path)?;
    println!("checkpoint after 5 epochs: {}", path.display());

    let mut resumed = TrainSession::load_checkpoint(&path)?;
    println!("resumed at epoch {}", resumed.completed_epochs());
    let tail = resumed.train_remaining(&data)?;

    println!("\nepoch  straight-total  resumed-total");
    for record in &tail {
        let other = &straight_log[record.epoch];
        println!("{:>5}  {:>14.8} {:>14.8}", record.epoch, other.total, record.total);
        assert_eq!(record.total, other.total, "resumed run diverged");
    }
    println!("\nresumed epochs match the straight run bit for bit");
    std::fs::remove_file(&path).ok();
    Ok(())
}
