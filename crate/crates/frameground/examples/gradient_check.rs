//! Verify the analytic gradients of the full training objective against
//! central finite differences on a tiny two-sample batch.
//!
//! The mined masks are frozen at their current values before probing:
//! mask selection is a detached, piecewise-constant decision, so the
//! gradient is taken with the masks held fixed, and the finite-difference
//! probe has to see the same fixed objective.
//!
//! Run with: cargo run --example gradient_check

use frameground::autodiff::Tape;
use frameground::data::{batchify, generate_synthetic, SyntheticSpec};
use frameground::gradcheck::check_param_gradients;
use frameground::mining::BoundScheduler;
use frameground::model::{Model, ModelConfig};
use frameground::train::{batch_graph, TrainConfig};

fn main() -> frameground::Result<()> {
    let spec = SyntheticSpec {
        num_samples: 2,
        n: 8,
        m: 4,
        d_v: 12,
        d_q: 12,
        min_seg_frames: 2,
        max_seg_frames: 4,
        noise_std: 0.5,
        seed: 11,
    };
    let samples = generate_synthetic(&spec)?;
    let batch = batchify(&samples, 2)?.remove(0);

    let mut model = Model::new(
        ModelConfig {
            d: 8,
            num_conv_layers: 2,
            conv_kernel: 3,
            num_heads: 2,
            ffn_hidden: 8,
            param_init_seed: 5,
        },
        12,
        12,
    )?;
    let config = TrainConfig {
        warmup_epochs: 2,
        scheduler: BoundScheduler { warmup_epochs: 2, ..BoundScheduler::default() },
        batch_size: 2,
        ..TrainConfig::default()
    };
    let epoch = 5;

    let frozen = {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        batch_graph(&mut tape, &p, &model, &batch, epoch, &config, None)?
            .mining
            .expect("mining active past warm-up")
    };

    let report = check_param_gradients(&mut model, 1e-5, |m, tape, p| {
        batch_graph(tape, p, m, &batch, epoch, &config, Some(&frozen))
            .unwrap()
            .total
    });

    println!(
        "checked {} parameter scalars, max relative error {:.3e}",
        report.checked, report.max_rel_err
    );
    if let Some((name, idx, analytic, numeric)) = &report.worst {
        println!("worst: {name}[{idx}] analytic {analytic:.6e} vs numeric {numeric:.6e}");
    }
    assert!(report.max_rel_err < 1e-4);
    println!("gradients agree with finite differences");
    Ok(())
}
