use frameground::data::{generate_synthetic, SyntheticSpec};
use frameground::mining::BoundScheduler;
use frameground::model::ModelConfig;
use frameground::train::{train, TrainConfig};

fn main() {
    let spec = SyntheticSpec {
        num_samples: 300,
        n: 64,
        m: 8,
        d_v: 32,
        d_q: 32,
        min_seg_frames: 8,
        max_seg_frames: 16,
        noise_std: 0.5,
        seed: 1,
    };
    let data = generate_synthetic(&spec).expect("synth");
    let train_set: Vec<_> = data[..200].to_vec();

    let model_config = ModelConfig::default();
    let config = TrainConfig {
        epochs: 8,
        warmup_epochs: 1,
        scheduler: BoundScheduler {
            warmup_epochs: 1,
            ..BoundScheduler::default()
        },
        ..TrainConfig::default()
    };
    let t = std::time::Instant::now();
    let _out = train(&train_set, model_config, config).expect("train");
    let total = t.elapsed().as_secs_f64();
    println!("total {:.2} s, {:.0} ms/epoch", total, total / 8.0 * 1e3);
}
