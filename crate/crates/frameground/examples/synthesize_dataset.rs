//! Generate a synthetic grounding dataset and round-trip it through the
//! manifest format.
//!
//! Each sample is a (video, query) feature pair built around a shared latent
//! prototype: frames inside a randomly placed foreground segment and the
//! query tokens both carry the prototype plus noise, background frames carry
//! an unrelated direction. The ground-truth interval records where the
//! segment was placed, in seconds.
//!
//! Run with: cargo run --example synthesize_dataset

use frameground::data::{generate_synthetic, load_manifest, save_manifest, SyntheticSpec};

fn main() -> frameground::Result<()> {
    let spec = SyntheticSpec {
        num_samples: 6,
        n: 24,
        m: 5,
        d_v: 16,
        d_q: 16,
        min_seg_frames: 4,
        max_seg_frames: 8,
        noise_std: 0.5,
        seed: 42,
    };
    let samples = generate_synthetic(&spec)?;

    println!("generated {} samples:", samples.len());
    for s in &samples {
        let gt = s.ground_truth.as_ref().unwrap();
        println!(
            "  {}: video {}x{}, query {}x{}, foreground [{:.1}s, {:.1}s] of {:.1}s",
            s.sample_id,
            s.n(),
            s.video_features.ncols(),
            s.m(),
            s.query_features.ncols(),
            gt.start,
            gt.end,
            s.n() as f64 * s.frame_duration,
        );
    }

    let dir = std::env::temp_dir().join("frameground_example_dataset");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).ok();
    }
    std::fs::create_dir_all(&dir).map_err(|e| frameground::Error::io(&dir, e))?;
    let manifest = save_manifest(&samples, &dir)?;
    println!("\nmanifest written to {}", manifest.display());

    let reloaded = load_manifest(&manifest)?;
    assert_eq!(reloaded.len(), samples.len());
    assert_eq!(reloaded[0].video_features, samples[0].video_features);
    println!("reloaded {} samples, features identical", reloaded.len());
    Ok(())
}
