//! Generate a synthetic step-structured dataset and inspect what it encodes.
//!
//! Each video is a sequence of "steps" (scenes); every step contributes a
//! block of frames around a shared latent direction plus one subtitle whose
//! feature lives in text space. A per-video description feature marks which
//! steps matter, and replay scores separate important frames (>= 0.5) from
//! background (< 0.1), so the 0.15 threshold recovers binary labels exactly.
//!
//! Usage: `cargo run -p hsum --example synthesize_dataset [out_dir]`

use hsum::dataset::{
    load_sample, replay_to_labels, synth_generate, Split, SynthConfig, DEFAULT_REPLAY_THRESHOLD,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let keep_dir = std::env::args().nth(1);
    let tmp;
    let out = match &keep_dir {
        Some(dir) => std::path::PathBuf::from(dir),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };

    let mut config = SynthConfig::new(42, 10);
    config.steps_per_video = 4;
    config.frames_per_step = 5;
    config.n_val = 2;
    config.n_test = 2;
    let manifest = synth_generate(&config, &out)?;

    println!("wrote {} videos under {}", manifest.entries.len(), out.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("  {split:?}: {:?}", manifest.split_ids(split));
    }

    let sample = load_sample(&manifest, &manifest.entries[0].video_id)?;
    println!(
        "\n{}: {} frames x d_v={}, {} subtitles x d_t={}, global feature: {}",
        sample.video_id,
        sample.n_frames(),
        sample.frame_features.ncols(),
        sample.n_subtitles(),
        manifest.d_t,
        if sample.global_feature.is_some() { "yes" } else { "no" }
    );

    let replay = sample.replay_scores.as_ref().expect("generator always writes replay");
    let labels = replay_to_labels(replay, DEFAULT_REPLAY_THRESHOLD)?;
    println!("\nper-step replay ranges (threshold {DEFAULT_REPLAY_THRESHOLD}):");
    for (s, subtitle) in sample.subtitles.iter().enumerate() {
        let span = &replay[subtitle.start_frame..subtitle.end_frame];
        let lo = span.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = span.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span_labels = &labels[subtitle.start_frame..subtitle.end_frame];
        println!(
            "  step {s} (frames {:2}..{:2}): replay [{lo:.3}, {hi:.3}] -> labels {span_labels:?}",
            subtitle.start_frame, subtitle.end_frame
        );
    }

    let stored = sample.frame_labels.as_ref().expect("generator stores labels too");
    println!(
        "\nstored labels match the threshold rule: {}",
        if stored == &labels { "yes" } else { "NO" }
    );
    Ok(())
}
