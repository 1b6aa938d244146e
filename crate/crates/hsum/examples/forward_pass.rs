//! Run one video through the encoder in both modes and inspect the outputs.
//!
//! Child mode fuses the frames with one token per subtitle; parent mode
//! replaces the text side with a single video-level description token that
//! spans every frame. Both produce per-frame keyframe probabilities, replay
//! regressions, [CLS] summary embeddings on the unit sphere, and (child
//! only, at sentence granularity) key-sentence probabilities.
//!
//! Usage: `cargo run -p hsum --example forward_pass`

use hsum::alignment::build_fused_sequence;
use hsum::dataset::{load_sample, synth_generate, SynthConfig};
use hsum::network::{forward, init_params, ModelConfig, TrainMode};

fn norm(v: &ndarray::Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn range(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut synth = SynthConfig::new(5, 1);
    synth.steps_per_video = 3;
    synth.frames_per_step = 4;
    let manifest = synth_generate(&synth, dir.path())?;
    let sample = load_sample(&manifest, &manifest.entries[0].video_id)?;

    let config = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        ffn_dim: 64,
        dropout: 0.1, // ignored outside training: inference is deterministic
        d_v: synth.d_v,
        d_t: synth.d_t,
        max_frames: 64,
        max_text: 16,
    };
    let params = init_params(&config, 11)?;

    for mode in [TrainMode::Child, TrainMode::Parent] {
        let fused = build_fused_sequence(&sample, &params, mode)?;
        let out = forward(&params, &sample, mode)?;
        println!("{mode} mode:");
        println!(
            "  fused sequence: {} tokens x {} dims (1 + {} frames + 1 + {} text)",
            fused.tokens.nrows(),
            fused.tokens.ncols(),
            fused.layout.n_frames,
            fused.layout.n_text
        );
        let (lo, hi) = range(&out.frame_scores);
        println!(
            "  frame scores: {} values in [{lo:.3}, {hi:.3}] (sigmoid probabilities)",
            out.frame_scores.len()
        );
        let (rlo, rhi) = range(&out.replay_pred);
        println!("  replay regression: range [{rlo:.3}, {rhi:.3}]");
        match out.sentence_scores.as_slice() {
            [] => println!("  sentence scores: none"),
            [only] => println!("  sentence score of the global token: {only:.3}"),
            scores => {
                let (slo, shi) = range(scores);
                println!("  sentence scores: {} values in [{slo:.3}, {shi:.3}]", scores.len());
            }
        }
        println!(
            "  |cls_video| = {:.6}, |cls_text| = {:.6} (normalized for the contrastive terms)",
            norm(&out.cls_video),
            norm(&out.cls_text)
        );
        println!();
    }

    // Two runs on the same weights agree bit for bit.
    let a = forward(&params, &sample, TrainMode::Child)?;
    let b = forward(&params, &sample, TrainMode::Child)?;
    println!(
        "repeated forward is bitwise identical: {}",
        if a.frame_scores == b.frame_scores && a.token_embeddings == b.token_embeddings {
            "yes"
        } else {
            "NO"
        }
    );
    Ok(())
}
