//! Build the training objective term by term and watch where gradients flow.
//!
//! The batch objective combines focal classification losses on both [CLS]
//! heads, a replay-score regression, a cross-sample contrastive term with
//! hard-negative mining, and (child mode only) a within-video contrastive
//! term pulling each subtitle toward the frames it covers. Parent batches
//! drop the text-side supervision, so the sentence head receives no
//! gradient there — shown at the end by inspecting the tape.
//!
//! Usage: `cargo run -p hsum --example losses_walkthrough`

use hsum::dataset::{load_sample, synth_generate, SynthConfig, VideoSample};
use hsum::losses::{batch_loss_on_tape, focal_loss, LossWeights, MiningConfig};
use hsum::network::{init_params, ModelConfig, TapedParams, TrainMode};
use hsum::tape::Tape;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut synth = SynthConfig::new(17, 4);
    synth.steps_per_video = 3;
    synth.frames_per_step = 4;
    synth.d_v = 8;
    synth.d_t = 6;
    let manifest = synth_generate(&synth, dir.path())?;
    let samples: Vec<VideoSample> = manifest
        .entries
        .iter()
        .map(|e| load_sample(&manifest, &e.video_id))
        .collect::<Result<_, _>>()?;
    let batch: Vec<&VideoSample> = samples.iter().collect();

    let config = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 24,
        dropout: 0.0,
        d_v: synth.d_v,
        d_t: synth.d_t,
        max_frames: 32,
        max_text: 8,
    };
    let params = init_params(&config, 170)?;
    let weights = LossWeights::default();
    let mining = MiningConfig::default();

    // The focal term on a standalone prediction, for intuition: confident
    // mistakes dominate, well-classified frames are down-weighted.
    println!("focal loss per frame (alpha 0.25, gamma 2):");
    for (p, y) in [(0.9, 1u8), (0.6, 1), (0.1, 1), (0.9, 0)] {
        println!("  p={p:.1}, label={y}: {:.4}", focal_loss(&[p], &[y], 0.25, 2.0)?);
    }
    println!();

    for mode in [TrainMode::Child, TrainMode::Parent] {
        let tape = Tape::new();
        let taped = TapedParams::stage(&tape, &params);
        let loss = batch_loss_on_tape(&tape, &taped, &batch, mode, &weights, &mining, None)?;
        let parts = loss.breakdown.parts;
        println!("{mode} batch of {}:", batch.len());
        println!("  frame classification (video CLS path): {:.4}", parts.cls_video);
        println!("  sentence classification (text CLS path): {:.4}", parts.cls_text);
        println!("  replay regression: {:.4}", parts.mse);
        println!("  cross-sample contrastive: {:.4}", parts.inter);
        println!("  within-video contrastive: {:.4}", parts.intra);
        println!("  weighted total: {:.4}", loss.breakdown.total);

        let grads = tape.backward(loss.total)?;
        println!("  gradient norms:");
        for leaf in ["head_frame_w", "head_sentence_w", "head_replay_w", "proj_text_w"] {
            let norm: f64 = taped
                .leaves()
                .iter()
                .filter(|(name, _)| name == leaf)
                .map(|&(_, var)| {
                    grads
                        .try_get(var)
                        .map_or(0.0, |g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
                })
                .sum();
            let note = if norm == 0.0 { "  <- no gradient this mode" } else { "" };
            println!("    {leaf:<16} {norm:.6}{note}");
        }
        println!();
    }
    Ok(())
}
