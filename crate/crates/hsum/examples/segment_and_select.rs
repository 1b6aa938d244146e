//! Segment a video into shots and assemble a summary under a length budget.
//!
//! Change-point detection minimizes within-shot feature scatter with a
//! penalty per extra shot, so blocks of similar frames come out as single
//! shots. Frame scores are then pooled per shot and a 0/1 knapsack picks the
//! best shot subset within a frame budget; top-k selection is the simpler
//! per-frame alternative.
//!
//! Usage: `cargo run -p hsum --example segment_and_select`

use hsum::dataset::{load_sample, synth_generate, SynthConfig};
use hsum::segmentation::{frame_to_shot_scores, kts_segment};
use hsum::summarizer::{knapsack_select, topk_select};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut synth = SynthConfig::new(123, 1);
    synth.steps_per_video = 3;
    synth.frames_per_step = 5;
    let manifest = synth_generate(&synth, dir.path())?;
    let sample = load_sample(&manifest, &manifest.entries[0].video_id)?;

    let planted: Vec<usize> = sample.subtitles.iter().map(|s| s.start_frame).collect();
    println!(
        "video of {} frames, built from 3 steps starting at {planted:?}",
        sample.n_frames()
    );

    let features = sample.frame_features.mapv(f64::from);
    let shots = kts_segment(&features, 6, 1.0)?;
    println!(
        "detected {} shots with change points {:?} (penalized scatter, up to 6 allowed)",
        shots.n_shots(),
        shots.change_points()
    );

    // Use the replay signal as a stand-in for model scores.
    let frame_scores: Vec<f64> = sample
        .replay_scores
        .as_ref()
        .expect("generator writes replay scores")
        .iter()
        .map(|&r| f64::from(r))
        .collect();
    let shot_scores = frame_to_shot_scores(&frame_scores, &shots)?;
    let lengths = shots.lengths();
    println!("\nper-shot mean score and length:");
    for (i, ((a, b), score)) in shots.segments().iter().zip(&shot_scores).enumerate() {
        println!("  shot {i}: frames {a:2}..{b:2} (len {}), score {score:.3}", b - a);
    }

    let budget = sample.n_frames() / 2;
    let picked = knapsack_select(&shot_scores, &lengths, budget)?;
    let kept: usize = picked
        .iter()
        .zip(&lengths)
        .filter(|(&p, _)| p == 1)
        .map(|(_, &l)| l)
        .sum();
    println!(
        "\nknapsack at budget {budget} frames picks shots {:?} ({kept} frames kept)",
        (0..picked.len()).filter(|&i| picked[i] == 1).collect::<Vec<_>>()
    );

    let topk = topk_select(&frame_scores, 0.4)?;
    println!(
        "top-40% per-frame selection keeps frames {:?}",
        (0..topk.len()).filter(|&i| topk[i] == 1).collect::<Vec<_>>()
    );
    Ok(())
}
