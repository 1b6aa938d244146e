//! Overfit a small synthetic dataset and watch every metric saturate.
//!
//! Generates 8 step-structured videos, trains with the small-batch config
//! (batch 2, cosine schedule, parent batch every 2nd step), then scores the
//! training split: classification F1, rank correlations of the predicted
//! replay scores, MAP, ROUGE and cosine similarity.
//!
//! Usage: `cargo run --release -p hsum --example train_overfit [epochs]`

use hsum::dataset::{load_sample, synth_generate, Split, SynthConfig};
use hsum::losses::LossWeights;
use hsum::network::ModelConfig;
use hsum::trainer::{evaluate, fit, EvalProtocol, Scheduler, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(200);

    let dir = tempfile::tempdir()?;
    let mut synth = SynthConfig::new(7, 8);
    synth.steps_per_video = 4;
    synth.frames_per_step = 5;
    let manifest = synth_generate(&synth, dir.path())?;
    println!(
        "dataset: {} videos x {} frames, {} subtitles each",
        manifest.entries.len(),
        synth.steps_per_video * synth.frames_per_step,
        synth.steps_per_video
    );

    let model = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        ffn_dim: 64,
        dropout: 0.0,
        d_v: synth.d_v,
        d_t: synth.d_t,
        max_frames: 64,
        max_text: 16,
    };
    // Replay values differ only slightly between frames of the same step, so
    // the regression term gets extra weight to pin down those orderings.
    let weights = LossWeights {
        alpha_mse: 20.0,
        beta: 0.1,
        ..LossWeights::default()
    };
    let train = TrainConfig {
        batch_size: 2,
        epochs,
        learning_rate: 1e-3,
        scheduler: Scheduler::Cosine,
        warmup_epochs: 5,
        global_step: 2,
        seed: 7,
        weights,
        ..TrainConfig::default()
    };

    let start = std::time::Instant::now();
    let result = fit(&manifest, &model, &train)?;
    let elapsed = start.elapsed();

    println!("\ntraining loss by epoch (child / parent means):");
    let steps_per_epoch = result.history.steps.len() / epochs;
    for epoch in (1..=epochs).filter(|e| e % (epochs / 10).max(1) == 0 || *e == 1) {
        let in_epoch: Vec<_> = result
            .history
            .steps
            .iter()
            .filter(|s| s.epoch == epoch)
            .collect();
        let mean = |parent: bool| {
            let vals: Vec<f64> = in_epoch
                .iter()
                .filter(|s| (s.role == hsum::network::TrainMode::Parent) == parent)
                .map(|s| s.total)
                .collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        };
        println!(
            "  epoch {epoch:>4}: child {:.4}  parent {:.4}",
            mean(false),
            mean(true)
        );
    }
    println!(
        "{} steps ({} per epoch) in {:.1?}",
        result.history.steps.len(),
        steps_per_epoch,
        elapsed
    );

    let samples: Vec<_> = manifest
        .split_ids(Split::Train)
        .into_iter()
        .map(|id| -> Result<_, hsum::error::HsumError> {
            let sample = load_sample(&manifest, &id)?;
            Ok((id, sample))
        })
        .collect::<Result<_, _>>()?;
    let report = evaluate(&result.params, &samples, &EvalProtocol::default())?;

    println!("\ntraining-split metrics after {epochs} epochs:");
    println!("  F1      {:.4}", report.mean_f1);
    println!(
        "  tau     {:.4}",
        report.mean_kendall_tau.unwrap_or(f64::NAN)
    );
    println!(
        "  rho     {:.4}",
        report.mean_spearman_rho.unwrap_or(f64::NAN)
    );
    for (rho, map) in report.map_rhos.iter().zip(&report.mean_map) {
        println!("  MAP@{rho:<4} {:.4}", map.unwrap_or(f64::NAN));
    }
    if let Some(rouge) = &report.mean_rouge {
        println!(
            "  ROUGE-1/2/L {:.4} / {:.4} / {:.4}",
            rouge.rouge_1, rouge.rouge_2, rouge.rouge_l
        );
    }
    if let Some(cos) = report.mean_cosine {
        println!("  cosine  {cos:.4}");
    }
    Ok(())
}
