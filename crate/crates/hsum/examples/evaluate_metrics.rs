//! Tour the evaluation metrics on hand-sized inputs, then on a real model.
//!
//! Covers binary F1 with multi-annotator aggregation, the tie-corrected rank
//! correlations, MAP at a positive fraction, ROUGE text overlap, and the
//! mean-of-max cosine between selected and reference frames — then trains a
//! few epochs on synthetic data and prints the aggregated report the same
//! way `hsum eval` does.
//!
//! Usage: `cargo run --release -p hsum --example evaluate_metrics`

use hsum::dataset::{load_sample, synth_generate, Split, SynthConfig};
use hsum::metrics::{
    cosine_sim_metric, f1_binary, f1_summary, kendall_tau, map_at_rho, rouge_scores,
    spearman_rho, F1Aggregate,
};
use hsum::network::ModelConfig;
use hsum::trainer::{evaluate, fit, EvalProtocol, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("binary F1:");
    let pred = [1u8, 1, 0, 0];
    println!("  {pred:?} vs [1,0,1,0]: {:.3}", f1_binary(&pred, &[1, 0, 1, 0])?);
    let annotators = vec![vec![1u8, 0, 1, 0], vec![1, 1, 0, 0]];
    println!(
        "  two annotators, mean {:.3} / max {:.3}",
        f1_summary(&pred, &annotators, F1Aggregate::Mean)?,
        f1_summary(&pred, &annotators, F1Aggregate::Max)?
    );

    println!("\nrank correlations (tie-aware):");
    let a = [1.0, 1.0, 2.0, 3.0];
    let b = [1.0, 2.0, 2.0, 3.0];
    println!("  tau({a:?}, {b:?}) = {:.4}", kendall_tau(&a, &b)?);
    println!("  rho({a:?}, {b:?}) = {:.4}", spearman_rho(&a, &b)?);

    println!("\naverage precision at a positive fraction:");
    let gt = [9.0, 1.0, 1.0, 1.0];
    println!(
        "  best shot ranked last, rho=0.25: {:.3}",
        map_at_rho(&[0.1, 0.2, 0.3, 0.4], &gt, 0.25)?
    );
    println!(
        "  best shot ranked first, rho=0.25: {:.3}",
        map_at_rho(&[0.9, 0.2, 0.3, 0.4], &gt, 0.25)?
    );

    println!("\nROUGE on a one-word edit:");
    let r = rouge_scores(&["the cat sat"], &["the cat ran"])?;
    println!("  R-1 {:.3}, R-2 {:.3}, R-L {:.3}", r.rouge_1, r.rouge_2, r.rouge_l);

    println!("\ncosine between frame sets (mean over references of the best match):");
    let selected = ndarray::array![[1.0, 0.0]];
    let reference = ndarray::array![[1.0, 0.0], [0.5, 0.75f64.sqrt()]];
    println!("  one of two references matched exactly: {:.3}", cosine_sim_metric(&selected, &reference)?);

    // The same metrics aggregated over a dataset, via a quick training run.
    let dir = tempfile::tempdir()?;
    let mut synth = SynthConfig::new(8, 6);
    synth.steps_per_video = 3;
    synth.frames_per_step = 4;
    synth.d_v = 16;
    synth.d_t = 12;
    let manifest = synth_generate(&synth, dir.path())?;
    let model = ModelConfig {
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
    let config = TrainConfig { epochs: 30, warmup_epochs: 2, seed: 8, ..TrainConfig::default() };
    let result = fit(&manifest, &model, &config)?;

    let samples: Vec<_> = manifest
        .split_ids(Split::Train)
        .into_iter()
        .map(|id| load_sample(&manifest, &id).map(|s| (id, s)))
        .collect::<Result<_, _>>()?;
    let report = evaluate(&result.params, &samples, &EvalProtocol::default())?;
    println!("\nafter {} epochs on 6 synthetic videos:", config.epochs);
    println!("  mean F1: {:.4}", report.mean_f1);
    if let Some(tau) = report.mean_kendall_tau {
        println!("  mean Kendall tau: {tau:.4}");
    }
    if let Some(rho) = report.mean_spearman_rho {
        println!("  mean Spearman rho: {rho:.4}");
    }
    for (rho, value) in report.map_rhos.iter().zip(&report.mean_map) {
        match value {
            Some(v) => println!("  MAP@{rho}: {v:.4}"),
            None => println!("  MAP@{rho}: undefined (no positives at this fraction)"),
        }
    }
    if let Some(c) = report.mean_cosine {
        println!("  mean cosine similarity: {c:.4}");
    }
    println!("\nper-video CSV (as written by the eval command):");
    print!("{}", report.csv());
    Ok(())
}
