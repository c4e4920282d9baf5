//! Trains QAMO on the four-cluster synthetic set and prints per-epoch
//! metrics, then the test EER.

use qamo::presets;
use qamo::scoring::{score_dataset, ScoreStrategy, Scorer};
use qamo::training::train;

fn main() -> qamo::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let (train_set, test_set) = presets::dataset(seed)?;
    let config = presets::config(seed, 0.1);
    let (report, checkpoint) = train(&train_set, &config)?;

    println!("epoch  loss      val EER   centroid cos");
    for e in report.epochs.iter().step_by(5) {
        println!(
            "{:>5}  {:.5}  {:>7}   {:.4}",
            e.epoch,
            e.train_loss,
            e.val_eer_ensemble
                .map_or("-".into(), |v| format!("{:.2}%", 100.0 * v)),
            e.centroid_cosine.unwrap_or(f64::NAN)
        );
    }
    let test = presets::inference_set(&test_set, &config.quality);
    let scores = score_dataset(
        &test,
        &Scorer::from_checkpoint(&checkpoint),
        ScoreStrategy::Ensemble,
    )?;
    if let Some(s) = scores.summary {
        println!(
            "test EER {:.2}% at threshold {:.4}",
            100.0 * s.eer,
            s.threshold
        );
    }
    Ok(())
}
