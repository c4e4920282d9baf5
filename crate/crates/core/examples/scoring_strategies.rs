//! Compares labeled, max and ensemble scoring on one trained model.

use qamo::presets;
use qamo::scoring::{score_dataset, ScoreStrategy, Scorer};
use qamo::training::train;

fn main() -> qamo::Result<()> {
    let (train_set, test_set) = presets::dataset(3)?;
    let config = presets::config(3, 0.1);
    let (_, checkpoint) = train(&train_set, &config)?;
    let scorer = Scorer::from_checkpoint(&checkpoint);
    let test = presets::inference_set(&test_set, &config.quality);

    for strategy in [
        ScoreStrategy::Labeled,
        ScoreStrategy::Max,
        ScoreStrategy::Ensemble,
    ] {
        let report = score_dataset(&test, &scorer, strategy)?;
        let s = report.summary.expect("labeled test set");
        println!(
            "{:<9} EER {:>6.2}%  bona fide {:+.3} ± {:.3}  spoof {:+.3} ± {:.3}",
            strategy.as_str(),
            100.0 * s.eer,
            s.bonafide_mean,
            s.bonafide_std,
            s.spoof_mean,
            s.spoof_std
        );
    }
    Ok(())
}
