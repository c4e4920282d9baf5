//! Runs the ablation arms in-process on one seed and prints test EERs.

use qamo::cli::ablation_arms;
use qamo::presets;
use qamo::scoring::{score_dataset, Scorer};
use qamo::training::train;

fn main() -> qamo::Result<()> {
    let seed = 2;
    let (train_set, test_set) = presets::dataset(seed)?;
    let base = presets::config(seed, 0.1);
    let test = presets::inference_set(&test_set, &base.quality);

    for (arm, config, strategies) in ablation_arms(&base) {
        let (report, checkpoint) = train(&train_set, &config)?;
        let scorer = Scorer::from_checkpoint(&checkpoint);
        for strategy in strategies {
            let eer = score_dataset(&test, &scorer, strategy)?
                .summary
                .map_or(f64::NAN, |s| s.eer);
            let cos = report
                .final_centroid_cosine()
                .map_or("-".into(), |c| format!("{c:.4}"));
            println!(
                "{arm:<16} {:<9} EER {:>6.2}%  cos {cos}",
                strategy.as_str(),
                100.0 * eer
            );
        }
    }
    Ok(())
}
