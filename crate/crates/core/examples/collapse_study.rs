//! Trains with and without the quality term across the acceptance seeds and
//! reports the final mean cosine between centroids.

use qamo::presets;
use qamo::training::train;

fn main() -> qamo::Result<()> {
    println!("seed  cos(lambda=0.1)  cos(lambda=0)");
    for seed in presets::SEEDS {
        let (train_set, _) = presets::dataset(seed)?;
        let cos = |lambda| -> qamo::Result<f64> {
            let (report, _) = train(&train_set, &presets::config(seed, lambda))?;
            Ok(report.final_centroid_cosine().unwrap_or(f64::NAN))
        };
        println!("{seed:>4}  {:>15.4}  {:>13.4}", cos(0.1)?, cos(0.0)?);
    }
    Ok(())
}
