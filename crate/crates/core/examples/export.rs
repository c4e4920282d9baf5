//! Writes score histograms and embeddings as CSV for external plotting.
//!
//! Usage: `cargo run --example export -- [out-dir]`

use std::fs::File;
use std::path::PathBuf;

use qamo::presets;
use qamo::scoring::{
    export_distributions, export_embeddings, score_dataset, write_embeddings_csv,
    write_histogram_csv, ScoreStrategy, Scorer,
};
use qamo::training::train;
use qamo::QamoError;

fn main() -> qamo::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "qamo-out/export-example".into()),
    );
    std::fs::create_dir_all(&out).map_err(|e| QamoError::io(&out, e))?;

    let (train_set, test_set) = presets::dataset(1)?;
    let config = presets::config(1, 0.1);
    let (_, checkpoint) = train(&train_set, &config)?;
    let test = presets::inference_set(&test_set, &config.quality);
    let scores = score_dataset(
        &test,
        &Scorer::from_checkpoint(&checkpoint),
        ScoreStrategy::Ensemble,
    )?;

    let create = |name: &str| {
        let path = out.join(name);
        File::create(&path).map_err(|e| QamoError::io(&path, e))
    };
    write_histogram_csv(
        &export_distributions(&scores, 20)?,
        create("histogram.csv")?,
    )?;
    write_embeddings_csv(
        &export_embeddings(&test, &checkpoint.encoder)?,
        create("embeddings.csv")?,
    )?;
    println!(
        "wrote {}/histogram.csv and {}/embeddings.csv",
        out.display(),
        out.display()
    );
    Ok(())
}
