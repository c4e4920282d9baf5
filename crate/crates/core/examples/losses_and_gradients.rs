//! Evaluates each loss on a small random batch and checks its embedding
//! gradient against central finite differences.

use qamo::data::Label;
use qamo::losses::{
    combined_loss, oc_softmax_loss, qamo_loss, quality_loss, Batch, LossOutput, QamoHyper,
};
use qamo::model::{init_centroids, CentroidBank, InitScheme};
use qamo::numerics::{
    finite_diff_grad, gaussian_vec, relative_error, unit_normalize, Matrix, SeededRng,
    DEFAULT_FD_STEP,
};

type Loss = fn(&Batch, &CentroidBank, &QamoHyper) -> qamo::Result<LossOutput>;

fn main() -> qamo::Result<()> {
    let mut rng = SeededRng::new(42);
    let (n, dim) = (6, 8);
    let rows = (0..n)
        .map(|_| unit_normalize(&gaussian_vec(&mut rng, &vec![0.0; dim], 1.0)))
        .collect::<qamo::Result<Vec<_>>>()?;
    let labels = vec![
        Label::Bonafide,
        Label::Bonafide,
        Label::Bonafide,
        Label::Spoof,
        Label::Spoof,
        Label::Spoof,
    ];
    let quality = vec![Some(0), Some(1), Some(1), None, None, None];
    let batch = Batch::new(Matrix::from_rows(&rows)?, labels.clone(), quality.clone())?;
    let bank = init_centroids(2, dim, InitScheme::Orthogonal, &mut rng)?;
    let single = init_centroids(1, dim, InitScheme::Orthogonal, &mut rng)?;
    let hyper = QamoHyper::default();

    let cases: [(&str, Loss, &CentroidBank); 4] = [
        ("qamo", qamo_loss, &bank),
        ("quality", quality_loss, &bank),
        ("combined", combined_loss, &bank),
        ("oc-softmax", oc_softmax_loss, &single),
    ];
    for (name, f, bank) in cases {
        let out = f(&batch, bank, &hyper)?;
        let numeric = finite_diff_grad(
            |v| {
                let b = Batch::new(
                    Matrix {
                        rows: n,
                        cols: dim,
                        data: v.to_vec(),
                    },
                    labels.clone(),
                    quality.clone(),
                )
                .unwrap();
                f(&b, bank, &hyper).unwrap().value
            },
            &batch.embeddings.data,
            DEFAULT_FD_STEP,
        );
        println!(
            "{name:<10} value {:.6}  grad rel. error {:.2e}",
            out.value,
            relative_error(&out.grad_embeddings.data, &numeric)
        );
    }
    Ok(())
}
