mod common;

use common::*;
use proptest::prelude::*;
use qamo::data::Label;
use qamo::losses::{combined_loss, qamo_loss, quality_loss, Batch, QamoHyper};
use qamo::model::CentroidBank;
use qamo::numerics::{Matrix, SeededRng};

fn rows_of(bank: &CentroidBank) -> Vec<Vec<f64>> {
    bank.centroids.iter_rows().map(<[f64]>::to_vec).collect()
}

fn single(x: &[f64], label: Label, q: Option<usize>) -> Batch {
    Batch::new(
        Matrix::from_rows(&[x.to_vec()]).unwrap(),
        vec![label],
        vec![q],
    )
    .unwrap()
}

#[test]
fn batch_loss_is_mean_of_per_sample_oracle() {
    let mut rng = SeededRng::new(7);
    for _ in 0..50 {
        let n = 1 + rng.below(12);
        let levels = 1 + rng.below(4);
        let p = random_problem(&mut rng, n, levels, 6);
        let cents = rows_of(&p.bank);
        let (mut one_class, mut quality) = (0.0, 0.0);
        for (i, x) in p.batch.embeddings.iter_rows().enumerate() {
            let label = p.batch.labels[i];
            let q = p.batch.quality[i].unwrap_or(0);
            one_class += one_class_oracle(x, &cents, label, q, &p.hyper);
            if label == Label::Bonafide {
                quality += quality_oracle(x, &cents, q, &p.hyper);
            }
        }
        // one-class loss averages over the batch, quality over bona fide samples
        let n_all = n as f64;
        let n_bona = p
            .batch
            .labels
            .iter()
            .filter(|&&l| l == Label::Bonafide)
            .count();
        let quality_mean = if n_bona == 0 {
            0.0
        } else {
            quality / n_bona as f64
        };
        let qamo = qamo_loss(&p.batch, &p.bank, &p.hyper).unwrap().value;
        let qual = quality_loss(&p.batch, &p.bank, &p.hyper).unwrap().value;
        let total = combined_loss(&p.batch, &p.bank, &p.hyper).unwrap().value;
        assert!((qamo - one_class / n_all).abs() < 1e-10);
        assert!((qual - quality_mean).abs() < 1e-10);
        assert!((total - (one_class / n_all + p.hyper.lambda * quality_mean)).abs() < 1e-10);
    }
}

#[test]
fn zero_lambda_combined_is_bitwise_qamo() {
    let mut rng = SeededRng::new(8);
    let mut p = random_problem(&mut rng, 9, 3, 5);
    p.hyper.lambda = 0.0;
    let a = combined_loss(&p.batch, &p.bank, &p.hyper).unwrap();
    let b = qamo_loss(&p.batch, &p.bank, &p.hyper).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.grad_embeddings, b.grad_embeddings);
    assert_eq!(a.grad_centroids, b.grad_centroids);
}

#[test]
fn bonafide_loss_falls_and_spoof_loss_rises_with_similarity() {
    let h = QamoHyper::default();
    let bank = CentroidBank::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let at = |c: f64, label, q| {
        let x = [c, (1.0 - c * c).sqrt()];
        qamo_loss(&single(&x, label, q), &bank, &h).unwrap().value
    };
    let grid: Vec<f64> = (0..=40).map(|i| -1.0 + i as f64 / 20.0).collect();
    for w in grid.windows(2) {
        assert!(at(w[1], Label::Bonafide, Some(0)) < at(w[0], Label::Bonafide, Some(0)));
        assert!(at(w[1], Label::Spoof, None) > at(w[0], Label::Spoof, None));
    }
}

#[test]
fn all_spoof_batch_has_zero_quality_term() {
    let mut rng = SeededRng::new(9);
    let rows: Vec<Vec<f64>> = (0..4).map(|_| random_unit(&mut rng, 3)).collect();
    let batch = Batch::new(
        Matrix::from_rows(&rows).unwrap(),
        vec![Label::Spoof; 4],
        vec![None; 4],
    )
    .unwrap();
    let bank = CentroidBank::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    let out = quality_loss(&batch, &bank, &QamoHyper::default()).unwrap();
    assert_eq!(out.value, 0.0);
    assert!(out.grad_centroids.data.iter().all(|&g| g == 0.0));
}

proptest! {
    #[test]
    fn combined_loss_is_permutation_invariant(seed in 0u64..500, shift in 1usize..8) {
        let mut rng = SeededRng::new(seed);
        let p = random_problem(&mut rng, 8, 3, 4);
        let order: Vec<usize> = (0..8).map(|i| (i + shift) % 8).collect();
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| p.batch.embeddings.row(i).to_vec()).collect();
        let permuted = Batch::new(
            Matrix::from_rows(&rows).unwrap(),
            order.iter().map(|&i| p.batch.labels[i]).collect(),
            order.iter().map(|&i| p.batch.quality[i]).collect(),
        ).unwrap();
        let a = combined_loss(&p.batch, &p.bank, &p.hyper).unwrap();
        let b = combined_loss(&permuted, &p.bank, &p.hyper).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-12);
        for (j, &i) in order.iter().enumerate() {
            for (ga, gb) in a.grad_embeddings.row(i).iter().zip(b.grad_embeddings.row(j)) {
                prop_assert!((ga - gb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn losses_are_finite_and_nonnegative(seed in 0u64..500, n in 1usize..16, levels in 1usize..5) {
        let mut rng = SeededRng::new(seed);
        let p = random_problem(&mut rng, n, levels, 8);
        for v in [
            qamo_loss(&p.batch, &p.bank, &p.hyper).unwrap().value,
            quality_loss(&p.batch, &p.bank, &p.hyper).unwrap().value,
            combined_loss(&p.batch, &p.bank, &p.hyper).unwrap().value,
        ] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }
}
