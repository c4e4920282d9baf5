//! Test-only oracles and random problem generators. Nothing here calls the
//! loss or EER code it is used to check.

#![allow(dead_code)]

use qamo::data::Label;
use qamo::losses::{Batch, QamoHyper};
use qamo::model::{BinaryHead, CentroidBank};
use qamo::numerics::{Matrix, SeededRng};

pub fn random_unit(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn plain_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// One sample's one-class loss written out directly:
/// `ln(1 + exp(α (m_y − d) (−1)^y))`, with `d` the labeled-centroid
/// similarity for bona fide and the largest similarity for spoof.
pub fn one_class_oracle(
    x: &[f64],
    centroids: &[Vec<f64>],
    label: Label,
    q: usize,
    h: &QamoHyper,
) -> f64 {
    let sims: Vec<f64> = centroids.iter().map(|w| plain_dot(w, x)).collect();
    let (d, margin, sign) = match label {
        Label::Bonafide => (sims[q], h.m0, 1.0),
        Label::Spoof => (sims.iter().cloned().fold(f64::MIN, f64::max), h.m1, -1.0),
    };
    (1.0 + (h.alpha * (margin - d) * sign).exp()).ln()
}

/// One bona fide sample's AM-Softmax quality loss written out directly.
pub fn quality_oracle(x: &[f64], centroids: &[Vec<f64>], q: usize, h: &QamoHyper) -> f64 {
    let target = (h.s * (plain_dot(&centroids[q], x) - h.m)).exp();
    let mut others = 0.0;
    for (j, w) in centroids.iter().enumerate() {
        if j != q {
            others += (h.s * plain_dot(w, x)).exp();
        }
    }
    -(target / (target + others)).ln()
}

/// Brute-force EER: FAR/FRR counted from scratch at the lowest score, at
/// every midpoint between consecutive distinct scores and just above the
/// highest score; linear interpolation at the first sign change of FRR − FAR.
pub fn eer_oracle(bona: &[f64], spoof: &[f64]) -> (f64, f64) {
    let mut all: Vec<f64> = bona.iter().chain(spoof).cloned().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    let mut thresholds = vec![all[0]];
    for w in all.windows(2) {
        thresholds.push(0.5 * (w[0] + w[1]));
    }
    thresholds.push(all[all.len() - 1].next_up());
    let rates: Vec<(f64, f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let frr = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
            let far = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
            (t, frr, far)
        })
        .collect();
    for k in 0..rates.len() - 1 {
        let (t0, r0, a0) = rates[k];
        let (t1, r1, a1) = rates[k + 1];
        if r0 == a0 {
            return (r0, t0);
        }
        if r0 < a0 && r1 >= a1 {
            if r1 == a1 {
                return (r1, t1);
            }
            let t = (a0 - r0) / ((a0 - r0) - (a1 - r1));
            return (r0 + t * (r1 - r0), t0 + t * (t1 - t0));
        }
    }
    let last = rates[rates.len() - 1];
    (last.1, last.0)
}

/// A random loss problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub batch: Batch,
    pub bank: CentroidBank,
    pub head: BinaryHead,
    pub hyper: QamoHyper,
}

/// Random batch with `n` samples, `levels` centroids in `dim` dimensions.
/// Spoof samples whose two best centroids are within `1e-3` are redrawn so
/// finite differences never straddle the max kink.
pub fn random_problem(rng: &mut SeededRng, n: usize, levels: usize, dim: usize) -> Problem {
    let centroids: Vec<Vec<f64>> = (0..levels).map(|_| random_unit(rng, dim)).collect();
    let bank = CentroidBank::from_rows(&centroids).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut quality = Vec::new();
    while rows.len() < n {
        let x = random_unit(rng, dim);
        let label = if rng.uniform(0.0, 1.0) < 0.5 {
            Label::Bonafide
        } else {
            Label::Spoof
        };
        if label == Label::Spoof && levels > 1 {
            let mut sims: Vec<f64> = bank
                .centroids
                .iter_rows()
                .map(|w| plain_dot(w, &x))
                .collect();
            sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sims[0] - sims[1] < 1e-3 {
                continue;
            }
        }
        quality.push(match label {
            Label::Bonafide => Some(rng.below(levels)),
            Label::Spoof => None,
        });
        rows.push(x);
        labels.push(label);
    }
    let head = BinaryHead {
        weights: (0..dim).map(|_| rng.normal()).collect(),
        bias: rng.normal(),
    };
    let hyper = QamoHyper {
        lambda: rng.uniform(0.0, 1.0),
        ..QamoHyper::default()
    };
    Problem {
        batch: Batch::new(Matrix::from_rows(&rows).unwrap(), labels, quality).unwrap(),
        bank,
        head,
        hyper,
    }
}

/// Concatenates embeddings, centroids, head weights and head bias.
pub fn flatten(p: &Problem) -> Vec<f64> {
    let mut v = p.batch.embeddings.data.clone();
    v.extend(&p.bank.centroids.data);
    v.extend(&p.head.weights);
    v.push(p.head.bias);
    v
}

/// Inverse of [`flatten`]; centroids are *not* renormalized.
pub fn unflatten(p: &Problem, v: &[f64]) -> Problem {
    let mut out = p.clone();
    let ne = p.batch.embeddings.data.len();
    let nc = p.bank.centroids.data.len();
    let nh = p.head.weights.len();
    out.batch.embeddings.data.copy_from_slice(&v[..ne]);
    out.bank.centroids.data.copy_from_slice(&v[ne..ne + nc]);
    out.head.weights.copy_from_slice(&v[ne + nc..ne + nc + nh]);
    out.head.bias = v[ne + nc + nh];
    out
}
