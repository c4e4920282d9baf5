//! Training objectives with analytic gradients.
//!
//! Every loss works on raw dot products between the (already normalized)
//! embeddings and the centroid rows. The Jacobian of the normalization is
//! applied by the encoder during backpropagation, not here.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{QamoError, Result};
use crate::model::{BinaryHead, CentroidBank};
use crate::numerics::{axpy, check_dim, dot, log_sum_exp, sigmoid, softmax, softplus, Matrix};

/// Margin-loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QamoHyper {
    /// Scale of the one-class softplus.
    pub alpha: f64,
    /// Bona fide margin.
    pub m0: f64,
    /// Spoof margin.
    pub m1: f64,
    /// Scale of the quality AM-Softmax logits.
    pub s: f64,
    /// Additive margin on the target quality logit.
    pub m: f64,
    /// Weight of the quality term.
    pub lambda: f64,
}

impl Default for QamoHyper {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            m0: 0.9,
            m1: 0.2,
            s: 20.0,
            m: 0.4,
            lambda: 0.1,
        }
    }
}

impl QamoHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.s > 0.0
            && -1.0 <= self.m1
            && self.m1 < self.m0
            && self.m0 <= 1.0
            && self.m >= 0.0
            && self.lambda >= 0.0
            && [self.alpha, self.m0, self.m1, self.s, self.m, self.lambda]
                .iter()
                .all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(QamoError::InvalidArgument(format!(
                "invalid margin hyperparameters {self:?}"
            )))
        }
    }

    /// Margin for the given class.
    pub fn margin(&self, label: Label) -> f64 {
        match label {
            Label::Bonafide => self.m0,
            Label::Spoof => self.m1,
        }
    }
}

/// Per-class weights for the weighted cross-entropy baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassWeights {
    pub bonafide: f64,
    pub spoof: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            bonafide: 0.9,
            spoof: 0.1,
        }
    }
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights {
        bonafide: 1.0,
        spoof: 1.0,
    };

    pub fn weight(&self, label: Label) -> f64 {
        match label {
            Label::Bonafide => self.bonafide,
            Label::Spoof => self.spoof,
        }
    }
}

/// A mini-batch of unit embeddings with labels and bona fide quality levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub embeddings: Matrix,
    pub labels: Vec<Label>,
    pub quality: Vec<Option<usize>>,
}

impl Batch {
    pub fn new(
        embeddings: Matrix,
        labels: Vec<Label>,
        quality: Vec<Option<usize>>,
    ) -> Result<Self> {
        if embeddings.rows == 0 {
            return Err(QamoError::InvalidArgument("empty batch".into()));
        }
        check_dim(embeddings.rows, labels.len())?;
        check_dim(embeddings.rows, quality.len())?;
        if !embeddings.is_finite() {
            return Err(QamoError::InvalidArgument("non-finite embedding".into()));
        }
        Ok(Self {
            embeddings,
            labels,
            quality,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn bonafide_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l == Label::Bonafide)
            .count()
    }

    fn bonafide_level(&self, i: usize, levels: usize) -> Result<usize> {
        let q = self.quality[i].ok_or(QamoError::MissingQuality { index: i })?;
        if q >= levels {
            return Err(QamoError::QualityOutOfRange { level: q, levels });
        }
        Ok(q)
    }
}

/// Gradient for a [`BinaryHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Individual terms behind a loss value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub qamo: Option<f64>,
    pub quality: Option<f64>,
    pub wce: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_embeddings: Matrix,
    pub grad_centroids: Matrix,
    pub grad_head: Option<HeadGrad>,
    pub terms: LossTerms,
}

impl LossOutput {
    fn zeros(batch: &Batch, bank: &CentroidBank) -> Self {
        Self {
            value: 0.0,
            grad_embeddings: Matrix::zeros(batch.len(), batch.embeddings.cols),
            grad_centroids: Matrix::zeros(bank.num_levels(), bank.dim()),
            grad_head: None,
            terms: LossTerms::default(),
        }
    }

    /// `self + weight · other` for value and gradients.
    fn add_scaled(mut self, weight: f64, other: &LossOutput) -> Self {
        self.value += weight * other.value;
        axpy(
            weight,
            &other.grad_embeddings.data,
            &mut self.grad_embeddings.data,
        );
        axpy(
            weight,
            &other.grad_centroids.data,
            &mut self.grad_centroids.data,
        );
        self
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_embeddings.is_finite()
            && self.grad_centroids.is_finite()
            && self
                .grad_head
                .as_ref()
                .is_none_or(|h| h.bias.is_finite() && h.weights.iter().all(|x| x.is_finite()))
    }
}

/// Similarity `d` used by the one-class loss and the centroid it came from.
///
/// Bona fide samples are compared with their own quality centroid; spoof
/// samples with whichever centroid is most similar (lowest index on ties).
pub fn similarity_distance(
    embedding: &[f64],
    label: Label,
    quality: Option<usize>,
    bank: &CentroidBank,
) -> Result<(f64, usize)> {
    check_dim(bank.dim(), embedding.len())?;
    match label {
        Label::Bonafide => {
            let q = quality.ok_or(QamoError::MissingQuality { index: 0 })?;
            if q >= bank.num_levels() {
                return Err(QamoError::QualityOutOfRange {
                    level: q,
                    levels: bank.num_levels(),
                });
            }
            Ok((dot(bank.centroid(q), embedding), q))
        }
        Label::Spoof => Ok(argmax_similarity(embedding, bank)),
    }
}

fn argmax_similarity(embedding: &[f64], bank: &CentroidBank) -> (f64, usize) {
    let mut best = (dot(bank.centroid(0), embedding), 0);
    for q in 1..bank.num_levels() {
        let d = dot(bank.centroid(q), embedding);
        if d > best.0 {
            best = (d, q);
        }
    }
    best
}

/// Multi-centroid one-class loss:
/// `(1/N) Σ softplus(α (m_y − d) (−1)^y)`.
///
/// Each sample sends gradient to exactly one centroid.
pub fn qamo_loss(batch: &Batch, bank: &CentroidBank, hyper: &QamoHyper) -> Result<LossOutput> {
    one_class_loss(batch, bank, hyper, false)
}

/// Single-centroid baseline: the one-class loss with every sample routed
/// to the only centroid. Quality levels are ignored.
pub fn oc_softmax_loss(
    batch: &Batch,
    bank: &CentroidBank,
    hyper: &QamoHyper,
) -> Result<LossOutput> {
    if bank.num_levels() != 1 {
        return Err(QamoError::InvalidArgument(format!(
            "single-centroid loss needs Q = 1, got {}",
            bank.num_levels()
        )));
    }
    one_class_loss(batch, bank, hyper, true)
}

fn one_class_loss(
    batch: &Batch,
    bank: &CentroidBank,
    hyper: &QamoHyper,
    ignore_quality: bool,
) -> Result<LossOutput> {
    check_dim(bank.dim(), batch.embeddings.cols)?;
    let n = batch.len() as f64;
    let mut out = LossOutput::zeros(batch, bank);
    let mut total = 0.0;
    for (i, (x, &label)) in batch.embeddings.iter_rows().zip(&batch.labels).enumerate() {
        let (d, k) = match label {
            Label::Bonafide if ignore_quality => (dot(bank.centroid(0), x), 0),
            Label::Bonafide => {
                let q = batch.bonafide_level(i, bank.num_levels())?;
                (dot(bank.centroid(q), x), q)
            }
            Label::Spoof => argmax_similarity(x, bank),
        };
        // sign = (−1)^y
        let sign = match label {
            Label::Bonafide => 1.0,
            Label::Spoof => -1.0,
        };
        let z = hyper.alpha * (hyper.margin(label) - d) * sign;
        total += softplus(z);
        let dl_dd = -hyper.alpha * sign * sigmoid(z) / n;
        axpy(dl_dd, bank.centroid(k), out.grad_embeddings.row_mut(i));
        axpy(dl_dd, x, out.grad_centroids.row_mut(k));
    }
    out.value = total / n;
    out.terms.qamo = Some(out.value);
    Ok(out)
}

/// AM-Softmax quality classification over bona fide samples:
/// `−(1/B) Σ log softmax_q(s·(w_qᵀx̂ − m·[q = target]))`.
///
/// Spoof samples contribute nothing; a batch with no bona fide samples
/// yields zero.
pub fn quality_loss(batch: &Batch, bank: &CentroidBank, hyper: &QamoHyper) -> Result<LossOutput> {
    check_dim(bank.dim(), batch.embeddings.cols)?;
    let mut out = LossOutput::zeros(batch, bank);
    let b = batch.bonafide_count();
    if b == 0 {
        out.terms.quality = Some(0.0);
        return Ok(out);
    }
    let inv_b = 1.0 / b as f64;
    let mut total = 0.0;
    for (i, (x, &label)) in batch.embeddings.iter_rows().zip(&batch.labels).enumerate() {
        if label != Label::Bonafide {
            continue;
        }
        let target = batch.bonafide_level(i, bank.num_levels())?;
        let logits: Vec<f64> = (0..bank.num_levels())
            .map(|q| {
                let c = dot(bank.centroid(q), x);
                if q == target {
                    hyper.s * (c - hyper.m)
                } else {
                    hyper.s * c
                }
            })
            .collect();
        total += target_nll(&logits, target);
        let probs = softmax(&logits);
        for (q, p) in probs.iter().enumerate() {
            let indicator = if q == target { 1.0 } else { 0.0 };
            let coef = hyper.s * (p - indicator) * inv_b;
            axpy(coef, bank.centroid(q), out.grad_embeddings.row_mut(i));
            axpy(coef, x, out.grad_centroids.row_mut(q));
        }
    }
    out.value = total * inv_b;
    out.terms.quality = Some(out.value);
    Ok(out)
}

/// `−log softmax(logits)[target]`, using `ln_1p` when the target logit
/// dominates so tiny losses keep full relative precision.
fn target_nll(logits: &[f64], target: usize) -> f64 {
    let lt = logits[target];
    let gaps: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, l)| l - lt)
        .collect();
    let worst = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if worst <= 0.0 {
        gaps.iter().map(|g| g.exp()).sum::<f64>().ln_1p()
    } else {
        let mut with_target = gaps;
        with_target.push(0.0);
        log_sum_exp(&with_target)
    }
}

/// `L_QAMO + λ L_quality`.
pub fn combined_loss(batch: &Batch, bank: &CentroidBank, hyper: &QamoHyper) -> Result<LossOutput> {
    let one_class = qamo_loss(batch, bank, hyper)?;
    let quality = quality_loss(batch, bank, hyper)?;
    let mut out = if hyper.lambda == 0.0 {
        one_class
    } else {
        one_class.add_scaled(hyper.lambda, &quality)
    };
    out.terms.quality = quality.terms.quality;
    Ok(out)
}

/// Weighted sigmoid cross-entropy on the head's bona fide logit,
/// normalized by the total weight of the batch.
pub fn wce_loss(
    batch: &Batch,
    head: &BinaryHead,
    weights: &ClassWeights,
    centroid_shape: (usize, usize),
) -> Result<LossOutput> {
    check_dim(head.weights.len(), batch.embeddings.cols)?;
    let total_weight: f64 = batch.labels.iter().map(|&l| weights.weight(l)).sum();
    if total_weight.is_nan() || total_weight <= 0.0 {
        return Err(QamoError::InvalidArgument(
            "class weights sum to zero".into(),
        ));
    }
    let mut grad_emb = Matrix::zeros(batch.len(), batch.embeddings.cols);
    let mut grad_head = HeadGrad {
        weights: vec![0.0; head.weights.len()],
        bias: 0.0,
    };
    let mut total = 0.0;
    for (i, (x, &label)) in batch.embeddings.iter_rows().zip(&batch.labels).enumerate() {
        let z = head.logit(x)?;
        let target = match label {
            Label::Bonafide => 1.0,
            Label::Spoof => 0.0,
        };
        let w = weights.weight(label) / total_weight;
        total += w * (softplus(z) - target * z);
        let dz = w * (sigmoid(z) - target);
        axpy(dz, &head.weights, grad_emb.row_mut(i));
        axpy(dz, x, &mut grad_head.weights);
        grad_head.bias += dz;
    }
    Ok(LossOutput {
        value: total,
        grad_embeddings: grad_emb,
        grad_centroids: Matrix::zeros(centroid_shape.0, centroid_shape.1),
        grad_head: Some(grad_head),
        terms: LossTerms {
            wce: Some(total),
            ..LossTerms::default()
        },
    })
}

/// `WCE + λ L_quality`: the binary head decides, the centroids only learn
/// quality classification.
pub fn wce_quality_loss(
    batch: &Batch,
    head: &BinaryHead,
    weights: &ClassWeights,
    bank: &CentroidBank,
    hyper: &QamoHyper,
) -> Result<LossOutput> {
    let wce = wce_loss(batch, head, weights, (bank.num_levels(), bank.dim()))?;
    let quality = quality_loss(batch, bank, hyper)?;
    let mut out = wce.add_scaled(hyper.lambda, &quality);
    out.terms.quality = quality.terms.quality;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    /// Two orthonormal centroids along the first two axes of R^3.
    fn bank2() -> CentroidBank {
        CentroidBank::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap()
    }

    /// Unit vector with similarities `(a, b)` to `bank2`.
    fn with_sims(a: f64, b: f64) -> Vec<f64> {
        let rest = (1.0 - a * a - b * b).max(0.0).sqrt();
        vec![a, b, rest]
    }

    fn single(x: Vec<f64>, label: Label, q: Option<usize>) -> Batch {
        Batch::new(Matrix::from_rows(&[x]).unwrap(), vec![label], vec![q]).unwrap()
    }

    #[test]
    fn similarity_distance_examples() {
        let bank = bank2();
        let x = with_sims(0.3, 0.7);
        assert_eq!(
            similarity_distance(&x, Label::Spoof, None, &bank).unwrap(),
            (0.7, 1)
        );
        assert_eq!(
            similarity_distance(&x, Label::Bonafide, Some(0), &bank).unwrap(),
            (0.3, 0)
        );
        let tie = with_sims(0.5, 0.5);
        assert_eq!(
            similarity_distance(&tie, Label::Spoof, None, &bank)
                .unwrap()
                .1,
            0
        );
        assert!(matches!(
            similarity_distance(&x, Label::Bonafide, None, &bank),
            Err(QamoError::MissingQuality { .. })
        ));
    }

    #[test]
    fn qamo_margin_boundary_is_ln2() {
        let h = QamoHyper::default();
        let b = single(with_sims(0.9, 0.1), Label::Bonafide, Some(0));
        assert!((qamo_loss(&b, &bank2(), &h).unwrap().value - LN_2).abs() < 1e-15);
        let s = single(with_sims(0.2, 0.1), Label::Spoof, None);
        assert!((qamo_loss(&s, &bank2(), &h).unwrap().value - LN_2).abs() < 1e-15);
    }

    #[test]
    fn qamo_value_and_slope_at_perfect_match() {
        let h = QamoHyper::default();
        let b = single(with_sims(1.0, 0.0), Label::Bonafide, Some(0));
        let out = qamo_loss(&b, &bank2(), &h).unwrap();
        assert!((out.value - 0.126_928_011_042_972_6).abs() < 1e-12);
        // ∂L/∂d shows up as ∂L/∂x̂ along w_0
        assert!((out.grad_embeddings.get(0, 0) - (-2.384_058_440_442_351)).abs() < 1e-9);
        assert_eq!(out.grad_centroids.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn qamo_requires_quality_for_bonafide() {
        let b = single(with_sims(0.9, 0.1), Label::Bonafide, None);
        assert!(matches!(
            qamo_loss(&b, &bank2(), &QamoHyper::default()),
            Err(QamoError::MissingQuality { index: 0 })
        ));
        let b = single(with_sims(0.9, 0.1), Label::Bonafide, Some(4));
        assert!(matches!(
            qamo_loss(&b, &bank2(), &QamoHyper::default()),
            Err(QamoError::QualityOutOfRange { .. })
        ));
    }

    #[test]
    fn quality_loss_examples() {
        let h = QamoHyper::default();
        let spoof_only = Batch::new(
            Matrix::from_rows(&[with_sims(0.3, 0.4), with_sims(0.1, 0.9)]).unwrap(),
            vec![Label::Spoof, Label::Spoof],
            vec![None, None],
        )
        .unwrap();
        let out = quality_loss(&spoof_only, &bank2(), &h).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out
            .grad_embeddings
            .data
            .iter()
            .chain(&out.grad_centroids.data)
            .all(|&g| g == 0.0));

        // w_qᵀx̂ = 1, w_otherᵀx̂ = −1: loss = ln(1 + e^{−32})
        let bank = CentroidBank::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let b = single(vec![1.0, 0.0], Label::Bonafide, Some(0));
        let v = quality_loss(&b, &bank, &h).unwrap().value;
        assert!(v < 1e-13 && v > 0.0);
        assert!((v - (-32f64).exp()).abs() < 1e-12 * v);

        for c in [-0.4, 0.0, 0.35] {
            let b = single(with_sims(c, c), Label::Bonafide, Some(1));
            let v = quality_loss(&b, &bank2(), &h).unwrap().value;
            assert!((v - 8.000_335_406_372_896).abs() < 1e-12, "c={c}: {v}");
        }
    }

    #[test]
    fn combined_examples() {
        let bank = bank2();
        let batch = Batch::new(
            Matrix::from_rows(&[with_sims(0.8, 0.2), with_sims(0.1, 0.6)]).unwrap(),
            vec![Label::Bonafide, Label::Spoof],
            vec![Some(0), None],
        )
        .unwrap();
        let zero = QamoHyper {
            lambda: 0.0,
            ..QamoHyper::default()
        };
        let a = combined_loss(&batch, &bank, &zero).unwrap();
        let b = qamo_loss(&batch, &bank, &zero).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.grad_embeddings, b.grad_embeddings);
        assert_eq!(a.grad_centroids, b.grad_centroids);
        assert!(a.terms.quality.is_some());

        let h = QamoHyper::default();
        let c = combined_loss(&batch, &bank, &h).unwrap();
        let q = quality_loss(&batch, &bank, &h).unwrap().value;
        assert!((c.value - (b.value + 0.1 * q)).abs() < 1e-14);
    }

    #[test]
    fn oc_softmax_is_q1_qamo() {
        let bank = CentroidBank::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        let batch = Batch::new(
            Matrix::from_rows(&[with_sims(0.3, 0.9), with_sims(0.5, 0.2)]).unwrap(),
            vec![Label::Bonafide, Label::Spoof],
            vec![Some(1), None],
        )
        .unwrap();
        let h = QamoHyper::default();
        let oc = oc_softmax_loss(&batch, &bank, &h).unwrap();
        let mut routed = batch.clone();
        routed.quality = vec![Some(0), None];
        assert_eq!(oc, qamo_loss(&routed, &bank, &h).unwrap());
        // bona fide at d = 0.9 contributes ln 2 / N
        let b = single(with_sims(0.0, 0.9), Label::Bonafide, None);
        assert!((oc_softmax_loss(&b, &bank, &h).unwrap().value - LN_2).abs() < 1e-15);
        assert!(oc_softmax_loss(&b, &bank2(), &h).is_err());
    }

    #[test]
    fn wce_examples() {
        let head = BinaryHead {
            weights: vec![0.0; 3],
            bias: 0.0,
        };
        for label in [Label::Bonafide, Label::Spoof] {
            let b = single(with_sims(0.3, 0.3), label, None);
            let v = wce_loss(&b, &head, &ClassWeights::UNIT, (1, 3))
                .unwrap()
                .value;
            assert!((v - LN_2).abs() < 1e-15);
        }
        let confident = BinaryHead {
            weights: vec![0.0; 3],
            bias: 60.0,
        };
        let b = single(with_sims(0.3, 0.3), Label::Bonafide, None);
        assert!(
            wce_loss(&b, &confident, &ClassWeights::UNIT, (1, 3))
                .unwrap()
                .value
                < 1e-25
        );
    }

    #[test]
    fn qamo_slope_signs() {
        let h = QamoHyper::default();
        for d in [-0.5, 0.0, 0.5, 0.9, 0.99] {
            let b = single(with_sims(d, 0.0), Label::Bonafide, Some(0));
            assert!(
                qamo_loss(&b, &bank2(), &h)
                    .unwrap()
                    .grad_embeddings
                    .get(0, 0)
                    < 0.0
            );
            let other = if d < 0.0 { d - 0.1 } else { -0.1 };
            let s = single(with_sims(d, other), Label::Spoof, None);
            assert!(
                qamo_loss(&s, &bank2(), &h)
                    .unwrap()
                    .grad_embeddings
                    .get(0, 0)
                    > 0.0
            );
        }
    }

    #[test]
    fn hyper_validation() {
        assert!(QamoHyper::default().validate().is_ok());
        let bad = QamoHyper {
            m1: 0.95,
            ..QamoHyper::default()
        };
        assert!(bad.validate().is_err());
        let bad = QamoHyper {
            alpha: 0.0,
            ..QamoHyper::default()
        };
        assert!(bad.validate().is_err());
    }
}
