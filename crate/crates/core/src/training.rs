//! Mini-batch training: batching, SGD-momentum/Adam, centroid projection
//! onto the unit sphere, validation EER tracking and run outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{balance_augmentation, split_records, Label, QualityPolicy, UtteranceRecord};
use crate::error::{QamoError, Result};
use crate::losses::{
    combined_loss, oc_softmax_loss, wce_loss, wce_quality_loss, Batch, ClassWeights, LossOutput,
    LossTerms, QamoHyper,
};
use crate::model::{
    init_centroids, write_atomic, BinaryHead, CentroidBank, Checkpoint, EncoderGrads, EncoderModel,
    EncoderSpec, InitScheme, TrainingMetadata,
};
use crate::numerics::{Matrix, SeededRng};
use crate::scoring::{score_dataset, InferenceRecord, ScoreStrategy, Scorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Multi-centroid one-class loss plus λ·quality loss.
    Qamo,
    /// Single centroid, quality ignored.
    Ocsoftmax,
    /// Weighted cross-entropy on a binary head.
    Wce,
    /// Weighted cross-entropy plus λ·quality loss on the centroid bank.
    WcePlusQuality,
}

impl LossKind {
    pub fn uses_head(self) -> bool {
        matches!(self, LossKind::Wce | LossKind::WcePlusQuality)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Qamo => "qamo",
            LossKind::Ocsoftmax => "ocsoftmax",
            LossKind::Wce => "wce",
            LossKind::WcePlusQuality => "wce_plus_quality",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub hyper: QamoHyper,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of training records passed through augmentation.
    pub augment_fraction: f64,
    pub noise_scale: f64,
    /// Share of the input held out (unaugmented) for per-epoch validation.
    pub validation_fraction: f64,
    pub quality: QualityPolicy,
    pub encoder: EncoderSpec,
    pub centroid_init: InitScheme,
    pub class_weights: ClassWeights,
    /// Abort once the batch loss exceeds this value.
    pub divergence_limit: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Qamo,
            hyper: QamoHyper::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            epochs: 50,
            seed: 0,
            augment_fraction: 0.4,
            noise_scale: 0.5,
            validation_fraction: 0.1,
            quality: QualityPolicy::default(),
            encoder: EncoderSpec::default(),
            centroid_init: InitScheme::Orthogonal,
            class_weights: ClassWeights::default(),
            divergence_limit: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(QamoError::Config(m.to_owned()));
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad("optimizer.lr must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) {
            return bad("augment_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if self.noise_scale.is_nan() || self.noise_scale < 0.0 {
            return bad("noise_scale must be >= 0");
        }
        self.hyper
            .validate()
            .map_err(|e| QamoError::Config(e.to_string()))
    }

    /// Number of centroids trained for this loss.
    pub fn num_centroids(&self) -> usize {
        match self.loss {
            LossKind::Ocsoftmax => 1,
            _ => self.quality.num_levels(),
        }
    }

    /// Strategy used for the headline validation EER.
    pub fn default_strategy(&self) -> ScoreStrategy {
        if self.loss.uses_head() {
            ScoreStrategy::Head
        } else {
            ScoreStrategy::Ensemble
        }
    }
}

/// Stateful optimizer over an ordered list of parameter slices.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `params` and `grads` must have the same layout on every call.
    ///
    /// SGD-momentum: `v ← μ v + g; p ← p − lr v`.
    /// Adam: bias-corrected first/second moments, `p ← p − lr m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(QamoError::DimMismatch {
                expected: params.len(),
                found: grads.len(),
            });
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let c = &self.config;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first[k].len() {
                return Err(QamoError::DimMismatch {
                    expected: p.len(),
                    found: g.len(),
                });
            }
            match c.kind {
                OptimizerKind::SgdMomentum => {
                    for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(&mut self.first[k]) {
                        *vi = c.momentum * *vi + gi;
                        *pi -= c.lr * *vi;
                    }
                }
                OptimizerKind::Adam => {
                    let t = self.steps as i32;
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    let m = &mut self.first[k];
                    let v = &mut self.second[k];
                    for i in 0..p.len() {
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Trainable state bundled for a single optimizer.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub encoder: EncoderModel,
    pub centroids: CentroidBank,
    pub head: Option<BinaryHead>,
}

/// Gradients matching [`TrainState`].
#[derive(Debug, Clone)]
pub struct TrainGrads {
    pub encoder: EncoderGrads,
    pub centroids: Matrix,
    pub head_weights: Vec<f64>,
    pub head_bias: f64,
}

/// Applies one optimizer update and re-projects the centroids onto the
/// unit sphere.
pub fn optimizer_step(
    state: &mut TrainState,
    grads: &TrainGrads,
    optimizer: &mut Optimizer,
) -> Result<()> {
    let head_bias = [grads.head_bias];
    let mut grad_parts = grads.encoder.parts();
    grad_parts.push(&grads.centroids.data);
    if state.head.is_some() {
        grad_parts.push(&grads.head_weights);
        grad_parts.push(&head_bias);
    }
    let mut params = state.encoder.params_mut();
    params.push(&mut state.centroids.centroids.data);
    if let Some(head) = state.head.as_mut() {
        params.push(&mut head.weights);
        params.push(std::slice::from_mut(&mut head.bias));
    }
    optimizer.step(&mut params, &grad_parts)?;
    state.centroids.renormalize()
}

/// Seeded shuffle of `0..len` cut into batches of `batch_size`; the last
/// batch may be shorter.
pub fn make_batches(len: usize, batch_size: usize, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(QamoError::InvalidArgument("no records to batch".into()));
    }
    if batch_size == 0 {
        return Err(QamoError::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Loss and gradients for one batch of records.
pub fn batch_gradients(
    state: &TrainState,
    records: &[&UtteranceRecord],
    config: &TrainConfig,
) -> Result<(LossOutput, TrainGrads)> {
    let traces = records
        .iter()
        .map(|r| {
            state
                .encoder
                .forward(&r.features)
                .map_err(|e| e.for_record(&r.id))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = traces.iter().map(|t| t.embedding.clone()).collect();
    let batch = Batch::new(
        Matrix::from_rows(&rows)?,
        records.iter().map(|r| r.label).collect(),
        records.iter().map(|r| r.quality).collect(),
    )?;
    let shape = (state.centroids.num_levels(), state.centroids.dim());
    let out = match config.loss {
        LossKind::Qamo => combined_loss(&batch, &state.centroids, &config.hyper)?,
        LossKind::Ocsoftmax => oc_softmax_loss(&batch, &state.centroids, &config.hyper)?,
        LossKind::Wce => wce_loss(&batch, head_of(state)?, &config.class_weights, shape)?,
        LossKind::WcePlusQuality => wce_quality_loss(
            &batch,
            head_of(state)?,
            &config.class_weights,
            &state.centroids,
            &config.hyper,
        )?,
    };
    let mut enc = EncoderGrads::zeros_like(&state.encoder);
    for (i, trace) in traces.iter().enumerate() {
        enc.accumulate(&state.encoder.backward(trace, out.grad_embeddings.row(i))?);
    }
    let (head_weights, head_bias) = match &out.grad_head {
        Some(h) => (h.weights.clone(), h.bias),
        None => (Vec::new(), 0.0),
    };
    let grads = TrainGrads {
        encoder: enc,
        centroids: out.grad_centroids.clone(),
        head_weights,
        head_bias,
    };
    Ok((out, grads))
}

fn head_of(state: &TrainState) -> Result<&BinaryHead> {
    state
        .head
        .as_ref()
        .ok_or_else(|| QamoError::Config("loss needs a binary head".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean of the minibatch losses seen during the epoch.
    pub train_loss: f64,
    /// Objective over the whole training set with end-of-epoch parameters.
    pub end_loss: f64,
    pub terms: LossTerms,
    pub val_eer_ensemble: Option<f64>,
    pub val_eer_max: Option<f64>,
    pub val_eer_head: Option<f64>,
    pub centroid_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss: LossKind,
    pub seed: u64,
    pub train_records: usize,
    pub validation_records: usize,
    pub augmented_records: usize,
    pub epochs: Vec<EpochMetrics>,
    pub final_checkpoint: Option<String>,
}

impl TrainReport {
    pub fn final_centroid_cosine(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.centroid_cosine)
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// Per-epoch metrics as CSV.
    pub fn metrics_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "epoch",
            "train_loss",
            "end_loss",
            "qamo_term",
            "quality_term",
            "wce_term",
            "val_eer_ensemble",
            "val_eer_max",
            "val_eer_head",
            "centroid_cosine",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.end_loss.to_string(),
                opt(e.terms.qamo),
                opt(e.terms.quality),
                opt(e.terms.wce),
                opt(e.val_eer_ensemble),
                opt(e.val_eer_max),
                opt(e.val_eer_head),
                opt(e.centroid_cosine),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| QamoError::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Trains an encoder and centroid bank (plus a head for the WCE arms).
///
/// The input is split into training and validation parts, the training
/// part is augmented, and each epoch ends with a validation pass. Every
/// random choice derives from `config.seed`.
pub fn train(
    records: &[UtteranceRecord],
    config: &TrainConfig,
) -> Result<(TrainReport, Checkpoint)> {
    config.validate()?;
    let has = |l| records.iter().any(|r: &UtteranceRecord| r.label == l);
    if !has(Label::Bonafide) || !has(Label::Spoof) {
        return Err(QamoError::InvalidArgument(
            "training data needs both classes".into(),
        ));
    }
    let input_dim = records[0].features.len();
    if let Some(r) = records.iter().find(|r| r.features.len() != input_dim) {
        return Err(QamoError::DimMismatch {
            expected: input_dim,
            found: r.features.len(),
        }
        .for_record(&r.id));
    }

    let root = SeededRng::new(config.seed);
    let (train_part, validation) =
        split_records(records, config.validation_fraction, &mut root.fork(1))?;
    if train_part.is_empty() {
        return Err(QamoError::InvalidArgument(
            "validation split left no training data".into(),
        ));
    }
    let train_set = balance_augmentation(
        &train_part,
        config.augment_fraction,
        config.noise_scale,
        &mut root.fork(2),
    )?;
    let mut state = TrainState {
        encoder: EncoderModel::new(input_dim, &config.encoder, &mut root.fork(3))?,
        centroids: init_centroids(
            config.num_centroids(),
            config.encoder.embedding_dim,
            config.centroid_init,
            &mut root.fork(4),
        )?,
        head: config
            .loss
            .uses_head()
            .then(|| BinaryHead::new(config.encoder.embedding_dim, &mut root.fork(5))),
    };
    let validation_inputs: Vec<InferenceRecord> = validation
        .iter()
        .map(|r| InferenceRecord::from_record(r, &config.quality))
        .collect();

    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let mut batch_rng = root.fork(6);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut term_sums = [0.0f64; 3];
        for idx in make_batches(train_set.len(), config.batch_size, &mut batch_rng)? {
            let batch: Vec<&UtteranceRecord> = idx.iter().map(|&i| &train_set[i]).collect();
            let (out, grads) = batch_gradients(&state, &batch, config)?;
            let step = optimizer.steps() as usize + 1;
            if !out.value.is_finite() || out.value > config.divergence_limit || !out.is_finite() {
                return Err(QamoError::DivergenceDetected {
                    epoch,
                    step,
                    value: out.value,
                });
            }
            let w = batch.len() as f64;
            loss_sum += w * out.value;
            for (s, t) in
                term_sums
                    .iter_mut()
                    .zip([out.terms.qamo, out.terms.quality, out.terms.wce])
            {
                *s += w * t.unwrap_or(0.0);
            }
            optimizer_step(&mut state, &grads, &mut optimizer)?;
        }
        let n = train_set.len() as f64;
        let probe = LossTerms::default();
        let mean_term = |k: usize, present: bool| present.then(|| term_sums[k] / n);
        let terms = match config.loss {
            LossKind::Qamo => LossTerms {
                qamo: mean_term(0, true),
                quality: mean_term(1, true),
                ..probe
            },
            LossKind::Ocsoftmax => LossTerms {
                qamo: mean_term(0, true),
                ..probe
            },
            LossKind::Wce => LossTerms {
                wce: mean_term(2, true),
                ..probe
            },
            LossKind::WcePlusQuality => LossTerms {
                quality: mean_term(1, true),
                wce: mean_term(2, true),
                ..probe
            },
        };

        let scorer = Scorer {
            encoder: &state.encoder,
            centroids: &state.centroids,
            head: state.head.as_ref(),
        };
        let eer_for = |strategy| -> Result<Option<f64>> {
            if validation_inputs.is_empty() {
                return Ok(None);
            }
            Ok(score_dataset(&validation_inputs, &scorer, strategy)?
                .summary
                .map(|s| s.eer))
        };
        let all: Vec<&UtteranceRecord> = train_set.iter().collect();
        let end_loss = batch_gradients(&state, &all, config)?.0.value;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            end_loss,
            terms,
            val_eer_ensemble: eer_for(ScoreStrategy::Ensemble)?,
            val_eer_max: eer_for(ScoreStrategy::Max)?,
            val_eer_head: if config.loss.uses_head() {
                eer_for(ScoreStrategy::Head)?
            } else {
                None
            },
            centroid_cosine: state.centroids.mean_pairwise_cosine(),
        };
        epochs.push(metrics);
    }

    let report = TrainReport {
        loss: config.loss,
        seed: config.seed,
        train_records: train_set.len(),
        validation_records: validation.len(),
        augmented_records: train_set.iter().filter(|r| r.augmented).count(),
        epochs,
        final_checkpoint: None,
    };
    let metadata = TrainingMetadata {
        seed: config.seed,
        epochs: config.epochs,
        steps: optimizer.steps() as usize,
        loss_curve: report.loss_curve(),
    };
    let checkpoint = Checkpoint::new(
        state.encoder,
        state.centroids,
        state.head,
        config.clone(),
        metadata,
    );
    Ok((report, checkpoint))
}

/// Writes `checkpoint.json`, `report.json` and `metrics.csv` into `dir`.
pub fn write_training_outputs(
    dir: &Path,
    report: &mut TrainReport,
    checkpoint: &Checkpoint,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| QamoError::io(dir, e))?;
    let ck_path = dir.join("checkpoint.json");
    checkpoint.save(&ck_path)?;
    report.final_checkpoint = Some("checkpoint.json".into());
    write_atomic(
        &dir.join("report.json"),
        serde_json::to_string_pretty(report)?.as_bytes(),
    )?;
    write_atomic(&dir.join("metrics.csv"), report.metrics_csv()?.as_bytes())
}
