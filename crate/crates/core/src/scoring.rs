//! Countermeasure scoring (labeled / max / ensemble / head), EER, and the
//! score, histogram and embedding CSV exports.
//!
//! Polarity: a higher score always means "more bona fide".

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{quality_label, Label, QualityPolicy, UtteranceRecord};
use crate::error::{QamoError, Result};
use crate::model::{BinaryHead, CentroidBank, Checkpoint, EncoderModel};
use crate::numerics::all_finite;

pub const POLARITY: &str = "higher-is-bonafide";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreStrategy {
    /// Similarity to the centroid of the utterance's own quality level.
    Labeled,
    /// Highest similarity over all centroids.
    Max,
    /// Mean similarity over all centroids.
    Ensemble,
    /// Logit of the binary head (WCE baselines only).
    Head,
}

impl ScoreStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreStrategy::Labeled => "labeled",
            ScoreStrategy::Max => "max",
            ScoreStrategy::Ensemble => "ensemble",
            ScoreStrategy::Head => "head",
        }
    }
}

impl FromStr for ScoreStrategy {
    type Err = QamoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(ScoreStrategy::Labeled),
            "max" => Ok(ScoreStrategy::Max),
            "ensemble" => Ok(ScoreStrategy::Ensemble),
            "head" => Ok(ScoreStrategy::Head),
            other => Err(QamoError::InvalidArgument(format!(
                "unknown strategy `{other}`"
            ))),
        }
    }
}

/// CM score of a unit embedding against the centroid bank.
pub fn score(
    embedding: &[f64],
    bank: &CentroidBank,
    strategy: ScoreStrategy,
    quality: Option<usize>,
) -> Result<f64> {
    let sims = bank.similarities(embedding)?;
    match strategy {
        ScoreStrategy::Labeled => {
            let q = quality.ok_or(QamoError::MissingQuality { index: 0 })?;
            sims.get(q).copied().ok_or(QamoError::QualityOutOfRange {
                level: q,
                levels: sims.len(),
            })
        }
        ScoreStrategy::Max => Ok(sims.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        ScoreStrategy::Ensemble => Ok(sims.iter().sum::<f64>() / sims.len() as f64),
        ScoreStrategy::Head => Err(QamoError::InvalidArgument(
            "head scoring needs a binary head, not a centroid bank".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate with linear interpolation between operating points.
///
/// A threshold `θ` accepts scores `≥ θ`: FAR is the share of spoof scores
/// `≥ θ`, FRR the share of bona fide scores `< θ`. Operating points are
/// taken at the lowest score, at every midpoint between consecutive
/// distinct scores, and just above the highest score. The EER is where
/// `FRR − FAR` changes sign, interpolated linearly in both rate and
/// threshold. Scores whose classes are inverted yield an EER of 1.
pub fn compute_eer(bonafide: &[f64], spoof: &[f64]) -> Result<Eer> {
    if bonafide.is_empty() || spoof.is_empty() {
        return Err(QamoError::EmptyClass {
            bonafide: bonafide.len(),
            spoof: spoof.len(),
        });
    }
    if !all_finite(bonafide) || !all_finite(spoof) {
        return Err(QamoError::InvalidArgument("non-finite score".into()));
    }
    let mut all: Vec<(f64, bool)> = bonafide
        .iter()
        .map(|&s| (s, true))
        .chain(spoof.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nb = bonafide.len() as f64;
    let ns = spoof.len() as f64;

    // Sweep thresholds upward, moving each group of tied scores from
    // "accepted" to "rejected" once the threshold passes it.
    let mut points = Vec::with_capacity(all.len() + 1);
    points.push((all[0].0, 0.0, 1.0));
    let (mut rejected_bona, mut rejected_spoof) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let value = all[i].0;
        while i < all.len() && all[i].0 == value {
            if all[i].1 {
                rejected_bona += 1;
            } else {
                rejected_spoof += 1;
            }
            i += 1;
        }
        let theta = match all.get(i) {
            Some(next) => 0.5 * (value + next.0),
            None => value.next_up(),
        };
        points.push((
            theta,
            rejected_bona as f64 / nb,
            1.0 - rejected_spoof as f64 / ns,
        ));
    }
    Ok(crossing(&points))
}

/// First sign change of `FRR − FAR` along `(θ, FRR, FAR)` points.
pub(crate) fn crossing(points: &[(f64, f64, f64)]) -> Eer {
    for w in points.windows(2) {
        let (t0, frr0, far0) = w[0];
        let (t1, frr1, far1) = w[1];
        let d0 = frr0 - far0;
        let d1 = frr1 - far1;
        if d0 == 0.0 {
            return Eer {
                eer: frr0,
                threshold: t0,
            };
        }
        if d0 < 0.0 && d1 >= 0.0 {
            if d1 == 0.0 {
                return Eer {
                    eer: frr1,
                    threshold: t1,
                };
            }
            let t = d0 / (d0 - d1);
            return Eer {
                eer: frr0 + t * (frr1 - frr0),
                threshold: t0 + t * (t1 - t0),
            };
        }
    }
    // the last point always has FRR = 1, FAR = 0
    let &(t, frr, _) = points.last().expect("non-empty");
    Eer {
        eer: frr,
        threshold: t,
    }
}

/// Unit to score: features plus whatever is known about it. Quality is
/// derived from MOS regardless of label, since at inference it would come
/// from a MOS predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub label: Option<Label>,
    pub quality: Option<usize>,
}

impl InferenceRecord {
    pub fn from_record(r: &UtteranceRecord, policy: &QualityPolicy) -> Self {
        Self {
            id: r.id.clone(),
            features: r.features.clone(),
            label: Some(r.label),
            quality: r.mos.and_then(|m| quality_label(m, policy).ok()),
        }
    }

    /// Same record without its label.
    pub fn unlabeled(mut self) -> Self {
        self.label = None;
        self
    }
}

#[derive(Deserialize)]
struct JsonInference {
    id: String,
    features: Vec<f64>,
    #[serde(default)]
    label: Option<Label>,
    #[serde(default)]
    mos: Option<f64>,
}

/// Reads a JSONL file for scoring. `label` and `mos` are optional here.
pub fn load_inference_jsonl(
    path: impl AsRef<Path>,
    policy: &QualityPolicy,
) -> Result<Vec<InferenceRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| QamoError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| QamoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| QamoError::Parse {
            line: i + 1,
            message,
        };
        let raw: JsonInference =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !all_finite(&raw.features) {
            return Err(QamoError::NonFiniteFeature { line: i + 1 });
        }
        let quality = match raw.mos {
            Some(m) => Some(quality_label(m, policy).map_err(|e| parse_err(e.to_string()))?),
            None => None,
        };
        out.push(InferenceRecord {
            id: raw.id,
            features: raw.features,
            label: raw.label,
            quality,
        });
    }
    Ok(out)
}

/// Read-only view of trained parameters used for scoring.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    pub encoder: &'a EncoderModel,
    pub centroids: &'a CentroidBank,
    pub head: Option<&'a BinaryHead>,
}

impl<'a> Scorer<'a> {
    pub fn from_checkpoint(ck: &'a Checkpoint) -> Self {
        Self {
            encoder: &ck.encoder,
            centroids: &ck.centroids,
            head: ck.head.as_ref(),
        }
    }

    pub fn score_features(
        &self,
        features: &[f64],
        strategy: ScoreStrategy,
        quality: Option<usize>,
    ) -> Result<f64> {
        let e = self.encoder.forward(features)?.embedding;
        match strategy {
            ScoreStrategy::Head => self
                .head
                .ok_or_else(|| QamoError::InvalidArgument("checkpoint has no binary head".into()))?
                .logit(&e),
            s => score(&e, self.centroids, s, quality),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: String,
    pub score: f64,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub eer: f64,
    pub threshold: f64,
    pub bonafide_mean: f64,
    pub bonafide_std: f64,
    pub spoof_mean: f64,
    pub spoof_std: f64,
    pub polarity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub strategy: ScoreStrategy,
    pub entries: Vec<ScoreEntry>,
    /// Present when both classes are labeled.
    pub summary: Option<ScoreSummary>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ScoreReport {
    pub fn from_entries(strategy: ScoreStrategy, entries: Vec<ScoreEntry>) -> Result<Self> {
        let pick = |l| -> Vec<f64> {
            entries
                .iter()
                .filter(|e| e.label == Some(l))
                .map(|e| e.score)
                .collect()
        };
        let (bona, spoof) = (pick(Label::Bonafide), pick(Label::Spoof));
        let summary = if bona.is_empty() || spoof.is_empty() {
            None
        } else {
            let eer = compute_eer(&bona, &spoof)?;
            let (bonafide_mean, bonafide_std) = mean_std(&bona);
            let (spoof_mean, spoof_std) = mean_std(&spoof);
            Some(ScoreSummary {
                eer: eer.eer,
                threshold: eer.threshold,
                bonafide_mean,
                bonafide_std,
                spoof_mean,
                spoof_std,
                polarity: POLARITY.to_owned(),
            })
        };
        Ok(Self {
            strategy,
            entries,
            summary,
        })
    }

    /// `id,score,label,strategy` with a header row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "score", "label", "strategy"])?;
        for e in &self.entries {
            w.write_record([
                e.id.as_str(),
                &e.score.to_string(),
                e.label.map_or("", Label::as_str),
                self.strategy.as_str(),
            ])?;
        }
        w.flush().map_err(|e| QamoError::io("<csv>", e))
    }

    /// Reads a score CSV produced by [`ScoreReport::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut entries = Vec::new();
        let mut strategy = None;
        for (i, row) in r.records().enumerate() {
            let row = row?;
            let line = i + 2;
            let field = |k: usize| row.get(k).unwrap_or("");
            let score: f64 = field(1).parse().map_err(|_| QamoError::Parse {
                line,
                message: format!("bad score `{}`", field(1)),
            })?;
            let label = match field(2) {
                "" => None,
                s => Some(Label::parse(s).ok_or_else(|| QamoError::Parse {
                    line,
                    message: format!("bad label `{s}`"),
                })?),
            };
            let s: ScoreStrategy = field(3).parse().map_err(|e: QamoError| QamoError::Parse {
                line,
                message: e.to_string(),
            })?;
            if strategy.is_some_and(|prev| prev != s) {
                return Err(QamoError::Parse {
                    line,
                    message: "mixed strategies in one score file".into(),
                });
            }
            strategy = Some(s);
            entries.push(ScoreEntry {
                id: field(0).to_owned(),
                score,
                label,
            });
        }
        let strategy = strategy.ok_or_else(|| QamoError::Parse {
            line: 1,
            message: "score file has no rows".into(),
        })?;
        Self::from_entries(strategy, entries)
    }
}

/// Encodes and scores every record in order.
pub fn score_dataset(
    records: &[InferenceRecord],
    scorer: &Scorer<'_>,
    strategy: ScoreStrategy,
) -> Result<ScoreReport> {
    let entries = records
        .iter()
        .map(|r| {
            let score = scorer
                .score_features(&r.features, strategy, r.quality)
                .map_err(|e| e.for_record(&r.id))?;
            Ok(ScoreEntry {
                id: r.id.clone(),
                score,
                label: r.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreReport::from_entries(strategy, entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub bona_count: usize,
    pub spoof_count: usize,
}

/// Equal-width histogram over `[min, max]` of the labeled scores; the last
/// bin is closed. Unlabeled entries are not counted.
pub fn export_distributions(report: &ScoreReport, bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(QamoError::InvalidArgument("need at least one bin".into()));
    }
    let labeled: Vec<(f64, Label)> = report
        .entries
        .iter()
        .filter_map(|e| e.label.map(|l| (e.score, l)))
        .collect();
    let (lo, hi) = labeled
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(s, _)| {
            (lo.min(s), hi.max(s))
        });
    if labeled.is_empty() {
        return Ok(Vec::new());
    }
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|k| HistogramBin {
            bin_low: lo + k as f64 * width,
            bin_high: if k + 1 == bins && hi > lo {
                hi
            } else {
                lo + (k + 1) as f64 * width
            },
            bona_count: 0,
            spoof_count: 0,
        })
        .collect();
    for (s, l) in labeled {
        let k = (((s - lo) / width) as usize).min(bins - 1);
        match l {
            Label::Bonafide => out[k].bona_count += 1,
            Label::Spoof => out[k].spoof_count += 1,
        }
    }
    Ok(out)
}

pub fn write_histogram_csv<W: Write>(bins: &[HistogramBin], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bin_low", "bin_high", "bona_count", "spoof_count"])?;
    for b in bins {
        w.write_record([
            b.bin_low.to_string(),
            b.bin_high.to_string(),
            b.bona_count.to_string(),
            b.spoof_count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| QamoError::io("<csv>", e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub label: Option<Label>,
    pub quality: Option<usize>,
    pub embedding: Vec<f64>,
}

/// Unit embeddings of every record, for external projection tools.
pub fn export_embeddings(
    records: &[InferenceRecord],
    encoder: &EncoderModel,
) -> Result<Vec<EmbeddingRow>> {
    records
        .iter()
        .map(|r| {
            let embedding = encoder
                .forward(&r.features)
                .map_err(|e| e.for_record(&r.id))?
                .embedding;
            Ok(EmbeddingRow {
                id: r.id.clone(),
                label: r.label,
                quality: r.quality,
                embedding,
            })
        })
        .collect()
}

/// `id,label,quality,e0,…,e{D−1}`.
pub fn write_embeddings_csv<W: Write>(rows: &[EmbeddingRow], writer: W) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.embedding.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_owned(), "label".to_owned(), "quality".to_owned()];
    header.extend((0..dim).map(|k| format!("e{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.id.clone(),
            r.label.map_or(String::new(), |l| l.as_str().to_owned()),
            r.quality.map_or(String::new(), |q| q.to_string()),
        ];
        rec.extend(r.embedding.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| QamoError::io("<csv>", e))
}
