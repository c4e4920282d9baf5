//! Utterance records, MOS-based quality labeling, JSONL I/O, synthetic
//! quality-stratified datasets and feature-space augmentation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{QamoError, Result};
use crate::numerics::{all_finite, gaussian_vec, SeededRng};

pub const MOS_MIN: f64 = 1.0;
pub const MOS_MAX: f64 = 5.0;

/// Detection label. Bona fide is class 0, spoof class 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bonafide" => Some(Label::Bonafide),
            "spoof" => Some(Label::Spoof),
            _ => None,
        }
    }
}

/// MOS cut points splitting `[1, 5]` into quality levels.
///
/// A MOS exactly on a cut point belongs to the upper level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy", into = "RawPolicy")]
pub struct QualityPolicy {
    thresholds: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    thresholds: Option<Vec<f64>>,
}

impl TryFrom<RawPolicy> for QualityPolicy {
    type Error = QamoError;

    fn try_from(raw: RawPolicy) -> Result<Self> {
        match (raw.tau, raw.thresholds) {
            (Some(_), Some(_)) => Err(QamoError::InvalidPolicy(
                "give either `tau` or `thresholds`, not both".into(),
            )),
            (Some(tau), None) => QualityPolicy::with_tau(tau),
            (None, Some(cuts)) => QualityPolicy::new(cuts),
            (None, None) => Ok(QualityPolicy::default()),
        }
    }
}

impl From<QualityPolicy> for RawPolicy {
    fn from(p: QualityPolicy) -> Self {
        RawPolicy {
            tau: None,
            thresholds: Some(p.thresholds),
        }
    }
}

impl Default for QualityPolicy {
    fn default() -> Self {
        Self {
            thresholds: vec![Self::DEFAULT_TAU],
        }
    }
}

impl QualityPolicy {
    pub const DEFAULT_TAU: f64 = 2.5;

    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        for t in &thresholds {
            if !(t.is_finite() && *t > MOS_MIN && *t < MOS_MAX) {
                return Err(QamoError::InvalidPolicy(format!(
                    "cut point {t} must lie strictly inside (1, 5)"
                )));
            }
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(QamoError::InvalidPolicy(
                "cut points must be strictly ascending".into(),
            ));
        }
        Ok(Self { thresholds })
    }

    /// Two levels split at `tau`.
    pub fn with_tau(tau: f64) -> Result<Self> {
        Self::new(vec![tau])
    }

    /// A single level (every MOS maps to 0).
    pub fn single_level() -> Self {
        Self { thresholds: vec![] }
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn tau(&self) -> Option<f64> {
        self.thresholds.first().copied()
    }

    pub fn num_levels(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// MOS band `[lo, hi)` covered by `level` (the top band is closed at 5).
    pub fn band(&self, level: usize) -> Option<(f64, f64)> {
        if level >= self.num_levels() {
            return None;
        }
        let lo = if level == 0 {
            MOS_MIN
        } else {
            self.thresholds[level - 1]
        };
        let hi = self.thresholds.get(level).copied().unwrap_or(MOS_MAX);
        Some((lo, hi))
    }
}

/// Bucket index of `mos`.
pub fn quality_label(mos: f64, policy: &QualityPolicy) -> Result<usize> {
    if !(MOS_MIN..=MOS_MAX).contains(&mos) {
        return Err(QamoError::MosOutOfRange(mos));
    }
    Ok(policy.thresholds.iter().take_while(|&&t| mos >= t).count())
}

/// One utterance: raw features, label, optional MOS and derived quality.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub label: Label,
    pub mos: Option<f64>,
    /// Present only for bona fide records whose quality is known.
    pub quality: Option<usize>,
    pub augmented: bool,
}

impl UtteranceRecord {
    /// Builds a record and derives its quality level from `mos`.
    pub fn new(
        id: impl Into<String>,
        features: Vec<f64>,
        label: Label,
        mos: Option<f64>,
        augmented: bool,
        policy: &QualityPolicy,
    ) -> Result<Self> {
        let mut rec = Self {
            id: id.into(),
            features,
            label,
            mos,
            quality: None,
            augmented,
        };
        rec.relabel(policy)?;
        Ok(rec)
    }

    /// Recomputes `quality` from `mos`, `label` and `augmented`.
    pub fn relabel(&mut self, policy: &QualityPolicy) -> Result<()> {
        self.quality = match (self.label, self.augmented, self.mos) {
            (Label::Spoof, _, mos) => {
                if let Some(m) = mos {
                    quality_label(m, policy)?;
                }
                None
            }
            (Label::Bonafide, true, _) => Some(0),
            (Label::Bonafide, false, Some(m)) => Some(quality_label(m, policy)?),
            (Label::Bonafide, false, None) => None,
        };
        Ok(())
    }

    /// Checks the quality-level invariant against `policy`.
    pub fn quality_consistent(&self, policy: &QualityPolicy) -> bool {
        match self.label {
            Label::Spoof => self.quality.is_none(),
            Label::Bonafide if self.augmented => self.quality == Some(0),
            Label::Bonafide => match self.mos {
                Some(m) => quality_label(m, policy).ok() == self.quality,
                None => self.quality.is_none(),
            },
        }
    }
}

/// On-disk JSONL line. Quality is never stored.
#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    features: Option<Vec<f64>>,
    #[serde(default)]
    label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mos: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    augmented: bool,
}

/// Parses JSONL text (one record per line; blank lines are skipped).
pub fn parse_jsonl<R: BufRead>(reader: R, policy: &QualityPolicy) -> Result<Vec<UtteranceRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| QamoError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: JsonRecord = serde_json::from_str(&line).map_err(|e| QamoError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let id = raw.id.ok_or(QamoError::MissingField {
            line: lineno,
            field: "id",
        })?;
        let features = raw.features.ok_or(QamoError::MissingField {
            line: lineno,
            field: "features",
        })?;
        let label = raw.label.ok_or(QamoError::MissingField {
            line: lineno,
            field: "label",
        })?;
        if features.is_empty() {
            return Err(QamoError::Parse {
                line: lineno,
                message: "empty feature vector".into(),
            });
        }
        if !all_finite(&features) || raw.mos.is_some_and(|m| !m.is_finite()) {
            return Err(QamoError::NonFiniteFeature { line: lineno });
        }
        let rec = UtteranceRecord::new(id, features, label, raw.mos, raw.augmented, policy)
            .map_err(|e| QamoError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>, policy: &QualityPolicy) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| QamoError::io(path, e))?;
    parse_jsonl(BufReader::new(file), policy)
}

pub fn write_jsonl<W: Write>(mut writer: W, records: &[UtteranceRecord]) -> Result<()> {
    for r in records {
        let raw = JsonRecord {
            id: Some(r.id.clone()),
            features: Some(r.features.clone()),
            label: Some(r.label),
            mos: r.mos,
            augmented: r.augmented,
        };
        serde_json::to_writer(&mut writer, &raw)?;
        writer
            .write_all(b"\n")
            .map_err(|e| QamoError::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn save_jsonl(path: impl AsRef<Path>, records: &[UtteranceRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| QamoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&mut w, records)?;
    w.flush().map_err(|e| QamoError::io(path, e))
}

/// One Gaussian cluster of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub name: String,
    pub label: Label,
    /// MOS band (as a quality level) the cluster's MOS values are drawn
    /// from. Spoof records get a MOS but never a quality level.
    #[serde(default)]
    pub quality: Option<usize>,
    pub mean: Vec<f64>,
    pub spread: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub policy: QualityPolicy,
    pub clusters: Vec<ClusterSpec>,
}

impl SyntheticSpec {
    /// Four-cluster layout in 8 dimensions: low- and high-quality bona fide
    /// plus two spoof clusters, `per_cluster` samples each.
    pub fn four_cluster(seed: u64, per_cluster: usize) -> Self {
        let axis = |pairs: &[(usize, f64)]| {
            let mut v = vec![0.0; 8];
            for &(i, x) in pairs {
                v[i] = x;
            }
            v
        };
        let cluster = |name: &str, label, quality, mean| ClusterSpec {
            name: name.into(),
            label,
            quality,
            mean,
            spread: 0.5,
            count: per_cluster,
        };
        Self {
            dim: 8,
            seed,
            policy: QualityPolicy::default(),
            clusters: vec![
                cluster(
                    "bonafide-low",
                    Label::Bonafide,
                    Some(0),
                    axis(&[(0, 2.5), (1, 1.5)]),
                ),
                cluster(
                    "bonafide-high",
                    Label::Bonafide,
                    Some(1),
                    axis(&[(0, 2.5), (1, -1.5)]),
                ),
                cluster(
                    "spoof-a",
                    Label::Spoof,
                    Some(0),
                    axis(&[(0, -2.0), (2, 2.0)]),
                ),
                cluster(
                    "spoof-b",
                    Label::Spoof,
                    Some(1),
                    axis(&[(0, -2.0), (2, -2.0)]),
                ),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(QamoError::InvalidArgument(msg));
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        for c in &self.clusters {
            if c.count == 0 {
                return bad(format!("cluster `{}` has count 0", c.name));
            }
            if !(c.spread > 0.0 && c.spread.is_finite()) {
                return bad(format!("cluster `{}` needs a positive spread", c.name));
            }
            if c.mean.len() != self.dim || !all_finite(&c.mean) {
                return bad(format!(
                    "cluster `{}` mean must have {} finite values",
                    c.name, self.dim
                ));
            }
            if let Some(q) = c.quality.filter(|&q| q >= self.policy.num_levels()) {
                return bad(format!("cluster `{}` quality {q} out of range", c.name));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.clusters.iter().map(|c| c.count).sum()
    }
}

/// Samples every cluster in declaration order. Clusters with a quality
/// level get a MOS drawn uniformly inside that level's band.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<UtteranceRecord>> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let mut out = Vec::with_capacity(spec.total());
    for c in &spec.clusters {
        for i in 0..c.count {
            let features = gaussian_vec(&mut rng, &c.mean, c.spread);
            let mos = c.quality.map(|q| {
                let (lo, hi) = spec.policy.band(q).expect("validated");
                rng.uniform(lo, hi)
            });
            out.push(UtteranceRecord::new(
                format!("{}-{i:05}", c.name),
                features,
                c.label,
                mos,
                false,
                &spec.policy,
            )?);
        }
    }
    Ok(out)
}

/// Adds Gaussian noise to the features and marks the record augmented.
/// Bona fide records drop to quality level 0; spoof records keep none.
pub fn augment(record: &UtteranceRecord, noise_scale: f64, rng: &mut SeededRng) -> UtteranceRecord {
    let mut out = record.clone();
    if noise_scale > 0.0 {
        for f in &mut out.features {
            *f += noise_scale * rng.normal();
        }
    }
    out.augmented = true;
    out.quality = match out.label {
        Label::Bonafide => Some(0),
        Label::Spoof => None,
    };
    out
}

/// Augments a seeded random subset of exactly `round(fraction · N)` records
/// in place (order is preserved).
pub fn balance_augmentation(
    records: &[UtteranceRecord],
    fraction: f64,
    noise_scale: f64,
    rng: &mut SeededRng,
) -> Result<Vec<UtteranceRecord>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(QamoError::InvalidArgument(format!(
            "augmentation fraction {fraction} outside [0, 1]"
        )));
    }
    let amount = (fraction * records.len() as f64).round() as usize;
    let mut out = records.to_vec();
    for i in rng.sample_indices(records.len(), amount) {
        out[i] = augment(&records[i], noise_scale, rng);
    }
    Ok(out)
}

/// Seeded split into `(train, held_out)` with `round(fraction · N)` held out.
/// Both parts keep the input order.
pub fn split_records(
    records: &[UtteranceRecord],
    fraction: f64,
    rng: &mut SeededRng,
) -> Result<(Vec<UtteranceRecord>, Vec<UtteranceRecord>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(QamoError::InvalidArgument(format!(
            "split fraction {fraction} outside [0, 1)"
        )));
    }
    let amount = (fraction * records.len() as f64).round() as usize;
    let held = rng.sample_indices(records.len(), amount);
    let mut mask = vec![false; records.len()];
    for i in held {
        mask[i] = true;
    }
    let (mut train, mut rest) = (Vec::new(), Vec::new());
    for (r, &m) in records.iter().zip(&mask) {
        if m {
            rest.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, rest))
}
