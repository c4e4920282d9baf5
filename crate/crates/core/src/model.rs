//! Learnable pieces: a feed-forward encoder producing unit-norm embeddings,
//! the quality centroid bank, the binary head used by the WCE baselines,
//! and the checkpoint container.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::QualityPolicy;
use crate::error::{QamoError, Result};
use crate::numerics::{axpy, check_dim, dot, norm, unit_normalize, Matrix, SeededRng};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer: `a = act(W x + b)`, `W` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows
    }
}

/// Encoder shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            embedding_dim: 16,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub layers: Vec<DenseLayer>,
}

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[k]` is the input to layer `k`; the last entry is the
    /// pre-normalization output `v`.
    pub inputs: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    pub embedding: Vec<f64>,
    pub raw_norm: f64,
}

/// Gradients for every encoder parameter plus the input features.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros_like(model: &EncoderModel) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weights.rows, l.weights.cols))
                .collect(),
            biases: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.bias.len()])
                .collect(),
            input: vec![0.0; model.input_dim()],
        }
    }

    /// Adds `other` into `self` (parameters and input alike).
    pub fn accumulate(&mut self, other: &EncoderGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            axpy(1.0, &b.data, &mut a.data);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            axpy(1.0, b, a);
        }
        axpy(1.0, &other.input, &mut self.input);
    }

    /// Parameter gradients in the same order as [`EncoderModel::params_mut`].
    pub fn parts(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.data.as_slice(), b.as_slice()])
            .collect()
    }
}

impl EncoderModel {
    /// Random initialization: zero biases, Gaussian weights with variance
    /// `2/fan_in` for relu layers and `1/fan_in` otherwise. The last layer
    /// is linear.
    pub fn new(input_dim: usize, spec: &EncoderSpec, rng: &mut SeededRng) -> Result<Self> {
        if input_dim == 0 || spec.embedding_dim < 2 || spec.hidden.contains(&0) {
            return Err(QamoError::InvalidArgument(
                "encoder dims must be positive and the embedding at least 2-d".into(),
            ));
        }
        let mut dims = vec![input_dim];
        dims.extend(&spec.hidden);
        dims.push(spec.embedding_dim);
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let activation = if k + 1 == n {
                    Activation::Identity
                } else {
                    spec.activation
                };
                let gain = if activation == Activation::Relu {
                    2.0
                } else {
                    1.0
                };
                let std = (gain / w[0] as f64).sqrt();
                let mut weights = Matrix::zeros(w[1], w[0]);
                for x in &mut weights.data {
                    *x = std * rng.normal();
                }
                DenseLayer {
                    weights,
                    bias: vec![0.0; w[1]],
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Builds a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(QamoError::InvalidArgument(
                "encoder needs at least one layer".into(),
            ));
        }
        for l in &layers {
            check_dim(l.output_dim(), l.bias.len())?;
            if !l.weights.is_finite() || !l.bias.iter().all(|b| b.is_finite()) {
                return Err(QamoError::InvalidArgument(
                    "non-finite encoder parameter".into(),
                ));
            }
        }
        for w in layers.windows(2) {
            check_dim(w[0].output_dim(), w[1].input_dim())?;
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::output_dim)
    }

    pub fn forward(&self, features: &[f64]) -> Result<ForwardTrace> {
        check_dim(self.input_dim(), features.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut x = features.to_vec();
        for layer in &self.layers {
            let mut z = layer.weights.mul_vec(&x)?;
            axpy(1.0, &layer.bias, &mut z);
            let a: Vec<f64> = z.iter().map(|&zi| layer.activation.apply(zi)).collect();
            inputs.push(x);
            pre_activations.push(z);
            x = a;
        }
        let raw_norm = norm(&x);
        let embedding = unit_normalize(&x)?;
        inputs.push(x);
        Ok(ForwardTrace {
            inputs,
            pre_activations,
            embedding,
            raw_norm,
        })
    }

    /// Backpropagates `grad_embedding = ∂L/∂x̂` through the normalization
    /// and every layer.
    pub fn backward(&self, trace: &ForwardTrace, grad_embedding: &[f64]) -> Result<EncoderGrads> {
        check_dim(self.embedding_dim(), grad_embedding.len())?;
        let xhat = &trace.embedding;
        // ∂x̂/∂v = (I − x̂x̂ᵀ)/‖v‖
        let radial = dot(xhat, grad_embedding);
        let mut delta: Vec<f64> = grad_embedding
            .iter()
            .zip(xhat)
            .map(|(g, x)| (g - x * radial) / trace.raw_norm)
            .collect();

        let mut grads = EncoderGrads::zeros_like(self);
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre_activations[k];
            let a = &trace.inputs[k + 1];
            for ((d, &zi), &ai) in delta.iter_mut().zip(z).zip(a) {
                *d *= layer.activation.derivative(zi, ai);
            }
            let input = &trace.inputs[k];
            let gw = &mut grads.weights[k];
            for (r, &dr) in delta.iter().enumerate() {
                axpy(dr, input, gw.row_mut(r));
            }
            grads.biases[k].copy_from_slice(&delta);
            delta = layer.weights.mul_vec_transposed(&delta)?;
        }
        grads.input = delta;
        Ok(grads)
    }

    /// Parameter slices in a fixed order: layer by layer, weights then bias.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// Unit-norm embedding for `features`.
pub fn encode(model: &EncoderModel, features: &[f64]) -> Result<Vec<f64>> {
    Ok(model.forward(features)?.embedding)
}

/// Reverse-mode gradients of `⟨grad_embedding, encode(features)⟩`.
pub fn encode_backward(
    model: &EncoderModel,
    features: &[f64],
    grad_embedding: &[f64],
) -> Result<EncoderGrads> {
    let trace = model.forward(features)?;
    model.backward(&trace, grad_embedding)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    RandomUnit,
    Orthogonal,
}

impl FromStr for InitScheme {
    type Err = QamoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-unit" => Ok(InitScheme::RandomUnit),
            "orthogonal" => Ok(InitScheme::Orthogonal),
            other => Err(QamoError::InvalidScheme(other.to_owned())),
        }
    }
}

/// `Q × D` matrix of unit-norm centroids, one per quality level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidBank {
    pub centroids: Matrix,
}

impl CentroidBank {
    /// Rows are normalized on construction.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let normalized = rows
            .iter()
            .map(|r| unit_normalize(r))
            .collect::<Result<Vec<_>>>()?;
        let centroids = Matrix::from_rows(&normalized)?;
        if centroids.rows == 0 {
            return Err(QamoError::InvalidArgument(
                "centroid bank needs Q >= 1".into(),
            ));
        }
        Ok(Self { centroids })
    }

    pub fn num_levels(&self) -> usize {
        self.centroids.rows
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols
    }

    pub fn centroid(&self, q: usize) -> &[f64] {
        self.centroids.row(q)
    }

    /// `w_qᵀ x̂` for every level.
    pub fn similarities(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        self.centroids.mul_vec(embedding)
    }

    /// Projects every row back onto the unit sphere.
    pub fn renormalize(&mut self) -> Result<()> {
        for q in 0..self.num_levels() {
            let row = self.centroids.row_mut(q);
            let n = norm(row);
            if !(n > 0.0 && n.is_finite()) {
                return Err(QamoError::ZeroNorm);
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(())
    }

    /// Mean pairwise cosine between centroids; `None` when `Q = 1`.
    pub fn mean_pairwise_cosine(&self) -> Option<f64> {
        let q = self.num_levels();
        if q < 2 {
            return None;
        }
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..q {
            for j in i + 1..q {
                total += dot(self.centroid(i), self.centroid(j)).clamp(-1.0, 1.0);
                pairs += 1;
            }
        }
        Some(total / pairs as f64)
    }
}

pub fn init_centroids(
    levels: usize,
    dim: usize,
    scheme: InitScheme,
    rng: &mut SeededRng,
) -> Result<CentroidBank> {
    if levels == 0 || dim < 2 {
        return Err(QamoError::InvalidArgument(format!(
            "need Q >= 1 and D >= 2 (Q={levels}, D={dim})"
        )));
    }
    if scheme == InitScheme::Orthogonal && levels > dim {
        return Err(QamoError::TooManyCentroids { levels, dim });
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(levels);
    while rows.len() < levels {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if scheme == InitScheme::Orthogonal {
            // two Gram-Schmidt passes keep the residual overlap near machine precision
            for _ in 0..2 {
                for r in &rows {
                    let c = dot(&v, r);
                    axpy(-c, r, &mut v);
                }
            }
        }
        if norm(&v) > 1e-8 {
            rows.push(unit_normalize(&v)?);
        }
    }
    CentroidBank::from_rows(&rows)
}

/// Linear bona fide logit `wᵀx̂ + b` for the WCE baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl BinaryHead {
    pub fn new(dim: usize, rng: &mut SeededRng) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        Self {
            weights: (0..dim).map(|_| std * rng.normal()).collect(),
            bias: 0.0,
        }
    }

    pub fn logit(&self, embedding: &[f64]) -> Result<f64> {
        check_dim(self.weights.len(), embedding.len())?;
        Ok(dot(&self.weights, embedding) + self.bias)
    }
}

pub const CHECKPOINT_FORMAT: &str = "qamo-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub loss_curve: Vec<f64>,
}

/// Everything needed to reproduce inference. Stored as JSON; floats are
/// written in shortest round-trip form so a reload is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub encoder: EncoderModel,
    pub centroids: CentroidBank,
    #[serde(default)]
    pub head: Option<BinaryHead>,
    pub policy: QualityPolicy,
    pub config: TrainConfig,
    pub metadata: TrainingMetadata,
}

impl Checkpoint {
    pub fn new(
        encoder: EncoderModel,
        centroids: CentroidBank,
        head: Option<BinaryHead>,
        config: TrainConfig,
        metadata: TrainingMetadata,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            encoder,
            centroids,
            head,
            policy: config.quality.clone(),
            config,
            metadata,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(QamoError::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        EncoderModel::from_layers(ck.encoder.layers.clone())?;
        check_dim(ck.encoder.embedding_dim(), ck.centroids.dim())?;
        Ok(ck)
    }

    /// Atomic save: writes a sibling temp file and renames it over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| QamoError::io(path, e))?;
        Self::from_json(&text)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| QamoError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| QamoError::io(&tmp, e))?;
    f.sync_all().map_err(|e| QamoError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| QamoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, DEFAULT_FD_STEP};

    fn identity_model(d: usize) -> EncoderModel {
        EncoderModel::from_layers(vec![DenseLayer {
            weights: Matrix::identity(d),
            bias: vec![0.0; d],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn encode_examples() {
        let m = identity_model(2);
        let e = encode(&m, &[3.0, 4.0]).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] - 0.8).abs() < 1e-15);

        let mut zero = identity_model(2);
        zero.layers[0].weights = Matrix::zeros(2, 2);
        assert!(matches!(
            encode(&zero, &[3.0, 4.0]),
            Err(QamoError::ZeroNorm)
        ));
        assert!(matches!(
            encode(&m, &[1.0]),
            Err(QamoError::DimMismatch { .. })
        ));

        let spec = EncoderSpec::default();
        let a = EncoderModel::new(8, &spec, &mut SeededRng::new(4)).unwrap();
        let b = EncoderModel::new(8, &spec, &mut SeededRng::new(4)).unwrap();
        let x = [0.3, -1.0, 2.0, 0.1, 0.0, 0.5, -0.2, 1.1];
        assert_eq!(encode(&a, &x).unwrap(), encode(&b, &x).unwrap());
        assert!((norm(&encode(&a, &x).unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn from_layers_checks_chaining() {
        let l1 = DenseLayer {
            weights: Matrix::zeros(4, 3),
            bias: vec![0.0; 4],
            activation: Activation::Relu,
        };
        let l2 = DenseLayer {
            weights: Matrix::zeros(2, 5),
            bias: vec![0.0; 2],
            activation: Activation::Identity,
        };
        assert!(EncoderModel::from_layers(vec![l1, l2]).is_err());
    }

    #[test]
    fn backward_zero_grad_gives_zero() {
        let m = EncoderModel::new(5, &EncoderSpec::default(), &mut SeededRng::new(1)).unwrap();
        let g = encode_backward(&m, &[1.0, 0.5, -0.3, 2.0, 0.0], &[0.0; 16]).unwrap();
        assert!(g.parts().iter().all(|p| p.iter().all(|&x| x == 0.0)));
        assert!(g.input.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_kills_radial_component() {
        let m = identity_model(3);
        let x = [1.0, -2.0, 0.5];
        let xhat = encode(&m, &x).unwrap();
        let g = encode_backward(&m, &x, &xhat).unwrap();
        assert!(g.input.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = EncoderSpec {
            hidden: vec![6],
            embedding_dim: 4,
            activation: Activation::Tanh,
        };
        let mut rng = SeededRng::new(21);
        let model = EncoderModel::new(3, &spec, &mut rng).unwrap();
        let x = [0.4, -0.7, 1.3];
        let g: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let analytic = encode_backward(&model, &x, &g).unwrap();

        let fd_input = finite_diff_grad(
            |v| dot(&g, &encode(&model, v).unwrap()),
            &x,
            DEFAULT_FD_STEP,
        );
        assert!(relative_error(&analytic.input, &fd_input) < 1e-6);

        let w0 = model.layers[0].weights.data.clone();
        let fd_w0 = finite_diff_grad(
            |w| {
                let mut m = model.clone();
                m.layers[0].weights.data.copy_from_slice(w);
                dot(&g, &encode(&m, &x).unwrap())
            },
            &w0,
            DEFAULT_FD_STEP,
        );
        assert!(relative_error(&analytic.weights[0].data, &fd_w0) < 1e-6);
    }

    #[test]
    fn centroid_init() {
        let mut rng = SeededRng::new(2);
        let bank = init_centroids(2, 8, InitScheme::Orthogonal, &mut rng).unwrap();
        assert!(dot(bank.centroid(0), bank.centroid(1)).abs() < 1e-12);
        for q in 0..2 {
            assert!((norm(bank.centroid(q)) - 1.0).abs() < 1e-12);
        }
        let single = init_centroids(1, 4, InitScheme::Orthogonal, &mut rng).unwrap();
        assert_eq!(single.num_levels(), 1);
        assert!(single.mean_pairwise_cosine().is_none());

        let a = init_centroids(3, 5, InitScheme::RandomUnit, &mut SeededRng::new(8)).unwrap();
        let b = init_centroids(3, 5, InitScheme::RandomUnit, &mut SeededRng::new(8)).unwrap();
        assert_eq!(a, b);

        assert!(matches!(
            init_centroids(5, 4, InitScheme::Orthogonal, &mut rng),
            Err(QamoError::TooManyCentroids { .. })
        ));
        assert!(matches!(
            "spiral".parse::<InitScheme>(),
            Err(QamoError::InvalidScheme(_))
        ));
    }

    #[test]
    fn orthogonal_init_fills_the_space() {
        let bank = init_centroids(6, 6, InitScheme::Orthogonal, &mut SeededRng::new(3)).unwrap();
        for i in 0..6 {
            for j in i + 1..6 {
                assert!(dot(bank.centroid(i), bank.centroid(j)).abs() < 1e-12);
            }
        }
    }
}
