//! Small convolutional encoder producing `D×H×W` feature maps, plus the
//! pooling + MLP projection head that turns them into global embeddings.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RaplError, Result};
use crate::numerics::{column_moments, Tape, Tensor, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Input `(channels, height, width)`.
    pub input_dims: [usize; 3],
    /// Feature map `(D, H, W)`.
    pub feature_dims: [usize; 3],
    /// Widths of the two strided 3×3 convolutions.
    pub conv_channels: [usize; 2],
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    /// Batch normalization after each hidden head layer.
    pub head_norm: bool,
    /// Learned per-channel, per-location bias on the feature map.
    pub positional_bias: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dims: [1, 16, 16],
            feature_dims: [64, 4, 4],
            conv_channels: [16, 32],
            mlp_hidden: 256,
            embed_dim: 64,
            head_norm: true,
            positional_bias: true,
            seed: 0,
        }
    }
}

/// Conv and head weight/bias tensors precede the normalization parameters.
const LINEAR_TENSORS: usize = 12;

/// Output extent of a 3×3, stride 2, pad 1 convolution.
fn strided(extent: usize) -> usize {
    (extent + 2 - 3) / 2 + 1
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_dims;
        let [d, fh, fw] = self.feature_dims;
        if [c, h, w, d, fh, fw, self.mlp_hidden, self.embed_dim]
            .iter()
            .chain(&self.conv_channels)
            .any(|&v| v == 0)
        {
            return Err(RaplError::Config("encoder extents must be positive".into()));
        }
        if h < 2 || w < 2 {
            return Err(RaplError::Config("input must be at least 2×2".into()));
        }
        if d < fh * fw {
            return Err(RaplError::Config(format!(
                "{d} channels cannot cover {} regions",
                fh * fw
            )));
        }
        let (oh, ow) = (strided(strided(h)), strided(strided(w)));
        if (oh, ow) != (fh, fw) {
            return Err(RaplError::Config(format!(
                "input {h}×{w} yields a {oh}×{ow} feature map, config expects {fh}×{fw}"
            )));
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.feature_dims[1] * self.feature_dims[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[in × out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Affine batch normalization with running statistics for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl HeadNorm {
    fn new(width: usize) -> Self {
        HeadNorm {
            gain: Tensor::full(&[width], 1.0),
            shift: Tensor::zeros(&[width]),
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::full(&[width], 1.0),
        }
    }

    /// Folds the batch moments of `x` (`[N, width]`) into the running
    /// statistics. The variance is the unbiased estimate.
    pub fn update_running(&mut self, x: &Tensor) {
        let (n, m) = (x.rows(), x.row_len());
        let (mean, var) = column_moments(x.data(), n, m);
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        for (r, v) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * v;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&var) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * v * unbias;
        }
    }
}

/// Which statistics the head normalization uses.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    Batch,
    Running(&'a [HeadNorm]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub conv1: (Tensor, Tensor),
    pub conv2: (Tensor, Tensor),
    /// 1×1 convolution to `D` channels; its output is the feature map.
    pub conv3: (Tensor, Tensor),
    pub head: Vec<Linear>,
    /// One per hidden head layer, or empty when normalization is off.
    #[serde(default)]
    pub head_norm: Vec<HeadNorm>,
    /// `[D, H, W]`, added to the feature map before its activation.
    #[serde(default)]
    pub position: Option<Tensor>,
    /// ReLU between head layers; off only for the degenerate identity head.
    pub head_activation: bool,
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let [c, _, _] = config.input_dims;
        let [c1, c2] = config.conv_channels;
        let d = config.feature_dims[0];
        let conv1 = (he_uniform(&[c1, c, 3, 3], c * 9, &mut rng), Tensor::zeros(&[c1]));
        let conv2 = (he_uniform(&[c2, c1, 3, 3], c1 * 9, &mut rng), Tensor::zeros(&[c2]));
        let conv3 = (he_uniform(&[d, c2, 1, 1], c2, &mut rng), Tensor::zeros(&[d]));
        let dims = [d, config.mlp_hidden, config.mlp_hidden, config.embed_dim];
        let head = dims
            .windows(2)
            .map(|io| Linear {
                weight: he_uniform(&[io[0], io[1]], io[0], &mut rng),
                bias: Tensor::zeros(&[io[1]]),
            })
            .collect();
        let head_norm = if config.head_norm {
            vec![HeadNorm::new(config.mlp_hidden); 2]
        } else {
            Vec::new()
        };
        let position = config
            .positional_bias
            .then(|| Tensor::zeros(&config.feature_dims));
        Ok(EncoderParams {
            conv1,
            conv2,
            conv3,
            head,
            head_norm,
            position,
            head_activation: true,
        })
    }

    /// Head of three identity layers with zero bias and no activation, so
    /// `project` returns the pooled vector unchanged. Requires
    /// `mlp_hidden == embed_dim == D`.
    pub fn with_identity_head(mut self) -> Result<Self> {
        let d = self.conv3.0.shape()[0];
        for layer in &self.head {
            if layer.weight.shape() != [d, d] {
                return Err(RaplError::Config(
                    "identity head needs mlp_hidden == embed_dim == D".into(),
                ));
            }
        }
        for layer in &mut self.head {
            layer.weight = Tensor::identity(d);
            layer.bias = Tensor::zeros(&[d]);
        }
        self.head_norm.clear();
        self.head_activation = false;
        Ok(self)
    }

    /// Parameter tensors in a fixed order shared with [`Self::tensors_mut`]
    /// and [`EncoderVars`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.conv1.0,
            &self.conv1.1,
            &self.conv2.0,
            &self.conv2.1,
            &self.conv3.0,
            &self.conv3.1,
        ];
        for l in &self.head {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for n in &self.head_norm {
            out.push(&n.gain);
            out.push(&n.shift);
        }
        out.extend(&self.position);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.conv1.0,
            &mut self.conv1.1,
            &mut self.conv2.0,
            &mut self.conv2.1,
            &mut self.conv3.0,
            &mut self.conv3.1,
        ];
        for l in &mut self.head {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for n in &mut self.head_norm {
            out.push(&mut n.gain);
            out.push(&mut n.shift);
        }
        out.extend(&mut self.position);
        out
    }

    /// Whether tensor `i` (in [`Self::tensors`] order) is a convolution or
    /// linear weight, as opposed to a bias or normalization parameter.
    pub fn is_weight(i: usize) -> bool {
        i < LINEAR_TENSORS && i % 2 == 0
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Puts every parameter on `tape`, tracked or constant.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<EncoderVars> {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.bind(vars))
    }

    /// Wraps handles recorded elsewhere, in [`Self::tensors`] order.
    pub fn bind(&self, vars: Vec<Var>) -> EncoderVars {
        EncoderVars {
            vars,
            head_activation: self.head_activation,
            norms: self.head_norm.len(),
            position: self.position.is_some(),
        }
    }
}

/// Tape handles for an [`EncoderParams`], in [`EncoderParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub vars: Vec<Var>,
    head_activation: bool,
    norms: usize,
    position: bool,
}

impl EncoderVars {
    fn norm_vars(&self) -> &[Var] {
        &self.vars[LINEAR_TENSORS..LINEAR_TENSORS + 2 * self.norms]
    }

    fn position_var(&self) -> Option<Var> {
        self.position.then(|| self.vars[LINEAR_TENSORS + 2 * self.norms])
    }
}

/// `N×D×H×W` activation block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 4 {
            return Err(RaplError::Dimension(format!(
                "feature map must be N×D×H×W, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(RaplError::NonFinite("feature map".into()));
        }
        Ok(FeatureMap { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    /// `(D, H, W)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[1], s[2], s[3])
    }

    /// Single sample as a `D×H×W` tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        let (d, h, w) = self.dims();
        Tensor::new(vec![d, h, w], self.values.row(i).to_vec()).expect("sample shape")
    }
}

/// Global embeddings with optional labels and view pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub vectors: Tensor,
    pub labels: Option<Vec<usize>>,
    pub view_pair_index: Option<Vec<usize>>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(RaplError::Dimension("embeddings must be N×d".into()));
        }
        Ok(EmbeddingBatch {
            vectors,
            labels: None,
            view_pair_index: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.vectors.rows() {
            return Err(RaplError::Dimension(format!(
                "{} labels for {} embeddings",
                labels.len(),
                self.vectors.rows()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_pairing(mut self, pairing: Vec<usize>) -> Result<Self> {
        validate_pairing(&pairing, self.vectors.rows())?;
        self.view_pair_index = Some(pairing);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pairing must be an involution without fixed points over `n` rows.
pub fn validate_pairing(pairing: &[usize], n: usize) -> Result<()> {
    if pairing.len() != n {
        return Err(RaplError::Dimension(format!(
            "pairing of length {} for {n} rows",
            pairing.len()
        )));
    }
    for (i, &j) in pairing.iter().enumerate() {
        if j >= n || j == i || pairing[j] != i {
            return Err(RaplError::InvalidArgument(format!(
                "pairing is not a fixed-point-free involution at row {i}"
            )));
        }
    }
    Ok(())
}

/// Rows `i` and `i + n` are the two views of sample `i`.
pub fn two_view_pairing(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect()
}

/// Records the convolution stack on `tape`: `input[N×C×h×w] → [N×D×H×W]`.
pub fn encode_on(tape: &mut Tape, vars: &EncoderVars, input: Var) -> Result<Var> {
    let v = &vars.vars;
    let x = tape.conv2d(input, v[0], v[1], 2, 1)?;
    let x = tape.relu(x)?;
    let x = tape.conv2d(x, v[2], v[3], 2, 1)?;
    let x = tape.relu(x)?;
    let mut x = tape.conv2d(x, v[4], v[5], 1, 0)?;
    if let Some(pos) = vars.position_var() {
        let shape = tape.value(x).shape().to_vec();
        let flat = tape.reshape(x, &[shape[0], shape[1..].iter().product()])?;
        let flat = tape.add_bias(flat, pos)?;
        x = tape.reshape(flat, &shape)?;
    }
    tape.relu(x)
}

/// Global average pooling, `[N×D×H×W] → [N×D]`.
pub fn pool_on(tape: &mut Tape, fm: Var) -> Result<Var> {
    tape.spatial_mean(fm)
}

/// Head output plus the pre-normalization activations of each hidden layer.
#[derive(Clone, Debug)]
pub struct Projection {
    pub embedding: Var,
    pub pre_norm: Vec<Var>,
}

/// Pooling followed by the MLP head, normalizing with batch statistics.
pub fn project_on(tape: &mut Tape, vars: &EncoderVars, fm: Var) -> Result<Var> {
    Ok(project_traced(tape, vars, fm, NormMode::Batch)?.embedding)
}

pub fn project_traced(tape: &mut Tape, vars: &EncoderVars, fm: Var, mode: NormMode) -> Result<Projection> {
    let mut x = pool_on(tape, fm)?;
    let layers: Vec<(Var, Var)> = vars.vars[6..LINEAR_TENSORS].chunks(2).map(|p| (p[0], p[1])).collect();
    let norms: Vec<(Var, Var)> = vars.norm_vars().chunks(2).map(|p| (p[0], p[1])).collect();
    let last = layers.len() - 1;
    let mut pre_norm = Vec::new();
    for (i, (w, b)) in layers.into_iter().enumerate() {
        x = tape.matmul(x, w)?;
        x = tape.add_bias(x, b)?;
        if i == last {
            break;
        }
        if let Some(&(gain, shift)) = norms.get(i) {
            pre_norm.push(x);
            x = match mode {
                NormMode::Batch => tape.batch_norm(x, NORM_EPS)?,
                NormMode::Running(stats) => {
                    let s = &stats[i];
                    let neg_mean = tape.constant(&s.running_mean.map(|v| -v))?;
                    let inv_std = tape.constant(&s.running_var.map(|v| 1.0 / (v + NORM_EPS).sqrt()))?;
                    let centered = tape.add_bias(x, neg_mean)?;
                    tape.mul_cols(centered, inv_std)?
                }
            };
            x = tape.mul_cols(x, gain)?;
            x = tape.add_bias(x, shift)?;
        }
        if vars.head_activation {
            x = tape.relu(x)?;
        }
    }
    Ok(Projection { embedding: x, pre_norm })
}

fn check_input(params: &EncoderParams, batch: &Tensor) -> Result<()> {
    let w = params.conv1.0.shape();
    match batch.shape() {
        [_, c, _, _] if *c == w[1] => Ok(()),
        s => Err(RaplError::Dimension(format!(
            "encoder expects N×{}×h×w input, got {s:?}",
            w[1]
        ))),
    }
}

pub fn encode(params: &EncoderParams, batch: &Tensor) -> Result<FeatureMap> {
    check_input(params, batch)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false)?;
    let x = tape.constant(batch)?;
    let fm = encode_on(&mut tape, &vars, x)?;
    FeatureMap::new(tape.value(fm).clone())
}

pub fn project(params: &EncoderParams, fm: &FeatureMap) -> Result<EmbeddingBatch> {
    let d = params.conv3.0.shape()[0];
    if fm.dims().0 != d {
        return Err(RaplError::Dimension(format!(
            "feature map has {} channels, head expects {d}",
            fm.dims().0
        )));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false)?;
    let x = tape.constant(fm.values())?;
    let v = project_traced(&mut tape, &vars, x, NormMode::Running(&params.head_norm))?.embedding;
    EmbeddingBatch::new(tape.value(v).clone())
}

/// Spatially pooled (pre-head) features.
pub fn pooled(fm: &FeatureMap) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(fm.values())?;
    let p = pool_on(&mut tape, x)?;
    Ok(tape.value(p).clone())
}

/// Versioned JSON checkpoint with the config echoed alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheckpoint {
    pub version: u32,
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl EncoderCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| RaplError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RaplError::io(path, e))?;
        let ckpt: EncoderCheckpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(RaplError::Format {
                path: path.to_path_buf(),
                detail: format!("unsupported checkpoint version {}", ckpt.version),
            });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            input_dims: [1, 8, 8],
            feature_dims: [8, 2, 2],
            conv_channels: [3, 4],
            mlp_hidden: 6,
            embed_dim: 4,
            head_norm: true,
            positional_bias: true,
            seed: 3,
        }
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let mut c = EncoderConfig::default();
        c.feature_dims = [8, 4, 4];
        assert!(c.validate().is_err());
        c.feature_dims = [64, 3, 3];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_input_with_zero_final_layer_gives_zero_map() {
        let mut params = EncoderParams::init(&EncoderConfig::default()).unwrap();
        params.conv3.0 = Tensor::zeros(params.conv3.0.shape());
        let fm = encode(&params, &Tensor::zeros(&[2, 1, 16, 16])).unwrap();
        assert_eq!(fm.values().shape(), &[2, 64, 4, 4]);
        assert!(fm.values().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = EncoderConfig::default();
        let x = random_input(&[3, 1, 16, 16], 1);
        let a = encode(&EncoderParams::init(&cfg).unwrap(), &x).unwrap();
        let b = encode(&EncoderParams::init(&cfg).unwrap(), &x).unwrap();
        assert_eq!(a.values().to_bits(), b.values().to_bits());
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let params = EncoderParams::init(&EncoderConfig::default()).unwrap();
        assert!(encode(&params, &Tensor::zeros(&[1, 3, 16, 16])).is_err());
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let fm = FeatureMap::new(Tensor::full(&[2, 8, 2, 2], 1.75)).unwrap();
        assert!(pooled(&fm).unwrap().data().iter().all(|v| *v == 1.75));
    }

    #[test]
    fn identity_head_passes_pooled_vector_through() {
        let cfg = EncoderConfig {
            mlp_hidden: 8,
            embed_dim: 8,
            ..small_config()
        };
        let params = EncoderParams::init(&cfg).unwrap().with_identity_head().unwrap();
        let fm = FeatureMap::new(random_input(&[3, 8, 2, 2], 9)).unwrap();
        let v = project(&params, &fm).unwrap();
        assert_eq!(v.vectors, pooled(&fm).unwrap());
    }

    #[test]
    fn pooling_ignores_spatial_shuffles() {
        let x = random_input(&[1, 2, 2, 2], 4);
        let d = x.data();
        // swap the cells of each channel in a fixed non-trivial order
        let shuffled: Vec<f64> = d
            .chunks(4)
            .flat_map(|c| [c[3], c[1], c[0], c[2]])
            .collect();
        let a = pooled(&FeatureMap::new(x.clone()).unwrap()).unwrap();
        let b = pooled(&FeatureMap::new(Tensor::new(vec![1, 2, 2, 2], shuffled).unwrap()).unwrap())
            .unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn project_is_permutation_equivariant() {
        let params = EncoderParams::init(&small_config()).unwrap();
        let fm = random_input(&[4, 8, 2, 2], 5);
        let perm = [2, 0, 3, 1];
        let a = project(&params, &FeatureMap::new(fm.clone()).unwrap()).unwrap();
        let b = project(&params, &FeatureMap::new(fm.select_rows(&perm).unwrap()).unwrap()).unwrap();
        assert_eq!(a.vectors.select_rows(&perm).unwrap(), b.vectors);
    }

    #[test]
    fn encode_sum_gradient_check() {
        let cfg = small_config();
        for seed in 0..3 {
            let params = EncoderParams::init(&EncoderConfig { seed, ..cfg.clone() }).unwrap();
            let x = random_input(&[2, 1, 8, 8], 40 + seed);
            // zero-initialized biases would sit exactly on ReLU kinks
            let inputs: Vec<Tensor> = params
                .tensors()
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let jitter = random_input(t.shape(), 100 + i as u64);
                    Tensor::from_fn(t.shape(), |j| t.data()[j] + 0.05 * jitter.data()[j])
                })
                .collect();
            let report = grad_check(
                "encode",
                |tape, p| {
                    let xin = tape.constant(&x)?;
                    let vars = params.bind(p.to_vec());
                    let fm = encode_on(tape, &vars, xin)?;
                    tape.sum(fm)
                },
                &inputs,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = EncoderConfig::default();
        let ckpt = EncoderCheckpoint {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            params: EncoderParams::init(&cfg).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.json");
        ckpt.save(&path).unwrap();
        let back = EncoderCheckpoint::load(&path).unwrap();
        for (a, b) in ckpt.params.tensors().iter().zip(back.params.tensors()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.config, cfg);
    }
}
