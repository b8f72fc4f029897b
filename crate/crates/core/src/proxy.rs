//! Class proxies and the proxy-guided losses: top-k masked proxy
//! classification, proxy regularization and proxy-augmented contrastive
//! learning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans, KMeansOptions};
use crate::encoder::{validate_pairing, EmbeddingBatch};
use crate::error::{RaplError, Result};
use crate::numerics::kernels::masked_softmax_row;
use crate::numerics::{l2_normalize_rows, matmul, transpose, Tape, Tensor, Var, NORM_EPS};

/// Learnable class proxies. Old classes take ids `0..C^l`, new classes
/// `C^l..C^l + C^u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyBank {
    pub old_proxies: Tensor,
    pub new_proxies: Option<Tensor>,
    pub old_frozen: bool,
}

/// Tape handles for a registered bank.
#[derive(Clone, Copy, Debug)]
pub struct ProxyVars {
    pub old: Var,
    pub new: Option<Var>,
}

impl ProxyBank {
    pub fn new(old_proxies: Tensor) -> Result<Self> {
        if old_proxies.shape().len() != 2 || old_proxies.rows() == 0 {
            return Err(RaplError::Dimension("old proxies must be a non-empty C×d matrix".into()));
        }
        Ok(ProxyBank {
            old_proxies,
            new_proxies: None,
            old_frozen: false,
        })
    }

    /// `num_old` unit-norm proxies drawn from an isotropic Gaussian.
    pub fn random(num_old: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::from_fn(&[num_old, dim], |_| StandardNormal.sample(&mut rng));
        Self::new(l2_normalize_rows(&raw, NORM_EPS)?)
    }

    pub fn dim(&self) -> usize {
        self.old_proxies.row_len()
    }

    pub fn num_old(&self) -> usize {
        self.old_proxies.rows()
    }

    pub fn num_new(&self) -> usize {
        self.new_proxies.as_ref().map_or(0, |p| p.rows())
    }

    pub fn old_class_ids(&self) -> std::ops::Range<usize> {
        0..self.num_old()
    }

    pub fn new_class_ids(&self) -> std::ops::Range<usize> {
        self.num_old()..self.num_old() + self.num_new()
    }

    pub fn set_new_proxies(&mut self, new: Tensor) -> Result<()> {
        if new.shape().len() != 2 || new.row_len() != self.dim() {
            return Err(RaplError::Dimension(format!(
                "new proxies {:?} do not match proxy dimension {}",
                new.shape(),
                self.dim()
            )));
        }
        self.new_proxies = Some(new);
        Ok(())
    }

    pub fn renormalize_new(&mut self) -> Result<()> {
        if let Some(p) = &self.new_proxies {
            self.new_proxies = Some(l2_normalize_rows(p, NORM_EPS)?);
        }
        Ok(())
    }

    /// Frozen old proxies go on the tape as constants and receive no gradient.
    pub fn register(&self, tape: &mut Tape) -> Result<ProxyVars> {
        let old = if self.old_frozen {
            tape.constant(&self.old_proxies)?
        } else {
            tape.param(&self.old_proxies)?
        };
        let new = match &self.new_proxies {
            Some(p) => Some(tape.param(p)?),
            None => None,
        };
        Ok(ProxyVars { old, new })
    }
}

/// Number of hard negatives kept per sample: `round(ξ·C^l)`, at least 1 and
/// at most `C^l − 1`.
pub fn negatives_k(xi: f64, num_old: usize) -> usize {
    ((xi * num_old as f64).round() as usize).clamp(1, num_old.saturating_sub(1).max(1))
}

/// Cosine similarities between the rows of `v` and the rows of `p`.
pub fn similarity_on(tape: &mut Tape, v: Var, p: Var) -> Result<Var> {
    let dv = tape.value(v).shape().get(1).copied();
    let dp = tape.value(p).shape().get(1).copied();
    if dv.is_none() || dv != dp {
        return Err(RaplError::Dimension(format!(
            "similarity between {:?} and {:?}",
            tape.value(v).shape(),
            tape.value(p).shape()
        )));
    }
    let vn = tape.l2_normalize_rows(v, NORM_EPS)?;
    let pn = tape.l2_normalize_rows(p, NORM_EPS)?;
    let pt = tape.transpose(pn)?;
    tape.matmul(vn, pt)
}

pub fn similarity(features: &EmbeddingBatch, proxies: &Tensor) -> Result<Tensor> {
    if proxies.shape().len() != 2 || features.vectors.row_len() != proxies.row_len() {
        return Err(RaplError::Dimension(format!(
            "similarity between {:?} and {:?}",
            features.vectors.shape(),
            proxies.shape()
        )));
    }
    let v = l2_normalize_rows(&features.vectors, NORM_EPS)?;
    let p = l2_normalize_rows(proxies, NORM_EPS)?;
    matmul(&v, &transpose(&p)?)
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(RaplError::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(RaplError::InvalidArgument(format!(
            "label {bad} outside the old-class range 0..{c}"
        )));
    }
    Ok(())
}

/// 0/1 mask of the `k` most similar wrong classes per row. Ties go to the
/// lower class index.
pub fn topk_negative_mask(s: &Tensor, labels: &[usize], k: usize) -> Result<Tensor> {
    let (n, c) = match s.shape() {
        [n, c] => (*n, *c),
        sh => return Err(RaplError::Dimension(format!("similarity must be 2-D, got {sh:?}"))),
    };
    if k == 0 || k >= c {
        return Err(RaplError::InvalidArgument(format!("k = {k} outside 1..={}", c.saturating_sub(1))));
    }
    check_labels(labels, n, c)?;
    let mut mask = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let row = s.row(i);
        let mut negatives: Vec<usize> = (0..c).filter(|&j| j != labels[i]).collect();
        // stable sort keeps lower indices first among equal similarities
        negatives.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        for &j in &negatives[..k] {
            mask.row_mut(i)[j] = 1.0;
        }
    }
    Ok(mask)
}

/// `Ȳ = S ⊙ M + S^pos`.
pub fn masked_selection(s: &Tensor, mask: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if s.shape() != mask.shape() || s.shape().len() != 2 {
        return Err(RaplError::Dimension("similarity and mask shapes differ".into()));
    }
    check_labels(labels, s.rows(), s.row_len())?;
    let c = s.row_len();
    let mut out = Tensor::zeros(s.shape());
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..c {
            out.row_mut(i)[j] = if j == y { s.row(i)[j] } else { s.row(i)[j] * mask.row(i)[j] };
        }
    }
    Ok(out)
}

/// Structural support: the positive entry plus the masked negatives.
pub fn selection_support(mask: &Tensor, labels: &[usize]) -> Vec<bool> {
    let c = mask.row_len();
    (0..mask.rows())
        .flat_map(|i| (0..c).map(move |j| (i, j)))
        .map(|(i, j)| j == labels[i] || mask.row(i)[j] != 0.0)
        .collect()
}

/// Softmax of `Ȳ` restricted to `support`; exactly 0 elsewhere.
pub fn indicator_softmax(y_bar: &Tensor, support: &[bool]) -> Result<Tensor> {
    if y_bar.shape().len() != 2 || support.len() != y_bar.numel() {
        return Err(RaplError::Dimension("support does not match the selection".into()));
    }
    let c = y_bar.row_len();
    let mut out = Tensor::zeros(y_bar.shape());
    for i in 0..y_bar.rows() {
        let ok = masked_softmax_row(
            y_bar.row(i),
            Some(&support[i * c..(i + 1) * c]),
            out.row_mut(i),
        );
        if !ok {
            return Err(RaplError::State(format!("row {i} has an empty selection support")));
        }
    }
    Ok(out)
}

/// Every intermediate of the proxy classification head for inspection.
#[derive(Clone, Debug)]
pub struct SimilarityWorkspace {
    pub s: Tensor,
    pub mask: Tensor,
    pub y_bar: Tensor,
    pub y_tilde: Tensor,
    pub s_pos: Vec<f64>,
    /// Similarities among the old proxies.
    pub s_p: Tensor,
}

impl SimilarityWorkspace {
    pub fn compute(features: &EmbeddingBatch, bank: &ProxyBank, k: usize) -> Result<Self> {
        let labels = features
            .labels
            .as_ref()
            .ok_or_else(|| RaplError::InvalidArgument("proxy classification needs labels".into()))?;
        let s = similarity(features, &bank.old_proxies)?;
        let mask = topk_negative_mask(&s, labels, k)?;
        let y_bar = masked_selection(&s, &mask, labels)?;
        let y_tilde = indicator_softmax(&y_bar, &selection_support(&mask, labels))?;
        let s_pos = labels.iter().enumerate().map(|(i, &y)| s.row(i)[y]).collect();
        let old = EmbeddingBatch::new(bank.old_proxies.clone())?;
        let s_p = similarity(&old, &bank.old_proxies)?;
        Ok(SimilarityWorkspace {
            s,
            mask,
            y_bar,
            y_tilde,
            s_pos,
            s_p,
        })
    }
}

/// `−mean_i log Ỹ[i, y_i]` for labeled embeddings `v` against old proxies.
pub fn pc_loss_on(tape: &mut Tape, v: Var, old: Var, labels: &[usize], k: usize) -> Result<Var> {
    let s = similarity_on(tape, v, old)?;
    let mask = topk_negative_mask(tape.value(s), labels, k)?;
    // On the support Ȳ coincides with S, so the restricted softmax of S is Ỹ.
    let support = selection_support(&mask, labels);
    let logp = tape.masked_log_softmax_rows(s, Some(support))?;
    let picked = tape.gather_cols(logp, labels)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -1.0)
}

pub fn pc_loss(features: &EmbeddingBatch, bank: &ProxyBank, k: usize) -> Result<f64> {
    let labels = features
        .labels
        .as_ref()
        .ok_or_else(|| RaplError::InvalidArgument("proxy classification needs labels".into()))?;
    let mut tape = Tape::new();
    let v = tape.constant(&features.vectors)?;
    let p = tape.constant(&bank.old_proxies)?;
    let loss = pc_loss_on(&mut tape, v, p, labels, k)?;
    Ok(tape.value(loss).item())
}

/// Pushes old proxies apart: `−mean_i log softmax(S^p_i)[i]`.
pub fn proxy_reg_loss_on(tape: &mut Tape, old: Var) -> Result<Var> {
    let c = tape.value(old).rows();
    if c < 2 {
        return Err(RaplError::InvalidArgument("proxy regularization needs C^l ≥ 2".into()));
    }
    let sp = similarity_on(tape, old, old)?;
    let logp = tape.log_softmax_rows(sp)?;
    let diag: Vec<usize> = (0..c).collect();
    let picked = tape.gather_cols(logp, &diag)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -1.0)
}

pub fn proxy_reg_loss(bank: &ProxyBank) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(&bank.old_proxies)?;
    let loss = proxy_reg_loss_on(&mut tape, p)?;
    Ok(tape.value(loss).item())
}

/// Contrastive loss over `V̄ = [views; proxies...]`. Sample rows are positive
/// with their paired view, proxy rows with themselves; each denominator runs
/// over every other row. With no proxies this is the plain two-view
/// contrastive loss.
pub fn pcl_loss_on(
    tape: &mut Tape,
    views: Var,
    pairing: &[usize],
    proxies: &[Var],
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(RaplError::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let n = tape.value(views).rows();
    validate_pairing(pairing, n)?;
    let mut parts = vec![views];
    parts.extend_from_slice(proxies);
    let all = tape.concat_rows(&parts)?;
    let m = tape.value(all).rows();
    let num_proxies = m - n;

    let unit = tape.l2_normalize_rows(all, NORM_EPS)?;
    let ut = tape.transpose(unit)?;
    let gram = tape.matmul(unit, ut)?;
    let logits = tape.scale(gram, 1.0 / tau)?;

    let off_diagonal: Vec<bool> = (0..m * m).map(|idx| idx / m != idx % m).collect();
    let lse = tape.logsumexp_rows(logits, Some(off_diagonal))?;
    let lse_sum = tape.sum(lse)?;

    let sample_rows: Vec<usize> = (0..n).collect();
    let sample_logits = tape.select_rows(logits, &sample_rows)?;
    let positives = tape.gather_cols(sample_logits, pairing)?;
    let pos_sum = tape.sum(positives)?;
    // a unit proxy's similarity with itself is exactly 1
    let self_terms = tape.constant(&Tensor::scalar(num_proxies as f64 / tau))?;

    let inv = 1.0 / m as f64;
    tape.weighted_sum(&[(lse_sum, inv), (pos_sum, -inv), (self_terms, -inv)])
}

/// Value-level contrastive loss. `include_proxies = false` gives the plain
/// view-only variant.
pub fn pcl_loss(views: &EmbeddingBatch, bank: &ProxyBank, tau: f64, include_proxies: bool) -> Result<f64> {
    let pairing = views
        .view_pair_index
        .as_ref()
        .ok_or_else(|| RaplError::InvalidArgument("contrastive loss needs a view pairing".into()))?;
    let mut tape = Tape::new();
    let v = tape.constant(&views.vectors)?;
    let mut proxies = Vec::new();
    if include_proxies {
        proxies.push(tape.constant(&bank.old_proxies)?);
        if let Some(p) = &bank.new_proxies {
            proxies.push(tape.constant(p)?);
        }
    }
    let loss = pcl_loss_on(&mut tape, v, pairing, &proxies, tau)?;
    Ok(tape.value(loss).item())
}

/// Unit-norm k-means centroids of the normalized unlabeled embeddings.
pub fn init_new_proxies(unlabeled: &EmbeddingBatch, num_new: usize, seed: u64) -> Result<Tensor> {
    if unlabeled.len() < num_new {
        return Err(RaplError::InvalidArgument(format!(
            "{} unlabeled embeddings cannot seed {num_new} proxies",
            unlabeled.len()
        )));
    }
    let points = l2_normalize_rows(&unlabeled.vectors, NORM_EPS)?;
    let opts = KMeansOptions {
        seed,
        ..Default::default()
    };
    let result = kmeans(&points, num_new, &opts)?;
    l2_normalize_rows(&result.centroids, NORM_EPS)
}
