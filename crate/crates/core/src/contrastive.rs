//! Contrastive losses, similarity machinery and metrics.
//!
//! Embedding rows come interleaved as (2k, 2k+1) positive pairs. All
//! losses are written for minimization and return analytic gradients
//! with respect to the raw (unnormalized) embeddings; when cosine
//! similarity is configured the gradient is routed through the row
//! normalization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Similarity metric between embedding rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Dot,
}

/// Dense 2N x 2N similarity matrix with a masked diagonal.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub metric: Metric,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// All pairwise similarities of the rows of `z: [2N, D]`.
///
/// Cosine applies the zero-vector convention: a zero row has zero
/// similarity to everything.
pub fn similarity_matrix(z: &Tensor, metric: Metric) -> Result<SimilarityMatrix> {
    let shape = z.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::contract(format!(
            "similarity_matrix needs a nonempty [2N, D] tensor, got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let rows = normalized_rows(z, matches!(metric, Metric::Cosine));
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut dot = 0.0;
            for k in 0..d {
                dot += rows[i * d + k] * rows[j * d + k];
            }
            values[i * n + j] = dot;
            values[j * n + i] = dot;
        }
    }
    Ok(SimilarityMatrix { n, metric, values })
}

fn normalized_rows(z: &Tensor, normalize: bool) -> Vec<f64> {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let mut rows = z.data().to_vec();
    if normalize {
        for i in 0..n {
            let row = &mut rows[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row {
                    *v /= norm;
                }
            }
        }
    }
    rows
}

/// Index of the positive partner for anchor `i` under (2k, 2k+1)
/// interleaving.
#[inline]
pub fn partner(i: usize) -> usize {
    i ^ 1
}

/// Loss family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    NtXent,
    NtLogistic,
    MarginTriplet,
}

/// Which views contribute negatives for an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativesMode {
    /// All other 2(N-1) augmented rows are negatives.
    BothViews,
    /// Only the N-1 non-partner rows of the opposite view.
    OneView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    None,
    SemiHard,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub tau: f64,
    pub margin: f64,
    pub l2_normalize: bool,
    pub negatives_mode: NegativesMode,
    pub mining: Mining,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::NtXent,
            tau: 0.5,
            margin: 0.8,
            l2_normalize: true,
            negatives_mode: NegativesMode::BothViews,
            mining: Mining::None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if matches!(self.kind, LossKind::NtXent | LossKind::NtLogistic) && self.tau <= 0.0 {
            return Err(Error::contract(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if self.margin < 0.0 {
            return Err(Error::contract(format!(
                "margin must be nonnegative, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Loss value with its analytic batch gradient and contrastive metrics.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// dL/dz, same shape as the input embeddings.
    pub grad: Tensor,
    pub accuracy: f64,
    pub entropy: f64,
}

/// Candidate rows for an anchor, positive first.
fn candidates(i: usize, two_n: usize, mode: NegativesMode) -> Vec<usize> {
    let pos = partner(i);
    let mut c = vec![pos];
    match mode {
        NegativesMode::BothViews => {
            for j in 0..two_n {
                if j != i && j != pos {
                    c.push(j);
                }
            }
        }
        NegativesMode::OneView => {
            // Negatives come from the opposite view relative to the
            // anchor: the view holding the positive.
            let pos_parity = pos % 2;
            for j in 0..two_n {
                if j != i && j != pos && j % 2 == pos_parity {
                    c.push(j);
                }
            }
        }
    }
    c
}

/// NT-Xent over interleaved pairs, per the normalized
/// temperature-scaled cross entropy with cosine similarity.
pub fn nt_xent(z: &Tensor, tau: f64) -> Result<(f64, Tensor)> {
    let cfg = LossConfig {
        tau,
        ..LossConfig::default()
    };
    let out = contrastive_loss(z, &cfg)?;
    Ok((out.loss, out.grad))
}

/// Full batch loss with metrics, honoring the loss configuration.
pub fn contrastive_loss(z: &Tensor, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let shape = z.shape();
    if shape.len() != 2 || shape[0] < 2 || shape[0] % 2 != 0 {
        return Err(Error::contract(format!(
            "contrastive loss needs [2N, D] embeddings with N >= 1, got {shape:?}"
        )));
    }
    let (two_n, d) = (shape[0], shape[1]);
    let y = normalized_rows(z, cfg.l2_normalize);
    let row = |i: usize| &y[i * d..(i + 1) * d];
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };

    // Gradient with respect to the (possibly normalized) rows.
    let mut gy = vec![0.0; two_n * d];
    let mut loss = 0.0;
    let inv_anchors = 1.0 / two_n as f64;

    for i in 0..two_n {
        let cands = candidates(i, two_n, cfg.negatives_mode);
        let sims: Vec<f64> = cands.iter().map(|&j| dot(row(i), row(j))).collect();
        match cfg.kind {
            LossKind::NtXent => {
                let logits: Vec<f64> = sims.iter().map(|s| s / cfg.tau).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                loss += inv_anchors * (denom.ln() + max - logits[0]);
                // d/dy_i = (sum_k q_k y_k - y_pos) / tau
                // d/dy_k += (q_k - [k = pos]) y_i / tau
                let gi = &mut vec![0.0; d];
                for (ci, &j) in cands.iter().enumerate() {
                    let q = exps[ci] / denom;
                    let coeff = inv_anchors * (q - if ci == 0 { 1.0 } else { 0.0 }) / cfg.tau;
                    for k in 0..d {
                        gi[k] += coeff * y[j * d + k];
                        gy[j * d + k] += coeff * y[i * d + k];
                    }
                }
                for k in 0..d {
                    gy[i * d + k] += gi[k];
                }
            }
            LossKind::NtLogistic => {
                let selected = select_negatives(&sims, cfg)?;
                let pos = sims[0] / cfg.tau;
                loss += inv_anchors * softplus(-pos);
                let wpos = inv_anchors * (-sigmoid(-pos)) / cfg.tau;
                axpy(&mut gy, i * d, wpos, row(partner(i)));
                axpy(&mut gy, partner(i) * d, wpos, row(i));
                let scale = inv_anchors / selected.len() as f64;
                for &ci in &selected {
                    let neg = sims[ci] / cfg.tau;
                    loss += scale * softplus(neg);
                    let wneg = scale * sigmoid(neg) / cfg.tau;
                    let j = cands[ci];
                    axpy(&mut gy, i * d, wneg, row(j));
                    axpy(&mut gy, j * d, wneg, row(i));
                }
            }
            LossKind::MarginTriplet => {
                let selected = select_negatives(&sims, cfg)?;
                let scale = inv_anchors / selected.len() as f64;
                for &ci in &selected {
                    let gap = sims[0] - sims[ci];
                    if gap < cfg.margin {
                        loss += scale * (cfg.margin - gap);
                        let j = cands[ci];
                        // d/dy_i = v_neg - v_pos
                        axpy(&mut gy, i * d, scale, row(j));
                        axpy(&mut gy, i * d, -scale, row(partner(i)));
                        axpy(&mut gy, partner(i) * d, -scale, row(i));
                        axpy(&mut gy, j * d, scale, row(i));
                    }
                }
            }
        }
    }

    // Route through the row normalization when cosine is configured.
    let grad = if cfg.l2_normalize {
        let mut gz = vec![0.0; two_n * d];
        for i in 0..two_n {
            let zrow = &z.data()[i * d..(i + 1) * d];
            let norm = zrow.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let yrow = row(i);
            let grow = &gy[i * d..(i + 1) * d];
            let against: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
            for k in 0..d {
                gz[i * d + k] = (grow[k] - yrow[k] * against) / norm;
            }
        }
        Tensor::from_vec(shape, gz)?
    } else {
        Tensor::from_vec(shape, gy)?
    };

    let metric = if cfg.l2_normalize { Metric::Cosine } else { Metric::Dot };
    let sims = similarity_matrix(z, metric)?;
    let (accuracy, entropy) = contrastive_metrics(&sims, cfg.tau)?;
    Ok(LossOutput {
        loss,
        grad,
        accuracy,
        entropy,
    })
}

/// Indices (into the candidate list, skipping the positive at 0) of the
/// negatives contributing loss terms for one anchor.
fn select_negatives(sims: &[f64], cfg: &LossConfig) -> Result<Vec<usize>> {
    if sims.len() < 2 {
        return Err(Error::contract("anchor has no negative candidates"));
    }
    match cfg.mining {
        Mining::None => Ok((1..sims.len()).collect()),
        Mining::SemiHard => {
            let idx = semi_hard_select(sims, 0, cfg.margin)?;
            Ok(vec![idx])
        }
    }
}

/// Semi-hard negative selection over one anchor's similarity row.
///
/// A negative is semi-hard when it is farther than the positive
/// (similarity strictly below) but within the loss margin. The closest
/// such negative is returned; if none qualifies, the hardest negative
/// (highest similarity) is the fallback.
pub fn semi_hard_select(sims: &[f64], positive: usize, margin: f64) -> Result<usize> {
    if sims.len() < 2 || positive >= sims.len() {
        return Err(Error::contract(
            "semi-hard selection needs a positive and at least one negative",
        ));
    }
    let pos_sim = sims[positive];
    let mut best_semi: Option<usize> = None;
    let mut hardest = None::<usize>;
    for (j, &s) in sims.iter().enumerate() {
        if j == positive {
            continue;
        }
        if hardest.is_none_or(|h| s > sims[h]) {
            hardest = Some(j);
        }
        if s < pos_sim && pos_sim - s < margin && best_semi.is_none_or(|b| s > sims[b]) {
            best_semi = Some(j);
        }
    }
    Ok(best_semi.or(hardest).expect("at least one negative"))
}

/// Pairwise NT-Logistic term for one anchor, its positive and a set of
/// negatives. Inputs are used as provided; gradients are returned for
/// every argument.
pub fn nt_logistic(
    u: &[f64],
    v_pos: &[f64],
    v_negs: &[&[f64]],
    tau: f64,
) -> Result<(f64, PairGrads)> {
    if tau <= 0.0 {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let d = u.len();
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let pos = dot(u, v_pos) / tau;
    let mut loss = softplus(-pos);
    let mut gu = vec![0.0; d];
    let wpos = -sigmoid(-pos) / tau;
    for k in 0..d {
        gu[k] += wpos * v_pos[k];
    }
    let g_pos: Vec<f64> = u.iter().map(|x| wpos * x).collect();
    let mut g_negs = Vec::with_capacity(v_negs.len());
    for v_neg in v_negs {
        let neg = dot(u, v_neg) / tau;
        loss += softplus(neg);
        let wneg = sigmoid(neg) / tau;
        for k in 0..d {
            gu[k] += wneg * v_neg[k];
        }
        g_negs.push(u.iter().map(|x| wneg * x).collect());
    }
    Ok((
        loss,
        PairGrads {
            u: gu,
            v_pos: g_pos,
            v_negs: g_negs,
        },
    ))
}

/// Hinge triplet term `max(u . v_neg - u . v_pos + m, 0)`.
pub fn margin_triplet(
    u: &[f64],
    v_pos: &[f64],
    v_neg: &[f64],
    margin: f64,
) -> Result<(f64, PairGrads)> {
    if margin < 0.0 {
        return Err(Error::contract(format!("margin must be nonnegative, got {margin}")));
    }
    let d = u.len();
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let gap = dot(u, v_pos) - dot(u, v_neg);
    if gap >= margin {
        return Ok((
            0.0,
            PairGrads {
                u: vec![0.0; d],
                v_pos: vec![0.0; d],
                v_negs: vec![vec![0.0; d]],
            },
        ));
    }
    let loss = margin - gap;
    let gu: Vec<f64> = v_neg.iter().zip(v_pos).map(|(n, p)| n - p).collect();
    let g_pos: Vec<f64> = u.iter().map(|x| -x).collect();
    let g_neg: Vec<f64> = u.to_vec();
    Ok((
        loss,
        PairGrads {
            u: gu,
            v_pos: g_pos,
            v_negs: vec![g_neg],
        },
    ))
}

/// Gradients of a pairwise loss term with respect to each input vector.
#[derive(Debug, Clone)]
pub struct PairGrads {
    pub u: Vec<f64>,
    pub v_pos: Vec<f64>,
    pub v_negs: Vec<Vec<f64>>,
}

/// Contrastive accuracy and mean softmax entropy (nats) over anchors.
///
/// Accuracy counts anchors whose positive attains the maximal
/// similarity among the 2N-1 candidates; entropy is the Shannon entropy
/// of softmax(sims / tau) excluding the self-similarity.
pub fn contrastive_metrics(sims: &SimilarityMatrix, tau: f64) -> Result<(f64, f64)> {
    if tau <= 0.0 {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let n = sims.n;
    let mut correct = 0usize;
    let mut entropy_sum = 0.0;
    for i in 0..n {
        let pos = partner(i);
        let mut best = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                best = best.max(sims.at(i, j));
            }
        }
        if sims.at(i, pos) >= best {
            correct += 1;
        }

        let logits: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| sims.at(i, j) / tau)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let mut h = 0.0;
        for e in &exps {
            let p = e / denom;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        entropy_sum += h;
    }
    Ok((correct as f64 / n as f64, entropy_sum / n as f64))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x), stable for large |x|.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn axpy(buf: &mut [f64], offset: usize, a: f64, x: &[f64]) {
    for (k, v) in x.iter().enumerate() {
        buf[offset + k] += a * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::max_rel_err;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_embeddings(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::from_vec(
            &[n, d],
            (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    fn fd_grad(z: &Tensor, cfg: &LossConfig, step: f64) -> Vec<f64> {
        let mut probe = z.clone();
        let mut out = vec![0.0; z.len()];
        for i in 0..z.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = contrastive_loss(&probe, cfg).unwrap().loss;
            probe.data_mut()[i] = orig - step;
            let down = contrastive_loss(&probe, cfg).unwrap().loss;
            probe.data_mut()[i] = orig;
            out[i] = (up - down) / (2.0 * step);
        }
        out
    }

    #[test]
    fn similarity_identical_unit_vectors() {
        let z = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let s = similarity_matrix(&z, Metric::Cosine).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!((s.at(i, j) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn similarity_orthogonal_rows_are_zero() {
        let z = Tensor::from_vec(&[2, 2], vec![3.0, 0.0, 0.0, 5.0]).unwrap();
        let s = similarity_matrix(&z, Metric::Cosine).unwrap();
        assert_eq!(s.at(0, 1), 0.0);
        assert_eq!(s.at(1, 0), 0.0);
    }

    #[test]
    fn similarity_matches_per_pair_cosine_oracle() {
        let vecs = [[1.0, 2.0], [-0.5, 1.5], [2.0, -1.0], [0.3, 0.4]];
        let z = Tensor::from_vec(&[4, 2], vecs.concat()).unwrap();
        let s = similarity_matrix(&z, Metric::Cosine).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot = vecs[i][0] * vecs[j][0] + vecs[i][1] * vecs[j][1];
                let ni = (vecs[i][0] * vecs[i][0] + vecs[i][1] * vecs[i][1]).sqrt();
                let nj = (vecs[j][0] * vecs[j][0] + vecs[j][1] * vecs[j][1]).sqrt();
                assert!((s.at(i, j) - dot / (ni * nj)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_rejects_empty() {
        let z = Tensor::zeros(&[0, 4]);
        assert!(similarity_matrix(&z, Metric::Cosine).is_err());
    }

    #[test]
    fn nt_xent_single_pair_is_zero() {
        // N = 1: the only candidate is the positive.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_embeddings(&mut rng, 2, 6);
        let (loss, grad) = nt_xent(&z, 0.5).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn nt_xent_identical_embeddings_hit_uniform_softmax_value() {
        for n in [2usize, 4, 7] {
            let z = Tensor::from_vec(&[2 * n, 3], vec![0.4; 2 * n * 3]).unwrap();
            let (loss, _) = nt_xent(&z, 0.5).unwrap();
            let expect = ((2 * n - 1) as f64).ln();
            assert!((loss - expect).abs() < 1e-12, "n {n}: {loss} vs {expect}");
        }
        // N = 2 specializes to ln 3.
        let z = Tensor::from_vec(&[4, 2], vec![0.3; 8]).unwrap();
        let (loss, _) = nt_xent(&z, 1.0).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_matches_direct_eq_evaluation() {
        // N = 2, tau = 0.5: evaluate the loss definition directly.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random_embeddings(&mut rng, 4, 5);
        let tau = 0.5;
        let s = similarity_matrix(&z, Metric::Cosine).unwrap();
        let pair_loss = |i: usize, j: usize| -> f64 {
            let num = (s.at(i, j) / tau).exp();
            let denom: f64 = (0..4).filter(|&k| k != i).map(|k| (s.at(i, k) / tau).exp()).sum();
            -(num / denom).ln()
        };
        let expect = (pair_loss(0, 1) + pair_loss(1, 0) + pair_loss(2, 3) + pair_loss(3, 2)) / 4.0;
        let (loss, grad) = nt_xent(&z, tau).unwrap();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");

        let cfg = LossConfig { tau, ..LossConfig::default() };
        let fd = fd_grad(&z, &cfg, 1e-6);
        assert!(max_rel_err(grad.data(), &fd) < 1e-6);
    }

    #[test]
    fn nt_xent_rejects_bad_temperature() {
        let z = Tensor::zeros(&[2, 2]);
        assert!(nt_xent(&z, 0.0).is_err());
        assert!(nt_xent(&z, -1.0).is_err());
    }

    #[test]
    fn nt_xent_is_permutation_equivariant() {
        // Swapping two pairs permutes per-pair losses and leaves the
        // batch loss unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_embeddings(&mut rng, 6, 4);
        let (loss, _) = nt_xent(&z, 0.7).unwrap();
        // Move pair (4,5) to the front.
        let mut permuted = Vec::new();
        for i in [4, 5, 0, 1, 2, 3] {
            permuted.extend_from_slice(z.row(i));
        }
        let zp = Tensor::from_vec(&[6, 4], permuted).unwrap();
        let (loss_p, _) = nt_xent(&zp, 0.7).unwrap();
        assert!((loss - loss_p).abs() < 1e-12);
    }

    #[test]
    fn cosine_losses_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random_embeddings(&mut rng, 8, 5);
        let mut scaled = z.clone();
        for (i, v) in scaled.data_mut().iter_mut().enumerate() {
            let row = i / 5;
            *v *= 1.0 + row as f64; // positive per-row scales
        }
        for kind in [LossKind::NtXent, LossKind::NtLogistic, LossKind::MarginTriplet] {
            let cfg = LossConfig { kind, ..LossConfig::default() };
            let a = contrastive_loss(&z, &cfg).unwrap();
            let b = contrastive_loss(&scaled, &cfg).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-12, "{kind:?}");
            assert!((a.accuracy - b.accuracy).abs() < 1e-12);
            assert!((a.entropy - b.entropy).abs() < 1e-12);
        }
    }

    #[test]
    fn candidate_counts_match_modes() {
        let both = candidates(2, 8, NegativesMode::BothViews);
        assert_eq!(both.len(), 2 * (4 - 1) + 1);
        let one = candidates(2, 8, NegativesMode::OneView);
        assert_eq!(one.len(), 4 - 1 + 1);
        // All one-view candidates share the positive's view parity.
        let pos = partner(2);
        assert!(one.iter().all(|j| j % 2 == pos % 2));
    }

    #[test]
    fn nt_xent_loss_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 2 * rng.random_range(1..5usize);
            let d = rng.random_range(2..8usize);
            let z = random_embeddings(&mut rng, n, d);
            let (loss, _) = nt_xent(&z, 0.3).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn nt_logistic_zero_similarities_give_two_ln_two() {
        let u = [0.0, 1.0];
        let v_pos = [1.0, 0.0];
        let v_neg = [1.0, 0.0];
        let (loss, _) = nt_logistic(&u, &v_pos, &[&v_neg], 0.5).unwrap();
        assert!((loss - 2.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nt_logistic_saturates_for_aligned_positive() {
        // u . v_pos / tau large: positive-term gradient weight vanishes.
        let u = [1.0, 0.0];
        let v_pos = [1.0, 0.0];
        let v_neg = [0.0, 1.0];
        let (_, grads) = nt_logistic(&u, &v_pos, &[&v_neg], 0.005).unwrap();
        assert!(grads.v_pos.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn nt_logistic_matches_formula_and_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 4;
        let norm = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let u = norm((0..d).map(|_| rng.random::<f64>() - 0.5).collect());
        let v_pos = norm((0..d).map(|_| rng.random::<f64>() - 0.5).collect());
        let v_neg = norm((0..d).map(|_| rng.random::<f64>() - 0.5).collect());
        let tau = 0.2;
        let (loss, grads) = nt_logistic(&u, &v_pos, &[v_neg.as_slice()], tau).unwrap();

        // Direct formula evaluation.
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let sp = dot(&u, &v_pos) / tau;
        let sn = dot(&u, &v_neg) / tau;
        let direct = -((sigmoid(sp)).ln() + (sigmoid(-sn)).ln());
        assert!((loss - direct).abs() < 1e-10);

        // Finite differences on u.
        let step = 1e-6;
        let mut fd = vec![0.0; d];
        for k in 0..d {
            let mut up = u.clone();
            up[k] += step;
            let (lu, _) = nt_logistic(&up, &v_pos, &[v_neg.as_slice()], tau).unwrap();
            let mut down = u.clone();
            down[k] -= step;
            let (ld, _) = nt_logistic(&down, &v_pos, &[v_neg.as_slice()], tau).unwrap();
            fd[k] = (lu - ld) / (2.0 * step);
        }
        assert!(max_rel_err(&grads.u, &fd) < 1e-6);
    }

    #[test]
    fn margin_triplet_inactive_when_gap_exceeds_margin() {
        let u = [1.0, 0.0];
        let v_pos = [1.0, 0.0];
        let v_neg = [-1.0, 0.0];
        let (loss, grads) = margin_triplet(&u, &v_pos, &v_neg, 0.5).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.u.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn margin_triplet_accepts_studied_margin_grid() {
        let u = [0.6, 0.8];
        let v_pos = [0.0, 1.0];
        let v_neg = [1.0, 0.0];
        for m in [0.0, 0.4, 0.8, 1.6] {
            assert!(margin_triplet(&u, &v_pos, &v_neg, m).is_ok());
        }
        assert!(margin_triplet(&u, &v_pos, &v_neg, -0.1).is_err());
    }

    #[test]
    fn margin_triplet_violation_matches_hand_value_and_differences() {
        let u = [0.8, 0.6];
        let v_pos = [0.0, 1.0];
        let v_neg = [1.0, 0.0];
        let m = 0.8;
        // gap = u.v_pos - u.v_neg = 0.6 - 0.8 = -0.2 < m; loss = m - gap = 1.0
        let (loss, grads) = margin_triplet(&u, &v_pos, &v_neg, m).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);

        let step = 1e-6;
        let mut fd = vec![0.0; 2];
        for k in 0..2 {
            let mut up = u;
            up[k] += step;
            let (lu, _) = margin_triplet(&up, &v_pos, &v_neg, m).unwrap();
            let mut down = u;
            down[k] -= step;
            let (ld, _) = margin_triplet(&down, &v_pos, &v_neg, m).unwrap();
            fd[k] = (lu - ld) / (2.0 * step);
        }
        assert!(max_rel_err(&grads.u, &fd) < 1e-8);
    }

    #[test]
    fn semi_hard_picks_the_single_qualifying_negative() {
        // positive sim 0.8; negatives: 0.95 (harder than positive),
        // 0.75 (semi-hard, gap 0.05 < m), 0.1 (too far for m=0.5).
        let sims = [0.8, 0.95, 0.75, 0.1];
        let idx = semi_hard_select(&sims, 0, 0.5).unwrap();
        assert_eq!(idx, 2);
    }

    #[test]
    fn semi_hard_falls_back_to_hardest() {
        // All negatives beyond the margin: fallback = hardest.
        let sims = [0.9, 0.1, -0.2, 0.3];
        let idx = semi_hard_select(&sims, 0, 0.25).unwrap();
        assert_eq!(idx, 3);
    }

    #[test]
    fn semi_hard_ignores_strictly_easier_negatives() {
        let sims = [0.8, 0.75, 0.1];
        let base = semi_hard_select(&sims, 0, 0.5).unwrap();
        let extended = [0.8, 0.75, 0.1, -0.5, -0.9];
        assert_eq!(semi_hard_select(&extended, 0, 0.5).unwrap(), base);
    }

    #[test]
    fn semi_hard_requires_a_negative() {
        assert!(semi_hard_select(&[0.5], 0, 0.5).is_err());
    }

    #[test]
    fn metrics_perfect_positive_gives_accuracy_one() {
        // Orthogonal pairs: positives at similarity 1, negatives at 0.
        let z = Tensor::from_vec(
            &[4, 2],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        let s = similarity_matrix(&z, Metric::Cosine).unwrap();
        let (acc, _) = contrastive_metrics(&s, 0.5).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn metrics_uniform_similarities_give_log_entropy() {
        let z = Tensor::from_vec(&[6, 2], vec![0.5; 12]).unwrap();
        let s = similarity_matrix(&z, Metric::Cosine).unwrap();
        let (_, entropy) = contrastive_metrics(&s, 0.5).unwrap();
        assert!((entropy - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn one_view_mode_matches_reduced_candidate_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random_embeddings(&mut rng, 6, 4);
        let cfg = LossConfig {
            negatives_mode: NegativesMode::OneView,
            tau: 0.4,
            ..LossConfig::default()
        };
        let out = contrastive_loss(&z, &cfg).unwrap();
        let fd = fd_grad(&z, &cfg, 1e-6);
        assert!(max_rel_err(out.grad.data(), &fd) < 1e-6);
    }

    #[test]
    fn batch_losses_match_finite_differences_across_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [LossKind::NtXent, LossKind::NtLogistic, LossKind::MarginTriplet] {
            for l2 in [true, false] {
                for mining in [Mining::None, Mining::SemiHard] {
                    let z = random_embeddings(&mut rng, 6, 5);
                    let cfg = LossConfig {
                        kind,
                        tau: 0.5,
                        margin: 0.8,
                        l2_normalize: l2,
                        negatives_mode: NegativesMode::BothViews,
                        mining,
                    };
                    let out = contrastive_loss(&z, &cfg).unwrap();
                    let fd = fd_grad(&z, &cfg, 1e-6);
                    let err = max_rel_err(out.grad.data(), &fd);
                    assert!(err < 1e-5, "{kind:?} l2={l2} mining={mining:?}: err {err}");
                }
            }
        }
    }
}
