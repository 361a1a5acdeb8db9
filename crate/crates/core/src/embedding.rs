//! Unit-vector algebra shared by every trainable component.
//!
//! Everything here is a pure function of its inputs. Softmax-style terms are
//! always evaluated through a max-shifted log-sum-exp so that temperatures as
//! small as 0.07 (logits around 14) stay accurate.

use std::ops::Deref;

use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero by [`l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.07;

/// A unit-length feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps values that are already unit length. Callers that cannot
    /// guarantee this should go through [`l2_normalize`].
    pub fn from_unit(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean length.
pub fn l2_normalize(v: &[f64]) -> Result<Embedding> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFiniteValue(format!("norm of {}-vector", v.len())));
    }
    if n <= NORM_FLOOR {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(Embedding(v.iter().map(|x| x / n).collect()))
}

/// Pulls a gradient with respect to a normalized vector `e = u / |u|` back to
/// the unnormalized `u`: `(g - e (e . g)) / |u|`.
pub fn normalize_backward(e: &[f64], u_norm: f64, grad_e: &[f64]) -> Vec<f64> {
    let proj = dot(e, grad_e);
    e.iter()
        .zip(grad_e)
        .map(|(ei, gi)| (gi - ei * proj) / u_norm)
        .collect()
}

/// Dense row-major matrix of pairwise dot products.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn similarity_matrix(a: &[Embedding], b: &[Embedding]) -> Result<SimilarityMatrix> {
    let width = a.first().or(b.first()).map(|e| e.dim()).unwrap_or(0);
    for e in a.iter().chain(b) {
        if e.dim() != width {
            return Err(Error::DimensionMismatch {
                expected: width,
                found: e.dim(),
            });
        }
    }
    let mut entries = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            entries.push(x.dot(y));
        }
    }
    Ok(SimilarityMatrix {
        rows: a.len(),
        cols: b.len(),
        entries,
    })
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// In-place softmax, max-shifted.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(tau))
    }
}

/// `-log( exp(s_pos / tau) / sum_j exp(s_j / tau) )`.
pub fn nce_term(sims: &[f64], pos_index: usize, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if pos_index >= sims.len() {
        return Err(Error::BadIndex {
            index: pos_index,
            len: sims.len(),
        });
    }
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    // Clamp tiny negative rounding residue; the exact value is >= 0.
    Ok((log_sum_exp(&logits) - logits[pos_index]).max(0.0))
}

/// Value and similarity-gradient of a softmax cross-entropy group whose
/// target distribution is spread uniformly over `positives`.
///
/// Returns `(loss, dloss/dsims)` where
/// `loss = (1/|P|) sum_{p in P} [lse(s/tau) - s_p/tau]`.
pub(crate) fn nce_group(sims: &[f64], positives: &[usize], tau: f64) -> (f64, Vec<f64>) {
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let lse = log_sum_exp(&logits);
    let probs = softmax(&logits);
    let w = 1.0 / positives.len() as f64;
    let mut loss = 0.0;
    let mut grad: Vec<f64> = probs.iter().map(|p| p / tau).collect();
    for &p in positives {
        loss += w * (lse - logits[p]);
        grad[p] -= w / tau;
    }
    (loss.max(0.0), grad)
}

/// Compares an analytic gradient against central differences.
///
/// Returns `max_i |analytic_i - fd_i| / max(1, |fd_i|)`.
pub fn finite_diff_grad_check<F>(f: F, analytic: &[f64], theta: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            found: analytic.len(),
        });
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteValue(format!("objective at coordinate {i}")));
        }
        let fd = (plus - minus) / (2.0 * eps);
        if !analytic[i].is_finite() {
            return Err(Error::NonFiniteValue(format!("analytic gradient at coordinate {i}")));
        }
        let rel = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_four_five() {
        let e = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-15);
        assert!((e[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_is_idempotent_on_unit_vectors() {
        let u = l2_normalize(&[0.3, -1.2, 0.7, 2.0]).unwrap();
        let again = l2_normalize(&u).unwrap();
        for (a, b) in u.iter().zip(again.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector { .. })));
    }

    #[test]
    fn similarity_of_basis_is_identity() {
        let basis = vec![
            Embedding::from_unit(vec![1.0, 0.0]),
            Embedding::from_unit(vec![0.0, 1.0]),
        ];
        let s = similarity_matrix(&basis, &basis).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 0), 0.0);
        assert_eq!(s.get(1, 1), 1.0);
    }

    #[test]
    fn similarity_hand_checked() {
        let a = vec![
            Embedding::from_unit(vec![1.0, 0.0]),
            Embedding::from_unit(vec![0.6, 0.8]),
        ];
        let b = vec![Embedding::from_unit(vec![0.0, 1.0])];
        let s = similarity_matrix(&a, &b).unwrap();
        assert_eq!((s.rows(), s.cols()), (2, 1));
        assert_eq!(s.get(0, 0), 0.0);
        assert!((s.get(1, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn similarity_rejects_mixed_widths() {
        let a = vec![Embedding::from_unit(vec![1.0, 0.0])];
        let b = vec![Embedding::from_unit(vec![1.0, 0.0, 0.0])];
        assert!(matches!(
            similarity_matrix(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn nce_uniform_is_log_n() {
        for n in [1usize, 2, 4, 7, 100, 1024] {
            let sims = vec![0.37; n];
            for tau in [0.07, 1.0, 13.0] {
                let v = nce_term(&sims, n / 2, tau).unwrap();
                assert!((v - (n as f64).ln()).abs() < 1e-9, "n={n} tau={tau} v={v}");
            }
        }
    }

    #[test]
    fn nce_direct_evaluation() {
        // -log(e^2 / (e^2 + 2)) evaluated term by term.
        let e2 = 2.0f64.exp();
        let expected = -(e2 / (e2 + 2.0)).ln();
        let v = nce_term(&[1.0, 0.0, 0.0], 0, 0.5).unwrap();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.239_544_766_221_884_5).abs() < 1e-12);
    }

    #[test]
    fn nce_errors() {
        assert!(matches!(nce_term(&[0.1], 1, 1.0), Err(Error::BadIndex { .. })));
        assert!(matches!(
            nce_term(&[0.1], 0, 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
        assert!(matches!(
            nce_term(&[0.1], 0, -1.0),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let theta = [0.3, -1.7, 2.2, 0.01];
        let grad: Vec<f64> = theta.iter().map(|x| 2.0 * x).collect();
        let err = finite_diff_grad_check(|t| dot(t, t), &grad, &theta, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
        let err = finite_diff_grad_check(|_| 4.2, &[0.0; 4], &theta, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_flags_non_finite() {
        let r = finite_diff_grad_check(|t| 1.0 / (t[0] - 1.0), &[0.0], &[1.0], 1e-5);
        assert!(r.is_ok());
        let r = finite_diff_grad_check(|t| t[0].ln(), &[0.0], &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFiniteValue(_))));
    }

    #[test]
    fn nce_group_gradient_matches_central_differences() {
        let sims = [0.3, -0.2, 0.9, 0.1, 0.5];
        let positives = [0usize, 3];
        let (_, grad) = nce_group(&sims, &positives, 0.2);
        let err = finite_diff_grad_check(|s| nce_group(s, &positives, 0.2).0, &grad, &sims, 1e-5)
            .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    proptest! {
        #[test]
        fn nce_shift_invariant(sims in prop::collection::vec(-1.0f64..1.0, 1..32), shift in -5.0f64..5.0, tau in 0.05f64..10.0) {
            let shifted: Vec<f64> = sims.iter().map(|s| s + shift).collect();
            let a = nce_term(&sims, 0, tau).unwrap();
            let b = nce_term(&shifted, 0, tau).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn self_similarity_symmetric_unit_diagonal(raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 1..8)) {
            let embs: Vec<Embedding> = raw.iter().filter_map(|v| l2_normalize(v).ok()).collect();
            let s = similarity_matrix(&embs, &embs).unwrap();
            for i in 0..embs.len() {
                prop_assert!((s.get(i, i) - 1.0).abs() < 1e-12);
                for j in 0..embs.len() {
                    prop_assert_eq!(s.get(i, j), s.get(j, i));
                    prop_assert!(s.get(i, j).abs() <= 1.0 + 1e-9);
                }
            }
        }

        #[test]
        fn normalized_has_unit_norm(v in prop::collection::vec(-100.0f64..100.0, 1..64)) {
            if let Ok(e) = l2_normalize(&v) {
                prop_assert!((norm(&e) - 1.0).abs() < 1e-6);
            }
        }
    }
}
