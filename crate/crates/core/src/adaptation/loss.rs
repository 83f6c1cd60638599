//! Temperature softmax over class similarities and the two unsupervised
//! objectives: confidence-weighted entropy optimisation (UEO) and top-k
//! pseudo-label cross-entropy (UPL).
//!
//! Losses take a [`BatchPrediction`] and return the gradient with respect to
//! the probability matrix; [`softmax_backward`] carries it to similarities.

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};

/// Lower bound applied to normalized confidence weights.
pub const WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPrediction {
    /// `|B| x A` class probabilities.
    pub probs: Mat,
    /// Confidence `w(x)`: the largest probability of each row.
    pub weights: Vec<f64>,
    /// `w(x)` divided by the batch sum.
    pub norm_weights: Vec<f64>,
    /// Column of `w(x)` in each row (first maximum on ties).
    pub argmax: Vec<usize>,
}

impl BatchPrediction {
    /// Wraps an arbitrary positive matrix; rows need not be normalized.
    pub fn from_probs(probs: Mat) -> Self {
        let mut weights = Vec::with_capacity(probs.rows);
        let mut argmax = Vec::with_capacity(probs.rows);
        for i in 0..probs.rows {
            let (j, w) = probs
                .row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &p)| if p > best.1 { (j, p) } else { best });
            weights.push(w);
            argmax.push(j);
        }
        let total: f64 = weights.iter().sum();
        let norm_weights = weights.iter().map(|w| w / total).collect();
        Self {
            probs,
            weights,
            norm_weights,
            argmax,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.probs.rows
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols
    }
}

/// `p_a(x) = softmax_a(sim(x, a) / tau)` with max subtraction.
pub fn class_probabilities(images: &Mat, class_features: &Mat, tau: f64) -> BatchPrediction {
    assert_eq!(images.cols, class_features.cols, "feature dimensions differ");
    assert!(tau > 0.0, "temperature must be positive");
    let mut probs = Mat::zeros(images.rows, class_features.rows);
    for i in 0..images.rows {
        let x = images.row(i);
        let row = probs.row_mut(i);
        for (a, slot) in row.iter_mut().enumerate() {
            *slot = dot(x, class_features.row(a)) / tau;
        }
        softmax_in_place(row);
    }
    BatchPrediction::from_probs(probs)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn safe_ln(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

/// Shannon entropy in nats; `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// `dL/dp`, same shape as the probability matrix.
    pub grad_probs: Mat,
    /// Rows whose normalized weight hit [`WEIGHT_FLOOR`].
    pub clamped: usize,
}

/// Confidence-weighted entropy objective
///
/// `L = sum_x w~(x) H(p(x)) - H(p_bar)`,
/// `p_bar = sum_x p(x) / w~(x)  /  sum_x 1 / w~(x)`.
///
/// With `detach_weights` the weights are treated as constants in the
/// gradient; otherwise the gradient flows through `w(x) = max_a p_a(x)`.
pub fn ueo_loss(pred: &BatchPrediction, detach_weights: bool) -> Result<LossGrad> {
    let b = pred.batch_size();
    let a = pred.num_classes();
    if b < 2 {
        return Err(Error::InvalidConfig(format!(
            "entropy objective needs at least 2 rows per batch, got {b}"
        )));
    }
    let probs = &pred.probs;
    let total_w: f64 = pred.weights.iter().sum();

    let mut clamped = vec![false; b];
    let wt: Vec<f64> = pred
        .weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let v = w / total_w;
            if v < WEIGHT_FLOOR {
                clamped[i] = true;
                WEIGHT_FLOOR
            } else {
                v
            }
        })
        .collect();
    let n_clamped = clamped.iter().filter(|c| **c).count();
    if n_clamped > 0 {
        log::warn!("{n_clamped} normalized confidence weights clamped to {WEIGHT_FLOOR}");
    }

    let row_entropy: Vec<f64> = (0..b).map(|i| entropy(probs.row(i))).collect();
    let term1: f64 = wt.iter().zip(&row_entropy).map(|(w, h)| w * h).sum();

    let inv: Vec<f64> = wt.iter().map(|w| 1.0 / w).collect();
    let inv_sum: f64 = inv.iter().sum();
    let mut p_bar = vec![0.0; a];
    for i in 0..b {
        for (acc, p) in p_bar.iter_mut().zip(probs.row(i)) {
            *acc += inv[i] * p;
        }
    }
    p_bar.iter_mut().for_each(|v| *v /= inv_sum);
    let h_bar = entropy(&p_bar);

    let mut grad = Mat::zeros(b, a);
    // dH(p_bar)/dp_bar
    let g_bar: Vec<f64> = p_bar.iter().map(|p| -(safe_ln(*p) + 1.0)).collect();
    for i in 0..b {
        let row = probs.row(i);
        let out = grad.row_mut(i);
        for j in 0..a {
            out[j] = wt[i] * -(safe_ln(row[j]) + 1.0) - g_bar[j] * inv[i] / inv_sum;
        }
    }

    if !detach_weights {
        // dL/dw~_y: entropy weight plus the effect on p_bar through 1/w~_y.
        let d_wt: Vec<f64> = (0..b)
            .map(|y| {
                let row = probs.row(y);
                let d_hbar_d_inv: f64 = (0..a).map(|j| g_bar[j] * (row[j] - p_bar[j])).sum::<f64>() / inv_sum;
                let d_inv_d_wt = -1.0 / (wt[y] * wt[y]);
                row_entropy[y] - d_hbar_d_inv * d_inv_d_wt
            })
            .collect();
        let shared: f64 = (0..b).filter(|y| !clamped[*y]).map(|y| d_wt[y] * wt[y]).sum();
        for x in 0..b {
            let own = if clamped[x] { 0.0 } else { d_wt[x] };
            let d_w = (own - shared) / total_w;
            let col = pred.argmax[x];
            grad.row_mut(x)[col] += d_w;
        }
    }

    Ok(LossGrad {
        loss: term1 - h_bar,
        grad_probs: grad,
        clamped: n_clamped,
    })
}

/// Mean negative log-likelihood of the pseudo-labels.
pub fn upl_cross_entropy(pred: &BatchPrediction, labels: &[usize]) -> Result<LossGrad> {
    let b = pred.batch_size();
    let a = pred.num_classes();
    if labels.len() != b {
        return Err(Error::DimMismatch {
            expected: b,
            got: labels.len(),
        });
    }
    if b == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let mut grad = Mat::zeros(b, a);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= a {
            return Err(Error::InvalidConfig(format!("pseudo-label {y} out of range for {a} classes")));
        }
        let p = pred.probs.get(i, y).max(f64::MIN_POSITIVE);
        loss -= p.ln();
        grad.row_mut(i)[y] = -1.0 / (b as f64 * p);
    }
    Ok(LossGrad {
        loss: loss / b as f64,
        grad_probs: grad,
        clamped: 0,
    })
}

/// Carries `dL/dp` back through the softmax to `dL/dsim` (similarities, not
/// logits: the `1/tau` factor is included).
pub fn softmax_backward(pred: &BatchPrediction, grad_probs: &Mat, tau: f64) -> Mat {
    let mut out = Mat::zeros(pred.probs.rows, pred.probs.cols);
    for i in 0..pred.probs.rows {
        let p = pred.probs.row(i);
        let g = grad_probs.row(i);
        let mean = dot(p, g);
        for (o, (pj, gj)) in out.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            *o = pj * (gj - mean) / tau;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(b: usize, a: usize) -> BatchPrediction {
        BatchPrediction::from_probs(Mat::from_rows(&vec![vec![1.0 / a as f64; a]; b]))
    }

    #[test]
    fn equal_similarities_give_uniform_probabilities() {
        let images = Mat::from_rows(&[vec![1.0, 0.0]]);
        let classes = Mat::from_rows(&vec![vec![0.0, 1.0]; 4]);
        let p = class_probabilities(&images, &classes, 0.01);
        for v in p.probs.row(0) {
            assert!((v - 0.25).abs() < 1e-12);
        }
        assert!((p.weights[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn sharp_temperature_example() {
        // similarities 0.9 and 0.8 at tau 0.01 are logits 90 and 80
        let images = Mat::from_rows(&[vec![1.0, 0.0]]);
        let c = |s: f64| vec![s, (1.0 - s * s).sqrt()];
        let classes = Mat::from_rows(&[c(0.9), c(0.8)]);
        let p = class_probabilities(&images, &classes, 0.01);
        let expected_low = 1.0 / (1.0 + 10f64.exp());
        assert!((p.probs.get(0, 1) - expected_low).abs() < 1e-12);
        assert!((p.probs.get(0, 0) - 0.999_954_6).abs() < 1e-7);
        assert!((p.probs.get(0, 1) - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn equal_confidence_normalizes_to_half() {
        let p = BatchPrediction::from_probs(Mat::from_rows(&[vec![0.7, 0.3], vec![0.3, 0.7]]));
        assert_eq!(p.norm_weights, vec![0.5, 0.5]);
        assert_eq!(p.argmax, vec![0, 1]);
    }

    #[test]
    fn uniform_batch_has_zero_loss() {
        let out = ueo_loss(&uniform(3, 4), false).unwrap();
        assert!(out.loss.abs() < 1e-9);
    }

    #[test]
    fn one_hot_batch_has_zero_loss() {
        let p = BatchPrediction::from_probs(Mat::from_rows(&vec![vec![0.0, 1.0, 0.0]; 4]));
        let out = ueo_loss(&p, false).unwrap();
        assert!(out.loss.abs() < 1e-9);
    }

    #[test]
    fn single_row_batch_rejected() {
        assert!(ueo_loss(&uniform(1, 3), false).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let p = BatchPrediction::from_probs(Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        assert!(upl_cross_entropy(&p, &[1, 0]).unwrap().loss.abs() < 1e-12);
        let u = uniform(5, 7);
        let out = upl_cross_entropy(&u, &[0, 1, 2, 3, 6]).unwrap();
        assert!((out.loss - 7f64.ln()).abs() < 1e-12);
        assert!(upl_cross_entropy(&u, &[0, 1, 2, 3, 7]).is_err());
    }

    fn random_probs(rng: &mut ChaCha8Rng, b: usize, a: usize) -> Mat {
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                let mut r: Vec<f64> = (0..a).map(|_| rng.random_range(-3.0..3.0)).collect();
                softmax_in_place(&mut r);
                r
            })
            .collect();
        Mat::from_rows(&rows)
    }

    fn max_rel_error(analytic: &Mat, f: impl Fn(&Mat) -> f64, probs: &Mat) -> f64 {
        let h = 1e-6;
        let mut num = Mat::zeros(probs.rows, probs.cols);
        for k in 0..probs.data.len() {
            let mut plus = probs.clone();
            let mut minus = probs.clone();
            plus.data[k] += h;
            minus.data[k] -= h;
            num.data[k] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic.data.iter().zip(&num.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.data.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        diff / scale
    }

    #[test]
    fn ueo_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for detach in [false, true] {
            for _ in 0..20 {
                let probs = random_probs(&mut rng, 5, 4);
                let pred = BatchPrediction::from_probs(probs.clone());
                let out = ueo_loss(&pred, detach).unwrap();
                let f = |p: &Mat| {
                    let base = BatchPrediction::from_probs(p.clone());
                    if detach {
                        // hold the weights at their unperturbed values
                        let frozen = BatchPrediction {
                            probs: p.clone(),
                            weights: pred.weights.clone(),
                            norm_weights: pred.norm_weights.clone(),
                            argmax: pred.argmax.clone(),
                        };
                        ueo_loss(&frozen, true).unwrap().loss
                    } else {
                        ueo_loss(&base, false).unwrap().loss
                    }
                };
                let err = max_rel_error(&out.grad_probs, f, &probs);
                assert!(err < 1e-6, "detach={detach} err={err}");
            }
        }
    }

    #[test]
    fn upl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let probs = random_probs(&mut rng, 4, 5);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let out = upl_cross_entropy(&BatchPrediction::from_probs(probs.clone()), &labels).unwrap();
            let f = |p: &Mat| upl_cross_entropy(&BatchPrediction::from_probs(p.clone()), &labels).unwrap().loss;
            assert!(max_rel_error(&out.grad_probs, f, &probs) < 1e-6);
        }
    }

    #[test]
    fn temperature_keeps_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let images = random_probs(&mut rng, 6, 5);
        let classes = random_probs(&mut rng, 7, 5);
        let a = class_probabilities(&images, &classes, 0.01);
        let b = class_probabilities(&images, &classes, 0.7);
        assert_eq!(a.argmax, b.argmax);
    }
    #[test]
    fn detached_gradient_holds_weights_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut r: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.iter_mut().for_each(|v| *v /= s);
                r
            })
            .collect();
        let pred = BatchPrediction::from_probs(Mat::from_rows(&rows));
        let w0 = pred.norm_weights.clone();
        // the objective with the confidence weights frozen at their base values
        let frozen = |p: &[Vec<f64>]| {
            let inv_sum: f64 = w0.iter().map(|w| 1.0 / w).sum();
            let mut bar = vec![0.0; 3];
            for (row, w) in p.iter().zip(&w0) {
                for (b, v) in bar.iter_mut().zip(row) {
                    *b += v / w / inv_sum;
                }
            }
            p.iter().zip(&w0).map(|(r, w)| w * entropy(r)).sum::<f64>() - entropy(&bar)
        };
        let g = ueo_loss(&pred, true).unwrap().grad_probs;
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut up = rows.clone();
                let mut dn = rows.clone();
                up[i][j] += h;
                dn[i][j] -= h;
                let fd = (frozen(&up) - frozen(&dn)) / (2.0 * h);
                assert!((fd - g.get(i, j)).abs() < 1e-7, "({i},{j}) {fd} vs {}", g.get(i, j));
            }
        }
    }
}
