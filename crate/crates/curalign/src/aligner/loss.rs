//! Symmetric InfoNCE over the score matrix: image retrieval normalizes each
//! row (caption picks its image), text retrieval each column. Both return the
//! mean negative log-likelihood of the diagonal and the exact gradient
//! (softmax minus one-hot, scaled by 1/N).

use crate::mat::Mat;

/// log(sum(exp(xs))) with max subtraction.
fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Image-retrieval loss: each caption must pick out its own image among the
/// batch. Returns (loss, dL/dscores).
pub fn loss_ir(scores: &Mat) -> (f64, Mat) {
    assert_eq!(scores.rows, scores.cols, "score matrix must be square");
    let n = scores.rows;
    let inv_n = 1.0 / n as f64;
    let mut grad = Mat::zeros(n, n);
    let mut total = 0.0;
    for i in 0..n {
        let lse = log_sum_exp(scores.row(i).iter().copied());
        total += lse - scores.at(i, i);
        for j in 0..n {
            grad.set(i, j, (scores.at(i, j) - lse).exp() * inv_n);
        }
        grad.set(i, i, grad.at(i, i) - inv_n);
    }
    (total * inv_n, grad)
}

/// Text-retrieval loss: each image must pick out its own caption. Columns
/// take the place of rows.
pub fn loss_tr(scores: &Mat) -> (f64, Mat) {
    assert_eq!(scores.rows, scores.cols, "score matrix must be square");
    let n = scores.rows;
    let inv_n = 1.0 / n as f64;
    let mut grad = Mat::zeros(n, n);
    let mut total = 0.0;
    for j in 0..n {
        let lse = log_sum_exp((0..n).map(|i| scores.at(i, j)));
        total += lse - scores.at(j, j);
        for i in 0..n {
            grad.set(i, j, (scores.at(i, j) - lse).exp() * inv_n);
        }
        grad.set(j, j, grad.at(j, j) - inv_n);
    }
    (total * inv_n, grad)
}
