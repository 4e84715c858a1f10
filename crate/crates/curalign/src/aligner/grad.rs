//! Analytic backward pass through score, attention, projection, and
//! embedding lookup. Verified against central finite differences.

use crate::aligner::{AlignerParams, BatchItem, Forward};
use crate::mat::{axpy, dot, Mat};

/// Gradients mirroring every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignerGrads {
    pub embed: Mat,
    pub proj: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
}

impl AlignerGrads {
    pub fn zeros_like(params: &AlignerParams) -> Self {
        AlignerGrads {
            embed: Mat::zeros(params.embed.rows, params.embed.cols),
            proj: Mat::zeros(params.proj.rows, params.proj.cols),
            wq: Mat::zeros(params.wq.rows, params.wq.cols),
            wk: Mat::zeros(params.wk.rows, params.wk.cols),
            wv: Mat::zeros(params.wv.rows, params.wv.cols),
        }
    }

    pub fn add_scaled(&mut self, other: &AlignerGrads, scale: f64) {
        self.embed.add_scaled(&other.embed, scale);
        self.proj.add_scaled(&other.proj, scale);
        self.wq.add_scaled(&other.wq, scale);
        self.wk.add_scaled(&other.wk, scale);
        self.wv.add_scaled(&other.wv, scale);
    }

    /// Named tensors in the same order as `AlignerParams::tensors`.
    pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("embed", &self.embed),
            ("proj", &self.proj),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
        ]
    }
}

/// Propagates dL/dscores back onto the parameters.
///
/// For one pair (i, j) with attention weights a, keys k_r, values v_r and
/// score s: writing p_r = h.v_r, the softmax jacobian contracts to
/// c_r = a_r (p_r - s), giving ds/dq = sum_r c_r k_r / sqrt(d),
/// ds/dk_r = c_r q / sqrt(d), ds/dv_r = a_r h and
/// ds/dh = pooled value + Wq^T ds/dq.
pub fn backward(
    params: &AlignerParams,
    items: &[BatchItem],
    fwd: &Forward,
    grad_scores: &Mat,
) -> AlignerGrads {
    let n = items.len();
    let d = params.dim();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    assert_eq!(grad_scores.rows, n);
    assert_eq!(grad_scores.cols, n);

    let mut grads = AlignerGrads::zeros_like(params);
    let mut grad_text = Mat::zeros(n, d);

    // Per-query pullbacks reused across all candidate images.
    let wk_t_q: Vec<Vec<f64>> = (0..n)
        .map(|i| params.wk.t_matvec(fwd.queries.row(i)))
        .collect();
    let wv_t_h: Vec<Vec<f64>> = (0..n)
        .map(|i| params.wv.t_matvec(fwd.encoding.text.row(i)))
        .collect();

    for j in 0..n {
        let u = &fwd.encoding.regions[j];
        let keys = &fwd.keys[j];
        let vals = &fwd.values[j];
        let r_count = u.rows;
        let mut grad_u = Mat::zeros(r_count, d);

        for i in 0..n {
            let g = grad_scores.at(i, j);
            if g == 0.0 {
                continue;
            }
            let h = fwd.encoding.text.row(i);
            let q = fwd.queries.row(i);
            let a = fwd.attn[j].row(i);
            let s = fwd.scores.at(i, j);

            let mut dq = vec![0.0; d];
            let mut pooled = vec![0.0; d];
            for r in 0..r_count {
                let v_r = vals.row(r);
                let k_r = keys.row(r);
                axpy(&mut pooled, v_r, a[r]);
                let c_r = a[r] * (dot(h, v_r) - s);
                axpy(&mut dq, k_r, c_r * inv_sqrt_d);

                let gk = g * c_r * inv_sqrt_d;
                grads.wk.add_outer(q, u.row(r), gk);
                axpy(grad_u.row_mut(r), &wk_t_q[i], gk);

                let gv = g * a[r];
                grads.wv.add_outer(h, u.row(r), gv);
                axpy(grad_u.row_mut(r), &wv_t_h[i], gv);
            }
            grads.wq.add_outer(&dq, h, g);

            let gh = grad_text.row_mut(i);
            axpy(gh, &pooled, g);
            axpy(gh, &params.wq.t_matvec(&dq), g);
        }

        // u_r = P^T x_r, so dP += x_r (du_r)^T.
        for r in 0..r_count {
            grads.proj.add_outer(&items[j].regions[r], grad_u.row(r), 1.0);
        }
    }

    // Text representations fan back onto embedding rows; context tokens each
    // receive a 1/T share of the mean pooling.
    for i in 0..n {
        let gh = grad_text.row(i);
        axpy(grads.embed.row_mut(fwd.encoding.noun_rows[i]), gh, 1.0);
        let ctx = &fwd.encoding.context_rows[i];
        if !ctx.is_empty() {
            let inv = 1.0 / ctx.len() as f64;
            for &row in ctx {
                axpy(grads.embed.row_mut(row), gh, inv);
            }
        }
    }
    grads
}
