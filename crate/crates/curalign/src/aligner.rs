//! Text-side noun encoding, region projection, and single-head cross
//! attention producing the noun-image score matrix. All math is f64 and
//! single-threaded so runs are bit-reproducible.

pub mod grad;
pub mod loss;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::mat::{dot, Mat};
use crate::{Error, Result};

/// Sorted token table; row i of the embedding matrix belongs to `tokens[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(iter: I) -> Self {
        let set: BTreeSet<String> = iter.into_iter().collect();
        Vocab {
            tokens: set.into_iter().collect(),
        }
    }

    pub fn index_of(&self, token: &str) -> Result<usize> {
        self.tokens
            .binary_search_by(|t| t.as_str().cmp(token))
            .map_err(|_| Error::UnknownToken(token.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl From<Vec<String>> for Vocab {
    fn from(mut tokens: Vec<String>) -> Self {
        tokens.sort();
        tokens.dedup();
        Vocab { tokens }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Vec<String> {
        v.tokens
    }
}

/// All trainable tensors plus the vocabulary that indexes the embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignerParams {
    pub vocab: Vocab,
    /// |vocab| x d token embeddings.
    pub embed: Mat,
    /// d_in x d region feature projection.
    pub proj: Mat,
    /// d x d attention maps.
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    /// Mix the mean caption-token embedding into each noun representation.
    pub use_context: bool,
}

impl AlignerParams {
    /// Gaussian init scaled so scores start near unit magnitude.
    pub fn init(vocab: Vocab, d_in: usize, d: usize, use_context: bool, seed: u64) -> Self {
        assert!(d > 0 && d_in > 0, "zero model dimension");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed_dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        let proj_dist = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).unwrap();
        let fill = |rows: usize, cols: usize, dist: &Normal<f64>, rng: &mut ChaCha8Rng| {
            Mat::from_fn(rows, cols, |_, _| dist.sample(rng))
        };
        let embed = fill(vocab.len(), d, &embed_dist, &mut rng);
        let proj = fill(d_in, d, &proj_dist, &mut rng);
        let wq = fill(d, d, &embed_dist, &mut rng);
        let wk = fill(d, d, &embed_dist, &mut rng);
        let wv = fill(d, d, &embed_dist, &mut rng);
        AlignerParams {
            vocab,
            embed,
            proj,
            wq,
            wk,
            wv,
            use_context,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows
    }

    pub fn feature_dim(&self) -> usize {
        self.proj.rows
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Named tensors in a fixed order, for checkpoints and optimizers.
    pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("embed", &self.embed),
            ("proj", &self.proj),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![
            ("embed", &mut self.embed),
            ("proj", &mut self.proj),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
        ]
    }
}

/// One scoring instance: the noun, its caption's tokens (used only when
/// context mixing is on), and the raw region features of its image.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub noun: &'a str,
    pub caption_tokens: &'a [String],
    pub regions: &'a [Vec<f64>],
}

/// Encoded batch: text representations and projected region sets.
#[derive(Debug, Clone)]
pub struct BatchEncoding {
    /// N x d noun representations h_i.
    pub text: Mat,
    /// Per item: R x d projected regions.
    pub regions: Vec<Mat>,
    /// Embedding row of each item's noun.
    pub noun_rows: Vec<usize>,
    /// Embedding rows of each item's caption tokens (empty unless context
    /// mixing is on).
    pub context_rows: Vec<Vec<usize>>,
}

/// Looks up noun embeddings (plus the mean caption embedding when enabled)
/// and projects raw region features into the shared d-dim space.
pub fn encode_batch(params: &AlignerParams, items: &[BatchItem]) -> Result<BatchEncoding> {
    let d = params.dim();
    let mut text = Mat::zeros(items.len(), d);
    let mut regions = Vec::with_capacity(items.len());
    let mut noun_rows = Vec::with_capacity(items.len());
    let mut context_rows = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let row = params.vocab.index_of(item.noun)?;
        noun_rows.push(row);
        let h = text.row_mut(i);
        h.copy_from_slice(params.embed.row(row));
        let mut ctx = Vec::new();
        if params.use_context {
            if item.caption_tokens.is_empty() {
                return Err(Error::MalformedRecord(format!(
                    "caption for noun {:?} has no tokens to mix",
                    item.noun
                )));
            }
            let inv = 1.0 / item.caption_tokens.len() as f64;
            for tok in item.caption_tokens {
                let trow = params.vocab.index_of(tok)?;
                ctx.push(trow);
                for (hk, ek) in h.iter_mut().zip(params.embed.row(trow)) {
                    *hk += inv * ek;
                }
            }
        }
        context_rows.push(ctx);

        if item.regions.is_empty() {
            return Err(Error::MalformedRecord("item has no regions".into()));
        }
        let mut proj = Mat::zeros(item.regions.len(), d);
        for (r, feat) in item.regions.iter().enumerate() {
            if feat.len() != params.feature_dim() {
                return Err(Error::MalformedRecord(format!(
                    "region width {} does not match projection input {}",
                    feat.len(),
                    params.feature_dim()
                )));
            }
            proj.row_mut(r).copy_from_slice(&params.proj.t_matvec(feat));
        }
        regions.push(proj);
    }
    Ok(BatchEncoding {
        text,
        regions,
        noun_rows,
        context_rows,
    })
}

/// Numerically stable softmax in place.
fn softmax(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Attention-pooled value vector for one (text, region set) pair. `regions`
/// holds projected d-dim region vectors, one per row.
pub fn attend(params: &AlignerParams, text: &[f64], regions: &Mat) -> Vec<f64> {
    let d = params.dim();
    let q = params.wq.matvec(text);
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights: Vec<f64> = (0..regions.rows)
        .map(|r| dot(&q, &params.wk.matvec(regions.row(r))) * scale)
        .collect();
    softmax(&mut weights);
    let mut out = vec![0.0; d];
    for r in 0..regions.rows {
        let v = params.wv.matvec(regions.row(r));
        for (o, vk) in out.iter_mut().zip(&v) {
            *o += weights[r] * vk;
        }
    }
    out
}

/// Full forward pass with every intermediate needed by the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub encoding: BatchEncoding,
    /// N x d query vectors.
    pub queries: Mat,
    /// Per item: R x d keys / values.
    pub keys: Vec<Mat>,
    pub values: Vec<Mat>,
    /// Per item j: N x R_j attention weights, one row per query.
    pub attn: Vec<Mat>,
    /// N x N scores; s[i][j] pairs text i with image j.
    pub scores: Mat,
}

pub fn forward(params: &AlignerParams, items: &[BatchItem]) -> Result<Forward> {
    let encoding = encode_batch(params, items)?;
    let n = items.len();
    let d = params.dim();
    let scale = 1.0 / (d as f64).sqrt();

    let mut queries = Mat::zeros(n, d);
    for i in 0..n {
        queries
            .row_mut(i)
            .copy_from_slice(&params.wq.matvec(encoding.text.row(i)));
    }
    let mut keys = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for u in &encoding.regions {
        let mut k = Mat::zeros(u.rows, d);
        let mut v = Mat::zeros(u.rows, d);
        for r in 0..u.rows {
            k.row_mut(r).copy_from_slice(&params.wk.matvec(u.row(r)));
            v.row_mut(r).copy_from_slice(&params.wv.matvec(u.row(r)));
        }
        keys.push(k);
        values.push(v);
    }

    let mut attn = Vec::with_capacity(n);
    let mut scores = Mat::zeros(n, n);
    for j in 0..n {
        let k = &keys[j];
        let v = &values[j];
        let mut weights = Mat::zeros(n, k.rows);
        for i in 0..n {
            let q = queries.row(i);
            let row = weights.row_mut(i);
            for r in 0..k.rows {
                row[r] = dot(q, k.row(r)) * scale;
            }
            softmax(row);
            let h = encoding.text.row(i);
            let mut s = 0.0;
            for r in 0..k.rows {
                s += row[r] * dot(h, v.row(r));
            }
            scores.set(i, j, s);
        }
        attn.push(weights);
    }
    Ok(Forward {
        encoding,
        queries,
        keys,
        values,
        attn,
        scores,
    })
}

/// The N x N noun-image score matrix for a batch.
pub fn score_matrix(params: &AlignerParams, items: &[BatchItem]) -> Result<Mat> {
    Ok(forward(params, items)?.scores)
}
