//! Recall@K retrieval evaluation over a candidate pool, in both directions,
//! plus per-class hard pools whose candidates all share an object class.
//!
//! Ranking is deterministic: score ties resolve toward the earlier pool
//! index, so reports are reproducible bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aligner::{forward, AlignerParams, BatchItem};
use crate::corpus::{ImageRecord, NounObjectMap, Triplet, TripletDataset};
use crate::mat::Mat;
use crate::ontology::{self, Ontology};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Nouns query, images are candidates.
    Image,
    /// Images query, nouns are candidates.
    Text,
}

/// One query-candidate unit: a noun with its caption context and its image's
/// regions. Position in the pool is the tie-breaking identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub caption_id: String,
    pub image_id: String,
    pub noun: String,
    pub object_class: String,
    pub caption_tokens: Vec<String>,
    pub regions: Vec<Vec<f64>>,
    pub region_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub instances: Vec<EvalInstance>,
    pub k_values: Vec<usize>,
}

pub const DEFAULT_K: [usize; 3] = [1, 5, 10];

impl EvalSet {
    /// Materializes every triplet of a dataset as one eval instance, in
    /// triplet order. Empty `k_values` falls back to {1, 5, 10}.
    pub fn from_dataset(dataset: &TripletDataset, k_values: &[usize]) -> Result<EvalSet> {
        if dataset.triplets.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let ks = if k_values.is_empty() {
            DEFAULT_K.to_vec()
        } else {
            k_values.to_vec()
        };
        let instances = dataset
            .triplets
            .iter()
            .map(|t| {
                let img = dataset.image(&t.image_id);
                let cap = dataset.caption(&t.caption_id);
                EvalInstance {
                    caption_id: t.caption_id.clone(),
                    image_id: t.image_id.clone(),
                    noun: t.noun.clone(),
                    object_class: t.object_class.clone(),
                    caption_tokens: cap.tokens.clone(),
                    regions: img.regions.clone(),
                    region_labels: img.region_labels.clone(),
                }
            })
            .collect();
        Ok(EvalSet {
            instances,
            k_values: ks,
        })
    }

    pub fn batch_items(&self) -> Vec<BatchItem<'_>> {
        self.instances
            .iter()
            .map(|inst| BatchItem {
                noun: &inst.noun,
                caption_tokens: &inst.caption_tokens,
                regions: &inst.regions,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub pool_size: usize,
    /// Recall@K keyed by K.
    pub recall_at: BTreeMap<usize, f64>,
}

/// Rank of the true candidate for one query: 1 plus the number of candidates
/// that beat it, where an equal score at an earlier pool index also beats it.
pub(crate) fn rank_of_true(scores: &[f64], true_idx: usize) -> usize {
    let s_true = scores[true_idx];
    let mut rank = 1;
    for (c, &s) in scores.iter().enumerate() {
        if c != true_idx && (s > s_true || (s == s_true && c < true_idx)) {
            rank += 1;
        }
    }
    rank
}

fn recalls_from_ranks(ranks: &[usize], k_values: &[usize], pool: usize) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for &k in k_values {
        if k == 0 || k > pool {
            return Err(Error::CutoffExceedsPool { k, pool });
        }
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        out.insert(k, hits as f64 / ranks.len() as f64);
    }
    Ok(out)
}

/// Scores the full pool against itself and reports Recall@K for each K in
/// the eval set. The query at pool index i has its true match at i.
pub fn evaluate(
    params: &AlignerParams,
    eval_set: &EvalSet,
    direction: Direction,
) -> Result<RetrievalReport> {
    if eval_set.instances.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let items = eval_set.batch_items();
    let scores = forward(params, &items)?.scores;
    Ok(report_from_scores(&scores, &eval_set.k_values, direction)?)
}

/// Recall computation split out so trainer holdout checks share the exact
/// ranking path.
pub(crate) fn report_from_scores(
    scores: &Mat,
    k_values: &[usize],
    direction: Direction,
) -> Result<RetrievalReport> {
    let n = scores.rows;
    let ranks: Vec<usize> = match direction {
        Direction::Image => (0..n)
            .map(|i| rank_of_true(scores.row(i), i))
            .collect(),
        Direction::Text => (0..n)
            .map(|j| {
                let col: Vec<f64> = (0..n).map(|i| scores.at(i, j)).collect();
                rank_of_true(&col, j)
            })
            .collect(),
    };
    Ok(RetrievalReport {
        direction,
        pool_size: n,
        recall_at: recalls_from_ranks(&ranks, k_values, n)?,
    })
}

/// Builds the ontology over eval instances so hard pools group by the exact
/// minibatch membership rule.
pub fn eval_ontology(instances: &[EvalInstance], map: &NounObjectMap) -> Result<Ontology> {
    let triplets: Vec<Triplet> = instances
        .iter()
        .map(|inst| Triplet {
            caption_id: inst.caption_id.clone(),
            image_id: inst.image_id.clone(),
            noun: inst.noun.clone(),
            object_class: inst.object_class.clone(),
        })
        .collect();
    let mut images: BTreeMap<String, ImageRecord> = BTreeMap::new();
    for inst in instances {
        images.entry(inst.image_id.clone()).or_insert_with(|| ImageRecord {
            image_id: inst.image_id.clone(),
            regions: inst.regions.clone(),
            region_labels: inst.region_labels.clone(),
        });
    }
    ontology::build_ontology(&triplets, &images, map)
}

/// One same-object pool per object class with at least `pool_min` member
/// instances, sorted by class name.
pub fn build_hard_pools(
    instances: &[EvalInstance],
    ontology: &Ontology,
    pool_min: usize,
    k_values: &[usize],
) -> Result<Vec<(String, EvalSet)>> {
    let ks = if k_values.is_empty() {
        DEFAULT_K.to_vec()
    } else {
        k_values.to_vec()
    };
    let mut pools = Vec::new();
    for node in ontology.object_nodes() {
        if node.instance_index.len() < pool_min {
            continue;
        }
        let class = node.object_class.clone().unwrap_or_default();
        let members: Vec<EvalInstance> = node
            .instance_index
            .iter()
            .map(|&i| instances[i].clone())
            .collect();
        pools.push((
            class,
            EvalSet {
                instances: members,
                k_values: ks.clone(),
            },
        ));
    }
    if pools.is_empty() {
        return Err(Error::NoQualifyingClass { min: pool_min });
    }
    Ok(pools)
}

/// Hard-pool evaluation: per-class reports plus the query-weighted micro
/// average across pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardPoolReport {
    pub direction: Direction,
    pub pools: BTreeMap<String, RetrievalReport>,
    pub total_queries: usize,
    pub micro_avg: BTreeMap<usize, f64>,
}

pub fn evaluate_hard_pools(
    params: &AlignerParams,
    pools: &[(String, EvalSet)],
    direction: Direction,
) -> Result<HardPoolReport> {
    let mut reports = BTreeMap::new();
    let mut totals: BTreeMap<usize, f64> = BTreeMap::new();
    let mut total_queries = 0usize;
    for (class, set) in pools {
        let report = evaluate(params, set, direction)?;
        total_queries += report.pool_size;
        for (&k, &r) in &report.recall_at {
            *totals.entry(k).or_default() += r * report.pool_size as f64;
        }
        reports.insert(class.clone(), report);
    }
    let micro_avg = totals
        .into_iter()
        .map(|(k, hits)| (k, hits / total_queries as f64))
        .collect();
    Ok(HardPoolReport {
        direction,
        pools: reports,
        total_queries,
        micro_avg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aligner::Vocab;
    use crate::mat::Mat;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pool where instance i's noun is "n{i}" and its image feature is the
    /// i-th basis vector; with identity maps scores are s[i][j] = 2*delta.
    fn orthogonal_setup(n: usize) -> (AlignerParams, EvalSet) {
        let vocab = Vocab::from_tokens((0..n).map(|i| format!("n{i}")));
        let d = n;
        let mut embed = Mat::zeros(n, d);
        for i in 0..n {
            let row = vocab.index_of(&format!("n{i}")).unwrap();
            embed.set(row, i, 2.0);
        }
        let eye = Mat::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 });
        let params = AlignerParams {
            vocab,
            embed,
            proj: eye.clone(),
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye,
            use_context: false,
        };
        let instances = (0..n)
            .map(|i| {
                let mut feat = vec![0.0; d];
                feat[i] = 1.0;
                EvalInstance {
                    caption_id: format!("c{i}"),
                    image_id: format!("i{i}"),
                    noun: format!("n{i}"),
                    object_class: "thing".into(),
                    caption_tokens: vec![format!("n{i}")],
                    regions: vec![feat],
                    region_labels: vec!["thing".into()],
                }
            })
            .collect();
        (
            params,
            EvalSet {
                instances,
                k_values: vec![1, 2, n],
            },
        )
    }

    fn zeroed(params: &AlignerParams) -> AlignerParams {
        let mut p = params.clone();
        for (_, t) in p.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    #[test]
    fn dominant_diagonal_scores_give_perfect_recall() {
        let (params, eval_set) = orthogonal_setup(6);
        for direction in [Direction::Image, Direction::Text] {
            let report = evaluate(&params, &eval_set, direction).unwrap();
            assert_eq!(report.recall_at[&1], 1.0);
            assert_eq!(report.recall_at[&2], 1.0);
            assert_eq!(report.recall_at[&6], 1.0);
        }
    }

    #[test]
    fn constant_scorer_recall_is_one_over_pool() {
        // All-zero parameters score every pair identically, so only the
        // query whose true candidate sits at pool index 0 survives the
        // earlier-index tie-break.
        let (params, mut eval_set) = orthogonal_setup(8);
        let params = zeroed(&params);
        eval_set.k_values = vec![1, 8];
        for direction in [Direction::Image, Direction::Text] {
            let report = evaluate(&params, &eval_set, direction).unwrap();
            assert_eq!(report.recall_at[&1], 1.0 / 8.0);
            assert_eq!(report.recall_at[&8], 1.0);
        }
    }

    #[test]
    fn ranks_match_brute_force_sort_oracle() {
        let (mut params, mut eval_set) = orthogonal_setup(10);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (_, t) in params.tensors_mut() {
            for v in &mut t.data {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
        }
        eval_set.k_values = (1..=10).collect();
        let items = eval_set.batch_items();
        let scores = forward(&params, &items).unwrap().scores;

        for direction in [Direction::Image, Direction::Text] {
            let report = evaluate(&params, &eval_set, direction).unwrap();
            for &k in &eval_set.k_values {
                let mut hits = 0usize;
                for q in 0..10 {
                    // Oracle: full sort by (score desc, index asc).
                    let mut order: Vec<usize> = (0..10).collect();
                    let key = |c: usize| match direction {
                        Direction::Image => scores.at(q, c),
                        Direction::Text => scores.at(c, q),
                    };
                    order.sort_by(|&a, &b| {
                        key(b).partial_cmp(&key(a)).unwrap().then(a.cmp(&b))
                    });
                    let rank = order.iter().position(|&c| c == q).unwrap() + 1;
                    if rank <= k {
                        hits += 1;
                    }
                }
                let want = hits as f64 / 10.0;
                assert_eq!(report.recall_at[&k], want, "{direction:?} @{k}");
            }
        }
    }

    #[test]
    fn recall_is_monotone_in_k_and_one_at_pool_size() {
        let (mut params, mut eval_set) = orthogonal_setup(9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (_, t) in params.tensors_mut() {
            for v in &mut t.data {
                *v = rng.random::<f64>() - 0.5;
            }
        }
        eval_set.k_values = (1..=9).collect();
        let report = evaluate(&params, &eval_set, Direction::Image).unwrap();
        let mut prev = 0.0;
        for k in 1..=9 {
            let r = report.recall_at[&k];
            assert!(r >= prev, "recall dropped at k={k}");
            prev = r;
        }
        assert_eq!(report.recall_at[&9], 1.0);
    }

    #[test]
    fn shuffling_a_tie_free_pool_preserves_recall() {
        let (mut params, eval_set) = orthogonal_setup(7);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for (_, t) in params.tensors_mut() {
            for v in &mut t.data {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
        }
        let report = evaluate(&params, &eval_set, Direction::Image).unwrap();

        let mut shuffled = eval_set.clone();
        shuffled.instances.reverse();
        let report_rev = evaluate(&params, &shuffled, Direction::Image).unwrap();
        assert_eq!(report.recall_at, report_rev.recall_at);
    }

    #[test]
    fn cutoff_beyond_pool_errors() {
        let (params, mut eval_set) = orthogonal_setup(4);
        eval_set.k_values = vec![5];
        let err = evaluate(&params, &eval_set, Direction::Image).unwrap_err();
        assert!(matches!(err, Error::CutoffExceedsPool { k: 5, pool: 4 }));
    }

    #[test]
    fn empty_pool_errors() {
        let (params, mut eval_set) = orthogonal_setup(2);
        eval_set.instances.clear();
        assert!(matches!(
            evaluate(&params, &eval_set, Direction::Image),
            Err(Error::EmptyDataset)
        ));
    }

    fn labeled_instance(i: usize, class: &str, with_label: bool) -> EvalInstance {
        EvalInstance {
            caption_id: format!("c{i}"),
            image_id: format!("i{i}"),
            noun: class.to_string(),
            object_class: class.to_string(),
            caption_tokens: vec![class.to_string()],
            regions: vec![vec![0.0, 1.0]],
            region_labels: if with_label {
                vec![class.to_string()]
            } else {
                vec!["background".into()]
            },
        }
    }

    fn simple_map(classes: &[&str]) -> NounObjectMap {
        NounObjectMap::from_entries(
            classes
                .iter()
                .map(|c| (c.to_string(), c.to_string()))
                .collect(),
        )
    }

    #[test]
    fn hard_pools_group_by_membership_and_respect_pool_min() {
        let mut instances = Vec::new();
        for i in 0..5 {
            instances.push(labeled_instance(i, "dog", true));
        }
        for i in 5..8 {
            instances.push(labeled_instance(i, "cat", true));
        }
        // Two cat instances whose images lack the label: not members.
        for i in 8..10 {
            instances.push(labeled_instance(i, "cat", false));
        }
        let map = simple_map(&["dog", "cat"]);
        let ont = eval_ontology(&instances, &map).unwrap();

        let pools = build_hard_pools(&instances, &ont, 3, &[1]).unwrap();
        let names: Vec<&str> = pools.iter().map(|(c, _)| c.as_str()).collect();
        assert_eq!(names, vec!["cat", "dog"]);
        let cat = &pools[0].1;
        assert_eq!(cat.instances.len(), 3);
        assert!(cat
            .instances
            .iter()
            .all(|inst| inst.region_labels.contains(&"cat".to_string())));

        assert!(matches!(
            build_hard_pools(&instances, &ont, 6, &[1]),
            Err(Error::NoQualifyingClass { min: 6 })
        ));
    }

    #[test]
    fn micro_average_weights_pools_by_query_count() {
        let (params, _) = orthogonal_setup(4);
        let make = |ids: &[usize]| EvalSet {
            instances: ids
                .iter()
                .map(|&i| {
                    let mut feat = vec![0.0; 4];
                    feat[i] = 1.0;
                    EvalInstance {
                        caption_id: format!("c{i}"),
                        image_id: format!("i{i}"),
                        noun: format!("n{i}"),
                        object_class: "thing".into(),
                        caption_tokens: vec![],
                        regions: vec![feat],
                        region_labels: vec!["thing".into()],
                    }
                })
                .collect(),
            k_values: vec![1],
        };
        // Pool A: 3 distinct queries, all correct. Pool B: two identical
        // instances tie, so only the earlier one ranks first. The micro
        // average is (3*1 + 2*0.5)/5 = 0.8, not the pool mean 0.75.
        let pools = vec![
            ("a".to_string(), make(&[0, 1, 2])),
            ("b".to_string(), make(&[3, 3])),
        ];
        let report = evaluate_hard_pools(&params, &pools, Direction::Image).unwrap();
        assert_eq!(report.total_queries, 5);
        assert_eq!(report.pools["a"].recall_at[&1], 1.0);
        assert_eq!(report.pools["b"].recall_at[&1], 0.5);
        assert_eq!(report.micro_avg[&1], 0.8);
    }
}
