//! Curriculum sampler over the ontology.
//!
//! The node distribution starts with all mass on the entity root. Each
//! refresh moves a (1 - alpha) fraction of the root's mass onto the object
//! nodes in proportion to their instance counts, unless that would drop the
//! root below the beta floor, in which case the refresh is a no-op. Minibatch
//! draws are two-stage: pick a node, then draw indices uniformly with
//! replacement from the node's pool (the whole dataset for the root).

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ontology::{Ontology, ENTITY_NODE_ID};
use crate::{Error, Result};

/// Curriculum hyperparameters. Defaults are full-scale training values; desk
/// runs override them in the train config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CurriculumConfig {
    /// Minibatch size.
    pub batch_size: usize,
    /// Steps between holdout evaluations (each evaluation may refresh).
    pub eval_interval: u64,
    /// Holdout retrieval accuracy required before a refresh fires.
    pub accuracy_threshold: f64,
    /// Fraction of entity mass kept by each refresh.
    pub alpha: f64,
    /// Refreshes that would leave the entity mass below this floor are
    /// skipped entirely.
    pub beta: f64,
    /// Ingestion cutoff: object classes with fewer triplets are dropped.
    pub min_instances: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            batch_size: 256,
            eval_interval: 5000,
            accuracy_threshold: 0.9,
            alpha: 0.9,
            beta: 0.2,
            min_instances: 5000,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidConfig("eval_interval must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig("alpha must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig("beta must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.accuracy_threshold) {
            return Err(Error::InvalidConfig(
                "accuracy_threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Indices drawn for one step, tagged with the node they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub indices: Vec<usize>,
    pub source_node: String,
}

/// Node sampling distribution plus the RNG that drives all draws. Serializes
/// to JSON for checkpoints; the embedded RNG carries its seed and stream
/// position, so a restored state continues the exact sequence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SamplerState {
    pub p_entity: f64,
    /// Mass per object class, keyed by class name.
    pub p_object: BTreeMap<String, f64>,
    pub rng_seed: u64,
    pub refresh_count: u64,
    rng: ChaCha8Rng,
}

impl SamplerState {
    /// All mass on the entity root; one zero entry per object node.
    pub fn init(ontology: &Ontology, seed: u64) -> Self {
        let p_object = ontology
            .object_nodes()
            .map(|n| (n.object_class.clone().unwrap_or_default(), 0.0))
            .collect();
        SamplerState {
            p_entity: 1.0,
            p_object,
            rng_seed: seed,
            refresh_count: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.p_entity + self.p_object.values().sum::<f64>()
    }

    /// Two-stage draw: node from the current distribution, then `batch_size`
    /// indices uniformly with replacement from that node's pool.
    pub fn sample_minibatch(
        &mut self,
        ontology: &Ontology,
        dataset_size: usize,
        batch_size: usize,
    ) -> Result<Minibatch> {
        if dataset_size == 0 {
            return Err(Error::EmptyDataset);
        }
        let node = self.draw_node()?;
        match node {
            None => Ok(self.draw_uniform(dataset_size, batch_size)),
            Some(class) => {
                let node = ontology.node_for_class(&class).ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "sampler state references class {class:?} missing from the ontology"
                    ))
                })?;
                let pool = &node.instance_index;
                let indices = (0..batch_size)
                    .map(|_| pool[self.rng.random_range(0..pool.len())])
                    .collect();
                Ok(Minibatch {
                    indices,
                    source_node: class,
                })
            }
        }
    }

    /// Baseline draw: always the entity branch, ignoring the distribution.
    pub fn sample_random(&mut self, dataset_size: usize, batch_size: usize) -> Result<Minibatch> {
        if dataset_size == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(self.draw_uniform(dataset_size, batch_size))
    }

    fn draw_uniform(&mut self, dataset_size: usize, batch_size: usize) -> Minibatch {
        let indices = (0..batch_size)
            .map(|_| self.rng.random_range(0..dataset_size))
            .collect();
        Minibatch {
            indices,
            source_node: ENTITY_NODE_ID.to_string(),
        }
    }

    /// Picks a node: None stands for the entity root. Zero-probability nodes
    /// are never drawn.
    fn draw_node(&mut self) -> Result<Option<String>> {
        let total = self.total_mass();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateDistribution);
        }
        let mut u = self.rng.random::<f64>() * total;
        let mut last: Option<Option<&str>> = None;
        if self.p_entity > 0.0 {
            if u < self.p_entity {
                return Ok(None);
            }
            u -= self.p_entity;
            last = Some(None);
        }
        for (class, &p) in &self.p_object {
            if p > 0.0 {
                if u < p {
                    return Ok(Some(class.clone()));
                }
                u -= p;
                last = Some(Some(class));
            }
        }
        // Rounding can push u past the final interval; take the last live node.
        last.map(|n| n.map(str::to_string))
            .ok_or(Error::DegenerateDistribution)
    }

    /// Moves a (1 - alpha) share of the entity mass onto object nodes,
    /// proportional to their current instance counts. Returns false (leaving
    /// the state untouched) when the shrunken entity mass would fall below
    /// beta or there is no object node to receive mass.
    pub fn refresh(&mut self, ontology: &Ontology, config: &CurriculumConfig) -> bool {
        let new_entity = config.alpha * self.p_entity;
        if new_entity < config.beta {
            return false;
        }
        let sizes: Vec<(&str, usize)> = ontology
            .object_nodes()
            .map(|n| {
                (
                    n.object_class.as_deref().unwrap_or_default(),
                    n.instance_index.len(),
                )
            })
            .collect();
        let total_size: usize = sizes.iter().map(|(_, s)| s).sum();
        if total_size == 0 {
            return false;
        }
        let moved_base = (1.0 - config.alpha) * self.p_entity;
        for (class, size) in sizes {
            let gain = moved_base * size as f64 / total_size as f64;
            *self.p_object.entry(class.to_string()).or_insert(0.0) += gain;
        }
        self.p_entity = new_entity;
        self.refresh_count += 1;
        true
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{NodeKind, OntologyNode};

    /// Ontology stub with the given class sizes; indices are just 0..size
    /// offsets shifted so nodes stay disjoint.
    fn ontology_with(sizes: &[(&str, usize)]) -> Ontology {
        let mut nodes = vec![OntologyNode {
            node_id: ENTITY_NODE_ID.into(),
            kind: NodeKind::Entity,
            object_class: None,
            instance_index: vec![],
        }];
        let mut offset = 0;
        for (class, size) in sizes {
            nodes.push(OntologyNode {
                node_id: class.to_string(),
                kind: NodeKind::Object,
                object_class: Some(class.to_string()),
                instance_index: (offset..offset + size).collect(),
            });
            offset += size;
        }
        Ontology {
            nodes,
            dataset_len: offset,
        }
    }

    fn assert_close(got: f64, want: f64, tol: f64, what: &str) {
        assert!(
            (got - want).abs() <= tol,
            "{what}: got {got}, want {want}"
        );
    }

    #[test]
    fn refresh_matches_hand_computed_sequence() {
        let ont = ontology_with(&[("apple", 100), ("dog", 300)]);
        let cfg = CurriculumConfig {
            alpha: 0.9,
            beta: 0.2,
            ..CurriculumConfig::default()
        };
        let mut state = SamplerState::init(&ont, 7);
        assert_eq!(state.p_entity, 1.0);
        assert_eq!(state.p_object["dog"], 0.0);

        assert!(state.refresh(&ont, &cfg));
        assert_close(state.p_entity, 0.9, 1e-12, "entity after one refresh");
        assert_close(state.p_object["dog"], 0.075, 1e-12, "dog after one refresh");
        assert_close(state.p_object["apple"], 0.025, 1e-12, "apple after one refresh");
        assert_close(state.total_mass(), 1.0, 1e-9, "mass after one refresh");

        assert!(state.refresh(&ont, &cfg));
        assert_close(state.p_entity, 0.81, 1e-12, "entity after two refreshes");
        assert_close(state.p_object["dog"], 0.1425, 1e-12, "dog after two refreshes");
        assert_close(state.p_object["apple"], 0.0475, 1e-12, "apple after two refreshes");
        assert_close(state.total_mass(), 1.0, 1e-9, "mass after two refreshes");
        assert_eq!(state.refresh_count, 2);
    }

    #[test]
    fn refresh_below_floor_is_a_full_no_op() {
        let ont = ontology_with(&[("apple", 100), ("dog", 300)]);
        let cfg = CurriculumConfig {
            alpha: 0.9,
            beta: 0.2,
            ..CurriculumConfig::default()
        };
        let mut state = SamplerState::init(&ont, 7);
        state.p_entity = 0.2;
        state.p_object.insert("dog".into(), 0.6);
        state.p_object.insert("apple".into(), 0.2);
        let before = (state.p_entity, state.p_object.clone(), state.refresh_count);

        // 0.9 * 0.2 = 0.18 < 0.2: nothing may change, not even a clamp.
        assert!(!state.refresh(&ont, &cfg));
        assert_eq!(state.p_entity, before.0);
        assert_eq!(state.p_object, before.1);
        assert_eq!(state.refresh_count, before.2);
    }

    #[test]
    fn refresh_exactly_at_floor_proceeds() {
        let ont = ontology_with(&[("dog", 10)]);
        let cfg = CurriculumConfig {
            alpha: 0.5,
            beta: 0.25,
            ..CurriculumConfig::default()
        };
        let mut state = SamplerState::init(&ont, 7);
        state.p_entity = 0.5;
        state.p_object.insert("dog".into(), 0.5);
        // 0.5 * 0.5 == beta exactly: the guard only rejects strictly below.
        assert!(state.refresh(&ont, &cfg));
        assert_close(state.p_entity, 0.25, 1e-12, "entity at floor");
    }

    #[test]
    fn mass_conserved_and_entity_monotone_over_random_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..200 {
            let n_nodes = rng.random_range(1..8usize);
            let sizes: Vec<(String, usize)> = (0..n_nodes)
                .map(|i| (format!("class{i:02}"), rng.random_range(1..500usize)))
                .collect();
            let refs: Vec<(&str, usize)> =
                sizes.iter().map(|(c, s)| (c.as_str(), *s)).collect();
            let ont = ontology_with(&refs);
            let cfg = CurriculumConfig {
                alpha: 0.05 + 0.9 * rng.random::<f64>(),
                beta: 0.3 * rng.random::<f64>(),
                ..CurriculumConfig::default()
            };
            let mut state = SamplerState::init(&ont, case);
            let mut prev_entity = state.p_entity;
            for _ in 0..rng.random_range(1..30u32) {
                state.refresh(&ont, &cfg);
                assert!(state.p_entity <= prev_entity, "entity mass grew");
                assert_close(state.total_mass(), 1.0, 1e-9, "total mass");
                prev_entity = state.p_entity;
            }
        }
    }

    #[test]
    fn first_refresh_mass_is_proportional_to_node_size() {
        let ont = ontology_with(&[("a", 123), ("b", 41), ("c", 999)]);
        let cfg = CurriculumConfig::default();
        let mut state = SamplerState::init(&ont, 3);
        assert!(state.refresh(&ont, &cfg));
        let ratio = state.p_object["a"] / state.p_object["b"];
        assert_close(ratio, 123.0 / 41.0, 1e-12, "a/b ratio");
        let ratio = state.p_object["c"] / state.p_object["a"];
        assert_close(ratio, 999.0 / 123.0, 1e-12, "c/a ratio");
    }

    #[test]
    fn node_draws_match_distribution_within_three_sigma() {
        let ont = ontology_with(&[("apple", 200), ("dog", 200)]);
        let mut state = SamplerState::init(&ont, 99);
        state.p_entity = 0.5;
        state.p_object.insert("dog".into(), 0.3);
        state.p_object.insert("apple".into(), 0.2);

        let n = 100_000usize;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..n {
            let mb = state.sample_minibatch(&ont, 400, 1).unwrap();
            *counts.entry(mb.source_node).or_default() += 1;
        }
        for (node, p) in [("entity", 0.5), ("dog", 0.3), ("apple", 0.2)] {
            let expected = p * n as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let got = counts[node] as f64;
            assert!(
                (got - expected).abs() <= 3.0 * sigma,
                "{node}: got {got}, expected {expected} +- {}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn within_node_draws_are_uniform_by_chi_square() {
        let pool = 20usize;
        let ont = ontology_with(&[("dog", pool)]);
        let mut state = SamplerState::init(&ont, 5);
        state.p_entity = 0.0;
        state.p_object.insert("dog".into(), 1.0);

        let n = 100_000usize;
        let mb = state.sample_minibatch(&ont, pool, n).unwrap();
        assert_eq!(mb.source_node, "dog");
        let mut hist = vec![0usize; pool];
        for idx in mb.indices {
            hist[idx] += 1;
        }
        let expected = n as f64 / pool as f64;
        let chi2: f64 = hist
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // chi2 has mean pool-1 and variance 2(pool-1).
        let dof = (pool - 1) as f64;
        assert!(
            chi2 < dof + 3.0 * (2.0 * dof).sqrt(),
            "chi2 {chi2} too large for {dof} dof"
        );
    }

    #[test]
    fn entity_draws_cover_dataset_uniformly() {
        let ont = ontology_with(&[("dog", 5)]);
        let mut state = SamplerState::init(&ont, 5);
        let n = 100_000usize;
        let size = 25usize;
        let mb = state.sample_random(size, n).unwrap();
        let mut hist = vec![0usize; size];
        for idx in mb.indices {
            hist[idx] += 1;
        }
        let expected = n as f64 / size as f64;
        let chi2: f64 = hist
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        let dof = (size - 1) as f64;
        assert!(chi2 < dof + 3.0 * (2.0 * dof).sqrt(), "chi2 {chi2}");
    }

    #[test]
    fn object_node_minibatches_stay_inside_their_pool() {
        let ont = ontology_with(&[("apple", 17), ("dog", 40)]);
        let mut state = SamplerState::init(&ont, 21);
        state.p_entity = 0.0;
        state.p_object.insert("dog".into(), 0.7);
        state.p_object.insert("apple".into(), 0.3);
        for _ in 0..200 {
            let mb = state.sample_minibatch(&ont, 57, 16).unwrap();
            let node = ont.node_for_class(&mb.source_node).unwrap();
            for idx in &mb.indices {
                assert!(node.instance_index.contains(idx));
            }
        }
    }

    #[test]
    fn all_zero_distribution_is_rejected() {
        let ont = ontology_with(&[("dog", 5)]);
        let mut state = SamplerState::init(&ont, 1);
        state.p_entity = 0.0;
        let err = state.sample_minibatch(&ont, 5, 4).unwrap_err();
        assert!(matches!(err, Error::DegenerateDistribution));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ont = ontology_with(&[]);
        let mut state = SamplerState::init(&ont, 1);
        assert!(matches!(
            state.sample_minibatch(&ont, 0, 4),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            state.sample_random(0, 4),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn zero_probability_nodes_are_never_drawn() {
        let ont = ontology_with(&[("apple", 10), ("dog", 10)]);
        let mut state = SamplerState::init(&ont, 13);
        state.p_entity = 0.5;
        state.p_object.insert("dog".into(), 0.5);
        // apple stays at exactly 0.
        for _ in 0..2000 {
            let mb = state.sample_minibatch(&ont, 20, 1).unwrap();
            assert_ne!(mb.source_node, "apple");
        }
    }

    #[test]
    fn json_roundtrip_resumes_the_exact_draw_sequence() {
        let ont = ontology_with(&[("dog", 50)]);
        let cfg = CurriculumConfig::default();
        let mut state = SamplerState::init(&ont, 4242);
        state.refresh(&ont, &cfg);
        for _ in 0..17 {
            state.sample_minibatch(&ont, 50, 8).unwrap();
        }
        let json = state.to_json().unwrap();
        let mut restored = SamplerState::from_json(&json).unwrap();
        assert_eq!(restored, state);
        for _ in 0..50 {
            let a = state.sample_minibatch(&ont, 50, 8).unwrap();
            let b = restored.sample_minibatch(&ont, 50, 8).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn config_validation_rejects_out_of_range_values() {
        let mut cfg = CurriculumConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.alpha = 1.0;
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.9;
        cfg.beta = -0.1;
        assert!(cfg.validate().is_err());
        cfg.beta = 0.2;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }
}
