//! Training loop: curriculum or uniform minibatch sampling, contrastive
//! losses in one or both directions, SGD or Adam updates, periodic holdout
//! evaluation that gates curriculum refreshes, CSV logging, and resumable
//! checkpoints.
//!
//! A holdout slice is split off before training; the remaining instances
//! form the training view and the ontology is restricted to it. The
//! vocabulary covers every caption, holdout included, so holdout nouns are
//! never out of vocabulary at evaluation time.

pub mod checkpoint;

use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aligner::grad::{backward, AlignerGrads};
use crate::aligner::loss::{loss_ir, loss_tr};
use crate::aligner::{forward, AlignerParams, BatchItem, Vocab};
use crate::corpus::TripletDataset;
use crate::mat::Mat;
use crate::ontology::{build_for_dataset, Ontology};
use crate::retrieval::{evaluate, Direction, EvalInstance, EvalSet};
use crate::sampler::{CurriculumConfig, SamplerState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Ontology-guided two-stage sampling with threshold-gated refreshes.
    Curriculum,
    /// Uniform over the training view; the curriculum never advances.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Fixed tensor order shared by parameter updates and checkpoints.
pub(crate) const TENSOR_NAMES: [&str; 5] = ["embed", "proj", "wq", "wk", "wv"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Mix the mean caption-token embedding into each noun query.
    pub use_context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            use_context: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Add the text-retrieval loss gradient; the loss itself is always logged.
    pub use_tr_loss: bool,
    pub seed: u64,
    /// Instances withheld from training for refresh gating and evaluation.
    pub holdout_size: usize,
    pub sampling: SamplingMode,
    /// Steps between mid-run checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub model: ModelConfig,
    pub curriculum: CurriculumConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 1000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            use_tr_loss: true,
            seed: 0,
            holdout_size: 500,
            sampling: SamplingMode::Curriculum,
            checkpoint_interval: 0,
            model: ModelConfig::default(),
            curriculum: CurriculumConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.model.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be at least 1".into()));
        }
        if self.sampling == SamplingMode::Curriculum && self.holdout_size == 0 {
            return Err(Error::InvalidConfig(
                "curriculum sampling needs a holdout to gate refreshes".into(),
            ));
        }
        self.curriculum.validate()
    }
}

/// First-moment/second-moment buffers follow the tensor order of
/// `AlignerParams::tensors`; SGD keeps no buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &AlignerParams) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => {
                let zeros: Vec<Mat> = params
                    .tensors()
                    .iter()
                    .map(|(_, t)| Mat::zeros(t.rows, t.cols))
                    .collect();
                (zeros.clone(), zeros)
            }
        };
        OptimizerState { kind, step: 0, m, v }
    }

    pub fn apply(&mut self, params: &mut AlignerParams, grads: &AlignerGrads, lr: f64) {
        self.step += 1;
        let grads = grads.tensors();
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads) {
                    p.add_scaled(g, -lr);
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
                for (idx, ((_, p), (_, g))) in
                    params.tensors_mut().into_iter().zip(grads).enumerate()
                {
                    let m = &mut self.m[idx];
                    let v = &mut self.v[idx];
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
                        v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        let m_hat = m.data[i] / bc1;
                        let v_hat = v.data[i] / bc2;
                        p.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

pub const LOG_HEADER: &str = "step,loss_ir,loss_tr,holdout_accuracy,p_entity,refresh_count";

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss_ir: f64,
    pub loss_tr: f64,
    /// Present only on evaluation steps.
    pub holdout_accuracy: Option<f64>,
    pub p_entity: f64,
    pub refresh_count: u64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let acc = self
            .holdout_accuracy
            .map(|a| a.to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss_ir, self.loss_tr, acc, self.p_entity, self.refresh_count
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: AlignerParams,
    pub optimizer: OptimizerState,
    pub sampler: SamplerState,
    pub step: u64,
    /// Dataset positions withheld from training, ascending.
    pub holdout: Vec<usize>,
    /// Rows appended by this call (a resumed run reports only its own).
    pub rows: Vec<LogRow>,
    /// Full CSV log including header and any restored prefix.
    pub log: String,
    pub last_holdout_accuracy: Option<f64>,
}

// Sub-seeds keep parameter init, holdout choice, and sampling on
// independent RNG streams even though the config carries one seed.
const HOLDOUT_SEED_OFFSET: u64 = 0x686f6c64;
const SAMPLER_SEED_OFFSET: u64 = 0x73616d70;

/// Partial Fisher-Yates draw of `size` positions out of `n`; both halves are
/// returned sorted ascending.
pub fn split_holdout(n: usize, size: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    assert!(size <= n, "holdout larger than dataset");
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(HOLDOUT_SEED_OFFSET));
    for i in 0..size {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut holdout = idx[..size].to_vec();
    let mut view = idx[size..].to_vec();
    holdout.sort_unstable();
    view.sort_unstable();
    (holdout, view)
}

/// Token table over every caption in the dataset, holdout included.
pub fn build_vocab(dataset: &TripletDataset) -> Vocab {
    Vocab::from_tokens(
        dataset
            .captions
            .values()
            .flat_map(|c| c.tokens.iter().cloned()),
    )
}

/// Eval pool over the given dataset positions, in the given order, with
/// Recall@1 as the only cutoff.
pub fn holdout_eval_set(dataset: &TripletDataset, positions: &[usize]) -> EvalSet {
    let instances = positions
        .iter()
        .map(|&pos| {
            let t = &dataset.triplets[pos];
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
    EvalSet {
        instances,
        k_values: vec![1],
    }
}

/// Content fingerprint used to refuse resuming against a different dataset.
pub fn dataset_digest(dataset: &TripletDataset) -> String {
    let blob = serde_json::to_vec(&(
        &dataset.images,
        &dataset.captions,
        &dataset.triplets,
        &dataset.map,
    ))
    .expect("dataset serializes");
    let digest = Sha256::digest(&blob);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct Engine<'a> {
    dataset: &'a TripletDataset,
    config: TrainConfig,
    digest: String,
    view: Vec<usize>,
    holdout: Vec<usize>,
    ontology: Ontology,
    holdout_set: Option<EvalSet>,
    params: AlignerParams,
    opt: OptimizerState,
    sampler: SamplerState,
    step: u64,
    log: String,
    rows: Vec<LogRow>,
    last_acc: Option<f64>,
}

impl<'a> Engine<'a> {
    fn split_and_restrict(
        dataset: &TripletDataset,
        config: &TrainConfig,
    ) -> Result<(Vec<usize>, Vec<usize>, Ontology)> {
        let n = dataset.triplets.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if config.holdout_size >= n {
            return Err(Error::InvalidConfig(format!(
                "holdout of {} leaves no training instances out of {n}",
                config.holdout_size
            )));
        }
        let (holdout, view) = split_holdout(n, config.holdout_size, config.seed);
        let ontology = build_for_dataset(dataset)?.restrict(&view);
        if config.sampling == SamplingMode::Curriculum
            && ontology.object_nodes().next().is_none()
        {
            return Err(Error::NoObjectNodes);
        }
        Ok((holdout, view, ontology))
    }

    fn new(dataset: &'a TripletDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (holdout, view, ontology) = Self::split_and_restrict(dataset, &config)?;
        let vocab = build_vocab(dataset);
        let params = AlignerParams::init(
            vocab,
            dataset.feature_dim,
            config.model.embed_dim,
            config.model.use_context,
            config.seed,
        );
        let opt = OptimizerState::new(config.optimizer, &params);
        let sampler = SamplerState::init(
            &ontology,
            config.seed.wrapping_add(SAMPLER_SEED_OFFSET),
        );
        let holdout_set =
            (!holdout.is_empty()).then(|| holdout_eval_set(dataset, &holdout));
        let mut log = String::from(LOG_HEADER);
        log.push('\n');
        Ok(Engine {
            digest: dataset_digest(dataset),
            dataset,
            config,
            view,
            holdout,
            ontology,
            holdout_set,
            params,
            opt,
            sampler,
            step: 0,
            log,
            rows: Vec::new(),
            last_acc: None,
        })
    }

    fn from_checkpoint(dir: &Path, dataset: &'a TripletDataset) -> Result<Self> {
        let bundle = checkpoint::read_checkpoint(dir)?;
        bundle.config.validate()?;
        let digest = dataset_digest(dataset);
        if bundle.dataset_len != dataset.triplets.len() || bundle.dataset_digest != digest {
            return Err(Error::Checkpoint(
                "checkpoint was written against a different dataset".into(),
            ));
        }
        let (holdout, view, ontology) = Self::split_and_restrict(dataset, &bundle.config)?;
        if holdout != bundle.holdout {
            return Err(Error::Checkpoint(
                "holdout in checkpoint disagrees with config seed".into(),
            ));
        }
        if build_vocab(dataset).tokens() != bundle.params.vocab.tokens() {
            return Err(Error::Checkpoint(
                "vocabulary in checkpoint disagrees with dataset".into(),
            ));
        }
        let holdout_set =
            (!holdout.is_empty()).then(|| holdout_eval_set(dataset, &holdout));
        Ok(Engine {
            digest,
            dataset,
            config: bundle.config,
            view,
            holdout,
            ontology,
            holdout_set,
            params: bundle.params,
            opt: bundle.optimizer,
            sampler: bundle.sampler,
            step: bundle.step,
            log: bundle.log,
            rows: Vec::new(),
            last_acc: None,
        })
    }

    fn train_step(&mut self) -> Result<(f64, f64)> {
        let batch = self.config.curriculum.batch_size;
        let mb = match self.config.sampling {
            SamplingMode::Curriculum => {
                self.sampler
                    .sample_minibatch(&self.ontology, self.view.len(), batch)?
            }
            SamplingMode::Random => self.sampler.sample_random(self.view.len(), batch)?,
        };
        let items: Vec<BatchItem> = mb
            .indices
            .iter()
            .map(|&vi| {
                let t = &self.dataset.triplets[self.view[vi]];
                BatchItem {
                    noun: &t.noun,
                    caption_tokens: &self.dataset.caption(&t.caption_id).tokens,
                    regions: &self.dataset.image(&t.image_id).regions,
                }
            })
            .collect();
        let fwd = forward(&self.params, &items)?;
        let (l_ir, g_ir) = loss_ir(&fwd.scores);
        let (l_tr, g_tr) = loss_tr(&fwd.scores);
        if !l_ir.is_finite() || !l_tr.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                node: mb.source_node,
            });
        }
        let mut g = g_ir;
        if self.config.use_tr_loss {
            g.add_scaled(&g_tr, 1.0);
        }
        let grads = backward(&self.params, &items, &fwd, &g);
        self.opt
            .apply(&mut self.params, &grads, self.config.learning_rate);
        Ok((l_ir, l_tr))
    }

    fn evaluate_holdout(&self) -> Result<Option<f64>> {
        match &self.holdout_set {
            Some(set) => {
                let report = evaluate(&self.params, set, Direction::Image)?;
                Ok(Some(report.recall_at[&1]))
            }
            None => Ok(None),
        }
    }

    fn write_checkpoint(&self, dir: &Path) -> Result<()> {
        checkpoint::write_checkpoint(
            dir,
            &self.params,
            &self.opt,
            &self.sampler,
            self.step,
            self.dataset.triplets.len(),
            &self.digest,
            &self.holdout,
            &self.config,
            &self.log,
        )
    }

    fn run(mut self, out_dir: Option<&Path>) -> Result<TrainOutcome> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        while self.step < self.config.total_steps {
            self.step += 1;
            let (l_ir, l_tr) = self.train_step()?;
            let mut acc = None;
            if self.step % self.config.curriculum.eval_interval == 0 {
                acc = self.evaluate_holdout()?;
                if acc.is_some() {
                    self.last_acc = acc;
                }
                if self.config.sampling == SamplingMode::Curriculum {
                    if let Some(a) = acc {
                        if a >= self.config.curriculum.accuracy_threshold {
                            self.sampler.refresh(&self.ontology, &self.config.curriculum);
                        }
                    }
                }
            }
            // The row reflects post-refresh sampling state, so a refresh is
            // visible on the step that triggered it.
            let row = LogRow {
                step: self.step,
                loss_ir: l_ir,
                loss_tr: l_tr,
                holdout_accuracy: acc,
                p_entity: self.sampler.p_entity,
                refresh_count: self.sampler.refresh_count,
            };
            self.log.push_str(&row.csv());
            self.log.push('\n');
            self.rows.push(row);
            if let Some(dir) = out_dir {
                let interval = self.config.checkpoint_interval;
                if interval > 0 && self.step % interval == 0 {
                    self.write_checkpoint(&dir.join(format!("checkpoint-{:08}", self.step)))?;
                }
            }
            log::debug!(
                "step {} loss_ir {l_ir:.4} loss_tr {l_tr:.4} p_entity {:.4}",
                self.step,
                self.sampler.p_entity
            );
        }
        if let Some(dir) = out_dir {
            self.write_checkpoint(&dir.join("final"))?;
            fs::write(dir.join("log.csv"), &self.log)?;
        }
        Ok(TrainOutcome {
            params: self.params,
            optimizer: self.opt,
            sampler: self.sampler,
            step: self.step,
            holdout: self.holdout,
            rows: self.rows,
            log: self.log,
            last_holdout_accuracy: self.last_acc,
        })
    }
}

/// Trains from scratch. With `out_dir` set, checkpoints land in
/// `checkpoint-NNNNNNNN/` subdirectories, the final state in `final/`, and
/// the log in `log.csv`.
pub fn run_training(
    dataset: &TripletDataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    Engine::new(dataset, config.clone())?.run(out_dir)
}

/// Continues a checkpointed run against the same dataset until the stored
/// config's `total_steps`. The continuation is bit-identical to a run that
/// was never interrupted.
pub fn resume_training(
    checkpoint_dir: &Path,
    dataset: &TripletDataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    Engine::from_checkpoint(checkpoint_dir, dataset)?.run(out_dir)
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::corpus;
    use crate::synth::{generate, SynthConfig};

    pub fn tiny_params(seed: u64) -> AlignerParams {
        let vocab = Vocab::from_tokens(["ant", "bee", "cow"].map(String::from));
        AlignerParams::init(vocab, 3, 4, seed % 2 == 0, seed)
    }

    /// Small clean synthetic dataset; classes are easily separable.
    pub fn synth_dataset(seed: u64, n_classes: usize, pairs: usize) -> TripletDataset {
        let cfg = SynthConfig {
            n_classes,
            n_contexts: 2,
            pairs_per_class: pairs,
            d_in: 6,
            n_regions: 2,
            seed,
            ..SynthConfig::default()
        };
        let (images, captions, gold) = generate(&cfg).unwrap();
        let map = corpus::NounObjectMap::from_entries(gold);
        let (triplets, map) = corpus::build_triplets(&images, &captions, &map, 1).unwrap();
        corpus::TripletDataset::new(images, captions, triplets, map).unwrap()
    }

    pub fn quick_config() -> TrainConfig {
        TrainConfig {
            total_steps: 12,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            use_tr_loss: true,
            seed: 7,
            holdout_size: 6,
            sampling: SamplingMode::Curriculum,
            checkpoint_interval: 0,
            model: ModelConfig {
                embed_dim: 4,
                use_context: true,
            },
            curriculum: CurriculumConfig {
                batch_size: 5,
                eval_interval: 4,
                accuracy_threshold: 0.0,
                alpha: 0.5,
                beta: 0.0,
                min_instances: 1,
            },
        }
    }
}
