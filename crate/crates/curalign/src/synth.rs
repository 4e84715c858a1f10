//! Synthetic image-caption corpus with a known noun-to-class gold map.
//!
//! Region features are a weighted sum of an object prototype, a context
//! prototype shared by the whole image, and fresh Gaussian noise, so the
//! difficulty of telling classes and contexts apart is dial-controlled.
//! Generation is a pure function of the config, including the seed.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionRecord, ImageRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_contexts: usize,
    /// Image-caption pairs generated per object class.
    pub pairs_per_class: usize,
    pub d_in: usize,
    pub n_regions: usize,
    pub object_scale: f64,
    pub context_scale: f64,
    pub noise_scale: f64,
    /// Chance that each region after the first depicts a different class.
    pub distractor_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 8,
            n_contexts: 8,
            pairs_per_class: 200,
            d_in: 32,
            n_regions: 3,
            object_scale: 1.0,
            context_scale: 0.7,
            noise_scale: 0.3,
            distractor_prob: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_classes", self.n_classes),
            ("n_contexts", self.n_contexts),
            ("pairs_per_class", self.pairs_per_class),
            ("d_in", self.d_in),
            ("n_regions", self.n_regions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        let scales = [
            ("object_scale", self.object_scale),
            ("context_scale", self.context_scale),
            ("noise_scale", self.noise_scale),
        ];
        for (name, v) in scales {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::InvalidConfig(format!(
                "distractor_prob must lie in [0, 1], got {}",
                self.distractor_prob
            )));
        }
        Ok(())
    }
}

pub fn class_name(c: usize) -> String {
    format!("obj{c:02}")
}

pub fn noun_name(c: usize) -> String {
    format!("noun{c:02}")
}

pub fn context_word(x: usize) -> String {
    format!("ctx{x:02}")
}

/// Generates the corpus: one caption per image, tokens `[noun, context
/// word]`, region 0 always the true class. Returns images, captions, and
/// the gold noun-to-class map.
///
/// Contexts cycle through pairs of each class so every class sees every
/// context when `pairs_per_class >= n_contexts`.
pub fn generate(
    config: &SynthConfig,
) -> Result<(Vec<ImageRecord>, Vec<CaptionRecord>, BTreeMap<String, String>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let proto_dist = Normal::new(0.0, 1.0 / (config.d_in as f64).sqrt()).unwrap();
    let draw_proto = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..config.d_in).map(|_| proto_dist.sample(rng)).collect()
    };

    // Draw order is part of the format: class prototypes, context
    // prototypes, then per pair the distractor coins and region noise.
    let obj_protos: Vec<Vec<f64>> = (0..config.n_classes)
        .map(|_| draw_proto(&mut rng))
        .collect();
    let ctx_protos: Vec<Vec<f64>> = (0..config.n_contexts)
        .map(|_| draw_proto(&mut rng))
        .collect();

    let mut images = Vec::new();
    let mut captions = Vec::new();
    let mut idx = 0usize;
    for c in 0..config.n_classes {
        for p in 0..config.pairs_per_class {
            let x = p % config.n_contexts;
            let mut regions = Vec::with_capacity(config.n_regions);
            let mut labels = Vec::with_capacity(config.n_regions);
            for r in 0..config.n_regions {
                let label_class = if r > 0
                    && config.distractor_prob > 0.0
                    && config.n_classes > 1
                    && rng.random::<f64>() < config.distractor_prob
                {
                    let pick = rng.random_range(0..config.n_classes - 1);
                    if pick >= c {
                        pick + 1
                    } else {
                        pick
                    }
                } else {
                    c
                };
                let feat: Vec<f64> = (0..config.d_in)
                    .map(|j| {
                        let noise: f64 = proto_dist.sample(&mut rng);
                        obj_protos[label_class][j] * config.object_scale
                            + ctx_protos[x][j] * config.context_scale
                            + noise * config.noise_scale
                    })
                    .collect();
                regions.push(feat);
                labels.push(class_name(label_class));
            }
            images.push(ImageRecord {
                image_id: format!("img{idx:05}"),
                regions,
                region_labels: labels,
            });
            captions.push(CaptionRecord {
                caption_id: format!("cap{idx:05}"),
                image_id: format!("img{idx:05}"),
                tokens: vec![noun_name(c), context_word(x)],
            });
            idx += 1;
        }
    }

    let gold = (0..config.n_classes)
        .map(|c| (noun_name(c), class_name(c)))
        .collect();
    Ok((images, captions, gold))
}
