//! Corpus ingestion: image-caption records, the PMI noun-to-class mapping,
//! and (caption, noun, image) triplet extraction.
//!
//! File formats are JSON Lines for records and triplets, plain JSON for the
//! noun map. Ingestion is deterministic: re-running on the same inputs yields
//! byte-identical outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One image with detector output: region feature vectors and one class
/// label per region.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageRecord {
    #[serde(rename = "id")]
    pub image_id: String,
    pub regions: Vec<Vec<f64>>,
    #[serde(rename = "labels")]
    pub region_labels: Vec<String>,
}

/// One tokenized caption tied to an image.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaptionRecord {
    #[serde(rename = "id")]
    pub caption_id: String,
    pub image_id: String,
    pub tokens: Vec<String>,
}

/// One training instance: a caption noun paired with its image, tagged with
/// the object class the noun maps to.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Triplet {
    pub caption_id: String,
    pub image_id: String,
    pub noun: String,
    pub object_class: String,
}

/// Noun-to-class assignment plus the detector's class set and the inverse
/// image (nouns grouped by class).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Default)]
pub struct NounObjectMap {
    pub entries: BTreeMap<String, String>,
    pub object_classes: BTreeSet<String>,
    pub noun_sets: BTreeMap<String, BTreeSet<String>>,
}

impl NounObjectMap {
    /// True when `noun` is one of the nouns assigned to `class`.
    pub fn noun_in_class(&self, noun: &str, class: &str) -> bool {
        self.noun_sets.get(class).is_some_and(|s| s.contains(noun))
    }

    /// Builds the map from noun-to-class assignments; the class set is the
    /// set of assigned classes.
    pub fn from_entries(entries: BTreeMap<String, String>) -> Self {
        let classes = entries.values().cloned().collect();
        Self::with_classes(entries, classes)
    }

    fn with_classes(entries: BTreeMap<String, String>, classes: BTreeSet<String>) -> Self {
        let mut noun_sets: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (noun, class) in &entries {
            noun_sets
                .entry(class.clone())
                .or_default()
                .insert(noun.clone());
        }
        NounObjectMap {
            entries,
            object_classes: classes,
            noun_sets,
        }
    }
}

/// Maps each candidate noun to the object class it shares the most pointwise
/// mutual information with.
///
/// Counts are taken once per image-caption pair: a noun counts as present when
/// it occurs anywhere in the caption's tokens, a class when it labels any
/// region of the caption's image. Nouns that never co-occur with any class are
/// dropped. PMI ties break toward the lexicographically smaller class name.
/// Overrides win over the PMI choice and may introduce nouns of their own, but
/// must name a known class.
pub fn compute_pmi_mapping(
    images: &[ImageRecord],
    captions: &[CaptionRecord],
    candidate_nouns: &BTreeSet<String>,
    overrides: &BTreeMap<String, String>,
) -> Result<NounObjectMap> {
    if images.is_empty() || captions.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if candidate_nouns.is_empty() {
        return Err(Error::InvalidConfig("candidate noun list is empty".into()));
    }
    let by_id = index_images(images)?;

    let mut classes: BTreeSet<String> = BTreeSet::new();
    for img in images {
        classes.extend(img.region_labels.iter().cloned());
    }

    let n_pairs = captions.len();
    let mut noun_count: BTreeMap<&str, u64> = BTreeMap::new();
    let mut class_count: BTreeMap<&str, u64> = BTreeMap::new();
    let mut joint_count: BTreeMap<(&str, &str), u64> = BTreeMap::new();
    for cap in captions {
        let img = resolve_image(&by_id, cap)?;
        let tokens: BTreeSet<&str> = cap.tokens.iter().map(String::as_str).collect();
        let labels: BTreeSet<&str> = img.region_labels.iter().map(String::as_str).collect();
        for label in &labels {
            *class_count.entry(label).or_default() += 1;
        }
        for noun in candidate_nouns {
            if !tokens.contains(noun.as_str()) {
                continue;
            }
            *noun_count.entry(noun).or_default() += 1;
            for label in &labels {
                *joint_count.entry((noun, label)).or_default() += 1;
            }
        }
    }

    let mut entries: BTreeMap<String, String> = BTreeMap::new();
    for noun in candidate_nouns {
        let Some(&c_w) = noun_count.get(noun.as_str()) else {
            continue;
        };
        let mut best: Option<(f64, &str)> = None;
        for class in &classes {
            let Some(&c_wo) = joint_count.get(&(noun.as_str(), class.as_str())) else {
                continue;
            };
            let c_o = class_count[class.as_str()];
            let pmi =
                (c_wo as f64 * n_pairs as f64 / (c_w as f64 * c_o as f64)).ln();
            if best.is_none_or(|(b, _)| pmi > b) {
                best = Some((pmi, class));
            }
        }
        if let Some((_, class)) = best {
            entries.insert(noun.clone(), class.to_string());
        }
    }

    for (noun, class) in overrides {
        if !classes.contains(class) {
            return Err(Error::UnknownOverrideClass {
                noun: noun.clone(),
                class: class.clone(),
            });
        }
        entries.insert(noun.clone(), class.clone());
    }

    Ok(NounObjectMap::with_classes(entries, classes))
}

/// Extracts one triplet per (caption, mapped noun) pair, then removes every
/// object class with fewer than `min_instances` triplets along with its
/// triplets and map entries.
///
/// A noun repeated within one caption yields a single triplet. Output order is
/// captions sorted by id, then token position within the caption.
pub fn build_triplets(
    images: &[ImageRecord],
    captions: &[CaptionRecord],
    map: &NounObjectMap,
    min_instances: usize,
) -> Result<(Vec<Triplet>, NounObjectMap)> {
    let by_id = index_images(images)?;
    let mut sorted: Vec<&CaptionRecord> = captions.iter().collect();
    sorted.sort_by(|a, b| a.caption_id.cmp(&b.caption_id));

    let mut triplets = Vec::new();
    for cap in sorted {
        resolve_image(&by_id, cap)?;
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for token in &cap.tokens {
            if !seen.insert(token) {
                continue;
            }
            if let Some(class) = map.entries.get(token) {
                triplets.push(Triplet {
                    caption_id: cap.caption_id.clone(),
                    image_id: cap.image_id.clone(),
                    noun: token.clone(),
                    object_class: class.clone(),
                });
            }
        }
    }

    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &triplets {
        *per_class.entry(&t.object_class).or_default() += 1;
    }
    let kept: BTreeSet<String> = per_class
        .iter()
        .filter(|(_, &n)| n >= min_instances)
        .map(|(c, _)| c.to_string())
        .collect();
    triplets.retain(|t| kept.contains(&t.object_class));

    let entries: BTreeMap<String, String> = map
        .entries
        .iter()
        .filter(|(_, c)| kept.contains(*c))
        .map(|(n, c)| (n.clone(), c.clone()))
        .collect();
    Ok((triplets, NounObjectMap::with_classes(entries, kept)))
}

/// Fully cross-checked corpus bundle used by training and evaluation.
#[derive(Debug, Clone)]
pub struct TripletDataset {
    pub images: BTreeMap<String, ImageRecord>,
    pub captions: BTreeMap<String, CaptionRecord>,
    pub triplets: Vec<Triplet>,
    pub map: NounObjectMap,
    pub feature_dim: usize,
}

impl TripletDataset {
    /// Validates cross-references and region shape before use: triplet ids
    /// must resolve, every noun must occur in its caption, all regions must
    /// share one feature width and be non-empty.
    pub fn new(
        images: Vec<ImageRecord>,
        captions: Vec<CaptionRecord>,
        triplets: Vec<Triplet>,
        map: NounObjectMap,
    ) -> Result<Self> {
        index_images(&images)?;
        let images: BTreeMap<String, ImageRecord> = images
            .into_iter()
            .map(|img| (img.image_id.clone(), img))
            .collect();
        let mut caption_map: BTreeMap<String, CaptionRecord> = BTreeMap::new();
        for cap in captions {
            if caption_map.insert(cap.caption_id.clone(), cap).is_some() {
                return Err(Error::MalformedRecord("duplicate caption id".into()));
            }
        }
        let mut feature_dim = 0usize;
        for img in images.values() {
            if img.regions.len() != img.region_labels.len() {
                return Err(Error::MalformedRecord(format!(
                    "image {:?} has {} regions but {} labels",
                    img.image_id,
                    img.regions.len(),
                    img.region_labels.len()
                )));
            }
            if img.regions.is_empty() {
                return Err(Error::MalformedRecord(format!(
                    "image {:?} has no regions",
                    img.image_id
                )));
            }
            for r in &img.regions {
                if feature_dim == 0 {
                    feature_dim = r.len();
                }
                if r.len() != feature_dim || r.is_empty() {
                    return Err(Error::MalformedRecord(format!(
                        "image {:?} has region width {} (expected {})",
                        img.image_id,
                        r.len(),
                        feature_dim
                    )));
                }
            }
        }
        for t in &triplets {
            if !images.contains_key(&t.image_id) {
                return Err(Error::UnknownImage {
                    caption_id: t.caption_id.clone(),
                    image_id: t.image_id.clone(),
                });
            }
            let cap = caption_map.get(&t.caption_id).ok_or_else(|| {
                Error::MalformedRecord(format!(
                    "triplet references unknown caption {:?}",
                    t.caption_id
                ))
            })?;
            if !cap.tokens.iter().any(|tok| tok == &t.noun) {
                return Err(Error::MalformedRecord(format!(
                    "noun {:?} missing from caption {:?}",
                    t.noun, t.caption_id
                )));
            }
        }
        Ok(TripletDataset {
            images,
            captions: caption_map,
            triplets,
            map,
            feature_dim,
        })
    }

    pub fn image(&self, id: &str) -> &ImageRecord {
        &self.images[id]
    }

    pub fn caption(&self, id: &str) -> &CaptionRecord {
        &self.captions[id]
    }
}

fn index_images(images: &[ImageRecord]) -> Result<BTreeMap<&str, &ImageRecord>> {
    let mut out: BTreeMap<&str, &ImageRecord> = BTreeMap::new();
    for img in images {
        if out.insert(&img.image_id, img).is_some() {
            return Err(Error::MalformedRecord(format!(
                "duplicate image id {:?}",
                img.image_id
            )));
        }
    }
    Ok(out)
}

fn resolve_image<'a>(
    by_id: &BTreeMap<&str, &'a ImageRecord>,
    cap: &CaptionRecord,
) -> Result<&'a ImageRecord> {
    by_id
        .get(cap.image_id.as_str())
        .copied()
        .ok_or_else(|| Error::UnknownImage {
            caption_id: cap.caption_id.clone(),
            image_id: cap.image_id.clone(),
        })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            Error::MalformedRecord(format!("{}:{}: {}", path.display(), idx + 1, e))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_noun_map(path: &Path) -> Result<NounObjectMap> {
    let map: NounObjectMap = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    Ok(map)
}

pub fn write_noun_map(path: &Path, map: &NounObjectMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, map)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Parses a tab-separated `noun<TAB>class` override file. Blank lines are
/// ignored.
pub fn read_overrides(path: &Path) -> Result<BTreeMap<String, String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let Some((noun, class)) = trimmed.split_once('\t') else {
            return Err(Error::MalformedRecord(format!(
                "{}:{}: expected noun<TAB>class",
                path.display(),
                idx + 1
            )));
        };
        out.insert(noun.trim().to_string(), class.trim().to_string());
    }
    Ok(out)
}

/// Reads a one-noun-per-line candidate list. Blank lines are ignored.
pub fn read_noun_list(path: &Path) -> Result<BTreeSet<String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = BTreeSet::new();
    for line in reader.lines() {
        let line = line?;
        let t = line.trim();
        if !t.is_empty() {
            out.insert(t.to_string());
        }
    }
    Ok(out)
}
