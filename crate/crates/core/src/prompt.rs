//! Generation prompts: class appending, top-k limiting with simple-prompt
//! fallback, and class-balanced generation plans.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ClassId, BACKGROUND, UNCERTAIN};

/// Separator between a caption and the appended class names.
pub const CLASS_SEPARATOR: &str = "; ";
/// Default cap on class names appended to one caption.
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: ClassId,
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

/// Target classes `1..=K`. Id 0 is background and 255 marks uncertainty;
/// neither may name a class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    classes: Vec<VocabEntry>,
}

const VOC_CLASSES: [(&str, &[&str]); 20] = [
    ("aeroplane", &["airplane", "plane", "jet"]),
    ("bicycle", &["bike"]),
    ("bird", &[]),
    ("boat", &["ship"]),
    ("bottle", &[]),
    ("bus", &[]),
    ("car", &[]),
    ("cat", &["kitten"]),
    ("chair", &[]),
    ("cow", &[]),
    ("dining table", &["table", "diningtable"]),
    ("dog", &["puppy"]),
    ("horse", &[]),
    ("motorbike", &["motorcycle"]),
    ("person", &["man", "woman", "people", "child", "boy", "girl"]),
    ("potted plant", &["pottedplant", "plant"]),
    ("sheep", &[]),
    ("sofa", &["couch"]),
    ("train", &[]),
    ("tv monitor", &["tvmonitor", "tv", "television", "monitor"]),
];

impl ClassVocabulary {
    pub fn new(classes: Vec<VocabEntry>) -> Result<Self> {
        let vocab = Self { classes };
        vocab.validate()?;
        Ok(vocab)
    }

    /// The 20 PASCAL VOC object classes with a few common caption synonyms.
    pub fn pascal_voc() -> Self {
        let classes = VOC_CLASSES
            .iter()
            .enumerate()
            .map(|(i, (name, syn))| VocabEntry {
                id: (i + 1) as ClassId,
                name: (*name).to_string(),
                synonyms: syn.iter().map(|s| (*s).to_string()).collect(),
            })
            .collect();
        Self { classes }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut names = BTreeSet::new();
        for e in &self.classes {
            if e.id == BACKGROUND || e.id == UNCERTAIN {
                return Err(Error::Vocabulary(format!(
                    "'{}' uses reserved id {}",
                    e.name, e.id
                )));
            }
            if !ids.insert(e.id) {
                return Err(Error::Vocabulary(format!("id {} used twice", e.id)));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::Vocabulary(format!("name '{}' used twice", e.name)));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.classes
    }

    pub fn ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|e| e.id).collect()
    }

    /// Largest class id, the `K` of a `(K+1)`-way label space.
    pub fn max_id(&self) -> ClassId {
        self.classes.iter().map(|e| e.id).max().unwrap_or(0)
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.classes.iter().any(|e| e.id == id)
    }

    pub fn name(&self, id: ClassId) -> Result<&str> {
        self.classes
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.name.as_str())
            .ok_or_else(|| Error::Vocabulary(format!("unknown class id {id}")))
    }

    /// Finds a class by canonical name or synonym, ignoring ASCII case.
    pub fn resolve(&self, name: &str) -> Result<ClassId> {
        let name = name.trim();
        self.classes
            .iter()
            .find(|e| e.name.eq_ignore_ascii_case(name))
            .or_else(|| {
                self.classes
                    .iter()
                    .find(|e| e.synonyms.iter().any(|s| s.eq_ignore_ascii_case(name)))
            })
            .map(|e| e.id)
            .ok_or_else(|| Error::Vocabulary(format!("unknown class name '{name}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    ProvidedCaption,
    GeneratedCaption,
    SimpleFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub caption: String,
    pub class_ids: Vec<ClassId>,
    /// Caption with the class names appended; drives image generation.
    pub prompt: String,
    /// Class names only; drives cross-attention capture.
    pub class_prompt: String,
    pub provenance: Provenance,
}

fn dedup_preserving_order(ids: &[ClassId]) -> Vec<ClassId> {
    let mut seen = BTreeSet::new();
    ids.iter().copied().filter(|id| seen.insert(*id)).collect()
}

/// Appends the canonical names of `class_ids` to `caption`.
///
/// Repeated ids are dropped, keeping the first occurrence.
pub fn append_classes(caption: &str, class_ids: &[ClassId], vocab: &ClassVocabulary) -> Result<PromptSpec> {
    if class_ids.is_empty() {
        return Err(Error::Vocabulary("no classes to append".into()));
    }
    let class_ids = dedup_preserving_order(class_ids);
    let names = class_ids
        .iter()
        .map(|&id| vocab.name(id))
        .collect::<Result<Vec<_>>>()?;
    let class_prompt = names.join(" ");
    Ok(PromptSpec {
        caption: caption.to_string(),
        prompt: format!("{caption}{CLASS_SEPARATOR}{class_prompt}"),
        class_prompt,
        class_ids,
        provenance: Provenance::ProvidedCaption,
    })
}

/// Single-class prompt `a photo of a <name>; <name>`.
pub fn simple_prompt(class_id: ClassId, vocab: &ClassVocabulary) -> Result<PromptSpec> {
    let name = vocab.name(class_id)?;
    let mut spec = append_classes(&format!("a photo of a {name}"), &[class_id], vocab)?;
    spec.provenance = Provenance::SimpleFallback;
    Ok(spec)
}

/// Keeps at most `k` classes, the most frequent ones (ties to the lower
/// id). Every dropped class gets its own simple prompt, least frequent first.
///
/// `kept` preserves the order of `class_ids`.
pub fn limit_classes(
    class_ids: &[ClassId],
    frequencies: &BTreeMap<ClassId, u64>,
    k: usize,
    vocab: &ClassVocabulary,
) -> Result<(Vec<ClassId>, Vec<PromptSpec>)> {
    if k == 0 {
        return Err(Error::Planning("class limit k must be at least 1".into()));
    }
    let class_ids = dedup_preserving_order(class_ids);
    let freq = |id: ClassId| {
        frequencies
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Planning(format!("no frequency recorded for class {id}")))
    };
    for &id in &class_ids {
        freq(id)?;
    }
    if class_ids.len() <= k {
        return Ok((class_ids, Vec::new()));
    }

    let mut ranked = class_ids.clone();
    ranked.sort_by_key(|&id| (std::cmp::Reverse(frequencies[&id]), id));
    let top: BTreeSet<ClassId> = ranked[..k].iter().copied().collect();
    let kept = class_ids.iter().copied().filter(|id| top.contains(id)).collect();

    let mut dropped = ranked[k..].to_vec();
    dropped.sort_by_key(|&id| (frequencies[&id], id));
    let spillover = dropped
        .into_iter()
        .map(|id| simple_prompt(id, vocab))
        .collect::<Result<_>>()?;
    Ok((kept, spillover))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanItem {
    pub spec: PromptSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub items: Vec<PlanItem>,
    pub per_class_counts: BTreeMap<ClassId, u64>,
    pub target_per_class: u64,
}

impl GenerationPlan {
    /// Sum of per-class counts: each item counts once per class it contains.
    pub fn class_incidences(&self) -> u64 {
        self.per_class_counts.values().sum()
    }
}

/// Plans a class-balanced generation schedule.
///
/// Classes are visited in ascending id order. While a class is short of
/// `target_per_class`, the next prompt containing it (cycling through the
/// input order) is scheduled with the next seed, counting toward every class
/// in that prompt. `required` lists classes that must reach the target even
/// if no prompt mentions them, which is an error.
pub fn plan_dataset(
    specs: &[PromptSpec],
    target_per_class: u64,
    base_seed: u64,
    required: &[ClassId],
) -> Result<GenerationPlan> {
    if target_per_class == 0 {
        return Err(Error::Planning("target per class must be at least 1".into()));
    }
    let mut by_class: BTreeMap<ClassId, Vec<usize>> =
        required.iter().map(|&id| (id, Vec::new())).collect();
    for (i, spec) in specs.iter().enumerate() {
        for &id in &spec.class_ids {
            by_class.entry(id).or_default().push(i);
        }
    }
    let orphans: Vec<String> = by_class
        .iter()
        .filter(|(_, idx)| idx.is_empty())
        .map(|(id, _)| id.to_string())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Planning(format!(
            "no prompts for classes {}",
            orphans.join(", ")
        )));
    }

    let mut counts: BTreeMap<ClassId, u64> = by_class.keys().map(|&id| (id, 0)).collect();
    let mut items = Vec::new();
    let mut seed = base_seed;
    for (&class, indices) in &by_class {
        let mut cursor = 0;
        while counts[&class] < target_per_class {
            let spec = &specs[indices[cursor % indices.len()]];
            cursor += 1;
            for id in &spec.class_ids {
                *counts.get_mut(id).expect("every spec class is planned") += 1;
            }
            items.push(PlanItem {
                spec: spec.clone(),
                seed,
            });
            seed = seed.wrapping_add(1);
        }
    }
    Ok(GenerationPlan {
        items,
        per_class_counts: counts,
        target_per_class,
    })
}

/// One captioned image as listed in a captions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub caption: String,
    /// Class names (canonical or synonym) present in the image.
    pub classes: Vec<String>,
    #[serde(default)]
    pub provenance: Provenance,
}

pub fn load_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Turns captions into prompt specs: resolves names, limits each image to
/// `k` classes by dataset frequency and appends the kept class names.
pub fn build_prompts(captions: &[CaptionEntry], vocab: &ClassVocabulary, k: usize) -> Result<Vec<PromptSpec>> {
    let resolved = captions
        .iter()
        .map(|entry| {
            let ids = entry
                .classes
                .iter()
                .map(|n| vocab.resolve(n))
                .collect::<Result<Vec<_>>>()?;
            Ok(dedup_preserving_order(&ids))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut counter: HashMap<ClassId, u64> = HashMap::new();
    for ids in &resolved {
        for &id in ids {
            *counter.entry(id).or_default() += 1;
        }
    }
    let frequencies: BTreeMap<ClassId, u64> = counter.into_iter().collect();

    let mut specs = Vec::new();
    for (entry, ids) in captions.iter().zip(&resolved) {
        if ids.is_empty() {
            continue;
        }
        let (kept, spillover) = limit_classes(ids, &frequencies, k, vocab)?;
        let mut spec = append_classes(&entry.caption, &kept, vocab)?;
        spec.provenance = entry.provenance;
        specs.push(spec);
        specs.extend(spillover);
    }
    Ok(specs)
}
