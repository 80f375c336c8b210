//! Entity triplets, the noun concept corpus, and positive/negative concept
//! assembly for the parallel data formulation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases, trims, and collapses internal whitespace.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// One object description at three granularities.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityTriplet {
    pub phrase: String,
    pub category: String,
    pub parent_category: String,
}

impl EntityTriplet {
    /// Normalizes all fields; rejects empty fields and the `|` separator
    /// (it would make the ground-truth string ambiguous).
    pub fn new(phrase: &str, category: &str, parent_category: &str) -> Result<Self> {
        let fields = [
            ("phrase", normalize_text(phrase)),
            ("category", normalize_text(category)),
            ("parent category", normalize_text(parent_category)),
        ];
        for (name, value) in &fields {
            if value.is_empty() {
                return Err(Error::InvalidTriplet(format!("{name} is empty")));
            }
            if value.contains('|') {
                return Err(Error::InvalidTriplet(format!(
                    "{name} contains the '|' separator: {value:?}"
                )));
            }
        }
        let [p, c, pc] = fields;
        Ok(EntityTriplet { phrase: p.1, category: c.1, parent_category: pc.1 })
    }
}

/// The captioner's ground-truth string: `phrase | category | parent category`.
pub fn format_object_groundtruth(t: &EntityTriplet) -> String {
    format!("{} | {} | {}", t.phrase, t.category, t.parent_category)
}

/// Inverse of [`format_object_groundtruth`]; requires exactly three fields.
pub fn parse_object_groundtruth(s: &str) -> Option<EntityTriplet> {
    let parts: Vec<&str> = s.split(" | ").collect();
    if parts.len() != 3 {
        return None;
    }
    EntityTriplet::new(parts[0], parts[1], parts[2]).ok()
}

/// The detector's textual labels for an entity: (phrase, category).
pub fn detector_text_label(t: &EntityTriplet) -> (String, String) {
    (t.phrase.clone(), t.category.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

/// A concept text offered to the detector, with an optional class definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub text: String,
    pub definition: Option<String>,
    pub polarity: Polarity,
}

impl ConceptRecord {
    pub fn positive(text: &str) -> Self {
        ConceptRecord { text: normalize_text(text), definition: None, polarity: Polarity::Positive }
    }

    pub fn negative(text: &str) -> Self {
        ConceptRecord { text: normalize_text(text), definition: None, polarity: Polarity::Negative }
    }

    pub fn with_definition(mut self, definition: &str) -> Self {
        self.definition = Some(definition.trim().to_string());
        self
    }

    /// Text handed to the text encoder; detection classes may carry a
    /// definition as "name: definition".
    pub fn encoder_text(&self) -> String {
        match &self.definition {
            Some(d) => format!("{}: {}", self.text, d),
            None => self.text.clone(),
        }
    }
}

/// Frequency-filtered dictionary of category nouns, iterated in descending
/// frequency then lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NounCorpus {
    entries: Vec<(String, u64)>,
    index: BTreeMap<String, usize>,
}

impl NounCorpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frequency(&self, concept: &str) -> Option<u64> {
        self.index.get(concept).map(|&i| self.entries[i].1)
    }

    pub fn contains(&self, concept: &str) -> bool {
        self.index.contains_key(concept)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.entries.iter().map(|(c, f)| (c.as_str(), *f))
    }

    pub fn concepts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(c, _)| c.as_str())
    }

    /// One `concept<TAB>frequency` line per entry, in deterministic order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for (c, n) in &self.entries {
            writeln!(f, "{c}\t{n}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (c, n) = line
                .split_once('\t')
                .ok_or_else(|| Error::Dataset(format!("bad corpus line: {line:?}")))?;
            let n: u64 = n
                .parse()
                .map_err(|_| Error::Dataset(format!("bad corpus frequency: {line:?}")))?;
            entries.push((c.to_string(), n));
        }
        Ok(Self::from_entries(entries))
    }

    fn from_entries(mut entries: Vec<(String, u64)>) -> Self {
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (c, _))| (c.clone(), i))
            .collect();
        NounCorpus { entries, index }
    }
}

/// Tallies the `category` field of a triplet stream; entries whose total
/// frequency falls below `min_frequency` are omitted.
pub fn build_corpus<I>(entity_stream: I, min_frequency: u64) -> NounCorpus
where
    I: IntoIterator<Item = EntityTriplet>,
{
    assert!(min_frequency >= 1, "min_frequency must be >= 1");
    let mut tally: BTreeMap<String, u64> = BTreeMap::new();
    for t in entity_stream {
        *tally.entry(t.category).or_insert(0) += 1;
    }
    let entries: Vec<(String, u64)> = tally
        .into_iter()
        .filter(|(_, n)| *n >= min_frequency)
        .collect();
    NounCorpus::from_entries(entries)
}

/// The `n` most frequent concepts, in corpus order.
pub fn top_frequent(corpus: &NounCorpus, n: usize) -> Vec<String> {
    assert!(n >= 1, "n must be >= 1");
    corpus.concepts().take(n).map(|s| s.to_string()).collect()
}

/// Negative concepts sampled from the corpus, disjoint from `positives`.
/// Returns the sample and whether the pool was exhausted before `k`.
pub fn sample_negatives(
    positives: &[String],
    corpus: &NounCorpus,
    k: usize,
    seed: u64,
) -> (Vec<String>, bool) {
    let pos: BTreeSet<&str> = positives.iter().map(|s| s.as_str()).collect();
    let mut candidates: Vec<&str> = corpus
        .concepts()
        .filter(|c| !pos.contains(c))
        .collect();
    let exhausted = candidates.len() < k;
    let take = k.min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // partial Fisher-Yates: deterministic for a fixed seed
    for i in 0..take {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
    }
    (
        candidates[..take].iter().map(|s| s.to_string()).collect(),
        exhausted,
    )
}

/// Set-union of negative pools with first-occurrence ordering.
pub fn merge_negative_pools(pools: &[Vec<String>]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for pool in pools {
        for c in pool {
            if seen.insert(c.clone()) {
                out.push(c.clone());
            }
        }
    }
    out
}
