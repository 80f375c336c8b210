//! Dataset structures and JSON-lines interchange.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::annotation::WireEntity;
use crate::concepts::{ConceptRecord, EntityTriplet};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Where a training sample came from; decides which text field supervises
/// the detector and whether captioning losses apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Detection,
    Grounding,
    ImageText,
}

/// Wire form of one annotated object.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WireObject {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub phrase: String,
    pub category: String,
    pub parent: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Wire form of one annotated image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WireSample {
    pub image_id: String,
    pub image_path: String,
    pub objects: Vec<WireObject>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

/// In-memory object annotation.
#[derive(Clone, Debug)]
pub struct GtObject {
    pub bbox: BBox,
    pub triplet: EntityTriplet,
}

/// In-memory annotated image with its decoded pixels.
#[derive(Clone, Debug)]
pub struct GroundTruthSample {
    pub image_id: String,
    pub image_path: String,
    pub objects: Vec<GtObject>,
    pub caption: Option<String>,
}

impl GroundTruthSample {
    pub fn to_wire(&self) -> WireSample {
        WireSample {
            image_id: self.image_id.clone(),
            image_path: self.image_path.clone(),
            objects: self
                .objects
                .iter()
                .map(|o| WireObject {
                    bbox: o.bbox.to_corners(),
                    phrase: o.triplet.phrase.clone(),
                    category: o.triplet.category.clone(),
                    parent: o.triplet.parent_category.clone(),
                    score: None,
                })
                .collect(),
            caption: self.caption.clone(),
        }
    }

    pub fn from_wire(w: &WireSample) -> Result<Self> {
        let mut objects = Vec::with_capacity(w.objects.len());
        for o in &w.objects {
            objects.push(GtObject {
                bbox: BBox::from_corners(o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]),
                triplet: EntityTriplet::new(&o.phrase, &o.category, &o.parent)?,
            });
        }
        Ok(GroundTruthSample {
            image_id: w.image_id.clone(),
            image_path: w.image_path.clone(),
            objects,
            caption: w.caption.clone(),
        })
    }
}

/// A named dataset: samples plus decoded images, tagged with its source.
pub struct Dataset {
    pub id: String,
    pub source: DataSource,
    pub root: PathBuf,
    pub samples: Vec<GroundTruthSample>,
    pub images: Vec<RgbImage>,
    /// Category -> definition map for detection-style concept texts.
    pub definitions: std::collections::BTreeMap<String, String>,
}

impl Dataset {
    /// Loads `{root}/{id}.jsonl` and decodes every referenced image.
    pub fn load(root: &Path, id: &str, source: DataSource) -> Result<Dataset> {
        let wires: Vec<WireSample> = read_jsonl(&root.join(format!("{id}.jsonl")))?;
        let mut samples = Vec::with_capacity(wires.len());
        let mut images = Vec::with_capacity(wires.len());
        for w in &wires {
            let s = GroundTruthSample::from_wire(w)?;
            let img = image::open(root.join(&s.image_path))
                .map_err(|e| Error::Dataset(format!("image {}: {e}", s.image_path)))?
                .to_rgb8();
            images.push(img);
            samples.push(s);
        }
        Ok(Dataset {
            id: id.to_string(),
            source,
            root: root.to_path_buf(),
            samples,
            images,
            definitions: Default::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The detector's concept text for one object under this source:
    /// detection uses the category (with definition when present),
    /// grounding the phrase, image-text pseudo labels the category.
    pub fn concept_record(&self, triplet: &EntityTriplet) -> ConceptRecord {
        match self.source {
            DataSource::Detection => {
                let mut r = ConceptRecord::positive(&triplet.category);
                if let Some(d) = self.definitions.get(&triplet.category) {
                    r = r.with_definition(d);
                }
                r
            }
            DataSource::Grounding => ConceptRecord::positive(&triplet.phrase),
            DataSource::ImageText => ConceptRecord::positive(&triplet.category),
        }
    }
}

/// Category lists and definitions shipped with a synthetic dataset.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CategoryFile {
    pub train: Vec<String>,
    pub heldout: Vec<String>,
    pub definitions: std::collections::BTreeMap<String, String>,
}

impl CategoryFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(f)?)
    }
}

/// Replaces every object's category with the single concept "object",
/// turning the detector view into a class-agnostic foreground extractor.
pub fn to_class_agnostic(sample: &GroundTruthSample) -> GroundTruthSample {
    let mut out = sample.clone();
    for o in &mut out.objects {
        o.triplet.category = "object".to_string();
    }
    out
}
