//! Triplet annotations: (reference image, relative caption(s), target image).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

/// CIRR groups images in subsets of this size.
pub const SUBSET_SIZE: usize = 6;

pub const DEFAULT_CAPTION_JOINER: &str = " and ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationSchema {
    FashionIq,
    Cirr,
    Generic,
}

impl std::str::FromStr for AnnotationSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fashioniq" | "fashion-iq" => Ok(AnnotationSchema::FashionIq),
            "cirr" => Ok(AnnotationSchema::Cirr),
            "generic" => Ok(AnnotationSchema::Generic),
            other => Err(Error::InvalidConfig(format!("unknown schema {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    /// Key of the caption feature row for this triplet.
    pub query_id: String,
    pub reference_id: String,
    pub target_id: String,
    pub captions: Vec<String>,
    pub category: Option<String>,
    pub subset_ids: Option<Vec<String>>,
}

impl TripletRecord {
    pub fn validate(&self) -> Result<()> {
        if self.reference_id == self.target_id {
            return Err(Error::Annotation(format!(
                "query {:?}: reference and target are both {:?}",
                self.query_id, self.reference_id
            )));
        }
        if self.captions.is_empty() {
            return Err(Error::Annotation(format!(
                "query {:?}: no captions",
                self.query_id
            )));
        }
        if let Some(subset) = &self.subset_ids {
            if subset.len() != SUBSET_SIZE {
                return Err(Error::Annotation(format!(
                    "query {:?}: subset has {} members, expected {SUBSET_SIZE}",
                    self.query_id,
                    subset.len()
                )));
            }
            for (what, id) in [
                ("target", &self.target_id),
                ("reference", &self.reference_id),
            ] {
                if !subset.contains(id) {
                    return Err(Error::Annotation(format!(
                        "query {:?}: {what} {id:?} is not in its subset",
                        self.query_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// The single text input built from all captions.
    pub fn joined_caption(&self, joiner: &str) -> String {
        self.captions.join(joiner)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletSet {
    pub records: Vec<TripletRecord>,
    pub split: Split,
}

impl TripletSet {
    pub fn new(records: Vec<TripletRecord>, split: Split) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            r.validate()?;
            if !seen.insert(r.query_id.as_str()) {
                return Err(Error::DuplicateId(r.query_id.clone()));
            }
        }
        Ok(Self { records, split })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_subsets(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.subset_ids.is_some())
    }

    /// Writes the generic JSON shape.
    pub fn to_generic_json(&self) -> Value {
        Value::Array(
            self.records
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "id": r.query_id,
                        "reference": r.reference_id,
                        "target": r.target_id,
                        "captions": r.captions,
                        "category": r.category,
                        "subset": r.subset_ids,
                    })
                })
                .collect(),
        )
    }
}

pub fn load_annotations(
    path: impl AsRef<Path>,
    schema: AnnotationSchema,
    split: Split,
) -> Result<TripletSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let category_hint = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(fashioniq_category_from_filename);
    parse_annotations(&text, schema, split, category_hint.as_deref())
}

/// Parses annotation JSON. `category_hint` fills FashionIQ records that carry
/// no category field (the public files encode it in the file name).
pub fn parse_annotations(
    text: &str,
    schema: AnnotationSchema,
    split: Split,
    category_hint: Option<&str>,
) -> Result<TripletSet> {
    let root: Value = serde_json::from_str(text)?;
    let entries = root
        .as_array()
        .ok_or_else(|| Error::Annotation("top-level JSON must be an array".into()))?;
    let records = entries
        .iter()
        .enumerate()
        .map(|(i, e)| match schema {
            AnnotationSchema::Generic => parse_generic(i, e),
            AnnotationSchema::FashionIq => parse_fashioniq(i, e, category_hint),
            AnnotationSchema::Cirr => parse_cirr(i, e),
        })
        .collect::<Result<Vec<_>>>()?;
    TripletSet::new(records, split)
}

/// `cap.dress.val.json` -> `dress`.
fn fashioniq_category_from_filename(name: &str) -> Option<String> {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["cap", category, _split, "json"] => Some(category.to_string()),
        _ => None,
    }
}

fn field<'a>(i: usize, e: &'a Value, key: &str) -> Result<&'a Value> {
    e.get(key)
        .filter(|v| !v.is_null())
        .ok_or_else(|| Error::Annotation(format!("entry {i}: missing field {key:?}")))
}

fn string_field(i: usize, e: &Value, key: &str) -> Result<String> {
    scalar_string(field(i, e, key)?)
        .ok_or_else(|| Error::Annotation(format!("entry {i}: field {key:?} is not a string")))
}

fn opt_string(i: usize, e: &Value, key: &str) -> Result<Option<String>> {
    match e.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => scalar_string(v)
            .map(Some)
            .ok_or_else(|| Error::Annotation(format!("entry {i}: field {key:?} is not a string"))),
    }
}

/// Ids may be numeric in some public dumps (CIRR pair ids).
fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn string_list(i: usize, v: &Value, key: &str) -> Result<Vec<String>> {
    v.as_array()
        .ok_or_else(|| Error::Annotation(format!("entry {i}: field {key:?} is not an array")))?
        .iter()
        .map(|x| {
            scalar_string(x).ok_or_else(|| {
                Error::Annotation(format!("entry {i}: field {key:?} holds a non-string"))
            })
        })
        .collect()
}

fn parse_generic(i: usize, e: &Value) -> Result<TripletRecord> {
    let subset = match e.get("subset") {
        None | Some(Value::Null) => None,
        Some(v) => Some(string_list(i, v, "subset")?),
    };
    Ok(TripletRecord {
        query_id: opt_string(i, e, "id")?.unwrap_or_else(|| i.to_string()),
        reference_id: string_field(i, e, "reference")?,
        target_id: string_field(i, e, "target")?,
        captions: string_list(i, field(i, e, "captions")?, "captions")?,
        category: opt_string(i, e, "category")?,
        subset_ids: subset,
    })
}

fn parse_fashioniq(i: usize, e: &Value, category_hint: Option<&str>) -> Result<TripletRecord> {
    let category = opt_string(i, e, "category")?.or_else(|| category_hint.map(str::to_owned));
    // Per-category files restart their entry index, so the default id is
    // qualified by category to keep merged splits unique.
    let default_id = match &category {
        Some(c) => format!("{c}-{i}"),
        None => i.to_string(),
    };
    Ok(TripletRecord {
        query_id: opt_string(i, e, "id")?.unwrap_or(default_id),
        reference_id: string_field(i, e, "candidate")?,
        target_id: string_field(i, e, "target")?,
        captions: string_list(i, field(i, e, "captions")?, "captions")?,
        category,
        subset_ids: None,
    })
}

fn parse_cirr(i: usize, e: &Value) -> Result<TripletRecord> {
    let img_set = field(i, e, "img_set")?;
    // Public files use {"id": .., "members": [..]}; a bare array is accepted too.
    let members = match img_set.get("members") {
        Some(m) => string_list(i, m, "img_set.members")?,
        None => string_list(i, img_set, "img_set")?,
    };
    if members.len() != SUBSET_SIZE {
        return Err(Error::Annotation(format!(
            "entry {i}: subset has {} members, expected {SUBSET_SIZE}",
            members.len()
        )));
    }
    let caption = string_field(i, e, "caption")?;
    Ok(TripletRecord {
        query_id: opt_string(i, e, "pairid")?.unwrap_or_else(|| i.to_string()),
        reference_id: string_field(i, e, "reference")?,
        target_id: string_field(i, e, "target_hard")?,
        captions: vec![caption],
        category: None,
        subset_ids: Some(members),
    })
}
