use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabularyError {
    #[error("{0} vocabulary is empty")]
    Empty(&'static str),
    #[error("duplicate name {name:?} in {list} vocabulary")]
    Duplicate { list: &'static str, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RawVocabulary {
    insertable: Vec<String>,
    context: Vec<String>,
    relations: Vec<String>,
}

/// Insertable categories, context categories and relations, each an ordered
/// list with a name-to-index lookup.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawVocabulary", into = "RawVocabulary")]
pub struct Vocabulary {
    raw: RawVocabulary,
    insertable_index: HashMap<String, usize>,
    context_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.raw == other.raw
    }
}

fn index(list: &'static str, names: &[String]) -> Result<HashMap<String, usize>, VocabularyError> {
    if names.is_empty() {
        return Err(VocabularyError::Empty(list));
    }
    let mut map = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if map.insert(n.clone(), i).is_some() {
            return Err(VocabularyError::Duplicate { list, name: n.clone() });
        }
    }
    Ok(map)
}

impl Vocabulary {
    pub fn new(insertable: Vec<String>, context: Vec<String>, relations: Vec<String>) -> Result<Self, VocabularyError> {
        Self::try_from(RawVocabulary { insertable, context, relations })
    }

    pub fn insertable(&self) -> &[String] {
        &self.raw.insertable
    }

    pub fn context(&self) -> &[String] {
        &self.raw.context
    }

    pub fn relations(&self) -> &[String] {
        &self.raw.relations
    }

    pub fn insertable_id(&self, name: &str) -> Option<usize> {
        self.insertable_index.get(name).copied()
    }

    pub fn context_id(&self, name: &str) -> Option<usize> {
        self.context_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_index.get(name).copied()
    }

    /// Whether `name` is insertable or a context category.
    pub fn contains_category(&self, name: &str) -> bool {
        self.insertable_index.contains_key(name) || self.context_index.contains_key(name)
    }
}

impl TryFrom<RawVocabulary> for Vocabulary {
    type Error = VocabularyError;

    fn try_from(raw: RawVocabulary) -> Result<Self, Self::Error> {
        let insertable_index = index("insertable", &raw.insertable)?;
        let context_index = index("context", &raw.context)?;
        let relation_index = index("relation", &raw.relations)?;
        Ok(Self { raw, insertable_index, context_index, relation_index })
    }
}

impl From<Vocabulary> for RawVocabulary {
    fn from(v: Vocabulary) -> Self {
        v.raw
    }
}
