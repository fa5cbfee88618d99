//! Zero-shot attribute prediction from image embeddings.
//!
//! Each category is scored by the best cosine similarity among its prompts and
//! the highest-scoring category wins. Religion is predicted from attire
//! prompts instead: the single most similar attire prompt across all
//! religions decides. Ties always go to the earlier entry in schema order.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingVector};
use crate::schema::{AttributeDef, AttributeSchema, ReligionMode};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictError {
    #[error("no embedding for prompt '{0}'")]
    MissingPrompt(String),
    #[error("attribute '{0}' has no prompts")]
    NoPrompts(String),
    #[error("religion '{0}' has an empty attire list")]
    EmptyAttire(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Prompt text → embedding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptEmbeddings {
    map: HashMap<String, EmbeddingVector>,
}

impl PromptEmbeddings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, prompt: impl Into<String>, embedding: EmbeddingVector) {
        self.map.insert(prompt.into(), embedding);
    }

    pub fn get(&self, prompt: &str) -> Result<&EmbeddingVector, PredictError> {
        self.map
            .get(prompt)
            .ok_or_else(|| PredictError::MissingPrompt(prompt.to_string()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl FromIterator<(String, EmbeddingVector)> for PromptEmbeddings {
    fn from_iter<T: IntoIterator<Item = (String, EmbeddingVector)>>(iter: T) -> Self {
        Self {
            map: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub category: String,
    /// Winning cosine similarity.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum ProfileSource {
    WholeImage,
    FaceCrop(usize),
}

/// One predicted category per schema attribute, in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeProfile {
    pub source: ProfileSource,
    pub predictions: IndexMap<String, Prediction>,
}

impl AttributeProfile {
    pub fn category(&self, attribute: &str) -> Option<&str> {
        self.predictions.get(attribute).map(|p| p.category.as_str())
    }
}

/// First index holding the maximum; later equal scores never win.
pub(crate) fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if s <= scores[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Per-category max cosine over that category's prompts, then argmax.
pub fn classify_zero_shot(
    image: &EmbeddingVector,
    attribute: &AttributeDef,
    prompts: &PromptEmbeddings,
) -> Result<Prediction, PredictError> {
    let mut category_scores = Vec::with_capacity(attribute.categories.len());
    for category in &attribute.categories {
        let texts = attribute
            .prompts
            .get(category)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| PredictError::NoPrompts(attribute.name.clone()))?;
        let mut cosines = Vec::with_capacity(texts.len());
        for text in texts {
            cosines.push(image.cosine(prompts.get(text)?)?);
        }
        let best = argmax_first(&cosines).expect("non-empty prompt list");
        category_scores.push(cosines[best]);
    }
    let winner = argmax_first(&category_scores)
        .ok_or_else(|| PredictError::NoPrompts(attribute.name.clone()))?;
    Ok(Prediction {
        category: attribute.categories[winner].clone(),
        score: category_scores[winner],
    })
}

/// Global argmax over every attire prompt of every religion; the religion
/// owning the winning prompt is returned. `attire` is iterated in order, which
/// fixes the tie-break.
pub fn predict_religion<'a, I>(
    image: &EmbeddingVector,
    attire: I,
    prompts: &PromptEmbeddings,
) -> Result<Prediction, PredictError>
where
    I: IntoIterator<Item = (&'a str, &'a [String])>,
{
    let mut best: Option<(&str, f64)> = None;
    for (religion, list) in attire {
        if list.is_empty() {
            return Err(PredictError::EmptyAttire(religion.to_string()));
        }
        for text in list {
            let score = image.cosine(prompts.get(text)?)?;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((religion, score));
            }
        }
    }
    let (category, score) = best.ok_or_else(|| PredictError::EmptyAttire(String::new()))?;
    Ok(Prediction {
        category: category.to_string(),
        score,
    })
}

/// Assembles a full profile: attire-based religion (unless `mode` is
/// vanilla) and plain zero-shot classification for everything else.
pub fn predict_profile(
    image: &EmbeddingVector,
    schema: &AttributeSchema,
    prompts: &PromptEmbeddings,
    mode: ReligionMode,
    source: ProfileSource,
) -> Result<AttributeProfile, PredictError> {
    let mut predictions = IndexMap::with_capacity(schema.attributes.len());
    for attribute in &schema.attributes {
        let prediction = if attribute.name == schema.religion_attribute && mode == ReligionMode::Attire {
            predict_religion(image, schema.attire_in_order(), prompts)?
        } else {
            classify_zero_shot(image, attribute, prompts)?
        };
        predictions.insert(attribute.name.clone(), prediction);
    }
    Ok(AttributeProfile {
        source,
        predictions,
    })
}
