//! Deterministic simulated models with planted ground truth.
//!
//! The simulated generator samples one attribute tuple per face from a
//! [`BiasProfile`]. Diversity keywords found in the prompt or CoT pull each
//! attribute's distribution toward uniform:
//!
//! ```text
//! effective = (1 - m·λ) · baseline + m·λ · uniform,   m·λ clamped to 1
//! ```
//!
//! where `m` is the number of distinct keywords of that attribute present
//! (whole word, case-insensitive). The "image" is a small JSON document
//! recording the planted faces, so embedding and detection can be computed
//! from it exactly.
//!
//! Embedding space: one axis per (attribute, category) followed by a
//! [`CONTENT_DIM`]-wide block for prompt content. A face contributes a 1 on
//! each of its category axes; the prompt contributes `α` times a hashed
//! bag-of-words unit vector; noise adds `ε` times a random unit vector. With
//! `ε < 0.5` zero-shot prediction recovers every planted category exactly.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::store::SIM_MEDIA_TYPE;
use super::{
    BackendError, ChatMessage, Detection, Detector, GenerateRequest, GeneratedImage, Generator,
    ImageEmbedder, ImageInput, Reasoner, TextEmbedder,
};
use crate::multiface::FaceBox;
use crate::schema::AttributeSchema;
use crate::seeds::derive_seed;

pub const CONTENT_DIM: usize = 64;
pub const SIM_FORMAT: &str = "faircot-sim/1";
pub const SIM_IMAGE_SIZE: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid bias profile at '{key}': {message}")]
    InvalidProfile { key: String, message: String },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> SimError {
    SimError::InvalidProfile {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeBias {
    /// Category → weight; normalized before use.
    pub baseline: IndexMap<String, f64>,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasProfile {
    pub seed: u64,
    /// Mixing weight per matched keyword.
    pub lambda: f64,
    /// Noise magnitude ε.
    pub noise: f64,
    /// Prompt-content weight α.
    pub content_weight: f64,
    pub faces_per_image: u32,
    pub attributes: IndexMap<String, AttributeBias>,
}

fn bias(baseline: &[(&str, f64)], keywords: &[&str]) -> AttributeBias {
    AttributeBias {
        baseline: baseline.iter().map(|(c, w)| (c.to_string(), *w)).collect(),
        keywords: keywords.iter().map(|k| k.to_string()).collect(),
    }
}

impl Default for BiasProfile {
    fn default() -> Self {
        let mut attributes = IndexMap::new();
        attributes.insert(
            "gender".into(),
            bias(&[("female", 0.1), ("male", 0.9)], &["female", "male"]),
        );
        attributes.insert(
            "race".into(),
            bias(
                &[("WMELH", 0.7), ("Asian", 0.1), ("Black", 0.1), ("Indian", 0.1)],
                &["Asian", "Black", "Indian", "White"],
            ),
        );
        attributes.insert(
            "age".into(),
            bias(&[("young", 0.8), ("old", 0.2)], &["young", "old"]),
        );
        attributes.insert(
            "religion".into(),
            bias(
                &[
                    ("Islam", 0.05),
                    ("Christianity", 0.05),
                    ("Hinduism", 0.05),
                    ("Neutral", 0.85),
                ],
                &["Islam", "Christianity", "Hinduism", "secular"],
            ),
        );
        Self {
            seed: 0,
            lambda: 0.5,
            noise: 0.05,
            content_weight: 0.58,
            faces_per_image: 1,
            attributes,
        }
    }
}

impl BiasProfile {
    /// Checks the profile against the schema it will simulate.
    pub fn validate(&self, schema: &AttributeSchema) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid("lambda", format!("must be in [0, 1], got {}", self.lambda)));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(invalid("noise", format!("must be >= 0, got {}", self.noise)));
        }
        if !self.content_weight.is_finite() || self.content_weight < 0.0 {
            return Err(invalid(
                "content_weight",
                format!("must be >= 0, got {}", self.content_weight),
            ));
        }
        if self.faces_per_image == 0 {
            return Err(invalid("faces_per_image", "must be at least 1"));
        }
        for attribute in &schema.attributes {
            let key = format!("attributes.{}", attribute.name);
            let entry = self
                .attributes
                .get(&attribute.name)
                .ok_or_else(|| invalid(&key, "schema attribute has no bias entry"))?;
            let declared: Vec<&String> = entry.baseline.keys().collect();
            let expected: Vec<&String> = attribute.categories.iter().collect();
            if declared != expected {
                return Err(invalid(
                    format!("{key}.baseline"),
                    format!("categories must be {expected:?} in schema order"),
                ));
            }
            if entry.baseline.values().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(invalid(format!("{key}.baseline"), "weights must be non-negative"));
            }
            if entry.baseline.values().sum::<f64>() <= 0.0 {
                return Err(invalid(format!("{key}.baseline"), "weights sum to zero"));
            }
        }
        if let Some(extra) = self
            .attributes
            .keys()
            .find(|k| schema.attribute(k).is_none())
        {
            return Err(invalid(format!("attributes.{extra}"), "not a schema attribute"));
        }
        Ok(())
    }
}

/// Axis index of every (attribute, category) pair.
#[derive(Debug, Clone)]
pub struct AxisLayout {
    axes: Vec<Vec<usize>>,
    n_axes: usize,
}

impl AxisLayout {
    pub fn new(schema: &AttributeSchema) -> Self {
        let mut next = 0;
        let axes = schema
            .attributes
            .iter()
            .map(|a| {
                let ids = (next..next + a.categories.len()).collect();
                next += a.categories.len();
                ids
            })
            .collect();
        Self { axes, n_axes: next }
    }

    pub fn dim(&self) -> usize {
        self.n_axes + CONTENT_DIM
    }

    pub fn axis(&self, attribute: usize, category: usize) -> usize {
        self.axes[attribute][category]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFace {
    #[serde(rename = "box")]
    pub bbox: FaceBox,
    /// Attribute → planted category.
    pub attributes: IndexMap<String, String>,
}

/// The simulated image format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimImage {
    pub format: String,
    pub width: u32,
    pub height: u32,
    pub prompt: String,
    pub noise_seed: u64,
    pub faces: Vec<PlantedFace>,
}

impl SimImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("sim images serialize")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let image: SimImage = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
        if image.format != SIM_FORMAT {
            return Err(format!("unsupported sim image format '{}'", image.format));
        }
        Ok(image)
    }
}

/// Boxes for `count` faces laid out in one row.
pub fn face_layout(count: u32, width: u32) -> Vec<FaceBox> {
    let slot = width / count.max(1);
    let size = 120.min(slot.saturating_sub(4)).max(1);
    (0..count)
        .map(|i| {
            let centre = (2 * i + 1) * width / (2 * count);
            FaceBox::new(centre - size / 2, 300 + 40 * (i % 2), size, size)
        })
        .collect()
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Hashed bag-of-words over the content block, unit length.
fn content_vector(text: &str) -> [f64; CONTENT_DIM] {
    let mut v = [0.0; CONTENT_DIM];
    for token in tokens(text) {
        v[(derive_seed(&[token.as_bytes()]) % CONTENT_DIM as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn keyword_pattern(keyword: &str) -> Regex {
    Regex::new(&format!(r"(?i)\b{}\b", regex::escape(keyword))).expect("escaped keyword")
}

/// Number of distinct `keywords` present in `text` as whole words.
pub fn count_keywords(text: &str, keywords: &[String]) -> usize {
    keywords
        .iter()
        .filter(|k| keyword_pattern(k).is_match(text))
        .count()
}

struct AttributeModel {
    name: String,
    categories: Vec<String>,
    baseline: Vec<f64>,
    keywords: Vec<Regex>,
}

/// Generator, both embedders and the detector over simulated images.
pub struct SimBackend {
    profile: BiasProfile,
    layout: AxisLayout,
    models: Vec<AttributeModel>,
    text_axes: HashMap<String, usize>,
}

impl SimBackend {
    pub fn new(schema: &AttributeSchema, profile: BiasProfile) -> Result<Self, SimError> {
        profile.validate(schema)?;
        let layout = AxisLayout::new(schema);
        let mut text_axes = HashMap::new();
        let mut models = Vec::new();
        for (ai, attribute) in schema.attributes.iter().enumerate() {
            for (ci, category) in attribute.categories.iter().enumerate() {
                for prompt in attribute.prompts.get(category).into_iter().flatten() {
                    text_axes.insert(prompt.clone(), layout.axis(ai, ci));
                }
                if attribute.name == schema.religion_attribute {
                    for prompt in schema.religion_attire.get(category).into_iter().flatten() {
                        text_axes.insert(prompt.clone(), layout.axis(ai, ci));
                    }
                }
            }
            let entry = &profile.attributes[&attribute.name];
            let total: f64 = entry.baseline.values().sum();
            models.push(AttributeModel {
                name: attribute.name.clone(),
                categories: attribute.categories.clone(),
                baseline: entry.baseline.values().map(|w| w / total).collect(),
                keywords: entry.keywords.iter().map(|k| keyword_pattern(k)).collect(),
            });
        }
        Ok(Self {
            profile,
            layout,
            models,
            text_axes,
        })
    }

    pub fn profile(&self) -> &BiasProfile {
        &self.profile
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Per-attribute sampling distribution after keyword mixing.
    pub fn effective_distribution(&self, text: &str) -> IndexMap<String, Vec<f64>> {
        self.models
            .iter()
            .map(|m| {
                let matched = m.keywords.iter().filter(|k| k.is_match(text)).count();
                let mix = (matched as f64 * self.profile.lambda).min(1.0);
                let uniform = 1.0 / m.categories.len() as f64;
                let dist = m
                    .baseline
                    .iter()
                    .map(|p| (1.0 - mix) * p + mix * uniform)
                    .collect();
                (m.name.clone(), dist)
            })
            .collect()
    }

    /// Builds image `index` of a request. Depends only on the profile seed,
    /// request seed, prompt, context and index.
    pub fn simulate(&self, request: &GenerateRequest, index: u32) -> SimImage {
        let context = request.context.as_deref().unwrap_or("");
        let seed = derive_seed(&[
            &self.profile.seed.to_le_bytes(),
            &request.seed.to_le_bytes(),
            request.prompt.as_bytes(),
            context.as_bytes(),
            &index.to_le_bytes(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dists = self.effective_distribution(&format!("{}\n{}", request.prompt, context));
        let faces = face_layout(self.profile.faces_per_image, SIM_IMAGE_SIZE)
            .into_iter()
            .map(|bbox| {
                let attributes = self
                    .models
                    .iter()
                    .map(|m| {
                        let dist = &dists[&m.name];
                        (m.name.clone(), m.categories[sample(&mut rng, dist)].clone())
                    })
                    .collect();
                PlantedFace { bbox, attributes }
            })
            .collect();
        SimImage {
            format: SIM_FORMAT.into(),
            width: SIM_IMAGE_SIZE,
            height: SIM_IMAGE_SIZE,
            prompt: request.prompt.clone(),
            noise_seed: rng.gen(),
            faces,
        }
    }

    fn face_axes(&self, faces: &[&PlantedFace]) -> Vec<f64> {
        let mut v = vec![0.0; self.layout.dim()];
        for face in faces {
            for (ai, model) in self.models.iter().enumerate() {
                let ci = face
                    .attributes
                    .get(&model.name)
                    .and_then(|c| model.categories.iter().position(|x| x == c));
                if let Some(ci) = ci {
                    v[self.layout.axis(ai, ci)] += 1.0 / faces.len() as f64;
                }
            }
        }
        v
    }

    /// Embedding of a whole image (mean of its faces) or of the face whose
    /// centre lies nearest the crop centre.
    pub fn embed_sim_image(&self, image: &SimImage, crop: Option<FaceBox>) -> Vec<f64> {
        let (faces, noise_seed): (Vec<&PlantedFace>, u64) = match crop {
            None => (image.faces.iter().collect(), image.noise_seed),
            Some(c) => {
                let (cx, cy) = c.center();
                let nearest = image.faces.iter().min_by(|a, b| {
                    let da = dist2(a.bbox.center(), (cx, cy));
                    let db = dist2(b.bbox.center(), (cx, cy));
                    da.total_cmp(&db)
                });
                let seed = derive_seed(&[
                    &image.noise_seed.to_le_bytes(),
                    &[c.x, c.y, c.w, c.h].map(u32::to_le_bytes).concat(),
                ]);
                (nearest.into_iter().collect(), seed)
            }
        };
        let mut v = self.face_axes(&faces);
        let content = content_vector(&image.prompt);
        let offset = self.layout.n_axes;
        for (i, c) in content.iter().enumerate() {
            v[offset + i] += self.profile.content_weight * c;
        }
        if self.profile.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let noise = normalize(
                (0..v.len())
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            for (x, n) in v.iter_mut().zip(noise) {
                *x += self.profile.noise * n;
            }
        }
        normalize(v)
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.layout.dim()];
        match self.text_axes.get(text) {
            Some(&axis) => v[axis] = 1.0,
            None => {
                let offset = self.layout.n_axes;
                v[offset..].copy_from_slice(&content_vector(text));
            }
        }
        v
    }

    fn parse(&self, bytes: &[u8]) -> Result<SimImage, BackendError> {
        SimImage::from_bytes(bytes).map_err(|message| BackendError::Rejected {
            port: "sim".into(),
            code: "bad_request".into(),
            message,
        })
    }
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

fn sample(rng: &mut ChaCha8Rng, dist: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left `acc` just under 1; take the last category with mass
    dist.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

impl SimBackend {
    fn identity_string(&self) -> String {
        format!("sim:{SIM_FORMAT}:seed={}", self.profile.seed)
    }
}

impl Generator for SimBackend {
    fn identity(&self) -> String {
        self.identity_string()
    }

    fn generate(&self, request: &GenerateRequest) -> Result<Vec<GeneratedImage>, BackendError> {
        Ok((0..request.count)
            .map(|i| GeneratedImage {
                bytes: self.simulate(request, i).to_bytes(),
                media_type: SIM_MEDIA_TYPE.into(),
            })
            .collect())
    }
}

impl TextEmbedder for SimBackend {
    fn identity(&self) -> String {
        self.identity_string()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

impl ImageEmbedder for SimBackend {
    fn identity(&self) -> String {
        self.identity_string()
    }

    fn embed_images(&self, inputs: &[ImageInput<'_>]) -> Result<Vec<Vec<f64>>, BackendError> {
        inputs
            .iter()
            .map(|input| {
                let image = self.parse(input.bytes)?;
                Ok(self.embed_sim_image(&image, input.crop))
            })
            .collect()
    }
}

impl Detector for SimBackend {
    fn identity(&self) -> String {
        self.identity_string()
    }

    fn detect(&self, image: &[u8]) -> Result<Detection, BackendError> {
        let image = self.parse(image)?;
        Ok(Detection {
            width: image.width,
            height: image.height,
            boxes: image.faces.iter().map(|f| f.bbox).collect(),
        })
    }
}

/// Template-driven reasoner whose CoT gains one attribute's keyword set per
/// "think again" turn, then stops changing.
pub struct SimReasoner {
    /// (attribute, keywords) in schema order.
    keywords: Vec<(String, Vec<String>)>,
    adapt: Regex,
    prompts: Regex,
    photos: Regex,
}

impl SimReasoner {
    pub fn new(profile: &BiasProfile) -> Self {
        Self {
            keywords: profile
                .attributes
                .iter()
                .map(|(name, b)| (name.clone(), b.keywords.clone()))
                .collect(),
            adapt: Regex::new(
                r#"(?s)consider this chain of thought for (.+?) "(.*)"\s*Can you inspired by this generate a similar chain of thought for (.+?)\s*$"#,
            )
            .expect("static regex"),
            prompts: Regex::new(r"(?i)generate (\d+) prompts").expect("static regex"),
            photos: Regex::new(r"(?i)generate (\d+) photos of ([^.\n]+)").expect("static regex"),
        }
    }

    fn base_cot(&self, request: &str) -> String {
        let subject = self
            .photos
            .captures(request)
            .map(|c| format!("{} photos of {}", &c[1], crate::pool::pluralize(&c[2])))
            .unwrap_or_else(|| "these photos".into());
        format!(
            "Step 1: treat the {subject} as one set rather than as separate pictures. \
             Step 2: vary who appears across the set so that no single kind of person dominates. \
             Step 3: keep every picture faithful to the requested profession."
        )
    }

    fn keyword_sentence(attribute: &str, keywords: &[String]) -> String {
        format!("Consider {attribute} diversity: {}.", keywords.join(", "))
    }

    fn present_keywords(&self, text: &str) -> Vec<String> {
        self.keywords
            .iter()
            .flat_map(|(_, kws)| kws.iter())
            .filter(|k| keyword_pattern(k).is_match(text))
            .cloned()
            .collect()
    }
}

impl Reasoner for SimReasoner {
    fn identity(&self) -> String {
        "sim-reasoner:v1".into()
    }

    fn chat(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let last = messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .ok_or_else(|| BackendError::Rejected {
                port: "sim-reasoner".into(),
                code: "bad_request".into(),
                message: "no user message".into(),
            })?;

        if let Some(caps) = self.adapt.captures(&last.content) {
            let (old, cot, new) = (&caps[1], &caps[2], &caps[3]);
            return Ok(cot.replace(old, new));
        }

        if let Some(caps) = self.prompts.captures(&last.content) {
            let n: usize = caps[1].parse().unwrap_or(0);
            let subject = messages
                .iter()
                .filter(|m| m.role == "user")
                .find_map(|m| self.adapt.captures(&m.content).map(|c| c[3].to_string()))
                .unwrap_or_else(|| "people at work".into());
            let cot = messages
                .iter()
                .rev()
                .find(|m| m.role == "assistant")
                .map(|m| m.content.as_str())
                .unwrap_or("");
            let keywords = self.present_keywords(cot);
            let attention = if keywords.is_empty() {
                String::new()
            } else {
                format!(", with attention to {}", keywords.join(", "))
            };
            let lines: Vec<String> = (1..=n)
                .map(|i| format!("{i}. Photo {i} of {subject}{attention}"))
                .collect();
            return Ok(format!("```\n{}\n```", lines.join("\n")));
        }

        let turns = messages
            .iter()
            .filter(|m| m.role == "user" && m.content.to_lowercase().contains("think again"))
            .count();
        if turns == 0 {
            return Ok(self.base_cot(&last.content));
        }
        let base = messages
            .iter()
            .find(|m| m.role == "assistant")
            .map(|m| m.content.clone())
            .unwrap_or_else(|| {
                let first = messages.iter().find(|m| m.role == "user");
                self.base_cot(first.map(|m| m.content.as_str()).unwrap_or(""))
            });
        let mut cot = base;
        for (attribute, keywords) in self.keywords.iter().take(turns) {
            cot.push(' ');
            cot.push_str(&Self::keyword_sentence(attribute, keywords));
        }
        Ok(cot)
    }
}

/// Replies from a fixed queue; records every conversation it receives.
#[derive(Default)]
pub struct ScriptedReasoner {
    replies: Mutex<VecDeque<String>>,
    seen: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedReasoner {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            seen: Mutex::default(),
        }
    }

    pub fn conversations(&self) -> Vec<Vec<ChatMessage>> {
        self.seen.lock().expect("reasoner poisoned").clone()
    }
}

impl Reasoner for ScriptedReasoner {
    fn identity(&self) -> String {
        "scripted-reasoner".into()
    }

    fn chat(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        self.seen
            .lock()
            .expect("reasoner poisoned")
            .push(messages.to_vec());
        self.replies
            .lock()
            .expect("reasoner poisoned")
            .pop_front()
            .ok_or_else(|| BackendError::Transient {
                port: "scripted-reasoner".into(),
                message: "script exhausted".into(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingVector;
    use crate::predictor::{predict_profile, ProfileSource, PromptEmbeddings};
    use crate::schema::ReligionMode;

    fn backend(profile: BiasProfile) -> SimBackend {
        SimBackend::new(&AttributeSchema::default(), profile).unwrap()
    }

    fn request(prompt: &str, context: Option<&str>, seed: u64) -> GenerateRequest {
        GenerateRequest {
            prompt: prompt.into(),
            context: context.map(str::to_string),
            count: 1,
            seed,
            idempotency_key: "k".into(),
        }
    }

    fn gender_share(sim: &SimBackend, prompt: &str, n: u32) -> f64 {
        let req = request(prompt, None, 7);
        let female = (0..n)
            .filter(|&i| sim.simulate(&req, i).faces[0].attributes["gender"] == "female")
            .count();
        female as f64 / n as f64
    }

    #[test]
    fn baseline_frequencies_follow_the_profile() {
        let sim = backend(BiasProfile {
            seed: 7,
            ..BiasProfile::default()
        });
        let share = gender_share(&sim, "a photo of a nurse", 1000);
        assert!((share - 0.1).abs() <= 0.02, "female share {share}");
    }

    #[test]
    fn all_keywords_with_full_mixing_give_uniform() {
        let sim = backend(BiasProfile {
            seed: 7,
            lambda: 1.0,
            ..BiasProfile::default()
        });
        let share = gender_share(&sim, "a photo of a female or male nurse", 1000);
        assert!((share - 0.5).abs() <= 0.02, "female share {share}");
    }

    #[test]
    fn keywords_match_whole_words_only() {
        let kws = vec!["male".to_string(), "old".to_string()];
        assert_eq!(count_keywords("a FEMALE nurse", &kws), 0);
        assert_eq!(count_keywords("Male and bold", &kws), 1);
        assert_eq!(count_keywords("male, old, male", &kws), 2);
    }

    #[test]
    fn mixing_is_clamped() {
        let sim = backend(BiasProfile::default());
        let dist = sim.effective_distribution("Asian Black Indian White");
        assert_eq!(dist["race"], vec![0.25; 4]);
        let dist = sim.effective_distribution("female");
        assert!((dist["gender"][0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn planted_tuples_are_recovered_exactly() {
        let schema = AttributeSchema::default();
        for noise in [0.0, 0.05, 0.45] {
            let sim = backend(BiasProfile {
                noise,
                lambda: 1.0,
                ..BiasProfile::default()
            });
            let texts = schema.all_prompt_texts();
            let prompts: PromptEmbeddings = texts
                .iter()
                .map(|t| (t.clone(), EmbeddingVector::new(sim.embed_text(t)).unwrap()))
                .collect();
            let req = request("Asian Black Indian White female male young old Islam Christianity Hinduism secular", None, 3);
            for i in 0..200 {
                let image = sim.simulate(&req, i);
                let v = EmbeddingVector::new(sim.embed_sim_image(&image, None)).unwrap();
                let profile =
                    predict_profile(&v, &schema, &prompts, ReligionMode::Attire, ProfileSource::WholeImage)
                        .unwrap();
                for (attribute, planted) in &image.faces[0].attributes {
                    assert_eq!(profile.category(attribute), Some(planted.as_str()));
                }
            }
        }
    }

    #[test]
    fn crops_select_the_nearest_face() {
        let sim = backend(BiasProfile {
            faces_per_image: 3,
            ..BiasProfile::default()
        });
        let schema = AttributeSchema::default();
        let prompts: PromptEmbeddings = schema
            .all_prompt_texts()
            .iter()
            .map(|t| (t.clone(), EmbeddingVector::new(sim.embed_text(t)).unwrap()))
            .collect();
        for i in 0..20 {
            let image = sim.simulate(&request("x", None, 1), i);
            assert_eq!(image.faces.len(), 3);
            for face in &image.faces {
                let crop = crate::multiface::expand_box(face.bbox, 1024, 1024, 3.0).unwrap();
                let v = EmbeddingVector::new(sim.embed_sim_image(&image, Some(crop))).unwrap();
                let profile =
                    predict_profile(&v, &schema, &prompts, ReligionMode::Attire, ProfileSource::FaceCrop(0))
                        .unwrap();
                for (attribute, planted) in &face.attributes {
                    assert_eq!(profile.category(attribute), Some(planted.as_str()));
                }
            }
        }
    }

    #[test]
    fn layout_keeps_faces_inside_the_image() {
        for n in 1..=8 {
            let boxes = face_layout(n, SIM_IMAGE_SIZE);
            assert_eq!(boxes.len(), n as usize);
            for b in boxes {
                b.validate(SIM_IMAGE_SIZE, SIM_IMAGE_SIZE).unwrap();
            }
        }
    }

    #[test]
    fn simulation_ignores_the_idempotency_key() {
        let sim = backend(BiasProfile::default());
        let a = request("p", Some("cot"), 5);
        let b = GenerateRequest {
            idempotency_key: "other".into(),
            ..a.clone()
        };
        assert_eq!(sim.generate(&a).unwrap(), sim.generate(&b).unwrap());
    }

    #[test]
    fn profile_must_cover_the_schema() {
        let mut profile = BiasProfile::default();
        profile.attributes.shift_remove("age");
        assert!(matches!(
            SimBackend::new(&AttributeSchema::default(), profile),
            Err(SimError::InvalidProfile { key, .. }) if key == "attributes.age"
        ));
    }

    #[test]
    fn reasoner_adds_one_attribute_per_turn_then_stops() {
        let reasoner = SimReasoner::new(&BiasProfile::default());
        let mut messages = vec![ChatMessage::user("Think step by step. Generate 20 photos of Nurse.")];
        let cot0 = reasoner.chat(&messages).unwrap();
        assert_eq!(count_keywords(&cot0, &["female".into(), "male".into()]), 0);
        messages.push(ChatMessage::assistant(cot0));
        let mut cots = Vec::new();
        for _ in 0..5 {
            messages.push(ChatMessage::user("Can you think again?"));
            let cot = reasoner.chat(&messages).unwrap();
            messages.push(ChatMessage::assistant(cot.clone()));
            cots.push(cot);
        }
        let profile = BiasProfile::default();
        let covered = |cot: &str| -> Vec<&str> {
            profile
                .attributes
                .iter()
                .filter(|(_, b)| count_keywords(cot, &b.keywords) == b.keywords.len())
                .map(|(n, _)| n.as_str())
                .collect()
        };
        assert_eq!(covered(&cots[0]), vec!["gender"]);
        assert_eq!(covered(&cots[2]), vec!["gender", "race", "age"]);
        assert_eq!(cots[3], cots[4]);
    }

    #[test]
    fn scripted_reasoner_replays_its_queue() {
        let reasoner = ScriptedReasoner::new(["a", "b"]);
        assert_eq!(reasoner.chat(&[ChatMessage::user("x")]).unwrap(), "a");
        assert_eq!(reasoner.chat(&[ChatMessage::user("y")]).unwrap(), "b");
        assert!(reasoner.chat(&[]).is_err());
        assert_eq!(reasoner.conversations().len(), 3);
    }
}
