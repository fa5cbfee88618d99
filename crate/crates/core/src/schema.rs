//! Attribute universe, religion attire lists, profession areas and run
//! configuration.
//!
//! Every config file is TOML with a `schema_version` field. Defaults are
//! compiled in, so nothing here needs a file to exist. The canonical form of
//! each config is whatever [`to_canonical_toml`] emits; loading and saving a
//! canonical file reproduces it byte for byte.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::Aggregation;

pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_COT0: &str = "Think step by step before generating images while considering several races, genders, religions, and ages, and treating people of these categories equally.";
pub const DEFAULT_REFINE_PROMPT: &str = "Can you think again? Consider generating images of different religions, races, ages, and genders.";

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("serialization error: {0}")]
    Serialize(String),
    /// A validation failure; `key` is the dotted path of the offending entry.
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> SchemaError {
    SchemaError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeDef {
    pub name: String,
    pub categories: Vec<String>,
    /// Classification prompts per category.
    pub prompts: IndexMap<String, Vec<String>>,
}

impl AttributeDef {
    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == category)
    }

    fn validate(&self, index: usize) -> Result<(), SchemaError> {
        let base = format!("attributes[{index}]");
        if self.name.trim().is_empty() {
            return Err(invalid(format!("{base}.name"), "attribute name is empty"));
        }
        let base = format!("attributes.{}", self.name);
        if self.categories.len() < 2 {
            return Err(invalid(
                format!("{base}.categories"),
                format!("need at least 2 categories, found {}", self.categories.len()),
            ));
        }
        let mut seen = HashSet::new();
        for category in &self.categories {
            if category.trim().is_empty() {
                return Err(invalid(format!("{base}.categories"), "empty category label"));
            }
            if !seen.insert(category.as_str()) {
                return Err(invalid(
                    format!("{base}.categories"),
                    format!("duplicate category '{category}'"),
                ));
            }
        }
        for key in self.prompts.keys() {
            if !seen.contains(key.as_str()) {
                return Err(invalid(
                    format!("{base}.prompts.{key}"),
                    "prompts given for a category that is not declared",
                ));
            }
        }
        for category in &self.categories {
            let key = format!("{base}.prompts.{category}");
            match self.prompts.get(category) {
                None => return Err(invalid(key, "category has no prompts")),
                Some(list) if list.is_empty() => {
                    return Err(invalid(key, "category has no prompts"))
                }
                Some(list) if list.iter().any(|p| p.trim().is_empty()) => {
                    return Err(invalid(key, "empty prompt text"))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    pub schema_version: u32,
    /// Name of the attribute predicted through attire prompts.
    pub religion_attribute: String,
    pub attributes: Vec<AttributeDef>,
    /// Attire prompts per religion category, in tie-break order.
    pub religion_attire: IndexMap<String, Vec<String>>,
}

impl AttributeSchema {
    pub fn attribute(&self, name: &str) -> Option<&AttributeDef> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn religion(&self) -> &AttributeDef {
        self.attribute(&self.religion_attribute)
            .expect("validated schema names an existing religion attribute")
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.name.as_str())
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        check_version(self.schema_version)?;
        if self.attributes.is_empty() {
            return Err(invalid("attributes", "no attributes declared"));
        }
        let mut names = HashSet::new();
        for (i, attribute) in self.attributes.iter().enumerate() {
            attribute.validate(i)?;
            if !names.insert(attribute.name.as_str()) {
                return Err(invalid(
                    format!("attributes[{i}].name"),
                    format!("duplicate attribute '{}'", attribute.name),
                ));
            }
        }
        let religion = self.attribute(&self.religion_attribute).ok_or_else(|| {
            invalid(
                "religion_attribute",
                format!("'{}' is not a declared attribute", self.religion_attribute),
            )
        })?;
        for key in self.religion_attire.keys() {
            if religion.category_index(key).is_none() {
                return Err(invalid(
                    format!("religion_attire.{key}"),
                    format!("'{key}' is not a category of '{}'", religion.name),
                ));
            }
        }
        for category in &religion.categories {
            let key = format!("religion_attire.{category}");
            match self.religion_attire.get(category) {
                None => return Err(invalid(key, "missing attire list")),
                Some(list) if list.is_empty() => return Err(invalid(key, "attire list is empty")),
                Some(list) if list.iter().any(|p| p.trim().is_empty()) => {
                    return Err(invalid(key, "empty attire prompt"))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Attire lists in religion-category order.
    pub fn attire_in_order(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.religion().categories.iter().map(|c| {
            (
                c.as_str(),
                self.religion_attire
                    .get(c)
                    .map(Vec::as_slice)
                    .unwrap_or_default(),
            )
        })
    }

    /// Every prompt the predictor may need embedded, deduplicated, in schema order.
    pub fn all_prompt_texts(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let texts = self
            .attributes
            .iter()
            .flat_map(|a| a.prompts.values().flatten())
            .chain(self.religion_attire.values().flatten());
        for text in texts {
            if seen.insert(text.as_str()) {
                out.push(text.clone());
            }
        }
        out
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }
}

impl Default for AttributeSchema {
    fn default() -> Self {
        fn attr(name: &str, entries: &[(&str, &str)]) -> AttributeDef {
            AttributeDef {
                name: name.to_string(),
                categories: entries.iter().map(|(c, _)| c.to_string()).collect(),
                prompts: entries
                    .iter()
                    .map(|(c, p)| (c.to_string(), vec![p.to_string()]))
                    .collect(),
            }
        }
        fn list(items: &[&str]) -> Vec<String> {
            items.iter().map(|s| s.to_string()).collect()
        }

        let attributes = vec![
            attr(
                "gender",
                &[
                    ("female", "a photo of a female person"),
                    ("male", "a photo of a male person"),
                ],
            ),
            attr(
                "race",
                &[
                    (
                        "WMELH",
                        "a photo of a White, Middle Eastern, or Latino Hispanic person",
                    ),
                    ("Asian", "a photo of an Asian person"),
                    ("Black", "a photo of a Black person"),
                    ("Indian", "a photo of an Indian person"),
                ],
            ),
            attr(
                "age",
                &[
                    ("young", "a photo of a young person"),
                    ("old", "a photo of an old person"),
                ],
            ),
            attr(
                "religion",
                &[
                    ("Islam", "a photo of a Muslim person"),
                    ("Christianity", "a photo of a Christian person"),
                    ("Hinduism", "a photo of a Hindu person"),
                    ("Neutral", "a photo of a person with no religious affiliation"),
                ],
            ),
        ];

        let mut religion_attire = IndexMap::new();
        religion_attire.insert(
            "Islam".to_string(),
            list(&[
                "a person wearing a hijab",
                "a person wearing a thobe or dishdasha",
                "a person wearing an abaya",
                "a person wearing a kufi",
                "a person attending a mosque for prayers",
            ]),
        );
        religion_attire.insert(
            "Christianity".to_string(),
            list(&[
                "a person wearing a cross necklace",
                "a person in a nun's habit",
                "a person in a priest's cassock",
                "a person wearing a Christian religious robe",
                "a person attending a Christian church service",
            ]),
        );
        religion_attire.insert(
            "Hinduism".to_string(),
            list(&[
                "a person wearing a sari with a bindi",
                "a person wearing a dhoti or kurta",
                "a person with a tilak on their forehead",
                "a person in traditional Hindu wedding attire",
                "a person performing a Hindu ritual with a sacred thread",
            ]),
        );
        religion_attire.insert(
            "Neutral".to_string(),
            list(&[
                "a person with no visible religious attire",
                "a person in casual, everyday clothing",
                "a person in modern Western clothing",
                "a person with no religious symbols visible",
                "a person in neutral, plain attire",
            ]),
        );

        Self {
            schema_version: SCHEMA_VERSION,
            religion_attribute: "religion".to_string(),
            attributes,
            religion_attire,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaProfessions {
    /// Professions used to generate chain-of-thought demonstrations.
    pub cot_gen: Vec<String>,
    /// Professions evaluated at inference time.
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfessionAreaMap {
    pub schema_version: u32,
    pub areas: IndexMap<String, AreaProfessions>,
}

impl ProfessionAreaMap {
    pub fn validate(&self) -> Result<(), SchemaError> {
        check_version(self.schema_version)?;
        let mut owner: IndexMap<String, &str> = IndexMap::new();
        for (area, members) in &self.areas {
            if area.trim().is_empty() {
                return Err(invalid("areas", "empty area name"));
            }
            let lists = [("cot_gen", &members.cot_gen), ("test", &members.test)];
            for (list_name, list) in lists {
                for profession in list.iter() {
                    let key = format!("areas.{area}.{list_name}");
                    if profession.trim().is_empty() {
                        return Err(invalid(key, "empty profession name"));
                    }
                    if let Some(previous) = owner.insert(normalize_profession(profession), area) {
                        return Err(invalid(
                            key,
                            format!("profession '{profession}' already listed under '{previous}'"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// The area listing `profession` (case-insensitive exact match), if any.
    pub fn area_of(&self, profession: &str) -> Option<&str> {
        let needle = normalize_profession(profession);
        self.areas
            .iter()
            .find(|(_, members)| {
                members
                    .cot_gen
                    .iter()
                    .chain(&members.test)
                    .any(|p| normalize_profession(p) == needle)
            })
            .map(|(area, _)| area.as_str())
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }
}

fn normalize_profession(name: &str) -> String {
    name.trim().to_lowercase()
}

impl Default for ProfessionAreaMap {
    fn default() -> Self {
        let table: [(&str, &str, &[&str]); 7] = [
            (
                "Healthcare and Medical",
                "Nurse",
                &["Doctor", "Pharmacist", "Dentist"],
            ),
            (
                "Legal and Business",
                "Financial Advisor",
                &["Judge", "Legal Consultant", "Accountant"],
            ),
            (
                "Service and Hospitality",
                "Servant",
                &["Janitor", "Barista", "Housekeeper"],
            ),
            (
                "Security and Protection",
                "Bus Driver",
                &["Firefighter", "Bodyguard"],
            ),
            (
                "Education and Information",
                "Teacher",
                &["Research Assistant", "Librarian", "Instructional Coordinator"],
            ),
            (
                "Engineering and Technical",
                "Mechanical Engineer",
                &["Electrical Engineer", "Architect", "Structural Engineer"],
            ),
            (
                "Research and Analytical",
                "Researcher",
                &["Economist", "Financial Auditor", "Research Analyst"],
            ),
        ];
        let areas = table
            .iter()
            .map(|(area, cot_gen, test)| {
                (
                    area.to_string(),
                    AreaProfessions {
                        cot_gen: vec![cot_gen.to_string()],
                        test: test.iter().map(|s| s.to_string()).collect(),
                    },
                )
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            areas,
        }
    }
}

/// How the religion attribute is predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReligionMode {
    /// Global argmax over the attire prompts of every religion.
    #[default]
    Attire,
    /// One direct prompt set per religion, like any other attribute.
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub images_per_prompt: u32,
    /// Number of prompts requested from the reasoner at inference.
    pub n_prompts: u32,
    /// Fraction of the baseline alignment that refinement must retain.
    pub tau: f64,
    pub max_iterations: u32,
    pub rng_seed: u64,
    pub cot0_text: String,
    pub refine_prompt_text: String,
    pub fairness_aggregation: Aggregation,
    pub religion_mode: ReligionMode,
    pub multiface: bool,
    pub crop_expand_factor: f64,
    /// Upper bound on concurrent backend requests within one iteration.
    pub concurrency: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            images_per_prompt: 20,
            n_prompts: 20,
            tau: 0.9,
            max_iterations: 8,
            rng_seed: 0,
            cot0_text: DEFAULT_COT0.to_string(),
            refine_prompt_text: DEFAULT_REFINE_PROMPT.to_string(),
            fairness_aggregation: Aggregation::Mean,
            religion_mode: ReligionMode::Attire,
            multiface: false,
            crop_expand_factor: 3.0,
            concurrency: 4,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), SchemaError> {
        check_version(self.schema_version)?;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid(
                "tau",
                format!("must be in (0, 1], got {}", self.tau),
            ));
        }
        let positive = [
            ("images_per_prompt", self.images_per_prompt),
            ("n_prompts", self.n_prompts),
            ("max_iterations", self.max_iterations),
            ("concurrency", self.concurrency),
        ];
        for (key, value) in positive {
            if value == 0 {
                return Err(invalid(key, "must be a positive integer"));
            }
        }
        if !(self.crop_expand_factor >= 1.0 && self.crop_expand_factor.is_finite()) {
            return Err(invalid(
                "crop_expand_factor",
                format!("must be a finite value >= 1, got {}", self.crop_expand_factor),
            ));
        }
        if self.cot0_text.trim().is_empty() {
            return Err(invalid("cot0_text", "must not be empty"));
        }
        if self.refine_prompt_text.trim().is_empty() {
            return Err(invalid("refine_prompt_text", "must not be empty"));
        }
        Ok(())
    }
}

fn check_version(version: u32) -> Result<(), SchemaError> {
    if version != SCHEMA_VERSION {
        return Err(invalid(
            "schema_version",
            format!("unsupported version {version}, expected {SCHEMA_VERSION}"),
        ));
    }
    Ok(())
}

/// Types that can be loaded from and saved to the config format.
pub trait ConfigFile: Serialize + DeserializeOwned {
    fn check(&self) -> Result<(), SchemaError>;
}

impl ConfigFile for AttributeSchema {
    fn check(&self) -> Result<(), SchemaError> {
        self.validate()
    }
}

impl ConfigFile for ProfessionAreaMap {
    fn check(&self) -> Result<(), SchemaError> {
        self.validate()
    }
}

impl ConfigFile for RunConfig {
    fn check(&self) -> Result<(), SchemaError> {
        self.validate()
    }
}

pub fn parse_config<T: ConfigFile>(text: &str) -> Result<T, SchemaError> {
    let value: T = toml::from_str(text).map_err(|e| SchemaError::Parse(e.to_string()))?;
    value.check()?;
    Ok(value)
}

pub fn load_config<T: ConfigFile>(path: &Path) -> Result<T, SchemaError> {
    let text = fs::read_to_string(path).map_err(|source| SchemaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

pub fn to_canonical_toml<T: Serialize>(value: &T) -> Result<String, SchemaError> {
    toml::to_string(value).map_err(|e| SchemaError::Serialize(e.to_string()))
}

pub fn save_config<T: ConfigFile>(value: &T, path: &Path) -> Result<(), SchemaError> {
    value.check()?;
    let text = to_canonical_toml(value)?;
    fs::write(path, text).map_err(|source| SchemaError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_schema(path: &Path) -> Result<AttributeSchema, SchemaError> {
    load_config(path)
}

fn digest_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize");
    hex::encode(Sha256::digest(bytes))
}
