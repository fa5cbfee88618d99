//! Batch evaluation of generated images and the refinement driver used by
//! the CoT-generation phase.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{fan_out, BackendError, Backends, ChatMessage, GenerateRequest, ImageInput, ImageRef};
use crate::metrics::{self, CategoricalDistribution, MetricSnapshot, MetricsError};
use crate::multiface::{aggregate_counts, analyze_faces, tally_profiles, FaceObservationSet, MultifaceError};
use crate::predictor::{predict_profile, AttributeProfile, PredictError, ProfileSource, PromptEmbeddings};
use crate::refine::{Evaluation, RefinementDriver};
use crate::schema::{AttributeSchema, ReligionMode, RunConfig};
use crate::seeds::derive_seed;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Multiface(#[from] MultifaceError),
    #[error("no faces were detected in any of the {0} images")]
    NoFaces(usize),
    #[error("nothing to evaluate")]
    NoImages,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub image: ImageRef,
    /// Prompt that produced the image; needed for CLIP-T.
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub image_id: String,
    /// One profile per face, or a single whole-image profile.
    pub profiles: Vec<AttributeProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub counts: IndexMap<String, CategoricalDistribution>,
    pub per_attribute_entropy: IndexMap<String, f64>,
    pub fairness_score: f64,
    /// Absent when no image came with a prompt.
    pub clip_t: Option<f64>,
    pub predictions: Vec<ImagePrediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faces: Option<Vec<FaceObservationSet>>,
}

impl BatchResult {
    pub fn snapshot(&self) -> Option<MetricSnapshot> {
        self.clip_t.map(|clip_t| MetricSnapshot {
            per_attribute_entropy: self.per_attribute_entropy.clone(),
            clip_t,
            fairness_score: self.fairness_score,
        })
    }
}

/// Classifies images against the schema's prompts and computes metrics.
pub struct Evaluator<'a> {
    backends: &'a Backends,
    schema: &'a AttributeSchema,
    prompts: PromptEmbeddings,
    mode: ReligionMode,
    multiface: bool,
    factor: f64,
    aggregation: metrics::Aggregation,
}

impl<'a> Evaluator<'a> {
    /// Embeds every schema prompt once.
    pub fn new(
        backends: &'a Backends,
        schema: &'a AttributeSchema,
        config: &RunConfig,
    ) -> Result<Self, PipelineError> {
        let texts = schema.all_prompt_texts();
        let vectors = backends.embed_texts(&texts)?;
        Ok(Self {
            backends,
            schema,
            prompts: texts.into_iter().zip(vectors).collect(),
            mode: config.religion_mode,
            multiface: config.multiface,
            factor: config.crop_expand_factor,
            aggregation: config.fairness_aggregation,
        })
    }

    pub fn prompt_embeddings(&self) -> &PromptEmbeddings {
        &self.prompts
    }

    pub fn evaluate(&self, items: &[EvalItem]) -> Result<BatchResult, PipelineError> {
        if items.is_empty() {
            return Err(PipelineError::NoImages);
        }
        let store = self.backends.store();
        let bytes = items
            .iter()
            .map(|i| store.get(&i.image))
            .collect::<Result<Vec<_>, _>>()?;
        let inputs: Vec<ImageInput<'_>> = bytes
            .iter()
            .map(|b| ImageInput {
                bytes: b.as_slice(),
                crop: None,
            })
            .collect();
        let image_vectors = self.backends.embed_images(&inputs)?;

        let mut distinct: Vec<String> = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        for item in items {
            if let Some(p) = item.prompt.as_deref() {
                if !index.contains_key(p) {
                    index.insert(p, distinct.len());
                    distinct.push(p.to_string());
                }
            }
        }
        let clip_t = if distinct.is_empty() {
            None
        } else {
            let prompt_vectors = self.backends.embed_texts(&distinct)?;
            let pairs: Vec<_> = items
                .iter()
                .zip(&image_vectors)
                .filter_map(|(item, v)| {
                    item.prompt
                        .as_deref()
                        .map(|p| (v, &prompt_vectors[index[p]]))
                })
                .collect();
            Some(metrics::clip_t(&pairs)?)
        };

        let (counts, predictions, faces) = if self.multiface {
            let sets = fan_out(items, self.backends.concurrency(), |_, item| {
                analyze_faces(
                    &item.image,
                    self.backends,
                    self.schema,
                    &self.prompts,
                    self.mode,
                    self.factor,
                )
            })?;
            let counts = aggregate_counts(&sets, self.schema)?;
            let predictions = sets
                .iter()
                .map(|s| ImagePrediction {
                    image_id: s.image_id.clone(),
                    profiles: s.faces.iter().map(|f| f.profile.clone()).collect(),
                })
                .collect();
            (counts, predictions, Some(sets))
        } else {
            let predictions = items
                .iter()
                .zip(&image_vectors)
                .map(|(item, v)| {
                    let profile =
                        predict_profile(v, self.schema, &self.prompts, self.mode, ProfileSource::WholeImage)?;
                    Ok(ImagePrediction {
                        image_id: item.image.id.clone(),
                        profiles: vec![profile],
                    })
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            let counts = tally_profiles(predictions.iter().flat_map(|p| &p.profiles), self.schema)?;
            (counts, predictions, None)
        };

        if counts.values().all(|d| d.total() == 0) {
            return Err(PipelineError::NoFaces(items.len()));
        }
        let mut per_attribute_entropy = IndexMap::new();
        for (name, dist) in &counts {
            per_attribute_entropy.insert(name.clone(), metrics::normalized_entropy(dist)?);
        }
        let fairness_score =
            metrics::fairness_score(per_attribute_entropy.values().copied(), self.aggregation)?;
        Ok(BatchResult {
            counts,
            per_attribute_entropy,
            fairness_score,
            clip_t,
            predictions,
            faces,
        })
    }
}

/// Prompt used for every generation request of the CoT-generation phase.
pub fn photos_prompt(count: u32, profession: &str) -> String {
    format!("{count} photos of {profession}")
}

/// Generation requests for one iteration. Seeds depend on the prompt index
/// but not on the iteration, so an unchanged CoT regenerates the same images.
pub fn generation_requests(
    prompts: &[String],
    context: Option<&str>,
    images_per_prompt: u32,
    generation_seed: u64,
    key_prefix: &str,
) -> Vec<GenerateRequest> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, prompt)| GenerateRequest {
            prompt: prompt.clone(),
            context: context.map(str::to_string),
            count: images_per_prompt,
            seed: derive_seed(&[&generation_seed.to_le_bytes(), &(i as u64).to_le_bytes()]),
            idempotency_key: format!("{key_prefix}/p{i}"),
        })
        .collect()
}

/// Generates all requests and evaluates the images against their prompts.
pub fn generate_and_evaluate(
    backends: &Backends,
    evaluator: &Evaluator<'_>,
    requests: &[GenerateRequest],
) -> Result<(Vec<ImageRef>, Vec<String>, BatchResult), PipelineError> {
    let generated = backends.generate_all(requests)?;
    let mut items = Vec::new();
    let mut item_prompts = Vec::new();
    for (request, refs) in requests.iter().zip(generated) {
        for image in refs {
            items.push(EvalItem {
                image,
                prompt: Some(request.prompt.clone()),
            });
            item_prompts.push(request.prompt.clone());
        }
    }
    let result = evaluator.evaluate(&items)?;
    Ok((items.into_iter().map(|i| i.image).collect(), item_prompts, result))
}

/// Drives refinement for one profession: the reasoner writes CoT_0 from the
/// seed instruction, then rewrites it on every refine prompt.
pub struct CotGenDriver<'a> {
    backends: &'a Backends,
    evaluator: &'a Evaluator<'a>,
    config: &'a RunConfig,
    profession: String,
    run_id: String,
    generation_seed: u64,
    messages: Vec<ChatMessage>,
}

impl<'a> CotGenDriver<'a> {
    pub fn new(
        backends: &'a Backends,
        evaluator: &'a Evaluator<'a>,
        config: &'a RunConfig,
        profession: &str,
        run_id: &str,
        generation_seed: u64,
    ) -> Self {
        Self {
            backends,
            evaluator,
            config,
            profession: profession.to_string(),
            run_id: run_id.to_string(),
            generation_seed,
            messages: Vec::new(),
        }
    }

    /// The conversation so far.
    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }
}

impl RefinementDriver for CotGenDriver<'_> {
    type Error = PipelineError;

    fn initial_cot(&mut self) -> Result<String, PipelineError> {
        let request = format!(
            "{}\n\nGenerate {} photos of {}.",
            self.config.cot0_text,
            self.config.images_per_prompt,
            self.profession
        );
        self.messages.push(ChatMessage::user(request));
        let cot = self.backends.chat(&self.messages)?;
        self.messages.push(ChatMessage::assistant(cot.clone()));
        Ok(cot)
    }

    fn evaluate(&mut self, t: u32, cot: &str) -> Result<Evaluation, PipelineError> {
        let prompt = photos_prompt(self.config.images_per_prompt, &self.profession);
        let prompts = vec![prompt; self.config.n_prompts as usize];
        let requests = generation_requests(
            &prompts,
            Some(cot),
            self.config.images_per_prompt,
            self.generation_seed,
            &format!("{}/t{t}", self.run_id),
        );
        let (images, _, result) = generate_and_evaluate(self.backends, self.evaluator, &requests)?;
        let snapshot = result.snapshot().expect("every generated image has a prompt");
        Ok(Evaluation {
            prompts,
            images,
            counts: result.counts,
            snapshot,
        })
    }

    fn rethink(&mut self, _t: u32) -> Result<String, PipelineError> {
        self.messages
            .push(ChatMessage::user(self.config.refine_prompt_text.clone()));
        let cot = self.backends.chat(&self.messages)?;
        self.messages.push(ChatMessage::assistant(cot.clone()));
        Ok(cot)
    }
}
