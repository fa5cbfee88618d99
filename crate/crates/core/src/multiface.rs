//! Per-face analysis for images with several people.
//!
//! Boxes come from the detector port, are enlarged around their centre so the
//! crop keeps hair and clothing in view, and each crop is classified on its
//! own. Counts are accumulated per face, not per image.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends, ImageInput, ImageRef};
use crate::metrics::{CategoricalDistribution, MetricsError};
use crate::predictor::{
    predict_profile, AttributeProfile, PredictError, ProfileSource, PromptEmbeddings,
};
use crate::schema::{AttributeSchema, ReligionMode};

#[derive(Debug, Error)]
pub enum MultifaceError {
    #[error("invalid face box {bbox:?} in a {width}x{height} image: {reason}")]
    InvalidBox {
        bbox: FaceBox,
        width: u32,
        height: u32,
        reason: &'static str,
    },
    #[error("expansion factor must be a finite value >= 1, got {0}")]
    InvalidFactor(f64),
    #[error("image {image_id}: {source}")]
    Backend {
        image_id: String,
        #[source]
        source: BackendError,
    },
    #[error("image {image_id}: {source}")]
    Predict {
        image_id: String,
        #[source]
        source: PredictError,
    },
}

/// Pixel rectangle: top-left corner plus extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl FaceBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn contains(&self, other: &FaceBox) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && self.right() >= other.right()
            && self.bottom() >= other.bottom()
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<(), MultifaceError> {
        let reason = if self.w == 0 || self.h == 0 {
            Some("extents must be at least 1 pixel")
        } else if self.right() > width as u64 || self.bottom() > height as u64 {
            Some("box extends past the image")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(MultifaceError::InvalidBox {
                bbox: *self,
                width,
                height,
                reason,
            }),
            None => Ok(()),
        }
    }

    /// Intersection with the image rectangle, or `None` if nothing is left.
    pub fn clipped(&self, width: u32, height: u32) -> Option<FaceBox> {
        let right = self.right().min(width as u64);
        let bottom = self.bottom().min(height as u64);
        if (self.x as u64) >= right || (self.y as u64) >= bottom {
            return None;
        }
        Some(FaceBox::new(
            self.x,
            self.y,
            (right - self.x as u64) as u32,
            (bottom - self.y as u64) as u32,
        ))
    }
}

/// Scales the box by `factor` about its centre and clips the result to the
/// image. Edges are rounded outward so the result always contains `bbox`.
pub fn expand_box(
    bbox: FaceBox,
    width: u32,
    height: u32,
    factor: f64,
) -> Result<FaceBox, MultifaceError> {
    if !factor.is_finite() || factor < 1.0 {
        return Err(MultifaceError::InvalidFactor(factor));
    }
    bbox.validate(width, height)?;
    let (cx, cy) = bbox.center();
    let half_w = factor * bbox.w as f64 / 2.0;
    let half_h = factor * bbox.h as f64 / 2.0;
    let left = (cx - half_w).floor().max(0.0);
    let top = (cy - half_h).floor().max(0.0);
    let right = (cx + half_w).ceil().min(width as f64);
    let bottom = (cy + half_h).ceil().min(height as f64);
    Ok(FaceBox::new(
        left as u32,
        top as u32,
        (right - left) as u32,
        (bottom - top) as u32,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceObservation {
    pub original: FaceBox,
    pub expanded: FaceBox,
    pub profile: AttributeProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceObservationSet {
    pub image_id: String,
    pub faces: Vec<FaceObservation>,
}

/// Detect, expand, crop-embed and classify every face in one image. Faces
/// are ordered by the `(y, x)` of their detected boxes.
pub fn analyze_faces(
    image: &ImageRef,
    backends: &Backends,
    schema: &AttributeSchema,
    prompts: &PromptEmbeddings,
    mode: ReligionMode,
    factor: f64,
) -> Result<FaceObservationSet, MultifaceError> {
    let backend_err = |source| MultifaceError::Backend {
        image_id: image.id.clone(),
        source,
    };
    let bytes = backends.store().get(image).map_err(backend_err)?;
    let detection = backends.detect(&bytes).map_err(backend_err)?;

    let mut boxes = Vec::with_capacity(detection.boxes.len());
    for raw in &detection.boxes {
        let clipped = raw
            .clipped(detection.width, detection.height)
            .ok_or(MultifaceError::InvalidBox {
                bbox: *raw,
                width: detection.width,
                height: detection.height,
                reason: "box lies outside the image",
            })?;
        boxes.push(clipped);
    }
    boxes.sort_by_key(|b| (b.y, b.x, b.h, b.w));

    let expanded = boxes
        .iter()
        .map(|b| expand_box(*b, detection.width, detection.height, factor))
        .collect::<Result<Vec<_>, _>>()?;
    if expanded.is_empty() {
        return Ok(FaceObservationSet {
            image_id: image.id.clone(),
            faces: Vec::new(),
        });
    }
    let inputs: Vec<ImageInput<'_>> = expanded
        .iter()
        .map(|b| ImageInput {
            bytes: &bytes,
            crop: Some(*b),
        })
        .collect();
    let embeddings = backends.embed_images(&inputs).map_err(backend_err)?;

    let mut faces = Vec::with_capacity(boxes.len());
    for (i, ((original, expanded), embedding)) in
        boxes.into_iter().zip(expanded).zip(&embeddings).enumerate()
    {
        let profile = predict_profile(embedding, schema, prompts, mode, ProfileSource::FaceCrop(i))
            .map_err(|source| MultifaceError::Predict {
                image_id: image.id.clone(),
                source,
            })?;
        faces.push(FaceObservation {
            original,
            expanded,
            profile,
        });
    }
    Ok(FaceObservationSet {
        image_id: image.id.clone(),
        faces,
    })
}

/// One distribution per schema attribute, counting every profile once.
pub fn tally_profiles<'a>(
    profiles: impl IntoIterator<Item = &'a AttributeProfile>,
    schema: &AttributeSchema,
) -> Result<IndexMap<String, CategoricalDistribution>, MetricsError> {
    let mut out: IndexMap<String, CategoricalDistribution> = schema
        .attributes
        .iter()
        .map(|a| (a.name.clone(), CategoricalDistribution::new(&a.categories)))
        .collect();
    for profile in profiles {
        for (attribute, dist) in out.iter_mut() {
            let category = profile
                .category(attribute)
                .ok_or_else(|| MetricsError::UnknownCategory(format!("{attribute}: missing")))?;
            dist.record(category)?;
        }
    }
    Ok(out)
}

/// Per-face counts across all observation sets. Images without faces add
/// nothing.
pub fn aggregate_counts(
    observations: &[FaceObservationSet],
    schema: &AttributeSchema,
) -> Result<IndexMap<String, CategoricalDistribution>, MetricsError> {
    tally_profiles(
        observations
            .iter()
            .flat_map(|set| set.faces.iter().map(|f| &f.profile)),
        schema,
    )
}
