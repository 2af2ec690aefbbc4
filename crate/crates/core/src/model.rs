//! The full retrieval model: an encoder backend plus fusion weights.

use image::RgbImage;

use crate::encoders::{create_backend, BackendConfig, EncoderBackend};
use crate::error::Result;
use crate::eval::AblationMode;
use crate::fusion::{fuse_vectors, l2_normalize, lambda_for, FusionParams};

pub struct CirModel {
    pub backend_config: BackendConfig,
    pub backend: Box<dyn EncoderBackend>,
    pub fusion: FusionParams,
    /// L2-normalize both query features before fusing.
    pub normalize_features: bool,
}

/// Everything a query may be encoded from, depending on the mode.
pub struct QueryInputs<'a> {
    pub unified_text: &'a str,
    pub visual: Option<&'a RgbImage>,
    pub caption: &'a str,
    pub modification_text: &'a str,
    pub reference: Option<&'a RgbImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector {
    pub vector: Vec<f64>,
    /// Fusion weight, for the modes that fuse.
    pub lambda: Option<f64>,
}

impl AblationMode {
    pub fn needs_visual_query(self) -> bool {
        matches!(
            self,
            AblationMode::Full | AblationMode::VisualOnly | AblationMode::AverageAddition
        )
    }

    pub fn needs_reference_image(self) -> bool {
        self == AblationMode::ReferenceImageOnly
    }
}

impl CirModel {
    /// Fresh model: backend from its config, fusion head initialized with
    /// `fusion_seed`. The hidden width defaults to the embedding dimension.
    pub fn new(
        backend_config: &BackendConfig,
        hidden: Option<usize>,
        fusion_seed: u64,
        normalize_features: bool,
    ) -> Result<Self> {
        let backend = create_backend(backend_config)?;
        let dim = backend.dim();
        let fusion = FusionParams::init(dim, hidden.unwrap_or(dim), fusion_seed);
        fusion.validate()?;
        Ok(Self {
            backend_config: backend_config.clone(),
            backend,
            fusion,
            normalize_features,
        })
    }

    pub fn dim(&self) -> usize {
        self.backend.dim()
    }

    fn maybe_normalize(&self, rows: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        if self.normalize_features {
            rows.iter().map(|r| l2_normalize(r)).collect()
        } else {
            Ok(rows)
        }
    }

    /// Query embeddings for a batch under an ablation mode.
    pub fn query_vectors<'a>(&self, mode: AblationMode, batch: &[QueryInputs<'a>]) -> Result<Vec<QueryVector>> {
        let missing = |what: &str| crate::Error::Validation(format!("mode {mode} needs the {what}"));
        let texts = |f: fn(&QueryInputs<'a>) -> &'a str| -> Result<Vec<Vec<f64>>> {
            let t: Vec<&str> = batch.iter().map(f).collect();
            self.backend.encode_texts(&t)
        };
        let plain = |rows: Vec<Vec<f64>>| {
            rows.into_iter()
                .map(|vector| QueryVector { vector, lambda: None })
                .collect()
        };
        match mode {
            AblationMode::ModTextOnly => Ok(plain(texts(|q| q.modification_text)?)),
            AblationMode::CaptionOnly => Ok(plain(texts(|q| q.caption)?)),
            AblationMode::ReferenceImageOnly => {
                let imgs = batch
                    .iter()
                    .map(|q| q.reference.ok_or_else(|| missing("reference image")))
                    .collect::<Result<Vec<_>>>()?;
                Ok(plain(self.backend.encode_images(&imgs)?))
            }
            AblationMode::TextualOnly => Ok(plain(texts(|q| q.unified_text)?)),
            AblationMode::VisualOnly | AblationMode::Full | AblationMode::AverageAddition => {
                let imgs = batch
                    .iter()
                    .map(|q| q.visual.ok_or_else(|| missing("unified visual query")))
                    .collect::<Result<Vec<_>>>()?;
                let visual = self.maybe_normalize(self.backend.encode_images(&imgs)?)?;
                if mode == AblationMode::VisualOnly {
                    return Ok(plain(visual));
                }
                let textual = self.maybe_normalize(texts(|q| q.unified_text)?)?;
                textual
                    .iter()
                    .zip(&visual)
                    .map(|(t, v)| {
                        let lambda = if mode == AblationMode::AverageAddition {
                            0.5
                        } else {
                            lambda_for(&self.fusion, t, v)?
                        };
                        Ok(QueryVector {
                            vector: fuse_vectors(t, v, lambda)?,
                            lambda: Some(lambda),
                        })
                    })
                    .collect()
            }
        }
    }
}
