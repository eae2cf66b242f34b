use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{checkpoint, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::frequency::{frequency_cue, FilterSpec};
use crate::mpsm::SimilarityPattern;
use crate::net::{batch_tensor, ModelConfig, TwoStreamNet};
use crate::nn::Mode;
use crate::objective::{metrics, EvalReport};
use crate::raster::Image;
use crate::supervision::{build_mask, patch_probabilities_for, target_similarity, TargetSimilarity};

const FORMAT: &str = "facerel-detector";
const INFERENCE_BATCH: usize = 32;

/// JSON header stored in front of the tensors of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub model: ModelConfig,
    pub alpha: f64,
    pub mask_threshold: f64,
    /// 1-based epoch the weights come from; 0 for an untrained model.
    pub epoch: usize,
    pub val: Option<EvalReport>,
}

/// A network with its parameters and preprocessing settings.
#[derive(Clone, Debug)]
pub struct Detector {
    pub net: TwoStreamNet,
    pub store: ParamStore,
    pub filter: FilterSpec,
    pub mask_threshold: f64,
}

/// Eval-mode outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y_hat: f64,
    /// Row-major `h x w` forged probabilities.
    pub mask_hat: Vec<f64>,
    pub s_hat: Option<SimilarityPattern>,
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub prediction: Prediction,
    pub mask_hat: Image,
    /// Target pattern from the source/forged difference, when a source is given.
    pub target: Option<TargetSimilarity>,
}

impl Detector {
    pub fn new(model: ModelConfig, filter: FilterSpec, mask_threshold: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = TwoStreamNet::new(model, &mut store, &mut rng)?;
        Ok(Self {
            net,
            store,
            filter,
            mask_threshold,
        })
    }

    pub fn header(&self, epoch: usize, val: Option<EvalReport>) -> CheckpointHeader {
        CheckpointHeader {
            format: FORMAT.into(),
            model: *self.net.config(),
            alpha: self.filter.alpha(),
            mask_threshold: self.mask_threshold,
            epoch,
            val,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, epoch: usize, val: Option<EvalReport>) -> Result<()> {
        let header = serde_json::to_string(&self.header(epoch, val))?;
        checkpoint::save(path, &header, &self.store)
    }

    /// Rebuilds the architecture named in the header and loads its tensors.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointHeader)> {
        let (header, stored) = checkpoint::load(path)?;
        let header: CheckpointHeader = serde_json::from_str(&header)
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
        }
        let mut detector = Self::new(header.model, FilterSpec::new(header.alpha)?, header.mask_threshold, 0)?;
        detector.store.load_from(&stored)?;
        Ok((detector, header))
    }

    /// Checks that `expected` describes the loaded architecture.
    pub fn ensure_model(&self, expected: &ModelConfig) -> Result<()> {
        if self.net.config() != expected {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint has {:?}, expected {expected:?}",
                self.net.config()
            )));
        }
        Ok(())
    }

    pub fn cue(&self, image: &Image) -> Result<Image> {
        frequency_cue(image, self.filter)
    }

    /// Eval-mode predictions for RGB images of the configured size.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_BATCH) {
            let cues = chunk.iter().map(|img| self.cue(img)).collect::<Result<Vec<_>>>()?;
            let cue_refs: Vec<&Image> = cues.iter().collect();
            out.extend(self.predict_batch(&batch_tensor(chunk)?, &batch_tensor(&cue_refs)?)?);
        }
        Ok(out)
    }

    pub(crate) fn predict_batch(&self, x1: &Tensor, x2: &Tensor) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x1.clone()), tape.constant(x2.clone()));
        let o = self.net.forward(&mut tape, &self.store, a, b, Mode::Eval)?;
        let n = x1.dim(0);
        let pixels = x1.dim(1) * x1.dim(2);
        let y = tape.value(o.y_hat).data();
        let m = tape.value(o.mask_hat).data();
        let s = o.s_hat.map(|s| (tape.value(s).last_dim(), tape.value(s).data()));
        (0..n)
            .map(|i| {
                let s_hat = match s {
                    Some((side, data)) => Some(SimilarityPattern::new(
                        side,
                        data[i * side * side..(i + 1) * side * side].to_vec(),
                    )?),
                    None => None,
                };
                Ok(Prediction {
                    y_hat: y[i],
                    mask_hat: m[i * pixels..(i + 1) * pixels].to_vec(),
                    s_hat,
                })
            })
            .collect()
    }

    /// ACC/AUC/EER of the forged probability against `labels`.
    pub fn evaluate(&self, images: &[&Image], labels: &[u8]) -> Result<EvalReport> {
        if images.len() != labels.len() {
            return Err(Error::Usage("evaluate: one label per image".into()));
        }
        let preds = self.predict(images)?;
        let scores: Vec<(f64, u8)> = preds.iter().map(|p| p.y_hat).zip(labels.iter().copied()).collect();
        metrics(&scores)
    }

    /// Full per-image dump; with a `source` the target pattern is derived from
    /// the source/forged difference mask.
    pub fn analyze(&self, image: &Image, source: Option<&Image>) -> Result<Analysis> {
        let prediction = self.predict(&[image])?.remove(0);
        let mask_hat = Image::new(image.height(), image.width(), 1, prediction.mask_hat.clone())?;
        let target = match source {
            Some(src) => {
                let mask = build_mask(src, image, self.mask_threshold)?;
                let cfg = self.net.config();
                let e = cfg.high_extent();
                Some(target_similarity(&patch_probabilities_for(&mask, cfg.k, e, e)?))
            }
            None => None,
        };
        Ok(Analysis {
            prediction,
            mask_hat,
            target,
        })
    }
}
