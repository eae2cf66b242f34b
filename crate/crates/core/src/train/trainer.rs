use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, SyntheticSample};
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::frequency::FilterSpec;
use crate::net::{batch_tensor, Variant};
use crate::nn::Mode;
use crate::objective::{loss_ce, loss_seg, loss_sim, loss_total, EvalReport, LossBreakdown};
use crate::raster::Image;
use crate::supervision::{patch_probabilities_for, target_similarity};

use super::adam::{adam_step, OptimizerState};
use super::config::TrainConfig;
use super::detector::Detector;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's steps.
    pub train: LossBreakdown,
    pub val: EvalReport,
    /// Whether this epoch became the saved checkpoint.
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the highest validation AUC.
    pub best: Detector,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// Stratified train/validation split: sample pairs `(2m, 2m + 1)` with
/// `m % 5 == 4` go to validation, so both classes keep a 4:1 ratio.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| (i / 2) % 5 != 4)
}

struct Prepared {
    cue: Option<Image>,
    target: Vec<f64>,
    mask: Vec<f64>,
}

fn prepare(sample: &SyntheticSample, cfg: &TrainConfig, filter: FilterSpec) -> Result<Prepared> {
    let e = cfg.model().high_extent();
    let p = patch_probabilities_for(&sample.mask, cfg.k, e, e)?;
    Ok(Prepared {
        cue: if cfg.cache_cue { Some(crate::frequency::frequency_cue(&sample.image, filter)?) } else { None },
        target: target_similarity(&p).data().to_vec(),
        mask: sample.mask.to_f64(),
    })
}

/// Trains on the corpus, evaluating on the held-out split after every epoch.
/// With `out`, writes `metrics.jsonl` as it goes and `checkpoint.bin` (best
/// validation AUC) at the end.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let size = cfg.image_size;
    if let Some(s) = corpus.samples.iter().find(|s| s.image.height() != size || s.image.width() != size) {
        return Err(Error::Corpus(format!(
            "sample {} is {}x{}, configured size is {size}",
            s.seed,
            s.image.height(),
            s.image.width()
        )));
    }
    let (train_idx, val_idx) = split_indices(corpus.len());
    if train_idx.len() < 2 || val_idx.is_empty() {
        return Err(Error::Corpus(format!("corpus of {} samples is too small to split", corpus.len())));
    }
    let filter = FilterSpec::new(cfg.alpha)?;
    let mut detector = Detector::new(cfg.model(), filter, cfg.mask_threshold, cfg.seed)?;
    let prepared = corpus
        .samples
        .iter()
        .map(|s| prepare(s, cfg, filter))
        .collect::<Result<Vec<_>>>()?;
    let val_images: Vec<&Image> = val_idx.iter().map(|&i| &corpus.samples[i].image).collect();
    let val_labels: Vec<u8> = val_idx.iter().map(|&i| corpus.samples[i].label).collect();

    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };

    let mut state = OptimizerState::new(&detector.store);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Detector)> = None;
    let weights = cfg.loss_weights();
    let mut order = train_idx.clone();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.copy_from_slice(&train_idx);
        order.shuffle(&mut rng);

        let (mut sums, mut steps) = ([0.0; 4], 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let parts = train_step(cfg, &mut detector, &mut state, corpus, &prepared, batch, lr, weights)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch: epoch + 1, step },
                    other => other,
                })?;
            for (s, v) in sums.iter_mut().zip(parts) {
                *s += v;
            }
            steps += 1;
        }
        let steps = steps.max(1) as f64;
        let train = LossBreakdown::combine(sums[0] / steps, sums[1] / steps, sums[2] / steps, weights)?;
        let val = detector.evaluate(&val_images, &val_labels)?;
        let improved = best.as_ref().is_none_or(|(auc, _, _)| val.auc > *auc);
        if improved {
            best = Some((val.auc, epoch + 1, detector.clone()));
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train,
            val,
            best: improved,
        };
        log::info!(
            "epoch {:>3}  lr {:.2e}  loss {:.4} (ce {:.4} sim {:.4} seg {:.4})  val acc {:.4} auc {:.4} eer {:.4}",
            record.epoch,
            lr,
            train.l_total,
            train.l_ce,
            train.l_sim,
            train.l_seg,
            val.acc,
            val.auc,
            val.eer
        );
        if let Some((w, p)) = log.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(p.as_path(), e))?;
        }
        history.push(record);
    }

    let (_, best_epoch, best) = best.expect("at least one epoch");
    if let Some(dir) = out {
        best.save(dir.join("checkpoint.bin"), best_epoch, Some(history[best_epoch - 1].val))?;
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}

/// Returns the batch's `[ce, sim, seg]` losses before the update.
#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &TrainConfig,
    detector: &mut Detector,
    state: &mut OptimizerState,
    corpus: &Corpus,
    prepared: &[Prepared],
    batch: &[usize],
    lr: f64,
    weights: crate::objective::LossWeights,
) -> Result<[f64; 3]> {
    let n = batch.len();
    let size = cfg.image_size;
    let images: Vec<&Image> = batch.iter().map(|&i| &corpus.samples[i].image).collect();
    let computed: Vec<Image>;
    let cues: Vec<&Image> = if cfg.cache_cue {
        batch.iter().map(|&i| prepared[i].cue.as_ref().expect("cached cue")).collect()
    } else {
        computed = images.iter().map(|img| detector.cue(img)).collect::<Result<_>>()?;
        computed.iter().collect()
    };
    let x1 = batch_tensor(&images)?;
    let x2 = batch_tensor(&cues)?;
    let labels = Tensor::new(&[n, 1], batch.iter().map(|&i| f64::from(corpus.samples[i].label)).collect())?;
    let masks = Tensor::new(
        &[n, size, size, 1],
        batch.iter().flat_map(|&i| prepared[i].mask.iter().copied()).collect(),
    )?;

    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x1), tape.constant(x2));
    let out = detector.net.forward(&mut tape, &detector.store, a, b, Mode::Train)?;
    let ce = loss_ce(&mut tape, out.y_hat, &labels)?;
    let seg = loss_seg(&mut tape, out.mask_hat, &masks, cfg.normalize_seg)?;
    let sim = match (cfg.variant, out.s_hat) {
        (Variant::Full, Some(s_hat)) => {
            let side = tape.shape(s_hat)[1];
            let target = Tensor::new(
                &[n, side, side],
                batch.iter().flat_map(|&i| prepared[i].target.iter().copied()).collect(),
            )?;
            Some(loss_sim(&mut tape, s_hat, &target)?)
        }
        _ => None,
    };
    let total = loss_total(&mut tape, ce, sim, Some(seg), weights)?;
    let parts = [
        tape.value(ce).item(),
        sim.map_or(0.0, |s| tape.value(s).item()),
        tape.value(seg).item(),
    ];
    if !tape.value(total).item().is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, step: 0 });
    }
    let stats = tape.take_stat_updates();
    let grads = tape.backward(total)?;
    adam_step(
        &mut detector.store,
        &grads,
        state,
        lr,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
        cfg.weight_decay,
    )?;
    for s in &stats {
        s.apply(&mut detector.store);
    }
    Ok(parts)
}
