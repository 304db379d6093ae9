//! The training loop: warmup on plain cross-entropy, then per epoch a loss
//! mixture fit and per batch activation maps, masks, regularized labels, a
//! reconstruction loss, and one optimizer step on encoder and decoder.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod hook;
pub mod run;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;

pub use ablate::{AblationCell, AblationRow, AblationTable, NoiseSetting};
pub use config::{apply_toggles, LabelBase, RatioPolicyKind, TrainConfig};
pub use eval::{evaluate, score_predictions, Evaluation};
pub use hook::{CeHost, HostBatch, HostLoss, HostMethod};
pub use run::{GmmRecord, LogRecord, Phase, RunDir, RunManifest};

use crate::activation::{compute_cams, ActivationResult};
use crate::data::{Dataset, ImageShape};
use crate::error::{Result, SanmError};
use crate::exec::Exec;
use crate::gmm::{clean_probabilities, fit_gmm, LossRecord};
use crate::label_reg::{regularize_label, soft_cross_entropy, LabelVector};
use crate::masking::{mask_batch, MaskSpec, MaskedSample};
use crate::nn::checkpoint::{Checkpoint, CheckpointInfo};
use crate::nn::{to_channel_major, Ctx, Decoder, Encoder, EncoderSpec, Module, Sgd};
use crate::reconstruction::{reconstruction_loss_grad, LossBundle, ReconTarget};
use crate::rng::{stream, Domain};

/// Per-channel `(x - mean) / std` on encoder inputs; identity when empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn from_config(cfg: &TrainConfig, channels: usize) -> Result<Self> {
        if !cfg.norm_mean.is_empty() && cfg.norm_mean.len() != channels {
            return Err(SanmError::config(format!(
                "normalization has {} channels, images have {channels}",
                cfg.norm_mean.len()
            )));
        }
        Ok(Normalizer {
            mean: cfg.norm_mean.clone(),
            std: cfg.norm_std.clone(),
        })
    }

    /// Applies to an `(N, C, H, W)` batch.
    pub fn apply(&self, x: &Array4<f32>) -> Array4<f32> {
        let mut out = x.clone();
        if self.mean.is_empty() {
            return out;
        }
        for (c, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        out
    }
}

pub struct Models {
    pub encoder: Encoder<f32>,
    pub decoder: Decoder<f32>,
}

impl Models {
    /// Encoder and decoder initialized from the config seed.
    pub fn build(cfg: &TrainConfig, image: ImageShape, classes: usize) -> Result<Self> {
        let mut spec = EncoderSpec::new(cfg.architecture, classes, image.channels);
        if let Some(w) = cfg.width {
            spec = spec.with_width(w);
        }
        let encoder = Encoder::new(spec, image, cfg.seed)?;
        let decoder = Decoder::new(spec.feature_shape(image)?, image, cfg.decoder_channels, cfg.seed)?;
        Ok(Models { encoder, decoder })
    }
}

/// What a training run leaves behind besides the updated models.
#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub gmm: Vec<GmmRecord>,
    pub best_acc: Option<f64>,
    pub last_acc: Option<f64>,
    /// Clean probabilities in dataset order after the last fit.
    pub clean_probs: Option<Vec<f64>>,
}

impl TrainOutcome {
    /// Epoch-level records only.
    pub fn epochs(&self) -> impl Iterator<Item = &LogRecord> {
        self.log.iter().filter(|r| matches!(r, LogRecord::Epoch { .. }))
    }
}

/// One batch's worth of inputs after the masking stage.
struct Prepared {
    images: Array4<f32>,
    targets: Array2<f32>,
    masks: Option<Vec<MaskedSample>>,
    cams: Vec<ActivationResult>,
}

fn one_hot_targets(labels: &[usize], classes: usize) -> Array2<f32> {
    let mut t = Array2::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        t[[i, y]] = 1.0;
    }
    t
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    norm: Normalizer,
    exec: Exec,
    ids: Vec<u64>,
}

impl Trainer<'_> {
    /// Per-sample cross-entropy on unmasked images against the training labels.
    fn sample_losses(&self, encoder: &mut Encoder<f32>, epoch: usize) -> Result<Vec<LossRecord>> {
        let idx: Vec<usize> = (0..self.data.len()).collect();
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(self.cfg.eval_batch_size) {
            let x = self.norm.apply(&self.data.batch_images(chunk));
            let logits = encoder.forward(&x, &Ctx::eval(self.exec))?.logits;
            let targets = one_hot_targets(&self.data.noisy_labels(chunk), self.data.classes);
            let (losses, _) = soft_cross_entropy(logits.view(), targets.view());
            for (&i, l) in chunk.iter().zip(losses) {
                out.push(LossRecord {
                    sample_id: self.ids[i],
                    loss: (l as f64).max(0.0),
                    epoch,
                });
            }
        }
        Ok(out)
    }

    /// Activation maps on the originals, masks, and targets for the masked images.
    fn prepare_masked(
        &self,
        encoder: &mut Encoder<f32>,
        x: &Array4<f32>,
        chunk: &[usize],
        g: &[f64],
        epoch: usize,
    ) -> Result<Prepared> {
        let shape = self.data.shape;
        let taps = encoder.forward(&self.norm.apply(x), &Ctx::eval(self.exec))?.taps();
        let cams = compute_cams(
            &taps,
            (shape.height, shape.width),
            &*encoder,
            self.cfg.cam_options(),
            self.exec,
        )?;
        let ids: Vec<u64> = chunk.iter().map(|&i| self.ids[i]).collect();
        let gs: Vec<f64> = chunk.iter().map(|&i| g[i]).collect();
        let masked = mask_batch(x, &cams, &gs, &ids, epoch, &self.cfg.mask_config(), self.exec)?;
        let views: Vec<_> = masked.iter().map(|m| m.image.view()).collect();
        let images = ndarray::stack(Axis(0), &views).map_err(|e| SanmError::Shape(e.to_string()))?;

        let labels = self.data.noisy_labels(chunk);
        let classes = self.data.classes;
        let mut targets = Array2::<f32>::zeros((chunk.len(), classes));
        for (i, mut row) in targets.axis_iter_mut(Axis(0)).enumerate() {
            let base = match self.cfg.label_base {
                LabelBase::NoisyLabel => LabelVector::one_hot(labels[i], classes),
                LabelBase::Prediction => {
                    let p: Vec<f64> = taps[i].prediction.iter().map(|&v| v as f64).collect();
                    let s: f64 = p.iter().sum();
                    LabelVector {
                        probs: p.into_iter().map(|v| v / s).collect(),
                    }
                }
            };
            let target = if self.cfg.nlr {
                regularize_label(&base, masked[i].specs[0].ratio)?
            } else {
                base
            };
            for (t, p) in row.iter_mut().zip(target.probs) {
                *t = p as f32;
            }
        }
        Ok(Prepared {
            images,
            targets,
            masks: Some(masked),
            cams,
        })
    }
}

/// Engine-layout 0/1 mask of every masked rectangle, for masked-only reconstruction.
fn mask_indicator(masks: &[MaskedSample], shape: ImageShape) -> Array4<f32> {
    let mut m = Array4::<f32>::zeros((shape.channels, masks.len(), shape.height, shape.width));
    for (n, s) in masks.iter().enumerate() {
        for spec in &s.specs {
            let b = spec.bounds;
            for c in 0..shape.channels {
                for y in b.h_up..b.h_dn {
                    for x in b.w_lt..b.w_rt {
                        m[[c, n, y, x]] = 1.0;
                    }
                }
            }
        }
    }
    m
}

fn is_divergence(e: &SanmError) -> bool {
    matches!(e, SanmError::NonFinite { .. })
}

/// Trains `models` on `data` (noisy labels) and returns the run log.
///
/// Test accuracy is recorded every epoch when `test` is given. On a non-finite
/// loss the models are restored to the state at the end of the last completed
/// epoch (written as the `last_good` checkpoint when `run` is given) and
/// [`SanmError::Diverged`] is returned.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    test: Option<&Dataset>,
    models: &mut Models,
    host: &mut dyn HostMethod,
    mut run: Option<&mut RunDir>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    if data.is_empty() && cfg.epochs > 0 {
        return Err(SanmError::invalid("training set is empty"));
    }
    let spec = models.encoder.spec;
    if spec.class_count != data.classes {
        return Err(SanmError::invalid(format!(
            "encoder has {} classes, dataset has {}",
            spec.class_count, data.classes
        )));
    }
    if models.encoder.image != data.shape {
        return Err(SanmError::Shape(format!(
            "encoder built for {:?}, dataset images are {:?}",
            models.encoder.image, data.shape
        )));
    }
    if let Some(t) = test {
        if t.classes != data.classes || t.shape != data.shape {
            return Err(SanmError::invalid("test set does not match the training set's classes or shape"));
        }
    }
    let trainer = Trainer {
        cfg,
        data,
        norm: Normalizer::from_config(cfg, data.shape.channels)?,
        exec: Exec::from_flag(cfg.parallel),
        ids: data.samples.iter().map(|s| s.id).collect(),
    };
    let exec = trainer.exec;
    let schedule = cfg.schedule();
    let beta = cfg.effective_beta();
    let mut enc_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut dec_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let info = |epoch: usize| CheckpointInfo {
        architecture: spec.architecture.name().to_string(),
        epoch,
        config_hash: cfg.hash(),
    };
    let mut last_good = Checkpoint::capture(info(0), &mut models.encoder, Some(&mut models.decoder));

    let mut out = TrainOutcome::default();
    let mut g: Option<Vec<f64>> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = schedule.rate(epoch, cfg.epochs);
        let masked_phase = cfg.amg && epoch >= cfg.warmup_epochs;
        let phase = if masked_phase { Phase::Masked } else { Phase::Warmup };

        if masked_phase && (epoch - cfg.warmup_epochs) % cfg.gmm_period == 0 {
            let records = trainer.sample_losses(&mut models.encoder, epoch)?;
            let fit = fit_gmm(&records)?;
            let probs = clean_probabilities(&fit, &records);
            let values: Vec<f64> = probs.iter().map(|p| p.g).collect();
            log::debug!(
                "epoch {epoch}: mixture means {:?} weights {:?} after {} iterations",
                fit.raw_means(),
                fit.weights,
                fit.iterations
            );
            let rec = GmmRecord {
                epoch,
                samples: records.iter().zip(&values).map(|(r, &gv)| (r.sample_id, r.loss, gv)).collect(),
                fit,
            };
            if let Some(r) = run.as_deref_mut() {
                r.append_gmm(&rec)?;
            }
            out.gmm.push(rec);
            g = Some(values);
        }

        order.shuffle(&mut stream(cfg.seed, Domain::Shuffle, epoch as u64, 0));
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = (|| -> Result<LossBundle> {
                let x = data.batch_images(chunk);
                let prep = match (&g, masked_phase) {
                    (Some(gv), true) => trainer.prepare_masked(&mut models.encoder, &x, chunk, gv, epoch)?,
                    _ => Prepared {
                        targets: one_hot_targets(&data.noisy_labels(chunk), data.classes),
                        images: x.clone(),
                        masks: None,
                        cams: Vec::new(),
                    },
                };
                let ctx = Ctx::train(exec);
                let enc_out = models.encoder.forward(&trainer.norm.apply(&prep.images), &ctx)?;
                let ids: Vec<u64> = chunk.iter().map(|&i| trainer.ids[i]).collect();
                let hl = host.batch_loss(&HostBatch {
                    epoch,
                    sample_ids: &ids,
                    images: &prep.images,
                    targets: &prep.targets,
                    logits: &enc_out.logits,
                })?;
                if !hl.loss.is_finite() {
                    return Err(SanmError::NonFinite { stage: "classification loss".into() });
                }
                let mut l_r = 0.0;
                let mut dfeat = None;
                if masked_phase && cfg.smr {
                    let recon = models.decoder.forward(&enc_out.features, &ctx)?;
                    let target = to_channel_major(&x);
                    let ind = match cfg.recon_target {
                        ReconTarget::MaskedOnly => prep.masks.as_deref().map(|m| mask_indicator(m, data.shape)),
                        ReconTarget::AllPixels => None,
                    };
                    let (loss, mut grad) = reconstruction_loss_grad(&recon, &target, cfg.recon_target, ind.as_ref())?;
                    if !loss.is_finite() {
                        return Err(SanmError::NonFinite { stage: "reconstruction loss".into() });
                    }
                    l_r = loss;
                    let bf = beta as f32;
                    grad.mapv_inplace(|v| v * bf);
                    dfeat = Some(models.decoder.backward(&grad, &ctx));
                }
                models.encoder.backward(&hl.dlogits, dfeat.as_ref(), &ctx);
                enc_opt.step(&mut models.encoder, lr);
                models.encoder.zero_grad();
                if masked_phase && cfg.smr {
                    dec_opt.step(&mut models.decoder, lr);
                    models.decoder.zero_grad();
                }
                Ok(LossBundle::new(hl.loss, l_r, beta))
            })();
            let losses = match step {
                Ok(l) => l,
                Err(e) if is_divergence(&e) => {
                    log::error!("epoch {epoch} batch {b}: {e}; restoring the last good state");
                    last_good.restore(&mut models.encoder, Some(&mut models.decoder))?;
                    if let Some(r) = run.as_deref_mut() {
                        r.save_checkpoint(&last_good, "last_good")?;
                        r.flush()?;
                    }
                    return Err(SanmError::Diverged { epoch, batch: b });
                }
                Err(e) => return Err(e),
            };
            sums[0] += losses.l_c;
            sums[1] += losses.l_r;
            sums[2] += losses.l_train;
            batches += 1;
            let rec = LogRecord::Batch {
                epoch,
                batch: b,
                phase,
                lr,
                l_c: losses.l_c,
                l_r: losses.l_r,
                l_train: losses.l_train,
                timestamp: run::timestamp(),
            };
            if let Some(r) = run.as_deref_mut() {
                r.append_log(&rec)?;
            }
            out.log.push(rec);
        }

        let test_acc = match test {
            Some(t) => Some(evaluate(&mut models.encoder, t, &trainer.norm, cfg.eval_batch_size, exec)?.accuracy),
            None => None,
        };
        let improved = match (test_acc, out.best_acc) {
            (Some(a), Some(best)) => a > best,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            out.best_acc = test_acc;
        }
        out.last_acc = test_acc;
        let nb = batches.max(1) as f64;
        let rec = LogRecord::Epoch {
            epoch,
            phase,
            lr,
            l_c: sums[0] / nb,
            l_r: sums[1] / nb,
            l_train: sums[2] / nb,
            test_acc,
            best_acc: out.best_acc,
            timestamp: run::timestamp(),
        };
        log::info!(
            "epoch {epoch:>3} [{phase:?}] lr {lr:.4} L_c {:.4} L_r {:.4} test {}",
            sums[0] / nb,
            sums[1] / nb,
            test_acc.map_or("-".to_string(), |a| format!("{:.2}%", 100.0 * a))
        );
        last_good = Checkpoint::capture(info(epoch + 1), &mut models.encoder, Some(&mut models.decoder));
        if let Some(r) = run.as_deref_mut() {
            r.append_log(&rec)?;
            if (epoch + 1) % cfg.checkpoint_every == 0 {
                r.save_checkpoint(&last_good, &format!("epoch_{:03}", epoch + 1))?;
            }
            if improved {
                r.save_checkpoint(&last_good, "best")?;
            }
            r.flush()?;
        }
        out.log.push(rec);
    }
    out.clean_probs = g;
    if let Some(r) = run {
        r.save_checkpoint(&last_good, "final")?;
        r.flush()?;
    }
    Ok(out)
}

/// One sample pushed through the masked phase with the current models.
#[derive(Debug, Clone)]
pub struct Inspection {
    pub sample_id: u64,
    pub true_label: usize,
    pub noisy_label: usize,
    pub clean_prob: f64,
    pub original: Array3<f32>,
    pub masked: Array3<f32>,
    pub cam: ActivationResult,
    pub specs: [MaskSpec; 2],
    /// Training target after label regularization (when enabled).
    pub target: Vec<f32>,
    /// Decoder output from the masked image's features.
    pub reconstruction: Array3<f32>,
}

/// Activation maps, masks, targets, and reconstructions for `indices`, exactly
/// as a masked-phase batch at `epoch` would see them. Without clean
/// probabilities every sample gets 0.5.
pub fn inspect(
    cfg: &TrainConfig,
    data: &Dataset,
    models: &mut Models,
    indices: &[usize],
    clean_probs: Option<&[f64]>,
    epoch: usize,
) -> Result<Vec<Inspection>> {
    cfg.validate()?;
    if let Some(&i) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(SanmError::invalid(format!("sample index {i} out of range ({} samples)", data.len())));
    }
    if indices.is_empty() {
        return Ok(Vec::new());
    }
    let trainer = Trainer {
        cfg,
        data,
        norm: Normalizer::from_config(cfg, data.shape.channels)?,
        exec: Exec::from_flag(cfg.parallel),
        ids: data.samples.iter().map(|s| s.id).collect(),
    };
    let half = vec![0.5; data.len()];
    let g = clean_probs.unwrap_or(&half);
    if g.len() != data.len() {
        return Err(SanmError::invalid("clean probabilities do not cover the dataset"));
    }
    let x = data.batch_images(indices);
    let prep = trainer.prepare_masked(&mut models.encoder, &x, indices, g, epoch)?;
    let ctx = Ctx::eval(trainer.exec);
    let feats = models.encoder.forward(&trainer.norm.apply(&prep.images), &ctx)?.features;
    let recon = models.decoder.reconstruct(&feats, &ctx)?;
    let masks = prep.masks.unwrap_or_default();
    Ok(indices
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let s = &data.samples[i];
            Inspection {
                sample_id: s.id,
                true_label: s.true_label,
                noisy_label: s.noisy_label,
                clean_prob: g[i],
                original: x.index_axis(Axis(0), k).to_owned(),
                masked: prep.images.index_axis(Axis(0), k).to_owned(),
                cam: prep.cams[k].clone(),
                specs: masks[k].specs,
                target: prep.targets.row(k).to_vec(),
                reconstruction: recon.index_axis(Axis(0), k).to_owned(),
            }
        })
        .collect())
}
