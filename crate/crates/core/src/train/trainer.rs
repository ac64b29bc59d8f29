use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{finite_mean, psnr, rgb_to_luminance, ssim, ImageF32, ImagePair};
use crate::error::{Error, Result};
use crate::model::{granet_forward, mae_loss, GraNet, GraNetConfig, GraNetWeights};
use crate::tensor::Graph;

use super::adam::{AdamState, Gradients};
use super::augment::augment;
use super::checkpoint::{Checkpoint, Progress};
use super::config::RunConfig;
use super::scheduler::PlateauScheduler;

pub const CSV_HEADER: &str = "epoch,lr,train_loss,val_psnr_final,val_psnr_coarse,val_psnr_mask,val_ssim_final";

/// Mean metrics of a model over a set of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub psnr_final: f64,
    pub psnr_coarse: f64,
    /// Predicted mask against the true residual `rainy - clean`.
    pub psnr_mask: f64,
    /// NaN when the images are smaller than the SSIM window.
    pub ssim_final: f64,
    pub per_image: Vec<ImageScores>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub name: String,
    pub psnr_input: f64,
    pub psnr_final: f64,
    pub psnr_coarse: f64,
    pub psnr_mask: f64,
    pub ssim_final: f64,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    match finite_mean(&v) {
        (Some(m), _) => m,
        (None, 0) => f64::NAN,
        (None, _) => f64::INFINITY,
    }
}

fn image_psnr(pred: &ImageF32, gt: &ImageF32) -> Result<f64> {
    psnr(&rgb_to_luminance(pred), &rgb_to_luminance(gt))
}

/// Scores one pair. Outputs are clamped to `[0, 1]` before scoring; the mask
/// is compared unclamped.
pub fn score_pair(net: &GraNet<f32>, pair: &ImagePair) -> Result<ImageScores> {
    let out = net.predict(&pair.rainy.to_tensor())?;
    let fin = ImageF32::from_tensor(&out.final_image, 0)?.clamped();
    let coarse = ImageF32::from_tensor(&out.coarse_result, 0)?.clamped();
    let mask = ImageF32::from_tensor(&out.mask, 0)?;
    let residual = ImageF32::new(
        pair.rainy.h,
        pair.rainy.w,
        pair.rainy.data.iter().zip(&pair.clean.data).map(|(r, c)| r - c).collect(),
    )?;
    let (yf, yc) = (rgb_to_luminance(&fin), rgb_to_luminance(&pair.clean));
    let ssim_final = if pair.clean.h >= 11 && pair.clean.w >= 11 { ssim(&yf, &yc)? } else { f64::NAN };
    Ok(ImageScores {
        name: pair.name.clone(),
        psnr_input: image_psnr(&pair.rainy, &pair.clean)?,
        psnr_final: psnr(&yf, &yc)?,
        psnr_coarse: image_psnr(&coarse, &pair.clean)?,
        psnr_mask: image_psnr(&mask, &residual)?,
        ssim_final,
    })
}

/// Scores every pair; infinite PSNRs are left out of the means.
pub fn evaluate(net: &GraNet<f32>, set: &[ImagePair]) -> Result<Evaluation> {
    let per_image = set.iter().map(|p| score_pair(net, p)).collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        psnr_final: mean_of(per_image.iter().map(|s| s.psnr_final)),
        psnr_coarse: mean_of(per_image.iter().map(|s| s.psnr_coarse)),
        psnr_mask: mean_of(per_image.iter().map(|s| s.psnr_mask)),
        ssim_final: mean_of(per_image.iter().map(|s| s.ssim_final).filter(|v| !v.is_nan())),
        per_image,
    })
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub train_loss: f64,
    /// PSNR of the (augmented) training outputs seen during the epoch.
    pub train_psnr: f64,
    pub val: Evaluation,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:.6},{:.4},{:.4},{:.4},{:.6}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.val.psnr_final,
            self.val.psnr_coarse,
            self.val.psnr_mask,
            self.val.ssim_final
        )
    }
}

/// Loss and PSNR of one optimizer step (measured before the update).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f32,
    pub psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub psnr: f64,
    pub steps: Vec<StepStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Floor learning rate reached and validation stopped improving.
    Converged,
    MaxEpochs,
    MaxSteps,
    TargetReached,
}

/// Where [`Trainer::fit`] writes its artifacts. Unset paths are skipped.
#[derive(Clone, Debug, Default)]
pub struct FitOutputs {
    /// Best-validation checkpoint.
    pub best: Option<PathBuf>,
    /// Checkpoint after the latest epoch (for resuming).
    pub last: Option<PathBuf>,
    /// Per-epoch metrics, appended.
    pub csv: Option<PathBuf>,
}

impl FitOutputs {
    /// `model.grnt` gives `model.grnt`, `model.last.grnt` and `model.csv`.
    pub fn beside(checkpoint: &Path) -> Self {
        let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        let dir = checkpoint.parent().unwrap_or(Path::new(""));
        FitOutputs {
            best: Some(checkpoint.to_path_buf()),
            last: Some(dir.join(format!("{stem}.last.grnt"))),
            csv: Some(dir.join(format!("{stem}.csv"))),
        }
    }
}

pub struct FitResult {
    pub stop: StopReason,
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Batch-1 training with Adam and plateau scheduling.
pub struct Trainer {
    pub run: RunConfig,
    pub weights: GraNetWeights<f32>,
    pub adam: AdamState,
    pub scheduler: PlateauScheduler,
    pub progress: Progress,
}

fn epoch_rng(seed: u64, epoch: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ u64::from(epoch + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let t = &run.train;
        let mut weights = GraNetWeights::init(&run.model, t.seed)?;
        if t.zero_init_heads {
            weights.zero_heads();
        }
        Ok(Trainer {
            weights,
            adam: AdamState::new(t.lr, t.beta1, t.beta2, t.eps),
            scheduler: PlateauScheduler::new(t.lr, t.lr_factor, t.min_lr, t.patience).with_min_delta(t.min_delta),
            progress: Progress::new(t.seed),
            run,
        })
    }

    /// Continues from a checkpoint. The model section of `run` must match the
    /// checkpoint; optimizer, schedule and progress come from the checkpoint.
    pub fn resume(run: RunConfig, ck: Checkpoint) -> Result<Self> {
        run.validate()?;
        if ck.config != run.model {
            return Err(Error::FingerprintMismatch { expected: run.model.to_kv(), found: ck.config.to_kv() });
        }
        Ok(Trainer { weights: ck.weights, adam: ck.adam, scheduler: ck.scheduler, progress: ck.progress, run })
    }

    pub fn config(&self) -> &GraNetConfig {
        &self.run.model
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.run.model.clone(),
            weights: self.weights.clone(),
            adam: self.adam.clone(),
            scheduler: self.scheduler.clone(),
            progress: self.progress.clone(),
        }
    }

    pub fn network(&self) -> GraNet<f32> {
        GraNet { config: self.run.model.clone(), weights: self.weights.clone() }
    }

    /// Forward, MAE loss, backward and one Adam update on a single pair.
    pub fn train_step(&mut self, pair: &ImagePair) -> Result<StepStats> {
        let mut g = Graph::new();
        let p = self.weights.bind(&mut g, true);
        let x = g.constant(pair.rainy.to_tensor());
        let y = g.constant(pair.clean.to_tensor());
        let out = granet_forward(&mut g, x, &self.run.model, &p)?;
        let loss_var = mae_loss(&mut g, out.final_image, y)?;
        let loss = g.value(loss_var).item().unwrap_or(f32::NAN);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { loss, step: self.progress.step, image: pair.name.clone() });
        }
        let fin = ImageF32::from_tensor(g.value(out.final_image), 0)?.clamped();
        let step_psnr = image_psnr(&fin, &pair.clean)?;
        g.backward(loss_var)?;
        let mut grads = Gradients::new();
        for (name, v) in p.iter() {
            if let Some(d) = g.grad(v) {
                grads.insert(name.to_string(), d.to_vec());
            }
        }
        self.adam.lr = self.scheduler.lr;
        self.adam.step(self.weights.iter_mut(), &grads)?;
        self.progress.step += 1;
        Ok(StepStats { loss, psnr: step_psnr })
    }

    /// One pass over `set` in a seeded random order with flip augmentation.
    /// Stops early once `train.max_steps` is reached. Does not touch the
    /// epoch counter or the scheduler.
    pub fn run_epoch(&mut self, set: &[ImagePair]) -> Result<EpochStats> {
        if set.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let mut rng = epoch_rng(self.progress.seed, self.progress.epoch);
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng);
        let mut stats = EpochStats::default();
        for i in order {
            if self.steps_exhausted() {
                break;
            }
            let pair = augment(&set[i], &mut rng, self.run.train.flip_prob);
            stats.steps.push(self.train_step(&pair)?);
        }
        stats.loss = stats.steps.iter().map(|s| s.loss as f64).sum::<f64>() / stats.steps.len().max(1) as f64;
        stats.psnr = mean_of(stats.steps.iter().map(|s| s.psnr));
        Ok(stats)
    }

    fn steps_exhausted(&self) -> bool {
        self.run.train.max_steps > 0 && self.progress.step >= self.run.train.max_steps
    }

    /// Feeds an epoch's metric to the scheduler and the stop counters.
    /// Returns true when the metric is a new best.
    pub fn end_epoch(&mut self, metric: f64) -> bool {
        let metric = if metric.is_nan() { f64::NEG_INFINITY } else { metric.min(f64::MAX) };
        self.scheduler.step(metric);
        self.progress.epoch += 1;
        if metric > self.progress.best_psnr + self.run.train.min_delta {
            self.progress.best_psnr = metric;
            self.progress.since_best = 0;
            true
        } else {
            self.progress.since_best += 1;
            false
        }
    }

    fn should_stop(&self, last_psnr: f64) -> Option<StopReason> {
        let t = &self.run.train;
        if t.target_psnr > 0.0 && last_psnr >= t.target_psnr {
            Some(StopReason::TargetReached)
        } else if self.scheduler.at_floor() && self.progress.since_best >= t.stop_patience {
            Some(StopReason::Converged)
        } else if self.steps_exhausted() {
            Some(StopReason::MaxSteps)
        } else if self.progress.epoch >= t.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        }
    }

    /// Trains until a stop rule fires, validating after every epoch.
    /// `on_epoch` sees each record as it is produced.
    pub fn fit(
        &mut self,
        train: &[ImagePair],
        val: &[ImagePair],
        outputs: &FitOutputs,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<FitResult> {
        if val.is_empty() {
            return Err(Error::Dataset("validation set is empty".into()));
        }
        let mut best: Option<Checkpoint> = None;
        let mut history = Vec::new();
        let mut stop = if self.steps_exhausted() {
            Some(StopReason::MaxSteps)
        } else if self.progress.epoch >= self.run.train.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        };
        while stop.is_none() {
            let lr = self.scheduler.lr;
            let stats = self.run_epoch(train)?;
            let eval = evaluate(&self.network(), val)?;
            let improved = self.end_epoch(eval.psnr_final);
            let record = EpochRecord {
                epoch: self.progress.epoch,
                lr,
                train_loss: stats.loss,
                train_psnr: stats.psnr,
                val: eval,
            };
            log::info!(
                "epoch {} lr {:.3e} loss {:.5} | val psnr mask {:.2} coarse {:.2} final {:.2} ssim {:.4}{}",
                record.epoch,
                lr,
                record.train_loss,
                record.val.psnr_mask,
                record.val.psnr_coarse,
                record.val.psnr_final,
                record.val.ssim_final,
                if improved { " *" } else { "" }
            );
            if let Some(csv) = &outputs.csv {
                append_csv(csv, &record)?;
            }
            let ck = self.checkpoint();
            if improved {
                if let Some(p) = &outputs.best {
                    ck.save(p)?;
                }
                best = Some(ck.clone());
            }
            if let Some(p) = &outputs.last {
                ck.save(p)?;
            }
            on_epoch(&record);
            stop = self.should_stop(record.val.psnr_final);
            history.push(record);
        }
        let best = best.unwrap_or_else(|| self.checkpoint());
        Ok(FitResult { stop: stop.expect("loop exits with a reason"), best, history })
    }
}

fn append_csv(path: &Path, record: &EpochRecord) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    text.push_str(&record.csv_row());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{procedural_scene, synth_rain, RainParams};
    use crate::train::TrainConfig;

    fn tiny_run(seed: u64) -> RunConfig {
        RunConfig {
            model: GraNetConfig {
                coarse_channels: [4, 6, 8],
                dense_layers: 2,
                dense_growth: 3,
                fine_channels: 4,
                fine_dense_blocks: 2,
                merge_k: 4,
                ..GraNetConfig::default()
            },
            train: TrainConfig { seed, lr: 2e-3, ..TrainConfig::default() },
            rain: RainParams::default(),
        }
    }

    fn pairs(n: usize, size: usize, seed: u64) -> Vec<ImagePair> {
        (0..n)
            .map(|i| {
                let clean = procedural_scene(size, size, seed + i as u64);
                let p = RainParams { seed: seed + 100 + i as u64, ..RainParams::default() };
                let (rainy, _) = synth_rain(&clean, &p);
                ImagePair::new(format!("img{i}"), rainy, clean).unwrap()
            })
            .collect()
    }

    #[test]
    fn loss_falls_on_a_single_pair() {
        let set = pairs(1, 16, 1);
        let mut t = Trainer::new(tiny_run(1)).unwrap();
        let losses: Vec<f64> = (0..200).map(|_| t.train_step(&set[0]).unwrap().loss as f64).collect();
        let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let early = window(&losses[..50]);
        let late = window(&losses[150..]);
        assert!(late < early * 0.8, "{early} -> {late}");
    }

    #[test]
    fn zero_heads_start_at_the_identity() {
        let set = pairs(1, 16, 3);
        let s = score_pair(&Trainer::new(tiny_run(3)).unwrap().network(), &set[0]).unwrap();
        assert_eq!(s.psnr_final, s.psnr_input);
        assert_eq!(s.psnr_coarse, s.psnr_input);

        let mut run = tiny_run(3);
        run.train.zero_init_heads = false;
        let s = score_pair(&Trainer::new(run).unwrap().network(), &set[0]).unwrap();
        assert_ne!(s.psnr_final, s.psnr_input);
    }

    #[test]
    fn identical_seeds_give_identical_curves() {
        let set = pairs(2, 16, 2);
        let curve = || {
            let mut t = Trainer::new(tiny_run(7)).unwrap();
            (0..3).flat_map(|_| t.run_epoch(&set).unwrap().steps).map(|s| s.loss).collect::<Vec<_>>()
        };
        assert_eq!(curve(), curve());
    }

    #[test]
    fn resume_reproduces_the_next_steps() {
        let set = pairs(3, 16, 3);
        let mut a = Trainer::new(tiny_run(4)).unwrap();
        a.run_epoch(&set).unwrap();
        a.end_epoch(20.0);
        let bytes = a.checkpoint().to_bytes();
        let next_a = a.run_epoch(&set).unwrap();

        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut b = Trainer::resume(tiny_run(4), ck).unwrap();
        let next_b = b.run_epoch(&set).unwrap();
        for (x, y) in next_a.steps.iter().zip(&next_b.steps) {
            assert!((x.loss - y.loss).abs() < 1e-5);
        }
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn non_finite_input_aborts_with_the_image_name() {
        let mut set = pairs(1, 16, 5);
        set[0].rainy.data[7] = f32::NAN;
        let mut t = Trainer::new(tiny_run(5)).unwrap();
        let err = t.train_step(&set[0]).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteLoss { image, step: 0, .. } if image == "img0"), "{err}");
    }

    #[test]
    fn fit_writes_csv_and_checkpoints_and_stops() {
        let dir = tempfile::tempdir().unwrap();
        let outputs = FitOutputs::beside(&dir.path().join("m.grnt"));
        let set = pairs(2, 16, 6);
        let mut run = tiny_run(6);
        run.train.max_epochs = 3;
        let mut t = Trainer::new(run.clone()).unwrap();
        let mut seen = 0;
        let res = t.fit(&set, &set, &outputs, |_| seen += 1).unwrap();
        assert_eq!(res.stop, StopReason::MaxEpochs);
        assert_eq!((seen, res.history.len()), (3, 3));
        let csv = std::fs::read_to_string(outputs.csv.as_ref().unwrap()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("3,"));
        let best = Checkpoint::load_for(outputs.best.as_ref().unwrap(), &run.model).unwrap();
        assert_eq!(best, res.best);
        let last = Checkpoint::load(outputs.last.as_ref().unwrap()).unwrap();
        assert_eq!(last.progress.epoch, 3);

        // resuming continues the numbering and appends to the same CSV
        let mut run2 = run.clone();
        run2.train.max_epochs = 5;
        let mut t2 = Trainer::resume(run2, last).unwrap();
        let res2 = t2.fit(&set, &set, &outputs, |_| {}).unwrap();
        assert_eq!(res2.history.first().unwrap().epoch, 4);
        let csv = std::fs::read_to_string(outputs.csv.as_ref().unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn stale_metric_at_floor_lr_converges() {
        let mut run = tiny_run(8);
        run.train.lr = 1e-4;
        run.train.min_lr = 1e-4;
        run.train.stop_patience = 1;
        run.train.max_epochs = 100;
        let mut t = Trainer::new(run).unwrap();
        // flat metric: first epoch sets the best, the second is stale
        t.end_epoch(10.0);
        t.end_epoch(10.0);
        assert_eq!(t.should_stop(10.0), Some(StopReason::Converged));
        assert_eq!(t.scheduler.lr, 1e-4);
    }

    #[test]
    fn mask_psnr_uses_the_true_residual() {
        let set = pairs(1, 16, 9);
        let mut net = Trainer::new(tiny_run(9)).unwrap().network();
        net.weights.zero_heads();
        let s = score_pair(&net, &set[0]).unwrap();
        // zero mask and identity output: final equals the input
        assert_eq!(s.psnr_final, s.psnr_input);
        assert_eq!(s.psnr_coarse, s.psnr_input);
        let residual: f64 = {
            let r = &set[0];
            let d: Vec<f32> = r.rainy.data.iter().zip(&r.clean.data).map(|(a, b)| a - b).collect();
            let zero = ImageF32::zeros(r.rainy.h, r.rainy.w);
            image_psnr(&zero, &ImageF32::new(r.rainy.h, r.rainy.w, d).unwrap()).unwrap()
        };
        assert_eq!(s.psnr_mask, residual);
    }
}
