//! Training: augmentation, the per-view loss combination and the epoch loop.
//!
//! For filtered view `i` the step loss is
//! `alpha * L(expert 6 on the original) + (1 - alpha) * L(expert i on view i)`.
//! Only the hypernetwork and the head are updated.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::AdapterGrads;
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointParts};
use crate::dataset::{Dataset, LabeledSample};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, MetricsReport};
use crate::filterbank::{FilterBank, NUM_GROUPS};
use crate::hyperlora::{HyperNetwork, Site, ORIGINAL_EXPERT};
use crate::imaging::Image;
use crate::model::{HyperDetModel, ModelConfig, Trainable};
use crate::nn::sigmoid;
use crate::objective::{bce_logit_grad, bce_with_logit, total_loss, LossConfig};
use crate::optim::Adam;
use crate::tensors::sum_squares;

/// Which filtered experts a batch trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// One expert per batch, cycling 1..=5.
    #[default]
    RoundRobin,
    /// All five experts on every batch, losses summed.
    Full,
}

/// How the per-view losses of a batch become optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    /// One step on the summed loss.
    #[default]
    Accumulate,
    /// One step per filtered view, in expert order.
    StepPerView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub p_blur: f64,
    pub p_jpeg: f64,
    /// Inclusive range the blur sigma is drawn from.
    pub blur_sigma: [f64; 2],
    /// Inclusive range the JPEG quality is drawn from.
    pub jpeg_quality: [u8; 2],
    pub seed: u64,
    pub dataset_root: Option<PathBuf>,
    pub train_split: String,
    pub eval_split: Option<String>,
    pub checkpoint_dir: PathBuf,
    pub schedule: Schedule,
    pub update: UpdateMode,
    /// Threads for data preparation and per-sample gradients; 0 = all cores.
    pub workers: usize,
    /// Evaluate the train (and eval) split after the last epoch.
    pub final_eval: bool,
    pub resume_from: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 5,
            batch_size: 16,
            alpha: 0.1,
            p_blur: 0.1,
            p_jpeg: 0.1,
            blur_sigma: [0.0, 2.0],
            jpeg_quality: [60, 95],
            seed: 0,
            dataset_root: None,
            train_split: "train".into(),
            eval_split: None,
            checkpoint_dir: PathBuf::from("checkpoints/latest"),
            schedule: Schedule::RoundRobin,
            update: UpdateMode::Accumulate,
            workers: 0,
            final_eval: true,
            resume_from: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (key, p) in [("p_blur", self.p_blur), ("p_jpeg", self.p_jpeg)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, format!("must lie in [0, 1], got {p}")));
            }
        }
        self.loss().validate()?;
        let [s0, s1] = self.blur_sigma;
        if !(s0 >= 0.0 && s0 <= s1 && s1.is_finite()) {
            return Err(Error::config("blur_sigma", format!("need 0 <= lo <= hi, got [{s0}, {s1}]")));
        }
        let [q0, q1] = self.jpeg_quality;
        if !(1 <= q0 && q0 <= q1 && q1 <= 100) {
            return Err(Error::config("jpeg_quality", format!("need 1 <= lo <= hi <= 100, got [{q0}, {q1}]")));
        }
        if self.train_split.is_empty() {
            return Err(Error::config("train_split", "must not be empty"));
        }
        self.model.validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            ..LossConfig::default()
        }
    }

    /// Configuration as echoed into artifacts. The output location is left
    /// out so that runs differing only in where they write stay comparable.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("checkpoint_dir");
        }
        v
    }
}

/// Optional blur, then optional JPEG, each with its own probability. The
/// four random draws happen unconditionally so streams stay aligned.
pub fn augment(image: &Image, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Image> {
    let blur = rng.random::<f64>() < cfg.p_blur;
    let sigma = rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
    let jpeg = rng.random::<f64>() < cfg.p_jpeg;
    let quality = rng.random_range(cfg.jpeg_quality[0]..=cfg.jpeg_quality[1]);
    let mut out = if blur { image.gaussian_blur(sigma) } else { image.clone() };
    if jpeg {
        out = out.jpeg_roundtrip(quality).map_err(|e| Error::AugmentCodec(e.to_string()))?;
    }
    Ok(out)
}

/// Seed for one sample in one epoch.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A sample turned into backbone inputs: one patch matrix per expert
/// (index `e - 1` for expert `e`).
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub patches: Vec<Array2<f64>>,
    pub label: f64,
}

pub fn prepare_sample(model: &HyperDetModel, bank: &FilterBank, image: &Image, label: u8) -> Result<PreparedSample> {
    let views = model.views(image, bank)?;
    let patches = views
        .iter()
        .map(|v| model.prepare(&v.pixels))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedSample {
        patches,
        label: f64::from(label),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub experts: Vec<usize>,
    /// Mean BCE of expert 6 on the original views (before the update).
    pub loss_original: f64,
    /// Mean BCE of each trained expert on its view, aligned with `experts`.
    pub loss_filtered: Vec<f64>,
    /// Sum over trained experts of the weighted loss.
    pub total_loss: f64,
    /// L2 norm of the applied gradient(s).
    pub grad_norm: f64,
    pub updates: usize,
    /// Experts whose loss terms contributed gradients.
    pub backpropagated: Vec<usize>,
    /// Original-view predictions on the correct side of 0.5, before the update.
    pub correct_original: usize,
}

/// Batch losses and the gradient of `sum_b weight_b * mean BCE_b` over the
/// branches `(expert, weight)`. Zero-weight branches run forward only.
pub struct BranchOutcome {
    /// Mean BCE per branch.
    pub losses: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
    pub grads: Trainable,
}

struct SampleGrads {
    logits: Vec<f64>,
    head_w: ndarray::Array1<f64>,
    head_b: f64,
    adapters: Vec<Option<AdapterGrads>>,
}

pub fn branch_gradients(model: &HyperDetModel, batch: &[PreparedSample], branches: &[(usize, f64)]) -> Result<BranchOutcome> {
    if batch.is_empty() {
        return Err(Error::Label("empty batch".into()));
    }
    let n = batch.len() as f64;
    let adapters = branches
        .iter()
        .map(|&(e, _)| model.adapters(e))
        .collect::<Result<Vec<_>>>()?;
    let feature_dim = model.trainable.head.weight.len();

    let per_sample: Vec<SampleGrads> = batch
        .par_iter()
        .map(|s| -> Result<SampleGrads> {
            let mut out = SampleGrads {
                logits: Vec::with_capacity(branches.len()),
                head_w: ndarray::Array1::zeros(feature_dim),
                head_b: 0.0,
                adapters: Vec::with_capacity(branches.len()),
            };
            for (&(e, w), ad) in branches.iter().zip(&adapters) {
                let x = &s.patches[e - 1];
                if w == 0.0 {
                    out.logits.push(model.logit_prepared(x, ad)?);
                    out.adapters.push(None);
                    continue;
                }
                let (z, g) = model.pass_backward(x, ad, |z| w / n * bce_logit_grad(z, s.label))?;
                out.logits.push(z);
                out.head_w += &g.head.weight;
                out.head_b += g.head.bias[0];
                out.adapters.push(Some(g.adapters));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    // ordered reduction keeps results independent of the thread count
    let mut grads = model.trainable.zeros_like();
    let mut summed: Vec<Option<AdapterGrads>> = vec![None; branches.len()];
    let mut logits = vec![Vec::with_capacity(batch.len()); branches.len()];
    for sg in per_sample {
        grads.head.weight += &sg.head_w;
        grads.head.bias[0] += sg.head_b;
        for (b, z) in sg.logits.into_iter().enumerate() {
            logits[b].push(z);
        }
        for (b, ag) in sg.adapters.into_iter().enumerate() {
            let Some(ag) = ag else { continue };
            match &mut summed[b] {
                None => summed[b] = Some(ag),
                Some(acc) => {
                    for (slot, add) in acc.iter_mut().zip(ag) {
                        for (dst, src) in slot.iter_mut().zip(add) {
                            if let (Some((da, db)), Some((sa, sb))) = (dst.as_mut(), src) {
                                *da += &sa;
                                *db += &sb;
                            }
                        }
                    }
                }
            }
        }
    }
    for (b, &(e, _)) in branches.iter().enumerate() {
        let Some(acc) = &summed[b] else { continue };
        for (layer, slot) in acc.iter().enumerate() {
            for (k, g) in slot.iter().enumerate() {
                if let Some((da, db)) = g {
                    let site = Site { layer, position: k + 1 };
                    model
                        .trainable
                        .hyper
                        .backward_lora(e, site, da.view(), db.view(), &mut grads.hyper)?;
                }
            }
        }
    }
    let losses = logits
        .iter()
        .map(|zs| zs.iter().zip(batch).map(|(&z, s)| bce_with_logit(z, s.label)).sum::<f64>() / n)
        .collect();
    Ok(BranchOutcome { losses, logits, grads })
}

fn frozen_predicate(cfg: &ModelConfig) -> impl Fn(&str) -> bool {
    let freeze = cfg.hyper.freeze_embeddings;
    move |name: &str| freeze && HyperNetwork::is_embedding_tensor(name)
}

fn correct(logits: &[f64], batch: &[PreparedSample]) -> usize {
    logits
        .iter()
        .zip(batch)
        .filter(|(&z, s)| (sigmoid(z) >= 0.5) == (s.label == 1.0))
        .count()
}

fn check_finite(losses: &[f64]) -> Result<()> {
    if let Some(bad) = losses.iter().find(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            message: format!("non-finite loss {bad}"),
            dump: None,
        });
    }
    Ok(())
}

/// One training step on `batch` for the filtered `experts` (each in 1..=5).
///
/// In accumulate mode the original-view branch runs once with weight
/// `alpha * |experts|`, each filtered branch with `1 - alpha`, and a single
/// update is applied. In step-per-view mode each expert gets its own update.
pub fn train_step(
    model: &mut HyperDetModel,
    optimizer: &mut Adam,
    batch: &[PreparedSample],
    experts: &[usize],
    cfg: &TrainConfig,
) -> Result<StepReport> {
    if experts.is_empty() {
        return Err(Error::config("experts", "need at least one filtered expert"));
    }
    if let Some(&bad) = experts.iter().find(|&&e| e == 0 || e > NUM_GROUPS) {
        return Err(Error::UnknownExpert(bad));
    }
    let loss_cfg = cfg.loss();
    loss_cfg.validate()?;
    let alpha = loss_cfg.alpha;
    let frozen = frozen_predicate(model.config());
    let backpropagated = |ws: &[(usize, f64)]| ws.iter().filter(|(_, w)| *w != 0.0).map(|(e, _)| *e).collect::<Vec<_>>();

    match cfg.update {
        UpdateMode::Accumulate => {
            let mut branches = vec![(ORIGINAL_EXPERT, alpha * experts.len() as f64)];
            branches.extend(experts.iter().map(|&e| (e, 1.0 - alpha)));
            let out = branch_gradients(model, batch, &branches)?;
            check_finite(&out.losses)?;
            let lo = out.losses[0];
            let lf = out.losses[1..].to_vec();
            let total = lf
                .iter()
                .map(|&l| total_loss(lo, l, &loss_cfg))
                .sum::<Result<f64>>()?;
            let grad_norm = sum_squares(&out.grads).sqrt();
            optimizer.step(&mut model.trainable, &out.grads, &frozen);
            Ok(StepReport {
                experts: experts.to_vec(),
                loss_original: lo,
                loss_filtered: lf,
                total_loss: total,
                grad_norm,
                updates: 1,
                backpropagated: backpropagated(&branches),
                correct_original: correct(&out.logits[0], batch),
            })
        }
        UpdateMode::StepPerView => {
            let mut report = StepReport {
                experts: experts.to_vec(),
                loss_original: 0.0,
                loss_filtered: Vec::new(),
                total_loss: 0.0,
                grad_norm: 0.0,
                updates: 0,
                backpropagated: Vec::new(),
                correct_original: 0,
            };
            let mut sq = 0.0;
            for &e in experts {
                let branches = [(ORIGINAL_EXPERT, alpha), (e, 1.0 - alpha)];
                let out = branch_gradients(model, batch, &branches)?;
                check_finite(&out.losses)?;
                if report.updates == 0 {
                    report.loss_original = out.losses[0];
                    report.correct_original = correct(&out.logits[0], batch);
                }
                report.loss_filtered.push(out.losses[1]);
                report.total_loss += total_loss(out.losses[0], out.losses[1], &loss_cfg)?;
                sq += sum_squares(&out.grads);
                optimizer.step(&mut model.trainable, &out.grads, &frozen);
                report.updates += 1;
                for p in backpropagated(&branches) {
                    if !report.backpropagated.contains(&p) {
                        report.backpropagated.push(p);
                    }
                }
            }
            report.grad_norm = sq.sqrt();
            Ok(report)
        }
    }
}

/// Filtered experts trained by global batch number `batch_index`.
pub fn experts_for_batch(schedule: Schedule, batch_index: usize) -> Vec<usize> {
    match schedule {
        Schedule::RoundRobin => vec![batch_index % NUM_GROUPS + 1],
        Schedule::Full => (1..=NUM_GROUPS).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total_loss: f64,
    pub mean_loss_original: f64,
    pub mean_loss_filtered: f64,
    /// Share of original-view predictions on the right side of 0.5 during the epoch.
    pub running_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub log: Vec<EpochRecord>,
    pub train_report: Option<MetricsReport>,
    pub eval_report: Option<MetricsReport>,
}

/// Runs training and returns the checkpoint directory.
pub fn train(cfg: &TrainConfig) -> Result<PathBuf> {
    train_with_summary(cfg).map(|s| s.checkpoint)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))
}

pub fn train_with_summary(cfg: &TrainConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let root = cfg
        .dataset_root
        .as_ref()
        .ok_or_else(|| Error::config("dataset_root", "required for training"))?;
    let threads = pool(cfg.workers)?;
    threads.install(|| run(cfg, root))
}

fn run(cfg: &TrainConfig, root: &Path) -> Result<TrainSummary> {
    let data = Dataset::load(root, &cfg.train_split)?;
    let eval_data = cfg
        .eval_split
        .as_deref()
        .map(|split| Dataset::load(root, split))
        .transpose()?;

    let (mut model, mut optimizer, bank, start_epoch, mut log) = match &cfg.resume_from {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            if ck.model.config() != &cfg.model {
                return Err(Error::config("model", "differs from the model of the resumed checkpoint"));
            }
            let mut opt = ck.optimizer;
            opt.lr = cfg.learning_rate;
            (ck.model, opt, ck.bank, ck.manifest.epoch, ck.log)
        }
        None => {
            let model = HyperDetModel::new(cfg.model.clone(), cfg.seed)?;
            let opt = Adam::new(&model.trainable, cfg.learning_rate);
            (model, opt, FilterBank::builtin(), 0, Vec::new())
        }
    };

    let n = data.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    for epoch in start_epoch + 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, usize::MAX)));
        let (mut tot, mut lo, mut lf, mut hits, mut seen) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let global = (epoch - 1) * batches_per_epoch + b;
            let experts = experts_for_batch(cfg.schedule, global);
            let batch = prepare_batch(&model, &bank, &data.samples, chunk, cfg, epoch)?;
            let report = match train_step(&mut model, &mut optimizer, &batch, &experts, cfg) {
                Ok(r) => r,
                Err(Error::Divergence { message, .. }) => {
                    let dump = write_divergence_dump(cfg, epoch, global, chunk, &data.samples, &message);
                    return Err(Error::Divergence { message, dump });
                }
                Err(e) => return Err(e),
            };
            tot += report.total_loss;
            lo += report.loss_original;
            lf += report.loss_filtered.iter().sum::<f64>() / report.loss_filtered.len() as f64;
            hits += report.correct_original;
            seen += batch.len();
        }
        let steps = batches_per_epoch;
        let rec = EpochRecord {
            epoch,
            steps,
            mean_total_loss: tot / steps as f64,
            mean_loss_original: lo / steps as f64,
            mean_loss_filtered: lf / steps as f64,
            running_accuracy: 100.0 * hits as f64 / seen as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (orig {:.5}, filt {:.5}), acc {:.2}%",
            rec.mean_total_loss,
            rec.mean_loss_original,
            rec.mean_loss_filtered,
            rec.running_accuracy
        );
        log.push(rec);
    }

    let echo = cfg.echo();
    let (train_report, eval_report) = if cfg.final_eval {
        let det = DetectorModel::from_model(model.clone(), bank.clone());
        let tr = evaluate(&det, &data, None, &echo)?;
        let ev = eval_data.as_ref().map(|d| evaluate(&det, d, None, &echo)).transpose()?;
        (Some(tr), ev)
    } else {
        (None, None)
    };
    let mut metrics = BTreeMap::new();
    if let Some(last) = log.last() {
        metrics.insert("final_total_loss".to_string(), Some(last.mean_total_loss));
    }
    if let Some(r) = &train_report {
        metrics.insert("train_avg_acc".into(), Some(r.avg_acc));
        metrics.insert("train_map".into(), r.map);
    }
    if let Some(r) = &eval_report {
        metrics.insert("eval_avg_acc".into(), Some(r.avg_acc));
        metrics.insert("eval_map".into(), r.map);
    }
    let epoch = cfg.epochs.max(start_epoch);
    let hash = save_checkpoint(
        &cfg.checkpoint_dir,
        &CheckpointParts {
            model: &model,
            optimizer: &optimizer,
            bank: &bank,
            seed: cfg.seed,
            epoch,
            steps: optimizer.steps_taken(),
            config: echo,
            metrics,
            log: &log,
        },
    )?;
    Ok(TrainSummary {
        checkpoint: cfg.checkpoint_dir.clone(),
        checkpoint_hash: hash,
        log,
        train_report,
        eval_report,
    })
}

fn prepare_batch(
    model: &HyperDetModel,
    bank: &FilterBank,
    samples: &[LabeledSample],
    indices: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<PreparedSample>> {
    indices
        .par_iter()
        .map(|&i| {
            let s = &samples[i];
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, i));
            let img = augment(&s.image, cfg, &mut rng)?;
            prepare_sample(model, bank, &img, s.label)
        })
        .collect()
}

fn write_divergence_dump(
    cfg: &TrainConfig,
    epoch: usize,
    batch: usize,
    indices: &[usize],
    samples: &[LabeledSample],
    message: &str,
) -> Option<PathBuf> {
    let dump = serde_json::json!({
        "message": message,
        "epoch": epoch,
        "batch": batch,
        "samples": indices.iter().map(|&i| samples[i].path.display().to_string()).collect::<Vec<_>>(),
        "config": cfg.echo(),
    });
    fs::create_dir_all(&cfg.checkpoint_dir).ok()?;
    let path = cfg.checkpoint_dir.join("divergence.json");
    fs::write(&path, serde_json::to_string_pretty(&dump).ok()?).ok()?;
    Some(path)
}
