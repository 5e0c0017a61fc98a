//! Teacher training, single-stage and two-stage student training, and
//! evaluation with real bitstreams.

pub mod config;
pub mod eval;
pub mod loss;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{epoch_batches, make_batch, Dataset};
use crate::entropy::QuantMode;
use crate::error::{Error, Result};
use crate::models::bundle::{CLASSIFIER, DECODER, ENCODER, PRIOR};
use crate::models::{ModelBundle, TeacherModel};
use crate::nn::optim::{cosine_lr, merge_grads};
use crate::nn::{AdamConfig, Graph, OptimState};

pub use config::{Setting, Strategy, TrainConfig};
pub use eval::{evaluate, teacher_accuracy, EvalResult, ImageRecord};
pub use loss::{loss_graph, single_stage_loss, LossValues, Objective};

/// One row of the per-epoch training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_r: Option<f64>,
    pub l_mse: Option<f64>,
    pub l_kl: Option<f64>,
    pub l_ce: Option<f64>,
    pub total: f64,
    pub eval_bpp: Option<f64>,
    pub eval_top1: Option<f64>,
}

pub const CSV_HEADER: &str = "epoch,l_R,l_MSE,l_KL,l_CE,total,eval_bpp,eval_top1";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.6},{},{}",
            self.epoch,
            f(self.l_r),
            f(self.l_mse),
            f(self.l_kl),
            f(self.l_ce),
            self.total,
            f(self.eval_bpp),
            f(self.eval_top1)
        )
    }
}

/// Appends epoch rows to a CSV file, writing the header for a new file.
pub struct CsvLog {
    file: std::fs::File,
}

impl CsvLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "{CSV_HEADER}")?;
        }
        Ok(CsvLog { file })
    }

    pub fn write(&mut self, row: &EpochLog) -> Result<()> {
        writeln!(self.file, "{}", row.csv_row())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Training failed; `last_good` holds the model as of the last completed
/// epoch when one exists.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Box<ModelBundle>>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure { error, last_good: None }
    }
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)?;
        if self.last_good.is_some() {
            write!(f, " (last good model retained)")?;
        }
        Ok(())
    }
}

/// Observer for per-epoch progress.
pub type Logger<'l> = &'l mut dyn FnMut(&EpochLog);

#[derive(Default)]
struct Running {
    n: usize,
    total: f64,
    l_r: Option<f64>,
    l_mse: f64,
    l_kl: Option<f64>,
    l_ce: Option<f64>,
}

impl Running {
    fn add(&mut self, v: &LossValues, weight: usize) {
        let w = weight as f64;
        let acc = |slot: &mut Option<f64>, x: Option<f64>| {
            if let Some(x) = x {
                *slot = Some(slot.unwrap_or(0.0) + x * w);
            }
        };
        self.n += weight;
        self.total += v.total * w;
        self.l_mse += v.l_mse * w;
        acc(&mut self.l_r, v.l_r);
        acc(&mut self.l_kl, v.l_kl);
        acc(&mut self.l_ce, v.l_ce);
    }

    fn finish(self, epoch: usize) -> EpochLog {
        let n = self.n.max(1) as f64;
        EpochLog {
            epoch,
            l_r: self.l_r.map(|x| x / n),
            l_mse: Some(self.l_mse / n),
            l_kl: self.l_kl.map(|x| x / n),
            l_ce: self.l_ce.map(|x| x / n),
            total: self.total / n,
            eval_bpp: None,
            eval_top1: None,
        }
    }
}

fn subset(data: &Dataset, limit: Option<usize>) -> Dataset {
    match limit {
        Some(n) => data.take(n),
        None => data.clone(),
    }
}

fn adam(lr: f32) -> OptimState {
    OptimState::new(AdamConfig { lr, ..AdamConfig::default() })
}

/// Trains the teacher from scratch with cross entropy.
pub fn train_teacher(
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    log: Logger,
) -> Result<TeacherModel> {
    cfg.validate_common()?;
    if cfg.epochs == 0 {
        return Err(Error::Config("teacher training needs epochs > 0".into()));
    }
    let train = subset(train, cfg.train_limit);
    let test = test.map(|t| subset(t, cfg.test_limit));
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut model = TeacherModel::new(cfg.arch.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7eac);
    let mut opt = adam(cfg.lr);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    for epoch in 1..=cfg.epochs {
        let mut run = Running::default();
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            let batch = make_batch(&train, &idx, &cfg.normalization, cfg.augment.then_some(&mut rng))?;
            let lr = cosine_lr(opt.step_count(), total_steps, cfg.lr, cfg.min_lr);
            let mut g = Graph::with_params(&model.store);
            let x = g.input(batch.images.clone());
            let (_, logits) = model.net.forward(&mut g, x)?;
            let ce = g.cross_entropy(logits, &batch.labels)?;
            let v = g.value(ce).data()[0] as f64;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("teacher loss is {v} in epoch {epoch}")));
            }
            let grads = g.backward(ce)?;
            let merged = merge_grads(grads.params());
            drop(g);
            opt.step_with_lr(&mut model.store, &merged, lr)?;
            run.add(
                &LossValues {
                    total: v,
                    l_ce: Some(v),
                    ..LossValues::default()
                },
                idx.len(),
            );
        }
        let mut row = run.finish(epoch);
        row.l_mse = None;
        let last = epoch == cfg.epochs;
        if let Some(t) = &test {
            if last || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
                row.eval_top1 = Some(teacher_accuracy(&model, t, &cfg.normalization)?);
            }
        }
        log(&row);
    }
    Ok(model)
}

/// Trainable parts per strategy stage and setting.
fn set_trainable(bundle: &mut ModelBundle, parts: &[&str]) {
    for p in [ENCODER, PRIOR, DECODER, CLASSIFIER] {
        bundle.store.set_trainable(&format!("{p}."), parts.contains(&p));
    }
    bundle.store.set_trainable("teacher.", false);
}

struct Stage<'a> {
    objective: Objective,
    epochs: usize,
    trainable: &'a [&'a str],
}

/// Trains a student against `teacher` according to `cfg` and returns the
/// bundle with frozen entropy tables.
pub fn train(
    cfg: &TrainConfig,
    teacher: &TeacherModel,
    train: &Dataset,
    test: Option<&Dataset>,
    log: Logger,
) -> std::result::Result<ModelBundle, TrainFailure> {
    train_staged(cfg, teacher, train, test, log, &mut |_, _| {})
}

/// [`train`] that also hands the bundle to `stage_end` after each stage
/// (numbered from 1).
pub fn train_staged(
    cfg: &TrainConfig,
    teacher: &TeacherModel,
    train: &Dataset,
    test: Option<&Dataset>,
    log: Logger,
    stage_end: &mut dyn FnMut(usize, &ModelBundle),
) -> std::result::Result<ModelBundle, TrainFailure> {
    cfg.validate()?;
    let train = subset(train, cfg.train_limit);
    let test = test.map(|t| subset(t, cfg.test_limit));
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()).into());
    }
    let mut bundle = ModelBundle::new(cfg.arch.clone(), cfg.seed)?;
    bundle.attach_teacher(teacher)?;
    bundle.init_classifier_from(teacher)?;
    bundle.provenance = serde_json::json!({
        "lambda": cfg.lambda,
        "strategy": cfg.strategy,
        "setting": cfg.setting,
        "epochs": cfg.epochs,
        "stage_epochs": cfg.stage_epochs,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
    })
    .as_object()
    .cloned()
    .unwrap_or_default();

    let fixed = cfg.setting == Setting::ClsFixed;
    let single_parts: &[&str] = if fixed {
        &[ENCODER, PRIOR, DECODER]
    } else {
        &[ENCODER, PRIOR, DECODER, CLASSIFIER]
    };
    let stage2_parts: &[&str] = if fixed { &[DECODER] } else { &[DECODER, CLASSIFIER] };
    let stages: Vec<Stage> = match cfg.strategy {
        Strategy::SingleStage => vec![Stage {
            objective: Objective::SingleStage { lambda: cfg.lambda },
            epochs: cfg.epochs,
            trainable: single_parts,
        }],
        Strategy::TwoStage => vec![
            Stage {
                objective: Objective::Stage1 { lambda: cfg.lambda },
                epochs: cfg.stage_epochs[0],
                trainable: &[ENCODER, PRIOR, DECODER],
            },
            Stage {
                objective: Objective::Stage2 { mse: cfg.stage2_mse },
                epochs: cfg.stage_epochs[1],
                trainable: stage2_parts,
            },
        ],
    };
    let total_epochs: usize = stages.iter().map(|s| s.epochs).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57d7);
    let mut epoch = 0;
    let mut last_good: Option<ModelBundle> = None;
    for (si, stage) in stages.iter().enumerate() {
        set_trainable(&mut bundle, stage.trainable);
        let mut opt = adam(cfg.lr);
        let total_steps = train.len().div_ceil(cfg.batch_size) as u64 * stage.epochs as u64;
        for _ in 0..stage.epochs {
            epoch += 1;
            let outcome = run_epoch(cfg, &mut bundle, &train, stage.objective, &mut opt, total_steps, &mut rng);
            let mut row = match outcome {
                Ok(run) => run.finish(epoch),
                Err(error) => {
                    return Err(TrainFailure {
                        error: Error::Numeric(format!("training diverged in epoch {epoch}: {error}")),
                        last_good: last_good.map(Box::new),
                    })
                }
            };
            let last = epoch == total_epochs;
            if let Some(t) = &test {
                if last || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
                    bundle.freeze_tables()?;
                    let r = evaluate(&bundle, t, &cfg.normalization)?;
                    row.eval_bpp = Some(r.bpp);
                    row.eval_top1 = Some(r.top1);
                }
            }
            log(&row);
            let mut snapshot = bundle.clone();
            snapshot.freeze_tables()?;
            last_good = Some(snapshot);
        }
        stage_end(si + 1, &bundle);
    }
    bundle.freeze_tables()?;
    set_trainable(&mut bundle, &[ENCODER, PRIOR, DECODER, CLASSIFIER]);
    Ok(bundle)
}

fn run_epoch(
    cfg: &TrainConfig,
    bundle: &mut ModelBundle,
    train: &Dataset,
    objective: Objective,
    opt: &mut OptimState,
    total_steps: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Running> {
    let mut run = Running::default();
    for idx in epoch_batches(train.len(), cfg.batch_size, rng) {
        let batch = make_batch(train, &idx, &cfg.normalization, cfg.augment.then_some(&mut *rng))?;
        let lr = cosine_lr(opt.step_count(), total_steps, cfg.lr, cfg.min_lr);
        let merged = {
            let mut g = Graph::with_params(&bundle.store);
            let vars = loss_graph(&mut g, bundle, &batch, objective, QuantMode::Noise, rng)?;
            run.add(&vars.values(&g), idx.len());
            let grads = g.backward(vars.total)?;
            merge_grads(grads.params())
        };
        opt.step_with_lr(&mut bundle.store, &merged, lr)?;
    }
    Ok(run)
}
