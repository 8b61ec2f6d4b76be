//! Mini-batch Soft-IoU training with per-epoch validation, best/last
//! checkpoints and exact resume at epoch boundaries.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::{predict_mask, EvalReport, MatchRule, DEFAULT_MATCH_RADIUS};
use crate::network::{Mode, S2cpModel};
use crate::scalar::Scalar;
use crate::synth::{mix_seed, Sample};
use crate::tensor::{soft_iou_loss, Adam, AdamConfig, Checkpoint, Graph, Record, Tensor};

pub const LOG_HEADER: &str = "epoch,step,loss,val_iou,val_pd,val_fa";

/// Record listing the domains a checkpoint was trained on.
pub const DOMAINS_RECORD: &str = "train.domains";

/// Source domains stored by [`Trainer::model_checkpoint`], if any.
pub fn checkpoint_domains(ck: &Checkpoint) -> Option<Vec<usize>> {
    ck.get(DOMAINS_RECORD)
        .map(|r| r.to_vec::<f64>().into_iter().map(|d| d as usize).collect())
}

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub threshold: f64,
    pub match_radius: f64,
    pub rule: MatchRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 8,
            adam: AdamConfig::default(),
            seed: 0,
            threshold: 0.5,
            match_radius: DEFAULT_MATCH_RADIUS,
            rule: MatchRule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Invalid("batch must be at least 1".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Invalid(format!("lr = {} must be finite and >= 0", self.adam.lr)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Invalid(format!("threshold = {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// One line of the training log; validation fields only on an epoch's last step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub val: Option<(f64, f64, f64)>,
}

impl LogRow {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},{}", self.epoch, self.step, self.loss);
        match self.val {
            Some((iou, pd, fa)) => write!(s, ",{iou},{pd},{fa}").unwrap(),
            None => s.push_str(",,,"),
        }
        s
    }
}

/// Stacks samples into `(N, 1, H, W)` image and mask tensors.
pub fn batch_tensors<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let x: Vec<Tensor<T>> = samples.iter().map(|s| s.image.to_tensor()).collect();
    let y: Vec<Tensor<T>> = samples.iter().map(|s| s.mask.to_image().to_tensor()).collect();
    Ok((Tensor::stack(&x)?, Tensor::stack(&y)?))
}

/// Eval-mode probability maps, one per image. Chunks run in parallel on
/// clones of the model; eval forward is per-sample, so chunking does not
/// change the numbers.
pub fn predict_images<T: Scalar>(model: &S2cpModel<T>, images: &[GrayImage]) -> Result<Vec<GrayImage>> {
    let chunks: Vec<Vec<GrayImage>> = images
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let mut m = model.clone();
            let x: Vec<Tensor<T>> = chunk.iter().map(|i| i.to_tensor()).collect();
            let prob = m.predict(&Tensor::stack(&x)?)?;
            Ok(crate::metrics::prob_maps(&prob))
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn evaluate<T: Scalar>(
    model: &S2cpModel<T>,
    name: &str,
    samples: &[Sample],
    threshold: f64,
    radius: f64,
    rule: MatchRule,
) -> Result<(EvalReport, Vec<GrayImage>)> {
    let images: Vec<GrayImage> = samples.iter().map(|s| s.image.clone()).collect();
    let probs = predict_images(model, &images)?;
    let preds = probs.iter().map(|p| predict_mask(p, threshold)).collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((EvalReport::compute(name, &preds, &gts, radius, rule)?, probs))
}

/// Training state: model, optimizer, domain-id mapping and progress.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub model: S2cpModel<T>,
    pub adam: Adam<T>,
    pub config: TrainConfig,
    /// Source domain ids in prototype order.
    pub domains: Vec<usize>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_iou: f64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: S2cpModel<T>, config: TrainConfig, domains: &[usize]) -> Result<Self> {
        config.validate()?;
        let mut domains = domains.to_vec();
        domains.sort_unstable();
        domains.dedup();
        if model.config.ssr && model.config.ssr_domains != domains.len() {
            return Err(Error::Invalid(format!(
                "model keeps {} style prototypes per site but training has {} source domains",
                model.config.ssr_domains,
                domains.len()
            )));
        }
        let adam = Adam::new(&model.store, config.adam);
        Ok(Trainer {
            model,
            adam,
            config,
            domains,
            epoch: 0,
            best_iou: f64::NEG_INFINITY,
        })
    }

    fn domain_index(&self, id: usize) -> Result<usize> {
        self.domains
            .binary_search(&id)
            .map_err(|_| Error::Invalid(format!("sample from domain {id}, not among sources {:?}", self.domains)))
    }

    /// One optimizer step on the given samples; returns the loss.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<f64> {
        let (x, y) = batch_tensors::<T>(batch)?;
        let ids = batch.iter().map(|s| self.domain_index(s.domain)).collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let xv = g.constant(x)?;
        let yv = g.constant(y)?;
        let pass = self.model.forward(&mut g, xv, Mode::Train, Some(&ids))?;
        let loss = soft_iou_loss(&mut g, pass.prob, yv)?;
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "train_loss" });
        }
        g.backward(loss)?;
        let grads = g.param_grads(&self.model.store);
        self.adam.step(&mut self.model.store, &grads)?;
        Ok(value)
    }

    /// Sample order for an epoch; depends only on the seed and epoch number.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, epoch as u64 + 1));
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        order
    }

    /// Runs the next epoch (partial last batch kept) and validates. Returns
    /// the log rows and the validation report.
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<(Vec<LogRow>, EvalReport)> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Invalid("training and validation sets must be non-empty".into()));
        }
        if self.config.batch > train.len() {
            return Err(Error::Invalid(format!(
                "batch {} larger than the {} training samples",
                self.config.batch,
                train.len()
            )));
        }
        let epoch = self.epoch + 1;
        let order = self.epoch_order(epoch, train.len());
        let mut rows = Vec::new();
        for (step, idx) in order.chunks(self.config.batch).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let loss = self.step(&batch)?;
            log::debug!("epoch {epoch} step {} loss {loss:.5}", step + 1);
            rows.push(LogRow {
                epoch,
                step: step + 1,
                loss,
                val: None,
            });
        }
        let c = &self.config;
        let (report, _) = evaluate(&self.model, "val", val, c.threshold, c.match_radius, c.rule)?;
        rows.last_mut().expect("at least one step").val = Some((report.iou, report.pd, report.fa));
        self.epoch = epoch;
        Ok((rows, report))
    }

    /// Model checkpoint tagged with the source domain ids.
    pub fn model_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        let ids: Vec<f64> = self.domains.iter().map(|&d| d as f64).collect();
        ck.push(Record::from_slice(DOMAINS_RECORD, &ids));
        ck
    }

    /// Model checkpoint plus optimizer moments and progress counters.
    pub fn state_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model_checkpoint();
        for (id, name, _) in self.model.store.iter() {
            ck.push(Record::from_slice(format!("adam.m.{name}"), &self.adam.m[id.index()]));
            ck.push(Record::from_slice(format!("adam.v.{name}"), &self.adam.v[id.index()]));
        }
        ck.push(Record::from_slice("adam.t", &[self.adam.t as f64]));
        ck.push(Record::from_slice("train.epoch", &[self.epoch as f64]));
        ck.push(Record::from_slice("train.best_iou", &[self.best_iou]));
        ck
    }

    /// Restores a [`Self::state_checkpoint`] into a trainer built with the same configs.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.model.load_checkpoint(ck)?;
        for (id, name, value) in self.model.store.iter() {
            let m: Vec<T> = ck.require(&format!("adam.m.{name}"))?.to_vec();
            let v: Vec<T> = ck.require(&format!("adam.v.{name}"))?.to_vec();
            if m.len() != value.len() || v.len() != value.len() {
                return Err(Error::Checkpoint(format!("{name}: optimizer moments of wrong length")));
            }
            self.adam.m[id.index()] = m;
            self.adam.v[id.index()] = v;
        }
        let scalar = |k: &str| -> Result<f64> {
            ck.require(k)?
                .to_vec::<f64>()
                .first()
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("{k}: empty record")))
        };
        self.adam.t = scalar("adam.t")? as u64;
        self.epoch = scalar("train.epoch")? as usize;
        self.best_iou = scalar("train.best_iou")?;
        Ok(())
    }
}

/// Files a training run writes into its output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunFiles {
    pub log: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        RunFiles {
            log: dir.join("train_log.csv"),
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
        }
    }
}

/// Trains until `config.epochs` epochs are complete, appending to the log
/// and refreshing `last.ckpt` every epoch and `best.ckpt` whenever the
/// validation IoU improves. A trainer restored from `last.ckpt` continues
/// where it stopped.
pub fn fit<T: Scalar>(trainer: &mut Trainer<T>, train: &[Sample], val: &[Sample], files: &RunFiles) -> Result<()> {
    use std::io::Write;
    let fresh = trainer.epoch == 0;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&files.log)
        .map_err(|e| Error::io(&files.log, e))?;
    if fresh {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&files.log, e))?;
    }
    while trainer.epoch < trainer.config.epochs {
        let (rows, report) = trainer.run_epoch(train, val)?;
        for r in &rows {
            writeln!(log, "{}", r.csv_row()).map_err(|e| Error::io(&files.log, e))?;
        }
        log.flush().map_err(|e| Error::io(&files.log, e))?;
        let mean = rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
        log::info!(
            "epoch {}/{}: loss {mean:.4}, val IoU {:.4}, Pd {:.4}, Fa {:.1}e-6",
            trainer.epoch,
            trainer.config.epochs,
            report.iou,
            report.pd,
            report.fa
        );
        // compared at checkpoint precision so a resumed run makes the same choices
        let iou = report.iou as f32 as f64;
        if iou > trainer.best_iou {
            trainer.best_iou = iou;
            trainer.model_checkpoint().save(&files.best)?;
        }
        trainer.state_checkpoint().save(&files.last)?;
    }
    Ok(())
}
