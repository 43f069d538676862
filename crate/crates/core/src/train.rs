//! Training and evaluation driver.
//!
//! Every epoch draws its shuffle and augmentation from a ChaCha8 stream
//! keyed by `(seed, epoch)`, so a run resumed from a checkpoint sees the
//! same data order as an uninterrupted one.

use std::fmt::Write as _;
use std::time::Instant;

use cresnet_tensor::{BnMode, Scalar, Sgd, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, make_batch, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_every: usize,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Independent runs for the mean/std summary.
    pub runs: usize,
    /// Epochs pooled per run by the summary.
    pub summary_last: usize,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub augment: bool,
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    /// 500 epochs, batch 32, lr 0.01 divided by 10 every 150 epochs, SGD
    /// with momentum 0.9 and weight decay 0.0005, three runs summarized over
    /// their last 20 epochs.
    pub fn paper() -> Self {
        Self {
            lr0: 0.01,
            lr_decay_every: 150,
            lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 32,
            epochs: 500,
            seed: 0,
            precision: Precision::F32,
            runs: 3,
            summary_last: 20,
            train_subset: None,
            test_subset: None,
            augment: true,
            checkpoint_every: Some(50),
        }
    }

    /// Same optimizer and schedule on a 5000/1000 subset for a few epochs.
    pub fn desk() -> Self {
        Self {
            epochs: 5,
            runs: 1,
            summary_last: 1,
            train_subset: Some(5000),
            test_subset: Some(1000),
            checkpoint_every: None,
            ..Self::paper()
        }
    }

    /// Batch size used for per-epoch evaluation.
    pub fn eval_batch_size(&self) -> usize {
        self.batch_size.max(100)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("lr0", self.lr0), ("lr_factor", self.lr_factor)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 || self.runs == 0 {
            return bad("epochs, batch_size, lr_decay_every and runs must be at least 1".into());
        }
        if self.summary_last == 0 || self.summary_last > self.epochs {
            return bad(format!(
                "summary_last must lie in [1, epochs], got {} with {} epochs",
                self.summary_last, self.epochs
            ));
        }
        Ok(())
    }
}

/// `lr0 * lr_factor ^ floor(epoch / lr_decay_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_error: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub run_id: String,
    pub arch: String,
    pub dataset: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_error(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_error)
    }

    pub fn wall_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    /// Equal losses, errors and rates, ignoring timings.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                (a.epoch, a.lr.to_bits(), a.train_loss.to_bits(), a.test_error.to_bits())
                    == (b.epoch, b.lr.to_bits(), b.train_loss.to_bits(), b.test_error.to_bits())
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,test_error,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{:.3}", e.epoch, e.lr, e.train_loss, e.test_error, e.seconds);
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            run_id: &'a str,
            arch: &'a str,
            dataset: &'a str,
            config: &'a TrainConfig,
            epochs_completed: usize,
            final_test_error: Option<f64>,
            wall_seconds: f64,
            summary: Option<RunSummary>,
        }
        let k = self.config.summary_last.min(self.epochs.len()).max(1);
        let doc = Doc {
            run_id: &self.run_id,
            arch: &self.arch,
            dataset: &self.dataset,
            config: &self.config,
            epochs_completed: self.epochs.len(),
            final_test_error: self.final_error(),
            wall_seconds: self.wall_seconds(),
            summary: summarize_runs(std::slice::from_ref(self), k).ok(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub std: f64,
    pub n: usize,
}

/// Pools the last `last_k` test errors of every run.
pub fn summarize_runs(logs: &[TrainLog], last_k: usize) -> Result<RunSummary> {
    let mut pooled = Vec::with_capacity(logs.len() * last_k);
    for (run, log) in logs.iter().enumerate() {
        if log.epochs.len() < last_k {
            return Err(Error::InsufficientEpochs {
                run,
                required: last_k,
                available: log.epochs.len(),
            });
        }
        pooled.extend(log.epochs[log.epochs.len() - last_k..].iter().map(|e| e.test_error));
    }
    let n = pooled.len();
    if n == 0 {
        return Err(Error::Config("nothing to summarize".into()));
    }
    let mean = pooled.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(RunSummary { mean, std, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
}

impl Evaluation {
    pub fn error(&self) -> f64 {
        (self.total - self.correct) as f64 / self.total as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 error with eval-mode BN and no augmentation. The model's BN mode
/// is restored afterwards.
pub fn evaluate<T: Scalar>(
    model: &mut Model<T>,
    ds: &Dataset,
    aug: &AugmentConfig,
    batch_size: usize,
) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let prev = model.mode();
    model.set_mode(BnMode::Eval);
    let mut correct = 0;
    let result = (|| {
        for idx in batches(ds.len(), batch_size, None) {
            let (x, labels) = make_batch::<T, ChaCha8Rng>(ds, &idx, aug, None);
            let logits = model.predict(x)?;
            let k = model.classes();
            correct += logits
                .data()
                .chunks_exact(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
        }
        Ok(())
    })();
    model.set_mode(prev);
    result.map(|()| Evaluation {
        correct,
        total: ds.len(),
    })
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Model, optimizer state and log of one run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: Sgd<T>,
    pub config: TrainConfig,
    pub log: TrainLog,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, dataset: &str) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(
            model.params(),
            T::from_f64_lossy(config.momentum),
            T::from_f64_lossy(config.weight_decay),
        );
        let log = TrainLog {
            run_id: format!("{}-{}-seed{}", model.spec().name, dataset, config.seed),
            arch: model.spec().name.clone(),
            dataset: dataset.into(),
            config: config.clone(),
            epochs: Vec::new(),
        };
        Ok(Self {
            model,
            optimizer,
            config,
            log,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.log.epochs.len()
    }

    /// One SGD step; returns the batch loss.
    pub fn step(&mut self, x: cresnet_tensor::Tensor<T>, labels: &[usize], lr: f64, at: (usize, usize)) -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.input(x);
        let logits = self.model.forward(&mut tape, input)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            let layer = tape
                .first_non_finite()
                .and_then(|(_, l)| l)
                .unwrap_or("loss")
                .to_string();
            return Err(Error::NonFiniteLoss {
                epoch: at.0,
                batch: at.1,
                layer,
            });
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        let params = self.model.params_mut();
        params.zero_grad();
        grads.accumulate_into(params)?;
        self.optimizer.step(params, T::from_f64_lossy(lr));
        Ok(value)
    }

    /// Trains one epoch and returns the mean training loss.
    pub fn train_epoch(&mut self, train: &Dataset, aug: &AugmentConfig) -> Result<f64> {
        let epoch = self.epochs_done();
        let lr = lr_at(epoch, &self.config);
        let mut rng = epoch_rng(self.config.seed, epoch);
        let order = batches(train.len(), self.config.batch_size, Some(rand::Rng::random(&mut rng)));
        self.model.set_mode(BnMode::Train);
        let (mut total, mut seen) = (0.0, 0usize);
        for (b, idx) in order.enumerate() {
            let (x, labels) = if self.config.augment {
                make_batch::<T, _>(train, &idx, aug, Some(&mut rng))
            } else {
                make_batch::<T, ChaCha8Rng>(train, &idx, aug, None)
            };
            let loss = self.step(x, &labels, lr, (epoch, b))?;
            total += loss * idx.len() as f64;
            seen += idx.len();
        }
        Ok(total / seen as f64)
    }

    /// Trains and evaluates one epoch, appending to the log.
    pub fn run_epoch(&mut self, train: &Dataset, test: &Dataset, aug: &AugmentConfig) -> Result<&EpochRecord> {
        let start = Instant::now();
        let epoch = self.epochs_done();
        let train_loss = self.train_epoch(train, aug)?;
        let eval = evaluate(&mut self.model, test, aug, self.config.eval_batch_size())?;
        self.log.epochs.push(EpochRecord {
            epoch,
            lr: lr_at(epoch, &self.config),
            train_loss,
            test_error: eval.error(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(self.log.epochs.last().unwrap())
    }

    /// Runs until `config.epochs` epochs are logged, calling `after_epoch`
    /// after each one.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        aug: &AugmentConfig,
        mut after_epoch: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        while self.epochs_done() < self.config.epochs {
            self.run_epoch(train, test, aug)?;
            after_epoch(self)?;
        }
        Ok(())
    }
}

/// Trains `model` for `cfg.epochs` epochs on the configured subsets.
pub fn train<T: Scalar>(
    model: Model<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    aug: &AugmentConfig,
    cfg: &TrainConfig,
) -> Result<(Model<T>, TrainLog)> {
    let train_set = cfg.train_subset.map_or_else(|| train_set.clone(), |n| train_set.subset(n));
    let test_set = cfg.test_subset.map_or_else(|| test_set.clone(), |n| test_set.subset(n));
    let mut t = Trainer::new(model, cfg.clone(), &train_set.name)?;
    t.run(&train_set, &test_set, aug, |_| Ok(()))?;
    Ok((t.model, t.log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(errors: &[f64]) -> TrainLog {
        TrainLog {
            run_id: "r".into(),
            arch: "a".into(),
            dataset: "d".into(),
            config: TrainConfig::desk(),
            epochs: errors
                .iter()
                .enumerate()
                .map(|(i, &e)| EpochRecord {
                    epoch: i,
                    lr: 0.01,
                    train_loss: 1.0,
                    test_error: e,
                    seconds: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn schedule_points() {
        let c = TrainConfig::paper();
        assert_eq!(lr_at(0, &c), 0.01);
        assert!((lr_at(150, &c) - 0.001).abs() < 1e-15);
        assert_eq!(lr_at(299, &c), lr_at(150, &c));
        assert!((lr_at(300, &c) - 0.0001).abs() < 1e-16);
    }

    #[test]
    fn constant_runs_summarize_exactly() {
        let s = summarize_runs(&[log(&[0.1; 20]), log(&[0.1; 20]), log(&[0.1; 20])], 20).unwrap();
        assert_eq!(s.n, 60);
        assert!((s.mean - 0.1).abs() < 1e-15 && s.std < 1e-15, "{s:?}");
    }

    #[test]
    fn three_level_runs_use_sample_std() {
        let s = summarize_runs(&[log(&[0.1; 2]), log(&[0.2; 2]), log(&[0.3; 2])], 2).unwrap();
        assert!((s.mean - 0.2).abs() < 1e-15);
        // six values at 0.1, 0.1, 0.2, 0.2, 0.3, 0.3: sum of squares 0.04 over 5
        assert!((s.std - (0.04f64 / 5.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn insufficient_epochs_named() {
        let err = summarize_runs(&[log(&[0.1; 20]), log(&[0.1; 5])], 20).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientEpochs {
                run: 1,
                required: 20,
                available: 5
            }
        ));
    }

    #[test]
    fn error_plus_accuracy_is_one() {
        for total in 1..=500 {
            for correct in 0..=total {
                let e = Evaluation { correct, total };
                assert_eq!(e.error() + e.accuracy(), 1.0, "{correct}/{total}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::paper().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        let bad = TrainConfig {
            lr0: 0.0,
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn schedule_is_a_non_increasing_staircase(epoch in 0usize..2000, every in 1usize..300) {
            let cfg = TrainConfig { lr_decay_every: every, ..TrainConfig::paper() };
            let now = lr_at(epoch, &cfg);
            let next = lr_at(epoch + 1, &cfg);
            proptest::prop_assert!(next <= now);
            if (epoch + 1) % every == 0 {
                proptest::prop_assert!((next - now * 0.1).abs() <= 1e-15 * now);
            } else {
                proptest::prop_assert_eq!(next, now);
            }
        }
    }
}
