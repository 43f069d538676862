use std::io::Write;
use std::path::{Path, PathBuf};

use cresnet::arch::{spec_from_file, ArchitectureSpec};
use cresnet::checkpoint::{load, read_manifest};
use cresnet::cost::{analyze as cost_report, compare as cost_compare};
use cresnet::data::{self, AugmentConfig, Dataset, DatasetName, Split, DATA_DIR_ENV};
use cresnet::tensor::Scalar;
use cresnet::train::{evaluate, summarize_runs, Precision};
use cresnet::{registry, Error, Model, Result, TrainConfig, TrainLog, Trainer};
use serde::Serialize;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A registry name, or a TOML spec when `arch` names an existing file or
/// ends in `.toml`.
fn resolve(arch: &str) -> Result<ArchitectureSpec> {
    let path = Path::new(arch);
    if path.extension().is_some_and(|e| e == "toml") || path.is_file() {
        spec_from_file(path)
    } else {
        registry::get(arch)
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(io_err(p)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(io_err(Path::new("<stdout>")))
        }
    }
}

fn with_newline(mut s: String) -> String {
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

pub fn list_archs(json: bool) -> Result<()> {
    let entries = registry::entries();
    let text = if json {
        serde_json::to_string_pretty(&entries).map_err(|e| Error::Config(e.to_string()))?
    } else {
        let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
        entries
            .iter()
            .map(|e| format!("{:width$}  {:<13} {}", e.name, e.status.to_string(), e.summary))
            .collect::<Vec<_>>()
            .join("\n")
    };
    emit(&with_newline(text), None)
}

pub fn analyze(arch: &str, input_size: [usize; 2], classes: usize, csv: bool, out: Option<&Path>) -> Result<()> {
    let report = cost_report(&resolve(arch)?, input_size, classes)?;
    let text = if csv { report.to_csv() } else { report.to_json() };
    emit(&with_newline(text), out)
}

pub fn compare(subject: &str, baseline: &str, input_size: [usize; 2], classes: usize, out: Option<&Path>) -> Result<()> {
    let c = cost_compare(&resolve(subject)?, &resolve(baseline)?, input_size, classes)?;
    let text = serde_json::to_string_pretty(&c).map_err(|e| Error::Config(e.to_string()))?;
    emit(&with_newline(text), out)
}

pub fn export_spec(arch: &str, out: Option<&Path>) -> Result<()> {
    emit(&resolve(arch)?.to_toml()?, out)
}

fn data_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub struct TrainArgs {
    pub arch: String,
    pub dataset: DatasetName,
    pub data_dir: Option<PathBuf>,
    pub paper: bool,
    pub seed: u64,
    pub epochs: Option<usize>,
    pub out_dir: PathBuf,
    pub dry_run: bool,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let spec = resolve(&args.arch)?;
    let mut cfg = if args.paper { TrainConfig::paper() } else { TrainConfig::desk() };
    cfg.seed = args.seed;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    if args.dry_run {
        let text = serde_json::to_string_pretty(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        return emit(&with_newline(text), None);
    }
    let dir = data_dir(args.data_dir);
    let full_train = data::load(&dir, args.dataset, Split::Train)?;
    let full_test = data::load(&dir, args.dataset, Split::Test)?;
    let train_set = cfg.train_subset.map_or(full_train.clone(), |n| full_train.subset(n));
    let test_set = cfg.test_subset.map_or(full_test.clone(), |n| full_test.subset(n));
    std::fs::create_dir_all(&args.out_dir).map_err(io_err(&args.out_dir))?;
    let aug = AugmentConfig::for_dataset(args.dataset);
    let job = Job {
        spec: &spec,
        cfg: &cfg,
        train: &train_set,
        test: &test_set,
        aug: &aug,
        out_dir: &args.out_dir,
        dataset: args.dataset,
    };
    match cfg.precision {
        Precision::F32 => job.run::<f32>(),
        Precision::F64 => job.run::<f64>(),
    }
}

struct Job<'a> {
    spec: &'a ArchitectureSpec,
    cfg: &'a TrainConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    aug: &'a AugmentConfig,
    out_dir: &'a Path,
    dataset: DatasetName,
}

impl Job<'_> {
    fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, text).map_err(io_err(&path))
    }

    fn write_log(&self, log: &TrainLog) -> Result<()> {
        self.write(&format!("{}.log.csv", log.run_id), &log.to_csv())?;
        self.write(&format!("{}.summary.json", log.run_id), &with_newline(log.summary_json()?))
    }

    fn run<T: Scalar>(&self) -> Result<()> {
        let mut logs = Vec::with_capacity(self.cfg.runs);
        for run in 0..self.cfg.runs {
            let cfg = TrainConfig {
                seed: self.cfg.seed + run as u64,
                ..self.cfg.clone()
            };
            let model = Model::<T>::build(self.spec, self.train.class_count, cfg.seed)?;
            let mut t = Trainer::new(model, cfg, self.dataset.as_str())?;
            let ckpt = self.out_dir.join(format!("{}.ckpt", t.log.run_id));
            t.run(self.train, self.test, self.aug, |t| {
                let e = t.log.epochs.last().expect("an epoch was just logged");
                eprintln!(
                    "{} epoch {}/{}: lr {} loss {:.4} test error {:.4} ({:.1}s)",
                    t.log.run_id,
                    e.epoch + 1,
                    t.config.epochs,
                    e.lr,
                    e.train_loss,
                    e.test_error,
                    e.seconds
                );
                self.write_log(&t.log)?;
                match t.config.checkpoint_every {
                    Some(k) if t.epochs_done() % k == 0 => t.save(&ckpt),
                    _ => Ok(()),
                }
            })?;
            t.save(&ckpt)?;
            self.write_log(&t.log)?;
            println!(
                "{}: final test error {:.4} after {} epochs ({:.1}s); checkpoint {}",
                t.log.run_id,
                t.log.final_error().unwrap_or(f64::NAN),
                t.epochs_done(),
                t.log.wall_seconds(),
                ckpt.display()
            );
            logs.push(t.log);
        }
        if logs.len() > 1 {
            #[derive(Serialize)]
            struct Pooled<'a> {
                arch: &'a str,
                dataset: &'a str,
                runs: Vec<&'a str>,
                last_epochs: usize,
                summary: cresnet::train::RunSummary,
            }
            let summary = summarize_runs(&logs, self.cfg.summary_last)?;
            let doc = Pooled {
                arch: &self.spec.name,
                dataset: self.dataset.as_str(),
                runs: logs.iter().map(|l| l.run_id.as_str()).collect(),
                last_epochs: self.cfg.summary_last,
                summary,
            };
            let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Config(e.to_string()))?;
            self.write(&format!("{}-{}.pooled.json", self.spec.name, self.dataset.as_str()), &with_newline(text))?;
            println!(
                "{} {}: test error {:.4} ± {:.4} over {} values",
                self.spec.name,
                self.dataset.as_str(),
                summary.mean,
                summary.std,
                summary.n
            );
        }
        Ok(())
    }
}

pub fn eval(checkpoint: &Path, dataset: DatasetName, data_dir_flag: Option<PathBuf>) -> Result<()> {
    let manifest = read_manifest(checkpoint)?;
    let error = match manifest.dtype.as_str() {
        "f32" => eval_with::<f32>(checkpoint, dataset, data_dir_flag)?,
        "f64" => eval_with::<f64>(checkpoint, dataset, data_dir_flag)?,
        other => return Err(Error::CheckpointMismatch(format!("unsupported dtype {other}"))),
    };
    emit(&format!("{error:.4}\n"), None)
}

/// Evaluates on the test subset and batch size recorded with the run, so
/// the result reproduces the log's final entry.
fn eval_with<T: Scalar>(checkpoint: &Path, dataset: DatasetName, data_dir_flag: Option<PathBuf>) -> Result<f64> {
    let restored = load::<T>(checkpoint)?;
    let mut model = restored.model;
    let cfg = restored.manifest.config;
    let full = data::load(data_dir(data_dir_flag), dataset, Split::Test)?;
    let test = match cfg.as_ref().and_then(|c| c.test_subset) {
        Some(n) => full.subset(n),
        None => full,
    };
    if test.class_count != model.classes() {
        return Err(Error::Config(format!(
            "{} has {} classes but the checkpoint's model has {}",
            dataset.as_str(),
            test.class_count,
            model.classes()
        )));
    }
    let batch = cfg.as_ref().map_or(100, TrainConfig::eval_batch_size);
    let e = evaluate(&mut model, &test, &AugmentConfig::for_dataset(dataset), batch)?;
    eprintln!("{}: {} / {} misclassified", checkpoint.display(), e.total - e.correct, e.total);
    Ok(e.error())
}
