//! L1 training loop with Adam and step-decay, and bucketed evaluation.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::generator::{save_checkpoint, GeneratorModel, ModelError, UNetConfig};
use crate::imaging::{metrics, write_metrics_csv, MetricsRecord, DEFAULT_PSNR_CAP};
use crate::synthdata::{load_dataset, DataError, Sample};
use crate::tensor::{Adam, AdamConfig, AdamError, Graph, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (lr {lr}, previous loss {previous:?})")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        previous: Option<f64>,
    },
    #[error("step {step}: {source}")]
    Optimizer { step: usize, source: AdamError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub train_data: PathBuf,
    pub val_data: Option<PathBuf>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Fractions of `steps` at which the rate is multiplied by `lr_decay`.
    pub milestones: Vec<f64>,
    pub seed: u64,
    pub network: UNetConfig,
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    /// Train with the bottleneck block replaced by the identity.
    pub bypass_bottleneck: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_data: PathBuf::new(),
            val_data: None,
            steps: 2000,
            batch_size: 1,
            lr: 1e-3,
            lr_decay: 0.1,
            milestones: vec![100.0 / 120.0, 110.0 / 120.0],
            seed: 0,
            network: UNetConfig::default(),
            checkpoint: None,
            loss_log: None,
            bypass_bottleneck: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr decay must lie in (0, 1]");
        }
        if self.milestones.iter().any(|&m| !(m > 0.0 && m < 1.0))
            || self.milestones.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("milestones must be strictly increasing in (0, 1)");
        }
        self.network.validate()?;
        Ok(())
    }

    /// Learning rate used for 0-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| step >= (m * self.steps as f64).floor() as usize)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    /// Validation runs after these 1-based step counts: every tenth of the
    /// run, and at the end.
    pub fn validation_steps(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (1..=10)
            .map(|k| (k * self.steps).div_ceil(10))
            .filter(|&s| s > 0)
            .collect();
        v.dedup();
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub lr: f64,
    /// Mean over the batch.
    pub loss: f64,
    /// The bottleneck block passed through for some sample of the batch.
    pub degenerate: bool,
}

impl StepRecord {
    /// `step,lr,loss`
    pub fn log_line(&self) -> String {
        format!("{},{},{}", self.step, self.lr, self.loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub step: usize,
    pub mse: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GeneratorModel,
    pub history: Vec<StepRecord>,
    pub validation: Vec<Validation>,
}

/// Loads the datasets named in `cfg`, trains, and writes the loss log and
/// checkpoint if paths are set.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_set = load_dataset(&cfg.train_data)?;
    let val_set = match &cfg.val_data {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    let mut log = match &cfg.loss_log {
        Some(p) => Some(io::BufWriter::new(std::fs::File::create(p).map_err(
            |source| TrainError::Io {
                path: p.display().to_string(),
                source,
            },
        )?)),
        None => None,
    };
    let mut log_err = None;
    let outcome = train_on(cfg, &train_set, &val_set, |rec| {
        if let Some(w) = log.as_mut() {
            if let Err(e) = writeln!(w, "{}", rec.log_line()) {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let (Some(mut w), Some(p)) = (log, &cfg.loss_log) {
        let io_err = |source| TrainError::Io {
            path: p.display().to_string(),
            source,
        };
        if let Some(e) = log_err {
            return Err(io_err(e));
        }
        w.flush().map_err(io_err)?;
    }
    if let Some(p) = &cfg.checkpoint {
        save_checkpoint(&outcome.model, p)?;
    }
    Ok(outcome)
}

/// Trains on in-memory samples. `on_step` sees every step record as it is
/// produced. Single-threaded and bit-reproducible for a given config.
pub fn train_on(
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let mut model = GeneratorModel::new(cfg.network, cfg.seed)?;
    model.set_bypass_bottleneck(cfg.bypass_bottleneck);
    for s in train_set.iter().chain(val_set) {
        model.check_input(&s.composite, &s.mask, &s.semantic)?;
    }
    let names = model.tensor_names();
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        sizes.iter().copied(),
    );

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(2);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let checkpoints = cfg.validation_steps();

    let mut history = Vec::with_capacity(cfg.steps);
    let mut validation = Vec::new();
    let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();

    for t in 0..cfg.steps {
        let lr = cfg.lr_at(t);
        adam.set_lr(lr);
        grads.iter_mut().for_each(|g| g.fill(0.0));
        let mut loss_sum = 0.0;
        let mut degenerate = false;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let sample = &train_set[order[cursor]];
            cursor += 1;

            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &sample.composite, &sample.mask, &sample.semantic)?;
            let target = g.constant(sample.real.to_chw());
            let loss = g.l1_loss(fwd.output, target)?;
            let value = g.value(loss).values()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: t + 1,
                    lr,
                    previous: history.last().map(|r: &StepRecord| r.loss),
                });
            }
            g.backward(loss)?;
            for (acc, &p) in grads.iter_mut().zip(&fwd.params) {
                if let Some(gp) = g.grad(p) {
                    acc.iter_mut().zip(gp).for_each(|(a, b)| *a += b);
                }
            }
            loss_sum += value;
            degenerate |= fwd.degenerate;
        }
        if cfg.batch_size > 1 {
            let k = 1.0 / cfg.batch_size as f64;
            grads.iter_mut().flatten().for_each(|v| *v *= k);
        }
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<(&str, &mut crate::tensor::Tensor)> = names
            .iter()
            .map(String::as_str)
            .zip(model.tensors_mut())
            .collect();
        adam.step(&mut params, &grad_refs)
            .map_err(|source| TrainError::Optimizer {
                step: t + 1,
                source,
            })?;

        let rec = StepRecord {
            step: t + 1,
            lr,
            loss: loss_sum / cfg.batch_size as f64,
            degenerate,
        };
        on_step(&rec);
        history.push(rec);

        if !val_set.is_empty() && checkpoints.contains(&(t + 1)) {
            let report = evaluate(&model, val_set, 1)?;
            validation.push(Validation {
                step: t + 1,
                mse: report.overall.mse,
                psnr: report.overall.psnr,
            });
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        validation,
    })
}

/// Means over a group of samples. `fmse` averages only samples with a
/// non-empty mask; `fmse_count` says how many.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupMeans {
    pub count: usize,
    pub mse: f64,
    pub psnr: f64,
    pub fmse_count: usize,
    pub fmse: Option<f64>,
}

impl GroupMeans {
    fn of<'a>(records: impl Iterator<Item = &'a MetricsRecord>) -> Self {
        let (mut count, mut mse, mut psnr, mut fcount, mut fmse) = (0, 0.0, 0.0, 0, 0.0);
        for r in records {
            count += 1;
            mse += r.mse;
            psnr += r.psnr;
            if let Some(f) = r.fmse {
                fcount += 1;
                fmse += f;
            }
        }
        let div = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        Self {
            count,
            mse: div(mse, count),
            psnr: div(psnr, count),
            fmse_count: fcount,
            fmse: (fcount > 0).then(|| fmse / fcount as f64),
        }
    }
}

pub const BUCKET_LABELS: [&str; 3] = ["0%-5%", "5%-15%", "15%-100%"];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Sorted by sample id.
    pub records: Vec<(String, MetricsRecord)>,
    pub buckets: [GroupMeans; 3],
    pub overall: GroupMeans,
}

impl EvalReport {
    pub fn from_records(mut records: Vec<(String, MetricsRecord)>) -> Self {
        records.sort_by(|a, b| a.0.cmp(&b.0));
        let buckets = std::array::from_fn(|b| {
            GroupMeans::of(records.iter().map(|(_, r)| r).filter(|r| r.bucket() == b))
        });
        let overall = GroupMeans::of(records.iter().map(|(_, r)| r));
        Self {
            records,
            buckets,
            overall,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        write_metrics_csv(w, &self.records)
    }

    /// Fixed-width table: one row per foreground-ratio bucket plus the total.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>6} {:>12} {:>12} {:>9}\n",
            "fg ratio", "count", "MSE", "fMSE", "PSNR"
        );
        let rows = BUCKET_LABELS
            .iter()
            .zip(&self.buckets)
            .chain([(&"all", &self.overall)]);
        for (label, m) in rows {
            let fmse = m.fmse.map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>12.2} {:>12} {:>9.2}",
                label, m.count, m.mse, fmse, m.psnr
            );
        }
        s
    }
}

/// Harmonizes every sample and scores it against its real image. With
/// `threads > 1` samples are split across scoped workers; the report does not
/// depend on the split.
pub fn evaluate(
    model: &GeneratorModel,
    samples: &[Sample],
    threads: usize,
) -> Result<EvalReport, ModelError> {
    let score = |s: &Sample| -> Result<(String, MetricsRecord), ModelError> {
        let h = model.harmonize(&s.composite, &s.mask, &s.semantic)?;
        Ok((
            s.id.clone(),
            metrics(&h, &s.real, &s.mask, DEFAULT_PSNR_CAP)?,
        ))
    };
    let threads = threads.clamp(1, samples.len().max(1));
    let records = if threads == 1 {
        samples.iter().map(score).collect::<Result<Vec<_>, _>>()?
    } else {
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || part.iter().map(score).collect::<Result<Vec<_>, _>>())
                })
                .collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, ModelError>(all)
        })?
    };
    Ok(EvalReport::from_records(records))
}
