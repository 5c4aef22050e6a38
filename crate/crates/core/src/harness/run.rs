use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, MethodKind};
use super::eval::{accuracy, write_metrics, write_summary, EvalMatrix};
use crate::bnn::{self, KlWeight, MeanFieldPosterior, PosteriorInit, PriorSpec, TrainHyper, NUM_CLASSES};
use crate::checkpoint::Checkpoint;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::gan::{sample_replay, train_class_gan, DpContext, GanPair, GanStats, ReplayStore};
use crate::nn::{
    adam_step, mlp_backward, mlp_forward, mlp_predict, softmax_xent, Activation, AdamState, Matrix, MlpParams, RngState,
};
use crate::privacy::{calibrate_sigma, DomainTag, LedgerBook, PrivacyLedger, PrivacyReport};
use crate::tasks::{load_mnist_dir, retire, split_tasks, AccessMonitor, RawDataset, ReadEvent, TaskDataset, TaskStream};

/// Train and test images after downscaling and per-class caps.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: RawDataset,
    pub test: RawDataset,
}

impl PreparedData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, test) = load_mnist_dir(&cfg.data_dir)?;
        Self::from_raw(cfg, train, test)
    }

    pub fn from_raw(cfg: &ExperimentConfig, train: RawDataset, test: RawDataset) -> Result<Self> {
        let shrink = |d: RawDataset, cap: usize| -> Result<RawDataset> {
            let d = if cfg.scale_factor > 1 { d.downscale(cfg.scale_factor)? } else { d };
            Ok(if cap > 0 { d.cap_per_class(cap) } else { d })
        };
        Ok(Self {
            train: shrink(train, cfg.per_class_cap)?,
            test: shrink(test, cfg.test_per_class_cap)?,
        })
    }

    pub fn image_width(&self) -> usize {
        self.train.images().cols()
    }
}

/// One class GAN's training outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanRecord {
    pub domain: DomainTag,
    pub stats: GanStats,
    pub planned_steps: u64,
    /// Calibrated noise multiplier, for private runs.
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub matrix: EvalMatrix,
    pub report: PrivacyReport,
    pub ledgers: LedgerBook,
    pub gans: Vec<GanRecord>,
    /// Every logged read of private training rows.
    pub reads: Vec<ReadEvent>,
    /// Label counts of the classifier's training set, per task.
    pub train_class_counts: Vec<Vec<usize>>,
    /// Classifier output width after each task.
    pub output_widths: Vec<usize>,
    pub log: Vec<String>,
}

enum Learner {
    Bayes {
        post: MeanFieldPosterior,
        store: ReplayStore,
        public_pool: Option<LabeledSet>,
    },
    Plain {
        params: MlpParams,
    },
}

impl Learner {
    fn output_width(&self) -> usize {
        match self {
            Learner::Bayes { post, .. } => post.mu().output_width(),
            Learner::Plain { params } => params.output_width(),
        }
    }

    fn predict_labels(&self, x: &Matrix, samples: usize, rng: &mut RngState) -> Result<Vec<usize>> {
        Ok(match self {
            Learner::Bayes { post, .. } => bnn::predict(post, x, samples, rng)?.argmax_rows(),
            Learner::Plain { params } => mlp_predict(params, x)?.argmax_rows(),
        })
    }
}

struct Progress {
    matrix: EvalMatrix,
    report: PrivacyReport,
    ledgers: LedgerBook,
    gans: Vec<GanRecord>,
    train_class_counts: Vec<Vec<usize>>,
    output_widths: Vec<usize>,
    log: Vec<String>,
}

impl Progress {
    fn log(&mut self, line: String) {
        self.log.push(line);
    }
}

/// Loads the data named by `cfg` and runs the experiment, writing artifacts to `out` if given.
pub fn run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutput> {
    let data = PreparedData::load(cfg)?;
    run_prepared(cfg, &data, out)
}

/// Runs the experiment on already prepared data. On error, whatever was
/// computed so far is still written to `out` together with the error.
pub fn run_prepared(cfg: &ExperimentConfig, data: &PreparedData, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(dir.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(dir.join("config.txt"), e))?;
    }
    let mut progress = Progress {
        matrix: EvalMatrix::new(),
        report: PrivacyReport::default(),
        ledgers: LedgerBook::new(),
        gans: Vec::new(),
        train_class_counts: Vec::new(),
        output_widths: Vec::new(),
        log: Vec::new(),
    };
    let monitor = AccessMonitor::new();
    let result = run_tasks(cfg, data, out, &monitor, &mut progress);
    if let Err(e) = &result {
        progress.log(format!("aborted: {e}"));
    }
    if let Some(dir) = out {
        write_artifacts(cfg, dir, &progress)?;
    }
    result?;
    Ok(RunOutput {
        config: cfg.clone(),
        matrix: progress.matrix,
        report: progress.report,
        ledgers: progress.ledgers,
        gans: progress.gans,
        reads: monitor.reads(),
        train_class_counts: progress.train_class_counts,
        output_widths: progress.output_widths,
        log: progress.log,
    })
}

fn write_artifacts(cfg: &ExperimentConfig, dir: &Path, p: &Progress) -> Result<()> {
    let label = cfg.method.label();
    write_metrics(&dir.join("metrics.csv"), &label, cfg.seed, &p.matrix)?;
    write_summary(&dir.join("summary.csv"), &label, cfg.seed, &p.matrix)?;
    let file = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    };
    file("privacy_report.txt", p.report.to_text())?;
    let mut log = String::new();
    for l in &p.log {
        let _ = writeln!(log, "{l}");
    }
    file("run.log", log)
}

fn checkpoint_dir(out: Option<&Path>, cfg: &ExperimentConfig) -> Result<Option<PathBuf>> {
    match out {
        Some(dir) if cfg.save_checkpoints => {
            let d = dir.join("checkpoints");
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            Ok(Some(d))
        }
        _ => Ok(None),
    }
}

fn run_tasks(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    out: Option<&Path>,
    monitor: &AccessMonitor,
    progress: &mut Progress,
) -> Result<()> {
    let ckpt_dir = checkpoint_dir(out, cfg)?;
    let mut rng = RngState::new(cfg.seed);
    let width = data.image_width();
    let tasks = split_tasks(&data.train, &data.test, &cfg.task_pairs, monitor)?;
    let mut stream = TaskStream::new(tasks, monitor.clone());
    let mut hidden = vec![width];
    hidden.extend_from_slice(&cfg.bnn_hidden);
    let mut learner = match cfg.method {
        MethodKind::PlainSgd => {
            let mut widths = hidden.clone();
            widths.push(NUM_CLASSES);
            Learner::Plain {
                params: MlpParams::he_init(&widths, Activation::Identity, &mut rng)?,
            }
        }
        _ => Learner::Bayes {
            post: MeanFieldPosterior::init(&hidden, PosteriorInit::default(), &mut rng)?,
            store: ReplayStore::new(),
            public_pool: None,
        },
    };
    let mut seen: Vec<TaskDataset> = Vec::new();
    while let Some(mut task) = stream.consume()? {
        for old in &seen {
            if !matches!(old.train.read(), Err(Error::TaskRetired { .. })) {
                return Err(Error::InvalidArgument(format!("task {} private data still readable", old.id)));
            }
        }
        let t = task.id;
        if cfg.method.uses_public() {
            task.carve_public(cfg.public_fraction, &mut rng)?;
        }
        let counts = match &mut learner {
            Learner::Plain { params } => train_plain(cfg, params, &task, &mut rng)?,
            Learner::Bayes {
                post,
                store,
                public_pool,
            } => train_bayes(cfg, post, store, public_pool, &task, &mut rng, progress)?,
        };
        progress.train_class_counts.push(counts);
        progress.output_widths.push(learner.output_width());

        let mut eval_rng = rng.split();
        let mut row = Vec::with_capacity(seen.len() + 1);
        for test in seen.iter().map(|s| &s.test).chain(std::iter::once(&task.test)) {
            let pred = learner.predict_labels(test.x(), cfg.bnn_eval_samples, &mut eval_rng)?;
            row.push(accuracy(&pred, test.y())?);
        }
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        progress.log(format!(
            "task {t} classes {:?}: accuracies {:?} mean {mean:.4}",
            task.classes,
            row.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>()
        ));
        progress.matrix.push_row(row)?;

        if let Some(dir) = &ckpt_dir {
            let ck = match &learner {
                Learner::Bayes { post, .. } => Checkpoint::Posterior(post.clone()),
                Learner::Plain { params } => Checkpoint::Mlp(params.clone()),
            };
            let kind = if matches!(ck, Checkpoint::Mlp(_)) { "mlp" } else { "posterior" };
            ck.save(&dir.join(format!("task{t}_{kind}.ckpt")))?;
            if let Learner::Bayes { store, .. } = &learner {
                for p in store.pairs().iter().filter(|p| p.task_id == t) {
                    Checkpoint::Gan(p.clone()).save(&dir.join(format!("task{t}_class{}_gan.ckpt", p.class_label)))?;
                }
            }
        }
        retire(&mut task, monitor)?;
        seen.push(task);
    }
    Ok(())
}

/// The task's real training rows: the private remainder plus its public slice.
fn current_rows(task: &TaskDataset) -> Result<LabeledSet> {
    let private = task.train.read()?.clone();
    match &task.public {
        Some(p) if !p.is_empty() => private.concat(p),
        _ => Ok(private),
    }
}

fn train_gans(
    cfg: &ExperimentConfig,
    task: &TaskDataset,
    rng: &mut RngState,
    progress: &mut Progress,
) -> Result<Vec<GanPair>> {
    let width = task.test.width();
    let gcfg = cfg.gan_config(width);
    let mut pairs = Vec::new();
    for &c in &task.classes {
        let rows = task.train.read_class(c)?;
        if rows.is_empty() {
            return Err(Error::EmptyBatch("class GAN training rows"));
        }
        let public = match (&cfg.method, &task.public) {
            (MethodKind::DpVgerPublic { .. }, Some(p)) => Some(p.filter_labels(|l| l == c).x().clone()),
            _ => None,
        };
        let domain = DomainTag { task: task.id, class: c };
        let mut grng = rng.split();
        let n = rows.len();
        let planned = gcfg.planned_steps(n);
        let (pair, stats, sigma) = match cfg.method.budget() {
            Some((epsilon, delta)) => {
                let q = gcfg.sample_rate(n);
                let sigma = calibrate_sigma(epsilon, delta, q, planned)?;
                let dp = cfg.dp_config(q, sigma).expect("private method has a budget");
                let mut ledger = PrivacyLedger::new(domain);
                let ctx = DpContext {
                    config: &dp,
                    ledger: &mut ledger,
                };
                let (pair, stats) = train_class_gan(rows.x(), c, task.id, &gcfg, Some(ctx), public.as_ref(), &mut grng)?;
                progress.report.push(PrivacyReport::entry_for(&ledger, &dp)?);
                progress.ledgers.merge(ledger);
                (pair, stats, Some(sigma))
            }
            None => {
                let (pair, stats) = train_class_gan(rows.x(), c, task.id, &gcfg, None, public.as_ref(), &mut grng)?;
                (pair, stats, None)
            }
        };
        progress.log(format!(
            "task {} class {c}: gan {} private steps of {planned}{}{}, d_loss {:.4} g_loss {:.4}",
            task.id,
            stats.d_steps,
            sigma.map(|s| format!(", sigma {s:.4}")).unwrap_or_default(),
            if stats.halted { ", halted at budget" } else { "" },
            stats.last_d_loss,
            stats.last_g_loss
        ));
        progress.gans.push(GanRecord {
            domain,
            stats,
            planned_steps: planned,
            sigma,
        });
        pairs.push(pair);
    }
    Ok(pairs)
}

fn train_bayes(
    cfg: &ExperimentConfig,
    post: &mut MeanFieldPosterior,
    store: &mut ReplayStore,
    public_pool: &mut Option<LabeledSet>,
    task: &TaskDataset,
    rng: &mut RngState,
    progress: &mut Progress,
) -> Result<Vec<usize>> {
    let t = task.id;
    let tasks_seen = t + 1;
    let current = current_rows(task)?;
    let (train_set, prior, weight, new_pairs) = match cfg.method {
        MethodKind::Vger | MethodKind::DpVgerPublic { .. } | MethodKind::DpVgerNoPublic { .. } => {
            let pairs = train_gans(cfg, task, rng, progress)?;
            let mixed = if store.is_empty() {
                current
            } else {
                let n_per_class = current.len() / task.classes.len();
                current.concat(&sample_replay(store, n_per_class, rng)?)?
            };
            let w = KlWeight {
                dataset_size: mixed.len(),
                tasks_seen,
            };
            (mixed, PriorSpec::standard(), w, pairs)
        }
        MethodKind::CoresetOnly => {
            let mixed = match public_pool.as_ref() {
                Some(pool) => current.concat(pool)?,
                None => current,
            };
            let w = KlWeight {
                dataset_size: mixed.len(),
                tasks_seen,
            };
            (mixed, PriorSpec::standard(), w, Vec::new())
        }
        MethodKind::Vcl => {
            let prior = if t == 0 { PriorSpec::standard() } else { bnn::vcl_prior_update(post) };
            let w = KlWeight {
                dataset_size: current.len(),
                tasks_seen: 1,
            };
            (current, prior, w, Vec::new())
        }
        MethodKind::PlainSgd => unreachable!("plain SGD has no posterior"),
    };
    let hyper = TrainHyper {
        batch_size: cfg.bnn_batch,
        lr: cfg.bnn_lr,
        samples: cfg.bnn_train_samples,
    };
    let mut adam = AdamState::new(2 * post.num_weights());
    for epoch in 0..cfg.bnn_epochs {
        let s = bnn::train_epoch(post, &prior, &train_set, hyper, weight, &mut adam, rng)?;
        progress.log(format!(
            "task {t} bnn epoch {epoch}: nll {:.4} kl {:.1} train_acc {:.4} on {} rows",
            s.mean_nll,
            s.kl,
            s.accuracy,
            train_set.len()
        ));
    }
    for p in new_pairs {
        store.insert(p)?;
    }
    if let (MethodKind::CoresetOnly, Some(p)) = (cfg.method, &task.public) {
        *public_pool = Some(match public_pool.take() {
            Some(pool) => pool.concat(p)?,
            None => p.clone(),
        });
    }
    Ok(train_set.class_counts(NUM_CLASSES))
}

fn train_plain(cfg: &ExperimentConfig, params: &mut MlpParams, task: &TaskDataset, rng: &mut RngState) -> Result<Vec<usize>> {
    let data = current_rows(task)?;
    let mut adam = AdamState::new(params.num_params());
    let mut flat = params.to_flat();
    for _ in 0..cfg.sgd_epochs {
        let order = rng.permutation(data.len());
        for idx in order.chunks(cfg.bnn_batch) {
            let batch = data.select(idx);
            let (logits, cache) = mlp_forward(params, batch.x())?;
            let (_, grad) = softmax_xent(&logits, batch.y())?;
            let g = mlp_backward(params, &cache, &grad)?.to_flat();
            adam_step(&mut flat, &g, &mut adam, cfg.sgd_lr)?;
            params.assign_flat(&flat)?;
        }
    }
    Ok(data.class_counts(NUM_CLASSES))
}
