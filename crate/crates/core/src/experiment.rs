//! End-to-end experiment driver: data preparation, algorithm dispatch,
//! incremental metric output, checkpoints and resume.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::apple::ProxCenter;
use crate::baselines::{finetune_all, FedAvgState, SeparateState};
use crate::config::{Algorithm, DataConfig, RunConfig};
use crate::data::{
    load_csv, load_idx, partition, split_per_class, synth_clusters, Dataset, FederatedSplit,
    SplitManifest,
};
use crate::error::{Error, Result};
use crate::federation::{
    init_federation, ClientRoundStats, ClientSnapshot, ClientState, Federation, RoundReport,
    ServerState,
};
use crate::metrics::{
    bmcta, client_accuracy, dr_header, dr_record, metric_header, metric_record, CsvSink, DrTrace,
    MetricRow,
};
use crate::numerics::{ModelSpec, ParamVector};
use crate::seed::{derive_seed, Stream};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const METRICS_FILE: &str = "metrics.csv";
pub const DR_TRACE_FILE: &str = "dr_trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Loads the configured train and test datasets.
pub fn load_data(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &config.data {
        DataConfig::Synthetic {
            num_classes,
            feature_dim,
            train_per_class,
            test_per_class,
            class_center_scale,
            noise_sigma,
            seed,
        } => {
            let seed = seed.unwrap_or_else(|| derive_seed(config.seed, Stream::Synthetic));
            let all = synth_clusters(
                *num_classes,
                *feature_dim,
                train_per_class + test_per_class,
                *class_center_scale,
                *noise_sigma,
                seed,
            )?;
            Ok(split_per_class(&all, *train_per_class))
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            align_classes(train, test)
        }
        DataConfig::Csv {
            train_path,
            test_path,
            label_column,
        } => {
            let train = load_csv(train_path, label_column)?;
            let test = load_csv(test_path, label_column)?;
            align_classes(train, test)
        }
    }
}

/// Train and test files infer `num_classes` separately; use the larger.
fn align_classes(train: Dataset, test: Dataset) -> Result<(Dataset, Dataset)> {
    if train.feature_dim() != test.feature_dim() {
        return Err(Error::data(
            "dataset",
            format!(
                "train has {} features but test has {}",
                train.feature_dim(),
                test.feature_dim()
            ),
        ));
    }
    let c = train.num_classes().max(test.num_classes());
    let widen = |d: Dataset| {
        let dim = d.feature_dim();
        let labels = d.labels().to_vec();
        Dataset::new(d.inputs().to_vec(), labels, c, dim)
    };
    Ok((widen(train)?, widen(test)?))
}

/// Manifest file written by the `partition` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub config: RunConfig,
    #[serde(flatten)]
    pub manifest: SplitManifest,
}

pub fn make_split(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<FederatedSplit> {
    match &config.partition.manifest {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let manifest: SplitManifest = serde_json::from_str(&text)
                .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
            if manifest.clients.len() != config.num_clients() {
                return Err(Error::config(format!(
                    "manifest has {} clients but config expects {}",
                    manifest.clients.len(),
                    config.num_clients()
                )));
            }
            manifest.apply(train, test)
        }
        None => partition(train, test, &config.partition_spec()),
    }
}

/// Data, split and resolved model for a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub model: ModelSpec,
    pub split: FederatedSplit,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let (train, test) = load_data(config)?;
    let model = config
        .model
        .resolve(train.feature_dim(), train.num_classes())?;
    let split = make_split(config, &train, &test)?;
    for (i, c) in split.clients.iter().enumerate() {
        if c.train.is_empty() || c.test.is_empty() {
            return Err(Error::data(
                "partition",
                format!(
                    "client {i} received {} training and {} test samples; both must be non-empty",
                    c.train.len(),
                    c.test.len()
                ),
            ));
        }
    }
    Ok(Prepared {
        config: config.clone(),
        model,
        split,
    })
}

/// Serialized algorithm state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EngineState {
    Apple {
        server: ServerState,
        clients: Vec<ClientSnapshot>,
        p0: ProxCenter,
        setup_bytes_down: u64,
    },
    Fedavg {
        state: FedAvgState,
        finetuned: Option<Vec<ParamVector>>,
    },
    Separate {
        state: SeparateState,
    },
}

/// Everything needed to resume a run bit-exactly. Per-round RNG streams are
/// derived from `(seed, client, round)`, so no generator state is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: RunConfig,
    pub completed_rounds: usize,
    pub finished: bool,
    pub state: EngineState,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::data(
                path.display().to_string(),
                format!("unsupported checkpoint format {}", ckpt.format),
            ));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        crate::metrics::write_text(path, &text)
    }
}

enum Engine {
    Apple(Federation),
    Fedavg {
        state: FedAvgState,
        finetuned: Option<Vec<ParamVector>>,
    },
    Separate(SeparateState),
}

impl Engine {
    fn init(p: &Prepared) -> Result<Self> {
        let n = p.split.num_clients();
        Ok(match p.config.algorithm {
            Algorithm::Apple => Engine::Apple(init_federation(&p.config, &p.model, &p.split)?),
            Algorithm::Separate => Engine::Separate(SeparateState::init(&p.config, &p.model, n)),
            _ => Engine::Fedavg {
                state: FedAvgState::init(&p.config, &p.model, n),
                finetuned: None,
            },
        })
    }

    fn restore(p: &Prepared, state: EngineState) -> Result<Self> {
        let mismatch = || Error::config("checkpoint state does not match the configured algorithm");
        Ok(match (p.config.algorithm, state) {
            (
                Algorithm::Apple,
                EngineState::Apple {
                    server,
                    clients,
                    p0,
                    setup_bytes_down,
                },
            ) => {
                if clients.len() != p.split.num_clients() {
                    return Err(mismatch());
                }
                let clients = clients
                    .into_iter()
                    .zip(&p.split.clients)
                    .map(|(s, c)| ClientState::restore(s, c.train.clone(), c.test.clone()))
                    .collect();
                Engine::Apple(Federation {
                    model: p.model,
                    server,
                    clients,
                    p0,
                    setup_bytes_down,
                })
            }
            (Algorithm::Separate, EngineState::Separate { state }) => Engine::Separate(state),
            (Algorithm::Apple | Algorithm::Separate, _) => return Err(mismatch()),
            (_, EngineState::Fedavg { state, finetuned }) => Engine::Fedavg { state, finetuned },
            _ => return Err(mismatch()),
        })
    }

    fn state(&self) -> EngineState {
        match self {
            Engine::Apple(f) => EngineState::Apple {
                server: f.server.clone(),
                clients: f.clients.iter().map(ClientState::snapshot).collect(),
                p0: f.p0.clone(),
                setup_bytes_down: f.setup_bytes_down,
            },
            Engine::Fedavg { state, finetuned } => EngineState::Fedavg {
                state: state.clone(),
                finetuned: finetuned.clone(),
            },
            Engine::Separate(state) => EngineState::Separate {
                state: state.clone(),
            },
        }
    }

    fn step(&mut self, p: &Prepared, round: usize, parallel: bool) -> Result<RoundReport> {
        let c = &p.config;
        match self {
            Engine::Apple(f) => f.run_round(c, round, parallel),
            Engine::Separate(s) => s.run_round(c, &p.model, &p.split, round, parallel),
            Engine::Fedavg { state, .. } => {
                let r = state.run_round(c, &p.model, &p.split, c.mu_prox, round, parallel)?;
                Ok(if c.algorithm == Algorithm::FedavgLocal {
                    r.local
                } else {
                    r.global
                })
            }
        }
    }

    /// Post-training stage (fine-tuning); reported as round `R + 1`.
    fn finish(&mut self, p: &Prepared, parallel: bool) -> Result<Option<RoundReport>> {
        match self {
            Engine::Fedavg { state, finetuned } if p.config.algorithm.fine_tunes() => {
                let (tuned, stats) =
                    finetune_all(&p.config, &p.model, &p.split, &state.global, parallel)?;
                *finetuned = Some(tuned);
                let n = p.split.num_clients();
                Ok(Some(RoundReport {
                    round: p.config.rounds + 1,
                    clients: stats,
                    downloads: vec![Vec::new(); n],
                    bytes_up: vec![0; n],
                    bytes_down: vec![0; n],
                    dr: Vec::new(),
                }))
            }
            _ => Ok(None),
        }
    }

    /// The models each client would use for inference right now.
    fn client_models(&self, p: &Prepared) -> Result<Vec<ParamVector>> {
        Ok(match self {
            Engine::Apple(f) => f.personalized_models()?,
            Engine::Separate(s) => s.models.clone(),
            Engine::Fedavg { state, finetuned } => match (p.config.algorithm, finetuned) {
                (_, Some(tuned)) => tuned.clone(),
                (Algorithm::FedavgLocal, None) => state.locals.clone(),
                _ => vec![state.global.clone(); p.split.num_clients()],
            },
        })
    }
}

pub fn report_rows(report: &RoundReport, algorithm: Algorithm) -> Vec<MetricRow> {
    report
        .clients
        .iter()
        .enumerate()
        .map(|(i, s)| MetricRow {
            round: report.round,
            client: i,
            algorithm: algorithm.tag().to_string(),
            train_loss: s.train_loss,
            penalized_loss: s.penalized_loss,
            test_accuracy: s.test_accuracy,
            bytes_up: report.bytes_up[i],
            bytes_down: report.bytes_down[i],
        })
        .collect()
}

pub fn report_traces(report: &RoundReport) -> Vec<DrTrace> {
    report
        .dr
        .iter()
        .enumerate()
        .map(|(i, w)| DrTrace {
            round: report.round,
            client: i,
            weights: w.clone(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub workers: usize,
    pub output_dir: PathBuf,
    /// Continue from this checkpoint, appending to the existing outputs.
    pub resume: Option<Checkpoint>,
    /// Also write a checkpoint after every this many rounds.
    pub checkpoint_every: Option<usize>,
    /// Stop (after checkpointing) once this round completes.
    pub stop_after: Option<usize>,
}

impl TrainOptions {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        TrainOptions {
            workers: 1,
            output_dir: output_dir.into(),
            resume: None,
            checkpoint_every: None,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// Rows produced by this invocation (all rounds unless resumed).
    pub rows: Vec<MetricRow>,
    pub reports: Vec<RoundReport>,
    pub completed_rounds: usize,
    pub finished: bool,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub dr_trace_path: Option<PathBuf>,
}

impl TrainSummary {
    pub fn bmcta(&self) -> Result<f64> {
        bmcta(&self.rows)
    }
}

/// Runs (or resumes) the configured experiment and writes `metrics.csv`,
/// `dr_trace.csv` (APPLE only) and `checkpoint.json` into the output
/// directory. Rows are flushed as each round completes.
pub fn train(config: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let config = match &opts.resume {
        Some(ckpt) => ckpt.config.clone(),
        None => config.clone(),
    };
    let prepared = prepare(&config)?;
    let n = prepared.split.num_clients();
    let (mut engine, mut completed, mut finished) = match &opts.resume {
        Some(ckpt) => (
            Engine::restore(&prepared, ckpt.state.clone())?,
            ckpt.completed_rounds,
            ckpt.finished,
        ),
        None => (Engine::init(&prepared)?, 0, false),
    };

    let dir = &opts.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    let is_apple = config.algorithm == Algorithm::Apple;
    let dr_trace_path = is_apple.then(|| dir.join(DR_TRACE_FILE));
    let config_json = config.to_json();
    let provenance = [("config", config_json.as_str())];
    let (mut metrics, mut traces) = if opts.resume.is_some() {
        (
            CsvSink::append(&metrics_path)?,
            dr_trace_path.as_deref().map(CsvSink::append).transpose()?,
        )
    } else {
        (
            CsvSink::create(&metrics_path, &provenance, &metric_header())?,
            dr_trace_path
                .as_deref()
                .map(|p| CsvSink::create(p, &provenance, &dr_header(n)))
                .transpose()?,
        )
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let parallel = opts.workers > 1;

    let save = |engine: &Engine, completed: usize, finished: bool| {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            config: config.clone(),
            completed_rounds: completed,
            finished,
            state: engine.state(),
        }
        .write(&checkpoint_path)
    };

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut emit = |report: RoundReport| -> Result<()> {
        for row in report_rows(&report, config.algorithm) {
            metrics.push(&metric_record(&row))?;
            rows.push(row);
        }
        if let Some(sink) = traces.as_mut() {
            for t in report_traces(&report) {
                sink.push(&dr_record(&t))?;
            }
        }
        reports.push(report);
        Ok(())
    };

    pool.install(|| -> Result<()> {
        while completed < config.rounds {
            let round = completed + 1;
            let report = engine.step(&prepared, round, parallel)?;
            emit(report)?;
            completed = round;
            log::info!(
                "{} round {round}/{} done",
                config.algorithm.tag(),
                config.rounds
            );
            if opts
                .checkpoint_every
                .is_some_and(|k| k > 0 && round % k == 0)
            {
                save(&engine, completed, false)?;
            }
            if opts.stop_after == Some(round) {
                return Ok(());
            }
        }
        if !finished {
            if let Some(report) = engine.finish(&prepared, parallel)? {
                emit(report)?;
            }
            finished = true;
        }
        Ok(())
    })?;
    save(&engine, completed, finished)?;

    Ok(TrainSummary {
        rows,
        reports,
        completed_rounds: completed,
        finished,
        metrics_path,
        checkpoint_path,
        dr_trace_path,
    })
}

/// Per-client test accuracy of the models stored in a checkpoint.
pub fn evaluate_checkpoint(ckpt: &Checkpoint) -> Result<Vec<f64>> {
    let prepared = prepare(&ckpt.config)?;
    let engine = Engine::restore(&prepared, ckpt.state.clone())?;
    engine
        .client_models(&prepared)?
        .iter()
        .zip(&prepared.split.clients)
        .map(|(m, c)| client_accuracy(&prepared.model, m, &c.test))
        .collect()
}

/// Runs a whole experiment in memory, without writing files.
pub fn run_in_memory(
    config: &RunConfig,
    workers: usize,
) -> Result<(Vec<MetricRow>, Vec<RoundReport>)> {
    let prepared = prepare(config)?;
    let mut engine = Engine::init(&prepared)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let parallel = workers > 1;
    pool.install(|| {
        let mut reports = Vec::with_capacity(config.rounds + 1);
        for round in 1..=config.rounds {
            reports.push(engine.step(&prepared, round, parallel)?);
        }
        if let Some(r) = engine.finish(&prepared, parallel)? {
            reports.push(r);
        }
        let rows = reports
            .iter()
            .flat_map(|r| report_rows(r, config.algorithm))
            .collect();
        Ok((rows, reports))
    })
}

/// Client stats as produced by the last report, for comparison with
/// [`evaluate_checkpoint`].
pub fn last_accuracies(reports: &[RoundReport]) -> Option<Vec<f64>> {
    reports.last().map(|r| {
        r.clients
            .iter()
            .map(|s: &ClientRoundStats| s.test_accuracy)
            .collect()
    })
}

/// Renders `loss.svg`, `accuracy.svg` and (with a DR trace) one
/// `dr_client_<i>.svg` per client. Returns the written paths.
pub fn export_charts(
    metrics_path: &Path,
    dr_path: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    use crate::metrics::{line_chart_svg, read_dr_csv, read_metrics_csv, write_text, Series};
    use std::collections::BTreeMap;

    let rows = read_metrics_csv(metrics_path)?;
    if rows.is_empty() {
        return Err(Error::data(
            metrics_path.display().to_string(),
            "no metric rows to export",
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mean_by_round = |f: fn(&MetricRow) -> f64| {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &rows {
            let e = acc.entry(r.round).or_default();
            e.0 += f(r);
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(round, (s, k))| (round as f64, s / k as f64))
            .collect::<Vec<_>>()
    };
    let series = |name: &str, points| Series {
        name: name.to_string(),
        points,
    };

    let mut written = Vec::new();
    let loss = line_chart_svg(
        "Mean training loss",
        "round",
        "loss",
        &[
            series("train_loss", mean_by_round(|r| r.train_loss)),
            series("penalized_loss", mean_by_round(|r| r.penalized_loss)),
        ],
    );
    let path = out_dir.join("loss.svg");
    write_text(&path, &loss)?;
    written.push(path);

    let mut per_client: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        per_client
            .entry(r.client)
            .or_default()
            .push((r.round as f64, r.test_accuracy));
    }
    let mut acc_series = vec![series("mean", mean_by_round(|r| r.test_accuracy))];
    acc_series.extend(
        per_client
            .into_iter()
            .map(|(c, pts)| series(&format!("client {c}"), pts)),
    );
    let path = out_dir.join("accuracy.svg");
    write_text(
        &path,
        &line_chart_svg("Test accuracy", "round", "accuracy", &acc_series),
    )?;
    written.push(path);

    if let Some(dr_path) = dr_path {
        let traces = read_dr_csv(dr_path)?;
        let mut by_client: BTreeMap<usize, Vec<&DrTrace>> = BTreeMap::new();
        for t in &traces {
            by_client.entry(t.client).or_default().push(t);
        }
        for (client, ts) in by_client {
            let n = ts.iter().map(|t| t.weights.len()).max().unwrap_or(0);
            let lines: Vec<Series> = (0..n)
                .map(|j| {
                    series(
                        &format!("p_{}", j + 1),
                        ts.iter()
                            .filter_map(|t| t.weights.get(j).map(|&w| (t.round as f64, w)))
                            .collect(),
                    )
                })
                .collect();
            let path = out_dir.join(format!("dr_client_{client}.svg"));
            let title = format!("Directed relationships on client {client}");
            write_text(&path, &line_chart_svg(&title, "round", "weight", &lines))?;
            written.push(path);
        }
    }
    Ok(written)
}
