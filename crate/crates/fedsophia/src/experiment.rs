//! Experiment configuration, the round-loop runner, and the metrics files.
//!
//! A run is a pure function of `(config, master seed)`: dataset synthesis,
//! partitioning, model init, batch sampling, and estimator sampling all draw
//! from streams derived from the master seed, and per-device work is
//! independent, so the output is identical for any `workers` setting.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_idx, partition, synthetic_blobs, Dataset, PartitionPlan, PartitionScheme};
use crate::error::{Error, Result};
use crate::federation::{
    aggregate, broadcast, evaluate, local_round, Algorithm, DeviceState, DoneConfig, EnergyDelta,
    FedAvgConfig, GlobalModel, LocalUpdate, RoundRecord,
};
use crate::models::MlpSpec;
use crate::optimizers::SophiaConfig;
use crate::seeding::{derive_seed, stream, Purpose};
use crate::telemetry::{ChannelConfig, EnergyLedger};

/// Exact column set of `metrics.csv`.
pub const METRICS_HEADER: [&str; 7] = [
    "round",
    "accuracy",
    "mean_loss",
    "e_comp_j",
    "e_tx_j",
    "bits",
    "seconds",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub algorithm: Algorithm,
    /// Communication rounds; 0 evaluates the initial model and stops.
    pub rounds: usize,
    /// Master seed for every derived stream.
    pub seed: u64,
    /// Parallel device workers; 0 means one per available core.
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedSophia,
            rounds: 40,
            seed: 0,
            workers: 0,
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layer_sizes: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layer_sizes: vec![784, 128, 10],
        }
    }
}

fn default_classes() -> usize {
    10
}
fn default_per_class() -> usize {
    200
}
fn default_dim() -> usize {
    784
}
fn default_spread() -> f64 {
    0.3
}

/// Where samples come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSection {
    /// Seeded Gaussian blobs (seed derived from the master seed).
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// IDX image/label file pair (uncompressed).
    Idx { images: PathBuf, labels: PathBuf },
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self::Synthetic {
            classes: default_classes(),
            per_class: default_per_class(),
            dim: default_dim(),
            spread: default_spread(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    Iid,
    LabelShard,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub devices: usize,
    pub scheme: SchemeName,
    /// Only used by the label-shard scheme.
    pub shards_per_device: usize,
    pub train_fraction: f64,
    /// Defaults to a stream derived from the master seed.
    pub seed: Option<u64>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            devices: 8,
            scheme: SchemeName::LabelShard,
            shards_per_device: 2,
            train_fraction: 0.75,
            seed: None,
        }
    }
}

impl PartitionSection {
    pub fn to_plan(&self, master_seed: u64) -> PartitionPlan {
        PartitionPlan {
            device_count: self.devices,
            scheme: match self.scheme {
                SchemeName::Iid => PartitionScheme::Iid,
                SchemeName::LabelShard => PartitionScheme::LabelShard {
                    shards_per_device: self.shards_per_device,
                },
            },
            train_fraction: self.train_fraction,
            seed: self
                .seed
                .unwrap_or_else(|| derive_seed(master_seed, Purpose::Partition, 0)),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergySection {
    /// Per-FLOP computation energy backing `e_per_iter`.
    pub joules_per_flop: f64,
    /// Carbon conversion factor for summaries.
    pub kg_co2_per_megajoule: f64,
}

impl Default for EnergySection {
    fn default() -> Self {
        Self {
            joules_per_flop: 1e-11,
            kg_co2_per_megajoule: 0.132,
        }
    }
}

/// Full experiment description as read from a TOML config file. Every field
/// has a default, and the resolved form (defaults filled in, overrides
/// applied) is what `resolved-config.json` records.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub sophia: SophiaConfig,
    pub fedavg: FedAvgConfig,
    pub done: DoneConfig,
    pub channel: ChannelConfig,
    pub energy: EnergySection,
}

impl ExperimentConfig {
    /// Parse a TOML config file. Parse failures carry the toml crate's
    /// line/column diagnostics.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Static validation: everything checkable without loading data.
    pub fn validate(&self) -> Result<()> {
        MlpSpec::new(self.model.layer_sizes.clone())?;
        self.sophia.validate()?;
        self.fedavg.validate()?;
        self.done.validate()?;
        self.channel.validate()?;
        if !(self.energy.joules_per_flop >= 0.0) {
            return Err(Error::Config("energy.joules_per_flop must be >= 0".into()));
        }
        if !(self.energy.kg_co2_per_megajoule >= 0.0) {
            return Err(Error::Config(
                "energy.kg_co2_per_megajoule must be >= 0".into(),
            ));
        }
        self.partition.to_plan(self.experiment.seed).validate()?;
        match &self.dataset {
            DatasetSection::Synthetic {
                classes,
                per_class,
                dim,
                spread,
            } => {
                if *classes < 2 || *per_class == 0 {
                    return Err(Error::Config(
                        "synthetic dataset needs classes >= 2 and per_class >= 1".into(),
                    ));
                }
                if !(spread.is_finite() && *spread >= 0.0) {
                    return Err(Error::Config("spread must be finite and >= 0".into()));
                }
                if *dim != self.model.layer_sizes[0] {
                    return Err(Error::Config(format!(
                        "dataset dim {dim} does not match model input {}",
                        self.model.layer_sizes[0]
                    )));
                }
                if *classes != *self.model.layer_sizes.last().unwrap() {
                    return Err(Error::Config(format!(
                        "dataset classes {classes} do not match model output {}",
                        self.model.layer_sizes.last().unwrap()
                    )));
                }
            }
            DatasetSection::Idx { images, labels } => {
                for p in [images, labels] {
                    if !p.exists() {
                        return Err(Error::Config(format!(
                            "dataset file not found: {}",
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Copy with CLI overrides applied and derived defaults made explicit.
    pub fn resolved(
        &self,
        seed: Option<u64>,
        out: Option<PathBuf>,
        workers: Option<usize>,
    ) -> ExperimentConfig {
        let mut cfg = self.clone();
        if let Some(s) = seed {
            cfg.experiment.seed = s;
        }
        if let Some(o) = out {
            cfg.experiment.output_dir = Some(o);
        }
        if let Some(w) = workers {
            cfg.experiment.workers = w;
        }
        cfg.partition.seed = Some(cfg.partition.to_plan(cfg.experiment.seed).seed);
        cfg.experiment.workers = cfg.worker_count();
        cfg
    }

    pub fn worker_count(&self) -> usize {
        let w = self.experiment.workers;
        if w == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            w
        }
    }

    fn local_update(&self) -> LocalUpdate {
        match self.experiment.algorithm {
            Algorithm::FedSophia => LocalUpdate::Sophia(self.sophia.clone()),
            Algorithm::FedAvg => LocalUpdate::FedAvg(self.fedavg.clone()),
            Algorithm::Done => LocalUpdate::Done(self.done.clone()),
        }
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        let ds = match &self.dataset {
            DatasetSection::Synthetic {
                classes,
                per_class,
                dim,
                spread,
            } => synthetic_blobs(
                *classes,
                *per_class,
                *dim,
                *spread,
                derive_seed(self.experiment.seed, Purpose::DataGen, 0),
            )?,
            DatasetSection::Idx { images, labels } => load_idx(images, labels)?,
        };
        if ds.feature_dim() != self.model.layer_sizes[0] {
            return Err(Error::Config(format!(
                "dataset feature dim {} does not match model input {}",
                ds.feature_dim(),
                self.model.layer_sizes[0]
            )));
        }
        if ds.class_count > *self.model.layer_sizes.last().unwrap() {
            return Err(Error::Config(format!(
                "dataset has {} classes but the model outputs {}",
                ds.class_count,
                self.model.layer_sizes.last().unwrap()
            )));
        }
        Ok(ds)
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<RoundRecord>,
    pub ledgers: Vec<EnergyLedger>,
    pub param_dim: usize,
}

impl ExperimentOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.accuracy)
    }

    pub fn final_mean_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.mean_loss)
    }
}

/// Run the configured experiment, invoking `on_round` as each round record
/// is produced (the CLI streams rows to disk through this hook so partial
/// metrics survive a failure).
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, mut on_round: F) -> Result<ExperimentOutcome>
where
    F: FnMut(&RoundRecord) -> Result<()>,
{
    cfg.validate()?;
    let spec = MlpSpec::new(cfg.model.layer_sizes.clone())?;
    let master = cfg.experiment.seed;
    let dataset = cfg.build_dataset()?;
    let shards = partition(&dataset, &cfg.partition.to_plan(master))?;

    let theta0 = spec.init_params(&mut stream(master, Purpose::ModelInit, 0));
    let mut devices: Vec<DeviceState> = shards
        .into_iter()
        .enumerate()
        .map(|(i, shard)| {
            DeviceState::new(
                i,
                shard,
                &theta0,
                derive_seed(master, Purpose::DeviceBatch, i as u64),
                derive_seed(master, Purpose::DeviceGnb, i as u64),
            )
        })
        .collect();
    let mut global = GlobalModel {
        theta: theta0,
        round: 0,
    };

    let update = cfg.local_update();
    let workers = cfg.worker_count().max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let jpf = cfg.energy.joules_per_flop;
    let param_dim = spec.param_dim();

    let mut records = Vec::with_capacity(cfg.experiment.rounds + 1);
    let start = Instant::now();
    let (accuracy, mean_loss) = evaluate(&spec, &global, &devices)?;
    let initial = RoundRecord {
        round: 0,
        accuracy,
        mean_loss,
        device_deltas: devices
            .iter()
            .map(|_| EnergyDelta {
                e_comp_j: 0.0,
                e_tx_j: 0.0,
                bits: 0,
            })
            .collect(),
        tx_seconds: 0.0,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    log_round(&initial);
    on_round(&initial)?;
    records.push(initial);

    for round in 1..=cfg.experiment.rounds {
        let round_start = Instant::now();
        broadcast(&global, &mut devices, reset_moments(cfg));
        let before: Vec<EnergyLedger> = devices.iter().map(|d| d.ledger).collect();

        if workers == 1 {
            for device in devices.iter_mut() {
                local_round(device, &spec, &update, jpf)?;
            }
        } else {
            pool.install(|| {
                devices
                    .par_iter_mut()
                    .map(|device| local_round(device, &spec, &update, jpf))
                    .collect::<Result<Vec<()>>>()
            })?;
        }

        // Upload accounting: one parameter vector per device per round.
        let mut tx_seconds = 0.0f64;
        for device in devices.iter_mut() {
            let secs = device.ledger.charge_transmission(param_dim, &cfg.channel);
            tx_seconds = tx_seconds.max(secs);
        }

        let uploads: Vec<_> = devices.iter().map(|d| d.theta.clone()).collect();
        global.theta = aggregate(&uploads)?;
        global.round = round;

        let (accuracy, mean_loss) = evaluate(&spec, &global, &devices)?;
        let record = RoundRecord {
            round,
            accuracy,
            mean_loss,
            device_deltas: devices
                .iter()
                .zip(&before)
                .map(|(d, b)| EnergyDelta {
                    e_comp_j: d.ledger.e_comp_j - b.e_comp_j,
                    e_tx_j: d.ledger.e_tx_j - b.e_tx_j,
                    bits: d.ledger.bits_sent - b.bits_sent,
                })
                .collect(),
            tx_seconds,
            wall_ms: round_start.elapsed().as_secs_f64() * 1e3,
        };
        log_round(&record);
        on_round(&record)?;
        records.push(record);
    }

    Ok(ExperimentOutcome {
        records,
        ledgers: devices.iter().map(|d| d.ledger).collect(),
        param_dim,
    })
}

fn reset_moments(cfg: &ExperimentConfig) -> bool {
    matches!(cfg.experiment.algorithm, Algorithm::FedSophia)
        && cfg.sophia.reset_moments_on_broadcast
}

fn log_round(r: &RoundRecord) {
    log::info!(
        "round {}: accuracy={:.4} mean_loss={:.4} e_comp={:.3e}J e_tx={:.3e}J wall={:.1}ms",
        r.round,
        r.accuracy,
        r.mean_loss,
        r.total_e_comp_j(),
        r.total_e_tx_j(),
        r.wall_ms
    );
}

/// Run an experiment without streaming.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_with(cfg, |_| Ok(()))
}

/// Streaming `metrics.csv` writer; each row is flushed as it lands so a
/// failed run still leaves partial metrics behind.
pub struct MetricsWriter {
    inner: csv::Writer<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        let mut inner = csv::Writer::from_writer(file);
        inner
            .write_record(METRICS_HEADER)
            .map_err(csv_error)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &RoundRecord) -> Result<()> {
        self.inner
            .write_record([
                r.round.to_string(),
                r.accuracy.to_string(),
                r.mean_loss.to_string(),
                r.total_e_comp_j().to_string(),
                r.total_e_tx_j().to_string(),
                r.total_bits().to_string(),
                r.tx_seconds.to_string(),
            ])
            .map_err(csv_error)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Serialize)]
struct DeviceSummary {
    id: usize,
    e_comp_j: f64,
    e_tx_j: f64,
    total_j: f64,
    bits_sent: u64,
    rounds: u64,
    carbon_kg: f64,
}

#[derive(Debug, Serialize)]
struct EnergyTotals {
    e_comp_j: f64,
    e_tx_j: f64,
    total_j: f64,
    bits_sent: u64,
    carbon_kg: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    algorithm: Algorithm,
    rounds: usize,
    param_dim: usize,
    final_accuracy: f64,
    final_mean_loss: f64,
    aggregate: EnergyTotals,
    devices: Vec<DeviceSummary>,
}

/// Write `summary.json`: final metrics plus per-device and aggregate energy.
pub fn write_summary_json(
    path: &Path,
    cfg: &ExperimentConfig,
    outcome: &ExperimentOutcome,
) -> Result<()> {
    let factor = cfg.energy.kg_co2_per_megajoule;
    let devices: Vec<DeviceSummary> = outcome
        .ledgers
        .iter()
        .enumerate()
        .map(|(id, l)| DeviceSummary {
            id,
            e_comp_j: l.e_comp_j,
            e_tx_j: l.e_tx_j,
            total_j: l.total_joules(),
            bits_sent: l.bits_sent,
            rounds: l.rounds,
            carbon_kg: l.carbon_kg(factor),
        })
        .collect();
    let agg = EnergyTotals {
        e_comp_j: devices.iter().map(|d| d.e_comp_j).sum(),
        e_tx_j: devices.iter().map(|d| d.e_tx_j).sum(),
        total_j: devices.iter().map(|d| d.total_j).sum(),
        bits_sent: devices.iter().map(|d| d.bits_sent).sum(),
        carbon_kg: devices.iter().map(|d| d.carbon_kg).sum(),
    };
    let summary = Summary {
        algorithm: cfg.experiment.algorithm,
        rounds: cfg.experiment.rounds,
        param_dim: outcome.param_dim,
        final_accuracy: outcome.final_accuracy(),
        final_mean_loss: outcome.final_mean_loss(),
        aggregate: agg,
        devices,
    };
    write_json(path, &summary)
}

/// Write `resolved-config.json` with every default actually used.
pub fn write_resolved_config_json(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_json(path, cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    file.write_all(text.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

/// One cell of a hyperparameter sweep.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub eta: f64,
    pub local_iters: usize,
    pub final_accuracy: Option<f64>,
    pub status: String,
}

/// Run the cross-product of `etas x local_iters_grid` on the configured
/// algorithm. Failed cells are recorded, not fatal.
pub fn run_sweep(
    base: &ExperimentConfig,
    etas: &[f64],
    local_iters_grid: &[usize],
) -> Result<Vec<SweepCell>> {
    if etas.is_empty() || local_iters_grid.is_empty() {
        return Err(Error::Config("sweep grid must not be empty".into()));
    }
    let mut cells = Vec::with_capacity(etas.len() * local_iters_grid.len());
    for &eta in etas {
        for &local_iters in local_iters_grid {
            let mut cfg = base.clone();
            match cfg.experiment.algorithm {
                Algorithm::FedSophia => {
                    cfg.sophia.eta = eta;
                    cfg.sophia.local_iters = local_iters;
                }
                Algorithm::FedAvg => {
                    cfg.fedavg.eta = eta;
                    cfg.fedavg.local_iters = local_iters;
                }
                Algorithm::Done => {
                    cfg.done.eta = eta;
                    cfg.done.local_iters = local_iters;
                }
            }
            let cell = match run_experiment(&cfg) {
                Ok(outcome) => SweepCell {
                    eta,
                    local_iters,
                    final_accuracy: Some(outcome.final_accuracy()),
                    status: "ok".into(),
                },
                Err(e) => SweepCell {
                    eta,
                    local_iters,
                    final_accuracy: None,
                    status: format!("error: {e}"),
                },
            };
            log::info!(
                "sweep cell eta={eta} J={local_iters}: {}",
                cell.final_accuracy
                    .map_or_else(|| cell.status.clone(), |a| format!("accuracy={a:.4}"))
            );
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// Write `sweep.csv`.
pub fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["eta", "local_iters", "final_accuracy", "status"])
        .map_err(csv_error)?;
    for cell in cells {
        w.write_record([
            cell.eta.to_string(),
            cell.local_iters.to_string(),
            cell.final_accuracy.map_or(String::new(), |a| a.to_string()),
            cell.status.clone(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Write `trajectory.csv` for the quadratic demonstration.
pub fn write_trajectory_csv(
    path: &Path,
    trajectory: &[crate::optimizers::TrajectoryPoint],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["step", "theta1", "theta2", "f"])
        .map_err(csv_error)?;
    for p in trajectory {
        w.write_record([
            p.step.to_string(),
            p.theta[0].to_string(),
            p.theta[1].to_string(),
            p.value.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
