//! Round-based federation engine: broadcast, local training, upload
//! accounting, server-side averaging, and evaluation.
//!
//! Devices own their state exclusively while training; the server acts as a
//! barrier. All randomness comes from per-device streams, so results do not
//! depend on how many workers execute the devices.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DeviceShard;
use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::models::{Batch, MlpSpec};
use crate::optimizers::{
    done_local_direction, fedavg_local_step, sophia_local_step, OptimizerState, SophiaConfig,
};
use crate::telemetry::EnergyLedger;

/// Which local update a device runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "fed-sophia")]
    FedSophia,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "done")]
    Done,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::FedSophia => "fed-sophia",
            Algorithm::FedAvg => "fedavg",
            Algorithm::Done => "done",
        })
    }
}

/// Plain-SGD baseline parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedAvgConfig {
    pub eta: f64,
    pub local_iters: usize,
    pub batch_size: usize,
}

impl Default for FedAvgConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            local_iters: 10,
            batch_size: 512,
        }
    }
}

impl FedAvgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config("fedavg.eta must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("fedavg.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Richardson-iteration (approximate Newton) baseline parameters. Each local
/// iteration consumes the device's full train shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoneConfig {
    /// Step size applied to the solved direction.
    pub eta: f64,
    /// Richardson relaxation factor.
    pub alpha: f64,
    /// Richardson iterations per direction solve.
    pub richardson_iters: usize,
    pub local_iters: usize,
}

impl Default for DoneConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            alpha: 0.05,
            richardson_iters: 50,
            local_iters: 10,
        }
    }
}

impl DoneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config("done.eta must be > 0".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("done.alpha must be > 0".into()));
        }
        if self.richardson_iters == 0 {
            return Err(Error::Config("done.richardson_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Resolved per-round local update parameters.
#[derive(Debug, Clone)]
pub enum LocalUpdate {
    Sophia(SophiaConfig),
    FedAvg(FedAvgConfig),
    Done(DoneConfig),
}

impl LocalUpdate {
    pub fn local_iters(&self) -> usize {
        match self {
            LocalUpdate::Sophia(c) => c.local_iters,
            LocalUpdate::FedAvg(c) => c.local_iters,
            LocalUpdate::Done(c) => c.local_iters,
        }
    }
}

/// One simulated client: its shard, local model, optimizer state, energy
/// ledger, and private RNG streams.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: usize,
    pub train: crate::data::Dataset,
    pub test: crate::data::Dataset,
    pub theta: ParamVector,
    pub opt: OptimizerState,
    pub ledger: EnergyLedger,
    batch_rng: ChaCha8Rng,
    gnb_rng: ChaCha8Rng,
    perm: Vec<usize>,
    cursor: usize,
}

impl DeviceState {
    pub fn new(
        id: usize,
        shard: DeviceShard,
        theta0: &ParamVector,
        batch_seed: u64,
        gnb_seed: u64,
    ) -> Self {
        let train_len = shard.train.len();
        Self {
            id,
            train: shard.train,
            test: shard.test,
            theta: theta0.clone(),
            opt: OptimizerState::zeros(theta0.len()),
            ledger: EnergyLedger::default(),
            batch_rng: ChaCha8Rng::seed_from_u64(batch_seed),
            gnb_rng: ChaCha8Rng::seed_from_u64(gnb_seed),
            perm: (0..train_len).collect(),
            // Start past the end so the first draw reshuffles into epoch 0.
            cursor: train_len,
        }
    }

    /// Next mini-batch, sampled without replacement within an epoch and
    /// reshuffled at each epoch boundary. An incomplete tail smaller than
    /// the batch is dropped when the epoch turns over.
    pub fn next_batch(&mut self, batch_size: usize) -> Batch {
        use rand::seq::SliceRandom;
        let take = batch_size.min(self.train.len());
        if self.cursor + take > self.perm.len() {
            self.perm.shuffle(&mut self.batch_rng);
            self.cursor = 0;
        }
        let idx = &self.perm[self.cursor..self.cursor + take];
        self.cursor += take;
        let subset = self.train.subset(idx);
        Batch::new(subset.features, subset.labels).expect("nonempty shard")
    }

    /// The whole train shard as one batch.
    pub fn full_batch(&self) -> Batch {
        Batch::new(self.train.features.clone(), self.train.labels.clone()).expect("nonempty shard")
    }
}

/// The server's parameters.
#[derive(Debug, Clone)]
pub struct GlobalModel {
    pub theta: ParamVector,
    pub round: usize,
}

/// Per-device energy spent within one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyDelta {
    pub e_comp_j: f64,
    pub e_tx_j: f64,
    pub bits: u64,
}

/// Metrics of one communication round (round 0 is the evaluation of the
/// initial model). `tx_seconds` is the modeled round transmission time (the
/// slowest device upload); `wall_ms` is measured wall-clock for logs only
/// and never enters the metrics files, which must be byte-reproducible.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub device_deltas: Vec<EnergyDelta>,
    pub tx_seconds: f64,
    pub wall_ms: f64,
}

impl RoundRecord {
    pub fn total_e_comp_j(&self) -> f64 {
        self.device_deltas.iter().map(|d| d.e_comp_j).sum()
    }

    pub fn total_e_tx_j(&self) -> f64 {
        self.device_deltas.iter().map(|d| d.e_tx_j).sum()
    }

    pub fn total_bits(&self) -> u64 {
        self.device_deltas.iter().map(|d| d.bits).sum()
    }
}

/// Overwrite every device's local model with the global parameters.
pub fn broadcast(global: &GlobalModel, devices: &mut [DeviceState], reset_moments: bool) {
    for device in devices.iter_mut() {
        device.theta = global.theta.clone();
        if reset_moments {
            device.opt = OptimizerState::zeros(global.theta.len());
        }
    }
}

/// Run the configured number of local iterations on one device and charge
/// its ledger one computation unit per iteration. Mini-batch methods are
/// charged at the mini-batch FLOP cost; the full-shard baseline is charged
/// proportionally to the data it actually consumes.
pub fn local_round(
    device: &mut DeviceState,
    spec: &MlpSpec,
    update: &LocalUpdate,
    joules_per_flop: f64,
) -> Result<()> {
    let flops_sample = spec.training_flops_per_sample();
    match update {
        LocalUpdate::Sophia(cfg) => {
            let b_eff = cfg.batch_size.min(device.train.len());
            for _ in 0..cfg.local_iters {
                let batch = device.next_batch(cfg.batch_size);
                let step = sophia_local_step(
                    spec,
                    &device.theta,
                    &device.opt,
                    cfg,
                    &batch,
                    &mut device.gnb_rng,
                )?;
                device.theta = step.theta_next;
                device.opt = step.state;
            }
            device
                .ledger
                .charge_computation(cfg.local_iters as u64, flops_sample * b_eff as f64 * joules_per_flop);
        }
        LocalUpdate::FedAvg(cfg) => {
            let b_eff = cfg.batch_size.min(device.train.len());
            for _ in 0..cfg.local_iters {
                let batch = device.next_batch(cfg.batch_size);
                device.theta = fedavg_local_step(spec, &device.theta, cfg.eta, &batch)?;
            }
            device
                .ledger
                .charge_computation(cfg.local_iters as u64, flops_sample * b_eff as f64 * joules_per_flop);
        }
        LocalUpdate::Done(cfg) => {
            let shard = device.train.len();
            for _ in 0..cfg.local_iters {
                let batch = device.full_batch();
                let gradient = spec.gradient(&device.theta, &batch)?;
                let direction = done_local_direction(
                    spec,
                    &device.theta,
                    &gradient,
                    &batch,
                    cfg.alpha,
                    cfg.richardson_iters,
                )?;
                device.theta = device.theta.sub(&direction.scale(cfg.eta))?;
            }
            device
                .ledger
                .charge_computation(cfg.local_iters as u64, flops_sample * shard as f64 * joules_per_flop);
        }
    }
    Ok(())
}

/// Componentwise arithmetic mean of the uploaded models.
pub fn aggregate(models: &[ParamVector]) -> Result<ParamVector> {
    let first = models
        .first()
        .ok_or_else(|| Error::Capacity("nothing to aggregate".into()))?;
    let mut sum = vec![0.0; first.len()];
    for model in models {
        if model.len() != first.len() {
            return Err(Error::Shape(format!(
                "model lengths {} vs {}",
                model.len(),
                first.len()
            )));
        }
        for (s, v) in sum.iter_mut().zip(model.iter()) {
            *s += v;
        }
    }
    let n = models.len() as f64;
    Ok(ParamVector::from_vec(sum.into_iter().map(|s| s / n).collect()))
}

/// Global-model accuracy and mean cross-entropy over the union of all
/// device test shards.
pub fn evaluate(
    spec: &MlpSpec,
    global: &GlobalModel,
    devices: &[DeviceState],
) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut loss_sum = 0.0;
    for device in devices {
        if device.test.is_empty() {
            return Err(Error::Capacity(format!(
                "device {} has an empty test shard",
                device.id
            )));
        }
        let logits = spec.forward_logits(&global.theta, &device.test.features)?;
        let preds = crate::models::predict_from_logits(&logits);
        correct += preds
            .iter()
            .zip(&device.test.labels)
            .filter(|(p, l)| p == l)
            .count();
        let n = device.test.len();
        loss_sum +=
            crate::models::cross_entropy_from_logits(&logits, &device.test.labels)? * n as f64;
        total += n;
    }
    Ok((correct as f64 / total as f64, loss_sum / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition, synthetic_blobs, PartitionPlan, PartitionScheme};
    use crate::seeding::{derive_seed, stream, Purpose};

    fn make_devices(n: usize, seed: u64) -> (MlpSpec, Vec<DeviceState>, GlobalModel) {
        let spec = MlpSpec::new(vec![4, 6, 3]).unwrap();
        let ds = synthetic_blobs(3, 40, 4, 0.3, seed).unwrap();
        let plan = PartitionPlan {
            device_count: n,
            scheme: PartitionScheme::Iid,
            train_fraction: 0.75,
            seed: derive_seed(seed, Purpose::Partition, 0),
        };
        let shards = partition(&ds, &plan).unwrap();
        let theta0 = spec.init_params(&mut stream(seed, Purpose::ModelInit, 0));
        let devices: Vec<DeviceState> = shards
            .into_iter()
            .enumerate()
            .map(|(i, shard)| {
                DeviceState::new(
                    i,
                    shard,
                    &theta0,
                    derive_seed(seed, Purpose::DeviceBatch, i as u64),
                    derive_seed(seed, Purpose::DeviceGnb, i as u64),
                )
            })
            .collect();
        let global = GlobalModel {
            theta: theta0,
            round: 0,
        };
        (spec, devices, global)
    }

    #[test]
    fn broadcast_copies_bitwise_and_is_idempotent() {
        let (_, mut devices, global) = make_devices(3, 1);
        for d in devices.iter_mut() {
            d.theta = ParamVector::zeros(global.theta.len());
        }
        broadcast(&global, &mut devices, false);
        for d in &devices {
            assert_eq!(d.theta, global.theta);
        }
        broadcast(&global, &mut devices, false);
        for d in &devices {
            assert_eq!(d.theta, global.theta);
        }
    }

    #[test]
    fn broadcast_on_no_devices_is_noop() {
        let global = GlobalModel {
            theta: ParamVector::zeros(4),
            round: 0,
        };
        let mut devices: Vec<DeviceState> = Vec::new();
        broadcast(&global, &mut devices, true);
        assert!(devices.is_empty());
    }

    #[test]
    fn local_round_zero_iterations_is_identity() {
        let (spec, mut devices, _) = make_devices(1, 2);
        let before = devices[0].theta.clone();
        let update = LocalUpdate::FedAvg(FedAvgConfig {
            local_iters: 0,
            ..FedAvgConfig::default()
        });
        local_round(&mut devices[0], &spec, &update, 1e-11).unwrap();
        assert_eq!(devices[0].theta, before);
        assert_eq!(devices[0].ledger.e_comp_j, 0.0);
    }

    #[test]
    fn fedavg_fixed_point_on_constant_loss_shard() {
        // Zero features + balanced labels: every gradient is exactly zero.
        let spec = MlpSpec::new(vec![2, 2]).unwrap();
        let zeros = crate::data::Dataset::new(
            crate::linalg::DenseMatrix::zeros(8, 2),
            vec![0, 1, 0, 1, 0, 1, 0, 1],
            2,
        )
        .unwrap();
        let shard = crate::data::DeviceShard {
            train: zeros.clone(),
            test: zeros,
        };
        let theta0 = ParamVector::from_vec(vec![0.4, -0.2, 0.9, 0.1, -0.5, -0.5]);
        let mut device = DeviceState::new(0, shard, &theta0, 10, 11);
        let update = LocalUpdate::FedAvg(FedAvgConfig::default());
        local_round(&mut device, &spec, &update, 1e-11).unwrap();
        assert_eq!(device.theta, theta0);
    }

    #[test]
    fn identical_devices_produce_identical_models() {
        let (spec, devices, global) = make_devices(1, 3);
        let update = LocalUpdate::Sophia(SophiaConfig {
            local_iters: 5,
            batch_size: 8,
            ..SophiaConfig::default()
        });
        let run = |mut d: DeviceState| {
            d.theta = global.theta.clone();
            local_round(&mut d, &spec, &update, 1e-11).unwrap();
            d.theta
        };
        let a = run(devices[0].clone());
        let b = run(devices[0].clone());
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_examples() {
        let mean = aggregate(&[
            ParamVector::from_vec(vec![1.0, 2.0]),
            ParamVector::from_vec(vec![3.0, 4.0]),
        ])
        .unwrap();
        assert_eq!(mean.as_slice(), &[2.0, 3.0]);

        let single = ParamVector::from_vec(vec![5.0, -1.0]);
        assert_eq!(aggregate(&[single.clone()]).unwrap(), single);

        let copies = vec![single.clone(); 7];
        assert_eq!(aggregate(&copies).unwrap(), single);
    }

    #[test]
    fn aggregate_error_cases() {
        assert!(matches!(aggregate(&[]), Err(Error::Capacity(_))));
        let out = aggregate(&[ParamVector::zeros(2), ParamVector::zeros(3)]);
        assert!(matches!(out, Err(Error::Shape(_))));
    }

    #[test]
    fn aggregate_permutation_and_scale() {
        let models = vec![
            ParamVector::from_vec(vec![1.0, -2.0, 0.5]),
            ParamVector::from_vec(vec![0.1, 0.7, -0.3]),
            ParamVector::from_vec(vec![2.2, 0.0, 1.9]),
        ];
        let base = aggregate(&models).unwrap();
        let permuted = aggregate(&[models[2].clone(), models[0].clone(), models[1].clone()])
            .unwrap();
        assert!(base.sub(&permuted).unwrap().inf_norm() < 1e-15);

        let scaled: Vec<ParamVector> = models.iter().map(|m| m.scale(3.5)).collect();
        let lhs = aggregate(&scaled).unwrap();
        let rhs = base.scale(3.5);
        assert!(lhs.sub(&rhs).unwrap().inf_norm() < 1e-12);
    }

    #[test]
    fn evaluate_perfect_model() {
        // Features are one-hot labels; a large identity weight block makes
        // every prediction correct.
        let spec = MlpSpec::new(vec![3, 3]).unwrap();
        let mut theta = ParamVector::zeros(spec.param_dim());
        for j in 0..3 {
            theta[j * 3 + j] = 100.0;
        }
        let mut features = crate::linalg::DenseMatrix::zeros(6, 3);
        let labels = vec![0, 1, 2, 2, 1, 0];
        for (r, &l) in labels.iter().enumerate() {
            features.set(r, l, 1.0);
        }
        let ds = crate::data::Dataset::new(features, labels, 3).unwrap();
        let device = DeviceState::new(
            0,
            crate::data::DeviceShard {
                train: ds.clone(),
                test: ds,
            },
            &theta,
            0,
            1,
        );
        let global = GlobalModel { theta, round: 0 };
        let (acc, loss) = evaluate(&spec, &global, &[device]).unwrap();
        assert_eq!(acc, 1.0);
        assert!(loss < 1e-12);
    }

    #[test]
    fn evaluate_untrained_model_near_chance() {
        use rand::Rng;
        // Random 10-class labels and an untrained model: accuracy sits near
        // 1/10 when averaged over seeds.
        let spec = MlpSpec::new(vec![5, 10]).unwrap();
        let mut acc_sum = 0.0;
        for seed in 0..5u64 {
            let mut rng = stream(seed, Purpose::DataGen, 9);
            let n = 1000;
            let feats = crate::linalg::DenseMatrix::new(
                n,
                5,
                (0..n * 5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
            let ds = crate::data::Dataset::new(feats, labels, 10).unwrap();
            let theta = spec.init_params(&mut stream(seed, Purpose::ModelInit, 9));
            let device = DeviceState::new(
                0,
                crate::data::DeviceShard {
                    train: ds.clone(),
                    test: ds,
                },
                &theta,
                0,
                1,
            );
            let global = GlobalModel { theta, round: 0 };
            let (acc, _) = evaluate(&spec, &global, &[device]).unwrap();
            acc_sum += acc;
        }
        let mean_acc = acc_sum / 5.0;
        assert!((mean_acc - 0.1).abs() < 0.03, "mean accuracy {mean_acc}");
    }

    #[test]
    fn evaluate_invariant_under_device_order() {
        let (spec, devices, global) = make_devices(4, 5);
        let (acc_a, loss_a) = evaluate(&spec, &global, &devices).unwrap();
        let reordered: Vec<DeviceState> = devices.iter().rev().cloned().collect();
        let (acc_b, loss_b) = evaluate(&spec, &global, &reordered).unwrap();
        assert_eq!(acc_a, acc_b);
        assert!((loss_a - loss_b).abs() < 1e-12);
    }

    #[test]
    fn round_with_zero_local_iters_is_a_fixed_point() {
        let (spec, mut devices, global) = make_devices(3, 6);
        broadcast(&global, &mut devices, false);
        let update = LocalUpdate::FedAvg(FedAvgConfig {
            local_iters: 0,
            ..FedAvgConfig::default()
        });
        for d in devices.iter_mut() {
            local_round(d, &spec, &update, 1e-11).unwrap();
        }
        let uploads: Vec<ParamVector> = devices.iter().map(|d| d.theta.clone()).collect();
        let next = aggregate(&uploads).unwrap();
        // Averaging N identical vectors reproduces them up to summation
        // rounding (exact only when N is a power of two).
        let drift = next.sub(&global.theta).unwrap().inf_norm();
        assert!(drift <= 4.0 * f64::EPSILON * global.theta.inf_norm().max(1.0));
    }
}
