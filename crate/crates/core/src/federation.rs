//! FedAvg and FedDLR training loops over simulated clients.
//!
//! Each round every client starts from the reconstruction of the last
//! broadcast, runs `R` local SGD steps, optionally truncates its weights
//! (`C2`, threshold `e_client`) and uploads. The server averages the
//! reconstructed uploads with uniform weights, optionally truncates the
//! average (`C1`, threshold `e_server`) and broadcasts it.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{check_threshold, compress_model_with, CompressedModel};
use crate::data::{load_csv, partition_iid, synth_gaussian_mixture, Dataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{
    comm_accounting, lambda_terms, CommCounts, IterSample, LipschitzProbe, MetricsLog, RoundRecord,
    RunTrace,
};
use crate::nn::{evaluate, forward_loss_grad, Batch, LrSchedule, Mlp};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    FedAvg,
    FedDlr,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Mode::FedAvg),
            "feddlr" => Ok(Mode::FedDlr),
            _ => Err(Error::InvalidConfig {
                field: "mode",
                reason: format!("expected fedavg or feddlr, got {s:?}"),
            }),
        }
    }
}

/// How the broadcast is counted in downlink traffic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BroadcastCount {
    Once,
    #[default]
    PerClient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// Gaussian mixture; the test split is generated alongside the
    /// training split from the same seed.
    Synthetic {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        separation: f64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        num_classes: usize,
    },
}

impl DataSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSpec::Synthetic { classes, .. } => *classes,
            DataSpec::Csv { num_classes, .. } => *num_classes,
        }
    }

    /// `(train, test)` datasets.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DataSpec::Synthetic {
                classes,
                dim,
                train_per_class,
                test_per_class,
                separation,
            } => {
                let all = synth_gaussian_mixture(
                    seed,
                    *classes,
                    *dim,
                    train_per_class + test_per_class,
                    *separation,
                )?;
                all.split_at(classes * train_per_class)
            }
            DataSpec::Csv {
                train,
                test,
                num_classes,
            } => Ok((
                load_csv(train, *num_classes)?,
                load_csv(test, *num_classes)?,
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    /// `K`
    pub clients: usize,
    /// `R`
    pub local_iters: usize,
    /// `T`
    pub total_iters: usize,
    /// `b`
    pub batch_size: usize,
    pub e_client: f64,
    pub e_server: f64,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub data: DataSpec,
    pub broadcast_count: BroadcastCount,
    /// Send truncated weights dense when factors would not be smaller.
    pub dense_fallback: bool,
    /// Run clients of a round on the rayon pool.
    pub parallel: bool,
    /// Record per-iteration gradient and weight statistics.
    pub capture_trace: bool,
}

impl TrainConfig {
    /// Desk-scale reference setup: 10 clients, a 32-64-64-10 MLP on a
    /// 10-class Gaussian mixture, `b = 20`, `R = 25`, `e = 0.99`, 40 rounds.
    pub fn reference() -> Self {
        Self {
            mode: Mode::FedDlr,
            clients: 10,
            local_iters: 25,
            total_iters: 1000,
            batch_size: 20,
            e_client: 0.99,
            e_server: 0.99,
            lr: LrSchedule::default(),
            seed: 2024,
            hidden: vec![64, 64],
            data: DataSpec::Synthetic {
                classes: 10,
                dim: 32,
                train_per_class: 500,
                test_per_class: 200,
                separation: 5.0,
            },
            broadcast_count: BroadcastCount::PerClient,
            dense_fallback: true,
            parallel: true,
            capture_trace: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| {
            Err(Error::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.clients == 0 {
            return bad("clients", "must be >= 1");
        }
        if self.local_iters == 0 {
            return bad("local_iters", "must be >= 1");
        }
        if self.total_iters < self.local_iters {
            return bad("total_iters", "must be >= local_iters");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "layer widths must be >= 1");
        }
        for (field, e) in [("e_client", self.e_client), ("e_server", self.e_server)] {
            check_threshold(e).map_err(|_| Error::InvalidConfig {
                field,
                reason: format!("must lie in (0, 1], got {e}"),
            })?;
        }
        self.lr.validate()?;
        if let DataSpec::Synthetic {
            classes,
            dim,
            train_per_class,
            test_per_class,
            separation,
        } = &self.data
        {
            if *classes < 2 || *dim == 0 || *train_per_class == 0 || *test_per_class == 0 {
                return bad("data", "synthetic data needs classes >= 2 and dim, train_per_class, test_per_class >= 1");
            }
            if !(*separation > 0.0 && separation.is_finite()) {
                return bad("separation", "must be finite and > 0");
            }
            if (classes * train_per_class) % self.clients != 0 {
                return bad("clients", "must divide the number of training samples");
            }
        }
        Ok(())
    }

    /// `ceil(T / R)`
    pub fn rounds(&self) -> usize {
        self.total_iters.div_ceil(self.local_iters)
    }

    /// Layer widths for a given input dimension and class count.
    pub fn dims(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut d = vec![input_dim];
        d.extend(&self.hidden);
        d.push(classes);
        d
    }

    fn compresses(&self) -> bool {
        self.mode == Mode::FedDlr
    }

    /// Threshold used for the lambda ratio; `None` at `e = 1`.
    fn lambda_threshold(&self) -> Option<f64> {
        let e = self.e_client.max(self.e_server);
        (self.compresses() && e < 1.0).then_some(e)
    }
}

/// One simulated client.
#[derive(Clone, Debug)]
pub struct ClientState {
    id: usize,
    seed: u64,
    shard: Dataset,
    model: Mlp,
    order: Vec<usize>,
    cursor: usize,
}

impl ClientState {
    pub fn new(id: usize, seed: u64, shard: Dataset, model: Mlp) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "client {id} has an empty shard"
            )));
        }
        Ok(Self {
            id,
            seed,
            shard,
            model,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shard(&self) -> &Dataset {
        &self.shard
    }

    /// Reconstruction of the last broadcast received.
    pub fn model(&self) -> &Mlp {
        &self.model
    }

    /// Next mini-batch; reshuffles when fewer than `b` unseen samples remain.
    fn next_batch(&mut self, b: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        if self.order.is_empty() || self.cursor + b > self.order.len() {
            self.order = (0..self.shard.len()).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + b];
        self.cursor += b;
        let rows = self.shard.select(idx)?;
        Batch::new(rows.features().clone(), rows.labels().to_vec())
    }

    fn full_batch(&self) -> Result<Batch> {
        Batch::new(self.shard.features().clone(), self.shard.labels().to_vec())
    }
}

/// Result of a client's local phase.
#[derive(Clone, Debug)]
pub struct LocalRun {
    /// `w~`, the local model before compression.
    pub model: Mlp,
    pub trace: Vec<IterSample>,
}

/// `iters` SGD steps from `start` using `eta = lr_at(t0 + i)`.
///
/// Mini-batches come from the client's stream for the round starting at
/// `t0`, so the outcome does not depend on scheduling.
pub fn local_train(
    client: &mut ClientState,
    start: &Mlp,
    iters: usize,
    t0: u64,
    lr: &LrSchedule,
    batch_size: usize,
    capture: bool,
) -> Result<LocalRun> {
    if batch_size > client.shard.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} exceeds shard size {} of client {}",
            client.shard.len(),
            client.id
        )));
    }
    let mut rng = stream_rng(client.seed, Stream::Client, &[client.id as u64, t0]);
    let mut model = start.clone();
    let mut trace = Vec::new();
    let mut probe = LipschitzProbe::default();
    let full = if capture {
        Some(client.full_batch()?)
    } else {
        None
    };
    for i in 0..iters {
        let t = t0 + i as u64;
        let batch = client.next_batch(batch_size, &mut rng)?;
        let (loss, grads) = forward_loss_grad(&model, &batch)?;
        let eta = lr.lr_at(t);
        if let Some(full) = &full {
            let (full_loss, full_grads) = forward_loss_grad(&model, full)?;
            let before = model.param_norm();
            let lipschitz_ratio = probe.observe(model.flatten(), full_grads.flatten());
            model.apply_sgd(&grads, eta)?;
            trace.push(IterSample {
                t,
                client: client.id,
                batch_loss: loss,
                full_loss,
                batch_grad_norm: grads.norm(),
                grad_deviation: grads.distance(&full_grads),
                weight_norm_before: before,
                weight_norm_after: model.param_norm(),
                lipschitz_ratio,
            });
        } else {
            model.apply_sgd(&grads, eta)?;
        }
    }
    Ok(LocalRun { model, trace })
}

/// Uniform average of the reconstructed uploads.
pub fn aggregate(uploads: &[CompressedModel]) -> Result<Mlp> {
    let (first, rest) = uploads
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("aggregate needs at least one upload".into()))?;
    if let Some(bad) = rest.iter().position(|u| !u.same_shape(first)) {
        return Err(Error::InvalidArgument(format!(
            "upload {} does not match the shape of upload 0",
            bad + 1
        )));
    }
    let mut sum = first.reconstruct();
    for u in rest {
        for (acc, layer) in sum
            .layers_mut()
            .iter_mut()
            .zip(u.reconstruct().into_layers())
        {
            acc.weight = acc.weight.add(&layer.weight)?;
            acc.bias
                .iter_mut()
                .zip(&layer.bias)
                .for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / uploads.len() as f64;
    for layer in sum.layers_mut() {
        layer.weight = layer.weight.scale(inv);
        layer.bias.iter_mut().for_each(|b| *b *= inv);
    }
    Ok(sum)
}

/// Server side: the last broadcast, the round counter and the global
/// iteration of every completed aggregation.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub global: CompressedModel,
    pub round: usize,
    pub aggregation_iters: Vec<u64>,
}

impl ServerState {
    /// The initial model counts as the first (unrecorded) broadcast.
    pub fn new(initial: &Mlp) -> Self {
        Self {
            global: CompressedModel::uncompressed(initial),
            round: 0,
            aggregation_iters: Vec::new(),
        }
    }
}

/// Everything a round produces besides the new server state.
#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub uploads: Vec<CompressedModel>,
    pub comm: CommCounts,
    pub lambdas: Option<Vec<Vec<f64>>>,
    pub drift: Vec<Vec<f64>>,
    pub trace: Vec<IterSample>,
    /// Global iteration of the aggregation.
    pub t: u64,
}

/// One communication round starting at global iteration `t0` with `iters`
/// local steps. Clients end up holding the new broadcast's reconstruction.
pub fn feddlr_round(
    server: &ServerState,
    clients: &mut [ClientState],
    t0: u64,
    iters: usize,
    cfg: &TrainConfig,
) -> Result<(ServerState, RoundOutput)> {
    let round = server.round;
    let prev = server.global.reconstruct();
    let work = |c: &mut ClientState| -> Result<(Mlp, CompressedModel, Vec<IterSample>)> {
        let id = c.id;
        let wrap = |e: Error| e.in_round(round, Some(id));
        let run = local_train(
            c,
            &prev,
            iters,
            t0,
            &cfg.lr,
            cfg.batch_size,
            cfg.capture_trace,
        )
        .map_err(wrap)?;
        let upload = if cfg.compresses() {
            compress_model_with(&run.model, cfg.e_client, cfg.dense_fallback).map_err(wrap)?
        } else {
            CompressedModel::uncompressed(&run.model)
        };
        Ok((run.model, upload, run.trace))
    };
    let results: Vec<_> = if cfg.parallel {
        clients.par_iter_mut().map(work).collect()
    } else {
        clients.iter_mut().map(work).collect()
    };
    let mut locals = Vec::with_capacity(clients.len());
    let mut uploads = Vec::with_capacity(clients.len());
    let mut trace = Vec::new();
    for r in results {
        let (local, upload, tr) = r?;
        locals.push(local);
        uploads.push(upload);
        trace.extend(tr);
    }

    let wrap = |e: Error| e.in_round(round, None);
    let average = aggregate(&uploads).map_err(wrap)?;
    let broadcast = if cfg.compresses() {
        compress_model_with(&average, cfg.e_server, cfg.dense_fallback).map_err(wrap)?
    } else {
        CompressedModel::uncompressed(&average)
    };

    let weights =
        |m: &Mlp| -> Vec<Matrix> { m.layers().iter().map(|l| l.weight.clone()).collect() };
    let prev_w = weights(&prev);
    let avg_w = weights(&average);
    let lambda_e = cfg.lambda_threshold();
    let mut lambdas = Vec::with_capacity(clients.len());
    let mut drift = Vec::with_capacity(clients.len());
    for (k, (local, upload)) in locals.iter().zip(&uploads).enumerate() {
        let wt = weights(local);
        let c2 = weights(&upload.reconstruct());
        let terms = lambda_terms(&wt, &prev_w, &c2, &avg_w, lambda_e.unwrap_or(0.5))
            .map_err(|e| e.in_round(round, Some(k)))?;
        drift.push(terms.iter().map(|l| l.numerator).collect());
        lambdas.push(terms.into_iter().map(|l| l.lambda).collect());
    }

    let comm = comm_accounting(&uploads, &broadcast, cfg.broadcast_count);
    let reconstructed = broadcast.reconstruct();
    for c in clients.iter_mut() {
        c.model = reconstructed.clone();
    }
    let t = t0 + iters as u64 - 1;
    let mut aggregation_iters = server.aggregation_iters.clone();
    aggregation_iters.push(t);
    Ok((
        ServerState {
            global: broadcast,
            round: round + 1,
            aggregation_iters,
        },
        RoundOutput {
            uploads,
            comm,
            lambdas: lambda_e.map(|_| lambdas),
            drift,
            trace,
            t,
        },
    ))
}

/// A training run in progress.
pub struct Federation {
    cfg: TrainConfig,
    train: Dataset,
    test: Dataset,
    clients: Vec<ClientState>,
    server: ServerState,
    next_t: u64,
    log: MetricsLog,
}

impl Federation {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = cfg.data.load(cfg.seed)?;
        Self::with_data(cfg, train, test)
    }

    /// Runs on explicit datasets; `cfg.data` is only echoed.
    pub fn with_data(cfg: TrainConfig, train: Dataset, test: Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
            return Err(Error::InvalidArgument(
                "train and test data disagree in shape".into(),
            ));
        }
        let shards = partition_iid(&train, cfg.clients, cfg.seed)?;
        let dims = cfg.dims(train.dim(), train.num_classes());
        let w0 = Mlp::init(&dims, &mut stream_rng(cfg.seed, Stream::Init, &[]))?;
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| ClientState::new(id, cfg.seed, shard, w0.clone()))
            .collect::<Result<Vec<_>>>()?;
        let initial_train = evaluate(&w0, &train)?;
        let initial_test = evaluate(&w0, &test)?;
        let log = MetricsLog {
            config: cfg.clone(),
            layer_shapes: w0.layers().iter().map(|l| l.weight.shape()).collect(),
            initial_train_loss: initial_train.mean_loss,
            initial_test_acc: initial_test.accuracy,
            records: Vec::new(),
            trace: cfg.capture_trace.then(RunTrace::default),
        };
        Ok(Self {
            server: ServerState::new(&w0),
            cfg,
            train,
            test,
            clients,
            next_t: 0,
            log,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn global_model(&self) -> Mlp {
        self.server.global.reconstruct()
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn is_finished(&self) -> bool {
        self.next_t >= self.cfg.total_iters as u64
    }

    /// Runs the next round; `None` once all `T` iterations are done.
    pub fn step(&mut self) -> Result<Option<&RoundRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let started = Instant::now();
        let t0 = self.next_t;
        let iters = (self.cfg.total_iters as u64 - t0).min(self.cfg.local_iters as u64) as usize;
        let (server, out) = feddlr_round(&self.server, &mut self.clients, t0, iters, &self.cfg)?;
        self.server = server;
        self.next_t += iters as u64;

        let global = self.server.global.reconstruct();
        let round = self.server.round - 1;
        let train = evaluate(&global, &self.train).map_err(|e| e.in_round(round, None))?;
        let test = evaluate(&global, &self.test).map_err(|e| e.in_round(round, None))?;
        let (cum_params, cum_bytes) = self
            .log
            .records
            .last()
            .map_or((0, 0), |r| (r.cum_params, r.cum_bytes));
        let c = out.comm;
        if let Some(trace) = &mut self.log.trace {
            trace.samples.extend(out.trace);
        }
        self.log.records.push(RoundRecord {
            round,
            t: out.t,
            upload_ranks: out.uploads.iter().map(CompressedModel::ranks).collect(),
            broadcast_ranks: self.server.global.ranks(),
            uplink_params_per_client: out
                .uploads
                .iter()
                .map(CompressedModel::transmitted_params)
                .collect(),
            uplink_params: c.uplink_params,
            downlink_params: c.downlink_params,
            uplink_bytes: c.uplink_bytes,
            downlink_bytes: c.downlink_bytes,
            cum_params: cum_params + (c.uplink_params + c.downlink_params) as u64,
            cum_bytes: cum_bytes + (c.uplink_bytes + c.downlink_bytes) as u64,
            train_loss: train.mean_loss,
            test_acc: test.accuracy,
            lambdas: out.lambdas,
            drift: out.drift,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        let rec = self.log.records.last().expect("just pushed");
        log::info!(
            "round {} t={} acc={:.4} loss={:.4} params={} ranks={:?}",
            rec.round,
            rec.t,
            rec.test_acc,
            rec.train_loss,
            rec.round_params(),
            rec.broadcast_ranks
        );
        Ok(Some(rec))
    }

    /// Runs to completion, handing each record and new global model to
    /// `observer`.
    pub fn run_with(mut self, mut observer: impl FnMut(&RoundRecord, &Mlp)) -> Result<MetricsLog> {
        while !self.is_finished() {
            self.step()?;
            let global = self.global_model();
            observer(self.log.records.last().expect("round recorded"), &global);
        }
        Ok(self.log)
    }

    pub fn run(mut self) -> Result<MetricsLog> {
        while self.step()?.is_some() {}
        Ok(self.log)
    }
}

pub fn run_training(cfg: &TrainConfig) -> Result<MetricsLog> {
    Federation::new(cfg.clone())?.run()
}

/// [`run_training`] with a per-round observer of the new global model.
pub fn run_training_observed(
    cfg: &TrainConfig,
    observer: impl FnMut(&RoundRecord, &Mlp),
) -> Result<MetricsLog> {
    Federation::new(cfg.clone())?.run_with(observer)
}
