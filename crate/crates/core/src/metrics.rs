//! Per-round bookkeeping and diagnostics: communication counts, rank traces,
//! the lambda ratio behind the rank-monotonicity guarantee, MAC accounting,
//! and the convergence-bound evaluator with empirical constant estimates.

use std::io::Write;

use serde::Serialize;

use crate::compression::wire::model_bytes;
use crate::compression::{factored_is_smaller, CompressedModel};
use crate::error::{Error, Result};
use crate::federation::{BroadcastCount, TrainConfig};
use crate::linalg::{frobenius_norm, Matrix};

/// Everything measured at one aggregation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    /// Zero-based aggregation index `h`.
    pub round: usize,
    /// Global iteration at which the aggregation happens.
    pub t: u64,
    /// `[client][layer]`; `None` when weights were sent untruncated.
    pub upload_ranks: Vec<Vec<Option<usize>>>,
    pub broadcast_ranks: Vec<Option<usize>>,
    pub uplink_params_per_client: Vec<usize>,
    pub uplink_params: usize,
    pub downlink_params: usize,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
    pub cum_params: u64,
    pub cum_bytes: u64,
    /// Full training-set loss of the broadcast model.
    pub train_loss: f64,
    pub test_acc: f64,
    /// `[client][layer]`, only when compression is active with `e < 1`.
    pub lambdas: Option<Vec<Vec<f64>>>,
    /// `[client][layer]` numerator of lambda (weight drift since the last
    /// broadcast).
    pub drift: Vec<Vec<f64>>,
    pub wall_time_s: f64,
}

impl RoundRecord {
    pub fn round_params(&self) -> usize {
        self.uplink_params + self.downlink_params
    }

    /// Largest lambda per layer across clients.
    pub fn lambda_max(&self) -> Option<Vec<f64>> {
        let lambdas = self.lambdas.as_ref()?;
        let layers = lambdas.first().map_or(0, Vec::len);
        Some(
            (0..layers)
                .map(|l| {
                    lambdas
                        .iter()
                        .map(|c| c[l])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect(),
        )
    }
}

/// Per-iteration quantities recorded when trace capture is on.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterSample {
    pub t: u64,
    pub client: usize,
    pub batch_loss: f64,
    /// Full-shard loss at the iterate the step started from.
    pub full_loss: f64,
    pub batch_grad_norm: f64,
    /// `|| g_batch - g_full ||`
    pub grad_deviation: f64,
    pub weight_norm_before: f64,
    pub weight_norm_after: f64,
    /// `|| grad f(x) - grad f(y) || / || x - y ||` against the previous iterate.
    pub lipschitz_ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunTrace {
    pub samples: Vec<IterSample>,
}

/// Tracks consecutive iterates and their gradients for the smoothness
/// estimate. Pairs with a zero step are skipped.
#[derive(Clone, Debug, Default)]
pub struct LipschitzProbe {
    prev: Option<(Vec<f64>, Vec<f64>)>,
}

impl LipschitzProbe {
    pub fn observe(&mut self, params: Vec<f64>, grad: Vec<f64>) -> Option<f64> {
        let ratio = self.prev.as_ref().and_then(|(px, pg)| {
            let dx = l2_dist(&params, px);
            (dx > 0.0).then(|| l2_dist(&grad, pg) / dx)
        });
        self.prev = Some((params, grad));
        ratio
    }
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Output of a full training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsLog {
    pub config: TrainConfig,
    /// `(out, in)` of every weight matrix.
    pub layer_shapes: Vec<(usize, usize)>,
    /// Global training loss and test accuracy of the initial model.
    pub initial_train_loss: f64,
    pub initial_test_acc: f64,
    pub records: Vec<RoundRecord>,
    pub trace: Option<RunTrace>,
}

impl MetricsLog {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_acc)
    }

    pub fn total_params(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cum_params)
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cum_bytes)
    }

    /// Cumulative parameters sent when test accuracy first reaches `target`.
    pub fn params_to_reach(&self, target: f64) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.test_acc >= target)
            .map(|r| r.cum_params)
    }

    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_wall_time(&self) -> Self {
        let mut c = self.clone();
        c.records.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        c
    }

    /// Metrics CSV, one row per round. `wall_time_s` is the last column.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let layers = self.layer_shapes.len();
        let mut header: Vec<String> = [
            "round",
            "t",
            "uplink_params",
            "downlink_params",
            "cum_params",
            "uplink_bytes",
            "downlink_bytes",
            "train_loss",
            "test_acc",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for l in 0..layers {
            header.push(format!("rank_L{l}"));
            header.push(format!("lambda_max_L{l}"));
        }
        header.push("wall_time_s".into());
        w.write_record(&header).map_err(csv_err)?;

        for r in &self.records {
            let mut row = vec![
                r.round.to_string(),
                r.t.to_string(),
                r.uplink_params.to_string(),
                r.downlink_params.to_string(),
                r.cum_params.to_string(),
                r.uplink_bytes.to_string(),
                r.downlink_bytes.to_string(),
                r.train_loss.to_string(),
                r.test_acc.to_string(),
            ];
            let lambda_max = r.lambda_max();
            for l in 0..layers {
                row.push(r.broadcast_ranks[l].map_or("NA".into(), |k| k.to_string()));
                row.push(
                    lambda_max
                        .as_ref()
                        .map_or("NA".into(), |lm| lm[l].to_string()),
                );
            }
            row.push(format!("{:.6}", r.wall_time_s));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Traffic of one round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CommCounts {
    pub uplink_params: usize,
    pub downlink_params: usize,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
}

/// Uplink sums every client's upload; downlink counts the broadcast once or
/// once per client.
pub fn comm_accounting(
    uploads: &[CompressedModel],
    broadcast: &CompressedModel,
    mode: BroadcastCount,
) -> CommCounts {
    let copies = match mode {
        BroadcastCount::Once => 1,
        BroadcastCount::PerClient => uploads.len(),
    };
    CommCounts {
        uplink_params: uploads
            .iter()
            .map(CompressedModel::transmitted_params)
            .sum(),
        downlink_params: copies * broadcast.transmitted_params(),
        uplink_bytes: uploads.iter().map(model_bytes).sum(),
        downlink_bytes: copies * model_bytes(broadcast),
    }
}

/// Per-layer weight drift and lambda for one client.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaEval {
    /// `max(||w~ - w_prev||, ||C2(w~) - w_prev||)`
    pub numerator: f64,
    pub lambda: f64,
}

/// `lambda = max(||w~ - w_prev||, ||C2(w~) - w_prev||)
///           / (sqrt(1 - e) * min(||w~||, ||avg C2||))` per layer.
///
/// A zero denominator yields `+inf` (with a warning). `e` must be below 1.
pub fn lambda_diagnostic(
    w_tilde: &[Matrix],
    w_prev: &[Matrix],
    c2_w_tilde: &[Matrix],
    avg_c2: &[Matrix],
    e: f64,
) -> Result<Vec<f64>> {
    Ok(lambda_terms(w_tilde, w_prev, c2_w_tilde, avg_c2, e)?
        .into_iter()
        .map(|l| l.lambda)
        .collect())
}

pub fn lambda_terms(
    w_tilde: &[Matrix],
    w_prev: &[Matrix],
    c2_w_tilde: &[Matrix],
    avg_c2: &[Matrix],
    e: f64,
) -> Result<Vec<LambdaEval>> {
    if !(e > 0.0 && e < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda needs e in (0, 1), got {e}"
        )));
    }
    let n = w_tilde.len();
    if w_prev.len() != n || c2_w_tilde.len() != n || avg_c2.len() != n {
        return Err(Error::InvalidArgument(
            "lambda inputs have different layer counts".into(),
        ));
    }
    let scale = (1.0 - e).sqrt();
    (0..n)
        .map(|l| {
            let numerator = f64::max(
                w_tilde[l].sub(&w_prev[l])?.frobenius_norm(),
                c2_w_tilde[l].sub(&w_prev[l])?.frobenius_norm(),
            );
            if avg_c2[l].shape() != w_tilde[l].shape() {
                return Err(Error::ShapeMismatch {
                    op: "lambda_diagnostic",
                    left: w_tilde[l].shape(),
                    right: avg_c2[l].shape(),
                });
            }
            let denom = scale * f64::min(frobenius_norm(&w_tilde[l]), frobenius_norm(&avg_c2[l]));
            let lambda = if denom > 0.0 {
                numerator / denom
            } else {
                log::warn!("lambda denominator is zero for layer {l}; reporting +inf");
                f64::INFINITY
            };
            Ok(LambdaEval { numerator, lambda })
        })
        .collect()
}

/// Static inference cost of an MLP, per sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MacReport {
    pub dense_macs: u64,
    pub lowrank_macs: u64,
    pub params_dense: u64,
    pub params_lowrank: u64,
    pub mac_ratio: f64,
}

/// MACs and parameters for widths `dims` (input first).
///
/// A dense `m x n` layer costs `m n` MACs; a rank-`r` layer applied as
/// `U (V a)` costs `r (m + n)` when that is strictly cheaper, else it is
/// counted dense. Biases add parameters but no MACs.
pub fn mac_count(dims: &[usize], ranks: Option<&[usize]>) -> Result<MacReport> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("bad architecture {dims:?}")));
    }
    let layers = dims.len() - 1;
    if let Some(r) = ranks {
        if r.len() != layers {
            return Err(Error::InvalidArgument(format!(
                "{} ranks for {layers} layers",
                r.len()
            )));
        }
    }
    let mut rep = MacReport {
        dense_macs: 0,
        lowrank_macs: 0,
        params_dense: 0,
        params_lowrank: 0,
        mac_ratio: 1.0,
    };
    for l in 0..layers {
        let (n, m) = (dims[l] as u64, dims[l + 1] as u64);
        let dense = m * n;
        let low = match ranks.map(|r| r[l]) {
            None => dense,
            Some(r) if r == 0 || r as u64 > m.min(n) => {
                return Err(Error::InvalidArgument(format!(
                    "rank {r} out of range for {m}x{n} layer {l}"
                )))
            }
            Some(r) if factored_is_smaller(m as usize, n as usize, r) => r as u64 * (m + n),
            Some(_) => dense,
        };
        rep.dense_macs += dense;
        rep.lowrank_macs += low;
        rep.params_dense += dense + m;
        rep.params_lowrank += low + m;
    }
    rep.mac_ratio = mac_ratio(rep.dense_macs as f64, rep.lowrank_macs as f64);
    Ok(rep)
}

pub fn mac_ratio(dense_macs: f64, lowrank_macs: f64) -> f64 {
    dense_macs / lowrank_macs
}

/// Constants of the convergence bound. The `*_bound`, `lipschitz` and
/// `grad_variance` fields are empirical lower estimates when produced by
/// [`estimate_constants`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceConstants {
    /// `L`
    pub lipschitz: f64,
    /// `G1`
    pub grad_bound: f64,
    /// `G2`
    pub weight_bound: f64,
    /// `G3`
    pub weight_drift_bound: f64,
    /// `delta`
    pub grad_variance: f64,
    pub f_star: f64,
    /// `H`
    pub aggregations: usize,
    pub batch_size: usize,
    pub clients: usize,
    pub local_iters: usize,
    pub total_iters: usize,
    pub e: f64,
    pub eta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundTerms {
    /// `(f0 - f*) / (eta T)`
    pub initial_gap: f64,
    /// `eta L delta^2 / (b K)`
    pub sgd_noise: f64,
    /// `2 eta^2 L^2 G1^2 R^2`
    pub client_drift: f64,
    /// `4 (1 - e^2) H L^2 G2^2 / T`
    pub compression: f64,
    pub total: f64,
}

/// Right-hand side of the average-gradient-norm bound, term by term.
pub fn bound_rhs(c: &ConvergenceConstants, f0: f64) -> Result<BoundTerms> {
    if c.total_iters == 0
        || c.batch_size == 0
        || c.clients == 0
        || c.local_iters == 0
        || !(c.eta > 0.0)
    {
        return Err(Error::InvalidArgument(
            "bound needs T, b, K, R >= 1 and eta > 0".into(),
        ));
    }
    let t = c.total_iters as f64;
    let l2 = c.lipschitz * c.lipschitz;
    let initial_gap = (f0 - c.f_star) / (c.eta * t);
    let sgd_noise =
        c.eta * c.lipschitz * c.grad_variance.powi(2) / (c.batch_size * c.clients) as f64;
    let client_drift =
        2.0 * c.eta.powi(2) * l2 * c.grad_bound.powi(2) * (c.local_iters as f64).powi(2);
    let compression =
        4.0 * (1.0 - c.e * c.e) * c.aggregations as f64 * l2 * c.weight_bound.powi(2) / t;
    Ok(BoundTerms {
        initial_gap,
        sgd_noise,
        client_drift,
        compression,
        total: initial_gap + sgd_noise + client_drift + compression,
    })
}

/// Empirical constants from a traced run: maxima of the observed gradient
/// norms, weight norms, gradient deviations, weight drifts and smoothness
/// ratios, and the smallest observed loss as `f*`.
pub fn estimate_constants(log: &MetricsLog) -> Result<ConvergenceConstants> {
    let trace = log
        .trace
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("run has no trace; enable trace capture".into()))?;
    let cfg = &log.config;
    let mut c = estimate_from_trace(trace)?;
    c.weight_drift_bound = log
        .records
        .iter()
        .flat_map(|r| r.drift.iter().flatten())
        .fold(0.0, |a, &b| f64::max(a, b));
    c.f_star = log
        .records
        .iter()
        .map(|r| r.train_loss)
        .fold(c.f_star.min(log.initial_train_loss), f64::min);
    c.aggregations = log.records.len();
    c.batch_size = cfg.batch_size;
    c.clients = cfg.clients;
    c.local_iters = cfg.local_iters;
    c.total_iters = cfg.total_iters;
    c.e = cfg.e_client.min(cfg.e_server);
    c.eta = cfg.lr.eta0;
    Ok(c)
}

/// Trace-only part of [`estimate_constants`]; run-level fields are zero.
pub fn estimate_from_trace(trace: &RunTrace) -> Result<ConvergenceConstants> {
    if trace.samples.is_empty() {
        return Err(Error::InvalidArgument("trace is empty".into()));
    }
    let max = |f: &dyn Fn(&IterSample) -> f64| trace.samples.iter().map(f).fold(0.0, f64::max);
    Ok(ConvergenceConstants {
        lipschitz: max(&|s| s.lipschitz_ratio.unwrap_or(0.0)),
        grad_bound: max(&|s| s.batch_grad_norm),
        weight_bound: max(&|s| s.weight_norm_before.max(s.weight_norm_after)),
        weight_drift_bound: 0.0,
        grad_variance: max(&|s| s.grad_deviation),
        f_star: trace
            .samples
            .iter()
            .map(|s| s.full_loss)
            .fold(f64::INFINITY, f64::min),
        aggregations: 0,
        batch_size: 0,
        clients: 0,
        local_iters: 0,
        total_iters: 0,
        e: 1.0,
        eta: 0.0,
    })
}

/// One (round, layer) check of the rank-monotonicity guarantee.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankCheck {
    pub round: usize,
    pub layer: usize,
    /// Every client's lambda for this layer is at most 1.
    pub lambda_ok: bool,
    pub prev_broadcast_rank: usize,
    pub broadcast_rank: usize,
    pub max_upload_rank: usize,
}

impl RankCheck {
    pub fn broadcast_non_increasing(&self) -> bool {
        self.broadcast_rank <= self.prev_broadcast_rank
    }

    pub fn uploads_bounded(&self) -> bool {
        self.max_upload_rank <= self.prev_broadcast_rank
    }

    pub fn holds(&self) -> bool {
        self.broadcast_non_increasing() && self.uploads_bounded()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankMonotonicity {
    pub checks: Vec<RankCheck>,
    /// Share of recorded (layer, client, round) lambdas that are `<= 1`.
    pub lambda_le_one_fraction: f64,
}

impl RankMonotonicity {
    /// Checks where lambda <= 1 held but a rank still grew.
    pub fn violations(&self) -> Vec<&RankCheck> {
        self.checks
            .iter()
            .filter(|c| c.lambda_ok && !c.holds())
            .collect()
    }

    pub fn lambda_ok_rounds(&self) -> usize {
        let mut rounds: Vec<usize> = self
            .checks
            .iter()
            .filter(|c| c.lambda_ok)
            .map(|c| c.round)
            .collect();
        rounds.dedup();
        rounds.len()
    }
}

/// Rank trace against the previous broadcast. The initial model counts as a
/// full-rank broadcast. `None` when the run recorded no lambdas.
pub fn rank_monotonicity(log: &MetricsLog) -> Option<RankMonotonicity> {
    let mut prev: Vec<usize> = log.layer_shapes.iter().map(|&(m, n)| m.min(n)).collect();
    let mut checks = Vec::new();
    let (mut ok, mut total) = (0usize, 0usize);
    for r in &log.records {
        let lambdas = r.lambdas.as_ref()?;
        let mut next = Vec::with_capacity(prev.len());
        for (l, &prev_rank) in prev.iter().enumerate() {
            let lambda_ok = lambdas.iter().all(|c| c[l] <= 1.0);
            total += lambdas.len();
            ok += lambdas.iter().filter(|c| c[l] <= 1.0).count();
            let broadcast_rank = r.broadcast_ranks[l]?;
            let max_upload_rank = r
                .upload_ranks
                .iter()
                .map(|c| c[l])
                .collect::<Option<Vec<_>>>()?
                .into_iter()
                .max()
                .unwrap_or(0);
            checks.push(RankCheck {
                round: r.round,
                layer: l,
                lambda_ok,
                prev_broadcast_rank: prev_rank,
                broadcast_rank,
                max_upload_rank,
            });
            next.push(broadcast_rank);
        }
        prev = next;
    }
    Some(RankMonotonicity {
        checks,
        lambda_le_one_fraction: if total == 0 {
            0.0
        } else {
            ok as f64 / total as f64
        },
    })
}

/// Run summary written next to the metrics CSV.
#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub config: TrainConfig,
    pub rounds: usize,
    pub final_accuracy: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub total_params: u64,
    pub total_bytes: u64,
    pub final_broadcast_ranks: Option<Vec<Option<usize>>>,
    pub rank_monotonicity: Option<MonotonicitySummary>,
    /// Present when the run captured a trace.
    pub constants: Option<ConvergenceConstants>,
    pub bound_terms: Option<BoundTerms>,
    pub constants_note: Option<&'static str>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MonotonicitySummary {
    pub lambda_le_one_fraction: f64,
    pub checked: usize,
    pub checked_with_lambda_le_one: usize,
    pub violations: usize,
}

impl Summary {
    pub fn from_log(log: &MetricsLog) -> Self {
        let constants = estimate_constants(log).ok();
        let bound_terms = constants
            .as_ref()
            .and_then(|c| bound_rhs(c, log.initial_train_loss).ok());
        let rank_monotonicity = rank_monotonicity(log).map(|m| MonotonicitySummary {
            lambda_le_one_fraction: m.lambda_le_one_fraction,
            checked: m.checks.len(),
            checked_with_lambda_le_one: m.checks.iter().filter(|c| c.lambda_ok).count(),
            violations: m.violations().len(),
        });
        Self {
            config: log.config.clone(),
            rounds: log.records.len(),
            final_accuracy: log.final_accuracy(),
            final_train_loss: log.records.last().map(|r| r.train_loss),
            total_params: log.total_params(),
            total_bytes: log.total_bytes(),
            final_broadcast_ranks: log.records.last().map(|r| r.broadcast_ranks.clone()),
            rank_monotonicity,
            constants_note: constants.as_ref().map(|_| "empirical lower estimates"),
            constants,
            bound_terms,
        }
    }
}
