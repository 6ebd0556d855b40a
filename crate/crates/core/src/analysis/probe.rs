//! Linear probes on frozen features.
//!
//! * classification: linear softmax classifier, cross-entropy;
//! * dense segmentation: trained batch norm (affine, momentum 0.1) followed
//!   by a linear per-patch classifier, cross-entropy;
//! * dense depth: linear regressor, squared error.
//!
//! Training is plain minibatch SGD over a seeded shuffle. Features are never
//! updated. All probe arithmetic runs in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

/// Learning rates searched for the image-level classification probe.
pub const CLASSIFICATION_LR_GRID: [f64; 13] = [
    1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1,
];
/// Full-benchmark schedule of the segmentation head.
pub const SEGMENTATION_ITERS: usize = 40_000;
/// Full-benchmark schedule of the depth probe.
pub const DEPTH_ITERS: usize = 38_400;
/// Full-benchmark schedule of the classification probe.
pub const CLASSIFICATION_ITERS: usize = 12_500;
pub const DENSE_LR: f64 = 1e-3;

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    Classification,
    DenseSeg,
    DenseDepth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTargets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Depth(Vec<f64>),
}

impl ProbeTargets {
    pub fn len(&self) -> usize {
        match self {
            ProbeTargets::Classes { labels, .. } => labels.len(),
            ProbeTargets::Depth(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    /// When set, one probe per rate; the best on the eval split is returned.
    pub lr_grid: Option<Vec<f64>>,
    /// Steps averaged into each loss-curve point.
    pub log_every: usize,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            lr: DENSE_LR,
            iters: 1000,
            batch: 64,
            seed: 0,
            lr_grid: None,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Top1,
    MeanIou,
    Rmse,
}

impl MetricKind {
    fn better(self, a: f64, b: f64) -> bool {
        match self {
            MetricKind::Rmse => a < b,
            _ => a > b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMember {
    pub lr: f64,
    /// `None` when this rate diverged.
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub input_dim: usize,
    pub log_every: usize,
    pub loss_curve: Vec<f64>,
    pub metric_kind: MetricKind,
    pub metric: f64,
    pub grid: Option<Vec<GridMember>>,
}

/// Trained probe parameters.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    task: ProbeTask,
    /// `[d × outputs]`
    weight: Vec<f64>,
    bias: Vec<f64>,
    d: usize,
    outputs: usize,
    bn: Option<BatchNorm>,
}

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
        }
    }

    /// Normalises with batch statistics and updates the running estimates.
    /// Returns the normalised inputs `x̂` (before the affine map).
    fn train_forward(&mut self, rows: &[&[f64]]) -> Vec<Vec<f64>> {
        let d = self.gamma.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, &v), &m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for j in 0..d {
            let biased = var[j] / n;
            let unbiased = if rows.len() > 1 { var[j] / (n - 1.0) } else { biased };
            self.running_mean[j] = (1.0 - BN_MOMENTUM) * self.running_mean[j] + BN_MOMENTUM * mean[j];
            self.running_var[j] = (1.0 - BN_MOMENTUM) * self.running_var[j] + BN_MOMENTUM * unbiased;
            var[j] = biased;
        }
        rows.iter()
            .map(|r| {
                (0..d)
                    .map(|j| (r[j] - mean[j]) / (var[j] + BN_EPS).sqrt())
                    .collect()
            })
            .collect()
    }

    fn eval_forward(&self, row: &[f64]) -> Vec<f64> {
        (0..self.gamma.len())
            .map(|j| {
                let xhat = (row[j] - self.running_mean[j]) / (self.running_var[j] + BN_EPS).sqrt();
                self.gamma[j] * xhat + self.beta[j]
            })
            .collect()
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    z.iter_mut().for_each(|v| *v /= total);
}

impl LinearProbe {
    fn new(task: ProbeTask, d: usize, outputs: usize) -> Self {
        Self {
            task,
            weight: vec![0.0; d * outputs],
            bias: vec![0.0; outputs],
            d,
            outputs,
            bn: (task == ProbeTask::DenseSeg).then(|| BatchNorm::new(d)),
        }
    }

    fn linear(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            let w = &self.weight[i * self.outputs..(i + 1) * self.outputs];
            for (o, &wi) in out.iter_mut().zip(w) {
                *o += xi * wi;
            }
        }
        out
    }

    /// Raw outputs (logits or depth) for one feature row, in eval mode.
    pub fn predict_row(&self, x: &[f64]) -> Vec<f64> {
        match &self.bn {
            Some(bn) => self.linear(&bn.eval_forward(x)),
            None => self.linear(x),
        }
    }

    /// One SGD step on a minibatch. Returns the mean batch loss.
    fn step(&mut self, rows: &[&[f64]], targets: &ProbeTargets, idx: &[usize], lr: f64) -> f64 {
        let b = rows.len() as f64;
        // BN: inputs are x̂ before the affine map; the head sees γ x̂ + β.
        let xhat = self.bn.as_mut().map(|bn| bn.train_forward(rows));
        let inputs: Vec<Vec<f64>> = match (&xhat, &self.bn) {
            (Some(xh), Some(bn)) => xh
                .iter()
                .map(|r| r.iter().zip(&bn.gamma).zip(&bn.beta).map(|((x, g), be)| g * x + be).collect())
                .collect(),
            _ => rows.iter().map(|r| r.to_vec()).collect(),
        };

        let mut grad_w = vec![0.0; self.weight.len()];
        let mut grad_b = vec![0.0; self.outputs];
        let mut grad_in = vec![vec![0.0; self.d]; rows.len()];
        let mut loss = 0.0;
        for (n, x) in inputs.iter().enumerate() {
            let mut out = self.linear(x);
            let dout: Vec<f64> = match targets {
                ProbeTargets::Classes { labels, .. } => {
                    let y = labels[idx[n]];
                    softmax_in_place(&mut out);
                    loss -= out[y].max(f64::MIN_POSITIVE).ln();
                    out[y] -= 1.0;
                    out
                }
                ProbeTargets::Depth(depth) => {
                    let r = out[0] - depth[idx[n]];
                    loss += 0.5 * r * r;
                    vec![r]
                }
            };
            for (i, &xi) in x.iter().enumerate() {
                let gw = &mut grad_w[i * self.outputs..(i + 1) * self.outputs];
                for (g, &d) in gw.iter_mut().zip(&dout) {
                    *g += xi * d;
                }
            }
            for (g, &d) in grad_b.iter_mut().zip(&dout) {
                *g += d;
            }
            if self.bn.is_some() {
                for (i, gi) in grad_in[n].iter_mut().enumerate() {
                    let w = &self.weight[i * self.outputs..(i + 1) * self.outputs];
                    *gi = w.iter().zip(&dout).map(|(a, b)| a * b).sum();
                }
            }
        }
        if let (Some(bn), Some(xh)) = (self.bn.as_mut(), &xhat) {
            for j in 0..self.d {
                let dgamma: f64 = (0..rows.len()).map(|n| grad_in[n][j] * xh[n][j]).sum();
                let dbeta: f64 = (0..rows.len()).map(|n| grad_in[n][j]).sum();
                bn.gamma[j] -= lr * dgamma / b;
                bn.beta[j] -= lr * dbeta / b;
            }
        }
        for (w, g) in self.weight.iter_mut().zip(&grad_w) {
            *w -= lr * g / b;
        }
        for (w, g) in self.bias.iter_mut().zip(&grad_b) {
            *w -= lr * g / b;
        }
        loss / b
    }

    fn metric_kind(&self) -> MetricKind {
        match self.task {
            ProbeTask::Classification => MetricKind::Top1,
            ProbeTask::DenseSeg => MetricKind::MeanIou,
            ProbeTask::DenseDepth => MetricKind::Rmse,
        }
    }

    /// Eval-mode metric over a dataset.
    pub fn evaluate(&self, x: &Tensor<f64>, targets: &ProbeTargets) -> f64 {
        match targets {
            ProbeTargets::Classes { labels, n_classes } => {
                let preds: Vec<usize> = x
                    .rows()
                    .map(|r| {
                        let out = self.predict_row(r);
                        (0..out.len()).fold(0, |best, k| if out[k] > out[best] { k } else { best })
                    })
                    .collect();
                match self.task {
                    ProbeTask::DenseSeg => mean_iou(&preds, labels, *n_classes),
                    _ => top1(&preds, labels),
                }
            }
            ProbeTargets::Depth(depth) => {
                let preds: Vec<f64> = x.rows().map(|r| self.predict_row(r)[0]).collect();
                rmse(&preds, depth)
            }
        }
    }
}

pub fn top1(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Mean IoU over classes that occur in either predictions or labels.
pub fn mean_iou(preds: &[usize], labels: &[usize], n_classes: usize) -> f64 {
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[l] += 1;
        }
    }
    let present: Vec<f64> = (0..n_classes)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> f64 {
    let mse = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / targets.len().max(1) as f64;
    mse.sqrt()
}

fn validate(task: ProbeTask, x: &Tensor<f64>, targets: &ProbeTargets, what: &str) -> Result<()> {
    if x.ndim() != 2 || x.dim(0) == 0 {
        return Err(Error::dim("train_linear_probe", x.shape(), &[targets.len()]));
    }
    if x.dim(0) != targets.len() {
        return Err(Error::dim("train_linear_probe", x.shape(), &[targets.len()]));
    }
    if !x.is_finite() {
        return Err(Error::Validation(format!("{what} features contain non-finite values")));
    }
    match (task, targets) {
        (ProbeTask::DenseDepth, ProbeTargets::Depth(d)) => {
            if let Some(i) = d.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Validation(format!("{what} depth target {i} is not positive")));
            }
        }
        (ProbeTask::Classification | ProbeTask::DenseSeg, ProbeTargets::Classes { labels, n_classes }) => {
            if *n_classes < 2 {
                return Err(Error::Validation("need at least two classes".into()));
            }
            if let Some(i) = labels.iter().position(|&l| l >= *n_classes) {
                return Err(Error::Validation(format!("{what} label {i} out of range")));
            }
        }
        _ => {
            return Err(Error::Validation(format!("targets do not match task {task:?}")));
        }
    }
    Ok(())
}

fn train_once(
    task: ProbeTask,
    x: &Tensor<f64>,
    targets: &ProbeTargets,
    hyper: &ProbeHyper,
    lr: f64,
) -> Result<(LinearProbe, Vec<f64>)> {
    let outputs = match targets {
        ProbeTargets::Classes { n_classes, .. } => *n_classes,
        ProbeTargets::Depth(_) => 1,
    };
    let n = x.dim(0);
    let batch = hyper.batch.clamp(1, n);
    let log_every = hyper.log_every.max(1);
    let mut probe = LinearProbe::new(task, x.dim(1), outputs);
    let mut rng = Rng::new(hyper.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut curve = Vec::with_capacity(hyper.iters.div_ceil(log_every));
    let mut window = (0.0, 0usize);
    for step in 0..hyper.iters {
        if cursor + batch > n {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let rows: Vec<&[f64]> = idx.iter().map(|&i| x.row(i)).collect();
        let loss = probe.step(&rows, targets, idx, lr);
        if !loss.is_finite() || probe.weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::Divergence { step, lr });
        }
        window.0 += loss;
        window.1 += 1;
        if window.1 == log_every || step + 1 == hyper.iters {
            curve.push(window.0 / window.1 as f64);
            window = (0.0, 0);
        }
    }
    Ok((probe, curve))
}

/// Trains a linear probe on frozen features and reports the eval metric.
///
/// Without an eval split the metric is computed on the training data.
pub fn train_linear_probe<S: Scalar>(
    task: ProbeTask,
    features: &Tensor<S>,
    targets: &ProbeTargets,
    eval: Option<(&Tensor<S>, &ProbeTargets)>,
    hyper: &ProbeHyper,
) -> Result<ProbeReport> {
    let x = features.cast::<f64>();
    validate(task, &x, targets, "train")?;
    let eval = eval.map(|(f, t)| (f.cast::<f64>(), t));
    if let Some((ex, et)) = &eval {
        validate(task, ex, et, "eval")?;
        if ex.dim(1) != x.dim(1) {
            return Err(Error::dim("train_linear_probe (eval)", ex.shape(), x.shape()));
        }
    }
    if hyper.iters == 0 {
        return Err(Error::InvalidArgument("probe needs at least one iteration".into()));
    }
    let (ex, et) = match &eval {
        Some((ex, et)) => (ex, *et),
        None => (&x, targets),
    };

    let rates = hyper.lr_grid.clone().unwrap_or_else(|| vec![hyper.lr]);
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    let mut members = Vec::with_capacity(rates.len());
    let mut first_err = None;
    let metric_kind = LinearProbe::new(task, 1, 1).metric_kind();
    for &lr in &rates {
        match train_once(task, &x, targets, hyper, lr) {
            Ok((probe, curve)) => {
                let m = probe.evaluate(ex, et);
                members.push(GridMember { lr, metric: Some(m) });
                if best.as_ref().is_none_or(|(_, bm, _)| metric_kind.better(m, *bm)) {
                    best = Some((lr, m, curve));
                }
            }
            Err(e) => {
                members.push(GridMember { lr, metric: None });
                first_err.get_or_insert(e);
            }
        }
    }
    let (lr, metric, loss_curve) = match best {
        Some(b) => b,
        None => return Err(first_err.expect("at least one rate was tried")),
    };
    Ok(ProbeReport {
        task,
        iters: hyper.iters,
        lr,
        batch: hyper.batch,
        seed: hyper.seed,
        input_dim: x.dim(1),
        log_every: hyper.log_every.max(1),
        loss_curve,
        metric_kind,
        metric,
        grid: hyper.lr_grid.as_ref().map(|_| members),
    })
}
