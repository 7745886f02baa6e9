//! Mini-batch SGD with momentum, weight decay and a step schedule.
//!
//! The update for every parameter array is
//! `v <- momentum * v - lr * (g + decay * theta); theta <- theta + v`,
//! except that displacements get no decay unless
//! [`TrainConfig::decay_on_displacements`] is set. Displacements are clamped
//! to their box after each step.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classic::softmax_xent;
use crate::data::DatasetSplit;
use crate::dau::DmuMode;
use crate::error::{Error, Result};
use crate::network::{Gradients, Network, ParamKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    /// `(epoch, lr)`: from that 0-based epoch on, the rate is `lr`.
    pub lr_steps: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dmu_mode: DmuMode,
    pub decay_on_displacements: bool,
    /// Learning-rate multiplier for displacements.
    pub mu_lr_mult: f64,
    /// Random horizontal flips with probability 0.5.
    pub mirror: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 100,
            base_lr: 0.01,
            lr_steps: vec![(75, 0.001)],
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
            dmu_mode: DmuMode::Analytic,
            decay_on_displacements: false,
            mu_lr_mult: 1.0,
            mirror: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.mu_lr_mult.is_finite() && self.mu_lr_mult >= 0.0) {
            return bad(format!("mu_lr_mult must be >= 0, got {}", self.mu_lr_mult));
        }
        if let Some((e, lr)) = self.lr_steps.iter().find(|(_, lr)| !(lr.is_finite() && *lr >= 0.0)) {
            return bad(format!("lr step at epoch {e} has invalid rate {lr}"));
        }
        Ok(())
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_steps
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .max_by_key(|(e, _)| *e)
            .map_or(self.base_lr, |&(_, lr)| lr)
    }
}

/// Momentum buffers and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f32>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed SGD steps.
    pub iteration: u64,
}

impl OptimizerState {
    pub fn new(net: &Network) -> Self {
        Self {
            velocity: net.params().iter().map(|(_, _, p)| vec![0.0; p.len()]).collect(),
            epoch: 0,
            iteration: 0,
        }
    }

    pub fn matches(&self, net: &Network) -> bool {
        let params = net.params();
        self.velocity.len() == params.len() && self.velocity.iter().zip(&params).all(|(v, (_, _, p))| v.len() == p.len())
    }
}

/// One momentum SGD update with learning rate `lr`.
pub fn sgd_step(net: &mut Network, grads: &Gradients, cfg: &TrainConfig, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if !state.matches(net) || grads.len() != state.velocity.len() {
        return Err(Error::Shape("gradients or optimizer state do not match the network".into()));
    }
    for ((layer, kind, _), g) in net.params().iter().zip(grads) {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of layer {} {kind:?} element {i} is {} at iteration {}",
                layer + 1,
                g[i],
                state.iteration
            )));
        }
    }
    let m = cfg.momentum as f32;
    for (((_, kind, theta), g), v) in net.params_mut().into_iter().zip(grads).zip(&mut state.velocity) {
        if g.len() != theta.len() {
            return Err(Error::Shape(format!("{kind:?} gradient has {} entries, expected {}", g.len(), theta.len())));
        }
        let (rate, decay) = match kind {
            ParamKind::Displacement => (
                lr * cfg.mu_lr_mult,
                if cfg.decay_on_displacements { cfg.weight_decay } else { 0.0 },
            ),
            _ => (lr, cfg.weight_decay),
        };
        let (rate, decay) = (rate as f32, decay as f32);
        for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = m * *vi - rate * (gi + decay * *t);
            *t += *vi;
        }
    }
    net.clamp_displacements();
    state.iteration += 1;
    Ok(())
}

/// Forward, loss, backward and update on one batch; returns the batch loss.
pub fn train_batch(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<f32> {
    let (logits, caches) = net.forward_train(x)?;
    let (loss, dlogits) = softmax_xent(&logits, labels)?;
    let grads = net.backward(&dlogits, caches, cfg.dmu_mode)?;
    sgd_step(net, &grads, cfg, state, lr)?;
    Ok(loss)
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    /// 1-based epoch that just finished.
    pub epoch: usize,
    /// Total SGD steps so far.
    pub iter: u64,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
    pub lr: f64,
}

/// Generator for epoch `epoch`: a separate ChaCha stream of the run seed.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn mirror_in_place(x: &mut Tensor, sample: usize) {
    let [_, c, h, w] = x.dims();
    for ch in 0..c {
        let start = x.offset(sample, ch, 0, 0);
        for row in x.data_mut()[start..start + h * w].chunks_mut(w) {
            row.reverse();
        }
    }
}

/// Trains from `state.epoch` up to `cfg.epochs`, calling `on_epoch` after
/// every epoch. With `eval` set, the row carries its top-1 accuracy.
pub fn train(
    net: &mut Network,
    data: &DatasetSplit,
    eval: Option<&DatasetSplit>,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    mut on_epoch: impl FnMut(&Network, &OptimizerState, &MetricsRow) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if !state.matches(net) {
        return Err(Error::Shape("optimizer state does not match the network".into()));
    }
    let n = data.len();
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = cfg.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut x = data.images.gather_batch(batch)?;
            if cfg.mirror {
                for b in 0..batch.len() {
                    if rng.random_bool(0.5) {
                        mirror_in_place(&mut x, b);
                    }
                }
            }
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let loss = train_batch(net, &x, &labels, cfg, state, lr)?;
            total += loss as f64 * batch.len() as f64;
        }
        state.epoch += 1;
        let row = MetricsRow {
            epoch: state.epoch,
            iter: state.iteration,
            train_loss: total / n as f64,
            eval_acc: eval.map(|e| evaluate(net, e)).transpose()?,
            lr,
        };
        on_epoch(net, state, &row)?;
        log.push(row);
    }
    Ok(log)
}

/// Batch size used for inference.
pub const EVAL_BATCH: usize = 256;

/// Class predictions; ties go to the lowest class index.
pub fn predict(net: &Network, images: &Tensor) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.batch());
    let idx: Vec<usize> = (0..images.batch()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = net.forward(&images.gather_batch(chunk)?)?;
        for b in 0..chunk.len() {
            out.push(argmax(logits.sample(b)));
        }
    }
    Ok(out)
}

fn argmax(z: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy.
pub fn evaluate(net: &Network, data: &DatasetSplit) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(net, &data.images)?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

pub const METRICS_HEADER: &str = "epoch,iter,train_loss,eval_acc,lr";

/// CSV with the columns of [`METRICS_HEADER`]; a missing accuracy is empty.
pub fn write_metrics_csv(mut out: impl Write, rows: &[MetricsRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(METRICS_HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.iter.to_string(),
            r.train_loss.to_string(),
            r.eval_acc.map(|a| a.to_string()).unwrap_or_default(),
            r.lr.to_string(),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, LayerSpec, NetworkSpec};

    fn fc_spec() -> NetworkSpec {
        NetworkSpec {
            input: [1, 3, 3],
            classes: 2,
            layers: vec![
                LayerSpec::Dau {
                    features: 2,
                    units: 2,
                    sigma: 0.5,
                    max_displacement: 1.0,
                },
                LayerSpec::Relu,
                LayerSpec::Fc { outputs: 2 },
            ],
        }
    }

    fn zeros_like(net: &Network) -> Gradients {
        net.params().iter().map(|(_, _, p)| vec![0.0; p.len()]).collect()
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            lr_steps: vec![(15, 0.001), (5, 0.005)],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(5), 0.005);
        assert_eq!(cfg.lr_at(14), 0.005);
        assert_eq!(cfg.lr_at(15), 0.001);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { base_lr: 0.0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { weight_decay: -1.0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_gradients_without_decay_change_nothing() {
        let mut net = build_network(&fc_spec(), 1).unwrap();
        let before = net.clone();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut st = OptimizerState::new(&net);
        let g = zeros_like(&net);
        sgd_step(&mut net, &g, &cfg, &mut st, 0.1).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn single_step_formula() {
        let mut net = build_network(&fc_spec(), 2).unwrap();
        let before: Vec<Vec<f32>> = net.params().iter().map(|(_, _, p)| p.to_vec()).collect();
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut st = OptimizerState::new(&net);
        let g: Gradients = before.iter().map(|p| (0..p.len()).map(|i| 0.01 * i as f32 - 0.02).collect()).collect();
        let lr = 0.5f32;
        sgd_step(&mut net, &g, &cfg, &mut st, lr as f64).unwrap();
        for (((_, kind, after), theta), gi) in net.params().iter().zip(&before).zip(&g) {
            let decay = if *kind == ParamKind::Displacement { 0.0 } else { 0.1f32 };
            for ((&a, &t), &d) in after.iter().zip(theta).zip(gi) {
                let mut expect = t + -(lr * (d + decay * t));
                if *kind == ParamKind::Displacement {
                    expect = expect.clamp(-1.0, 1.0);
                }
                assert_eq!(a, expect, "{kind:?}");
            }
        }
    }

    #[test]
    fn displacements_are_clamped() {
        let mut net = build_network(&fc_spec(), 3).unwrap();
        let mut g = zeros_like(&net);
        g[1].iter_mut().for_each(|v| *v = -100.0);
        let mut st = OptimizerState::new(&net);
        sgd_step(&mut net, &g, &TrainConfig::default(), &mut st, 1.0).unwrap();
        assert!(net.dau(0).unwrap().mu.iter().all(|m| m == &[1.0, 1.0]));
    }

    #[test]
    fn decay_spares_displacements() {
        let mut net = build_network(&fc_spec(), 4).unwrap();
        let mu0 = net.dau(0).unwrap().mu.clone();
        let w0 = net.dau(0).unwrap().w.clone();
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut st = OptimizerState::new(&net);
        let g = zeros_like(&net);
        let steps = 5;
        for _ in 0..steps {
            sgd_step(&mut net, &g, &cfg, &mut st, 0.5).unwrap();
        }
        let p = net.dau(0).unwrap();
        assert_eq!(p.mu, mu0);
        let factor = (1.0f64 - 0.05).powi(steps);
        for (a, b) in p.w.iter().zip(&w0) {
            assert!((*a as f64 - *b as f64 * factor).abs() < 1e-6);
        }
        let cfg = TrainConfig {
            decay_on_displacements: true,
            ..cfg
        };
        sgd_step(&mut net, &g, &cfg, &mut st, 0.5).unwrap();
        assert_ne!(net.dau(0).unwrap().mu, mu0);
    }

    #[test]
    fn non_finite_gradients_abort() {
        let mut net = build_network(&fc_spec(), 5).unwrap();
        let before = net.clone();
        let mut g = zeros_like(&net);
        g[0][1] = f32::NAN;
        let mut st = OptimizerState::new(&net);
        let err = sgd_step(&mut net, &g, &TrainConfig::default(), &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(net, before);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 10]), 0);
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![MetricsRow {
            epoch: 1,
            iter: 4,
            train_loss: 0.5,
            eval_acc: None,
            lr: 0.01,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,iter,train_loss,eval_acc,lr\n1,4,0.5,,0.01\n");
    }
}
