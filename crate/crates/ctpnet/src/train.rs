//! L1/Adam training loop, MSE/MAE evaluation and run records.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::model::{CtpNet, CtpNetConfig};
use crate::tensor::{Parameter, Tensor};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience on validation MAE.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.eps <= 0.0 {
            return Err(Error::ConfigInvalid("lr must be >= 0 and eps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::ConfigInvalid("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::ConfigInvalid(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::ConfigInvalid(
                "patience must be in 1..=max_epochs".into(),
            ));
        }
        Ok(())
    }
}

/// Aggregated squared/absolute error over all forecast elements.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub n: usize,
}

#[derive(Default)]
struct MetricsAcc {
    se_sum: f64,
    ae_sum: f64,
    n: usize,
}

impl MetricsAcc {
    fn update(&mut self, pred: &[f64], target: &[f64]) {
        for (p, t) in pred.iter().zip(target) {
            let e = p - t;
            self.se_sum += e * e;
            self.ae_sum += e.abs();
        }
        self.n += pred.len();
    }

    fn finish(self) -> Metrics {
        Metrics {
            mse: self.se_sum / self.n as f64,
            mae: self.ae_sum / self.n as f64,
            n: self.n,
        }
    }
}

/// Mean absolute error as a differentiable scalar.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "l1_loss operands {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.sub(target)?.abs().mean_all())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(metrics_of(pred, target)?.mse)
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(metrics_of(pred, target)?.mae)
}

pub fn metrics_of(pred: &Tensor, target: &Tensor) -> Result<Metrics> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "metric operands {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut acc = MetricsAcc::default();
    acc.update(pred.data(), target.data());
    Ok(acc.finish())
}

/// Bias-corrected Adam over a fixed parameter list.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, param_sizes: &[usize]) -> Adam {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update from each parameter's accumulated gradient. Parameters
    /// whose gradient never arrived are treated as zero-gradient.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "optimizer/model parameter count");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (pi, p) in params.iter_mut().enumerate() {
            let g = p.grad_or_zeros();
            let mut data = p.value().data().to_vec();
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

/// One experiment's provenance and outcome; the unit the harness logs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub variant: String,
    pub horizon: usize,
    pub interval: usize,
    pub seed: u64,
    pub model_config: CtpNetConfig,
    pub train_config: TrainConfig,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_mae: Vec<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub diverged_at: Option<usize>,
    pub test: Option<Metrics>,
    pub wall_s: f64,
    pub version: String,
}

/// Stacks windows into (B, N_c, L_in), (B, N_c, L_out) and start indices.
pub fn assemble_batch(windows: &[&WindowSample]) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let first = windows
        .first()
        .ok_or_else(|| Error::DataEmpty("empty batch".into()))?;
    let (n_c, l_in) = (first.x_in.shape()[0], first.x_in.shape()[1]);
    let l_out = first.x_target.shape()[1];
    let b = windows.len();
    let mut x = Vec::with_capacity(b * n_c * l_in);
    let mut y = Vec::with_capacity(b * n_c * l_out);
    let mut ts = Vec::with_capacity(b);
    for w in windows {
        if w.x_in.shape() != [n_c, l_in] || w.x_target.shape() != [n_c, l_out] {
            return Err(Error::ShapeMismatch("ragged window batch".into()));
        }
        x.extend_from_slice(w.x_in.data());
        y.extend_from_slice(w.x_target.data());
        ts.push(w.t);
    }
    Ok((
        Tensor::from_vec(x, &[b, n_c, l_in])?,
        Tensor::from_vec(y, &[b, n_c, l_out])?,
        ts,
    ))
}

/// Mini-batch L1/Adam training with early stopping on validation MAE and
/// best-epoch weight restoration. Deterministic for a fixed seed.
pub fn train(
    model: &mut CtpNet,
    train_windows: &[WindowSample],
    val_windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(Error::DataEmpty("no training windows".into()));
    }
    if val_windows.is_empty() {
        return Err(Error::DataEmpty("no validation windows".into()));
    }
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let mut adam = Adam::new(cfg, &sizes);

    let mut record = RunRecord {
        dataset: String::new(),
        variant: String::new(),
        horizon: model.config.l_out,
        interval: model.config.p,
        seed: cfg.seed,
        model_config: model.config.clone(),
        train_config: cfg.clone(),
        epoch_train_loss: Vec::new(),
        epoch_val_mae: Vec::new(),
        epochs_run: 0,
        best_epoch: 0,
        diverged_at: None,
        test: None,
        wall_s: 0.0,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };

    let mut indices: Vec<usize> = (0..train_windows.len()).collect();
    let mut best_val = f64::INFINITY;
    let mut best_weights: Option<Vec<Vec<f64>>> = None;
    let mut bad_epochs = 0usize;

    'epochs: for epoch in 1..=cfg.max_epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_weight = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let (x, y, ts) = assemble_batch(&batch)?;
            let pred = model.forward(&x, &ts)?;
            let loss = l1_loss(&pred, &y)?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                record.diverged_at = Some(epoch);
                record.epochs_run = epoch;
                break 'epochs;
            }
            loss_sum += loss_val * chunk.len() as f64;
            loss_weight += chunk.len();
            loss.backward()?;
            adam.step(&mut model.params_mut())?;
        }
        record.epoch_train_loss.push(loss_sum / loss_weight as f64);
        record.epochs_run = epoch;

        let val = evaluate(model, val_windows)?;
        record.epoch_val_mae.push(val.mae);
        if val.mae < best_val {
            best_val = val.mae;
            record.best_epoch = epoch;
            best_weights = Some(
                model
                    .params()
                    .iter()
                    .map(|p| p.value().data().to_vec())
                    .collect(),
            );
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break;
            }
        }
    }

    if let Some(weights) = best_weights {
        for (p, w) in model.params_mut().into_iter().zip(weights) {
            p.set_data(w)?;
        }
    }
    record.wall_s = started.elapsed().as_secs_f64();
    Ok(record)
}

/// MSE/MAE over every window, aggregated across all forecast elements.
pub fn evaluate(model: &CtpNet, windows: &[WindowSample]) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::DataEmpty("no evaluation windows".into()));
    }
    let mut acc = MetricsAcc::default();
    let mut i = 0;
    while i < windows.len() {
        let end = (i + EVAL_BATCH).min(windows.len());
        let batch: Vec<&WindowSample> = windows[i..end].iter().collect();
        let (x, y, ts) = assemble_batch(&batch)?;
        let pred = model.forward(&x, &ts)?;
        acc.update(pred.data(), y.data());
        i = end;
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, synthetic};

    fn tiny_config() -> CtpNetConfig {
        CtpNetConfig {
            l_in: 8,
            l_out: 4,
            p: 2,
            w: 6,
            d: 4,
            h_c: 2,
            h_b: 2,
            n_channels: 1,
            ablate_i1: false,
            ablate_i2: false,
            ablate_i3: false,
            blocks: 1,
            dropout: 0.0,
        }
    }

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn l1_loss_values_and_sign_gradient() {
        let pred = t(&[1.0, 2.0], &[2]);
        let target = t(&[1.0, 3.0], &[2]);
        assert_eq!(l1_loss(&pred, &target).unwrap().item(), 0.5);
        assert_eq!(l1_loss(&pred, &pred).unwrap().item(), 0.0);

        let p = Tensor::leaf(vec![2.0], &[1], true).unwrap();
        let tgt = t(&[1.0], &[1]);
        l1_loss(&p, &tgt).unwrap().backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0]);

        assert!(l1_loss(&pred, &t(&[1.0], &[1])).is_err());
    }

    #[test]
    fn metric_values_and_loop_oracle() {
        let pred = t(&[1.0, 2.0], &[2]);
        let target = t(&[1.0, 3.0], &[2]);
        assert_eq!(mse(&pred, &target).unwrap(), 0.5);
        assert_eq!(mae(&pred, &target).unwrap(), 0.5);
        assert_eq!(mse(&pred, &pred).unwrap(), 0.0);

        let mut s = 0x12345u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a: Vec<f64> = (0..100).map(|_| next()).collect();
        let b: Vec<f64> = (0..100).map(|_| next()).collect();
        let mut se = 0.0;
        let mut ae = 0.0;
        for i in 0..100 {
            se += (a[i] - b[i]) * (a[i] - b[i]);
            ae += (a[i] - b[i]).abs();
        }
        let m = metrics_of(&t(&a, &[100]), &t(&b, &[100])).unwrap();
        assert!((m.mse - se / 100.0).abs() < 1e-12);
        assert!((m.mae - ae / 100.0).abs() < 1e-12);
        // Jensen: mae² <= mse
        assert!(m.mae * m.mae <= m.mse + 1e-15);
    }

    #[test]
    fn adam_first_step_sign_rule() {
        let cfg = TrainConfig::default();
        let mut p = Parameter::new("w", vec![1.0], &[1]).unwrap();
        p.value()
            .mul_scalar(0.5)
            .sum_all()
            .backward()
            .unwrap(); // grad = 0.5
        let mut adam = Adam::new(&cfg, &[1]);
        adam.step(&mut [&mut p]).unwrap();
        let delta = p.value().data()[0] - 1.0;
        assert!((delta + cfg.lr).abs() < 1e-8, "delta {delta}");
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let cfg = TrainConfig::default();
        let mut p = Parameter::new("w", vec![1.5, -2.5], &[2]).unwrap();
        let mut adam = Adam::new(&cfg, &[2]);
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value().data(), &[1.5, -2.5]);
    }

    #[test]
    fn adam_three_steps_descend_quadratic() {
        // hand-run the closed-form update on f(w) = w², starting at w = 1
        let cfg = TrainConfig {
            lr: 0.1,
            ..TrainConfig::default()
        };
        let mut expect_w = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for step in 1..=3 {
            let g = 2.0 * expect_w;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(step));
            let v_hat = v / (1.0 - cfg.beta2.powi(step));
            expect_w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            expected.push(expect_w);
        }

        let mut p = Parameter::new("w", vec![1.0], &[1]).unwrap();
        let mut adam = Adam::new(&cfg, &[1]);
        let mut last_f = 1.0;
        for step in 0..3 {
            let loss = p.value().mul(p.value()).unwrap().sum_all();
            let f_val = loss.item();
            if step > 0 {
                assert!(f_val < last_f, "f should strictly decrease");
            }
            last_f = f_val;
            loss.backward().unwrap();
            adam.step(&mut [&mut p]).unwrap();
            assert!((p.value().data()[0] - expected[step]).abs() < 1e-12);
        }
        assert!(p.value().data()[0] * p.value().data()[0] < last_f);
    }

    #[test]
    fn adam_lr_zero_is_bit_identical() {
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        let mut p = Parameter::new("w", vec![1.25, -3.5, 0.75], &[3]).unwrap();
        let before: Vec<u64> = p.value().data().iter().map(|v| v.to_bits()).collect();
        p.value().abs().mean_all().backward().unwrap();
        let mut adam = Adam::new(&cfg, &[3]);
        adam.step(&mut [&mut p]).unwrap();
        let after: Vec<u64> = p.value().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    fn sine_windows(l_out: usize) -> (Vec<WindowSample>, Vec<WindowSample>) {
        let s = synthetic::seasonal_series(1, 24 * 10, 24.0, 0.0, 0);
        let train = s.slice_time(0, 168).unwrap();
        let val = s.slice_time(168, 60).unwrap();
        (
            make_windows(&train, 8, l_out, 1).unwrap(),
            make_windows(&val, 8, l_out, 1).unwrap(),
        )
    }

    #[test]
    fn training_learns_noiseless_sine() {
        // 64 train windows of a noiseless period-24 sine; the period-aligned
        // config overfits to a small train L1 within 200 epochs
        let s = synthetic::seasonal_series(1, 24 * 10, 24.0, 0.0, 0);
        let train_seg = s.slice_time(0, 24 + 12 + 63).unwrap();
        let val_seg = s.slice_time(99, 60).unwrap();
        let train_w = make_windows(&train_seg, 24, 12, 1).unwrap();
        assert_eq!(train_w.len(), 64);
        let val_w = make_windows(&val_seg, 24, 12, 1).unwrap();
        let cfg_model = CtpNetConfig {
            l_in: 24,
            l_out: 12,
            p: 4,
            w: 24,
            d: 8,
            h_c: 2,
            h_b: 2,
            n_channels: 1,
            ablate_i1: false,
            ablate_i2: false,
            ablate_i3: false,
            blocks: 1,
            dropout: 0.0,
        };
        let mut model = CtpNet::new(cfg_model, 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 200,
            patience: 200,
            lr: 1e-2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let rec = train(&mut model, &train_w, &val_w, &cfg).unwrap();
        assert!(rec.diverged_at.is_none());
        let first = rec.epoch_train_loss[0];
        let last = *rec.epoch_train_loss.last().unwrap();
        assert!(last < first * 0.5, "train L1 {first} -> {last}");
        assert!(last < 0.05, "train L1 should reach < 0.05, got {last}");
    }

    #[test]
    fn early_stop_with_frozen_weights() {
        let (train_w, val_w) = sine_windows(4);
        let mut model = CtpNet::new(tiny_config(), 2).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            patience: 1,
            max_epochs: 30,
            ..TrainConfig::default()
        };
        let rec = train(&mut model, &train_w, &val_w, &cfg).unwrap();
        // epoch 1 improves over +inf, epoch 2 cannot improve: 1 + patience
        assert_eq!(rec.epochs_run, 2);
        assert_eq!(rec.best_epoch, 1);
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let (train_w, val_w) = sine_windows(4);
        let cfg = TrainConfig {
            max_epochs: 4,
            patience: 4,
            ..TrainConfig::default()
        };
        let mut a = CtpNet::new(tiny_config(), 3).unwrap();
        let ra = train(&mut a, &train_w, &val_w, &cfg).unwrap();
        let mut b = CtpNet::new(tiny_config(), 3).unwrap();
        let rb = train(&mut b, &train_w, &val_w, &cfg).unwrap();
        assert_eq!(ra.epoch_train_loss, rb.epoch_train_loss);
        assert_eq!(ra.epoch_val_mae, rb.epoch_val_mae);
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert!(pa
                .value()
                .data()
                .iter()
                .zip(pb.value().data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn divergence_is_recorded() {
        let (train_w, val_w) = sine_windows(4);
        let mut model = CtpNet::new(tiny_config(), 4).unwrap();
        let cfg = TrainConfig {
            lr: 1e150,
            max_epochs: 10,
            patience: 10,
            ..TrainConfig::default()
        };
        let rec = train(&mut model, &train_w, &val_w, &cfg).unwrap();
        assert!(rec.diverged_at.is_some());
        assert!(rec.test.is_none());
    }

    fn mean_predictor(l_in: usize, l_out: usize, n_c: usize) -> CtpNet {
        // all stages ablated plus zero encoder/decoder: the forecast falls
        // back to each window's per-channel look-back mean
        let cfg = CtpNetConfig {
            l_in,
            l_out,
            p: 1,
            w: 1,
            d: 2,
            h_c: 1,
            h_b: 1,
            n_channels: n_c,
            ablate_i1: true,
            ablate_i2: true,
            ablate_i3: true,
            blocks: 1,
            dropout: 0.0,
        };
        let mut m = CtpNet::new(cfg, 0).unwrap();
        for p in m.params_mut() {
            let n = p.numel();
            p.set_data(vec![0.0; n]).unwrap();
        }
        m
    }

    #[test]
    fn evaluate_mean_predictor_on_white_noise() {
        let noise = synthetic::white_noise(1, 4000, 9);
        let windows = make_windows(&noise, 32, 8, 1).unwrap();
        let model = mean_predictor(32, 8, 1);
        let m = evaluate(&model, &windows).unwrap();
        // E[(target - lookback mean)²] = σ²(1 + 1/L_in) for i.i.d. noise
        let expect = 1.0 + 1.0 / 32.0;
        assert!(
            (m.mse - expect).abs() < 0.1,
            "mse {} vs analytic {expect}",
            m.mse
        );
        assert!(m.mae * m.mae <= m.mse + 1e-12);
    }

    #[test]
    fn evaluate_perfect_predictions() {
        // constant series: the mean predictor reproduces the targets exactly
        let rows: Vec<Vec<f64>> = (0..64).map(|_| vec![2.5]).collect();
        let s = crate::data::RawSeries::from_rows(&rows, vec!["c".into()]).unwrap();
        let windows = make_windows(&s, 16, 4, 1).unwrap();
        let model = mean_predictor(16, 4, 1);
        let m = evaluate(&model, &windows).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.mae, 0.0);
    }

    #[test]
    fn evaluate_is_order_invariant() {
        let s = synthetic::seasonal_series(2, 200, 24.0, 0.05, 10);
        let windows = make_windows(&s, 16, 8, 1).unwrap();
        let model = CtpNet::new(
            CtpNetConfig {
                n_channels: 2,
                l_in: 16,
                l_out: 8,
                p: 4,
                w: 6,
                d: 4,
                h_c: 2,
                h_b: 2,
                ablate_i1: false,
                ablate_i2: false,
                ablate_i3: false,
                blocks: 1,
                dropout: 0.0,
            },
            11,
        )
        .unwrap();
        let a = evaluate(&model, &windows).unwrap();
        let mut rev = windows.clone();
        rev.reverse();
        let b = evaluate(&model, &rev).unwrap();
        assert!((a.mse - b.mse).abs() < 1e-12);
        assert!((a.mae - b.mae).abs() < 1e-12);
        assert_eq!(a.n, b.n);
    }

    #[test]
    fn empty_data_is_rejected() {
        let mut model = CtpNet::new(tiny_config(), 0).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&mut model, &[], &[], &cfg),
            Err(Error::DataEmpty(_))
        ));
        assert!(matches!(evaluate(&model, &[]), Err(Error::DataEmpty(_))));
    }
}
