//! End-to-end optimization through the noisy channel, evaluation sweeps
//! and the three ablations.

use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::BatchStats;
use crate::channel::{codeword_gain, NormalizerState, DEFAULT_MOMENTUM, SIGMA_FLOOR};
use crate::encoder::HeadMode;
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::metrics::{chamfer, d1, d2, MetricsConfig};
use crate::model::{channel_noise, Model, ModelConfig, Transmission};
use crate::nn::{apply_bn_updates, ParamId, ParamStore, Session};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub snr_train_db: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `decay_period` epochs.
    pub decay_factor: f64,
    pub decay_period: usize,
    pub normalizer_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            snr_train_db: 5.0,
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            decay_factor: 0.5,
            decay_period: 20,
            normalizer_momentum: DEFAULT_MOMENTUM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.decay_period == 0 {
            return Err(Error::invalid(
                "epochs, batch size and decay period must be >= 1",
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::invalid(
                "learning rate and decay factor must be positive",
            ));
        }
        if !(self.normalizer_momentum > 0.0 && self.normalizer_momentum <= 1.0) {
            return Err(Error::invalid("normalizer momentum must lie in (0, 1]"));
        }
        if self.snr_train_db.is_nan() {
            return Err(Error::invalid("training SNR is NaN"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_period) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    /// Mean of `|z|^2 / (n/2)` over the epoch's codewords.
    pub power_ratio: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Records with the wall-clock column cleared, for replay comparisons.
    pub fn without_timing(&self) -> Vec<EpochRecord> {
        self.records
            .iter()
            .map(|r| EpochRecord {
                seconds: 0.0,
                ..r.clone()
            })
            .collect()
    }
}

/// Adam with per-parameter first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .entries()
            .iter()
            .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (id, g) in grads {
            let i = id.index();
            let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
            let w = store.get_mut(*id).data_mut();
            for k in 0..g.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Result of one forward (and optional backward) pass over a batch.
pub struct StepOutput {
    pub loss: f64,
    /// Squared codeword norm over `n/2`, per cloud.
    pub power_ratios: Vec<f64>,
    pub grads: Vec<(ParamId, Matrix)>,
    pub bn_updates: Vec<(ParamId, ParamId, BatchStats)>,
}

pub fn stack_points(clouds: &[&PointCloud]) -> Matrix {
    let all: Vec<Point3> = clouds
        .iter()
        .flat_map(|c| c.points().iter().copied())
        .collect();
    Matrix::from_rows(&all)
}

/// encode, normalize, add `noise`, decode, mean per-cloud Chamfer;
/// gradients when `train`. With `update`, the codewords are normalized by
/// the batch's own statistics, which are then folded into `state`;
/// otherwise `state` is used as is.
pub fn batch_step(
    model: &Model,
    clouds: &[&PointCloud],
    state: &mut NormalizerState,
    noise: &Matrix,
    update: bool,
    train: bool,
) -> Result<StepOutput> {
    let mut s = Session::new(&model.store, train);
    let enc = model.encode_graph(&mut s, clouds)?;
    let z = if update {
        let g = codeword_gain(model.config.power);
        let (z, _, _) = s.graph.standardize(
            enc.latent,
            (state.mean, state.deviation),
            1.0,
            g,
            SIGMA_FLOOR,
        );
        state.update(s.value(enc.latent).data())?;
        z
    } else {
        model.codeword_graph(&mut s, enc.latent, state)?
    };
    let half = model.config.latent_dim as f64 / 2.0;
    let zv = s.value(z);
    let power_ratios = (0..zv.rows())
        .map(|b| zv.row(b).iter().map(|x| x * x).sum::<f64>() / half)
        .collect();
    if noise.shape() != zv.shape() {
        return Err(Error::invalid("noise matrix does not match the codewords"));
    }
    let w = s.graph.constant(noise.clone());
    let y = s.graph.add(z, w);
    let dec = model.decoder.forward(&mut s, y, None)?;
    let loss = Model::chamfer_loss(
        &mut s,
        dec.points,
        Rc::new(stack_points(clouds)),
        clouds.len(),
    );
    let value = s.value(loss).get(0, 0);
    let (grads, bn_updates) = if train {
        let mut g = s.graph.backward(loss);
        (s.param_grads(&mut g), s.take_bn_updates())
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(StepOutput {
        loss: value,
        power_ratios,
        grads,
        bn_updates,
    })
}

fn stream_rng(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream((a << 32) | b);
    rng
}

const SHUFFLE: u64 = 1;
const TRAIN_NOISE: u64 = 2;
const EVAL_NOISE: u64 = 3;

/// Resumable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub normalizer: NormalizerState,
    pub adam: Adam,
    pub log: TrainLog,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let adam = Adam::new(&model.store);
        let normalizer = NormalizerState::new(config.normalizer_momentum);
        Ok(Trainer {
            config,
            model,
            normalizer,
            adam,
            log: TrainLog::default(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.log.records.len()
    }

    pub fn finished(&self) -> bool {
        self.epochs_done() >= self.config.epochs
    }

    pub fn run_epoch(&mut self, data: &[PointCloud]) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let start = Instant::now();
        let epoch = self.epochs_done();
        let cfg = &self.config;
        let lr = cfg.learning_rate_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE, epoch as u64, 0));

        let (mut loss_sum, mut power_sum) = (0.0, 0.0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PointCloud> = chunk.iter().map(|&i| &data[i]).collect();
            let mut rng = stream_rng(cfg.seed, TRAIN_NOISE, epoch as u64, step as u64);
            let noise = channel_noise(
                batch.len(),
                cfg.model.latent_dim,
                cfg.snr_train_db,
                cfg.model.power,
                &mut rng,
            );
            let out = batch_step(
                &self.model,
                &batch,
                &mut self.normalizer,
                &noise,
                true,
                true,
            )?;
            if !out.loss.is_finite() || out.grads.iter().any(|(_, g)| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: out.loss,
                });
            }
            loss_sum += out.loss * batch.len() as f64;
            power_sum += out.power_ratios.iter().sum::<f64>();
            self.adam.step(&mut self.model.store, &out.grads, lr);
            apply_bn_updates(&mut self.model.store, &out.bn_updates);
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            learning_rate: lr,
            power_ratio: power_sum / data.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.log.records.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining epochs and hands back the frozen result.
    pub fn run(mut self, data: &[PointCloud]) -> Result<Trained> {
        while !self.finished() {
            self.run_epoch(data)?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> Trained {
        let mut normalizer = self.normalizer;
        normalizer.freeze();
        Trained {
            model: self.model,
            normalizer,
            log: self.log,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub normalizer: NormalizerState,
    pub log: TrainLog,
}

pub fn train(cfg: &TrainConfig, data: &[PointCloud]) -> Result<Trained> {
    for c in data {
        if c.len() != cfg.model.points {
            return Err(Error::invalid(format!(
                "dataset cloud has {} points, config expects {}",
                c.len(),
                cfg.model.points
            )));
        }
    }
    Trainer::new(cfg.clone())?.run(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub snr_db: Vec<f64>,
    pub trials: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
    pub metrics: MetricsConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            snr_db: vec![0.0, 2.5, 5.0, 7.5, 10.0],
            trials: 8,
            batch_size: 16,
            seed: 1,
            workers: 1,
            metrics: MetricsConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("evaluation needs at least one SNR value"));
        }
        if self.trials == 0 || self.batch_size == 0 || self.workers == 0 {
            return Err(Error::invalid(
                "trials, batch size and workers must be >= 1",
            ));
        }
        self.metrics.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr_db: f64,
    pub d1_db: f64,
    pub d2_db: f64,
    pub chamfer: f64,
    /// Standard error of the per-sample D1 mean.
    pub d1_stderr: f64,
    pub trials: usize,
    pub samples: usize,
}

/// Per-cloud metrics of one evaluation pass at one SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudScore {
    pub d1_db: f64,
    pub d2_db: f64,
    pub chamfer: f64,
    pub coarse_chamfer: f64,
    pub refined_chamfer: f64,
}

fn score(t: &Transmission, original: &PointCloud, metrics: &MetricsConfig) -> Result<CloudScore> {
    let decoded = PointCloud::from_points(t.points.clone())?;
    Ok(CloudScore {
        d1_db: d1(&t.points, original.points(), metrics)?.db,
        d2_db: d2(&decoded, original, metrics)?.db,
        chamfer: chamfer(&t.points, original.points())?,
        coarse_chamfer: chamfer(&t.coarse, &t.centers)?,
        refined_chamfer: chamfer(&t.refined, &t.centers)?,
    })
}

/// Scores every cloud under `trials` independent noise draws at one SNR.
/// Noise for (snr index, trial, batch) comes from its own stream, so the
/// result does not depend on how the work is split.
pub fn score_clouds(
    model: &Model,
    state: &NormalizerState,
    data: &[PointCloud],
    snr_db: f64,
    snr_index: usize,
    cfg: &EvalConfig,
    anchor_bits: Option<u32>,
) -> Result<Vec<CloudScore>> {
    let mut out = Vec::with_capacity(data.len() * cfg.trials);
    for trial in 0..cfg.trials {
        for (b, chunk) in data.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&PointCloud> = chunk.iter().collect();
            let mut rng = stream_rng(
                cfg.seed,
                EVAL_NOISE,
                snr_index as u64,
                ((trial as u64) << 16) | b as u64,
            );
            let noise = channel_noise(
                refs.len(),
                model.config.latent_dim,
                snr_db,
                model.config.power,
                &mut rng,
            );
            let sent = model.transmit(&refs, state, &noise, anchor_bits)?;
            for (t, c) in sent.iter().zip(chunk) {
                out.push(score(t, c, &cfg.metrics)?);
            }
        }
    }
    Ok(out)
}

fn summarize(snr_db: f64, scores: &[CloudScore], trials: usize) -> SweepRow {
    let n = scores.len() as f64;
    let mean = |f: fn(&CloudScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let d1_db = mean(|s| s.d1_db);
    let var = scores
        .iter()
        .map(|s| (s.d1_db - d1_db).powi(2))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    SweepRow {
        snr_db,
        d1_db,
        d2_db: mean(|s| s.d2_db),
        chamfer: mean(|s| s.chamfer),
        d1_stderr: (var / n).sqrt(),
        trials,
        samples: scores.len(),
    }
}

/// Mean D1, D2 and Chamfer per test SNR. Read-only on the model and the
/// normalizer; `cfg.workers` threads split the SNR list.
pub fn evaluate(
    model: &Model,
    state: &NormalizerState,
    data: &[PointCloud],
    cfg: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if !state.frozen {
        return Err(Error::ContractViolation(
            "evaluation needs a frozen normalizer".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let run = |i: usize| -> Result<SweepRow> {
        let snr = cfg.snr_db[i];
        Ok(summarize(
            snr,
            &score_clouds(model, state, data, snr, i, cfg, None)?,
            cfg.trials,
        ))
    };
    let workers = cfg.workers.min(cfg.snr_db.len());
    if workers <= 1 {
        return (0..cfg.snr_db.len()).map(run).collect();
    }
    let mut rows: Vec<Option<Result<SweepRow>>> = (0..cfg.snr_db.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let run = &run;
                scope.spawn(move || {
                    (w..cfg.snr_db.len())
                        .step_by(workers)
                        .map(|i| (i, run(i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                rows[i] = Some(r);
            }
        }
    });
    rows.into_iter()
        .map(|r| r.expect("every SNR evaluated"))
        .collect()
}

/// Mean `|z|^2 / (n/2)` over noiseless evaluation-mode codewords.
pub fn codeword_power(model: &Model, state: &NormalizerState, data: &[PointCloud]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(32) {
        let refs: Vec<&PointCloud> = chunk.iter().collect();
        let noise = Matrix::zeros(refs.len(), model.config.latent_dim);
        let mut st = state.clone();
        total += batch_step(model, &refs, &mut st, &noise, false, false)?
            .power_ratios
            .iter()
            .sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadComparison {
    pub snr_db: f64,
    pub maxpool_d1_db: f64,
    pub projection_d1_db: f64,
}

/// Trains one model per head mode on the same data and seed and compares
/// D1 on `eval_data`.
pub fn ablate_latent_head(
    base: &TrainConfig,
    train_data: &[PointCloud],
    eval_data: &[PointCloud],
    eval: &EvalConfig,
) -> Result<(Vec<HeadComparison>, Trained, Trained)> {
    let mut runs = Vec::new();
    for head in [HeadMode::MaxPool, HeadMode::Projection] {
        let cfg = TrainConfig {
            model: ModelConfig {
                head,
                ..base.model.clone()
            },
            ..base.clone()
        };
        let trained = train(&cfg, train_data)?;
        let rows = evaluate(&trained.model, &trained.normalizer, eval_data, eval)?;
        runs.push((trained, rows));
    }
    let (projection, proj_rows) = runs.pop().expect("two runs");
    let (maxpool, max_rows) = runs.pop().expect("two runs");
    let table = max_rows
        .iter()
        .zip(&proj_rows)
        .map(|(m, p)| HeadComparison {
            snr_db: m.snr_db,
            maxpool_d1_db: m.d1_db,
            projection_d1_db: p.d1_db,
        })
        .collect();
    Ok((table, maxpool, projection))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub snr_db: f64,
    /// Mean Chamfer distance of `X'` to `X*`.
    pub coarse_chamfer: f64,
    /// Mean Chamfer distance of `X''` to `X*`.
    pub refined_chamfer: f64,
    /// Fraction of samples on which `X''` is at least as close as `X'`.
    pub refined_not_worse: f64,
}

pub fn ablate_refinement(
    model: &Model,
    state: &NormalizerState,
    data: &[PointCloud],
    snr_db: f64,
    eval: &EvalConfig,
) -> Result<RefinementReport> {
    eval.validate()?;
    let scores = score_clouds(model, state, data, snr_db, 0, eval, None)?;
    let n = scores.len() as f64;
    Ok(RefinementReport {
        snr_db,
        coarse_chamfer: scores.iter().map(|s| s.coarse_chamfer).sum::<f64>() / n,
        refined_chamfer: scores.iter().map(|s| s.refined_chamfer).sum::<f64>() / n,
        refined_not_worse: scores
            .iter()
            .filter(|s| s.refined_chamfer <= s.coarse_chamfer)
            .count() as f64
            / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridReport {
    pub snr_db: f64,
    pub quant_bits: u32,
    pub features_only_d1_db: f64,
    pub hybrid_d1_db: f64,
    pub bits: u64,
    /// Complex channel uses at capacity for `bits`.
    pub channel_uses: f64,
}

/// Extra bits for `anchors` coordinates at `quant_bits` per component and
/// the complex channel uses they need at the capacity limit.
pub fn hybrid_cost(anchors: usize, quant_bits: u32, snr_db: f64) -> (u64, f64) {
    let bits = anchors as u64 * 3 * quant_bits as u64;
    let capacity = (1.0 + 10f64.powf(snr_db / 10.0)).log2();
    (bits, bits as f64 / capacity)
}

/// Paired comparison of features-only decoding against decoding with the
/// quantized downsampled coordinates delivered error-free.
pub fn hybrid_experiment(
    model: &Model,
    state: &NormalizerState,
    data: &[PointCloud],
    snr_db: f64,
    quant_bits: u32,
    eval: &EvalConfig,
) -> Result<HybridReport> {
    eval.validate()?;
    if !(1..=32).contains(&quant_bits) {
        return Err(Error::invalid("quantization bits must lie in 1..=32"));
    }
    let plain = score_clouds(model, state, data, snr_db, 0, eval, None)?;
    let hybrid = score_clouds(model, state, data, snr_db, 0, eval, Some(quant_bits))?;
    let mean = |s: &[CloudScore]| s.iter().map(|c| c.d1_db).sum::<f64>() / s.len() as f64;
    let (bits, channel_uses) = hybrid_cost(model.config.anchor_rows(), quant_bits, snr_db);
    Ok(HybridReport {
        snr_db,
        quant_bits,
        features_only_d1_db: mean(&plain),
        hybrid_d1_db: mean(&hybrid),
        bits,
        channel_uses,
    })
}
