//! Fold construction, the mini-batch Adam loop and k-fold cross-validation.

use crate::{encode_params, forward_graph, predict, Mode, ModelConfig, ModelError, ModelParams};
use pulsebp_core::evaluation::{evaluate, EvalError, EvalReport, Metrics};
use pulsebp_core::features::{FeatureError, FrameSample, NormStats};
use pulsebp_tensorgrad::{adam_step, cosine_decay, AdamState, Graph, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

/// Train loss above this multiple of the initial loss counts as diverging.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive diverging epochs before a fold is aborted.
pub const DIVERGENCE_EPOCHS: usize = 20;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least {min} samples or groups, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("fold {fold}: loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { fold: usize, epoch: usize },
    #[error("fold {fold}: train loss {loss} stayed above {DIVERGENCE_FACTOR}x the initial {initial} for {DIVERGENCE_EPOCHS} epochs (epoch {epoch})")]
    Diverged { fold: usize, epoch: usize, loss: f64, initial: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    /// Folds over individual samples.
    #[default]
    Sample,
    /// Folds over subjects; all samples of a subject share a fold.
    Subject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub dropout_p: f64,
    pub seed: u64,
    pub folds: usize,
    pub wd_max: f64,
    pub early_stop_patience: Option<usize>,
    pub group_by: GroupBy,
    /// Fit the output offset/scale to the training targets' mean and std.
    pub calibrate_output: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 400,
            lr: 1e-4,
            dropout_p: 0.15,
            seed: 0,
            folds: 5,
            wd_max: 1e-4,
            early_stop_patience: None,
            group_by: GroupBy::Sample,
            calibrate_output: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.folds < 2 {
            return bad(format!("folds = {} (need >= 2)", self.folds));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p = {}", self.dropout_p));
        }
        if !(self.wd_max >= 0.0 && self.wd_max.is_finite()) {
            return bad(format!("wd_max = {}", self.wd_max));
        }
        if self.early_stop_patience == Some(0) {
            return bad("early_stop_patience must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub fold_id: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn chunk_bounds(n: usize, k: usize) -> Vec<(usize, usize)> {
    let (base, rem) = (n / k, n % k);
    let mut start = 0;
    (0..k)
        .map(|i| {
            let len = base + usize::from(i < rem);
            let b = (start, start + len);
            start += len;
            b
        })
        .collect()
}

/// One seeded shuffle of `0..n`; fold i tests on the i-th contiguous chunk.
/// Earlier folds take the remainder.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>, TrainError> {
    if k < 2 || n < k {
        return Err(TrainError::TooFewSamples { n, min: k.max(2) });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(chunk_bounds(n, k)
        .into_iter()
        .enumerate()
        .map(|(fold_id, (a, b))| {
            let mut test = order[a..b].to_vec();
            test.sort_unstable();
            let held: BTreeSet<usize> = test.iter().copied().collect();
            let train = (0..n).filter(|i| !held.contains(i)).collect();
            Fold { fold_id, train, test }
        })
        .collect())
}

/// Like [`make_folds`] but shuffles and chunks distinct group labels.
pub fn make_group_folds(groups: &[String], k: usize, seed: u64) -> Result<Vec<Fold>, TrainError> {
    let distinct: Vec<&String> = groups.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let label_folds = make_folds(distinct.len(), k, seed)?;
    Ok(label_folds
        .into_iter()
        .map(|f| {
            let held: BTreeSet<&String> = f.test.iter().map(|&i| distinct[i]).collect();
            let (test, train) = (0..groups.len()).partition(|&i| held.contains(&groups[i]));
            Fold { fold_id: f.fold_id, train, test }
        })
        .collect())
}

pub fn folds_for(samples: &[FrameSample], cfg: &TrainConfig) -> Result<Vec<Fold>, TrainError> {
    match cfg.group_by {
        GroupBy::Sample => make_folds(samples.len(), cfg.folds, cfg.seed),
        GroupBy::Subject => {
            let subjects: Vec<String> = samples.iter().map(|s| s.subject_id.clone()).collect();
            make_group_folds(&subjects, cfg.folds, cfg.seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_mse: Option<f64>,
}

/// Trained parameters plus everything needed to apply them.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub norm: NormStats,
    /// Eval-mode train MSE before the first update.
    pub initial_train_mse: f64,
    pub loss_curve: Vec<EpochLoss>,
    pub seed: u64,
}

fn stack(samples: &[FrameSample], idx: &[usize], cfg: &ModelConfig) -> Result<Tensor, TrainError> {
    let per = cfg.t * cfg.l_in;
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        let s = &samples[i];
        if s.features.len() != cfg.t {
            return Err(ModelError::ShapeMismatch(format!("sample {} has {} steps", s.sample_id, s.features.len())).into());
        }
        s.features.iter().for_each(|row| data.extend_from_slice(row));
    }
    Ok(Tensor::new(vec![idx.len(), cfg.t, cfg.l_in], data)?)
}

fn targets(samples: &[FrameSample], idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| [samples[i].sbp, samples[i].dbp]).collect()
}

fn mse(pred: &[[f64; 2]], target: &[f64]) -> f64 {
    let sq: f64 = pred.iter().flatten().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    sq / target.len() as f64
}

const EVAL_CHUNK: usize = 256;

/// Standardizes inputs with statistics of the training split only.
pub fn fit_normalization(train: &[FrameSample]) -> Result<NormStats, TrainError> {
    Ok(NormStats::fit(train)?)
}

/// Per-channel mean and population std of the training targets, used as the
/// fixed output calibration.
pub fn target_calibration(train: &[FrameSample]) -> ([f64; 2], [f64; 2]) {
    let n = train.len().max(1) as f64;
    let mean = [train.iter().map(|s| s.sbp).sum::<f64>() / n, train.iter().map(|s| s.dbp).sum::<f64>() / n];
    let sd = |f: fn(&FrameSample) -> f64, m: f64| {
        let s = (train.iter().map(|x| (f(x) - m).powi(2)).sum::<f64>() / n).sqrt();
        if s > 1e-6 {
            s
        } else {
            1.0
        }
    };
    (mean, [sd(|s| s.sbp, mean[0]), sd(|s| s.dbp, mean[1])])
}

/// Seeds derived per fold so folds are independent of execution order.
fn fold_seed(seed: u64, fold_id: usize, salt: u64) -> u64 {
    let mut z = seed ^ (fold_id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains a fresh model on `train` and tracks `test` (may be empty).
pub fn train_model(
    train: &[FrameSample],
    test: &[FrameSample],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    fold_id: usize,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mcfg = ModelConfig { dropout_p: cfg.dropout_p, ..model_config.clone() };
    mcfg.validate()?;
    let norm = fit_normalization(train)?;
    let train = norm.apply_all(train);
    let test = norm.apply_all(test);
    let seed = fold_seed(cfg.seed, fold_id, 0);
    let mut params = ModelParams::init(&mcfg, seed)?;
    if cfg.calibrate_output {
        let (offset, scale) = target_calibration(&train);
        params.set_output_calibration(offset, scale)?;
    }
    let all_train: Vec<usize> = (0..train.len()).collect();
    let all_test: Vec<usize> = (0..test.len()).collect();
    let x_train = stack(&train, &all_train, &mcfg)?;
    let y_train = targets(&train, &all_train);
    let x_test = if test.is_empty() { None } else { Some(stack(&test, &all_test, &mcfg)?) };
    let y_test = targets(&test, &all_test);

    let eval = |params: &ModelParams| -> Result<(f64, Option<f64>), TrainError> {
        let tr = mse(&predict(params, &x_train, EVAL_CHUNK)?, &y_train);
        let te = match &x_test {
            Some(x) => Some(mse(&predict(params, x, EVAL_CHUNK)?, &y_test)),
            None => None,
        };
        Ok((tr, te))
    };

    let (initial, _) = eval(&params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(cfg.seed, fold_id, 1));
    let mut adam = AdamState::new(cfg.lr, cfg.wd_max)?;
    let mut order = all_train.clone();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut above = 0usize;
    let mut best_test = f64::INFINITY;
    let mut since_best = 0usize;
    let non_finite = |epoch: usize| TrainError::NonFiniteLoss { fold: fold_id, epoch };

    for epoch in 0..cfg.epochs {
        adam.weight_decay = cosine_decay(cfg.wd_max, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = stack(&train, batch, &mcfg)?;
            let y = Tensor::new(vec![batch.len(), 2], targets(&train, batch))?;
            let mut g = Graph::new();
            let f = match forward_graph(&mut g, &params, &x, Mode::Train, &mut rng) {
                Err(ModelError::Tensor(TensorError::NonFiniteDetected { .. })) => return Err(non_finite(epoch + 1)),
                r => r?,
            };
            let yv = g.leaf(&y)?;
            let loss = g.mse_loss(f.output, yv).map_err(|_| non_finite(epoch + 1))?;
            match g.backward(loss) {
                Err(TensorError::NonFiniteGradient { .. }) => return Err(non_finite(epoch + 1)),
                r => r?,
            }
            params.zero_grad();
            f.bound.accumulate_grads(&g, &mut params)?;
            let mut trainable: Vec<&mut Tensor> = params.tensors_mut().iter_mut().filter(|t| t.requires_grad()).collect();
            adam_step(&mut adam, &mut trainable)?;
        }
        let (tr, te) = eval(&params)?;
        if !tr.is_finite() || te.is_some_and(|v| !v.is_finite()) {
            return Err(non_finite(epoch + 1));
        }
        curve.push(EpochLoss { epoch: epoch + 1, train_mse: tr, test_mse: te });
        above = if tr > DIVERGENCE_FACTOR * initial { above + 1 } else { 0 };
        if above >= DIVERGENCE_EPOCHS {
            return Err(TrainError::Diverged { fold: fold_id, epoch: epoch + 1, loss: tr, initial });
        }
        if let (Some(p), Some(te)) = (cfg.early_stop_patience, te) {
            if te < best_test {
                best_test = te;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= p {
                    break;
                }
            }
        }
    }
    params.zero_grad();
    Ok(TrainOutcome { params, norm, initial_train_mse: initial, loss_curve: curve, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: u64,
    pub true_sbp: f64,
    pub true_dbp: f64,
    pub pred_sbp: f64,
    pub pred_dbp: f64,
}

/// Eval-mode predictions for raw (unnormalized) samples.
pub fn predict_samples(params: &ModelParams, norm: &NormStats, samples: &[FrameSample]) -> Result<Vec<Prediction>, TrainError> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let normed = norm.apply_all(samples);
    let idx: Vec<usize> = (0..samples.len()).collect();
    let x = stack(&normed, &idx, params.config())?;
    let out = predict(params, &x, EVAL_CHUNK)?;
    Ok(samples
        .iter()
        .zip(out)
        .map(|(s, p)| Prediction { sample_id: s.sample_id, true_sbp: s.sbp, true_dbp: s.dbp, pred_sbp: p[0], pred_dbp: p[1] })
        .collect())
}

pub fn report_for(samples: &[FrameSample], preds: &[Prediction]) -> Result<EvalReport, TrainError> {
    let t: Vec<(f64, f64)> = preds.iter().map(|p| (p.true_sbp, p.true_dbp)).collect();
    let p: Vec<(f64, f64)> = preds.iter().map(|p| (p.pred_sbp, p.pred_dbp)).collect();
    let records = samples.iter().map(|s| s.source_record.as_str()).collect::<BTreeSet<_>>().len();
    Ok(evaluate(&t, &p, records)?)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold_id: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub metrics: EvalReport,
    pub final_params_path: Option<PathBuf>,
    pub loss_curve: Vec<EpochLoss>,
    pub norm: NormStats,
    pub initial_train_mse: f64,
    pub predictions: Vec<Prediction>,
}

#[derive(Serialize)]
struct FoldReportFile<'a> {
    fold_id: usize,
    seed: u64,
    train_size: usize,
    test_size: usize,
    test_indices: &'a [usize],
    norm: &'a NormStats,
    output_offset: [f64; 2],
    output_scale: [f64; 2],
    report: &'a EvalReport,
}

fn write_at(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    std::fs::write(path, bytes).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,train_mse,test_mse\n");
    for e in curve {
        let te = e.test_mse.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", e.epoch, e.train_mse, te));
    }
    s
}

/// Path of the normalization sidecar that accompanies a checkpoint.
pub fn norm_sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("norm.json")
}

/// Writes checkpoint, normalization sidecar and loss curve into `dir`.
pub fn persist_outcome(outcome: &TrainOutcome, dir: &Path) -> Result<PathBuf, TrainError> {
    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.to_path_buf(), source })?;
    let ck = dir.join("checkpoint.pfck");
    write_at(&ck, &encode_params(&outcome.params, outcome.seed))?;
    let norm = serde_json::to_vec_pretty(&outcome.norm).expect("serializable");
    write_at(&norm_sidecar(&ck), &norm)?;
    write_at(&dir.join("loss_curve.csv"), loss_curve_csv(&outcome.loss_curve).as_bytes())?;
    Ok(ck)
}

pub fn train_fold(
    samples: &[FrameSample],
    fold: &Fold,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FoldResult, TrainError> {
    let pick = |idx: &[usize]| -> Vec<FrameSample> { idx.iter().map(|&i| samples[i].clone()).collect() };
    let (train, test) = (pick(&fold.train), pick(&fold.test));
    let outcome = train_model(&train, &test, model_config, cfg, fold.fold_id)?;
    let predictions = predict_samples(&outcome.params, &outcome.norm, &test)?;
    let metrics = report_for(&test, &predictions)?;
    let final_params_path = match out_dir {
        Some(dir) => {
            let dir = dir.join(format!("fold_{}", fold.fold_id));
            let ck = persist_outcome(&outcome, &dir)?;
            let (offset, scale) = outcome.params.output_calibration();
            let report = FoldReportFile {
                fold_id: fold.fold_id,
                seed: outcome.seed,
                train_size: train.len(),
                test_size: test.len(),
                test_indices: &fold.test,
                norm: &outcome.norm,
                output_offset: offset,
                output_scale: scale,
                report: &metrics,
            };
            write_at(&dir.join("fold_report.json"), &serde_json::to_vec_pretty(&report).expect("serializable"))?;
            Some(ck)
        }
        None => None,
    };
    Ok(FoldResult {
        fold_id: fold.fold_id,
        train_indices: fold.train.clone(),
        test_indices: fold.test.clone(),
        metrics,
        final_params_path,
        loss_curve: outcome.loss_curve,
        norm: outcome.norm,
        initial_train_mse: outcome.initial_train_mse,
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMean {
    pub r2: f64,
    #[serde(rename = "me_mmHg")]
    pub me: f64,
    #[serde(rename = "mae_mmHg")]
    pub mae: f64,
    #[serde(rename = "rmse_mmHg")]
    pub rmse: f64,
    #[serde(rename = "std_mmHg")]
    pub std: f64,
}

impl ChannelMean {
    fn of(ms: &[Metrics]) -> Self {
        let n = ms.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| ms.iter().map(f).sum::<f64>() / n;
        Self { r2: avg(|m| m.r2), me: avg(|m| m.me), mae: avg(|m| m.mae), rmse: avg(|m| m.rmse), std: avg(|m| m.std) }
    }
}

/// Mean of per-fold test metrics, plus one report over all pooled test
/// predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvAggregate {
    pub folds: usize,
    pub mean_sbp: ChannelMean,
    pub mean_dbp: ChannelMean,
    pub pooled: EvalReport,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub aggregate: CvAggregate,
    /// All test predictions ordered by sample index.
    pub predictions: Vec<Prediction>,
}

/// Trains every fold (up to `parallel` at once) and aggregates.
pub fn cross_validate(
    samples: &[FrameSample],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    parallel: usize,
) -> Result<CvResult, TrainError> {
    cfg.validate()?;
    let folds = folds_for(samples, cfg)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<FoldResult, TrainError>>>> = Mutex::new((0..folds.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(fold) = folds.get(i) else { break };
        let r = train_fold(samples, fold, model_config, cfg, out_dir);
        slots.lock().expect("no poisoned workers")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 1..parallel.clamp(1, folds.len()) {
            s.spawn(work);
        }
        work();
    });
    let results: Vec<FoldResult> = slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every fold visited"))
        .collect::<Result<_, _>>()?;
    let mut predictions = Vec::with_capacity(samples.len());
    let mut order: Vec<(usize, &Prediction)> = Vec::new();
    for f in &results {
        order.extend(f.test_indices.iter().copied().zip(&f.predictions));
    }
    order.sort_by_key(|(i, _)| *i);
    predictions.extend(order.into_iter().map(|(_, p)| p.clone()));
    let pooled_samples: Vec<FrameSample> = {
        let mut idx: Vec<usize> = results.iter().flat_map(|f| f.test_indices.iter().copied()).collect();
        idx.sort_unstable();
        idx.into_iter().map(|i| samples[i].clone()).collect()
    };
    let pooled = report_for(&pooled_samples, &predictions)?;
    let sbp: Vec<Metrics> = results.iter().map(|f| f.metrics.sbp.metrics()).collect();
    let dbp: Vec<Metrics> = results.iter().map(|f| f.metrics.dbp.metrics()).collect();
    let aggregate =
        CvAggregate { folds: results.len(), mean_sbp: ChannelMean::of(&sbp), mean_dbp: ChannelMean::of(&dbp), pooled };
    Ok(CvResult { folds: results, aggregate, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_rule_gives_remainder_to_early_folds() {
        let sizes: Vec<usize> = chunk_bounds(11, 5).iter().map(|(a, b)| b - a).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
    }

    #[test]
    fn fold_seeds_differ() {
        let s: BTreeSet<u64> = (0..5).flat_map(|f| [fold_seed(7, f, 0), fold_seed(7, f, 1)]).collect();
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { folds: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..Default::default() }.validate().is_err());
    }
}
