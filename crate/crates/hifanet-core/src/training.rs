//! Loss, SGD with a step schedule, segmentation metrics and the training
//! loop. Training is deterministic given the config seed: fixed shuffle
//! order, sequential gradient accumulation, no threading.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::baselines::Model;
use crate::datagen::ObservationTensor;
use crate::numerics::{NumericsError, ParamStore, Tape};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    /// Groups per SGD step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            decay_factor: 0.5,
            decay_every: 30,
            epochs: 100,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.lr0 <= 0.0 || self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err("learning rate, epochs, batch size and decay period must be positive".into());
        }
        if !(0.0 < self.decay_factor && self.decay_factor <= 1.0) {
            return Err("decay factor must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// Mean cross-entropy of `[points, classes]` logits against integer labels,
/// recorded on the tape (log-sum-exp stable). Errors on out-of-range labels.
pub fn cross_entropy_loss(
    tape: &mut Tape,
    logits: crate::numerics::Var,
    labels: &[u16],
) -> Result<crate::numerics::Var, NumericsError> {
    let as_usize: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    tape.cross_entropy(logits, &as_usize)
}

/// Piecewise-constant step schedule: `lr0 * decay^floor(epoch / every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = (epoch / cfg.decay_every) as i32;
    let mut lr = cfg.lr0;
    for _ in 0..steps {
        lr *= cfg.decay_factor;
    }
    lr
}

/// One SGD step: `theta -= lr * grad` for every parameter, then zeroed
/// gradients. Errors if any parameter is missing its gradient buffer.
pub fn sgd_step(params: &mut ParamStore, lr: f64) -> Result<(), NumericsError> {
    for idx in 0..params.len() {
        if params.by_index(idx).1.grad().is_none() {
            let name = params.by_index(idx).0.into();
            return Err(NumericsError::MissingGradients(name));
        }
    }
    for idx in 0..params.len() {
        let tensor = params.by_index_mut(idx);
        let grads = tensor.grad().unwrap().to_vec();
        for (v, g) in tensor.data_mut().iter_mut().zip(&grads) {
            *v -= lr * g;
        }
        tensor.zero_grad();
    }
    Ok(())
}

/// Evaluation metrics over a dataset. `confusion[t][p]` counts points with
/// ground truth `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Mean IoU over classes with nonzero union (TP + FP + FN > 0).
    pub miou: f64,
    /// Macro-averaged recall over classes present in the ground truth.
    pub avg_accuracy: f64,
    pub per_class_iou: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    /// Micro accuracy: correctly labeled points over all points.
    pub fn overall_accuracy(&self) -> f64 {
        let correct: usize = (0..self.confusion.len()).map(|c| self.confusion[c][c]).sum();
        let total: usize = self.confusion.iter().flatten().sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    /// Builds the report from a filled confusion matrix.
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> MetricsReport {
        let classes = confusion.len();
        let mut per_class_iou = vec![0.0; classes];
        let mut iou_sum = 0.0;
        let mut iou_classes = 0usize;
        let mut recall_sum = 0.0;
        let mut recall_classes = 0usize;
        for c in 0..classes {
            let tp = confusion[c][c];
            let fn_: usize = (0..classes).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
            let fp: usize = (0..classes).filter(|&t| t != c).map(|t| confusion[t][c]).sum();
            let union = tp + fp + fn_;
            if union > 0 {
                per_class_iou[c] = tp as f64 / union as f64;
                iou_sum += per_class_iou[c];
                iou_classes += 1;
            }
            if tp + fn_ > 0 {
                recall_sum += tp as f64 / (tp + fn_) as f64;
                recall_classes += 1;
            }
        }
        MetricsReport {
            miou: if iou_classes > 0 { iou_sum / iou_classes as f64 } else { 0.0 },
            avg_accuracy: if recall_classes > 0 { recall_sum / recall_classes as f64 } else { 0.0 },
            per_class_iou,
            confusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    EmptyDataset,
    InvalidConfig(String),
    Numerics(NumericsError),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Numerics(e)
    }
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "dataset is empty"),
            TrainError::InvalidConfig(msg) => write!(f, "invalid training config: {msg}"),
            TrainError::Numerics(e) => write!(f, "{e}"),
        }
    }
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (idx, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = idx;
        }
    }
    best
}

/// Builds a metrics report from (truth, prediction) label pairs.
pub fn evaluate_predictions(
    pairs: impl Iterator<Item = (u16, u16)>,
    class_count: usize,
) -> MetricsReport {
    let mut confusion = vec![vec![0usize; class_count]; class_count];
    for (truth, pred) in pairs {
        confusion[truth as usize][pred as usize] += 1;
    }
    MetricsReport::from_confusion(confusion)
}

/// Groups per tape during forward-only evaluation; bounds tape memory while
/// amortizing the parameter binding.
const EVAL_CHUNK: usize = 32;

/// Runs the model over the dataset and tallies the confusion matrix.
pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    dataset: &[ObservationTensor],
) -> Result<MetricsReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = model.config.class_count;
    let mut confusion = vec![vec![0usize; classes]; classes];
    for chunk in dataset.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, params)?;
        for obs in chunk {
            let logits = model.forward_bound(&mut tape, &bound, obs)?;
            let (vals, rows, cols) = tape.value(logits);
            for r in 0..rows {
                let pred = argmax_row(&vals[r * cols..(r + 1) * cols]);
                confusion[obs.labels[r] as usize][pred] += 1;
            }
        }
    }
    Ok(MetricsReport::from_confusion(confusion))
}

/// Per-epoch training record. Loss and metrics are tallied from the
/// training-pass forwards, each taken before its batch's update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub miou: f64,
    pub avg_accuracy: f64,
}

/// Trains `params` in place with plain SGD. Batches are groups; the batch
/// loss is the mean of per-group cross-entropies, and per-epoch losses are
/// recorded before the corresponding update.
pub fn train(
    model: &Model,
    params: &mut ParamStore,
    dataset: &[ObservationTensor],
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>, TrainError> {
    cfg.validate().map_err(TrainError::InvalidConfig)?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = model.config.class_count;
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut confusion = vec![vec![0usize; classes]; classes];
        for chunk in order.chunks(cfg.batch_size) {
            params.zero_grads();
            let inv = 1.0 / chunk.len() as f64;
            // One tape per batch: parameters bind once, each group's loss is
            // scaled into the batch mean, and a single backward accumulates.
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, params)?;
            let mut scaled = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let obs = &dataset[idx];
                let labels: Vec<usize> = obs.labels.iter().map(|&l| l as usize).collect();
                let logits = model.forward_bound(&mut tape, &bound, obs)?;
                let (vals, rows, cols) = tape.value(logits);
                for r in 0..rows {
                    let pred = argmax_row(&vals[r * cols..(r + 1) * cols]);
                    confusion[obs.labels[r] as usize][pred] += 1;
                }
                let ce = tape.cross_entropy(logits, &labels)?;
                loss_sum += tape.scalar_value(ce)?;
                scaled.push(tape.scale(ce, inv));
            }
            let stacked = tape.concat(&scaled, 0)?;
            let batch_loss = tape.sum_all(stacked);
            tape.backward(batch_loss, params)?;
            sgd_step(params, lr)?;
        }
        let metrics = MetricsReport::from_confusion(confusion);
        history.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / dataset.len() as f64,
            miou: metrics.miou,
            avg_accuracy: metrics.avg_accuracy,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::HiFANetConfig;
    use crate::baselines::Variant;
    use crate::numerics::Tensor;

    #[test]
    fn cross_entropy_confident_and_uniform_cases() {
        let mut tape = Tape::new();
        // Massive logit at the true class drives the loss to zero.
        let confident = tape.leaf_matrix(1, 3, vec![1e6, 0.0, 0.0]);
        let loss = tape.cross_entropy(confident, &[0]).unwrap();
        assert!(tape.scalar_value(loss).unwrap() < 1e-6);

        let uniform = tape.leaf_matrix(1, 13, vec![0.0; 13]);
        let loss = tape.cross_entropy(uniform, &[5]).unwrap();
        let want = (13.0f64).ln();
        assert!((tape.scalar_value(loss).unwrap() - want).abs() < 1e-12);
        assert!((want - 2.5649).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = Rng::new(2);
        let logits: Vec<f64> = (0..12).map(|_| rng.uniform(-4.0, 4.0)).collect();
        let labels = [2usize, 0, 3];
        let mut tape = Tape::new();
        let x = tape.leaf_matrix(3, 4, logits.clone());
        let loss = tape.cross_entropy(x, &labels).unwrap();
        let got = tape.scalar_value(loss).unwrap();

        let mut want = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &logits[r * 4..(r + 1) * 4];
            let denom: f64 = row.iter().map(|&v| v.exp()).sum();
            want -= (row[label].exp() / denom).ln();
        }
        want /= 3.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn schedule_matches_stated_decay_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.1);
        assert_eq!(lr_schedule(29, &cfg), 0.1);
        assert_eq!(lr_schedule(30, &cfg), 0.05);
        assert_eq!(lr_schedule(65, &cfg), 0.025);
        assert_eq!(lr_schedule(99, &cfg), 0.0125);
    }

    #[test]
    fn schedule_is_non_increasing_and_piecewise_constant() {
        let cfg = TrainConfig { decay_every: 7, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for epoch in 0..100 {
            let lr = lr_schedule(epoch, &cfg);
            assert!(lr <= prev);
            if epoch % 7 != 0 {
                assert_eq!(lr, prev);
            }
            prev = lr;
        }
    }

    #[test]
    fn sgd_moves_against_gradient_and_zeroes() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        store.get_mut("theta").unwrap().grad_mut()[0] = 2.0;
        sgd_step(&mut store, 0.1).unwrap();
        assert!((store.get("theta").unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(store.get("theta").unwrap().grad().unwrap()[0], 0.0);

        // lr = 0 leaves parameters unchanged.
        store.get_mut("theta").unwrap().grad_mut()[0] = 5.0;
        sgd_step(&mut store, 0.0).unwrap();
        assert!((store.get("theta").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_requires_gradients() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(sgd_step(&mut store, 0.1), Err(NumericsError::MissingGradients(_))));
    }

    #[test]
    fn quadratic_bowl_contracts_at_closed_form_rate() {
        // loss = 0.5 ||theta||^2 under lr 0.1 contracts theta by 0.9 per step.
        let mut rng = Rng::new(3);
        let init: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let norm0 = libm::sqrt(init.iter().map(|v| v * v).sum::<f64>());
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::new(vec![8], init).unwrap()).unwrap();
        for _ in 0..50 {
            store.zero_grads();
            let mut tape = Tape::new();
            let p = tape.param(&store, "theta").unwrap();
            let pt = tape.transpose(p);
            let sq = tape.matmul(p, pt).unwrap();
            let half = tape.scale(sq, 0.5);
            let loss = tape.sum_all(half);
            tape.backward(loss, &mut store).unwrap();
            sgd_step(&mut store, 0.1).unwrap();
        }
        let norm: f64 = libm::sqrt(
            store.get("theta").unwrap().data().iter().map(|v| v * v).sum::<f64>(),
        );
        let want = norm0 * libm::pow(0.9, 50.0);
        assert!((norm - want).abs() < 1e-10, "{norm} vs {want}");
    }

    #[test]
    fn perfect_predictions_score_one() {
        let report = evaluate_predictions([(0u16, 0u16), (1, 1), (2, 2), (1, 1)].into_iter(), 3);
        assert_eq!(report.miou, 1.0);
        assert_eq!(report.avg_accuracy, 1.0);
        assert_eq!(report.overall_accuracy(), 1.0);
    }

    #[test]
    fn two_class_confusion_arithmetic() {
        // Confusion [[3,1],[1,3]]: each class has IoU 3/5.
        let report = MetricsReport::from_confusion(vec![vec![3, 1], vec![1, 3]]);
        assert!((report.per_class_iou[0] - 0.6).abs() < 1e-15);
        assert!((report.per_class_iou[1] - 0.6).abs() < 1e-15);
        assert!((report.miou - 0.6).abs() < 1e-15);
        assert!((report.avg_accuracy - 0.75).abs() < 1e-15);
    }

    #[test]
    fn metrics_match_bruteforce_tally() {
        let mut rng = Rng::new(11);
        let classes = 5;
        let pairs: Vec<(u16, u16)> =
            (0..500).map(|_| (rng.below(classes) as u16, rng.below(classes) as u16)).collect();
        let report = evaluate_predictions(pairs.iter().copied(), classes);

        for c in 0..classes {
            let tp = pairs.iter().filter(|(t, p)| *t == c as u16 && *p == c as u16).count();
            let fp = pairs.iter().filter(|(t, p)| *t != c as u16 && *p == c as u16).count();
            let fn_ = pairs.iter().filter(|(t, p)| *t == c as u16 && *p != c as u16).count();
            let want = tp as f64 / (tp + fp + fn_) as f64;
            assert!((report.per_class_iou[c] - want).abs() < 1e-12);
        }
        // Order invariance.
        let mut reversed = pairs.clone();
        reversed.reverse();
        assert_eq!(report, evaluate_predictions(reversed.into_iter(), classes));
    }

    fn constant_obs(cfg: &HiFANetConfig, value: f32, labels: Vec<u16>) -> ObservationTensor {
        let k2 = cfg.k * cfg.k;
        ObservationTensor {
            m: cfg.m,
            n: cfg.n,
            k: cfg.k,
            d: cfg.d,
            features: vec![value; cfg.m * cfg.n * k2 * cfg.d],
            patch_labels: vec![0; cfg.m * cfg.n * k2],
            coords: (0..cfg.m).map(|i| [i as f64, 0.0, 0.0]).collect(),
            labels,
            frame_ids: vec![0; cfg.m * cfg.n],
        }
    }

    #[test]
    fn zero_inputs_zero_init_loss_is_log_class_count() {
        let cfg = HiFANetConfig::tiny(2, 2, 3, 4, 2, 5);
        let model = Model::new(Variant::AvgPoolFc, cfg);
        let mut params = model.init_params(1);
        let names: Vec<String> = params.iter().map(|(n, _)| n.into()).collect();
        for name in names {
            for v in params.get_mut(&name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let dataset = vec![constant_obs(&cfg, 0.0, vec![0, 1])];
        let cfg_train = TrainConfig { epochs: 1, batch_size: 1, ..TrainConfig::default() };
        let history = train(&model, &mut params, &dataset, &cfg_train).unwrap();
        assert!((history[0].loss - (5.0f64).ln()).abs() < 1e-12);
    }

    fn separable_dataset(cfg: &HiFANetConfig, groups: usize, seed: u64) -> Vec<ObservationTensor> {
        // Two classes with opposite constant features plus small noise.
        let mut rng = Rng::new(seed);
        let k2 = cfg.k * cfg.k;
        (0..groups)
            .map(|_| {
                let labels: Vec<u16> = (0..cfg.m).map(|_| rng.below(2) as u16).collect();
                let mut features = Vec::with_capacity(cfg.m * cfg.n * k2 * cfg.d);
                for &label in &labels {
                    let base = if label == 0 { 1.0 } else { -1.0 };
                    for _ in 0..cfg.n * k2 * cfg.d {
                        features.push((base + rng.normal(0.05)) as f32);
                    }
                }
                ObservationTensor {
                    m: cfg.m,
                    n: cfg.n,
                    k: cfg.k,
                    d: cfg.d,
                    features,
                    patch_labels: vec![0; cfg.m * cfg.n * k2],
                    coords: (0..cfg.m).map(|i| [i as f64, 0.0, 0.0]).collect(),
                    labels,
                    frame_ids: vec![0; cfg.m * cfg.n],
                }
            })
            .collect()
    }

    #[test]
    fn linearly_separable_set_trains_past_95_percent() {
        let cfg = HiFANetConfig::tiny(4, 2, 3, 4, 2, 2);
        let model = Model::new(Variant::AvgPoolFc, cfg);
        let mut params = model.init_params(13);
        let dataset = separable_dataset(&cfg, 32, 13);
        let train_cfg = TrainConfig { epochs: 30, batch_size: 8, seed: 13, ..TrainConfig::default() };
        let history = train(&model, &mut params, &dataset, &train_cfg).unwrap();
        let final_acc = history.last().unwrap().avg_accuracy;
        assert!(final_acc > 0.95, "final accuracy {final_acc}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let cfg = HiFANetConfig::tiny(3, 2, 3, 4, 2, 3);
        let model = Model::new(Variant::AvgPoolFc, cfg);
        let dataset = separable_dataset(&cfg, 8, 5);
        let train_cfg = TrainConfig { epochs: 3, batch_size: 4, seed: 9, ..TrainConfig::default() };

        let mut params_a = model.init_params(9);
        let hist_a = train(&model, &mut params_a, &dataset, &train_cfg).unwrap();
        let mut params_b = model.init_params(9);
        let hist_b = train(&model, &mut params_b, &dataset, &train_cfg).unwrap();
        assert_eq!(hist_a, hist_b);
        for ((na, ta), (nb, tb)) in params_a.iter().zip(params_b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn early_training_loss_trend_is_non_increasing() {
        // Epoch-mean losses over the first five epochs: at most one increase,
        // and that increase below 5%.
        use crate::datagen::{build_observation_tensors, generate_scene, PoseNoise, SceneConfig};
        let scene_cfg = SceneConfig {
            class_count: 6,
            points_per_class: 60,
            feature_dim: 16,
            feature_noise_sigma: 0.2,
            label_corruption_rate: 0.1,
            pose_noise: PoseNoise::new(0.5, 0.05),
            seed: 3,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&scene_cfg).unwrap();
        let model_cfg = HiFANetConfig {
            m: 6,
            n: 3,
            k: 3,
            d: 16,
            d1: 4,
            heads: 2,
            d2: 4,
            class_count: 6,
            ffn_width: 16,
        };
        let (groups, _) =
            build_observation_tensors(&scene, &model_cfg, &scene_cfg.pose_noise, 33).unwrap();
        assert!(groups.len() >= 20);
        let model = Model::new(Variant::HiFANet, model_cfg);
        let mut params = model.init_params(3);
        let cfg = TrainConfig { lr0: 0.05, epochs: 5, batch_size: 8, seed: 3, ..TrainConfig::default() };
        let history = train(&model, &mut params, &groups, &cfg).unwrap();
        let mut increases = 0;
        for pair in history.windows(2) {
            if pair[1].loss > pair[0].loss {
                increases += 1;
                assert!(
                    pair[1].loss < pair[0].loss * 1.05,
                    "loss jumped from {} to {}",
                    pair[0].loss,
                    pair[1].loss
                );
            }
        }
        assert!(increases <= 1, "{increases} increases in the first five epochs");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = HiFANetConfig::tiny(2, 2, 3, 4, 2, 3);
        let model = Model::new(Variant::AvgPoolFc, cfg);
        let mut params = model.init_params(1);
        assert_eq!(
            train(&model, &mut params, &[], &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        );
        assert_eq!(evaluate(&model, &params, &[]), Err(TrainError::EmptyDataset));
    }
}
