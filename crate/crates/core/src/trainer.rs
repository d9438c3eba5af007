//! The training loop: shuffled mini-batches, sample repetition, two views,
//! sample-view and class-view losses on both heads, one Adam step per batch.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_image, augment_rows, repeat_batch, sample_rng, AugmentMode, AugmentSpec};
use crate::data::{sample_minibatch, EpochSampler, LabeledDataset, Samples};
use crate::error::{DcdcError, Result};
use crate::gradients::{dcdc_loss_grad_with, LossOptions};
use crate::losses::{Anchoring, LossBreakdown, Temperature};
use crate::matrix::{
    format_sig, prob_cosine_cols, prob_cosine_rows, softmax_rows, Matrix, ProbBatch,
};
use crate::metrics::MetricRecord;
use crate::model::{InputScaling, Model, ModelConfig};
use crate::optimizer::{adam_step, AdamConfig, AdamState};

/// How the two views of a batch are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ViewMode {
    /// Raw inputs against one augmented copy.
    #[default]
    RawAndAugmented,
    /// Two independent augmentations.
    BothAugmented,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tau: Temperature,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub sample_weight: f64,
    pub class_weight: f64,
    pub over_cluster_weight: f64,
    pub anchoring: Anchoring,
    pub views: ViewMode,
    pub model: ModelConfig,
    pub augment: AugmentSpec,
    /// Fit a per-feature standardisation on the training set before the first step.
    pub standardize_inputs: bool,
    pub seed: u64,
}

/// Batch size proportional to the class count, 12.5 samples per class.
pub fn default_batch_size(num_clusters: usize) -> usize {
    (12.5 * num_clusters as f64).round() as usize
}

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_EPOCHS: usize = 200;
pub const OVER_CLUSTER_RATIO: usize = 7;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];

impl TrainConfig {
    pub fn new(input_dim: usize, num_clusters: usize) -> Self {
        TrainConfig {
            tau: Temperature::new(DEFAULT_TAU).expect("positive"),
            batch_size: default_batch_size(num_clusters),
            epochs: DEFAULT_EPOCHS,
            adam: AdamConfig::default(),
            sample_weight: 1.0,
            class_weight: 1.0,
            over_cluster_weight: 1.0,
            anchoring: Anchoring::OneWay,
            views: ViewMode::RawAndAugmented,
            model: ModelConfig {
                input_dim,
                hidden_dims: DEFAULT_HIDDEN.to_vec(),
                num_clusters,
                over_clusters: OVER_CLUSTER_RATIO * num_clusters,
                seed: 0,
            },
            augment: AugmentSpec::default(),
            standardize_inputs: true,
            seed: 0,
        }
    }

    /// Sets both the run seed and the initialisation seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        self.augment.validate()?;
        if self.batch_size < 2 {
            return Err(DcdcError::config("batch size must be >= 2"));
        }
        if self.epochs == 0 {
            return Err(DcdcError::config("epochs must be >= 1"));
        }
        for (name, w) in [
            ("sample_weight", self.sample_weight),
            ("class_weight", self.class_weight),
            ("over_cluster_weight", self.over_cluster_weight),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(DcdcError::config(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }

    fn loss_options(&self) -> LossOptions {
        LossOptions {
            sample_weight: self.sample_weight,
            class_weight: self.class_weight,
            anchoring: self.anchoring,
        }
    }

    /// Rows the loss sees per step, after repetition.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.augment.repeat
    }

    /// Loss level above which an epoch counts towards the divergence guard.
    pub fn divergence_threshold(&self) -> f64 {
        10.0 * (self.effective_batch().max(self.model.num_clusters) as f64).ln()
    }
}

/// Consecutive epochs above the divergence threshold that abort a run.
pub const DIVERGENCE_PATIENCE: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub metrics: Option<MetricRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

pub const METRICS_HEADER: &str =
    "epoch,sample_loss,class_loss,total_loss,acc_dominating,acc_optimal,nmi,ari";

pub const EVAL_HEADER: &str = "acc_dominating,acc_optimal,nmi,ari";

/// `acc_dominating,acc_optimal,nmi,ari` with 9 significant digits.
pub fn format_metrics(m: &MetricRecord) -> String {
    [m.acc_dominating, m.acc_optimal, m.nmi, m.ari]
        .iter()
        .map(|v| format_sig(*v, 9))
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Header plus one row per epoch; metric columns are empty without labels.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for r in &self.epochs {
            let metrics = r.metrics.as_ref().map_or(",,,".to_string(), format_metrics);
            writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                format_sig(r.loss.sample_loss, 9),
                format_sig(r.loss.class_loss, 9),
                format_sig(r.loss.total, 9),
                metrics
            )?;
        }
        Ok(())
    }
}

/// Everything computed in one optimisation step.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Objective minimised by the step: main head plus weighted over-clustering head.
    pub loss: LossBreakdown,
    pub main: LossBreakdown,
    pub over: LossBreakdown,
    /// Main-head assignments of the two views, as used for the gradient.
    pub probs: ProbBatch,
    pub probs_aug: ProbBatch,
}

pub struct Trainer {
    config: TrainConfig,
    model: Model,
    adam: AdamState,
    rng: ChaCha8Rng,
    steps: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model.clone())?;
        let adam = AdamState::for_tensors(&model.tensors());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            config,
            model,
            adam,
            rng,
            steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Sets the model's fixed input scaling. Call before the first step.
    pub fn set_input_scaling(&mut self, scaling: InputScaling) -> Result<()> {
        self.model.set_input_scaling(scaling)
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// The two model inputs for a batch of (already repeated) sample indices.
    pub fn views(&self, samples: &Samples, rows: &[usize]) -> Result<(Matrix, Matrix)> {
        let step = self.steps;
        let seed = self.config.seed;
        let stream = |pos: usize, view: u64| (step << 24) | ((pos as u64) << 1) | view;
        let augmented = |view: u64| build_view(samples, rows, &self.config.augment, seed, |p| stream(p, view));
        let second = augmented(1)?;
        let first = match self.config.views {
            ViewMode::RawAndAugmented => samples.features(rows),
            ViewMode::BothAugmented => augmented(0)?,
        };
        Ok((first, second))
    }

    /// One optimisation step on the given batch of sample indices.
    pub fn step(&mut self, samples: &Samples, batch: &[usize]) -> Result<StepReport> {
        let rows = repeat_batch(batch, self.config.augment.repeat);
        let (x, x_aug) = self.views(samples, &rows)?;

        let a = self.model.forward(&x)?;
        let b = self.model.forward(&x_aug)?;
        let opts = self.config.loss_options();
        let tau = self.config.tau;

        let (main, g_main) = dcdc_loss_grad_with(&a.logits, &b.logits, tau, &opts)?;
        let w_over = self.config.over_cluster_weight;
        let (over, d_over, d_over_aug) = if w_over > 0.0 {
            let (l, mut g) = dcdc_loss_grad_with(&a.logits_over, &b.logits_over, tau, &opts)?;
            g.d_logits.scale(w_over);
            g.d_logits_aug.scale(w_over);
            (l, g.d_logits, g.d_logits_aug)
        } else {
            let shape = a.logits_over.shape();
            (
                LossBreakdown::default(),
                Matrix::zeros(shape.0, shape.1),
                Matrix::zeros(shape.0, shape.1),
            )
        };
        let loss = main.add(over.scaled(w_over));
        if !loss.total.is_finite() {
            return Err(DcdcError::Diverged(format!(
                "non-finite loss at step {}",
                self.steps
            )));
        }

        let mut grads = self.model.backward(&a.cache, &g_main.d_logits, &d_over)?;
        grads.add_assign(&self.model.backward(&b.cache, &g_main.d_logits_aug, &d_over_aug)?);

        let grad_tensors = grads.tensors();
        let mut params = self.model.tensors_mut();
        adam_step(&mut params, &grad_tensors, &mut self.adam, &self.config.adam)?;
        drop(params);
        if !self.model.is_finite() {
            return Err(DcdcError::Diverged(format!(
                "non-finite parameters after step {}",
                self.steps
            )));
        }
        self.steps += 1;

        Ok(StepReport {
            loss,
            main,
            over,
            probs: softmax_rows(&a.logits)?,
            probs_aug: softmax_rows(&b.logits)?,
        })
    }

    /// One pass over a fresh shuffled partition; returns the mean step loss.
    pub fn run_epoch(&mut self, samples: &Samples) -> Result<LossBreakdown> {
        let sampler = EpochSampler::new(samples.len(), self.config.batch_size)?;
        let batches = sampler.epoch(&mut self.rng);
        let mut acc = LossBreakdown::default();
        for batch in &batches {
            acc = acc.add(self.step(samples, batch)?.loss);
        }
        Ok(acc.scaled(1.0 / batches.len() as f64))
    }

    /// Full run. `observe` sees the model after every epoch and may return metrics
    /// to record; the optimisation itself only touches the samples.
    pub fn fit(
        &mut self,
        samples: &Samples,
        mut observe: impl FnMut(usize, &Model) -> Result<Option<MetricRecord>>,
    ) -> Result<TrainHistory> {
        if samples.is_empty() {
            return Err(DcdcError::config("dataset is empty"));
        }
        if samples.feature_dim() != self.config.model.input_dim {
            return Err(DcdcError::shape(format!(
                "dataset has {} features, model expects {}",
                samples.feature_dim(),
                self.config.model.input_dim
            )));
        }
        let threshold = self.config.divergence_threshold();
        let mut above = 0;
        let mut history = TrainHistory::default();
        for epoch in 1..=self.config.epochs {
            let loss = self.run_epoch(samples)?;
            above = if loss.total > threshold { above + 1 } else { 0 };
            if above >= DIVERGENCE_PATIENCE {
                return Err(DcdcError::Diverged(format!(
                    "total loss {} above {threshold} for {DIVERGENCE_PATIENCE} epochs (epoch {epoch})",
                    loss.total
                )));
            }
            let metrics = observe(epoch, &self.model)?;
            history.epochs.push(EpochRecord {
                epoch,
                loss,
                metrics,
            });
        }
        Ok(history)
    }
}

fn build_view(
    samples: &Samples,
    rows: &[usize],
    spec: &AugmentSpec,
    seed: u64,
    stream: impl Fn(usize) -> u64,
) -> Result<Matrix> {
    let streams: Vec<u64> = (0..rows.len()).map(&stream).collect();
    match (samples, spec.mode) {
        (Samples::Vectors(m), AugmentMode::Vector) => {
            Ok(augment_rows(&m.select_rows(rows), &spec.vector, seed, &streams))
        }
        (Samples::Images(images), AugmentMode::Image) => {
            let dim = samples.feature_dim();
            let mut data = Vec::with_capacity(rows.len() * dim);
            for (&i, &s) in rows.iter().zip(&streams) {
                let mut rng = sample_rng(seed, s);
                data.extend(augment_image(&images[i], &spec.image, &mut rng)?.to_unit_floats());
            }
            Matrix::from_vec(rows.len(), dim, data)
        }
        (_, mode) => Err(DcdcError::config(format!(
            "augmentation mode {mode:?} does not match the dataset's sample type"
        ))),
    }
}

/// Trains on the dataset's samples, scoring against its labels after every epoch.
pub fn train(config: TrainConfig, dataset: &LabeledDataset) -> Result<(Model, TrainHistory)> {
    let standardize = config.standardize_inputs;
    let mut trainer = Trainer::new(config)?;
    if standardize {
        trainer.set_input_scaling(InputScaling::fit(&dataset.samples().all_features()))?;
    }
    let history = trainer.fit(dataset.samples(), |_, model| {
        evaluate(model, dataset).map(Some)
    })?;
    Ok((trainer.into_model(), history))
}

/// Metrics of the model's predictions on every sample, without augmentation.
pub fn evaluate(model: &Model, dataset: &LabeledDataset) -> Result<MetricRecord> {
    let pred = model.predict(&dataset.samples().all_features())?;
    MetricRecord::compute(&pred, dataset.labels())
}

/// Sample-view and class-view affinity matrices of one batch.
#[derive(Debug, Clone)]
pub struct Affinity {
    pub sample: Matrix,
    pub class: Matrix,
    /// Dataset indices of the batch rows, in matrix order.
    pub indices: Vec<usize>,
    /// Ground-truth labels of those rows (diagnostics only).
    pub labels: Vec<usize>,
}

/// Cosine affinities between the main-head assignments of a batch and of its augmented
/// view. With `sort_by_truth`, rows are ordered by ground-truth label.
pub fn export_affinity(
    model: &Model,
    dataset: &LabeledDataset,
    batch_size: usize,
    sort_by_truth: bool,
    augment: &AugmentSpec,
    seed: u64,
) -> Result<Affinity> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = sample_minibatch(dataset.len(), batch_size, &mut rng)?;
    if sort_by_truth {
        indices.sort_by_key(|&i| (dataset.labels()[i], i));
    }
    let x = dataset.samples().features(&indices);
    let streams: Vec<u64> = (0..indices.len() as u64).collect();
    let x_aug = build_view(dataset.samples(), &indices, augment, seed, |p| streams[p])?;
    let u = softmax_rows(&model.logits(&x)?)?;
    let u_aug = softmax_rows(&model.logits(&x_aug)?)?;
    Ok(Affinity {
        sample: prob_cosine_rows(&u, &u_aug)?,
        class: prob_cosine_cols(&u, &u_aug)?,
        labels: indices.iter().map(|&i| dataset.labels()[i]).collect(),
        indices,
    })
}

/// Mean same-label entry of `m` minus mean different-label entry.
pub fn block_contrast(m: &Matrix, labels: &[usize]) -> f64 {
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if labels[i] == labels[j] {
                within += m[(i, j)];
                nw += 1;
            } else {
                between += m[(i, j)];
                nb += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    mean(within, nw) - mean(between, nb)
}

/// Smallest diagonal entry minus largest off-diagonal entry.
pub fn diagonal_margin(m: &Matrix) -> f64 {
    let mut min_diag = f64::INFINITY;
    let mut max_off = f64::NEG_INFINITY;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if i == j {
                min_diag = min_diag.min(m[(i, j)]);
            } else {
                max_off = max_off.max(m[(i, j)]);
            }
        }
    }
    min_diag - max_off
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, BlobsConfig};
    use crate::losses::dcdc_loss_with;

    fn tiny_blobs() -> LabeledDataset {
        generate_blobs(&BlobsConfig {
            k: 3,
            dim: 4,
            n_per_cluster: 10,
            ..BlobsConfig::default()
        })
        .unwrap()
        .0
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        let mut c = TrainConfig::new(4, 3).with_seed(5);
        c.epochs = epochs;
        c.batch_size = 10;
        c.model.hidden_dims = vec![8];
        c
    }

    #[test]
    fn defaults_follow_class_count() {
        let c = TrainConfig::new(16, 4);
        assert_eq!(c.batch_size, 50);
        assert_eq!(c.model.over_clusters, 28);
        assert_eq!(c.augment.repeat, 3);
        assert_eq!(c.tau.value(), 0.5);
        assert_eq!(c.adam.lr, 1e-3);
        assert_eq!(c.epochs, 200);
        assert_eq!(default_batch_size(10), 125);
    }

    #[test]
    fn smoke_single_epoch() {
        let ds = tiny_blobs();
        let mut c = tiny_config(1);
        c.batch_size = 30;
        let (_, h) = train(c, &ds).unwrap();
        assert_eq!(h.len(), 1);
        assert!(h.last().unwrap().metrics.is_some());
    }

    #[test]
    fn identical_seeds_give_identical_models() {
        let ds = tiny_blobs();
        let (a, ha) = train(tiny_config(3), &ds).unwrap();
        let (b, hb) = train(tiny_config(3), &ds).unwrap();
        let bits = |m: &Model| m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(ha, hb);
        let (c, _) = train(tiny_config(3).with_seed(6), &ds).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn step_loss_matches_loss_module() {
        let ds = tiny_blobs();
        for anchoring in [Anchoring::OneWay, Anchoring::Symmetric] {
            let mut c = tiny_config(1);
            c.anchoring = anchoring;
            c.over_cluster_weight = 0.0;
            let mut t = Trainer::new(c).unwrap();
            let r = t.step(ds.samples(), &[0, 5, 11, 29]).unwrap();
            assert_eq!(r.probs.rows(), 12);
            let again = dcdc_loss_with(&r.probs, &r.probs_aug, t.config().tau, anchoring).unwrap();
            assert!((r.loss.total - again.total).abs() < 1e-10);
            assert_eq!(r.over, LossBreakdown::default());
        }
    }

    #[test]
    fn single_term_modes_zero_the_other_term() {
        let ds = tiny_blobs();
        let mut c = tiny_config(2);
        c.class_weight = 0.0;
        let (_, h) = train(c, &ds).unwrap();
        assert!(h.epochs.iter().all(|e| e.loss.class_loss == 0.0 && e.loss.sample_loss > 0.0));

        let mut c = tiny_config(2);
        c.sample_weight = 0.0;
        let (_, h) = train(c, &ds).unwrap();
        assert!(h.epochs.iter().all(|e| e.loss.sample_loss == 0.0 && e.loss.class_loss > 0.0));
    }

    #[test]
    fn repeated_rows_share_the_raw_view_but_not_the_augmented_one() {
        let ds = tiny_blobs();
        let t = Trainer::new(tiny_config(1)).unwrap();
        let rows = repeat_batch(&[2, 7], 3);
        let (x, x_aug) = t.views(ds.samples(), &rows).unwrap();
        assert_eq!(x.row(0), x.row(1));
        assert_ne!(x_aug.row(0), x_aug.row(1));

        let mut c = tiny_config(1);
        c.views = ViewMode::BothAugmented;
        let t = Trainer::new(c).unwrap();
        let (x, x_aug) = t.views(ds.samples(), &rows).unwrap();
        assert_ne!(x.row(0), x.row(1));
        assert_ne!(x, x_aug);
    }

    #[test]
    fn wrong_feature_width_is_an_error() {
        let ds = tiny_blobs();
        let mut c = tiny_config(1);
        c.model.input_dim = 5;
        assert!(train(c, &ds).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny_config(1);
        c.batch_size = 1;
        assert!(Trainer::new(c).is_err());
        let mut c = tiny_config(1);
        c.epochs = 0;
        assert!(Trainer::new(c).is_err());
        let mut c = tiny_config(1);
        c.class_weight = -1.0;
        assert!(Trainer::new(c).is_err());
    }

    #[test]
    fn evaluate_is_pure_and_perfect_heads_score_one() {
        let ds = tiny_blobs();
        let (model, _) = train(tiny_config(1), &ds).unwrap();
        assert_eq!(evaluate(&model, &ds).unwrap(), evaluate(&model, &ds).unwrap());

        // Head scoring each point by negative squared distance to its class mean
        // (linear in x up to a per-row constant).
        let x = ds.samples().all_features();
        let mut means = Matrix::zeros(3, 4);
        for i in 0..ds.len() {
            for j in 0..4 {
                means[(ds.labels()[i], j)] += x[(i, j)] / 10.0;
            }
        }
        let mut m = Model::zeros(ModelConfig {
            input_dim: 4,
            hidden_dims: vec![],
            num_clusters: 3,
            over_clusters: 3,
            seed: 0,
        })
        .unwrap();
        let mut flat = vec![0.0; m.param_count()];
        for c in 0..3 {
            let norm: f64 = means.row(c).iter().map(|v| v * v).sum();
            for j in 0..4 {
                flat[j * 3 + c] = 2.0 * means[(c, j)];
            }
            flat[12 + c] = -norm;
        }
        m.set_flat(&flat).unwrap();
        let r = evaluate(&m, &ds).unwrap();
        assert_eq!((r.acc_optimal, r.acc_dominating), (1.0, 1.0));
    }

    #[test]
    fn affinity_shapes_and_ranges() {
        let ds = tiny_blobs();
        let (model, _) = train(tiny_config(2), &ds).unwrap();
        let aff = export_affinity(&model, &ds, 12, true, &AugmentSpec::default(), 3).unwrap();
        assert_eq!(aff.sample.shape(), (12, 12));
        assert_eq!(aff.class.shape(), (3, 3));
        assert!(aff.labels.windows(2).all(|w| w[0] <= w[1]));
        for i in 0..3 {
            assert!((0.0..=1.0 + 1e-12).contains(&aff.class[(i, i)]));
        }

        let same = export_affinity(
            &model,
            &ds,
            12,
            false,
            &AugmentSpec::identity(AugmentMode::Vector),
            3,
        )
        .unwrap();
        for i in 0..12 {
            assert!((same.sample[(i, i)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn contrast_helpers() {
        let m = Matrix::from_rows(&[
            vec![1.0, 0.8, 0.1],
            vec![0.8, 1.0, 0.0],
            vec![0.1, 0.0, 1.0],
        ])
        .unwrap();
        let c = block_contrast(&m, &[0, 0, 1]);
        assert!((c - (4.6 / 5.0 - 0.2 / 4.0)).abs() < 1e-12);
        assert!((diagonal_margin(&m) - 0.2).abs() < 1e-12);
    }
}
