use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dcdc_core::augment::AugmentMode;
use dcdc_core::checkpoint;
use dcdc_core::data::{generate_blobs, load_cifar10_binary, BlobsConfig, LabeledDataset};
use dcdc_core::gradcheck::{self, GradCheckSpec};
use dcdc_core::losses::{Anchoring, Temperature};
use dcdc_core::trainer::{
    default_batch_size, evaluate, export_affinity, format_metrics, train, TrainConfig, ViewMode,
    DEFAULT_EPOCHS, DEFAULT_HIDDEN, DEFAULT_TAU, EVAL_HEADER, OVER_CLUSTER_RATIO,
};
use dcdc_core::DcdcError;
use log::info;

use crate::config::{parse_list, KeyValues, Resolver};

/// Error carrying the process exit code: 1 for usage and configuration, 2 for runtime.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<DcdcError> for CliError {
    fn from(e: DcdcError) -> Self {
        match e {
            DcdcError::Config(_) => CliError::usage(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> CliResult<()>) -> CliResult<()> {
    let file = fs::File::create(path)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    write(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn gen_data(config: &BlobsConfig, out: &Path) -> CliResult<()> {
    let (dataset, _) = generate_blobs(config)?;
    write_file(out, |w| Ok(dataset.write_csv(w)?))?;
    let meta = meta_path(out);
    write_file(&meta, |w| {
        writeln!(w, "k = {}", config.k)?;
        writeln!(w, "dim = {}", config.dim)?;
        writeln!(w, "n_per_cluster = {}", config.n_per_cluster)?;
        writeln!(w, "center_scale = {}", config.center_scale)?;
        writeln!(w, "sigma = {}", config.sigma)?;
        writeln!(w, "seed = {}", config.seed)?;
        writeln!(w, "rows = {}", dataset.len())?;
        Ok(())
    })?;
    info!("wrote {} rows to {}", dataset.len(), out.display());
    Ok(())
}

/// `data.csv` -> `data.csv.meta`.
pub fn meta_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}

pub enum DataSource {
    Csv(PathBuf),
    Cifar(PathBuf),
    Blobs(BlobsConfig),
}

impl DataSource {
    fn check_exists(&self) -> CliResult<()> {
        match self {
            DataSource::Csv(p) | DataSource::Cifar(p) if !p.is_file() => Err(CliError::usage(
                format!("dataset {} does not exist", p.display()),
            )),
            _ => Ok(()),
        }
    }

    fn load(&self) -> CliResult<LabeledDataset> {
        self.check_exists()?;
        Ok(match self {
            DataSource::Csv(p) => LabeledDataset::read_csv_file(p)?,
            DataSource::Cifar(p) => load_cifar10_binary(p)?,
            DataSource::Blobs(cfg) => generate_blobs(cfg)?.0,
        })
    }

    fn augment_mode(&self) -> AugmentMode {
        match self {
            DataSource::Cifar(_) => AugmentMode::Image,
            _ => AugmentMode::Vector,
        }
    }
}

/// Dataset for `eval`, from exactly one of the two paths.
pub fn eval_source(data: Option<PathBuf>, cifar: Option<PathBuf>) -> CliResult<DataSource> {
    match (data, cifar) {
        (Some(p), None) => Ok(DataSource::Csv(p)),
        (None, Some(p)) => Ok(DataSource::Cifar(p)),
        _ => Err(CliError::usage("give exactly one of --data and --cifar")),
    }
}

/// Everything `train` needs once the configuration is resolved and the data loaded.
pub struct TrainPlan {
    pub config: TrainConfig,
    pub dataset: LabeledDataset,
    pub out: PathBuf,
    pub affinity_batch: usize,
    pub snapshot: String,
}

fn resolve_source(r: &mut Resolver) -> CliResult<DataSource> {
    let data: Option<String> = r.optional("data").map_err(CliError::usage)?;
    let cifar: Option<String> = r.optional("cifar").map_err(CliError::usage)?;
    let blobs: bool = r.optional("blobs").map_err(CliError::usage)?.unwrap_or(false);
    match (data, cifar, blobs) {
        (Some(p), None, false) => Ok(DataSource::Csv(p.into())),
        (None, Some(p), false) => Ok(DataSource::Cifar(p.into())),
        (None, None, true) => {
            let d = BlobsConfig::default();
            let cfg = BlobsConfig {
                k: r.get("blobs_k", d.k).map_err(CliError::usage)?,
                dim: r.get("blobs_dim", d.dim).map_err(CliError::usage)?,
                n_per_cluster: r.get("blobs_n_per_cluster", d.n_per_cluster).map_err(CliError::usage)?,
                center_scale: r.get("blobs_center_scale", d.center_scale).map_err(CliError::usage)?,
                sigma: r.get("blobs_sigma", d.sigma).map_err(CliError::usage)?,
                seed: r.get("blobs_seed", d.seed).map_err(CliError::usage)?,
            };
            Ok(DataSource::Blobs(cfg))
        }
        _ => Err(CliError::usage("set exactly one of data, cifar and blobs")),
    }
}

/// Resolves a run from a key-value config plus overrides, loading the dataset.
/// Nothing is written to disk.
pub fn plan_train(kv: KeyValues) -> CliResult<TrainPlan> {
    let mut r = Resolver::new(kv);
    let source = resolve_source(&mut r)?;
    source.check_exists()?;
    let out: String = r.get("out", "run".to_string()).map_err(CliError::usage)?;
    r.forget("out");
    let dataset = source.load()?;

    let usage = CliError::usage;
    let clusters: usize = r.get("clusters", dataset.num_classes()).map_err(usage)?;
    let mut config = TrainConfig::new(dataset.samples().feature_dim(), clusters);
    config.model.over_clusters = r
        .get("over_clusters", OVER_CLUSTER_RATIO * clusters)
        .map_err(usage)?;
    config.model.hidden_dims = r.get_list("hidden", &DEFAULT_HIDDEN).map_err(usage)?;
    config.epochs = r.get("epochs", DEFAULT_EPOCHS).map_err(usage)?;
    config.batch_size = r
        .get("batch_size", default_batch_size(clusters))
        .map_err(usage)?;
    config.tau = Temperature::new(r.get("tau", DEFAULT_TAU).map_err(usage)?)?;
    config.augment.repeat = r.get("repeat", config.augment.repeat).map_err(usage)?;
    config.adam.lr = r.get("lr", config.adam.lr).map_err(usage)?;
    config.adam.beta1 = r.get("beta1", config.adam.beta1).map_err(usage)?;
    config.adam.beta2 = r.get("beta2", config.adam.beta2).map_err(usage)?;
    config.adam.eps = r.get("eps", config.adam.eps).map_err(usage)?;
    let seed: u64 = r.get("seed", 0).map_err(usage)?;
    config = config.with_seed(seed);
    config.sample_weight = r.get("sample_weight", 1.0).map_err(usage)?;
    config.class_weight = r.get("class_weight", 1.0).map_err(usage)?;
    config.over_cluster_weight = r.get("over_cluster_weight", 1.0).map_err(usage)?;
    config.anchoring = match r.get("anchoring", "one_way".to_string()).map_err(usage)?.as_str() {
        "one_way" => Anchoring::OneWay,
        "symmetric" => Anchoring::Symmetric,
        other => return Err(usage(format!("anchoring must be one_way or symmetric, got `{other}`"))),
    };
    config.views = match r
        .get("views", "raw_and_augmented".to_string())
        .map_err(usage)?
        .as_str()
    {
        "raw_and_augmented" => ViewMode::RawAndAugmented,
        "both_augmented" => ViewMode::BothAugmented,
        other => {
            return Err(usage(format!(
                "views must be raw_and_augmented or both_augmented, got `{other}`"
            )))
        }
    };
    config.standardize_inputs = r.get("standardize", true).map_err(usage)?;

    let aug = &mut config.augment;
    aug.mode = source.augment_mode();
    aug.vector.noise_sigma = r.get("noise_sigma", aug.vector.noise_sigma).map_err(usage)?;
    aug.vector.scale_lo = r.get("scale_lo", aug.vector.scale_lo).map_err(usage)?;
    aug.vector.scale_hi = r.get("scale_hi", aug.vector.scale_hi).map_err(usage)?;
    aug.image.crop_padding = r.get("crop_padding", aug.image.crop_padding).map_err(usage)?;
    aug.image.flip_prob = r.get("flip_prob", aug.image.flip_prob).map_err(usage)?;
    aug.image.jitter_strength = r
        .get("jitter_strength", aug.image.jitter_strength)
        .map_err(usage)?;
    aug.image.grayscale_prob = r
        .get("grayscale_prob", aug.image.grayscale_prob)
        .map_err(usage)?;

    let affinity_batch = r
        .get("affinity_batch", config.batch_size.min(dataset.len()))
        .map_err(usage)?;
    config.validate()?;
    if config.batch_size > dataset.len() {
        return Err(usage(format!(
            "batch_size {} exceeds the dataset size {}",
            config.batch_size,
            dataset.len()
        )));
    }
    if affinity_batch == 0 || affinity_batch > dataset.len() {
        return Err(usage(format!("affinity_batch must lie in [1, {}]", dataset.len())));
    }
    Ok(TrainPlan {
        config,
        dataset,
        out: PathBuf::from(out),
        affinity_batch,
        snapshot: r.snapshot(),
    })
}

pub fn run_train(plan: TrainPlan) -> CliResult<()> {
    let TrainPlan {
        config,
        dataset,
        out,
        affinity_batch,
        snapshot,
    } = plan;
    fs::create_dir_all(&out)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", out.display())))?;
    write_file(&out.join("config.snapshot"), |w| Ok(w.write_all(snapshot.as_bytes())?))?;

    info!(
        "training {} samples, C = {}, B = {}, r = {}, {} epochs",
        dataset.len(),
        config.model.num_clusters,
        config.batch_size,
        config.augment.repeat,
        config.epochs
    );
    let augment = config.augment;
    let seed = config.seed;
    let (model, history) = train(config, &dataset)?;
    write_file(&out.join("metrics.csv"), |w| Ok(history.write_csv(w)?))?;
    checkpoint::save(&model, &out.join("model.ckpt"))?;

    let aff = export_affinity(&model, &dataset, affinity_batch, true, &augment, seed)?;
    write_file(&out.join("affinity_M.csv"), |w| Ok(aff.sample.write_csv(w)?))?;
    write_file(&out.join("affinity_N.csv"), |w| Ok(aff.class.write_csv(w)?))?;
    if let Some(m) = history.last().and_then(|e| e.metrics.as_ref()) {
        info!(
            "final acc {:.4} nmi {:.4} ari {:.4}",
            m.acc_optimal, m.nmi, m.ari
        );
    }
    Ok(())
}

/// Header and one metrics row for a checkpoint on a dataset.
pub fn eval(checkpoint_path: &Path, source: &DataSource) -> CliResult<String> {
    if !checkpoint_path.is_file() {
        return Err(CliError::usage(format!(
            "checkpoint {} does not exist",
            checkpoint_path.display()
        )));
    }
    let dataset = source.load()?;
    let model = checkpoint::load(checkpoint_path)?;
    let metrics = evaluate(&model, &dataset)?;
    Ok(format!("{EVAL_HEADER}\n{}\n", format_metrics(&metrics)))
}

pub struct GradCheckArgs {
    pub batch: usize,
    pub clusters: usize,
    pub over_clusters: Option<usize>,
    pub input_dim: usize,
    pub hidden: String,
    pub tau: f64,
    pub seed: u64,
}

/// Runs the check and returns the report text and whether it passed.
pub fn gradcheck(args: &GradCheckArgs) -> CliResult<(String, bool)> {
    let spec = GradCheckSpec {
        batch: args.batch,
        input_dim: args.input_dim,
        hidden_dims: parse_list(&args.hidden).map_err(CliError::usage)?,
        num_clusters: args.clusters,
        over_clusters: args.over_clusters.unwrap_or(2 * args.clusters),
        tau: args.tau,
        seed: args.seed,
    };
    let report = gradcheck::run(&spec)?;
    let passed = report.passed();
    let text = format!(
        "params = {}\nloss = {:e}\nmax_rel_error = {:e}\nthreshold = {:e}\nresult = {}\n",
        report.params,
        report.loss,
        report.max_rel_error,
        gradcheck::PASS_THRESHOLD,
        if passed { "pass" } else { "fail" }
    );
    Ok((text, passed))
}
