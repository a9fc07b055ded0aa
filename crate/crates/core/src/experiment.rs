//! One reproducible run: normalize a cube, extract and split patches, build
//! and train the network, and score the test split. Every random consumer
//! draws from its own stream of the single root seed.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::densenet::{ArchConfig, EkgNet};
use crate::error::{Error, Result};
use crate::hsi::{
    pad_and_extract, stratified_split, HsiCube, Normalization, PatchDataset, Split, SplitRatios,
};
use crate::metrics::{metrics, Metrics};
use crate::optim::AdamConfig;
use crate::params::{ParamKind, ParamStore};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{evaluate, train, EpochRecord, TrainConfig};

/// Checkpoint tensor names of the input standardization.
pub const NORM_MEAN: &str = "input.norm.mean";
pub const NORM_STD: &str = "input.norm.std";

/// Everything a run depends on besides the data itself.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl RunSpec {
    /// Seed of the network initialization.
    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.ratios.validate()
    }

    /// Flat rendering of the whole configuration, seed included.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = self.arch.to_kv();
        kv.insert("seed".into(), self.seed.to_string());
        kv.insert("ratios".into(), self.ratios.to_string());
        kv.insert("epochs".into(), self.train.epochs.to_string());
        kv.insert("batch_size".into(), self.train.batch_size.to_string());
        kv.insert("lr".into(), self.train.adam.lr.to_string());
        kv.insert("beta1".into(), self.train.adam.beta1.to_string());
        kv.insert("beta2".into(), self.train.adam.beta2.to_string());
        kv.insert("eps".into(), self.train.adam.eps.to_string());
        kv.insert(
            "patience".into(),
            self.train
                .patience
                .map_or_else(|| "none".into(), |p| p.to_string()),
        );
        kv
    }
}

/// Checks that a cube fits the architecture it is fed to.
pub fn check_geometry(arch: &ArchConfig, cube: &HsiCube) -> Result<()> {
    if arch.bands != cube.bands {
        return Err(Error::Consistency(format!(
            "model expects {} bands, cube `{}` has {}",
            arch.bands, cube.name, cube.bands
        )));
    }
    let classes = cube.num_classes();
    if arch.num_classes != classes {
        return Err(Error::Consistency(format!(
            "model expects {} classes, cube `{}` has {}",
            arch.num_classes, cube.name, classes
        )));
    }
    Ok(())
}

/// Standardizes `cube` (fitting the statistics unless given), extracts the
/// neighbour blocks and assigns the stratified split.
pub fn prepare(
    cube: &HsiCube,
    block: usize,
    ratios: SplitRatios,
    seed: u64,
    norm: Option<&Normalization>,
) -> Result<(PatchDataset, Normalization)> {
    let norm = match norm {
        Some(n) if n.mean.len() != cube.bands => {
            return Err(Error::Consistency(format!(
                "normalization covers {} bands, cube has {}",
                n.mean.len(),
                cube.bands
            )))
        }
        Some(n) => n.clone(),
        None => Normalization::fit(cube),
    };
    let ds = pad_and_extract(&norm.apply(cube), block)?;
    Ok((stratified_split(&ds, ratios, seed)?, norm))
}

/// Test-split result of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub dataset: String,
    pub split_sizes: [usize; 3],
    /// Epoch of the retained parameters; absent when scoring a checkpoint.
    pub best_epoch: Option<usize>,
    pub best_val_oa: Option<f64>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Per-class recall; `null` for classes absent from the test split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub absent_classes: Vec<usize>,
    pub confusion: Vec<Vec<u64>>,
    pub test_loss: f64,
}

impl Report {
    pub fn metrics(&self) -> (f64, f64, f64) {
        (self.oa, self.aa, self.kappa)
    }
}

pub struct RunOutput<T> {
    pub log: Vec<EpochRecord>,
    pub report: Report,
    pub model: EkgNet,
    /// Best-validation parameters.
    pub store: ParamStore<T>,
    pub normalization: Normalization,
}

impl<T: Scalar> RunOutput<T> {
    /// Checkpoint of the retained parameters, the standardization and the
    /// full configuration.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        checkpoint_with_norm(&self.report.config, &self.store, &self.normalization)
    }
}

fn checkpoint_with_norm<T: Scalar>(
    config: &BTreeMap<String, String>,
    store: &ParamStore<T>,
    norm: &Normalization,
) -> Checkpoint<T> {
    let mut ck = Checkpoint::from_store(config.clone(), store);
    let as_tensor = |v: &[f64]| {
        Tensor::new(vec![v.len()], v.iter().map(|&x| T::from_f64(x)).collect()).expect("non-empty")
    };
    ck.tensors
        .push((NORM_MEAN.into(), ParamKind::Buffer, as_tensor(&norm.mean)));
    ck.tensors
        .push((NORM_STD.into(), ParamKind::Buffer, as_tensor(&norm.std)));
    ck
}

/// Trains on `cube` and scores the best-validation parameters on the test split.
pub fn run<T: Scalar>(cube: &HsiCube, spec: &RunSpec) -> Result<RunOutput<T>> {
    spec.validate()?;
    check_geometry(&spec.arch, cube)?;
    // The statistics are rounded to the working precision so that a
    // checkpoint reproduces the exact same inputs.
    let fitted = Normalization::fit(cube);
    let round = |v: &[f64]| v.iter().map(|&x| T::from_f64(x).as_f64()).collect();
    let normalization = Normalization {
        mean: round(&fitted.mean),
        std: round(&fitted.std),
        flagged: fitted.flagged,
    };
    let (ds, _) = prepare(
        cube,
        spec.arch.block_size,
        spec.ratios,
        spec.seed,
        Some(&normalization),
    )?;
    let mut store = ParamStore::<T>::new();
    let model = EkgNet::build(&spec.arch, &mut store, spec.init_seed())?;
    let mut tcfg = spec.train.clone();
    tcfg.seed = spec.seed;
    let outcome = train(&model, &mut store, &ds, &tcfg)?;
    let mut best = outcome.best;
    let mut config = spec.to_kv();
    config.insert("precision".into(), T::DTYPE.name().into());
    let report = score(
        &model,
        &mut best,
        &ds,
        &config,
        spec.seed,
        &cube.name,
        tcfg.batch_size,
    )?;
    Ok(RunOutput {
        log: outcome.log,
        report: Report {
            best_epoch: Some(outcome.best_epoch),
            best_val_oa: outcome.best_val_oa,
            ..report
        },
        model,
        store: best,
        normalization,
    })
}

fn score<T: Scalar>(
    model: &EkgNet,
    store: &mut ParamStore<T>,
    ds: &PatchDataset,
    config: &BTreeMap<String, String>,
    seed: u64,
    dataset: &str,
    batch_size: usize,
) -> Result<Report> {
    let test = ds.indices(Split::Test);
    let ev = evaluate(model, store, ds, &test, batch_size)?;
    let Metrics {
        oa,
        aa,
        kappa,
        per_class,
        absent_classes,
    } = metrics(&ev.confusion)?;
    let c = ev.confusion.classes();
    Ok(Report {
        seed,
        config: config.clone(),
        dataset: dataset.to_string(),
        split_sizes: [Split::Train, Split::Val, Split::Test].map(|s| ds.indices(s).len()),
        best_epoch: None,
        best_val_oa: None,
        oa,
        aa,
        kappa,
        per_class_accuracy: per_class,
        absent_classes,
        confusion: ev
            .confusion
            .counts()
            .chunks(c)
            .map(<[u64]>::to_vec)
            .collect(),
        test_loss: ev.mean_loss,
    })
}

/// A checkpoint turned back into a runnable model.
pub struct Restored<T> {
    pub spec: RunSpec,
    pub model: EkgNet,
    pub store: ParamStore<T>,
    pub normalization: Normalization,
    pub config: BTreeMap<String, String>,
}

/// Rebuilds the model recorded in `ck`. Training-only keys are read back
/// where present so the run specification round-trips.
pub fn restore<T: Scalar>(ck: &Checkpoint<T>) -> Result<Restored<T>> {
    let arch = ArchConfig::from_kv(&ck.config)?;
    let get = |key: &str| {
        ck.config
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint config lacks `{key}`")))
    };
    let parse_err = |key: &str| Error::Format(format!("checkpoint config has a malformed `{key}`"));
    let seed: u64 = get("seed")?.parse().map_err(|_| parse_err("seed"))?;
    let ratios = SplitRatios::parse(get("ratios")?)?;
    fn num<V: std::str::FromStr>(config: &BTreeMap<String, String>, key: &str) -> Result<V> {
        config
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint config lacks `{key}`")))?
            .parse()
            .map_err(|_| Error::Format(format!("checkpoint config has a malformed `{key}`")))
    }
    let c = &ck.config;
    let train = TrainConfig {
        epochs: num(c, "epochs")?,
        batch_size: num(c, "batch_size")?,
        adam: AdamConfig {
            lr: num(c, "lr")?,
            beta1: num(c, "beta1")?,
            beta2: num(c, "beta2")?,
            eps: num(c, "eps")?,
        },
        seed,
        patience: match get("patience")?.as_str() {
            "none" => None,
            _ => Some(num(c, "patience")?),
        },
    };
    let spec = RunSpec {
        arch,
        train,
        ratios,
        seed,
    };
    let mut store = ParamStore::<T>::new();
    let model = EkgNet::build(&spec.arch, &mut store, spec.init_seed())?;
    ck.restore_into(&mut store)?;
    let vec_of = |name: &str| -> Result<Vec<f64>> {
        let t = ck
            .tensor(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        Ok(t.data().iter().map(|v| v.as_f64()).collect())
    };
    let normalization = Normalization {
        mean: vec_of(NORM_MEAN)?,
        std: vec_of(NORM_STD)?,
        flagged: Vec::new(),
    };
    Ok(Restored {
        spec,
        model,
        store,
        normalization,
        config: ck.config.clone(),
    })
}

/// Scores a restored model on the test split of `cube`, reproducing the
/// split of the original run.
pub fn evaluate_checkpoint<T: Scalar>(
    restored: &mut Restored<T>,
    cube: &HsiCube,
) -> Result<Report> {
    check_geometry(&restored.spec.arch, cube)?;
    let (ds, _) = prepare(
        cube,
        restored.spec.arch.block_size,
        restored.spec.ratios,
        restored.spec.seed,
        Some(&restored.normalization),
    )?;
    score(
        &restored.model,
        &mut restored.store,
        &ds,
        &restored.config,
        restored.spec.seed,
        &cube.name,
        restored.spec.train.batch_size,
    )
}
