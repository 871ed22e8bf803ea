//! End-to-end runs on synthetic data and the ablation presets.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data_io::{generate_synthetic, Dataset, Sample, SyntheticTask, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::layers::Fusion;
use crate::networks::{Network, NetworkConfig, Task};
use crate::scalar::Scalar;
use crate::training::{train, TrainConfig, TrainOutcome};

/// Everything one run needs: network, optimization and data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: SyntheticTaskSpec,
}

impl ExperimentConfig {
    /// Defaults for a task, with network and data sections consistent.
    pub fn for_task(task: Task) -> Self {
        let mut cfg = Self::default();
        if task == Task::Segmentation {
            cfg.data.task = SyntheticTask::PartSegmentation;
            cfg.data.shapes = vec![
                crate::data_io::ShapeFamily::CappedCylinder,
                crate::data_io::ShapeFamily::CubePost,
            ];
            cfg.network.task = Task::Segmentation;
            cfg.network.num_classes = cfg.data.num_classes();
            cfg.network.num_object_classes = cfg.data.shapes.len();
        }
        cfg
    }

    /// Checks each section and that the network matches the data.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        let want = match self.data.task {
            SyntheticTask::Classification => Task::Classification,
            SyntheticTask::PartSegmentation => Task::Segmentation,
        };
        if self.network.task != want {
            return Err(Error::Config(format!(
                "network.task is {} but the data describe {want}",
                self.network.task
            )));
        }
        if self.network.num_classes != self.data.num_classes() {
            return Err(Error::Config(format!(
                "network.num_classes is {} but the data have {} classes",
                self.network.num_classes,
                self.data.num_classes()
            )));
        }
        if self.network.num_object_classes != 0 && self.network.num_object_classes != self.data.shapes.len() {
            return Err(Error::Config(format!(
                "network.num_object_classes must be 0 or {}",
                self.data.shapes.len()
            )));
        }
        if self.data.points_per_cloud < self.network.stage_point_counts[0] {
            return Err(Error::Config(format!(
                "data.points_per_cloud {} is below the first stage's {} points",
                self.data.points_per_cloud, self.network.stage_point_counts[0]
            )));
        }
        Ok(())
    }
}

/// Clouds used to estimate kernel radii when building a network.
pub const RADIUS_SAMPLES: usize = 16;

pub fn build_network<T: Scalar>(cfg: &ExperimentConfig, data: &Dataset<T>) -> Result<Network<T>> {
    let clouds: Vec<_> = data.train.iter().take(RADIUS_SAMPLES).map(|s| &s.cloud).collect();
    Network::from_samples(cfg.network.clone(), &clouds, cfg.train.seed)
}

pub struct Run<T> {
    pub dataset: Dataset<T>,
    pub network: Network<T>,
    pub outcome: TrainOutcome<T>,
}

/// Generates the data, builds the network and trains it.
pub fn run<T: Scalar>(cfg: &ExperimentConfig, log: Option<&mut dyn Write>) -> Result<Run<T>> {
    cfg.validate()?;
    let dataset = generate_synthetic::<T>(&cfg.data)?;
    let mut network = build_network(cfg, &dataset)?;
    let outcome = train(
        &mut network,
        &dataset.train,
        &dataset.test,
        &dataset.category_parts,
        &cfg.train,
        log,
    )?;
    Ok(Run {
        dataset,
        network,
        outcome,
    })
}

/// Accuracy over points whose distance to the analytic part boundary is at most `band`.
pub fn boundary_band_accuracy<T: Scalar>(samples: &[Sample<T>], predictions: &[Vec<usize>], band: f64) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (s, p) in samples.iter().zip(predictions) {
        let (Some(d), Some(l)) = (&s.boundary_distance, &s.cloud.labels) else {
            return Err(Error::Evaluation("sample lacks boundary distances or labels".into()));
        };
        for ((&di, &li), &pi) in d.iter().zip(l).zip(p) {
            if di.to_f64().unwrap_or(f64::INFINITY) <= band {
                total += 1;
                hit += (li == pi) as usize;
            }
        }
    }
    if total == 0 {
        return Err(Error::Evaluation(format!("no points within {band} of a boundary")));
    }
    Ok(hit as f64 / total as f64)
}

/// One row of the LU ablation table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub use_m: bool,
    pub use_t: bool,
    pub fusion: Fusion,
    pub k: usize,
}

impl AblationVariant {
    fn new(name: &str, use_m: bool, use_t: bool, fusion: Fusion, k: usize) -> Self {
        Self {
            name: name.into(),
            use_m,
            use_t,
            fusion,
            k,
        }
    }

    /// Models A–J: M/T switches (A–D), fusion modes (A, E–G) and neighborhood sizes (H, A, I, J).
    pub fn preset(name: &str) -> Result<Self> {
        let v = match name.to_ascii_uppercase().as_str() {
            "A" => Self::new("A", true, true, Fusion::Add, 16),
            "B" => Self::new("B", false, true, Fusion::Add, 16),
            "C" => Self::new("C", true, false, Fusion::Add, 16),
            "D" => Self::new("D", false, false, Fusion::Add, 16),
            "E" => Self::new("E", true, true, Fusion::Concat, 16),
            "F" => Self::new("F", true, true, Fusion::Mul, 16),
            "G" => Self::new("G", true, true, Fusion::None, 16),
            "H" => Self::new("H", true, true, Fusion::Add, 8),
            "I" => Self::new("I", true, true, Fusion::Add, 24),
            "J" => Self::new("J", true, true, Fusion::Add, 32),
            other => return Err(Error::Config(format!("unknown ablation preset {other:?} (A-J)"))),
        };
        Ok(v)
    }

    /// Expands a grid spec: `all`, `fusion`, `neighbors`, `mt`, or a comma list of presets.
    pub fn grid(spec: &str) -> Result<Vec<Self>> {
        let names: Vec<&str> = match spec.trim().to_ascii_lowercase().as_str() {
            "all" => vec!["A", "B", "C", "D", "E", "F", "G", "H", "I", "J"],
            "fusion" => vec!["A", "E", "F", "G"],
            "neighbors" | "k" => vec!["H", "A", "I", "J"],
            "mt" => vec!["A", "B", "C", "D"],
            _ => spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect(),
        };
        if names.is_empty() {
            return Err(Error::Config("empty ablation grid".into()));
        }
        names.into_iter().map(Self::preset).collect()
    }

    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut out = cfg.clone();
        out.network.use_m = self.use_m;
        out.network.use_t = self.use_t;
        out.network.fusion = self.fusion;
        out.network.k_lu = self.k;
        if out.network.lu_per_stage == 0 {
            out.network.lu_per_stage = 1;
        }
        out
    }
}
