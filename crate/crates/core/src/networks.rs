//! Five-stage point networks with Laplacian Units.
//!
//! The encoder lifts the input with a strided KPConv-DS onto the first
//! farthest-point-sampled level, then runs `blocks_per_stage` bottlenecks and
//! `lu_per_stage` LUs per stage. Between stages features are mean-pooled over
//! the `k_conv` nearest finer points and mapped by a `linear → BN → ReLU`
//! transition. Classification pools the last stage per cloud; segmentation
//! walks back up with inverse-distance interpolation, skip concatenation, a
//! fusing MLP and one LU per step.
//!
//! Several clouds form a batch by concatenating their points; batch
//! normalization therefore sees every point in the batch.
//!
//! # Parameter count
//!
//! With widths `w1..w5`, input width `F`, `K` kernel points, reduction
//! ratio `r`, KPConv MLP depth `m` and `c = d / r`:
//!
//! ```text
//! conv(a→b)   = (a + 4)·b + 2b + (m - 1)·(b² + 2b) + K·b
//! block(d)    = d·c + 2c + conv(c→c) + 2c + c·d + 2d
//! lu(d)       = [M] d² + [T] 2d + [concat] 2d²
//! encoder     = conv(F→w1) + 2·w1 + Σ_s (B·block(w_s) + L_s·lu(w_s))
//!             + Σ_{s<5} (w_s·w_{s+1} + 2·w_{s+1})
//! cls head    = w5² + 2·w5 + w5·C + C
//! seg head    = Σ_{s=2..5} ((w_s + w_{s-1})·w_{s-1} + 2·w_{s-1} + D_s·lu(w_{s-1}))
//!             + (w1 + F)·w1 + 2·w1 + D_1·lu(w1)
//!             + (w1 + O)·w1 + 2·w1 + w1·C + C
//! ```
//!
//! where `L_s = lu_per_stage` and `D_s = 1` when stage `s` carries LUs
//! (`lu_per_stage > 0`, `s ≤ lu_stages` and `decoder_lus`), else 0; `O` is
//! the number of object categories used for conditioning.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, NeighborIndex, Point, PointCloud};
use crate::laplace::{self, CurvatureReport};
use crate::layers::{
    BatchNorm, Bottleneck, Fusion, KernelPoints, KpConvDs, LaplacianUnit, Linear, LuConfig, Mlp, PairGeometry,
};
use crate::params::{Forward, Mode, ParamStore};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

pub const STAGES: usize = 5;
/// Coarse neighbors used by the decoder's inverse-distance upsampling.
pub const INTERP_K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Segmentation,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classification" | "cls" => Ok(Task::Classification),
            "segmentation" | "seg" => Ok(Task::Segmentation),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub task: Task,
    /// Width of the per-point input features.
    pub input_features: usize,
    pub num_classes: usize,
    /// Object categories appended one-hot before the segmentation head (0 disables).
    pub num_object_classes: usize,
    pub stage_widths: [usize; STAGES],
    pub stage_point_counts: [usize; STAGES],
    pub blocks_per_stage: usize,
    pub lu_per_stage: usize,
    /// Only the first `lu_stages` stages (and their decoder steps) carry LUs.
    pub lu_stages: usize,
    /// Segmentation only: whether decoder steps carry LUs.
    pub decoder_lus: bool,
    pub k_conv: usize,
    pub k_lu: usize,
    pub use_m: bool,
    pub use_t: bool,
    pub fusion: Fusion,
    pub bottleneck_ratio: usize,
    pub kernel_points: usize,
    pub kpconv_mlp_depth: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            task: Task::Classification,
            input_features: 3,
            num_classes: 3,
            num_object_classes: 0,
            stage_widths: [32, 64, 128, 256, 512],
            stage_point_counts: [512, 256, 128, 64, 32],
            blocks_per_stage: 1,
            lu_per_stage: 1,
            lu_stages: STAGES,
            decoder_lus: true,
            k_conv: 16,
            k_lu: 16,
            use_m: true,
            use_t: true,
            fusion: Fusion::Add,
            bottleneck_ratio: 4,
            kernel_points: crate::layers::DEFAULT_KERNEL_POINTS,
            kpconv_mlp_depth: 1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_features == 0 || self.num_classes == 0 {
            return bad("input_features and num_classes must be positive".into());
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return bad(format!("stage widths must be positive: {:?}", self.stage_widths));
        }
        if self.stage_point_counts[0] == 0 || self.stage_point_counts.windows(2).any(|w| w[1] >= w[0] || w[1] == 0) {
            return bad(format!(
                "stage point counts must be positive and strictly decreasing: {:?}",
                self.stage_point_counts
            ));
        }
        if self.k_conv == 0 || self.k_lu == 0 {
            return bad("neighbor counts must be at least 1".into());
        }
        if self.lu_stages > STAGES {
            return bad(format!("lu_stages must be at most {STAGES}, got {}", self.lu_stages));
        }
        if self.kernel_points == 0 || self.kpconv_mlp_depth == 0 {
            return bad("kernel_points and kpconv_mlp_depth must be at least 1".into());
        }
        if self.blocks_per_stage > 0 {
            for &w in &self.stage_widths {
                if self.bottleneck_ratio == 0 || w % self.bottleneck_ratio != 0 {
                    return bad(format!(
                        "stage width {w} is not divisible by bottleneck ratio {}",
                        self.bottleneck_ratio
                    ));
                }
            }
        }
        if self.task == Task::Classification && self.num_object_classes > 0 {
            return bad("object-class conditioning only applies to segmentation".into());
        }
        for &w in &self.stage_widths {
            self.lu_config(w).validate()?;
        }
        Ok(())
    }

    pub fn lu_config(&self, width: usize) -> LuConfig {
        LuConfig {
            k: self.k_lu,
            use_m: self.use_m,
            use_t: self.use_t,
            fusion: self.fusion,
            d_in: width,
            d_out: width,
        }
    }

    /// Whether stage `s` (1-based) and its decoder step carry LUs.
    pub fn has_lu(&self, s: usize) -> bool {
        self.lu_per_stage > 0 && s >= 1 && s <= self.lu_stages
    }

    /// Whether the segmentation decoder step leaving stage `s` ends in an LU.
    pub fn has_decoder_lu(&self, s: usize) -> bool {
        self.task == Task::Segmentation && self.decoder_lus && self.has_lu(s)
    }

    /// Closed-form trainable parameter count; see the module docs.
    pub fn expected_param_count(&self) -> usize {
        let w = &self.stage_widths;
        let kk = self.kernel_points;
        let m = self.kpconv_mlp_depth;
        let conv = |a: usize, b: usize| (a + 4) * b + 2 * b + (m - 1) * (b * b + 2 * b) + kk * b;
        let block = |d: usize| {
            let c = d / self.bottleneck_ratio;
            d * c + 2 * c + conv(c, c) + 2 * c + c * d + 2 * d
        };
        let lu = |d: usize| {
            let mut n = 0;
            if self.use_m {
                n += d * d;
            }
            if self.use_t {
                n += 2 * d;
            }
            if self.fusion == Fusion::Concat {
                n += 2 * d * d;
            }
            n
        };
        let lus = |s: usize| if self.has_lu(s) { self.lu_per_stage } else { 0 };
        let dec_lu = |s: usize| if self.has_decoder_lu(s) { 1 } else { 0 };
        let f = self.input_features;
        let c = self.num_classes;
        let mut total = conv(f, w[0]) + 2 * w[0];
        for s in 1..=STAGES {
            total += self.blocks_per_stage * block(w[s - 1]) + lus(s) * lu(w[s - 1]);
        }
        for s in 1..STAGES {
            total += w[s - 1] * w[s] + 2 * w[s];
        }
        match self.task {
            Task::Classification => total + w[4] * w[4] + 2 * w[4] + w[4] * c + c,
            Task::Segmentation => {
                for s in 2..=STAGES {
                    total += (w[s - 1] + w[s - 2]) * w[s - 2] + 2 * w[s - 2] + dec_lu(s) * lu(w[s - 2]);
                }
                total += (w[0] + f) * w[0] + 2 * w[0] + dec_lu(1) * lu(w[0]);
                let o = self.num_object_classes;
                total + (w[0] + o) * w[0] + 2 * w[0] + w[0] * c + c
            }
        }
    }

    /// Neighbor count clamped to the size of a level.
    fn clamp_k(k: usize, n: usize) -> usize {
        k.min(n)
    }
}

/// Per-cloud geometry: sampled levels and every neighborhood the network reads.
#[derive(Clone, Debug)]
pub struct SamplePlan<T> {
    /// Level 0 is the input; level `s` holds stage `s`'s points.
    pub levels: Vec<Vec<Point<T>>>,
    /// Stage-1 points gathering from the input.
    pub stem: PairGeometry<T>,
    /// Self-neighborhoods for the bottlenecks, per stage.
    pub conv: Vec<Option<PairGeometry<T>>>,
    /// Self-neighborhoods for LUs, per level.
    pub lu: Vec<Option<NeighborIndex>>,
    /// Entry `s - 1` pools stage `s` onto stage `s + 1`.
    pub pool: Vec<NeighborIndex>,
    /// Entry `l` upsamples level `l + 1` onto level `l`.
    pub interp: Vec<(NeighborIndex, Vec<T>)>,
}

impl<T: Scalar> SamplePlan<T> {
    pub fn build(cfg: &NetworkConfig, positions: &[Point<T>]) -> Result<Self> {
        let n0 = positions.len();
        if n0 < cfg.stage_point_counts[0] {
            return Err(Error::InsufficientPoints {
                needed: cfg.stage_point_counts[0],
                available: n0,
            });
        }
        let mut levels = vec![positions.to_vec()];
        for &m in &cfg.stage_point_counts {
            let prev = levels.last().expect("level 0");
            let start = geometry::nearest_to_centroid(prev);
            let idx = geometry::farthest_point_sample(prev, m, start)?;
            let next: Vec<Point<T>> = idx.iter().map(|&i| prev[i]).collect();
            levels.push(next);
        }
        let kc = |n: usize| NetworkConfig::clamp_k(cfg.k_conv, n);
        let kl = |n: usize| NetworkConfig::clamp_k(cfg.k_lu, n);
        let stem_nbr = geometry::knn(&levels[1], &levels[0], kc(n0))?;
        let stem = PairGeometry::new(&levels[1], &levels[0], stem_nbr)?;
        let mut conv = vec![None];
        let mut lu = Vec::with_capacity(STAGES + 1);
        let seg = cfg.task == Task::Segmentation;
        lu.push(if cfg.has_decoder_lu(1) {
            Some(geometry::knn_self(&levels[0], kl(n0))?)
        } else {
            None
        });
        for s in 1..=STAGES {
            let pts = &levels[s];
            conv.push(if cfg.blocks_per_stage > 0 {
                let nbr = geometry::knn_self(pts, kc(pts.len()))?;
                Some(PairGeometry::new(pts, pts, nbr)?)
            } else {
                None
            });
            let needs_lu = cfg.has_lu(s) || cfg.has_decoder_lu(s + 1);
            lu.push(if needs_lu {
                Some(geometry::knn_self(pts, kl(pts.len()))?)
            } else {
                None
            });
        }
        let mut pool = Vec::with_capacity(STAGES - 1);
        for s in 1..STAGES {
            pool.push(geometry::knn(&levels[s + 1], &levels[s], kc(levels[s].len()))?);
        }
        let mut interp = Vec::new();
        if seg {
            for l in 0..STAGES {
                let k = INTERP_K.min(levels[l + 1].len());
                interp.push(geometry::interpolation_weights(&levels[l], &levels[l + 1], k)?);
            }
        }
        Ok(Self {
            levels,
            stem,
            conv,
            lu,
            pool,
            interp,
        })
    }
}

/// Several clouds stacked into one forward pass.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub n_clouds: usize,
    /// Points per level per cloud.
    pub level_sizes: Vec<Vec<usize>>,
    pub levels: Vec<Vec<Point<T>>>,
    pub features: Tensor<T>,
    pub object_onehot: Option<Tensor<T>>,
    stem: PairGeometry<T>,
    conv: Vec<Option<PairGeometry<T>>>,
    lu: Vec<Option<NeighborIndex>>,
    pool: Vec<(NeighborIndex, Arc<[T]>)>,
    interp: Vec<(NeighborIndex, Arc<[T]>)>,
    /// Cloud id of every last-stage point.
    last_groups: Arc<[usize]>,
}

fn concat_opt<X>(items: Vec<Option<&X>>, f: impl FnOnce(&[&X]) -> Result<X>) -> Result<Option<X>> {
    if items.iter().any(Option::is_none) {
        return Ok(None);
    }
    let all: Vec<&X> = items.into_iter().flatten().collect();
    f(&all).map(Some)
}

impl<T: Scalar> Batch<T> {
    pub fn assemble(cfg: &NetworkConfig, samples: &[(&PointCloud<T>, &SamplePlan<T>)]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::DegenerateBatch(0));
        }
        let b = samples.len();
        let levels_n = STAGES + 1;
        let mut level_sizes = vec![Vec::with_capacity(b); levels_n];
        let mut levels = vec![Vec::new(); levels_n];
        for (_, plan) in samples {
            for l in 0..levels_n {
                level_sizes[l].push(plan.levels[l].len());
                levels[l].extend_from_slice(&plan.levels[l]);
            }
        }
        let f = cfg.input_features;
        let mut feats = Vec::with_capacity(levels[0].len() * f);
        for (cloud, _) in samples {
            if cloud.feature_width() != f {
                return Err(Error::Shape {
                    op: "network input",
                    left: cloud.features.shape().to_vec(),
                    right: vec![cloud.len(), f],
                });
            }
            feats.extend_from_slice(cloud.features.data());
        }
        let features = Tensor::new(vec![levels[0].len(), f], feats)?;
        let object_onehot = if cfg.task == Task::Segmentation && cfg.num_object_classes > 0 {
            let o = cfg.num_object_classes;
            let mut data = Vec::with_capacity(levels[0].len() * o);
            for (cloud, _) in samples {
                let oc = cloud
                    .object_class
                    .as_ref()
                    .filter(|v| v.len() == o)
                    .ok_or_else(|| Error::Config(format!("cloud lacks a length-{o} object-class vector")))?;
                for _ in 0..cloud.len() {
                    data.extend_from_slice(oc);
                }
            }
            Some(Tensor::new(vec![levels[0].len(), o], data)?)
        } else {
            None
        };
        let stem = PairGeometry::concat(&samples.iter().map(|(_, p)| &p.stem).collect::<Vec<_>>())?;
        let conv = (0..levels_n)
            .map(|l| concat_opt(samples.iter().map(|(_, p)| p.conv[l].as_ref()).collect(), PairGeometry::concat))
            .collect::<Result<Vec<_>>>()?;
        let lu = (0..levels_n)
            .map(|l| concat_opt(samples.iter().map(|(_, p)| p.lu[l].as_ref()).collect(), NeighborIndex::concat))
            .collect::<Result<Vec<_>>>()?;
        let pool = (0..STAGES - 1)
            .map(|i| {
                let nbr = NeighborIndex::concat(&samples.iter().map(|(_, p)| &p.pool[i]).collect::<Vec<_>>())?;
                let w: T = T::one() / cast(nbr.k() as f64);
                let weights: Arc<[T]> = vec![w; nbr.flat().len()].into();
                Ok((nbr, weights))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut interp = Vec::new();
        if cfg.task == Task::Segmentation {
            for l in 0..STAGES {
                let nbr = NeighborIndex::concat(&samples.iter().map(|(_, p)| &p.interp[l].0).collect::<Vec<_>>())?;
                let w: Vec<T> = samples.iter().flat_map(|(_, p)| p.interp[l].1.iter().copied()).collect();
                interp.push((nbr, w.into()));
            }
        }
        let last_groups: Arc<[usize]> = level_sizes[STAGES]
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
            .collect();
        Ok(Self {
            n_clouds: b,
            level_sizes,
            levels,
            features,
            object_onehot,
            stem,
            conv,
            lu,
            pool,
            interp,
            last_groups,
        })
    }

    /// Total input points.
    pub fn num_points(&self) -> usize {
        self.levels[0].len()
    }

    /// Self-neighborhood used by LUs at `level`, if any LU runs there.
    pub fn lu_neighbors(&self, level: usize) -> Option<&NeighborIndex> {
        self.lu.get(level).and_then(Option::as_ref)
    }
}

/// Mean pair distance of each kernel neighborhood (stem first, then stages 1..5).
pub fn estimate_kernel_radii<T: Scalar>(plans: &[&SamplePlan<T>]) -> Result<[f64; STAGES + 1]> {
    if plans.is_empty() {
        return Err(Error::Config("kernel radius estimation needs at least one cloud".into()));
    }
    let mut out = [0.0; STAGES + 1];
    for (slot, r) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut n = 0usize;
        for p in plans {
            let g = if slot == 0 {
                Some(&p.stem)
            } else {
                p.conv[slot].as_ref()
            };
            if let Some(g) = g {
                acc += g.mean_distance().to_f64().unwrap_or(0.0);
                n += 1;
            }
        }
        *r = if n > 0 && acc > 0.0 { acc / n as f64 } else { 1.0 };
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<Bottleneck>,
    lus: Vec<LaplacianUnit>,
}

#[derive(Clone, Debug)]
struct DecoderStep {
    /// Coarse stage this step starts from; output lives on level `from - 1`.
    from: usize,
    mlp: Mlp,
    lu: Option<LaplacianUnit>,
}

#[derive(Clone, Debug)]
enum Head {
    Classification { mlp: Mlp, out: Linear },
    Segmentation { steps: Vec<DecoderStep>, mlp: Mlp, out: Linear },
}

/// An LU-CNN together with its parameters.
#[derive(Clone, Debug)]
pub struct Network<T> {
    cfg: NetworkConfig,
    store: ParamStore<T>,
    stem: KpConvDs,
    stem_bn: BatchNorm,
    stages: Vec<Stage>,
    transitions: Vec<Mlp>,
    head: Head,
}

impl<T: Scalar> Network<T> {
    /// Builds with the given kernel radii (stem, then stages 1..5) and a seeded initialization.
    pub fn new(cfg: NetworkConfig, radii: &[f64; STAGES + 1], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = cfg.stage_widths;
        let depth = cfg.kpconv_mlp_depth;
        let stem_kernel = KernelPoints::new(cfg.kernel_points, radii[0])?;
        let stem = KpConvDs::new(&mut store, "stem.conv", cfg.input_features, w[0], &stem_kernel, depth, &mut rng)?;
        let stem_bn = BatchNorm::new(&mut store, "stem.bn", w[0]);
        let mut stages = Vec::with_capacity(STAGES);
        let mut transitions = Vec::with_capacity(STAGES - 1);
        for s in 1..=STAGES {
            let d = w[s - 1];
            if s > 1 {
                transitions.push(Mlp::new(&mut store, &format!("enc{s}.down"), w[s - 2], &[d], true, &mut rng));
            }
            let kernel = KernelPoints::new(cfg.kernel_points, radii[s])?;
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| {
                    Bottleneck::new(
                        &mut store,
                        &format!("enc{s}.block{b}"),
                        d,
                        cfg.bottleneck_ratio,
                        &kernel,
                        depth,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let n_lu = if cfg.has_lu(s) { cfg.lu_per_stage } else { 0 };
            let lus = (0..n_lu)
                .map(|i| LaplacianUnit::new(&mut store, &format!("enc{s}.lu{i}"), cfg.lu_config(d), &mut rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { blocks, lus });
        }
        let head = match cfg.task {
            Task::Classification => Head::Classification {
                mlp: Mlp::new(&mut store, "head.mlp", w[4], &[w[4]], true, &mut rng),
                out: Linear::new(&mut store, "head.out", w[4], cfg.num_classes, true, &mut rng),
            },
            Task::Segmentation => {
                let mut steps = Vec::with_capacity(STAGES);
                for s in (1..=STAGES).rev() {
                    let (skip, d) = if s >= 2 {
                        (w[s - 2], w[s - 2])
                    } else {
                        (cfg.input_features, w[0])
                    };
                    let mlp = Mlp::new(&mut store, &format!("dec{s}.mlp"), w[s - 1] + skip, &[d], true, &mut rng);
                    let lu = if cfg.has_decoder_lu(s) {
                        Some(LaplacianUnit::new(&mut store, &format!("dec{s}.lu0"), cfg.lu_config(d), &mut rng)?)
                    } else {
                        None
                    };
                    steps.push(DecoderStep { from: s, mlp, lu });
                }
                Head::Segmentation {
                    steps,
                    mlp: Mlp::new(&mut store, "head.mlp", w[0] + cfg.num_object_classes, &[w[0]], true, &mut rng),
                    out: Linear::new(&mut store, "head.out", w[0], cfg.num_classes, true, &mut rng),
                }
            }
        };
        Ok(Self {
            cfg,
            store,
            stem,
            stem_bn,
            stages,
            transitions,
            head,
        })
    }

    /// Builds with kernel radii estimated from sample clouds.
    pub fn from_samples(cfg: NetworkConfig, clouds: &[&PointCloud<T>], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let plans = clouds
            .iter()
            .map(|c| SamplePlan::build(&cfg, &c.positions))
            .collect::<Result<Vec<_>>>()?;
        let radii = estimate_kernel_radii(&plans.iter().collect::<Vec<_>>())?;
        Self::new(cfg, &radii, seed)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Names of every LU with the level its features live on.
    pub fn lu_names(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            out.extend(st.lus.iter().map(|lu| (lu.name().to_string(), i + 1)));
        }
        if let Head::Segmentation { steps, .. } = &self.head {
            for step in steps {
                if let Some(lu) = &step.lu {
                    out.push((lu.name().to_string(), step.from - 1));
                }
            }
        }
        out
    }

    pub fn lus(&self) -> Vec<&LaplacianUnit> {
        let mut out: Vec<&LaplacianUnit> = self.stages.iter().flat_map(|s| s.lus.iter()).collect();
        if let Head::Segmentation { steps, .. } = &self.head {
            out.extend(steps.iter().filter_map(|s| s.lu.as_ref()));
        }
        out
    }

    pub fn plan(&self, cloud: &PointCloud<T>) -> Result<SamplePlan<T>> {
        SamplePlan::build(&self.cfg, &cloud.positions)
    }

    pub fn batch(&self, clouds: &[&PointCloud<T>]) -> Result<Batch<T>> {
        let plans = clouds.iter().map(|c| self.plan(c)).collect::<Result<Vec<_>>>()?;
        let pairs: Vec<_> = clouds.iter().copied().zip(plans.iter()).collect();
        Batch::assemble(&self.cfg, &pairs)
    }

    /// Stage outputs 1..5 for a batch.
    pub fn encode<'a>(&self, f: &Forward<'a, T>, x0: Var<'a, T>, batch: &Batch<T>) -> Result<Vec<Var<'a, T>>> {
        let mut h = self.stem_bn.forward(f, self.stem.forward(f, x0, &batch.stem)?)?.relu();
        let mut outs = Vec::with_capacity(STAGES);
        for (i, stage) in self.stages.iter().enumerate() {
            let s = i + 1;
            if s > 1 {
                let (nbr, w) = &batch.pool[s - 2];
                h = h.weighted_gather(nbr.shared(), w.clone(), nbr.k())?;
                h = self.transitions[s - 2].forward(f, h)?;
            }
            for block in &stage.blocks {
                let geom = batch.conv[s].as_ref().expect("plan has bottleneck neighborhoods");
                h = block.forward(f, h, geom)?;
            }
            for lu in &stage.lus {
                let nbr = batch.lu[s].as_ref().expect("plan has LU neighborhoods");
                h = lu.forward(f, h, nbr)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }

    /// Class scores (`clouds × C`) or per-point part scores (`points × C`).
    pub fn forward<'a>(&self, f: &Forward<'a, T>, batch: &Batch<T>) -> Result<Var<'a, T>> {
        let x0 = f.constant(batch.features.clone());
        let stages = self.encode(f, x0, batch)?;
        match &self.head {
            Head::Classification { mlp, out } => {
                let pooled = stages[STAGES - 1].scatter_mean(batch.last_groups.clone(), batch.n_clouds)?;
                out.forward(f, mlp.forward(f, pooled)?)
            }
            Head::Segmentation { steps, mlp, out } => {
                let mut h = stages[STAGES - 1];
                for step in steps {
                    let l = step.from - 1;
                    let (nbr, w) = &batch.interp[l];
                    let up = h.weighted_gather(nbr.shared(), w.clone(), nbr.k())?;
                    let skip = if l >= 1 { stages[l - 1] } else { x0 };
                    h = step.mlp.forward(f, f.tape().concat_cols(&[up, skip])?)?;
                    if let Some(lu) = &step.lu {
                        let nbr = batch.lu[l].as_ref().expect("plan has LU neighborhoods");
                        h = lu.forward(f, h, nbr)?;
                    }
                }
                if let Some(oh) = &batch.object_onehot {
                    h = f.tape().concat_cols(&[h, f.constant(oh.clone())])?;
                }
                out.forward(f, mlp.forward(f, h)?)
            }
        }
    }

    /// Evaluation-mode scores.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let f = Forward::new(&tape, &self.store, Mode::Eval);
        let scores = self.forward(&f, batch)?;
        Ok(scores.to_tensor())
    }

    /// Evaluation-mode scores plus every LU's input, local branch and output.
    pub fn probe(&self, batch: &Batch<T>) -> Result<(Tensor<T>, Vec<(String, Tensor<T>)>)> {
        let tape = Tape::new();
        let f = Forward::new(&tape, &self.store, Mode::Eval).with_taps();
        let scores = self.forward(&f, batch)?.to_tensor();
        Ok((scores, f.finish().taps))
    }

    /// Curvature magnitudes around the first LU running on `level` (0 is the input resolution).
    ///
    /// Returns the report together with the positions of that level.
    pub fn curvature(&self, cloud: &PointCloud<T>, level: usize) -> Result<(CurvatureReport<T>, Vec<Point<T>>)> {
        let name = self
            .lu_names()
            .into_iter()
            .find(|(_, l)| *l == level)
            .map(|(n, _)| n)
            .ok_or_else(|| Error::Config(format!("no Laplacian Unit runs at level {level}")))?;
        let batch = self.batch(&[cloud])?;
        let (_, taps) = self.probe(&batch)?;
        let get = |suffix: &str| {
            let key = format!("{name}.{suffix}");
            taps.iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("missing probe {key}")))
        };
        let nbr = batch.lu_neighbors(level).expect("LU level has neighborhoods");
        let report = laplace::curvature_probe(&get("in")?, &get("out")?, &get("delta")?, nbr)?;
        Ok((report, batch.levels[level].clone()))
    }

    /// Evaluation-mode stage outputs of one cloud as (points, features) pairs.
    pub fn encode_cloud(&self, cloud: &PointCloud<T>) -> Result<Vec<(PointCloud<T>, Tensor<T>)>> {
        let batch = self.batch(&[cloud])?;
        let tape = Tape::new();
        let f = Forward::new(&tape, &self.store, Mode::Eval);
        let x0 = f.constant(batch.features.clone());
        let outs = self.encode(&f, x0, &batch)?;
        outs.iter()
            .enumerate()
            .map(|(i, v)| {
                let feats = v.to_tensor();
                let pc = PointCloud::new(batch.levels[i + 1].clone(), feats.clone())?;
                Ok((pc, feats))
            })
            .collect()
    }

    /// Class scores of one cloud.
    pub fn classify(&self, cloud: &PointCloud<T>) -> Result<Tensor<T>> {
        if self.cfg.task != Task::Classification {
            return Err(Error::Config("classify needs a classification network".into()));
        }
        let s = self.predict(&self.batch(&[cloud])?)?;
        s.reshape(&[self.cfg.num_classes])
    }

    /// Per-point part scores of one cloud.
    pub fn segment(&self, cloud: &PointCloud<T>) -> Result<Tensor<T>> {
        if self.cfg.task != Task::Segmentation {
            return Err(Error::Config("segment needs a segmentation network".into()));
        }
        self.predict(&self.batch(&[cloud])?)
    }
}
