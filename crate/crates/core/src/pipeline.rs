//! Configuration and the desk-scale end-to-end pipeline:
//! synthetic scene -> voxelize -> backbone stand-ins -> anchors -> proposals ->
//! region features -> graph refinement -> NMS -> metrics.
//!
//! Proposals are ground-truth boxes perturbed by seeded uniform noise (plus a
//! few random background boxes), standing in for the first stage.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{encode_box, generate_anchors, match_anchors, nms, AnchorConfig, AnchorLabel};
use crate::gnn::{build_graph, GraphHeader, GraphUpdater, NeighborhoodGraph, UpdateMode, UpdaterShape, MAX_ITERATIONS};
use crate::interp::sample_bev_grid_with;
use crate::metrics::{interpolated_ap, precision_recall_scenes, Matcher, RecallSchedule, NUSCENES_DISTANCES};
use crate::nnet::{LossConfig, Parameters};
use crate::rfa::{auxiliary_targets, PointStacks, RfaConfig, SceneFeatures};
use crate::scene::{
    clip_to_range, generate_scene, normalize_yaw, Bounds3, Box3D, PointCloud, Scene, SyntheticSceneConfig, CAR_DIMS,
};
use crate::train::{
    box_targets, detector_loss, refiner_loss, Adam, AuxHeads, BoxTarget, DetectorModel, Refiner, RpnHead,
    TrainingBatch,
};
use crate::voxel::{voxelize, OverflowPolicy, SparseVoxelGrid, VoxelizationConfig};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub n_objects: usize,
    pub points_per_object: usize,
    pub clutter_points: usize,
    pub object_dims: [f64; 3],
    pub object_z: f64,
    pub min_separation: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let d = SyntheticSceneConfig::default();
        Self {
            n_objects: d.n_objects,
            points_per_object: d.points_per_object,
            clutter_points: d.clutter_points,
            object_dims: d.object_dims,
            object_z: d.object_z,
            min_separation: d.min_separation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelSection {
    pub step: [f64; 3],
    pub max_points_per_voxel: usize,
    pub overflow: OverflowPolicy,
}

impl Default for VoxelSection {
    fn default() -> Self {
        let k = VoxelizationConfig::kitti();
        Self {
            step: k.step,
            max_points_per_voxel: VoxelizationConfig::DEFAULT_CAPACITY,
            overflow: k.overflow,
        }
    }
}

/// Seeded perturbation of ground truth standing in for the first stage.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    /// Noisy copies per ground-truth box.
    pub per_object: usize,
    /// Half-width of the uniform BEV center noise, meters.
    pub center_noise: f64,
    pub z_noise: f64,
    /// Half-width of the uniform yaw noise, radians.
    pub yaw_noise: f64,
    /// Half-width of the uniform relative size noise.
    pub dim_noise: f64,
    /// Random boxes anywhere in range.
    pub background: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            per_object: 6,
            center_noise: 0.6,
            z_noise: 0.1,
            yaw_noise: 0.1,
            dim_noise: 0.05,
            background: 4,
        }
    }
}

impl ProposalConfig {
    /// Exact copies of the ground truth and no background boxes.
    pub fn noiseless() -> Self {
        Self {
            center_noise: 0.0,
            z_noise: 0.0,
            yaw_noise: 0.0,
            dim_noise: 0.0,
            background: 0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    Glorot,
    /// All-zero updater and header: refined boxes equal their proposals.
    Zero,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub mode: UpdateMode,
    pub iterations: usize,
    pub radius: f64,
    pub aggregation_widths: Vec<usize>,
    pub fusion_hidden: Vec<usize>,
    pub alignment_hidden: Vec<usize>,
    pub header_hidden: usize,
    pub init: InitScheme,
    /// Minimum BEV IoU with a gt for a node to count as foreground.
    pub fg_iou: f64,
    /// Training scenes drawn from seeds derived from the main seed.
    pub train_scenes: usize,
    /// Adam steps over the training scenes (0 keeps the initial weights).
    pub train_steps: usize,
    pub learning_rate: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        let s = UpdaterShape::default();
        Self {
            mode: s.mode,
            iterations: s.iterations,
            radius: crate::gnn::DEFAULT_RADIUS,
            aggregation_widths: s.aggregation_widths,
            fusion_hidden: s.fusion_hidden,
            alignment_hidden: s.alignment_hidden,
            header_hidden: 32,
            init: InitScheme::Glorot,
            fg_iou: 0.6,
            train_scenes: 64,
            train_steps: 2000,
            learning_rate: 1e-3,
        }
    }
}

impl RefinerConfig {
    pub fn shape(&self) -> UpdaterShape {
        UpdaterShape {
            mode: self.mode,
            iterations: self.iterations,
            aggregation_widths: self.aggregation_widths.clone(),
            fusion_hidden: self.fusion_hidden.clone(),
            alignment_hidden: self.alignment_hidden.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.1,
            score_threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Rotated BEV IoU for a true positive.
    pub iou_threshold: f64,
    /// Scenes pooled into the reported metrics.
    pub scenes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.7,
            scenes: 8,
        }
    }
}

/// The fixed toy batch and optimizer of the training smoke test.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmokeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub n_objects: usize,
    pub points_per_object: usize,
    pub clutter_points: usize,
    /// Negative anchors sampled next to all positives.
    pub anchor_negatives: usize,
    /// Points sampled for the auxiliary heads.
    pub points: usize,
    pub rpn_hidden: usize,
    pub aux_hidden: usize,
}

impl Default for SmokeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            n_objects: 2,
            points_per_object: 100,
            clutter_points: 100,
            anchor_negatives: 24,
            points: 64,
            rpn_hidden: 16,
            aux_hidden: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub range: Bounds3,
    pub scene: SceneSection,
    pub voxel: VoxelSection,
    pub anchors: AnchorConfig,
    pub rfa: RfaConfig,
    pub proposals: ProposalConfig,
    pub refiner: RefinerConfig,
    pub nms: NmsConfig,
    pub eval: EvalConfig,
    pub loss: LossConfig,
    pub smoke: SmokeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            range: Bounds3::KITTI,
            scene: SceneSection::default(),
            voxel: VoxelSection::default(),
            anchors: AnchorConfig::default(),
            rfa: RfaConfig::default(),
            proposals: ProposalConfig::default(),
            refiner: RefinerConfig::default(),
            nms: NmsConfig::default(),
            eval: EvalConfig::default(),
            loss: LossConfig::default(),
            smoke: SmokeConfig::default(),
        }
    }
}

fn named(section: &str, e: Error) -> Error {
    match e {
        Error::Config(m) | Error::Range(m) => Error::Config(format!("[{section}] {m}")),
        Error::Dimension { expected, actual, context } => {
            Error::Config(format!("[{section}] {context}: expected {expected}, got {actual}"))
        }
        other => other,
    }
}

fn require(ok: bool, section: &str, what: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("[{section}] {what}")))
    }
}

fn unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl PipelineConfig {
    /// Parses TOML; every key is optional and unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn scene_config(&self) -> SyntheticSceneConfig {
        SyntheticSceneConfig {
            n_objects: self.scene.n_objects,
            points_per_object: self.scene.points_per_object,
            clutter_points: self.scene.clutter_points,
            range_bounds: self.range,
            object_dims: self.scene.object_dims,
            object_z: self.scene.object_z,
            min_separation: self.scene.min_separation,
        }
    }

    pub fn voxel_config(&self) -> VoxelizationConfig {
        VoxelizationConfig {
            step: self.voxel.step,
            max_points_per_voxel: Some(self.voxel.max_points_per_voxel),
            range_bounds: self.range,
            overflow: self.voxel.overflow,
        }
    }

    /// Checks every section and the dimensions shared between modules.
    pub fn validate(&self) -> Result<()> {
        self.range.validate().map_err(|e| named("range", e))?;
        let s = &self.scene;
        require(s.object_dims.iter().all(|d| *d > 0.0 && d.is_finite()), "scene", "object_dims must be positive")?;
        require(
            self.range.min[2] <= s.object_z && s.object_z < self.range.max[2],
            "scene",
            format!("object_z {} outside the z range", s.object_z),
        )?;
        require(self.voxel.max_points_per_voxel >= 1, "voxel", "max_points_per_voxel must be at least 1")?;
        self.voxel_config().validate().map_err(|e| named("voxel", e))?;
        self.anchors.validate().map_err(|e| named("anchors", e))?;
        self.rfa.validate().map_err(|e| named("rfa", e))?;
        let p = &self.proposals;
        require(
            [p.center_noise, p.z_noise, p.yaw_noise].iter().all(|v| *v >= 0.0 && v.is_finite())
                && (0.0..1.0).contains(&p.dim_noise),
            "proposals",
            "noise levels must be finite and non-negative (dim_noise below 1)",
        )?;
        let r = &self.refiner;
        require(
            r.iterations <= MAX_ITERATIONS,
            "refiner",
            format!("iterations {} exceed {MAX_ITERATIONS}", r.iterations),
        )?;
        require(r.radius > 0.0 && r.radius.is_finite(), "refiner", "radius must be positive")?;
        require(
            !r.aggregation_widths.is_empty()
                && !r.aggregation_widths.contains(&0)
                && !r.fusion_hidden.contains(&0)
                && !r.alignment_hidden.contains(&0)
                && r.header_hidden > 0,
            "refiner",
            "layer widths must be positive and aggregation_widths non-empty",
        )?;
        require(r.fg_iou > 0.0 && r.fg_iou <= 1.0, "refiner", "fg_iou must lie in (0, 1]")?;
        require(r.learning_rate >= 0.0 && r.learning_rate.is_finite(), "refiner", "learning_rate must be >= 0")?;
        require(
            unit(self.nms.iou_threshold) && unit(self.nms.score_threshold),
            "nms",
            "thresholds must lie in [0, 1]",
        )?;
        require(
            self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0,
            "eval",
            "iou_threshold must lie in (0, 1]",
        )?;
        require(self.eval.scenes >= 1, "eval", "scenes must be at least 1")?;
        self.loss.validate().map_err(|e| named("loss", e))?;
        let m = &self.smoke;
        require(
            m.learning_rate >= 0.0 && m.learning_rate.is_finite() && m.rpn_hidden > 0 && m.aux_hidden > 0,
            "smoke",
            "learning_rate must be >= 0 and hidden widths positive",
        )?;
        Ok(())
    }
}

/// Independent sub-seed for stream `tag`, item `index`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined words.
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_TRAIN_SCENE: u64 = 1;
const TAG_PROPOSALS: u64 = 2;
const TAG_BACKBONE: u64 = 3;
const TAG_POINT_STACKS: u64 = 4;
const TAG_REFINER: u64 = 5;
const TAG_SMOKE: u64 = 6;
const TAG_EVAL_SCENE: u64 = 7;

/// Noisy copies of each gt (grouped per object, in gt order) followed by
/// random background boxes. All proposals carry class 0.
pub fn make_proposals(gts: &[Box3D], range: &Bounds3, cfg: &ProposalConfig, seed: u64) -> Result<Vec<Box3D>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = |rng: &mut ChaCha8Rng, half: f64| if half > 0.0 { rng.random_range(-half..half) } else { 0.0 };
    let mut out = Vec::with_capacity(gts.len() * cfg.per_object + cfg.background);
    for g in gts {
        for _ in 0..cfg.per_object {
            let c = [
                g.center[0] + jitter(&mut rng, cfg.center_noise),
                g.center[1] + jitter(&mut rng, cfg.center_noise),
                g.center[2] + jitter(&mut rng, cfg.z_noise),
            ];
            let d = g.dims.map(|v| v * (1.0 + jitter(&mut rng, cfg.dim_noise)));
            let yaw = g.yaw + jitter(&mut rng, cfg.yaw_noise);
            out.push(Box3D::new(c, d, yaw)?.with_class(0));
        }
    }
    for _ in 0..cfg.background {
        let c = [
            rng.random_range(range.min[0]..range.max[0]),
            rng.random_range(range.min[1]..range.max[1]),
            gts.first().map_or(-1.0, |g| g.center[2]),
        ];
        let yaw = normalize_yaw(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        out.push(Box3D::new(c, CAR_DIMS, yaw)?.with_class(0));
    }
    Ok(out)
}

/// Everything computed for one scene up to the refinement graph.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene: Scene,
    pub grid: SparseVoxelGrid,
    pub features: SceneFeatures,
    pub proposals: Vec<Box3D>,
    pub graph: NeighborhoodGraph,
}

/// Components shared by all scenes of one run (the backbone stand-ins).
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stacks: PointStacks,
    pub seed: u64,
}

impl Backbone {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_POINT_STACKS, 0));
        Ok(Self {
            stacks: PointStacks::glorot(&cfg.rfa, &mut rng)?,
            seed: derive_seed(cfg.seed, TAG_BACKBONE, 0),
        })
    }
}

pub fn prepare_scene(cfg: &PipelineConfig, scene_cfg: &SyntheticSceneConfig, seed: u64, backbone: &Backbone) -> Result<PreparedScene> {
    let scene = clip_to_range(&generate_scene(scene_cfg, seed)?);
    let proposals = make_proposals(
        &scene.gt_boxes,
        &cfg.range,
        &cfg.proposals,
        derive_seed(seed, TAG_PROPOSALS, 0),
    )?;
    let (grid, features, graph) = refinement_graph(cfg, backbone, &scene.cloud, &proposals)?;
    Ok(PreparedScene {
        scene,
        grid,
        features,
        proposals,
        graph,
    })
}

/// Voxelizes `cloud`, computes the backbone stand-ins and builds the graph
/// over the region representations of `proposals`.
pub fn refinement_graph(
    cfg: &PipelineConfig,
    backbone: &Backbone,
    cloud: &PointCloud,
    proposals: &[Box3D],
) -> Result<(SparseVoxelGrid, SceneFeatures, NeighborhoodGraph)> {
    let grid = voxelize(cloud, &cfg.voxel_config())?;
    let features = SceneFeatures::compute(cloud, &grid, &cfg.range, &cfg.rfa, &backbone.stacks, backbone.seed)?;
    let items = proposals
        .iter()
        .map(|p| Ok((*p, features.roi(p, &cfg.rfa)?.feature)))
        .collect::<Result<Vec<_>>>()?;
    let graph = build_graph(&items, cfg.refiner.radius)?;
    Ok((grid, features, graph))
}

/// Scale on the last fusion layer of a Glorot-initialized updater.
pub const FUSION_INIT_SCALE: f64 = 0.1;

/// Refiner initialized per `cfg.refiner.init`.
pub fn initial_refiner(cfg: &PipelineConfig) -> Result<Refiner> {
    let f = cfg.rfa.state_dim();
    let shape = cfg.refiner.shape();
    Ok(match cfg.refiner.init {
        InitScheme::Zero => Refiner {
            updater: GraphUpdater::zeros(&shape, f)?,
            header: GraphHeader::zeros(f, cfg.refiner.header_hidden)?,
        },
        InitScheme::Glorot => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_REFINER, 0));
            let mut updater = GraphUpdater::new(&shape, f, &mut rng)?;
            // Start close to the identity so depth does not disturb the
            // initial states; the branch still receives gradient.
            for step in &mut updater.steps {
                if let Some(last) = step.fusion.layers_mut().last_mut() {
                    last.weight.iter_mut().for_each(|w| *w *= FUSION_INIT_SCALE);
                }
            }
            Refiner {
                updater,
                header: GraphHeader::glorot(f, cfg.refiner.header_hidden, &mut rng)?,
            }
        }
    })
}

/// Trains the refiner with Adam on `train_scenes` scenes distinct from the
/// evaluation scene. Returns the model and the per-step refinement loss.
pub fn train_refiner(cfg: &PipelineConfig, backbone: &Backbone) -> Result<(Refiner, Vec<f64>)> {
    train_from(cfg, backbone, initial_refiner(cfg)?)
}

/// [`train_refiner`] starting from given weights.
pub fn train_from(cfg: &PipelineConfig, backbone: &Backbone, mut refiner: Refiner) -> Result<(Refiner, Vec<f64>)> {
    let r = &cfg.refiner;
    if r.train_steps == 0 || r.train_scenes == 0 {
        return Ok((refiner, Vec::new()));
    }
    let scene_cfg = cfg.scene_config();
    let batches = (0..r.train_scenes as u64)
        .map(|t| {
            let prep = prepare_scene(cfg, &scene_cfg, derive_seed(cfg.seed, TAG_TRAIN_SCENE, t), backbone)?;
            let targets = box_targets(&prep.proposals, &prep.scene.gt_boxes, r.fg_iou);
            Ok((prep.graph, targets))
        })
        .collect::<Result<Vec<(NeighborhoodGraph, Vec<BoxTarget>)>>>()?;
    let mut opt = Adam::new(r.learning_rate);
    let mut history = Vec::with_capacity(r.train_steps);
    for step in 0..r.train_steps {
        let (graph, targets) = &batches[step % batches.len()];
        let (loss, grads) = refiner_loss(&refiner, graph, targets, &cfg.loss)?;
        if !loss.is_finite() {
            return Err(Error::Range(format!("refinement loss diverged at step {step}")));
        }
        history.push(loss);
        // Cosine annealing to zero over the run.
        let t = step as f64 / r.train_steps as f64;
        opt.lr = r.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        opt.step(&mut refiner, &grads);
    }
    log::info!(
        "refiner trained for {} steps: loss {:.5} -> {:.5}",
        r.train_steps,
        history[0],
        history[history.len() - 1]
    );
    Ok((refiner, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub seed: u64,
    pub scenes: usize,
    pub points: usize,
    pub voxels: usize,
    pub anchors: usize,
    pub anchors_positive: usize,
    pub anchors_negative: usize,
    pub ground_truth: usize,
    pub proposals: usize,
    pub graph_edges: usize,
    pub detections: usize,
    pub ap_s11: f64,
    pub ap_s40: f64,
    pub proposal_ap_s40: f64,
    pub map_distance: f64,
    pub train_loss_first: Option<f64>,
    pub train_loss_last: Option<f64>,
}

impl PipelineReport {
    /// `key value` lines with fixed-format decimals. Counts are summed over
    /// the evaluation scenes; metrics pool all scenes into one curve.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} {v}");
        };
        line("seed", self.seed.to_string());
        line("scenes", self.scenes.to_string());
        line("points", self.points.to_string());
        line("voxels", self.voxels.to_string());
        line("anchors", self.anchors.to_string());
        line("anchors_positive", self.anchors_positive.to_string());
        line("anchors_negative", self.anchors_negative.to_string());
        line("ground_truth", self.ground_truth.to_string());
        line("proposals", self.proposals.to_string());
        line("graph_edges", self.graph_edges.to_string());
        line("detections", self.detections.to_string());
        line("ap_bev_s11", format!("{:.6}", self.ap_s11));
        line("ap_bev_s40", format!("{:.6}", self.ap_s40));
        line("proposal_ap_bev_s40", format!("{:.6}", self.proposal_ap_s40));
        line("map_center_distance", format!("{:.6}", self.map_distance));
        if let (Some(a), Some(b)) = (self.train_loss_first, self.train_loss_last) {
            line("refiner_loss_first", format!("{a:.6}"));
            line("refiner_loss_last", format!("{b:.6}"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub seed: u64,
    pub detections: Vec<Box3D>,
    pub ground_truth: Vec<Box3D>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Evaluation scenes; the first one is generated from `cfg.seed` itself.
    pub scenes: Vec<SceneResult>,
    pub report: PipelineReport,
}

/// Seeds of the evaluation scenes.
pub fn eval_seeds(cfg: &PipelineConfig) -> Vec<u64> {
    (0..cfg.eval.scenes as u64)
        .map(|i| if i == 0 { cfg.seed } else { derive_seed(cfg.seed, TAG_EVAL_SCENE, i) })
        .collect()
}

/// Runs the whole pipeline on the evaluation scenes of `cfg.seed`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let backbone = Backbone::new(cfg)?;
    let (refiner, history) = train_refiner(cfg, &backbone)?;
    run_with_refiner(cfg, &backbone, &refiner, &history)
}

/// Evaluation half of [`run_pipeline`] with a given refiner.
pub fn run_with_refiner(cfg: &PipelineConfig, backbone: &Backbone, refiner: &Refiner, history: &[f64]) -> Result<PipelineOutput> {
    let anchors = generate_anchors(&cfg.anchors, &cfg.range)?;
    let mut report = PipelineReport {
        seed: cfg.seed,
        scenes: 0,
        points: 0,
        voxels: 0,
        anchors: 0,
        anchors_positive: 0,
        anchors_negative: 0,
        ground_truth: 0,
        proposals: 0,
        graph_edges: 0,
        detections: 0,
        ap_s11: 0.0,
        ap_s40: 0.0,
        proposal_ap_s40: 0.0,
        map_distance: 0.0,
        train_loss_first: history.first().copied(),
        train_loss_last: history.last().copied(),
    };
    let mut scenes = Vec::new();
    let mut raw_pairs = Vec::new();
    for seed in eval_seeds(cfg) {
        let prep = prepare_scene(cfg, &cfg.scene_config(), seed, backbone)?;
        let gts = prep.scene.gt_boxes.clone();
        let matches = match_anchors(&anchors, &gts, &cfg.anchors)?;
        let count = |l: AnchorLabel| matches.iter().filter(|m| m.label == l).count();

        let refined = refiner.refine(&prep.graph, &prep.proposals)?;
        let detections = nms(&refined, cfg.nms.iou_threshold, cfg.nms.score_threshold)?;
        // Raw proposals (unit score) as a reference for what refinement adds.
        let raw: Vec<Box3D> = prep.proposals.iter().map(|p| p.with_score(1.0)).collect();
        raw_pairs.push((nms(&raw, cfg.nms.iou_threshold, cfg.nms.score_threshold)?, gts.clone()));

        report.scenes += 1;
        report.points += prep.scene.cloud.len();
        report.voxels += prep.grid.len();
        report.anchors += anchors.len();
        report.anchors_positive += count(AnchorLabel::Positive);
        report.anchors_negative += count(AnchorLabel::Negative);
        report.ground_truth += gts.len();
        report.proposals += prep.proposals.len();
        report.graph_edges += prep.graph.edge_count();
        report.detections += detections.len();
        scenes.push(SceneResult {
            seed,
            detections,
            ground_truth: gts,
        });
    }
    let pairs: Vec<(Vec<Box3D>, Vec<Box3D>)> =
        scenes.iter().map(|s| (s.detections.clone(), s.ground_truth.clone())).collect();
    let iou = Matcher::BevIou(cfg.eval.iou_threshold);
    let pr = precision_recall_scenes(&pairs, iou);
    report.ap_s11 = interpolated_ap(&pr, &RecallSchedule::S11);
    report.ap_s40 = interpolated_ap(&pr, &RecallSchedule::S40);
    report.proposal_ap_s40 = interpolated_ap(&precision_recall_scenes(&raw_pairs, iou), &RecallSchedule::S40);
    report.map_distance = NUSCENES_DISTANCES
        .iter()
        .map(|&d| interpolated_ap(&precision_recall_scenes(&pairs, Matcher::CenterDistance(d)), &RecallSchedule::S40))
        .sum::<f64>()
        / NUSCENES_DISTANCES.len() as f64;
    Ok(PipelineOutput { scenes, report })
}

/// The fixed toy batch of the smoke test and a freshly initialized model.
pub fn smoke_setup(cfg: &PipelineConfig) -> Result<(DetectorModel, TrainingBatch)> {
    cfg.validate()?;
    let backbone = Backbone::new(cfg)?;
    let m = &cfg.smoke;
    let scene_cfg = SyntheticSceneConfig {
        n_objects: m.n_objects,
        points_per_object: m.points_per_object,
        clutter_points: m.clutter_points,
        ..cfg.scene_config()
    };
    let seed = derive_seed(cfg.seed, TAG_SMOKE, 0);
    let prep = prepare_scene(cfg, &scene_cfg, seed, &backbone)?;
    let gts = &prep.scene.gt_boxes;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_SMOKE, 1));

    // Anchors: every positive plus a seeded sample of negatives.
    let anchors = generate_anchors(&cfg.anchors, &cfg.range)?;
    let matches = match_anchors(&anchors, gts, &cfg.anchors)?;
    let positives: Vec<usize> = (0..anchors.len()).filter(|&i| matches[i].label == AnchorLabel::Positive).collect();
    let negatives: Vec<usize> = (0..anchors.len()).filter(|&i| matches[i].label == AnchorLabel::Negative).collect();
    let picked = sample(&mut rng, negatives.len(), m.anchor_negatives.min(negatives.len()));
    let mut chosen = positives.clone();
    chosen.extend(picked.iter().map(|k| negatives[k]));
    let mut anchor_features = Vec::with_capacity(chosen.len());
    let mut anchor_targets = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        anchor_features.push(sample_bev_grid_with(
            &prep.features.bev,
            &anchors[i],
            cfg.rfa.m1,
            cfg.rfa.m2,
            cfg.rfa.bev_sampling,
        )?);
        anchor_targets.push(match (matches[i].label, matches[i].gt_index) {
            (AnchorLabel::Positive, Some(g)) => {
                let mut r = encode_box(&gts[g], &anchors[i]).0;
                r[6] = normalize_yaw(r[6]);
                BoxTarget {
                    foreground: true,
                    residual: r,
                }
            }
            _ => BoxTarget {
                foreground: false,
                residual: [0.0; 7],
            },
        });
    }

    // Points for the auxiliary heads.
    let (mask, offsets) = auxiliary_targets(&prep.scene.cloud, gts);
    let all_feats = prep.features.point_features(&prep.scene.cloud)?;
    let n = prep.scene.cloud.len();
    let mut idx: Vec<usize> = sample(&mut rng, n, m.points.min(n)).into_vec();
    idx.sort_unstable();
    let batch = TrainingBatch {
        anchor_features,
        anchor_targets,
        node_targets: box_targets(&prep.proposals, gts, cfg.refiner.fg_iou),
        graph: prep.graph,
        point_features: idx.iter().map(|&i| all_feats[i].clone()).collect(),
        point_foreground: idx.iter().map(|&i| mask[i]).collect(),
        point_offsets: idx.iter().map(|&i| offsets[i]).collect(),
    };
    let mut init_cfg = cfg.clone();
    init_cfg.refiner.init = InitScheme::Glorot;
    let model = DetectorModel {
        rpn: RpnHead::glorot(cfg.rfa.pixel_dim, m.rpn_hidden, &mut rng)?,
        refiner: initial_refiner(&init_cfg)?,
        aux: AuxHeads::glorot(cfg.rfa.voxel_dim, m.aux_hidden, &mut rng)?,
    };
    Ok((model, batch))
}

/// Plain gradient descent on the summed four-term loss over the toy batch.
/// Entry 0 is the initial loss, entry `k` the loss after `k` steps.
pub fn train_smoke(cfg: &PipelineConfig, steps: usize) -> Result<Vec<f64>> {
    let (mut model, batch) = smoke_setup(cfg)?;
    let lr = cfg.smoke.learning_rate;
    let mut history = Vec::with_capacity(steps + 1);
    let (mut parts, mut grads) = detector_loss(&model, &batch, &cfg.loss)?;
    history.push(parts.total());
    for _ in 0..steps {
        model.sgd_step(&grads, lr);
        (parts, grads) = detector_loss(&model, &batch, &cfg.loss)?;
        history.push(parts.total());
    }
    log::info!(
        "smoke training: rpn {:.4} gnn {:.4} offset {:.4} seg {:.4}",
        parts.rpn,
        parts.gnn,
        parts.offset,
        parts.seg
    );
    Ok(history)
}

/// Flat parameter dump: one value per line, full round-trip precision.
pub fn format_params(p: &impl Parameters) -> String {
    let mut s = String::new();
    for v in p.to_flat() {
        let _ = writeln!(s, "{v:?}");
    }
    s
}

pub fn parse_params(text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .enumerate()
        .map(|(i, t)| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("not a number: {t:?}"),
            })
        })
        .collect()
}
