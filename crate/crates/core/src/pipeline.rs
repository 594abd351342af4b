//! Pipeline configuration, scene directories and the end-to-end commands.
//!
//! A scene directory holds:
//!
//! | file            | content                                        |
//! |-----------------|------------------------------------------------|
//! | `scene.json`    | boxes, ground plane, grid and class count      |
//! | `rig.json`      | grid plus cameras                              |
//! | `labels.occg`   | ground-truth labels                            |
//! | `mask.occg`     | visibility (`L = 2`)                           |
//! | `depth_N.tnsr`  | depth distribution of camera `N`, `D×H×W`      |
//! | `features.tnsr` | BEV features, `C×X×Y`                          |

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{bev_flip, cutmix, CutMixConfig, FlipAxis, Provenance, SceneBundle};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::geometry::{CameraRig, DepthBins, GridSpec, SurroundRig};
use crate::head::{argmax_labels, cross_entropy, sgd_step, Parameters};
use crate::io;
use crate::model::{ConvSites, Model, ModelShape};
use crate::sampling::{global_spatial_sampling, DepthActivation, DepthDistribution, SamplingMode};
use crate::synth::{
    compute_visibility, generate_scene_with_classes, render_depth_distribution, synthetic_bev_features, RenderMode,
    SceneDoc, SyntheticScene,
};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{LabeledOccupancy, VisibilityMask, DEFAULT_CLASSES, OCC3D_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    #[default]
    Uniform,
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipConfig {
    pub axis: FlipAxis,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { steps: 200, lr: 0.5 }
    }
}

/// 16×16×8 one-meter voxels around the ego vehicle.
pub fn desk_grid() -> GridSpec {
    GridSpec::from_origin([-8.0, -8.0, -1.0], 1.0, [16, 16, 8]).expect("static grid is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    /// Camera rig file; relative paths resolve against the config file.
    pub rig: Option<PathBuf>,
    /// Rig generated when no file is given.
    pub surround: SurroundRig,
    pub channels: usize,
    pub classes: usize,
    pub depth_bins: DepthBins,
    pub depth_activation: DepthActivation,
    pub sampling: SamplingMode,
    pub render: RenderMode,
    /// Divide each interaction product by its vanished dimension.
    pub mean: bool,
    pub convs: ConvSites,
    pub cutmix: CutMixConfig,
    pub flip: Option<FlipConfig>,
    pub seed: u64,
    pub precision: Precision,
    pub n_boxes: usize,
    pub init: Init,
    /// Parameter directory written by `fit`; overrides `init`.
    pub params: Option<PathBuf>,
    pub fit: FitConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid: desk_grid(),
            rig: None,
            surround: SurroundRig::default(),
            channels: 8,
            classes: DEFAULT_CLASSES,
            depth_bins: DepthBins::default(),
            depth_activation: DepthActivation::None,
            sampling: SamplingMode::Trilinear,
            render: RenderMode::Onehot,
            mean: true,
            convs: ConvSites::default(),
            cutmix: CutMixConfig::default(),
            flip: None,
            seed: 0,
            precision: Precision::F32,
            n_boxes: 3,
            init: Init::Uniform,
            params: None,
            fit: FitConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        // an unreadable config is a configuration problem, not bad data
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.rig, &mut cfg.params].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.depth_bins.validate()?;
        self.convs.validate()?;
        self.cutmix.validate()?;
        if self.channels == 0 {
            return Err(Error::Config("channels must be at least 1".into()));
        }
        if self.classes < 3 || self.classes > 256 {
            return Err(Error::Config(format!("classes {} outside [3, 256]", self.classes)));
        }
        if let RenderMode::SigmoidLike { decay } = self.render {
            if !(decay > 0.0 && decay <= 1.0) {
                return Err(Error::Config(format!("render decay {decay} outside (0, 1]")));
            }
        }
        if let Some(f) = self.flip {
            if !(0.0..=1.0).contains(&f.probability) {
                return Err(Error::Config(format!("flip probability {} outside [0, 1]", f.probability)));
            }
        }
        for p in [&self.rig, &self.params].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn camera_rig(&self) -> Result<CameraRig> {
        match &self.rig {
            Some(path) => {
                let rig = CameraRig::load(path)?;
                if rig.grid != self.grid {
                    return Err(Error::Config(format!("{}: rig grid differs from config grid", path.display())));
                }
                Ok(rig)
            }
            None => CameraRig::surround(self.grid, &self.surround),
        }
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            dims: self.grid.dims(),
            channels: self.channels,
            classes: self.classes,
            sites: self.convs,
        }
    }

    /// Parameters from `params` if set, otherwise freshly initialized from `seed`.
    pub fn model<T: Scalar>(&self) -> Result<Model<T>> {
        let shape = self.model_shape();
        if let Some(dir) = &self.params {
            return load_params(dir, &shape);
        }
        match self.init {
            Init::Zeros => Model::zeros(&shape),
            Init::Uniform => Model::init_uniform(&shape, &mut ChaCha8Rng::seed_from_u64(self.seed)),
        }
    }
}

fn scene_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn depth_file(dir: &Path, cam: usize) -> PathBuf {
    dir.join(format!("depth_{cam}.tnsr"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io::write_bytes(path, text.as_bytes())
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Everything the pipeline reads from a scene directory.
#[derive(Debug, Clone)]
pub struct SceneData<T> {
    pub doc: SceneDoc,
    pub rig: CameraRig,
    pub labels: LabeledOccupancy,
    pub mask: VisibilityMask,
    pub depth: Vec<Tensor<T>>,
    pub features: Tensor<T>,
}

impl<T: Scalar> SceneData<T> {
    pub fn load(dir: &Path) -> Result<Self> {
        let doc: SceneDoc = read_json(&scene_file(dir, "scene.json"))?;
        let rig: CameraRig = read_json(&scene_file(dir, "rig.json"))?;
        let labels = io::read_occg(&scene_file(dir, "labels.occg"))?;
        let mask = io::read_mask(&scene_file(dir, "mask.occg"))?;
        let depth = (0..rig.cameras.len())
            .map(|c| io::read_tnsr_as(&depth_file(dir, c)))
            .collect::<Result<Vec<_>>>()?;
        let features = io::read_tnsr_as(&scene_file(dir, "features.tnsr"))?;
        let dims = rig.grid.dims();
        if doc.grid != rig.grid || labels.dims() != dims || mask.dims() != dims {
            return Err(Error::Shape(format!("{}: scene files disagree on the grid", dir.display())));
        }
        Ok(Self {
            doc,
            rig,
            labels,
            mask,
            depth,
            features,
        })
    }

    pub fn bundle(&self) -> Result<SceneBundle<T>> {
        SceneBundle::new(self.features.clone(), self.labels.clone(), self.mask.clone())
    }

    fn check_config(&self, cfg: &PipelineConfig) -> Result<()> {
        if self.rig.grid != cfg.grid {
            return Err(Error::Shape("scene grid differs from config grid".into()));
        }
        if self.labels.classes() != cfg.classes {
            return Err(Error::Shape(format!(
                "scene has {} classes, config {}",
                self.labels.classes(),
                cfg.classes
            )));
        }
        let [nx, ny, _] = cfg.grid.dims();
        if self.features.shape() != [cfg.channels, nx, ny] {
            return Err(Error::Shape(format!(
                "scene features {:?}, config expects {:?}",
                self.features.shape(),
                [cfg.channels, nx, ny]
            )));
        }
        Ok(())
    }

    /// Single-channel occupancy from the stored depth distributions.
    pub fn occupancy(&self, cfg: &PipelineConfig) -> Result<Tensor<T>> {
        let dists = self
            .depth
            .iter()
            .map(|d| DepthDistribution::from_logits(d, cfg.depth_activation, cfg.depth_bins))
            .collect::<Result<Vec<_>>>()?;
        global_spatial_sampling(&dists, &self.rig.cameras, &cfg.grid, cfg.sampling)
    }
}

/// Generates and writes a synthetic scene.
pub fn cmd_synth(cfg: &PipelineConfig, out_dir: &Path) -> Result<SyntheticScene> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => synth_impl::<f32>(cfg, out_dir),
        Precision::F64 => synth_impl::<f64>(cfg, out_dir),
    }
}

fn synth_impl<T: Scalar>(cfg: &PipelineConfig, out_dir: &Path) -> Result<SyntheticScene> {
    let scene = generate_scene_with_classes(&cfg.grid, cfg.n_boxes, cfg.seed, cfg.classes)?;
    let rig = cfg.camera_rig()?;
    let mask = compute_visibility(&scene.labels, &cfg.grid, &rig.cameras)?;
    write_json(&scene_file(out_dir, "scene.json"), &scene.doc)?;
    write_json(&scene_file(out_dir, "rig.json"), &rig)?;
    io::write_occg(&scene_file(out_dir, "labels.occg"), &scene.labels)?;
    io::write_mask(&scene_file(out_dir, "mask.occg"), &mask)?;
    for (n, cam) in rig.cameras.iter().enumerate() {
        let dist = render_depth_distribution::<T>(&scene, cam, cfg.depth_bins, cfg.render)?;
        io::write_tnsr(&depth_file(out_dir, n), dist.values())?;
    }
    let features = synthetic_bev_features::<T>(&scene.labels, cfg.channels, cfg.seed);
    io::write_tnsr(&scene_file(out_dir, "features.tnsr"), &features)?;
    Ok(scene)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub prediction: LabeledOccupancy,
    pub report: EvalReport,
}

/// GSS → extraction → interaction → fusion → head → argmax, then evaluation.
/// Writes `prediction.occg` and `report.json` into `out_dir`.
pub fn cmd_pipeline(cfg: &PipelineConfig, scene_dir: &Path, out_dir: &Path) -> Result<PipelineOutput> {
    cfg.validate()?;
    let out = match cfg.precision {
        Precision::F32 => pipeline_impl::<f32>(cfg, scene_dir),
        Precision::F64 => pipeline_impl::<f64>(cfg, scene_dir),
    }?;
    io::write_occg(&out_dir.join("prediction.occg"), &out.prediction)?;
    write_json(&out_dir.join("report.json"), &out.report.to_json()?)?;
    Ok(out)
}

fn pipeline_impl<T: Scalar>(cfg: &PipelineConfig, scene_dir: &Path) -> Result<PipelineOutput> {
    let scene = SceneData::<T>::load(scene_dir)?;
    scene.check_config(cfg)?;
    let model = cfg.model::<T>()?;
    let occ = scene.occupancy(cfg)?;
    let logits = model.forward(&occ, &scene.features, cfg.classes, cfg.mean)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite {
            what: "logits".into(),
            step: 0,
        });
    }
    let prediction = argmax_labels(&logits)?;
    let mut report = EvalReport::with_free_last(cfg.classes)?;
    report.accumulate(&prediction, &scene.labels, &scene.mask)?;
    Ok(PipelineOutput { prediction, report })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Loss before each step, then the loss after the last step.
    pub losses: Vec<f64>,
}

impl FitResult {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }
}

/// Plain gradient descent on every conv parameter against masked cross-entropy.
/// Writes `loss.json` and the fitted parameters into `out_dir`.
pub fn cmd_fit(cfg: &PipelineConfig, scene_dir: &Path, steps: usize, lr: f64, out_dir: &Path) -> Result<FitResult> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::Config("fit needs at least one step".into()));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {lr} must be finite and non-negative")));
    }
    let result = match cfg.precision {
        Precision::F32 => fit_impl::<f32>(cfg, scene_dir, steps, lr, out_dir),
        Precision::F64 => fit_impl::<f64>(cfg, scene_dir, steps, lr, out_dir),
    }?;
    write_json(&out_dir.join("loss.json"), &json!({ "lr": lr, "losses": result.losses }))?;
    Ok(result)
}

fn fit_impl<T: Scalar>(cfg: &PipelineConfig, scene_dir: &Path, steps: usize, lr: f64, out_dir: &Path) -> Result<FitResult> {
    let scene = SceneData::<T>::load(scene_dir)?;
    scene.check_config(cfg)?;
    let mut model = cfg.model::<T>()?;
    let occ = scene.occupancy(cfg)?;
    let lr = T::of_f64(lr);
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (logits, trace) = model.forward_cached(&occ, &scene.features, cfg.classes, cfg.mean)?;
        let (loss, d_logits) = cross_entropy(&logits, &scene.labels, &scene.mask).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { what, step },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                step,
            });
        }
        losses.push(loss);
        if step == steps {
            break;
        }
        let (_, grads) = model.backward(&trace, &d_logits, cfg.mean)?;
        sgd_step(&mut model, &grads, lr)?;
        if !model.is_finite() {
            return Err(Error::NonFinite {
                what: "parameters".into(),
                step,
            });
        }
    }
    save_params(out_dir, &model, &cfg.model_shape())?;
    Ok(FitResult { losses })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ParamManifest {
    dims: [usize; 3],
    channels: usize,
    classes: usize,
    sites: ConvSites,
    tensors: usize,
}

fn param_file(dir: &Path, n: usize) -> PathBuf {
    dir.join(format!("param_{n:03}.tnsr"))
}

pub fn save_params<T: Scalar>(dir: &Path, model: &Model<T>, shape: &ModelShape) -> Result<()> {
    let tensors = model.tensors();
    write_json(
        &dir.join("params.json"),
        &ParamManifest {
            dims: shape.dims,
            channels: shape.channels,
            classes: shape.classes,
            sites: shape.sites,
            tensors: tensors.len(),
        },
    )?;
    for (n, t) in tensors.into_iter().enumerate() {
        io::write_tnsr(&param_file(dir, n), t)?;
    }
    Ok(())
}

pub fn load_params<T: Scalar>(dir: &Path, shape: &ModelShape) -> Result<Model<T>> {
    let manifest: ParamManifest = read_json(&dir.join("params.json"))?;
    let mut model = Model::<T>::zeros(shape)?;
    let expected = ParamManifest {
        dims: shape.dims,
        channels: shape.channels,
        classes: shape.classes,
        sites: shape.sites,
        tensors: model.tensors().len(),
    };
    if manifest != expected {
        return Err(Error::Config(format!("{}: parameters were fitted for a different model", dir.display())));
    }
    for (n, slot) in model.tensors_mut().into_iter().enumerate() {
        let t: Tensor<T> = io::read_tnsr_as(&param_file(dir, n))?;
        if t.shape() != slot.shape() {
            return Err(Error::Shape(format!("parameter {n}: {:?} vs {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
    }
    Ok(model)
}

/// BEV-CutMix across scene directories (first is sample 0), then the
/// optional flip. Writes features, labels, mask and `provenance.json`.
pub fn cmd_augment(cfg: &PipelineConfig, scene_dirs: &[PathBuf], out_dir: &Path) -> Result<(SceneBundle<f64>, Provenance)> {
    cfg.validate()?;
    let samples = scene_dirs
        .iter()
        .map(|d| SceneData::<f64>::load(d)?.bundle())
        .collect::<Result<Vec<_>>>()?;
    let (mut mixed, prov) = cutmix(&samples, &cfg.cutmix)?;
    if let Some(flip) = cfg.flip {
        mixed = bev_flip(&mixed, flip.axis, flip.probability, cfg.cutmix.seed.wrapping_add(1))?;
    }
    match cfg.precision {
        Precision::F32 => io::write_tnsr(&out_dir.join("features.tnsr"), &mixed.features.cast::<f32>())?,
        Precision::F64 => io::write_tnsr(&out_dir.join("features.tnsr"), &mixed.features)?,
    }
    io::write_occg(&out_dir.join("labels.occg"), &mixed.labels)?;
    io::write_mask(&out_dir.join("mask.occg"), &mixed.mask)?;
    write_json(
        &out_dir.join("provenance.json"),
        &json!({
            "cut_x": prov.cut_x,
            "cut_y": prov.cut_y,
            "donors": &prov.donors[..],
            "sources": scene_dirs,
            "flipped": cfg.flip.is_some(),
        }),
    )?;
    Ok((mixed, prov))
}

/// Report for a prediction grid against ground truth under a mask.
pub fn cmd_eval(pred: &Path, truth: &Path, mask: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let pred = io::read_occg(pred)?;
    let truth = io::read_occg(truth)?;
    let mask = io::read_mask(mask)?;
    if pred.classes() != truth.classes() {
        return Err(Error::Shape(format!(
            "prediction has {} classes, truth {}",
            pred.classes(),
            truth.classes()
        )));
    }
    let mut report = EvalReport::with_free_last(truth.classes())?;
    report.accumulate(&pred, &truth, &mask)?;
    if let Some(out) = out {
        write_json(out, &report.to_json()?)?;
    }
    Ok(report)
}

/// RGB per class id; ids past the table wrap around.
pub const PALETTE: [[u8; 3]; 18] = [
    [0, 0, 0],       // others
    [255, 120, 50],  // barrier
    [255, 192, 203], // bicycle
    [255, 255, 0],   // bus
    [0, 150, 245],   // car
    [0, 255, 255],   // construction_vehicle
    [200, 180, 0],   // motorcycle
    [255, 0, 0],     // pedestrian
    [255, 240, 150], // traffic_cone
    [135, 60, 0],    // trailer
    [160, 32, 240],  // truck
    [255, 0, 255],   // driveable_surface
    [139, 137, 137], // other_flat
    [75, 0, 75],     // sidewalk
    [150, 240, 80],  // terrain
    [230, 230, 250], // manmade
    [0, 175, 0],     // vegetation
    [255, 255, 255], // free
];

const _: () = assert!(PALETTE.len() == OCC3D_CLASSES.len());

pub fn palette_color(class: u8) -> [u8; 3] {
    PALETTE[class as usize % PALETTE.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceView {
    /// One horizontal layer.
    Z(usize),
    /// Topmost non-free label of each pillar.
    Top,
}

/// Binary PPM of a BEV view: row `i` is X index `i`, column `j` is Y index `j`.
pub fn render_slice(labels: &LabeledOccupancy, view: SliceView) -> Result<Vec<u8>> {
    let [nx, ny, nz] = labels.dims();
    let free = (labels.classes() - 1) as u8;
    if let SliceView::Z(z) = view {
        if z >= nz {
            return Err(Error::Config(format!("z index {z} outside 0..{nz}")));
        }
    }
    let mut out = format!("P6\n{ny} {nx}\n255\n").into_bytes();
    for i in 0..nx {
        for j in 0..ny {
            let class = match view {
                SliceView::Z(z) => labels.get(i, j, z),
                SliceView::Top => (0..nz).rev().map(|k| labels.get(i, j, k)).find(|&l| l != free).unwrap_or(free),
            };
            out.extend_from_slice(&palette_color(class));
        }
    }
    Ok(out)
}

pub fn cmd_dump_slice(grid: &Path, view: SliceView, out: &Path) -> Result<()> {
    let labels = io::read_occg(grid)?;
    io::write_bytes(out, &render_slice(&labels, view)?)
}
