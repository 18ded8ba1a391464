//! Experiment configuration and the staged pipeline:
//! data -> segmentation -> diffusion -> reconstruction -> evaluation.
//!
//! Every random stream is derived from the config seed with [`sub_seed`], so
//! stages are reproducible one by one and in any worker layout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{NoiseSchedule, ScheduleConfig, StepSequence};
use crate::encoders::{train_diffusion, ConditionalUnetSpec, DiffTrainConfig, DiffusionModel};
use crate::error::{Error, Result};
use crate::evaluate::{
    evaluate_generation, evaluator_labels, foreground_dice_3d, image_fidelity, reconstruction_report,
    slice_dice_report, MethodVolumes,
};
use crate::io::{load_volume, save_volume, write_png_gray, write_png_rgb};
use crate::metrics::{MetricReport, Stat, ALL_LABELS};
use crate::phantom::{downsample_stack, generate_phantom, kept_indices, PhantomParams};
use crate::planes::{lax_plane_set, sample_plane, PlaneSpec};
use crate::recon::{
    decode_triples, encode_stack, reconstruct_linear, reconstruct_nn, reconstruct_volume, stack_hash,
    ReconManifest, ReconModels, ReconstructionJob,
};
use crate::segmentation::{train_segmentation, SegModel, SegSpec, SegTrainConfig};
use crate::volume::{stack_slices, Class, LabelMask, SliceStack, Volume};

/// Cache directory for generated datasets, shared between runs.
pub const CACHE_ENV: &str = "DMCVR_CACHE";

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of item `index` in the named stream:
/// `mix(mix(seed ^ fnv1a(stream)) + index)`.
pub fn sub_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix(mix(seed ^ h).wrapping_add(index))
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub grid_size: usize,
    pub n_slices_dense: usize,
    /// Keep every `factor`-th dense slice.
    pub factor: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            grid_size: 64,
            n_slices_dense: 33,
            factor: 4,
            n_train: 40,
            n_val: 4,
            n_test: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegStageConfig {
    pub spec: SegSpec,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    /// Train a second network with its own seed to score generated images;
    /// otherwise the morphology network doubles as evaluator.
    pub separate_evaluator: bool,
}

impl Default for SegStageConfig {
    fn default() -> Self {
        let t = SegTrainConfig::default();
        Self {
            spec: SegSpec::default(),
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            eval_every: t.eval_every,
            separate_evaluator: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffStageConfig {
    pub spec: ConditionalUnetSpec,
    pub schedule: ScheduleConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub log_every: usize,
}

impl Default for DiffStageConfig {
    fn default() -> Self {
        let t = DiffTrainConfig::default();
        Self {
            spec: ConditionalUnetSpec::default(),
            schedule: ScheduleConfig::default(),
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            final_lr_fraction: t.final_lr_fraction,
            log_every: t.log_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    /// Slices inserted per gap; must equal `factor - 1` so outputs align
    /// with the dense ground truth.
    pub n_insert: Option<usize>,
    pub sampling_steps: usize,
    pub keep_originals: bool,
    pub batch_size: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            n_insert: None,
            sampling_steps: 100,
            keep_originals: false,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out slices used for the encode/decode round trip.
    pub roundtrip_slices: usize,
    /// Test case shown in the montages.
    pub montage_case: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            roundtrip_slices: 50,
            montage_case: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Single worker per stage; outputs are bit-reproducible.
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub segmentation: SegStageConfig,
    #[serde(default)]
    pub diffusion: DiffStageConfig,
    #[serde(default)]
    pub reconstruction: ReconConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let bad = |m: String| Err(Error::Config(m));
        if d.factor < 2 || d.factor >= d.n_slices_dense {
            return bad(format!("factor {} must be in 2..{}", d.factor, d.n_slices_dense));
        }
        if d.n_train == 0 || d.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        if d.grid_size != self.segmentation.spec.image_size || d.grid_size != self.diffusion.spec.image_size {
            return bad(format!(
                "grid_size {} differs from model image sizes {} / {}",
                d.grid_size, self.segmentation.spec.image_size, self.diffusion.spec.image_size
            ));
        }
        if self.segmentation.spec.d_mor != self.diffusion.spec.d_mor {
            return bad("segmentation and diffusion d_mor differ".into());
        }
        if self.n_insert() + 1 != d.factor {
            return bad(format!("n_insert {} must equal factor - 1 = {}", self.n_insert(), d.factor - 1));
        }
        if self.reconstruction.sampling_steps == 0 || self.reconstruction.sampling_steps > self.diffusion.schedule.train_steps {
            return bad("sampling_steps must be in 1..=train_steps".into());
        }
        if self.evaluation.montage_case >= d.n_test {
            return bad("montage_case outside the test set".into());
        }
        self.segmentation.spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.diffusion.spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        NoiseSchedule::<f64>::from_config(&self.diffusion.schedule).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn n_insert(&self) -> usize {
        self.reconstruction.n_insert.unwrap_or(self.data.factor.saturating_sub(1))
    }

    /// SHA-256 of the canonical TOML rendering, with `out_dir` blanked so
    /// the same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex(&Sha256::digest(c.to_toml().as_bytes()))
    }

    fn data_hash(&self) -> String {
        let key = format!("{}|{}", self.seed, serde_json::to_string(&self.data).expect("serializes"));
        hex(&Sha256::digest(key.as_bytes()))[..16].to_string()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "generate-data")]
    GenerateData,
    #[serde(rename = "train-seg")]
    TrainSeg,
    #[serde(rename = "train-diffusion")]
    TrainDiffusion,
    #[serde(rename = "reconstruct")]
    Reconstruct,
    #[serde(rename = "evaluate")]
    Evaluate,
    #[serde(rename = "montage")]
    Montage,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenerateData => "generate-data",
            Stage::TrainSeg => "train-seg",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::Reconstruct => "reconstruct",
            Stage::Evaluate => "evaluate",
            Stage::Montage => "montage",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "dmcvr")]
    Dmcvr,
    /// Semantic-code-only conditioning.
    #[serde(rename = "dmcvr-noMor")]
    DmcvrNoMor,
    #[serde(rename = "nn")]
    Nn,
    #[serde(rename = "linear")]
    Linear,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dmcvr, Method::DmcvrNoMor, Method::Nn, Method::Linear];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dmcvr => "dmcvr",
            Method::DmcvrNoMor => "dmcvr-noMor",
            Method::Nn => "nn",
            Method::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    pub fn is_diffusion(self) -> bool {
        matches!(self, Method::Dmcvr | Method::DmcvrNoMor)
    }
}

/// Reference row: the evaluator applied to the real dense slices.
pub const ORIGINAL: &str = "Original";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// On-disk locations of every artifact of a run.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
    pub data: PathBuf,
}

impl Layout {
    /// Data lives under `$DMCVR_CACHE/data-<hash>` when the variable is set.
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let data = match std::env::var_os(CACHE_ENV) {
            Some(c) if !c.is_empty() => PathBuf::from(c).join(format!("data-{}", cfg.data_hash())),
            _ => cfg.out_dir.join("data"),
        };
        Self {
            root: cfg.out_dir.clone(),
            data,
        }
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.data.join("manifest.json")
    }

    pub fn case(&self, split: Split, i: usize) -> PathBuf {
        self.data.join(split.name()).join(format!("case_{i:03}.vst"))
    }

    pub fn sparse(&self, i: usize) -> PathBuf {
        self.data.join("test").join(format!("sparse_{i:03}.vst"))
    }

    pub fn planes(&self, i: usize) -> PathBuf {
        self.data.join("test").join(format!("planes_{i:03}.json"))
    }

    pub fn seg_mor(&self) -> PathBuf {
        self.root.join("models").join("seg_mor.dmc")
    }

    pub fn seg_eval(&self) -> PathBuf {
        self.root.join("models").join("seg_eval.dmc")
    }

    pub fn diffusion(&self, m: Method) -> PathBuf {
        let name = if m == Method::DmcvrNoMor { "diff_nomor.dmc" } else { "diff_dmcvr.dmc" };
        self.root.join("models").join(name)
    }

    pub fn recon(&self, m: Method, i: usize) -> PathBuf {
        self.root.join("recon").join(m.name()).join(format!("case_{i:03}.vst"))
    }

    pub fn recon_manifest(&self, m: Method, i: usize) -> PathBuf {
        self.root.join("recon").join(m.name()).join(format!("case_{i:03}.json"))
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn metrics(&self) -> PathBuf {
        self.eval().join("metrics.json")
    }

    pub fn montage(&self) -> PathBuf {
        self.root.join("montage")
    }

    pub fn run_manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
}

fn require(path: &Path, stage: Stage, producer: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::StageOrder {
            stage: stage.name().into(),
            missing: path.to_path_buf(),
            producer: producer.name().into(),
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn to_json<V: Serialize>(v: &V) -> String {
    serde_json::to_string_pretty(v).expect("serializes")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub wall_seconds: f64,
    pub outputs: Vec<PathBuf>,
}

/// Provenance of a run: config hash, code version and one record per
/// completed stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub stages: BTreeMap<String, StageRecord>,
    pub checkpoints: BTreeMap<String, String>,
    pub reports: Vec<PathBuf>,
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub data: DataConfig,
    pub seed: u64,
    /// Per-split phantom seeds.
    pub case_seeds: BTreeMap<String, Vec<u64>>,
    pub kept_indices: Vec<usize>,
}

/// A configured experiment bound to its output layout.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        Ok(Self { cfg, layout })
    }

    fn record(&self, stage: Stage, started: Instant, outputs: Vec<PathBuf>) -> Result<()> {
        let path = self.layout.run_manifest();
        let mut m: RunManifest = if path.exists() { read_json(&path)? } else { RunManifest::default() };
        if m.config_hash != self.cfg.hash() {
            m = RunManifest::default();
        }
        m.config_hash = self.cfg.hash();
        m.code_version = env!("CARGO_PKG_VERSION").to_string();
        m.seed = self.cfg.seed;
        m.data_dir = self.layout.data.clone();
        for p in &outputs {
            if p.extension().is_some_and(|e| e == "dmc") {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                m.checkpoints.insert(p.display().to_string(), hex(&Sha256::digest(&bytes)));
            }
            if p.starts_with(self.layout.eval()) && !m.reports.contains(p) {
                m.reports.push(p.clone());
            }
        }
        m.stages.insert(
            stage.name().into(),
            StageRecord {
                wall_seconds: started.elapsed().as_secs_f64(),
                outputs,
            },
        );
        m.complete = [Stage::GenerateData, Stage::TrainSeg, Stage::TrainDiffusion, Stage::Reconstruct, Stage::Evaluate]
            .iter()
            .all(|s| m.stages.contains_key(s.name()));
        write_text(&self.layout.config_copy(), &self.cfg.to_toml())?;
        write_text(&path, &to_json(&m))
    }

    fn n_cases(&self, split: Split) -> usize {
        match split {
            Split::Train => self.cfg.data.n_train,
            Split::Val => self.cfg.data.n_val,
            Split::Test => self.cfg.data.n_test,
        }
    }

    pub fn case_params(&self, split: Split, i: usize) -> PhantomParams {
        let d = &self.cfg.data;
        let seed = sub_seed(self.cfg.seed, &format!("case-{}", split.name()), i as u64);
        PhantomParams::random_case(seed, d.grid_size, d.n_slices_dense)
    }

    /// Phantoms, sparse test stacks and long-axis planes. Reuses a complete
    /// cached dataset.
    pub fn generate_data(&self) -> Result<()> {
        let t0 = Instant::now();
        let manifest_path = self.layout.data_manifest();
        if manifest_path.exists() {
            let m: DataManifest = read_json(&manifest_path)?;
            if m.data == self.cfg.data && m.seed == self.cfg.seed {
                info!("dataset present at {}", self.layout.data.display());
                return self.record(Stage::GenerateData, t0, vec![manifest_path]);
            }
        }
        let mut seeds = BTreeMap::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut list = Vec::new();
            for i in 0..self.n_cases(split) {
                let params = self.case_params(split, i);
                list.push(params.seed);
                let vol: Volume<f32> = generate_phantom(&params)?;
                save_volume(&vol, &self.layout.case(split, i))?;
                if split == Split::Test {
                    let stack = downsample_stack(&vol, self.cfg.data.factor)?;
                    save_volume(&stack_volume(&stack)?, &self.layout.sparse(i))?;
                    write_text(&self.layout.planes(i), &to_json(&lax_plane_set(&vol)?))?;
                }
            }
            seeds.insert(split.name().to_string(), list);
        }
        let m = DataManifest {
            data: self.cfg.data.clone(),
            seed: self.cfg.seed,
            case_seeds: seeds,
            kept_indices: kept_indices(self.cfg.data.n_slices_dense, self.cfg.data.factor),
        };
        write_text(&manifest_path, &to_json(&m))?;
        info!("dataset written to {}", self.layout.data.display());
        self.record(Stage::GenerateData, t0, vec![manifest_path])
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Volume<f32>>> {
        require(&self.layout.data_manifest(), Stage::TrainSeg, Stage::GenerateData)?;
        (0..self.n_cases(split)).map(|i| load_volume(&self.layout.case(split, i))).collect()
    }

    pub fn load_sparse(&self, i: usize) -> Result<SliceStack<f32>> {
        let v = load_volume::<f32>(&self.layout.sparse(i))?;
        volume_stack(&v)
    }

    pub fn load_planes(&self, i: usize) -> Result<Vec<PlaneSpec>> {
        read_json(&self.layout.planes(i))
    }

    fn seg_train_config(&self, stream: &str) -> SegTrainConfig {
        let s = &self.cfg.segmentation;
        SegTrainConfig {
            steps: s.steps,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            seed: sub_seed(self.cfg.seed, stream, 0),
            eval_every: s.eval_every,
        }
    }

    /// Stage 1: the morphology network and, optionally, a separately seeded
    /// evaluator, both on real training slices only.
    pub fn train_seg(&self) -> Result<()> {
        require(&self.layout.data_manifest(), Stage::TrainSeg, Stage::GenerateData)?;
        let t0 = Instant::now();
        let (x, y) = flatten(&self.load_split(Split::Train)?);
        let (vx, vy) = flatten(&self.load_split(Split::Val)?);
        let mut outputs = Vec::new();
        let mut jobs = vec![("seg-mor", self.layout.seg_mor())];
        if self.cfg.segmentation.separate_evaluator {
            jobs.push(("seg-eval", self.layout.seg_eval()));
        }
        for (stream, path) in jobs {
            let cfg = self.seg_train_config(stream);
            info!("training {stream} for {} steps on {} slices", cfg.steps, x.len());
            let model = train_segmentation(self.cfg.segmentation.spec.clone(), &x, &y, &vx, &vy, &cfg)?;
            model.save(&path, cfg.seed)?;
            outputs.push(path);
        }
        self.record(Stage::TrainSeg, t0, outputs)
    }

    fn evaluator_path(&self) -> PathBuf {
        if self.cfg.segmentation.separate_evaluator {
            self.layout.seg_eval()
        } else {
            self.layout.seg_mor()
        }
    }

    pub fn load_morphology(&self, stage: Stage) -> Result<SegModel<f32>> {
        require(&self.layout.seg_mor(), stage, Stage::TrainSeg)?;
        SegModel::load(&self.layout.seg_mor())
    }

    pub fn load_evaluator(&self, stage: Stage) -> Result<SegModel<f32>> {
        let p = self.evaluator_path();
        require(&p, stage, Stage::TrainSeg)?;
        SegModel::load(&p)
    }

    pub fn load_diffusion(&self, m: Method, stage: Stage) -> Result<DiffusionModel<f32>> {
        let p = self.layout.diffusion(m);
        require(&p, stage, Stage::TrainDiffusion)?;
        Ok(DiffusionModel::load(&p)?.0)
    }

    /// Stage 2: conditional noise predictor and semantic encoder, with the
    /// morphology codes of the frozen stage-1 network.
    pub fn train_diffusion(&self, variants: &[Method]) -> Result<()> {
        require(&self.layout.data_manifest(), Stage::TrainDiffusion, Stage::GenerateData)?;
        let seg = self.load_morphology(Stage::TrainDiffusion)?;
        let t0 = Instant::now();
        let (x, _) = flatten(&self.load_split(Split::Train)?);
        let mor = morphology_codes(&seg, &x)?;
        let d = &self.cfg.diffusion;
        let mut outputs = Vec::new();
        for &m in variants.iter().filter(|m| m.is_diffusion()) {
            let mut spec = d.spec.clone();
            spec.use_morphology = m == Method::Dmcvr;
            let stream = if m == Method::Dmcvr { "diffusion" } else { "diffusion-nomor" };
            let cfg = DiffTrainConfig {
                steps: d.steps,
                batch_size: d.batch_size,
                learning_rate: d.learning_rate,
                final_lr_fraction: d.final_lr_fraction,
                seed: sub_seed(self.cfg.seed, stream, 0),
                log_every: d.log_every,
            };
            info!("training {} for {} steps", m.name(), cfg.steps);
            let sched = NoiseSchedule::from_config(&d.schedule)?;
            let model = train_diffusion(spec, sched, &x, &mor, &cfg)?;
            let path = self.layout.diffusion(m);
            model.save(&path, cfg.seed, 0)?;
            outputs.push(path);
        }
        self.record(Stage::TrainDiffusion, t0, outputs)
    }

    pub fn steps(&self) -> Result<StepSequence> {
        StepSequence::uniform(self.cfg.diffusion.schedule.train_steps, self.cfg.reconstruction.sampling_steps)
    }

    /// Reconstructs every test case with `method`. All label fields come
    /// from the evaluator segmenting each output slice.
    pub fn reconstruct(&self, method: Method) -> Result<()> {
        require(&self.layout.data_manifest(), Stage::Reconstruct, Stage::GenerateData)?;
        let evaluator = self.load_evaluator(Stage::Reconstruct)?;
        let diffusion = if method.is_diffusion() {
            Some(self.load_diffusion(method, Stage::Reconstruct)?)
        } else {
            None
        };
        let morphology = if method == Method::Dmcvr {
            Some(self.load_morphology(Stage::Reconstruct)?)
        } else {
            None
        };
        let t0 = Instant::now();
        let factor = self.cfg.data.factor;
        let mut outputs = Vec::new();
        for i in 0..self.cfg.data.n_test {
            let stack = self.load_sparse(i)?;
            let (vol, manifest) = match &diffusion {
                Some(diff) => {
                    let models = ReconModels {
                        diffusion: diff,
                        morphology: morphology.as_ref(),
                        evaluator: &evaluator,
                    };
                    let mut job = ReconstructionJob::new(&stack, self.cfg.n_insert(), self.steps()?, models);
                    job.keep_originals = self.cfg.reconstruction.keep_originals;
                    job.batch_size = self.cfg.reconstruction.batch_size;
                    reconstruct_volume(&job)?
                }
                None => {
                    let mut vol = match method {
                        Method::Nn => reconstruct_nn(&stack, factor)?,
                        _ => reconstruct_linear(&stack, factor)?,
                    };
                    vol.labels = Some(evaluator_labels(&vol, &evaluator)?);
                    let manifest = ReconManifest {
                        method: method.name().into(),
                        input_sha256: stack_hash(&stack),
                        n_insert: factor - 1,
                        steps: Vec::new(),
                        keep_originals: true,
                        diffusion_checksum: None,
                        morphology_checksum: None,
                        evaluator_checksum: Some(evaluator.store.checksum()),
                        positions: crate::recon::output_positions(&stack.positions, factor),
                    };
                    (vol, manifest)
                }
            };
            let path = self.layout.recon(method, i);
            save_volume(&vol, &path)?;
            write_text(&self.layout.recon_manifest(method, i), &to_json(&manifest))?;
            info!("{} case {i}: {} slices", method.name(), vol.n_slices());
            outputs.push(path);
        }
        self.record(Stage::Reconstruct, t0, outputs)
    }

    pub fn load_recon(&self, method: Method, stage: Stage) -> Result<Vec<Volume<f32>>> {
        (0..self.cfg.data.n_test)
            .map(|i| {
                let p = self.layout.recon(method, i);
                require(&p, stage, Stage::Reconstruct)?;
                load_volume(&p)
            })
            .collect()
    }

    /// Dense ground truth restricted to the span the sparse stack covers.
    pub fn load_truth(&self) -> Result<Vec<Volume<f32>>> {
        let kept = kept_indices(self.cfg.data.n_slices_dense, self.cfg.data.factor);
        Ok(self
            .load_split(Split::Test)?
            .iter()
            .map(|v| v.slab(kept[0], kept[kept.len() - 1] + 1))
            .collect())
    }

    /// Writes the generation table, the slice-level table, the
    /// reconstruction table, the round-trip fidelity and the segmentation
    /// competence into `eval/`, plus a combined `metrics.json`.
    pub fn evaluate(&self) -> Result<EvaluationSummary> {
        require(&self.layout.data_manifest(), Stage::Evaluate, Stage::GenerateData)?;
        let recon: Vec<(Method, Vec<Volume<f32>>)> = Method::ALL
            .iter()
            .map(|&m| Ok((m, self.load_recon(m, Stage::Evaluate)?)))
            .collect::<Result<_>>()?;
        let evaluator = self.load_evaluator(Stage::Evaluate)?;
        let morphology = self.load_morphology(Stage::Evaluate)?;
        let diffusion = self.load_diffusion(Method::Dmcvr, Stage::Evaluate)?;
        let t0 = Instant::now();
        let truth = self.load_truth()?;
        let mut methods = vec![MethodVolumes {
            name: ORIGINAL,
            volumes: &truth,
        }];
        methods.extend(recon.iter().map(|(m, v)| MethodVolumes {
            name: m.name(),
            volumes: v,
        }));
        let generation = evaluate_generation(&truth, &methods, &evaluator)?;
        let slices = slice_dice_report(&truth, &methods, &evaluator)?;
        let reconstruction = reconstruction_report(&truth, &methods[1..])?;

        let full_truth = self.load_split(Split::Test)?;
        let mut seg_dice = Vec::new();
        for v in &full_truth {
            let pred = evaluator_labels(v, &evaluator)?;
            seg_dice.push(foreground_dice_3d(&pred, v.labels.as_ref().expect("phantoms are labelled"))?);
        }
        let mut mor_dice = Vec::new();
        for v in &full_truth {
            let pred = evaluator_labels(v, &morphology)?;
            mor_dice.push(foreground_dice_3d(&pred, v.labels.as_ref().expect("phantoms are labelled"))?);
        }

        let originals = roundtrip_slices(&full_truth, self.cfg.evaluation.roundtrip_slices);
        let rebuilt = roundtrip(&originals, &diffusion, &morphology, &self.steps()?, self.cfg.reconstruction.batch_size)?;
        let (psnr, ssim) = image_fidelity(&originals, &rebuilt)?;

        let summary = EvaluationSummary {
            config_hash: self.cfg.hash(),
            segmentation: BTreeMap::from([
                ("evaluator".to_string(), Stat::from_values(&seg_dice, 0)),
                ("morphology".to_string(), Stat::from_values(&mor_dice, 0)),
            ]),
            roundtrip_psnr: psnr,
            roundtrip_ssim: ssim,
            generation,
            slices,
            reconstruction,
        };
        let dir = self.layout.eval();
        let mut outputs = Vec::new();
        for (name, report) in [
            ("generation", &summary.generation),
            ("slices", &summary.slices),
            ("reconstruction", &summary.reconstruction),
        ] {
            for (ext, text) in [("json", report.to_json()), ("csv", report.to_csv()), ("md", report.to_markdown())] {
                let p = dir.join(format!("{name}.{ext}"));
                write_text(&p, &text)?;
                outputs.push(p);
            }
        }
        write_text(&self.layout.metrics(), &summary.to_json())?;
        outputs.push(self.layout.metrics());
        write_text(&dir.join("summary.md"), &summary.to_markdown())?;
        outputs.push(dir.join("summary.md"));
        self.record(Stage::Evaluate, t0, outputs)?;
        Ok(summary)
    }

    /// PNG grids for the montage case: one row per method over one gap of
    /// slices, label overlays, and long-axis plane cross-sections.
    pub fn montage(&self) -> Result<()> {
        let t0 = Instant::now();
        let case = self.cfg.evaluation.montage_case;
        let truth = self.load_truth()?.swap_remove(case);
        let mut rows: Vec<(String, Volume<f32>)> = vec![(ORIGINAL.to_string(), truth)];
        for m in Method::ALL {
            let p = self.layout.recon(m, case);
            require(&p, Stage::Montage, Stage::Reconstruct)?;
            rows.push((m.name().to_string(), load_volume(&p)?));
        }
        let factor = self.cfg.data.factor;
        let n = rows[0].1.n_slices();
        let gap = ((n - 1) / factor / 2) * factor;
        let cols: Vec<usize> = (gap..=gap + factor).collect();
        let mut outputs = Vec::new();

        let images: Vec<Vec<Array2<f32>>> = rows
            .iter()
            .map(|(_, v)| cols.iter().map(|&k| v.slice(k).to_owned()).collect())
            .collect();
        let p = self.layout.montage().join("slices.png");
        write_png_gray(&p, tile(&images).view())?;
        outputs.push(p);

        let overlays: Vec<Vec<ndarray::Array3<u8>>> = rows
            .iter()
            .map(|(_, v)| {
                cols.iter()
                    .map(|&k| overlay(v.slice(k).to_owned(), &v.label_slice(k).expect("labelled")))
                    .collect()
            })
            .collect();
        let p = self.layout.montage().join("labels.png");
        write_png_rgb(&p, &tile_rgb(&overlays))?;
        outputs.push(p);

        let planes = lax_plane_set(&rows[0].1)?;
        let sections: Vec<Vec<ndarray::Array3<u8>>> = rows
            .iter()
            .map(|(_, v)| {
                planes
                    .iter()
                    .map(|p| {
                        let (img, lab) = sample_plane(v, p);
                        overlay(img, &lab)
                    })
                    .collect()
            })
            .collect();
        let p = self.layout.montage().join("planes.png");
        write_png_rgb(&p, &tile_rgb(&sections))?;
        outputs.push(p);
        let legend: Vec<String> = rows.iter().map(|(n, _)| n.clone()).collect();
        let p = self.layout.montage().join("rows.txt");
        write_text(&p, &(legend.join("\n") + "\n"))?;
        outputs.push(p);
        self.record(Stage::Montage, t0, outputs)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<EvaluationSummary> {
        self.generate_data()?;
        self.train_seg()?;
        self.train_diffusion(&[Method::Dmcvr, Method::DmcvrNoMor])?;
        for m in Method::ALL {
            self.reconstruct(m)?;
        }
        let summary = self.evaluate()?;
        self.montage()?;
        Ok(summary)
    }
}

impl Layout {
    pub fn config_copy(&self) -> PathBuf {
        self.root.join("config.toml")
    }
}

/// Everything `evaluate` measures. Wall times are kept out so that repeated
/// runs serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub config_hash: String,
    /// Held-out 3D foreground DICE of the segmentation networks.
    pub segmentation: BTreeMap<String, Stat>,
    pub roundtrip_psnr: Stat,
    pub roundtrip_ssim: Stat,
    /// Per-class metrics of the evaluator on each method's images.
    pub generation: MetricReport,
    /// Per-slice foreground DICE of the evaluator on each method's images.
    pub slices: MetricReport,
    /// 3D and long-axis plane DICE of each method's label field.
    pub reconstruction: MetricReport,
}

impl EvaluationSummary {
    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("## Segmentation on generated images\n\n");
        out.push_str(&self.generation.to_markdown());
        out.push_str("\n## Per-slice foreground DICE\n\n");
        out.push_str(&self.slices.to_markdown());
        out.push_str("\n## Reconstruction DICE (3D and long-axis planes)\n\n");
        out.push_str(&self.reconstruction.to_markdown());
        out.push_str(&format!(
            "\n## Round trip\n\nPSNR {:.3} ± {:.3} dB, SSIM {:.4} ± {:.4} over {} slices.\n",
            self.roundtrip_psnr.mean, self.roundtrip_psnr.std, self.roundtrip_ssim.mean, self.roundtrip_ssim.std, self.roundtrip_psnr.n
        ));
        for (k, s) in &self.segmentation {
            out.push_str(&format!("\nHeld-out {k} foreground DICE {:.4} ± {:.4}.\n", s.mean, s.std));
        }
        out
    }

    /// Mean of a method's 3D reconstruction DICE.
    pub fn reconstruction_dice(&self, m: &str) -> Option<f64> {
        self.reconstruction.get(m, "3D", "DICE").map(|s| s.mean)
    }

    pub fn slice_dice(&self, m: &str) -> Option<f64> {
        self.slices.get(m, ALL_LABELS, "DICE").map(|s| s.mean)
    }
}

/// Dense slices and labels of all volumes, in order.
pub fn flatten(vols: &[Volume<f32>]) -> (Vec<Array2<f32>>, Vec<LabelMask>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for v in vols {
        for i in 0..v.n_slices() {
            x.push(v.slice(i).to_owned());
            y.push(v.label_slice(i).unwrap_or_else(|| LabelMask::background(v.slice_dim().0, v.slice_dim().1)));
        }
    }
    (x, y)
}

/// Morphology codes of `images`, one row each.
pub fn morphology_codes(seg: &SegModel<f32>, images: &[Array2<f32>]) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((images.len(), seg.spec.d_mor));
    for (k, chunk) in images.chunks(32).enumerate() {
        let codes = seg.encode_morphology_batch(stack_slices(chunk).view())?;
        out.slice_mut(s![32 * k..32 * k + chunk.len(), ..]).assign(&codes);
    }
    Ok(out)
}

/// `count` slices spread evenly over all test slices.
pub fn roundtrip_slices(vols: &[Volume<f32>], count: usize) -> Vec<Array2<f32>> {
    let (all, _) = flatten(vols);
    let count = count.min(all.len());
    (0..count).map(|k| all[k * all.len() / count].clone()).collect()
}

/// `sample(invert(x0))` of each image under its own codes.
pub fn roundtrip(
    images: &[Array2<f32>],
    diffusion: &DiffusionModel<f32>,
    morphology: &SegModel<f32>,
    steps: &StepSequence,
    batch_size: usize,
) -> Result<Vec<Array2<f32>>> {
    let positions = (0..images.len()).map(|i| i as f64).collect();
    let stack = SliceStack::new(images.to_vec(), None, positions, [1.0, 1.0])?;
    let models = ReconModels {
        diffusion,
        morphology: diffusion.spec.use_morphology.then_some(morphology),
        evaluator: morphology,
    };
    let triples = encode_stack(&stack, &models, steps, 1, batch_size)?;
    decode_triples(&triples, diffusion, steps, batch_size)
}

/// Sparse stack stored as a volume with the acquisition spacing.
fn stack_volume(stack: &SliceStack<f32>) -> Result<Volume<f32>> {
    let data = stack_slices(&stack.slices);
    let labels = stack.labels.as_ref().map(|l| crate::recon::stack_labels(l));
    let n = stack.len();
    let dz = (stack.positions[n - 1] - stack.positions[0]) / (n - 1) as f64;
    let mut v = Volume::new(data, labels, [stack.pixel_spacing[0], stack.pixel_spacing[1], dz])?;
    v.origin = stack.positions[0];
    Ok(v)
}

fn volume_stack(v: &Volume<f32>) -> Result<SliceStack<f32>> {
    let slices = (0..v.n_slices()).map(|i| v.slice(i).to_owned()).collect();
    let labels = v
        .labels
        .as_ref()
        .map(|_| (0..v.n_slices()).map(|i| v.label_slice(i).expect("labelled")).collect());
    let positions = (0..v.n_slices()).map(|i| v.position(i)).collect();
    SliceStack::new(slices, labels, positions, [v.spacing[0], v.spacing[1]])
}

fn tile(grid: &[Vec<Array2<f32>>]) -> Array2<f32> {
    let (h, w) = grid[0][0].dim();
    let cols = grid.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Array2::from_elem((grid.len() * (h + 1), cols * (w + 1)), -1.0f32);
    for (r, row) in grid.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            out.slice_mut(s![r * (h + 1)..r * (h + 1) + h, c * (w + 1)..c * (w + 1) + w]).assign(img);
        }
    }
    out
}

fn tile_rgb(grid: &[Vec<ndarray::Array3<u8>>]) -> ndarray::Array3<u8> {
    let (h, w, _) = grid[0][0].dim();
    let cols = grid.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = ndarray::Array3::zeros((grid.len() * (h + 1), cols * (w + 1), 3));
    for (r, row) in grid.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            out.slice_mut(s![r * (h + 1)..r * (h + 1) + h, c * (w + 1)..c * (w + 1) + w, ..]).assign(img);
        }
    }
    out
}

/// Grey image with class colours blended at 40%.
fn overlay(img: Array2<f32>, labels: &LabelMask) -> ndarray::Array3<u8> {
    let (h, w) = img.dim();
    let grey = crate::io::to_gray_u8(img.view(), -1.0, 1.0);
    let mut out = ndarray::Array3::zeros((h, w, 3));
    for ((i, j), &l) in labels.as_array().indexed_iter() {
        let g = grey[[i, j]] as f64;
        let class = Class::from_u8(l).unwrap_or(Class::Background);
        for ch in 0..3 {
            out[[i, j, ch]] = if class == Class::Background {
                g as u8
            } else {
                (0.6 * g + 0.4 * class.color()[ch] as f64).round() as u8
            };
        }
    }
    out
}
