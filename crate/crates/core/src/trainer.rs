//! Two-phase adversarial training loop, critic cadence, optimization,
//! checkpointing and per-variant runs.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uagan_autograd::{grad, no_grad, Adam, AdamState, ParamRef, Shape, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::error::{IoContext, Result, UaganError};
use crate::losses::{
    self, compose_generator_loss, cycle_loss, discriminator_terms, generator_adversarial_terms, seg_cross_entropy,
    shape_consistency_loss, GeneratorTerms, LossReport, LossWeights, LrSchedule,
};
use crate::networks::{AuxTask, Discriminator, Generator, Preset, UNetConfig, VariantSpec};
use crate::phantom::{self, modality_name, Dataset, SliceSample};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const LOSS_LOG: &str = "logs/train.jsonl";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Preset,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub train_data: PathBuf,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub augment: bool,
    pub beta1: f32,
    pub beta2: f32,
    /// Draw new target labels (and fakes) for every critic update instead of once per step.
    pub resample_critic_targets: bool,
    pub weights: LossWeights,
    pub lr: LrSchedule,
    pub network: UNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Preset::Uagan,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            deterministic: false,
            train_data: PathBuf::from("data/train"),
            checkpoint_every: 5,
            augment: true,
            beta1: 0.5,
            beta2: 0.999,
            resample_critic_targets: false,
            weights: LossWeights::default(),
            lr: LrSchedule::default(),
            network: UNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(UaganError::Config("batch_size and epochs must be ≥ 1".into()));
        }
        if self.epochs > self.lr.total {
            return Err(UaganError::Config(format!(
                "{} epochs exceed the learning-rate schedule length {}",
                self.epochs, self.lr.total
            )));
        }
        self.weights.validate()?;
        if !self.train_data.join(phantom::MANIFEST_FILE).is_file() {
            return Err(UaganError::Config(format!("no dataset manifest under {}", self.train_data.display())));
        }
        Ok(())
    }

    pub fn variant_spec(&self) -> VariantSpec {
        VariantSpec::preset(self.variant)
    }
}

/// One mini-batch in tensor form.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub mask: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&SliceSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| UaganError::Argument("empty batch".into()))?;
        let (h, w) = (first.image.h, first.image.w);
        let mut x = Vec::with_capacity(samples.len() * h * w);
        let mut mask = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if (s.image.h, s.image.w) != (h, w) {
                return Err(UaganError::Shape("batch slices differ in size".into()));
            }
            x.extend_from_slice(&s.image.data);
            mask.extend(s.mask.data.iter().map(|&m| m as f32));
        }
        let shape = Shape::new(samples.len(), 1, h, w);
        Ok(Batch {
            x: Tensor::from_vec(shape, x)?,
            mask: Tensor::from_vec(shape, mask)?,
            labels: samples.iter().map(|s| s.modality.index()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A generator with its critic (adversarial variants only) and optimizers.
pub struct Model {
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    /// Set for per-modality models.
    pub modality: Option<usize>,
    g_params: Vec<ParamRef>,
    d_params: Vec<ParamRef>,
    opt_g: Adam,
    opt_d: Option<Adam>,
}

impl Model {
    pub fn new(cfg: &TrainConfig, modality: Option<usize>) -> Result<Self> {
        let variant = cfg.variant_spec();
        let seed = derive(cfg.seed, 1 + modality.map_or(0, |m| m as u64 + 1));
        let generator = Generator::new(&cfg.network, &variant, seed)?;
        let discriminator = variant.has_discriminator().then(|| Discriminator::new(&cfg.network, derive(seed, 2)));
        let g_params = generator.params();
        let d_params = discriminator.as_ref().map(Discriminator::params).unwrap_or_default();
        let opt_g = Adam::new(&g_params, cfg.beta1, cfg.beta2);
        let opt_d = discriminator.as_ref().map(|_| Adam::new(&d_params, cfg.beta1, cfg.beta2));
        Ok(Model { generator, discriminator, modality, g_params, d_params, opt_g, opt_d })
    }

    pub fn g_steps(&self) -> u64 {
        self.opt_g.steps()
    }

    pub fn d_steps(&self) -> u64 {
        self.opt_d.as_ref().map_or(0, Adam::steps)
    }

    pub fn tag(&self) -> Option<String> {
        self.modality.map(modality_name)
    }

    /// Segmentation logits for inference, conditioned on each slice's own modality.
    pub fn segment(&self, x: &Tensor, source: &[usize]) -> Result<Tensor> {
        let _guard = no_grad();
        Ok(self.generator.segment(&Var::constant(x.clone()), source)?.value().clone())
    }
}

/// Mutable training progress besides the model weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run (0-based).
    pub epoch: usize,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState { epoch: 0, global_step: 0, rng: ChaCha8Rng::seed_from_u64(derive(seed, 0x5EED)) }
    }
}

fn derive(seed: u64, salt: u64) -> u64 {
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Graph outputs of the forward phase.
pub struct ForwardPhase {
    /// `x′`; the reconstruction of `x` when the auxiliary task is reconstruction.
    pub fakes: Option<Var>,
    pub seg_logits: Var,
    pub targets: Vec<usize>,
    pub l_seg: Var,
    pub g_adv: Option<Var>,
    pub g_cls: Option<Var>,
    /// Reconstruction loss when translation is replaced by reconstruction.
    pub g_rec: Option<Var>,
}

/// Graph outputs of the backward phase.
pub struct BackwardPhase {
    pub recovered: Var,
    pub g_rec: Var,
    pub l_shape: Var,
}

/// Uniform target labels over all `m` modalities, the source included.
pub fn sample_targets(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..m)).collect()
}

/// Translates `x` to `targets` and segments `x`. The adversarial terms are left
/// to [`adversarial_phase`].
pub fn forward_phase(model: &Model, batch: &Batch, targets: Vec<usize>) -> Result<ForwardPhase> {
    let g = &model.generator;
    let x = Var::constant(batch.x.clone());
    match g.variant().aux_task {
        AuxTask::None => {
            let seg_logits = g.segment(&x, &batch.labels)?;
            let l_seg = seg_cross_entropy(&seg_logits, &batch.mask)?;
            Ok(ForwardPhase { fakes: None, seg_logits, targets, l_seg, g_adv: None, g_cls: None, g_rec: None })
        }
        AuxTask::Reconstruction => {
            let out = g.forward(&x, &batch.labels)?;
            let recon = out.translated.expect("reconstruction variant has a translation stream");
            let l_seg = seg_cross_entropy(&out.seg_logits, &batch.mask)?;
            let g_rec = cycle_loss(&recon, &x)?;
            Ok(ForwardPhase {
                fakes: Some(recon),
                seg_logits: out.seg_logits,
                targets: batch.labels.clone(),
                l_seg,
                g_adv: None,
                g_cls: None,
                g_rec: Some(g_rec),
            })
        }
        AuxTask::Translation => {
            let out = g.forward(&x, &targets)?;
            let fakes = out.translated.expect("translation variant has a translation stream");
            let l_seg = seg_cross_entropy(&out.seg_logits, &batch.mask)?;
            Ok(ForwardPhase {
                fakes: Some(fakes),
                seg_logits: out.seg_logits,
                targets,
                l_seg,
                g_adv: None,
                g_cls: None,
                g_rec: None,
            })
        }
    }
}

/// Scores the forward-phase fakes with the critic, when the model has one.
pub fn adversarial_phase(model: &Model, fwd: &mut ForwardPhase) -> Result<()> {
    if let (Some(d), Some(fakes)) = (&model.discriminator, &fwd.fakes) {
        let (a, c) = generator_adversarial_terms(|v| d.discriminate(v), fakes, &fwd.targets)?;
        fwd.g_adv = Some(a);
        fwd.g_cls = Some(c);
    }
    Ok(())
}

/// Recovers `x` from `x′` with the source labels and checks the segmentation of `x′`
/// against the source annotation. Gradients reach both streams through `x′`.
pub fn backward_phase(model: &Model, fakes: &Var, batch: &Batch) -> Result<BackwardPhase> {
    let out = model.generator.forward(fakes, &batch.labels)?;
    let recovered = out.translated.ok_or_else(|| UaganError::Config("variant has no translation stream".into()))?;
    let g_rec = cycle_loss(&recovered, &Var::constant(batch.x.clone()))?;
    let l_shape = shape_consistency_loss(&out.seg_logits, &batch.mask)?;
    Ok(BackwardPhase { recovered, g_rec, l_shape })
}

fn checked(term: &str, v: &Var, epoch: usize, step: u64) -> Result<f64> {
    let x = v.item() as f64;
    losses::check_finite(term, x, epoch, step)?;
    Ok(x)
}

/// `n_critic` critic updates followed by one generator update.
pub fn train_step(model: &mut Model, batch: &Batch, state: &mut TrainState, cfg: &TrainConfig) -> Result<LossReport> {
    let epoch = state.epoch;
    let step = state.global_step;
    let lr = cfg.lr.at(epoch)? as f32;
    let m = cfg.network.modalities;
    let w = &cfg.weights;
    let mut report = LossReport { epoch, step, ..Default::default() };
    let targets = sample_targets(batch.len(), m, &mut state.rng);
    // The generator is frozen during critic updates, so its forward pass also
    // supplies the critic's fakes unless targets are resampled.
    let mut fwd = forward_phase(model, batch, targets)?;

    if let (Some(d), Some(opt_d)) = (&model.discriminator, model.opt_d.as_mut()) {
        let translate = |t: &[usize]| -> Result<Tensor> {
            let _guard = no_grad();
            Ok(model.generator.translate(&Var::constant(batch.x.clone()), t)?.value().clone())
        };
        let mut fakes = match &fwd.fakes {
            Some(f) => f.value().clone(),
            None => translate(&fwd.targets)?,
        };
        let mut sums = [0.0f64; 4];
        for k in 0..w.n_critic {
            if cfg.resample_critic_targets && k > 0 {
                let t = sample_targets(batch.len(), m, &mut state.rng);
                fakes = translate(&t)?;
            }
            let alpha: Vec<f32> = (0..batch.len()).map(|_| state.rng.gen::<f32>()).collect();
            let terms = discriminator_terms(|v| d.discriminate(v), &batch.x, &fakes, &batch.labels, &alpha)?;
            let total = terms.total(w)?;
            let vals = [
                checked("d_adv", &terms.d_adv, epoch, step)?,
                checked("d_cls", &terms.d_cls, epoch, step)?,
                checked("d_gp", &terms.d_gp, epoch, step)?,
                checked("total_D", &total, epoch, step)?,
            ];
            sums.iter_mut().zip(vals).for_each(|(s, v)| *s += v);
            let vars: Vec<Var> = model.d_params.iter().map(|p| p.var()).collect();
            let grads = grad(&total, &vars, false)?;
            opt_d.step(&model.d_params, &grads, lr)?;
        }
        let k = w.n_critic as f64;
        report.d_adv = sums[0] / k;
        report.d_cls = sums[1] / k;
        report.d_gp = sums[2] / k;
        report.total_d = sums[3] / k;
    }

    adversarial_phase(model, &mut fwd)?;
    let zero = Var::scalar(0.0);
    let mut terms = GeneratorTerms {
        g_adv: fwd.g_adv.clone().unwrap_or_else(|| zero.clone()),
        g_cls: fwd.g_cls.clone().unwrap_or_else(|| zero.clone()),
        g_rec: fwd.g_rec.clone().unwrap_or_else(|| zero.clone()),
        l_seg: fwd.l_seg.clone(),
        l_shape: zero.clone(),
    };
    if model.generator.variant().aux_task == AuxTask::Translation {
        let fakes = fwd.fakes.as_ref().expect("translation produces fakes");
        let bwd = backward_phase(model, fakes, batch)?;
        terms.g_rec = bwd.g_rec;
        terms.l_shape = bwd.l_shape;
    }
    report.g_adv = checked("g_adv", &terms.g_adv, epoch, step)?;
    report.g_cls = checked("g_cls", &terms.g_cls, epoch, step)?;
    report.g_rec = checked("g_rec", &terms.g_rec, epoch, step)?;
    report.l_seg = checked("l_seg", &terms.l_seg, epoch, step)?;
    report.l_shape = checked("l_shape", &terms.l_shape, epoch, step)?;
    let total = compose_generator_loss(&terms, w, epoch)?;
    checked("total_G", &total, epoch, step)?;
    report.total_g = losses::total_generator_loss(&report.generator_terms(), w, epoch)?;
    let vars: Vec<Var> = model.g_params.iter().map(|p| p.var()).collect();
    let grads = grad(&total, &vars, false)?;
    model.opt_g.step(&model.g_params, &grads, lr)?;
    state.global_step += 1;
    Ok(report)
}

/// One log line: the step report plus the model it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(flatten)]
    pub report: LossReport,
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LogLine>> {
    let file = fs::File::open(path).at(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| UaganError::Json { path: path.into(), source })?);
    }
    Ok(out)
}

/// Per-epoch means of each loss term for one model.
pub fn epoch_means(lines: &[LogLine], model: Option<&str>) -> Vec<(usize, LossReport)> {
    let mut out: Vec<(usize, LossReport, usize)> = Vec::new();
    for l in lines.iter().filter(|l| l.model.as_deref() == model) {
        let r = &l.report;
        if out.last().is_none_or(|(e, _, _)| *e != r.epoch) {
            out.push((r.epoch, LossReport { epoch: r.epoch, ..Default::default() }, 0));
        }
        let (_, acc, n) = out.last_mut().expect("pushed above");
        for (dst, src) in [
            (&mut acc.d_adv, r.d_adv),
            (&mut acc.d_cls, r.d_cls),
            (&mut acc.d_gp, r.d_gp),
            (&mut acc.g_adv, r.g_adv),
            (&mut acc.g_cls, r.g_cls),
            (&mut acc.g_rec, r.g_rec),
            (&mut acc.l_seg, r.l_seg),
            (&mut acc.l_shape, r.l_shape),
            (&mut acc.total_g, r.total_g),
            (&mut acc.total_d, r.total_d),
        ] {
            *dst += src;
        }
        *n += 1;
    }
    out.into_iter()
        .map(|(e, mut r, n)| {
            let k = n as f64;
            for v in [
                &mut r.d_adv,
                &mut r.d_cls,
                &mut r.d_gp,
                &mut r.g_adv,
                &mut r.g_cls,
                &mut r.g_rec,
                &mut r.l_seg,
                &mut r.l_shape,
                &mut r.total_g,
                &mut r.total_d,
            ] {
                *v /= k;
            }
            (e, r)
        })
        .collect()
}

/// Written once per run; holds everything needed to re-execute it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub variant: String,
    pub aux_task: AuxTask,
    pub attention_enabled: bool,
    pub fusion_enabled: bool,
    pub bottleneck_shared: bool,
    /// `"x"` for reconstruction, `"translated"` otherwise.
    pub reconstruction_target: Option<String>,
    pub backward_phase: String,
    pub discriminator: bool,
    pub models: Vec<String>,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn for_config(cfg: &TrainConfig, modalities: usize) -> Self {
        let v = cfg.variant_spec();
        let models = if v.per_modality() { (0..modalities).map(modality_name).collect() } else { vec!["all".into()] };
        RunManifest {
            command: "train".into(),
            code_version: CODE_VERSION.into(),
            variant: cfg.variant.name().into(),
            aux_task: v.aux_task,
            attention_enabled: v.attention_enabled,
            fusion_enabled: v.fusion_enabled,
            bottleneck_shared: v.bottleneck_shared,
            reconstruction_target: match v.aux_task {
                AuxTask::Reconstruction => Some("x".into()),
                AuxTask::Translation => Some("translated".into()),
                AuxTask::None => None,
            },
            backward_phase: if v.aux_task == AuxTask::Translation { "enabled" } else { "skipped" }.into(),
            discriminator: v.has_discriminator(),
            models,
            config: cfg.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        phantom::read_json(path)
    }
}

pub fn checkpoint_name(kind: &str, tag: Option<&str>) -> String {
    match tag {
        Some(t) => format!("{kind}-{t}.ckpt"),
        None => format!("{kind}.ckpt"),
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    modality: Option<usize>,
    state: TrainState,
    adam_g_step: u64,
    adam_d_step: Option<u64>,
}

fn push_adam(ck: &mut Checkpoint, prefix: &str, st: &AdamState) -> Result<()> {
    for (i, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
        ck.insert(format!("{prefix}.m.{i}"), Tensor::from_vec(Shape::new(1, 1, 1, m.len()), m.clone())?)?;
        ck.insert(format!("{prefix}.v.{i}"), Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v.clone())?)?;
    }
    Ok(())
}

fn pull_adam(ck: &Checkpoint, prefix: &str, step: u64, n: usize) -> Result<AdamState> {
    let mut st = AdamState { step, m: Vec::with_capacity(n), v: Vec::with_capacity(n) };
    for i in 0..n {
        st.m.push(ck.get(&format!("{prefix}.m.{i}"))?.to_vec());
        st.v.push(ck.get(&format!("{prefix}.v.{i}"))?.to_vec());
    }
    Ok(st)
}

/// Serializes weights, optimizer moments and training progress.
pub fn save_checkpoint(path: &Path, model: &Model, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let meta = CheckpointMeta {
        config: cfg.clone(),
        modality: model.modality,
        state: state.clone(),
        adam_g_step: model.opt_g.steps(),
        adam_d_step: model.opt_d.as_ref().map(Adam::steps),
    };
    let meta = serde_json::to_value(&meta).map_err(|e| UaganError::Checkpoint(e.to_string()))?;
    let mut ck = Checkpoint::new(meta);
    ck.insert_params("", &model.g_params)?;
    ck.insert_params("", &model.d_params)?;
    push_adam(&mut ck, "opt.g", &model.opt_g.state())?;
    if let Some(o) = &model.opt_d {
        push_adam(&mut ck, "opt.d", &o.state())?;
    }
    ck.save(path)
}

/// Rebuilds a model and its training state from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainState, TrainConfig)> {
    let ck = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| UaganError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut model = Model::new(&meta.config, meta.modality)?;
    ck.load_params("", &model.g_params)?;
    ck.load_params("", &model.d_params)?;
    let st = pull_adam(&ck, "opt.g", meta.adam_g_step, model.g_params.len())?;
    model.opt_g.load_state(st)?;
    if let (Some(o), Some(step)) = (model.opt_d.as_mut(), meta.adam_d_step) {
        o.load_state(pull_adam(&ck, "opt.d", step, model.d_params.len())?)?;
    }
    Ok((model, meta.state, meta.config))
}

/// Runs one full epoch over `samples` in a freshly shuffled order.
pub fn run_epoch(
    model: &mut Model,
    samples: &[SliceSample],
    state: &mut TrainState,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossReport) -> Result<()>,
) -> Result<()> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut state.rng);
    for chunk in order.chunks(cfg.batch_size) {
        let augmented: Vec<SliceSample> = chunk
            .iter()
            .map(|&i| if cfg.augment { phantom::augment(&samples[i], &mut state.rng) } else { samples[i].clone() })
            .collect();
        let refs: Vec<&SliceSample> = augmented.iter().collect();
        let batch = Batch::from_samples(&refs)?;
        let report = train_step(model, &batch, state, cfg)?;
        on_step(&report)?;
    }
    state.epoch += 1;
    Ok(())
}

/// Result of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub final_checkpoints: Vec<PathBuf>,
}

fn append_log(path: &Path, line: &LogLine) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).at(path)?;
    let json = serde_json::to_string(line).map_err(|source| UaganError::Json { path: path.into(), source })?;
    writeln!(f, "{json}").at(path)
}

/// Drops log lines of `tag` past `global_step` so a resumed run continues cleanly.
fn truncate_log(path: &Path, tag: Option<&str>, global_step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<LogLine> =
        read_loss_log(path)?.into_iter().filter(|l| l.model.as_deref() != tag || l.report.step < global_step).collect();
    let mut text = String::new();
    for l in &kept {
        text.push_str(&serde_json::to_string(l).map_err(|source| UaganError::Json { path: path.into(), source })?);
        text.push('\n');
    }
    crate::checkpoint::atomic_write(path, text.as_bytes())
}

/// Trains every model of the configured variant under `run_dir`. With `resume`,
/// each model continues from its latest checkpoint when one exists.
pub fn train(cfg: &TrainConfig, run_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.train_data)?;
    if data.modalities() != cfg.network.modalities {
        return Err(UaganError::Config(format!(
            "dataset has {} modalities but the network is configured for {}",
            data.modalities(),
            cfg.network.modalities
        )));
    }
    cfg.network.validate(data.manifest.image_size)?;
    let ck_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ck_dir).at(&ck_dir)?;
    fs::create_dir_all(run_dir.join("logs")).at(run_dir)?;
    fs::create_dir_all(run_dir.join("reports")).at(run_dir)?;
    let manifest = RunManifest::for_config(cfg, data.modalities());
    phantom::write_json(&run_dir.join(RUN_MANIFEST), &manifest)?;
    let log = run_dir.join(LOSS_LOG);
    if !resume && log.exists() {
        fs::remove_file(&log).at(&log)?;
    }

    let groups: Vec<Option<usize>> =
        if cfg.variant_spec().per_modality() { (0..data.modalities()).map(Some).collect() } else { vec![None] };
    let mut finals = Vec::new();
    for modality in groups {
        let tag = modality.map(modality_name);
        let samples: Vec<SliceSample> =
            data.samples.iter().filter(|s| modality.is_none_or(|m| s.modality.index() == m)).cloned().collect();
        if samples.is_empty() {
            return Err(UaganError::Config(format!(
                "no training slices for modality {}",
                tag.as_deref().unwrap_or("any")
            )));
        }
        let latest = ck_dir.join(checkpoint_name("latest", tag.as_deref()));
        let (mut model, mut state) = if resume && latest.exists() {
            let (m, s, _) = load_checkpoint(&latest)?;
            log::info!("resuming {} at epoch {}", latest.display(), s.epoch);
            (m, s)
        } else {
            (Model::new(cfg, modality)?, TrainState::new(derive(cfg.seed, modality.map_or(0, |m| m as u64 + 1))))
        };
        truncate_log(&log, tag.as_deref(), state.global_step)?;
        while state.epoch < cfg.epochs {
            run_epoch(&mut model, &samples, &mut state, cfg, |r| {
                append_log(&log, &LogLine { model: tag.clone(), report: r.clone() })
            })?;
            let done = state.epoch;
            log::info!("{} epoch {done}/{} done", tag.as_deref().unwrap_or(cfg.variant.name()), cfg.epochs);
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.epochs {
                save_checkpoint(
                    &ck_dir.join(checkpoint_name(&format!("epoch-{done:03}"), tag.as_deref())),
                    &model,
                    &state,
                    cfg,
                )?;
            }
            save_checkpoint(&latest, &model, &state, cfg)?;
        }
        let final_path = ck_dir.join(checkpoint_name("final", tag.as_deref()));
        save_checkpoint(&final_path, &model, &state, cfg)?;
        finals.push(final_path);
    }
    Ok(TrainOutcome { run_dir: run_dir.to_path_buf(), final_checkpoints: finals })
}

/// Loads every final model of a run, in modality order for per-modality variants.
pub fn load_final_models(run_dir: &Path) -> Result<Vec<Model>> {
    let manifest = RunManifest::load(&run_dir.join(RUN_MANIFEST))?;
    let ck_dir = run_dir.join(CHECKPOINT_DIR);
    let tags: Vec<Option<String>> = if manifest.config.variant_spec().per_modality() {
        manifest.models.iter().cloned().map(Some).collect()
    } else {
        vec![None]
    };
    tags.iter()
        .map(|t| load_checkpoint(&ck_dir.join(checkpoint_name("final", t.as_deref()))).map(|(m, _, _)| m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_are_deterministic_and_in_range() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let ta = sample_targets(8, 3, &mut a);
        assert_eq!(ta, sample_targets(8, 3, &mut b));
        assert!(ta.iter().all(|&t| t < 3));
        let mut c = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_targets(8, 1, &mut c).iter().all(|&t| t == 0));
    }

    #[test]
    fn manifest_marks_reconstruction_variant() {
        let cfg = TrainConfig { variant: Preset::UaganTrans, ..Default::default() };
        let m = RunManifest::for_config(&cfg, 3);
        assert_eq!(m.reconstruction_target.as_deref(), Some("x"));
        assert_eq!(m.backward_phase, "skipped");
        assert!(!m.discriminator);
        let ind = RunManifest::for_config(&TrainConfig { variant: Preset::Individual, ..Default::default() }, 3);
        assert_eq!(ind.models, vec!["A", "B", "C"]);
    }
}
