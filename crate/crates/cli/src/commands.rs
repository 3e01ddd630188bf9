use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use uagan::config::RunConfig;
use uagan::eval::{evaluate, evaluate_oracle};
use uagan::metrics::{
    comparison_table, export_feature_heatmap, segmentation_overlay, write_comparison_table, write_pgm, MetricsReport,
};
use uagan::networks::{attentional_fuse, Fusion, Preset, Stream};
use uagan::phantom::{build_unpaired_dataset, write_slice, Dataset, DatasetManifest, Grid, Split, MANIFEST_FILE};
use uagan::trainer::{load_final_models, train, Batch, RunManifest, RUN_MANIFEST};
use uagan::{Result, UaganError};
use uagan_autograd::{concat_channels, no_grad, Tensor, Var};

use crate::{
    AblateArgs, Command, Common, EvalArgs, GenDataArgs, HeatmapArgs, TrainArgs, TrainOverrides, TranslateArgs,
};

pub const RUNS_DIR_ENV: &str = "UAGAN_RUNS_DIR";
pub const DEFAULT_RUNS_DIR: &str = "runs";
pub const METRICS_CSV: &str = "reports/metrics.csv";

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Heatmap(a) => heatmap_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn runs_root() -> PathBuf {
    env::var_os(RUNS_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_RUNS_DIR))
}

/// A bare name resolves under the run root; anything with a path separator is used as is.
fn resolve_run(name: &Path) -> PathBuf {
    if name.is_absolute() || name.components().count() > 1 || name.starts_with(".") {
        name.to_path_buf()
    } else {
        runs_root().join(name)
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.trainer.seed = s;
        cfg.data.seed = s;
    }
    if common.deterministic {
        cfg.trainer.deterministic = true;
    }
    Ok(cfg)
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| UaganError::Argument(format!("--{flag} is required")))
}

/// A dataset root produced by `gen-data` resolves to its split; a split directory is used as is.
fn resolve_split(data: &Path, split: Split) -> PathBuf {
    let sub = data.join(split.name());
    if sub.join(MANIFEST_FILE).is_file() {
        sub
    } else {
        data.to_path_buf()
    }
}

fn print_manifest_summary(m: &DatasetManifest) {
    let counts: Vec<String> =
        m.modalities.iter().zip(m.patients_per_modality()).map(|(name, n)| format!("{name}={n}")).collect();
    println!(
        "{}: {} patients ({}), {} slices of {}×{}",
        m.split.name(),
        m.patients.len(),
        counts.join(" "),
        m.num_slices(),
        m.image_size,
        m.image_size
    );
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    let out = require(&a.common.out, "out")?;
    if let Some(v) = a.train_patients {
        cfg.data.train_patients = v;
    }
    if let Some(v) = a.test_patients {
        cfg.data.test_patients = v;
    }
    if let Some(v) = a.modalities {
        cfg.data.modalities = v;
    }
    if let Some(v) = a.image_size {
        cfg.phantom.image_size = v;
    }
    if let Some(v) = a.slices {
        cfg.phantom.slices_per_patient = v;
    }
    let d = &cfg.data;
    if d.train_patients == 0 || d.test_patients == 0 || d.modalities == 0 {
        return Err(UaganError::Argument("patient and modality counts must be ≥ 1".into()));
    }
    let train =
        build_unpaired_dataset(&cfg.phantom, d.train_patients, d.modalities, d.seed, Split::Train, &out.join("train"))?;
    let test =
        build_unpaired_dataset(&cfg.phantom, d.test_patients, d.modalities, d.seed, Split::Test, &out.join("test"))?;
    print_manifest_summary(&train);
    print_manifest_summary(&test);
    println!("dataset written to {}", out.display());
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    if let Some(v) = o.epochs {
        cfg.trainer.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.trainer.batch_size = v;
    }
    if let Some(v) = o.base_channels {
        cfg.network.base_channels = v;
    }
    if let Some(v) = o.checkpoint_every {
        cfg.trainer.checkpoint_every = v;
    }
    if o.no_augment {
        cfg.trainer.augment = false;
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_overrides(&mut cfg, &a.overrides);
    if let Some(v) = &a.variant {
        cfg.trainer.variant = v.parse()?;
    }
    let data = resolve_split(require(&a.common.data, "data")?, Split::Train);
    let name = a
        .common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}-seed{}", cfg.trainer.variant.name(), cfg.trainer.seed)));
    let run_dir = resolve_run(&name);
    let tc = cfg.train_config(data);
    let outcome = train(&tc, &run_dir, a.resume)?;
    for c in &outcome.final_checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}

fn write_reports(report: &MetricsReport, run_dir: &Path) -> Result<()> {
    let dir = run_dir.join("reports");
    fs::create_dir_all(&dir).map_err(|source| UaganError::Io { path: dir.clone(), source })?;
    report.write_csv(&run_dir.join(METRICS_CSV))?;
    report.write_dice_csv(&dir.join("dice_per_patient.csv"))?;
    report.write_summary_text(&dir.join("summary.txt"))?;
    report.write_summary(&dir.join("summary.json"))
}

fn print_summary(report: &MetricsReport) {
    print!("{}", report.summary_text());
    let overall = report.summarize(None);
    if overall.metrics["assd"].excluded > 0 {
        println!("ASSD undefined for {} patient(s) with an empty mask", overall.metrics["assd"].excluded);
    }
}

fn eval_run(run_dir: &Path, data: &Path) -> Result<MetricsReport> {
    let manifest = RunManifest::load(&run_dir.join(RUN_MANIFEST))?;
    let dataset = Dataset::load(data)?;
    let models = load_final_models(run_dir)?;
    let report = evaluate(&models, &dataset, manifest.config.variant.display_name(), manifest.config.seed)?;
    write_reports(&report, run_dir)?;
    Ok(report)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let data = &resolve_split(require(&a.common.data, "data")?, Split::Test);
    let report = if a.oracle {
        let r = evaluate_oracle(&Dataset::load(data)?, a.common.seed.unwrap_or(0))?;
        if let Some(out) = a.run.as_ref().or(a.common.out.as_ref()) {
            write_reports(&r, &resolve_run(out))?;
        }
        r
    } else {
        let run =
            a.run.as_ref().or(a.common.out.as_ref()).ok_or_else(|| UaganError::Argument("--run is required".into()))?;
        eval_run(&resolve_run(run), data)?
    };
    print_summary(&report);
    Ok(())
}

fn test_batches(dataset: &Dataset, limit: usize) -> Vec<&uagan::phantom::SliceSample> {
    dataset.samples.iter().take(limit).collect()
}

fn out_dir(common: &Common, run_dir: &Path, sub: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| run_dir.join("reports").join(sub));
    fs::create_dir_all(&dir).map_err(|source| UaganError::Io { path: dir.clone(), source })?;
    Ok(dir)
}

fn normalized(t: &Tensor) -> Result<Grid<f32>> {
    let [_, _, h, w] = t.shape().0;
    let (lo, hi) = t.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    Grid::new(h, w, t.data().iter().map(|&v| (v - lo) / span).collect())
}

fn translate_cmd(a: TranslateArgs) -> Result<()> {
    let run_dir = resolve_run(&a.run);
    let dataset = Dataset::load(&resolve_split(require(&a.common.data, "data")?, Split::Test))?;
    let target = dataset.manifest.modality_index(&a.target).map_err(|_| {
        UaganError::Argument(format!(
            "unknown target modality '{}'; dataset has {:?}",
            a.target, dataset.manifest.modalities
        ))
    })?;
    let models = load_final_models(&run_dir)?;
    let model = models.first().ok_or_else(|| UaganError::Config("run has no models".into()))?;
    if !model.generator.variant().has_trans_stream() {
        return Err(UaganError::Config("this variant has no translation stream".into()));
    }
    let dir = out_dir(&a.common, &run_dir, "translate")?;
    let _guard = no_grad();
    for s in test_batches(&dataset, a.limit) {
        let batch = Batch::from_samples(&[s])?;
        let fake = model.generator.translate(&Var::constant(batch.x.clone()), &[target])?;
        let cycle = model.generator.translate(&fake, &batch.labels)?;
        let stem = format!("{}-s{:03}", s.patient_id, s.slice_index);
        for (kind, t) in [
            (format!("src{}", s.modality.name()), &batch.x),
            (format!("to{}", a.target), fake.value()),
            (format!("cycle{}", s.modality.name()), cycle.value()),
        ] {
            write_pgm(&dir.join(format!("{stem}-{kind}.pgm")), &normalized(t)?)?;
            let raw = Grid::new(t.shape().h(), t.shape().w(), t.data().to_vec())?;
            write_slice(&dir.join(format!("{stem}-{kind}.uag")), &raw, &s.mask)?;
        }
    }
    println!("wrote translations to {}", dir.display());
    Ok(())
}

fn heatmap_cmd(a: HeatmapArgs) -> Result<()> {
    let run_dir = resolve_run(&a.run);
    let dataset = Dataset::load(&resolve_split(require(&a.common.data, "data")?, Split::Test))?;
    let models = load_final_models(&run_dir)?;
    let dir = out_dir(&a.common, &run_dir, "heatmaps")?;
    let _guard = no_grad();
    for s in test_batches(&dataset, a.limit) {
        let model = models
            .iter()
            .find(|m| m.modality.is_none_or(|k| k == s.modality.index()))
            .ok_or_else(|| UaganError::Config("no model for this modality".into()))?;
        let g = &model.generator;
        if a.level >= g.config().levels {
            return Err(UaganError::Argument(format!(
                "level {} beyond the {} encoder levels",
                a.level,
                g.config().levels
            )));
        }
        let batch = Batch::from_samples(&[s])?;
        let x = Var::constant(batch.x.clone());
        let stem = format!("{}-s{:03}", s.patient_id, s.slice_index);
        let seg = g.encode(Stream::Seg, &x)?;
        write_pgm(&dir.join(format!("{stem}-seg.pgm")), &export_feature_heatmap(seg.levels[a.level].value())?)?;
        if g.variant().has_trans_stream() {
            let planes = uagan::networks::label_planes(&batch.labels, g.config().modalities, x.shape())?;
            let trans = g.encode(Stream::Trans, &concat_channels(&[x.clone(), Var::constant(planes)])?)?;
            write_pgm(&dir.join(format!("{stem}-trans.pgm")), &export_feature_heatmap(trans.levels[a.level].value())?)?;
            let fusion = match g.attention_blocks(Stream::Seg).get(a.level) {
                Some(b) => Fusion::Attention(b),
                None if g.variant().fusion_enabled => Fusion::Add,
                None => Fusion::Off,
            };
            let fused = attentional_fuse(&seg.levels[a.level], &trans.levels[a.level], fusion)?;
            write_pgm(&dir.join(format!("{stem}-fused.pgm")), &export_feature_heatmap(fused.value())?)?;
        }
        let logits = model.segment(&batch.x, &batch.labels)?;
        let pred = uagan::eval::argmax_masks(&logits)?.remove(0);
        write_pgm(&dir.join(format!("{stem}-overlay.pgm")), &segmentation_overlay(&s.image, &pred)?)?;
    }
    println!("wrote heatmaps to {}", dir.display());
    Ok(())
}

pub const TABLE_CSV: &str = "table.csv";
pub const ROWS_CSV: &str = "per_patient.csv";

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_overrides(&mut cfg, &a.overrides);
    let data = require(&a.common.data, "data")?;
    let (train_dir, test_dir) = (resolve_split(data, Split::Train), resolve_split(data, Split::Test));
    if train_dir == test_dir {
        return Err(UaganError::Argument(format!("{} must contain train/ and test/ splits", data.display())));
    }
    if a.seeds == 0 {
        return Err(UaganError::Argument("--seeds must be ≥ 1".into()));
    }
    let variants: Vec<Preset> = if a.variants.is_empty() {
        Preset::ALL.to_vec()
    } else {
        a.variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
    };
    let sweep = resolve_run(&a.common.out.clone().unwrap_or_else(|| PathBuf::from("ablation")));
    fs::create_dir_all(&sweep).map_err(|source| UaganError::Io { path: sweep.clone(), source })?;
    let base_seed = a.common.seed.unwrap_or(cfg.trainer.seed);
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for &variant in &variants {
        for k in 0..a.seeds {
            let seed = base_seed + k;
            let run_dir = sweep.join(format!("{}-seed{seed}", variant.name()));
            let metrics = run_dir.join(METRICS_CSV);
            if metrics.is_file() {
                log::info!("skipping completed run {}", run_dir.display());
                reports.push(MetricsReport::read_csv(&metrics)?);
                continue;
            }
            let mut c = cfg.clone();
            c.trainer.variant = variant;
            c.trainer.seed = seed;
            let outcome =
                train(&c.train_config(train_dir.clone()), &run_dir, true).and_then(|_| eval_run(&run_dir, &test_dir));
            match outcome {
                Ok(r) => reports.push(r),
                Err(e) => {
                    log::error!("{} seed {seed} failed: {e}", variant.name());
                    failures.push(format!("{}\t{seed}\t{e}", variant.name()));
                }
            }
        }
    }
    let failures_path = sweep.join("failures.tsv");
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path).map_err(|source| UaganError::Io { path: failures_path.clone(), source })?;
        }
    } else {
        let text = format!("variant\tseed\terror\n{}\n", failures.join("\n"));
        fs::write(&failures_path, text).map_err(|source| UaganError::Io { path: failures_path.clone(), source })?;
    }
    let mut w = csv::Writer::from_path(sweep.join(ROWS_CSV))?;
    w.write_record([
        "variant",
        "seed",
        "patient_id",
        "modality",
        "dice",
        "precision",
        "sensitivity",
        "specificity",
        "assd",
    ])?;
    for r in &reports {
        for p in &r.rows {
            w.write_record([
                r.variant.clone(),
                r.seed.to_string(),
                p.patient_id.clone(),
                p.modality.clone(),
                format!("{:?}", p.dice),
                format!("{:?}", p.precision),
                format!("{:?}", p.sensitivity),
                format!("{:?}", p.specificity),
                p.assd.map(|v| format!("{v:?}")).unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(|source| UaganError::Io { path: sweep.join(ROWS_CSV), source })?;
    let table = comparison_table(&reports);
    write_comparison_table(&table, &sweep.join(TABLE_CSV))?;
    println!("wrote {} and {}", sweep.join(TABLE_CSV).display(), sweep.join(ROWS_CSV).display());
    if !failures.is_empty() {
        return Err(UaganError::Runtime(format!("{} run(s) failed; see {}", failures.len(), failures_path.display())));
    }
    Ok(())
}
