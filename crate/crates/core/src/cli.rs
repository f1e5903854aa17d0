//! Command-line front end: gen | train | eval | viz | bench.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_case, save_case, split_dataset, synth_generate, CaseParams, DatasetSplit, LesionCase, SplitName,
    SynthConfig, DEFAULT_FRACTIONS,
};
use crate::error::{Error, Result};
use crate::metrics::{eval_case, summarize, CaseMetrics, MaskSetPair, MetricSummary};
use crate::networks::{
    load_checkpoint, mean_prediction, save_checkpoint, uncertainty_map, ModelConfig, ModelVariant, ProbUNet,
    UNet3DConfig, DEFAULT_LATENT_DIM, DEFAULT_SAMPLES,
};
use crate::training::{fit, parse_kv, EpochRecord, TrainConfig};

pub const SEED_ENV: &str = "VOLPROB_SEED";

#[derive(Parser, Debug)]
#[command(name = "volprob", version, about = "3D probabilistic lesion segmentation")]
pub struct Cli {
    /// Worker threads for per-case evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with its split and manifest.
    Gen(GenArgs),
    /// Train a model from a key=value config file.
    Train(TrainArgs),
    /// Sample and score a dataset split.
    Eval(EvalArgs),
    /// Write per-slice mean and std images as PGM.
    Viz(VizArgs),
    /// Time the forward pass and the per-sample head.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Optional key=value file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_cases: Option<usize>,
    /// Grid as D,H,W.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub p_miss: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-case metrics as CSV.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args, Debug, Clone)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for bench.json and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::usage("--threads must be >= 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::usage(format!("cannot build thread pool: {}", e)))?;
    pool.install(|| match cli.command {
        Command::Gen(a) => cmd_gen(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => {
            let s = cmd_eval(&a)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("serializable"));
            Ok(())
        }
        Command::Viz(a) => cmd_viz(&a).map(|_| ()),
        Command::Bench(a) => {
            let r = cmd_bench(&a)?;
            print!("{}", r.table());
            Ok(())
        }
    })
}

/// `VOLPROB_SEED` wins over any configured seed.
pub fn effective_seed(configured: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::usage(format!("{} = '{}' is not an unsigned integer", SEED_ENV, v))),
        Err(_) => Ok(configured),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Artifact {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: Option<&Path>,
    seed: u64,
    started: u64,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<PathBuf> {
    let m = RunManifest {
        command: command.to_string(),
        config_path: config.map(|p| p.display().to_string()),
        seed,
        started_unix: started,
        finished_unix: unix_now(),
        inputs: inputs.iter().map(|p| Artifact::of(p)).collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| Artifact::of(p)).collect::<Result<_>>()?,
    };
    let path = dir.join("run_manifest.json");
    write_file(&path, serde_json::to_string_pretty(&m).expect("serializable").as_bytes())?;
    Ok(path)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect()
}

fn parse_triple<T: Copy>(key: &str, v: &[T]) -> Result<[T; 3]> {
    v.try_into()
        .map_err(|_| Error::usage(format!("--{} needs exactly three comma-separated values", key)))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse {} = '{}'", key, value)))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {} = '{}'", key, value)))
}

pub const CASES_DIR: &str = "cases";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPLIT_FILE: &str = "split.json";

/// One line of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub case_id: String,
    pub split: SplitName,
    pub file: String,
    pub sha256: String,
    pub params: CaseParams,
}

#[derive(Clone, Debug)]
pub struct GenOutput {
    pub split: DatasetSplit,
    pub records: Vec<ManifestRecord>,
}

pub fn cmd_gen(a: &GenArgs) -> Result<GenOutput> {
    let started = unix_now();
    let mut cfg = SynthConfig::default();
    let mut fractions = DEFAULT_FRACTIONS;
    if let Some(path) = &a.config {
        for (k, v) in parse_kv(&read_text(path)?)? {
            match k.as_str() {
                "n_cases" => cfg.n_cases = parse_one(&k, &v)?,
                "grid" => cfg.grid = parse_triple("grid", &parse_list::<usize>(&k, &v)?)?,
                "seed" => cfg.seed = parse_one(&k, &v)?,
                "p_miss" => cfg.p_miss = parse_one(&k, &v)?,
                "noise_std" => cfg.noise_std = parse_one(&k, &v)?,
                "fractions" => fractions = parse_triple("fractions", &parse_list::<f64>(&k, &v)?)?,
                _ => return Err(Error::Config(format!("unknown gen config key '{}'", k))),
            }
        }
    }
    if let Some(n) = a.n_cases {
        cfg.n_cases = n;
    }
    if let Some(g) = &a.grid {
        cfg.grid = parse_triple("grid", g)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.p_miss {
        cfg.p_miss = p;
    }
    if let Some(s) = a.noise_std {
        cfg.noise_std = s;
    }
    if let Some(f) = &a.fractions {
        fractions = parse_triple("fractions", f)?;
    }
    cfg.seed = effective_seed(cfg.seed)?;

    if a.out.exists() {
        let non_empty = std::fs::read_dir(&a.out)
            .map_err(|e| Error::io(&a.out, e))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return Err(Error::usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
    }
    let cases_dir = a.out.join(CASES_DIR);
    create_dir(&cases_dir)?;

    let generated = synth_generate(&cfg)?;
    let ids: Vec<String> = generated.iter().map(|(c, _)| c.case_id.clone()).collect();
    let split = split_dataset(&ids, fractions, cfg.seed)?;

    let mut records = Vec::with_capacity(generated.len());
    let mut outputs = Vec::new();
    for (case, params) in generated {
        let file = format!("{}/{}.vu3d", CASES_DIR, case.case_id);
        let path = a.out.join(&file);
        save_case(&path, &case)?;
        records.push(ManifestRecord {
            split: split.assignment(&case.case_id).expect("every id is assigned"),
            case_id: case.case_id,
            sha256: sha256_file(&path)?,
            file,
            params,
        });
        outputs.push(path);
    }
    let manifest = a.out.join(MANIFEST_FILE);
    write_file(&manifest, jsonl(&records).as_bytes())?;
    let split_path = a.out.join(SPLIT_FILE);
    write_file(
        &split_path,
        serde_json::to_string_pretty(&split).expect("serializable").as_bytes(),
    )?;
    outputs.push(manifest);
    outputs.push(split_path);
    write_manifest(&a.out, "gen", a.config.as_deref(), cfg.seed, started, &[], &outputs)?;
    Ok(GenOutput { split, records })
}

/// A generated dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: DatasetSplit,
    pub records: Vec<ManifestRecord>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::io(
                root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let split: DatasetSplit = serde_json::from_str(&read_text(&root.join(SPLIT_FILE))?)
            .map_err(|e| Error::format(0, format!("{}: {}", SPLIT_FILE, e)))?;
        let records = read_text(&root.join(MANIFEST_FILE))?
            .lines()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::format(0, format!("{} line {}: {}", MANIFEST_FILE, i + 1, e)))
            })
            .collect::<Result<Vec<ManifestRecord>>>()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            split,
            records,
        })
    }

    pub fn record(&self, case_id: &str) -> Result<&ManifestRecord> {
        self.records
            .iter()
            .find(|r| r.case_id == case_id)
            .ok_or_else(|| Error::usage(format!("case {} missing from manifest", case_id)))
    }

    pub fn case_path(&self, case_id: &str) -> Result<PathBuf> {
        Ok(self.root.join(&self.record(case_id)?.file))
    }

    pub fn load_split(&self, which: SplitName) -> Result<Vec<LesionCase>> {
        self.split
            .ids(which)
            .iter()
            .map(|id| load_case(&self.case_path(id)?))
            .collect()
    }

    /// Recompute every case file hash against the manifest.
    pub fn verify(&self) -> Result<()> {
        for r in &self.records {
            let path = self.root.join(&r.file);
            if sha256_file(&path)? != r.sha256 {
                return Err(Error::format(0, format!("hash mismatch for {}", path.display())));
            }
        }
        Ok(())
    }
}

/// Everything `train` reads from its config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut train = TrainConfig::default();
        let mut unet = UNet3DConfig::default();
        let mut variant = None;
        let mut latent = DEFAULT_LATENT_DIM;
        let mut flow_steps = None;
        let mut data_dir = None;
        let mut out_dir = None;
        for (k, v) in &kv {
            if train.set(k, v)? {
                continue;
            }
            match k.as_str() {
                "variant" => variant = Some(v.parse::<ModelVariant>()?),
                "levels" => unet.levels = parse_one(k, v)?,
                "base_channels" => unet.base_channels = parse_one(k, v)?,
                "feature_channels" => unet.feature_channels = parse_one(k, v)?,
                "latent_dim" => latent = parse_one(k, v)?,
                "flow_steps" => flow_steps = Some(parse_one(k, v)?),
                "data_dir" => data_dir = Some(base.join(v)),
                "out_dir" => out_dir = Some(base.join(v)),
                "flow" => {
                    return Err(Error::Config(
                        "flow kind follows the variant (punet3d-planar or punet3d-radial); mixed chains are not supported"
                            .into(),
                    ))
                }
                _ => return Err(Error::Config(format!("unknown train config key '{}'", k))),
            }
        }
        let variant = variant.ok_or_else(|| {
            Error::usage(format!(
                "config must name a variant; valid variants: {}",
                ModelVariant::ALL.map(|v| v.name()).join(", ")
            ))
        })?;
        let mut model = ModelConfig::new(variant, unet, latent);
        if let Some(k) = flow_steps {
            if variant.flow_kind().is_none() && k > 0 {
                return Err(Error::Config(format!("variant {} takes no flow steps", variant)));
            }
            if variant.flow_kind().is_some() {
                model.flow_steps = k;
            }
        }
        train.validate()?;
        Ok(RunConfig {
            model,
            train,
            data_dir: data_dir.ok_or_else(|| Error::usage("config must set data_dir"))?,
            out_dir,
        })
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.pun3";
pub const REPORT_FILE: &str = "train_report.jsonl";

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutput> {
    let started = unix_now();
    let text = read_text(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let mut rc = RunConfig::parse(&text, base)?;
    rc.train.seed = effective_seed(rc.train.seed)?;
    let out = a
        .out
        .clone()
        .or(rc.out_dir.clone())
        .ok_or_else(|| Error::usage("no output directory: pass --out or set out_dir"))?;
    let data = Dataset::open(&rc.data_dir)?;
    let train = data.load_split(SplitName::Train)?;
    let val = data.load_split(SplitName::Val)?;
    if let Some(c) = train.first() {
        rc.model.unet.check_grid(c.volume.grid)?;
    }
    create_dir(&out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let report_path = out.join(REPORT_FILE);
    let mut model = ProbUNet::new(rc.model, rc.train.seed)?;
    save_checkpoint(&ckpt, &model)?;
    let mut report_file = std::fs::File::create(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let report = fit(&mut model, &train, &val, &rc.train, |rec, m, best| {
        let line = serde_json::to_string(rec).expect("serializable");
        writeln!(report_file, "{}", line).map_err(|e| Error::io(&report_path, e))?;
        eprintln!("{}", line);
        if best {
            save_checkpoint(&ckpt, m)?;
        }
        Ok(())
    })?;
    drop(report_file);
    let mut inputs = vec![a.config.clone()];
    inputs.extend(
        data.split
            .train
            .iter()
            .chain(&data.split.val)
            .map(|id| data.case_path(id))
            .collect::<Result<Vec<_>>>()?,
    );
    write_manifest(
        &out,
        "train",
        Some(&a.config),
        rc.train.seed,
        started,
        &inputs,
        &[ckpt.clone(), report_path],
    )?;
    Ok(TrainOutput {
        checkpoint: ckpt,
        history: report.history,
        initial_val_loss: report.initial_val_loss,
        best_val_loss: report.best_val_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    #[serde(flatten)]
    pub metrics: CaseMetrics,
}

pub const EVAL_FILE: &str = "eval.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Per-case sampling seed, independent of evaluation order.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

pub fn evaluate_cases(
    model: &ProbUNet,
    cases: &[LesionCase],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<CaseRecord>> {
    if n_samples == 0 || n_samples % 4 != 0 {
        return Err(Error::usage(format!(
            "n_samples = {} must be a positive multiple of 4 (ground truth is duplicated n/4 times for matching)",
            n_samples
        )));
    }
    cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let pred = model.predict_n(&case.volume, n_samples, case_seed(seed, i))?;
            let pair = MaskSetPair::new(case.annotations.clone(), pred.masks)?;
            Ok(CaseRecord {
                case_id: case.case_id.clone(),
                metrics: eval_case(&pair)?,
            })
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricSummary> {
    let started = unix_now();
    if a.n_samples == 0 || a.n_samples % 4 != 0 {
        return Err(Error::usage(format!(
            "--n-samples {} must be a positive multiple of 4 (ground truth is duplicated n/4 times for matching)",
            a.n_samples
        )));
    }
    let seed = effective_seed(a.seed)?;
    let which: SplitName = a.split.parse()?;
    let model = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::open(&a.data)?;
    let cases = data.load_split(which)?;
    if let Some(c) = cases.first() {
        model.config().unet.check_grid(c.volume.grid)?;
    }
    let records = evaluate_cases(&model, &cases, a.n_samples, seed)?;
    let metrics: Vec<CaseMetrics> = records.iter().map(|r| r.metrics.clone()).collect();
    let summary = summarize(&metrics);
    create_dir(&a.out)?;
    let eval_path = a.out.join(EVAL_FILE);
    write_file(&eval_path, jsonl(&records).as_bytes())?;
    let summary_path = a.out.join(SUMMARY_FILE);
    write_file(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("serializable").as_bytes(),
    )?;
    let mut outputs = vec![eval_path, summary_path];
    if a.csv {
        let csv_path = a.out.join("eval.csv");
        let mut text = String::from("case_id,ged2d,iou2d,ged3d,iou3d,skipped_slices\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &records {
            let m = &r.metrics;
            text += &format!(
                "{},{},{},{},{},{}\n",
                r.case_id,
                opt(m.ged2d),
                opt(m.iou2d),
                m.ged3d,
                m.iou3d,
                m.skipped_slices
            );
        }
        write_file(&csv_path, text.as_bytes())?;
        outputs.push(csv_path);
    }
    let mut inputs = vec![a.checkpoint.clone()];
    inputs.extend(
        data.split
            .ids(which)
            .iter()
            .map(|id| data.case_path(id))
            .collect::<Result<Vec<_>>>()?,
    );
    write_manifest(&a.out, "eval", None, seed, started, &inputs, &outputs)?;
    Ok(summary)
}

/// Binary greyscale PGM, maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Map `[0, 1]` onto `0..=255`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Scale a map by its maximum so the peak becomes 1; an all-zero map stays zero.
pub fn scale_by_max(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(0.0, f64::max);
    if m > 0.0 {
        v.iter().map(|x| x / m).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn voxel_mean_std(maps: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = maps.len() as f64;
    let v = maps[0].len();
    let mut mean = vec![0.0; v];
    let mut std = vec![0.0; v];
    for i in 0..v {
        let m = maps.iter().map(|a| a[i]).sum::<f64>() / n;
        mean[i] = m;
        std[i] = (maps.iter().map(|a| (a[i] - m).powi(2)).sum::<f64>() / n).sqrt();
    }
    (mean, std)
}

pub const VIZ_KINDS: [&str; 4] = ["mu_gt", "sigma_gt", "mu_pred", "sigma_pred"];

pub fn viz_file_name(kind: &str, z: usize) -> String {
    format!("slice_{:03}_{}.pgm", z, kind)
}

pub fn cmd_viz(a: &VizArgs) -> Result<Vec<PathBuf>> {
    let started = unix_now();
    let seed = effective_seed(a.seed)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let case = load_case(&a.case)?;
    let pred = model.predict_n(&case.volume, a.n_samples.max(1), seed)?;
    let as_f = |m: &crate::data::Mask| -> Vec<f64> { m.voxels.iter().map(|&b| b as u8 as f64).collect() };
    let gt: Vec<Vec<f64>> = case.annotations.iter().map(as_f).collect();
    let (mu_gt, sigma_gt) = voxel_mean_std(&gt);
    let masks: Vec<Vec<f64>> = pred.masks.iter().map(as_f).collect();
    let (mu_pred, _) = voxel_mean_std(&masks);
    let sigma_pred = if pred.n_samples() >= 2 {
        uncertainty_map(&pred)?
    } else {
        vec![0.0; mu_pred.len()]
    };
    let maps = [mu_gt, scale_by_max(&sigma_gt), mu_pred, scale_by_max(&sigma_pred)];
    let [d, h, w] = case.volume.grid;
    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    for z in 0..d {
        for (kind, map) in VIZ_KINDS.iter().zip(&maps) {
            let px: Vec<u8> = map[z * h * w..(z + 1) * h * w].iter().map(|&v| quantize(v)).collect();
            let path = a.out.join(viz_file_name(kind, z));
            write_file(&path, &encode_pgm(w, h, &px))?;
            outputs.push(path);
        }
    }
    let mean_mask = mean_prediction(&pred)?;
    eprintln!(
        "{}: {} slices, mean prediction covers {} voxels",
        case.case_id,
        d,
        mean_mask.count()
    );
    write_manifest(
        &a.out,
        "viz",
        None,
        seed,
        started,
        &[a.checkpoint.clone(), a.case.clone()],
        &outputs,
    )?;
    Ok(outputs)
}

/// Median wall-clock seconds per operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_samples: usize,
    pub repeats: usize,
    /// U-Net plus prior network, once per volume.
    pub forward_s: f64,
    /// One prior sample decoded by the feature-combination head.
    pub sample_fcomb_s: f64,
    pub total_s: f64,
}

impl BenchReport {
    pub fn predicted_total(&self) -> f64 {
        self.forward_s + self.n_samples as f64 * self.sample_fcomb_s
    }

    /// `|total − (forward + n·sample)| / total`.
    pub fn additivity_gap(&self) -> f64 {
        (self.total_s - self.predicted_total()).abs() / self.total_s
    }

    pub fn table(&self) -> String {
        format!(
            "{:<28}{:>12}\n{:<28}{:>12.3}\n{:<28}{:>12.3}\n{:<28}{:>12.3}\n{:<28}{:>12.3}\n",
            "operation",
            "median ms",
            "forward (U-Net + prior)",
            self.forward_s * 1e3,
            "sample + f-comb (each)",
            self.sample_fcomb_s * 1e3,
            format!("total ({} samples)", self.n_samples),
            self.total_s * 1e3,
            "forward + n x sample",
            self.predicted_total() * 1e3,
        )
    }
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn bench_model(model: &ProbUNet, case: &LesionCase, n_samples: usize, repeats: usize, seed: u64) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::usage(format!("--repeats must be >= 3, got {}", repeats)));
    }
    if n_samples == 0 {
        return Err(Error::usage("--n-samples must be >= 1"));
    }
    let x = &case.volume;
    // warm-up, discarded
    model.predict_n(x, n_samples, seed)?;
    let mut forward = Vec::with_capacity(repeats);
    let mut per_sample = Vec::with_capacity(repeats);
    let mut total = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let t = Instant::now();
        let (features, prior) = model.encode_volume(x)?;
        forward.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        for eps in model.sample_noise(n_samples, seed.wrapping_add(r as u64)) {
            let z = prior.as_ref().map(|p| p.reparam(&eps)).unwrap_or_default();
            std::hint::black_box(model.decode_sample(&features, &z)?);
        }
        per_sample.push(t.elapsed().as_secs_f64() / n_samples as f64);
        let t = Instant::now();
        std::hint::black_box(model.predict_n(x, n_samples, seed.wrapping_add(r as u64))?);
        total.push(t.elapsed().as_secs_f64());
    }
    Ok(BenchReport {
        n_samples,
        repeats,
        forward_s: median(&mut forward),
        sample_fcomb_s: median(&mut per_sample),
        total_s: median(&mut total),
    })
}

pub fn cmd_bench(a: &BenchArgs) -> Result<BenchReport> {
    let started = unix_now();
    let seed = effective_seed(a.seed)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let case = load_case(&a.case)?;
    let report = bench_model(&model, &case, a.n_samples, a.repeats, seed)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("bench.json");
        write_file(&path, serde_json::to_string_pretty(&report).expect("serializable").as_bytes())?;
        write_manifest(
            out,
            "bench",
            None,
            seed,
            started,
            &[a.checkpoint.clone(), a.case.clone()],
            &[path],
        )?;
    }
    Ok(report)
}
