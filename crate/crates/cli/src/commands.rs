//! Subcommand implementations. Every command resolves its options, creates
//! its output directory and records `effective-config.json` before working.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::DType;
use guidir::checkpoint::Checkpoint;
use guidir::dataset::{
    generate_corpus, read_manifest, write_corpus, write_manifest, CorpusConfig, ManifestEntry, Palette, Vocabulary,
    DEFAULT_NEGATIVE_PROMPT,
};
use guidir::degradation::{apply_pipeline, per_image_seed, DegradationRanges, DegradationSpec, PresetRegistry};
use guidir::denoiser::{ControlledUNet, Prompt, UNetConfig};
use guidir::imaging::{load_png, psnr, save_png, ssim, Image, MetricReport};
use guidir::pixel::{image_to_latent, latent_to_image};
use guidir::robust_encoder::{
    degradation_robust_finetune, encode_lq, pretrain_autoencoder, AeConfig, AeTrainConfig, AutoEncoder,
};
use guidir::sampler::{CfgOrder, Conditioning, SampleRequest, Sampler, SamplerConfig, SamplerRegistry, ScheduleParams, Trace};
use guidir::training::{mix_negative_samples, train_denoiser, QualityLabel, TrainConfig, TrainSample, TrainTarget};
use guidir::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::write_effective;

pub const CACHE_ENV: &str = "GUIDIR_CACHE";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `explicit`, or `$GUIDIR_CACHE/corpus`.
fn corpus_dir(explicit: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(dir) = explicit {
        return Ok(dir.clone());
    }
    std::env::var_os(CACHE_ENV)
        .map(|c| PathBuf::from(c).join("corpus"))
        .ok_or_else(|| Error::InvalidParameter(format!("no corpus directory given and {CACHE_ENV} is unset")))
}

/// Sorted `*.png` files of a directory.
fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start {jobs} workers: {e}")))
}

fn load_vocab(corpus: &Path) -> Result<Vocabulary> {
    let path = corpus.join("vocab.txt");
    if path.exists() {
        Vocabulary::read(path)
    } else {
        Ok(Vocabulary::default())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub n: usize,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub negative_ratio: f64,
    pub size: usize,
    pub palette: Palette,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n: 256,
            out: None,
            seed: 0,
            negative_ratio: 0.005,
            size: 32,
            palette: Palette::Gray,
        }
    }
}

pub fn synth(mut o: SynthOptions) -> Result<()> {
    let out = corpus_dir(&o.out)?;
    o.out = Some(out.clone());
    let items = generate_corpus(&CorpusConfig {
        count: o.n,
        size: o.size,
        palette: o.palette,
        negative_ratio: o.negative_ratio,
        seed: o.seed,
    })?;
    create_dir(&out)?;
    write_effective(&out, "synth", &o)?;
    let manifest = write_corpus(&out, &items, &Vocabulary::default())?;
    let negatives = items.iter().filter(|i| i.quality_label == QualityLabel::Negative).count();
    println!("wrote {} images ({negatives} negative) to {}", items.len(), manifest.display());
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeOptions {
    pub manifest: Option<PathBuf>,
    pub preset: Option<String>,
    pub spec: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: usize,
}

fn degradation_from(preset: &Option<String>, spec: &Option<PathBuf>, seed: u64) -> Result<Option<DegradationSpec>> {
    match (preset, spec) {
        (Some(_), Some(_)) => Err(Error::InvalidParameter("give either --preset or --spec, not both".into())),
        (Some(name), None) => PresetRegistry::default().get(name, seed).map(Some),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(Some(DegradationSpec::from_json(&text)?.with_seed(seed)))
        }
        (None, None) => Ok(None),
    }
}

/// Degrades every positive manifest entry; outputs keep file names and get a
/// manifest of their own.
pub fn degrade(o: DegradeOptions) -> Result<()> {
    let manifest = o
        .manifest
        .clone()
        .ok_or_else(|| Error::InvalidParameter("--manifest is required".into()))?;
    let spec = degradation_from(&o.preset, &o.spec, o.seed)?
        .ok_or_else(|| Error::InvalidParameter("one of --preset or --spec is required".into()))?;
    spec.validate()?;
    let src_dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let entries: Vec<ManifestEntry> = read_manifest(&manifest)?
        .into_iter()
        .filter(|e| e.quality_label == QualityLabel::Positive)
        .collect();
    create_dir(&o.out)?;
    write_effective(&o.out, "degrade", &o)?;
    let pool = thread_pool(o.jobs)?;
    let outputs: Vec<Result<ManifestEntry>> = pool.install(|| {
        entries
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let img = load_png(src_dir.join(&e.path))?;
                let item_spec = spec.clone().with_seed(per_image_seed(o.seed, i as u64));
                let lq = apply_pipeline(&img, &item_spec)?;
                let name = file_name(Path::new(&e.path));
                save_png(&lq, o.out.join(&name), 8)?;
                Ok(ManifestEntry {
                    path: name,
                    caption_tokens: e.caption_tokens.clone(),
                    quality_label: e.quality_label,
                    degradation_spec: Some(item_spec),
                    sha256: String::new(),
                })
            })
            .collect()
    });
    let mut lq_entries = Vec::with_capacity(outputs.len());
    for r in outputs {
        let mut e = r?;
        e.sha256 = guidir::dataset::sha256_file(o.out.join(&e.path))?;
        lq_entries.push(e);
    }
    write_manifest(o.out.join("manifest.jsonl"), &lq_entries)?;
    println!("degraded {} images into {}", lq_entries.len(), o.out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    pub init: Option<PathBuf>,
    pub reset_control: bool,
    pub preset: Option<String>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sigma_mean: f64,
    pub sigma_std: f64,
    pub negative_ratio: f64,
    pub target: TrainTarget,
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        let u = UNetConfig::default();
        Self {
            corpus: None,
            out: PathBuf::new(),
            init: None,
            reset_control: false,
            preset: None,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            sigma_mean: t.sigma_mean,
            sigma_std: t.sigma_std,
            negative_ratio: t.negative_ratio,
            target: t.target,
            base_channels: u.base_channels,
            blocks_per_stage: u.blocks_per_stage,
            seed: t.seed,
        }
    }
}

struct Corpus {
    dir: PathBuf,
    vocab: Vocabulary,
    positives: Vec<(Image, Vec<String>)>,
    negatives: Vec<(Image, Vec<String>)>,
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    let vocab = load_vocab(dir)?;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for e in read_manifest(dir.join("manifest.jsonl"))? {
        let img = load_png(dir.join(&e.path))?;
        match e.quality_label {
            QualityLabel::Positive => positives.push((img, e.caption_tokens)),
            QualityLabel::Negative => negatives.push((img, e.caption_tokens)),
        }
    }
    Ok(Corpus {
        dir: dir.to_path_buf(),
        vocab,
        positives,
        negatives,
    })
}

/// Restoration pairs: a fixed preset, or a fresh draw from the training
/// ranges, per image.
fn degraded_pairs(corpus: &Corpus, preset: &Option<String>, seed: u64) -> Result<Vec<TrainSample>> {
    let registry = PresetRegistry::default();
    let ranges = DegradationRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .positives
        .iter()
        .enumerate()
        .map(|(i, (img, tokens))| {
            let spec = match preset {
                Some(name) => registry.get(name, per_image_seed(seed, i as u64))?,
                None => ranges.sample(&mut rng),
            };
            TrainSample::positive(img.clone(), tokens.clone(), spec)
        })
        .collect()
}

pub fn train(o: TrainOptions) -> Result<()> {
    let dir = corpus_dir(&o.corpus)?;
    let corpus = load_corpus(&dir)?;
    let cfg = TrainConfig {
        batch_size: o.batch_size,
        steps: o.steps,
        lr: o.lr,
        weight_decay: o.weight_decay,
        sigma_mean: o.sigma_mean,
        sigma_std: o.sigma_std,
        negative_ratio: o.negative_ratio,
        target: o.target,
        seed: o.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let channels = corpus
        .positives
        .first()
        .map(|(img, _)| img.channels())
        .ok_or(Error::DatasetTooSmall { needed: 1, got: 0 })?;
    let net = match &o.init {
        Some(path) => {
            let net = ControlledUNet::from_checkpoint(&Checkpoint::load(path)?)?;
            if o.reset_control {
                net.reset_control()?;
            }
            net
        }
        None => ControlledUNet::new(
            UNetConfig {
                in_channels: channels,
                base_channels: o.base_channels,
                blocks_per_stage: o.blocks_per_stage,
                vocab_size: corpus.vocab.len(),
                ..UNetConfig::default()
            },
            DType::F32,
            o.seed,
        )?,
    };
    let positives = degraded_pairs(&corpus, &o.preset, o.seed)?;
    let negatives = corpus
        .negatives
        .iter()
        .map(|(img, tokens)| TrainSample {
            hq: img.clone(),
            lq: img.clone(),
            caption_tokens: tokens.clone(),
            quality_label: QualityLabel::Negative,
            degradation: None,
        })
        .collect();
    let mut stream = mix_negative_samples(positives, negatives, cfg.negative_ratio, o.seed)?;
    create_dir(&o.out)?;
    let mut recorded = o.clone();
    recorded.corpus = Some(corpus.dir.clone());
    write_effective(&o.out, "train", &recorded)?;
    let history = train_denoiser(&net, &mut stream, &cfg, &corpus.vocab)?;
    history.write_csv(o.out.join("loss.csv"))?;
    net.checkpoint()?.save(o.out.join("model.ckpt"))?;
    if let Some(last) = history.records.last() {
        println!("step {} loss {:.5}", last.step, last.loss);
    }
    println!("saved {}", o.out.join("model.ckpt").display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainEncoderOptions {
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    pub preset: Option<String>,
    pub epochs: usize,
    pub lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainEncoderOptions {
    fn default() -> Self {
        let pre = AeTrainConfig::default();
        let fine = AeTrainConfig::finetune();
        Self {
            corpus: None,
            out: PathBuf::new(),
            preset: None,
            epochs: pre.epochs,
            lr: pre.lr,
            finetune_epochs: fine.epochs,
            finetune_lr: fine.lr,
            batch_size: pre.batch_size,
            hidden: AeConfig::default().hidden,
            seed: 0,
        }
    }
}

fn write_epoch_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn train_encoder(o: TrainEncoderOptions) -> Result<()> {
    let dir = corpus_dir(&o.corpus)?;
    let corpus = load_corpus(&dir)?;
    let images: Vec<Image> = corpus.positives.iter().map(|(i, _)| i.clone()).collect();
    let channels = images.first().map(Image::channels).unwrap_or(1);
    create_dir(&o.out)?;
    let mut recorded = o.clone();
    recorded.corpus = Some(corpus.dir.clone());
    write_effective(&o.out, "train-encoder", &recorded)?;
    let pre = AeTrainConfig {
        epochs: o.epochs,
        lr: o.lr,
        batch_size: o.batch_size,
        seed: o.seed,
        ..AeTrainConfig::default()
    };
    let config = AeConfig {
        in_channels: channels,
        hidden: o.hidden,
    };
    let (ae, pre_losses) = pretrain_autoencoder(&images, config, &pre)?;
    write_epoch_csv(&o.out.join("pretrain_loss.csv"), &pre_losses)?;
    ae.checkpoint()?.save(o.out.join("pretrained.ckpt"))?;
    let pairs: Vec<(Image, Image)> = degraded_pairs(&corpus, &o.preset, o.seed)?
        .into_iter()
        .map(|s| (s.lq, s.hq))
        .collect();
    let fine = AeTrainConfig {
        epochs: o.finetune_epochs,
        lr: o.finetune_lr,
        batch_size: o.batch_size,
        seed: o.seed,
        ..AeTrainConfig::finetune()
    };
    let (robust, fine_losses) = degradation_robust_finetune(&ae, &pairs, &fine)?;
    write_epoch_csv(&o.out.join("finetune_loss.csv"), &fine_losses)?;
    robust.checkpoint()?.save(o.out.join("encoder.ckpt"))?;
    println!("saved {}", o.out.join("encoder.ckpt").display());
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreviewOptions {
    pub encoder: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub jobs: usize,
}

pub fn preview(o: PreviewOptions) -> Result<()> {
    let ae = AutoEncoder::from_checkpoint(&Checkpoint::load(&o.encoder)?)?;
    let files = list_pngs(&o.input)?;
    create_dir(&o.out)?;
    write_effective(&o.out, "preview", &o)?;
    let pool = thread_pool(o.jobs)?;
    pool.install(|| {
        files.par_iter().try_for_each(|f| {
            let (_, cleaned) = encode_lq(&ae, &load_png(f)?)?;
            save_png(&cleaned, o.out.join(file_name(f)), 8)
        })
    })?;
    println!("wrote {} previews to {}", files.len(), o.out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreOptions {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub encoder: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub prompt: Option<Vec<String>>,
    pub negative_prompt: Vec<String>,
    pub sampler: String,
    pub cfg_order: CfgOrder,
    pub steps: usize,
    pub tau_r: f64,
    pub lambda_cfg: f64,
    pub s_churn: f64,
    pub s_noise: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub guidance_enabled: bool,
    pub seed: u64,
    pub jobs: usize,
    pub trace: bool,
}

impl Default for RestoreOptions {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            checkpoint: PathBuf::new(),
            input: PathBuf::new(),
            out: PathBuf::new(),
            encoder: None,
            manifest: None,
            prompt: None,
            negative_prompt: DEFAULT_NEGATIVE_PROMPT.iter().map(|t| t.to_string()).collect(),
            sampler: "restoration-guided".into(),
            cfg_order: CfgOrder::default(),
            steps: s.steps,
            tau_r: s.tau_r,
            lambda_cfg: s.lambda_cfg,
            s_churn: s.s_churn,
            s_noise: s.s_noise,
            s_min: s.s_min,
            s_max: s.s_max,
            guidance_enabled: s.guidance_enabled,
            seed: s.seed,
            jobs: 1,
            trace: false,
        }
    }
}

impl RestoreOptions {
    fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            lambda_cfg: self.lambda_cfg,
            tau_r: self.tau_r,
            s_churn: self.s_churn,
            s_noise: self.s_noise,
            s_min: self.s_min,
            s_max: self.s_max,
            seed: self.seed,
            guidance_enabled: self.guidance_enabled,
        }
    }

    fn sampler(&self) -> Result<Arc<dyn Sampler>> {
        let mut registry = SamplerRegistry::default();
        if self.cfg_order != CfgOrder::default() {
            registry.register(Arc::new(guidir::sampler::RestorationGuidedSampler {
                cfg_order: self.cfg_order,
            }));
        }
        registry.get(&self.sampler)
    }
}

/// Everything a batch restoration needs, loaded once.
struct Restorer {
    net: ControlledUNet,
    encoder: Option<AutoEncoder>,
    vocab: Vocabulary,
    sampler: Arc<dyn Sampler>,
    negative: Option<Prompt>,
}

impl Restorer {
    fn load(o: &RestoreOptions) -> Result<Self> {
        let net = ControlledUNet::from_checkpoint(&Checkpoint::load(&o.checkpoint)?)?;
        let encoder = match &o.encoder {
            Some(p) => Some(AutoEncoder::from_checkpoint(&Checkpoint::load(p)?)?),
            None => None,
        };
        let vocab = Vocabulary::default();
        let negative = if o.negative_prompt.is_empty() {
            None
        } else {
            Some(vocab.prompt(&o.negative_prompt)?)
        };
        Ok(Self {
            net,
            encoder,
            vocab,
            sampler: o.sampler()?,
            negative,
        })
    }

    /// Caption per file name: `--prompt` for all, else the manifest entry,
    /// else the empty (unconditional) prompt.
    fn prompts(&self, o: &RestoreOptions, files: &[PathBuf]) -> Result<Vec<Prompt>> {
        if let Some(tokens) = &o.prompt {
            let p = self.vocab.prompt(tokens)?;
            return Ok(vec![p; files.len()]);
        }
        let manifest = o.manifest.clone().unwrap_or_else(|| o.input.join("manifest.jsonl"));
        let captions: HashMap<String, Vec<String>> = if manifest.exists() {
            read_manifest(&manifest)?
                .into_iter()
                .map(|e| (file_name(Path::new(&e.path)), e.caption_tokens))
                .collect()
        } else {
            HashMap::new()
        };
        files
            .iter()
            .map(|f| match captions.get(&file_name(f)) {
                Some(tokens) => self.vocab.prompt(tokens),
                None => Ok(Prompt::default()),
            })
            .collect()
    }

    /// Working-space LQ latent: the pixels themselves, or the robust
    /// encoder's cleaned preview.
    fn lq_latent(&self, lq: &Image) -> Result<guidir::Latent> {
        match &self.encoder {
            Some(ae) => Ok(image_to_latent(&encode_lq(ae, lq)?.1)),
            None => Ok(image_to_latent(lq)),
        }
    }

    fn restore_one(&self, lq: &Image, prompt: &Prompt, cfg: &SamplerConfig, index: usize, trace: bool) -> Result<(Image, Option<Trace>)> {
        let z_lq = self.lq_latent(lq)?;
        let cond = Conditioning::new(vec![prompt.clone()], self.negative.clone().map(|n| vec![n]));
        let schedule = ScheduleParams::default().build(cfg.steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(per_image_seed(cfg.seed, index as u64));
        let mut t = trace.then(Trace::default);
        let request = SampleRequest {
            z_lq: &z_lq,
            cond: &cond,
            schedule: &schedule,
        };
        let z = self.sampler.sample(&self.net, request, cfg, &mut rng, t.as_mut())?;
        Ok((latent_to_image(&z)?, t))
    }

    fn restore_all(&self, o: &RestoreOptions, cfg: &SamplerConfig, lq: &[Image], prompts: &[Prompt]) -> Result<Vec<(Image, Option<Trace>)>> {
        cfg.validate()?;
        let pool = thread_pool(o.jobs)?;
        pool.install(|| {
            lq.par_iter()
                .zip(prompts.par_iter())
                .enumerate()
                .map(|(i, (img, p))| self.restore_one(img, p, cfg, i, o.trace))
                .collect()
        })
    }
}

pub fn restore(o: RestoreOptions) -> Result<()> {
    let restorer = Restorer::load(&o)?;
    let files = list_pngs(&o.input)?;
    let prompts = restorer.prompts(&o, &files)?;
    let lq = files.iter().map(load_png).collect::<Result<Vec<_>>>()?;
    create_dir(&o.out)?;
    write_effective(&o.out, "restore", &o)?;
    let results = restorer.restore_all(&o, &o.sampler_config(), &lq, &prompts)?;
    for (f, (img, trace)) in files.iter().zip(results) {
        save_png(&img, o.out.join(file_name(f)), 8)?;
        if let Some(t) = trace {
            t.write_csv(o.out.join(format!("{}.trace.csv", stem(f))))?;
        }
    }
    println!("restored {} images into {}", files.len(), o.out.display());
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateOptions {
    pub restored: PathBuf,
    pub gt: PathBuf,
    pub out: Option<PathBuf>,
}

/// Pairs restored files with same-stem ground-truth files.
fn match_stems(restored: &Path, gt: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let gt_files: BTreeMap<String, PathBuf> = list_pngs(gt)?.into_iter().map(|p| (stem(&p), p)).collect();
    let restored_files = list_pngs(restored)?;
    let unmatched: Vec<String> = restored_files
        .iter()
        .map(|p| stem(p))
        .filter(|s| !gt_files.contains_key(s))
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no ground truth for: {}",
            unmatched.join(", ")
        )));
    }
    Ok(restored_files
        .into_iter()
        .map(|p| {
            let g = gt_files[&stem(&p)].clone();
            (p, g)
        })
        .collect())
}

pub fn evaluate(o: EvaluateOptions) -> Result<()> {
    let pairs = match_stems(&o.restored, &o.gt)?;
    let out = o.out.clone().unwrap_or_else(|| o.restored.clone());
    create_dir(&out)?;
    write_effective(&out, "evaluate", &o)?;
    let mut report = MetricReport::default();
    for (r, g) in &pairs {
        report.push(file_name(r), &load_png(r)?, &load_png(g)?)?;
    }
    report.write_csv(out.join("metrics.csv"))?;
    let summary = report.summary();
    let path = out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
    println!(
        "{} images: mean PSNR {:.3} dB, mean SSIM {:.4}",
        summary.count, summary.mean_psnr_db, summary.mean_ssim
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    #[serde(flatten)]
    pub restore: RestoreOptions,
    pub gt: Option<PathBuf>,
    pub taus: Vec<f64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            restore: RestoreOptions::default(),
            gt: None,
            taus: vec![0.0, 1.0, 2.0, 4.0, 6.0],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    tau_r: f64,
    seed: u64,
    mean_psnr_lq_db: f64,
    mean_psnr_gt_db: Option<f64>,
    mean_ssim_gt: Option<f64>,
}

/// Restores the same inputs under each `tau_r` with one fixed seed.
pub fn sweep_tau(o: SweepOptions) -> Result<()> {
    let r = &o.restore;
    let restorer = Restorer::load(r)?;
    let files = list_pngs(&r.input)?;
    let prompts = restorer.prompts(r, &files)?;
    let lq = files.iter().map(load_png).collect::<Result<Vec<_>>>()?;
    let gt = match &o.gt {
        Some(dir) => Some(
            match_stems(&r.input, dir)?
                .iter()
                .map(|(_, g)| load_png(g))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    create_dir(&r.out)?;
    write_effective(&r.out, "sweep-tau", &o)?;
    let mut rows = Vec::with_capacity(o.taus.len());
    for &tau in &o.taus {
        let cfg = SamplerConfig {
            tau_r: tau,
            ..r.sampler_config()
        };
        let restored: Vec<Image> = restorer
            .restore_all(r, &cfg, &lq, &prompts)?
            .into_iter()
            .map(|(img, _)| img)
            .collect();
        let n = restored.len().max(1) as f64;
        let mut lq_psnr = 0.0;
        for (a, b) in restored.iter().zip(&lq) {
            lq_psnr += psnr(a, b)?;
        }
        let (gt_psnr, gt_ssim) = match &gt {
            Some(gt) => {
                let (mut p, mut s) = (0.0, 0.0);
                for (a, b) in restored.iter().zip(gt) {
                    p += psnr(a, b)?;
                    s += ssim(a, b)?;
                }
                (Some(p / n), Some(s / n))
            }
            None => (None, None),
        };
        let row = SweepRow {
            tau_r: tau,
            seed: r.seed,
            mean_psnr_lq_db: lq_psnr / n,
            mean_psnr_gt_db: gt_psnr,
            mean_ssim_gt: gt_ssim,
        };
        println!("tau_r {tau}: PSNR vs LQ {:.3} dB", row.mean_psnr_lq_db);
        rows.push(row);
    }
    write_sweep(&r.out, &rows)
}

fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    let csv_path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let dat_path = dir.join("sweep.dat");
    let mut dat = fs::File::create(&dat_path).map_err(|e| Error::io(&dat_path, e))?;
    let fmt = |v: Option<f64>| v.map_or("NaN".to_string(), |x| format!("{x:.6}"));
    let mut text = String::from("# tau_r psnr_lq_db psnr_gt_db ssim_gt\n");
    for r in rows {
        text.push_str(&format!(
            "{} {:.6} {} {}\n",
            r.tau_r,
            r.mean_psnr_lq_db,
            fmt(r.mean_psnr_gt_db),
            fmt(r.mean_ssim_gt)
        ));
    }
    dat.write_all(text.as_bytes()).map_err(|e| Error::io(&dat_path, e))
}
