//! `tvp` — dataset synthesis, backbone pretraining, motion-model training,
//! evaluation, clip generation, and the end-to-end reproduction suite.
//!
//! Run directories are self-describing: the resolved configuration is echoed
//! to `config.toml` beside the artifacts and a JSON sidecar records digests,
//! counters, and the binary version, so a directory plus this binary is
//! enough to reproduce its contents. Reruns with identical inputs rewrite
//! byte-identical artifacts.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 missing
//! prerequisite (the message names the subcommand to run first), 4 numeric
//! failure, 5 integrity failure.

use clap::{ArgGroup, Parser, Subcommand};
use ndarray::{Array3, Axis};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use tvp_core::checkpoint::{load_checkpoint, load_pretrained, save_pretrained, CheckpointHeader};
use tvp_core::config::Config;
use tvp_core::dataset::{
    load_dataset, make_dataset, sample_frames, tokenize, LoadedDataset, UNK_ID,
};
use tvp_core::error::{Error, Result};
use tvp_core::export::{frame_grid, write_gif, write_png};
use tvp_core::metrics::{evaluate_split, format_table, MetricsReport};
use tvp_core::nn::ParamStore;
use tvp_core::objectives::FeatureExtractor;
use tvp_core::pretrain::{pretrain_generator, PretrainedGenerator};
use tvp_core::trainer::{
    predict_clip, predict_from_frame, train, DiscAssembly, ModelAssembly, TrainRecord, Variant,
};

#[derive(Parser)]
#[command(name = "tvp", version, about = "Text-driven video prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a balanced moving-digit dataset.
    MakeData(MakeDataArgs),
    /// Pretrain the frozen generator/encoder backbone.
    PretrainGen(PretrainGenArgs),
    /// Train a motion-model variant against a frozen backbone.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict one clip and export it as an animated GIF plus a PNG grid.
    Generate(GenerateArgs),
    /// Run a full study: data, backbone, every variant, comparison table.
    Reproduce(ReproduceArgs),
}

#[derive(clap::Args)]
struct MakeDataArgs {
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Base configuration file; flags below win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total clip count (balanced over 4 patterns × 10 digits).
    #[arg(long)]
    clips: Option<usize>,
    /// Square frame size in pixels.
    #[arg(long)]
    dims: Option<usize>,
    /// Source frames per clip.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Motion amplitude in pixels.
    #[arg(long)]
    amplitude: Option<u32>,
    /// Fraction of clips held out as the validation split.
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(clap::Args)]
struct PretrainGenArgs {
    /// Dataset directory from `make-data`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the backbone artifacts.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Autoencoder updates (early-stops on the target reconstruction error).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out reconstruction MSE that counts as converged.
    #[arg(long)]
    target_mse: Option<f64>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Dataset directory from `make-data`.
    #[arg(long)]
    data: PathBuf,
    /// Backbone file from `pretrain-gen`.
    #[arg(long)]
    backbone: PathBuf,
    /// Run directory for config echo, log, and checkpoint.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Variant to train: tvp, fvp, nvp, wo_se, or wo_rm.
    #[arg(long)]
    variant: Option<String>,
    /// Generator updates to reach (the G,G,D schedule counts G only).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rewrite the checkpoint every this many generator updates (0 = end only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue the run directory's checkpoint trace-equivalently.
    #[arg(long)]
    resume: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Dataset directory from `make-data`.
    #[arg(long)]
    data: PathBuf,
    /// Backbone file from `pretrain-gen`.
    #[arg(long)]
    backbone: PathBuf,
    /// Checkpoint file from `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the config.toml beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split to score: val or train.
    #[arg(long, default_value = "val")]
    split: String,
    /// Score frame 1 (frozen inversion) too, not just predicted frames.
    #[arg(long)]
    include_first: bool,
    /// Feature-extractor file enabling the LPIPS column.
    #[arg(long)]
    lpips_backbone: Option<PathBuf>,
    /// Write the full per-clip report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
#[command(group(ArgGroup::new("source").required(true).args(["clip", "image"])))]
struct GenerateArgs {
    /// Dataset directory (supplies the vocabulary and clips).
    #[arg(long)]
    data: PathBuf,
    /// Backbone file from `pretrain-gen`.
    #[arg(long)]
    backbone: PathBuf,
    /// Checkpoint file from `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for clip.gif and grid.png.
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the config.toml beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset clip index: its first frame seeds the prediction and its
    /// ground truth appears above the predicted row in the grid.
    #[arg(long)]
    clip: Option<usize>,
    /// First-frame PNG at the model's frame size (no ground-truth row).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Caption; required with --image, overrides the clip caption otherwise.
    #[arg(long, required_unless_present = "clip")]
    caption: Option<String>,
}

#[derive(clap::Args)]
struct ReproduceArgs {
    /// Study suite to run; `desk` is the only one.
    #[arg(long)]
    suite: String,
    /// Directory receiving data, backbone, per-variant runs, and reports.
    #[arg(long)]
    out: PathBuf,
    /// Override the suite configuration (e.g. a scaled-down smoke run).
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::MakeData(a) => cmd_make_data(a),
        Cmd::PretrainGen(a) => cmd_pretrain_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Reproduce(a) => cmd_reproduce(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

/// Resolve the base configuration: an explicit file wins; otherwise an
/// artifact's sibling `config.toml` (how run directories self-describe);
/// otherwise the built-in defaults.
fn base_config(explicit: Option<&Path>, artifact: Option<&Path>) -> Result<Config> {
    if let Some(p) = explicit {
        return Config::from_toml_file(p);
    }
    if let Some(f) = artifact {
        let sibling = f.parent().unwrap_or(Path::new(".")).join("config.toml");
        if sibling.exists() {
            return Config::from_toml_file(&sibling);
        }
    }
    Ok(Config::default())
}

/// Open a dataset directory, naming `make-data` when it is absent.
fn open_dataset(dir: &Path) -> Result<LoadedDataset> {
    if !dir.join("manifest.jsonl").exists() {
        return Err(Error::MissingPrerequisite {
            what: format!("dataset at {}", dir.display()),
            run_first: "make-data".to_string(),
        });
    }
    load_dataset(dir)
}

/// The config describes the dataset it expects; fail early and uniformly if
/// the directory on disk was generated differently.
fn check_dataset(cfg: &Config, data: &LoadedDataset) -> Result<()> {
    let m = &data.manifest.meta;
    let d = &cfg.dataset;
    if m.height != d.height || m.width != d.width || m.clip_frames != d.clip_frames {
        return Err(Error::Config(format!(
            "dataset on disk has {}×{} frames, {} per clip; config says {}×{}, {} \
             (re-run make-data or fix [dataset])",
            m.height, m.width, m.clip_frames, d.height, d.width, d.clip_frames
        )));
    }
    if data.manifest.records.len() != d.clips {
        return Err(Error::Config(format!(
            "dataset on disk has {} clips, config says {} (re-run make-data or fix [dataset])",
            data.manifest.records.len(),
            d.clips
        )));
    }
    if m.seed != d.seed {
        return Err(Error::Config(format!(
            "dataset on disk was generated with seed {}, config says {} \
             (re-run make-data or fix [dataset])",
            m.seed, d.seed
        )));
    }
    Ok(())
}

/// Declare the variant's assembly and load checkpoint weights into it,
/// verifying the backbone is the one the run trained against.
fn load_model(
    cfg: &Config,
    data: &LoadedDataset,
    pre: &PretrainedGenerator<f32>,
    checkpoint: &Path,
) -> Result<(ModelAssembly<f32>, CheckpointHeader)> {
    let mut asm = ModelAssembly::<f32>::declare(cfg, data.vocab.len())?;
    let mut discs = DiscAssembly::<f32>::declare(cfg);
    let st = load_checkpoint(
        checkpoint,
        cfg,
        std::mem::replace(&mut asm.store, ParamStore::new()),
        std::mem::replace(&mut discs.store, ParamStore::new()),
    )?;
    if st.header.backbone_digest != pre.report.digest {
        return Err(Error::Integrity(
            "checkpoint was trained against a different frozen backbone".into(),
        ));
    }
    asm.store = st.model_store;
    Ok((asm, st.header))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut out = String::with_capacity(64);
    for b in Sha256::digest(&bytes) {
        write!(out, "{b:02x}").expect("string write");
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Echo the resolved config into the run directory before any long work, so
/// even an interrupted run is reproducible from its directory alone.
fn echo_config(run: &Path, cfg: &Config) -> Result<()> {
    fs::create_dir_all(run)?;
    fs::write(run.join("config.toml"), cfg.to_toml_string())?;
    Ok(())
}

fn progress_line(r: &TrainRecord, steps: usize) {
    let every = ((steps / 10).max(1)) as u64;
    if r.kind != "g" || (r.g_updates % every != 0 && r.g_updates != steps as u64) {
        return;
    }
    if let Some(l) = &r.g_loss {
        println!(
            "  g {:>6}/{steps}  total {:.4}  mse {:.4}",
            r.g_updates, l.total, l.mse
        );
    }
}

fn cmd_make_data(a: MakeDataArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref(), None)?;
    if let Some(v) = a.clips {
        cfg.dataset.clips = v;
    }
    if let Some(v) = a.dims {
        cfg.dataset.height = v;
        cfg.dataset.width = v;
    }
    if let Some(v) = a.frames {
        cfg.dataset.clip_frames = v;
    }
    if let Some(v) = a.seed {
        cfg.dataset.seed = v;
    }
    if let Some(v) = a.amplitude {
        cfg.dataset.amplitude = v;
    }
    if let Some(v) = a.val_fraction {
        cfg.dataset.val_fraction = v;
    }
    cfg.validate()?;
    let manifest = make_dataset(&cfg.dataset, &a.out)?;
    let val = manifest.records.iter().filter(|r| r.split == "val").count();
    println!(
        "wrote {} clips ({} train / {val} val) to {}",
        manifest.records.len(),
        manifest.records.len() - val,
        a.out.display()
    );
    println!("manifest digest {}", file_digest(&a.out.join("manifest.jsonl"))?);
    Ok(())
}

fn cmd_pretrain_gen(a: PretrainGenArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref(), None)?;
    if let Some(v) = a.steps {
        cfg.pretrain.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.pretrain.seed = v;
    }
    if let Some(v) = a.target_mse {
        cfg.pretrain.target_mse = v;
    }
    cfg.validate()?;
    let data = open_dataset(&a.data)?;
    check_dataset(&cfg, &data)?;
    echo_config(&a.run, &cfg)?;
    let pre = pretrain_generator::<f32>(&cfg, &data)?;
    let backbone = a.run.join("backbone.tvp");
    save_pretrained(&backbone, &cfg, &pre)?;
    pre.feature_extractor().write_file(&a.run.join("features.tvp"))?;
    write_json(
        &a.run.join("pretrain.json"),
        &serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "config_digest": cfg.digest_hex(),
            "data_manifest_digest": file_digest(&a.data.join("manifest.jsonl"))?,
            "steps": pre.report.steps,
            "final_val_mse": pre.report.final_val_mse,
            "converged": pre.report.converged,
            "backbone_digest": pre.report.digest,
        }),
    )?;
    println!(
        "backbone {} after {} steps, held-out mse {:.4}{}",
        pre.report.digest,
        pre.report.steps,
        pre.report.final_val_mse,
        if pre.report.converged {
            ""
        } else {
            " (did not reach target_mse; more steps or a lower bar may help)"
        }
    );
    println!("wrote {}", backbone.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref(), None)?;
    if let Some(v) = &a.variant {
        Variant::parse(v)?;
        cfg.train.variant = v.clone();
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
    cfg.validate()?;
    let data = open_dataset(&a.data)?;
    check_dataset(&cfg, &data)?;
    let pre = load_pretrained::<f32>(&a.backbone, &cfg)?;
    echo_config(&a.run, &cfg)?;

    let ckpt = a.run.join("checkpoint.tvp");
    let resume_from = if a.resume {
        if !ckpt.exists() {
            return Err(Error::MissingPrerequisite {
                what: format!("checkpoint {} to resume", ckpt.display()),
                run_first: "train".to_string(),
            });
        }
        Some(ckpt.as_path())
    } else {
        None
    };

    let log_path = a.run.join("log.jsonl");
    let mut log = std::io::BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(a.resume)
            .truncate(!a.resume)
            .write(true)
            .open(&log_path)?,
    );
    let mut log_err = None;
    let trained = train::<f32>(&cfg, &data, &pre, resume_from, Some(&ckpt), |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            log_err = Some(e);
            return false;
        }
        progress_line(r, cfg.train.steps);
        true
    })?;
    log.flush()?;
    if let Some(e) = log_err {
        return Err(Error::Io(e));
    }

    write_json(
        &a.run.join("run.json"),
        &serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "variant": cfg.train.variant,
            "config_digest": cfg.digest_hex(),
            "backbone_digest": pre.report.digest,
            "checkpoint_digest": file_digest(&ckpt)?,
            "g_updates": trained.g_updates,
            "d_updates": trained.d_updates,
            "ticks": trained.ticks,
        }),
    )?;
    println!(
        "trained {} to {} generator updates ({} discriminator), checkpoint {}",
        cfg.train.variant,
        trained.g_updates,
        trained.d_updates,
        ckpt.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = base_config(a.config.as_deref(), Some(&a.checkpoint))?;
    cfg.validate()?;
    let data = open_dataset(&a.data)?;
    check_dataset(&cfg, &data)?;
    let pre = load_pretrained::<f32>(&a.backbone, &cfg)?;
    let (asm, header) = load_model(&cfg, &data, &pre, &a.checkpoint)?;

    let include_first = a.include_first || cfg.eval.include_first;
    let lpips_path = a
        .lpips_backbone
        .clone()
        .or_else(|| cfg.eval.lpips_backbone.as_ref().map(PathBuf::from));
    let lpips = match &lpips_path {
        Some(p) => Some(FeatureExtractor::<f32>::from_file(p)?),
        None => None,
    };
    let report = evaluate_split(
        &data,
        &a.split,
        cfg.model.n_frames,
        include_first,
        lpips.as_ref(),
        |idx, clip| predict_clip(&cfg, &pre, &asm, &data.vocab, clip, idx as u64),
    )?;
    print!("{}", format_table(&[(header.variant.clone(), &report)]));
    println!(
        "({} clips, frames [{}, {}), split {:?}, {} generator updates)",
        report.clips, report.frame_range.0, report.frame_range.1, a.split, header.g_updates
    );
    if let Some(out) = &a.out {
        write_json(out, &report)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn read_image(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Validation(format!("reading {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .expect("raw buffer sized for the image"))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let cfg = base_config(a.config.as_deref(), Some(&a.checkpoint))?;
    cfg.validate()?;
    let data = open_dataset(&a.data)?;
    check_dataset(&cfg, &data)?;
    let pre = load_pretrained::<f32>(&a.backbone, &cfg)?;
    let (asm, _) = load_model(&cfg, &data, &pre, &a.checkpoint)?;
    let n = cfg.model.n_frames;

    let (first, caption, gt, clip_index) = match a.clip {
        Some(idx) => {
            let clip = data.load_clip(idx)?;
            let sampled = sample_frames(&clip, n)?;
            let first = sampled.frames.index_axis(Axis(0), 0).to_owned();
            let caption = a.caption.clone().unwrap_or_else(|| sampled.caption.clone());
            (first, caption, Some(sampled.frames), idx as u64)
        }
        None => (
            read_image(a.image.as_ref().expect("clap guarantees a source"))?,
            a.caption.clone().expect("clap requires --caption with --image"),
            None,
            0,
        ),
    };

    let toks = tokenize(&caption, &data.vocab, cfg.model.max_tokens)?;
    let words = &toks.ids[1..toks.original_length.min(cfg.model.max_tokens)];
    if words.is_empty() {
        return Err(Error::Validation("caption has no tokens".into()));
    }
    if words.iter().all(|&id| id == UNK_ID) {
        eprintln!(
            "warning: no caption token is in the training vocabulary; \
             predicting from [UNK] placeholders"
        );
    }

    let pred = predict_from_frame(&cfg, &pre, &asm, &data.vocab, &first, &caption, clip_index)?;
    fs::create_dir_all(&a.out)?;
    let gif = a.out.join("clip.gif");
    let grid = a.out.join("grid.png");
    write_gif(&gif, &pred)?;
    write_png(&grid, &frame_grid(&pred, gt.as_ref(), &caption)?)?;
    println!("caption: {caption}");
    println!("wrote {} and {}", gif.display(), grid.display());
    Ok(())
}

/// Row order of the study table: baselines, ablations, then the full model.
const SUITE_VARIANTS: [Variant; 5] = [
    Variant::Fvp,
    Variant::Nvp,
    Variant::WoSe,
    Variant::WoRm,
    Variant::Tvp,
];

/// The desk suite: the built-in defaults over a 512 train / 64 val dataset.
fn desk_config() -> Config {
    let mut cfg = Config::default();
    cfg.dataset.clips = 576;
    cfg.dataset.val_fraction = 64.0 / 576.0;
    cfg
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    println!("reproduce: {name}");
    f().map_err(|e| {
        eprintln!("reproduce: stage `{name}` failed");
        e
    })
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cmd_reproduce(a: ReproduceArgs) -> Result<()> {
    if a.suite != "desk" {
        return Err(Error::Validation(format!(
            "unknown suite {:?} (expected \"desk\")",
            a.suite
        )));
    }
    let base = match &a.config {
        Some(p) => Config::from_toml_file(p)?,
        None => desk_config(),
    };
    base.validate()?;
    echo_config(&a.out, &base)?;

    let data_dir = a.out.join("data");
    stage("make-data", || make_dataset(&base.dataset, &data_dir).map(|_| ()))?;
    let data = load_dataset(&data_dir)?;

    let pre_dir = a.out.join("pretrain");
    let pre = stage("pretrain-gen", || {
        fs::create_dir_all(&pre_dir)?;
        let pre = pretrain_generator::<f32>(&base, &data)?;
        save_pretrained(&pre_dir.join("backbone.tvp"), &base, &pre)?;
        pre.feature_extractor().write_file(&pre_dir.join("features.tvp"))?;
        println!(
            "  backbone {} after {} steps, held-out mse {:.4}",
            pre.report.digest, pre.report.steps, pre.report.final_val_mse
        );
        Ok(pre)
    })?;
    let fx = pre.feature_extractor();

    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    let mut tvp_mse = Vec::new();
    for v in SUITE_VARIANTS {
        let name = v.name();
        let mut cfg = base.clone();
        cfg.train.variant = name.to_string();
        let run = a.out.join("runs").join(name);
        let trained = stage(&format!("train {name}"), || {
            echo_config(&run, &cfg)?;
            let mut log = std::io::BufWriter::new(fs::File::create(run.join("log.jsonl"))?);
            let trained = train::<f32>(
                &cfg,
                &data,
                &pre,
                None,
                Some(&run.join("checkpoint.tvp")),
                |r| {
                    let line = serde_json::to_string(r).expect("record serializes");
                    if writeln!(log, "{line}").is_err() {
                        return false;
                    }
                    if v == Variant::Tvp {
                        if let Some(l) = &r.g_loss {
                            tvp_mse.push(l.mse);
                        }
                    }
                    progress_line(r, cfg.train.steps);
                    true
                },
            )?;
            log.flush()?;
            Ok(trained)
        })?;
        let report = stage(&format!("eval {name}"), || {
            evaluate_split(
                &data,
                "val",
                cfg.model.n_frames,
                base.eval.include_first,
                Some(&fx),
                |idx, clip| predict_clip(&cfg, &pre, &trained.assembly, &data.vocab, clip, idx as u64),
            )
        })?;
        write_json(&run.join("metrics.json"), &report)?;
        rows.push((name.to_string(), report));
    }

    let table = format_table(&rows.iter().map(|(n, r)| (n.clone(), r)).collect::<Vec<_>>());
    let find = |n: &str| &rows.iter().find(|(name, _)| name == n).expect("suite ran").1;
    let (tvp, nvp) = (find("tvp"), find("nvp"));
    let ssim_ok = tvp.ssim >= nvp.ssim + 0.02;
    let mse_ok = tvp.mse <= nvp.mse;
    let mut checks = vec![
        format!(
            "[{}] text beats noise on ssim: tvp {:.3} >= nvp {:.3} + 0.02",
            pass(ssim_ok),
            tvp.ssim,
            nvp.ssim
        ),
        format!(
            "[{}] text beats noise on mse:  tvp {:.3} <= nvp {:.3}",
            pass(mse_ok),
            tvp.mse,
            nvp.mse
        ),
    ];
    if tvp_mse.len() >= 200 {
        let first = tvp_mse[..100].iter().sum::<f64>() / 100.0;
        let last = tvp_mse[tvp_mse.len() - 100..].iter().sum::<f64>() / 100.0;
        checks.push(format!(
            "[{}] tvp mse trend: last-100 avg {:.4} <= 60% of first-100 avg {:.4}",
            pass(last <= 0.6 * first),
            last,
            first
        ));
    } else {
        checks.push(format!(
            "[skip] tvp mse trend: needs >= 200 generator updates, ran {}",
            tvp_mse.len()
        ));
    }

    let mut txt = format!(
        "desk reproduction suite\nbackbone {} ({} steps, held-out mse {:.4})\n\n{table}\n",
        pre.report.digest, pre.report.steps, pre.report.final_val_mse
    );
    for c in &checks {
        txt.push_str(c);
        txt.push('\n');
    }
    fs::write(a.out.join("report.txt"), &txt)?;
    write_json(
        &a.out.join("report.json"),
        &serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "suite": a.suite,
            "config_digest": base.digest_hex(),
            "backbone_digest": pre.report.digest,
            "variants": rows.iter().map(|(n, r)| (n.clone(), r)).collect::<std::collections::BTreeMap<_, _>>(),
            "checks": checks,
        }),
    )?;
    print!("{txt}");
    println!("report written to {}", a.out.join("report.txt").display());
    Ok(())
}
