//! Command-line front end. Every command writes `metrics.csv` and
//! `manifest.json` (the fully resolved config) into its output directory;
//! re-running with `--config <dir>/manifest.json` reproduces the metrics.

pub mod render;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::BackboneWeights;
use crate::data::{write_binary_dataset, write_seg_maps, Image, LabeledExample, SegExample};
use crate::error::{Error, Result};
use crate::pipeline::{
    evaluate, evaluate_elbo, evaluate_mim, finetune, format_ablation_table, run_ablation_suite, run_pretrain,
    write_ablation_csv, write_metrics_csv, MetricsRecord, Objective, Task,
};
use crate::store::{load_backbone, load_tokenizer, parse_config, save_backbone, save_tokenizer, RunConfig, Split};
use crate::tokenizer::{codebook_usage, mean_mse, train_tokenizer, TokenizerStep, TokenizerWeights};

pub use render::{decode_pgm, encode_pgm, normalize_to_u8, render_attention, Reference};
pub use report::{convergence_report, ConvergenceReport, ConvergenceRun};

#[derive(Parser, Debug)]
#[command(name = "mimforge", version, about = "Masked image modeling experiments on one CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Dotted override, e.g. `--set pretrain.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic shapes dataset as binary train/eval splits.
    GenData(RunArgs),
    /// Train the discrete visual tokenizer.
    TrainTokenizer(RunArgs),
    /// Pre-train the backbone (objective from `pretrain.objective`).
    Pretrain(RunArgs),
    /// Fine-tune for `finetune.task`, starting from `inputs.backbone` if set.
    Finetune(RunArgs),
    /// Evaluate `inputs.backbone` on the eval split for `finetune.task`.
    Eval(RunArgs),
    /// Report both terms of the two-stage bound for a pre-trained checkpoint.
    Elbo(RunArgs),
    /// Run the five pre-training ablation arms and tabulate them.
    Ablate(RunArgs),
    /// Render attention maps of one eval image as PGM files.
    Attend(RunArgs),
    /// Align per-epoch curves from several metrics files.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// metrics.csv files to compare.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "eval")]
    pub split: String,
    #[arg(long, default_value = "accuracy")]
    pub metric: String,
    /// Fractions of the final value to report epochs-to for.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.9")]
    pub fractions: Vec<f64>,
}

/// Parses `argv` and runs the command. Returns the process exit status:
/// 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Report(a) => cmd_report(&a),
        Command::GenData(a) => with_run(&a, cmd_gen_data),
        Command::TrainTokenizer(a) => with_run(&a, cmd_train_tokenizer),
        Command::Pretrain(a) => with_run(&a, cmd_pretrain),
        Command::Finetune(a) => with_run(&a, cmd_finetune),
        Command::Eval(a) => with_run(&a, cmd_eval),
        Command::Elbo(a) => with_run(&a, cmd_elbo),
        Command::Ablate(a) => with_run(&a, cmd_ablate),
        Command::Attend(a) => with_run(&a, cmd_attend),
    }
}

fn with_run(args: &RunArgs, f: fn(&RunConfig, &Path) -> Result<Vec<MetricsRecord>>) -> Result<()> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let cfg = parse_config(&text, &args.overrides)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let manifest = args.out.join("manifest.json");
    fs::write(&manifest, cfg.to_json()).map_err(|e| Error::io(&manifest, e))?;
    let metrics = f(&cfg, &args.out)?;
    write_metrics_csv(&args.out.join("metrics.csv"), &metrics)
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::config(key, "this command needs a checkpoint path"))
}

fn tokenizer_for(cfg: &RunConfig) -> Result<TokenizerWeights> {
    let t = load_tokenizer(require(&cfg.inputs.tokenizer, "inputs.tokenizer")?)?;
    if t.config.grid() != cfg.backbone.grid() {
        return Err(Error::config("inputs.tokenizer", "tokenizer grid does not match the backbone patch grid"));
    }
    Ok(t)
}

fn images(data: &[SegExample]) -> Vec<Image> {
    data.iter().map(|e| e.image.clone()).collect()
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<MetricsRecord>> {
    let mut recs = Vec::new();
    for split in [Split::Train, Split::Eval] {
        let data = cfg.data.load(split)?;
        let labeled: Vec<LabeledExample> = data.iter().map(SegExample::labeled).collect();
        write_binary_dataset(&out.join(format!("{}.bin", split.name())), &labeled)?;
        if data.iter().all(|e| !e.seg.is_empty()) {
            write_seg_maps(&out.join(format!("{}.seg", split.name())), &data)?;
        }
        recs.push(MetricsRecord::new(0, split.name(), "examples", data.len() as f64));
        for c in 0..cfg.data.num_classes {
            let n = data.iter().filter(|e| e.label == c).count();
            recs.push(MetricsRecord::new(0, split.name(), &format!("class_{c}"), n as f64));
        }
    }
    Ok(recs)
}

/// Every `every`-th tokenizer step plus the last one as metrics records.
pub fn tokenizer_metrics(trace: &[TokenizerStep], every: usize) -> Vec<MetricsRecord> {
    let mut recs = Vec::new();
    for s in trace {
        if s.step % every.max(1) != 0 && s.step + 1 != trace.len() {
            continue;
        }
        for (m, v) in [("loss", s.loss), ("recon_mse", s.recon_mse), ("kl", s.kl), ("tau", s.tau), ("lr", s.lr)] {
            recs.push(MetricsRecord::new(s.step, "train", m, v));
        }
    }
    recs
}

fn cmd_train_tokenizer(cfg: &RunConfig, out: &Path) -> Result<Vec<MetricsRecord>> {
    let train = images(&cfg.data.load(Split::Train)?);
    let (tok, trace) = train_tokenizer(&train, &cfg.tokenizer, &cfg.tokenizer_train)?;
    save_tokenizer(&tok, cfg.tokenizer_train.seed, cfg.tokenizer_train.steps as u64, &out.join("tokenizer.ckpt"))?;
    let mut recs = tokenizer_metrics(&trace, cfg.pretrain.log_every);
    let eval = images(&cfg.data.load(Split::Eval)?);
    let grids = tok.tokenize_batch(&eval)?;
    let recon = tok.decode_batch(&grids)?;
    let step = cfg.tokenizer_train.steps;
    recs.push(MetricsRecord::new(step, "eval", "recon_mse", mean_mse(&eval, &recon)));
    recs.push(MetricsRecord::new(step, "eval", "codebook_usage", codebook_usage(&grids, tok.config.vocab) as f64));
    Ok(recs)
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<Vec<MetricsRecord>> {
    let train = images(&cfg.data.load(Split::Train)?);
    let tok = match cfg.pretrain.objective {
        Objective::Pixel => None,
        _ => Some(tokenizer_for(cfg)?),
    };
    let init = match &cfg.inputs.backbone {
        Some(p) => Some(load_backbone(p)?),
        None => None,
    };
    let res = run_pretrain(&train, tok.as_ref(), &cfg.backbone, init, &cfg.pretrain)?;
    save_backbone(&res.weights, cfg.pretrain.seed, cfg.pretrain.steps as u64, &out.join("backbone.ckpt"))?;
    let mut recs = res.metrics;
    if let Some(tok) = &tok {
        if cfg.pretrain.objective == Objective::Mim && cfg.pretrain.mask.ratio > 0.0 {
            let eval = images(&cfg.data.load(Split::Eval)?);
            let m = evaluate_mim(&res.weights, tok, &eval, &cfg.pretrain.mask, cfg.pretrain.seed)?;
            recs.push(MetricsRecord::new(cfg.pretrain.steps, "eval", "loss", m.loss));
            recs.push(MetricsRecord::new(cfg.pretrain.steps, "eval", "accuracy", m.accuracy));
        }
    }
    Ok(recs)
}

fn check_seg(data: &[SegExample], task: Task) -> Result<()> {
    if task == Task::Segment && data.iter().any(|e| e.seg.is_empty()) {
        return Err(Error::invalid("segmentation needs per-pixel label maps (`<split>.seg`)"));
    }
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, out: &Path) -> Result<Vec<MetricsRecord>> {
    let train = cfg.data.load(Split::Train)?;
    let eval = cfg.data.load(Split::Eval)?;
    check_seg(&train, cfg.finetune.task)?;
    check_seg(&eval, cfg.finetune.task)?;
    let init = match &cfg.inputs.backbone {
        Some(p) => load_backbone(p)?,
        None => BackboneWeights::init(&cfg.backbone, cfg.finetune.seed)?,
    };
    if init.config.dim != cfg.backbone.dim || init.config.layers != cfg.backbone.layers {
        return Err(Error::config("backbone", "checkpoint architecture differs from the configured backbone"));
    }
    let res = finetune(&init, &train, &eval, cfg.task_classes(), &cfg.finetune)?;
    let steps = cfg.finetune.epochs as u64;
    save_backbone(&res.weights, cfg.finetune.seed, steps, &out.join("backbone.ckpt"))?;
    Ok(res.metrics)
}

fn cmd_eval(cfg: &RunConfig, _out: &Path) -> Result<Vec<MetricsRecord>> {
    let w = load_backbone(require(&cfg.inputs.backbone, "inputs.backbone")?)?;
    let eval = cfg.data.load(Split::Eval)?;
    check_seg(&eval, cfg.finetune.task)?;
    let r = evaluate(&w, &eval, cfg.finetune.task)?;
    let mut recs: Vec<MetricsRecord> = r
        .named()
        .into_iter()
        .map(|(m, v)| MetricsRecord::new(0, "eval", &m, v))
        .collect();
    if let crate::pipeline::EvalResult::Segment { iou, .. } = &r {
        for (c, v) in iou.per_class.iter().enumerate() {
            if let Some(v) = v {
                recs.push(MetricsRecord::new(0, "eval", &format!("iou_{c}"), *v));
            }
        }
    }
    Ok(recs)
}

fn cmd_elbo(cfg: &RunConfig, out: &Path) -> Result<Vec<MetricsRecord>> {
    let tok = tokenizer_for(cfg)?;
    let w = load_backbone(require(&cfg.inputs.backbone, "inputs.backbone")?)?;
    let eval = images(&cfg.data.load(Split::Eval)?);
    let batch = &eval[..cfg.elbo.images.min(eval.len())];
    let r = evaluate_elbo(batch, &tok, &w, &cfg.pretrain.mask, cfg.elbo.seed)?;
    let path = out.join("elbo.json");
    fs::write(&path, serde_json::to_string_pretty(&r).expect("report serializes")).map_err(|e| Error::io(&path, e))?;
    Ok([
        ("stage1_term", r.stage1_term),
        ("stage2_term", r.stage2_term),
        ("mean_masked", r.mean_masked),
        ("loss_per_token", r.loss_per_token),
    ]
    .into_iter()
    .map(|(m, v)| MetricsRecord::new(0, "eval", m, v))
    .collect())
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<MetricsRecord>> {
    let tok = tokenizer_for(cfg)?;
    let train = cfg.data.load(Split::Train)?;
    let eval = cfg.data.load(Split::Eval)?;
    check_seg(&train, Task::Segment)?;
    let (rows, recs) = run_ablation_suite(
        &images(&train),
        &train,
        &eval,
        cfg.data.num_classes,
        &tok,
        &cfg.backbone,
        &cfg.ablation(),
    )?;
    write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    print!("{}", format_ablation_table(&rows));
    Ok(recs)
}

fn cmd_attend(cfg: &RunConfig, out: &Path) -> Result<Vec<MetricsRecord>> {
    let w = load_backbone(require(&cfg.inputs.backbone, "inputs.backbone")?)?;
    let eval = cfg.data.load(Split::Eval)?;
    let img = &eval
        .get(cfg.attend.image)
        .ok_or_else(|| Error::config("attend.image", format!("eval split has {} images", eval.len())))?
        .image;
    let layer = if cfg.attend.layer == 0 { w.config.layers } else { cfg.attend.layer };
    let reference = if cfg.attend.patches.is_empty() {
        Reference::All
    } else {
        Reference::Patches(cfg.attend.patches.clone())
    };
    let dir = out.join("attention");
    let paths = render_attention(&w, img, &reference, layer, &dir)?;
    render::write_image_pgm(img, &dir.join("input.pgm"))?;
    let maps = w.attention_maps(img, layer)?;
    let worst = (0..maps.rows())
        .map(|r| (maps.row(r).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(vec![
        MetricsRecord::new(layer, "attend", "maps_written", paths.len() as f64),
        MetricsRecord::new(layer, "attend", "max_row_sum_error", worst),
    ])
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let r = convergence_report(&a.metrics, &a.split, &a.metric, &a.fractions)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let path = a.out.join("convergence.csv");
    let csv = r.to_csv();
    fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    print!("{csv}");
    Ok(())
}
