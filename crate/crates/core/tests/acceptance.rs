//! End-to-end acceptance run at the desk configuration. Prints one
//! `[PASS]`/`[FAIL]` line per criterion and exits non-zero if any fails.
//!
//!     cargo test --release --test acceptance

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use mimforge::backbone::{BackboneConfig, BackboneWeights, Head};
use mimforge::cli::{decode_pgm, render_attention, run, Reference};
use mimforge::data::{patchify, unpatchify, Image, SegExample};
use mimforge::pipeline::{
    epochs_to_fraction, evaluate_elbo, evaluate_mim, format_ablation_table, finetune, pretrain_mim,
    run_ablation_suite, series, AblationArm, AblationConfig, FinetuneConfig, PretrainConfig,
};
use mimforge::store::{decode_checkpoint, encode_checkpoint, Checkpoint, DataConfig, ElboConfig, Split};
use mimforge::tokenizer::{codebook_usage, mean_mse, train_tokenizer, TokenizerConfig, TokenizerTrainConfig, TokenizerWeights};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = t0.elapsed().as_secs_f64();
    let (tag, detail) = match &out {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] {n:2} {name}: {detail} ({secs:.1}s)");
    out.is_ok()
}

fn images(ds: &[SegExample]) -> Vec<Image> {
    ds.iter().map(|e| e.image.clone()).collect()
}

struct Shared {
    train: Vec<SegExample>,
    eval: Vec<SegExample>,
    tokenizer: Option<TokenizerWeights>,
    pretrained: Option<BackboneWeights>,
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let cases = common::gradient_suite();
    let secs = t0.elapsed().as_secs_f64();
    let worst = cases.iter().map(|c| c.1).fold(0.0, f64::max);
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, e)| !(*e < common::GRAD_TOL))
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    let has_e2e = cases.iter().any(|c| c.0 == "end_to_end_mim");
    check(
        bad.is_empty() && has_e2e && secs < 120.0,
        format!("{} cases, worst rel. err {worst:.2e}, failing {bad:?}, {secs:.1}s", cases.len()),
    )
}

fn masking() -> Outcome {
    let t0 = Instant::now();
    let s = common::masking_statistics(10_000, 0);
    let secs = t0.elapsed().as_secs_f64();
    check(
        s.min_masked >= 79 && s.max_ratio <= 0.57 && s.bad_blocks == 0 && secs < 10.0,
        format!(
            "min |M| {}, max ratio {:.4}, mean ratio {:.4}, bad blocks {}, {secs:.2}s",
            s.min_masked, s.max_ratio, s.mean_ratio, s.bad_blocks
        ),
    )
}

fn round_trips(sh: &Shared) -> Outcome {
    let mut patch_ok = true;
    for (i, ex) in sh.train.iter().take(64).enumerate() {
        let p = [1, 2, 4, 8, 16][i % 5];
        let grid = patchify(&ex.image, p).map_err(|e| e.to_string())?;
        let back = unpatchify(&grid, p, 32, 32, 3).map_err(|e| e.to_string())?;
        patch_ok &= back.data.iter().zip(&ex.image.data).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let mut w = BackboneWeights::init(&BackboneConfig::default(), 3).map_err(|e| e.to_string())?;
    w.attach_head(Head::Cls, 8);
    let ck = Checkpoint::from_backbone(&w, 3, 17);
    let bytes = encode_checkpoint(&ck);
    let decoded = decode_checkpoint(&bytes, Path::new("<memory>")).map_err(|e| e.to_string())?;
    let bytes_ok = encode_checkpoint(&decoded) == bytes;
    let back = decoded.into_backbone().map_err(|e| e.to_string())?;
    let params_ok = w
        .params
        .tensors()
        .iter()
        .zip(back.params.tensors())
        .all(|(a, b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let probe = images(&sh.eval[..16]);
    let out_ok = w.classify(&probe).map_err(|e| e.to_string())?.data()
        == back.classify(&probe).map_err(|e| e.to_string())?.data();

    let tok = TokenizerWeights::init(&TokenizerConfig::default(), 4).map_err(|e| e.to_string())?;
    let tb = encode_checkpoint(&Checkpoint::from_tokenizer(&tok, 4, 0));
    let tback = decode_checkpoint(&tb, Path::new("<memory>"))
        .and_then(Checkpoint::into_tokenizer)
        .map_err(|e| e.to_string())?;
    let tok_ok = tback == tok && encode_checkpoint(&Checkpoint::from_tokenizer(&tback, 4, 0)) == tb;
    check(
        patch_ok && bytes_ok && params_ok && out_ok && tok_ok,
        format!(
            "patches {patch_ok}, checkpoint bytes {bytes_ok}, tensors {params_ok}, outputs {out_ok}, tokenizer {tok_ok}"
        ),
    )
}

fn tokenizer_stage(sh: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let cfg = TokenizerConfig::default();
    let tcfg = TokenizerTrainConfig::default();
    let (weights, trace) = train_tokenizer(&images(&sh.train), &cfg, &tcfg).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let step0 = trace[0].recon_mse;
    let held_out = images(&sh.eval);
    let grids = weights.tokenize_batch(&held_out).map_err(|e| e.to_string())?;
    let recon = weights.decode_batch(&grids).map_err(|e| e.to_string())?;
    let mse = mean_mse(&recon, &held_out);
    let used = codebook_usage(&grids, cfg.vocab);
    sh.tokenizer = Some(weights);
    check(
        mse <= 0.5 * step0 && used * 5 >= cfg.vocab && secs < 600.0,
        format!(
            "{} steps, step-0 mse {step0:.4}, held-out mse {mse:.4} ({:.1}%), codebook {used}/{}",
            tcfg.steps,
            100.0 * mse / step0,
            cfg.vocab
        ),
    )
}

fn mim_pretraining(sh: &mut Shared) -> Outcome {
    let tok = sh.tokenizer.as_ref().ok_or("no tokenizer")?;
    let t0 = Instant::now();
    let cfg = PretrainConfig::default();
    let out = pretrain_mim(&images(&sh.train), tok, &BackboneConfig::default(), &cfg).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let loss = series(&out.metrics, "train", "loss");
    let step0 = loss.first().map_or(f64::NAN, |p| p.1);
    let uniform = (tok.config.vocab as f64).ln();
    let eval = evaluate_mim(&out.weights, tok, &images(&sh.eval), &cfg.mask, 1).map_err(|e| e.to_string())?;
    let train_acc = series(&out.metrics, "train", "accuracy");
    let tail: Vec<f64> = train_acc.iter().rev().take(10).map(|p| p.1).collect();
    let train_tail = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    let chance10 = 10.0 / tok.config.vocab as f64;
    sh.pretrained = Some(out.weights);
    check(
        (step0 - uniform).abs() <= 0.1 && eval.accuracy >= chance10 && secs < 1200.0,
        format!(
            "{} steps, step-0 loss {step0:.4} vs ln|V| {uniform:.4}, held-out masked top-1 {:.4} \
             (train last-10 logs {train_tail:.4}, 10x chance {chance10:.4})",
            cfg.steps, eval.accuracy
        ),
    )
}

const FT_TRAIN: usize = 1000;
const FT_SEEDS: [u64; 3] = [0, 1, 2];

fn finetune_advantage(sh: &Shared) -> Outcome {
    let pre = sh.pretrained.as_ref().ok_or("no pre-trained backbone")?;
    let train = &sh.train[..FT_TRAIN];
    let (mut e_pre, mut e_rand, mut f_pre, mut f_rand) = (0.0, 0.0, 0.0, 0.0);
    let mut lines = Vec::new();
    for &seed in &FT_SEEDS {
        let cfg = FinetuneConfig {
            seed,
            ..Default::default()
        };
        let scratch = BackboneWeights::init(&pre.config, 1000 + seed).map_err(|e| e.to_string())?;
        let mut res = Vec::new();
        for init in [pre, &scratch] {
            let out = finetune(init, train, &sh.eval, 8, &cfg).map_err(|e| e.to_string())?;
            let curve = series(&out.metrics, "eval", "accuracy");
            let e90 = epochs_to_fraction(&curve, 0.9).ok_or("empty curve")?;
            res.push((e90, curve.last().map_or(0.0, |p| p.1)));
        }
        e_pre += res[0].0 as f64 / 3.0;
        f_pre += res[0].1 / 3.0;
        e_rand += res[1].0 as f64 / 3.0;
        f_rand += res[1].1 / 3.0;
        lines.push(format!(
            "seed {seed}: pre e90={} final={:.3}, rand e90={} final={:.3}",
            res[0].0, res[0].1, res[1].0, res[1].1
        ));
    }
    check(
        e_pre <= 0.5 * e_rand && f_pre >= f_rand - 0.01,
        format!(
            "mean epochs-to-90% pre {e_pre:.2} vs rand {e_rand:.2}, mean final pre {f_pre:.4} vs rand {f_rand:.4} [{}]",
            lines.join("; ")
        ),
    )
}

fn elbo_consistency(sh: &Shared) -> Outcome {
    let tok = sh.tokenizer.as_ref().ok_or("no tokenizer")?;
    let trained = sh.pretrained.as_ref().ok_or("no pre-trained backbone")?;
    let pcfg = PretrainConfig::default();
    let mut initial = BackboneWeights::init(&BackboneConfig::default(), pcfg.seed).map_err(|e| e.to_string())?;
    initial.attach_head(Head::Mim, tok.config.vocab);
    let ecfg = ElboConfig::default();
    let probe = images(&sh.eval[..ecfg.images]);
    let mut rows = Vec::new();
    let mut ok = true;
    for (name, w) in [("step 0", &initial), ("final", trained)] {
        let r = evaluate_elbo(&probe, tok, w, &pcfg.mask, ecfg.seed).map_err(|e| e.to_string())?;
        let implied = -r.loss_per_token * r.mean_masked;
        let rel = (r.stage2_term - implied).abs() / r.stage2_term.abs().max(1e-12);
        ok &= rel <= 1e-5 && r.stage1_term.is_finite() && r.stage2_term.is_finite();
        rows.push((name, r, rel));
    }
    let improves = rows[1].1.stage2_term > rows[0].1.stage2_term;
    let detail = rows
        .iter()
        .map(|(n, r, rel)| format!("{n}: stage1 {:.2} stage2 {:.3} rel.err {rel:.1e}", r.stage1_term, r.stage2_term))
        .collect::<Vec<_>>()
        .join("; ");
    check(ok && improves, format!("{detail}; stage2 improves {improves}"))
}

fn ablation(sh: &Shared) -> Outcome {
    let tok = sh.tokenizer.as_ref().ok_or("no tokenizer")?;
    let train = &sh.train[..320];
    let eval = &sh.eval[..160];
    let mut cfg = AblationConfig::default();
    cfg.pretrain.steps = 100;
    cfg.pretrain.warmup_steps = 10;
    cfg.classify.epochs = 2;
    cfg.segment.epochs = 2;
    let (rows, _) = run_ablation_suite(&images(train), train, eval, 8, tok, &BackboneConfig::default(), &cfg)
        .map_err(|e| e.to_string())?;
    let table = format_ablation_table(&rows);
    println!("{table}");
    let names: Vec<&str> = rows.iter().map(|r| r.arm.as_str()).collect();
    let expected: Vec<&str> = AblationArm::ALL.iter().map(|a| a.name()).collect();
    let finite = rows
        .iter()
        .all(|r| r.pretrain_loss.is_finite() && r.classify_accuracy.is_finite() && r.segment_miou.is_finite());
    let best = rows
        .iter()
        .max_by(|a, b| a.classify_accuracy.total_cmp(&b.classify_accuracy))
        .map_or("-", |r| r.arm.as_str());
    check(
        names == expected && finite && table.lines().count() == rows.len() + 1,
        format!("{} arms at {} pre-training steps, best classification arm {best}", rows.len(), cfg.pretrain.steps),
    )
}

fn attention(sh: &Shared) -> Outcome {
    let w = sh.pretrained.as_ref().ok_or("no pre-trained backbone")?;
    let image = &sh.eval[0].image;
    let mut worst: f64 = 0.0;
    for layer in 1..=w.config.layers {
        let maps = w.attention_maps(image, layer).map_err(|e| e.to_string())?;
        for r in 0..maps.rows() {
            worst = worst.max((maps.row(r).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let paths = render_attention(w, image, &Reference::All, w.config.layers, dir.path()).map_err(|e| e.to_string())?;
    let mut valid = 0;
    for p in &paths {
        let bytes = fs::read(p).map_err(|e| e.to_string())?;
        if bytes.starts_with(b"P5") && decode_pgm(&bytes).is_ok_and(|(w, h, _)| (w, h) == (32, 32)) {
            valid += 1;
        }
    }
    let expected = w.config.heads * w.config.num_patches();
    check(
        worst <= 1e-5 && valid == expected && paths.len() == expected,
        format!("max |row sum - 1| {worst:.2e}, {valid}/{expected} valid 32x32 P5 maps"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let small: Vec<String> = [
        "data.train_count=96",
        "data.eval_count=32",
        "tokenizer_train.steps=40",
        "pretrain.steps=20",
        "pretrain.batch=16",
        "finetune.epochs=2",
        "ablate.pretrain_steps=4",
        "ablate.finetune_epochs=1",
        "attend.patches=[0,27]",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect();
    let p = |x: &str| d.join(x).display().to_string();
    let tok = format!("inputs.tokenizer={}", p("tok/tokenizer.ckpt"));
    let pre = format!("inputs.backbone={}", p("pre/backbone.ckpt"));
    let ft = format!("inputs.backbone={}", p("ft/backbone.ckpt"));
    let runs: Vec<(&str, &str, Vec<String>)> = vec![
        ("gen-data", "data", vec![]),
        ("train-tokenizer", "tok", vec![]),
        ("pretrain", "pre", vec![tok.clone()]),
        ("finetune", "ft", vec![pre.clone()]),
        ("eval", "eval", vec![ft]),
        ("elbo", "elbo", vec![tok.clone(), pre.clone()]),
        ("ablate", "ablate", vec![tok]),
        ("attend", "attend", vec![pre]),
    ];
    let mut same = Vec::new();
    for (cmd, out, extra) in &runs {
        let mut argv = vec!["mimforge".to_string(), cmd.to_string(), "--out".into(), p(out)];
        argv.extend(small.iter().cloned());
        argv.extend(extra.iter().flat_map(|s| ["--set".to_string(), s.clone()]));
        if run(argv) != 0 {
            return Err(format!("{cmd} failed"));
        }
        let again = format!("{out}-again");
        let argv = [
            "mimforge".to_string(),
            cmd.to_string(),
            "--config".into(),
            p(&format!("{out}/manifest.json")),
            "--out".into(),
            p(&again),
        ];
        if run(argv) != 0 {
            return Err(format!("{cmd} rerun failed"));
        }
        let a = fs::read(d.join(out).join("metrics.csv")).map_err(|e| e.to_string())?;
        let b = fs::read(d.join(&again).join("metrics.csv")).map_err(|e| e.to_string())?;
        same.push((cmd.to_string(), !a.is_empty() && a == b));
    }
    let report = |out: &str| {
        run([
            "mimforge".to_string(),
            "report".into(),
            p("ft/metrics.csv"),
            p("ft-again/metrics.csv"),
            "--out".into(),
            p(out),
        ])
    };
    if report("report") != 0 || report("report-again") != 0 {
        return Err("report failed".into());
    }
    let r = fs::read(d.join("report/convergence.csv")).ok() == fs::read(d.join("report-again/convergence.csv")).ok();
    same.push(("report".into(), r));
    let bad: Vec<&str> = same.iter().filter(|s| !s.1).map(|s| s.0.as_str()).collect();
    check(
        bad.is_empty(),
        format!("{} commands re-run from manifest, differing: {bad:?}", same.len()),
    )
}

fn main() {
    let data = DataConfig::default();
    let mut sh = Shared {
        train: data.load(Split::Train).expect("train split"),
        eval: data.load(Split::Eval).expect("eval split"),
        tokenizer: None,
        pretrained: None,
    };
    let results = [
        report(1, "gradient suite", gradient_suite),
        report(2, "masking statistics", masking),
        report(3, "patch and checkpoint round trips", || round_trips(&sh)),
        report(4, "tokenizer stage 1", || tokenizer_stage(&mut sh)),
        report(5, "MIM pre-training", || mim_pretraining(&mut sh)),
        report(6, "fine-tuning advantage", || finetune_advantage(&sh)),
        report(7, "ELBO consistency", || elbo_consistency(&sh)),
        report(8, "ablation harness", || ablation(&sh)),
        report(9, "attention outputs", || attention(&sh)),
        report(10, "determinism", determinism),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
