//! Shared test fixtures: a finite-difference gradient checker and the list of
//! graphs it is run on.
#![allow(dead_code)]

use mimforge::backbone::{cls_logits, forward_images, mim_logits, BackboneConfig, BackboneWeights, Head, Mode};
use mimforge::data::Image;
use mimforge::masking::MaskSet;
use mimforge::numerics::{Bound, ParamSet, Tape, Tensor, Var};
use mimforge::rng::{normal, substream};
use mimforge::tokenizer::{decoder, encoder, gumbel_noise, gumbel_softmax_var, images_to_nchw, TokenizerConfig, TokenizerWeights};
use mimforge::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = substream(seed, "test-randn", 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(&mut rng)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink or pole there.
pub fn rand_away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    randn(shape, seed).map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

fn scalarize<'a>(tape: &mut Tape<'a, f64>, v: Var) -> Result<Var> {
    let n = tape.value(v).numel();
    if n == 1 {
        return Ok(v);
    }
    let shape = tape.shape(v).to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| (0.7 * i as f64 + 0.3).sin()).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn eval_loss<F>(ps: &ParamSet<f64>, f: &F) -> f64
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &Bound<'a>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape, |_| true);
    let v = f(&mut tape, &p).expect("graph builds");
    let v = scalarize(&mut tape, v).unwrap();
    tape.value(v).item()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every element of every tensor in `ps`. A non-scalar output
/// is reduced with a fixed weighting first.
pub fn max_rel_err<F>(ps: &ParamSet<f64>, f: F) -> f64
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &Bound<'a>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, |_| true);
        let v = f(&mut tape, &p).expect("graph builds");
        let v = scalarize(&mut tape, v).unwrap();
        let mut g = tape.backward(v).unwrap();
        p.collect(&mut g)
    };
    let mut worst = 0.0f64;
    for (ti, a) in analytic.iter().enumerate() {
        assert!(ps.tensors()[ti].numel() <= 64, "{} is too large for the check", ps.names()[ti]);
        for k in 0..a.numel() {
            let mut plus = ps.clone();
            plus.tensors_mut()[ti].data_mut()[k] += FD_STEP;
            let mut minus = ps.clone();
            minus.tensors_mut()[ti].data_mut()[k] -= FD_STEP;
            let fd = (eval_loss(&plus, &f) - eval_loss(&minus, &f)) / (2.0 * FD_STEP);
            let an = a.data()[k];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn set(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    let mut ps = ParamSet::new();
    for (n, t) in entries {
        ps.insert(n, t);
    }
    ps
}

type Case = (&'static str, f64);

fn case<F>(name: &'static str, ps: ParamSet<f64>, f: F) -> Case
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &Bound<'a>) -> Result<Var>,
{
    (name, max_rel_err(&ps, f))
}

pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        channels: 1,
        patch: 4,
        layers: 1,
        dim: 4,
        heads: 2,
        mlp_dim: 8,
        drop_path: 0.3,
        ln_eps: 1e-6,
    }
}

pub fn tiny_images(cfg_size: usize, channels: usize, count: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| {
            let t = randn(&[cfg_size * cfg_size * channels], seed + i as u64);
            let data = t.data().iter().map(|&v| (0.5 + 0.2 * v) as f32).collect();
            Image::new(cfg_size, cfg_size, channels, data).unwrap()
        })
        .collect()
}

/// Every differentiable op plus the end-to-end masked-token loss and the
/// tokenizer objective, as `(name, max relative error)`.
pub fn gradient_suite() -> Vec<Case> {
    let mut out = Vec::new();
    out.push(case("matmul", set(vec![("a", randn(&[3, 4], 1)), ("b", randn(&[4, 5], 2))]), |t, p| {
        t.matmul(p.var("a"), p.var("b"))
    }));
    out.push(case("add", set(vec![("a", randn(&[3, 4], 3)), ("b", randn(&[3, 4], 4))]), |t, p| {
        t.add(p.var("a"), p.var("b"))
    }));
    out.push(case(
        "add_broadcast",
        set(vec![("x", randn(&[6, 4], 5)), ("y", randn(&[2, 4], 6))]),
        |t, p| t.add_broadcast(p.var("x"), p.var("y")),
    ));
    out.push(case(
        "linear",
        set(vec![("x", randn(&[3, 4], 7)), ("w", randn(&[4, 2], 8)), ("b", randn(&[2], 9))]),
        |t, p| t.linear(p.var("x"), p.var("w"), p.var("b")),
    ));
    out.push(case("mul", set(vec![("a", randn(&[2, 5], 10)), ("b", randn(&[2, 5], 11))]), |t, p| {
        t.mul(p.var("a"), p.var("b"))
    }));
    out.push(case("scale", set(vec![("x", randn(&[7], 12))]), |t, p| Ok(t.scale(p.var("x"), -1.7))));
    out.push(case("row_scale", set(vec![("x", randn(&[3, 4], 13))]), |t, p| {
        t.row_scale(p.var("x"), vec![0.0, 1.5, -2.0])
    }));
    out.push(case("softmax_last", set(vec![("x", randn(&[3, 5], 14))]), |t, p| t.softmax(p.var("x"), 1)));
    out.push(case("softmax_first", set(vec![("x", randn(&[4, 3], 15))]), |t, p| t.softmax(p.var("x"), 0)));
    out.push(case(
        "layer_norm",
        set(vec![("x", randn(&[3, 6], 16)), ("g", randn(&[6], 17)), ("b", randn(&[6], 18))]),
        |t, p| t.layer_norm(p.var("x"), p.var("g"), p.var("b"), 1e-6),
    ));
    out.push(case("gelu", set(vec![("x", randn(&[4, 5], 19).map(|v| 2.0 * v))]), |t, p| Ok(t.gelu(p.var("x")))));
    out.push(case("relu", set(vec![("x", rand_away_from_zero(&[4, 5], 20))]), |t, p| Ok(t.relu(p.var("x")))));
    out.push(case("log", set(vec![("x", randn(&[9], 21).map(|v| v.abs() + 0.3))]), |t, p| Ok(t.log(p.var("x")))));
    out.push(case("cross_entropy", set(vec![("x", randn(&[4, 5], 22))]), |t, p| {
        t.cross_entropy(p.var("x"), &[0, 4, 2, 2])
    }));
    out.push(case("cross_entropy_smoothed", set(vec![("x", randn(&[4, 5], 23))]), |t, p| {
        t.cross_entropy_smoothed(p.var("x"), &[1, 3, 0, 4], 0.1)
    }));
    out.push(case("mse", set(vec![("a", randn(&[3, 4], 24)), ("b", randn(&[3, 4], 25))]), |t, p| {
        t.mse(p.var("a"), p.var("b"))
    }));
    out.push(case("sum", set(vec![("x", randn(&[3, 4], 26))]), |t, p| {
        let s = t.sum(p.var("x"));
        let s2 = t.mul(s, s)?;
        Ok(s2)
    }));
    out.push(case("mean", set(vec![("x", randn(&[3, 4], 27))]), |t, p| {
        let m = t.mean(p.var("x"));
        t.mul(m, m)
    }));
    out.push(case("gather_rows", set(vec![("x", randn(&[4, 3], 28))]), |t, p| {
        t.gather_rows(p.var("x"), vec![3, 0, 3, 1])
    }));
    out.push(case("concat_rows", set(vec![("a", randn(&[2, 3], 29)), ("b", randn(&[3, 3], 30))]), |t, p| {
        t.concat_rows(&[p.var("a"), p.var("b"), p.var("a")])
    }));
    out.push(case("mean_row_groups", set(vec![("x", randn(&[6, 3], 31))]), |t, p| t.mean_row_groups(p.var("x"), 3)));
    out.push(case("reshape", set(vec![("x", randn(&[3, 4], 32))]), |t, p| {
        let r = t.reshape(p.var("x"), [2, 6])?;
        t.softmax(r, 1)
    }));
    out.push(case("nchw_to_rows", set(vec![("x", randn(&[2, 3, 2, 2], 33))]), |t, p| t.nchw_to_rows(p.var("x"))));
    out.push(case("rows_to_nchw", set(vec![("x", randn(&[8, 3], 34))]), |t, p| t.rows_to_nchw(p.var("x"), 2, 2, 2)));
    out.push(case("pixel_shuffle", set(vec![("x", randn(&[1, 8, 2, 2], 35))]), |t, p| t.pixel_shuffle(p.var("x"), 2)));
    out.push(case("attention", set(vec![("qkv", randn(&[6, 6], 36))]), |t, p| t.attention(p.var("qkv"), 2, 3, 2)));
    out.push(case(
        "conv2d_same",
        set(vec![("x", randn(&[1, 2, 4, 4], 37)), ("w", randn(&[2, 2, 3, 3], 38)), ("b", randn(&[2], 39))]),
        |t, p| t.conv2d(p.var("x"), p.var("w"), p.var("b"), 1, 1),
    ));
    out.push(case(
        "conv2d_strided",
        set(vec![("x", randn(&[2, 1, 4, 4], 40)), ("w", randn(&[3, 1, 2, 2], 41)), ("b", randn(&[3], 42))]),
        |t, p| t.conv2d(p.var("x"), p.var("w"), p.var("b"), 2, 0),
    ));
    out.push(case("upsample_bilinear_rows", set(vec![("x", randn(&[8, 2], 43))]), |t, p| {
        t.upsample_bilinear_rows(p.var("x"), 2, (2, 2), (5, 3))
    }));
    let noise: Tensor<f64> = gumbel_noise(&[4, 5], &mut substream(44, "noise", 0));
    out.push(case("gumbel_softmax", set(vec![("x", randn(&[4, 5], 45))]), move |t, p| {
        gumbel_softmax_var(t, p.var("x"), noise.clone(), 0.7)
    }));

    let cfg = tiny_backbone();
    let mut w = BackboneWeights::<f64>::init(&cfg, 46).unwrap();
    w.attach_head(Head::Mim, 8);
    for (i, t) in w.params.tensors_mut().iter_mut().enumerate() {
        let r = randn(t.shape(), 100 + i as u64);
        *t = Tensor::new(t.shape().to_vec(), t.data().iter().zip(r.data()).map(|(a, b)| a + 0.3 * b).collect()).unwrap();
    }
    let images = tiny_images(8, 1, 2, 47);
    let masks = vec![MaskSet::new(2, 2, vec![1, 2]).unwrap(), MaskSet::new(2, 2, vec![0]).unwrap()];
    let targets = vec![3, 7, 0];
    out.push(case("end_to_end_mim", w.params.clone(), move |t, p| {
        let mut rng = substream(48, "drop", 0);
        let enc = forward_images(t, p, &cfg, &images, Some(&masks), Mode::Train, Some(&mut rng))?;
        let logits = mim_logits(t, p, &cfg, enc.hidden, &masks)?;
        t.cross_entropy(logits, &targets)
    }));

    let cfg = tiny_backbone();
    let mut w = BackboneWeights::<f64>::init(&cfg, 52).unwrap();
    w.attach_head(Head::Cls, 3);
    for (i, t) in w.params.tensors_mut().iter_mut().enumerate() {
        let r = randn(t.shape(), 200 + i as u64);
        *t = Tensor::new(t.shape().to_vec(), t.data().iter().zip(r.data()).map(|(a, b)| a + 0.3 * b).collect()).unwrap();
    }
    let images = tiny_images(8, 1, 2, 53);
    out.push(case("end_to_end_classify", w.params.clone(), move |t, p| {
        let mut rng = substream(54, "drop", 0);
        let enc = forward_images(t, p, &cfg, &images, None, Mode::Train, Some(&mut rng))?;
        let logits = cls_logits(t, p, &cfg, enc.hidden, 2)?;
        t.cross_entropy_smoothed(logits, &[2, 0], 0.1)
    }));

    let tcfg = TokenizerConfig {
        image_size: 8,
        channels: 1,
        patch: 4,
        vocab: 4,
        hidden: 2,
        width: 2,
        code_dim: 2,
    };
    let tw = TokenizerWeights::init(&tcfg, 49).unwrap();
    let images = tiny_images(8, 1, 1, 50);
    let x: Tensor<f64> = images_to_nchw(&images, &tcfg).unwrap();
    let noise: Tensor<f64> = gumbel_noise(&[4, 4], &mut substream(51, "noise", 0));
    out.push(case("end_to_end_tokenizer", tw.params.cast(), move |t, p| {
        let xv = t.constant(x.clone());
        let logits = encoder(t, p, &tcfg, xv)?;
        let z = gumbel_softmax_var(t, logits, noise.clone(), 0.9)?;
        let recon = decoder(t, p, &tcfg, z, 1)?;
        t.mse(recon, xv)
    }));
    out
}

pub struct Tiny {
    pub train: Vec<mimforge::data::SegExample>,
    pub eval: Vec<mimforge::data::SegExample>,
    pub tokenizer: TokenizerWeights,
    pub backbone: BackboneConfig,
    pub pretrain: mimforge::pipeline::PretrainConfig,
}

impl Tiny {
    pub fn images(&self) -> Vec<Image> {
        self.train.iter().map(|e| e.image.clone()).collect()
    }
}

/// Small shapes setup on 8x8 images with a 4x4 patch grid.
pub fn tiny() -> Tiny {
    use mimforge::data::generate_shapes_dataset;
    use mimforge::masking::BlockMaskConfig;
    use mimforge::pipeline::PretrainConfig;
    use mimforge::tokenizer::{train_tokenizer, TokenizerTrainConfig};

    let train = generate_shapes_dataset(24, 8, 3, 0);
    let eval = generate_shapes_dataset(12, 8, 3, 1);
    let tcfg = TokenizerConfig {
        image_size: 8,
        patch: 2,
        vocab: 8,
        hidden: 4,
        width: 8,
        code_dim: 4,
        ..Default::default()
    };
    let images: Vec<Image> = train.iter().map(|e| e.image.clone()).collect();
    let (tokenizer, _) = train_tokenizer(
        &images,
        &tcfg,
        &TokenizerTrainConfig {
            steps: 30,
            batch: 8,
            warmup_steps: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let backbone = BackboneConfig {
        image_size: 8,
        patch: 2,
        layers: 2,
        dim: 16,
        heads: 2,
        mlp_dim: 32,
        ..Default::default()
    };
    let pretrain = PretrainConfig {
        steps: 20,
        batch: 6,
        warmup_steps: 2,
        log_every: 5,
        mask: BlockMaskConfig {
            min_block: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    Tiny {
        train,
        eval,
        tokenizer,
        backbone,
        pretrain,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaskStats {
    pub draws: usize,
    pub min_masked: usize,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    /// Blocks that are not in-grid rectangles or whose unclipped extent strays
    /// from `s` and the aspect range by more than rounding.
    pub bad_blocks: usize,
}

/// Draws `draws` blockwise masks on the 14x14 grid at ratio 0.4.
pub fn masking_statistics(draws: usize, seed: u64) -> MaskStats {
    use mimforge::masking::{blockwise_mask_blocks, BlockMaskConfig};
    let cfg = BlockMaskConfig::default();
    let (h, w) = (14, 14);
    let mut s = MaskStats {
        draws,
        min_masked: usize::MAX,
        max_ratio: 0.0,
        mean_ratio: 0.0,
        bad_blocks: 0,
    };
    for i in 0..draws {
        let mut rng = substream(seed, "mask-stats", i as u64);
        let (m, blocks) = blockwise_mask_blocks(h, w, &cfg, &mut rng);
        s.min_masked = s.min_masked.min(m.len());
        s.max_ratio = s.max_ratio.max(m.len() as f64 / 196.0);
        s.mean_ratio += m.len() as f64 / 196.0 / draws as f64;
        for b in &blocks {
            let (a, c) = (b.raw_rows as f64, b.raw_cols as f64);
            let sr = (b.s as f64 * b.r).sqrt();
            let s_over_r = (b.s as f64 / b.r).sqrt();
            let in_grid = b.top + b.rows <= h && b.left + b.cols <= w && b.rows >= 1 && b.cols >= 1;
            let clipped = b.rows == b.raw_rows.min(h) && b.cols == b.raw_cols.min(w);
            let aspect_ok = b.r >= cfg.aspect[0] - 1e-12 && b.r <= cfg.aspect[1] + 1e-12;
            let rounding = (a - sr).abs() <= 0.5 && (c - s_over_r).abs() <= 0.5;
            let area_ok = (a * c - b.s as f64).abs() <= 0.5 * (sr + s_over_r) + 0.25;
            if !(in_grid && clipped && aspect_ok && rounding && area_ok) {
                s.bad_blocks += 1;
            }
        }
    }
    s
}
