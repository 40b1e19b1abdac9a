//! Discrete VAE image tokenizer: a strided conv encoder producing per-cell
//! logits over the codebook, a Gumbel-softmax relaxation for training, and a
//! conv decoder reconstructing pixels from code embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::numerics::{
    adam_step, clip_global_norm, softmax, AdamConfig, AdamState, Bound, Element, LrSchedule, ParamSet, Tape,
    Tensor, Var,
};
use crate::rng::{gumbel, substream, trunc_normal, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Pixels per token cell side; must equal the backbone patch size.
    pub patch: usize,
    pub vocab: usize,
    /// Channels of the full-resolution conv layers.
    pub hidden: usize,
    /// Channels of the grid-resolution conv layers.
    pub width: usize,
    pub code_dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            image_size: 32,
            channels: 3,
            patch: 4,
            vocab: 128,
            hidden: 16,
            width: 64,
            code_dim: 64,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tokenizer.image_size", self.image_size),
            ("tokenizer.channels", self.channels),
            ("tokenizer.patch", self.patch),
            ("tokenizer.hidden", self.hidden),
            ("tokenizer.width", self.width),
            ("tokenizer.code_dim", self.code_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.vocab < 2 {
            return Err(Error::config("tokenizer.vocab", "codebook needs at least 2 entries"));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::config(
                "tokenizer.patch",
                format!("{} does not divide image size {}", self.patch, self.image_size),
            ));
        }
        Ok(())
    }

    /// Token grid side length.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }
}

/// Exponential annealing from `start` to `end` over `anneal_steps`, then flat.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            start: 1.0,
            end: 0.0625,
            anneal_steps: 2000,
        }
    }
}

impl TemperatureSchedule {
    pub fn tau_at(&self, step: usize) -> f64 {
        let t = if self.anneal_steps == 0 {
            1.0
        } else {
            (step as f64 / self.anneal_steps as f64).min(1.0)
        };
        self.start * (self.end / self.start).powf(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.end > 0.0 && self.start >= self.end) {
            return Err(Error::config(
                "tokenizer_train.temperature",
                format!("need start ({}) >= end ({}) > 0", self.start, self.end),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    /// Weight of KL(mean soft assignment || uniform).
    pub kl_weight: f64,
    /// Fraction of steps over which the KL weight ramps up linearly.
    pub kl_ramp: f64,
    pub temperature: TemperatureSchedule,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        TokenizerTrainConfig {
            steps: 2000,
            batch: 16,
            peak_lr: 2e-3,
            min_lr: 1e-5,
            warmup_steps: 100,
            adam: AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            clip_norm: Some(3.0),
            kl_weight: 0.01,
            kl_ramp: 0.1,
            temperature: TemperatureSchedule::default(),
            seed: 0,
        }
    }
}

impl TokenizerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("tokenizer_train.batch", "must be positive"));
        }
        if self.kl_weight < 0.0 || !(0.0..=1.0).contains(&self.kl_ramp) {
            return Err(Error::config("tokenizer_train.kl_weight", "weight must be >= 0 and ramp in [0, 1]"));
        }
        self.temperature.validate()?;
        if self.steps > 0 {
            self.schedule()
                .map_err(|e| Error::config("tokenizer_train.peak_lr", e.to_string()))?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.peak_lr, self.min_lr, self.warmup_steps.min(self.steps.saturating_sub(1)), self.steps)
    }

    fn kl_weight_at(&self, step: usize) -> f64 {
        let ramp = self.kl_ramp * self.steps as f64;
        if ramp <= 0.0 {
            self.kl_weight
        } else {
            self.kl_weight * (step as f64 / ramp).min(1.0)
        }
    }
}

/// Per-cell token indices on the `h x w` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerWeights {
    pub config: TokenizerConfig,
    pub params: ParamSet,
}

fn conv_init(ps: &mut ParamSet, name: &str, out: usize, inp: usize, k: usize, rng: &mut StreamRng) {
    let fan_in = (inp * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let w = (0..out * inp * k * k).map(|_| trunc_normal(rng, std) as f32).collect();
    ps.insert(format!("{name}.weight"), Tensor::new([out, inp, k, k], w).expect("conv shape"));
    ps.insert(format!("{name}.bias"), Tensor::zeros([out]));
}

impl TokenizerWeights {
    pub fn init(config: &TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = substream(seed, "tokenizer-init", 0);
        let mut ps = ParamSet::new();
        conv_init(&mut ps, "enc.conv1", c.hidden, c.channels, 3, &mut rng);
        conv_init(&mut ps, "enc.conv2", c.width, c.hidden, c.patch, &mut rng);
        conv_init(&mut ps, "enc.conv3", c.vocab, c.width, 1, &mut rng);
        let cb = (0..c.vocab * c.code_dim)
            .map(|_| trunc_normal(&mut rng, 1.0) as f32)
            .collect();
        ps.insert("codebook", Tensor::new([c.vocab, c.code_dim], cb)?);
        conv_init(&mut ps, "dec.conv1", c.width, c.code_dim, 3, &mut rng);
        conv_init(&mut ps, "dec.conv2", c.hidden * c.patch * c.patch, c.width, 1, &mut rng);
        conv_init(&mut ps, "dec.conv3", c.channels, c.hidden, 3, &mut rng);
        Ok(TokenizerWeights {
            config: config.clone(),
            params: ps,
        })
    }

    /// Logits for one image as `[h_t, w_t, V]`.
    pub fn encode_logits(&self, img: &Image) -> Result<Tensor> {
        let g = self.config.grid();
        self.encode_logits_batch(std::slice::from_ref(img))?
            .reshape([g, g, self.config.vocab])
    }

    /// Logits for a batch as `[B * cells, V]`, cells in row-major grid order.
    pub fn encode_logits_batch(&self, images: &[Image]) -> Result<Tensor> {
        let x = images_to_nchw::<f32>(images, &self.config)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let xv = tape.constant(x);
        let logits = encoder(&mut tape, &p, &self.config, xv)?;
        Ok(tape.value(logits).clone())
    }

    pub fn tokenize(&self, img: &Image) -> Result<TokenGrid> {
        Ok(self.tokenize_batch(std::slice::from_ref(img))?.remove(0))
    }

    pub fn tokenize_batch(&self, images: &[Image]) -> Result<Vec<TokenGrid>> {
        let g = self.config.grid();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let logits = self.encode_logits_batch(chunk)?;
            let tokens = argmax_rows(&logits);
            out.extend(tokens.chunks(g * g).map(|t| TokenGrid {
                h: g,
                w: g,
                tokens: t.to_vec(),
            }));
        }
        Ok(out)
    }

    /// Decodes soft codes `[cells, V]` (rows of a relaxed one-hot) into an image.
    pub fn decode_soft(&self, codes: &Tensor) -> Result<Image> {
        let g = self.config.grid();
        if codes.shape() != [g * g, self.config.vocab] {
            return Err(Error::shape("decode", codes.shape(), &[g * g, self.config.vocab]));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let z = tape.constant(codes.clone());
        let out = decoder(&mut tape, &p, &self.config, z, 1)?;
        let c = &self.config;
        Image::from_chw(c.image_size, c.image_size, c.channels, tape.value(out).data())
    }

    /// Decodes a token grid through the same path as an exact one-hot code.
    pub fn decode(&self, tokens: &TokenGrid) -> Result<Image> {
        let g = self.config.grid();
        if (tokens.h, tokens.w) != (g, g) || tokens.tokens.len() != g * g {
            return Err(Error::shape("decode", &[tokens.h, tokens.w], &[g, g]));
        }
        self.decode_soft(&one_hot(&tokens.tokens, self.config.vocab)?)
    }

    /// Decodes a batch of token grids.
    pub fn decode_batch(&self, grids: &[TokenGrid]) -> Result<Vec<Image>> {
        grids.iter().map(|t| self.decode(t)).collect()
    }
}

pub fn one_hot<T: Element>(tokens: &[usize], vocab: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros([tokens.len(), vocab]);
    for (i, &k) in tokens.iter().enumerate() {
        if k >= vocab {
            return Err(Error::TargetOutOfRange { index: k, classes: vocab });
        }
        t.data_mut()[i * vocab + k] = T::one();
    }
    Ok(t)
}

/// Per-row argmax; ties resolve to the lowest index.
pub fn argmax_rows<T: Element>(x: &Tensor<T>) -> Vec<usize> {
    (0..x.rows())
        .map(|r| {
            x.row(r)
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Stacks images into an NCHW tensor, checking them against the config.
pub fn images_to_nchw<T: Element>(images: &[Image], cfg: &TokenizerConfig) -> Result<Tensor<T>> {
    let s = cfg.image_size;
    let mut data = Vec::with_capacity(images.len() * s * s * cfg.channels);
    for img in images {
        if (img.height, img.width, img.channels) != (s, s, cfg.channels) {
            return Err(Error::shape(
                "tokenizer input",
                &[img.height, img.width, img.channels],
                &[s, s, cfg.channels],
            ));
        }
        data.extend(img.to_chw().into_iter().map(|v| T::from_f64(v as f64)));
    }
    Tensor::new([images.len(), cfg.channels, s, s], data)
}

/// Encoder graph: NCHW pixels to `[B * cells, V]` logits.
pub fn encoder<T: Element>(tape: &mut Tape<'_, T>, p: &Bound, cfg: &TokenizerConfig, x: Var) -> Result<Var> {
    let h = tape.conv2d(x, p.var("enc.conv1.weight"), p.var("enc.conv1.bias"), 1, 1)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, p.var("enc.conv2.weight"), p.var("enc.conv2.bias"), cfg.patch, 0)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, p.var("enc.conv3.weight"), p.var("enc.conv3.bias"), 1, 0)?;
    tape.nchw_to_rows(h)
}

/// Decoder graph: codes `[B * cells, V]` to NCHW pixels.
pub fn decoder<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &TokenizerConfig,
    codes: Var,
    batch: usize,
) -> Result<Var> {
    let g = cfg.grid();
    let e = tape.matmul(codes, p.var("codebook"))?;
    let h = tape.rows_to_nchw(e, batch, g, g)?;
    let h = tape.conv2d(h, p.var("dec.conv1.weight"), p.var("dec.conv1.bias"), 1, 1)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, p.var("dec.conv2.weight"), p.var("dec.conv2.bias"), 1, 0)?;
    let h = tape.pixel_shuffle(h, cfg.patch)?;
    let h = tape.relu(h);
    tape.conv2d(h, p.var("dec.conv3.weight"), p.var("dec.conv3.bias"), 1, 1)
}

/// `softmax((logits + noise) / tau)` over the last axis, recorded on `tape`.
pub fn gumbel_softmax_var<T: Element>(tape: &mut Tape<'_, T>, logits: Var, noise: Tensor<T>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let axis = tape.shape(logits).len() - 1;
    let g = tape.constant(noise);
    let y = tape.add(logits, g)?;
    let y = tape.scale(y, 1.0 / tau);
    tape.softmax(y, axis)
}

pub fn gumbel_noise<T: Element, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(gumbel(rng))).collect()).expect("noise shape")
}

/// Relaxed one-hot sample over the last axis of `logits`.
pub fn gumbel_softmax<T: Element, R: Rng + ?Sized>(logits: &Tensor<T>, tau: f64, rng: &mut R) -> Result<Tensor<T>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let noise: Tensor<T> = gumbel_noise(logits.shape(), rng);
    let inv = T::from_f64(1.0 / tau);
    let y = Tensor::new(
        logits.shape().to_vec(),
        logits.data().iter().zip(noise.data()).map(|(&l, &g)| (l + g) * inv).collect(),
    )?;
    softmax(&y, logits.ndim().saturating_sub(1))
}

/// One logged tokenizer training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerStep {
    pub step: usize,
    pub loss: f64,
    pub recon_mse: f64,
    /// KL(mean soft assignment || uniform), in nats.
    pub kl: f64,
    pub tau: f64,
    pub lr: f64,
}

/// Batch of dataset indices for `step`, drawn with replacement.
fn batch_indices(n: usize, batch: usize, rng: &mut StreamRng) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// Stage-1 training: reconstruction MSE through the Gumbel-softmax relaxation
/// plus a weighted KL between the batch-mean code assignment and uniform.
pub fn train_tokenizer(
    dataset: &[Image],
    cfg: &TokenizerConfig,
    train: &TokenizerTrainConfig,
) -> Result<(TokenizerWeights, Vec<TokenizerStep>)> {
    let init = TokenizerWeights::init(cfg, train.seed)?;
    train_tokenizer_from(init, dataset, train)
}

/// Continues training from existing weights.
pub fn train_tokenizer_from(
    mut weights: TokenizerWeights,
    dataset: &[Image],
    train: &TokenizerTrainConfig,
) -> Result<(TokenizerWeights, Vec<TokenizerStep>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("tokenizer training needs a non-empty dataset"));
    }
    train.validate()?;
    let cfg = weights.config.clone();
    let sched = if train.steps > 0 { Some(train.schedule()?) } else { None };
    let mut state = AdamState::new(weights.params.tensors());
    let mut trace = Vec::with_capacity(train.steps);
    let ln_v = (cfg.vocab as f64).ln();
    for step in 0..train.steps {
        let mut rng = substream(train.seed, "tokenizer-step", step as u64);
        let idx = batch_indices(dataset.len(), train.batch, &mut rng);
        let images: Vec<Image> = idx.iter().map(|&i| dataset[i].clone()).collect();
        let x = images_to_nchw::<f32>(&images, &cfg)?;
        let cells = cfg.grid() * cfg.grid() * images.len();
        let noise = gumbel_noise::<f32, _>(&[cells, cfg.vocab], &mut rng);
        let tau = train.temperature.tau_at(step);
        let kl_w = train.kl_weight_at(step);

        let mut tape = Tape::new();
        let p = weights.params.bind(&mut tape, |_| true);
        let xv = tape.constant(x);
        let logits = encoder(&mut tape, &p, &cfg, xv)?;
        let z = gumbel_softmax_var(&mut tape, logits, noise, tau)?;
        let recon = decoder(&mut tape, &p, &cfg, z, images.len())?;
        let mse = tape.mse(recon, xv)?;
        let q = tape.softmax(logits, 1)?;
        let qbar = tape.mean_row_groups(q, cells)?;
        let lq = tape.log(qbar);
        let plq = tape.mul(qbar, lq)?;
        let neg_entropy = tape.sum(plq);
        let kl_term = tape.scale(neg_entropy, kl_w);
        let loss = tape.add(mse, kl_term)?;

        let loss_v = tape.value(loss).item().as_f64() + kl_w * ln_v;
        let mse_v = tape.value(mse).item().as_f64();
        let kl_v = tape.value(neg_entropy).item().as_f64() + ln_v;
        if !loss_v.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("tokenizer loss {loss_v} (recon {mse_v}, kl {kl_v})"),
            });
        }
        let lr = sched.as_ref().map_or(0.0, |s| s.lr_at(step));
        trace.push(TokenizerStep {
            step,
            loss: loss_v,
            recon_mse: mse_v,
            kl: kl_v,
            tau,
            lr,
        });
        let mut grads = tape.backward(loss)?;
        let mut g = p.collect(&mut grads);
        drop(p);
        if let Some(max) = train.clip_norm {
            clip_global_norm(&mut g, max);
        }
        adam_step(weights.params.tensors_mut(), &g, &mut state, lr, &train.adam, &[]).map_err(|e| {
            Error::Diverged {
                step,
                what: e.to_string(),
            }
        })?;
    }
    Ok((weights, trace))
}

/// Mean per-element squared error between two equally sized image lists.
pub fn mean_mse(a: &[Image], b: &[Image]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (&u, &v) in x.data.iter().zip(&y.data) {
            s += ((u - v) as f64).powi(2);
        }
        n += x.data.len();
    }
    s / n.max(1) as f64
}

/// Number of distinct codes used across `grids`.
pub fn codebook_usage(grids: &[TokenGrid], vocab: usize) -> usize {
    let mut seen = vec![false; vocab];
    for g in grids {
        for &t in &g.tokens {
            seen[t] = true;
        }
    }
    seen.iter().filter(|&&s| s).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_shapes_dataset;

    fn small() -> TokenizerConfig {
        TokenizerConfig {
            image_size: 8,
            patch: 4,
            vocab: 6,
            hidden: 4,
            width: 8,
            code_dim: 5,
            ..Default::default()
        }
    }

    fn images(n: usize, size: usize) -> Vec<Image> {
        generate_shapes_dataset(n, size, 4, 2).into_iter().map(|e| e.image).collect()
    }

    #[test]
    fn grid_alignment_and_zero_head() {
        let mut w = TokenizerWeights::init(&TokenizerConfig::default(), 0).unwrap();
        let img = &images(1, 32)[0];
        assert_eq!(w.encode_logits(img).unwrap().shape(), &[8, 8, 128]);
        w.params.get_mut("enc.conv3.weight").unwrap().data_mut().fill(0.0);
        let logits = w.encode_logits(img).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let t = w.tokenize(img).unwrap();
        assert_eq!((t.h, t.w), (8, 8));
        assert!(t.tokens.iter().all(|&k| k == 0));
    }

    #[test]
    fn encode_is_deterministic_and_rejects_bad_dims() {
        let w = TokenizerWeights::init(&small(), 3).unwrap();
        let img = &images(1, 8)[0];
        assert_eq!(w.encode_logits(img).unwrap(), w.encode_logits(img).unwrap());
        assert!(w.encode_logits(&images(1, 16)[0]).is_err());
    }

    #[test]
    fn argmax_ties_and_stability() {
        let x = Tensor::<f32>::from_f64([2, 3], &[1., 3., 3., 0.5, 0.2, 0.1]).unwrap();
        assert_eq!(argmax_rows(&x), vec![1, 0]);
        let y = Tensor::<f32>::from_f64([2, 3], &[1.9, 3., 3., 0.5, 0.49, 0.1]).unwrap();
        assert_eq!(argmax_rows(&y), vec![1, 0]);
    }

    #[test]
    fn gumbel_softmax_limits() {
        let mut rng = substream(0, "g", 0);
        let l = Tensor::<f64>::from_f64([4, 5], &(0..20).map(|i| (i % 7) as f64 * 0.3).collect::<Vec<_>>()).unwrap();
        let y = gumbel_softmax(&l, 0.7, &mut rng).unwrap();
        for r in 0..4 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let sharp = gumbel_softmax(&l, 1e-4, &mut rng).unwrap();
        for r in 0..4 {
            assert!(sharp.row(r).iter().cloned().fold(0.0, f64::max) > 0.999);
        }
        let mut tape = Tape::<f64>::new();
        let lv = tape.constant(Tensor::zeros([1, 2]));
        let y = gumbel_softmax_var(&mut tape, lv, Tensor::zeros([1, 2]), 1.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gumbel_max_frequencies_match_softmax() {
        let l = Tensor::<f64>::from_f64([1, 3], &[0.0, 1.0, -0.5]).unwrap();
        let p = softmax(&l, 1).unwrap();
        let mut rng = substream(5, "g", 0);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[argmax_rows(&gumbel_softmax(&l, 1.0, &mut rng).unwrap())[0]] += 1;
        }
        for k in 0..3 {
            assert!((counts[k] as f64 / n as f64 - p.data()[k]).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn hard_and_soft_decode_agree() {
        let w = TokenizerWeights::init(&small(), 1).unwrap();
        let grid = TokenGrid {
            h: 2,
            w: 2,
            tokens: vec![0, 5, 2, 2],
        };
        let soft = w.decode_soft(&one_hot(&grid.tokens, 6).unwrap()).unwrap();
        let hard = w.decode(&grid).unwrap();
        assert_eq!(soft, hard);
        assert_eq!((hard.height, hard.width, hard.channels), (8, 8, 3));
        assert!(w.decode(&TokenGrid { h: 1, w: 4, tokens: vec![0; 4] }).is_err());
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged_and_runs_are_reproducible() {
        let data = images(8, 8);
        let train = TokenizerTrainConfig {
            steps: 5,
            batch: 2,
            peak_lr: 0.0,
            min_lr: 0.0,
            warmup_steps: 1,
            ..Default::default()
        };
        let (w, trace) = train_tokenizer(&data, &small(), &train).unwrap();
        assert_eq!(w, TokenizerWeights::init(&small(), 0).unwrap());
        assert_eq!(trace.len(), 5);

        let train = TokenizerTrainConfig {
            peak_lr: 1e-3,
            ..train
        };
        let a = train_tokenizer(&data, &small(), &train).unwrap();
        let b = train_tokenizer(&data, &small(), &train).unwrap();
        assert_eq!(a.1, b.1);
        assert_ne!(a.0, w);
    }

    #[test]
    fn temperature_anneals_exponentially() {
        let t = TemperatureSchedule::default();
        assert_eq!(t.tau_at(0), 1.0);
        assert!((t.tau_at(1000) - 0.25).abs() < 1e-12);
        assert!((t.tau_at(5000) - 0.0625).abs() < 1e-12);
    }
}
