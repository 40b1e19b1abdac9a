//! Vision Transformer backbone with a prepended special token, learnable 1-D
//! position embeddings, a mask embedding, and the task heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{patchify, Image, PatchGrid};
use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::numerics::{softmax, Bound, Element, LayerGroup, ParamSet, Tape, Tensor, Var};
use crate::rng::{substream, trunc_normal, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Stochastic-depth rate, applied uniformly to every residual branch.
    pub drop_path: f64,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            channels: 3,
            patch: 4,
            layers: 4,
            dim: 128,
            heads: 4,
            mlp_dim: 512,
            drop_path: 0.1,
            ln_eps: 1e-6,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("backbone.image_size", self.image_size),
            ("backbone.channels", self.channels),
            ("backbone.patch", self.patch),
            ("backbone.layers", self.layers),
            ("backbone.dim", self.dim),
            ("backbone.heads", self.heads),
            ("backbone.mlp_dim", self.mlp_dim),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::config(
                "backbone.patch",
                format!("{} does not divide image size {}", self.patch, self.image_size),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(
                "backbone.heads",
                format!("{} heads do not divide hidden size {}", self.heads, self.dim),
            ));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config("backbone.drop_path", "must be in [0, 1)"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("backbone.ln_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the special token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which output head a set of weights carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Mim,
    Pixel,
    Cls,
    Seg,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Mim => "head.mim",
            Head::Pixel => "head.pixel",
            Head::Cls => "head.cls",
            Head::Seg => "head.seg",
        }
    }
}

/// Learning-rate decay group of a backbone parameter.
pub fn layer_group(name: &str) -> LayerGroup {
    if name.starts_with("embed.") {
        LayerGroup::Embedding
    } else if let Some(rest) = name.strip_prefix("blocks.") {
        let l: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
        LayerGroup::Block(l + 1)
    } else {
        LayerGroup::Top
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights<T: Element = f32> {
    pub config: BackboneConfig,
    pub params: ParamSet<T>,
}

fn normal_tensor<T: Element>(shape: &[usize], std: f64, rng: &mut StreamRng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(trunc_normal(rng, std))).collect()).expect("init shape")
}

fn linear_init<T: Element>(ps: &mut ParamSet<T>, name: &str, inp: usize, out: usize, rng: &mut StreamRng) {
    ps.insert(format!("{name}.weight"), normal_tensor(&[inp, out], 0.02, rng));
    ps.insert(format!("{name}.bias"), Tensor::zeros([out]));
}

fn norm_init<T: Element>(ps: &mut ParamSet<T>, name: &str, dim: usize) {
    ps.insert(format!("{name}.weight"), Tensor::ones([dim]));
    ps.insert(format!("{name}.bias"), Tensor::zeros([dim]));
}

impl<T: Element> BackboneWeights<T> {
    /// Truncated-normal (σ = 0.02) projections and embeddings, zero biases,
    /// unit norms. The patch projection is uniform in ±1/sqrt(fan_in) like a
    /// default-initialized convolution. No head is attached.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = substream(seed, "backbone-init", 0);
        let mut ps = ParamSet::new();
        let bound = 1.0 / (c.patch_dim() as f64).sqrt();
        let w = (0..c.patch_dim() * c.dim).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
        ps.insert("embed.patch.weight", Tensor::new([c.patch_dim(), c.dim], w)?);
        ps.insert("embed.patch.bias", Tensor::zeros([c.dim]));
        ps.insert("embed.pos", normal_tensor(&[c.num_patches(), c.dim], 0.02, &mut rng));
        ps.insert("embed.cls", normal_tensor(&[1, c.dim], 0.02, &mut rng));
        ps.insert("embed.mask", normal_tensor(&[1, c.dim], 0.02, &mut rng));
        for l in 0..c.layers {
            let b = format!("blocks.{l}");
            norm_init(&mut ps, &format!("{b}.norm1"), c.dim);
            linear_init(&mut ps, &format!("{b}.attn.qkv"), c.dim, 3 * c.dim, &mut rng);
            linear_init(&mut ps, &format!("{b}.attn.proj"), c.dim, c.dim, &mut rng);
            norm_init(&mut ps, &format!("{b}.norm2"), c.dim);
            linear_init(&mut ps, &format!("{b}.mlp.fc1"), c.dim, c.mlp_dim, &mut rng);
            linear_init(&mut ps, &format!("{b}.mlp.fc2"), c.mlp_dim, c.dim, &mut rng);
        }
        norm_init(&mut ps, "norm", c.dim);
        Ok(BackboneWeights {
            config: config.clone(),
            params: ps,
        })
    }

    /// Attaches a zero-initialized head with `out` outputs, replacing any
    /// existing heads.
    pub fn attach_head(&mut self, head: Head, out: usize) {
        self.params.remove_prefix("head.");
        let p = head.prefix();
        self.params.insert(format!("{p}.weight"), Tensor::zeros([self.config.dim, out]));
        self.params.insert(format!("{p}.bias"), Tensor::zeros([out]));
    }

    /// The attached head and its output count.
    pub fn head(&self) -> Option<(Head, usize)> {
        [Head::Mim, Head::Pixel, Head::Cls, Head::Seg].into_iter().find_map(|h| {
            self.params
                .get(&format!("{}.bias", h.prefix()))
                .map(|b| (h, b.numel()))
        })
    }

    pub fn cast<U: Element>(&self) -> BackboneWeights<U> {
        BackboneWeights {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn bind_eval<'p>(&'p self, tape: &mut Tape<'p, T>) -> Bound<'p> {
        self.params.bind(tape, |_| false)
    }

    /// Embedded sequence `[N+1, D]` for one patch grid.
    pub fn embed_sequence(&self, grid: &PatchGrid, mask: Option<&MaskSet>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind_eval(&mut tape);
        let x = tape.constant(patch_rows(std::slice::from_ref(grid), &self.config)?);
        let masks = mask.map(std::slice::from_ref);
        let seq = embed(&mut tape, &p, &self.config, x, 1, masks)?;
        Ok(tape.value(seq).clone())
    }

    /// Eval-mode transformer over an embedded sequence `[N+1, D]`.
    pub fn encode_eval(&self, seq: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind_eval(&mut tape);
        let x = tape.constant(seq.clone());
        let out = encode(&mut tape, &p, &self.config, x, 1, Mode::Eval, None)?;
        Ok(tape.value(out.hidden).clone())
    }

    /// Eval-mode final hidden states for a batch of images, `[B*(N+1), D]`.
    pub fn hidden_states(&self, images: &[Image]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind_eval(&mut tape);
        let h = forward_images(&mut tape, &p, &self.config, images, None, Mode::Eval, None)?;
        Ok(tape.value(h.hidden).clone())
    }

    /// Class probabilities `[B, classes]` for a batch of images.
    pub fn classify(&self, images: &[Image]) -> Result<Tensor<T>> {
        self.require_head(Head::Cls)?;
        let mut tape = Tape::new();
        let p = self.bind_eval(&mut tape);
        let h = forward_images(&mut tape, &p, &self.config, images, None, Mode::Eval, None)?;
        let logits = cls_logits(&mut tape, &p, &self.config, h.hidden, images.len())?;
        softmax(tape.value(logits), 1)
    }

    /// Per-pixel class logits `[B*H*W, classes]` at `out_dims`.
    pub fn segment(&self, images: &[Image], out_dims: (usize, usize)) -> Result<Tensor<T>> {
        self.require_head(Head::Seg)?;
        let mut tape = Tape::new();
        let p = self.bind_eval(&mut tape);
        let h = forward_images(&mut tape, &p, &self.config, images, None, Mode::Eval, None)?;
        let out = seg_logits(&mut tape, &p, &self.config, h.hidden, images.len(), out_dims)?;
        Ok(tape.value(out).clone())
    }

    /// Post-softmax attention of block `layer` (1-indexed) for one image,
    /// `[heads, N+1, N+1]`.
    pub fn attention_maps(&self, img: &Image, layer: usize) -> Result<Tensor<T>> {
        let c = &self.config;
        if layer == 0 || layer > c.layers {
            return Err(Error::invalid(format!("layer {layer} not in [1, {}]", c.layers)));
        }
        let mut tape = Tape::new();
        let p = self.bind_eval(&mut tape);
        let h = forward_images(&mut tape, &p, c, std::slice::from_ref(img), None, Mode::Eval, None)?;
        let probs = tape
            .attention_probs(h.attention[layer - 1])
            .expect("attention node")
            .to_vec();
        Tensor::new([c.heads, c.seq_len(), c.seq_len()], probs)
    }

    fn require_head(&self, want: Head) -> Result<()> {
        match self.head() {
            Some((h, _)) if h == want => Ok(()),
            found => Err(Error::TaskMismatch {
                requested: format!("{want:?}").to_lowercase(),
                found: found.map_or("none".into(), |(h, _)| format!("{h:?}").to_lowercase()),
            }),
        }
    }
}

/// Stacks patch grids into `[B*N, P*P*C]`, mapping pixels from [0, 1] to [-1, 1].
pub fn patch_rows<T: Element>(grids: &[PatchGrid], cfg: &BackboneConfig) -> Result<Tensor<T>> {
    let (n, d) = (cfg.num_patches(), cfg.patch_dim());
    let mut data = Vec::with_capacity(grids.len() * n * d);
    for g in grids {
        if g.len() != n || g.patch_dim() != d {
            return Err(Error::shape("patch_rows", &[g.len(), g.patch_dim()], &[n, d]));
        }
        data.extend(g.data.iter().map(|&v| T::from_f64(2.0 * v as f64 - 1.0)));
    }
    Tensor::new([grids.len() * n, d], data)
}

pub fn patchify_batch(images: &[Image], cfg: &BackboneConfig) -> Result<Vec<PatchGrid>> {
    images
        .iter()
        .map(|img| {
            if (img.height, img.width, img.channels) != (cfg.image_size, cfg.image_size, cfg.channels) {
                return Err(Error::shape(
                    "backbone input",
                    &[img.height, img.width, img.channels],
                    &[cfg.image_size, cfg.image_size, cfg.channels],
                ));
            }
            patchify(img, cfg.patch)
        })
        .collect()
}

/// Token sequence `[B*(N+1), D]`: the special embedding, then projected
/// patches with masked rows replaced by the mask embedding, plus position
/// embeddings on the patch rows.
pub fn embed<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &BackboneConfig,
    patches: Var,
    batch: usize,
    masks: Option<&[MaskSet]>,
) -> Result<Var> {
    let n = cfg.num_patches();
    if tape.shape(patches) != [batch * n, cfg.patch_dim()] {
        return Err(Error::shape("embed", tape.shape(patches), &[batch * n, cfg.patch_dim()]));
    }
    let mut rows = tape.linear(patches, p.var("embed.patch.weight"), p.var("embed.patch.bias"))?;
    if let Some(masks) = masks {
        if masks.len() != batch {
            return Err(Error::invalid(format!("{} masks for batch of {batch}", masks.len())));
        }
        let mut index = Vec::with_capacity(batch * n);
        for (b, m) in masks.iter().enumerate() {
            if m.num_positions() != n {
                return Err(Error::invalid(format!(
                    "mask over {} positions for {n} patches",
                    m.num_positions()
                )));
            }
            let flags = m.flags();
            index.extend((0..n).map(|i| if flags[i] { 0 } else { 1 + b * n + i }));
        }
        let with_mask = tape.concat_rows(&[p.var("embed.mask"), rows])?;
        rows = tape.gather_rows(with_mask, index)?;
    }
    let rows = tape.add_broadcast(rows, p.var("embed.pos"))?;
    let with_cls = tape.concat_rows(&[p.var("embed.cls"), rows])?;
    let index = (0..batch)
        .flat_map(|b| std::iter::once(0).chain((0..n).map(move |i| 1 + b * n + i)))
        .collect();
    tape.gather_rows(with_cls, index)
}

pub struct Encoded {
    /// Final-norm hidden states `[B*(N+1), D]`.
    pub hidden: Var,
    /// Attention node of each block; see [`Tape::attention_probs`].
    pub attention: Vec<Var>,
}

fn drop_path<T: Element>(
    tape: &mut Tape<'_, T>,
    x: Var,
    batch: usize,
    rate: f64,
    rng: Option<&mut StreamRng>,
) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let seq = tape.shape(x)[0] / batch;
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mut factors = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let f = if rng.gen::<f64>() < rate { T::zero() } else { keep };
        factors.extend(std::iter::repeat(f).take(seq));
    }
    tape.row_scale(x, factors)
}

/// Pre-norm transformer over `x` (`[B*S, D]`), followed by the final norm.
/// Train mode applies stochastic depth with draws from `rng`.
pub fn encode<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &BackboneConfig,
    x: Var,
    batch: usize,
    mode: Mode,
    mut rng: Option<&mut StreamRng>,
) -> Result<Encoded> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || s[1] != cfg.dim || batch == 0 || s[0] % batch != 0 {
        return Err(Error::shape("encode", &s, &[batch, cfg.dim]));
    }
    let seq = s[0] / batch;
    let rate = if mode == Mode::Train { cfg.drop_path } else { 0.0 };
    let mut x = x;
    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let v = |suffix: &str| p.var(&format!("blocks.{l}.{suffix}"));
        let h = tape.layer_norm(x, v("norm1.weight"), v("norm1.bias"), cfg.ln_eps)?;
        let qkv = tape.linear(h, v("attn.qkv.weight"), v("attn.qkv.bias"))?;
        let a = tape.attention(qkv, batch, seq, cfg.heads)?;
        attention.push(a);
        let a = tape.linear(a, v("attn.proj.weight"), v("attn.proj.bias"))?;
        let a = drop_path(tape, a, batch, rate, rng.as_deref_mut())?;
        x = tape.add(x, a)?;

        let h = tape.layer_norm(x, v("norm2.weight"), v("norm2.bias"), cfg.ln_eps)?;
        let h = tape.linear(h, v("mlp.fc1.weight"), v("mlp.fc1.bias"))?;
        let h = tape.gelu(h);
        let h = tape.linear(h, v("mlp.fc2.weight"), v("mlp.fc2.bias"))?;
        let h = drop_path(tape, h, batch, rate, rng.as_deref_mut())?;
        x = tape.add(x, h)?;
    }
    let hidden = tape.layer_norm(x, p.var("norm.weight"), p.var("norm.bias"), cfg.ln_eps)?;
    Ok(Encoded { hidden, attention })
}

/// Patchify, embed (with optional masks), and encode a batch of images.
pub fn forward_images<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &BackboneConfig,
    images: &[Image],
    masks: Option<&[MaskSet]>,
    mode: Mode,
    rng: Option<&mut StreamRng>,
) -> Result<Encoded> {
    let grids = patchify_batch(images, cfg)?;
    let x = tape.constant(patch_rows(&grids, cfg)?);
    let seq = embed(tape, p, cfg, x, images.len(), masks)?;
    encode(tape, p, cfg, seq, images.len(), mode, rng)
}

/// Row indices into `[B*(N+1), D]` of the patch positions `(b, i)` listed
/// per example in `positions`.
pub fn patch_row_index(cfg: &BackboneConfig, positions: &[&[usize]]) -> Result<Vec<usize>> {
    let (n, s) = (cfg.num_patches(), cfg.seq_len());
    let mut index = Vec::new();
    for (b, pos) in positions.iter().enumerate() {
        for &i in pos.iter() {
            if i >= n {
                return Err(Error::invalid(format!("patch position {i} out of range for {n} patches")));
            }
            index.push(b * s + 1 + i);
        }
    }
    Ok(index)
}

/// Head outputs at the given per-example patch positions: `[sum |M|, out]`.
pub fn head_at_positions<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &BackboneConfig,
    hidden: Var,
    head: Head,
    positions: &[&[usize]],
) -> Result<Var> {
    let rows = tape.gather_rows(hidden, patch_row_index(cfg, positions)?)?;
    let pre = head.prefix();
    tape.linear(rows, p.var(&format!("{pre}.weight")), p.var(&format!("{pre}.bias")))
}

/// MIM logits at masked positions, one mask per example.
pub fn mim_logits<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &BackboneConfig,
    hidden: Var,
    masks: &[MaskSet],
) -> Result<Var> {
    let pos: Vec<&[usize]> = masks.iter().map(MaskSet::positions).collect();
    head_at_positions(tape, p, cfg, hidden, Head::Mim, &pos)
}

/// Rows of all patch positions (excluding the special token), `[B*N, D]`.
pub fn patch_hidden<T: Element>(tape: &mut Tape<'_, T>, cfg: &BackboneConfig, hidden: Var, batch: usize) -> Result<Var> {
    let (n, s) = (cfg.num_patches(), cfg.seq_len());
    let index = (0..batch).flat_map(|b| (0..n).map(move |i| b * s + 1 + i)).collect();
    tape.gather_rows(hidden, index)
}

/// Classification logits from mean-pooled patch states, `[B, classes]`.
pub fn cls_logits<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &BackboneConfig,
    hidden: Var,
    batch: usize,
) -> Result<Var> {
    let rows = patch_hidden(tape, cfg, hidden, batch)?;
    let pooled = tape.mean_row_groups(rows, cfg.num_patches())?;
    tape.linear(pooled, p.var("head.cls.weight"), p.var("head.cls.bias"))
}

/// Per-patch linear logits bilinearly upsampled to `out_dims`, `[B*H*W, classes]`.
pub fn seg_logits<T: Element>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &BackboneConfig,
    hidden: Var,
    batch: usize,
    out_dims: (usize, usize),
) -> Result<Var> {
    let g = cfg.grid();
    if out_dims.0 % g != 0 || out_dims.1 % g != 0 {
        return Err(Error::invalid(format!(
            "output {out_dims:?} is not a whole multiple of the {g}x{g} patch grid"
        )));
    }
    let rows = patch_hidden(tape, cfg, hidden, batch)?;
    let logits = tape.linear(rows, p.var("head.seg.weight"), p.var("head.seg.bias"))?;
    tape.upsample_bilinear_rows(logits, batch, (g, g), out_dims)
}

/// Bilinear resize of position embeddings `[h*w, D]` to a new grid.
pub fn interpolate_pos_embed<T: Element>(pos: &Tensor<T>, from: (usize, usize), to: (usize, usize)) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant_ref(pos);
    let y = tape.upsample_bilinear_rows(x, 1, from, to)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_shapes_dataset;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch: 4,
            layers: 2,
            dim: 8,
            heads: 2,
            mlp_dim: 16,
            ..Default::default()
        }
    }

    fn imgs(n: usize, size: usize) -> Vec<Image> {
        generate_shapes_dataset(n, size, 4, 9).into_iter().map(|e| e.image).collect()
    }

    #[test]
    fn groups() {
        assert_eq!(layer_group("embed.pos"), LayerGroup::Embedding);
        assert_eq!(layer_group("blocks.0.attn.qkv.weight"), LayerGroup::Block(1));
        assert_eq!(layer_group("blocks.11.norm1.bias"), LayerGroup::Block(12));
        assert_eq!(layer_group("norm.weight"), LayerGroup::Top);
        assert_eq!(layer_group("head.cls.weight"), LayerGroup::Top);
    }

    #[test]
    fn embedding_contracts() {
        let cfg = tiny();
        let mut w = BackboneWeights::<f64>::init(&cfg, 0).unwrap();
        let grid = patchify(&imgs(1, 8)[0], 4).unwrap();
        w.params.get_mut("embed.patch.weight").unwrap().data_mut().fill(0.0);
        w.params.get_mut("embed.cls").unwrap().data_mut().fill(0.0);
        let seq = w.embed_sequence(&grid, None).unwrap();
        assert_eq!(seq.shape(), &[5, 8]);
        let pos = w.params.get("embed.pos").unwrap();
        assert!(seq.row(0).iter().all(|&v| v == 0.0));
        for i in 0..4 {
            assert_eq!(seq.row(i + 1), pos.row(i));
        }
        let w = BackboneWeights::<f64>::init(&cfg, 0).unwrap();
        let seq = w.embed_sequence(&grid, Some(&MaskSet::all(2, 2))).unwrap();
        let (pos, em) = (w.params.get("embed.pos").unwrap(), w.params.get("embed.mask").unwrap());
        for i in 0..4 {
            for d in 0..8 {
                assert_eq!(seq.row(i + 1)[d], em.data()[d] + pos.row(i)[d]);
            }
        }
        assert_eq!(seq.row(0), w.params.get("embed.cls").unwrap().data());
    }

    #[test]
    fn eval_encode_is_deterministic_and_attention_normalized() {
        let cfg = tiny();
        let w = BackboneWeights::<f32>::init(&cfg, 1).unwrap();
        let img = &imgs(1, 8)[0];
        let seq = w.embed_sequence(&patchify(img, 4).unwrap(), None).unwrap();
        assert_eq!(w.encode_eval(&seq).unwrap(), w.encode_eval(&seq).unwrap());
        let a = w.attention_maps(img, 2).unwrap();
        assert_eq!(a.shape(), &[2, 5, 5]);
        for r in 0..10 {
            assert!((a.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        assert!(w.attention_maps(img, 0).is_err() && w.attention_maps(img, 3).is_err());
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let cfg = BackboneConfig {
            image_size: 8,
            patch: 2,
            ..tiny()
        };
        let mut w = BackboneWeights::<f64>::init(&cfg, 2).unwrap();
        w.params.get_mut("embed.pos").unwrap().data_mut().fill(0.0);
        let grid = patchify(&imgs(1, 8)[0], 2).unwrap();
        let seq = w.embed_sequence(&grid, None).unwrap();
        let n = cfg.num_patches();
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
        let mut pseq = seq.clone();
        for (i, &src) in perm.iter().enumerate() {
            pseq.data_mut()[(i + 1) * 8..(i + 2) * 8].copy_from_slice(seq.row(src + 1));
        }
        let out = w.encode_eval(&seq).unwrap();
        let pout = w.encode_eval(&pseq).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for d in 0..8 {
                assert!((pout.row(i + 1)[d] - out.row(src + 1)[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads() {
        let cfg = tiny();
        let mut w = BackboneWeights::<f32>::init(&cfg, 3).unwrap();
        let batch = imgs(3, 8);
        assert!(matches!(w.classify(&batch), Err(Error::TaskMismatch { .. })));
        w.attach_head(Head::Cls, 5);
        assert_eq!(w.head(), Some((Head::Cls, 5)));
        let probs = w.classify(&batch).unwrap();
        assert!(probs.data().iter().all(|&p| (p - 0.2).abs() < 1e-7));
        w.attach_head(Head::Seg, 3);
        assert_eq!(w.head(), Some((Head::Seg, 3)));
        assert!(!w.params.contains("head.cls.weight"));
        let seg = w.segment(&batch, (8, 8)).unwrap();
        assert_eq!(seg.shape(), &[3 * 64, 3]);
        assert!(w.segment(&batch, (7, 8)).is_err());
    }

    #[test]
    fn mim_head_contracts() {
        let cfg = tiny();
        let mut w = BackboneWeights::<f64>::init(&cfg, 4).unwrap();
        w.attach_head(Head::Mim, 6);
        let masks = vec![MaskSet::new(2, 2, vec![1, 3]).unwrap(), MaskSet::new(2, 2, vec![0]).unwrap()];
        let batch = imgs(2, 8);
        let mut tape = Tape::new();
        let p = w.params.bind(&mut tape, |_| false);
        let h = forward_images(&mut tape, &p, &cfg, &batch, Some(&masks), Mode::Eval, None).unwrap();
        let logits = mim_logits(&mut tape, &p, &cfg, h.hidden, &masks).unwrap();
        assert_eq!(tape.value(logits).shape(), &[3, 6]);
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
        let loss = tape.cross_entropy(logits, &[0, 1, 2]).unwrap();
        assert!((tape.value(loss).item() - 6f64.ln()).abs() < 1e-12);
        drop(p);

        w.params.get_mut("head.mim.bias").unwrap().data_mut()[5] = 10.0;
        let mut tape = Tape::new();
        let p = w.params.bind(&mut tape, |_| false);
        let h = forward_images(&mut tape, &p, &cfg, &batch, Some(&masks), Mode::Eval, None).unwrap();
        let logits = mim_logits(&mut tape, &p, &cfg, h.hidden, &masks).unwrap();
        assert_eq!(crate::tokenizer::argmax_rows(tape.value(logits)), vec![5, 5, 5]);
        assert!(patch_row_index(&cfg, &[&[4]]).is_err());
    }

    #[test]
    fn pos_embed_interpolation_identity() {
        let pos = Tensor::<f64>::from_f64([4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        assert_eq!(interpolate_pos_embed(&pos, (2, 2), (2, 2)).unwrap(), pos);
        assert_eq!(interpolate_pos_embed(&pos, (2, 2), (4, 4)).unwrap().shape(), &[16, 2]);
    }
}
