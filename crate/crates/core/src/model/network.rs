//! Parameters, forward pass and hand-written backward pass of the segmentation model.

use image::RgbImage;
use ndarray::{concatenate, s, Array2, Array3, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{fan_in_bound, uniform_matrix, Activation, Attention, AttentionCache, Linear};
use super::loss::{loss_and_grad, sigmoid, LossBreakdown};
use super::text::Vocab;
use super::{ModelConfig, ModelError, TrainConfig};
use crate::raster::MaskBitmap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    ImageTokens,
    TextTokens,
    Queries,
    Joint,
    Embeddings,
}

/// Non-empty matrix of finite row vectors, tagged with what the rows represent.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
    role: FeatureRole,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>, role: FeatureRole) -> Result<Self, ModelError> {
        if data.is_empty() {
            return Err(ModelError::ShapeMismatch(format!("empty {role:?} matrix {:?}", data.dim())));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite(format!("{role:?}")));
        }
        Ok(Self { data, role })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn role(&self) -> FeatureRole {
        self.role
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }
}

/// `H' x W' x d` feature grid stored row-major as an `(H' W') x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatureMap {
    grid_h: usize,
    grid_w: usize,
    data: Array2<f64>,
}

impl PixelFeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, data: Array2<f64>) -> Result<Self, ModelError> {
        if grid_h * grid_w != data.nrows() || data.is_empty() {
            return Err(ModelError::ShapeMismatch(format!(
                "{grid_h}x{grid_w} grid vs {} rows",
                data.nrows()
            )));
        }
        Ok(Self { grid_h, grid_w, data })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn at(&self, y: usize, x: usize) -> ArrayView1<'_, f64> {
        self.data.row(y * self.grid_w + x)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }
}

/// All learnable weights: stub encoders, queries, joint interaction block and projectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub patch_embed: Linear,
    pub token_embed: Array2<f64>,
    pub position_embed: Array2<f64>,
    pub queries: Array2<f64>,
    pub cross_attn: Attention,
    pub self_attn: Attention,
    pub ffn: [Linear; 2],
    pub mask_proj: [Linear; 3],
    pub class_proj: Linear,
}

fn push_linear<'a>(out: &mut Vec<(String, ArrayViewD<'a, f64>)>, name: &str, l: &'a Linear) {
    out.push((format!("{name}.weight"), l.weight.view().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view().into_dyn()));
}

fn push_linear_mut<'a>(out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>, name: &str, l: &'a mut Linear) {
    out.push((format!("{name}.weight"), l.weight.view_mut().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view_mut().into_dyn()));
}

fn push_attention<'a>(out: &mut Vec<(String, ArrayViewD<'a, f64>)>, name: &str, a: &'a Attention) {
    for (kind, mats) in [("query", &a.query), ("key", &a.key), ("value", &a.value)] {
        for (i, m) in mats.iter().enumerate() {
            out.push((format!("{name}.{kind}.{i}"), m.view().into_dyn()));
        }
    }
    out.push((format!("{name}.output"), a.output.view().into_dyn()));
}

fn push_attention_mut<'a>(out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>, name: &str, a: &'a mut Attention) {
    for (kind, mats) in [("query", &mut a.query), ("key", &mut a.key), ("value", &mut a.value)] {
        for (i, m) in mats.iter_mut().enumerate() {
            out.push((format!("{name}.{kind}.{i}"), m.view_mut().into_dyn()));
        }
    }
    out.push((format!("{name}.output"), a.output.view_mut().into_dyn()));
}

impl ModelParams {
    pub fn init(config: &ModelConfig, vocab_len: usize, rng: &mut impl Rng) -> Self {
        let d = config.dim;
        let p = config.patch_size;
        let emb_bound = fan_in_bound(d);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let patch_embed = Linear::init(rng, p * p * 3, d);
        let token_embed = uniform_matrix(rng, vocab_len, d, emb_bound);
        let position_embed = uniform_matrix(rng, config.max_len, d, emb_bound);
        let queries = Array2::from_shape_fn((config.queries, d), |_| normal.sample(rng));
        let cross_attn = Attention::init(rng, d, config.heads, config.head_dim);
        let self_attn = Attention::init(rng, d, config.heads, config.head_dim);
        let ffn = [Linear::init(rng, d, config.ffn_hidden), Linear::init(rng, config.ffn_hidden, d)];
        let mask_proj = [Linear::init(rng, d, d), Linear::init(rng, d, d), Linear::init(rng, d, d)];
        let class_proj = Linear::init(rng, d, d);
        Self {
            patch_embed,
            token_embed,
            position_embed,
            queries,
            cross_attn,
            self_attn,
            ffn,
            mask_proj,
            class_proj,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            patch_embed: self.patch_embed.zeros_like(),
            token_embed: Array2::zeros(self.token_embed.raw_dim()),
            position_embed: Array2::zeros(self.position_embed.raw_dim()),
            queries: Array2::zeros(self.queries.raw_dim()),
            cross_attn: self.cross_attn.zeros_like(),
            self_attn: self.self_attn.zeros_like(),
            ffn: [self.ffn[0].zeros_like(), self.ffn[1].zeros_like()],
            mask_proj: [
                self.mask_proj[0].zeros_like(),
                self.mask_proj[1].zeros_like(),
                self.mask_proj[2].zeros_like(),
            ],
            class_proj: self.class_proj.zeros_like(),
        }
    }

    /// Every parameter tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        push_linear(&mut out, "patch_embed", &self.patch_embed);
        out.push(("token_embed".into(), self.token_embed.view().into_dyn()));
        out.push(("position_embed".into(), self.position_embed.view().into_dyn()));
        out.push(("queries".into(), self.queries.view().into_dyn()));
        push_attention(&mut out, "cross_attn", &self.cross_attn);
        push_attention(&mut out, "self_attn", &self.self_attn);
        for (i, l) in self.ffn.iter().enumerate() {
            push_linear(&mut out, &format!("ffn.{i}"), l);
        }
        for (i, l) in self.mask_proj.iter().enumerate() {
            push_linear(&mut out, &format!("mask_proj.{i}"), l);
        }
        push_linear(&mut out, "class_proj", &self.class_proj);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        push_linear_mut(&mut out, "patch_embed", &mut self.patch_embed);
        out.push(("token_embed".into(), self.token_embed.view_mut().into_dyn()));
        out.push(("position_embed".into(), self.position_embed.view_mut().into_dyn()));
        out.push(("queries".into(), self.queries.view_mut().into_dyn()));
        push_attention_mut(&mut out, "cross_attn", &mut self.cross_attn);
        push_attention_mut(&mut out, "self_attn", &mut self.self_attn);
        for (i, l) in self.ffn.iter_mut().enumerate() {
            push_linear_mut(&mut out, &format!("ffn.{i}"), l);
        }
        for (i, l) in self.mask_proj.iter_mut().enumerate() {
            push_linear_mut(&mut out, &format!("mask_proj.{i}"), l);
        }
        push_linear_mut(&mut out, "class_proj", &mut self.class_proj);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Checks every tensor shape against the configuration and vocabulary size.
    pub fn validate(&self, config: &ModelConfig, vocab_len: usize) -> Result<(), ModelError> {
        let reference = ModelParams::init(config, vocab_len, &mut ChaCha8Rng::seed_from_u64(0));
        for ((name, got), (_, want)) in self.tensors().iter().zip(reference.tensors()) {
            if got.shape() != want.shape() {
                return Err(ModelError::ShapeMismatch(format!(
                    "{name}: {:?} vs expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        if self.tensors().len() != reference.tensors().len() {
            return Err(ModelError::ShapeMismatch("head count differs from config".into()));
        }
        if !self.is_finite() {
            return Err(ModelError::NonFinite("parameters".into()));
        }
        Ok(())
    }
}

/// Maps 8-bit RGB to `[-1, 1]`, shape `H x W x 3`.
pub fn image_tensor(image: &RgbImage) -> Array3<f64> {
    let (w, h) = image.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        (image.get_pixel(x as u32, y as u32)[c] as f64 / 255.0 - 0.5) * 2.0
    })
}

/// Flattens non-overlapping `p x p` patches into rows, row-major over the patch grid.
pub(crate) fn patchify(tensor: &Array3<f64>, p: usize) -> Result<(Array2<f64>, (usize, usize)), ModelError> {
    let (h, w, ch) = tensor.dim();
    if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
        return Err(ModelError::IndivisibleDims(h, w, p));
    }
    let (gh, gw) = (h / p, w / p);
    let out = Array2::from_shape_fn((gh * gw, p * p * ch), |(row, col)| {
        let (gy, gx) = (row / gw, row % gw);
        let (py, rest) = (col / (p * ch), col % (p * ch));
        let (px, c) = (rest / ch, rest % ch);
        tensor[(gy * p + py, gx * p + px, c)]
    });
    Ok((out, (gh, gw)))
}

/// Bilinear interpolation weights (`out x inp`) with half-pixel alignment.
pub(crate) fn bilinear_matrix(out: usize, inp: usize) -> Array2<f64> {
    let mut r = Array2::zeros((out, inp));
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let w = src - i0 as f64;
        r[(i, i0)] += 1.0 - w;
        r[(i, i1)] += w;
    }
    r
}

/// Bilinearly resizes a logit grid to `out_h x out_w`.
pub fn upsample_bilinear(grid: &ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let ry = bilinear_matrix(out_h, grid.nrows());
    let rx = bilinear_matrix(out_w, grid.ncols());
    ry.dot(grid).dot(&rx.t())
}

fn check_width(what: &str, got: usize, want: usize) -> Result<(), ModelError> {
    if got != want {
        return Err(ModelError::ShapeMismatch(format!("{what}: width {got}, expected {want}")));
    }
    Ok(())
}

fn norm(v: &ArrayView1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn cosines(e_cls: &Array2<f64>, text: &ArrayView1<f64>) -> Result<Vec<f64>, ModelError> {
    let nt = norm(text);
    if nt == 0.0 {
        return Err(ModelError::ZeroVector);
    }
    e_cls
        .rows()
        .into_iter()
        .map(|e| {
            let ne = norm(&e);
            if ne == 0.0 {
                Err(ModelError::ZeroVector)
            } else {
                Ok(e.dot(text) / (ne * nt))
            }
        })
        .collect()
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Image tokens and the pixel feature map from the patch-embedding stub.
pub fn encode_image(model: &SegModel, image: &RgbImage) -> Result<(FeatureMatrix, PixelFeatureMap), ModelError> {
    let (patches, (gh, gw)) = patchify(&image_tensor(image), model.config.patch_size)?;
    let f = model.params.patch_embed.forward(&patches.view());
    Ok((
        FeatureMatrix::new(f.clone(), FeatureRole::ImageTokens)?,
        PixelFeatureMap::new(gh, gw, f)?,
    ))
}

/// Token plus positional embeddings; the last row is the global prompt embedding.
pub fn encode_text(model: &SegModel, prompt: &str) -> Result<FeatureMatrix, ModelError> {
    let tokens = model.tokenize(prompt)?;
    FeatureMatrix::new(model.params.text_features(&tokens), FeatureRole::TextTokens)
}

/// Image-enhanced queries: multi-head attention from queries to image tokens.
pub fn cross_attention(
    queries: &FeatureMatrix,
    image_tokens: &FeatureMatrix,
    attn: &Attention,
) -> Result<FeatureMatrix, ModelError> {
    check_width("queries", queries.dim(), attn.model_dim())?;
    check_width("image tokens", image_tokens.dim(), attn.model_dim())?;
    check_width("attention output", attn.output.ncols(), attn.model_dim())?;
    let (out, _) = attn.forward(&queries.data.view(), &image_tokens.data.view());
    FeatureMatrix::new(out, FeatureRole::Queries)
}

/// Self-attention over the row-wise concatenation `[queries; text tokens]`.
pub fn self_attention(
    queries: &FeatureMatrix,
    text_tokens: &FeatureMatrix,
    attn: &Attention,
) -> Result<FeatureMatrix, ModelError> {
    check_width("queries", queries.dim(), attn.model_dim())?;
    check_width("text tokens", text_tokens.dim(), attn.model_dim())?;
    check_width("attention output", attn.output.ncols(), attn.model_dim())?;
    let z = concatenate(Axis(0), &[queries.data.view(), text_tokens.data.view()]).expect("shared width");
    let (out, _) = attn.forward(&z.view(), &z.view());
    FeatureMatrix::new(out, FeatureRole::Joint)
}

/// Row-wise two-layer MLP with one nonlinearity.
pub fn feed_forward(joint: &FeatureMatrix, ffn: &[Linear; 2], activation: Activation) -> Result<FeatureMatrix, ModelError> {
    check_width("joint features", joint.dim(), ffn[0].weight.nrows())?;
    check_width("ffn output layer", ffn[1].weight.nrows(), ffn[0].weight.ncols())?;
    let hidden = activation.apply(&ffn[0].forward(&joint.data.view()));
    FeatureMatrix::new(ffn[1].forward(&hidden.view()), FeatureRole::Joint)
}

/// Mask embeddings (three-layer MLP) and class embeddings (one linear layer) of the
/// same semantic queries.
pub fn project_embeddings(
    queries: &FeatureMatrix,
    mask_proj: &[Linear; 3],
    class_proj: &Linear,
    activation: Activation,
) -> Result<(FeatureMatrix, FeatureMatrix), ModelError> {
    check_width("semantic queries", queries.dim(), mask_proj[0].weight.nrows())?;
    check_width("semantic queries", queries.dim(), class_proj.weight.nrows())?;
    let (e_mask, _) = mask_mlp(mask_proj, activation, &queries.data);
    let e_cls = class_proj.forward(&queries.data.view());
    Ok((
        FeatureMatrix::new(e_mask, FeatureRole::Embeddings)?,
        FeatureMatrix::new(e_cls, FeatureRole::Embeddings)?,
    ))
}

/// Returns the output and the two (pre-activation, activation) hidden pairs.
#[allow(clippy::type_complexity)]
fn mask_mlp(
    mask_proj: &[Linear; 3],
    act: Activation,
    x: &Array2<f64>,
) -> (Array2<f64>, [(Array2<f64>, Array2<f64>); 2]) {
    let m0 = mask_proj[0].forward(&x.view());
    let a0 = act.apply(&m0);
    let m1 = mask_proj[1].forward(&a0.view());
    let a1 = act.apply(&m1);
    let out = mask_proj[2].forward(&a1.view());
    (out, [(m0, a0), (m1, a1)])
}

/// One logit grid per mask embedding: the dot product with every pixel feature.
pub fn decode_candidate_masks(e_mask: &FeatureMatrix, pixel_map: &PixelFeatureMap) -> Result<Vec<Array2<f64>>, ModelError> {
    check_width("mask embeddings", e_mask.dim(), pixel_map.dim())?;
    let (gh, gw) = pixel_map.grid();
    let logits = e_mask.data.dot(&pixel_map.data.t());
    Ok(logits
        .rows()
        .into_iter()
        .map(|r| r.to_owned().into_shape_with_order((gh, gw)).expect("grid size"))
        .collect())
}

/// Index of the class embedding with the highest cosine similarity to the global
/// text embedding; ties go to the lowest index.
pub fn select_mask(e_cls: &FeatureMatrix, global_text: &ArrayView1<f64>) -> Result<usize, ModelError> {
    check_width("global text embedding", global_text.len(), e_cls.dim())?;
    Ok(argmax_first(&cosines(&e_cls.data, global_text)?))
}

/// Model output for one image and prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Sigmoid probabilities of the selected candidate at input resolution.
    pub probs: Array2<f64>,
    /// Candidate logits at feature-grid resolution.
    pub candidates: Vec<Array2<f64>>,
    pub selected: usize,
    pub similarities: Vec<f64>,
}

impl Prediction {
    pub fn mask(&self, threshold: f64) -> MaskBitmap {
        let (h, w) = self.probs.dim();
        MaskBitmap::from_fn(h, w, |r, c| self.probs[(r, c)] > threshold)
    }
}

/// Tokenized, patchified inputs reused across training epochs.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub patches: Array2<f64>,
    pub grid: (usize, usize),
    pub size: (usize, usize),
    pub tokens: Vec<usize>,
}

struct Trace {
    f_img: Array2<f64>,
    f_text: Array2<f64>,
    cross: AttentionCache,
    z: Array2<f64>,
    self_cache: AttentionCache,
    joint: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    q2: Array2<f64>,
    mask_hidden: [(Array2<f64>, Array2<f64>); 2],
    e_mask: Array2<f64>,
    e_cls: Array2<f64>,
    candidates: Array2<f64>,
    sims: Vec<f64>,
}

/// Scalar training objective for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub segmentation: LossBreakdown,
    pub alignment: f64,
    pub selected: usize,
}

impl ModelParams {
    fn text_features(&self, tokens: &[usize]) -> Array2<f64> {
        let l = tokens.len();
        self.token_embed.select(Axis(0), tokens) + &self.position_embed.slice(s![..l, ..])
    }

    fn trace(&self, act: Activation, prep: &Prepared) -> Result<Trace, ModelError> {
        let f_img = self.patch_embed.forward(&prep.patches.view());
        let f_text = self.text_features(&prep.tokens);
        let (q1, cross) = self.cross_attn.forward(&self.queries.view(), &f_img.view());
        let z = concatenate(Axis(0), &[q1.view(), f_text.view()]).expect("shared width");
        let (joint, self_cache) = self.self_attn.forward(&z.view(), &z.view());
        let ffn_pre = self.ffn[0].forward(&joint.view());
        let ffn_act = act.apply(&ffn_pre);
        let joint2 = self.ffn[1].forward(&ffn_act.view());
        let q2 = joint2.slice(s![..self.queries.nrows(), ..]).to_owned();
        let (e_mask, mask_hidden) = mask_mlp(&self.mask_proj, act, &q2);
        let e_cls = self.class_proj.forward(&q2.view());
        let candidates = e_mask.dot(&f_img.t());
        let sims = cosines(&e_cls, &f_text.row(f_text.nrows() - 1))?;
        Ok(Trace {
            f_img,
            f_text,
            cross,
            z,
            self_cache,
            joint,
            ffn_pre,
            ffn_act,
            q2,
            mask_hidden,
            e_mask,
            e_cls,
            candidates,
            sims,
        })
    }
}

/// A configured model: architecture, vocabulary and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
}

impl SegModel {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab.is_empty() {
            return Err(ModelError::InvalidConfig("empty vocabulary".into()));
        }
        let params = ModelParams::init(&config, vocab.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { config, vocab, params })
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocab, params: ModelParams) -> Result<Self, ModelError> {
        config.validate()?;
        params.validate(&config, vocab.len())?;
        Ok(Self { config, vocab, params })
    }

    pub(crate) fn tokenize(&self, prompt: &str) -> Result<Vec<usize>, ModelError> {
        let tokens = self.vocab.tokenize(prompt)?;
        if tokens.len() > self.config.max_len {
            return Err(ModelError::PromptTooLong(tokens.len(), self.config.max_len));
        }
        Ok(tokens)
    }

    pub(crate) fn prepare(&self, image: &RgbImage, prompt: &str) -> Result<Prepared, ModelError> {
        let tensor = image_tensor(image);
        let (patches, grid) = patchify(&tensor, self.config.patch_size)?;
        let (h, w, _) = tensor.dim();
        Ok(Prepared {
            patches,
            grid,
            size: (h, w),
            tokens: self.tokenize(prompt)?,
        })
    }

    /// Full inference: candidates, cosine selection and upsampled probabilities.
    pub fn forward(&self, image: &RgbImage, prompt: &str) -> Result<Prediction, ModelError> {
        let prep = self.prepare(image, prompt)?;
        let t = self.params.trace(self.config.activation, &prep)?;
        let selected = argmax_first(&t.sims);
        let (gh, gw) = prep.grid;
        let candidates: Vec<Array2<f64>> = t
            .candidates
            .rows()
            .into_iter()
            .map(|r| r.to_owned().into_shape_with_order((gh, gw)).expect("grid size"))
            .collect();
        let logits = upsample_bilinear(&candidates[selected].view(), prep.size.0, prep.size.1);
        Ok(Prediction {
            probs: logits.mapv(sigmoid),
            candidates,
            selected,
            similarities: t.sims,
        })
    }

    /// Segmentation loss on the selected candidate plus the cosine-alignment term,
    /// with gradients for every parameter when `want_grad` is set. `forced`
    /// overrides the argmax selection.
    pub(crate) fn objective(
        &self,
        prep: &Prepared,
        target: &Array2<f64>,
        cfg: &TrainConfig,
        want_grad: bool,
        forced: Option<usize>,
    ) -> Result<(Objective, Option<ModelParams>), ModelError> {
        let p = &self.params;
        let act = self.config.activation;
        let t = p.trace(act, prep)?;
        let j = forced.unwrap_or_else(|| argmax_first(&t.sims));
        let (gh, gw) = prep.grid;
        let (h, w) = prep.size;
        let ry = bilinear_matrix(h, gh);
        let rx = bilinear_matrix(w, gw);
        let grid = t.candidates.row(j).to_owned().into_shape_with_order((gh, gw)).expect("grid size");
        let up = ry.dot(&grid).dot(&rx.t());
        let (seg, d_up) = loss_and_grad(target, &up, &cfg.loss_config(), want_grad)?;
        let cos_j = t.sims[j];
        let objective = Objective {
            total: seg.total + cfg.align_weight * (1.0 - cos_j),
            segmentation: seg,
            alignment: 1.0 - cos_j,
            selected: j,
        };
        let Some(d_up) = d_up else {
            return Ok((objective, None));
        };

        let n = p.queries.nrows();
        let l = prep.tokens.len();
        let mut grads = p.zeros_like();

        // Candidate logits: G_j = e_mask_j · F_imgᵀ, upsampled as Ry G Rxᵀ.
        let d_grid = ry.t().dot(&d_up).dot(&rx);
        let d_cand = d_grid.into_shape_with_order((1, gh * gw)).expect("grid size");
        let mut d_e_mask = Array2::zeros(t.e_mask.raw_dim());
        d_e_mask.row_mut(j).assign(&d_cand.dot(&t.f_img).row(0));
        let mut d_f_img = d_cand.t().dot(&t.e_mask.slice(s![j..j + 1, ..]));

        // Alignment term: -w · cos(e_cls_j, t).
        let e = t.e_cls.row(j);
        let g = t.f_text.row(l - 1);
        let (ne, ng) = (norm(&e), norm(&g));
        let wa = -cfg.align_weight;
        let mut d_e_cls = Array2::zeros(t.e_cls.raw_dim());
        d_e_cls
            .row_mut(j)
            .assign(&((&g / (ne * ng) - &e * (cos_j / (ne * ne))) * wa));
        let mut d_f_text = Array2::zeros(t.f_text.raw_dim());
        d_f_text
            .row_mut(l - 1)
            .assign(&((&e / (ne * ng) - &g * (cos_j / (ng * ng))) * wa));

        // Projectors.
        let mut d_q2 = p.class_proj.backward(&t.q2.view(), &d_e_cls, &mut grads.class_proj);
        let [(m0, a0), (m1, a1)] = &t.mask_hidden;
        let d_a1 = p.mask_proj[2].backward(&a1.view(), &d_e_mask, &mut grads.mask_proj[2]);
        let d_m1 = act.backward(m1, &d_a1);
        let d_a0 = p.mask_proj[1].backward(&a0.view(), &d_m1, &mut grads.mask_proj[1]);
        let d_m0 = act.backward(m0, &d_a0);
        d_q2 += &p.mask_proj[0].backward(&t.q2.view(), &d_m0, &mut grads.mask_proj[0]);

        // FFN: only the first n rows reach the projectors.
        let mut d_joint2 = Array2::zeros((n + l, self.config.dim));
        d_joint2.slice_mut(s![..n, ..]).assign(&d_q2);
        let d_ffn_act = p.ffn[1].backward(&t.ffn_act.view(), &d_joint2, &mut grads.ffn[1]);
        let d_ffn_pre = act.backward(&t.ffn_pre, &d_ffn_act);
        let d_joint = p.ffn[0].backward(&t.joint.view(), &d_ffn_pre, &mut grads.ffn[0]);

        // Self-attention: Z feeds both the query and key/value sides.
        let (d_zq, d_zkv) = p
            .self_attn
            .backward(&t.z.view(), &t.z.view(), &t.self_cache, &d_joint, &mut grads.self_attn);
        let d_z = d_zq + d_zkv;
        let d_q1 = d_z.slice(s![..n, ..]).to_owned();
        d_f_text += &d_z.slice(s![n.., ..]);

        let (d_queries, d_f_img_attn) =
            p.cross_attn
                .backward(&p.queries.view(), &t.f_img.view(), &t.cross, &d_q1, &mut grads.cross_attn);
        grads.queries += &d_queries;
        d_f_img += &d_f_img_attn;

        for (i, &tok) in prep.tokens.iter().enumerate() {
            let row = d_f_text.row(i);
            let mut te = grads.token_embed.row_mut(tok);
            te += &row;
            let mut pe = grads.position_embed.row_mut(i);
            pe += &row;
        }
        p.patch_embed.backward(&prep.patches.view(), &d_f_img, &mut grads.patch_embed);
        Ok((objective, Some(grads)))
    }

    /// Objective for one raw sample.
    pub fn loss(&self, image: &RgbImage, prompt: &str, mask: &MaskBitmap, cfg: &TrainConfig) -> Result<Objective, ModelError> {
        let prep = self.prepare(image, prompt)?;
        let target = mask_target(mask, prep.size)?;
        Ok(self.objective(&prep, &target, cfg, false, None)?.0)
    }
}

pub(crate) fn mask_target(mask: &MaskBitmap, size: (usize, usize)) -> Result<Array2<f64>, ModelError> {
    if mask.dims() != size {
        return Err(ModelError::DimensionMismatch(format!("mask {:?} vs image {:?}", mask.dims(), size)));
    }
    Ok(Array2::from_shape_fn(size, |(r, c)| mask.get(r, c) as u8 as f64))
}
