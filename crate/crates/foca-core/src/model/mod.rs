//! Downstream networks: the unimodal CNN classifier, the FOCA fusion
//! classifier, and the two Euclidean fusion baselines (concatenation and
//! scaled dot-product cross-attention), all sharing the same conv blocks and
//! head widths so comparisons isolate the fusion mechanism.
//!
//! Per-sample forward passes record caches; backward passes return gradient
//! structures congruent to the parameters. The training loop lives in
//! [`train`], the checkpoint format in [`checkpoint`].

pub mod checkpoint;
pub mod layers;
pub mod train;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FocaError, Result};
use crate::hca::{
    hca_backward, hca_forward_cached, AttentionWeights, Direction, HcaCache, HcaParams,
};
use layers::{
    conv_block_backward, conv_block_forward, cross_entropy_grad, relu, relu_backward,
    ConvBlockCache, ConvBlockParams, Dense, Dropout,
};

pub use layers::conv_block_out_len;

/// Head widths from the architecture: FC-120 and FC-30 for fusion models,
/// FC-128 for the unimodal classifier.
pub const FC1_WIDTH: usize = 120;
pub const FC2_WIDTH: usize = 30;
pub const UNIMODAL_FC_WIDTH: usize = 128;

/// Training / evaluation mode, mirroring the fusion comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    UnimodalAudio,
    UnimodalVisual,
    Concat,
    EuclidXattn,
    Foca,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::UnimodalAudio,
        Mode::UnimodalVisual,
        Mode::Concat,
        Mode::EuclidXattn,
        Mode::Foca,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Mode::UnimodalAudio => "audio",
            Mode::UnimodalVisual => "visual",
            Mode::Concat => "concat",
            Mode::EuclidXattn => "euclid-xattn",
            Mode::Foca => "foca",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| FocaError::Malformed(format!("unknown mode {tag:?}")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Dropout request for a single forward pass; the mask stream is seeded so
/// training is reproducible regardless of scheduling.
#[derive(Debug, Clone, Copy)]
pub struct DropoutSpec {
    pub rate: f64,
    pub mask_seed: u64,
}

/// Conv block + FC-128 + softmax head over one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct UnimodalParams {
    pub conv: ConvBlockParams,
    pub fc: Dense,
    pub out: Dense,
}

impl UnimodalParams {
    pub fn init<R: Rng>(
        d_in: usize,
        n_classes: usize,
        c1: usize,
        c2: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = ConvBlockParams::init(c1, c2, rng);
        let (n, d) = conv.out_shape(d_in)?;
        let fc = Dense::init(n * d, UNIMODAL_FC_WIDTH, rng);
        let out = Dense::init(UNIMODAL_FC_WIDTH, n_classes, rng);
        Ok(Self { conv, fc, out })
    }
}

/// Conv blocks + flatten-concat + FC-120/FC-30 head.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatParams {
    pub conv_audio: ConvBlockParams,
    pub conv_visual: ConvBlockParams,
    pub fc1: Dense,
    pub fc2: Dense,
    pub out: Dense,
}

impl ConcatParams {
    pub fn init<R: Rng>(
        d_audio: usize,
        d_visual: usize,
        n_classes: usize,
        c1: usize,
        c2: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv_audio = ConvBlockParams::init(c1, c2, rng);
        let conv_visual = ConvBlockParams::init(c1, c2, rng);
        let (n_a, d) = conv_audio.out_shape(d_audio)?;
        let (n_v, _) = conv_visual.out_shape(d_visual)?;
        let fc1 = Dense::init((n_a + n_v) * d, FC1_WIDTH, rng);
        let fc2 = Dense::init(FC1_WIDTH, FC2_WIDTH, rng);
        let out = Dense::init(FC2_WIDTH, n_classes, rng);
        Ok(Self {
            conv_audio,
            conv_visual,
            fc1,
            fc2,
            out,
        })
    }
}

/// Conv blocks + six d x d attention projections + FC-120/FC-30 head.
/// Used by both FOCA (hyperbolic attention) and the Euclidean cross-attention
/// baseline, which therefore have identical parameter counts.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub conv_audio: ConvBlockParams,
    pub conv_visual: ConvBlockParams,
    pub attn: HcaParams,
    pub fc1: Dense,
    pub fc2: Dense,
    pub out: Dense,
}

impl FusionParams {
    pub fn init<R: Rng>(
        d_audio: usize,
        d_visual: usize,
        n_classes: usize,
        c1: usize,
        c2: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv_audio = ConvBlockParams::init(c1, c2, rng);
        let conv_visual = ConvBlockParams::init(c1, c2, rng);
        let (n_a, d) = conv_audio.out_shape(d_audio)?;
        let (n_v, _) = conv_visual.out_shape(d_visual)?;
        // Unequal modality widths: the longer token sequence is truncated to
        // the shorter n, the least-invasive way to meet the equal-n contract
        // of bidirectional attention.
        let n = n_a.min(n_v);
        let attn = HcaParams::init(d, rng);
        let fc1 = Dense::init(n * d, FC1_WIDTH, rng);
        let fc2 = Dense::init(FC1_WIDTH, FC2_WIDTH, rng);
        let out = Dense::init(FC2_WIDTH, n_classes, rng);
        Ok(Self {
            conv_audio,
            conv_visual,
            attn,
            fc1,
            fc2,
            out,
        })
    }
}

/// A named parameter tensor, the unit of checkpoints and count reports.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn conv_blocks(prefix: &str, c: &ConvBlockParams, out: &mut Vec<ParamBlock>) {
    out.push(ParamBlock {
        name: format!("{prefix}.w1"),
        shape: c.w1.shape().to_vec(),
        data: c.w1.iter().copied().collect(),
    });
    out.push(ParamBlock {
        name: format!("{prefix}.b1"),
        shape: c.b1.shape().to_vec(),
        data: c.b1.to_vec(),
    });
    out.push(ParamBlock {
        name: format!("{prefix}.w2"),
        shape: c.w2.shape().to_vec(),
        data: c.w2.iter().copied().collect(),
    });
    out.push(ParamBlock {
        name: format!("{prefix}.b2"),
        shape: c.b2.shape().to_vec(),
        data: c.b2.to_vec(),
    });
}

fn dense_blocks(prefix: &str, d: &Dense, out: &mut Vec<ParamBlock>) {
    out.push(ParamBlock {
        name: format!("{prefix}.w"),
        shape: d.w.shape().to_vec(),
        data: d.w.iter().copied().collect(),
    });
    out.push(ParamBlock {
        name: format!("{prefix}.b"),
        shape: d.b.shape().to_vec(),
        data: d.b.to_vec(),
    });
}

fn hca_blocks(h: &HcaParams, out: &mut Vec<ParamBlock>) {
    for (name, m) in h.matrices() {
        out.push(ParamBlock {
            name: name.to_string(),
            shape: m.shape().to_vec(),
            data: m.iter().copied().collect(),
        });
    }
}

/// All trainable parameters for one mode.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    UnimodalAudio(UnimodalParams),
    UnimodalVisual(UnimodalParams),
    Concat(ConcatParams),
    EuclidXattn(FusionParams),
    Foca(FusionParams),
}

impl ModelParams {
    pub fn init<R: Rng>(
        mode: Mode,
        d_audio: usize,
        d_visual: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c1 = ConvBlockParams::STANDARD_C1;
        let c2 = ConvBlockParams::STANDARD_C2;
        Self::init_with_channels(mode, d_audio, d_visual, n_classes, c1, c2, rng)
    }

    /// Same structure with custom conv widths (tiny gradient-check configs).
    pub fn init_with_channels<R: Rng>(
        mode: Mode,
        d_audio: usize,
        d_visual: usize,
        n_classes: usize,
        c1: usize,
        c2: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match mode {
            Mode::UnimodalAudio => {
                Self::UnimodalAudio(UnimodalParams::init(d_audio, n_classes, c1, c2, rng)?)
            }
            Mode::UnimodalVisual => {
                Self::UnimodalVisual(UnimodalParams::init(d_visual, n_classes, c1, c2, rng)?)
            }
            Mode::Concat => Self::Concat(ConcatParams::init(
                d_audio, d_visual, n_classes, c1, c2, rng,
            )?),
            Mode::EuclidXattn => Self::EuclidXattn(FusionParams::init(
                d_audio, d_visual, n_classes, c1, c2, rng,
            )?),
            Mode::Foca => Self::Foca(FusionParams::init(
                d_audio, d_visual, n_classes, c1, c2, rng,
            )?),
        })
    }

    pub fn mode(&self) -> Mode {
        match self {
            Self::UnimodalAudio(_) => Mode::UnimodalAudio,
            Self::UnimodalVisual(_) => Mode::UnimodalVisual,
            Self::Concat(_) => Mode::Concat,
            Self::EuclidXattn(_) => Mode::EuclidXattn,
            Self::Foca(_) => Mode::Foca,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Self::UnimodalAudio(p) | Self::UnimodalVisual(p) => p.out.n_out(),
            Self::Concat(p) => p.out.n_out(),
            Self::EuclidXattn(p) | Self::Foca(p) => p.out.n_out(),
        }
    }

    /// Named parameter tensors in canonical order.
    pub fn blocks(&self) -> Vec<ParamBlock> {
        let mut out = Vec::new();
        match self {
            Self::UnimodalAudio(p) | Self::UnimodalVisual(p) => {
                conv_blocks("conv", &p.conv, &mut out);
                dense_blocks("fc", &p.fc, &mut out);
                dense_blocks("out", &p.out, &mut out);
            }
            Self::Concat(p) => {
                conv_blocks("conv_audio", &p.conv_audio, &mut out);
                conv_blocks("conv_visual", &p.conv_visual, &mut out);
                dense_blocks("fc1", &p.fc1, &mut out);
                dense_blocks("fc2", &p.fc2, &mut out);
                dense_blocks("out", &p.out, &mut out);
            }
            Self::EuclidXattn(p) | Self::Foca(p) => {
                conv_blocks("conv_audio", &p.conv_audio, &mut out);
                conv_blocks("conv_visual", &p.conv_visual, &mut out);
                hca_blocks(&p.attn, &mut out);
                dense_blocks("fc1", &p.fc1, &mut out);
                dense_blocks("fc2", &p.fc2, &mut out);
                dense_blocks("out", &p.out, &mut out);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// All scalars in canonical block order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in self.blocks() {
            out.extend_from_slice(&b.data);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.for_each_array_mut(&mut |slice: &mut [f64]| {
            slice.copy_from_slice(&flat[pos..pos + slice.len()]);
            pos += slice.len();
        });
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }

    fn for_each_array_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        let conv = |c: &mut ConvBlockParams, f: &mut dyn FnMut(&mut [f64])| {
            f(c.w1.as_slice_mut().unwrap());
            f(c.b1.as_slice_mut().unwrap());
            f(c.w2.as_slice_mut().unwrap());
            f(c.b2.as_slice_mut().unwrap());
        };
        let dense = |d: &mut Dense, f: &mut dyn FnMut(&mut [f64])| {
            f(d.w.as_slice_mut().unwrap());
            f(d.b.as_slice_mut().unwrap());
        };
        match self {
            Self::UnimodalAudio(p) | Self::UnimodalVisual(p) => {
                conv(&mut p.conv, f);
                dense(&mut p.fc, f);
                dense(&mut p.out, f);
            }
            Self::Concat(p) => {
                conv(&mut p.conv_audio, f);
                conv(&mut p.conv_visual, f);
                dense(&mut p.fc1, f);
                dense(&mut p.fc2, f);
                dense(&mut p.out, f);
            }
            Self::EuclidXattn(p) | Self::Foca(p) => {
                conv(&mut p.conv_audio, f);
                conv(&mut p.conv_visual, f);
                for m in p.attn.matrices_mut() {
                    f(m.as_slice_mut().unwrap());
                }
                dense(&mut p.fc1, f);
                dense(&mut p.fc2, f);
                dense(&mut p.out, f);
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_array_mut(&mut |s: &mut [f64]| s.fill(0.0));
        z
    }

    /// Forward one sample; unimodal modes read only their own modality.
    pub fn forward_cached(
        &self,
        x_audio: ArrayView1<f64>,
        x_visual: ArrayView1<f64>,
        dropout: Option<DropoutSpec>,
    ) -> Result<SampleCache> {
        match self {
            Self::UnimodalAudio(p) => unimodal_forward_cached(x_audio, p, dropout),
            Self::UnimodalVisual(p) => unimodal_forward_cached(x_visual, p, dropout),
            Self::Concat(p) => concat_forward_cached(x_audio, x_visual, p, dropout),
            Self::EuclidXattn(p) => {
                fusion_forward_cached(x_audio, x_visual, p, AttnKind::Euclidean, dropout)
            }
            Self::Foca(p) => {
                fusion_forward_cached(x_audio, x_visual, p, AttnKind::Hyperbolic, dropout)
            }
        }
    }

    /// Backward one sample; returns a gradient structure congruent to self.
    pub fn backward(&self, cache: &SampleCache, g_logits: ArrayView1<f64>) -> ModelParams {
        match (self, cache) {
            (Self::UnimodalAudio(p), SampleCache::Unimodal(c)) => {
                ModelParams::UnimodalAudio(unimodal_backward(p, c, g_logits))
            }
            (Self::UnimodalVisual(p), SampleCache::Unimodal(c)) => {
                ModelParams::UnimodalVisual(unimodal_backward(p, c, g_logits))
            }
            (Self::Concat(p), SampleCache::Concat(c)) => {
                ModelParams::Concat(concat_backward(p, c, g_logits))
            }
            (Self::EuclidXattn(p), SampleCache::Fusion(c)) => {
                ModelParams::EuclidXattn(fusion_backward(p, c, g_logits))
            }
            (Self::Foca(p), SampleCache::Fusion(c)) => {
                ModelParams::Foca(fusion_backward(p, c, g_logits))
            }
            _ => unreachable!("cache kind does not match parameter kind"),
        }
    }
}

/// Itemized trainable-scalar count.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCountReport {
    pub items: Vec<(String, usize)>,
    pub total: usize,
}

pub fn count_params(params: &ModelParams) -> ParamCountReport {
    let items: Vec<(String, usize)> = params
        .blocks()
        .into_iter()
        .map(|b| (b.name, b.data.len()))
        .collect();
    let total = items.iter().map(|(_, n)| n).sum();
    ParamCountReport { items, total }
}

// ---------------------------------------------------------------------------
// Per-mode forward/backward.
// ---------------------------------------------------------------------------

enum AttnKind {
    Hyperbolic,
    Euclidean,
}

/// Head cache shared by every mode: flatten -> dense stack with ReLU and
/// dropout between layers.
struct HeadCache {
    flat: Array1<f64>,
    pre: Vec<Array1<f64>>,
    post: Vec<Array1<f64>>,
    masks: Vec<Array1<f64>>,
    logits: Array1<f64>,
}

fn head_forward(
    flat: Array1<f64>,
    hidden: &[&Dense],
    out: &Dense,
    dropout: Option<DropoutSpec>,
) -> Result<HeadCache> {
    let mut dropper = dropout.map(|d| Dropout::new(d.rate, d.mask_seed));
    let mut pre = Vec::with_capacity(hidden.len());
    let mut post = Vec::with_capacity(hidden.len());
    let mut masks = Vec::with_capacity(hidden.len());
    let mut x = flat.clone();
    for layer in hidden {
        if layer.n_in() != x.len() {
            return Err(FocaError::ShapeMismatch {
                context: "classifier head".into(),
                detail: format!("layer expects {} inputs, got {}", layer.n_in(), x.len()),
            });
        }
        let p = layer.forward(x.view());
        let a = relu(&p);
        let (dropped, mask) = match dropper.as_mut() {
            Some(d) => d.apply(&a),
            None => (a.clone(), Array1::ones(a.len())),
        };
        pre.push(p);
        post.push(a);
        masks.push(mask);
        x = dropped;
    }
    let logits = out.forward(x.view());
    Ok(HeadCache {
        flat,
        pre,
        post,
        masks,
        logits,
    })
}

/// Backward through the head; returns grad wrt flat input, accumulating
/// layer grads into the supplied gradient layers.
fn head_backward(
    hidden: &[&Dense],
    out: &Dense,
    g_hidden: &mut [&mut Dense],
    g_out: &mut Dense,
    cache: &HeadCache,
    g_logits: ArrayView1<f64>,
) -> Array1<f64> {
    let last_input = match cache.post.last() {
        Some(a) => a * &cache.masks[cache.masks.len() - 1],
        None => cache.flat.clone(),
    };
    let mut g = out.backward(last_input.view(), g_logits, g_out);
    for i in (0..hidden.len()).rev() {
        let g_post = &g * &cache.masks[i];
        let g_pre = relu_backward(&cache.pre[i], &g_post);
        let input = if i == 0 {
            cache.flat.clone()
        } else {
            &cache.post[i - 1] * &cache.masks[i - 1]
        };
        g = hidden[i].backward(input.view(), g_pre.view(), g_hidden[i]);
    }
    g
}

pub struct UnimodalCache {
    conv: ConvBlockCache,
    head: HeadCache,
}

pub struct ConcatCache {
    conv_a: ConvBlockCache,
    conv_v: ConvBlockCache,
    head: HeadCache,
}

enum AttnCache {
    Hyper(Box<HcaCache>),
    Euclid(Box<EuclidCache>),
}

pub struct FusionCache {
    conv_a: ConvBlockCache,
    conv_v: ConvBlockCache,
    n: usize,
    attn: AttnCache,
    alphas: (AttentionWeights, AttentionWeights),
    head: HeadCache,
}

/// Per-mode forward record for one sample.
pub enum SampleCache {
    Unimodal(UnimodalCache),
    Concat(ConcatCache),
    Fusion(FusionCache),
}

impl SampleCache {
    pub fn logits(&self) -> &Array1<f64> {
        match self {
            Self::Unimodal(c) => &c.head.logits,
            Self::Concat(c) => &c.head.logits,
            Self::Fusion(c) => &c.head.logits,
        }
    }

    /// Post-ReLU activation of the last hidden layer (30-dim for fusion
    /// models, 128-dim for unimodal), the t-SNE embedding source.
    pub fn penultimate(&self) -> &Array1<f64> {
        let head = match self {
            Self::Unimodal(c) => &c.head,
            Self::Concat(c) => &c.head,
            Self::Fusion(c) => &c.head,
        };
        head.post.last().expect("head has at least one hidden layer")
    }

    pub fn attention(&self) -> Option<&(AttentionWeights, AttentionWeights)> {
        match self {
            Self::Fusion(c) => Some(&c.alphas),
            _ => None,
        }
    }
}

fn flatten_tokens(tokens: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(tokens.iter().copied())
}

fn unimodal_forward_cached(
    x: ArrayView1<f64>,
    p: &UnimodalParams,
    dropout: Option<DropoutSpec>,
) -> Result<SampleCache> {
    let conv = conv_block_forward(x, &p.conv)?;
    let flat = flatten_tokens(&conv.tokens);
    let head = head_forward(flat, &[&p.fc], &p.out, dropout)?;
    Ok(SampleCache::Unimodal(UnimodalCache { conv, head }))
}

fn unimodal_backward(
    p: &UnimodalParams,
    c: &UnimodalCache,
    g_logits: ArrayView1<f64>,
) -> UnimodalParams {
    let mut g_fc = p.fc.zeros_like();
    let mut g_out = p.out.zeros_like();
    let g_flat = head_backward(
        &[&p.fc],
        &p.out,
        &mut [&mut g_fc],
        &mut g_out,
        &c.head,
        g_logits,
    );
    let g_tokens =
        Array2::from_shape_vec(c.conv.tokens.raw_dim(), g_flat.to_vec()).expect("shape");
    let g_conv = conv_block_backward(&p.conv, &c.conv, &g_tokens);
    UnimodalParams {
        conv: g_conv,
        fc: g_fc,
        out: g_out,
    }
}

fn concat_forward_cached(
    x_a: ArrayView1<f64>,
    x_v: ArrayView1<f64>,
    p: &ConcatParams,
    dropout: Option<DropoutSpec>,
) -> Result<SampleCache> {
    let conv_a = conv_block_forward(x_a, &p.conv_audio)?;
    let conv_v = conv_block_forward(x_v, &p.conv_visual)?;
    let mut flat = flatten_tokens(&conv_a.tokens).to_vec();
    flat.extend(flatten_tokens(&conv_v.tokens).iter());
    let head = head_forward(Array1::from(flat), &[&p.fc1, &p.fc2], &p.out, dropout)?;
    Ok(SampleCache::Concat(ConcatCache {
        conv_a,
        conv_v,
        head,
    }))
}

fn concat_backward(p: &ConcatParams, c: &ConcatCache, g_logits: ArrayView1<f64>) -> ConcatParams {
    let mut g_fc1 = p.fc1.zeros_like();
    let mut g_fc2 = p.fc2.zeros_like();
    let mut g_out = p.out.zeros_like();
    let g_flat = head_backward(
        &[&p.fc1, &p.fc2],
        &p.out,
        &mut [&mut g_fc1, &mut g_fc2],
        &mut g_out,
        &c.head,
        g_logits,
    );
    let na = c.conv_a.tokens.len();
    let g_tok_a = Array2::from_shape_vec(c.conv_a.tokens.raw_dim(), g_flat.as_slice().unwrap()[..na].to_vec())
        .expect("shape");
    let g_tok_v = Array2::from_shape_vec(c.conv_v.tokens.raw_dim(), g_flat.as_slice().unwrap()[na..].to_vec())
        .expect("shape");
    ConcatParams {
        conv_audio: conv_block_backward(&p.conv_audio, &c.conv_a, &g_tok_a),
        conv_visual: conv_block_backward(&p.conv_visual, &c.conv_v, &g_tok_v),
        fc1: g_fc1,
        fc2: g_fc2,
        out: g_out,
    }
}

/// Euclidean scaled dot-product cross-attention record.
struct EuclidCache {
    t_a: Array2<f64>,
    t_v: Array2<f64>,
    q_a: Array2<f64>,
    k_a: Array2<f64>,
    v_a: Array2<f64>,
    q_v: Array2<f64>,
    k_v: Array2<f64>,
    v_v: Array2<f64>,
    alpha_av: Array2<f64>,
    alpha_va: Array2<f64>,
}

fn euclid_softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(s.raw_dim());
    for (mut orow, srow) in out.outer_iter_mut().zip(s.outer_iter()) {
        let m = srow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(srow.iter()) {
            *o = (v - m).exp();
            sum += *o;
        }
        orow.mapv_inplace(|v| v / sum);
    }
    out
}

fn euclid_forward(t_a: Array2<f64>, t_v: Array2<f64>, w: &HcaParams) -> (Array2<f64>, EuclidCache) {
    let d = t_a.ncols() as f64;
    let scale = 1.0 / d.sqrt();
    let q_a = t_a.dot(&w.w_q_audio.t());
    let k_a = t_a.dot(&w.w_k_audio.t());
    let v_a = t_a.dot(&w.w_v_audio.t());
    let q_v = t_v.dot(&w.w_q_visual.t());
    let k_v = t_v.dot(&w.w_k_visual.t());
    let v_v = t_v.dot(&w.w_v_visual.t());
    let alpha_av = euclid_softmax_rows(&(q_a.dot(&k_v.t()) * scale));
    let alpha_va = euclid_softmax_rows(&(q_v.dot(&k_a.t()) * scale));
    let fused = alpha_av.dot(&v_v) + alpha_va.dot(&v_a);
    let cache = EuclidCache {
        t_a,
        t_v,
        q_a,
        k_a,
        v_a,
        q_v,
        k_v,
        v_v,
        alpha_av,
        alpha_va,
    };
    (fused, cache)
}

/// Backward of one softmax(QK^T/sqrt(d))V direction; accumulates into the
/// query/key/value gradients.
fn euclid_attn_backward(
    alpha: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    g_o: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let g_alpha = g_o.dot(&v.t());
    let g_v = alpha.t().dot(g_o);
    let mut g_s = Array2::zeros(alpha.raw_dim());
    for i in 0..alpha.nrows() {
        let arow = alpha.row(i);
        let grow = g_alpha.row(i);
        let inner = arow.dot(&grow);
        for j in 0..alpha.ncols() {
            g_s[[i, j]] = arow[j] * (grow[j] - inner);
        }
    }
    let g_q = g_s.dot(k) * scale;
    let g_k = g_s.t().dot(q) * scale;
    (g_q, g_k, g_v)
}

fn fusion_forward_cached(
    x_a: ArrayView1<f64>,
    x_v: ArrayView1<f64>,
    p: &FusionParams,
    kind: AttnKind,
    dropout: Option<DropoutSpec>,
) -> Result<SampleCache> {
    let conv_a = conv_block_forward(x_a, &p.conv_audio)?;
    let conv_v = conv_block_forward(x_v, &p.conv_visual)?;
    let n = conv_a.tokens.nrows().min(conv_v.tokens.nrows());
    let t_a = conv_a.tokens.slice(ndarray::s![..n, ..]).to_owned();
    let t_v = conv_v.tokens.slice(ndarray::s![..n, ..]).to_owned();

    let (fused, attn, alphas) = match kind {
        AttnKind::Hyperbolic => {
            let (out, cache) = hca_forward_cached(&t_a, &t_v, &p.attn)?;
            (
                out.fused,
                AttnCache::Hyper(Box::new(cache)),
                (out.alpha_av, out.alpha_va),
            )
        }
        AttnKind::Euclidean => {
            let (fused, cache) = euclid_forward(t_a, t_v, &p.attn);
            let alphas = (
                AttentionWeights {
                    alpha: cache.alpha_av.clone(),
                    direction: Direction::AudioToVisual,
                },
                AttentionWeights {
                    alpha: cache.alpha_va.clone(),
                    direction: Direction::VisualToAudio,
                },
            );
            (fused, AttnCache::Euclid(Box::new(cache)), alphas)
        }
    };

    let flat = flatten_tokens(&fused);
    if flat.len() != p.fc1.n_in() {
        return Err(FocaError::ShapeMismatch {
            context: "fusion head".into(),
            detail: format!(
                "fused tokens flatten to {} but fc1 expects {} (audio n = {}, visual n = {})",
                flat.len(),
                p.fc1.n_in(),
                conv_a.tokens.nrows(),
                conv_v.tokens.nrows()
            ),
        });
    }
    let head = head_forward(flat, &[&p.fc1, &p.fc2], &p.out, dropout)?;
    Ok(SampleCache::Fusion(FusionCache {
        conv_a,
        conv_v,
        n,
        attn,
        alphas,
        head,
    }))
}

fn fusion_backward(p: &FusionParams, c: &FusionCache, g_logits: ArrayView1<f64>) -> FusionParams {
    let mut g_fc1 = p.fc1.zeros_like();
    let mut g_fc2 = p.fc2.zeros_like();
    let mut g_out = p.out.zeros_like();
    let g_flat = head_backward(
        &[&p.fc1, &p.fc2],
        &p.out,
        &mut [&mut g_fc1, &mut g_fc2],
        &mut g_out,
        &c.head,
        g_logits,
    );
    let d = c.conv_a.tokens.ncols();
    let g_fused = Array2::from_shape_vec((c.n, d), g_flat.to_vec()).expect("shape");

    let (g_t_a, g_t_v, g_attn) = match &c.attn {
        AttnCache::Hyper(cache) => {
            let grads = hca_backward(cache, &p.attn, &g_fused);
            (grads.d_h_a, grads.d_h_v, grads.d_params)
        }
        AttnCache::Euclid(cache) => {
            let mut g_w = crate::hca::HcaParams::zeros(d);
            let (g_q_a, g_k_v, g_v_v) =
                euclid_attn_backward(&cache.alpha_av, &cache.q_a, &cache.k_v, &cache.v_v, &g_fused);
            let (g_q_v, g_k_a, g_v_a) =
                euclid_attn_backward(&cache.alpha_va, &cache.q_v, &cache.k_a, &cache.v_a, &g_fused);
            g_w.w_q_audio = g_q_a.t().dot(&cache.t_a);
            g_w.w_k_audio = g_k_a.t().dot(&cache.t_a);
            g_w.w_v_audio = g_v_a.t().dot(&cache.t_a);
            g_w.w_q_visual = g_q_v.t().dot(&cache.t_v);
            g_w.w_k_visual = g_k_v.t().dot(&cache.t_v);
            g_w.w_v_visual = g_v_v.t().dot(&cache.t_v);
            let g_t_a = g_q_a.dot(&p.attn.w_q_audio)
                + g_k_a.dot(&p.attn.w_k_audio)
                + g_v_a.dot(&p.attn.w_v_audio);
            let g_t_v = g_q_v.dot(&p.attn.w_q_visual)
                + g_k_v.dot(&p.attn.w_k_visual)
                + g_v_v.dot(&p.attn.w_v_visual);
            (g_t_a, g_t_v, g_w)
        }
    };

    // Undo the truncation: rows past n received no gradient.
    let mut g_tok_a = Array2::zeros(c.conv_a.tokens.raw_dim());
    g_tok_a.slice_mut(ndarray::s![..c.n, ..]).assign(&g_t_a);
    let mut g_tok_v = Array2::zeros(c.conv_v.tokens.raw_dim());
    g_tok_v.slice_mut(ndarray::s![..c.n, ..]).assign(&g_t_v);

    FusionParams {
        conv_audio: conv_block_backward(&p.conv_audio, &c.conv_a, &g_tok_a),
        conv_visual: conv_block_backward(&p.conv_visual, &c.conv_v, &g_tok_v),
        attn: g_attn,
        fc1: g_fc1,
        fc2: g_fc2,
        out: g_out,
    }
}

// ---------------------------------------------------------------------------
// Public single-sample inference entry points.
// ---------------------------------------------------------------------------

/// Class probabilities for one sample through the unimodal classifier.
pub fn unimodal_forward(
    x: ArrayView1<f64>,
    p: &UnimodalParams,
    dropout: Option<DropoutSpec>,
) -> Result<Array1<f64>> {
    let cache = unimodal_forward_cached(x, p, dropout)?;
    Ok(layers::softmax(cache.logits().view()))
}

/// Full FOCA output: probabilities, both attention maps, and the 30-dim
/// penultimate representation.
pub struct FocaOutput {
    pub probs: Array1<f64>,
    pub alpha_av: AttentionWeights,
    pub alpha_va: AttentionWeights,
    pub penultimate: Array1<f64>,
}

pub fn foca_forward(
    x_audio: ArrayView1<f64>,
    x_visual: ArrayView1<f64>,
    p: &FusionParams,
    dropout: Option<DropoutSpec>,
) -> Result<FocaOutput> {
    let cache = fusion_forward_cached(x_audio, x_visual, p, AttnKind::Hyperbolic, dropout)?;
    let probs = layers::softmax(cache.logits().view());
    let penultimate = cache.penultimate().clone();
    match cache {
        SampleCache::Fusion(c) => Ok(FocaOutput {
            probs,
            alpha_av: c.alphas.0,
            alpha_va: c.alphas.1,
            penultimate,
        }),
        _ => unreachable!(),
    }
}

/// Mean cross-entropy and summed-and-scaled gradients over a batch of
/// (audio, visual, label) rows. Samples are processed in fixed-size chunks in
/// parallel and reduced in chunk order, so the result does not depend on
/// thread scheduling.
pub fn loss_and_grads(
    params: &ModelParams,
    audio: &Array2<f64>,
    visual: &Array2<f64>,
    labels: &[usize],
    dropout: Option<(f64, u64)>,
) -> Result<(f64, ModelParams)> {
    use rayon::prelude::*;

    let b = labels.len();
    if b == 0 {
        return Err(FocaError::EmptyInput("empty batch".into()));
    }
    const CHUNK: usize = 4;
    let idx: Vec<usize> = (0..b).collect();
    let chunks: Vec<Result<(f64, Vec<f64>)>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut flat: Option<Vec<f64>> = None;
            for &i in chunk {
                let spec = dropout.map(|(rate, base)| DropoutSpec {
                    rate,
                    mask_seed: train::mix_seed(&[base, i as u64]),
                });
                let cache =
                    params.forward_cached(audio.row(i), visual.row(i), spec)?;
                let logits = cache.logits();
                loss += layers::cross_entropy(logits.view(), labels[i]);
                let mut g_logits = cross_entropy_grad(logits.view(), labels[i]);
                g_logits.mapv_inplace(|g| g / b as f64);
                let g = params.backward(&cache, g_logits.view()).flat();
                match flat.as_mut() {
                    Some(acc) => {
                        for (a, gv) in acc.iter_mut().zip(g.iter()) {
                            *a += gv;
                        }
                    }
                    None => flat = Some(g),
                }
            }
            Ok((loss, flat.expect("nonempty chunk")))
        })
        .collect();

    let mut total_loss = 0.0;
    let mut total: Option<Vec<f64>> = None;
    for c in chunks {
        let (l, g) = c?;
        total_loss += l;
        match total.as_mut() {
            Some(acc) => {
                for (a, gv) in acc.iter_mut().zip(g.iter()) {
                    *a += gv;
                }
            }
            None => total = Some(g),
        }
    }
    let mut grads = params.zeros_like();
    grads.set_flat(&total.expect("nonempty batch"));
    Ok((total_loss / b as f64, grads))
}
