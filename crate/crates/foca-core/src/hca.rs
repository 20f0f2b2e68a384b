//! Hyperbolic cross-attention (HCA) between two token sequences.
//!
//! Both modalities are projected into the Poincare ball with exp_0, queries,
//! keys and values are formed by Mobius matrix application
//! `exp_0(W log_0(x))`, attention weights are the row-wise softmax of
//! negative hyperbolic distances,
//!
//! ```text
//! alpha[i][j] = exp(-d(Q_i, K_j)) / sum_j' exp(-d(Q_i, K_j'))
//! ```
//!
//! values are aggregated per query as a strict left-fold
//! `(+)_j alpha[i][j] (*) V_j` in ascending token order, and the two
//! directions are fused with one more Mobius addition before log_0 maps the
//! result back to the tangent space.
//!
//! `hca_backward` propagates cotangents through the whole composition using
//! the analytic VJPs from [`crate::poincare`]; the fold is walked in reverse
//! over the recorded accumulator chain.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FocaError, Result};
use crate::poincare::{
    dist, dist_vjp, exp0, exp0_vjp, log0, log0_vjp, madd, madd_vjp, mscalar, mscalar_vjp,
    BallBatch,
};

/// n x d Euclidean token matrix (n tokens, d channels).
pub type TokenSequence = Array2<f64>;

/// Which modality attends to which.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Audio queries attending to visual keys/values.
    AudioToVisual,
    /// Visual queries attending to audio keys/values.
    VisualToAudio,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::AudioToVisual => write!(f, "a->v"),
            Direction::VisualToAudio => write!(f, "v->a"),
        }
    }
}

/// Modality selector for the Q/K/V projection matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
}

/// Row-stochastic attention matrix with its direction tag.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub alpha: Array2<f64>,
    pub direction: Direction,
}

impl AttentionWeights {
    /// Validates entries in [0, 1] and row sums within 1e-6 of 1.
    pub fn new(alpha: Array2<f64>, direction: Direction) -> Result<Self> {
        for row in alpha.outer_iter() {
            let mut sum = 0.0;
            for &a in row {
                if !(0.0..=1.0).contains(&a) {
                    return Err(FocaError::Malformed(format!(
                        "attention weight {a} outside [0, 1]"
                    )));
                }
                sum += a;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(FocaError::Malformed(format!(
                    "attention row sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { alpha, direction })
    }
}

/// The six trainable d x d projection matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct HcaParams {
    pub w_q_audio: Array2<f64>,
    pub w_k_audio: Array2<f64>,
    pub w_v_audio: Array2<f64>,
    pub w_q_visual: Array2<f64>,
    pub w_k_visual: Array2<f64>,
    pub w_v_visual: Array2<f64>,
}

impl HcaParams {
    /// Uniform init on [-1/sqrt(d), 1/sqrt(d)] so tangent norms stay O(1).
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        let mut mk = || Array2::from_shape_fn((d, d), |_| rng.gen_range(-s..s));
        let w_q_audio = mk();
        let w_k_audio = mk();
        let w_v_audio = mk();
        let w_q_visual = mk();
        let w_k_visual = mk();
        let w_v_visual = mk();
        Self {
            w_q_audio,
            w_k_audio,
            w_v_audio,
            w_q_visual,
            w_k_visual,
            w_v_visual,
        }
    }

    pub fn identity(d: usize) -> Self {
        let eye = Array2::eye(d);
        Self {
            w_q_audio: eye.clone(),
            w_k_audio: eye.clone(),
            w_v_audio: eye.clone(),
            w_q_visual: eye.clone(),
            w_k_visual: eye.clone(),
            w_v_visual: eye,
        }
    }

    pub fn zeros(d: usize) -> Self {
        let z = Array2::zeros((d, d));
        Self {
            w_q_audio: z.clone(),
            w_k_audio: z.clone(),
            w_v_audio: z.clone(),
            w_q_visual: z.clone(),
            w_k_visual: z.clone(),
            w_v_visual: z,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q_audio.nrows()
    }

    pub fn param_count(&self) -> usize {
        6 * self.w_q_audio.len()
    }

    pub fn matrices(&self) -> [(&'static str, &Array2<f64>); 6] {
        [
            ("hca.w_q_audio", &self.w_q_audio),
            ("hca.w_k_audio", &self.w_k_audio),
            ("hca.w_v_audio", &self.w_v_audio),
            ("hca.w_q_visual", &self.w_q_visual),
            ("hca.w_k_visual", &self.w_k_visual),
            ("hca.w_v_visual", &self.w_v_visual),
        ]
    }

    pub fn matrices_mut(&mut self) -> [&mut Array2<f64>; 6] {
        [
            &mut self.w_q_audio,
            &mut self.w_k_audio,
            &mut self.w_v_audio,
            &mut self.w_q_visual,
            &mut self.w_k_visual,
            &mut self.w_v_visual,
        ]
    }
}

/// Row-wise exp_0 of a Euclidean token sequence.
pub fn project_to_ball(h: &TokenSequence) -> Result<BallBatch> {
    if h.iter().any(|x| !x.is_finite()) {
        return Err(FocaError::NonFinite {
            context: "project_to_ball input".into(),
        });
    }
    BallBatch::new(project_rows(h))
}

fn project_rows(h: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(h.raw_dim());
    for (mut o, row) in out.outer_iter_mut().zip(h.outer_iter()) {
        o.assign(&exp0(row));
    }
    out
}

/// Mobius matrix application per row: exp_0(W log_0(x)).
/// Returns (Q, K, V) for the selected modality.
pub fn make_qkv(
    h_ball: &BallBatch,
    params: &HcaParams,
    modality: Modality,
) -> Result<(BallBatch, BallBatch, BallBatch)> {
    let d = h_ball.ncols();
    if params.dim() != d {
        return Err(FocaError::ShapeMismatch {
            context: "make_qkv".into(),
            detail: format!("tokens have d = {d}, params have d = {}", params.dim()),
        });
    }
    let tan = log_rows(&h_ball.as_array().to_owned());
    let (wq, wk, wv) = match modality {
        Modality::Audio => (&params.w_q_audio, &params.w_k_audio, &params.w_v_audio),
        Modality::Visual => (&params.w_q_visual, &params.w_k_visual, &params.w_v_visual),
    };
    Ok((
        BallBatch::new(project_rows(&tan.dot(&wq.t())))?,
        BallBatch::new(project_rows(&tan.dot(&wk.t())))?,
        BallBatch::new(project_rows(&tan.dot(&wv.t())))?,
    ))
}

fn log_rows(p: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.raw_dim());
    for (mut o, row) in out.outer_iter_mut().zip(p.outer_iter()) {
        o.assign(&log0(row));
    }
    out
}

/// Softmax of negative hyperbolic distances, row-wise with max-subtraction.
pub fn attention_weights(
    q: &BallBatch,
    k: &BallBatch,
    direction: Direction,
) -> Result<AttentionWeights> {
    if q.ncols() != k.ncols() {
        return Err(FocaError::ShapeMismatch {
            context: "attention_weights".into(),
            detail: format!("queries have d = {}, keys d = {}", q.ncols(), k.ncols()),
        });
    }
    let dmat = distance_matrix(&q.as_array().to_owned(), &k.as_array().to_owned());
    Ok(AttentionWeights {
        alpha: softmax_neg_rows(&dmat),
        direction,
    })
}

fn distance_matrix(q: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let mut d = Array2::zeros((q.nrows(), k.nrows()));
    for (i, qi) in q.outer_iter().enumerate() {
        for (j, kj) in k.outer_iter().enumerate() {
            d[[i, j]] = dist(qi, kj);
        }
    }
    d
}

fn softmax_neg_rows(dmat: &Array2<f64>) -> Array2<f64> {
    let mut alpha = Array2::zeros(dmat.raw_dim());
    for (mut arow, drow) in alpha.outer_iter_mut().zip(dmat.outer_iter()) {
        // scores are -d; distances can reach ~23 near the clamp boundary
        let m = drow.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for (a, &dv) in arow.iter_mut().zip(drow.iter()) {
            *a = (m - dv).exp();
            sum += *a;
        }
        arow.mapv_inplace(|a| a / sum);
    }
    alpha
}

/// Left-fold aggregation `(+)_j alpha[i][j] (*) v_j`, ascending j, the fold
/// seeded with the first scaled term.
pub fn aggregate(alpha: &AttentionWeights, v: &BallBatch) -> Result<BallBatch> {
    if alpha.alpha.ncols() != v.nrows() {
        return Err(FocaError::ShapeMismatch {
            context: "aggregate".into(),
            detail: format!(
                "alpha has {} columns, values have {} rows",
                alpha.alpha.ncols(),
                v.nrows()
            ),
        });
    }
    let (out, _) = aggregate_cached(&alpha.alpha, &v.as_array().to_owned());
    BallBatch::new(out)
}

struct AggCache {
    /// scaled[i] holds alpha[i][j] (*) v_j for all j, row-major by j.
    scaled: Vec<Array2<f64>>,
    /// acc[i][j] is the fold prefix after consuming term j.
    acc: Vec<Array2<f64>>,
}

fn aggregate_cached(alpha: &Array2<f64>, v: &Array2<f64>) -> (Array2<f64>, AggCache) {
    let n_q = alpha.nrows();
    let n_k = alpha.ncols();
    let d = v.ncols();
    let mut out = Array2::zeros((n_q, d));
    let mut scaled_all = Vec::with_capacity(n_q);
    let mut acc_all = Vec::with_capacity(n_q);
    for i in 0..n_q {
        let mut scaled = Array2::zeros((n_k, d));
        let mut acc = Array2::zeros((n_k, d));
        for j in 0..n_k {
            let s = scale_value(alpha[[i, j]], v.row(j));
            scaled.row_mut(j).assign(&s);
            let a = if j == 0 {
                s
            } else {
                madd(acc.row(j - 1), scaled.row(j))
            };
            acc.row_mut(j).assign(&a);
        }
        out.row_mut(i).assign(&acc.row(n_k - 1));
        scaled_all.push(scaled);
        acc_all.push(acc);
    }
    (
        out,
        AggCache {
            scaled: scaled_all,
            acc: acc_all,
        },
    )
}

// 1 (*) v = v holds exactly; tanh(atanh(x)) round-trips with rounding error,
// so the identity scalar is taken literally.
fn scale_value(r: f64, v: ArrayView1<f64>) -> Array1<f64> {
    if r == 1.0 {
        v.to_owned()
    } else {
        mscalar(r, v)
    }
}

/// Row-wise Mobius addition of the two directions followed by log_0.
pub fn fuse(o_av: &BallBatch, o_va: &BallBatch) -> Result<TokenSequence> {
    if o_av.as_array().dim() != o_va.as_array().dim() {
        return Err(FocaError::ShapeMismatch {
            context: "fuse".into(),
            detail: format!(
                "{:?} vs {:?}",
                o_av.as_array().dim(),
                o_va.as_array().dim()
            ),
        });
    }
    let (fused, _) = fuse_cached(
        &o_av.as_array().to_owned(),
        &o_va.as_array().to_owned(),
    );
    Ok(fused)
}

fn fuse_cached(o_av: &Array2<f64>, o_va: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut ball = Array2::zeros(o_av.raw_dim());
    let mut fused = Array2::zeros(o_av.raw_dim());
    for i in 0..o_av.nrows() {
        let f = madd(o_av.row(i), o_va.row(i));
        fused.row_mut(i).assign(&log0(f.view()));
        ball.row_mut(i).assign(&f);
    }
    (fused, ball)
}

/// Fused output plus both attention maps.
#[derive(Debug, Clone)]
pub struct HcaOutput {
    pub fused: TokenSequence,
    pub alpha_av: AttentionWeights,
    pub alpha_va: AttentionWeights,
}

/// Everything the backward pass needs, recorded during the forward pass.
pub struct HcaCache {
    h_a: Array2<f64>,
    h_v: Array2<f64>,
    ball_a: Array2<f64>,
    ball_v: Array2<f64>,
    tan_a: Array2<f64>,
    tan_v: Array2<f64>,
    /// Pre-exp0 projections, order: Qa, Ka, Va, Qv, Kv, Vv.
    z: [Array2<f64>; 6],
    q_a: Array2<f64>,
    k_a: Array2<f64>,
    v_a: Array2<f64>,
    q_v: Array2<f64>,
    k_v: Array2<f64>,
    v_v: Array2<f64>,
    alpha_av: Array2<f64>,
    alpha_va: Array2<f64>,
    agg_av: AggCache,
    agg_va: AggCache,
    o_av: Array2<f64>,
    o_va: Array2<f64>,
    fused_ball: Array2<f64>,
}

/// End-to-end forward. Errors on shape mismatch between the two sequences.
pub fn hca_forward(
    h_a: &TokenSequence,
    h_v: &TokenSequence,
    params: &HcaParams,
) -> Result<HcaOutput> {
    let (out, _) = hca_forward_cached(h_a, h_v, params)?;
    Ok(out)
}

/// Forward pass that also records intermediates for [`hca_backward`].
pub fn hca_forward_cached(
    h_a: &TokenSequence,
    h_v: &TokenSequence,
    params: &HcaParams,
) -> Result<(HcaOutput, HcaCache)> {
    if h_a.dim() != h_v.dim() {
        return Err(FocaError::ShapeMismatch {
            context: "hca_forward".into(),
            detail: format!("audio tokens {:?}, visual tokens {:?}", h_a.dim(), h_v.dim()),
        });
    }
    if params.dim() != h_a.ncols() {
        return Err(FocaError::ShapeMismatch {
            context: "hca_forward".into(),
            detail: format!("tokens d = {}, params d = {}", h_a.ncols(), params.dim()),
        });
    }

    let ball_a = project_rows(h_a);
    let ball_v = project_rows(h_v);
    let tan_a = log_rows(&ball_a);
    let tan_v = log_rows(&ball_v);

    let z = [
        tan_a.dot(&params.w_q_audio.t()),
        tan_a.dot(&params.w_k_audio.t()),
        tan_a.dot(&params.w_v_audio.t()),
        tan_v.dot(&params.w_q_visual.t()),
        tan_v.dot(&params.w_k_visual.t()),
        tan_v.dot(&params.w_v_visual.t()),
    ];
    let q_a = project_rows(&z[0]);
    let k_a = project_rows(&z[1]);
    let v_a = project_rows(&z[2]);
    let q_v = project_rows(&z[3]);
    let k_v = project_rows(&z[4]);
    let v_v = project_rows(&z[5]);

    let alpha_av = softmax_neg_rows(&distance_matrix(&q_a, &k_v));
    let alpha_va = softmax_neg_rows(&distance_matrix(&q_v, &k_a));

    let (o_av, agg_av) = aggregate_cached(&alpha_av, &v_v);
    let (o_va, agg_va) = aggregate_cached(&alpha_va, &v_a);

    let (fused, fused_ball) = fuse_cached(&o_av, &o_va);

    let out = HcaOutput {
        fused,
        alpha_av: AttentionWeights {
            alpha: alpha_av.clone(),
            direction: Direction::AudioToVisual,
        },
        alpha_va: AttentionWeights {
            alpha: alpha_va.clone(),
            direction: Direction::VisualToAudio,
        },
    };
    let cache = HcaCache {
        h_a: h_a.clone(),
        h_v: h_v.clone(),
        ball_a,
        ball_v,
        tan_a,
        tan_v,
        z,
        q_a,
        k_a,
        v_a,
        q_v,
        k_v,
        v_v,
        alpha_av,
        alpha_va,
        agg_av,
        agg_va,
        o_av,
        o_va,
        fused_ball,
    };
    Ok((out, cache))
}

/// Gradients of a scalar loss wrt the inputs and all six projection matrices.
pub struct HcaGrads {
    pub d_h_a: Array2<f64>,
    pub d_h_v: Array2<f64>,
    pub d_params: HcaParams,
}

/// Reverse pass over a recorded forward. `grad_fused` is dL/d(fused output).
pub fn hca_backward(cache: &HcaCache, params: &HcaParams, grad_fused: &Array2<f64>) -> HcaGrads {
    let n = cache.h_a.nrows();
    let d = cache.h_a.ncols();

    // fuse: log0 then the final Mobius addition.
    let mut g_o_av = Array2::zeros((n, d));
    let mut g_o_va = Array2::zeros((n, d));
    for i in 0..n {
        let g_ball = log0_vjp(cache.fused_ball.row(i), grad_fused.row(i));
        let (ga, gv) = madd_vjp(cache.o_av.row(i), cache.o_va.row(i), g_ball.view());
        g_o_av.row_mut(i).assign(&ga);
        g_o_va.row_mut(i).assign(&gv);
    }

    // aggregation folds, one per direction.
    let (g_alpha_av, g_v_v) = aggregate_backward(&cache.agg_av, &cache.alpha_av, &cache.v_v, &g_o_av);
    let (g_alpha_va, g_v_a) = aggregate_backward(&cache.agg_va, &cache.alpha_va, &cache.v_a, &g_o_va);

    // attention softmax over negative distances.
    let (g_q_a, g_k_v) = attention_backward(&cache.alpha_av, &cache.q_a, &cache.k_v, &g_alpha_av);
    let (g_q_v, g_k_a) = attention_backward(&cache.alpha_va, &cache.q_v, &cache.k_a, &g_alpha_va);

    // Q/K/V projections: exp0 rows of z, z = tan . W^T.
    let mut d_params = HcaParams::zeros(d);
    let mut g_tan_a = Array2::zeros((n, d));
    let mut g_tan_v = Array2::zeros((n, d));
    {
        let balls = [
            (&cache.q_a, &g_q_a),
            (&cache.k_a, &g_k_a),
            (&cache.v_a, &g_v_a),
            (&cache.q_v, &g_q_v),
            (&cache.k_v, &g_k_v),
            (&cache.v_v, &g_v_v),
        ];
        let ws = [
            &params.w_q_audio,
            &params.w_k_audio,
            &params.w_v_audio,
            &params.w_q_visual,
            &params.w_k_visual,
            &params.w_v_visual,
        ];
        let gws = d_params.matrices_mut();
        for (idx, ((_ball, g_ball), w)) in balls.iter().zip(ws.iter()).enumerate() {
            let mut g_z = Array2::zeros((n, d));
            for i in 0..n {
                g_z.row_mut(i)
                    .assign(&exp0_vjp(cache.z[idx].row(i), g_ball.row(i)));
            }
            let tan = if idx < 3 { &cache.tan_a } else { &cache.tan_v };
            *gws[idx] = g_z.t().dot(tan);
            let g_tan = g_z.dot(*w);
            if idx < 3 {
                g_tan_a += &g_tan;
            } else {
                g_tan_v += &g_tan;
            }
        }
    }

    // ball projection: tan = log0(ball), ball = exp0(h).
    let mut d_h_a = Array2::zeros((n, d));
    let mut d_h_v = Array2::zeros((n, d));
    for i in 0..n {
        let g_ball = log0_vjp(cache.ball_a.row(i), g_tan_a.row(i));
        d_h_a
            .row_mut(i)
            .assign(&exp0_vjp(cache.h_a.row(i), g_ball.view()));
        let g_ball = log0_vjp(cache.ball_v.row(i), g_tan_v.row(i));
        d_h_v
            .row_mut(i)
            .assign(&exp0_vjp(cache.h_v.row(i), g_ball.view()));
    }

    HcaGrads {
        d_h_a,
        d_h_v,
        d_params,
    }
}

fn aggregate_backward(
    agg: &AggCache,
    alpha: &Array2<f64>,
    v: &Array2<f64>,
    g_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let n_q = alpha.nrows();
    let n_k = alpha.ncols();
    let d = v.ncols();
    let mut g_alpha = Array2::zeros((n_q, n_k));
    let mut g_v = Array2::zeros((n_k, d));
    for i in 0..n_q {
        let scaled = &agg.scaled[i];
        let acc = &agg.acc[i];
        let mut g_acc = g_out.row(i).to_owned();
        for j in (1..n_k).rev() {
            let (g_prev, g_scaled) = madd_vjp(acc.row(j - 1), scaled.row(j), g_acc.view());
            let (g_a, g_vj) = mscalar_vjp(alpha[[i, j]], v.row(j), g_scaled.view());
            g_alpha[[i, j]] += g_a;
            g_v.row_mut(j).zip_mut_with(&g_vj, |t, s| *t += s);
            g_acc = g_prev;
        }
        let (g_a, g_vj) = mscalar_vjp(alpha[[i, 0]], v.row(0), g_acc.view());
        g_alpha[[i, 0]] += g_a;
        g_v.row_mut(0).zip_mut_with(&g_vj, |t, s| *t += s);
    }
    (g_alpha, g_v)
}

fn attention_backward(
    alpha: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    g_alpha: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let n_q = alpha.nrows();
    let n_k = alpha.ncols();
    let d = q.ncols();
    let mut g_q = Array2::zeros((n_q, d));
    let mut g_k = Array2::zeros((n_k, d));
    for i in 0..n_q {
        let arow = alpha.index_axis(Axis(0), i);
        let grow = g_alpha.index_axis(Axis(0), i);
        let inner = arow.dot(&grow);
        for j in 0..n_k {
            // softmax backward on scores s = -d, then through the distance.
            let g_score = arow[j] * (grow[j] - inner);
            let g_d = -g_score;
            if g_d == 0.0 {
                continue;
            }
            let (gq, gk) = dist_vjp(q.row(i), k.row(j), g_d);
            g_q.row_mut(i).zip_mut_with(&gq, |t, s| *t += s);
            g_k.row_mut(j).zip_mut_with(&gk, |t, s| *t += s);
        }
    }
    (g_q, g_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poincare::{self, BallPoint};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(a: Array2<f64>) -> BallBatch {
        BallBatch::new(a).unwrap()
    }

    #[test]
    fn project_zero_sequence_stays_at_origin() {
        let h = Array2::zeros((2, 3));
        let b = project_to_ball(&h).unwrap();
        assert_eq!(b.as_array(), Array2::<f64>::zeros((2, 3)));
    }

    #[test]
    fn project_single_token_matches_tanh_oracle() {
        let h = array![[0.5493061, 0.0, 0.0]];
        let b = project_to_ball(&h).unwrap();
        assert!((b.as_array()[[0, 0]] - 0.49999996674945813).abs() < 1e-12);
    }

    #[test]
    fn project_output_rows_inside_ball() {
        let h = array![[100.0, -50.0], [0.001, 0.002], [3.0, 4.0]];
        let b = project_to_ball(&h).unwrap();
        for row in b.as_array().outer_iter() {
            assert!(poincare::norm(row) < 1.0);
        }
    }

    #[test]
    fn make_qkv_identity_matrices_reproduce_input() {
        let h = batch(array![[0.3, -0.2], [0.05, 0.6]]);
        let params = HcaParams::identity(2);
        let (q, k, v) = make_qkv(&h, &params, Modality::Audio).unwrap();
        for out in [&q, &k, &v] {
            for (a, b) in out.as_array().iter().zip(h.as_array().iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn make_qkv_zero_matrices_collapse_to_origin() {
        let h = batch(array![[0.3, -0.2], [0.05, 0.6]]);
        let params = HcaParams::zeros(2);
        let (q, _, _) = make_qkv(&h, &params, Modality::Visual).unwrap();
        assert_eq!(q.as_array(), Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn make_qkv_matches_straight_line_recomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = project_rows(&Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0)));
        let params = HcaParams::init(8, &mut rng);
        let (q, _, _) = make_qkv(&batch(h.clone()), &params, Modality::Audio).unwrap();
        // Independent recomposition, scalar loops only.
        for i in 0..4 {
            let t = log0(h.row(i));
            let mut z = vec![0.0; 8];
            for r in 0..8 {
                for c in 0..8 {
                    z[r] += params.w_q_audio[[r, c]] * t[c];
                }
            }
            let expect = exp0(ArrayView1::from(&z));
            for c in 0..8 {
                assert!((q.as_array()[[i, c]] - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_uniform_when_keys_identical() {
        let q = batch(array![[0.1, 0.2], [-0.3, 0.1]]);
        let k = batch(array![[0.4, 0.0], [0.4, 0.0], [0.4, 0.0]]);
        let w = attention_weights(&q, &k, Direction::AudioToVisual).unwrap();
        for row in w.alpha.outer_iter() {
            for &a in row {
                assert!((a - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_sharp_when_query_sits_on_a_key() {
        // Distances (0, >=5, >=5, >=5): softmax gives alpha > 0.98.
        let q = batch(array![[0.9, 0.0]]);
        let far = -0.9;
        let k = batch(array![[far, 0.0], [far, 0.01], [0.9, 0.0], [far, -0.01]]);
        let d02 = poincare::dist(q.as_array().row(0), k.as_array().row(0));
        assert!(d02 > 5.0, "far keys must be at distance >= 5, got {d02}");
        let w = attention_weights(&q, &k, Direction::AudioToVisual).unwrap();
        assert!(w.alpha[[0, 2]] > 0.97);
    }

    #[test]
    fn attention_matches_direct_formula_in_1d() {
        let q = batch(array![[0.2], [-0.5]]);
        let k = batch(array![[0.6], [-0.1]]);
        let w = attention_weights(&q, &k, Direction::VisualToAudio).unwrap();
        for i in 0..2 {
            let d0 = poincare::dist(q.as_array().row(i), k.as_array().row(0));
            let d1 = poincare::dist(q.as_array().row(i), k.as_array().row(1));
            let e0 = (-d0).exp();
            let e1 = (-d1).exp();
            assert!((w.alpha[[i, 0]] - e0 / (e0 + e1)).abs() < 1e-12);
            assert!((w.alpha[[i, 1]] - e1 / (e0 + e1)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = project_rows(&Array2::from_shape_fn((5, 6), |_| rng.gen_range(-2.0..2.0)));
        let k = project_rows(&Array2::from_shape_fn((7, 6), |_| rng.gen_range(-2.0..2.0)));
        let w = attention_weights(&batch(q), &batch(k), Direction::AudioToVisual).unwrap();
        AttentionWeights::new(w.alpha, Direction::AudioToVisual).unwrap();
    }

    #[test]
    fn aggregate_one_hot_selects_exactly() {
        let v = batch(array![[0.1, 0.2], [-0.4, 0.3], [0.25, -0.6]]);
        let alpha = AttentionWeights {
            alpha: array![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
            direction: Direction::AudioToVisual,
        };
        let out = aggregate(&alpha, &v).unwrap();
        assert_eq!(out.as_array().row(0), v.as_array().row(2));
        assert_eq!(out.as_array().row(1), v.as_array().row(1));
    }

    #[test]
    fn aggregate_singleton_is_identity() {
        let v = batch(array![[0.3, -0.1]]);
        let alpha = AttentionWeights {
            alpha: array![[1.0]],
            direction: Direction::VisualToAudio,
        };
        let out = aggregate(&alpha, &v).unwrap();
        assert_eq!(out.as_array().row(0), v.as_array().row(0));
    }

    #[test]
    fn aggregate_matches_step_by_step_fold_in_1d() {
        let v = batch(array![[0.5], [-0.2], [0.8]]);
        let alpha = AttentionWeights {
            alpha: array![[0.2, 0.3, 0.5]],
            direction: Direction::AudioToVisual,
        };
        let out = aggregate(&alpha, &v).unwrap();
        // ((a1*v1) (+) (a2*v2)) (+) (a3*v3) unrolled by hand in 1-D.
        let s = |r: f64, x: f64| (r * x.atanh()).tanh();
        let add = |x: f64, y: f64| (x + y) / (1.0 + x * y);
        let expect = add(add(s(0.2, 0.5), s(0.3, -0.2)), s(0.5, 0.8));
        assert!((out.as_array()[[0, 0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn aggregate_one_hot_permutation_equivariance() {
        let v = batch(array![[0.1, 0.2], [-0.4, 0.3], [0.25, -0.6]]);
        let perm = [2usize, 0, 1];
        let mut pv = Array2::zeros((3, 2));
        for (dst, &src) in perm.iter().enumerate() {
            pv.row_mut(dst).assign(&v.as_array().row(src));
        }
        let one_hot = |j: usize| {
            let mut row = [0.0; 3];
            row[j] = 1.0;
            row
        };
        // Selecting token sigma(i) from v equals selecting i from permuted v.
        for i in 0..3 {
            let a1 = AttentionWeights {
                alpha: Array2::from_shape_vec((1, 3), one_hot(perm[i]).to_vec()).unwrap(),
                direction: Direction::AudioToVisual,
            };
            let a2 = AttentionWeights {
                alpha: Array2::from_shape_vec((1, 3), one_hot(i).to_vec()).unwrap(),
                direction: Direction::AudioToVisual,
            };
            let o1 = aggregate(&a1, &v).unwrap();
            let o2 = aggregate(&a2, &batch(pv.clone())).unwrap();
            assert_eq!(o1.as_array(), o2.as_array());
        }
    }

    #[test]
    fn fuse_right_identity_and_inverse() {
        let o_av = batch(array![[0.3, -0.2], [0.1, 0.4]]);
        let zeros = batch(Array2::zeros((2, 2)));
        let fused = fuse(&o_av, &zeros).unwrap();
        for i in 0..2 {
            let expect = log0(o_av.as_array().row(i));
            for j in 0..2 {
                assert!((fused[[i, j]] - expect[j]).abs() < 1e-12);
            }
        }
        let neg = batch(-&o_av.as_array().to_owned());
        let zeroed = fuse(&o_av, &neg).unwrap();
        for x in zeroed.iter() {
            assert!(x.abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_matches_recomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = project_rows(&Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.5..1.5)));
        let b = project_rows(&Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.5..1.5)));
        let fused = fuse(&batch(a.clone()), &batch(b.clone())).unwrap();
        for i in 0..3 {
            let x = BallPoint::new(a.row(i).to_owned()).unwrap();
            let y = BallPoint::new(b.row(i).to_owned()).unwrap();
            let expect = poincare::log_origin(&poincare::mobius_add(&x, &y));
            for j in 0..4 {
                assert!((fused[[i, j]] - expect.coords()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_zero_inputs_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = HcaParams::init(4, &mut rng);
        let h = Array2::zeros((3, 4));
        let out = hca_forward(&h, &h, &params).unwrap();
        for x in out.fused.iter() {
            assert_eq!(*x, 0.0);
        }
    }

    #[test]
    fn forward_scalar_instance_matches_hand_trace() {
        // n = 1, d = 1: every Mobius op collapses to tanh-space addition, so
        // the fused output is exactly w_v_visual*h_v + w_v_audio*h_a = 0.51.
        let params = HcaParams {
            w_q_audio: array![[0.9]],
            w_k_audio: array![[0.8]],
            w_v_audio: array![[1.1]],
            w_q_visual: array![[0.7]],
            w_k_visual: array![[1.2]],
            w_v_visual: array![[0.5]],
        };
        let out = hca_forward(&array![[0.6]], &array![[-0.3]], &params).unwrap();
        assert!((out.fused[[0, 0]] - 0.51).abs() < 1e-12);
        assert_eq!(out.alpha_av.alpha[[0, 0]], 1.0);
        assert_eq!(out.alpha_va.alpha[[0, 0]], 1.0);
    }

    #[test]
    fn forward_shape_mismatch_is_an_error() {
        let params = HcaParams::identity(2);
        let a = Array2::zeros((2, 2));
        let b = Array2::zeros((3, 2));
        assert!(hca_forward(&a, &b, &params).is_err());
    }

    #[test]
    fn forward_output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = HcaParams::init(6, &mut rng);
        let mk = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            Array2::from_shape_fn((5, 6), |_| r.gen_range(-1.0..1.0))
        };
        let out = hca_forward(&mk(1), &mk(2), &params).unwrap();
        assert_eq!(out.fused.dim(), (5, 6));
        assert_eq!(out.alpha_av.alpha.dim(), (5, 5));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 3;
        let d = 4;
        let params = HcaParams::init(d, &mut rng);
        let h_a = Array2::from_shape_fn((n, d), |_| rng.gen_range(-0.8..0.8));
        let h_v = Array2::from_shape_fn((n, d), |_| rng.gen_range(-0.8..0.8));
        // Scalar objective: weighted sum of the fused output.
        let wsum = Array2::from_shape_fn((n, d), |(i, j)| 0.3 + 0.1 * i as f64 - 0.05 * j as f64);
        let loss = |ha: &Array2<f64>, hv: &Array2<f64>, p: &HcaParams| -> f64 {
            let out = hca_forward(ha, hv, p).unwrap();
            (&out.fused * &wsum).sum()
        };

        let (_, cache) = hca_forward_cached(&h_a, &h_v, &params).unwrap();
        let grads = hca_backward(&cache, &params, &wsum);

        let h = 1e-5;
        let check = |got: f64, want: f64| {
            let err = (got - want).abs();
            assert!(
                err / want.abs().max(1e-4) < 1e-3,
                "gradient mismatch: got {got}, want {want}"
            );
        };
        for i in 0..n {
            for j in 0..d {
                let mut hp = h_a.clone();
                hp[[i, j]] += h;
                let mut hm = h_a.clone();
                hm[[i, j]] -= h;
                check(
                    grads.d_h_a[[i, j]],
                    (loss(&hp, &h_v, &params) - loss(&hm, &h_v, &params)) / (2.0 * h),
                );
                let mut vp = h_v.clone();
                vp[[i, j]] += h;
                let mut vm = h_v.clone();
                vm[[i, j]] -= h;
                check(
                    grads.d_h_v[[i, j]],
                    (loss(&h_a, &vp, &params) - loss(&h_a, &vm, &params)) / (2.0 * h),
                );
            }
        }
        for w_idx in 0..6 {
            for r in 0..d {
                for c in 0..d {
                    let mut pp = params.clone();
                    pp.matrices_mut()[w_idx][[r, c]] += h;
                    let mut pm = params.clone();
                    pm.matrices_mut()[w_idx][[r, c]] -= h;
                    check(
                        grads.d_params.matrices()[w_idx].1[[r, c]],
                        (loss(&h_a, &h_v, &pp) - loss(&h_a, &h_v, &pm)) / (2.0 * h),
                    );
                }
            }
        }
    }
}
