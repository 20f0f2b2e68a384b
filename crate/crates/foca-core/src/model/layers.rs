//! Plain layers with explicit forward caches and hand-written backward
//! passes: valid 1-D convolution, width-2 max pooling, dense, inverted
//! dropout, and the log-sum-exp softmax / cross-entropy pair.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FocaError, Result};

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;

/// Two conv/pool stages: conv(k=3, valid, stride 1) + ReLU + maxpool(2, 2).
/// Channel counts are carried in the arrays; the production model uses
/// (64, 128) per the architecture, tiny tests shrink them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    /// c1 x 3 (single input channel).
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// c2 x c1 x 3.
    pub w2: Array3<f64>,
    pub b2: Array1<f64>,
}

impl ConvBlockParams {
    pub const STANDARD_C1: usize = 64;
    pub const STANDARD_C2: usize = 128;

    pub fn init<R: Rng>(c1: usize, c2: usize, rng: &mut R) -> Self {
        let scale: f64 = std::env::var("FOCA_CONV_INIT")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(1.0);
        let s1 = scale / (KERNEL as f64).sqrt();
        let s2 = scale / ((c1 * KERNEL) as f64).sqrt();
        Self {
            w1: Array2::from_shape_fn((c1, KERNEL), |_| rng.gen_range(-s1..s1)),
            b1: Array1::zeros(c1),
            w2: Array3::from_shape_fn((c2, c1, KERNEL), |_| rng.gen_range(-s2..s2)),
            b2: Array1::zeros(c2),
        }
    }

    /// The 64/128-filter block from the architecture.
    pub fn standard<R: Rng>(rng: &mut R) -> Self {
        Self::init(Self::STANDARD_C1, Self::STANDARD_C2, rng)
    }

    pub fn zeros(c1: usize, c2: usize) -> Self {
        Self {
            w1: Array2::zeros((c1, KERNEL)),
            b1: Array1::zeros(c1),
            w2: Array3::zeros((c2, c1, KERNEL)),
            b2: Array1::zeros(c2),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c1(), self.c2())
    }

    pub fn c1(&self) -> usize {
        self.w1.nrows()
    }

    pub fn c2(&self) -> usize {
        self.w2.dim().0
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Token-sequence shape (n, d) this block emits for input length `len`,
    /// or an error when `len` cannot survive two valid convs + pools.
    pub fn out_shape(&self, len: usize) -> Result<(usize, usize)> {
        let n = conv_block_out_len(len)?;
        Ok((n, self.c2()))
    }
}

/// Length recurrence: conv (len-2), pool (floor /2), twice.
pub fn conv_block_out_len(len: usize) -> Result<usize> {
    let after = |l: usize| -> Option<usize> {
        let c = l.checked_sub(KERNEL - 1)?;
        let p = c / POOL;
        (p > 0).then_some(p)
    };
    after(len)
        .and_then(after)
        .ok_or_else(|| FocaError::ShapeMismatch {
            context: "conv_block".into(),
            detail: format!("input length {len} too short for two valid convs + pools"),
        })
}

pub struct ConvBlockCache {
    pub x: Array1<f64>,
    pub pre1: Array2<f64>,
    pub argmax1: Array2<usize>,
    pub p1: Array2<f64>,
    pub pre2: Array2<f64>,
    pub argmax2: Array2<usize>,
    /// Output tokens, n x c2.
    pub tokens: Array2<f64>,
}

/// Forward pass; output is arranged as tokens (temporal position x channel).
pub fn conv_block_forward(x: ArrayView1<f64>, p: &ConvBlockParams) -> Result<ConvBlockCache> {
    conv_block_out_len(x.len())?;
    let c1 = p.c1();
    let c2 = p.c2();
    let l1 = x.len() - (KERNEL - 1);

    let mut pre1 = Array2::zeros((c1, l1));
    for f in 0..c1 {
        for t in 0..l1 {
            let mut acc = p.b1[f];
            for u in 0..KERNEL {
                acc += p.w1[[f, u]] * x[t + u];
            }
            pre1[[f, t]] = acc;
        }
    }
    let (p1, argmax1) = maxpool_relu(&pre1);

    let n1 = p1.ncols();
    let l2 = n1 - (KERNEL - 1);
    let mut pre2 = Array2::zeros((c2, l2));
    for g in 0..c2 {
        for t in 0..l2 {
            let mut acc = p.b2[g];
            for f in 0..c1 {
                for u in 0..KERNEL {
                    acc += p.w2[[g, f, u]] * p1[[f, t + u]];
                }
            }
            pre2[[g, t]] = acc;
        }
    }
    let (p2, argmax2) = maxpool_relu(&pre2);

    let tokens = p2.t().to_owned();
    Ok(ConvBlockCache {
        x: x.to_owned(),
        pre1,
        argmax1,
        p1,
        pre2,
        argmax2,
        tokens,
    })
}

/// ReLU then width-2/stride-2 max pooling (floor); ties keep the first
/// position for determinism.
fn maxpool_relu(pre: &Array2<f64>) -> (Array2<f64>, Array2<usize>) {
    let c = pre.nrows();
    let n = pre.ncols() / POOL;
    let mut out = Array2::zeros((c, n));
    let mut arg = Array2::zeros((c, n));
    for f in 0..c {
        for t in 0..n {
            let i0 = POOL * t;
            let a = pre[[f, i0]].max(0.0);
            let b = pre[[f, i0 + 1]].max(0.0);
            if b > a {
                out[[f, t]] = b;
                arg[[f, t]] = i0 + 1;
            } else {
                out[[f, t]] = a;
                arg[[f, t]] = i0;
            }
        }
    }
    (out, arg)
}

/// Backward through the block; returns parameter gradients (input gradients
/// are not needed, the inputs are data).
pub fn conv_block_backward(
    p: &ConvBlockParams,
    cache: &ConvBlockCache,
    g_tokens: &Array2<f64>,
) -> ConvBlockParams {
    let c1 = p.c1();
    let c2 = p.c2();
    let mut grads = p.zeros_like();

    // tokens = pooled2^T
    let n2 = g_tokens.nrows();
    let mut g_pre2: Array2<f64> = Array2::zeros(cache.pre2.raw_dim());
    for g in 0..c2 {
        for t in 0..n2 {
            let src = cache.argmax2[[g, t]];
            if cache.pre2[[g, src]] > 0.0 {
                g_pre2[[g, src]] += g_tokens[[t, g]];
            }
        }
    }

    let l2 = cache.pre2.ncols();
    let mut g_p1: Array2<f64> = Array2::zeros(cache.p1.raw_dim());
    for g in 0..c2 {
        for t in 0..l2 {
            let gv = g_pre2[[g, t]];
            if gv == 0.0 {
                continue;
            }
            grads.b2[g] += gv;
            for f in 0..c1 {
                for u in 0..KERNEL {
                    grads.w2[[g, f, u]] += gv * cache.p1[[f, t + u]];
                    g_p1[[f, t + u]] += gv * p.w2[[g, f, u]];
                }
            }
        }
    }

    let n1 = cache.p1.ncols();
    let mut g_pre1: Array2<f64> = Array2::zeros(cache.pre1.raw_dim());
    for f in 0..c1 {
        for t in 0..n1 {
            let src = cache.argmax1[[f, t]];
            if cache.pre1[[f, src]] > 0.0 {
                g_pre1[[f, src]] += g_p1[[f, t]];
            }
        }
    }

    let l1 = cache.pre1.ncols();
    for f in 0..c1 {
        for t in 0..l1 {
            let gv = g_pre1[[f, t]];
            if gv == 0.0 {
                continue;
            }
            grads.b1[f] += gv;
            for u in 0..KERNEL {
                grads.w1[[f, u]] += gv * cache.x[t + u];
            }
        }
    }

    grads
}

/// Fully connected layer, y = W x + b.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out x in.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn init<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let s = 1.0 / (n_in as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((n_out, n_in), |_| rng.gen_range(-s..s)),
            b: Array1::zeros(n_out),
        }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w: Array2::zeros((n_out, n_in)),
            b: Array1::zeros(n_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.w.ncols(), self.w.nrows())
    }

    pub fn n_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.w.dot(&x) + &self.b
    }

    /// Accumulates parameter grads into `grads`, returns grad wrt x.
    pub fn backward(
        &self,
        x: ArrayView1<f64>,
        g_y: ArrayView1<f64>,
        grads: &mut Dense,
    ) -> Array1<f64> {
        for (o, gy) in g_y.iter().enumerate() {
            if *gy == 0.0 {
                continue;
            }
            grads.b[o] += gy;
            let mut row = grads.w.row_mut(o);
            for (i, xv) in x.iter().enumerate() {
                row[i] += gy * xv;
            }
        }
        self.w.t().dot(&g_y)
    }
}

pub fn relu(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(pre: &Array1<f64>, g: &Array1<f64>) -> Array1<f64> {
    Array1::from_shape_fn(g.len(), |i| if pre[i] > 0.0 { g[i] } else { 0.0 })
}

/// Inverted dropout: kept units are scaled by 1/(1-rate) so evaluation needs
/// no rescaling. The mask is drawn from a caller-provided seeded stream.
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, mask_seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(mask_seed),
        }
    }

    /// Returns (output, mask); mask entries are 0 or the keep-scale.
    pub fn apply(&mut self, x: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        if self.rate == 0.0 {
            return (x.clone(), Array1::ones(x.len()));
        }
        let keep = 1.0 - self.rate;
        let mask = Array1::from_shape_fn(x.len(), |_| {
            if self.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        (x * &mask, mask)
    }
}

/// Numerically safe softmax via log-sum-exp.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|z| (z - m).exp());
    let sum = exps.sum();
    exps / sum
}

/// Mean-free single-sample cross-entropy: loss = lse(z) - z[label].
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.mapv(|z| (z - m).exp()).sum().ln();
    lse - logits[label]
}

/// d(loss)/d(logits) = softmax(z) - onehot(label).
pub fn cross_entropy_grad(logits: ArrayView1<f64>, label: usize) -> Array1<f64> {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn out_len_matches_independent_recurrence() {
        // Straight-line calculator: conv then pool, twice.
        let oracle = |l: usize| -> Option<usize> {
            let a = (l.checked_sub(2)?) / 2;
            let b = (a.checked_sub(2)?) / 2;
            (b > 0).then_some(b)
        };
        for l in 0..2000 {
            match (conv_block_out_len(l), oracle(l)) {
                (Ok(n), Some(m)) => assert_eq!(n, m, "L = {l}"),
                (Err(_), None) => {}
                (got, want) => panic!("L = {l}: {got:?} vs {want:?}"),
            }
        }
        assert_eq!(conv_block_out_len(768).unwrap(), 190);
        assert_eq!(conv_block_out_len(16).unwrap(), 2);
        assert!(conv_block_out_len(8).is_err());
        assert!(conv_block_out_len(9).is_err());
        assert_eq!(conv_block_out_len(10).unwrap(), 1);
    }

    #[test]
    fn forward_shape_768_gives_190_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ConvBlockParams::standard(&mut rng);
        let x = Array1::from_shape_fn(768, |i| (i as f64 * 0.01).sin());
        let cache = conv_block_forward(x.view(), &p).unwrap();
        assert_eq!(cache.tokens.dim(), (190, 128));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ConvBlockParams::standard(&mut rng);
        p.b1.fill(0.0);
        p.b2.fill(0.0);
        let x = Array1::zeros(32);
        let cache = conv_block_forward(x.view(), &p).unwrap();
        assert!(cache.tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_brute_force_oracle_on_l16() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ConvBlockParams::init(3, 4, &mut rng);
        let x = Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0));
        let cache = conv_block_forward(x.view(), &p).unwrap();

        // Independent direct evaluation with plain vectors.
        let conv1: Vec<Vec<f64>> = (0..3)
            .map(|f| {
                (0..14)
                    .map(|t| {
                        (p.b1[f] + (0..3).map(|u| p.w1[[f, u]] * x[t + u]).sum::<f64>()).max(0.0)
                    })
                    .collect()
            })
            .collect();
        let pool1: Vec<Vec<f64>> = conv1
            .iter()
            .map(|row| (0..7).map(|t| row[2 * t].max(row[2 * t + 1])).collect())
            .collect();
        let conv2: Vec<Vec<f64>> = (0..4)
            .map(|g| {
                (0..5)
                    .map(|t| {
                        (p.b2[g]
                            + (0..3)
                                .flat_map(|f| (0..3).map(move |u| (f, u)))
                                .map(|(f, u)| p.w2[[g, f, u]] * pool1[f][t + u])
                                .sum::<f64>())
                        .max(0.0)
                    })
                    .collect()
            })
            .collect();
        let pool2: Vec<Vec<f64>> = conv2
            .iter()
            .map(|row| (0..2).map(|t| row[2 * t].max(row[2 * t + 1])).collect())
            .collect();

        assert_eq!(cache.tokens.dim(), (2, 4));
        for t in 0..2 {
            for g in 0..4 {
                assert!((cache.tokens[[t, g]] - pool2[g][t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ConvBlockParams::init(2, 3, &mut rng);
        let x = Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0));
        let wsum = Array2::from_shape_fn((2, 3), |(i, j)| 0.7 - 0.3 * i as f64 + 0.11 * j as f64);
        let loss = |p: &ConvBlockParams| -> f64 {
            let c = conv_block_forward(x.view(), p).unwrap();
            (&c.tokens * &wsum).sum()
        };
        let cache = conv_block_forward(x.view(), &p).unwrap();
        let grads = conv_block_backward(&p, &cache, &wsum);

        let h = 1e-6;
        let mut check = |got: f64, want: f64| {
            assert!(
                (got - want).abs() / want.abs().max(1e-3) < 1e-4,
                "got {got}, want {want}"
            );
        };
        for f in 0..2 {
            for u in 0..3 {
                let mut pp = p.clone();
                pp.w1[[f, u]] += h;
                let mut pm = p.clone();
                pm.w1[[f, u]] -= h;
                check(grads.w1[[f, u]], (loss(&pp) - loss(&pm)) / (2.0 * h));
            }
            let mut pp = p.clone();
            pp.b1[f] += h;
            let mut pm = p.clone();
            pm.b1[f] -= h;
            check(grads.b1[f], (loss(&pp) - loss(&pm)) / (2.0 * h));
        }
        for g in 0..3 {
            for f in 0..2 {
                for u in 0..3 {
                    let mut pp = p.clone();
                    pp.w2[[g, f, u]] += h;
                    let mut pm = p.clone();
                    pm.w2[[g, f, u]] -= h;
                    check(grads.w2[[g, f, u]], (loss(&pp) - loss(&pm)) / (2.0 * h));
                }
            }
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(array![0.0, 0.0, 0.0, 0.0, 0.0].view());
        for v in p.iter() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let loss = cross_entropy(array![0.0, 0.0, 0.0, 0.0, 0.0].view(), 2);
        assert!((loss - 1.6094379124341003).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_tiny() {
        let loss = cross_entropy(array![30.0, 0.0].view(), 0);
        assert!(loss < 1e-6);
    }

    #[test]
    fn cross_entropy_grad_matches_fd() {
        let z = array![0.3, -1.2, 0.8];
        let g = cross_entropy_grad(z.view(), 1);
        let h = 1e-6;
        for i in 0..3 {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (cross_entropy(zp.view(), 1) - cross_entropy(zm.view(), 1)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn dropout_mask_is_deterministic_and_scales() {
        let x = Array1::ones(1000);
        let (y1, m1) = Dropout::new(0.3, 99).apply(&x);
        let (y2, m2) = Dropout::new(0.3, 99).apply(&x);
        assert_eq!(y1, y2);
        assert_eq!(m1, m2);
        let kept = m1.iter().filter(|&&m| m > 0.0).count();
        assert!((kept as f64 / 1000.0 - 0.7).abs() < 0.06);
        for (&yv, &mv) in y1.iter().zip(m1.iter()) {
            assert!(yv == 0.0 || (yv - 1.0 / 0.7).abs() < 1e-12);
            assert!(mv == 0.0 || (mv - 1.0 / 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = Dense::init(5, 3, &mut rng);
        let x = Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0));
        let seed = array![0.4, -1.0, 0.2];
        let mut grads = layer.zeros_like();
        let g_x = layer.backward(x.view(), seed.view(), &mut grads);
        let loss = |l: &Dense, x: &Array1<f64>| l.forward(x.view()).dot(&seed);
        let h = 1e-6;
        for o in 0..3 {
            for i in 0..5 {
                let mut lp = layer.clone();
                lp.w[[o, i]] += h;
                let mut lm = layer.clone();
                lm.w[[o, i]] -= h;
                let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
                assert!((grads.w[[o, i]] - fd).abs() < 1e-7);
            }
        }
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!((g_x[i] - fd).abs() < 1e-7);
        }
    }
}
