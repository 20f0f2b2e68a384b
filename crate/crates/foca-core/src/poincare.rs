//! Arithmetic on the unit Poincare ball (curvature fixed at c = 1).
//!
//! Implements the exponential and logarithmic maps at the origin, Mobius
//! addition, Mobius scalar multiplication, and the geodesic distance:
//!
//! ```text
//! exp_0(v) = tanh(||v||) v/||v||
//! log_0(p) = atanh(||p||) p/||p||
//! x (+) y  = ((1 + 2<x,y> + ||y||^2) x + (1 - ||x||^2) y)
//!            / (1 + 2<x,y> + ||x||^2 ||y||^2)
//! r (*) x  = tanh(r atanh(||x||)) x/||x||
//! d(x, y)  = arcosh(1 + 2||x - y||^2 / ((1 - ||x||^2)(1 - ||y||^2)))
//! ```
//!
//! Every operation that lands in the ball clamps its result to norm
//! `1 - EPS_BALL`; the 0/0 at the origin is resolved by the analytic limit
//! (0 maps to 0, with identity Jacobian). All arithmetic is f64.
//!
//! Each operation has a companion `*_vjp` function computing the
//! vector-Jacobian product of the (clamped) forward expression. At a clamp
//! the radial derivative is zero and the angular part is kept, so gradients
//! stay finite and deterministic.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{FocaError, Result};

/// Boundary clamp: library-produced points satisfy `norm <= 1 - EPS_BALL`.
pub const EPS_BALL: f64 = 1e-5;
/// Below this norm the direction x/||x|| is undefined; the analytic limit applies.
pub const EPS_ZERO: f64 = 1e-12;
/// Largest norm a library-produced ball point can have.
pub const MAX_NORM: f64 = 1.0 - EPS_BALL;

#[inline]
pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

fn all_finite(v: ArrayView1<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// A vector in the tangent space at the origin (all of R^d).
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(Array1<f64>);

impl TangentVector {
    /// Errors on non-finite entries.
    pub fn new(coords: Array1<f64>) -> Result<Self> {
        if !all_finite(coords.view()) {
            return Err(FocaError::NonFinite {
                context: "TangentVector".into(),
            });
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

/// A point strictly inside the unit ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint(Array1<f64>);

impl BallPoint {
    /// Errors if the norm is not strictly below 1 or entries are non-finite.
    pub fn new(coords: Array1<f64>) -> Result<Self> {
        if !all_finite(coords.view()) {
            return Err(FocaError::NonFinite {
                context: "BallPoint".into(),
            });
        }
        let n = norm(coords.view());
        if n >= 1.0 {
            return Err(FocaError::OutsideBall { norm: n });
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn norm(&self) -> f64 {
        norm(self.0.view())
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    /// Gyro-inverse: the point -x, for which x (+) -x = 0.
    pub fn neg(&self) -> BallPoint {
        BallPoint(-&self.0)
    }
}

/// An n x d batch of ball points, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct BallBatch(Array2<f64>);

impl BallBatch {
    /// Validates every row against the BallPoint invariant.
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(FocaError::EmptyInput("BallBatch".into()));
        }
        for (i, row) in points.outer_iter().enumerate() {
            if !all_finite(row) {
                return Err(FocaError::NonFinite {
                    context: format!("BallBatch row {i}"),
                });
            }
            let n = norm(row);
            if n >= 1.0 {
                return Err(FocaError::OutsideBall { norm: n });
            }
        }
        Ok(Self(points))
    }

    pub fn as_array(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// exp_0(v) = tanh(||v||) v/||v||, clamped to the ball.
pub fn exp_origin(v: &TangentVector) -> BallPoint {
    BallPoint(exp0(v.coords()))
}

/// log_0(p) = atanh(||p||) p/||p||.
pub fn log_origin(p: &BallPoint) -> TangentVector {
    TangentVector(log0(p.coords()))
}

/// Mobius addition x (+) y, clamped to the ball. Non-commutative and
/// non-associative; 0 is a two-sided identity and -x the inverse.
pub fn mobius_add(x: &BallPoint, y: &BallPoint) -> BallPoint {
    BallPoint(madd(x.coords(), y.coords()))
}

/// Mobius scalar multiplication r (*) x, clamped to the ball.
pub fn mobius_scalar(r: f64, x: &BallPoint) -> BallPoint {
    BallPoint(mscalar(r, x.coords()))
}

/// Geodesic distance between two ball points.
pub fn hyperbolic_distance(x: &BallPoint, y: &BallPoint) -> f64 {
    dist(x.coords(), y.coords())
}

// ---------------------------------------------------------------------------
// View-level kernels. These carry the actual math and are what the attention
// and model layers call row by row. Inputs are assumed finite and (for ball
// arguments) strictly inside the unit ball.
// ---------------------------------------------------------------------------

/// Rescale `x` onto norm `MAX_NORM` if it has drifted past the clamp.
pub fn clamp_ball(x: &mut Array1<f64>) {
    let n = norm(x.view());
    if n > MAX_NORM {
        *x *= MAX_NORM / n;
    }
}

pub fn exp0(v: ArrayView1<f64>) -> Array1<f64> {
    let n = norm(v);
    if n <= EPS_ZERO {
        return v.to_owned();
    }
    let t = n.tanh().min(MAX_NORM);
    &v * (t / n)
}

/// VJP of exp0: returns grad wrt v given the output cotangent.
pub fn exp0_vjp(v: ArrayView1<f64>, grad_out: ArrayView1<f64>) -> Array1<f64> {
    let n = norm(v);
    if n <= EPS_ZERO {
        // Identity Jacobian in the limit.
        return grad_out.to_owned();
    }
    let t = n.tanh();
    let u = &v / n;
    let ug = u.dot(&grad_out);
    if t > MAX_NORM {
        // Clamp active: radial derivative zero, angular part survives.
        (&grad_out - &(&u * ug)) * (MAX_NORM / n)
    } else {
        let tn = t / n;
        &grad_out * tn + &u * (((1.0 - t * t) - tn) * ug)
    }
}

pub fn log0(p: ArrayView1<f64>) -> Array1<f64> {
    let n = norm(p);
    if n <= EPS_ZERO {
        return p.to_owned();
    }
    let a = n.atanh();
    &p * (a / n)
}

pub fn log0_vjp(p: ArrayView1<f64>, grad_out: ArrayView1<f64>) -> Array1<f64> {
    let n = norm(p);
    if n <= EPS_ZERO {
        return grad_out.to_owned();
    }
    let a = n.atanh();
    let an = a / n;
    let u = &p / n;
    let ug = u.dot(&grad_out);
    &grad_out * an + &u * ((1.0 / (1.0 - n * n) - an) * ug)
}

pub fn madd(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64> {
    let x2 = x.dot(&x);
    let y2 = y.dot(&y);
    let xy = x.dot(&y);
    let a = 1.0 + 2.0 * xy + y2;
    let b = 1.0 - x2;
    // d = (1 - ||x|| ||y||)^2 at worst, so strictly positive inside the ball.
    let d = 1.0 + 2.0 * xy + x2 * y2;
    let mut out = (&x * a + &y * b) / d;
    clamp_ball(&mut out);
    out
}

/// VJP of madd: returns (grad_x, grad_y).
pub fn madd_vjp(
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    grad_out: ArrayView1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let x2 = x.dot(&x);
    let y2 = y.dot(&y);
    let xy = x.dot(&y);
    let a = 1.0 + 2.0 * xy + y2;
    let b = 1.0 - x2;
    let d = 1.0 + 2.0 * xy + x2 * y2;
    let raw = (&x * a + &y * b) / d;

    // Route the cotangent through the clamp first.
    let rn = norm(raw.view());
    let g: Array1<f64> = if rn > MAX_NORM {
        let u = &raw / rn;
        let ug = u.dot(&grad_out);
        (&grad_out - &(&u * ug)) * (MAX_NORM / rn)
    } else {
        grad_out.to_owned()
    };

    let xg = x.dot(&g);
    let yg = y.dot(&g);
    let rg = raw.dot(&g);

    // d(raw)/dx^T g = (A g + 2 y <x,g> - 2 x <y,g> - <raw,g> (2 y + 2||y||^2 x)) / D
    let gx = (&g * a + &y * (2.0 * xg) - &x * (2.0 * yg) - (&y * 2.0 + &x * (2.0 * y2)) * rg) / d;
    // d(raw)/dy^T g = ((2x + 2y) <x,g> + B g - <raw,g> (2 x + 2||x||^2 y)) / D
    let gy = ((&x * 2.0 + &y * 2.0) * xg + &g * b - (&x * 2.0 + &y * (2.0 * x2)) * rg) / d;
    (gx, gy)
}

pub fn mscalar(r: f64, x: ArrayView1<f64>) -> Array1<f64> {
    let n = norm(x);
    if n <= EPS_ZERO {
        return Array1::zeros(x.len());
    }
    let t = (r * n.atanh()).tanh();
    let mag = t.abs().min(MAX_NORM);
    &x * (t.signum() * mag / n)
}

/// VJP of mscalar: returns (grad_r, grad_x).
pub fn mscalar_vjp(r: f64, x: ArrayView1<f64>, grad_out: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let n = norm(x);
    if n <= EPS_ZERO {
        // out -> r * x as x -> 0, so the Jacobian limit is r I and d(out)/dr -> 0.
        return (0.0, &grad_out * r);
    }
    let a = n.atanh();
    let t = (r * a).tanh();
    let u = &x / n;
    let ug = u.dot(&grad_out);
    if t.abs() > MAX_NORM {
        let s = t.signum();
        let gx = (&grad_out - &(&u * ug)) * (s * MAX_NORM / n);
        (0.0, gx)
    } else {
        let sech2 = 1.0 - t * t;
        let gr = sech2 * a * ug;
        let tn = t / n;
        let gx = &grad_out * tn + &u * ((sech2 * r / (1.0 - n * n) - tn) * ug);
        (gr, gx)
    }
}

pub fn dist(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    let diff = &x - &y;
    let q = diff.dot(&diff);
    let alpha = 1.0 - x.dot(&x);
    let beta = 1.0 - y.dot(&y);
    let z = (1.0 + 2.0 * q / (alpha * beta)).max(1.0);
    z.acosh()
}

/// VJP of dist: returns (grad_x, grad_y) for a scalar cotangent.
pub fn dist_vjp(x: ArrayView1<f64>, y: ArrayView1<f64>, grad_d: f64) -> (Array1<f64>, Array1<f64>) {
    let diff = &x - &y;
    let q = diff.dot(&diff);
    let alpha = 1.0 - x.dot(&x);
    let beta = 1.0 - y.dot(&y);
    let z = 1.0 + 2.0 * q / (alpha * beta);
    if z <= 1.0 {
        // Clamp active (coincident points up to rounding): deterministic zero.
        return (Array1::zeros(x.len()), Array1::zeros(y.len()));
    }
    let dz = grad_d / (z * z - 1.0).sqrt();
    let gx = (&diff * (4.0 / (alpha * beta)) + &x * (4.0 * q / (alpha * alpha * beta))) * dz;
    let gy = (&diff * (-4.0 / (alpha * beta)) + &y * (4.0 * q / (alpha * beta * beta))) * dz;
    (gx, gy)
}
