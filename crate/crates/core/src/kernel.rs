//! Precision contexts, error-bounded values and tail-aware summation.
//!
//! Everything numeric in this crate runs on MPFR floats ([`rug`]) at a
//! binary precision chosen per [`PrecisionContext`]. Values are reported as
//! [`BoundedValue`]s: a complex number plus a scalar absolute-error bound.
//! The bound combines rounding estimates with explicit truncation-tail
//! formulas supplied by the caller; it is a scalar accounting, not interval
//! arithmetic.

use rug::{Complex, Float};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Arbitrary-precision real scalar.
pub type Real = Float;
/// Arbitrary-precision complex scalar.
pub type Cpx = Complex;

/// Hard ceiling for escalated working precision, in bits.
pub const MAX_BITS_CAP: u32 = 16_384;

/// Precision used when materializing node coordinates. Node positions are
/// immutable data shared across all working precisions, so they are stored
/// well above any precision the evaluators escalate to in practice.
pub const NODE_BITS: u32 = 4096;

/// Errors shared by the evaluation pipeline (entire functions, space
/// elements, winding integrals).
#[derive(Debug, Clone, Error, PartialEq)]
pub enum KernelError {
    /// `make_context` rejects precisions that cannot resolve the weight
    /// scales the experiments run at.
    #[error("insufficient precision: {bits} bits requested, minimum is 64")]
    InsufficientPrecision { bits: u32 },
    #[error("target tolerance must be positive and finite, got {tol}")]
    BadTolerance { tol: f64 },
    /// Product truncation radius below the 4|z| evaluation policy.
    #[error("tail dominates: node-set radius {radius:.3e} < 4|z| = {needed:.3e}; enlarge the node set")]
    TailDominates { radius: f64, needed: f64 },
    /// Point indistinguishable from a declared zero/node at this precision.
    #[error("point within 2^{exp} of a declared zero or node")]
    TooCloseToZero { exp: i64 },
    #[error("derivative underflow at max precision")]
    DerivativeUnderflow,
    #[error("cancellation exhausted precision: {bits} bits reached max {max_bits}")]
    PrecisionExhausted { bits: u32, max_bits: u32 },
    #[error("non-finite value produced during evaluation")]
    NotFinite,
    #[error("contour too close to a zero of the integrand")]
    ContourTooCloseToZero,
    #[error("winding integral did not settle on an integer (got {value:.6})")]
    NonIntegerWinding { value: f64 },
    #[error("subdivision budget exceeded ({cells} cells)")]
    BudgetExceeded { cells: usize },
    /// Internal recovery signal: a subdivision cell could not be integrated
    /// at any nudge/precision; the parent must re-split elsewhere.
    #[error("cell unresolvable at any split offset or precision")]
    CellUnresolvable,
    #[error("{0}")]
    Invalid(String),
}

pub type KResult<T> = Result<T, KernelError>;

/// Working precision plus the tolerance/escalation policy shared by all
/// evaluators.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionContext {
    bits: u32,
    max_bits: u32,
    /// Absolute tolerance for reported values, stored wide enough to remain
    /// meaningful below the f64 subnormal range.
    target_tol: Real,
}

/// Serializable form of a context (used by experiment configs).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PrecisionParams {
    pub bits: u32,
    pub target_tol: f64,
}

impl Default for PrecisionParams {
    fn default() -> Self {
        PrecisionParams { bits: 512, target_tol: 1e-40 }
    }
}

impl PrecisionContext {
    /// Builds a context with `max_bits = 16 × bits`, capped at 16384.
    pub fn new(bits: u32, target_tol: f64) -> KResult<Self> {
        if bits < 64 {
            return Err(KernelError::InsufficientPrecision { bits });
        }
        if !(target_tol > 0.0) || !target_tol.is_finite() {
            return Err(KernelError::BadTolerance { tol: target_tol });
        }
        Ok(PrecisionContext {
            bits,
            max_bits: (bits.saturating_mul(16)).min(MAX_BITS_CAP),
            target_tol: Float::with_val(64, target_tol),
        })
    }

    pub fn from_params(p: &PrecisionParams) -> KResult<Self> {
        Self::new(p.bits, p.target_tol)
    }

    /// 512 bits, tolerance 1e-40. Roughly 154 decimal digits: enough
    /// headroom for weights like `e^{-(2√2+2)π|t|}` at |t| ≈ 10, which sit
    /// near 1e-66.
    pub fn standard() -> Self {
        Self::new(512, 1e-40).expect("standard context parameters are valid")
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn max_bits(&self) -> u32 {
        self.max_bits
    }

    pub fn target_tol(&self) -> &Real {
        &self.target_tol
    }

    /// Same policy, different working precision (clamped to `max_bits`).
    pub fn with_bits(&self, bits: u32) -> Self {
        PrecisionContext {
            bits: bits.clamp(64, self.max_bits),
            max_bits: self.max_bits,
            target_tol: self.target_tol.clone(),
        }
    }

    /// Doubled working precision, or `None` once the ceiling is reached.
    pub fn escalated(&self) -> Option<Self> {
        if self.bits >= self.max_bits {
            None
        } else {
            Some(self.with_bits(self.bits.saturating_mul(2)))
        }
    }

    /// `2^{-bits/2}`: the proximity threshold below which points are treated
    /// as indistinguishable from nodes/zeros.
    pub fn near_zero_threshold(&self) -> Real {
        two_pow(-(self.bits as i64) / 2)
    }

    /// A one-ulp-style relative rounding unit at this precision.
    pub fn eps(&self) -> Real {
        two_pow(1 - self.bits as i64)
    }
}

/// `2^e` as a 64-bit `Real` (error-bound arithmetic does not need more).
pub fn two_pow(e: i64) -> Real {
    let mut f = Float::with_val(64, 1);
    f <<= e as i32;
    f
}

/// |z| at the given precision.
pub fn cabs(z: &Cpx, prec: u32) -> Real {
    Float::with_val(prec, z.abs_ref())
}

/// Complex value from f64 parts at the given precision.
pub fn cpx(re: f64, im: f64, prec: u32) -> Cpx {
    Complex::with_val(prec, (re, im))
}

/// Real value from f64 at the given precision.
pub fn real(x: f64, prec: u32) -> Real {
    Float::with_val(prec, x)
}

/// A complex number carrying a scalar absolute-error bound.
///
/// `rigorous` marks bounds assembled purely from explicit tail formulas and
/// rounding estimates; heuristic bounds (finite differences, extrapolations)
/// clear it. `converged` is cleared instead of erroring when escalation ran
/// out of precision.
#[derive(Debug, Clone)]
pub struct BoundedValue {
    pub value: Cpx,
    pub abs_error: Real,
    pub rigorous: bool,
    pub converged: bool,
}

impl BoundedValue {
    pub fn exact(value: Cpx) -> Self {
        BoundedValue { value, abs_error: Float::with_val(64, 0), rigorous: true, converged: true }
    }

    pub fn new(value: Cpx, abs_error: Real, rigorous: bool) -> Self {
        debug_assert!(abs_error.is_finite() && !abs_error.is_sign_negative());
        BoundedValue { value, abs_error, rigorous, converged: true }
    }

    pub fn unconverged(value: Cpx, abs_error: Real) -> Self {
        BoundedValue { value, abs_error, rigorous: false, converged: false }
    }

    pub fn abs(&self) -> Real {
        cabs(&self.value, self.value.prec().0)
    }

    /// Whether the bound meets the context tolerance.
    pub fn within_tol(&self, ctx: &PrecisionContext) -> bool {
        self.converged && self.abs_error <= *ctx.target_tol()
    }

    /// Marks the bound heuristic.
    pub fn heuristic(mut self) -> Self {
        self.rigorous = false;
        self
    }

    /// Adds an extra absolute error term.
    pub fn widen(mut self, extra: &Real) -> Self {
        self.abs_error = Float::with_val(64, &self.abs_error + extra);
        self
    }

    /// Sum of two bounded values.
    pub fn add(&self, other: &Self, prec: u32) -> Self {
        let value = Complex::with_val(prec, &self.value + &other.value);
        let round = Float::with_val(prec, value.abs_ref()) * two_pow(1 - prec as i64);
        let abs_error = Float::with_val(64, &self.abs_error + &other.abs_error) + round;
        BoundedValue {
            value,
            abs_error: Float::with_val(64, abs_error),
            rigorous: self.rigorous && other.rigorous,
            converged: self.converged && other.converged,
        }
    }

    /// Product of two bounded values: |ab| error ≤ |a|eb + |b|ea + ea·eb + rounding.
    pub fn mul(&self, other: &Self, prec: u32) -> Self {
        let value = Complex::with_val(prec, &self.value * &other.value);
        let aa = self.abs();
        let ab = other.abs();
        let mut err = Float::with_val(64, &aa * &other.abs_error);
        err += Float::with_val(64, &ab * &self.abs_error);
        err += Float::with_val(64, &self.abs_error * &other.abs_error);
        err += Float::with_val(prec, value.abs_ref()) * two_pow(1 - prec as i64);
        BoundedValue {
            value,
            abs_error: Float::with_val(64, err),
            rigorous: self.rigorous && other.rigorous,
            converged: self.converged && other.converged,
        }
    }

    /// Quotient a/b; caller must ensure b is bounded away from 0 relative to
    /// its error (|b| > 2·err_b), otherwise the bound is meaningless and the
    /// value is flagged unconverged.
    pub fn div(&self, other: &Self, prec: u32) -> Self {
        let value = Complex::with_val(prec, &self.value / &other.value);
        let ab = other.abs();
        let ok = ab > Float::with_val(64, &other.abs_error * 2u32);
        if !ok || !value.real().is_finite() || !value.imag().is_finite() {
            let e = Float::with_val(64, f64::MAX);
            return BoundedValue::unconverged(value, e);
        }
        // |a/b − â/b̂| ≤ (|a| e_b + |b| e_a) / (|b| (|b| − e_b)) + rounding
        let aa = self.abs();
        let denom = Float::with_val(64, &ab - &other.abs_error) * &ab;
        let num = Float::with_val(64, &aa * &other.abs_error)
            + Float::with_val(64, &ab * &self.abs_error);
        let mut err = num / denom;
        err += Float::with_val(prec, value.abs_ref()) * two_pow(1 - prec as i64);
        BoundedValue {
            value,
            abs_error: Float::with_val(64, err),
            rigorous: self.rigorous && other.rigorous,
            converged: self.converged && other.converged,
        }
    }

    /// Multiplies by an exact complex scalar.
    pub fn scale(&self, k: &Cpx, prec: u32) -> Self {
        let value = Complex::with_val(prec, &self.value * k);
        let err = Float::with_val(64, &self.abs_error * &cabs(k, 64))
            + Float::with_val(prec, value.abs_ref()) * two_pow(1 - prec as i64);
        BoundedValue {
            value,
            abs_error: Float::with_val(64, err),
            rigorous: self.rigorous,
            converged: self.converged,
        }
    }
}

/// A complex-analytic map with bounded-error evaluation and a logarithmic
/// derivative, the contract the argument-principle machinery works against.
/// Implementations must be pure and callable from concurrent workers.
pub trait ComplexMap: Sync {
    fn eval_map(&self, z: &Cpx, ctx: &PrecisionContext) -> KResult<BoundedValue>;

    /// F'(z)/F(z). The default is a central finite difference at step
    /// 2^{-bits/4} (heuristic bound); analytic implementations override.
    fn log_deriv_map(&self, z: &Cpx, ctx: &PrecisionContext) -> KResult<BoundedValue> {
        let p = ctx.bits();
        let h = two_pow(-(p as i64) / 4);
        let hstep = Complex::with_val(p, (&h, 0));
        let zp = Complex::with_val(p, z + &hstep);
        let zm = Complex::with_val(p, z - &hstep);
        let fp = self.eval_map(&zp, ctx)?;
        let fm = self.eval_map(&zm, ctx)?;
        let f0 = self.eval_map(z, ctx)?;
        if f0.abs() <= Float::with_val(64, &f0.abs_error * 2u32) {
            return Err(KernelError::TooCloseToZero { exp: f0.abs().to_f64().log2() as i64 });
        }
        let num = fp.add(&fm.scale(&Complex::with_val(p, (-1, 0)), p), p);
        let den = f0.scale(&Complex::with_val(p, (Float::with_val(p, &h * 2u32), 0)), p);
        Ok(num.div(&den, p).heuristic())
    }
}

/// Sums a finite list of complex terms at context precision with a guard of
/// 64 extra bits, reporting rounding + caller-supplied tail as the error.
///
/// The rounding term is `2(n+1)·(Σ|terms|)·2^{-(bits+64)} + |sum|·2^{-bits}`,
/// a valid bound because every partial sum is dominated by `Σ|terms|`.
pub fn compensated_sum(terms: &[Cpx], tail_bound: &Real, ctx: &PrecisionContext) -> BoundedValue {
    let p = ctx.bits() + 64;
    let mut acc = Complex::with_val(p, (0, 0));
    let mut abs_acc = Float::with_val(64, 0);
    let mut finite = true;
    for t in terms {
        acc += t;
        abs_acc += cabs(t, 64);
        if !acc.real().is_finite() || !acc.imag().is_finite() {
            finite = false;
            break;
        }
    }
    let value = Complex::with_val(ctx.bits(), &acc);
    if !finite {
        return BoundedValue::unconverged(value, Float::with_val(64, f64::MAX));
    }
    let n = terms.len() as u32;
    let rounding = abs_acc * two_pow(1 - p as i64) * (n + 1)
        + Float::with_val(ctx.bits(), value.abs_ref()) * two_pow(1 - ctx.bits() as i64);
    let abs_error = Float::with_val(64, rounding + tail_bound);
    BoundedValue::new(value, abs_error, true)
}

/// Runs `f` at escalating precision until its reported error meets the
/// context tolerance or the per-value `target` (whichever is looser), or the
/// precision ceiling is reached (result flagged unconverged).
pub fn with_escalation<F>(ctx: &PrecisionContext, target: Option<&Real>, mut f: F) -> KResult<BoundedValue>
where
    F: FnMut(&PrecisionContext) -> KResult<BoundedValue>,
{
    let mut cur = ctx.clone();
    loop {
        let out = f(&cur)?;
        let tol_ok = match target {
            Some(t) => out.abs_error <= *t || out.abs_error <= *ctx.target_tol(),
            None => out.abs_error <= *ctx.target_tol(),
        };
        if tol_ok && out.converged {
            return Ok(out);
        }
        match cur.escalated() {
            Some(next) => cur = next,
            None => {
                return Ok(BoundedValue {
                    converged: false,
                    ..out
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_construction_matches_policy() {
        let ctx = PrecisionContext::new(512, 1e-40).unwrap();
        assert_eq!(ctx.bits(), 512);
        assert_eq!(ctx.max_bits(), 8192);
        let ctx = PrecisionContext::new(64, 1e-10).unwrap();
        assert_eq!(ctx.max_bits(), 1024);
        // cap
        let ctx = PrecisionContext::new(4096, 1e-10).unwrap();
        assert_eq!(ctx.max_bits(), 16_384);
    }

    #[test]
    fn context_rejects_low_bits() {
        match PrecisionContext::new(32, 1e-10) {
            Err(KernelError::InsufficientPrecision { bits: 32 }) => {}
            other => panic!("expected insufficient precision, got {other:?}"),
        }
    }

    #[test]
    fn sum_cancellation() {
        let ctx = PrecisionContext::standard();
        let terms = vec![cpx(1.0, 0.0, 512), cpx(-1.0, 0.0, 512)];
        let s = compensated_sum(&terms, &real(0.0, 64), &ctx);
        assert_eq!(s.value, Complex::with_val(512, (0, 0)));
        assert!(s.abs_error < real(1e-100, 64));
    }

    #[test]
    fn sum_geometric_tail() {
        let ctx = PrecisionContext::standard();
        let terms = vec![cpx(0.5, 0.0, 512), cpx(0.25, 0.0, 512), cpx(0.125, 0.0, 512)];
        let s = compensated_sum(&terms, &real(0.125, 64), &ctx);
        assert_eq!(s.value.real().to_f64(), 0.875);
        let e = s.abs_error.to_f64();
        assert!((e - 0.125).abs() < 1e-12, "tail should dominate the bound, got {e}");
        assert!(s.rigorous);
    }

    #[test]
    fn escalation_doubles_until_ceiling() {
        let ctx = PrecisionContext::new(64, 1e-10).unwrap();
        let mut bits = vec![];
        let mut cur = ctx.clone();
        while let Some(next) = cur.escalated() {
            bits.push(next.bits());
            cur = next;
        }
        assert_eq!(bits, vec![128, 256, 512, 1024]);
    }

    #[test]
    fn bounded_mul_error_dominates_true_error() {
        let p = 128;
        let a = BoundedValue::new(cpx(3.0, 1.0, p), real(1e-20, 64), true);
        let b = BoundedValue::new(cpx(-2.0, 0.5, p), real(1e-22, 64), true);
        let prod = a.mul(&b, p);
        // perturb inputs by their stated errors: product must stay within bound
        let a2 = cpx(3.0 + 1e-20, 1.0, p);
        let b2 = cpx(-2.0, 0.5 - 1e-22, p);
        let exact = Complex::with_val(p, &a2 * &b2);
        let diff = Float::with_val(p, Complex::with_val(p, &exact - &prod.value).abs_ref());
        assert!(diff <= prod.abs_error);
    }
}
