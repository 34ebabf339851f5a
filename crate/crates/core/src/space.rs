//! Elements of the Cauchy-transform spaces and their diagnostics.
//!
//! A [`SpaceElement`] is a finitely supported coefficient sequence `{a_n}`
//! over a truncated node set, evaluated either as the meromorphic
//! `f(z) = Σ a_n μ_n^{1/2}/(z − t_n)` or as the entire `F = A·f`. Near a
//! node `F` switches to the residue form
//! `A(z)·Σ_{m≠k} … + a_k μ_k^{1/2} · A(z)/(z − t_k)`, which stays finite
//! through the node (at the node it reduces to `a_k μ_k^{1/2} A'(t_k)`).
//!
//! The module also computes moments `Σ c_n μ_n t_n^k` with
//! excluded-family tail estimates, the polynomial-orthogonal coefficient
//! sequence `c_n = (A'(t_n) μ_n)^{-1}`, finite-scale membership
//! diagnostics, and the entire part `H` of the splitting
//! `A₂·Σ_{T₁} cμ^{1/2}/(z−t) = Σ_{T₁} A₂(t)cμ^{1/2}/(z−t) + H`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rug::ops::Pow;
use rug::{Complex, Float};
use serde::{Deserialize, Serialize};

use crate::entire::EntireFunction;
use crate::kernel::{
    cabs, compensated_sum, cpx, real, two_pow, BoundedValue, ComplexMap, Cpx, KResult,
    KernelError, PrecisionContext, Real,
};
use crate::nodes::{Measure, NodeSet};

/// A coefficient sequence over a truncated node set, together with the
/// measure and generating function needed to evaluate it.
#[derive(Debug, Clone)]
pub struct SpaceElement {
    coeffs: Vec<Cpx>,
    ns: Arc<NodeSet>,
    mu: Arc<Measure>,
    a: Arc<EntireFunction>,
    norm: Real,
}

/// Named coefficient generators (the CLI exposes these).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "gen", rename_all = "snake_case")]
pub enum CoeffSpec {
    /// Unit coefficient at node k, zero elsewhere.
    Basis { k: usize },
    /// Independent complex Gaussians, reproducible from the seed.
    RandomGaussian { seed: u64 },
    /// c_n = (A'(t_n) μ_n)^{-1}: orthogonal to all polynomials in L²(μ).
    Orthogonal,
    /// Explicit (re, im) pairs.
    Explicit { values: Vec<(f64, f64)> },
    /// Apply `inner` on the nodes of one union part, zero elsewhere.
    SupportedOn { part: u8, inner: Box<CoeffSpec> },
}

/// Complex standard normals via Box–Muller on ChaCha8 uniforms; frozen here
/// so seeds stay reproducible regardless of rand's distribution internals.
pub fn gaussian_coeffs(seed: u64, len: usize, prec: u32) -> Vec<Cpx> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let u1: f64 = rng.gen::<f64>().max(1e-300);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            cpx(r * th.cos(), r * th.sin(), prec)
        })
        .collect()
}

/// Materializes a coefficient spec over the node set.
pub fn make_coefficients(
    spec: &CoeffSpec,
    ns: &NodeSet,
    mu: &Measure,
    a: &EntireFunction,
    ctx: &PrecisionContext,
) -> KResult<Vec<Cpx>> {
    let p = ctx.bits();
    match spec {
        CoeffSpec::Basis { k } => {
            if *k >= ns.len() {
                return Err(KernelError::Invalid(format!(
                    "basis index {k} out of range (node count {})",
                    ns.len()
                )));
            }
            let mut v = vec![Complex::with_val(p, (0, 0)); ns.len()];
            v[*k] = Complex::with_val(p, (1, 0));
            Ok(v)
        }
        CoeffSpec::RandomGaussian { seed } => Ok(gaussian_coeffs(*seed, ns.len(), p)),
        CoeffSpec::Orthogonal => Ok(orthogonal_coefficients(ns, mu, a, ctx)?.coeffs),
        CoeffSpec::Explicit { values } => {
            if values.len() != ns.len() {
                return Err(KernelError::Invalid(format!(
                    "explicit coefficients: got {}, need {}",
                    values.len(),
                    ns.len()
                )));
            }
            Ok(values.iter().map(|(re, im)| cpx(*re, *im, p)).collect())
        }
        CoeffSpec::SupportedOn { part, inner } => {
            let idx = ns.part_indices(*part);
            if idx.is_empty() {
                return Err(KernelError::Invalid(format!("union part {part} has no nodes")));
            }
            let inner_vals: Vec<Cpx> = match inner.as_ref() {
                CoeffSpec::RandomGaussian { seed } => gaussian_coeffs(*seed, idx.len(), p),
                CoeffSpec::Basis { k } => {
                    let mut v = vec![Complex::with_val(p, (0, 0)); idx.len()];
                    let kk = *k;
                    if kk >= idx.len() {
                        return Err(KernelError::Invalid("basis index beyond part".into()));
                    }
                    v[kk] = Complex::with_val(p, (1, 0));
                    v
                }
                CoeffSpec::Explicit { values } => {
                    if values.len() != idx.len() {
                        return Err(KernelError::Invalid("explicit length != part size".into()));
                    }
                    values.iter().map(|(re, im)| cpx(*re, *im, p)).collect()
                }
                other => {
                    return Err(KernelError::Invalid(format!(
                        "unsupported inner generator {other:?} for supported_on"
                    )))
                }
            };
            let mut v = vec![Complex::with_val(p, (0, 0)); ns.len()];
            for (j, &i) in idx.iter().enumerate() {
                v[i] = inner_vals[j].clone();
            }
            Ok(v)
        }
    }
}

impl SpaceElement {
    /// Pairs a coefficient list with its space data; computes the ℓ² norm.
    pub fn new(
        coeffs: Vec<Cpx>,
        ns: Arc<NodeSet>,
        mu: Arc<Measure>,
        a: Arc<EntireFunction>,
    ) -> KResult<Self> {
        if coeffs.len() != ns.len() || mu.len() != ns.len() {
            return Err(KernelError::Invalid(format!(
                "length mismatch: {} coefficients, {} nodes, {} weights",
                coeffs.len(),
                ns.len(),
                mu.len()
            )));
        }
        let p = coeffs.first().map_or(64, |c| c.prec().0);
        let mut norm2 = Float::with_val(p, 0);
        for c in &coeffs {
            norm2 += Float::with_val(p, c.norm_ref());
        }
        Ok(SpaceElement { coeffs, ns, mu, a, norm: norm2.sqrt() })
    }

    pub fn coeffs(&self) -> &[Cpx] {
        &self.coeffs
    }

    pub fn node_set(&self) -> &Arc<NodeSet> {
        &self.ns
    }

    pub fn measure(&self) -> &Arc<Measure> {
        &self.mu
    }

    pub fn generating_fn(&self) -> &Arc<EntireFunction> {
        &self.a
    }

    pub fn norm(&self) -> &Real {
        &self.norm
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.real().is_zero() && c.imag().is_zero())
    }

    /// f(z) = Σ a_n μ_n^{1/2}/(z − t_n); z must stay 2^{-bits/2} away from
    /// the nodes.
    pub fn evaluate_f(&self, z: &Cpx, ctx: &PrecisionContext) -> KResult<BoundedValue> {
        let p = ctx.bits();
        if let Some((_, d)) = self.ns.nearest(z) {
            if d < ctx.near_zero_threshold().to_f64() {
                return Err(KernelError::TooCloseToZero { exp: d.log2() as i64 });
            }
        }
        let mut terms = Vec::with_capacity(self.coeffs.len());
        let mut term_err = Float::with_val(64, 0);
        for (i, c) in self.coeffs.iter().enumerate() {
            if c.real().is_zero() && c.imag().is_zero() {
                continue;
            }
            let num = Complex::with_val(p, c * &self.mu.sqrt(i, p));
            let den = Complex::with_val(p, z - self.ns.node(i));
            let term = Complex::with_val(p, &num / &den);
            // μ rounding error propagated through the division
            let mu_rel = Float::with_val(64, self.mu.error(i) / self.mu.value(i)) / 2u32;
            term_err += cabs(&term, 64) * (mu_rel + two_pow(3 - p as i64));
            terms.push(term);
        }
        let mut out = compensated_sum(&terms, &real(0.0, 64), ctx);
        out.abs_error += term_err;
        Ok(out)
    }

    /// F(z) = A(z)·f(z), entire; near a node the residue form is used, and
    /// at the node exactly it equals a_k μ_k^{1/2} A'(t_k).
    pub fn evaluate_big_f(&self, z: &Cpx, ctx: &PrecisionContext) -> KResult<BoundedValue> {
        let p = ctx.bits();
        let near = self.ns.nearest(z);
        let use_residue = match near {
            Some((k, d)) => d < 0.25 * self.local_gap(k),
            None => false,
        };
        if !use_residue {
            let fv = self.evaluate_f(z, ctx)?;
            let av = self.a.evaluate(z, ctx)?;
            return Ok(av.mul(&fv, p));
        }
        let (k, _) = near.unwrap();
        let t_k = self.ns.node(k);
        // A(z) · Σ_{m≠k} a_m μ_m^{1/2}/(z−t_m)
        let mut terms = Vec::with_capacity(self.coeffs.len());
        let mut term_err = Float::with_val(64, 0);
        for (i, c) in self.coeffs.iter().enumerate() {
            if i == k || (c.real().is_zero() && c.imag().is_zero()) {
                continue;
            }
            let num = Complex::with_val(p, c * &self.mu.sqrt(i, p));
            let den = Complex::with_val(p, z - self.ns.node(i));
            let term = Complex::with_val(p, &num / &den);
            let mu_rel = Float::with_val(64, self.mu.error(i) / self.mu.value(i)) / 2u32;
            term_err += cabs(&term, 64) * (mu_rel + two_pow(3 - p as i64));
            terms.push(term);
        }
        let mut g = compensated_sum(&terms, &real(0.0, 64), ctx);
        g.abs_error += term_err;
        let av = self.a.evaluate(z, ctx)?;
        let mut out = av.mul(&g, p);
        // + a_k μ_k^{1/2} · A(z)/(z−t_k)
        if !(self.coeffs[k].real().is_zero() && self.coeffs[k].imag().is_zero()) {
            let div = self.a.evaluate_divided(z, t_k, ctx)?;
            let w = Complex::with_val(p, &self.coeffs[k] * &self.mu.sqrt(k, p));
            out = out.add(&div.scale(&w, p), p);
        }
        Ok(out)
    }

    /// Distance from node k to its nearest neighbour (f64).
    fn local_gap(&self, k: usize) -> f64 {
        let t = self.ns.node(k);
        let tr = t.real().to_f64();
        let ti = t.imag().to_f64();
        let mut best = f64::INFINITY;
        for (i, u) in self.ns.nodes().iter().enumerate() {
            if i == k {
                continue;
            }
            let d = (tr - u.real().to_f64()).hypot(ti - u.imag().to_f64());
            if d < best {
                best = d;
            }
        }
        if best.is_finite() {
            best
        } else {
            1.0
        }
    }

    /// Element-wise sum (same space).
    pub fn add(&self, other: &SpaceElement) -> KResult<SpaceElement> {
        if self.coeffs.len() != other.coeffs.len() {
            return Err(KernelError::Invalid("elements live on different truncations".into()));
        }
        let p = self.coeffs.first().map_or(64, |c| c.prec().0);
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| Complex::with_val(p, a + b))
            .collect();
        SpaceElement::new(coeffs, self.ns.clone(), self.mu.clone(), self.a.clone())
    }
}

impl ComplexMap for SpaceElement {
    fn eval_map(&self, z: &Cpx, ctx: &PrecisionContext) -> KResult<BoundedValue> {
        self.evaluate_big_f(z, ctx)
    }

    /// F'/F = A'/A + f'/f, each sum term-wise; the pole pairs cancel in
    /// exact arithmetic and stay benign numerically away from exact nodes.
    fn log_deriv_map(&self, z: &Cpx, ctx: &PrecisionContext) -> KResult<BoundedValue> {
        let p = ctx.bits();
        let a_part = self.a.log_derivative_raw(z, ctx)?;
        // f'/f with f' = −Σ a μ^{1/2}/(z−t)²
        let fv = self.evaluate_f(z, ctx)?;
        if fv.abs() <= Float::with_val(64, &fv.abs_error * 2u32) {
            return Err(KernelError::TooCloseToZero { exp: fv.abs().to_f64().log2() as i64 });
        }
        let mut terms = Vec::with_capacity(self.coeffs.len());
        for (i, c) in self.coeffs.iter().enumerate() {
            if c.real().is_zero() && c.imag().is_zero() {
                continue;
            }
            let num = Complex::with_val(p, c * &self.mu.sqrt(i, p));
            let den = Complex::with_val(p, z - self.ns.node(i));
            let den2 = Complex::with_val(p, den.square_ref());
            terms.push(-Complex::with_val(p, &num / &den2));
        }
        let fprime = compensated_sum(&terms, &real(0.0, 64), ctx);
        Ok(a_part.add(&fprime.div(&fv, p), p))
    }
}

/// One moment Σ c_n μ_n t_n^k with the excluded-family tail folded into the
/// reported error.
#[derive(Debug, Clone)]
pub struct MomentReport {
    pub k: u32,
    pub value: BoundedValue,
    pub tail_bound: Real,
}

/// Tail model for [`moment`]: finitely supported coefficients have no tail;
/// the orthogonal sequence extends over the family as t^k/A'(t).
pub enum MomentTail<'a> {
    None,
    Orthogonal { ext_ns: &'a NodeSet, ext_a: &'a EntireFunction },
}

/// Σ over the truncation of c_n μ_n t_n^k, k ≤ 64.
pub fn moment(
    coeffs: &[Cpx],
    ns: &NodeSet,
    mu: &Measure,
    k: u32,
    tail: &MomentTail<'_>,
    ctx: &PrecisionContext,
) -> KResult<MomentReport> {
    if k > 64 {
        return Err(KernelError::Invalid(format!("moment order {k} exceeds 64")));
    }
    if coeffs.len() != ns.len() {
        return Err(KernelError::Invalid("coefficient/node length mismatch".into()));
    }
    let p = ctx.bits();
    let mut terms = Vec::with_capacity(coeffs.len());
    let mut term_err = Float::with_val(64, 0);
    for (i, c) in coeffs.iter().enumerate() {
        if c.real().is_zero() && c.imag().is_zero() {
            continue;
        }
        let tk = Complex::with_val(p, ns.node(i).pow(k));
        let term = Complex::with_val(p, c * &tk) * mu.value(i);
        let mu_rel = Float::with_val(64, mu.error(i) / mu.value(i));
        term_err += cabs(&term, 64) * (mu_rel + two_pow((3 + k as i64 / 8) - p as i64));
        terms.push(term);
    }
    let mut value = compensated_sum(&terms, &real(0.0, 64), ctx);
    value.abs_error += term_err;

    let tail_bound = match tail {
        MomentTail::None => real(0.0, 64),
        MomentTail::Orthogonal { ext_ns, ext_a } => {
            orthogonal_moment_tail(ns, ext_ns, ext_a, k, ctx)?
        }
    };
    value.abs_error += &tail_bound;
    Ok(MomentReport { k, value, tail_bound })
}

/// Bound for |Σ_{|t|>R} t^k / A'(t)| over the family extension: walk
/// extension nodes until the terms settle into geometric decay past 2R,
/// then cap the remainder by the last term.
fn orthogonal_moment_tail(
    ns: &NodeSet,
    ext_ns: &NodeSet,
    ext_a: &EntireFunction,
    k: u32,
    ctx: &PrecisionContext,
) -> KResult<Real> {
    let r = ns.radius();
    let mut tail = real(0.0, 64);
    let mut prev: Option<Real> = None;
    let mut settled = false;
    for i in 0..ext_ns.len() {
        let m = ext_ns.modulus(i).to_f64();
        if m <= r {
            continue;
        }
        let t = ext_ns.node(i);
        let d = ext_a.derivative_at_node(t, ctx)?;
        let da = d.abs();
        let slack = Float::with_val(64, &da - &d.abs_error);
        if !(slack > 0) {
            return Err(KernelError::DerivativeUnderflow);
        }
        let tk = Float::with_val(64, ext_ns.modulus(i).pow(k));
        let term = tk / slack;
        tail += &term;
        if let Some(pv) = &prev {
            if m >= 2.0 * r && term < Float::with_val(64, pv / 2u32) {
                tail += term;
                settled = true;
                break;
            }
        }
        prev = Some(term);
    }
    if !settled {
        tail *= 2u32;
    }
    Ok(tail)
}

/// The polynomial-orthogonal sequence c_n = (A'(t_n) μ_n)^{-1} with its
/// L²(μ) norm Σ |c_n|² μ_n.
pub struct OrthogonalCoeffs {
    pub coeffs: Vec<Cpx>,
    pub l2mu_norm2: Real,
    pub max_rel_err: f64,
}

pub fn orthogonal_coefficients(
    ns: &NodeSet,
    mu: &Measure,
    a: &EntireFunction,
    ctx: &PrecisionContext,
) -> KResult<OrthogonalCoeffs> {
    let p = ctx.bits();
    let mut coeffs = Vec::with_capacity(ns.len());
    let mut norm2 = Float::with_val(p, 0);
    let mut max_rel: f64 = 0.0;
    for i in 0..ns.len() {
        let d = a.derivative_at_node(ns.node(i), ctx)?;
        let da = d.abs();
        if da.is_zero() {
            return Err(KernelError::DerivativeUnderflow);
        }
        let den = Complex::with_val(p, &d.value * mu.value(i));
        let c = Complex::with_val(p, den.recip_ref());
        norm2 += Float::with_val(p, c.norm_ref()) * mu.value(i);
        max_rel = max_rel.max(Float::with_val(64, &d.abs_error / &da).to_f64());
        coeffs.push(c);
    }
    Ok(OrthogonalCoeffs { coeffs, l2mu_norm2: norm2, max_rel_err: max_rel })
}

/// Tri-state verdicts for finite-scale membership checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict3 {
    Pass,
    Fail,
    Inconclusive,
}

/// Finite-scale surrogate of the three membership conditions: node sums,
/// polynomial growth off exceptional disks, smallness on a grid.
#[derive(Debug, Clone, Serialize)]
pub struct MembershipReport {
    pub verdict_i: Verdict3,
    /// Σ |F(t_n)|²/(|A'(t_n)|² μ_n) over the truncation (log10).
    pub node_sum_log10: f64,
    /// Share of the node sum contributed by nodes with |t| in the outer
    /// decade (|t| > R/10).
    pub outer_decade_share: f64,
    pub verdict_ii: Verdict3,
    /// Smallest N' ≤ 16 with max |F|/(|z|^{N'}|A|) ≤ 1 on the annuli.
    pub growth_exponent: Option<u32>,
    /// log10 of max |F|/(|z|^{N'}|A|) per N' = 0..=16.
    pub growth_table_log10: Vec<f64>,
    pub verdict_iii: Verdict3,
    /// Fraction of grid points (off exceptional disks) with |F| < 0.1|A|.
    pub small_fraction: f64,
    /// max over the passing region of |F/A|·|z|^{10} (log10): the decay
    /// witness compared across radii by the experiments.
    pub decay_witness_log10: f64,
    pub probes_used: usize,
    pub probes_skipped: usize,
}

pub struct MembershipOptions {
    pub grid_radius: f64,
    pub smallness_factor: f64,
    pub density_threshold: f64,
    pub growth_exponent_max: u32,
    pub circle_points: usize,
    pub circle_count: usize,
    pub grid_points: usize,
}

impl MembershipOptions {
    pub fn with_radius(grid_radius: f64) -> Self {
        MembershipOptions {
            grid_radius,
            smallness_factor: 0.1,
            density_threshold: 0.2,
            growth_exponent_max: 16,
            circle_points: 24,
            circle_count: 8,
            grid_points: 64,
        }
    }
}

/// Runs the three membership checks for a candidate `F` against the space
/// data `(ns, mu, a)`.
pub fn membership_check(
    f: &dyn ComplexMap,
    ns: &NodeSet,
    mu: &Measure,
    a: &EntireFunction,
    opts: &MembershipOptions,
    ctx: &PrecisionContext,
) -> KResult<MembershipReport> {
    let p = ctx.bits();
    let (sep_c, sep_n) = ns.check_power_separation().map_err(|e| KernelError::Invalid(e.to_string()))?;

    // (i) node sums
    let mut total = Float::with_val(p, 0);
    let mut outer = Float::with_val(p, 0);
    let r_t = ns.radius();
    for i in 0..ns.len() {
        let t = ns.node(i);
        let fv = f.eval_map(t, ctx)?;
        let d = a.derivative_at_node(t, ctx)?;
        let da = d.abs();
        if da.is_zero() {
            return Err(KernelError::DerivativeUnderflow);
        }
        let num = Float::with_val(p, fv.abs().square_ref());
        let den = Float::with_val(p, da.square_ref()) * mu.value(i);
        let term = num / den;
        if ns.modulus(i).to_f64() > r_t / 10.0 {
            outer += &term;
        }
        total += term;
    }
    let verdict_i = if total.is_finite() { Verdict3::Pass } else { Verdict3::Fail };
    let outer_decade_share =
        if total.is_zero() { 0.0 } else { Float::with_val(64, &outer / &total).to_f64() };

    // probe exclusion radius: half the separation disks
    let excluded = |zr: f64, zi: f64| -> bool {
        let z = cpx(zr, zi, 64);
        if let Some((i, d)) = ns.nearest(&z) {
            let rad = 0.5 * sep_c * (ns.modulus(i).to_f64() + 1.0).powf(-sep_n);
            d < rad
        } else {
            false
        }
    };

    // (ii) log-spaced circles
    let mut growth_log: Vec<f64> = vec![f64::NEG_INFINITY; opts.growth_exponent_max as usize + 1];
    let r_hi = opts.grid_radius;
    let r_lo = (r_hi / 100.0).max(0.5);
    let mut used = 0usize;
    let mut skipped = 0usize;
    for ci in 0..opts.circle_count {
        let frac = ci as f64 / (opts.circle_count.max(2) - 1) as f64;
        let radius = r_lo * (r_hi / r_lo).powf(frac);
        for pi in 0..opts.circle_points {
            let th = 2.0 * std::f64::consts::PI * (pi as f64 + 0.5) / opts.circle_points as f64;
            let (zr, zi) = (radius * th.cos(), radius * th.sin());
            if excluded(zr, zi) {
                skipped += 1;
                continue;
            }
            let z = cpx(zr, zi, p);
            let fv = f.eval_map(&z, ctx)?;
            let av = a.evaluate(&z, ctx)?;
            if av.abs().is_zero() {
                skipped += 1;
                continue;
            }
            used += 1;
            let ratio_log = fv.abs().to_f64().max(1e-300).log10() - av.abs().to_f64().log10();
            let zlog = radius.max(1e-300).log10();
            for (np, slot) in growth_log.iter_mut().enumerate() {
                let v = ratio_log - np as f64 * zlog;
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    let growth_exponent = growth_log.iter().position(|&v| v <= 0.0).map(|i| i as u32);
    let verdict_ii = if used < (opts.circle_count * opts.circle_points) / 2 {
        Verdict3::Inconclusive
    } else if growth_exponent.is_some() {
        Verdict3::Pass
    } else {
        Verdict3::Fail
    };

    // (iii) uniform grid on the disk
    let n = opts.grid_points;
    let mut small = 0usize;
    let mut grid_used = 0usize;
    let mut witness = f64::NEG_INFINITY;
    for gi in 0..n {
        for gj in 0..n {
            let zr = -r_hi + (2.0 * r_hi) * (gi as f64 + 0.5) / n as f64;
            let zi = -r_hi + (2.0 * r_hi) * (gj as f64 + 0.5) / n as f64;
            if zr.hypot(zi) > r_hi || excluded(zr, zi) {
                continue;
            }
            let z = cpx(zr, zi, p);
            let fv = f.eval_map(&z, ctx)?;
            let av = a.evaluate(&z, ctx)?;
            if av.abs().is_zero() {
                continue;
            }
            grid_used += 1;
            let fa = fv.abs().to_f64();
            let aa = av.abs().to_f64();
            if fa < opts.smallness_factor * aa {
                small += 1;
                let w = fa.max(1e-300).log10() - aa.log10() + 10.0 * zr.hypot(zi).max(1e-9).log10();
                if w > witness {
                    witness = w;
                }
            }
        }
    }
    let small_fraction = if grid_used == 0 { 0.0 } else { small as f64 / grid_used as f64 };
    let verdict_iii = if grid_used < n * n / 4 {
        Verdict3::Inconclusive
    } else if small_fraction >= opts.density_threshold {
        Verdict3::Pass
    } else {
        Verdict3::Fail
    };

    Ok(MembershipReport {
        verdict_i,
        node_sum_log10: log10_real(&total),
        outer_decade_share,
        verdict_ii,
        growth_exponent,
        growth_table_log10: growth_log,
        verdict_iii,
        small_fraction,
        decay_witness_log10: witness,
        probes_used: used + grid_used,
        probes_skipped: skipped,
    })
}

fn log10_real(x: &Real) -> f64 {
    if x.is_zero() {
        f64::NEG_INFINITY
    } else {
        let l = Float::with_val(64, x.ln_ref());
        l.to_f64() / std::f64::consts::LN_10
    }
}

/// The entire part H of `A₂·Σ_{T₁} c μ^{1/2}/(z−t) − Σ_{T₁} A₂(t) c μ^{1/2}/(z−t)`,
/// evaluated term-wise as difference quotients
/// `Σ c_n μ_n^{1/2} (A₂(z) − A₂(t_n))/(z − t_n)`.
pub struct SplitEntirePart {
    weights: Vec<Cpx>,   // c_n μ_n^{1/2}
    t1_nodes: Vec<Cpx>,  // the T₁ nodes
    a2_at_nodes: Vec<BoundedValue>,
    a2_deriv_at_nodes: Vec<BoundedValue>,
    a2: Arc<EntireFunction>,
}

/// Builds H from coefficients supported on the node subset `t1_idx` of `ns`.
/// T₁ must be disjoint from the zeros of A₂.
pub fn split_entire_part(
    coeffs: &[Cpx],
    t1_idx: &[usize],
    ns: &NodeSet,
    mu: &Measure,
    a2: Arc<EntireFunction>,
    ctx: &PrecisionContext,
) -> KResult<SplitEntirePart> {
    if coeffs.len() != t1_idx.len() {
        return Err(KernelError::Invalid("one coefficient per T₁ node required".into()));
    }
    let p = ctx.bits();
    let mut weights = Vec::with_capacity(t1_idx.len());
    let mut t1_nodes = Vec::with_capacity(t1_idx.len());
    let mut a2_at = Vec::with_capacity(t1_idx.len());
    let mut a2_d = Vec::with_capacity(t1_idx.len());
    for (j, &i) in t1_idx.iter().enumerate() {
        let t = ns.node(i);
        if let Some(dist) = a2.nearest_zero_dist(t) {
            if dist < 1e-9 {
                return Err(KernelError::Invalid(
                    "T₁ node coincides with a zero of A₂".into(),
                ));
            }
        }
        let v = a2.evaluate(t, ctx)?;
        let ld = a2.log_derivative(t, ctx)?;
        a2_d.push(v.mul(&ld, p));
        a2_at.push(v);
        weights.push(Complex::with_val(p, &coeffs[j] * &mu.sqrt(i, p)));
        t1_nodes.push(t.clone());
    }
    Ok(SplitEntirePart { weights, t1_nodes, a2_at_nodes: a2_at, a2_deriv_at_nodes: a2_d, a2 })
}

impl SplitEntirePart {
    /// H(z), with cancellation-aware escalation: if the difference quotients
    /// lose too much precision the evaluation retries at doubled precision
    /// up to the context ceiling.
    pub fn evaluate(&self, z: &Cpx, ctx: &PrecisionContext) -> KResult<BoundedValue> {
        let mut cur = ctx.clone();
        loop {
            let out = self.evaluate_once(z, &cur)?;
            if out.abs_error <= *ctx.target_tol()
                || out.abs_error <= Float::with_val(64, out.abs()) * two_pow(-(ctx.bits() as i64) / 2)
            {
                return Ok(out);
            }
            match cur.escalated() {
                Some(next) => cur = next,
                None => {
                    return Err(KernelError::PrecisionExhausted {
                        bits: cur.bits(),
                        max_bits: cur.max_bits(),
                    })
                }
            }
        }
    }

    fn evaluate_once(&self, z: &Cpx, ctx: &PrecisionContext) -> KResult<BoundedValue> {
        let p = ctx.bits();
        let a2z = self.a2.evaluate(z, ctx)?;
        let mut acc = BoundedValue::exact(cpx(0.0, 0.0, p));
        for (j, t) in self.t1_nodes.iter().enumerate() {
            let dz = Complex::with_val(p, z - t);
            let dist = cabs(&dz, 64).to_f64();
            let quotient = if dist == 0.0 {
                self.a2_deriv_at_nodes[j].clone()
            } else if dist < two_pow(-(p as i64) / 4).to_f64() {
                // Taylor fallback: A₂'(t) with a heuristic curvature pad
                let mut d = self.a2_deriv_at_nodes[j].clone();
                let pad = Float::with_val(64, d.abs())
                    * real(dist * 20.0 * (crate::nodes::abs_f64(t) + 1.0), 64);
                d.abs_error += pad;
                d.rigorous = false;
                d
            } else {
                let num = a2z.add(&self.a2_at_nodes[j].scale(&cpx(-1.0, 0.0, p), p), p);
                num.div(&BoundedValue::exact(dz), p)
            };
            acc = acc.add(&quotient.scale(&self.weights[j], p), p);
        }
        Ok(acc)
    }
}

impl ComplexMap for SplitEntirePart {
    fn eval_map(&self, z: &Cpx, ctx: &PrecisionContext) -> KResult<BoundedValue> {
        self.evaluate(z, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nodes::{attach_measure, generate_nodes, MeasureRule, NodeKind};

    fn ctx() -> PrecisionContext {
        PrecisionContext::new(256, 1e-30).unwrap()
    }

    fn geo_space(radius: f64) -> (Arc<NodeSet>, Arc<Measure>, Arc<EntireFunction>) {
        let c = ctx();
        let ns = Arc::new(generate_nodes(&NodeKind::Geometric { ratio: 2.0 }, radius).unwrap());
        // A over 4× the truncation so that A'(t_n) is within policy at
        // every node of the space truncation
        let ns_a = Arc::new(ns.extend_to_radius(radius * 4.0).unwrap());
        let a = Arc::new(EntireFunction::canonical(ns_a).unwrap());
        let mu =
            Arc::new(attach_measure(&ns, &MeasureRule::StretchedExp { gamma: 1.0 }, None, &c).unwrap());
        (ns, mu, a)
    }

    #[test]
    fn zero_element_evaluates_to_zero() {
        let c = ctx();
        let (ns, mu, a) = geo_space(32.0);
        let coeffs = vec![Complex::with_val(256, (0, 0)); ns.len()];
        let el = SpaceElement::new(coeffs, ns, mu, a).unwrap();
        assert!(el.is_zero());
        assert!(el.norm().is_zero());
        let v = el.evaluate_big_f(&cpx(1.3, 0.7, 256), &c).unwrap();
        assert!(v.abs().is_zero());
    }

    #[test]
    fn length_mismatch_rejected() {
        let (ns, mu, a) = geo_space(32.0);
        let bad = vec![Complex::with_val(256, (1, 0)); ns.len() + 1];
        assert!(SpaceElement::new(bad, ns, mu, a).is_err());
    }

    #[test]
    fn norm_matches_l2_oracle() {
        let (ns, mu, a) = geo_space(32.0);
        let coeffs = gaussian_coeffs(7, ns.len(), 256);
        let oracle: f64 = coeffs
            .iter()
            .map(|c| c.real().to_f64().powi(2) + c.imag().to_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        let el = SpaceElement::new(coeffs, ns, mu, a).unwrap();
        assert!((el.norm().to_f64() - oracle).abs() < 1e-12 * oracle);
    }

    #[test]
    fn residue_identity_at_node() {
        // single-node element: F(t_k) = μ_k^{1/2} A'(t_k)
        let c = ctx();
        let (ns, mu, a) = geo_space(32.0);
        let coeffs = make_coefficients(&CoeffSpec::Basis { k: 1 }, &ns, &mu, &a, &c).unwrap();
        let el = SpaceElement::new(coeffs, ns.clone(), mu.clone(), a.clone()).unwrap();
        let v = el.evaluate_big_f(ns.node(1), &c).unwrap();
        let expect = a.derivative_at_node(ns.node(1), &c).unwrap();
        let scaled = expect.scale(&Complex::with_val(256, (&mu.sqrt(1, 256), 0)), 256);
        let diff = Complex::with_val(256, &v.value - &scaled.value);
        let budget = Float::with_val(64, &v.abs_error + &scaled.abs_error);
        assert!(cabs(&diff, 64) <= budget);
    }

    #[test]
    fn big_f_continuous_across_residue_switch(){
        // residue-form and direct-form values agree where both apply
        let c = ctx();
        let (ns, mu, a) = geo_space(32.0);
        let coeffs = gaussian_coeffs(3, ns.len(), 256);
        let el = SpaceElement::new(coeffs, ns.clone(), mu, a).unwrap();
        // just inside vs outside the switch radius around t = 4
        let gap = 2.0; // node 4's nearest neighbour is 2
        let z_in = cpx(4.0 + 0.2 * gap * 0.25, 1e-3, 256);
        let z_out = cpx(4.0 + 5.0 * gap * 0.25, 1e-3, 256);
        for z in [z_in, z_out] {
            let direct = {
                let fv = el.evaluate_f(&z, &c).unwrap();
                let av = el.generating_fn().evaluate(&z, &c).unwrap();
                av.mul(&fv, 256)
            };
            let via = el.evaluate_big_f(&z, &c).unwrap();
            let diff = Complex::with_val(256, &direct.value - &via.value);
            let budget = Float::with_val(64, &direct.abs_error + &via.abs_error)
                + Float::with_val(64, 1e-40);
            assert!(cabs(&diff, 64) <= budget);
        }
    }

    #[test]
    fn evaluate_f_rejects_points_on_nodes() {
        let c = ctx();
        let (ns, mu, a) = geo_space(32.0);
        let coeffs = gaussian_coeffs(1, ns.len(), 256);
        let el = SpaceElement::new(coeffs, ns.clone(), mu, a).unwrap();
        match el.evaluate_f(ns.node(0), &c) {
            Err(KernelError::TooCloseToZero { .. }) => {}
            other => panic!("expected TooCloseToZero, got {other:?}"),
        }
    }

    #[test]
    fn linearity_of_big_f() {
        let c = ctx();
        let (ns, mu, a) = geo_space(32.0);
        let e1 = SpaceElement::new(gaussian_coeffs(11, ns.len(), 256), ns.clone(), mu.clone(), a.clone()).unwrap();
        let e2 = SpaceElement::new(gaussian_coeffs(12, ns.len(), 256), ns.clone(), mu.clone(), a.clone()).unwrap();
        let sum = e1.add(&e2).unwrap();
        let z = cpx(3.1, -0.4, 256);
        let v1 = e1.evaluate_big_f(&z, &c).unwrap();
        let v2 = e2.evaluate_big_f(&z, &c).unwrap();
        let vs = sum.evaluate_big_f(&z, &c).unwrap();
        let lhs = Complex::with_val(256, &v1.value + &v2.value);
        let diff = Complex::with_val(256, &lhs - &vs.value);
        let budget = Float::with_val(64, &v1.abs_error + &v2.abs_error) + &vs.abs_error;
        assert!(cabs(&diff, 64) <= budget);
    }

    #[test]
    fn moment_of_basis_vector() {
        // moment of e_m is μ_m t_m^k exactly (to rounding)
        let c = ctx();
        let (ns, mu, a) = geo_space(32.0);
        let coeffs = make_coefficients(&CoeffSpec::Basis { k: 2 }, &ns, &mu, &a, &c).unwrap();
        let m = moment(&coeffs, &ns, &mu, 3, &MomentTail::None, &c).unwrap();
        // t_2 = 8, μ = e^{-8}, k = 3 → 512 e^{-8}
        let expect = 512.0 * (-8.0f64).exp();
        assert!((m.value.value.real().to_f64() - expect).abs() < 1e-12 * expect);
        assert!(m.tail_bound.is_zero());
    }

    #[test]
    fn moment_zero_coeffs() {
        let c = ctx();
        let (ns, mu, _a) = geo_space(32.0);
        let coeffs = vec![Complex::with_val(256, (0, 0)); ns.len()];
        let m = moment(&coeffs, &ns, &mu, 5, &MomentTail::None, &c).unwrap();
        assert!(m.value.abs().is_zero());
        assert!(m.tail_bound.is_zero());
    }

    #[test]
    fn moment_ones_stretched_exp() {
        // Σ e^{-2^n} over {2,4,8,16,32}: direct-summation oracle
        let c = ctx();
        let (ns, mu, _a) = geo_space(40.0);
        let coeffs = vec![Complex::with_val(256, (1, 0)); ns.len()];
        let m = moment(&coeffs, &ns, &mu, 0, &MomentTail::None, &c).unwrap();
        let oracle: f64 = [2.0f64, 4.0, 8.0, 16.0, 32.0].iter().map(|t| (-t).exp()).sum();
        assert!((m.value.value.real().to_f64() - oracle).abs() < 1e-15);
        assert!((oracle - 0.1539).abs() < 1e-3);
    }

    #[test]
    fn orthogonal_coeffs_single_node() {
        let c = ctx();
        let ns = Arc::new(
            generate_nodes(&NodeKind::Explicit { points: vec![(2.0, 0.0), (4.0, 0.0)] }, 8.0)
                .unwrap(),
        );
        let a = Arc::new(EntireFunction::canonical(ns.clone()).unwrap());
        let mu = Arc::new(
            attach_measure(&ns, &MeasureRule::Explicit { weights: vec![1.0, 1.0] }, None, &c)
                .unwrap(),
        );
        let oc = orthogonal_coefficients(&ns, &mu, &a, &c).unwrap();
        // c_0 = 1/(A'(2)·1); A'(2) = (−1/2)(1−2/4) = −1/4 → c_0 = −4
        assert!((oc.coeffs[0].real().to_f64() + 4.0).abs() < 1e-30);
    }

    #[test]
    fn split_entire_part_difference_quotient() {
        // single node: H(z) = (A₂(z) − A₂(t))/(z − t), H(t) = A₂'(t)
        let c = ctx();
        let p = 256;
        let a2 = Arc::new(EntireFunction::sin_cross(16.0).unwrap());
        let ns = Arc::new(
            generate_nodes(&NodeKind::Explicit { points: vec![(0.5, 0.5)] }, 2.0).unwrap(),
        );
        let mu = Arc::new(
            attach_measure(&ns, &MeasureRule::Explicit { weights: vec![1.0] }, None, &c).unwrap(),
        );
        let h = split_entire_part(
            &[Complex::with_val(p, (1, 0))],
            &[0],
            &ns,
            &mu,
            a2.clone(),
            &c,
        )
        .unwrap();
        let t = cpx(0.5, 0.5, p);
        // at z = t: A₂'(t) = A₂(t)·(A₂'/A₂)(t)
        let at = h.evaluate(&t, &c).unwrap();
        let expect = {
            let v = a2.evaluate(&t, &c).unwrap();
            let ld = a2.log_derivative(&t, &c).unwrap();
            v.mul(&ld, p)
        };
        let diff = Complex::with_val(p, &at.value - &expect.value);
        assert!(cabs(&diff, 64) <= Float::with_val(64, &at.abs_error + &expect.abs_error));
        // away from t: plain difference quotient
        let z = cpx(1.3, -0.2, p);
        let hz = h.evaluate(&z, &c).unwrap();
        let direct = {
            let az = a2.evaluate(&z, &c).unwrap();
            let at2 = a2.evaluate(&t, &c).unwrap();
            let num = Complex::with_val(p, &az.value - &at2.value);
            let den = Complex::with_val(p, &z - &t);
            Complex::with_val(p, &num / &den)
        };
        let diff2 = Complex::with_val(p, &hz.value - &direct);
        assert!(cabs(&diff2, 64).to_f64() < 1e-30);
    }

    #[test]
    fn split_zero_coeffs_is_zero() {
        let c = ctx();
        let p = 256;
        let a2 = Arc::new(EntireFunction::sin_cross(16.0).unwrap());
        let ns = Arc::new(
            generate_nodes(&NodeKind::Explicit { points: vec![(0.5, 0.5), (1.5, 0.5)] }, 4.0)
                .unwrap(),
        );
        let mu = Arc::new(
            attach_measure(&ns, &MeasureRule::Explicit { weights: vec![1.0, 1.0] }, None, &c)
                .unwrap(),
        );
        let zero = Complex::with_val(p, (0, 0));
        let h = split_entire_part(&[zero.clone(), zero], &[0, 1], &ns, &mu, a2, &c).unwrap();
        let v = h.evaluate(&cpx(0.9, 0.1, p), &c).unwrap();
        assert!(v.abs().is_zero());
    }

    #[test]
    fn gaussian_coeffs_reproducible() {
        let a = gaussian_coeffs(42, 16, 128);
        let b = gaussian_coeffs(42, 16, 128);
        assert_eq!(a, b);
        let c = gaussian_coeffs(43, 16, 128);
        assert_ne!(a, c);
    }
}
