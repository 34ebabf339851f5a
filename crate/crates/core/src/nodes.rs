//! Node-set generators and weight measures.
//!
//! A [`NodeSet`] is a finite truncation (modulus ≤ `radius`) of one of the
//! built-in node families, sorted by `(|t|, arg t)`. Truncations remember
//! their generator, so they can be extended to a larger radius and can bound
//! sums like `Σ_{|t|>R} |t|^{-k}` over the excluded part of the family —
//! that is what all product/tail error estimates are built from.
//!
//! Separation is verified, not assumed: [`NodeSet::check_power_separation`]
//! scans the truncation for the least `N` and largest grid `C` with
//! `dist(t_n, rest) ≥ C (|t_n|+1)^{-N}`. The `(|t|+1)` normalization (rather
//! than `|t|`) keeps lattice families with small nodes, including 0, usable.

use std::sync::{Arc, OnceLock};

use rug::ops::Pow;
use rug::{Complex, Float};
use serde::{Deserialize, Serialize};

use crate::kernel::{
    cabs, BoundedValue, Cpx, KResult, KernelError, PrecisionContext, Real, NODE_BITS,
};

/// Angle as a rational multiple of π, kept exact until evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PiAngle {
    pub num: i32,
    pub den: i32,
}

impl PiAngle {
    pub const ZERO: PiAngle = PiAngle { num: 0, den: 1 };

    pub fn quarter() -> Self {
        PiAngle { num: 1, den: 4 }
    }

    fn zero_default() -> PiAngle {
        PiAngle::ZERO
    }

    /// e^{iθ} at the given precision.
    pub fn unit(&self, prec: u32) -> Cpx {
        if self.num == 0 {
            return Complex::with_val(prec, (1, 0));
        }
        let theta = Float::with_val(prec, rug::float::Constant::Pi) * self.num / self.den;
        let (s, c) = theta.sin_cos(Float::new(prec));
        Complex::with_val(prec, (c, s))
    }

    pub fn radians(&self) -> f64 {
        std::f64::consts::PI * self.num as f64 / self.den as f64
    }
}

/// Constant of the form `(a + b√2)·π`; covers the weight rates `2π` and
/// `(2√2+2)π` used by the lattice examples.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PiConstant {
    pub rational: f64,
    #[serde(default)]
    pub sqrt2: f64,
}

impl PiConstant {
    pub fn value(&self, prec: u32) -> Real {
        let mut v = Float::with_val(prec, self.rational);
        if self.sqrt2 != 0.0 {
            v += Float::with_val(prec, 2).sqrt() * Float::with_val(prec, self.sqrt2);
        }
        v * Float::with_val(prec, rug::float::Constant::Pi)
    }

    pub fn approx(&self) -> f64 {
        (self.rational + self.sqrt2 * std::f64::consts::SQRT_2) * std::f64::consts::PI
    }
}

/// Built-in node families.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NodeKind {
    /// t_n = ratio^n, n ≥ 1.
    Geometric { ratio: f64 },
    /// t_n = e^{iθ} n^α, n ≥ 1 (phase π/2 gives the `i k^β` family).
    Power {
        alpha: f64,
        #[serde(default = "PiAngle::zero_default")]
        phase: PiAngle,
    },
    /// t_n = |n|^α sign n, n ∈ ℤ \ {0}.
    SignedPower { alpha: f64 },
    /// ℤ ∪ iℤ, origin included.
    CrossLattice,
    /// ℤ + iℤ, origin included.
    SquareLattice,
    /// ℤ + iℤ + 1/2.
    ShiftedSquareLattice,
    /// e^{iθ}(ℤ ∪ iℤ), optionally without the origin.
    RotatedCrossLattice {
        angle: PiAngle,
        #[serde(default = "default_true")]
        include_origin: bool,
    },
    /// A finite explicit list (re, im pairs).
    Explicit { points: Vec<(f64, f64)> },
    /// Union of families, interleaved by modulus; nodes remember which
    /// operand they came from (piecewise measures key on this).
    Union { parts: Vec<NodeKind> },
}

fn default_true() -> bool {
    true
}

/// How canonical products over the family converge; decides pairing and
/// tail exponents in the `entire` module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProductScheme {
    /// ∏ (1 − z/t); needs Σ|t|⁻¹ < ∞. Also used for finite explicit sets.
    Plain,
    /// Symmetric family, factors paired as (1 − z²/t²); needs Σ|t|⁻² < ∞.
    Paired,
    /// Symmetric family, paired with convergence factor e^{z²/t²}
    /// (σ-style); needs Σ|t|⁻³ < ∞. Used by the planar lattices.
    PairedExp,
    /// Unpaired Weierstrass factors E_g(z/t) of the given genus.
    Genus(u32),
}

impl ProductScheme {
    /// Exponent k such that the truncation tail is controlled by
    /// Σ_{|t|>R} |z/t|^k.
    pub fn tail_exponent(&self) -> u32 {
        match self {
            ProductScheme::Plain => 1,
            ProductScheme::Paired => 2,
            ProductScheme::PairedExp => 3,
            ProductScheme::Genus(g) => g + 1,
        }
    }
}

/// A finite truncation of a node family.
#[derive(Debug, Clone)]
pub struct NodeSet {
    kind: NodeKind,
    nodes: Vec<Cpx>,
    moduli: Vec<Real>,
    part: Vec<u8>,
    radius: f64,
    scheme: ProductScheme,
    symmetric: bool,
    sep: OnceLock<(f64, f64)>,
    sub: Vec<Arc<NodeSet>>,
}

impl PartialEq for NodeSet {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.radius == other.radius && self.nodes == other.nodes
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum NodeError {
    #[error("ratio must exceed 1, got {0}")]
    BadRatio(f64),
    #[error("alpha must be positive, got {0}")]
    BadAlpha(f64),
    #[error("radius must be at least 1, got {0}")]
    BadRadius(f64),
    #[error("node set has coincident nodes near ({0}, {1})")]
    CoincidentNodes(f64, f64),
    #[error("explicit node at ({0}, {1}) exceeds the declared radius")]
    NodeBeyondRadius(f64, f64),
    #[error("need at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("no power separation with N ≤ 8 holds for this truncation")]
    NotPowerSeparated,
    #[error("measure rule needs the generating function A")]
    MeasureNeedsA,
    #[error("derivative underflow: |A'(t_n)| vanished at node {0}")]
    DerivativeUnderflow(usize),
    #[error("piecewise measure needs one rule per union part (got {got}, need {need})")]
    PiecewiseArity { got: usize, need: usize },
    #[error("explicit measure length {got} does not match node count {need}")]
    ExplicitLength { got: usize, need: usize },
    #[error("weights must be positive; weight {0} is not")]
    NonPositiveWeight(usize),
    #[error("measure evaluation failed: {0}")]
    Eval(String),
}

pub type NResult<T> = Result<T, NodeError>;

/// Generates every node of the family with modulus ≤ `radius`.
pub fn generate_nodes(kind: &NodeKind, radius: f64) -> NResult<NodeSet> {
    if !(radius >= 1.0) || !radius.is_finite() {
        return Err(NodeError::BadRadius(radius));
    }
    let mut sub = Vec::new();
    let (mut pts, scheme, symmetric): (Vec<(Cpx, u8)>, ProductScheme, bool) = match kind {
        NodeKind::Geometric { ratio } => {
            if !(*ratio > 1.0) {
                return Err(NodeError::BadRatio(*ratio));
            }
            let mut pts = Vec::new();
            let q = Float::with_val(NODE_BITS, *ratio);
            let mut t = q.clone();
            while t <= radius {
                pts.push((Complex::with_val(NODE_BITS, (&t, 0)), 0));
                t = Float::with_val(NODE_BITS, &t * &q);
            }
            (pts, ProductScheme::Plain, false)
        }
        NodeKind::Power { alpha, phase } => {
            if !(*alpha > 0.0) {
                return Err(NodeError::BadAlpha(*alpha));
            }
            let rot = phase.unit(NODE_BITS);
            let mut pts = Vec::new();
            for n in 1u64.. {
                let m = Float::with_val(NODE_BITS, n).pow(Float::with_val(NODE_BITS, *alpha));
                if m > radius {
                    break;
                }
                pts.push((Complex::with_val(NODE_BITS, &rot * &m), 0));
            }
            // genus: smallest g ≥ 0 with (g+1)·α > 1
            let g = (0u32..).find(|g| (*g as f64 + 1.0) * alpha > 1.0).unwrap();
            let scheme = if g == 0 { ProductScheme::Plain } else { ProductScheme::Genus(g) };
            (pts, scheme, false)
        }
        NodeKind::SignedPower { alpha } => {
            if !(*alpha > 0.0) {
                return Err(NodeError::BadAlpha(*alpha));
            }
            let mut pts = Vec::new();
            for n in 1u64.. {
                let m = Float::with_val(NODE_BITS, n).pow(Float::with_val(NODE_BITS, *alpha));
                if m > radius {
                    break;
                }
                pts.push((Complex::with_val(NODE_BITS, (&m, 0)), 0));
                pts.push((Complex::with_val(NODE_BITS, (-m, 0)), 0));
            }
            let scheme =
                if 2.0 * alpha > 1.0 { ProductScheme::Paired } else { ProductScheme::PairedExp };
            (pts, scheme, true)
        }
        NodeKind::CrossLattice => (cross_points(radius, None, true), ProductScheme::Paired, true),
        NodeKind::RotatedCrossLattice { angle, include_origin } => {
            let rot = angle.unit(NODE_BITS);
            (cross_points(radius, Some(&rot), *include_origin), ProductScheme::Paired, true)
        }
        NodeKind::SquareLattice => (square_points(radius, false), ProductScheme::PairedExp, true),
        NodeKind::ShiftedSquareLattice => {
            (square_points(radius, true), ProductScheme::PairedExp, true)
        }
        NodeKind::Explicit { points } => {
            let mut pts = Vec::new();
            for (re, im) in points {
                if re.hypot(*im) > radius {
                    return Err(NodeError::NodeBeyondRadius(*re, *im));
                }
                pts.push((Complex::with_val(NODE_BITS, (*re, *im)), 0));
            }
            (pts, ProductScheme::Plain, false)
        }
        NodeKind::Union { parts } => {
            let mut pts = Vec::new();
            let mut symmetric = true;
            let mut tail_exp = 1;
            for (idx, part_kind) in parts.iter().enumerate() {
                let part = generate_nodes(part_kind, radius)?;
                symmetric &= part.symmetric;
                tail_exp = tail_exp.max(part.scheme.tail_exponent());
                for t in part.nodes.iter() {
                    pts.push((t.clone(), idx as u8));
                }
                sub.push(Arc::new(part));
            }
            // scheme recorded for tail queries only; evaluation goes per part
            let scheme = match tail_exp {
                1 => ProductScheme::Plain,
                2 => ProductScheme::Paired,
                _ => ProductScheme::PairedExp,
            };
            (pts, scheme, symmetric)
        }
    };

    sort_points(&mut pts);
    let mut nodes = Vec::with_capacity(pts.len());
    let mut part = Vec::with_capacity(pts.len());
    for (t, p) in pts {
        nodes.push(t);
        part.push(p);
    }
    let moduli: Vec<Real> = nodes.iter().map(|t| cabs(t, NODE_BITS)).collect();
    for i in 1..nodes.len() {
        if nodes[i] == nodes[i - 1] {
            let z = &nodes[i];
            return Err(NodeError::CoincidentNodes(z.real().to_f64(), z.imag().to_f64()));
        }
    }
    Ok(NodeSet {
        kind: kind.clone(),
        nodes,
        moduli,
        part,
        radius,
        scheme,
        symmetric,
        sep: OnceLock::new(),
        sub,
    })
}

fn sort_points(pts: &mut [(Cpx, u8)]) {
    pts.sort_by(|(a, _), (b, _)| {
        abs_f64(a)
            .partial_cmp(&abs_f64(b))
            .unwrap()
            .then_with(|| arg_f64(a).partial_cmp(&arg_f64(b)).unwrap())
            .then_with(|| a.real().to_f64().partial_cmp(&b.real().to_f64()).unwrap())
    });
}

pub(crate) fn abs_f64(z: &Cpx) -> f64 {
    z.real().to_f64().hypot(z.imag().to_f64())
}

fn arg_f64(z: &Cpx) -> f64 {
    z.imag().to_f64().atan2(z.real().to_f64())
}

fn cross_points(radius: f64, rot: Option<&Cpx>, include_origin: bool) -> Vec<(Cpx, u8)> {
    let mut pts = Vec::new();
    if include_origin {
        pts.push((Complex::with_val(NODE_BITS, (0, 0)), 0));
    }
    let k_max = radius.floor() as i64;
    for k in 1..=k_max {
        for (re, im) in [(k, 0), (-k, 0), (0, k), (0, -k)] {
            let mut z = Complex::with_val(NODE_BITS, (re, im));
            if let Some(r) = rot {
                z *= r;
            }
            pts.push((z, 0));
        }
    }
    pts
}

fn square_points(radius: f64, shifted: bool) -> Vec<(Cpx, u8)> {
    let mut pts = Vec::new();
    let bound = (radius + 1.0).ceil() as i64;
    for m in -bound..=bound {
        for n in -bound..=bound {
            let re = if shifted {
                Float::with_val(NODE_BITS, 2 * m + 1) / 2u32
            } else {
                Float::with_val(NODE_BITS, m)
            };
            let z = Complex::with_val(NODE_BITS, (re, n));
            if cabs(&z, NODE_BITS) <= radius {
                pts.push((z, 0));
            }
        }
    }
    pts
}

impl NodeSet {
    pub fn kind(&self) -> &NodeKind {
        &self.kind
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &Cpx {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[Cpx] {
        &self.nodes
    }

    /// |t_i| at node precision.
    pub fn modulus(&self, i: usize) -> &Real {
        &self.moduli[i]
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn scheme(&self) -> ProductScheme {
        self.scheme
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    /// Which union operand node `i` came from (0 outside unions).
    pub fn part_of(&self, i: usize) -> u8 {
        self.part[i]
    }

    pub fn part_count(&self) -> usize {
        self.sub.len().max(1)
    }

    /// Operand node sets of a union (empty otherwise).
    pub fn parts(&self) -> &[Arc<NodeSet>] {
        &self.sub
    }

    /// Indices of nodes belonging to union part `p`.
    pub fn part_indices(&self, p: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.part[i] == p).collect()
    }

    /// Index of the node nearest to `z` (f64 geometry; ties by index).
    pub fn nearest(&self, z: &Cpx) -> Option<(usize, f64)> {
        let zr = z.real().to_f64();
        let zi = z.imag().to_f64();
        let mut best: Option<(usize, f64)> = None;
        for (i, t) in self.nodes.iter().enumerate() {
            let d = (zr - t.real().to_f64()).hypot(zi - t.imag().to_f64());
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best
    }

    /// Least `N ∈ {0,…,8}` and largest `C` on a 1/8-grid with
    /// `dist(t_n, rest) ≥ C (|t_n|+1)^{-N}` over the whole truncation.
    pub fn check_power_separation(&self) -> NResult<(f64, f64)> {
        if let Some(&(c, n)) = self.sep.get() {
            return Ok((c, n));
        }
        if self.len() < 2 {
            return Err(NodeError::TooFewNodes(self.len()));
        }
        let pts: Vec<(f64, f64)> =
            self.nodes.iter().map(|t| (t.real().to_f64(), t.imag().to_f64())).collect();
        let mut gap = vec![f64::INFINITY; pts.len()];
        for i in 0..pts.len() {
            for j in (i + 1)..pts.len() {
                let d = (pts[i].0 - pts[j].0).hypot(pts[i].1 - pts[j].1);
                if d < gap[i] {
                    gap[i] = d;
                }
                if d < gap[j] {
                    gap[j] = d;
                }
            }
        }
        for n in 0..=8u32 {
            let mut c_max = f64::INFINITY;
            for (i, g) in gap.iter().enumerate() {
                let w = (self.moduli[i].to_f64() + 1.0).powi(n as i32);
                c_max = c_max.min(g * w);
            }
            let c_grid = (c_max * 8.0).floor() / 8.0;
            if c_grid >= 0.125 {
                let c_grid = c_grid.min(128.0);
                let _ = self.sep.set((c_grid, n as f64));
                return Ok((c_grid, n as f64));
            }
        }
        Err(NodeError::NotPowerSeparated)
    }

    /// Separation constants if already computed.
    pub fn separation(&self) -> Option<(f64, f64)> {
        self.sep.get().copied()
    }

    /// Regenerates the family at a larger radius. Explicit sets are already
    /// the whole family; they extend to themselves.
    pub fn extend_to_radius(&self, new_radius: f64) -> NResult<NodeSet> {
        if new_radius <= self.radius || matches!(self.kind, NodeKind::Explicit { .. }) {
            return Ok(self.clone());
        }
        generate_nodes(&self.kind, new_radius)
    }

    /// Whether the generator describes an infinite family (explicit lists
    /// are the whole zero set: no truncation tail).
    pub fn is_infinite_family(&self) -> bool {
        !matches!(self.kind, NodeKind::Explicit { .. })
    }

    /// Upper bound for `Σ_{|t| > from_radius} |t|^{-k}` over the infinite
    /// family; `None` when that exponent does not give convergence. Finite
    /// explicit families return 0.
    pub fn tail_sum(&self, from_radius: f64, k: u32) -> Option<f64> {
        if from_radius < 2.0 {
            // closed forms below assume the tail starts at modulus ≥ 2;
            // count the few family nodes in (from_radius, 2] directly
            let head = generate_nodes(&self.kind, 2.0).ok()?;
            let mut s = 0.0;
            for i in 0..head.len() {
                let m = head.modulus(i).to_f64();
                if m > from_radius {
                    if m < 1e-9 {
                        return None;
                    }
                    s += m.powi(-(k as i32));
                }
            }
            return Some(s + self.tail_sum(2.0, k)?);
        }
        match &self.kind {
            NodeKind::Explicit { .. } => Some(0.0),
            NodeKind::Geometric { ratio } => {
                // first excluded exponent: smallest n with ratio^n > R
                let n0 = (from_radius.ln() / ratio.ln()).floor() + 1.0;
                let q = ratio.powf(-(k as f64));
                if q >= 1.0 {
                    return None;
                }
                Some(ratio.powf(-(k as f64) * n0) / (1.0 - q))
            }
            NodeKind::Power { alpha, .. } => power_tail(from_radius, *alpha, k, 1.0),
            NodeKind::SignedPower { alpha } => power_tail(from_radius, *alpha, k, 2.0),
            NodeKind::CrossLattice | NodeKind::RotatedCrossLattice { .. } => {
                power_tail(from_radius, 1.0, k, 4.0)
            }
            NodeKind::SquareLattice | NodeKind::ShiftedSquareLattice => {
                // ring count #{m < |ω| ≤ m+1} ≤ 8(m+2) ≤ 24m (checked in tests)
                if k < 3 {
                    return None;
                }
                let m0 = from_radius.floor().max(3.0) - 1.0;
                let km = k as f64 - 1.0;
                Some(24.0 * (m0.powf(1.0 - km) / (km - 1.0) + m0.powf(-km)))
            }
            NodeKind::Union { .. } => {
                let mut s = 0.0;
                for p in &self.sub {
                    s += p.tail_sum(from_radius, k)?;
                }
                Some(s)
            }
        }
    }
}

fn power_tail(from_radius: f64, alpha: f64, k: u32, arms: f64) -> Option<f64> {
    let ka = k as f64 * alpha;
    if ka <= 1.0 {
        return None;
    }
    let n0 = from_radius.powf(1.0 / alpha).floor() + 1.0;
    Some(arms * (n0.powf(-ka) + n0.powf(1.0 - ka) / (ka - 1.0)))
}

/// Weight rules μ_n attached to a node set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum MeasureRule {
    /// μ_n = |t_n|^{2N} |A'(t_n)|^{-2} ((|t|+1)^{2N} at the origin).
    DerivativePower { n: u32 },
    /// μ_n = |t_n|^{-N} |A'(t_n)|^{-2}.
    DerivativeInversePower { n: u32 },
    /// μ_n = e^{-|t_n|^γ}.
    StretchedExp { gamma: f64 },
    /// μ_n = |t_n|^{M} e^{-c|t_n|} ((|t|+1)^M at the origin).
    PolyExp { m: i32, c: PiConstant },
    /// One rule per union part.
    Piecewise { rules: Vec<MeasureRule> },
    /// Explicit positive weights, one per node.
    Explicit { weights: Vec<f64> },
}

impl MeasureRule {
    pub fn needs_derivative(&self) -> bool {
        match self {
            MeasureRule::DerivativePower { .. } | MeasureRule::DerivativeInversePower { .. } => {
                true
            }
            MeasureRule::Piecewise { rules } => rules.iter().any(|r| r.needs_derivative()),
            _ => false,
        }
    }

    fn rule_for_part(&self, part: u8) -> &MeasureRule {
        match self {
            MeasureRule::Piecewise { rules } => &rules[part as usize],
            r => r,
        }
    }
}

/// Access to A'(t) for derivative-based measures; implemented by the
/// entire-function evaluators.
pub trait NodeDerivatives {
    fn derivative_at_point(&self, t: &Cpx, ctx: &PrecisionContext) -> KResult<BoundedValue>;
}

/// Cached per-node weights with error bounds.
#[derive(Debug, Clone)]
pub struct Measure {
    rule: MeasureRule,
    values: Vec<Real>,
    errors: Vec<Real>,
    /// Σ μ_n / (|t_n|²+1) over the truncation.
    carleman_sum: Real,
}

impl Measure {
    pub fn rule(&self) -> &MeasureRule {
        &self.rule
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, i: usize) -> &Real {
        &self.values[i]
    }

    pub fn error(&self, i: usize) -> &Real {
        &self.errors[i]
    }

    /// μ_i^{1/2} at the given precision.
    pub fn sqrt(&self, i: usize, prec: u32) -> Real {
        Float::with_val(prec, self.values[i].sqrt_ref())
    }

    pub fn carleman_sum(&self) -> &Real {
        &self.carleman_sum
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }
}

/// Evaluates one weight rule at an arbitrary point of the family (used both
/// when caching μ over the truncation and when estimating tails at extension
/// nodes). `deriv` must be supplied for derivative-based rules.
pub fn weight_at(
    rule: &MeasureRule,
    modulus: &Real,
    part: u8,
    deriv: Option<&BoundedValue>,
    ctx: &PrecisionContext,
) -> KResult<(Real, Real)> {
    let p = ctx.bits();
    match rule.rule_for_part(part) {
        MeasureRule::StretchedExp { gamma } => {
            let m = Float::with_val(p, modulus);
            let pow = if m == 0 {
                Float::with_val(p, 0)
            } else {
                (Float::with_val(p, m.ln_ref()) * *gamma).exp()
            };
            let v = (-pow).exp();
            let err = Float::with_val(64, &v) * crate::kernel::two_pow(4 - p as i64);
            Ok((v, Float::with_val(64, err)))
        }
        MeasureRule::PolyExp { m, c } => {
            let md = Float::with_val(p, modulus);
            let base = if *m == 0 || md == 0 {
                Float::with_val(p, 1)
            } else {
                Float::with_val(p, (&md).pow(*m))
            };
            let rate = c.value(p);
            let v = base * (-(rate * md)).exp();
            let err = Float::with_val(64, &v) * crate::kernel::two_pow(6 - p as i64);
            Ok((v, Float::with_val(64, err)))
        }
        MeasureRule::DerivativePower { n } => derivative_weight(modulus, deriv, 2 * *n as i32, p),
        MeasureRule::DerivativeInversePower { n } => {
            derivative_weight(modulus, deriv, -(*n as i32), p)
        }
        MeasureRule::Explicit { .. } => {
            Err(KernelError::Invalid("explicit weights are resolved at attach time".into()))
        }
        MeasureRule::Piecewise { .. } => {
            Err(KernelError::Invalid("nested piecewise measures are not supported".into()))
        }
    }
}

fn derivative_weight(
    modulus: &Real,
    deriv: Option<&BoundedValue>,
    power: i32,
    p: u32,
) -> KResult<(Real, Real)> {
    let d = deriv.ok_or(KernelError::Invalid("derivative rule without A".into()))?;
    let da = d.abs();
    if da.is_zero() {
        return Err(KernelError::DerivativeUnderflow);
    }
    // relative error of |A'|⁻² is 2·(e/|A'|) to first order
    let rel = Float::with_val(64, &d.abs_error / &da) * 2u32;
    let m = Float::with_val(p, modulus);
    let base =
        if m == 0 { Float::with_val(p, 1) } else { Float::with_val(p, (&m).pow(power)) };
    let v = base / Float::with_val(p, da.square_ref());
    let err = Float::with_val(64, &v) * (rel + crate::kernel::two_pow(4 - p as i64));
    Ok((v, Float::with_val(64, err)))
}

/// Caches μ_n for all nodes of `ns` at context precision.
pub fn attach_measure(
    ns: &NodeSet,
    rule: &MeasureRule,
    a: Option<&dyn NodeDerivatives>,
    ctx: &PrecisionContext,
) -> NResult<Measure> {
    if rule.needs_derivative() && a.is_none() {
        return Err(NodeError::MeasureNeedsA);
    }
    if let MeasureRule::Piecewise { rules } = rule {
        if rules.len() < ns.part_count() {
            return Err(NodeError::PiecewiseArity { got: rules.len(), need: ns.part_count() });
        }
    }
    let p = ctx.bits();
    let mut values = Vec::with_capacity(ns.len());
    let mut errors = Vec::with_capacity(ns.len());
    if let MeasureRule::Explicit { weights } = rule {
        if weights.len() != ns.len() {
            return Err(NodeError::ExplicitLength { got: weights.len(), need: ns.len() });
        }
        for (i, w) in weights.iter().enumerate() {
            if !(*w > 0.0) {
                return Err(NodeError::NonPositiveWeight(i));
            }
            values.push(Float::with_val(p, *w));
            errors.push(Float::with_val(64, 0));
        }
    } else {
        for i in 0..ns.len() {
            let needs = rule.rule_for_part(ns.part_of(i)).needs_derivative();
            let deriv = if needs {
                Some(a.unwrap().derivative_at_point(ns.node(i), ctx).map_err(|e| match e {
                    KernelError::DerivativeUnderflow => NodeError::DerivativeUnderflow(i),
                    other => NodeError::Eval(other.to_string()),
                })?)
            } else {
                None
            };
            let (v, e) = weight_at(rule, ns.modulus(i), ns.part_of(i), deriv.as_ref(), ctx)
                .map_err(|e| match e {
                    KernelError::DerivativeUnderflow => NodeError::DerivativeUnderflow(i),
                    other => NodeError::Eval(other.to_string()),
                })?;
            values.push(v);
            errors.push(e);
        }
    }
    let mut carleman = Float::with_val(p, 0);
    for i in 0..ns.len() {
        let denom = Float::with_val(p, ns.modulus(i).square_ref()) + 1u32;
        carleman += Float::with_val(p, &values[i] / &denom);
    }
    Ok(Measure { rule: rule.clone(), values, errors, carleman_sum: carleman })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> PrecisionContext {
        PrecisionContext::new(128, 1e-20).unwrap()
    }

    #[test]
    fn geometric_nodes_radius_40() {
        let ns = generate_nodes(&NodeKind::Geometric { ratio: 2.0 }, 40.0).unwrap();
        let got: Vec<f64> = ns.nodes().iter().map(|t| t.real().to_f64()).collect();
        assert_eq!(got, vec![2.0, 4.0, 8.0, 16.0, 32.0]);
    }

    #[test]
    fn cross_lattice_radius_2() {
        let ns = generate_nodes(&NodeKind::CrossLattice, 2.0).unwrap();
        assert_eq!(ns.len(), 9);
        assert_eq!(ns.node(0).real().to_f64(), 0.0);
        let moduli: Vec<f64> = ns.nodes().iter().map(abs_f64).collect();
        assert_eq!(moduli, vec![0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn power_cubes_radius_30() {
        let ns =
            generate_nodes(&NodeKind::Power { alpha: 3.0, phase: PiAngle::ZERO }, 30.0).unwrap();
        let got: Vec<f64> = ns.nodes().iter().map(|t| t.real().to_f64()).collect();
        assert_eq!(got, vec![1.0, 8.0, 27.0]);
    }

    #[test]
    fn rotated_power_family() {
        let ns = generate_nodes(
            &NodeKind::Power { alpha: 0.5, phase: PiAngle { num: 1, den: 2 } },
            4.0,
        )
        .unwrap();
        // i·k^{1/2} for k = 1..16
        assert_eq!(ns.len(), 16);
        assert!(ns.node(0).real().to_f64().abs() < 1e-300);
        assert!((ns.node(0).imag().to_f64() - 1.0).abs() < 1e-300);
        assert!(matches!(ns.scheme(), ProductScheme::Genus(2)));
    }

    #[test]
    fn monotone_in_radius() {
        let small = generate_nodes(&NodeKind::SquareLattice, 5.0).unwrap();
        let large = generate_nodes(&NodeKind::SquareLattice, 9.0).unwrap();
        assert!(small.len() < large.len());
        for i in 0..small.len() {
            assert_eq!(small.node(i), large.node(i), "prefix closure broken at {i}");
        }
    }

    #[test]
    fn separation_square_lattice() {
        let ns = generate_nodes(&NodeKind::SquareLattice, 10.0).unwrap();
        let (c, n) = ns.check_power_separation().unwrap();
        assert_eq!((c, n), (1.0, 0.0));
    }

    #[test]
    fn separation_geometric() {
        // min gap over {2,4,…,64} is |4−2| = 2; the grid search reports it
        let ns = generate_nodes(&NodeKind::Geometric { ratio: 2.0 }, 64.0).unwrap();
        let (c, n) = ns.check_power_separation().unwrap();
        assert_eq!(n, 0.0);
        assert_eq!(c, 2.0);
    }

    #[test]
    fn separation_near_coincident_needs_positive_n() {
        let ns =
            generate_nodes(&NodeKind::Explicit { points: vec![(2.0, 0.0), (2.001, 0.0)] }, 4.0)
                .unwrap();
        let (c, n) = ns.check_power_separation().unwrap();
        assert!(n > 0.0, "expected N > 0, got C={c}, N={n}");
        // direct-scan oracle: gap·(|t|+1)^N ≥ C must hold for both nodes
        for i in 0..2 {
            let gap = 0.001;
            assert!(gap * (abs_f64(ns.node(i)) + 1.0).powf(n) >= c);
        }
    }

    #[test]
    fn coincident_nodes_rejected() {
        let err =
            generate_nodes(&NodeKind::Explicit { points: vec![(1.0, 1.0), (1.0, 1.0)] }, 4.0)
                .unwrap_err();
        assert!(matches!(err, NodeError::CoincidentNodes(..)));
    }

    #[test]
    fn bad_params_rejected() {
        assert!(matches!(
            generate_nodes(&NodeKind::Geometric { ratio: 0.5 }, 10.0),
            Err(NodeError::BadRatio(_))
        ));
        assert!(matches!(
            generate_nodes(&NodeKind::Power { alpha: -1.0, phase: PiAngle::ZERO }, 10.0),
            Err(NodeError::BadAlpha(_))
        ));
    }

    #[test]
    fn union_interleaves_and_tags_parts() {
        let kind = NodeKind::Union {
            parts: vec![
                NodeKind::CrossLattice,
                NodeKind::RotatedCrossLattice { angle: PiAngle::quarter(), include_origin: false },
            ],
        };
        let ns = generate_nodes(&kind, 3.0).unwrap();
        // cross: 0, ±1, ±i, ±2, ±2i, ±3, ±3i (13); rotated: 12
        assert_eq!(ns.len(), 25);
        let p0 = ns.part_indices(0).len();
        let p1 = ns.part_indices(1).len();
        assert_eq!((p0, p1), (13, 12));
        for i in 1..ns.len() {
            assert!(abs_f64(ns.node(i)) >= abs_f64(ns.node(i - 1)) - 1e-12);
        }
    }

    #[test]
    fn shifted_square_lattice_is_negation_symmetric() {
        let ns = generate_nodes(&NodeKind::ShiftedSquareLattice, 6.0).unwrap();
        assert!(ns.symmetric());
        for t in ns.nodes() {
            let neg = Complex::with_val(NODE_BITS, -t.clone());
            assert!(
                ns.nodes().iter().any(|u| *u == neg),
                "missing -t for t = ({}, {})",
                t.real().to_f64(),
                t.imag().to_f64()
            );
        }
    }

    #[test]
    fn square_lattice_ring_count_bound() {
        // tail_sum for planar lattices relies on #{m < |ω| ≤ m+1} ≤ 8(m+2)
        let ns = generate_nodes(&NodeKind::SquareLattice, 64.0).unwrap();
        let mut counts = vec![0usize; 66];
        for t in ns.nodes() {
            let m = abs_f64(t);
            let ring = m.ceil() as usize;
            if ring >= 1 && m > (ring - 1) as f64 {
                counts[ring] += 1;
            }
        }
        for (m, &c) in counts.iter().enumerate().skip(1).take(63) {
            assert!(c <= 8 * (m + 2), "ring {m} has {c} points");
        }
    }

    #[test]
    fn tail_sum_dominates_direct_sums() {
        for kind in [
            NodeKind::Geometric { ratio: 2.0 },
            NodeKind::Power { alpha: 3.0, phase: PiAngle::ZERO },
            NodeKind::SignedPower { alpha: 2.0 },
            NodeKind::CrossLattice,
            NodeKind::SquareLattice,
            NodeKind::ShiftedSquareLattice,
        ] {
            let far = generate_nodes(&kind, 120.0).unwrap();
            let k = far.scheme().tail_exponent().max(2);
            let bound = far.tail_sum(20.0, k).unwrap();
            let mut direct = 0.0;
            for t in far.nodes() {
                let m = abs_f64(t);
                if m > 20.0 {
                    direct += m.powi(-(k as i32));
                }
            }
            assert!(bound >= direct, "{kind:?}: bound {bound} < direct sum {direct}");
            assert!(bound.is_finite());
        }
    }

    #[test]
    fn stretched_exp_measure_on_geometric() {
        let ns = generate_nodes(&NodeKind::Geometric { ratio: 2.0 }, 40.0).unwrap();
        let mu =
            attach_measure(&ns, &MeasureRule::StretchedExp { gamma: 1.0 }, None, &ctx()).unwrap();
        for (i, t) in [2.0f64, 4.0, 8.0, 16.0, 32.0].iter().enumerate() {
            let expect = (-t).exp();
            let got = mu.value(i).to_f64();
            assert!((got - expect).abs() < 1e-15 * expect, "node {i}: {got} vs {expect}");
        }
        assert!(mu.carleman_sum().to_f64() > 0.0);
    }

    #[test]
    fn poly_exp_measure_on_cross() {
        let ns = generate_nodes(&NodeKind::CrossLattice, 3.0).unwrap();
        let rule = MeasureRule::PolyExp { m: 1, c: PiConstant { rational: 2.0, sqrt2: 0.0 } };
        let mu = attach_measure(&ns, &rule, None, &ctx()).unwrap();
        // origin weight is (|t|+1)^1 e^0 = 1
        assert!((mu.value(0).to_f64() - 1.0).abs() < 1e-15);
        let expect = (-2.0 * std::f64::consts::PI).exp();
        assert!((mu.value(1).to_f64() - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn pi_constant_example_rates() {
        let c = PiConstant { rational: 2.0, sqrt2: 2.0 };
        let v = c.value(128).to_f64();
        let expect = (2.0 + 2.0 * std::f64::consts::SQRT_2) * std::f64::consts::PI;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn measure_requires_a_for_derivative_rules() {
        let ns = generate_nodes(&NodeKind::Geometric { ratio: 2.0 }, 40.0).unwrap();
        let err = attach_measure(&ns, &MeasureRule::DerivativePower { n: 2 }, None, &ctx());
        assert!(matches!(err, Err(NodeError::MeasureNeedsA)));
    }
}
