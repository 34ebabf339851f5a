//! Argument-principle zero finding, classification against localization
//! disks, and attraction sets.
//!
//! [`find_zeros`] subdivides a rectangle into a quadtree. Each cell's
//! winding number comes from Gauss–Legendre contour integration of `F'/F`
//! (order 32 per side, doubled until two successive orders agree within 0.1
//! and land within 0.25 of an integer). Winding-1 cells are polished by
//! Newton iteration on `F/F'` from the cell center and certified by a
//! winding-1 isolation circle; cells below the minimum size with winding
//! `m ≥ 2` are reported as one multiplicity-`m` record.
//!
//! Subdivision splits are *nudged*, not cell boundaries: a parent splits at
//! its center plus a deterministic offset sequence (±1/7, ±2/7, 3/7 of the
//! half-size) until all four children integrate cleanly and their windings
//! sum to the parent's. Children always tile the parent exactly, so the
//! total multiplicity equals the region winding by construction.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use rug::{Complex, Float};
use serde::{Deserialize, Serialize};

use crate::kernel::{
    cabs, cpx, real, two_pow, ComplexMap, Cpx, KResult, KernelError,
    PrecisionContext, Real,
};
use crate::nodes::NodeSet;

/// Axis-aligned rectangle (f64 geometry; evaluation promotes to context
/// precision).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn square(half_width: f64) -> Self {
        Rect { x0: -half_width, x1: half_width, y0: -half_width, y1: half_width }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn diam(&self) -> f64 {
        self.width().hypot(self.height())
    }

    /// Largest |z| on the rectangle (corner modulus).
    pub fn corner_radius(&self) -> f64 {
        let xs = [self.x0.abs(), self.x1.abs()];
        let ys = [self.y0.abs(), self.y1.abs()];
        let x = xs[0].max(xs[1]);
        let y = ys[0].max(ys[1]);
        x.hypot(y)
    }

    pub fn contains(&self, re: f64, im: f64) -> bool {
        re >= self.x0 && re <= self.x1 && im >= self.y0 && im <= self.y1
    }

    fn contains_inflated(&self, re: f64, im: f64, pad: f64) -> bool {
        re >= self.x0 - pad && re <= self.x1 + pad && im >= self.y0 - pad && im <= self.y1 + pad
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    fn min_side(&self) -> f64 {
        self.width().min(self.height())
    }
}

/// Contour for winding integrals.
#[derive(Debug, Clone, Copy)]
pub enum Contour {
    Rect(Rect),
    Circle { cx: f64, cy: f64, r: f64 },
}

/// One certified (or flagged) zero of the scanned map.
#[derive(Debug, Clone)]
pub struct ZeroRecord {
    pub location: Cpx,
    pub multiplicity: u32,
    /// |F| at the reported point.
    pub residual: Real,
    /// Radius of a circle around the location whose winding was verified to
    /// equal the multiplicity (when `certified`).
    pub isolation_radius: f64,
    /// Newton converged and the residual meets the context tolerance.
    pub polished: bool,
    pub certified: bool,
}

impl ZeroRecord {
    pub fn re(&self) -> f64 {
        self.location.real().to_f64()
    }

    pub fn im(&self) -> f64 {
        self.location.imag().to_f64()
    }
}

#[derive(Debug, Clone)]
pub struct ZeroFindOptions {
    /// Subdivision budget (cells processed).
    pub max_cells: usize,
    /// Multiple-zero reporting scale: cells below `min_cell_frac·diam` with
    /// winding ≥ 2 become one record.
    pub min_cell_frac: f64,
    /// Base Gauss–Legendre order per contour side.
    pub base_order: u32,
}

impl Default for ZeroFindOptions {
    fn default() -> Self {
        ZeroFindOptions { max_cells: 200_000, min_cell_frac: 2f64.powi(-40), base_order: 32 }
    }
}

// ---------------------------------------------------------------------------
// Gauss–Legendre rules

type GlRule = Arc<(Vec<Real>, Vec<Real>)>;

fn gl_cache() -> &'static Mutex<HashMap<(u32, u32), GlRule>> {
    static CACHE: OnceLock<Mutex<HashMap<(u32, u32), GlRule>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Legendre nodes/weights on [−1, 1] at precision `p` (Newton refinement of
/// the Chebyshev initial guesses; cached per (order, precision)).
pub fn gauss_legendre(m: u32, p: u32) -> GlRule {
    if let Some(r) = gl_cache().lock().unwrap().get(&(m, p)) {
        return r.clone();
    }
    let mut nodes = vec![Float::new(p); m as usize];
    let mut weights = vec![Float::new(p); m as usize];
    let mm = m as usize;
    for i in 0..(mm + 1) / 2 {
        let guess = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut x = Float::with_val(p, guess);
        let mut dp = Float::new(p);
        for _ in 0..100 {
            // P_m(x), P'_m(x) by the three-term recurrence
            let mut p0 = Float::with_val(p, 1);
            let mut p1 = Float::with_val(p, &x);
            for k in 2..=mm {
                let pk = (Float::with_val(p, &x * &p1) * (2 * k as u32 - 1)
                    - Float::with_val(p, &p0 * (k as u32 - 1)))
                    / Float::with_val(p, k as u32);
                p0 = p1;
                p1 = pk;
            }
            // P'_m = m (x P_m − P_{m−1}) / (x² − 1)
            let x2m1 = Float::with_val(p, x.square_ref()) - 1u32;
            dp = (Float::with_val(p, &x * &p1) - &p0) * Float::with_val(p, m) / x2m1;
            let step = Float::with_val(p, &p1 / &dp);
            x -= &step;
            if step.abs() < two_pow(8 - p as i64) {
                break;
            }
        }
        let x2 = Float::with_val(p, x.square_ref());
        let w = Float::with_val(p, 2) / ((Float::with_val(p, 1) - x2) * Float::with_val(p, dp.square_ref()));
        nodes[i] = -x.clone();
        nodes[mm - 1 - i] = x;
        weights[i] = w.clone();
        weights[mm - 1 - i] = w;
    }
    let rule = Arc::new((nodes, weights));
    gl_cache().lock().unwrap().insert((m, p), rule.clone());
    rule
}

// ---------------------------------------------------------------------------
// Winding numbers

fn contour_segments(contour: &Contour) -> Vec<(Cpx, Cpx)> {
    match contour {
        Contour::Rect(r) => {
            let p = 64;
            let a = cpx(r.x0, r.y0, p);
            let b = cpx(r.x1, r.y0, p);
            let c = cpx(r.x1, r.y1, p);
            let d = cpx(r.x0, r.y1, p);
            vec![(a.clone(), b.clone()), (b, c.clone()), (c, d.clone()), (d, a)]
        }
        Contour::Circle { .. } => Vec::new(),
    }
}

/// ∮ F'/F dz/(2πi) at one GL order; also probes min |F| at the base-order
/// points when `probe_min` is set. Returns the complex winding estimate.
fn winding_integral(
    map: &dyn ComplexMap,
    contour: &Contour,
    order: u32,
    probe_min: bool,
    ctx: &PrecisionContext,
) -> KResult<Cpx> {
    let p = ctx.bits();
    let rule = gauss_legendre(order, p);
    let (nodes, weights) = rule.as_ref();
    let mut acc = Complex::with_val(p, (0, 0));
    let min_thresh = ctx.near_zero_threshold();

    let eval_point = |z: &Cpx| -> KResult<Cpx> {
        if probe_min {
            let fv = map.eval_map(z, ctx)?;
            if fv.abs() <= min_thresh {
                return Err(KernelError::ContourTooCloseToZero);
            }
        }
        let ld = map.log_deriv_map(z, ctx).map_err(|e| match e {
            KernelError::TooCloseToZero { .. } => KernelError::ContourTooCloseToZero,
            other => other,
        })?;
        Ok(ld.value)
    };

    match contour {
        Contour::Rect(_) => {
            for (a, b) in contour_segments(contour) {
                let a = Complex::with_val(p, &a);
                let b = Complex::with_val(p, &b);
                let mid = Complex::with_val(p, &a + &b) / 2u32;
                let half = Complex::with_val(p, &b - &a) / 2u32;
                let mut seg = Complex::with_val(p, (0, 0));
                for (x, w) in nodes.iter().zip(weights.iter()) {
                    let z = Complex::with_val(p, &mid + &Complex::with_val(p, &half * x));
                    let l = eval_point(&z)?;
                    seg += Complex::with_val(p, &l * w);
                }
                acc += seg * half;
            }
        }
        Contour::Circle { cx, cy, r } => {
            // four quarter arcs; dz = i r e^{iθ} dθ
            let center = cpx(*cx, *cy, p);
            let radius = Float::with_val(p, *r);
            let pi = Float::with_val(p, rug::float::Constant::Pi);
            for q in 0..4u32 {
                let th0 = Float::with_val(p, &pi * &Float::with_val(p, q)) / 2u32;
                let mut seg = Complex::with_val(p, (0, 0));
                for (x, w) in nodes.iter().zip(weights.iter()) {
                    // θ = th0 + (x+1)·π/4
                    let th = Float::with_val(p, &th0)
                        + Float::with_val(p, x + 1u32) * Float::with_val(p, &pi / 4u32);
                    let (s, c) = th.sin_cos(Float::new(p));
                    let dir = Complex::with_val(p, (c, s));
                    let z = Complex::with_val(p, &center + &Complex::with_val(p, &dir * &radius));
                    let l = eval_point(&z)?;
                    // e^{iθ}·i = (−sin, cos)
                    let tangent = Complex::with_val(
                        p,
                        (-Float::with_val(p, dir.imag()), Float::with_val(p, dir.real())),
                    );
                    seg += Complex::with_val(p, &l * &tangent) * w;
                }
                acc += seg * Complex::with_val(p, (Float::with_val(p, &radius * &pi) / 4u32, 0));
            }
        }
    }
    let two_pi_i = Complex::with_val(p, (0, Float::with_val(p, rug::float::Constant::Pi) * 2u32));
    Ok(Complex::with_val(p, &acc / &two_pi_i))
}

/// Integer winding number of `map` around the contour by adaptive
/// Gauss–Legendre quadrature of the argument-principle integral.
pub fn winding_number(
    map: &dyn ComplexMap,
    contour: &Contour,
    ctx: &PrecisionContext,
) -> KResult<i64> {
    winding_number_base(map, contour, 32, ctx)
}

fn winding_number_base(
    map: &dyn ComplexMap,
    contour: &Contour,
    base_order: u32,
    ctx: &PrecisionContext,
) -> KResult<i64> {
    let mut prev: Option<f64> = None;
    let mut order = base_order;
    let mut last_val = f64::NAN;
    while order <= 512 {
        let est = winding_integral(map, contour, order, order == base_order, ctx)?;
        // the true integral is exactly 2πi·N: the winding is the real part;
        // imaginary leakage beyond 0.25 marks an unresolved contour
        let re = est.real().to_f64();
        let im = est.imag().to_f64();
        last_val = re;
        let near_int = (re - re.round()).abs() <= 0.25 && im.abs() <= 0.25;
        if let Some(pv) = prev {
            if near_int && (re - pv).abs() <= 0.1 {
                return Ok(re.round() as i64);
            }
        }
        prev = Some(re);
        order *= 2;
    }
    Err(KernelError::NonIntegerWinding { value: last_val })
}

// ---------------------------------------------------------------------------
// Zero finding

struct FindState<'a> {
    map: &'a dyn ComplexMap,
    opts: &'a ZeroFindOptions,
    min_size: f64,
    cells: AtomicUsize,
}

/// Finds all zeros of `map` in the rectangle, with multiplicities.
pub fn find_zeros(
    map: &dyn ComplexMap,
    region: &Rect,
    ctx: &PrecisionContext,
    opts: &ZeroFindOptions,
) -> KResult<Vec<ZeroRecord>> {
    if region.min_side() < 2f64.powi(-20) {
        return Err(KernelError::Invalid("region sides must be at least 2^-20".into()));
    }
    let state = FindState {
        map,
        opts,
        min_size: opts.min_cell_frac * region.diam(),
        cells: AtomicUsize::new(0),
    };
    // the outer boundary is the caller's contract: no nudging, only
    // precision escalation
    let root_w = {
        let mut cur = ctx.clone();
        loop {
            match winding_number_base(map, &Contour::Rect(*region), opts.base_order, &cur) {
                Ok(w) => break w,
                Err(e) => match cur.escalated() {
                    Some(next) => {
                        let _ = e;
                        cur = next;
                    }
                    None => return Err(e),
                },
            }
        }
    };
    if root_w < 0 {
        return Err(KernelError::Invalid(format!(
            "negative winding {root_w}: the map has poles in the region"
        )));
    }
    let mut records = process_cell(&state, *region, root_w as u32, ctx).map_err(|e| match e {
        KernelError::CellUnresolvable => KernelError::Invalid(
            "region boundary or interior could not be resolved at any precision".into(),
        ),
        other => other,
    })?;
    // deterministic output order
    records.sort_by(|a, b| {
        (a.re(), a.im()).partial_cmp(&(b.re(), b.im())).unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(records)
}

fn process_cell(
    state: &FindState<'_>,
    cell: Rect,
    w: u32,
    ctx: &PrecisionContext,
) -> KResult<Vec<ZeroRecord>> {
    if w == 0 {
        return Ok(Vec::new());
    }
    let used = state.cells.fetch_add(1, Ordering::Relaxed);
    if used > state.opts.max_cells {
        return Err(KernelError::BudgetExceeded { cells: used });
    }
    if w == 1 {
        if let Some(rec) = try_polish(state, &cell, ctx)? {
            return Ok(vec![rec]);
        }
        // Newton escaped or failed: fall through to subdivision
    }
    if w >= 2 && cell.min_side() < state.min_size {
        return Ok(vec![multiple_record(state, &cell, w, ctx)?]);
    }
    subdivide(state, cell, w, ctx)
}

/// Newton polish from the cell center; `None` when the iteration escapes the
/// cell or stalls (caller subdivides further).
fn try_polish(
    state: &FindState<'_>,
    cell: &Rect,
    ctx: &PrecisionContext,
) -> KResult<Option<ZeroRecord>> {
    let p = ctx.bits();
    let (cx, cy) = cell.center();
    let mut z = cpx(cx, cy, p);
    let stop = two_pow(-(3 * p as i64) / 4);
    let pad = 0.25 * cell.min_side();
    let mut converged = false;
    for _ in 0..80 {
        let ld = match state.map.log_deriv_map(&z, ctx) {
            Ok(v) => v,
            Err(_) => return Ok(None),
        };
        if ld.abs().is_zero() {
            return Ok(None);
        }
        let step = Complex::with_val(p, ld.value.recip_ref());
        let sa = cabs(&step, 64).to_f64();
        if sa > 2.0 * cell.diam() {
            return Ok(None);
        }
        z -= &step;
        if !cell.contains_inflated(z.real().to_f64(), z.imag().to_f64(), pad) {
            return Ok(None);
        }
        let scale = real(1.0, 64).max(&cabs(&z, 64));
        if real(sa, 64) <= Float::with_val(64, &stop * &scale) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Ok(None);
    }
    // the polished point must lie strictly inside this cell; a zero pulled
    // in from a neighbour cell would be double-counted
    if !cell.contains(z.real().to_f64(), z.imag().to_f64()) {
        return Ok(None);
    }
    let fv = state.map.eval_map(&z, ctx)?;
    let residual = fv.abs();
    let polished = residual <= *ctx.target_tol();
    // isolation circle certification
    let (cert, iso_r) = certify(state, &z, 1, 0.25 * cell.min_side(), ctx);
    Ok(Some(ZeroRecord {
        location: z,
        multiplicity: 1,
        residual,
        isolation_radius: iso_r,
        polished,
        certified: cert,
    }))
}

fn multiple_record(
    state: &FindState<'_>,
    cell: &Rect,
    w: u32,
    ctx: &PrecisionContext,
) -> KResult<ZeroRecord> {
    let p = ctx.bits();
    let (cx, cy) = cell.center();
    let z = cpx(cx, cy, p);
    let residual = state.map.eval_map(&z, ctx)?.abs();
    let (cert, iso_r) = certify(state, &z, w, 0.71 * cell.diam(), ctx);
    Ok(ZeroRecord {
        location: z,
        multiplicity: w,
        residual,
        isolation_radius: iso_r,
        polished: false,
        certified: cert,
    })
}

/// Verifies a circle of winding `expect` around z; tries a few radii.
fn certify(
    state: &FindState<'_>,
    z: &Cpx,
    expect: u32,
    r0: f64,
    ctx: &PrecisionContext,
) -> (bool, f64) {
    let zr = z.real().to_f64();
    let zi = z.imag().to_f64();
    for r in [r0, r0 / 2.0, r0 * 2.0, r0 / 4.0] {
        if let Ok(w) =
            winding_number_base(state.map, &Contour::Circle { cx: zr, cy: zi, r }, state.opts.base_order, ctx)
        {
            if w == expect as i64 {
                return (true, r);
            }
        }
    }
    (false, r0)
}

/// Deterministic split-point offsets, as fractions of the half-size.
const NUDGES: [f64; 6] = [0.0, 1.0 / 7.0, -1.0 / 7.0, 2.0 / 7.0, -2.0 / 7.0, 3.0 / 7.0];

fn subdivide(
    state: &FindState<'_>,
    cell: Rect,
    w: u32,
    ctx: &PrecisionContext,
) -> KResult<Vec<ZeroRecord>> {
    let mut cur = ctx.clone();
    loop {
        for nudge in NUDGES {
            let sx = (cell.x0 + cell.x1) / 2.0 + nudge * cell.width() / 2.0;
            let sy = (cell.y0 + cell.y1) / 2.0 + nudge * cell.height() / 2.0;
            let children = [
                Rect { x0: cell.x0, x1: sx, y0: cell.y0, y1: sy },
                Rect { x0: sx, x1: cell.x1, y0: cell.y0, y1: sy },
                Rect { x0: cell.x0, x1: sx, y0: sy, y1: cell.y1 },
                Rect { x0: sx, x1: cell.x1, y0: sy, y1: cell.y1 },
            ];
            let windings: Result<Vec<i64>, KernelError> = children
                .iter()
                .map(|c| winding_number_base(state.map, &Contour::Rect(*c), state.opts.base_order, &cur))
                .collect();
            let trace = std::env::var("CDB_ZF_TRACE").is_ok();
            let windings = match windings {
                Ok(ws) => ws,
                Err(
                    e @ (KernelError::ContourTooCloseToZero
                    | KernelError::NonIntegerWinding { .. }
                    | KernelError::TooCloseToZero { .. }),
                ) => {
                    if trace {
                        eprintln!(
                            "  nudge {nudge:+.3} failed: {e} (cell size {:.3e}, bits {})",
                            cell.min_side(),
                            cur.bits()
                        );
                    }
                    continue;
                }
                Err(other) => return Err(other),
            };
            if windings.iter().any(|&cw| cw < 0)
                || windings.iter().sum::<i64>() != w as i64
            {
                if trace {
                    eprintln!(
                        "  nudge {nudge:+.3}: child windings {windings:?} do not sum to {w} (cell size {:.3e}, bits {})",
                        cell.min_side(),
                        cur.bits()
                    );
                }
                continue;
            }
            // recurse, deterministic order; parallelism via rayon join pairs
            let (left, right) = rayon::join(
                || -> KResult<Vec<ZeroRecord>> {
                    let mut out = process_cell(state, children[0], windings[0] as u32, &cur)?;
                    out.extend(process_cell(state, children[1], windings[1] as u32, &cur)?);
                    Ok(out)
                },
                || -> KResult<Vec<ZeroRecord>> {
                    let mut out = process_cell(state, children[2], windings[2] as u32, &cur)?;
                    out.extend(process_cell(state, children[3], windings[3] as u32, &cur)?);
                    Ok(out)
                },
            );
            // a stuck descendant means one of this split's edges is
            // pathologically close to a zero: re-split elsewhere
            match (left, right) {
                (Ok(mut records), Ok(rest)) => {
                    records.extend(rest);
                    return Ok(records);
                }
                (Err(KernelError::CellUnresolvable), _)
                | (_, Err(KernelError::CellUnresolvable)) => {
                    if trace {
                        eprintln!(
                            "  nudge {nudge:+.3}: descendant unresolvable, re-splitting (cell size {:.3e})",
                            cell.min_side()
                        );
                    }
                    continue;
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
        match cur.escalated() {
            Some(next) => cur = next,
            None => {
                if std::env::var("CDB_ZF_TRACE").is_ok() {
                    eprintln!(
                        "subdivide unresolvable: cell [{}, {}]x[{}, {}] w={w} size={:.3e}",
                        cell.x0, cell.x1, cell.y0, cell.y1, cell.min_side()
                    );
                }
                return Err(KernelError::CellUnresolvable);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Classification

/// Per-node localization status relative to the disks D(t_n, (|t_n|+1)^{-M}).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum NodeStatus {
    Empty,
    OneZero(usize),
    MultipleZeros(Vec<usize>),
}

/// Zero classification against the localization disks of a node set.
#[derive(Debug, Clone)]
pub struct LocalizationReport {
    pub zeros: Vec<ZeroRecord>,
    pub node_status: Vec<NodeStatus>,
    /// Disk (plus margin) fully inside the scanned region: only these nodes
    /// count toward attraction sets and exceptional budgets.
    pub eligible: Vec<bool>,
    pub strays: Vec<usize>,
    pub m_exp: f64,
    pub region: Rect,
    /// Eligible nodes with status OneZero or MultipleZeros.
    pub attraction_set: Vec<usize>,
    /// |strays| + #(eligible nodes with multiple zeros).
    pub exceptional_count: usize,
}

impl LocalizationReport {
    /// Smallest modulus ρ such that every eligible node with |t| ≥ ρ holds
    /// exactly one zero; `None` when even the outermost nodes fail.
    pub fn one_zero_onset(&self, ns: &NodeSet) -> Option<f64> {
        let mut onset: Option<f64> = Some(0.0);
        let mut worst: f64 = 0.0;
        for i in 0..ns.len() {
            if !self.eligible[i] {
                continue;
            }
            if !matches!(self.node_status[i], NodeStatus::OneZero(_)) {
                worst = worst.max(ns.modulus(i).to_f64());
                onset = Some(worst + f64::EPSILON);
            }
        }
        // no eligible node beyond `worst` may be missing a zero; verify at
        // least one eligible node lies beyond the onset
        let o = onset?;
        let any_beyond = (0..ns.len())
            .any(|i| self.eligible[i] && ns.modulus(i).to_f64() >= o);
        if any_beyond {
            Some(o)
        } else {
            None
        }
    }
}

/// Assigns zeros to the unique disk containing them (disks are verified
/// pairwise disjoint) or to the stray list.
pub fn classify_zeros(
    zeros: Vec<ZeroRecord>,
    ns: &NodeSet,
    m_exp: f64,
    region: &Rect,
) -> KResult<LocalizationReport> {
    let n = ns.len();
    let radii: Vec<f64> =
        (0..n).map(|i| (ns.modulus(i).to_f64() + 1.0).powf(-m_exp)).collect();
    // disjointness
    for i in 0..n {
        let (xi, yi) = (ns.node(i).real().to_f64(), ns.node(i).imag().to_f64());
        for j in (i + 1)..n {
            let (xj, yj) = (ns.node(j).real().to_f64(), ns.node(j).imag().to_f64());
            let d = (xi - xj).hypot(yi - yj);
            if d <= radii[i] + radii[j] {
                return Err(KernelError::Invalid(format!(
                    "localization disks overlap at M = {m_exp} (nodes {i}, {j})"
                )));
            }
        }
    }
    let margin = 0.02 * region.min_side();
    let eligible: Vec<bool> = (0..n)
        .map(|i| {
            let (x, y) = (ns.node(i).real().to_f64(), ns.node(i).imag().to_f64());
            let r = radii[i] + margin;
            x - r >= region.x0 && x + r <= region.x1 && y - r >= region.y0 && y + r <= region.y1
        })
        .collect();

    let mut node_status = vec![NodeStatus::Empty; n];
    let mut strays = Vec::new();
    for (zi, z) in zeros.iter().enumerate() {
        let zc = cpx(z.re(), z.im(), 64);
        let hit = ns.nearest(&zc).filter(|(i, d)| *d < radii[*i]).map(|(i, _)| i);
        match hit {
            Some(i) => match &mut node_status[i] {
                NodeStatus::Empty => node_status[i] = NodeStatus::OneZero(zi),
                NodeStatus::OneZero(prev) => {
                    node_status[i] = NodeStatus::MultipleZeros(vec![*prev, zi]);
                }
                NodeStatus::MultipleZeros(v) => v.push(zi),
            },
            None => strays.push(zi),
        }
    }
    // multiplicity > 1 inside a disk counts as multiple occupancy
    for st in node_status.iter_mut() {
        if let NodeStatus::OneZero(zi) = st {
            if zeros[*zi].multiplicity > 1 {
                *st = NodeStatus::MultipleZeros(vec![*zi]);
            }
        }
    }
    let attraction_set: Vec<usize> = (0..n)
        .filter(|&i| {
            eligible[i] && !matches!(node_status[i], NodeStatus::Empty)
        })
        .collect();
    let exceptional_count = strays.len()
        + (0..n)
            .filter(|&i| eligible[i] && matches!(node_status[i], NodeStatus::MultipleZeros(_)))
            .count();
    Ok(LocalizationReport {
        zeros,
        node_status,
        eligible,
        strays,
        m_exp,
        region: *region,
        attraction_set,
        exceptional_count,
    })
}

// ---------------------------------------------------------------------------
// Attraction-set comparison

/// Outcome of comparing two attraction sets "up to finite sets".
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum AttractionOrder {
    /// S1 ⊆ S2 up to `exceptions` elements (and not conversely within budget).
    SubsetUpTo { exceptions: usize },
    SupersetUpTo { exceptions: usize },
    /// Both inclusions hold within budget.
    EqualUpTo { forward: usize, backward: usize },
    Incomparable { s1_minus_s2: usize, s2_minus_s1: usize },
}

/// Compares node-index sets; `budget` is the allowed exception count.
pub fn compare_attraction_sets(s1: &[usize], s2: &[usize], budget: usize) -> AttractionOrder {
    let a: std::collections::BTreeSet<usize> = s1.iter().copied().collect();
    let b: std::collections::BTreeSet<usize> = s2.iter().copied().collect();
    let k1 = a.difference(&b).count();
    let k2 = b.difference(&a).count();
    match (k1 <= budget, k2 <= budget) {
        (true, true) => AttractionOrder::EqualUpTo { forward: k1, backward: k2 },
        (true, false) => AttractionOrder::SubsetUpTo { exceptions: k1 },
        (false, true) => AttractionOrder::SupersetUpTo { exceptions: k2 },
        (false, false) => AttractionOrder::Incomparable { s1_minus_s2: k1, s2_minus_s1: k2 },
    }
}

// ---------------------------------------------------------------------------
// Minimum-modulus profile

#[derive(Debug, Clone, Serialize)]
pub struct ProfilePoint {
    pub radius: f64,
    /// log10 of min |F(z)/A(z)|·(|z|+1)^M over the annulus probes.
    pub min_log10: f64,
    pub samples: usize,
}

/// Minimum of |F/A|·(|z|+1)^M on log-spaced annuli, probing points off the
/// disks D(t, (|t|+1)^{-K}); a floor bounded away from zero witnesses the
/// lower bound off the disks, a collapse witnesses super-polynomial decay.
pub fn min_modulus_profile(
    f: &dyn ComplexMap,
    a: &crate::entire::EntireFunction,
    ns: &NodeSet,
    k_exp: f64,
    m_exp: f64,
    region: &Rect,
    ctx: &PrecisionContext,
) -> KResult<Vec<ProfilePoint>> {
    let p = ctx.bits();
    let r_hi = region.x1.abs().min(region.x0.abs()).min(region.y0.abs()).min(region.y1.abs());
    let r_hi = if r_hi <= 0.0 { region.corner_radius() / 2.0 } else { r_hi };
    let r_lo = (r_hi / 50.0).max(0.25);
    let annuli = 8;
    let points = 24;
    let mut out = Vec::with_capacity(annuli);
    for ai in 0..annuli {
        let frac = ai as f64 / (annuli - 1) as f64;
        let radius = r_lo * (r_hi / r_lo).powf(frac);
        let mut best = f64::INFINITY;
        let mut used = 0;
        for pi in 0..points {
            let th = 2.0 * std::f64::consts::PI * (pi as f64 + 0.37) / points as f64;
            let (zr, zi) = (radius * th.cos(), radius * th.sin());
            if !region.contains(zr, zi) {
                continue;
            }
            let probe = cpx(zr, zi, 64);
            if let Some((i, d)) = ns.nearest(&probe) {
                if d < (ns.modulus(i).to_f64() + 1.0).powf(-k_exp) {
                    continue;
                }
            }
            let z = cpx(zr, zi, p);
            let fv = f.eval_map(&z, ctx)?;
            let av = a.evaluate(&z, ctx)?;
            if av.abs().is_zero() {
                continue;
            }
            used += 1;
            let v = log10_of(&fv.abs()) - log10_of(&av.abs())
                + m_exp * (radius + 1.0).log10();
            if v < best {
                best = v;
            }
        }
        out.push(ProfilePoint { radius, min_log10: best, samples: used });
    }
    Ok(out)
}

fn log10_of(x: &Real) -> f64 {
    if x.is_zero() {
        f64::NEG_INFINITY
    } else {
        Float::with_val(64, x.ln_ref()).to_f64() / std::f64::consts::LN_10
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entire::EntireFunction;
    use crate::nodes::{generate_nodes, NodeKind};
    use std::sync::Arc;

    fn ctx() -> PrecisionContext {
        PrecisionContext::new(192, 1e-25).unwrap()
    }

    fn poly(coeffs: &[(f64, f64)]) -> EntireFunction {
        EntireFunction::polynomial(coeffs.iter().map(|(re, im)| cpx(*re, *im, 192)).collect())
    }

    #[test]
    fn winding_single_zero() {
        // F(z) = z on the unit circle
        let f = poly(&[(0.0, 0.0), (1.0, 0.0)]);
        let w = winding_number(&f, &Contour::Circle { cx: 0.0, cy: 0.0, r: 1.0 }, &ctx()).unwrap();
        assert_eq!(w, 1);
    }

    #[test]
    fn winding_double_zero() {
        // (z−1)² = 1 − 2z + z² on |z| = 2
        let f = poly(&[(1.0, 0.0), (-2.0, 0.0), (1.0, 0.0)]);
        let w = winding_number(&f, &Contour::Circle { cx: 0.0, cy: 0.0, r: 2.0 }, &ctx()).unwrap();
        assert_eq!(w, 2);
    }

    #[test]
    fn winding_sin_cross_box() {
        // 9 zeros of z⁻¹sin(πz)sin(πiz) in [−2.5, 2.5]²: 0, ±1, ±2, ±i, ±2i
        let a = EntireFunction::sin_cross(16.0).unwrap();
        let w = winding_number(&a, &Contour::Rect(Rect::square(2.5)), &ctx()).unwrap();
        assert_eq!(w, 9);
    }

    #[test]
    fn find_zeros_quadratic() {
        // z² − 1 on [−2, 2]²
        let f = poly(&[(-1.0, 0.0), (0.0, 0.0), (1.0, 0.0)]);
        let zs = find_zeros(&f, &Rect::square(2.0), &ctx(), &ZeroFindOptions::default()).unwrap();
        assert_eq!(zs.len(), 2);
        assert!((zs[0].re() + 1.0).abs() < 1e-30 && zs[0].im().abs() < 1e-30);
        assert!((zs[1].re() - 1.0).abs() < 1e-30 && zs[1].im().abs() < 1e-30);
        assert!(zs.iter().all(|z| z.multiplicity == 1 && z.polished && z.certified));
    }

    #[test]
    fn find_zeros_reports_multiplicity() {
        // (z − 1/4)²(z + 1) = z³ + 0.5z² − 0.4375z + 0.0625: dyadic
        // coefficients keep the double zero exactly double
        let f = poly(&[(0.0625, 0.0), (-0.4375, 0.0), (0.5, 0.0), (1.0, 0.0)]);
        let zs = find_zeros(&f, &Rect::square(2.0), &ctx(), &ZeroFindOptions::default()).unwrap();
        let total: u32 = zs.iter().map(|z| z.multiplicity).sum();
        assert_eq!(total, 3);
        let double = zs.iter().find(|z| z.multiplicity == 2).expect("double zero reported");
        assert!((double.re() - 0.25).abs() < 1e-6, "double at {}", double.re());
    }

    #[test]
    fn near_double_conjugate_pair_is_resolved() {
        // (z − 0.3)²(z + 1) with f64-rounded coefficients: the double root
        // splits into conjugate zeros ≈ 0.3 ± 3e-9·i; the finder must
        // either separate them or report one multiplicity-2 record
        let f = poly(&[(0.09, 0.0), (-0.51, 0.0), (0.4, 0.0), (1.0, 0.0)]);
        let zs = find_zeros(&f, &Rect::square(2.0), &ctx(), &ZeroFindOptions::default()).unwrap();
        let total: u32 = zs.iter().map(|z| z.multiplicity).sum();
        assert_eq!(total, 3);
        for z in &zs {
            let near_03 = (z.re() - 0.3).abs() < 1e-5 && z.im().abs() < 1e-5;
            let near_m1 = (z.re() + 1.0).abs() < 1e-9 && z.im().abs() < 1e-9;
            assert!(near_03 || near_m1, "unexpected zero at ({}, {})", z.re(), z.im());
        }
    }

    #[test]
    fn conservation_against_region_winding() {
        let f = poly(&[(0.5, 0.2), (-1.0, 0.4), (0.0, 0.0), (1.0, 0.0), (2.0, -0.3)]);
        let region = Rect::square(3.0);
        let c = ctx();
        let zs = find_zeros(&f, &region, &c, &ZeroFindOptions::default()).unwrap();
        let total: u32 = zs.iter().map(|z| z.multiplicity).sum();
        let w = winding_number(&f, &Contour::Rect(region), &c).unwrap();
        assert_eq!(total as i64, w);
    }

    #[test]
    fn zeros_on_split_lines_are_found() {
        // zeros exactly on the initial center-split lines
        let f = poly(&[(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)]); // z², double zero at 0
        let zs = find_zeros(&f, &Rect::square(1.0), &ctx(), &ZeroFindOptions::default()).unwrap();
        let total: u32 = zs.iter().map(|z| z.multiplicity).sum();
        assert_eq!(total, 2);
    }

    #[test]
    fn classify_partition_and_attraction() {
        let ns = generate_nodes(&NodeKind::Geometric { ratio: 2.0 }, 64.0).unwrap();
        let c = ctx();
        // zeros exactly at nodes 4, 8, 16 plus one stray
        let mk = |re: f64, im: f64| ZeroRecord {
            location: cpx(re, im, 192),
            multiplicity: 1,
            residual: real(0.0, 64),
            isolation_radius: 0.1,
            polished: true,
            certified: true,
        };
        let zeros = vec![mk(4.0, 0.0), mk(8.0, 0.0), mk(16.0, 0.0), mk(10.0, 3.0)];
        let region = Rect { x0: 0.0, x1: 30.0, y0: -5.0, y1: 5.0 };
        let rep = classify_zeros(zeros, &ns, 2.0, &region).unwrap();
        let _ = &c;
        let assigned: usize = rep
            .node_status
            .iter()
            .map(|s| match s {
                NodeStatus::Empty => 0,
                NodeStatus::OneZero(_) => 1,
                NodeStatus::MultipleZeros(v) => v.len(),
            })
            .sum();
        assert_eq!(assigned + rep.strays.len(), rep.zeros.len());
        assert_eq!(rep.strays.len(), 1);
        assert_eq!(rep.exceptional_count, 1);
        // nodes 2,4,8,16 eligible (32 touches the region margin? 32 > 30)
        assert!(rep.attraction_set.len() == 3);
    }

    #[test]
    fn classify_rejects_overlapping_disks() {
        let ns = generate_nodes(
            &NodeKind::Explicit { points: vec![(2.0, 0.0), (2.05, 0.0)] },
            4.0,
        )
        .unwrap();
        let region = Rect::square(3.0);
        match classify_zeros(Vec::new(), &ns, 0.5, &region) {
            Err(KernelError::Invalid(msg)) => assert!(msg.contains("overlap")),
            other => panic!("expected overlap error, got {other:?}"),
        }
    }

    #[test]
    fn classify_empty_zero_list() {
        let ns = generate_nodes(&NodeKind::Geometric { ratio: 2.0 }, 16.0).unwrap();
        let region = Rect::square(20.0);
        let rep = classify_zeros(Vec::new(), &ns, 2.0, &region).unwrap();
        assert!(rep.attraction_set.is_empty());
        assert_eq!(rep.exceptional_count, 0);
        assert!(rep.node_status.iter().all(|s| *s == NodeStatus::Empty));
    }

    #[test]
    fn attraction_comparison_verdicts() {
        let s1: Vec<usize> = (0..10).collect();
        let s2: Vec<usize> = (0..20).collect();
        assert_eq!(
            compare_attraction_sets(&s1, &s2, 3),
            AttractionOrder::SubsetUpTo { exceptions: 0 }
        );
        assert_eq!(
            compare_attraction_sets(&s2, &s2, 0),
            AttractionOrder::EqualUpTo { forward: 0, backward: 0 }
        );
        let evens: Vec<usize> = (0..20).step_by(2).collect();
        let odds: Vec<usize> = (1..20).step_by(2).collect();
        assert_eq!(
            compare_attraction_sets(&evens, &odds, 3),
            AttractionOrder::Incomparable { s1_minus_s2: 10, s2_minus_s1: 10 }
        );
    }

    #[test]
    fn single_node_element_zeros_are_other_nodes() {
        // F = μ^{1/2}A(z)/(z−t₁) over {2^n}: zeros exactly at {4, 8, 16, 32}
        use crate::nodes::{attach_measure, MeasureRule};
        use crate::space::{make_coefficients, CoeffSpec, SpaceElement};
        let c = PrecisionContext::new(192, 1e-25).unwrap();
        let ns = Arc::new(generate_nodes(&NodeKind::Geometric { ratio: 2.0 }, 40.0).unwrap());
        let ns_a = Arc::new(ns.extend_to_radius(4.0 * 41.0 * 1.5).unwrap());
        let a = Arc::new(EntireFunction::canonical(ns_a).unwrap());
        let mu = Arc::new(
            attach_measure(&ns, &MeasureRule::StretchedExp { gamma: 1.0 }, None, &c).unwrap(),
        );
        let coeffs = make_coefficients(&CoeffSpec::Basis { k: 0 }, &ns, &mu, &a, &c).unwrap();
        let el = SpaceElement::new(coeffs, ns.clone(), mu, a).unwrap();
        let region = Rect { x0: 0.5, x1: 40.0, y0: -1.0, y1: 1.0 };
        let zs = find_zeros(&el, &region, &c, &ZeroFindOptions::default()).unwrap();
        let expected = [4.0, 8.0, 16.0, 32.0];
        assert_eq!(zs.len(), expected.len(), "zeros: {:?}", zs.iter().map(|z| z.re()).collect::<Vec<_>>());
        for (z, e) in zs.iter().zip(expected) {
            assert!((z.re() - e).abs() < 1e-20 && z.im().abs() < 1e-20);
        }
    }
}
