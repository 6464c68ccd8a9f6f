//! Killed Green functions, equilibrium measures, capacities, hitting probabilities,
//! Harnack ratios and exponent probes.

use crate::error::{geometry, invalid, Error, Result};
use crate::graphs::{BoundaryKind, SiteId, SiteSet, WeightedGraph};
use crate::linalg::{cg, lu_solve, Csr, Dense, SolveMethod, SolverStats};
use crate::scalar::Scalar;
use crate::stats::{loglog_fit, LinearFit};
use crate::walk::transition_operator;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Largest system solved densely.
    pub dense_cap: usize,
    /// Relative residual target of CG solves.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { dense_cap: 4000, tol: 1e-10, max_iter: 200_000 }
    }
}

impl SolverConfig {
    pub fn for_scalar<T: Scalar>() -> Self {
        SolverConfig { tol: T::default_tol(), ..Default::default() }
    }
}

fn check_margin<T: Scalar>(g: &WeightedGraph<T>, u: &SiteSet) -> Result<()> {
    if let Some(x) = u.iter().find(|&x| !g.is_complete(x)) {
        return geometry(format!(
            "killed domain touches the window edge at site {x} (missing margin); enlarge the window"
        ));
    }
    Ok(())
}

/// `diag(rho) - W` restricted to `sites` (a subset of a margin-checked domain).
fn dirichlet_operator<T: Scalar>(g: &WeightedGraph<T>, sites: &SiteSet) -> Csr<T> {
    Csr::from_rows(
        sites
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut row = vec![(i as u32, g.vertex_measure(x))];
                for (w, c) in g.neighbors(x) {
                    if let Some(j) = sites.index_of(w) {
                        row.push((j as u32, -c));
                    }
                }
                row
            })
            .collect(),
    )
}

/// Solve `A h = b` for each right-hand side, densely below the cap.
fn solve_many<T: Scalar>(a: &Csr<T>, rhs: &[Vec<T>], cfg: &SolverConfig) -> Result<(Vec<Vec<T>>, SolverStats)> {
    let n = a.n;
    if n == 0 {
        let st = SolverStats { method: SolveMethod::Dense, unknowns: 0, iterations: 0, residual: 0.0 };
        return Ok((rhs.iter().map(|_| Vec::new()).collect(), st));
    }
    if n <= cfg.dense_cap {
        let mut b = Dense::zeros(n, rhs.len());
        for (j, r) in rhs.iter().enumerate() {
            for i in 0..n {
                b[(i, j)] = r[i];
            }
        }
        let x = lu_solve(a.to_dense(), b)?;
        let sols: Vec<Vec<T>> = (0..rhs.len()).map(|j| (0..n).map(|i| x[(i, j)]).collect()).collect();
        let mut res = 0f64;
        let mut ax = vec![T::zero(); n];
        for (s, r) in sols.iter().zip(rhs) {
            a.mul_into(s, &mut ax);
            let num: f64 = ax.iter().zip(r).map(|(p, q)| (p.f64() - q.f64()).powi(2)).sum::<f64>().sqrt();
            let den: f64 = r.iter().map(|q| q.f64().powi(2)).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            res = res.max(num / den);
        }
        return Ok((sols, SolverStats { method: SolveMethod::Dense, unknowns: n, iterations: 1, residual: res }));
    }
    let sols = rhs.par_iter().map(|r| cg(a, r, cfg.tol, cfg.max_iter)).collect::<Result<Vec<_>>>()?;
    let mut st = SolverStats { method: SolveMethod::Cg, unknowns: n, iterations: 0, residual: 0.0 };
    let mut out = Vec::with_capacity(sols.len());
    for (x, s) in sols {
        st.iterations += s.iterations;
        st.residual = st.residual.max(s.residual);
        out.push(x);
    }
    Ok((out, st))
}

enum GreenStore<T> {
    Dense(Dense<T>),
    Columns { op: Csr<T>, cache: Mutex<HashMap<usize, Arc<Vec<T>>>>, cfg: SolverConfig },
}

/// Green function of the walk killed on leaving `U`.
pub struct KilledGreen<T> {
    domain: SiteSet,
    store: GreenStore<T>,
    pub stats: SolverStats,
}

/// Killed Green function `g_U`. Dense below the cap (solving `(I - P_U) G = diag(1/rho)`
/// with a symmetry check), column-wise CG above it.
pub fn killed_green<T: Scalar>(g: &WeightedGraph<T>, u: &SiteSet, cfg: &SolverConfig) -> Result<KilledGreen<T>> {
    check_margin(g, u)?;
    let n = u.len();
    if n <= cfg.dense_cap {
        let p = transition_operator(g, u, cfg.dense_cap)?;
        let mut m = Dense::identity(n);
        let mut rhs = Dense::zeros(n, n);
        for (i, x) in u.iter().enumerate() {
            for j in 0..n {
                m[(i, j)] = m[(i, j)] - p[(i, j)];
            }
            rhs[(i, i)] = T::one() / g.vertex_measure(x);
        }
        let gm = lu_solve(m, rhs)?;
        let asym = gm.asymmetry().f64();
        let scale = gm.max_abs().f64();
        let tol = (T::epsilon().f64()).sqrt() * 1e-1 * (n as f64).sqrt().max(1.0);
        if asym > tol * scale {
            return Err(Error::Numerical(format!(
                "killed Green matrix fails the symmetry check (|G - G^T| = {asym:e})"
            )));
        }
        let stats = SolverStats { method: SolveMethod::Dense, unknowns: n, iterations: 1, residual: asym / scale };
        return Ok(KilledGreen { domain: u.clone(), store: GreenStore::Dense(gm), stats });
    }
    let op = dirichlet_operator(g, u);
    let stats = SolverStats { method: SolveMethod::Cg, unknowns: n, iterations: 0, residual: 0.0 };
    Ok(KilledGreen {
        domain: u.clone(),
        store: GreenStore::Columns { op, cache: Mutex::new(HashMap::new()), cfg: *cfg },
        stats,
    })
}

impl<T: Scalar> KilledGreen<T> {
    pub fn domain(&self) -> &SiteSet {
        &self.domain
    }

    /// `g_U(., y)` indexed like the domain.
    pub fn column(&self, y: SiteId) -> Result<Arc<Vec<T>>> {
        let j = self.domain.index_of(y).ok_or_else(|| Error::InvalidArgument(format!("site {y} not in domain")))?;
        match &self.store {
            GreenStore::Dense(m) => Ok(Arc::new((0..m.rows).map(|i| m[(i, j)]).collect())),
            GreenStore::Columns { op, cache, cfg } => {
                if let Some(c) = cache.lock().unwrap().get(&j) {
                    return Ok(c.clone());
                }
                let mut b = vec![T::zero(); op.n];
                b[j] = T::one();
                let (x, _) = cg(op, &b, cfg.tol, cfg.max_iter)?;
                let x = Arc::new(x);
                cache.lock().unwrap().insert(j, x.clone());
                Ok(x)
            }
        }
    }

    /// Solve the columns of several sites, in parallel.
    pub fn prefetch(&self, ys: &[SiteId]) -> Result<()> {
        let GreenStore::Columns { op, cache, cfg } = &self.store else {
            return Ok(());
        };
        let mut js = Vec::new();
        for &y in ys {
            let j = self.domain.index_of(y).ok_or_else(|| Error::InvalidArgument(format!("site {y} not in domain")))?;
            if !cache.lock().unwrap().contains_key(&j) && !js.contains(&j) {
                js.push(j);
            }
        }
        let xs = js
            .par_iter()
            .map(|&j| {
                let mut b = vec![T::zero(); op.n];
                b[j] = T::one();
                cg(op, &b, cfg.tol, cfg.max_iter).map(|(x, _)| x)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut c = cache.lock().unwrap();
        for (j, x) in js.into_iter().zip(xs) {
            c.insert(j, Arc::new(x));
        }
        Ok(())
    }

    /// `g_U(x, y)`; zero when either site is outside `U`.
    pub fn g(&self, x: SiteId, y: SiteId) -> Result<T> {
        let (Some(i), Some(_)) = (self.domain.index_of(x), self.domain.index_of(y)) else {
            return Ok(T::zero());
        };
        match &self.store {
            GreenStore::Dense(m) => Ok(m[(i, self.domain.index_of(y).unwrap())]),
            GreenStore::Columns { .. } => Ok(self.column(y)?[i]),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquilibriumSolution<T> {
    pub set: SiteSet,
    /// `e_K(x)` in the order of `set`.
    pub measure: Vec<T>,
    pub capacity: T,
    pub stats: SolverStats,
}

impl<T: Scalar> EquilibriumSolution<T> {
    pub fn get(&self, x: SiteId) -> T {
        self.set.index_of(x).map(|i| self.measure[i]).unwrap_or_else(T::zero)
    }

    /// Normalised measure as f64 probabilities.
    pub fn normalized(&self) -> Vec<f64> {
        let c = self.capacity.f64();
        self.measure.iter().map(|e| e.f64() / c).collect()
    }
}

/// Equilibrium measure and hitting probabilities for the walk killed outside `U`.
pub struct KilledEquilibrium<T> {
    pub equilibrium: EquilibriumSolution<T>,
    pub domain: SiteSet,
    /// `P_x[H_K < T_U]` indexed like `domain`.
    pub hit: Vec<T>,
}

impl<T: Scalar> KilledEquilibrium<T> {
    pub fn hit_prob(&self, x: SiteId) -> T {
        self.domain.index_of(x).map(|i| self.hit[i]).unwrap_or_else(T::zero)
    }
}

/// Solve the escape problem: `h = P[H_K < T_U]` harmonic off `K`, then
/// `e_K(x) = sum_x' rho_{x x'} (1 - h(x'))`.
pub fn equilibrium_measure<T: Scalar>(
    g: &WeightedGraph<T>,
    k: &SiteSet,
    u: &SiteSet,
    cfg: &SolverConfig,
) -> Result<KilledEquilibrium<T>> {
    if k.is_empty() {
        return invalid("equilibrium measure of the empty set");
    }
    if !k.is_subset(u) {
        return geometry("set K is not contained in the killed domain U");
    }
    check_margin(g, u)?;
    let free = u.difference(k);
    let op = dirichlet_operator(g, &free);
    let b: Vec<T> = free
        .iter()
        .map(|x| g.neighbors(x).filter(|(w, _)| k.contains(*w)).map(|(_, c)| c).sum())
        .collect();
    let (mut sols, stats) = solve_many(&op, &[b], cfg)?;
    let hfree = sols.pop().unwrap();
    let h_at = |x: SiteId| -> T {
        if k.contains(x) {
            T::one()
        } else {
            free.index_of(x).map(|i| hfree[i]).unwrap_or_else(T::zero)
        }
    };
    let measure: Vec<T> =
        k.iter().map(|x| g.neighbors(x).map(|(w, c)| c * (T::one() - h_at(w))).sum()).collect();
    let capacity = measure.iter().copied().sum();
    let hit = u.iter().map(h_at).collect();
    Ok(KilledEquilibrium {
        equilibrium: EquilibriumSolution { set: k.clone(), measure, capacity, stats },
        domain: u.clone(),
        hit,
    })
}

/// `e_K` from `sum_{x' in K} g_U(x, x') e_K(x') = 1` on `K`.
pub fn equilibrium_from_green<T: Scalar>(green: &KilledGreen<T>, k: &SiteSet) -> Result<EquilibriumSolution<T>> {
    let n = k.len();
    let mut m = Dense::zeros(n, n);
    for (j, y) in k.iter().enumerate() {
        let col = green.column(y)?;
        for (i, x) in k.iter().enumerate() {
            let xi = green.domain().index_of(x).ok_or_else(|| Error::Geometry("K not inside U".into()))?;
            m[(i, j)] = col[xi];
        }
    }
    let mut ones = Dense::zeros(n, 1);
    for i in 0..n {
        ones[(i, 0)] = T::one();
    }
    let e = lu_solve(m, ones)?;
    let measure: Vec<T> = (0..n).map(|i| e[(i, 0)]).collect();
    let capacity = measure.iter().copied().sum();
    Ok(EquilibriumSolution { set: k.clone(), measure, capacity, stats: green.stats })
}

/// `cap({x, x'})` from Green values.
pub fn pair_capacity(gx: f64, gy: f64, gxy: f64) -> f64 {
    (gx + gy - 2.0 * gxy) / (gx * gy - gxy * gxy)
}

/// Sandwich bounds on `P_x[H_K < T_U]` from killed Green sums.
pub fn sandwich_bounds<T: Scalar>(green: &KilledGreen<T>, x: SiteId, k: &SiteSet) -> Result<(f64, f64)> {
    let cols: Vec<Arc<Vec<T>>> = k.iter().map(|y| green.column(y)).collect::<Result<_>>()?;
    let row_sum = |z: SiteId| -> f64 {
        let i = green.domain().index_of(z).unwrap();
        cols.iter().map(|c| c[i].f64()).sum()
    };
    let num = row_sum(x);
    let sums: Vec<f64> = k.iter().map(row_sum).collect();
    let sup = sums.iter().cloned().fold(f64::MIN, f64::max);
    let inf = sums.iter().cloned().fold(f64::MAX, f64::min);
    Ok((num / sup, num / inf))
}

/// Infinite-volume estimate from nested killed domains.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PotentialEstimate {
    pub quantity: String,
    pub value: f64,
    pub bracket: (f64, f64),
    /// Largest killing radius used.
    pub radius: f64,
    /// `(radius, killed value)` per radius.
    pub per_radius: Vec<(f64, f64)>,
    pub error_bound: f64,
    pub solver_stats: Vec<SolverStats>,
}

/// Extrapolate `v(r) = v_inf + c r^-nu` from the last two radii.
/// `increasing` says on which side the killed values approach the limit.
fn richardson(quantity: &str, nu: f64, per_radius: Vec<(f64, f64)>, increasing: bool, stats: Vec<SolverStats>) -> Result<PotentialEstimate> {
    let m = per_radius.len();
    if m < 2 {
        return invalid("at least two radii are needed for an extrapolated bracket");
    }
    let (r1, v1) = per_radius[m - 2];
    let (r2, v2) = per_radius[m - 1];
    let q = (r2 / r1).powf(nu) - 1.0;
    if !(q > 0.0) {
        return invalid("radii must increase and nu must be positive");
    }
    let corr = (v2 - v1) / q;
    let value = v2 + corr;
    let err = corr.abs();
    let bracket = if increasing { (v2, value + err) } else { (value - err, v2) };
    Ok(PotentialEstimate { quantity: quantity.into(), value, bracket, radius: r2, per_radius, error_bound: err, solver_stats: stats })
}

fn check_radii(radii: &[f64]) -> Result<()> {
    if radii.len() < 2 || radii.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("radii must be at least two increasing values");
    }
    Ok(())
}

/// `g(x, y)` from killed solves on `B(center, r)`.
pub fn green_estimate<T: Scalar>(
    g: &WeightedGraph<T>,
    x: SiteId,
    y: SiteId,
    center: SiteId,
    radii: &[f64],
    cfg: &SolverConfig,
) -> Result<PotentialEstimate> {
    let res = green_profile(g, y, &[x], center, radii, cfg)?;
    Ok(res.into_iter().next().unwrap())
}

/// `g(x_i, y)` for several `x_i` sharing one solve per radius.
pub fn green_profile<T: Scalar>(
    g: &WeightedGraph<T>,
    y: SiteId,
    xs: &[SiteId],
    center: SiteId,
    radii: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<PotentialEstimate>> {
    check_radii(radii)?;
    let mut vals = vec![Vec::new(); xs.len()];
    let mut stats = Vec::new();
    for &r in radii {
        let u = g.ball(center, r)?.sites(g);
        if !u.contains(y) || xs.iter().any(|x| !u.contains(*x)) {
            return geometry(format!("radius {r} does not cover the requested sites"));
        }
        let gr = killed_green(g, &u, cfg)?;
        let col = gr.column(y)?;
        for (k, &x) in xs.iter().enumerate() {
            vals[k].push((r, col[u.index_of(x).unwrap()].f64()));
        }
        stats.push(gr.stats);
    }
    vals.into_iter().map(|v| richardson("green", g.metric.nu(), v, true, stats.clone())).collect()
}

/// `cap(K)` from killed solves on `B(center, r)`.
pub fn capacity_estimate<T: Scalar>(
    g: &WeightedGraph<T>,
    k: &SiteSet,
    center: SiteId,
    radii: &[f64],
    cfg: &SolverConfig,
) -> Result<PotentialEstimate> {
    check_radii(radii)?;
    let mut vals = Vec::new();
    let mut stats = Vec::new();
    for &r in radii {
        let u = g.ball(center, r)?.sites(g);
        let eq = equilibrium_measure(g, k, &u, cfg)?;
        vals.push((r, eq.equilibrium.capacity.f64()));
        stats.push(eq.equilibrium.stats);
    }
    richardson("capacity", g.metric.nu(), vals, false, stats)
}

/// `P_x[H_K < infinity]` from killed solves on `B(center, r)`.
pub fn hitting_estimate<T: Scalar>(
    g: &WeightedGraph<T>,
    x: SiteId,
    k: &SiteSet,
    center: SiteId,
    radii: &[f64],
    cfg: &SolverConfig,
) -> Result<PotentialEstimate> {
    check_radii(radii)?;
    let mut vals = Vec::new();
    let mut stats = Vec::new();
    for &r in radii {
        let u = g.ball(center, r)?.sites(g);
        if !u.contains(x) {
            return geometry(format!("radius {r} does not cover the start site"));
        }
        let eq = equilibrium_measure(g, k, &u, cfg)?;
        vals.push((r, eq.hit_prob(x).f64()));
        stats.push(eq.equilibrium.stats);
    }
    let mut est = richardson("hitting_probability", g.metric.nu(), vals, true, stats)?;
    est.bracket.1 = est.bracket.1.min(1.0);
    est.value = est.value.min(1.0);
    Ok(est)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryData {
    Constant,
    Indicator { site: SiteId },
    /// Independent uniform values in `[lo, hi]` drawn from the seed.
    Random { seed: u64, lo: f64, hi: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HarnackReport {
    pub ratio: f64,
    pub max: f64,
    pub min: f64,
    pub radius: f64,
    pub domain_radius: f64,
    pub stats: SolverStats,
}

/// `max / min` over `B(x, L)` of the harmonic extension into `B(x, c0 L)` of boundary data.
pub fn harnack_ratio<T: Scalar>(
    g: &WeightedGraph<T>,
    x: SiteId,
    l: f64,
    c0: f64,
    data: &BoundaryData,
    cfg: &SolverConfig,
) -> Result<HarnackReport> {
    if c0 <= 1.0 {
        return invalid("Harnack domain factor must exceed 1");
    }
    let v = g.ball(x, c0 * l)?.sites(g);
    check_margin(g, &v)?;
    let outer = g.boundary(&v, BoundaryKind::Outer)?;
    let mut rng = crate::walk::task_rng(match data { BoundaryData::Random { seed, .. } => *seed, _ => 0 }, 0);
    let f: HashMap<SiteId, T> = outer
        .iter()
        .map(|z| {
            let val = match data {
                BoundaryData::Constant => 1.0,
                BoundaryData::Indicator { site } => (*site == z) as u8 as f64,
                BoundaryData::Random { lo, hi, .. } => rng.gen_range(*lo..=*hi),
            };
            (z, T::of(val))
        })
        .collect();
    if let BoundaryData::Indicator { site } = data {
        if !outer.contains(*site) {
            return geometry("indicator site is not on the outer boundary of the Harnack domain");
        }
    }
    let op = dirichlet_operator(g, &v);
    let b: Vec<T> = v
        .iter()
        .map(|s| g.neighbors(s).filter_map(|(w, c)| f.get(&w).map(|fv| c * *fv)).sum())
        .collect();
    let (mut sols, stats) = solve_many(&op, &[b], cfg)?;
    let h = sols.pop().unwrap();
    let inner = g.ball(x, l)?.sites(g);
    let (mut mx, mut mn) = (f64::MIN, f64::MAX);
    for s in inner.iter() {
        let hv = h[v.index_of(s).unwrap()].f64();
        mx = mx.max(hv);
        mn = mn.min(hv);
    }
    if !(mn > 0.0) {
        return Err(Error::Numerical("harmonic function vanishes on the inner ball".into()));
    }
    Ok(HarnackReport { ratio: mx / mn, max: mx, min: mn, radius: l, domain_radius: c0 * l, stats })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub quantity: String,
    /// `(scale, value)` pairs.
    pub points: Vec<(f64, f64)>,
    pub fit: LinearFit,
}

fn probe(quantity: &str, points: Vec<(f64, f64)>) -> Result<ProbeReport> {
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let fit = loglog_fit(&xs, &ys).ok_or_else(|| Error::Numerical("degenerate log-log fit".into()))?;
    Ok(ProbeReport { quantity: quantity.into(), points, fit })
}

/// `rho(B(x, R))` against `R`.
pub fn volume_probe<T: Scalar>(g: &WeightedGraph<T>, x: SiteId, radii: &[f64]) -> Result<ProbeReport> {
    let pts = radii.iter().map(|&r| Ok((r, g.ball_measure(x, r)?))).collect::<Result<_>>()?;
    probe("ball_volume", pts)
}

/// `rho^G(B_G(y, R))` against `R`.
pub fn base_volume_probe<T: Scalar>(g: &WeightedGraph<T>, x: SiteId, radii: &[f64]) -> Result<ProbeReport> {
    let pts = radii
        .iter()
        .map(|&r| {
            let b = g.ball(x, r)?;
            Ok((r, b.region.base.iter().map(|&y| g.base.measure(y).f64()).sum()))
        })
        .collect::<Result<_>>()?;
    probe("base_ball_volume", pts)
}

/// `cap_U(B(x, L))` with `U = B(x, ratio L)` against `L`. Killing at a fixed
/// multiple of `L` keeps every point at the same relative scale, so the slope
/// estimates the infinite-volume exponent without extrapolating in the radius
/// (which converges slowly and non-uniformly on fractal bases).
pub fn capacity_probe<T: Scalar>(g: &WeightedGraph<T>, x: SiteId, scales: &[f64], ratio: f64, cfg: &SolverConfig) -> Result<ProbeReport> {
    if !(ratio > 1.0) {
        return invalid("killing ratio must exceed 1");
    }
    let pts = scales
        .iter()
        .map(|&l| {
            let k = g.ball(x, l)?.sites(g);
            let u = g.ball(x, ratio * l)?.sites(g);
            Ok((l, equilibrium_measure(g, &k, &u, cfg)?.equilibrium.capacity.f64()))
        })
        .collect::<Result<_>>()?;
    probe("ball_capacity", pts)
}

/// `g(x, t)` against `d(x, t)` for the given targets.
pub fn green_decay_probe<T: Scalar>(
    g: &WeightedGraph<T>,
    x: SiteId,
    targets: &[SiteId],
    radii: &[f64],
    cfg: &SolverConfig,
) -> Result<(ProbeReport, Vec<PotentialEstimate>)> {
    let ests = green_profile(g, x, targets, x, radii, cfg)?;
    let pts = targets.iter().zip(&ests).map(|(&t, e)| (g.metric_d(x, t), e.value)).collect();
    Ok((probe("green_decay", pts)?, ests))
}
