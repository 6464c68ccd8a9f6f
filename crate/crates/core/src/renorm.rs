//! Multiscale renormalisation: scale ladders, dyadic tree embeddings,
//! cascading covers, level schedules and the decoupling harness.

use crate::bits::BitSet;
use crate::error::{geometry, invalid, Error, Result};
use crate::graphs::{ball_in_ball, balls_disjoint, HalfPlane, Region, SiteId, SiteSet, WeightedGraph};
use crate::interlacements::{InterlacementSample, InterlacementSampler, SamplerConfig};
use crate::percolation::{event_window, plane_region, Detector, EventSpec, Family};
use crate::scalar::Scalar;
use crate::stats::{loglog_fit, LinearFit, Moments, Proportion};
use crate::walk::{excursions, task_rng, StopReason};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// `ell` a multiple of 100.
    Strict,
    /// Any `ell >= 4`; results are exploratory.
    Relaxed,
}

impl Mode {
    pub fn check_ell(self, ell: u64) -> Result<()> {
        match self {
            Mode::Strict if ell < 100 || ell % 100 != 0 => {
                Err(Error::Constraint(format!("strict mode needs ell a positive multiple of 100 (got {ell})")))
            }
            Mode::Relaxed if ell < 4 => Err(Error::Constraint(format!("relaxed mode needs ell >= 4 (got {ell})"))),
            _ => Ok(()),
        }
    }
}

/// `L_n = ell0^n L0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleLadder {
    pub l0: u64,
    pub ell0: u64,
    pub mode: Mode,
}

impl ScaleLadder {
    pub fn new(l0: u64, ell0: u64, mode: Mode) -> Result<Self> {
        if l0 == 0 {
            return invalid("L0 must be positive");
        }
        mode.check_ell(ell0)?;
        Ok(ScaleLadder { l0, ell0, mode })
    }

    pub fn scale(&self, n: u32) -> Result<u64> {
        self.ell0
            .checked_pow(n)
            .and_then(|p| p.checked_mul(self.l0))
            .ok_or_else(|| Error::InvalidArgument(format!("L_{n} overflows")))
    }
}

/// Sites `x_m` of a dyadic tree of depth `n`; `levels[k][j]` is node `j` at
/// depth `k`, with children `2j` and `2j + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEmbedding {
    pub levels: Vec<Vec<SiteId>>,
}

impl TreeEmbedding {
    pub fn root(x: SiteId) -> Self {
        TreeEmbedding { levels: vec![vec![x]] }
    }

    pub fn depth(&self) -> u32 {
        self.levels.len() as u32 - 1
    }

    pub fn leaves(&self) -> &[SiteId] {
        self.levels.last().expect("non-empty tree")
    }

    fn check_shape(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.iter().enumerate().any(|(k, l)| l.len() != 1 << k) {
            return invalid("tree embedding must have 2^k sites at depth k");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Nesting { depth: u32, node: usize },
    Separation { depth: u32, node: usize, distance: f64, required: f64 },
    Overlap { depth: u32, a: usize, b: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub depth: u32,
    pub violations: Vec<Violation>,
}

impl EmbeddingReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Exhaustive check of box nesting, sibling separation and same-depth
/// disjointness for boxes `B(x_m, 10 L_{n-k})`.
pub fn validate_embedding<T: Scalar>(g: &WeightedGraph<T>, t: &TreeEmbedding, ladder: &ScaleLadder) -> Result<EmbeddingReport> {
    t.check_shape()?;
    let n = t.depth();
    let radius = |k: u32| -> Result<f64> { Ok(10.0 * ladder.scale(n - k)? as f64) };
    for k in 0..=n {
        let r = radius(k)?;
        if let Some(&x) = t.levels[k as usize].iter().find(|&&x| !g.ball_inside(x, r)) {
            return geometry(format!("box B({x}, {r}) at depth {k} leaves the window"));
        }
    }
    let mut violations = Vec::new();
    for k in 0..n {
        let (r, rc) = (radius(k)?, radius(k + 1)?);
        let required = ladder.scale(n - k)? as f64 / 100.0;
        for (j, &x) in t.levels[k as usize].iter().enumerate() {
            let (a, b) = (t.levels[k as usize + 1][2 * j], t.levels[k as usize + 1][2 * j + 1]);
            if !ball_in_ball(g, a, rc, x, r)? || !ball_in_ball(g, b, rc, x, r)? {
                violations.push(Violation::Nesting { depth: k, node: j });
            }
            let distance = g.metric_d(a, b);
            if distance < required - 1e-9 {
                violations.push(Violation::Separation { depth: k, node: j, distance, required });
            }
        }
    }
    for k in 1..=n {
        let r = radius(k)?;
        let lv = &t.levels[k as usize];
        for a in 0..lv.len() {
            for b in a + 1..lv.len() {
                if !balls_disjoint(g, lv[a], r, lv[b], r) {
                    violations.push(Violation::Overlap { depth: k, a, b });
                }
            }
        }
    }
    Ok(EmbeddingReport { depth: n, violations })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pairing {
    /// `net[..split] x net[split..]`.
    Bipartite { split: usize },
    /// Unordered pairs of `net` at distance `>= min_d`.
    Separated { min_d: f64 },
}

/// A net `Λ` and the admissible pairs covering the event at scale `ell L`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverSpec {
    pub family: Family,
    pub anchor: SiteId,
    pub ell: u64,
    #[serde(rename = "L")]
    pub l: u64,
    pub net: Vec<SiteId>,
    pub pairing: Pairing,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverCheck {
    pub net_size: usize,
    pub pairs: u64,
    /// Every net point lies in `B(x, 9 ell L)`.
    pub contained: bool,
    /// Lower bound on the pair separation (exact when `exact`).
    pub min_separation: f64,
    pub exact: bool,
    pub required_separation: f64,
}

impl CoverCheck {
    pub fn ok(&self) -> bool {
        self.contained && self.min_separation >= self.required_separation - 1e-9
    }
}

impl CoverSpec {
    /// The admissible pairs, streamed.
    pub fn pairs<'a, T: Scalar>(&'a self, g: &'a WeightedGraph<T>) -> Box<dyn Iterator<Item = (SiteId, SiteId)> + 'a> {
        match self.pairing {
            Pairing::Bipartite { split } => {
                let (a, b) = self.net.split_at(split);
                Box::new(a.iter().flat_map(move |&x| b.iter().map(move |&y| (x, y))))
            }
            Pairing::Separated { min_d } => Box::new(self.net.iter().enumerate().flat_map(move |(i, &x)| {
                self.net[i + 1..].iter().filter(move |&&y| g.metric_d(x, y) >= min_d - 1e-9).map(move |&y| (x, y))
            })),
        }
    }

    pub fn pair_count<T: Scalar>(&self, g: &WeightedGraph<T>) -> u64 {
        match self.pairing {
            Pairing::Bipartite { split } => split as u64 * (self.net.len() - split) as u64,
            Pairing::Separated { min_d } => {
                let n = self.net.len() as u64;
                n * n.saturating_sub(1) / 2 - self.close_pairs(g, min_d)
            }
        }
    }

    /// Unordered net pairs at distance below `min_d`, found through small balls.
    fn close_pairs<T: Scalar>(&self, g: &WeightedGraph<T>, min_d: f64) -> u64 {
        let member: HashSet<SiteId> = self.net.iter().copied().collect();
        let close = |p: SiteId, q: SiteId| q > p && g.metric_d(p, q) < min_d - 1e-9;
        self.net
            .par_iter()
            .map(|&p| match g.ball(p, min_d) {
                Ok(b) => b.sites(g).iter().filter(|&q| member.contains(&q) && close(p, q)).count() as u64,
                Err(_) => self.net.iter().filter(|&&q| close(p, q)).count() as u64,
            })
            .sum()
    }

    /// Containment in `B(x, 9 ell L)` and pair separation `>= ell L / 100`.
    pub fn check<T: Scalar>(&self, g: &WeightedGraph<T>) -> CoverCheck {
        let scale = (self.ell * self.l) as f64;
        let required = scale / 100.0;
        let contained = self.net.iter().all(|&y| g.metric_d(self.anchor, y) <= 9.0 * scale + 1e-9);
        let (min_separation, exact) = match self.pairing {
            Pairing::Bipartite { split } => {
                let (a, b) = self.net.split_at(split);
                // Triangle inequality first; exhaustive only when it is not enough.
                let far_a = a.iter().map(|&x| g.metric_d(self.anchor, x)).fold(0.0, f64::max);
                let near_b = b.iter().map(|&x| g.metric_d(self.anchor, x)).fold(f64::INFINITY, f64::min);
                let bound = near_b - far_a;
                if bound >= required || (a.len() as u64) * (b.len() as u64) > 50_000_000 {
                    (bound, false)
                } else {
                    let m = a
                        .iter()
                        .flat_map(|&x| b.iter().map(move |&y| (x, y)))
                        .map(|(x, y)| g.metric_d(x, y))
                        .fold(f64::INFINITY, f64::min);
                    (m, true)
                }
            }
            Pairing::Separated { min_d } => (min_d, true),
        };
        CoverCheck {
            net_size: self.net.len(),
            pairs: self.pair_count(g),
            contained,
            min_separation,
            exact,
            required_separation: required,
        }
    }
}

/// `∂_int B(x, r)` in site order, without enumerating the ball's interior.
fn interior_boundary<T: Scalar>(g: &WeightedGraph<T>, x: SiteId, r: f64) -> Result<Vec<SiteId>> {
    let ball = g.ball(x, r)?;
    let yc = g.base_of(x);
    let reg = &ball.region;
    let mut out = Vec::new();
    for &y in &reg.base {
        let rim = !g.base.is_complete(y) || g.base.neighbors(y).any(|(w, _)| g.base.dist(yc, w) > ball.rg);
        if rim {
            out.extend((reg.z_lo..=reg.z_hi).filter_map(|z| g.site(y, z)));
        } else {
            out.extend(g.site(y, reg.z_lo));
            if reg.z_hi > reg.z_lo {
                out.extend(g.site(y, reg.z_hi));
            }
        }
    }
    Ok(out)
}

/// Sites of `B(x, r) ∩ P` with a plane neighbour in `P \ B(x, r)`.
fn plane_boundary<T: Scalar>(g: &WeightedGraph<T>, plane: &HalfPlane, x: SiteId, r: f64) -> Result<Vec<SiteId>> {
    let (n0, _) = plane.coords(g, x).ok_or_else(|| Error::InvalidArgument("anchor must lie in the half-plane".into()))?;
    let reg = plane_region(g, plane, x, r)?;
    let rg = (r + 1e-9).floor() as u32;
    let mut out = Vec::new();
    for &y in &reg.base {
        let (n, _) = plane.coords(g, g.site(y, reg.z_lo).expect("plane site")).expect("ray vertex");
        let side = n == n0 + rg || (n0 > rg && n == n0 - rg);
        for z in reg.z_lo..=reg.z_hi {
            if side || z == reg.z_lo || z == reg.z_hi {
                out.extend(g.site(y, z));
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Greedy maximal set in `candidates` (scanned in the given order) with
/// mutual `d` distance bigger than `sep`.
fn greedy_net<T: Scalar>(g: &WeightedGraph<T>, candidates: &[SiteId], sep: f64) -> Result<Vec<SiteId>> {
    let mut blocked: HashSet<SiteId> = HashSet::new();
    let mut net = Vec::new();
    for &p in candidates {
        if blocked.contains(&p) {
            continue;
        }
        net.push(p);
        blocked.extend(g.ball(p, sep)?.sites(g).iter());
    }
    Ok(net)
}

/// Greedy maximal set of base vertices with mutual `d_G` distance bigger than `sep`.
fn greedy_base_net<T: Scalar>(g: &WeightedGraph<T>, candidates: &[u32], z: i64, sep: f64) -> Result<Vec<u32>> {
    let mut blocked: HashSet<u32> = HashSet::new();
    let mut net = Vec::new();
    for &y in candidates {
        if blocked.contains(&y) {
            continue;
        }
        net.push(y);
        let s = g.site(y, z).expect("base vertex at anchor height");
        let rg = (sep + 1e-9).floor();
        // A base ball only: the z reach of the probe ball is irrelevant.
        blocked.extend(g.ball(s, rg)?.region.base.iter());
    }
    Ok(net)
}

fn cover_pre<T: Scalar>(g: &WeightedGraph<T>, x: SiteId, ell: u64, l: u64, mode: Mode, reach: f64) -> Result<f64> {
    mode.check_ell(ell)?;
    if l == 0 {
        return invalid("scale L must be positive");
    }
    let scale = (ell * l) as f64;
    if !g.ball_inside(x, reach * scale) {
        return geometry(format!("B(x, {}) does not fit in the window", reach * scale));
    }
    Ok(scale)
}

/// Nets on `∂_int B(x, ell L)` and `∂_int B(x, 1.5 ell L)`, paired across.
pub fn cover_a<T: Scalar>(g: &WeightedGraph<T>, x: SiteId, ell: u64, l: u64, mode: Mode) -> Result<CoverSpec> {
    let scale = cover_pre(g, x, ell, l, mode, 2.0)?;
    let n1 = greedy_net(g, &interior_boundary(g, x, scale)?, l as f64)?;
    let n2 = greedy_net(g, &interior_boundary(g, x, 1.5 * scale)?, l as f64)?;
    let split = n1.len();
    Ok(CoverSpec { family: Family::A, anchor: x, ell, l, net: [n1, n2].concat(), pairing: Pairing::Bipartite { split } })
}

/// As [`cover_a`] on the plane boundaries; a single dummy pair off the plane.
pub fn cover_b<T: Scalar>(g: &WeightedGraph<T>, x: SiteId, ell: u64, l: u64, plane: &HalfPlane, mode: Mode) -> Result<CoverSpec> {
    let scale = cover_pre(g, x, ell, l, mode, 2.0)?;
    let (n1, n2) = if plane.contains(g, x) {
        (
            greedy_net(g, &plane_boundary(g, plane, x, scale)?, l as f64)?,
            greedy_net(g, &plane_boundary(g, plane, x, 1.5 * scale)?, l as f64)?,
        )
    } else {
        let first = |r: f64| -> Result<Vec<SiteId>> { Ok(interior_boundary(g, x, r)?.into_iter().take(1).collect()) };
        (first(scale)?, first(1.5 * scale)?)
    };
    let split = n1.len();
    Ok(CoverSpec { family: Family::B, anchor: x, ell, l, net: [n1, n2].concat(), pairing: Pairing::Bipartite { split } })
}

/// `Λ_G x Λ_Z` around `x = (y*, z*)`.
pub fn cover_s<T: Scalar>(g: &WeightedGraph<T>, x: SiteId, ell: u64, l: u64, mode: Mode) -> Result<CoverSpec> {
    let scale = cover_pre(g, x, ell, l, mode, 5.0)?;
    if !g.ball_inside(x, 5.0 * scale + l as f64) {
        return geometry("the S cover needs a margin of L around B(x, 5 ell L)");
    }
    let (_, z0) = g.split(x);
    let ball = g.ball(x, 5.0 * scale)?;
    let lambda_g = if l <= 4 { ball.region.base.clone() } else { greedy_base_net(g, &ball.region.base, z0, l as f64 / 4.0)? };
    let a = ((l as f64 / 4.0).powf(g.metric.beta / 2.0).floor() as i64).max(1);
    let zr = ball.zr;
    let zs: Vec<i64> = (-(zr / a)..=zr / a).map(|k| z0 + k * a).collect();
    let mut net: Vec<SiteId> = lambda_g.iter().flat_map(|&y| zs.iter().filter_map(move |&z| g.site(y, z))).collect();
    net.sort_unstable();
    Ok(CoverSpec { family: Family::S, anchor: x, ell, l, net, pairing: Pairing::Separated { min_d: scale / 100.0 } })
}

pub fn cover<T: Scalar>(
    g: &WeightedGraph<T>,
    family: Family,
    x: SiteId,
    ell: u64,
    l: u64,
    plane: Option<&HalfPlane>,
    mode: Mode,
) -> Result<CoverSpec> {
    match family {
        Family::A => cover_a(g, x, ell, l, mode),
        Family::B => cover_b(g, x, ell, l, plane.ok_or_else(|| Error::InvalidArgument("family B needs a half-plane".into()))?, mode),
        Family::S => cover_s(g, x, ell, l, mode),
    }
}

/// Fit of `log |Λ|` against `log ell`.
pub fn complexity_fit(ells: &[u64], sizes: &[usize]) -> Option<LinearFit> {
    let xs: Vec<f64> = ells.iter().map(|&e| e as f64).collect();
    let ys: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    loglog_fit(&xs, &ys)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InclusionReport {
    pub family: Family,
    pub ell: u64,
    #[serde(rename = "L")]
    pub l: u64,
    pub configs: u64,
    /// Configurations where the event at scale `ell L` holds.
    pub parent_events: u64,
    pub violations: u64,
    /// Trial index of the first violation.
    pub first_violation: Option<u64>,
}

/// Configuration window for the parent event and all child events.
fn inclusion_window<T: Scalar>(g: &WeightedGraph<T>, c: &CoverSpec, plane: Option<&HalfPlane>) -> Result<Region> {
    let scale = (c.ell * c.l) as f64;
    match c.family {
        Family::A => Ok(g.ball(c.anchor, 2.0 * scale)?.region),
        Family::B => plane_region(g, plane.expect("checked"), c.anchor, 2.0 * scale),
        Family::S => Ok(g.ball(c.anchor, 5.0 * scale + 5.0 * c.l as f64)?.region),
    }
}

/// Randomised check that the event at scale `ell L` implies some admissible
/// pair of events at scale `L`, on i.i.d. configurations of random density.
pub fn inclusion_check<T: Scalar>(
    g: &WeightedGraph<T>,
    c: &CoverSpec,
    plane: Option<&HalfPlane>,
    configs: u64,
    seed: u64,
) -> Result<InclusionReport> {
    if c.family == Family::B && plane.is_none() {
        return invalid("family B needs a half-plane");
    }
    if c.ell * c.l > u32::MAX as u64 {
        return invalid("scale too large");
    }
    let window = inclusion_window(g, c, plane)?.indexed(g.base.len());
    let spec = |x: SiteId, l: u64| EventSpec { family: c.family, x, l: l as u32, plane: plane.cloned() };
    let parent = Detector::new(g, &spec(c.anchor, c.ell * c.l), &window)?;
    // Bipartite nets are small: build their detectors once.
    let fixed: Option<Vec<Detector<T>>> = match c.pairing {
        Pairing::Bipartite { .. } => Some(c.net.iter().map(|&x| Detector::new(g, &spec(x, c.l), &window)).collect::<Result<_>>()?),
        Pairing::Separated { .. } => None,
    };
    let index: HashMap<SiteId, usize> = c.net.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let probe = if c.family == Family::S { 2.0 * c.l as f64 } else { 0.0 };
    let results: Vec<(bool, bool)> = (0..configs)
        .into_par_iter()
        .map(|t| -> Result<(bool, bool)> {
            let mut rng = task_rng(seed, t);
            let p: f64 = rng.gen_range(0.05..0.95);
            let mut sigma = BitSet::new(window.len());
            for i in 0..window.len() {
                if rng.gen::<f64>() < p {
                    sigma.set(i, true);
                }
            }
            let witness = parent.s_witness(&sigma);
            let holds = if c.family == Family::S { witness.is_some() } else { parent.eval(&sigma) };
            if !holds {
                return Ok((false, false));
            }
            let ok = match (c.pairing, &fixed) {
                (Pairing::Bipartite { split }, Some(dets)) => {
                    dets[..split].iter().any(|d| d.eval(&sigma)) && dets[split..].iter().any(|d| d.eval(&sigma))
                }
                (Pairing::Separated { min_d }, _) => {
                    // Net points near the witness first, then the rest.
                    let mut order: Vec<usize> = Vec::new();
                    let mut queued = vec![false; c.net.len()];
                    if let Some(w) = &witness {
                        for &s in w.pieces.iter().flatten() {
                            for q in g.ball(s, probe)?.sites(g).iter() {
                                if let Some(&i) = index.get(&q) {
                                    if !queued[i] {
                                        queued[i] = true;
                                        order.push(i);
                                    }
                                }
                            }
                        }
                    }
                    order.extend((0..c.net.len()).filter(|&i| !queued[i]));
                    let mut hits: Vec<SiteId> = Vec::new();
                    let mut found = false;
                    for i in order {
                        let x = c.net[i];
                        if Detector::new(g, &spec(x, c.l), &window)?.eval(&sigma) {
                            if hits.iter().any(|&h| g.metric_d(h, x) >= min_d - 1e-9) {
                                found = true;
                                break;
                            }
                            hits.push(x);
                        }
                    }
                    found
                }
                _ => unreachable!("bipartite covers carry detectors"),
            };
            Ok((true, !ok))
        })
        .collect::<Result<_>>()?;
    Ok(InclusionReport {
        family: c.family,
        ell: c.ell,
        l: c.l,
        configs,
        parent_events: results.iter().filter(|r| r.0).count() as u64,
        violations: results.iter().filter(|r| r.1).count() as u64,
        first_violation: results.iter().position(|r| r.1).map(|i| i as u64),
    })
}

type PairList = Arc<Vec<(SiteId, SiteId)>>;

/// Streams every embedding built by recursive cover expansion from the root.
pub struct TreeExpansion<'g, T: Scalar> {
    g: &'g WeightedGraph<T>,
    family: Family,
    plane: Option<HalfPlane>,
    ladder: ScaleLadder,
    n: u32,
    cache: HashMap<(SiteId, u32), PairList>,
    /// Sites in heap order: node `i` has children `2i + 1`, `2i + 2`.
    sites: Vec<SiteId>,
    digits: Vec<usize>,
    state: ExpansionState,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ExpansionState {
    Fresh,
    Running,
    Done,
}

pub fn expand_tree<'g, T: Scalar>(
    g: &'g WeightedGraph<T>,
    family: Family,
    x: SiteId,
    n: u32,
    ladder: &ScaleLadder,
    plane: Option<&HalfPlane>,
) -> Result<TreeExpansion<'g, T>> {
    if n > 16 {
        return invalid("tree depth above 16 is not supported");
    }
    ladder.scale(n)?;
    let internal = (1usize << n) - 1;
    let mut sites = vec![0; 2 * internal + 1];
    sites[0] = x;
    Ok(TreeExpansion {
        g,
        family,
        plane: plane.cloned(),
        ladder: *ladder,
        n,
        cache: HashMap::new(),
        sites,
        digits: vec![0; internal],
        state: ExpansionState::Fresh,
    })
}

fn depth_of(i: usize) -> u32 {
    usize::BITS - 1 - (i + 1).leading_zeros()
}

impl<'g, T: Scalar> TreeExpansion<'g, T> {
    fn pairs_at(&mut self, x: SiteId, depth: u32) -> Result<PairList> {
        if let Some(p) = self.cache.get(&(x, depth)) {
            return Ok(p.clone());
        }
        let l = self.ladder.scale(self.n - depth - 1)?;
        let c = cover(self.g, self.family, x, self.ladder.ell0, l, self.plane.as_ref(), self.ladder.mode)?;
        let p: PairList = Arc::new(c.pairs(self.g).collect());
        self.cache.insert((x, depth), p.clone());
        Ok(p)
    }

    /// Fill children of internal nodes `>= from` from the digits; returns the
    /// first node with no pairs, if any.
    fn fill(&mut self, from: usize) -> Result<Option<usize>> {
        for i in from..self.digits.len() {
            let p = self.pairs_at(self.sites[i], depth_of(i))?;
            if p.is_empty() {
                return Ok(Some(i));
            }
            let (a, b) = p[self.digits[i]];
            self.sites[2 * i + 1] = a;
            self.sites[2 * i + 2] = b;
        }
        Ok(None)
    }

    /// Odometer step: bump the last digit below `limit` that can move.
    fn advance(&mut self, mut limit: usize) -> Result<bool> {
        loop {
            let mut p = None;
            for i in (0..limit).rev() {
                let count = self.pairs_at(self.sites[i], depth_of(i))?.len();
                if self.digits[i] + 1 < count {
                    p = Some(i);
                    break;
                }
            }
            let Some(p) = p else { return Ok(false) };
            self.digits[p] += 1;
            self.digits[p + 1..].iter_mut().for_each(|d| *d = 0);
            match self.fill(p)? {
                None => return Ok(true),
                Some(q) => limit = q,
            }
        }
    }

    fn current(&self) -> TreeEmbedding {
        let levels = (0..=self.n).map(|k| self.sites[(1 << k) - 1..(1 << (k + 1)) - 1].to_vec()).collect();
        TreeEmbedding { levels }
    }

    fn step(&mut self) -> Result<Option<TreeEmbedding>> {
        match self.state {
            ExpansionState::Done => return Ok(None),
            ExpansionState::Fresh => {
                self.state = ExpansionState::Running;
                if let Some(q) = self.fill(0)? {
                    if !self.advance(q)? {
                        self.state = ExpansionState::Done;
                        return Ok(None);
                    }
                }
            }
            ExpansionState::Running => {
                if !self.advance(self.digits.len())? {
                    self.state = ExpansionState::Done;
                    return Ok(None);
                }
            }
        }
        Ok(Some(self.current()))
    }

    /// Number of embeddings, by recursion over covers.
    pub fn total(&mut self) -> Result<u128> {
        let mut memo = HashMap::new();
        let root = self.sites[0];
        self.count_from(root, 0, &mut memo)
    }

    fn count_from(&mut self, x: SiteId, depth: u32, memo: &mut HashMap<(SiteId, u32), u128>) -> Result<u128> {
        if depth == self.n {
            return Ok(1);
        }
        if let Some(&c) = memo.get(&(x, depth)) {
            return Ok(c);
        }
        let pairs = self.pairs_at(x, depth)?;
        let mut total = 0u128;
        for &(a, b) in pairs.iter() {
            let ca = self.count_from(a, depth + 1, memo)?;
            let cb = self.count_from(b, depth + 1, memo)?;
            total = total.saturating_add(ca.saturating_mul(cb));
        }
        memo.insert((x, depth), total);
        Ok(total)
    }
}

impl<'g, T: Scalar> Iterator for TreeExpansion<'g, T> {
    type Item = Result<TreeEmbedding>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.step() {
            Ok(t) => t.map(Ok),
            Err(e) => {
                self.state = ExpansionState::Done;
                Some(Err(e))
            }
        }
    }
}

/// Levels `u_n^± = u0 prod_{k<n} (1 + a (k+1)^{-3/2})^{±1}`,
/// `a = c1 sqrt(K) ell0^{-(nu - nu')/2}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelSchedule {
    pub u0: f64,
    pub k: f64,
    pub nu: f64,
    pub nu_prime: f64,
    pub ell0: f64,
    pub l0: f64,
    pub c1: f64,
    pub a: f64,
    pub u_inf_plus: f64,
    pub u_inf_minus: f64,
}

const SCHEDULE_TERMS: u64 = 1_000_000;

/// `sum_{k > n} k^{-s}` by Euler-Maclaurin.
fn zeta_tail(s: f64, n: f64) -> f64 {
    n.powf(1.0 - s) / (s - 1.0) - 0.5 * n.powf(-s) + s / 12.0 * n.powf(-s - 1.0)
        - s * (s + 1.0) * (s + 2.0) / 720.0 * n.powf(-s - 3.0)
}

pub fn level_schedule(u0: f64, k: f64, nu: f64, nu_prime: f64, ell0: f64, l0: f64, c1: f64) -> Result<LevelSchedule> {
    if !(u0 > 0.0 && u0.is_finite()) {
        return invalid(format!("u0 must be positive (got {u0})"));
    }
    if !(k > 0.0 && c1 > 0.0 && ell0 >= 1.0 && l0 >= 1.0) {
        return invalid("K, c1 must be positive and ell0, L0 at least 1");
    }
    if !(nu_prime > 0.0 && nu_prime < nu) {
        return Err(Error::Constraint(format!("nu' must lie in (0, nu) = (0, {nu}) (got {nu_prime})")));
    }
    let a = c1 * k.sqrt() * ell0.powf(-(nu - nu_prime) / 2.0);
    // Smallest terms first, then the log1p series of the tail.
    let mut s: f64 = (1..=SCHEDULE_TERMS).rev().map(|j| (a * (j as f64).powf(-1.5)).ln_1p()).sum();
    let n = SCHEDULE_TERMS as f64;
    for j in 1..=4 {
        let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
        s += sign * a.powi(j) / j as f64 * zeta_tail(1.5 * j as f64, n);
    }
    Ok(LevelSchedule {
        u0,
        k,
        nu,
        nu_prime,
        ell0,
        l0,
        c1,
        a,
        u_inf_plus: u0 * s.exp(),
        u_inf_minus: u0 * (-s).exp(),
    })
}

impl LevelSchedule {
    fn factor(&self, j: u32) -> f64 {
        1.0 + self.a * (j as f64).powf(-1.5)
    }

    pub fn u_plus(&self, n: u32) -> f64 {
        (1..=n).fold(self.u0, |u, j| u * self.factor(j))
    }

    pub fn u_minus(&self, n: u32) -> f64 {
        (1..=n).fold(self.u0, |u, j| u / self.factor(j))
    }

    pub fn epsilon(&self, v: f64) -> f64 {
        epsilon(self.k, v, self.l0, self.nu, self.ell0, self.nu_prime)
    }
}

/// `2 e^{-w} / (1 - e^{-w})` with `w = K v L0^nu ell0^nu'`.
pub fn epsilon(k: f64, v: f64, l0: f64, nu: f64, ell0: f64, nu_prime: f64) -> f64 {
    let w = k * v * l0.powf(nu) * ell0.powf(nu_prime);
    2.0 / w.exp_m1()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// One interlacement shared by all leaf boxes.
    Shared,
    /// An independent interlacement per leaf box.
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Violated,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn ci95(&self) -> (f64, f64) {
        (self.value - crate::stats::Z95 * self.se, self.value + crate::stats::Z95 * self.se)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecouplingReport {
    pub family: Family,
    pub coupling: Coupling,
    pub mode: Mode,
    pub depth: u32,
    pub trials: u64,
    pub u0: f64,
    /// `u_n^+` for decreasing families, `u_n^-` for increasing ones.
    pub u_n: f64,
    pub u_inf: f64,
    pub epsilon: f64,
    /// `P[∩ G_m at u_n]`.
    pub lhs: Estimate,
    /// `prod (P[G_m at u0] + epsilon)`.
    pub rhs: Estimate,
    pub verdict: Verdict,
    /// `P[∩ G_m at u_inf]` and the product of its marginals.
    pub fkg_intersection: Estimate,
    pub fkg_product: Estimate,
    /// Intersection minus product, below `-3 se`.
    pub fkg_violated: bool,
    /// At `u0`: intersection minus product of marginals, in standard errors.
    pub product_law_z: f64,
    pub marginals_u0: Vec<f64>,
    pub truncation_radius: f64,
    pub bias_bound: Option<f64>,
}

/// Per-trial indicators: intersection, then each leaf.
struct LevelStats {
    inter: Vec<bool>,
    leaves: Vec<Vec<bool>>,
}

impl LevelStats {
    fn marginals(&self) -> Vec<f64> {
        let t = self.inter.len() as f64;
        self.leaves.iter().map(|l| l.iter().filter(|&&b| b).count() as f64 / t).collect()
    }

    /// Product of `marginal + shift` with a delta-method standard error, and
    /// the intersection minus that product.
    fn product_and_gap(&self, shift: f64) -> (Estimate, Estimate, Estimate) {
        let t = self.inter.len();
        let q: Vec<f64> = self.marginals().iter().map(|p| p + shift).collect();
        let prod: f64 = q.iter().product();
        let w: Vec<f64> = (0..q.len()).map(|m| q.iter().enumerate().filter(|(j, _)| *j != m).map(|(_, v)| v).product()).collect();
        let (mut mp, mut mg, mut mi) = (Moments::default(), Moments::default(), Moments::default());
        for r in 0..t {
            let lin: f64 = self.leaves.iter().zip(&w).map(|(l, w)| w * l[r] as u8 as f64).sum();
            let i = self.inter[r] as u8 as f64;
            mp.push(lin);
            mg.push(i - lin);
            mi.push(i);
        }
        let inter = Estimate { value: mi.mean(), se: mi.std_err() };
        let product = Estimate { value: prod, se: mp.std_err() };
        // Rare intersections make the sample variance of the gap degenerate (no hits
        // at all gives a spurious zero); floor it by the binomial variance under the null.
        let p0 = prod.clamp(0.0, 1.0);
        let gap = Estimate { value: inter.value - prod, se: mg.std_err().max((p0 * (1.0 - p0) / t as f64).sqrt()) };
        (inter, product, gap)
    }
}

/// Monte Carlo check of the decoupling inequality and its FKG companion on
/// the leaves of `t`, each carrying the event at scale `L0`.
#[allow(clippy::too_many_arguments)]
pub fn decouple_verify<T: Scalar>(
    g: &WeightedGraph<T>,
    family: Family,
    t: &TreeEmbedding,
    plane: Option<&HalfPlane>,
    schedule: &LevelSchedule,
    mode: Mode,
    coupling: Coupling,
    trials: u64,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<DecouplingReport> {
    t.check_shape()?;
    if trials < 100 {
        return invalid("decoupling verification needs at least 100 trials");
    }
    let n = t.depth();
    let increasing = family != Family::A;
    let (u_n, u_inf, eps) = if increasing {
        (schedule.u_minus(n), schedule.u_inf_minus, schedule.epsilon(schedule.u_inf_minus))
    } else {
        (schedule.u_plus(n), schedule.u_inf_plus, schedule.epsilon(schedule.u0))
    };
    let levels = [schedule.u0, u_n, u_inf];
    let u_max = levels.iter().cloned().fold(0.0, f64::max);
    let l0 = schedule.l0 as u32;
    let leaves = t.leaves();
    let windows: Vec<Region> = leaves
        .iter()
        .map(|&x| {
            let spec = EventSpec { family, x, l: l0, plane: plane.cloned() };
            Ok(event_window(g, &spec)?.indexed(g.base.len()))
        })
        .collect::<Result<_>>()?;
    let dets: Vec<Detector<T>> = leaves
        .iter()
        .zip(&windows)
        .map(|(&x, w)| Detector::new(g, &EventSpec { family, x, l: l0, plane: plane.cloned() }, w))
        .collect::<Result<_>>()?;
    let center = t.levels[0][0];
    let (samplers, maps): (Vec<InterlacementSampler<T>>, Vec<Vec<Vec<usize>>>) = match coupling {
        Coupling::Shared => {
            let anchor = windows.iter().fold(SiteSet::new(Vec::new()), |a, w| a.union(&w.sites(g)));
            let s = InterlacementSampler::new(g, &anchor, center, cfg)?;
            let m = windows.iter().map(|w| w.sites(g).iter().map(|x| anchor.index_of(x).expect("in anchor")).collect()).collect();
            (vec![s], vec![m])
        }
        Coupling::Independent => {
            let mut ss = Vec::new();
            let mut ms = Vec::new();
            for w in &windows {
                let anchor = w.sites(g);
                ss.push(InterlacementSampler::new(g, &anchor, center, cfg)?);
                ms.push(vec![(0..anchor.len()).collect()]);
            }
            (ss, ms)
        }
    };
    let leaf_count = leaves.len();
    // rows[trial][level][leaf]
    let rows: Vec<Vec<Vec<bool>>> = (0..trials)
        .into_par_iter()
        .map(|r| -> Result<Vec<Vec<bool>>> {
            let fields = match coupling {
                Coupling::Shared => vec![samplers[0].min_labels(u_max, &mut task_rng(seed, r))?],
                Coupling::Independent => samplers
                    .iter()
                    .enumerate()
                    .map(|(m, s)| s.min_labels(u_max, &mut task_rng(seed, ((m as u64) << 40) | r)))
                    .collect::<Result<_>>()?,
            };
            Ok(levels
                .iter()
                .map(|&u| {
                    (0..leaf_count)
                        .map(|m| {
                            let (f, idx) = match coupling {
                                Coupling::Shared => (&fields[0], &maps[0][m]),
                                Coupling::Independent => (&fields[m], &maps[m][0]),
                            };
                            let mut sigma = BitSet::new(idx.len());
                            for (i, &a) in idx.iter().enumerate() {
                                if f.labels[a] <= u {
                                    sigma.set(i, true);
                                }
                            }
                            dets[m].eval(&sigma)
                        })
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let at = |lv: usize| LevelStats {
        inter: rows.iter().map(|r| r[lv].iter().all(|&b| b)).collect(),
        leaves: (0..leaf_count).map(|m| rows.iter().map(|r| r[lv][m]).collect()).collect(),
    };
    let (s0, sn, si) = (at(0), at(1), at(2));
    let marginals_u0 = s0.marginals();
    let (_, _, law_gap) = s0.product_and_gap(0.0);
    // LHS at u_n against RHS built from the u0 marginals; both from the same trials.
    let mut lhs_m = Moments::default();
    sn.inter.iter().for_each(|&b| lhs_m.push(b as u8 as f64));
    let lhs = Estimate { value: lhs_m.mean(), se: lhs_m.std_err() };
    let (_, rhs, _) = s0.product_and_gap(eps);
    let mut diff = Moments::default();
    {
        let q: Vec<f64> = marginals_u0.iter().map(|p| p + eps).collect();
        let w: Vec<f64> = (0..q.len()).map(|m| q.iter().enumerate().filter(|(j, _)| *j != m).map(|(_, v)| v).product()).collect();
        for r in 0..trials as usize {
            let lin: f64 = s0.leaves.iter().zip(&w).map(|(l, w)| w * l[r] as u8 as f64).sum();
            diff.push(sn.inter[r] as u8 as f64 - lin);
        }
    }
    let d = lhs.value - rhs.value;
    let dse = diff.std_err();
    let verdict = if d - 3.0 * dse > 0.0 {
        Verdict::Violated
    } else if d + 3.0 * dse <= 0.0 {
        Verdict::Holds
    } else {
        Verdict::Inconclusive
    };
    let (fkg_intersection, fkg_product, fkg_gap) = si.product_and_gap(0.0);
    let bias_bound = samplers.iter().map(|s| s.bias_bound(u_max)).try_fold(0.0, |a, b| b.map(|b| a + b));
    Ok(DecouplingReport {
        family,
        coupling,
        mode,
        depth: n,
        trials,
        u0: schedule.u0,
        u_n,
        u_inf,
        epsilon: eps,
        lhs,
        rhs,
        verdict,
        fkg_intersection,
        fkg_product,
        fkg_violated: fkg_gap.value + 3.0 * fkg_gap.se < 0.0,
        product_law_z: if law_gap.se > 0.0 { law_gap.value / law_gap.se } else { 0.0 },
        marginals_u0,
        truncation_radius: cfg.truncation_radius,
        bias_bound,
    })
}

/// The first embedding of the cover expansion, for quick runs.
pub fn auto_embedding<T: Scalar>(
    g: &WeightedGraph<T>,
    family: Family,
    x: SiteId,
    n: u32,
    ladder: &ScaleLadder,
    plane: Option<&HalfPlane>,
) -> Result<TreeEmbedding> {
    expand_tree(g, family, x, n, ladder, plane)?
        .next()
        .unwrap_or_else(|| geometry("cover expansion produced no embedding"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExcursionSpectrum {
    /// `counts[l]`: trajectories with exactly `l` complete excursions.
    pub counts: Vec<u64>,
    pub trajectories: u64,
    /// Trajectories with at least one excursion.
    pub hitting: u64,
    pub total_excursions: u64,
    /// Geometric ratio of successive counts (MLE) and its standard error.
    pub ratio: f64,
    pub ratio_se: f64,
    /// Fewer than 10 trajectories made a second excursion.
    pub sparse: bool,
}

impl ExcursionSpectrum {
    /// Fitted `c` in `ratio = c cap(W) / R_U^nu`.
    pub fn beta_constant(&self, cap_w: f64, r_u: f64, nu: f64) -> f64 {
        self.ratio * r_u.powf(nu) / cap_w
    }
}

/// Complete `W -> ∂U` excursions per trajectory of `sample`. Leaving the
/// truncation ball counts as a departure from `U`.
pub fn excursion_spectrum(sample: &InterlacementSample, w: &SiteSet, u: &SiteSet) -> Result<ExcursionSpectrum> {
    if !w.is_subset(u) {
        return invalid("W must be contained in U");
    }
    if !w.is_subset(&sample.anchor) {
        return geometry("W must lie in the sample's anchor so that first visits are observed");
    }
    let mut counts: Vec<u64> = Vec::new();
    for t in &sample.trajectories {
        let e = excursions(t, &|x| w.contains(x), &|x| u.contains(x));
        let k = e.complete + (e.last_incomplete && t.stop_reason == StopReason::ExitedDomain) as usize;
        if counts.len() <= k {
            counts.resize(k + 1, 0);
        }
        counts[k] += 1;
    }
    let hitting: u64 = counts.iter().skip(1).sum();
    let total: u64 = counts.iter().enumerate().map(|(k, c)| k as u64 * c).sum();
    let (ratio, ratio_se) = if total > 0 {
        let r = (total - hitting) as f64 / total as f64;
        // Fisher information of the geometric law on {1, 2, ...}.
        let se = if r > 0.0 { (r * (1.0 - r) * (1.0 - r) / hitting as f64).sqrt() } else { 0.0 };
        (r, se)
    } else {
        (0.0, f64::INFINITY)
    };
    let multi: u64 = counts.iter().skip(2).sum();
    Ok(ExcursionSpectrum {
        counts,
        trajectories: sample.trajectories.len() as u64,
        hitting,
        total_excursions: total,
        ratio,
        ratio_se,
        sparse: multi < 10,
    })
}

/// Proportion helper for reports.
pub fn event_rate(hits: u64, trials: u64) -> Proportion {
    Proportion::new(hits, trials)
}
