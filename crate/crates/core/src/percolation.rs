//! Configurations on windows, cluster labelling, and detectors for the
//! crossing (A), half-plane `*`-crossing (B) and separation (S) events.

use crate::bits::BitSet;
use crate::error::{geometry, invalid, Error, Result};
use crate::graphs::{BaseKind, HalfPlane, MetricKind, Region, SiteId, SiteSet, WeightedGraph};
use crate::interlacements::{InterlacementSampler, SamplerConfig};
use crate::scalar::Scalar;
use crate::stats::{Moments, Proportion};
use crate::walk::task_rng;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// `sigma` on a window; `true` means occupied.
#[derive(Clone, Debug)]
pub struct Configuration {
    pub window: Region,
    pub sigma: BitSet,
}

impl Configuration {
    pub fn new<T: Scalar>(g: &WeightedGraph<T>, window: Region, sigma: BitSet) -> Result<Self> {
        if sigma.len() != window.len() {
            return invalid(format!("configuration has {} values for a window of {} sites", sigma.len(), window.len()));
        }
        Ok(Configuration { window: window.indexed(g.base.len()), sigma })
    }

    pub fn from_fn<T: Scalar>(g: &WeightedGraph<T>, window: Region, f: impl Fn(SiteId) -> bool) -> Self {
        let sigma = BitSet::from_fn(window.len(), |i| f(window.site(g, i)));
        Configuration { window: window.indexed(g.base.len()), sigma }
    }

    pub fn constant<T: Scalar>(g: &WeightedGraph<T>, window: Region, occupied: bool) -> Self {
        Self::from_fn(g, window, |_| occupied)
    }

    pub fn occupied<T: Scalar>(&self, g: &WeightedGraph<T>, x: SiteId) -> Option<bool> {
        self.window.local(g, x).map(|i| self.sigma.get(i))
    }

    pub fn sites<T: Scalar>(&self, g: &WeightedGraph<T>) -> SiteSet {
        self.window.sites(g)
    }

    pub fn vacant_sites<T: Scalar>(&self, g: &WeightedGraph<T>) -> SiteSet {
        SiteSet::from_sorted((0..self.window.len()).filter(|&i| !self.sigma.get(i)).map(|i| self.window.site(g, i)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjacency {
    Graph,
    Star,
}

#[derive(Clone, Debug)]
pub struct ClusterLabeling {
    pub sites: SiteSet,
    /// Component id per site, ids numbered by first appearance.
    pub ids: Vec<u32>,
    pub count: usize,
}

fn find(p: &mut [u32], mut a: u32) -> u32 {
    while p[a as usize] != a {
        p[a as usize] = p[p[a as usize] as usize];
        a = p[a as usize];
    }
    a
}

/// Connected components of `sites` under graph or plane `*`-adjacency.
pub fn clusters<T: Scalar>(
    g: &WeightedGraph<T>,
    sites: &SiteSet,
    mode: Adjacency,
    plane: Option<&HalfPlane>,
) -> Result<ClusterLabeling> {
    let plane = match (mode, plane) {
        (Adjacency::Star, None) => return invalid("star adjacency needs a half-plane"),
        (_, p) => p,
    };
    let n = sites.len();
    let mut parent: Vec<u32> = (0..n as u32).collect();
    for (i, x) in sites.iter().enumerate() {
        let nb: Vec<SiteId> = match mode {
            Adjacency::Graph => g.neighbors(x).map(|(w, _)| w).collect(),
            Adjacency::Star => plane.unwrap().star_neighbors(g, x),
        };
        for w in nb {
            if let Some(j) = sites.index_of(w) {
                let (a, b) = (find(&mut parent, i as u32), find(&mut parent, j as u32));
                if a != b {
                    parent[a.max(b) as usize] = a.min(b);
                }
            }
        }
    }
    let mut remap = vec![u32::MAX; n];
    let mut ids = Vec::with_capacity(n);
    let mut count = 0;
    for i in 0..n {
        let r = find(&mut parent, i as u32) as usize;
        if remap[r] == u32::MAX {
            remap[r] = count;
            count += 1;
        }
        ids.push(remap[r]);
    }
    Ok(ClusterLabeling { sites: sites.clone(), ids, count: count as usize })
}

/// Base adjacency of a region in local positions, with interior-boundary flags.
struct Domain {
    region: Region,
    adj: Vec<Vec<u32>>,
    /// Base position has a neighbour outside the region (or lies on the window edge).
    open: Vec<bool>,
}

impl Domain {
    fn new<T: Scalar>(g: &WeightedGraph<T>, region: Region) -> Self {
        let region = region.indexed(g.base.len());
        let pos = |y: u32| region.base.binary_search(&y).ok();
        let mut adj = Vec::with_capacity(region.base.len());
        let mut open = Vec::with_capacity(region.base.len());
        for &y in &region.base {
            let mut a = Vec::new();
            let mut o = !g.base.is_complete(y);
            for (w, _) in g.base.neighbors(y) {
                match pos(w) {
                    Some(p) => a.push(p as u32),
                    None => o = true,
                }
            }
            adj.push(a);
            open.push(o);
        }
        Domain { region, adj, open }
    }

    fn len(&self) -> usize {
        self.region.len()
    }

    #[inline]
    fn neighbors(&self, i: usize, out: &mut Vec<usize>) {
        out.clear();
        let h = self.region.height();
        let (p, zi) = (i / h, i % h);
        out.extend(self.adj[p].iter().map(|&q| q as usize * h + zi));
        if zi > 0 {
            out.push(i - 1);
        }
        if zi + 1 < h {
            out.push(i + 1);
        }
    }

    /// `∂_int`: some graph neighbour lies outside the region.
    #[inline]
    fn on_boundary(&self, i: usize) -> bool {
        let h = self.region.height();
        let zi = i % h;
        self.open[i / h] || zi == 0 || zi + 1 == h
    }
}

/// Local index map from a domain to a configuration window.
fn window_map<T: Scalar>(g: &WeightedGraph<T>, dom: &Region, win: &Region) -> Result<Vec<u32>> {
    if dom.z_lo < win.z_lo || dom.z_hi > win.z_hi {
        return geometry("event domain is not contained in the configuration window");
    }
    let mut m = Vec::with_capacity(dom.len());
    for i in 0..dom.len() {
        let x = dom.site(g, i);
        let j = win.local(g, x).ok_or_else(|| Error::Geometry("event domain is not contained in the configuration window".into()))?;
        m.push(j as u32);
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    A,
    B,
    S,
}

impl Family {
    /// Radius of the ball the event depends on, in units of `L`.
    pub fn reach(self) -> u32 {
        match self {
            Family::A | Family::B => 2,
            Family::S => 5,
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug)]
pub struct EventSpec {
    pub family: Family,
    pub x: SiteId,
    pub l: u32,
    pub plane: Option<HalfPlane>,
}

/// `B(x, r) ∩ P` as a region.
pub fn plane_region<T: Scalar>(g: &WeightedGraph<T>, plane: &HalfPlane, x: SiteId, r: f64) -> Result<Region> {
    let ball = g.ball(x, r)?;
    let base: Vec<u32> = plane.ray.iter().copied().filter(|y| ball.region.base.binary_search(y).is_ok()).collect();
    let (zlo, zhi) = (ball.region.z_lo.max(plane.z_lo), ball.region.z_hi.min(plane.z_hi));
    if base.is_empty() || zlo > zhi {
        return geometry("ball does not meet the half-plane");
    }
    Ok(Region::new(base, zlo, zhi))
}

/// The region an event reads: `B(x, reach L)`, or its trace on the plane for `B`.
pub fn event_window<T: Scalar>(g: &WeightedGraph<T>, spec: &EventSpec) -> Result<Region> {
    let r = (spec.family.reach() * spec.l) as f64;
    match spec.family {
        Family::B => {
            let plane = spec.plane.as_ref().ok_or_else(|| Error::InvalidArgument("family B needs a half-plane".into()))?;
            if !plane.contains(g, spec.x) {
                return invalid("family B anchor must lie in the half-plane");
            }
            plane_region(g, plane, spec.x, r)
        }
        _ => Ok(g.ball(spec.x, r)?.region),
    }
}

/// Witness of the separation event: two vacant pieces of diameter `>= L` in
/// distinct vacant components of `B(x, 5L)`.
#[derive(Clone, Debug)]
pub struct SWitness {
    pub pieces: [Vec<SiteId>; 2],
    /// A diameter was only bounded from below.
    pub approximate: bool,
}

/// `true` if the d-diameter of `sites` is at least `l`; second value flags a
/// lower-bound computation.
pub fn diameter_at_least<T: Scalar>(g: &WeightedGraph<T>, sites: &[SiteId], l: f64) -> (bool, bool) {
    if sites.is_empty() {
        return (false, false);
    }
    let (zmin, zmax) = sites.iter().fold((i64::MAX, i64::MIN), |(a, b), &x| {
        let z = g.z_of(x);
        (a.min(z), b.max(z))
    });
    if g.metric.z_term(zmax - zmin) >= l - 1e-9 {
        return (true, false);
    }
    let mut ys: Vec<u32> = sites.iter().map(|&x| g.base_of(x)).collect();
    ys.sort_unstable();
    ys.dedup();
    let need = (l - 1e-9).ceil().max(0.0) as u32;
    match g.base.kind {
        BaseKind::Point => (false, false),
        BaseKind::Lattice { d, .. } => {
            let diam = if g.metric.kind == MetricKind::SupNorm {
                (0..d)
                    .map(|k| {
                        let (lo, hi) = ys.iter().fold((i32::MAX, i32::MIN), |(a, b), &y| {
                            let c = g.base.coords(y)[k];
                            (a.min(c), b.max(c))
                        });
                        (hi - lo) as u32
                    })
                    .max()
                    .unwrap_or(0)
            } else {
                // l1 diameter: max over sign patterns of the spread of s.c.
                (0..1u32 << (d - 1))
                    .map(|mask| {
                        let (lo, hi) = ys.iter().fold((i64::MAX, i64::MIN), |(a, b), &y| {
                            let c = g.base.coords(y);
                            let v: i64 = c
                                .iter()
                                .enumerate()
                                .map(|(k, &ck)| if k > 0 && mask >> (k - 1) & 1 == 1 { -(ck as i64) } else { ck as i64 })
                                .sum();
                            (a.min(v), b.max(v))
                        });
                        (hi - lo) as u32
                    })
                    .max()
                    .unwrap_or(0)
            };
            (diam >= need, false)
        }
        BaseKind::Gasket { .. } => {
            // Double sweep first; all pairs only when it is inconclusive and small.
            let far = |a: u32| ys.iter().map(|&b| (g.base.dist(a, b), b)).max().unwrap();
            let (d1, b1) = far(ys[0]);
            let (d2, _) = far(b1);
            if d1.max(d2) >= need {
                return (true, false);
            }
            if ys.len() > 3000 {
                return (false, true);
            }
            let hit = ys.iter().enumerate().any(|(i, &a)| ys[i + 1..].iter().any(|&b| g.base.dist(a, b) >= need));
            (hit, false)
        }
    }
}

/// Precomputed geometry for evaluating one event on many configurations
/// over the same window.
pub struct Detector<'g, T: Scalar> {
    g: &'g WeightedGraph<T>,
    pub spec: EventSpec,
    kind: DetectorKind,
}

enum DetectorKind {
    /// x outside the plane for family B: the event is empty.
    Empty,
    A { dom: Domain, map: Vec<u32>, inner: Vec<usize> },
    B { cells: PlaneGrid, map: Vec<u32>, inner: Vec<usize>, boundary: Vec<bool> },
    S { dom: Domain, map: Vec<u32>, closure: Vec<bool> },
}

/// Plane trace of the event ball as a `width x height` grid, z inner.
struct PlaneGrid {
    width: usize,
    height: usize,
    /// Cell is inside the event ball.
    inside: Vec<bool>,
}

impl PlaneGrid {
    fn star(&self, i: usize, out: &mut Vec<usize>) {
        out.clear();
        let (a, b) = ((i / self.height) as i64, (i % self.height) as i64);
        for da in -1..=1 {
            for db in -1..=1 {
                let (p, q) = (a + da, b + db);
                if (da, db) != (0, 0) && p >= 0 && q >= 0 && (p as usize) < self.width && (q as usize) < self.height {
                    let j = p as usize * self.height + q as usize;
                    if self.inside[j] {
                        out.push(j);
                    }
                }
            }
        }
    }
}

impl<'g, T: Scalar> Detector<'g, T> {
    pub fn new(g: &'g WeightedGraph<T>, spec: &EventSpec, window: &Region) -> Result<Self> {
        if spec.l == 0 {
            return invalid("scale L must be positive");
        }
        let l = spec.l as f64;
        let window = window.clone().indexed(g.base.len());
        let kind = match spec.family {
            Family::A => {
                let dom = Domain::new(g, g.ball(spec.x, 2.0 * l)?.region);
                let map = window_map(g, &dom.region, &window)?;
                let inner = g.ball(spec.x, l)?.region.sites(g).iter().map(|s| dom.region.local(g, s).unwrap()).collect();
                DetectorKind::A { dom, map, inner }
            }
            Family::S => {
                let dom = Domain::new(g, g.ball(spec.x, 5.0 * l)?.region);
                let map = window_map(g, &dom.region, &window)?;
                let b3 = g.ball(spec.x, 3.0 * l)?.region.indexed(g.base.len());
                let in3: Vec<bool> = (0..dom.len()).map(|i| b3.contains(g, dom.region.site(g, i))).collect();
                let mut closure = in3.clone();
                let mut nb = Vec::new();
                for i in 0..dom.len() {
                    if in3[i] {
                        if dom.on_boundary(i) {
                            return geometry("closure of B(x,3L) is not inside B(x,5L)");
                        }
                        dom.neighbors(i, &mut nb);
                        nb.iter().for_each(|&j| closure[j] = true);
                    }
                }
                DetectorKind::S { dom, map, closure }
            }
            Family::B => {
                let plane = spec.plane.as_ref().ok_or_else(|| Error::InvalidArgument("family B needs a half-plane".into()))?;
                let Some((n0, z0)) = plane.coords(g, spec.x) else {
                    return Ok(Detector { g, spec: spec.clone(), kind: DetectorKind::Empty });
                };
                let ball2 = Domain::new(g, g.ball(spec.x, 2.0 * l)?.region);
                let ball1 = g.ball(spec.x, l)?.region.indexed(g.base.len());
                let r = 2 * spec.l;
                let n_lo = n0.saturating_sub(r);
                let n_hi = n0 + r;
                if n_hi as usize >= plane.ray.len() {
                    return geometry("half-plane ray too short for the event ball");
                }
                let zr = g.metric.z_reach(2.0 * l);
                let (z_lo, z_hi) = ((z0 - zr).max(plane.z_lo), (z0 + zr).min(plane.z_hi));
                let (width, height) = ((n_hi - n_lo + 1) as usize, (z_hi - z_lo + 1) as usize);
                let mut inside = Vec::with_capacity(width * height);
                let mut boundary = Vec::with_capacity(width * height);
                let mut inner = Vec::new();
                let mut map = Vec::with_capacity(width * height);
                for a in 0..width {
                    for b in 0..height {
                        let s = plane.site(g, n_lo + a as u32, z_lo + b as i64).expect("plane cell");
                        let loc = ball2.region.local(g, s);
                        inside.push(loc.is_some());
                        boundary.push(loc.is_some_and(|i| ball2.on_boundary(i)));
                        if loc.is_some() {
                            if ball1.contains(g, s) {
                                inner.push(a * height + b);
                            }
                            let j = window.local(g, s).ok_or_else(|| {
                                Error::Geometry("plane trace of the event ball is not inside the configuration window".into())
                            })?;
                            map.push(j as u32);
                        } else {
                            map.push(u32::MAX);
                        }
                    }
                }
                DetectorKind::B { cells: PlaneGrid { width, height, inside }, map, inner, boundary }
            }
        };
        Ok(Detector { g, spec: spec.clone(), kind })
    }

    /// Evaluate on `sigma`, a bitset in the window's local order.
    pub fn eval(&self, sigma: &BitSet) -> bool {
        match &self.kind {
            DetectorKind::Empty => false,
            DetectorKind::A { dom, map, inner } => {
                let vacant = |i: usize| !sigma.get(map[i] as usize);
                let mut seen = vec![false; dom.len()];
                let mut q: VecDeque<usize> = VecDeque::new();
                for &i in inner {
                    if vacant(i) {
                        seen[i] = true;
                        q.push_back(i);
                    }
                }
                let mut nb = Vec::new();
                while let Some(i) = q.pop_front() {
                    if dom.on_boundary(i) {
                        return true;
                    }
                    dom.neighbors(i, &mut nb);
                    for &j in &nb {
                        if !seen[j] && vacant(j) {
                            seen[j] = true;
                            q.push_back(j);
                        }
                    }
                }
                false
            }
            DetectorKind::B { cells, map, inner, boundary } => {
                let occ = |i: usize| sigma.get(map[i] as usize);
                let mut seen = vec![false; cells.inside.len()];
                let mut q: VecDeque<usize> = VecDeque::new();
                for &i in inner {
                    if occ(i) {
                        seen[i] = true;
                        q.push_back(i);
                    }
                }
                let mut nb = Vec::new();
                while let Some(i) = q.pop_front() {
                    if boundary[i] {
                        return true;
                    }
                    cells.star(i, &mut nb);
                    for &j in &nb {
                        if !seen[j] && occ(j) {
                            seen[j] = true;
                            q.push_back(j);
                        }
                    }
                }
                false
            }
            DetectorKind::S { .. } => self.s_witness(sigma).is_some(),
        }
    }

    /// Witness pieces for family S, `None` for other families or no witness.
    pub fn s_witness(&self, sigma: &BitSet) -> Option<SWitness> {
        let DetectorKind::S { dom, map, closure } = &self.kind else {
            return None;
        };
        let vacant = |i: usize| !sigma.get(map[i] as usize);
        let n = dom.len();
        let mut comp = vec![u32::MAX; n];
        let mut nb = Vec::new();
        let mut ncomp = 0u32;
        let mut q = VecDeque::new();
        for s in 0..n {
            if comp[s] != u32::MAX || !vacant(s) {
                continue;
            }
            comp[s] = ncomp;
            q.push_back(s);
            while let Some(i) = q.pop_front() {
                dom.neighbors(i, &mut nb);
                for &j in &nb {
                    if comp[j] == u32::MAX && vacant(j) {
                        comp[j] = ncomp;
                        q.push_back(j);
                    }
                }
            }
            ncomp += 1;
        }
        // Pieces: components of (vacant component) ∩ closure.
        let mut piece_seen = vec![false; n];
        let mut found: Vec<(u32, Vec<SiteId>)> = Vec::new();
        let mut approximate = false;
        let l = self.spec.l as f64;
        for s in 0..n {
            if piece_seen[s] || !closure[s] || comp[s] == u32::MAX {
                continue;
            }
            let c = comp[s];
            if found.iter().any(|(fc, _)| *fc == c) {
                continue;
            }
            let mut piece = vec![s];
            piece_seen[s] = true;
            let mut k = 0;
            while k < piece.len() {
                let i = piece[k];
                k += 1;
                dom.neighbors(i, &mut nb);
                for &j in &nb {
                    if !piece_seen[j] && closure[j] && comp[j] == c {
                        piece_seen[j] = true;
                        piece.push(j);
                    }
                }
            }
            let sites: Vec<SiteId> = piece.iter().map(|&i| dom.region.site(self.g, i)).collect();
            let (ok, approx) = diameter_at_least(self.g, &sites, l);
            approximate |= approx;
            if ok {
                found.push((c, sites));
                if found.len() == 2 {
                    let b = found.pop().unwrap().1;
                    let a = found.pop().unwrap().1;
                    return Some(SWitness { pieces: [a, b], approximate });
                }
            }
        }
        None
    }
}

pub fn event_a<T: Scalar>(g: &WeightedGraph<T>, cfg: &Configuration, x: SiteId, l: u32) -> Result<bool> {
    let spec = EventSpec { family: Family::A, x, l, plane: None };
    Ok(Detector::new(g, &spec, &cfg.window)?.eval(&cfg.sigma))
}

pub fn event_b<T: Scalar>(g: &WeightedGraph<T>, cfg: &Configuration, x: SiteId, l: u32, plane: &HalfPlane) -> Result<bool> {
    let spec = EventSpec { family: Family::B, x, l, plane: Some(plane.clone()) };
    Ok(Detector::new(g, &spec, &cfg.window)?.eval(&cfg.sigma))
}

pub fn event_s<T: Scalar>(g: &WeightedGraph<T>, cfg: &Configuration, x: SiteId, l: u32) -> Result<bool> {
    Ok(event_s_witness(g, cfg, x, l)?.is_some())
}

pub fn event_s_witness<T: Scalar>(g: &WeightedGraph<T>, cfg: &Configuration, x: SiteId, l: u32) -> Result<Option<SWitness>> {
    let spec = EventSpec { family: Family::S, x, l, plane: None };
    Ok(Detector::new(g, &spec, &cfg.window)?.s_witness(&cfg.sigma))
}

/// One CSV row of an event-probability estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossingEstimate {
    pub family: Family,
    pub x: SiteId,
    #[serde(rename = "L")]
    pub l: u32,
    pub u: f64,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub trials: u64,
    pub invalid_trials: u64,
}

impl CrossingEstimate {
    fn from_counts(spec: &EventSpec, u: f64, p: Proportion, invalid: u64) -> Self {
        let (lo, hi) = p.ci95();
        CrossingEstimate {
            family: spec.family,
            x: spec.x,
            l: spec.l,
            u,
            estimate: p.estimate(),
            ci_lo: lo,
            ci_hi: hi,
            trials: p.trials,
            invalid_trials: invalid,
        }
    }

    pub fn proportion(&self) -> Proportion {
        Proportion::new((self.estimate * self.trials as f64).round() as u64, self.trials)
    }
}

/// Event probabilities under `I^u` at every level in `us`, one labelled sample per trial.
pub fn crossing_prob<T: Scalar>(
    g: &WeightedGraph<T>,
    spec: &EventSpec,
    us: &[f64],
    trials: u64,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<Vec<CrossingEstimate>> {
    if trials == 0 {
        return invalid("trials must be positive");
    }
    if us.iter().any(|u| !(*u >= 0.0)) {
        return invalid("levels must be >= 0");
    }
    let window = event_window(g, spec)?.indexed(g.base.len());
    let det = Detector::new(g, spec, &window)?;
    let anchor = window.sites(g);
    let sampler = InterlacementSampler::new(g, &anchor, spec.x, cfg)?;
    let u_max = us.iter().cloned().fold(0.0, f64::max);
    let counts = (0..trials)
        .into_par_iter()
        .map(|r| -> Result<Vec<u64>> {
            let f = sampler.min_labels(u_max, &mut task_rng(seed, r))?;
            us.iter().map(|&u| Ok(det.eval(&f.occupied(u)?) as u64)).collect()
        })
        .try_reduce(|| vec![0; us.len()], |a, b| Ok(a.iter().zip(&b).map(|(p, q)| p + q).collect()))?;
    Ok(us
        .iter()
        .zip(counts)
        .map(|(&u, c)| CrossingEstimate::from_counts(spec, u, Proportion::new(c, trials), 0))
        .collect())
}

/// Plane neighbours of local index `i` of a plane region (ray order, z inner).
fn plane_neighbors(width: usize, height: usize, i: usize, out: &mut Vec<usize>) {
    out.clear();
    let (a, b) = (i / height, i % height);
    if a > 0 {
        out.push(i - height);
    }
    if a + 1 < width {
        out.push(i + height);
    }
    if b > 0 {
        out.push(i - 1);
    }
    if b + 1 < height {
        out.push(i + 1);
    }
}

/// Trace `[n_lo, n_hi] x [z_lo, z_hi]` of the analysis window on the plane, in plane order.
struct PlaneWindow {
    n_lo: u32,
    n_hi: u32,
    z_lo: i64,
    z_hi: i64,
    sites: Vec<SiteId>,
}

impl PlaneWindow {
    fn new<T: Scalar>(g: &WeightedGraph<T>, plane: &HalfPlane, x: SiteId, r: f64) -> Result<Self> {
        let (n0, z0) = plane.coords(g, x).ok_or_else(|| Error::InvalidArgument("x must lie in the half-plane".into()))?;
        let rg = r.floor() as u32;
        let zr = g.metric.z_reach(r);
        let (n_lo, n_hi) = (n0.saturating_sub(rg), n0 + rg);
        let (z_lo, z_hi) = (z0 - zr, z0 + zr);
        if n_hi as usize >= plane.ray.len() || z_lo < plane.z_lo || z_hi > plane.z_hi {
            return geometry("analysis window does not fit in the half-plane");
        }
        let mut sites = Vec::new();
        for n in n_lo..=n_hi {
            for z in z_lo..=z_hi {
                sites.push(plane.site(g, n, z).ok_or_else(|| Error::Geometry("half-plane leaves the window".into()))?);
            }
        }
        Ok(PlaneWindow { n_lo, n_hi, z_lo, z_hi, sites })
    }

    fn width(&self) -> usize {
        (self.n_hi - self.n_lo + 1) as usize
    }

    fn height(&self) -> usize {
        (self.z_hi - self.z_lo + 1) as usize
    }

    /// Window edge cells; the ray's own start is the plane's edge, not the window's.
    fn is_edge(&self, i: usize) -> bool {
        let (a, b) = (i / self.height(), i % self.height());
        (a == 0 && self.n_lo > 0) || a + 1 == self.width() || b == 0 || b + 1 == self.height()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailEstimate {
    pub u: f64,
    #[serde(rename = "L")]
    pub l: u32,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub valid_trials: u64,
    pub invalid_trials: u64,
}

/// `P[x vacant, its vacant plane cluster is finite and meets ∂_int B(x, L)]`.
/// Clusters touching the edge of the analysis window `B(x, window_radius) ∩ P`
/// make the trial invalid; with no valid trials the estimate is 0.
#[allow(clippy::too_many_arguments)]
pub fn cluster_tail<T: Scalar>(
    g: &WeightedGraph<T>,
    plane: &HalfPlane,
    x: SiteId,
    l: u32,
    window_radius: f64,
    us: &[f64],
    trials: u64,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<Vec<TailEstimate>> {
    if trials == 0 || l == 0 {
        return invalid("trials and L must be positive");
    }
    if window_radius <= l as f64 {
        return invalid("analysis window must be larger than B(x, L)");
    }
    let pw = PlaneWindow::new(g, plane, x, window_radius)?;
    let ball = Domain::new(g, g.ball(x, l as f64)?.region);
    let target: Vec<bool> = pw.sites.iter().map(|&s| ball.region.local(g, s).is_some_and(|i| ball.on_boundary(i))).collect();
    let anchor: SiteSet = pw.sites.iter().copied().collect();
    let order: Vec<usize> = pw.sites.iter().map(|&s| anchor.index_of(s).unwrap()).collect();
    let sampler = InterlacementSampler::new(g, &anchor, x, cfg)?;
    let x_cell = pw.sites.iter().position(|&s| s == x).unwrap();
    let (w, h) = (pw.width(), pw.height());
    let u_max = us.iter().cloned().fold(0.0, f64::max);
    // Per level: (successes, valid, invalid).
    let tally = (0..trials)
        .into_par_iter()
        .map(|r| -> Result<Vec<[u64; 3]>> {
            let f = sampler.min_labels(u_max, &mut task_rng(seed, r))?;
            Ok(us
                .iter()
                .map(|&u| {
                    let vacant = |i: usize| f.labels[order[i]] > u;
                    if !vacant(x_cell) {
                        return [0, 1, 0];
                    }
                    let mut seen = vec![false; w * h];
                    seen[x_cell] = true;
                    let mut stack = vec![x_cell];
                    let (mut meets, mut edge) = (false, false);
                    let mut nb = Vec::new();
                    while let Some(i) = stack.pop() {
                        meets |= target[i];
                        if pw.is_edge(i) {
                            edge = true;
                            break;
                        }
                        plane_neighbors(w, h, i, &mut nb);
                        for &j in &nb {
                            if !seen[j] && vacant(j) {
                                seen[j] = true;
                                stack.push(j);
                            }
                        }
                    }
                    if edge {
                        [0, 0, 1]
                    } else {
                        [meets as u64, 1, 0]
                    }
                })
                .collect())
        })
        .try_reduce(
            || vec![[0; 3]; us.len()],
            |a, b| Ok(a.iter().zip(&b).map(|(p, q)| [p[0] + q[0], p[1] + q[1], p[2] + q[2]]).collect()),
        )?;
    Ok(us
        .iter()
        .zip(tally)
        .map(|(&u, [s, v, inv])| {
            let p = Proportion::new(s, v);
            let (lo, hi) = if v == 0 { (0.0, 1.0) } else { p.ci95() };
            TailEstimate { u, l, estimate: p.estimate(), ci_lo: lo, ci_hi: hi, valid_trials: v, invalid_trials: inv }
        })
        .collect())
}

/// `M = [beta / nu]`, the number of walks in the walk-union bound.
pub fn walk_union_count<T: Scalar>(g: &WeightedGraph<T>) -> usize {
    (g.metric.beta / g.metric.nu() + 1e-9).floor() as usize
}

/// `m` random sites of `∂_int B(x, 20 L)`.
pub fn walk_union_starts<T: Scalar>(g: &WeightedGraph<T>, x: SiteId, l: u32, m: usize, seed: u64) -> Result<Vec<SiteId>> {
    let dom = Domain::new(g, g.ball(x, 20.0 * l as f64)?.region);
    let shell: Vec<usize> = (0..dom.len()).filter(|&i| dom.on_boundary(i)).collect();
    let mut rng = task_rng(seed, 0);
    Ok((0..m).map(|_| dom.region.site(g, shell[rng.gen_range(0..shell.len())])).collect())
}

/// `P[union of the ranges of independent walks from `starts` realizes the event]`.
/// Walks stop on leaving `B(x, truncation_radius)`.
pub fn walk_union_event_prob<T: Scalar>(
    g: &WeightedGraph<T>,
    m: usize,
    starts: &[SiteId],
    spec: &EventSpec,
    truncation_radius: f64,
    trials: u64,
    seed: u64,
) -> Result<Proportion> {
    if starts.len() != m {
        return invalid(format!("expected {m} start sites, got {}", starts.len()));
    }
    if trials == 0 {
        return invalid("trials must be positive");
    }
    let far = 20.0 * spec.l as f64;
    if truncation_radius <= far {
        return invalid("truncation radius must exceed 20 L");
    }
    let shell = Domain::new(g, g.ball(spec.x, far)?.region);
    for &s in starts {
        if !shell.region.local(g, s).is_some_and(|i| shell.on_boundary(i)) {
            return geometry(format!("start site {s} is not on the interior boundary of B(x, 20L)"));
        }
    }
    let window = event_window(g, spec)?.indexed(g.base.len());
    let det = Detector::new(g, spec, &window)?;
    let trunc = g.ball(spec.x, truncation_radius)?.region.indexed(g.base.len());
    if !trunc.all_complete(g) {
        return geometry("walk truncation ball has no margin inside the window");
    }
    let hits = (0..trials)
        .into_par_iter()
        .map(|r| {
            let mut rng = task_rng(seed, r);
            let mut sigma = BitSet::new(window.len());
            for &s in starts {
                let mut x = s;
                while trunc.contains(g, x) {
                    if let Some(i) = window.local(g, x) {
                        sigma.set(i, true);
                    }
                    x = g.step_unchecked(x, &mut rng);
                }
            }
            det.eval(&sigma) as u64
        })
        .sum();
    Ok(Proportion::new(hits, trials))
}

/// Rectangle `D = W x J` of a half-plane: ray positions `n_lo..=n_hi`, heights `z_lo..=z_hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rectangle {
    pub n_lo: u32,
    pub n_hi: u32,
    pub z_lo: i64,
    pub z_hi: i64,
}

impl Rectangle {
    pub fn width(&self) -> usize {
        (self.n_hi - self.n_lo + 1) as usize
    }

    pub fn height(&self) -> usize {
        (self.z_hi - self.z_lo + 1) as usize
    }
}

/// `H = [(L / log L)^{beta/2}]`.
pub fn segment_height(l: u32, beta: f64) -> u32 {
    let lf = l as f64;
    (lf / lf.ln()).powf(beta / 2.0).floor() as u32
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StartReport {
    pub start: SiteId,
    /// `P_x[H_{J_y} < ∞]` per column of `W`.
    pub vertical: Vec<f64>,
    /// `P_x[H_{W_z} < ∞]` per row of `J`.
    pub horizontal: Vec<f64>,
    pub n_vert: f64,
    pub n_vert_se: f64,
    pub n_hor: f64,
    pub n_hor_se: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentReport {
    #[serde(rename = "L")]
    pub l: u32,
    pub h: u32,
    pub rect: Rectangle,
    pub truncation_radius: f64,
    pub starts: Vec<StartReport>,
    /// Sup over starts of the expected counts.
    pub n_vert: f64,
    pub n_vert_se: f64,
    pub n_hor: f64,
    pub n_hor_se: f64,
    /// Bound shapes without constants: `H^{2/b}(1 + log(L/H^{2/b}))/(1 + 1{a=b} log L)`
    /// and `H(1 + log(L/H^{2/b}))/log L`.
    pub vert_shape: f64,
    pub hor_shape: f64,
}

pub fn bound_shapes(l: u32, h: u32, alpha: f64, beta: f64) -> (f64, f64) {
    let (lf, hf) = (l as f64, h as f64);
    let h2 = hf.powf(2.0 / beta);
    let lg = 1.0 + (lf / h2).ln();
    let a_eq_b = if (alpha - beta).abs() < 1e-9 { lf.ln() } else { 0.0 };
    (h2 * lg / (1.0 + a_eq_b), hf * lg / lf.ln())
}

/// Hitting statistics of the vertical and horizontal segments of `rect` for
/// walks from each start, stopped on leaving `B(center, truncation_radius)`.
#[allow(clippy::too_many_arguments)]
pub fn segment_hit_probs<T: Scalar>(
    g: &WeightedGraph<T>,
    plane: &HalfPlane,
    rect: Rectangle,
    l: u32,
    starts: &[SiteId],
    truncation_radius: f64,
    trials: u64,
    seed: u64,
) -> Result<SegmentReport> {
    if rect.n_lo > rect.n_hi || rect.z_lo > rect.z_hi || rect.n_hi as usize >= plane.ray.len() {
        return invalid("malformed rectangle");
    }
    if rect.z_lo < plane.z_lo || rect.z_hi > plane.z_hi {
        return invalid("rectangle leaves the half-plane");
    }
    if trials == 0 || starts.is_empty() {
        return invalid("trials and starts must be nonempty");
    }
    let center = plane
        .site(g, (rect.n_lo + rect.n_hi) / 2, (rect.z_lo + rect.z_hi).div_euclid(2))
        .ok_or_else(|| Error::Geometry("rectangle outside the window".into()))?;
    let trunc = g.ball(center, truncation_radius)?.region.indexed(g.base.len());
    if !trunc.all_complete(g) {
        return geometry("walk truncation ball has no margin inside the window");
    }
    let (w, h) = (rect.width(), rect.height());
    let mut reports = Vec::new();
    for (si, &s) in starts.iter().enumerate() {
        if !trunc.contains(g, s) {
            return geometry(format!("start {s} outside the truncation ball"));
        }
        let (vc, hc, mv, mh) = (0..trials)
            .into_par_iter()
            .map(|r| {
                let mut rng = task_rng(seed, (si as u64) << 40 | r);
                let (mut cols, mut rows) = (vec![false; w], vec![false; h]);
                let mut x = s;
                while trunc.contains(g, x) {
                    if let Some((n, z)) = plane.coords(g, x) {
                        if n >= rect.n_lo && n <= rect.n_hi && z >= rect.z_lo && z <= rect.z_hi {
                            cols[(n - rect.n_lo) as usize] = true;
                            rows[(z - rect.z_lo) as usize] = true;
                        }
                    }
                    x = g.step_unchecked(x, &mut rng);
                }
                let (nv, nh) = (cols.iter().filter(|b| **b).count(), rows.iter().filter(|b| **b).count());
                let mut mv = Moments::default();
                let mut mh = Moments::default();
                mv.push(nv as f64);
                mh.push(nh as f64);
                (cols.iter().map(|b| *b as u64).collect::<Vec<_>>(), rows.iter().map(|b| *b as u64).collect::<Vec<_>>(), mv, mh)
            })
            .reduce(
                || (vec![0; w], vec![0; h], Moments::default(), Moments::default()),
                |a, b| {
                    (
                        a.0.iter().zip(&b.0).map(|(p, q)| p + q).collect(),
                        a.1.iter().zip(&b.1).map(|(p, q)| p + q).collect(),
                        a.2.merge(&b.2),
                        a.3.merge(&b.3),
                    )
                },
            );
        let t = trials as f64;
        reports.push(StartReport {
            start: s,
            vertical: vc.iter().map(|c| *c as f64 / t).collect(),
            horizontal: hc.iter().map(|c| *c as f64 / t).collect(),
            n_vert: mv.mean(),
            n_vert_se: mv.std_err(),
            n_hor: mh.mean(),
            n_hor_se: mh.std_err(),
        });
    }
    let best_v = reports.iter().max_by(|a, b| a.n_vert.total_cmp(&b.n_vert)).unwrap();
    let best_h = reports.iter().max_by(|a, b| a.n_hor.total_cmp(&b.n_hor)).unwrap();
    let (vert_shape, hor_shape) = bound_shapes(l, h as u32, g.metric.alpha, g.metric.beta);
    Ok(SegmentReport {
        l,
        h: h as u32,
        rect,
        truncation_radius,
        n_vert: best_v.n_vert,
        n_vert_se: best_v.n_vert_se,
        n_hor: best_h.n_hor,
        n_hor_se: best_h.n_hor_se,
        starts: reports,
        vert_shape,
        hor_shape,
    })
}
