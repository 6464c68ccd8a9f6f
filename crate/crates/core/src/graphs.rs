//! Weighted product graphs `E = G x Z`, their metric, balls, boundaries and half-planes.

use crate::error::{geometry, invalid, Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

pub type SiteId = u32;

const RADIUS_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphModel {
    /// `Z^d` restricted to the box `[-radius, radius]^d`.
    ZLattice { d: usize, radius: i64 },
    /// Level-`level` Sierpinski gasket skeleton with its origin corner at 0.
    GasketSkeleton { level: u32 },
    /// Single vertex; `Point x Z` is the degenerate line.
    Point,
    /// `base x {-z_extent..=z_extent}`.
    ProductWithZ { base: Box<GraphModel>, z_extent: i64 },
}

impl GraphModel {
    pub fn z_lattice(d: usize, radius: i64, z_extent: i64) -> Self {
        GraphModel::ProductWithZ { base: Box::new(GraphModel::ZLattice { d, radius }), z_extent }
    }

    pub fn gasket(level: u32, z_extent: i64) -> Self {
        GraphModel::ProductWithZ { base: Box::new(GraphModel::GasketSkeleton { level }), z_extent }
    }

    /// Default `(alpha, beta)` of the base graph.
    pub fn exponents(&self) -> (f64, f64) {
        match self {
            GraphModel::ZLattice { d, .. } => (*d as f64, 2.0),
            GraphModel::GasketSkeleton { .. } => (3f64.ln() / 2f64.ln(), 5f64.ln() / 2f64.ln()),
            GraphModel::Point => (0.0, 2.0),
            GraphModel::ProductWithZ { base, .. } => base.exponents(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            GraphModel::ZLattice { d, radius } => format!("z-lattice:d={d},r={radius}"),
            GraphModel::GasketSkeleton { level } => format!("gasket:level={level}"),
            GraphModel::Point => "point".into(),
            GraphModel::ProductWithZ { base, z_extent } => format!("{}xz:{z_extent}", base.label()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// `max(d_G, |dz|^(2/beta))`
    Anisotropic,
    /// `max(l_inf, |dz|)` on lattice bases only.
    SupNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub alpha: f64,
    pub beta: f64,
    pub kind: MetricKind,
}

impl MetricParams {
    pub fn nu(&self) -> f64 {
        self.alpha - self.beta / 2.0
    }

    /// Largest `|dz|` with `|dz|^(2/beta) <= r`.
    pub fn z_reach(&self, r: f64) -> i64 {
        if r < 0.0 {
            return -1;
        }
        match self.kind {
            MetricKind::Anisotropic => (r.powf(self.beta / 2.0) + RADIUS_EPS).floor() as i64,
            MetricKind::SupNorm => (r + RADIUS_EPS).floor() as i64,
        }
    }

    pub fn z_term(&self, dz: i64) -> f64 {
        let a = dz.unsigned_abs() as f64;
        match self.kind {
            MetricKind::Anisotropic => a.powf(2.0 / self.beta),
            MetricKind::SupNorm => a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 2.0 - 1e-12 && self.beta <= self.alpha + 1.0 + 1e-12) {
            return Err(Error::Constraint(format!(
                "beta must satisfy 2 <= beta <= alpha + 1 (got alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseKind {
    Lattice { d: usize, radius: i64 },
    Gasket { level: u32 },
    Point,
}

/// Base graph `G` in CSR form.
#[derive(Debug)]
pub struct BaseGraph<T> {
    pub kind: BaseKind,
    offsets: Vec<u32>,
    nbrs: Vec<u32>,
    weights: Vec<T>,
    /// Vertex measure on the infinite graph the window is cut from.
    measure: Vec<T>,
    complete: Vec<bool>,
    /// Lattice coordinates (`d` per vertex) or gasket triangular coordinates (2 per vertex).
    coords: Vec<i32>,
    unit_weights: bool,
    bfs: Vec<OnceLock<Arc<[u32]>>>,
}

impl<T: Scalar> Clone for BaseGraph<T> {
    fn clone(&self) -> Self {
        BaseGraph {
            kind: self.kind,
            offsets: self.offsets.clone(),
            nbrs: self.nbrs.clone(),
            weights: self.weights.clone(),
            measure: self.measure.clone(),
            complete: self.complete.clone(),
            coords: self.coords.clone(),
            unit_weights: self.unit_weights,
            bfs: (0..self.len()).map(|_| OnceLock::new()).collect(),
        }
    }
}

fn csr_from_edges<T: Scalar>(n: usize, edges: &[(u32, u32)]) -> (Vec<u32>, Vec<u32>, Vec<T>) {
    let mut deg = vec![0u32; n];
    for &(a, b) in edges {
        deg[a as usize] += 1;
        deg[b as usize] += 1;
    }
    let mut offsets = vec![0u32; n + 1];
    for i in 0..n {
        offsets[i + 1] = offsets[i] + deg[i];
    }
    let mut fill = offsets.clone();
    let mut nbrs = vec![0u32; offsets[n] as usize];
    for &(a, b) in edges {
        nbrs[fill[a as usize] as usize] = b;
        fill[a as usize] += 1;
        nbrs[fill[b as usize] as usize] = a;
        fill[b as usize] += 1;
    }
    for i in 0..n {
        nbrs[offsets[i] as usize..offsets[i + 1] as usize].sort_unstable();
    }
    let weights = vec![T::one(); nbrs.len()];
    (offsets, nbrs, weights)
}

impl<T: Scalar> BaseGraph<T> {
    pub fn lattice(d: usize, radius: i64) -> Result<Self> {
        if d == 0 || d > 4 {
            return Err(Error::UnsupportedModel(format!("z-lattice dimension {d} (supported 1..=4)")));
        }
        if radius < 1 {
            return invalid("lattice window radius must be >= 1");
        }
        let side = (2 * radius + 1) as usize;
        let n = side.checked_pow(d as u32).filter(|n| *n < u32::MAX as usize / 2).ok_or_else(|| {
            Error::InvalidArgument(format!("lattice window too large: d={d}, radius={radius}"))
        })?;
        let mut coords = vec![0i32; n * d];
        for i in 0..n {
            let mut r = i;
            for k in 0..d {
                coords[i * d + k] = (r % side) as i32 - radius as i32;
                r /= side;
            }
        }
        let mut edges = Vec::with_capacity(n * d);
        let mut stride = 1usize;
        for k in 0..d {
            for i in 0..n {
                if (coords[i * d + k] as i64) < radius {
                    edges.push((i as u32, (i + stride) as u32));
                }
            }
            stride *= side;
        }
        let (offsets, nbrs, weights) = csr_from_edges::<T>(n, &edges);
        let complete = (0..n)
            .map(|i| coords[i * d..(i + 1) * d].iter().all(|c| (*c as i64).abs() < radius))
            .collect();
        Ok(BaseGraph {
            kind: BaseKind::Lattice { d, radius },
            offsets,
            nbrs,
            weights,
            measure: vec![T::of(2.0 * d as f64); n],
            complete,
            coords,
            unit_weights: true,
            bfs: Vec::new(),
        })
    }

    pub fn gasket(level: u32) -> Result<Self> {
        if level > 12 {
            return Err(Error::InvalidArgument(format!("gasket level {level} too large (max 12)")));
        }
        let mut pts: Vec<(i32, i32)> = vec![(0, 0), (1, 0), (0, 1)];
        let mut edges: Vec<((i32, i32), (i32, i32))> = vec![((0, 0), (1, 0)), ((0, 0), (0, 1)), ((1, 0), (0, 1))];
        for k in 0..level {
            let s = 1i32 << k;
            let mut seen: HashSet<(i32, i32)> = pts.iter().copied().collect();
            let mut new_pts = pts.clone();
            let mut new_edges = edges.clone();
            for (da, db) in [(s, 0), (0, s)] {
                for &(a, b) in &pts {
                    if seen.insert((a + da, b + db)) {
                        new_pts.push((a + da, b + db));
                    }
                }
                for &((a1, b1), (a2, b2)) in &edges {
                    new_edges.push(((a1 + da, b1 + db), (a2 + da, b2 + db)));
                }
            }
            pts = new_pts;
            edges = new_edges;
        }
        pts.sort_by_key(|&(a, b)| (b, a));
        let id: HashMap<(i32, i32), u32> = pts.iter().enumerate().map(|(i, p)| (*p, i as u32)).collect();
        let mut edge_ids: Vec<(u32, u32)> = edges
            .iter()
            .map(|(p, q)| {
                let (i, j) = (id[p], id[q]);
                (i.min(j), i.max(j))
            })
            .collect();
        edge_ids.sort_unstable();
        edge_ids.dedup();
        let n = pts.len();
        let (offsets, nbrs, weights) = csr_from_edges::<T>(n, &edge_ids);
        let far = 1i32 << level;
        let complete = pts.iter().map(|&p| p != (far, 0) && p != (0, far)).collect();
        let measure = pts.iter().map(|&p| T::of(if p == (0, 0) { 2.0 } else { 4.0 })).collect();
        let coords = pts.iter().flat_map(|&(a, b)| [a, b]).collect();
        Ok(BaseGraph {
            kind: BaseKind::Gasket { level },
            offsets,
            nbrs,
            weights,
            measure,
            complete,
            coords,
            unit_weights: true,
            bfs: (0..n).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn point() -> Self {
        BaseGraph {
            kind: BaseKind::Point,
            offsets: vec![0, 0],
            nbrs: Vec::new(),
            weights: Vec::new(),
            measure: vec![T::zero()],
            complete: vec![true],
            coords: Vec::new(),
            unit_weights: true,
            bfs: vec![OnceLock::new()],
        }
    }

    /// Replace conductances by `w(y, y')`, which must be symmetric and positive.
    /// The vertex measure becomes the window row sum.
    pub fn reweight(&mut self, w: impl Fn(u32, u32) -> f64) -> Result<()> {
        for y in 0..self.len() as u32 {
            let (a, b) = self.range(y);
            for k in a..b {
                let v = w(y, self.nbrs[k]);
                if !(v > 0.0) || (v - w(self.nbrs[k], y)).abs() > 1e-12 * v {
                    return invalid("conductances must be positive and symmetric");
                }
                self.weights[k] = T::of(v);
            }
        }
        for y in 0..self.len() as u32 {
            let (a, b) = self.range(y);
            self.measure[y as usize] = self.weights[a..b].iter().copied().sum();
        }
        self.unit_weights = false;
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn range(&self, y: u32) -> (usize, usize) {
        (self.offsets[y as usize] as usize, self.offsets[y as usize + 1] as usize)
    }

    #[inline]
    pub fn neighbors(&self, y: u32) -> impl Iterator<Item = (u32, T)> + '_ {
        let (a, b) = self.range(y);
        self.nbrs[a..b].iter().copied().zip(self.weights[a..b].iter().copied())
    }

    #[inline]
    pub fn degree(&self, y: u32) -> usize {
        let (a, b) = self.range(y);
        b - a
    }

    #[inline]
    pub fn nbr_at(&self, y: u32, k: usize) -> u32 {
        self.nbrs[self.offsets[y as usize] as usize + k]
    }

    #[inline]
    pub fn measure(&self, y: u32) -> T {
        self.measure[y as usize]
    }

    #[inline]
    pub fn is_complete(&self, y: u32) -> bool {
        self.complete[y as usize]
    }

    pub fn num_edges(&self) -> usize {
        self.nbrs.len() / 2
    }

    pub fn coords(&self, y: u32) -> &[i32] {
        let k = self.coord_dim();
        &self.coords[y as usize * k..(y as usize + 1) * k]
    }

    fn coord_dim(&self) -> usize {
        match self.kind {
            BaseKind::Lattice { d, .. } => d,
            BaseKind::Gasket { .. } => 2,
            BaseKind::Point => 0,
        }
    }

    /// Vertex with the given coordinates, if inside the window.
    pub fn vertex_at(&self, c: &[i32]) -> Option<u32> {
        match self.kind {
            BaseKind::Lattice { d, radius } => {
                if c.len() != d || c.iter().any(|v| (*v as i64).abs() > radius) {
                    return None;
                }
                let side = 2 * radius + 1;
                let mut idx = 0i64;
                for k in (0..d).rev() {
                    idx = idx * side + (c[k] as i64 + radius);
                }
                Some(idx as u32)
            }
            BaseKind::Gasket { .. } => {
                if c.len() != 2 {
                    return None;
                }
                // Rows are stored in (b, a) order; binary search within the coordinate list.
                let key = (c[1], c[0]);
                let n = self.len();
                let (mut lo, mut hi) = (0usize, n);
                while lo < hi {
                    let mid = (lo + hi) / 2;
                    let m = (self.coords[2 * mid + 1], self.coords[2 * mid]);
                    if m < key {
                        lo = mid + 1;
                    } else {
                        hi = mid;
                    }
                }
                (lo < n && (self.coords[2 * lo + 1], self.coords[2 * lo]) == key).then_some(lo as u32)
            }
            BaseKind::Point => c.is_empty().then_some(0),
        }
    }

    /// Breadth-first distances from `y` within the window (`u32::MAX` if unreachable).
    pub fn bfs_from(&self, y: u32) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.len()];
        let mut q = VecDeque::new();
        dist[y as usize] = 0;
        q.push_back(y);
        while let Some(v) = q.pop_front() {
            let dv = dist[v as usize];
            for (w, _) in self.neighbors(v) {
                if dist[w as usize] == u32::MAX {
                    dist[w as usize] = dv + 1;
                    q.push_back(w);
                }
            }
        }
        dist
    }

    fn cached_bfs(&self, y: u32) -> Arc<[u32]> {
        self.bfs[y as usize].get_or_init(|| self.bfs_from(y).into()).clone()
    }

    /// Graph distance `d_G`.
    #[inline]
    pub fn dist(&self, a: u32, b: u32) -> u32 {
        match self.kind {
            BaseKind::Lattice { .. } => {
                self.coords(a).iter().zip(self.coords(b)).map(|(x, y)| (x - y).unsigned_abs()).sum()
            }
            BaseKind::Point => 0,
            BaseKind::Gasket { .. } => self.cached_bfs(a)[b as usize],
        }
    }

    fn dist_inf(&self, a: u32, b: u32) -> u32 {
        self.coords(a).iter().zip(self.coords(b)).map(|(x, y)| (x - y).unsigned_abs()).max().unwrap_or(0)
    }

    /// Sorted base vertices within distance `rg` of `c` (l_inf when `sup`), or `None` if the
    /// base ball is not entirely inside the window.
    fn ball_vertices(&self, c: u32, rg: u32, sup: bool) -> Option<Vec<u32>> {
        match self.kind {
            BaseKind::Lattice { d, radius } => {
                let cc = self.coords(c).to_vec();
                if cc.iter().any(|v| (*v as i64).abs() + rg as i64 > radius) {
                    return None;
                }
                let mut out = Vec::new();
                let mut cur = vec![0i32; d];
                fn rec<T: Scalar>(
                    g: &BaseGraph<T>,
                    k: usize,
                    left: i32,
                    sup: bool,
                    rg: i32,
                    cc: &[i32],
                    cur: &mut Vec<i32>,
                    out: &mut Vec<u32>,
                ) {
                    if k == cur.len() {
                        let p: Vec<i32> = cc.iter().zip(cur.iter()).map(|(a, b)| a + b).collect();
                        out.push(g.vertex_at(&p).expect("inside window"));
                        return;
                    }
                    let span = if sup { rg } else { left };
                    for o in -span..=span {
                        cur[k] = o;
                        rec(g, k + 1, left - o.abs(), sup, rg, cc, cur, out);
                    }
                }
                rec(self, 0, rg as i32, sup, rg as i32, &cc, &mut cur, &mut out);
                out.sort_unstable();
                Some(out)
            }
            BaseKind::Point => Some(vec![0]),
            BaseKind::Gasket { .. } => {
                let dist = self.cached_bfs(c);
                let mut out = Vec::new();
                for (y, &dy) in dist.iter().enumerate() {
                    if dy <= rg {
                        if dy < rg && !self.complete[y] {
                            return None;
                        }
                        out.push(y as u32);
                    }
                }
                Some(out)
            }
        }
    }
}

/// Product graph `G x Z` with vertical unit conductances.
#[derive(Debug)]
pub struct WeightedGraph<T = f64> {
    pub model: GraphModel,
    pub metric: MetricParams,
    pub base: BaseGraph<T>,
    z_lo: i64,
    nz: usize,
}

impl<T: Scalar> Clone for WeightedGraph<T> {
    fn clone(&self) -> Self {
        WeightedGraph { model: self.model.clone(), metric: self.metric, base: self.base.clone(), z_lo: self.z_lo, nz: self.nz }
    }
}

pub fn build_graph<T: Scalar>(model: &GraphModel) -> Result<WeightedGraph<T>> {
    let (alpha, beta) = model.exponents();
    build_graph_with(model, MetricParams { alpha, beta, kind: MetricKind::Anisotropic })
}

pub fn build_graph_with<T: Scalar>(model: &GraphModel, metric: MetricParams) -> Result<WeightedGraph<T>> {
    let GraphModel::ProductWithZ { base, z_extent } = model else {
        return Err(Error::UnsupportedModel(format!(
            "{} is a base graph; wrap it in a product with Z",
            model.label()
        )));
    };
    if *z_extent < 1 {
        return invalid("z extent must be >= 1");
    }
    let base = match base.as_ref() {
        GraphModel::ZLattice { d, radius } => BaseGraph::lattice(*d, *radius)?,
        GraphModel::GasketSkeleton { level } => BaseGraph::gasket(*level)?,
        GraphModel::Point => BaseGraph::point(),
        GraphModel::ProductWithZ { .. } => {
            return Err(Error::UnsupportedModel("nested products with Z".into()));
        }
    };
    if !matches!(base.kind, BaseKind::Point) {
        metric.validate()?;
    }
    if metric.kind == MetricKind::SupNorm && !matches!(base.kind, BaseKind::Lattice { .. }) {
        return Err(Error::UnsupportedModel("sup-norm metric requires a lattice base".into()));
    }
    let nz = (2 * z_extent + 1) as usize;
    if (base.len() as u128) * (nz as u128) >= u32::MAX as u128 {
        return invalid("window has too many sites for 32-bit site ids");
    }
    Ok(WeightedGraph { model: model.clone(), metric, base, z_lo: -z_extent, nz })
}

impl<T: Scalar> WeightedGraph<T> {
    pub fn from_parts(model: GraphModel, metric: MetricParams, base: BaseGraph<T>, z_extent: i64) -> Self {
        WeightedGraph { model, metric, base, z_lo: -z_extent, nz: (2 * z_extent + 1) as usize }
    }

    #[inline]
    pub fn num_sites(&self) -> usize {
        self.base.len() * self.nz
    }

    #[inline]
    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn z_range(&self) -> (i64, i64) {
        (self.z_lo, self.z_lo + self.nz as i64 - 1)
    }

    pub fn z_extent(&self) -> i64 {
        -self.z_lo
    }

    #[inline]
    pub fn site(&self, y: u32, z: i64) -> Option<SiteId> {
        let zi = z - self.z_lo;
        if (y as usize) < self.base.len() && zi >= 0 && (zi as usize) < self.nz {
            Some(y * self.nz as u32 + zi as u32)
        } else {
            None
        }
    }

    /// Site with base coordinates `c` and height `z`.
    pub fn site_at(&self, c: &[i32], z: i64) -> Option<SiteId> {
        self.base.vertex_at(c).and_then(|y| self.site(y, z))
    }

    /// Site at base coordinate origin and `z = 0`.
    pub fn origin(&self) -> SiteId {
        let c = vec![0; self.base.coord_dim()];
        self.site_at(&c, 0).expect("origin inside window")
    }

    #[inline]
    pub fn base_of(&self, x: SiteId) -> u32 {
        x / self.nz as u32
    }

    #[inline]
    pub fn z_of(&self, x: SiteId) -> i64 {
        self.z_lo + (x % self.nz as u32) as i64
    }

    #[inline]
    pub fn split(&self, x: SiteId) -> (u32, i64) {
        (self.base_of(x), self.z_of(x))
    }

    /// Nearest neighbours with conductances.
    #[inline]
    pub fn neighbors(&self, x: SiteId) -> impl Iterator<Item = (SiteId, T)> + '_ {
        let nz = self.nz as u32;
        let zi = x % nz;
        let y = x / nz;
        let down = (zi > 0).then(|| (x - 1, T::one()));
        let up = (zi + 1 < nz).then(|| (x + 1, T::one()));
        self.base.neighbors(y).map(move |(w, c)| (w * nz + zi, c)).chain(down).chain(up)
    }

    #[inline]
    pub fn degree(&self, x: SiteId) -> usize {
        let zi = x % self.nz as u32;
        self.base.degree(self.base_of(x)) + (zi > 0) as usize + ((zi as usize + 1) < self.nz) as usize
    }

    /// Vertex measure `rho(x) = rho^G(y) + 2`.
    #[inline]
    pub fn vertex_measure(&self, x: SiteId) -> T {
        self.base.measure(self.base_of(x)) + T::of(2.0)
    }

    /// Whether every neighbour of `x` in the infinite graph lies in the window.
    #[inline]
    pub fn is_complete(&self, x: SiteId) -> bool {
        let zi = (x % self.nz as u32) as usize;
        zi > 0 && zi + 1 < self.nz && self.base.is_complete(self.base_of(x))
    }

    pub fn has_unit_weights(&self) -> bool {
        self.base.unit_weights
    }

    pub fn edge_weight(&self, a: SiteId, b: SiteId) -> T {
        self.neighbors(a).find(|(w, _)| *w == b).map(|(_, c)| c).unwrap_or_else(T::zero)
    }

    #[inline]
    pub fn base_dist(&self, a: SiteId, b: SiteId) -> u32 {
        self.base.dist(self.base_of(a), self.base_of(b))
    }

    /// The metric `d` on sites.
    pub fn metric_d(&self, a: SiteId, b: SiteId) -> f64 {
        let (ya, za) = self.split(a);
        let (yb, zb) = self.split(b);
        let dg = match self.metric.kind {
            MetricKind::Anisotropic => self.base.dist(ya, yb),
            MetricKind::SupNorm => self.base.dist_inf(ya, yb),
        } as f64;
        dg.max(self.metric.z_term(za - zb))
    }

    /// Metric ball `B(x, r)`; fails if the ball is clipped by the window.
    pub fn ball(&self, x: SiteId, r: f64) -> Result<Ball> {
        if !(r >= 0.0) || !r.is_finite() {
            return invalid(format!("ball radius must be finite and >= 0 (got {r})"));
        }
        let (y, z) = self.split(x);
        let rg = (r + RADIUS_EPS).floor() as u32;
        let zr = self.metric.z_reach(r);
        let (zlo, zhi) = self.z_range();
        let clipped = || {
            Error::Geometry(format!(
                "ball of radius {r} around site {x} is clipped by the window ({}); enlarge the window",
                self.model.label()
            ))
        };
        if z - zr < zlo || z + zr > zhi {
            return Err(clipped());
        }
        let base = self
            .base
            .ball_vertices(y, rg, self.metric.kind == MetricKind::SupNorm)
            .ok_or_else(clipped)?;
        Ok(Ball {
            center: x,
            radius: r,
            rg,
            zr,
            region: Region::new(base, z - zr, z + zr),
        })
    }

    /// `B(x, r)` lies in the window; lattice bases answer without enumerating the ball.
    pub fn ball_inside(&self, x: SiteId, r: f64) -> bool {
        if !(r >= 0.0) || !r.is_finite() {
            return false;
        }
        let (y, z) = self.split(x);
        let zr = self.metric.z_reach(r);
        let (zlo, zhi) = self.z_range();
        if z - zr < zlo || z + zr > zhi {
            return false;
        }
        let rg = (r + RADIUS_EPS).floor() as i64;
        match self.base.kind {
            BaseKind::Lattice { radius, .. } => self.base.coords(y).iter().all(|c| (*c as i64).abs() + rg <= radius),
            BaseKind::Point => true,
            BaseKind::Gasket { .. } => self.base.ball_vertices(y, rg as u32, false).is_some(),
        }
    }

    /// `true` if `B(x, r)` and its outer boundary lie in the window.
    pub fn ball_fits_with_margin(&self, x: SiteId, r: f64) -> bool {
        match self.ball(x, r) {
            Ok(b) => b.region.all_complete(self),
            Err(_) => false,
        }
    }

    /// `sum_{x' in B(x,r)} rho(x')`.
    pub fn ball_measure(&self, x: SiteId, r: f64) -> Result<f64> {
        let b = self.ball(x, r)?;
        let h = (2 * b.zr + 1) as f64;
        Ok(b.region.base.iter().map(|&y| (self.base.measure(y).f64() + 2.0) * h).sum())
    }

    pub fn boundary(&self, set: &SiteSet, kind: BoundaryKind) -> Result<SiteSet> {
        match kind {
            BoundaryKind::Interior => Ok(SiteSet::from_sorted(
                set.iter()
                    .filter(|&x| !self.is_complete(x) || self.neighbors(x).any(|(w, _)| !set.contains(w)))
                    .collect(),
            )),
            BoundaryKind::Outer | BoundaryKind::Closure => {
                let mut out = Vec::new();
                for x in set.iter() {
                    if !self.is_complete(x) {
                        return geometry(format!(
                            "site {x} of the set touches the window edge; its outer boundary is outside the window (missing margin)"
                        ));
                    }
                    out.extend(self.neighbors(x).map(|(w, _)| w).filter(|w| !set.contains(*w)));
                }
                if kind == BoundaryKind::Closure {
                    out.extend(set.iter());
                }
                Ok(SiteSet::new(out))
            }
        }
    }

    /// Half-plane `ray x [z_lo, z_hi]` with the ray starting at base vertex `y0`.
    pub fn half_plane(&self, y0: u32, length: u32, z_window: (i64, i64)) -> Result<HalfPlane> {
        if length == 0 {
            return invalid("half-plane ray is empty (length 0)");
        }
        let (zlo, zhi) = self.z_range();
        if z_window.0 > z_window.1 || z_window.0 < zlo || z_window.1 > zhi {
            return geometry(format!("half-plane z window {z_window:?} outside graph range ({zlo}, {zhi})"));
        }
        let too_small = || Error::Geometry(format!("window too small for a ray of length {length}"));
        let start = self.base.coords(y0).to_vec();
        let ray: Vec<u32> = match self.base.kind {
            BaseKind::Lattice { .. } => (0..=length as i32)
                .map(|n| {
                    let mut c = start.clone();
                    c[0] += n;
                    self.base.vertex_at(&c)
                })
                .collect::<Option<_>>()
                .ok_or_else(too_small)?,
            BaseKind::Gasket { .. } => {
                if start[1] != 0 {
                    return geometry("gasket rays run along the bottom side; start vertex must have b = 0");
                }
                (0..=length as i32)
                    .map(|n| self.base.vertex_at(&[start[0] + n, 0]))
                    .collect::<Option<_>>()
                    .ok_or_else(too_small)?
            }
            BaseKind::Point => return Err(too_small()),
        };
        // Geodesic check: d_G(y(0), y(n)) = n for all n.
        let d0 = self.base.bfs_from(ray[0]);
        if ray.iter().enumerate().any(|(n, &y)| d0[y as usize] != n as u32) {
            return geometry("constructed ray is not a geodesic");
        }
        let pos = ray.iter().enumerate().map(|(n, &y)| (y, n as u32)).collect();
        Ok(HalfPlane { ray, pos, z_lo: z_window.0, z_hi: z_window.1 })
    }

    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<GraphHeader> {
        let mut bin = Vec::new();
        let n = self.base.len();
        bin.extend_from_slice(&(n as u64).to_le_bytes());
        for y in 0..n as u32 {
            bin.extend_from_slice(&(self.base.degree(y) as u32).to_le_bytes());
            for (w, c) in self.base.neighbors(y) {
                bin.extend_from_slice(&w.to_le_bytes());
                bin.extend_from_slice(&c.f64().to_le_bytes());
            }
            bin.extend_from_slice(&self.base.measure(y).f64().to_le_bytes());
            bin.push(self.base.is_complete(y) as u8);
            let c = self.base.coords(y);
            bin.push(c.len() as u8);
            for v in c {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        let (wmin, wmax) = self
            .base
            .weights
            .iter()
            .fold((f64::INFINITY, 0f64), |(lo, hi), w| (lo.min(w.f64()), hi.max(w.f64())));
        let header = GraphHeader {
            format: GRAPH_FORMAT.into(),
            model: self.model.clone(),
            metric: self.metric,
            z_extent: self.z_extent(),
            base_vertices: n,
            sites: self.num_sites(),
            weight_min: if wmin.is_finite() { wmin } else { 1.0 },
            weight_max: if wmax > 0.0 { wmax } else { 1.0 },
            checksum: hex::encode(Sha256::digest(&bin)),
            adjacency_file: format!("{stem}.bin"),
        };
        std::fs::create_dir_all(dir)?;
        std::fs::File::create(dir.join(&header.adjacency_file))?.write_all(&bin)?;
        let js = serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join(format!("{stem}.json")), js)?;
        Ok(header)
    }

    pub fn read_files(header_path: &Path) -> Result<Self> {
        let header: GraphHeader = serde_json::from_str(&std::fs::read_to_string(header_path)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        if header.format != GRAPH_FORMAT {
            return Err(Error::Format(format!("unknown graph format {}", header.format)));
        }
        let dir = header_path.parent().unwrap_or(Path::new("."));
        let mut bin = Vec::new();
        std::fs::File::open(dir.join(&header.adjacency_file))?.read_to_end(&mut bin)?;
        if hex::encode(Sha256::digest(&bin)) != header.checksum {
            return Err(Error::Format("adjacency checksum mismatch".into()));
        }
        let GraphModel::ProductWithZ { base: bm, .. } = &header.model else {
            return Err(Error::UnsupportedModel(header.model.label()));
        };
        let kind = match bm.as_ref() {
            GraphModel::ZLattice { d, radius } => BaseKind::Lattice { d: *d, radius: *radius },
            GraphModel::GasketSkeleton { level } => BaseKind::Gasket { level: *level },
            GraphModel::Point => BaseKind::Point,
            m => return Err(Error::UnsupportedModel(m.label())),
        };
        let mut cur = Cursor { b: &bin, at: 0 };
        let n = cur.u64()? as usize;
        let (mut offsets, mut nbrs, mut weights, mut measure, mut complete, mut coords) =
            (vec![0u32], Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let deg = cur.u32()?;
            for _ in 0..deg {
                nbrs.push(cur.u32()?);
                weights.push(T::of(cur.f64()?));
            }
            offsets.push(nbrs.len() as u32);
            measure.push(T::of(cur.f64()?));
            complete.push(cur.u8()? != 0);
            let k = cur.u8()?;
            for _ in 0..k {
                coords.push(cur.u32()? as i32);
            }
        }
        let unit_weights = weights.iter().all(|w: &T| (w.f64() - 1.0).abs() < 1e-15);
        let base = BaseGraph {
            kind,
            offsets,
            nbrs,
            weights,
            measure,
            complete,
            coords,
            unit_weights,
            bfs: (0..n).map(|_| OnceLock::new()).collect(),
        };
        Ok(WeightedGraph::from_parts(header.model.clone(), header.metric, base, header.z_extent))
    }
}

const GRAPH_FORMAT: &str = "gxz-adjacency-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphHeader {
    pub format: String,
    pub model: GraphModel,
    pub metric: MetricParams,
    pub z_extent: i64,
    pub base_vertices: usize,
    pub sites: usize,
    pub weight_min: f64,
    pub weight_max: f64,
    pub checksum: String,
    pub adjacency_file: String,
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self
            .b
            .get(self.at..self.at + N)
            .ok_or_else(|| Error::Format("truncated adjacency file".into()))?;
        self.at += N;
        Ok(s.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Outer,
    Interior,
    Closure,
}

/// Sorted, deduplicated set of sites.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSet(Vec<SiteId>);

impl SiteSet {
    pub fn new(mut v: Vec<SiteId>) -> Self {
        v.sort_unstable();
        v.dedup();
        SiteSet(v)
    }

    pub fn from_sorted(v: Vec<SiteId>) -> Self {
        debug_assert!(v.windows(2).all(|w| w[0] < w[1]));
        SiteSet(v)
    }

    pub fn singleton(x: SiteId) -> Self {
        SiteSet(vec![x])
    }

    #[inline]
    pub fn contains(&self, x: SiteId) -> bool {
        self.0.binary_search(&x).is_ok()
    }

    #[inline]
    pub fn index_of(&self, x: SiteId) -> Option<usize> {
        self.0.binary_search(&x).ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = SiteId> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[SiteId] {
        &self.0
    }

    pub fn union(&self, other: &SiteSet) -> SiteSet {
        SiteSet::new(self.0.iter().chain(&other.0).copied().collect())
    }

    pub fn difference(&self, other: &SiteSet) -> SiteSet {
        SiteSet(self.0.iter().copied().filter(|x| !other.contains(*x)).collect())
    }

    pub fn is_subset(&self, other: &SiteSet) -> bool {
        self.0.iter().all(|x| other.contains(*x))
    }
}

impl FromIterator<SiteId> for SiteSet {
    fn from_iter<I: IntoIterator<Item = SiteId>>(it: I) -> Self {
        SiteSet::new(it.into_iter().collect())
    }
}

/// Product region `base x [z_lo, z_hi]` with a local site numbering.
#[derive(Clone, Debug)]
pub struct Region {
    pub base: Vec<u32>,
    pub z_lo: i64,
    pub z_hi: i64,
    dense: Option<Vec<u32>>,
}

impl Region {
    pub fn new(mut base: Vec<u32>, z_lo: i64, z_hi: i64) -> Self {
        base.sort_unstable();
        base.dedup();
        Region { base, z_lo, z_hi, dense: None }
    }

    /// Build an O(1) base lookup table sized to the base graph.
    pub fn indexed(mut self, base_len: usize) -> Self {
        let mut d = vec![u32::MAX; base_len];
        for (i, &y) in self.base.iter().enumerate() {
            d[y as usize] = i as u32;
        }
        self.dense = Some(d);
        self
    }

    #[inline]
    pub fn height(&self) -> usize {
        (self.z_hi - self.z_lo + 1) as usize
    }

    pub fn len(&self) -> usize {
        self.base.len() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn base_pos(&self, y: u32) -> Option<usize> {
        match &self.dense {
            Some(d) => {
                let p = *d.get(y as usize)?;
                (p != u32::MAX).then_some(p as usize)
            }
            None => self.base.binary_search(&y).ok(),
        }
    }

    /// Local index of `x`, if inside.
    #[inline]
    pub fn local<T: Scalar>(&self, g: &WeightedGraph<T>, x: SiteId) -> Option<usize> {
        let (y, z) = g.split(x);
        if z < self.z_lo || z > self.z_hi {
            return None;
        }
        Some(self.base_pos(y)? * self.height() + (z - self.z_lo) as usize)
    }

    #[inline]
    pub fn contains<T: Scalar>(&self, g: &WeightedGraph<T>, x: SiteId) -> bool {
        let (y, z) = g.split(x);
        z >= self.z_lo && z <= self.z_hi && self.base_pos(y).is_some()
    }

    /// Global site of local index `i`.
    #[inline]
    pub fn site<T: Scalar>(&self, g: &WeightedGraph<T>, i: usize) -> SiteId {
        let h = self.height();
        g.site(self.base[i / h], self.z_lo + (i % h) as i64).expect("region inside window")
    }

    pub fn sites<T: Scalar>(&self, g: &WeightedGraph<T>) -> SiteSet {
        SiteSet::from_sorted((0..self.len()).map(|i| self.site(g, i)).collect())
    }

    pub fn all_complete<T: Scalar>(&self, g: &WeightedGraph<T>) -> bool {
        let (zlo, zhi) = g.z_range();
        self.z_lo > zlo && self.z_hi < zhi && self.base.iter().all(|&y| g.base.is_complete(y))
    }
}

#[derive(Clone, Debug)]
pub struct Ball {
    pub center: SiteId,
    pub radius: f64,
    /// Floor of the radius, the reach in `d_G`.
    pub rg: u32,
    /// Reach in `|dz|`.
    pub zr: i64,
    pub region: Region,
}

impl Ball {
    pub fn sites<T: Scalar>(&self, g: &WeightedGraph<T>) -> SiteSet {
        self.region.sites(g)
    }

    #[inline]
    pub fn contains<T: Scalar>(&self, g: &WeightedGraph<T>, x: SiteId) -> bool {
        self.region.contains(g, x)
    }

    pub fn len(&self) -> usize {
        self.region.len()
    }

    pub fn is_empty(&self) -> bool {
        self.region.is_empty()
    }
}

/// Exact test of `B(a, ra) ⊆ B(b, rb)`.
pub fn ball_in_ball<T: Scalar>(g: &WeightedGraph<T>, a: SiteId, ra: f64, b: SiteId, rb: f64) -> Result<bool> {
    let (za, zb) = (g.z_of(a), g.z_of(b));
    let (zra, zrb) = (g.metric.z_reach(ra), g.metric.z_reach(rb));
    if za - zra < zb - zrb || za + zra > zb + zrb {
        return Ok(false);
    }
    let rgb = (rb + RADIUS_EPS).floor() as u32;
    let rga = (ra + RADIUS_EPS).floor() as u32;
    match (g.base.kind, g.metric.kind) {
        (BaseKind::Lattice { .. }, MetricKind::Anisotropic) => Ok(g.base_dist(a, b) + rga <= rgb),
        (BaseKind::Lattice { .. }, MetricKind::SupNorm) => Ok(g.base.dist_inf(g.base_of(a), g.base_of(b)) + rga <= rgb),
        _ => {
            let ball = g.ball(a, ra)?;
            let yb = g.base_of(b);
            Ok(ball.region.base.iter().all(|&y| g.base.dist(yb, y) <= rgb))
        }
    }
}

/// Exact test of `B(a, ra) ∩ B(b, rb) = ∅`.
pub fn balls_disjoint<T: Scalar>(g: &WeightedGraph<T>, a: SiteId, ra: f64, b: SiteId, rb: f64) -> bool {
    let (za, zb) = (g.z_of(a), g.z_of(b));
    if (za - zb).abs() > g.metric.z_reach(ra) + g.metric.z_reach(rb) {
        return true;
    }
    let rga = (ra + RADIUS_EPS).floor() as u32;
    let rgb = (rb + RADIUS_EPS).floor() as u32;
    match (g.base.kind, g.metric.kind) {
        (BaseKind::Lattice { .. }, MetricKind::SupNorm) => g.base.dist_inf(g.base_of(a), g.base_of(b)) > rga + rgb,
        // On geodesic graphs, base balls meet iff d_G <= ra + rb.
        _ => g.base_dist(a, b) > rga + rgb,
    }
}

/// Half-plane `P = ray x [z_lo, z_hi]` along a geodesic ray.
#[derive(Clone, Debug)]
pub struct HalfPlane {
    pub ray: Vec<u32>,
    pos: HashMap<u32, u32>,
    pub z_lo: i64,
    pub z_hi: i64,
}

impl HalfPlane {
    pub fn len(&self) -> usize {
        self.ray.len() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.ray.is_empty()
    }

    pub fn height(&self) -> usize {
        (self.z_hi - self.z_lo + 1) as usize
    }

    /// Plane coordinates `(n, z)` of `x`, if it lies in the plane.
    pub fn coords<T: Scalar>(&self, g: &WeightedGraph<T>, x: SiteId) -> Option<(u32, i64)> {
        let (y, z) = g.split(x);
        if z < self.z_lo || z > self.z_hi {
            return None;
        }
        self.pos.get(&y).map(|&n| (n, z))
    }

    pub fn contains<T: Scalar>(&self, g: &WeightedGraph<T>, x: SiteId) -> bool {
        self.coords(g, x).is_some()
    }

    pub fn site<T: Scalar>(&self, g: &WeightedGraph<T>, n: u32, z: i64) -> Option<SiteId> {
        if z < self.z_lo || z > self.z_hi {
            return None;
        }
        self.ray.get(n as usize).and_then(|&y| g.site(y, z))
    }

    /// `*`-neighbours of `x` inside the plane.
    pub fn star_neighbors<T: Scalar>(&self, g: &WeightedGraph<T>, x: SiteId) -> Vec<SiteId> {
        let Some((n, z)) = self.coords(g, x) else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(8);
        for dn in -1i64..=1 {
            for dz in -1i64..=1 {
                if (dn, dz) == (0, 0) || (n as i64 + dn) < 0 {
                    continue;
                }
                if let Some(s) = self.site(g, (n as i64 + dn) as u32, z + dz) {
                    out.push(s);
                }
            }
        }
        out
    }

    pub fn sites<T: Scalar>(&self, g: &WeightedGraph<T>) -> SiteSet {
        self.ray
            .iter()
            .flat_map(|&y| (self.z_lo..=self.z_hi).map(move |z| (y, z)))
            .filter_map(|(y, z)| g.site(y, z))
            .collect()
    }
}
