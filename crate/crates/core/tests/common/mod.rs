//! Brute-force references for the crossing events. They only use site
//! metric queries and plain neighbour lists, never the detector's geometry.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use gxz::bits::BitSet;
use gxz::graphs::{HalfPlane, Region, SiteId};
use gxz::Graph;
use rand::Rng;

const EPS: f64 = 1e-9;

pub fn ball_sites(g: &Graph, window: &Region, x: SiteId, r: f64) -> Vec<SiteId> {
    window.sites(g).iter().filter(|&s| g.metric_d(x, s) <= r + EPS).collect()
}

/// Site of `B(x, r)` with a graph neighbour outside the ball (or missing from the window).
pub fn on_ball_boundary(g: &Graph, x: SiteId, r: f64, s: SiteId) -> bool {
    !g.is_complete(s) || g.neighbors(s).any(|(w, _)| g.metric_d(x, w) > r + EPS)
}

pub struct Lookup<'a> {
    g: &'a Graph,
    window: &'a Region,
    sigma: &'a BitSet,
}

impl<'a> Lookup<'a> {
    pub fn new(g: &'a Graph, window: &'a Region, sigma: &'a BitSet) -> Self {
        Lookup { g, window, sigma }
    }

    pub fn occupied(&self, s: SiteId) -> bool {
        self.sigma.get(self.window.local(self.g, s).expect("site outside window"))
    }
}

/// Grow `seed` to a fixpoint inside `allowed` using `adj`.
fn closure_fixpoint(seed: &[SiteId], allowed: &HashSet<SiteId>, adj: impl Fn(SiteId) -> Vec<SiteId>) -> HashSet<SiteId> {
    let mut reached: HashSet<SiteId> = seed.iter().copied().filter(|s| allowed.contains(s)).collect();
    loop {
        let mut grown = Vec::new();
        for &s in allowed {
            if !reached.contains(&s) && adj(s).iter().any(|w| reached.contains(w)) {
                grown.push(s);
            }
        }
        if grown.is_empty() {
            return reached;
        }
        reached.extend(grown);
    }
}

/// Vacant nearest-neighbour crossing from `B(x,L)` to the interior boundary of `B(x,2L)`.
pub fn oracle_a(g: &Graph, window: &Region, sigma: &BitSet, x: SiteId, l: u32) -> bool {
    let look = Lookup::new(g, window, sigma);
    let r2 = 2.0 * l as f64;
    let ball2 = ball_sites(g, window, x, r2);
    let allowed: HashSet<SiteId> = ball2.iter().copied().filter(|&s| !look.occupied(s)).collect();
    let seed: Vec<SiteId> = ball2.iter().copied().filter(|&s| g.metric_d(x, s) <= l as f64 + EPS).collect();
    let reached = closure_fixpoint(&seed, &allowed, |s| g.neighbors(s).map(|(w, _)| w).collect());
    reached.iter().any(|&s| on_ball_boundary(g, x, r2, s))
}

/// Occupied `*`-crossing inside the plane trace of `B(x,2L)`.
pub fn oracle_b(g: &Graph, window: &Region, sigma: &BitSet, plane: &HalfPlane, x: SiteId, l: u32) -> bool {
    if !plane.contains(g, x) {
        return false;
    }
    let look = Lookup::new(g, window, sigma);
    let r2 = 2.0 * l as f64;
    let cells: Vec<SiteId> = ball_sites(g, window, x, r2).into_iter().filter(|&s| plane.contains(g, s)).collect();
    let allowed: HashSet<SiteId> = cells.iter().copied().filter(|&s| look.occupied(s)).collect();
    let seed: Vec<SiteId> = cells.iter().copied().filter(|&s| g.metric_d(x, s) <= l as f64 + EPS).collect();
    let reached = closure_fixpoint(&seed, &allowed, |s| plane.star_neighbors(g, s));
    reached.iter().any(|&s| on_ball_boundary(g, x, r2, s))
}

fn brute_diameter_at_least(g: &Graph, sites: &[SiteId], l: f64) -> bool {
    sites.iter().enumerate().any(|(i, &a)| sites[i + 1..].iter().any(|&b| g.metric_d(a, b) >= l - EPS))
}

fn components(sites: &HashSet<SiteId>, adj: impl Fn(SiteId) -> Vec<SiteId>) -> Vec<Vec<SiteId>> {
    let mut label: HashMap<SiteId, usize> = HashMap::new();
    let mut out: Vec<Vec<SiteId>> = Vec::new();
    let mut order: Vec<SiteId> = sites.iter().copied().collect();
    order.sort_unstable();
    for s in order {
        if label.contains_key(&s) {
            continue;
        }
        let id = out.len();
        let mut comp = vec![s];
        label.insert(s, id);
        let mut k = 0;
        while k < comp.len() {
            let a = comp[k];
            k += 1;
            for w in adj(a) {
                if sites.contains(&w) && !label.contains_key(&w) {
                    label.insert(w, id);
                    comp.push(w);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Sites of `B(x,3L)` together with their graph neighbours.
fn closure3(g: &Graph, window: &Region, x: SiteId, l: u32) -> HashSet<SiteId> {
    let mut c = HashSet::new();
    for s in ball_sites(g, window, x, 3.0 * l as f64) {
        c.insert(s);
        c.extend(g.neighbors(s).map(|(w, _)| w));
    }
    c
}

/// Exhaustive separation event: two vacant components of `B(x,5L)` each
/// containing a connected piece inside the closure of `B(x,3L)` with diameter `>= L`.
pub fn oracle_s(g: &Graph, window: &Region, sigma: &BitSet, x: SiteId, l: u32) -> bool {
    let look = Lookup::new(g, window, sigma);
    let ball5: HashSet<SiteId> = ball_sites(g, window, x, 5.0 * l as f64).into_iter().filter(|&s| !look.occupied(s)).collect();
    let near = closure3(g, window, x, l);
    let nbrs = |s: SiteId| g.neighbors(s).map(|(w, _)| w).collect::<Vec<_>>();
    let mut good = 0;
    for comp in components(&ball5, nbrs) {
        let inner: HashSet<SiteId> = comp.into_iter().filter(|s| near.contains(s)).collect();
        if components(&inner, nbrs).iter().any(|p| brute_diameter_at_least(g, p, l as f64)) {
            good += 1;
            if good == 2 {
                return true;
            }
        }
    }
    false
}

/// Checks a reported witness: vacant, connected, inside the closure of
/// `B(x,3L)`, diameter `>= L`, and no vacant path in `B(x,5L)` joins the pieces.
pub fn check_s_witness(g: &Graph, window: &Region, sigma: &BitSet, x: SiteId, l: u32, pieces: &[Vec<SiteId>; 2]) -> Result<(), String> {
    let look = Lookup::new(g, window, sigma);
    let near = closure3(g, window, x, l);
    let nbrs = |s: SiteId| g.neighbors(s).map(|(w, _)| w).collect::<Vec<_>>();
    for (k, p) in pieces.iter().enumerate() {
        if p.is_empty() {
            return Err(format!("piece {k} is empty"));
        }
        if p.iter().any(|&s| look.occupied(s)) {
            return Err(format!("piece {k} has an occupied site"));
        }
        if p.iter().any(|s| !near.contains(s)) {
            return Err(format!("piece {k} leaves the closure of B(x,3L)"));
        }
        let set: HashSet<SiteId> = p.iter().copied().collect();
        if components(&set, nbrs).len() != 1 {
            return Err(format!("piece {k} is not connected"));
        }
        if !brute_diameter_at_least(g, p, l as f64) {
            return Err(format!("piece {k} has diameter < L"));
        }
    }
    let ball5: HashSet<SiteId> = ball_sites(g, window, x, 5.0 * l as f64).into_iter().filter(|&s| !look.occupied(s)).collect();
    let reach = closure_fixpoint(&pieces[0], &ball5, nbrs);
    if pieces[1].iter().any(|s| reach.contains(s)) {
        return Err("a vacant path in B(x,5L) joins the pieces".into());
    }
    Ok(())
}

/// Bernoulli configuration with a random density, bits in window order.
pub fn random_sigma(window: &Region, rng: &mut impl Rng, p_lo: f64, p_hi: f64) -> BitSet {
    let p = rng.gen_range(p_lo..p_hi);
    let mut s = BitSet::new(window.len());
    for i in 0..window.len() {
        if rng.gen_bool(p) {
            s.set(i, true);
        }
    }
    s
}
