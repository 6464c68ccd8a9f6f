//! Nearest-neighbour random walk, stopping rules and transition operators.

use crate::error::{geometry, Error, Result};
use crate::graphs::{SiteId, SiteSet, WeightedGraph};
use crate::linalg::Dense;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type TaskRng = ChaCha8Rng;

/// Independent stream for `(seed, task)`.
pub fn task_rng(seed: u64, task: u64) -> TaskRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(task);
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ExitedDomain,
    HitTarget,
    StepCap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HitMode {
    /// `H_K`: times `n >= 0`.
    Entrance,
    /// `H~_K`: times `n >= 1`.
    Hitting,
}

/// Stopping rule: first of target hit, domain exit and step cap.
pub struct StopSpec<'a> {
    pub target: Option<(&'a dyn Fn(SiteId) -> bool, HitMode)>,
    pub domain: Option<&'a dyn Fn(SiteId) -> bool>,
    pub step_cap: u64,
}

impl<'a> StopSpec<'a> {
    pub fn exit(domain: &'a dyn Fn(SiteId) -> bool, step_cap: u64) -> Self {
        StopSpec { target: None, domain: Some(domain), step_cap }
    }

    pub fn entrance(target: &'a dyn Fn(SiteId) -> bool, step_cap: u64) -> Self {
        StopSpec { target: Some((target, HitMode::Entrance)), domain: None, step_cap }
    }

    pub fn hitting(target: &'a dyn Fn(SiteId) -> bool, step_cap: u64) -> Self {
        StopSpec { target: Some((target, HitMode::Hitting)), domain: None, step_cap }
    }

    pub fn steps(step_cap: u64) -> Self {
        StopSpec { target: None, domain: None, step_cap }
    }

    pub fn within(mut self, domain: &'a dyn Fn(SiteId) -> bool) -> Self {
        self.domain = Some(domain);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `X_0, ..., X_tau` including the stopping site.
    pub sites: Vec<SiteId>,
    /// Interlacement label, when the trajectory belongs to a Poisson cloud.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<f64>,
    pub stop_reason: StopReason,
}

impl<T: Scalar> WeightedGraph<T> {
    /// One step from a site whose neighbourhood is inside the window.
    #[inline]
    pub fn step_unchecked<R: Rng + ?Sized>(&self, x: SiteId, rng: &mut R) -> SiteId {
        if self.has_unit_weights() {
            let (y, zi) = (self.base_of(x), x % self.nz() as u32);
            let bd = self.base.degree(y);
            let k = rng.gen_range(0..bd + 2);
            return if k < bd {
                self.base.nbr_at(y, k) * self.nz() as u32 + zi
            } else if k == bd {
                x - 1
            } else {
                x + 1
            };
        }
        let total = self.vertex_measure(x).f64();
        let mut u = rng.gen::<f64>() * total;
        let mut last = x;
        for (w, c) in self.neighbors(x) {
            u -= c.f64();
            last = w;
            if u < 0.0 {
                return w;
            }
        }
        last
    }
}

/// One step of the walk; leaving the window is an error.
pub fn walk_step<T: Scalar, R: Rng + ?Sized>(g: &WeightedGraph<T>, x: SiteId, rng: &mut R) -> Result<SiteId> {
    if !g.is_complete(x) {
        return geometry(format!("walk at site {x} would leave the window"));
    }
    Ok(g.step_unchecked(x, rng))
}

/// Run until the stopping rule fires.
pub fn run_walk<T: Scalar, R: Rng + ?Sized>(
    g: &WeightedGraph<T>,
    x0: SiteId,
    stop: &StopSpec,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut sites = vec![x0];
    let done = |x: SiteId, n: u64| -> Option<StopReason> {
        if let Some(d) = stop.domain {
            if !d(x) {
                return Some(StopReason::ExitedDomain);
            }
        }
        if let Some((t, mode)) = stop.target {
            if (n > 0 || mode == HitMode::Entrance) && t(x) {
                return Some(StopReason::HitTarget);
            }
        }
        None
    };
    let mut x = x0;
    let mut n = 0u64;
    loop {
        if let Some(r) = done(x, n) {
            return Ok(Trajectory { sites, label: None, stop_reason: r });
        }
        if n >= stop.step_cap {
            return Ok(Trajectory { sites, label: None, stop_reason: StopReason::StepCap });
        }
        x = walk_step(g, x, rng)?;
        n += 1;
        sites.push(x);
    }
}

/// Successive returns to `W` and departures from `U`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcursionDecomposition {
    pub returns: Vec<usize>,
    pub departures: Vec<usize>,
    /// Excursions whose departure was observed.
    pub complete: usize,
    /// Set when the trajectory ends inside `U` after its last return.
    pub last_incomplete: bool,
}

/// `R_1 = H_W`, `D_k = T_U` after `R_k`, `R_{k+1} = H_W` after `D_k`.
pub fn excursions(
    traj: &Trajectory,
    in_w: &dyn Fn(SiteId) -> bool,
    in_u: &dyn Fn(SiteId) -> bool,
) -> ExcursionDecomposition {
    let (mut returns, mut departures) = (Vec::new(), Vec::new());
    let mut inside = false;
    for (i, &x) in traj.sites.iter().enumerate() {
        if !inside && in_w(x) {
            returns.push(i);
            inside = true;
        } else if inside && !in_u(x) {
            departures.push(i);
            inside = false;
        }
    }
    ExcursionDecomposition { complete: departures.len(), last_incomplete: inside, returns, departures }
}

/// Checked form of [`excursions`] on explicit sets.
pub fn excursions_in(traj: &Trajectory, w: &SiteSet, u: &SiteSet) -> Result<ExcursionDecomposition> {
    if !w.is_subset(u) {
        return Err(Error::InvalidArgument("excursion set W is not contained in U".into()));
    }
    Ok(excursions(traj, &|x| w.contains(x), &|x| u.contains(x)))
}

/// `P_U(x, x') = rho_{x x'} / rho(x)` on `U x U`.
pub fn transition_operator<T: Scalar>(g: &WeightedGraph<T>, domain: &SiteSet, cap: usize) -> Result<Dense<T>> {
    if domain.len() > cap {
        return Err(Error::Numerical(format!(
            "dense transition operator on {} sites exceeds the cap {cap}",
            domain.len()
        )));
    }
    let mut p = Dense::zeros(domain.len(), domain.len());
    for (i, x) in domain.iter().enumerate() {
        let rho = g.vertex_measure(x);
        for (w, c) in g.neighbors(x) {
            if let Some(j) = domain.index_of(w) {
                p[(i, j)] = c / rho;
            }
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{build_graph, GraphModel};
    use proptest::prelude::*;

    fn z3(r: i64) -> WeightedGraph<f64> {
        build_graph(&GraphModel::z_lattice(2, r, r)).unwrap()
    }

    #[test]
    fn stopping_modes() {
        let g = z3(6);
        let o = g.origin();
        let mut rng = task_rng(1, 0);
        let at_o = |x: SiteId| x == o;
        let w = run_walk(&g, o, &StopSpec::entrance(&at_o, 100), &mut rng).unwrap();
        assert_eq!(w.sites, vec![o]);
        assert_eq!(w.stop_reason, StopReason::HitTarget);
        let ball = g.ball(o, 3.0).unwrap();
        let inside = |x: SiteId| ball.contains(&g, x);
        let w = run_walk(&g, o, &StopSpec::exit(&inside, 1_000_000), &mut rng).unwrap();
        assert_eq!(w.stop_reason, StopReason::ExitedDomain);
        assert!(!ball.contains(&g, *w.sites.last().unwrap()));
        assert!(w.sites[..w.sites.len() - 1].iter().all(|&x| ball.contains(&g, x)));
        let w = run_walk(&g, o, &StopSpec::steps(17), &mut rng).unwrap();
        assert_eq!((w.sites.len(), w.stop_reason), (18, StopReason::StepCap));
    }

    #[test]
    fn leaving_window_is_an_error() {
        let g = z3(2);
        let mut rng = task_rng(2, 0);
        let r = run_walk(&g, g.origin(), &StopSpec::steps(10_000), &mut rng);
        assert!(matches!(r, Err(Error::Geometry(_))));
    }

    #[test]
    fn same_stream_same_walk() {
        let g = z3(60);
        let a = run_walk(&g, g.origin(), &StopSpec::steps(50), &mut task_rng(9, 3)).unwrap();
        let b = run_walk(&g, g.origin(), &StopSpec::steps(50), &mut task_rng(9, 3)).unwrap();
        let c = run_walk(&g, g.origin(), &StopSpec::steps(50), &mut task_rng(9, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn step_frequencies_follow_conductances() {
        let mut g: WeightedGraph = build_graph(&GraphModel::z_lattice(1, 4, 4)).unwrap();
        g.base.reweight(|a, b| 1.0 + (a.min(b) % 3) as f64).unwrap();
        let x = g.origin();
        let mut rng = task_rng(5, 0);
        let n = 200_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            *counts.entry(g.step_unchecked(x, &mut rng)).or_insert(0usize) += 1;
        }
        let rho = g.vertex_measure(x);
        for (w, c) in g.neighbors(x) {
            let p = c / rho;
            let f = counts[&w] as f64 / n as f64;
            assert!((f - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt(), "{f} vs {p}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        // Detailed balance and sub-stochastic rows on random weights and domains.
        #[test]
        fn detailed_balance(seed in 0u64..1000, r in 1.0f64..3.0) {
            let mut g: WeightedGraph = build_graph(&GraphModel::z_lattice(2, 5, 5)).unwrap();
            g.base.reweight(|a, b| 0.5 + ((a as u64 * 31 + b as u64 * 31 + seed) % 7) as f64 / 3.0).unwrap();
            let dom = g.ball(g.origin(), r).unwrap().sites(&g);
            let p = transition_operator(&g, &dom, 4000).unwrap();
            for (i, x) in dom.iter().enumerate() {
                let row: f64 = p.row(i).iter().sum();
                prop_assert!(row <= 1.0 + 1e-12);
                if dom.iter().all(|y| g.edge_weight(x, y) == 0.0 || y == x) {
                    continue;
                }
                for (j, y) in dom.iter().enumerate() {
                    let lhs = g.vertex_measure(x) * p[(i, j)];
                    let rhs = g.vertex_measure(y) * p[(j, i)];
                    prop_assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn excursions_hand_crafted() {
        let t = |s: Vec<u32>| Trajectory { sites: s, label: None, stop_reason: StopReason::StepCap };
        let in_w = |x: u32| x == 5;
        let in_u = |x: u32| (3..=7).contains(&x);
        let e = excursions(&t(vec![0, 1, 2]), &in_w, &in_u);
        assert_eq!((e.complete, e.last_incomplete), (0, false));
        // Enter W at 2, exit U at 5, re-enter at 8, exit at 10.
        let e = excursions(&t(vec![3, 4, 5, 6, 7, 8, 7, 6, 5, 7, 9]), &in_w, &in_u);
        assert_eq!(e.returns, vec![2, 8]);
        assert_eq!(e.departures, vec![5, 10]);
        assert_eq!(e.complete, 2);
        let e = excursions(&t(vec![4, 5, 6]), &in_w, &in_u);
        assert_eq!((e.complete, e.last_incomplete), (0, true));
    }

    // Expected exit time of the line Point x Z from [-a, a] against the dense solve of (I - P) tau = 1.
    #[test]
    fn exit_time_matches_gamblers_ruin() {
        let g: WeightedGraph = build_graph(&GraphModel::ProductWithZ { base: Box::new(GraphModel::Point), z_extent: 10 }).unwrap();
        let a = 4i64;
        let dom: SiteSet = (-a..=a).map(|z| g.site(0, z).unwrap()).collect();
        let p = transition_operator(&g, &dom, 100).unwrap();
        let n = dom.len();
        let mut m = Dense::<f64>::identity(n);
        let mut ones = Dense::zeros(n, 1);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] -= p[(i, j)];
            }
            ones[(i, 0)] = 1.0;
        }
        let tau = crate::linalg::lu_solve(m, ones).unwrap();
        let mid = dom.index_of(g.origin()).unwrap();
        assert!((tau[(mid, 0)] - 25.0).abs() < 1e-9);
        let inside = |x: SiteId| dom.contains(x);
        let mut rng = task_rng(3, 0);
        let mut m = crate::stats::Moments::default();
        for _ in 0..20_000 {
            let w = run_walk(&g, g.origin(), &StopSpec::exit(&inside, 1 << 20), &mut rng).unwrap();
            m.push((w.sites.len() - 1) as f64);
        }
        assert!((m.mean() - 25.0).abs() < 3.0 * m.std_err());
    }

    #[test]
    fn two_step_density_matches_frequency() {
        let g: WeightedGraph = build_graph(&GraphModel::z_lattice(1, 4, 4)).unwrap();
        let dom = g.ball(g.origin(), 3.0).unwrap().sites(&g);
        let p = transition_operator(&g, &dom, 4000).unwrap();
        let o = dom.index_of(g.origin()).unwrap();
        let target = g.site_at(&[1], 1).unwrap();
        let t = dom.index_of(target).unwrap();
        let p2: f64 = (0..dom.len()).map(|k| p[(o, k)] * p[(k, t)]).sum();
        assert!((p2 - 2.0 / 16.0).abs() < 1e-12);
        let mut rng = task_rng(4, 0);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                let a = g.step_unchecked(g.origin(), &mut rng);
                g.step_unchecked(a, &mut rng) == target
            })
            .count();
        let f = hits as f64 / n as f64;
        assert!((f - p2).abs() < 3.0 * (p2 * (1.0 - p2) / n as f64).sqrt());
    }

    #[test]
    fn operator_cap_enforced() {
        let g = z3(5);
        let dom = g.ball(g.origin(), 3.0).unwrap().sites(&g);
        assert!(matches!(transition_operator(&g, &dom, 10), Err(Error::Numerical(_))));
    }
}
