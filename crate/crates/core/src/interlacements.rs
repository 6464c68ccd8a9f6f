//! Labelled Poisson clouds of walk trajectories through a finite anchor set.
//!
//! Trajectories are killed on leaving a truncation ball `U`, so a sample is an
//! exact draw of the interlacement killed outside `U`: its capacities and
//! Green functions are the killed ones `cap_U`, `g_U`. The distance to the
//! infinite-volume law is reported as a capacity excess.

use crate::bits::{BitSet, Rle};
use crate::error::{geometry, invalid, Error, Result};
use crate::graphs::{Region, SiteId, SiteSet, WeightedGraph};
use crate::potential::{equilibrium_measure, killed_green, SolverConfig};
use crate::scalar::Scalar;
use crate::stats::{loglog_fit, LinearFit, Proportion};
use crate::walk::{task_rng, StopReason, TaskRng, Trajectory};
use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson, WeightedAliasIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

fn default_step_cap() -> u64 {
    100_000_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub truncation_radius: f64,
    /// Per-trajectory step limit; capped trajectories are counted, not dropped.
    #[serde(default = "default_step_cap")]
    pub step_cap: u64,
    /// Also solve at half the truncation radius to bound the truncation bias.
    #[serde(default)]
    pub bias_estimate: bool,
    /// Refuse to sample when the relative capacity bracket is wider than this.
    #[serde(default)]
    pub max_bracket_rel: Option<f64>,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl SamplerConfig {
    pub fn new(truncation_radius: f64) -> Self {
        SamplerConfig {
            truncation_radius,
            step_cap: default_step_cap(),
            bias_estimate: false,
            max_bracket_rel: None,
            solver: SolverConfig::default(),
        }
    }
}

/// Upper bound on `cap_U(K) - cap(K)` for `U = B(center, r)`: Richardson
/// from radii `r/2` and `r` with exponent `nu`, times a safety factor 2.
pub fn capacity_excess<T: Scalar>(
    g: &WeightedGraph<T>,
    k: &SiteSet,
    center: SiteId,
    r: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    let cap_at = |rad: f64| -> Result<f64> {
        let u = g.ball(center, rad)?.sites(g);
        Ok(equilibrium_measure(g, k, &u, cfg)?.equilibrium.capacity.f64())
    };
    let (c1, c2) = (cap_at(r / 2.0)?, cap_at(r)?);
    let q = 2f64.powf(g.metric.nu()) - 1.0;
    Ok(2.0 * (c1 - c2).max(0.0) / q)
}

pub struct InterlacementSampler<'g, T: Scalar> {
    g: &'g WeightedGraph<T>,
    anchor: SiteSet,
    center: SiteId,
    trunc: Region,
    /// Truncation-local index to anchor index, `u32::MAX` outside the anchor.
    slot: Vec<u32>,
    mass: Vec<f64>,
    starts: Vec<SiteId>,
    alias: WeightedAliasIndex<f64>,
    capacity: f64,
    excess: Option<f64>,
    cfg: SamplerConfig,
}

impl<'g, T: Scalar> InterlacementSampler<'g, T> {
    pub fn new(g: &'g WeightedGraph<T>, anchor: &SiteSet, center: SiteId, cfg: &SamplerConfig) -> Result<Self> {
        if anchor.is_empty() {
            return invalid("anchor set is empty");
        }
        let ball = g.ball(center, cfg.truncation_radius)?;
        if !ball.region.all_complete(g) {
            return geometry(format!(
                "truncation ball of radius {} has no margin inside the window; enlarge the window",
                cfg.truncation_radius
            ));
        }
        let trunc = ball.region.indexed(g.base.len());
        let mut slot = vec![u32::MAX; trunc.len()];
        for (i, x) in anchor.iter().enumerate() {
            let l = trunc
                .local(g, x)
                .ok_or_else(|| Error::Geometry(format!("anchor site {x} lies outside the truncation ball")))?;
            slot[l] = i as u32;
        }
        let u = trunc.sites(g);
        let eq = equilibrium_measure(g, anchor, &u, &cfg.solver)?.equilibrium;
        let mass: Vec<f64> = eq.measure.iter().map(|m| m.f64().max(0.0)).collect();
        let capacity = eq.capacity.f64();
        let (starts, weights): (Vec<SiteId>, Vec<f64>) =
            anchor.iter().zip(&mass).filter(|(_, m)| **m > 0.0).map(|(x, m)| (x, *m)).unzip();
        let alias = WeightedAliasIndex::new(weights)
            .map_err(|e| Error::Numerical(format!("equilibrium measure is not a distribution: {e}")))?;
        let excess = if cfg.bias_estimate {
            Some(capacity_excess(g, anchor, center, cfg.truncation_radius, &cfg.solver)?)
        } else {
            None
        };
        if let (Some(ex), Some(bound)) = (excess, cfg.max_bracket_rel) {
            if ex / capacity > bound {
                return Err(Error::Numerical(format!(
                    "capacity bracket relative width {:.3e} exceeds {bound:e}; use a larger truncation radius",
                    ex / capacity
                )));
            }
        }
        Ok(InterlacementSampler { g, anchor: anchor.clone(), center, trunc, slot, mass, starts, alias, capacity, excess, cfg: cfg.clone() })
    }

    pub fn graph(&self) -> &'g WeightedGraph<T> {
        self.g
    }

    pub fn anchor(&self) -> &SiteSet {
        &self.anchor
    }

    pub fn center(&self) -> SiteId {
        self.center
    }

    /// `cap_U(K')` of the killed domain.
    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    /// `(cap_U - excess, cap_U)` when the bias estimate was requested.
    pub fn capacity_bracket(&self) -> (f64, f64) {
        (self.capacity - self.excess.unwrap_or(0.0), self.capacity)
    }

    /// Bound on the bias of any vacancy probability at level `u`.
    pub fn bias_bound(&self, u: f64) -> Option<f64> {
        self.excess.map(|e| u * e)
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    fn count(&self, u_max: f64, rng: &mut TaskRng) -> Result<u64> {
        if !(u_max >= 0.0) || !u_max.is_finite() {
            return invalid(format!("u_max must be finite and >= 0 (got {u_max})"));
        }
        if u_max == 0.0 {
            return Ok(0);
        }
        let p = Poisson::new(u_max * self.capacity).map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(p.sample(rng) as u64)
    }

    #[inline]
    fn walk_from(&self, start: SiteId, rng: &mut TaskRng, mut on: impl FnMut(SiteId, u32)) -> StopReason {
        let mut x = start;
        let mut steps = 0u64;
        loop {
            let Some(l) = self.trunc.local(self.g, x) else {
                return StopReason::ExitedDomain;
            };
            on(x, self.slot[l]);
            if steps == self.cfg.step_cap {
                return StopReason::StepCap;
            }
            x = self.g.step_unchecked(x, rng);
            steps += 1;
        }
    }

    fn label(u_max: f64, rng: &mut TaskRng) -> f64 {
        u_max * (1.0 - rng.gen::<f64>())
    }

    /// Full sample with stored trajectories; the exit site is not stored.
    pub fn sample(&self, u_max: f64, seed: u64) -> Result<InterlacementSample> {
        let mut rng = task_rng(seed, 0);
        let n = self.count(u_max, &mut rng)?;
        let mut trajectories = Vec::with_capacity(n as usize);
        let mut capped = 0;
        for _ in 0..n {
            let label = Self::label(u_max, &mut rng);
            let start = self.starts[self.alias.sample(&mut rng)];
            let mut sites = Vec::new();
            let stop = self.walk_from(start, &mut rng, |x, _| sites.push(x));
            capped += (stop == StopReason::StepCap) as usize;
            trajectories.push(Trajectory { sites, label: Some(label), stop_reason: stop });
        }
        Ok(InterlacementSample {
            anchor: self.anchor.clone(),
            u_max,
            seed,
            truncation_radius: self.cfg.truncation_radius,
            capacity: Some(self.capacity),
            capacity_bracket: Some(self.capacity_bracket()),
            start_mass: Some(self.mass.clone()),
            trajectories,
            capped,
        })
    }

    /// Per-anchor-site minimum label of the visiting trajectories, the
    /// compressed form of the whole monotone family of occupancies.
    pub fn min_labels(&self, u_max: f64, rng: &mut TaskRng) -> Result<LabelField> {
        let n = self.count(u_max, rng)?;
        let mut labels = vec![f64::INFINITY; self.anchor.len()];
        let mut capped = 0;
        for _ in 0..n {
            let label = Self::label(u_max, rng);
            let start = self.starts[self.alias.sample(rng)];
            let stop = self.walk_from(start, rng, |_, s| {
                if s != u32::MAX {
                    let l = &mut labels[s as usize];
                    if label < *l {
                        *l = label;
                    }
                }
            });
            capped += (stop == StopReason::StepCap) as usize;
        }
        Ok(LabelField { u_max, labels, trajectories: n as usize, capped })
    }

    /// Min-label field grown in increasing label order. Once every label up
    /// to `us[i]` is in, `visit(i, labels)` runs; returning `true` stops the
    /// run. Monotone events can stop as soon as they are settled.
    pub fn min_labels_progressive(
        &self,
        us: &[f64],
        rng: &mut TaskRng,
        mut visit: impl FnMut(usize, &[f64]) -> bool,
    ) -> Result<()> {
        if us.iter().any(|u| !(*u >= 0.0) || !u.is_finite()) || us.windows(2).any(|w| w[1] < w[0]) {
            return invalid("levels must be finite, >= 0 and nondecreasing");
        }
        let mut labels = vec![f64::INFINITY; self.anchor.len()];
        let gap = Exp::new(self.capacity).map_err(|e| Error::Numerical(e.to_string()))?;
        let mut t = gap.sample(rng);
        for (i, &u) in us.iter().enumerate() {
            while t <= u {
                let start = self.starts[self.alias.sample(rng)];
                self.walk_from(start, rng, |_, s| {
                    if s != u32::MAX && t < labels[s as usize] {
                        labels[s as usize] = t;
                    }
                });
                t += gap.sample(rng);
            }
            if visit(i, &labels) {
                break;
            }
        }
        Ok(())
    }

    /// `P[I^u ∩ K = ∅]` at each level by Monte Carlo, one sample per replica at `max(us)`.
    pub fn avoidance_mc(&self, k: &SiteSet, us: &[f64], replicas: u64, seed: u64) -> Result<Vec<Proportion>> {
        let idx: Vec<usize> = k
            .iter()
            .map(|x| self.anchor.index_of(x).ok_or_else(|| Error::InvalidArgument(format!("site {x} not in anchor"))))
            .collect::<Result<_>>()?;
        let u_max = us.iter().cloned().fold(0.0, f64::max);
        let counts = (0..replicas)
            .into_par_iter()
            .map(|r| -> Result<Vec<u64>> {
                let f = self.min_labels(u_max, &mut task_rng(seed, r))?;
                let m = idx.iter().map(|&i| f.labels[i]).fold(f64::INFINITY, f64::min);
                Ok(us.iter().map(|&u| (m > u) as u64).collect())
            })
            .try_reduce(|| vec![0; us.len()], |a, b| Ok(a.iter().zip(&b).map(|(x, y)| x + y).collect()))?;
        Ok(counts.into_iter().map(|c| Proportion::new(c, replicas)).collect())
    }
}

/// Minimum visiting label per anchor site, `INFINITY` when unvisited.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelField {
    pub u_max: f64,
    pub labels: Vec<f64>,
    pub trajectories: usize,
    pub capped: usize,
}

impl LabelField {
    /// Occupied anchor positions at level `u`.
    pub fn occupied(&self, u: f64) -> Result<BitSet> {
        check_level(u, self.u_max)?;
        Ok(BitSet::from_fn(self.labels.len(), |i| self.labels[i] <= u))
    }
}

fn check_level(u: f64, u_max: f64) -> Result<()> {
    if !(u >= 0.0) {
        return invalid(format!("level u must be >= 0 (got {u})"));
    }
    if u > u_max {
        return invalid(format!("level u = {u} exceeds the sample's u_max = {u_max}"));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterlacementSample {
    pub anchor: SiteSet,
    pub u_max: f64,
    pub seed: u64,
    pub truncation_radius: f64,
    /// `cap_U(anchor)`, unknown after restriction.
    pub capacity: Option<f64>,
    pub capacity_bracket: Option<(f64, f64)>,
    /// Equilibrium measure on the anchor, in anchor order.
    pub start_mass: Option<Vec<f64>>,
    pub trajectories: Vec<Trajectory>,
    pub capped: usize,
}

/// Occupied sites of a window at level `u`.
#[derive(Clone, Debug)]
pub struct OccupancyField {
    pub window: SiteSet,
    pub occupied: BitSet,
    pub u: f64,
    pub seed: u64,
}

impl OccupancyField {
    pub fn is_occupied(&self, x: SiteId) -> Option<bool> {
        self.window.index_of(x).map(|i| self.occupied.get(i))
    }

    pub fn vacant_count(&self) -> usize {
        self.window.len() - self.occupied.count_ones()
    }

    pub fn export(&self) -> OccupancyExport {
        OccupancyExport { u: self.u, seed: self.seed, sites: self.window.as_slice().to_vec(), occupied: self.occupied.to_rle() }
    }
}

/// Serialized occupancy, run-length encoded along the sorted site ids.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccupancyExport {
    pub u: f64,
    pub seed: u64,
    pub sites: Vec<SiteId>,
    pub occupied: Rle,
}

/// Sample manifest written next to the trajectory file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleManifest {
    pub seed: u64,
    pub u_max: f64,
    pub anchor: String,
    pub anchor_size: usize,
    pub truncation_radius: f64,
    pub capacity_bracket: (f64, f64),
    pub trajectories: usize,
    pub capped: usize,
    pub trajectory_file: String,
}

impl InterlacementSample {
    pub fn occupancy(&self, u: f64, window: &SiteSet) -> Result<OccupancyField> {
        check_level(u, self.u_max)?;
        if !window.is_subset(&self.anchor) {
            return geometry("occupancy window is not contained in the anchor set K'");
        }
        let mut occupied = BitSet::new(window.len());
        for t in self.trajectories.iter().filter(|t| t.label.unwrap_or(f64::INFINITY) <= u) {
            for &x in &t.sites {
                if let Some(i) = window.index_of(x) {
                    occupied.set(i, true);
                }
            }
        }
        Ok(OccupancyField { window: window.clone(), occupied, u, seed: self.seed })
    }

    /// Minimum labels over the anchor, as the sampler's fast path computes them.
    pub fn label_field(&self) -> LabelField {
        let mut labels = vec![f64::INFINITY; self.anchor.len()];
        for t in &self.trajectories {
            let l = t.label.unwrap_or(f64::INFINITY);
            for &x in &t.sites {
                if let Some(i) = self.anchor.index_of(x) {
                    labels[i] = labels[i].min(l);
                }
            }
        }
        LabelField { u_max: self.u_max, labels, trajectories: self.trajectories.len(), capped: self.capped }
    }

    pub fn manifest(&self, anchor: &str, trajectory_file: &str) -> SampleManifest {
        SampleManifest {
            seed: self.seed,
            u_max: self.u_max,
            anchor: anchor.into(),
            anchor_size: self.anchor.len(),
            truncation_radius: self.truncation_radius,
            capacity_bracket: self.capacity_bracket.unwrap_or((f64::NAN, f64::NAN)),
            trajectories: self.trajectories.len(),
            capped: self.capped,
            trajectory_file: trajectory_file.into(),
        }
    }

    /// One JSON object per trajectory.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for t in &self.trajectories {
            s.push_str(&serde_json::to_string(t).expect("trajectory serializes"));
            s.push('\n');
        }
        s
    }
}

/// Keep trajectories that hit `k`, shifted to start at their first visit.
pub fn sweep_restrict(sample: &InterlacementSample, k: &SiteSet) -> Result<InterlacementSample> {
    if !k.is_subset(&sample.anchor) {
        return geometry("restriction set K is not contained in the anchor set K'");
    }
    let trajectories = sample
        .trajectories
        .iter()
        .filter_map(|t| {
            let h = t.sites.iter().position(|&x| k.contains(x))?;
            Some(Trajectory { sites: t.sites[h..].to_vec(), label: t.label, stop_reason: t.stop_reason })
        })
        .collect::<Vec<_>>();
    let capped = trajectories.iter().filter(|t| t.stop_reason == StopReason::StepCap).count();
    Ok(InterlacementSample {
        anchor: k.clone(),
        capacity: None,
        capacity_bracket: None,
        start_mass: None,
        trajectories,
        capped,
        ..sample.clone()
    })
}

/// `cov(1{x ∈ V^u}, 1{x' ∈ V^u})` from the killed Green values.
pub fn covariance_formula(u: f64, gx: f64, gy: f64, gxy: f64) -> f64 {
    let pair = crate::potential::pair_capacity(gx, gy, gxy);
    (-u * pair).exp() - (-u / gx - u / gy).exp()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrPair {
    pub distance: u32,
    pub metric_distance: f64,
    pub covariance: f64,
    pub std_err: f64,
    pub exact: f64,
    pub vacancy_x: Proportion,
    pub vacancy_y: Proportion,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrDecayReport {
    pub u: f64,
    pub truncation_radius: f64,
    pub trials: u64,
    pub pairs: Vec<CorrPair>,
    /// Log-log fit of the Monte Carlo covariances over the fit range.
    pub fit: Option<LinearFit>,
    /// The same fit applied to the exact killed covariances.
    pub exact_fit: Option<LinearFit>,
}

/// Sites at base distance `0..=max_d` from `center` along a geodesic ray.
pub fn ray_sites<T: Scalar>(g: &WeightedGraph<T>, center: SiteId, max_d: u32) -> Result<Vec<SiteId>> {
    let (y, z) = g.split(center);
    let hp = g.half_plane(y, max_d, (z, z))?;
    Ok((0..=max_d).map(|n| hp.site(g, n, z).expect("ray site")).collect())
}

/// Vacancy covariances between `center` and sites along a ray.
pub fn corr_decay<T: Scalar>(
    g: &WeightedGraph<T>,
    u: f64,
    center: SiteId,
    distances: &[u32],
    fit_range: (u32, u32),
    trials: u64,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<CorrDecayReport> {
    if trials < 100 {
        return invalid(format!("corr_decay needs at least 100 trials for a CI (got {trials})"));
    }
    if distances.is_empty() || distances.contains(&0) {
        return invalid("distances must be nonempty and positive");
    }
    let max_d = *distances.iter().max().unwrap();
    let ray = ray_sites(g, center, max_d)?;
    let anchor: SiteSet = std::iter::once(center).chain(distances.iter().map(|&d| ray[d as usize])).collect();
    let sampler = InterlacementSampler::new(g, &anchor, center, cfg)?;
    let dom = g.ball(center, cfg.truncation_radius)?.sites(g);
    let green = killed_green(g, &dom, &cfg.solver)?;
    let ix = anchor.index_of(center).unwrap();
    let iy: Vec<usize> = distances.iter().map(|&d| anchor.index_of(ray[d as usize]).unwrap()).collect();

    // Per distance: counts of (x vacant, y vacant) cells.
    let zero = vec![[0u64; 4]; distances.len()];
    let tables = (0..trials)
        .into_par_iter()
        .map(|r| -> Result<Vec<[u64; 4]>> {
            let f = sampler.min_labels(u, &mut task_rng(seed, r))?;
            let vx = (f.labels[ix] > u) as usize;
            Ok(iy
                .iter()
                .map(|&j| {
                    let mut c = [0u64; 4];
                    c[vx * 2 + (f.labels[j] > u) as usize] = 1;
                    c
                })
                .collect())
        })
        .try_reduce(
            || zero.clone(),
            |a, b| Ok(a.iter().zip(&b).map(|(p, q)| [p[0] + q[0], p[1] + q[1], p[2] + q[2], p[3] + q[3]]).collect()),
        )?;
    green.prefetch(anchor.as_slice())?;
    let gx = green.g(center, center)?.f64();
    let n = trials as f64;
    let mut pairs = Vec::new();
    for (k, &d) in distances.iter().enumerate() {
        let y = ray[d as usize];
        let c = tables[k];
        let p: Vec<f64> = c.iter().map(|v| *v as f64 / n).collect();
        let (px, py) = (p[2] + p[3], p[1] + p[3]);
        let cov = p[3] - px * py;
        // Delta-method variance of the plug-in covariance.
        let m4: f64 = (0..4)
            .map(|cell| {
                let (a, b) = ((cell / 2) as f64, (cell % 2) as f64);
                p[cell] * (a - px).powi(2) * (b - py).powi(2)
            })
            .sum();
        let se = ((m4 - cov * cov).max(0.0) / n).sqrt();
        let exact = covariance_formula(u, gx, green.g(y, y)?.f64(), green.g(center, y)?.f64());
        pairs.push(CorrPair {
            distance: d,
            metric_distance: g.metric_d(center, y),
            covariance: cov,
            std_err: se,
            exact,
            vacancy_x: Proportion::new(c[2] + c[3], trials),
            vacancy_y: Proportion::new(c[1] + c[3], trials),
        });
    }
    let in_range: Vec<&CorrPair> =
        pairs.iter().filter(|p| p.distance >= fit_range.0 && p.distance <= fit_range.1).collect();
    let fit_of = |vals: Vec<(f64, f64)>| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = vals.into_iter().filter(|(_, v)| *v > 0.0).unzip();
        loglog_fit(&xs, &ys)
    };
    let fit = fit_of(in_range.iter().map(|p| (p.metric_distance, p.covariance)).collect());
    let exact_fit = fit_of(in_range.iter().map(|p| (p.metric_distance, p.exact)).collect());
    Ok(CorrDecayReport { u, truncation_radius: cfg.truncation_radius, trials, pairs, fit, exact_fit })
}
