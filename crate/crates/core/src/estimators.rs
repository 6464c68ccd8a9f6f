//! Grid scans of event probabilities and the fits built on them: critical
//! level proxies, stretched-exponential exponents, connectivity decay and the
//! seed-scale search.

use crate::bits::BitSet;
use crate::error::{invalid, Error, Result};
use crate::graphs::{HalfPlane, SiteId, WeightedGraph};
use crate::interlacements::{InterlacementSampler, SamplerConfig};
use crate::percolation::{event_window, Detector, EventSpec, Family};
use crate::scalar::Scalar;
use crate::stats::{fit_line, Proportion, Z95};
use crate::walk::task_rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// What a scan covers and how each cell is sampled.
#[derive(Clone, Debug)]
pub struct ScanSpec {
    pub family: Family,
    pub x: SiteId,
    pub plane: Option<HalfPlane>,
    pub us: Vec<f64>,
    pub ls: Vec<u32>,
    pub trials: u64,
    pub seed: u64,
    /// Truncation radius is `trunc_factor * reach * L + 1`.
    pub trunc_factor: f64,
    pub bias_estimate: bool,
}

impl ScanSpec {
    pub fn truncation_radius(&self, l: u32) -> f64 {
        (self.trunc_factor * self.family.reach() as f64 * l as f64).ceil() + 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanCell {
    pub u: f64,
    #[serde(rename = "L")]
    pub l: u32,
    pub successes: u64,
    pub trials: u64,
    pub invalid: u64,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub skipped: bool,
}

impl ScanCell {
    fn new(u: f64, l: u32, successes: u64, trials: u64) -> Self {
        let p = Proportion::new(successes, trials);
        let (ci_lo, ci_hi) = p.ci95();
        ScanCell { u, l, successes, trials, invalid: 0, estimate: p.estimate(), ci_lo, ci_hi, skipped: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScanTable {
    pub family: Family,
    pub us: Vec<f64>,
    #[serde(rename = "Ls")]
    pub ls: Vec<u32>,
    /// Row-major: `cells[i_l * us.len() + i_u]`.
    pub cells: Vec<ScanCell>,
    pub seed: u64,
    pub truncation_radii: Vec<f64>,
    /// Per `L`, bound on the truncation bias at the largest level.
    pub bias_bounds: Vec<Option<f64>>,
}

impl ScanTable {
    pub fn cell(&self, i_u: usize, i_l: usize) -> &ScanCell {
        &self.cells[i_l * self.us.len() + i_u]
    }

    /// Estimates at level index `i_u`, in `L` order.
    pub fn column(&self, i_u: usize) -> Vec<f64> {
        (0..self.ls.len()).map(|i| self.cell(i_u, i).estimate).collect()
    }

    /// Per `u`: the `L`-sequence never rises (A) or falls (B) by more than
    /// the combined 95% half-widths.
    pub fn monotone_in_l(&self) -> Vec<bool> {
        let sign = if self.family == Family::A { 1.0 } else { -1.0 };
        (0..self.us.len())
            .map(|i| {
                (1..self.ls.len()).all(|j| {
                    let (a, b) = (self.cell(i, j - 1), self.cell(i, j));
                    sign * (b.estimate - a.estimate) <= (a.ci_hi - a.ci_lo + b.ci_hi - b.ci_lo) / 2.0
                })
            })
            .collect()
    }

    /// Per `L`: estimates move in the monotone direction in `u` within CI.
    pub fn monotone_in_u(&self) -> Vec<bool> {
        let sign = if self.family == Family::A { 1.0 } else { -1.0 };
        (0..self.ls.len())
            .map(|j| {
                (1..self.us.len()).all(|i| {
                    let (a, b) = (self.cell(i - 1, j), self.cell(i, j));
                    sign * (b.estimate - a.estimate) <= (a.ci_hi - a.ci_lo + b.ci_hi - b.ci_lo) / 2.0
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,u,L,successes,trials,invalid,estimate,ci_lo,ci_hi,skipped,truncation_radius,bias_bound\n");
        for (j, &l) in self.ls.iter().enumerate() {
            for i in 0..self.us.len() {
                let c = self.cell(i, j);
                s += &format!(
                    "{:?},{},{},{},{},{},{},{},{},{},{},{}\n",
                    self.family,
                    c.u,
                    l,
                    c.successes,
                    c.trials,
                    c.invalid,
                    c.estimate,
                    c.ci_lo,
                    c.ci_hi,
                    c.skipped,
                    self.truncation_radii[j],
                    self.bias_bounds[j].map(|b| b.to_string()).unwrap_or_default()
                );
            }
        }
        s
    }
}

fn check_levels(us: &[f64]) -> Result<()> {
    if us.is_empty() || us.iter().any(|u| !(*u >= 0.0) || !u.is_finite()) {
        return invalid("levels must be finite and >= 0");
    }
    if us.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("the u grid must be strictly increasing");
    }
    Ok(())
}

/// Event probabilities on the `u x L` grid. Every trial samples one labelled
/// interlacement at the top level and reads all levels off it.
pub fn crossing_scan<T: Scalar>(g: &WeightedGraph<T>, spec: &ScanSpec) -> Result<ScanTable> {
    check_levels(&spec.us)?;
    if spec.trials == 0 || spec.ls.is_empty() || spec.ls.contains(&0) {
        return invalid("need positive trials and a non-empty grid of positive scales");
    }
    if !(spec.trunc_factor >= 1.0) {
        return invalid("trunc_factor must be >= 1");
    }
    let u_max = *spec.us.last().expect("non-empty");
    let mut cells = Vec::new();
    let mut radii = Vec::new();
    let mut bias = Vec::new();
    for (j, &l) in spec.ls.iter().enumerate() {
        let ev = EventSpec { family: spec.family, x: spec.x, l, plane: spec.plane.clone() };
        let window = event_window(g, &ev)?.indexed(g.base.len());
        let det = Detector::new(g, &ev, &window)?;
        let mut cfg = SamplerConfig::new(spec.truncation_radius(l));
        cfg.bias_estimate = spec.bias_estimate;
        let sampler = InterlacementSampler::new(g, &window.sites(g), spec.x, &cfg)?;
        let counts = (0..spec.trials)
            .into_par_iter()
            .map(|r| -> Result<Vec<u64>> {
                // The event is monotone in u, so it is settled at the first
                // level where it flips away from its u = 0 value.
                let mut out = vec![0u64; spec.us.len()];
                let at_zero = spec.family == Family::A;
                sampler.min_labels_progressive(&spec.us, &mut task_rng(spec.seed, ((j as u64) << 40) | r), |i, labels| {
                    let sigma = BitSet::from_fn(labels.len(), |a| labels[a] <= spec.us[i]);
                    let hit = det.eval(&sigma);
                    if hit != at_zero {
                        out[i..].iter_mut().for_each(|o| *o = hit as u64);
                        return true;
                    }
                    out[i] = hit as u64;
                    false
                })?;
                Ok(out)
            })
            .try_reduce(|| vec![0; spec.us.len()], |a, b| Ok(a.iter().zip(&b).map(|(p, q)| p + q).collect()))?;
        cells.extend(spec.us.iter().zip(counts).map(|(&u, c)| ScanCell::new(u, l, c, spec.trials)));
        radii.push(cfg.truncation_radius);
        bias.push(sampler.bias_bound(u_max));
    }
    Ok(ScanTable {
        family: spec.family,
        us: spec.us.clone(),
        ls: spec.ls.clone(),
        cells,
        seed: spec.seed,
        truncation_radii: radii,
        bias_bounds: bias,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalKind {
    UStarStarProxy,
    UTildeProxy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticalEstimate {
    pub kind: CriticalKind,
    /// Adjacent grid points; `hi` is `None` when the rule never fired.
    pub lo: f64,
    pub hi: Option<f64>,
    pub open_ended: bool,
    pub selected_index: Option<usize>,
    pub theta: f64,
    pub rule: String,
}

/// Finite-grid decision rule on a scan table. Family A: the first `u` whose
/// `L`-sequence is nonincreasing with last value below `theta`. Family B: the
/// first `u` whose `L`-sequence is nondecreasing with last value at least
/// `theta`. The bracket is `[previous grid u, selected u]`.
pub fn critical_proxy(table: &ScanTable, theta: f64) -> Result<CriticalEstimate> {
    if table.ls.len() < 3 {
        return invalid("the proxy rule needs at least 3 scales");
    }
    if table.cells.iter().any(|c| c.skipped) {
        return invalid("the scan table has skipped cells");
    }
    if !(theta > 0.0 && theta < 1.0) {
        return invalid("theta must lie in (0, 1)");
    }
    let (kind, rule) = match table.family {
        Family::A => (
            CriticalKind::UStarStarProxy,
            format!("first u with P nonincreasing over L = {:?} and P(L_max) < {theta}", table.ls),
        ),
        Family::B => (
            CriticalKind::UTildeProxy,
            format!("first u with P nondecreasing over L = {:?} and P(L_max) >= {theta}", table.ls),
        ),
        Family::S => return Err(Error::InvalidArgument("critical proxies are defined for families A and B".into())),
    };
    let fires = |i: usize| {
        let col = table.column(i);
        let last = *col.last().expect("scales");
        match table.family {
            Family::A => col.windows(2).all(|w| w[1] <= w[0]) && last < theta,
            _ => col.windows(2).all(|w| w[1] >= w[0]) && last >= theta,
        }
    };
    let sel = (0..table.us.len()).find(|&i| fires(i));
    Ok(match sel {
        Some(i) => CriticalEstimate {
            kind,
            lo: if i == 0 { 0.0 } else { table.us[i - 1] },
            hi: Some(table.us[i]),
            open_ended: false,
            selected_index: Some(i),
            theta,
            rule,
        },
        None => CriticalEstimate {
            kind,
            lo: *table.us.last().expect("levels"),
            hi: None,
            open_ended: true,
            selected_index: None,
            theta,
            rule,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    StretchedExponential,
    PowerLaw,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FitModel,
    pub exponent: f64,
    pub prefactor: f64,
    pub residual: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Smallest and largest abscissa used.
    pub window: (f64, f64),
    pub points: usize,
}

/// Fit `p = exp(-c L^kappa)` through `ln(-ln p) = ln c + kappa ln L`.
/// With trial counts the points are weighted by their delta-method
/// variances `p(1-p)/(n (p ln p)^2)`.
pub fn stretch_fit(ls: &[f64], ps: &[f64], trials: Option<&[u64]>) -> Result<FitResult> {
    if ls.len() != ps.len() || trials.is_some_and(|t| t.len() != ls.len()) {
        return invalid("scales, estimates and trial counts must have equal lengths");
    }
    if ls.len() < 4 {
        return invalid("stretch_fit needs at least 4 scales");
    }
    if ps.iter().any(|p| !(*p > 0.0 && *p < 1.0)) || ls.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Numerical("degenerate column: estimates must lie strictly between 0 and 1".into()));
    }
    let xs: Vec<f64> = ls.iter().map(|l| l.ln()).collect();
    let ys: Vec<f64> = ps.iter().map(|p| (-p.ln()).ln()).collect();
    let weights: Option<Vec<f64>> = trials.map(|t| {
        ps.iter().zip(t).map(|(&p, &n)| (n as f64) * (p * p.ln()).powi(2) / (p * (1.0 - p))).collect()
    });
    let fit = fit_line(&xs, &ys, weights.as_deref()).ok_or_else(|| Error::Numerical("degenerate scale grid".into()))?;
    let residual = (xs.iter().zip(&ys).map(|(x, y)| (y - fit.intercept - fit.slope * x).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    if !fit.slope.is_finite() {
        return Err(Error::Numerical("non-finite exponent".into()));
    }
    let (ci_lo, ci_hi) = fit.slope_ci95();
    Ok(FitResult {
        model: FitModel::StretchedExponential,
        exponent: fit.slope,
        prefactor: fit.intercept.exp(),
        residual,
        ci_lo,
        ci_hi,
        window: (ls.iter().cloned().fold(f64::INFINITY, f64::min), ls.iter().cloned().fold(0.0, f64::max)),
        points: ls.len(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConnectivityRow {
    pub distance: u32,
    pub target: SiteId,
    pub connect: Proportion,
    /// `x` connected to `∂_int B(x, d - 1)`, the inclusion bound.
    pub exit: Proportion,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConnectivityReport {
    pub u: f64,
    pub center: SiteId,
    pub rows: Vec<ConnectivityRow>,
    pub fit: Option<FitResult>,
    pub fit_error: Option<String>,
    pub window_radius: f64,
    pub truncation_radius: f64,
    pub bias_bound: Option<f64>,
}

/// `P[x <-> x']` in the vacant set of the window `B(x, max d + margin)`, with
/// `x'` at base distance `d` along the first ray leaving `x`.
#[allow(clippy::too_many_arguments)]
pub fn connectivity_decay<T: Scalar>(
    g: &WeightedGraph<T>,
    u: f64,
    center: SiteId,
    distances: &[u32],
    margin: f64,
    trials: u64,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<ConnectivityReport> {
    if !(u >= 0.0) || trials == 0 || distances.is_empty() || distances.contains(&0) {
        return invalid("need u >= 0, positive trials and positive distances");
    }
    let dmax = *distances.iter().max().expect("non-empty");
    let wr = dmax as f64 + margin;
    let window = g.ball(center, wr)?.region.indexed(g.base.len());
    let (y0, z0) = g.split(center);
    // A geodesic ray from the centre's base vertex.
    let far = (0..g.base.len() as u32).filter(|&y| g.base.dist(y0, y) == dmax).min().ok_or_else(|| {
        Error::Geometry(format!("no base vertex at distance {dmax} from the centre"))
    })?;
    let mut targets = Vec::new();
    for &d in distances {
        let y = (0..g.base.len() as u32)
            .filter(|&y| g.base.dist(y0, y) == d && g.base.dist(y, far) == dmax - d)
            .min()
            .ok_or_else(|| Error::Geometry(format!("no base vertex at distance {d}")))?;
        targets.push(g.site(y, z0).expect("same height"));
    }
    let anchor = window.sites(g);
    let sampler = InterlacementSampler::new(g, &anchor, center, cfg)?;
    let local_t: Vec<usize> = targets.iter().map(|&t| window.local(g, t).expect("target in window")).collect();
    let dist_of: Vec<f64> = (0..window.len()).map(|i| g.metric_d(center, window.site(g, i))).collect();
    let c0 = window.local(g, center).expect("centre");
    let counts = (0..trials)
        .into_par_iter()
        .map(|r| -> Result<(Vec<u64>, Vec<u64>)> {
            let f = sampler.min_labels(u, &mut task_rng(seed, r))?;
            let vacant = |i: usize| f.labels[i] > u;
            let mut seen = vec![false; window.len()];
            let mut reach = 0.0f64;
            if vacant(c0) {
                let mut q = VecDeque::from([c0]);
                seen[c0] = true;
                while let Some(i) = q.pop_front() {
                    reach = reach.max(dist_of[i]);
                    for (nb, _) in g.neighbors(window.site(g, i)) {
                        if let Some(j) = window.local(g, nb) {
                            if !seen[j] && vacant(j) {
                                seen[j] = true;
                                q.push_back(j);
                            }
                        }
                    }
                }
            }
            let conn = local_t.iter().map(|&t| seen[t] as u64).collect();
            let exit = distances.iter().map(|&d| (seen[c0] && reach > d as f64 - 1.0 + 1e-9) as u64).collect();
            Ok((conn, exit))
        })
        .try_reduce(
            || (vec![0; distances.len()], vec![0; distances.len()]),
            |a, b| {
                Ok((a.0.iter().zip(&b.0).map(|(p, q)| p + q).collect(), a.1.iter().zip(&b.1).map(|(p, q)| p + q).collect()))
            },
        )?;
    let rows: Vec<ConnectivityRow> = distances
        .iter()
        .enumerate()
        .map(|(k, &d)| ConnectivityRow {
            distance: d,
            target: targets[k],
            connect: Proportion::new(counts.0[k], trials),
            exit: Proportion::new(counts.1[k], trials),
        })
        .collect();
    let usable: Vec<&ConnectivityRow> = rows.iter().filter(|r| r.connect.successes > 0 && r.connect.successes < trials).collect();
    let ls: Vec<f64> = usable.iter().map(|r| r.distance as f64).collect();
    let ps: Vec<f64> = usable.iter().map(|r| r.connect.estimate()).collect();
    let ns: Vec<u64> = usable.iter().map(|r| r.connect.trials).collect();
    let (fit, fit_error) = match stretch_fit(&ls, &ps, Some(&ns)) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(ConnectivityReport {
        u,
        center,
        rows,
        fit,
        fit_error,
        window_radius: wr,
        truncation_radius: cfg.truncation_radius,
        bias_bound: sampler.bias_bound(u),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScaleCandidate {
    pub ell0: u64,
    #[serde(rename = "L0")]
    pub l0: u32,
    /// `P[G at L0]` against `1/2` and `P[G at ell0 L0]` against `1/4`.
    pub p0: Proportion,
    pub p1: Proportion,
    pub accepted: bool,
    pub bias_bound: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScaleSearch {
    pub family: Family,
    pub u_bar: f64,
    pub candidates: Vec<ScaleCandidate>,
    pub selected: Option<(u64, u32)>,
}

/// Smallest `(ell0, L0)`, ordered by `ell0` then `L0`, whose empirical event
/// probabilities stay below `2^{-2^n}` for `n = 0, 1`: accepted when the
/// lower 95% bound is at most the target.
#[allow(clippy::too_many_arguments)]
pub fn seed_scale_search<T: Scalar>(
    g: &WeightedGraph<T>,
    family: Family,
    x: SiteId,
    plane: Option<&HalfPlane>,
    u_bar: f64,
    grid: &[(u64, u32)],
    trials: u64,
    seed: u64,
    trunc_factor: f64,
) -> Result<ScaleSearch> {
    if grid.is_empty() {
        return invalid("empty candidate grid");
    }
    let mut order: Vec<(u64, u32)> = grid.to_vec();
    order.sort_unstable();
    order.dedup();
    let mut candidates = Vec::new();
    let mut selected = None;
    for (k, &(ell0, l0)) in order.iter().enumerate() {
        let l1 = u32::try_from(ell0 * l0 as u64).map_err(|_| Error::InvalidArgument("scale overflow".into()))?;
        let spec = ScanSpec {
            family,
            x,
            plane: plane.cloned(),
            us: vec![u_bar],
            ls: vec![l0, l1],
            trials,
            seed: seed.wrapping_add(k as u64),
            trunc_factor,
            bias_estimate: false,
        };
        let t = crossing_scan(g, &spec)?;
        let p0 = Proportion::new(t.cell(0, 0).successes, trials);
        let p1 = Proportion::new(t.cell(0, 1).successes, trials);
        let accepted = p0.wilson(Z95).0 <= 0.5 && p1.wilson(Z95).0 <= 0.25;
        if accepted && selected.is_none() {
            selected = Some((ell0, l0));
        }
        candidates.push(ScaleCandidate { ell0, l0, p0, p1, accepted, bias_bound: t.bias_bounds[1] });
        if selected.is_some() {
            break;
        }
    }
    Ok(ScaleSearch { family, u_bar, candidates, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{build_graph, GraphModel};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn z3(r: i64) -> WeightedGraph {
        build_graph(&GraphModel::z_lattice(2, r, r)).unwrap()
    }

    fn synthetic(family: Family, us: &[f64], ls: &[u32], p: impl Fn(f64, u32) -> f64) -> ScanTable {
        let n = 1_000_000;
        let mut cells = Vec::new();
        for &l in ls {
            for &u in us {
                cells.push(ScanCell::new(u, l, (p(u, l) * n as f64).round() as u64, n));
            }
        }
        ScanTable {
            family,
            us: us.to_vec(),
            ls: ls.to_vec(),
            cells,
            seed: 0,
            truncation_radii: vec![0.0; ls.len()],
            bias_bounds: vec![None; ls.len()],
        }
    }

    #[test]
    fn proxy_on_closed_form() {
        let us: Vec<f64> = (1..=20).map(|k| k as f64 * 0.05).collect();
        let t = synthetic(Family::A, &us, &[2, 4, 8, 16], |u, l| (-u * l as f64).exp());
        let c = critical_proxy(&t, 0.05).unwrap();
        // exp(-16 u) < 0.05 first at u = 0.2.
        assert_eq!(c.hi, Some(0.2));
        assert!((c.lo - 0.15).abs() < 1e-12);
        assert!(!c.open_ended);
        let ones = synthetic(Family::A, &us, &[2, 4, 8], |_, _| 1.0);
        let c = critical_proxy(&ones, 0.05).unwrap();
        assert!(c.open_ended && c.hi.is_none() && c.lo == 1.0);
        let b = synthetic(Family::B, &us, &[2, 4, 8], |u, l| 1.0 - (-u * l as f64).exp());
        let c = critical_proxy(&b, 0.05).unwrap();
        assert_eq!(c.kind, CriticalKind::UTildeProxy);
        assert_eq!(c.hi, Some(0.05));
        assert!(critical_proxy(&synthetic(Family::A, &us, &[2, 4], |_, _| 0.0), 0.05).is_err());
    }

    #[test]
    fn stretch_fit_recovers_exponents() {
        let ls = [2.0, 4.0, 8.0, 16.0, 32.0];
        for kappa in [0.3, 0.5, 0.8, 1.0] {
            let ps: Vec<f64> = ls.iter().map(|l: &f64| (-0.2 * l.powf(kappa)).exp()).collect();
            let f = stretch_fit(&ls, &ps, None).unwrap();
            assert!((f.exponent - kappa).abs() < 0.02, "{kappa}: {}", f.exponent);
            assert!((f.prefactor - 0.2).abs() < 1e-9);
        }
        let lin: Vec<f64> = ls.iter().map(|l| (-0.05 * l).exp()).collect();
        assert!((stretch_fit(&ls, &lin, None).unwrap().exponent - 1.0).abs() < 1e-9);
        assert!(stretch_fit(&ls, &[1.0, 0.5, 0.2, 0.1, 0.0], None).is_err());
        assert!(stretch_fit(&ls[..3], &lin[..3], None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn stretch_fit_with_binomial_noise(kappa in 0.3f64..1.0, c in 0.05f64..0.3, seed in 0u64..1000) {
            use rand::Rng;
            let ls = [2.0, 4.0, 8.0, 16.0];
            let n = 2_000_000u64;
            let mut rng = task_rng(seed, 0);
            let ps: Vec<f64> = ls.iter().map(|l: &f64| {
                let p = (-c * l.powf(kappa)).exp();
                let sd = (p * (1.0 - p) / n as f64).sqrt();
                (p + sd * (rng.gen::<f64>() - 0.5) * 3.4).clamp(1e-9, 1.0 - 1e-9)
            }).collect();
            let f = stretch_fit(&ls, &ps, Some(&[n; 4])).unwrap();
            prop_assert!(f.ci_lo <= f.exponent && f.exponent <= f.ci_hi);
            prop_assert!((f.exponent - kappa).abs() < 0.1);
        }
    }

    #[test]
    fn trivial_columns() {
        let g = z3(14);
        let o = g.origin();
        let spec = ScanSpec {
            family: Family::A,
            x: o,
            plane: None,
            us: vec![0.0, 1.0],
            ls: vec![1, 2],
            trials: 40,
            seed: 3,
            trunc_factor: 1.5,
            bias_estimate: false,
        };
        let t = crossing_scan(&g, &spec).unwrap();
        assert_eq!(t.column(0), vec![1.0, 1.0]);
        assert!(t.monotone_in_u().iter().all(|&m| m));
        let again = crossing_scan(&g, &spec).unwrap();
        assert_eq!(t.to_csv(), again.to_csv());
        let hp = g.half_plane(g.base_of(o), 12, (-12, 12)).unwrap();
        let b = ScanSpec { family: Family::B, plane: Some(hp), ..spec.clone() };
        let t = crossing_scan(&g, &b).unwrap();
        assert_eq!(t.column(0), vec![0.0, 0.0]);
        let bad = ScanSpec { us: vec![1.0, 0.5], ..spec };
        assert!(crossing_scan(&g, &bad).is_err());
    }

    #[test]
    fn connectivity_trivial_and_inclusion() {
        let g = z3(16);
        let o = g.origin();
        let cfg = SamplerConfig::new(9.0);
        let r = connectivity_decay(&g, 0.0, o, &[1, 2, 3], 1.0, 20, 1, &cfg).unwrap();
        assert!(r.rows.iter().all(|row| row.connect.estimate() == 1.0));
        let r = connectivity_decay(&g, 1.0, o, &[1, 2, 3, 4, 5], 1.0, 400, 2, &cfg).unwrap();
        for row in &r.rows {
            assert!(row.connect.successes <= row.exit.successes);
            assert_eq!(g.metric_d(o, row.target), row.distance as f64);
        }
        let p: Vec<f64> = r.rows.iter().map(|row| row.connect.estimate()).collect();
        assert!(p.windows(2).all(|w| w[1] <= w[0] + 0.08));
    }

    #[test]
    fn scale_search_extremes() {
        let g = z3(28);
        let o = g.origin();
        let grid = [(4, 1), (4, 2)];
        let s = seed_scale_search(&g, Family::A, o, None, 0.0, &grid, 20, 1, 1.5).unwrap();
        assert!(s.selected.is_none());
        assert_eq!(s.candidates.len(), 2);
        let s = seed_scale_search(&g, Family::A, o, None, 30.0, &grid, 60, 1, 1.5).unwrap();
        assert_eq!(s.selected, Some((4, 1)));
        let again = seed_scale_search(&g, Family::A, o, None, 30.0, &grid[..1], 60, 99, 1.5).unwrap();
        assert_eq!(again.selected, Some((4, 1)));
    }
}
