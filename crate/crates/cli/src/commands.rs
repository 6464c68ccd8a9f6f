use clap::ValueEnum;
use gxz::estimators::{connectivity_decay, critical_proxy, crossing_scan, seed_scale_search, stretch_fit, ScanSpec};
use gxz::interlacements::{corr_decay, InterlacementSampler, SamplerConfig};
use gxz::percolation::{bound_shapes, cluster_tail, crossing_prob, segment_hit_probs, segment_height, EventSpec, Family, Rectangle};
use gxz::potential::{
    capacity_estimate, capacity_probe, equilibrium_measure, green_estimate, hitting_estimate, volume_probe, SolverConfig,
};
use gxz::renorm::{
    auto_embedding, cover, decouple_verify, excursion_spectrum, inclusion_check, level_schedule, validate_embedding,
    Coupling, ScaleLadder,
};
use gxz::{Graph, SiteSet};
use serde_json::json;

use crate::config::JobConfig;
use crate::model::{self, coords, default_plane, set_reach, site_reach};
use crate::output::{svg_plot, Run};
use crate::Failure;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GraphAction {
    /// Write the adjacency file and its JSON header.
    Build,
    Info,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PotentialAction {
    Green,
    Capacity,
    Hitting,
    Equilibrium,
    /// Volume and capacity growth exponents.
    Probe,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InterlaceAction {
    Sample,
    Avoidance,
    Corr,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PercoAction {
    Crossing,
    Tail,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RenormAction {
    Cover,
    Embed,
    Inclusion,
    Decouple,
    Schedule,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EstimateAction {
    CrossingScan,
    StretchFit,
    Connectivity,
    ScaleSearch,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DiagnoseAction {
    Segments,
    Excursions,
}

const DEFAULT_TRUNC_FACTOR: f64 = 1.5;

fn solver() -> SolverConfig {
    SolverConfig::default()
}

fn sampler_cfg(cfg: &JobConfig, default_radius: f64) -> SamplerConfig {
    let mut s = SamplerConfig::new(cfg.truncation_radius.unwrap_or(default_radius));
    s.bias_estimate = cfg.bias_estimate.unwrap_or(false);
    s
}

fn trunc_factor(cfg: &JobConfig) -> Result<f64, Failure> {
    let f = cfg.trunc_factor.unwrap_or(DEFAULT_TRUNC_FACTOR);
    if !(f >= 1.0) || !f.is_finite() {
        return Err(Failure::usage("--trunc-factor must be at least 1"));
    }
    Ok(f)
}

/// Truncation radius for an event of `family` at scale `l`.
fn event_trunc(cfg: &JobConfig, family: Family, l: u32) -> Result<f64, Failure> {
    Ok(match cfg.truncation_radius {
        Some(r) => r,
        None => (trunc_factor(cfg)? * family.reach() as f64 * l as f64).ceil() + 1.0,
    })
}

fn radii(cfg: &JobConfig, default: &[f64]) -> Result<Vec<f64>, Failure> {
    let r = cfg.radii.clone().unwrap_or_else(|| default.to_vec());
    if r.is_empty() || r.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Failure::usage("--radii must be positive"));
    }
    Ok(r)
}

fn max(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, f64::max)
}

fn csv_num(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

fn plane_for(g: &Graph, family: Family) -> Result<Option<gxz::graphs::HalfPlane>, Failure> {
    Ok(if family == Family::B { Some(default_plane(g)?) } else { None })
}

pub fn graph(action: GraphAction, cfg: &JobConfig, run: &mut Run) -> Result<(), Failure> {
    let need = max(&radii(cfg, &[8.0])?);
    let g = model::graph(cfg, need)?;
    match action {
        GraphAction::Build => {
            std::fs::create_dir_all(run.dir()).map_err(|e| Failure::io(run.dir(), e))?;
            let header = g.write_files(run.dir(), "graph")?;
            run.adopt("graph.json")?;
            run.adopt(&header.adjacency_file)?;
        }
        GraphAction::Info => {
            let (zlo, zhi) = g.z_range();
            run.json(
                "graph.json",
                &json!({
                    "model": g.model.label(),
                    "alpha": g.metric.alpha,
                    "beta": g.metric.beta,
                    "nu": g.metric.nu(),
                    "base_vertices": g.base.len(),
                    "base_edges": g.base.num_edges(),
                    "z_range": [zlo, zhi],
                    "sites": g.num_sites(),
                    "unit_weights": g.has_unit_weights(),
                }),
            )?;
        }
    }
    Ok(())
}

pub fn potential(action: PotentialAction, cfg: &JobConfig, run: &mut Run) -> Result<(), Failure> {
    let sx = site_reach(cfg.x.as_deref());
    match action {
        PotentialAction::Green => {
            let sy = site_reach(cfg.y.as_deref());
            let base = (4.0 * (sx + sy)).max(8.0);
            let rs = radii(cfg, &[base, 2.0 * base])?;
            let g = model::graph(cfg, sx + max(&rs) + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let y = model::site(&g, cfg.y.as_deref())?;
            let est = green_estimate(&g, x, y, x, &rs, &solver())?;
            run.json("green.json", &est)?;
        }
        PotentialAction::Capacity => {
            let spec = cfg.set.as_deref().unwrap_or("point");
            let base = (4.0 * set_reach(spec)?).max(8.0);
            let rs = radii(cfg, &[base, 2.0 * base])?;
            let g = model::graph(cfg, sx + max(&rs) + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let k = model::set(&g, spec, x)?;
            run.json("capacity.json", &capacity_estimate(&g, &k, x, &rs, &solver())?)?;
        }
        PotentialAction::Hitting => {
            // Start at --x, target set centred at --y.
            let spec = cfg.set.as_deref().unwrap_or("point");
            let sy = site_reach(cfg.y.as_deref());
            let base = (4.0 * (set_reach(spec)? + sx + sy)).max(8.0);
            let rs = radii(cfg, &[base, 2.0 * base])?;
            let g = model::graph(cfg, sy + max(&rs) + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let center = model::site(&g, cfg.y.as_deref())?;
            let k = model::set(&g, spec, center)?;
            run.json("hitting.json", &hitting_estimate(&g, x, &k, center, &rs, &solver())?)?;
        }
        PotentialAction::Equilibrium => {
            let spec = cfg.set.as_deref().unwrap_or("point");
            let rk = set_reach(spec)?;
            let r = radii(cfg, &[(4.0 * rk).max(8.0)])?[0];
            let g = model::graph(cfg, sx + r + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let k = model::set(&g, spec, x)?;
            let dom = g.ball(x, r)?.sites(&g);
            let eq = equilibrium_measure(&g, &k, &dom, &solver())?;
            let mut csv = String::from("site,coords,mass\n");
            for (s, m) in eq.equilibrium.set.iter().zip(&eq.equilibrium.measure) {
                csv += &format!("{s},{},{m}\n", coords(&g, s));
            }
            run.write("equilibrium.csv", csv.as_bytes())?;
            run.json(
                "equilibrium.json",
                &json!({"quantity": "killed_capacity", "value": eq.equilibrium.capacity, "radius": r,
                        "set_size": k.len(), "solver_stats": eq.equilibrium.stats}),
            )?;
        }
        PotentialAction::Probe => {
            let scales = radii(cfg, &[2.0, 4.0, 8.0, 16.0])?;
            let ratio = 4.0;
            let g = model::graph(cfg, sx + ratio * max(&scales) + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let vol = volume_probe(&g, x, &scales)?;
            let cap = capacity_probe(&g, x, &scales, ratio, &solver())?;
            let (a, b) = (g.metric.alpha, g.metric.beta);
            run.json(
                "probe.json",
                &json!({"volume": vol, "capacity": cap, "expected_volume_exponent": a + b / 2.0,
                        "expected_capacity_exponent": a - b / 2.0, "killing_ratio": ratio}),
            )?;
        }
    }
    Ok(())
}

pub fn interlace(action: InterlaceAction, cfg: &JobConfig, run: &mut Run) -> Result<(), Failure> {
    let sx = site_reach(cfg.x.as_deref());
    match action {
        InterlaceAction::Sample => {
            let u_max = cfg.u_max.ok_or_else(|| Failure::usage("--u-max is required"))?;
            if !(u_max > 0.0) || !u_max.is_finite() {
                return Err(Failure::usage(format!("--u-max must be positive and finite (got {u_max})")));
            }
            let seed = cfg.seed()?;
            let spec = cfg.set.as_deref().unwrap_or("ball:r=2");
            let tr = cfg.truncation_radius.unwrap_or((4.0 * set_reach(spec)?).max(8.0));
            let g = model::graph(cfg, sx + tr + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let k = model::set(&g, spec, x)?;
            let sampler = InterlacementSampler::new(&g, &k, x, &sampler_cfg(cfg, tr))?;
            run.bias("capacity truncation at u_max", sampler.bias_bound(u_max));
            let sample = sampler.sample(u_max, seed)?;
            run.write("trajectories.jsonl", sample.to_jsonl().as_bytes())?;
            let labels = sample.label_field();
            let mut csv = String::from("site,coords,min_label\n");
            for (s, l) in k.iter().zip(&labels.labels) {
                csv += &format!("{s},{},{}\n", coords(&g, s), csv_num(*l));
            }
            run.write("labels.csv", csv.as_bytes())?;
            run.json("sample.json", &sample.manifest(spec, "trajectories.jsonl"))?;
        }
        InterlaceAction::Avoidance => {
            let seed = cfg.seed()?;
            let us = cfg.us()?;
            let spec = cfg.set.as_deref().unwrap_or("ball:r=1");
            let tr = cfg.truncation_radius.unwrap_or((4.0 * set_reach(spec)?).max(8.0));
            let g = model::graph(cfg, sx + tr + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let k = model::set(&g, spec, x)?;
            let sampler = InterlacementSampler::new(&g, &k, x, &sampler_cfg(cfg, tr))?;
            let cap = sampler.capacity();
            let props = sampler.avoidance_mc(&k, &us, cfg.trials(10_000)?, seed)?;
            let mut csv = String::from("u,estimate,ci_lo,ci_hi,trials,exact\n");
            for (u, p) in us.iter().zip(&props) {
                let (lo, hi) = p.ci95();
                csv += &format!("{u},{},{lo},{hi},{},{}\n", p.estimate(), p.trials, (-u * cap).exp());
                run.bias(format!("capacity truncation at u={u}"), sampler.bias_bound(*u));
            }
            run.write("avoidance.csv", csv.as_bytes())?;
        }
        InterlaceAction::Corr => {
            let seed = cfg.seed()?;
            let u = cfg.u_single()?;
            let md = cfg.max_distance.unwrap_or(8);
            if md == 0 {
                return Err(Failure::usage("--max-distance must be positive"));
            }
            let tr = cfg.truncation_radius.unwrap_or(4.0 * md as f64 + 8.0);
            let g = model::graph(cfg, sx + tr + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let ds: Vec<u32> = (1..=md).collect();
            let rep = corr_decay(&g, u, x, &ds, (1, md), cfg.trials(5000)?, seed, &sampler_cfg(cfg, tr))?;
            let mut csv = String::from("distance,metric_distance,covariance,std_err,exact\n");
            for p in &rep.pairs {
                csv += &format!("{},{},{},{},{}\n", p.distance, p.metric_distance, p.covariance, p.std_err, p.exact);
            }
            run.write("corr.csv", csv.as_bytes())?;
            run.json("corr.json", &rep)?;
        }
    }
    Ok(())
}

pub fn perco(action: PercoAction, cfg: &JobConfig, run: &mut Run) -> Result<(), Failure> {
    let sx = site_reach(cfg.x.as_deref());
    let seed = cfg.seed()?;
    let us = cfg.us()?;
    let ls = cfg.ls()?;
    let trials = cfg.trials(1000)?;
    match action {
        PercoAction::Crossing => {
            let family = cfg.family()?;
            let tmax = ls.iter().map(|&l| event_trunc(cfg, family, l)).collect::<Result<Vec<_>, _>>()?;
            let g = model::graph(cfg, sx + max(&tmax) + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let plane = plane_for(&g, family)?;
            let mut csv = String::from("family,L,u,estimate,ci_lo,ci_hi,trials\n");
            for (&l, &tr) in ls.iter().zip(&tmax) {
                let spec = EventSpec { family, x, l, plane: plane.clone() };
                for e in crossing_prob(&g, &spec, &us, trials, seed, &sampler_cfg(cfg, tr))? {
                    csv += &format!("{family},{l},{},{},{},{},{}\n", e.u, e.estimate, e.ci_lo, e.ci_hi, e.trials);
                }
            }
            run.write("crossing.csv", csv.as_bytes())?;
        }
        PercoAction::Tail => {
            let tf = trunc_factor(cfg)?;
            let trs: Vec<f64> = ls.iter().map(|&l| cfg.truncation_radius.unwrap_or((tf * 2.0 * l as f64).ceil() + 1.0)).collect();
            let g = model::graph(cfg, sx + max(&trs) + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let plane = default_plane(&g)?;
            let mut csv = String::from("L,u,estimate,ci_lo,ci_hi,valid_trials,invalid_trials\n");
            for (&l, &tr) in ls.iter().zip(&trs) {
                for e in cluster_tail(&g, &plane, x, l, 2.0 * l as f64, &us, trials, seed, &sampler_cfg(cfg, tr))? {
                    csv += &format!("{l},{},{},{},{},{},{}\n", e.u, e.estimate, e.ci_lo, e.ci_hi, e.valid_trials, e.invalid_trials);
                }
            }
            run.write("tail.csv", csv.as_bytes())?;
        }
    }
    Ok(())
}

fn ladder(cfg: &JobConfig) -> Result<ScaleLadder, Failure> {
    Ok(ScaleLadder::new(cfg.l0.unwrap_or(2), cfg.ell0.unwrap_or(6), cfg.mode())?)
}

pub fn renorm(action: RenormAction, cfg: &JobConfig, run: &mut Run) -> Result<(), Failure> {
    let sx = site_reach(cfg.x.as_deref());
    match action {
        RenormAction::Cover | RenormAction::Inclusion => {
            let family = cfg.family()?;
            let ell = cfg.ell.ok_or_else(|| Failure::usage("--ell is required"))?;
            cfg.mode().check_ell(ell)?;
            let ls = cfg.ls()?;
            let l = ls[0] as u64;
            let scale = (ell * l) as f64;
            let g = model::graph(cfg, sx + family.reach() as f64 * scale + 5.0 * l as f64 + 2.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let plane = plane_for(&g, family)?;
            let c = cover(&g, family, x, ell, l, plane.as_ref(), cfg.mode())?;
            if let RenormAction::Cover = action {
                let mut csv = String::from("index,site,coords\n");
                for (i, s) in c.net.iter().enumerate() {
                    csv += &format!("{i},{s},{}\n", coords(&g, *s));
                }
                run.write("net.csv", csv.as_bytes())?;
                let check = c.check(&g);
                run.json("cover.json", &json!({"family": family, "ell": ell, "L": l, "pairing": c.pairing, "ok": check.ok(), "check": check}))?;
            } else {
                let rep = inclusion_check(&g, &c, plane.as_ref(), cfg.trials(1000)?, cfg.seed()?)?;
                run.json("inclusion.json", &rep)?;
            }
        }
        RenormAction::Embed => {
            let family = cfg.family()?;
            let lad = ladder(cfg)?;
            let n = cfg.depth.unwrap_or(1);
            let ln = lad.scale(n)? as f64;
            let g = model::graph(cfg, sx + 10.0 * ln + 2.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let plane = plane_for(&g, family)?;
            let t = auto_embedding(&g, family, x, n, &lad, plane.as_ref())?;
            let rep = validate_embedding(&g, &t, &lad)?;
            run.json("tree.json", &t)?;
            run.json("validation.json", &json!({"valid": rep.is_valid(), "report": rep}))?;
        }
        RenormAction::Decouple => {
            let family = cfg.family()?;
            let lad = ladder(cfg)?;
            let n = cfg.depth.unwrap_or(1);
            let ln = lad.scale(n)? as f64;
            let spread = family.reach() as f64 * ln * 4.0 / 3.0 + family.reach() as f64 * lad.l0 as f64;
            let tr = cfg.truncation_radius.unwrap_or(spread.ceil() + 2.0);
            let g = model::graph(cfg, sx + tr + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let plane = plane_for(&g, family)?;
            let sched = schedule(cfg, &g, &lad)?;
            let t = auto_embedding(&g, family, x, n, &lad, plane.as_ref())?;
            let coupling = cfg.coupling.map(Coupling::from).unwrap_or(Coupling::Shared);
            let rep = decouple_verify(&g, family, &t, plane.as_ref(), &sched, cfg.mode(), coupling, cfg.trials(1000)?, cfg.seed()?, &sampler_cfg(cfg, tr))?;
            run.bias("capacity truncation, summed over samplers", rep.bias_bound);
            run.json("decouple.json", &rep)?;
        }
        RenormAction::Schedule => {
            let lad = ladder(cfg)?;
            let g = model::graph(cfg, 1.0)?;
            let s = schedule(cfg, &g, &lad)?;
            let rows: Vec<_> = (0..=cfg.depth.unwrap_or(8))
                .map(|n| json!({"n": n, "u_plus": s.u_plus(n), "u_minus": s.u_minus(n), "epsilon_at_u_minus": s.epsilon(s.u_minus(n))}))
                .collect();
            run.json("schedule.json", &json!({"schedule": s, "levels": rows}))?;
        }
    }
    Ok(())
}

fn schedule(cfg: &JobConfig, g: &Graph, lad: &ScaleLadder) -> Result<gxz::renorm::LevelSchedule, Failure> {
    let nu = g.metric.nu();
    Ok(level_schedule(
        cfg.u_single()?,
        cfg.k.unwrap_or(1.0),
        nu,
        cfg.nu_prime.unwrap_or(nu / 2.0),
        lad.ell0 as f64,
        lad.l0 as f64,
        cfg.c1.unwrap_or(1.0),
    )?)
}

pub fn estimate(action: EstimateAction, cfg: &JobConfig, run: &mut Run) -> Result<(), Failure> {
    let sx = site_reach(cfg.x.as_deref());
    match action {
        EstimateAction::CrossingScan => {
            let family = cfg.family()?;
            let spec0 = ScanSpec {
                family,
                x: 0,
                plane: None,
                us: cfg.us()?,
                ls: cfg.ls()?,
                trials: cfg.trials(1000)?,
                seed: cfg.seed()?,
                trunc_factor: trunc_factor(cfg)?,
                bias_estimate: cfg.bias_estimate.unwrap_or(false),
            };
            let tmax = spec0.truncation_radius(*spec0.ls.iter().max().unwrap());
            let g = model::graph(cfg, sx + tmax + 1.0)?;
            let spec = ScanSpec { x: model::site(&g, cfg.x.as_deref())?, plane: plane_for(&g, family)?, ..spec0 };
            let table = crossing_scan(&g, &spec)?;
            for (l, b) in table.ls.iter().zip(&table.bias_bounds) {
                run.bias(format!("capacity truncation at L={l}"), *b);
            }
            run.write("scan.csv", table.to_csv().as_bytes())?;
            let proxy = match critical_proxy(&table, cfg.theta.unwrap_or(0.05)) {
                Ok(p) => json!({"proxy": p, "monotone_in_u": table.monotone_in_u(), "monotone_in_L": table.monotone_in_l()}),
                Err(e) => json!({"proxy": null, "reason": e.to_string()}),
            };
            run.json("proxy.json", &proxy)?;
            let series: Vec<(String, Vec<(f64, f64)>)> = (0..table.ls.len())
                .map(|il| (format!("L={}", table.ls[il]), (0..table.us.len()).map(|iu| (table.us[iu], table.cell(iu, il).estimate)).collect()))
                .collect();
            let svg = svg_plot(&format!("P[{family}] against u"), "u", "estimate", &series, false);
            run.write("scan.svg", svg.as_bytes())?;
        }
        EstimateAction::StretchFit => {
            let ls: Vec<f64> = cfg.ls()?.iter().map(|&l| l as f64).collect();
            let ps = cfg.p.clone().ok_or_else(|| Failure::usage("--p is required"))?;
            let trials = cfg.trials.map(|t| vec![t; ls.len()]);
            let fit = stretch_fit(&ls, &ps, trials.as_deref())?;
            run.json("fit.json", &fit)?;
        }
        EstimateAction::Connectivity => {
            let u = cfg.u_single()?;
            let md = cfg.max_distance.unwrap_or(8);
            let margin = 2.0;
            let wr = md as f64 + margin;
            let tr = cfg.truncation_radius.unwrap_or((trunc_factor(cfg)? * wr).ceil() + 1.0);
            let g = model::graph(cfg, sx + tr + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let ds: Vec<u32> = (1..=md).collect();
            let rep = connectivity_decay(&g, u, x, &ds, margin, cfg.trials(1000)?, cfg.seed()?, &sampler_cfg(cfg, tr))?;
            run.bias("capacity truncation", rep.bias_bound);
            let mut csv = String::from("distance,connect,connect_ci_lo,connect_ci_hi,exit,trials\n");
            for r in &rep.rows {
                let (lo, hi) = r.connect.ci95();
                csv += &format!("{},{},{lo},{hi},{},{}\n", r.distance, r.connect.estimate(), r.exit.estimate(), r.connect.trials);
            }
            run.write("connectivity.csv", csv.as_bytes())?;
            run.json("connectivity.json", &rep)?;
        }
        EstimateAction::ScaleSearch => {
            let family = cfg.family()?;
            let u_bar = cfg.u_single()?;
            let ells: Vec<u64> = vec![cfg.ell0.unwrap_or(4)];
            let l0s = cfg.ls()?;
            cfg.mode().check_ell(ells[0])?;
            let grid: Vec<(u64, u32)> = ells.iter().flat_map(|&e| l0s.iter().map(move |&l| (e, l))).collect();
            let top = grid.iter().map(|&(e, l)| e * l as u64).max().unwrap();
            let tf = trunc_factor(cfg)?;
            let need = (tf * family.reach() as f64 * top as f64).ceil() + 1.0;
            let g = model::graph(cfg, sx + need + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let plane = plane_for(&g, family)?;
            let rep = seed_scale_search(&g, family, x, plane.as_ref(), u_bar, &grid, cfg.trials(1000)?, cfg.seed()?, tf)?;
            run.json("scale_search.json", &rep)?;
        }
    }
    Ok(())
}

pub fn diagnose(action: DiagnoseAction, cfg: &JobConfig, run: &mut Run) -> Result<(), Failure> {
    match action {
        DiagnoseAction::Segments => {
            let ls = cfg.ls()?;
            if ls.iter().any(|&l| l < 3) {
                return Err(Failure::usage("segment diagnostics need L >= 3"));
            }
            let lmax = *ls.iter().max().unwrap() as f64;
            let g = model::graph(cfg, 5.0 * lmax + 2.0)?;
            let plane = default_plane(&g)?;
            let o = g.origin();
            let (n0, _) = plane.coords(&g, o).ok_or_else(|| Failure::geometry("origin is off the half-plane"))?;
            let (trials, seed) = (cfg.trials(2000)?, cfg.seed()?);
            let mut csv = String::from("L,H,n_vert,n_vert_se,vert_shape,n_hor,n_hor_se,hor_shape\n");
            let mut reports = Vec::new();
            for &l in &ls {
                let h = segment_height(l, g.metric.beta).max(1);
                let rect = Rectangle { n_lo: n0, n_hi: n0 + l - 1, z_lo: 0, z_hi: h as i64 - 1 };
                let starts = [(0u32, 0i64), (l / 2, h as i64 / 2), (l - 1, h as i64 - 1), (l / 2, -(h as i64))]
                    .iter()
                    .map(|&(a, z)| plane.site(&g, n0 + a, z).ok_or_else(|| Failure::geometry("segment start outside the window")))
                    .collect::<Result<Vec<_>, _>>()?;
                let tr = cfg.truncation_radius.unwrap_or(4.0 * l as f64);
                let rep = segment_hit_probs(&g, &plane, rect, l, &starts, tr, trials, seed)?;
                let (vs, hs) = bound_shapes(l, h, g.metric.alpha, g.metric.beta);
                csv += &format!("{l},{h},{},{},{vs},{},{},{hs}\n", rep.n_vert, rep.n_vert_se, rep.n_hor, rep.n_hor_se);
                reports.push(rep);
            }
            run.write("segments.csv", csv.as_bytes())?;
            run.json("segments.json", &reports)?;
        }
        DiagnoseAction::Excursions => {
            let sx = site_reach(cfg.x.as_deref());
            let u_max = cfg.u_max.ok_or_else(|| Failure::usage("--u-max is required"))?;
            if !(u_max > 0.0) || !u_max.is_finite() {
                return Err(Failure::usage(format!("--u-max must be positive and finite (got {u_max})")));
            }
            let rs = radii(cfg, &[2.0, 8.0])?;
            if rs.len() != 2 || rs[0] >= rs[1] {
                return Err(Failure::usage("--radii takes r_W,r_U with r_W < r_U"));
            }
            let tr = cfg.truncation_radius.unwrap_or(2.0 * rs[1] + 2.0);
            let g = model::graph(cfg, sx + tr + 1.0)?;
            let x = model::site(&g, cfg.x.as_deref())?;
            let u: SiteSet = g.ball(x, rs[1])?.sites(&g);
            let w: SiteSet = g.ball(x, rs[0])?.sites(&g);
            let sampler = InterlacementSampler::new(&g, &w, x, &sampler_cfg(cfg, tr))?;
            run.bias("capacity truncation at u_max", sampler.bias_bound(u_max));
            let sample = sampler.sample(u_max, cfg.seed()?)?;
            let spec = excursion_spectrum(&sample, &w, &u)?;
            let c = spec.beta_constant(sampler.capacity(), rs[1], g.metric.nu());
            run.json("excursions.json", &json!({"r_W": rs[0], "r_U": rs[1], "cap_W": sampler.capacity(), "constant": c, "spectrum": spec}))?;
        }
    }
    Ok(())
}
