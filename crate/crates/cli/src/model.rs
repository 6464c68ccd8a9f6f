use gxz::graphs::{build_graph_with, GraphModel, HalfPlane, MetricKind, MetricParams};
use gxz::{Graph, SiteId, SiteSet};

use crate::config::{JobConfig, MetricArg};
use crate::Failure;

/// Parsed `--model`; missing extents are sized to the job.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub base: BaseSpec,
    pub z_extent: Option<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaseSpec {
    Lattice { d: usize, radius: Option<i64> },
    Gasket { level: Option<u32> },
    Point,
}

pub fn parse_model(s: &str) -> Result<ModelSpec, Failure> {
    let bad = |why: &str| Failure::usage(format!("bad --model '{s}': {why}"));
    let (base, z) = match s.split_once("xz:") {
        Some((b, z)) => (b, Some(z.trim().parse::<i64>().map_err(|_| bad("z extent must be an integer"))?)),
        None => (s, None),
    };
    if z.is_some_and(|z| z < 1) {
        return Err(bad("z extent must be positive"));
    }
    let (kind, params) = base.split_once(':').unwrap_or((base, ""));
    let mut kv = Vec::new();
    for item in params.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = item.split_once('=').ok_or_else(|| bad("parameters are key=value"))?;
        let v: i64 = v.trim().parse().map_err(|_| bad("parameter values are integers"))?;
        kv.push((k.trim(), v));
    }
    let get = |key: &str| kv.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
    let allow = |keys: &[&str]| match kv.iter().find(|(k, _)| !keys.contains(k)) {
        Some((k, _)) => Err(bad(&format!("unknown parameter '{k}'"))),
        None => Ok(()),
    };
    let base = match kind.trim() {
        "z-lattice" => {
            allow(&["d", "r"])?;
            let d = get("d").ok_or_else(|| bad("z-lattice needs d"))?;
            if !(1..=3).contains(&d) {
                return Err(bad("d must be 1, 2 or 3"));
            }
            if get("r").is_some_and(|r| r < 1) {
                return Err(bad("r must be positive"));
            }
            BaseSpec::Lattice { d: d as usize, radius: get("r") }
        }
        "gasket" => {
            allow(&["level"])?;
            let level = get("level");
            if level.is_some_and(|l| !(0..=12).contains(&l)) {
                return Err(bad("level must be in 0..=12"));
            }
            BaseSpec::Gasket { level: level.map(|l| l as u32) }
        }
        "point" => {
            allow(&[])?;
            BaseSpec::Point
        }
        other => return Err(Failure::usage(format!("unsupported model kind '{other}'"))),
    };
    Ok(ModelSpec { base, z_extent: z })
}

impl ModelSpec {
    fn exponents(&self) -> (f64, f64) {
        let m = match self.base {
            BaseSpec::Lattice { d, .. } => GraphModel::ZLattice { d, radius: 1 },
            BaseSpec::Gasket { .. } => GraphModel::GasketSkeleton { level: 1 },
            BaseSpec::Point => GraphModel::Point,
        };
        m.exponents()
    }

    /// Concrete model whose window contains `B(0, need)` with a margin.
    fn concrete(&self, metric: &MetricParams, need: f64) -> GraphModel {
        let r = need.ceil() as i64 + 2;
        let z = self.z_extent.unwrap_or_else(|| metric.z_reach(need) + 2);
        let base = match self.base {
            BaseSpec::Lattice { d, radius } => GraphModel::ZLattice { d, radius: radius.unwrap_or(r) },
            BaseSpec::Gasket { level } => {
                let auto = (0..=12).find(|k| (1i64 << k) >= r).unwrap_or(12);
                GraphModel::GasketSkeleton { level: level.unwrap_or(auto) }
            }
            BaseSpec::Point => GraphModel::Point,
        };
        GraphModel::ProductWithZ { base: Box::new(base), z_extent: z }
    }
}

/// Build the job's graph; `need` is the metric radius around the origin the job reads.
pub fn graph(cfg: &JobConfig, need: f64) -> Result<Graph, Failure> {
    let spec = parse_model(cfg.model.as_deref().ok_or_else(|| Failure::usage("--model is required"))?)?;
    let (a0, b0) = spec.exponents();
    let metric = MetricParams {
        alpha: cfg.alpha.unwrap_or(a0),
        beta: cfg.beta.unwrap_or(b0),
        kind: match cfg.metric {
            Some(MetricArg::SupNorm) => MetricKind::SupNorm,
            _ => MetricKind::Anisotropic,
        },
    };
    metric.validate()?;
    Ok(build_graph_with(&spec.concrete(&metric, need), metric)?)
}

/// `--x` (default: the origin).
pub fn site(g: &Graph, s: Option<&str>) -> Result<SiteId, Failure> {
    let Some(s) = s else { return Ok(g.origin()) };
    let v: Vec<i64> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| Failure::usage(format!("bad site '{s}'"))))
        .collect::<Result<_, _>>()?;
    let (z, c) = v.split_last().ok_or_else(|| Failure::usage("empty site"))?;
    let c: Vec<i32> = c.iter().map(|&x| x as i32).collect();
    g.site_at(&c, *z).ok_or_else(|| Failure::geometry(format!("site '{s}' is outside the window ({})", g.model.label())))
}

/// Rough upper bound on the distance of a `--x` site from the origin, used to size windows.
pub fn site_reach(s: Option<&str>) -> f64 {
    s.map_or(0.0, |s| s.split(',').filter_map(|t| t.trim().parse::<f64>().ok()).map(f64::abs).sum())
}

/// Radius a `--set` spec reaches around its centre.
pub fn set_reach(spec: &str) -> Result<f64, Failure> {
    Ok(match parse_set(spec)? {
        SetSpec::Point => 0.0,
        SetSpec::Ball(r) => r,
        SetSpec::Pair(d) => d as f64,
    })
}

enum SetSpec {
    Point,
    Ball(f64),
    Pair(u32),
}

fn parse_set(spec: &str) -> Result<SetSpec, Failure> {
    let bad = || Failure::usage(format!("bad --set '{spec}' (ball:r=R, point or pair:d=D)"));
    let num = |s: Option<&str>, key: &str| -> Result<f64, Failure> {
        let v = s.and_then(|s| s.strip_prefix(key)).ok_or_else(bad)?;
        let v: f64 = v.parse().map_err(|_| bad())?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(bad());
        }
        Ok(v)
    };
    let (kind, rest) = spec.split_once(':').map_or((spec, None), |(a, b)| (a, Some(b)));
    match kind {
        "point" => Ok(SetSpec::Point),
        "ball" => Ok(SetSpec::Ball(num(rest, "r=")?)),
        "pair" => Ok(SetSpec::Pair(num(rest, "d=")? as u32)),
        _ => Err(bad()),
    }
}

pub fn set(g: &Graph, spec: &str, center: SiteId) -> Result<SiteSet, Failure> {
    Ok(match parse_set(spec)? {
        SetSpec::Point => SiteSet::singleton(center),
        SetSpec::Ball(r) => g.ball(center, r)?.sites(g),
        SetSpec::Pair(d) => {
            let ray = gxz::interlacements::ray_sites(g, center, d)?;
            SiteSet::new(vec![center, ray[d as usize]])
        }
    })
}

/// Half-plane through the origin spanning the window.
pub fn default_plane(g: &Graph) -> Result<HalfPlane, Failure> {
    let (zlo, zhi) = g.z_range();
    let GraphModel::ProductWithZ { base, .. } = &g.model else {
        return Err(Failure::geometry("half-planes need a product model"));
    };
    let (start, len) = match base.as_ref() {
        GraphModel::ZLattice { d, radius } => {
            let mut c = vec![0; *d];
            c[0] = -(*radius as i32);
            (g.base.vertex_at(&c).expect("window corner"), 2 * *radius as u32)
        }
        GraphModel::GasketSkeleton { level } => (g.base_of(g.origin()), 1u32 << level),
        _ => return Err(Failure::geometry("the point base has no geodesic ray")),
    };
    Ok(g.half_plane(start, len.max(1), (zlo, zhi))?)
}

/// Base coordinates then height, for CSV output.
pub fn coords(g: &Graph, x: SiteId) -> String {
    let (y, z) = g.split(x);
    let mut s: Vec<String> = g.base.coords(y).iter().map(|c| c.to_string()).collect();
    s.push(z.to_string());
    s.join(";")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_grammar() {
        assert_eq!(
            parse_model("z-lattice:d=2,r=32xz:16").unwrap(),
            ModelSpec { base: BaseSpec::Lattice { d: 2, radius: Some(32) }, z_extent: Some(16) }
        );
        assert_eq!(parse_model("z-lattice:d=2").unwrap().base, BaseSpec::Lattice { d: 2, radius: None });
        assert_eq!(parse_model("gasket:level=4xz:8").unwrap().base, BaseSpec::Gasket { level: Some(4) });
        assert_eq!(parse_model("point").unwrap().base, BaseSpec::Point);
        for bad in ["torus:d=2", "z-lattice", "z-lattice:d=9", "z-lattice:d=2,q=1", "gasket:level=2xz:0", "z-lattice:d=2xz:a"] {
            assert!(parse_model(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn auto_window_fits_the_job() {
        let cfg = JobConfig { model: Some("z-lattice:d=2".into()), ..Default::default() };
        let g = graph(&cfg, 10.0).unwrap();
        assert!(g.ball_fits_with_margin(g.origin(), 10.0));
        let cfg = JobConfig { model: Some("gasket".into()), ..Default::default() };
        let g = graph(&cfg, 10.0).unwrap();
        assert!(g.ball_fits_with_margin(g.origin(), 10.0));
    }

    #[test]
    fn beta_constraint() {
        let cfg = JobConfig { model: Some("z-lattice:d=2,r=4xz:4".into()), beta: Some(3.5), ..Default::default() };
        assert_eq!(graph(&cfg, 1.0).unwrap_err().code, 2);
        let cfg = JobConfig { beta: Some(3.0), ..cfg };
        assert!(graph(&cfg, 1.0).is_ok());
    }

    #[test]
    fn sets_and_sites() {
        let cfg = JobConfig { model: Some("z-lattice:d=2,r=6xz:6".into()), ..Default::default() };
        let g = graph(&cfg, 1.0).unwrap();
        let o = site(&g, None).unwrap();
        assert_eq!(site(&g, Some("0,0,0")).unwrap(), o);
        assert_eq!(site(&g, Some("9,0,0")).unwrap_err().code, 3);
        assert_eq!(set(&g, "ball:r=1", o).unwrap().len(), 15);
        assert_eq!(set(&g, "pair:d=3", o).unwrap().len(), 2);
        assert_eq!(set(&g, "ball:r=10", o).unwrap_err().code, 3);
        assert!(set(&g, "cube:r=1", o).is_err());
        let hp = default_plane(&g).unwrap();
        assert!(hp.contains(&g, o));
    }
}
