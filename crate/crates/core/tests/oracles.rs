mod common;

use common::*;
use gxz::graphs::{build_graph, GraphModel};
use gxz::percolation::{event_window, Detector, EventSpec, Family};
use gxz::walk::task_rng;
use gxz::Graph;

fn run(g: &Graph, spec: &EventSpec, configs: u64, seed: u64, p: (f64, f64)) -> (u64, u64) {
    let window = event_window(g, spec).unwrap().indexed(g.base.len());
    let det = Detector::new(g, spec, &window).unwrap();
    let mut rng = task_rng(seed, 0);
    let mut hits = 0;
    for k in 0..configs {
        let sigma = random_sigma(&window, &mut rng, p.0, p.1);
        let got = det.eval(&sigma);
        let want = match spec.family {
            Family::A => oracle_a(g, &window, &sigma, spec.x, spec.l),
            Family::B => oracle_b(g, &window, &sigma, spec.plane.as_ref().unwrap(), spec.x, spec.l),
            Family::S => oracle_s(g, &window, &sigma, spec.x, spec.l),
        };
        assert_eq!(got, want, "{} L={} config {k}", spec.family, spec.l);
        if let Some(w) = det.s_witness(&sigma) {
            check_s_witness(g, &window, &sigma, spec.x, spec.l, &w.pieces).unwrap();
        }
        hits += got as u64;
    }
    (hits, configs)
}

fn nontrivial((hits, n): (u64, u64)) {
    assert!(hits > 0 && hits < n, "{hits}/{n}");
}

#[test]
fn family_a_matches_reachability() {
    let g: Graph = build_graph(&GraphModel::z_lattice(2, 8, 8)).unwrap();
    for l in [1, 2, 3] {
        let spec = EventSpec { family: Family::A, x: g.origin(), l, plane: None };
        nontrivial(run(&g, &spec, 1500, l as u64, (0.3, 0.95)));
    }
}

#[test]
fn family_b_matches_reachability() {
    let g: Graph = build_graph(&GraphModel::z_lattice(2, 14, 8)).unwrap();
    let y0 = g.base.vertex_at(&[-9, 0]).unwrap();
    let plane = g.half_plane(y0, 18, (-6, 6)).unwrap();
    for (n, l) in [(9, 2), (1, 2), (9, 3), (5, 1)] {
        let x = plane.site(&g, n, 0).unwrap();
        let spec = EventSpec { family: Family::B, x, l, plane: Some(plane.clone()) };
        nontrivial(run(&g, &spec, 1500, 10 + n as u64, (0.2, 0.8)));
    }
}

#[test]
fn family_s_matches_exhaustive_search() {
    let g: Graph = build_graph(&GraphModel::z_lattice(2, 12, 12)).unwrap();
    for l in [1, 2] {
        let spec = EventSpec { family: Family::S, x: g.origin(), l, plane: None };
        nontrivial(run(&g, &spec, 300, 20 + l as u64, (0.55, 0.8)));
    }
}

#[test]
fn gasket_events_match() {
    let g: Graph = build_graph(&GraphModel::gasket(5, 20)).unwrap();
    let y = g.base.vertex_at(&[8, 0]).unwrap();
    let x = g.site(y, 0).unwrap();
    let plane = g.half_plane(g.base.vertex_at(&[0, 0]).unwrap(), 24, (-10, 10)).unwrap();
    let a = EventSpec { family: Family::A, x, l: 3, plane: None };
    nontrivial(run(&g, &a, 1000, 31, (0.2, 0.9)));
    let b = EventSpec { family: Family::B, x, l: 3, plane: Some(plane) };
    nontrivial(run(&g, &b, 1000, 32, (0.2, 0.8)));
}
