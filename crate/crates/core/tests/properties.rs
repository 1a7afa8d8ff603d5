use proptest::prelude::*;

use rank1_lab::construction::{check_tree, OracleMode, Schedule, Tree, TreeConfig, TreeParams};
use rank1_lab::dimension::{frostman_lower_bound, paper_density_schedule, validate_tree_like, DiameterMode, TreeCollection};
use rank1_lab::entropy::{check_master_inequality, estimate_sequence, MassEntropyPoint};
use rank1_lab::group::{conj_by_a, nmul, ninv, sigma_invert, u_dist, DomainPoint, NilPoint};
use rank1_lab::params::{lookup, registry, RankOneParams, REGISTRY};

fn instance() -> impl Strategy<Value = RankOneParams> {
    prop::sample::select(REGISTRY.to_vec()).prop_map(|n| lookup(n).unwrap())
}

fn nil(p: &RankOneParams) -> impl Strategy<Value = NilPoint> {
    (prop::collection::vec(-4.0..4.0f64, p.p2), prop::collection::vec(-4.0..4.0f64, p.p1))
        .prop_map(|(z, x)| NilPoint::new(z, x))
}

fn with_points(n: usize) -> impl Strategy<Value = (RankOneParams, Vec<NilPoint>)> {
    instance().prop_flat_map(move |p| {
        let pts = prop::collection::vec(nil(&p), n);
        (Just(p), pts)
    })
}

fn near(a: &NilPoint, b: &NilPoint, tol: f64) -> bool {
    let scale = 1.0f64.max(a.size()).max(b.size());
    a.z.iter().zip(&b.z).chain(a.x.iter().zip(&b.x)).all(|(u, v)| (u - v).abs() <= tol * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn multiplication_is_associative((p, v) in with_points(3)) {
        let left = nmul(&p, &nmul(&p, &v[0], &v[1]).unwrap(), &v[2]).unwrap();
        let right = nmul(&p, &v[0], &nmul(&p, &v[1], &v[2]).unwrap()).unwrap();
        prop_assert!(near(&left, &right, 1e-12));
    }

    #[test]
    fn inverses_cancel((p, v) in with_points(1)) {
        let e = NilPoint::identity(&p);
        prop_assert!(near(&nmul(&p, &v[0], &ninv(&v[0])).unwrap(), &e, 1e-12));
        prop_assert!(near(&nmul(&p, &ninv(&v[0]), &v[0]).unwrap(), &e, 1e-12));
    }

    #[test]
    fn flow_conjugation_respects_products((p, v) in with_points(2), k in -30i64..30) {
        let lhs = conj_by_a(&nmul(&p, &v[0], &v[1]).unwrap(), k).unwrap();
        let rhs = nmul(&p, &conj_by_a(&v[0], k).unwrap(), &conj_by_a(&v[1], k).unwrap()).unwrap();
        prop_assert!(near(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn distance_is_left_invariant_and_contracts((p, v) in with_points(3), k in 0i64..40) {
        let d = u_dist(&p, &v[0], &v[1]);
        let moved = u_dist(&p, &nmul(&p, &v[2], &v[0]).unwrap(), &nmul(&p, &v[2], &v[1]).unwrap());
        prop_assert!((d - moved).abs() <= 1e-11 * d.max(1.0));
        let c = u_dist(&p, &conj_by_a(&v[0], k).unwrap(), &conj_by_a(&v[1], k).unwrap());
        prop_assert!(c <= (-(k as f64) / 2.0).exp() * d * (1.0 + 1e-12));
    }

    #[test]
    fn geodesic_inversion_is_an_involution(
        (p, v) in with_points(1),
        lift in -4.0..4.0f64,
    ) {
        let u = &v[0];
        let t = 0.25 * u.x_norm().powi(2) + lift.exp();
        let d = DomainPoint { t, z: u.z.clone(), x: u.x.clone() };
        let once = sigma_invert(&p, &d).unwrap();
        prop_assert!(once.in_domain());
        let twice = sigma_invert(&p, &once).unwrap();
        let scale = t.max(1.0).max(u.size());
        prop_assert!((twice.t - t).abs() <= 1e-12 * scale);
        for (a, b) in twice.z.iter().zip(&u.z).chain(twice.x.iter().zip(&u.x)) {
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn master_inequality_tolerates_only_rounding(mass in 0.0..1.0f64, h in 0.0..2.0f64, excess in 1e-9..1.0f64) {
        let p = lookup("su21").unwrap();
        let h = h.min(p.h_m());
        let frontier = mass * h + 0.5 * p.h_m() * (1.0 - mass);
        let on = MassEntropyPoint { mass, normalized_entropy: h, limsup_entropy: frontier };
        prop_assert!(check_master_inequality(&on, &p).holds);
        let above = MassEntropyPoint { limsup_entropy: frontier + excess, ..on };
        prop_assert!(!check_master_inequality(&above, &p).holds);
    }
}

#[test]
fn trees_are_tree_like_across_instances_and_seeds() {
    for p in registry() {
        for seed in 0..3 {
            let t = Tree::build(&p, &TreeConfig::new(4, OracleMode::Synthetic, seed)).unwrap();
            let rep = validate_tree_like(&TreeCollection::from_tree(&t), seed);
            assert!(rep.passed(), "{} seed {seed}: {:?}", p.name, rep.first_violation);
            assert!(check_tree(&t, seed).passed());
        }
    }
    let p = lookup("rhck2").unwrap();
    let t = Tree::build(&p, &TreeConfig::new(4, OracleMode::Sl2, 1)).unwrap();
    assert!(validate_tree_like(&TreeCollection::from_tree(&t), 1).passed());
}

#[test]
fn separated_entropy_approaches_half_the_maximum_from_below() {
    for p in registry() {
        let rs: Vec<u32> = (12..400).step_by(7).collect();
        let seq = estimate_sequence(&p, 10, &rs);
        let half = p.h_m() / 2.0;
        for w in seq.windows(2) {
            assert!(w[1].entropy_lb > w[0].entropy_lb, "{}: not increasing", p.name);
        }
        assert!(seq.iter().all(|e| e.entropy_lb <= half));
        assert!(half - seq.last().unwrap().entropy_lb < 0.03 * half);
    }
}

fn frostman_ratios(name: &str, n: u32) -> (f64, Vec<f64>) {
    let p = lookup(name).unwrap();
    let tp = TreeParams::new(&p, 0.4, 1.0, 10, Schedule::Paper).unwrap();
    let ds = paper_density_schedule(&p, &tp, n, DiameterMode::PaperBound).unwrap();
    (p.h_m(), frostman_lower_bound(&ds, p.dim_u() as f64, None).unwrap().ratios)
}

#[test]
fn frostman_ratio_decreases_towards_the_entropy() {
    for name in REGISTRY {
        let (hm, ratios) = frostman_ratios(name, 1600);
        for j in [100, 200, 400, 800, 1599] {
            assert!(ratios[j] > hm, "{name} at {j}");
        }
        assert!(ratios[1599] < ratios[799] && ratios[799] < ratios[399] && ratios[399] < ratios[199]);
        assert!(ratios[1599] < hm * 1.025);
    }
}

/// The ratio overshoots `h_m` by about 8.6% at n = 200 for rhp2 and su21
/// (and rhck2), i.e. by more than 0.05 once `h_m >= 1`; it only reaches
/// the 5% band around n = 400.
#[test]
#[ignore = "does not hold: the ratio at n = 200 exceeds h_m + 0.05 for rhp2 and su21"]
fn frostman_ratio_within_absolute_band_from_200() {
    for name in REGISTRY {
        let (hm, ratios) = frostman_ratios(name, 400);
        for (j, r) in ratios.iter().enumerate().skip(199) {
            assert!(*r <= hm + 0.05, "{name}: ratio {r} at stage {}", j + 1);
        }
    }
}
