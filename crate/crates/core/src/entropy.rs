//! Entropy lower bounds from separated sets, escape of mass, and the
//! mass–entropy frontier.

use serde::{Deserialize, Serialize};

use crate::construction::tree::pair_distances;
use crate::construction::{ln_separated_count, trajectory_heights, OracleMode, Schedule, Tree, TreeConfig};
use crate::error::{Error, Result};
use crate::params::RankOneParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyExperiment {
    /// Height bound of the compact part; must exceed `39 s1`.
    pub s: f64,
    /// Stage length, `> 4 log 4`.
    #[serde(rename = "R")]
    pub big_r: u32,
    #[serde(rename = "Rprime")]
    pub rprime: u32,
    /// Number of concatenated stages.
    pub m: u32,
    /// Separation radius.
    pub eta_prime: f64,
    /// `log S(R)`.
    pub ln_s: f64,
}

impl EntropyExperiment {
    pub fn new(params: &RankOneParams, s: f64, big_r: u32, rprime: u32, m: u32, eta_prime: f64, eta0: f64) -> Result<Self> {
        if !(s > 39.0 * params.s1) {
            return Err(Error::InvalidParameter(format!("s = {s} must exceed 39 s1 = {}", 39.0 * params.s1)));
        }
        if !(big_r as f64 > 4.0 * 4f64.ln()) {
            return Err(Error::InvalidParameter(format!("R = {big_r} must exceed 4 log 4")));
        }
        if !(eta_prime > 0.0 && eta_prime <= eta0 / 4.0) {
            return Err(Error::InvalidParameter(format!("eta' = {eta_prime} must lie in (0, eta0/4 = {}]", eta0 / 4.0)));
        }
        if m == 0 || rprime == 0 {
            return Err(Error::InvalidParameter("m and R' must be positive".into()));
        }
        Ok(EntropyExperiment { s, big_r, rprime, m, eta_prime, ln_s: ln_separated_count(params, big_r) })
    }

    /// `mR + (m-1)R'`.
    pub fn horizon(&self) -> u64 {
        self.m as u64 * self.big_r as u64 + (self.m as u64 - 1) * self.rprime as u64
    }
}

/// Working separation radius `η0 / (4 λ1)`.
pub fn default_eta_prime(params: &RankOneParams, eta0: f64) -> f64 {
    eta0 / (4.0 * params.lambda1())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureEstimate {
    pub entropy_lb: f64,
    /// Lower bound for the mass of the high part.
    pub high_mass_lb: f64,
    pub horizon: u64,
}

impl MeasureEstimate {
    /// The limit measure itself, seen as a probability measure.
    pub fn as_point(&self) -> MassEntropyPoint {
        MassEntropyPoint { mass: 1.0, normalized_entropy: self.entropy_lb, limsup_entropy: self.entropy_lb }
    }
}

/// `log S / (R + R')` and `mR / (mR + (m-1)R')`, in log space.
pub fn separated_entropy_lb(exp: &EntropyExperiment) -> MeasureEstimate {
    let r = exp.big_r as f64;
    let m = exp.m as f64;
    MeasureEstimate {
        entropy_lb: exp.ln_s / (r + exp.rprime as f64),
        high_mass_lb: m * r / (m * r + (m - 1.0) * exp.rprime as f64),
        horizon: exp.horizon(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplicitSeparation {
    /// Joining time the lattice actually needed.
    pub rprime: u32,
    pub points: usize,
    pub pairs: usize,
    pub horizon: u64,
    /// Smallest `d(T^n g, T^n h)` over pairs, less twice the distance to
    /// the limits extending them by ones.
    pub min_limit_distance: f64,
    /// `η' / λ1`.
    pub threshold: f64,
    pub separated: bool,
    /// Fewest steps any point spends at height `>= s / 100`.
    pub min_high_steps: u64,
    pub required_high_steps: u64,
    /// Largest height seen along the orbits.
    pub s_prime: f64,
}

impl ExplicitSeparation {
    pub fn passed(&self) -> bool {
        self.separated && self.min_high_steps >= self.required_high_steps
    }
}

/// Materializes `E(m)` on the modular surface with a constant schedule and
/// checks separation and the time spent high up, pair by pair.
pub fn explicit_separation(params: &RankOneParams, exp: &EntropyExperiment, seed: u64) -> Result<ExplicitSeparation> {
    let mut cfg = TreeConfig::new(exp.m, OracleMode::Sl2, seed);
    cfg.schedule = Schedule::Constant(exp.big_r);
    let tree = Tree::build(params, &cfg)?;
    if tree.sampled {
        return Err(Error::CapExceeded { count: exp.ln_s.exp().powi(exp.m as i32), cap: cfg.cap });
    }
    let tp = &tree.tp;
    let rho = tp.radius();
    let tail = rho / (1.0 - (-((exp.big_r + tp.rprime) as f64) * tp.ln_lambda0).exp());
    let n = tree.depth();
    let leaves = tree.level(n).len();
    let mut min_d = f64::INFINITY;
    let mut pairs = 0;
    for a in 0..leaves {
        for b in a + 1..leaves {
            let (_, d) = pair_distances(&tree, n, a, b);
            min_d = min_d.min(d - 2.0 * tail);
            pairs += 1;
        }
    }
    let mut min_high = u64::MAX;
    let mut s_prime: f64 = 0.0;
    for id in 0..leaves {
        let h = trajectory_heights(&tree, n, id)?;
        min_high = min_high.min(h.iter().filter(|&&v| v >= exp.s / 100.0).count() as u64);
        s_prime = h.iter().copied().fold(s_prime, f64::max);
    }
    let threshold = exp.eta_prime / params.lambda1();
    Ok(ExplicitSeparation {
        rprime: tp.rprime,
        points: leaves,
        pairs,
        horizon: tp.l(n),
        min_limit_distance: min_d,
        threshold,
        separated: min_d > threshold,
        min_high_steps: min_high,
        required_high_steps: exp.m as u64 * exp.big_r as u64,
        s_prime,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonChoice {
    #[serde(rename = "R")]
    pub big_r: u32,
    pub entropy_lb: f64,
    /// `R / (R + R')`, the limit of the high-mass bound.
    pub mass_limit: f64,
}

/// Smallest `R` with `R/(R+R') > 1-ε` and `log S(R)/(R+R') > h_m/2 - ε`.
pub fn choose_r(params: &RankOneParams, rprime: u32, eps: f64, max_r: u32) -> Result<EpsilonChoice> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter(format!("epsilon {eps} outside (0, 1)")));
    }
    let first = (4.0 * 4f64.ln()).floor() as u32 + 1;
    let half = params.h_m() / 2.0;
    for r in first..=max_r {
        let denom = (r + rprime) as f64;
        let mass = r as f64 / denom;
        let ent = ln_separated_count(params, r) / denom;
        if mass > 1.0 - eps && ent > half - eps {
            return Ok(EpsilonChoice { big_r: r, entropy_lb: ent, mass_limit: mass });
        }
    }
    Err(Error::InvalidParameter(format!("no R <= {max_r} reaches epsilon {eps}")))
}

/// Entropy estimates for a list of stage lengths with one stage (`m = 1`).
pub fn estimate_sequence(params: &RankOneParams, rprime: u32, rs: &[u32]) -> Vec<MeasureEstimate> {
    rs.iter()
        .map(|&r| {
            let denom = (r + rprime) as f64;
            MeasureEstimate { entropy_lb: ln_separated_count(params, r) / denom, high_mass_lb: 1.0, horizon: r as u64 }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassEntropyPoint {
    /// `ν(X)`.
    pub mass: f64,
    /// Entropy of `ν / ν(X)`; ignored when the mass is zero.
    pub normalized_entropy: f64,
    pub limsup_entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MasterCheck {
    pub holds: bool,
    /// `ν(X) h + (h_m/2)(1 - ν(X)) - limsup`.
    pub slack: f64,
}

/// Rounding allowance when deciding whether the inequality holds.
pub const MASTER_TOLERANCE: f64 = 1e-12;

pub fn check_master_inequality(pt: &MassEntropyPoint, params: &RankOneParams) -> MasterCheck {
    let first = if pt.mass == 0.0 { 0.0 } else { pt.mass * pt.normalized_entropy };
    let slack = first + 0.5 * params.h_m() * (1.0 - pt.mass) - pt.limsup_entropy;
    MasterCheck { holds: slack >= -MASTER_TOLERANCE, slack }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub c: f64,
    pub point: MassEntropyPoint,
    pub slack: f64,
    /// `h_m/2 - sup entropy_lb`: how far the escaping components are from
    /// their limit.
    pub entropy_gap: f64,
}

/// Evenly spaced entropy targets in `[h_m/2, h_m]`.
pub fn c_grid(params: &RankOneParams, points: usize) -> Result<Vec<f64>> {
    let hm = params.h_m();
    match points {
        0 => Err(Error::InvalidParameter("the c-grid needs at least one point".into())),
        1 => Ok(vec![hm / 2.0]),
        n => Ok((0..n).map(|i| hm / 2.0 + hm / 2.0 * i as f64 / (n - 1) as f64).collect()),
    }
}

/// Mixing Haar measure with escaping measures whose entropies tend to
/// `h_m/2`, weighted to reach entropy `c`.
pub fn convex_combination_curve(c: f64, params: &RankOneParams, seq: &[MeasureEstimate]) -> Result<CurvePoint> {
    let hm = params.h_m();
    if hm <= 0.0 || !(c >= hm / 2.0 && c <= hm) {
        return Err(Error::InvalidParameter(format!("c = {c} outside [{}, {hm}]", hm / 2.0)));
    }
    if seq.is_empty() {
        return Err(Error::InvalidParameter("need at least one entropy estimate".into()));
    }
    let sup = seq.iter().map(|e| e.entropy_lb).fold(f64::NEG_INFINITY, f64::max);
    if sup > hm / 2.0 + MASTER_TOLERANCE {
        return Err(Error::Validation(format!("entropy estimate {sup} exceeds h_m/2 = {}", hm / 2.0)));
    }
    let w = 2.0 * c / hm;
    let mass = w - 1.0;
    let limsup = (w - 1.0) * hm + (2.0 - w) * (0.5 * hm);
    let point = MassEntropyPoint { mass, normalized_entropy: hm, limsup_entropy: limsup };
    let slack = check_master_inequality(&point, params).slack;
    Ok(CurvePoint { c, point, slack, entropy_gap: hm / 2.0 - sup })
}

/// Fraction of a trajectory spent below height `s`.
pub fn empirical_mass_profile(heights: &[f64], s: f64) -> Result<f64> {
    if heights.is_empty() {
        return Err(Error::InvalidParameter("empty trajectory".into()));
    }
    Ok(heights.iter().filter(|&&h| h < s).count() as f64 / heights.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::lookup;
    use crate::sl2::{orbit_heights, Sl2Convention};
    use crate::height::CuspOrbitState;

    #[test]
    fn entropy_of_long_stages() {
        let p = lookup("rhp2").unwrap();
        let e = EntropyExperiment::new(&p, 100.0, 100, 10, 5, 0.05, 0.4).unwrap();
        let est = separated_entropy_lb(&e);
        assert!((est.entropy_lb - (50f64.exp().floor()).ln() / 110.0).abs() < 1e-12);
        assert!((est.entropy_lb - 0.4545).abs() < 1e-4);
        let one = EntropyExperiment::new(&p, 100.0, 100, 10, 1, 0.05, 0.4).unwrap();
        assert_eq!(separated_entropy_lb(&one).high_mass_lb, 1.0);
        let many = EntropyExperiment::new(&p, 100.0, 100, 10, 1_000_000, 0.05, 0.4).unwrap();
        assert!((separated_entropy_lb(&many).high_mass_lb - 100.0 / 110.0).abs() < 1e-6);
        assert!(EntropyExperiment::new(&p, 100.0, 5, 10, 1, 0.05, 0.4).is_err());
        assert!(EntropyExperiment::new(&p, 50.0, 10, 10, 1, 0.05, 0.4).is_err());
        assert!(EntropyExperiment::new(&p, 100.0, 10, 10, 1, 0.2, 0.4).is_err());
    }

    #[test]
    fn floor_losses_are_small() {
        for p in crate::params::registry() {
            for r in 8..200 {
                let ls = ln_separated_count(&p, r);
                let full = r as f64 / 2.0 * p.h_m();
                assert!(ls <= full + 1e-12);
                assert!(ls >= full - (p.p1 + p.p2) as f64 * 2.0 * (-(r as f64) / 4.0).exp());
            }
        }
    }

    #[test]
    fn master_inequality_examples() {
        let p = lookup("su21").unwrap();
        let hm = p.h_m();
        let z = check_master_inequality(&MassEntropyPoint { mass: 0.0, normalized_entropy: f64::NAN, limsup_entropy: hm / 2.0 }, &p);
        assert_eq!(z.slack, 0.0);
        let haar = check_master_inequality(&MassEntropyPoint { mass: 1.0, normalized_entropy: hm, limsup_entropy: hm }, &p);
        assert_eq!(haar.slack, 0.0);
        let bad = check_master_inequality(&MassEntropyPoint { mass: 1.0, normalized_entropy: 1.0, limsup_entropy: 1.5 }, &p);
        assert!(!bad.holds);
    }

    #[test]
    fn combination_curve() {
        let p = lookup("su21").unwrap();
        let seq = estimate_sequence(&p, 10, &[50, 100, 200, 400]);
        let q = convex_combination_curve(1.5, &p, &seq).unwrap();
        assert_eq!(q.point.mass, 0.5);
        assert_eq!(q.point.limsup_entropy, 1.5);
        assert_eq!(convex_combination_curve(2.0, &p, &seq).unwrap().point.mass, 1.0);
        assert_eq!(convex_combination_curve(1.0, &p, &seq).unwrap().point.mass, 0.0);
        assert!(convex_combination_curve(0.9, &p, &seq).is_err());
        for c in c_grid(&p, 21).unwrap() {
            assert!(convex_combination_curve(c, &p, &seq).unwrap().slack.abs() < 1e-12);
        }
    }

    #[test]
    fn epsilon_scan() {
        for name in ["rhp2", "su21"] {
            let p = lookup(name).unwrap();
            let ch = choose_r(&p, 10, 0.05, 100_000).unwrap();
            assert!(ch.entropy_lb > p.h_m() / 2.0 - 0.05);
            let prev = ch.big_r - 1;
            let d = (prev + 10) as f64;
            assert!(!(prev as f64 / d > 0.95 && ln_separated_count(&p, prev) / d > p.h_m() / 2.0 - 0.05));
        }
    }

    #[test]
    fn mass_profile_of_a_descent() {
        assert_eq!(empirical_mass_profile(&[5.0, 7.0], 4.0).unwrap(), 0.0);
        assert!(empirical_mass_profile(&[], 4.0).is_err());
        let conv = Sl2Convention::CayleyKlein;
        let s = 4.0;
        let g = conv.realize(&CuspOrbitState::sigma(10f64.exp() * s));
        let h = orbit_heights(&g, 120, conv);
        // ten steps of descent reach s exactly
        assert!((h[10] - s).abs() < 1e-9 * s);
        assert!(h[..10].iter().all(|&v| v > s) && h[11] < s);
        // a_r σ lies on the geodesic joining the cusp to itself, so the
        // orbit climbs back out and the time below s is finite
        let below = h.iter().filter(|&&v| v < s).count();
        assert_eq!(below, 2);
        let mut last = 1.0;
        for horizon in [20usize, 60, 120] {
            let f = empirical_mass_profile(&h[..horizon], s).unwrap();
            assert!(f < last);
            last = f;
        }
    }

    #[test]
    fn explicit_sets_on_the_modular_surface() {
        let p = lookup("rhck2").unwrap();
        let eta_p = default_eta_prime(&p, 0.4);
        let e = EntropyExperiment::new(&p, 100.0, 6, 10, 3, eta_p, 0.4).unwrap();
        let rep = explicit_separation(&p, &e, 1).unwrap();
        assert_eq!(rep.points, 64);
        assert!(rep.passed(), "{rep:?}");
    }
}
