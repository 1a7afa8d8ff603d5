//! Separated sets: grids of U-displacements whose orbits stay high in a cusp
//! for `R` steps and separate by at least `η` at time `R`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{nmul_unchecked, norm, UPoint};
use crate::height::{height_at, CuspOrbitState};
use crate::params::{Bracket, RankOneParams};

/// Default enumeration cap for explicit sets and trees.
pub const DEFAULT_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatedSetSpec {
    pub s: f64,
    #[serde(rename = "R")]
    pub big_r: u32,
    pub eta: f64,
    pub r: f64,
    #[serde(rename = "Z0")]
    pub z0: Vec<f64>,
    #[serde(rename = "X0")]
    pub x0: Vec<f64>,
}

/// The admissible interval `(s/3, 25s/64]` for the `A`-coordinate.
pub fn r_interval(s: f64) -> (f64, f64) {
    (s / 3.0, 25.0 * s / 64.0)
}

impl SeparatedSetSpec {
    /// Base point along the first coordinate axes.
    pub fn new(params: &RankOneParams, s: f64, big_r: u32, eta: f64, r: f64) -> Result<Self> {
        let axis = |n: usize, len: f64| {
            let mut v = vec![0.0; n];
            if let Some(c) = v.first_mut() {
                *c = len;
            }
            v
        };
        let (zl, xl) = base_norms(big_r);
        let spec = SeparatedSetSpec { s, big_r, eta, r, z0: axis(params.p2, zl), x0: axis(params.p1, xl) };
        spec.validate(params)?;
        Ok(spec)
    }

    /// Seeded choice of `r` in the admissible interval and of the base
    /// directions.
    pub fn random(params: &RankOneParams, s: f64, big_r: u32, eta: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = r_interval(s);
        // stay off the open left end point
        let r = lo + (hi - lo) * rng.gen_range(0.05..1.0);
        let (zl, xl) = base_norms(big_r);
        let spec = SeparatedSetSpec {
            s,
            big_r,
            eta,
            r,
            z0: random_direction(&mut rng, params.p2, zl),
            x0: random_direction(&mut rng, params.p1, xl),
        };
        spec.validate(params)?;
        Ok(spec)
    }

    pub fn validate(&self, params: &RankOneParams) -> Result<()> {
        if !(self.s > 39.0 * params.s1) {
            return Err(Error::InvalidParameter(format!("s = {} must exceed 39 s1 = {}", self.s, 39.0 * params.s1)));
        }
        let (lo, hi) = r_interval(self.s);
        if !(self.r > lo && self.r <= hi) {
            return Err(Error::InvalidParameter(format!("r = {} outside ({lo}, {hi}]", self.r)));
        }
        if !(self.eta > 0.0 && self.eta < 0.5) {
            return Err(Error::InvalidParameter(format!("eta = {} outside (0, 1/2)", self.eta)));
        }
        if self.big_r == 0 {
            return Err(Error::InvalidParameter("R must be positive".into()));
        }
        if self.z0.len() != params.p2 {
            return Err(Error::DimensionMismatch { expected: params.p2, got: self.z0.len() });
        }
        if self.x0.len() != params.p1 {
            return Err(Error::DimensionMismatch { expected: params.p1, got: self.x0.len() });
        }
        if params.p1 > 4 || params.p2 > 4 {
            return Err(Error::InvalidParameter(
                "axis-aligned grids stay inside the Euclidean ball only for root-space dimensions up to 4".into(),
            ));
        }
        let (zl, xl) = base_norms(self.big_r);
        let tol = |want: f64, got: f64| (want - got).abs() <= 1e-12 * want.max(1e-300);
        if (params.p2 > 0 && !tol(zl, norm(&self.z0))) || (params.p1 > 0 && !tol(xl, norm(&self.x0))) {
            return Err(Error::InvalidParameter("base point norms must be (3/2)e^{-R/2} and (3/2)e^{-R/4}".into()));
        }
        Ok(())
    }

    pub fn base(&self) -> UPoint {
        UPoint::new(self.z0.clone(), self.x0.clone())
    }
}

fn base_norms(big_r: u32) -> (f64, f64) {
    let r = big_r as f64;
    (1.5 * (-r / 2.0).exp(), 1.5 * (-r / 4.0).exp())
}

fn random_direction<R: Rng>(rng: &mut R, n: usize, len: f64) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = norm(&v);
        if l > 0.1 && l < 1.0 {
            return v.into_iter().map(|a| a * len / l).collect();
        }
    }
}

/// `ln ⌊e^x⌋`, exact for moderate `x` and without overflow for large `x`.
pub fn ln_floor_exp(x: f64) -> f64 {
    if x < 30.0 {
        x.exp().floor().ln()
    } else {
        x
    }
}

/// Number of grid values per `Z` and per `X` coordinate.
pub fn axis_counts(big_r: u32) -> (f64, f64) {
    let r = big_r as f64;
    ((r / 2.0).exp().floor(), (r / 4.0).exp().floor())
}

/// `ln S` with `S = ⌊e^{R/2}⌋^{p2} ⌊e^{R/4}⌋^{p1}`.
pub fn ln_separated_count(params: &RankOneParams, big_r: u32) -> f64 {
    let r = big_r as f64;
    params.p2 as f64 * ln_floor_exp(r / 2.0) + params.p1 as f64 * ln_floor_exp(r / 4.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparatedSet {
    pub spec: SeparatedSetSpec,
    /// Grid points `(Z_i, X_j)`; empty in log mode.
    pub points: Vec<UPoint>,
    /// `S` as a float (exact below 2^53).
    pub count: f64,
    pub log_count: f64,
    pub log_mode: bool,
}

impl SeparatedSet {
    /// The cusp normal form of `x u` for the `i`-th point.
    pub fn orbit_state(&self, params: &RankOneParams, i: usize) -> CuspOrbitState {
        let u = nmul_unchecked(params, &self.spec.base(), &self.points[i]);
        CuspOrbitState::unipotent(self.spec.r, u)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn centered_axis(n: usize, h: f64) -> Vec<f64> {
    let mid = (n as f64 - 1.0) / 2.0;
    (0..n).map(|i| (i as f64 - mid) * h).collect()
}

/// Build the grid, or only its counts when it would exceed `cap` and
/// `allow_log_mode` is set.
pub fn build_separated_set(spec: &SeparatedSetSpec, params: &RankOneParams, cap: usize, allow_log_mode: bool) -> Result<SeparatedSet> {
    spec.validate(params)?;
    let (nz, nx) = axis_counts(spec.big_r);
    let log_count = ln_separated_count(params, spec.big_r);
    let count = log_count.exp().round();
    if count > cap as f64 {
        if !allow_log_mode {
            return Err(Error::CapExceeded { count, cap });
        }
        return Ok(SeparatedSet { spec: spec.clone(), points: Vec::new(), count, log_count, log_mode: true });
    }
    let r = spec.big_r as f64;
    let zs = centered_axis(nz as usize, spec.eta * (-r).exp());
    let xs = centered_axis(nx as usize, spec.eta * (-r / 2.0).exp());
    let mut points = vec![UPoint::new(Vec::new(), Vec::new())];
    for _ in 0..params.p2 {
        points = points
            .into_iter()
            .flat_map(|p| zs.iter().map(move |&z| {
                let mut q = p.clone();
                q.z.push(z);
                q
            }))
            .collect();
    }
    for _ in 0..params.p1 {
        points = points
            .into_iter()
            .flat_map(|p| xs.iter().map(move |&x| {
                let mut q = p.clone();
                q.x.push(x);
                q
            }))
            .collect();
    }
    Ok(SeparatedSet { spec: spec.clone(), points, count, log_count, log_mode: false })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparatedSetReport {
    pub points: usize,
    /// Points violating the containment box.
    pub containment_violations: usize,
    /// Heights at `k = 0` or `k = R` above `s`.
    pub endpoint_height_violations: usize,
    /// Heights at some `k ∈ [0, R]` at most `s/39`.
    pub floor_height_violations: usize,
    pub min_endpoint_height: f64,
    pub max_endpoint_height: f64,
    pub min_height: f64,
    pub pairs_checked: u64,
    pub separation_violations: u64,
    pub min_separation: f64,
    pub min_z_gap: f64,
    pub min_x_gap: f64,
}

impl SeparatedSetReport {
    pub fn passed(&self) -> bool {
        self.containment_violations == 0
            && self.endpoint_height_violations == 0
            && self.floor_height_violations == 0
            && self.separation_violations == 0
    }
}

/// `max{|Z_w| e^R, |X_w| e^{R/2}}` for `w = u^-1 v`, without allocation.
pub(crate) fn time_separation(params: &RankOneParams, u: &UPoint, v: &UPoint, big_r: f64) -> f64 {
    let (zw, xw) = diff_norms(params, u, v);
    (zw * big_r.exp()).max(xw * (0.5 * big_r).exp())
}

/// `(|Z_w|, |X_w|)` for `w = u^-1 v`.
pub(crate) fn diff_norms(params: &RankOneParams, u: &UPoint, v: &UPoint) -> (f64, f64) {
    let mut xw = 0.0;
    for (a, b) in u.x.iter().zip(&v.x) {
        xw += (b - a) * (b - a);
    }
    let br = match params.bracket {
        Bracket::Abelian => 0.0,
        Bracket::Heisenberg => {
            // [-X_u, X_v]
            let mut w = 0.0;
            for (xp, yp) in u.x.chunks_exact(2).zip(v.x.chunks_exact(2)) {
                w -= xp[0] * yp[1] - xp[1] * yp[0];
            }
            w
        }
    };
    let mut zw = 0.0;
    for (i, (a, b)) in u.z.iter().zip(&v.z).enumerate() {
        let c = b - a + if i == 0 { 0.5 * br } else { 0.0 };
        zw += c * c;
    }
    (zw.sqrt(), xw.sqrt())
}

/// Check containment, the three height claims and exhaustive pairwise
/// separation. Log-mode sets report zero points.
pub fn verify_separated_set(set: &SeparatedSet, params: &RankOneParams) -> SeparatedSetReport {
    let spec = &set.spec;
    let big_r = spec.big_r as f64;
    let zmax = spec.eta * (-big_r / 2.0).exp();
    let xmax = spec.eta * (-big_r / 4.0).exp();
    let containment_violations = set
        .points
        .iter()
        .filter(|p| p.z_norm() > zmax * (1.0 + 1e-12) || p.x_norm() > xmax * (1.0 + 1e-12))
        .count();

    let heights: Vec<(f64, f64, f64, f64)> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let st = set.orbit_state(params, i);
            let h0 = height_at(&st, 0);
            let hr = height_at(&st, spec.big_r as u64);
            let hmin = (0..=spec.big_r as u64).map(|k| height_at(&st, k)).fold(f64::INFINITY, f64::min);
            (h0, hr, h0.min(hr), hmin)
        })
        .collect();
    let endpoint_height_violations = heights.iter().filter(|h| h.0 > spec.s || h.1 > spec.s).count();
    let floor_height_violations = heights.iter().filter(|h| h.3 <= spec.s / 39.0).count();
    let min_endpoint_height = heights.iter().map(|h| h.2).fold(f64::INFINITY, f64::min);
    let max_endpoint_height = heights.iter().map(|h| h.0.max(h.1)).fold(0.0, f64::max);
    let min_height = heights.iter().map(|h| h.3).fold(f64::INFINITY, f64::min);

    let n = set.len();
    let (viol, minsep, minz, minx) = (0..n)
        .into_par_iter()
        .map(|i| {
            let u = &set.points[i];
            let mut acc = (0u64, f64::INFINITY, f64::INFINITY, f64::INFINITY);
            for v in &set.points[i + 1..] {
                let d = time_separation(params, u, v, big_r);
                if d < spec.eta * (1.0 - 1e-12) {
                    acc.0 += 1;
                }
                acc.1 = acc.1.min(d);
                let zgap = u.z.iter().zip(&v.z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let xgap = u.x.iter().zip(&v.x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if zgap > 0.0 {
                    acc.2 = acc.2.min(zgap);
                }
                if xgap > 0.0 {
                    acc.3 = acc.3.min(xgap);
                }
            }
            acc
        })
        .reduce(
            || (0, f64::INFINITY, f64::INFINITY, f64::INFINITY),
            |a, b| (a.0 + b.0, a.1.min(b.1), a.2.min(b.2), a.3.min(b.3)),
        );
    SeparatedSetReport {
        points: n,
        containment_violations,
        endpoint_height_violations,
        floor_height_violations,
        min_endpoint_height,
        max_endpoint_height,
        min_height,
        pairs_checked: (n as u64) * (n.saturating_sub(1) as u64) / 2,
        separation_violations: viol,
        min_separation: minsep,
        min_z_gap: minz,
        min_x_gap: minx,
    }
}
