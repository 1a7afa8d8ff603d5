//! Arithmetic in the two-step nilpotent groups N and U, the geodesic
//! inversion on D, conjugation by the flow element, and the max-quasi-metric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::RankOneParams;

/// Divisions by quantities below this are rejected.
pub const NUMERIC_FLOOR: f64 = 1e-300;

/// Largest conjugation exponent accepted by [`conj_by_a`].
pub const MAX_EXPONENT: i64 = 700;

/// A point `(Z, X)` of `g2 x g1`, read through `exp(Z + X)` as an element
/// of N or, via `sigma(1, Z, X) sigma`, of U.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NilPoint {
    #[serde(rename = "Z")]
    pub z: Vec<f64>,
    #[serde(rename = "X")]
    pub x: Vec<f64>,
}

pub type NPoint = NilPoint;
pub type UPoint = NilPoint;

impl NilPoint {
    pub fn new(z: Vec<f64>, x: Vec<f64>) -> Self {
        NilPoint { z, x }
    }

    pub fn identity(params: &RankOneParams) -> Self {
        NilPoint { z: vec![0.0; params.p2], x: vec![0.0; params.p1] }
    }

    pub fn inverse(&self) -> Self {
        NilPoint {
            z: self.z.iter().map(|v| -v).collect(),
            x: self.x.iter().map(|v| -v).collect(),
        }
    }

    pub fn z_norm(&self) -> f64 {
        norm(&self.z)
    }

    pub fn x_norm(&self) -> f64 {
        norm(&self.x)
    }

    /// `max{|Z|, |X|}`: distance to the identity.
    pub fn size(&self) -> f64 {
        self.z_norm().max(self.x_norm())
    }

    fn check(&self, params: &RankOneParams) -> Result<()> {
        if self.z.len() != params.p2 {
            return Err(Error::DimensionMismatch { expected: params.p2, got: self.z.len() });
        }
        if self.x.len() != params.p1 {
            return Err(Error::DimensionMismatch { expected: params.p1, got: self.x.len() });
        }
        Ok(())
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Group law `(Z_a + Z_b + [X_a, X_b] / 2, X_a + X_b)`.
pub fn nmul(params: &RankOneParams, a: &NilPoint, b: &NilPoint) -> Result<NilPoint> {
    a.check(params)?;
    b.check(params)?;
    Ok(nmul_unchecked(params, a, b))
}

pub(crate) fn nmul_unchecked(params: &RankOneParams, a: &NilPoint, b: &NilPoint) -> NilPoint {
    let br = params.bracket(&a.x, &b.x);
    let z = a.z.iter().zip(&b.z).zip(&br).map(|((p, q), w)| p + q + 0.5 * w).collect();
    let x = a.x.iter().zip(&b.x).map(|(p, q)| p + q).collect();
    NilPoint { z, x }
}

pub fn ninv(u: &NilPoint) -> NilPoint {
    u.inverse()
}

/// A point `(t, Z, X)` of the Siegel-domain model `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPoint {
    pub t: f64,
    #[serde(rename = "Z")]
    pub z: Vec<f64>,
    #[serde(rename = "X")]
    pub x: Vec<f64>,
}

impl DomainPoint {
    pub fn in_domain(&self) -> bool {
        self.t > 0.25 * dot(&self.x, &self.x)
    }
}

/// Geodesic inversion at the origin `(1, 0, 0)`:
/// `(t, Z, X) -> (t, -Z, (-t + J_Z) X) / (t^2 + |Z|^2)`.
pub fn sigma_invert(params: &RankOneParams, p: &DomainPoint) -> Result<DomainPoint> {
    if p.z.len() != params.p2 {
        return Err(Error::DimensionMismatch { expected: params.p2, got: p.z.len() });
    }
    if p.x.len() != params.p1 {
        return Err(Error::DimensionMismatch { expected: params.p1, got: p.x.len() });
    }
    let den = p.t * p.t + dot(&p.z, &p.z);
    if den < NUMERIC_FLOOR {
        return Err(Error::NumericFloor(format!("t^2 + |Z|^2 = {den:e}")));
    }
    let jx = params.jmap(&p.z, &p.x);
    Ok(DomainPoint {
        t: p.t / den,
        z: p.z.iter().map(|v| -v / den).collect(),
        x: p.x.iter().zip(&jx).map(|(xi, ji)| (-p.t * xi + ji) / den).collect(),
    })
}

/// Conjugation by the flow element scaling `(Z, X)` to
/// `(e^{-k} Z, e^{-k/2} X)`; `k > 0` contracts U, `k < 0` expands it.
///
/// The time-`L` displacement of `u` under the flow is `conj_by_a(u, -L)`.
pub fn conj_by_a(u: &NilPoint, k: i64) -> Result<NilPoint> {
    if k.abs() > MAX_EXPONENT {
        return Err(Error::ExponentOverflow(k));
    }
    Ok(conj_scaled(u, k as f64))
}

pub(crate) fn conj_scaled(u: &NilPoint, k: f64) -> NilPoint {
    let sz = (-k).exp();
    let sx = (-0.5 * k).exp();
    NilPoint {
        z: u.z.iter().map(|v| v * sz).collect(),
        x: u.x.iter().map(|v| v * sx).collect(),
    }
}

/// Left-invariant max-quasi-metric `max{|Z_w|, |X_w|}`, `w = u^{-1} v`.
pub fn u_dist(params: &RankOneParams, u: &NilPoint, v: &NilPoint) -> f64 {
    nmul_unchecked(params, &u.inverse(), v).size()
}

/// Lebesgue volume of `a^L B_r a^{-L}`: `(2r)^{p1+p2} e^{-L h_m}`.
pub fn uball_volume(r: f64, l: u64, params: &RankOneParams) -> f64 {
    ln_uball_volume(r, l as f64, params).exp()
}

pub fn ln_uball_volume(r: f64, l: f64, params: &RankOneParams) -> f64 {
    params.dim_u() as f64 * (2.0 * r).ln() - l * params.h_m()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CauchySchwarzReport {
    pub instance: String,
    pub samples: usize,
    pub max_ratio: f64,
    pub vacuous: bool,
}

/// Sample `|[X, Y]| / (|X| |Y|)`; fails if the maximum exceeds `1 + 1e-12`.
pub fn bracket_cs_check(
    params: &RankOneParams,
    samples: usize,
    seed: u64,
) -> Result<CauchySchwarzReport> {
    if params.p1 == 0 || params.p2 == 0 {
        return Ok(CauchySchwarzReport {
            instance: params.name.clone(),
            samples: 0,
            max_ratio: 0.0,
            vacuous: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio: f64 = 0.0;
    for _ in 0..samples {
        let x = random_vec(&mut rng, params.p1);
        let y = random_vec(&mut rng, params.p1);
        let den = norm(&x) * norm(&y);
        if den < NUMERIC_FLOOR {
            continue;
        }
        max_ratio = max_ratio.max(norm(&params.bracket(&x, &y)) / den);
    }
    if max_ratio > 1.0 + 1e-12 {
        return Err(Error::Validation(format!(
            "instance {}: bracket violates |[X,Y]| <= |X||Y| (ratio {max_ratio})",
            params.name
        )));
    }
    Ok(CauchySchwarzReport { instance: params.name.clone(), samples, max_ratio, vacuous: false })
}

/// Largest `|<J_Z X, Y> - <Z, [X, Y]>|` over random triples.
pub fn adjointness_defect(params: &RankOneParams, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = random_vec(&mut rng, params.p1);
        let y = random_vec(&mut rng, params.p1);
        let z = random_vec(&mut rng, params.p2);
        let lhs = dot(&params.jmap(&z, &x), &y);
        let rhs = dot(&z, &params.bracket(&x, &y));
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

pub(crate) fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// A uniformly random point of the open box `{|Z| < r, |X| < r}`.
pub(crate) fn random_in_box<R: Rng>(rng: &mut R, params: &RankOneParams, r: f64) -> NilPoint {
    NilPoint { z: random_in_ball(rng, params.p2, r), x: random_in_ball(rng, params.p1, r) }
}

fn random_in_ball<R: Rng>(rng: &mut R, n: usize, r: f64) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    loop {
        let v = random_vec(rng, n);
        let l = norm(&v);
        if l < 1.0 && l > 0.0 {
            return v.into_iter().map(|a| a * r).collect();
        }
    }
}
