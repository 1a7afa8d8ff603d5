//! Closed-form cusp heights along orbits of the time-one map, and excursion
//! statistics of height profiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::UPoint;
use crate::params::RankOneParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CuspId(pub u32);

/// Bruhat cell of the element realizing the height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CuspCell {
    /// `g = xi n a_r m sigma`
    Sigma,
    /// `g = xi n a_r m sigma(1, Z, X) sigma`
    U(UPoint),
}

/// A point high in a cusp, in normal form. Height does not depend on the
/// `N` and `M` components, so they are not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuspOrbitState {
    pub cusp: CuspId,
    pub r: f64,
    pub cell: CuspCell,
}

impl CuspOrbitState {
    pub fn sigma(r: f64) -> Self {
        CuspOrbitState { cusp: CuspId(0), r, cell: CuspCell::Sigma }
    }

    pub fn unipotent(r: f64, u: UPoint) -> Self {
        CuspOrbitState { cusp: CuspId(0), r, cell: CuspCell::U(u) }
    }

    /// `(|X|^2 / 4, |Z|)` of the U-part, if any.
    fn shape(&self) -> Option<(f64, f64)> {
        match &self.cell {
            CuspCell::Sigma => None,
            CuspCell::U(u) => {
                let xn = u.x_norm();
                Some((0.25 * xn * xn, u.z_norm()))
            }
        }
    }
}

/// Height after `k` steps (real `k` allowed), valid while the orbit stays
/// above `s1`.
pub fn height_at_real(state: &CuspOrbitState, k: f64) -> f64 {
    let y = (-k).exp();
    match state.shape() {
        None => state.r * y,
        Some((q, zeta)) => state.r * y / ((y + q) * (y + q) + zeta * zeta),
    }
}

pub fn height_at(state: &CuspOrbitState, k: u64) -> f64 {
    height_at_real(state, k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeightSample {
    pub height: f64,
    /// All heights at steps `0..=k` exceed `s1`.
    pub valid: bool,
}

/// Heights at steps `0..=n` with the validity flag relative to `s1`.
pub fn height_series(state: &CuspOrbitState, n: u64, s1: f64) -> Vec<HeightSample> {
    let mut valid = true;
    (0..=n)
        .map(|k| {
            let h = height_at(state, k);
            valid &= h > s1;
            HeightSample { height: h, valid }
        })
        .collect()
}

/// Continuous-time maximizer `(k*, h*)` of the U-cell height formula.
///
/// With `y* = sqrt(q^2 + |Z|^2)`, `q = |X|^2/4`: `k* = -ln y*` and
/// `h* = r / (2 (y* + q))`. `k*` may be negative.
pub fn peak_time(state: &CuspOrbitState) -> Result<(f64, f64)> {
    let (q, zeta) = state.shape().ok_or_else(|| {
        Error::InvalidParameter("sigma cell heights decrease monotonically; no peak".into())
    })?;
    let ystar = (q * q + zeta * zeta).sqrt();
    if ystar <= 0.0 {
        return Err(Error::InvalidParameter(
            "trivial U-part: height grows without bound, no peak".into(),
        ));
    }
    Ok((-ystar.ln(), state.r / (2.0 * (ystar + q))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightProfile {
    pub values: Vec<f64>,
    pub threshold_s1: f64,
}

impl HeightProfile {
    pub fn from_state(state: &CuspOrbitState, n: u64, s1: f64) -> Self {
        HeightProfile { values: (0..=n).map(|k| height_at(state, k)).collect(), threshold_s1: s1 }
    }
}

/// Maximal runs `[start, end]` (inclusive) of steps with value `>= s`.
pub fn excursion_above(profile: &HeightProfile, s: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (k, &v) in profile.values.iter().enumerate() {
        match (v >= s, start) {
            (true, None) => start = Some(k),
            (false, Some(a)) => {
                out.push((a, k - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(a) = start {
        out.push((a, profile.values.len() - 1));
    }
    out
}

/// Bound on the number of consecutive steps an orbit crossing the strip
/// `s1 < height <= s` can spend inside it.
///
/// Along a crossing the height formula is monotone. Relative to its peak
/// the U-cell height is `(1 + b) / (cosh d + b)` at distance `d` with
/// `b in [0, 1]`, and `b = 0` when `p1 = 0`. The strip therefore occupies a
/// half-open interval of `d` of length at most `acosh(s / s1)` (`p1 = 0`)
/// or `2 acosh(sqrt(s / s1))` (`p1 > 0`), which holds at most the ceiling
/// of that many integer steps. Sigma-cell descents lose a factor `e` per
/// step and are covered by the same count.
pub fn strip_time_bound(params: &RankOneParams, s1: f64, s: f64) -> Result<u32> {
    if !(s1 > 0.0 && s > s1) {
        return Err(Error::InvalidParameter(format!("strip needs s > s1 > 0 (s1={s1}, s={s})")));
    }
    let ratio = s / s1;
    let len = if params.p1 == 0 { ratio.acosh() } else { 2.0 * ratio.sqrt().acosh() };
    Ok((len.ceil() as u32).max(1))
}

/// Lengths of the runs inside `(s1, s]` that connect a step `<= s1` with a
/// step `> s` (in either order).
pub fn crossing_strip_runs(values: &[f64], s1: f64, s: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut k = 0;
    while k < values.len() {
        if values[k] > s1 && values[k] <= s {
            let a = k;
            while k < values.len() && values[k] > s1 && values[k] <= s {
                k += 1;
            }
            if a > 0 && k < values.len() {
                let before = values[a - 1];
                let after = values[k];
                let crosses = (before <= s1 && after > s) || (before > s && after <= s1);
                if crosses {
                    out.push(k - a);
                }
            }
        } else {
            k += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::NilPoint;
    use crate::params::lookup;

    #[test]
    fn sigma_cell_heights() {
        let st = CuspOrbitState::sigma(10.0);
        assert!((height_at(&st, 3) - 0.49787068367863944).abs() < 1e-14);
        let s = height_series(&st, 5, 2.0);
        assert!(s[1].valid && !s[2].valid && !s[5].valid);
        assert!(peak_time(&st).is_err());
    }

    #[test]
    fn u_cell_heights() {
        let st = CuspOrbitState::unipotent(10.0, NilPoint::new(vec![1.0], vec![]));
        assert!((height_at(&st, 0) - 5.0).abs() < 1e-15);
    }

    // Oracle for the peak: maximize on a fine grid of real k and compare.
    #[test]
    fn peak_matches_grid_search() {
        let cases = [
            (1.0, vec![(-2.0f64).exp()], vec![]),
            (7.0, vec![0.01], vec![0.3]),
            (3.0, vec![], vec![0.05]),
        ];
        for (r, z, x) in cases {
            let st = CuspOrbitState::unipotent(r, NilPoint::new(z, x));
            let (ks, hs) = peak_time(&st).unwrap();
            let mut best = (f64::MIN, 0.0);
            let mut k = ks - 3.0;
            while k < ks + 3.0 {
                let h = height_at_real(&st, k);
                if h > best.0 {
                    best = (h, k);
                }
                k += 1e-5;
            }
            assert!((best.0 - hs).abs() / hs < 1e-9, "{best:?} vs {hs}");
            assert!((best.1 - ks).abs() < 1e-3);
            assert!(hs * (1.0 + 1e-12) >= height_at_real(&st, ks.round()));
        }
        let st = CuspOrbitState::unipotent(1.0, NilPoint::new(vec![(-2.0f64).exp()], vec![]));
        let (ks, hs) = peak_time(&st).unwrap();
        assert!((ks - 2.0).abs() < 1e-12);
        assert!((hs - 0.5 * 2.0f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn excursions() {
        let st = CuspOrbitState::sigma(10.0);
        let prof = HeightProfile::from_state(&st, 6, 2.0);
        assert_eq!(excursion_above(&prof, 1.0), vec![(0, 2)]);
        assert!(excursion_above(&prof, 100.0).is_empty());
        let prof = HeightProfile { values: vec![3.0, 0.0, 3.0, 3.0, 0.0, 3.0], threshold_s1: 1.0 };
        assert_eq!(excursion_above(&prof, 1.0), vec![(0, 0), (2, 3), (5, 5)]);
    }

    #[test]
    fn strip_bound_examples() {
        let p = lookup("rhp2").unwrap();
        assert_eq!(strip_time_bound(&p, 2.0, 2.0 * std::f64::consts::E).unwrap(), 2);
        assert_eq!(strip_time_bound(&p, 2.0, 2.0 + 1e-9).unwrap(), 1);
        assert!(strip_time_bound(&p, 2.0, 2.0).is_err());
        let ck = lookup("rhck2").unwrap();
        assert_eq!(strip_time_bound(&ck, 2.0, 2.0 * std::f64::consts::E).unwrap(), 3);
    }

    #[test]
    fn crossing_runs() {
        let v = [1.0, 3.0, 4.0, 10.0, 4.0, 1.0];
        assert_eq!(crossing_strip_runs(&v, 2.0, 5.0), vec![2, 1]);
        // a bounce inside the strip does not cross
        let v = [1.0, 3.0, 1.0];
        assert!(crossing_strip_runs(&v, 2.0, 5.0).is_empty());
    }
}
