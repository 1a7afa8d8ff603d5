//! Tree-like collections, Frostman-type lower bounds, box counting and the
//! dimension bound calculator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::construction::{TreeParams, Tree};
use crate::error::{Error, Result};
use crate::group::{conj_scaled, ninv, nmul_unchecked, UPoint};
use crate::params::RankOneParams;

/// One set `c · a^L B_r a^{-L}` of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSet {
    /// Index in the previous stage (`u32::MAX` for stage one, whose parent
    /// is the root set).
    pub parent: u32,
    /// Center relative to the parent's center, seen in the parent's frame.
    pub step: UPoint,
    pub radius: f64,
}

/// Nested stages of U-balls. Centers are stored relative to the parent so
/// that deep stages stay meaningful in double precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeCollection {
    pub params: RankOneParams,
    /// Radius of the root ball `U0` (frame 0).
    pub root_radius: f64,
    /// Conjugation depth `L_j` of each stage.
    pub depths: Vec<u64>,
    pub stages: Vec<Vec<StageSet>>,
}

impl TreeCollection {
    /// The covers `g_i a^{L_n} B_{η0/4} a^{-L_n}` of a tree, inside the root
    /// ball of radius `η0/2`.
    pub fn from_tree(tree: &Tree) -> Self {
        let r = tree.tp.cover_radius();
        TreeCollection {
            params: tree.params.clone(),
            root_radius: 2.0 * r,
            depths: (1..=tree.depth()).map(|d| tree.tp.l(d)).collect(),
            stages: tree
                .levels
                .iter()
                .map(|lvl| lvl.iter().map(|n| StageSet { parent: n.parent, step: n.step.clone(), radius: r }).collect())
                .collect(),
        }
    }

    fn frame(&self, stage: usize) -> f64 {
        if stage == 0 {
            0.0
        } else {
            self.depths[stage - 1] as f64
        }
    }

    /// Largest max-metric diameter `2 r λ0^{-L_j}` in stage `j` (1-based).
    pub fn diameter(&self, j: usize) -> f64 {
        let r = self.stages[j - 1].iter().map(|s| s.radius).fold(0.0, f64::max);
        2.0 * r * (-(self.depths[j - 1] as f64) * self.params.ln_lambda0()).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ViolationKind {
    Overlap,
    Nesting,
    Diameter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub stage: usize,
    pub index: usize,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeLikeReport {
    pub stages: usize,
    pub sets: usize,
    pub sibling_pairs: u64,
    pub exhaustive: bool,
    /// Pairs that are the same set (allowed).
    pub identical_pairs: u64,
    pub violations: usize,
    pub first_violation: Option<Violation>,
}

impl TreeLikeReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Per-stage pair budget for exhaustive sibling checks.
const PAIR_BUDGET: u64 = 2_000_000;
const PAIR_SAMPLES: usize = 200_000;

/// Checks stage-wise disjointness, nesting and shrinking diameters.
///
/// All containment tests are rigorous for the max-quasi-metric: with
/// `|[X, Y]| <= |X||Y|`, a product `s·v` with `|v| <= ρ` satisfies
/// `|Z| <= |Z_s| + ρ_Z + |X_s| ρ_X / 2`. Sets with different parents are
/// disjoint because their parents are, so only siblings are compared.
pub fn validate_tree_like(tc: &TreeCollection, seed: u64) -> TreeLikeReport {
    let p = &tc.params;
    let mut violations: Vec<Violation> = Vec::new();
    let mut pairs_total = 0u64;
    let mut identical = 0u64;
    let mut exhaustive = true;

    for (si, stage) in tc.stages.iter().enumerate() {
        let kk = tc.depths[si] as f64 - tc.frame(si);
        // nesting in the parent's frame
        for (i, set) in stage.iter().enumerate() {
            let outer = if si == 0 {
                tc.root_radius
            } else {
                match tc.stages[si - 1].get(set.parent as usize) {
                    Some(par) => par.radius,
                    None => {
                        violations.push(Violation {
                            stage: si + 1,
                            index: i,
                            kind: ViolationKind::Nesting,
                            detail: format!("parent {} does not exist", set.parent),
                        });
                        continue;
                    }
                }
            };
            let (zs, xs) = (set.step.z_norm(), set.step.x_norm());
            let rz = set.radius * (-kk).exp();
            let rx = set.radius * (-0.5 * kk).exp();
            let supz = if p.p2 > 0 { zs + rz + 0.5 * xs * rx } else { 0.0 };
            let supx = if p.p1 > 0 { xs + rx } else { 0.0 };
            let sup = supz.max(supx);
            if sup > outer {
                violations.push(Violation {
                    stage: si + 1,
                    index: i,
                    kind: ViolationKind::Nesting,
                    detail: format!("reaches {sup:.3e} in a parent of radius {outer:.3e}"),
                });
            }
        }

        // sibling overlap at the stage's own frame
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut start = 0;
        for i in 1..=stage.len() {
            if i == stage.len() || stage[i].parent != stage[start].parent {
                groups.push((start, i));
                start = i;
            }
        }
        let status = |a: usize, b: usize| -> u8 {
            let (u, v) = (&stage[a], &stage[b]);
            if u.step == v.step && u.radius == v.radius {
                return 1;
            }
            let w = conj_scaled(&nmul_unchecked(p, &ninv(&u.step), &v.step), -kk);
            let rs = u.radius + v.radius;
            let apart = w.x_norm() > rs || w.z_norm() > rs + 0.5 * u.radius * v.radius;
            if apart {
                0
            } else {
                2
            }
        };
        let total: u64 = groups.iter().map(|&(s, e)| ((e - s) * (e - s).saturating_sub(1) / 2) as u64).sum();
        let checked: Vec<(usize, usize, u8)> = if total <= PAIR_BUDGET {
            pairs_total += total;
            groups
                .par_iter()
                .flat_map_iter(|&(s, e)| (s..e).flat_map(move |a| (a + 1..e).map(move |b| (a, b))))
                .map(|(a, b)| (a, b, status(a, b)))
                .filter(|x| x.2 != 0)
                .collect()
        } else {
            exhaustive = false;
            pairs_total += PAIR_SAMPLES as u64;
            let big: Vec<(usize, usize)> = groups.iter().copied().filter(|g| g.1 - g.0 > 1).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (si as u64).wrapping_mul(0x9E37_79B9));
            let picks: Vec<(usize, usize)> = (0..PAIR_SAMPLES)
                .map(|_| {
                    let (s, e) = big[rng.gen_range(0..big.len())];
                    let a = rng.gen_range(s..e);
                    let mut b = rng.gen_range(s..e - 1);
                    if b >= a {
                        b += 1;
                    }
                    (a.min(b), a.max(b))
                })
                .collect();
            picks.par_iter().map(|&(a, b)| (a, b, status(a, b))).filter(|x| x.2 != 0).collect()
        };
        for (a, b, st) in checked {
            if st == 1 {
                identical += 1;
            } else {
                violations.push(Violation {
                    stage: si + 1,
                    index: a,
                    kind: ViolationKind::Overlap,
                    detail: format!("overlaps sibling {b}"),
                });
            }
        }

        if si > 0 && tc.diameter(si + 1) >= tc.diameter(si) {
            violations.push(Violation {
                stage: si + 1,
                index: 0,
                kind: ViolationKind::Diameter,
                detail: format!("diameter {:.3e} does not shrink", tc.diameter(si + 1)),
            });
        }
    }
    let count = violations.len();
    violations.sort_by_key(|v| (v.stage, v.index));
    TreeLikeReport {
        stages: tc.stages.len(),
        sets: tc.stages.iter().map(|s| s.len()).sum(),
        sibling_pairs: pairs_total,
        exhaustive,
        identical_pairs: identical,
        violations: count,
        first_violation: violations.into_iter().next(),
    }
}

/// Stage densities `Δ_j` and diameters `d_j`, both stored as logarithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySequence {
    pub ln_deltas: Vec<f64>,
    pub ln_diameters: Vec<f64>,
}

impl DensitySequence {
    pub fn new(ln_deltas: Vec<f64>, ln_diameters: Vec<f64>) -> Result<Self> {
        if ln_deltas.len() != ln_diameters.len() || ln_deltas.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "density and diameter sequences need equal lengths >= 2 (got {} and {})",
                ln_deltas.len(),
                ln_diameters.len()
            )));
        }
        if let Some(j) = ln_deltas.iter().position(|d| !(*d <= 0.0)) {
            return Err(Error::InvalidParameter(format!("density at stage {j} exceeds 1")));
        }
        if let Some(j) = ln_diameters.iter().position(|d| !(*d < 0.0)) {
            return Err(Error::InvalidParameter(format!("diameter at stage {j} is not below 1")));
        }
        Ok(DensitySequence { ln_deltas, ln_diameters })
    }

    pub fn from_values(deltas: &[f64], diameters: &[f64]) -> Result<Self> {
        Self::new(deltas.iter().map(|d| d.ln()).collect(), diameters.iter().map(|d| d.ln()).collect())
    }

    pub fn len(&self) -> usize {
        self.ln_deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ln_deltas.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrostmanBound {
    /// `ratios[j-1] = Σ_{i<j} |log Δ_i| / |log d_j|`, `j = 1, …, len-1`.
    pub ratios: Vec<f64>,
    /// `dim U - ratio`, stage by stage.
    pub bounds: Vec<f64>,
    /// Largest ratio over the trailing window.
    pub limsup_ratio: f64,
    pub lower_bound: f64,
}

/// Running Frostman estimate; the limsup is replaced by the largest ratio
/// over the trailing `window` fraction of stages (0.5 by default).
pub fn frostman_lower_bound(ds: &DensitySequence, dim_u: f64, window: Option<f64>) -> Result<FrostmanBound> {
    let ds = DensitySequence::new(ds.ln_deltas.clone(), ds.ln_diameters.clone())?;
    let w = window.unwrap_or(0.5);
    if !(w > 0.0 && w <= 1.0) {
        return Err(Error::InvalidParameter(format!("window fraction {w} outside (0, 1]")));
    }
    let mut acc = 0.0;
    let mut ratios = Vec::with_capacity(ds.len() - 1);
    for j in 1..ds.len() {
        acc += ds.ln_deltas[j - 1].abs();
        ratios.push(acc / ds.ln_diameters[j].abs());
    }
    let bounds: Vec<f64> = ratios.iter().map(|r| dim_u - r).collect();
    let tail = ((ratios.len() as f64 * w).ceil() as usize).clamp(1, ratios.len());
    let limsup_ratio = ratios[ratios.len() - tail..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(FrostmanBound { ratios, bounds, limsup_ratio, lower_bound: dim_u - limsup_ratio })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiameterMode {
    /// `2 (η0/4) λ0^{-(F(n)+R_n)}`, the max-metric diameter of a cover.
    Exact,
    /// `(η0/2) e^{-(F(n)+R_n)/2}`, the bound quoted for the construction.
    PaperBound,
}

impl std::str::FromStr for DiameterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(DiameterMode::Exact),
            "paper-bound" | "paper" => Ok(DiameterMode::PaperBound),
            _ => Err(Error::InvalidParameter(format!("diameter mode must be exact or paper-bound, got {s:?}"))),
        }
    }
}

/// Densities and diameters of the construction with the growing schedule,
/// stages `0..=n`.
///
/// `Δ_0` is the share of the root ball covered by stage one,
/// `S_1 e^{-R_1 h_m} 2^{-dim U}`; for `k >= 1`,
/// `Δ_k = S_{k+1} e^{-(R_{k+1}+R') h_m}`. `d_0` is the root diameter `η0`.
pub fn paper_density_schedule(params: &RankOneParams, tp: &TreeParams, n: u32, mode: DiameterMode) -> Result<DensitySequence> {
    if n == 0 {
        return Err(Error::InvalidParameter("density schedule needs n >= 1".into()));
    }
    let hm = params.h_m();
    let rp = tp.rprime as f64;
    let mut ln_deltas = Vec::with_capacity(n as usize + 1);
    ln_deltas.push(tp.ln_s_k(params, 1) - tp.r_k(1) as f64 * hm - params.dim_u() as f64 * 2f64.ln());
    for k in 1..=n {
        ln_deltas.push(tp.ln_s_k(params, k + 1) - (tp.r_k(k + 1) as f64 + rp) * hm);
    }
    let rate = match mode {
        DiameterMode::Exact => params.ln_lambda0(),
        DiameterMode::PaperBound => 0.5,
    };
    let mut ln_diameters = vec![tp.eta0.ln()];
    for j in 1..=n {
        ln_diameters.push((tp.eta0 / 2.0).ln() - rate * tp.l(j) as f64);
    }
    DensitySequence::new(ln_deltas, ln_diameters)
}

/// `(c1, c2)`: the extreme values of `Δ_k e^{k h_m / 2}` over `1 <= k < len`.
pub fn density_sandwich(params: &RankOneParams, ds: &DensitySequence) -> (f64, f64) {
    let hm = params.h_m();
    let vals = (1..ds.len()).map(|k| ds.ln_deltas[k] + k as f64 * hm / 2.0);
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    (lo.exp(), hi.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxCount {
    pub sizes: Vec<f64>,
    pub counts: Vec<usize>,
    pub slope: f64,
    pub intercept: f64,
    /// RMS residual of the fit in `log N`.
    pub residual: f64,
}

/// `count` box sizes spaced geometrically from `hi` down to `lo`.
pub fn geometric_ladder(hi: f64, lo: f64, count: usize) -> Result<Vec<f64>> {
    if !(hi > lo && lo > 0.0) || count < 2 {
        return Err(Error::InvalidParameter(format!("degenerate ladder {hi} .. {lo} with {count} rungs")));
    }
    let q = (lo / hi).ln() / (count - 1) as f64;
    Ok((0..count).map(|i| hi * (q * i as f64).exp()).collect())
}

/// Least-squares slope of `log N(ε)` against `log(1/ε)`, with `N(ε)` the
/// number of occupied cells of the grid `ε ℤ^d`.
pub fn boxcount_dimension(points: &[Vec<f64>], sizes: &[f64]) -> Result<BoxCount> {
    let mut distinct: Vec<f64> = sizes.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 || sizes.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidParameter("box-size ladder needs at least two distinct positive sizes".into()));
    }
    if points.is_empty() {
        return Err(Error::InvalidParameter("no points to count".into()));
    }
    let counts: Vec<usize> = sizes
        .par_iter()
        .map(|&e| {
            let cells: HashSet<Vec<i64>> = points.iter().map(|p| p.iter().map(|c| (c / e).floor() as i64).collect()).collect();
            cells.len()
        })
        .collect();
    let xs: Vec<f64> = sizes.iter().map(|e| -e.ln()).collect();
    let ys: Vec<f64> = counts.iter().map(|&c| (c as f64).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum::<f64>() / n).sqrt();
    Ok(BoxCount { sizes: sizes.to_vec(), counts, slope, intercept, residual })
}

/// Coordinates `(Z, X)` of the depth-`n` points of a tree.
pub fn leaf_coordinates(tree: &Tree) -> Vec<Vec<f64>> {
    let n = tree.depth();
    (0..tree.level(n).len())
        .into_par_iter()
        .map(|id| {
            let g = tree.g(n, id);
            g.z.iter().chain(&g.x).copied().collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimBounds {
    pub lower: f64,
    pub upper: f64,
    /// Known value (real hyperbolic case).
    pub exact: Option<f64>,
    /// Conjectured value `dim G - dim U / 2`.
    pub conjecture: f64,
}

/// Bounds on the Hausdorff dimension of the points diverging on average.
pub fn hausdorff_bounds(params: &RankOneParams) -> DimBounds {
    let g = params.dim_g as f64;
    let half_u = params.dim_u() as f64 / 2.0;
    let (p1, p2) = (params.p1 as f64, params.p2 as f64);
    let conjecture = g - half_u;
    DimBounds {
        lower: g - half_u - p2 / 2.0,
        upper: g - half_u + p1 / 4.0,
        exact: (params.p1 * params.p2 == 0).then_some(conjecture),
        conjecture,
    }
}

/// `c r^β e^{(dim NAM + p1/2 - β) L}`, or with `p2_zero` the sharper
/// `c r^β e^{(dim NAM - β) L / 2}` available when `p2 = 0`.
pub fn measure_contraction_bound(beta: f64, r: f64, l: u64, params: &RankOneParams, p2_zero: bool, c: f64) -> Result<f64> {
    Ok(ln_measure_contraction_bound(beta, r, l, params, p2_zero, c)?.exp())
}

pub fn ln_measure_contraction_bound(beta: f64, r: f64, l: u64, params: &RankOneParams, p2_zero: bool, c: f64) -> Result<f64> {
    if !(beta >= 0.0 && r > 0.0 && c > 0.0) {
        return Err(Error::InvalidParameter(format!("need beta >= 0, r > 0, c > 0 (beta={beta}, r={r}, c={c})")));
    }
    if p2_zero && params.p2 != 0 {
        return Err(Error::InvalidParameter(format!("{} has p2 = {}, the sharper bound needs p2 = 0", params.name, params.p2)));
    }
    let nam = params.dim_nam() as f64;
    let rate = if p2_zero { (nam - beta) / 2.0 } else { nam + params.p1 as f64 / 2.0 - beta };
    Ok(c.ln() + beta * r.ln() + rate * l as f64)
}

/// Log Lebesgue volume of the tube `a^L B^U_r a^{-L} B^{NAM}_r` in the
/// product coordinates, with `B^{NAM}_r` a box of side `2r`.
pub fn ln_tube_volume(r: f64, l: u64, params: &RankOneParams) -> f64 {
    crate::group::ln_uball_volume(r, l as f64, params) + params.dim_nam() as f64 * (2.0 * r).ln()
}
