//! Limit points of tree branches and the orbit segments they follow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::entropy::empirical_mass_profile;
use crate::error::{Error, Result};
use crate::group::UPoint;
use crate::sl2::{height_direct, LatticePoint, Mat2, Sl2Convention};

use super::schedule::{divergence_ratio, limit_tail_bound};
use super::tree::{mix, Tree};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitPoint {
    pub depth: u32,
    pub index: Vec<u32>,
    /// `g` at the given depth, in double precision.
    pub g: UPoint,
    /// Distance from `g` to the limit of any branch extending it.
    pub tail_bound: f64,
    /// `|T_1|`: how far the point wandered from its depth-one ancestor.
    pub wander: f64,
}

pub fn limit_point(tree: &Tree, depth: u32, id: usize) -> LimitPoint {
    let tails = tree.tails(depth, id);
    LimitPoint {
        depth,
        index: tree.index(depth, id),
        g: tree.g(depth, id),
        tail_bound: limit_tail_bound(&tree.tp, depth),
        wander: tails[0].size(),
    }
}

/// Heights of `x_1 g a^t` for `t = 0, …, F(n)+R_n - 1` along the branch of
/// a depth-`n` node of an SL2 tree.
///
/// Stage `m` starts at `W_m`, the stage point with the NAM mismatch left by
/// the join landing there. Within stage `m` and the join that follows it
/// the point is `G_m a^{t-R_m}` with `G_m = W_m a^{R_m} u(T_m)`, so nothing
/// is expanded beyond the join ball.
pub fn trajectory_heights(tree: &Tree, depth: u32, id: usize) -> Result<Vec<f64>> {
    let conv = sl2_convention(tree)?;
    let chain = tree.chain(depth, id);
    let tails = tree.tails(depth, id);
    let rp = tree.tp.rprime;
    let mut out = Vec::with_capacity(tree.tp.l(depth) as usize);
    for m in 1..=depth {
        let node = &tree.levels[m as usize - 1][chain[m as usize - 1]];
        let rm = tree.tp.r_k(m);
        let w = tree.stages[m as usize - 1].point_matrix(conv, node.j as usize) * node.nam;
        let gm = w * conv.flow_element(rm as f64) * conv.u_matrix(&tails[m as usize - 1]);
        let len = if m < depth { rm + rp } else { rm };
        for t in 0..len {
            let x = gm * conv.flow_element(t as f64 - rm as f64);
            out.push(height_direct(&LatticePoint::new(x), conv));
        }
    }
    Ok(out)
}

fn sl2_convention(tree: &Tree) -> Result<Sl2Convention> {
    tree.sl2
        .as_ref()
        .map(|s| s.convention)
        .ok_or_else(|| Error::InvalidParameter("orbit segments need a tree built with the SL2 oracle".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub depth: u32,
    pub points: usize,
    pub horizon: u64,
    pub max_fraction: f64,
    pub mean_fraction: f64,
    pub bound: f64,
    pub min_height_in_stages: f64,
}

impl DivergenceReport {
    pub fn passed(&self) -> bool {
        self.max_fraction <= self.bound
    }
}

/// Compact-visit fractions of up to `samples` depth-`n` points of an SL2
/// tree against `((n-1)R' + 2nℓ)/(F(n)+R_n)`.
pub fn divergence_check(tree: &Tree, depth: u32, samples: usize, s: f64, ell: u32, seed: u64) -> Result<DivergenceReport> {
    let level = tree.level(depth).len();
    let ids: Vec<usize> = if level <= samples {
        (0..level).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, depth as u64));
        (0..samples).map(|_| rng.gen_range(0..level)).collect()
    };
    let mut max_fraction: f64 = 0.0;
    let mut sum = 0.0;
    let mut min_stage = f64::INFINITY;
    for &id in &ids {
        let h = trajectory_heights(tree, depth, id)?;
        let f = empirical_mass_profile(&h, s)?;
        max_fraction = max_fraction.max(f);
        sum += f;
        // the stretches t in [F(m), F(m) + R_m] should stay high
        let mut t0 = 0usize;
        for m in 1..=depth {
            let rm = tree.tp.r_k(m) as usize;
            for v in &h[t0..(t0 + rm).min(h.len())] {
                min_stage = min_stage.min(*v);
            }
            t0 += rm + tree.tp.rprime as usize;
        }
    }
    Ok(DivergenceReport {
        depth,
        points: ids.len(),
        horizon: tree.tp.l(depth),
        max_fraction,
        mean_fraction: sum / ids.len() as f64,
        bound: divergence_ratio(depth, &tree.tp, ell),
        min_height_in_stages: min_stage,
    })
}

/// Height at the end of the join leaving stage `m`, computed from stage `m`
/// and from stage `m+1`.
pub fn join_endpoint_heights(tree: &Tree, depth: u32, id: usize, m: u32) -> Result<(f64, f64)> {
    let conv = sl2_convention(tree)?;
    if m == 0 || m >= depth {
        return Err(Error::InvalidParameter(format!("join {m} does not exist below depth {depth}")));
    }
    let chain = tree.chain(depth, id);
    let tails = tree.tails(depth, id);
    let w = |k: u32| -> Mat2 {
        let node = &tree.levels[k as usize - 1][chain[k as usize - 1]];
        tree.stages[k as usize - 1].point_matrix(conv, node.j as usize) * node.nam
    };
    let rm = tree.tp.r_k(m) as f64;
    let before = w(m) * conv.flow_element(rm) * conv.u_matrix(&tails[m as usize - 1]) * conv.flow_element(tree.tp.rprime as f64);
    let rn = tree.tp.r_k(m + 1) as f64;
    let after = w(m + 1) * conv.flow_element(rn) * conv.u_matrix(&tails[m as usize]) * conv.flow_element(-rn);
    Ok((height_direct(&LatticePoint::new(before), conv), height_direct(&LatticePoint::new(after), conv)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construction::{OracleMode, TreeConfig};
    use crate::params::lookup;

    #[test]
    fn depth_one_point_is_its_own_limit_without_joins() {
        let p = lookup("rhck2").unwrap();
        let t = Tree::build(&p, &TreeConfig::new(1, OracleMode::Synthetic, 2)).unwrap();
        let lp = limit_point(&t, 1, 0);
        assert_eq!(lp.g, t.stages[0].set.points[0]);
        assert_eq!(lp.wander, 0.0);
    }

    #[test]
    fn sl2_branches_join_continuously() {
        let p = lookup("rhck2").unwrap();
        let t = Tree::build(&p, &TreeConfig::new(3, OracleMode::Sl2, 4)).unwrap();
        for id in [0, t.level(3).len() / 2, t.level(3).len() - 1] {
            let h = trajectory_heights(&t, 3, id).unwrap();
            assert_eq!(h.len() as u64, t.tp.l(3));
            for m in 1..3 {
                let (a, b) = join_endpoint_heights(&t, 3, id, m).unwrap();
                assert!((a - b).abs() < 1e-3 * a.max(b), "join {m}: {a} vs {b}");
            }
        }
        let rep = divergence_check(&t, 3, 50, 4.0, 2, 0).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.min_height_in_stages > 4.0);
    }

    #[test]
    fn synthetic_trees_have_no_orbit() {
        let p = lookup("rhck2").unwrap();
        let t = Tree::build(&p, &TreeConfig::new(2, OracleMode::Synthetic, 0)).unwrap();
        assert!(trajectory_heights(&t, 2, 0).is_err());
    }
}
