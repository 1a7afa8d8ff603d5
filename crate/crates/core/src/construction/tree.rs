//! The inductive tree of U-displacements whose limit points diverge on
//! average, with exhaustive (or sampled) invariant checks.
//!
//! Nodes store their displacement relative to the parent, in the parent's
//! frame: a depth-`n+1` node is `g_child = g_parent · a^{L_n} step a^{-L_n}`
//! with `L_n = F(n) + R_n`. Absolute coordinates at large depth are far
//! below double precision, so every check is phrased through these
//! relative steps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::group::{conj_scaled, ninv, nmul_unchecked, random_in_box, UPoint};
use crate::params::RankOneParams;
use crate::sl2::{
    estimate_shadow_constant, evaluate_gamma, evaluate_gamma_at, join_candidates, refine_join, JoinCandidate, Mat2, Sl2Convention,
};

use super::schedule::{Schedule, TreeParams};
use super::separated::{build_separated_set, diff_norms, SeparatedSet, SeparatedSetSpec, DEFAULT_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    /// Join displacements drawn from the seed inside the join ball.
    Synthetic,
    /// Joins realized by lattice elements of `SL(2,Z)`.
    Sl2,
}

impl std::str::FromStr for OracleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(OracleMode::Synthetic),
            "sl2" => Ok(OracleMode::Sl2),
            _ => Err(Error::InvalidParameter(format!("mode must be synthetic or sl2, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub depth: u32,
    pub mode: OracleMode,
    pub seed: u64,
    pub eta0: f64,
    pub schedule: Schedule,
    /// Joining time; required in synthetic mode, selected when absent in
    /// SL2 mode.
    pub rprime: Option<u32>,
    /// Largest leaf count built exhaustively.
    pub cap: usize,
    /// Node budget per level once the tree is sampled.
    pub level_budget: usize,
    /// Steps added to the smallest joining time found for the nominal
    /// base points.
    pub extra_join_steps: u32,
    pub shadow_samples: usize,
    pub eps1: f64,
}

impl TreeConfig {
    pub fn new(depth: u32, mode: OracleMode, seed: u64) -> Self {
        TreeConfig {
            depth,
            mode,
            seed,
            eta0: 0.4,
            schedule: Schedule::Paper,
            rprime: match mode {
                OracleMode::Synthetic => Some(10),
                OracleMode::Sl2 => None,
            },
            cap: DEFAULT_CAP,
            level_budget: 20_000,
            extra_join_steps: 2,
            shadow_samples: 10_000,
            eps1: 0.5,
        }
    }

    pub fn with_rprime(mut self, rprime: u32) -> Self {
        self.rprime = Some(rprime);
        self
    }
}

/// One stage `E^{(k)}` with its base point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage {
    pub k: u32,
    pub set: SeparatedSet,
    /// `N`-coordinate of the base point (SL2 only; heights ignore it).
    pub n_shift: f64,
}

impl Stage {
    /// `x_k u_i` as a matrix: `n(x) a_r (u0 · u_i)`.
    pub fn point_matrix(&self, conv: Sl2Convention, i: usize) -> Mat2 {
        let t0 = conv.u_param(&self.set.spec.base());
        let t = conv.u_param(&self.set.points[i]);
        Mat2::upper(self.n_shift) * conv.a_r(self.set.spec.r) * Mat2::lower(t0 + t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Position of the parent in the previous level (`u32::MAX` at depth 1).
    pub parent: u32,
    /// Index of the node's point in its stage set.
    pub j: u32,
    pub key: u64,
    /// Displacement relative to the parent, in the parent's frame; at depth
    /// one the stage point itself.
    pub step: UPoint,
    /// NAM part of the join landing at this node (identity when not
    /// modelled).
    pub nam: Mat2,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sl2Joins {
    pub convention: Sl2Convention,
    pub shadow_constant: f64,
    /// Smallest joining time with margin for every nominal pair.
    pub nominal_rprime: u32,
    /// Cached lattice elements per (level, i, j).
    #[serde(skip)]
    pub cache: Vec<Vec<Vec<[i64; 4]>>>,
    pub fresh_searches: usize,
    pub cached_joins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tree {
    pub params: RankOneParams,
    pub tp: TreeParams,
    pub config: TreeConfig,
    pub stages: Vec<Stage>,
    /// `levels[d-1]` holds the depth-`d` nodes.
    pub levels: Vec<Vec<TreeNode>>,
    pub sampled: bool,
    pub sl2: Option<Sl2Joins>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    splitmix(a ^ splitmix(b))
}

fn stage_size(params: &RankOneParams, tp: &TreeParams, k: u32) -> usize {
    tp.s_k(params, k) as usize
}

/// Stage sets with their base points. A constant schedule reuses the first
/// stage throughout, as the entropy construction requires.
pub(crate) fn build_stages(params: &RankOneParams, tp: &TreeParams, depth: u32, seed: u64) -> Result<Vec<Stage>> {
    (1..=depth)
        .map(|k| {
            let key = match tp.schedule {
                Schedule::Constant(_) => 1,
                Schedule::Paper => k as u64,
            };
            let sk = mix(seed, 0x5747_0000 + key);
            let spec = SeparatedSetSpec::random(params, tp.s0, tp.r_k(k), tp.eta0, sk)?;
            let set = build_separated_set(&spec, params, DEFAULT_CAP, false)?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(sk, 1));
            Ok(Stage { k, set, n_shift: rng.gen_range(-0.5..0.5) })
        })
        .collect()
}

impl Tree {
    pub fn build(params: &RankOneParams, config: &TreeConfig) -> Result<Tree> {
        if config.depth == 0 {
            return Err(Error::InvalidParameter("tree depth must be at least 1".into()));
        }
        let conv = match config.mode {
            OracleMode::Sl2 => Some(Sl2Convention::for_params(params)?),
            OracleMode::Synthetic => None,
        };
        let c = match conv {
            Some(cv) => estimate_shadow_constant(cv, config.eps1, config.shadow_samples, mix(config.seed, 0xC0)).map(|c| c.max(1e-6))?,
            None => 1.0,
        };
        let provisional = config.rprime.unwrap_or(1);
        let mut tp = TreeParams::new(params, config.eta0, c, provisional, config.schedule)?;
        let stages = build_stages(params, &tp, config.depth, config.seed)?;

        let mut sl2 = None;
        if let Some(cv) = conv {
            let (rp, nominal, cache) = select_joining_time(cv, &tp, &stages, config)?;
            tp = TreeParams::new(params, config.eta0, c, rp, config.schedule)?;
            sl2 = Some(Sl2Joins { convention: cv, shadow_constant: c, nominal_rprime: nominal, cache, fresh_searches: 0, cached_joins: 0 });
        } else if config.rprime.is_none() {
            return Err(Error::InvalidParameter("synthetic mode needs an explicit R'".into()));
        }

        let ln_leaves: f64 = (1..=config.depth).map(|k| tp.ln_s_k(params, k)).sum();
        let sampled = ln_leaves > (config.cap as f64).ln() + 1e-9;

        let mut tree = Tree { params: params.clone(), tp, config: config.clone(), stages, levels: Vec::new(), sampled, sl2 };
        let roots: Vec<TreeNode> = tree.stages[0]
            .set
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| TreeNode {
                parent: u32::MAX,
                j: i as u32,
                key: mix(config.seed, i as u64),
                step: p.clone(),
                nam: Mat2::IDENTITY,
                residual: 0.0,
            })
            .collect();
        tree.levels.push(roots);

        let fresh = AtomicUsize::new(0);
        for n in 1..config.depth {
            let parents = tree.levels[n as usize - 1].len();
            let per = stage_size(params, &tree.tp, n + 1);
            let mut chosen: Vec<usize> = (0..parents).collect();
            if sampled && parents * per > config.level_budget {
                let keep = (config.level_budget / per).max(1);
                let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0xB000 + n as u64));
                chosen.shuffle(&mut rng);
                chosen.truncate(keep);
                chosen.sort_unstable();
            }
            let kids: Result<Vec<Vec<TreeNode>>> =
                chosen.par_iter().map(|&p| tree.extend_node(n, p, &fresh)).collect();
            let level: Vec<TreeNode> = kids?.into_iter().flatten().collect();
            tree.levels.push(level);
        }
        if let Some(s) = tree.sl2.as_mut() {
            s.fresh_searches = fresh.load(Ordering::Relaxed);
            s.cached_joins = tree.levels.iter().skip(1).map(|l| l.len()).sum::<usize>() - s.fresh_searches;
        }
        Ok(tree)
    }

    pub fn depth(&self) -> u32 {
        self.levels.len() as u32
    }

    pub fn level(&self, depth: u32) -> &[TreeNode] {
        &self.levels[depth as usize - 1]
    }

    fn node(&self, depth: u32, id: usize) -> &TreeNode {
        &self.levels[depth as usize - 1][id]
    }

    /// Positions of the ancestors of a node, from depth 1 to the node.
    pub fn chain(&self, depth: u32, id: usize) -> Vec<usize> {
        let mut out = vec![0; depth as usize];
        let mut cur = id;
        for d in (1..=depth).rev() {
            out[d as usize - 1] = cur;
            if d > 1 {
                cur = self.node(d, cur).parent as usize;
            }
        }
        out
    }

    /// The multi-index `(i_1, …, i_n)` of a node.
    pub fn index(&self, depth: u32, id: usize) -> Vec<u32> {
        self.chain(depth, id).iter().enumerate().map(|(d, &p)| self.levels[d][p].j).collect()
    }

    /// Absolute `g_i` in double precision (for export; deep coordinates
    /// underflow relative to the root offsets).
    pub fn g(&self, depth: u32, id: usize) -> UPoint {
        let chain = self.chain(depth, id);
        let mut g = self.levels[0][chain[0]].step.clone();
        for d in 2..=depth {
            let step = &self.levels[d as usize - 1][chain[d as usize - 1]].step;
            g = nmul_unchecked(&self.params, &g, &conj_scaled(step, self.tp.l(d - 1) as f64));
        }
        g
    }

    /// `T_k`: the displacement of a node from its depth-`k` ancestor
    /// expressed in frame `L_k`.
    pub fn tails(&self, depth: u32, id: usize) -> Vec<UPoint> {
        let chain = self.chain(depth, id);
        let ident = UPoint::identity(&self.params);
        let mut tails = vec![ident; depth as usize];
        for k in (1..depth).rev() {
            let step = &self.levels[k as usize][chain[k as usize]].step;
            let kk = (self.tp.l(k + 1) - self.tp.l(k)) as f64;
            let inner = conj_scaled(&tails[k as usize], kk);
            tails[k as usize - 1] = nmul_unchecked(&self.params, step, &inner);
        }
        tails
    }

    /// Children of node `id` at depth `n`.
    fn extend_node(&self, n: u32, id: usize, fresh: &AtomicUsize) -> Result<Vec<TreeNode>> {
        let parent = self.node(n, id);
        match &self.sl2 {
            None => self.synthetic_children(n, id, parent),
            Some(joins) => self.sl2_children(joins, n, id, parent, fresh),
        }
    }

    fn synthetic_children(&self, n: u32, id: usize, parent: &TreeNode) -> Result<Vec<TreeNode>> {
        let rho = self.tp.radius();
        let rp = self.tp.rprime as f64;
        let targets: Vec<UPoint> = self.stages[n as usize].set.points.iter().map(|u| conj_scaled(u, rp)).collect();
        let biggest = targets.iter().map(|t| t.size()).fold(0.0, f64::max);
        let mut h = rho - biggest;
        if h <= 0.0 {
            return Err(Error::Validation(format!(
                "R' = {} too small: contracted stage-{} offsets reach {biggest:.3e} > join radius {rho:.3e}",
                self.tp.rprime,
                n + 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(parent.key);
        for _ in 0..64 {
            let o = random_in_box(&mut rng, &self.params, h);
            let steps: Vec<UPoint> = targets.iter().map(|t| nmul_unchecked(&self.params, &o, t)).collect();
            if steps.iter().all(|s| s.size() < rho) {
                return Ok(steps
                    .into_iter()
                    .enumerate()
                    .map(|(j, step)| TreeNode {
                        parent: id as u32,
                        j: j as u32,
                        key: mix(parent.key, j as u64),
                        step,
                        nam: Mat2::IDENTITY,
                        residual: 0.0,
                    })
                    .collect());
            }
            h *= 0.5;
        }
        Err(Error::Validation(format!("no synthetic offset fits the join ball at depth {n}")))
    }

    fn sl2_children(&self, joins: &Sl2Joins, n: u32, id: usize, parent: &TreeNode, fresh: &AtomicUsize) -> Result<Vec<TreeNode>> {
        let conv = joins.convention;
        let rho = self.tp.radius();
        let rp = self.tp.rprime;
        let stage = &self.stages[n as usize - 1];
        let next = &self.stages[n as usize];
        let w = stage.point_matrix(conv, parent.j as usize) * parent.nam;
        let gm = w * conv.flow_element(self.tp.r_k(n) as f64);
        let per = next.set.len();
        let mut out = Vec::with_capacity(per);
        for j in 0..per {
            let gp = next.point_matrix(conv, j);
            let cached = &joins.cache[n as usize - 1][parent.j as usize * per + j];
            let fits = |c: &JoinCandidate| c.uplus_size <= rho && c.n_size <= rho;
            let mut cands: Vec<JoinCandidate> =
                cached.iter().filter_map(|g| evaluate_gamma_at(conv, *g, &gm, &gp, rp)).filter(fits).collect();
            if cands.is_empty() {
                cands = cached.iter().filter_map(|g| evaluate_gamma(conv, *g, &gm, &gp, rp)).filter(fits).collect();
            }
            let mut searched = false;
            loop {
                cands.sort_by(|a, b| a.n_size.total_cmp(&b.n_size));
                let mut found = None;
                for c in &cands {
                    let (r, res) = refine_join(conv, c, &gm, &gp, rp)?;
                    if r.uplus_size <= rho && r.n_size <= rho {
                        found = Some((r, res));
                        break;
                    }
                }
                if let Some((r, res)) = found {
                    out.push(TreeNode {
                        parent: id as u32,
                        j: j as u32,
                        key: mix(parent.key, j as u64),
                        step: conv.u_point(r.tau),
                        nam: r.n,
                        residual: res,
                    });
                    break;
                }
                if searched {
                    return Err(Error::NoJoinFound { cap: rp });
                }
                searched = true;
                fresh.fetch_add(1, Ordering::Relaxed);
                cands = join_candidates(conv, &gm, &gp, rp, rho, 5_000_000)?;
            }
        }
        Ok(out)
    }

    /// One JSON object per node: `{index, Z, X, depth}`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Rec<'a> {
            index: Vec<u32>,
            #[serde(rename = "Z")]
            z: &'a [f64],
            #[serde(rename = "X")]
            x: &'a [f64],
            depth: u32,
        }
        for d in 1..=self.depth() {
            for id in 0..self.level(d).len() {
                let g = self.g(d, id);
                let rec = Rec { index: self.index(d, id), z: &g.z, x: &g.x, depth: d };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

/// Sibling pairs checked exhaustively per level before sampling.
const SIBLING_PAIR_BUDGET: u64 = 2_000_000;
/// Sibling pairs drawn per level once the budget is exceeded.
const SIBLING_SAMPLES: usize = 200_000;

/// Lattice elements kept per nominal (level, i, j) pair.
const CACHE_PER_PAIR: usize = 32;

/// Scan joining times for the nominal base points (no NAM drift) of every
/// level, then cache lattice elements at the chosen time.
fn select_joining_time(
    conv: Sl2Convention,
    tp: &TreeParams,
    stages: &[Stage],
    config: &TreeConfig,
) -> Result<(u32, u32, Vec<Vec<Vec<[i64; 4]>>>)> {
    let rho = tp.radius();
    let cap = 120u32;
    let mut pairs = Vec::new();
    for n in 1..config.depth {
        let (a, b) = (&stages[n as usize - 1], &stages[n as usize]);
        for i in 0..a.set.len() {
            for j in 0..b.set.len() {
                pairs.push((n, i, j));
            }
        }
    }
    let nominal = |n: u32, i: usize, j: usize| {
        let gm = stages[n as usize - 1].point_matrix(conv, i) * conv.flow_element(tp.r_k(n) as f64);
        let gp = stages[n as usize].point_matrix(conv, j);
        (gm, gp)
    };
    let firsts: Result<Vec<u32>> = pairs
        .par_iter()
        .map(|&(n, i, j)| {
            let (gm, gp) = nominal(n, i, j);
            for ell in 1..=cap {
                if !join_candidates(conv, &gm, &gp, ell, 0.5 * rho, 5_000_000)?.is_empty() {
                    return Ok(ell);
                }
            }
            Err(Error::NoJoinFound { cap })
        })
        .collect();
    let nominal_rp = firsts?.into_iter().max().unwrap_or(1);
    let mut rp = config.rprime.unwrap_or(nominal_rp + config.extra_join_steps);
    loop {
        let lists: Result<Vec<Vec<[i64; 4]>>> = pairs
            .par_iter()
            .map(|&(n, i, j)| {
                let (gm, gp) = nominal(n, i, j);
                let mut c: Vec<JoinCandidate> = join_candidates(conv, &gm, &gp, rp, 2.0 * rho, 5_000_000)?
                    .into_iter()
                    .filter(|c| c.uplus_size <= rho)
                    .collect();
                c.sort_by(|a, b| a.n_size.total_cmp(&b.n_size));
                // copy out rather than collecting in place, which would keep
                // the capacity of the full candidate list alive
                Ok(c.iter().take(CACHE_PER_PAIR).map(|c| c.gamma).collect())
            })
            .collect();
        let lists = lists?;
        if lists.iter().all(|l| !l.is_empty()) {
            let mut cache: Vec<Vec<Vec<[i64; 4]>>> = vec![Vec::new(); config.depth.max(1) as usize - 1];
            for ((n, _, _), l) in pairs.iter().zip(lists) {
                cache[*n as usize - 1].push(l);
            }
            return Ok((rp, nominal_rp, cache));
        }
        if config.rprime.is_some() || rp >= cap {
            return Err(Error::NoJoinFound { cap: rp });
        }
        rp += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeReport {
    pub depth: u32,
    pub mode: OracleMode,
    pub rprime: u32,
    pub sampled: bool,
    pub nodes: usize,
    pub leaves: usize,
    pub ln_expected_leaves: f64,
    pub cardinality_ok: bool,
    pub nesting_checked: usize,
    pub nesting_violations: usize,
    /// Largest `sup / (η0/4)` over child covers seen from the parent frame.
    pub max_nesting_ratio: f64,
    pub margin_identity_defect: f64,
    pub max_step: f64,
    pub step_bound: f64,
    pub step_violations: usize,
    pub sibling_pairs: u64,
    pub sibling_exhaustive: bool,
    pub disjointness_violations: u64,
    pub separation_pairs: usize,
    pub separation_exhaustive: bool,
    pub max_distance_frame0: f64,
    pub min_distance_final: f64,
    pub separation_violations: usize,
    pub membership_checked: usize,
    pub membership_violations: usize,
    /// Largest `|T_k| / r(n, k)`.
    pub max_tail_ratio: f64,
    pub max_wander: f64,
    pub wander_bound: f64,
    pub max_nam: f64,
    pub max_residual: f64,
    pub fresh_joins: usize,
}

impl TreeReport {
    pub fn passed(&self) -> bool {
        self.cardinality_ok
            && self.nesting_violations == 0
            && self.margin_identity_defect.abs() < 1e-15
            && self.step_violations == 0
            && self.disjointness_violations == 0
            && self.separation_violations == 0
            && self.membership_violations == 0
            && self.max_wander < self.wander_bound
            && self.max_residual < 1e-9
    }

    pub fn first_failure(&self) -> Option<String> {
        let fails = [
            (!self.cardinality_ok, "cardinality"),
            (self.nesting_violations > 0, "nesting"),
            (self.margin_identity_defect.abs() >= 1e-15, "margin identity"),
            (self.step_violations > 0, "join ball"),
            (self.disjointness_violations > 0, "disjointness"),
            (self.separation_violations > 0, "separation"),
            (self.membership_violations > 0, "membership"),
            (self.max_wander >= self.wander_bound, "wander"),
            (self.max_residual >= 1e-9, "join residual"),
        ];
        fails.iter().find(|f| f.0).map(|f| f.1.to_string())
    }
}

/// Size in the max-quasi-metric of `w` seen after conjugating by `-k`.
fn expanded(params: &RankOneParams, u: &UPoint, v: &UPoint, k: f64) -> (f64, f64) {
    let (z, x) = diff_norms(params, u, v);
    (z * k.exp(), x * (0.5 * k).exp())
}

/// Distance between two depth-`n` nodes in frame 0 and in frame `L_n`.
pub fn pair_distances(tree: &Tree, n: u32, a: usize, b: usize) -> (f64, f64) {
    let p = &tree.params;
    let ca = tree.chain(n, a);
    let cb = tree.chain(n, b);
    let m = ca.iter().zip(&cb).take_while(|(x, y)| x == y).count() as u32;
    if m == n {
        return (0.0, 0.0);
    }
    let ln = tree.tp.l(n) as f64;
    // first differing level m+1 (1-based): its steps live in frame L_m
    let sa = &tree.levels[m as usize][ca[m as usize]].step;
    let sb = &tree.levels[m as usize][cb[m as usize]].step;
    let d = conj_scaled(&nmul_unchecked(p, &ninv(sa), sb), tree.tp.l(m) as f64 - ln);
    let rest = |c: &[usize]| {
        let mut acc = UPoint::identity(p);
        for lvl in (m + 2)..=n {
            let s = &tree.levels[lvl as usize - 1][c[lvl as usize - 1]].step;
            acc = nmul_unchecked(p, &acc, &conj_scaled(s, tree.tp.l(lvl - 1) as f64 - ln));
        }
        acc
    };
    let w = nmul_unchecked(p, &nmul_unchecked(p, &ninv(&rest(&ca)), &d), &rest(&cb));
    (conj_scaled(&w, ln).size(), w.size())
}

pub fn check_tree(tree: &Tree, seed: u64) -> TreeReport {
    let p = &tree.params;
    let tp = &tree.tp;
    let depth = tree.depth();
    let r = tp.cover_radius();
    let ln_expected_leaves: f64 = (1..=depth).map(|k| tp.ln_s_k(p, k)).sum();
    let leaves = tree.level(depth).len();
    let cardinality_ok = if tree.sampled {
        true
    } else {
        let expected: f64 = (1..=depth).map(|k| tp.s_k(p, k)).product();
        let per_level = (1..=depth).all(|d| {
            let want: f64 = (1..=d).map(|k| tp.s_k(p, k)).product();
            tree.level(d).len() as f64 == want
        });
        per_level && leaves as f64 == expected
    };

    // Nesting, in the parent's frame. Depth-one covers sit in the root ball
    // of radius η0/2.
    let nest: Vec<(bool, f64, f64, bool)> = (1..=depth)
        .into_par_iter()
        .flat_map_iter(|d| {
            let kk = (tp.l(d) - tp.l(d - 1)) as f64;
            let outer = if d == 1 { 2.0 * r } else { r };
            tree.level(d).iter().map(move |node| {
                let (zw, xw) = (node.step.z_norm(), node.step.x_norm());
                let rz = r * (-kk).exp();
                let rx = r * (-0.5 * kk).exp();
                let supz = if p.p2 > 0 { zw + rz + 0.5 * xw * rx } else { 0.0 };
                let supx = if p.p1 > 0 { xw + rx } else { 0.0 };
                let sup = supz.max(supx);
                let step_ok = d == 1 || (node.step.size() < tp.nesting_slack() && node.step.size() <= tp.radius() * (1.0 + 1e-12));
                (sup <= outer, sup / outer, if d == 1 { 0.0 } else { node.step.size() }, step_ok)
            })
        })
        .collect();
    let nesting_violations = nest.iter().filter(|x| !x.0).count();
    let max_nesting_ratio = nest.iter().map(|x| x.1).fold(0.0, f64::max);
    let max_step = nest.iter().map(|x| x.2).fold(0.0, f64::max);
    let step_violations = nest.iter().filter(|x| !x.3).count();

    // Sibling disjointness at the children's frame; exhaustive up to a
    // per-level pair budget, sampled beyond it.
    let mut sibling_exhaustive = true;
    let (sibling_pairs, disjointness_violations) = (1..=depth)
        .map(|d| {
            let kk = (tp.l(d) - tp.l(d - 1)) as f64;
            let lvl = tree.level(d);
            let mut groups: Vec<(usize, usize)> = Vec::new();
            let mut start = 0;
            for i in 1..=lvl.len() {
                if i == lvl.len() || lvl[i].parent != lvl[start].parent {
                    groups.push((start, i));
                    start = i;
                }
            }
            let disjoint = |a: usize, b: usize| {
                let (z, x) = expanded(p, &lvl[a].step, &lvl[b].step, kk);
                x > 2.0 * r || z > 2.0 * r + 0.5 * r * r
            };
            let total: u64 = groups.iter().map(|&(s, e)| ((e - s) * (e - s).saturating_sub(1) / 2) as u64).sum();
            if total <= SIBLING_PAIR_BUDGET {
                groups
                    .par_iter()
                    .map(|&(s, e)| {
                        let mut cnt = (0u64, 0u64);
                        for a in s..e {
                            for b in a + 1..e {
                                cnt.0 += 1;
                                cnt.1 += u64::from(!disjoint(a, b));
                            }
                        }
                        cnt
                    })
                    .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
            } else {
                sibling_exhaustive = false;
                let big: Vec<(usize, usize)> = groups.into_iter().filter(|g| g.1 - g.0 > 1).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, d as u64));
                let picks: Vec<(usize, usize)> = (0..SIBLING_SAMPLES)
                    .map(|_| {
                        let (s, e) = big[rng.gen_range(0..big.len())];
                        let a = rng.gen_range(s..e);
                        let mut b = rng.gen_range(s..e - 1);
                        if b >= a {
                            b += 1;
                        }
                        (a, b)
                    })
                    .collect();
                picks
                    .par_iter()
                    .map(|&(a, b)| (1u64, u64::from(!disjoint(a, b))))
                    .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
            }
        })
        .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));

    // Pairwise separation of leaves.
    let total_pairs = leaves * leaves.saturating_sub(1) / 2;
    let exhaustive = total_pairs <= 1_000_000;
    let pairs: Vec<(usize, usize)> = if exhaustive {
        (0..leaves).flat_map(|a| (a + 1..leaves).map(move |b| (a, b))).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5E9));
        (0..10_000)
            .map(|_| loop {
                let a = rng.gen_range(0..leaves);
                let b = rng.gen_range(0..leaves);
                if a != b {
                    break (a.min(b), a.max(b));
                }
            })
            .collect()
    };
    let dists: Vec<(f64, f64)> = pairs.par_iter().map(|&(a, b)| pair_distances(tree, depth, a, b)).collect();
    let max_distance_frame0 = dists.iter().map(|d| d.0).fold(0.0, f64::max);
    let min_distance_final = dists.iter().map(|d| d.1).fold(f64::INFINITY, f64::min);
    let separation_violations = dists.iter().filter(|d| !(d.0 < tp.eta0 && d.1 > tp.eta0 / 2.0)).count();

    // Membership: every node's tail below the refined radius.
    let memb: Vec<(bool, f64, f64)> = (1..=depth)
        .into_par_iter()
        .flat_map_iter(|d| {
            (0..tree.level(d).len()).map(move |id| {
                let tails = tree.tails(d, id);
                let mut ok = true;
                let mut ratio: f64 = 0.0;
                for k in 1..=d {
                    let t = tails[k as usize - 1].size();
                    let bound = tp.refined_radius(d, k);
                    ok &= t <= bound * (1.0 + 1e-12) && t < tp.eta / 2.0;
                    if bound > 0.0 {
                        ratio = ratio.max(t / bound);
                    }
                }
                let nam = crate::sl2::dg_approx(
                    tree.sl2.as_ref().map(|s| s.convention).unwrap_or(Sl2Convention::CayleyKlein),
                    &Mat2::IDENTITY,
                    &tree.level(d)[id].nam,
                );
                ok &= nam <= tp.eta / 2.0;
                (ok, ratio, tails[0].size())
            })
        })
        .collect();
    let membership_violations = memb.iter().filter(|m| !m.0).count();
    let max_tail_ratio = memb.iter().map(|m| m.1).fold(0.0, f64::max);
    let max_wander = memb.iter().map(|m| m.2).fold(0.0, f64::max);

    let all = tree.levels.iter().flatten();
    let conv = tree.sl2.as_ref().map(|s| s.convention).unwrap_or(Sl2Convention::CayleyKlein);
    let max_nam = all.clone().map(|n| crate::sl2::dg_approx(conv, &Mat2::IDENTITY, &n.nam)).fold(0.0, f64::max);
    let max_residual = all.map(|n| n.residual).fold(0.0, f64::max);

    TreeReport {
        depth,
        mode: tree.config.mode,
        rprime: tp.rprime,
        sampled: tree.sampled,
        nodes: tree.levels.iter().map(|l| l.len()).sum(),
        leaves,
        ln_expected_leaves,
        cardinality_ok,
        nesting_checked: nest.len(),
        nesting_violations,
        max_nesting_ratio,
        margin_identity_defect: tp.margin_identity_defect(),
        max_step,
        step_bound: tp.radius(),
        step_violations,
        sibling_pairs,
        sibling_exhaustive,
        disjointness_violations,
        separation_pairs: pairs.len(),
        separation_exhaustive: exhaustive,
        max_distance_frame0,
        min_distance_final,
        separation_violations,
        membership_checked: memb.len(),
        membership_violations,
        max_tail_ratio,
        max_wander,
        wander_bound: tp.eta / (tp.lambda0() - 1.0),
        max_nam,
        max_residual,
        fresh_joins: tree.sl2.as_ref().map(|s| s.fresh_searches).unwrap_or(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::lookup;

    #[test]
    fn synthetic_tree_small() {
        for name in ["rhck2", "rhp2", "su21"] {
            let p = lookup(name).unwrap();
            let cfg = TreeConfig::new(3, OracleMode::Synthetic, 7).with_rprime(10);
            let t = Tree::build(&p, &cfg).unwrap();
            let rep = check_tree(&t, 1);
            assert!(rep.passed(), "{name}: {:?} {rep:?}", rep.first_failure());
            assert_eq!(t.level(1).len(), t.stages[0].set.len());
        }
    }

    #[test]
    fn depth_one_is_the_first_stage() {
        let p = lookup("su21").unwrap();
        let t = Tree::build(&p, &TreeConfig::new(1, OracleMode::Synthetic, 3)).unwrap();
        for (node, pt) in t.level(1).iter().zip(&t.stages[0].set.points) {
            assert_eq!(&node.step, pt);
        }
    }

    #[test]
    fn rprime_too_small_is_reported() {
        let p = lookup("rhck2").unwrap();
        let cfg = TreeConfig::new(3, OracleMode::Synthetic, 7).with_rprime(1);
        assert!(matches!(Tree::build(&p, &cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn sl2_tree_small() {
        let p = lookup("rhck2").unwrap();
        let mut cfg = TreeConfig::new(3, OracleMode::Sl2, 5);
        cfg.shadow_samples = 500;
        let t = Tree::build(&p, &cfg).unwrap();
        let rep = check_tree(&t, 2);
        assert!(rep.passed(), "{:?} {rep:?}", rep.first_failure());
        assert!(rep.max_residual < 1e-9);
    }

    #[test]
    fn jsonl_export() {
        let p = lookup("rhck2").unwrap();
        let t = Tree::build(&p, &TreeConfig::new(2, OracleMode::Synthetic, 3)).unwrap();
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4 + 4 * 5);
        let v: serde_json::Value = serde_json::from_str(lines[5]).unwrap();
        assert_eq!(v["depth"], 2);
        assert_eq!(v["index"].as_array().unwrap().len(), 2);
    }
}
