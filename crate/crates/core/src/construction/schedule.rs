//! Stage lengths, joining times and the radii derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::RankOneParams;

use super::separated::ln_separated_count;

/// `⌈4 log 4⌉`: from this index on every stage set fits in `B^U_{η0/4}`.
pub const K0: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    /// `R_k = k + k0 - 1`.
    Paper,
    /// `R_k = R` for every stage.
    Constant(u32),
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "paper" {
            return Ok(Schedule::Paper);
        }
        if let Some(r) = s.strip_prefix("constant:") {
            let r: u32 = r.parse().map_err(|_| Error::InvalidParameter(format!("bad constant schedule {s:?}")))?;
            if r == 0 {
                return Err(Error::InvalidParameter("constant schedule needs R >= 1".into()));
            }
            return Ok(Schedule::Constant(r));
        }
        Err(Error::InvalidParameter(format!("schedule must be `paper` or `constant:R`, got {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub eta0: f64,
    pub eta: f64,
    /// Shadowing constant.
    pub c: f64,
    pub delta: f64,
    #[serde(rename = "Rprime")]
    pub rprime: u32,
    pub schedule: Schedule,
    pub k0: u32,
    /// Height bound of the compact part the stage base points live in.
    pub s0: f64,
    pub ln_lambda0: f64,
}

/// Safety factor applied to the strict upper bound on `η`.
const ETA_FRACTION: f64 = 0.9;

impl TreeParams {
    /// `η` is taken as 0.9 times its strict upper bound `η0(λ0-1)/(4λ0)`.
    pub fn new(params: &RankOneParams, eta0: f64, c: f64, rprime: u32, schedule: Schedule) -> Result<Self> {
        let l0 = params.lambda0();
        let eta = ETA_FRACTION * eta0 * (l0 - 1.0) / (4.0 * l0);
        Self::with_eta(params, eta0, eta, c, rprime, schedule)
    }

    pub fn with_eta(params: &RankOneParams, eta0: f64, eta: f64, c: f64, rprime: u32, schedule: Schedule) -> Result<Self> {
        if !(eta0 > 0.0 && eta0 < 0.5) {
            return Err(Error::InvalidParameter(format!("eta0 = {eta0} outside (0, 1/2)")));
        }
        let l0 = params.lambda0();
        let bound = eta0 * (l0 - 1.0) / (4.0 * l0);
        if !(eta > 0.0 && eta < bound) {
            return Err(Error::InvalidParameter(format!("eta = {eta} must lie in (0, {bound})")));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!("shadowing constant {c} must be positive")));
        }
        if rprime == 0 {
            return Err(Error::InvalidParameter("joining time R' must be positive".into()));
        }
        let delta = (eta / 2.0) * (l0 - 1.0) / (c * (c + 2.0) * l0);
        Ok(TreeParams { eta0, eta, c, delta, rprime, schedule, k0: K0, s0: 100.0, ln_lambda0: params.ln_lambda0() })
    }

    pub fn lambda0(&self) -> f64 {
        self.ln_lambda0.exp()
    }

    /// `c(c+2)δ`, the radius of both join balls.
    pub fn radius(&self) -> f64 {
        self.c * (self.c + 2.0) * self.delta
    }

    pub fn r_k(&self, k: u32) -> u32 {
        match self.schedule {
            Schedule::Paper => k + self.k0 - 1,
            Schedule::Constant(r) => r,
        }
    }

    pub fn ln_s_k(&self, params: &RankOneParams, k: u32) -> f64 {
        ln_separated_count(params, self.r_k(k))
    }

    pub fn s_k(&self, params: &RankOneParams, k: u32) -> f64 {
        self.ln_s_k(params, k).exp().round()
    }

    /// `F(k) = Σ_{i<k} R_i + (k-1) R'`.
    pub fn f(&self, k: u32) -> u64 {
        assert!(k >= 1, "F is defined for k >= 1");
        let sum_r: u64 = match self.schedule {
            Schedule::Paper => {
                // Σ_{i=1}^{k-1} (i + k0 - 1)
                let m = (k - 1) as u64;
                m * (m + 1) / 2 + m * (self.k0 as u64 - 1)
            }
            Schedule::Constant(r) => (k as u64 - 1) * r as u64,
        };
        sum_r + (k as u64 - 1) * self.rprime as u64
    }

    /// `F(n) + R_n`, the conjugation depth of depth-`n` covers.
    pub fn l(&self, n: u32) -> u64 {
        if n == 0 {
            0
        } else {
            self.f(n) + self.r_k(n) as u64
        }
    }

    /// `r(n, k) = c(c+2)δ Σ_{i=0}^{n-k-1} λ0^{-i}`.
    pub fn refined_radius(&self, n: u32, k: u32) -> f64 {
        let inv = 1.0 / self.lambda0();
        (0..n.saturating_sub(k)).map(|i| inv.powi(i as i32)).sum::<f64>() * self.radius()
    }

    /// Cover radius `η0/4`.
    pub fn cover_radius(&self) -> f64 {
        self.eta0 / 4.0
    }

    /// Slack the displacements of a node's descendants may use:
    /// `(η0/4)(λ0-1)/λ0`.
    pub fn nesting_slack(&self) -> f64 {
        let l0 = self.lambda0();
        self.cover_radius() * (l0 - 1.0) / l0
    }

    /// `η0/(4λ0) + (η0/4)(λ0-1)/λ0 - η0/4`, zero up to rounding.
    pub fn margin_identity_defect(&self) -> f64 {
        self.cover_radius() / self.lambda0() + self.nesting_slack() - self.cover_radius()
    }
}

/// `F(k)` with an explicit precondition check.
pub fn f_schedule(tp: &TreeParams, k: u32) -> Result<u64> {
    if k == 0 {
        return Err(Error::InvalidParameter("F(k) needs k >= 1".into()));
    }
    Ok(tp.f(k))
}

/// `((n-1)R' + 2nℓ) / (F(n) + R_n)`: bound on the fraction of time a
/// depth-`n` point spends below the strip.
pub fn divergence_ratio(n: u32, tp: &TreeParams, ell: u32) -> f64 {
    let num = (n as f64 - 1.0) * tp.rprime as f64 + 2.0 * n as f64 * ell as f64;
    num / tp.l(n) as f64
}

/// `η Σ_{j >= n} λ0^{-(F(j)+R_j)}`: distance from a depth-`n` point to the
/// limit of any branch through it.
pub fn limit_tail_bound(tp: &TreeParams, n: u32) -> f64 {
    let mut sum = 0.0;
    let mut j = n;
    loop {
        let term = (-(tp.l(j) as f64) * tp.ln_lambda0).exp();
        sum += term;
        if term < 1e-18 * sum || j > n + 10_000 {
            break;
        }
        j += 1;
    }
    tp.eta * sum
}
