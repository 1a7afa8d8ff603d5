//! Structural constants of a rank-one instance and the instance registry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The bracket `g1 x g1 -> g2` of the instance.
///
/// `Heisenberg` pairs consecutive coordinates of `g1` through the standard
/// symplectic form and needs `p2 = 1` with `p1` even.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bracket {
    Abelian,
    Heisenberg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneParams {
    pub name: String,
    pub p1: usize,
    pub p2: usize,
    #[serde(rename = "dimG")]
    pub dim_g: usize,
    #[serde(rename = "dimM")]
    pub dim_m: usize,
    pub bracket: Bracket,
    /// Height threshold with the descent property (configured, not derived).
    #[serde(default = "default_s1")]
    pub s1: f64,
    #[serde(rename = "seed-sensitive", default)]
    pub seed_sensitive: bool,
}

fn default_s1() -> f64 {
    2.0
}

impl RankOneParams {
    pub fn new(
        name: &str,
        p1: usize,
        p2: usize,
        dim_g: usize,
        dim_m: usize,
        bracket: Bracket,
    ) -> Result<Self> {
        let p = RankOneParams {
            name: name.to_string(),
            p1,
            p2,
            dim_g,
            dim_m,
            bracket,
            s1: default_s1(),
            seed_sensitive: false,
        };
        p.validate()?;
        Ok(p)
    }

    /// Real hyperbolic n-space, Cayley-Klein labelling (`p2 = 0`).
    pub fn real_hyperbolic_ck(n: usize) -> Result<Self> {
        check_n(n)?;
        Self::new(
            &format!("rhck{n}"),
            n - 1,
            0,
            n * (n + 1) / 2,
            (n - 1) * (n - 2) / 2,
            Bracket::Abelian,
        )
    }

    /// Real hyperbolic n-space, Poincare labelling (`p1 = 0`).
    pub fn real_hyperbolic_p(n: usize) -> Result<Self> {
        check_n(n)?;
        Self::new(
            &format!("rhp{n}"),
            0,
            n - 1,
            n * (n + 1) / 2,
            (n - 1) * (n - 2) / 2,
            Bracket::Abelian,
        )
    }

    /// SU(2,1): complex hyperbolic plane with the Heisenberg bracket.
    pub fn complex_hyperbolic_2() -> Self {
        Self::new("su21", 2, 1, 8, 1, Bracket::Heisenberg).expect("static instance")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: RankOneParams = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p1 + self.p2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "{}: p1 + p2 must be at least 1",
                self.name
            )));
        }
        if self.dim_g != 2 * self.dim_u() + 1 + self.dim_m {
            return Err(Error::InvalidParameter(format!(
                "{}: dimG = {} inconsistent with 2(p1+p2) + 1 + dimM = {}",
                self.name,
                self.dim_g,
                2 * self.dim_u() + 1 + self.dim_m
            )));
        }
        if self.bracket == Bracket::Heisenberg && (self.p2 != 1 || self.p1 == 0 || self.p1 % 2 != 0)
        {
            return Err(Error::InvalidParameter(format!(
                "{}: heisenberg bracket needs p2 = 1 and even p1 > 0",
                self.name
            )));
        }
        if !(self.s1 > 0.0 && self.s1.is_finite()) {
            return Err(Error::InvalidParameter(format!("{}: s1 must be positive", self.name)));
        }
        Ok(())
    }

    pub fn dim_u(&self) -> usize {
        self.p1 + self.p2
    }

    pub fn dim_nam(&self) -> usize {
        self.dim_g - self.dim_u()
    }

    /// Maximal entropy of the time-one map.
    pub fn h_m(&self) -> f64 {
        self.p1 as f64 / 2.0 + self.p2 as f64
    }

    /// log of the weakest expansion rate on U.
    pub fn ln_lambda0(&self) -> f64 {
        if self.p1 == 0 {
            1.0
        } else {
            0.5
        }
    }

    /// log of the strongest expansion rate on U.
    pub fn ln_lambda1(&self) -> f64 {
        if self.p2 == 0 {
            0.5
        } else {
            1.0
        }
    }

    pub fn lambda0(&self) -> f64 {
        self.ln_lambda0().exp()
    }

    pub fn lambda1(&self) -> f64 {
        self.ln_lambda1().exp()
    }

    /// `[X, Y]` for `X, Y` in g1.
    pub fn bracket(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        match self.bracket {
            Bracket::Abelian => vec![0.0; self.p2],
            Bracket::Heisenberg => {
                let mut w = 0.0;
                for (xp, yp) in x.chunks_exact(2).zip(y.chunks_exact(2)) {
                    w += xp[0] * yp[1] - xp[1] * yp[0];
                }
                vec![w]
            }
        }
    }

    /// `J_Z X`, defined by `<J_Z X, Y> = <Z, [X, Y]>`.
    pub fn jmap(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        match self.bracket {
            Bracket::Abelian => vec![0.0; self.p1],
            Bracket::Heisenberg => {
                let mut out = Vec::with_capacity(self.p1);
                for xp in x.chunks_exact(2) {
                    out.push(-z[0] * xp[1]);
                    out.push(z[0] * xp[0]);
                }
                out
            }
        }
    }
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "real hyperbolic dimension must be at least 2, got {n}"
        )));
    }
    Ok(())
}

/// Names shipped by `instance list`.
pub const REGISTRY: &[&str] = &["rhck2", "rhp2", "su21"];

/// Resolve an instance name: `rhck<n>`, `rhp<n>`, `su21`, or the alias `sl2`.
pub fn lookup(name: &str) -> Result<RankOneParams> {
    let unknown = || Error::UnknownInstance(name.to_string());
    match name {
        "su21" => return Ok(RankOneParams::complex_hyperbolic_2()),
        "sl2" => return RankOneParams::real_hyperbolic_ck(2),
        _ => {}
    }
    if let Some(n) = name.strip_prefix("rhck") {
        let n: usize = n.parse().map_err(|_| unknown())?;
        return RankOneParams::real_hyperbolic_ck(n).map_err(|_| unknown());
    }
    if let Some(n) = name.strip_prefix("rhp") {
        let n: usize = n.parse().map_err(|_| unknown())?;
        return RankOneParams::real_hyperbolic_p(n).map_err(|_| unknown());
    }
    Err(unknown())
}

pub fn registry() -> Vec<RankOneParams> {
    REGISTRY.iter().map(|n| lookup(n).expect("registry entry")).collect()
}
