//! Closed-form f-divergence kernels.
//!
//! Each kernel carries its generator `f`, the derivative `f'`, the Fenchel
//! conjugate `f*` and two composites evaluated from a log density ratio
//! `r = log x`:
//!
//! | kernel        | f(x)                          | f*(u)            | dom f*   |
//! |---------------|-------------------------------|------------------|----------|
//! | `kl`          | x log x                       | e^(u-1)          | ℝ        |
//! | `reverse_kl`  | -log x                        | -1 - log(-u)     | u < 0    |
//! | `js`          | x log x - (x+1) log((x+1)/2)  | -log(2 - e^u)    | u < log 2|
//! | `chi2`        | (x-1)²                        | u²/4 + u         | ℝ        |
//! | `hellinger2`  | (√x - 1)²                     | u/(1-u)          | u < 1    |
//!
//! Ratios of joint densities underflow quickly, so everything the objective
//! needs is also exposed as a function of `r` ([`Kernel::composite`],
//! [`Kernel::f_of_logratio`]).

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FdivError {
    #[error("{kernel}: argument {x} is outside (0, +inf)")]
    NonPositiveArgument { kernel: Kernel, x: f64 },
    #[error("{kernel}: conjugate argument {u} violates {bound}")]
    OutsideConjugateDomain {
        kernel: Kernel,
        u: f64,
        bound: &'static str,
    },
    #[error("{kernel}: composite at log-ratio {r} overflowed ({t1}, {t2})")]
    Overflow {
        kernel: Kernel,
        r: f64,
        t1: f64,
        t2: f64,
    },
    #[error("unknown kernel {0:?}; valid kernels are kl, reverse_kl, js, chi2, hellinger2")]
    UnknownKernel(String),
}

/// A named f-divergence generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Kernel {
    Kl,
    ReverseKl,
    JensenShannon,
    PearsonChi2,
    SquaredHellinger,
}

/// Which of the two objective integrands a composite refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    /// `f'(e^r)`, evaluated on data-side pairs.
    Data,
    /// `f*(f'(e^r))`, evaluated on generator-side pairs.
    Generated,
}

impl Kernel {
    pub const ALL: [Kernel; 5] = [
        Kernel::Kl,
        Kernel::ReverseKl,
        Kernel::JensenShannon,
        Kernel::PearsonChi2,
        Kernel::SquaredHellinger,
    ];

    /// Config name of the kernel.
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Kl => "kl",
            Kernel::ReverseKl => "reverse_kl",
            Kernel::JensenShannon => "js",
            Kernel::PearsonChi2 => "chi2",
            Kernel::SquaredHellinger => "hellinger2",
        }
    }

    /// Supremum of the conjugate's domain (`+inf` when unbounded).
    pub fn conj_domain_sup(self) -> f64 {
        match self {
            Kernel::Kl | Kernel::PearsonChi2 => f64::INFINITY,
            Kernel::ReverseKl => 0.0,
            Kernel::JensenShannon => LN_2,
            Kernel::SquaredHellinger => 1.0,
        }
    }

    /// Limit of `f(x)` as `x -> 0+`.
    pub fn f_at_zero(self) -> f64 {
        match self {
            Kernel::Kl => 0.0,
            Kernel::ReverseKl => f64::INFINITY,
            Kernel::JensenShannon => LN_2,
            Kernel::PearsonChi2 | Kernel::SquaredHellinger => 1.0,
        }
    }

    /// Second derivative of `f` at 1; the curvature every kernel shares at the optimum.
    pub fn curvature_at_one(self) -> f64 {
        match self {
            Kernel::Kl | Kernel::ReverseKl => 1.0,
            Kernel::JensenShannon => 0.5,
            Kernel::PearsonChi2 => 2.0,
            Kernel::SquaredHellinger => 0.5,
        }
    }

    fn check_positive(self, x: f64) -> Result<(), FdivError> {
        if x.is_finite() && x > 0.0 {
            Ok(())
        } else {
            Err(FdivError::NonPositiveArgument { kernel: self, x })
        }
    }

    pub fn f_value(self, x: f64) -> Result<f64, FdivError> {
        self.check_positive(x)?;
        Ok(match self {
            Kernel::Kl => x * x.ln(),
            Kernel::ReverseKl => -x.ln(),
            Kernel::JensenShannon => x * x.ln() - (x + 1.0) * ((x + 1.0) / 2.0).ln(),
            Kernel::PearsonChi2 => (x - 1.0).powi(2),
            Kernel::SquaredHellinger => (x.sqrt() - 1.0).powi(2),
        })
    }

    pub fn f_prime(self, x: f64) -> Result<f64, FdivError> {
        self.check_positive(x)?;
        Ok(match self {
            Kernel::Kl => x.ln() + 1.0,
            Kernel::ReverseKl => -1.0 / x,
            Kernel::JensenShannon => LN_2 - (1.0 / x).ln_1p(),
            Kernel::PearsonChi2 => 2.0 * (x - 1.0),
            Kernel::SquaredHellinger => 1.0 - 1.0 / x.sqrt(),
        })
    }

    /// Fenchel conjugate. Arguments on or beyond the domain boundary are rejected.
    pub fn f_conj(self, u: f64) -> Result<f64, FdivError> {
        let outside = |bound| FdivError::OutsideConjugateDomain {
            kernel: self,
            u,
            bound,
        };
        if !u.is_finite() {
            return Err(outside("u finite"));
        }
        match self {
            Kernel::Kl => Ok((u - 1.0).exp()),
            Kernel::PearsonChi2 => Ok(u * u / 4.0 + u),
            Kernel::ReverseKl if u < 0.0 => Ok(-1.0 - (-u).ln()),
            Kernel::ReverseKl => Err(outside("u < 0")),
            Kernel::JensenShannon if u < LN_2 => Ok(-LN_2 - (-(u - LN_2).exp_m1()).ln()),
            Kernel::JensenShannon => Err(outside("u < log 2")),
            Kernel::SquaredHellinger if u < 1.0 => Ok(u / (1.0 - u)),
            Kernel::SquaredHellinger => Err(outside("u < 1")),
        }
    }

    /// `(f'(e^r), f*(f'(e^r)))` computed from the log-ratio without forming `e^r`
    /// where that would overflow.
    pub fn composite(self, r: f64) -> Result<(f64, f64), FdivError> {
        let t1 = self.composite_term(Term::Data, r);
        let t2 = self.composite_term(Term::Generated, r);
        if t1.is_finite() && t2.is_finite() {
            Ok((t1, t2))
        } else {
            Err(FdivError::Overflow {
                kernel: self,
                r,
                t1,
                t2,
            })
        }
    }

    /// One side of [`Kernel::composite`]; may be non-finite for extreme `r`.
    #[inline]
    pub fn composite_term(self, term: Term, r: f64) -> f64 {
        match (self, term) {
            (Kernel::Kl, Term::Data) => r + 1.0,
            (Kernel::Kl, Term::Generated) => r.exp(),
            (Kernel::ReverseKl, Term::Data) => -(-r).exp(),
            (Kernel::ReverseKl, Term::Generated) => r - 1.0,
            (Kernel::JensenShannon, Term::Data) => LN_2 + r - softplus(r),
            (Kernel::JensenShannon, Term::Generated) => softplus(r) - LN_2,
            (Kernel::PearsonChi2, Term::Data) => 2.0 * r.exp_m1(),
            (Kernel::PearsonChi2, Term::Generated) => (2.0 * r).exp_m1(),
            (Kernel::SquaredHellinger, Term::Data) => -(-r / 2.0).exp_m1(),
            (Kernel::SquaredHellinger, Term::Generated) => (r / 2.0).exp_m1(),
        }
    }

    /// Derivative of [`Kernel::composite_term`] with respect to `r`.
    #[inline]
    pub fn composite_term_derivative(self, term: Term, r: f64) -> f64 {
        match (self, term) {
            (Kernel::Kl, Term::Data) => 1.0,
            (Kernel::Kl, Term::Generated) => r.exp(),
            (Kernel::ReverseKl, Term::Data) => (-r).exp(),
            (Kernel::ReverseKl, Term::Generated) => 1.0,
            (Kernel::JensenShannon, Term::Data) => sigmoid(-r),
            (Kernel::JensenShannon, Term::Generated) => sigmoid(r),
            (Kernel::PearsonChi2, Term::Data) => 2.0 * r.exp(),
            (Kernel::PearsonChi2, Term::Generated) => 2.0 * (2.0 * r).exp(),
            (Kernel::SquaredHellinger, Term::Data) => 0.5 * (-r / 2.0).exp(),
            (Kernel::SquaredHellinger, Term::Generated) => 0.5 * (r / 2.0).exp(),
        }
    }

    /// `f(e^r)` evaluated in log space.
    pub fn f_of_logratio(self, r: f64) -> f64 {
        match self {
            Kernel::Kl => {
                if r == 0.0 {
                    0.0
                } else {
                    r * r.exp()
                }
            }
            Kernel::ReverseKl => -r,
            Kernel::JensenShannon => {
                // x log x - (x+1) log((x+1)/2) with log((x+1)/2) = softplus(r) - log 2
                // x r - (x+1)(softplus(r) - log 2), regrouped as x (r - sp) + x log 2 - sp + log 2
                let x = r.exp();
                let sp = softplus(r);
                x * (LN_2 - softplus(-r)) - sp + LN_2
            }
            Kernel::PearsonChi2 => r.exp_m1().powi(2),
            Kernel::SquaredHellinger => (r / 2.0).exp_m1().powi(2),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = FdivError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(Kernel::Kl),
            "reverse_kl" => Ok(Kernel::ReverseKl),
            "js" => Ok(Kernel::JensenShannon),
            "chi2" => Ok(Kernel::PearsonChi2),
            "hellinger2" => Ok(Kernel::SquaredHellinger),
            _ => Err(FdivError::UnknownKernel(s.to_string())),
        }
    }
}

impl TryFrom<String> for Kernel {
    type Error = FdivError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Kernel> for String {
    fn from(k: Kernel) -> Self {
        k.name().to_string()
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
