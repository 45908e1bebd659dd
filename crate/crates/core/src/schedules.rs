//! Interpolation schedules `x_t = alpha(t) x_0 + beta(t) eps`.
//!
//! All three families satisfy `alpha(0) = 1, beta(0) = 0, alpha(1) = 0, beta(1) = 1`.
//! The power-law family uses `alpha = 1 - t^p`, `beta = t^p`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// `alpha = 1 - t`, `beta = t`.
    Rectified,
    /// `alpha = 1 - t^p`, `beta = t^p`, `p > 0`.
    PowerLaw { p: f64 },
    /// `alpha = cos(pi t / 2)`, `beta = sin(pi t / 2)`.
    Cosine,
}

/// Schedule coefficients and their time derivatives at one `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_dot: f64,
    pub beta_dot: f64,
}

impl Coefficients {
    /// `alpha * beta' - alpha' * beta`, the determinant of the map `(x0, eps) -> (x_t, v)`.
    pub fn discriminant(&self) -> f64 {
        self.alpha * self.beta_dot - self.alpha_dot * self.beta
    }
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "t",
            value: t,
            domain: "[0, 1]",
        })
    }
}

impl Schedule {
    pub fn power(p: f64) -> Result<Self> {
        if p > 0.0 && p.is_finite() {
            Ok(Schedule::PowerLaw { p })
        } else {
            Err(Error::Domain {
                what: "p",
                value: p,
                domain: "(0, inf)",
            })
        }
    }

    pub fn eval(&self, t: f64) -> Result<Coefficients> {
        check_unit(t)?;
        Ok(self.eval_unchecked(t))
    }

    /// Same as [`Schedule::eval`] without the domain check; callers guarantee `t ∈ [0,1]`.
    pub(crate) fn eval_unchecked(&self, t: f64) -> Coefficients {
        match *self {
            Schedule::Rectified => Coefficients {
                alpha: 1.0 - t,
                beta: t,
                alpha_dot: -1.0,
                beta_dot: 1.0,
            },
            Schedule::PowerLaw { p } => {
                let tp = t.powf(p);
                let dtp = if p == 1.0 { 1.0 } else { p * t.powf(p - 1.0) };
                Coefficients {
                    alpha: 1.0 - tp,
                    beta: tp,
                    alpha_dot: -dtp,
                    beta_dot: dtp,
                }
            }
            Schedule::Cosine => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                Coefficients {
                    alpha: c,
                    beta: s,
                    alpha_dot: -FRAC_PI_2 * s,
                    beta_dot: FRAC_PI_2 * c,
                }
            }
        }
    }

    /// `beta'(t) / beta(t)`; diverges as `t -> 0`.
    pub fn gain_ratio(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Domain {
                what: "t",
                value: t,
                domain: "(0, 1]",
            });
        }
        Ok(match *self {
            Schedule::Rectified => 1.0 / t,
            Schedule::PowerLaw { p } => p / t,
            Schedule::Cosine => FRAC_PI_2 / (FRAC_PI_2 * t).tan(),
        })
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Rectified => write!(f, "rectified"),
            Schedule::PowerLaw { p } => write!(f, "power:{p}"),
            Schedule::Cosine => write!(f, "cosine"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "rectified" => Ok(Schedule::Rectified),
            "cosine" => Ok(Schedule::Cosine),
            _ => {
                let p = s
                    .strip_prefix("power:")
                    .and_then(|p| p.trim().parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::invalid(format!(
                            "unknown schedule `{s}` (expected rectified, power:<p> or cosine)"
                        ))
                    })?;
                Schedule::power(p)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [Schedule; 4] = [
        Schedule::Rectified,
        Schedule::PowerLaw { p: 2.0 },
        Schedule::PowerLaw { p: 0.5 },
        Schedule::Cosine,
    ];

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn boundary_conditions() {
        for s in ALL {
            let c0 = s.eval(0.0).unwrap();
            let c1 = s.eval(1.0).unwrap();
            assert!(close(c0.alpha, 1.0, 1e-12) && close(c0.beta, 0.0, 1e-12), "{s}");
            assert!(close(c1.alpha, 0.0, 1e-12) && close(c1.beta, 1.0, 1e-12), "{s}");
        }
    }

    #[test]
    fn eval_examples() {
        let c = Schedule::Rectified.eval(0.0).unwrap();
        assert_eq!((c.alpha, c.beta, c.alpha_dot, c.beta_dot), (1.0, 0.0, -1.0, 1.0));

        let c = Schedule::Cosine.eval(1.0).unwrap();
        assert!(close(c.alpha, 0.0, 1e-15));
        assert!(close(c.beta, 1.0, 1e-15));
        assert!(close(c.alpha_dot, -FRAC_PI_2, 1e-15));
        assert!(close(c.beta_dot, 0.0, 1e-15));

        let s = Schedule::PowerLaw { p: 2.0 };
        let c = s.eval(0.5).unwrap();
        assert_eq!((c.alpha, c.beta, c.alpha_dot, c.beta_dot), (0.75, 0.25, -1.0, 1.0));
        // central differences of the coefficient functions themselves
        let h = 1e-6;
        let (lo, hi) = (s.eval(0.5 - h).unwrap(), s.eval(0.5 + h).unwrap());
        assert!(close((hi.alpha - lo.alpha) / (2.0 * h), -1.0, 1e-8));
        assert!(close((hi.beta - lo.beta) / (2.0 * h), 1.0, 1e-8));
    }

    #[test]
    fn eval_rejects_out_of_range() {
        assert!(matches!(Schedule::Cosine.eval(1.5), Err(Error::Domain { .. })));
        assert!(Schedule::Rectified.eval(-0.1).is_err());
        assert!(Schedule::Rectified.eval(f64::NAN).is_err());
    }

    #[test]
    fn gain_ratio_examples() {
        assert!(close(Schedule::Rectified.gain_ratio(0.1).unwrap(), 10.0, 1e-12));
        assert!(close(Schedule::PowerLaw { p: 2.0 }.gain_ratio(0.5).unwrap(), 4.0, 1e-12));
        let g = Schedule::Cosine.gain_ratio(0.5).unwrap();
        assert!(close(g, FRAC_PI_2, 1e-12));
        let h = 1e-6;
        let s = Schedule::Cosine;
        let fd = (s.eval(0.5 + h).unwrap().beta - s.eval(0.5 - h).unwrap().beta) / (2.0 * h);
        assert!(close(fd / s.eval(0.5).unwrap().beta, g, 1e-8));
        assert!(Schedule::Rectified.gain_ratio(0.0).is_err());
    }

    #[test]
    fn gain_ratio_matches_coefficient_ratio_and_diverges() {
        for s in ALL {
            for k in 1..=100 {
                let t = k as f64 / 100.0;
                let c = s.eval(t).unwrap();
                let g = s.gain_ratio(t).unwrap();
                assert!(g.is_finite());
                assert!(close(g, c.beta_dot / c.beta, 1e-9 * g.abs().max(1.0)), "{s} t={t}");
            }
            assert!(s.gain_ratio(1e-6).unwrap() > s.gain_ratio(1e-2).unwrap());
        }
    }

    #[test]
    fn monotone_on_fine_grid() {
        for s in ALL {
            let mut prev = s.eval(0.0).unwrap();
            for k in 1..=10_000 {
                let c = s.eval(k as f64 / 10_000.0).unwrap();
                assert!(c.beta > 0.0);
                assert!(c.alpha <= prev.alpha && c.beta >= prev.beta, "{s} at {k}");
                prev = c;
            }
        }
    }

    #[test]
    fn beta_dot_matches_finite_differences() {
        let h = 1e-6;
        for s in ALL {
            for k in 1..1000 {
                let t = k as f64 / 1000.0;
                if t - h <= 0.0 || t + h >= 1.0 {
                    continue;
                }
                let fd = (s.eval(t + h).unwrap().beta - s.eval(t - h).unwrap().beta) / (2.0 * h);
                let exact = s.eval(t).unwrap().beta_dot;
                let rel = (fd - exact).abs() / exact.abs().max(1e-300);
                // the cosine derivative vanishes at t=1; use an absolute floor there
                assert!(rel < 1e-6 || (fd - exact).abs() < 1e-9, "{s} t={t} rel={rel}");
            }
        }
    }

    #[test]
    fn power_law_gain_times_t_tends_to_p() {
        for p in [0.5, 1.0, 2.0, 3.0] {
            let s = Schedule::PowerLaw { p };
            for t in [1e-2, 1e-3, 1e-4] {
                let gt = s.gain_ratio(t).unwrap() * t;
                assert!(((gt - p) / p).abs() < 0.01);
            }
        }
    }

    #[test]
    fn parse_round_trip() {
        for s in ALL {
            assert_eq!(s.to_string().parse::<Schedule>().unwrap(), s);
        }
        assert!("power:-1".parse::<Schedule>().is_err());
        assert!("linear".parse::<Schedule>().is_err());
    }
}
