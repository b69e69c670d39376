//! Bayes-error bounds for learned representations.
//!
//! Two families of bounds relate the Bayes error `P_e` of predicting `T`
//! from a representation to `H(T|Z)`:
//!
//! * the loose pair `-ln(1 - P_e) ≤ H(T|Z) ≤ ln 2 + P_e ln|T|`, which inverts
//!   in closed form ([`thm3_upper`], [`thm4_bounds`]);
//! * the tight pair `H⁻(P_e) ≤ H(T|Z) ≤ H⁺(P_e)` ([`h_minus`], [`h_plus`]),
//!   inverted numerically by bisection ([`tight_upper_program`],
//!   [`tight_lower_program`]).
//!
//! Every result is projected onto the feasible range `[0, 1 - 1/|T|]` by
//! [`th`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Bisection iterations used by both programs.
pub const BISECTION_STEPS: usize = 40;

const DOMAIN_TOL: f64 = 1e-12;

/// Rounding allowance when comparing entropies inside the programs. Both
/// entropy curves are flat at the ceiling, so without it a one-ulp error in
/// the target turns into a ~1e-9 error in the inverted `P_e`.
fn entropy_slack(h: f64) -> f64 {
    8.0 * f64::EPSILON * h.abs().max(1.0)
}

fn ceiling(t_size: usize) -> f64 {
    1.0 - 1.0 / t_size as f64
}

fn check_t(t_size: usize) -> Result<()> {
    if t_size < 2 {
        return invalid(format!("|T| must be at least 2, got {t_size}"));
    }
    Ok(())
}

fn check_pe(p_e: f64, t_size: usize) -> Result<f64> {
    check_t(t_size)?;
    let top = ceiling(t_size);
    if !p_e.is_finite() || p_e < -DOMAIN_TOL || p_e > top + DOMAIN_TOL {
        return invalid(format!("P_e = {p_e} outside the feasible range [0, {top}]"));
    }
    Ok(p_e.clamp(0.0, top))
}

/// Threshold onto `[0, 1 - 1/|T|]`.
pub fn th(x: f64, t_size: usize) -> Result<f64> {
    check_t(t_size)?;
    Ok(x.max(0.0).min(ceiling(t_size)))
}

/// Binary entropy in nats.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Upper bound on the Bayes error of an arbitrary representation from the
/// information it shares with the self-supervised signal.
///
/// `slack` stands for the estimation error of `mi_estimate`; zero gives the
/// asymptotic bound.
pub fn thm3_upper(
    h_t: f64,
    i_xs_given_t: f64,
    i_zx_given_st: f64,
    mi_estimate: f64,
    slack: f64,
    t_size: usize,
) -> Result<f64> {
    if h_t < 0.0 || slack < 0.0 {
        return invalid("H(T) and the estimation slack must be nonnegative");
    }
    let exponent = h_t + i_xs_given_t + i_zx_given_st - mi_estimate + slack;
    th(1.0 - (-exponent).exp(), t_size)
}

/// `(lower, upper)` bounds on the Bayes error of a self-supervised
/// representation given the supervised Bayes error and `ε_info`.
pub fn thm4_bounds(p_e_sup: f64, eps_info: f64, t_size: usize) -> Result<(f64, f64)> {
    let p = check_pe(p_e_sup, t_size)?;
    if eps_info < 0.0 {
        return invalid("eps_info must be nonnegative");
    }
    let ln_t = (t_size as f64).ln();
    let lower = -((1.0 - p).ln() + 2f64.ln()) / ln_t;
    let upper = 1.0 - (-(2f64.ln() + p * ln_t + eps_info)).exp();
    Ok((th(lower, t_size)?, th(upper, t_size)?))
}

/// `H⁺(P_e) = H(P_e) + P_e ln(|T| - 1)`.
pub fn h_plus(p_e: f64, t_size: usize) -> Result<f64> {
    let p = check_pe(p_e, t_size)?;
    Ok(binary_entropy(p) + p * ((t_size - 1) as f64).ln())
}

/// Bracket index `k ∈ [1, |T|-1]` with `(k-1)/k ≤ P_e ≤ k/(k+1)`.
fn bracket(p: f64, t_size: usize) -> usize {
    // (k-1)/k ≤ p  ⇔  k ≤ 1/(1-p).
    let k = (1.0 / (1.0 - p)).floor() as usize;
    k.clamp(1, t_size - 1)
}

/// `H⁻(P_e) = H(k(1-P_e)) + k(1-P_e) ln k` on the bracket containing `P_e`.
pub fn h_minus(p_e: f64, t_size: usize) -> Result<f64> {
    let p = check_pe(p_e, t_size)?;
    Ok(h_minus_on(p, bracket(p, t_size)))
}

fn h_minus_on(p: f64, k: usize) -> f64 {
    let mass = (k as f64 * (1.0 - p)).min(1.0);
    binary_entropy(mass) + mass * (k as f64).ln()
}

/// Evaluates `H⁻` with an explicit bracket index; used to check that
/// neighbouring brackets agree on their shared endpoint.
pub fn h_minus_bracket(p_e: f64, k: usize, t_size: usize) -> Result<f64> {
    let p = check_pe(p_e, t_size)?;
    if k == 0 || k >= t_size {
        return invalid(format!("bracket index {k} outside [1, {}]", t_size - 1));
    }
    Ok(h_minus_on(p, k))
}

/// Largest feasible `P_e` with `H⁻(P_e) ≤ rhs`.
pub fn tight_upper_program(rhs_nats: f64, t_size: usize) -> Result<f64> {
    check_t(t_size)?;
    let top = ceiling(t_size);
    if rhs_nats < 0.0 {
        return Ok(0.0);
    }
    let rhs_nats = rhs_nats + entropy_slack(rhs_nats);
    if h_minus(top, t_size)? <= rhs_nats {
        return Ok(top);
    }
    let (mut lo, mut hi) = (0.0, top);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if h_minus(mid, t_size)? <= rhs_nats {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Smallest feasible `P_e` with `H⁺(P_e) ≥ H⁻(p_e_sup)`.
pub fn tight_lower_program(p_e_sup: f64, t_size: usize) -> Result<f64> {
    let target = h_minus(p_e_sup, t_size)?;
    let target = target - entropy_slack(target);
    if target <= 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, ceiling(t_size));
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if h_plus(mid, t_size)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Inputs of one bound scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub h_t: f64,
    pub i_xs_given_t: f64,
    pub i_zx_given_st: f64,
    /// `I(Z;S)`, exact or estimated.
    pub mi: f64,
    /// Estimation slack added to the exponent; 0 means asymptotic.
    pub slack: f64,
    pub t_size: usize,
    pub eps_info: f64,
    pub p_e_sup: f64,
}

/// Interval on the Bayes error with the flags describing it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    /// Upper end sits at the ceiling `1 - 1/|T|`, so it carries no information.
    pub vacuous: bool,
    /// Lower end was raised to 0 by the threshold.
    pub clamped_lower: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub inputs: BoundInputs,
    pub asymptotic: bool,
    /// Arbitrary-representation upper bound, loose and tight forms.
    pub any_loose_upper: f64,
    pub any_tight_upper: f64,
    /// Self-supervised interval from the supervised Bayes error.
    pub loose: Interval,
    pub tight: Interval,
}

impl BoundsReport {
    pub fn compute(inputs: BoundInputs) -> Result<Self> {
        let t = inputs.t_size;
        let top = ceiling(t);
        let any_loose_upper = thm3_upper(
            inputs.h_t,
            inputs.i_xs_given_t,
            inputs.i_zx_given_st,
            inputs.mi,
            inputs.slack,
            t,
        )?;
        let rhs = inputs.h_t - inputs.mi + inputs.i_xs_given_t + inputs.i_zx_given_st + inputs.slack;
        let any_tight_upper = tight_upper_program(rhs, t)?;

        let (loose_lower, loose_upper) = thm4_bounds(inputs.p_e_sup, inputs.eps_info, t)?;
        let ln_t = (t as f64).ln();
        let raw_lower = -((1.0 - inputs.p_e_sup).ln() + 2f64.ln()) / ln_t;
        let tight_lower = tight_lower_program(inputs.p_e_sup, t)?;
        let tight_upper = tight_upper_program(h_plus(inputs.p_e_sup, t)? + inputs.eps_info, t)?;

        let vacuous = |u: f64| u >= top - DOMAIN_TOL;
        Ok(Self {
            asymptotic: inputs.slack == 0.0,
            any_loose_upper,
            any_tight_upper,
            loose: Interval {
                lower: loose_lower,
                upper: loose_upper,
                vacuous: vacuous(loose_upper),
                clamped_lower: raw_lower < 0.0,
            },
            tight: Interval {
                lower: tight_lower,
                upper: tight_upper,
                vacuous: vacuous(tight_upper),
                clamped_lower: tight_lower == 0.0,
            },
            inputs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn th_examples() {
        assert_eq!(th(-0.2, 4).unwrap(), 0.0);
        assert_eq!(th(0.9, 4).unwrap(), 0.75);
        assert_eq!(th(0.3, 2).unwrap(), 0.3);
        assert!(th(0.3, 1).is_err());
    }

    #[test]
    fn thm3_examples() {
        close(thm3_upper(LN2, 0.0, 0.0, LN2, 0.0, 2).unwrap(), 0.0, 1e-15);
        close(thm3_upper(LN2, 0.0, 0.0, 0.0, 0.0, 2).unwrap(), 0.5, 1e-15);
        // Huge exponent clamps to the ceiling.
        close(thm3_upper(1e3, 0.0, 0.0, 0.0, 0.0, 4).unwrap(), 0.75, 0.0);
        assert!(thm3_upper(LN2, 0.0, 0.0, 0.0, -1.0, 2).is_err());
    }

    #[test]
    fn thm4_examples() {
        let (lo, up) = thm4_bounds(0.0, 0.0, 2).unwrap();
        assert_eq!(lo, 0.0);
        close(up, 0.5, 1e-15);
        let (lo, _) = thm4_bounds(0.0, 0.0, 10).unwrap();
        assert_eq!(lo, 0.0);
        assert!(thm4_bounds(1.0, 0.0, 2).is_err());
        assert!(thm4_bounds(0.2, -0.1, 2).is_err());
    }

    #[test]
    fn h_plus_examples() {
        assert_eq!(h_plus(0.0, 5).unwrap(), 0.0);
        close(h_plus(0.5, 2).unwrap(), LN2, 1e-15);
        close(h_plus(0.75, 4).unwrap(), 4f64.ln(), 1e-12);
        assert!(h_plus(0.8, 4).is_err());
        assert!(h_plus(-0.1, 4).is_err());
    }

    #[test]
    fn h_minus_examples() {
        assert_eq!(h_minus(0.0, 6).unwrap(), 0.0);
        close(h_minus(0.5, 3).unwrap(), LN2, 1e-15);
        close(h_minus_bracket(0.5, 1, 3).unwrap(), LN2, 1e-15);
        close(h_minus_bracket(0.5, 2, 3).unwrap(), LN2, 1e-15);
        // At the ceiling H⁻ equals ln|T|.
        close(h_minus(0.75, 4).unwrap(), 4f64.ln(), 1e-12);
        assert!(h_minus(0.6, 2).is_err());
    }

    #[test]
    fn bracket_endpoints_agree() {
        for t in 3..=8 {
            for k in 1..t - 1 {
                let p = k as f64 / (k + 1) as f64;
                let a = h_minus_bracket(p, k, t).unwrap();
                let b = h_minus_bracket(p, k + 1, t).unwrap();
                close(a, b, 1e-12);
                close(a, ((k + 1) as f64).ln(), 1e-12);
            }
        }
    }

    #[test]
    fn programs() {
        close(tight_upper_program(LN2, 2).unwrap(), 0.5, 1e-10);
        assert_eq!(tight_upper_program(0.0, 3).unwrap(), 0.0);
        assert_eq!(tight_upper_program(-1.0, 3).unwrap(), 0.0);
        let target = h_minus(0.3, 4).unwrap();
        close(tight_upper_program(target, 4).unwrap(), 0.3, 1e-9);

        assert_eq!(tight_lower_program(0.0, 4).unwrap(), 0.0);
        close(tight_lower_program(0.3, 2).unwrap(), 0.3, 1e-10);
        let tl = tight_lower_program(0.3, 4).unwrap();
        let (loose, _) = thm4_bounds(0.3, 0.0, 4).unwrap();
        assert!(tl <= 0.3 && tl >= loose - 1e-9, "{tl} {loose}");
    }

    #[test]
    fn report_orders_intervals() {
        let r = BoundsReport::compute(BoundInputs {
            h_t: 4f64.ln(),
            i_xs_given_t: 0.1,
            i_zx_given_st: 0.0,
            mi: 1.0,
            slack: 0.0,
            t_size: 4,
            eps_info: 0.05,
            p_e_sup: 0.2,
        })
        .unwrap();
        assert!(r.asymptotic);
        assert!(r.tight.upper <= r.loose.upper + 1e-9);
        assert!(r.tight.lower >= r.loose.lower - 1e-9);
        assert!(r.tight.lower <= r.tight.upper);
        assert!(r.any_tight_upper <= r.any_loose_upper + 1e-9);
    }
}
