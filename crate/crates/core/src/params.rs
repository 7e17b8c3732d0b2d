//! Parameter set, derived exponents and the assumption gates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw exponents of the double phase problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub n: usize,
    pub p: f64,
    pub q: f64,
    pub s: f64,
    pub t: f64,
    pub eps: f64,
    /// Upper bound for the modulating coefficient a(x, y).
    pub m_coeff: f64,
    pub delta0: f64,
    pub delta_f: f64,
}

impl ParameterSet {
    /// Builds a parameter set with `delta_f = delta0 / 2`.
    pub fn new(n: usize, p: f64, q: f64, s: f64, t: f64, eps: f64) -> Self {
        ParameterSet {
            n,
            p,
            q,
            s,
            t,
            eps,
            m_coeff: 1.0,
            delta0: 0.1,
            delta_f: 0.05,
        }
    }

    /// The reference configuration used throughout the tests and the CLI defaults.
    pub fn config_s() -> Self {
        ParameterSet::new(2, 2.0, 2.0, 0.6, 0.5, 0.1)
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn nf(&self) -> f64 {
        self.n as f64
    }

    pub fn p_prime(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    /// Exponent of the kernel |x-y|^{-(n - eps p)} defining the pair measure.
    pub fn kernel_exponent(&self) -> f64 {
        self.nf() - self.eps * self.p
    }

    /// Homogeneity of the pair measure under dilations: n + eps p.
    pub fn doubling_exponent(&self) -> f64 {
        self.nf() + self.eps * self.p
    }

    /// Exponent of |x-y| in A(x,y) = a(x,y)|x-y|^{(s-t)q + eps(q-p)}.
    pub fn coefficient_exponent(&self) -> f64 {
        (self.s - self.t) * self.q + self.eps * (self.q - self.p)
    }

    /// Returns the first failing required gate, if any.
    pub fn validate(&self) -> Result<()> {
        let report = check_assumptions(self);
        match report.first_failure() {
            Some(g) => Err(Error::Assumption {
                gate: g.name.clone(),
                detail: g.detail.clone(),
            }),
            None => Ok(()),
        }
    }
}

/// Exponents computed from a [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedExponents {
    pub p_prime: f64,
    pub eta: f64,
    pub gamma: f64,
    pub theta: f64,
    pub tau: f64,
    pub p_star_s: f64,
    pub p_lower_s: f64,
    pub vartheta: f64,
    pub vartheta_f: f64,
    pub vartheta_f_tilde: f64,
    pub alpha_k_rate: f64,
}

/// Computes the derived exponents after checking every required gate.
pub fn derive_exponents(params: &ParameterSet) -> Result<DerivedExponents> {
    params.validate()?;
    Ok(derive_exponents_unchecked(params))
}

/// Computes the derived exponents without checking the gates.
pub fn derive_exponents_unchecked(params: &ParameterSet) -> DerivedExponents {
    let ParameterSet {
        p, q, s, t, eps, ..
    } = *params;
    let n = params.nf();
    let p_prime = p / (p - 1.0);
    let eta = (n * p + eps * p * p) / (n + s * p + eps * p);
    let gamma = eta / (p - 1.0);
    let theta = (s - eps * (p - 1.0)) / (n + eps * p);
    let tau = s + eps - eps * p / eta;
    let p_star_s = sobolev_upper(n, p, s);
    let p_lower_s = sobolev_lower(n, p, s);
    let vartheta = 3.0 * (p_prime - gamma) / gamma;
    let pt = p_lower_s * theta;
    let vartheta_f = (p_lower_s + params.delta_f) * pt / (1.0 - pt);
    let vartheta_f_tilde = p_lower_s * (1.0 + theta * params.delta_f) / (1.0 - pt);
    let alpha_k_rate = t * q / (p - 1.0) - s - eps;
    DerivedExponents {
        p_prime,
        eta,
        gamma,
        theta,
        tau,
        p_star_s,
        p_lower_s,
        vartheta,
        vartheta_f,
        vartheta_f_tilde,
        alpha_k_rate,
    }
}

impl DerivedExponents {
    /// gamma written as p'(n + eps p)/(n + sp + eps p).
    pub fn gamma_closed_form(params: &ParameterSet) -> f64 {
        let n = params.nf();
        let (p, s, eps) = (params.p, params.s, params.eps);
        p / (p - 1.0) * (n + eps * p) / (n + s * p + eps * p)
    }

    /// Decay rate of the tail weights, choosing the a = 0 variant when requested.
    pub fn tail_rate(&self, params: &ParameterSet, coefficient_vanishes: bool) -> f64 {
        if coefficient_vanishes {
            params.s / (params.p - 1.0) - params.eps
        } else {
            self.alpha_k_rate
        }
    }
}

/// Upper Sobolev exponent r^{*sigma} = nr/(n - sigma r).
pub fn sobolev_upper(n: f64, r: f64, sigma: f64) -> f64 {
    n * r / (n - sigma * r)
}

/// Lower Sobolev exponent r_{*sigma} = n r'/(n + sigma r').
pub fn sobolev_lower(n: f64, r: f64, sigma: f64) -> f64 {
    let rp = r / (r - 1.0);
    n * rp / (n + sigma * rp)
}

/// Hoelder conjugate r/(r-1).
pub fn conjugate(r: f64) -> f64 {
    r / (r - 1.0)
}

/// One inequality of the assumption list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    /// Distance to the boundary of the gate; negative when it fails.
    pub slack: f64,
    /// Informational gates never cause rejection.
    pub required: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub gates: Vec<Gate>,
    /// Raised for n = 1, which is accepted for smoke tests only.
    pub low_dimension_warning: bool,
}

impl AssumptionReport {
    pub fn all_required_pass(&self) -> bool {
        self.gates.iter().all(|g| g.passed || !g.required)
    }

    pub fn first_failure(&self) -> Option<&Gate> {
        self.gates.iter().find(|g| g.required && !g.passed)
    }

    pub fn gate(&self, name: &str) -> Option<&Gate> {
        self.gates.iter().find(|g| g.name == name)
    }
}

/// Strict gates need positive slack, non-strict ones accept zero.
fn gate(name: &str, slack: f64, strict: bool, required: bool, detail: String) -> Gate {
    let passed = if strict { slack > 0.0 } else { slack >= 0.0 };
    Gate {
        name: name.to_string(),
        passed,
        slack,
        required,
        detail,
    }
}

/// Evaluates every inequality of (A1)-(A4) together with the data margins.
pub fn check_assumptions(params: &ParameterSet) -> AssumptionReport {
    let ParameterSet {
        p,
        q,
        s,
        t,
        eps,
        m_coeff,
        delta0,
        delta_f,
        ..
    } = *params;
    let n = params.nf();
    let mut gates = Vec::new();
    gates.push(gate(
        "dimension",
        n - 0.5,
        true,
        true,
        format!("n = {}", params.n),
    ));
    gates.push(gate(
        "A1.coefficient_bound",
        if m_coeff.is_finite() { m_coeff } else { -1.0 },
        false,
        true,
        format!("0 <= a <= M_coeff = {m_coeff}"),
    ));
    gates.push(gate(
        "A2.p_gt_1",
        p - 1.0,
        true,
        true,
        format!("p = {p} > 1"),
    ));
    gates.push(gate(
        "A2.p_le_q",
        q - p,
        false,
        true,
        format!("p = {p} <= q = {q}"),
    ));
    gates.push(gate("A2.t_pos", t, true, true, format!("t = {t} > 0")));
    gates.push(gate(
        "A2.t_le_s",
        s - t,
        false,
        true,
        format!("t = {t} <= s = {s}"),
    ));
    gates.push(gate(
        "A2.s_lt_1",
        1.0 - s,
        true,
        true,
        format!("s = {s} < 1"),
    ));
    let ratio = t * q / (s * p);
    let inv_pp = (p - 1.0) / p;
    gates.push(gate(
        "A2.ratio_window",
        (ratio - inv_pp).min(1.0 - ratio),
        false,
        true,
        format!("1/p' = {inv_pp} <= tq/(sp) = {ratio} <= 1"),
    ));
    gates.push(gate(
        "A3.sp_lt_n",
        n - s * p,
        true,
        true,
        format!("sp = {} < n = {n}", s * p),
    ));
    gates.push(gate(
        "A4.eps_pos",
        eps,
        true,
        true,
        format!("eps = {eps} > 0"),
    ));
    gates.push(gate(
        "A4.eps_lt_s_over_p",
        s / p - eps,
        true,
        true,
        format!("eps = {eps} < s/p = {}", s / p),
    ));
    let bound = s * (ratio - inv_pp);
    gates.push(gate(
        "A4.eps_lt_ratio_margin",
        bound - eps,
        true,
        true,
        format!("eps = {eps} < s(tq/(sp) - 1/p') = {bound}"),
    ));
    gates.push(gate(
        "A4.eps_lt_1_minus_s",
        1.0 - s - eps,
        true,
        true,
        format!("eps = {eps} < 1 - s = {}", 1.0 - s),
    ));
    gates.push(gate(
        "data.delta_f_pos",
        delta_f,
        true,
        true,
        format!("delta_f = {delta_f} > 0"),
    ));
    gates.push(gate(
        "data.delta_f_lt_delta0",
        delta0 - delta_f,
        true,
        true,
        format!("delta_f = {delta_f} < delta0 = {delta0}"),
    ));
    gates.push(gate(
        "info.p_ge_2",
        p - 2.0,
        false,
        false,
        format!("p = {p} >= 2 gives eta > 1"),
    ));
    AssumptionReport {
        gates,
        low_dimension_warning: params.n == 1,
    }
}

/// Both sides of 2^{kr} sum_{j >= k-1} 2^{-jr} <= 4^r/(r ln 2).
pub fn geometric_series_bound(k: i64, r: f64) -> Result<(f64, f64)> {
    if k < 1 {
        return Err(Error::Domain(format!("k = {k} must be >= 1")));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Domain(format!("r = {r} must be positive")));
    }
    let lhs = 2f64.powf(r) / (1.0 - 2f64.powf(-r));
    let rhs = 4f64.powf(r) / (r * std::f64::consts::LN_2);
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_s_exponents() {
        let d = derive_exponents(&ParameterSet::config_s()).unwrap();
        assert!((d.eta - 4.4 / 3.4).abs() < 1e-14);
        assert!((d.gamma - 4.4 / 3.4).abs() < 1e-14);
        assert!((d.theta - 0.5 / 2.2).abs() < 1e-14);
        assert!((d.p_star_s - 5.0).abs() < 1e-12);
        assert!((d.p_lower_s - 1.25).abs() < 1e-12);
        assert!((d.tau - 0.545454545454).abs() < 1e-9);
        assert!((d.vartheta - 1.636364).abs() < 1e-6);
        assert!((d.vartheta_f - 0.515873).abs() < 1e-6);
        assert!((d.vartheta_f_tilde - 1.765873).abs() < 1e-6);
        assert!((d.alpha_k_rate - 0.3).abs() < 1e-12);
    }

    #[test]
    fn gates_for_config_s() {
        let r = check_assumptions(&ParameterSet::config_s());
        assert!(r.all_required_pass());
        let g = r.gate("A2.ratio_window").unwrap();
        assert!((g.slack - 1.0 / 6.0).abs() < 1e-12);
        assert!(r.gate("A3.sp_lt_n").unwrap().passed);
        assert!(!r.low_dimension_warning);
    }

    #[test]
    fn eps_quarter_fails_a4() {
        let p = ParameterSet::config_s().with_eps(0.25);
        let r = check_assumptions(&p);
        let g = r.first_failure().unwrap();
        assert_eq!(g.name, "A4.eps_lt_ratio_margin");
        assert!((g.slack + 0.05).abs() < 1e-12);
        assert!(matches!(
            derive_exponents(&p),
            Err(Error::Assumption { .. })
        ));
    }

    #[test]
    fn single_perturbations_rejected() {
        let base = ParameterSet::config_s();
        let bad = [
            ParameterSet { p: 1.0, ..base },
            ParameterSet { q: 1.5, ..base },
            ParameterSet { t: 0.7, ..base },
            ParameterSet { s: 1.0, ..base },
            ParameterSet { t: 0.0, ..base },
            ParameterSet { q: 3.0, ..base },
            ParameterSet { t: 0.2, ..base },
            ParameterSet {
                n: 1,
                s: 0.6,
                ..base
            },
            ParameterSet { eps: 0.0, ..base },
            ParameterSet {
                delta_f: 0.2,
                ..base
            },
            ParameterSet {
                delta_f: 0.0,
                ..base
            },
            ParameterSet {
                m_coeff: -1.0,
                ..base
            },
        ];
        for b in bad {
            assert!(b.validate().is_err(), "{b:?} accepted");
        }
    }

    #[test]
    fn n_one_flagged() {
        let p = ParameterSet::new(1, 2.0, 2.0, 0.4, 0.35, 0.05);
        let r = check_assumptions(&p);
        assert!(r.low_dimension_warning);
        assert!(r.all_required_pass());
    }

    #[test]
    fn eps_limit() {
        let p = ParameterSet::config_s().with_eps(1e-12);
        let d = derive_exponents_unchecked(&p);
        assert!((d.eta - 4.0 / 3.2).abs() < 1e-10);
        assert!((d.tau - 0.6).abs() < 1e-10);
    }

    #[test]
    fn geometric_examples() {
        let (l, r) = geometric_series_bound(1, 1.0).unwrap();
        assert!((l - 4.0).abs() < 1e-14);
        assert!((r - 5.770780163555854).abs() < 1e-12);
        let (l, r) = geometric_series_bound(2, 2.0).unwrap();
        assert!((l - 16.0 / 3.0).abs() < 1e-13);
        assert!((r - 11.541560327111708).abs() < 1e-11);
        assert_eq!(
            geometric_series_bound(1, 0.7).unwrap().0,
            geometric_series_bound(7, 0.7).unwrap().0
        );
        assert!(geometric_series_bound(0, 1.0).is_err());
        assert!(geometric_series_bound(1, 0.0).is_err());
    }
}
