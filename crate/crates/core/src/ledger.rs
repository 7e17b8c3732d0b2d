//! The kappa and C constants of the level-set argument, from measured inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{derive_exponents_unchecked, ParameterSet};

/// Measured or placeholder inputs. The constants that the argument only
/// bounds abstractly (C_2, C_3, C_a) default to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerInputs {
    /// Ball-to-cube comparison constant.
    pub c_d: Option<f64>,
    /// Off-diagonal almost reverse Holder constant.
    pub c_nd: Option<f64>,
    pub c_dd: Option<f64>,
    pub c_ddd: Option<f64>,
    /// eps * nu(B(0,1) x B(0,1)).
    pub ball_constant: Option<f64>,
    pub c2: f64,
    pub c3: f64,
    pub c_a: f64,
}

impl Default for LedgerInputs {
    fn default() -> Self {
        LedgerInputs {
            c_d: None,
            c_nd: None,
            c_dd: None,
            c_ddd: None,
            ball_constant: None,
            c2: 1.0,
            c3: 1.0,
            c_a: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsLedger {
    pub inputs: LedgerInputs,
    pub c1: f64,
    pub sigma_rh: f64,
    pub m_big: f64,
    pub kappa_tilde: f64,
    pub kappa_hat: f64,
    /// Left side of the kappa_hat condition at the chosen value; 1/2 on the boundary.
    pub kappa_hat_condition: f64,
    pub kappa_hat_reduced: bool,
    /// nu(B(x0,2) x B(x0,2)), the bound L for ϱ0 <= 1.
    pub l_mass: f64,
    pub c5: f64,
    pub kappa_f: f64,
    /// eps^{1/p'}/(2 C_d)^{1/p'} from the near-diagonal argument.
    pub kappa0_conjugate: f64,
    /// eps^{1/p'}/(2 C_d)^{1/p} as displayed in the choice of kappa.
    pub kappa0_displayed: f64,
    pub kappa0: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa: f64,
    pub c_kappa: f64,
    /// (10n)^{n+p}, the good/bad cutoff factor.
    pub bad_cutoff_factor: f64,
    /// 10^{n + eps p} and 10^{n + p}; the checks use the larger.
    pub dilation_factor_doubling: f64,
    pub dilation_factor_conclusion: f64,
    pub flags: Vec<String>,
}

impl ConstantsLedger {
    pub fn dilation_factor(&self) -> f64 {
        self.dilation_factor_doubling
            .max(self.dilation_factor_conclusion)
    }
}

/// C_1 = 4^q/(s(p'-1)(tq/(sp) - 1/p') ln 2).
pub fn c1_bound(ps: &ParameterSet) -> f64 {
    let pp = ps.p_prime();
    4f64.powf(ps.q)
        / (ps.s * (pp - 1.0) * (ps.t * ps.q / (ps.s * ps.p) - 1.0 / pp) * std::f64::consts::LN_2)
}

fn need(v: Option<f64>, name: &str) -> Result<f64> {
    match v {
        Some(x) if x.is_finite() && x > 0.0 => Ok(x),
        Some(x) => Err(Error::Domain(format!(
            "measurement {name} must be positive, got {x}"
        ))),
        None => Err(Error::Missing(name.into())),
    }
}

pub fn constants_ledger(ps: &ParameterSet, inputs: &LedgerInputs) -> Result<ConstantsLedger> {
    let d = derive_exponents_unchecked(ps);
    let eps = ps.eps;
    let n = ps.nf();
    let c_d = need(inputs.c_d, "C_d")?;
    let c_nd = need(inputs.c_nd, "C_nd")?;
    let ball = need(inputs.ball_constant, "ball constant")?;
    let mut flags = Vec::new();

    let c1 = c1_bound(ps);
    let sigma_rh = eps.powf(1.0 / d.gamma - 1.0 / d.p_prime) / (4.0 * c1);
    let m_big = 4.0 * inputs.c2;
    let kappa_tilde =
        eps.powf(2.0 / d.gamma - 2.0 / d.p_prime) / (2.0 * inputs.c3).powf(1.0 / d.gamma);

    let l_mass = ball * 2f64.powf(ps.doubling_exponent()) / eps;
    let pth = d.p_lower_s * d.theta;
    let f_gap = 1.0 / d.p_lower_s - 1.0 / d.p_prime;
    let power = d.p_lower_s / (1.0 - pth);
    let base = 4.0 * m_big * (l_mass + 1.0) / eps.powf(f_gap);
    let mut kappa_hat = 0.5f64.powf((1.0 - pth) / d.p_lower_s) / base;
    let mut kappa_hat_reduced = false;
    if kappa_hat / kappa_tilde >= 1.0 {
        kappa_hat = 0.5 * kappa_tilde;
        kappa_hat_reduced = true;
        flags.push("kappa_hat reduced below kappa_tilde so that kappa_f < 1".into());
    }
    let kappa_hat_condition = (base * kappa_hat).powf(power);
    let c5 = 2.0 * base.powf(power);
    let kappa_f = kappa_hat / kappa_tilde;

    let kappa0_conjugate = eps.powf(1.0 / d.p_prime) / (2.0 * c_d).powf(1.0 / d.p_prime);
    let kappa0_displayed = eps.powf(1.0 / d.p_prime) / (2.0 * c_d).powf(1.0 / ps.p);
    if (kappa0_conjugate - kappa0_displayed).abs() > 1e-12 * kappa0_conjugate {
        flags.push("kappa0 differs between its two printed forms; using the smaller".into());
    }
    let kappa0 = kappa0_conjugate.min(kappa0_displayed);
    let kappa1 = eps.powf(1.0 / d.gamma) / (2f64.powf(1.0 / d.gamma) * 3.0 * c_nd);
    let cutoff = (10.0 * n).powf(n + ps.p);
    let kappa2 = eps.powf(1.0 / d.gamma)
        / (8f64.powf(1.0 / d.gamma) * 3.0 * c_nd * cutoff.powf(1.0 / d.gamma));
    let kappa = kappa0.min(kappa1).min(kappa2).min(1.0);
    Ok(ConstantsLedger {
        inputs: inputs.clone(),
        c1,
        sigma_rh,
        m_big,
        kappa_tilde,
        kappa_hat,
        kappa_hat_condition,
        kappa_hat_reduced,
        l_mass,
        c5,
        kappa_f,
        kappa0_conjugate,
        kappa0_displayed,
        kappa0,
        kappa1,
        kappa2,
        kappa,
        c_kappa: eps.powf(1.0 / d.gamma) / kappa,
        bad_cutoff_factor: cutoff,
        dilation_factor_doubling: 10f64.powf(ps.doubling_exponent()),
        dilation_factor_conclusion: 10f64.powf(n + ps.p),
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> LedgerInputs {
        LedgerInputs {
            c_d: Some(3.0),
            c_nd: Some(2.0),
            ball_constant: Some(1.5),
            ..Default::default()
        }
    }

    #[test]
    fn c1_for_config_s() {
        let ps = ParameterSet::config_s();
        let hand = 16.0 / (0.6 * (1.0 / 1.2 - 0.5) * std::f64::consts::LN_2);
        assert!((c1_bound(&ps) - hand).abs() < 1e-9 * hand);
        assert!((c1_bound(&ps) - 115.4156).abs() < 1e-3);
    }

    #[test]
    fn kappa_hat_sits_on_the_boundary() {
        let l = constants_ledger(&ParameterSet::config_s(), &inputs()).unwrap();
        assert!(!l.kappa_hat_reduced);
        assert!((l.kappa_hat_condition - 0.5).abs() < 1e-12);
        assert!(l.kappa_f > 0.0 && l.kappa_f < 1.0);
    }

    #[test]
    fn kappa_tilde_with_unit_c3() {
        let ps = ParameterSet::config_s();
        let d = derive_exponents_unchecked(&ps);
        let l = constants_ledger(&ps, &inputs()).unwrap();
        let want = ps.eps.powf(2.0 / d.gamma - 2.0 / d.p_prime) / 2f64.powf(1.0 / d.gamma);
        assert!((l.kappa_tilde - want).abs() < 1e-15);
    }

    #[test]
    fn kappa_is_the_minimum_and_obeys_the_final_bound() {
        let l = constants_ledger(&ParameterSet::config_s(), &inputs()).unwrap();
        assert_eq!(l.kappa, l.kappa0.min(l.kappa1).min(l.kappa2));
        assert_eq!(l.bad_cutoff_factor, 160000.0);
        // p = 2 makes both forms of kappa0 coincide
        assert!((l.kappa0_conjugate - l.kappa0_displayed).abs() < 1e-15);
        assert!(l.kappa >= 0.1f64.powf(1.0 / 1.294117647) / l.c_kappa * (1.0 - 1e-12));
    }

    #[test]
    fn missing_measurement_is_an_error() {
        let mut i = inputs();
        i.c_nd = None;
        assert!(matches!(
            constants_ledger(&ParameterSet::config_s(), &i),
            Err(Error::Missing(_))
        ));
    }
}
