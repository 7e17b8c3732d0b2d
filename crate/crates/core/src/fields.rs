//! Pair kernels U, A, F, G, H built from grid functions, their nu-integrals on
//! the cell-pair grid, Gagliardo seminorms and the exit-time functionals.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{dist2, GridFunction, GridSpec, MAX_DIM};
use crate::measure::KernelKind;
use crate::numeric::Neumaier;
use crate::pairs::{near_code, PairRule};
use crate::params::{derive_exponents_unchecked, DerivedExponents, ParameterSet};
use crate::quadrature::{diagonal_ball_integral, QuadOptions};

/// x^e with exact shortcuts for the common integer and half exponents.
#[inline]
pub fn pow(x: f64, e: f64) -> f64 {
    if e == 1.0 {
        x
    } else if e == 2.0 {
        x * x
    } else if e == 0.5 {
        x.sqrt()
    } else if e == 0.0 {
        1.0
    } else {
        x.powf(e)
    }
}

/// Kernel values at one pair of points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairValues {
    pub u: f64,
    pub a: f64,
    pub g: f64,
    pub h: f64,
    pub f: f64,
}

/// Lazy evaluator for U, A, F, G, H with a(x,y) = (g(x) + g(y))/2.
#[derive(Debug, Clone)]
pub struct PairKernel {
    pub params: ParameterSet,
    pub derived: DerivedExponents,
    pub u: GridFunction,
    pub f: GridFunction,
    pub coeff_g: GridFunction,
}

impl PairKernel {
    pub fn new(
        params: ParameterSet,
        u: GridFunction,
        f: GridFunction,
        coeff_g: GridFunction,
    ) -> Result<Self> {
        if u.spec != f.spec || u.spec != coeff_g.spec {
            return Err(Error::Domain("u, f and g must share one grid".into()));
        }
        if u.spec.n != params.n {
            return Err(Error::Domain("grid dimension differs from n".into()));
        }
        if coeff_g
            .values
            .iter()
            .any(|&v| v < 0.0 || v > params.m_coeff)
        {
            return Err(Error::Domain(format!(
                "coefficient must lie in [0, {}]",
                params.m_coeff
            )));
        }
        Ok(PairKernel {
            derived: derive_exponents_unchecked(&params),
            params,
            u,
            f,
            coeff_g,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.u.spec
    }

    pub fn coefficient_vanishes(&self) -> bool {
        self.coeff_g.values.iter().all(|&v| v == 0.0)
    }

    /// All kernels from sampled values at distance r > 0.
    #[inline]
    pub fn values(&self, ux: f64, uy: f64, gx: f64, gy: f64, fx: f64, r: f64) -> PairValues {
        let ps = &self.params;
        let u = (ux - uy).abs() / pow(r, ps.s + ps.eps);
        let a = 0.5 * (gx + gy) * pow(r, ps.coefficient_exponent());
        let g = pow(u, ps.p) + a * pow(u, ps.q);
        let h = pow(g, (ps.p - 1.0) / ps.p);
        PairValues {
            u,
            a,
            g,
            h,
            f: fx.abs(),
        }
    }

    pub fn eval_all(&self, x: &[f64], y: &[f64]) -> Result<PairValues> {
        let r = dist2(x, y).sqrt();
        if r == 0.0 {
            return Err(Error::Diagonal("U/A/G/H"));
        }
        Ok(self.values(
            self.u.eval(x),
            self.u.eval(y),
            self.coeff_g.eval(x),
            self.coeff_g.eval(y),
            self.f.eval(x),
            r,
        ))
    }

    pub fn eval(&self, kind: KernelKind, x: &[f64], y: &[f64]) -> Result<f64> {
        if kind == KernelKind::F {
            return Ok(self.f.eval(x).abs());
        }
        if dist2(x, y) == 0.0 {
            return Err(Error::Diagonal(kind.name()));
        }
        let v = self.eval_all(x, y)?;
        Ok(match kind {
            KernelKind::U => v.u,
            KernelKind::A => v.a,
            KernelKind::G => v.g,
            KernelKind::H => v.h,
            KernelKind::F => unreachable!(),
        })
    }
}

/// Integrand `quantity^power`, optionally restricted to `{quantity > above}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integrand {
    pub quantity: KernelKind,
    pub power: f64,
    pub above: Option<f64>,
}

impl Integrand {
    pub fn new(quantity: KernelKind, power: f64) -> Self {
        Integrand {
            quantity,
            power,
            above: None,
        }
    }

    pub fn above(mut self, threshold: f64) -> Self {
        self.above = Some(threshold);
        self
    }

    #[inline]
    fn apply(&self, v: &PairValues) -> f64 {
        let q = match self.quantity {
            KernelKind::U => v.u,
            KernelKind::A => v.a,
            KernelKind::G => v.g,
            KernelKind::H => v.h,
            KernelKind::F => v.f,
        };
        match self.above {
            Some(t) if q <= t => 0.0,
            _ => pow(q, self.power),
        }
    }

    fn key(&self) -> (u8, u64, u64) {
        (
            self.quantity as u8,
            self.power.to_bits(),
            self.above.map(|v| v.to_bits()).unwrap_or(u64::MAX),
        )
    }
}

/// Kernel values at one quadrature sample of a cell pair.
#[derive(Debug, Clone, Copy)]
pub struct PairSample {
    pub ux: f64,
    pub uy: f64,
    pub gx: f64,
    pub gy: f64,
    pub fx: f64,
    pub r: f64,
}

type Cache = RwLock<HashMap<(u8, u64, u64), Arc<Vec<f64>>>>;

/// Integrals of pair kernels over unions of cell pairs, with per-cell-pair
/// matrices cached for the unrestricted integrands.
pub struct PairField {
    pub kernel: PairKernel,
    pub rule: Arc<PairRule>,
    /// nu(B(0,1) x B(0,1)), used for balls reaching outside the grid box.
    pub unit_ball_mass: f64,
    mass: Arc<Vec<f64>>,
    index: Vec<[i64; MAX_DIM]>,
    cache: Cache,
}

impl PairField {
    pub fn new(kernel: PairKernel) -> Result<Self> {
        let kappa = kernel.params.kernel_exponent();
        let rule = PairRule::new(kernel.spec(), kappa, &QuadOptions::near_table())?;
        PairField::with_rule(kernel, Arc::new(rule))
    }

    pub fn with_rule(kernel: PairKernel, rule: Arc<PairRule>) -> Result<Self> {
        let spec = kernel.spec().clone();
        if rule.cells != spec.cells || rule.n != spec.n || rule.h != spec.h {
            return Err(Error::Inconsistent(
                "pair rule built for another grid".into(),
            ));
        }
        let unit_ball_mass = diagonal_ball_integral(spec.n, 1.0, rule.kappa)?;
        let len = spec.len();
        let idx: Vec<[i64; MAX_DIM]> = (0..len).map(|i| spec.multi_index(i)).collect();
        let mass: Vec<f64> = (0..len)
            .into_par_iter()
            .flat_map_iter(|i| {
                let idx = &idx;
                let rule = &rule;
                (0..len).map(move |j| {
                    let mut d = [0i64; MAX_DIM];
                    for a in 0..spec.n {
                        d[a] = idx[j][a] - idx[i][a];
                    }
                    rule.pair_mass(&d[..spec.n])
                })
            })
            .collect();
        Ok(PairField {
            kernel,
            rule,
            unit_ball_mass,
            mass: Arc::new(mass),
            index: idx,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn spec(&self) -> &GridSpec {
        self.kernel.spec()
    }

    pub fn params(&self) -> &ParameterSet {
        &self.kernel.params
    }

    pub fn derived(&self) -> &DerivedExponents {
        &self.kernel.derived
    }

    pub fn mass_matrix(&self) -> Arc<Vec<f64>> {
        self.mass.clone()
    }

    /// Visits every quadrature sample of the cell pair (i, j).
    fn for_each_sample(&self, i: usize, j: usize, mut visit: impl FnMut(&PairSample, f64)) {
        let spec = self.spec();
        let n = spec.n;
        let ii = self.index[i];
        let jj = self.index[j];
        let mut d = [0i64; MAX_DIM];
        for a in 0..n {
            d[a] = jj[a] - ii[a];
        }
        let k = &self.kernel;
        match near_code(n, &d[..n]) {
            Some(code) => {
                let mut x = [0.0; MAX_DIM];
                let mut y = [0.0; MAX_DIM];
                for node in &self.rule.near[code].nodes {
                    for a in 0..n {
                        x[a] = spec.lo[a] + ii[a] as f64 * spec.h + node.x[a];
                        y[a] = x[a] + node.z[a];
                    }
                    let s = PairSample {
                        ux: k.u.eval(&x[..n]),
                        uy: k.u.eval(&y[..n]),
                        gx: k.coeff_g.eval(&x[..n]),
                        gy: k.coeff_g.eval(&y[..n]),
                        fx: k.f.eval(&x[..n]),
                        r: node.r,
                    };
                    visit(&s, node.w);
                }
            }
            None => {
                let r = spec.h * d[..n].iter().map(|v| (v * v) as f64).sum::<f64>().sqrt();
                let s = PairSample {
                    ux: k.u.values[i],
                    uy: k.u.values[j],
                    gx: k.coeff_g.values[i],
                    gy: k.coeff_g.values[j],
                    fx: k.f.values[i],
                    r,
                };
                visit(&s, self.rule.far_weight(&d[..n]));
            }
        }
    }

    /// Cell-pair integrals of `integrand`, row-major over (i, j).
    pub fn matrix(&self, integrand: &Integrand) -> Arc<Vec<f64>> {
        self.matrices(std::slice::from_ref(integrand))
            .pop()
            .expect("one integrand")
    }

    /// Cell-pair integrals of several integrands, computed in one pass over the
    /// quadrature samples. Unrestricted integrands are cached.
    pub fn matrices(&self, integrands: &[Integrand]) -> Vec<Arc<Vec<f64>>> {
        let mut out: Vec<Option<Arc<Vec<f64>>>> = vec![None; integrands.len()];
        let mut todo: Vec<(usize, Integrand)> = Vec::new();
        {
            let cache = self.cache.read().expect("cache lock");
            for (k, ig) in integrands.iter().enumerate() {
                if ig.quantity == KernelKind::F && ig.above.is_none() && ig.power == 0.0 {
                    out[k] = Some(self.mass.clone());
                } else if let Some(m) = cache.get(&ig.key()) {
                    out[k] = Some(m.clone());
                } else {
                    todo.push((k, *ig));
                }
            }
        }
        if !todo.is_empty() {
            let list: Vec<Integrand> = todo.iter().map(|(_, ig)| *ig).collect();
            let computed = self.compute_matrices(&list);
            let mut cache = self.cache.write().expect("cache lock");
            for ((k, ig), m) in todo.into_iter().zip(computed) {
                let m = Arc::new(m);
                if ig.above.is_none() {
                    cache.insert(ig.key(), m.clone());
                }
                out[k] = Some(m);
            }
        }
        out.into_iter().map(|m| m.expect("filled")).collect()
    }

    fn compute_matrices(&self, list: &[Integrand]) -> Vec<Vec<f64>> {
        let len = self.spec().len();
        let q = list.len();
        let rows: Vec<Vec<f64>> = (0..len)
            .into_par_iter()
            .map(|i| {
                let mut row = vec![0.0; q * len];
                for j in 0..len {
                    self.for_each_sample(i, j, |smp, w| {
                        if smp.r > 0.0 {
                            let v = self
                                .kernel
                                .values(smp.ux, smp.uy, smp.gx, smp.gy, smp.fx, smp.r);
                            for (k, ig) in list.iter().enumerate() {
                                row[k * len + j] += w * ig.apply(&v);
                            }
                        }
                    });
                }
                row
            })
            .collect();
        (0..q)
            .map(|k| {
                let mut m = Vec::with_capacity(len * len);
                for row in &rows {
                    m.extend_from_slice(&row[k * len..(k + 1) * len]);
                }
                m
            })
            .collect()
    }

    /// Integral of a custom pair function against a pair rule (possibly with
    /// another kernel exponent) over s1 x s2.
    pub fn integrate_custom(
        &self,
        rule: &PairRule,
        s1: &[usize],
        s2: &[usize],
        f: &(dyn Fn(&PairSample) -> f64 + Sync),
    ) -> f64 {
        let spec = self.spec();
        let n = spec.n;
        let k = &self.kernel;
        let rows: Vec<f64> = s1
            .par_iter()
            .map(|&i| {
                let ii = spec.multi_index(i);
                let mut acc = Neumaier::default();
                for &j in s2 {
                    let jj = spec.multi_index(j);
                    let mut d = [0i64; MAX_DIM];
                    for a in 0..n {
                        d[a] = jj[a] - ii[a];
                    }
                    match near_code(n, &d[..n]) {
                        Some(code) => {
                            let mut x = [0.0; MAX_DIM];
                            let mut y = [0.0; MAX_DIM];
                            for node in &rule.near[code].nodes {
                                if node.r == 0.0 {
                                    continue;
                                }
                                for a in 0..n {
                                    x[a] = spec.lo[a] + ii[a] as f64 * spec.h + node.x[a];
                                    y[a] = x[a] + node.z[a];
                                }
                                let s = PairSample {
                                    ux: k.u.eval(&x[..n]),
                                    uy: k.u.eval(&y[..n]),
                                    gx: k.coeff_g.eval(&x[..n]),
                                    gy: k.coeff_g.eval(&y[..n]),
                                    fx: k.f.eval(&x[..n]),
                                    r: node.r,
                                };
                                acc.add(node.w * f(&s));
                            }
                        }
                        None => {
                            let r =
                                spec.h * d[..n].iter().map(|v| (v * v) as f64).sum::<f64>().sqrt();
                            let s = PairSample {
                                ux: k.u.values[i],
                                uy: k.u.values[j],
                                gx: k.coeff_g.values[i],
                                gy: k.coeff_g.values[j],
                                fx: k.f.values[i],
                                r,
                            };
                            acc.add(rule.far_weight(&d[..n]) * f(&s));
                        }
                    }
                }
                acc.sum()
            })
            .collect();
        crate::numeric::fsum(&rows)
    }

    /// Sum of `mat` over s1 x s2.
    pub fn block_sum(&self, mat: &[f64], s1: &[usize], s2: &[usize]) -> f64 {
        let len = self.spec().len();
        let mut acc = Neumaier::default();
        for &i in s1 {
            let row = &mat[i * len..(i + 1) * len];
            let mut r = 0.0;
            for &j in s2 {
                r += row[j];
            }
            acc.add(r);
        }
        acc.sum()
    }

    /// (integral, mass) of `integrand` over s1 x s2.
    pub fn integrate(&self, integrand: &Integrand, s1: &[usize], s2: &[usize]) -> (f64, f64) {
        let mat = self.matrix(integrand);
        let value = self.block_sum(&mat, s1, s2);
        let mass = match integrand.above {
            None => self.block_sum(&self.mass, s1, s2),
            Some(t) => {
                let ind = Integrand {
                    quantity: integrand.quantity,
                    power: 0.0,
                    above: Some(t),
                };
                self.block_sum(&self.matrix(&ind), s1, s2)
            }
        };
        (value, mass)
    }

    /// nu-average of `integrand` over s1 x s2; a level set restricts the mass too.
    pub fn average(&self, integrand: &Integrand, s1: &[usize], s2: &[usize]) -> Result<f64> {
        let (v, m) = self.integrate(integrand, s1, s2);
        if m <= 0.0 {
            return Err(Error::ZeroMass);
        }
        Ok(v / m)
    }

    /// Whether the closed ball B(x, r) lies in the grid box.
    pub fn ball_inside(&self, x: &[f64], r: f64) -> bool {
        let spec = self.spec();
        let hi = spec.hi();
        (0..spec.n).all(|a| x[a] - r >= spec.lo[a] - 1e-12 && x[a] + r <= hi[a] + 1e-12)
    }

    /// For every radius, the sums of each matrix over B(x,r) x B(x,r) (cells by
    /// centre membership), computed in one sweep over cells sorted by distance.
    pub fn ball_sweep(&self, x: &[f64], radii: &[f64], mats: &[&[f64]]) -> Vec<Vec<f64>> {
        let spec = self.spec();
        let len = spec.len();
        let rmax = radii.iter().cloned().fold(0.0, f64::max);
        let mut order: Vec<(f64, usize)> = (0..len)
            .map(|i| (dist2(&spec.center(i)[..spec.n], x).sqrt(), i))
            .filter(|(d, _)| *d < rmax)
            .collect();
        order.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let mut sorted_r: Vec<(f64, usize)> = radii.iter().cloned().zip(0..).collect();
        sorted_r.sort_by(|a, b| a.partial_cmp(b).expect("finite radii"));
        let m = mats.len();
        let mut out = vec![vec![0.0; m]; radii.len()];
        let mut totals: Vec<Neumaier> = vec![Neumaier::default(); m];
        let mut next = 0;
        let mut taken: Vec<usize> = Vec::with_capacity(order.len());
        for &(d, c) in &order {
            while next < sorted_r.len() && sorted_r[next].0 <= d {
                for q in 0..m {
                    out[sorted_r[next].1][q] = totals[q].sum();
                }
                next += 1;
            }
            for (q, mat) in mats.iter().enumerate() {
                let row = &mat[c * len..(c + 1) * len];
                let mut acc = row[c];
                for &b in &taken {
                    acc += row[b] + mat[b * len + c];
                }
                totals[q].add(acc);
            }
            taken.push(c);
        }
        while next < sorted_r.len() {
            for q in 0..m {
                out[sorted_r[next].1][q] = totals[q].sum();
            }
            next += 1;
        }
        out
    }

    /// nu(B(x,r) x B(x,r)) in closed form.
    pub fn exact_ball_mass(&self, r: f64) -> f64 {
        self.unit_ball_mass * r.powf(self.params().doubling_exponent())
    }

    /// Ball mass used for averages: the discrete mass when the ball lies in
    /// the grid box, the closed form otherwise.
    pub fn ball_mass(&self, x: &[f64], r: f64, discrete: f64) -> f64 {
        if self.ball_inside(x, r) {
            discrete
        } else {
            self.exact_ball_mass(r)
        }
    }

    /// Cells of the region, for product cubes and balls.
    pub fn region_cells(
        &self,
        region: &crate::measure::RegionDescriptor,
    ) -> (Vec<usize>, Vec<usize>) {
        use crate::measure::RegionKind;
        let spec = self.spec();
        match &region.kind {
            RegionKind::DiagonalBall { center, radius } => {
                let c = spec.cells_in_ball(center, *radius);
                (c.clone(), c)
            }
            RegionKind::ProductCube { k1, k2 } => (
                spec.cells_in_cube(&k1.lo, k1.hi[0] - k1.lo[0]),
                spec.cells_in_cube(&k2.lo, k2.hi[0] - k2.lo[0]),
            ),
            RegionKind::ProductBall { c1, r1, c2, r2 } => {
                (spec.cells_in_ball(c1, *r1), spec.cells_in_ball(c2, *r2))
            }
        }
    }

    /// nu-average of kernel^power over a region, honouring its level-set restriction.
    pub fn nu_average(
        &self,
        kind: KernelKind,
        power: f64,
        region: &crate::measure::RegionDescriptor,
    ) -> Result<f64> {
        let (s1, s2) = self.region_cells(region);
        let mut integrand = Integrand::new(kind, power);
        if let Some(ls) = &region.level_set {
            if ls.kernel != kind {
                return Err(Error::Inconsistent(
                    "level set must restrict the averaged kernel".into(),
                ));
            }
            integrand = integrand.above(ls.above);
        }
        self.average(&integrand, &s1, &s2)
    }
}

/// Gagliardo double integral int_S int_S |u(x)-u(y)|^r / |x-y|^{n + order r}
/// over the cells `cells`, evaluated with a Lebesgue pair rule. When `rule` is
/// None a rule with kernel exponent n - min(r(1-order), n/2) is built.
pub fn gagliardo_seminorm(
    field: &PairField,
    sobolev_order: f64,
    r: f64,
    cells: &[usize],
    rule: Option<&PairRule>,
) -> Result<f64> {
    if !(sobolev_order > 0.0 && sobolev_order < 1.0) || !(r >= 1.0) {
        return Err(Error::Domain(format!(
            "Gagliardo seminorm needs 0 < order < 1 and r >= 1, got ({sobolev_order}, {r})"
        )));
    }
    let n = field.spec().n as f64;
    let lift = r * (1.0 - sobolev_order);
    let mu = lift.min(0.5 * n);
    let owned;
    let rule = match rule {
        Some(rl) if (rl.kappa - (n - mu)).abs() < 1e-14 => rl,
        _ => {
            owned = PairRule::new(field.spec(), n - mu, &QuadOptions::near_table())?;
            &owned
        }
    };
    let extra = lift - mu;
    let f = move |s: &PairSample| pow((s.ux - s.uy).abs() / s.r, r) * pow(s.r, extra);
    Ok(field.integrate_custom(rule, cells, cells, &f))
}

/// The energy int int P(x,y,u) dx dy over S x S written in Lebesgue form
/// |du|^p/|z|^{n+sp} + a |du|^q/|z|^{n+tq}, evaluated with a rule of kernel
/// exponent n - mu, mu = min((1-s)p, (1-t)q).
pub fn lebesgue_energy(field: &PairField, cells: &[usize]) -> Result<f64> {
    let ps = *field.params();
    let n = ps.nf();
    let mu = ((1.0 - ps.s) * ps.p).min((1.0 - ps.t) * ps.q).min(0.5 * n);
    let rule = PairRule::new(field.spec(), n - mu, &QuadOptions::near_table())?;
    let ep = (1.0 - ps.s) * ps.p - mu;
    let eq = (1.0 - ps.t) * ps.q - mu;
    let f = move |smp: &PairSample| {
        let slope = (smp.ux - smp.uy).abs() / smp.r;
        let a = 0.5 * (smp.gx + smp.gy);
        pow(slope, ps.p) * pow(smp.r, ep) + a * pow(slope, ps.q) * pow(smp.r, eq)
    };
    Ok(field.integrate_custom(&rule, cells, cells, &f))
}

/// Exit-time functionals at one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalValues {
    pub x: Vec<f64>,
    pub radius: f64,
    pub m_big: f64,
    pub psi_m: f64,
    pub psi_1: f64,
    pub upsilon0: f64,
    pub tail: f64,
    pub theta_big: f64,
    pub tail_k_max: usize,
    pub tail_remainder: f64,
    /// The first K_max + 1 tail terms.
    pub tail_terms: Vec<f64>,
}

/// Matrices used by the functionals, shared across sites.
pub struct FunctionalMatrices {
    pub h_pp: Arc<Vec<f64>>,
    pub h_gamma: Arc<Vec<f64>>,
    pub f_lower: Arc<Vec<f64>>,
    pub f_upsilon: Arc<Vec<f64>>,
    pub mass: Arc<Vec<f64>>,
}

impl PairField {
    pub fn functional_matrices(&self) -> FunctionalMatrices {
        let d = *self.derived();
        let delta_f = self.params().delta_f;
        let mut m = self
            .matrices(&[
                Integrand::new(KernelKind::H, d.p_prime),
                Integrand::new(KernelKind::H, d.gamma),
                Integrand::new(KernelKind::F, d.p_lower_s),
                Integrand::new(KernelKind::F, d.p_lower_s + delta_f),
            ])
            .into_iter();
        let mut next = || m.next().expect("four matrices");
        FunctionalMatrices {
            h_pp: next(),
            h_gamma: next(),
            f_lower: next(),
            f_upsilon: next(),
            mass: self.mass_matrix(),
        }
    }

    /// Index of the first dyadic dilation 2^k R whose ball contains the grid box.
    pub fn tail_k_max(&self, x: &[f64], radius: f64) -> usize {
        let reach = self.spec().farthest_corner(x);
        let mut k = 0usize;
        while radius * 2f64.powi(k as i32) <= reach {
            k += 1;
        }
        k
    }

    /// Psi_M, Upsilon_0, Tail and Theta at every radius of `radii` for one site.
    pub fn functionals_at(
        &self,
        mats: &FunctionalMatrices,
        x: &[f64],
        radii: &[f64],
        m_big: f64,
    ) -> Result<Vec<FunctionalValues>> {
        if !(m_big >= 1.0) {
            return Err(Error::Domain(format!("M must be >= 1, got {m_big}")));
        }
        if radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Domain("radii must be positive".into()));
        }
        let d = *self.derived();
        let ps = *self.params();
        let k_max: Vec<usize> = radii.iter().map(|&r| self.tail_k_max(x, r)).collect();
        let mut all_r: Vec<f64> = Vec::new();
        for (&r, &km) in radii.iter().zip(&k_max) {
            for k in 0..=km {
                all_r.push(r * 2f64.powi(k as i32));
            }
        }
        let sweep = self.ball_sweep(
            x,
            &all_r,
            &[
                &mats.h_pp,
                &mats.h_gamma,
                &mats.f_lower,
                &mats.f_upsilon,
                &mats.mass,
            ],
        );
        let rate = d.alpha_k_rate;
        let dexp = ps.doubling_exponent();
        let f_scale = 1.0 / ps.eps.powf(1.0 / d.p_lower_s - 1.0 / d.p_prime);
        let mut out = Vec::with_capacity(radii.len());
        let mut pos = 0;
        for (&r, &km) in radii.iter().zip(&k_max) {
            let mut terms = Vec::with_capacity(km + 1);
            let mut head = None;
            for k in 0..=km {
                let rk = all_r[pos + k];
                let s = &sweep[pos + k];
                let mass = self.ball_mass(x, rk, s[4]);
                if mass <= 0.0 {
                    return Err(Error::ZeroMass);
                }
                if k == 0 {
                    if !(s[4] > 0.0) {
                        return Err(Error::ZeroMass);
                    }
                    head = Some((s.clone(), mass));
                }
                let avg_g = s[1] / mass;
                terms.push(2f64.powf(-(k as f64) * rate) * avg_g.powf(1.0 / d.gamma));
            }
            let (s0, mass0) = head.expect("k = 0 always evaluated");
            // Beyond K_max the ball holds all of the grid box: the average
            // decays like (2^k R)^{-(n + eps p)/gamma} in closed form.
            let last = *terms.last().expect("at least one term");
            let ratio = 2f64.powf(-(rate + dexp / d.gamma));
            let remainder = last * ratio / (1.0 - ratio);
            let tail = crate::numeric::fsum(&terms) + remainder;
            let h_part = (s0[0] / mass0).powf(1.0 / d.p_prime);
            let f_part = mass0.powf(d.theta) * f_scale * (s0[2] / mass0).powf(1.0 / d.p_lower_s);
            let upsilon0 = (s0[3] / mass0).powf(1.0 / (d.p_lower_s + ps.delta_f));
            let psi_1 = h_part + f_part;
            out.push(FunctionalValues {
                x: x.to_vec(),
                radius: r,
                m_big,
                psi_m: h_part + m_big * f_part,
                psi_1,
                upsilon0,
                tail,
                theta_big: upsilon0 + tail + psi_1,
                tail_k_max: km,
                tail_remainder: remainder,
                tail_terms: terms,
            });
            pos += km + 1;
        }
        Ok(out)
    }

    pub fn functionals(&self, x: &[f64], radius: f64, m_big: f64) -> Result<FunctionalValues> {
        let mats = self.functional_matrices();
        Ok(self
            .functionals_at(&mats, x, &[radius], m_big)?
            .pop()
            .expect("one radius"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Catalog;

    fn field(u: Catalog, f: Catalog, g: Catalog, cells: usize) -> PairField {
        let spec = GridSpec::centered(2, 1.0, cells).unwrap();
        let k = PairKernel::new(
            ParameterSet::config_s(),
            u.sample(&spec).unwrap(),
            f.sample(&spec).unwrap(),
            g.sample(&spec).unwrap(),
        )
        .unwrap();
        PairField::new(k).unwrap()
    }

    #[test]
    fn pointwise_kernels() {
        let fl = field(
            Catalog::Bump,
            Catalog::Constant(0.0),
            Catalog::Constant(0.0),
            16,
        );
        let k = &fl.kernel;
        assert!(matches!(
            k.eval(KernelKind::U, &[0.1, 0.1], &[0.1, 0.1]),
            Err(Error::Diagonal(_))
        ));
        assert_eq!(
            k.eval(KernelKind::F, &[0.1, 0.1], &[0.1, 0.1]).unwrap(),
            0.0
        );
        // a = 0: G = U^p, H = U^{p-1}
        let v = k.eval_all(&[0.1, 0.2], &[-0.3, 0.05]).unwrap();
        assert!((v.g - v.u.powi(2)).abs() < 1e-15);
        assert!((v.h - v.u).abs() < 1e-15);
        // even symmetry of the bump at (+-0.25, 0)
        let sym = k.eval(KernelKind::U, &[0.25, 0.0], &[-0.25, 0.0]).unwrap();
        assert!(sym < 1e-14);
    }

    #[test]
    fn constant_kernel_average_is_exact() {
        let fl = field(
            Catalog::Bump,
            Catalog::Constant(2.0),
            Catalog::Constant(0.0),
            16,
        );
        let cells = fl.spec().cells_in_ball(&[0.0, 0.0], 0.5);
        let avg = fl
            .average(&Integrand::new(KernelKind::F, 1.5), &cells, &cells)
            .unwrap();
        assert!((avg - 2f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn sweep_matches_block_sums() {
        let fl = field(
            Catalog::TrigRandom(3),
            Catalog::Bump,
            Catalog::Constant(0.5),
            16,
        );
        let m = fl.matrix(&Integrand::new(KernelKind::H, 1.3));
        let fm = fl.matrix(&Integrand::new(KernelKind::F, 1.25));
        let x = [0.11, -0.2];
        let radii = [0.3, 0.7, 0.05];
        let sw = fl.ball_sweep(&x, &radii, &[&m, &fm]);
        for (k, &r) in radii.iter().enumerate() {
            let cells = fl.spec().cells_in_ball(&x, r);
            let direct = fl.block_sum(&m, &cells, &cells);
            let direct_f = fl.block_sum(&fm, &cells, &cells);
            assert!((sw[k][0] - direct).abs() <= 1e-12 * direct.abs().max(1e-300));
            assert!((sw[k][1] - direct_f).abs() <= 1e-12 * direct_f.abs().max(1e-300));
        }
    }

    #[test]
    fn constant_u_and_zero_f_give_zero_functionals() {
        let fl = field(
            Catalog::Constant(1.0),
            Catalog::Constant(0.0),
            Catalog::Constant(1.0),
            16,
        );
        let v = fl.functionals(&[0.0, 0.0], 0.25, 4.0).unwrap();
        for val in [v.psi_m, v.upsilon0, v.tail, v.theta_big] {
            assert!(val.abs() < 1e-12, "{v:?}");
        }
    }

    #[test]
    fn energy_identity_between_routes() {
        let fl = field(Catalog::Bump, Catalog::Bump, Catalog::Constant(0.5), 32);
        let all: Vec<usize> = (0..fl.spec().len()).collect();
        let g = fl.block_sum(&fl.matrix(&Integrand::new(KernelKind::G, 1.0)), &all, &all);
        let e = lebesgue_energy(&fl, &all).unwrap();
        assert!((g - e).abs() < 0.02 * e, "nu route {g}, Lebesgue route {e}");
    }
}
