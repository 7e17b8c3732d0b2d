//! Quadrature for integrals of |x-y|^{-kappa} over products of boxes and balls.
//!
//! A product integral over K1 x K2 is reduced to the difference variable
//! z = y - x, where the x-integral collapses into the per-axis overlap length
//! (the covariogram). The remaining singular integral over z is split at the
//! covariogram kinks and at the origin; boxes cornered at the origin use a
//! Duffy map with a radial substitution that absorbs the singular power.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadOptions {
    /// Gauss-Legendre points per axis.
    pub order: usize,
    /// Maximal graded-subdivision depth for boxes close to the singularity.
    pub max_depth: usize,
    /// A box is split while dist(0, box) < split_ratio * diam(box).
    pub split_ratio: f64,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions {
            order: 10,
            max_depth: 12,
            split_ratio: 1.0,
        }
    }
}

impl QuadOptions {
    /// Cheaper rule used for the per-cell near-diagonal node tables.
    pub fn near_table() -> Self {
        QuadOptions {
            order: 5,
            max_depth: 6,
            split_ratio: 0.75,
        }
    }
}

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(m >= 1);
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    let mf = m as f64;
    for i in 0..m.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (mf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=m {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pm = if m == 1 { z } else { p1 };
            let pm1 = if m == 1 { 1.0 } else { p0 };
            dp = mf * (z * pm - pm1) / (z * z - 1.0);
            let dz = pm / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let wt = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = 0.5 * (1.0 - z);
        x[m - 1 - i] = 0.5 * (1.0 + z);
        w[i] = 0.5 * wt;
        w[m - 1 - i] = 0.5 * wt;
    }
    (x, w)
}

/// Axis-aligned box given by its lower and upper corners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Aabb {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Aabb { lo, hi }
    }

    pub fn cube(lo: &[f64], side: f64) -> Self {
        Aabb {
            lo: lo.to_vec(),
            hi: lo.iter().map(|a| a + side).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| (b - a).max(0.0))
            .product()
    }

    /// Euclidean distance between closed boxes via per-axis gaps.
    pub fn distance(&self, other: &Aabb) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let gap = (other.lo[i] - self.hi[i])
                .max(self.lo[i] - other.hi[i])
                .max(0.0);
            acc += gap * gap;
        }
        acc.sqrt()
    }

    /// Largest distance between points of the two closed boxes.
    pub fn max_distance(&self, other: &Aabb) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let d = (other.hi[i] - self.lo[i])
                .abs()
                .max((self.hi[i] - other.lo[i]).abs());
            acc += d * d;
        }
        acc.sqrt()
    }
}

/// Surface measure of the unit sphere in R^n.
pub fn sphere_area(n: usize) -> f64 {
    let h = n as f64 / 2.0;
    2.0 * std::f64::consts::PI.powf(h) / gamma(h)
}

/// Volume of the unit ball in R^n.
pub fn ball_volume(n: usize) -> f64 {
    let h = n as f64 / 2.0;
    std::f64::consts::PI.powf(h) / gamma(h + 1.0)
}

/// Volume of {x in B(0,r) : x_1 > a}.
pub fn ball_cap(n: usize, r: f64, a: f64) -> f64 {
    let full = ball_volume(n) * r.powi(n as i32);
    if a >= r {
        return 0.0;
    }
    if a <= -r {
        return full;
    }
    let x = (1.0 - (a / r).powi(2)).clamp(0.0, 1.0);
    let half_cap = 0.5 * full * beta_reg((n as f64 + 1.0) / 2.0, 0.5, x);
    if a >= 0.0 {
        half_cap
    } else {
        full - half_cap
    }
}

/// Volume of B(0,r1) intersected with B(d,r2) for |d| = dist.
pub fn lens_volume(n: usize, r1: f64, r2: f64, dist: f64) -> f64 {
    if dist >= r1 + r2 {
        return 0.0;
    }
    let rmin = r1.min(r2);
    if dist <= (r1 - r2).abs() {
        return ball_volume(n) * rmin.powi(n as i32);
    }
    let a1 = (dist * dist + r1 * r1 - r2 * r2) / (2.0 * dist);
    let a2 = dist - a1;
    ball_cap(n, r1, a1) + ball_cap(n, r2, a2)
}

fn check_kappa(n: usize, kappa: f64) -> Result<f64> {
    let beta = n as f64 - kappa;
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Domain(format!(
            "kernel exponent {kappa} is not locally integrable in dimension {n}"
        )));
    }
    Ok(beta)
}

/// Splits the support of the covariogram at its kinks and at the origin.
fn axis_breaks(alo: f64, ahi: f64, blo: f64, bhi: f64) -> Vec<f64> {
    let lo = blo - ahi;
    let hi = bhi - alo;
    let scale = (hi - lo).abs().max(1e-300);
    let mut pts = vec![lo, blo - alo, bhi - ahi, hi];
    if lo < 0.0 && hi > 0.0 {
        pts.push(0.0);
    }
    for p in pts.iter_mut() {
        if p.abs() < 1e-13 * scale {
            *p = 0.0;
        }
    }
    pts.retain(|p| *p >= lo && *p <= hi);
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-13 * scale);
    pts
}

fn covariogram(k1: &Aabb, k2: &Aabb, z: &[f64]) -> f64 {
    let mut prod = 1.0;
    for i in 0..z.len() {
        let len = (k1.hi[i].min(k2.hi[i] - z[i]) - k1.lo[i].max(k2.lo[i] - z[i])).max(0.0);
        prod *= len;
        if prod == 0.0 {
            return 0.0;
        }
    }
    prod
}

struct Integrator<'a> {
    k1: &'a Aabb,
    k2: &'a Aabb,
    kappa: f64,
    beta: f64,
    opts: QuadOptions,
    gx: Vec<f64>,
    gw: Vec<f64>,
}

impl<'a> Integrator<'a> {
    fn run(&self, emit: &mut dyn FnMut(&[f64], f64)) {
        let n = self.k1.dim();
        let breaks: Vec<Vec<f64>> = (0..n)
            .map(|i| axis_breaks(self.k1.lo[i], self.k1.hi[i], self.k2.lo[i], self.k2.hi[i]))
            .collect();
        if breaks.iter().any(|b| b.len() < 2) {
            return;
        }
        let counts: Vec<usize> = breaks.iter().map(|b| b.len() - 1).collect();
        let mut idx = vec![0usize; n];
        loop {
            let lo: Vec<f64> = (0..n).map(|i| breaks[i][idx[i]]).collect();
            let hi: Vec<f64> = (0..n).map(|i| breaks[i][idx[i] + 1]).collect();
            self.sub_box(&lo, &hi, 0, emit);
            let mut ax = 0;
            loop {
                if ax == n {
                    return;
                }
                idx[ax] += 1;
                if idx[ax] < counts[ax] {
                    break;
                }
                idx[ax] = 0;
                ax += 1;
            }
        }
    }

    fn sub_box(&self, lo: &[f64], hi: &[f64], depth: usize, emit: &mut dyn FnMut(&[f64], f64)) {
        let n = lo.len();
        if lo.iter().zip(hi).any(|(a, b)| b <= a) {
            return;
        }
        let corner = lo.iter().zip(hi).all(|(a, b)| *a == 0.0 || *b == 0.0);
        if corner {
            self.duffy(lo, hi, emit);
            return;
        }
        let mut d2 = 0.0;
        let mut diam2 = 0.0;
        for i in 0..n {
            let g = lo[i].max(-hi[i]).max(0.0);
            d2 += g * g;
            diam2 += (hi[i] - lo[i]).powi(2);
        }
        if depth < self.opts.max_depth && d2 < self.opts.split_ratio.powi(2) * diam2 {
            let mid: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
            for mask in 0..(1usize << n) {
                let clo: Vec<f64> = (0..n)
                    .map(|i| if mask >> i & 1 == 0 { lo[i] } else { mid[i] })
                    .collect();
                let chi: Vec<f64> = (0..n)
                    .map(|i| if mask >> i & 1 == 0 { mid[i] } else { hi[i] })
                    .collect();
                self.sub_box(&clo, &chi, depth + 1, emit);
            }
            return;
        }
        self.tensor(lo, hi, emit);
    }

    fn tensor(&self, lo: &[f64], hi: &[f64], emit: &mut dyn FnMut(&[f64], f64)) {
        let n = lo.len();
        let m = self.gx.len();
        let mut idx = vec![0usize; n];
        let mut z = vec![0.0; n];
        let vol: f64 = lo.iter().zip(hi).map(|(a, b)| b - a).product();
        loop {
            let mut w = vol;
            for i in 0..n {
                z[i] = lo[i] + (hi[i] - lo[i]) * self.gx[idx[i]];
                w *= self.gw[idx[i]];
            }
            let r2: f64 = z.iter().map(|v| v * v).sum();
            let val = covariogram(self.k1, self.k2, &z) * r2.powf(-0.5 * self.kappa);
            if val > 0.0 {
                emit(&z, w * val);
            }
            if !advance(&mut idx, m) {
                return;
            }
        }
    }

    /// Box with a corner at the origin: split into n pyramids along the dominant
    /// axis, then substitute t = w^{1/beta} to absorb t^{n-1-kappa}.
    fn duffy(&self, lo: &[f64], hi: &[f64], emit: &mut dyn FnMut(&[f64], f64)) {
        let n = lo.len();
        let m = self.gx.len();
        // z_i = sign_i * a_i * u_i with u in [0,1]^n
        let sign: Vec<f64> = (0..n)
            .map(|i| if hi[i] > 0.0 { 1.0 } else { -1.0 })
            .collect();
        let side: Vec<f64> = (0..n).map(|i| hi[i] - lo[i]).collect();
        let jac: f64 = side.iter().product();
        let mut z = vec![0.0; n];
        for k in 0..n {
            // idx[0] runs over w, idx[1..] over the n-1 free directions
            let mut idx = vec![0usize; n];
            loop {
                let wq = self.gx[idx[0]];
                let t = wq.powf(1.0 / self.beta);
                let mut weight = jac / self.beta * self.gw[idx[0]];
                let mut rho2 = side[k] * side[k];
                let mut slot = 1;
                for j in 0..n {
                    if j == k {
                        continue;
                    }
                    let v = self.gx[idx[slot]];
                    weight *= self.gw[idx[slot]];
                    rho2 += (side[j] * v).powi(2);
                    z[j] = sign[j] * side[j] * t * v;
                    slot += 1;
                }
                z[k] = sign[k] * side[k] * t;
                let val = covariogram(self.k1, self.k2, &z) * rho2.powf(-0.5 * self.kappa);
                if val > 0.0 && t > 0.0 {
                    emit(&z, weight * val);
                }
                if !advance(&mut idx, m) {
                    break;
                }
            }
        }
    }
}

fn advance(idx: &mut [usize], m: usize) -> bool {
    for v in idx.iter_mut() {
        *v += 1;
        if *v < m {
            return true;
        }
        *v = 0;
    }
    false
}

/// Integral of |x-y|^{-kappa} over K1 x K2, streaming every quadrature node
/// in the difference variable to `emit`.
pub fn box_pair_nodes(
    k1: &Aabb,
    k2: &Aabb,
    kappa: f64,
    opts: &QuadOptions,
    emit: &mut dyn FnMut(&[f64], f64),
) -> Result<()> {
    let n = k1.dim();
    if k2.dim() != n {
        return Err(Error::Domain("box dimensions differ".into()));
    }
    let beta = check_kappa(n, kappa)?;
    for b in [k1, k2] {
        for i in 0..n {
            if !(b.hi[i] >= b.lo[i]) || !b.lo[i].is_finite() || !b.hi[i].is_finite() {
                return Err(Error::Domain(format!("degenerate box {b:?}")));
            }
        }
    }
    if k1.volume() == 0.0 || k2.volume() == 0.0 {
        return Ok(());
    }
    let scale = k1.max_distance(k2);
    let min_side = k1
        .lo
        .iter()
        .zip(&k1.hi)
        .chain(k2.lo.iter().zip(&k2.hi))
        .map(|(a, b)| b - a)
        .fold(f64::INFINITY, f64::min);
    if min_side < 1e-13 * scale {
        return Err(Error::Unresolvable(format!(
            "cell side {min_side} below floating resolution at scale {scale}"
        )));
    }
    let (gx, gw) = gauss_legendre(opts.order);
    let it = Integrator {
        k1,
        k2,
        kappa,
        beta,
        opts: *opts,
        gx,
        gw,
    };
    it.run(emit);
    Ok(())
}

/// nu(K1 x K2) for the kernel |x-y|^{-kappa}, summed with compensation.
pub fn box_pair_integral(k1: &Aabb, k2: &Aabb, kappa: f64, opts: &QuadOptions) -> Result<f64> {
    let mut acc = crate::numeric::Neumaier::default();
    box_pair_nodes(k1, k2, kappa, opts, &mut |_, w| acc.add(w))?;
    Ok(acc.sum())
}

/// Composite Gauss rule on [0,1] with `panels` equal panels.
fn composite(panels: usize, order: usize) -> Vec<(f64, f64)> {
    let (gx, gw) = gauss_legendre(order);
    let h = 1.0 / panels as f64;
    let mut out = Vec::with_capacity(panels * order);
    for p in 0..panels {
        for (x, w) in gx.iter().zip(&gw) {
            out.push(((p as f64 + x) * h, w * h));
        }
    }
    out
}

/// nu(B(c,R) x B(c,R)) through the radial lens formula
/// S_{n-1} int_0^{2R} lens(rho) rho^{n-1-kappa} d rho.
pub fn diagonal_ball_integral(n: usize, radius: f64, kappa: f64) -> Result<f64> {
    let beta = check_kappa(n, kappa)?;
    if !(radius > 0.0) {
        return Err(Error::Domain(format!("radius {radius} must be positive")));
    }
    let diam = 2.0 * radius;
    // rho = diam * w^{1/beta}; the lens vanishes like (1-rho/diam)^{(n+1)/2},
    // so the last panels are graded towards w = 1.
    let mut acc = crate::numeric::Neumaier::default();
    let base = composite(32, 12);
    for &(x, wt) in &base {
        // grading map w = 1 - (1-x)^2 concentrates nodes near w = 1
        let w = 1.0 - (1.0 - x) * (1.0 - x);
        let dw = 2.0 * (1.0 - x);
        let rho = diam * w.powf(1.0 / beta);
        acc.add(wt * dw * lens_volume(n, radius, radius, rho));
    }
    Ok(acc.sum() * sphere_area(n) * diam.powf(beta) / beta)
}

/// nu(B(c1,r1) x B(c2,r2)): radial integration around z = 0 of the lens
/// volume |B(c1,r1) cap B(c2 - z, r2)|, reduced to one polar angle.
pub fn product_ball_integral(
    n: usize,
    c1: &[f64],
    r1: f64,
    c2: &[f64],
    r2: f64,
    kappa: f64,
) -> Result<f64> {
    let beta = check_kappa(n, kappa)?;
    if !(r1 > 0.0 && r2 > 0.0) {
        return Err(Error::Domain("radii must be positive".into()));
    }
    let d: f64 = c1
        .iter()
        .zip(c2)
        .map(|(a, b)| (b - a).powi(2))
        .sum::<f64>()
        .sqrt();
    let reach = r1 + r2;
    let rho_max = d + reach;
    let angle_rule = composite(48, 8);
    let radial_rule = composite(96, 8);
    let lens_at = |rho: f64, cosphi: f64| {
        let sep2 = (rho * rho + d * d - 2.0 * rho * d * cosphi).max(0.0);
        lens_volume(n, r1, r2, sep2.sqrt())
    };
    let angular = |rho: f64| -> f64 {
        if d == 0.0 || n == 1 {
            if n == 1 {
                return lens_at(rho, 1.0) + lens_at(rho, -1.0);
            }
            return sphere_area(n) * lens_at(rho, 1.0);
        }
        let mut acc = 0.0;
        for &(x, w) in angle_rule.iter() {
            let phi = std::f64::consts::PI * x;
            acc +=
                w * std::f64::consts::PI * lens_at(rho, phi.cos()) * phi.sin().powi(n as i32 - 2);
        }
        acc * sphere_area(n - 1)
    };
    let mut acc = crate::numeric::Neumaier::default();
    for &(x, wt) in radial_rule.iter() {
        let rho = rho_max * x.powf(1.0 / beta);
        acc.add(wt * angular(rho));
    }
    Ok(acc.sum() * rho_max.powf(beta) / beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_integrates_polynomials() {
        let (x, w) = gauss_legendre(6);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(11)).sum();
        assert!((s - 1.0 / 12.0).abs() < 1e-15);
        let (x, w) = gauss_legendre(1);
        assert_eq!((x[0], w[0]), (0.5, 1.0));
    }

    #[test]
    fn smooth_kernel_matches_volume() {
        // kappa = 0: nu(K1 x K2) = |K1||K2|
        let k1 = Aabb::new(vec![0.0, 0.0], vec![1.0, 0.5]);
        let k2 = Aabb::new(vec![0.3, -0.2], vec![0.8, 1.0]);
        let v = box_pair_integral(&k1, &k2, 0.0, &QuadOptions::default()).unwrap();
        assert!((v - 0.5 * 0.6).abs() < 1e-12, "{v}");
    }

    #[test]
    fn one_dimensional_closed_form() {
        // int_0^1 int_0^1 |x-y|^{-k} = 2/((1-k)(2-k))
        let k = 0.6;
        let b = Aabb::new(vec![0.0], vec![1.0]);
        let v = box_pair_integral(&b, &b, k, &QuadOptions::default()).unwrap();
        assert!(
            (v / (2.0 / ((1.0 - k) * (2.0 - k))) - 1.0).abs() < 1e-7,
            "{v}"
        );
    }

    #[test]
    fn lens_limits() {
        assert!((lens_volume(2, 1.0, 1.0, 0.0) - std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(lens_volume(2, 1.0, 1.0, 2.0), 0.0);
        // closed form for two unit discs at distance 1
        let exact = 2.0 * (0.5f64).acos() - 0.5 * 3f64.sqrt();
        assert!((lens_volume(2, 1.0, 1.0, 1.0) - exact).abs() < 1e-12);
        assert!((lens_volume(1, 1.0, 1.0, 0.5) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn ball_routes_agree() {
        let kappa = 1.8;
        let a = diagonal_ball_integral(2, 0.7, kappa).unwrap();
        let b = product_ball_integral(2, &[0.0, 0.0], 0.7, &[0.0, 0.0], 0.7, kappa).unwrap();
        assert!((a / b - 1.0).abs() < 1e-6, "{a} {b}");
    }
}
