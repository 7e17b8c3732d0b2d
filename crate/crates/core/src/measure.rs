//! The pair measure d nu = |x-y|^{-(n - eps p)} dx dy on R^n x R^n.

use std::collections::HashMap;
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::quadrature::{
    ball_volume, box_pair_integral, diagonal_ball_integral, product_ball_integral, sphere_area,
    Aabb, QuadOptions,
};

/// Which pair quantity a level-set restriction refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    U,
    A,
    F,
    G,
    H,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::U => "U",
            KernelKind::A => "A",
            KernelKind::F => "F",
            KernelKind::G => "G",
            KernelKind::H => "H",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSet {
    pub kernel: KernelKind,
    /// Keeps pairs where the kernel is strictly above this value.
    pub above: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RegionKind {
    /// B(center, radius) x B(center, radius).
    DiagonalBall {
        center: Vec<f64>,
        radius: f64,
    },
    ProductCube {
        k1: Aabb,
        k2: Aabb,
    },
    ProductBall {
        c1: Vec<f64>,
        r1: f64,
        c2: Vec<f64>,
        r2: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDescriptor {
    pub kind: RegionKind,
    pub level_set: Option<LevelSet>,
}

impl RegionDescriptor {
    pub fn diagonal_ball(center: &[f64], radius: f64) -> Self {
        RegionDescriptor {
            kind: RegionKind::DiagonalBall {
                center: center.to_vec(),
                radius,
            },
            level_set: None,
        }
    }

    pub fn product_cube(k1: Aabb, k2: Aabb) -> Self {
        RegionDescriptor {
            kind: RegionKind::ProductCube { k1, k2 },
            level_set: None,
        }
    }

    pub fn product_ball(c1: &[f64], r1: f64, c2: &[f64], r2: f64) -> Self {
        RegionDescriptor {
            kind: RegionKind::ProductBall {
                c1: c1.to_vec(),
                r1,
                c2: c2.to_vec(),
                r2,
            },
            level_set: None,
        }
    }

    pub fn with_level_set(mut self, kernel: KernelKind, above: f64) -> Self {
        self.level_set = Some(LevelSet { kernel, above });
        self
    }

    fn cache_key(&self) -> String {
        format!("{:?}", self.kind)
    }
}

/// Deterministic evaluator of nu with a concurrent-read mass cache.
#[derive(Debug)]
pub struct NuMeasure {
    pub params: ParameterSet,
    pub quad: QuadOptions,
    cache: RwLock<HashMap<String, f64>>,
}

impl Clone for NuMeasure {
    fn clone(&self) -> Self {
        NuMeasure::with_options(self.params, self.quad).expect("validated on construction")
    }
}

impl NuMeasure {
    pub fn new(params: ParameterSet) -> Result<Self> {
        Self::with_options(params, QuadOptions::default())
    }

    pub fn with_options(params: ParameterSet, quad: QuadOptions) -> Result<Self> {
        let kappa = params.kernel_exponent();
        if !(kappa > 0.0 && kappa < params.nf()) {
            return Err(Error::Domain(format!(
                "kernel exponent n - eps p = {kappa} must lie in (0, n)"
            )));
        }
        if quad.order == 0 {
            return Err(Error::Domain("quadrature order must be >= 1".into()));
        }
        Ok(NuMeasure {
            params,
            quad,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn dim(&self) -> usize {
        self.params.n
    }

    pub fn kappa(&self) -> f64 {
        self.params.kernel_exponent()
    }

    /// Deterministic mass of a region.
    pub fn mass(&self, region: &RegionDescriptor) -> Result<f64> {
        if region.level_set.is_some() {
            return Err(Error::Domain(
                "level-set restricted masses need an attached pair kernel".into(),
            ));
        }
        let key = region.cache_key();
        if let Some(v) = self.cache.read().unwrap().get(&key) {
            return Ok(*v);
        }
        let n = self.dim();
        let kappa = self.kappa();
        let v = match &region.kind {
            RegionKind::DiagonalBall { center, radius } => {
                self.check_point(center)?;
                diagonal_ball_integral(n, *radius, kappa)?
            }
            RegionKind::ProductCube { k1, k2 } => {
                if k1.dim() != n || k2.dim() != n {
                    return Err(Error::Domain("cube dimension mismatch".into()));
                }
                box_pair_integral(k1, k2, kappa, &self.quad)?
            }
            RegionKind::ProductBall { c1, r1, c2, r2 } => {
                self.check_point(c1)?;
                self.check_point(c2)?;
                product_ball_integral(n, c1, *r1, c2, *r2, kappa)?
            }
        };
        let v = v.max(0.0);
        self.cache.write().unwrap().insert(key, v);
        Ok(v)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("bad point {x:?}")));
        }
        Ok(())
    }

    /// Mass of the diagonal ball centred anywhere (translation invariant).
    pub fn ball_mass(&self, radius: f64) -> Result<f64> {
        let zero = vec![0.0; self.dim()];
        self.mass(&RegionDescriptor::diagonal_ball(&zero, radius))
    }

    /// c(n, p, eps) = eps * nu(B(0,1) x B(0,1)).
    pub fn ball_constant(&self) -> Result<f64> {
        Ok(self.params.eps * self.ball_mass(1.0)?)
    }

    /// Measured and exact doubling ratios nu(B_R)/nu(B_r).
    pub fn doubling_check(&self, x: &[f64], big: f64, small: f64) -> Result<(f64, f64)> {
        if !(small > 0.0) || big < small {
            return Err(Error::Domain(format!(
                "need R >= r > 0, got ({big}, {small})"
            )));
        }
        let a = self.mass(&RegionDescriptor::diagonal_ball(x, big))?;
        let b = self.mass(&RegionDescriptor::diagonal_ball(x, small))?;
        let exact = (big / small).powf(self.params.doubling_exponent());
        Ok((a / b, exact))
    }

    /// nu(B(x,R) x B(x,R)) / nu(K1 x K2) for cubes of side a_frac R inside B(x,R).
    pub fn cube_ball_comparison(
        &self,
        x: &[f64],
        radius: f64,
        a_frac: f64,
        k1: &Aabb,
        k2: &Aabb,
    ) -> Result<f64> {
        if !(a_frac > 0.0 && a_frac <= 1.0) {
            return Err(Error::Domain(format!(
                "a_frac = {a_frac} must lie in (0, 1]"
            )));
        }
        let side = a_frac * radius;
        for k in [k1, k2] {
            for i in 0..self.dim() {
                let s = k.hi[i] - k.lo[i];
                if (s - side).abs() > 1e-9 * side {
                    return Err(Error::Containment(format!(
                        "cube side {s} differs from a_frac * R = {side}"
                    )));
                }
            }
            if !cube_in_ball(k, x, radius) {
                return Err(Error::Containment(format!(
                    "{k:?} not inside B({x:?}, {radius})"
                )));
            }
        }
        let ball = self.mass(&RegionDescriptor::diagonal_ball(x, radius))?;
        let cubes = self.mass(&RegionDescriptor::product_cube(k1.clone(), k2.clone()))?;
        Ok(ball / cubes)
    }

    /// Largest value of ratio * a^{2n} * eps over a sweep of cube placements
    /// inside the unit ball, i.e. the empirical C_d.
    pub fn fit_ball_cube_constant(&self, a_fracs: &[f64], positions: usize) -> Result<f64> {
        let n = self.dim();
        let x = vec![0.0; n];
        let mut best: f64 = 0.0;
        for &a in a_fracs {
            let placements = cube_placements(n, 1.0, a, positions);
            if placements.is_empty() {
                continue;
            }
            for k1 in &placements {
                for k2 in &placements {
                    let r = self.cube_ball_comparison(&x, 1.0, a, k1, k2)?;
                    best = best.max(r * a.powi(2 * n as i32) * self.params.eps);
                }
            }
        }
        if best == 0.0 {
            return Err(Error::Domain("no admissible placement in the sweep".into()));
        }
        Ok(best)
    }

    /// Seeded Monte Carlo estimate of nu(region) with its standard error.
    pub fn mc_oracle(
        &self,
        region: &RegionDescriptor,
        samples: usize,
        seed: u64,
    ) -> Result<(f64, f64)> {
        if samples < 10_000 {
            return Err(Error::Domain(format!("need >= 1e4 samples, got {samples}")));
        }
        if region.level_set.is_some() {
            return Err(Error::Domain("oracle does not support level sets".into()));
        }
        let n = self.dim();
        let kappa = self.kappa();
        let beta = n as f64 - kappa;
        let (a, b) = region_sets(&region.kind);
        let gap = a.bounding().distance(&b.bounding());
        let reach = a.bounding().max_distance(&b.bounding());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0; n];
        let mut y = vec![0.0; n];
        let (mut s1, mut s2) = (0.0, 0.0);
        if gap > 0.0 {
            // bounded integrand: plain product sampling
            let vol = a.volume() * b.volume();
            for _ in 0..samples {
                a.sample(&mut rng, &mut x);
                b.sample(&mut rng, &mut y);
                let r2: f64 = x.iter().zip(&y).map(|(u, v)| (u - v).powi(2)).sum();
                let v = vol * r2.powf(-0.5 * kappa);
                s1 += v;
                s2 += v * v;
            }
        } else {
            // importance sampling of z = y - x with density proportional to |z|^{-kappa}
            let norm = sphere_area(n) * reach.powf(beta) / beta;
            let va = a.volume();
            let mut dir = vec![0.0; n];
            for _ in 0..samples {
                a.sample(&mut rng, &mut x);
                let rho = reach * rng.gen::<f64>().powf(1.0 / beta);
                unit_direction(&mut rng, &mut dir);
                for i in 0..n {
                    y[i] = x[i] + rho * dir[i];
                }
                let v = if b.contains(&y) { va * norm } else { 0.0 };
                s1 += v;
                s2 += v * v;
            }
        }
        let nf = samples as f64;
        let mean = s1 / nf;
        let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
        Ok((mean, (var / nf).sqrt()))
    }
}

/// Whether the closed cube lies in the closed ball.
pub fn cube_in_ball(k: &Aabb, x: &[f64], radius: f64) -> bool {
    let mut far = 0.0;
    for i in 0..k.dim() {
        let d = (k.lo[i] - x[i]).abs().max((k.hi[i] - x[i]).abs());
        far += d * d;
    }
    far.sqrt() <= radius * (1.0 + 1e-12)
}

/// Cubes of side a*R whose lower corners lie on a lattice and fit in B(0,R).
pub fn cube_placements(n: usize, radius: f64, a: f64, positions: usize) -> Vec<Aabb> {
    let side = a * radius;
    let span = 2.0 * radius - side;
    let steps = positions.max(1);
    let mut out = Vec::new();
    let mut idx = vec![0usize; n];
    loop {
        let lo: Vec<f64> = idx
            .iter()
            .map(|&i| {
                if steps == 1 {
                    -0.5 * side
                } else {
                    -radius + span * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let k = Aabb::cube(&lo, side);
        if cube_in_ball(&k, &vec![0.0; n], radius) {
            out.push(k);
        }
        let mut ax = 0;
        loop {
            if ax == n {
                return out;
            }
            idx[ax] += 1;
            if idx[ax] < steps {
                break;
            }
            idx[ax] = 0;
            ax += 1;
        }
    }
}

enum SampleSet {
    Box(Aabb),
    Ball(Vec<f64>, f64),
}

impl SampleSet {
    fn bounding(&self) -> Aabb {
        match self {
            SampleSet::Box(b) => b.clone(),
            SampleSet::Ball(c, r) => Aabb::new(
                c.iter().map(|v| v - r).collect(),
                c.iter().map(|v| v + r).collect(),
            ),
        }
    }

    fn volume(&self) -> f64 {
        match self {
            SampleSet::Box(b) => b.volume(),
            SampleSet::Ball(c, r) => ball_volume(c.len()) * r.powi(c.len() as i32),
        }
    }

    fn contains(&self, y: &[f64]) -> bool {
        match self {
            SampleSet::Box(b) => y
                .iter()
                .enumerate()
                .all(|(i, v)| *v >= b.lo[i] && *v < b.hi[i]),
            SampleSet::Ball(c, r) => {
                y.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() < r * r
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            SampleSet::Box(b) => {
                for i in 0..out.len() {
                    out[i] = b.lo[i] + (b.hi[i] - b.lo[i]) * rng.gen::<f64>();
                }
            }
            SampleSet::Ball(c, r) => loop {
                let mut s = 0.0;
                for i in 0..out.len() {
                    let v: f64 = 2.0 * rng.gen::<f64>() - 1.0;
                    out[i] = v;
                    s += v * v;
                }
                if s < 1.0 {
                    for i in 0..out.len() {
                        out[i] = c[i] + r * out[i];
                    }
                    return;
                }
            },
        }
    }
}

fn region_sets(kind: &RegionKind) -> (SampleSet, SampleSet) {
    match kind {
        RegionKind::DiagonalBall { center, radius } => (
            SampleSet::Ball(center.clone(), *radius),
            SampleSet::Ball(center.clone(), *radius),
        ),
        RegionKind::ProductCube { k1, k2 } => {
            (SampleSet::Box(k1.clone()), SampleSet::Box(k2.clone()))
        }
        RegionKind::ProductBall { c1, r1, c2, r2 } => (
            SampleSet::Ball(c1.clone(), *r1),
            SampleSet::Ball(c2.clone(), *r2),
        ),
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    if out.len() == 1 {
        out[0] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        return;
    }
    loop {
        let mut s = 0.0;
        for v in out.iter_mut() {
            *v = 2.0 * rng.gen::<f64>() - 1.0;
            s += *v * *v;
        }
        if s > 1e-12 && s < 1.0 {
            let r = s.sqrt();
            for v in out.iter_mut() {
                *v /= r;
            }
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nu() -> NuMeasure {
        NuMeasure::new(ParameterSet::config_s()).unwrap()
    }

    #[test]
    fn doubling_ratio_config_s() {
        let (m, e) = nu().doubling_check(&[0.0, 0.0], 1.0, 0.5).unwrap();
        assert!((e - 4.594793419988).abs() < 1e-9);
        assert!((m / e - 1.0).abs() < 1e-6, "{m} {e}");
        let (m, e) = nu().doubling_check(&[0.3, 0.1], 1.0, 1.0).unwrap();
        assert_eq!((m, e), (1.0, 1.0));
        assert!(nu().doubling_check(&[0.0, 0.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn far_cubes_within_kernel_bounds() {
        let k1 = Aabb::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        let k2 = Aabb::new(vec![4.0, 0.0], vec![5.0, 1.0]);
        let m = nu().mass(&RegionDescriptor::product_cube(k1, k2)).unwrap();
        assert!(m >= 26f64.powf(-0.9) && m <= 3f64.powf(-1.8), "{m}");
    }

    #[test]
    fn zero_volume_slab() {
        let k1 = Aabb::new(vec![0.0, 0.0], vec![0.0, 1.0]);
        let k2 = Aabb::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        assert_eq!(
            nu().mass(&RegionDescriptor::product_cube(k1, k2)).unwrap(),
            0.0
        );
    }

    #[test]
    fn level_set_needs_kernel() {
        let r =
            RegionDescriptor::diagonal_ball(&[0.0, 0.0], 1.0).with_level_set(KernelKind::H, 1.0);
        assert!(nu().mass(&r).is_err());
    }

    #[test]
    fn oracle_is_seeded() {
        let r = RegionDescriptor::diagonal_ball(&[0.0, 0.0], 0.5);
        let a = nu().mc_oracle(&r, 20_000, 3).unwrap();
        let b = nu().mc_oracle(&r, 20_000, 3).unwrap();
        assert_eq!(a, b);
        assert!(nu().mc_oracle(&r, 100, 3).is_err());
    }

    #[test]
    fn oracle_matches_ball() {
        let r = RegionDescriptor::diagonal_ball(&[0.0, 0.0], 0.5);
        let m = nu().mass(&r).unwrap();
        let (est, se) = nu().mc_oracle(&r, 200_000, 11).unwrap();
        assert!((est - m).abs() < 4.0 * se, "{est} {m} {se}");
    }

    #[test]
    fn concentric_cubes_minimise_ratio() {
        let m = nu();
        let half = Aabb::cube(&[-0.25, -0.25], 0.5);
        let r0 = m
            .cube_ball_comparison(&[0.0, 0.0], 1.0, 0.5, &half, &half)
            .unwrap();
        let left = Aabb::cube(&[-0.7, -0.25], 0.5);
        let right = Aabb::cube(&[0.2, -0.25], 0.5);
        let r1 = m
            .cube_ball_comparison(&[0.0, 0.0], 1.0, 0.5, &left, &right)
            .unwrap();
        assert!(r1 > r0);
        let cd = m.fit_ball_cube_constant(&[0.5], 5).unwrap();
        assert!(r1 <= cd / (0.5f64.powi(4) * 0.1) * (1.0 + 1e-12));
        let bad = Aabb::cube(&[0.6, 0.6], 0.5);
        assert!(m
            .cube_ball_comparison(&[0.0, 0.0], 1.0, 0.5, &bad, &half)
            .is_err());
    }
}

#[cfg(test)]
mod additivity {
    use super::*;

    fn children(b: &Aabb) -> Vec<Aabb> {
        let n = b.dim();
        (0..1usize << n)
            .map(|m| {
                let lo: Vec<f64> = (0..n)
                    .map(|i| {
                        if m >> i & 1 == 0 {
                            b.lo[i]
                        } else {
                            0.5 * (b.lo[i] + b.hi[i])
                        }
                    })
                    .collect();
                Aabb::cube(&lo, 0.5 * (b.hi[0] - b.lo[0]))
            })
            .collect()
    }

    fn rel_split_error(k1: &Aabb, k2: &Aabb) -> f64 {
        let nu = NuMeasure::new(ParameterSet::config_s()).unwrap();
        let whole = nu
            .mass(&RegionDescriptor::product_cube(k1.clone(), k2.clone()))
            .unwrap();
        let mut acc = crate::numeric::Neumaier::default();
        for c1 in children(k1) {
            for c2 in children(k2) {
                acc.add(
                    nu.mass(&RegionDescriptor::product_cube(c1.clone(), c2))
                        .unwrap(),
                );
            }
        }
        (acc.sum() / whole - 1.0).abs()
    }

    #[test]
    fn children_sum_to_parent() {
        let k = Aabb::cube(&[0.0, 0.0], 1.0);
        let adj = Aabb::cube(&[1.0, 0.0], 1.0);
        let far = Aabb::cube(&[2.5, -1.0], 1.0);
        for (a, b) in [(&k, &k), (&k, &adj), (&k, &far)] {
            let e = rel_split_error(a, b);
            assert!(e < 1e-6, "{e}");
        }
    }
}
