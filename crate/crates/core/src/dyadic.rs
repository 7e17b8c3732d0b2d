//! Anchored dyadic cubes in R^n and their products in R^{2n}.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::MAX_DIM;
use crate::params::ParameterSet;
use crate::quadrature::{box_pair_integral, Aabb, QuadOptions};

/// How the cube levels and the exit-radius cap are tied to alpha - beta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeometryScale {
    /// n 40^{n+1} for the first level, 40^n for the radius cap.
    Faithful,
    /// chi replaces n 40^{n+1}; the radius cap is given directly.
    Relaxed { chi: f64, radius_cap: f64 },
}

impl GeometryScale {
    pub fn is_faithful(&self) -> bool {
        matches!(self, GeometryScale::Faithful)
    }

    /// Upper end of the exit-radius lattice.
    pub fn radius_cap(&self, n: usize, alpha: f64, beta: f64) -> f64 {
        match *self {
            GeometryScale::Faithful => (alpha - beta) / 40f64.powi(n as i32),
            GeometryScale::Relaxed { radius_cap, .. } => radius_cap,
        }
    }
}

/// Radius of the closed ball that admits cubes into C_k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdmissionRadius {
    /// (alpha + beta)/2, which makes the cubes cover B(x0, beta).
    #[default]
    Midpoint,
    /// (alpha - beta)/2 as printed in the cube definition.
    Printed,
}

impl AdmissionRadius {
    pub fn radius(&self, alpha: f64, beta: f64) -> f64 {
        match self {
            AdmissionRadius::Midpoint => 0.5 * (alpha + beta),
            AdmissionRadius::Printed => 0.5 * (alpha - beta),
        }
    }
}

pub fn k0_level(alpha: f64, beta: f64, n: usize, scale: &GeometryScale) -> Result<i32> {
    if !(alpha > beta) {
        return Err(Error::Domain(format!(
            "need alpha > beta, got {alpha} <= {beta}"
        )));
    }
    let chi = match *scale {
        GeometryScale::Faithful => n as f64 * 40f64.powi(n as i32 + 1),
        GeometryScale::Relaxed { chi, .. } => {
            if !(chi > 0.0) {
                return Err(Error::Domain("chi must be positive".into()));
            }
            chi
        }
    };
    Ok((-((alpha - beta) / chi).log2()).floor() as i32 + 1)
}

/// Anchor and dimension shared by all cubes of one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub n: usize,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicCube {
    pub level: i32,
    pub z: [i64; MAX_DIM],
}

pub fn side(level: i32) -> f64 {
    2f64.powi(-level)
}

impl DyadicCube {
    pub fn new(level: i32, z: &[i64]) -> Self {
        let mut zz = [0; MAX_DIM];
        zz[..z.len()].copy_from_slice(z);
        DyadicCube { level, z: zz }
    }

    pub fn side(&self) -> f64 {
        side(self.level)
    }

    pub fn lo(&self, lat: &Lattice) -> Vec<f64> {
        (0..lat.n)
            .map(|a| lat.x0[a] + self.z[a] as f64 * self.side())
            .collect()
    }

    pub fn aabb(&self, lat: &Lattice) -> Aabb {
        Aabb::cube(&self.lo(lat), self.side())
    }

    pub fn center(&self, lat: &Lattice) -> Vec<f64> {
        let s = self.side();
        self.lo(lat).into_iter().map(|v| v + 0.5 * s).collect()
    }

    pub fn parent(&self) -> DyadicCube {
        let mut z = self.z;
        for v in z.iter_mut() {
            *v = v.div_euclid(2);
        }
        DyadicCube {
            level: self.level - 1,
            z,
        }
    }

    /// Ancestor at a coarser level.
    pub fn ancestor(&self, level: i32) -> DyadicCube {
        let shift = self.level - level;
        debug_assert!(shift >= 0);
        let mut z = self.z;
        for v in z.iter_mut() {
            *v = v.div_euclid(1 << shift);
        }
        DyadicCube { level, z }
    }

    pub fn children(&self, n: usize) -> Vec<DyadicCube> {
        (0..1usize << n)
            .map(|mask| {
                let mut z = self.z;
                for (a, v) in z.iter_mut().enumerate().take(n) {
                    *v = 2 * *v + ((mask >> a) & 1) as i64;
                }
                DyadicCube {
                    level: self.level + 1,
                    z,
                }
            })
            .collect()
    }

    /// Whether `other` lies inside this cube.
    pub fn contains(&self, other: &DyadicCube) -> bool {
        other.level >= self.level && other.ancestor(self.level) == *self
    }
}

/// Gap between the closed intervals [a, a + la] and [b, b + lb].
fn interval_gap(a: f64, la: f64, b: f64, lb: f64) -> f64 {
    (b - (a + la)).max(a - (b + lb)).max(0.0)
}

/// Euclidean distance between two closed cubes of the lattice.
pub fn cube_distance(lat: &Lattice, k1: &DyadicCube, k2: &DyadicCube) -> f64 {
    let (l1, l2) = (k1.lo(lat), k2.lo(lat));
    (0..lat.n)
        .map(|a| interval_gap(l1[a], k1.side(), l2[a], k2.side()).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Product cube K1 x K2 with both factors at one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProductCube {
    pub k1: DyadicCube,
    pub k2: DyadicCube,
}

impl ProductCube {
    pub fn new(k1: DyadicCube, k2: DyadicCube) -> Result<Self> {
        if k1.level != k2.level {
            return Err(Error::Geometry("product factors must share a level".into()));
        }
        Ok(ProductCube { k1, k2 })
    }

    pub fn level(&self) -> i32 {
        self.k1.level
    }

    pub fn side(&self) -> f64 {
        self.k1.side()
    }

    pub fn predecessor(&self) -> ProductCube {
        ProductCube {
            k1: self.k1.parent(),
            k2: self.k2.parent(),
        }
    }

    pub fn ancestor(&self, level: i32) -> ProductCube {
        ProductCube {
            k1: self.k1.ancestor(level),
            k2: self.k2.ancestor(level),
        }
    }

    pub fn children(&self, n: usize) -> Vec<ProductCube> {
        let c1 = self.k1.children(n);
        let c2 = self.k2.children(n);
        let mut out = Vec::with_capacity(c1.len() * c2.len());
        for a in &c1 {
            for b in &c2 {
                out.push(ProductCube { k1: *a, k2: *b });
            }
        }
        out
    }

    /// pi_1 = K1 x K1 for h = 1 and pi_2 = K2 x K2 for h = 2.
    pub fn projection(&self, h: u8) -> ProductCube {
        let k = if h == 1 { self.k1 } else { self.k2 };
        ProductCube { k1: k, k2: k }
    }

    pub fn symm(&self) -> ProductCube {
        ProductCube {
            k1: self.k2,
            k2: self.k1,
        }
    }

    pub fn is_diagonal(&self) -> bool {
        self.k1 == self.k2
    }

    pub fn contains(&self, other: &ProductCube) -> bool {
        self.k1.contains(&other.k1) && self.k2.contains(&other.k2)
    }

    pub fn factor_distance(&self, lat: &Lattice) -> f64 {
        cube_distance(lat, &self.k1, &self.k2)
    }

    /// The product cube as a box in R^{2n}.
    pub fn aabb(&self, lat: &Lattice) -> Aabb {
        let mut lo = self.k1.lo(lat);
        lo.extend(self.k2.lo(lat));
        Aabb::cube(&lo, self.side())
    }
}

/// Cubes of C_k: the lattice cubes whose closure meets the closed admission ball.
pub fn enumerate_level(
    lat: &Lattice,
    alpha: f64,
    beta: f64,
    level: i32,
    admission: AdmissionRadius,
    cap: usize,
) -> Result<Vec<DyadicCube>> {
    let n = lat.n;
    let r = admission.radius(alpha, beta);
    let s = side(level);
    let reach = (r / s).ceil() as i64 + 1;
    let per_axis = (2 * reach + 1) as usize;
    let bound = per_axis.checked_pow(n as u32).unwrap_or(usize::MAX);
    if bound > cap.saturating_mul(4) {
        return Err(Error::Resolvability { count: bound, cap });
    }
    let mut out = Vec::new();
    let mut z = [-reach; MAX_DIM];
    for v in z.iter_mut().skip(n) {
        *v = 0;
    }
    loop {
        // squared distance from x0 to the closed cube
        let mut d2 = 0.0;
        for a in 0..n {
            let lo = z[a] as f64 * s;
            let g = (lo - 0.0).max(-(lo + s)).max(0.0);
            d2 += g * g;
        }
        if d2 <= r * r {
            out.push(DyadicCube { level, z });
        }
        let mut a = 0;
        loop {
            if a == n {
                out.sort();
                let products = out.len().saturating_mul(out.len());
                if products > cap {
                    return Err(Error::Resolvability {
                        count: products,
                        cap,
                    });
                }
                return Ok(out);
            }
            z[a] += 1;
            if z[a] <= reach {
                break;
            }
            z[a] = -reach;
            a += 1;
        }
    }
}

/// C_k together with the size of Delta_k = C_k x C_k.
#[derive(Debug, Clone)]
pub struct CubeLevel {
    pub level: i32,
    pub cubes: Vec<DyadicCube>,
}

impl CubeLevel {
    pub fn product_count(&self) -> usize {
        self.cubes.len() * self.cubes.len()
    }

    pub fn products(&self) -> impl Iterator<Item = ProductCube> + '_ {
        self.cubes.iter().flat_map(move |a| {
            self.cubes
                .iter()
                .map(move |b| ProductCube { k1: *a, k2: *b })
        })
    }
}

pub const DEFAULT_CUBE_CAP: usize = 1_000_000;
/// Pair scans that keep only offset classes may visit more products.
pub const OFFSET_SCAN_CAP: usize = 1 << 26;

pub fn enumerate_cubes(
    lat: &Lattice,
    alpha: f64,
    beta: f64,
    level: i32,
    admission: AdmissionRadius,
) -> Result<CubeLevel> {
    Ok(CubeLevel {
        level,
        cubes: enumerate_level(lat, alpha, beta, level, admission, DEFAULT_CUBE_CAP)?,
    })
}

/// Geometry of one product cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeGeometry {
    pub cube: ProductCube,
    pub predecessor: ProductCube,
    pub projection_1: ProductCube,
    pub projection_2: ProductCube,
    pub symm: ProductCube,
    pub factor_distance: f64,
    pub diagonal_distance: f64,
    pub projection_distance: f64,
    pub predecessor_distance: f64,
}

pub fn cube_geometry(lat: &Lattice, cube: &ProductCube, k0: i32) -> Result<CubeGeometry> {
    if cube.level() <= k0 {
        return Err(Error::Geometry(format!(
            "cube at level {} has no predecessor above level {k0}",
            cube.level()
        )));
    }
    let d = cube.factor_distance(lat);
    let pred = cube.predecessor();
    let pi1 = cube.projection(1);
    let pi2 = cube.projection(2);
    Ok(CubeGeometry {
        cube: *cube,
        predecessor: pred,
        projection_1: pi1,
        projection_2: pi2,
        symm: cube.symm(),
        factor_distance: d,
        diagonal_distance: d / std::f64::consts::SQRT_2,
        projection_distance: pi1.aabb(lat).distance(&pi2.aabb(lat)),
        predecessor_distance: pred.factor_distance(lat),
    })
}

/// Measured dimensional constants for one epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimConstants {
    pub eps: f64,
    /// First bracket: sup of (1/eps)(d/2^-k)^{n - eps p} nu(K)/nu(pi_h K).
    pub c_dd_first: f64,
    /// Second bracket: sup over d >= 2^-k of eps (d/2^-k)^{eps p - n} nu(pi_h K)/nu(K).
    pub c_dd_second: f64,
    pub c_dd: f64,
    /// sup nu(predecessor)/nu(K) over cubes whose predecessor factors are 2^-k apart.
    pub c_ddd: f64,
    pub offsets: usize,
    pub predecessor_cases: usize,
}

/// nu of a unit-level pair of cubes at integer offset, in units of the side.
fn unit_pair_mass(n: usize, offset: &[i64], kappa: f64, opts: &QuadOptions) -> Result<f64> {
    let a = Aabb::cube(&vec![0.0; n], 1.0);
    let lo: Vec<f64> = offset.iter().map(|&v| v as f64).collect();
    box_pair_integral(&a, &Aabb::cube(&lo, 1.0), kappa, opts)
}

/// Measures C_dd and C_ddd over the cube families at the given levels.
/// Both ratios are scale invariant, so each offset class is integrated once
/// at unit side.
pub fn empirical_dim_constants(
    lat: &Lattice,
    alpha: f64,
    beta: f64,
    levels: &[i32],
    admission: AdmissionRadius,
    params: &ParameterSet,
    eps_set: &[f64],
) -> Result<Vec<DimConstants>> {
    let n = lat.n;
    let mut offsets: BTreeSet<Vec<i64>> = BTreeSet::new();
    // (predecessor offset, child offset) in child units
    let mut pred_cases: BTreeSet<(Vec<i64>, Vec<i64>)> = BTreeSet::new();
    for &k in levels {
        let cubes = enumerate_level(lat, alpha, beta, k, admission, OFFSET_SCAN_CAP)?;
        let mut diffs: BTreeSet<[i64; MAX_DIM]> = BTreeSet::new();
        for a in &cubes {
            for b in &cubes {
                let mut d = [0i64; MAX_DIM];
                for i in 0..n {
                    d[i] = (b.z[i] - a.z[i]).abs();
                }
                diffs.insert(d);
            }
        }
        for d in &diffs {
            let mut key: Vec<i64> = d[..n].to_vec();
            key.sort_unstable();
            offsets.insert(key);
        }
        // predecessor ratios: only the offsets of the two children matter
        let mut seen: BTreeSet<([i64; MAX_DIM], [i64; MAX_DIM])> = BTreeSet::new();
        for a in &cubes {
            for b in &cubes {
                let (pa, pb) = (a.parent(), b.parent());
                let gap = cube_distance(lat, &pa, &pb);
                if gap < side(k) {
                    continue;
                }
                let mut pd = [0i64; MAX_DIM];
                let mut cd = [0i64; MAX_DIM];
                for i in 0..n {
                    pd[i] = pb.z[i] - pa.z[i];
                    cd[i] = b.z[i] - a.z[i];
                }
                if seen.insert((pd, cd)) {
                    // normalise the sign per axis
                    let mut pk = Vec::with_capacity(n);
                    let mut ck = Vec::with_capacity(n);
                    for i in 0..n {
                        let sgn = if pd[i] < 0 || (pd[i] == 0 && cd[i] < 0) {
                            -1
                        } else {
                            1
                        };
                        pk.push(sgn * pd[i]);
                        ck.push(sgn * cd[i]);
                    }
                    pred_cases.insert((pk, ck));
                }
            }
        }
    }
    if offsets.is_empty() {
        return Err(Error::Geometry("no cubes at the requested levels".into()));
    }
    let opts = QuadOptions::default();
    eps_set
        .iter()
        .map(|&eps| {
            let ps = params.with_eps(eps);
            let kappa = ps.kernel_exponent();
            let dexp = ps.nf() - eps * ps.p;
            let offs: Vec<&Vec<i64>> = offsets.iter().collect();
            let masses: Vec<Result<f64>> = offs
                .par_iter()
                .map(|o| unit_pair_mass(n, o, kappa, &opts))
                .collect();
            let mut table: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
            for (o, m) in offs.iter().zip(masses) {
                table.insert((*o).clone(), m?);
            }
            let diag = table[&vec![0i64; n]];
            let mut first: f64 = 0.0;
            let mut second: f64 = 0.0;
            for (o, &m) in &table {
                let d = o
                    .iter()
                    .map(|&v| ((v - 1).max(0) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                first = first.max(d.powf(dexp) * m / diag / eps);
                if d >= 1.0 {
                    second = second.max(eps * d.powf(-dexp) * diag / m);
                }
            }
            // predecessor masses in child units: the parent has side 2
            let cases: Vec<&(Vec<i64>, Vec<i64>)> = pred_cases.iter().collect();
            let ratios: Vec<Result<f64>> = cases
                .par_iter()
                .map(|(pd, cd)| {
                    let child = unit_pair_mass(n, &sorted_abs(cd), kappa, &opts)?;
                    let parent = unit_pair_mass(n, &sorted_abs(pd), kappa, &opts)?
                        * 2f64.powf(2.0 * n as f64 - kappa);
                    Ok(parent / child)
                })
                .collect();
            let mut c_ddd: f64 = 0.0;
            for r in ratios {
                c_ddd = c_ddd.max(r?);
            }
            Ok(DimConstants {
                eps,
                c_dd_first: first,
                c_dd_second: second,
                c_dd: first + second,
                c_ddd,
                offsets: table.len(),
                predecessor_cases: cases.len(),
            })
        })
        .collect()
}

fn sorted_abs(v: &[i64]) -> Vec<i64> {
    let mut k: Vec<i64> = v.iter().map(|x| x.abs()).collect();
    k.sort_unstable();
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat2() -> Lattice {
        Lattice {
            n: 2,
            x0: vec![0.0, 0.0],
        }
    }

    #[test]
    fn k0_examples() {
        assert_eq!(
            k0_level(0.5, 0.25, 2, &GeometryScale::Faithful).unwrap(),
            19
        );
        let relaxed = GeometryScale::Relaxed {
            chi: 4.0,
            radius_cap: 0.1,
        };
        assert_eq!(k0_level(0.5, 0.25, 2, &relaxed).unwrap(), 5);
        assert_eq!(k0_level(0.5 + 0.25, 0.25, 2, &relaxed).unwrap(), 4);
        assert!(k0_level(0.2, 0.25, 2, &relaxed).is_err());
    }

    #[test]
    fn geometry_examples() {
        let lat = Lattice {
            n: 2,
            x0: vec![0.0, 0.0],
        };
        let k1 = DyadicCube::new(0, &[0, 0]);
        let k2 = DyadicCube::new(0, &[2, 0]);
        let c = ProductCube::new(k1, k2).unwrap();
        assert_eq!(c.factor_distance(&lat), 1.0);
        let g = cube_geometry(
            &lat,
            &ProductCube::new(k1.children(2)[0], k2.children(2)[0]).unwrap(),
            0,
        )
        .unwrap();
        assert!(
            (g.projection_distance - std::f64::consts::SQRT_2 * g.factor_distance).abs() < 1e-12
        );
        assert_eq!(ProductCube::new(k1, k1).unwrap().factor_distance(&lat), 0.0);
    }

    #[test]
    fn predecessor_and_children() {
        let k = DyadicCube::new(3, &[-3, 5]);
        assert_eq!(k.parent(), DyadicCube::new(2, &[-2, 2]));
        for c in k.children(2) {
            assert_eq!(c.parent(), k);
            assert!(k.contains(&c));
        }
        let pc = ProductCube::new(k, DyadicCube::new(3, &[1, 1])).unwrap();
        assert_eq!(pc.symm().symm(), pc);
        assert_eq!(pc.children(2).len(), 16);
    }

    #[test]
    fn covering_of_beta_ball() {
        let lat = lat2();
        let (alpha, beta) = (0.95, 0.8);
        let level = enumerate_cubes(&lat, alpha, beta, 3, AdmissionRadius::Midpoint).unwrap();
        // points of B(x0, beta) on a fine lattice lie in exactly one cube
        for i in -40..40 {
            for j in -40..40 {
                let p = [i as f64 * 0.02 + 0.0013, j as f64 * 0.02 + 0.0007];
                if p[0] * p[0] + p[1] * p[1] >= beta * beta {
                    continue;
                }
                let hits = level
                    .cubes
                    .iter()
                    .filter(|c| {
                        let lo = c.lo(&lat);
                        (0..2).all(|a| p[a] >= lo[a] && p[a] < lo[a] + c.side())
                    })
                    .count();
                assert_eq!(hits, 1);
            }
        }
    }

    #[test]
    fn brute_force_count_printed_radius() {
        let lat = lat2();
        let lvl = enumerate_cubes(&lat, 0.5, 0.25, 5, AdmissionRadius::Printed).unwrap();
        let r = 0.125;
        let s = 1.0 / 32.0;
        let mut count = 0;
        for i in -10..10i64 {
            for j in -10..10i64 {
                // nearest point of the closed cube to the origin
                let nx = (0.0f64).clamp(i as f64 * s, (i + 1) as f64 * s);
                let ny = (0.0f64).clamp(j as f64 * s, (j + 1) as f64 * s);
                if nx * nx + ny * ny <= r * r {
                    count += 1;
                }
            }
        }
        assert_eq!(lvl.cubes.len(), count);
        assert_eq!(lvl.product_count(), count * count);
    }

    #[test]
    fn cube_cap_is_enforced() {
        let lat = lat2();
        let err = enumerate_level(&lat, 0.95, 0.8, 12, AdmissionRadius::Midpoint, 1_000_000);
        assert!(matches!(err, Err(Error::Resolvability { .. })));
    }
}
