//! Level-set decomposition: thresholds, Calderon-Zygmund selection of H^{p'},
//! the exit-time diagonal cover and the classification of the stopping cubes.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cz::{cz_audit, cz_decompose_all, CzAudit, PairDensity, PairPyramid};
use crate::dyadic::{
    enumerate_cubes, k0_level, AdmissionRadius, DyadicCube, GeometryScale, Lattice, ProductCube,
};
use crate::error::{Error, Result};
use crate::fields::{FunctionalMatrices, Integrand, PairField};
use crate::grid::{dist2, MAX_DIM};
use crate::measure::KernelKind;
use crate::report::fmt_num;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Theorem,
    #[default]
    Diagnostic,
}

/// Anchor, radii and cube scale of the level-set estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub x0: Vec<f64>,
    pub rho0: f64,
    pub beta: f64,
    pub alpha: f64,
    pub scale: GeometryScale,
    #[serde(default)]
    pub admission: AdmissionRadius,
}

impl Geometry {
    /// Desk-scale geometry on [-1,1]^n: cubes from level 2, exit radii up to 0.36.
    pub fn relaxed_default(n: usize) -> Self {
        Geometry {
            x0: vec![0.0; n],
            rho0: 0.75,
            beta: 0.8,
            alpha: 0.95,
            scale: GeometryScale::Relaxed {
                chi: 0.5,
                radius_cap: 0.36,
            },
            admission: AdmissionRadius::Midpoint,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.x0.len() != n {
            return Err(Error::Geometry(format!(
                "x0 has {} coordinates, n = {n}",
                self.x0.len()
            )));
        }
        if !(self.rho0 > 0.0 && self.rho0 <= 1.0) {
            return Err(Error::Geometry(format!(
                "rho0 = {} outside (0, 1]",
                self.rho0
            )));
        }
        if !(self.rho0 < self.beta && self.beta < self.alpha && self.alpha < 1.5 * self.rho0) {
            return Err(Error::Geometry(format!(
                "need rho0 < beta < alpha < 3 rho0 / 2, got ({}, {}, {})",
                self.rho0, self.beta, self.alpha
            )));
        }
        let cap = self.radius_cap(n);
        if !(cap > 0.0 && cap <= 0.5 * self.rho0) {
            return Err(Error::Geometry(format!(
                "exit radius cap {cap} must lie in (0, rho0/2]"
            )));
        }
        Ok(())
    }

    pub fn lattice(&self) -> Lattice {
        Lattice {
            n: self.x0.len(),
            x0: self.x0.clone(),
        }
    }

    pub fn k0(&self, n: usize) -> Result<i32> {
        k0_level(self.alpha, self.beta, n, &self.scale)
    }

    pub fn radius_cap(&self, n: usize) -> f64 {
        self.scale.radius_cap(n, self.alpha, self.beta)
    }
}

/// Cube window, pyramids of the H integrals and functional matrices for one field.
pub struct LevelSetSetup {
    pub geometry: Geometry,
    pub lattice: Lattice,
    pub k0: i32,
    pub fine_level: i32,
    pub roots: Vec<DyadicCube>,
    /// Root-level index of the lowest window cube per axis.
    origin: [i64; MAX_DIM],
    /// Fine cells per axis in the window.
    span: usize,
    /// Grid cell index of the first window cell per axis.
    cell_offset: [i64; MAX_DIM],
    pub pyr_pp: PairPyramid,
    pub pyr_gamma: PairPyramid,
    pub mats: FunctionalMatrices,
}

impl LevelSetSetup {
    pub fn new(field: &PairField, geometry: &Geometry) -> Result<Self> {
        let spec = field.spec();
        let n = spec.n;
        geometry.validate(n)?;
        let k0 = geometry.k0(n)?;
        let lattice = geometry.lattice();
        let roots = enumerate_cubes(
            &lattice,
            geometry.alpha,
            geometry.beta,
            k0,
            geometry.admission,
        )?
        .cubes;
        let fine = -spec.h.log2();
        if (fine - fine.round()).abs() > 1e-9 {
            return Err(Error::Geometry(format!(
                "grid spacing {} is not a power of two",
                spec.h
            )));
        }
        let fine_level = fine.round() as i32;
        if fine_level <= k0 {
            return Err(Error::Geometry(format!(
                "grid level {fine_level} does not resolve cube level {k0}"
            )));
        }
        let depth = fine_level - k0;
        let mut origin = [0i64; MAX_DIM];
        let mut span_roots = 0i64;
        for a in 0..n {
            let lo = roots.iter().map(|c| c.z[a]).min().unwrap_or(0);
            let hi = roots.iter().map(|c| c.z[a]).max().unwrap_or(0);
            origin[a] = lo;
            span_roots = span_roots.max(hi - lo + 1);
        }
        let span = (span_roots << depth) as usize;
        let mut cell_offset = [0i64; MAX_DIM];
        for a in 0..n {
            let rel = (geometry.x0[a] - spec.lo[a]) / spec.h;
            if (rel - rel.round()).abs() > 1e-9 {
                return Err(Error::Geometry(
                    "x0 is not on the grid's cell lattice".into(),
                ));
            }
            cell_offset[a] = rel.round() as i64 + (origin[a] << depth);
            if cell_offset[a] < 0 || cell_offset[a] + span as i64 > spec.cells as i64 {
                return Err(Error::Geometry(format!(
                    "cube window along axis {a} leaves the grid box; enlarge the box or shrink alpha"
                )));
            }
        }
        let mats = field.functional_matrices();
        let mut setup = LevelSetSetup {
            geometry: geometry.clone(),
            lattice,
            k0,
            fine_level,
            roots,
            origin,
            span,
            cell_offset,
            pyr_pp: empty_pyramid(n),
            pyr_gamma: empty_pyramid(n),
            mats,
        };
        setup.pyr_pp = setup.pyramid(field, &setup.mats.h_pp)?;
        setup.pyr_gamma = setup.pyramid(field, &setup.mats.h_gamma)?;
        Ok(setup)
    }

    pub fn n(&self) -> usize {
        self.lattice.n
    }

    /// Pyramid of a cell-pair matrix over the cube window, with nu as mass.
    pub fn pyramid(&self, field: &PairField, mat: &[f64]) -> Result<PairPyramid> {
        let n = self.n();
        let spec = field.spec();
        let len = spec.len();
        let mass = field.mass_matrix();
        let s = self.span;
        let total = s.pow(2 * n as u32);
        let cells_of = |code: usize| -> (usize, usize) {
            let mut c = [0i64; 2 * MAX_DIM];
            let mut rest = code;
            for slot in (0..2 * n).rev() {
                c[slot] = (rest % s) as i64;
                rest /= s;
            }
            let mut ia = [0i64; MAX_DIM];
            let mut ib = [0i64; MAX_DIM];
            for a in 0..n {
                ia[a] = c[a] + self.cell_offset[a];
                ib[a] = c[n + a] + self.cell_offset[a];
            }
            (
                spec.flat_index(&ia[..n]).expect("window inside grid"),
                spec.flat_index(&ib[..n]).expect("window inside grid"),
            )
        };
        let (value, m): (Vec<f64>, Vec<f64>) = (0..total)
            .into_par_iter()
            .map(|code| {
                let (i, j) = cells_of(code);
                (mat[i * len + j], mass[i * len + j])
            })
            .unzip();
        PairPyramid::from_fine(n, self.k0, self.fine_level, &self.origin, value, m)
    }

    /// Grid cells of a dyadic cube of the window.
    pub fn cube_cells(&self, field: &PairField, cube: &DyadicCube) -> Vec<usize> {
        let spec = field.spec();
        let side = cube.side();
        spec.cells_in_cube(&cube.lo(&self.lattice), side)
    }

    pub fn root_products(&self) -> Vec<ProductCube> {
        let mut out = Vec::with_capacity(self.roots.len() * self.roots.len());
        for a in &self.roots {
            for b in &self.roots {
                out.push(ProductCube { k1: *a, k2: *b });
            }
        }
        out
    }
}

fn empty_pyramid(n: usize) -> PairPyramid {
    PairPyramid::from_fine(n, 0, 0, &[0; MAX_DIM], vec![0.0], vec![0.0])
        .expect("single-entry pyramid")
}

/// Psi_M(x, R) on a list of radii, zero where the ball holds no cell centre.
pub fn psi_profile(
    field: &PairField,
    mats: &FunctionalMatrices,
    x: &[f64],
    radii: &[f64],
    m_big: f64,
) -> Vec<f64> {
    let d = *field.derived();
    let ps = *field.params();
    let sweep = field.ball_sweep(x, radii, &[&mats.h_pp, &mats.f_lower, &mats.mass]);
    let f_scale = 1.0 / ps.eps.powf(1.0 / d.p_lower_s - 1.0 / d.p_prime);
    radii
        .iter()
        .zip(&sweep)
        .map(|(&r, s)| {
            if !(s[2] > 0.0) {
                return 0.0;
            }
            let mass = field.ball_mass(x, r, s[2]);
            let h = (s[0] / mass).powf(1.0 / d.p_prime);
            let f = mass.powf(d.theta) * f_scale * (s[1] / mass).powf(1.0 / d.p_lower_s);
            h + m_big * f
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Largest (avg H^{p'})^{1/p'} over the root cubes.
    pub lambda_root: f64,
    pub kappa: f64,
    pub theta_at_2rho0: f64,
    /// sup of Psi_M + Upsilon_0 + Tail over the sampled (x, R) lattice.
    pub functional_sup: f64,
    pub sites: usize,
    pub radii: Vec<f64>,
}

/// Radii from `lower` to `upper` with `per_octave` steps per doubling.
pub fn radius_window(lower: f64, upper: f64, per_octave: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let step = 2f64.powf(1.0 / per_octave.max(1) as f64);
    let mut r = lower;
    while r < upper * (1.0 - 1e-12) {
        out.push(r);
        r *= step;
    }
    out.push(upper);
    out
}

/// Cell centres inside the open ball B(x0, r).
pub fn lattice_sites(field: &PairField, x0: &[f64], r: f64) -> Vec<Vec<f64>> {
    let spec = field.spec();
    spec.cells_in_ball(x0, r)
        .into_iter()
        .map(|i| spec.center(i)[..spec.n].to_vec())
        .collect()
}

pub fn thresholds(
    field: &PairField,
    setup: &LevelSetSetup,
    kappa: f64,
    m_big: f64,
    c_a: f64,
    per_octave: usize,
) -> Result<Thresholds> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::Domain(format!("kappa = {kappa} outside (0, 1]")));
    }
    let g = &setup.geometry;
    let n = setup.n();
    let ps = *field.params();
    let d = *field.derived();
    let radii = radius_window(setup.geometry.radius_cap(n), 0.5 * g.rho0, per_octave);
    let sites = lattice_sites(field, &g.x0, g.beta);
    let sups: Vec<Result<f64>> = sites
        .par_iter()
        .map(|x| {
            let vals = field.functionals_at(&setup.mats, x, &radii, m_big)?;
            Ok(vals
                .iter()
                .map(|v| v.psi_m + v.upsilon0 + v.tail)
                .fold(0.0, f64::max))
        })
        .collect();
    let mut sup: f64 = 0.0;
    for s in sups {
        sup = sup.max(s?);
    }
    let lambda1 = sup / kappa;
    let lambda_root = root_lambda(setup, d.p_prime);
    let theta = field.functionals(&g.x0, 2.0 * g.rho0, m_big)?.theta_big;
    let lambda0 = c_a / ps.eps * (g.rho0 / (g.alpha - g.beta)).powf(2.0 * ps.nf() + ps.p) * theta;
    Ok(Thresholds {
        lambda0,
        lambda1,
        lambda2: lambda1.max(lambda_root),
        lambda_root,
        kappa,
        theta_at_2rho0: theta,
        functional_sup: sup,
        sites: sites.len(),
        radii,
    })
}

/// Largest (avg H^{p'})^{1/p'} over the root cubes; the smallest admissible lambda.
pub fn root_lambda(setup: &LevelSetSetup, p_prime: f64) -> f64 {
    setup
        .root_products()
        .iter()
        .map(|r| setup.pyr_pp.average(r).powf(1.0 / p_prime))
        .fold(0.0, f64::max)
}

/// Stopping cubes of H^{p'} at level lambda^{p'} over all root cubes.
pub fn build_h_lambda(
    setup: &LevelSetSetup,
    lambda: f64,
    p_prime: f64,
) -> Result<(Vec<ProductCube>, CzAudit)> {
    let roots = setup.root_products();
    let thr = lambda.powf(p_prime);
    let fam = cz_decompose_all(&setup.pyr_pp, &roots, thr)?;
    let audit = cz_audit(&setup.pyr_pp, &roots, &fam, thr);
    Ok((fam, audit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteKind {
    Lattice,
    NearDiagonal,
    ProblemCube,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalBall {
    pub center: Vec<f64>,
    pub radius: f64,
    pub psi: f64,
    pub kind: SiteKind,
    pub in_beta_ball: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitCover {
    pub radius_lattice: Vec<f64>,
    pub candidates: usize,
    /// Sites whose Psi_M exceeds kappa lambda at some lattice radius, with their exit radius.
    pub level_set: Vec<DiagonalBall>,
    /// Greedy Vitali selection.
    pub balls: Vec<DiagonalBall>,
    pub kept_disjoint: bool,
    /// Every B(x, 2R(x)) lies in some B(x_j, 10 R(x_j)).
    pub level_set_covered: bool,
    pub dilations_inside_alpha: bool,
    pub exit_conditions_hold: bool,
    pub sum_nu: f64,
    /// Sum over j of int_{10 B_j} H^{p'} and 10^{n + eps p} (kappa lambda)^{p'} sum nu(B_j).
    pub dilated_integral: f64,
    pub dilated_bound: f64,
}

impl ExitCover {
    /// Whether (x, y) lies in some B(x_j, 10 R(x_j)).
    pub fn covers(&self, x: &[f64], y: &[f64]) -> bool {
        self.balls.iter().any(|b| {
            let r2 = 100.0 * b.radius * b.radius;
            dist2(x, &b.center) < r2 && dist2(y, &b.center) < r2
        })
    }
}

/// Exit radii on the lattice cap 2^{-j/per_octave} down to a quarter cell.
pub fn exit_radius_lattice(cap: f64, h: f64, per_octave: usize) -> Vec<f64> {
    let step = 2f64.powf(-1.0 / per_octave.max(1) as f64);
    let mut out = vec![cap];
    let mut r = cap * step;
    while r >= 0.25 * h {
        out.push(r);
        r *= step;
    }
    out
}

pub fn exit_cover(
    field: &PairField,
    setup: &LevelSetSetup,
    sites: &[(Vec<f64>, SiteKind)],
    kappa_lambda: f64,
    m_big: f64,
    per_octave: usize,
) -> ExitCover {
    let g = &setup.geometry;
    let n = setup.n();
    let cap = g.radius_cap(n);
    let lattice = exit_radius_lattice(cap, field.spec().h, per_octave);
    let found: Vec<Option<DiagonalBall>> = sites
        .par_iter()
        .map(|(x, kind)| {
            let prof = psi_profile(field, &setup.mats, x, &lattice, m_big);
            // the lattice is decreasing, so the first hit is the exit radius
            prof.iter()
                .position(|&v| v > kappa_lambda)
                .map(|k| DiagonalBall {
                    center: x.clone(),
                    radius: lattice[k],
                    psi: prof[k],
                    kind: *kind,
                    in_beta_ball: dist2(x, &g.x0) < g.beta * g.beta,
                })
        })
        .collect();
    let level_set: Vec<DiagonalBall> = found.into_iter().flatten().collect();
    let exit_ok = level_set.iter().all(|b| {
        let prof = psi_profile(field, &setup.mats, &b.center, &lattice, m_big);
        lattice
            .iter()
            .zip(&prof)
            .all(|(&r, &v)| r <= b.radius || v <= kappa_lambda)
    });
    let mut order: Vec<usize> = (0..level_set.len()).collect();
    order.sort_by(|&a, &b| {
        level_set[b]
            .radius
            .partial_cmp(&level_set[a].radius)
            .expect("finite radii")
            .then(a.cmp(&b))
    });
    let mut balls: Vec<DiagonalBall> = Vec::new();
    for &i in &order {
        let c = &level_set[i];
        let free = balls.iter().all(|b| {
            let reach = 2.0 * (b.radius + c.radius);
            dist2(&b.center, &c.center) >= reach * reach
        });
        if free {
            balls.push(c.clone());
        }
    }
    let mut kept_disjoint = true;
    for (a, ba) in balls.iter().enumerate() {
        for bb in &balls[a + 1..] {
            let reach = 2.0 * (ba.radius + bb.radius);
            if dist2(&ba.center, &bb.center) < reach * reach * (1.0 - 1e-12) {
                kept_disjoint = false;
            }
        }
    }
    let level_set_covered = level_set.iter().all(|c| {
        balls.iter().any(|b| {
            dist2(&c.center, &b.center).sqrt() + 2.0 * c.radius <= 10.0 * b.radius * (1.0 + 1e-12)
        })
    });
    let dilations_inside_alpha = balls
        .iter()
        .all(|b| dist2(&b.center, &g.x0).sqrt() + 10.0 * b.radius <= g.alpha);
    let ps = *field.params();
    let d = *field.derived();
    let spec = field.spec();
    let mut sum_nu = 0.0;
    let mut dilated = 0.0;
    for b in &balls {
        let cells = spec.cells_in_ball(&b.center, b.radius);
        let disc = field.block_sum(&setup.mats.mass, &cells, &cells);
        sum_nu += field.ball_mass(&b.center, b.radius, disc);
        let big = spec.cells_in_ball(&b.center, 10.0 * b.radius);
        dilated += field.block_sum(&setup.mats.h_pp, &big, &big);
    }
    ExitCover {
        radius_lattice: lattice,
        candidates: sites.len(),
        level_set,
        balls,
        kept_disjoint,
        level_set_covered,
        dilations_inside_alpha,
        exit_conditions_hold: exit_ok,
        sum_nu,
        dilated_integral: dilated,
        dilated_bound: 10f64.powf(ps.doubling_exponent()) * kappa_lambda.powf(d.p_prime) * sum_nu,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CubeTag {
    NearDiagonal,
    Good,
    BadCovered,
    BadUncovered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeRecord {
    pub cube: ProductCube,
    pub tag: CubeTag,
    pub distance: f64,
    pub predecessor_distance: f64,
    pub mass: f64,
    pub avg_pp: f64,
    /// avg of H^gamma over pi_1 and pi_2.
    pub projection_avg: [f64; 2],
    pub bad: [bool; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeFamilies {
    pub lambda: f64,
    pub kappa: f64,
    pub bad_cutoff: f64,
    pub records: Vec<CubeRecord>,
    /// Maximal cubes among the bad projections.
    pub pi_b: Vec<ProductCube>,
    pub partition_ok: bool,
    pub near_diagonal_covered: bool,
    pub uncovered_near_diagonal: usize,
    pub symmetric_pairs: usize,
    pub symmetry_mismatches: usize,
}

impl CubeFamilies {
    pub fn with_tag(&self, tag: CubeTag) -> impl Iterator<Item = &CubeRecord> {
        self.records.iter().filter(move |r| r.tag == tag)
    }

    pub fn count(&self, tag: CubeTag) -> usize {
        self.with_tag(tag).count()
    }
}

/// First pass of the classification, independent of the cover.
fn preclassify(
    setup: &LevelSetSetup,
    h_lambda: &[ProductCube],
    lambda: f64,
    kappa: f64,
    p_prime: f64,
    gamma: f64,
) -> (Vec<CubeRecord>, f64) {
    let n = setup.n() as f64;
    let p = p_prime / (p_prime - 1.0);
    let cutoff = (10.0 * n).powf(n + p) * (kappa * lambda).powf(gamma);
    let lat = &setup.lattice;
    let recs = h_lambda
        .par_iter()
        .map(|c| {
            let pd = c.predecessor().factor_distance(lat);
            let near = pd < c.side();
            let pa = [
                setup.pyr_gamma.average(&c.projection(1)),
                setup.pyr_gamma.average(&c.projection(2)),
            ];
            let bad = [!near && pa[0] > cutoff, !near && pa[1] > cutoff];
            CubeRecord {
                cube: *c,
                tag: if near {
                    CubeTag::NearDiagonal
                } else if bad[0] || bad[1] {
                    CubeTag::BadUncovered
                } else {
                    CubeTag::Good
                },
                distance: c.factor_distance(lat),
                predecessor_distance: pd,
                mass: setup.pyr_pp.mass(c),
                avg_pp: setup.pyr_pp.average(c),
                projection_avg: pa,
                bad,
            }
        })
        .collect();
    (recs, cutoff)
}

/// Maximal elements of a family of diagonal cubes.
fn maximal_diagonal(cubes: &BTreeSet<ProductCube>, k0: i32) -> Vec<ProductCube> {
    cubes
        .iter()
        .filter(|c| (k0..c.level()).all(|l| !cubes.contains(&c.ancestor(l))))
        .copied()
        .collect()
}

fn bad_projections(recs: &[CubeRecord]) -> BTreeSet<ProductCube> {
    let mut set = BTreeSet::new();
    for r in recs {
        for h in 0..2 {
            if r.bad[h] {
                set.insert(r.cube.projection(h as u8 + 1));
            }
        }
    }
    set
}

/// Exit-time candidate sites: cell centres of B(x0, beta), the midpoints of
/// nearly diagonal cubes and the centres of the maximal bad projections.
pub fn candidate_sites(
    field: &PairField,
    setup: &LevelSetSetup,
    h_lambda: &[ProductCube],
    lambda: f64,
    kappa: f64,
) -> Vec<(Vec<f64>, SiteKind)> {
    let d = *field.derived();
    let g = &setup.geometry;
    let lat = &setup.lattice;
    let mut sites: Vec<(Vec<f64>, SiteKind)> = lattice_sites(field, &g.x0, g.beta)
        .into_iter()
        .map(|x| (x, SiteKind::Lattice))
        .collect();
    let (recs, _) = preclassify(setup, h_lambda, lambda, kappa, d.p_prime, d.gamma);
    let mut seen: BTreeSet<Vec<u64>> = BTreeSet::new();
    for r in recs.iter().filter(|r| r.tag == CubeTag::NearDiagonal) {
        let a = r.cube.k1.center(lat);
        let b = r.cube.k2.center(lat);
        let mid: Vec<f64> = a.iter().zip(&b).map(|(u, v)| 0.5 * (u + v)).collect();
        if seen.insert(mid.iter().map(|v| v.to_bits()).collect()) {
            sites.push((mid, SiteKind::NearDiagonal));
        }
    }
    for m in maximal_diagonal(&bad_projections(&recs), setup.k0) {
        let c = m.k1.center(lat);
        if seen.insert(c.iter().map(|v| v.to_bits()).collect()) {
            sites.push((c, SiteKind::ProblemCube));
        }
    }
    sites
}

/// Whether every cell-pair centre of the cube lies in the dilated cover.
fn cube_covered(
    field: &PairField,
    setup: &LevelSetSetup,
    cube: &ProductCube,
    cover: &ExitCover,
) -> bool {
    let spec = field.spec();
    let n = spec.n;
    let c1 = setup.cube_cells(field, &cube.k1);
    let c2 = setup.cube_cells(field, &cube.k2);
    c1.iter().all(|&i| {
        let x = spec.center(i);
        c2.iter()
            .all(|&j| cover.covers(&x[..n], &spec.center(j)[..n]))
    })
}

pub fn classify_cubes(
    field: &PairField,
    setup: &LevelSetSetup,
    h_lambda: &[ProductCube],
    cover: &ExitCover,
    lambda: f64,
    kappa: f64,
) -> CubeFamilies {
    let d = *field.derived();
    let (mut recs, cutoff) = preclassify(setup, h_lambda, lambda, kappa, d.p_prime, d.gamma);
    let covered: Vec<bool> = recs
        .par_iter()
        .map(|r| match r.tag {
            CubeTag::NearDiagonal | CubeTag::BadUncovered => {
                cube_covered(field, setup, &r.cube, cover)
            }
            _ => false,
        })
        .collect();
    let mut uncovered_near = 0;
    for (r, &cov) in recs.iter_mut().zip(&covered) {
        match r.tag {
            CubeTag::NearDiagonal if !cov => uncovered_near += 1,
            CubeTag::BadUncovered if cov => r.tag = CubeTag::BadCovered,
            _ => {}
        }
    }
    let pi_b = maximal_diagonal(&bad_projections(&recs), setup.k0);
    // partition audit: each cube once, tag consistent with its defining tests
    let unique: BTreeSet<ProductCube> = recs.iter().map(|r| r.cube).collect();
    let partition_ok = unique.len() == recs.len()
        && recs.iter().all(|r| {
            let near = r.predecessor_distance < r.cube.side();
            let bad = r.bad[0] || r.bad[1];
            match r.tag {
                CubeTag::NearDiagonal => near,
                CubeTag::Good => !near && !bad,
                CubeTag::BadCovered | CubeTag::BadUncovered => !near && bad,
            }
        });
    let index: BTreeMap<ProductCube, usize> =
        recs.iter().enumerate().map(|(i, r)| (r.cube, i)).collect();
    let mut pairs = 0;
    let mut mismatches = 0;
    for r in &recs {
        if r.cube.is_diagonal() {
            continue;
        }
        if let Some(&j) = index.get(&r.cube.symm()) {
            pairs += 1;
            let o = &recs[j];
            let nd = |t: CubeTag| t == CubeTag::BadUncovered;
            if r.bad[0] != o.bad[1] || (nd(r.tag) && r.bad[0]) != (nd(o.tag) && o.bad[1]) {
                mismatches += 1;
            }
        }
    }
    CubeFamilies {
        lambda,
        kappa,
        bad_cutoff: cutoff,
        records: recs,
        pi_b,
        partition_ok,
        near_diagonal_covered: uncovered_near == 0,
        uncovered_near_diagonal: uncovered_near,
        symmetric_pairs: pairs,
        symmetry_mismatches: mismatches,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadEntry {
    pub cube: ProductCube,
    pub h: u8,
    pub problem: ProductCube,
    pub i: i32,
    /// None when the factor distance is below 2^{-k(M)}.
    pub j: Option<i32>,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadPartition {
    pub entries: Vec<BadEntry>,
    /// Largest # of cubes in one (h, M, i, j, m) class divided by 2^{n(i+j)}.
    pub max_count_ratio: f64,
    /// C(n) = 5^n bounds the number of level-k cubes within the distance band.
    pub cardinality_constant: f64,
    pub cardinality_ok: bool,
    pub classes: usize,
    pub combinatorial_violations: usize,
    pub unassigned: usize,
}

pub fn partition_bad_families(setup: &LevelSetSetup, fam: &CubeFamilies) -> BadPartition {
    let n = setup.n();
    let pi: BTreeSet<ProductCube> = fam.pi_b.iter().copied().collect();
    let mut entries = Vec::new();
    let mut unassigned = 0;
    for r in fam.with_tag(CubeTag::BadUncovered) {
        for h in 1..=2u8 {
            if !r.bad[h as usize - 1] {
                continue;
            }
            let proj = r.cube.projection(h);
            let owner = (setup.k0..=proj.level())
                .map(|l| proj.ancestor(l))
                .find(|a| pi.contains(a));
            let Some(m_cube) = owner else {
                unassigned += 1;
                continue;
            };
            let i = r.cube.level() - m_cube.level();
            let scaled = r.distance * 2f64.powi(m_cube.level());
            let j = if scaled >= 1.0 {
                Some(scaled.log2().floor() as i32)
            } else {
                None
            };
            let k = if h == 1 { r.cube.k1 } else { r.cube.k2 };
            let per = 1i64 << i;
            let mut m = 0usize;
            for a in (0..n).rev() {
                m = m * per as usize + (k.z[a] - m_cube.k1.z[a] * per) as usize;
            }
            entries.push(BadEntry {
                cube: r.cube,
                h,
                problem: m_cube,
                i,
                j,
                m,
            });
        }
    }
    let mut counts: BTreeMap<(u8, ProductCube, i32, i32, usize), usize> = BTreeMap::new();
    let mut violations = 0;
    for e in &entries {
        match e.j {
            Some(j) => *counts.entry((e.h, e.problem, e.i, j, e.m)).or_default() += 1,
            None => violations += 1,
        }
    }
    let bound = 5f64.powi(n as i32);
    let mut max_ratio: f64 = 0.0;
    for ((_, _, i, j, _), &c) in &counts {
        max_ratio = max_ratio.max(c as f64 / 2f64.powi(n as i32 * (i + j)));
    }
    BadPartition {
        entries,
        max_count_ratio: max_ratio,
        cardinality_constant: bound,
        cardinality_ok: max_ratio <= bound,
        classes: counts.len(),
        combinatorial_violations: violations,
        unassigned,
    }
}

/// Everything one lambda produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub lambda: f64,
    pub kappa: f64,
    pub m_big: f64,
    pub mode: Mode,
    pub h_lambda: Vec<ProductCube>,
    pub cz: CzAudit,
    pub cover: ExitCover,
    pub families: CubeFamilies,
    pub partition: BadPartition,
    pub observations: Vec<String>,
}

impl PipelineRun {
    /// Soundness of the decomposition as asserted in theorem mode.
    pub fn sound(&self) -> bool {
        self.cz.holds()
            && self.cover.kept_disjoint
            && self.cover.level_set_covered
            && self.families.partition_ok
            && self.families.near_diagonal_covered
            && self.partition.cardinality_ok
    }
}

pub struct PipelineOptions {
    pub mode: Mode,
    pub m_big: f64,
    pub per_octave: usize,
}

pub fn run_pipeline(
    field: &PairField,
    setup: &LevelSetSetup,
    lambda: f64,
    kappa: f64,
    thresholds: Option<&Thresholds>,
    opts: &PipelineOptions,
) -> Result<PipelineRun> {
    let d = *field.derived();
    let mut obs = Vec::new();
    if opts.mode == Mode::Theorem {
        if !setup.geometry.scale.is_faithful() {
            return Err(Error::Geometry(
                "theorem mode needs the faithful geometry scale".into(),
            ));
        }
        let t = thresholds.ok_or_else(|| Error::Missing("thresholds".into()))?;
        if lambda < t.lambda0.max(t.lambda2) {
            return Err(Error::Domain(format!(
                "lambda = {lambda} below lambda0 = {} in theorem mode",
                t.lambda0
            )));
        }
    } else if let Some(t) = thresholds {
        if lambda < t.lambda2 {
            obs.push(format!("below lambda2 {}", fmt_num(t.lambda2)));
        }
        if lambda < t.lambda1 {
            obs.push(format!("below lambda1 {}", fmt_num(t.lambda1)));
        }
    }
    let (h_lambda, cz) = build_h_lambda(setup, lambda, d.p_prime)?;
    let sites = candidate_sites(field, setup, &h_lambda, lambda, kappa);
    let cover = exit_cover(
        field,
        setup,
        &sites,
        kappa * lambda,
        opts.m_big,
        opts.per_octave,
    );
    let outside = cover.level_set.iter().filter(|b| !b.in_beta_ball).count();
    if outside > 0 {
        obs.push(format!("{outside} exit sites lie outside B(x0, beta)"));
    }
    if !cover.dilations_inside_alpha {
        obs.push("some 10-dilated balls leave B(x0, alpha)".into());
    }
    let families = classify_cubes(field, setup, &h_lambda, &cover, lambda, kappa);
    let partition = partition_bad_families(setup, &families);
    if partition.combinatorial_violations > 0 {
        obs.push(format!(
            "{} bad cubes sit closer than 2^-k(M) to the diagonal",
            partition.combinatorial_violations
        ));
    }
    let run = PipelineRun {
        lambda,
        kappa,
        m_big: opts.m_big,
        mode: opts.mode,
        h_lambda,
        cz,
        cover,
        families,
        partition,
        observations: obs,
    };
    if opts.mode == Mode::Theorem && (!run.sound() || run.partition.combinatorial_violations > 0) {
        return Err(Error::Combinatorial(
            "decomposition audit failed in theorem mode".into(),
        ));
    }
    Ok(run)
}

/// Cells of a ball, shared helper for the checks.
pub fn ball_cells(field: &PairField, x: &[f64], r: f64) -> Vec<usize> {
    field.spec().cells_in_ball(x, r)
}

/// Matrix of `quantity^power` restricted to `{quantity > above}`.
pub fn level_matrix(
    field: &PairField,
    quantity: KernelKind,
    power: f64,
    above: f64,
) -> Arc<Vec<f64>> {
    field.matrix(&Integrand::new(quantity, power).above(above))
}
