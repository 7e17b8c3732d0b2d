//! Calderon-Zygmund selection of product cubes over a pyramid of block sums.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::{DyadicCube, ProductCube};
use crate::error::{Error, Result};
use crate::grid::MAX_DIM;

/// A nonnegative density known through its integral and mass on product cubes.
pub trait PairDensity: Sync {
    fn n(&self) -> usize;
    fn finest_level(&self) -> i32;
    fn integral(&self, cube: &ProductCube) -> f64;
    fn mass(&self, cube: &ProductCube) -> f64;

    /// Mass-weighted average; zero when the cube carries no mass.
    fn average(&self, cube: &ProductCube) -> f64 {
        let m = self.mass(cube);
        if m > 0.0 {
            self.integral(cube) / m
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone)]
struct PyramidLevel {
    per_axis: usize,
    value: Vec<f64>,
    mass: Vec<f64>,
}

/// Block sums of a value and a mass array over all dyadic product cubes
/// between a root level and the finest level, on a square window of root cubes.
#[derive(Debug, Clone)]
pub struct PairPyramid {
    n: usize,
    root_level: i32,
    /// Root-level index of the lowest window cube along each axis.
    origin: [i64; MAX_DIM],
    levels: Vec<PyramidLevel>,
}

fn flat(n: usize, per_axis: usize, a: &[i64], b: &[i64]) -> usize {
    let mut code = 0usize;
    for v in a.iter().take(n).chain(b.iter().take(n)) {
        code = code * per_axis + *v as usize;
    }
    code
}

impl PairPyramid {
    /// `value` and `mass` are indexed by the 2n fine coordinates (first factor
    /// first, most significant axis first), `per_axis` fine cells per axis.
    pub fn from_fine(
        n: usize,
        root_level: i32,
        fine_level: i32,
        origin: &[i64],
        value: Vec<f64>,
        mass: Vec<f64>,
    ) -> Result<Self> {
        if fine_level < root_level {
            return Err(Error::Geometry("finest level above root level".into()));
        }
        let depth = (fine_level - root_level) as u32;
        let total = value.len();
        if total != mass.len() {
            return Err(Error::Inconsistent("value and mass sizes differ".into()));
        }
        let per_axis = (total as f64).powf(1.0 / (2 * n) as f64).round() as usize;
        if per_axis.pow(2 * n as u32) != total || per_axis % (1usize << depth) != 0 {
            return Err(Error::Geometry(format!(
                "fine array of {total} entries is not a window of whole root cubes"
            )));
        }
        let mut o = [0i64; MAX_DIM];
        o[..n].copy_from_slice(&origin[..n]);
        let mut levels = vec![PyramidLevel {
            per_axis,
            value,
            mass,
        }];
        for _ in 0..depth {
            let fine = levels.last().expect("finest level present");
            let coarse_axis = fine.per_axis / 2;
            let size = coarse_axis.pow(2 * n as u32);
            let sums: Vec<(f64, f64)> = (0..size)
                .into_par_iter()
                .map(|code| {
                    let mut c = [0i64; 2 * MAX_DIM];
                    let mut rest = code;
                    for slot in (0..2 * n).rev() {
                        c[slot] = (rest % coarse_axis) as i64;
                        rest /= coarse_axis;
                    }
                    let mut v = 0.0;
                    let mut m = 0.0;
                    for mask in 0..1usize << (2 * n) {
                        let mut f = [0i64; 2 * MAX_DIM];
                        for slot in 0..2 * n {
                            f[slot] = 2 * c[slot] + ((mask >> slot) & 1) as i64;
                        }
                        let idx = flat(n, fine.per_axis, &f[..n], &f[n..2 * n]);
                        v += fine.value[idx];
                        m += fine.mass[idx];
                    }
                    (v, m)
                })
                .collect();
            let (value, mass) = sums.into_iter().unzip();
            levels.push(PyramidLevel {
                per_axis: coarse_axis,
                value,
                mass,
            });
        }
        levels.reverse();
        Ok(PairPyramid {
            n,
            root_level,
            origin: o,
            levels,
        })
    }

    pub fn root_level(&self) -> i32 {
        self.root_level
    }

    /// Root cubes along one axis.
    pub fn roots_per_axis(&self) -> usize {
        self.levels[0].per_axis
    }

    fn locate(&self, cube: &ProductCube) -> Option<(usize, usize)> {
        let depth = cube.level() - self.root_level;
        if depth < 0 || depth as usize >= self.levels.len() {
            return None;
        }
        let lvl = &self.levels[depth as usize];
        let mut a = [0i64; MAX_DIM];
        let mut b = [0i64; MAX_DIM];
        for ax in 0..self.n {
            a[ax] = cube.k1.z[ax] - (self.origin[ax] << depth);
            b[ax] = cube.k2.z[ax] - (self.origin[ax] << depth);
            let lim = lvl.per_axis as i64;
            if a[ax] < 0 || a[ax] >= lim || b[ax] < 0 || b[ax] >= lim {
                return None;
            }
        }
        Some((
            depth as usize,
            flat(self.n, lvl.per_axis, &a[..self.n], &b[..self.n]),
        ))
    }

    pub fn contains(&self, cube: &ProductCube) -> bool {
        self.locate(cube).is_some()
    }

    /// Every cube of one factor at `level` inside the window.
    pub fn factor_cubes(&self, level: i32) -> Vec<DyadicCube> {
        let depth = level - self.root_level;
        if depth < 0 || depth as usize >= self.levels.len() {
            return Vec::new();
        }
        let per_axis = self.levels[depth as usize].per_axis;
        let count = per_axis.pow(self.n as u32);
        (0..count)
            .map(|code| {
                let mut z = [0i64; MAX_DIM];
                let mut rest = code;
                for ax in (0..self.n).rev() {
                    z[ax] = (rest % per_axis) as i64 + (self.origin[ax] << depth);
                    rest /= per_axis;
                }
                DyadicCube { level, z }
            })
            .collect()
    }
}

impl PairDensity for PairPyramid {
    fn n(&self) -> usize {
        self.n
    }

    fn finest_level(&self) -> i32 {
        self.root_level + self.levels.len() as i32 - 1
    }

    fn integral(&self, cube: &ProductCube) -> f64 {
        match self.locate(cube) {
            Some((d, i)) => self.levels[d].value[i],
            None => 0.0,
        }
    }

    fn mass(&self, cube: &ProductCube) -> f64 {
        match self.locate(cube) {
            Some((d, i)) => self.levels[d].mass[i],
            None => 0.0,
        }
    }
}

/// Maximal dyadic subcubes of `root` on which the average of the density
/// exceeds `threshold`, found by recursive splitting down to the finest level.
pub fn cz_decompose<D: PairDensity>(
    density: &D,
    root: &ProductCube,
    threshold: f64,
) -> Result<Vec<ProductCube>> {
    let avg = density.average(root);
    if avg > threshold {
        return Err(Error::RootAverage { avg, threshold });
    }
    let n = density.n();
    let finest = density.finest_level();
    let mut out = Vec::new();
    let mut stack = vec![*root];
    while let Some(c) = stack.pop() {
        if c.level() >= finest {
            continue;
        }
        for child in c.children(n) {
            if density.average(&child) > threshold {
                out.push(child);
            } else {
                stack.push(child);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Selection over many roots, in root order.
pub fn cz_decompose_all<D: PairDensity>(
    density: &D,
    roots: &[ProductCube],
    threshold: f64,
) -> Result<Vec<ProductCube>> {
    let parts: Vec<Result<Vec<ProductCube>>> = roots
        .par_iter()
        .map(|r| cz_decompose(density, r, threshold))
        .collect();
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Exhaustive audit of a stopping family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CzAudit {
    pub selected: usize,
    pub disjoint: bool,
    pub above_threshold: bool,
    pub predecessor_bound: bool,
    /// Finest-level cubes outside the union all average at most the threshold.
    pub outside_bound: bool,
    pub max_outside_average: f64,
    pub min_selected_average: f64,
    pub max_predecessor_average: f64,
}

impl CzAudit {
    pub fn holds(&self) -> bool {
        self.disjoint && self.above_threshold && self.predecessor_bound && self.outside_bound
    }
}

pub fn cz_audit<D: PairDensity>(
    density: &D,
    roots: &[ProductCube],
    selected: &[ProductCube],
    threshold: f64,
) -> CzAudit {
    let n = density.n();
    let finest = density.finest_level();
    let set: BTreeSet<ProductCube> = selected.iter().copied().collect();
    // disjoint iff no selected cube has a selected strict ancestor
    let disjoint = set.len() == selected.len()
        && selected.iter().all(|c| {
            (roots.iter().map(|r| r.level()).min().unwrap_or(c.level())..c.level())
                .all(|l| !set.contains(&c.ancestor(l)))
        });
    let mut min_sel = f64::INFINITY;
    let mut max_pred: f64 = 0.0;
    for c in selected {
        min_sel = min_sel.min(density.average(c));
        max_pred = max_pred.max(density.average(&c.predecessor()));
    }
    let covered = |c: &ProductCube| -> bool {
        let lo = roots.first().map(|r| r.level()).unwrap_or(c.level());
        (lo..=c.level()).any(|l| set.contains(&c.ancestor(l)))
    };
    let mut max_out: f64 = 0.0;
    let mut stack: Vec<ProductCube> = roots.to_vec();
    while let Some(c) = stack.pop() {
        if set.contains(&c) {
            continue;
        }
        if c.level() == finest {
            if !covered(&c) {
                max_out = max_out.max(density.average(&c));
            }
        } else {
            stack.extend(c.children(n));
        }
    }
    CzAudit {
        selected: selected.len(),
        disjoint,
        above_threshold: selected.is_empty() || min_sel > threshold,
        predecessor_bound: max_pred <= threshold,
        outside_bound: max_out <= threshold,
        max_outside_average: max_out,
        min_selected_average: if selected.is_empty() { 0.0 } else { min_sel },
        max_predecessor_average: max_pred,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(cells: usize, value: impl Fn(&[usize]) -> f64) -> PairPyramid {
        let total = cells.pow(4);
        let mut v = vec![0.0; total];
        for (code, slot) in v.iter_mut().enumerate() {
            let mut c = [0usize; 4];
            let mut rest = code;
            for s in (0..4).rev() {
                c[s] = rest % cells;
                rest /= cells;
            }
            *slot = value(&c);
        }
        let depth = cells.trailing_zeros() as i32;
        PairPyramid::from_fine(2, 0, depth, &[0, 0], v, vec![1.0; total]).unwrap()
    }

    fn root() -> ProductCube {
        ProductCube::new(DyadicCube::new(0, &[0, 0]), DyadicCube::new(0, &[0, 0])).unwrap()
    }

    #[test]
    fn constant_density_selects_nothing() {
        let p = toy(4, |_| 2.0);
        assert!(cz_decompose(&p, &root(), 2.0).unwrap().is_empty());
    }

    #[test]
    fn spike_selects_one_cube_per_level_chain() {
        let p = toy(4, |c| if c == [1, 2, 3, 0] { 256.0 } else { 0.0 });
        // root average 1; the level-1 ancestor averages 16
        let sel = cz_decompose(&p, &root(), 1.0).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].level(), 1);
        let sel = cz_decompose(&p, &root(), 100.0).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].level(), 2);
        let audit = cz_audit(&p, &[root()], &sel, 100.0);
        assert!(audit.holds(), "{audit:?}");
    }

    #[test]
    fn root_violation_is_reported() {
        let p = toy(2, |_| 3.0);
        assert!(matches!(
            cz_decompose(&p, &root(), 1.0),
            Err(Error::RootAverage { .. })
        ));
    }

    #[test]
    fn pyramid_sums_match_direct_sums() {
        let p = toy(4, |c| (c[0] + 2 * c[1] + 3 * c[2] + 5 * c[3]) as f64);
        let cube =
            ProductCube::new(DyadicCube::new(1, &[1, 0]), DyadicCube::new(1, &[0, 1])).unwrap();
        let mut direct = 0.0;
        for a0 in 2..4 {
            for a1 in 0..2 {
                for b0 in 0..2 {
                    for b1 in 2..4 {
                        direct += (a0 + 2 * a1 + 3 * b0 + 5 * b1) as f64;
                    }
                }
            }
        }
        assert_eq!(p.integral(&cube), direct);
        assert_eq!(p.mass(&cube), 16.0);
    }
}
