//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use dualpair::cz::PairPyramid;
use dualpair::dyadic::{DyadicCube, ProductCube};

/// Fine pair array on a toy grid of `cells` per axis, n = 2, root level 0.
pub struct Toy {
    pub cells: usize,
    pub depth: i32,
    pub value: Vec<f64>,
    pub mass: Vec<f64>,
}

impl Toy {
    pub fn new(
        cells: usize,
        value: impl Fn([usize; 4]) -> f64,
        mass: impl Fn([usize; 4]) -> f64,
    ) -> Toy {
        let total = cells.pow(4);
        let mut v = Vec::with_capacity(total);
        let mut m = Vec::with_capacity(total);
        for code in 0..total {
            let mut c = [0usize; 4];
            let mut rest = code;
            for slot in (0..4).rev() {
                c[slot] = rest % cells;
                rest /= cells;
            }
            v.push(value(c));
            m.push(mass(c));
        }
        Toy {
            cells,
            depth: cells.trailing_zeros() as i32,
            value: v,
            mass: m,
        }
    }

    pub fn pyramid(&self) -> PairPyramid {
        PairPyramid::from_fine(
            2,
            0,
            self.depth,
            &[0, 0],
            self.value.clone(),
            self.mass.clone(),
        )
        .unwrap()
    }

    /// Average over a cube by direct summation of the fine cells.
    pub fn average(&self, cube: &ProductCube) -> f64 {
        let w = 1usize << (self.depth - cube.level());
        let lo = [cube.k1.z[0], cube.k1.z[1], cube.k2.z[0], cube.k2.z[1]].map(|z| z as usize * w);
        let (mut v, mut m) = (0.0, 0.0);
        for a in lo[0]..lo[0] + w {
            for b in lo[1]..lo[1] + w {
                for c in lo[2]..lo[2] + w {
                    for d in lo[3]..lo[3] + w {
                        let i = ((a * self.cells + b) * self.cells + c) * self.cells + d;
                        v += self.value[i];
                        m += self.mass[i];
                    }
                }
            }
        }
        if m > 0.0 {
            v / m
        } else {
            0.0
        }
    }

    pub fn cubes(&self, level: i32) -> Vec<ProductCube> {
        let per = 1i64 << level;
        let mut out = Vec::new();
        for a in 0..per {
            for b in 0..per {
                for c in 0..per {
                    for d in 0..per {
                        out.push(
                            ProductCube::new(
                                DyadicCube::new(level, &[a, b]),
                                DyadicCube::new(level, &[c, d]),
                            )
                            .unwrap(),
                        );
                    }
                }
            }
        }
        out
    }

    /// Maximal cubes strictly below the root whose average exceeds `threshold`.
    pub fn brute_force(&self, threshold: f64) -> BTreeSet<ProductCube> {
        let mut out = BTreeSet::new();
        for level in 1..=self.depth {
            for cube in self.cubes(level) {
                if self.average(&cube) > threshold
                    && (1..level).all(|l| self.average(&cube.ancestor(l)) <= threshold)
                {
                    out.insert(cube);
                }
            }
        }
        out
    }
}
