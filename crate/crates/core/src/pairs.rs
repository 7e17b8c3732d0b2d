//! Cell-pair quadrature on a uniform grid for kernels |x-y|^{-kappa}.
//!
//! Pairs of cells with offset |d|_inf >= 2 use the exact kernel mass of the
//! cell pair times the integrand at the cell centres. Adjacent and identical
//! cells carry a node table in the difference variable z; each node records a
//! representative x inside the source cell so that x and x + z can be fed to
//! interpolated grid functions.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::Result;
use crate::grid::{GridSpec, MAX_DIM};
use crate::quadrature::{box_pair_integral, box_pair_nodes, Aabb, QuadOptions};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearNode {
    /// Position relative to the lower corner of the source cell.
    pub x: [f64; MAX_DIM],
    pub z: [f64; MAX_DIM],
    pub r: f64,
    pub w: f64,
}

#[derive(Debug, Clone)]
pub struct NearTable {
    pub offset: [i64; MAX_DIM],
    pub nodes: Vec<NearNode>,
    pub mass: f64,
}

#[derive(Debug, Clone)]
pub struct PairRule {
    pub n: usize,
    pub cells: usize,
    pub h: f64,
    pub kappa: f64,
    far: Vec<f64>,
    pub near: Vec<NearTable>,
}

fn far_code(n: usize, cells: usize, d: &[i64]) -> usize {
    let span = 2 * cells - 1;
    let mut code = 0usize;
    let mut stride = 1usize;
    for &v in d.iter().take(n) {
        code += (v + cells as i64 - 1) as usize * stride;
        stride *= span;
    }
    code
}

/// Index of an offset in {-1,0,1}^n, or None when some |d_a| > 1.
pub fn near_code(n: usize, d: &[i64]) -> Option<usize> {
    let mut code = 0usize;
    let mut stride = 1usize;
    for &v in d.iter().take(n) {
        if !(-1..=1).contains(&v) {
            return None;
        }
        code += (v + 1) as usize * stride;
        stride *= 3;
    }
    Some(code)
}

fn offsets(n: usize, lo: i64, hi: i64) -> Vec<[i64; MAX_DIM]> {
    let mut out = Vec::new();
    let mut d = [lo; MAX_DIM];
    for v in d.iter_mut().skip(n) {
        *v = 0;
    }
    loop {
        out.push(d);
        let mut a = 0;
        loop {
            if a == n {
                return out;
            }
            d[a] += 1;
            if d[a] <= hi {
                break;
            }
            d[a] = lo;
            a += 1;
        }
    }
}

impl PairRule {
    pub fn new(spec: &GridSpec, kappa: f64, near_opts: &QuadOptions) -> Result<Self> {
        let n = spec.n;
        let cells = spec.cells;
        let h = spec.h;
        let far_opts = QuadOptions::default();
        // Weights depend on |d| up to permutation; compute at unit spacing and scale.
        let all = offsets(n, -(cells as i64 - 1), cells as i64 - 1);
        let key = |d: &[i64; MAX_DIM]| {
            let mut k: Vec<i64> = d[..n].iter().map(|v| v.abs()).collect();
            k.sort_unstable();
            k
        };
        let mut keys: Vec<Vec<i64>> = all.iter().map(key).collect();
        keys.sort();
        keys.dedup();
        let unit = Aabb::new(vec![0.0; n], vec![1.0; n]);
        let values: Vec<Result<f64>> = keys
            .par_iter()
            .map(|k| {
                if k.iter().all(|&v| v <= 1) {
                    return Ok(0.0);
                }
                let lo: Vec<f64> = k.iter().map(|&v| v as f64).collect();
                let other = Aabb::cube(&lo, 1.0);
                box_pair_integral(&unit, &other, kappa, &far_opts)
            })
            .collect();
        let scale = h.powf(2.0 * n as f64 - kappa);
        let mut table = HashMap::new();
        for (k, v) in keys.into_iter().zip(values) {
            table.insert(k, v? * scale);
        }
        let mut far = vec![0.0; (2 * cells - 1).pow(n as u32)];
        for d in &all {
            far[far_code(n, cells, &d[..n])] = table[&key(d)];
        }

        let cell = Aabb::new(vec![0.0; n], vec![h; n]);
        let near_offsets = offsets(n, -1, 1);
        let near: Vec<Result<NearTable>> = near_offsets
            .par_iter()
            .map(|d| {
                let lo: Vec<f64> = (0..n).map(|a| d[a] as f64 * h).collect();
                let other = Aabb::cube(&lo, h);
                let mut nodes = Vec::new();
                let mut mass = crate::numeric::Neumaier::default();
                box_pair_nodes(&cell, &other, kappa, near_opts, &mut |z, w| {
                    let mut node = NearNode {
                        x: [0.0; MAX_DIM],
                        z: [0.0; MAX_DIM],
                        r: 0.0,
                        w,
                    };
                    let mut r2 = 0.0;
                    for a in 0..n {
                        // overlap of [0,h) with [d h - z, d h - z + h)
                        let lo_ov = (lo[a] - z[a]).max(0.0);
                        let hi_ov = (lo[a] - z[a] + h).min(h).max(lo_ov);
                        node.x[a] = 0.5 * (lo_ov + hi_ov);
                        node.z[a] = z[a];
                        r2 += z[a] * z[a];
                    }
                    node.r = r2.sqrt();
                    mass.add(w);
                    nodes.push(node);
                })?;
                Ok(NearTable {
                    offset: *d,
                    nodes,
                    mass: mass.sum(),
                })
            })
            .collect();
        let near = near.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(PairRule {
            n,
            cells,
            h,
            kappa,
            far,
            near,
        })
    }

    /// Kernel mass of the cell pair at offset d (far offsets only are exact
    /// cell-pair masses; near offsets return the node-table mass).
    pub fn pair_mass(&self, d: &[i64]) -> f64 {
        match near_code(self.n, d) {
            Some(c) => self.near[c].mass,
            None => self.far[far_code(self.n, self.cells, d)],
        }
    }

    pub fn far_weight(&self, d: &[i64]) -> f64 {
        self.far[far_code(self.n, self.cells, d)]
    }

    pub fn near_node_count(&self) -> usize {
        self.near.iter().map(|t| t.nodes.len()).sum()
    }
}
