//! Uniform cell grids over a box and sampled functions on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dimension supported by the grid machinery.
pub const MAX_DIM: usize = 3;

/// A cubic grid of `cells^n` cells of side `h` starting at `lo`.
/// Samples live at cell centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub lo: Vec<f64>,
    pub h: f64,
    pub cells: usize,
}

impl GridSpec {
    pub fn new(n: usize, lo: Vec<f64>, h: f64, cells: usize) -> Result<Self> {
        if n == 0 || n > MAX_DIM {
            return Err(Error::Domain(format!(
                "grid dimension {n} outside 1..={MAX_DIM}"
            )));
        }
        if lo.len() != n || !(h > 0.0) || cells == 0 {
            return Err(Error::Domain("invalid grid specification".into()));
        }
        Ok(GridSpec { n, lo, h, cells })
    }

    /// Grid over the symmetric box [-half, half]^n.
    pub fn centered(n: usize, half: f64, cells: usize) -> Result<Self> {
        GridSpec::new(n, vec![-half; n], 2.0 * half / cells as f64, cells)
    }

    pub fn len(&self) -> usize {
        self.cells.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hi(&self) -> Vec<f64> {
        self.lo
            .iter()
            .map(|a| a + self.h * self.cells as f64)
            .collect()
    }

    pub fn multi_index(&self, flat: usize) -> [i64; MAX_DIM] {
        let mut out = [0i64; MAX_DIM];
        let mut r = flat;
        for v in out.iter_mut().take(self.n) {
            *v = (r % self.cells) as i64;
            r /= self.cells;
        }
        out
    }

    pub fn flat_index(&self, idx: &[i64]) -> Option<usize> {
        let mut flat = 0usize;
        let mut stride = 1usize;
        for &v in idx.iter().take(self.n) {
            if v < 0 || v as usize >= self.cells {
                return None;
            }
            flat += v as usize * stride;
            stride *= self.cells;
        }
        Some(flat)
    }

    pub fn center(&self, flat: usize) -> [f64; MAX_DIM] {
        let idx = self.multi_index(flat);
        let mut c = [0.0; MAX_DIM];
        for a in 0..self.n {
            c[a] = self.lo[a] + (idx[a] as f64 + 0.5) * self.h;
        }
        c
    }

    pub fn centers(&self) -> Vec<[f64; MAX_DIM]> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }

    /// Cells whose centres lie in the open ball B(x, r).
    pub fn cells_in_ball(&self, x: &[f64], r: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                let c = self.center(i);
                dist2(&c[..self.n], x) < r * r
            })
            .collect()
    }

    /// Cells whose centres lie in the half-open box lo + [0, side)^n.
    pub fn cells_in_cube(&self, lo: &[f64], side: f64) -> Vec<usize> {
        let n = self.n;
        let mut ranges = Vec::with_capacity(n);
        for a in 0..n {
            // centre lo_g + (i + 1/2) h in [lo, lo + side)
            let first = ((lo[a] - self.lo[a]) / self.h - 0.5).ceil().max(0.0) as i64;
            let last_excl = ((lo[a] + side - self.lo[a]) / self.h - 0.5).ceil() as i64;
            let last_excl = last_excl.min(self.cells as i64);
            if last_excl <= first {
                return Vec::new();
            }
            ranges.push((first, last_excl));
        }
        let mut out = Vec::new();
        let mut idx: Vec<i64> = ranges.iter().map(|r| r.0).collect();
        loop {
            out.push(self.flat_index(&idx).expect("range clipped to grid"));
            let mut ax = 0;
            loop {
                if ax == n {
                    out.sort_unstable();
                    return out;
                }
                idx[ax] += 1;
                if idx[ax] < ranges[ax].1 {
                    break;
                }
                idx[ax] = ranges[ax].0;
                ax += 1;
            }
        }
    }

    /// Whether the closed box lies inside the grid box.
    pub fn contains_box(&self, lo: &[f64], hi: &[f64]) -> bool {
        let ghi = self.hi();
        (0..self.n).all(|a| lo[a] >= self.lo[a] - 1e-12 && hi[a] <= ghi[a] + 1e-12)
    }

    /// Largest distance from x to a corner of the grid box.
    pub fn farthest_corner(&self, x: &[f64]) -> f64 {
        let ghi = self.hi();
        (0..self.n)
            .map(|a| (x[a] - self.lo[a]).abs().max((ghi[a] - x[a]).abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Function sampled at cell centres, zero outside the grid box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub linf: f64,
}

impl GridFunction {
    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::Domain("value count does not match grid".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("grid function has non-finite values".into()));
        }
        let linf = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(GridFunction { spec, values, linf })
    }

    pub fn from_fn(spec: GridSpec, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..spec.len())
            .map(|i| f(&spec.center(i)[..spec.n]))
            .collect();
        GridFunction::from_values(spec, values)
    }

    pub fn zeros(spec: GridSpec) -> Self {
        let len = spec.len();
        GridFunction {
            spec,
            values: vec![0.0; len],
            linf: 0.0,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        GridFunction::from_values(
            self.spec.clone(),
            self.values.iter().map(|v| c * v).collect(),
        )
        .expect("scaling keeps values finite")
    }

    pub fn is_constant(&self) -> bool {
        self.values.windows(2).all(|w| w[0] == w[1])
    }

    /// Multilinear interpolation of the centre samples, zero outside the box.
    /// In the outer half cell along the boundary the nearest centre layer is
    /// extended as a constant.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let s = &self.spec;
        let n = s.n;
        let last = s.cells as i64 - 1;
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for a in 0..n {
            let rel = (x[a] - s.lo[a]) / s.h;
            if !(rel >= 0.0 && rel < s.cells as f64) {
                return 0.0;
            }
            let xi = rel - 0.5;
            let f = xi.floor();
            let (b, t) = if f < 0.0 {
                (0, 0.0)
            } else if f as i64 >= last {
                (last as usize, 0.0)
            } else {
                (f as usize, xi - f)
            };
            base[a] = b;
            frac[a] = t;
        }
        // corner values, then one lerp per axis from the last one down;
        // a + t (b - a) keeps constant data exact
        let mut corner = [0.0; 1 << MAX_DIM];
        for (mask, slot) in corner.iter_mut().enumerate().take(1 << n) {
            let mut flat = 0usize;
            let mut stride = 1usize;
            for a in 0..n {
                flat += (base[a] + (mask >> a & 1)) * stride;
                stride *= s.cells;
            }
            *slot = if mask & !active_mask(&frac[..n]) == 0 {
                self.values[flat]
            } else {
                0.0
            };
        }
        let mut len = 1usize << n;
        for a in (0..n).rev() {
            len /= 2;
            for m in 0..len {
                let (lo, hi) = (corner[m], corner[m + len]);
                corner[m] = if frac[a] == 0.0 {
                    lo
                } else {
                    lo + frac[a] * (hi - lo)
                };
            }
        }
        corner[0]
    }
}

/// Axes with a nonzero interpolation weight; other corners are never read.
fn active_mask(frac: &[f64]) -> usize {
    frac.iter()
        .enumerate()
        .filter(|(_, &t)| t != 0.0)
        .fold(0, |m, (a, _)| m | 1 << a)
}

/// Named test functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Catalog {
    Bump,
    PowerCusp(f64),
    TrigRandom(u64),
    Constant(f64),
    /// x -> c . x restricted to the grid box.
    Affine(Vec<f64>),
}

pub fn bump(x: &[f64]) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    if r2 < 1.0 {
        (-1.0 / (1.0 - r2)).exp()
    } else {
        0.0
    }
}

impl Catalog {
    /// Parses `bump`, `power-cusp(0.5)`, `trig-random(7)`, `constant(1)`, `affine(1,0)`.
    pub fn parse(spec: &str) -> Result<Self> {
        let s = spec.trim();
        let (name, arg) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], Some(&s[i + 1..s.len() - 1])),
            Some(_) => return Err(Error::UnknownFunction(spec.to_string())),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<f64> {
            a.ok_or_else(|| Error::UnknownFunction(spec.to_string()))?
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::UnknownFunction(spec.to_string()))
        };
        match name.trim() {
            "bump" if arg.is_none() => Ok(Catalog::Bump),
            "power-cusp" => Ok(Catalog::PowerCusp(num(arg)?)),
            "trig-random" => {
                let seed = arg
                    .ok_or_else(|| Error::UnknownFunction(spec.to_string()))?
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| Error::UnknownFunction(spec.to_string()))?;
                Ok(Catalog::TrigRandom(seed))
            }
            "constant" => Ok(Catalog::Constant(num(arg)?)),
            "affine" => {
                let a = arg.ok_or_else(|| Error::UnknownFunction(spec.to_string()))?;
                let c: std::result::Result<Vec<f64>, _> =
                    a.split(',').map(|v| v.trim().parse::<f64>()).collect();
                Ok(Catalog::Affine(
                    c.map_err(|_| Error::UnknownFunction(spec.to_string()))?,
                ))
            }
            _ => Err(Error::UnknownFunction(spec.to_string())),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Catalog::Bump => "bump".into(),
            Catalog::PowerCusp(s) => format!("power-cusp({s})"),
            Catalog::TrigRandom(seed) => format!("trig-random({seed})"),
            Catalog::Constant(c) => format!("constant({c})"),
            Catalog::Affine(c) => format!(
                "affine({})",
                c.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
        }
    }

    /// Samples the function at the cell centres of `spec`.
    pub fn sample(&self, spec: &GridSpec) -> Result<GridFunction> {
        match self {
            Catalog::Bump => GridFunction::from_fn(spec.clone(), bump),
            Catalog::PowerCusp(sc) => {
                if !(*sc > 0.0) {
                    return Err(Error::Domain(format!(
                        "cusp exponent {sc} must be positive"
                    )));
                }
                let sc = *sc;
                GridFunction::from_fn(spec.clone(), move |x| {
                    let r: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    r.powf(sc) * bump(x)
                })
            }
            Catalog::TrigRandom(seed) => {
                let modes = trig_modes(spec.n, *seed);
                GridFunction::from_fn(spec.clone(), move |x| {
                    let mut acc = 0.0;
                    for (amp, k, phase) in &modes {
                        let arg: f64 = k.iter().zip(x).map(|(a, b)| a * b).sum();
                        acc += amp * (std::f64::consts::PI * arg + phase).cos();
                    }
                    acc * bump(x)
                })
            }
            Catalog::Constant(c) => {
                let c = *c;
                GridFunction::from_fn(spec.clone(), move |_| c)
            }
            Catalog::Affine(coef) => {
                if coef.len() != spec.n {
                    return Err(Error::Domain(
                        "affine coefficients must match dimension".into(),
                    ));
                }
                let coef = coef.clone();
                GridFunction::from_fn(spec.clone(), move |x| {
                    coef.iter().zip(x).map(|(a, b)| a * b).sum()
                })
            }
        }
    }
}

fn trig_modes(n: usize, seed: u64) -> Vec<(f64, Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|_| {
            let amp = rng.gen_range(-1.0..1.0);
            let k: Vec<f64> = (0..n).map(|_| rng.gen_range(-3i32..=3) as f64).collect();
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (amp, k, phase)
        })
        .collect()
}
