//! Runs the check suites named by a command and collects their records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dyadic::{empirical_dim_constants, DimConstants};
use crate::error::{Error, Result};
use crate::fields::{gagliardo_seminorm, lebesgue_energy, Integrand, PairField, PairKernel};
use crate::grid::{Catalog, GridSpec};
use crate::ledger::{c1_bound, constants_ledger, ConstantsLedger, LedgerInputs};
use crate::measure::{KernelKind, NuMeasure, RegionDescriptor};
use crate::params::{
    check_assumptions, conjugate, derive_exponents_unchecked, geometric_series_bound,
    sobolev_lower, sobolev_upper,
};
use crate::pipeline::{
    root_lambda, run_pipeline, thresholds, CubeTag, Geometry, LevelSetSetup, Mode, PipelineOptions,
    PipelineRun, SiteKind, Thresholds,
};
use crate::quadrature::Aabb;
use crate::report::fmt_num;
use crate::verify::{
    arh_sweep, check_level_set, check_pipeline, check_poincare_family, check_sums, drift,
    evaluate_rh_sides, CheckRecord, SumInputs, Term, DRIFT_LIMIT, QUADRATURE_TOL,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Tolerance of the exact identities.
pub const IDENTITY_TOL: f64 = 1e-12;
/// Relative tolerance of the doubling ratios.
pub const DOUBLING_TOL: f64 = 0.005;
/// Relative spread allowed in the ball scale law.
pub const SCALE_LAW_TOL: f64 = 0.01;
/// Largest accepted spread of a dimensional constant across eps.
pub const EPS_SPREAD_LIMIT: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Exponents,
    Measure,
    Energy,
    Decompose,
    Verify,
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Exponents => "exponents",
            Command::Measure => "measure",
            Command::Energy => "energy",
            Command::Decompose => "decompose",
            Command::Verify => "verify",
            Command::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<i32> for Cell {
    fn from(v: i32) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.into())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// A detail table, written as CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub values: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub records: Vec<CheckRecord>,
    #[serde(skip)]
    pub tables: Vec<Table>,
}

impl Section {
    fn new(name: &str) -> Self {
        Section {
            name: name.into(),
            values: BTreeMap::new(),
            notes: Vec::new(),
            records: Vec::new(),
            tables: Vec::new(),
        }
    }

    fn value(&mut self, key: &str, v: f64) {
        self.values.insert(key.into(), v);
    }

    pub fn record(&self, id: &str) -> Option<&CheckRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub records: usize,
    pub passed: usize,
    pub failed: usize,
    pub diagnostic: usize,
    pub failed_ids: Vec<String>,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub sections: Vec<Section>,
    pub summary: Summary,
}

impl Report {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn records(&self) -> impl Iterator<Item = (&Section, &CheckRecord)> {
        self.sections
            .iter()
            .flat_map(|s| s.records.iter().map(move |r| (s, r)))
    }
}

fn summarize(sections: &[Section]) -> Summary {
    let mut s = Summary {
        records: 0,
        passed: 0,
        failed: 0,
        diagnostic: 0,
        failed_ids: Vec::new(),
        exit_code: 0,
    };
    for sec in sections {
        for r in &sec.records {
            s.records += 1;
            if r.diagnostic {
                s.diagnostic += 1;
            }
            if r.fails() {
                s.failed += 1;
                s.failed_ids
                    .push(format!("{}/{} [{}]", sec.name, r.id, r.context));
            } else if r.passed {
                s.passed += 1;
            }
        }
    }
    s.exit_code = i32::from(s.failed > 0);
    s
}

fn term(name: &str, value: f64) -> Term {
    Term {
        name: name.into(),
        value,
    }
}

fn join_context(name: &str, ctx: &str) -> String {
    if ctx.is_empty() {
        name.to_string()
    } else {
        format!("{name}, {ctx}")
    }
}

fn rel_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Every derived quantity a function needs for the decomposition checks.
pub struct FieldRun {
    pub name: String,
    pub field: PairField,
    pub setup: LevelSetSetup,
    pub ledger: ConstantsLedger,
    pub c_nd: f64,
    pub kappa: f64,
    pub m_big: f64,
    pub thresholds: Thresholds,
    /// Reference level; the configured lambda factors multiply it.
    pub lambda_base: f64,
    pub runs: Vec<PipelineRun>,
}

/// Shared state of one invocation.
pub struct Suite {
    pub cfg: RunConfig,
    pub spec: GridSpec,
    pub geometry: Geometry,
    pub nu: NuMeasure,
    cache: std::sync::Mutex<Cache>,
}

#[derive(Default)]
struct Cache {
    c_d: Option<f64>,
    ball_constant: Option<f64>,
    dims: Option<Vec<DimConstants>>,
    arh: BTreeMap<String, (f64, Option<f64>)>,
}

impl Suite {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.grid_spec()?;
        let geometry = cfg.geometry();
        geometry.validate(cfg.params.n)?;
        let nu = NuMeasure::with_options(cfg.params, cfg.quad_options())?;
        Ok(Suite {
            cfg,
            spec,
            geometry,
            nu,
            cache: std::sync::Mutex::new(Cache::default()),
        })
    }

    pub fn field(&self, u: &str, spec: &GridSpec) -> Result<PairField> {
        let fs = &self.cfg.functions;
        let kernel = PairKernel::new(
            self.cfg.params,
            Catalog::parse(u)?.sample(spec)?,
            Catalog::parse(&fs.f)?.sample(spec)?,
            Catalog::parse(&fs.g)?.sample(spec)?,
        )?;
        PairField::new(kernel)
    }

    /// Grid with half as many cells per axis, when it still resolves the geometry.
    fn coarse_spec(&self) -> Option<GridSpec> {
        let cells = self.spec.cells / 2;
        if cells < 4 {
            return None;
        }
        GridSpec::centered(self.cfg.params.n, self.cfg.geometry.half_width, cells).ok()
    }

    pub fn run(&self, cmd: Command) -> Result<Report> {
        let mut sections = Vec::new();
        match cmd {
            Command::Exponents => sections.push(self.exponents()),
            Command::Measure => sections.push(self.measure()?),
            Command::Energy => sections.push(self.energy()?),
            Command::Decompose => sections.extend(self.decompose(false)?),
            Command::Verify => {
                sections.push(self.dimensional()?);
                sections.push(self.reverse_holder()?);
                sections.extend(self.decompose(true)?);
            }
            Command::All => {
                sections.push(self.exponents());
                sections.push(self.measure()?);
                sections.push(self.energy()?);
                sections.push(self.dimensional()?);
                sections.push(self.reverse_holder()?);
                sections.extend(self.decompose(true)?);
            }
        }
        let summary = summarize(&sections);
        Ok(Report {
            schema_version: REPORT_SCHEMA_VERSION,
            command: cmd.name().into(),
            config: self.cfg.clone(),
            sections,
            summary,
        })
    }

    pub fn exponents(&self) -> Section {
        let ps = self.cfg.params;
        let d = derive_exponents_unchecked(&ps);
        let n = ps.nf();
        let mut sec = Section::new("exponents");
        for (k, v) in [
            ("p_prime", d.p_prime),
            ("eta", d.eta),
            ("gamma", d.gamma),
            ("theta", d.theta),
            ("tau", d.tau),
            ("p_star_s", d.p_star_s),
            ("p_lower_s", d.p_lower_s),
            ("vartheta", d.vartheta),
            ("vartheta_f", d.vartheta_f),
            ("vartheta_f_tilde", d.vartheta_f_tilde),
            ("alpha_k_rate", d.alpha_k_rate),
            ("c1", c1_bound(&ps)),
        ] {
            sec.value(k, v);
        }
        let identity = |id: &str, stmt: &str, residual: f64| {
            CheckRecord::bound(id, stmt, residual.abs(), IDENTITY_TOL, 0.0)
        };
        sec.records.push(identity(
            "identity-gamma-eta",
            "gamma = eta/(p-1)",
            d.gamma - d.eta / (ps.p - 1.0),
        ));
        sec.records.push(identity(
            "identity-gamma-closed-form",
            "gamma = p'(n+eps p)/(n+sp+eps p)",
            d.gamma - d.p_prime * (n + ps.eps * ps.p) / (n + ps.s * ps.p + ps.eps * ps.p),
        ));
        sec.records.push(identity(
            "identity-tau",
            "tau + eps p/eta = s + eps",
            d.tau + ps.eps * ps.p / d.eta - (ps.s + ps.eps),
        ));
        sec.records.push(identity(
            "identity-sobolev-conjugate",
            "(r^{*sigma})' = r_{*sigma} at r = p, sigma = s",
            conjugate(sobolev_upper(n, ps.p, ps.s)) - sobolev_lower(n, ps.p, ps.s),
        ));
        sec.records.push(CheckRecord::bound(
            "f-exponent-product",
            "p_* theta < p/(p+1)",
            d.p_lower_s * d.theta,
            ps.p / (ps.p + 1.0),
            0.0,
        ));

        let gates = check_assumptions(&ps);
        let mut gate_table =
            Table::new("gates", &["name", "passed", "required", "slack", "detail"]);
        for g in &gates.gates {
            gate_table.push(vec![
                g.name.as_str().into(),
                g.passed.into(),
                g.required.into(),
                g.slack.into(),
                g.detail.as_str().into(),
            ]);
        }
        sec.records.push(CheckRecord::audit(
            "assumption-gates",
            "every required parameter gate holds",
            gates
                .gates
                .iter()
                .filter(|g| g.required && !g.passed)
                .count(),
        ));
        if gates.low_dimension_warning {
            sec.notes
                .push("n = 1: the low-dimension restrictions apply".into());
        }
        sec.tables.push(gate_table);

        let mut violations = 0;
        let mut worst: f64 = 0.0;
        for i in 1..=50 {
            let r = 0.1 * i as f64;
            for k in 1..=10 {
                let (lhs, rhs) = geometric_series_bound(k, r).expect("valid grid point");
                if lhs > rhs {
                    violations += 1;
                }
                worst = worst.max(lhs / rhs);
            }
        }
        sec.records.push(
            CheckRecord::audit(
                "geometric-series",
                "2^{kr} sum_{j>=k-1} 2^{-jr} <= 4^r/(r ln 2) on r in {0.1..5}, k in {1..10}",
                violations,
            )
            .with_terms(vec![term("largest_ratio", worst)]),
        );
        let rate = d.tail_rate(&ps, false);
        let tail_sum = 1.0 / (1.0 - 2f64.powf(-rate));
        sec.value("tail_weight_sum", tail_sum);
        sec.records.push(
            CheckRecord::report(
                "tail-weight-sum",
                "sum_k alpha_k = 1/(1 - 2^{-rate})",
                tail_sum,
                1.0,
            )
            .with_terms(vec![
                term("rate", rate),
                term("rate_without_coefficient", d.tail_rate(&ps, true)),
            ]),
        );
        sec
    }

    fn c_d(&self) -> Result<f64> {
        if let Some(v) = self.cache.lock().unwrap().c_d {
            return Ok(v);
        }
        let ex = &self.cfg.execution;
        let v = self
            .nu
            .fit_ball_cube_constant(&ex.cube_fractions, ex.cube_positions)?;
        self.cache.lock().unwrap().c_d = Some(v);
        Ok(v)
    }

    fn ball_constant(&self) -> Result<f64> {
        if let Some(v) = self.cache.lock().unwrap().ball_constant {
            return Ok(v);
        }
        let v = self.nu.ball_constant()?;
        self.cache.lock().unwrap().ball_constant = Some(v);
        Ok(v)
    }

    pub fn measure(&self) -> Result<Section> {
        let ps = self.cfg.params;
        let ex = &self.cfg.execution;
        let x0 = &self.geometry.x0;
        let mut sec = Section::new("measure");
        let mut table = Table::new(
            "measure",
            &[
                "region",
                "radius",
                "quadrature",
                "monte_carlo",
                "std_error",
                "exact_ratio",
            ],
        );
        let small = 0.25;
        for factor in [2.0, 4.0] {
            let (measured, exact) = self.nu.doubling_check(x0, factor * small, small)?;
            sec.records.push(
                CheckRecord::bound(
                    "doubling",
                    "|nu(B_R)/nu(B_r) / (R/r)^{n+eps p} - 1| within tolerance",
                    (measured / exact - 1.0).abs(),
                    DOUBLING_TOL,
                    0.0,
                )
                .with_terms(vec![term("measured", measured), term("exact", exact)])
                .with_context(format!("R/r = {factor}")),
            );
        }
        for (i, radius) in [0.25, 0.5, 1.0].into_iter().enumerate() {
            let region = RegionDescriptor::diagonal_ball(x0, radius);
            let q = self.nu.mass(&region)?;
            let (mc, se) =
                self.nu
                    .mc_oracle(&region, ex.mc_samples, ex.seed.wrapping_add(i as u64))?;
            sec.records.push(
                CheckRecord::bound(
                    "monte-carlo-ball",
                    "|quadrature - Monte Carlo| <= 3 standard errors",
                    (q - mc).abs(),
                    3.0 * se,
                    0.0,
                )
                .with_terms(vec![
                    term("quadrature", q),
                    term("monte_carlo", mc),
                    term("std_error", se),
                ])
                .with_context(format!("diagonal ball radius {radius}")),
            );
            table.push(vec![
                "diagonal-ball".into(),
                radius.into(),
                q.into(),
                mc.into(),
                se.into(),
                (q / self.nu.ball_mass(0.25)?).into(),
            ]);
        }
        let n = ps.n;
        let k1 = Aabb::cube(&vec![-0.5; n], 0.25);
        let mut lo2 = vec![-0.5; n];
        lo2[0] = 0.25;
        let k2 = Aabb::cube(&lo2, 0.25);
        let region = RegionDescriptor::product_cube(k1, k2);
        let q = self.nu.mass(&region)?;
        let (mc, se) = self
            .nu
            .mc_oracle(&region, ex.mc_samples, ex.seed.wrapping_add(17))?;
        sec.records.push(
            CheckRecord::bound(
                "monte-carlo-cubes",
                "|quadrature - Monte Carlo| <= 3 standard errors",
                (q - mc).abs(),
                3.0 * se,
                0.0,
            )
            .with_terms(vec![
                term("quadrature", q),
                term("monte_carlo", mc),
                term("std_error", se),
            ])
            .with_context("separated product cube of side 0.25"),
        );
        table.push(vec![
            "product-cube".into(),
            0.25.into(),
            q.into(),
            mc.into(),
            se.into(),
            0.0.into(),
        ]);

        let mut scaled = Vec::new();
        for radius in [0.25, 0.5, 1.0] {
            scaled.push(ps.eps * self.nu.ball_mass(radius)? / radius.powf(ps.doubling_exponent()));
        }
        let hi = scaled.iter().cloned().fold(f64::MIN, f64::max);
        let lo = scaled.iter().cloned().fold(f64::MAX, f64::min);
        sec.records.push(
            CheckRecord::bound(
                "scale-law",
                "eps nu(B(0,R))/R^{n+eps p} constant over R in {0.25, 0.5, 1}",
                hi / lo - 1.0,
                SCALE_LAW_TOL,
                0.0,
            )
            .with_terms(
                scaled
                    .iter()
                    .zip(["R=0.25", "R=0.5", "R=1"])
                    .map(|(v, k)| term(k, *v))
                    .collect(),
            ),
        );
        let ball = self.ball_constant()?;
        let c_d = self.c_d()?;
        sec.value("ball_constant", ball);
        sec.value("c_d", c_d);
        sec.records.push(CheckRecord::finite(
            "ball-constant",
            "eps nu(B(0,1) x B(0,1)) is finite",
            ball,
            1.0,
        ));
        sec.records.push(
            CheckRecord::finite(
                "cube-ball-constant",
                "eps a^{2n} nu(ball)/nu(cubes) over placements is finite",
                c_d,
                1.0,
            )
            .with_context(format!(
                "fractions {:?}, {} placements per axis",
                ex.cube_fractions, ex.cube_positions
            )),
        );
        sec.tables.push(table);
        Ok(sec)
    }

    pub fn energy(&self) -> Result<Section> {
        let ps = self.cfg.params;
        let mut sec = Section::new("energy");
        let mut table = Table::new(
            "energy",
            &[
                "function",
                "nu_energy",
                "lebesgue_energy",
                "nu_u_p",
                "gagliardo_s_p",
                "gagliardo_t_q",
            ],
        );
        let coarse = self.coarse_spec();
        let g = &self.geometry;
        let radius = 0.5 * g.rho0;
        for name in &self.cfg.functions.decompose {
            let field = self.field(name, &self.spec)?;
            let all: Vec<usize> = (0..self.spec.len()).collect();
            let nu_energy = field.block_sum(
                &field.matrix(&Integrand::new(KernelKind::G, 1.0)),
                &all,
                &all,
            );
            let leb = lebesgue_energy(&field, &all)?;
            sec.records.push(
                CheckRecord::bound(
                    "energy-identity",
                    "int (U^p + A U^q) dnu equals the Lebesgue form of the energy",
                    rel_gap(nu_energy, leb),
                    QUADRATURE_TOL,
                    0.0,
                )
                .with_terms(vec![
                    term("nu_route", nu_energy),
                    term("lebesgue_route", leb),
                ])
                .with_context(name.clone()),
            );
            let nu_up = field.block_sum(
                &field.matrix(&Integrand::new(KernelKind::U, ps.p)),
                &all,
                &all,
            );
            let semi_sp = gagliardo_seminorm(&field, ps.s, ps.p, &all, None)?;
            let semi_tq = gagliardo_seminorm(&field, ps.t, ps.q, &all, None)?;
            sec.records.push(
                CheckRecord::bound(
                    "seminorm-identity",
                    "int U^p dnu equals the W^{s,p} Gagliardo integral",
                    rel_gap(nu_up, semi_sp),
                    QUADRATURE_TOL,
                    0.0,
                )
                .with_terms(vec![term("nu_route", nu_up), term("gagliardo", semi_sp)])
                .with_context(name.clone()),
            );
            table.push(vec![
                name.as_str().into(),
                nu_energy.into(),
                leb.into(),
                nu_up.into(),
                semi_sp.into(),
                semi_tq.into(),
            ]);

            let fine = check_poincare_family(&field, &g.x0, radius, ps.s, ps.p)?;
            let fine_embed = fine
                .iter()
                .find(|r| r.id == "dual-pair-embedding")
                .map(|r| r.fitted);
            for r in fine {
                sec.records
                    .push(r.with_context(format!("{name}, ball ({:?}, {radius})", g.x0)));
            }
            if let (Some(cs), Some(fe)) = (&coarse, fine_embed) {
                let cf = self.field(name, cs)?;
                let coarse_recs = check_poincare_family(&cf, &g.x0, radius, ps.s, ps.p)?;
                if let Some(ce) = coarse_recs.iter().find(|r| r.id == "dual-pair-embedding") {
                    sec.records.push(
                        CheckRecord::bound(
                            "embedding-refinement",
                            "dual-pair embedding constant drifts by less than a factor 2 under refinement",
                            drift(ce.fitted, fe),
                            DRIFT_LIMIT,
                            0.0,
                        )
                        .with_terms(vec![term("coarse", ce.fitted), term("fine", fe)])
                        .with_context(format!("{name}, grids {} and {}", cs.cells, self.spec.cells)),
                    );
                }
            }
        }
        sec.tables.push(table);
        Ok(sec)
    }

    fn dim_constants(&self) -> Result<Vec<DimConstants>> {
        if let Some(v) = &self.cache.lock().unwrap().dims {
            return Ok(v.clone());
        }
        let g = &self.geometry;
        let k0 = g.k0(self.cfg.params.n)?;
        let levels: Vec<i32> = (k0..=k0 + 3).collect();
        let mut eps_set = self.cfg.execution.dim_eps.clone();
        if !eps_set.contains(&self.cfg.params.eps) {
            eps_set.push(self.cfg.params.eps);
        }
        let v = empirical_dim_constants(
            &g.lattice(),
            g.alpha,
            g.beta,
            &levels,
            g.admission,
            &self.cfg.params,
            &eps_set,
        )?;
        self.cache.lock().unwrap().dims = Some(v.clone());
        Ok(v)
    }

    fn dims_at_config_eps(&self) -> Result<DimConstants> {
        let eps = self.cfg.params.eps;
        self.dim_constants()?
            .into_iter()
            .find(|d| d.eps == eps)
            .ok_or_else(|| Error::Missing("dimensional constants at the configured eps".into()))
    }

    pub fn dimensional(&self) -> Result<Section> {
        let mut sec = Section::new("dimensional");
        let dims = self.dim_constants()?;
        let mut table = Table::new(
            "dimensional",
            &[
                "eps",
                "c_dd_first",
                "c_dd_second",
                "c_dd",
                "c_ddd",
                "offsets",
                "predecessor_cases",
            ],
        );
        for d in &dims {
            table.push(vec![
                d.eps.into(),
                d.c_dd_first.into(),
                d.c_dd_second.into(),
                d.c_dd.into(),
                d.c_ddd.into(),
                d.offsets.into(),
                d.predecessor_cases.into(),
            ]);
        }
        let swept: Vec<&DimConstants> = dims
            .iter()
            .filter(|d| self.cfg.execution.dim_eps.contains(&d.eps))
            .collect();
        for (id, pick) in [
            (
                "c-dd-eps-spread",
                (|d: &DimConstants| d.c_dd) as fn(&DimConstants) -> f64,
            ),
            ("c-ddd-eps-spread", |d: &DimConstants| d.c_ddd),
        ] {
            let vals: Vec<f64> = swept.iter().map(|d| pick(d)).collect();
            let hi = vals.iter().cloned().fold(0.0, f64::max);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            sec.records.push(
                CheckRecord::bound(
                    id,
                    "max/min of the empirical constant across eps stays below 4",
                    hi / lo,
                    EPS_SPREAD_LIMIT,
                    0.0,
                )
                .with_terms(
                    swept
                        .iter()
                        .map(|d| term(&format!("eps={}", d.eps), pick(d)))
                        .collect(),
                ),
            );
        }
        sec.tables.push(table);
        Ok(sec)
    }

    /// C_nd of `name` at the configured grid and, when the coarse grid still
    /// resolves the geometry, its drift over the levels both grids share.
    fn arh_constants(
        &self,
        name: &str,
        levels_table: Option<&mut Table>,
    ) -> Result<(f64, Option<f64>, usize, usize)> {
        let field = self.field(name, &self.spec)?;
        let setup = LevelSetSetup::new(&field, &self.geometry)?;
        let fine = arh_sweep(&field, &setup, setup.fine_level);
        let mut sweeps = Vec::new();
        let mut drift_value = None;
        if let Some(cs) = self.coarse_spec() {
            let cf = self.field(name, &cs)?;
            if let Ok(csetup) = LevelSetSetup::new(&cf, &self.geometry) {
                let c = arh_sweep(&cf, &csetup, csetup.fine_level);
                let levels: Vec<i32> = c.levels.iter().map(|l| l.0).collect();
                drift_value = Some(drift(fine.sup_over(&levels), c.c_nd));
                sweeps.push((cs.cells, c));
            }
        }
        if let Some(t) = levels_table {
            for (cells, sw) in sweeps
                .iter()
                .map(|(c, s)| (*c, s))
                .chain(std::iter::once((self.spec.cells, &fine)))
            {
                for (level, sup, count) in &sw.levels {
                    t.push(vec![
                        name.into(),
                        cells.into(),
                        (*level).into(),
                        (*sup).into(),
                        (*count).into(),
                    ]);
                }
            }
        }
        self.cache
            .lock()
            .unwrap()
            .arh
            .insert(name.into(), (fine.c_nd, drift_value));
        Ok((fine.c_nd, drift_value, fine.cubes, fine.jensen_violations))
    }

    fn c_nd(&self, name: &str) -> Result<f64> {
        if let Some((c, _)) = self.cache.lock().unwrap().arh.get(name) {
            return Ok(*c);
        }
        Ok(self.arh_constants(name, None)?.0)
    }

    pub fn reverse_holder(&self) -> Result<Section> {
        let mut sec = Section::new("offdiag-reverse-holder");
        let mut table = Table::new(
            "offdiag_reverse_holder",
            &["function", "grid", "level", "sup_fitted", "cubes"],
        );
        let mut names = self.cfg.functions.reverse_holder.clone();
        for n in &self.cfg.functions.decompose {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
        for name in &names {
            let (c_nd, dr, cubes, jensen) = self.arh_constants(name, Some(&mut table))?;
            sec.value(&format!("c_nd[{name}]"), c_nd);
            sec.records.push(
                CheckRecord::finite(
                    "offdiag-arh-constant",
                    "sup over off-diagonal cubes of lhs/rhs is finite",
                    c_nd,
                    1.0,
                )
                .with_terms(vec![term("cubes", cubes as f64)])
                .with_context(name.clone()),
            );
            sec.records.push(
                CheckRecord::audit(
                    "offdiag-arh-jensen",
                    "(avg H^g)^{1/g} <= (avg H^p')^{1/p'} on every cube",
                    jensen,
                )
                .with_context(name.clone()),
            );
            match dr {
                Some(v) => sec.records.push(
                    CheckRecord::bound(
                        "offdiag-arh-refinement",
                        "C_nd over common levels drifts by less than a factor 2 under refinement",
                        v,
                        DRIFT_LIMIT,
                        0.0,
                    )
                    .with_context(name.clone()),
                ),
                None => sec.notes.push(format!(
                    "{name}: coarse grid does not resolve the geometry, no refinement check"
                )),
            }
        }
        sec.tables.push(table);
        Ok(sec)
    }

    /// Ledger, thresholds and one pipeline run per lambda factor for `name`.
    pub fn field_run(&self, name: &str) -> Result<FieldRun> {
        let ps = self.cfg.params;
        let ex = &self.cfg.execution;
        let field = self.field(name, &self.spec)?;
        let setup = LevelSetSetup::new(&field, &self.geometry)?;
        let measured = self.c_nd(name)?;
        // constants of an inequality only matter as upper bounds
        let c_nd = measured.max(1.0);
        let dims = self.dims_at_config_eps().ok();
        let inputs = LedgerInputs {
            c_d: Some(self.c_d()?),
            c_nd: Some(c_nd),
            c_dd: dims.as_ref().map(|d| d.c_dd),
            c_ddd: dims.as_ref().map(|d| d.c_ddd),
            ball_constant: Some(self.ball_constant()?),
            ..LedgerInputs::default()
        };
        let ledger = constants_ledger(&ps, &inputs)?;
        let kappa = ex.kappa.unwrap_or(ledger.kappa);
        let m_big = ex.m_big.unwrap_or(ledger.m_big);
        let th = thresholds(
            &field,
            &setup,
            kappa,
            m_big,
            inputs.c_a,
            ex.radii_per_octave,
        )?;
        let d = *field.derived();
        let lr = root_lambda(&setup, d.p_prime);
        let lambda_base = match ex.mode {
            Mode::Theorem => th.lambda0.max(th.lambda2),
            Mode::Diagnostic if lr > 0.0 => lr,
            Mode::Diagnostic if th.lambda1 > 0.0 => th.lambda1,
            Mode::Diagnostic => 1.0,
        };
        let opts = PipelineOptions {
            mode: ex.mode,
            m_big,
            per_octave: ex.radii_per_octave,
        };
        let mut runs = Vec::new();
        for &f in &ex.lambda_factors {
            runs.push(run_pipeline(
                &field,
                &setup,
                f * lambda_base,
                kappa,
                Some(&th),
                &opts,
            )?);
        }
        Ok(FieldRun {
            name: name.into(),
            field,
            setup,
            ledger,
            c_nd,
            kappa,
            m_big,
            thresholds: th,
            lambda_base,
            runs,
        })
    }

    pub fn decompose(&self, with_sums: bool) -> Result<Vec<Section>> {
        let mut out = Vec::new();
        let mut ledger_sec = Section::new("ledger");
        for name in &self.cfg.functions.decompose {
            let fr = self.field_run(name)?;
            let mut sec = Section::new(&format!("decompose[{name}]"));
            trace_tables(&fr, &mut sec);
            let l = &fr.ledger;
            for (k, v) in [
                ("c_nd", fr.c_nd),
                ("kappa", fr.kappa),
                ("m_big", fr.m_big),
                ("lambda_base", fr.lambda_base),
                ("lambda0", fr.thresholds.lambda0),
                ("lambda1", fr.thresholds.lambda1),
                ("lambda2", fr.thresholds.lambda2),
                ("lambda_root", fr.thresholds.lambda_root),
            ] {
                sec.value(k, v);
            }
            if ledger_sec.values.is_empty() {
                for (k, v) in [
                    ("c1", l.c1),
                    ("sigma_rh", l.sigma_rh),
                    ("kappa_tilde", l.kappa_tilde),
                    ("kappa_hat", l.kappa_hat),
                    ("kappa_f", l.kappa_f),
                    ("kappa0_conjugate", l.kappa0_conjugate),
                    ("kappa0_displayed", l.kappa0_displayed),
                    ("kappa0", l.kappa0),
                    ("c5", l.c5),
                    ("l_mass", l.l_mass),
                    ("bad_cutoff_factor", l.bad_cutoff_factor),
                    ("dilation_factor", l.dilation_factor()),
                ] {
                    ledger_sec.value(k, v);
                }
                ledger_sec.notes.extend(l.flags.iter().cloned());
            }
            ledger_sec.value(&format!("kappa1[{name}]"), l.kappa1);
            ledger_sec.value(&format!("kappa2[{name}]"), l.kappa2);
            ledger_sec.value(&format!("kappa[{name}]"), l.kappa);
            for run in &fr.runs {
                for obs in &run.observations {
                    sec.notes
                        .push(format!("lambda {}: {obs}", fmt_num(run.lambda)));
                }
                for r in check_pipeline(run) {
                    let c = join_context(name, &r.context);
                    sec.records.push(r.with_context(c));
                }
            }
            if with_sums {
                self.sums_for(&fr, &mut sec)?;
            }
            out.push(sec);
        }
        out.insert(0, ledger_sec);
        Ok(out)
    }

    fn sums_for(&self, fr: &FieldRun, sec: &mut Section) -> Result<()> {
        let name = &fr.name;
        let c_ddd = self.dims_at_config_eps()?.c_ddd;
        let inputs = SumInputs {
            ledger: &fr.ledger,
            c_nd: fr.c_nd,
            c_ddd,
            thresholds: Some(&fr.thresholds),
        };
        for run in &fr.runs {
            for r in check_sums(&fr.field, &fr.setup, run, &inputs)? {
                let c = join_context(name, &r.context);
                sec.records.push(r.with_context(c));
            }
        }
        let lambdas: Vec<f64> = self
            .cfg
            .execution
            .level_set_factors
            .iter()
            .map(|f| f * fr.lambda_base)
            .collect();
        let mut sweep = Table::new(
            "level_set_sweep",
            &["function", "lambda", "lhs", "h_term", "f_term", "fitted"],
        );
        for r in check_level_set(
            &fr.field,
            &fr.setup,
            &lambdas,
            &fr.ledger,
            fr.thresholds.lambda0,
        ) {
            if r.id == "level-set" {
                let t = |k: &str| {
                    r.terms
                        .iter()
                        .find(|t| t.name == k)
                        .map(|t| t.value)
                        .unwrap_or(f64::NAN)
                };
                let lam = r
                    .context
                    .split_whitespace()
                    .nth(1)
                    .and_then(|v| v.trim_end_matches(',').parse::<f64>().ok())
                    .unwrap_or(f64::NAN);
                sweep.push(vec![
                    name.as_str().into(),
                    lam.into(),
                    t("lhs").into(),
                    t("h_term").into(),
                    t("f_term").into(),
                    r.fitted.into(),
                ]);
            }
            let c = join_context(name, &r.context);
            sec.records.push(r.with_context(c));
        }
        sec.tables.push(sweep);
        let g = &self.geometry;
        let radius = 0.5 * g.rho0;
        let rh = evaluate_rh_sides(
            &fr.field,
            &fr.setup.mats,
            &g.x0,
            radius,
            fr.ledger.sigma_rh.min(0.5),
        )?;
        let c = join_context(name, &rh.context);
        sec.records.push(rh.with_context(c));
        Ok(())
    }
}

fn trace_tables(fr: &FieldRun, sec: &mut Section) {
    let n = fr.setup.n();
    let mut cubes = Table::new(
        "cubes",
        &[
            "function",
            "lambda",
            "level",
            "k1",
            "k2",
            "tag",
            "distance",
            "predecessor_distance",
            "mass",
            "avg_h_pp",
            "proj1_avg",
            "proj2_avg",
        ],
    );
    let mut balls = Table::new(
        "balls",
        &[
            "function",
            "lambda",
            "center",
            "radius",
            "psi",
            "kind",
            "in_beta_ball",
            "kept",
        ],
    );
    let mut runs = Table::new(
        "runs",
        &[
            "function",
            "lambda",
            "kappa",
            "h_lambda",
            "level_set",
            "balls",
            "near_diagonal",
            "good",
            "bad_covered",
            "bad_uncovered",
            "pi_b",
            "sound",
        ],
    );
    let coords = |v: &[i64]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let point = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{}", crate::numeric::sig12(*x)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for run in &fr.runs {
        let fam = &run.families;
        for rec in &fam.records {
            cubes.push(vec![
                fr.name.as_str().into(),
                run.lambda.into(),
                rec.cube.level().into(),
                coords(&rec.cube.k1.z[..n]).into(),
                coords(&rec.cube.k2.z[..n]).into(),
                tag_name(rec.tag).into(),
                rec.distance.into(),
                rec.predecessor_distance.into(),
                rec.mass.into(),
                rec.avg_pp.into(),
                rec.projection_avg[0].into(),
                rec.projection_avg[1].into(),
            ]);
        }
        for b in &run.cover.level_set {
            let kept = run
                .cover
                .balls
                .iter()
                .any(|k| k.center == b.center && k.radius == b.radius);
            balls.push(vec![
                fr.name.as_str().into(),
                run.lambda.into(),
                point(&b.center).into(),
                b.radius.into(),
                b.psi.into(),
                site_name(b.kind).into(),
                b.in_beta_ball.into(),
                kept.into(),
            ]);
        }
        runs.push(vec![
            fr.name.as_str().into(),
            run.lambda.into(),
            run.kappa.into(),
            run.h_lambda.len().into(),
            run.cover.level_set.len().into(),
            run.cover.balls.len().into(),
            fam.count(CubeTag::NearDiagonal).into(),
            fam.count(CubeTag::Good).into(),
            fam.count(CubeTag::BadCovered).into(),
            fam.count(CubeTag::BadUncovered).into(),
            fam.pi_b.len().into(),
            run.sound().into(),
        ]);
    }
    sec.tables.push(runs);
    sec.tables.push(cubes);
    sec.tables.push(balls);
}

fn tag_name(t: CubeTag) -> &'static str {
    match t {
        CubeTag::NearDiagonal => "near-diagonal",
        CubeTag::Good => "good",
        CubeTag::BadCovered => "bad-covered",
        CubeTag::BadUncovered => "bad-uncovered",
    }
}

fn site_name(k: SiteKind) -> &'static str {
    match k {
        SiteKind::Lattice => "lattice",
        SiteKind::NearDiagonal => "near-diagonal",
        SiteKind::ProblemCube => "problem-cube",
    }
}
