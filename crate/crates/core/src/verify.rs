//! Both sides of every inequality in scope, with the smallest constant that
//! makes each hold on the run's data.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cz::{PairDensity, PairPyramid};
use crate::dyadic::{DyadicCube, ProductCube};
use crate::error::{Error, Result};
use crate::fields::{gagliardo_seminorm, FunctionalMatrices, Integrand, PairField};
use crate::ledger::ConstantsLedger;
use crate::measure::KernelKind;
use crate::numeric::fitted_ratio;
use crate::params::sobolev_upper;
use crate::pipeline::{CubeTag, LevelSetSetup, PipelineRun, Thresholds};
use crate::report::fmt_num;

/// Relative slack for comparisons that go through two quadrature routes.
pub const QUADRATURE_TOL: f64 = 0.02;
/// Largest accepted ratio between a fitted constant at two resolutions.
pub const DRIFT_LIMIT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub value: f64,
}

fn term(name: &str, value: f64) -> Term {
    Term {
        name: name.into(),
        value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    /// lhs <= rhs (1 + tolerance).
    Bound,
    /// The fitted constant lhs/rhs is finite.
    Finite,
    /// Recorded only.
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub id: String,
    pub statement: String,
    pub lhs: f64,
    pub rhs: f64,
    pub terms: Vec<Term>,
    /// Smallest C with lhs <= C rhs.
    pub fitted: f64,
    pub criterion: Criterion,
    pub tolerance: f64,
    pub passed: bool,
    /// Diagnostic records never affect the exit status.
    pub diagnostic: bool,
    pub context: String,
}

impl CheckRecord {
    pub fn bound(id: &str, statement: &str, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        CheckRecord {
            id: id.into(),
            statement: statement.into(),
            lhs,
            rhs,
            terms: Vec::new(),
            fitted: fitted_ratio(lhs, rhs),
            criterion: Criterion::Bound,
            tolerance,
            passed: lhs <= rhs * (1.0 + tolerance),
            diagnostic: false,
            context: String::new(),
        }
    }

    pub fn finite(id: &str, statement: &str, lhs: f64, rhs: f64) -> Self {
        let fitted = fitted_ratio(lhs, rhs);
        CheckRecord {
            criterion: Criterion::Finite,
            passed: fitted.is_finite(),
            tolerance: 0.0,
            ..CheckRecord::bound(id, statement, lhs, rhs, 0.0)
        }
        .with_fitted(fitted)
    }

    pub fn report(id: &str, statement: &str, lhs: f64, rhs: f64) -> Self {
        CheckRecord {
            criterion: Criterion::Report,
            passed: true,
            diagnostic: true,
            ..CheckRecord::bound(id, statement, lhs, rhs, 0.0)
        }
    }

    /// Structural audit: lhs counts violations, rhs is zero.
    pub fn audit(id: &str, statement: &str, violations: usize) -> Self {
        let mut r = CheckRecord::bound(id, statement, violations as f64, 0.0, 0.0);
        r.fitted = violations as f64;
        r
    }

    fn with_fitted(mut self, fitted: f64) -> Self {
        self.fitted = fitted;
        self
    }

    pub fn with_terms(mut self, terms: Vec<Term>) -> Self {
        self.terms = terms;
        self
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.context = context.into();
        self
    }

    pub fn diagnostic(mut self, yes: bool) -> Self {
        self.diagnostic = self.diagnostic || yes;
        self
    }

    /// Whether this record makes the run fail.
    pub fn fails(&self) -> bool {
        !self.passed && !self.diagnostic
    }
}

/// Ratio between two positive fitted constants, 1 when both vanish.
pub fn drift(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        1.0
    } else if a == 0.0 || b == 0.0 {
        f64::INFINITY
    } else {
        a.max(b) / a.min(b)
    }
}

/// Poincare, Poincare-Sobolev and dual-pair embedding on the ball B(center, radius).
pub fn check_poincare_family(
    field: &PairField,
    center: &[f64],
    radius: f64,
    sobolev_order: f64,
    r: f64,
) -> Result<Vec<CheckRecord>> {
    let spec = field.spec();
    let n = spec.n as f64;
    if !(sobolev_order * r < n) {
        return Err(Error::Domain(format!(
            "Sobolev form needs order * r < n, got {sobolev_order} * {r}"
        )));
    }
    let cells = spec.cells_in_ball(center, radius);
    if cells.is_empty() {
        return Err(Error::ZeroMass);
    }
    let u = &field.kernel.u.values;
    let count = cells.len() as f64;
    let first = u[cells[0]];
    let mean = if cells.iter().all(|&i| u[i] == first) {
        first
    } else {
        cells.iter().map(|&i| u[i]).sum::<f64>() / count
    };
    let moment = |e: f64| {
        (cells
            .iter()
            .map(|&i| (u[i] - mean).abs().powf(e))
            .sum::<f64>()
            / count)
            .powf(1.0 / e)
    };
    let volume = count * spec.h.powi(spec.n as i32);
    let semi = gagliardo_seminorm(field, sobolev_order, r, &cells, None)?;
    let rhs = (semi / volume).powf(1.0 / r);
    let scale = radius.powf(sobolev_order);
    let ctx = format!(
        "ball ({center:?}, {radius}), order {sobolev_order}, r {}",
        fmt_num(r)
    );
    let r_star = sobolev_upper(n, r, sobolev_order);
    let ps = *field.params();
    let d = *field.derived();
    let u_eta = field.average(&Integrand::new(KernelKind::U, d.eta), &cells, &cells)?;
    let embed_rhs = radius.powf(ps.s + ps.eps) / ps.eps.powf(1.0 / d.eta) * u_eta.powf(1.0 / d.eta);
    Ok(vec![
        CheckRecord::finite(
            "poincare",
            "mean oscillation / R^order <= C Gagliardo average",
            moment(r) / scale,
            rhs,
        )
        .with_context(ctx.clone()),
        CheckRecord::finite(
            "poincare-sobolev",
            "oscillation in the upper Sobolev exponent / R^order <= C Gagliardo average",
            moment(r_star) / scale,
            rhs,
        )
        .with_terms(vec![term("sobolev_exponent", r_star)])
        .with_context(ctx.clone()),
        CheckRecord::finite(
            "dual-pair-embedding",
            "p-oscillation <= C R^{s+eps} eps^{-1/eta} (avg U^eta dnu)^{1/eta}",
            moment(ps.p),
            embed_rhs,
        )
        .with_context(ctx),
    ])
}

/// Both sides of the off-diagonal almost reverse Holder inequality on one cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArhSides {
    pub lhs: f64,
    pub local: f64,
    pub decay: f64,
    pub projections: f64,
    pub rhs: f64,
    /// (avg H^gamma)^{1/gamma} on the cube exceeds (avg H^{p'})^{1/p'}.
    pub jensen_violated: bool,
}

pub fn arh_sides(field: &PairField, setup: &LevelSetSetup, cube: &ProductCube) -> Result<ArhSides> {
    let dist = cube.factor_distance(&setup.lattice);
    if dist < cube.side() {
        return Err(Error::Geometry(format!(
            "factor distance {dist} below the side {}",
            cube.side()
        )));
    }
    Ok(arh_unchecked(field, setup, cube, dist))
}

fn arh_unchecked(
    field: &PairField,
    setup: &LevelSetSetup,
    cube: &ProductCube,
    dist: f64,
) -> ArhSides {
    let ps = *field.params();
    let d = *field.derived();
    let lhs = setup.pyr_pp.average(cube).powf(1.0 / d.p_prime);
    let local = setup.pyr_gamma.average(cube).powf(1.0 / d.gamma);
    let decay = (cube.side() / dist).powf((ps.p - 1.0) * (ps.s + ps.eps));
    let projections = setup
        .pyr_gamma
        .average(&cube.projection(1))
        .powf(1.0 / d.gamma)
        + setup
            .pyr_gamma
            .average(&cube.projection(2))
            .powf(1.0 / d.gamma);
    let rhs = local + decay / ps.eps.powf(1.0 / d.gamma) * projections;
    ArhSides {
        lhs,
        local,
        decay,
        projections,
        rhs,
        jensen_violated: local > lhs * (1.0 + 1e-12),
    }
}

pub fn check_offdiag_arh(
    field: &PairField,
    setup: &LevelSetSetup,
    cube: &ProductCube,
) -> Result<CheckRecord> {
    let s = arh_sides(field, setup, cube)?;
    Ok(CheckRecord::finite(
        "offdiag-reverse-holder",
        "(avg H^p')^{1/p'} <= C_nd [(avg H^g)^{1/g} + eps^{-1/g} decay (projection averages)]",
        s.lhs,
        s.rhs,
    )
    .with_terms(vec![
        term("local", s.local),
        term("decay", s.decay),
        term("projections", s.projections),
    ])
    .with_context(format!("{cube:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArhSweep {
    /// (level, sup of lhs/rhs, cubes evaluated)
    pub levels: Vec<(i32, f64, usize)>,
    pub c_nd: f64,
    pub cubes: usize,
    pub jensen_violations: usize,
    pub worst: Option<ProductCube>,
}

impl ArhSweep {
    /// sup over the given levels only.
    pub fn sup_over(&self, levels: &[i32]) -> f64 {
        self.levels
            .iter()
            .filter(|(l, _, _)| levels.contains(l))
            .map(|(_, c, _)| *c)
            .fold(0.0, f64::max)
    }
}

/// Factor cubes at `level` below the root cubes.
pub fn window_cubes(setup: &LevelSetSetup, level: i32) -> Vec<DyadicCube> {
    let n = setup.n();
    let mut cubes = setup.roots.clone();
    for _ in setup.k0..level {
        cubes = cubes.iter().flat_map(|c| c.children(n)).collect();
    }
    cubes.sort();
    cubes
}

/// C_nd as the sup of lhs/rhs over all cubes with factor distance >= side at
/// levels k0..=`max_level`.
pub fn arh_sweep(field: &PairField, setup: &LevelSetSetup, max_level: i32) -> ArhSweep {
    let mut levels = Vec::new();
    let mut best: (f64, Option<ProductCube>) = (0.0, None);
    let mut cubes = 0;
    let mut jensen = 0;
    for level in setup.k0..=max_level.min(setup.fine_level) {
        let factors = window_cubes(setup, level);
        let side = factors.first().map(|c| c.side()).unwrap_or(1.0);
        let rows: Vec<(f64, Option<ProductCube>, usize, usize)> = factors
            .par_iter()
            .map(|a| {
                let mut row = (0.0, None, 0usize, 0usize);
                for b in &factors {
                    let cube = ProductCube { k1: *a, k2: *b };
                    let dist = cube.factor_distance(&setup.lattice);
                    if dist < side {
                        continue;
                    }
                    let s = arh_unchecked(field, setup, &cube, dist);
                    row.2 += 1;
                    if s.jensen_violated {
                        row.3 += 1;
                    }
                    let c = fitted_ratio(s.lhs, s.rhs);
                    if c > row.0 {
                        row.0 = c;
                        row.1 = Some(cube);
                    }
                }
                row
            })
            .collect();
        let mut sup: f64 = 0.0;
        let mut count = 0;
        for (c, cube, k, j) in rows {
            count += k;
            jensen += j;
            if c > sup {
                sup = c;
            }
            if c > best.0 {
                best = (c, cube);
            }
        }
        cubes += count;
        levels.push((level, sup, count));
    }
    ArhSweep {
        c_nd: best.0,
        worst: best.1,
        levels,
        cubes,
        jensen_violations: jensen,
    }
}

/// Level-set restricted pyramids shared by the sum checks.
pub struct SumPyramids {
    /// H^gamma on {H > kappa lambda}.
    pub gamma_above: PairPyramid,
    /// H^{p'} on {H > lambda}.
    pub pp_above: PairPyramid,
    /// int over B(x0, alpha) of H^gamma on {H > kappa lambda}.
    pub alpha_gamma: f64,
    /// int over B(x0, beta) of H^{p'} on {H > lambda}.
    pub beta_pp: f64,
}

pub fn sum_pyramids(
    field: &PairField,
    setup: &LevelSetSetup,
    lambda: f64,
    kappa: f64,
) -> Result<SumPyramids> {
    let d = *field.derived();
    let g = &setup.geometry;
    let spec = field.spec();
    let m_gamma = field.matrix(&Integrand::new(KernelKind::H, d.gamma).above(kappa * lambda));
    let m_pp = field.matrix(&Integrand::new(KernelKind::H, d.p_prime).above(lambda));
    let a_cells = spec.cells_in_ball(&g.x0, g.alpha);
    let b_cells = spec.cells_in_ball(&g.x0, g.beta);
    Ok(SumPyramids {
        gamma_above: setup.pyramid(field, &m_gamma)?,
        pp_above: setup.pyramid(field, &m_pp)?,
        alpha_gamma: field.block_sum(&m_gamma, &a_cells, &a_cells),
        beta_pp: field.block_sum(&m_pp, &b_cells, &b_cells),
    })
}

/// Structural audits of one pipeline run.
pub fn check_pipeline(run: &PipelineRun) -> Vec<CheckRecord> {
    let ctx = format!(
        "lambda {}, kappa {}",
        fmt_num(run.lambda),
        fmt_num(run.kappa)
    );
    let cz = &run.cz;
    let fam = &run.families;
    let part = &run.partition;
    vec![
        CheckRecord::audit(
            "cz-stopping-cubes",
            "stopping cubes disjoint, above threshold, predecessors at most threshold, nothing above outside",
            [cz.disjoint, cz.above_threshold, cz.predecessor_bound, cz.outside_bound]
                .iter()
                .filter(|ok| !**ok)
                .count(),
        )
        .with_terms(vec![
            term("selected", cz.selected as f64),
            term("max_outside_average", cz.max_outside_average),
            term("max_predecessor_average", cz.max_predecessor_average),
        ]),
        CheckRecord::audit(
            "vitali-disjoint",
            "kept 2-dilated exit balls are pairwise disjoint",
            usize::from(!run.cover.kept_disjoint),
        )
        .with_terms(vec![term("balls", run.cover.balls.len() as f64)]),
        CheckRecord::audit(
            "vitali-cover",
            "every 2-dilated level-set ball lies in some 10-dilated kept ball",
            usize::from(!run.cover.level_set_covered),
        )
        .with_terms(vec![term("level_set_sites", run.cover.level_set.len() as f64)]),
        CheckRecord::audit(
            "exit-radius",
            "Psi_M exceeds kappa lambda at the exit radius and not above it",
            usize::from(!run.cover.exit_conditions_hold),
        ),
        CheckRecord::audit(
            "dilations-inside-alpha",
            "10-dilated balls stay inside B(x0, alpha)",
            usize::from(!run.cover.dilations_inside_alpha),
        )
        .diagnostic(true),
        CheckRecord::audit(
            "family-partition",
            "stopping cubes split into near-diagonal, good, covered bad and uncovered bad exactly once",
            usize::from(!fam.partition_ok),
        )
        .with_terms(vec![
            term("near_diagonal", fam.count(CubeTag::NearDiagonal) as f64),
            term("good", fam.count(CubeTag::Good) as f64),
            term("bad_covered", fam.count(CubeTag::BadCovered) as f64),
            term("bad_uncovered", fam.count(CubeTag::BadUncovered) as f64),
        ]),
        CheckRecord::audit(
            "near-diagonal-covered",
            "near-diagonal stopping cubes lie in the 10-dilated exit balls",
            fam.uncovered_near_diagonal,
        ),
        CheckRecord::audit(
            "bad-symmetry",
            "K is bad through its first projection iff Symm(K) is bad through its second",
            fam.symmetry_mismatches,
        )
        .with_terms(vec![term("pairs", fam.symmetric_pairs as f64)]),
        CheckRecord::bound(
            "bad-class-cardinality",
            "#(h, M, i, j, m) class <= C(n) 2^{n(i+j)}",
            part.max_count_ratio,
            part.cardinality_constant,
            0.0,
        )
        .with_terms(vec![
            term("classes", part.classes as f64),
            term("unassigned", part.unassigned as f64),
        ]),
        CheckRecord::audit(
            "problem-cube-distance",
            "a bad cube projecting into M sits at least 2^{-k(M)} from the diagonal",
            part.combinatorial_violations,
        )
        .diagnostic(true),
    ]
    .into_iter()
    .map(|r| r.with_context(ctx.clone()))
    .collect()
}

/// Inputs to the sum checks besides the run itself.
pub struct SumInputs<'a> {
    pub ledger: &'a ConstantsLedger,
    /// C_nd measured on this field.
    pub c_nd: f64,
    /// C_ddd measured at the run's levels.
    pub c_ddd: f64,
    pub thresholds: Option<&'a Thresholds>,
}

pub fn check_sums(
    field: &PairField,
    setup: &LevelSetSetup,
    run: &PipelineRun,
    inputs: &SumInputs,
) -> Result<Vec<CheckRecord>> {
    let ps = *field.params();
    let d = *field.derived();
    let lat = &setup.lattice;
    let (lambda, kappa) = (run.lambda, run.kappa);
    let sp = sum_pyramids(field, setup, lambda, kappa)?;
    let ledger = inputs.ledger;
    let ctx = format!("lambda {}, kappa {}", fmt_num(lambda), fmt_num(kappa));
    let g = d.gamma;
    let mut out = Vec::new();

    // exit-time bound on the dilated balls; it needs 10 R_j inside the radius
    // window controlled by lambda1
    let eq7_applies = inputs.thresholds.is_some_and(|t| lambda >= t.lambda1)
        && run
            .cover
            .balls
            .iter()
            .all(|b| 10.0 * b.radius <= 0.5 * setup.geometry.rho0);
    out.push(
        CheckRecord::bound(
            "dilated-ball-energy",
            "sum_j int_{10B_j} H^p' <= 10^{n+eps p} (kappa lambda)^p' sum_j nu(B_j)",
            run.cover.dilated_integral,
            run.cover.dilated_bound,
            QUADRATURE_TOL,
        )
        .diagnostic(!eq7_applies),
    );

    let nd: Vec<_> = run
        .families
        .records
        .iter()
        .filter(|r| r.tag != CubeTag::NearDiagonal)
        .collect();
    let cn = inputs.c_nd;
    // measure form of the off-diagonal inequality, cube by cube
    let corollary: Vec<(f64, f64)> = nd
        .par_iter()
        .filter(|r| r.avg_pp.powf(1.0 / d.p_prime) >= lambda)
        .map(|r| {
            let c = &r.cube;
            let nu = setup.pyr_pp.mass(c);
            let decay = (c.side() / r.distance).powf(d.eta * (ps.s + ps.eps));
            let mut proj = 0.0;
            for h in 1..=2u8 {
                let pc = c.projection(h);
                let m = setup.pyr_pp.mass(&pc);
                if m > 0.0 {
                    proj += nu / m * sp.gamma_above.integral(&pc);
                }
            }
            let coef = 3f64.powf(g) * cn.powf(g) / lambda.powf(g);
            (
                nu,
                coef * sp.gamma_above.integral(c) + coef / ps.eps * decay * proj,
            )
        })
        .collect();
    let worst = corollary
        .iter()
        .map(|(l, r)| fitted_ratio(*l, *r))
        .fold(0.0, f64::max);
    out.push(
        CheckRecord::bound(
            "offdiag-measure-form",
            "nu(K) <= 3^g C_nd^g / lambda^g [int_K + eps^{-1} decay sum_h nu(K)/nu(pi_h K) int_{pi_h K}] H^g on {H > kappa lambda}",
            worst,
            1.0,
            QUADRATURE_TOL,
        )
        .with_terms(vec![term("cubes", corollary.len() as f64)])
        .diagnostic(kappa > ledger.kappa1 * (1.0 + 1e-12)),
    );

    let good: f64 = run.families.with_tag(CubeTag::Good).map(|r| r.mass).sum();
    let good_rhs = 6f64.powf(g) * cn.powf(g) / lambda.powf(g) * sp.alpha_gamma;
    out.push(
        CheckRecord::bound(
            "good-sum",
            "sum_G nu(K) <= 6^g C_nd^g / lambda^g int_{B(x0,alpha), H > kappa lambda} H^g",
            good,
            good_rhs,
            QUADRATURE_TOL,
        )
        .diagnostic(kappa > ledger.kappa1.min(ledger.kappa2) * (1.0 + 1e-12)),
    );

    let hard: f64 = run
        .families
        .with_tag(CubeTag::BadUncovered)
        .map(|r| r.mass)
        .sum();
    let hard_rhs = sp.alpha_gamma / lambda.powf(g);
    out.push(CheckRecord::finite(
        "hard-sum",
        "sum_{B_nd} nu(K) <= C / lambda^g int_{B(x0,alpha), H > kappa lambda} H^g",
        hard,
        hard_rhs,
    ));

    let mut step2: BTreeMap<(u8, ProductCube), f64> = BTreeMap::new();
    for e in &run.partition.entries {
        let c = &e.cube;
        let pc = c.projection(e.h);
        let m = setup.pyr_pp.mass(&pc);
        if m <= 0.0 {
            continue;
        }
        let dist = c.factor_distance(lat);
        let v = setup.pyr_pp.mass(c) / m
            * (c.side() / dist).powf(d.eta * (ps.s + ps.eps))
            * sp.gamma_above.integral(&pc)
            / ps.eps;
        *step2.entry((e.h, e.problem)).or_default() += v;
    }
    let mut step2_fit: f64 = 0.0;
    for ((_, m), lhs) in &step2 {
        let rhs = sp.gamma_above.integral(m) / (ps.s * ps.s);
        step2_fit = step2_fit.max(fitted_ratio(*lhs, rhs));
    }
    out.push(
        CheckRecord::finite(
            "problem-cube-sum",
            "eps^{-1} sum over B_nd(M) of nu(K)/nu(pi_h K) decay int_{pi_h K} H^g <= C/s^2 int_M H^g, on {H > kappa lambda}",
            step2_fit,
            1.0,
        )
        .with_terms(vec![term("problem_cubes", step2.len() as f64)]),
    );

    // CZ predecessor control on the non-near-diagonal cubes
    let pred = run
        .families
        .records
        .iter()
        .filter(|r| matches!(r.tag, CubeTag::Good | CubeTag::BadUncovered))
        .map(|r| {
            fitted_ratio(
                sp.pp_above.integral(&r.cube),
                lambda.powf(d.p_prime) * r.mass,
            )
        })
        .fold(0.0, f64::max);
    out.push(CheckRecord::bound(
        "predecessor-energy",
        "int_{K, H > lambda} H^p' <= C_ddd lambda^p' nu(K) on good and uncovered bad cubes",
        pred,
        inputs.c_ddd,
        QUADRATURE_TOL,
    ));

    let rhs1 = ledger.dilation_factor() * (kappa * lambda).powf(d.p_prime) * run.cover.sum_nu;
    let rhs2 = lambda.powf(d.p_prime - g) * sp.alpha_gamma;
    let excess = (sp.beta_pp - rhs1).max(0.0);
    out.push(
        CheckRecord::finite(
            "offdiag-conclusion",
            "int_{B(x0,beta), H > lambda} H^p' <= 10^{n+p} (kappa lambda)^p' sum nu(B_j) + C lambda^{p'-g} int_{B(x0,alpha), H > kappa lambda} H^g",
            excess,
            rhs2,
        )
        .with_terms(vec![
            term("lhs", sp.beta_pp),
            term("ball_term", rhs1),
            term("energy_term", rhs2),
        ]),
    );

    out.push(diagonal_sum(field, setup, run, inputs)?);
    Ok(out
        .into_iter()
        .map(|r| r.with_context(ctx.clone()))
        .collect())
}

/// Sum of the exit-ball masses against the H and F level-set integrals; the
/// premise is the reverse Holder inequality, so the record is report-only.
fn diagonal_sum(
    field: &PairField,
    setup: &LevelSetSetup,
    run: &PipelineRun,
    inputs: &SumInputs,
) -> Result<CheckRecord> {
    let d = *field.derived();
    let l = inputs.ledger;
    let g = &setup.geometry;
    let spec = field.spec();
    let (lambda, kappa) = (run.lambda, run.kappa);
    let cells = spec.cells_in_ball(&g.x0, g.alpha);
    let h_int = field.block_sum(
        &field
            .matrix(&Integrand::new(KernelKind::H, d.gamma).above(l.kappa_tilde * kappa * lambda)),
        &cells,
        &cells,
    );
    let f_cut = l.kappa_hat * kappa * lambda;
    let f_int = field.block_sum(
        &field.matrix(&Integrand::new(KernelKind::F, d.p_lower_s).above(f_cut)),
        &cells,
        &cells,
    );
    let eps = field.params().eps;
    let h_term =
        h_int / (eps.powf(2.0 - 2.0 * d.gamma / d.p_prime) * (kappa * lambda).powf(d.gamma));
    let lambda1 = inputs.thresholds.map(|t| t.lambda1).unwrap_or(lambda);
    let f_term = l.c5 * lambda1.powf(d.vartheta_f) / f_cut.powf(d.vartheta_f_tilde) * f_int;
    let lhs = run.cover.sum_nu;
    Ok(CheckRecord::report(
        "diagonal-sum",
        "sum_j nu(B_j) <= C_4 eps^{2g/p'-2} (kappa lambda)^{-g} int H^g + C_5 lambda1^vf (k^ kappa lambda)^{-vf~} int F^p*",
        (lhs - f_term).max(0.0),
        h_term,
    )
    .with_terms(vec![
        term("sum_nu", lhs),
        term("h_term", h_term),
        term("f_term", f_term),
    ]))
}

/// Both sides of the level-set estimate for each lambda, with C_f = 1 and the
/// smallest C_alpha covering every lambda.
pub fn check_level_set(
    field: &PairField,
    setup: &LevelSetSetup,
    lambdas: &[f64],
    ledger: &ConstantsLedger,
    lambda0: f64,
) -> Vec<CheckRecord> {
    let d = *field.derived();
    let eps = field.params().eps;
    let g = &setup.geometry;
    let spec = field.spec();
    let a_cells = spec.cells_in_ball(&g.x0, g.alpha);
    let b_cells = spec.cells_in_ball(&g.x0, g.beta);
    let mut out = Vec::new();
    let mut c_alpha: f64 = 0.0;
    let mut nonempty = (f64::INFINITY, 0.0f64);
    for &lambda in lambdas {
        let pp = field.block_sum(
            &field.matrix(&Integrand::new(KernelKind::H, d.p_prime).above(lambda)),
            &b_cells,
            &b_cells,
        );
        let hg = field.block_sum(
            &field.matrix(&Integrand::new(KernelKind::H, d.gamma).above(lambda)),
            &a_cells,
            &a_cells,
        );
        let ff = field.block_sum(
            &field
                .matrix(&Integrand::new(KernelKind::F, d.p_lower_s).above(ledger.kappa_f * lambda)),
            &a_cells,
            &a_cells,
        );
        let lhs = pp / lambda.powf(d.p_prime);
        let t1 = hg / (eps.powf(d.vartheta) * lambda.powf(d.gamma));
        let t2 = lambda0.powf(d.vartheta_f) / lambda.powf(d.vartheta_f_tilde) * ff;
        let fit = fitted_ratio((lhs - t2).max(0.0), t1);
        if lhs > 0.0 {
            nonempty = (nonempty.0.min(lambda), nonempty.1.max(lambda));
        }
        c_alpha = c_alpha.max(fit);
        let trivial = lhs == 0.0 && t1 == 0.0 && t2 == 0.0;
        out.push(
            CheckRecord::report("level-set", "lambda^{-p'} int_{B(x0,beta), H > lambda} H^p' <= C_alpha eps^{-v} lambda^{-g} int H^g + C_f lambda0^vf lambda^{-vf~} int_{F > kappa_f lambda} F^p*", (lhs - t2).max(0.0), t1)
                .with_terms(vec![term("lhs", lhs), term("h_term", t1), term("f_term", t2)])
                .with_context(format!("lambda {}{}", fmt_num(lambda), if trivial { ", trivial regime" } else { "" })),
        );
    }
    let mut summary = CheckRecord::report(
        "level-set-constant",
        "smallest C_alpha over the lambda sweep with C_f = 1",
        c_alpha,
        1.0,
    );
    summary.terms = vec![
        term(
            "nonempty_lambda_min",
            if nonempty.1 > 0.0 { nonempty.0 } else { 0.0 },
        ),
        term("nonempty_lambda_max", nonempty.1),
    ];
    out.push(summary);
    out
}

/// Evaluates the two sides of the scale-invariant reverse Holder inequality on
/// B(x, radius); no verdict, since it presumes u solves the equation.
pub fn evaluate_rh_sides(
    field: &PairField,
    mats: &FunctionalMatrices,
    x: &[f64],
    radius: f64,
    sigma: f64,
) -> Result<CheckRecord> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::Domain(format!("sigma = {sigma} outside (0, 1)")));
    }
    if !(radius > 0.0 && radius <= 1.0) {
        return Err(Error::Domain(format!("radius = {radius} outside (0, 1]")));
    }
    let ps = *field.params();
    let d = *field.derived();
    let spec = field.spec();
    let quarter = spec.cells_in_ball(x, 0.25 * radius);
    let g_avg = field.average(&Integrand::new(KernelKind::G, 1.0), &quarter, &quarter)?;
    let pp_avg = field.average(
        &Integrand::new(KernelKind::H, d.p_prime),
        &quarter,
        &quarter,
    )?;
    let fv = field
        .functionals_at(mats, x, &[radius], 1.0)?
        .pop()
        .expect("one radius");
    let cells = spec.cells_in_ball(x, radius);
    let disc = field.block_sum(&mats.mass, &cells, &cells);
    let mass = field.ball_mass(x, radius, disc);
    let local = (field.block_sum(&mats.h_gamma, &cells, &cells) / mass).powf(1.0 / d.gamma);
    let f_avg = field.block_sum(&mats.f_lower, &cells, &cells) / mass;
    let pref = 1.0 / ps.eps.powf(1.0 / d.gamma - 1.0 / d.p_prime);
    let local_term = pref / sigma * local;
    let tail_term = pref * sigma * fv.tail;
    let f_term = mass.powf(d.theta) / ps.eps.powf(1.0 / d.p_lower_s - 1.0 / d.p_prime)
        * f_avg.powf(1.0 / d.p_lower_s);
    let lhs = pp_avg.powf(1.0 / d.p_prime);
    Ok(CheckRecord::report(
        "reverse-holder-sides",
        "(avg_{B/4} H^p')^{1/p'} against local, tail and F groups",
        lhs,
        local_term + tail_term + f_term,
    )
    .with_terms(vec![
        term("g_lhs", g_avg.powf(1.0 / ps.p)),
        term("local", local_term),
        term("tail", tail_term),
        term("tail_remainder", fv.tail_remainder),
        term("f", f_term),
        term("sigma", sigma),
    ])
    .with_context(format!("ball ({x:?}, {radius})")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::PairKernel;
    use crate::grid::{Catalog, GridSpec};
    use crate::params::ParameterSet;
    use crate::pipeline::Geometry;

    fn field(u: Catalog, cells: usize) -> PairField {
        let spec = GridSpec::centered(2, 1.0, cells).unwrap();
        let k = PairKernel::new(
            ParameterSet::config_s(),
            u.sample(&spec).unwrap(),
            Catalog::Bump.sample(&spec).unwrap(),
            Catalog::Constant(0.5).sample(&spec).unwrap(),
        )
        .unwrap();
        PairField::new(k).unwrap()
    }

    #[test]
    fn decay_factor_at_four_sides() {
        // (1/4)^{(p-1)(s+eps)} = 4^{-0.7}
        let ps = ParameterSet::config_s();
        let v = 0.25f64.powf((ps.p - 1.0) * (ps.s + ps.eps));
        assert!((v - 0.378929).abs() < 1e-6);
    }

    #[test]
    fn constant_u_gives_zero_records() {
        let f = field(Catalog::Constant(0.3), 16);
        let recs = check_poincare_family(&f, &[0.0, 0.0], 0.5, 0.5, 2.0).unwrap();
        for r in &recs {
            assert_eq!(r.lhs, 0.0);
            assert_eq!(r.fitted, 0.0);
            assert!(r.passed);
        }
        let setup = LevelSetSetup::new(&f, &Geometry::relaxed_default(2)).unwrap();
        let sweep = arh_sweep(&f, &setup, setup.fine_level);
        assert_eq!(sweep.c_nd, 0.0);
        assert!(sweep.cubes > 0);
    }

    #[test]
    fn arh_requires_separated_factors() {
        let f = field(Catalog::Bump, 16);
        let setup = LevelSetSetup::new(&f, &Geometry::relaxed_default(2)).unwrap();
        let a = setup.roots[0];
        assert!(arh_sides(&f, &setup, &ProductCube { k1: a, k2: a }).is_err());
    }

    #[test]
    fn arh_sweep_is_finite_and_jensen_ordered() {
        let f = field(Catalog::Bump, 16);
        let setup = LevelSetSetup::new(&f, &Geometry::relaxed_default(2)).unwrap();
        let s = arh_sweep(&f, &setup, setup.fine_level);
        assert!(s.c_nd.is_finite() && s.c_nd > 0.0);
        assert_eq!(s.jensen_violations, 0);
        let worst = s.worst.unwrap();
        let rec = check_offdiag_arh(&f, &setup, &worst).unwrap();
        assert!((rec.fitted - s.c_nd).abs() < 1e-12 * s.c_nd);
    }

    #[test]
    fn affine_poincare_is_stable_across_radii() {
        let f = field(Catalog::Affine(vec![1.0, 0.5]), 32);
        let a = check_poincare_family(&f, &[0.0, 0.0], 0.25, 0.5, 2.0).unwrap();
        let b = check_poincare_family(&f, &[0.0, 0.0], 0.5, 0.5, 2.0).unwrap();
        let ratio = a[0].fitted / b[0].fitted;
        assert!(
            (ratio - 1.0).abs() < 0.25,
            "fitted {} vs {}",
            a[0].fitted,
            b[0].fitted
        );
    }

    #[test]
    fn drift_handles_zeros() {
        assert_eq!(drift(0.0, 0.0), 1.0);
        assert_eq!(drift(2.0, 1.0), 2.0);
        assert!(drift(0.0, 1.0).is_infinite());
    }
}
