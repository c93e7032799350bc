//! Gauss-Newton SQP on a banded KKT system for multiple-shooting problems.
//!
//! Decision variables are grouped per stage. The objective is a sum of
//! nonlinear least-squares residuals, each depending on one stage or on a
//! consecutive pair, plus an optional linear cost per stage. Constraints are
//! equalities on one stage or a consecutive pair (dynamics defects), plus
//! per-variable bounds; equal lower and upper bounds pin a variable exactly.
//!
//! Interleaving each stage's variables with the multipliers of its outgoing
//! constraints makes the KKT matrix banded, so a Gauss-Newton step costs
//! O(horizon) regardless of its length. Bounds are handled by a short primal
//! log-barrier path inside each QP subproblem: they only touch the variable
//! diagonal, so the band profile and the rank of the saddle system never
//! depend on which bounds happen to be active. Steps are globalized with an
//! l1 exact-penalty line search (Armijo condition on the merit function,
//! penalty weight kept above twice the multiplier norm).

use nalgebra::{DMatrix, DVector};

use super::SolveStatus;
use crate::math::BandMatrix;

/// Value and Jacobians of one term at the current point.
pub struct TermEval {
    pub value: DVector<f64>,
    /// Jacobian with respect to the anchor stage's variables.
    pub jac: DMatrix<f64>,
    /// Jacobian with respect to the next stage's variables (pair terms only).
    pub jac_next: Option<DMatrix<f64>>,
}

impl TermEval {
    /// Single-stage term.
    pub fn new(value: DVector<f64>, jac: DMatrix<f64>) -> Self {
        TermEval {
            value,
            jac,
            jac_next: None,
        }
    }

    /// Term coupling a stage to its successor.
    pub fn pair(value: DVector<f64>, jac: DMatrix<f64>, jac_next: DMatrix<f64>) -> Self {
        TermEval {
            value,
            jac,
            jac_next: Some(jac_next),
        }
    }
}

type EvalFn = Box<dyn Fn(&[f64], Option<&[f64]>) -> TermEval>;

struct Term {
    stage: usize,
    dim: usize,
    pair: bool,
    eval: EvalFn,
}

/// Tuning knobs for [`ShootingProblem::solve`].
#[derive(Clone, Copy, Debug)]
pub struct SqpOptions {
    pub max_iter: usize,
    /// Projected KKT stationarity tolerance (infinity norm).
    pub tol_stat: f64,
    /// Equality constraint tolerance (infinity norm).
    pub tol_feas: f64,
    /// Levenberg regularization added to the Gauss-Newton Hessian.
    pub reg: f64,
    /// Active-set iteration budget per QP subproblem.
    pub max_qp_iter: usize,
    /// Armijo sufficient-decrease coefficient.
    pub armijo_c1: f64,
    /// Halving steps in the merit line search.
    pub max_line_steps: usize,
}

impl Default for SqpOptions {
    fn default() -> Self {
        SqpOptions {
            max_iter: 100,
            tol_stat: 1e-8,
            tol_feas: 1e-8,
            reg: 1e-8,
            max_qp_iter: 100,
            armijo_c1: 1e-4,
            max_line_steps: 30,
        }
    }
}

/// Solver outcome.
#[derive(Clone, Debug)]
pub struct SqpReport {
    /// Solution, one vector per stage.
    pub stages: Vec<DVector<f64>>,
    /// Equality multipliers, stage-major, insertion order within a stage.
    pub multipliers: DVector<f64>,
    pub status: SolveStatus,
    /// Number of QP subproblems solved.
    pub iterations: usize,
    /// `0.5 * ||r||^2 + l^T z` at the solution.
    pub cost: f64,
    /// `||c||_inf` at the solution.
    pub constraint_violation: f64,
    /// Projected KKT residual at the solution.
    pub stationarity: f64,
    /// Merit value after each accepted step.
    pub merit_trace: Vec<f64>,
    /// QP subproblems that stopped early and returned a conservative step.
    pub qp_fallbacks: usize,
}


/// A multiple-shooting nonlinear program.
pub struct ShootingProblem {
    dims: Vec<usize>,
    var_off: Vec<usize>,
    n_vars: usize,
    residuals: Vec<Term>,
    constraints: Vec<Term>,
    linear: DVector<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    step: DVector<f64>,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

impl ShootingProblem {
    /// Problem over `dims.len()` stages with `dims[i]` variables at stage `i`.
    pub fn new(dims: &[usize]) -> Self {
        assert!(!dims.is_empty());
        assert!(dims.iter().all(|d| *d > 0));
        let mut var_off = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &d in dims {
            var_off.push(off);
            off += d;
        }
        ShootingProblem {
            dims: dims.to_vec(),
            var_off,
            n_vars: off,
            residuals: vec![],
            constraints: vec![],
            linear: DVector::zeros(off),
            lower: DVector::from_element(off, f64::NEG_INFINITY),
            upper: DVector::from_element(off, f64::INFINITY),
            step: DVector::from_element(off, f64::INFINITY),
        }
    }

    pub fn n_stages(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self, stage: usize) -> usize {
        self.dims[stage]
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Adds `0.5 * ||f(z_stage)||^2` to the objective.
    pub fn add_residual(
        &mut self,
        stage: usize,
        dim: usize,
        f: impl Fn(&[f64]) -> TermEval + 'static,
    ) {
        assert!(stage < self.dims.len());
        self.residuals.push(Term {
            stage,
            dim,
            pair: false,
            eval: Box::new(move |z, _| f(z)),
        });
    }

    /// Adds `0.5 * ||f(z_stage, z_{stage+1})||^2` to the objective.
    pub fn add_pair_residual(
        &mut self,
        stage: usize,
        dim: usize,
        f: impl Fn(&[f64], &[f64]) -> TermEval + 'static,
    ) {
        assert!(stage + 1 < self.dims.len(), "pair term needs a next stage");
        self.residuals.push(Term {
            stage,
            dim,
            pair: true,
            eval: Box::new(move |z, zn| f(z, zn.unwrap())),
        });
    }

    /// Adds the equality `f(z_stage) = 0`.
    pub fn add_constraint(
        &mut self,
        stage: usize,
        dim: usize,
        f: impl Fn(&[f64]) -> TermEval + 'static,
    ) {
        assert!(stage < self.dims.len());
        self.constraints.push(Term {
            stage,
            dim,
            pair: false,
            eval: Box::new(move |z, _| f(z)),
        });
    }

    /// Adds the equality `f(z_stage, z_{stage+1}) = 0`.
    pub fn add_pair_constraint(
        &mut self,
        stage: usize,
        dim: usize,
        f: impl Fn(&[f64], &[f64]) -> TermEval + 'static,
    ) {
        assert!(stage + 1 < self.dims.len(), "pair term needs a next stage");
        self.constraints.push(Term {
            stage,
            dim,
            pair: true,
            eval: Box::new(move |z, zn| f(z, zn.unwrap())),
        });
    }

    /// Adds `w^T z_stage` to the objective.
    pub fn set_linear_cost(&mut self, stage: usize, w: &[f64]) {
        assert_eq!(w.len(), self.dims[stage]);
        for (k, v) in w.iter().enumerate() {
            self.linear[self.var_off[stage] + k] = *v;
        }
    }

    pub fn set_bounds(&mut self, stage: usize, var: usize, lo: f64, hi: f64) {
        assert!(var < self.dims[stage]);
        let k = self.var_off[stage] + var;
        self.lower[k] = lo;
        self.upper[k] = hi;
    }

    /// Fixes a variable exactly (equal bounds).
    pub fn pin(&mut self, stage: usize, var: usize, value: f64) {
        self.set_bounds(stage, var, value, value);
    }

    /// Limits how far one variable may move per SQP iteration. This is a
    /// trust region on the step, not a constraint of the problem.
    pub fn set_step_bound(&mut self, stage: usize, var: usize, s: f64) {
        assert!(var < self.dims[stage]);
        assert!(s > 0.0);
        self.step[self.var_off[stage] + var] = s;
    }

    /// Concatenates per-stage vectors into the flat layout used internally.
    pub fn flatten_stages(&self, stages: &[DVector<f64>]) -> DVector<f64> {
        assert_eq!(stages.len(), self.dims.len());
        let mut z = DVector::zeros(self.n_vars);
        for (i, s) in stages.iter().enumerate() {
            assert_eq!(s.len(), self.dims[i]);
            z.rows_mut(self.var_off[i], self.dims[i]).copy_from(s);
        }
        z
    }

    /// Splits a flat vector back into per-stage vectors.
    pub fn split_stages(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        self.dims
            .iter()
            .enumerate()
            .map(|(i, d)| z.rows(self.var_off[i], *d).into_owned())
            .collect()
    }

    fn stage_slice<'a>(&self, z: &'a DVector<f64>, i: usize) -> &'a [f64] {
        &z.as_slice()[self.var_off[i]..self.var_off[i] + self.dims[i]]
    }

    fn eval_terms(&self, terms: &[Term], z: &DVector<f64>) -> Vec<TermEval> {
        terms
            .iter()
            .map(|t| {
                let next = if t.pair {
                    Some(self.stage_slice(z, t.stage + 1))
                } else {
                    None
                };
                let e = (t.eval)(self.stage_slice(z, t.stage), next);
                assert_eq!(e.value.len(), t.dim, "term value has the wrong dimension");
                assert_eq!(e.jac.nrows(), t.dim);
                assert_eq!(e.jac.ncols(), self.dims[t.stage]);
                if t.pair {
                    let jn = e.jac_next.as_ref().expect("pair term must fill jac_next");
                    assert_eq!(jn.nrows(), t.dim);
                    assert_eq!(jn.ncols(), self.dims[t.stage + 1]);
                }
                e
            })
            .collect()
    }

    /// `J^T r + l` over the flat variables.
    fn gradient(&self, res: &[TermEval]) -> DVector<f64> {
        let mut g = self.linear.clone();
        for (t, e) in self.residuals.iter().zip(res) {
            let ga = e.jac.transpose() * &e.value;
            let mut seg = g.rows_mut(self.var_off[t.stage], self.dims[t.stage]);
            seg += ga;
            if let Some(jn) = &e.jac_next {
                let gn = jn.transpose() * &e.value;
                let mut seg = g.rows_mut(self.var_off[t.stage + 1], self.dims[t.stage + 1]);
                seg += gn;
            }
        }
        g
    }

    /// Flat multiplier offset per constraint term plus per-stage counts.
    fn constraint_layout(&self) -> (Vec<usize>, Vec<usize>, usize) {
        let n = self.dims.len();
        let mut per_stage = vec![0usize; n];
        for t in &self.constraints {
            per_stage[t.stage] += t.dim;
        }
        let mut cursor = Vec::with_capacity(n);
        let mut acc = 0;
        for c in &per_stage {
            cursor.push(acc);
            acc += c;
        }
        let n_cons = acc;
        let mut term_off = vec![0usize; self.constraints.len()];
        for (k, t) in self.constraints.iter().enumerate() {
            term_off[k] = cursor[t.stage];
            cursor[t.stage] += t.dim;
        }
        (term_off, per_stage, n_cons)
    }

    /// Fresh KKT residuals at `(stages, multipliers)`: the projected
    /// stationarity norm and the feasibility norm (equalities and bounds).
    /// Lets callers verify a reported solution independently of the solver
    /// internals.
    pub fn kkt_residuals(
        &self,
        stages: &[DVector<f64>],
        multipliers: &DVector<f64>,
    ) -> (f64, f64) {
        let z = self.flatten_stages(stages);
        let res = self.eval_terms(&self.residuals, &z);
        let con = self.eval_terms(&self.constraints, &z);
        let (term_off, _, n_cons) = self.constraint_layout();
        assert_eq!(multipliers.len(), n_cons);
        let mut zeta = self.gradient(&res);
        for (k, (t, e)) in self.constraints.iter().zip(&con).enumerate() {
            let lam = multipliers.rows(term_off[k], t.dim);
            let mut seg = zeta.rows_mut(self.var_off[t.stage], self.dims[t.stage]);
            seg += e.jac.transpose() * lam;
            if let Some(jn) = &e.jac_next {
                let lam = multipliers.rows(term_off[k], t.dim);
                let mut seg = zeta.rows_mut(self.var_off[t.stage + 1], self.dims[t.stage + 1]);
                seg += jn.transpose() * lam;
            }
        }
        let mut stat = 0.0_f64;
        for v in 0..self.n_vars {
            let p = (z[v] - zeta[v]).clamp(self.lower[v], self.upper[v]);
            stat = stat.max((z[v] - p).abs());
        }
        let mut feas = 0.0_f64;
        for e in &con {
            feas = feas.max(inf_norm(&e.value));
        }
        for v in 0..self.n_vars {
            feas = feas.max(self.lower[v] - z[v]).max(z[v] - self.upper[v]);
        }
        (stat, feas)
    }

    /// Minimizes the problem starting from `z0` (one vector per stage).
    pub fn solve(&self, z0: &[DVector<f64>], opts: &SqpOptions) -> SqpReport {
        let mut z = self.flatten_stages(z0);
        if (0..self.n_vars).any(|v| self.lower[v] > self.upper[v]) {
            return SqpReport {
                stages: self.split_stages(&z),
                multipliers: DVector::zeros(0),
                status: SolveStatus::InfeasibleBounds,
                iterations: 0,
                cost: f64::INFINITY,
                constraint_violation: f64::INFINITY,
                stationarity: f64::INFINITY,
                merit_trace: vec![],
                qp_fallbacks: 0,
            };
        }
        for v in 0..self.n_vars {
            z[v] = z[v].clamp(self.lower[v], self.upper[v]);
        }

        let (term_off, per_stage, n_cons) = self.constraint_layout();
        let layout = self.kkt_layout(&per_stage);
        for t in &self.constraints {
            assert!(
                !t.pair || t.stage + 1 < self.dims.len(),
                "pair constraint at the last stage"
            );
        }

        let mut mu = 1.0_f64;
        let mut merit_trace = vec![];
        let mut qp_fallbacks = 0usize;
        let mut reg = opts.reg;
        let mut lam = DVector::zeros(n_cons);
        let mut iterations = 0;
        let mut status = SolveStatus::MaxIterations;

        let mut cost = f64::INFINITY;
        let mut viol = f64::INFINITY;
        let mut stat = f64::INFINITY;

        // trust radius as a fraction of the per-variable step boxes; shrinks
        // when the line search has to cut, regrows on accepted full steps
        const RADIUS_MIN: f64 = 1e-3;
        const REG_MAX: f64 = 1e2;
        let mut radius = 1.0_f64;

        for _ in 0..opts.max_iter {
            let res = self.eval_terms(&self.residuals, &z);
            let con = self.eval_terms(&self.constraints, &z);
            cost = res.iter().map(|e| 0.5 * e.value.norm_squared()).sum::<f64>()
                + self.linear.dot(&z);
            let c_l1: f64 = con.iter().map(|e| e.value.iter().map(|x| x.abs()).sum::<f64>()).sum();
            viol = con.iter().map(|e| inf_norm(&e.value)).fold(0.0, f64::max);
            let g = self.gradient(&res);

            // per-iteration step box in delta space
            let mut dl = vec![0.0; self.n_vars];
            let mut du = vec![0.0; self.n_vars];
            for v in 0..self.n_vars {
                dl[v] = (self.lower[v] - z[v]).max(-radius * self.step[v]);
                du[v] = (self.upper[v] - z[v]).min(radius * self.step[v]);
            }

            let (base, rhs) = self.assemble(&layout, &res, &con, &term_off, &g, reg);
            iterations += 1;
            let qp = solve_qp(&base, &rhs, &dl, &du, &layout, opts.max_qp_iter, opts.tol_stat);
            let (d, lam_new, lam_trusted, qp_fac) = match qp {
                QpOutcome::Solved { d, lam, fac } => (d, lam, true, Some(fac)),
                QpOutcome::Fallback { d, lam } => {
                    qp_fallbacks += 1;
                    (d, lam, false, None)
                }
                QpOutcome::Singular => {
                    // retry with much stronger regularization
                    let bumped = (opts.reg * 1e6).max(1e-6);
                    if reg < bumped {
                        reg = bumped;
                        iterations -= 1;
                        continue;
                    }
                    break;
                }
            };
            lam = lam_new;

            // stationarity of the nonlinear problem at z with fresh multipliers
            stat = {
                let mut zeta = g.clone();
                for (k, (t, e)) in self.constraints.iter().zip(&con).enumerate() {
                    let lamk = lam.rows(term_off[k], t.dim);
                    let mut seg = zeta.rows_mut(self.var_off[t.stage], self.dims[t.stage]);
                    seg += e.jac.transpose() * lamk;
                    if let Some(jn) = &e.jac_next {
                        let lamk = lam.rows(term_off[k], t.dim);
                        let mut seg =
                            zeta.rows_mut(self.var_off[t.stage + 1], self.dims[t.stage + 1]);
                        seg += jn.transpose() * lamk;
                    }
                }
                let mut s = 0.0_f64;
                for v in 0..self.n_vars {
                    let p = (z[v] - zeta[v]).clamp(self.lower[v], self.upper[v]);
                    s = s.max((z[v] - p).abs());
                }
                s
            };
            if stat <= opts.tol_stat && viol <= opts.tol_feas {
                status = SolveStatus::Converged;
                break;
            }
            if inf_norm(&d) < 1e-14 {
                break;
            }

            // multipliers from a truncated QP are not KKT estimates, so they
            // must not inflate the penalty weight
            if lam_trusted {
                mu = mu.max(2.0 * inf_norm(&lam));
            }
            let phi0 = cost + mu * c_l1;
            let slope = (g.dot(&d) - mu * c_l1).min(0.0);

            let merit_at = |zt: &DVector<f64>| -> f64 {
                let res = self.eval_terms(&self.residuals, zt);
                let con = self.eval_terms(&self.constraints, zt);
                res.iter().map(|e| 0.5 * e.value.norm_squared()).sum::<f64>()
                    + self.linear.dot(zt)
                    + mu * con
                        .iter()
                        .map(|e| e.value.iter().map(|x| x.abs()).sum::<f64>())
                        .sum::<f64>()
            };

            let mut alpha = 1.0;
            let mut accepted = None;
            let mut correction_tried = false;
            for _ in 0..opts.max_line_steps {
                let mut zt = &z + &d * alpha;
                for v in 0..self.n_vars {
                    zt[v] = zt[v].clamp(self.lower[v], self.upper[v]);
                }
                let phi = merit_at(&zt);
                if phi <= phi0 + opts.armijo_c1 * alpha * slope {
                    accepted = Some((zt, phi));
                    break;
                }
                // an exact penalty can reject a good full step on constraint
                // curvature alone; compensate with a correction solve through
                // the already factored KKT system before shrinking the step
                if alpha == 1.0 && !correction_tried {
                    correction_tried = true;
                    if let Some(fac) = &qp_fac {
                        let con_t = self.eval_terms(&self.constraints, &zt);
                        let mut b2 = vec![0.0; layout.n_kkt];
                        for (k, e) in con_t.iter().enumerate() {
                            for r in 0..e.value.len() {
                                b2[layout.con_kkt[term_off[k] + r]] = -e.value[r];
                            }
                        }
                        fac.solve_in_place(&mut b2);
                        let mut zc = zt;
                        for v in 0..self.n_vars {
                            zc[v] = (zc[v] + b2[layout.var_kkt[v]])
                                .clamp(self.lower[v], self.upper[v]);
                        }
                        let phic = merit_at(&zc);
                        if phic <= phi0 + opts.armijo_c1 * slope {
                            accepted = Some((zc, phic));
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            // cut line searches mean the quadratic model lacks curvature the
            // true problem has; proximal damping supplies it, full steps let
            // it decay again
            match accepted {
                Some((zt, phi)) => {
                    z = zt;
                    merit_trace.push(phi);
                    if alpha >= 1.0 {
                        radius = (radius * 2.0).min(1.0);
                        reg = (reg * 0.5).max(opts.reg);
                    } else {
                        if alpha < 0.5 {
                            radius = (radius * 0.5).max(RADIUS_MIN);
                        }
                        reg = (reg * 4.0).min(REG_MAX);
                    }
                }
                None => {
                    if radius <= RADIUS_MIN && reg >= REG_MAX {
                        break;
                    }
                    radius = (radius * 0.125).max(RADIUS_MIN);
                    reg = (reg * 4.0).min(REG_MAX);
                }
            }
        }

        SqpReport {
            stages: self.split_stages(&z),
            multipliers: lam,
            status,
            iterations,
            cost,
            constraint_violation: viol,
            stationarity: stat,
            merit_trace,
            qp_fallbacks,
        }
    }

    fn kkt_layout(&self, per_stage_cons: &[usize]) -> KktLayout {
        let n = self.dims.len();
        let mut kkt_var = vec![0usize; n];
        let mut kkt_con = vec![0usize; n];
        let mut off = 0;
        for i in 0..n {
            kkt_var[i] = off;
            off += self.dims[i];
            kkt_con[i] = off;
            off += per_stage_cons[i];
        }
        let n_kkt = off;

        // flat index maps
        let mut var_kkt = vec![0usize; self.n_vars];
        for i in 0..n {
            for k in 0..self.dims[i] {
                var_kkt[self.var_off[i] + k] = kkt_var[i] + k;
            }
        }
        let n_cons: usize = per_stage_cons.iter().sum();
        let mut con_kkt = vec![0usize; n_cons];
        let mut flat = 0;
        for i in 0..n {
            for k in 0..per_stage_cons[i] {
                con_kkt[flat] = kkt_con[i] + k;
                flat += 1;
            }
        }

        // symmetric bandwidth covering every written block
        let mut b = 1usize;
        let mut widen = |r0: usize, r1: usize, c0: usize, c1: usize| {
            if c1 > r0 {
                b = b.max(c1 - r0);
            }
            if r1 > c0 {
                b = b.max(r1 - c0);
            }
        };
        let (term_off, _, _) = self.constraint_layout();
        let con_stage_flat: Vec<usize> = {
            let mut acc = 0;
            let mut v = Vec::with_capacity(n);
            for c in per_stage_cons {
                v.push(acc);
                acc += c;
            }
            v
        };
        for t in &self.residuals {
            let a0 = kkt_var[t.stage];
            let a1 = a0 + self.dims[t.stage] - 1;
            widen(a0, a1, a0, a1);
            if t.pair {
                let n0 = kkt_var[t.stage + 1];
                let n1 = n0 + self.dims[t.stage + 1] - 1;
                widen(a0, a1, n0, n1);
                widen(n0, n1, a0, a1);
                widen(n0, n1, n0, n1);
            }
        }
        for (k, t) in self.constraints.iter().enumerate() {
            let loc = term_off[k] - con_stage_flat[t.stage];
            let r0 = kkt_con[t.stage] + loc;
            let r1 = r0 + t.dim - 1;
            let a0 = kkt_var[t.stage];
            let a1 = a0 + self.dims[t.stage] - 1;
            widen(r0, r1, a0, a1);
            widen(a0, a1, r0, r1);
            if t.pair {
                let n0 = kkt_var[t.stage + 1];
                let n1 = n0 + self.dims[t.stage + 1] - 1;
                widen(r0, r1, n0, n1);
                widen(n0, n1, r0, r1);
            }
        }

        KktLayout {
            kkt_var,
            var_kkt,
            con_kkt,
            n_kkt,
            band: b,
        }
    }

    fn assemble(
        &self,
        layout: &KktLayout,
        res: &[TermEval],
        con: &[TermEval],
        term_off: &[usize],
        g: &DVector<f64>,
        reg: f64,
    ) -> (BandMatrix, Vec<f64>) {
        let mut kkt = BandMatrix::zeros(layout.n_kkt, layout.band, layout.band);
        let mut rhs = vec![0.0; layout.n_kkt];
        for v in 0..self.n_vars {
            let k = layout.var_kkt[v];
            kkt.add(k, k, reg);
            rhs[k] = -g[v];
        }
        for (t, e) in self.residuals.iter().zip(res) {
            let a0 = layout.kkt_var[t.stage];
            let haa = e.jac.transpose() * &e.jac;
            for r in 0..haa.nrows() {
                for c in 0..haa.ncols() {
                    kkt.add(a0 + r, a0 + c, haa[(r, c)]);
                }
            }
            if let Some(jn) = &e.jac_next {
                let n0 = layout.kkt_var[t.stage + 1];
                let hnn = jn.transpose() * jn;
                for r in 0..hnn.nrows() {
                    for c in 0..hnn.ncols() {
                        kkt.add(n0 + r, n0 + c, hnn[(r, c)]);
                    }
                }
                let han = e.jac.transpose() * jn;
                for r in 0..han.nrows() {
                    for c in 0..han.ncols() {
                        kkt.add(a0 + r, n0 + c, han[(r, c)]);
                        kkt.add(n0 + c, a0 + r, han[(r, c)]);
                    }
                }
            }
        }
        for (k, (t, e)) in self.constraints.iter().zip(con).enumerate() {
            let r0 = layout.con_kkt[term_off[k]];
            let a0 = layout.kkt_var[t.stage];
            for r in 0..t.dim {
                rhs[r0 + r] = -e.value[r];
                for c in 0..self.dims[t.stage] {
                    let v = e.jac[(r, c)];
                    kkt.add(r0 + r, a0 + c, v);
                    kkt.add(a0 + c, r0 + r, v);
                }
            }
            if let Some(jn) = &e.jac_next {
                let n0 = layout.kkt_var[t.stage + 1];
                for r in 0..t.dim {
                    for c in 0..self.dims[t.stage + 1] {
                        let v = jn[(r, c)];
                        kkt.add(r0 + r, n0 + c, v);
                        kkt.add(n0 + c, r0 + r, v);
                    }
                }
            }
        }
        (kkt, rhs)
    }
}

struct KktLayout {
    /// KKT offset of each stage's variable block.
    kkt_var: Vec<usize>,
    /// Flat variable index to KKT index.
    var_kkt: Vec<usize>,
    /// Flat multiplier index to KKT index.
    con_kkt: Vec<usize>,
    n_kkt: usize,
    band: usize,
}

enum QpOutcome {
    Solved {
        d: DVector<f64>,
        lam: DVector<f64>,
        /// Factored KKT system of the final solve, for correction steps.
        fac: Box<BandMatrix>,
    },
    Fallback { d: DVector<f64>, lam: DVector<f64> },
    Singular,
}

/// Box-constrained QP over the banded KKT system, solved with a short
/// primal log-barrier path. Bounds enter as diagonal barrier terms, so the
/// saddle system keeps the same band profile and never loses rank to an
/// unlucky working set. A crossover solve at the end pins variables that
/// finished on a bound, which recovers exact activity and clean multipliers.
fn solve_qp(
    base: &BandMatrix,
    rhs: &[f64],
    dl: &[f64],
    du: &[f64],
    layout: &KktLayout,
    max_qp_iter: usize,
    tol: f64,
) -> QpOutcome {
    let n_vars = dl.len();
    let n_cons = layout.con_kkt.len();
    let degenerate = |v: usize| du[v] - dl[v] < 1e-12;

    // gradient scale sets the initial barrier weight
    let mut gscale = 0.0_f64;
    for v in 0..n_vars {
        gscale = gscale.max(rhs[layout.var_kkt[v]].abs());
    }
    let mut sigma = 0.1 * (1.0 + gscale);

    // strictly interior start; zero is feasible because the outer iterate
    // respects the bounds, but it may sit exactly on one of them
    let mut d = DVector::zeros(n_vars);
    for v in 0..n_vars {
        if degenerate(v) {
            d[v] = 0.5 * (dl[v] + du[v]);
            continue;
        }
        let (lo, hi) = (dl[v], du[v]);
        d[v] = match (lo.is_finite(), hi.is_finite()) {
            (true, true) => {
                let pad = 0.01 * (hi - lo);
                0.0_f64.clamp(lo + pad, hi - pad)
            }
            (true, false) => 0.0_f64.max(lo + 0.01 * (1.0 + lo.abs())),
            (false, true) => 0.0_f64.min(hi - 0.01 * (1.0 + hi.abs())),
            (false, false) => 0.0,
        };
    }

    // drive complementarity below the caller's stationarity tolerance
    // the final barrier weight bounds the multiplier bias, which the caller's
    // stationarity check sees; it must sit well below the outer tolerance
    let sigma_min = (1e-4 * tol).max(1e-12);
    let mut best: Option<(DVector<f64>, DVector<f64>, BandMatrix)> = None;
    let mut full = vec![0.0; layout.n_kkt];
    for _ in 0..max_qp_iter.min(40) {
        // residual of the current iterate through the unfactored matrix
        for v in 0..n_vars {
            full[layout.var_kkt[v]] = d[v];
        }
        for &k in &layout.con_kkt {
            full[k] = 0.0;
        }
        let mut prod = vec![0.0; layout.n_kkt];
        base.mul_vec(&full, &mut prod);

        let mut work = base.clone();
        let mut b = rhs.to_vec();
        for (k, (r, p)) in b.iter_mut().zip(&prod).enumerate() {
            *r -= p;
            let _ = k;
        }
        for v in 0..n_vars {
            let k = layout.var_kkt[v];
            if degenerate(v) {
                work.eliminate_variable(k, 0.0, &mut b);
                continue;
            }
            let mut hess = 0.0;
            let mut grad = 0.0;
            if dl[v].is_finite() {
                let gap = (d[v] - dl[v]).max(1e-300);
                hess += sigma / (gap * gap);
                grad += sigma / gap;
            }
            if du[v].is_finite() {
                let gap = (du[v] - d[v]).max(1e-300);
                hess += sigma / (gap * gap);
                grad -= sigma / gap;
            }
            work.add(k, k, hess);
            b[k] += grad;
        }
        if work.factorize().is_err() {
            return match best {
                Some((d, lam, _)) => QpOutcome::Fallback { d, lam },
                None => QpOutcome::Singular,
            };
        }
        work.solve_in_place(&mut b);

        // fraction-to-boundary step keeps the iterate strictly interior
        let mut alpha = 1.0_f64;
        for v in 0..n_vars {
            if degenerate(v) {
                continue;
            }
            let dd = b[layout.var_kkt[v]];
            if dd < 0.0 && dl[v].is_finite() {
                alpha = alpha.min(0.995 * (dl[v] - d[v]) / dd);
            } else if dd > 0.0 && du[v].is_finite() {
                alpha = alpha.min(0.995 * (du[v] - d[v]) / dd);
            }
        }
        for v in 0..n_vars {
            if !degenerate(v) {
                d[v] += alpha * b[layout.var_kkt[v]];
            }
        }
        let mut lam = DVector::zeros(n_cons);
        for j in 0..n_cons {
            lam[j] = b[layout.con_kkt[j]];
        }
        let mut moved = 0.0_f64;
        for v in 0..n_vars {
            moved = moved.max((alpha * b[layout.var_kkt[v]]).abs());
        }
        best = Some((d.clone(), lam, work));
        // once the path stops moving and the barrier perturbation is below
        // the caller's tolerance, the crossover will finish the job
        if sigma <= sigma_min || (moved <= 0.01 * tol && sigma <= tol) {
            break;
        }
        sigma *= 0.2;
    }

    let Some((d, lam, path_fac)) = best else {
        return QpOutcome::Singular;
    };

    // crossover: fix variables that ended on a bound and re-solve the
    // equality system once for exact activity
    let mut work = base.clone();
    let mut b = rhs.to_vec();
    let mut fixed = vec![false; n_vars];
    for v in 0..n_vars {
        let k = layout.var_kkt[v];
        if degenerate(v) {
            work.eliminate_variable(k, 0.5 * (dl[v] + du[v]), &mut b);
            fixed[v] = true;
            continue;
        }
        // a bound is treated as active when its barrier multiplier
        // sigma / gap dominates the gap itself
        let active_lo =
            dl[v].is_finite() && (d[v] - dl[v]).powi(2) <= sigma * (1.0 + dl[v].abs());
        let active_hi =
            du[v].is_finite() && (du[v] - d[v]).powi(2) <= sigma * (1.0 + du[v].abs());
        if active_lo && d[v] - dl[v] <= du[v] - d[v] {
            work.eliminate_variable(k, dl[v], &mut b);
            fixed[v] = true;
        } else if active_hi {
            work.eliminate_variable(k, du[v], &mut b);
            fixed[v] = true;
        }
    }
    if work.factorize().is_ok() {
        work.solve_in_place(&mut b);
        let ok = (0..n_vars).all(|v| {
            fixed[v]
                || (b[layout.var_kkt[v]] >= dl[v] - 1e-7 * (1.0 + dl[v].abs())
                    && b[layout.var_kkt[v]] <= du[v] + 1e-7 * (1.0 + du[v].abs()))
        });
        if ok {
            let mut dc = DVector::zeros(n_vars);
            for v in 0..n_vars {
                dc[v] = if fixed[v] {
                    b[layout.var_kkt[v]].clamp(dl[v], du[v])
                } else {
                    b[layout.var_kkt[v]]
                };
            }
            let mut lamc = DVector::zeros(n_cons);
            for j in 0..n_cons {
                lamc[j] = b[layout.con_kkt[j]];
            }
            return QpOutcome::Solved {
                d: dc,
                lam: lamc,
                fac: Box::new(work),
            };
        }
    }
    QpOutcome::Solved {
        d,
        lam,
        fac: Box::new(path_fac),
    }
}
