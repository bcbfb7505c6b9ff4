//! Projection operators onto constraint sets, each usable as a value-level
//! solver and as a differentiable layer.
//!
//! Every iterative projector records its realized iterations on a tape graph
//! with the input `y` as a leaf, so the unrolled backward pass is a plain
//! reverse sweep over the trace. The SQP projector in `qp_linearized` mode
//! additionally supports the implicit (fixed-point) backward pass: one
//! linear solve against the Jacobians of a single update step evaluated at
//! the converged point.

use crate::array::DenseArray;
use crate::constraints::{Bound, ConstraintSet, CountThreshold, InequalityBlock};
use crate::diffcore::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::linalg;
use serde::{Deserialize, Serialize};

pub const DEFAULT_DAMPING: f64 = 1e-6;
pub const DEFAULT_FEAS_TOL: f64 = 1e-8;
/// Bounded escalation for the adaptive factorization fallback.
pub const MAX_FACTOR_RETRIES: usize = 6;
/// Per-coordinate cap on a single SQP correction when `clamp_correction` is
/// set.
pub const CORRECTION_CLAMP: f64 = 1e-3;
/// Strict-inequality nudge for the hard count projector.
const COUNT_NUDGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardMode {
    Unrolled,
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqpMode {
    /// Each step projects `y` onto the constraint linearization at the
    /// current iterate; the fixed point depends on `y`, so implicit
    /// differentiation is available.
    QpLinearized,
    /// Gauss-Newton feasibility restoration; the update map ignores `y`.
    Restoration,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlConfig {
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub inner_lr: f64,
    pub rho_init: f64,
    pub rho_scale: f64,
    pub rho_max: f64,
    /// Optional momentum on the multiplier update; 0.0 disables it.
    pub beta: f64,
}

impl Default for AlConfig {
    fn default() -> Self {
        AlConfig {
            inner_iters: 64,
            outer_iters: 8,
            inner_lr: 1e-2,
            rho_init: 1.0,
            rho_scale: 2.0,
            rho_max: 128.0,
            beta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CountConfig {
    pub step_size: f64,
    pub n_iter: usize,
}

impl Default for CountConfig {
    fn default() -> Self {
        CountConfig {
            step_size: 0.1,
            n_iter: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    /// Unrolled iteration budget K.
    pub max_iter: usize,
    /// Damping epsilon added to the normal matrix.
    pub damping: f64,
    pub backward_mode: BackwardMode,
    pub sqp_mode: SqpMode,
    pub al: AlConfig,
    pub count: CountConfig,
    pub feas_tol: f64,
    /// Clamp each SQP correction to `CORRECTION_CLAMP` per coordinate.
    pub clamp_correction: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            max_iter: 5,
            damping: DEFAULT_DAMPING,
            backward_mode: BackwardMode::Unrolled,
            sqp_mode: SqpMode::QpLinearized,
            al: AlConfig::default(),
            count: CountConfig::default(),
            feas_tol: DEFAULT_FEAS_TOL,
            clamp_correction: false,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.al.inner_iters == 0 || self.al.outer_iters == 0 {
            return Err(Error::InvalidConfig("iteration counts must be positive".into()));
        }
        if self.damping <= 0.0 {
            return Err(Error::InvalidConfig("damping must be positive".into()));
        }
        if self.al.rho_init > self.al.rho_max {
            return Err(Error::InvalidConfig("rho_init exceeds rho_max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub x_proj: DenseArray,
    pub iterations_used: usize,
    pub final_residual_norm: f64,
    pub converged: bool,
}

impl ProjectionResult {
    fn identity(y: &DenseArray) -> Self {
        ProjectionResult {
            x_proj: y.clone(),
            iterations_used: 0,
            final_residual_norm: 0.0,
            converged: true,
        }
    }
}

/// Recorded trace of an iterative projection: the tape with `y` as a leaf
/// and the final iterate as output.
struct Trace {
    graph: Graph,
    out: NodeId,
}

/// A projection call: the result plus everything needed to differentiate it.
pub struct ProjectionCall {
    pub result: ProjectionResult,
    /// Final equality multipliers (empty when the solver has none).
    pub multipliers: Vec<f64>,
    set: ConstraintSet,
    cfg: ProjectionConfig,
    y: DenseArray,
    trace: Option<Trace>,
    /// Whether the update map admits the implicit backward pass.
    implicit_ok: bool,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Closed-form damped projection onto {x : A x = b}:
/// x = y - A^T (A A^T + eps I)^{-1} (A y - b), with the adaptive
/// factorization fallback escalating eps by 10x up to 6 retries.
pub fn project_affine(
    a: &DenseArray,
    b: &DenseArray,
    y: &DenseArray,
    eps: f64,
) -> Result<ProjectionResult> {
    let (m, d) = (a.shape()[0], a.shape()[1]);
    if y.len() != d || b.len() != m {
        return Err(Error::ShapeMismatch {
            context: "project_affine".into(),
            expected: vec![m, d],
            got: y.shape().to_vec(),
        });
    }
    let mut r = linalg::matvec(a.data(), y.data(), m, d);
    for (ri, bi) in r.iter_mut().zip(b.data()) {
        *ri -= bi;
    }
    let gram = linalg::matmul(a.data(), &linalg::transpose(a.data(), m, d), m, d, m);
    let (factor, _) = linalg::cholesky_damped(&gram, m, eps, MAX_FACTOR_RETRIES)?;
    let w = linalg::cholesky_solve(&factor, &r, m);
    let corr = linalg::matvec_t(a.data(), &w, m, d);
    let x: Vec<f64> = y.data().iter().zip(&corr).map(|(&yi, &c)| yi - c).collect();
    let mut res = linalg::matvec(a.data(), &x, m, d);
    for (ri, bi) in res.iter_mut().zip(b.data()) {
        *ri -= bi;
    }
    let norm = l2(&res);
    Ok(ProjectionResult {
        x_proj: DenseArray::new(y.shape().to_vec(), x)?,
        iterations_used: 1,
        final_residual_norm: norm,
        converged: norm <= DEFAULT_FEAS_TOL,
    })
}

/// Elementwise clamp onto a box.
pub fn project_box(lower: &Bound, upper: &Bound, y: &DenseArray) -> ProjectionResult {
    let mut x = y.clone();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v = v.min(upper.at(i)).max(lower.at(i));
    }
    ProjectionResult {
        x_proj: x,
        iterations_used: 1,
        final_residual_norm: 0.0,
        converged: true,
    }
}

/// Record `clamp(v, [-c, c])` elementwise.
fn clamp_graph(g: &mut Graph, v: NodeId, c: f64) -> Result<NodeId> {
    let vc = g.add_scalar(v, -c);
    let over = g.max0(vc);
    let v1 = g.sub(v, over)?;
    let v1c = g.add_scalar(v1, c);
    let neg = g.neg(v1c);
    let under = g.max0(neg);
    g.add(v1, under)
}

/// One SQP update recorded on the graph. Returns the next iterate and the
/// multiplier node.
fn sqp_step(
    g: &mut Graph,
    set: &ConstraintSet,
    y: NodeId,
    x: NodeId,
    cfg: &ProjectionConfig,
) -> Result<(NodeId, NodeId)> {
    let h = set.residual_graph(g, x)?;
    let jac = set.jacobian_graph(g, x)?;
    let jt = g.transpose(jac)?;
    let gram = g.matmul(jac, jt)?;
    let rhs = match cfg.sqp_mode {
        SqpMode::QpLinearized => {
            let diff = g.sub(y, x)?;
            let jdiff = g.matmul(jac, diff)?;
            g.add(jdiff, h)?
        }
        SqpMode::Restoration => h,
    };
    let w = g.solve_spd(gram, rhs, cfg.damping, MAX_FACTOR_RETRIES)?;
    let corr = g.matmul(jt, w)?;
    let raw_next = match cfg.sqp_mode {
        SqpMode::QpLinearized => g.sub(y, corr)?,
        SqpMode::Restoration => g.sub(x, corr)?,
    };
    let next = if cfg.clamp_correction {
        let step = g.sub(raw_next, x)?;
        let clamped = clamp_graph(g, step, CORRECTION_CLAMP)?;
        g.add(x, clamped)?
    } else {
        raw_next
    };
    Ok((next, w))
}

/// Record the full SQP iteration onto an existing graph, starting from the
/// node `y`. Returns (final iterate, iterations performed, multipliers).
pub(crate) fn sqp_unroll(
    g: &mut Graph,
    set: &ConstraintSet,
    y: NodeId,
    cfg: &ProjectionConfig,
) -> Result<(NodeId, usize, Vec<f64>)> {
    let mut x = y;
    let mut iterations = 0;
    let mut multipliers = vec![0.0; set.total_equality_rows()];
    for _ in 0..cfg.max_iter {
        let (h, _) = set.residual(g.value(x))?;
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "sqp residual".into(),
            });
        }
        if l2(&h) <= cfg.feas_tol {
            break;
        }
        let (next, w) = sqp_step(g, set, y, x, cfg)?;
        multipliers = g.value(w).data().to_vec();
        x = next;
        iterations += 1;
    }
    Ok((x, iterations, multipliers))
}

/// SQP/Gauss-Newton projection onto an equality-only constraint set.
/// With `record`, the realized iterations stay on the tape for
/// [`ProjectionCall::backward_unrolled`].
pub fn sqp_project(
    set: &ConstraintSet,
    y: &DenseArray,
    cfg: &ProjectionConfig,
    record: bool,
) -> Result<ProjectionCall> {
    cfg.validate()?;
    if !set.inequalities.is_empty() || !set.counts.is_empty() {
        return Err(Error::InvalidArgument(
            "sqp_project handles equality-only sets".into(),
        ));
    }
    let mut g = Graph::new();
    let y_node = g.leaf("y", y.clone())?;
    let (out, iterations, multipliers) = if set.equalities.is_empty() {
        (y_node, 0, Vec::new())
    } else {
        sqp_unroll(&mut g, set, y_node, cfg)?
    };
    let x_val = g.value(out).clone();
    let final_norm = if set.equalities.is_empty() {
        0.0
    } else {
        let (h, _) = set.residual(&x_val)?;
        l2(&h)
    };
    Ok(ProjectionCall {
        result: ProjectionResult {
            x_proj: x_val,
            iterations_used: iterations,
            final_residual_norm: final_norm,
            converged: final_norm <= cfg.feas_tol,
        },
        multipliers,
        set: set.clone(),
        cfg: cfg.clone(),
        y: y.clone(),
        trace: record.then_some(Trace { graph: g, out }),
        implicit_ok: cfg.sqp_mode == SqpMode::QpLinearized,
    })
}

/// Gradient of the augmented Lagrangian objective
/// `0.5||x-y||^2 + lambda^T h + (rho/2)||h||^2 + (rho/2)||max(g,0)||^2`
/// recorded as graph ops.
fn al_objective_grad(
    g: &mut Graph,
    set: &ConstraintSet,
    y: NodeId,
    x: NodeId,
    lambda: NodeId,
    rho: f64,
) -> Result<NodeId> {
    let mut grad = g.sub(x, y)?;
    if !set.equalities.is_empty() {
        let h = set.residual_graph(g, x)?;
        let jac = set.jacobian_graph(g, x)?;
        let jt = g.transpose(jac)?;
        let jl = g.matmul(jt, lambda)?;
        grad = g.add(grad, jl)?;
        let jh = g.matmul(jt, h)?;
        let pen = g.scale(jh, rho);
        grad = g.add(grad, pen)?;
    }
    for block in &set.inequalities {
        match block {
            InequalityBlock::Box { lower, upper } => {
                let d = set.ambient_dim;
                let lo: Vec<f64> = (0..d).map(|i| lower.at(i)).collect();
                let up: Vec<f64> = (0..d).map(|i| upper.at(i)).collect();
                let lo = g.constant(DenseArray::from_vec(lo));
                let up = g.constant(DenseArray::from_vec(up));
                let over = g.sub(x, up)?;
                let over = g.max0(over);
                let under = g.sub(lo, x)?;
                let under = g.max0(under);
                let diff = g.sub(over, under)?;
                let pen = g.scale(diff, rho);
                grad = g.add(grad, pen)?;
            }
        }
    }
    Ok(grad)
}

/// Value of the augmented Lagrangian objective at the current node values.
fn al_objective_value(
    set: &ConstraintSet,
    y: &DenseArray,
    x: &DenseArray,
    lambda: &[f64],
    rho: f64,
) -> Result<f64> {
    let (h, gi) = set.residual(x)?;
    let dist = crate::array::squared_distance(x, y);
    let mut f = 0.5 * dist;
    f += lambda.iter().zip(&h).map(|(l, hi)| l * hi).sum::<f64>();
    f += 0.5 * rho * h.iter().map(|v| v * v).sum::<f64>();
    f += 0.5 * rho * gi.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>();
    Ok(f)
}

/// Unrolled augmented-Lagrangian projection. Inner minimization is Adam on
/// the AL objective; multiplier and penalty updates run between inner loops.
/// The whole schedule is recorded as graph ops, so the unrolled backward
/// pass differentiates through both the iterates and the multiplier updates.
pub fn al_project(
    set: &ConstraintSet,
    y: &DenseArray,
    cfg: &ProjectionConfig,
    record: bool,
) -> Result<ProjectionCall> {
    cfg.validate()?;
    if !set.counts.is_empty() {
        return Err(Error::InvalidArgument(
            "al_project does not handle count blocks".into(),
        ));
    }
    let al = &cfg.al;
    let m = set.total_equality_rows();
    let mut g = Graph::new();
    let y_node = g.leaf("y", y.clone())?;

    if set.is_unconstrained() {
        let result = ProjectionResult::identity(y);
        return Ok(ProjectionCall {
            result,
            multipliers: Vec::new(),
            set: set.clone(),
            cfg: cfg.clone(),
            y: y.clone(),
            trace: record.then_some(Trace { graph: g, out: y_node }),
            implicit_ok: false,
        });
    }

    let mut x = y_node;
    let mut lambda = g.constant(DenseArray::zeros(&[m.max(1)]));
    let mut lambda_prev = lambda;
    let mut rho = al.rho_init;
    let mut total_inner = 0;
    let (b1, b2) = (0.9, 0.999);

    for _outer in 0..al.outer_iters {
        let f_start = al_objective_value(set, y, g.value(x), g.value(lambda).data(), rho)?;
        let guard = 10.0 * f_start.max(1e-2);
        // Fresh Adam state per subproblem.
        let dim = y.len();
        let mut m1 = g.constant(DenseArray::zeros(&[dim]));
        let mut m2 = g.constant(DenseArray::zeros(&[dim]));
        for t in 1..=al.inner_iters {
            let grad = al_objective_grad(&mut g, set, y_node, x, lambda, rho)?;
            let gs = g.mul(grad, grad)?;
            let m1_decay = g.scale(m1, b1);
            let g_scaled = g.scale(grad, 1.0 - b1);
            m1 = g.add(m1_decay, g_scaled)?;
            let m2_decay = g.scale(m2, b2);
            let gs_scaled = g.scale(gs, 1.0 - b2);
            m2 = g.add(m2_decay, gs_scaled)?;
            let mhat = g.scale(m1, 1.0 / (1.0 - b1.powi(t as i32)));
            let vhat = g.scale(m2, 1.0 / (1.0 - b2.powi(t as i32)));
            // Shift keeps the sqrt derivative finite at v = 0.
            let vshift = g.add_scalar(vhat, 1e-16);
            let vroot = g.sqrt(vshift)?;
            let den = g.add_scalar(vroot, 1e-8);
            let update = g.div(mhat, den)?;
            let step = g.scale(update, al.inner_lr);
            x = g.sub(x, step)?;
            total_inner += 1;

            let f_now =
                al_objective_value(set, y, g.value(x), g.value(lambda).data(), rho)?;
            if !f_now.is_finite() || f_now > guard {
                return Err(Error::Diverged {
                    details: format!(
                        "AL objective {f_now:.3e} exceeded 10x its subproblem start {f_start:.3e} (rho {rho})"
                    ),
                });
            }
        }
        if !set.equalities.is_empty() {
            let h_end = set.residual_graph(&mut g, x)?;
            let lam_step = g.scale(h_end, rho);
            let mut new_lambda = g.add(lambda, lam_step)?;
            if al.beta != 0.0 {
                let momentum = g.sub(lambda, lambda_prev)?;
                let scaled = g.scale(momentum, al.beta);
                new_lambda = g.add(new_lambda, scaled)?;
            }
            lambda_prev = lambda;
            lambda = new_lambda;
        }
        rho = (rho * al.rho_scale).min(al.rho_max);
    }

    let x_val = g.value(x).clone();
    let (h, gi) = set.residual(&x_val)?;
    let hinge: Vec<f64> = gi.iter().map(|v| v.max(0.0)).collect();
    let norm = (l2(&h).powi(2) + l2(&hinge).powi(2)).sqrt();
    let multipliers = g.value(lambda).data().to_vec();
    Ok(ProjectionCall {
        result: ProjectionResult {
            x_proj: x_val,
            iterations_used: total_inner,
            final_residual_norm: norm,
            converged: norm <= cfg.feas_tol,
        },
        multipliers,
        set: set.clone(),
        cfg: cfg.clone(),
        y: y.clone(),
        trace: record.then_some(Trace { graph: g, out: x }),
        implicit_ok: false,
    })
}

/// Hard count projection: uniform shift by the k-th order statistic so that
/// exactly floor(k*n) reduced entries fall strictly below the threshold,
/// ties broken by ascending index, then box clamp if declared.
fn count_project_hard(
    ct: &CountThreshold,
    y: &DenseArray,
    box_bounds: Option<(&Bound, &Bound)>,
) -> Result<DenseArray> {
    let target = ct.target_count(y)?;
    if ct.count_below(y)? == target {
        // Feasible points are fixed points.
        return Ok(y.clone());
    }
    let gray = ct.reduce(y)?;
    let mut order: Vec<usize> = (0..gray.len()).collect();
    // Stable ascending sort = ties broken by ascending index.
    order.sort_by(|&i, &j| gray[i].partial_cmp(&gray[j]).unwrap_or(std::cmp::Ordering::Equal));
    let tau = gray[order[target - 1]];
    let shift = tau - ct.threshold + COUNT_NUDGE;

    let mut x = y.map(|v| v - shift);

    // A uniform shift cannot separate entries tied at tau; push the surplus
    // tied entries (beyond the first by index) back above the threshold.
    let strictly_less = gray.iter().filter(|&&v| v < tau).count();
    let keep_of_ties = target - strictly_less;
    let mut tied: Vec<usize> = (0..gray.len()).filter(|&i| gray[i] == tau).collect();
    tied.sort_unstable();
    let channels = if ct.reduction.len() == 1 {
        1
    } else {
        ct.reduction.len()
    };
    let per = x.len() / channels;
    for &idx in tied.iter().skip(keep_of_ties) {
        for c in 0..channels {
            x.data_mut()[c * per + idx] += 2.0 * COUNT_NUDGE;
        }
    }

    if let Some((lo, up)) = box_bounds {
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = v.min(up.at(i)).max(lo.at(i));
        }
    }
    Ok(x)
}

/// Count projection onto the porosity constraint. `hard` performs the exact
/// order-statistic shift; otherwise `n_iter` differentiable surrogate steps
/// move the image toward feasibility with the shift magnitude treated as
/// constant per step.
pub fn count_project(
    ct: &CountThreshold,
    y: &DenseArray,
    cfg: &ProjectionConfig,
    hard: bool,
    box_bounds: Option<(&Bound, &Bound)>,
    record: bool,
) -> Result<ProjectionCall> {
    let set = ConstraintSet {
        ambient_dim: y.len(),
        equalities: Vec::new(),
        inequalities: Vec::new(),
        counts: vec![ct.clone()],
    };
    if hard {
        let x = count_project_hard(ct, y, box_bounds)?;
        debug_assert!(ct.is_feasible(&x)?);
        return Ok(ProjectionCall {
            result: ProjectionResult {
                x_proj: x,
                iterations_used: 1,
                final_residual_norm: 0.0,
                converged: true,
            },
            multipliers: Vec::new(),
            set,
            cfg: cfg.clone(),
            y: y.clone(),
            trace: None,
            implicit_ok: false,
        });
    }

    let target = ct.target_count(y)?;
    let mut g = Graph::new();
    let y_node = g.leaf("y", y.clone())?;
    let mut x = y_node;
    for _ in 0..cfg.count.n_iter {
        let val = g.value(x);
        let gray = ct.reduce(val)?;
        let mut order: Vec<usize> = (0..gray.len()).collect();
        order.sort_by(|&i, &j| {
            gray[i]
                .partial_cmp(&gray[j])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let tau = gray[order[target - 1]];
        // Shift magnitude is a constant of the step, so gradients pass
        // through unchanged.
        x = g.add_scalar(x, -cfg.count.step_size * (tau - ct.threshold));
    }
    let x_val = g.value(x).clone();
    let feasible = ct.is_feasible(&x_val)?;
    Ok(ProjectionCall {
        result: ProjectionResult {
            x_proj: x_val,
            iterations_used: cfg.count.n_iter,
            final_residual_norm: if feasible { 0.0 } else { 1.0 },
            converged: feasible,
        },
        multipliers: Vec::new(),
        set,
        cfg: cfg.clone(),
        y: y.clone(),
        trace: record.then_some(Trace { graph: g, out: x }),
        implicit_ok: false,
    })
}

impl ProjectionCall {
    /// VJP through all recorded iterations.
    pub fn backward_unrolled(&self, upstream: &DenseArray) -> Result<DenseArray> {
        let Some(trace) = &self.trace else {
            return Err(Error::RecordingDisabled);
        };
        let grads = trace.graph.backward(trace.out, upstream)?;
        Ok(grads
            .wrt_leaf("y")
            .cloned()
            .unwrap_or_else(|| DenseArray::zeros(self.y.shape())))
    }

    /// VJP via the fixed-point condition: assemble the Jacobians of one
    /// update step at the converged point, solve `(I - dPhi/dx)^T w = u`,
    /// and return `(dPhi/dy)^T w`.
    pub fn backward_implicit(&self, upstream: &DenseArray) -> Result<DenseArray> {
        if !self.implicit_ok {
            return Err(Error::ImplicitUndefined);
        }
        if !self.result.converged {
            return Err(Error::NotConverged {
                residual: self.result.final_residual_norm,
                tol: self.cfg.feas_tol,
            });
        }
        let d = self.y.len();
        if self.set.equalities.is_empty() {
            return Ok(upstream.clone());
        }

        let mut g = Graph::new();
        let y_node = g.leaf("y", self.y.clone())?;
        let x_node = g.leaf("x_star", self.result.x_proj.clone())?;
        let (phi, _) = sqp_step(&mut g, &self.set, y_node, x_node, &self.cfg)?;

        // Materialize dPhi/dx and dPhi/dy row by row.
        let mut dphi_dx = vec![0.0; d * d];
        let mut dphi_dy = vec![0.0; d * d];
        for row in 0..d {
            let mut seed = DenseArray::zeros(&[d]);
            seed.data_mut()[row] = 1.0;
            let grads = g.backward(phi, &seed)?;
            if let Some(gx) = grads.wrt_leaf("x_star") {
                dphi_dx[row * d..(row + 1) * d].copy_from_slice(gx.data());
            }
            if let Some(gy) = grads.wrt_leaf("y") {
                dphi_dy[row * d..(row + 1) * d].copy_from_slice(gy.data());
            }
        }

        // (I - dPhi/dx)^T w = u
        let mut sys = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let delta = if i == j { 1.0 } else { 0.0 };
                sys[i * d + j] = delta - dphi_dx[j * d + i];
            }
        }
        let w = linalg::solve_damped(&sys, upstream.data(), d, self.cfg.damping)?;
        let out = linalg::matvec_t(&dphi_dy, &w, d, d);
        DenseArray::new(self.y.shape().to_vec(), out)
    }

    /// Gradient with respect to `y` following the configured backward mode.
    pub fn backward(&self, upstream: &DenseArray) -> Result<DenseArray> {
        match self.cfg.backward_mode {
            BackwardMode::Unrolled => self.backward_unrolled(upstream),
            BackwardMode::Implicit => self.backward_implicit(upstream),
        }
    }
}

/// Box bounds declared on a set, if any.
fn set_box(set: &ConstraintSet) -> Option<(&Bound, &Bound)> {
    set.inequalities.iter().find_map(|b| match b {
        InequalityBlock::Box { lower, upper } => Some((lower, upper)),
    })
}

/// Project onto a full constraint set, dispatching on its block structure:
/// count blocks use the hard count projector, equality-only sets use SQP,
/// mixed equality/inequality sets use the augmented Lagrangian, and pure
/// boxes clamp.
pub fn project_set(
    set: &ConstraintSet,
    y: &DenseArray,
    cfg: &ProjectionConfig,
) -> Result<ProjectionResult> {
    if set.is_unconstrained() {
        return Ok(ProjectionResult::identity(y));
    }
    if !set.counts.is_empty() {
        if !set.equalities.is_empty() {
            return Err(Error::InvalidArgument(
                "count blocks cannot be mixed with equality blocks".into(),
            ));
        }
        let mut current = y.clone();
        let mut iterations = 0;
        for ct in &set.counts {
            let call = count_project(ct, &current, cfg, true, set_box(set), false)?;
            iterations += call.result.iterations_used;
            current = call.result.x_proj;
        }
        return Ok(ProjectionResult {
            x_proj: current,
            iterations_used: iterations,
            final_residual_norm: 0.0,
            converged: true,
        });
    }
    if set.equalities.is_empty() {
        if let Some((lo, up)) = set_box(set) {
            return Ok(project_box(lo, up, y));
        }
        return Ok(ProjectionResult::identity(y));
    }
    if set.inequalities.is_empty() {
        return Ok(sqp_project(set, y, cfg, false)?.result);
    }
    Ok(al_project(set, y, cfg, false)?.result)
}

/// Save-time hard projection: zero damping for equality sets (with the
/// adaptive fallback) and exact count semantics.
pub fn save_time_project(set: &ConstraintSet, y: &DenseArray) -> Result<ProjectionResult> {
    let mut cfg = ProjectionConfig {
        max_iter: 50,
        damping: f64::MIN_POSITIVE,
        feas_tol: 1e-10,
        ..ProjectionConfig::default()
    };
    cfg.al = AlConfig::default();
    project_set(set, y, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::EqualityBlock;

    fn line() -> (DenseArray, DenseArray) {
        (
            DenseArray::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
            DenseArray::from_vec(vec![0.0]),
        )
    }

    #[test]
    fn affine_symmetric_midpoint() {
        let (a, b) = line();
        let r = project_affine(&a, &b, &DenseArray::from_vec(vec![1.0, 1.0]), 1e-14).unwrap();
        assert!((r.x_proj.data()[0]).abs() < 1e-10);
        assert!((r.x_proj.data()[1]).abs() < 1e-10);
    }

    #[test]
    fn affine_orthogonal_drop() {
        let (a, b) = line();
        let r = project_affine(&a, &b, &DenseArray::from_vec(vec![2.0, 0.0]), 1e-14).unwrap();
        assert!((r.x_proj.data()[0] - 1.0).abs() < 1e-10);
        assert!((r.x_proj.data()[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn affine_fixes_feasible_points() {
        let (a, b) = line();
        let y = DenseArray::from_vec(vec![3.0, -3.0]);
        let eps = 1e-6;
        let r = project_affine(&a, &b, &y, eps).unwrap();
        let drift: f64 = r
            .x_proj
            .data()
            .iter()
            .zip(y.data())
            .map(|(x, yy)| (x - yy).abs())
            .fold(0.0, f64::max);
        assert!(drift <= eps * y.norm());
    }

    #[test]
    fn box_clamps() {
        let r = project_box(
            &Bound::Scalar(-1.0),
            &Bound::Scalar(1.0),
            &DenseArray::from_vec(vec![2.0, -2.0]),
        );
        assert_eq!(r.x_proj.data(), &[1.0, -1.0]);
        let interior = DenseArray::from_vec(vec![0.25, -0.5]);
        let r = project_box(&Bound::Scalar(-1.0), &Bound::Scalar(1.0), &interior);
        assert_eq!(r.x_proj.data(), interior.data());
    }

    #[test]
    fn sqp_affine_single_step_matches_closed_form() {
        let (a, b) = line();
        let set = ConstraintSet::empty(2).with_equality(EqualityBlock::Affine {
            a: a.clone(),
            b: b.clone(),
        });
        let y = DenseArray::from_vec(vec![2.0, 0.0]);
        let cfg = ProjectionConfig {
            max_iter: 1,
            ..Default::default()
        };
        let call = sqp_project(&set, &y, &cfg, false).unwrap();
        let direct = project_affine(&a, &b, &y, cfg.damping).unwrap();
        for (p, q) in call.result.x_proj.data().iter().zip(direct.x_proj.data()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn sqp_quadratic_mass_radial() {
        let set =
            ConstraintSet::empty(2).with_equality(EqualityBlock::QuadraticMass { target: 1.0 });
        let y = DenseArray::from_vec(vec![2.0, 0.0]);
        let cfg = ProjectionConfig {
            max_iter: 5,
            ..Default::default()
        };
        let call = sqp_project(&set, &y, &cfg, false).unwrap();
        assert!((call.result.x_proj.data()[0] - 1.0).abs() < 1e-6);
        assert!(call.result.x_proj.data()[1].abs() < 1e-6);
    }

    #[test]
    fn sqp_feasible_point_zero_iterations() {
        let set =
            ConstraintSet::empty(2).with_equality(EqualityBlock::QuadraticMass { target: 1.0 });
        let y = DenseArray::from_vec(vec![0.6, 0.8]);
        let call = sqp_project(&set, &y, &ProjectionConfig::default(), false).unwrap();
        assert_eq!(call.result.iterations_used, 0);
        assert_eq!(call.result.x_proj.data(), y.data());
    }

    #[test]
    fn al_matches_closed_form_on_affine() {
        let (a, b) = line();
        let set = ConstraintSet::empty(2).with_equality(EqualityBlock::Affine {
            a: a.clone(),
            b: b.clone(),
        });
        let y = DenseArray::from_vec(vec![2.0, 0.0]);
        let call = al_project(&set, &y, &ProjectionConfig::default(), false).unwrap();
        let oracle = project_affine(&a, &b, &y, 1e-14).unwrap();
        for (p, q) in call.result.x_proj.data().iter().zip(oracle.x_proj.data()) {
            assert!((p - q).abs() < 1e-3, "{p} vs {q}");
        }
    }

    #[test]
    fn al_feasible_point_stays() {
        let set =
            ConstraintSet::empty(2).with_equality(EqualityBlock::QuadraticMass { target: 1.0 });
        let y = DenseArray::from_vec(vec![0.6, 0.8]);
        let call = al_project(&set, &y, &ProjectionConfig::default(), false).unwrap();
        let drift: f64 = call
            .result
            .x_proj
            .data()
            .iter()
            .zip(y.data())
            .map(|(x, yy)| (x - yy).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-6, "drift {drift}");
    }

    #[test]
    fn count_hard_feasible_fixed_point() {
        let ct = CountThreshold::new(0.5, 0.0, vec![1.0]);
        let y = DenseArray::from_vec(vec![-1.0, -1.0, 1.0, 1.0]);
        let call =
            count_project(&ct, &y, &ProjectionConfig::default(), true, None, false).unwrap();
        assert_eq!(call.result.x_proj.data(), y.data());
        assert!(ct.is_feasible(&call.result.x_proj).unwrap());
    }

    #[test]
    fn count_hard_shifts_by_order_statistic() {
        let ct = CountThreshold::new(0.5, 0.0, vec![1.0]);
        let y = DenseArray::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let call =
            count_project(&ct, &y, &ProjectionConfig::default(), true, None, false).unwrap();
        let x = call.result.x_proj;
        let below = x.data().iter().filter(|&&v| v < 0.0).count();
        assert_eq!(below, 2);
        assert!((x.data()[0] + 0.1).abs() < 1e-9);
        assert!((x.data()[3] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn count_hard_resolves_ties() {
        let ct = CountThreshold::new(0.5, 0.0, vec![1.0]);
        let y = DenseArray::from_vec(vec![0.3, 0.3, 0.3, 0.9]);
        let call =
            count_project(&ct, &y, &ProjectionConfig::default(), true, None, false).unwrap();
        let x = call.result.x_proj;
        assert_eq!(x.data().iter().filter(|&&v| v < 0.0).count(), 2);
        // Ascending-index tie break keeps the first two tied entries below.
        assert!(x.data()[0] < 0.0 && x.data()[1] < 0.0 && x.data()[2] >= 0.0);
    }

    #[test]
    fn unrolled_backward_identity_for_empty_set() {
        let set = ConstraintSet::empty(3);
        let y = DenseArray::from_vec(vec![1.0, 2.0, 3.0]);
        let call = sqp_project(&set, &y, &ProjectionConfig::default(), true).unwrap();
        let u = DenseArray::from_vec(vec![0.5, -0.25, 4.0]);
        let g = call.backward_unrolled(&u).unwrap();
        assert_eq!(g.data(), u.data());
    }

    #[test]
    fn recording_disabled_errors() {
        let set =
            ConstraintSet::empty(2).with_equality(EqualityBlock::QuadraticMass { target: 1.0 });
        let y = DenseArray::from_vec(vec![2.0, 0.0]);
        let call = sqp_project(&set, &y, &ProjectionConfig::default(), false).unwrap();
        let u = DenseArray::from_vec(vec![1.0, 0.0]);
        assert!(matches!(
            call.backward_unrolled(&u),
            Err(Error::RecordingDisabled)
        ));
    }

    #[test]
    fn implicit_rejects_restoration_mode() {
        let set =
            ConstraintSet::empty(2).with_equality(EqualityBlock::QuadraticMass { target: 1.0 });
        let y = DenseArray::from_vec(vec![2.0, 0.0]);
        let cfg = ProjectionConfig {
            sqp_mode: SqpMode::Restoration,
            ..Default::default()
        };
        let call = sqp_project(&set, &y, &cfg, false).unwrap();
        let u = DenseArray::from_vec(vec![1.0, 0.0]);
        assert!(matches!(
            call.backward_implicit(&u),
            Err(Error::ImplicitUndefined)
        ));
    }

    #[test]
    fn implicit_affine_matches_analytic() {
        // For an affine set the implicit VJP is (I - A^T (A A^T + eps I)^{-1} A) u.
        let (a, b) = line();
        let set = ConstraintSet::empty(2).with_equality(EqualityBlock::Affine {
            a: a.clone(),
            b: b.clone(),
        });
        let y = DenseArray::from_vec(vec![2.0, 0.0]);
        // qp_linearized stalls at a residual floor of eps * ||M^{-1} r||, so
        // drop the damping below feas_tol to reach convergence.
        let cfg = ProjectionConfig {
            max_iter: 10,
            damping: 1e-12,
            ..Default::default()
        };
        let call = sqp_project(&set, &y, &cfg, false).unwrap();
        assert!(call.result.converged);
        let u = DenseArray::from_vec(vec![0.7, -0.3]);
        let g = call.backward_implicit(&u).unwrap();
        // Projection matrix onto null space of [1,1]: [[.5,-.5],[-.5,.5]]
        let expect = [0.5 * 0.7 - 0.5 * (-0.3), -0.5 * 0.7 + 0.5 * (-0.3)];
        for (gi, ei) in g.data().iter().zip(&expect) {
            assert!((gi - ei).abs() < 1e-5, "{gi} vs {ei}");
        }
    }

    #[test]
    fn implicit_zero_upstream_is_zero() {
        let set =
            ConstraintSet::empty(2).with_equality(EqualityBlock::QuadraticMass { target: 1.0 });
        let y = DenseArray::from_vec(vec![2.0, 0.0]);
        let cfg = ProjectionConfig {
            max_iter: 20,
            damping: 1e-12,
            ..Default::default()
        };
        let call = sqp_project(&set, &y, &cfg, false).unwrap();
        let g = call
            .backward_implicit(&DenseArray::from_vec(vec![0.0, 0.0]))
            .unwrap();
        assert!(g.data().iter().all(|&v| v.abs() < 1e-12));
    }
}
