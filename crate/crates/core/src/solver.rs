//! Robust Levenberg-Marquardt minimizer over heterogeneous parameter blocks
//! with Huber reweighting, Jacobi preconditioning and a phased schedule
//! (pose, shape, pose, joint).
//!
//! Blocks live on their manifolds: rotations are unit quaternions updated by
//! left-composed axis-angle increments, plane normals stay on the unit sphere
//! through a 2-DOF tangent chart, everything else is Euclidean (optionally
//! box-clamped). Cost terms report ambient plane-normal Jacobians; the solver
//! restricts them to the tangent basis of the current estimate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{tangent_basis, Rotation, Vec3};
use crate::residuals::{huber, huber_weight};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("damped normal matrix is singular beyond damping recovery (lambda = {lambda})")]
    NumericalFailure { lambda: f64 },
    #[error("residual evaluation failed: {0}")]
    Evaluation(String),
}

/// Role of a parameter block; phases free blocks by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockRole {
    Rotation,
    Translation,
    Shape,
    PlaneNormal,
    PlaneOffset,
    Generic,
}

/// Current value of a block, stored on its manifold.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockValue {
    Euclidean(DVector<f64>),
    RotationQuat(Rotation),
    UnitNormal(Vec3),
}

impl BlockValue {
    /// Degrees of freedom exposed to the optimizer.
    pub fn tangent_dim(&self) -> usize {
        match self {
            BlockValue::Euclidean(v) => v.len(),
            BlockValue::RotationQuat(_) => 3,
            BlockValue::UnitNormal(_) => 2,
        }
    }

    /// Columns a cost term's Jacobian must have for this block.
    pub fn ambient_dim(&self) -> usize {
        match self {
            BlockValue::Euclidean(v) => v.len(),
            BlockValue::RotationQuat(_) => 3,
            BlockValue::UnitNormal(_) => 3,
        }
    }

    fn apply(&self, delta: &[f64], bounds: Option<(f64, f64)>) -> BlockValue {
        match self {
            BlockValue::Euclidean(v) => {
                let mut out = v.clone();
                for (x, d) in out.iter_mut().zip(delta) {
                    *x += d;
                    if let Some((lo, hi)) = bounds {
                        *x = x.clamp(lo, hi);
                    }
                }
                BlockValue::Euclidean(out)
            }
            BlockValue::RotationQuat(r) => {
                BlockValue::RotationQuat(r.increment(Vec3::new(delta[0], delta[1], delta[2])))
            }
            BlockValue::UnitNormal(n) => {
                BlockValue::UnitNormal(unit_normal_parameterization(*n, [delta[0], delta[1]]))
            }
        }
    }

    pub fn as_euclidean(&self) -> &DVector<f64> {
        match self {
            BlockValue::Euclidean(v) => v,
            _ => panic!("block is not Euclidean"),
        }
    }

    pub fn as_rotation(&self) -> Rotation {
        match self {
            BlockValue::RotationQuat(r) => *r,
            _ => panic!("block is not a rotation"),
        }
    }

    pub fn as_unit_normal(&self) -> Vec3 {
        match self {
            BlockValue::UnitNormal(n) => *n,
            _ => panic!("block is not a unit normal"),
        }
    }
}

/// 2-DOF tangent-space update on the unit sphere; identity at delta = 0.
pub fn unit_normal_parameterization(n: Vec3, delta: [f64; 2]) -> Vec3 {
    let (b1, b2) = tangent_basis(n);
    (n + b1 * delta[0] + b2 * delta[1]).normalize()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockId(pub usize);

struct Block {
    value: BlockValue,
    role: BlockRole,
    frozen: bool,
    bounds: Option<(f64, f64)>,
}

/// Evaluation of one cost term: residual, per-block Jacobians (ambient
/// columns), and per-row Huber scales (`f64::INFINITY` disables).
pub struct TermEval {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
    pub row_deltas: Vec<f64>,
}

/// A residual term bound to parameter blocks.
pub trait CostTerm {
    fn blocks(&self) -> &[BlockId];
    fn eval(&self, values: &[BlockValue]) -> Result<TermEval, SolveError>;
    /// Term weight multiplying the robustified row costs.
    fn eta(&self) -> f64 {
        1.0
    }
}

/// One optimization phase: which block roles are free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub free_roles: Vec<BlockRole>,
}

impl Phase {
    pub fn new(name: &str, free_roles: &[BlockRole]) -> Self {
        Phase {
            name: name.to_string(),
            free_roles: free_roles.to_vec(),
        }
    }
}

/// Alternating schedule: pose, shape, pose, then the joint solve that also
/// frees the plane blocks.
pub fn default_schedule() -> Vec<Phase> {
    vec![
        Phase::new("pose", &[BlockRole::Rotation, BlockRole::Translation]),
        Phase::new("shape", &[BlockRole::Shape]),
        Phase::new("pose", &[BlockRole::Rotation, BlockRole::Translation]),
        Phase::new(
            "joint",
            &[
                BlockRole::Rotation,
                BlockRole::Translation,
                BlockRole::Shape,
                BlockRole::PlaneNormal,
                BlockRole::PlaneOffset,
            ],
        ),
    ]
}

/// First three phases of the default schedule; with the plane frozen at its
/// initialization this is the co-planarity-assumption baseline.
pub fn coplanar_schedule() -> Vec<Phase> {
    default_schedule().into_iter().take(3).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub max_damping: f64,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub cost_tolerance: f64,
    pub jacobi_preconditioning: bool,
    pub schedule: Vec<Phase>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 100,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.1,
            max_damping: 1e12,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-10,
            cost_tolerance: 1e-10,
            jacobi_preconditioning: true,
            schedule: default_schedule(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    CostTolerance,
    MaxIterations,
    DampingExhausted,
    NothingToOptimize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseReport {
    pub name: String,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub phases: Vec<PhaseReport>,
    pub initial_cost: f64,
    pub final_cost: f64,
}

/// Optimization problem: parameter blocks plus bound residual terms.
#[derive(Default)]
pub struct Problem {
    blocks: Vec<Block>,
    terms: Vec<Box<dyn CostTerm>>,
}

impl Problem {
    pub fn new() -> Self {
        Problem {
            blocks: Vec::new(),
            terms: Vec::new(),
        }
    }

    pub fn add_block(&mut self, value: BlockValue, role: BlockRole) -> BlockId {
        self.blocks.push(Block {
            value,
            role,
            frozen: false,
            bounds: None,
        });
        BlockId(self.blocks.len() - 1)
    }

    pub fn add_bounded_block(
        &mut self,
        value: BlockValue,
        role: BlockRole,
        bounds: (f64, f64),
    ) -> BlockId {
        let id = self.add_block(value, role);
        self.blocks[id.0].bounds = Some(bounds);
        id
    }

    /// A frozen block never receives updates regardless of the schedule.
    pub fn freeze_block(&mut self, id: BlockId) {
        self.blocks[id.0].frozen = true;
    }

    pub fn add_term(&mut self, term: Box<dyn CostTerm>) -> Result<(), SolveError> {
        for b in term.blocks() {
            if b.0 >= self.blocks.len() {
                return Err(SolveError::InvalidProblem(format!(
                    "term references unknown block {}",
                    b.0
                )));
            }
        }
        self.terms.push(term);
        Ok(())
    }

    pub fn block_value(&self, id: BlockId) -> &BlockValue {
        &self.blocks[id.0].value
    }

    pub fn set_block_value(&mut self, id: BlockId, value: BlockValue) {
        self.blocks[id.0].value = value;
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    fn values(&self) -> Vec<BlockValue> {
        self.blocks.iter().map(|b| b.value.clone()).collect()
    }

    /// Robustified total cost at the given values.
    fn cost_at(&self, values: &[BlockValue]) -> Result<f64, SolveError> {
        let mut total = 0.0;
        for term in &self.terms {
            let eval = term.eval(values)?;
            total += term.eta()
                * eval
                    .residual
                    .iter()
                    .zip(&eval.row_deltas)
                    .map(|(&r, &d)| huber(r, d))
                    .sum::<f64>();
        }
        Ok(total)
    }
}

struct ActiveLayout {
    /// column offset per block id; usize::MAX when inactive
    offsets: Vec<usize>,
    total_cols: usize,
}

fn layout(problem: &Problem, phase: &Phase) -> ActiveLayout {
    let mut offsets = vec![usize::MAX; problem.blocks.len()];
    let mut col = 0;
    for (i, block) in problem.blocks.iter().enumerate() {
        if block.frozen || !phase.free_roles.contains(&block.role) {
            continue;
        }
        offsets[i] = col;
        col += block.value.tangent_dim();
    }
    ActiveLayout {
        offsets,
        total_cols: col,
    }
}

/// Minimizes the problem over the configured schedule. Accepted-step costs
/// are monotone non-increasing within every phase.
pub fn solve(problem: &mut Problem, config: &SolverConfig) -> Result<SolveReport, SolveError> {
    if config.schedule.is_empty() {
        return Err(SolveError::InvalidProblem("empty schedule".into()));
    }
    let mut values = problem.values();
    let initial_cost = problem.cost_at(&values)?;
    let mut phases = Vec::with_capacity(config.schedule.len());

    for phase in &config.schedule {
        let report = run_phase(problem, phase, &mut values, config)?;
        phases.push(report);
    }

    for (block, value) in problem.blocks.iter_mut().zip(values) {
        block.value = value;
    }
    let final_cost = phases.last().map(|p| p.final_cost).unwrap_or(initial_cost);
    Ok(SolveReport {
        phases,
        initial_cost,
        final_cost,
    })
}

fn run_phase(
    problem: &Problem,
    phase: &Phase,
    values: &mut Vec<BlockValue>,
    config: &SolverConfig,
) -> Result<PhaseReport, SolveError> {
    let active = layout(problem, phase);
    let initial_cost = problem.cost_at(values)?;
    let mut report = PhaseReport {
        name: phase.name.clone(),
        initial_cost,
        final_cost: initial_cost,
        iterations: 0,
        termination: Termination::NothingToOptimize,
    };
    if active.total_cols == 0 {
        return Ok(report);
    }

    let mut cost = initial_cost;
    let mut lambda = config.initial_damping;

    for iter in 0..config.max_iterations {
        report.iterations = iter;

        // Linearize: assemble the scaled Jacobian and residual over the
        // active columns.
        let mut rows = 0;
        let mut evals = Vec::with_capacity(problem.terms.len());
        for term in &problem.terms {
            let eval = term.eval(values)?;
            rows += eval.residual.len();
            evals.push(eval);
        }
        if rows == 0 {
            report.termination = Termination::NothingToOptimize;
            return Ok(report);
        }
        let mut jac = DMatrix::zeros(rows, active.total_cols);
        let mut res = DVector::zeros(rows);
        let mut row0 = 0;
        for (term, eval) in problem.terms.iter().zip(&evals) {
            let eta = term.eta();
            let n = eval.residual.len();
            for (k, &block_id) in term.blocks().iter().enumerate() {
                let col0 = active.offsets[block_id.0];
                if col0 == usize::MAX {
                    continue;
                }
                // Restrict ambient Jacobians to the manifold tangent.
                let lifted: DMatrix<f64> = match &values[block_id.0] {
                    BlockValue::UnitNormal(nvec) => {
                        let (b1, b2) = tangent_basis(*nvec);
                        let mut t = DMatrix::zeros(3, 2);
                        for r in 0..3 {
                            t[(r, 0)] = b1[r];
                            t[(r, 1)] = b2[r];
                        }
                        &eval.jacobians[k] * t
                    }
                    _ => eval.jacobians[k].clone(),
                };
                for r in 0..n {
                    let w = (eta * huber_weight(eval.residual[r], eval.row_deltas[r])).sqrt();
                    for c in 0..lifted.ncols() {
                        jac[(row0 + r, col0 + c)] = w * lifted[(r, c)];
                    }
                }
            }
            for r in 0..n {
                let w = (eta * huber_weight(eval.residual[r], eval.row_deltas[r])).sqrt();
                res[row0 + r] = w * eval.residual[r];
            }
            row0 += n;
        }

        let gradient = jac.transpose() * &res;
        let hessian = jac.transpose() * &jac;
        let diag: DVector<f64> = hessian.diagonal().map(|d| d.max(1e-12));

        if gradient.amax() < config.gradient_tolerance {
            // Converged; polish with a near-undamped Gauss-Newton step so
            // exactly-solvable problems land on the optimum itself.
            let mut damped = hessian.clone();
            for i in 0..active.total_cols {
                damped[(i, i)] += 1e-14 * diag[i];
            }
            if let Some(step) =
                solve_normal_equations(&damped, &gradient, config.jacobi_preconditioning)
            {
                let candidate = apply_step(problem, &active, values, &step);
                if let Ok(new_cost) = problem.cost_at(&candidate) {
                    if new_cost < cost {
                        *values = candidate;
                        cost = new_cost;
                    }
                }
            }
            report.termination = Termination::GradientTolerance;
            report.final_cost = cost;
            return Ok(report);
        }

        // Damping retry loop; the linearization is reused.
        let mut accepted = false;
        while !accepted {
            let mut damped = hessian.clone();
            for i in 0..active.total_cols {
                damped[(i, i)] += lambda * diag[i];
            }
            let step = solve_normal_equations(&damped, &gradient, config.jacobi_preconditioning);
            let step = match step {
                Some(s) => s,
                None => {
                    lambda *= config.damping_up;
                    if lambda > config.max_damping {
                        return Err(SolveError::NumericalFailure { lambda });
                    }
                    continue;
                }
            };

            let candidate = apply_step(problem, &active, values, &step);
            // A step that makes a term infeasible (e.g. moves a point behind
            // the camera) is a rejected step, not a solve failure.
            let new_cost = problem.cost_at(&candidate).unwrap_or(f64::INFINITY);
            if new_cost < cost {
                let step_norm = step.norm();
                let cost_drop = cost - new_cost;
                *values = candidate;
                cost = new_cost;
                lambda = (lambda * config.damping_down).max(1e-15);
                accepted = true;
                report.iterations = iter + 1;
                report.final_cost = cost;
                if step_norm < config.step_tolerance {
                    report.termination = Termination::StepTolerance;
                    return Ok(report);
                }
                if cost_drop < config.cost_tolerance * cost.max(1.0) {
                    report.termination = Termination::CostTolerance;
                    return Ok(report);
                }
            } else {
                lambda *= config.damping_up;
                if lambda > config.max_damping {
                    report.termination = Termination::DampingExhausted;
                    report.final_cost = cost;
                    return Ok(report);
                }
            }
        }
    }

    report.termination = Termination::MaxIterations;
    report.final_cost = cost;
    Ok(report)
}

/// Solves `(H + damping) step = -g`, optionally through a Jacobi
/// (diagonal) preconditioner.
fn solve_normal_equations(
    damped: &DMatrix<f64>,
    gradient: &DVector<f64>,
    jacobi: bool,
) -> Option<DVector<f64>> {
    let n = damped.nrows();
    if jacobi {
        let mut scale = DVector::zeros(n);
        for i in 0..n {
            let d = damped[(i, i)];
            if d <= 0.0 || !d.is_finite() {
                return None;
            }
            scale[i] = 1.0 / d.sqrt();
        }
        let mut scaled = damped.clone();
        for r in 0..n {
            for c in 0..n {
                scaled[(r, c)] *= scale[r] * scale[c];
            }
        }
        let rhs = -gradient.component_mul(&scale);
        let y = scaled.cholesky()?.solve(&rhs);
        Some(y.component_mul(&scale))
    } else {
        damped.clone().cholesky().map(|ch| ch.solve(&(-gradient)))
    }
}

fn apply_step(
    problem: &Problem,
    active: &ActiveLayout,
    values: &[BlockValue],
    step: &DVector<f64>,
) -> Vec<BlockValue> {
    let mut out = values.to_vec();
    for (i, block) in problem.blocks.iter().enumerate() {
        let col0 = active.offsets[i];
        if col0 == usize::MAX {
            continue;
        }
        let dim = values[i].tangent_dim();
        let delta: Vec<f64> = (0..dim).map(|k| step[col0 + k]).collect();
        out[i] = values[i].apply(&delta, block.bounds);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// r(x) = x - target on a 1-D Euclidean block.
    struct LinearTerm {
        blocks: [BlockId; 1],
        target: f64,
    }

    impl CostTerm for LinearTerm {
        fn blocks(&self) -> &[BlockId] {
            &self.blocks
        }
        fn eval(&self, values: &[BlockValue]) -> Result<TermEval, SolveError> {
            let x = values[self.blocks[0].0].as_euclidean()[0];
            Ok(TermEval {
                residual: DVector::from_element(1, x - self.target),
                jacobians: vec![DMatrix::from_element(1, 1, 1.0)],
                row_deltas: vec![f64::INFINITY],
            })
        }
    }

    fn generic_schedule() -> Vec<Phase> {
        vec![Phase::new("all", &[BlockRole::Generic])]
    }

    #[test]
    fn quadratic_sanity_converges_in_few_iterations() {
        let mut problem = Problem::new();
        let x = problem.add_block(
            BlockValue::Euclidean(DVector::from_element(1, 0.0)),
            BlockRole::Generic,
        );
        problem
            .add_term(Box::new(LinearTerm {
                blocks: [x],
                target: 3.0,
            }))
            .unwrap();
        let config = SolverConfig {
            schedule: generic_schedule(),
            ..Default::default()
        };
        let report = solve(&mut problem, &config).unwrap();
        let solution = problem.block_value(x).as_euclidean()[0];
        assert_relative_eq!(solution, 3.0, epsilon = 1e-9);
        assert!(report.phases[0].iterations <= 5);
    }

    #[test]
    fn rejects_term_with_unknown_block() {
        let mut problem = Problem::new();
        let err = problem.add_term(Box::new(LinearTerm {
            blocks: [BlockId(7)],
            target: 0.0,
        }));
        assert!(matches!(err, Err(SolveError::InvalidProblem(_))));
    }

    #[test]
    fn frozen_block_receives_no_update() {
        let mut problem = Problem::new();
        let x = problem.add_block(
            BlockValue::Euclidean(DVector::from_element(1, 1.0)),
            BlockRole::Generic,
        );
        problem.freeze_block(x);
        problem
            .add_term(Box::new(LinearTerm {
                blocks: [x],
                target: 3.0,
            }))
            .unwrap();
        let config = SolverConfig {
            schedule: generic_schedule(),
            ..Default::default()
        };
        solve(&mut problem, &config).unwrap();
        assert_eq!(problem.block_value(x).as_euclidean()[0], 1.0);
    }

    #[test]
    fn default_schedule_has_four_phases_with_planes_last() {
        let schedule = default_schedule();
        assert_eq!(schedule.len(), 4);
        for phase in &schedule[..3] {
            assert!(!phase.free_roles.contains(&BlockRole::PlaneNormal));
            assert!(!phase.free_roles.contains(&BlockRole::PlaneOffset));
        }
        assert!(schedule[3].free_roles.contains(&BlockRole::PlaneNormal));
        assert_eq!(coplanar_schedule().len(), 3);
    }

    #[test]
    fn unit_normal_parameterization_identity_and_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Vec3::new(0.1, -0.9, 0.2).normalize();
        assert_relative_eq!(
            (unit_normal_parameterization(n, [0.0, 0.0]) - n).norm(),
            0.0
        );
        for _ in 0..10_000 {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() < 1e-6 {
                continue;
            }
            let n = v.normalize();
            let delta = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let out = unit_normal_parameterization(n, delta);
            assert_relative_eq!(out.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn unit_normal_parameterization_small_angle_expansion() {
        let n = Vec3::new(0.3, -0.8, 0.1).normalize();
        for mag in [1e-2, 1e-3, 1e-4] {
            let delta = [mag / 2f64.sqrt(), mag / 2f64.sqrt()];
            let out = unit_normal_parameterization(n, delta);
            let angle = out.dot(&n).clamp(-1.0, 1.0).acos();
            // angle = |delta| + O(|delta|^3)
            assert!(
                (angle - mag).abs() < 2.0 * mag.powi(3) + 1e-14,
                "mag {mag}: angle {angle}"
            );
        }
    }

    /// Rosenbrock-style residual over two 1-D blocks to exercise coupling.
    struct RosenbrockTerm {
        blocks: [BlockId; 2],
    }

    impl CostTerm for RosenbrockTerm {
        fn blocks(&self) -> &[BlockId] {
            &self.blocks
        }
        fn eval(&self, values: &[BlockValue]) -> Result<TermEval, SolveError> {
            let x = values[self.blocks[0].0].as_euclidean()[0];
            let y = values[self.blocks[1].0].as_euclidean()[0];
            let residual = DVector::from_column_slice(&[10.0 * (y - x * x), 1.0 - x]);
            let jx = DMatrix::from_column_slice(2, 1, &[-20.0 * x, -1.0]);
            let jy = DMatrix::from_column_slice(2, 1, &[10.0, 0.0]);
            Ok(TermEval {
                residual,
                jacobians: vec![jx, jy],
                row_deltas: vec![f64::INFINITY; 2],
            })
        }
    }

    #[test]
    fn rosenbrock_converges_and_cost_is_monotone() {
        for jacobi in [true, false] {
            let mut problem = Problem::new();
            let x = problem.add_block(
                BlockValue::Euclidean(DVector::from_element(1, -1.2)),
                BlockRole::Generic,
            );
            let y = problem.add_block(
                BlockValue::Euclidean(DVector::from_element(1, 1.0)),
                BlockRole::Generic,
            );
            problem
                .add_term(Box::new(RosenbrockTerm { blocks: [x, y] }))
                .unwrap();
            let config = SolverConfig {
                schedule: generic_schedule(),
                max_iterations: 200,
                jacobi_preconditioning: jacobi,
                ..Default::default()
            };
            let report = solve(&mut problem, &config).unwrap();
            assert!(report.final_cost <= report.initial_cost);
            assert_relative_eq!(problem.block_value(x).as_euclidean()[0], 1.0, epsilon = 1e-6);
            assert_relative_eq!(problem.block_value(y).as_euclidean()[0], 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn bounded_block_is_clamped() {
        let mut problem = Problem::new();
        let x = problem.add_bounded_block(
            BlockValue::Euclidean(DVector::from_element(1, 0.0)),
            BlockRole::Generic,
            (-1.0, 1.0),
        );
        problem
            .add_term(Box::new(LinearTerm {
                blocks: [x],
                target: 5.0,
            }))
            .unwrap();
        let config = SolverConfig {
            schedule: generic_schedule(),
            ..Default::default()
        };
        solve(&mut problem, &config).unwrap();
        assert_relative_eq!(problem.block_value(x).as_euclidean()[0], 1.0, epsilon = 1e-9);
    }
}
