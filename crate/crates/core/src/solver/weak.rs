//! Weak-perspective fit: convex initialization and block coordinate descent
//! with a Riemannian gradient step for the 2x3 rotation block.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix2xX, Matrix3, Matrix3xX, Vector2, Vector3};

use super::linalg::{eig2_extremes, left_svd_2x3, pinv_sym3, polar_2x3, solve_symmetric, with_singular_values};
use super::{coeffs, weight_sum, Block, Diagnostics, KeypointObservations, PoseSnapshot, SolverConfig, TraceStep, WeakPose};
use crate::error::{Error, Result};
use crate::geometry::{so3_exp, Rotation, WeakCamera};
use crate::shape::{ShapeBasis, ShapeCoefficients};

pub(crate) const MIN_WEIGHTED_KEYPOINTS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct WeakSolution {
    pub pose: WeakPose,
    pub cost: f64,
    pub trace: Vec<TraceStep>,
    pub diagnostics: Diagnostics,
    /// Per-keypoint residual norms in pixels.
    pub residuals: Vec<f64>,
}

fn check_dims(obs: &KeypointObservations, basis: &ShapeBasis) -> Result<()> {
    obs.validate()?;
    if obs.len() != basis.num_keypoints() {
        return Err(Error::Dimension(format!(
            "{} observations for a {}-keypoint basis",
            obs.len(),
            basis.num_keypoints()
        )));
    }
    Ok(())
}

fn check_solvable(obs: &KeypointObservations) -> Result<()> {
    let found = obs.weighted_count();
    if found < MIN_WEIGHTED_KEYPOINTS {
        return Err(Error::TooFewKeypoints {
            found,
            needed: MIN_WEIGHTED_KEYPOINTS,
            floor: 0.0,
        });
    }
    Ok(())
}

struct Problem<'a> {
    w: &'a Matrix2xX<f64>,
    d: &'a [f64],
    basis: &'a ShapeBasis,
    lambda: f64,
}

impl Problem<'_> {
    fn shape(&self, c: &DVector<f64>) -> Matrix3xX<f64> {
        let mut s = self.basis.b0.clone();
        for (ci, mode) in c.iter().zip(&self.basis.modes) {
            s += mode * *ci;
        }
        s
    }

    fn data_cost(&self, s: f64, rbar: &Matrix2x3<f64>, tbar: &Vector2<f64>, shape: &Matrix3xX<f64>) -> f64 {
        let mut acc = 0.0;
        for (i, &di) in self.d.iter().enumerate() {
            if di > 0.0 {
                let r = self.w.column(i) - rbar * shape.column(i) * s - tbar;
                acc += di * r.norm_squared();
            }
        }
        0.5 * acc
    }

    fn cost(&self, s: f64, rbar: &Matrix2x3<f64>, tbar: &Vector2<f64>, c: &DVector<f64>, shape: &Matrix3xX<f64>) -> f64 {
        self.data_cost(s, rbar, tbar, shape) + 0.5 * self.lambda * c.norm_squared()
    }

    /// Riemannian gradient of the cost in `rbar` on the row-orthonormal Stiefel set.
    fn rotation_gradient(&self, s: f64, rbar: &Matrix2x3<f64>, tbar: &Vector2<f64>, shape: &Matrix3xX<f64>) -> Matrix2x3<f64> {
        let mut g = Matrix2x3::zeros();
        for (i, &di) in self.d.iter().enumerate() {
            if di > 0.0 {
                let si = shape.column(i);
                let e = self.w.column(i) - tbar - rbar * si * s;
                g -= e * si.transpose() * (s * di);
            }
        }
        let gx = g * rbar.transpose();
        g - (gx + gx.transpose()) * 0.5 * rbar
    }
}

type WeakParams = (f64, Matrix2x3<f64>, Vector2<f64>, DVector<f64>);

impl Problem<'_> {
    /// Gauss-Newton direction on `(s, R, T̄, c)`, rotation perturbed on the left.
    fn gauss_newton_direction(
        &self,
        s: f64,
        rbar: &Matrix2x3<f64>,
        tbar: &Vector2<f64>,
        c: &DVector<f64>,
        shape: &Matrix3xX<f64>,
    ) -> Option<DVector<f64>> {
        let k = c.len();
        let n = 6 + k;
        let r = *Rotation::lift(rbar).matrix();
        let mut jtj = DMatrix::zeros(n, n);
        let mut jtr = DVector::zeros(n);
        let mut jac = DMatrix::zeros(2, n);
        for (i, &di) in self.d.iter().enumerate() {
            if di <= 0.0 {
                continue;
            }
            let rs = r * shape.column(i);
            let resid = self.w.column(i) - rs.fixed_rows::<2>(0) * s - tbar;
            let dr = (rs.cross_matrix() * s).fixed_rows::<2>(0).into_owned();
            jac.fixed_view_mut::<2, 1>(0, 0).copy_from(&(-rs.fixed_rows::<2>(0)));
            jac.fixed_view_mut::<2, 3>(0, 1).copy_from(&dr);
            jac.fixed_view_mut::<2, 2>(0, 4).copy_from(&(-Matrix2::identity()));
            for (j, mode) in self.basis.modes.iter().enumerate() {
                jac.column_mut(6 + j).copy_from(&(-(rbar * mode.column(i)) * s));
            }
            jtj.gemm_tr(di, &jac, &jac, 1.0);
            jtr.gemv_tr(di, &jac, &resid, 1.0);
        }
        for j in 0..k {
            jtj[(6 + j, 6 + j)] += self.lambda;
            jtr[6 + j] += self.lambda * c[j];
        }
        let step = jtj.cholesky()?.solve(&(-jtr));
        step.iter().all(|v| v.is_finite()).then_some(step)
    }

    fn apply_step(&self, s: f64, rbar: &Matrix2x3<f64>, tbar: &Vector2<f64>, c: &DVector<f64>, step: &DVector<f64>, t: f64) -> WeakParams {
        let k = c.len();
        let omega = Vector3::new(step[1], step[2], step[3]) * t;
        let rotation = so3_exp(&omega).compose(&Rotation::lift(rbar));
        (
            s + t * step[0],
            rotation.top_rows(),
            tbar + Vector2::new(step[4], step[5]) * t,
            c + step.rows(6, k) * t,
        )
    }
}

/// `½‖ξ D^½‖²_F + (λ/2)‖c‖²` with `ξ = W − s R̄ S(c) − T̄ 1ᵀ`.
pub fn cost_weak(obs: &KeypointObservations, basis: &ShapeBasis, pose: &WeakPose, lambda: f64) -> Result<f64> {
    check_dims(obs, basis)?;
    let problem = Problem {
        w: &obs.w,
        d: &obs.d,
        basis,
        lambda,
    };
    let shape = basis.instantiate(&pose.c)?;
    Ok(problem.cost(pose.cam.s, &pose.cam.rbar, &pose.cam.tbar, &pose.c.0, &shape))
}

/// Riemannian gradient of [`cost_weak`] with respect to `R̄`, projected onto
/// the tangent space of 2x3 row-orthonormal matrices.
pub fn weak_rotation_gradient(obs: &KeypointObservations, basis: &ShapeBasis, pose: &WeakPose) -> Result<Matrix2x3<f64>> {
    check_dims(obs, basis)?;
    let problem = Problem {
        w: &obs.w,
        d: &obs.d,
        basis,
        lambda: 0.0,
    };
    let shape = basis.instantiate(&pose.c)?;
    Ok(problem.rotation_gradient(pose.cam.s, &pose.cam.rbar, &pose.cam.tbar, &shape))
}

fn weighted_mean2(w: &Matrix2xX<f64>, d: &[f64]) -> Vector2<f64> {
    let mut acc = Vector2::zeros();
    for (i, &di) in d.iter().enumerate() {
        if di > 0.0 {
            acc += w.column(i) * di;
        }
    }
    acc / weight_sum(d)
}

pub(crate) fn weighted_mean3(s: &Matrix3xX<f64>, d: &[f64]) -> Vector3<f64> {
    let mut acc = Vector3::zeros();
    for (i, &di) in d.iter().enumerate() {
        if di > 0.0 {
            acc += s.column(i) * di;
        }
    }
    acc / weight_sum(d)
}

/// Weighted second moment of the centered shape, `Σ d_i s̃_i s̃_iᵀ`.
fn structure_matrix(shape: &Matrix3xX<f64>, d: &[f64]) -> (Matrix3<f64>, Vector3<f64>) {
    let mean = weighted_mean3(shape, d);
    let mut a = Matrix3::zeros();
    for (i, &di) in d.iter().enumerate() {
        if di > 0.0 {
            let si = shape.column(i) - mean;
            a += si * si.transpose() * di;
        }
    }
    (a, mean)
}

/// Condition number of the weighted structure matrix; infinite for coplanar shapes.
pub(crate) fn structure_condition(shape: &Matrix3xX<f64>, d: &[f64]) -> f64 {
    pinv_sym3(&structure_matrix(shape, d).0).1
}

/// Proximal operator of `t‖·‖₂` on the two singular values: the larger is
/// shrunk toward the smaller, and both together once they meet.
fn prox_spectral(sv: [f64; 2], t: f64) -> [f64; 2] {
    let [a, b] = sv;
    if a - b >= t {
        [a - t, b]
    } else {
        let m = ((a + b - t) * 0.5).max(0.0);
        [m, m]
    }
}

/// Convex initialization with the shape fixed at the mean: least squares
/// for `M = s R̄` (optionally spectral-norm regularized, solved by proximal
/// gradient), then `M` is factored into scale and row-orthonormal rotation.
pub fn init_weak_convex(obs: &KeypointObservations, basis: &ShapeBasis, cfg: &SolverConfig) -> Result<WeakPose> {
    check_dims(obs, basis)?;
    check_solvable(obs)?;
    let d = &obs.d;
    let b0 = &basis.b0;
    let w_mean = weighted_mean2(&obs.w, d);
    let (a, b_mean) = structure_matrix(b0, d);

    let mut wcov = Matrix2::zeros();
    let mut cross = Matrix2x3::zeros();
    for (i, &di) in d.iter().enumerate() {
        if di > 0.0 {
            let wi = obs.w.column(i) - w_mean;
            wcov += wi * wi.transpose() * di;
            cross += wi * (b0.column(i) - b_mean).transpose() * di;
        }
    }
    let (wmax, wmin) = eig2_extremes(&wcov);
    if !(wmax > 0.0) || wmin <= 1e-12 * wmax {
        return Err(Error::Degenerate("weighted 2D keypoints are collinear or coincident".into()));
    }

    let (a_inv, _) = pinv_sym3(&a);
    let mut m = cross * a_inv;

    if cfg.gamma > 0.0 {
        let lipschitz = a.symmetric_eigen().eigenvalues.max();
        if lipschitz > 0.0 {
            let step = 1.0 / lipschitz;
            for _ in 0..cfg.prox_iters {
                let grad = m * a - cross;
                let y = m - grad * step;
                let (u, sv) = left_svd_2x3(&y);
                m = with_singular_values(&y, &u, sv, prox_spectral(sv, cfg.gamma * step));
            }
        }
    }

    let (_, sv) = left_svd_2x3(&m);
    let s = 0.5 * (sv[0] + sv[1]);
    let scale_ref = wmax.sqrt() / weight_sum(d).sqrt();
    let rbar = match polar_2x3(&m) {
        Some(r) if s > 1e-9 * scale_ref.max(f64::MIN_POSITIVE) => r,
        _ => {
            return Err(Error::Degenerate(format!(
                "weak camera scale collapsed (singular values {:.3e}, {:.3e})",
                sv[0], sv[1]
            )))
        }
    };
    let tbar = w_mean - rbar * b_mean * s;
    Ok(WeakPose {
        cam: WeakCamera::new(s, rbar, tbar)?,
        c: ShapeCoefficients::zeros(basis.num_modes()),
    })
}

fn shape_normal_equations(problem: &Problem, s: f64, rbar: &Matrix2x3<f64>, tbar: &Vector2<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let k = problem.basis.num_modes();
    let b0 = &problem.basis.b0;
    let projected: Vec<Matrix2xX<f64>> = problem.basis.modes.iter().map(|m| rbar * m * s).collect();
    let mut n = DMatrix::identity(k, k) * problem.lambda;
    let mut rhs = DVector::zeros(k);
    for (i, &di) in problem.d.iter().enumerate() {
        if di <= 0.0 {
            continue;
        }
        let r = problem.w.column(i) - tbar - rbar * b0.column(i) * s;
        for j in 0..k {
            let aj = projected[j].column(i);
            rhs[j] += di * aj.dot(&r);
            for l in j..k {
                let v = di * aj.dot(&projected[l].column(i));
                n[(j, l)] += v;
                if l != j {
                    n[(l, j)] += v;
                }
            }
        }
    }
    (n, rhs)
}

fn residual_norms(problem: &Problem, s: f64, rbar: &Matrix2x3<f64>, tbar: &Vector2<f64>, shape: &Matrix3xX<f64>) -> Vec<f64> {
    (0..problem.w.ncols())
        .map(|i| (problem.w.column(i) - rbar * shape.column(i) * s - tbar).norm())
        .collect()
}

/// Block coordinate descent over scale, translation, shape and rotation.
pub fn solve_weak(obs: &KeypointObservations, basis: &ShapeBasis, cfg: &SolverConfig, init: Option<&WeakPose>) -> Result<WeakSolution> {
    cfg.validate()?;
    check_dims(obs, basis)?;
    check_solvable(obs)?;
    let start = match init {
        Some(p) => {
            if p.c.len() != basis.num_modes() {
                return Err(Error::Dimension("initial coefficients do not match basis".into()));
            }
            p.clone()
        }
        None => init_weak_convex(obs, basis, cfg)?,
    };

    let problem = Problem {
        w: &obs.w,
        d: &obs.d,
        basis,
        lambda: cfg.lambda,
    };
    let mut s = start.cam.s;
    let mut rbar = start.cam.rbar;
    let mut tbar = start.cam.tbar;
    let mut c = start.c.0.clone();
    let mut shape = problem.shape(&c);
    let mut cost = problem.cost(s, &rbar, &tbar, &c, &shape);

    let mut diagnostics = Diagnostics {
        structure_condition: structure_condition(&basis.b0, &obs.d),
        shape_condition: 1.0,
        ..Default::default()
    };
    let mut trace = vec![TraceStep {
        sweep: 0,
        block: Block::Init,
        cost,
        accepted: true,
    }];
    let snapshot = |s: f64, rbar: Matrix2x3<f64>, tbar: Vector2<f64>, c: &DVector<f64>| {
        PoseSnapshot::Weak(WeakPose {
            cam: WeakCamera { s, rbar, tbar },
            c: coeffs(c.clone()),
        })
    };
    if !cost.is_finite() {
        return Err(Error::SolverDiverged {
            message: "initial weak-perspective cost is not finite".into(),
            last_valid: Box::new(snapshot(s, rbar, tbar, &c)),
        });
    }

    let wsum = weight_sum(&obs.d);
    for sweep in 1..=cfg.max_iters {
        let sweep_start = cost;

        // (a) scale
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &di) in obs.d.iter().enumerate() {
            if di > 0.0 {
                let p = rbar * shape.column(i);
                num += di * (obs.w.column(i) - tbar).dot(&p);
                den += di * p.norm_squared();
            }
        }
        let candidate = if den > 0.0 { num / den } else { s };
        let mut accepted = false;
        if candidate > 0.0 && candidate.is_finite() {
            let new_cost = problem.cost(candidate, &rbar, &tbar, &c, &shape);
            if new_cost <= cost {
                s = candidate;
                cost = new_cost;
                accepted = true;
            }
        }
        trace.push(TraceStep {
            sweep,
            block: Block::Scale,
            cost,
            accepted,
        });

        // (b) translation
        let mut acc = Vector2::zeros();
        for (i, &di) in obs.d.iter().enumerate() {
            if di > 0.0 {
                acc += (obs.w.column(i) - rbar * shape.column(i) * s) * di;
            }
        }
        let candidate = acc / wsum;
        let new_cost = problem.cost(s, &rbar, &candidate, &c, &shape);
        let accepted = new_cost <= cost && new_cost.is_finite();
        if accepted {
            tbar = candidate;
            cost = new_cost;
        }
        trace.push(TraceStep {
            sweep,
            block: Block::Translation,
            cost,
            accepted,
        });

        // (c) shape coefficients
        if basis.num_modes() > 0 {
            let (n, rhs) = shape_normal_equations(&problem, s, &rbar, &tbar);
            let sol = solve_symmetric(&n, &rhs, cfg.shape_cond_limit);
            diagnostics.shape_condition = diagnostics.shape_condition.max(sol.condition);
            diagnostics.shape_truncated |= sol.truncated;
            let cand_shape = problem.shape(&sol.x);
            let new_cost = problem.cost(s, &rbar, &tbar, &sol.x, &cand_shape);
            let accepted = new_cost <= cost && new_cost.is_finite();
            if accepted {
                c = sol.x;
                shape = cand_shape;
                cost = new_cost;
            }
            trace.push(TraceStep {
                sweep,
                block: Block::Shape,
                cost,
                accepted,
            });
        }

        // (d) rotation: Riemannian gradient step, polar retraction, backtracking
        let grad = problem.rotation_gradient(s, &rbar, &tbar, &shape);
        let mut accepted = false;
        if grad.norm() > 0.0 {
            let mut moment = Matrix3::zeros();
            for (i, &di) in obs.d.iter().enumerate() {
                if di > 0.0 {
                    moment += shape.column(i) * shape.column(i).transpose() * di;
                }
            }
            let lipschitz = s * s * moment.symmetric_eigen().eigenvalues.max();
            let mut step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };
            for _ in 0..cfg.line_search_max_steps {
                if let Some(candidate) = polar_2x3(&(rbar - grad * step)) {
                    let new_cost = problem.cost(s, &candidate, &tbar, &c, &shape);
                    if new_cost < cost {
                        rbar = candidate;
                        cost = new_cost;
                        accepted = true;
                        break;
                    }
                }
                step *= cfg.line_search_shrink;
            }
        }
        trace.push(TraceStep {
            sweep,
            block: Block::Rotation,
            cost,
            accepted,
        });

        // (e) joint Gauss-Newton step with backtracking
        if let Some(step) = problem.gauss_newton_direction(s, &rbar, &tbar, &c, &shape) {
            let mut accepted = false;
            let mut t = 1.0;
            for _ in 0..cfg.line_search_max_steps.min(20) {
                let (cs, cr, ct, cc) = problem.apply_step(s, &rbar, &tbar, &c, &step, t);
                if cs > 0.0 {
                    let cand_shape = problem.shape(&cc);
                    let new_cost = problem.cost(cs, &cr, &ct, &cc, &cand_shape);
                    if new_cost <= cost && new_cost.is_finite() {
                        (s, rbar, tbar, c, shape, cost) = (cs, cr, ct, cc, cand_shape, new_cost);
                        accepted = true;
                        break;
                    }
                }
                t *= cfg.line_search_shrink;
            }
            trace.push(TraceStep {
                sweep,
                block: Block::Joint,
                cost,
                accepted,
            });
        }

        if !cost.is_finite() {
            return Err(Error::SolverDiverged {
                message: format!("weak-perspective cost became non-finite at sweep {sweep}"),
                last_valid: Box::new(snapshot(s, rbar, tbar, &c)),
            });
        }
        diagnostics.sweeps = sweep;
        let decrease = sweep_start - cost;
        if cost == 0.0 || decrease <= cfg.rel_tol * sweep_start {
            diagnostics.converged = true;
            break;
        }
    }

    diagnostics.ill_conditioned = !(diagnostics.structure_condition <= cfg.coplanarity_tol);
    let residuals = residual_norms(&problem, s, &rbar, &tbar, &shape);
    Ok(WeakSolution {
        pose: WeakPose {
            cam: WeakCamera::new(s, rbar, tbar)?,
            c: coeffs(c),
        },
        cost,
        trace,
        diagnostics,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_weak, so3_exp, Rotation};
    use crate::metrics::rotation_geodesic;
    use crate::shape::{build_pca_basis, ComponentSelection};
    use crate::solver::trace_is_monotone;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_basis(rng: &mut impl Rng, p: usize, k: usize) -> ShapeBasis {
        let b0 = Matrix3xX::from_fn(p, |_, _| rng.random_range(-0.5..0.5));
        let inst: Vec<_> = (0..(k + 4))
            .map(|_| &b0 + Matrix3xX::from_fn(p, |_, _| rng.random_range(-0.05..0.05)))
            .collect();
        let names = (0..p).map(|i| format!("k{i}")).collect();
        build_pca_basis(&inst, names, ComponentSelection::Count(k)).unwrap()
    }

    fn random_rotation(rng: &mut impl Rng) -> Rotation {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        so3_exp(&(axis * rng.random_range(0.0..std::f64::consts::PI)))
    }

    fn exact_cfg() -> SolverConfig {
        SolverConfig {
            lambda: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn exact_fit_has_zero_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let basis = random_basis(&mut rng, 8, 2);
        let c = ShapeCoefficients::from_slice(&[0.03, -0.02]);
        let cam = WeakCamera::from_rotation(400.0, &random_rotation(&mut rng), Vector2::new(300.0, 200.0)).unwrap();
        let w = project_weak(&basis.instantiate(&c).unwrap(), &cam);
        let obs = KeypointObservations::new(w, vec![1.0; 8]).unwrap();
        let cost = cost_weak(&obs, &basis, &WeakPose { cam, c }, 0.0).unwrap();
        assert!(cost < 1e-18);
    }

    #[test]
    fn zero_weights_leave_regularizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let basis = random_basis(&mut rng, 5, 2);
        let c = ShapeCoefficients::from_slice(&[0.3, 0.4]);
        let cam = WeakCamera::from_rotation(1.0, &Rotation::identity(), Vector2::zeros()).unwrap();
        let obs = KeypointObservations::new(Matrix2xX::from_element(5, 7.0), vec![0.0; 5]).unwrap();
        let cost = cost_weak(&obs, &basis, &WeakPose { cam, c }, 2.0).unwrap();
        assert_relative_eq!(cost, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn one_point_residual() {
        let basis = ShapeBasis::rigid(Matrix3xX::zeros(1), vec!["a".into()]).unwrap();
        let cam = WeakCamera::from_rotation(1.0, &Rotation::identity(), Vector2::zeros()).unwrap();
        let obs = KeypointObservations::new(Matrix2xX::from_column_slice(&[3.0, 4.0]), vec![1.0]).unwrap();
        let pose = WeakPose {
            cam,
            c: ShapeCoefficients::zeros(0),
        };
        assert_eq!(cost_weak(&obs, &basis, &pose, 1.0).unwrap(), 12.5);
    }

    fn synthetic(seed: u64, p: usize, k: usize) -> (ShapeBasis, WeakPose, KeypointObservations) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = random_basis(&mut rng, p, k);
        let c: Vec<f64> = basis.eigenvalues.iter().map(|e| e.sqrt() * rng.random_range(-1.5..1.5)).collect();
        let c = ShapeCoefficients::from_slice(&c);
        let cam = WeakCamera::from_rotation(
            rng.random_range(200.0..600.0),
            &random_rotation(&mut rng),
            Vector2::new(rng.random_range(100.0..500.0), rng.random_range(100.0..400.0)),
        )
        .unwrap();
        let w = project_weak(&basis.instantiate(&c).unwrap(), &cam);
        let obs = KeypointObservations::new(w, vec![1.0; p]).unwrap();
        (basis, WeakPose { cam, c }, obs)
    }

    #[test]
    fn convex_init_recovers_rigid_pose() {
        for seed in 0..10 {
            let (basis, truth, obs) = synthetic(seed, 8, 0);
            for gamma in [0.0, 1e-9] {
                let cfg = SolverConfig { gamma, ..exact_cfg() };
                let init = init_weak_convex(&obs, &basis, &cfg).unwrap();
                assert_relative_eq!(init.cam.s, truth.cam.s, max_relative = 1e-6);
                assert_relative_eq!(init.cam.rbar, truth.cam.rbar, epsilon = 1e-6);
                assert_relative_eq!(init.cam.tbar, truth.cam.tbar, epsilon = 1e-6 * truth.cam.tbar.norm());
            }
        }
    }

    #[test]
    fn convex_init_spectral_path_equalizes_singular_values() {
        let (basis, _, mut obs) = synthetic(3, 8, 0);
        // distort the observations anisotropically so least squares gives unequal singular values
        for mut c in obs.w.column_iter_mut() {
            c[0] *= 1.3;
        }
        let ls = init_weak_convex(&obs, &basis, &SolverConfig { gamma: 0.0, ..exact_cfg() }).unwrap();
        let reg = init_weak_convex(
            &obs,
            &basis,
            &SolverConfig {
                gamma: 10.0,
                ..exact_cfg()
            },
        )
        .unwrap();
        assert!(reg.cam.s < ls.cam.s);
        let rr = reg.cam.rbar * reg.cam.rbar.transpose();
        assert_relative_eq!(rr, Matrix2::identity(), epsilon = 1e-9);
    }

    #[test]
    fn convex_init_degenerate_cases() {
        let (basis, _, _) = synthetic(4, 6, 0);
        let w = Matrix2xX::from_fn(6, |r, _| if r == 0 { 10.0 } else { 20.0 });
        let obs = KeypointObservations::new(w, vec![1.0; 6]).unwrap();
        assert!(matches!(init_weak_convex(&obs, &basis, &exact_cfg()), Err(Error::Degenerate(_))));
        let w = Matrix2xX::from_fn(6, |r, c| if r == 0 { c as f64 } else { 2.0 * c as f64 + 1.0 });
        let obs = KeypointObservations::new(w, vec![1.0; 6]).unwrap();
        assert!(matches!(init_weak_convex(&obs, &basis, &exact_cfg()), Err(Error::Degenerate(_))));
        let obs = KeypointObservations::new(Matrix2xX::zeros(6), vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            init_weak_convex(&obs, &basis, &exact_cfg()),
            Err(Error::TooFewKeypoints { .. })
        ));
    }

    #[test]
    fn convex_init_is_homogeneous_in_pixels() {
        let (basis, _, obs) = synthetic(5, 9, 0);
        let a = init_weak_convex(&obs, &basis, &exact_cfg()).unwrap();
        let doubled = KeypointObservations::new(&obs.w * 2.0, obs.d.clone()).unwrap();
        let b = init_weak_convex(&doubled, &basis, &exact_cfg()).unwrap();
        assert_relative_eq!(b.cam.s, 2.0 * a.cam.s, max_relative = 1e-9);
        assert_relative_eq!(b.cam.tbar, a.cam.tbar * 2.0, epsilon = 1e-6);
        assert_relative_eq!(b.cam.rbar, a.cam.rbar, epsilon = 1e-6);
    }

    #[test]
    fn noiseless_recovery() {
        for seed in 0..20 {
            let (basis, truth, obs) = synthetic(100 + seed, 10, 2);
            let sol = solve_weak(&obs, &basis, &exact_cfg(), None).unwrap();
            assert!(sol.cost < 1e-10, "seed {seed}: cost {} after {:?}", sol.cost, sol.diagnostics);
            let err = rotation_geodesic(&sol.pose.cam.lifted_rotation(), &truth.cam.lifted_rotation());
            assert!(err.to_degrees() < 0.5, "seed {seed}: rotation error {}", err.to_degrees());
            assert!((&sol.pose.c.0 - &truth.c.0).amax() < 1e-4);
            assert!(trace_is_monotone(&sol.trace));
        }
    }

    #[test]
    fn noiseless_recovery_on_box_shapes() {
        let scenario = crate::synth::generate(&crate::synth::SynthConfig {
            frames: 30,
            ..Default::default()
        })
        .unwrap();
        for f in &scenario.frames {
            let shape = scenario.basis.instantiate(&f.coefficients).unwrap();
            let cam = WeakCamera::from_rotation(450.0, &f.pose.rotation, Vector2::new(320.0, 240.0)).unwrap();
            let obs = KeypointObservations::new(project_weak(&shape, &cam), vec![1.0; shape.ncols()]).unwrap();
            let sol = solve_weak(&obs, &scenario.basis, &exact_cfg(), None).unwrap();
            assert!(sol.cost < 1e-10, "{}: cost {}", f.frame_id, sol.cost);
            assert!((&sol.pose.c.0 - &f.coefficients.0).amax() < 1e-6);
            assert!(trace_is_monotone(&sol.trace));
        }
    }

    #[test]
    fn zero_weight_column_is_ignored_bitwise() {
        let (basis, _, obs) = synthetic(7, 10, 2);
        let mut a = obs.clone();
        a.d[3] = 0.0;
        let mut b = a.clone();
        b.w[(0, 3)] = -5000.0;
        b.w[(1, 3)] = 1e6;
        let sa = solve_weak(&a, &basis, &exact_cfg(), None).unwrap();
        let sb = solve_weak(&b, &basis, &exact_cfg(), None).unwrap();
        assert_eq!(sa.pose, sb.pose);
        assert_eq!(sa.cost, sb.cost);
    }

    #[test]
    fn coplanar_keypoints_are_flagged() {
        let b0 = Matrix3xX::from_columns(&[
            Vector3::new(-1.0, -1.0, 0.0),
            Vector3::new(1.0, -1.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(-1.0, 1.5, 0.0),
        ]) * 0.1;
        let basis = ShapeBasis::rigid(b0.clone(), (0..4).map(|i| format!("k{i}")).collect()).unwrap();
        let cam = WeakCamera::from_rotation(500.0, &Rotation::identity(), Vector2::new(320.0, 240.0)).unwrap();
        let obs = KeypointObservations::new(project_weak(&b0, &cam), vec![1.0; 4]).unwrap();
        let sol = solve_weak(&obs, &basis, &exact_cfg(), None).unwrap();
        assert!(sol.diagnostics.ill_conditioned);
        assert!(sol.diagnostics.structure_condition > 1e8);
    }

    #[test]
    fn riemannian_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let (basis, mut pose, mut obs) = synthetic(200 + seed, 10, 2);
            for v in obs.w.iter_mut() {
                *v += rng.random_range(-20.0..20.0);
            }
            obs.d.iter_mut().for_each(|d| *d = rng.random_range(0.1..1.0));
            pose.cam.rbar = random_rotation(&mut rng).top_rows();
            let grad = weak_rotation_gradient(&obs, &basis, &pose).unwrap();
            // tangent direction from a random skew perturbation: X Ω with Ω skew
            let omega = crate::geometry::so3_exp(&Vector3::new(0.3, -0.2, 0.5));
            let lifted = pose.cam.lifted_rotation();
            let h = 1e-6;
            for axis in 0..3 {
                let mut wv = Vector3::zeros();
                wv[axis] = 1.0;
                let wv = omega.rotate(&wv);
                let cost_at = |t: f64| {
                    let r = lifted.compose(&so3_exp(&(wv * t)));
                    let p = WeakPose {
                        cam: WeakCamera {
                            rbar: r.top_rows(),
                            ..pose.cam
                        },
                        c: pose.c.clone(),
                    };
                    cost_weak(&obs, &basis, &p, 0.0).unwrap()
                };
                let fd = (cost_at(h) - cost_at(-h)) / (2.0 * h);
                // tangent vector at t = 0 is the top rows of R [w]x
                let k = Matrix3::new(0.0, -wv.z, wv.y, wv.z, 0.0, -wv.x, -wv.y, wv.x, 0.0);
                let tangent = (lifted.matrix() * k).fixed_rows::<2>(0).into_owned();
                let analytic = grad.dot(&tangent);
                assert!((analytic - fd).abs() <= 1e-5 * fd.abs().max(1.0), "{analytic} vs {fd}");
            }
        }
    }

    #[test]
    fn pixel_scaling_equivariance() {
        let (basis, _, obs) = synthetic(11, 10, 2);
        let a = solve_weak(&obs, &basis, &exact_cfg(), None).unwrap();
        let scaled = KeypointObservations::new(&obs.w * 3.0, obs.d.clone()).unwrap();
        let b = solve_weak(&scaled, &basis, &exact_cfg(), None).unwrap();
        assert_relative_eq!(b.pose.cam.s, a.pose.cam.s * 3.0, max_relative = 1e-6);
        assert_relative_eq!(b.pose.cam.tbar, a.pose.cam.tbar * 3.0, max_relative = 1e-6);
        assert_relative_eq!(b.pose.cam.rbar, a.pose.cam.rbar, epsilon = 1e-6);
        assert!((&b.pose.c.0 - &a.pose.c.0).amax() < 1e-6);
    }
}
