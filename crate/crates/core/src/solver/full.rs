//! Full-perspective fit in normalized image coordinates with per-keypoint
//! depths, initialized from the weak-perspective solution.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Vector3};

use super::linalg::solve_symmetric;
use super::weak::{structure_condition, weighted_mean3, MIN_WEIGHTED_KEYPOINTS};
use super::{coeffs, Block, Diagnostics, FullPose, KeypointObservations, PoseSnapshot, SolverConfig, TraceStep, WeakPose};
use crate::error::{Error, Result};
use crate::geometry::{normalize_pixels, orthogonal_procrustes, so3_exp, CameraIntrinsics, RigidTransform};
use crate::shape::ShapeBasis;

#[derive(Debug, Clone, PartialEq)]
pub struct FullSolution {
    pub pose: FullPose,
    pub cost: f64,
    pub trace: Vec<TraceStep>,
    pub diagnostics: Diagnostics,
    /// Per-keypoint reprojection error in pixels; `None` where the fitted
    /// point lies behind the camera.
    pub residuals: Vec<Option<f64>>,
}

struct Problem<'a> {
    rays: Matrix3xX<f64>,
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

    fn cost(&self, pose: &RigidTransform, c: &DVector<f64>, z: &[f64], shape: &Matrix3xX<f64>) -> f64 {
        let r = pose.rotation.matrix();
        let mut acc = 0.0;
        for (i, &di) in self.d.iter().enumerate() {
            if di > 0.0 {
                let e = self.rays.column(i) * z[i] - r * shape.column(i) - pose.translation;
                acc += di * e.norm_squared();
            }
        }
        0.5 * acc + 0.5 * self.lambda * c.norm_squared()
    }

    fn fit_depths(&self, pose: &RigidTransform, shape: &Matrix3xX<f64>, ray_norms: &[f64], z_min: f64) -> Vec<f64> {
        shape
            .column_iter()
            .enumerate()
            .map(|(i, s)| (self.rays.column(i).dot(&pose.apply(&s.into_owned())) / ray_norms[i]).max(z_min))
            .collect()
    }

    /// Gauss-Newton direction on `½ Σ d_i ‖(I − P_i)(R S_i + T)‖² + (λ/2)‖c‖²`,
    /// where `P_i` projects onto ray `i`. Rotation is perturbed on the left.
    fn gauss_newton_direction(
        &self,
        pose: &RigidTransform,
        c: &DVector<f64>,
        shape: &Matrix3xX<f64>,
        ray_norms: &[f64],
    ) -> Option<DVector<f64>> {
        let k = c.len();
        let n = 6 + k;
        let r = *pose.rotation.matrix();
        let mut jtj = DMatrix::zeros(n, n);
        let mut jtr = DVector::zeros(n);
        let mut jac = DMatrix::zeros(3, n);
        for (i, &di) in self.d.iter().enumerate() {
            if di <= 0.0 {
                continue;
            }
            let ray = self.rays.column(i);
            let q = Matrix3::identity() - ray * ray.transpose() / ray_norms[i];
            let rs = r * shape.column(i);
            let resid = q * (rs + pose.translation);
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-q * rs.cross_matrix()));
            jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
            for (j, mode) in self.basis.modes.iter().enumerate() {
                jac.column_mut(6 + j).copy_from(&(q * (r * mode.column(i))));
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
}

fn apply_step(pose: &RigidTransform, c: &DVector<f64>, step: &DVector<f64>, t: f64) -> (RigidTransform, DVector<f64>) {
    let omega = Vector3::new(step[0], step[1], step[2]) * t;
    let rotation = so3_exp(&omega).compose(&pose.rotation);
    let translation = pose.translation + Vector3::new(step[3], step[4], step[5]) * t;
    (RigidTransform::new(rotation, translation), c + step.rows(6, c.len()) * t)
}

fn check_inputs(obs: &KeypointObservations, k: &CameraIntrinsics, basis: &ShapeBasis) -> Result<()> {
    obs.validate()?;
    k.validate()?;
    if obs.len() != basis.num_keypoints() {
        return Err(Error::Dimension(format!(
            "{} observations for a {}-keypoint basis",
            obs.len(),
            basis.num_keypoints()
        )));
    }
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

/// `½ Σ d_i ‖w̃_i z_i − R S_i − T‖² + (λ/2)‖c‖²`.
pub fn cost_full(obs: &KeypointObservations, k: &CameraIntrinsics, basis: &ShapeBasis, pose: &FullPose, lambda: f64) -> Result<f64> {
    obs.validate()?;
    if pose.z.len() != obs.len() || obs.len() != basis.num_keypoints() {
        return Err(Error::Dimension("depths, observations and basis disagree".into()));
    }
    let problem = Problem {
        rays: normalize_pixels(&obs.w, k),
        d: &obs.d,
        basis,
        lambda,
    };
    let shape = basis.instantiate(&pose.c)?;
    Ok(problem.cost(&pose.pose, &pose.c.0, &pose.z, &shape))
}

/// Lifts a weak-perspective pose to a rigid transform: the third rotation row
/// is the cross product of the first two, the weighted shape centroid is
/// placed at depth `fx / s`, and its lateral position follows from the weak
/// projection of that centroid. Depths start at the model point depths.
pub fn initial_full_pose(
    weak: &WeakPose,
    obs: &KeypointObservations,
    k: &CameraIntrinsics,
    basis: &ShapeBasis,
    z_min: f64,
) -> Result<FullPose> {
    let rotation = weak.cam.lifted_rotation();
    let shape = basis.instantiate(&weak.c)?;
    let centroid = weighted_mean3(&shape, &obs.d);
    let depth = k.fx / weak.cam.s;
    let pix = weak.cam.rbar * centroid * weak.cam.s + weak.cam.tbar;
    let cam_centroid = k.unproject(pix.x, pix.y, depth);
    let translation = cam_centroid - rotation.rotate(&centroid);
    let pose = RigidTransform::new(rotation, translation);
    let z = shape.column_iter().map(|c| pose.apply(&c.into_owned()).z.max(z_min)).collect();
    Ok(FullPose {
        pose,
        c: weak.c.clone(),
        z,
    })
}

/// Block coordinate descent over depths, rotation, translation and shape.
pub fn solve_full(
    obs: &KeypointObservations,
    k: &CameraIntrinsics,
    basis: &ShapeBasis,
    cfg: &SolverConfig,
    init: &WeakPose,
) -> Result<FullSolution> {
    cfg.validate()?;
    check_inputs(obs, k, basis)?;
    if init.c.len() != basis.num_modes() {
        return Err(Error::Dimension("initial coefficients do not match basis".into()));
    }
    let start = initial_full_pose(init, obs, k, basis, cfg.z_min)?;
    let problem = Problem {
        rays: normalize_pixels(&obs.w, k),
        d: &obs.d,
        basis,
        lambda: cfg.lambda,
    };
    let d = &obs.d;
    let p = obs.len();
    let ray_norms: Vec<f64> = problem.rays.column_iter().map(|r| r.norm_squared()).collect();

    let mut pose = start.pose;
    let mut c = start.c.0.clone();
    let mut z = start.z.clone();
    let mut shape = problem.shape(&c);
    let mut cost = problem.cost(&pose, &c, &z, &shape);

    let mut diagnostics = Diagnostics {
        structure_condition: structure_condition(&basis.b0, d),
        shape_condition: 1.0,
        ..Default::default()
    };
    let mut trace = vec![TraceStep {
        sweep: 0,
        block: Block::Init,
        cost,
        accepted: true,
    }];
    let snapshot = |pose: RigidTransform, c: &DVector<f64>, z: &[f64]| {
        Box::new(PoseSnapshot::Full(FullPose {
            pose,
            c: coeffs(c.clone()),
            z: z.to_vec(),
        }))
    };
    if !cost.is_finite() {
        return Err(Error::SolverDiverged {
            message: "initial full-perspective cost is not finite".into(),
            last_valid: snapshot(pose, &c, &z),
        });
    }

    // mode Gram matrix: rotation-invariant part of the shape normal equations
    let kmodes = basis.num_modes();
    let mut gram = DMatrix::identity(kmodes, kmodes) * cfg.lambda;
    for j in 0..kmodes {
        for l in j..kmodes {
            let mut v = 0.0;
            for (i, &di) in d.iter().enumerate() {
                if di > 0.0 {
                    v += di * basis.modes[j].column(i).dot(&basis.modes[l].column(i));
                }
            }
            gram[(j, l)] += v;
            if l != j {
                gram[(l, j)] += v;
            }
        }
    }

    let mut clamped_sweeps = vec![0usize; p];
    let mut sweeps_run = 0;
    for sweep in 1..=cfg.max_iters {
        let sweep_start = cost;
        sweeps_run = sweep;

        // (a) depths: foot of the perpendicular from each model point onto its ray
        let r = *pose.rotation.matrix();
        let mut candidate = z.clone();
        for i in 0..p {
            let x = r * shape.column(i) + pose.translation;
            let zi = problem.rays.column(i).dot(&x) / ray_norms[i];
            if zi < cfg.z_min {
                candidate[i] = cfg.z_min;
                if d[i] > 0.0 {
                    clamped_sweeps[i] += 1;
                }
            } else {
                candidate[i] = zi;
            }
        }
        let new_cost = problem.cost(&pose, &c, &candidate, &shape);
        let accepted = new_cost <= cost && new_cost.is_finite();
        if accepted {
            z = candidate;
            cost = new_cost;
        }
        trace.push(TraceStep {
            sweep,
            block: Block::Depth,
            cost,
            accepted,
        });

        // (b) rotation by weighted Procrustes after centroid removal
        let mut targets = problem.rays.clone();
        for (i, mut col) in targets.column_iter_mut().enumerate() {
            col *= z[i];
        }
        let t_mean = weighted_mean3(&targets, d);
        let s_mean = weighted_mean3(&shape, d);
        let centered_t = Matrix3xX::from_fn(p, |row, col| targets[(row, col)] - t_mean[row]);
        let centered_s = Matrix3xX::from_fn(p, |row, col| shape[(row, col)] - s_mean[row]);
        let mut accepted = false;
        if let Ok(rot) = orthogonal_procrustes(&centered_s, &centered_t, d) {
            let cand = RigidTransform::new(rot, pose.translation);
            let new_cost = problem.cost(&cand, &c, &z, &shape);
            if new_cost <= cost && new_cost.is_finite() {
                pose = cand;
                cost = new_cost;
                accepted = true;
            }
        }
        trace.push(TraceStep {
            sweep,
            block: Block::Rotation,
            cost,
            accepted,
        });

        // (c) translation
        let cand = RigidTransform::new(pose.rotation, t_mean - pose.rotation.rotate(&s_mean));
        let new_cost = problem.cost(&cand, &c, &z, &shape);
        let accepted = new_cost <= cost && new_cost.is_finite();
        if accepted {
            pose = cand;
            cost = new_cost;
        }
        trace.push(TraceStep {
            sweep,
            block: Block::Translation,
            cost,
            accepted,
        });

        // (d) shape coefficients
        if kmodes > 0 {
            let r = *pose.rotation.matrix();
            let rt = r.transpose();
            let mut rhs = DVector::zeros(kmodes);
            for (i, &di) in d.iter().enumerate() {
                if di <= 0.0 {
                    continue;
                }
                let resid = targets.column(i) - pose.translation - r * basis.b0.column(i);
                let local: Vector3<f64> = rt * resid;
                for j in 0..kmodes {
                    rhs[j] += di * basis.modes[j].column(i).dot(&local);
                }
            }
            let sol = solve_symmetric(&gram, &rhs, cfg.shape_cond_limit);
            diagnostics.shape_condition = diagnostics.shape_condition.max(sol.condition);
            diagnostics.shape_truncated |= sol.truncated;
            let cand_shape = problem.shape(&sol.x);
            let new_cost = problem.cost(&pose, &sol.x, &z, &cand_shape);
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

        // (e) joint step on (R, T, c) with depths re-fitted
        if let Some(step) = problem.gauss_newton_direction(&pose, &c, &shape, &ray_norms) {
            let mut accepted = false;
            let mut t = 1.0;
            for _ in 0..cfg.line_search_max_steps.min(20) {
                let (cand_pose, cand_c) = apply_step(&pose, &c, &step, t);
                let cand_shape = problem.shape(&cand_c);
                let cand_z = problem.fit_depths(&cand_pose, &cand_shape, &ray_norms, cfg.z_min);
                let new_cost = problem.cost(&cand_pose, &cand_c, &cand_z, &cand_shape);
                if new_cost <= cost && new_cost.is_finite() {
                    (pose, c, shape, z, cost) = (cand_pose, cand_c, cand_shape, cand_z, new_cost);
                    accepted = true;
                    break;
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
                message: format!("full-perspective cost became non-finite at sweep {sweep}"),
                last_valid: snapshot(pose, &c, &z),
            });
        }
        let decrease = sweep_start - cost;
        if cost == 0.0 || decrease <= cfg.rel_tol * sweep_start {
            diagnostics.converged = true;
            break;
        }
    }
    diagnostics.sweeps = sweeps_run;
    diagnostics.ill_conditioned = !(diagnostics.structure_condition <= cfg.coplanarity_tol);
    diagnostics.behind_camera_warning = clamped_sweeps.iter().any(|&n| 2 * n > sweeps_run);

    let residuals = (0..p)
        .map(|i| {
            let x = pose.apply(&shape.column(i).into_owned());
            (x.z > 0.0).then(|| (k.project_point(&x) - obs.w.column(i)).norm())
        })
        .collect();
    Ok(FullSolution {
        pose: FullPose { pose, c: coeffs(c), z },
        cost,
        trace,
        diagnostics,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_full, Rotation};
    use crate::metrics::rotation_geodesic;
    use crate::shape::{build_pca_basis, ComponentSelection, ShapeCoefficients};
    use crate::solver::{solve_weak, trace_is_monotone};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k500() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
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

    fn random_basis(rng: &mut impl Rng, p: usize, k: usize) -> ShapeBasis {
        let b0 = Matrix3xX::from_fn(p, |_, _| rng.random_range(-0.3..0.3));
        let inst: Vec<_> = (0..(k + 4))
            .map(|_| &b0 + Matrix3xX::from_fn(p, |_, _| rng.random_range(-0.03..0.03)))
            .collect();
        let names = (0..p).map(|i| format!("k{i}")).collect();
        build_pca_basis(&inst, names, ComponentSelection::Count(k)).unwrap()
    }

    struct Case {
        basis: ShapeBasis,
        pose: RigidTransform,
        c: ShapeCoefficients,
        obs: KeypointObservations,
    }

    fn synthetic(seed: u64, p: usize, k: usize, kk: &CameraIntrinsics) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = random_basis(&mut rng, p, k);
        let c: Vec<f64> = basis.eigenvalues.iter().map(|e| e.sqrt() * rng.random_range(-1.5..1.5)).collect();
        let c = ShapeCoefficients::from_slice(&c);
        let pose = RigidTransform::new(
            random_rotation(&mut rng),
            Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2), rng.random_range(2.0..4.0)),
        );
        let w = project_full(&basis.instantiate(&c).unwrap(), &pose, kk).unwrap();
        let obs = KeypointObservations::new(w, vec![1.0; p]).unwrap();
        Case { basis, pose, c, obs }
    }

    fn exact_cfg() -> SolverConfig {
        SolverConfig {
            lambda: 0.0,
            ..Default::default()
        }
    }

    fn run(case: &Case, kk: &CameraIntrinsics) -> FullSolution {
        let weak = solve_weak(&case.obs, &case.basis, &exact_cfg(), None).unwrap();
        solve_full(&case.obs, kk, &case.basis, &exact_cfg(), &weak.pose).unwrap()
    }

    #[test]
    fn noiseless_recovery() {
        let kk = k500();
        for seed in 0..20 {
            let case = synthetic(seed, 10, 2, &kk);
            let sol = run(&case, &kk);
            let rot = rotation_geodesic(&sol.pose.pose.rotation, &case.pose.rotation).to_degrees();
            let terr = (sol.pose.pose.translation - case.pose.translation).norm();
            assert!(rot < 0.5, "seed {seed}: rotation {rot}");
            assert!(terr < 1e-3 * case.pose.translation.norm(), "seed {seed}: translation {terr}");
            assert!(sol.cost < 1e-8, "seed {seed}: cost {}", sol.cost);
            assert!(trace_is_monotone(&sol.trace));
            assert!((&sol.pose.c.0 - &case.c.0).amax() < 1e-3);
        }
    }

    #[test]
    fn rigid_depths_match_true_depths() {
        let kk = k500();
        for seed in 0..10 {
            let case = synthetic(50 + seed, 8, 0, &kk);
            let sol = run(&case, &kk);
            let truth = case.pose.apply_all(&case.basis.b0);
            for i in 0..8 {
                let zt = truth[(2, i)];
                assert!((sol.pose.z[i] - zt).abs() <= 1e-6 * zt, "seed {seed} kp {i}");
            }
        }
    }

    #[test]
    fn invariant_to_focal_scaling() {
        let kk = k500();
        let case = synthetic(77, 10, 2, &kk);
        let a = run(&case, &kk);
        let k2 = CameraIntrinsics {
            fx: 1000.0,
            fy: 1000.0,
            ..kk
        };
        let mut w2 = case.obs.w.clone();
        for mut col in w2.column_iter_mut() {
            col[0] = 2.0 * (col[0] - kk.cx) + kk.cx;
            col[1] = 2.0 * (col[1] - kk.cy) + kk.cy;
        }
        let case2 = Case {
            obs: KeypointObservations::new(w2, case.obs.d.clone()).unwrap(),
            ..case
        };
        let b = run(&case2, &k2);
        let dr = (a.pose.pose.rotation.matrix() - b.pose.pose.rotation.matrix()).amax();
        let dt = (a.pose.pose.translation - b.pose.pose.translation).amax();
        assert!(dr < 1e-6 && dt < 1e-6, "{dr} {dt}");
        assert!((&a.pose.c.0 - &b.pose.c.0).amax() < 1e-6);
        for (x, y) in a.pose.z.iter().zip(&b.pose.z) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn first_sweep_decreases_cost() {
        let kk = k500();
        let case = synthetic(5, 10, 2, &kk);
        let sol = run(&case, &kk);
        let init = sol.trace[0].cost;
        assert!(init.is_finite());
        let after_first = sol.trace.iter().rfind(|t| t.sweep == 1).unwrap().cost;
        assert!(after_first < init);
    }

    #[test]
    fn zero_weight_column_does_not_move_solution() {
        let kk = k500();
        let case = synthetic(9, 10, 2, &kk);
        let mut a = case.obs.clone();
        a.d[4] = 0.0;
        let mut b = a.clone();
        b.w[(0, 4)] = 3.0;
        b.w[(1, 4)] = 470.0;
        let weak_a = solve_weak(&a, &case.basis, &exact_cfg(), None).unwrap();
        let weak_b = solve_weak(&b, &case.basis, &exact_cfg(), None).unwrap();
        let fa = solve_full(&a, &kk, &case.basis, &exact_cfg(), &weak_a.pose).unwrap();
        let fb = solve_full(&b, &kk, &case.basis, &exact_cfg(), &weak_b.pose).unwrap();
        assert_eq!(fa.pose.pose, fb.pose.pose);
        assert_eq!(fa.pose.c, fb.pose.c);
        for i in (0..10).filter(|&i| i != 4) {
            assert_eq!(fa.pose.z[i], fb.pose.z[i]);
        }
    }
}
