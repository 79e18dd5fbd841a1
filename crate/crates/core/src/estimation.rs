//! Two-ping relative pose estimation from a matched keypoint pair.
//!
//! A keypoint seen from one ping constrains the landmark to a slant range
//! and to the plane perpendicular to the sonar array through the sensor: the
//! predicted measurement is `(|x_s|, x_s . e_x)` of the landmark in the
//! sensor frame. Two such measurements, a dead-reckoning relative-pose term
//! and a depth prior on the landmark form a small nonlinear least squares
//! problem solved with Levenberg-Marquardt over the second ping pose and the
//! landmark; the first pose stays fixed. The optimized relative pose plus
//! the pose block of the inverse Gauss-Newton Hessian become a loop-closure
//! constraint for the global graph.
//!
//! The depth prior resolves the two-circle ambiguity of same-side geometry:
//! without it the landmark can converge to either circle intersection
//! depending on initialization.

use crate::geometry::{skew, Pose};
use crate::sonar_image::SonarConfig;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix6, SMatrix, Vector2, Vector3, Vector6};

/// Tuning of the two-ping estimator and its covariances.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    /// Depth prior std per meter of landmark-to-ping horizontal distance.
    pub depth_prior_scale: f64,
    /// Lower bound on the depth prior std, meters.
    pub depth_prior_floor: f64,
    pub use_depth_prior: bool,
    /// Odometry translation variance per meter of pose separation, m^2/m.
    pub odo_trans_var_per_m: f64,
    /// Odometry rotation variance per meter of pose separation, rad^2/m.
    pub odo_rot_var_per_m: f64,
    /// Distance floor so coincident poses keep a positive covariance, m.
    pub odo_distance_floor: f64,
    pub max_iterations: usize,
    /// Relative cost decrease under which the solve counts as converged.
    pub cost_rel_tol: f64,
    /// Gradient infinity-norm under which the solve counts as converged.
    pub grad_tol: f64,
    /// Converged constraints whose worst whitened measurement residual
    /// exceeds this many sigma are suspected false matches.
    pub residual_gate_sigmas: f64,
    /// Converged constraints whose final cost exceeds this are suspected
    /// false matches: a wrong correspondence can zero its range residuals
    /// only by dragging the pose multiple odometry sigmas away, which shows
    /// up here as a chi-square-scale cost.
    pub cost_gate: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            depth_prior_scale: 0.05,
            depth_prior_floor: 0.1,
            use_depth_prior: true,
            odo_trans_var_per_m: 0.02,
            odo_rot_var_per_m: 1.0e-6,
            odo_distance_floor: 0.5,
            max_iterations: 50,
            cost_rel_tol: 1e-9,
            grad_tol: 1e-8,
            residual_gate_sigmas: 3.0,
            cost_gate: 6.0,
        }
    }
}

/// Landmark initialization plus its depth prior.
#[derive(Clone, Copy, Debug)]
pub struct LandmarkEstimate {
    pub position: Vector3<f64>,
    pub prior_mean_z: f64,
    pub prior_std_z: f64,
}

/// Estimated relative pose between two pings with its covariance, used as a
/// loop-closure factor.
#[derive(Clone, Debug)]
pub struct LoopClosureConstraint {
    pub ping_i: u64,
    pub ping_j: u64,
    /// Relative pose i -> j after optimization.
    pub relative: Pose,
    /// 6x6 covariance in twist order (rotation, translation).
    pub cov: Matrix6<f64>,
    pub converged: bool,
    pub final_cost: f64,
}

/// Full optimizer output; the pipeline keeps the landmark for evaluation.
#[derive(Clone, Debug)]
pub struct RelativePoseEstimate {
    pub constraint: LoopClosureConstraint,
    pub landmark: Vector3<f64>,
    pub initial_cost: f64,
    pub iterations: usize,
    /// Worst whitened range/plane residual at the optimum, in sigmas.
    pub max_meas_residual_sigmas: f64,
    /// True when the residual gate flags this as a suspected false match.
    pub gated: bool,
    /// Accepted-cost trace (strictly non-increasing).
    pub cost_trace: Vec<f64>,
}

/// Predicted keypoint measurement: slant range and along-track (array axis)
/// offset of the landmark in the sensor frame.
pub fn predict_measurement(
    pose: &Pose,
    sensor_offset: &Pose,
    landmark: &Vector3<f64>,
) -> Result<Vector2<f64>> {
    let sensor = pose.compose(sensor_offset);
    let p = sensor.inverse().transform_point(landmark);
    let range = p.norm();
    if range < 1e-9 {
        return Err(Error::InvalidInput(
            "landmark coincides with the sensor origin".into(),
        ));
    }
    Ok(Vector2::new(range, p.x))
}

/// Measurement value plus analytic Jacobians with respect to a right
/// perturbation of the pose (twist order: rotation, translation) and to the
/// landmark.
pub fn measurement_jacobians(
    pose: &Pose,
    sensor_offset: &Pose,
    landmark: &Vector3<f64>,
) -> Result<(Vector2<f64>, SMatrix<f64, 2, 6>, SMatrix<f64, 2, 3>)> {
    let sensor = pose.compose(sensor_offset);
    let p = sensor.inverse().transform_point(landmark);
    let range = p.norm();
    if range < 1e-9 {
        return Err(Error::InvalidInput(
            "landmark coincides with the sensor origin".into(),
        ));
    }
    // dz/dp: range row is p^T / |p|, plane row picks the x component.
    let mut dz_dp = SMatrix::<f64, 2, 3>::zeros();
    dz_dp.row_mut(0).copy_from(&(p.transpose() / range));
    dz_dp[(1, 0)] = 1.0;

    // p = R_off^T (exp(-delta) q - t_off) with q the body-frame landmark:
    // dp/domega = R_off^T [q]x, dp/dv = -R_off^T.
    let q = pose.inverse().transform_point(landmark);
    let r_off_t = sensor_offset
        .orientation
        .inverse()
        .to_rotation_matrix()
        .into_inner();
    let mut dp_dtwist = SMatrix::<f64, 3, 6>::zeros();
    dp_dtwist
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(r_off_t * skew(&q)));
    dp_dtwist.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r_off_t));

    // dp/dlandmark = R_sensor^T.
    let r_w_t = sensor.orientation.inverse().to_rotation_matrix().into_inner();

    let z = Vector2::new(range, p.x);
    Ok((z, dz_dp * dp_dtwist, dz_dp * r_w_t))
}

/// Keypoint measurement covariance: range discretization variance and a
/// plane variance growing with the squared range times the beam width.
pub fn measurement_covariance(range: f64, cfg: &SonarConfig) -> Matrix2<f64> {
    Matrix2::new(
        cfg.range_std * cfg.range_std,
        0.0,
        0.0,
        range * range * cfg.beam_width * cfg.beam_width,
    )
}

/// Odometry covariance proportional to the separation of the two poses,
/// twist order (rotation, translation).
pub fn odometry_covariance(distance: f64, cfg: &EstimationConfig) -> Matrix6<f64> {
    let d = distance.max(cfg.odo_distance_floor);
    let mut m = Matrix6::zeros();
    for k in 0..3 {
        m[(k, k)] = cfg.odo_rot_var_per_m * d;
        m[(k + 3, k + 3)] = cfg.odo_trans_var_per_m * d;
    }
    m
}

/// Initialize the landmark from the two geo-references: horizontal midpoint,
/// depth prior from the nearer ping (pose depth + altitude, i.e. the
/// flat-floor seafloor depth under it) with std proportional to the
/// horizontal landmark-to-ping distance.
pub fn init_landmark(
    src_geo: &Vector3<f64>,
    tgt_geo: &Vector3<f64>,
    ping_src: (&Pose, f64),
    ping_tgt: (&Pose, f64),
    cfg: &EstimationConfig,
) -> LandmarkEstimate {
    let x = 0.5 * (src_geo.x + tgt_geo.x);
    let y = 0.5 * (src_geo.y + tgt_geo.y);
    let horiz = |pose: &Pose| {
        let dx = x - pose.position.x;
        let dy = y - pose.position.y;
        (dx * dx + dy * dy).sqrt()
    };
    let d_src = horiz(ping_src.0);
    let d_tgt = horiz(ping_tgt.0);
    let (pose, alt, dist) = if d_src <= d_tgt {
        (ping_src.0, ping_src.1, d_src)
    } else {
        (ping_tgt.0, ping_tgt.1, d_tgt)
    };
    let prior_mean_z = pose.position.z + alt;
    let prior_std_z = (cfg.depth_prior_scale * dist).max(cfg.depth_prior_floor);
    LandmarkEstimate {
        position: Vector3::new(x, y, prior_mean_z),
        prior_mean_z,
        prior_std_z,
    }
}

/// Maximum relative error between the analytic Jacobians of
/// [`predict_measurement`] and central finite differences.
pub fn check_jacobians(pose: &Pose, sensor_offset: &Pose, landmark: &Vector3<f64>) -> f64 {
    let (_, j_pose, j_lm) = match measurement_jacobians(pose, sensor_offset, landmark) {
        Ok(v) => v,
        Err(_) => return f64::INFINITY,
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);

    for k in 0..6 {
        let mut dp = Vector6::zeros();
        dp[k] = h;
        let dm = -dp;
        let zp = predict_measurement(&pose.retract(&dp), sensor_offset, landmark).unwrap();
        let zm = predict_measurement(&pose.retract(&dm), sensor_offset, landmark).unwrap();
        let fd = (zp - zm) / (2.0 * h);
        for i in 0..2 {
            worst = worst.max(rel(j_pose[(i, k)], fd[i]));
        }
    }
    for k in 0..3 {
        let mut dl = Vector3::zeros();
        dl[k] = h;
        let zp = predict_measurement(pose, sensor_offset, &(landmark + dl)).unwrap();
        let zm = predict_measurement(pose, sensor_offset, &(landmark - dl)).unwrap();
        let fd = (zp - zm) / (2.0 * h);
        for i in 0..2 {
            worst = worst.max(rel(j_lm[(i, k)], fd[i]));
        }
    }
    worst
}

/// Inputs of one two-ping estimation problem.
#[derive(Clone, Debug)]
pub struct TwoPingInputs<'a> {
    pub ping_i: u64,
    pub ping_j: u64,
    /// Fixed pose of the first ping.
    pub pose_i: Pose,
    /// Initial value of the second ping pose.
    pub pose_j: Pose,
    /// Dead-reckoning relative pose measurement i -> j.
    pub odo_rel: Pose,
    /// Euclidean separation of the two dead-reckoning poses, meters.
    pub odo_distance: f64,
    /// Measured slant ranges of the keypoint in each ping.
    pub range_i: f64,
    pub range_j: f64,
    pub landmark: LandmarkEstimate,
    pub sonar: &'a SonarConfig,
    pub cfg: &'a EstimationConfig,
}

struct ResidualBuffers {
    r: DVector<f64>,
    jac: DMatrix<f64>,
}

fn build_system(
    inp: &TwoPingInputs,
    pose_j: &Pose,
    landmark: &Vector3<f64>,
    with_jacobian: bool,
) -> Result<ResidualBuffers> {
    let nr = if inp.cfg.use_depth_prior { 11 } else { 10 };
    let mut r = DVector::zeros(nr);
    let mut jac = DMatrix::zeros(if with_jacobian { nr } else { 0 }, 9);

    let offset = &inp.sonar.sensor_offset;
    let cov_i = measurement_covariance(inp.range_i, inp.sonar);
    let cov_j = measurement_covariance(inp.range_j, inp.sonar);
    let w_i = [1.0 / cov_i[(0, 0)].sqrt(), 1.0 / cov_i[(1, 1)].sqrt()];
    let w_j = [1.0 / cov_j[(0, 0)].sqrt(), 1.0 / cov_j[(1, 1)].sqrt()];

    // Keypoint measurement residuals (prediction minus measurement).
    let (z_i, _, j_lm_i) = measurement_jacobians(&inp.pose_i, offset, landmark)?;
    r[0] = w_i[0] * (z_i[0] - inp.range_i);
    r[1] = w_i[1] * z_i[1];
    let (z_j, j_pose_j, j_lm_j) = measurement_jacobians(pose_j, offset, landmark)?;
    r[2] = w_j[0] * (z_j[0] - inp.range_j);
    r[3] = w_j[1] * z_j[1];

    // Odometry residual: log(measured^-1 * predicted), whitened.
    let odo_cov = odometry_covariance(inp.odo_distance, inp.cfg);
    let mut w_t = Vector6::zeros();
    for k in 0..6 {
        w_t[k] = 1.0 / odo_cov[(k, k)].sqrt();
    }
    let odo_residual = |pj: &Pose| -> Vector6<f64> {
        let predicted = inp.pose_i.relative(pj);
        inp.odo_rel.inverse().compose(&predicted).log().to_vector()
    };
    let e_odo = odo_residual(pose_j);
    for k in 0..6 {
        r[4 + k] = w_t[k] * e_odo[k];
    }

    if inp.cfg.use_depth_prior {
        r[10] = (landmark.z - inp.landmark.prior_mean_z) / inp.landmark.prior_std_z;
    }

    if with_jacobian {
        for c in 0..3 {
            jac[(0, 6 + c)] = w_i[0] * j_lm_i[(0, c)];
            jac[(1, 6 + c)] = w_i[1] * j_lm_i[(1, c)];
            jac[(2, 6 + c)] = w_j[0] * j_lm_j[(0, c)];
            jac[(3, 6 + c)] = w_j[1] * j_lm_j[(1, c)];
        }
        for c in 0..6 {
            jac[(2, c)] = w_j[0] * j_pose_j[(0, c)];
            jac[(3, c)] = w_j[1] * j_pose_j[(1, c)];
        }
        // Odometry Jacobian w.r.t. the pose_j twist by central differences;
        // the residual itself is cheap and exact.
        let h = 1e-7;
        for c in 0..6 {
            let mut d = Vector6::zeros();
            d[c] = h;
            let ep = odo_residual(&pose_j.retract(&d));
            let em = odo_residual(&pose_j.retract(&(-d)));
            for k in 0..6 {
                jac[(4 + k, c)] = w_t[k] * (ep[k] - em[k]) / (2.0 * h);
            }
        }
        if inp.cfg.use_depth_prior {
            jac[(10, 8)] = 1.0 / inp.landmark.prior_std_z;
        }
    }

    Ok(ResidualBuffers { r, jac })
}

/// Solve the two-ping problem with Levenberg-Marquardt. The returned
/// constraint is flagged `converged` only when the stopping criteria were
/// met with a cost not above the initial one; its covariance is the pose
/// block of the inverse Gauss-Newton Hessian at the optimum.
pub fn estimate_relative_pose(inp: &TwoPingInputs) -> Result<RelativePoseEstimate> {
    if !(inp.range_i > 0.0 && inp.range_j > 0.0) {
        return Err(Error::InvalidInput("slant ranges must be positive".into()));
    }
    if !(inp.landmark.prior_std_z > 0.0) {
        return Err(Error::InvalidInput("depth prior std must be positive".into()));
    }

    let mut pose_j = inp.pose_j;
    let mut landmark = inp.landmark.position;
    let cost_of = |r: &DVector<f64>| 0.5 * r.norm_squared();

    let first = build_system(inp, &pose_j, &landmark, false)?;
    let initial_cost = cost_of(&first.r);
    let mut cost = initial_cost;
    let mut cost_trace = vec![cost];

    let mut lambda = 1e-6;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < inp.cfg.max_iterations {
        iterations += 1;
        let sys = build_system(inp, &pose_j, &landmark, true)?;
        let grad = sys.jac.transpose() * &sys.r;
        if grad.amax() < inp.cfg.grad_tol {
            converged = true;
            break;
        }
        let h = sys.jac.transpose() * &sys.jac;

        // Inner damping loop: retry with larger lambda until a step is
        // accepted or the damping explodes (cost-increase lock).
        let mut accepted = false;
        while lambda < 1e14 {
            let mut a = h.clone();
            for k in 0..9 {
                a[(k, k)] += lambda * a[(k, k)].max(1e-12);
            }
            let delta = match a.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let pose_trial = pose_j.retract(&Vector6::from_column_slice(&delta.as_slice()[0..6]));
            let lm_trial = landmark + Vector3::new(delta[6], delta[7], delta[8]);
            let trial = build_system(inp, &pose_trial, &lm_trial, false)?;
            let trial_cost = cost_of(&trial.r);
            if trial_cost <= cost {
                let rel_decrease = (cost - trial_cost) / cost.max(1e-300);
                pose_j = pose_trial;
                landmark = lm_trial;
                cost = trial_cost;
                cost_trace.push(cost);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel_decrease < inp.cfg.cost_rel_tol {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || converged {
            break;
        }
    }
    converged = converged && cost <= initial_cost;

    // Covariance: pose block of the inverse GN Hessian at the optimum.
    let sys = build_system(inp, &pose_j, &landmark, true)?;
    let h = sys.jac.transpose() * &sys.jac;
    let cov = match h.clone().cholesky() {
        Some(ch) => {
            let inv = ch.inverse();
            let mut m = Matrix6::zeros();
            for i in 0..6 {
                for j in 0..6 {
                    m[(i, j)] = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                }
            }
            m
        }
        None => {
            converged = false;
            Matrix6::identity() * 1e12
        }
    };

    let max_meas_residual_sigmas = sys.r.rows(0, 4).amax();
    let gated =
        max_meas_residual_sigmas > inp.cfg.residual_gate_sigmas || cost > inp.cfg.cost_gate;

    Ok(RelativePoseEstimate {
        constraint: LoopClosureConstraint {
            ping_i: inp.ping_i,
            ping_j: inp.ping_j,
            relative: inp.pose_i.relative(&pose_j),
            cov,
            converged,
            final_cost: cost,
        },
        landmark,
        initial_cost,
        iterations,
        max_meas_residual_sigmas,
        gated,
        cost_trace,
    })
}

/// Consistency helper used by tests and the pipeline: the slant range of a
/// canonical-image keypoint given its horizontal range and the ping
/// altitude.
pub fn slant_range_of(ground_range: f64, altitude: f64) -> f64 {
    (ground_range * ground_range + altitude * altitude).sqrt()
}
