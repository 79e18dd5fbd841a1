//! Global pose graph: per-ping pose nodes, an odometry chain from
//! dead-reckoning, loop-closure factors from the two-ping estimator, and a
//! sparse Levenberg-Marquardt solver over tangent-space residuals.
//!
//! The single fixed node anchors the gauge freedom. Incremental updates
//! warm-start from the previous solution and only free the variables within
//! a graph-distance horizon of the new factors; a full batch pass every few
//! updates keeps linearization points fresh. The sparse normal equations are
//! factorized with a sparse Cholesky (run sequentially so results do not
//! depend on thread count).

use crate::estimation::{odometry_covariance, EstimationConfig, LoopClosureConstraint};
use crate::geometry::{Pose, Twist};
use crate::{Error, Result};
use nalgebra::{Matrix6, Vector6};
use std::collections::{HashMap, HashSet, VecDeque};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorKind {
    Odometry,
    LoopClosure,
    Prior,
}

/// A measurement between two nodes (or on one node for priors), with its
/// covariance in twist order (rotation, translation).
#[derive(Clone, Debug)]
pub struct Factor {
    pub kind: FactorKind,
    pub from: u64,
    pub to: u64,
    pub measured: Pose,
    pub cov: Matrix6<f64>,
}

#[derive(Clone, Debug)]
pub struct PoseNode {
    pub id: u64,
    pub estimate: Pose,
    pub fixed: bool,
}

/// Solver tuning.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub max_iterations: usize,
    pub cost_rel_tol: f64,
    pub lambda_init: f64,
    /// Optional Huber threshold (in whitened residual norm) applied to
    /// loop-closure factors only.
    pub huber_threshold: Option<f64>,
    /// Scale applied to loop-closure covariances on insertion.
    pub lc_cov_scale: f64,
    /// Iteration cap of horizon-restricted incremental updates.
    pub incremental_max_iterations: usize,
    /// Graph-distance horizon of incremental updates, nodes.
    pub incremental_horizon: usize,
    /// Run a full batch pass every this many incremental updates.
    pub full_relin_every: usize,
    /// Keep every k-th ping as a graph node (1 = per-ping nodes).
    pub node_stride: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            cost_rel_tol: 1e-10,
            lambda_init: 1e-8,
            huber_threshold: Some(2.5),
            lc_cov_scale: 1.0,
            incremental_max_iterations: 12,
            incremental_horizon: 600,
            full_relin_every: 4,
            node_stride: 1,
        }
    }
}

/// Outcome of one solve.
#[derive(Clone, Debug)]
pub struct GraphSolution {
    pub cost_before: f64,
    pub cost_after: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Per-factor chi-square at the final estimate.
    pub chi2: Vec<f64>,
}

/// Per-factor quantities precomputed at insertion.
#[derive(Clone, Debug)]
struct FactorCache {
    /// L^-1 with cov = L L^T: whitens residuals.
    l_inv: Matrix6<f64>,
    measured_inv: Pose,
}

/// The factor graph of ping poses.
#[derive(Clone, Debug, Default)]
pub struct PoseGraph {
    nodes: Vec<PoseNode>,
    index: HashMap<u64, usize>,
    factors: Vec<Factor>,
    caches: Vec<FactorCache>,
    incremental_updates: usize,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn nodes(&self) -> &[PoseNode] {
        &self.nodes
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn node(&self, id: u64) -> Option<&PoseNode> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn estimate(&self, id: u64) -> Option<Pose> {
        self.node(id).map(|n| n.estimate)
    }

    pub fn add_node(&mut self, id: u64, estimate: Pose, fixed: bool) -> Result<()> {
        if self.index.contains_key(&id) {
            return Err(Error::InvalidInput(format!("duplicate node id {}", id)));
        }
        if fixed && self.nodes.iter().any(|n| n.fixed) {
            return Err(Error::InvalidInput("graph already has a fixed node".into()));
        }
        self.index.insert(id, self.nodes.len());
        self.nodes.push(PoseNode { id, estimate, fixed });
        Ok(())
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<usize> {
        for id in [factor.from, factor.to] {
            if !self.index.contains_key(&id) {
                return Err(Error::InvalidInput(format!("factor references unknown node {}", id)));
            }
        }
        let chol = nalgebra::Cholesky::new(factor.cov).ok_or_else(|| {
            Error::InvalidInput("factor covariance is not positive definite".into())
        })?;
        let l_inv = chol
            .l()
            .solve_lower_triangular(&Matrix6::identity())
            .ok_or_else(|| Error::InvalidInput("factor covariance is singular".into()))?;
        self.caches.push(FactorCache {
            l_inv,
            measured_inv: factor.measured.inverse(),
        });
        self.factors.push(factor);
        Ok(self.factors.len() - 1)
    }

    /// Append a dead-reckoning chain: one node per entry (the first node of
    /// an empty graph is fixed as the anchor) and one odometry factor per
    /// consecutive pair, covariance proportional to the pose separation.
    pub fn add_odometry_chain(
        &mut self,
        trajectory: &[(u64, Pose)],
        est_cfg: &EstimationConfig,
    ) -> Result<Vec<usize>> {
        let mut last_existing: Option<(u64, Pose)> = self.nodes.last().map(|n| (n.id, n.estimate));
        let mut factor_ids = Vec::new();
        for &(id, pose) in trajectory {
            let fixed = self.nodes.is_empty();
            self.add_node(id, pose, fixed)?;
            if let Some((prev_id, prev_pose)) = last_existing {
                let distance = (pose.position - prev_pose.position).norm();
                factor_ids.push(self.add_factor(Factor {
                    kind: FactorKind::Odometry,
                    from: prev_id,
                    to: id,
                    measured: prev_pose.relative(&pose),
                    cov: odometry_covariance(distance, est_cfg),
                })?);
            }
            last_existing = Some((id, pose));
        }
        Ok(factor_ids)
    }

    /// Insert a loop-closure factor. Constraints that did not converge are
    /// rejected.
    pub fn add_loop_closure(
        &mut self,
        c: &LoopClosureConstraint,
        cov_scale: f64,
    ) -> Result<usize> {
        if !c.converged {
            return Err(Error::InvalidInput(
                "loop-closure constraint did not converge".into(),
            ));
        }
        self.add_factor(Factor {
            kind: FactorKind::LoopClosure,
            from: c.ping_i,
            to: c.ping_j,
            measured: c.relative,
            cov: c.cov * cov_scale,
        })
    }

    fn factor_residual(&self, fi: usize) -> Vector6<f64> {
        let f = &self.factors[fi];
        let minv = &self.caches[fi].measured_inv;
        let residual_pose = match f.kind {
            FactorKind::Prior => {
                let x = self.nodes[self.index[&f.from]].estimate;
                minv.compose(&x)
            }
            _ => {
                let xf = self.nodes[self.index[&f.from]].estimate;
                let xt = self.nodes[self.index[&f.to]].estimate;
                minv.compose(&xf.relative(&xt))
            }
        };
        residual_pose.log().to_vector()
    }

    /// Total cost 0.5 * sum of chi-squares.
    pub fn cost(&self) -> f64 {
        let mut s = 0.0;
        for fi in 0..self.factors.len() {
            let r = self.caches[fi].l_inv * self.factor_residual(fi);
            s += r.norm_squared();
        }
        0.5 * s
    }

    pub fn chi2_per_factor(&self) -> Vec<f64> {
        (0..self.factors.len())
            .map(|fi| {
                let r = self.caches[fi].l_inv * self.factor_residual(fi);
                r.norm_squared()
            })
            .collect()
    }

    /// Batch optimization over every non-fixed node.
    pub fn optimize(&mut self, cfg: &GraphConfig) -> Result<GraphSolution> {
        let active: HashSet<u64> = self.nodes.iter().map(|n| n.id).collect();
        self.solve_subset(&active, cfg)
    }

    /// Incremental update after inserting `new_factors`: warm-started solve
    /// over the nodes within the configured graph-distance horizon of the
    /// new factors' endpoints, with a periodic full batch pass.
    pub fn optimize_incremental(
        &mut self,
        new_factors: &[usize],
        cfg: &GraphConfig,
    ) -> Result<GraphSolution> {
        self.incremental_updates += 1;
        if cfg.full_relin_every > 0 && self.incremental_updates % cfg.full_relin_every == 0 {
            return self.optimize(cfg);
        }
        let mut seeds = Vec::new();
        for &fi in new_factors {
            if let Some(f) = self.factors.get(fi) {
                seeds.push(f.from);
                seeds.push(f.to);
            }
        }
        if seeds.is_empty() {
            return self.optimize(cfg);
        }
        let active = self.nodes_within(&seeds, cfg.incremental_horizon);
        let sub_cfg = GraphConfig {
            max_iterations: cfg.incremental_max_iterations,
            ..cfg.clone()
        };
        self.solve_subset(&active, &sub_cfg)
    }

    /// Breadth-first ball of the factor-adjacency graph.
    fn nodes_within(&self, seeds: &[u64], horizon: usize) -> HashSet<u64> {
        let mut adj: HashMap<u64, Vec<u64>> = HashMap::new();
        for f in &self.factors {
            if f.from != f.to {
                adj.entry(f.from).or_default().push(f.to);
                adj.entry(f.to).or_default().push(f.from);
            }
        }
        let mut dist: HashMap<u64, usize> = HashMap::new();
        let mut queue = VecDeque::new();
        for &s in seeds {
            dist.insert(s, 0);
            queue.push_back(s);
        }
        while let Some(u) = queue.pop_front() {
            let d = dist[&u];
            if d >= horizon {
                continue;
            }
            if let Some(ns) = adj.get(&u) {
                for &v in ns {
                    if !dist.contains_key(&v) {
                        dist.insert(v, d + 1);
                        queue.push_back(v);
                    }
                }
            }
        }
        dist.into_keys().collect()
    }

    fn solve_subset(&mut self, active: &HashSet<u64>, cfg: &GraphConfig) -> Result<GraphSolution> {
        faer::set_global_parallelism(faer::Par::Seq);

        // Variable layout: 6 slots per active, non-fixed node.
        let mut var_of: HashMap<u64, usize> = HashMap::new();
        for n in &self.nodes {
            if !n.fixed && active.contains(&n.id) {
                let next = var_of.len();
                var_of.insert(n.id, next);
            }
        }
        let n_vars = var_of.len() * 6;
        let cost_before = self.cost();
        if n_vars == 0 {
            return Ok(GraphSolution {
                cost_before,
                cost_after: cost_before,
                iterations: 0,
                converged: true,
                chi2: self.chi2_per_factor(),
            });
        }
        if !self.nodes.iter().any(|n| n.fixed) {
            return Err(Error::Solver(
                "graph has no fixed node; the gauge is unconstrained".into(),
            ));
        }

        // Factors that touch at least one variable.
        let touched: Vec<usize> = (0..self.factors.len())
            .filter(|&i| {
                let f = &self.factors[i];
                var_of.contains_key(&f.from) || var_of.contains_key(&f.to)
            })
            .collect();

        // Whitening transforms were cached at insertion.
        let whiteners: Vec<Matrix6<f64>> = touched.iter().map(|&i| self.caches[i].l_inv).collect();

        let mut cost = cost_before;
        let mut lambda = cfg.lambda_init;
        let mut iterations = 0;
        let mut converged = false;

        while iterations < cfg.max_iterations {
            iterations += 1;

            // Build whitened residuals and Jacobians, accumulate the normal
            // equations in triplet form.
            let mut triplets: Vec<faer::sparse::Triplet<usize, usize, f64>> = Vec::new();
            let mut b = vec![0.0f64; n_vars];
            let mut grad_inf = 0.0f64;

            let blocks: Vec<(usize, Vector6<f64>, Option<Matrix6<f64>>, Option<Matrix6<f64>>)> =
                touched
                    .iter()
                    .zip(&whiteners)
                    .map(|(&fi, l_inv)| {
                        let f = &self.factors[fi];
                        let mut r = *l_inv * self.factor_residual(fi);
                        let mut j_from = None;
                        let mut j_to = None;
                        let h = 1e-7;
                        if f.kind != FactorKind::Prior {
                            if var_of.contains_key(&f.from) {
                                let mut m = Matrix6::zeros();
                                let base = self.nodes[self.index[&f.from]].estimate;
                                for c in 0..6 {
                                    let mut d = Vector6::zeros();
                                    d[c] = h;
                                    let rp = self.residual_with(fi, Some(base.retract(&d)), None);
                                    let rm = self.residual_with(fi, Some(base.retract(&(-d))), None);
                                    for k in 0..6 {
                                        m[(k, c)] = (rp[k] - rm[k]) / (2.0 * h);
                                    }
                                }
                                j_from = Some(*l_inv * m);
                            }
                            if var_of.contains_key(&f.to) {
                                let mut m = Matrix6::zeros();
                                let base = self.nodes[self.index[&f.to]].estimate;
                                for c in 0..6 {
                                    let mut d = Vector6::zeros();
                                    d[c] = h;
                                    let rp = self.residual_with(fi, None, Some(base.retract(&d)));
                                    let rm = self.residual_with(fi, None, Some(base.retract(&(-d))));
                                    for k in 0..6 {
                                        m[(k, c)] = (rp[k] - rm[k]) / (2.0 * h);
                                    }
                                }
                                j_to = Some(*l_inv * m);
                            }
                        } else if var_of.contains_key(&f.from) {
                            let mut m = Matrix6::zeros();
                            let base = self.nodes[self.index[&f.from]].estimate;
                            for c in 0..6 {
                                let mut d = Vector6::zeros();
                                d[c] = h;
                                let rp = self.residual_with(fi, Some(base.retract(&d)), None);
                                let rm = self.residual_with(fi, Some(base.retract(&(-d))), None);
                                for k in 0..6 {
                                    m[(k, c)] = (rp[k] - rm[k]) / (2.0 * h);
                                }
                            }
                            j_from = Some(*l_inv * m);
                        }
                        // Optional Huber weight on loop closures.
                        if let (Some(k), FactorKind::LoopClosure) = (cfg.huber_threshold, f.kind) {
                            let nrm = r.norm();
                            if nrm > k {
                                let w = (k / nrm).sqrt();
                                r *= w;
                                if let Some(m) = j_from.as_mut() {
                                    *m *= w;
                                }
                                if let Some(m) = j_to.as_mut() {
                                    *m *= w;
                                }
                            }
                        }
                        (fi, r, j_from, j_to)
                    })
                    .collect();

            for (fi, r, j_from, j_to) in &blocks {
                let f = &self.factors[*fi];
                let mut push_block = |ja: &Matrix6<f64>, ia: usize, jb: &Matrix6<f64>, ib: usize| {
                    let block = ja.transpose() * jb;
                    for i in 0..6 {
                        for j in 0..6 {
                            let v = block[(i, j)];
                            if v != 0.0 {
                                triplets.push(faer::sparse::Triplet::new(
                                    ia * 6 + i,
                                    ib * 6 + j,
                                    v,
                                ));
                            }
                        }
                    }
                };
                let vf = var_of.get(&f.from).copied();
                let vt = var_of.get(&f.to).copied();
                if let (Some(jf), Some(ia)) = (j_from, vf) {
                    push_block(jf, ia, jf, ia);
                    let g = jf.transpose() * r;
                    for k in 0..6 {
                        b[ia * 6 + k] += g[k];
                    }
                }
                if let (Some(jt), Some(ib)) = (j_to, vt) {
                    push_block(jt, ib, jt, ib);
                    let g = jt.transpose() * r;
                    for k in 0..6 {
                        b[ib * 6 + k] += g[k];
                    }
                }
                if let (Some(jf), Some(ia), Some(jt), Some(ib)) = (j_from, vf, j_to, vt) {
                    push_block(jf, ia, jt, ib);
                    push_block(jt, ib, jf, ia);
                }
            }
            for v in &b {
                grad_inf = grad_inf.max(v.abs());
            }
            if grad_inf < 1e-9 {
                converged = true;
                break;
            }

            // Diagonal of H for Marquardt scaling.
            let mut diag = vec![0.0f64; n_vars];
            for t in &triplets {
                if t.row == t.col {
                    diag[t.row] += t.val;
                }
            }

            let mut accepted = false;
            while lambda < 1e14 {
                let mut damped = triplets.clone();
                for (k, d) in diag.iter().enumerate() {
                    damped.push(faer::sparse::Triplet::new(k, k, lambda * d.max(1e-12)));
                }
                let h_mat = faer::sparse::SparseColMat::try_new_from_triplets(
                    n_vars, n_vars, &damped,
                )
                .map_err(|e| Error::Solver(format!("assembling normal equations: {:?}", e)))?;
                let delta = match h_mat.sp_cholesky(faer::Side::Lower) {
                    Ok(llt) => {
                        use faer::prelude::*;
                        let rhs = faer::Mat::from_fn(n_vars, 1, |i, _| -b[i]);
                        let x = llt.solve(&rhs);
                        (0..n_vars).map(|i| x[(i, 0)]).collect::<Vec<f64>>()
                    }
                    Err(_) => {
                        lambda *= 10.0;
                        continue;
                    }
                };

                // Trial update on a copy of the active estimates.
                let saved: Vec<(usize, Pose)> = var_of
                    .iter()
                    .map(|(id, &v)| (self.index[id], v))
                    .map(|(ni, v)| {
                        let pose = self.nodes[ni].estimate;
                        let d = Vector6::from_column_slice(&delta[v * 6..v * 6 + 6]);
                        (ni, pose.retract(&d))
                    })
                    .collect();
                let old: Vec<(usize, Pose)> = saved
                    .iter()
                    .map(|&(ni, _)| (ni, self.nodes[ni].estimate))
                    .collect();
                for &(ni, p) in &saved {
                    self.nodes[ni].estimate = p;
                }
                let trial_cost = self.cost();
                if trial_cost <= cost {
                    let rel = (cost - trial_cost) / cost.max(1e-300);
                    cost = trial_cost;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    let max_step = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    if rel < cfg.cost_rel_tol || max_step < 1e-12 {
                        converged = true;
                    }
                    break;
                } else {
                    for &(ni, p) in &old {
                        self.nodes[ni].estimate = p;
                    }
                    lambda *= 10.0;
                }
            }
            if !accepted {
                // Cost-increase lock: keep the best iterate found so far.
                break;
            }
            if converged {
                break;
            }
        }

        Ok(GraphSolution {
            cost_before,
            cost_after: cost,
            iterations,
            converged,
            chi2: self.chi2_per_factor(),
        })
    }

    /// Residual of a factor with one endpoint pose overridden.
    fn residual_with(&self, fi: usize, from: Option<Pose>, to: Option<Pose>) -> Vector6<f64> {
        let f = &self.factors[fi];
        let minv = &self.caches[fi].measured_inv;
        let xf = from.unwrap_or_else(|| self.nodes[self.index[&f.from]].estimate);
        let residual_pose = match f.kind {
            FactorKind::Prior => minv.compose(&xf),
            _ => {
                let xt = to.unwrap_or_else(|| self.nodes[self.index[&f.to]].estimate);
                minv.compose(&xf.relative(&xt))
            }
        };
        residual_pose.log().to_vector()
    }

    /// Apply a rigid transform to every node estimate (used by the
    /// equivariance tests and for re-anchoring).
    pub fn transform_all(&mut self, g: &Pose) {
        for n in &mut self.nodes {
            n.estimate = g.compose(&n.estimate);
        }
    }

    /// Dense normal-equations matrix of the full graph at the current
    /// estimates (test/diagnostic helper; no damping, fixed node excluded).
    pub fn dense_hessian(&self) -> nalgebra::DMatrix<f64> {
        let mut var_of: HashMap<u64, usize> = HashMap::new();
        for n in &self.nodes {
            if !n.fixed {
                let next = var_of.len();
                var_of.insert(n.id, next);
            }
        }
        let n_vars = var_of.len() * 6;
        let mut h_dense = nalgebra::DMatrix::zeros(n_vars, n_vars);
        let step = 1e-7;
        for fi in 0..self.factors.len() {
            let f = &self.factors[fi];
            let l_inv = self.caches[fi].l_inv;
            let mut jac: Vec<(usize, Matrix6<f64>)> = Vec::new();
            for (id, is_from) in [(f.from, true), (f.to, false)] {
                if f.kind == FactorKind::Prior && !is_from {
                    continue;
                }
                if let Some(&v) = var_of.get(&id) {
                    let base = self.nodes[self.index[&id]].estimate;
                    let mut m = Matrix6::zeros();
                    for c in 0..6 {
                        let mut d = Vector6::zeros();
                        d[c] = step;
                        let (p, mm) = if is_from {
                            (
                                self.residual_with(fi, Some(base.retract(&d)), None),
                                self.residual_with(fi, Some(base.retract(&(-d))), None),
                            )
                        } else {
                            (
                                self.residual_with(fi, None, Some(base.retract(&d))),
                                self.residual_with(fi, None, Some(base.retract(&(-d)))),
                            )
                        };
                        for k in 0..6 {
                            m[(k, c)] = (p[k] - mm[k]) / (2.0 * step);
                        }
                    }
                    jac.push((v, l_inv * m));
                }
            }
            for (va, ja) in &jac {
                for (vb, jb) in &jac {
                    let block = ja.transpose() * jb;
                    for i in 0..6 {
                        for j in 0..6 {
                            h_dense[(va * 6 + i, vb * 6 + j)] += block[(i, j)];
                        }
                    }
                }
            }
        }
        h_dense
    }
}

/// Shorthand used by tests: twist from rotation and translation parts.
pub fn twist(rot: [f64; 3], trans: [f64; 3]) -> Twist {
    Twist::new(
        nalgebra::Vector3::new(rot[0], rot[1], rot[2]),
        nalgebra::Vector3::new(trans[0], trans[1], trans[2]),
    )
}
