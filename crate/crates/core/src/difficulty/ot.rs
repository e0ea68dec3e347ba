//! Discrete optimal transport between small weighted point sets.
//!
//! Two solvers over the same cost matrix:
//!
//! - [`sinkhorn`]: entropic-regularized transport via log-domain scaling
//!   iterations. Stable for regularizers far below the cost scale because
//!   the potentials never leave log space.
//! - [`exact_uniform_plan`]: the unregularized linear program for uniform
//!   marginals, solved exactly as a min-cost flow on the integer-scaled
//!   transportation network (successive shortest paths). Patch sets are
//!   small, so this is both fast and free of LP tolerance knobs.

use thiserror::Error;

use crate::numeric::logsumexp;

#[derive(Debug, Error, PartialEq)]
pub enum OtError {
    #[error("patch set is empty")]
    EmptyPatchSet,
    #[error("feature dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("sinkhorn did not converge in {iterations} iterations (marginal residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("{0}")]
    Domain(String),
}

/// Dense row-major cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, OtError> {
        if rows == 0 || cols == 0 {
            return Err(OtError::EmptyPatchSet);
        }
        if values.len() != rows * cols {
            return Err(OtError::Domain(format!(
                "cost matrix has {} entries, expected {rows}x{cols}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(OtError::Domain(format!("cost entries must be finite and non-negative, got {bad}")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// A coupling with the same shape as its cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    mass: Vec<f64>,
}

impl TransportPlan {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.mass[i * self.cols + j]
    }

    pub fn row_marginals(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.mass[i * self.cols..(i + 1) * self.cols].iter().sum())
            .collect()
    }

    pub fn col_marginals(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.at(i, j)).sum())
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// ⟨T, C⟩.
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        self.mass
            .iter()
            .zip(&cost.values)
            .map(|(t, c)| t * c)
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornOutcome {
    pub plan: TransportPlan,
    pub transport_cost: f64,
    pub iterations: usize,
    /// max |row/col marginal - target| at the final iterate.
    pub marginal_residual: f64,
}

fn check_marginals(m: usize, weights: &[f64], side: &str) -> Result<(), OtError> {
    if weights.len() != m {
        return Err(OtError::Domain(format!(
            "{side} marginal has {} entries, expected {m}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(OtError::Domain(format!("{side} marginal entries must be positive")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(OtError::Domain(format!("{side} marginal sums to {total}, expected 1")));
    }
    Ok(())
}

struct LogScaling<'a> {
    cost: &'a CostMatrix,
    ln_a: Vec<f64>,
    ln_b: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    scratch: Vec<f64>,
}

impl LogScaling<'_> {
    /// One scaling sweep at the given regularizer: the g-update makes the
    /// column marginals exact given f, the f-update then makes the rows
    /// exact given g.
    fn sweep(&mut self, epsilon: f64) {
        let (m, n) = (self.cost.rows, self.cost.cols);
        for j in 0..n {
            for (i, slot) in self.scratch[..m].iter_mut().enumerate() {
                *slot = (self.f[i] - self.cost.at(i, j)) / epsilon;
            }
            self.g[j] = epsilon * (self.ln_b[j] - logsumexp(&self.scratch[..m]));
        }
        for i in 0..m {
            for (j, slot) in self.scratch[..n].iter_mut().enumerate() {
                *slot = (self.g[j] - self.cost.at(i, j)) / epsilon;
            }
            self.f[i] = epsilon * (self.ln_a[i] - logsumexp(&self.scratch[..n]));
        }
    }

    fn entry(&self, i: usize, j: usize, epsilon: f64) -> f64 {
        ((self.f[i] + self.g[j] - self.cost.at(i, j)) / epsilon).exp()
    }

    /// Max column deviation from b under the fresh f (rows are exact).
    fn column_residual(&self, b: &[f64], epsilon: f64) -> f64 {
        let m = self.cost.rows;
        let mut worst = 0.0f64;
        for (j, target) in b.iter().enumerate() {
            let mut col = 0.0;
            for i in 0..m {
                col += self.entry(i, j, epsilon);
            }
            worst = worst.max((col - target).abs());
        }
        worst
    }
}

/// Project a near-feasible plan onto the marginal polytope: scale rows and
/// columns down to their targets, then distribute the remaining deficit as a
/// rank-one correction. Alters the cost by at most the pre-projection
/// residual times the largest cost entry.
fn round_to_marginals(mass: &mut [f64], m: usize, n: usize, a: &[f64], b: &[f64]) {
    for i in 0..m {
        let sum: f64 = mass[i * n..(i + 1) * n].iter().sum();
        if sum > a[i] {
            let scale = a[i] / sum;
            for v in mass[i * n..(i + 1) * n].iter_mut() {
                *v *= scale;
            }
        }
    }
    for j in 0..n {
        let sum: f64 = (0..m).map(|i| mass[i * n + j]).sum();
        if sum > b[j] {
            let scale = b[j] / sum;
            for i in 0..m {
                mass[i * n + j] *= scale;
            }
        }
    }
    let deficit_a: Vec<f64> = (0..m)
        .map(|i| (a[i] - mass[i * n..(i + 1) * n].iter().sum::<f64>()).max(0.0))
        .collect();
    let deficit_b: Vec<f64> = (0..n)
        .map(|j| (b[j] - (0..m).map(|i| mass[i * n + j]).sum::<f64>()).max(0.0))
        .collect();
    let total: f64 = deficit_a.iter().sum();
    if total > 0.0 {
        for i in 0..m {
            for j in 0..n {
                mass[i * n + j] += deficit_a[i] * deficit_b[j] / total;
            }
        }
    }
}

/// Entropic-regularized transport: minimizes ⟨T, C⟩ + ε Σ T(ln T − 1) subject
/// to the given marginals.
///
/// Log-domain scaling sweeps with ε-annealing: the regularizer starts at the
/// mean cost and halves down to the target, each level warm-starting the
/// next. Without annealing the marginal residual decays only harmonically
/// once plan entries underflow, which makes tight tolerances unreachable at
/// regularizers far below the cost scale. Convergence requires the residual
/// at the target ε to drop below `tolerance` within `max_iterations` total
/// sweeps; the returned plan is additionally projected onto the marginal
/// polytope, so its stored residual is at rounding level.
pub fn sinkhorn(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    max_iterations: usize,
    tolerance: f64,
) -> Result<SinkhornOutcome, OtError> {
    check_marginals(cost.rows, a, "row")?;
    check_marginals(cost.cols, b, "col")?;
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(OtError::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let (m, n) = (cost.rows, cost.cols);
    let mut state = LogScaling {
        cost,
        ln_a: a.iter().map(|w| w.ln()).collect(),
        ln_b: b.iter().map(|w| w.ln()).collect(),
        f: vec![0.0; m],
        g: vec![0.0; n],
        scratch: vec![0.0; m.max(n)],
    };

    // Warm-up levels run a flat sweep budget each; only the target level
    // iterates against the tolerance.
    const LEVEL_SWEEPS: usize = 200;
    let mut remaining = max_iterations;
    let mut used = 0usize;
    let mut eps_level = cost.mean().max(epsilon);
    while eps_level > epsilon {
        for _ in 0..LEVEL_SWEEPS.min(remaining) {
            state.sweep(eps_level);
            used += 1;
            remaining -= 1;
        }
        if remaining == 0 {
            return Err(OtError::NotConverged {
                iterations: max_iterations,
                residual: state.column_residual(b, epsilon),
            });
        }
        eps_level = (eps_level * 0.5).max(epsilon);
    }
    let mut converged = false;
    while remaining > 0 {
        state.sweep(epsilon);
        used += 1;
        remaining -= 1;
        if state.column_residual(b, epsilon) <= tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(OtError::NotConverged {
            iterations: max_iterations,
            residual: state.column_residual(b, epsilon),
        });
    }

    let mut mass = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            mass[i * n + j] = state.entry(i, j, epsilon);
        }
    }
    round_to_marginals(&mut mass, m, n, a, b);
    let plan = TransportPlan { rows: m, cols: n, mass };
    let mut marginal_residual = 0.0f64;
    for (row_sum, target) in plan.row_marginals().iter().zip(a) {
        marginal_residual = marginal_residual.max((row_sum - target).abs());
    }
    for (col_sum, target) in plan.col_marginals().iter().zip(b) {
        marginal_residual = marginal_residual.max((col_sum - target).abs());
    }
    let transport_cost = plan.transport_cost(cost);
    Ok(SinkhornOutcome { plan, transport_cost, iterations: used, marginal_residual })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

struct FlowEdge {
    to: usize,
    capacity: i64,
    cost: f64,
    flow: i64,
}

struct FlowNetwork {
    edges: Vec<FlowEdge>,
    adjacency: Vec<Vec<usize>>,
}

impl FlowNetwork {
    fn new(nodes: usize) -> Self {
        Self { edges: Vec::new(), adjacency: vec![Vec::new(); nodes] }
    }

    fn add_edge(&mut self, from: usize, to: usize, capacity: i64, cost: f64) -> usize {
        let idx = self.edges.len();
        self.edges.push(FlowEdge { to, capacity, cost, flow: 0 });
        self.edges.push(FlowEdge { to: from, capacity: 0, cost: -cost, flow: 0 });
        self.adjacency[from].push(idx);
        self.adjacency[to].push(idx + 1);
        idx
    }

    fn residual(&self, edge: usize) -> i64 {
        self.edges[edge].capacity - self.edges[edge].flow
    }

    /// Bellman-Ford shortest path in the residual graph (handles the negative
    /// reverse-edge costs exactly). Returns per-node predecessor edges.
    fn shortest_path(&self, source: usize, target: usize) -> Option<Vec<usize>> {
        let n = self.adjacency.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut pred_edge = vec![usize::MAX; n];
        dist[source] = 0.0;
        for _ in 0..n {
            let mut changed = false;
            for (from, edges) in self.adjacency.iter().enumerate() {
                if !dist[from].is_finite() {
                    continue;
                }
                for &e in edges {
                    if self.residual(e) <= 0 {
                        continue;
                    }
                    let cand = dist[from] + self.edges[e].cost;
                    if cand < dist[self.edges[e].to] {
                        dist[self.edges[e].to] = cand;
                        pred_edge[self.edges[e].to] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if !dist[target].is_finite() {
            return None;
        }
        let mut path = Vec::new();
        let mut node = target;
        while node != source {
            let e = pred_edge[node];
            path.push(e);
            node = self.other_end(e);
        }
        path.reverse();
        Some(path)
    }

    fn other_end(&self, edge: usize) -> usize {
        // Paired storage: edge ^ 1 is the reverse edge, whose `to` is the tail.
        self.edges[edge ^ 1].to
    }

    fn augment(&mut self, path: &[usize]) -> i64 {
        let bottleneck = path.iter().map(|&e| self.residual(e)).min().unwrap();
        for &e in path {
            self.edges[e].flow += bottleneck;
            self.edges[e ^ 1].flow -= bottleneck;
        }
        bottleneck
    }
}

/// Exact optimal transport for uniform marginals (1/m per source patch,
/// 1/n per sink patch): the transportation LP solved by successive shortest
/// paths on the lcm(m, n)-scaled integer network.
pub fn exact_uniform_plan(cost: &CostMatrix) -> Result<(TransportPlan, f64), OtError> {
    let (m, n) = (cost.rows, cost.cols);
    let scale = ((m as u64) / gcd(m as u64, n as u64)) * (n as u64);
    let scale_i = scale as i64;
    let source = m + n;
    let target = m + n + 1;
    let mut net = FlowNetwork::new(m + n + 2);
    let mut pair_edges = vec![0usize; m * n];
    for i in 0..m {
        net.add_edge(source, i, scale_i / m as i64, 0.0);
    }
    for i in 0..m {
        for j in 0..n {
            pair_edges[i * n + j] = net.add_edge(i, m + j, scale_i, cost.at(i, j));
        }
    }
    for j in 0..n {
        net.add_edge(m + j, target, scale_i / n as i64, 0.0);
    }
    let mut sent = 0i64;
    while sent < scale_i {
        let path = net
            .shortest_path(source, target)
            .ok_or_else(|| OtError::Domain("transportation network is infeasible".into()))?;
        sent += net.augment(&path);
    }
    let mut mass = vec![0.0f64; m * n];
    for (cell, &e) in mass.iter_mut().zip(&pair_edges) {
        *cell = net.edges[e].flow as f64 / scale as f64;
    }
    let plan = TransportPlan { rows: m, cols: n, mass };
    let value = plan.transport_cost(cost);
    Ok((plan, value))
}
