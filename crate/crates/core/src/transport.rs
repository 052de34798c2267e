//! Wasserstein distances between equal-weight empirical measures on
//! phase space `R^6` (positions and momenta weighted equally).
//!
//! With uniform weights `1/n` on both sides `W_1` is an assignment problem,
//! solved exactly by a primal network simplex on the complete bipartite
//! graph. The index coupling of a coupled run gives the cheap upper bounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::ParticleEnsemble;
use crate::stats::median;

pub type Point6 = [f64; 6];

/// Largest `n` accepted by the exact solver.
pub const W1_MAX_POINTS: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("measures have {0} and {1} atoms")]
    SizeMismatch(usize, usize),
    #[error("{n} atoms exceeds the exact-solver limit of {max}")]
    TooLarge { n: usize, max: usize },
    #[error("empirical measure needs at least one atom")]
    Empty,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

/// Uniform atomic measure `(1/n) sum_i delta_{x_i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    points: Vec<Point6>,
}

impl EmpiricalMeasure {
    pub fn new(points: Vec<Point6>) -> Result<Self, TransportError> {
        if points.is_empty() {
            return Err(TransportError::Empty);
        }
        Ok(Self { points })
    }

    pub fn from_ensemble(e: &ParticleEnsemble) -> Result<Self, TransportError> {
        Self::new(e.positions.iter().zip(&e.momenta).map(|(q, p)| [q[0], q[1], q[2], p[0], p[1], p[2]]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point6] {
        &self.points
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.points.len() as f64
    }
}

pub fn dist6(a: &Point6, b: &Point6) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Optimal assignment `i -> perm[i]` and its mean cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    /// `max_i |x_i - y_perm(i)|`.
    pub fn max_displacement(&self, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
        self.perm.iter().enumerate().map(|(i, &j)| dist6(&mu.points[i], &nu.points[j])).fold(0.0, f64::max)
    }
}

fn check_sizes(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<usize, TransportError> {
    if mu.len() != nu.len() {
        return Err(TransportError::SizeMismatch(mu.len(), nu.len()));
    }
    Ok(mu.len())
}

/// Exact optimal assignment under the Euclidean ground metric.
pub fn optimal_assignment(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<Assignment, TransportError> {
    let n = check_sizes(mu, nu)?;
    if n > W1_MAX_POINTS {
        return Err(TransportError::TooLarge { n, max: W1_MAX_POINTS });
    }
    let mut cost = Vec::with_capacity(n * n);
    for x in &mu.points {
        for y in &nu.points {
            cost.push(dist6(x, y));
        }
    }
    let perm = NetworkSimplex::assignment(n, cost).solve();
    // summed in index order so equal assignments give equal costs
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| dist6(&mu.points[i], &nu.points[j])).sum();
    Ok(Assignment { perm, cost: total / n as f64 })
}

/// `true` when `a` sorts before `b` bitwise, giving a fixed orientation for
/// each unordered pair of measures.
fn canonical_order(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> bool {
    for (x, y) in a.points.iter().zip(&b.points) {
        for c in 0..6 {
            let (u, v) = (x[c].to_bits(), y[c].to_bits());
            if u != v {
                return u < v;
            }
        }
    }
    true
}

/// `W_1(mu, nu)`. Symmetric bit for bit: both argument orders solve the
/// same oriented problem.
pub fn w1_exact(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64, TransportError> {
    check_sizes(mu, nu)?;
    if canonical_order(mu, nu) {
        Ok(optimal_assignment(mu, nu)?.cost)
    } else {
        Ok(optimal_assignment(nu, mu)?.cost)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingBounds {
    /// `(1/n) sum_i |x_i - y_i|`.
    pub w1_upper: f64,
    /// `max_i |x_i - y_i|`.
    pub winf_upper: f64,
}

/// Bounds on `W_1` and `W_inf` from the index coupling `x_i <-> y_i`.
pub fn coupling_bounds(psi: &EmpiricalMeasure, phi: &EmpiricalMeasure) -> Result<CouplingBounds, TransportError> {
    let n = check_sizes(psi, phi)?;
    let (mut sum, mut max) = (0.0, 0.0f64);
    for (x, y) in psi.points.iter().zip(&phi.points) {
        let d = dist6(x, y);
        sum += d;
        max = max.max(d);
    }
    Ok(CouplingBounds { w1_upper: sum / n as f64, winf_upper: max })
}

/// `W_1` between a state and a fresh mean-field sample of the same size,
/// a proxy for the distance to the limit law. The proxy itself carries an
/// empirical sampling error of order `n^(-1/6)` in six dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyDistance {
    pub w1_proxy: f64,
    pub n: usize,
    pub proxy_sampling_rate: f64,
}

pub fn w1_vs_meanfield(psi: &EmpiricalMeasure, proxy: &EmpiricalMeasure) -> Result<ProxyDistance, TransportError> {
    let w1_proxy = w1_exact(psi, proxy)?;
    let n = psi.len();
    Ok(ProxyDistance { w1_proxy, n, proxy_sampling_rate: (n as f64).powf(-1.0 / 6.0) })
}

/// Bounded Lipschitz one-particle observable on `(q, p)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    /// `tanh(q_x)`.
    TanhQx,
    /// `cos(p_y)`.
    CosPy,
    /// `exp(-|q|^2 / 4)`.
    GaussQ,
}

impl Observable {
    pub const ALL: [Observable; 3] = [Observable::TanhQx, Observable::CosPy, Observable::GaussQ];

    pub fn eval(self, x: &Point6) -> f64 {
        match self {
            Observable::TanhQx => x[0].tanh(),
            Observable::CosPy => x[4].cos(),
            Observable::GaussQ => (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / 4.0).exp(),
        }
    }
}

/// Unordered pairs of distinct or equal observables.
pub fn observable_pairs() -> Vec<(Observable, Observable)> {
    let a = Observable::ALL;
    let mut out = Vec::new();
    for i in 0..a.len() {
        for j in i..a.len() {
            out.push((a[i], a[j]));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub h1: Observable,
    pub h2: Observable,
    /// `E[h1(x_1) h2(x_2)] - E[h1(x_1)] E[h2(x_2)]`.
    pub correlation: f64,
    /// Jackknife standard error over replicas.
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaosRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub replicas: usize,
    pub pairs: Vec<PairCorrelation>,
    /// Median of `|correlation|` over the observable pairs.
    pub median_abs_correlation: f64,
}

pub const MIN_CHAOS_REPLICAS: usize = 20;

/// Per-replica sums of the observables, enough to rebuild every pair
/// correlation without keeping the particles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableMoments {
    pub n: usize,
    /// `sum_i h_a(x_i)` in the order of [`Observable::ALL`].
    pub sums: Vec<f64>,
    /// `sum_i h_a(x_i) h_b(x_i)` in the order of [`observable_pairs`].
    pub cross: Vec<f64>,
}

impl ObservableMoments {
    pub fn of(m: &EmpiricalMeasure) -> Self {
        let obs = Observable::ALL;
        let pairs = observable_pairs();
        let mut sums = vec![0.0; obs.len()];
        let mut cross = vec![0.0; pairs.len()];
        let mut vals = vec![0.0; obs.len()];
        for x in &m.points {
            for (k, h) in obs.iter().enumerate() {
                vals[k] = h.eval(x);
                sums[k] += vals[k];
            }
            for (k, (a, b)) in pairs.iter().enumerate() {
                cross[k] += vals[*a as usize] * vals[*b as usize];
            }
        }
        Self { n: m.len(), sums, cross }
    }
}

/// Two-particle correlation of pair `k` of [`observable_pairs`] over
/// replicas of one `N`.
///
/// Per replica the pair term is the U-statistic over ordered pairs
/// `i != j`; the product of marginals uses cross-replica products, which
/// is unbiased because replicas are independent.
pub fn pair_correlation(replicas: &[ObservableMoments], k: usize) -> PairCorrelation {
    let (h1, h2) = observable_pairs()[k];
    let r = replicas.len();
    let mut u = Vec::with_capacity(r);
    let mut a = Vec::with_capacity(r);
    let mut b = Vec::with_capacity(r);
    for m in replicas {
        let n = m.n as f64;
        let (s1, s2) = (m.sums[h1 as usize], m.sums[h2 as usize]);
        u.push((s1 * s2 - m.cross[k]) / (n * (n - 1.0)));
        a.push(s1 / n);
        b.push(s2 / n);
    }
    let estimate = |skip: Option<usize>| {
        let keep = |i: &usize| Some(*i) != skip;
        let k = (0..r).filter(keep).count() as f64;
        let mean_u = (0..r).filter(keep).map(|i| u[i]).sum::<f64>() / k;
        let sa: f64 = (0..r).filter(keep).map(|i| a[i]).sum();
        let sb: f64 = (0..r).filter(keep).map(|i| b[i]).sum();
        let sab: f64 = (0..r).filter(keep).map(|i| a[i] * b[i]).sum();
        mean_u - (sa * sb - sab) / (k * (k - 1.0))
    };
    let correlation = estimate(None);
    let jack: Vec<f64> = (0..r).map(|i| estimate(Some(i))).collect();
    let jm = jack.iter().sum::<f64>() / r as f64;
    let var = (r as f64 - 1.0) / r as f64 * jack.iter().map(|j| (j - jm).powi(2)).sum::<f64>();
    PairCorrelation { h1, h2, correlation, std_error: var.sqrt() }
}

/// Correlation table over `N`; `groups` holds the replica moments of each
/// `N`.
pub fn chaos_decay(groups: &[(usize, Vec<ObservableMoments>)]) -> Result<Vec<ChaosRow>, TransportError> {
    let mut rows = Vec::with_capacity(groups.len());
    for (n, reps) in groups {
        if reps.len() < MIN_CHAOS_REPLICAS {
            return Err(TransportError::InsufficientData(format!(
                "{} replicas at N = {n}, need {MIN_CHAOS_REPLICAS}",
                reps.len()
            )));
        }
        if reps.iter().any(|m| m.n < 2) {
            return Err(TransportError::InsufficientData(format!("replica with fewer than 2 particles at N = {n}")));
        }
        let pairs: Vec<PairCorrelation> = (0..observable_pairs().len()).map(|k| pair_correlation(reps, k)).collect();
        let abs: Vec<f64> = pairs.iter().map(|p| p.correlation.abs()).collect();
        rows.push(ChaosRow { n: *n, replicas: reps.len(), median_abs_correlation: median(&abs), pairs });
    }
    rows.sort_by_key(|r| r.n);
    Ok(rows)
}

const STATE_UPPER: i8 = -1;
const STATE_TREE: i8 = 0;
const STATE_LOWER: i8 = 1;
const DIR_UP: i8 = 1;
const DIR_DOWN: i8 = -1;
const INF: i64 = i64::MAX;

/// Primal network simplex for uncapacitated min-cost flow with a strongly
/// feasible spanning tree (artificial root, block-search pricing). Flows are
/// integral, costs real. Node arrays follow the parent/thread
/// representation of the tree.
struct NetworkSimplex {
    node_num: usize,
    arc_num: usize,
    source: Vec<usize>,
    target: Vec<usize>,
    cost: Vec<f64>,
    flow: Vec<i64>,
    state: Vec<i8>,
    pi: Vec<f64>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    thread: Vec<usize>,
    rev_thread: Vec<usize>,
    succ_num: Vec<usize>,
    last_succ: Vec<usize>,
    pred_dir: Vec<i8>,
    dirty_revs: Vec<usize>,
    in_arc: usize,
    join: usize,
    u_in: usize,
    v_in: usize,
    u_out: usize,
    delta: i64,
    next_arc: usize,
    block_size: usize,
    eps: f64,
}

const NONE: usize = usize::MAX;

impl NetworkSimplex {
    /// Sources `0..n` with supply 1, sinks `n..2n` with demand 1, arc
    /// `i * n + j` from `i` to `n + j` with cost `cost[i * n + j]`.
    fn assignment(n: usize, cost: Vec<f64>) -> Self {
        let node_num = 2 * n;
        let arc_num = n * n;
        let all = arc_num + node_num;
        let root = node_num;
        let mut source = Vec::with_capacity(all);
        let mut target = Vec::with_capacity(all);
        for i in 0..n {
            for j in 0..n {
                source.push(i);
                target.push(n + j);
            }
        }
        let max_cost = cost.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let art_cost = (max_cost + 1.0) * node_num as f64;
        let mut costs = cost;
        costs.resize(all, 0.0);
        source.resize(all, 0);
        target.resize(all, 0);
        let mut s = Self {
            node_num,
            arc_num,
            source,
            target,
            cost: costs,
            flow: vec![0; all],
            state: vec![STATE_LOWER; all],
            pi: vec![0.0; node_num + 1],
            parent: vec![NONE; node_num + 1],
            pred: vec![NONE; node_num + 1],
            thread: vec![0; node_num + 1],
            rev_thread: vec![0; node_num + 1],
            succ_num: vec![0; node_num + 1],
            last_succ: vec![0; node_num + 1],
            pred_dir: vec![0; node_num + 1],
            dirty_revs: Vec::new(),
            in_arc: 0,
            join: 0,
            u_in: 0,
            v_in: 0,
            u_out: 0,
            delta: 0,
            next_arc: 0,
            block_size: ((arc_num as f64).sqrt() as usize).max(10),
            eps: 1e-12 * (max_cost + 1.0),
        };
        s.thread[root] = 0;
        s.rev_thread[0] = root;
        s.succ_num[root] = node_num + 1;
        s.last_succ[root] = root - 1;
        for u in 0..node_num {
            let e = arc_num + u;
            let supply: i64 = if u < n { 1 } else { -1 };
            s.parent[u] = root;
            s.pred[u] = e;
            s.thread[u] = u + 1;
            s.rev_thread[u + 1] = u;
            s.succ_num[u] = 1;
            s.last_succ[u] = u;
            s.state[e] = STATE_TREE;
            if supply >= 0 {
                s.pred_dir[u] = DIR_UP;
                s.pi[u] = 0.0;
                s.source[e] = u;
                s.target[e] = root;
                s.flow[e] = supply;
                s.cost[e] = 0.0;
            } else {
                s.pred_dir[u] = DIR_DOWN;
                s.pi[u] = art_cost;
                s.source[e] = root;
                s.target[e] = u;
                s.flow[e] = -supply;
                s.cost[e] = art_cost;
            }
        }
        s
    }

    #[inline]
    fn reduced(&self, e: usize) -> f64 {
        self.state[e] as f64 * (self.cost[e] + self.pi[self.source[e]] - self.pi[self.target[e]])
    }

    fn find_entering_arc(&mut self) -> bool {
        let mut min = -self.eps;
        let mut found = NONE;
        let mut cnt = self.block_size;
        let m = self.arc_num;
        let mut e = self.next_arc;
        for _ in 0..m {
            let c = self.reduced(e);
            if c < min {
                min = c;
                found = e;
            }
            e += 1;
            if e == m {
                e = 0;
            }
            cnt -= 1;
            if cnt == 0 {
                if found != NONE {
                    break;
                }
                cnt = self.block_size;
            }
        }
        if found == NONE {
            return false;
        }
        self.in_arc = found;
        self.next_arc = e;
        true
    }

    fn find_join_node(&mut self) {
        let mut u = self.source[self.in_arc];
        let mut v = self.target[self.in_arc];
        while u != v {
            if self.succ_num[u] < self.succ_num[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        self.join = u;
    }

    /// Leaving arc by the strongly-feasible rule; `false` when the entering
    /// arc itself blocks (never for uncapacitated arcs).
    fn find_leaving_arc(&mut self) -> bool {
        let (first, second) = if self.state[self.in_arc] == STATE_LOWER {
            (self.source[self.in_arc], self.target[self.in_arc])
        } else {
            (self.target[self.in_arc], self.source[self.in_arc])
        };
        self.delta = INF;
        let mut result = 0;
        let mut u = first;
        while u != self.join {
            let e = self.pred[u];
            let d = if self.pred_dir[u] == DIR_DOWN { INF } else { self.flow[e] };
            if d < self.delta {
                self.delta = d;
                self.u_out = u;
                result = 1;
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != self.join {
            let e = self.pred[u];
            let d = if self.pred_dir[u] == DIR_UP { INF } else { self.flow[e] };
            if d <= self.delta {
                self.delta = d;
                self.u_out = u;
                result = 2;
            }
            u = self.parent[u];
        }
        if result == 1 {
            self.u_in = first;
            self.v_in = second;
        } else {
            self.u_in = second;
            self.v_in = first;
        }
        result != 0
    }

    fn change_flow(&mut self, change: bool) {
        if self.delta > 0 {
            let val = self.state[self.in_arc] as i64 * self.delta;
            self.flow[self.in_arc] += val;
            let mut u = self.source[self.in_arc];
            while u != self.join {
                let e = self.pred[u];
                self.flow[e] -= self.pred_dir[u] as i64 * val;
                u = self.parent[u];
            }
            let mut u = self.target[self.in_arc];
            while u != self.join {
                let e = self.pred[u];
                self.flow[e] += self.pred_dir[u] as i64 * val;
                u = self.parent[u];
            }
        }
        if change {
            self.state[self.in_arc] = STATE_TREE;
            let out = self.pred[self.u_out];
            self.state[out] = if self.flow[out] == 0 { STATE_LOWER } else { STATE_UPPER };
        } else {
            self.state[self.in_arc] = -self.state[self.in_arc];
        }
    }

    fn update_tree_structure(&mut self) {
        let (u_in, v_in, u_out, join, in_arc) = (self.u_in, self.v_in, self.u_out, self.join, self.in_arc);
        let old_rev_thread = self.rev_thread[u_out];
        let old_succ_num = self.succ_num[u_out];
        let old_last_succ = self.last_succ[u_out];
        let v_out = self.parent[u_out];

        if u_in == u_out {
            self.parent[u_in] = v_in;
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = if u_in == self.source[in_arc] { DIR_UP } else { DIR_DOWN };
            if self.thread[v_in] != u_out {
                let mut after = self.thread[old_last_succ];
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
                after = self.thread[v_in];
                self.thread[v_in] = u_out;
                self.rev_thread[u_out] = v_in;
                self.thread[old_last_succ] = after;
                self.rev_thread[after] = old_last_succ;
            }
        } else {
            // when old_rev_thread == v_in, join and v_out coincide
            let thread_continue = if old_rev_thread == v_in { self.thread[old_last_succ] } else { self.thread[v_in] };
            // re-hang the stem u_in .. u_out below v_in
            let mut stem = u_in;
            let mut par_stem = v_in;
            let mut last = self.last_succ[u_in];
            let mut after = self.thread[last];
            self.thread[v_in] = u_in;
            self.dirty_revs.clear();
            self.dirty_revs.push(v_in);
            while stem != u_out {
                let next_stem = self.parent[stem];
                self.thread[last] = next_stem;
                self.dirty_revs.push(last);
                let before = self.rev_thread[stem];
                self.thread[before] = after;
                self.rev_thread[after] = before;
                self.parent[stem] = par_stem;
                par_stem = stem;
                stem = next_stem;
                last = if self.last_succ[stem] == self.last_succ[par_stem] {
                    self.rev_thread[par_stem]
                } else {
                    self.last_succ[stem]
                };
                after = self.thread[last];
            }
            self.parent[u_out] = par_stem;
            self.thread[last] = thread_continue;
            self.rev_thread[thread_continue] = last;
            self.last_succ[u_out] = last;
            if old_rev_thread != v_in {
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
            }
            for k in 0..self.dirty_revs.len() {
                let u = self.dirty_revs[k];
                let t = self.thread[u];
                self.rev_thread[t] = u;
            }
            // pred, pred_dir, last_succ and succ_num along the stem
            let mut tmp_sc = 0usize;
            let tmp_ls = self.last_succ[u_out];
            let mut u = u_out;
            while u != u_in {
                let p = self.parent[u];
                self.pred[u] = self.pred[p];
                self.pred_dir[u] = -self.pred_dir[p];
                tmp_sc = tmp_sc + self.succ_num[u] - self.succ_num[p];
                self.succ_num[u] = tmp_sc;
                self.last_succ[p] = tmp_ls;
                u = p;
            }
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = if u_in == self.source[in_arc] { DIR_UP } else { DIR_DOWN };
            self.succ_num[u_in] = old_succ_num;
        }

        let up_limit_out = if self.last_succ[join] == v_in { join } else { NONE };
        let last_succ_out = self.last_succ[u_out];
        let mut u = v_in;
        while u != NONE && self.last_succ[u] == v_in {
            self.last_succ[u] = last_succ_out;
            u = self.parent[u];
        }
        if join != old_rev_thread && v_in != old_rev_thread {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = old_rev_thread;
                u = self.parent[u];
            }
        } else if last_succ_out != old_last_succ {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = last_succ_out;
                u = self.parent[u];
            }
        }
        let mut u = v_in;
        while u != join {
            self.succ_num[u] += old_succ_num;
            u = self.parent[u];
        }
        let mut u = v_out;
        while u != join {
            self.succ_num[u] -= old_succ_num;
            u = self.parent[u];
        }
    }

    fn update_potential(&mut self) {
        let u_in = self.u_in;
        let sigma = self.pi[self.v_in] - self.pi[u_in] - self.pred_dir[u_in] as f64 * self.cost[self.in_arc];
        let end = self.thread[self.last_succ[u_in]];
        let mut u = u_in;
        while u != end {
            self.pi[u] += sigma;
            u = self.thread[u];
        }
    }

    /// Optimal permutation `i -> j`.
    fn solve(mut self) -> Vec<usize> {
        let n = self.node_num / 2;
        while self.find_entering_arc() {
            self.find_join_node();
            let change = self.find_leaving_arc();
            assert!(self.delta < INF, "assignment problem cannot be unbounded");
            self.change_flow(change);
            if change {
                self.update_tree_structure();
                self.update_potential();
            }
        }
        debug_assert!((self.arc_num..self.arc_num + self.node_num).all(|e| self.flow[e] == 0));
        let mut perm = vec![NONE; n];
        for e in 0..self.arc_num {
            if self.flow[e] > 0 {
                perm[self.source[e]] = self.target[e] - n;
            }
        }
        debug_assert!(perm.iter().all(|&j| j < n));
        perm
    }
}
