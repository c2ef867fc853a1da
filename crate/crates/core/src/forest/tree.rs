use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::HonestSplit;
use crate::error::{Error, Result};

/// Axis-aligned split: go left iff `point[coordinate] <= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub coordinate: usize,
    pub threshold: f64,
}

impl SplitRule {
    pub fn goes_left(&self, point: &[f64]) -> bool {
        point[self.coordinate] <= self.threshold
    }
}

/// Structural knobs of a single tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Minimum fraction of the parent's training units in each child.
    pub alpha: f64,
    /// Nodes with fewer than `2 k` training units are not split; children
    /// keep at least `k`.
    pub k: usize,
    /// Per-coordinate eligibility probability at each node.
    pub pi: f64,
    /// Minimum treated and control units per leaf, on both halves.
    pub min_arm: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            k: 10,
            pi: 0.8,
            min_arm: 3,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(Error::Precondition(format!("alpha must lie in (0, 0.5], found {}", self.alpha)));
        }
        if self.k == 0 || self.min_arm == 0 {
            return Err(Error::Precondition("k and min_arm must be at least 1".into()));
        }
        if !(self.pi > 0.0 && self.pi <= 1.0) {
            return Err(Error::Precondition(format!("pi must lie in (0, 1], found {}", self.pi)));
        }
        Ok(())
    }

    fn min_child(&self, parent: usize) -> usize {
        self.k.max((self.alpha * parent as f64).ceil() as usize)
    }
}

/// Why a node stopped splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeafKind {
    /// Fewer than `2 k` training units.
    Small,
    /// No coordinate admits a split satisfying regularity and `min_arm`.
    NoAdmissibleSplit,
    /// The best split left a child without `min_arm` units of some arm in
    /// the estimation half, so it was merged back into its parent.
    Collapsed,
}

/// Honest leaf statistics, computed from the estimation half only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub treated_mean: f64,
    pub control_mean: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub n_train: usize,
    pub kind: LeafKind,
}

impl Leaf {
    pub fn effect(&self) -> f64 {
        self.treated_mean - self.control_mean
    }

    pub fn treated_fraction(&self) -> f64 {
        self.n_treated as f64 / (self.n_treated + self.n_control) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        rule: SplitRule,
        left: usize,
        right: usize,
        n_train: usize,
    },
    Leaf(Leaf),
}

/// Difference of treated and control means.
pub fn leaf_effect(outcomes: &[f64], policy: &[bool]) -> Result<f64> {
    let (mut st, mut nt, mut sc, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for (y, &t) in outcomes.iter().zip(policy) {
        if t {
            st += y;
            nt += 1;
        } else {
            sc += y;
            nc += 1;
        }
    }
    if nt == 0 || nc == 0 {
        return Err(Error::ArmEmpty(format!("{nt} treated, {nc} control")));
    }
    Ok(st / nt as f64 - sc / nc as f64)
}

/// A split candidate together with its criterion value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSplit {
    pub rule: SplitRule,
    pub criterion: f64,
}

/// Searches `coords` for the split maximizing
/// `n_left * effect_left^2 + n_right * effect_right^2` over the node's
/// training units. Thresholds are midpoints between consecutive distinct
/// values; each child must keep `max(k, ceil(alpha * m))` units and
/// `min_arm` of each arm. Ties go to the lowest coordinate, then the lowest
/// threshold.
pub fn best_split(
    points: &DMatrix<f64>,
    outcomes: &[f64],
    policy: &[bool],
    node: &[usize],
    coords: &[usize],
    params: &TreeParams,
) -> Option<ScoredSplit> {
    let m = node.len();
    if m < 2 * params.k {
        return None;
    }
    let min_child = params.min_child(m);
    if m < 2 * min_child {
        return None;
    }
    let (mut tot_st, mut tot_nt, mut tot_sc, mut tot_nc) = (0.0, 0usize, 0.0, 0usize);
    for &i in node {
        if policy[i] {
            tot_st += outcomes[i];
            tot_nt += 1;
        } else {
            tot_sc += outcomes[i];
            tot_nc += 1;
        }
    }
    let mut sorted_coords = coords.to_vec();
    sorted_coords.sort_unstable();
    let mut order = node.to_vec();
    let mut best: Option<ScoredSplit> = None;
    for &j in &sorted_coords {
        order.sort_by(|&a, &b| points[(a, j)].total_cmp(&points[(b, j)]));
        let (mut st, mut nt, mut sc, mut nc) = (0.0, 0usize, 0.0, 0usize);
        for pos in 0..m - 1 {
            let i = order[pos];
            if policy[i] {
                st += outcomes[i];
                nt += 1;
            } else {
                sc += outcomes[i];
                nc += 1;
            }
            let nl = pos + 1;
            let nr = m - nl;
            if nl < min_child {
                continue;
            }
            if nr < min_child {
                break;
            }
            let (a, b) = (points[(i, j)], points[(order[pos + 1], j)]);
            if a == b {
                continue;
            }
            let (rt, rc) = (tot_nt - nt, tot_nc - nc);
            if nt < params.min_arm || nc < params.min_arm || rt < params.min_arm || rc < params.min_arm {
                continue;
            }
            let left = st / nt as f64 - sc / nc as f64;
            let right = (tot_st - st) / rt as f64 - (tot_sc - sc) / rc as f64;
            let criterion = nl as f64 * left * left + nr as f64 * right * right;
            if best.is_none_or(|b| criterion > b.criterion) {
                best = Some(ScoredSplit {
                    rule: SplitRule {
                        coordinate: j,
                        threshold: 0.5 * (a + b),
                    },
                    criterion,
                });
            }
        }
    }
    best
}

/// Draws the coordinates eligible at one node: each independently with
/// probability `pi`, redrawn until nonempty.
pub fn draw_eligible<R: Rng + ?Sized>(q: usize, pi: f64, rng: &mut R) -> Vec<usize> {
    loop {
        let eligible: Vec<usize> = (0..q).filter(|_| rng.random::<f64>() < pi).collect();
        if !eligible.is_empty() {
            return eligible;
        }
    }
}

/// An honest causal tree over a `q`-dimensional point space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalTree {
    pub nodes: Vec<Node>,
    /// Global row indices of the two halves this tree was grown on.
    pub honest: HonestSplit,
    pub seed: u64,
}

struct Builder<'a> {
    points: &'a DMatrix<f64>,
    outcomes: &'a [f64],
    policy: &'a [bool],
    params: TreeParams,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    all_coords: Vec<usize>,
}

impl Builder<'_> {
    fn arm_counts(&self, idx: &[usize]) -> (usize, usize) {
        let t = idx.iter().filter(|&&i| self.policy[i]).count();
        (t, idx.len() - t)
    }

    fn leaf(&mut self, train: &[usize], est: &[usize], kind: LeafKind) -> usize {
        let (mut st, mut nt, mut sc, mut nc) = (0.0, 0usize, 0.0, 0usize);
        for &i in est {
            if self.policy[i] {
                st += self.outcomes[i];
                nt += 1;
            } else {
                sc += self.outcomes[i];
                nc += 1;
            }
        }
        self.nodes.push(Node::Leaf(Leaf {
            treated_mean: st / nt as f64,
            control_mean: sc / nc as f64,
            n_treated: nt,
            n_control: nc,
            n_train: train.len(),
            kind,
        }));
        self.nodes.len() - 1
    }

    fn grow(&mut self, train: Vec<usize>, est: Vec<usize>) -> usize {
        if train.len() < 2 * self.params.k {
            return self.leaf(&train, &est, LeafKind::Small);
        }
        let q = self.points.ncols();
        let eligible = draw_eligible(q, self.params.pi, &mut self.rng);
        let mut found = best_split(self.points, self.outcomes, self.policy, &train, &eligible, &self.params);
        if found.is_none() && eligible.len() < q {
            found = best_split(self.points, self.outcomes, self.policy, &train, &self.all_coords, &self.params);
        }
        let Some(ScoredSplit { rule, .. }) = found else {
            return self.leaf(&train, &est, LeafKind::NoAdmissibleSplit);
        };
        let row = |i: usize| self.points[(i, rule.coordinate)];
        let (est_l, est_r): (Vec<usize>, Vec<usize>) = est.iter().partition(|&&i| row(i) <= rule.threshold);
        let min_arm = self.params.min_arm;
        let ok = |(t, c): (usize, usize)| t >= min_arm && c >= min_arm;
        if !ok(self.arm_counts(&est_l)) || !ok(self.arm_counts(&est_r)) {
            return self.leaf(&train, &est, LeafKind::Collapsed);
        }
        let (train_l, train_r): (Vec<usize>, Vec<usize>) = train.iter().partition(|&&i| row(i) <= rule.threshold);
        let n_train = train.len();
        let id = self.nodes.len();
        self.nodes.push(Node::Split {
            rule,
            left: 0,
            right: 0,
            n_train,
        });
        let left = self.grow(train_l, est_l);
        let right = self.grow(train_r, est_r);
        self.nodes[id] = Node::Split {
            rule,
            left,
            right,
            n_train,
        };
        id
    }
}

impl CausalTree {
    /// Grows a tree whose splits see only `honest.train` and whose leaf
    /// means see only `honest.estimation`.
    pub fn build(
        points: &DMatrix<f64>,
        outcomes: &[f64],
        policy: &[bool],
        honest: &HonestSplit,
        params: &TreeParams,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        let n = points.nrows();
        if outcomes.len() != n || policy.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} outcomes and policies"),
                found: format!("{} and {}", outcomes.len(), policy.len()),
            });
        }
        if points.ncols() == 0 {
            return Err(Error::Precondition("point space has no coordinates".into()));
        }
        let mut builder = Builder {
            points,
            outcomes,
            policy,
            params: *params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            nodes: Vec::new(),
            all_coords: (0..points.ncols()).collect(),
        };
        for (half, name) in [(&honest.train, "training"), (&honest.estimation, "estimation")] {
            let (t, c) = builder.arm_counts(half);
            let need = if name == "training" { 1 } else { params.min_arm };
            if t < need || c < need {
                return Err(Error::TreeDegenerate(format!(
                    "{name} half has {t} treated and {c} control units (need {need} of each)"
                )));
            }
        }
        builder.grow(honest.train.clone(), honest.estimation.clone());
        Ok(Self {
            nodes: builder.nodes,
            honest: honest.clone(),
            seed,
        })
    }

    pub fn leaf_for(&self, point: &[f64]) -> &Leaf {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Split { rule, left, right, .. } => id = if rule.goes_left(point) { *left } else { *right },
                Node::Leaf(leaf) => return leaf,
            }
        }
    }

    /// Index of the leaf node reached by `point`.
    pub fn leaf_index(&self, point: &[f64]) -> usize {
        let mut id = 0;
        while let Node::Split { rule, left, right, .. } = &self.nodes[id] {
            id = if rule.goes_left(point) { *left } else { *right };
        }
        id
    }

    pub fn predict(&self, point: &[f64]) -> f64 {
        self.leaf_for(point).effect()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Leaf> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf(l) => Some(l),
            Node::Split { .. } => None,
        })
    }

    pub fn split_rules(&self) -> Vec<SplitRule> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { rule, .. } => Some(*rule),
                Node::Leaf(_) => None,
            })
            .collect()
    }

    fn n_train(&self, id: usize) -> usize {
        match &self.nodes[id] {
            Node::Split { n_train, .. } => *n_train,
            Node::Leaf(l) => l.n_train,
        }
    }

    /// Checks the regularity contract: every child keeps at least an `alpha`
    /// fraction (and at least `k`) of its parent's training units, small
    /// leaves hold fewer than `2 k`, and every leaf has `min_arm` of each arm
    /// in the estimation half.
    pub fn audit(&self, params: &TreeParams) -> std::result::Result<(), String> {
        for (id, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Split { left, right, n_train, .. } => {
                    for child in [*left, *right] {
                        let c = self.n_train(child);
                        if (c as f64) < params.alpha * *n_train as f64 || c < params.k {
                            return Err(format!("node {id}: child {child} holds {c} of {n_train} training units"));
                        }
                    }
                    if *n_train < 2 * params.k {
                        return Err(format!("node {id} split with only {n_train} training units"));
                    }
                }
                Node::Leaf(leaf) => {
                    if leaf.n_treated < params.min_arm || leaf.n_control < params.min_arm {
                        return Err(format!("leaf {id} violates min_arm"));
                    }
                    if leaf.kind == LeafKind::Small && leaf.n_train >= 2 * params.k {
                        return Err(format!("leaf {id} marked small with {} units", leaf.n_train));
                    }
                    if id != 0 && leaf.n_train < params.k {
                        return Err(format!("leaf {id} holds {} < k training units", leaf.n_train));
                    }
                }
            }
        }
        Ok(())
    }
}
