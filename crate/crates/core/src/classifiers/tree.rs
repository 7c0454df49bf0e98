//! Binary decision trees stored as flat node arrays, plus the growers used
//! by the forests (Gini) and by boosting (squared error).

use crate::numerics::RngStream;

use super::EmbeddingTable;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
        count: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    /// Root first.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64, count: usize) -> Self {
        Self {
            nodes: vec![Node::Leaf {
                value,
                count: count as u32,
            }],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature as usize] <= threshold { left } else { right } as usize;
                }
            }
        }
    }

    /// Number of split levels on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left as usize).max(walk(nodes, right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Checks child indices, for trees read from disk.
    pub fn is_well_formed(&self, dim: usize) -> bool {
        let n = self.nodes.len();
        n > 0
            && self.nodes.iter().enumerate().all(|(i, node)| match *node {
                Node::Split {
                    feature, left, right, ..
                } => (feature as usize) < dim && (left as usize) > i && (right as usize) > i && (left as usize) < n && (right as usize) < n,
                Node::Leaf { value, .. } => value.is_finite(),
            })
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Stopping {
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
}

/// Grows a tree depth-first, left child before right. `find_split` returns
/// `(feature, threshold)` or `None` when the node should stay a leaf.
pub(crate) fn grow(
    table: &EmbeddingTable,
    samples: Vec<usize>,
    stop: Stopping,
    is_pure: impl Fn(&[usize]) -> bool,
    leaf_value: impl Fn(&[usize]) -> f64,
    mut find_split: impl FnMut(&[usize]) -> Option<(usize, f64)>,
) -> Tree {
    let mut nodes = vec![Node::Leaf { value: 0.0, count: 0 }];
    let mut stack = vec![(0usize, samples, 0usize)];
    while let Some((id, idx, depth)) = stack.pop() {
        let can_split = stop.max_depth.is_none_or(|d| depth < d)
            && idx.len() >= stop.min_samples_split
            && idx.len() >= 2 * stop.min_samples_leaf
            && !is_pure(&idx);
        let split = if can_split { find_split(&idx) } else { None };
        match split {
            Some((feature, threshold)) => {
                let (left, right): (Vec<usize>, Vec<usize>) =
                    idx.iter().partition(|&&i| table.value(i, feature) <= threshold);
                debug_assert!(!left.is_empty() && !right.is_empty());
                let l = nodes.len();
                nodes.push(Node::Leaf { value: 0.0, count: 0 });
                nodes.push(Node::Leaf { value: 0.0, count: 0 });
                nodes[id] = Node::Split {
                    feature: feature as u32,
                    threshold,
                    left: l as u32,
                    right: (l + 1) as u32,
                };
                // right pushed first so the left subtree is grown first
                stack.push((l + 1, right, depth + 1));
                stack.push((l, left, depth + 1));
            }
            None => {
                nodes[id] = Node::Leaf {
                    value: leaf_value(&idx),
                    count: idx.len() as u32,
                };
            }
        }
    }
    Tree { nodes }
}

/// `n * gini` for a node with `pos` positives out of `n`.
fn weighted_gini(pos: f64, n: f64) -> f64 {
    if n == 0.0 {
        0.0
    } else {
        2.0 * pos * (n - pos) / n
    }
}

/// Threshold between two distinct sorted values that keeps `lo` on the left.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m >= hi {
        lo
    } else {
        m
    }
}

/// Draws candidate features without replacement; constant features do not
/// count toward `max_features`, matching the usual forest convention.
pub(crate) struct FeatureSampler {
    order: Vec<usize>,
}

impl FeatureSampler {
    pub fn new(dim: usize) -> Self {
        Self {
            order: (0..dim).collect(),
        }
    }

    /// Calls `visit(feature)` for randomly drawn features until it has
    /// returned `true` `max_features` times or features run out.
    pub fn visit(
        &mut self,
        rng: &mut RngStream,
        max_features: usize,
        mut visit: impl FnMut(usize, &mut RngStream) -> bool,
    ) {
        let mut remaining = self.order.len();
        let mut used = 0;
        while remaining > 0 && used < max_features {
            let j = rng.index(remaining);
            self.order.swap(j, remaining - 1);
            remaining -= 1;
            if visit(self.order[remaining], rng) {
                used += 1;
            }
        }
    }
}

/// Best Gini split over sorted thresholds of randomly drawn features.
pub(crate) fn best_gini_split(
    table: &EmbeddingTable,
    y: &[bool],
    idx: &[usize],
    min_leaf: usize,
    max_features: usize,
    sampler: &mut FeatureSampler,
    rng: &mut RngStream,
) -> Option<(usize, f64)> {
    let n = idx.len();
    let total_pos = idx.iter().filter(|&&i| y[i]).count();
    let mut best: Option<(f64, usize, f64)> = None;
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(n);
    sampler.visit(rng, max_features, |f, _| {
        pairs.clear();
        pairs.extend(idx.iter().map(|&i| (table.value(i, f), y[i])));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs[0].0 == pairs[n - 1].0 {
            return false;
        }
        let mut pos_left = 0usize;
        for s in 1..n {
            pos_left += pairs[s - 1].1 as usize;
            if pairs[s].0 == pairs[s - 1].0 || s < min_leaf || n - s < min_leaf {
                continue;
            }
            let score = weighted_gini(pos_left as f64, s as f64)
                + weighted_gini((total_pos - pos_left) as f64, (n - s) as f64);
            if best.is_none_or(|(b, _, _)| score < b) {
                best = Some((score, f, midpoint(pairs[s - 1].0, pairs[s].0)));
            }
        }
        true
    });
    best.map(|(_, f, t)| (f, t))
}

/// Extremely randomized split: one uniform threshold per drawn feature, the
/// best of those by Gini.
pub(crate) fn random_gini_split(
    table: &EmbeddingTable,
    y: &[bool],
    idx: &[usize],
    min_leaf: usize,
    max_features: usize,
    sampler: &mut FeatureSampler,
    rng: &mut RngStream,
) -> Option<(usize, f64)> {
    let n = idx.len();
    let total_pos = idx.iter().filter(|&&i| y[i]).count();
    let mut best: Option<(f64, usize, f64)> = None;
    sampler.visit(rng, max_features, |f, draw| {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in idx {
            let v = table.value(i, f);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == hi {
            return false;
        }
        let mut t = lo + draw.unit() * (hi - lo);
        if t >= hi {
            t = lo;
        }
        let (mut n_left, mut pos_left) = (0usize, 0usize);
        for &i in idx {
            if table.value(i, f) <= t {
                n_left += 1;
                pos_left += y[i] as usize;
            }
        }
        if n_left < min_leaf || n - n_left < min_leaf {
            return true;
        }
        let score = weighted_gini(pos_left as f64, n_left as f64)
            + weighted_gini((total_pos - pos_left) as f64, (n - n_left) as f64);
        if best.is_none_or(|(b, _, _)| score < b) {
            best = Some((score, f, t));
        }
        true
    });
    best.map(|(_, f, t)| (f, t))
}

/// Best squared-error split over all features for regression targets `r`.
pub(crate) fn best_mse_split(table: &EmbeddingTable, r: &[f64], idx: &[usize], min_leaf: usize) -> Option<(usize, f64)> {
    let n = idx.len();
    let total: f64 = idx.iter().map(|&i| r[i]).sum();
    let mut best: Option<(f64, usize, f64)> = None;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
    for f in 0..table.dim() {
        pairs.clear();
        pairs.extend(idx.iter().map(|&i| (table.value(i, f), r[i])));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs[0].0 == pairs[n - 1].0 {
            continue;
        }
        let mut sum_left = 0.0;
        for s in 1..n {
            sum_left += pairs[s - 1].1;
            if pairs[s].0 == pairs[s - 1].0 || s < min_leaf || n - s < min_leaf {
                continue;
            }
            let sum_right = total - sum_left;
            // maximizing this minimizes the children's summed squared error
            let score = sum_left * sum_left / s as f64 + sum_right * sum_right / (n - s) as f64;
            if best.is_none_or(|(b, _, _)| score > b) {
                best = Some((score, f, midpoint(pairs[s - 1].0, pairs[s].0)));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_keeps_lower_value_left() {
        assert_eq!(midpoint(1.0, 2.0), 1.5);
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        assert_eq!(midpoint(a, b), a);
    }

    #[test]
    fn gini_weights() {
        assert_eq!(weighted_gini(0.0, 4.0), 0.0);
        assert_eq!(weighted_gini(4.0, 4.0), 0.0);
        assert_eq!(weighted_gini(2.0, 4.0), 2.0);
        assert_eq!(weighted_gini(0.0, 0.0), 0.0);
    }

    #[test]
    fn prediction_walks_thresholds() {
        let t = Tree {
            nodes: vec![
                Node::Split {
                    feature: 1,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { value: 0.25, count: 4 },
                Node::Leaf { value: 1.0, count: 2 },
            ],
        };
        assert_eq!(t.predict(&[9.0, 0.5]), 0.25);
        assert_eq!(t.predict(&[9.0, 0.6]), 1.0);
        assert_eq!(t.depth(), 1);
        assert_eq!(t.n_leaves(), 2);
        assert!(t.is_well_formed(2));
        assert!(!t.is_well_formed(1));
    }
}
