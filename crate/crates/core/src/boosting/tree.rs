//! Regression tree base learner with exact greedy split search.
//!
//! Trees are grown on one gradient/Hessian column at a time. Split
//! search enumerates every masked feature and every midpoint between
//! consecutive distinct observed values, scoring candidates with the
//! second-order gain. Missing values are routed by a learned default
//! direction: both assignments are tried and the better one is kept,
//! with ties preferring the left child. Gain ties across candidates are
//! broken toward the lowest (feature index, threshold) pair, which
//! makes growth deterministic under duplicated columns.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::boosting::FitConfig;

/// One node of a fitted tree, stored in an arena indexed by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    /// Internal decision node; rows with `x < threshold` go left and
    /// missing values follow `default_left`.
    Split {
        split_feature: usize,
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
    },
    /// Terminal node contributing `weight` to the raw prediction.
    Leaf { weight: f64 },
}

/// A binary regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Builds the single-leaf tree with the given weight.
    pub fn leaf(weight: f64) -> Tree {
        Tree {
            nodes: vec![Node::Leaf { weight }],
        }
    }

    /// Evaluates the tree on one row of a feature matrix.
    pub fn predict_row(&self, features: &Array2<f64>, row: usize) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { weight } => return *weight,
                Node::Split {
                    split_feature,
                    threshold,
                    default_left,
                    left,
                    right,
                } => {
                    let x = features[(row, *split_feature)];
                    idx = if x.is_nan() {
                        if *default_left {
                            *left
                        } else {
                            *right
                        }
                    } else if x < *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    /// Number of split levels on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], idx: usize) -> usize {
            match &nodes[idx] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

struct Candidate {
    feature: usize,
    threshold: f64,
    default_left: bool,
    gain: f64,
}

/// Grows one tree on the masked rows and columns of a gradient column.
///
/// The split gain is the standard second-order expression
/// `gain = (G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda))/2 - gamma`
/// and only strictly positive gains whose children carry a Hessian sum
/// of at least `min_child_weight` are accepted. Degenerate input (no
/// splittable column, depth cap, blocked gains) yields a single leaf
/// with the Newton weight `-G/(H+lambda)`.
///
/// The `_seed` argument is part of the interface for growth strategies
/// that sample inside the tree; exact greedy growth is deterministic
/// and does not consume it.
pub fn grow_tree(
    features: &Array2<f64>,
    g: &[f64],
    h: &[f64],
    config: &FitConfig,
    row_mask: &[usize],
    col_mask: &[usize],
    _seed: u64,
) -> Tree {
    assert!(!row_mask.is_empty(), "row mask must select at least one row");
    assert!(!col_mask.is_empty(), "column mask must select at least one column");
    assert_eq!(g.len(), h.len(), "gradient and Hessian lengths must agree");

    let mut cols = col_mask.to_vec();
    cols.sort_unstable();
    cols.dedup();

    let mut nodes = Vec::new();
    build(
        &mut nodes,
        features,
        g,
        h,
        config,
        row_mask.to_vec(),
        &cols,
        0,
    );
    Tree { nodes }
}

fn build(
    nodes: &mut Vec<Node>,
    features: &Array2<f64>,
    g: &[f64],
    h: &[f64],
    config: &FitConfig,
    rows: Vec<usize>,
    cols: &[usize],
    depth: usize,
) -> usize {
    let g_sum: f64 = rows.iter().map(|&i| g[i]).sum();
    let h_sum: f64 = rows.iter().map(|&i| h[i]).sum();

    if depth < config.max_depth {
        if let Some(best) = best_split(features, g, h, config, &rows, cols, g_sum, h_sum) {
            let (left_rows, right_rows) = partition(features, &rows, &best);
            let idx = nodes.len();
            // Reserve the slot so child indices are known after recursion.
            nodes.push(Node::Leaf { weight: 0.0 });
            let left = build(nodes, features, g, h, config, left_rows, cols, depth + 1);
            let right = build(nodes, features, g, h, config, right_rows, cols, depth + 1);
            nodes[idx] = Node::Split {
                split_feature: best.feature,
                threshold: best.threshold,
                default_left: best.default_left,
                left,
                right,
            };
            return idx;
        }
    }

    nodes.push(Node::Leaf {
        weight: -g_sum / (h_sum + config.lambda_l2),
    });
    nodes.len() - 1
}

fn partition(features: &Array2<f64>, rows: &[usize], best: &Candidate) -> (Vec<usize>, Vec<usize>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for &i in rows {
        let x = features[(i, best.feature)];
        let goes_left = if x.is_nan() {
            best.default_left
        } else {
            x < best.threshold
        };
        if goes_left {
            left.push(i);
        } else {
            right.push(i);
        }
    }
    (left, right)
}

#[allow(clippy::too_many_arguments)]
fn best_split(
    features: &Array2<f64>,
    g: &[f64],
    h: &[f64],
    config: &FitConfig,
    rows: &[usize],
    cols: &[usize],
    g_total: f64,
    h_total: f64,
) -> Option<Candidate> {
    let lambda = config.lambda_l2;
    let parent_score = g_total * g_total / (h_total + lambda);
    let mut best: Option<Candidate> = None;

    for &c in cols {
        // Separate observed values from missing ones; the missing block
        // is assigned wholesale to one side by the default direction.
        let mut observed: Vec<(f64, f64, f64)> = Vec::with_capacity(rows.len());
        let mut g_miss = 0.0;
        let mut h_miss = 0.0;
        for &i in rows {
            let x = features[(i, c)];
            if x.is_nan() {
                g_miss += g[i];
                h_miss += h[i];
            } else {
                observed.push((x, g[i], h[i]));
            }
        }
        if observed.len() < 2 {
            continue;
        }
        observed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("observed values are not NaN"));

        let mut g_left = 0.0;
        let mut h_left = 0.0;
        for j in 0..observed.len() - 1 {
            g_left += observed[j].1;
            h_left += observed[j].2;
            let (v, next) = (observed[j].0, observed[j + 1].0);
            if v == next {
                continue;
            }
            let threshold = 0.5 * (v + next);
            // Guard against midpoint rounding onto the lower value,
            // which would leave the scan partition unrealizable.
            if !(threshold > v && threshold <= next) {
                continue;
            }
            let g_right = g_total - g_miss - g_left;
            let h_right = h_total - h_miss - h_left;

            // Try the missing block on each side; ties prefer left.
            let mut side_best: Option<(f64, bool)> = None;
            for &default_left in &[true, false] {
                let (gl, hl, gr, hr) = if default_left {
                    (g_left + g_miss, h_left + h_miss, g_right, h_right)
                } else {
                    (g_left, h_left, g_right + g_miss, h_right + h_miss)
                };
                if hl < config.min_child_weight || hr < config.min_child_weight {
                    continue;
                }
                let gain = 0.5
                    * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent_score)
                    - config.gamma;
                let better = match side_best {
                    None => true,
                    Some((best_gain, _)) => gain > best_gain,
                };
                if better {
                    side_best = Some((gain, default_left));
                }
            }
            let Some((gain, default_left)) = side_best else {
                continue;
            };
            if gain <= 0.0 {
                continue;
            }
            let better = match &best {
                None => true,
                Some(b) => gain > b.gain,
            };
            if better {
                best = Some(Candidate {
                    feature: c,
                    threshold,
                    default_left,
                    gain,
                });
            }
        }
    }
    best
}
