//! CART regression trees grown on pre-binned features.
//!
//! Each feature column is cut into at most `max_bins` intervals. Columns
//! with few distinct values get one cut between every pair of neighbours, so
//! small problems are split exactly as classic CART would; wide columns use
//! quantile cuts. A split sends `x <= threshold` left.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ForestHyperparams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn leaf(value: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value }],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// Cut points and per-row bin codes of one feature column.
#[derive(Debug, Clone)]
pub(crate) struct BinnedColumn {
    pub thresholds: Vec<f64>,
    pub codes: Vec<u16>,
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = (a + b) / 2.0;
    if m >= b {
        a
    } else {
        m
    }
}

fn cut_points(column: &[f64], max_bins: usize) -> Vec<f64> {
    let mut sorted = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut unique = sorted.clone();
    unique.dedup();
    if unique.len() <= max_bins {
        return unique.windows(2).map(|w| midpoint(w[0], w[1])).collect();
    }
    let n = sorted.len();
    let mut cuts = Vec::with_capacity(max_bins - 1);
    for j in 1..max_bins {
        let v = sorted[(j * n / max_bins).min(n - 1)];
        let next = unique.partition_point(|&u| u <= v);
        if next < unique.len() {
            let cut = midpoint(v, unique[next]);
            if cuts.last().is_none_or(|&last| cut > last) {
                cuts.push(cut);
            }
        }
    }
    cuts
}

/// Column-major binned view of a row-major matrix.
#[derive(Debug, Clone)]
pub(crate) struct BinnedMatrix {
    pub columns: Vec<BinnedColumn>,
}

impl BinnedMatrix {
    pub fn new(data: &[f64], n_rows: usize, n_cols: usize, max_bins: usize) -> Self {
        let max_bins = max_bins.clamp(2, u16::MAX as usize);
        let columns = (0..n_cols)
            .map(|c| {
                let column: Vec<f64> = (0..n_rows).map(|r| data[r * n_cols + c]).collect();
                let thresholds = cut_points(&column, max_bins);
                let codes = column
                    .iter()
                    .map(|&v| thresholds.partition_point(|&t| t < v) as u16)
                    .collect();
                BinnedColumn { thresholds, codes }
            })
            .collect();
        Self { columns }
    }
}

struct BestSplit {
    gain: f64,
    feature: usize,
    code: u16,
}

pub(crate) struct Grower<'a, R: Rng> {
    pub binned: &'a BinnedMatrix,
    pub targets: &'a [f64],
    pub hp: &'a ForestHyperparams,
    pub rng: &'a mut R,
    nodes: Vec<Node>,
    hist_count: Vec<u32>,
    hist_sum: Vec<f64>,
}

const MIN_GAIN: f64 = 1e-12;

impl<'a, R: Rng> Grower<'a, R> {
    pub fn new(binned: &'a BinnedMatrix, targets: &'a [f64], hp: &'a ForestHyperparams, rng: &'a mut R) -> Self {
        Self {
            binned,
            targets,
            hp,
            rng,
            nodes: Vec::new(),
            hist_count: Vec::new(),
            hist_sum: Vec::new(),
        }
    }

    pub fn grow(mut self, rows: Vec<u32>) -> RegressionTree {
        self.build(rows, 0);
        RegressionTree { nodes: self.nodes }
    }

    fn features_for_split(&mut self) -> Vec<usize> {
        let d = self.binned.columns.len();
        let k = ((self.hp.feature_subsample_ratio * d as f64).ceil() as usize).clamp(1, d);
        if k == d {
            return (0..d).collect();
        }
        let mut picked = rand::seq::index::sample(self.rng, d, k).into_vec();
        picked.sort_unstable();
        picked
    }

    fn best_split(&mut self, rows: &[u32], total: f64) -> Option<BestSplit> {
        let n = rows.len();
        let min_leaf = self.hp.min_samples_leaf.max(1);
        let parent = total * total / n as f64;
        let mut best: Option<BestSplit> = None;
        for f in self.features_for_split() {
            let col = &self.binned.columns[f];
            let bins = col.thresholds.len() + 1;
            if bins < 2 {
                continue;
            }
            self.hist_count.clear();
            self.hist_count.resize(bins, 0);
            self.hist_sum.clear();
            self.hist_sum.resize(bins, 0.0);
            for &r in rows {
                let b = col.codes[r as usize] as usize;
                self.hist_count[b] += 1;
                self.hist_sum[b] += self.targets[r as usize];
            }
            let (mut nl, mut sl) = (0usize, 0.0);
            for b in 0..bins - 1 {
                nl += self.hist_count[b] as usize;
                sl += self.hist_sum[b];
                let nr = n - nl;
                if nl < min_leaf {
                    continue;
                }
                if nr < min_leaf {
                    break;
                }
                if self.hist_count[b] == 0 {
                    continue;
                }
                let sr = total - sl;
                let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - parent;
                if gain > MIN_GAIN && best.as_ref().is_none_or(|bs| gain > bs.gain) {
                    best = Some(BestSplit {
                        gain,
                        feature: f,
                        code: b as u16,
                    });
                }
            }
        }
        best
    }

    fn build(&mut self, rows: Vec<u32>, depth: usize) -> usize {
        let id = self.nodes.len();
        let n = rows.len();
        let (mut sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        for &r in &rows {
            let y = self.targets[r as usize];
            sum += y;
            lo = lo.min(y);
            hi = hi.max(y);
        }
        let mean = match n {
            0 => 0.0,
            _ if lo == hi => lo,
            _ => sum / n as f64,
        };
        self.nodes.push(Node::Leaf { value: mean });

        let min_leaf = self.hp.min_samples_leaf.max(1);
        if depth >= self.hp.max_depth || n < 2 * min_leaf || lo == hi {
            return id;
        }
        let Some(split) = self.best_split(&rows, sum) else {
            return id;
        };
        let codes = &self.binned.columns[split.feature].codes;
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) =
            rows.iter().partition(|&&r| codes[r as usize] <= split.code);
        drop(rows);
        let threshold = self.binned.columns[split.feature].thresholds[split.code as usize];
        let left = self.build(left_rows, depth + 1);
        let right = self.build(right_rows, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold,
            left,
            right,
        };
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_columns_cut_between_every_distinct_value() {
        assert_eq!(cut_points(&[3.0, 1.0, 2.0, 2.0], 256), vec![1.5, 2.5]);
        assert!(cut_points(&[4.0; 5], 256).is_empty());
    }

    #[test]
    fn wide_columns_use_at_most_max_bins() {
        let col: Vec<f64> = (0..10_000).map(|i| i as f64).collect();
        let cuts = cut_points(&col, 16);
        assert!(cuts.len() <= 15 && cuts.len() >= 14);
        assert!(cuts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn codes_respect_thresholds() {
        let data = [0.0, 5.0, 1.0, 2.0, 9.0];
        let m = BinnedMatrix::new(&data, 5, 1, 256);
        let col = &m.columns[0];
        for (r, &v) in data.iter().enumerate() {
            let code = col.codes[r] as usize;
            if code < col.thresholds.len() {
                assert!(v <= col.thresholds[code]);
            }
            if code > 0 {
                assert!(v > col.thresholds[code - 1]);
            }
        }
    }

    #[test]
    fn adjacent_floats_midpoint_stays_left() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        assert_eq!(midpoint(a, b), a);
    }
}
