//! From-scratch CART-style random forests with an entropy split criterion.
//!
//! Two leaf modes cover the two segmentation architectures: single-output
//! leaves hold class counts for per-pixel classification, multi-output
//! leaves hold one class id per mask pixel for the whole-image model.
//! Split search is exact (sorted scan, midpoint thresholds between distinct
//! values) with deterministic tie-breaks: highest gain, then lowest feature
//! index, then lowest threshold.
//!
//! Every random decision is keyed: tree t draws its bootstrap from a stream
//! seeded by (params.seed, t), and each node draws its mtry candidate
//! features from a stream seeded by (tree_seed, node path), where the path
//! is the heap index of the node (root 1, children 2p and 2p+1). Training
//! is therefore bit-for-bit identical at any thread count.

use rand::Rng;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::imagecore::LabelMask;
use crate::rng::{derive_seed, stream};

const PFRF_MAGIC: &[u8; 4] = b"PFRF";
const PFRF_VERSION: u32 = 1;
const BOOT_SALT: u64 = 0xB0;
const TREE_SALT: u64 = 0x54;
const NODE_SALT: u64 = 0x4E;

/// Forest hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Candidate features per split; `None` means floor(sqrt(n_cols)).
    pub mtry: Option<usize>,
    /// Sample n rows with replacement per tree.
    pub bootstrap: bool,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 40,
            mtry: None,
            bootstrap: true,
            min_samples_split: 2,
            min_samples_leaf: 1,
            seed: 0,
        }
    }
}

impl ForestParams {
    fn resolve_mtry(&self, n_cols: usize) -> Result<usize> {
        let mtry = self
            .mtry
            .unwrap_or_else(|| ((n_cols as f64).sqrt().floor() as usize).max(1));
        if self.n_trees < 1 || self.max_depth < 1 {
            return Err(Error::InvalidConfig(
                "n_trees and max_depth must be at least 1".into(),
            ));
        }
        if mtry < 1 || mtry > n_cols {
            return Err(Error::InvalidConfig(format!(
                "mtry {mtry} out of range 1..={n_cols}"
            )));
        }
        if self.min_samples_split < 2 || self.min_samples_leaf < 1 {
            return Err(Error::InvalidConfig(
                "min_samples_split >= 2 and min_samples_leaf >= 1 required".into(),
            ));
        }
        Ok(mtry)
    }
}

/// Leaf payload: class counts of the training samples that reached the
/// leaf (single-output) or one majority class id per output (multi).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LeafData {
    Counts(Vec<u64>),
    Classes(Vec<u16>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split { feature: u32, threshold: f64, left: u32, right: u32 },
    Leaf(LeafData),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    Single,
    Multi { n_outputs: usize },
}

/// One trained tree; `nodes` is in preorder with the root at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
    pub depth: usize,
    pub n_cols: usize,
    pub output_mode: OutputMode,
}

impl DecisionTree {
    /// Walk the sample to its leaf. Comparison convention: value <=
    /// threshold goes left.
    pub fn leaf_for(&self, x: &[f32]) -> &LeafData {
        debug_assert_eq!(x.len(), self.n_cols);
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                TreeNode::Split { feature, threshold, left, right } => {
                    idx = if (x[*feature as usize] as f64) <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                TreeNode::Leaf(data) => return data,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
    pub params: ForestParams,
    pub n_classes: usize,
    pub n_cols: usize,
    pub output_mode: OutputMode,
}

/// Shannon entropy in bits of a class-count vector; 0 for an empty vector
/// or all-zero counts.
pub fn entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total;
            h -= p * p.log2();
        }
    }
    h
}

/// Map an f32 to a u32 whose unsigned order matches numeric order.
#[inline]
fn sort_key(v: f32) -> u32 {
    let b = v.to_bits();
    if b & 0x8000_0000 != 0 {
        !b
    } else {
        b | 0x8000_0000
    }
}

#[inline]
fn key_to_val(k: u32) -> f32 {
    if k & 0x8000_0000 != 0 {
        f32::from_bits(k & 0x7FFF_FFFF)
    } else {
        f32::from_bits(!k)
    }
}

/// Node size from which sorting switches to counting passes.
const RADIX_CUTOFF: usize = 256;

/// Safety margin for the split-gain upper bound; orders of magnitude
/// above any rounding error in the bound, orders below any gain the
/// search could care about.
const GAIN_PRUNE_MARGIN: f64 = 1e-9;

/// LSD counting sort of `(key << 32) | row` items over the key half,
/// digit-sized to the input: wide digits amortize over big nodes, narrow
/// ones keep the histograms L1-resident for mid-size nodes. The passes
/// are stable and rows are gathered in ascending order, so equal keys
/// end up row-ascending: exactly the order a full-width unstable sort
/// produces.
fn radix_sort_by_key(buf: &mut Vec<u64>, scratch: &mut Vec<u64>, hist: &mut Vec<u32>) {
    let (bits, shifts): (u32, &[u32]) =
        if buf.len() >= 32768 { (16, &[32, 48]) } else { (11, &[32, 43, 54]) };
    hist.resize(1 << bits, 0);
    scratch.resize(buf.len(), 0);
    let mask = (1u64 << bits) - 1;
    for &shift in shifts {
        hist.fill(0);
        for &item in buf.iter() {
            hist[((item >> shift) & mask) as usize] += 1;
        }
        let mut pos = 0u32;
        for h in hist.iter_mut() {
            pos += std::mem::replace(h, pos);
        }
        for &item in buf.iter() {
            let d = ((item >> shift) & mask) as usize;
            scratch[hist[d] as usize] = item;
            hist[d] += 1;
        }
        std::mem::swap(buf, scratch);
    }
}

/// Lower bound, in mass-weighted bits, on the entropy of a distribution
/// over `weight` items whose smaller half holds `m <= weight / 2` of
/// them: chords of the binary entropy curve anchored at minority
/// fractions 2^-4 .. 2^-18 (grouping the non-majority classes can only
/// lower the entropy, and a concave curve lies above its chords).
#[inline]
fn chord_floor(m: u64, weight: u64) -> f64 {
    let c = if m << 4 > weight {
        2.0
    } else if m << 6 > weight {
        5.39
    } else if m << 8 > weight {
        7.43
    } else if m << 10 > weight {
        9.43
    } else if m << 12 > weight {
        11.44
    } else if m << 14 > weight {
        13.44
    } else if m << 16 > weight {
        15.44
    } else if m << 18 > weight {
        17.44
    } else {
        19.44
    };
    c * m as f64
}

/// Scan one sorted feature column of a two-class node for the best
/// boundary whose gain strictly beats `entering`. Items are packed as
/// `(key << 32) | (weight << 8) | label`.
fn scan_boundaries_two(
    items: &[u64],
    counts: [u64; 2],
    total: u64,
    parent_h: f64,
    min_leaf: u64,
    entering: f64,
) -> Option<(f64, f64)> {
    let mut best_gain = entering;
    let mut found = None;
    let mut prune_rhs = (parent_h - best_gain + GAIN_PRUNE_MARGIN) * total as f64;
    let (mut l0, mut l1) = (0u64, 0u64);
    let mut prev_val = key_to_val((items[0] >> 32) as u32);
    for (i, &item) in items.iter().enumerate() {
        let val = key_to_val((item >> 32) as u32);
        if i > 0 && prev_val < val {
            let lw = l0 + l1;
            let rw = total - lw;
            if lw >= min_leaf && rw >= min_leaf {
                let (r0, r1) = (counts[0] - l0, counts[1] - l1);
                let floor = chord_floor(l0.min(l1), lw) + chord_floor(r0.min(r1), rw);
                if floor < prune_rhs {
                    let lh = entropy(&[l0, l1]);
                    let rh = entropy(&[r0, r1]);
                    let gain = parent_h
                        - (lw as f64 / total as f64) * lh
                        - (rw as f64 / total as f64) * rh;
                    if gain > best_gain {
                        best_gain = gain;
                        found = Some((gain, (prev_val as f64 + val as f64) / 2.0));
                        prune_rhs = (parent_h - best_gain + GAIN_PRUNE_MARGIN) * total as f64;
                    }
                }
            }
        }
        let w = (item >> 8) & 0xFF_FFFF;
        if item & 0xFF == 0 {
            l0 += w;
        } else {
            l1 += w;
        }
        prev_val = val;
    }
    found
}

/// The general-class-count version of [`scan_boundaries_two`].
#[allow(clippy::too_many_arguments)]
fn scan_boundaries_many(
    items: &[u64],
    counts: &[u64],
    total: u64,
    parent_h: f64,
    min_leaf: u64,
    entering: f64,
    left_counts: &mut [u64],
    right_counts: &mut [u64],
) -> Option<(f64, f64)> {
    let n_classes = counts.len();
    let mut best_gain = entering;
    let mut found = None;
    let mut prune_rhs = (parent_h - best_gain + GAIN_PRUNE_MARGIN) * total as f64;
    left_counts.fill(0);
    let mut left_w = 0u64;
    let mut prev_val = key_to_val((items[0] >> 32) as u32);
    for (i, &item) in items.iter().enumerate() {
        let val = key_to_val((item >> 32) as u32);
        if i > 0 && prev_val < val {
            let lw = left_w;
            let rw = total - lw;
            if lw >= min_leaf && rw >= min_leaf {
                let mut lmax = 0u64;
                let mut rmax = 0u64;
                for k in 0..n_classes {
                    right_counts[k] = counts[k] - left_counts[k];
                    lmax = lmax.max(left_counts[k]);
                    rmax = rmax.max(right_counts[k]);
                }
                let floor = chord_floor((lw - lmax).min(lmax), lw)
                    + chord_floor((rw - rmax).min(rmax), rw);
                if floor < prune_rhs {
                    let lh = entropy(left_counts);
                    let rh = entropy(right_counts);
                    let gain = parent_h
                        - (lw as f64 / total as f64) * lh
                        - (rw as f64 / total as f64) * rh;
                    if gain > best_gain {
                        best_gain = gain;
                        found = Some((gain, (prev_val as f64 + val as f64) / 2.0));
                        prune_rhs = (parent_h - best_gain + GAIN_PRUNE_MARGIN) * total as f64;
                    }
                }
            }
        }
        let w = (item >> 8) & 0xFF_FFFF;
        left_counts[(item & 0xFF) as usize] += w;
        left_w += w;
        prev_val = val;
    }
    found
}

/// Draw `mtry` distinct feature indices, returned in ascending order.
fn draw_candidates(n_cols: usize, mtry: usize, tree_seed: u64, path: u64) -> Vec<u32> {
    let mut rng = stream(tree_seed, &[NODE_SALT, path]);
    let mut pool: Vec<u32> = (0..n_cols as u32).collect();
    for j in 0..mtry {
        let pick = rng.random_range(j..n_cols);
        pool.swap(j, pick);
    }
    pool.truncate(mtry);
    pool.sort_unstable();
    pool
}

struct SingleGrower<'a> {
    /// Column-major copy: cols[c * n_rows + r].
    cols: &'a [f32],
    n_rows: usize,
    n_cols: usize,
    n_classes: usize,
    labels: &'a [u8],
    /// Bootstrap multiplicity per row; rows with weight 0 never appear.
    weights: &'a [u32],
    mtry: usize,
    max_depth: usize,
    min_split: u64,
    min_leaf: u64,
    tree_seed: u64,
    nodes: Vec<TreeNode>,
    depth_seen: usize,
    sort_buf: Vec<u64>,
    radix_scratch: Vec<u64>,
    radix_hist: Vec<u32>,
    /// Whether every bootstrap weight fits the 24-bit payload slot.
    packed: bool,
}

impl<'a> SingleGrower<'a> {
    fn grow(&mut self, rows: Vec<u32>, path: u64, depth: usize) -> u32 {
        self.depth_seen = self.depth_seen.max(depth);
        let mut counts = vec![0u64; self.n_classes];
        for &r in &rows {
            counts[self.labels[r as usize] as usize] += self.weights[r as usize] as u64;
        }
        let total: u64 = counts.iter().sum();
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if depth == self.max_depth || total < self.min_split || pure {
            let idx = self.nodes.len() as u32;
            self.nodes.push(TreeNode::Leaf(LeafData::Counts(counts)));
            return idx;
        }

        let parent_h = entropy(&counts);
        let candidates = draw_candidates(self.n_cols, self.mtry, self.tree_seed, path);
        let mut best_gain = 0.0f64;
        let mut best: Option<(u32, f64)> = None;
        let mut left_counts = vec![0u64; self.n_classes];
        let mut right_counts = vec![0u64; self.n_classes];

        for &f in &candidates {
            let base = f as usize * self.n_rows;
            self.sort_buf.clear();
            if self.packed {
                for &r in &rows {
                    let r = r as usize;
                    let key = sort_key(self.cols[base + r]);
                    let meta = ((self.weights[r] as u64) << 8) | self.labels[r] as u64;
                    self.sort_buf.push(((key as u64) << 32) | meta);
                }
            } else {
                for &r in &rows {
                    let key = sort_key(self.cols[base + r as usize]);
                    self.sort_buf.push(((key as u64) << 32) | r as u64);
                }
            }
            if self.sort_buf.len() >= RADIX_CUTOFF {
                radix_sort_by_key(&mut self.sort_buf, &mut self.radix_scratch, &mut self.radix_hist);
            } else {
                self.sort_buf.sort_unstable();
            }

            let found = if !self.packed {
                self.scan_rows(&counts, total, parent_h, best_gain, &mut left_counts, &mut right_counts)
            } else if self.n_classes == 2 {
                scan_boundaries_two(
                    &self.sort_buf,
                    [counts[0], counts[1]],
                    total,
                    parent_h,
                    self.min_leaf,
                    best_gain,
                )
            } else {
                scan_boundaries_many(
                    &self.sort_buf,
                    &counts,
                    total,
                    parent_h,
                    self.min_leaf,
                    best_gain,
                    &mut left_counts,
                    &mut right_counts,
                )
            };
            if let Some((gain, threshold)) = found {
                best_gain = gain;
                best = Some((f, threshold));
            }
        }

        let Some((feature, threshold)) = best else {
            let idx = self.nodes.len() as u32;
            self.nodes.push(TreeNode::Leaf(LeafData::Counts(counts)));
            return idx;
        };

        let base = feature as usize * self.n_rows;
        let mut left_rows = Vec::new();
        let mut right_rows = Vec::new();
        for &r in &rows {
            if (self.cols[base + r as usize] as f64) <= threshold {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }
        drop(rows);

        let idx = self.nodes.len() as u32;
        self.nodes.push(TreeNode::Leaf(LeafData::Counts(Vec::new())));
        let left = self.grow(left_rows, path * 2, depth + 1);
        let right = self.grow(right_rows, path * 2 + 1, depth + 1);
        self.nodes[idx as usize] = TreeNode::Split { feature, threshold, left, right };
        idx
    }

    /// Fallback scan for sort items carrying a row index instead of an
    /// inline `(weight, label)` payload.
    fn scan_rows(
        &self,
        counts: &[u64],
        total: u64,
        parent_h: f64,
        entering: f64,
        left_counts: &mut [u64],
        right_counts: &mut [u64],
    ) -> Option<(f64, f64)> {
        let mut best_gain = entering;
        let mut found = None;
        let mut prune_rhs = (parent_h - best_gain + GAIN_PRUNE_MARGIN) * total as f64;
        left_counts.fill(0);
        let mut left_w = 0u64;
        let mut prev_val = key_to_val((self.sort_buf[0] >> 32) as u32);
        for (i, &item) in self.sort_buf.iter().enumerate() {
            let val = key_to_val((item >> 32) as u32);
            if i > 0 && prev_val < val {
                let lw = left_w;
                let rw = total - lw;
                if lw >= self.min_leaf && rw >= self.min_leaf {
                    let mut lmax = 0u64;
                    let mut rmax = 0u64;
                    for k in 0..self.n_classes {
                        right_counts[k] = counts[k] - left_counts[k];
                        lmax = lmax.max(left_counts[k]);
                        rmax = rmax.max(right_counts[k]);
                    }
                    let floor = chord_floor((lw - lmax).min(lmax), lw)
                        + chord_floor((rw - rmax).min(rmax), rw);
                    if floor < prune_rhs {
                        let lh = entropy(left_counts);
                        let rh = entropy(right_counts);
                        let gain = parent_h
                            - (lw as f64 / total as f64) * lh
                            - (rw as f64 / total as f64) * rh;
                        if gain > best_gain {
                            best_gain = gain;
                            found = Some((gain, (prev_val as f64 + val as f64) / 2.0));
                            prune_rhs =
                                (parent_h - best_gain + GAIN_PRUNE_MARGIN) * total as f64;
                        }
                    }
                }
            }
            let r = (item & 0xFFFF_FFFF) as usize;
            left_counts[self.labels[r] as usize] += self.weights[r] as u64;
            left_w += self.weights[r] as u64;
            prev_val = val;
        }
        found
    }
}

fn transpose(x: &FeatureMatrix) -> Vec<f32> {
    let mut cols = vec![0.0f32; x.n_rows * x.n_cols];
    for r in 0..x.n_rows {
        let row = x.row(r);
        for (c, &v) in row.iter().enumerate() {
            cols[c * x.n_rows + r] = v;
        }
    }
    cols
}

fn grow_single_tree(
    x: &FeatureMatrix,
    cols: &[f32],
    weights: &[u32],
    mtry: usize,
    params: &ForestParams,
    tree_seed: u64,
) -> DecisionTree {
    let rows: Vec<u32> = (0..x.n_rows as u32)
        .filter(|&r| weights[r as usize] > 0)
        .collect();
    let packed = x.n_classes <= 256
        && weights.iter().copied().max().unwrap_or(0) < (1 << 24);
    let mut grower = SingleGrower {
        cols,
        n_rows: x.n_rows,
        n_cols: x.n_cols,
        n_classes: x.n_classes,
        labels: &x.labels,
        weights,
        mtry,
        max_depth: params.max_depth,
        min_split: params.min_samples_split as u64,
        min_leaf: params.min_samples_leaf as u64,
        tree_seed,
        nodes: Vec::new(),
        depth_seen: 0,
        sort_buf: Vec::new(),
        radix_scratch: Vec::new(),
        radix_hist: Vec::new(),
        packed,
    };
    grower.grow(rows, 1, 0);
    DecisionTree {
        nodes: grower.nodes,
        depth: grower.depth_seen,
        n_cols: x.n_cols,
        output_mode: OutputMode::Single,
    }
}

/// Best (feature, threshold, gain) over the candidate features, or `None`
/// when no split has positive gain. Thresholds are midpoints between
/// consecutive distinct sorted values; left = (value <= threshold).
pub fn best_split(
    rows: &[u32],
    x: &FeatureMatrix,
    candidates: &[u32],
) -> Option<(u32, f64, f64)> {
    assert!(rows.len() >= 2);
    let mut counts = vec![0u64; x.n_classes];
    for &r in rows {
        counts[x.labels[r as usize] as usize] += 1;
    }
    let total: u64 = counts.iter().sum();
    let parent_h = entropy(&counts);

    let mut sorted_candidates = candidates.to_vec();
    sorted_candidates.sort_unstable();
    let mut best_gain = 0.0f64;
    let mut best: Option<(u32, f64, f64)> = None;
    let mut left_counts = vec![0u64; x.n_classes];
    let mut right_counts = vec![0u64; x.n_classes];
    let mut buf: Vec<u64> = Vec::with_capacity(rows.len());

    for &f in &sorted_candidates {
        buf.clear();
        for &r in rows {
            let key = sort_key(x.row(r as usize)[f as usize]);
            buf.push(((key as u64) << 32) | r as u64);
        }
        buf.sort_unstable();

        left_counts.fill(0);
        let mut left_w = 0u64;
        let mut prev_val = key_to_val((buf[0] >> 32) as u32);
        for i in 0..buf.len() {
            let val = key_to_val((buf[i] >> 32) as u32);
            if i > 0 && prev_val < val {
                let lw = left_w;
                let rw = total - lw;
                for k in 0..x.n_classes {
                    right_counts[k] = counts[k] - left_counts[k];
                }
                let lh = entropy(&left_counts);
                let rh = entropy(&right_counts);
                let gain = parent_h
                    - (lw as f64 / total as f64) * lh
                    - (rw as f64 / total as f64) * rh;
                if gain > best_gain {
                    best_gain = gain;
                    best = Some((f, (prev_val as f64 + val as f64) / 2.0, gain));
                }
            }
            let r = (buf[i] & 0xFFFF_FFFF) as usize;
            left_counts[x.labels[r] as usize] += 1;
            left_w += 1;
            prev_val = val;
        }
    }
    best
}

/// Grow one tree on all rows of `x` (no bootstrap).
pub fn grow_tree(x: &FeatureMatrix, params: &ForestParams, tree_seed: u64) -> Result<DecisionTree> {
    if x.n_rows == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let mtry = params.resolve_mtry(x.n_cols)?;
    let cols = transpose(x);
    let weights = vec![1u32; x.n_rows];
    Ok(grow_single_tree(x, &cols, &weights, mtry, params, tree_seed))
}

fn bootstrap_weights(n_rows: usize, params: &ForestParams, t: usize) -> Vec<u32> {
    if !params.bootstrap {
        return vec![1; n_rows];
    }
    let mut rng = stream(params.seed, &[BOOT_SALT, t as u64]);
    let mut weights = vec![0u32; n_rows];
    for _ in 0..n_rows {
        weights[rng.random_range(0..n_rows)] += 1;
    }
    weights
}

/// Train a single-output forest for per-pixel classification.
pub fn fit_forest(x: &FeatureMatrix, params: &ForestParams) -> Result<RandomForest> {
    if x.n_rows == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let mtry = params.resolve_mtry(x.n_cols)?;
    let cols = transpose(x);
    let trees: Vec<DecisionTree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let weights = bootstrap_weights(x.n_rows, params, t);
            let tree_seed = derive_seed(params.seed, &[TREE_SALT, t as u64]);
            grow_single_tree(x, &cols, &weights, mtry, params, tree_seed)
        })
        .collect();
    let mut params = params.clone();
    params.mtry = Some(mtry);
    Ok(RandomForest {
        trees,
        params,
        n_classes: x.n_classes,
        n_cols: x.n_cols,
        output_mode: OutputMode::Single,
    })
}

/// Soft-vote class probabilities: the mean of each tree's normalized leaf
/// distribution. Sums to 1 within 1e-9.
pub fn predict_proba(forest: &RandomForest, x: &[f32]) -> Vec<f64> {
    assert_eq!(forest.output_mode, OutputMode::Single);
    assert_eq!(x.len(), forest.n_cols);
    let mut acc = vec![0.0f64; forest.n_classes];
    for tree in &forest.trees {
        match tree.leaf_for(x) {
            LeafData::Counts(counts) => {
                let total: u64 = counts.iter().sum();
                if total > 0 {
                    for (a, &c) in acc.iter_mut().zip(counts) {
                        *a += c as f64 / total as f64;
                    }
                }
            }
            LeafData::Classes(_) => unreachable!("single-output forest"),
        }
    }
    let n = forest.trees.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    acc
}

/// Argmax of [`predict_proba`]; ties go to the lowest class id.
pub fn predict(forest: &RandomForest, x: &[f32]) -> u8 {
    let proba = predict_proba(forest, x);
    let mut best = 0usize;
    for (k, &p) in proba.iter().enumerate() {
        if p > proba[best] {
            best = k;
        }
    }
    best as u8
}

/// Training data for the whole-image architecture: each row is a flattened
/// image, each target row a flattened mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiOutputDataset {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major, n_rows x n_cols.
    pub values: Vec<f32>,
    pub n_outputs: usize,
    pub n_classes: usize,
    /// Row-major, n_rows x n_outputs.
    pub targets: Vec<u16>,
}

impl MultiOutputDataset {
    pub fn new(
        n_cols: usize,
        values: Vec<f32>,
        n_outputs: usize,
        n_classes: usize,
        targets: Vec<u16>,
    ) -> Self {
        assert!(n_cols > 0 && n_outputs > 0 && n_classes >= 2);
        assert_eq!(values.len() % n_cols, 0);
        let n_rows = values.len() / n_cols;
        assert_eq!(targets.len(), n_rows * n_outputs);
        assert!(targets.iter().all(|&t| (t as usize) < n_classes));
        Self { n_rows, n_cols, values, n_outputs, n_classes, targets }
    }

    #[inline]
    fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.n_cols..(r + 1) * self.n_cols]
    }

    #[inline]
    fn target(&self, r: usize, p: usize) -> usize {
        self.targets[r * self.n_outputs + p] as usize
    }
}

struct MultiGrower<'a> {
    data: &'a MultiOutputDataset,
    weights: &'a [u32],
    /// xlogx[i] = i * log2(i), i up to the total bootstrap weight.
    xlogx: &'a [f64],
    mtry: usize,
    max_depth: usize,
    min_split: u64,
    min_leaf: u64,
    tree_seed: u64,
    nodes: Vec<TreeNode>,
    depth_seen: usize,
}

impl<'a> MultiGrower<'a> {
    /// Mean over outputs of per-output entropy, computed from a flat
    /// counts table (n_outputs x n_classes) with the identity
    /// H = (T log2 T - sum_c c log2 c) / T.
    fn mean_entropy(&self, counts: &[u32], total: u64) -> f64 {
        if total == 0 {
            return 0.0;
        }
        let p = self.data.n_outputs as f64;
        let mut sum = 0.0;
        for &c in counts {
            sum += self.xlogx[c as usize];
        }
        (p * self.xlogx[total as usize] - sum) / (total as f64 * p)
    }

    fn node_counts(&self, rows: &[u32]) -> (Vec<u32>, u64) {
        let k = self.data.n_classes;
        let mut counts = vec![0u32; self.data.n_outputs * k];
        let mut total = 0u64;
        for &r in rows {
            let w = self.weights[r as usize];
            total += w as u64;
            for p in 0..self.data.n_outputs {
                counts[p * k + self.data.target(r as usize, p)] += w;
            }
        }
        (counts, total)
    }

    fn grow(&mut self, rows: Vec<u32>, path: u64, depth: usize) -> u32 {
        self.depth_seen = self.depth_seen.max(depth);
        let k = self.data.n_classes;
        let (counts, total) = self.node_counts(&rows);
        let parent_h = self.mean_entropy(&counts, total);

        let n_outputs = self.data.n_outputs;
        let make_leaf = move |nodes: &mut Vec<TreeNode>, counts: &[u32]| -> u32 {
            let mut classes = Vec::with_capacity(n_outputs);
            for p in 0..n_outputs {
                let slice = &counts[p * k..(p + 1) * k];
                let mut best = 0usize;
                for (c, &v) in slice.iter().enumerate() {
                    if v > slice[best] {
                        best = c;
                    }
                }
                classes.push(best as u16);
            }
            let idx = nodes.len() as u32;
            nodes.push(TreeNode::Leaf(LeafData::Classes(classes)));
            idx
        };

        if depth == self.max_depth || total < self.min_split || parent_h == 0.0 {
            return make_leaf(&mut self.nodes, &counts);
        }

        let candidates = draw_candidates(self.data.n_cols, self.mtry, self.tree_seed, path);
        let mut best_gain = 0.0f64;
        let mut best: Option<(u32, f64)> = None;
        let mut order: Vec<(u32, u32)> = Vec::with_capacity(rows.len());
        let mut left = vec![0u32; counts.len()];
        let mut right = vec![0u32; counts.len()];

        for &f in &candidates {
            order.clear();
            for &r in &rows {
                order.push((sort_key(self.data.row(r as usize)[f as usize]), r));
            }
            order.sort_unstable();

            left.fill(0);
            let mut left_w = 0u64;
            let mut prev_val = key_to_val(order[0].0);
            for i in 0..order.len() {
                let val = key_to_val(order[i].0);
                if i > 0 && prev_val < val {
                    let lw = left_w;
                    let rw = total - lw;
                    if lw >= self.min_leaf && rw >= self.min_leaf {
                        for j in 0..counts.len() {
                            right[j] = counts[j] - left[j];
                        }
                        let lh = self.mean_entropy(&left, lw);
                        let rh = self.mean_entropy(&right, rw);
                        let gain = parent_h
                            - (lw as f64 / total as f64) * lh
                            - (rw as f64 / total as f64) * rh;
                        if gain > best_gain {
                            best_gain = gain;
                            best = Some((f, (prev_val as f64 + val as f64) / 2.0));
                        }
                    }
                }
                let r = order[i].1 as usize;
                let w = self.weights[r];
                left_w += w as u64;
                for p in 0..self.data.n_outputs {
                    left[p * k + self.data.target(r, p)] += w;
                }
                prev_val = val;
            }
        }

        let Some((feature, threshold)) = best else {
            return make_leaf(&mut self.nodes, &counts);
        };

        let mut left_rows = Vec::new();
        let mut right_rows = Vec::new();
        for &r in &rows {
            if (self.data.row(r as usize)[feature as usize] as f64) <= threshold {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }
        drop(rows);

        let idx = self.nodes.len() as u32;
        self.nodes.push(TreeNode::Leaf(LeafData::Classes(Vec::new())));
        let l = self.grow(left_rows, path * 2, depth + 1);
        let r = self.grow(right_rows, path * 2 + 1, depth + 1);
        self.nodes[idx as usize] = TreeNode::Split { feature, threshold, left: l, right: r };
        idx
    }
}

/// Train a multi-output forest mapping flattened images to flattened
/// masks. The split criterion is the unweighted mean of per-output
/// entropies; leaves store the per-output majority class.
pub fn fit_forest_multi(data: &MultiOutputDataset, params: &ForestParams) -> Result<RandomForest> {
    if data.n_rows == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    if data.n_rows < 2 {
        log::warn!(
            "whole-image forest trained on {} image(s); leaves will replay that mask",
            data.n_rows
        );
    }
    let mtry = params.resolve_mtry(data.n_cols)?;
    let mut xlogx = vec![0.0f64; data.n_rows + 1];
    for (i, v) in xlogx.iter_mut().enumerate().skip(1) {
        *v = i as f64 * (i as f64).log2();
    }
    let trees: Vec<DecisionTree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let weights = bootstrap_weights(data.n_rows, params, t);
            let tree_seed = derive_seed(params.seed, &[TREE_SALT, t as u64]);
            let rows: Vec<u32> = (0..data.n_rows as u32)
                .filter(|&r| weights[r as usize] > 0)
                .collect();
            let mut grower = MultiGrower {
                data,
                weights: &weights,
                xlogx: &xlogx,
                mtry,
                max_depth: params.max_depth,
                min_split: params.min_samples_split as u64,
                min_leaf: params.min_samples_leaf as u64,
                tree_seed,
                nodes: Vec::new(),
                depth_seen: 0,
            };
            grower.grow(rows, 1, 0);
            DecisionTree {
                nodes: grower.nodes,
                depth: grower.depth_seen,
                n_cols: data.n_cols,
                output_mode: OutputMode::Multi { n_outputs: data.n_outputs },
            }
        })
        .collect();
    let mut params = params.clone();
    params.mtry = Some(mtry);
    Ok(RandomForest {
        trees,
        params,
        n_classes: data.n_classes,
        n_cols: data.n_cols,
        output_mode: OutputMode::Multi { n_outputs: data.n_outputs },
    })
}

/// Per-output majority vote across trees (lowest class id on ties),
/// reshaped to `width` x `height`.
pub fn predict_multi(
    forest: &RandomForest,
    x: &[f32],
    width: usize,
    height: usize,
) -> Result<LabelMask> {
    let OutputMode::Multi { n_outputs } = forest.output_mode else {
        return Err(Error::ArchitectureMismatch {
            expected: "multi-output".into(),
            found: "single-output".into(),
        });
    };
    if x.len() != forest.n_cols {
        return Err(Error::DimensionMismatch(format!(
            "input has {} features, model expects {}",
            x.len(),
            forest.n_cols
        )));
    }
    if width * height != n_outputs {
        return Err(Error::DimensionMismatch(format!(
            "{width}x{height} does not match the model's {n_outputs} outputs"
        )));
    }
    assert!(forest.n_classes <= 256, "mask class ids are 8-bit");
    let k = forest.n_classes;
    let mut votes = vec![0u32; n_outputs * k];
    for tree in &forest.trees {
        match tree.leaf_for(x) {
            LeafData::Classes(classes) => {
                for (p, &c) in classes.iter().enumerate() {
                    votes[p * k + c as usize] += 1;
                }
            }
            LeafData::Counts(_) => unreachable!("multi-output forest"),
        }
    }
    let mut data = Vec::with_capacity(n_outputs);
    for p in 0..n_outputs {
        let slice = &votes[p * k..(p + 1) * k];
        let mut best = 0usize;
        for (c, &v) in slice.iter().enumerate() {
            if v > slice[best] {
                best = c;
            }
        }
        data.push(best as u8);
    }
    Ok(LabelMask::from_vec(width, height, k, data))
}

// ---------------------------------------------------------------------------
// Serialization: PFRF v1.
//
// All integers little-endian. Layout:
//   magic "PFRF", version u32,
//   params: n_trees u32, max_depth u32, mtry u32, bootstrap u8,
//           min_samples_split u32, min_samples_leaf u32, seed u64,
//   n_classes u16, output_mode u8 (0 single / 1 multi),
//   [n_outputs u32 when multi], n_cols u32, tree_count u32,
//   per tree: node_count u32, then nodes in preorder:
//     tag u8 = 0: split -> feature u32, threshold f64
//     tag u8 = 1: leaf  -> n_classes x u64 counts (single)
//                          n_outputs x u16 class ids (multi)
// ---------------------------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedData);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl RandomForest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PFRF_MAGIC);
        out.extend_from_slice(&PFRF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.n_trees as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.max_depth as u32).to_le_bytes());
        let mtry = self.params.mtry.expect("trained forests carry resolved mtry");
        out.extend_from_slice(&(mtry as u32).to_le_bytes());
        out.push(self.params.bootstrap as u8);
        out.extend_from_slice(&(self.params.min_samples_split as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.min_samples_leaf as u32).to_le_bytes());
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        out.extend_from_slice(&(self.n_classes as u16).to_le_bytes());
        match self.output_mode {
            OutputMode::Single => out.push(0),
            OutputMode::Multi { n_outputs } => {
                out.push(1);
                out.extend_from_slice(&(n_outputs as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.n_cols as u32).to_le_bytes());
        out.extend_from_slice(&(self.trees.len() as u32).to_le_bytes());
        for tree in &self.trees {
            out.extend_from_slice(&(tree.nodes.len() as u32).to_le_bytes());
            for node in &tree.nodes {
                match node {
                    TreeNode::Split { feature, threshold, .. } => {
                        out.push(0);
                        out.extend_from_slice(&feature.to_le_bytes());
                        out.extend_from_slice(&threshold.to_le_bytes());
                    }
                    TreeNode::Leaf(LeafData::Counts(counts)) => {
                        out.push(1);
                        for c in counts {
                            out.extend_from_slice(&c.to_le_bytes());
                        }
                    }
                    TreeNode::Leaf(LeafData::Classes(classes)) => {
                        out.push(1);
                        for c in classes {
                            out.extend_from_slice(&c.to_le_bytes());
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != PFRF_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != PFRF_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n_trees = r.u32()? as usize;
        let max_depth = r.u32()? as usize;
        let mtry = r.u32()? as usize;
        let bootstrap = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::MalformedModel(format!("bootstrap flag {b}"))),
        };
        let min_samples_split = r.u32()? as usize;
        let min_samples_leaf = r.u32()? as usize;
        let seed = r.u64()?;
        let n_classes = r.u16()? as usize;
        let output_mode = match r.u8()? {
            0 => OutputMode::Single,
            1 => OutputMode::Multi { n_outputs: r.u32()? as usize },
            b => return Err(Error::MalformedModel(format!("output mode {b}"))),
        };
        let n_cols = r.u32()? as usize;
        let tree_count = r.u32()? as usize;
        if tree_count != n_trees {
            return Err(Error::MalformedModel(format!(
                "tree count {tree_count} does not match params.n_trees {n_trees}"
            )));
        }

        fn parse_node(
            r: &mut Reader,
            nodes: &mut Vec<TreeNode>,
            declared: usize,
            n_cols: usize,
            n_classes: usize,
            output_mode: OutputMode,
            depth: usize,
            max_seen: &mut usize,
        ) -> Result<u32> {
            if nodes.len() >= declared {
                return Err(Error::MalformedModel("node count exceeded".into()));
            }
            *max_seen = (*max_seen).max(depth);
            let tag = r.u8()?;
            match tag {
                0 => {
                    let feature = r.u32()?;
                    if feature as usize >= n_cols {
                        return Err(Error::MalformedModel(format!(
                            "split feature {feature} out of range"
                        )));
                    }
                    let threshold = r.f64()?;
                    let idx = nodes.len() as u32;
                    nodes.push(TreeNode::Leaf(LeafData::Counts(Vec::new())));
                    let left = parse_node(
                        r, nodes, declared, n_cols, n_classes, output_mode, depth + 1, max_seen,
                    )?;
                    let right = parse_node(
                        r, nodes, declared, n_cols, n_classes, output_mode, depth + 1, max_seen,
                    )?;
                    nodes[idx as usize] = TreeNode::Split { feature, threshold, left, right };
                    Ok(idx)
                }
                1 => {
                    let idx = nodes.len() as u32;
                    match output_mode {
                        OutputMode::Single => {
                            let mut counts = Vec::with_capacity(n_classes);
                            for _ in 0..n_classes {
                                counts.push(r.u64()?);
                            }
                            nodes.push(TreeNode::Leaf(LeafData::Counts(counts)));
                        }
                        OutputMode::Multi { n_outputs } => {
                            let mut classes = Vec::with_capacity(n_outputs);
                            for _ in 0..n_outputs {
                                let c = r.u16()?;
                                if c as usize >= n_classes {
                                    return Err(Error::MalformedModel(format!(
                                        "leaf class {c} out of range"
                                    )));
                                }
                                classes.push(c);
                            }
                            nodes.push(TreeNode::Leaf(LeafData::Classes(classes)));
                        }
                    }
                    Ok(idx)
                }
                t => Err(Error::MalformedModel(format!("node tag {t}"))),
            }
        }

        let mut trees = Vec::with_capacity(tree_count);
        for _ in 0..tree_count {
            let node_count = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(node_count);
            let mut depth = 0usize;
            parse_node(
                &mut r, &mut nodes, node_count, n_cols, n_classes, output_mode, 0, &mut depth,
            )?;
            if nodes.len() != node_count {
                return Err(Error::MalformedModel(format!(
                    "tree declared {node_count} nodes, parsed {}",
                    nodes.len()
                )));
            }
            trees.push(DecisionTree { nodes, depth, n_cols, output_mode });
        }
        if r.pos != bytes.len() {
            return Err(Error::MalformedModel("trailing data after last tree".into()));
        }
        Ok(RandomForest {
            trees,
            params: ForestParams {
                n_trees,
                max_depth,
                mtry: Some(mtry),
                bootstrap,
                min_samples_split,
                min_samples_leaf,
                seed,
            },
            n_classes,
            n_cols,
            output_mode,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        file.write_all(&bytes)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Self::from_bytes(&bytes)
    }
}
