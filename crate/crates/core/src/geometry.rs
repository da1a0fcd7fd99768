//! Point sets, pairwise distances and K-nearest-neighbor patches.
//!
//! Neighbor rows are ordered by squared Euclidean distance with ties broken
//! by ascending point index, and every point is its own first neighbor. The
//! brute-force and kd-tree searches share [`squared_distance`], so both
//! produce bit-identical index matrices.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point set must be [M, C_s] with M >= 1 and C_s in 1..=3, got {0:?}")]
    BadShape(Vec<usize>),
    #[error("point set contains a non-finite coordinate")]
    NonFinite,
    #[error("patch size K={k} must be in 1..={m}")]
    BadPatchSize { k: usize, m: usize },
    #[error("knn index entry {index} out of range for {m} points")]
    IndexOutOfRange { index: usize, m: usize },
}

/// `M × C_s` coordinates of a discretized domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    coords: Tensor,
}

impl PointSet {
    pub fn new(coords: Tensor) -> Result<Self, GeometryError> {
        match coords.shape() {
            &[m, cs] if m >= 1 && (1..=3).contains(&cs) => {}
            s => return Err(GeometryError::BadShape(s.to_vec())),
        }
        if !coords.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { coords })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self, GeometryError> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(GeometryError::BadShape(vec![points.len(), dim]));
        }
        let data = points.iter().flatten().copied().collect();
        let coords = Tensor::new(&[points.len(), dim], data)
            .map_err(|_| GeometryError::BadShape(vec![points.len(), dim]))?;
        Self::new(coords)
    }

    /// Regular `g × g` grid on the unit square; point `iy * g + ix` sits at
    /// `(ix / (g-1), iy / (g-1))`.
    pub fn unit_grid(g: usize) -> Result<Self, GeometryError> {
        if g < 2 {
            return Err(GeometryError::BadShape(vec![g * g, 2]));
        }
        let h = 1.0 / (g - 1) as f64;
        let mut data = Vec::with_capacity(2 * g * g);
        for iy in 0..g {
            for ix in 0..g {
                data.push(ix as f64 * h);
                data.push(iy as f64 * h);
            }
        }
        Self::new(Tensor::new(&[g * g, 2], data).expect("grid shape"))
    }

    pub fn len(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.coords.row(i)
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    /// Point set with rows reordered: new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let data = perm.iter().flat_map(|&p| self.point(p).to_vec()).collect();
        Self {
            coords: Tensor::new(self.coords.shape(), data).expect("permutation length"),
        }
    }
}

/// Shared distance kernel; summation order is fixed so every caller sees the
/// same bits.
#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Dense `M × M` Euclidean distance matrix.
pub fn pairwise_distances(points: &PointSet) -> Tensor {
    let m = points.len();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let d = squared_distance(points.point(i), points.point(j)).sqrt();
            out[i * m + j] = d;
            out[j * m + i] = d;
        }
    }
    Tensor::new(&[m, m], out).expect("square matrix")
}

/// `M × K` neighbor indices; row `a` starts with `a`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnIndex {
    idx: Vec<usize>,
    m: usize,
    k: usize,
}

impl KnnIndex {
    pub fn from_rows(m: usize, k: usize, idx: Vec<usize>) -> Result<Self, GeometryError> {
        if k == 0 || k > m || idx.len() != m * k {
            return Err(GeometryError::BadPatchSize { k, m });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(GeometryError::IndexOutOfRange { index: bad, m });
        }
        Ok(Self { idx, m, k })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, a: usize) -> &[usize] {
        &self.idx[a * self.k..(a + 1) * self.k]
    }

    /// Row-major flat view, length `M * K`.
    pub fn as_slice(&self) -> &[usize] {
        &self.idx
    }

    /// Index matrix for the point set reordered by `perm` (new row `i` is
    /// old row `perm[i]`), with entries relabeled to the new numbering.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.m, "permutation length");
        let mut inv = vec![0; self.m];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let idx = perm
            .iter()
            .flat_map(|&old| self.row(old).iter().map(|&j| inv[j]))
            .collect();
        Self {
            idx,
            m: self.m,
            k: self.k,
        }
    }
}

fn check_k(points: &PointSet, k: usize) -> Result<(), GeometryError> {
    if k == 0 || k > points.len() {
        return Err(GeometryError::BadPatchSize { k, m: points.len() });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    d2: f64,
    idx: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.idx.cmp(&other.idx))
    }
}

/// Exhaustive search over all pairs.
pub fn knn_indices(points: &PointSet, k: usize) -> Result<KnnIndex, GeometryError> {
    check_k(points, k)?;
    let m = points.len();
    let mut idx = Vec::with_capacity(m * k);
    let mut cands: Vec<Candidate> = Vec::with_capacity(m);
    for a in 0..m {
        idx.push(a);
        if k == 1 {
            continue;
        }
        cands.clear();
        let pa = points.point(a);
        cands.extend((0..m).filter(|&j| j != a).map(|j| Candidate {
            d2: squared_distance(pa, points.point(j)),
            idx: j,
        }));
        cands.select_nth_unstable(k - 2);
        let best = &mut cands[..k - 1];
        best.sort_unstable();
        idx.extend(best.iter().map(|c| c.idx));
    }
    Ok(KnnIndex { idx, m, k })
}

const LEAF_SIZE: usize = 8;

enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static kd-tree over a point set.
struct KdTree<'p> {
    points: &'p PointSet,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl<'p> KdTree<'p> {
    fn build(points: &'p PointSet) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        tree.build_node(0, points.len());
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let dim = self.points.dim();
        let axis = (0..dim)
            .map(|ax| {
                let (lo, hi) = self.order[start..end].iter().fold(
                    (f64::INFINITY, f64::NEG_INFINITY),
                    |(lo, hi), &i| {
                        let v = self.points.point(i)[ax];
                        (lo.min(v), hi.max(v))
                    },
                );
                (ax, hi - lo)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts.point(a)[axis]
                .total_cmp(&pts.point(b)[axis])
                .then(a.cmp(&b))
        });
        let value = pts.point(self.order[mid])[axis];
        let slot = self.nodes.len();
        self.nodes.push(KdNode::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[slot] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    /// Best `want` points other than `exclude`, in (distance, index) order.
    fn query(&self, q: &[f64], exclude: usize, want: usize, heap: &mut BinaryHeap<Candidate>) {
        heap.clear();
        if want > 0 {
            self.visit(0, q, exclude, want, heap);
        }
    }

    fn visit(&self, node: usize, q: &[f64], exclude: usize, want: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &j in &self.order[start..end] {
                    if j == exclude {
                        continue;
                    }
                    let cand = Candidate {
                        d2: squared_distance(q, self.points.point(j)),
                        idx: j,
                    };
                    if heap.len() < want {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("non-empty heap") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.visit(near, q, exclude, want, heap);
                // Every point on the far side is at least |diff| away along
                // `axis`; rounding is monotone so the bound stays valid in f64.
                let bound = diff * diff;
                if heap.len() < want || bound <= heap.peek().expect("non-empty heap").d2 {
                    self.visit(far, q, exclude, want, heap);
                }
            }
        }
    }
}

/// Same result as [`knn_indices`], using a kd-tree instead of all pairs.
pub fn knn_indices_accelerated(points: &PointSet, k: usize) -> Result<KnnIndex, GeometryError> {
    check_k(points, k)?;
    let m = points.len();
    let tree = KdTree::build(points);
    let mut heap = BinaryHeap::with_capacity(k);
    let mut best = Vec::with_capacity(k);
    let mut idx = Vec::with_capacity(m * k);
    for a in 0..m {
        idx.push(a);
        tree.query(points.point(a), a, k - 1, &mut heap);
        best.clear();
        best.extend(heap.drain());
        best.sort_unstable();
        idx.extend(best.iter().map(|c| c.idx));
    }
    Ok(KnnIndex { idx, m, k })
}
