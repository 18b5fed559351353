//! Exact k-nearest-neighbor queries over point sets.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

/// kd-tree over a fixed point set. Results are ordered by ascending squared
/// distance with ties broken by index, so they match a brute-force scan
/// exactly.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    root: Node,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl NeighborIndex {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = build(points, &mut order, 0);
        NeighborIndex {
            points: points.to_vec(),
            order,
            root,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }

    /// The `k` nearest points to point `g`, excluding `g` itself.
    pub fn query(&self, g: usize, k: usize) -> Vec<usize> {
        self.nearest(&self.points[g], k, Some(g)).into_iter().map(|(i, _)| i).collect()
    }

    /// The `k` nearest points to `p` as `(index, squared distance)`,
    /// optionally skipping one index.
    pub fn nearest(&self, p: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(&self.root, p, k, exclude, &mut heap);
        heap.into_sorted_vec().into_iter().map(|c| (c.index, c.dist2)).collect()
    }

    fn search(
        &self,
        node: &Node,
        p: &Vector3<f64>,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        dist2: (self.points[i] - p).norm_squared(),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("non-empty") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = p[*axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, p, k, exclude, heap);
                // Equal distances must still be visited for the index tie-break.
                if heap.len() < k || diff * diff <= heap.peek().expect("non-empty").dist2 {
                    self.search(far, p, k, exclude, heap);
                }
            }
        }
    }
}

fn build(points: &[Vector3<f64>], order: &mut [usize], offset: usize) -> Node {
    let n = order.len();
    if n <= LEAF_SIZE {
        return Node::Leaf {
            start: offset,
            end: offset + n,
        };
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in order.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    if hi[axis] <= lo[axis] {
        return Node::Leaf {
            start: offset,
            end: offset + n,
        };
    }
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |a, b| points[*a][axis].total_cmp(&points[*b][axis]));
    let value = points[order[mid]][axis];
    let (l, r) = order.split_at_mut(mid);
    Node::Split {
        axis,
        value,
        left: Box::new(build(points, l, offset)),
        right: Box::new(build(points, r, offset + mid)),
    }
}

/// O(N) scan with the same ordering contract as [`NeighborIndex::query`].
pub fn brute_force_knn(points: &[Vector3<f64>], g: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<Candidate> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != g)
        .map(|(i, q)| Candidate {
            dist2: (q - points[g]).norm_squared(),
            index: i,
        })
        .collect();
    all.sort();
    all.into_iter().take(k).map(|c| c.index).collect()
}
