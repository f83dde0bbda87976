//! Minimal k-d tree for exact k-nearest-neighbor queries over 3D points.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::cloud::{dist_sq, Point3};

pub struct KdTree {
    points: Vec<Point3>,
    /// Permutation of point indices in nested median layout: the subtree
    /// over `order[lo..hi]` splits at the median element.
    order: Vec<u32>,
}

struct HeapEntry(f64);

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = Self {
            points: points.to_vec(),
            order: Vec::new(),
        };
        if !points.is_empty() {
            let len = order.len();
            tree.split(&mut order, 0, len, 0);
        }
        tree.order = order;
        tree
    }

    fn split(&self, order: &mut [u32], lo: usize, hi: usize, depth: usize) {
        if hi - lo <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = (lo + hi) / 2;
        order[lo..hi].select_nth_unstable_by((hi - lo) / 2, |&a, &b| {
            self.points[a as usize][axis].total_cmp(&self.points[b as usize][axis])
        });
        self.split(order, lo, mid, depth + 1);
        self.split(order, mid + 1, hi, depth + 1);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distances to the k nearest points, ascending. Panics if
    /// `k` exceeds the point count.
    pub fn knn_sq(&self, query: Point3, k: usize) -> Vec<f64> {
        assert!(k >= 1 && k <= self.points.len(), "k out of range");
        let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
        self.search(query, k, 0, self.order.len(), 0, &mut heap);
        let mut out: Vec<f64> = heap.into_iter().map(|e| e.0).collect();
        out.sort_by(f64::total_cmp);
        out
    }

    /// Squared distance to the single nearest point.
    pub fn nearest_sq(&self, query: Point3) -> f64 {
        self.knn_sq(query, 1)[0]
    }

    fn search(
        &self,
        query: Point3,
        k: usize,
        lo: usize,
        hi: usize,
        depth: usize,
        heap: &mut BinaryHeap<HeapEntry>,
    ) {
        if lo >= hi {
            return;
        }
        let axis = depth % 3;
        let mid = (lo + hi) / 2;
        let point = self.points[self.order[mid] as usize];

        let d = dist_sq(query, point);
        if heap.len() < k {
            heap.push(HeapEntry(d));
        } else if d < heap.peek().unwrap().0 {
            heap.pop();
            heap.push(HeapEntry(d));
        }

        let diff = query[axis] - point[axis];
        let (near_lo, near_hi, far_lo, far_hi) = if diff <= 0.0 {
            (lo, mid, mid + 1, hi)
        } else {
            (mid + 1, hi, lo, mid)
        };
        self.search(query, k, near_lo, near_hi, depth + 1, heap);
        let worst = if heap.len() < k {
            f64::INFINITY
        } else {
            heap.peek().unwrap().0
        };
        if diff * diff <= worst {
            self.search(query, k, far_lo, far_hi, depth + 1, heap);
        }
    }
}
