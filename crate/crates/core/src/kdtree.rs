//! Exact nearest-neighbour search over 3D points.

/// Squared Euclidean distance, evaluated in a fixed order so every caller
/// gets bit-identical values.
#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Clone, Debug)]
struct Node {
    /// Index into `points`.
    point: usize,
    axis: u8,
    left: Option<u32>,
    right: Option<u32>,
}

/// Static k-d tree over a point set.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    nodes: Vec<Node>,
    root: Option<u32>,
}

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build(&mut idx, 0);
        tree
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> Option<u32> {
        if idx.is_empty() {
            return None;
        }
        // split on the axis of largest spread
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in idx.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(depth % 3);
        let mid = idx.len() / 2;
        let pts = &self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let node = self.nodes.len() as u32;
        self.nodes.push(Node {
            point: idx[mid],
            axis: axis as u8,
            left: None,
            right: None,
        });
        let (l, r) = idx.split_at_mut(mid);
        let left = self.build(l, depth + 1);
        let right = self.build(&mut r[1..], depth + 1);
        self.nodes[node as usize].left = left;
        self.nodes[node as usize].right = right;
        Some(node)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Index and squared distance of the nearest point; ties go to the
    /// lowest index. `None` for an empty tree.
    pub fn nearest(&self, q: &[f64; 3]) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root, q, &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    fn search(&self, node: Option<u32>, q: &[f64; 3], best: &mut (usize, f64)) {
        let Some(n) = node else { return };
        let n = &self.nodes[n as usize];
        let p = &self.points[n.point];
        let d = dist2(p, q);
        if d < best.1 || (d == best.1 && n.point < best.0) {
            *best = (n.point, d);
        }
        let axis = n.axis as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, best);
        if diff * diff <= best.1 {
            self.search(far, q, best);
        }
    }
}

/// O(N) reference search with the same tie rule as [`KdTree::nearest`].
pub fn brute_force_nearest(points: &[[f64; 3]], q: &[f64; 3]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, q);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}
