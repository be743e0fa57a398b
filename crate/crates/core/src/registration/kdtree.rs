use std::cmp::Ordering;

/// Exact nearest-neighbour search over fixed-width rows.
///
/// Queries backtrack into every subtree whose splitting plane is not
/// strictly farther than the current best, so ties resolve to the lowest
/// point index exactly as a linear scan would.
#[derive(Clone, Debug)]
pub struct KdTree {
    dim: usize,
    data: Vec<f64>,
    nodes: Vec<Node>,
    order: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

const LEAF: usize = 8;

impl KdTree {
    /// Builds from row-major `data` with `dim` columns.
    pub fn new(data: Vec<f64>, dim: usize) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim), "row width mismatch");
        let n = data.len() / dim;
        let mut tree = Self {
            dim,
            data,
            nodes: Vec::new(),
            order: (0..n).collect(),
        };
        if n > 0 {
            tree.build(0, n);
        }
        tree
    }

    pub fn from_points(points: &[[f64; 3]]) -> Self {
        Self::new(points.iter().flatten().copied().collect(), 3)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = (0..self.dim)
            .map(|a| {
                let (lo, hi) =
                    self.order[start..end]
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                            let v = self.data[i * self.dim + a];
                            (lo.min(v), hi.max(v))
                        });
                (a, hi - lo)
            })
            .max_by(|x, y| {
                x.1.partial_cmp(&y.1)
                    .unwrap_or(Ordering::Equal)
                    .then(y.0.cmp(&x.0))
            })
            .map_or(0, |(a, _)| a);
        let mid = (start + end) / 2;
        let (dim, data) = (self.dim, &self.data);
        self.order[start..end].select_nth_unstable_by(mid - start, |&i, &j| {
            data[i * dim + axis].total_cmp(&data[j * dim + axis])
        });
        let value = self.data[self.order[mid] * self.dim + axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Index and squared distance of the nearest row.
    pub fn nearest(&self, query: &[f64]) -> Option<(usize, f64)> {
        if self.is_empty() {
            return None;
        }
        assert_eq!(query.len(), self.dim, "query width mismatch");
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, query, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: &[f64], best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d: f64 = self.row(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}
