//! Spatial acceleration: a triangle BVH for closest-point queries and a kd-tree for
//! nearest-vertex queries. Both break distance ties toward the lowest index so results
//! equal an exhaustive scan exactly.

use crate::geom::{closest_on_triangle, Aabb, Vec3};
use crate::headmodel::Mesh;

/// Closest point on a mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceHit {
    pub triangle: usize,
    /// Weights of the triangle's corners; non-negative and summing to 1.
    pub barycentric: [f64; 3],
    pub point: Vec3,
    /// Unit face normal of the hit triangle.
    pub normal: Vec3,
    pub distance: f64,
}

const LEAF_SIZE: usize = 4;

#[derive(Clone, Debug)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Bounding-volume hierarchy over a mesh's triangles (median split on the longest axis).
#[derive(Clone, Debug)]
pub struct TriangleBvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
    corners: Vec<[Vec3; 3]>,
}

impl TriangleBvh {
    pub fn build(mesh: &Mesh) -> Self {
        let corners: Vec<[Vec3; 3]> = (0..mesh.triangles.len()).map(|t| mesh.corners(t).map(|p| *p)).collect();
        let boxes: Vec<Aabb> = corners.iter().map(|c| Aabb::from_points(c.iter())).collect();
        let centroids: Vec<Vec3> = corners.iter().map(|c| (c[0] + c[1] + c[2]) / 3.0).collect();
        let mut order: Vec<usize> = (0..corners.len()).collect();
        let mut nodes = Vec::with_capacity(2 * corners.len() / LEAF_SIZE + 1);
        if !order.is_empty() {
            build_node(&mut nodes, &mut order, 0, corners.len(), &boxes, &centroids);
        }
        Self { nodes, order, corners }
    }

    pub fn triangle_count(&self) -> usize {
        self.corners.len()
    }

    /// Globally nearest triangle to `x`. `None` only for an empty mesh.
    pub fn closest(&self, x: &Vec3) -> Option<SurfaceHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, usize::MAX, [0.0; 3]);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match &self.nodes[n] {
                Node::Leaf { bounds, start, end } => {
                    if bounds.dist2(x) > best.0 {
                        continue;
                    }
                    for &t in &self.order[*start..*end] {
                        let [a, b, c] = &self.corners[t];
                        let bc = closest_on_triangle(x, a, b, c);
                        let p = a * bc[0] + b * bc[1] + c * bc[2];
                        let d2 = (p - x).norm_squared();
                        if d2 < best.0 || (d2 == best.0 && t < best.1) {
                            best = (d2, t, bc);
                        }
                    }
                }
                Node::Inner { bounds, left, right } => {
                    if bounds.dist2(x) > best.0 {
                        continue;
                    }
                    let dl = self.nodes[*left].bounds().dist2(x);
                    let dr = self.nodes[*right].bounds().dist2(x);
                    // visit the nearer child first
                    if dl <= dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        Some(self.hit(x, best.1, best.2))
    }

    fn hit(&self, x: &Vec3, t: usize, bc: [f64; 3]) -> SurfaceHit {
        let [a, b, c] = &self.corners[t];
        let point = a * bc[0] + b * bc[1] + c * bc[2];
        SurfaceHit {
            triangle: t,
            barycentric: bc,
            point,
            normal: crate::geom::triangle_normal(a, b, c),
            distance: (point - x).norm(),
        }
    }

    /// Exhaustive O(T) reference search with the same tie-breaking.
    pub fn closest_exhaustive(&self, x: &Vec3) -> Option<SurfaceHit> {
        closest_point_exhaustive_corners(&self.corners, x).map(|(t, bc)| self.hit(x, t, bc))
    }
}

fn closest_point_exhaustive_corners(corners: &[[Vec3; 3]], x: &Vec3) -> Option<(usize, [f64; 3])> {
    let mut best: Option<(f64, usize, [f64; 3])> = None;
    for (t, [a, b, c]) in corners.iter().enumerate() {
        let bc = closest_on_triangle(x, a, b, c);
        let p = a * bc[0] + b * bc[1] + c * bc[2];
        let d2 = (p - x).norm_squared();
        if best.is_none_or(|(bd, _, _)| d2 < bd) {
            best = Some((d2, t, bc));
        }
    }
    best.map(|(_, t, bc)| (t, bc))
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [usize],
    start: usize,
    end: usize,
    boxes: &[Aabb],
    centroids: &[Vec3],
) -> usize {
    let bounds = order[start..end].iter().fold(Aabb::empty(), |acc, &t| acc.merge(&boxes[t]));
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { bounds, start, end });
        return id;
    }
    let cb = Aabb::from_points(order[start..end].iter().map(|&t| &centroids[t]));
    let ext = cb.extent();
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = (start + end) / 2;
    order[start..end].sort_by(|&a, &b| {
        centroids[a][axis]
            .total_cmp(&centroids[b][axis])
            .then(a.cmp(&b))
    });
    nodes.push(Node::Leaf { bounds, start, end }); // placeholder
    let left = build_node(nodes, order, start, mid, boxes, centroids);
    let right = build_node(nodes, order, mid, end, boxes, centroids);
    nodes[id] = Node::Inner { bounds, left, right };
    id
}

/// Exhaustive closest-point search over a mesh, independent of any acceleration structure.
pub fn closest_point_exhaustive(mesh: &Mesh, x: &Vec3) -> Option<SurfaceHit> {
    let corners: Vec<[Vec3; 3]> = (0..mesh.triangles.len()).map(|t| mesh.corners(t).map(|p| *p)).collect();
    closest_point_exhaustive_corners(&corners, x).map(|(t, bc)| {
        let [a, b, c] = &corners[t];
        let point = a * bc[0] + b * bc[1] + c * bc[2];
        SurfaceHit {
            triangle: t,
            barycentric: bc,
            point,
            normal: crate::geom::triangle_normal(a, b, c),
            distance: (point - x).norm(),
        }
    })
}

/// Closest point on a mesh, BVH-accelerated. Builds the hierarchy per call; reuse a
/// [`TriangleBvh`] for repeated queries.
pub fn closest_point_on_mesh(mesh: &Mesh, x: &Vec3) -> Option<SurfaceHit> {
    TriangleBvh::build(mesh).closest(x)
}

/// kd-tree over a subset of points, answering nearest-point queries.
#[derive(Clone, Debug)]
pub struct PointIndex {
    /// (point, id) in tree order.
    items: Vec<(Vec3, u32)>,
    /// Split axis per implicit node; a node spans `items[lo..hi]` with pivot at the midpoint.
    axes: Vec<u8>,
}

impl PointIndex {
    pub fn build(points: impl IntoIterator<Item = (Vec3, u32)>) -> Self {
        let mut items: Vec<(Vec3, u32)> = points.into_iter().collect();
        let mut axes = vec![0u8; items.len()];
        let n = items.len();
        build_kd(&mut items, &mut axes, 0, n);
        Self { items, axes }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Id of the nearest point (lowest id among exact ties).
    pub fn nearest(&self, x: &Vec3) -> Option<u32> {
        if self.items.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, u32::MAX);
        self.search(x, 0, self.items.len(), &mut best);
        Some(best.1)
    }

    fn search(&self, x: &Vec3, lo: usize, hi: usize, best: &mut (f64, u32)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let (p, id) = &self.items[mid];
        let d2 = (p - x).norm_squared();
        if d2 < best.0 || (d2 == best.0 && *id < best.1) {
            *best = (d2, *id);
        }
        let axis = self.axes[mid] as usize;
        let diff = x[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(x, near.0, near.1, best);
        if diff * diff <= best.0 {
            self.search(x, far.0, far.1, best);
        }
    }
}

fn build_kd(items: &mut [(Vec3, u32)], axes: &mut [u8], lo: usize, hi: usize) {
    if hi - lo <= 1 {
        return;
    }
    let b = Aabb::from_points(items[lo..hi].iter().map(|(p, _)| p));
    let e = b.extent();
    let axis = if e.x >= e.y && e.x >= e.z {
        0
    } else if e.y >= e.z {
        1
    } else {
        2
    };
    let mid = (lo + hi) / 2;
    items[lo..hi].select_nth_unstable_by(mid - lo, |a, b| a.0[axis].total_cmp(&b.0[axis]).then(a.1.cmp(&b.1)));
    axes[mid] = axis as u8;
    build_kd(items, axes, lo, mid);
    build_kd(items, axes, mid + 1, hi);
}
