//! Analytic primitives and primitive trees with signed distance oracles.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

/// Two union children closer than this are treated as a tie.
pub const UNIQUE_MIN_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        radius: f64,
    },
    Box {
        half: [f64; 3],
    },
    /// Box with half extents `half + radius` and edges rounded by `radius`.
    RoundedBox {
        half: [f64; 3],
        radius: f64,
    },
    /// Capped cylinder whose axis is coordinate `axis` (0, 1 or 2).
    Cylinder {
        radius: f64,
        half_height: f64,
        axis: usize,
    },
    Ellipsoid {
        radii: [f64; 3],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Node {
    /// `sdf(x) = scale * prim((x - offset) / scale)`.
    Leaf {
        primitive: Primitive,
        #[serde(default)]
        offset: [f64; 3],
        #[serde(default = "one")]
        scale: f64,
    },
    Union {
        children: Vec<Node>,
    },
    Intersection {
        children: Vec<Node>,
    },
}

fn one() -> f64 {
    1.0
}

/// Signed distance, its gradient and whether every union/intersection along
/// the way had a unique minimiser.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdfSample {
    pub value: f64,
    pub grad: Vec3,
    pub unique: bool,
}

/// Axis-aligned bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&o.min),
            max: self.max.sup(&o.max),
        }
    }

    pub fn intersection(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.sup(&o.min),
            max: self.max.inf(&o.max),
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn surface_area(&self) -> f64 {
        let e = self.extent().map(|v| v.max(0.0));
        2.0 * (e.x * e.y + e.y * e.z + e.z * e.x)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn bounding_radius(&self) -> f64 {
        let mut r: f64 = 0.0;
        for i in 0..8 {
            let c = Vec3::new(
                if i & 1 == 0 { self.min.x } else { self.max.x },
                if i & 2 == 0 { self.min.y } else { self.max.y },
                if i & 4 == 0 { self.min.z } else { self.max.z },
            );
            r = r.max(c.norm());
        }
        r
    }
}

fn sign_or_one(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn box_sdf(p: &Vec3, half: &[f64; 3]) -> (f64, Vec3) {
    let q = Vec3::new(p.x.abs() - half[0], p.y.abs() - half[1], p.z.abs() - half[2]);
    let outside = q.map(|v| v.max(0.0));
    let on = outside.norm();
    if on > 0.0 {
        let g = Vec3::new(
            sign_or_one(p.x) * outside.x,
            sign_or_one(p.y) * outside.y,
            sign_or_one(p.z) * outside.z,
        ) / on;
        (on, g)
    } else {
        let (axis, qmax) = (0..3)
            .map(|i| (i, q[i]))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        let mut g = Vec3::zeros();
        g[axis] = sign_or_one(p[axis]);
        (qmax, g)
    }
}

fn cylinder_sdf(p: &Vec3, radius: f64, half_height: f64, axis: usize) -> (f64, Vec3) {
    let (i, j) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let rho = (p[i] * p[i] + p[j] * p[j]).sqrt();
    let radial_dir = if rho > 0.0 {
        let mut d = Vec3::zeros();
        d[i] = p[i] / rho;
        d[j] = p[j] / rho;
        d
    } else {
        let mut d = Vec3::zeros();
        d[i] = 1.0;
        d
    };
    let mut axial_dir = Vec3::zeros();
    axial_dir[axis] = sign_or_one(p[axis]);
    let dr = rho - radius;
    let da = p[axis].abs() - half_height;
    if dr > 0.0 || da > 0.0 {
        let a = dr.max(0.0);
        let b = da.max(0.0);
        let n = (a * a + b * b).sqrt();
        ((n), (radial_dir * a + axial_dir * b) / n)
    } else if dr > da {
        (dr, radial_dir)
    } else {
        (da, axial_dir)
    }
}

fn robust_length(v: &[f64]) -> f64 {
    let m = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if m == 0.0 {
        return 0.0;
    }
    m * v.iter().map(|x| (x / m).powi(2)).sum::<f64>().sqrt()
}

fn bisect<F: Fn(f64) -> f64>(mut s0: f64, mut s1: f64, f: F) -> f64 {
    let mut s = s0;
    for _ in 0..2048 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let g = f(s);
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

/// Closest point on the ellipse `(x/e0)² + (y/e1)² = 1` to `(y0, y1)`;
/// requires `e0 >= e1 > 0` and `y0, y1 >= 0`.
fn closest_on_ellipse(e0: f64, e1: f64, y0: f64, y1: f64) -> (f64, f64) {
    if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g != 0.0 {
                let r0 = (e0 / e1).powi(2);
                let n0 = r0 * z0;
                let s0 = z1 - 1.0;
                let s1 = if g < 0.0 { 0.0 } else { robust_length(&[n0, z1]) - 1.0 };
                let s = bisect(s0, s1, |s| (n0 / (s + r0)).powi(2) + (z1 / (s + 1.0)).powi(2) - 1.0);
                (r0 * y0 / (s + r0), y1 / (s + 1.0))
            } else {
                (y0, y1)
            }
        } else {
            (0.0, e1)
        }
    } else {
        let numer0 = e0 * y0;
        let denom0 = e0 * e0 - e1 * e1;
        if numer0 < denom0 {
            let xde0 = numer0 / denom0;
            (e0 * xde0, e1 * (1.0 - xde0 * xde0).max(0.0).sqrt())
        } else {
            (e0, 0.0)
        }
    }
}

/// Closest point on an axis-aligned ellipsoid with sorted semi-axes
/// `e0 >= e1 >= e2 > 0` to a point with non-negative coordinates.
fn closest_on_ellipsoid(e: [f64; 3], y: [f64; 3]) -> [f64; 3] {
    let [e0, e1, e2] = e;
    let [y0, y1, y2] = y;
    if y2 > 0.0 {
        if y1 > 0.0 {
            if y0 > 0.0 {
                let z = [y0 / e0, y1 / e1, y2 / e2];
                let g = z[0] * z[0] + z[1] * z[1] + z[2] * z[2] - 1.0;
                if g != 0.0 {
                    let r0 = (e0 / e2).powi(2);
                    let r1 = (e1 / e2).powi(2);
                    let n0 = r0 * z[0];
                    let n1 = r1 * z[1];
                    let s0 = z[2] - 1.0;
                    let s1 = if g < 0.0 {
                        0.0
                    } else {
                        robust_length(&[n0, n1, z[2]]) - 1.0
                    };
                    let s = bisect(s0, s1, |s| {
                        (n0 / (s + r0)).powi(2) + (n1 / (s + r1)).powi(2) + (z[2] / (s + 1.0)).powi(2) - 1.0
                    });
                    [r0 * y0 / (s + r0), r1 * y1 / (s + r1), y2 / (s + 1.0)]
                } else {
                    y
                }
            } else {
                let (x1, x2) = closest_on_ellipse(e1, e2, y1, y2);
                [0.0, x1, x2]
            }
        } else if y0 > 0.0 {
            let (x0, x2) = closest_on_ellipse(e0, e2, y0, y2);
            [x0, 0.0, x2]
        } else {
            [0.0, 0.0, e2]
        }
    } else {
        let denom0 = e0 * e0 - e2 * e2;
        let denom1 = e1 * e1 - e2 * e2;
        let numer0 = e0 * y0;
        let numer1 = e1 * y1;
        if numer0 < denom0 && numer1 < denom1 {
            let xde0 = numer0 / denom0;
            let xde1 = numer1 / denom1;
            let discr = 1.0 - xde0 * xde0 - xde1 * xde1;
            if discr > 0.0 {
                return [e0 * xde0, e1 * xde1, e2 * discr.sqrt()];
            }
        }
        let (x0, x1) = closest_on_ellipse(e0, e1, y0, y1);
        [x0, x1, 0.0]
    }
}

/// Exact signed distance to an axis-aligned ellipsoid, via the closest point.
fn ellipsoid_sdf(p: &Vec3, radii: &[f64; 3]) -> (f64, Vec3) {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| radii[b].partial_cmp(&radii[a]).unwrap().then(a.cmp(&b)));
    let e = [radii[order[0]], radii[order[1]], radii[order[2]]];
    let y = [p[order[0]].abs(), p[order[1]].abs(), p[order[2]].abs()];
    let xs = closest_on_ellipsoid(e, y);
    let mut closest = Vec3::zeros();
    for k in 0..3 {
        closest[order[k]] = sign_or_one(p[order[k]]) * xs[k];
    }
    let inside = (0..3).map(|i| (p[i] / radii[i]).powi(2)).sum::<f64>() < 1.0;
    let diff = p - closest;
    let d = diff.norm();
    let normal_at =
        |c: &Vec3| Vec3::new(c.x / radii[0].powi(2), c.y / radii[1].powi(2), c.z / radii[2].powi(2)).normalize();
    if d == 0.0 {
        return (0.0, normal_at(&closest));
    }
    if inside {
        (-d, -diff / d)
    } else {
        (d, diff / d)
    }
}

impl Primitive {
    pub fn sdf(&self, p: &Vec3) -> (f64, Vec3) {
        match self {
            Primitive::Sphere { radius } => {
                let n = p.norm();
                let g = if n > 0.0 { p / n } else { Vec3::new(0.0, 0.0, 1.0) };
                (n - radius, g)
            }
            Primitive::Box { half } => box_sdf(p, half),
            Primitive::RoundedBox { half, radius } => {
                let (d, g) = box_sdf(p, half);
                (d - radius, g)
            }
            Primitive::Cylinder {
                radius,
                half_height,
                axis,
            } => cylinder_sdf(p, *radius, *half_height, *axis),
            Primitive::Ellipsoid { radii } => ellipsoid_sdf(p, radii),
        }
    }

    pub fn aabb(&self) -> Aabb {
        let h = match self {
            Primitive::Sphere { radius } => Vec3::repeat(*radius),
            Primitive::Box { half } => Vec3::from(*half),
            Primitive::RoundedBox { half, radius } => Vec3::from(*half).add_scalar(*radius),
            Primitive::Cylinder {
                radius,
                half_height,
                axis,
            } => {
                let mut h = Vec3::repeat(*radius);
                h[*axis] = *half_height;
                h
            }
            Primitive::Ellipsoid { radii } => Vec3::from(*radii),
        };
        Aabb { min: -h, max: h }
    }

    pub fn validate(&self) -> bool {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        match self {
            Primitive::Sphere { radius } => pos(*radius),
            Primitive::Box { half } => half.iter().all(|v| pos(*v)),
            Primitive::RoundedBox { half, radius } => half.iter().all(|v| pos(*v)) && pos(*radius),
            Primitive::Cylinder {
                radius,
                half_height,
                axis,
            } => pos(*radius) && pos(*half_height) && *axis < 3,
            Primitive::Ellipsoid { radii } => radii.iter().all(|v| pos(*v)),
        }
    }
}

impl Node {
    pub fn leaf(primitive: Primitive, offset: [f64; 3]) -> Node {
        Node::Leaf {
            primitive,
            offset,
            scale: 1.0,
        }
    }

    pub fn eval(&self, p: &Vec3) -> SdfSample {
        match self {
            Node::Leaf {
                primitive,
                offset,
                scale,
            } => {
                let local = (p - Vec3::from(*offset)) / *scale;
                let (d, g) = primitive.sdf(&local);
                SdfSample {
                    value: d * scale,
                    grad: g,
                    unique: true,
                }
            }
            Node::Union { children } => combine(children, p, true),
            Node::Intersection { children } => combine(children, p, false),
        }
    }

    pub fn aabb(&self) -> Aabb {
        match self {
            Node::Leaf {
                primitive,
                offset,
                scale,
            } => {
                let b = primitive.aabb();
                let o = Vec3::from(*offset);
                Aabb {
                    min: b.min * *scale + o,
                    max: b.max * *scale + o,
                }
            }
            Node::Union { children } => children
                .iter()
                .map(Node::aabb)
                .reduce(|a, b| a.union(&b))
                .expect("union has children"),
            Node::Intersection { children } => children
                .iter()
                .map(Node::aabb)
                .reduce(|a, b| a.intersection(&b))
                .expect("intersection has children"),
        }
    }

    /// Leaves with their accumulated transforms.
    pub fn leaves(&self) -> Vec<&Node> {
        match self {
            Node::Leaf { .. } => vec![self],
            Node::Union { children } | Node::Intersection { children } => {
                children.iter().flat_map(Node::leaves).collect()
            }
        }
    }

    pub fn validate(&self) -> bool {
        match self {
            Node::Leaf { primitive, scale, .. } => primitive.validate() && scale.is_finite() && *scale > 0.0,
            Node::Union { children } | Node::Intersection { children } => {
                !children.is_empty() && children.iter().all(Node::validate)
            }
        }
    }

    /// Uniformly rescale and shift the whole tree: `x ↦ s x + t`.
    pub fn transformed(&self, s: f64, t: &Vec3) -> Node {
        match self {
            Node::Leaf {
                primitive,
                offset,
                scale,
            } => {
                let o = Vec3::from(*offset) * s + t;
                Node::Leaf {
                    primitive: primitive.clone(),
                    offset: [o.x, o.y, o.z],
                    scale: scale * s,
                }
            }
            Node::Union { children } => Node::Union {
                children: children.iter().map(|c| c.transformed(s, t)).collect(),
            },
            Node::Intersection { children } => Node::Intersection {
                children: children.iter().map(|c| c.transformed(s, t)).collect(),
            },
        }
    }
}

fn combine(children: &[Node], p: &Vec3, take_min: bool) -> SdfSample {
    let mut best: Option<SdfSample> = None;
    let mut runner_up = f64::INFINITY;
    for c in children {
        let s = c.eval(p);
        let key = if take_min { s.value } else { -s.value };
        match &best {
            None => best = Some(s),
            Some(b) => {
                let bkey = if take_min { b.value } else { -b.value };
                if key < bkey {
                    runner_up = bkey;
                    best = Some(s);
                } else {
                    runner_up = runner_up.min(key);
                }
            }
        }
    }
    let mut b = best.expect("combination has children");
    let bkey = if take_min { b.value } else { -b.value };
    b.unique = b.unique && runner_up - bkey > UNIQUE_MIN_TOL;
    b
}

/// One member of an analytic shape family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticShape {
    pub category: String,
    /// Family parameters the shape was generated from.
    pub params: Vec<f64>,
    pub root: Node,
}

impl AnalyticShape {
    pub fn new(category: impl Into<String>, params: Vec<f64>, root: Node) -> Self {
        AnalyticShape {
            category: category.into(),
            params,
            root,
        }
    }

    pub fn sphere(radius: f64) -> Self {
        AnalyticShape::new(
            "sphere",
            vec![radius],
            Node::leaf(Primitive::Sphere { radius }, [0.0; 3]),
        )
    }

    pub fn sdf(&self, x: &Vec3) -> f64 {
        self.root.eval(x).value
    }

    pub fn eval(&self, x: &Vec3) -> SdfSample {
        self.root.eval(x)
    }

    pub fn aabb(&self) -> Aabb {
        self.root.aabb()
    }
}

impl crate::fields::SdfField for AnalyticShape {
    fn eval(&self, x: [f64; 3]) -> crate::Result<crate::autodiff::FieldEval> {
        let s = self.root.eval(&Vec3::from(x));
        Ok(crate::autodiff::FieldEval {
            value: s.value,
            spatial_grad: [s.grad.x, s.grad.y, s.grad.z],
        })
    }
}

/// Analytic signed distance of `shape` at `x`.
pub fn analytic_sdf(shape: &AnalyticShape, x: &Vec3) -> f64 {
    shape.sdf(x)
}
