use rand::Rng;

use super::shapes::{AnalyticShape, Node, Primitive};
use crate::error::{Error, Result};
use crate::rng;

/// Category tags understood by [`make_family`].
pub const CATEGORIES: &[&str] = &["sphere", "ellipsoid", "car", "chair", "plane"];

/// Largest half extent a family member may have after normalisation.
const FIT_HALF_EXTENT: f64 = 0.95;

/// `count` deterministic members of a procedural shape family.
pub fn make_family(category: &str, count: usize, seed: u64) -> Result<Vec<AnalyticShape>> {
    if count == 0 {
        return Err(Error::InvalidArgument("family size must be positive".into()));
    }
    if !CATEGORIES.contains(&category) {
        return Err(Error::UnknownCategory(category.to_string()));
    }
    (0..count)
        .map(|i| {
            let mut r = rng::substream(seed, category, i as u64);
            let shape = match category {
                "sphere" => sphere(&mut r),
                "ellipsoid" => ellipsoid(&mut r),
                "car" => car(&mut r),
                "chair" => chair(&mut r),
                _ => plane(&mut r),
            };
            Ok(normalize(shape))
        })
        .collect()
}

/// Shrink and recentre shapes whose bounds leave the canonical cube.
fn normalize(shape: AnalyticShape) -> AnalyticShape {
    let b = shape.aabb();
    let half = b.min.abs().sup(&b.max.abs()).max();
    if half <= FIT_HALF_EXTENT {
        return shape;
    }
    let center = (b.min + b.max) * 0.5;
    let s = FIT_HALF_EXTENT / (0.5 * b.extent().max());
    AnalyticShape {
        root: shape.root.transformed(s, &(-center * s)),
        ..shape
    }
}

fn sphere(r: &mut impl Rng) -> AnalyticShape {
    AnalyticShape::sphere(r.random_range(0.3..=0.6))
}

fn ellipsoid(r: &mut impl Rng) -> AnalyticShape {
    let radii = [
        r.random_range(0.55..=0.75),
        r.random_range(0.3..=0.45),
        r.random_range(0.18..=0.28),
    ];
    AnalyticShape::new(
        "ellipsoid",
        radii.to_vec(),
        Node::leaf(Primitive::Ellipsoid { radii }, [0.0; 3]),
    )
}

/// Rounded body on four wheels; length along x, width along y, up is +z.
fn car(r: &mut impl Rng) -> AnalyticShape {
    let len = r.random_range(0.6..=0.8);
    let wid = r.random_range(0.25..=0.35);
    let hgt = r.random_range(0.12..=0.18);
    let round = r.random_range(0.03..=0.07);
    let wheel_r = r.random_range(0.1..=0.14);
    let wheel_w = r.random_range(0.04..=0.06);
    let body_z = 0.05;
    let mut children = vec![Node::leaf(
        Primitive::RoundedBox {
            half: [len, wid, hgt],
            radius: round,
        },
        [0.0, 0.0, body_z],
    )];
    let wz = body_z - hgt - round + 0.3 * wheel_r;
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            children.push(Node::leaf(
                Primitive::Cylinder {
                    radius: wheel_r,
                    half_height: wheel_w,
                    axis: 1,
                },
                [sx * 0.65 * len, sy * (wid + round), wz],
            ));
        }
    }
    AnalyticShape::new(
        "car",
        vec![len, wid, hgt, round, wheel_r, wheel_w],
        Node::Union { children },
    )
}

/// Seat, four legs, a back and optional armrests.
fn chair(r: &mut impl Rng) -> AnalyticShape {
    let sw = r.random_range(0.35..=0.5);
    let sd = r.random_range(0.35..=0.5);
    let st = r.random_range(0.03..=0.05);
    let leg = r.random_range(0.03..=0.05);
    let leg_h = r.random_range(0.3..=0.45);
    let back_h = r.random_range(0.3..=0.45);
    let arms = r.random_bool(0.5);
    let seat_z = -0.2;
    let mut children = vec![Node::leaf(Primitive::Box { half: [sw, sd, st] }, [0.0, 0.0, seat_z])];
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            children.push(Node::leaf(
                Primitive::Box {
                    half: [leg, leg, leg_h],
                },
                [sx * (sw - leg), sy * (sd - leg), seat_z - st - leg_h],
            ));
        }
    }
    children.push(Node::leaf(
        Primitive::Box { half: [sw, st, back_h] },
        [0.0, sd - st, seat_z + st + back_h],
    ));
    if arms {
        for sx in [-1.0, 1.0] {
            children.push(Node::leaf(
                Primitive::Box {
                    half: [st, 0.8 * sd, st],
                },
                [sx * (sw - st), 0.0, seat_z + 0.25],
            ));
        }
    }
    AnalyticShape::new(
        "chair",
        vec![sw, sd, st, leg, leg_h, back_h, arms as u8 as f64],
        Node::Union { children },
    )
}

/// Ellipsoid fuselage with main wings, tailplane and fin.
fn plane(r: &mut impl Rng) -> AnalyticShape {
    let body_l = r.random_range(0.7..=0.85);
    let body_r = r.random_range(0.08..=0.12);
    let span = r.random_range(0.6..=0.85);
    let chord = r.random_range(0.1..=0.16);
    let wing_x = r.random_range(-0.05..=0.1);
    let tail_span = r.random_range(0.2..=0.3);
    let t = 0.02;
    let children = vec![
        Node::leaf(
            Primitive::Ellipsoid {
                radii: [body_l, body_r, body_r],
            },
            [0.0; 3],
        ),
        Node::leaf(Primitive::Box { half: [chord, span, t] }, [wing_x, 0.0, 0.0]),
        Node::leaf(
            Primitive::Box {
                half: [0.6 * chord, tail_span, t],
            },
            [-0.8 * body_l, 0.0, 0.0],
        ),
        Node::leaf(
            Primitive::Box {
                half: [0.6 * chord, t, 0.6 * tail_span],
            },
            [-0.8 * body_l, 0.0, 0.6 * tail_span],
        ),
    ];
    AnalyticShape::new(
        "plane",
        vec![body_l, body_r, span, chord, wing_x, tail_span],
        Node::Union { children },
    )
}

/// Largest absolute coordinate reached by the shape's bounds.
pub fn max_extent(shape: &AnalyticShape) -> f64 {
    let b = shape.aabb();
    b.min.abs().sup(&b.max.abs()).max()
}
