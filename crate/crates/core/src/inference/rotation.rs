use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};

const DEGENERATE: f64 = 1e-9;

/// Intermediate Gram-Schmidt quantities kept for the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct Rot6dPass {
    a1: Vec3,
    a2: Vec3,
    u2: Vec3,
    b1: Vec3,
    b2: Vec3,
}

fn split(r6: &[f64; 6]) -> (Vec3, Vec3) {
    (Vec3::new(r6[0], r6[1], r6[2]), Vec3::new(r6[3], r6[4], r6[5]))
}

/// Rotation from two 3-vectors by Gram-Schmidt: columns `(b1, b2, b1 × b2)`.
pub fn rot6d_to_matrix(r6: &[f64; 6]) -> Result<Mat3> {
    Ok(rot6d_forward(r6)?.0)
}

pub fn rot6d_forward(r6: &[f64; 6]) -> Result<(Mat3, Rot6dPass)> {
    if r6.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("6D rotation has non-finite entries".into()));
    }
    let (a1, a2) = split(r6);
    let n1 = a1.norm();
    if n1 <= DEGENERATE {
        return Err(Error::Degenerate(format!("first rotation column has norm {n1}")));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if n2 <= DEGENERATE {
        return Err(Error::Degenerate(format!(
            "second rotation column residual has norm {n2}"
        )));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok((Mat3::from_columns(&[b1, b2, b3]), Rot6dPass { a1, a2, u2, b1, b2 }))
}

/// The first two columns of a rotation matrix.
pub fn matrix_to_rot6d(r: &Mat3) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Gradient with respect to the 6D vector given the gradient with respect to
/// the rotation matrix.
pub fn rot6d_backward(pass: &Rot6dPass, g_r: &Mat3) -> [f64; 6] {
    let Rot6dPass { a1, a2, u2, b1, b2 } = *pass;
    let gb3: Vec3 = g_r.column(2).into();
    let mut gb1: Vec3 = Vec3::from(g_r.column(0)) + b2.cross(&gb3);
    let gb2: Vec3 = Vec3::from(g_r.column(1)) + gb3.cross(&b1);

    let n2 = u2.norm();
    let gu2 = (gb2 - b2 * b2.dot(&gb2)) / n2;
    let ga2 = gu2 - b1 * b1.dot(&gu2);
    gb1 -= gu2 * b1.dot(&a2) + a2 * b1.dot(&gu2);

    let n1 = a1.norm();
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;
    [ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z]
}
