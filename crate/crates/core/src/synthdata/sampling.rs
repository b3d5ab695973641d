use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::shapes::{AnalyticShape, Node};
use crate::autodiff::TensorFile;
use crate::error::{structural, Error, Result};
use crate::geometry::Vec3;
use crate::rng;

/// Surface point with its outward unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    pub x: [f64; 3],
    pub n: [f64; 3],
}

/// Free-space point with its ground-truth signed distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeSample {
    pub x: [f64; 3],
    pub s: f64,
}

/// Training samples of one shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeSampleSet {
    pub surface: Vec<SurfaceSample>,
    pub free: Vec<FreeSample>,
}

const SURFACE_TOL: f64 = 1e-9;
const MAX_ATTEMPTS_PER_POINT: usize = 200;

impl ShapeSampleSet {
    /// Check that every surface normal is unit length.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.surface.iter().enumerate() {
            let n = Vec3::from(s.n).norm();
            if !((n - 1.0).abs() < 1e-6) {
                return Err(structural(format!("surface sample {i} has no unit normal (|n| = {n})")));
            }
        }
        Ok(())
    }

    /// Random subset with `n_surface` and `n_free` points (all points when
    /// fewer are available), deterministic in `rng`.
    pub fn subsample(&self, n_surface: usize, n_free: usize, rng: &mut impl Rng) -> ShapeSampleSet {
        fn pick<T: Copy>(v: &[T], n: usize, rng: &mut impl Rng) -> Vec<T> {
            if n >= v.len() {
                return v.to_vec();
            }
            rand::seq::index::sample(rng, v.len(), n)
                .into_iter()
                .map(|i| v[i])
                .collect()
        }
        ShapeSampleSet {
            surface: pick(&self.surface, n_surface, rng),
            free: pick(&self.free, n_free, rng),
        }
    }

    pub fn to_tensors(&self, file: &mut TensorFile) -> Result<()> {
        let surf = self.surface.iter().flat_map(|s| s.x.into_iter().chain(s.n)).collect();
        file.insert("surface", vec![self.surface.len(), 6], surf)?;
        let free = self.free.iter().flat_map(|s| s.x.into_iter().chain([s.s])).collect();
        file.insert("free", vec![self.free.len(), 4], free)
    }

    pub fn from_tensors(file: &TensorFile) -> Result<Self> {
        let surf = file.require("surface")?;
        let free = file.require("free")?;
        if surf.shape.get(1) != Some(&6) || free.shape.get(1) != Some(&4) {
            return Err(Error::Format("sample set tensors have the wrong width".into()));
        }
        Ok(ShapeSampleSet {
            surface: surf
                .data
                .chunks(6)
                .map(|c| SurfaceSample {
                    x: [c[0], c[1], c[2]],
                    n: [c[3], c[4], c[5]],
                })
                .collect(),
            free: free
                .data
                .chunks(4)
                .map(|c| FreeSample {
                    x: [c[0], c[1], c[2]],
                    s: c[3],
                })
                .collect(),
        })
    }
}

/// Project an interior point of `leaf` onto its surface.
fn project_to_leaf(leaf: &Node, mut x: Vec3) -> Option<Vec3> {
    for _ in 0..16 {
        let s = leaf.eval(&x);
        if s.value.abs() < SURFACE_TOL {
            return Some(x);
        }
        x -= s.grad * s.value;
    }
    None
}

/// Surface samples with analytic normals plus uniform free-space samples in
/// `[-1, 1]³` with their oracle SDF.
///
/// Surface points are drawn by picking a leaf primitive (weighted by the
/// surface area of its bounds), taking a uniform point inside it and
/// projecting it onto the leaf's surface. Points are kept only if they sit
/// on the zero level set of the whole tree with a unique closest primitive.
pub fn sample_shape(shape: &AnalyticShape, n_surface: usize, n_free: usize, seed: u64) -> Result<ShapeSampleSet> {
    if n_surface == 0 || n_free == 0 {
        return Err(Error::InvalidArgument("sample counts must be positive".into()));
    }
    let leaves = shape.root.leaves();
    let boxes: Vec<_> = leaves.iter().map(|l| l.aabb()).collect();
    let weights: Vec<f64> = boxes.iter().map(|b| b.surface_area().max(1e-12)).collect();
    let chooser = WeightedIndex::new(&weights).map_err(|e| structural(format!("leaf weights: {e}")))?;

    let mut r = rng::substream(seed, "surface", 0);
    let mut surface = Vec::with_capacity(n_surface);
    let max_attempts = n_surface * MAX_ATTEMPTS_PER_POINT;
    let mut attempts = 0;
    while surface.len() < n_surface {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::NumericAbort(format!(
                "surface sampling for '{}' accepted only {} of {n_surface} points after {max_attempts} attempts",
                shape.category,
                surface.len()
            )));
        }
        let k = chooser.sample(&mut r);
        let b = &boxes[k];
        let p = Vec3::new(
            r.random_range(b.min.x..=b.max.x),
            r.random_range(b.min.y..=b.max.y),
            r.random_range(b.min.z..=b.max.z),
        );
        if leaves[k].eval(&p).value >= 0.0 {
            continue;
        }
        let Some(x) = project_to_leaf(leaves[k], p) else {
            continue;
        };
        let s = shape.eval(&x);
        if !s.unique || s.value.abs() >= SURFACE_TOL {
            continue;
        }
        let n = s.grad.normalize();
        surface.push(SurfaceSample {
            x: [x.x, x.y, x.z],
            n: [n.x, n.y, n.z],
        });
    }

    let mut r = rng::substream(seed, "free", 0);
    let free = (0..n_free)
        .map(|_| {
            let x = Vec3::new(
                r.random_range(-1.0..=1.0),
                r.random_range(-1.0..=1.0),
                r.random_range(-1.0..=1.0),
            );
            FreeSample {
                x: [x.x, x.y, x.z],
                s: shape.sdf(&x),
            }
        })
        .collect();
    Ok(ShapeSampleSet { surface, free })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{make_family, CATEGORIES};

    #[test]
    fn sphere_samples_lie_on_sphere() {
        let s = AnalyticShape::sphere(0.45);
        let set = sample_shape(&s, 500, 500, 1).unwrap();
        for p in &set.surface {
            let x = Vec3::from(p.x);
            assert!((x.norm() - 0.45).abs() < 1e-6);
            assert!((Vec3::from(p.n) - x.normalize()).norm() < 1e-6);
        }
        for f in &set.free {
            assert_eq!(f.s, s.sdf(&Vec3::from(f.x)));
            assert!(f.x.iter().all(|v| v.abs() <= 1.0));
        }
        set.validate().unwrap();
    }

    #[test]
    fn every_family_samples_on_its_surface() {
        for cat in CATEGORIES {
            for shape in make_family(cat, 3, 4).unwrap() {
                let set = sample_shape(&shape, 300, 10, 2).unwrap();
                for p in &set.surface {
                    let x = Vec3::from(p.x);
                    assert!(shape.sdf(&x).abs() < 1e-6, "{cat}");
                    assert!(x.iter().all(|v| v.abs() <= 1.0));
                    // eikonal property of the oracle at surface samples
                    let h = 1e-6;
                    let g = Vec3::from_fn(|i, _| {
                        let mut a = x;
                        let mut b = x;
                        a[i] += h;
                        b[i] -= h;
                        (shape.sdf(&a) - shape.sdf(&b)) / (2.0 * h)
                    });
                    if (g - Vec3::from(p.n)).norm() < 1e-3 {
                        assert!((g.norm() - 1.0).abs() < 1e-4, "{cat}: |g| = {}", g.norm());
                    }
                }
                set.validate().unwrap();
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = &make_family("car", 1, 0).unwrap()[0];
        assert_eq!(sample_shape(s, 50, 50, 3).unwrap(), sample_shape(s, 50, 50, 3).unwrap());
    }

    #[test]
    fn missing_normals_are_structural() {
        let mut set = sample_shape(&AnalyticShape::sphere(0.5), 5, 5, 0).unwrap();
        set.surface[2].n = [0.0; 3];
        assert!(matches!(set.validate(), Err(Error::Structural(_))));
    }

    #[test]
    fn tensors_round_trip() {
        let set = sample_shape(&AnalyticShape::sphere(0.5), 20, 30, 0).unwrap();
        let mut f = TensorFile::new();
        set.to_tensors(&mut f).unwrap();
        let back = ShapeSampleSet::from_tensors(&TensorFile::from_bytes(&f.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, set);
    }
}
