//! Procedural analytic shapes, training samples and depth rendering.

mod family;
mod render;
mod sampling;
mod shapes;

pub use family::{make_family, max_extent, CATEGORIES};
pub use render::{
    mask_to_rle, occlude, render_depth, rle_to_mask, sample_view, Camera, DepthImage, DepthMeta, Intrinsics, PixelRect,
};
pub use sampling::{sample_shape, FreeSample, ShapeSampleSet, SurfaceSample};
pub use shapes::{analytic_sdf, Aabb, AnalyticShape, Node, Primitive, SdfSample};
