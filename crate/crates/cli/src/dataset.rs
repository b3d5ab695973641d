//! Dataset layout written by `gen-data` and read by the later stages.
//!
//! ```text
//! <out>/manifest.json
//! <out>/config.json
//! <out>/shapes/shape_0000.json        analytic shape tree
//! <out>/samples/shape_0000.bin        surface and free-space samples
//! <out>/depth/shape_0000_v0.pfm       depth render (+ .json sidecar)
//! ```

use std::path::{Path, PathBuf};

use difrecon_core::autodiff::TensorFile;
use difrecon_core::rng::derive_seed;
use difrecon_core::synthdata::{
    make_family, occlude, render_depth, sample_shape, sample_view, AnalyticShape, DepthImage, Intrinsics,
    ShapeSampleSet,
};
use difrecon_core::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{to_pretty, write_resolved, GenDataConfig};
use crate::error::{CliError, CliResult};
use crate::output::{create_dir, write_atomic};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    /// Observation name, used for result directories.
    pub name: String,
    pub depth: String,
    pub view_seed: u64,
    pub noise_seed: u64,
    pub occlusion: f64,
    pub occlusion_seed: u64,
    pub valid_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub params: Vec<f64>,
    pub shape: String,
    pub samples: String,
    pub sample_seed: u64,
    pub surface_points: usize,
    pub free_points: usize,
    pub views: Vec<ViewEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub category: String,
    pub seed: u64,
    pub shapes: Vec<ShapeEntry>,
}

impl GenDataConfig {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Core(Error::InvalidArgument(m.into())));
        if self.count == 0 || self.surface_points == 0 || self.free_points == 0 {
            return bad("count and point counts must be positive");
        }
        if self.views_per_shape == 0 || self.image_size < 8 {
            return bad("need at least one view of at least 8x8 pixels");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || !(self.camera_distance > 0.0) {
            return bad("fov must lie in (0, 180) degrees and the camera distance must be positive");
        }
        if !(0.0..1.0).contains(&self.occlusion) || !(self.depth_noise >= 0.0) {
            return bad("occlusion must lie in [0, 1) and depth noise must be non-negative");
        }
        Ok(())
    }
}

fn shape_name(i: usize) -> String {
    format!("shape_{i:04}")
}

fn write_shape(cfg: &GenDataConfig, out: &Path, i: usize, shape: &AnalyticShape) -> CliResult<ShapeEntry> {
    let name = shape_name(i);
    let shape_rel = format!("shapes/{name}.json");
    write_atomic(&out.join(&shape_rel), to_pretty(shape).as_bytes())?;

    let sample_seed = derive_seed(cfg.seed, "sampling", i as u64);
    let set = sample_shape(shape, cfg.surface_points, cfg.free_points, sample_seed)?;
    let samples_rel = format!("samples/{name}.bin");
    let mut file = TensorFile::new();
    set.to_tensors(&mut file)?;
    write_atomic(&out.join(&samples_rel), &file.to_bytes())?;

    let k = Intrinsics::from_fov(cfg.image_size, cfg.image_size, cfg.fov_deg.to_radians());
    let mut views = Vec::with_capacity(cfg.views_per_shape);
    for v in 0..cfg.views_per_shape {
        let index = (i * cfg.views_per_shape + v) as u64;
        let view_seed = derive_seed(cfg.seed, "view", index);
        let noise_seed = derive_seed(cfg.seed, "depth-noise", index);
        let occlusion_seed = derive_seed(cfg.seed, "occlusion", index);
        let cam = sample_view(cfg.camera_distance, k, view_seed);
        let mut img = render_depth(shape, &cam, cfg.image_size, cfg.image_size, cfg.depth_noise, noise_seed)?;
        if cfg.occlusion > 0.0 {
            img = occlude(&img, cfg.occlusion, occlusion_seed)?.0;
        }
        let depth_rel = format!("depth/{name}_v{v}.pfm");
        let path = out.join(&depth_rel);
        // the image writer emits two files; write both under temporary names
        let tmp = out.join(format!("depth/.{name}_v{v}.tmp.pfm"));
        img.write(&tmp)?;
        rename(
            &difrecon_core::fields::sidecar_path(&tmp),
            &difrecon_core::fields::sidecar_path(&path),
        )?;
        rename(&tmp, &path)?;
        views.push(ViewEntry {
            name: format!("{name}_v{v}"),
            depth: depth_rel,
            view_seed,
            noise_seed,
            occlusion: cfg.occlusion,
            occlusion_seed,
            valid_pixels: img.valid_count(),
        });
    }
    Ok(ShapeEntry {
        name,
        params: shape.params.clone(),
        shape: shape_rel,
        samples: samples_rel,
        sample_seed,
        surface_points: set.surface.len(),
        free_points: set.free.len(),
        views,
    })
}

fn rename(from: &Path, to: &Path) -> CliResult<()> {
    std::fs::rename(from, to).map_err(|e| Error::io(to, e))?;
    Ok(())
}

/// Generate a shape family with samples and depth renders.
pub fn cmd_gen_data(cfg: &GenDataConfig) -> CliResult<Manifest> {
    cfg.validate()?;
    let shapes = make_family(&cfg.category, cfg.count, cfg.seed)?;
    for sub in ["shapes", "samples", "depth"] {
        create_dir(&cfg.out.join(sub))?;
    }
    write_resolved(&cfg.out, "gen-data", cfg)?;
    let entries = shapes
        .par_iter()
        .enumerate()
        .map(|(i, s)| write_shape(cfg, &cfg.out, i, s))
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = Manifest {
        version: crate::config::VERSION.to_string(),
        category: cfg.category.clone(),
        seed: cfg.seed,
        shapes: entries,
    };
    write_atomic(&cfg.out.join("manifest.json"), to_pretty(&manifest).as_bytes())?;
    Ok(manifest)
}

/// Read access to a generated dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// One depth observation with the shape it shows.
#[derive(Clone, Debug)]
pub struct Observation<'a> {
    pub index: usize,
    pub shape: &'a ShapeEntry,
    pub view: &'a ViewEntry,
}

impl Dataset {
    pub fn open(root: &Path) -> CliResult<Self> {
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// The first `limit` shapes (all when `None`).
    pub fn shapes(&self, limit: Option<usize>) -> &[ShapeEntry] {
        let n = limit.unwrap_or(usize::MAX).min(self.manifest.shapes.len());
        &self.manifest.shapes[..n]
    }

    /// Every view of the first `limit` shapes, numbered consecutively.
    pub fn observations(&self, limit: Option<usize>) -> Vec<Observation<'_>> {
        self.shapes(limit)
            .iter()
            .flat_map(|s| s.views.iter().map(move |v| (s, v)))
            .enumerate()
            .map(|(index, (shape, view))| Observation { index, shape, view })
            .collect()
    }

    pub fn find_view(&self, name: &str) -> Option<Observation<'_>> {
        self.observations(None).into_iter().find(|o| o.view.name == name)
    }

    pub fn load_shape(&self, entry: &ShapeEntry) -> CliResult<AnalyticShape> {
        let path = self.root.join(&entry.shape);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?)
    }

    pub fn load_samples(&self, entry: &ShapeEntry) -> CliResult<ShapeSampleSet> {
        let file = TensorFile::read(&self.root.join(&entry.samples))?;
        Ok(ShapeSampleSet::from_tensors(&file)?)
    }

    pub fn load_depth(&self, view: &ViewEntry) -> CliResult<DepthImage> {
        Ok(DepthImage::read(&self.root.join(&view.depth))?)
    }
}
