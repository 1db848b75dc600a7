//! Procedural single-object scene generation.
//!
//! Concept classes fix the discrete attributes (shape, color, size, and
//! optionally background); everything else about an object — location,
//! rotation angle, exact radius, exact RGB — is a continuous free variable
//! sampled per object. Rendering is a pure analytic rasterization with
//! supersampled coverage antialiasing, so identical specs are byte-identical
//! across runs.

mod dataset;
mod raster;

pub use dataset::{build_dataset, load_dataset, save_dataset, Dataset, DatasetSpec};
pub use raster::render;

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concept::{ConceptClass, ConceptSpace};
use crate::error::{Error, Result};

pub const DEFAULT_IMAGE_SIZE: usize = 28;

/// RGB center plus a per-channel jitter half-width; objects of this color
/// value draw their RGB uniformly from the box `center ± jitter`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub center: [f32; 3],
    pub jitter: f32,
}

/// Geometry kinds the rasterizer knows how to fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Triangle,
    Square,
}

impl ShapeKind {
    fn from_label(label: &str) -> Result<Self> {
        match label {
            "circle" => Ok(ShapeKind::Circle),
            "triangle" => Ok(ShapeKind::Triangle),
            "square" => Ok(ShapeKind::Square),
            other => Err(Error::Config(format!(
                "shape value `{other}` has no renderer (known: circle, triangle, square)"
            ))),
        }
    }
}

/// Rendering configuration: image geometry plus the maps from concept value
/// labels to their continuous parameter ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub image_size: usize,
    /// color value label -> RGB center and jitter half-width
    pub color_map: BTreeMap<String, ColorJitter>,
    /// size value label -> inclusive radius range in pixels
    pub size_map: BTreeMap<String, (f32, f32)>,
    /// background value label -> RGB (used when the space has a background
    /// variable); `default_background` applies otherwise
    pub background_map: BTreeMap<String, [f32; 3]>,
    pub default_background: [f32; 3],
    /// pixels every object keeps clear of the border
    pub margin: f32,
    /// maximum offset of the object center from the image center; keeps the
    /// position free variable from swamping the attribute signal that the
    /// linear probes must read (None = only the margin constrains position)
    pub position_jitter: Option<f32>,
    /// supersampling factor per axis (>= 1)
    pub antialias: u32,
    /// when false, triangles and squares render at angle 0
    pub rotate: bool,
}

impl Default for RenderParams {
    fn default() -> Self {
        let mut color_map = BTreeMap::new();
        color_map.insert(
            "red".to_string(),
            ColorJitter {
                center: [0.85, 0.10, 0.10],
                jitter: 0.05,
            },
        );
        color_map.insert(
            "blue".to_string(),
            ColorJitter {
                center: [0.10, 0.10, 0.85],
                jitter: 0.05,
            },
        );
        let mut size_map = BTreeMap::new();
        size_map.insert("large".to_string(), (8.0, 10.0));
        size_map.insert("small".to_string(), (3.5, 5.0));
        let mut background_map = BTreeMap::new();
        background_map.insert("white".to_string(), [1.0, 1.0, 1.0]);
        background_map.insert("black".to_string(), [0.0, 0.0, 0.0]);
        RenderParams {
            image_size: DEFAULT_IMAGE_SIZE,
            color_map,
            size_map,
            background_map,
            default_background: [1.0, 1.0, 1.0],
            margin: 2.0,
            position_jitter: Some(2.5),
            antialias: 4,
            // rotation stays off by default: linear pixel probes cannot
            // separate rotating triangles from circles reliably, and probe
            // fidelity is a hard requirement of the evaluation protocol
            rotate: false,
        }
    }
}

impl RenderParams {
    pub fn max_radius(&self) -> f32 {
        self.size_map.values().fold(0.0f32, |m, &(_, hi)| m.max(hi))
    }

    /// Check internal consistency and coverage of the given space's values.
    pub fn validate(&self, space: &ConceptSpace) -> Result<()> {
        if self.antialias < 1 {
            return Err(Error::Config("antialias factor must be >= 1".into()));
        }
        if let Some(j) = self.position_jitter {
            if !(j > 0.0) {
                return Err(Error::Config("position jitter must be positive".into()));
            }
        }
        if self.image_size < 4 {
            return Err(Error::Config("image size must be at least 4 pixels".into()));
        }
        let (_, shape_var) = space
            .variable_named("shape")
            .ok_or_else(|| Error::Config("space has no `shape` variable".into()))?;
        for v in &shape_var.values {
            ShapeKind::from_label(v)?;
        }
        let (_, color_var) = space
            .variable_named("color")
            .ok_or_else(|| Error::Config("space has no `color` variable".into()))?;
        for v in &color_var.values {
            if !self.color_map.contains_key(v) {
                return Err(Error::Config(format!("color value `{v}` missing from color_map")));
            }
        }
        let (_, size_var) = space
            .variable_named("size")
            .ok_or_else(|| Error::Config("space has no `size` variable".into()))?;
        for v in &size_var.values {
            match self.size_map.get(v) {
                None => {
                    return Err(Error::Config(format!("size value `{v}` missing from size_map")))
                }
                Some(&(lo, hi)) => {
                    if !(lo > 0.0 && hi >= lo) {
                        return Err(Error::Config(format!(
                            "size value `{v}` has invalid radius range [{lo}, {hi}]"
                        )));
                    }
                }
            }
        }
        if let Some((_, bg_var)) = space.variable_named("background") {
            for v in &bg_var.values {
                if !self.background_map.contains_key(v) {
                    return Err(Error::Config(format!(
                        "background value `{v}` missing from background_map"
                    )));
                }
            }
        }

        // radius ranges of distinct size values must not overlap
        let ranges: Vec<(&String, &(f32, f32))> = self.size_map.iter().collect();
        for i in 0..ranges.len() {
            for j in (i + 1)..ranges.len() {
                let (a, b) = (ranges[i].1, ranges[j].1);
                if a.0 <= b.1 && b.0 <= a.1 {
                    return Err(Error::Config(format!(
                        "radius ranges of `{}` and `{}` overlap",
                        ranges[i].0, ranges[j].0
                    )));
                }
            }
        }
        // color centers must be separated by more than 2x jitter in some channel
        let colors: Vec<(&String, &ColorJitter)> = self.color_map.iter().collect();
        for i in 0..colors.len() {
            for j in (i + 1)..colors.len() {
                let (a, b) = (colors[i].1, colors[j].1);
                let sep = 2.0 * a.jitter.max(b.jitter);
                let distinct = (0..3).any(|ch| (a.center[ch] - b.center[ch]).abs() > sep);
                if !distinct {
                    return Err(Error::Config(format!(
                        "color values `{}` and `{}` are not separated beyond their jitter",
                        colors[i].0, colors[j].0
                    )));
                }
            }
        }
        // the largest object must fit inside the margin box
        let r = self.max_radius();
        if 2.0 * (self.margin + r) > self.image_size as f32 {
            return Err(Error::Config(format!(
                "margin {} too large for max radius {} at image size {}",
                self.margin, r, self.image_size
            )));
        }
        Ok(())
    }
}

/// A fully instantiated object: its concept class plus concrete values for
/// every free variable the renderer needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: ConceptClass,
    pub shape: ShapeKind,
    /// object center, in pixel coordinates (x across columns, y down rows)
    pub x: f32,
    pub y: f32,
    /// rotation in radians; 0 for circles
    pub angle: f32,
    /// bounding-circle radius in pixels
    pub radius: f32,
    pub rgb: [f32; 3],
    pub background: [f32; 3],
}

/// A rendered image paired with its provenance.
#[derive(Debug, Clone)]
pub struct ImageSample {
    /// H x W x 3, values in [0, 1], channel-last
    pub image: Array3<f32>,
    pub class: ConceptClass,
    pub spec: ObjectSpec,
}

/// Draw the free variables of one object of the given class.
///
/// RNG consumption order is fixed (radius, x, y, angle, rgb) so datasets are
/// reproducible sample-by-sample.
pub fn sample_object(
    space: &ConceptSpace,
    class: &ConceptClass,
    rng: &mut impl Rng,
    params: &RenderParams,
) -> Result<ObjectSpec> {
    params.validate(space)?;
    let labels = space.labels_of(class)?;
    let (shape_idx, _) = space.variable_named("shape").expect("validated");
    let (color_idx, _) = space.variable_named("color").expect("validated");
    let (size_idx, _) = space.variable_named("size").expect("validated");

    let shape = ShapeKind::from_label(labels[shape_idx])?;
    let color = params.color_map[labels[color_idx]];
    let (r_lo, r_hi) = params.size_map[labels[size_idx]];

    let radius = if r_hi > r_lo {
        rng.gen_range(r_lo..r_hi)
    } else {
        r_lo
    };
    let side = params.image_size as f32;
    let mut lo = params.margin + radius;
    let mut hi = side - params.margin - radius;
    if hi < lo {
        return Err(Error::Config(format!(
            "margin {} leaves no room for radius {radius}",
            params.margin
        )));
    }
    if let Some(j) = params.position_jitter {
        lo = lo.max(side * 0.5 - j);
        hi = hi.min(side * 0.5 + j);
        if hi < lo {
            return Err(Error::Config(format!(
                "position jitter {j} incompatible with margin {} and radius {radius}",
                params.margin
            )));
        }
    }
    let x = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let y = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let angle = match shape {
        ShapeKind::Circle => 0.0,
        _ if params.rotate => rng.gen_range(0.0..std::f32::consts::TAU),
        _ => 0.0,
    };
    let mut rgb = [0.0f32; 3];
    for ch in 0..3 {
        let c = color.center[ch];
        rgb[ch] = if color.jitter > 0.0 {
            rng.gen_range(c - color.jitter..c + color.jitter)
        } else {
            c
        }
        .clamp(0.0, 1.0);
    }
    let background = match space.variable_named("background") {
        Some((bg_idx, _)) => params.background_map[labels[bg_idx]],
        None => params.default_background,
    };

    Ok(ObjectSpec {
        class: class.clone(),
        shape,
        x,
        y,
        angle,
        radius,
        rgb,
        background,
    })
}
