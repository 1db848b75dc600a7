//! Dataset assembly with exact per-class counts, and the on-disk format:
//! `manifest.json` + `labels.csv` + `images.bin` (little-endian f32,
//! sample-major, H*W*3 per sample, row-major, channel-last).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{render, sample_object, ImageSample, ObjectSpec, RenderParams, ShapeKind};
use crate::concept::{ConceptClass, ConceptSpace};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Everything needed to rebuild a dataset bit-for-bit: the space, the exact
/// per-class sample counts, the seed, and the renderer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub space: ConceptSpace,
    /// class string (e.g. "011") -> requested sample count; absent classes
    /// have count 0
    pub counts: BTreeMap<String, usize>,
    pub seed: u64,
    pub render: RenderParams,
}

impl DatasetSpec {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Parse and validate the count map against the space.
    pub fn class_counts(&self) -> Result<Vec<(ConceptClass, usize)>> {
        let mut out = Vec::new();
        for (s, &n) in &self.counts {
            let class = self.space.parse_class(s)?;
            out.push((class, n));
        }
        // lexicographic class order is canonical
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    /// Classes with a nonzero count, in canonical order.
    pub fn represented_classes(&self) -> Result<Vec<ConceptClass>> {
        Ok(self
            .class_counts()?
            .into_iter()
            .filter(|(_, n)| *n > 0)
            .map(|(c, _)| c)
            .collect())
    }
}

/// An in-memory dataset: samples in their final (seed-shuffled) order plus
/// the realized per-class manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub spec: DatasetSpec,
    /// class string -> count actually present in `samples`
    pub manifest: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.spec.render.image_size
    }
}

/// Render exactly `counts[c]` samples per class, then shuffle globally with
/// a seed-derived permutation. Each sample index draws from its own RNG
/// substream, so the build parallelizes without changing output.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.render.validate(&spec.space)?;
    let class_counts = spec.class_counts()?;

    let mut slots: Vec<ConceptClass> = Vec::with_capacity(spec.total());
    for (class, n) in &class_counts {
        for _ in 0..*n {
            slots.push(class.clone());
        }
    }

    let mut samples: Vec<ImageSample> = slots
        .par_iter()
        .enumerate()
        .map(|(i, class)| {
            let mut rng = substream(spec.seed, "shapegen.sample", i as u64);
            let obj = sample_object(&spec.space, class, &mut rng, &spec.render)?;
            Ok(render(&obj, &spec.render))
        })
        .collect::<Result<_>>()?;

    let mut shuffle_rng = substream(spec.seed, "shapegen.shuffle", 0);
    samples.shuffle(&mut shuffle_rng);

    let mut manifest = BTreeMap::new();
    for s in &samples {
        *manifest.entry(s.class.to_string()).or_insert(0) += 1;
    }
    for (class, n) in &class_counts {
        let got = manifest.get(&class.to_string()).copied().unwrap_or(0);
        if got != *n {
            return Err(Error::Schema(format!(
                "realized count {got} != requested {n} for class {class}"
            )));
        }
    }

    Ok(Dataset {
        samples,
        spec: spec.clone(),
        manifest,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: DatasetSpec,
    realized: BTreeMap<String, usize>,
    total: usize,
}

/// Write `manifest.json`, `labels.csv`, `images.bin`, and optionally a
/// `png/` directory with 8-bit previews.
pub fn save_dataset(dataset: &Dataset, dir: &Path, png: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        spec: dataset.spec.clone(),
        realized: dataset.manifest.clone(),
        total: dataset.len(),
    };
    let manifest_path = dir.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&manifest_path, e))?;

    let labels_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels_path)
        .map_err(|e| Error::Format(format!("labels.csv: {e}")))?;
    w.write_record(["index", "class", "x", "y", "angle", "radius", "r", "g", "b"])
        .map_err(|e| Error::Format(format!("labels.csv: {e}")))?;
    for (i, s) in dataset.samples.iter().enumerate() {
        w.write_record(&[
            i.to_string(),
            s.class.to_string(),
            format!("{:.6}", s.spec.x),
            format!("{:.6}", s.spec.y),
            format!("{:.6}", s.spec.angle),
            format!("{:.6}", s.spec.radius),
            format!("{:.6}", s.spec.rgb[0]),
            format!("{:.6}", s.spec.rgb[1]),
            format!("{:.6}", s.spec.rgb[2]),
        ])
        .map_err(|e| Error::Format(format!("labels.csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;

    let bin_path = dir.join("images.bin");
    let file = fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut out = BufWriter::new(file);
    for s in &dataset.samples {
        for v in s.image.iter() {
            out.write_f32::<LittleEndian>(*v)
                .map_err(|e| Error::io(&bin_path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(&bin_path, e))?;

    if png {
        let png_dir = dir.join("png");
        fs::create_dir_all(&png_dir).map_err(|e| Error::io(&png_dir, e))?;
        for (i, s) in dataset.samples.iter().enumerate() {
            let path = png_dir.join(format!("{i:06}_{}.png", s.class));
            write_png(&s.image, &path)?;
        }
    }
    Ok(())
}

/// Encode an HxWx3 [0,1] image as an 8-bit PNG.
pub fn write_png(image: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let px = [
                (image[(row, col, 0)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(row, col, 1)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(row, col, 2)].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(col as u32, row as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| Error::Format(format!("png encode {}: {e}", path.display())))
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "dataset format version {} != supported {}",
            manifest.format_version, DATASET_FORMAT_VERSION
        )));
    }
    let spec = manifest.spec;
    let side = spec.render.image_size;
    let per_sample = side * side * 3;

    #[derive(Deserialize)]
    struct Row {
        #[allow(dead_code)]
        index: usize,
        class: String,
        x: f32,
        y: f32,
        angle: f32,
        radius: f32,
        r: f32,
        g: f32,
        b: f32,
    }
    let labels_path = dir.join("labels.csv");
    let mut rows = Vec::new();
    let mut rdr = csv::Reader::from_path(&labels_path)
        .map_err(|e| Error::Format(format!("labels.csv: {e}")))?;
    for rec in rdr.deserialize::<Row>() {
        rows.push(rec.map_err(|e| Error::Format(format!("labels.csv: {e}")))?);
    }
    if rows.len() != manifest.total {
        return Err(Error::Format(format!(
            "labels.csv has {} rows, manifest says {}",
            rows.len(),
            manifest.total
        )));
    }

    let bin_path = dir.join("images.bin");
    let file = fs::File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut reader = BufReader::new(file);
    let (shape_idx, _) = spec
        .space
        .variable_named("shape")
        .ok_or_else(|| Error::Config("dataset space has no shape variable".into()))?;

    let mut samples = Vec::with_capacity(rows.len());
    let mut floats = vec![0f32; per_sample];
    for row in &rows {
        reader
            .read_f32_into::<LittleEndian>(&mut floats)
            .map_err(|e| Error::io(&bin_path, e))?;
        let image = Array3::from_shape_vec((side, side, 3), floats.clone())
            .expect("shape matches buffer");
        let class = spec.space.parse_class(&row.class)?;
        let labels = spec.space.labels_of(&class)?;
        let shape = match labels[shape_idx] {
            "circle" => ShapeKind::Circle,
            "triangle" => ShapeKind::Triangle,
            "square" => ShapeKind::Square,
            other => return Err(Error::Format(format!("unknown shape label `{other}`"))),
        };
        let background = match spec.space.variable_named("background") {
            Some((bg_idx, _)) => spec.render.background_map[labels[bg_idx]],
            None => spec.render.default_background,
        };
        let spec_obj = ObjectSpec {
            class: class.clone(),
            shape,
            x: row.x,
            y: row.y,
            angle: row.angle,
            radius: row.radius,
            rgb: [row.r, row.g, row.b],
            background,
        };
        samples.push(ImageSample {
            image,
            class,
            spec: spec_obj,
        });
    }
    // must be at end of file
    let mut probe = [0u8; 1];
    if reader.read(&mut probe).map_err(|e| Error::io(&bin_path, e))? != 0 {
        return Err(Error::Format("images.bin longer than labels.csv".into()));
    }

    Ok(Dataset {
        samples,
        spec,
        manifest: manifest.realized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with_counts(counts: &[(&str, usize)], seed: u64) -> DatasetSpec {
        DatasetSpec {
            space: ConceptSpace::default3(),
            counts: counts.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            seed,
            render: RenderParams::default(),
        }
    }

    #[test]
    fn counts_are_exact() {
        let spec = spec_with_counts(&[("000", 40), ("100", 25), ("010", 10), ("001", 5)], 11);
        let ds = build_dataset(&spec).unwrap();
        assert_eq!(ds.len(), 80);
        assert_eq!(ds.manifest["000"], 40);
        assert_eq!(ds.manifest["100"], 25);
        assert_eq!(ds.manifest["010"], 10);
        assert_eq!(ds.manifest["001"], 5);
    }

    #[test]
    fn tiny_count_is_exact() {
        let spec = spec_with_counts(&[("001", 10), ("000", 30)], 3);
        let ds = build_dataset(&spec).unwrap();
        assert_eq!(ds.manifest["001"], 10);
    }

    #[test]
    fn all_zero_counts_is_valid_and_empty() {
        let spec = spec_with_counts(&[("000", 0), ("111", 0)], 1);
        let ds = build_dataset(&spec).unwrap();
        assert!(ds.is_empty());
        assert!(ds.manifest.is_empty());
    }

    #[test]
    fn unknown_class_rejected() {
        let spec = spec_with_counts(&[("555", 3)], 1);
        assert!(matches!(build_dataset(&spec), Err(Error::Schema(_))));
    }

    #[test]
    fn build_is_deterministic() {
        let spec = spec_with_counts(&[("000", 12), ("111", 12)], 99);
        let a = build_dataset(&spec).unwrap();
        let b = build_dataset(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.class, y.class);
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn class_purity() {
        // re-deriving attributes from the ObjectSpec matches the class
        let spec = spec_with_counts(&[("000", 4), ("011", 4), ("101", 4), ("110", 4)], 5);
        let ds = build_dataset(&spec).unwrap();
        let space = &ds.spec.space;
        for s in &ds.samples {
            let labels = space.labels_of(&s.class).unwrap();
            let expected_shape = match labels[0] {
                "circle" => ShapeKind::Circle,
                "triangle" => ShapeKind::Triangle,
                _ => unreachable!(),
            };
            assert_eq!(s.spec.shape, expected_shape);
            let jit = ds.spec.render.color_map[labels[1]];
            for ch in 0..3 {
                assert!((s.spec.rgb[ch] - jit.center[ch]).abs() <= jit.jitter + 1e-6);
            }
            let (lo, hi) = ds.spec.render.size_map[labels[2]];
            assert!(s.spec.radius >= lo && s.spec.radius <= hi);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec_with_counts(&[("000", 6), ("110", 6)], 21);
        let ds = build_dataset(&spec).unwrap();
        save_dataset(&ds, dir.path(), false).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.manifest, ds.manifest);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.class, b.class);
            assert_eq!(a.image, b.image, "images.bin must round-trip bit-exactly");
            assert_eq!(a.spec.shape, b.spec.shape);
        }
    }

    #[test]
    fn save_is_byte_identical_across_runs() {
        let spec = spec_with_counts(&[("000", 5), ("001", 5)], 77);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_dataset(&build_dataset(&spec).unwrap(), d1.path(), false).unwrap();
        save_dataset(&build_dataset(&spec).unwrap(), d2.path(), false).unwrap();
        for name in ["manifest.json", "labels.csv", "images.bin"] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical builds");
        }
    }
}
