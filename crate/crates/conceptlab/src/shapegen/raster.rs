//! Analytic rasterization with supersampled coverage antialiasing.

use ndarray::Array3;

use super::{ImageSample, ObjectSpec, RenderParams, ShapeKind};

/// Point-in-shape test in pixel coordinates.
fn inside(spec: &ObjectSpec, px: f32, py: f32) -> bool {
    let dx = px - spec.x;
    let dy = py - spec.y;
    match spec.shape {
        ShapeKind::Circle => dx * dx + dy * dy <= spec.radius * spec.radius,
        ShapeKind::Triangle => {
            // equilateral triangle inscribed in the bounding circle; at
            // angle 0 one vertex points up (negative y, toward row 0)
            let base = spec.angle - std::f32::consts::FRAC_PI_2;
            let mut vx = [0.0f32; 3];
            let mut vy = [0.0f32; 3];
            for k in 0..3 {
                let th = base + k as f32 * std::f32::consts::TAU / 3.0;
                vx[k] = spec.x + spec.radius * th.cos();
                vy[k] = spec.y + spec.radius * th.sin();
            }
            let mut pos = false;
            let mut neg = false;
            for k in 0..3 {
                let (x0, y0) = (vx[k], vy[k]);
                let (x1, y1) = (vx[(k + 1) % 3], vy[(k + 1) % 3]);
                let cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
                if cross > 0.0 {
                    pos = true;
                }
                if cross < 0.0 {
                    neg = true;
                }
            }
            !(pos && neg)
        }
        ShapeKind::Square => {
            // axis-aligned at angle 0, inscribed in the bounding circle
            let (s, c) = spec.angle.sin_cos();
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            let half = spec.radius / std::f32::consts::SQRT_2;
            u.abs() <= half && v.abs() <= half
        }
    }
}

/// Rasterize one object over its background. Pixels outside the object's
/// bounding circle are exactly the background color; boundary pixels blend
/// by supersampled coverage.
pub fn render(spec: &ObjectSpec, params: &RenderParams) -> ImageSample {
    let side = params.image_size;
    let aa = params.antialias.max(1) as usize;
    let mut image = Array3::<f32>::zeros((side, side, 3));
    for ch in 0..3 {
        image.slice_mut(ndarray::s![.., .., ch]).fill(spec.background[ch]);
    }

    // pixels the bounding circle can touch
    let r = spec.radius + 1.0;
    let row_lo = ((spec.y - r).floor().max(0.0)) as usize;
    let row_hi = ((spec.y + r).ceil() as usize).min(side.saturating_sub(1));
    let col_lo = ((spec.x - r).floor().max(0.0)) as usize;
    let col_hi = ((spec.x + r).ceil() as usize).min(side.saturating_sub(1));

    let inv_aa = 1.0 / aa as f32;
    let samples = (aa * aa) as f32;
    for row in row_lo..=row_hi {
        for col in col_lo..=col_hi {
            let mut hits = 0u32;
            for sv in 0..aa {
                let py = row as f32 + (sv as f32 + 0.5) * inv_aa;
                for su in 0..aa {
                    let px = col as f32 + (su as f32 + 0.5) * inv_aa;
                    if inside(spec, px, py) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let cov = hits as f32 / samples;
                for ch in 0..3 {
                    let bg = spec.background[ch];
                    image[(row, col, ch)] = bg + cov * (spec.rgb[ch] - bg);
                }
            }
        }
    }

    ImageSample {
        image,
        class: spec.class.clone(),
        spec: spec.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::ConceptSpace;
    use crate::shapegen::sample_object;
    use crate::rng::substream;

    fn red_large_circle() -> (ObjectSpec, RenderParams) {
        let space = ConceptSpace::default3();
        let params = RenderParams::default();
        let class = space.parse_class("000").unwrap();
        let spec = sample_object(&space, &class, &mut substream(5, "t", 0), &params).unwrap();
        (spec, params)
    }

    #[test]
    fn red_circle_is_red() {
        let (spec, params) = red_large_circle();
        let img = render(&spec, &params).image;
        // mean over object pixels: red channel dominates blue
        let mut red = 0.0;
        let mut blue = 0.0;
        let mut n = 0;
        for row in 0..params.image_size {
            for col in 0..params.image_size {
                if img[(row, col, 0)] < 0.99 {
                    red += img[(row, col, 0)];
                    blue += img[(row, col, 2)];
                    n += 1;
                }
            }
        }
        assert!(n > 50, "expected a large object, got {n} pixels");
        assert!(red / n as f32 > blue / n as f32);
    }

    #[test]
    fn rendering_is_deterministic() {
        let (spec, params) = red_large_circle();
        let a = render(&spec, &params).image;
        let b = render(&spec, &params).image;
        assert_eq!(a, b);
    }

    #[test]
    fn background_pixels_are_exact() {
        let (spec, params) = red_large_circle();
        let img = render(&spec, &params).image;
        // corners lie outside any margin-respecting object
        for &(row, col) in &[(0, 0), (0, 27), (27, 0), (27, 27)] {
            for ch in 0..3 {
                assert_eq!(img[(row, col, ch)], 1.0);
            }
        }
    }

    #[test]
    fn no_object_pixel_on_border() {
        let space = ConceptSpace::default3();
        let params = RenderParams::default();
        for i in 0..200u64 {
            let class = space.enumerate_classes()[(i % 8) as usize].clone();
            let spec =
                sample_object(&space, &class, &mut substream(7, "border", i), &params).unwrap();
            let img = render(&spec, &params).image;
            let last = params.image_size - 1;
            for k in 0..params.image_size {
                for &(row, col) in &[(0, k), (last, k), (k, 0), (k, last)] {
                    for ch in 0..3 {
                        assert_eq!(
                            img[(row, col, ch)],
                            spec.background[ch],
                            "object pixel on border at ({row},{col})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn circle_area_matches_coverage_sum() {
        // coverage-summed area of an antialiased disk approximates pi r^2
        let (mut spec, params) = red_large_circle();
        spec.x = 14.0;
        spec.y = 14.0;
        spec.radius = 9.0;
        let img = render(&spec, &params).image;
        // red channel deficit relative to white background integrates coverage
        let mut area = 0.0f32;
        for row in 0..params.image_size {
            for col in 0..params.image_size {
                let cov = (1.0 - img[(row, col, 2)]) / (1.0 - spec.rgb[2]);
                area += cov;
            }
        }
        let expected = std::f32::consts::PI * spec.radius * spec.radius;
        assert!(
            (area - expected).abs() / expected < 0.02,
            "area {area} vs {expected}"
        );
    }

    #[test]
    fn triangle_rotation_changes_pixels() {
        let space = ConceptSpace::default3();
        let params = RenderParams::default();
        let class = space.parse_class("100").unwrap();
        let mut spec = sample_object(&space, &class, &mut substream(3, "t", 1), &params).unwrap();
        spec.x = 14.0;
        spec.y = 14.0;
        spec.radius = 9.0;
        spec.angle = 0.0;
        let a = render(&spec, &params).image;
        spec.angle = 0.7;
        let b = render(&spec, &params).image;
        assert_ne!(a, b);
    }
}
