use std::fmt::Write;

use super::{SketchError, VectorSketch};

/// Renders one `<path>` per stroke in absolute coordinates.
///
/// The view box is the sketch bounding box grown by a 5% margin on each side.
/// When `stroke_colors` is given it must hold one CSS color per stroke.
pub fn render_svg(
    sketch: &VectorSketch,
    stroke_colors: Option<&[String]>,
) -> Result<String, SketchError> {
    let strokes = sketch.absolute_strokes();
    if let Some(colors) = stroke_colors {
        if colors.len() != strokes.len() {
            return Err(SketchError::ColorCount {
                expected: strokes.len(),
                got: colors.len(),
            });
        }
    }

    let (vx, vy, vw, vh) = match sketch.bounding_box() {
        Some(b) => {
            let extent = b.extent().max(1e-6);
            let mx = 0.05 * b.width().max(extent * 0.1);
            let my = 0.05 * b.height().max(extent * 0.1);
            (b.min_x - mx, b.min_y - my, b.width() + 2.0 * mx, b.height() + 2.0 * my)
        }
        None => (0.0, 0.0, 1.0, 1.0),
    };
    let width = 0.01 * vw.max(vh);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="{vx:.4} {vy:.4} {vw:.4} {vh:.4}">"#
    );
    for (i, stroke) in strokes.iter().enumerate() {
        let color = stroke_colors.map_or("black", |c| c[i].as_str());
        let mut d = String::new();
        for (j, (x, y)) in stroke.iter().enumerate() {
            let cmd = if j == 0 { 'M' } else { 'L' };
            let _ = write!(d, "{cmd}{x:.4} {y:.4} ");
        }
        if stroke.len() == 1 {
            let (x, y) = stroke[0];
            let _ = write!(d, "L{x:.4} {y:.4} ");
        }
        let _ = writeln!(
            out,
            r#"  <path d="{}" fill="none" stroke="{color}" stroke-width="{width:.4}" stroke-linecap="round" stroke-linejoin="round"/>"#,
            d.trim_end()
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::StrokePoint;

    fn parse_paths(svg: &str) -> Vec<Vec<(f64, f64)>> {
        svg.lines()
            .filter_map(|l| {
                let start = l.find(" d=\"")? + 4;
                let end = start + l[start..].find('"')?;
                let mut pts = Vec::new();
                for cmd in l[start..end].split(['M', 'L']).filter(|c| !c.trim().is_empty()) {
                    let mut it = cmd.split_whitespace().map(|v| v.parse::<f64>().unwrap());
                    pts.push((it.next().unwrap(), it.next().unwrap()));
                }
                Some(pts)
            })
            .collect()
    }

    #[test]
    fn empty_sketch_has_no_paths() {
        let svg = render_svg(&VectorSketch::default(), None).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<path").count(), 0);
    }

    #[test]
    fn one_path_per_stroke_and_round_trip() {
        let s = VectorSketch::new(vec![
            StrokePoint::new(1.5, 2.25, false),
            StrokePoint::new(3.0, -1.0, true),
            StrokePoint::new(-0.123456, 7.0, false),
            StrokePoint::new(0.5, 0.5, false),
            StrokePoint::new(0.5, 0.5, true),
        ]);
        let svg = render_svg(&s, None).unwrap();
        let paths = parse_paths(&svg);
        assert_eq!(paths.len(), 2);
        let flat: Vec<_> = paths.into_iter().flatten().collect();
        for (p, a) in flat.iter().zip(s.to_absolute()) {
            assert!((p.0 - a.x).abs() < 1e-3 && (p.1 - a.y).abs() < 1e-3);
        }
    }

    #[test]
    fn color_count_checked() {
        let s = VectorSketch::new(vec![StrokePoint::new(1.0, 1.0, true)]);
        assert!(render_svg(&s, Some(&[])).is_err());
        let svg = render_svg(&s, Some(&["#ff0000".to_string()])).unwrap();
        assert!(svg.contains("stroke=\"#ff0000\""));
    }
}
