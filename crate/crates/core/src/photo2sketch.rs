//! Edge-map to sketch conversion: thinning, line tracing, global and
//! stroke-level distortion, arc-length resampling, then abstraction.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{abstract_sketch, AgentError, AgentModel};
use crate::corpus::{derive_seed, Corpus, CorpusItem};
use crate::raster::{rasterize, RasterImage};
use crate::sketch::VectorSketch;

/// Absolute `(x, y)` points of one traced or resampled stroke.
pub type Polyline = Vec<(f64, f64)>;

#[derive(Debug, Error)]
pub enum PhotoError {
    #[error("no strokes traced")]
    NoStrokes,
    #[error("invalid distortion parameters: {0}")]
    Params(String),
    #[error("resample step must be positive, got {0}")]
    Step(f64),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// Zhang–Suen thinning of the foreground (non-zero) pixels.
pub fn zhang_suen(image: &RasterImage) -> RasterImage {
    let (w, h) = (image.width as i64, image.height as i64);
    let mut on: Vec<bool> = image.values.iter().map(|&v| v > 0).collect();
    let at = |on: &[bool], x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && on[(y * w + x) as usize];
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !at(&on, x, y) {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let n = [
                        at(&on, x, y - 1),
                        at(&on, x + 1, y - 1),
                        at(&on, x + 1, y),
                        at(&on, x + 1, y + 1),
                        at(&on, x, y + 1),
                        at(&on, x - 1, y + 1),
                        at(&on, x - 1, y),
                        at(&on, x - 1, y - 1),
                    ];
                    let b = n.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let cond = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        remove.push((y * w + x) as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                on[i] = false;
            }
        }
        if !changed {
            break;
        }
    }
    RasterImage {
        width: image.width,
        height: image.height,
        values: on.into_iter().map(|b| if b { 255 } else { 0 }).collect(),
    }
}

type Pixel = (i64, i64);

/// Neighbours under m-adjacency: 4-neighbours, plus diagonal neighbours that
/// share no 4-neighbour with the pixel. This removes the redundant diagonal
/// links that would otherwise make every corner look like a junction.
fn m_neighbours(img: &RasterImage, (x, y): Pixel) -> Vec<Pixel> {
    let mut out = Vec::with_capacity(4);
    for (dx, dy) in [(0, -1), (1, 0), (0, 1), (-1, 0)] {
        if img.is_on(x + dx, y + dy) {
            out.push((x + dx, y + dy));
        }
    }
    for (dx, dy) in [(1, -1), (1, 1), (-1, 1), (-1, -1)] {
        if img.is_on(x + dx, y + dy) && !img.is_on(x + dx, y) && !img.is_on(x, y + dy) {
            out.push((x + dx, y + dy));
        }
    }
    out
}

fn edge_key(a: Pixel, b: Pixel) -> (Pixel, Pixel) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn to_points(path: &[Pixel]) -> Polyline {
    path.iter().map(|&(x, y)| (x as f64, y as f64)).collect()
}

/// Thins `raster` and splits the skeleton into polylines at junctions
/// (degree ≥ 3) and endpoints. Closed loops come out as one polyline whose
/// last point repeats its first. Isolated pixels are dropped.
pub fn trace(raster: &RasterImage) -> Vec<Polyline> {
    let skel = zhang_suen(raster);
    let pixels: Vec<Pixel> = (0..skel.height as i64)
        .flat_map(|y| (0..skel.width as i64).map(move |x| (x, y)))
        .filter(|&(x, y)| skel.is_on(x, y))
        .collect();
    let degree = |p: Pixel| m_neighbours(&skel, p).len();
    let mut visited: HashSet<(Pixel, Pixel)> = HashSet::new();
    let mut out = Vec::new();

    let walk = |start: Pixel, next: Pixel, visited: &mut HashSet<(Pixel, Pixel)>| -> Vec<Pixel> {
        let mut path = vec![start, next];
        visited.insert(edge_key(start, next));
        let (mut prev, mut cur) = (start, next);
        while cur != start && degree(cur) == 2 {
            let Some(n) = m_neighbours(&skel, cur)
                .into_iter()
                .find(|&n| n != prev && !visited.contains(&edge_key(cur, n)))
            else {
                break;
            };
            visited.insert(edge_key(cur, n));
            path.push(n);
            (prev, cur) = (cur, n);
        }
        path
    };

    for &p in &pixels {
        let d = degree(p);
        if d == 0 || d == 2 {
            continue;
        }
        for n in m_neighbours(&skel, p) {
            if !visited.contains(&edge_key(p, n)) {
                out.push(to_points(&walk(p, n, &mut visited)));
            }
        }
    }
    // whatever remains consists of loops without endpoints or junctions
    for &p in &pixels {
        for n in m_neighbours(&skel, p) {
            if !visited.contains(&edge_key(p, n)) {
                out.push(to_points(&walk(p, n, &mut visited)));
            }
        }
    }
    out
}

/// Converts traced polylines into a stroke-3 sketch, one stroke per polyline.
pub fn polylines_to_sketch(polylines: &[Polyline]) -> VectorSketch {
    VectorSketch::from_absolute_strokes(polylines)
}

/// Sampling ranges for [`distort`]. Translations, stroke offsets and jitter
/// sizes are fractions of the sketch's bounding-box extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistortionParams {
    /// Radians.
    pub rotation: (f64, f64),
    pub translation: (f64, f64),
    pub scale: (f64, f64),
    pub skew_x: (f64, f64),
    pub skew_y: (f64, f64),
    pub stroke_translation: (f64, f64),
    pub jitter_amplitude: f64,
    pub jitter_wavelength: f64,
}

impl Default for DistortionParams {
    fn default() -> Self {
        let deg5 = 5.0 * PI / 180.0;
        Self {
            rotation: (-deg5, deg5),
            translation: (-0.02, 0.02),
            scale: (0.95, 1.05),
            skew_x: (-0.05, 0.05),
            skew_y: (-0.05, 0.05),
            stroke_translation: (-0.01, 0.01),
            jitter_amplitude: 0.01,
            jitter_wavelength: 0.25,
        }
    }
}

impl DistortionParams {
    /// Ranges that leave every sketch unchanged.
    pub fn identity() -> Self {
        Self {
            rotation: (0.0, 0.0),
            translation: (0.0, 0.0),
            scale: (1.0, 1.0),
            skew_x: (0.0, 0.0),
            skew_y: (0.0, 0.0),
            stroke_translation: (0.0, 0.0),
            jitter_amplitude: 0.0,
            jitter_wavelength: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PhotoError> {
        let ranges = [
            ("rotation", self.rotation),
            ("translation", self.translation),
            ("scale", self.scale),
            ("skew_x", self.skew_x),
            ("skew_y", self.skew_y),
            ("stroke_translation", self.stroke_translation),
        ];
        for (name, (lo, hi)) in ranges {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(PhotoError::Params(format!("{name} range ({lo}, {hi})")));
            }
        }
        for (name, v) in [("jitter_amplitude", self.jitter_amplitude), ("jitter_wavelength", self.jitter_wavelength)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(PhotoError::Params(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Uniform draw from `[lo, hi]`; always consumes exactly one value.
fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + u * (hi - lo)
}

/// Applies a random global affine map (rotate, skew, scale, translate about
/// the bounding-box centre), then per-stroke offsets and sinusoidal jitter
/// along each stroke's normal.
pub fn distort<R: Rng + ?Sized>(
    sketch: &VectorSketch,
    params: &DistortionParams,
    rng: &mut R,
) -> Result<VectorSketch, PhotoError> {
    params.validate()?;
    let Some(bbox) = sketch.bounding_box() else {
        return Ok(sketch.clone());
    };
    let extent = bbox.extent();
    let (cx, cy) = bbox.center();
    let theta = draw(rng, params.rotation);
    let kx = draw(rng, params.skew_x);
    let ky = draw(rng, params.skew_y);
    let s = draw(rng, params.scale);
    let tx = draw(rng, params.translation) * extent;
    let ty = draw(rng, params.translation) * extent;
    let (sin, cos) = theta.sin_cos();
    let global = |(x, y): (f64, f64)| {
        let (x, y) = (x - cx, y - cy);
        let (x, y) = (cos * x - sin * y, sin * x + cos * y);
        let (x, y) = (x + kx * y, ky * x + y);
        (cx + s * x + tx, cy + s * y + ty)
    };

    let wavelength = params.jitter_wavelength * extent;
    let strokes: Vec<Polyline> = sketch
        .absolute_strokes()
        .into_iter()
        .map(|stroke| {
            let pts: Polyline = stroke.into_iter().map(global).collect();
            let ox = draw(rng, params.stroke_translation) * extent;
            let oy = draw(rng, params.stroke_translation) * extent;
            let amp = draw(rng, (0.0, params.jitter_amplitude)) * extent;
            let phase = draw(rng, (0.0, 2.0 * PI));
            let mut arc = 0.0;
            (0..pts.len())
                .map(|i| {
                    if i > 0 {
                        arc += dist(pts[i - 1], pts[i]);
                    }
                    let (mut x, mut y) = pts[i];
                    if amp > 0.0 && wavelength > 0.0 && pts.len() > 1 {
                        let a = pts[i.saturating_sub(1)];
                        let b = pts[(i + 1).min(pts.len() - 1)];
                        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                        let len = (dx * dx + dy * dy).sqrt();
                        if len > 0.0 {
                            let d = amp * (2.0 * PI * arc / wavelength + phase).sin();
                            x += -dy / len * d;
                            y += dx / len * d;
                        }
                    }
                    (x + ox, y + oy)
                })
                .collect()
        })
        .collect();
    Ok(VectorSketch {
        label: sketch.label,
        ..VectorSketch::from_absolute_strokes(&strokes)
    })
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt()
}

/// Re-marks one polyline every `step` units of arc length, always keeping
/// both endpoints.
pub fn resample_polyline(points: &[(f64, f64)], step: f64) -> Polyline {
    if points.len() < 2 {
        return points.to_vec();
    }
    let total: f64 = points.windows(2).map(|w| dist(w[0], w[1])).sum();
    if total == 0.0 {
        return vec![points[0]];
    }
    let mut out = vec![points[0]];
    let mut seg = 0;
    let mut seg_start = 0.0;
    let mut k = 1;
    loop {
        let target = k as f64 * step;
        // markers within a hair of the end merge into the endpoint
        if target >= total - 1e-9 * total.max(1.0) {
            break;
        }
        let mut len = dist(points[seg], points[seg + 1]);
        while seg_start + len < target {
            seg_start += len;
            seg += 1;
            len = dist(points[seg], points[seg + 1]);
        }
        let t = (target - seg_start) / len;
        let (a, b) = (points[seg], points[seg + 1]);
        out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
        k += 1;
    }
    out.push(*points.last().unwrap());
    out
}

/// Resamples every stroke at fixed arc-length spacing.
pub fn resample(sketch: &VectorSketch, step: f64) -> Result<VectorSketch, PhotoError> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(PhotoError::Step(step));
    }
    let strokes: Vec<Polyline> = sketch
        .absolute_strokes()
        .iter()
        .map(|s| resample_polyline(s, step))
        .collect();
    Ok(VectorSketch {
        label: sketch.label,
        ..VectorSketch::from_absolute_strokes(&strokes)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct P2sConfig {
    pub threshold: u8,
    /// Resampling step in raster pixels.
    pub step: f64,
    pub distortion: DistortionParams,
}

impl Default for P2sConfig {
    fn default() -> Self {
        Self {
            threshold: 128,
            step: 4.0,
            distortion: DistortionParams::default(),
        }
    }
}

/// Every intermediate stage of the photo-to-sketch pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct P2sStages {
    /// Traced vector edge map.
    pub traced: VectorSketch,
    pub distorted: VectorSketch,
    /// Resampled and normalized; the input to abstraction.
    pub simplified: VectorSketch,
}

/// Trace, distort, resample and normalize an edge raster.
pub fn preprocess_edges<R: Rng + ?Sized>(
    edges: &RasterImage,
    config: &P2sConfig,
    rng: &mut R,
) -> Result<P2sStages, PhotoError> {
    let polylines = trace(&edges.binarize(config.threshold));
    if polylines.is_empty() {
        return Err(PhotoError::NoStrokes);
    }
    let traced = polylines_to_sketch(&polylines);
    let distorted = distort(&traced, &config.distortion, rng)?;
    let simplified = resample(&distorted, config.step)?.normalize();
    Ok(P2sStages {
        traced,
        distorted,
        simplified,
    })
}

/// Full pipeline: preprocessing followed by one abstraction episode at `delta`.
pub fn photo_to_sketch<R: Rng + ?Sized>(
    edges: &RasterImage,
    agent: &AgentModel,
    delta: f64,
    config: &P2sConfig,
    rng: &mut R,
) -> Result<(P2sStages, VectorSketch), PhotoError> {
    let stages = preprocess_edges(edges, config, rng)?;
    let out = abstract_sketch(agent, &stages.simplified, delta, rng)?;
    Ok((stages, out.sketch))
}

/// Re-renders every sketch of `corpus` as an edge raster of `size` pixels and
/// runs it back through preprocessing, producing the edge-map style inputs
/// used for fine-tuning. Items that trace to nothing are dropped.
pub fn edge_style_corpus(corpus: &Corpus, size: usize, config: &P2sConfig, seed: u64) -> Corpus {
    let items = corpus
        .items
        .iter()
        .enumerate()
        .filter_map(|(i, item)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let raster = rasterize(&item.sketch, size, 2);
            let stages = preprocess_edges(&raster, config, &mut rng).ok()?;
            Some(CorpusItem {
                sketch: stages.simplified.with_label(item.label()),
                split: item.split,
                core_strokes: None,
            })
        })
        .collect();
    Corpus {
        class_names: corpus.class_names.clone(),
        items,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::StrokePoint;

    fn blank(n: usize) -> RasterImage {
        RasterImage::new(n, n)
    }

    fn hausdorff_to_segment(points: &[(f64, f64)], a: (f64, f64), b: (f64, f64)) -> f64 {
        let seg_dist = |p: (f64, f64)| {
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            dist(p, (a.0 + t * dx, a.1 + t * dy))
        };
        let forward = points.iter().map(|&p| seg_dist(p)).fold(0.0, f64::max);
        let backward = (0..=100)
            .map(|k| {
                let t = k as f64 / 100.0;
                let q = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
                points.iter().map(|&p| dist(p, q)).fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        forward.max(backward)
    }

    #[test]
    fn blank_traces_to_nothing() {
        assert!(trace(&blank(16)).is_empty());
        let mut dot = blank(8);
        dot.set(3, 3, 255);
        assert!(trace(&dot).is_empty());
    }

    #[test]
    fn single_line() {
        let mut img = blank(40);
        img.draw_line(5, 10, 34, 10, 255);
        let lines = trace(&img);
        assert_eq!(lines.len(), 1);
        assert!(hausdorff_to_segment(&lines[0], (5.0, 10.0), (34.0, 10.0)) <= 1.0);
        // a thick diagonal bar thins to one path too
        let mut thick = blank(40);
        for o in -1..=1 {
            thick.draw_line(5, 5 + o, 30, 30 + o, 255);
        }
        let lines = trace(&thick);
        assert_eq!(lines.len(), 1);
        assert!(hausdorff_to_segment(&lines[0], (5.0, 5.0), (30.0, 30.0)) <= 1.5);
    }

    #[test]
    fn plus_sign_splits_at_the_junction() {
        for width in [1i64, 3] {
            let mut img = blank(41);
            for o in -(width / 2)..=(width / 2) {
                img.draw_line(5, 20 + o, 35, 20 + o, 255);
                img.draw_line(20 + o, 5, 20 + o, 35, 255);
            }
            let lines = trace(&img);
            assert_eq!(lines.len(), 4, "width {width}");
            for l in &lines {
                let ends = [l[0], *l.last().unwrap()];
                assert!(ends.contains(&(20.0, 20.0)), "width {width}: {ends:?}");
            }
        }
    }

    #[test]
    fn closed_loop_and_coverage() {
        let mut img = blank(30);
        img.draw_line(5, 5, 20, 5, 255);
        img.draw_line(20, 5, 20, 20, 255);
        img.draw_line(20, 20, 5, 20, 255);
        img.draw_line(5, 20, 5, 5, 255);
        let lines = trace(&img);
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].first(), lines[0].last());
        let skel = zhang_suen(&img);
        let covered: HashSet<(i64, i64)> = lines
            .iter()
            .flatten()
            .map(|&(x, y)| (x as i64, y as i64))
            .collect();
        assert_eq!(covered.len(), skel.count_on());
        assert!(covered.iter().all(|&(x, y)| skel.is_on(x, y)));
    }

    fn sample_sketch() -> VectorSketch {
        VectorSketch::from_absolute_strokes(&[
            vec![(0.0, 0.0), (3.0, 1.0), (5.0, 4.0), (6.0, 8.0)],
            vec![(-2.0, 3.0), (1.0, 5.0)],
            vec![(4.0, -1.0)],
        ])
    }

    fn assert_close(a: &VectorSketch, b: &VectorSketch, tol: f64) {
        let (pa, pb) = (a.to_absolute(), b.to_absolute());
        assert_eq!(pa.len(), pb.len());
        for (p, q) in pa.iter().zip(&pb) {
            assert!((p.x - q.x).abs() <= tol && (p.y - q.y).abs() <= tol, "{p:?} vs {q:?}");
            assert_eq!(p.stroke, q.stroke);
        }
    }

    #[test]
    fn identity_distortion() {
        let s = sample_sketch();
        let out = distort(&s, &DistortionParams::identity(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_close(&out, &s, 1e-9);
    }

    #[test]
    fn quarter_turn_matches_rotation_oracle() {
        let s = sample_sketch();
        let params = DistortionParams {
            rotation: (PI / 2.0, PI / 2.0),
            ..DistortionParams::identity()
        };
        let out = distort(&s, &params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (cx, cy) = s.bounding_box().unwrap().center();
        let expected: Vec<Polyline> = s
            .absolute_strokes()
            .iter()
            .map(|st| st.iter().map(|&(x, y)| (cx - (y - cy), cy + (x - cx))).collect())
            .collect();
        assert_close(&out, &VectorSketch::from_absolute_strokes(&expected), 1e-9);
    }

    #[test]
    fn distortion_is_seeded() {
        let s = sample_sketch();
        let p = DistortionParams::default();
        let a = distort(&s, &p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, distort(&s, &p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
        assert_ne!(a, distort(&s, &p, &mut ChaCha8Rng::seed_from_u64(4)).unwrap());
        let bad = DistortionParams {
            scale: (1.1, 0.9),
            ..p
        };
        assert!(distort(&s, &bad, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn resample_examples() {
        let line = vec![(0.0, 0.0), (10.0, 0.0)];
        let out = resample_polyline(&line, 2.0);
        assert_eq!(out.len(), 6);
        for (k, p) in out.iter().enumerate() {
            assert!((p.0 - 2.0 * k as f64).abs() < 1e-12 && p.1 == 0.0);
        }
        assert_eq!(resample_polyline(&line, 10.0), line);
        assert_eq!(resample_polyline(&line, 25.0), line);
        assert_eq!(resample_polyline(&[(1.0, 1.0)], 2.0), vec![(1.0, 1.0)]);
        let s = VectorSketch::new(vec![StrokePoint::new(0.0, 0.0, false), StrokePoint::new(3.0, 4.0, true)]);
        assert_eq!(resample(&s, 1.0).unwrap().len(), 6);
        assert!(resample(&s, 0.0).is_err());
    }

    #[test]
    fn square_raster_pipeline() {
        let mut img = blank(48);
        for (a, b) in [((8, 8), (40, 8)), ((40, 8), (40, 40)), ((40, 40), (8, 40)), ((8, 40), (8, 8))] {
            img.draw_line(a.0, a.1, b.0, b.1, 255);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stages = preprocess_edges(&img, &P2sConfig::default(), &mut rng).unwrap();
        assert_eq!(stages.traced.stroke_count(), 1);
        assert!(stages.simplified.len() < stages.traced.len());
        stages.simplified.validate().unwrap();
        let agent = AgentModel::new(Default::default(), 0).unwrap();
        let cfg = P2sConfig::default();
        let (st, out) = photo_to_sketch(&img, &agent, -1.0, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(out, st.simplified);
        assert!(matches!(
            photo_to_sketch(&blank(10), &agent, 0.0, &cfg, &mut rng),
            Err(PhotoError::NoStrokes)
        ));
    }
}
