//! Vectorized sketches in stroke-3 form.
//!
//! A sketch is an ordered list of pen points, each carrying the offset from
//! the previous point and a pen-lift flag that terminates the current stroke.
//! One point is a *data-segment*; up to five consecutive points of the same
//! stroke form a *stroke-segment*, the unit on which the abstraction agent
//! decides to skip or keep.

mod ndjson;
mod svg;

pub use ndjson::{read_ndjson, write_ndjson, write_records, NdjsonReader, RecordError, SketchRecord};
pub use svg::render_svg;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of data-segments grouped into one stroke-segment.
pub const SEGMENT_LEN: usize = 5;

#[derive(Debug, Error)]
pub enum SketchError {
    #[error("segment index {index} out of range (sketch has {count} stroke-segments)")]
    SegmentOutOfRange { index: usize, count: usize },
    #[error("{got} stroke colors supplied for {expected} strokes")]
    ColorCount { expected: usize, got: usize },
    #[error("malformed sketch: {0}")]
    Malformed(String),
}

/// One data-segment: the pen offset from the previous point and whether the
/// pen lifts after reaching it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrokePoint {
    pub dx: f64,
    pub dy: f64,
    pub pen_lift: bool,
}

impl StrokePoint {
    pub fn new(dx: f64, dy: f64, pen_lift: bool) -> Self {
        Self { dx, dy, pen_lift }
    }
}

/// A point in absolute coordinates tagged with its (0-based) stroke index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsPoint {
    pub x: f64,
    pub y: f64,
    pub stroke: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    /// The larger of width and height.
    pub fn extent(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.min_x + self.max_x),
            0.5 * (self.min_y + self.max_y),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorSketch {
    pub points: Vec<StrokePoint>,
    pub label: Option<usize>,
}

impl VectorSketch {
    pub fn new(points: Vec<StrokePoint>) -> Self {
        Self {
            points,
            label: None,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the stroke-3 invariants: finite offsets and a terminated final stroke.
    pub fn validate(&self) -> Result<(), SketchError> {
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p.dx.is_finite() || !p.dy.is_finite())
        {
            return Err(SketchError::Malformed(format!(
                "non-finite offset at point {i}"
            )));
        }
        match self.points.last() {
            Some(p) if !p.pen_lift => Err(SketchError::Malformed(
                "final point does not lift the pen".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn stroke_count(&self) -> usize {
        let lifts = self.points.iter().filter(|p| p.pen_lift).count();
        // an unterminated trailing run still counts as a stroke
        match self.points.last() {
            Some(p) if !p.pen_lift => lifts + 1,
            _ => lifts,
        }
    }

    /// Half-open point ranges, one per stroke.
    pub fn stroke_ranges(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, p) in self.points.iter().enumerate() {
            if p.pen_lift {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        if start < self.points.len() {
            out.push(start..self.points.len());
        }
        out
    }

    /// Cumulative absolute positions. The first offset is taken from the origin.
    pub fn to_absolute(&self) -> Vec<AbsPoint> {
        let (mut x, mut y, mut stroke) = (0.0, 0.0, 0);
        self.points
            .iter()
            .map(|p| {
                x += p.dx;
                y += p.dy;
                let out = AbsPoint { x, y, stroke };
                if p.pen_lift {
                    stroke += 1;
                }
                out
            })
            .collect()
    }

    /// Absolute strokes as lists of `(x, y)`.
    pub fn absolute_strokes(&self) -> Vec<Vec<(f64, f64)>> {
        let abs = self.to_absolute();
        self.stroke_ranges()
            .into_iter()
            .map(|r| abs[r].iter().map(|p| (p.x, p.y)).collect())
            .collect()
    }

    /// Builds a sketch from absolute strokes; empty strokes are ignored.
    pub fn from_absolute_strokes(strokes: &[Vec<(f64, f64)>]) -> Self {
        let mut points = Vec::new();
        let (mut px, mut py) = (0.0, 0.0);
        for stroke in strokes.iter().filter(|s| !s.is_empty()) {
            for (i, &(x, y)) in stroke.iter().enumerate() {
                points.push(StrokePoint::new(x - px, y - py, i + 1 == stroke.len()));
                px = x;
                py = y;
            }
        }
        Self::new(points)
    }

    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let abs = self.to_absolute();
        let first = abs.first()?;
        let init = BoundingBox {
            min_x: first.x,
            min_y: first.y,
            max_x: first.x,
            max_y: first.y,
        };
        Some(abs.iter().fold(init, |b, p| BoundingBox {
            min_x: b.min_x.min(p.x),
            min_y: b.min_y.min(p.y),
            max_x: b.max_x.max(p.x),
            max_y: b.max_y.max(p.y),
        }))
    }

    /// Divides every offset by the population standard deviation of all
    /// `dx` and `dy` values. Zero-variance sketches are returned unchanged.
    pub fn normalize(&self) -> Self {
        let n = 2 * self.points.len();
        if n == 0 {
            return self.clone();
        }
        let values = || self.points.iter().flat_map(|p| [p.dx, p.dy]);
        let mean = values().sum::<f64>() / n as f64;
        let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return self.clone();
        }
        Self {
            points: self
                .points
                .iter()
                .map(|p| StrokePoint::new(p.dx / std, p.dy / std, p.pen_lift))
                .collect(),
            label: self.label,
        }
    }
}

/// Partition of a sketch's points into stroke-segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentTable {
    pub ranges: Vec<Range<usize>>,
    /// 0-based stroke index of each segment.
    pub stroke_of: Vec<usize>,
}

impl SegmentTable {
    /// Groups each stroke greedily into runs of [`SEGMENT_LEN`] points; the
    /// remainder forms the stroke's final, shorter segment.
    pub fn build(sketch: &VectorSketch) -> Self {
        let mut ranges = Vec::new();
        let mut stroke_of = Vec::new();
        for (stroke, r) in sketch.stroke_ranges().into_iter().enumerate() {
            let mut start = r.start;
            while start < r.end {
                let end = (start + SEGMENT_LEN).min(r.end);
                ranges.push(start..end);
                stroke_of.push(stroke);
                start = end;
            }
        }
        Self { ranges, stroke_of }
    }

    /// Number of stroke-segments (the episode length M).
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn stroke_count(&self) -> usize {
        self.stroke_of.last().map_or(0, |s| s + 1)
    }
}

/// Deletes one stroke-segment while keeping every retained point at its
/// absolute position.
///
/// The deleted offsets are carried into the first point after the gap. When
/// the retained point just before the gap belongs to the same stroke, it is
/// promoted to a pen lift so the remainder starts a new stroke instead of
/// drawing a line across the gap.
pub fn remove_segment(
    sketch: &VectorSketch,
    table: &SegmentTable,
    seg_id: usize,
) -> Result<VectorSketch, SketchError> {
    let range = table
        .ranges
        .get(seg_id)
        .cloned()
        .ok_or(SketchError::SegmentOutOfRange {
            index: seg_id,
            count: table.len(),
        })?;
    let (carry_x, carry_y) = sketch.points[range.clone()]
        .iter()
        .fold((0.0, 0.0), |(x, y), p| (x + p.dx, y + p.dy));

    let mut points = Vec::with_capacity(sketch.len() - range.len());
    points.extend_from_slice(&sketch.points[..range.start]);
    if let Some(prev) = points.last_mut() {
        prev.pen_lift = true;
    }
    let mut rest = sketch.points[range.end..].iter().copied();
    if let Some(mut first) = rest.next() {
        first.dx += carry_x;
        first.dy += carry_y;
        points.push(first);
        points.extend(rest);
    }
    Ok(VectorSketch {
        points,
        label: sketch.label,
    })
}
