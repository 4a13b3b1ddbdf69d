//! Newline-delimited JSON sketch records.
//!
//! Two record shapes are accepted on input:
//!
//! * native stroke-3: `{"label": 2, "points": [[dx, dy, p], ...]}`
//! * QuickDraw simplified: `{"word": "cat", "drawing": [[[x0, x1, ...], [y0, y1, ...]], ...]}`
//!
//! Output is always the native shape. Optional `class`, `id` and
//! `core_strokes` fields ride along on native records.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{StrokePoint, VectorSketch};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SketchRecord {
    pub sketch: VectorSketch,
    pub class: Option<String>,
    pub id: Option<String>,
    /// Number of leading strokes that carry the class shape; trailing strokes
    /// are decoration. Only known for generated corpora.
    pub core_strokes: Option<usize>,
}

impl SketchRecord {
    pub fn new(sketch: VectorSketch) -> Self {
        Self {
            sketch,
            ..Default::default()
        }
    }
}

#[derive(Debug, Error)]
#[error("line {line}: {message}")]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    label: Option<usize>,
    points: Option<Vec<(f64, f64, f64)>>,
    class: Option<String>,
    id: Option<String>,
    core_strokes: Option<usize>,
    word: Option<String>,
    drawing: Option<Vec<Vec<Vec<f64>>>>,
    // QuickDraw metadata we accept and drop
    key_id: Option<serde_json::Value>,
    countrycode: Option<serde_json::Value>,
    timestamp: Option<serde_json::Value>,
    recognized: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    core_strokes: Option<usize>,
    points: Vec<(f64, f64, u8)>,
}

fn parse_record(line: &str) -> Result<SketchRecord, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let _ = (&raw.key_id, &raw.countrycode, &raw.timestamp, &raw.recognized);
    let sketch = match (raw.points, raw.drawing) {
        (Some(points), None) => {
            let points = points
                .into_iter()
                .enumerate()
                .map(|(i, (dx, dy, p))| {
                    let pen_lift = match p {
                        v if v == 0.0 => false,
                        v if v == 1.0 => true,
                        v => return Err(format!("point {i}: pen flag {v} is not 0 or 1")),
                    };
                    Ok(StrokePoint::new(dx, dy, pen_lift))
                })
                .collect::<Result<Vec<_>, _>>()?;
            VectorSketch::new(points)
        }
        (None, Some(drawing)) => {
            let mut strokes = Vec::with_capacity(drawing.len());
            for (i, stroke) in drawing.iter().enumerate() {
                let [xs, ys] = stroke.as_slice() else {
                    return Err(format!("stroke {i}: expected [xs, ys]"));
                };
                if xs.len() != ys.len() {
                    return Err(format!("stroke {i}: {} xs vs {} ys", xs.len(), ys.len()));
                }
                strokes.push(xs.iter().copied().zip(ys.iter().copied()).collect());
            }
            VectorSketch::from_absolute_strokes(&strokes)
        }
        (Some(_), Some(_)) => return Err("record has both points and drawing".into()),
        (None, None) => return Err("record has neither points nor drawing".into()),
    };
    let mut sketch = sketch;
    sketch.label = raw.label;
    sketch.validate().map_err(|e| e.to_string())?;
    Ok(SketchRecord {
        sketch,
        class: raw.class.or(raw.word),
        id: raw.id,
        core_strokes: raw.core_strokes,
    })
}

/// Streams records from a reader; a bad line yields an error and reading continues.
pub struct NdjsonReader<R> {
    lines: io::Lines<R>,
    line: usize,
}

impl<R: BufRead> NdjsonReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line: 0,
        }
    }
}

impl<R: BufRead> Iterator for NdjsonReader<R> {
    type Item = Result<SketchRecord, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = self.lines.next()?;
            self.line += 1;
            let line = self.line;
            match text {
                Ok(t) if t.trim().is_empty() => continue,
                Ok(t) => {
                    return Some(parse_record(&t).map_err(|message| RecordError { line, message }))
                }
                Err(e) => {
                    return Some(Err(RecordError {
                        line,
                        message: e.to_string(),
                    }))
                }
            }
        }
    }
}

/// Reads every record of a file, collecting per-line errors separately.
pub fn read_ndjson(path: impl AsRef<Path>) -> io::Result<(Vec<SketchRecord>, Vec<RecordError>)> {
    let reader = NdjsonReader::new(BufReader::new(File::open(path)?));
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for item in reader {
        match item {
            Ok(r) => records.push(r),
            Err(e) => errors.push(e),
        }
    }
    Ok((records, errors))
}

pub fn write_records<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = &'a SketchRecord>,
) -> io::Result<()> {
    for r in records {
        let rec = OutRecord {
            label: r.sketch.label,
            class: r.class.as_deref(),
            id: r.id.as_deref(),
            core_strokes: r.core_strokes,
            points: r
                .sketch
                .points
                .iter()
                .map(|p| (p.dx, p.dy, p.pen_lift as u8))
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_ndjson<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a SketchRecord>,
) -> io::Result<()> {
    write_records(BufWriter::new(File::create(path)?), records)
}
