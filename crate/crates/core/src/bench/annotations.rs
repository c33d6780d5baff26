use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxKind {
    Object,
    Hand,
}

/// Axis-aligned box `[x1, x2) × [y1, y2)` in pixel coordinates of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub frame: usize,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub kind: BoxKind,
}

impl fmt::Display for CropBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            BoxKind::Object => "object",
            BoxKind::Hand => "hand",
        };
        write!(
            f,
            "{}:{},{},{},{},{}",
            self.frame, self.x1, self.y1, self.x2, self.y2, kind
        )
    }
}

impl FromStr for CropBox {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (frame, rest) = s
            .split_once(':')
            .ok_or_else(|| format!("box {s:?} lacks a frame prefix"))?;
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 5 {
            return Err(format!("box {s:?} needs x1,y1,x2,y2,kind"));
        }
        let num = |p: &str| {
            p.trim()
                .parse::<f32>()
                .map_err(|e| format!("box coordinate {p:?}: {e}"))
        };
        let kind = match parts[4].trim() {
            "object" => BoxKind::Object,
            "hand" => BoxKind::Hand,
            k => return Err(format!("box kind {k:?} is neither object nor hand")),
        };
        let b = CropBox {
            frame: frame
                .trim()
                .parse()
                .map_err(|e| format!("box frame {frame:?}: {e}"))?,
            x1: num(parts[0])?,
            y1: num(parts[1])?,
            x2: num(parts[2])?,
            y2: num(parts[3])?,
            kind,
        };
        if !(b.x1 <= b.x2 && b.y1 <= b.y2) {
            return Err(format!("box {s:?} has inverted corners"));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub segment_id: String,
    pub video_id: String,
    pub verb: String,
    pub object: String,
    pub boxes: Vec<CropBox>,
}

/// Closed label sets; rows naming anything else are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelVocab {
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
}

/// Validated rows with dense verb and object ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationTable {
    rows: Vec<AnnotationRow>,
    verbs: Vec<String>,
    objects: Vec<String>,
    verb_ids: Vec<usize>,
    object_ids: Vec<usize>,
    with_boxes: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    segment_id: String,
    video_id: String,
    verb: String,
    object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<String>,
}

impl AnnotationTable {
    /// Assigns ids in `vocab` order when given, otherwise in order of first
    /// appearance.
    pub fn new(rows: Vec<AnnotationRow>, vocab: Option<&LabelVocab>) -> Result<Self, BenchError> {
        let mut verbs: Vec<String> = vocab.map(|v| v.verbs.clone()).unwrap_or_default();
        let mut objects: Vec<String> = vocab.map(|v| v.objects.clone()).unwrap_or_default();
        let mut verb_index: HashMap<String, usize> = verbs
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, v)| (v, i))
            .collect();
        let mut object_index: HashMap<String, usize> = objects
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, v)| (v, i))
            .collect();
        let mut seen = BTreeSet::new();
        let mut verb_ids = Vec::with_capacity(rows.len());
        let mut object_ids = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            if !seen.insert(row.segment_id.clone()) {
                return Err(BenchError::DuplicateId {
                    row: r + 1,
                    id: row.segment_id.clone(),
                });
            }
            for (label, names, index, ids) in [
                (&row.verb, &mut verbs, &mut verb_index, &mut verb_ids),
                (
                    &row.object,
                    &mut objects,
                    &mut object_index,
                    &mut object_ids,
                ),
            ] {
                let id = match index.get(label) {
                    Some(&id) => id,
                    None if vocab.is_some() => {
                        return Err(BenchError::UnknownLabel {
                            row: r + 1,
                            label: label.clone(),
                        });
                    }
                    None => {
                        names.push(label.clone());
                        index.insert(label.clone(), names.len() - 1);
                        names.len() - 1
                    }
                };
                ids.push(id);
            }
        }
        let with_boxes = rows.iter().any(|r| !r.boxes.is_empty());
        Ok(Self {
            rows,
            verbs,
            objects,
            verb_ids,
            object_ids,
            with_boxes,
        })
    }

    pub fn rows(&self) -> &[AnnotationRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn verb_id(&self, row: usize) -> usize {
        self.verb_ids[row]
    }

    pub fn object_id(&self, row: usize) -> usize {
        self.object_ids[row]
    }

    /// Emits the `boxes` column even when every row is box-free.
    pub fn with_boxes_column(mut self, on: bool) -> Self {
        self.with_boxes = on;
        self
    }

    pub fn to_csv_string(&self) -> Result<String, BenchError> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        let mut header = vec!["segment_id", "video_id", "verb", "object"];
        if self.with_boxes {
            header.push("boxes");
        }
        w.write_record(&header)?;
        for row in &self.rows {
            let boxes = row
                .boxes
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(";");
            let mut rec = vec![
                row.segment_id.as_str(),
                row.video_id.as_str(),
                row.verb.as_str(),
                row.object.as_str(),
            ];
            if self.with_boxes {
                rec.push(&boxes);
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| BenchError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv_str(text: &str, vocab: Option<&LabelVocab>) -> Result<Self, BenchError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        let expected = ["segment_id", "video_id", "verb", "object"];
        let ok = headers.len() >= 4
            && headers.len() <= 5
            && headers.iter().take(4).eq(expected.iter().copied())
            && (headers.len() == 4 || &headers[4] == "boxes");
        if !ok {
            return Err(BenchError::Parse {
                row: 0,
                column: "header".into(),
                message: format!(
                    "expected segment_id,video_id,verb,object[,boxes], got {headers:?}"
                ),
            });
        }
        let has_boxes = headers.len() == 5;
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| BenchError::Parse {
                row,
                column: csv_column(&e, &headers),
                message: e.to_string(),
            })?;
            let boxes = match rec.boxes.as_deref() {
                None | Some("") => Vec::new(),
                Some(b) => b
                    .split(';')
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|message| BenchError::Parse {
                        row,
                        column: "boxes".into(),
                        message,
                    })?,
            };
            for (column, value) in [
                ("segment_id", &rec.segment_id),
                ("verb", &rec.verb),
                ("object", &rec.object),
            ] {
                if value.is_empty() {
                    return Err(BenchError::Parse {
                        row,
                        column: column.into(),
                        message: "empty field".into(),
                    });
                }
            }
            rows.push(AnnotationRow {
                segment_id: rec.segment_id,
                video_id: rec.video_id,
                verb: rec.verb,
                object: rec.object,
                boxes,
            });
        }
        Ok(Self::new(rows, vocab)?.with_boxes_column(has_boxes))
    }
}

fn csv_column(e: &csv::Error, headers: &csv::StringRecord) -> String {
    match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err
            .field()
            .and_then(|f| headers.get(f as usize))
            .unwrap_or("?")
            .to_string(),
        _ => "?".into(),
    }
}

pub fn load_annotations(
    path: &Path,
    vocab: Option<&LabelVocab>,
) -> Result<AnnotationTable, BenchError> {
    AnnotationTable::from_csv_str(&std::fs::read_to_string(path)?, vocab)
}

pub fn write_annotations(path: &Path, table: &AnnotationTable) -> Result<(), BenchError> {
    std::fs::write(path, table.to_csv_string()?)?;
    Ok(())
}
