use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::classes::ClassId;
use crate::geometry::{BBox, Detection};

/// Raw coordinates at or below this value may be in a normalized frame.
pub const DEFAULT_CEILING: f64 = 1000.0;

const MAX_BRACKET_STARTS: usize = 32;

const SENTINELS: &[&str] = &[
    "no hazard",
    "no spill",
    "no leak",
    "none detected",
    "nothing detected",
    "not present",
    "no anomal",
    "no visible",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    /// The whole reply was valid JSON.
    Clean,
    /// JSON had to be dug out of a code fence or surrounding prose.
    Repaired,
    /// The model said there is nothing to report.
    Empty,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedDetections {
    pub detections: Vec<Detection>,
    pub status: ParseStatus,
    pub raw_text: String,
    /// Records that were recognizable but malformed and therefore dropped.
    #[serde(default)]
    pub dropped: usize,
    /// Detections whose score was absent and defaulted to 1.0.
    #[serde(default)]
    pub missing_scores: usize,
}

impl ParsedDetections {
    fn empty(text: &str, status: ParseStatus) -> Self {
        Self {
            detections: Vec::new(),
            status,
            raw_text: text.to_string(),
            dropped: 0,
            missing_scores: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParseOptions {
    pub ceiling: f64,
    /// Class assigned to records that carry no `category_id`.
    pub class_hint: Option<ClassId>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            ceiling: DEFAULT_CEILING,
            class_hint: None,
        }
    }
}

/// Maps a raw `[x, y, w, h]` onto absolute pixels. When every value is at or
/// below `ceiling` and the image is larger than that, the box is read as
/// being in a `[0, ceiling]` frame and rescaled per axis. The result is
/// clamped to the image; negative extents and boxes left with no area are
/// rejected. A ceiling of zero disables rescaling.
pub fn normalize_coords(raw: [f64; 4], image_w: u32, image_h: u32, ceiling: f64) -> Option<BBox> {
    if raw.iter().any(|v| !v.is_finite()) || raw[2] < 0.0 || raw[3] < 0.0 {
        return None;
    }
    let (iw, ih) = (image_w as f64, image_h as f64);
    let [mut x, mut y, mut w, mut h] = raw;
    if ceiling > 0.0 && raw.iter().all(|v| *v <= ceiling) && (iw > ceiling || ih > ceiling) {
        let (sx, sy) = (iw / ceiling, ih / ceiling);
        x *= sx;
        w *= sx;
        y *= sy;
        h *= sy;
    }
    let b = BBox::from_xywh(x, y, w, h).ok()?.clamp_to(iw, ih);
    (b.area() > 0.0).then_some(b)
}

fn number(v: &Value) -> Option<f64> {
    v.as_f64().filter(|f| f.is_finite())
}

fn four(v: &Value) -> Option<[f64; 4]> {
    let a = v.as_array()?;
    if a.len() != 4 {
        return None;
    }
    Some([number(&a[0])?, number(&a[1])?, number(&a[2])?, number(&a[3])?])
}

enum Record {
    Ok(Detection, bool),
    Malformed,
}

fn record(obj: &serde_json::Map<String, Value>, w: u32, h: u32, opts: &ParseOptions) -> Record {
    let raw = if let Some(b) = obj.get("bbox") {
        four(b)
    } else {
        obj.get("bbox_2d")
            .and_then(four)
            .map(|[x0, y0, x1, y1]| [x0, y0, x1 - x0, y1 - y0])
    };
    let Some(bbox) = raw.and_then(|r| normalize_coords(r, w, h, opts.ceiling)) else {
        return Record::Malformed;
    };
    let class = match obj.get("category_id") {
        Some(v) => match v.as_u64().and_then(|n| u32::try_from(n).ok()) {
            Some(n) => ClassId(n),
            None => return Record::Malformed,
        },
        None => match opts.class_hint {
            Some(c) => c,
            None => return Record::Malformed,
        },
    };
    let score = obj.get("score").or_else(|| obj.get("confidence"));
    let (score, missing) = match score {
        None | Some(Value::Null) => (1.0, true),
        Some(v) => match number(v) {
            Some(s) => (s, false),
            None => return Record::Malformed,
        },
    };
    match Detection::new(bbox, class, score) {
        Ok(d) => Record::Ok(d, missing),
        Err(_) => Record::Malformed,
    }
}

fn is_record(v: &Value) -> bool {
    v.as_object()
        .is_some_and(|o| o.contains_key("bbox") || o.contains_key("bbox_2d"))
}

/// Finds the list of detection-shaped objects in a JSON value. `None` when the
/// value does not look like a detection answer at all.
fn records(v: &Value) -> Option<Vec<&serde_json::Map<String, Value>>> {
    match v {
        Value::Array(items) => {
            if items.iter().all(is_record) {
                Some(items.iter().filter_map(Value::as_object).collect())
            } else {
                None
            }
        }
        Value::Object(o) if is_record(v) => Some(vec![o]),
        Value::Object(o) => ["annotations", "detections", "results", "objects"]
            .iter()
            .find_map(|k| o.get(*k))
            .and_then(records),
        _ => None,
    }
}

fn from_value(
    v: &Value,
    text: &str,
    status: ParseStatus,
    w: u32,
    h: u32,
    opts: &ParseOptions,
) -> Option<ParsedDetections> {
    let recs = records(v)?;
    if recs.is_empty() {
        return Some(ParsedDetections::empty(text, ParseStatus::Empty));
    }
    let mut out = ParsedDetections::empty(text, status);
    for r in recs {
        match record(r, w, h, opts) {
            Record::Ok(d, missing) => {
                out.missing_scores += usize::from(missing);
                out.detections.push(d);
            }
            Record::Malformed => {
                tracing::debug!(record = ?r, "dropping malformed detection");
                out.dropped += 1;
            }
        }
    }
    Some(out)
}

fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let body = &after[body_start..];
        match body.find("```") {
            Some(end) => {
                out.push(&body[..end]);
                rest = &body[end + 3..];
            }
            None => {
                out.push(body);
                break;
            }
        }
    }
    out
}

/// The bracketed span starting at `start`, if its brackets balance.
fn balanced_from(text: &str, start: usize) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut stack = Vec::new();
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'[' => stack.push(b']'),
            b'{' => stack.push(b'}'),
            b']' | b'}' => {
                if stack.pop() != Some(b) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

pub fn parse_response(text: &str, image_w: u32, image_h: u32) -> ParsedDetections {
    parse_response_with(text, image_w, image_h, &ParseOptions::default())
}

/// Total: every input yields a result. Strategies are tried in order: the
/// whole text as JSON, fenced code blocks, then the first balanced bracket
/// spans; failing those, a refusal phrase marks the reply empty.
pub fn parse_response_with(
    text: &str,
    image_w: u32,
    image_h: u32,
    opts: &ParseOptions,
) -> ParsedDetections {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return ParsedDetections::empty(text, ParseStatus::Empty);
    }
    let attempt = |candidate: &str, status| {
        serde_json::from_str::<Value>(candidate.trim())
            .ok()
            .and_then(|v| from_value(&v, text, status, image_w, image_h, opts))
    };
    if let Some(p) = attempt(trimmed, ParseStatus::Clean) {
        return p;
    }
    for block in fenced_blocks(text) {
        if let Some(p) = attempt(block, ParseStatus::Repaired) {
            return p;
        }
    }
    let starts = text
        .char_indices()
        .filter(|(_, c)| *c == '[' || *c == '{')
        .map(|(i, _)| i)
        .take(MAX_BRACKET_STARTS);
    for s in starts {
        if let Some(p) = balanced_from(text, s).and_then(|span| attempt(span, ParseStatus::Repaired)) {
            return p;
        }
    }
    let lower = trimmed.to_lowercase();
    if SENTINELS.iter().any(|s| lower.contains(s)) {
        return ParsedDetections::empty(text, ParseStatus::Empty);
    }
    ParsedDetections::empty(text, ParseStatus::Unparseable)
}

/// COCO-style record list, the same shape the parser accepts.
pub fn serialize_detections(dets: &[Detection]) -> String {
    let recs: Vec<Value> = dets
        .iter()
        .map(|d| {
            json!({
                "category_id": d.class_id,
                "bbox": d.bbox.to_xywh(),
                "score": d.score,
            })
        })
        .collect();
    serde_json::to_string(&recs).expect("detections serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SUPP_C: &str = r#"{
"image_id": 134,
"category_id": 3,
"bbox": [256, 411, 142, 95],
"score": 0.97
}"#;

    #[test]
    fn supplementary_record_clean() {
        let p = parse_response(SUPP_C, 512, 512);
        assert_eq!(p.status, ParseStatus::Clean);
        assert_eq!(p.detections.len(), 1);
        let d = &p.detections[0];
        assert_eq!(d.bbox.to_xywh(), [256.0, 411.0, 142.0, 95.0]);
        assert_eq!(d.score, 0.97);
        assert_eq!(d.class_id, ClassId(3));
    }

    #[test]
    fn fenced_record_repaired() {
        let fenced = format!("Here you go:\n```json\n{SUPP_C}\n```\nStay safe.");
        let p = parse_response(&fenced, 512, 512);
        assert_eq!(p.status, ParseStatus::Repaired);
        let inner = fenced_blocks(&fenced)[0];
        let strict = parse_response(inner, 512, 512);
        assert_eq!(strict.status, ParseStatus::Clean);
        assert_eq!(p.detections, strict.detections);
    }

    #[test]
    fn prose_and_sentinels() {
        assert_eq!(
            parse_response("I cannot tell from this picture.", 100, 100).status,
            ParseStatus::Unparseable
        );
        let p = parse_response("No hazard detected.", 100, 100);
        assert_eq!(p.status, ParseStatus::Empty);
        assert!(p.detections.is_empty());
        assert_eq!(parse_response("  ", 100, 100).status, ParseStatus::Empty);
        assert_eq!(parse_response("[]", 100, 100).status, ParseStatus::Empty);
    }

    #[test]
    fn balanced_extraction_skips_prose_brackets() {
        let t = r#"The spill (see [note]) is at [{"category_id": 1, "bbox": [1, 2, 3, 4], "score": 0.5}] ok"#;
        let p = parse_response(t, 100, 100);
        assert_eq!(p.status, ParseStatus::Repaired);
        assert_eq!(p.detections[0].bbox.to_xywh(), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn normalized_frame_rescaled() {
        let b = normalize_coords([100.0, 100.0, 300.0, 300.0], 2048, 2048, 1000.0).unwrap();
        for (got, want) in b.to_xywh().iter().zip([204.8, 204.8, 614.4, 614.4]) {
            assert!((got - want).abs() < 1e-9);
        }
        let back: Vec<f64> = b.to_xywh().iter().map(|v| v / 2.048).collect();
        for (got, want) in back.iter().zip([100.0, 100.0, 300.0, 300.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        let abs = normalize_coords([256.0, 411.0, 142.0, 95.0], 512, 512, 1000.0).unwrap();
        assert_eq!(abs.to_xywh(), [256.0, 411.0, 142.0, 95.0]);
        assert!(normalize_coords([10.0, 10.0, -5.0, 4.0], 512, 512, 1000.0).is_none());
        // A zero ceiling turns the heuristic off.
        let off = normalize_coords([100.0, 100.0, 300.0, 300.0], 2048, 2048, 0.0).unwrap();
        assert_eq!(off.to_xywh(), [100.0, 100.0, 300.0, 300.0]);
    }

    #[test]
    fn malformed_records_dropped() {
        let t = r#"[{"category_id": 1, "bbox": [10, 10, -5, 4], "score": 0.9},
                    {"category_id": 1, "bbox": [10, 10, 5, 4]}]"#;
        let p = parse_response(t, 100, 100);
        assert_eq!(p.dropped, 1);
        assert_eq!(p.missing_scores, 1);
        assert_eq!(p.detections[0].score, 1.0);
    }

    #[test]
    fn class_hint_and_bbox_2d() {
        let t = r#"[{"bbox_2d": [10, 20, 40, 60], "label": "oil spill"}]"#;
        assert_eq!(parse_response(t, 100, 100).dropped, 1);
        let opts = ParseOptions {
            class_hint: Some(ClassId(1)),
            ..Default::default()
        };
        let p = parse_response_with(t, 100, 100, &opts);
        assert_eq!(p.detections[0].bbox.to_xywh(), [10.0, 20.0, 30.0, 40.0]);
        assert_eq!(p.detections[0].class_id, ClassId(1));
    }
}
