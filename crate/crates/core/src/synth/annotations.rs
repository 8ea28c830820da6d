use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{class_id, class_name, BoundingBox};
use crate::error::{Error, Result};
use crate::io_util::{atomic_write, read_text};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// Ground truth of one slide. Bubble boxes are kept for analysis but never
/// used as labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<LabeledBox>,
    pub bubbles: Vec<BoundingBox>,
}

impl Annotation {
    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for b in &self.boxes {
            if let Some(slot) = c.get_mut(b.class_id) {
                *slot += 1;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::Validation {
                image: self.image.clone(),
                msg,
            })
        };
        if self.image.is_empty() || self.image.contains(char::is_whitespace) {
            return fail("image id must be non-empty without whitespace".into());
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, b) in self.boxes.iter().enumerate() {
            if b.class_id >= 3 {
                return fail(format!("box {i} has class id {}", b.class_id));
            }
            if !b.bbox.is_inside(w, h, 1e-6) {
                return fail(format!(
                    "box {i} {:?} exceeds the {}x{} frame",
                    b.bbox, self.width, self.height
                ));
            }
        }
        for (i, b) in self.bubbles.iter().enumerate() {
            if !b.is_valid_in(w, h) {
                return fail(format!("bubble {i} {b:?} lies outside the frame"));
            }
        }
        Ok(())
    }
}

/// One line of the annotation file. An image line carries `width` and
/// `height`; a label line carries `class`; a distractor line carries
/// `distractor`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    image: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    height: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    class: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    distractor: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    cx: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    cy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    w: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    h: Option<f64>,
}

fn box_line(image: &str, b: &BoundingBox) -> Line {
    Line {
        image: image.to_string(),
        width: None,
        height: None,
        class: None,
        distractor: None,
        cx: Some(b.cx),
        cy: Some(b.cy),
        w: Some(b.w),
        h: Some(b.h),
    }
}

pub fn format_annotations(anns: &[Annotation]) -> String {
    let mut out = String::new();
    let mut push = |l: &Line| {
        out.push_str(&serde_json::to_string(l).expect("plain struct"));
        out.push('\n');
    };
    for a in anns {
        push(
            &Line {
                width: Some(a.width),
                height: Some(a.height),
                ..box_line(&a.image, &BoundingBox::new(0.0, 0.0, 0.0, 0.0))
            }
            .without_box(),
        );
        for b in &a.boxes {
            push(&Line {
                class: Some(class_name(b.class_id).to_string()),
                ..box_line(&a.image, &b.bbox)
            });
        }
        for b in &a.bubbles {
            push(&Line {
                distractor: Some("bubble".into()),
                ..box_line(&a.image, b)
            });
        }
    }
    out
}

impl Line {
    fn without_box(self) -> Line {
        Line {
            cx: None,
            cy: None,
            w: None,
            h: None,
            ..self
        }
    }

    fn bbox(&self, line: usize) -> Result<BoundingBox> {
        match (self.cx, self.cy, self.w, self.h) {
            (Some(cx), Some(cy), Some(w), Some(h)) => Ok(BoundingBox::new(cx, cy, w, h)),
            _ => Err(Error::Parse {
                line,
                msg: "box line needs cx, cy, w and h".into(),
            }),
        }
    }
}

/// Parses and validates annotation lines. Box lines may precede their image
/// line; images without an image line are rejected.
pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>> {
    let mut out: Vec<Annotation> = Vec::new();
    let mut seen_header: Vec<bool> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let slot = *index.entry(line.image.clone()).or_insert_with(|| {
            out.push(Annotation {
                image: line.image.clone(),
                width: 0,
                height: 0,
                boxes: Vec::new(),
                bubbles: Vec::new(),
            });
            seen_header.push(false);
            out.len() - 1
        });
        let parse_err = |msg: &str| Error::Parse {
            line: line_no,
            msg: msg.to_string(),
        };
        match (&line.class, &line.distractor, line.width, line.height) {
            (None, None, Some(w), Some(h)) => {
                if seen_header[slot] {
                    return Err(parse_err("duplicate image line"));
                }
                if line.cx.is_some() || line.cy.is_some() || line.w.is_some() || line.h.is_some() {
                    return Err(parse_err("image line must not carry a box"));
                }
                seen_header[slot] = true;
                out[slot].width = w;
                out[slot].height = h;
            }
            (Some(class), None, None, None) => {
                let class_id = class_id(class)
                    .ok_or_else(|| parse_err(&format!("unknown class {class:?}")))?;
                let bbox = line.bbox(line_no)?;
                out[slot].boxes.push(LabeledBox { bbox, class_id });
            }
            (None, Some(d), None, None) if d == "bubble" => {
                let bbox = line.bbox(line_no)?;
                out[slot].bubbles.push(bbox);
            }
            _ => {
                return Err(parse_err(
                    "line is neither an image, a label nor a distractor",
                ))
            }
        }
    }
    for (a, seen) in out.iter().zip(&seen_header) {
        if !seen {
            return Err(Error::Validation {
                image: a.image.clone(),
                msg: "missing image line with width and height".into(),
            });
        }
        a.validate()?;
    }
    Ok(out)
}

pub fn save_annotations(anns: &[Annotation], path: &Path) -> Result<()> {
    for a in anns {
        a.validate()?;
    }
    atomic_write(path, format_annotations(anns).as_bytes())
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    parse_annotations(&read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Annotation> {
        vec![
            Annotation {
                image: "a".into(),
                width: 100,
                height: 80,
                boxes: vec![LabeledBox {
                    bbox: BoundingBox::new(10.1, 20.2, 5.3, 7.0 / 3.0),
                    class_id: 2,
                }],
                bubbles: vec![BoundingBox::new(50.0, 40.0, 10.0, 10.0)],
            },
            Annotation {
                image: "b".into(),
                width: 100,
                height: 80,
                boxes: vec![],
                bubbles: vec![],
            },
        ]
    }

    #[test]
    fn text_round_trip_is_exact() {
        let anns = sample();
        assert_eq!(parse_annotations(&format_annotations(&anns)).unwrap(), anns);
        assert!(parse_annotations("").unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let mut text = format_annotations(&sample());
        text.push_str("{\"image\": \"a\", \"class\": \"round\"}\n");
        match parse_annotations(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_frame_box_names_image() {
        let mut anns = sample();
        anns[0].boxes[0].bbox.cx = 99.0;
        let err = parse_annotations(&format_annotations(&anns)).unwrap_err();
        assert!(
            matches!(err, Error::Validation { ref image, .. } if image == "a"),
            "{err}"
        );
    }
}
