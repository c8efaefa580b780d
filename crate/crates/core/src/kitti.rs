//! KITTI label, calibration and result file IO, plus difficulty strata.
//!
//! Labels are written at full float precision (shortest round-trip form);
//! result files use the fixed 2-decimal convention. Reads tolerate LF or
//! CRLF, writes emit LF.

use crate::error::{Error, Result};

/// One KITTI object annotation or detection line.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    /// Category text, preserved verbatim (e.g. "Car", "DontCare").
    pub kind: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    /// (left, top, right, bottom) pixels.
    pub bbox: [f64; 4],
    /// (height, width, length) meters.
    pub dims: [f64; 3],
    /// Bottom-center location (x, y, z) in the camera frame, meters.
    pub loc: [f64; 3],
    pub ry: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn bbox_height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn is_dontcare(&self) -> bool {
        self.kind == "DontCare"
    }
}

/// Camera-2 projection matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibRecord {
    pub p2: [[f64; 4]; 3],
}

impl CalibRecord {
    /// Synthetic pinhole: focal f, principal point (cx, cy), no offsets.
    pub fn pinhole(f: f64, cx: f64, cy: f64) -> Self {
        CalibRecord {
            p2: [
                [f, 0.0, cx, 0.0],
                [0.0, f, cy, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p2[0][0] <= 0.0 {
            return Err(Error::contract("P2 focal length must be positive"));
        }
        Ok(())
    }

    /// Project a camera-frame point to pixels.
    pub fn project(&self, x: f64, y: f64, z: f64) -> (f64, f64) {
        let p = &self.p2;
        let wz = p[2][0] * x + p[2][1] * y + p[2][2] * z + p[2][3];
        let u = (p[0][0] * x + p[0][1] * y + p[0][2] * z + p[0][3]) / wz;
        let v = (p[1][0] * x + p[1][1] * y + p[1][2] * z + p[1][3]) / wz;
        (u, v)
    }

    /// Invert the pinhole projection at a known camera depth z
    /// (assumes the KITTI P2 layout: zero skew, third row [0,0,1,t]).
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> (f64, f64, f64) {
        let p = &self.p2;
        let w = p[2][2] * z + p[2][3];
        let x = (u * w - p[0][2] * z - p[0][3]) / p[0][0];
        let y = (v * w - p[1][2] * z - p[1][3]) / p[1][1];
        (x, y, z)
    }
}

/// KITTI difficulty stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
            Difficulty::Ignored => "ignored",
        }
    }
}

/// Official thresholds: box height ≥ 40/25/25 px, occlusion ≤ 0/1/2,
/// truncation ≤ 0.15/0.30/0.50 for Easy/Moderate/Hard.
pub fn classify_difficulty(rec: &LabelRecord) -> Difficulty {
    let h = rec.bbox_height();
    if h >= 40.0 && rec.occluded <= 0 && rec.truncated <= 0.15 {
        Difficulty::Easy
    } else if h >= 25.0 && rec.occluded <= 1 && rec.truncated <= 0.30 {
        Difficulty::Moderate
    } else if h >= 25.0 && rec.occluded <= 2 && rec.truncated <= 0.50 {
        Difficulty::Hard
    } else {
        Difficulty::Ignored
    }
}

fn parse_field<T: std::str::FromStr>(field: &str, line_no: usize, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::parse(line_no, format!("bad {what}: {field:?}")))
}

/// Parse a label or result file. Lines need 15 whitespace-separated fields;
/// a 16th is read as the score. Blank lines are skipped.
pub fn parse_label_file(text: &str) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 15 {
            return Err(Error::parse(
                line_no,
                format!("expected at least 15 fields, got {}", fields.len()),
            ));
        }
        let occluded: i32 = {
            // occlusion is an integer written either plain or as a float
            let f: f64 = parse_field(fields[2], line_no, "occlusion")?;
            f.round() as i32
        };
        if !(-1..=3).contains(&occluded) {
            return Err(Error::parse(
                line_no,
                format!("occlusion {occluded} outside -1..=3"),
            ));
        }
        let num = |idx: usize, what: &str| -> Result<f64> { parse_field(fields[idx], line_no, what) };
        out.push(LabelRecord {
            kind: fields[0].to_string(),
            truncated: num(1, "truncation")?,
            occluded,
            alpha: num(3, "alpha")?,
            bbox: [
                num(4, "bbox.left")?,
                num(5, "bbox.top")?,
                num(6, "bbox.right")?,
                num(7, "bbox.bottom")?,
            ],
            dims: [num(8, "height")?, num(9, "width")?, num(10, "length")?],
            loc: [num(11, "x")?, num(12, "y")?, num(13, "z")?],
            ry: num(14, "ry")?,
            score: if fields.len() > 15 {
                Some(num(15, "score")?)
            } else {
                None
            },
        });
    }
    Ok(out)
}

/// Write annotation lines at full float precision; the score field appears
/// only when present.
pub fn write_label_file(records: &[LabelRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            r.kind,
            r.truncated,
            r.occluded,
            r.alpha,
            r.bbox[0],
            r.bbox[1],
            r.bbox[2],
            r.bbox[3],
            r.dims[0],
            r.dims[1],
            r.dims[2],
            r.loc[0],
            r.loc[1],
            r.loc[2],
            r.ry
        ));
        if let Some(s) = r.score {
            out.push_str(&format!(" {s}"));
        }
        out.push('\n');
    }
    out
}

/// Write detection lines in the fixed 2-decimal result convention.
/// Every record must carry a score.
pub fn write_result_file(records: &[LabelRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let score = r
            .score
            .ok_or_else(|| Error::contract("result record without a score"))?;
        out.push_str(&format!(
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}\n",
            r.kind,
            r.truncated,
            r.occluded,
            r.alpha,
            r.bbox[0],
            r.bbox[1],
            r.bbox[2],
            r.bbox[3],
            r.dims[0],
            r.dims[1],
            r.dims[2],
            r.loc[0],
            r.loc[1],
            r.loc[2],
            r.ry,
            score
        ));
    }
    Ok(out)
}

/// Parse a calibration file: the `P2:` line carries 12 row-major values.
pub fn parse_calib(text: &str) -> Result<CalibRecord> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r').trim();
        let Some(rest) = line.strip_prefix("P2:") else {
            continue;
        };
        let vals: Vec<&str> = rest.split_whitespace().collect();
        if vals.len() != 12 {
            return Err(Error::parse(
                i + 1,
                format!("P2 wants 12 values, got {}", vals.len()),
            ));
        }
        let mut p2 = [[0.0; 4]; 3];
        for (j, v) in vals.iter().enumerate() {
            p2[j / 4][j % 4] = parse_field(v, i + 1, "P2 value")?;
        }
        let calib = CalibRecord { p2 };
        calib.validate()?;
        return Ok(calib);
    }
    Err(Error::parse(0, "no P2 line found".to_string()))
}

pub fn write_calib(calib: &CalibRecord) -> String {
    let row = |r: &[f64; 4]| format!("{} {} {} {}", r[0], r[1], r[2], r[3]);
    format!(
        "P2: {} {} {}\n",
        row(&calib.p2[0]),
        row(&calib.p2[1]),
        row(&calib.p2[2])
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const SAMPLE: &str =
        "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59";

    #[test]
    fn parses_reference_car_line() {
        let recs = parse_label_file(SAMPLE).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.kind, "Car");
        assert_relative_eq!(r.truncated, 0.0);
        assert_eq!(r.occluded, 0);
        assert_relative_eq!(r.alpha, -1.58);
        assert_relative_eq!(r.bbox[0], 587.01);
        assert_relative_eq!(r.dims[2], 3.64);
        assert_relative_eq!(r.loc[2], 46.70);
        assert_relative_eq!(r.ry, -1.59);
        assert!(r.score.is_none());
    }

    #[test]
    fn empty_file_parses_to_empty_list() {
        assert!(parse_label_file("").unwrap().is_empty());
        assert!(parse_label_file("\n\n").unwrap().is_empty());
    }

    #[test]
    fn short_line_reports_line_number() {
        let text = format!("{SAMPLE}\nCar 0.0 0 0.0\n");
        match parse_label_file(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_number_reports_line() {
        let bad = SAMPLE.replace("46.70", "fortysix");
        match parse_label_file(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dontcare_lines_are_preserved() {
        let text = "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10";
        let recs = parse_label_file(text).unwrap();
        assert!(recs[0].is_dontcare());
        assert_eq!(recs[0].occluded, -1);
    }

    #[test]
    fn sixteenth_field_is_score() {
        let text = format!("{SAMPLE} 0.87");
        let recs = parse_label_file(&text).unwrap();
        assert_relative_eq!(recs[0].score.unwrap(), 0.87);
    }

    #[test]
    fn crlf_is_tolerated() {
        let text = format!("{SAMPLE}\r\n{SAMPLE}\r\n");
        assert_eq!(parse_label_file(&text).unwrap().len(), 2);
    }

    #[test]
    fn label_roundtrip_is_idempotent() {
        let text = format!("{SAMPLE}\n{SAMPLE} 0.5\n");
        let once = parse_label_file(&text).unwrap();
        let twice = parse_label_file(&write_label_file(&once)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn result_file_needs_scores_and_roundtrips_to_2_decimals() {
        let mut rec = parse_label_file(SAMPLE).unwrap().remove(0);
        assert!(write_result_file(std::slice::from_ref(&rec)).is_err());
        rec.score = Some(0.912345);
        let text = write_result_file(std::slice::from_ref(&rec)).unwrap();
        let back = parse_label_file(&text).unwrap().remove(0);
        assert_relative_eq!(back.score.unwrap(), 0.91);
        for (a, b) in rec.bbox.iter().zip(back.bbox) {
            assert!((a - b).abs() <= 0.005 + 1e-12);
        }
        // a result file parses and re-writes to the identical text
        let again = write_result_file(&parse_label_file(&text).unwrap()).unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn calib_parses_p2_and_ignores_other_lines() {
        let text = "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\nP2: 700 0 600 0 0 700 180 0 0 0 1 0\n";
        let calib = parse_calib(text).unwrap();
        assert_relative_eq!(calib.p2[0][0], 700.0);
        assert_relative_eq!(calib.p2[0][2], 600.0);
        assert_relative_eq!(calib.p2[1][2], 180.0);
    }

    #[test]
    fn calib_with_11_values_errors() {
        assert!(parse_calib("P2: 700 0 600 0 0 700 180 0 0 0 1\n").is_err());
        assert!(parse_calib("P0: 1 2 3\n").is_err());
    }

    #[test]
    fn calib_roundtrip() {
        let calib = CalibRecord::pinhole(721.5377, 609.5593, 172.854);
        let back = parse_calib(&write_calib(&calib)).unwrap();
        assert_eq!(calib, back);
    }

    #[test]
    fn project_unproject_roundtrip() {
        let calib = CalibRecord::pinhole(700.0, 600.0, 180.0);
        for z in [1.0, 5.0, 20.0, 100.0] {
            let (u, v) = calib.project(1.5, -0.8, z);
            let (x, y, z2) = calib.unproject(u, v, z);
            assert!((x - 1.5).abs() < 1e-9);
            assert!((y + 0.8).abs() < 1e-9);
            assert!((z2 - z).abs() < 1e-12);
        }
    }

    fn rec_with(height: f64, occ: i32, trunc: f64) -> LabelRecord {
        LabelRecord {
            kind: "Car".into(),
            truncated: trunc,
            occluded: occ,
            alpha: 0.0,
            bbox: [100.0, 100.0, 150.0, 100.0 + height],
            dims: [1.5, 1.6, 3.9],
            loc: [0.0, 1.65, 20.0],
            ry: 0.0,
            score: None,
        }
    }

    #[test]
    fn difficulty_threshold_table() {
        assert_eq!(classify_difficulty(&rec_with(50.0, 0, 0.0)), Difficulty::Easy);
        assert_eq!(
            classify_difficulty(&rec_with(30.0, 1, 0.2)),
            Difficulty::Moderate
        );
        assert_eq!(
            classify_difficulty(&rec_with(30.0, 2, 0.45)),
            Difficulty::Hard
        );
        assert_eq!(
            classify_difficulty(&rec_with(20.0, 0, 0.0)),
            Difficulty::Ignored
        );
        assert_eq!(classify_difficulty(&rec_with(45.0, 0, 0.2)), Difficulty::Moderate);
    }

    proptest! {
        /// Relaxing height, occlusion or truncation never demotes a record.
        #[test]
        fn difficulty_is_monotone(h in 5.0f64..80.0, occ in -1i32..=3, trunc in 0.0f64..0.8) {
            let base = classify_difficulty(&rec_with(h, occ, trunc));
            let relaxed = [
                rec_with(h + 10.0, occ, trunc),
                rec_with(h, (occ - 1).max(-1), trunc),
                rec_with(h, occ, (trunc - 0.1).max(0.0)),
            ];
            for r in relaxed {
                prop_assert!(classify_difficulty(&r) <= base);
            }
        }

        /// Any parsed record survives write→parse unchanged (labels keep
        /// full precision).
        #[test]
        fn label_write_parse_roundtrip(
            trunc in 0.0f64..1.0,
            occ in 0i32..=3,
            alpha in -3.14f64..3.14,
            l in 0.0f64..500.0,
            t in 0.0f64..200.0,
            w in 1.0f64..200.0,
            h in 1.0f64..150.0,
            z in 1.0f64..80.0,
            score in proptest::option::of(0.0f64..1.0),
        ) {
            let rec = LabelRecord {
                kind: "Pedestrian".into(),
                truncated: trunc,
                occluded: occ,
                alpha,
                bbox: [l, t, l + w, t + h],
                dims: [1.7, 0.6, 0.8],
                loc: [-3.0, 1.6, z],
                ry: alpha,
                score,
            };
            let text = write_label_file(std::slice::from_ref(&rec));
            let back = parse_label_file(&text).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0], &rec);
        }
    }
}
