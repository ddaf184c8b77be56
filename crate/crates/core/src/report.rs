//! Report plumbing: run manifests, fixed-precision JSON, CSV grids and
//! write-then-rename file output.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

/// Float text with 17 significant digits (exact round trip).
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub integrator: f64,
    pub gamma: f64,
    pub residual_threshold: f64,
    pub tail: f64,
    pub coupling: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { integrator: 1e-10, gamma: 0.05, residual_threshold: 0.5, tail: 1e-6, coupling: 1e-4 }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub window: [f64; 2],
    pub tolerances: Tolerances,
    pub output_dir: String,
    pub seed: u64,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &str, window: (f64, f64), tolerances: Tolerances, output_dir: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config: config.to_string(),
            window: [window.0, window.1],
            tolerances,
            output_dir: output_dir.to_string(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Pretty JSON whose floats always carry 17 significant digits.
struct FixedFloats<'a> {
    inner: PrettyFormatter<'a>,
}

impl Formatter for FixedFloats<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            w.write_all(format!("{value:.16e}").as_bytes())
        } else {
            w.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloats { inner: PrettyFormatter::new() });
    value.serialize(&mut ser).expect("report types serialize infallibly");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Write `contents` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp: PathBuf = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// CSV text with a header row and one row per time sample.
pub fn grid_csv(header: &[String], rows: &[(f64, Vec<f64>)]) -> String {
    let mut out = String::from("t");
    for h in header {
        out.push(',');
        out.push_str(h);
    }
    out.push('\n');
    for (t, vals) in rows {
        out.push_str(&fmt_f64(*t));
        for v in vals {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

/// Parse CSV written by [`grid_csv`]; returns header (without `t`) and rows.
pub fn parse_grid_csv(text: &str) -> Result<(Vec<String>, Vec<(f64, Vec<f64>)>), String> {
    let mut lines = text.lines();
    let head = lines.next().ok_or("empty file")?;
    let mut cols = head.split(',');
    if cols.next() != Some("t") {
        return Err("first column must be 't'".into());
    }
    let header: Vec<String> = cols.map(str::to_string).collect();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| format!("row {}: {e}", k + 2))?;
        if vals.len() != header.len() + 1 {
            return Err(format!("row {}: expected {} columns, found {}", k + 2, header.len() + 1, vals.len()));
        }
        rows.push((vals[0], vals[1..].to_vec()));
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.0), "-2.0000000000000000e0");
        let json = to_json(&serde_json::json!({ "x": 0.1, "n": 3, "bad": f64::NAN }));
        assert!(json.contains("1.0000000000000001e-1"));
        assert!(json.contains("\"bad\": null"));
        let back: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(back["x"].as_f64(), Some(0.1));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![(0.0, vec![1.0, 0.1]), (0.125, vec![-3.5, 1e-300])];
        let text = grid_csv(&["a".into(), "b".into()], &rows);
        let (h, back) = parse_grid_csv(&text).unwrap();
        assert_eq!(h, vec!["a", "b"]);
        assert_eq!(back, rows);
        assert!(parse_grid_csv("t,a\n1.0\n").is_err());
        assert!(parse_grid_csv("t,a\n1.0,zz\n").is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = std::env::temp_dir().join(format!("nudich-report-{}", std::process::id()));
        let p = dir.join("x.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert!(!dir.join(".x.json.tmp").exists());
        fs::remove_dir_all(dir).unwrap();
    }
}
