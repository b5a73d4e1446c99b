//! JSON-lines manifests.
//!
//! ```text
//! {"lesions": ["a", "b"], "locations": ["x", "y"]}
//! {"id": "s0", "image": "images/s0.ppm", "lesions": ["a"], "location": "y"}
//! ```
//!
//! Image paths are relative to the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ppm::{read_ppm, write_ppm};
use super::{Dataset, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    lesions: Vec<String>,
    locations: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    image: String,
    lesions: Vec<String>,
    location: String,
}

fn dedup(names: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    names.into_iter().filter(|n| seen.insert(n.clone())).collect()
}

fn index_of(names: &[String]) -> HashMap<&str, usize> {
    names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect()
}

/// Loads a manifest and every image it references. Blank lines are ignored.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let parse_err = |line, reason: String| Error::ParseError { line, reason };

    let (hline, htext) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let header: Header = serde_json::from_str(htext).map_err(|e| parse_err(hline, e.to_string()))?;
    let lesion_names = dedup(header.lesions);
    let location_names = dedup(header.locations);
    if lesion_names.is_empty() || location_names.is_empty() {
        return Err(parse_err(hline, "header needs at least one lesion and one location".into()));
    }
    let (lesion_idx, location_idx) = (index_of(&lesion_names), index_of(&location_names));

    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (line, l) in lines {
        let rec: Record = serde_json::from_str(l).map_err(|e| parse_err(line, e.to_string()))?;
        if rec.lesions.is_empty() {
            return Err(parse_err(line, format!("record `{}` has no lesions", rec.id)));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(parse_err(line, format!("duplicate id `{}`", rec.id)));
        }
        let mut u = vec![0u8; lesion_names.len()];
        for name in &rec.lesions {
            let i = lesion_idx
                .get(name.as_str())
                .ok_or_else(|| Error::UnknownLabel(name.clone()))?;
            u[*i] = 1;
        }
        let v = location_idx
            .get(rec.location.as_str())
            .ok_or_else(|| Error::UnknownLabel(rec.location.clone()))?;
        let image = read_ppm(base.join(&rec.image))?;
        samples.push(Sample {
            id: rec.id,
            image,
            lesions: u,
            location: v + 1,
        });
    }
    Ok(Dataset {
        samples,
        lesion_names,
        location_names,
        folds: None,
    })
}

/// Writes `dir/manifest.jsonl` and one `dir/images/<id>.ppm` per sample.
pub fn write_manifest(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    let mut out = serde_json::to_string(&Header {
        lesions: ds.lesion_names.clone(),
        locations: ds.location_names.clone(),
    })?;
    out.push('\n');
    for s in &ds.samples {
        if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id.starts_with('.') {
            return Err(Error::BadLabel(format!("id `{}` is not usable as a file name", s.id)));
        }
        let image = format!("images/{}.ppm", s.id);
        write_ppm(dir.join(&image), &s.image)?;
        let rec = Record {
            id: s.id.clone(),
            image,
            lesions: s
                .lesions
                .iter()
                .zip(&ds.lesion_names)
                .filter(|(&b, _)| b == 1)
                .map(|(_, n)| n.clone())
                .collect(),
            location: ds.location_names[s.location - 1].clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?).expect("write to String");
    }
    std::fs::write(dir.join(MANIFEST_FILE), out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn write(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join(MANIFEST_FILE);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn header_only_gives_empty_dataset() {
        let d = tempfile::tempdir().unwrap();
        let ds = load_manifest(write(d.path(), "{\"lesions\":[\"a\",\"a\",\"b\"],\"locations\":[\"x\",\"y\"]}\n")).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.lesion_names, vec!["a", "b"]);
    }

    #[test]
    fn record_errors() {
        let d = tempfile::tempdir().unwrap();
        std::fs::create_dir(d.path().join("images")).unwrap();
        write_ppm(d.path().join("images/a.ppm"), &Tensor::zeros(&[3, 2, 2])).unwrap();
        let head = "{\"lesions\":[\"a\"],\"locations\":[\"x\",\"y\"]}\n";
        let cases = [
            ("{\"id\":\"a\",\"image\":\"images/a.ppm\",\"lesions\":[],\"location\":\"x\"}", "ParseError"),
            ("{\"id\":\"a\",\"image\":\"images/a.ppm\",\"lesions\":[\"q\"],\"location\":\"x\"}", "UnknownLabel"),
            ("{\"id\":\"a\",\"image\":\"images/a.ppm\",\"lesions\":[\"a\"],\"location\":\"z\"}", "UnknownLabel"),
            ("{\"id\":\"a\",\"image\":\"images/none.ppm\",\"lesions\":[\"a\"],\"location\":\"x\"}", "MissingImage"),
            ("not json", "ParseError"),
        ];
        for (rec, kind) in cases {
            let err = load_manifest(write(d.path(), &format!("{head}{rec}\n"))).unwrap_err();
            assert_eq!(err.kind(), kind, "{rec}");
            if let Error::ParseError { line, .. } = err {
                assert_eq!(line, 2);
            }
        }
    }
}
