//! JSONL journey files, one journey object per line, plus a `.meta.json`
//! sidecar describing channel count, schemas, and provenance.
//!
//! Line schema:
//! `{"user_id": "u1", "user_attrs": {"pref": 2}, "touchpoints":
//!   [{"channel": 0, "ts": 0.0, "features": [0.0, 1.0], "cost": 0.8}],
//!   "converted": false}`
//!
//! `user_attrs` values may be integer codes or strings holding integers.
//! Without a sidecar the schema is inferred: K from the max channel,
//! feature names `f0..`, attribute names from the first line's keys.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::types::{
    Dataset, DatasetMeta, FeatureDef, Journey, Touchpoint, UserAttrDef, FORMAT_VERSION,
};
use crate::error::{CoreError, Result};

#[derive(Debug, Serialize, Deserialize)]
struct JourneyLine {
    user_id: String,
    #[serde(default)]
    user_attrs: BTreeMap<String, Value>,
    touchpoints: Vec<Touchpoint>,
    converted: bool,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn save_journeys(path: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let mut out = Vec::new();
    for j in &ds.journeys {
        let mut attrs = BTreeMap::new();
        for (def, &v) in ds.meta.user_attrs.iter().zip(&j.user_attrs) {
            attrs.insert(def.name.clone(), Value::from(v as u64));
        }
        let line = JourneyLine {
            user_id: j.user_id.clone(),
            user_attrs: attrs,
            touchpoints: j.touchpoints.clone(),
            converted: j.converted,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    let meta = serde_json::to_string_pretty(&ds.meta)?;
    let mut f = fs::File::create(meta_path(path))?;
    f.write_all(meta.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_journeys(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path)
        .map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);

    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JourneyLine =
            serde_json::from_str(&line).map_err(|e| CoreError::DataLine {
                line: i + 1,
                msg: format!("malformed journey record: {e}"),
            })?;
        lines.push((i + 1, parsed));
    }
    if lines.is_empty() {
        return Err(CoreError::Data(format!("{}: no journeys", path.display())))?;
    }

    let mp = meta_path(path);
    let meta = if mp.exists() {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&mp)?)
            .map_err(|e| CoreError::Data(format!("{}: {e}", mp.display())))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(CoreError::Data(format!(
                "{}: unsupported format_version {}",
                mp.display(),
                meta.format_version
            )));
        }
        meta
    } else {
        infer_meta(&lines)?
    };

    let mut journeys = Vec::with_capacity(lines.len());
    let mut line_nos = Vec::with_capacity(lines.len());
    for (line_no, rec) in lines {
        let mut attrs = Vec::with_capacity(meta.user_attrs.len());
        for def in &meta.user_attrs {
            let raw = rec.user_attrs.get(&def.name).ok_or(CoreError::DataLine {
                line: line_no,
                msg: format!("missing user attr {}", def.name),
            })?;
            attrs.push(attr_code(raw).ok_or(CoreError::DataLine {
                line: line_no,
                msg: format!("user attr {} is not an integer code: {raw}", def.name),
            })?);
        }
        journeys.push(Journey {
            user_id: rec.user_id,
            user_attrs: attrs,
            touchpoints: rec.touchpoints,
            converted: rec.converted,
        });
        line_nos.push(line_no);
    }
    let ds = Dataset { journeys, meta };
    ds.validate_with(|i| line_nos[i])?;
    Ok(ds)
}

fn attr_code(v: &Value) -> Option<usize> {
    match v {
        Value::Number(n) => n.as_u64().map(|u| u as usize),
        Value::String(s) => s.parse::<usize>().ok(),
        _ => None,
    }
}

fn infer_meta(lines: &[(usize, JourneyLine)]) -> Result<DatasetMeta> {
    let mut k = 0usize;
    for (_, rec) in lines {
        for tp in &rec.touchpoints {
            k = k.max(tp.channel + 1);
        }
    }
    let first = &lines[0].1;
    let n_feat = first
        .touchpoints
        .first()
        .map(|t| t.features.len())
        .unwrap_or(0);
    let features = (0..n_feat).map(|i| FeatureDef::real(&format!("f{i}"))).collect();
    let mut user_attrs = Vec::new();
    for name in first.user_attrs.keys() {
        let mut card = 1usize;
        for (line_no, rec) in lines {
            let v = rec.user_attrs.get(name).and_then(attr_code).ok_or(
                CoreError::DataLine {
                    line: *line_no,
                    msg: format!("missing or non-integer user attr {name}"),
                },
            )?;
            card = card.max(v + 1);
        }
        user_attrs.push(UserAttrDef {
            name: name.clone(),
            cardinality: card,
        });
    }
    Ok(DatasetMeta {
        format_version: FORMAT_VERSION,
        n_channels: k,
        features,
        user_attrs,
        config_hash: String::new(),
        seed: 0,
    })
}

/// Write any serializable records as JSONL, one per line.
pub fn save_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read JSONL records, reporting the 1-based line number on parse failure.
pub fn load_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)
        .map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CoreError::DataLine {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
