//! Line-delimited JSON metric records.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use mvcf_core::train::EvalMetrics;
use serde_json::{Map, Value};

fn number(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

/// One record with `elbo_x{i}` / `bce_x{i}` per modality (1-based).
pub fn record(epoch: usize, beta: f64, m: &EvalMetrics, wall_seconds: f64, seed: u64) -> Value {
    let mut obj = Map::new();
    obj.insert("epoch".into(), Value::from(epoch));
    obj.insert("beta".into(), number(beta));
    obj.insert("elbo_joint".into(), number(m.elbo_joint));
    for (i, e) in m.elbo.iter().enumerate() {
        obj.insert(format!("elbo_x{}", i + 1), number(*e));
    }
    for (i, b) in m.bce.iter().enumerate() {
        obj.insert(format!("bce_x{}", i + 1), number(*b));
    }
    obj.insert("wall_seconds".into(), number(wall_seconds));
    obj.insert("seed".into(), Value::from(seed));
    Value::Object(obj)
}

/// Append one record as a single line.
pub fn append(path: &Path, rec: &Value) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{rec}")
}

/// Read every complete record. A final line that does not parse (an
/// interrupted write) is skipped; a bad line anywhere else is an error.
pub fn read(path: &Path) -> std::io::Result<Vec<Value>> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if i + 1 == lines.len() => log::warn!("ignoring truncated final record in {}", path.display()),
            Err(e) => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                ))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics() -> EvalMetrics {
        EvalMetrics {
            elbo_joint: 10.5,
            elbo: vec![6.0, 7.0],
            bce: vec![3.0, f64::NAN],
            kl_joint: 1.0,
        }
    }

    #[test]
    fn field_layout() {
        let r = record(3, 0.75, &metrics(), 1.5, 7);
        let keys: Vec<&str> = r.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["epoch", "beta", "elbo_joint", "elbo_x1", "elbo_x2", "bce_x1", "bce_x2", "wall_seconds", "seed"] {
            assert!(keys.contains(&k), "{k}");
        }
        assert!(r["bce_x2"].is_null());
    }

    #[test]
    fn truncated_tail_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        append(&p, &record(0, 0.0, &metrics(), 1.0, 1)).unwrap();
        append(&p, &record(1, 0.5, &metrics(), 1.0, 1)).unwrap();
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        write!(f, "{{\"epoch\": 2, \"be").unwrap();
        let recs = read(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1]["epoch"], 1);
    }
}
