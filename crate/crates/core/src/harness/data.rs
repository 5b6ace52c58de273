use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub input: String,
    pub output: String,
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

fn required(
    obj: &serde_json::Map<String, serde_json::Value>,
    field: &'static str,
    line: usize,
) -> Result<String> {
    match obj.get(field).and_then(|v| v.as_str()) {
        Some(s) if !s.is_empty() => Ok(s.to_string()),
        _ => Err(Error::Schema { line, field }),
    }
}

/// Parses JSON Lines. Blank lines are skipped; unknown fields are ignored;
/// a missing `task_id` takes `default_task`.
pub fn parse_jsonl(text: &str, default_task: &str) -> Result<Vec<TaskRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line,
            message: "expected a JSON object".into(),
        })?;
        let task_id = match obj.get("task_id") {
            None | Some(serde_json::Value::Null) => default_task.to_string(),
            Some(v) => v
                .as_str()
                .ok_or(Error::Schema {
                    line,
                    field: "task_id",
                })?
                .to_string(),
        };
        let context = match obj.get("context") {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => Some(
                v.as_str()
                    .ok_or(Error::Schema {
                        line,
                        field: "context",
                    })?
                    .to_string(),
            ),
        };
        out.push(TaskRecord {
            input: required(obj, "input", line)?,
            output: required(obj, "output", line)?,
            task_id,
            context,
        });
    }
    Ok(out)
}

/// Reads a JSONL dataset; records without `task_id` are tagged with the file
/// stem.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<TaskRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("task");
    parse_jsonl(&text, stem)
}

pub fn write_jsonl(records: &[TaskRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Gold-label remapping applied at load time, e.g. collapsing fine-grained
/// sentiment labels onto three classes. Labels absent from the map pass
/// through unchanged.
pub fn apply_label_map(records: &mut [TaskRecord], map: &BTreeMap<String, String>) {
    for r in records {
        if let Some(to) = map.get(&r.output) {
            r.output = to.clone();
        }
    }
}

/// Concatenates datasets and shuffles them with `seed`.
pub fn mix_tasks(datasets: Vec<Vec<TaskRecord>>, seed: u64) -> Vec<TaskRecord> {
    let mut all: Vec<TaskRecord> = datasets.into_iter().flatten().collect();
    Rng::derived(seed, SHUFFLE_STREAM).shuffle(&mut all);
    all
}

pub(crate) const SHUFFLE_STREAM: u64 = 1 << 40;

pub const SYNTHETIC_LABELS: [&str; 3] = ["buy", "sell", "hold"];
const SYNTHETIC_MARKERS: [char; 3] = ['+', '-', '='];
const FILLER: &[u8] = b"acdefgijkmnopqrtuvwxz";

/// Three-class pattern labeling: a string of filler letters containing one
/// marker character; the marker alone decides the label.
pub fn synthetic_task(n: usize, seed: u64) -> Vec<TaskRecord> {
    let mut rng = Rng::derived(seed, 7);
    (0..n)
        .map(|_| {
            let class = rng.below(3);
            let len = 6 + rng.below(5);
            let mut chars: Vec<char> = (0..len)
                .map(|_| FILLER[rng.below(FILLER.len())] as char)
                .collect();
            let at = rng.below(len + 1);
            chars.insert(at, SYNTHETIC_MARKERS[class]);
            TaskRecord {
                input: chars.into_iter().collect(),
                output: SYNTHETIC_LABELS[class].to_string(),
                task_id: "synthetic".into(),
                context: None,
            }
        })
        .collect()
}
