//! Textual parameter checkpoints.
//!
//! Format (one record per line, space separated, version-tagged header):
//!
//! ```text
//! mmda-checkpoint v1
//! tensor <name> <d0>x<d1>... <v0> <v1> ...
//! bn <name> <momentum> <epsilon> <channels> <mean...> <var...>
//! ```
//!
//! Values use the shortest round-trip decimal form, so save/load is exact.
//! Loading requires a bundle with the same architecture; records are matched
//! by name and shape.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::ModelBundle;

pub const CHECKPOINT_HEADER: &str = "mmda-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint is missing record {name}")]
    Missing { name: String },
    #[error("checkpoint record {name} does not match the bundle (expected {expected} values, got {got})")]
    Mismatch {
        name: String,
        expected: usize,
        got: usize,
    },
}

fn push_floats(line: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(line, " {v}");
    }
}

/// Serialize all parameters and batch-norm states.
pub fn checkpoint_to_string(bundle: &ModelBundle) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    for (name, t) in bundle.parameters() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let mut line = format!("tensor {name} {}", dims.join("x"));
        t.with_values(|v| push_floats(&mut line, v));
        out.push_str(&line);
        out.push('\n');
    }
    for (name, st) in bundle.bn_states() {
        let mut line = format!("bn {name} {} {} {}", st.momentum, st.epsilon, st.channels());
        push_floats(&mut line, &st.running_mean);
        push_floats(&mut line, &st.running_var);
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint_to_string(bundle))?;
    Ok(())
}

fn parse_floats(parts: &[&str], line: usize) -> Result<Vec<f64>, CheckpointError> {
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>().map_err(|_| CheckpointError::Parse {
                line,
                msg: format!("bad float {p:?}"),
            })
        })
        .collect()
}

/// Load a checkpoint into a bundle with the same architecture.
pub fn load_checkpoint(bundle: &mut ModelBundle, path: &Path) -> Result<(), CheckpointError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CHECKPOINT_HEADER => {}
        Some((_, other)) => {
            return Err(CheckpointError::Parse {
                line: 1,
                msg: format!("unknown header {other:?}"),
            })
        }
        None => {
            return Err(CheckpointError::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    }

    let mut tensors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut bn_records: BTreeMap<String, (f64, f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = raw.split_whitespace().collect();
        match parts[0] {
            "tensor" => {
                if parts.len() < 3 {
                    return Err(CheckpointError::Parse {
                        line: line_no,
                        msg: "tensor record needs a name and shape".into(),
                    });
                }
                tensors.insert(parts[1].to_string(), parse_floats(&parts[3..], line_no)?);
            }
            "bn" => {
                if parts.len() < 5 {
                    return Err(CheckpointError::Parse {
                        line: line_no,
                        msg: "bn record needs name, momentum, epsilon, channels".into(),
                    });
                }
                let nums = parse_floats(&parts[2..], line_no)?;
                let channels = nums[2] as usize;
                if nums.len() != 3 + 2 * channels {
                    return Err(CheckpointError::Parse {
                        line: line_no,
                        msg: format!("bn record expects {} stats values", 2 * channels),
                    });
                }
                bn_records.insert(
                    parts[1].to_string(),
                    (
                        nums[0],
                        nums[1],
                        nums[3..3 + channels].to_vec(),
                        nums[3 + channels..].to_vec(),
                    ),
                );
            }
            other => {
                return Err(CheckpointError::Parse {
                    line: line_no,
                    msg: format!("unknown record kind {other:?}"),
                })
            }
        }
    }

    for (name, t) in bundle.parameters() {
        let values = tensors
            .get(&name)
            .ok_or_else(|| CheckpointError::Missing { name: name.clone() })?;
        if values.len() != t.numel() {
            return Err(CheckpointError::Mismatch {
                name,
                expected: t.numel(),
                got: values.len(),
            });
        }
        t.set_values(values);
    }

    let bn_names: Vec<String> = bundle.bn_states().iter().map(|(n, _)| n.clone()).collect();
    for (name, st) in bn_names.iter().zip(bundle.bn_states_mut()) {
        let (momentum, epsilon, mean, var) = bn_records
            .get(name)
            .ok_or_else(|| CheckpointError::Missing { name: name.clone() })?;
        if mean.len() != st.channels() {
            return Err(CheckpointError::Mismatch {
                name: name.clone(),
                expected: st.channels(),
                got: mean.len(),
            });
        }
        st.momentum = *momentum;
        st.epsilon = *epsilon;
        st.running_mean = mean.clone();
        st.running_var = var.clone();
    }
    Ok(())
}
