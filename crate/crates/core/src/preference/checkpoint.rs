use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, Params, PreferenceModel, Tensor};
use super::train::EpochLog;
use crate::error::{Error, Result};
use crate::io::{read_records, write_records};

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CheckpointLine {
    Header { config: ModelConfig, tensors: usize },
    Tensor(Tensor),
}

/// Header record followed by one record per named tensor.
pub fn write_checkpoint(path: &Path, model: &PreferenceModel) -> Result<()> {
    let tensors = model.params.tensors();
    let header = CheckpointLine::Header {
        config: model.config,
        tensors: tensors.len(),
    };
    let lines = std::iter::once(header).chain(tensors.into_iter().cloned().map(CheckpointLine::Tensor));
    write_records(path, lines)
}

pub fn read_checkpoint(path: &Path) -> Result<PreferenceModel> {
    let records = read_records::<CheckpointLine>(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut iter = records.into_iter();
    let (config, count) = match iter.next() {
        Some((_, CheckpointLine::Header { config, tensors })) => (config, tensors),
        Some((line, _)) => return Err(parse_err(line, "checkpoint must start with a header".into())),
        None => return Err(parse_err(1, "empty checkpoint".into())),
    };
    config.validate()?;
    let mut params = Params::zeros(&config);
    let expected = params.tensors().len();
    if count != expected {
        return Err(parse_err(1, format!("header lists {count} tensors, model has {expected}")));
    }
    let mut seen = vec![false; expected];
    for (line, rec) in iter {
        let CheckpointLine::Tensor(t) = rec else {
            return Err(parse_err(line, "second header record".into()));
        };
        let mut slots = params.tensors_mut();
        let Some(pos) = slots.iter().position(|s| s.name == t.name) else {
            return Err(parse_err(line, format!("unknown tensor {}", t.name)));
        };
        let slot = &mut slots[pos];
        if t.shape != slot.shape || t.data.len() != slot.len() {
            return Err(Error::Shape(format!(
                "{}: tensor {} has shape {:?} with {} values, expected {:?}",
                path.display(),
                t.name,
                t.shape,
                t.data.len(),
                slot.shape
            )));
        }
        if t.data.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(line, format!("tensor {} has non-finite values", t.name)));
        }
        if seen[pos] {
            return Err(parse_err(line, format!("duplicate tensor {}", t.name)));
        }
        seen[pos] = true;
        slot.data = t.data;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(parse_err(0, format!("missing tensor {}", params.tensors()[missing].name)));
    }
    Ok(PreferenceModel { config, params })
}

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    write_records(path, log)
}

pub fn read_training_log(path: &Path) -> Result<Vec<EpochLog>> {
    Ok(read_records(path)?.into_iter().map(|(_, r)| r).collect())
}
