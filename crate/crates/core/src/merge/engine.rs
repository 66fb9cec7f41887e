use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MergeError, MergeStrategy, WeightVector};
use crate::store::{Container, ContainerWriter, TensorRecord, TensorValues};

/// Elements per streamed chunk.
const CHUNK_ELEMENTS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    InMemory,
    Streaming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCount {
    pub name: String,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub inputs: Vec<String>,
    pub weights: Vec<f64>,
    pub strategy: MergeStrategy,
    pub per_tensor: Vec<TensorCount>,
    pub sha256: String,
}

/// Where [`merge`] writes its JSON report for a given output checkpoint.
pub fn report_path(out_path: &Path) -> PathBuf {
    let mut name = out_path.as_os_str().to_owned();
    name.push(".report.json");
    PathBuf::from(name)
}

/// Adds `weight * xs` into `acc`, or initializes `acc` with it.
///
/// Starting from the first product (rather than from +0.0) keeps the sign of
/// negative zeros, so merging identical inputs reproduces them bit-exactly.
#[inline]
fn accumulate(acc: &mut [f64], weight: f64, xs: &[f64], first: bool) {
    if first {
        for (a, &x) in acc.iter_mut().zip(xs) {
            *a = weight * x;
        }
    } else {
        for (a, &x) in acc.iter_mut().zip(xs) {
            *a += weight * x;
        }
    }
}

/// Weighted sum of equally-sized vectors, oldest first, in f64.
pub fn merge_vectors(inputs: &[&[f64]], weights: &WeightVector) -> Result<Vec<f64>, MergeError> {
    if inputs.is_empty() {
        return Err(MergeError::NoInputs);
    }
    if inputs.len() != weights.len() {
        return Err(MergeError::WeightLength { weights: weights.len(), inputs: inputs.len() });
    }
    let len = inputs[0].len();
    if let Some((i, v)) = inputs.iter().enumerate().find(|(_, v)| v.len() != len) {
        return Err(MergeError::Mismatch {
            tensor: format!("input {i}"),
            reason: format!("length {} differs from {len}", v.len()),
        });
    }
    let mut acc = vec![0.0; len];
    for (i, (x, &w)) in inputs.iter().zip(weights.as_slice()).enumerate() {
        accumulate(&mut acc, w, x, i == 0);
    }
    Ok(acc)
}

/// One step of the EMA recursion: `alpha * new + (1 - alpha) * running`.
pub fn ema_update(running: &[f64], new: &[f64], alpha: f64) -> Result<Vec<f64>, MergeError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MergeError::Alpha(alpha));
    }
    if running.len() != new.len() {
        return Err(MergeError::Mismatch {
            tensor: "ema".into(),
            reason: format!("running has {} elements, new has {}", running.len(), new.len()),
        });
    }
    Ok(running
        .iter()
        .zip(new)
        .map(|(&r, &n)| alpha * n + (1.0 - alpha) * r)
        .collect())
}

fn check_compatible(containers: &[Container]) -> Result<(), MergeError> {
    let first = &containers[0];
    for other in &containers[1..] {
        let mut names = first.tensors.keys().chain(other.tensors.keys()).collect::<Vec<_>>();
        names.sort();
        names.dedup();
        for name in names {
            let (a, b) = match (first.tensors.get(name), other.tensors.get(name)) {
                (Some(a), Some(b)) => (a, b),
                (Some(_), None) => {
                    return Err(MergeError::Mismatch {
                        tensor: name.clone(),
                        reason: format!("missing from {}", other.path().display()),
                    })
                }
                _ => {
                    return Err(MergeError::Mismatch {
                        tensor: name.clone(),
                        reason: format!("missing from {}", first.path().display()),
                    })
                }
            };
            if a.dtype != b.dtype {
                return Err(MergeError::Mismatch {
                    tensor: name.clone(),
                    reason: format!("dtype {} vs {}", a.dtype.as_str(), b.dtype.as_str()),
                });
            }
            if a.shape != b.shape {
                return Err(MergeError::Mismatch {
                    tensor: name.clone(),
                    reason: format!("shape {:?} vs {:?}", a.shape, b.shape),
                });
            }
        }
    }
    Ok(())
}

fn output_metadata(
    containers: &[Container],
    weights: &WeightVector,
    strategy: &MergeStrategy,
) -> Result<BTreeMap<String, String>, MergeError> {
    let newest = containers.last().expect("non-empty");
    let sources: Vec<String> = containers.iter().map(|c| c.path().display().to_string()).collect();
    Ok(BTreeMap::from([
        ("step".to_string(), newest.step().to_string()),
        ("tokens".to_string(), newest.tokens().to_string()),
        ("merge.sources".to_string(), serde_json::to_string(&sources)?),
        ("merge.weights".to_string(), serde_json::to_string(weights.as_slice())?),
        ("merge.strategy".to_string(), serde_json::to_string(strategy)?),
    ]))
}

/// Merges checkpoints `paths` (oldest first) into `out_path`.
///
/// Each output element is `sum_i w_i * x_i`, accumulated left to right in
/// f64 and rounded once to the input dtype. Both modes share the same
/// arithmetic and produce identical bytes; streaming keeps only one chunk
/// per input resident.
pub fn merge<P: AsRef<Path>>(
    paths: &[P],
    weights: &WeightVector,
    strategy: &MergeStrategy,
    out_path: &Path,
    mode: MergeMode,
) -> Result<MergeReport, MergeError> {
    if paths.is_empty() {
        return Err(MergeError::NoInputs);
    }
    if paths.len() != weights.len() {
        return Err(MergeError::WeightLength { weights: weights.len(), inputs: paths.len() });
    }
    let containers = paths
        .iter()
        .map(|p| Container::open(p.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    check_compatible(&containers)?;

    let metadata = output_metadata(&containers, weights, strategy)?;
    let records = containers[0].tensors.clone();
    let per_tensor = records
        .values()
        .map(|r| TensorCount { name: r.name.clone(), elements: r.elements() })
        .collect();

    let mut writer = ContainerWriter::create(out_path, records.clone(), &metadata)?;
    let mut ordered: Vec<&TensorRecord> = records.values().collect();
    ordered.sort_by_key(|r| r.byte_range);
    match mode {
        MergeMode::InMemory => merge_in_memory(&containers, weights, &ordered, &mut writer)?,
        MergeMode::Streaming => merge_streaming(&containers, weights, &ordered, &mut writer)?,
    }
    writer.finish()?;

    let report = MergeReport {
        inputs: paths.iter().map(|p| p.as_ref().display().to_string()).collect(),
        weights: weights.as_slice().to_vec(),
        strategy: strategy.clone(),
        per_tensor,
        sha256: sha256_file(out_path)?,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(report_path(out_path), text)?;
    Ok(report)
}

fn merge_in_memory(
    containers: &[Container],
    weights: &WeightVector,
    ordered: &[&TensorRecord],
    writer: &mut ContainerWriter,
) -> Result<(), MergeError> {
    // Tensors are independent; each one's accumulation stays sequential.
    let merged: Vec<Result<TensorValues, MergeError>> = ordered
        .par_iter()
        .map(|rec| {
            let inputs = containers
                .iter()
                .map(|c| c.load_tensor(&rec.name))
                .collect::<Result<Vec<_>, _>>()?;
            let views: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
            let acc = merge_vectors(&views, weights)?;
            Ok(TensorValues::from_f64(rec.dtype, &acc))
        })
        .collect();
    for (rec, values) in ordered.iter().zip(merged) {
        writer.write_tensor(&rec.name, &values?)?;
    }
    Ok(())
}

fn merge_streaming(
    containers: &[Container],
    weights: &WeightVector,
    ordered: &[&TensorRecord],
    writer: &mut ContainerWriter,
) -> Result<(), MergeError> {
    let mut readers = containers
        .iter()
        .map(Container::reader)
        .collect::<Result<Vec<_>, _>>()?;
    let mut acc = Vec::with_capacity(CHUNK_ELEMENTS);
    let mut buf = Vec::with_capacity(CHUNK_ELEMENTS);
    for rec in ordered {
        let total = rec.elements();
        let mut start = 0;
        while start < total {
            let count = CHUNK_ELEMENTS.min(total - start);
            acc.clear();
            acc.resize(count, 0.0);
            for (i, (reader, c)) in readers.iter_mut().zip(containers).enumerate() {
                let own = c.record(&rec.name)?;
                buf.clear();
                reader.read_elements(own, start, count, &mut buf)?;
                accumulate(&mut acc, weights.as_slice()[i], &buf, i == 0);
            }
            writer.write_chunk(&rec.name, &TensorValues::from_f64(rec.dtype, &acc))?;
            start += count;
        }
        writer.end_tensor(&rec.name)?;
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String, MergeError> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
