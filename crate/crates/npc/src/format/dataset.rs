//! `.npct`: magic `NPCT`, version, `u64` sample count, `u32` rank and
//! extents of one sample, `u8` labels flag, every sample's `f32` values,
//! then one `u32` label per sample when flagged.

use npc_core::trainkit::LabeledDataset;
use npc_core::Tensor;

use super::{f32s_le, read_f32s, write_header, FormatError, FormatResult, Reader};

const MAGIC: &[u8; 4] = b"NPCT";

/// Samples of one shape, optionally labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet {
    pub sample_shape: Vec<usize>,
    pub inputs: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
}

impl TensorSet {
    pub fn labeled(data: &LabeledDataset, sample_shape: &[usize]) -> Self {
        TensorSet {
            sample_shape: sample_shape.to_vec(),
            inputs: data.inputs().to_vec(),
            labels: Some(data.labels().to_vec()),
        }
    }

    pub fn unlabeled(sample_shape: &[usize], inputs: Vec<Tensor>) -> Self {
        TensorSet {
            sample_shape: sample_shape.to_vec(),
            inputs,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// The labelled view; fails when the file carries no labels.
    pub fn to_labeled(&self) -> Result<LabeledDataset, npc_core::Error> {
        let labels = self
            .labels
            .clone()
            .ok_or(npc_core::Error::EmptyInput("dataset labels"))?;
        LabeledDataset::new(self.inputs.clone(), labels)
    }
}

pub fn save_dataset(set: &TensorSet) -> FormatResult<Vec<u8>> {
    let numel: usize = set.sample_shape.iter().product();
    let mut out = Vec::with_capacity(32 + set.len() * numel * 4);
    write_header(&mut out, MAGIC);
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    let rank = u32::try_from(set.sample_shape.len()).map_err(|_| invalid(8, "rank too large"))?;
    out.extend_from_slice(&rank.to_le_bytes());
    for &e in &set.sample_shape {
        let e = u32::try_from(e).map_err(|_| invalid(12, "extent too large"))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.push(u8::from(set.labels.is_some()));
    for (i, x) in set.inputs.iter().enumerate() {
        if x.shape() != set.sample_shape.as_slice() {
            return Err(FormatError::Invalid {
                offset: out.len(),
                message: format!(
                    "sample {i} has shape {:?}, expected {:?}",
                    x.shape(),
                    set.sample_shape
                ),
            });
        }
        f32s_le(x.data().iter().copied(), &mut out);
    }
    if let Some(labels) = &set.labels {
        if labels.len() != set.len() {
            return Err(invalid(out.len(), "label count differs from sample count"));
        }
        for &l in labels {
            let l = u32::try_from(l).map_err(|_| invalid(out.len(), "label too large"))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

fn invalid(offset: usize, message: &str) -> FormatError {
    FormatError::Invalid {
        offset,
        message: message.into(),
    }
}

pub fn load_dataset(bytes: &[u8]) -> FormatResult<TensorSet> {
    let mut r = Reader::new(bytes);
    r.header(MAGIC, "dataset (.npct)")?;
    let count_at = r.pos();
    let count = r.u64("sample count")?;
    let rank = r.u32("rank")? as usize;
    let mut sample_shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        sample_shape.push(r.u32("extent")? as usize);
    }
    let flag_at = r.pos();
    let has_labels = match r.u8("labels flag")? {
        0 => false,
        1 => true,
        other => {
            return Err(invalid(
                flag_at,
                &format!("labels flag must be 0 or 1, got {other}"),
            ))
        }
    };
    let numel = sample_shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(12, "sample shape is empty or too large"))?;
    let count = usize::try_from(count).map_err(|_| invalid(count_at, "sample count too large"))?;
    let data_len = count
        .checked_mul(numel)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| invalid(count_at, "sample data too large"))?;
    let values = read_f32s(r.take(data_len, "sample data")?);
    let inputs = values
        .chunks_exact(numel)
        .map(|c| Tensor::new(sample_shape.clone(), c.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = if has_labels {
        let raw = r.take(count * 4, "labels")?;
        Some(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
                .collect(),
        )
    } else {
        None
    };
    r.finish()?;
    Ok(TensorSet {
        sample_shape,
        inputs,
        labels,
    })
}
