//! Resumable training state: weights, Adam moments and the metrics so far.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EpochMetrics, OptimizerState};
use crate::error::{Error, Result};
use crate::model::checkpoint::{read_model, read_str, read_tensors, read_u64, write_model, write_str, write_tensors, write_u64};
use crate::model::Model;

const MAGIC: &[u8; 8] = b"DESKLMTS";

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: OptimizerState,
    /// 0-based index of the next epoch to run.
    pub next_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

pub fn write_state<W: Write>(w: &mut W, state: &TrainState) -> Result<()> {
    w.write_all(MAGIC)?;
    write_model(w, &state.model)?;
    write_u64(w, state.optimizer.step)?;
    let names: Vec<String> = (0..state.optimizer.m.len()).map(|i| i.to_string()).collect();
    for moments in [&state.optimizer.m, &state.optimizer.v] {
        write_tensors(w, names.iter().map(String::as_str).zip(moments.iter()))?;
    }
    write_u64(w, state.next_epoch as u64)?;
    let rows: Vec<String> = state.metrics.iter().map(EpochMetrics::csv_row).collect();
    write_str(w, &rows.join("\n"))
}

pub fn read_state<R: Read>(r: &mut R) -> Result<TrainState> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a training state file".into()));
    }
    let model = read_model(r)?;
    let step = read_u64(r)?;
    let m: Vec<_> = read_tensors(r)?.into_iter().map(|(_, t)| t).collect();
    let v: Vec<_> = read_tensors(r)?.into_iter().map(|(_, t)| t).collect();
    let shapes_match = |ts: &[crate::Tensor<f32>]| {
        ts.len() == model.params().len() && ts.iter().zip(model.params().tensors()).all(|(a, b)| a.shape() == b.shape())
    };
    if !shapes_match(&m) || !shapes_match(&v) {
        return Err(Error::Format("optimizer moments do not match the model".into()));
    }
    let next_epoch = read_u64(r)? as usize;
    let rows = read_str(r)?;
    let metrics = rows
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(EpochMetrics::parse_csv_row)
        .collect::<Result<_>>()?;
    Ok(TrainState {
        model,
        optimizer: OptimizerState { step, m, v },
        next_epoch,
        metrics,
    })
}

pub fn save_state(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_state(&mut w, state)?;
    w.flush()?;
    Ok(())
}

pub fn load_state(path: impl AsRef<Path>) -> Result<TrainState> {
    read_state(&mut BufReader::new(File::open(path)?))
}
