//! Single-file checkpoints: a versioned header, the config text, the
//! iteration and seed, every parameter set with its Adam state, and the
//! trajectory buffer. Loading restores a run that continues bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tensor};
use crate::trainer::{ReplayBuffer, RunState, Trajectory};

const MAGIC: &[u8; 8] = b"HIMETACK";
pub const VERSION: u32 = 1;

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    w.write_u64::<LE>(b.len() as u64)?;
    w.write_all(b)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = r.read_u64::<LE>()?;
    if n > (1 << 40) {
        return Err(Error::Checkpoint(format!("implausible block length {n}")));
    }
    let mut b = vec![0; n as usize];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; n];
    r.read_f64_into::<LE>(&mut v)?;
    Ok(v)
}

fn write_set<W: Write>(w: &mut W, ps: &ParameterSet) -> Result<()> {
    w.write_u64::<LE>(ps.step_count())?;
    w.write_u32::<LE>(ps.len() as u32)?;
    for (i, (name, t)) in ps.iter().enumerate() {
        write_bytes(w, name.as_bytes())?;
        w.write_u32::<LE>(t.rank() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LE>(d as u64)?;
        }
        let (m, v) = ps.moments(crate::numerics::ParamId(i));
        write_f64s(w, t.data())?;
        write_f64s(w, m)?;
        write_f64s(w, v)?;
    }
    Ok(())
}

fn read_set_into<R: Read>(r: &mut R, ps: &mut ParameterSet, label: &str) -> Result<()> {
    let step = r.read_u64::<LE>()?;
    let count = r.read_u32::<LE>()? as usize;
    if count != ps.len() {
        return Err(Error::Checkpoint(format!(
            "{label}: checkpoint has {count} tensors, model has {}",
            ps.len()
        )));
    }
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(r)?).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
        let rank = r.read_u32::<LE>()? as usize;
        let shape = (0..rank).map(|_| r.read_u64::<LE>().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
        let id = ps
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("{label}: unknown parameter `{name}`")))?;
        if ps.get(id).shape() != shape.as_slice() {
            return Err(Error::dim("checkpoint restore", &shape, ps.get(id).shape()));
        }
        let n = Tensor::zeros(&shape).len();
        let data = read_f64s(r, n)?;
        let m = read_f64s(r, n)?;
        let v = read_f64s(r, n)?;
        ps.restore_state(id, data, m, v)?;
    }
    ps.set_step_count(step);
    Ok(())
}

pub fn save(state: &RunState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        write_bytes(&mut w, state.cfg.to_config_text().as_bytes())?;
        w.write_u64::<LE>(state.iteration)?;
        w.write_u64::<LE>(state.cfg.train.seed)?;
        write_set(&mut w, &state.model.hl_params)?;
        write_set(&mut w, &state.model.il_params)?;
        write_set(&mut w, &state.model.pi_params)?;
        w.write_u64::<LE>(state.buffer.capacity() as u64)?;
        w.write_u64::<LE>(state.buffer.inserted())?;
        let items: Vec<&Trajectory> = state.buffer.iter().collect();
        write_bytes(&mut w, &serde_json::to_vec(&items)?)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Restores a run from its embedded config.
pub fn load(path: &Path) -> Result<RunState> {
    load_with(path, None)
}

/// Restores a run; `cfg` replaces the embedded config and must describe
/// networks of the same shape.
pub fn load_with(path: &Path, cfg: Option<RunConfig>) -> Result<RunState> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{} is too short to be a checkpoint", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let text = String::from_utf8(read_bytes(&mut r)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let embedded = RunConfig::parse(&text)?;
    let iteration = r.read_u64::<LE>()?;
    let seed = r.read_u64::<LE>()?;
    let cfg = cfg.unwrap_or(embedded);
    let mut state = RunState::new(cfg)?;
    state.iteration = iteration;
    if state.cfg.train.seed != seed {
        return Err(Error::Checkpoint(format!(
            "checkpoint seed {seed} differs from config seed {}",
            state.cfg.train.seed
        )));
    }
    read_set_into(&mut r, &mut state.model.hl_params, "representation layer")?;
    read_set_into(&mut r, &mut state.model.il_params, "macro-action layer")?;
    read_set_into(&mut r, &mut state.model.pi_params, "policy")?;
    let _saved_capacity = r.read_u64::<LE>()?;
    let inserted = r.read_u64::<LE>()?;
    let mut items: Vec<Trajectory> = serde_json::from_slice(&read_bytes(&mut r)?)?;
    let capacity = state.cfg.train.buffer_capacity;
    items.drain(..items.len().saturating_sub(capacity));
    state.buffer = ReplayBuffer::from_parts(capacity, items, inserted)?;
    Ok(state)
}
