use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelKind, Phase, Trajectory};
use crate::error::{Error, Result};

/// Sidecar written next to a dataset CSV as `<file>.meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub phase: Phase,
    pub model: ModelKind,
    pub n_traj: usize,
    pub steps: usize,
    /// Generating parameters, serialised as-is.
    pub params: serde_json::Value,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

/// Writes one row per time index: `traj, t, x..., y...`. Row `t = 0` carries
/// the initial state and empty observation cells.
pub fn write_dataset(path: &Path, data: &[Trajectory], meta: &DatasetMeta) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let (dx, dy) = (meta.model.state_dim(), meta.model.obs_dim());
    let mut header = vec!["traj".to_string(), "t".to_string()];
    header.extend((0..dx).map(|k| format!("x{k}")));
    header.extend((0..dy).map(|k| format!("y{k}")));
    w.write_record(&header)?;
    for (i, traj) in data.iter().enumerate() {
        for (t, x) in traj.states.iter().enumerate() {
            let mut row = vec![i.to_string(), t.to_string()];
            row.extend(x.iter().map(|v| format!("{v:e}")));
            match t.checked_sub(1).map(|k| &traj.observations[k]) {
                Some(y) => row.extend(y.iter().map(|v| format!("{v:e}"))),
                None => row.extend(std::iter::repeat_n(String::new(), dy)),
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    std::fs::write(meta_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Vec<Trajectory>, DatasetMeta)> {
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?;
    let (dx, dy) = (meta.model.state_dim(), meta.model.obs_dim());
    let mut r = csv::Reader::from_path(path)?;
    let mut data: Vec<Trajectory> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |msg: &str| Error::invalid(format!("{}: row {}: {msg}", path.display(), line + 2));
        if rec.len() != 2 + dx + dy {
            return Err(bad("wrong column count"));
        }
        let traj: usize = rec[0].parse().map_err(|_| bad("bad trajectory index"))?;
        let t: usize = rec[1].parse().map_err(|_| bad("bad time index"))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let x = (2..2 + dx).map(|k| num(&rec[k])).collect::<Result<Vec<_>>>()?;
        if traj == data.len() && t == 0 {
            data.push(Trajectory {
                states: vec![x],
                observations: Vec::new(),
                seed: meta.seed,
            });
            continue;
        }
        if traj + 1 != data.len() {
            return Err(bad("rows out of order"));
        }
        let cur = data.last_mut().expect("checked above");
        if t != cur.states.len() {
            return Err(bad("rows out of order"));
        }
        let y = (2 + dx..2 + dx + dy).map(|k| num(&rec[k])).collect::<Result<Vec<_>>>()?;
        cur.states.push(x);
        cur.observations.push(y);
    }
    if data.len() != meta.n_traj {
        return Err(Error::invalid(format!(
            "{} holds {} trajectories, metadata says {}",
            path.display(),
            data.len(),
            meta.n_traj
        )));
    }
    Ok((data, meta))
}
