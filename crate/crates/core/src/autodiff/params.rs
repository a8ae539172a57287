use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of an entry in a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

const CHECKPOINT_MAGIC: &str = "oldpf-checkpoint 1";

/// Named learnable arrays, each paired with a gradient slot of identical shape.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    grads: Vec<Tensor<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("bad parameter name {name:?}")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let cur = self.values[id.0].shape();
        if cur != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set parameter",
                lhs: cur,
                rhs: value.shape(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(S::zero());
        }
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// All values concatenated in registration order.
    pub fn flatten(&self) -> Vec<S> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn flatten_grads(&self) -> Vec<S> {
        self.grads.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::ShapeMismatch {
                op: "unflatten",
                lhs: (self.num_scalars(), 1),
                rhs: (flat.len(), 1),
            });
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.len();
            v.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Copies values of every entry whose name exists in `other`.
    pub fn copy_values_from(&mut self, other: &ParameterStore<S>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let id = other
                .id(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            let src = other.value(id);
            if src.shape() != self.values[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "copy parameters",
                    lhs: self.values[i].shape(),
                    rhs: src.shape(),
                });
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }

    /// Writes a text checkpoint. Values are stored as hexadecimal `f64` bit
    /// patterns so that loading reproduces them exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        for (name, v) in self.names.iter().zip(&self.values) {
            write!(out, "{name} {} {}", v.rows(), v.cols())?;
            for x in v.data() {
                write!(out, " {:016x}", x.to_f64_lossy().to_bits())?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let bad = |line: usize, msg: &str| Error::Checkpoint {
            line,
            msg: msg.to_string(),
        };
        match lines.next() {
            Some(Ok(h)) if h.trim() == CHECKPOINT_MAGIC => {}
            _ => return Err(bad(1, "missing header")),
        }
        let mut store = ParameterStore::new();
        for (k, line) in lines.enumerate() {
            let line = line?;
            let lineno = k + 2;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_ascii_whitespace();
            let name = it.next().ok_or_else(|| bad(lineno, "missing name"))?;
            let rows: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(lineno, "bad row count"))?;
            let cols: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(lineno, "bad column count"))?;
            let data = it
                .map(|h| u64::from_str_radix(h, 16).map(|b| S::of(f64::from_bits(b))))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(lineno, "bad value"))?;
            let t = Tensor::from_vec(rows, cols, data)
                .map_err(|_| bad(lineno, "value count does not match shape"))?;
            store.add(name, t)?;
        }
        Ok(store)
    }
}
