use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};

/// Named trainable tensors, kept in name order so iteration (and anything
/// derived from it, like initialization draws and checkpoints) is stable.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), dtype }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &'static Device {
        &Device::Cpu
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let t = t.to_dtype(self.dtype)?;
        self.vars.insert(name.into(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::TreeMismatch(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies the storage of every parameter whose name starts with `from`,
    /// renaming the prefix to `to`.
    pub fn deep_copy_prefix(&self, from: &str, to: &str) -> Result<ParamStore> {
        let mut out = ParamStore::new(self.dtype);
        for (name, v) in self.vars.iter().filter(|(n, _)| n.starts_with(from)) {
            let renamed = format!("{to}{}", &name[from.len()..]);
            out.vars.insert(renamed, Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    pub fn deep_copy(&self) -> Result<ParamStore> {
        self.deep_copy_prefix("", "")
    }

    /// Moves every parameter of `other` into this store.
    pub fn merge(&mut self, other: ParamStore) {
        self.vars.extend(other.vars);
    }

    pub fn split_off_prefix(&mut self, prefix: &str) -> ParamStore {
        let names: Vec<String> = self.vars.keys().filter(|n| n.starts_with(prefix)).cloned().collect();
        let mut out = ParamStore::new(self.dtype);
        for n in names {
            let v = self.vars.remove(&n).expect("listed key");
            out.vars.insert(n, v);
        }
        out
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_detached_tensor())).collect()
    }

    /// Flat f64 copy of one parameter.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// Overwrites one scalar of a parameter.
    pub fn set_element(&self, name: &str, index: usize, value: f64) -> Result<()> {
        let var = self.get(name)?;
        let mut vals = self.values(name)?;
        vals[index] = value;
        let t = Tensor::from_vec(vals, var.shape(), &Device::Cpu)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_equal(&self, other: &ParamStore) -> Result<bool> {
        if self.vars.len() != other.vars.len() || self.dtype != other.dtype {
            return Ok(false);
        }
        for ((na, va), (nb, vb)) in self.vars.iter().zip(other.vars.iter()) {
            if na != nb || va.shape() != vb.shape() {
                return Ok(false);
            }
            let a = va.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let b = vb.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
