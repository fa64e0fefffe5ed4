//! Named, grouped trainable parameters.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hasher;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// The three disjoint parameter groups updated by the alternating phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::Encoder,
        ParamGroup::Decoder,
        ParamGroup::Discriminator,
    ];

    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Encoder => 0,
            ParamGroup::Decoder => 1,
            ParamGroup::Discriminator => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Encoder => "enc",
            ParamGroup::Decoder => "dec",
            ParamGroup::Discriminator => "dis",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub var: Var,
}

/// Owns every trainable tensor, keyed by unique name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    dtype: DType,
    device: Device,
}

pub(crate) enum Init {
    /// Uniform in ±1/sqrt(fan_in).
    FanIn(usize),
    Uniform(f64),
    Zeros,
    Ones,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub(crate) fn create(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name '{name}'")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            var: var.clone(),
        });
        Ok(var)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn vars(&self, group: ParamGroup) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Hash of the raw bit patterns of every tensor in `group`.
    pub fn group_hash(&self, group: ParamGroup) -> Result<u64> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            h.write(e.name.as_bytes());
            let flat = e.var.as_tensor().flatten_all()?;
            match flat.dtype() {
                DType::F64 => flat
                    .to_vec1::<f64>()?
                    .iter()
                    .for_each(|v| h.write_u64(v.to_bits())),
                _ => flat
                    .to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .for_each(|v| h.write_u32(v.to_bits())),
            }
        }
        Ok(h.finish())
    }

    /// Overwrites a parameter, checking shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        if entry.var.dims() != value.dims() {
            return Err(Error::Contract(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                entry.var.dims(),
                value.dims()
            )));
        }
        entry.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// The parameter as seen by a forward pass: a detached copy when its group is
/// frozen, so no gradient can reach it.
pub(crate) fn live(var: &Var, frozen: bool) -> Tensor {
    if frozen {
        var.as_tensor().detach()
    } else {
        var.as_tensor().clone()
    }
}
