use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const STORE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Named parameters in insertion order. Cloning is cheap: values are shared
/// until one side writes to them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    trainable: bool,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredParams {
    version: u32,
    params: BTreeMap<String, StoredTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            trainable,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn param(&self, name: &str) -> Result<&Parameter> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.param(name)?.value.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        Ok(Arc::make_mut(&mut self.params[i].value))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                detail: format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        self.params[i].trainable = trainable;
        Ok(())
    }

    /// Total scalar count of the named parameters.
    pub fn numel<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<usize> {
        names.into_iter().map(|n| Ok(self.get(n)?.len())).sum()
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Little-endian bytes of every parameter accepted by `filter`, in name
    /// order. Used to assert that frozen partitions are untouched.
    pub fn fingerprint(&self, filter: impl Fn(&str) -> bool) -> Vec<u8> {
        let mut names: Vec<&Parameter> = self.params.iter().filter(|p| filter(&p.name)).collect();
        names.sort_by(|a, b| a.name.cmp(&b.name));
        let mut out = Vec::new();
        for p in names {
            out.extend_from_slice(p.name.as_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Puts every parameter on `tape`. Names in `trainable` become
    /// gradient-tracking leaves; the rest are constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: &HashSet<String>) -> Binding<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let rg = trainable.contains(&p.name);
                (p.name.clone(), (tape.leaf_shared(Arc::clone(&p.value), rg), rg))
            })
            .collect();
        Binding { vars }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_stored())?)
    }

    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self.to_stored())?)
    }

    fn to_stored(&self) -> StoredParams {
        StoredParams {
            version: STORE_VERSION,
            params: self
                .params
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        StoredTensor {
                            shape: p.value.shape().to_vec(),
                            trainable: p.trainable,
                            data: p.value.data().to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_json_value(serde_json::from_str(text)?)
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let stored: StoredParams = serde_json::from_value(value)?;
        if stored.version != STORE_VERSION {
            return Err(Error::Contract(format!(
                "parameter store version {} (expected {STORE_VERSION})",
                stored.version
            )));
        }
        let mut store = Self::new();
        for (name, t) in stored.params {
            store.insert(name, Tensor::new(t.shape, t.data)?, t.trainable)?;
        }
        Ok(store)
    }
}

/// Parameters of a [`ParamStore`] placed on one tape.
pub struct Binding<'t> {
    vars: HashMap<String, (Var<'t>, bool)>,
}

impl<'t> Binding<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .map(|(v, _)| *v)
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    /// Collects the accumulated gradient for every tracked parameter; a
    /// tracked parameter the loss never reached gets zeros.
    pub fn grads(&self, tape: &Tape) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, (_, rg))| *rg)
            .map(|(name, (var, _))| {
                let g = tape.grad(*var).unwrap_or_else(|| Tensor::zeros(&var.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0), true).unwrap();
        assert!(s.insert("a", Tensor::scalar(2.0), true).is_err());
    }

    #[test]
    fn json_roundtrip_is_byte_stable() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::matrix(2, 2, vec![0.1, -2.5e-7, 3.0, 1.0 / 3.0]).unwrap(), true)
            .unwrap();
        s.insert("b", Tensor::vector(vec![f64::MIN_POSITIVE, 7.0]), false).unwrap();
        let text = s.to_json().unwrap();
        let back = ParamStore::from_json(&text).unwrap();
        assert_eq!(back.get("w").unwrap(), s.get("w").unwrap());
        assert_eq!(back.get("b").unwrap(), s.get("b").unwrap());
        assert!(!back.param("b").unwrap().trainable);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn clone_is_copy_on_write() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let b = a.clone();
        a.get_mut("w").unwrap().data_mut()[0] = 5.0;
        assert_eq!(b.get("w").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(a.get("w").unwrap().data(), &[5.0, 2.0]);
    }
}
