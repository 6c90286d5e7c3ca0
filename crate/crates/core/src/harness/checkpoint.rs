//! JSON checkpoints: every parameter tensor under its name as
//! `{shape, data}` (row-major), plus the model layout needed to rebuild it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::dataset::missing;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Model type, checked on load.
    pub kind: String,
    pub tensors: BTreeMap<String, TensorEntry>,
    /// The model with every tensor replaced by `{"tensor": name}`.
    pub layout: Value,
    /// Free-form provenance (config, training report).
    #[serde(default)]
    pub meta: Value,
}

/// A serialized `ParamTensor`: exactly `{name, value: {rows, cols, data}}`.
fn as_tensor(v: &Value) -> Option<(String, TensorEntry)> {
    let o = v.as_object()?;
    if o.len() != 2 {
        return None;
    }
    let name = o.get("name")?.as_str()?;
    let m = o.get("value")?.as_object()?;
    if m.len() != 3 {
        return None;
    }
    let rows = m.get("rows")?.as_u64()? as usize;
    let cols = m.get("cols")?.as_u64()? as usize;
    let data: Vec<f64> = m.get("data")?.as_array()?.iter().map(Value::as_f64).collect::<Option<_>>()?;
    Some((name.to_string(), TensorEntry { shape: vec![rows, cols], data }))
}

fn extract(v: &mut Value, out: &mut BTreeMap<String, TensorEntry>) -> Result<()> {
    if let Some((name, entry)) = as_tensor(v) {
        if out.insert(name.clone(), entry).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        *v = json!({ "tensor": name });
        return Ok(());
    }
    match v {
        Value::Array(a) => a.iter_mut().try_for_each(|x| extract(x, out)),
        Value::Object(o) => o.values_mut().try_for_each(|x| extract(x, out)),
        _ => Ok(()),
    }
}

fn restore(v: &mut Value, tensors: &BTreeMap<String, TensorEntry>, used: &mut usize) -> Result<()> {
    if let Some(name) = v.as_object().filter(|o| o.len() == 1).and_then(|o| o.get("tensor")).and_then(Value::as_str) {
        let t = tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let [rows, cols] = t.shape[..] else {
            return Err(Error::Checkpoint(format!("tensor {name} is not two-dimensional")));
        };
        if rows * cols != t.data.len() {
            return Err(Error::Checkpoint(format!("tensor {name}: shape {rows}x{cols} but {} values", t.data.len())));
        }
        let mut value = Map::new();
        value.insert("rows".into(), json!(rows));
        value.insert("cols".into(), json!(cols));
        value.insert("data".into(), json!(t.data));
        *v = json!({ "name": name, "value": value });
        *used += 1;
        return Ok(());
    }
    match v {
        Value::Array(a) => a.iter_mut().try_for_each(|x| restore(x, tensors, used)),
        Value::Object(o) => o.values_mut().try_for_each(|x| restore(x, tensors, used)),
        _ => Ok(()),
    }
}

impl Checkpoint {
    pub fn from_model<T: Serialize>(kind: &str, model: &T, meta: Value) -> Result<Self> {
        let mut layout = serde_json::to_value(model)?;
        let mut tensors = BTreeMap::new();
        extract(&mut layout, &mut tensors)?;
        Ok(Self { kind: kind.to_string(), tensors, layout, meta })
    }

    pub fn into_model<T: DeserializeOwned>(self, kind: &str) -> Result<T> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        let mut layout = self.layout;
        let mut used = 0;
        restore(&mut layout, &self.tensors, &mut used)?;
        if used != self.tensors.len() {
            return Err(Error::Checkpoint(format!("{} tensors stored but {used} referenced", self.tensors.len())));
        }
        serde_json::from_value(layout).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| missing(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

pub fn save_model<T: Serialize>(path: &Path, kind: &str, model: &T, meta: Value) -> Result<()> {
    Checkpoint::from_model(kind, model, meta)?.save(path)
}

pub fn load_model<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    Checkpoint::load(path)?.into_model(kind)
}
