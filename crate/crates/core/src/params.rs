//! Named parameter storage, initialization and the checkpoint file format.
//!
//! A model is built in two steps: module constructors register [`ParamSpec`]s
//! with a [`Registry`] (names, shapes, init rule, trainable flag), and
//! [`Registry::init_store`] allocates a [`ParameterStore`] from them. Counting
//! parameters therefore never needs the weights in memory.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "FFCKPT01"
//! len       u64      byte length of the JSON manifest
//! manifest  len bytes UTF-8 JSON (see CheckpointManifest)
//! data      f32 values of every entry, in manifest order, row-major
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use floodfuse_autograd::Float;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FFCKPT01";

/// Part of the model a parameter belongs to; drives the freeze policy and
/// the inventory table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Trunk,
    Adapter,
    Neck,
    Cnn,
    Fusion,
    Decoder,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Trunk,
        Component::Adapter,
        Component::Neck,
        Component::Cnn,
        Component::Fusion,
        Component::Decoder,
    ];

    /// Only the pretrained trunk is frozen.
    pub fn trainable(self) -> bool {
        self != Component::Trunk
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Trunk => "trunk",
            Component::Adapter => "adapter",
            Component::Neck => "neck",
            Component::Cnn => "cnn",
            Component::Fusion => "fusion",
            Component::Decoder => "decoder",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    Uniform { bound: f64 },
}

impl Init {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
    pub component: Component,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct BufferSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter and buffer declarations while a model is built.
#[derive(Debug, Clone)]
pub struct Registry {
    params: Vec<ParamSpec>,
    buffers: Vec<BufferSpec>,
    component: Component,
}

impl Default for Registry {
    fn default() -> Self {
        Self::new()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            component: Component::Decoder,
        }
    }

    /// Component that subsequently registered parameters belong to.
    pub fn set_component(&mut self, component: Component) {
        self.component = component;
    }

    pub fn component(&self) -> Component {
        self.component
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> String {
        let name = name.into();
        assert!(
            !self.params.iter().any(|p| p.name == name),
            "parameter {name} registered twice"
        );
        self.params.push(ParamSpec {
            name: name.clone(),
            shape: shape.to_vec(),
            init,
            trainable: self.component.trainable(),
            component: self.component,
        });
        name
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> String {
        let name = name.into();
        self.buffers.push(BufferSpec {
            name: name.clone(),
            shape: shape.to_vec(),
            init,
        });
        name
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn buffers(&self) -> &[BufferSpec] {
        &self.buffers
    }

    /// Allocates and initializes every declared tensor. Each tensor draws from
    /// its own stream seeded by `(seed, name)`, so a parameter's initial value
    /// does not depend on which other modules exist.
    pub fn init_store<F: Float>(&self, seed: u64) -> ParameterStore<F> {
        let mut store = ParameterStore::new();
        for p in &self.params {
            let value = init_tensor::<F>(&p.shape, p.init, seed, &p.name);
            store.insert_param(&p.name, value, p.trainable, p.component);
        }
        for b in &self.buffers {
            store.insert_buffer(&b.name, init_tensor::<F>(&b.shape, b.init, seed, &b.name));
        }
        store
    }

    pub fn inventory(&self) -> Inventory {
        Inventory::from_specs(&self.params)
    }
}

fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn init_tensor<F: Float>(shape: &[usize], init: Init, seed: u64, name: &str) -> ArrayD<F> {
    let dim = IxDyn(shape);
    match init {
        Init::Zeros => ArrayD::zeros(dim),
        Init::Ones => ArrayD::from_elem(dim, F::one()),
        Init::Normal { std } => {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, name));
            let dist = Normal::new(0.0, std).expect("valid std");
            ArrayD::from_shape_simple_fn(dim, || F::of(dist.sample(&mut rng) as f32 as f64))
        }
        Init::Uniform { bound } => {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, name));
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            ArrayD::from_shape_simple_fn(dim, || F::of(dist.sample(&mut rng) as f32 as f64))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Entry<F: Float> {
    pub value: Arc<ArrayD<F>>,
    pub trainable: bool,
    pub component: Component,
}

/// Named weights with a per-entry trainable flag, plus non-trainable
/// running statistics ("buffers"). Values are shared (`Arc`) so snapshots
/// and forward graphs are cheap; mutation copies on write.
#[derive(Debug, Clone)]
pub struct ParameterStore<F: Float> {
    params: BTreeMap<String, Entry<F>>,
    buffers: BTreeMap<String, Arc<ArrayD<F>>>,
}

impl<F: Float> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParameterStore<F> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: &str, value: ArrayD<F>, trainable: bool, component: Component) {
        let prev = self.params.insert(
            name.to_string(),
            Entry {
                value: Arc::new(value),
                trainable,
                component,
            },
        );
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn insert_buffer(&mut self, name: &str, value: ArrayD<F>) {
        self.buffers.insert(name.to_string(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Entry<F>> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> &Arc<ArrayD<F>> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn buffer(&self, name: &str) -> &Arc<ArrayD<F>> {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    pub fn set_buffer(&mut self, name: &str, value: ArrayD<F>) {
        let slot = self
            .buffers
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"));
        assert_eq!(slot.shape(), value.shape(), "buffer {name} shape changed");
        *slot = Arc::new(value);
    }

    /// Mutable access to a parameter's value (copy-on-write).
    pub fn value_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        let entry = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        Arc::make_mut(&mut entry.value)
    }

    /// Replaces a parameter value, keeping its flag; the shape must match.
    pub fn set_value(&mut self, name: &str, value: ArrayD<F>) -> Result<()> {
        let entry = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: stored {:?}, given {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Entry<F>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Arc<ArrayD<F>>)> {
        self.buffers.iter()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self, trainable_only: bool) -> usize {
        self.params
            .values()
            .filter(|e| !trainable_only || e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Converts the element type (e.g. to `f64` for gradient checks).
    pub fn cast<G: Float>(&self) -> ParameterStore<G> {
        let conv = |a: &ArrayD<F>| a.mapv(|v| G::of(v.as_f64()));
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(n, e)| {
                    (
                        n.clone(),
                        Entry {
                            value: Arc::new(conv(&e.value)),
                            trainable: e.trainable,
                            component: e.component,
                        },
                    )
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(n, b)| (n.clone(), Arc::new(conv(b))))
                .collect(),
        }
    }

    /// Copies values of same-named, same-shaped parameters from `other` for
    /// which `select` holds. Returns the names copied.
    pub fn import_from(&mut self, other: &ParameterStore<F>, select: impl Fn(&str, &Entry<F>) -> bool) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for (name, entry) in self.params.iter_mut() {
            if !select(name, entry) {
                continue;
            }
            let Some(src) = other.params.get(name) else {
                continue;
            };
            if src.value.shape() != entry.value.shape() {
                return Err(Error::Shape(format!(
                    "import {name}: expected {:?}, file has {:?}",
                    entry.value.shape(),
                    src.value.shape()
                )));
            }
            entry.value = src.value.clone();
            copied.push(name.clone());
        }
        Ok(copied)
    }

    /// Names whose values differ (bitwise) between two stores with the same
    /// layout.
    pub fn changed_params(&self, other: &ParameterStore<F>) -> Vec<String> {
        self.params
            .iter()
            .filter(|(name, e)| match other.params.get(*name) {
                Some(o) => e.value.iter().zip(o.value.iter()).any(|(a, b)| a.as_f64().to_bits() != b.as_f64().to_bits()),
                None => true,
            })
            .map(|(n, _)| n.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: EntryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<Component>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    Buffer,
}

/// JSON header of a checkpoint file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    /// Echo of the configuration the weights belong to.
    #[serde(default)]
    pub config: serde_json::Value,
    /// Free-form state (e.g. epoch counters for resuming).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub entries: Vec<CheckpointEntry>,
}

/// Metadata written alongside the tensors.
#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub step: u64,
    pub config: serde_json::Value,
    pub extra: serde_json::Value,
}

impl<F: Float> ParameterStore<F> {
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let mut entries = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        for (name, e) in &self.params {
            entries.push(CheckpointEntry {
                name: name.clone(),
                shape: e.value.shape().to_vec(),
                kind: EntryKind::Param,
                trainable: Some(e.trainable),
                component: Some(e.component),
            });
            push_f32(&mut data, &e.value);
        }
        for (name, b) in &self.buffers {
            entries.push(CheckpointEntry {
                name: name.clone(),
                shape: b.shape().to_vec(),
                kind: EntryKind::Buffer,
                trainable: None,
                component: None,
            });
            push_f32(&mut data, b);
        }
        let manifest = CheckpointManifest {
            format: "floodfuse-checkpoint".into(),
            version: 1,
            step: meta.step,
            config: meta.config.clone(),
            extra: meta.extra.clone(),
            entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointManifest)> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json_end = 16 + len;
        if bytes.len() < json_end {
            return Err(Error::format(path, "truncated manifest"));
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..json_end])
            .map_err(|e| Error::format(path, format!("manifest: {e}")))?;
        let mut store = ParameterStore::new();
        let mut offset = json_end;
        for entry in &manifest.entries {
            let count: usize = entry.shape.iter().product();
            let end = offset + 4 * count;
            if bytes.len() < end {
                return Err(Error::format(path, format!("truncated data for {}", entry.name)));
            }
            let values: Vec<F> = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| F::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            offset = end;
            let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).unwrap();
            match entry.kind {
                EntryKind::Param => store.insert_param(
                    &entry.name,
                    array,
                    entry.trainable.unwrap_or(false),
                    entry.component.unwrap_or(Component::Trunk),
                ),
                EntryKind::Buffer => store.insert_buffer(&entry.name, array),
            }
        }
        if offset != bytes.len() {
            return Err(Error::format(path, "trailing bytes after tensor data"));
        }
        Ok((store, manifest))
    }
}

fn push_f32<F: Float>(out: &mut Vec<u8>, a: &ArrayD<F>) {
    for v in a.iter() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

/// Per-component parameter counts.
#[derive(Debug, Clone, Serialize)]
pub struct Inventory {
    pub rows: Vec<InventoryRow>,
    pub total: usize,
    pub trainable: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct InventoryRow {
    pub component: Component,
    pub trainable: bool,
    pub tensors: usize,
    pub parameters: usize,
}

impl Inventory {
    pub fn from_specs(specs: &[ParamSpec]) -> Self {
        let mut rows = Vec::new();
        for c in Component::ALL {
            let members: Vec<_> = specs.iter().filter(|p| p.component == c).collect();
            if members.is_empty() {
                continue;
            }
            rows.push(InventoryRow {
                component: c,
                trainable: c.trainable(),
                tensors: members.len(),
                parameters: members.iter().map(|p| p.numel()).sum(),
            });
        }
        let total = specs.iter().map(|p| p.numel()).sum();
        let trainable = specs.iter().filter(|p| p.trainable).map(|p| p.numel()).sum();
        Self { rows, total, trainable }
    }

    pub fn count(&self, component: Component) -> usize {
        self.rows
            .iter()
            .find(|r| r.component == component)
            .map_or(0, |r| r.parameters)
    }
}

impl fmt::Display for Inventory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>9} {:>8} {:>14}", "component", "trainable", "tensors", "parameters")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>9} {:>8} {:>14}",
                r.component.as_str(),
                if r.trainable { "yes" } else { "no" },
                r.tensors,
                r.parameters
            )?;
        }
        writeln!(f, "{:<10} {:>9} {:>8} {:>14}", "total", "", "", self.total)?;
        write!(
            f,
            "{:<10} {:>9} {:>8} {:>14} ({:.2}%)",
            "trainable",
            "",
            "",
            self.trainable,
            100.0 * self.trainable as f64 / self.total.max(1) as f64
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> Registry {
        let mut reg = Registry::new();
        reg.set_component(Component::Trunk);
        reg.param("trunk.w", &[3, 4], Init::Normal { std: 0.02 });
        reg.set_component(Component::Adapter);
        reg.param("adapter.w2", &[4, 3], Init::Zeros);
        reg.param("adapter.b", &[3], Init::fan_in(4));
        reg.buffer("bn.running_var", &[3], Init::Ones);
        reg
    }

    #[test]
    fn freeze_policy_follows_component() {
        let store: ParameterStore<f32> = registry().init_store(1);
        assert!(!store.get("trunk.w").unwrap().trainable);
        assert!(store.get("adapter.w2").unwrap().trainable);
        assert_eq!(store.trainable_names(), vec!["adapter.b", "adapter.w2"]);
    }

    #[test]
    fn init_is_per_name_deterministic() {
        let a: ParameterStore<f32> = registry().init_store(5);
        let mut reg = Registry::new();
        reg.set_component(Component::Trunk);
        reg.param("other", &[7], Init::Normal { std: 1.0 });
        reg.param("trunk.w", &[3, 4], Init::Normal { std: 0.02 });
        let b: ParameterStore<f32> = reg.init_store(5);
        assert_eq!(a.value("trunk.w"), b.value("trunk.w"));
        let c: ParameterStore<f32> = registry().init_store(6);
        assert_ne!(a.value("trunk.w"), c.value("trunk.w"));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let store: ParameterStore<f32> = registry().init_store(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let meta = CheckpointMeta {
            step: 17,
            config: serde_json::json!({"beta": 0.8}),
            extra: serde_json::Value::Null,
        };
        store.save(&path, &meta).unwrap();
        let (back, manifest) = ParameterStore::<f32>::load(&path).unwrap();
        assert_eq!(manifest.step, 17);
        assert_eq!(manifest.config["beta"], 0.8);
        assert!(back.changed_params(&store).is_empty());
        for (name, e) in store.params() {
            let b = back.get(name).unwrap();
            assert_eq!(b.trainable, e.trainable);
            assert_eq!(b.component, e.component);
            let bits = |a: &ArrayD<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&b.value), bits(&e.value));
        }
        assert_eq!(back.buffer("bn.running_var").as_slice().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(ParameterStore::<f32>::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn inventory_counts_by_component() {
        let inv = registry().inventory();
        assert_eq!(inv.count(Component::Trunk), 12);
        assert_eq!(inv.count(Component::Adapter), 15);
        assert_eq!(inv.total, 27);
        assert_eq!(inv.trainable, 15);
    }
}
