//! Named parameter collections with per-parameter Adam state.
//!
//! Parameter names are hierarchical (`"actor/l0/w"`); optimizer steps and
//! soft updates select parameters by name prefix, so one store can hold the
//! encoder, actor, critics and their frozen targets side by side.

use std::collections::BTreeMap;

use super::{DiffError, Mat};

/// Adam hyperparameters; defaults follow the experiment setup.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone)]
struct Entry {
    name: String,
    value: Mat,
    m: Mat,
    v: Mat,
    step: u64,
}

/// Named parameter arrays plus Adam moments; shapes are immutable after
/// registration. Single writer during optimization.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Mat) -> Result<(), DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateParam { name: name.into() });
        }
        let (m, v) = (Mat::zeros(value.dim()), Mat::zeros(value.dim()));
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            m,
            v,
            step: 0,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn slot(&self, name: &str) -> Result<usize, DiffError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParam(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Mat, DiffError> {
        Ok(self.value_at(self.slot(name)?))
    }

    pub fn value_at(&self, slot: usize) -> &Mat {
        &self.entries[slot].value
    }

    pub fn set_value(&mut self, name: &str, value: Mat) -> Result<(), DiffError> {
        let slot = self.slot(name)?;
        if self.entries[slot].value.dim() != value.dim() {
            return Err(DiffError::Shape {
                op: "set_value",
                details: format!("{name}: {:?} vs {:?}", self.entries[slot].value.dim(), value.dim()),
            });
        }
        self.entries[slot].value = value;
        Ok(())
    }

    pub fn name_at(&self, slot: usize) -> &str {
        &self.entries[slot].name
    }

    /// Names in registration order (deterministic).
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names().filter(move |n| n.starts_with(prefix))
    }

    /// Total scalar count under a prefix.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Copy values (not optimizer state) from another store, matching names.
    pub fn copy_values_from(&mut self, other: &ParamStore, prefix: &str) -> Result<(), DiffError> {
        let names: Vec<String> = self
            .names_with_prefix(prefix)
            .map(str::to_string)
            .collect();
        for name in names {
            let v = other.value(&name)?.clone();
            self.set_value(&name, v)?;
        }
        Ok(())
    }

    /// Copy `src_prefix` values over `dst_prefix` values (matching suffixes)
    /// within this store, e.g. syncing targets to critics.
    pub fn copy_values_from_self(
        &mut self,
        dst_prefix: &str,
        src_prefix: &str,
    ) -> Result<(), DiffError> {
        let names: Vec<String> = self
            .names_with_prefix(src_prefix)
            .map(str::to_string)
            .collect();
        for src in names {
            let dst = format!("{dst_prefix}{}", &src[src_prefix.len()..]);
            let v = self.value(&src)?.clone();
            self.set_value(&dst, v)?;
        }
        Ok(())
    }

    /// Reset Adam moments and step counters under a prefix.
    pub fn reset_optimizer(&mut self, prefix: &str) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.m.fill(0.0);
            e.v.fill(0.0);
            e.step = 0;
        }
    }

    /// Bias-corrected Adam step over every parameter under `prefix` that has
    /// a gradient. Fails fast on non-finite gradients, naming the parameter.
    pub fn adam_step(
        &mut self,
        grads: &Grads,
        prefix: &str,
        cfg: AdamConfig,
    ) -> Result<(), DiffError> {
        for (slot, entry) in self.entries.iter_mut().enumerate() {
            if !entry.name.starts_with(prefix) {
                continue;
            }
            let Some(g) = grads.get(slot) else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(DiffError::NonFinite {
                    what: "gradient",
                    name: entry.name.clone(),
                });
            }
            if g.dim() != entry.value.dim() {
                return Err(DiffError::Shape {
                    op: "adam_step",
                    details: format!("{}: {:?} vs {:?}", entry.name, entry.value.dim(), g.dim()),
                });
            }
            entry.step += 1;
            let t = entry.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            ndarray::Zip::from(&mut entry.value)
                .and(&mut entry.m)
                .and(&mut entry.v)
                .and(g)
                .for_each(|p, m, v, &gi| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                });
        }
        Ok(())
    }

    /// Adam moments and step counter for checkpointing.
    pub fn optimizer_state(&self, name: &str) -> Result<(&Mat, &Mat, u64), DiffError> {
        let slot = self.slot(name)?;
        let e = &self.entries[slot];
        Ok((&e.m, &e.v, e.step))
    }

    pub fn set_optimizer_state(
        &mut self,
        name: &str,
        m: Mat,
        v: Mat,
        step: u64,
    ) -> Result<(), DiffError> {
        let slot = self.slot(name)?;
        let e = &mut self.entries[slot];
        if m.dim() != e.value.dim() || v.dim() != e.value.dim() {
            return Err(DiffError::Shape {
                op: "set_optimizer_state",
                details: name.to_string(),
            });
        }
        e.m = m;
        e.v = v;
        e.step = step;
        Ok(())
    }
}

/// Parameter gradients keyed by store slot; accumulation is additive.
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn zeros(store: &ParamStore) -> Self {
        Grads {
            slots: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, slot: usize, g: &Mat) {
        match &mut self.slots[slot] {
            Some(existing) => *existing += g,
            entry => *entry = Some(g.clone()),
        }
    }

    pub fn get(&self, slot: usize) -> Option<&Mat> {
        self.slots.get(slot).and_then(Option::as_ref)
    }

    pub fn by_name<'a>(&'a self, store: &'a ParamStore, name: &str) -> Option<&'a Mat> {
        store.slot(name).ok().and_then(|s| self.get(s))
    }

    /// Add every gradient of `other` into `self`.
    pub fn merge(&mut self, other: &Grads) {
        for (slot, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(slot, g);
            }
        }
    }
}

/// Polyak update `target <- eta * online + (1 - eta) * target` over matching
/// parameter names under the two prefixes.
pub fn soft_update(
    store: &mut ParamStore,
    target_prefix: &str,
    online_prefix: &str,
    eta: f64,
) -> Result<(), DiffError> {
    let online_names: Vec<String> = store
        .names_with_prefix(online_prefix)
        .map(str::to_string)
        .collect();
    if online_names.is_empty() {
        return Err(DiffError::SoftUpdate(format!(
            "no parameters under {online_prefix}"
        )));
    }
    for online_name in online_names {
        let suffix = &online_name[online_prefix.len()..];
        let target_name = format!("{target_prefix}{suffix}");
        let online = store.value(&online_name)?.clone();
        let slot = store
            .slot(&target_name)
            .map_err(|_| DiffError::SoftUpdate(format!("missing target {target_name}")))?;
        let target = &mut store.entries[slot].value;
        if target.dim() != online.dim() {
            return Err(DiffError::SoftUpdate(format!(
                "shape mismatch at {target_name}"
            )));
        }
        ndarray::Zip::from(target)
            .and(&online)
            .for_each(|t, &o| *t = eta * o + (1.0 - eta) * *t);
    }
    Ok(())
}
