//! Named parameters grouped for selective training, gradient buffers and the
//! optimizer.

use std::collections::HashMap;
use std::f64::consts::PI;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Summary of one parameter group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<usize>,
    pub trainable: bool,
    pub scalars: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        if !value.is_finite() {
            return Err(Error::Numerical(format!("parameter `{name}` initialized with non-finite values")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            group: group.into(),
            value,
            trainable: true,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Sets every parameter's flag according to its group.
    pub fn set_trainable_groups(&mut self, pred: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            e.trainable = pred(&e.group);
        }
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut groups: Vec<ParamGroup> = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            match groups.iter_mut().find(|g| g.name == e.group) {
                Some(g) => {
                    g.params.push(i);
                    g.scalars += e.value.len();
                    g.trainable &= e.trainable;
                }
                None => groups.push(ParamGroup {
                    name: e.group.clone(),
                    params: vec![i],
                    trainable: e.trainable,
                    scalars: e.value.len(),
                }),
            }
        }
        groups
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.entries.iter().find(|e| !e.value.is_finite()) {
            Some(e) => Err(Error::Numerical(format!("parameter `{}` became non-finite", e.name))),
            None => Ok(()),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    bufs: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            bufs: store.entries.iter().map(|e| Tensor::zeros(e.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.bufs[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        self.bufs[id.0].add_assign(g);
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.bufs {
            b.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().all(Tensor::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Adaptive moment estimation.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.entries.iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update of every trainable parameter; frozen ones are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, e) in store.entries.iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let g = grads.bufs[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, p) in e.value.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *p -= lr * (update + self.weight_decay * *p);
            }
            if !e.value.is_finite() {
                return Err(Error::Numerical(format!(
                    "parameter `{}` became non-finite after optimizer step {}",
                    e.name, self.t
                )));
            }
        }
        Ok(())
    }
}

/// Cosine decay with linear warmup, evaluated per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.max_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / decay as f64).min(1.0);
        self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = CosineSchedule {
            max_lr: 0.002,
            min_lr: 0.0,
            warmup_steps: 20,
            total_steps: 100,
        };
        assert!((s.lr(0) - 0.0001).abs() < 1e-15);
        assert!((s.lr(19) - 0.002).abs() < 1e-15);
        assert!((s.lr(20) - 0.002).abs() < 1e-15);
        assert!((s.lr(60) - 0.001).abs() < 1e-12);
        assert!(s.lr(99) < 1e-5);
        for t in 20..99 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
    }

    #[test]
    fn adam_skips_frozen_and_descends() {
        let mut store = ParamStore::new();
        let a = store.insert("a", "g1", Tensor::row_vector(vec![1.0, -2.0])).unwrap();
        let b = store.insert("b", "g2", Tensor::row_vector(vec![3.0])).unwrap();
        store.set_trainable(b, false);
        let mut opt = Adam::new(&store);
        for _ in 0..500 {
            // d/dx of x² is 2x
            let mut grads = Grads::zeros_like(&store);
            let ga = store.get(a).map(|x| 2.0 * x);
            grads.accumulate(a, &ga);
            grads.accumulate(b, &Tensor::row_vector(vec![100.0]));
            opt.step(&mut store, &grads, 0.05).unwrap();
        }
        assert!(store.get(a).data().iter().all(|v| v.abs() < 0.05));
        assert_eq!(store.get(b).data(), &[3.0]);
    }

    #[test]
    fn groups_summarize() {
        let mut store = ParamStore::new();
        store.insert("p0", "prompt", Tensor::zeros(&[100, 64])).unwrap();
        store.insert("w", "encoder", Tensor::zeros(&[4, 4])).unwrap();
        store.set_trainable_groups(|g| g == "prompt");
        let groups = store.groups();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].scalars, 6400);
        assert!(groups[0].trainable && !groups[1].trainable);
        assert_eq!(store.trainable_scalars(), 6400);
        assert!(store.insert("w", "x", Tensor::zeros(&[1, 1])).is_err());
    }
}
