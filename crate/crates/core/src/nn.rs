//! Parameter storage, dense layers and the Adam optimizer shared by the
//! encoder, heads and probe.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{AnyTensor, Element, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named trainable tensors. Updating a parameter swaps in a fresh leaf,
/// which also clears its gradient.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    frozen: bool,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), frozen: false }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let value = if self.frozen { value.detach() } else { value.detach().requires_grad() };
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces the values of parameter `i` (same shape).
    pub fn set_data(&mut self, index: usize, data: Vec<T>) -> Result<()> {
        let shape = self.values[index].shape().to_vec();
        let t = Tensor::from_vec(data, &shape)?;
        self.values[index] = if self.frozen { t } else { t.requires_grad() };
        Ok(())
    }

    pub fn grad(&self, index: usize) -> Option<Vec<T>> {
        self.values[index].grad()
    }

    pub fn zero_grad(&self) {
        self.values.iter().for_each(Tensor::zero_grad);
    }

    /// Detaches every parameter from gradient tracking.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for v in &mut self.values {
            *v = v.detach();
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// True when no parameter holds an accumulated gradient.
    pub fn grads_absent(&self) -> bool {
        self.values.iter().all(|v| v.grad().is_none())
    }

    pub fn records(&self, prefix: &str) -> Vec<(String, AnyTensor)>
    where
        AnyTensor: From<Tensor<T>>,
    {
        self.iter()
            .map(|(n, t)| (format!("{prefix}{n}"), AnyTensor::from(t.detach())))
            .collect()
    }

    /// Loads every parameter from `records` (looked up as `prefix + name`).
    pub fn load(&mut self, records: &HashMap<String, AnyTensor>, prefix: &str) -> Result<()> {
        for i in 0..self.values.len() {
            let key = format!("{prefix}{}", self.names[i]);
            let rec = records
                .get(&key)
                .ok_or_else(|| TensorError::Format(format!("missing tensor '{key}'")))?;
            if rec.shape() != self.values[i].shape() {
                return Err(TensorError::Format(format!(
                    "tensor '{key}' has shape {:?}, expected {:?}",
                    rec.shape(),
                    self.values[i].shape()
                )));
            }
            self.set_data(i, rec.to::<T>().to_vec())?;
        }
        Ok(())
    }
}

/// Deterministic parameter initializer: every call draws from its own
/// ChaCha stream so adding a parameter never shifts the others.
pub struct Init {
    seed: u64,
    stream: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed, stream: 0 }
    }

    fn rng(&mut self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        self.stream += 1;
        r
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn fan_in_uniform<T: Element>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = self.rng();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
        Tensor::from_vec(data, shape).expect("shape matches")
    }
}

/// `y = x W + b` on `(n, in)` inputs.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: &mut Init,
    ) -> Self {
        let weight = store.push(format!("{name}.weight"), init.fan_in_uniform(&[inputs, outputs], inputs));
        let bias = store.push(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Linear { weight, bias, inputs, outputs }
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(store.get(self.weight))?.add(store.get(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name
/// and kept in `f64` so that resuming from a checkpoint is exact.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of every store, using and
    /// then clearing the accumulated gradients. Parameters without a
    /// gradient are left alone.
    pub fn step<T: Element>(&mut self, stores: &mut [(&str, &mut ParamStore<T>)]) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (prefix, store) in stores.iter_mut() {
            for i in 0..store.len() {
                let Some(g) = store.grad(i) else { continue };
                let key = format!("{prefix}{}", store.names[i]);
                let (m, v) = self
                    .moments
                    .entry(key)
                    .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                let cur = store.values[i].data();
                let mut next = Vec::with_capacity(cur.len());
                for j in 0..g.len() {
                    let gj = g[j].as_f64();
                    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                    let update = c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                    next.push(T::lit(cur[j].as_f64() - update));
                }
                store.set_data(i, next)?;
            }
        }
        Ok(())
    }

    pub fn records(&self) -> Vec<(String, AnyTensor)> {
        let mut keys: Vec<&String> = self.moments.keys().collect();
        keys.sort();
        let mut out = vec![(
            "adam.step".to_string(),
            AnyTensor::F64(Tensor::scalar(self.step as f64)),
        )];
        for k in keys {
            let (m, v) = &self.moments[k];
            let n = m.len();
            out.push((format!("adam.m.{k}"), AnyTensor::F64(Tensor::from_vec(m.clone(), &[n]).expect("1-d"))));
            out.push((format!("adam.v.{k}"), AnyTensor::F64(Tensor::from_vec(v.clone(), &[n]).expect("1-d"))));
        }
        out
    }

    pub fn load(&mut self, records: &HashMap<String, AnyTensor>) -> Result<()> {
        let step = records
            .get("adam.step")
            .ok_or_else(|| TensorError::Format("missing adam.step".into()))?;
        self.step = step.to::<f64>().item()? as u64;
        self.moments.clear();
        for (k, t) in records {
            if let Some(name) = k.strip_prefix("adam.m.") {
                let v = records
                    .get(&format!("adam.v.{name}"))
                    .ok_or_else(|| TensorError::Format(format!("missing adam.v.{name}")))?;
                self.moments
                    .insert(name.to_string(), (t.to::<f64>().to_vec(), v.to::<f64>().to_vec()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.push("w", Tensor::from_f64(&[1.0, -2.0], &[2]).unwrap());
        let loss = store.get(ParamId(0)).square().unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        adam.step(&mut [("", &mut store)]).unwrap();
        let w = store.get(ParamId(0)).to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6, "{w:?}");
        assert!(store.grads_absent());
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut store = ParamStore::<f32>::new();
        store.push("w", Tensor::from_f64(&[0.3], &[1]).unwrap());
        let loss = store.get(ParamId(0)).square().unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..Default::default() });
        adam.step(&mut [("", &mut store)]).unwrap();
        assert_eq!(store.get(ParamId(0)).to_vec(), vec![0.3f32]);
    }

    #[test]
    fn frozen_store_tracks_nothing() {
        let mut store = ParamStore::<f64>::new();
        let id = store.push("w", Tensor::ones(&[2]));
        store.freeze();
        assert!(!store.get(id).is_tracked());
        store.set_data(0, vec![2.0, 2.0]).unwrap();
        assert!(!store.get(id).is_tracked());
    }

    #[test]
    fn init_is_deterministic() {
        let a: Tensor<f64> = Init::new(5).fan_in_uniform(&[3, 4], 4);
        let b: Tensor<f64> = Init::new(5).fan_in_uniform(&[3, 4], 4);
        assert_eq!(a.to_vec(), b.to_vec());
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() < bound));
    }
}
