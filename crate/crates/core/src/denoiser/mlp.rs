use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Condition, NoiseModel, ParamGradients, StateVector, TensorSlot};
use crate::error::{Error, Result};

/// Shape of the conditional MLP. An empty `hidden` list gives a single affine
/// layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub dim: usize,
    pub num_classes: usize,
    pub num_steps: usize,
    pub time_embed_width: usize,
    pub hidden: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(dim: usize, num_classes: usize, num_steps: usize) -> Self {
        Self { dim, num_classes, num_steps, time_embed_width: 8, hidden: vec![64, 64] }
    }

    pub fn input_width(&self) -> usize {
        self.dim + self.time_embed_width + self.num_classes
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_steps == 0 {
            return Err(Error::Invalid("network needs dim >= 1 and num_steps >= 1".into()));
        }
        if !self.time_embed_width.is_multiple_of(2) {
            return Err(Error::Invalid("time embedding width must be even".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Invalid("hidden widths must be positive".into()));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_width()];
        widths.extend(&self.hidden);
        widths.push(self.dim);
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// Sinusoidal features of `t / T` at frequencies `pi * 2^i`.
pub fn time_embedding(t: usize, num_steps: usize, width: usize, out: &mut [f64]) {
    let s = t as f64 / num_steps as f64;
    for i in 0..width / 2 {
        let w = PI * (1u64 << i) as f64 * s;
        out[2 * i] = w.sin();
        out[2 * i + 1] = w.cos();
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Adapter {
    rank: usize,
    // rank x in
    down: Vec<f64>,
    // out x rank
    up: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inp: usize,
    out: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    adapter: Option<Adapter>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self { inp, out, weight: vec![0.0; out * inp], bias: vec![0.0; out], adapter: None }
    }

    /// Returns (pre-activation, adapter down-projection).
    fn forward(&self, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut z = self.bias.clone();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &self.weight[o * self.inp..(o + 1) * self.inp];
            *zo += dot(row, h);
        }
        let mut ah = Vec::new();
        if let Some(ad) = &self.adapter {
            ah = (0..ad.rank).map(|r| dot(&ad.down[r * self.inp..(r + 1) * self.inp], h)).collect();
            for (o, zo) in z.iter_mut().enumerate() {
                *zo += dot(&ad.up[o * ad.rank..(o + 1) * ad.rank], &ah);
            }
        }
        (z, ah)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Weights of the conditional noise-prediction MLP.
///
/// With adapters enabled every hidden layer computes `(W + B A) h + b`, the
/// base weights are frozen, and only the `A`/`B` pairs are trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    spec: NetworkSpec,
    layers: Vec<Dense>,
    adapter_enabled: bool,
}

/// A named tensor in row-major order, used by checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl DenoiserParams {
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_shapes().into_iter().map(|(o, i)| Dense::zeros(o, i)).collect();
        Ok(Self { spec, layers, adapter_enabled: false })
    }

    /// Gaussian fan-in scaled weights and zero biases. The first layer's
    /// condition columns start at zero, so a network trained only on the null
    /// condition keeps identical conditional and unconditional outputs.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        let cond_start = p.spec.dim + p.spec.time_embed_width;
        for (li, layer) in p.layers.iter_mut().enumerate() {
            let scale = (1.0 / layer.inp as f64).sqrt();
            for o in 0..layer.out {
                for i in 0..layer.inp {
                    let w: f64 = rng.sample(StandardNormal);
                    layer.weight[o * layer.inp + i] = if li == 0 && i >= cond_start { 0.0 } else { w * scale };
                }
            }
        }
        Ok(p)
    }

    /// Every parameter (including adapters, if present) drawn from N(0, scale^2).
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for layer in &mut self.layers {
            let mut fill = |v: &mut [f64]| v.iter_mut().for_each(|x| *x = scale * rng.sample::<f64, _>(StandardNormal));
            fill(&mut layer.weight);
            fill(&mut layer.bias);
            if let Some(ad) = &mut layer.adapter {
                fill(&mut ad.down);
                fill(&mut ad.up);
            }
        }
    }

    /// Attaches rank-`rank` adapters to every hidden layer and freezes the base
    /// weights. `A` is Gaussian and `B` is zero so the network function is
    /// unchanged.
    pub fn enable_adapters<R: Rng + ?Sized>(&mut self, rank: usize, rng: &mut R) -> Result<()> {
        if rank == 0 {
            return Err(Error::Invalid("adapter rank must be positive".into()));
        }
        let n = self.layers.len();
        for layer in &mut self.layers[..n - 1] {
            let scale = (1.0 / layer.inp as f64).sqrt();
            let down = (0..rank * layer.inp).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            layer.adapter = Some(Adapter { rank, down, up: vec![0.0; layer.out * rank] });
        }
        self.adapter_enabled = true;
        Ok(())
    }

    pub fn adapter_enabled(&self) -> bool {
        self.adapter_enabled
    }

    pub fn adapter_rank(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| l.adapter.as_ref().map(|a| a.rank))
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Same weights, with time normalised over a different step count.
    pub fn with_num_steps(&self, num_steps: usize) -> Self {
        let mut p = self.clone();
        p.spec.num_steps = num_steps;
        p
    }

    /// Base weights and biases only, in layer order.
    pub fn base_vector(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias).copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("layer{i}.weight"),
                shape: vec![l.out, l.inp],
                data: l.weight.clone(),
            });
            out.push(NamedTensor { name: format!("layer{i}.bias"), shape: vec![l.out], data: l.bias.clone() });
            if let Some(ad) = &l.adapter {
                out.push(NamedTensor {
                    name: format!("layer{i}.adapter_a"),
                    shape: vec![ad.rank, l.inp],
                    data: ad.down.clone(),
                });
                out.push(NamedTensor {
                    name: format!("layer{i}.adapter_b"),
                    shape: vec![l.out, ad.rank],
                    data: ad.up.clone(),
                });
            }
        }
        out
    }

    pub fn from_tensors(spec: NetworkSpec, adapter_rank: Option<usize>, tensors: &[NamedTensor]) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        let n = p.layers.len();
        let find = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
            }
            Ok(t.data.clone())
        };
        for (i, l) in p.layers.iter_mut().enumerate() {
            l.weight = find(&format!("layer{i}.weight"), &[l.out, l.inp])?;
            l.bias = find(&format!("layer{i}.bias"), &[l.out])?;
            if let Some(rank) = adapter_rank {
                if i < n - 1 {
                    let down = find(&format!("layer{i}.adapter_a"), &[rank, l.inp])?;
                    let up = find(&format!("layer{i}.adapter_b"), &[l.out, rank])?;
                    l.adapter = Some(Adapter { rank, down, up });
                }
            }
        }
        p.adapter_enabled = adapter_rank.is_some();
        let expected = p.tensors().len();
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!("expected {expected} tensors, found {}", tensors.len())));
        }
        Ok(p)
    }

    /// Mutable access to a base weight, for tests and hand-built networks.
    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.layers[layer].weight
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.layers[layer].bias
    }

    fn input(&self, x: &StateVector, c: Condition, t: usize) -> Vec<f64> {
        let s = &self.spec;
        assert_eq!(x.dim(), s.dim, "state dimension mismatch");
        let mut h = vec![0.0; s.input_width()];
        h[..s.dim].copy_from_slice(x.as_slice());
        time_embedding(t, s.num_steps, s.time_embed_width, &mut h[s.dim..s.dim + s.time_embed_width]);
        c.embed_into(s.num_classes, &mut h[s.dim + s.time_embed_width..]);
        h
    }

    fn trainable_layers(&self) -> impl Iterator<Item = (usize, &Dense)> {
        let enabled = self.adapter_enabled;
        self.layers.iter().enumerate().filter(move |(_, l)| !enabled || l.adapter.is_some())
    }
}

impl NoiseModel for DenoiserParams {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn num_steps(&self) -> usize {
        self.spec.num_steps
    }

    fn predict_noise(&self, x: &StateVector, c: Condition, t: usize) -> StateVector {
        let mut h = self.input(x, c, t);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (z, _) = layer.forward(&h);
            h = if i == last { z } else { z.into_iter().map(silu).collect() };
        }
        let out = StateVector::new(h);
        debug_assert!(out.is_finite(), "non-finite noise prediction");
        out
    }

    #[allow(clippy::needless_range_loop)]
    fn backprop(&self, x: &StateVector, c: Condition, t: usize, upstream: &StateVector) -> ParamGradients {
        assert_eq!(upstream.dim(), self.spec.dim, "upstream dimension mismatch");
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut downs = Vec::with_capacity(self.layers.len());
        let mut h = self.input(x, c, t);
        for (i, layer) in self.layers.iter().enumerate() {
            let (z, ah) = layer.forward(&h);
            let next = if i == last { z.clone() } else { z.iter().map(|&v| silu(v)).collect() };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
            downs.push(ah);
        }

        let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        let mut delta = upstream.as_slice().to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let hin = &inputs[i];
            let up_delta: Vec<f64> = match &layer.adapter {
                Some(ad) => {
                    (0..ad.rank).map(|r| (0..layer.out).map(|o| ad.up[o * ad.rank + r] * delta[o]).sum()).collect()
                }
                None => Vec::new(),
            };
            if self.adapter_enabled {
                if let Some(ad) = &layer.adapter {
                    let g = &mut per_layer[i];
                    g.reserve(ad.rank * layer.inp + layer.out * ad.rank);
                    for r in 0..ad.rank {
                        g.extend(hin.iter().map(|hv| up_delta[r] * hv));
                    }
                    for o in 0..layer.out {
                        g.extend(downs[i].iter().map(|a| delta[o] * a));
                    }
                }
            } else {
                let g = &mut per_layer[i];
                g.reserve(layer.out * layer.inp + layer.out);
                for o in 0..layer.out {
                    g.extend(hin.iter().map(|hv| delta[o] * hv));
                }
                g.extend_from_slice(&delta);
            }
            if i > 0 {
                let mut prev = vec![0.0; layer.inp];
                for o in 0..layer.out {
                    let row = &layer.weight[o * layer.inp..(o + 1) * layer.inp];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * delta[o];
                    }
                }
                if let Some(ad) = &layer.adapter {
                    for r in 0..ad.rank {
                        let row = &ad.down[r * layer.inp..(r + 1) * layer.inp];
                        for (p, a) in prev.iter_mut().zip(row) {
                            *p += a * up_delta[r];
                        }
                    }
                }
                for (p, z) in prev.iter_mut().zip(&pre[i - 1]) {
                    *p *= silu_grad(*z);
                }
                delta = prev;
            }
        }
        ParamGradients::from_vec(per_layer.concat())
    }

    fn trainable_layout(&self) -> Vec<TensorSlot> {
        let mut out = Vec::new();
        for (i, l) in self.trainable_layers() {
            match (&l.adapter, self.adapter_enabled) {
                (Some(ad), true) => {
                    out.push(TensorSlot { name: format!("layer{i}.adapter_a"), len: ad.rank * l.inp });
                    out.push(TensorSlot { name: format!("layer{i}.adapter_b"), len: l.out * ad.rank });
                }
                _ => {
                    out.push(TensorSlot { name: format!("layer{i}.weight"), len: l.out * l.inp });
                    out.push(TensorSlot { name: format!("layer{i}.bias"), len: l.out });
                }
            }
        }
        out
    }

    fn visit_trainable(&self, f: &mut dyn FnMut(&[f64])) {
        for (_, l) in self.trainable_layers() {
            match (&l.adapter, self.adapter_enabled) {
                (Some(ad), true) => {
                    f(&ad.down);
                    f(&ad.up);
                }
                _ => {
                    f(&l.weight);
                    f(&l.bias);
                }
            }
        }
    }

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        let enabled = self.adapter_enabled;
        for l in self.layers.iter_mut() {
            match (&mut l.adapter, enabled) {
                (Some(ad), true) => {
                    f(&mut ad.down);
                    f(&mut ad.up);
                }
                (None, true) => {}
                (_, false) => {
                    f(&mut l.weight);
                    f(&mut l.bias);
                }
            }
        }
    }
}
