//! Minimal reverse-mode kernel for dense networks.
//!
//! A forward pass records a [`Tape`] of layer activations; `backward`
//! consumes it once and accumulates parameter gradients into a
//! same-shaped [`Mlp`]. Parameters of several networks travel together in a
//! [`ParamBundle`], which is what the optimizer and checkpoints operate on.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Identity),
            _ => Err(Error::Checkpoint(format!("unknown activation code {c}"))),
        }
    }
}

/// Fully connected layer, `weight` stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weight.chunks_exact(self.inputs).zip(&self.bias) {
            out.push(row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b);
        }
    }
}

/// Multi-layer perceptron: hidden layers use `hidden`, the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
}

/// Activations recorded by one forward pass.
#[derive(Debug)]
pub struct Tape {
    /// `acts[0]` is the input, `acts[i]` the output of layer `i - 1`.
    acts: Vec<Vec<f64>>,
    used: bool,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// Scaled-uniform fan-in initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(sizes: &[usize], hidden: Activation, rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut d = Dense::zeros(w[0], w[1]);
                d.weight
                    .iter_mut()
                    .chain(d.bias.iter_mut())
                    .for_each(|p| *p = rng.gen_range(-bound..bound));
                d
            })
            .collect();
        Self { layers, hidden }
    }

    pub fn zeros(sizes: &[usize], hidden: Activation) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            hidden,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
            hidden: self.hidden,
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    fn activate(&self, layer: usize, v: &mut [f64]) {
        if layer + 1 < self.layers.len() && self.hidden == Activation::Tanh {
            v.iter_mut().for_each(|x| *x = x.tanh());
        }
    }

    /// Forward pass without recording.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.forward_into(&cur, &mut next);
            self.activate(i, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(l.outputs);
            l.forward_into(acts.last().unwrap(), &mut out);
            self.activate(i, &mut out);
            acts.push(out);
        }
        let output = acts.last().unwrap().clone();
        Ok((output, Tape { acts, used: false }))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(Error::ShapeMismatch {
                expected: self.input_len(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward_into(&self, tape: &mut Tape, output_grad: &[f64], grads: &mut Mlp) -> Result<Vec<f64>> {
        if tape.used {
            return Err(Error::TapeReused);
        }
        if output_grad.len() != self.output_len() {
            return Err(Error::ShapeMismatch {
                expected: self.output_len(),
                got: output_grad.len(),
            });
        }
        tape.used = true;
        let mut g = output_grad.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let out = &tape.acts[i + 1];
            if i + 1 < self.layers.len() && self.hidden == Activation::Tanh {
                g.iter_mut().zip(out).for_each(|(g, y)| *g *= 1.0 - y * y);
            }
            let x = &tape.acts[i];
            let gl = &mut grads.layers[i];
            let mut gx = vec![0.0; layer.inputs];
            for (o, &go) in g.iter().enumerate() {
                gl.bias[o] += go;
                if go == 0.0 {
                    continue;
                }
                let w = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                let gw = &mut gl.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for j in 0..layer.inputs {
                    gw[j] += go * x[j];
                    gx[j] += go * w[j];
                }
            }
            g = gx;
        }
        Ok(g)
    }

    /// Fresh gradients for a single backward pass.
    pub fn backward(&self, tape: &mut Tape, output_grad: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let gx = self.backward_into(tape, output_grad, &mut grads)?;
        Ok((grads, gx))
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }
}

/// Named networks plus the seed they were initialized from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBundle {
    pub seed: u64,
    pub nets: Vec<(String, Mlp)>,
}

impl ParamBundle {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            nets: Vec::new(),
        }
    }

    /// Adds a freshly initialized network drawn from the bundle's seeded stream.
    pub fn with_net(mut self, name: &str, sizes: &[usize], hidden: Activation, rng: &mut ChaCha8Rng) -> Self {
        self.nets.push((name.to_string(), Mlp::new(sizes, hidden, rng)));
        self
    }

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn net(&self, name: &str) -> &Mlp {
        self.nets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .unwrap_or_else(|| panic!("no network named `{name}`"))
    }

    pub fn net_mut(&mut self, name: &str) -> &mut Mlp {
        self.nets
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .unwrap_or_else(|| panic!("no network named `{name}`"))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            seed: self.seed,
            nets: self
                .nets
                .iter()
                .map(|(n, m)| (n.clone(), m.zeros_like()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.slices().map(<[f64]>::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.nets.iter().flat_map(|(_, m)| m.slices())
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.nets.iter_mut().flat_map(|(_, m)| m.slices_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter();
        for s in self.slices_mut() {
            for v in s.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamBundle, scale: f64) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.slices_mut().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += scale * b);
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.slices_mut()
            .for_each(|s| s.iter_mut().for_each(|v| *v *= k));
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().flatten().all(|v| v.is_finite())
    }

    fn check_shape(&self, other: &ParamBundle) -> Result<()> {
        let a: Vec<usize> = self.slices().map(<[f64]>::len).collect();
        let b: Vec<usize> = other.slices().map(<[f64]>::len).collect();
        if a != b {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &ParamBundle) -> Self {
        Self {
            step: 0,
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
        }
    }
}

/// One AdamW update in place. Returns the pre-clip gradient norm.
pub fn adam_step(
    params: &mut ParamBundle,
    grads: &ParamBundle,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<f64> {
    params.check_shape(grads)?;
    if state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            got: state.m.len(),
        });
    }
    let gnorm = grads.norm();
    let clip = if cfg.max_grad_norm > 0.0 && gnorm > cfg.max_grad_norm {
        cfg.max_grad_norm / gnorm
    } else {
        1.0
    };
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let mut i = 0;
    for (p, g) in params.slices_mut().zip(grads.slices()) {
        for (p, g) in p.iter_mut().zip(g) {
            let g = g * clip;
            let m = &mut state.m[i];
            let v = &mut state.v[i];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
            i += 1;
        }
    }
    Ok(gnorm)
}

pub mod loss {
    //! Scalar losses returning `(value, d value / d input)`.

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    pub fn softmax(logits: &[f64]) -> Vec<f64> {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Binary cross-entropy on a probability clamped to `[eps, 1 - eps]`,
    /// differentiated with respect to the pre-sigmoid logit. Inside the clamp
    /// range the gradient is `p - y`; outside it is zero.
    pub fn bce_with_logit(logit: f64, target: f64, eps: f64) -> (f64, f64) {
        let p = sigmoid(logit);
        let pc = p.clamp(eps, 1.0 - eps);
        let l = -(target * pc.ln() + (1.0 - target) * (1.0 - pc).ln());
        let g = if p == pc { p - target } else { 0.0 };
        (l, g)
    }

    /// Cross-entropy against a class index, gradient with respect to logits.
    pub fn cross_entropy(logits: &[f64], class: usize, eps: f64) -> (f64, Vec<f64>) {
        let p = softmax(logits);
        let l = -p[class].max(eps).ln();
        let mut g = p;
        g[class] -= 1.0;
        (l, g)
    }
}

const MAGIC: &[u8; 4] = b"DDCK";
const VERSION: u32 = 1;

/// Parameters plus optional optimizer state and a monotone step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamBundle,
    pub optimizer: Option<AdamState>,
    pub counter: u64,
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.params.seed)?;
        w.write_u64::<LittleEndian>(self.counter)?;
        w.write_u32::<LittleEndian>(self.params.nets.len() as u32)?;
        for (name, net) in &self.params.nets {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(net.hidden.code())?;
            w.write_u32::<LittleEndian>(net.layers.len() as u32)?;
            for l in &net.layers {
                w.write_u32::<LittleEndian>(l.inputs as u32)?;
                w.write_u32::<LittleEndian>(l.outputs as u32)?;
            }
            for l in &net.layers {
                for v in l.weight.iter().chain(&l.bias) {
                    w.write_f64::<LittleEndian>(*v)?;
                }
            }
        }
        match &self.optimizer {
            None => w.write_u8(0)?,
            Some(s) => {
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(s.step)?;
                w.write_u64::<LittleEndian>(s.m.len() as u64)?;
                for v in s.m.iter().chain(&s.v) {
                    w.write_f64::<LittleEndian>(*v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let seed = r.read_u64::<LittleEndian>()?;
        let counter = r.read_u64::<LittleEndian>()?;
        let n_nets = r.read_u32::<LittleEndian>()?;
        let mut nets = Vec::new();
        for _ in 0..n_nets {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let hidden = Activation::from_code(r.read_u8()?)?;
            let n_layers = r.read_u32::<LittleEndian>()? as usize;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let i = r.read_u32::<LittleEndian>()? as usize;
                let o = r.read_u32::<LittleEndian>()? as usize;
                layers.push(Dense::zeros(i, o));
            }
            for l in &mut layers {
                for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                    *v = r.read_f64::<LittleEndian>()?;
                }
            }
            nets.push((name, Mlp { layers, hidden }));
        }
        let optimizer = match r.read_u8()? {
            0 => None,
            _ => {
                let step = r.read_u64::<LittleEndian>()?;
                let n = r.read_u64::<LittleEndian>()? as usize;
                let mut m = vec![0.0; n];
                let mut v = vec![0.0; n];
                for x in m.iter_mut().chain(v.iter_mut()) {
                    *x = r.read_f64::<LittleEndian>()?;
                }
                Some(AdamState { step, m, v })
            }
        };
        Ok(Self {
            params: ParamBundle { seed, nets },
            optimizer,
            counter,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
