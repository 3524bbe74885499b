//! Parameter storage, convolution/linear layers and the Adam optimizer.

use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tape::{conv_out, Gradients, Mat, ParamKey, Tape, Var};

static NEXT_STORE_ID: AtomicU32 = AtomicU32::new(1);

fn fresh_store_id() -> u32 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter tensors.
///
/// Each store carries a process-unique id so several stores can be bound to
/// one tape without their parameters aliasing.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamStore {
    #[serde(skip, default = "fresh_store_id")]
    id: u32,
    names: Vec<String>,
    values: Vec<Mat>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            id: fresh_store_id(),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore {
            id: fresh_store_id(),
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Binds a parameter as a tape leaf (cached per tape).
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(
            ParamKey {
                store: self.id,
                index: id.0,
            },
            &self.values[id.0],
        )
    }

    /// Gradients for every parameter of this store that appeared on the tape.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Option<Mat>> {
        let mut out = vec![None; self.values.len()];
        for (key, var) in tape.param_vars() {
            if key.store == self.id {
                out[key.index] = grads.get(var).cloned();
            }
        }
        out
    }

    /// SHA-256 over names and exact bit patterns of parameters whose name
    /// starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, value) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update((value.nrows() as u64).to_le_bytes());
            h.update((value.ncols() as u64).to_le_bytes());
            for x in value.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Silu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Silu => tape.silu(x),
        }
    }
}

fn init_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = (3.0 / fan_in as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// 1x1 or 3x3 convolution over an `(h*w) x c_in` map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub act: Activation,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        stride: usize,
        c_in: usize,
        c_out: usize,
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels");
        assert!(kernel == 3 || stride == 1, "strided convolutions need a 3x3 kernel");
        let fan_in = kernel * kernel * c_in;
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, fan_in, c_out, fan_in),
        );
        let bias = store.add(format!("{name}.bias"), Mat::zeros((1, c_out)));
        Conv {
            weight,
            bias,
            kernel,
            stride,
            c_in,
            c_out,
            act,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out(h, self.stride), conv_out(w, self.stride))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: usize, w: usize) -> Var {
        let cols = if self.kernel == 3 {
            tape.im2col3(x, h, w, self.stride)
        } else {
            x
        };
        let wv = store.bind(tape, self.weight);
        let bv = store.bind(tape, self.bias);
        let y = tape.matmul(cols, wv);
        let y = tape.add_row(y, bv);
        self.act.apply(tape, y)
    }
}

/// Fully connected layer on row vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
    pub act: Activation,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, n_in, n_out, n_in));
        let bias = store.add(format!("{name}.bias"), Mat::zeros((1, n_out)));
        Linear {
            weight,
            bias,
            n_in,
            n_out,
            act,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let wv = store.bind(tape, self.weight);
        let bv = store.bind(tape, self.bias);
        let y = tape.matmul(x, wv);
        let y = tape.add_row(y, bv);
        self.act.apply(tape, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-tensor moment buffers, restricted to a trainable subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    /// Number of updates applied to each parameter.
    pub updates: Vec<u64>,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect();
        Adam {
            config,
            step: 0,
            updates: vec![0; zeros.len()],
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update to every parameter for which `trainable(name)`
    /// holds and a gradient exists.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Mat>],
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (name, value)) in store.iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            if !trainable(name) {
                continue;
            }
            self.updates[i] += 1;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= c.lr * mh / (vh.sqrt() + c.eps);
                });
        }
    }
}

/// Largest relative disagreement between tape gradients and central finite
/// differences over every scalar of `store`.
///
/// The relative error of one entry is `|a - n| / max(|a|, |n|, floor)`,
/// where the floor keeps vanishing gradients from dividing by zero.
pub fn gradient_check(
    store: &ParamStore,
    step: f64,
    floor: f64,
    loss: &dyn Fn(&ParamStore, &mut Tape) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let l = loss(store, &mut tape);
    let g = tape.backward(l);
    let analytic = store.collect_grads(&tape, &g);
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let v = loss(s, &mut t);
        t.scalar(v)
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for i in 0..store.len() {
        let id = ParamId(i);
        for j in 0..store.get(id).len() {
            let orig = store.get(id).as_slice().expect("contiguous")[j];
            probe.get_mut(id).as_slice_mut().expect("contiguous")[j] = orig + step;
            let up = eval(&probe);
            probe.get_mut(id).as_slice_mut().expect("contiguous")[j] = orig - step;
            let down = eval(&probe);
            probe.get_mut(id).as_slice_mut().expect("contiguous")[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i]
                .as_ref()
                .map(|m| m.as_slice().expect("contiguous")[j])
                .unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}
