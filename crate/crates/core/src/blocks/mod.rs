//! Parameter storage, the per-step layer context and the network stages
//! that surround fusion: camera encoder with FPN, LiDAR encoder, BEV
//! encoder, segmentation head and the perspective-view decoder.

mod checkpoint;
mod nets;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use nets::{bev_encoder, camera_encoder, fpn, lidar_encoder, pv_decoder, seg_head, CameraOutput, ModelConfig};

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, NormStats, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;

/// Named trainable parameters plus non-trainable buffers (running norm
/// statistics). Keys are unique and iterate in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.buffers
    }

    pub fn insert_param(&mut self, key: impl Into<String>, value: Tensor) {
        self.params.insert(key.into(), value);
    }

    pub fn insert_buffer(&mut self, key: impl Into<String>, value: Tensor) {
        self.buffers.insert(key.into(), value);
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Flat record map with `param/` and `buffer/` prefixes.
    pub fn to_records(&self) -> BTreeMap<String, Tensor> {
        let p = self.params.iter().map(|(k, v)| (format!("param/{k}"), v.clone()));
        let b = self.buffers.iter().map(|(k, v)| (format!("buffer/{k}"), v.clone()));
        p.chain(b).collect()
    }

    /// Inverse of [`Self::to_records`]; other prefixes are rejected.
    pub fn from_records(records: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut s = ParamStore::new();
        for (k, v) in records {
            if let Some(name) = k.strip_prefix("param/") {
                s.insert_param(name, v.clone());
            } else if let Some(name) = k.strip_prefix("buffer/") {
                s.insert_buffer(name, v.clone());
            } else {
                return Err(Error::Checkpoint { key: k.clone(), msg: "unknown key".into() });
            }
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_records(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&load_checkpoint(path)?)
    }

    /// Checks that `other` has exactly the keys and shapes of `self`,
    /// naming the first offending key.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        let (a, b) = (self.to_records(), other.to_records());
        for (k, v) in &a {
            match b.get(k) {
                None => return Err(Error::Checkpoint { key: k.clone(), msg: "missing".into() }),
                Some(w) if w.shape() != v.shape() => {
                    return Err(Error::Checkpoint {
                        key: k.clone(),
                        msg: format!("shape {:?}, expected {:?}", w.shape(), v.shape()),
                    })
                }
                _ => {}
            }
        }
        if let Some(k) = b.keys().find(|k| !a.contains_key(*k)) {
            return Err(Error::Checkpoint { key: k.clone(), msg: "unknown key".into() });
        }
        Ok(())
    }
}

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform on `±sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; observed statistics are collected for the running update.
    Train,
    /// Running statistics.
    Eval,
}

/// FNV-1a, used to derive a per-key init stream.
fn key_hash(key: &str) -> u64 {
    key.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn fill(init: Init, shape: &[usize], seed: u64, key: &str) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::ones(shape.to_vec()),
        Init::KaimingUniform { fan_in } => {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key_hash(key));
            Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
        }
    }
}

/// One forward pass: the tape, the parameters bound onto it and the norm
/// statistics it observed. In init mode, parameters missing from the store
/// are created on first use, so running a forward once builds the model.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    mode: Mode,
    init_seed: Option<u64>,
    created: ParamStore,
    bound: BTreeMap<String, Var>,
    observed: Vec<(String, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Ctx { tape, store, mode, init_seed: None, created: ParamStore::new(), bound: BTreeMap::new(), observed: Vec::new() }
    }

    /// Context that creates missing parameters from `seed`.
    pub fn for_init(store: &'a ParamStore, seed: u64) -> Self {
        let mut c = Ctx::new(Tape::no_grad(), store, Mode::Eval);
        c.init_seed = Some(seed);
        c
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Binds (or creates, in init mode) the parameter `key` of `shape`.
    pub fn param(&mut self, key: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(&v) = self.bound.get(key) {
            if self.tape.shape(v) != shape {
                return Err(Error::Checkpoint { key: key.into(), msg: format!("used with shapes {:?} and {shape:?}", self.tape.shape(v)) });
            }
            return Ok(v);
        }
        let value = match self.store.params().get(key).or_else(|| self.created.params().get(key)) {
            Some(t) if t.shape() == shape => t.clone(),
            Some(t) => {
                return Err(Error::Checkpoint { key: key.into(), msg: format!("stored shape {:?}, model expects {shape:?}", t.shape()) })
            }
            None => match self.init_seed {
                Some(seed) => {
                    let t = fill(init, shape, seed, key);
                    self.created.insert_param(key, t.clone());
                    t
                }
                None => return Err(Error::Checkpoint { key: key.into(), msg: "missing parameter".into() }),
            },
        };
        let v = self.tape.param(value);
        self.bound.insert(key.to_string(), v);
        Ok(v)
    }

    fn buffer(&mut self, key: &str, len: usize, init: Init) -> Result<Tensor> {
        match self.store.buffers().get(key).or_else(|| self.created.buffers().get(key)) {
            Some(t) if t.numel() == len => Ok(t.clone()),
            Some(t) => Err(Error::Checkpoint { key: key.into(), msg: format!("stored length {}, model expects {len}", t.numel()) }),
            None if self.init_seed.is_some() => {
                let t = fill(init, &[len], 0, key);
                self.created.insert_buffer(key, t.clone());
                Ok(t)
            }
            None => Err(Error::Checkpoint { key: key.into(), msg: "missing buffer".into() }),
        }
    }

    /// Parameters bound during this pass, by key.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Norm statistics observed in train mode, in call order.
    pub fn observed(&self) -> &[(String, BatchStats)] {
        &self.observed
    }

    /// Parameters and buffers created in init mode.
    pub fn into_created(self) -> ParamStore {
        self.created
    }

    /// Convolution with Kaiming-initialized kernel `key.w` and optional zero-initialized bias `key.b`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, key: &str, x: Var, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Result<Var> {
        self.conv_grouped(key, x, cin, cout, k, stride, pad, bias, 1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_grouped(
        &mut self,
        key: &str,
        x: Var,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        groups: usize,
    ) -> Result<Var> {
        let cg = cin / groups.max(1);
        let w = self.param(&format!("{key}.w"), &[cout, cg, k, k], Init::KaimingUniform { fan_in: cg * k * k })?;
        let b = if bias { Some(self.param(&format!("{key}.b"), &[cout], Init::Zeros)?) } else { None };
        self.tape.conv2d_grouped(x, w, b, stride, pad, groups)
    }

    /// Transposed convolution with kernel `[cin, cout, k, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn deconv(&mut self, key: &str, x: Var, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{key}.w"), &[cin, cout, k, k], Init::KaimingUniform { fan_in: cin * k * k / (stride * stride).max(1) })?;
        let b = if bias { Some(self.param(&format!("{key}.b"), &[cout], Init::Zeros)?) } else { None };
        self.tape.conv_transpose2d(x, w, b, stride, 0)
    }

    /// Batch norm with scale `key.gamma`, shift `key.beta` and running
    /// statistics in buffers `key.mean` / `key.var`.
    pub fn batch_norm(&mut self, key: &str, x: Var, channels: usize) -> Result<Var> {
        let gamma = self.param(&format!("{key}.gamma"), &[channels], Init::Ones)?;
        let beta = self.param(&format!("{key}.beta"), &[channels], Init::Zeros)?;
        let mean = self.buffer(&format!("{key}.mean"), channels, Init::Zeros)?;
        let var = self.buffer(&format!("{key}.var"), channels, Init::Ones)?;
        let stats = match self.mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Running { mean: mean.data(), var: var.data() },
        };
        let (y, observed) = self.tape.batch_norm(x, gamma, beta, stats, BN_EPS)?;
        if let Some(s) = observed {
            self.observed.push((key.to_string(), s));
        }
        Ok(y)
    }

    /// `k x k` conv (same padding, no bias) + batch norm + ReLU.
    pub fn conv_bn_relu(&mut self, key: &str, x: Var, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Var> {
        let y = self.conv(&format!("{key}.conv"), x, cin, cout, k, stride, k / 2, false)?;
        let y = self.batch_norm(&format!("{key}.bn"), y, cout)?;
        Ok(self.tape.relu(y))
    }

    /// Dense layer on a `[n, cin]` input: `x W^T + b` with `W` of shape `[cout, cin]`.
    pub fn linear(&mut self, key: &str, x: Var, cin: usize, cout: usize) -> Result<Var> {
        let w = self.param(&format!("{key}.w"), &[cout, cin], Init::KaimingUniform { fan_in: cin })?;
        let b = self.param(&format!("{key}.b"), &[cout], Init::Zeros)?;
        let wt = self.tape.permute(w, &[1, 0])?;
        let y = self.tape.matmul(x, wt)?;
        self.tape.add_along(y, b, 1)
    }
}

/// Folds observed batch statistics into the running buffers:
/// `running = (1 - momentum) * running + momentum * observed`.
pub fn update_running_stats(store: &mut ParamStore, observed: &[(String, BatchStats)], momentum: f64) -> Result<()> {
    for (key, s) in observed {
        for (suffix, values) in [("mean", &s.mean), ("var", &s.var)] {
            let name = format!("{key}.{suffix}");
            let buf = store
                .buffers_mut()
                .get_mut(&name)
                .ok_or_else(|| Error::Checkpoint { key: name.clone(), msg: "missing buffer".into() })?;
            for (r, v) in buf.data_mut().iter_mut().zip(values) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
    }
    Ok(())
}

/// Picks up to `n` `(key, element)` pairs spread over all parameters:
/// keys are visited round-robin in a seeded order, elements drawn uniformly.
pub fn sample_probes(store: &ParamStore, n: usize, seed: u64) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<&String> = store.params().keys().collect();
    if keys.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..keys.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    (0..n)
        .map(|i| {
            let k = keys[order[i % order.len()]];
            (k.clone(), rng.random_range(0..store.params()[k].numel()))
        })
        .collect()
}

/// Max relative error between tape gradients and central differences of
/// the scalar `f` at the given parameter elements. Runs in train mode.
pub fn param_gradcheck<F>(store: &ParamStore, f: &F, probes: &[(String, usize)], eps: f64) -> Result<f64>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let mut ctx = Ctx::new(Tape::new(), store, Mode::Train);
    let loss = f(&mut ctx)?;
    ctx.tape.backward(loss)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut c = Ctx::new(Tape::no_grad(), s, Mode::Train);
        let l = f(&mut c)?;
        Ok(c.tape.value(l).item())
    };
    let mut analytic = Vec::with_capacity(probes.len());
    let mut numeric = Vec::with_capacity(probes.len());
    let mut work = store.clone();
    for (key, idx) in probes {
        let g = ctx.bound().get(key).and_then(|v| ctx.tape.grad(*v)).map_or(0.0, |g| g.data()[*idx]);
        let orig = store.params()[key].data()[*idx];
        work.params_mut().get_mut(key).unwrap().data_mut()[*idx] = orig + eps;
        let up = eval(&work)?;
        work.params_mut().get_mut(key).unwrap().data_mut()[*idx] = orig - eps;
        let down = eval(&work)?;
        work.params_mut().get_mut(key).unwrap().data_mut()[*idx] = orig;
        analytic.push(g);
        numeric.push((up - down) / (2.0 * eps));
    }
    Ok(crate::tensor::max_rel_error(&analytic, &numeric))
}
