//! Softmax policy over class labels: an MLP trunk, optional low-rank
//! adapters on every trunk layer, and a classifier head that grows one block
//! of columns per task.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{softmax_rows, Tape, Tensor, Var};

/// Std of the adapter `A` factor at init.
pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub width: usize,
    /// Rank of the per-layer adapters; 0 disables them.
    pub adapter_rank: usize,
}

/// Dense layer computing `x · weight + bias`, weight stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn he_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("sized"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

/// Low-rank update `B · A` added to a frozen layer weight.
///
/// `b` is `in × r` and starts at zero, so a fresh adapter leaves the layer
/// output unchanged; `a` is `r × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub b: Tensor,
    pub a: Tensor,
}

impl LowRankAdapter {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rank: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, ADAPTER_INIT_STD).expect("finite std");
        let data = (0..rank * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            b: Tensor::zeros(&[fan_in, rank]),
            a: Tensor::matrix(rank, fan_out, data).expect("sized"),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Trunk,
    Adapter,
    Head,
}

/// Tape handles for one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// One entry per [`MlpPolicy::param_names`] slot; `None` for frozen ones.
    pub params: Vec<Option<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    arch: Architecture,
    trunk: Vec<Linear>,
    adapters: Vec<LowRankAdapter>,
    head: Linear,
    trunk_frozen: bool,
}

impl MlpPolicy {
    /// Random trunk (He init), adapters with `B = 0`, and an empty head.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        if arch.input_dim == 0 || arch.width == 0 {
            return Err(invalid("input_dim and width must be positive"));
        }
        let mut trunk = Vec::with_capacity(arch.depth);
        let mut adapters = Vec::new();
        let mut fan_in = arch.input_dim;
        for _ in 0..arch.depth {
            trunk.push(Linear::he_init(fan_in, arch.width, rng));
            if arch.adapter_rank > 0 {
                adapters.push(LowRankAdapter::init(fan_in, arch.width, arch.adapter_rank, rng));
            }
            fan_in = arch.width;
        }
        Ok(Self {
            arch,
            trunk,
            adapters,
            head: Self::empty_head(fan_in),
            trunk_frozen: false,
        })
    }

    fn empty_head(features: usize) -> Linear {
        Linear {
            weight: Tensor::zeros(&[features, 0]),
            bias: Tensor::zeros(&[0]),
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn feature_dim(&self) -> usize {
        if self.arch.depth == 0 {
            self.arch.input_dim
        } else {
            self.arch.width
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.bias.len()
    }

    pub fn trunk(&self) -> &[Linear] {
        &self.trunk
    }

    pub fn adapters(&self) -> &[LowRankAdapter] {
        &self.adapters
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn trunk_frozen(&self) -> bool {
        self.trunk_frozen
    }

    /// Appends `k_new` head columns drawn from `N(0, std²)`; their biases
    /// start at zero. Existing columns are left untouched.
    pub fn init_head<R: Rng + ?Sized>(&mut self, k_new: usize, std: f64, rng: &mut R) -> Result<()> {
        if k_new == 0 {
            return Err(invalid("init_head: k_new must be positive"));
        }
        if !(std >= 0.0) || !std.is_finite() {
            return Err(invalid(format!("init_head: std must be finite and >= 0, got {std}")));
        }
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let h = self.feature_dim();
        let k_old = self.num_classes();
        let k = k_old + k_new;
        let mut w = Vec::with_capacity(h * k);
        for i in 0..h {
            w.extend_from_slice(self.head.weight.row(i));
            for _ in 0..k_new {
                w.push(normal.sample(rng));
            }
        }
        let mut b = self.head.bias.data().to_vec();
        b.resize(k, 0.0);
        self.head = Linear {
            weight: Tensor::matrix(h, k, w)?,
            bias: Tensor::vector(b),
        };
        Ok(())
    }

    /// Drops all head columns (used after pretraining on pretext classes).
    pub fn reset_head(&mut self) {
        self.head = Self::empty_head(self.feature_dim());
    }

    /// Replaces the adapters with fresh rank-`rank` ones (`B = 0`) on every
    /// trunk layer. Rank 0 removes them.
    pub fn attach_adapters<R: Rng + ?Sized>(&mut self, rank: usize, rng: &mut R) {
        self.adapters = if rank == 0 {
            Vec::new()
        } else {
            self.trunk
                .iter()
                .map(|l| LowRankAdapter::init(l.weight.rows(), l.weight.cols(), rank, rng))
                .collect()
        };
        self.arch.adapter_rank = rank;
    }

    pub fn set_freeze(&mut self, trunk_frozen: bool) {
        self.trunk_frozen = trunk_frozen;
    }

    /// Whether parameters with `role` currently receive updates.
    ///
    /// The head always trains. With adapters present the base trunk stays
    /// frozen for good and unfreezing releases only the adapters.
    pub fn is_trainable(&self, role: ParamRole) -> bool {
        match role {
            ParamRole::Head => true,
            ParamRole::Adapter => !self.trunk_frozen,
            ParamRole::Trunk => !self.trunk_frozen && self.adapters.is_empty(),
        }
    }

    fn slots(&self) -> Vec<(String, ParamRole, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{i}.weight"), ParamRole::Trunk, &layer.weight));
            out.push((format!("trunk.{i}.bias"), ParamRole::Trunk, &layer.bias));
            if let Some(ad) = self.adapters.get(i) {
                out.push((format!("trunk.{i}.adapter_b"), ParamRole::Adapter, &ad.b));
                out.push((format!("trunk.{i}.adapter_a"), ParamRole::Adapter, &ad.a));
            }
        }
        out.push(("head.weight".into(), ParamRole::Head, &self.head.weight));
        out.push(("head.bias".into(), ParamRole::Head, &self.head.bias));
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.slots().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn param_roles(&self) -> Vec<ParamRole> {
        self.slots().into_iter().map(|(_, r, _)| r).collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.slots().into_iter().map(|(n, _, t)| (n, t)).collect()
    }

    /// Mutable parameters, in the same order as [`Self::param_names`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let mut adapters = self.adapters.iter_mut();
        for layer in self.trunk.iter_mut() {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if let Some(ad) = adapters.next() {
                out.push(&mut ad.b);
                out.push(&mut ad.a);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Records the forward pass for inputs `x` (N × input_dim). Trainable
    /// parameters become leaves, the rest constants.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Forward> {
        self.record(tape, x, |role| self.is_trainable(role))
    }

    /// Logits for `x`. With a `scope`, only those class columns are returned
    /// (in the given order).
    pub fn predict(&self, x: &Tensor, scope: Option<&[usize]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.record(&mut tape, x, |_| false)?;
        let logits = tape.value(fwd.logits).clone();
        match scope {
            Some(cols) => Ok(logits.select_cols(cols)?),
            None => Ok(logits),
        }
    }

    /// Softmax probabilities over all seen classes.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.predict(x, None)?))
    }

    fn record(&self, tape: &mut Tape, x: &Tensor, trainable: impl Fn(ParamRole) -> bool) -> Result<Forward> {
        self.check_input(x)?;
        let mut params = Vec::new();
        let mut bind = |tape: &mut Tape, t: &Tensor, role: ParamRole| {
            let train = trainable(role);
            let v = if train {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            params.push(train.then_some(v));
            v
        };

        let mut h = tape.constant(x.clone());
        for (i, layer) in self.trunk.iter().enumerate() {
            let w = bind(tape, &layer.weight, ParamRole::Trunk);
            let b = bind(tape, &layer.bias, ParamRole::Trunk);
            let mut pre = tape.matmul(h, w)?;
            if let Some(ad) = self.adapters.get(i) {
                let ab = bind(tape, &ad.b, ParamRole::Adapter);
                let aa = bind(tape, &ad.a, ParamRole::Adapter);
                let down = tape.matmul(h, ab)?;
                let up = tape.matmul(down, aa)?;
                pre = tape.add(pre, up)?;
            }
            let pre = tape.add_row(pre, b)?;
            h = tape.relu(pre);
        }
        let w = bind(tape, &self.head.weight, ParamRole::Head);
        let b = bind(tape, &self.head.bias, ParamRole::Head);
        let z = tape.matmul(h, w)?;
        let logits = tape.add_row(z, b)?;
        Ok(Forward { logits, params })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.arch.input_dim {
            return Err(Error::InvalidArgument(format!(
                "input of shape {:?} does not match trunk input dim {}",
                x.shape(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// Rebuilds a model from named parameters (see [`crate::checkpoint`]).
    pub fn from_named(arch: Architecture, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self {
            arch,
            trunk: Vec::new(),
            adapters: Vec::new(),
            head: Self::empty_head(0),
            trunk_frozen: false,
        };
        let mut it = named.into_iter();
        let mut next = |expect: &str| -> Result<Tensor> {
            match it.next() {
                Some((name, t)) if name == expect => Ok(t),
                Some((name, _)) => Err(Error::Checkpoint(format!("expected {expect}, found {name}"))),
                None => Err(Error::Checkpoint(format!("missing {expect}"))),
            }
        };
        let mut fan_in = arch.input_dim;
        for i in 0..arch.depth {
            let weight = next(&format!("trunk.{i}.weight"))?;
            let bias = next(&format!("trunk.{i}.bias"))?;
            expect_shape(&weight, &[fan_in, arch.width])?;
            expect_shape(&bias, &[arch.width])?;
            model.trunk.push(Linear { weight, bias });
            if arch.adapter_rank > 0 {
                let b = next(&format!("trunk.{i}.adapter_b"))?;
                let a = next(&format!("trunk.{i}.adapter_a"))?;
                expect_shape(&b, &[fan_in, arch.adapter_rank])?;
                expect_shape(&a, &[arch.adapter_rank, arch.width])?;
                model.adapters.push(LowRankAdapter { b, a });
            }
            fan_in = arch.width;
        }
        let weight = next("head.weight")?;
        let bias = next("head.bias")?;
        if weight.shape().len() != 2 || weight.rows() != fan_in || bias.len() != weight.cols() {
            return Err(Error::Checkpoint(format!(
                "head shapes {:?} / {:?} inconsistent with feature dim {fan_in}",
                weight.shape(),
                bias.shape()
            )));
        }
        model.head = Linear { weight, bias };
        if let Some((name, _)) = it.next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {name}")));
        }
        Ok(model)
    }
}

fn expect_shape(t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "shape {:?} does not match expected {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}
