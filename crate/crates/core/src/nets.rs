//! Layer stacks and the modality embedding networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    pub fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
            Activation::LeakyRelu(s) => x.leaky_relu(s),
            Activation::Identity => x,
        }
    }

    /// Fan-in weight scale: LeCun (`1/√fan_in`) for saturating or linear
    /// units, He (`√(2/fan_in)`) for rectifiers.
    pub fn init_std(self, fan_in: usize) -> f64 {
        let gain = match self {
            Activation::Tanh | Activation::Identity => 1.0,
            Activation::Relu => 2.0,
            Activation::LeakyRelu(s) => 2.0 / (1.0 + s * s),
        };
        (gain / fan_in as f64).sqrt()
    }
}

/// Anything owning parameters in a [`ParamStore`].
pub trait Module {
    fn param_ids(&self) -> Vec<ParamId>;

    /// Redraws weights with fan-in scaling and zeroes biases.
    fn init_params(&self, store: &mut ParamStore, rng: &mut Rng);
}

fn draw_weight(store: &mut ParamStore, id: ParamId, std: f64, rng: &mut Rng) {
    let t = store.get_mut(id);
    for w in t.data_mut() {
        *w = std * rng.normal();
    }
}

fn zero(store: &mut ParamStore, id: ParamId) {
    store.get_mut(id).data_mut().fill(0.0);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: store.add(format!("{prefix}.w"), Tensor::zeros(&[in_dim, out_dim])),
            bias: store.add(format!("{prefix}.b"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(g.param(store, self.weight))?
            .add(g.param(store, self.bias))
    }
}

/// Fully connected stack; the activation is applied between layers only.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "mlp `{prefix}` needs ≥2 positive dims, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.l{i}"), w[0], w[1]))
            .collect();
        let mlp = Self { layers, activation };
        mlp.init_params(store, rng);
        Ok(mlp)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                h = self.activation.apply(h);
            }
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        for l in &self.layers {
            draw_weight(store, l.weight, self.activation.init_std(l.in_dim), rng);
            zero(store, l.bias);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 2,
            padding: 1,
        }
    }
}

/// Four 4×4 conv layers (32, 32, 64, 64 channels) and two FC layers, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    convs: Vec<(ParamId, ParamId)>,
    head: Mlp,
    spec: ConvSpec,
    input: [usize; 3],
    flat_dim: usize,
}

pub const CONV_CHANNELS: [usize; 4] = [32, 32, 64, 64];
pub const CONV_KERNEL: usize = 4;

impl ConvStack {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: [usize; 3],
        hidden: usize,
        out_dim: usize,
        spec: ConvSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (mut c, mut h, mut w) = (input[0], input[1], input[2]);
        let mut convs = Vec::new();
        for (i, &co) in CONV_CHANNELS.iter().enumerate() {
            let k = store.add(
                format!("{prefix}.conv{i}.k"),
                Tensor::zeros(&[co, c, CONV_KERNEL, CONV_KERNEL]),
            );
            let b = store.add(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[co]));
            convs.push((k, b));
            let span = |n: usize| -> Result<usize> {
                let padded = n + 2 * spec.padding;
                if padded < CONV_KERNEL || (padded - CONV_KERNEL) % spec.stride != 0 {
                    return Err(Error::dim(
                        "conv_stack",
                        &input,
                        &[spec.stride, spec.padding],
                    ));
                }
                Ok((padded - CONV_KERNEL) / spec.stride + 1)
            };
            h = span(h)?;
            w = span(w)?;
            c = co;
        }
        let flat_dim = c * h * w;
        let head = Mlp::new(
            store,
            &format!("{prefix}.fc"),
            &[flat_dim, hidden, out_dim],
            Activation::Relu,
            rng,
        )?;
        let stack = Self {
            convs,
            head,
            spec,
            input,
            flat_dim,
        };
        stack.init_params(store, rng);
        Ok(stack)
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn flat_dim(&self) -> usize {
        self.flat_dim
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let b = x.shape()[0];
        let mut h = x.reshape(&[b, self.input[0], self.input[1], self.input[2]])?;
        for &(k, bias) in &self.convs {
            h = h
                .conv2d(g.param(store, k), self.spec.stride, self.spec.padding)?
                .add_channel_bias(g.param(store, bias))?
                .relu();
        }
        let h = h.reshape(&[b, self.flat_dim])?.relu();
        self.head.forward(g, store, h)
    }
}

impl Module for ConvStack {
    fn param_ids(&self) -> Vec<ParamId> {
        self.convs
            .iter()
            .flat_map(|&(k, b)| [k, b])
            .chain(self.head.param_ids())
            .collect()
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        for &(k, b) in &self.convs {
            let fan_in = store.get(k).shape()[1] * CONV_KERNEL * CONV_KERNEL;
            draw_weight(store, k, Activation::Relu.init_std(fan_in), rng);
            zero(store, b);
        }
        self.head.init_params(store, rng);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Backbone {
    Mlp(Mlp),
    Conv(ConvStack),
}

/// Per-dataset embedder architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderArch {
    /// one hidden layer of 25 tanh units
    Synth,
    /// [`ConvStack`] on 64×64 single-channel images
    Sprites,
    /// four hidden layers of 1024 ReLU units
    SplitMnist,
}

/// Architecture and input/output widths of an `(e1, e2)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedSpec {
    pub arch: EmbedderArch,
    pub x1_dim: usize,
    pub x2_dim: usize,
    pub v_dim: usize,
    #[serde(default)]
    pub conv: ConvSpec,
}

impl EmbedSpec {
    /// Builds `e1` and `e2` under the `e1.` / `e2.` prefixes.
    pub fn build(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<(Embedder, Embedder)> {
        let e1 = Embedder::build(
            store,
            "e1",
            self.arch,
            self.x1_dim,
            self.v_dim,
            self.conv,
            rng,
        )?;
        let e2 = Embedder::build(
            store,
            "e2",
            self.arch,
            self.x2_dim,
            self.v_dim,
            self.conv,
            rng,
        )?;
        Ok((e1, e2))
    }
}

/// `x ↦ v`, an L2-normalised embedding of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    pub backbone: Backbone,
    pub in_dim: usize,
    pub out_dim: usize,
    pub normalize_output: bool,
}

impl Embedder {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        arch: EmbedderArch,
        in_dim: usize,
        out_dim: usize,
        conv: ConvSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        let backbone = match arch {
            EmbedderArch::Synth => Backbone::Mlp(Mlp::new(
                store,
                prefix,
                &[in_dim, 25, out_dim],
                Activation::Tanh,
                rng,
            )?),
            EmbedderArch::SplitMnist => Backbone::Mlp(Mlp::new(
                store,
                prefix,
                &[in_dim, 1024, 1024, 1024, 1024, out_dim],
                Activation::Relu,
                rng,
            )?),
            EmbedderArch::Sprites => {
                let side = (in_dim as f64).sqrt() as usize;
                if side * side != in_dim {
                    return Err(Error::Config(format!(
                        "sprites embedder needs a square image, got {in_dim} pixels"
                    )));
                }
                Backbone::Conv(ConvStack::new(
                    store,
                    prefix,
                    [1, side, side],
                    128,
                    out_dim,
                    conv,
                    rng,
                )?)
            }
        };
        Ok(Self {
            backbone,
            in_dim,
            out_dim,
            normalize_output: true,
        })
    }

    pub fn from_mlp(mlp: Mlp, normalize_output: bool) -> Self {
        Self {
            in_dim: mlp.in_dim(),
            out_dim: mlp.out_dim(),
            backbone: Backbone::Mlp(mlp),
            normalize_output,
        }
    }

    pub fn embed<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::dim("embed", &s, &[self.in_dim]));
        }
        let v = match &self.backbone {
            Backbone::Mlp(m) => m.forward(g, store, x)?,
            Backbone::Conv(c) => c.forward(g, store, x)?,
        };
        Ok(if self.normalize_output {
            v.normalize_last()
        } else {
            v
        })
    }

    /// Gradient-free embedding of many rows, processed in chunks.
    pub fn embed_values(&self, store: &ParamStore, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = x.rows();
        let mut data = Vec::with_capacity(n * self.out_dim);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let g = Graph::new();
            let v = self.embed(&g, store, g.constant(x.gather_rows(&idx)))?;
            data.extend_from_slice(v.value().data());
            start = end;
        }
        Tensor::new(vec![n, self.out_dim], data)
    }
}

impl Module for Embedder {
    fn param_ids(&self) -> Vec<ParamId> {
        match &self.backbone {
            Backbone::Mlp(m) => m.param_ids(),
            Backbone::Conv(c) => c.param_ids(),
        }
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        match &self.backbone {
            Backbone::Mlp(m) => m.init_params(store, rng),
            Backbone::Conv(c) => c.init_params(store, rng),
        }
    }
}
