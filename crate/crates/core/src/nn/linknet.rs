//! LinkNet as a straight-line program over tensor nodes, interpreted forward
//! (optionally recording a tape) and backward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    gather, instance_norm, instance_norm_backward, max_pool, max_pool_backward, scatter, weight_grad, ConvShape,
    Geometry, NormStats,
};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rank {
    #[serde(rename = "2d")]
    Two,
    #[serde(rename = "3d")]
    Three,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Instance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub rank: Rank,
    pub in_channels: usize,
    pub encoder_depth: usize,
    pub base_channels: usize,
    pub norm: NormKind,
    pub out_channels: usize,
}

impl NetworkConfig {
    pub fn paper_3d() -> Self {
        NetworkConfig {
            rank: Rank::Three,
            in_channels: 1,
            encoder_depth: 4,
            base_channels: 16,
            norm: NormKind::Instance,
            out_channels: 1,
        }
    }

    pub fn paper_2d() -> Self {
        NetworkConfig {
            rank: Rank::Two,
            in_channels: 5,
            base_channels: 64,
            ..Self::paper_3d()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_depth == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig(
                "network depth, channel counts and base width must be at least 1".into(),
            ));
        }
        if self.encoder_depth > 8 {
            return Err(Error::InvalidConfig("encoder_depth above 8 is not supported".into()));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this (per slice for 2D nets).
    pub fn total_stride(&self) -> usize {
        1 << (self.encoder_depth + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    HeUniform { fan_in: usize },
    Constant(f32),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Node ids: 0 is the network input, op `i` produces node `i + 1`.
#[derive(Clone, Debug)]
enum Op {
    Conv {
        input: usize,
        weight: usize,
        shape: ConvShape,
        cin: usize,
        cout: usize,
    },
    ConvT {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        shape: ConvShape,
        output_pad: [usize; 3],
        cin: usize,
        cout: usize,
    },
    Norm {
        input: usize,
        scale: usize,
        shift: usize,
    },
    Relu {
        input: usize,
    },
    MaxPool {
        input: usize,
        shape: ConvShape,
    },
    Add {
        a: usize,
        b: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Conv { input, .. }
            | Op::ConvT { input, .. }
            | Op::Norm { input, .. }
            | Op::Relu { input }
            | Op::MaxPool { input, .. } => vec![input],
            Op::Add { a, b } => vec![a, b],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Program {
    config: NetworkConfig,
    ops: Vec<Op>,
    params: Vec<ParamSpec>,
    /// Index of the last op reading each node.
    last_use: Vec<usize>,
}

struct Builder {
    rank: Rank,
    ops: Vec<Op>,
    params: Vec<ParamSpec>,
}

impl Builder {
    fn shape(&self, k: usize, s: usize, p: usize) -> ConvShape {
        match self.rank {
            Rank::Three => ConvShape {
                kernel: [k; 3],
                stride: [s; 3],
                pad: [p; 3],
            },
            Rank::Two => ConvShape {
                kernel: [k, k, 1],
                stride: [s, s, 1],
                pad: [p, p, 0],
            },
        }
    }

    fn kernel_dims(&self, k: usize) -> Vec<usize> {
        match self.rank {
            Rank::Three => vec![k; 3],
            Rank::Two => vec![k; 2],
        }
    }

    fn push(&mut self, op: Op) -> usize {
        self.ops.push(op);
        self.ops.len()
    }

    fn param(&mut self, name: String, shape: Vec<usize>, group: ParamGroup, init: Init) -> usize {
        self.params.push(ParamSpec {
            name,
            shape,
            group,
            init,
        });
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        input: usize,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> usize {
        let shape = self.shape(k, s, p);
        let mut dims = vec![cout, cin];
        dims.extend(self.kernel_dims(k));
        let weight = self.param(
            format!("{name}.weight"),
            dims,
            group,
            Init::HeUniform {
                fan_in: cin * shape.taps(),
            },
        );
        self.push(Op::Conv {
            input,
            weight,
            shape,
            cin,
            cout,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn tconv(
        &mut self,
        input: usize,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        s: usize,
        p: usize,
        op: usize,
        bias: bool,
    ) -> usize {
        let shape = self.shape(k, s, p);
        let output_pad = match self.rank {
            Rank::Three => [op; 3],
            Rank::Two => [op, op, 0],
        };
        let mut dims = vec![cin, cout];
        dims.extend(self.kernel_dims(k));
        let weight = self.param(
            format!("{name}.weight"),
            dims,
            group,
            Init::HeUniform {
                fan_in: cin * shape.taps(),
            },
        );
        let bias = bias.then(|| self.param(format!("{name}.bias"), vec![cout], group, Init::Constant(0.0)));
        self.push(Op::ConvT {
            input,
            weight,
            bias,
            shape,
            output_pad,
            cin,
            cout,
        })
    }

    fn norm(&mut self, input: usize, name: &str, group: ParamGroup, ch: usize) -> usize {
        let scale = self.param(format!("{name}.weight"), vec![ch], group, Init::Constant(1.0));
        let shift = self.param(format!("{name}.bias"), vec![ch], group, Init::Constant(0.0));
        self.push(Op::Norm { input, scale, shift })
    }

    fn relu(&mut self, input: usize) -> usize {
        self.push(Op::Relu { input })
    }

    fn basic_block(&mut self, input: usize, name: &str, cin: usize, cout: usize, stride: usize) -> usize {
        let g = ParamGroup::Encoder;
        let x = self.conv(input, &format!("{name}.conv1"), g, cin, cout, 3, stride, 1);
        let x = self.norm(x, &format!("{name}.norm1"), g, cout);
        let x = self.relu(x);
        let x = self.conv(x, &format!("{name}.conv2"), g, cout, cout, 3, 1, 1);
        let x = self.norm(x, &format!("{name}.norm2"), g, cout);
        let skip = if stride > 1 || cin != cout {
            let s = self.conv(input, &format!("{name}.downsample.conv"), g, cin, cout, 1, stride, 0);
            self.norm(s, &format!("{name}.downsample.norm"), g, cout)
        } else {
            input
        };
        let sum = self.push(Op::Add { a: x, b: skip });
        self.relu(sum)
    }

    fn decoder(&mut self, input: usize, name: &str, cin: usize, cout: usize, stride: usize) -> usize {
        let g = ParamGroup::Decoder;
        let mid = (cin / 4).max(1);
        let x = self.conv(input, &format!("{name}.conv1"), g, cin, mid, 1, 1, 0);
        let x = self.norm(x, &format!("{name}.norm1"), g, mid);
        let x = self.relu(x);
        let x = self.tconv(x, &format!("{name}.tconv"), g, mid, mid, 3, stride, 1, stride - 1, false);
        let x = self.norm(x, &format!("{name}.norm2"), g, mid);
        let x = self.relu(x);
        let x = self.conv(x, &format!("{name}.conv2"), g, mid, cout, 1, 1, 0);
        let x = self.norm(x, &format!("{name}.norm3"), g, cout);
        self.relu(x)
    }
}

impl Program {
    pub fn linknet(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rank: config.rank,
            ops: Vec::new(),
            params: Vec::new(),
        };
        let base = config.base_channels;
        let enc = ParamGroup::Encoder;
        let x = b.conv(0, "encoder.stem.conv", enc, config.in_channels, base, 7, 2, 3);
        let x = b.norm(x, "encoder.stem.norm", enc, base);
        let x = b.relu(x);
        let pool = b.shape(3, 2, 1);
        let stem = b.push(Op::MaxPool { input: x, shape: pool });

        let width = |i: usize| base << (i - 1);
        let mut skips = vec![stem];
        let mut x = stem;
        for i in 1..=config.encoder_depth {
            let cin = if i == 1 { base } else { width(i - 1) };
            let stride = if i == 1 { 1 } else { 2 };
            x = b.basic_block(x, &format!("encoder.layer{i}.block0"), cin, width(i), stride);
            x = b.basic_block(x, &format!("encoder.layer{i}.block1"), width(i), width(i), 1);
            skips.push(x);
        }
        let mut d = x;
        for i in (1..=config.encoder_depth).rev() {
            let cout = if i == 1 { base } else { width(i - 1) };
            let stride = if i == 1 { 1 } else { 2 };
            let up = b.decoder(d, &format!("decoder.layer{i}"), width(i), cout, stride);
            d = b.push(Op::Add { a: skips[i - 1], b: up });
        }

        let head = ParamGroup::Head;
        let half = (base / 2).max(1);
        let y = b.tconv(d, "head.tconv1", head, base, half, 3, 2, 1, 1, false);
        let y = b.norm(y, "head.norm1", head, half);
        let y = b.relu(y);
        let y = b.conv(y, "head.conv", head, half, half, 3, 1, 1);
        let y = b.norm(y, "head.norm2", head, half);
        let y = b.relu(y);
        b.tconv(y, "head.tconv2", head, half, config.out_channels, 2, 2, 0, 0, true);

        let mut last_use = vec![0; b.ops.len() + 1];
        for (i, op) in b.ops.iter().enumerate() {
            for n in op.inputs() {
                last_use[n] = i;
            }
        }
        Ok(Program {
            config: config.clone(),
            ops: b.ops,
            params: b.params,
            last_use,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(ParamSpec::len).sum()
    }

    /// Draws initial values for every parameter.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f32>> {
        self.params
            .iter()
            .map(|p| match p.init {
                Init::Constant(c) => vec![c; p.len()],
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    (0..p.len()).map(|_| rng.random_range(-bound..=bound)).collect()
                }
            })
            .collect()
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        let stride = self.config.total_stride();
        let dims = x.dims();
        let spatial = match self.config.rank {
            Rank::Three => &dims[..],
            Rank::Two => &dims[..2],
        };
        if x.channels() != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        if spatial.iter().any(|&d| d == 0 || d % stride != 0) {
            return Err(Error::ShapeMismatch(format!(
                "spatial dims {dims:?} must be positive multiples of {stride}"
            )));
        }
        Ok(())
    }

    fn check_params<T>(&self, params: &[Vec<T>]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidWeights(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (spec, p) in self.params.iter().zip(params) {
            if p.len() != spec.len() {
                return Err(Error::InvalidWeights(format!(
                    "{} holds {} values, expected {}",
                    spec.name,
                    p.len(),
                    spec.len()
                )));
            }
        }
        Ok(())
    }

    fn norm_group(&self, t_dims: [usize; 3]) -> usize {
        match self.config.rank {
            Rank::Three => t_dims.iter().product(),
            Rank::Two => t_dims[0] * t_dims[1],
        }
    }

    fn eval<T: Real>(&self, op: &Op, params: &[Vec<T>], nodes: &[Option<Tensor<T>>]) -> Result<(Tensor<T>, Aux<T>)> {
        let get = |i: usize| nodes[i].as_ref().expect("node consumed before its last use");
        Ok(match *op {
            Op::Conv {
                input,
                weight,
                shape,
                cin,
                cout,
            } => {
                let x = get(input);
                let g = Geometry::conv(x.dims(), shape)?;
                let y = gather(x.data(), cin, &g, &params[weight], cout);
                (Tensor::from_vec(cout, g.b, y), Aux::None)
            }
            Op::ConvT {
                input,
                weight,
                bias,
                shape,
                output_pad,
                cin,
                cout,
            } => {
                let x = get(input);
                let g = Geometry::transposed(x.dims(), shape, output_pad)?;
                let mut y = scatter(x.data(), cin, &g, &params[weight], cout);
                if let Some(b) = bias {
                    let plane = g.a.iter().product::<usize>();
                    for (c, chunk) in y.chunks_mut(plane).enumerate() {
                        let bc = params[b][c];
                        chunk.iter_mut().for_each(|v| *v = *v + bc);
                    }
                }
                (Tensor::from_vec(cout, g.a, y), Aux::None)
            }
            Op::Norm { input, scale, shift } => {
                let x = get(input);
                let (y, stats) = instance_norm(x, self.norm_group(x.dims()), &params[scale], &params[shift]);
                (y, Aux::Norm(stats))
            }
            Op::Relu { input } => (get(input).map(|v| v.max(T::zero())), Aux::None),
            Op::MaxPool { input, shape } => {
                let x = get(input);
                let (y, arg) = max_pool(x, shape)?;
                (y, Aux::Pool(arg, x.dims()))
            }
            Op::Add { a, b } => {
                let mut y = get(a).clone();
                let other = get(b);
                if !y.same_shape(other) {
                    return Err(Error::ShapeMismatch(format!(
                        "skip connection joins {:?} and {:?}",
                        y.dims(),
                        other.dims()
                    )));
                }
                y.add_assign(other);
                (y, Aux::None)
            }
        })
    }

    /// Logits for `x`; intermediate nodes are released as soon as they are dead.
    pub fn forward<T: Real>(&self, params: &[Vec<T>], x: Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(&x)?;
        self.check_params(params)?;
        let mut nodes: Vec<Option<Tensor<T>>> = vec![None; self.ops.len() + 1];
        nodes[0] = Some(x);
        for (i, op) in self.ops.iter().enumerate() {
            let (y, _) = self.eval(op, params, &nodes)?;
            for n in op.inputs() {
                if self.last_use[n] == i {
                    nodes[n] = None;
                }
            }
            nodes[i + 1] = Some(y);
        }
        Ok(nodes.pop().flatten().expect("program has an output"))
    }

    /// Forward pass that keeps every node for [`Program::backward`].
    pub fn forward_tape<T: Real>(&self, params: &[Vec<T>], x: Tensor<T>) -> Result<Tape<T>> {
        self.check_input(&x)?;
        self.check_params(params)?;
        let mut nodes: Vec<Option<Tensor<T>>> = vec![None; self.ops.len() + 1];
        let mut aux = Vec::with_capacity(self.ops.len());
        nodes[0] = Some(x);
        for (i, op) in self.ops.iter().enumerate() {
            let (y, a) = self.eval(op, params, &nodes)?;
            nodes[i + 1] = Some(y);
            aux.push(a);
        }
        Ok(Tape { nodes, aux })
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the logits.
    pub fn backward<T: Real>(&self, params: &[Vec<T>], tape: &Tape<T>, d_logits: Tensor<T>) -> Vec<Vec<T>> {
        let node = |i: usize| tape.nodes[i].as_ref().expect("tape is complete");
        let mut grads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        let mut dn: Vec<Option<Tensor<T>>> = vec![None; self.ops.len() + 1];
        assert!(d_logits.same_shape(node(self.ops.len())), "logit gradient shape");
        dn[self.ops.len()] = Some(d_logits);

        fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(t) => t.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for (i, op) in self.ops.iter().enumerate().rev() {
            let Some(dy) = dn[i + 1].take() else { continue };
            match *op {
                Op::Conv {
                    input,
                    weight,
                    shape,
                    cin,
                    cout,
                } => {
                    let x = node(input);
                    let g = Geometry::conv(x.dims(), shape).expect("geometry was valid in forward");
                    add_into(&mut grads[weight], &weight_grad(x.data(), cin, &g, dy.data(), cout));
                    if input > 0 {
                        let dx = scatter(dy.data(), cout, &g, &params[weight], cin);
                        accumulate(&mut dn[input], Tensor::from_vec(cin, g.a, dx));
                    }
                }
                Op::ConvT {
                    input,
                    weight,
                    bias,
                    shape,
                    output_pad,
                    cin,
                    cout,
                } => {
                    let x = node(input);
                    let g = Geometry::transposed(x.dims(), shape, output_pad).expect("geometry was valid in forward");
                    add_into(&mut grads[weight], &weight_grad(dy.data(), cout, &g, x.data(), cin));
                    if let Some(b) = bias {
                        for c in 0..cout {
                            grads[b][c] = grads[b][c] + dy.channel(c).iter().copied().sum::<T>();
                        }
                    }
                    let dx = gather(dy.data(), cout, &g, &params[weight], cin);
                    accumulate(&mut dn[input], Tensor::from_vec(cin, g.b, dx));
                }
                Op::Norm { input, scale, shift } => {
                    let Aux::Norm(stats) = &tape.aux[i] else { unreachable!() };
                    let (dx, ds, db) = instance_norm_backward(node(input), stats, &params[scale], &dy);
                    add_into(&mut grads[scale], &ds);
                    add_into(&mut grads[shift], &db);
                    accumulate(&mut dn[input], dx);
                }
                Op::Relu { input } => {
                    let y = node(i + 1);
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut dn[input], dx);
                }
                Op::MaxPool { input, .. } => {
                    let Aux::Pool(arg, dims) = &tape.aux[i] else { unreachable!() };
                    accumulate(&mut dn[input], max_pool_backward(&dy, arg, *dims));
                }
                Op::Add { a, b } => {
                    accumulate(&mut dn[b], dy.clone());
                    accumulate(&mut dn[a], dy);
                }
            }
        }
        grads
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

enum Aux<T> {
    None,
    Norm(NormStats<T>),
    Pool(Vec<u32>, [usize; 3]),
}

/// Recorded activations of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Option<Tensor<T>>>,
    aux: Vec<Aux<T>>,
}

impl<T: Real> Tape<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.nodes.last().and_then(Option::as_ref).expect("tape is complete")
    }
}
