//! Seeded graph builders: the block fixtures, random small CNNs and a
//! synthetic four-class image task.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::data::{Batch, Dataset};
use crate::error::Result;
use crate::graph::{BnAttrs, Graph, LayerAttrs, Node, Op};
use crate::tensor::{Conv2dParams, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let d = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("shape matches")
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let d = Uniform::new(lo, hi);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("shape matches")
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

/// Appends nodes with randomly initialized parameters.
pub struct GraphBuilder {
    pub graph: Graph,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            graph: Graph::default(),
            rng: rng(seed),
        }
    }

    fn push(&mut self, id: &str, op: Op, inputs: &[&str]) -> String {
        self.graph.nodes.push(Node::new(id, op, inputs));
        id.to_string()
    }

    pub fn input(&mut self, id: &str, shape: &[usize]) -> String {
        self.graph.inputs.push(id.to_string());
        self.push(
            id,
            Op::Input {
                shape: Some(shape.to_vec()),
            },
            &[],
        )
    }

    pub fn conv(&mut self, id: &str, x: &str, c: ConvSpec) -> String {
        let fan_in = c.c_in / c.groups * c.kernel * c.kernel;
        let std = (2.0 / fan_in as f32).sqrt();
        let w = normal_tensor(&mut self.rng, &[c.c_out, c.c_in / c.groups, c.kernel, c.kernel], std);
        let weight = format!("{id}.weight");
        self.graph.params.insert(weight.clone(), w);
        let bias = c.bias.then(|| {
            let name = format!("{id}.bias");
            let b = normal_tensor(&mut self.rng, &[c.c_out], 0.1);
            self.graph.params.insert(name.clone(), b);
            name
        });
        let attrs = LayerAttrs {
            weight,
            bias,
            conv: Some(Conv2dParams {
                stride: [c.stride; 2],
                padding: [c.padding; 2],
                groups: c.groups,
            }),
            bn: None,
            quant_bias: false,
        };
        self.push(id, Op::Conv2d(attrs), &[x])
    }

    pub fn linear(&mut self, id: &str, x: &str, c_in: usize, c_out: usize) -> String {
        let w = normal_tensor(&mut self.rng, &[c_out, c_in], (1.0 / c_in as f32).sqrt());
        let b = normal_tensor(&mut self.rng, &[c_out], 0.1);
        let (weight, bias) = (format!("{id}.weight"), format!("{id}.bias"));
        self.graph.params.insert(weight.clone(), w);
        self.graph.params.insert(bias.clone(), b);
        let attrs = LayerAttrs {
            weight,
            bias: Some(bias),
            conv: None,
            bn: None,
            quant_bias: false,
        };
        self.push(id, Op::Linear(attrs), &[x])
    }

    /// Batch norm with random affine parameters and running statistics.
    pub fn bn(&mut self, id: &str, x: &str, channels: usize) -> String {
        let r = &mut self.rng;
        let tensors = [
            ("gamma", uniform_tensor(r, &[channels], 0.5, 1.5)),
            ("beta", normal_tensor(r, &[channels], 0.2)),
            ("mean", normal_tensor(r, &[channels], 0.2)),
            ("var", uniform_tensor(r, &[channels], 0.5, 2.0)),
        ];
        for (k, t) in tensors {
            self.graph.params.insert(format!("{id}.{k}"), t);
        }
        let attrs = BnAttrs {
            gamma: format!("{id}.gamma"),
            beta: format!("{id}.beta"),
            mean: format!("{id}.mean"),
            var: format!("{id}.var"),
            eps: 1e-5,
            momentum: 0.1,
        };
        self.push(id, Op::Bn(attrs), &[x])
    }

    /// Batch norm in its freshly initialized state (γ=1, β=0, μ=0, σ²=1).
    pub fn bn_identity(&mut self, id: &str, x: &str, channels: usize) -> String {
        for (k, v) in [("gamma", 1.0), ("beta", 0.0), ("mean", 0.0), ("var", 1.0)] {
            self.graph.params.insert(format!("{id}.{k}"), Tensor::full(&[channels], v));
        }
        let attrs = BnAttrs {
            gamma: format!("{id}.gamma"),
            beta: format!("{id}.beta"),
            mean: format!("{id}.mean"),
            var: format!("{id}.var"),
            eps: 1e-5,
            momentum: 0.1,
        };
        self.push(id, Op::Bn(attrs), &[x])
    }

    pub fn relu(&mut self, id: &str, x: &str) -> String {
        self.push(id, Op::Relu, &[x])
    }

    pub fn relu6(&mut self, id: &str, x: &str) -> String {
        self.push(id, Op::Relu6, &[x])
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str) -> String {
        self.push(id, Op::Add { residual: None }, &[a, b])
    }

    pub fn concat(&mut self, id: &str, inputs: &[&str]) -> String {
        self.push(id, Op::Concat { axis: 1 }, inputs)
    }

    pub fn gap(&mut self, id: &str, x: &str) -> String {
        self.push(id, Op::Gap, &[x])
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn finish(mut self, outputs: &[&str]) -> Result<Graph> {
        self.graph.outputs = outputs.iter().map(|s| s.to_string()).collect();
        self.graph.validate()?;
        Ok(self.graph)
    }
}

/// Residual basic block: two 3×3 conv+BN with an identity shortcut.
pub fn basic_block(seed: u64, channels: usize) -> Result<Graph> {
    let mut b = GraphBuilder::new(seed);
    let x = b.input("x", &[1, channels, 8, 8]);
    let stem = b.conv("stem", &x, ConvSpec::new(channels, channels, 3));
    let s = b.relu("stem.relu", &stem);
    let c1 = b.conv("conv1", &s, ConvSpec::new(channels, channels, 3));
    let n1 = b.bn("bn1", &c1, channels);
    let r1 = b.relu("relu1", &n1);
    let c2 = b.conv("conv2", &r1, ConvSpec::new(channels, channels, 3));
    let n2 = b.bn("bn2", &c2, channels);
    let a = b.add("add", &n2, &s);
    let out = b.relu("relu2", &a);
    b.finish(&[&out])
}

/// Basic block whose shortcut is a strided 1×1 conv+BN.
pub fn downsample_block(seed: u64, c_in: usize, c_out: usize) -> Result<Graph> {
    let mut b = GraphBuilder::new(seed);
    let x = b.input("x", &[1, c_in, 8, 8]);
    let stem = b.conv("stem", &x, ConvSpec::new(c_in, c_in, 3));
    let s = b.relu("stem.relu", &stem);
    let c1 = b.conv("conv1", &s, ConvSpec::new(c_in, c_out, 3).stride(2));
    let n1 = b.bn("bn1", &c1, c_out);
    let r1 = b.relu("relu1", &n1);
    let c2 = b.conv("conv2", &r1, ConvSpec::new(c_out, c_out, 3));
    let n2 = b.bn("bn2", &c2, c_out);
    let d = b.conv("down", &s, ConvSpec::new(c_in, c_out, 1).stride(2));
    let nd = b.bn("down.bn", &d, c_out);
    let a = b.add("add", &n2, &nd);
    let out = b.relu("relu2", &a);
    b.finish(&[&out])
}

/// Inverted bottleneck: 1×1 expand, depthwise 3×3, 1×1 project, residual add.
pub fn inverted_bottleneck(seed: u64, channels: usize, expand: usize) -> Result<Graph> {
    let hidden = channels * expand;
    let mut b = GraphBuilder::new(seed);
    let x = b.input("x", &[1, channels, 8, 8]);
    let stem = b.conv("stem", &x, ConvSpec::new(channels, channels, 3));
    let s = b.relu6("stem.relu6", &stem);
    let e = b.conv("expand", &s, ConvSpec::new(channels, hidden, 1));
    let ne = b.bn("expand.bn", &e, hidden);
    let re = b.relu6("expand.relu6", &ne);
    let dw = b.conv("dw", &re, ConvSpec::new(hidden, hidden, 3).groups(hidden));
    let nd = b.bn("dw.bn", &dw, hidden);
    let rd = b.relu6("dw.relu6", &nd);
    let p = b.conv("project", &rd, ConvSpec::new(hidden, channels, 1));
    let np = b.bn("project.bn", &p, channels);
    let a = b.add("add", &np, &s);
    b.finish(&[&a])
}

/// Two conv branches joined on the channel axis, then a 1×1 conv.
pub fn concat_block(seed: u64, channels: usize) -> Result<Graph> {
    let mut b = GraphBuilder::new(seed);
    let x = b.input("x", &[1, channels, 8, 8]);
    let c1 = b.conv("branch1", &x, ConvSpec::new(channels, channels, 1).bias());
    let r1 = b.relu("branch1.relu", &c1);
    let c2 = b.conv("branch2", &x, ConvSpec::new(channels, channels, 3).bias());
    let r2 = b.relu("branch2.relu", &c2);
    let cat = b.concat("cat", &[&r1, &r2]);
    let out = b.conv("fuse", &cat, ConvSpec::new(2 * channels, channels, 1).bias());
    b.finish(&[&out])
}

/// Random 3-layer CNN: two conv+BN+activation stages, pooling and a linear head.
pub fn random_cnn(seed: u64) -> Result<Graph> {
    let mut b = GraphBuilder::new(seed);
    let r = b.rng();
    let c0 = r.gen_range(1..=4);
    let c1 = r.gen_range(4..=12);
    let c2 = r.gen_range(4..=16);
    let classes = r.gen_range(2..=10);
    let hw = r.gen_range(6..=12);
    let k1 = [1, 3][r.gen_range(0..2)];
    let k2 = [1, 3][r.gen_range(0..2)];
    let s2 = r.gen_range(1..=2);
    let six1 = r.gen_bool(0.5);
    let six2 = r.gen_bool(0.5);
    let x = b.input("x", &[1, c0, hw, hw]);
    let l1 = b.conv("conv1", &x, ConvSpec::new(c0, c1, k1));
    let n1 = b.bn("bn1", &l1, c1);
    let a1 = if six1 { b.relu6("act1", &n1) } else { b.relu("act1", &n1) };
    let l2 = b.conv("conv2", &a1, ConvSpec::new(c1, c2, k2).stride(s2));
    let n2 = b.bn("bn2", &l2, c2);
    let a2 = if six2 { b.relu6("act2", &n2) } else { b.relu("act2", &n2) };
    let p = b.gap("pool", &a2);
    let fc = b.linear("fc", &p, c2, classes);
    b.finish(&[&fc])
}

/// Random conv+BN stack (conv, BN, activation repeated `depth` times).
pub fn random_conv_bn_stack(seed: u64, depth: usize) -> Result<Graph> {
    let mut b = GraphBuilder::new(seed);
    let r = b.rng();
    let mut c = r.gen_range(1..=4);
    let hw = r.gen_range(5..=9);
    let mut v = b.input("x", &[1, c, hw, hw]);
    for i in 0..depth {
        let r = b.rng();
        let c_out = r.gen_range(2..=8);
        let k = [1, 3][r.gen_range(0..2)];
        let spec = if r.gen_bool(0.5) {
            ConvSpec::new(c, c_out, k).bias()
        } else {
            ConvSpec::new(c, c_out, k)
        };
        let l = b.conv(&format!("conv{i}"), &v, spec);
        let n = b.bn(&format!("bn{i}"), &l, c_out);
        v = b.relu(&format!("relu{i}"), &n);
        c = c_out;
    }
    b.finish(&[&v])
}

/// Toy CNN for the quantization-aware training runs: two 3×3 conv+BN+ReLU
/// stages on 1×8×8 images and a linear classifier over pooled features.
pub fn toy_cnn(seed: u64, classes: usize) -> Result<Graph> {
    let mut b = GraphBuilder::new(seed);
    let x = b.input("x", &[1, 1, 8, 8]);
    let c1 = b.conv("conv1", &x, ConvSpec::new(1, 8, 3));
    let n1 = b.bn_identity("bn1", &c1, 8);
    let r1 = b.relu("relu1", &n1);
    let c2 = b.conv("conv2", &r1, ConvSpec::new(8, 16, 3).stride(2));
    let n2 = b.bn_identity("bn2", &c2, 16);
    let r2 = b.relu("relu2", &n2);
    let p = b.gap("pool", &r2);
    let fc = b.linear("fc", &p, 16, classes);
    b.finish(&[&fc])
}

/// Draws one 8×8 image of `class`: 0 horizontal bar, 1 vertical bar,
/// 2 diagonal, 3 centered square, each at a random offset with noise.
fn pattern(rng: &mut impl Rng, class: usize, noise: f32) -> Vec<f32> {
    let mut img = vec![0f32; 64];
    let o = rng.gen_range(1..7usize);
    let n = Normal::new(0.0, noise).expect("finite noise");
    for y in 0..8 {
        for x in 0..8 {
            let on = match class % 4 {
                0 => y == o || y + 1 == o,
                1 => x == o || x + 1 == o,
                2 => (x + 8 - y) % 8 == o % 4 || (x + 9 - y) % 8 == o % 4,
                _ => (2..6).contains(&x) && (2..6).contains(&y) && !((3..5).contains(&x) && (3..5).contains(&y)),
            };
            img[y * 8 + x] = if on { 1.0 } else { 0.0 } + n.sample(rng);
        }
    }
    img
}

/// Labeled batches of the four-pattern task, classes drawn uniformly.
pub fn synthetic_dataset(seed: u64, batches: usize, batch_size: usize, noise: f32) -> Dataset {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(batches);
    for _ in 0..batches {
        let mut data = Vec::with_capacity(batch_size * 64);
        let mut labels = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let c = r.gen_range(0..4);
            data.extend(pattern(&mut r, c, noise));
            labels.push(c);
        }
        let input = Tensor::new(vec![batch_size, 1, 8, 8], data).expect("shape matches");
        out.push(Batch::labeled(input, labels));
    }
    Dataset::new(out)
}

/// Unlabeled standard-normal batches shaped like the graph's first input.
pub fn random_inputs(seed: u64, g: &Graph, batches: usize, batch_size: usize) -> Dataset {
    let mut r = rng(seed);
    let shape = match g.nodes.iter().find(|n| g.inputs.first() == Some(&n.id)).map(|n| &n.op) {
        Some(Op::Input { shape: Some(s) }) => s.clone(),
        _ => vec![1, 3, 8, 8],
    };
    let mut s = shape;
    s[0] = batch_size;
    Dataset::from_inputs((0..batches).map(|_| normal_tensor(&mut r, &s, 1.0)).collect())
}
