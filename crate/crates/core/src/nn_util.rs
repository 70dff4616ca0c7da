//! Small building blocks shared by every network: activations, MLPs, conv
//! constructors and seeded parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use tch::{nn, nn::Module, Kind, Tensor};

use crate::config::{Activation, LEAKY_SLOPE};

pub fn activate(xs: &Tensor, activation: Activation) -> Tensor {
    match activation {
        Activation::LeakyRelu => xs.maximum(&(xs * LEAKY_SLOPE)),
        Activation::Relu => xs.relu(),
    }
}

pub fn leaky(xs: &Tensor) -> Tensor {
    activate(xs, Activation::LeakyRelu)
}

/// Three fully connected layers with activations between them.
#[derive(Debug)]
pub struct Mlp3 {
    layers: [nn::Linear; 3],
    activation: Activation,
}

impl Mlp3 {
    pub fn new(vs: nn::Path, input: usize, hidden: usize, output: usize, activation: Activation) -> Self {
        let cfg = Default::default();
        let layers = [
            nn::linear(&vs / "fc0", input as i64, hidden as i64, cfg),
            nn::linear(&vs / "fc1", hidden as i64, hidden as i64, cfg),
            nn::linear(&vs / "fc2", hidden as i64, output as i64, cfg),
        ];
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> i64 {
        self.layers[0].ws.size()[1]
    }

    pub fn output_dim(&self) -> i64 {
        self.layers[2].ws.size()[0]
    }

    /// The last layer, exposed so tests can pin it to hand-picked values.
    pub fn last_layer(&self) -> &nn::Linear {
        &self.layers[2]
    }

    pub fn layers(&self) -> &[nn::Linear; 3] {
        &self.layers
    }
}

impl Module for Mlp3 {
    fn forward(&self, xs: &Tensor) -> Tensor {
        let xs = activate(&xs.apply(&self.layers[0]), self.activation);
        let xs = activate(&xs.apply(&self.layers[1]), self.activation);
        xs.apply(&self.layers[2])
    }
}

pub fn conv3x3(vs: nn::Path, c_in: usize, c_out: usize) -> nn::Conv2D {
    let cfg = nn::ConvConfig { padding: 1, ..Default::default() };
    nn::conv2d(vs, c_in as i64, c_out as i64, 3, cfg)
}

pub fn conv1x1(vs: nn::Path, c_in: usize, c_out: usize, bias: bool) -> nn::Conv2D {
    let cfg = nn::ConvConfig { bias, ..Default::default() };
    nn::conv2d(vs, c_in as i64, c_out as i64, 1, cfg)
}

/// Batch normalization without a learned affine transform; the modulation supplies it.
pub fn plain_batch_norm(vs: nn::Path, channels: usize) -> nn::BatchNorm {
    let cfg = nn::BatchNormConfig { affine: false, ..Default::default() };
    nn::batch_norm2d(vs, channels as i64, cfg)
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a, so each variable draws from its own stream regardless of creation order.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Overwrites every variable in `vs` from a seeded generator.
///
/// Weights get He-uniform values for the leaky activation, biases are zero,
/// biases of `gamma` heads are one (unit modulation at initialization),
/// embeddings and learned start tensors are standard normal, and
/// normalization statistics are reset to zero mean and unit variance.
pub fn init_var_store(vs: &nn::VarStore, seed: u64) {
    let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    tch::no_grad(|| {
        for (name, var) in vars {
            let shape = var.size();
            let numel: i64 = shape.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(name_stream(&name));
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let values: Vec<f64> = match leaf {
                "running_mean" => vec![0.0; numel as usize],
                "running_var" => vec![1.0; numel as usize],
                "bias" if name.contains("gamma") => vec![1.0; numel as usize],
                "bias" => vec![0.0; numel as usize],
                "weight" if shape.len() >= 2 => {
                    let fan_in: i64 = shape[1..].iter().product();
                    // The positional-encoding projection feeds sin/cos directly; no activation gain keeps it low frequency.
                    let gain = if name.ends_with("proj.weight") { 1.0 / 3.0 } else { 1.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) };
                    let bound = (6.0 * gain / fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    (0..numel).map(|_| dist.sample(&mut rng)).collect()
                }
                "weight" => vec![1.0; numel as usize],
                _ => (0..numel).map(|_| StandardNormal.sample(&mut rng)).collect(),
            };
            let src = Tensor::from_slice(&values).view(shape.as_slice()).to_kind(var.kind());
            let mut var = var;
            var.copy_(&src);
        }
    });
}

/// Sets a conv kernel to the identity map (requires equal in/out channels and odd kernel).
pub fn set_identity_conv(conv: &mut nn::Conv2D) {
    let size = conv.ws.size();
    let (c_out, c_in, kh, kw) = (size[0], size[1], size[2], size[3]);
    assert_eq!(c_out, c_in, "identity conv needs matching channels");
    tch::no_grad(|| {
        let w = Tensor::zeros([c_out, c_in, kh, kw], (conv.ws.kind(), conv.ws.device()));
        for c in 0..c_out {
            let _ = w.get(c).get(c).get(kh / 2).get(kw / 2).fill_(1.0);
        }
        conv.ws.copy_(&w);
        if let Some(bs) = &mut conv.bs {
            let _ = bs.zero_();
        }
    });
}

pub fn fill_tensor(t: &mut Tensor, value: f64) {
    tch::no_grad(|| {
        let _ = t.fill_(value);
    });
}

/// Copies a parameter snapshot (e.g. to check that an update left it unchanged).
pub fn snapshot(vs: &nn::VarStore) -> Vec<(String, Tensor)> {
    let mut vars: Vec<(String, Tensor)> =
        vs.variables().into_iter().map(|(n, t)| (n, t.detach().copy())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// Sorted `(name, shape)` list describing the wiring of a model.
pub fn structure(vs: &nn::VarStore) -> Vec<(String, Vec<i64>)> {
    let mut out: Vec<(String, Vec<i64>)> = vs.variables().into_iter().map(|(n, t)| (n, t.size())).collect();
    out.sort();
    out
}

pub fn all_finite(t: &Tensor) -> bool {
    t.numel() == 0 || t.isfinite().all().int64_value(&[]) != 0
}

/// Flattens a tensor into host `f64` values.
pub fn to_vec_f64(t: &Tensor) -> Vec<f64> {
    let flat = t.detach().to_kind(Kind::Double).contiguous().view(-1);
    let n = flat.numel();
    let mut out = vec![0f64; n];
    flat.copy_data(&mut out, n);
    out
}

pub fn to_vec_f32(t: &Tensor) -> Vec<f32> {
    let flat = t.detach().to_kind(Kind::Float).contiguous().view(-1);
    let n = flat.numel();
    let mut out = vec![0f32; n];
    flat.copy_data(&mut out, n);
    out
}

pub fn to_vec_i64(t: &Tensor) -> Vec<i64> {
    let flat = t.detach().to_kind(Kind::Int64).contiguous().view(-1);
    let n = flat.numel();
    let mut out = vec![0i64; n];
    flat.copy_data(&mut out, n);
    out
}
