//! Dense network description, initialization and tape forward.

use rand::Rng;

use super::tape::{Binding, Tape, Var};
use super::{DiffError, Mat};
use crate::seeding::derived_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

/// Layer sizes plus activation kind; `residual_block = true` inserts a
/// two-layer block with an identity shortcut between the input layer and the
/// output head (`layers` must then be `[input, hidden, output]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetSpec {
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub residual_block: bool,
    /// Apply the activation after the final layer too (feature trunks).
    pub activate_output: bool,
}

impl NetSpec {
    pub fn mlp(layers: &[usize]) -> Self {
        NetSpec {
            layers: layers.to_vec(),
            activation: Activation::Relu,
            residual_block: false,
            activate_output: false,
        }
    }

    /// Feature trunk: every listed layer is a hidden layer.
    pub fn trunk(layers: &[usize]) -> Self {
        NetSpec {
            activate_output: true,
            ..NetSpec::mlp(layers)
        }
    }

    /// `input -> hidden` layer, residual block at `hidden`, `hidden -> output`
    /// head.
    pub fn residual(input: usize, hidden: usize, output: usize) -> Self {
        NetSpec {
            layers: vec![input, hidden, output],
            activation: Activation::Relu,
            residual_block: true,
            activate_output: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layers.last().expect("non-empty layers")
    }

    /// `(name_suffix, rows, cols)` of every weight/bias, in forward order.
    fn shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        if self.residual_block {
            let (i, h, o) = (self.layers[0], self.layers[1], self.layers[2]);
            out.push(("l0/w".into(), i, h));
            out.push(("l0/b".into(), 1, h));
            out.push(("rb0/w".into(), h, h));
            out.push(("rb0/b".into(), 1, h));
            out.push(("rb1/w".into(), h, h));
            out.push(("rb1/b".into(), 1, h));
            out.push(("head/w".into(), h, o));
            out.push(("head/b".into(), 1, o));
        } else {
            for (k, pair) in self.layers.windows(2).enumerate() {
                out.push((format!("l{k}/w"), pair[0], pair[1]));
                out.push((format!("l{k}/b"), 1, pair[1]));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(_, r, c)| r * c).sum()
    }
}

/// Register the net's parameters under `prefix`, drawing each layer from its
/// own stream with uniform fan-in scaling (bound 1/sqrt(fan_in)).
pub fn init_net(
    store: &mut super::ParamStore,
    prefix: &str,
    spec: &NetSpec,
    master_seed: u64,
) -> Result<(), DiffError> {
    for (i, (suffix, rows, cols)) in spec.shapes().into_iter().enumerate() {
        let name = format!("{prefix}/{suffix}");
        let fan_in = if suffix.ends_with("/b") {
            // Biases share the layer's fan-in (the weight rows).
            spec.shapes()[i - 1].1
        } else {
            rows
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = derived_rng(master_seed, "init", &[crate::seeding::derive_seed(0, &name, &[])]);
        let mut m = Mat::zeros((rows, cols));
        for v in m.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        store.register(&name, m)?;
    }
    Ok(())
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Linear => x,
    }
}

/// Forward pass of the net under `prefix` on the tape. The input is a
/// `(batch, input_dim)` variable; returns the `(batch, output_dim)` output.
pub fn net_forward(
    tape: &mut Tape,
    binding: Binding<'_>,
    prefix: &str,
    spec: &NetSpec,
    input: Var,
) -> Result<Var, DiffError> {
    let got = tape.value(input).ncols();
    if got != spec.input_dim() {
        return Err(DiffError::Shape {
            op: "net_forward",
            details: format!("{prefix}: input width {got}, expected {}", spec.input_dim()),
        });
    }
    let linear = |tape: &mut Tape, name: &str, x: Var| -> Result<Var, DiffError> {
        let w = tape.param(binding, &format!("{prefix}/{name}/w"))?;
        let b = tape.param(binding, &format!("{prefix}/{name}/b"))?;
        let xw = tape.matmul(x, w);
        Ok(tape.add_row_bias(xw, b))
    };
    if spec.residual_block {
        let h = linear(tape, "l0", input)?;
        let h = activate(tape, h, spec.activation);
        let inner = linear(tape, "rb0", h)?;
        let inner = activate(tape, inner, spec.activation);
        let inner = linear(tape, "rb1", inner)?;
        let summed = tape.add(inner, h);
        let block = activate(tape, summed, spec.activation);
        let out = linear(tape, "head", block)?;
        return Ok(if spec.activate_output {
            activate(tape, out, spec.activation)
        } else {
            out
        });
    }
    let mut x = input;
    let last = spec.layers.len() - 2;
    for k in 0..=last {
        x = linear(tape, &format!("l{k}"), x)?;
        if k < last || spec.activate_output {
            x = activate(tape, x, spec.activation);
        }
    }
    Ok(x)
}

/// Parameter count of a registered net (for the parity checks against
/// baseline agents).
pub fn net_param_count(spec: &NetSpec) -> usize {
    spec.param_count()
}
