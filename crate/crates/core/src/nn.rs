//! Named parameter storage and the small layer kit the networks are built from.

use diffcore::{Array, Result, Tape, Var};
use rand::Rng;

use crate::rng::StreamRng;

/// Ordered, named parameter arrays for one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    arrays: Vec<Array>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array) -> usize {
        self.names.push(name.into());
        self.arrays.push(value);
        self.arrays.len() - 1
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array] {
        &mut self.arrays
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.names.iter().position(|n| n == name).map(|i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.arrays[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.iter().all(|x| x.is_finite()))
    }

    pub fn zero_all(&mut self) {
        for a in &mut self.arrays {
            a.fill(0.0);
        }
    }

    /// Puts every array on the tape, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.arrays
            .iter()
            .map(|a| {
                if trainable {
                    tape.param(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect()
    }
}

fn glorot(rng: &mut StreamRng, fan_in: usize, fan_out: usize) -> Array {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(set: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut StreamRng) -> Self {
        let w = set.push(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let b = set.push(format!("{name}.b"), Array::zeros((1, fan_out)));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        Ok(tape.affine(x, vars[self.w], vars[self.b])?)
    }
}

/// Dense layers with ELU between them and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(set: &mut ParamSet, name: &str, sizes: &[usize], rng: &mut StreamRng) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(set, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, vars, h)?;
            if i < last {
                h = tape.elu(h)?;
            }
        }
        Ok(h)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }
}

/// Gated recurrent cell with update and reset gates.
///
/// `r, z = sigmoid([x, h] W_g + b_g)`,
/// `n = tanh(x W_x + r * (h W_h) + b_n)`,
/// `h' = n + z * (h - n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gru {
    pub gates: Linear,
    pub cand_x: Linear,
    pub cand_h: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(set: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut StreamRng) -> Self {
        let gates = Linear::new(set, &format!("{name}.gates"), input + hidden, 2 * hidden, rng);
        let cand_x = Linear::new(set, &format!("{name}.cand_x"), input, hidden, rng);
        let cand_h = set.push(format!("{name}.cand_h.w"), glorot(rng, hidden, hidden));
        Self {
            gates,
            cand_x,
            cand_h,
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, h: Var) -> Result<Var> {
        let xh = tape.concat(diffcore::Axis::Cols, &[x, h])?;
        let g = self.gates.forward(tape, vars, xh)?;
        let g = tape.sigmoid(g)?;
        let r = tape.slice_cols(g, 0, self.hidden)?;
        let z = tape.slice_cols(g, self.hidden, 2 * self.hidden)?;
        let hx = self.cand_x.forward(tape, vars, x)?;
        let hh = tape.matmul(h, vars[self.cand_h])?;
        let rh = tape.mul(r, hh)?;
        let pre = tape.add(hx, rh)?;
        let n = tape.tanh(pre)?;
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        Ok(tape.add(n, zd)?)
    }
}
