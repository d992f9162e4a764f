//! Fixed-architecture feedforward networks with exact reverse-mode gradients.
//!
//! The computation graph is always the same: affine layer, elementwise
//! activation, repeat. That is everything the formulations need, so instead of
//! a general autodiff there is one forward that records a tape and one
//! backward that consumes it. Backward computes gradients of
//! `sum(upstream ⊙ output)` for every parameter and for the input, which
//! composes across networks by threading `input_grad` of one into `upstream`
//! of the previous.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fmath;
use crate::mat::Mat;
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Slope of the leaky rectifier. Fixed, not configurable.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu,
    Tanh,
    Softplus,
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Tanh => fmath::tanh(z),
            Activation::Softplus => fmath::softplus(z),
            Activation::Identity => z,
            Activation::Sigmoid => fmath::sigmoid(z),
        }
    }

    /// Derivative expressed through the activation output. Every member of
    /// the activation set admits this form, which spares the tape from
    /// storing pre-activations.
    #[inline]
    fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if y >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => 1.0 - fmath::exp(-y),
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::LeakyRelu => 0,
            Activation::Tanh => 1,
            Activation::Softplus => 2,
            Activation::Identity => 3,
            Activation::Sigmoid => 4,
        }
    }

    fn from_tag(tag: u8) -> Result<Activation> {
        Ok(match tag {
            0 => Activation::LeakyRelu,
            1 => Activation::Tanh,
            2 => Activation::Softplus,
            3 => Activation::Identity,
            4 => Activation::Sigmoid,
            t => {
                return Err(Error::Decode(alloc::format!(
                    "unknown activation tag {t}"
                )))
            }
        })
    }
}

/// One dense layer: weights are `in × out`, applied as `x · w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Mat,
    pub b: Vec<f64>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    /// Assemble from explicit layers, checking the dimension chain.
    pub fn new(layers: Vec<Layer>) -> Result<MlpParams> {
        if layers.is_empty() {
            return Err(Error::InvalidSpec("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.b.len() != l.w.cols() {
                return Err(Error::shape(
                    "MlpParams::new bias",
                    (1, l.w.cols()),
                    (1, l.b.len()),
                ));
            }
            if i > 0 && layers[i - 1].w.cols() != l.w.rows() {
                return Err(Error::shape(
                    "MlpParams::new chain",
                    (layers[i - 1].w.cols(), l.w.cols()),
                    l.w.shape(),
                ));
            }
        }
        Ok(MlpParams { layers })
    }

    /// Fan-in-scaled uniform weights on each layer, zero biases. `dims` is
    /// the full chain [in, hidden.., out]; all hidden layers get
    /// `hidden_act`, the last layer `out_act`.
    pub fn init(
        dims: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut Stream,
    ) -> Result<MlpParams> {
        if dims.len() < 2 {
            return Err(Error::InvalidSpec("dims chain needs at least in and out".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec("zero-width layer".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = 1.0 / fmath::sqrt(fan_in as f64);
            let w = Mat::from_fn(fan_in, fan_out, |_, _| rng::uniform(rng, -bound, bound));
            let act = if i + 2 == dims.len() { out_act } else { hidden_act };
            layers.push(Layer {
                w,
                b: vec![0.0; fan_out],
                act,
            });
        }
        MlpParams::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.cols()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.rows() * l.w.cols() + l.b.len())
            .sum()
    }

    /// Forward pass without a tape, for paths that never differentiate.
    pub fn forward_only(&self, input: &Mat) -> Result<Mat> {
        self.check_input(input)?;
        let mut x = input.clone();
        for l in &self.layers {
            x = affine_act(&x, l)?;
        }
        Ok(x)
    }

    /// Forward pass recording a tape for [`MlpParams::backward`].
    pub fn forward(&self, input: &Mat) -> Result<(Mat, Tape)> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for l in &self.layers {
            let y = affine_act(acts.last().unwrap(), l)?;
            acts.push(y);
        }
        let output = acts.last().unwrap().clone();
        Ok((output, Tape { acts }))
    }

    /// Gradients of `sum(upstream ⊙ output)` with respect to all parameters
    /// and the input. The tape must come from a forward pass of this network
    /// on the same batch shape.
    pub fn backward(&self, tape: &Tape, upstream: &Mat) -> Result<(MlpGrads, Mat)> {
        if tape.acts.len() != self.layers.len() + 1 {
            return Err(Error::shape(
                "MlpParams::backward tape",
                (self.layers.len() + 1, 0),
                (tape.acts.len(), 0),
            ));
        }
        let out = tape.acts.last().unwrap();
        if upstream.shape() != out.shape() {
            return Err(Error::shape(
                "MlpParams::backward upstream",
                out.shape(),
                upstream.shape(),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut up = upstream.clone();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let y = &tape.acts[idx + 1];
            if y.shape() != (up.rows(), l.w.cols()) {
                return Err(Error::shape(
                    "MlpParams::backward stale tape",
                    (up.rows(), l.w.cols()),
                    y.shape(),
                ));
            }
            // dZ = upstream ⊙ act'(z), with act' read off the stored output.
            let mut dz = up.clone();
            for (g, &yv) in dz.data_mut().iter_mut().zip(y.data()) {
                *g *= l.act.deriv_from_output(yv);
            }
            let x = &tape.acts[idx];
            let dw = x.matmul_at_b(&dz)?;
            let mut db = vec![0.0; l.w.cols()];
            for r in 0..dz.rows() {
                for (acc, v) in db.iter_mut().zip(dz.row(r)) {
                    *acc += v;
                }
            }
            up = dz.matmul_a_bt(&l.w)?;
            grads.push(LayerGrads { dw, db });
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, up))
    }

    fn check_input(&self, input: &Mat) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape(
                "mlp input",
                (input.rows(), self.input_dim()),
                input.shape(),
            ));
        }
        Ok(())
    }

    /// All parameters, layer by layer, weights row-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        out
    }

    /// Inverse of [`MlpParams::flatten`].
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "MlpParams::set_from_flat",
                (self.param_count(), 1),
                (flat.len(), 1),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.rows() * l.w.cols();
            l.w.data_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Flat binary layout: magic `MLP0`, layer count, then per layer
    /// (in, out, activation tag, row-major weights, biases), all
    /// little-endian. Round-trips bit-exactly.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(b"MLP0");
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.w.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.w.cols() as u32).to_le_bytes());
            out.push(l.act.tag());
            for v in l.w.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &l.b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    /// Decode one network from the front of `bytes`; returns it with the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(MlpParams, usize)> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != b"MLP0" {
            return Err(Error::Decode("bad network magic".into()));
        }
        let n_layers = cur.u32()? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(Error::Decode(alloc::format!(
                "implausible layer count {n_layers}"
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            if rows == 0 || cols == 0 || rows * cols > (1 << 28) {
                return Err(Error::Decode("implausible layer shape".into()));
            }
            let act = Activation::from_tag(cur.u8()?)?;
            let mut wdata = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                wdata.push(cur.f64()?);
            }
            let mut b = Vec::with_capacity(cols);
            for _ in 0..cols {
                b.push(cur.f64()?);
            }
            let w = Mat::from_vec(rows, cols, wdata)?;
            layers.push(Layer { w, b, act });
        }
        let params = MlpParams::new(layers)?;
        Ok((params, cur.pos))
    }
}

fn affine_act(x: &Mat, l: &Layer) -> Result<Mat> {
    let mut z = x.matmul(&l.w)?;
    let cols = z.cols();
    for r in 0..z.rows() {
        let row = z.row_mut(r);
        for j in 0..cols {
            row[j] = l.act.apply(row[j] + l.b[j]);
        }
    }
    Ok(z)
}

/// Activation cache from a forward pass: `acts[0]` is the input, `acts[i+1]`
/// the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Mat>,
}

impl Tape {
    pub fn output(&self) -> &Mat {
        self.acts.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub dw: Mat,
    pub db: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> MlpGrads {
        MlpGrads {
            layers: params
                .layers()
                .iter()
                .map(|l| LayerGrads {
                    dw: Mat::zeros(l.w.rows(), l.w.cols()),
                    db: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "MlpGrads::add_assign",
                (self.layers.len(), 0),
                (other.layers.len(), 0),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.dw.add_assign_scaled(&b.dw, 1.0)?;
            for (x, y) in a.db.iter_mut().zip(&b.db) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for l in &mut self.layers {
            l.dw.scale(alpha);
            for v in &mut l.db {
                *v *= alpha;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.dw.data());
            out.extend_from_slice(&l.db);
        }
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Decode("truncated input".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
