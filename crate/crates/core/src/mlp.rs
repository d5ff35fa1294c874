//! Fully connected feedforward regression network `(t, LET, Vd) -> i`.
//!
//! Inputs and output are handled in normalized units; [`MlpModel::predict_current`]
//! wraps the forward pass with the model's [`NormParams`].
//!
//! Parameters are flattened layer by layer, each layer contributing its
//! weight matrix in row-major order (`W[out][in]`) followed by its biases.
//! The Jacobian columns, the LM update and the model file all use this order.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::dataset::{Channel, NormParams};

pub const INPUTS: usize = 3;
pub const OUTPUTS: usize = 1;
pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "setnet-mlp";

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("unknown transfer function `{0}`")]
    UnknownTransfer(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite parameter in layer {layer}")]
    NonFinite { layer: usize },
    #[error("bad architecture `{0}`: expected hidden sizes and a final 1, e.g. 8x8x1")]
    BadArchitecture(String),
    #[error("model file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transfer {
    /// `2 / (1 + exp(-2n)) - 1`, numerically `tanh`.
    Tansig,
    /// `1 / (1 + exp(-n))`.
    Logsig,
    /// `n / (1 + |n|)`.
    Elliotsig,
    /// Identity.
    Purelin,
}

impl Transfer {
    pub const HIDDEN: [Transfer; 3] = [Transfer::Tansig, Transfer::Logsig, Transfer::Elliotsig];

    #[inline]
    pub fn eval(self, n: f64) -> f64 {
        match self {
            Transfer::Tansig => 2.0 / (1.0 + (-2.0 * n).exp()) - 1.0,
            Transfer::Logsig => 1.0 / (1.0 + (-n).exp()),
            Transfer::Elliotsig => n / (1.0 + n.abs()),
            Transfer::Purelin => n,
        }
    }

    /// `da/dn` at `n`.
    #[inline]
    pub fn deriv(self, n: f64) -> f64 {
        self.deriv_from(n, self.eval(n))
    }

    /// `da/dn` given both the net input and the already computed activation.
    #[inline]
    fn deriv_from(self, n: f64, a: f64) -> f64 {
        match self {
            Transfer::Tansig => 1.0 - a * a,
            Transfer::Logsig => a * (1.0 - a),
            Transfer::Elliotsig => {
                let d = 1.0 + n.abs();
                1.0 / (d * d)
            }
            Transfer::Purelin => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Transfer::Tansig => "tansig",
            Transfer::Logsig => "logsig",
            Transfer::Elliotsig => "elliotsig",
            Transfer::Purelin => "purelin",
        }
    }
}

impl fmt::Display for Transfer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Transfer {
    type Err = MlpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tansig" => Ok(Transfer::Tansig),
            "logsig" => Ok(Transfer::Logsig),
            "elliotsig" => Ok(Transfer::Elliotsig),
            "purelin" => Ok(Transfer::Purelin),
            other => Err(MlpError::UnknownTransfer(other.to_string())),
        }
    }
}

/// Hidden layer sizes plus the shared hidden transfer; the output layer is a
/// single purelin neuron.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub hidden_transfer: Transfer,
}

impl Architecture {
    pub fn new(hidden: Vec<usize>, hidden_transfer: Transfer) -> Self {
        Self { hidden, hidden_transfer }
    }

    /// Parses the `8x8x1` notation (hidden sizes, then the output size 1).
    pub fn parse(spec: &str, hidden_transfer: Transfer) -> Result<Self, MlpError> {
        let bad = || MlpError::BadArchitecture(spec.to_string());
        let sizes = spec
            .split(['x', 'X', '×'])
            .map(|s| s.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        match sizes.split_last() {
            Some((&OUTPUTS, hidden)) if !hidden.is_empty() && hidden.iter().all(|&h| h > 0) => {
                Ok(Self::new(hidden.to_vec(), hidden_transfer))
            }
            _ => Err(bad()),
        }
    }

    /// `(3, h1, ..., 1)`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(INPUTS);
        dims.extend(&self.hidden);
        dims.push(OUTPUTS);
        dims
    }

    pub fn transfers(&self) -> Vec<Transfer> {
        let mut t = vec![self.hidden_transfer; self.hidden.len()];
        t.push(Transfer::Purelin);
        t
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().windows(2).map(|d| d[1] * (d[0] + 1)).sum()
    }

    /// The `8x8x1` label.
    pub fn label(&self) -> String {
        let mut parts: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        parts.push(OUTPUTS.to_string());
        parts.join("x")
    }

    /// The 16x1, 8x8x1 and 8x16x8x1 shapes crossed with the three hidden transfers.
    pub fn table_grid() -> Vec<Architecture> {
        let shapes: [&[usize]; 3] = [&[16], &[8, 8], &[8, 16, 8]];
        shapes
            .iter()
            .flat_map(|h| Transfer::HIDDEN.iter().map(move |&t| Architecture::new(h.to_vec(), t)))
            .collect()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.label(), self.hidden_transfer)
    }
}

/// One dense layer `a = f(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    biases: Vec<f64>,
    transfer: Transfer,
}

impl Layer {
    pub fn new(
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        transfer: Transfer,
    ) -> Result<Self, MlpError> {
        if weights.len() != inputs * outputs || biases.len() != outputs {
            return Err(MlpError::Shape(format!(
                "layer {outputs}x{inputs} got {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        Ok(Self { inputs, outputs, weights, biases, transfer })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn transfer(&self) -> Transfer {
        self.transfer
    }

    /// Weight from input `j` to neuron `i`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.inputs + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Current prediction plus a flag raised when an input lies outside the
/// normalization range the model was trained on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub current: f64,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    norm: NormParams,
}

impl MlpModel {
    pub fn new(layers: Vec<Layer>, norm: NormParams) -> Result<Self, MlpError> {
        let first = layers.first().ok_or_else(|| MlpError::Shape("no layers".into()))?;
        if first.inputs != INPUTS {
            return Err(MlpError::Shape(format!("input dimension {} != {INPUTS}", first.inputs)));
        }
        let last = layers.last().unwrap();
        if last.outputs != OUTPUTS {
            return Err(MlpError::Shape(format!("output dimension {} != {OUTPUTS}", last.outputs)));
        }
        if last.transfer != Transfer::Purelin {
            return Err(MlpError::Shape("final layer must be purelin".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(MlpError::Shape(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    k + 1,
                    pair[0].outputs,
                    k + 2,
                    pair[1].inputs
                )));
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(MlpError::NonFinite { layer: k + 1 });
            }
        }
        Ok(Self { layers, norm })
    }

    /// Builds a model from a flat parameter vector in the documented order.
    pub fn from_params(arch: &Architecture, params: &[f64], norm: NormParams) -> Result<Self, MlpError> {
        if params.len() != arch.param_count() {
            return Err(MlpError::Shape(format!(
                "{} parameters for an architecture with {}",
                params.len(),
                arch.param_count()
            )));
        }
        let mut rest = params;
        let mut layers = Vec::new();
        for (dims, transfer) in arch.layer_dims().windows(2).zip(arch.transfers()) {
            let (inputs, outputs) = (dims[0], dims[1]);
            let (w, tail) = rest.split_at(inputs * outputs);
            let (b, tail) = tail.split_at(outputs);
            rest = tail;
            layers.push(Layer::new(inputs, outputs, w.to_vec(), b.to_vec(), transfer)?);
        }
        Self::new(layers, norm)
    }

    pub fn zeros(arch: &Architecture, norm: NormParams) -> Self {
        Self::from_params(arch, &vec![0.0; arch.param_count()], norm)
            .expect("zero parameters always form a valid model")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn norm(&self) -> &NormParams {
        &self.norm
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![INPUTS];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    /// Architecture when all hidden layers share one transfer.
    pub fn architecture(&self) -> Option<Architecture> {
        let (_, hidden) = self.layers.split_last()?;
        let t = hidden.first()?.transfer;
        hidden
            .iter()
            .all(|l| l.transfer == t)
            .then(|| Architecture::new(hidden.iter().map(|l| l.outputs).collect(), t))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend(&l.weights);
            p.extend(&l.biases);
        }
        p
    }

    /// Copy of the model with new parameters (same shapes and norm).
    pub fn with_params(&self, params: &[f64]) -> Result<Self, MlpError> {
        if params.len() != self.param_count() {
            return Err(MlpError::Shape(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut out = self.clone();
        let mut rest = params;
        for l in &mut out.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            let (b, tail) = tail.split_at(l.biases.len());
            l.weights.copy_from_slice(w);
            l.biases.copy_from_slice(b);
            rest = tail;
        }
        if out.params().iter().any(|v| !v.is_finite()) {
            return Err(MlpError::NonFinite { layer: 0 });
        }
        Ok(out)
    }

    pub fn with_norm(&self, norm: NormParams) -> Self {
        Self { layers: self.layers.clone(), norm }
    }

    fn widest(&self) -> usize {
        self.layers.iter().map(|l| l.outputs.max(l.inputs)).max().unwrap_or(INPUTS)
    }

    /// Network output for a normalized input.
    pub fn forward(&self, x: [f64; 3]) -> f64 {
        let mut cur = Vec::with_capacity(self.widest());
        let mut next = Vec::with_capacity(self.widest());
        cur.extend_from_slice(&x);
        for l in &self.layers {
            next.clear();
            for i in 0..l.outputs {
                let row = &l.weights[i * l.inputs..(i + 1) * l.inputs];
                let n = row.iter().zip(&cur).fold(l.biases[i], |acc, (w, a)| acc + w * a);
                next.push(l.transfer.eval(n));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    pub fn predict(&self, t: f64, let_value: f64, vd: f64) -> Prediction {
        let x = self.norm.normalize_input(t, let_value, vd);
        Prediction {
            current: self.norm.current.denormalize(self.forward(x)),
            extrapolated: self.norm.is_extrapolated(t, let_value, vd),
        }
    }

    /// Current in amperes at physical inputs.
    pub fn predict_current(&self, t: f64, let_value: f64, vd: f64) -> f64 {
        self.predict(t, let_value, vd).current
    }

    /// `J[k][p] = d out_k / d param_p` for a batch of normalized inputs.
    pub fn jacobian(&self, inputs: &[[f64; 3]]) -> Result<DMatrix<f64>, MlpError> {
        if inputs.is_empty() {
            return Err(MlpError::Shape("empty batch".into()));
        }
        let p = self.param_count();
        // Filled row-major then transposed into nalgebra's column-major layout.
        let mut data = vec![0.0; inputs.len() * p];
        let mut ws = Workspace::new(self);
        for (x, row) in inputs.iter().zip(data.chunks_exact_mut(p)) {
            self.jacobian_row(*x, &mut ws, row);
        }
        Ok(DMatrix::from_row_slice(inputs.len(), p, &data))
    }

    /// Forward plus reverse accumulation for one sample. Writes the gradient
    /// of the output into `row` and returns the output.
    pub(crate) fn jacobian_row(&self, x: [f64; 3], ws: &mut Workspace, row: &mut [f64]) -> f64 {
        let out = self.forward_recording(x, ws);

        // delta = d out / d net at the current layer, output layer first.
        let last = self.layers.len() - 1;
        ws.delta.clear();
        ws.delta.push(self.layers[last].transfer.deriv_from(ws.net[last][0], out));

        let mut offset = row.len();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            offset -= l.param_count();
            let (w_grad, b_grad) = row[offset..offset + l.param_count()].split_at_mut(l.weights.len());
            let prev = &ws.act[li];
            for i in 0..l.outputs {
                let d = ws.delta[i];
                for (g, a) in w_grad[i * l.inputs..(i + 1) * l.inputs].iter_mut().zip(prev) {
                    *g = d * a;
                }
                b_grad[i] = d;
            }
            if li > 0 {
                let below = &self.layers[li - 1];
                ws.delta_next.clear();
                for j in 0..l.inputs {
                    let back: f64 = (0..l.outputs).map(|i| l.weights[i * l.inputs + j] * ws.delta[i]).sum();
                    ws.delta_next.push(back * below.transfer.deriv_from(ws.net[li - 1][j], ws.act[li][j]));
                }
                std::mem::swap(&mut ws.delta, &mut ws.delta_next);
            }
        }
        out
    }

    fn forward_recording(&self, x: [f64; 3], ws: &mut Workspace) -> f64 {
        ws.act[0].clear();
        ws.act[0].extend_from_slice(&x);
        for (li, l) in self.layers.iter().enumerate() {
            let (below, above) = ws.act.split_at_mut(li + 1);
            let input = &below[li];
            let (net, act) = (&mut ws.net[li], &mut above[0]);
            net.clear();
            act.clear();
            for i in 0..l.outputs {
                let row = &l.weights[i * l.inputs..(i + 1) * l.inputs];
                let n = row.iter().zip(input.iter()).fold(l.biases[i], |acc, (w, a)| acc + w * a);
                net.push(n);
                act.push(l.transfer.eval(n));
            }
        }
        ws.act[self.layers.len()][0]
    }

    /// Writes the versioned text model file.
    pub fn serialize<W: Write>(&self, mut out: W) -> Result<(), MlpError> {
        let dims: Vec<String> = self.layer_dims().iter().map(|d| d.to_string()).collect();
        let tags: Vec<&str> = self.layers.iter().map(|l| l.transfer.name()).collect();
        writeln!(out, "{MAGIC} {FORMAT_VERSION}")?;
        writeln!(out, "dims {}", dims.join(" "))?;
        writeln!(out, "transfer {}", tags.join(" "))?;
        let n = &self.norm;
        for (name, c) in [("t", n.time), ("let", n.let_value), ("vd", n.vd), ("i", n.current)] {
            writeln!(out, "norm {name} {} {}", fmt_f64(c.min), fmt_f64(c.max))?;
        }
        for (k, l) in self.layers.iter().enumerate() {
            writeln!(out, "layer {} {} {}", k + 1, l.outputs, l.inputs)?;
            for row in l.weights.chunks(l.inputs) {
                writeln!(out, "w {}", join_f64(row))?;
            }
            writeln!(out, "b {}", join_f64(&l.biases))?;
        }
        writeln!(out, "end")?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.serialize(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("model text is ASCII")
    }

    pub fn deserialize<R: BufRead>(source: R) -> Result<Self, MlpError> {
        let mut lines = Lines::new(source);

        let header = lines.next_fields()?;
        if header.len() != 2 || header[0] != MAGIC {
            return Err(lines.err(format!("expected `{MAGIC} <version>` header")));
        }
        let version: u32 = header[1].parse().map_err(|_| lines.err("bad version number".into()))?;
        if version != FORMAT_VERSION {
            return Err(MlpError::Version { found: version, expected: FORMAT_VERSION });
        }

        let dims = lines.keyed("dims")?;
        let dims = dims
            .iter()
            .map(|d| d.parse::<usize>().map_err(|_| lines.err(format!("bad dimension `{d}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        if dims.len() < 2 {
            return Err(lines.err("need at least input and output dimensions".into()));
        }
        let tags = lines.keyed("transfer")?;
        if tags.len() != dims.len() - 1 {
            return Err(lines.err(format!("{} transfer tags for {} layers", tags.len(), dims.len() - 1)));
        }
        let transfers = tags.iter().map(|t| t.parse::<Transfer>()).collect::<Result<Vec<_>, _>>()?;

        let mut chans = Vec::with_capacity(4);
        for name in ["t", "let", "vd", "i"] {
            let f = lines.keyed("norm")?;
            if f.len() != 3 || f[0] != name {
                return Err(lines.err(format!("expected `norm {name} <min> <max>`")));
            }
            let (lo, hi) = (lines.num(&f[1])?, lines.num(&f[2])?);
            let name: &'static str = match name {
                "t" => "t",
                "let" => "let",
                "vd" => "vd",
                _ => "i",
            };
            chans.push(Channel::new(name, lo, hi).map_err(|e| lines.err(e.to_string()))?);
        }
        let norm = NormParams { time: chans[0], let_value: chans[1], vd: chans[2], current: chans[3] };

        let mut layers = Vec::new();
        for (k, (d, transfer)) in dims.windows(2).zip(transfers).enumerate() {
            let (inputs, outputs) = (d[0], d[1]);
            let head = lines.keyed("layer")?;
            let expect = [(k + 1).to_string(), outputs.to_string(), inputs.to_string()];
            if head != expect {
                return Err(lines.err(format!("expected `layer {}`", expect.join(" "))));
            }
            let mut weights = Vec::with_capacity(inputs * outputs);
            for _ in 0..outputs {
                let row = lines.keyed("w")?;
                if row.len() != inputs {
                    return Err(lines.err(format!("weight row has {} values, expected {inputs}", row.len())));
                }
                for v in &row {
                    weights.push(lines.num(v)?);
                }
            }
            let b = lines.keyed("b")?;
            if b.len() != outputs {
                return Err(lines.err(format!("bias row has {} values, expected {outputs}", b.len())));
            }
            let biases = b.iter().map(|v| lines.num(v)).collect::<Result<Vec<_>, _>>()?;
            layers.push(Layer::new(inputs, outputs, weights, biases, transfer)?);
        }
        lines.keyed("end")?;
        Self::new(layers, norm)
    }
}

/// Scratch buffers for [`MlpModel::jacobian_row`].
pub(crate) struct Workspace {
    net: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(m: &MlpModel) -> Self {
        let w = m.widest();
        Self {
            net: m.layers.iter().map(|l| Vec::with_capacity(l.outputs)).collect(),
            act: std::iter::once(Vec::with_capacity(INPUTS))
                .chain(m.layers.iter().map(|l| Vec::with_capacity(l.outputs)))
                .collect(),
            delta: Vec::with_capacity(w),
            delta_next: Vec::with_capacity(w),
        }
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn join_f64(vals: &[f64]) -> String {
    vals.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ")
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn new(r: R) -> Self {
        Self { inner: r.lines(), line: 0 }
    }

    fn err(&self, message: String) -> MlpError {
        MlpError::Format { line: self.line, message }
    }

    fn next_fields(&mut self) -> Result<Vec<String>, MlpError> {
        loop {
            self.line += 1;
            match self.inner.next() {
                None => return Err(self.err("unexpected end of model file".into())),
                Some(line) => {
                    let line = line?;
                    let trimmed = line.trim();
                    if trimmed.is_empty() || trimmed.starts_with('#') {
                        continue;
                    }
                    return Ok(trimmed.split_whitespace().map(str::to_string).collect());
                }
            }
        }
    }

    /// Next line, which must start with `key`; returns the remaining fields.
    fn keyed(&mut self, key: &str) -> Result<Vec<String>, MlpError> {
        let mut f = self.next_fields()?;
        if f[0] != key {
            return Err(self.err(format!("expected `{key}`, found `{}`", f[0])));
        }
        f.remove(0);
        Ok(f)
    }

    fn num(&self, s: &str) -> Result<f64, MlpError> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(format!("bad number `{s}`")))
    }
}
