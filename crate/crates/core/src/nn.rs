//! Small dense and gated-recurrent networks with hand-written reverse-mode
//! gradients, plus the Adam optimizer.
//!
//! Parameters live in one flat vector per network so optimizers, target
//! averaging and checkpoints can treat every network the same way. A forward
//! pass returns a tape; the tape remembers the parameter version it was
//! recorded against and `backward` refuses it once the parameters change.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Identifies one parameter state of one network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stamp {
    id: u64,
    version: u64,
}

#[derive(Debug)]
struct Versioned {
    id: u64,
    version: u64,
}

impl Versioned {
    fn new() -> Self {
        Self { id: fresh_id(), version: 0 }
    }

    fn stamp(&self) -> Stamp {
        Stamp { id: self.id, version: self.version }
    }

    fn bump(&mut self) {
        self.version += 1;
    }

    fn check(&self, tape: Stamp) -> Result<()> {
        if tape.id != self.id || tape.version != self.version {
            return Err(Error::StaleTape { tape: tape.version, current: self.version });
        }
        Ok(())
    }
}

impl Clone for Versioned {
    // a clone is a different network; tapes of the original must not apply
    fn clone(&self) -> Self {
        Self::new()
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

fn uniform(rng: &mut impl Rng, out: &mut Vec<f64>, n: usize, fan_in: usize) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    out.extend((0..n).map(|_| rng.random_range(-bound..=bound)));
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += W x` with `W` stored row-major as `rows x cols`.
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dw += g x^T` and `dx += W^T g`.
fn matvec_backward(w: &[f64], x: &[f64], g: &[f64], dw: &mut [f64], dx: &mut [f64]) {
    let cols = x.len();
    for ((gi, row), drow) in g.iter().zip(w.chunks_exact(cols)).zip(dw.chunks_exact_mut(cols)) {
        if *gi == 0.0 {
            continue;
        }
        for j in 0..cols {
            drow[j] += gi * x[j];
            dx[j] += gi * row[j];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Fully connected feedforward network.
#[derive(Debug, Clone)]
pub struct DenseNet {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    ver: Versioned,
}

/// Intermediates of one `DenseNet` forward pass.
#[derive(Debug, Clone)]
pub struct DenseTape {
    stamp: Stamp,
    /// Layer inputs followed by the network output.
    values: Vec<Vec<f64>>,
}

impl DenseTape {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("tape holds at least the input")
    }
}

impl DenseNet {
    /// `sizes` lists the input width then each layer's width; one activation
    /// per layer.
    pub fn new(sizes: &[usize], activations: &[Activation], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes, activations)?;
        net.params.clear();
        for w in sizes.windows(2) {
            uniform(rng, &mut net.params, w[0] * w[1] + w[1], w[0]);
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], activations: &[Activation]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad layer sizes {sizes:?}")));
        }
        check_len(sizes.len() - 1, activations.len())?;
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; n],
            ver: Versioned::new(),
        })
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.ver.bump();
        &mut self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len(self.params.len(), p.len())?;
        self.params_mut().copy_from_slice(p);
        Ok(())
    }

    /// `(W, b)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let off = self.offset(l);
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        (&self.params[off..off + i * o], &self.params[off + i * o..off + i * o + o])
    }

    fn offset(&self, l: usize) -> usize {
        self.sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<DenseTape> {
        check_len(self.input_size(), x.len())?;
        let mut values = Vec::with_capacity(self.sizes.len());
        values.push(x.to_vec());
        for (l, act) in self.activations.iter().enumerate() {
            let (w, b) = self.layer(l);
            let mut z = b.to_vec();
            matvec_acc(w, values.last().unwrap(), &mut z);
            for v in z.iter_mut() {
                *v = act.apply(*v);
            }
            values.push(z);
        }
        Ok(DenseTape { stamp: self.ver.stamp(), values })
    }

    /// Adds parameter gradients into `grad` and returns the input gradient.
    pub fn backward_into(&self, tape: &DenseTape, dy: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        self.ver.check(tape.stamp)?;
        check_len(self.output_size(), dy.len())?;
        check_len(self.params.len(), grad.len())?;
        let mut g = dy.to_vec();
        for l in (0..self.activations.len()).rev() {
            let out = &tape.values[l + 1];
            for (gi, a) in g.iter_mut().zip(out) {
                *gi *= self.activations[l].slope(*a);
            }
            let input = &tape.values[l];
            let off = self.offset(l);
            let wlen = input.len() * out.len();
            let (w, _) = self.layer(l);
            let (dw, db) = grad[off..off + wlen + out.len()].split_at_mut(wlen);
            let mut dx = vec![0.0; input.len()];
            matvec_backward(w, input, &g, dw, &mut dx);
            for (d, gi) in db.iter_mut().zip(&g) {
                *d += gi;
            }
            g = dx;
        }
        Ok(g)
    }

    /// Parameter gradient and input gradient of `dy · y`.
    pub fn backward(&self, tape: &DenseTape, dy: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let dx = self.backward_into(tape, dy, &mut grad)?;
        Ok((grad, dx))
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r * h) + b_h)
/// h' = z * h + (1 - z) * h~
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    input: usize,
    hidden: usize,
    params: Vec<f64>,
    ver: Versioned,
}

/// Intermediates of one GRU step.
#[derive(Debug, Clone)]
pub struct GruTape {
    stamp: Stamp,
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    h: Vec<f64>,
}

impl GruTape {
    pub fn output(&self) -> &[f64] {
        &self.h
    }
}

/// Gradients of one GRU step.
#[derive(Debug, Clone)]
pub struct GruGrads {
    pub dh_prev: Vec<f64>,
    pub dx: Vec<f64>,
}

// gate blocks in the flat vector: [W_z U_z b_z | W_r U_r b_r | W_h U_h b_h]
const GATE_Z: usize = 0;
const GATE_R: usize = 1;
const GATE_H: usize = 2;

impl GruCell {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut cell = Self::zeros(input, hidden)?;
        cell.params.clear();
        for _ in 0..3 {
            uniform(rng, &mut cell.params, hidden * input, input);
            uniform(rng, &mut cell.params, hidden * hidden, hidden);
            uniform(rng, &mut cell.params, hidden, hidden);
        }
        Ok(cell)
    }

    pub fn zeros(input: usize, hidden: usize) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::InvalidParameter("GRU sizes must be positive".into()));
        }
        Ok(Self {
            input,
            hidden,
            params: vec![0.0; 3 * (hidden * input + hidden * hidden + hidden)],
            ver: Versioned::new(),
        })
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.ver.bump();
        &mut self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len(self.params.len(), p.len())?;
        self.params_mut().copy_from_slice(p);
        Ok(())
    }

    fn block_len(&self) -> usize {
        self.hidden * self.input + self.hidden * self.hidden + self.hidden
    }

    /// Ranges of `(W, U, b)` for one gate.
    fn gate(&self, g: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
        let (n, h) = (self.input, self.hidden);
        let base = g * self.block_len();
        let w = base..base + h * n;
        let u = w.end..w.end + h * h;
        let b = u.end..u.end + h;
        (w, u, b)
    }

    fn preact(&self, g: usize, x: &[f64], h: &[f64]) -> Vec<f64> {
        let (w, u, b) = self.gate(g);
        let mut z = self.params[b].to_vec();
        matvec_acc(&self.params[w], x, &mut z);
        matvec_acc(&self.params[u], h, &mut z);
        z
    }

    pub fn forward(&self, h_prev: &[f64], x: &[f64]) -> Result<GruTape> {
        check_len(self.input, x.len())?;
        check_len(self.hidden, h_prev.len())?;
        let z: Vec<f64> = self.preact(GATE_Z, x, h_prev).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = self.preact(GATE_R, x, h_prev).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = self.preact(GATE_H, x, &rh).into_iter().map(f64::tanh).collect();
        let h = (0..self.hidden).map(|i| z[i] * h_prev[i] + (1.0 - z[i]) * cand[i]).collect();
        Ok(GruTape {
            stamp: self.ver.stamp(),
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            cand,
            h,
        })
    }

    /// Adds parameter gradients of `dh · h'` into `grad`.
    pub fn backward_into(&self, tape: &GruTape, dh: &[f64], grad: &mut [f64]) -> Result<GruGrads> {
        self.ver.check(tape.stamp)?;
        check_len(self.hidden, dh.len())?;
        check_len(self.params.len(), grad.len())?;
        let nh = self.hidden;
        let mut dh_prev: Vec<f64> = (0..nh).map(|i| dh[i] * tape.z[i]).collect();
        let mut dx = vec![0.0; self.input];

        // candidate
        let da_h: Vec<f64> =
            (0..nh).map(|i| dh[i] * (1.0 - tape.z[i]) * (1.0 - tape.cand[i] * tape.cand[i])).collect();
        let rh: Vec<f64> = tape.r.iter().zip(&tape.h_prev).map(|(a, b)| a * b).collect();
        let mut d_rh = vec![0.0; nh];
        let (w, u, b) = self.gate(GATE_H);
        self.gate_backward(&da_h, &tape.x, &rh, (w, u, b), grad, &mut dx, &mut d_rh);
        for i in 0..nh {
            dh_prev[i] += d_rh[i] * tape.r[i];
        }

        // update gate
        let da_z: Vec<f64> = (0..nh)
            .map(|i| dh[i] * (tape.h_prev[i] - tape.cand[i]) * tape.z[i] * (1.0 - tape.z[i]))
            .collect();
        self.gate_backward(&da_z, &tape.x, &tape.h_prev, self.gate(GATE_Z), grad, &mut dx, &mut dh_prev);

        // reset gate
        let da_r: Vec<f64> =
            (0..nh).map(|i| d_rh[i] * tape.h_prev[i] * tape.r[i] * (1.0 - tape.r[i])).collect();
        self.gate_backward(&da_r, &tape.x, &tape.h_prev, self.gate(GATE_R), grad, &mut dx, &mut dh_prev);

        Ok(GruGrads { dh_prev, dx })
    }

    #[allow(clippy::too_many_arguments)]
    fn gate_backward(
        &self,
        da: &[f64],
        x: &[f64],
        h: &[f64],
        (w, u, b): (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>),
        grad: &mut [f64],
        dx: &mut [f64],
        dh: &mut [f64],
    ) {
        matvec_backward(&self.params[w.clone()], x, da, &mut grad[w], dx);
        matvec_backward(&self.params[u.clone()], h, da, &mut grad[u], dh);
        for (g, d) in grad[b].iter_mut().zip(da) {
            *g += d;
        }
    }

    pub fn backward(&self, tape: &GruTape, dh: &[f64]) -> Result<(Vec<f64>, GruGrads)> {
        let mut grad = vec![0.0; self.params.len()];
        let g = self.backward_into(tape, dh, &mut grad)?;
        Ok((grad, g))
    }
}

/// GRU run over a sequence from a zero state; its final hidden state is
/// concatenated with extra inputs and fed to a dense head.
#[derive(Debug, Clone)]
pub struct SequenceNet {
    pub gru: GruCell,
    pub head: DenseNet,
}

#[derive(Debug, Clone)]
pub struct SequenceTape {
    steps: Vec<GruTape>,
    head: DenseTape,
}

impl SequenceTape {
    pub fn output(&self) -> &[f64] {
        self.head.output()
    }
}

/// Gradients of a `SequenceNet` output.
#[derive(Debug, Clone)]
pub struct SequenceGrads {
    pub dseq: Vec<Vec<f64>>,
    pub dextra: Vec<f64>,
}

impl SequenceNet {
    /// Head layers after the concatenated `[h, extra]` input.
    pub fn new(
        input: usize,
        hidden: usize,
        extra: usize,
        head_sizes: &[usize],
        head_activations: &[Activation],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let gru = GruCell::new(input, hidden, rng)?;
        let mut sizes = vec![hidden + extra];
        sizes.extend_from_slice(head_sizes);
        let head = DenseNet::new(&sizes, head_activations, rng)?;
        Ok(Self { gru, head })
    }

    pub fn extra_size(&self) -> usize {
        self.head.input_size() - self.gru.hidden_size()
    }

    pub fn param_len(&self) -> usize {
        self.gru.params().len() + self.head.params().len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.gru.params().to_vec();
        p.extend_from_slice(self.head.params());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len(self.param_len(), p.len())?;
        let (a, b) = p.split_at(self.gru.params().len());
        self.gru.set_params(a)?;
        self.head.set_params(b)
    }

    /// Applies `f` to the gru and head parameter slices in turn.
    pub fn update(&mut self, mut f: impl FnMut(&mut [f64], std::ops::Range<usize>)) {
        let n = self.gru.params().len();
        f(self.gru.params_mut(), 0..n);
        let m = self.head.params().len();
        f(self.head.params_mut(), n..n + m);
    }

    pub fn forward(&self, seq: &[Vec<f64>], extra: &[f64]) -> Result<SequenceTape> {
        check_len(self.extra_size(), extra.len())?;
        if seq.is_empty() {
            return Err(Error::InvalidParameter("empty input sequence".into()));
        }
        let mut h = vec![0.0; self.gru.hidden_size()];
        let mut steps = Vec::with_capacity(seq.len());
        for x in seq {
            let t = self.gru.forward(&h, x)?;
            h = t.h.clone();
            steps.push(t);
        }
        h.extend_from_slice(extra);
        let head = self.head.forward(&h)?;
        Ok(SequenceTape { steps, head })
    }

    pub fn backward_into(&self, tape: &SequenceTape, dy: &[f64], grad: &mut [f64]) -> Result<SequenceGrads> {
        check_len(self.param_len(), grad.len())?;
        let (ggru, ghead) = grad.split_at_mut(self.gru.params().len());
        let mut din = self.head.backward_into(&tape.head, dy, ghead)?;
        let dextra = din.split_off(self.gru.hidden_size());
        let mut dh = din;
        let mut dseq = vec![Vec::new(); tape.steps.len()];
        for (k, t) in tape.steps.iter().enumerate().rev() {
            let g = self.gru.backward_into(t, &dh, ggru)?;
            dseq[k] = g.dx;
            dh = g.dh_prev;
        }
        Ok(SequenceGrads { dseq, dextra })
    }

    pub fn backward(&self, tape: &SequenceTape, dy: &[f64]) -> Result<(Vec<f64>, SequenceGrads)> {
        let mut grad = vec![0.0; self.param_len()];
        let g = self.backward_into(tape, dy, &mut grad)?;
        Ok((grad, g))
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    /// One descent step on `params` (offset `at` into the accumulators).
    /// Call [`AdamState::tick`] once per logical step before the slices.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64], at: std::ops::Range<usize>) -> Result<()> {
        check_len(at.len(), params.len())?;
        check_len(params.len(), grads.len())?;
        if at.end > self.m.len() {
            return Err(Error::Dimension { expected: self.m.len(), got: at.end });
        }
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), k) in params.iter_mut().zip(grads).zip(at) {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            *p -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn tick(&mut self) {
        self.step += 1;
    }

    /// Full step: tick, then update every parameter.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len(self.m.len(), params.len())?;
        self.tick();
        self.apply(params, grads, 0..params.len())
    }
}

/// Named tensor for checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_len(shape.iter().product(), data.len())?;
        Ok(Self { name: name.into(), shape, data })
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        let n = data.len();
        Self { name: name.into(), shape: vec![n], data }
    }
}

/// Text checkpoint: per tensor a header line `name d0 d1 ...` followed by one
/// line of space-separated values. Values use Rust's shortest round-trip
/// formatting, so reading back is exact.
pub fn write_tensors(mut w: impl Write, tensors: &[Tensor]) -> Result<()> {
    for t in tensors {
        if t.name.is_empty() || t.name.contains(char::is_whitespace) {
            return Err(Error::InvalidParameter(format!("bad tensor name {:?}", t.name)));
        }
        write!(w, "{}", t.name)?;
        for d in &t.shape {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
        let vals: Vec<String> = t.data.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", vals.join(" "))?;
    }
    Ok(())
}

pub fn read_tensors(r: impl BufRead) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut lines = r.lines();
    while let Some(header) = lines.next() {
        let header = header?;
        if header.trim().is_empty() {
            continue;
        }
        let mut parts = header.split_whitespace();
        let name = parts.next().unwrap().to_string();
        let shape = parts
            .map(|p| p.parse::<usize>().map_err(|e| Error::Config(format!("tensor {name}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let body = lines.next().ok_or_else(|| Error::Config(format!("tensor {name}: missing values")))??;
        let data = body
            .split_whitespace()
            .map(|p| p.parse::<f64>().map_err(|e| Error::Config(format!("tensor {name}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(Tensor::new(name, shape, data)?);
    }
    Ok(out)
}
