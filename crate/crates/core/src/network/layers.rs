//! 1-D convolution / dense layers with explicit backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Length-preserving 1-D convolution (zero padding, stride 1).
///
/// `weight` is laid out `[out_channels][in_channels][kernel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Fully connected layer, `weight` laid out `[outputs][inputs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn glorot<R: Rng>(rng: &mut R, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

impl Conv1d {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let n = out_channels * in_channels * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: glorot(rng, n, in_channels * kernel, out_channels * kernel),
            bias: vec![0.0; out_channels],
        }
    }

    fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Valid output range `[lo, hi)` for kernel tap `j` over length `len`.
    fn tap_range(&self, j: usize, len: usize) -> (usize, usize, isize) {
        let shift = j as isize - self.pad_left() as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (len as isize - shift).min(len as isize).max(0) as usize;
        (lo, hi.max(lo), shift)
    }

    pub fn forward(&self, input: &[f64], len: usize, out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.in_channels * len);
        debug_assert_eq!(out.len(), self.out_channels * len);
        for o in 0..self.out_channels {
            let row = &mut out[o * len..(o + 1) * len];
            row.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let x = &input[i * len..(i + 1) * len];
                let w = &self.weight[(o * self.in_channels + i) * self.kernel..][..self.kernel];
                for (j, &wj) in w.iter().enumerate() {
                    let (lo, hi, shift) = self.tap_range(j, len);
                    let src = &x[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (r, s) in row[lo..hi].iter_mut().zip(src) {
                        *r += wj * s;
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients into `grad` and, when requested,
    /// writes the input gradient into `grad_input` (overwriting it).
    pub fn backward(
        &self,
        input: &[f64],
        len: usize,
        grad_out: &[f64],
        grad: &mut Conv1d,
        grad_input: Option<&mut [f64]>,
    ) {
        for o in 0..self.out_channels {
            let g = &grad_out[o * len..(o + 1) * len];
            grad.bias[o] += g.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let x = &input[i * len..(i + 1) * len];
                let base = (o * self.in_channels + i) * self.kernel;
                for j in 0..self.kernel {
                    let (lo, hi, shift) = self.tap_range(j, len);
                    let src = &x[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    grad.weight[base + j] += dot(&g[lo..hi], src);
                }
            }
        }
        if let Some(gin) = grad_input {
            gin.fill(0.0);
            for o in 0..self.out_channels {
                let g = &grad_out[o * len..(o + 1) * len];
                for i in 0..self.in_channels {
                    let dst = &mut gin[i * len..(i + 1) * len];
                    let w = &self.weight[(o * self.in_channels + i) * self.kernel..][..self.kernel];
                    for (j, &wj) in w.iter().enumerate() {
                        let (lo, hi, shift) = self.tap_range(j, len);
                        let d = &mut dst[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                        for (di, gi) in d.iter_mut().zip(&g[lo..hi]) {
                            *di += wj * gi;
                        }
                    }
                }
            }
        }
    }
}

impl Dense {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: glorot(rng, inputs * outputs, inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, input: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            *y = self.bias[o] + dot(w, input);
        }
    }

    pub fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        grad: &mut Dense,
        grad_input: Option<&mut [f64]>,
    ) {
        for (o, &g) in grad_out.iter().enumerate() {
            grad.bias[o] += g;
            if g == 0.0 {
                continue;
            }
            let gw = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for (w, x) in gw.iter_mut().zip(input) {
                *w += g * x;
            }
        }
        if let Some(gin) = grad_input {
            gin.fill(0.0);
            for (o, &g) in grad_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                for (d, wi) in gin.iter_mut().zip(w) {
                    *d += g * wi;
                }
            }
        }
    }
}

/// Convolution stack + ReLU hidden layer + linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cnn {
    pub input_len: usize,
    pub convs: Vec<Conv1d>,
    pub hidden: Dense,
    pub output: Dense,
}

/// Activations recorded by [`Cnn::forward_trace`]: the input, every
/// post-ReLU conv output, the post-ReLU hidden layer and the raw output.
#[derive(Debug, Clone)]
pub struct Trace {
    pub acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace holds the output")
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn relu_mask(grad: &mut [f64], act: &[f64]) {
    for (g, a) in grad.iter_mut().zip(act) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

impl Cnn {
    pub fn new<R: Rng>(
        input_len: usize,
        channels: &[usize],
        kernels: &[usize],
        hidden: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let mut convs = Vec::with_capacity(channels.len());
        let mut in_ch = 1;
        for (&c, &k) in channels.iter().zip(kernels) {
            convs.push(Conv1d::new(in_ch, c, k, rng));
            in_ch = c;
        }
        let hidden_layer = Dense::new(in_ch * input_len, hidden, rng);
        let output = Dense::new(hidden, outputs, rng);
        Self {
            input_len,
            convs,
            hidden: hidden_layer,
            output,
        }
    }

    /// Same shape, every parameter zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for c in &self.convs {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        v.extend([
            &self.hidden.weight[..],
            &self.hidden.bias[..],
            &self.output.weight[..],
            &self.output.bias[..],
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v.push(&mut self.hidden.weight);
        v.push(&mut self.hidden.bias);
        v.push(&mut self.output.weight);
        v.push(&mut self.output.bias);
        v
    }

    /// Every tensor has the length its declared dimensions imply and the
    /// layers chain (used to vet deserialized weights).
    pub fn is_well_formed(&self) -> bool {
        let mut in_ch = 1;
        for c in &self.convs {
            if c.in_channels != in_ch
                || c.kernel == 0
                || c.weight.len() != c.out_channels * c.in_channels * c.kernel
                || c.bias.len() != c.out_channels
            {
                return false;
            }
            in_ch = c.out_channels;
        }
        let dense_ok = |d: &Dense| d.weight.len() == d.inputs * d.outputs && d.bias.len() == d.outputs;
        dense_ok(&self.hidden)
            && dense_ok(&self.output)
            && self.hidden.inputs == in_ch * self.input_len
            && self.output.inputs == self.hidden.outputs
    }

    pub fn num_outputs(&self) -> usize {
        self.output.outputs
    }

    pub fn forward_trace(&self, input: &[f64]) -> Trace {
        let len = self.input_len;
        let mut acts = Vec::with_capacity(self.convs.len() + 3);
        acts.push(input.to_vec());
        for conv in &self.convs {
            let mut out = vec![0.0; conv.out_channels * len];
            conv.forward(acts.last().unwrap(), len, &mut out);
            relu_in_place(&mut out);
            acts.push(out);
        }
        let mut hidden = vec![0.0; self.hidden.outputs];
        self.hidden.forward(acts.last().unwrap(), &mut hidden);
        relu_in_place(&mut hidden);
        acts.push(hidden);
        let mut out = vec![0.0; self.output.outputs];
        self.output.forward(acts.last().unwrap(), &mut out);
        acts.push(out);
        Trace { acts }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut trace = self.forward_trace(input);
        trace.acts.pop().unwrap()
    }

    /// Backpropagates `grad_output` (d loss / d raw output) through a
    /// recorded trace, accumulating into `grads`.
    pub fn backward(&self, trace: &Trace, grad_output: &[f64], grads: &mut Cnn) {
        let n = self.convs.len();
        let len = self.input_len;
        // acts: [input, conv_1..conv_n, hidden, output]
        let mut g_hidden = vec![0.0; self.hidden.outputs];
        self.output
            .backward(&trace.acts[n + 1], grad_output, &mut grads.output, Some(&mut g_hidden));
        relu_mask(&mut g_hidden, &trace.acts[n + 1]);

        let mut g = vec![0.0; self.hidden.inputs];
        self.hidden
            .backward(&trace.acts[n], &g_hidden, &mut grads.hidden, Some(&mut g));

        for k in (0..n).rev() {
            relu_mask(&mut g, &trace.acts[k + 1]);
            let conv = &self.convs[k];
            if k == 0 {
                conv.backward(&trace.acts[0], len, &g, &mut grads.convs[0], None);
            } else {
                let mut g_in = vec![0.0; conv.in_channels * len];
                conv.backward(&trace.acts[k], len, &g, &mut grads.convs[k], Some(&mut g_in));
                g = g_in;
            }
        }
    }
}
