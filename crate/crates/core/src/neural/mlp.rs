//! Fully-connected network: `Dense -> BN -> ReLU` per hidden layer and a
//! linear output layer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::tape::{Gradients, Tape, Var};
use crate::rng::{Domain, StreamRng};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NCALMLP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// How the output layer starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputInit {
    /// Same fan-in scaled uniform draw as the hidden layers.
    Random,
    /// All zeros, so the network initially outputs exactly zero.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParameters {
    /// `[input, hidden..., output]`.
    pub layer_dims: Vec<usize>,
    /// Layer `i` maps `x (batch x dims[i])` to `x W + b`, `W` is `dims[i] x dims[i+1]`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub bn_gamma: Vec<Array1<f64>>,
    pub bn_beta: Vec<Array1<f64>>,
    pub bn_running_mean: Vec<Array1<f64>>,
    pub bn_running_var: Vec<Array1<f64>>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub mode: Mode,
}

/// Batch statistics observed by one train-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Biased (population) variance.
    pub var: Array1<f64>,
    pub rows: usize,
}

/// Tape handles for the trainable tensors of one network.
#[derive(Debug, Clone)]
pub struct MlpHandles {
    weights: Vec<Var>,
    biases: Vec<Var>,
    gamma: Vec<Var>,
    beta: Vec<Var>,
}

/// Gradients laid out like the trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub bn_gamma: Vec<Array1<f64>>,
    pub bn_beta: Vec<Array1<f64>>,
}

impl MlpGrads {
    /// Same order as [`MlpParameters::trainable_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        for (g, b) in self.bn_gamma.iter().zip(&self.bn_beta) {
            out.push(g.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Elementwise sum, for combining shards.
    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
        for (a, b) in self.bn_gamma.iter_mut().zip(&other.bn_gamma) {
            *a += b;
        }
        for (a, b) in self.bn_beta.iter_mut().zip(&other.bn_beta) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|a| *a *= factor);
        self.biases.iter_mut().for_each(|a| *a *= factor);
        self.bn_gamma.iter_mut().for_each(|a| *a *= factor);
        self.bn_beta.iter_mut().for_each(|a| *a *= factor);
    }
}

impl MlpParameters {
    /// Uniform fan-in initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases, identity batch norm.
    pub fn new(layer_dims: &[usize], seed: u64, output: OutputInit) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {layer_dims:?}")));
        }
        let n_layers = layer_dims.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (fan_in, fan_out) = (layer_dims[i], layer_dims[i + 1]);
            let is_output = i + 1 == n_layers;
            let w = if is_output && output == OutputInit::Zero {
                Array2::zeros((fan_in, fan_out))
            } else {
                let mut rng = StreamRng::for_key(seed, Domain::WeightInit, 0, i, 0);
                let bound = (6.0 / fan_in as f64).sqrt();
                Array2::from_shape_simple_fn((fan_in, fan_out), || rng.uniform(-bound, bound))
            };
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        let hidden: Vec<usize> = layer_dims[1..n_layers].to_vec();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            bn_gamma: hidden.iter().map(|&d| Array1::ones(d)).collect(),
            bn_beta: hidden.iter().map(|&d| Array1::zeros(d)).collect(),
            bn_running_mean: hidden.iter().map(|&d| Array1::zeros(d)).collect(),
            bn_running_var: hidden.iter().map(|&d| Array1::ones(d)).collect(),
            bn_momentum: BN_MOMENTUM,
            bn_eps: BN_EPS,
            mode: Mode::Train,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two dims")
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
            + 2 * self.bn_gamma.iter().map(|g| g.len()).sum::<usize>()
    }

    /// Checks the structural invariants (chained dims, positive running variance).
    pub fn validate(&self) -> Result<()> {
        let n = self.layer_dims.len().saturating_sub(1);
        let bad = |msg: String| Err(Error::Format(msg));
        if n == 0 || self.weights.len() != n || self.biases.len() != n {
            return bad("layer count does not match layer_dims".into());
        }
        for i in 0..n {
            if self.weights[i].dim() != (self.layer_dims[i], self.layer_dims[i + 1])
                || self.biases[i].len() != self.layer_dims[i + 1]
            {
                return bad(format!("layer {i} does not chain with layer_dims"));
            }
        }
        let hidden = n - 1;
        for v in [
            &self.bn_gamma,
            &self.bn_beta,
            &self.bn_running_mean,
            &self.bn_running_var,
        ] {
            if v.len() != hidden {
                return bad("batch-norm state does not match hidden layers".into());
            }
        }
        for i in 0..hidden {
            let d = self.layer_dims[i + 1];
            if [
                &self.bn_gamma[i],
                &self.bn_beta[i],
                &self.bn_running_mean[i],
                &self.bn_running_var[i],
            ]
            .iter()
            .any(|v| v.len() != d)
            {
                return bad(format!("batch-norm width mismatch in hidden layer {i}"));
            }
            if self.bn_running_var[i].iter().any(|&v| !(v > 0.0)) {
                return bad(format!("non-positive running variance in hidden layer {i}"));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dims("mlp_forward", x.dim(), (x.nrows(), self.input_dim())));
        }
        Ok(())
    }

    /// Forward pass without a tape. In train mode batch statistics are used
    /// and the running statistics are updated.
    pub fn forward(&mut self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if self.mode == Mode::Eval {
            return self.forward_eval(x);
        }
        self.check_input(x)?;
        let n_layers = self.n_layers();
        let mut h = x.to_owned();
        let mut stats = Vec::with_capacity(n_layers - 1);
        for i in 0..n_layers {
            let mut z = h.dot(&self.weights[i]) + &self.biases[i];
            if i + 1 < n_layers {
                let rows = z.nrows();
                let mean = z.sum_axis(Axis(0)) / rows as f64;
                z -= &mean;
                let var = z.mapv(|c| c * c).sum_axis(Axis(0)) / rows as f64;
                let inv_std = var.mapv(|s| 1.0 / (s + self.bn_eps).sqrt());
                z = z * &(inv_std * &self.bn_gamma[i]) + &self.bn_beta[i];
                z.mapv_inplace(relu);
                stats.push(BatchStats { mean, var, rows });
            }
            h = z;
        }
        self.apply_batch_stats(&stats);
        Ok(h)
    }

    /// Forward pass with running statistics, regardless of `mode`.
    pub fn forward_eval(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let n_layers = self.n_layers();
        let mut h = x.to_owned();
        for i in 0..n_layers {
            let mut z = h.dot(&self.weights[i]) + &self.biases[i];
            if i + 1 < n_layers {
                let (scale, shift) = self.eval_affine(i);
                z = z * &scale + &shift;
                z.mapv_inplace(relu);
            }
            h = z;
        }
        Ok(h)
    }

    /// Eval-mode batch norm folded into `z * scale + shift`.
    fn eval_affine(&self, i: usize) -> (Array1<f64>, Array1<f64>) {
        let inv_std = self.bn_running_var[i].mapv(|v| 1.0 / (v + self.bn_eps).sqrt());
        let scale = &inv_std * &self.bn_gamma[i];
        let shift = &self.bn_beta[i] - &(&self.bn_running_mean[i] * &scale);
        (scale, shift)
    }

    /// Exponential moving average of batch statistics (unbiased variance).
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) {
        let m = self.bn_momentum;
        for (i, s) in stats.iter().enumerate() {
            let unbias = if s.rows > 1 {
                s.rows as f64 / (s.rows - 1) as f64
            } else {
                1.0
            };
            self.bn_running_mean[i] = &self.bn_running_mean[i] * m + &s.mean * (1.0 - m);
            self.bn_running_var[i] = &self.bn_running_var[i] * m + &s.var * ((1.0 - m) * unbias);
        }
    }

    /// Records the trainable tensors on `tape`.
    pub fn register(&self, tape: &mut Tape) -> MlpHandles {
        let row = |v: &Array1<f64>| v.clone().insert_axis(Axis(0));
        MlpHandles {
            weights: self.weights.iter().map(|w| tape.param(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.param(row(b))).collect(),
            gamma: self.bn_gamma.iter().map(|g| tape.param(row(g))).collect(),
            beta: self.bn_beta.iter().map(|b| tape.param(row(b))).collect(),
        }
    }

    /// Taped forward pass. In train mode the batch statistics are returned
    /// for [`MlpParameters::apply_batch_stats`]; the parameters are not touched.
    pub fn forward_taped(&self, tape: &mut Tape, handles: &MlpHandles, x: Var) -> Result<(Var, Vec<BatchStats>)> {
        let (rows, cols) = tape.shape(x);
        if cols != self.input_dim() {
            return Err(Error::dims("mlp_forward", (rows, cols), (rows, self.input_dim())));
        }
        let n_layers = self.n_layers();
        let mut h = x;
        let mut stats = Vec::new();
        for i in 0..n_layers {
            let z = tape.matmul(h, handles.weights[i])?;
            let mut z = tape.add_row(z, handles.biases[i])?;
            if i + 1 < n_layers {
                let normalized = match self.mode {
                    Mode::Train => {
                        let (n, mean, var) = tape.batch_normalize(z, self.bn_eps);
                        stats.push(BatchStats { mean, var, rows });
                        n
                    }
                    Mode::Eval => {
                        let inv_std = self.bn_running_var[i]
                            .mapv(|v| 1.0 / (v + self.bn_eps).sqrt())
                            .insert_axis(Axis(0));
                        let neg_mean = self.bn_running_mean[i].mapv(|m| -m).insert_axis(Axis(0));
                        let neg_mean = tape.constant(neg_mean);
                        let inv_std = tape.constant(inv_std);
                        let centered = tape.add_row(z, neg_mean)?;
                        tape.mul_row(centered, inv_std)?
                    }
                };
                let scaled = tape.mul_row(normalized, handles.gamma[i])?;
                let shifted = tape.add_row(scaled, handles.beta[i])?;
                z = tape.relu(shifted);
            }
            h = z;
        }
        Ok((h, stats))
    }

    pub fn grads(&self, handles: &MlpHandles, grads: &Gradients) -> MlpGrads {
        let row = |v: Var| grads.get(v).index_axis_move(Axis(0), 0);
        MlpGrads {
            weights: handles.weights.iter().map(|&w| grads.get(w)).collect(),
            biases: handles.biases.iter().map(|&b| row(b)).collect(),
            bn_gamma: handles.gamma.iter().map(|&g| row(g)).collect(),
            bn_beta: handles.beta.iter().map(|&b| row(b)).collect(),
        }
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            weights: self.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            bn_gamma: self.bn_gamma.iter().map(|g| Array1::zeros(g.len())).collect(),
            bn_beta: self.bn_beta.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    /// Trainable tensors: `W_0, b_0, W_1, b_1, ..., γ_0, β_0, γ_1, β_1, ...`.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        for (g, b) in self.bn_gamma.iter_mut().zip(self.bn_beta.iter_mut()) {
            out.push(g.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Versioned little-endian checkpoint:
    ///
    /// ```text
    /// magic b"NCALMLP\0" | version u32 | n_dims u32 | dims u64 * n_dims
    /// | bn_momentum f64 | bn_eps f64 | mode u8 (0 train, 1 eval) | 7 zero bytes
    /// | per layer: W (row major), b
    /// | per hidden layer: gamma, beta, running_mean, running_var
    /// ```
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layer_dims.len() as u32).to_le_bytes())?;
        for &d in &self.layer_dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&self.bn_momentum.to_le_bytes())?;
        w.write_all(&self.bn_eps.to_le_bytes())?;
        let mode = match self.mode {
            Mode::Train => 0u8,
            Mode::Eval => 1u8,
        };
        w.write_all(&[mode, 0, 0, 0, 0, 0, 0, 0])?;
        let mut put = |xs: &[f64]| -> Result<()> {
            for x in xs {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        for (wt, b) in self.weights.iter().zip(&self.biases) {
            put(wt.as_slice().expect("standard layout"))?;
            put(b.as_slice().expect("standard layout"))?;
        }
        for i in 0..self.bn_gamma.len() {
            for v in [
                &self.bn_gamma[i],
                &self.bn_beta[i],
                &self.bn_running_mean[i],
                &self.bn_running_var[i],
            ] {
                put(v.as_slice().expect("standard layout"))?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an MLP checkpoint (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut b4)?;
        let n_dims = u32::from_le_bytes(b4) as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(Error::Format(format!("implausible layer count {n_dims}")));
        }
        let mut b8 = [0u8; 8];
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            r.read_exact(&mut b8)?;
            dims.push(u64::from_le_bytes(b8) as usize);
        }
        r.read_exact(&mut b8)?;
        let bn_momentum = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let bn_eps = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let mode = match b8[0] {
            0 => Mode::Train,
            1 => Mode::Eval,
            other => return Err(Error::Format(format!("unknown mode byte {other}"))),
        };
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect())
        };
        let n_layers = n_dims - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (a, b) = (dims[i], dims[i + 1]);
            weights.push(Array2::from_shape_vec((a, b), take(a * b)?).expect("sized read"));
            biases.push(Array1::from_vec(take(b)?));
        }
        let mut bn = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for &d in &dims[1..n_layers] {
            for slot in bn.iter_mut() {
                slot.push(Array1::from_vec(take(d)?));
            }
        }
        let [bn_gamma, bn_beta, bn_running_mean, bn_running_var] = bn;
        let params = Self {
            layer_dims: dims,
            weights,
            biases,
            bn_gamma,
            bn_beta,
            bn_running_mean,
            bn_running_var,
            bn_momentum,
            bn_eps,
            mode,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_input(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
        let mut rng = StreamRng::new(seed, 99);
        Array2::from_shape_simple_fn((rows, cols), || rng.normal())
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut p = MlpParameters::new(&[3, 5, 4, 2], 1, OutputInit::Random).unwrap();
        p.weights.iter_mut().for_each(|w| w.fill(0.0));
        let y = p.forward(&random_input(1, 6, 3)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        p.set_mode(Mode::Eval);
        assert!(p.forward(&random_input(2, 6, 3)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_is_affine() {
        let mut p = MlpParameters::new(&[2, 3], 1, OutputInit::Random).unwrap();
        p.weights[0] = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        p.biases[0] = array![0.5, -0.5, 1.0];
        let y = p.forward(&array![[1.0, -1.0]]).unwrap();
        assert_eq!(y, array![[-2.5, -3.5, -2.0]]);
    }

    #[test]
    fn train_mode_standardizes_preactivations() {
        let p = MlpParameters::new(&[4, 8, 2], 3, OutputInit::Random).unwrap();
        let x = random_input(3, 32, 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = x.dot(&p.weights[0]) + &p.biases[0];
        let zv = tape.constant(z);
        let (n, _, _) = tape.batch_normalize(zv, 0.0);
        let out = tape.value(n);
        for col in out.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|c| (c - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
        let _ = xv;
    }

    #[test]
    fn running_stats_follow_batches() {
        let mut p = MlpParameters::new(&[2, 3, 1], 4, OutputInit::Random).unwrap();
        let before = p.bn_running_mean[0].clone();
        p.forward(&random_input(4, 10, 2)).unwrap();
        assert_ne!(p.bn_running_mean[0], before);
        assert!(p.bn_running_var[0].iter().all(|&v| v > 0.0));
    }

    #[test]
    fn taped_and_plain_forward_agree() {
        for mode in [Mode::Train, Mode::Eval] {
            let mut p = MlpParameters::new(&[3, 6, 5, 2], 5, OutputInit::Random).unwrap();
            p.bn_running_mean[0].fill(0.3);
            p.bn_running_var[1].fill(2.0);
            p.set_mode(mode);
            let x = random_input(5, 7, 3);
            let mut tape = Tape::new();
            let h = p.register(&mut tape);
            let xv = tape.constant(x.clone());
            let (y, _) = p.forward_taped(&mut tape, &h, xv).unwrap();
            let plain = p.clone().forward(&x).unwrap();
            let diff = (tape.value(y) - &plain).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            assert!(diff < 1e-12, "{mode:?}: {diff}");
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for mode in [Mode::Train, Mode::Eval] {
            let mut p = MlpParameters::new(&[3, 5, 2], 6, OutputInit::Random).unwrap();
            p.set_mode(mode);
            // keep pre-activations away from the ReLU kink
            p.bn_beta[0].fill(0.05);
            let x = random_input(6, 8, 3);
            let loss_of = |q: &MlpParameters| -> f64 {
                let mut t = Tape::new();
                let h = q.register(&mut t);
                let xv = t.constant(x.clone());
                let (y, _) = q.forward_taped(&mut t, &h, xv).unwrap();
                let s = t.square(y);
                let l = t.sum(s);
                t.scalar(l)
            };
            let mut tape = Tape::new();
            let h = p.register(&mut tape);
            let xv = tape.constant(x.clone());
            let (y, _) = p.forward_taped(&mut tape, &h, xv).unwrap();
            let s = tape.square(y);
            let l = tape.sum(s);
            let grads = p.grads(&h, &tape.backward(l).unwrap());
            let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();

            let mut numeric = Vec::new();
            let n_tensors = p.clone().trainable_mut().len();
            for t in 0..n_tensors {
                let len = p.clone().trainable_mut()[t].len();
                for e in 0..len {
                    let mut plus = p.clone();
                    plus.trainable_mut()[t][e] += 1e-6;
                    let mut minus = p.clone();
                    minus.trainable_mut()[t][e] -= 1e-6;
                    numeric.push((loss_of(&plus) - loss_of(&minus)) / 2e-6);
                }
            }
            let num: f64 = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let den: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
            assert!(num / den < 1e-5, "{mode:?}: {}", num / den);
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let mut p = MlpParameters::new(&[3, 2], 1, OutputInit::Random).unwrap();
        assert!(matches!(
            p.forward(&Array2::zeros((2, 4))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_output_init() {
        let p = MlpParameters::new(&[3, 4, 2], 1, OutputInit::Zero).unwrap();
        assert!(p
            .forward_eval(&random_input(7, 5, 3))
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = MlpParameters::new(&[4, 7, 3, 2], 9, OutputInit::Random).unwrap();
        p.forward(&random_input(9, 12, 4)).unwrap();
        p.set_mode(Mode::Eval);
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).unwrap();
        let q = MlpParameters::read_from(bytes.as_slice()).unwrap();
        assert_eq!(p, q);
        let mut again = Vec::new();
        q.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(MlpParameters::read_from(&b"NCALMLP\0\x02\0\0\0"[..]).is_err());
        assert!(MlpParameters::read_from(&b"whatever"[..]).is_err());
    }
}
