//! Input calibration of LS and ZF by row-shared MLPs, and the training loops.
//!
//! A [`RowCalibrator`] maps every row of its input through one MLP with a
//! residual skip, `x + s * mlp(x / s)`. Because the parameters are shared
//! across rows the map commutes with any row permutation, and a zero output
//! layer makes it exactly the identity.
//!
//! Training minimizes the negative mean downlink sum-rate. The networks are
//! differentiated on a [`Tape`]; the sum-rate of ZF with respect to the ZF
//! input enters either as the closed-form conjugate gradient from
//! [`grad_sum_rate_x`] or through the taped graph of
//! [`zf_sum_rate_taped`], see [`GradientPath`].

use std::f64::consts::LN_2;
use std::fs;
use std::path::Path;

use log::{info, warn};
use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::baselines::{grad_sum_rate_x, sum_rate, zf, Beamformer};
use crate::channel::{default_pilots, generate_batch, ChannelSample, SystemConfig};
use crate::error::{Error, Result};
use crate::linalg::{cinv, cmul, hermitian, real_inverse_with_cond, stacked_block, ComplexMatrix};
use crate::neural::complex::{self as cx, CVar};
use crate::neural::{
    AdamConfig, AdamState, BatchStats, MlpGrads, MlpHandles, MlpParameters, Mode, OutputInit, Tape, Var,
};
use crate::rng::{Domain, StreamRng};

/// Pilot Gram matrices above this condition number are rejected.
pub const PILOT_MAX_COND: f64 = 1e12;

/// Row-shared residual MLP, `x + s * mlp(x / s)` on every row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowCalibrator {
    pub mlp: MlpParameters,
    pub input_scale: f64,
}

impl RowCalibrator {
    /// Starts as the exact identity: the output layer is zero.
    pub fn identity(width: usize, hidden: &[usize], seed: u64, input_scale: f64) -> Result<Self> {
        Self::build(width, hidden, seed, input_scale, OutputInit::Zero)
    }

    /// Random output layer as well, so the map is not the identity.
    pub fn random(width: usize, hidden: &[usize], seed: u64, input_scale: f64) -> Result<Self> {
        Self::build(width, hidden, seed, input_scale, OutputInit::Random)
    }

    fn build(width: usize, hidden: &[usize], seed: u64, input_scale: f64, out: OutputInit) -> Result<Self> {
        if !(input_scale > 0.0 && input_scale.is_finite()) {
            return Err(Error::Config(format!(
                "input scale must be positive, got {input_scale}"
            )));
        }
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(width);
        dims.extend_from_slice(hidden);
        dims.push(width);
        let mut mlp = MlpParameters::new(&dims, seed, out)?;
        mlp.set_mode(Mode::Eval);
        Ok(Self { mlp, input_scale })
    }

    pub fn from_mlp(mlp: MlpParameters, input_scale: f64) -> Result<Self> {
        mlp.validate()?;
        if mlp.input_dim() != mlp.output_dim() {
            return Err(Error::dims(
                "RowCalibrator",
                (mlp.input_dim(), 0),
                (mlp.output_dim(), 0),
            ));
        }
        Ok(Self { mlp, input_scale })
    }

    pub fn width(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Applies the calibrator to every row using the running batch-norm
    /// statistics.
    pub fn apply_rows(&self, rows: &Array2<f64>) -> Result<Array2<f64>> {
        if rows.ncols() != self.width() {
            return Err(Error::dims("calibrate", rows.dim(), (rows.nrows(), self.width())));
        }
        let s = self.input_scale;
        let delta = self.mlp.forward_eval(&(rows / s))?;
        Ok(rows + &(delta * s))
    }

    pub(crate) fn apply_taped(&self, tape: &mut Tape, handles: &MlpHandles, x: Var) -> Result<(Var, Vec<BatchStats>)> {
        let s = self.input_scale;
        let scaled = tape.scale(x, 1.0 / s);
        let (delta, stats) = self.mlp.forward_taped(tape, handles, scaled)?;
        let delta = tape.scale(delta, s);
        Ok((tape.add(x, delta)?, stats))
    }

    fn apply_complex_rows(&self, m: &ComplexMatrix, op: &'static str) -> Result<ComplexMatrix> {
        if 2 * m.cols() != self.width() {
            return Err(Error::dims(op, m.dim(), (m.rows(), self.width() / 2)));
        }
        ComplexMatrix::from_stacked_rows(&self.apply_rows(&m.to_stacked_rows())?)
    }
}

/// `P^H (P P^H)^{-1}`, the `L x K` operator of the LS estimator.
pub fn ls_operator(pilots: &ComplexMatrix) -> Result<ComplexMatrix> {
    let ph = hermitian(pilots);
    let gram = cmul(pilots, &ph)?;
    let cond = match real_inverse_with_cond(&stacked_block(&gram)) {
        Ok((_, c)) => c,
        Err(_) => f64::INFINITY,
    };
    if !(cond <= PILOT_MAX_COND) {
        return Err(Error::RankDeficientPilots { cond });
    }
    let inv = cinv(&gram).map_err(|e| match e {
        Error::Singular { cond } => Error::RankDeficientPilots { cond },
        other => other,
    })?;
    cmul(&ph, &inv)
}

/// LS channel estimate `Y_p P^H (P P^H)^{-1}` (`M x K`).
pub fn ls_estimate(y: &ComplexMatrix, pilots: &ComplexMatrix) -> Result<ComplexMatrix> {
    if y.cols() != pilots.cols() {
        return Err(Error::dims("ls_estimate", y.dim(), pilots.dim()));
    }
    cmul(y, &ls_operator(pilots)?)
}

/// Calibrates every antenna row of the received pilots `Y_p` (`M x L`).
pub fn antenna_calibrate(y: &ComplexMatrix, cal: &RowCalibrator) -> Result<ComplexMatrix> {
    cal.apply_complex_rows(y, "antenna_calibrate")
}

/// Calibrates every user row of a `K x M` channel.
pub fn user_calibrate(h_rows: &ComplexMatrix, cal: &RowCalibrator) -> Result<ComplexMatrix> {
    cal.apply_complex_rows(h_rows, "user_calibrate")
}

/// ZF on the calibrated channel, with one calibrator shared by all users.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedZf {
    pub calibrator: RowCalibrator,
}

impl CalibratedZf {
    /// Untrained model that reproduces plain ZF exactly.
    pub fn identity(antennas: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        Ok(Self {
            calibrator: RowCalibrator::identity(2 * antennas, hidden, seed, 1.0)?,
        })
    }

    pub fn antennas(&self) -> usize {
        self.calibrator.width() / 2
    }

    /// Calibrated inputs of many `K x M` channels in one forward pass.
    pub fn calibrate_batch(&self, h_rows: &[ComplexMatrix]) -> Result<Vec<ComplexMatrix>> {
        let stacked = stack_rows(h_rows)?;
        let out = self.calibrator.apply_rows(&stacked)?;
        split_rows(&out, h_rows.iter().map(|h| h.rows()))
    }

    /// Beamformers of many channels; per-sample ZF failures are kept.
    pub fn beamform_batch(&self, h_rows: &[ComplexMatrix], power: f64) -> Result<Vec<Result<Beamformer>>> {
        Ok(self.calibrate_batch(h_rows)?.iter().map(|x| zf(x, power)).collect())
    }

    /// Downlink sum-rate of every sample.
    pub fn sum_rates(&self, samples: &[ChannelSample], cfg: &SystemConfig) -> Result<Vec<f64>> {
        let rows: Vec<_> = samples.iter().map(ChannelSample::downlink_rows).collect();
        let beams = self.beamform_batch(&rows, cfg.power_dl)?;
        rows.iter()
            .zip(beams)
            .map(|(h, b)| sum_rate(h, &b?.v, cfg.noise_dl))
            .collect()
    }
}

/// `zf(user_calibrate(H), P)`.
pub fn calibrated_zf_beamform(h_rows: &ComplexMatrix, model: &CalibratedZf, power: f64) -> Result<Beamformer> {
    zf(&user_calibrate(h_rows, &model.calibrator)?, power)
}

/// Received pilots to beamformer: antenna calibration, LS, a user-shared
/// uplink-to-downlink channel map, then calibrated ZF.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitPipeline {
    pub ls_calib: RowCalibrator,
    pub channel_map: RowCalibrator,
    pub zf_calib: CalibratedZf,
    pub pilots: ComplexMatrix,
}

impl ImplicitPipeline {
    /// All three stages start as the identity, with [`default_pilots`].
    pub fn identity(cfg: &SystemConfig, hyper: &TrainHyper) -> Result<Self> {
        let (m, l) = (cfg.antennas, cfg.pilot_length);
        let pilot_scale = (cfg.users as f64 * cfg.power_ul + cfg.noise_ul).sqrt();
        Ok(Self {
            ls_calib: RowCalibrator::identity(2 * l, &hyper.antenna_hidden, hyper.seed, pilot_scale)?,
            channel_map: RowCalibrator::identity(2 * m, &hyper.user_hidden, hyper.seed.wrapping_add(1), 1.0)?,
            zf_calib: CalibratedZf::identity(m, &hyper.user_hidden, hyper.seed.wrapping_add(2))?,
            pilots: default_pilots(cfg),
        })
    }

    pub fn antennas(&self) -> usize {
        self.channel_map.width() / 2
    }

    pub fn users(&self) -> usize {
        self.pilots.rows()
    }

    pub fn pilot_length(&self) -> usize {
        self.pilots.cols()
    }

    /// Estimated downlink user rows (`K x M`), the input of calibrated ZF.
    pub fn downlink_estimate(&self, y: &ComplexMatrix) -> Result<ComplexMatrix> {
        let calibrated = antenna_calibrate(y, &self.ls_calib)?;
        let h_ul = ls_estimate(&calibrated, &self.pilots)?;
        user_calibrate(&hermitian(&h_ul), &self.channel_map)
    }

    /// Beamformers of many pilot observations with batched forward passes.
    pub fn beamform_batch(&self, ys: &[&ComplexMatrix], power: f64) -> Result<Vec<Result<Beamformer>>> {
        let q = ls_operator(&self.pilots)?;
        let stacked = stack_rows(ys.iter().copied())?;
        let calibrated = self.ls_calib.apply_rows(&stacked)?;
        let per_sample = split_rows(&calibrated, ys.iter().map(|y| y.rows()))?;
        let uplink: Vec<ComplexMatrix> = per_sample
            .iter()
            .map(|y| Ok(hermitian(&cmul(y, &q)?)))
            .collect::<Result<_>>()?;
        let mapped = self.channel_map.apply_rows(&stack_rows(&uplink)?)?;
        let mapped = split_rows(&mapped, uplink.iter().map(|u| u.rows()))?;
        self.zf_calib.beamform_batch(&mapped, power)
    }

    pub fn sum_rates(&self, samples: &[ChannelSample], cfg: &SystemConfig) -> Result<Vec<f64>> {
        let ys = pilot_observations(samples)?;
        let beams = self.beamform_batch(&ys, cfg.power_dl)?;
        samples
            .iter()
            .zip(beams)
            .map(|(s, b)| sum_rate(&s.downlink_rows(), &b?.v, cfg.noise_dl))
            .collect()
    }
}

/// `calibrated_zf_beamform(pipeline's downlink estimate)`; never looks at the
/// true channels.
pub fn implicit_beamform(y: &ComplexMatrix, pipeline: &ImplicitPipeline, power: f64) -> Result<Beamformer> {
    calibrated_zf_beamform(&pipeline.downlink_estimate(y)?, &pipeline.zf_calib, power)
}

/// Plain LS, a stand-alone channel map trained on MSE, plain ZF.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockByBlock {
    pub channel_map: RowCalibrator,
    pub pilots: ComplexMatrix,
}

impl BlockByBlock {
    pub fn identity(cfg: &SystemConfig, hyper: &TrainHyper) -> Result<Self> {
        Ok(Self {
            channel_map: RowCalibrator::identity(2 * cfg.antennas, &hyper.user_hidden, hyper.seed, 1.0)?,
            pilots: default_pilots(cfg),
        })
    }

    fn uplink_rows(&self, ys: &[&ComplexMatrix]) -> Result<Vec<ComplexMatrix>> {
        let q = ls_operator(&self.pilots)?;
        ys.iter().map(|y| Ok(hermitian(&cmul(y, &q)?))).collect()
    }

    pub fn downlink_estimates(&self, ys: &[&ComplexMatrix]) -> Result<Vec<ComplexMatrix>> {
        let uplink = self.uplink_rows(ys)?;
        let mapped = self.channel_map.apply_rows(&stack_rows(&uplink)?)?;
        split_rows(&mapped, uplink.iter().map(|u| u.rows()))
    }

    pub fn beamform(&self, y: &ComplexMatrix, power: f64) -> Result<Beamformer> {
        let est = self.downlink_estimates(&[y])?;
        zf(&est[0], power)
    }

    pub fn sum_rates(&self, samples: &[ChannelSample], cfg: &SystemConfig) -> Result<Vec<f64>> {
        let ys = pilot_observations(samples)?;
        let est = self.downlink_estimates(&ys)?;
        samples
            .iter()
            .zip(&est)
            .map(|(s, x)| sum_rate(&s.downlink_rows(), &zf(x, cfg.power_dl)?.v, cfg.noise_dl))
            .collect()
    }

    /// Mean `‖Ĥ - H_DL‖_F²` per sample.
    pub fn mse(&self, samples: &[ChannelSample]) -> Result<f64> {
        let ys = pilot_observations(samples)?;
        let est = self.downlink_estimates(&ys)?;
        let total: f64 = samples
            .iter()
            .zip(&est)
            .map(|(s, x)| Ok(x.sub(&s.downlink_rows())?.fro_norm_sq()))
            .sum::<Result<f64>>()?;
        Ok(total / samples.len().max(1) as f64)
    }
}

fn pilot_observations(samples: &[ChannelSample]) -> Result<Vec<&ComplexMatrix>> {
    samples
        .iter()
        .map(|s| {
            s.pilots_rx
                .as_ref()
                .ok_or_else(|| Error::Config("sample has no received pilots".into()))
        })
        .collect()
}

fn stack_rows<'a>(mats: impl IntoIterator<Item = &'a ComplexMatrix>) -> Result<Array2<f64>> {
    let parts: Vec<Array2<f64>> = mats.into_iter().map(ComplexMatrix::to_stacked_rows).collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    if views.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    concatenate(Axis(0), &views).map_err(|_| Error::dims("stack_rows", parts[0].dim(), (0, 0)))
}

fn split_rows(stacked: &Array2<f64>, counts: impl Iterator<Item = usize>) -> Result<Vec<ComplexMatrix>> {
    let mut start = 0;
    counts
        .map(|n| {
            let part = stacked.slice(s![start..start + n, ..]).to_owned();
            start += n;
            ComplexMatrix::from_stacked_rows(&part)
        })
        .collect()
}

/// `sum_rate(H, zf(X, P))` recorded on the tape as a function of `X`.
pub fn zf_sum_rate_taped(tape: &mut Tape, h_rows: &ComplexMatrix, x: CVar, power: f64, noise: f64) -> Result<Var> {
    let (k_users, m) = x.shape(tape);
    if h_rows.dim() != (k_users, m) {
        return Err(Error::dims("zf_sum_rate_taped", h_rows.dim(), (k_users, m)));
    }
    let xh = cx::hermitian(tape, x);
    let gram = cx::cmul(tape, x, xh)?;
    let inv = cx::cinv(tape, gram)?;
    let w = cx::cmul(tape, xh, inv)?;
    let norm_sq = cx::fro_norm_sq(tape, w)?;
    let norm = tape.sqrt(norm_sq);
    let inv_norm = tape.recip(norm);
    let gamma = tape.scale(inv_norm, power.sqrt());
    let v = cx::scale_by(tape, w, gamma)?;
    let h = CVar::constant(tape, h_rows);
    let cross = cx::cmul(tape, h, v)?;
    let powers = cx::abs_sq(tape, cross)?;
    let received = tape.sum_cols(powers);
    let total = tape.add_scalar(received, noise);
    let signal = tape.diag(powers)?;
    let interference = tape.sub(total, signal)?;
    let ln_total = tape.ln(total);
    let ln_interference = tape.ln(interference);
    let per_user = tape.sub(ln_total, ln_interference)?;
    let nats = tape.sum(per_user);
    Ok(tape.scale(nats, 1.0 / LN_2))
}

/// Which derivative of the sum-rate with respect to the ZF input is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientPath {
    /// Closed-form `∂R/∂X*` from [`grad_sum_rate_x`], injected at the ZF input.
    #[default]
    Analytic,
    /// ZF and the sum-rate recorded on the tape per sample.
    Tape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning-rate multiplier applied after every epoch.
    pub lr_decay: f64,
    /// Hidden widths of the user-shared networks (`2M -> ... -> 2M`).
    pub user_hidden: Vec<usize>,
    /// Hidden widths of the antenna-shared network (`2L -> ... -> 2L`).
    pub antenna_hidden: Vec<usize>,
    /// Hidden widths of the black-box baseline (`2MK -> ... -> 2MK`).
    pub blackbox_hidden: Vec<usize>,
    pub seed: u64,
    pub gradient: GradientPath,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            adam: AdamConfig::default(),
            lr_decay: 1.0,
            user_hidden: vec![128, 512, 512],
            antenna_hidden: vec![128, 512, 512],
            blackbox_hidden: vec![512, 512],
            seed: 0,
            gradient: GradientPath::Analytic,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr and lr_decay must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training objective over the epoch's mini-batches.
    pub train_loss: f64,
    /// Mean sum-rate over the epoch's mini-batches (train mode).
    pub train_sum_rate: f64,
    /// Mean sum-rate on the held-out samples after the epoch (eval mode).
    pub heldout_sum_rate: f64,
}

pub type TrainingCurve = Vec<EpochStats>;

/// Models made of one or more MLPs trained jointly.
pub(crate) trait Networks {
    fn nets(&self) -> Vec<&MlpParameters>;
    fn nets_mut(&mut self) -> Vec<&mut MlpParameters>;
}

impl Networks for CalibratedZf {
    fn nets(&self) -> Vec<&MlpParameters> {
        vec![&self.calibrator.mlp]
    }
    fn nets_mut(&mut self) -> Vec<&mut MlpParameters> {
        vec![&mut self.calibrator.mlp]
    }
}

impl Networks for ImplicitPipeline {
    fn nets(&self) -> Vec<&MlpParameters> {
        vec![&self.ls_calib.mlp, &self.channel_map.mlp, &self.zf_calib.calibrator.mlp]
    }
    fn nets_mut(&mut self) -> Vec<&mut MlpParameters> {
        vec![
            &mut self.ls_calib.mlp,
            &mut self.channel_map.mlp,
            &mut self.zf_calib.calibrator.mlp,
        ]
    }
}

impl Networks for BlockByBlock {
    fn nets(&self) -> Vec<&MlpParameters> {
        vec![&self.channel_map.mlp]
    }
    fn nets_mut(&mut self) -> Vec<&mut MlpParameters> {
        vec![&mut self.channel_map.mlp]
    }
}

/// Result of one mini-batch on a fresh tape.
pub(crate) struct Step {
    pub grads: Vec<MlpGrads>,
    pub stats: Vec<Vec<BatchStats>>,
    pub loss: f64,
    pub sum_rate: f64,
}

/// Shuffled mini-batch Adam over every network of `model`.
pub(crate) fn fit<N: Networks>(
    model: &mut N,
    n_train: usize,
    hyper: &TrainHyper,
    mut step: impl FnMut(&N, &[usize]) -> Result<Step>,
    mut heldout: impl FnMut(&N) -> Result<f64>,
) -> Result<TrainingCurve> {
    hyper.validate()?;
    if n_train == 0 {
        return Err(Error::Config("empty training set".into()));
    }
    for net in model.nets_mut() {
        net.set_mode(Mode::Train);
    }
    let mut adam = {
        let mut nets = model.nets_mut();
        let tensors: Vec<&[f64]> = nets
            .iter_mut()
            .flat_map(|n| n.trainable_mut().into_iter().map(|t| &*t))
            .collect();
        AdamState::new(tensors)
    };
    let mut curve = Vec::with_capacity(hyper.epochs);
    let mut adam_cfg = hyper.adam;
    for epoch in 0..hyper.epochs {
        let order = StreamRng::for_key(hyper.seed, Domain::Shuffle, epoch as u64, 0, 0).permutation(n_train);
        let (mut loss_sum, mut rate_sum, mut batches) = (0.0, 0.0, 0usize);
        for batch in order.chunks(hyper.batch_size) {
            let out = step(model, batch)?;
            let finite = out.loss.is_finite()
                && out
                    .grads
                    .iter()
                    .all(|g| g.tensors().iter().all(|t| t.iter().all(|x| x.is_finite())));
            if !finite {
                return Err(Error::Diverged { epoch });
            }
            let mut nets = model.nets_mut();
            for (net, stats) in nets.iter_mut().zip(&out.stats) {
                net.apply_batch_stats(stats);
            }
            let mut params: Vec<&mut [f64]> = nets.iter_mut().flat_map(|n| n.trainable_mut()).collect();
            let grads: Vec<&[f64]> = out.grads.iter().flat_map(|g| g.tensors()).collect();
            adam.step(&adam_cfg, &mut params, &grads)?;
            loss_sum += out.loss;
            rate_sum += out.sum_rate;
            batches += 1;
        }
        let held = heldout(model)?;
        if !held.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_sum_rate: rate_sum / batches as f64,
            heldout_sum_rate: held,
        };
        info!(
            "epoch {epoch}: loss {:.5} train {:.4} held-out {:.4} bit/s/Hz",
            stats.train_loss, stats.train_sum_rate, stats.heldout_sum_rate
        );
        curve.push(stats);
        adam_cfg.lr *= hyper.lr_decay;
    }
    for net in model.nets_mut() {
        net.set_mode(Mode::Eval);
    }
    Ok(curve)
}

/// Sum-rate loss at the ZF input `x` (`(B K) x 2M`, stacked rows of the
/// batch). Returns the scalar loss `-mean R` and the mean rate.
pub(crate) fn zf_rate_loss(
    tape: &mut Tape,
    x: Var,
    channels: &[ComplexMatrix],
    cfg: &SystemConfig,
    path: GradientPath,
) -> Result<(Var, f64)> {
    let k_users = channels.first().map(ComplexMatrix::rows).unwrap_or(0);
    let n = channels.len() as f64;
    match path {
        GradientPath::Analytic => {
            let values = tape.value(x).clone();
            let mut coef = Array2::zeros(values.dim());
            let mut total = 0.0;
            let m = values.ncols() / 2;
            for (b, h) in channels.iter().enumerate() {
                let rows = b * k_users..(b + 1) * k_users;
                let xb = ComplexMatrix::from_stacked_rows(&values.slice(s![rows.clone(), ..]).to_owned())?;
                let rate = match zf(&xb, cfg.power_dl) {
                    Ok(v) => sum_rate(h, &v.v, cfg.noise_dl)?,
                    Err(Error::ZfIllPosed { cond }) => {
                        warn!("skipping ill-posed ZF input (cond {cond:.3e})");
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                total += rate;
                // ∂(-R/n)/∂Re X = -2 Re(∂R/∂X*) / n, likewise for Im
                let g = grad_sum_rate_x(h, &xb, cfg.power_dl, cfg.noise_dl)?;
                let mut block = coef.slice_mut(s![rows, ..]);
                block.slice_mut(s![.., ..m]).assign(&(g.re() * (-2.0 / n)));
                block.slice_mut(s![.., m..]).assign(&(g.im() * (-2.0 / n)));
            }
            let c = tape.constant(coef);
            let weighted = tape.mul(x, c)?;
            Ok((tape.sum(weighted), total / n))
        }
        GradientPath::Tape => {
            let mut rates = Vec::with_capacity(channels.len());
            let width = tape.shape(x).1;
            for (b, h) in channels.iter().enumerate() {
                let xb = tape.slice(x, b * k_users..(b + 1) * k_users, 0..width)?;
                let xc = CVar::from_stacked_rows(tape, xb)?;
                rates.push(zf_sum_rate_taped(tape, h, xc, cfg.power_dl, cfg.noise_dl)?);
            }
            let sum = tape.add_n(&rates)?;
            let mean = tape.scale(sum, -1.0 / n);
            let rate = -tape.scalar(mean);
            Ok((mean, rate))
        }
    }
}

fn check_dataset(samples: &[ChannelSample], cfg: &SystemConfig, pilots: bool) -> Result<()> {
    cfg.validate()?;
    for s in samples {
        if s.h_dl.dim() != (cfg.antennas, cfg.users) {
            return Err(Error::dims("dataset", s.h_dl.dim(), (cfg.antennas, cfg.users)));
        }
        if pilots {
            match &s.pilots_rx {
                Some(y) if y.dim() == (cfg.antennas, cfg.pilot_length) => {}
                Some(y) => return Err(Error::dims("dataset pilots", y.dim(), (cfg.antennas, cfg.pilot_length))),
                None => return Err(Error::Config("implicit training needs received pilots".into())),
            }
        }
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Trains ZF calibration on perfect downlink CSI.
pub fn train_perfect_csi(
    train: &[ChannelSample],
    heldout: &[ChannelSample],
    cfg: &SystemConfig,
    hyper: &TrainHyper,
) -> Result<(CalibratedZf, TrainingCurve)> {
    check_dataset(train, cfg, false)?;
    let mut model = CalibratedZf::identity(cfg.antennas, &hyper.user_hidden, hyper.seed)?;
    let channels: Vec<ComplexMatrix> = train.iter().map(ChannelSample::downlink_rows).collect();
    let curve = fit(
        &mut model,
        train.len(),
        hyper,
        |m, batch| perfect_csi_step(m, batch, &channels, cfg, hyper.gradient),
        |m| Ok(mean(&m.sum_rates(heldout, cfg)?)),
    )?;
    Ok((model, curve))
}

fn perfect_csi_step(
    model: &CalibratedZf,
    batch: &[usize],
    channels: &[ComplexMatrix],
    cfg: &SystemConfig,
    path: GradientPath,
) -> Result<Step> {
    let hs: Vec<ComplexMatrix> = batch.iter().map(|&i| channels[i].clone()).collect();
    let mut tape = Tape::new();
    let handles = model.calibrator.mlp.register(&mut tape);
    let input = tape.constant(stack_rows(&hs)?);
    let (x, stats) = model.calibrator.apply_taped(&mut tape, &handles, input)?;
    let (loss, rate) = zf_rate_loss(&mut tape, x, &hs, cfg, path)?;
    let grads = tape.backward(loss)?;
    Ok(Step {
        grads: vec![model.calibrator.mlp.grads(&handles, &grads)],
        stats: vec![stats],
        loss: -rate,
        sum_rate: rate,
    })
}

/// Trains antenna calibration, channel map and ZF calibration jointly from
/// received pilots; the downlink channel only enters the loss.
pub fn train_implicit(
    train: &[ChannelSample],
    heldout: &[ChannelSample],
    cfg: &SystemConfig,
    hyper: &TrainHyper,
) -> Result<(ImplicitPipeline, TrainingCurve)> {
    check_dataset(train, cfg, true)?;
    let mut model = ImplicitPipeline::identity(cfg, hyper)?;
    let q = ls_operator(&model.pilots)?;
    let curve = fit(
        &mut model,
        train.len(),
        hyper,
        |m, batch| implicit_step(m, batch, train, &q, cfg, hyper.gradient),
        |m| Ok(mean(&m.sum_rates(heldout, cfg)?)),
    )?;
    Ok((model, curve))
}

/// Records the pipeline up to the ZF input for the samples of `batch`.
/// Returns `(x, handles, stats)`.
fn implicit_forward(
    tape: &mut Tape,
    model: &ImplicitPipeline,
    ys: &[&ComplexMatrix],
    q: &ComplexMatrix,
) -> Result<(Var, [MlpHandles; 3], Vec<Vec<BatchStats>>)> {
    let m = model.antennas();
    let l = model.pilot_length();
    let handles = [
        model.ls_calib.mlp.register(tape),
        model.channel_map.mlp.register(tape),
        model.zf_calib.calibrator.mlp.register(tape),
    ];
    let y = tape.constant(stack_rows(ys.iter().copied())?);
    let (yc, s0) = model.ls_calib.apply_taped(tape, &handles[0], y)?;
    let rows = tape.shape(yc).0;
    let yr = tape.slice(yc, 0..rows, 0..l)?;
    let yi = tape.slice(yc, 0..rows, l..2 * l)?;
    // row-wise LS, [yr | yi] -> [yr Qr - yi Qi | yr Qi + yi Qr]
    let qr = tape.constant(q.re().clone());
    let qi = tape.constant(q.im().clone());
    let rr = tape.matmul(yr, qr)?;
    let ii = tape.matmul(yi, qi)?;
    let ri = tape.matmul(yr, qi)?;
    let ir = tape.matmul(yi, qr)?;
    let h_re = tape.sub(rr, ii)?;
    let h_im = tape.add(ri, ir)?;
    // per-sample M x K estimate to K x M user rows, conjugated
    let u_re = tape.block_transpose(h_re, m)?;
    let u_im_t = tape.block_transpose(h_im, m)?;
    let u_im = tape.neg(u_im_t);
    let u = tape.concat_cols(&[u_re, u_im])?;
    let (mapped, s1) = model.channel_map.apply_taped(tape, &handles[1], u)?;
    let (x, s2) = model.zf_calib.calibrator.apply_taped(tape, &handles[2], mapped)?;
    Ok((x, handles, vec![s0, s1, s2]))
}

fn implicit_step(
    model: &ImplicitPipeline,
    batch: &[usize],
    samples: &[ChannelSample],
    q: &ComplexMatrix,
    cfg: &SystemConfig,
    path: GradientPath,
) -> Result<Step> {
    let ys: Vec<&ComplexMatrix> = batch
        .iter()
        .map(|&i| samples[i].pilots_rx.as_ref().expect("checked"))
        .collect();
    let hs: Vec<ComplexMatrix> = batch.iter().map(|&i| samples[i].downlink_rows()).collect();
    let mut tape = Tape::new();
    let (x, handles, stats) = implicit_forward(&mut tape, model, &ys, q)?;
    let (loss, rate) = zf_rate_loss(&mut tape, x, &hs, cfg, path)?;
    let grads = tape.backward(loss)?;
    let nets = model.nets();
    Ok(Step {
        grads: nets.iter().zip(&handles).map(|(n, h)| n.grads(h, &grads)).collect(),
        stats,
        loss: -rate,
        sum_rate: rate,
    })
}

/// Block-by-block baseline: the channel map alone is trained on the squared
/// error between mapped LS estimates and the true downlink channels.
pub fn train_block_by_block(
    train: &[ChannelSample],
    heldout: &[ChannelSample],
    cfg: &SystemConfig,
    hyper: &TrainHyper,
) -> Result<(BlockByBlock, TrainingCurve)> {
    check_dataset(train, cfg, true)?;
    let mut model = BlockByBlock::identity(cfg, hyper)?;
    let ys = pilot_observations(train)?;
    let uplink = model.uplink_rows(&ys)?;
    let targets: Vec<ComplexMatrix> = train.iter().map(ChannelSample::downlink_rows).collect();
    let curve = fit(
        &mut model,
        train.len(),
        hyper,
        |m, batch| {
            let us: Vec<&ComplexMatrix> = batch.iter().map(|&i| &uplink[i]).collect();
            let ts: Vec<&ComplexMatrix> = batch.iter().map(|&i| &targets[i]).collect();
            let mut tape = Tape::new();
            let handles = m.channel_map.mlp.register(&mut tape);
            let u = tape.constant(stack_rows(us)?);
            let (out, stats) = m.channel_map.apply_taped(&mut tape, &handles, u)?;
            let t = tape.constant(stack_rows(ts)?);
            let err = tape.sub(out, t)?;
            let sq = tape.square(err);
            let total = tape.sum(sq);
            let loss = tape.scale(total, 1.0 / batch.len() as f64);
            let value = tape.scalar(loss);
            let grads = tape.backward(loss)?;
            let estimates = split_rows(tape.value(out), batch.iter().map(|_| cfg.users))?;
            let rate = batch
                .iter()
                .zip(&estimates)
                .map(|(&i, x)| match zf(x, cfg.power_dl) {
                    Ok(b) => sum_rate(&targets[i], &b.v, cfg.noise_dl),
                    Err(_) => Ok(0.0),
                })
                .sum::<Result<f64>>()?
                / batch.len() as f64;
            Ok(Step {
                grads: vec![m.channel_map.mlp.grads(&handles, &grads)],
                stats: vec![stats],
                loss: value,
                sum_rate: rate,
            })
        },
        |m| Ok(mean(&m.sum_rates(heldout, cfg)?)),
    )?;
    Ok((model, curve))
}

/// One evaluation point of a model trained at a different user count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchPoint {
    pub users: usize,
    pub mean_sum_rate: f64,
    pub std: f64,
    pub n_samples: usize,
    /// Mean sum-rate of the model trained at this user count, when supplied.
    pub matched_sum_rate: Option<f64>,
    pub ratio: Option<f64>,
}

/// Evaluates `model` unchanged at every user count of `users_test`, on
/// `n_samples` fresh samples starting at `start_index`. `matched` supplies
/// models trained at the test user counts for the ratio.
pub fn evaluate_mismatch(
    model: &CalibratedZf,
    cfg_train: &SystemConfig,
    users_test: &[usize],
    n_samples: usize,
    start_index: u64,
    matched: &[(usize, &CalibratedZf)],
) -> Result<Vec<MismatchPoint>> {
    if model.antennas() != cfg_train.antennas {
        return Err(Error::dims(
            "evaluate_mismatch",
            (model.antennas(), 0),
            (cfg_train.antennas, 0),
        ));
    }
    users_test
        .iter()
        .map(|&k| {
            if k == 0 || k > cfg_train.antennas {
                return Err(Error::Config(format!(
                    "test user count {k} must be in 1..={}",
                    cfg_train.antennas
                )));
            }
            let cfg = cfg_train.with_users(k);
            let samples = generate_batch(&cfg, start_index, n_samples);
            let rates = model.sum_rates(&samples, &cfg)?;
            let mu = mean(&rates);
            let std = (rates.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / rates.len().max(1) as f64).sqrt();
            let matched_sum_rate = match matched.iter().find(|(mk, _)| *mk == k) {
                Some((_, other)) => Some(mean(&other.sum_rates(&samples, &cfg)?)),
                None => None,
            };
            Ok(MismatchPoint {
                users: k,
                mean_sum_rate: mu,
                std,
                n_samples,
                matched_sum_rate,
                ratio: matched_sum_rate.map(|m| mu / m),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PerfectCsi,
    Implicit,
    BlockByBlock,
    Blackbox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub name: String,
    pub file: String,
    pub input_scale: f64,
}

/// Complex matrix as nested rows, for JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl From<&ComplexMatrix> for MatrixJson {
    fn from(m: &ComplexMatrix) -> Self {
        let rows = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect();
        Self {
            re: rows(m.re()),
            im: rows(m.im()),
        }
    }
}

impl MatrixJson {
    pub fn to_matrix(&self) -> Result<ComplexMatrix> {
        let build = |rows: &Vec<Vec<f64>>| -> Result<Array2<f64>> {
            let n = rows.len();
            let m = rows.first().map_or(0, Vec::len);
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            Array2::from_shape_vec((n, m), flat).map_err(|_| Error::Format("ragged matrix in manifest".into()))
        };
        ComplexMatrix::from_parts(build(&self.re)?, build(&self.im)?)
    }
}

/// Provenance stored next to the network checkpoints of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub kind: ModelKind,
    pub antennas: usize,
    pub users_train: usize,
    pub pilot_length: usize,
    pub hyper: TrainHyper,
    pub dataset_seed: u64,
    pub networks: Vec<NetworkEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pilots: Option<MatrixJson>,
    pub library_version: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl ModelManifest {
    pub fn new(kind: ModelKind, cfg: &SystemConfig, hyper: &TrainHyper, dataset_seed: u64) -> Self {
        Self {
            kind,
            antennas: cfg.antennas,
            users_train: cfg.users,
            pilot_length: cfg.pilot_length,
            hyper: hyper.clone(),
            dataset_seed,
            networks: Vec::new(),
            pilots: None,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Writes `manifest.json` and one checkpoint per network into `dir`.
pub(crate) fn save_bundle(
    dir: &Path,
    mut manifest: ModelManifest,
    nets: &[(&str, &MlpParameters, f64)],
    pilots: Option<&ComplexMatrix>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    manifest.networks.clear();
    for (name, mlp, scale) in nets {
        let file = format!("{name}.mlp");
        mlp.save(dir.join(&file))?;
        manifest.networks.push(NetworkEntry {
            name: name.to_string(),
            file,
            input_scale: *scale,
        });
    }
    manifest.pilots = pilots.map(MatrixJson::from);
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub(crate) fn load_bundle(dir: &Path, kind: ModelKind) -> Result<(ModelManifest, Vec<RowCalibratorOrNet>)> {
    let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.kind != kind {
        return Err(Error::Format(format!(
            "expected a {kind:?} model, found {:?}",
            manifest.kind
        )));
    }
    let nets = manifest
        .networks
        .iter()
        .map(|e| {
            Ok(RowCalibratorOrNet {
                name: e.name.clone(),
                mlp: MlpParameters::load(dir.join(&e.file))?,
                input_scale: e.input_scale,
            })
        })
        .collect::<Result<_>>()?;
    Ok((manifest, nets))
}

pub(crate) struct RowCalibratorOrNet {
    pub name: String,
    pub mlp: MlpParameters,
    pub input_scale: f64,
}

fn take_net(nets: &mut Vec<RowCalibratorOrNet>, name: &str) -> Result<RowCalibrator> {
    let pos = nets
        .iter()
        .position(|n| n.name == name)
        .ok_or_else(|| Error::Format(format!("manifest lists no network named {name}")))?;
    let n = nets.remove(pos);
    RowCalibrator::from_mlp(n.mlp, n.input_scale)
}

impl CalibratedZf {
    pub fn save(&self, dir: impl AsRef<Path>, manifest: ModelManifest) -> Result<()> {
        save_bundle(
            dir.as_ref(),
            manifest,
            &[("zf_calib", &self.calibrator.mlp, self.calibrator.input_scale)],
            None,
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, ModelManifest)> {
        let (manifest, mut nets) = load_bundle(dir.as_ref(), ModelKind::PerfectCsi)?;
        let calibrator = take_net(&mut nets, "zf_calib")?;
        Ok((Self { calibrator }, manifest))
    }
}

impl ImplicitPipeline {
    pub fn save(&self, dir: impl AsRef<Path>, manifest: ModelManifest) -> Result<()> {
        save_bundle(
            dir.as_ref(),
            manifest,
            &[
                ("ls_calib", &self.ls_calib.mlp, self.ls_calib.input_scale),
                ("channel_map", &self.channel_map.mlp, self.channel_map.input_scale),
                (
                    "zf_calib",
                    &self.zf_calib.calibrator.mlp,
                    self.zf_calib.calibrator.input_scale,
                ),
            ],
            Some(&self.pilots),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, ModelManifest)> {
        let (manifest, mut nets) = load_bundle(dir.as_ref(), ModelKind::Implicit)?;
        let pilots = manifest
            .pilots
            .as_ref()
            .ok_or_else(|| Error::Format("implicit manifest without pilots".into()))?
            .to_matrix()?;
        let model = Self {
            ls_calib: take_net(&mut nets, "ls_calib")?,
            channel_map: take_net(&mut nets, "channel_map")?,
            zf_calib: CalibratedZf {
                calibrator: take_net(&mut nets, "zf_calib")?,
            },
            pilots,
        };
        Ok((model, manifest))
    }
}

impl BlockByBlock {
    pub fn save(&self, dir: impl AsRef<Path>, manifest: ModelManifest) -> Result<()> {
        save_bundle(
            dir.as_ref(),
            manifest,
            &[("channel_map", &self.channel_map.mlp, self.channel_map.input_scale)],
            Some(&self.pilots),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, ModelManifest)> {
        let (manifest, mut nets) = load_bundle(dir.as_ref(), ModelKind::BlockByBlock)?;
        let pilots = manifest
            .pilots
            .as_ref()
            .ok_or_else(|| Error::Format("block-by-block manifest without pilots".into()))?
            .to_matrix()?;
        let channel_map = take_net(&mut nets, "channel_map")?;
        Ok((Self { channel_map, pilots }, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::grad_sum_rate_x;
    use crate::channel::generate_with_pilots;
    use crate::linalg::fro_norm;

    fn random(rng: &mut StreamRng, rows: usize, cols: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(rows, cols, |_, _| rng.complex_normal())
    }

    fn perturbed(cal: &mut RowCalibrator, seed: u64) {
        let mut rng = StreamRng::new(seed, 5);
        for i in 0..cal.mlp.bn_running_mean.len() {
            cal.mlp.bn_running_mean[i].mapv_inplace(|_| 0.1 * rng.normal());
            cal.mlp.bn_running_var[i].mapv_inplace(|_| 0.5 + rng.uniform(0.0, 1.0));
            cal.mlp.bn_beta[i].mapv_inplace(|_| 0.1 * rng.normal());
        }
    }

    fn small_cfg(m: usize, k: usize, l: usize) -> SystemConfig {
        SystemConfig {
            antennas: m,
            users: k,
            pilot_length: l,
            noise_dl: 1e-3,
            noise_ul: 1e-6,
            power_dl: 1e-3,
            power_ul: 1e-4,
            ..SystemConfig::default()
        }
    }

    #[test]
    fn ls_recovers_noiseless_channel() {
        let cfg = SystemConfig {
            noise_ul: 0.0,
            ..SystemConfig::default()
        };
        let p = default_pilots(&cfg);
        for s in generate_with_pilots(&cfg, &p, 0, 10).unwrap() {
            let est = ls_estimate(s.pilots_rx.as_ref().unwrap(), &p).unwrap();
            assert!(est.max_abs_diff(&s.h_ul) < 1e-10);
        }
    }

    #[test]
    fn ls_with_identity_pilots_returns_observation() {
        let mut rng = StreamRng::new(1, 0);
        let y = random(&mut rng, 5, 3);
        let est = ls_estimate(&y, &ComplexMatrix::identity(3)).unwrap();
        assert!(est.max_abs_diff(&y) < 1e-15);
    }

    #[test]
    fn ls_rejects_rank_deficient_pilots() {
        let p = ComplexMatrix::from_fn(2, 3, |_, j| num_complex::Complex64::new(j as f64 + 1.0, 0.0));
        assert!(matches!(ls_operator(&p), Err(Error::RankDeficientPilots { .. })));
        let y = ComplexMatrix::zeros(4, 2);
        assert!(matches!(
            ls_estimate(&y, &ComplexMatrix::identity(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn identity_calibrators_change_nothing() {
        let mut rng = StreamRng::new(2, 0);
        let y = random(&mut rng, 6, 4);
        let cal = RowCalibrator::identity(8, &[16, 8], 3, 0.3).unwrap();
        assert_eq!(antenna_calibrate(&y, &cal).unwrap(), y);
        let h = random(&mut rng, 3, 6);
        let model = CalibratedZf::identity(6, &[16], 4).unwrap();
        assert_eq!(user_calibrate(&h, &model.calibrator).unwrap(), h);
        assert_eq!(
            calibrated_zf_beamform(&h, &model, 2.0).unwrap().v,
            zf(&h, 2.0).unwrap().v
        );
    }

    #[test]
    fn single_row_is_plain_forward() {
        let mut rng = StreamRng::new(3, 0);
        let y = random(&mut rng, 1, 3);
        let cal = RowCalibrator::random(6, &[10], 5, 1.0).unwrap();
        let direct = cal.mlp.forward_eval(&y.to_stacked_rows()).unwrap() + y.to_stacked_rows();
        assert_eq!(antenna_calibrate(&y, &cal).unwrap().to_stacked_rows(), direct);
    }

    #[test]
    fn antenna_calibration_is_row_equivariant_bit_exact() {
        let mut rng = StreamRng::new(4, 0);
        let mut cal = RowCalibrator::random(8, &[12, 12], 6, 0.5).unwrap();
        perturbed(&mut cal, 6);
        for _ in 0..20 {
            let y = random(&mut rng, 7, 4);
            let perm = rng.permutation(7);
            let lhs = antenna_calibrate(&y.permute_rows(&perm), &cal).unwrap();
            let rhs = antenna_calibrate(&y, &cal).unwrap().permute_rows(&perm);
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn identical_users_get_identical_rows() {
        let mut rng = StreamRng::new(5, 0);
        let row = random(&mut rng, 1, 4);
        let h = ComplexMatrix::from_fn(2, 4, |_, j| row.get(0, j));
        let cal = RowCalibrator::random(8, &[6], 7, 1.0).unwrap();
        let out = user_calibrate(&h, &cal).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn calibrated_zf_is_user_equivariant() {
        let mut rng = StreamRng::new(6, 0);
        let mut model = CalibratedZf {
            calibrator: RowCalibrator::random(16, &[20, 20], 8, 1.0).unwrap(),
        };
        perturbed(&mut model.calibrator, 8);
        for _ in 0..50 {
            let h = random(&mut rng, 5, 8);
            let perm = rng.permutation(5);
            let lhs = calibrated_zf_beamform(&h.permute_rows(&perm), &model, 1.0).unwrap().v;
            let rhs = calibrated_zf_beamform(&h, &model, 1.0).unwrap().v.permute_cols(&perm);
            assert!(lhs.max_abs_diff(&rhs) < 1e-9);
            let b = calibrated_zf_beamform(&h, &model, 1.0).unwrap();
            assert!((b.power() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_wrong_widths() {
        let cal = RowCalibrator::identity(8, &[4], 0, 1.0).unwrap();
        assert!(antenna_calibrate(&ComplexMatrix::zeros(3, 3), &cal).is_err());
        assert!(RowCalibrator::identity(8, &[4], 0, 0.0).is_err());
    }

    #[test]
    fn taped_zf_rate_matches_plain_value_and_analytic_gradient() {
        let mut rng = StreamRng::new(7, 0);
        for _ in 0..5 {
            let h = random(&mut rng, 2, 4);
            let x = h.add(&random(&mut rng, 2, 4).scale(0.3)).unwrap();
            let mut tape = Tape::new();
            let xv = CVar::param(&mut tape, &x);
            let r = zf_sum_rate_taped(&mut tape, &h, xv, 1.5, 0.2).unwrap();
            let plain = sum_rate(&h, &zf(&x, 1.5).unwrap().v, 0.2).unwrap();
            assert!((tape.scalar(r) - plain).abs() < 1e-12);
            let g = tape.backward(r).unwrap();
            let taped = ComplexMatrix::from_parts(g.get(xv.re) * 0.5, g.get(xv.im) * 0.5).unwrap();
            let analytic = grad_sum_rate_x(&h, &x, 1.5, 0.2).unwrap();
            let err = fro_norm(&taped.sub(&analytic).unwrap()) / fro_norm(&analytic);
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn both_gradient_paths_agree_on_a_training_step() {
        let cfg = small_cfg(4, 2, 2);
        let samples = generate_batch(&cfg, 0, 6);
        let channels: Vec<_> = samples.iter().map(ChannelSample::downlink_rows).collect();
        let mut model = CalibratedZf {
            calibrator: RowCalibrator::random(8, &[6], 1, 1.0).unwrap(),
        };
        model.calibrator.mlp.set_mode(Mode::Train);
        let batch: Vec<usize> = (0..6).collect();
        let a = perfect_csi_step(&model, &batch, &channels, &cfg, GradientPath::Analytic).unwrap();
        let t = perfect_csi_step(&model, &batch, &channels, &cfg, GradientPath::Tape).unwrap();
        assert!((a.sum_rate - t.sum_rate).abs() < 1e-12);
        let diff: f64 = a.grads[0]
            .tensors()
            .iter()
            .zip(t.grads[0].tensors())
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)))
            .sum::<f64>()
            .sqrt();
        assert!(diff / a.grads[0].norm() < 1e-6, "{}", diff / a.grads[0].norm());
    }

    #[test]
    fn calibrated_zf_gradient_matches_finite_differences() {
        // M = 4, K = 2, loss through the whole calibrated ZF in eval mode
        let cfg = small_cfg(4, 2, 2);
        let samples = generate_batch(&cfg, 10, 3);
        let channels: Vec<_> = samples.iter().map(ChannelSample::downlink_rows).collect();
        let mut model = CalibratedZf {
            calibrator: RowCalibrator::random(8, &[5], 2, 1.0).unwrap(),
        };
        perturbed(&mut model.calibrator, 2);
        model.calibrator.mlp.set_mode(Mode::Eval);
        let batch: Vec<usize> = (0..3).collect();
        let step = perfect_csi_step(&model, &batch, &channels, &cfg, GradientPath::Tape).unwrap();
        let analytic: Vec<f64> = step.grads[0].tensors().iter().flat_map(|t| t.to_vec()).collect();
        let loss = |m: &CalibratedZf| -> f64 {
            -channels
                .iter()
                .map(|h| sum_rate(h, &calibrated_zf_beamform(h, m, cfg.power_dl).unwrap().v, cfg.noise_dl).unwrap())
                .sum::<f64>()
                / 3.0
        };
        let mut numeric = Vec::new();
        let n_tensors = model.clone().calibrator.mlp.trainable_mut().len();
        for t in 0..n_tensors {
            let len = model.clone().calibrator.mlp.trainable_mut()[t].len();
            for e in 0..len {
                let mut p = model.clone();
                p.calibrator.mlp.trainable_mut()[t][e] += 1e-6;
                let mut q = model.clone();
                q.calibrator.mlp.trainable_mut()[t][e] -= 1e-6;
                numeric.push((loss(&p) - loss(&q)) / 2e-6);
            }
        }
        let num: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(num / den < 1e-4, "{}", num / den);
    }

    #[test]
    fn implicit_identity_pipeline_is_ls_then_zf() {
        let cfg = SystemConfig {
            f_dl: SystemConfig::default().f_ul,
            noise_ul: 0.0,
            gain_coupling: crate::channel::GainCoupling::Shared,
            ..small_cfg(8, 3, 4)
        };
        let hyper = TrainHyper {
            user_hidden: vec![8],
            antenna_hidden: vec![8],
            ..TrainHyper::default()
        };
        let pipeline = ImplicitPipeline::identity(&cfg, &hyper).unwrap();
        let samples = generate_with_pilots(&cfg, &pipeline.pilots, 0, 5).unwrap();
        for s in &samples {
            let b = implicit_beamform(s.pilots_rx.as_ref().unwrap(), &pipeline, cfg.power_dl).unwrap();
            let reference = zf(&s.downlink_rows(), cfg.power_dl).unwrap();
            assert!(b.v.max_abs_diff(&reference.v) < 1e-9);
        }
        let ys: Vec<_> = samples.iter().map(|s| s.pilots_rx.as_ref().unwrap()).collect();
        let batched = pipeline.beamform_batch(&ys, cfg.power_dl).unwrap();
        for (s, b) in samples.iter().zip(batched) {
            let single = implicit_beamform(s.pilots_rx.as_ref().unwrap(), &pipeline, cfg.power_dl).unwrap();
            assert!(b.unwrap().v.max_abs_diff(&single.v) < 1e-12);
        }
    }

    fn random_pipeline(cfg: &SystemConfig) -> ImplicitPipeline {
        let hyper = TrainHyper {
            user_hidden: vec![10],
            antenna_hidden: vec![10],
            ..TrainHyper::default()
        };
        let mut p = ImplicitPipeline::identity(cfg, &hyper).unwrap();
        p.ls_calib = RowCalibrator::random(2 * cfg.pilot_length, &[10], 1, p.ls_calib.input_scale).unwrap();
        p.channel_map = RowCalibrator::random(2 * cfg.antennas, &[10], 2, 1.0).unwrap();
        p.zf_calib.calibrator = RowCalibrator::random(2 * cfg.antennas, &[10], 3, 1.0).unwrap();
        // keep the random maps close to the identity so ZF stays well posed
        for cal in [&mut p.ls_calib, &mut p.channel_map, &mut p.zf_calib.calibrator] {
            let last = cal.mlp.weights.len() - 1;
            cal.mlp.weights[last].mapv_inplace(|w| 0.1 * w);
        }
        p
    }

    #[test]
    fn implicit_pipeline_is_antenna_equivariant() {
        // user-row networks see the antenna order inside each row, so only
        // the antenna-shared stage and LS commute with antenna permutations
        let cfg = small_cfg(6, 2, 3);
        let mut p = random_pipeline(&cfg);
        p.channel_map = RowCalibrator::identity(12, &[4], 0, 1.0).unwrap();
        p.zf_calib = CalibratedZf::identity(6, &[4], 0).unwrap();
        let samples = generate_with_pilots(&cfg, &p.pilots, 0, 10).unwrap();
        let mut rng = StreamRng::new(9, 0);
        for s in &samples {
            let y = s.pilots_rx.as_ref().unwrap();
            let perm = rng.permutation(6);
            let lhs = implicit_beamform(&y.permute_rows(&perm), &p, cfg.power_dl).unwrap().v;
            let rhs = implicit_beamform(y, &p, cfg.power_dl).unwrap().v.permute_rows(&perm);
            assert!(lhs.max_abs_diff(&rhs) < 1e-9);
        }
    }

    #[test]
    fn implicit_pipeline_is_user_equivariant() {
        let cfg = small_cfg(6, 3, 3);
        let p = random_pipeline(&cfg);
        let samples = generate_batch(&cfg, 0, 10);
        let mut rng = StreamRng::new(10, 0);
        for s in &samples {
            // permuting users permutes the pilot rows they send
            let perm = rng.permutation(3);
            let y = cmul(&s.h_ul, &p.pilots).unwrap();
            let mut q = p.clone();
            q.pilots = p.pilots.permute_rows(&perm);
            let y_perm = cmul(&s.h_ul.permute_cols(&perm), &q.pilots).unwrap();
            assert!(y_perm.max_abs_diff(&y) < 1e-12);
            let lhs = implicit_beamform(&y_perm, &q, cfg.power_dl).unwrap().v;
            let rhs = implicit_beamform(&y, &p, cfg.power_dl).unwrap().v.permute_cols(&perm);
            assert!(lhs.max_abs_diff(&rhs) < 1e-9);
        }
    }

    #[test]
    fn implicit_gradient_reaches_antenna_network() {
        let cfg = small_cfg(6, 2, 2);
        let p = random_pipeline(&cfg);
        let samples = generate_with_pilots(&cfg, &p.pilots, 0, 8).unwrap();
        let q = ls_operator(&p.pilots).unwrap();
        let batch: Vec<usize> = (0..8).collect();
        let step = implicit_step(&p, &batch, &samples, &q, &cfg, GradientPath::Analytic).unwrap();
        assert!(step.grads.iter().all(|g| g.norm() > 0.0));
        let taped = implicit_step(&p, &batch, &samples, &q, &cfg, GradientPath::Tape).unwrap();
        for (a, t) in step.grads.iter().zip(&taped.grads) {
            let mut d = a.clone();
            d.scale(-1.0);
            d.accumulate(t);
            assert!(d.norm() / a.norm() < 1e-6);
        }
    }

    #[test]
    fn taped_implicit_forward_matches_inference() {
        let cfg = small_cfg(5, 2, 3);
        let p = random_pipeline(&cfg);
        let samples = generate_with_pilots(&cfg, &p.pilots, 0, 4).unwrap();
        let ys: Vec<_> = samples.iter().map(|s| s.pilots_rx.as_ref().unwrap()).collect();
        let q = ls_operator(&p.pilots).unwrap();
        let mut tape = Tape::new();
        let (x, _, _) = implicit_forward(&mut tape, &p, &ys, &q).unwrap();
        let xs = split_rows(tape.value(x), ys.iter().map(|_| 2)).unwrap();
        for (y, xb) in ys.iter().zip(&xs) {
            let plain = user_calibrate(&p.downlink_estimate(y).unwrap(), &p.zf_calib.calibrator).unwrap();
            assert!(plain.max_abs_diff(xb) < 1e-12);
        }
    }

    #[test]
    fn smoke_training_is_finite_and_deterministic() {
        let cfg = small_cfg(8, 2, 2);
        let train = generate_batch(&cfg, 0, 64);
        let held = generate_batch(&cfg, 1000, 16);
        let hyper = TrainHyper {
            epochs: 1,
            batch_size: 16,
            user_hidden: vec![16, 16],
            ..TrainHyper::default()
        };
        let (m1, c1) = train_perfect_csi(&train, &held, &cfg, &hyper).unwrap();
        let (m2, c2) = train_perfect_csi(&train, &held, &cfg, &hyper).unwrap();
        assert!(c1
            .iter()
            .all(|e| e.train_loss.is_finite() && e.heldout_sum_rate.is_finite()));
        assert_eq!(c1, c2);
        assert_eq!(m1, m2);
        assert_eq!(m1.calibrator.mlp.mode, Mode::Eval);
    }

    #[test]
    fn implicit_and_block_training_smoke() {
        let cfg = small_cfg(6, 2, 2);
        let pilots = default_pilots(&cfg);
        let train = generate_with_pilots(&cfg, &pilots, 0, 32).unwrap();
        let held = generate_with_pilots(&cfg, &pilots, 500, 8).unwrap();
        let hyper = TrainHyper {
            epochs: 2,
            batch_size: 8,
            user_hidden: vec![8],
            antenna_hidden: vec![8],
            ..TrainHyper::default()
        };
        let (p1, c1) = train_implicit(&train, &held, &cfg, &hyper).unwrap();
        let (p2, c2) = train_implicit(&train, &held, &cfg, &hyper).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(p1, p2);
        let (b, c) = train_block_by_block(&train, &held, &cfg, &hyper).unwrap();
        assert!(c.iter().all(|e| e.train_loss.is_finite()));
        assert!(b.mse(&held).unwrap().is_finite());
        assert!(train_implicit(&generate_batch(&cfg, 0, 4), &held, &cfg, &hyper).is_err());
    }

    #[test]
    fn mismatch_against_itself_is_one() {
        let cfg = small_cfg(8, 3, 3);
        let mut model = CalibratedZf {
            calibrator: RowCalibrator::random(16, &[8], 4, 1.0).unwrap(),
        };
        let last = model.calibrator.mlp.weights.len() - 1;
        model.calibrator.mlp.weights[last].mapv_inplace(|w| 0.1 * w);
        let points = evaluate_mismatch(&model, &cfg, &[3, 5], 20, 0, &[(3, &model)]).unwrap();
        assert_eq!(points[0].ratio, Some(1.0));
        assert!(points[1].ratio.is_none());
        assert!(evaluate_mismatch(&model, &cfg, &[9], 5, 0, &[]).is_err());
    }

    #[test]
    fn models_round_trip_through_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(6, 2, 3);
        let p = random_pipeline(&cfg);
        let manifest = ModelManifest::new(ModelKind::Implicit, &cfg, &TrainHyper::default(), 7);
        p.save(dir.path().join("implicit"), manifest).unwrap();
        let (back, m) = ImplicitPipeline::load(dir.path().join("implicit")).unwrap();
        assert_eq!(back, p);
        assert_eq!(m.dataset_seed, 7);
        assert!(CalibratedZf::load(dir.path().join("implicit")).is_err());

        let zf_model = p.zf_calib.clone();
        let manifest = ModelManifest::new(ModelKind::PerfectCsi, &cfg, &TrainHyper::default(), 7);
        zf_model.save(dir.path().join("zf"), manifest).unwrap();
        let (back, _) = CalibratedZf::load(dir.path().join("zf")).unwrap();
        let samples = generate_batch(&cfg, 0, 5);
        assert_eq!(
            back.sum_rates(&samples, &cfg).unwrap(),
            zf_model.sum_rates(&samples, &cfg).unwrap()
        );
    }
}
