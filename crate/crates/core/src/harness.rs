//! Experiment configuration, orchestration, timing and CSV reports.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{error, info};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::baselines::{grad_sum_rate_v, mrt, sum_rate, wmmse, zf, Beamformer, WmmseOptions};
use crate::calibration::{
    fit, load_bundle, save_bundle, train_block_by_block, train_implicit, train_perfect_csi, BlockByBlock, CalibratedZf,
    ImplicitPipeline, ModelKind, ModelManifest, Networks, Step, TrainHyper, TrainingCurve,
};
use crate::channel::{
    dbm_to_watts, default_pilots, generate_batch, generate_with_pilots, ChannelSample, GainCoupling, SystemConfig,
};
use crate::error::{Error, Result};
use crate::linalg::ComplexMatrix;
use crate::neural::{MlpParameters, Mode, OutputInit, Tape};

/// `SystemConfig` with powers in dBm, as written in experiment files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSpec {
    pub antennas: usize,
    pub users: usize,
    /// Defaults to the user count.
    pub pilot_length: Option<usize>,
    pub f_ul: f64,
    pub f_dl: f64,
    pub d_over_lambda: f64,
    pub paths: usize,
    pub power_dl_dbm: f64,
    pub power_ul_dbm: f64,
    pub noise_dl_dbm: f64,
    pub noise_ul_dbm: f64,
    pub distance_range: (f64, f64),
    pub gain_coupling: GainCoupling,
}

impl Default for SystemSpec {
    fn default() -> Self {
        let d = SystemConfig::default();
        Self {
            antennas: d.antennas,
            users: d.users,
            pilot_length: None,
            f_ul: d.f_ul,
            f_dl: d.f_dl,
            d_over_lambda: d.d_over_lambda,
            paths: d.paths,
            power_dl_dbm: 5.0,
            power_ul_dbm: -10.0,
            noise_dl_dbm: -85.0,
            noise_ul_dbm: -85.0,
            distance_range: d.distance_range,
            gain_coupling: d.gain_coupling,
        }
    }
}

impl SystemSpec {
    pub fn to_config(&self, seed: u64) -> Result<SystemConfig> {
        let cfg = SystemConfig {
            antennas: self.antennas,
            users: self.users,
            pilot_length: self.pilot_length.unwrap_or(self.users),
            f_ul: self.f_ul,
            f_dl: self.f_dl,
            d_over_lambda: self.d_over_lambda,
            paths: self.paths,
            noise_dl: dbm_to_watts(self.noise_dl_dbm),
            noise_ul: dbm_to_watts(self.noise_ul_dbm),
            power_dl: dbm_to_watts(self.power_dl_dbm),
            power_ul: dbm_to_watts(self.power_ul_dbm),
            rng_seed: seed,
            distance_range: self.distance_range,
            gain_coupling: self.gain_coupling,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The swept parameter and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    Antennas(Vec<usize>),
    Users(Vec<usize>),
    PowerDlDbm(Vec<f64>),
    PowerUlDbm(Vec<f64>),
}

impl Sweep {
    pub fn len(&self) -> usize {
        match self {
            Sweep::Antennas(v) | Sweep::Users(v) => v.len(),
            Sweep::PowerDlDbm(v) | Sweep::PowerUlDbm(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn point(&self, base: &SystemSpec, i: usize) -> SystemSpec {
        let mut spec = base.clone();
        match self {
            Sweep::Antennas(v) => spec.antennas = v[i],
            Sweep::Users(v) => spec.users = v[i],
            Sweep::PowerDlDbm(v) => spec.power_dl_dbm = v[i],
            Sweep::PowerUlDbm(v) => spec.power_ul_dbm = v[i],
        }
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mrt,
    Zf,
    Wmmse,
    BlackboxMlp,
    NeuralCalibration,
    ImplicitPipeline,
    BlockByBlock,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Mrt,
        Method::Zf,
        Method::Wmmse,
        Method::BlackboxMlp,
        Method::NeuralCalibration,
        Method::ImplicitPipeline,
        Method::BlockByBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mrt => "mrt",
            Method::Zf => "zf",
            Method::Wmmse => "wmmse",
            Method::BlackboxMlp => "blackbox_mlp",
            Method::NeuralCalibration => "neural_calibration",
            Method::ImplicitPipeline => "implicit_pipeline",
            Method::BlockByBlock => "block_by_block",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(
            self,
            Method::BlackboxMlp | Method::NeuralCalibration | Method::ImplicitPipeline | Method::BlockByBlock
        )
    }

    pub fn needs_pilots(self) -> bool {
        matches!(self, Method::ImplicitPipeline | Method::BlockByBlock)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            train_count: 20_000,
            test_count: 2_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub system: SystemSpec,
    pub sweep: Sweep,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub hyper: TrainHyper,
    #[serde(default)]
    pub wmmse: WmmseOptions,
    #[serde(default = "default_output_path")]
    pub output_path: PathBuf,
    /// Resolved config and library version are written here when set.
    #[serde(default)]
    pub manifest_path: Option<PathBuf>,
    /// Wall-clock timings make reports differ between runs; off by default.
    #[serde(default)]
    pub record_timings: bool,
    #[serde(default = "default_timing_repeats")]
    pub timing_repeats: usize,
}

fn default_output_path() -> PathBuf {
    PathBuf::from("report.csv")
}

fn default_timing_repeats() -> usize {
    3
}

impl ExperimentConfig {
    /// Parses JSON; errors carry the line, column and field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config(format!(
                "line {}, column {}, field `{}`: {}",
                inner.line(),
                inner.column(),
                path,
                inner
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks every sweep point and the training settings.
    pub fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() {
            return Err(Error::Config("field `sweep`: empty sweep list".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("field `methods`: no methods selected".into()));
        }
        if self.dataset.test_count == 0 {
            return Err(Error::Config("field `dataset.test_count`: must be positive".into()));
        }
        if self.methods.iter().any(|m| m.is_learned()) {
            if self.dataset.train_count == 0 {
                return Err(Error::Config("field `dataset.train_count`: must be positive".into()));
            }
            self.hyper
                .validate()
                .map_err(|e| Error::Config(format!("field `hyper`: {e}")))?;
        }
        if self.timing_repeats == 0 {
            return Err(Error::Config("field `timing_repeats`: must be positive".into()));
        }
        for i in 0..self.sweep.len() {
            self.point_config(i)
                .map_err(|e| Error::Config(format!("field `sweep[{i}]`: {e}")))?;
        }
        Ok(())
    }

    pub fn points(&self) -> usize {
        self.sweep.len()
    }

    pub fn point_spec(&self, i: usize) -> SystemSpec {
        self.sweep.point(&self.system, i)
    }

    pub fn point_config(&self, i: usize) -> Result<SystemConfig> {
        self.point_spec(i).to_config(self.dataset.seed)
    }

    /// The unswept base system.
    pub fn base_config(&self) -> Result<SystemConfig> {
        self.system.to_config(self.dataset.seed)
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    #[serde(rename = "M")]
    pub antennas: usize,
    #[serde(rename = "K")]
    pub users: usize,
    #[serde(rename = "P_dl_dbm")]
    pub power_dl_dbm: f64,
    #[serde(rename = "P_ul_dbm")]
    pub power_ul_dbm: f64,
    pub mean_sum_rate_bps_hz: f64,
    pub std: f64,
    pub n_samples: usize,
    pub mean_inference_ms: f64,
}

pub const CSV_HEADER: &str = "method,M,K,P_dl_dbm,P_ul_dbm,mean_sum_rate_bps_hz,std,n_samples,mean_inference_ms";

pub const FAILURE_PREFIX: &str = "FAILED:";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        out.push_str(std::str::from_utf8(&body).map_err(|e| Error::Format(e.to_string()))?);
        Ok(out)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { rows })
    }

    /// True when a learned method diverged and a marker row was written.
    pub fn has_failures(&self) -> bool {
        self.rows.iter().any(|r| r.method.starts_with(FAILURE_PREFIX))
    }

    pub fn find(&self, method: Method) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.method == method.name())
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fully data-driven baseline: one MLP from the stacked channel (`2MK`) to
/// the stacked beamformer (`2MK`), rescaled to the power budget.
#[derive(Debug, Clone, PartialEq)]
pub struct BlackBox {
    pub mlp: MlpParameters,
    pub antennas: usize,
    pub users: usize,
}

impl Networks for BlackBox {
    fn nets(&self) -> Vec<&MlpParameters> {
        vec![&self.mlp]
    }
    fn nets_mut(&mut self) -> Vec<&mut MlpParameters> {
        vec![&mut self.mlp]
    }
}

impl BlackBox {
    pub fn new(antennas: usize, users: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let width = 2 * antennas * users;
        let mut dims = vec![width];
        dims.extend_from_slice(hidden);
        dims.push(width);
        let mut mlp = MlpParameters::new(&dims, seed, OutputInit::Random)?;
        mlp.set_mode(Mode::Eval);
        Ok(Self { mlp, antennas, users })
    }

    fn check(&self, h_rows: &ComplexMatrix) -> Result<()> {
        if h_rows.dim() != (self.users, self.antennas) {
            return Err(Error::dims("blackbox_mlp", h_rows.dim(), (self.users, self.antennas)));
        }
        Ok(())
    }

    fn raw_outputs(&self, h_rows: &[ComplexMatrix]) -> Result<Vec<ComplexMatrix>> {
        for h in h_rows {
            self.check(h)?;
        }
        let out = self.mlp.forward_eval(&flatten(h_rows))?;
        Ok((0..h_rows.len()).map(|b| self.unflatten(&out, b)).collect())
    }

    fn unflatten(&self, out: &Array2<f64>, b: usize) -> ComplexMatrix {
        let (m, k) = (self.antennas, self.users);
        let row = out.row(b);
        let re = Array2::from_shape_fn((m, k), |(i, j)| row[i * k + j]);
        let im = Array2::from_shape_fn((m, k), |(i, j)| row[m * k + i * k + j]);
        ComplexMatrix::from_parts(re, im).expect("equal shapes")
    }

    pub fn beamform(&self, h_rows: &ComplexMatrix, power: f64) -> Result<Beamformer> {
        let raw = self.raw_outputs(std::slice::from_ref(h_rows))?.remove(0);
        normalize(raw, power)
    }

    pub fn sum_rates(&self, samples: &[ChannelSample], cfg: &SystemConfig) -> Result<Vec<f64>> {
        let rows: Vec<ComplexMatrix> = samples.iter().map(ChannelSample::downlink_rows).collect();
        let raw = self.raw_outputs(&rows)?;
        rows.iter()
            .zip(raw)
            .map(|(h, u)| sum_rate(h, &normalize(u, cfg.power_dl)?.v, cfg.noise_dl))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>, manifest: ModelManifest) -> Result<()> {
        save_bundle(dir.as_ref(), manifest, &[("blackbox", &self.mlp, 1.0)], None)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, ModelManifest)> {
        let (manifest, mut nets) = load_bundle(dir.as_ref(), ModelKind::Blackbox)?;
        let net = nets
            .pop()
            .ok_or_else(|| Error::Format("blackbox manifest without network".into()))?;
        let (m, k) = (manifest.antennas, manifest.users_train);
        if net.mlp.input_dim() != 2 * m * k || net.mlp.output_dim() != 2 * m * k {
            return Err(Error::Format(
                "blackbox network does not match manifest dimensions".into(),
            ));
        }
        Ok((
            Self {
                mlp: net.mlp,
                antennas: m,
                users: k,
            },
            manifest,
        ))
    }
}

/// `[Re H row major | Im H row major]`, one sample per row.
fn flatten(h_rows: &[ComplexMatrix]) -> Array2<f64> {
    let (k, m) = h_rows[0].dim();
    let mut out = Array2::zeros((h_rows.len(), 2 * k * m));
    for (b, h) in h_rows.iter().enumerate() {
        let mut row = out.row_mut(b);
        for (i, x) in h.re().iter().chain(h.im().iter()).enumerate() {
            row[i] = *x;
        }
    }
    out
}

fn normalize(u: ComplexMatrix, power: f64) -> Result<Beamformer> {
    let norm = u.fro_norm_sq().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::ZeroChannel);
    }
    Ok(Beamformer {
        v: u.scale(power.sqrt() / norm),
        power_budget: power,
    })
}

/// Trains the black-box baseline on the same loss and optimizer as the
/// calibration trainer.
pub fn blackbox_baseline_train(
    train: &[ChannelSample],
    heldout: &[ChannelSample],
    cfg: &SystemConfig,
    hyper: &TrainHyper,
) -> Result<(BlackBox, TrainingCurve)> {
    cfg.validate()?;
    let mut model = BlackBox::new(cfg.antennas, cfg.users, &hyper.blackbox_hidden, hyper.seed)?;
    let channels: Vec<ComplexMatrix> = train.iter().map(ChannelSample::downlink_rows).collect();
    for h in &channels {
        model.check(h)?;
    }
    let curve = fit(
        &mut model,
        train.len(),
        hyper,
        |m, batch| blackbox_step(m, batch, &channels, cfg),
        |m| Ok(mean_std(&m.sum_rates(heldout, cfg)?).0),
    )?;
    Ok((model, curve))
}

fn blackbox_step(model: &BlackBox, batch: &[usize], channels: &[ComplexMatrix], cfg: &SystemConfig) -> Result<Step> {
    let hs: Vec<ComplexMatrix> = batch.iter().map(|&i| channels[i].clone()).collect();
    let mut tape = Tape::new();
    let handles = model.mlp.register(&mut tape);
    let input = tape.constant(flatten(&hs));
    let (out, stats) = model.mlp.forward_taped(&mut tape, &handles, input)?;
    let values = tape.value(out).clone();
    let n = batch.len() as f64;
    let mk = model.antennas * model.users;
    let mut coef = Array2::zeros(values.dim());
    let mut total = 0.0;
    for (b, h) in hs.iter().enumerate() {
        let u = model.unflatten(&values, b);
        let norm = u.fro_norm_sq().sqrt();
        let c = cfg.power_dl.sqrt();
        let v = normalize(u.clone(), cfg.power_dl)?.v;
        total += sum_rate(h, &v, cfg.noise_dl)?;
        // V = c U / ‖U‖:  ∂R/∂U* = (c/‖U‖) (G - Re<G, U> U / ‖U‖²)
        let g = grad_sum_rate_v(h, &v, cfg.noise_dl)?;
        let inner = (g.re() * u.re()).sum() + (g.im() * u.im()).sum();
        let gu = g.sub(&u.scale(inner / (norm * norm)))?.scale(c / norm);
        let mut row = coef.row_mut(b);
        for (i, x) in gu.re().iter().enumerate() {
            row[i] = -2.0 * x / n;
        }
        for (i, x) in gu.im().iter().enumerate() {
            row[mk + i] = -2.0 * x / n;
        }
    }
    let cv = tape.constant(coef);
    let weighted = tape.mul(out, cv)?;
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss)?;
    let rate = total / n;
    Ok(Step {
        grads: vec![model.mlp.grads(&handles, &grads)],
        stats: vec![stats],
        loss: -rate,
        sum_rate: rate,
    })
}

/// A method ready for inference.
#[derive(Debug, Clone)]
pub enum PreparedMethod {
    Mrt,
    Zf,
    Wmmse(WmmseOptions),
    Blackbox(BlackBox),
    Neural(CalibratedZf),
    Implicit(ImplicitPipeline),
    Block(BlockByBlock),
}

impl PreparedMethod {
    pub fn method(&self) -> Method {
        match self {
            PreparedMethod::Mrt => Method::Mrt,
            PreparedMethod::Zf => Method::Zf,
            PreparedMethod::Wmmse(_) => Method::Wmmse,
            PreparedMethod::Blackbox(_) => Method::BlackboxMlp,
            PreparedMethod::Neural(_) => Method::NeuralCalibration,
            PreparedMethod::Implicit(_) => Method::ImplicitPipeline,
            PreparedMethod::Block(_) => Method::BlockByBlock,
        }
    }

    /// Learned methods with untrained (identity or random) networks; their
    /// inference cost equals that of trained ones.
    pub fn untrained(method: Method, cfg: &SystemConfig, hyper: &TrainHyper, wmmse: &WmmseOptions) -> Result<Self> {
        Ok(match method {
            Method::Mrt => PreparedMethod::Mrt,
            Method::Zf => PreparedMethod::Zf,
            Method::Wmmse => PreparedMethod::Wmmse(*wmmse),
            Method::BlackboxMlp => PreparedMethod::Blackbox(BlackBox::new(
                cfg.antennas,
                cfg.users,
                &hyper.blackbox_hidden,
                hyper.seed,
            )?),
            Method::NeuralCalibration => {
                PreparedMethod::Neural(CalibratedZf::identity(cfg.antennas, &hyper.user_hidden, hyper.seed)?)
            }
            Method::ImplicitPipeline => PreparedMethod::Implicit(ImplicitPipeline::identity(cfg, hyper)?),
            Method::BlockByBlock => PreparedMethod::Block(BlockByBlock::identity(cfg, hyper)?),
        })
    }

    /// Single-sample inference path, the one that is timed.
    pub fn beamform(&self, sample: &ChannelSample, cfg: &SystemConfig) -> Result<Beamformer> {
        let pilots = || {
            sample
                .pilots_rx
                .as_ref()
                .ok_or_else(|| Error::Config("sample has no received pilots".into()))
        };
        match self {
            PreparedMethod::Mrt => mrt(&sample.downlink_rows(), cfg.power_dl),
            PreparedMethod::Zf => zf(&sample.downlink_rows(), cfg.power_dl),
            PreparedMethod::Wmmse(opts) => {
                Ok(wmmse(&sample.downlink_rows(), cfg.power_dl, cfg.noise_dl, opts)?.beamformer)
            }
            PreparedMethod::Blackbox(m) => m.beamform(&sample.downlink_rows(), cfg.power_dl),
            PreparedMethod::Neural(m) => {
                crate::calibration::calibrated_zf_beamform(&sample.downlink_rows(), m, cfg.power_dl)
            }
            PreparedMethod::Implicit(p) => crate::calibration::implicit_beamform(pilots()?, p, cfg.power_dl),
            PreparedMethod::Block(b) => b.beamform(pilots()?, cfg.power_dl),
        }
    }

    /// Sum-rate of every sample against its true downlink channel.
    pub fn sum_rates(&self, samples: &[ChannelSample], cfg: &SystemConfig) -> Result<Vec<f64>> {
        match self {
            PreparedMethod::Blackbox(m) => m.sum_rates(samples, cfg),
            PreparedMethod::Neural(m) => m.sum_rates(samples, cfg),
            PreparedMethod::Implicit(p) => p.sum_rates(samples, cfg),
            PreparedMethod::Block(b) => b.sum_rates(samples, cfg),
            _ => samples
                .iter()
                .map(|s| sum_rate(&s.downlink_rows(), &self.beamform(s, cfg)?.v, cfg.noise_dl))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub median_ms: f64,
}

/// Per-sample inference wall time over `n_repeats` passes through `samples`,
/// after one untimed warm-up pass.
pub fn time_method(
    method: &PreparedMethod,
    samples: &[ChannelSample],
    cfg: &SystemConfig,
    n_repeats: usize,
) -> Result<Timing> {
    if samples.is_empty() || n_repeats == 0 {
        return Err(Error::Config("timing needs samples and at least one repeat".into()));
    }
    for s in samples {
        std::hint::black_box(method.beamform(s, cfg)?);
    }
    let mut per_sample = Vec::with_capacity(samples.len() * n_repeats);
    for _ in 0..n_repeats {
        for s in samples {
            let t = Instant::now();
            std::hint::black_box(method.beamform(s, cfg)?);
            per_sample.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mean_ms = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    per_sample.sort_by(f64::total_cmp);
    let mid = per_sample.len() / 2;
    let median_ms = if per_sample.len() % 2 == 0 {
        0.5 * (per_sample[mid - 1] + per_sample[mid])
    } else {
        per_sample[mid]
    };
    Ok(Timing { mean_ms, median_ms })
}

/// Train and test sets of one sweep point. Test samples follow the training
/// indices so the two never overlap.
pub fn point_datasets(
    cfg: &SystemConfig,
    dataset: &DatasetSpec,
    pilots: bool,
    train: bool,
) -> Result<(Vec<ChannelSample>, Vec<ChannelSample>)> {
    let gen = |start: u64, count: usize| -> Result<Vec<ChannelSample>> {
        if pilots {
            generate_with_pilots(cfg, &default_pilots(cfg), start, count)
        } else {
            Ok(generate_batch(cfg, start, count))
        }
    };
    let train_set = if train {
        gen(0, dataset.train_count)?
    } else {
        Vec::new()
    };
    let test_set = gen(dataset.train_count as u64, dataset.test_count)?;
    Ok((train_set, test_set))
}

/// Trains `method` at `cfg` (no-op for the classical methods).
pub fn prepare_method(
    method: Method,
    train: &[ChannelSample],
    heldout: &[ChannelSample],
    cfg: &SystemConfig,
    hyper: &TrainHyper,
    wmmse: &WmmseOptions,
) -> Result<PreparedMethod> {
    info!("preparing {method} at M={} K={}", cfg.antennas, cfg.users);
    Ok(match method {
        Method::BlackboxMlp => PreparedMethod::Blackbox(blackbox_baseline_train(train, heldout, cfg, hyper)?.0),
        Method::NeuralCalibration => PreparedMethod::Neural(train_perfect_csi(train, heldout, cfg, hyper)?.0),
        Method::ImplicitPipeline => PreparedMethod::Implicit(train_implicit(train, heldout, cfg, hyper)?.0),
        Method::BlockByBlock => PreparedMethod::Block(train_block_by_block(train, heldout, cfg, hyper)?.0),
        other => PreparedMethod::untrained(other, cfg, hyper, wmmse)?,
    })
}

fn report_row(method: &str, spec: &SystemSpec, cfg: &SystemConfig, rates: &[f64], ms: f64) -> ReportRow {
    let (mean, std) = mean_std(rates);
    ReportRow {
        method: method.to_string(),
        antennas: cfg.antennas,
        users: cfg.users,
        power_dl_dbm: spec.power_dl_dbm,
        power_ul_dbm: spec.power_ul_dbm,
        mean_sum_rate_bps_hz: mean,
        std,
        n_samples: rates.len(),
        mean_inference_ms: ms,
    }
}

fn failure_row(method: Method, spec: &SystemSpec, cfg: &SystemConfig) -> ReportRow {
    ReportRow {
        method: format!("{FAILURE_PREFIX}{method}"),
        antennas: cfg.antennas,
        users: cfg.users,
        power_dl_dbm: spec.power_dl_dbm,
        power_ul_dbm: spec.power_ul_dbm,
        mean_sum_rate_bps_hz: f64::NAN,
        std: f64::NAN,
        n_samples: 0,
        mean_inference_ms: f64::NAN,
    }
}

/// Evaluates prepared methods on one test set.
pub fn evaluate_point(
    methods: &[PreparedMethod],
    test: &[ChannelSample],
    spec: &SystemSpec,
    cfg: &SystemConfig,
    timing_repeats: Option<usize>,
) -> Result<Vec<ReportRow>> {
    methods
        .iter()
        .map(|m| {
            let rates = m.sum_rates(test, cfg)?;
            let ms = match timing_repeats {
                Some(n) => time_method(m, &test[..test.len().min(100)], cfg, n)?.mean_ms,
                None => 0.0,
            };
            Ok(report_row(m.method().name(), spec, cfg, &rates, ms))
        })
        .collect()
}

/// Runs every sweep point: datasets, training of learned methods, evaluation
/// on a common held-out set. Writes the CSV (and manifest) and returns the
/// report. A diverged training run leaves a failure marker row and the
/// remaining methods still run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut report = EvalReport::default();
    let pilots = cfg.methods.iter().any(|m| m.needs_pilots());
    let learned = cfg.methods.iter().any(|m| m.is_learned());
    for i in 0..cfg.points() {
        let spec = cfg.point_spec(i);
        let sys = cfg.point_config(i)?;
        let (train, test) = point_datasets(&sys, &cfg.dataset, pilots, learned)?;
        for &method in &cfg.methods {
            match prepare_method(method, &train, &test, &sys, &cfg.hyper, &cfg.wmmse) {
                Ok(prepared) => {
                    let timing = cfg.record_timings.then_some(cfg.timing_repeats);
                    report
                        .rows
                        .extend(evaluate_point(&[prepared], &test, &spec, &sys, timing)?);
                }
                Err(Error::Diverged { epoch }) => {
                    error!("{method} diverged at epoch {epoch}");
                    report.rows.push(failure_row(method, &spec, &sys));
                }
                Err(e) => return Err(e),
            }
        }
    }
    report.write_csv(&cfg.output_path)?;
    if let Some(path) = &cfg.manifest_path {
        write_run_manifest(path, cfg)?;
    }
    Ok(report)
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    library_version: &'a str,
    config: &'a ExperimentConfig,
    resolved_points: Vec<SystemConfig>,
}

pub fn write_run_manifest(path: impl AsRef<Path>, cfg: &ExperimentConfig) -> Result<()> {
    let manifest = RunManifest {
        library_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        resolved_points: (0..cfg.points()).map(|i| cfg.point_config(i)).collect::<Result<_>>()?,
    };
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Time-only report: inference cost of every method at every sweep point,
/// learned methods with untrained networks.
pub fn run_bench(cfg: &ExperimentConfig, n_samples: usize) -> Result<EvalReport> {
    cfg.validate()?;
    let mut report = EvalReport::default();
    let pilots = cfg.methods.iter().any(|m| m.needs_pilots());
    let dataset = DatasetSpec {
        train_count: 0,
        test_count: n_samples,
        seed: cfg.dataset.seed,
    };
    for i in 0..cfg.points() {
        let spec = cfg.point_spec(i);
        let sys = cfg.point_config(i)?;
        let (_, test) = point_datasets(&sys, &dataset, pilots, false)?;
        let prepared = cfg
            .methods
            .iter()
            .map(|&m| PreparedMethod::untrained(m, &sys, &cfg.hyper, &cfg.wmmse))
            .collect::<Result<Vec<_>>>()?;
        report
            .rows
            .extend(evaluate_point(&prepared, &test, &spec, &sys, Some(cfg.timing_repeats))?);
    }
    Ok(report)
}

/// Directory of a learned method's checkpoint under `root`.
pub fn checkpoint_dir(root: impl AsRef<Path>, method: Method) -> PathBuf {
    root.as_ref().join(method.name())
}

/// Saves a trained method under `root/<method>/`.
pub fn save_prepared(
    root: impl AsRef<Path>,
    prepared: &PreparedMethod,
    cfg: &SystemConfig,
    hyper: &TrainHyper,
    dataset_seed: u64,
) -> Result<()> {
    let dir = checkpoint_dir(root, prepared.method());
    let manifest = |kind| ModelManifest::new(kind, cfg, hyper, dataset_seed);
    match prepared {
        PreparedMethod::Blackbox(m) => m.save(dir, manifest(ModelKind::Blackbox)),
        PreparedMethod::Neural(m) => m.save(dir, manifest(ModelKind::PerfectCsi)),
        PreparedMethod::Implicit(p) => p.save(dir, manifest(ModelKind::Implicit)),
        PreparedMethod::Block(b) => b.save(dir, manifest(ModelKind::BlockByBlock)),
        _ => Ok(()),
    }
}

/// Loads a trained method from `root/<method>/`; classical methods need no file.
pub fn load_prepared(root: impl AsRef<Path>, method: Method, wmmse: &WmmseOptions) -> Result<PreparedMethod> {
    let dir = checkpoint_dir(root, method);
    Ok(match method {
        Method::Mrt => PreparedMethod::Mrt,
        Method::Zf => PreparedMethod::Zf,
        Method::Wmmse => PreparedMethod::Wmmse(*wmmse),
        Method::BlackboxMlp => PreparedMethod::Blackbox(BlackBox::load(dir)?.0),
        Method::NeuralCalibration => PreparedMethod::Neural(CalibratedZf::load(dir)?.0),
        Method::ImplicitPipeline => PreparedMethod::Implicit(ImplicitPipeline::load(dir)?.0),
        Method::BlockByBlock => PreparedMethod::Block(BlockByBlock::load(dir)?.0),
    })
}
