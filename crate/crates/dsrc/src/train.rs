//! Two-stage optimization: autoencoder pretraining, then full-batch joint
//! training of the self-expression + sparsity + reconstruction objective,
//! with checkpointing and per-iteration loss traces.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::LabeledDataset;
use crate::error::{DsrcError, Result};
use crate::network::{decode, encode, DecoderState, EncoderState, NetworkSpec};
use crate::sparse::{SparseCodingLayer, SparseMode};
use crate::tensor::{Parameter, Tensor};

fn default_lambda0() -> f64 { 1.0 }
fn default_lambda1() -> f64 { 8.0 }
fn default_lr() -> f64 { 1e-3 }
fn default_pretrain_epochs() -> usize { 2000 }
fn default_pretrain_batch() -> usize { 100 }
fn default_joint_iters() -> usize { 1000 }
fn default_p() -> f64 { 1.0 }
fn default_beta1() -> f64 { 0.9 }
fn default_beta2() -> f64 { 0.999 }
fn default_eps() -> f64 { 1e-8 }

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lambda0")]
    pub lambda0: f64,
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_pretrain_batch")]
    pub pretrain_batch: usize,
    #[serde(default = "default_joint_iters")]
    pub joint_iters: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lambda0: default_lambda0(),
            lambda1: default_lambda1(),
            learning_rate: default_lr(),
            pretrain_epochs: default_pretrain_epochs(),
            pretrain_batch: default_pretrain_batch(),
            joint_iters: default_joint_iters(),
            p: default_p(),
            seed: 0,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda0 <= 0.0 || self.lambda1 <= 0.0 || self.learning_rate <= 0.0 {
            return Err(DsrcError::InvalidHyperparameter(
                "lambda0, lambda1 and learning_rate must be positive".into(),
            ));
        }
        if ![0.5, 1.0, 1.5, 2.0].contains(&self.p) {
            return Err(DsrcError::InvalidHyperparameter(format!(
                "p must be one of 0.5, 1, 1.5, 2; got {}",
                self.p
            )));
        }
        if self.pretrain_batch == 0 {
            return Err(DsrcError::InvalidHyperparameter("pretrain_batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// One loss-trace record. For pretraining only `total`/`recon` are nonzero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub total: f64,
    pub selfexpr: f64,
    pub reg: f64,
    pub recon: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
}

impl LossTrace {
    pub fn push(&mut self, rec: TraceRecord) {
        self.records.push(rec);
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iter,total,selfexpr,reg,recon,seconds")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.6}",
                r.iter, r.total, r.selfexpr, r.reg, r.recon, r.seconds
            )?;
        }
        Ok(())
    }

    /// Mean of `total` over a trailing window ending at `end` (exclusive).
    pub fn windowed_mean(&self, end: usize, window: usize) -> f64 {
        let start = end.saturating_sub(window);
        let slice = &self.records[start..end];
        slice.iter().map(|r| r.total).sum::<f64>() / slice.len() as f64
    }
}

/// ADAM with bias correction; moment state is kept per parameter name across
/// calls.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Adam {
        Adam {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &[Parameter]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            let name = p.name();
            let grad = p.grad().clone();
            if !grad.all_finite() {
                return Err(DsrcError::TrainingDiverged {
                    what: format!("gradient of {name}"),
                });
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(&grad.shape), Tensor::zeros(&grad.shape)));
            let mut value = p.value_mut();
            for i in 0..grad.data.len() {
                let g = grad.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g * g;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                value.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrained,
    Joint,
}

/// Serialized model state: architecture, config, stage tag and all parameter
/// tensors by name.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub config: TrainConfig,
    pub stage: Stage,
    pub iteration: u64,
    pub sparse_dims: Option<(usize, usize, SparseMode)>,
    pub params: Vec<(String, Tensor)>,
}

const CKPT_MAGIC: &[u8; 8] = b"DSRCCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: NetworkSpec,
    config: TrainConfig,
    stage: Stage,
    iteration: u64,
    sparse_dims: Option<(usize, usize, SparseMode)>,
    params: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn capture(
        spec: &NetworkSpec,
        config: &TrainConfig,
        stage: Stage,
        iteration: u64,
        encoder: &EncoderState,
        decoder: &DecoderState,
        layer: Option<&SparseCodingLayer>,
    ) -> Checkpoint {
        let mut params = Vec::new();
        for p in encoder.kernels.iter().chain(&decoder.kernels) {
            params.push((p.name(), p.value().clone()));
        }
        let sparse_dims = layer.map(|l| {
            params.push((l.parameter().name(), l.parameter().value().clone()));
            (l.n(), l.m(), l.mode())
        });
        Checkpoint {
            spec: spec.clone(),
            config: config.clone(),
            stage,
            iteration,
            sparse_dims,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            spec: self.spec.clone(),
            config: self.config.clone(),
            stage: self.stage,
            iteration: self.iteration,
            sparse_dims: self.sparse_dims,
            params: self.params.iter().map(|(n, t)| (n.clone(), t.shape.clone())).collect(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CKPT_MAGIC)?;
        f.write_u32::<LittleEndian>(CKPT_VERSION)?;
        f.write_u64::<LittleEndian>(header_json.len() as u64)?;
        f.write_all(&header_json)?;
        for (_, t) in &self.params {
            for v in &t.data {
                f.write_f64::<LittleEndian>(*v)?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| DsrcError::Format("truncated checkpoint".into()))?;
        if &magic != CKPT_MAGIC {
            return Err(DsrcError::Format("bad checkpoint magic bytes".into()));
        }
        let version = f.read_u32::<LittleEndian>()?;
        if version != CKPT_VERSION {
            return Err(DsrcError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = f.read_u64::<LittleEndian>()? as usize;
        let mut header_json = vec![0u8; header_len];
        f.read_exact(&mut header_json)
            .map_err(|_| DsrcError::Format("truncated checkpoint header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&header_json)?;
        let mut params = Vec::with_capacity(header.params.len());
        for (name, shape) in header.params {
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0; numel];
            f.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|_| DsrcError::Format(format!("truncated parameter block {name}")))?;
            params.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Checkpoint {
            spec: header.spec,
            config: header.config,
            stage: header.stage,
            iteration: header.iteration,
            sparse_dims: header.sparse_dims,
            params,
        })
    }

    /// Rebuild live states from the stored tensors.
    pub fn restore(&self) -> Result<(EncoderState, DecoderState, Option<SparseCodingLayer>)> {
        let by_name: HashMap<&str, &Tensor> =
            self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let fetch = |name: String| -> Result<Parameter> {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| DsrcError::Format(format!("checkpoint missing parameter {name}")))?;
            Ok(Parameter::new(&name, (*t).clone()))
        };
        let enc = EncoderState {
            kernels: (0..self.spec.encoder.len())
                .map(|i| fetch(format!("encoder.{i}")))
                .collect::<Result<_>>()?,
        };
        let dec = DecoderState {
            kernels: (0..self.spec.decoder.len())
                .map(|i| fetch(format!("decoder.{i}")))
                .collect::<Result<_>>()?,
        };
        let layer = match self.sparse_dims {
            None => None,
            Some((n, m, mode)) => {
                let name = match mode {
                    SparseMode::Structured => "sparse.A",
                    SparseMode::FullSelfExpressive => "sparse.C",
                };
                let p = fetch(name.to_string())?;
                Some(SparseCodingLayer::from_parameter(p, n, m, mode)?)
            }
        };
        Ok((enc, dec, layer))
    }
}

/// Minibatch reconstruction-only training of the encoder-decoder pair.
/// Shuffles all samples (both partitions) each epoch with a seeded RNG.
pub fn pretrain(
    encoder: &EncoderState,
    decoder: &DecoderState,
    spec: &NetworkSpec,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<LossTrace> {
    use rand::{Rng, SeedableRng};
    config.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed ^ 0x7072_6574);
    let params: Vec<Parameter> = encoder
        .kernels
        .iter()
        .chain(&decoder.kernels)
        .cloned()
        .collect();
    let mut adam = Adam::new(config);
    let mut trace = LossTrace::default();
    let start = Instant::now();
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut iter = 0usize;
    for _epoch in 0..config.pretrain_epochs {
        // Fisher-Yates shuffle
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.pretrain_batch) {
            let x = data.batch(chunk);
            let mut g = Graph::new();
            let xv = g.input(x);
            let z = encode(&mut g, spec, encoder, xv)?;
            let xhat = decode(&mut g, spec, decoder, z)?;
            let diff = g.sub(xv, xhat)?;
            let loss = g.frobenius_sq(diff);
            let total = g.value(loss).scalar_value();
            if !total.is_finite() {
                return Err(DsrcError::TrainingDiverged { what: "pretraining loss".into() });
            }
            for p in &params {
                p.zero_grad();
            }
            g.backward(loss)?;
            adam.step(&params)?;
            iter += 1;
            trace.push(TraceRecord {
                iter,
                total,
                selfexpr: 0.0,
                reg: 0.0,
                recon: total,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(trace)
}

/// Result of the joint stage. `converged == false` reproduces the
/// "did not converge" outcome (expected for p = 0.5) without crashing.
pub struct JointResult {
    pub trace: LossTrace,
    pub checkpoint: Checkpoint,
    pub converged: bool,
}

/// Window used for convergence assessment on the loss trace.
pub const CONVERGENCE_WINDOW: usize = 20;

/// Full-batch joint training of encoder, decoder and the sparse coding layer.
/// Feeds [X_train, X_test] as one batch each iteration.
pub fn train_joint(
    encoder: &EncoderState,
    decoder: &DecoderState,
    layer: &SparseCodingLayer,
    spec: &NetworkSpec,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<JointResult> {
    config.validate()?;
    if layer.n() != data.train_idx.len() || layer.m() != data.test_idx.len() {
        return Err(DsrcError::InvalidShape(format!(
            "sparse layer is {}x{} but dataset partition is {}/{}",
            layer.n(),
            layer.m(),
            data.train_idx.len(),
            data.test_idx.len()
        )));
    }

    let ordered: Vec<usize> = data.train_idx.iter().chain(&data.test_idx).copied().collect();
    let x = data.batch(&ordered);

    let mut params: Vec<Parameter> = encoder
        .kernels
        .iter()
        .chain(&decoder.kernels)
        .cloned()
        .collect();
    params.push(layer.parameter().clone());

    // fresh moment state: the joint objective is a different problem
    let mut adam = Adam::new(config);
    let mut trace = LossTrace::default();
    let start = Instant::now();

    for iter in 0..config.joint_iters {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let z = encode(&mut g, spec, encoder, xv)?;
        let zhat = match layer.mode() {
            SparseMode::Structured => layer.apply(&mut g, z)?,
            SparseMode::FullSelfExpressive => layer.apply_full(&mut g, z)?,
        };
        let se_diff = g.sub(z, zhat)?;
        let selfexpr = g.frobenius_sq(se_diff);
        let reg_raw = layer.regularize(&mut g, config.p)?;
        let reg = g.scale(reg_raw, config.lambda0);
        let xhat = decode(&mut g, spec, decoder, zhat)?;
        let rec_diff = g.sub(xv, xhat)?;
        let recon_raw = g.frobenius_sq(rec_diff);
        let recon = g.scale(recon_raw, config.lambda1);
        let partial = g.add(selfexpr, reg)?;
        let loss = g.add(partial, recon)?;

        let total = g.value(loss).scalar_value();
        if !total.is_finite() {
            return Err(DsrcError::TrainingDiverged { what: "joint loss".into() });
        }
        let rec = TraceRecord {
            iter: iter + 1,
            total,
            selfexpr: g.value(selfexpr).scalar_value(),
            reg: g.value(reg).scalar_value(),
            recon: g.value(recon).scalar_value(),
            seconds: start.elapsed().as_secs_f64(),
        };
        trace.push(rec);

        for p in &params {
            p.zero_grad();
        }
        g.backward(loss)?;
        adam.step(&params)?;
        layer.project();
    }

    let converged = assess_convergence(&trace);
    let checkpoint = Checkpoint::capture(
        spec,
        config,
        Stage::Joint,
        config.joint_iters as u64,
        encoder,
        decoder,
        Some(layer),
    );
    Ok(JointResult { trace, checkpoint, converged })
}

/// A run converged when the windowed loss mean both dropped below its
/// starting level and did not bounce back up from its best value.
fn assess_convergence(trace: &LossTrace) -> bool {
    let n = trace.records.len();
    if n < 2 * CONVERGENCE_WINDOW {
        return true; // too short to judge
    }
    let initial = trace.windowed_mean(CONVERGENCE_WINDOW, CONVERGENCE_WINDOW);
    let last = trace.windowed_mean(n, CONVERGENCE_WINDOW);
    let best = (CONVERGENCE_WINDOW..=n)
        .map(|end| trace.windowed_mean(end, CONVERGENCE_WINDOW))
        .fold(f64::INFINITY, f64::min);
    let improved = last < 0.9 * initial;
    let stable = last <= 1.05 * best + 1e-12;
    improved && stable
}
