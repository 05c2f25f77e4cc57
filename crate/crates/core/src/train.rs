//! The three training stages, evaluation and ablation grids.
//!
//! Training code only ever receives a [`TrainSet`] (images and image-level
//! labels); ground-truth masks are used by [`evaluate`] alone.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::cam::{multiscale_cam, soft_maps, LocalizationMap};
use crate::config::TrainConfig;
use crate::data::{Dataset, SynthSample, TrainSet};
use crate::error::{Error, Result};
use crate::losses::{expansion_loss, shrinkage_loss, sigmoid_ce, LossValue};
use crate::metrics::{
    best_by_f1, best_by_miou, confusion_at, default_taus, multilabel_accuracy, threshold_sweep, EvalItem,
    SweepRow,
};
use crate::model::{Entry, Model, Stage};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub cls: f64,
    pub area: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub stage: Stage,
    pub seed: u64,
    pub records: Vec<LossRecord>,
    pub elapsed: Duration,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// `iteration,total,cls,area`, one row per iteration.
    pub fn log_csv(&self) -> String {
        let mut s = String::from("iteration,total,cls,area\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:.8},{:.8},{:.8}", r.iteration, r.total, r.cls, r.area);
        }
        s
    }
}

/// SGD with classical momentum: `v = m v + g; p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `slot` identifies the parameter across calls.
    pub fn step(&mut self, slot: usize, param: &mut [f32], grad: &[f32]) {
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != param.len() {
            *v = vec![0.0; param.len()];
        }
        let (lr, m) = (self.lr as f32, self.momentum as f32);
        for ((p, vi), &g) in param.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = m * *vi + g;
            *p -= lr * *vi;
        }
    }
}

pub fn tensor_digest(t: &Tensor) -> [u8; 32] {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of every parameter the current stage must not touch.
pub fn frozen_digests(model: &Model) -> Vec<(String, [u8; 32])> {
    model
        .params()
        .into_iter()
        .filter(|(n, _)| !model.trainable(n))
        .map(|(n, t)| (n, tensor_digest(t)))
        .collect()
}

fn check_frozen(model: &Model, reference: &[(String, [u8; 32])], iteration: usize) -> Result<()> {
    let now = frozen_digests(model);
    for ((name, before), (_, after)) in reference.iter().zip(&now) {
        if before != after {
            return Err(Error::FrozenDrift {
                name: name.clone(),
                iteration,
            });
        }
    }
    if now.len() != reference.len() {
        return Err(Error::Contract("set of frozen parameters changed during training".into()));
    }
    Ok(())
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let salt = match stage {
        Stage::Baseline => 0xB0,
        Stage::Expansion => 0xE1,
        Stage::Shrinkage => 0x52,
    };
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(salt)))
}

/// Epoch-wise shuffled mini-batches.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, size: usize, rng: ChaCha8Rng) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            size: size.min(n),
            rng,
        };
        b.order.shuffle(&mut b.rng);
        b.pos = 0;
        b
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        out
    }
}

/// Per-sample inputs at the model's frozen entry point.
fn stage_inputs(model: &Model, data: &TrainSet, entry: Entry) -> Result<Vec<Tensor>> {
    if entry == Entry::Image {
        return data
            .images
            .iter()
            .map(|t| {
                let s = t.shape().to_vec();
                t.clone().reshape(&[1, s[0], s[1], s[2]])
            })
            .collect();
    }
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(32) {
        let (images, _) = data.batch(chunk)?;
        let p = model.prefix(&images, entry)?;
        for i in 0..chunk.len() {
            out.push(p.sample(i)?);
        }
    }
    Ok(out)
}

fn divergence(iteration: usize, e: Error) -> Error {
    match e {
        Error::Numeric(reason) => Error::Divergence { iteration, reason },
        other => other,
    }
}

fn run_stage(model: &mut Model, data: &TrainSet, cfg: &TrainConfig) -> Result<TrainReport> {
    let start = Instant::now();
    let stage = model.stage;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if data.classes != model.config.classes {
        return Err(Error::Data(format!(
            "data has {} classes, model has {}",
            data.classes, model.config.classes
        )));
    }
    let (lr, iterations) = match stage {
        Stage::Baseline => (cfg.baseline_lr, cfg.baseline_iterations),
        Stage::Expansion => (cfg.expansion_lr, cfg.expansion_iterations),
        Stage::Shrinkage => (cfg.shrinkage_lr, cfg.shrinkage_iterations),
    };
    let entry = model.frozen_entry();
    let inputs = stage_inputs(model, data, entry)?;
    let reference = frozen_digests(model);
    let trainable: Vec<bool> = model
        .param_names()
        .iter()
        .map(|n| model.trainable(n))
        .collect();
    let mut sgd = Sgd::new(lr, cfg.momentum);
    let mut batches = Batches::new(data.len(), cfg.batch_size, stage_rng(cfg.seed, stage));
    let mut records = Vec::with_capacity(iterations);

    for it in 0..iterations {
        let idx = batches.next();
        let parts: Vec<&Tensor> = idx.iter().map(|&i| &inputs[i]).collect();
        let x = Tensor::stack(&parts)?;
        let labels = Tensor::new(
            vec![idx.len(), data.classes],
            idx.iter().flat_map(|&i| data.labels[i].iter().copied()).collect(),
        )?;

        let step = |model: &Model| -> Result<(Graph, Vec<crate::autograd::Var>, LossValue)> {
            let mut g = Graph::new();
            let b = model.bind(&mut g)?;
            let xv = g.constant(x.clone())?;
            let f = model.forward(&mut g, &b, entry, xv)?;
            let loss = match stage {
                Stage::Baseline => sigmoid_ce(&mut g, f.logits, &labels)?,
                Stage::Expansion => expansion_loss(&mut g, f.logits, &labels, cfg.alpha)?,
                Stage::Shrinkage => {
                    let maps = soft_maps(&mut g, f.evidence)?;
                    shrinkage_loss(&mut g, f.logits, &labels, maps, cfg.gamma, cfg.area_weight())?
                }
            };
            if !loss.total.is_finite() {
                return Err(Error::Numeric(format!("loss is {}", loss.total)));
            }
            g.backward(loss.var)?;
            Ok((g, b.vars().to_vec(), loss))
        };
        let (g, vars, loss) = step(model).map_err(|e| divergence(it, e))?;

        for (slot, (param, var)) in model.params_mut().into_iter().zip(&vars).enumerate() {
            if !trainable[slot] {
                continue;
            }
            if let Some(grad) = g.grad(*var) {
                sgd.step(slot, param.data_mut(), grad.data());
            }
        }
        if model.params().iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Divergence {
                iteration: it,
                reason: "parameter update produced a non-finite value".into(),
            });
        }
        records.push(LossRecord {
            iteration: it,
            total: loss.total,
            cls: loss.cls,
            area: loss.area,
        });
        if (it + 1) % cfg.freeze_check_every == 0 {
            check_frozen(model, &reference, it + 1)?;
        }
    }
    check_frozen(model, &reference, iterations)?;
    Ok(TrainReport {
        stage,
        seed: cfg.seed,
        records,
        elapsed: start.elapsed(),
        checkpoint: None,
    })
}

/// Train every non-offset parameter on the multi-label classification loss.
pub fn train_baseline(data: &TrainSet, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed));
    let mut model = Model::build(&cfg.model_config(), &mut rng)?;
    let report = run_stage(&mut model, data, cfg)?;
    Ok((model, report))
}

/// Learn the ES offsets by maximizing the classification loss while the
/// rest of the network stays fixed.
pub fn train_expansion(data: &TrainSet, cfg: &TrainConfig, baseline: &Model) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let mut model = Model::rewire(
        &cfg.model_config(),
        Stage::Expansion,
        baseline,
        cfg.ablation(),
        cfg.beta,
    )?;
    let report = run_stage(&mut model, data, cfg)?;
    Ok((model, report))
}

/// Learn the SS offsets on classification plus map area.
pub fn train_shrinkage(data: &TrainSet, cfg: &TrainConfig, expansion: &Model) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let mut model = Model::rewire(
        &cfg.model_config(),
        Stage::Shrinkage,
        expansion,
        cfg.ablation(),
        cfg.beta,
    )?;
    let report = run_stage(&mut model, data, cfg)?;
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageMetrics {
    pub stage: Stage,
    /// Per-label accuracy of `logit > 0` on the eval split.
    pub accuracy: f64,
    pub eval_tau: f64,
    /// Foreground recall at `eval_tau`.
    pub recall_at_tau: f64,
    pub precision_at_tau: f64,
    pub best_f1: SweepRow,
    pub best_miou: SweepRow,
    /// Mean map value over the present classes of every eval sample.
    pub mean_area: f64,
    pub sweep: Vec<SweepRow>,
}

impl StageMetrics {
    pub const CSV_HEADER: &'static str = "stage,accuracy,recall_at_tau,precision_at_tau,best_f1_tau,best_f1_precision,\
best_f1_recall,best_f1,best_miou_tau,seed_miou,mean_area";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.2},{:.6},{:.6},{:.6},{:.2},{:.6},{:.6}",
            self.stage,
            self.accuracy,
            self.recall_at_tau,
            self.precision_at_tau,
            self.best_f1.tau,
            self.best_f1.precision,
            self.best_f1.recall,
            self.best_f1.f1,
            self.best_miou.tau,
            self.best_miou.miou,
            self.mean_area,
        )
    }
}

pub fn stage_table_csv(rows: &[StageMetrics]) -> String {
    let mut s = format!("{}\n", StageMetrics::CSV_HEADER);
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Multi-scale CAMs of every sample, restricted to its labelled classes.
pub fn localization_maps(model: &Model, samples: &[SynthSample], scales: &[f64]) -> Result<Vec<LocalizationMap>> {
    samples
        .iter()
        .map(|s| multiscale_cam(model, &s.image, scales))
        .collect()
}

pub fn evaluate(model: &Model, samples: &[SynthSample], cfg: &TrainConfig) -> Result<StageMetrics> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let labels = model.config.classes + 1;
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    for chunk in samples.chunks(32) {
        let parts: Vec<Tensor> = chunk
            .iter()
            .map(|s| {
                let sh = s.image.shape().to_vec();
                s.image.clone().reshape(&[1, sh[0], sh[1], sh[2]])
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        logits.extend_from_slice(model.logits(&Tensor::stack(&refs)?)?.data());
        targets.extend(chunk.iter().flat_map(|s| s.labels.iter().map(|&l| l as f32)));
    }
    let accuracy = multilabel_accuracy(&logits, &targets)?;

    let maps = localization_maps(model, samples, &cfg.scales)?;
    let presents: Vec<Vec<usize>> = samples.iter().map(|s| s.present()).collect();
    let items: Vec<EvalItem> = samples
        .iter()
        .zip(&maps)
        .zip(&presents)
        .map(|((s, map), present)| EvalItem {
            map,
            present,
            gt: &s.gt_mask,
        })
        .collect();
    let sweep = threshold_sweep(&items, labels, &default_taus())?;
    let at_tau = confusion_at(&items, labels, cfg.eval_tau)?.foreground_prf();
    let (mut area, mut n) = (0.0, 0usize);
    for (map, present) in maps.iter().zip(&presents) {
        for &c in present {
            area += map.area(c);
            n += 1;
        }
    }
    Ok(StageMetrics {
        stage: model.stage,
        accuracy,
        eval_tau: cfg.eval_tau,
        recall_at_tau: at_tau.recall,
        precision_at_tau: at_tau.precision,
        best_f1: best_by_f1(&sweep).expect("non-empty sweep"),
        best_miou: best_by_miou(&sweep).expect("non-empty sweep"),
        mean_area: if n == 0 { 0.0 } else { area / n as f64 },
        sweep,
    })
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub baseline: Model,
    pub expansion: Model,
    pub shrinkage: Model,
    pub reports: Vec<TrainReport>,
    pub metrics: Vec<StageMetrics>,
}

/// Baseline, Expansion and Shrinkage in sequence, each evaluated on the
/// eval split. A trained baseline can be passed in to skip its training.
pub fn run_pipeline(data: &Dataset, cfg: &TrainConfig, baseline: Option<&Model>) -> Result<PipelineRun> {
    let train = data.train_set();
    let mut reports = Vec::new();
    let baseline = match baseline {
        Some(m) => m.clone(),
        None => {
            let (m, r) = train_baseline(&train, cfg)?;
            reports.push(r);
            m
        }
    };
    let (expansion, r) = train_expansion(&train, cfg, &baseline)?;
    reports.push(r);
    let (shrinkage, r) = train_shrinkage(&train, cfg, &expansion)?;
    reports.push(r);
    let metrics = [&baseline, &expansion, &shrinkage]
        .iter()
        .map(|m| evaluate(m, &data.eval, cfg))
        .collect::<Result<_>>()?;
    Ok(PipelineRun {
        baseline,
        expansion,
        shrinkage,
        reports,
        metrics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Alpha,
    Beta,
    GammaMu,
    Losses,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "beta" => Ok(Self::Beta),
            "gamma_mu" => Ok(Self::GammaMu),
            "losses" => Ok(Self::Losses),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (alpha, beta, gamma_mu, losses)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Beta => "beta",
            Self::GammaMu => "gamma_mu",
            Self::Losses => "losses",
        }
    }

    /// Values swept when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::Alpha => &["0.001", "0.005", "0.01", "0.05", "0.1"],
            Self::Beta => &["0.05", "0.1", "0.15", "0.3", "0.5"],
            Self::GammaMu => &["1:0.5", "1:1", "0.5:1", "1:2"],
            Self::Losses => &["cls", "area", "cls+area"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            Self::Alpha => cfg.set("alpha", value)?,
            Self::Beta => cfg.set("beta", value)?,
            Self::GammaMu => {
                let (g, m) = value
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("gamma_mu value `{value}` is not `gamma:mu`")))?;
                cfg.set("gamma", g.trim())?;
                cfg.set("mu", m.trim())?;
            }
            Self::Losses => {
                let (g, m) = match value {
                    "cls" => ("1", "0"),
                    "area" => ("0", "1"),
                    "cls+area" => ("1", "1"),
                    other => {
                        return Err(Error::Config(format!(
                            "losses value `{other}` (cls, area, cls+area)"
                        )))
                    }
                };
                cfg.set("gamma", g)?;
                cfg.set("mu", m)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub seed_miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis,value,seed_miou,precision,recall,f1\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.axis.name(),
            r.value,
            r.seed_miou,
            r.precision,
            r.recall,
            r.f1
        );
    }
    s
}

/// One full pipeline per value on a dataset generated from `base`. The
/// baseline does not depend on any swept setting and is trained once.
pub fn run_ablation_grid(axis: AblationAxis, values: &[String], base: &TrainConfig) -> Result<Vec<AblationRow>> {
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let data = crate::data::generate(&base.gen_config())?;
    let (baseline, _) = train_baseline(&data.train_set(), base)?;
    let mut rows = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        let run = run_pipeline(&data, cfg, Some(&baseline))?;
        let m = &run.metrics[2];
        rows.push(AblationRow {
            axis,
            value: value.clone(),
            seed_miou: m.best_miou.miou,
            precision: m.best_f1.precision,
            recall: m.best_f1.recall,
            f1: m.best_f1.f1,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};

    fn tiny() -> (Dataset, TrainConfig) {
        let data = generate(&GenConfig {
            train_count: 8,
            eval_count: 4,
            classes: 2,
            seed: 5,
            size: 32,
        })
        .unwrap();
        let mut cfg = TrainConfig::default();
        cfg.classes = 2;
        cfg.widths = vec![4, 4, 8];
        cfg.feature_dim = 8;
        cfg.batch_size = 4;
        cfg.baseline_iterations = 3;
        cfg.expansion_iterations = 3;
        cfg.shrinkage_iterations = 3;
        cfg.freeze_check_every = 1;
        cfg.scales = vec![1.0];
        (data, cfg)
    }

    #[test]
    fn sgd_momentum_step() {
        let mut sgd = Sgd::new(0.1, 0.9);
        let mut p = vec![1.0f32];
        sgd.step(0, &mut p, &[1.0]);
        assert!((p[0] - 0.9).abs() < 1e-7);
        sgd.step(0, &mut p, &[1.0]);
        assert!((p[0] - (0.9 - 0.19)).abs() < 1e-6);
    }

    #[test]
    fn first_baseline_loss_is_ln2() {
        let (data, cfg) = tiny();
        let (_, r) = train_baseline(&data.train_set(), &cfg).unwrap();
        assert_eq!(r.records.len(), 3);
        assert!((r.records[0].total - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn stages_keep_frozen_parameters() {
        let (data, cfg) = tiny();
        let train = data.train_set();
        let (b, _) = train_baseline(&train, &cfg).unwrap();
        let (e, _) = train_expansion(&train, &cfg, &b).unwrap();
        for (name, t) in b.params() {
            if !name.starts_with("es.offset") {
                assert_eq!(e.param(&name).unwrap(), t, "{name}");
            }
        }
        let (s, _) = train_shrinkage(&train, &cfg, &e).unwrap();
        for (name, t) in e.params() {
            if !name.starts_with("ss.offset") {
                assert_eq!(s.param(&name).unwrap(), t, "{name}");
            }
        }
        assert!(train_shrinkage(&train, &cfg, &b).is_err());
    }

    #[test]
    fn axis_values_apply() {
        let base = TrainConfig::default();
        let c = AblationAxis::GammaMu.apply(&base, "0.5:2").unwrap();
        assert_eq!((c.gamma, c.mu), (0.5, 2.0));
        let c = AblationAxis::Losses.apply(&base, "area").unwrap();
        assert_eq!((c.gamma, c.mu), (0.0, 1.0));
        assert!(AblationAxis::Losses.apply(&base, "none").is_err());
        assert!(AblationAxis::parse("delta").is_err());
    }
}
