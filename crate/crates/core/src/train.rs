//! Training loop, cross-validation splits, evaluation and the fusion
//! ablation.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{evaluate_masks, MetricsReport};
use crate::net::{total_loss, FusionMode, Network, NetworkConfig};
use crate::ops::sgd_step;
use crate::phantom::{augment, list_cases, make_slabs, AugmentLimits, PhantomCase, PhaseCaseSample};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::volume::Volume;

/// Step decay: the rate is divided by `divisor` every `every_epochs` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub every_epochs: f64,
    pub divisor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { every_epochs: 50.0, divisor: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub schedule: Schedule,
    /// Multiplies `schedule.every_epochs`, so short runs keep the shape of
    /// the decay (0.1 turns "every 50 epochs" into "every 5").
    pub schedule_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    /// Rescales the whole gradient when its global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub network: NetworkConfig,
    pub augmentation: AugmentLimits,
    pub fold_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 5e-4,
            schedule: Schedule::default(),
            schedule_scale: 1.0,
            epochs: 10,
            batch_size: 4,
            momentum: 0.0,
            grad_clip: None,
            seed: 0,
            network: NetworkConfig::default(),
            augmentation: AugmentLimits::default(),
            fold_count: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if !(self.schedule.every_epochs > 0.0 && self.schedule.divisor >= 1.0 && self.schedule_scale > 0.0) {
            return bad("schedule needs every_epochs > 0, divisor >= 1 and schedule_scale > 0");
        }
        if self.batch_size == 0 || self.fold_count == 0 {
            return bad("batch_size and fold_count must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `lr0 / divisor^floor(epoch / (every_epochs * schedule_scale))`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let period = cfg.schedule.every_epochs * cfg.schedule_scale;
    let drops = (epoch as f64 / period + 1e-9).floor();
    cfg.initial_lr / cfg.schedule.divisor.powf(drops)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub precision: String,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub best_epoch: Option<usize>,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Stacks slabs into `[N, 3, H, W]` tensors for both phases plus labels.
pub fn stack_batch<T: Scalar>(batch: &[&PhaseCaseSample]) -> Result<(Tensor<T>, Tensor<T>, Vec<u8>)> {
    let first = batch.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut pv = Vec::with_capacity(batch.len() * 3 * h * w);
    let mut art = Vec::with_capacity(pv.capacity());
    let mut target = Vec::with_capacity(batch.len() * h * w);
    for s in batch {
        if s.height() != h || s.width() != w {
            return Err(Error::Shape(format!("batch mixes {h}x{w} and {}x{} slabs", s.height(), s.width())));
        }
        pv.extend(s.pv.data().iter().map(|&v| T::from_f64(v as f64)));
        art.extend(s.art.data().iter().map(|&v| T::from_f64(v as f64)));
        target.extend_from_slice(&s.tumor);
    }
    let shape = vec![batch.len(), 3, h, w];
    Ok((Tensor::new(shape.clone(), pv)?, Tensor::new(shape, art)?, target))
}

/// SGD with optional heavy-ball momentum and norm clipping.
struct Optimizer<T> {
    momentum: f64,
    clip: Option<f64>,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    fn new(net: &Network<T>, cfg: &TrainConfig) -> Self {
        let velocity = if cfg.momentum > 0.0 { net.params().iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect() } else { Vec::new() };
        Self { momentum: cfg.momentum, clip: cfg.grad_clip, velocity }
    }
}

/// One SGD step on a batch; returns the loss before the update.
fn train_step<T: Scalar>(net: &mut Network<T>, opt: &mut Optimizer<T>, batch: &[&PhaseCaseSample], lr: f64) -> Result<f64> {
    let (pv, art, target) = stack_batch::<T>(batch)?;
    let mut g = Graph::new();
    let bound = net.params().bind(&mut g);
    let pv = g.input(pv);
    let art = g.input(art);
    let out = net.forward_vars(&mut g, &bound, pv, art).map_err(|e| match e {
        Error::NotNormalized { sum, .. } if !sum.is_finite() => Error::NonFinite("class probabilities".into()),
        e => e,
    })?;
    if !(g.value(out.s_init).all_finite() && g.value(out.s_final).all_finite()) {
        return Err(Error::NonFinite("network output".into()));
    }
    let loss_var = total_loss(&mut g, &out, &target)?;
    let loss = g.value(loss_var).data()[0].to_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    let mut grads = g.backward(loss_var)?;
    let ids: Vec<_> = net.params().ids().collect();
    let mut taken = Vec::with_capacity(ids.len());
    for &id in &ids {
        let grad = grads.take(bound.var(id));
        if grad.as_ref().is_some_and(|t| !t.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", net.params().name(id))));
        }
        taken.push(grad);
    }
    if let Some(clip) = opt.clip {
        let norm = taken.iter().flatten().flat_map(|t| t.data()).map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt();
        if norm > clip {
            let scale = T::from_f64(clip / norm);
            for t in taken.iter_mut().flatten() {
                t.data_mut().iter_mut().for_each(|v| *v = *v * scale);
            }
        }
    }
    for (k, (id, grad)) in ids.into_iter().zip(taken).enumerate() {
        let Some(grad) = grad else { continue };
        if opt.momentum > 0.0 {
            let mu = T::from_f64(opt.momentum);
            let v = &mut opt.velocity[k];
            for (vi, &gi) in v.data_mut().iter_mut().zip(grad.data()) {
                *vi = mu * *vi + gi;
            }
            sgd_step(net.params_mut().get_mut(id), &opt.velocity[k], lr)?;
        } else {
            sgd_step(net.params_mut().get_mut(id), &grad, lr)?;
        }
    }
    Ok(loss)
}

// Independent streams for data order/augmentation, per epoch.
const STREAM_DATA: u64 = 0xDA7A;

/// Trains from scratch on `train`; with `validation` cases, evaluates after
/// every epoch and keeps the checkpoint with the best mean DPC.
///
/// With `out`, writes `best.ckpt`, `last.ckpt` and `run.json` there. A
/// non-finite loss stops training after saving the last good parameters as
/// `last_good.ckpt`.
pub fn train_loop<T: Scalar>(
    train: &[PhaseCaseSample],
    validation: &[PhantomCase],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(Network<T>, RunRecord)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut net = Network::<T>::new(cfg.network.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(&net, cfg);
    let mut record = RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        precision: T::NAME.to_string(),
        steps: Vec::new(),
        epochs: Vec::new(),
        checkpoints: Vec::new(),
        best_epoch: None,
    };
    let mut best = f64::NEG_INFINITY;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut rng = Rng::derive(cfg.seed ^ STREAM_DATA, epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<PhaseCaseSample> = chunk.iter().map(|&i| augment(&train[i], &mut rng, &cfg.augmentation)).collect();
            let batch: Vec<&PhaseCaseSample> = augmented.iter().collect();
            let before = out.map(|_| net.clone());
            let loss = match train_step(&mut net, &mut opt, &batch, lr) {
                Ok(l) => l,
                Err(e @ Error::NonFinite(_)) => {
                    if let (Some(dir), Some(good)) = (out, before) {
                        let path = dir.join("last_good.ckpt");
                        good.save_checkpoint(&path)?;
                        record.checkpoints.push(path);
                        write_run(dir, &record)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            epoch_loss += loss;
            record.steps.push(StepRecord { epoch, step, lr, loss });
            step += 1;
        }
        let n_batches = train.len().div_ceil(cfg.batch_size);
        let validation_report = if validation.is_empty() { None } else { Some(evaluate_cases(&net, validation)?) };
        if let Some(report) = &validation_report {
            if report.aggregate.dpc_mean > best {
                best = report.aggregate.dpc_mean;
                record.best_epoch = Some(epoch);
                if let Some(dir) = out {
                    let path = dir.join("best.ckpt");
                    net.save_checkpoint(&path)?;
                    if !record.checkpoints.contains(&path) {
                        record.checkpoints.push(path);
                    }
                }
            }
        }
        record.epochs.push(EpochRecord { epoch, mean_loss: epoch_loss / n_batches as f64, validation: validation_report });
    }
    if let Some(dir) = out {
        let path = dir.join("last.ckpt");
        net.save_checkpoint(&path)?;
        record.checkpoints.push(path);
        write_run(dir, &record)?;
    }
    Ok((net, record))
}

fn write_run(dir: &Path, record: &RunRecord) -> Result<()> {
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(record)?).map_err(|e| Error::io(&path, e))
}

/// Seeded shuffle, then contiguous near-equal folds (the first `n % k`
/// folds get one extra id).
pub fn crossval_split<S: Clone>(ids: &[S], k: usize, seed: u64) -> Result<Vec<Vec<S>>> {
    if k == 0 || k > ids.len() {
        return Err(Error::InvalidArgument(format!("cannot split {} ids into {k} folds", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(order[at..at + size].iter().map(|&i| ids[i].clone()).collect());
        at += size;
    }
    Ok(folds)
}

/// Anything that labels the centre slice of each slab, `H * W` per sample.
pub trait Segmenter: Sync {
    fn segment(&self, batch: &[&PhaseCaseSample]) -> Result<Vec<Vec<u8>>>;
}

/// Tumour where the final foreground probability beats background.
impl<T: Scalar> Segmenter for Network<T> {
    fn segment(&self, batch: &[&PhaseCaseSample]) -> Result<Vec<Vec<u8>>> {
        let (pv, art, _) = stack_batch::<T>(batch)?;
        let out = self.forward(&pv, &art)?;
        let (n, _, h, w) = out.s_final.dims4()?;
        let p = out.s_final.data();
        Ok((0..n)
            .map(|b| (0..h * w).map(|px| u8::from(p[(2 * b + 1) * h * w + px] > p[2 * b * h * w + px])).collect())
            .collect())
    }
}

const INFER_BATCH: usize = 8;

/// Predicted tumour volume for one case: each slab's centre slice,
/// restricted to the liver; slices without a slab stay background.
pub fn predict_case(model: &dyn Segmenter, case: &PhantomCase) -> Result<Volume<u8>> {
    let [d, h, w] = case.tumor.shape();
    let mut pred = vec![0u8; d * h * w];
    let slabs = make_slabs(case);
    for chunk in slabs.chunks(INFER_BATCH) {
        let batch: Vec<&PhaseCaseSample> = chunk.iter().collect();
        for (s, labels) in chunk.iter().zip(model.segment(&batch)?) {
            let plane = &mut pred[s.slice * h * w..(s.slice + 1) * h * w];
            for ((p, &l), &m) in plane.iter_mut().zip(&labels).zip(&s.liver) {
                *p = l & m;
            }
        }
    }
    Volume::new([d, h, w], case.tumor.spacing(), pred)
}

pub const SURFACE_MODE: &str = "3d-6-connected";

/// Per-case 3-D metrics for `model` on `cases`.
pub fn evaluate_cases(model: &dyn Segmenter, cases: &[PhantomCase]) -> Result<MetricsReport> {
    let per_case = cases
        .par_iter()
        .map(|c| {
            let pred = predict_case(model, c)?;
            evaluate_masks(&c.meta.id, pred.data(), c.tumor.data(), &c.tumor.shape(), &c.tumor.spacing())
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_cases(per_case, SURFACE_MODE)
}

/// Loads every case under `root`, in id order.
pub fn load_dataset(root: &Path) -> Result<Vec<PhantomCase>> {
    let ids = list_cases(root)?;
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!("no cases found under {}", root.display())));
    }
    ids.par_iter().map(|id| PhantomCase::read(&root.join(id))).collect()
}

pub fn slabs_of(cases: &[PhantomCase]) -> Vec<PhaseCaseSample> {
    cases.iter().flat_map(make_slabs).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "sp")]
    Sp,
    #[serde(rename = "mp-add")]
    MpAdd,
    #[serde(rename = "sam")]
    Sam,
    #[serde(rename = "sam+urim")]
    SamUrim,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Sp, Variant::MpAdd, Variant::Sam, Variant::SamUrim];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Sp => "sp",
            Variant::MpAdd => "mp-add",
            Variant::Sam => "sam",
            Variant::SamUrim => "sam+urim",
        }
    }

    pub fn apply(self, network: &NetworkConfig) -> NetworkConfig {
        let (mode, urim) = match self {
            Variant::Sp => (FusionMode::Sp, false),
            Variant::MpAdd => (FusionMode::MpAdd, false),
            Variant::Sam => (FusionMode::Sam, false),
            Variant::SamUrim => (FusionMode::Sam, true),
        };
        network.clone().with_mode(mode, urim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: Variant,
    pub report: MetricsReport,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// True when every case shows the full lesion in both phases.
    pub control: bool,
    pub rows: Vec<AblationRow>,
    pub criteria: Vec<CriterionResult>,
    /// Wall-clock time of all runs, with the thread count that shared them.
    pub elapsed_secs: f64,
    pub threads: usize,
}

impl AblationReport {
    pub fn dpc(&self, seed: u64, variant: Variant) -> Option<f64> {
        self.rows.iter().find(|r| r.seed == seed && r.variant == variant).map(|r| r.report.aggregate.dpc_mean)
    }

    pub fn mean_dpc(&self, variant: Variant) -> Option<f64> {
        let v: Vec<f64> = self.seeds.iter().filter_map(|&s| self.dpc(s, variant)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.pass)
    }

    /// Plain-text table: one row per seed and variant, six metric columns.
    pub fn table(&self) -> String {
        let mut s = format!("{:>5} {:<9} {:>7} {:>7} {:>7} {:>8} {:>7} {:>7}\n", "seed", "variant", "DPC", "DG", "VOE", "RVD", "ASSD", "RMSD");
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        for r in &self.rows {
            let a = &r.report.aggregate;
            s += &format!(
                "{:>5} {:<9} {:>7.4} {:>7.4} {:>7.4} {:>8} {:>7} {:>7}\n",
                r.seed,
                r.variant.as_str(),
                a.dpc_mean,
                a.dice_global,
                a.voe_mean,
                opt(a.rvd_mean),
                opt(a.assd_mean),
                opt(a.rmsd_mean)
            );
        }
        for c in &self.criteria {
            s += &format!("{} {}: {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        s
    }
}

/// Orderings expected when the phases carry complementary information.
pub fn ordering_criteria(report: &AblationReport) -> Vec<CriterionResult> {
    let mut out = Vec::new();
    for &seed in &report.seeds {
        let d = |v| report.dpc(seed, v).unwrap_or(f64::NAN);
        let (sp, add, sam, urim) = (d(Variant::Sp), d(Variant::MpAdd), d(Variant::Sam), d(Variant::SamUrim));
        out.push(CriterionResult { name: format!("seed {seed}: mp-add >= sp + 0.02"), pass: add >= sp + 0.02, detail: format!("{add:.4} vs {sp:.4}") });
        out.push(CriterionResult { name: format!("seed {seed}: sam > mp-add"), pass: sam > add, detail: format!("{sam:.4} vs {add:.4}") });
        out.push(CriterionResult { name: format!("seed {seed}: sam+urim >= sam - 0.005"), pass: urim >= sam - 0.005, detail: format!("{urim:.4} vs {sam:.4}") });
    }
    let (u, s) = (report.mean_dpc(Variant::SamUrim).unwrap_or(f64::NAN), report.mean_dpc(Variant::Sam).unwrap_or(f64::NAN));
    out.push(CriterionResult { name: "mean: sam+urim > sam".into(), pass: u > s, detail: format!("{u:.4} vs {s:.4}") });
    out
}

/// With redundant phases, fusion must not cost more than 0.02 DPC.
pub fn control_criteria(report: &AblationReport) -> Vec<CriterionResult> {
    report
        .seeds
        .iter()
        .map(|&seed| {
            let sp = report.dpc(seed, Variant::Sp).unwrap_or(f64::NAN);
            let sam = report.dpc(seed, Variant::Sam).unwrap_or(f64::NAN);
            CriterionResult { name: format!("seed {seed}: sam >= sp - 0.02"), pass: sam >= sp - 0.02, detail: format!("{sam:.4} vs {sp:.4}") }
        })
        .collect()
}

/// Trains every variant for every seed on the same split and evaluates the
/// final-epoch model on the held-out fold (fold 0 of `fold_count`, split
/// with `base.seed`). Runs are independent and execute in parallel.
pub fn run_ablation(cases: &[PhantomCase], base: &TrainConfig, seeds: &[u64], variants: &[Variant]) -> Result<AblationReport> {
    base.validate()?;
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed and one variant".into()));
    }
    let ids: Vec<String> = cases.iter().map(|c| c.meta.id.clone()).collect();
    let folds = crossval_split(&ids, base.fold_count, base.seed)?;
    let test_ids = folds[0].clone();
    let (test, train): (Vec<PhantomCase>, Vec<PhantomCase>) = cases.iter().cloned().partition(|c| test_ids.contains(&c.meta.id));
    let train_ids: Vec<String> = train.iter().map(|c| c.meta.id.clone()).collect();
    let slabs = slabs_of(&train);
    let control = cases.iter().all(|c| c.meta.params.visibility >= 1.0);

    let start = std::time::Instant::now();
    let jobs: Vec<(u64, Variant)> = seeds.iter().flat_map(|&s| variants.iter().map(move |&v| (s, v))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, variant)| {
            let cfg = TrainConfig { seed, network: variant.apply(&base.network), ..base.clone() };
            let (net, record) = train_loop::<f32>(&slabs, &[], &cfg, None)?;
            let report = evaluate_cases(&net, &test)?;
            let final_loss = record.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
            Ok(AblationRow { seed, variant, report, final_loss })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = AblationReport {
        config: base.clone(),
        seeds: seeds.to_vec(),
        train_ids,
        test_ids,
        control,
        rows,
        criteria: Vec::new(),
        elapsed_secs: start.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
    };
    if variants == Variant::ALL {
        report.criteria = if control { control_criteria(&report) } else { ordering_criteria(&report) };
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 5e-4);
        assert!((lr_at(50, &cfg) - 5e-5).abs() < 1e-18);
        assert!((lr_at(120, &cfg) - 5e-6).abs() < 1e-18);
        assert_eq!(lr_at(49, &cfg), 5e-4);
        let short = TrainConfig { schedule_scale: 0.1, ..TrainConfig::default() };
        assert!((lr_at(5, &short) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn split_sizes() {
        let ids: Vec<usize> = (0..121).collect();
        let folds = crossval_split(&ids, 5, 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![25, 24, 24, 24, 24]);
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        assert_eq!(all, ids);
        assert_eq!(crossval_split(&ids, 1, 0).unwrap()[0].len(), 121);
        assert!(crossval_split(&ids, 122, 0).is_err());
    }
}
