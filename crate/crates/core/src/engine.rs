//! The dual-task semi-supervised training loop, regression targets,
//! sliding-window inference and whole experiments.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dtrans::{exact_signed, s2r_value, Converter, TransformConfig};
use crate::error::{Error, Result};
use crate::losses::{
    confidence_mask, con_cross, con_intra, pse_loss, pseudo_label, sup_cross, sup_intra, total_loss, Heads, LossReport,
    LossWeights, Parts, Terms,
};
use crate::metrics::{dice_precision_recall, evaluate, SegMetrics};
use crate::net::{collect_grads, sgd_step, Bound, DualNet, DualOutput, NetConfig, SgdConfig, SgdState};
use crate::synth::{crop, random_corner, Dataset, DatasetConfig, SynthVolume};
use crate::tensor::{Tape, Tensor, Var};

/// How supervised regression targets relate to the patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// signed map of the cropped patch mask
    #[default]
    OnTheFly,
    /// signed map of the whole volume, cropped afterwards
    PreGenerated,
}

/// Which transform produces the supervised regression targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    /// exact Euclidean transform
    #[default]
    Exact,
    /// the kernel-based approximate transform at full resolution
    Approx,
}

/// Loss-term switches. `true` keeps a term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// regression heads and every term that reads them
    pub reg_task: bool,
    /// pseudo-label supervision
    pub pse_sup: bool,
    /// supervised cross-task term
    pub ct_sup: bool,
    /// both consistency terms
    pub all_con: bool,
    /// cross-task consistency
    pub ct_con: bool,
    /// intra-task consistency
    pub it_con: bool,
    /// pseudo-label loss over labeled samples too
    pub unified_pseudo: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            reg_task: true,
            pse_sup: true,
            ct_sup: true,
            all_con: true,
            ct_con: true,
            it_con: true,
            unified_pseudo: true,
        }
    }
}

impl Ablation {
    /// Supervised terms only.
    pub fn supervised() -> Self {
        Self {
            pse_sup: false,
            all_con: false,
            ..Self::default()
        }
    }

    /// Flags after composition: `all_con` off turns off both consistency
    /// terms; `reg_task` off turns off every cross-task term.
    pub fn resolved(self) -> Self {
        let mut f = self;
        if !f.all_con {
            f.ct_con = false;
            f.it_con = false;
        }
        if !f.reg_task {
            f.ct_sup = false;
            f.ct_con = false;
        }
        f
    }

    pub fn any_unsupervised(&self) -> bool {
        let f = self.resolved();
        f.pse_sup || f.ct_con || f.it_con
    }

    fn heads(&self) -> Heads {
        if self.reg_task {
            Heads::Both
        } else {
            Heads::SegOnly
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub patch_size: usize,
    /// sliding-window stride at evaluation
    pub stride: usize,
    pub flags: Ablation,
    pub label_mode: LabelMode,
    pub target_source: TargetSource,
    /// harden the pseudo-label at 0.5
    pub harden_pseudo: bool,
    /// run the probability-to-signed converter at `down_rate` in training
    pub resampled_transform: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            patch_size: 32,
            stride: 16,
            flags: Ablation::default(),
            label_mode: LabelMode::OnTheFly,
            target_source: TargetSource::Exact,
            harden_pseudo: false,
            resampled_transform: true,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &NetConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.labeled_per_batch == 0 {
            return bad("labeled_per_batch must be positive".into());
        }
        if self.flags.any_unsupervised() && self.unlabeled_per_batch == 0 {
            return bad("unsupervised terms are enabled but the batch has no unlabeled sample".into());
        }
        let div = net.divisor();
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(div) {
            return bad(format!("patch_size {} must be a positive multiple of {div}", self.patch_size));
        }
        if self.stride == 0 || self.stride > self.patch_size {
            return bad(format!("stride must be in 1..={}, got {}", self.patch_size, self.stride));
        }
        Ok(())
    }

    pub fn patch(&self) -> [usize; 3] {
        [self.patch_size; 3]
    }

    pub fn batch_size(&self) -> usize {
        self.labeled_per_batch + self.unlabeled_per_batch
    }
}

/// Every setting of one experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub net: NetConfig,
    pub optimizer: SgdConfig,
    pub train: TrainConfig,
    pub transform: TransformConfig,
    pub loss: LossWeights,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.net.validate()?;
        self.optimizer.validate()?;
        self.transform.validate()?;
        self.loss.validate()?;
        self.train.validate(&self.net)?;
        if self.train.patch_size > self.dataset.size {
            return Err(Error::InvalidConfig(format!(
                "patch_size {} exceeds volume size {}",
                self.train.patch_size, self.dataset.size
            )));
        }
        if self.train.flags.any_unsupervised() && self.dataset.n_unlabeled == 0 {
            return Err(Error::InvalidConfig("unsupervised terms need unlabeled volumes".into()));
        }
        Ok(())
    }

    /// Labeled-only baseline: supervised terms, no unlabeled data.
    pub fn baseline(&self) -> Self {
        let mut c = self.clone();
        c.train.flags = Ablation::supervised();
        c.train.unlabeled_per_batch = 0;
        c.dataset.n_unlabeled = 0;
        c
    }
}

/// Supervised regression target of the `patch` box at `corner`, in
/// `[-1, 1]`, negative inside.
pub fn make_regression_target(
    mask: &Tensor<bool>,
    corner: [usize; 3],
    patch: [usize; 3],
    mode: LabelMode,
    source: TargetSource,
    tcfg: &TransformConfig,
) -> Result<Tensor<f64>> {
    match mode {
        LabelMode::OnTheFly => signed_map(&crop(mask, corner, patch)?, source, tcfg),
        LabelMode::PreGenerated => crop(&signed_map(mask, source, tcfg)?, corner, patch),
    }
}

fn signed_map(mask: &Tensor<bool>, source: TargetSource, tcfg: &TransformConfig) -> Result<Tensor<f64>> {
    match source {
        TargetSource::Exact => exact_signed(mask),
        TargetSource::Approx => s2r_value(&mask.to_float::<f64>(), tcfg, false),
    }
}

/// Labeled samples first, `[B, 1, P, P, P]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub x: Tensor<f32>,
    /// labels of the labeled samples
    pub y: Tensor<f32>,
    /// regression targets of the labeled samples
    pub r: Tensor<f32>,
    pub labeled_mask: Vec<bool>,
}

impl TrainBatch {
    pub fn n_labeled(&self) -> usize {
        self.labeled_mask.iter().filter(|&&l| l).count()
    }

    pub fn len(&self) -> usize {
        self.labeled_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled_mask.is_empty()
    }
}

fn stack<T: Clone>(parts: &[Tensor<T>], patch: [usize; 3]) -> Result<Tensor<T>> {
    let data: Vec<T> = parts.iter().flat_map(|p| p.data().iter().cloned()).collect();
    Tensor::new(&[parts.len(), 1, patch[0], patch[1], patch[2]], data)
}

/// Draws training batches from the labeled and unlabeled volumes. Whole-
/// volume signed maps are computed once when targets are pre-generated.
pub struct BatchSampler<'a> {
    labeled: Vec<&'a SynthVolume>,
    unlabeled: Vec<&'a SynthVolume>,
    full_targets: Vec<Tensor<f64>>,
    cfg: TrainConfig,
    tcfg: TransformConfig,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(data: &'a Dataset, cfg: &TrainConfig, tcfg: &TransformConfig, rng: ChaCha8Rng) -> Result<Self> {
        let split = data.split();
        let labeled: Vec<_> = split.labeled.iter().map(|&i| &data.volumes[i]).collect();
        let unlabeled: Vec<_> = split.unlabeled.iter().map(|&i| &data.volumes[i]).collect();
        if labeled.is_empty() || (cfg.unlabeled_per_batch > 0 && unlabeled.is_empty()) {
            return Err(Error::InvalidConfig("split cannot fill the batch".into()));
        }
        let full_targets = match cfg.label_mode {
            LabelMode::PreGenerated => labeled
                .iter()
                .map(|v| signed_map(&v.mask, cfg.target_source, tcfg))
                .collect::<Result<_>>()?,
            LabelMode::OnTheFly => Vec::new(),
        };
        Ok(Self {
            labeled,
            unlabeled,
            full_targets,
            cfg: cfg.clone(),
            tcfg: tcfg.clone(),
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Result<TrainBatch> {
        let patch = self.cfg.patch();
        let (mut xs, mut ys, mut rs) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..self.cfg.labeled_per_batch {
            let i = self.rng.gen_range(0..self.labeled.len());
            let v = self.labeled[i];
            let corner = random_corner(v.dims(), patch, &mut self.rng)?;
            xs.push(crop(&v.image, corner, patch)?);
            let m = crop(&v.mask, corner, patch)?;
            let r = match self.cfg.label_mode {
                LabelMode::OnTheFly => signed_map(&m, self.cfg.target_source, &self.tcfg)?,
                LabelMode::PreGenerated => crop(&self.full_targets[i], corner, patch)?,
            };
            ys.push(m.to_float::<f32>());
            rs.push(r.cast::<f32>());
        }
        for _ in 0..self.cfg.unlabeled_per_batch {
            let v = self.unlabeled[self.rng.gen_range(0..self.unlabeled.len())];
            let corner = random_corner(v.dims(), patch, &mut self.rng)?;
            xs.push(crop(&v.image, corner, patch)?);
        }
        let mut labeled_mask = vec![true; self.cfg.labeled_per_batch];
        labeled_mask.resize(xs.len(), false);
        Ok(TrainBatch {
            x: stack(&xs, patch)?,
            y: stack(&ys, patch)?,
            r: stack(&rs, patch)?,
            labeled_mask,
        })
    }
}

/// Samples `range` of every head output.
fn select_samples(tape: &mut Tape<f32>, out: &DualOutput, range: std::ops::Range<usize>) -> Result<DualOutput> {
    let n = tape.shape(out.y_phi)[0];
    if range.start == 0 && range.end == n {
        return Ok(*out);
    }
    let mut pick = |v: Var| -> Result<Var> {
        let parts = range.clone().map(|i| tape.slice_batch(v, i)).collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(&parts)
        }
    };
    Ok(DualOutput {
        y_phi: pick(out.y_phi)?,
        y_psi: pick(out.y_psi)?,
        r_phi: pick(out.r_phi)?,
        r_psi: pick(out.r_psi)?,
    })
}

/// Mutable training state carried between steps.
pub struct Trainer {
    pub net: DualNet,
    pub opt: SgdState,
    pub converter: Converter,
    pub weights: LossWeights,
    pub cfg: TrainConfig,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(net: DualNet, run: &RunConfig, dropout_rng: ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            opt: SgdState::new(run.optimizer.clone(), run.train.max_iterations),
            converter: Converter::new(run.transform.clone(), run.train.resampled_transform)?,
            weights: run.loss.clone(),
            cfg: run.train.clone(),
            net,
            dropout_rng,
        })
    }

    /// Builds the forward pass and every loss term for `batch` on `tape`
    /// at iteration `self.opt.iteration`, without touching the weights.
    pub fn loss_graph(&mut self, tape: &mut Tape<f32>, batch: &TrainBatch) -> Result<LossGraph> {
        let t = self.opt.iteration;
        if t >= self.cfg.max_iterations {
            return Err(Error::InvalidConfig(format!("iteration {t} past max_iterations")));
        }
        let flags = self.cfg.flags.resolved();
        let heads = flags.heads();
        let n_lab = batch.n_labeled();
        let n = batch.len();
        if n_lab == 0 || batch.labeled_mask[..n_lab].iter().any(|l| !l) {
            return Err(Error::InvalidConfig("labeled samples must lead the batch".into()));
        }
        if flags.any_unsupervised() && n_lab == n {
            return Err(Error::InvalidConfig("unsupervised terms need an unlabeled sample".into()));
        }

        let bound = self.net.bind(tape);
        let x = tape.constant(batch.x.clone());
        let out = self.net.forward(tape, &bound, x, Some(&mut self.dropout_rng))?;
        let y = tape.constant(batch.y.clone());
        let r = tape.constant(batch.r.clone());
        let zero = tape.scalar(0.0);
        let off = Terms {
            total: zero,
            parts: Vec::new(),
        };

        let lab = select_samples(tape, &out, 0..n_lab)?;
        let sup_it = sup_intra(tape, &lab, y, r, &self.weights, heads)?;
        let sup_ct = if flags.ct_sup {
            sup_cross(tape, &lab, y, r, &self.converter, &self.weights)?
        } else {
            off.clone()
        };
        let con_it = if flags.it_con {
            con_intra(tape, &out, heads)?
        } else {
            off.clone()
        };
        let con_ct = if flags.ct_con {
            con_cross(tape, &out, &self.converter)?
        } else {
            off.clone()
        };
        let (pse, mask_fraction) = if flags.pse_sup {
            let sub = if flags.unified_pseudo {
                out
            } else {
                select_samples(tape, &out, n_lab..n)?
            };
            let ybar = pseudo_label(tape, &sub, self.cfg.harden_pseudo)?;
            let m = confidence_mask(tape, &sub, heads);
            let frac = m.count() as f64 / m.numel() as f64;
            (pse_loss(tape, &sub, ybar, &m)?, frac)
        } else {
            (zero, 0.0)
        };

        let parts = Parts {
            sup_it: sup_it.total,
            sup_ct: sup_ct.total,
            con_it: con_it.total,
            con_ct: con_ct.total,
            pse,
        };
        let ramp = self.weights.ramp_for(self.cfg.max_iterations);
        let beta = self.weights.beta(t, ramp);
        let lambda = self.weights.lambda;
        let total = total_loss(tape, &parts, lambda, beta)?;
        Ok(LossGraph {
            bound,
            out,
            groups: [sup_it, sup_ct, con_it, con_ct],
            parts,
            total,
            lambda,
            beta,
            mask_fraction,
        })
    }

    /// Loss values of a built graph; fails on the first non-finite term.
    pub fn report(&self, tape: &Tape<f32>, g: &LossGraph) -> Result<LossReport> {
        let mut terms = BTreeMap::new();
        for group in &g.groups {
            for (name, v) in &group.parts {
                terms.insert(name.clone(), tape.item(*v) as f64);
            }
        }
        let named = [
            ("sup_it", g.parts.sup_it),
            ("sup_ct", g.parts.sup_ct),
            ("con_it", g.parts.con_it),
            ("con_ct", g.parts.con_ct),
            ("pse", g.parts.pse),
            ("total", g.total),
        ];
        for (name, v) in named {
            if !tape.item(v).is_finite() {
                return Err(Error::NonFiniteLoss(name.into()));
            }
        }
        for (name, v) in &terms {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss(name.clone()));
            }
        }
        Ok(LossReport {
            iteration: self.opt.iteration,
            sup_it: tape.item(g.parts.sup_it) as f64,
            sup_ct: tape.item(g.parts.sup_ct) as f64,
            con_it: tape.item(g.parts.con_it) as f64,
            con_ct: tape.item(g.parts.con_ct) as f64,
            pse: tape.item(g.parts.pse) as f64,
            lambda: g.lambda,
            beta: g.beta,
            total: tape.item(g.total) as f64,
            lr: self.opt.lr(),
            mask_fraction: g.mask_fraction,
            terms,
        })
    }

    /// Gradient of `loss` for every parameter; parameters the loss does not
    /// reach get zeros.
    pub fn param_grads(&self, tape: &mut Tape<f32>, bound: &Bound, loss: Var) -> Result<Vec<Tensor<f32>>> {
        let mut grads = tape.backward(loss)?;
        Ok(collect_grads(&self.net, bound, &mut grads)
            .into_iter()
            .zip(self.net.params())
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect())
    }

    /// One forward, one backward and one optimizer update.
    pub fn step(&mut self, batch: &TrainBatch) -> Result<LossReport> {
        let mut tape = Tape::<f32>::new();
        let g = self.loss_graph(&mut tape, batch)?;
        let report = self.report(&tape, &g)?;
        let grads: Vec<_> = self.param_grads(&mut tape, &g.bound, g.total)?.into_iter().map(Some).collect();
        sgd_step(&mut self.net, &grads, &mut self.opt)?;
        Ok(report)
    }
}

/// Everything one training step puts on the tape.
pub struct LossGraph {
    pub bound: Bound,
    pub out: DualOutput,
    /// `sup_it`, `sup_ct`, `con_it`, `con_ct` with their named components
    pub groups: [Terms; 4],
    pub parts: Parts,
    pub total: Var,
    pub lambda: f64,
    pub beta: f64,
    pub mask_fraction: f64,
}

/// Window origins along one axis: every `stride` from 0, plus a final
/// window flush with the far edge when the stride does not land on it.
pub fn window_starts(dim: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch > dim || patch == 0 {
        return Err(Error::PatchTooLarge {
            patch: [patch; 3],
            volume: [dim; 3],
        });
    }
    if stride == 0 || stride > patch {
        return Err(Error::InvalidConfig(format!("stride must be in 1..={patch}, got {stride}")));
    }
    let mut starts: Vec<usize> = (0..=dim - patch).step_by(stride).collect();
    if *starts.last().expect("at least 0") != dim - patch {
        starts.push(dim - patch);
    }
    Ok(starts)
}

/// Number of windows covering each voxel.
pub fn window_counts(dims: [usize; 3], patch: [usize; 3], stride: usize) -> Result<Tensor<u32>> {
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(dims[a], patch[a], stride)).collect::<Result<_>>()?;
    let per_axis: Vec<Vec<u32>> = (0..3)
        .map(|a| {
            let mut c = vec![0u32; dims[a]];
            for &s in &starts[a] {
                for v in &mut c[s..s + patch[a]] {
                    *v += 1;
                }
            }
            c
        })
        .collect();
    Ok(Tensor::from_fn(&dims, |i| {
        let (z, y, x) = (i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]);
        per_axis[0][z] * per_axis[1][y] * per_axis[2][x]
    }))
}

/// Foreground probability of a `[D, H, W]` volume: the mean of both
/// segmentation heads, averaged over overlapping windows.
pub fn sliding_window_predict(net: &DualNet, volume: &Tensor<f32>, patch: [usize; 3], stride: usize) -> Result<Tensor<f32>> {
    let dims = volume.spatial_dims();
    if volume.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "sliding_window_predict",
            left: volume.shape().to_vec(),
            right: vec![0, 0, 0],
        });
    }
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(dims[a], patch[a], stride)).collect::<Result<_>>()?;
    let mut acc = vec![0f32; volume.numel()];
    let mut count = vec![0u32; volume.numel()];
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let corner = [z0, y0, x0];
                let x = crop(volume, corner, patch)?.reshape(&[1, 1, patch[0], patch[1], patch[2]])?;
                let mut tape = Tape::<f32>::new();
                let bound = net.bind(&mut tape);
                let xv = tape.constant(x);
                let out = net.forward(&mut tape, &bound, xv, None)?;
                let (a, b) = (tape.value(out.y_phi).data(), tape.value(out.y_psi).data());
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        for xx in 0..patch[2] {
                            let src = (z * patch[1] + y) * patch[2] + xx;
                            let dst = ((z0 + z) * dims[1] + y0 + y) * dims[2] + x0 + xx;
                            acc[dst] += 0.5 * (a[src] + b[src]);
                            count[dst] += 1;
                        }
                    }
                }
            }
        }
    }
    let gaps = count.iter().filter(|&&c| c == 0).count();
    if gaps > 0 {
        return Err(Error::CoverageGap(gaps));
    }
    let data = acc.iter().zip(&count).map(|(&s, &c)| s / c as f32).collect();
    Tensor::new(&dims, data)
}

/// Metrics of one volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: usize,
    pub metrics: SegMetrics,
}

/// Means over cases; surface metrics average the cases where they exist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub n: usize,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
    /// cases with an undefined surface metric
    pub n_missing_surface: usize,
}

impl MeanMetrics {
    pub fn of(cases: &[CaseResult]) -> Self {
        let n = cases.len();
        let mean = |f: &dyn Fn(&SegMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                cases.iter().map(|c| f(&c.metrics)).sum::<f64>() / n as f64
            }
        };
        let opt_mean = |f: &dyn Fn(&SegMetrics) -> Option<f64>| {
            let v: Vec<f64> = cases.iter().filter_map(|c| f(&c.metrics)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            n,
            dice: mean(&|m| m.dice),
            precision: mean(&|m| m.precision),
            recall: mean(&|m| m.recall),
            asd: opt_mean(&|m| m.asd),
            hd95: opt_mean(&|m| m.hd95),
            n_missing_surface: cases.iter().filter(|c| c.metrics.asd.is_none()).count(),
        }
    }
}

/// Evaluation of the final checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test: Vec<CaseResult>,
    pub test_mean: MeanMetrics,
    /// overlap metrics on the unlabeled training volumes
    pub unlabeled: Vec<CaseResult>,
    pub unlabeled_mean: MeanMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: RunConfig,
    pub iterations: usize,
    pub final_loss: Option<LossReport>,
    /// mean confidence-mask fraction over the steps that computed it
    pub mask_fraction: Option<f64>,
    pub eval: EvalReport,
}

/// Scores the net on the given volumes. Surface metrics are skipped when
/// `with_surface` is false.
pub fn evaluate_volumes(
    net: &DualNet,
    data: &Dataset,
    ids: &[usize],
    patch: [usize; 3],
    stride: usize,
    with_surface: bool,
) -> Result<Vec<CaseResult>> {
    ids.iter()
        .map(|&id| {
            let v = &data.volumes[id];
            let prob = sliding_window_predict(net, &v.image, patch, stride)?;
            let pred = prob.threshold(0.5);
            let metrics = if with_surface {
                evaluate(&pred, &v.mask)?
            } else {
                let (dice, precision, recall) = dice_precision_recall(&pred, &v.mask)?;
                SegMetrics {
                    dice,
                    precision,
                    recall,
                    asd: None,
                    hd95: None,
                }
            };
            Ok(CaseResult { id, metrics })
        })
        .collect()
}

pub fn evaluate_net(net: &DualNet, data: &Dataset, cfg: &TrainConfig) -> Result<EvalReport> {
    let split = data.split();
    let test = evaluate_volumes(net, data, &split.test, cfg.patch(), cfg.stride, true)?;
    let unlabeled = evaluate_volumes(net, data, &split.unlabeled, cfg.patch(), cfg.stride, false)?;
    Ok(EvalReport {
        test_mean: MeanMetrics::of(&test),
        unlabeled_mean: MeanMetrics::of(&unlabeled),
        test,
        unlabeled,
    })
}

/// Seeds of the independent random streams of one run.
struct Streams {
    init: u64,
    batches: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let init = master.gen();
        let batches = ChaCha8Rng::seed_from_u64(master.gen());
        let dropout = ChaCha8Rng::seed_from_u64(master.gen());
        Self { init, batches, dropout }
    }
}

/// A trained network with its report.
pub struct Experiment {
    pub net: DualNet,
    pub report: ExperimentReport,
}

/// Trains for `max_iterations` steps on `data` and evaluates the final
/// network. `on_step` sees every loss report.
pub fn run_experiment_on(cfg: &RunConfig, data: &Dataset, mut on_step: impl FnMut(&LossReport)) -> Result<Experiment> {
    cfg.validate()?;
    let streams = Streams::new(cfg.train.seed);
    let mut net_cfg = cfg.net.clone();
    net_cfg.init_seed = streams.init ^ cfg.net.init_seed;
    let net = DualNet::new(net_cfg)?;
    let mut sampler = BatchSampler::new(data, &cfg.train, &cfg.transform, streams.batches)?;
    let mut trainer = Trainer::new(net, cfg, streams.dropout)?;
    let mut last = None;
    let (mut frac_sum, mut frac_n) = (0.0, 0usize);
    for _ in 0..cfg.train.max_iterations {
        let batch = sampler.next_batch()?;
        let report = trainer.step(&batch)?;
        if cfg.train.flags.resolved().pse_sup {
            frac_sum += report.mask_fraction;
            frac_n += 1;
        }
        on_step(&report);
        last = Some(report);
    }
    let eval = evaluate_net(&trainer.net, data, &cfg.train)?;
    Ok(Experiment {
        report: ExperimentReport {
            config: cfg.clone(),
            iterations: trainer.opt.iteration,
            final_loss: last,
            mask_fraction: (frac_n > 0).then(|| frac_sum / frac_n as f64),
            eval,
        },
        net: trainer.net,
    })
}

/// Generates the dataset from the config, then [`run_experiment_on`].
pub fn run_experiment(cfg: &RunConfig, on_step: impl FnMut(&LossReport)) -> Result<Experiment> {
    cfg.validate()?;
    let data = Dataset::generate(&cfg.dataset)?;
    run_experiment_on(cfg, &data, on_step)
}
