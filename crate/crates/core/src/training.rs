//! Losses, the two-pass shared-parameter training step, Adam, and the
//! body-to-wholebody curriculum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{init_param, param_specs, ForwardOptions, Model};
use crate::numerics::{Array, ParamStore, Real, Tape, Var};
use crate::simcc_head::{encode_target, HeatmapPair, Targets};
use crate::synthdata::Sample;

/// Parameters that exist in whole-body mode only and are freshly initialised
/// when a body checkpoint is transferred.
pub const WHOLEBODY_ONLY: [&str; 2] = ["part_embed", "dense_embed"];

/// Sum of `t·x` over all elements, recorded on the tape.
fn weighted_sum<T: Real>(tape: &Tape<T>, t: Var, x: Var) -> Result<Var> {
    Ok(tape.sum(tape.mul(t, x)?))
}

fn masked_rows<T: Real>(a: &Array<T>, keep: &[bool]) -> Array<T> {
    let mut out = a.clone();
    for (i, &k) in keep.iter().enumerate() {
        if !k {
            out.row_mut(i).iter_mut().for_each(|v| *v = T::zero());
        }
    }
    out
}

/// `Σ t·log t`, skipping zero entries.
fn neg_entropy<T: Real>(t: &Array<T>) -> T {
    t.data()
        .iter()
        .filter(|&&p| p > T::zero())
        .map(|&p| p * p.ln())
        .sum()
}

/// Mean over visible keypoints and both axes of `KL(target ‖ softmax(logits))`.
pub fn cls_loss<T: Real>(tape: &Tape<T>, hm: &HeatmapPair, targets: &Targets<T>) -> Result<Var> {
    let (lx, ly) = (tape.value(hm.logits_x), tape.value(hm.logits_y));
    if lx.shape() != targets.x.shape() {
        return Err(Error::shape("cls_loss", lx.shape(), targets.x.shape()));
    }
    if ly.shape() != targets.y.shape() {
        return Err(Error::shape("cls_loss", ly.shape(), targets.y.shape()));
    }
    let visible = targets.visible.iter().filter(|&&v| v).count();
    if visible == 0 {
        log::warn!("cls_loss: no visible keypoints, loss is zero");
        return Ok(tape.constant(Array::scalar(T::zero())));
    }
    let tx = masked_rows(&targets.x, &targets.visible);
    let ty = masked_rows(&targets.y, &targets.visible);
    let ent = neg_entropy(&tx) + neg_entropy(&ty);
    let cx = weighted_sum(tape, tape.constant(tx), tape.log_softmax_rows(hm.logits_x)?)?;
    let cy = weighted_sum(tape, tape.constant(ty), tape.log_softmax_rows(hm.logits_y)?)?;
    let cross = tape.add(cx, cy)?;
    let kl = tape.sub(tape.constant(Array::scalar(ent)), cross)?;
    Ok(tape.scale(kl, T::lit(0.5 / visible as f64)))
}

/// Mean over keypoints and axes of `KL(softmax(teacher) ‖ softmax(student))`,
/// with the unpruned teacher cut off from the gradient.
pub fn g2l_loss<T: Real>(tape: &Tape<T>, pruned: &HeatmapPair, unpruned: &HeatmapPair) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    for (s, t) in [
        (pruned.logits_x, unpruned.logits_x),
        (pruned.logits_y, unpruned.logits_y),
    ] {
        let (ss, ts) = (tape.shape(s), tape.shape(t));
        if ss != ts {
            return Err(Error::shape("g2l_loss", &ss, &ts));
        }
        let lt = tape.log_softmax_rows(tape.detach(t))?;
        let p = tape.constant(tape.value(lt).map(|v| v.exp()));
        let ls = tape.log_softmax_rows(s)?;
        // identical logits give bitwise-identical sums, hence exactly zero
        terms.push(tape.sub(weighted_sum(tape, p, lt)?, weighted_sum(tape, p, ls)?)?);
    }
    let k = tape.shape(pruned.logits_x)[0].max(1);
    Ok(tape.scale(tape.add(terms[0], terms[1])?, T::lit(0.5 / k as f64)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    #[serde(rename = "L_pruned")]
    pub l_pruned: f64,
    #[serde(rename = "L_unpruned")]
    pub l_unpruned: f64,
    #[serde(rename = "L_G2L")]
    pub l_g2l: f64,
    #[serde(rename = "L_GP")]
    pub l_gp: f64,
    /// Visible keypoints that entered the supervised terms; not logged.
    #[serde(skip)]
    pub visible: usize,
}

/// One image with its encoded targets.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub image: Array<T>,
    pub targets: Targets<T>,
}

pub fn prepare<T: Real>(sample: &Sample, cfg: &ModelConfig) -> Result<Example<T>> {
    if (sample.height, sample.width) != (cfg.image_height, cfg.image_width) {
        return Err(Error::shape(
            "prepare",
            &[sample.height, sample.width],
            &[cfg.image_height, cfg.image_width],
        ));
    }
    let k = cfg.schema().num_keypoints();
    if sample.coords.len() != k {
        return Err(Error::Schema(format!(
            "sample has {} keypoints, model expects {k}",
            sample.coords.len()
        )));
    }
    let image = Array::new(
        &[sample.height, sample.width, 1],
        sample.image.iter().map(|&v| T::lit(v as f64)).collect(),
    )?;
    let coords: Vec<[f64; 2]> = sample.coords.iter().map(|c| [c[0] as f64, c[1] as f64]).collect();
    let targets = encode_target(
        &coords,
        &sample.visibility,
        cfg.target_sigma,
        cfg.simcc_split,
        cfg.image_width,
        cfg.image_height,
    )?;
    Ok(Example { image, targets })
}

/// Records one sample's Global Perceived loss on `tape`: a pruned and an
/// unpruned forward over the same parameter leaves. Returns the weighted
/// total and its components.
pub fn sample_loss<T: Real>(
    model: &Model<T>,
    tape: &Tape<T>,
    ex: &Example<T>,
) -> Result<(Var, LossBundle)> {
    sample_loss_with(model, tape, ex, &ForwardOptions::pruned())
}

/// [`sample_loss`] with explicit options for the pruned branch, e.g. to
/// replay fixed pruning decisions.
pub fn sample_loss_with<T: Real>(
    model: &Model<T>,
    tape: &Tape<T>,
    ex: &Example<T>,
    pruned_opts: &ForwardOptions,
) -> Result<(Var, LossBundle)> {
    let cfg = &model.config;
    let [wp, wu, wg] = cfg.train.loss_weights;
    let pruned = model.forward(tape, &ex.image, pruned_opts)?;
    let lp = cls_loss(tape, &pruned.heatmaps, &ex.targets)?;
    let scalar = |v: Var| tape.value(v).data()[0].as_f64();
    let visible = ex.targets.visible.iter().filter(|&&v| v).count();
    if !cfg.ablation.gp_loss {
        let total = tape.scale(lp, T::lit(wp));
        let bundle = LossBundle {
            l_pruned: scalar(lp),
            l_gp: scalar(total),
            visible,
            ..LossBundle::default()
        };
        return Ok((total, bundle));
    }
    let unpruned = model.forward(tape, &ex.image, &ForwardOptions::unpruned())?;
    let lu = cls_loss(tape, &unpruned.heatmaps, &ex.targets)?;
    let lg = g2l_loss(tape, &pruned.heatmaps, &unpruned.heatmaps)?;
    let total = tape.add(
        tape.add(tape.scale(lp, T::lit(wp)), tape.scale(lu, T::lit(wu)))?,
        tape.scale(lg, T::lit(wg)),
    )?;
    let bundle = LossBundle {
        l_pruned: scalar(lp),
        l_unpruned: scalar(lu),
        l_g2l: scalar(lg),
        l_gp: scalar(total),
        visible,
    };
    Ok((total, bundle))
}

/// Mean loss and mean gradients (store order) over a batch. Samples run on
/// separate tapes in parallel; the reduction is sequential and ordered.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    batch: &[Example<T>],
) -> Result<(LossBundle, Vec<Array<T>>)> {
    if batch.is_empty() {
        return Err(Error::arg("train_step", "empty batch"));
    }
    let per_sample: Vec<Result<(LossBundle, Vec<Array<T>>)>> = batch
        .par_iter()
        .map(|ex| {
            let tape = Tape::new();
            let (loss, bundle) = sample_loss(model, &tape, ex)?;
            let grads = tape.backward(loss)?.for_store(&model.params);
            Ok((bundle, grads))
        })
        .collect();
    let n = batch.len() as f64;
    let mut mean = LossBundle::default();
    let mut sum: Option<Vec<Array<T>>> = None;
    for r in per_sample {
        let (b, g) = r?;
        mean.l_pruned += b.l_pruned / n;
        mean.l_unpruned += b.l_unpruned / n;
        mean.l_g2l += b.l_g2l / n;
        mean.l_gp += b.l_gp / n;
        mean.visible += b.visible;
        match &mut sum {
            None => sum = Some(g),
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&g) {
                    a.add_assign(x);
                }
            }
        }
    }
    let inv = T::lit(1.0 / n);
    let grads = sum
        .expect("non-empty batch")
        .into_iter()
        .map(|g| g.map(|v| v * inv))
        .collect();
    Ok((mean, grads))
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Array<T>>,
    v: Vec<Array<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: &TrainConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Array<T>> = params.iter().map(|(_, p)| Array::zeros(p.shape())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::lit(lr / c1);
        let c2 = T::lit(c2);
        let (eps, wd) = (T::lit(self.eps), T::lit(self.weight_decay));
        let one = T::one();
        for i in 0..params.len() {
            let grad = params.grad_at(i).clone();
            let p = params.value_mut_at(i);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad.data()[j] + wd * *w;
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                *w -= step * m[j] / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

/// Base rate, ×0.1 from 2/3 of the budget, ×0.01 from 26/30.
pub fn lr_at(step: usize, total: usize, base: f64) -> f64 {
    if step >= 26 * total / 30 {
        base * 0.01
    } else if step >= 2 * total / 3 {
        base * 0.1
    } else {
        base
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBundle,
    pub lr: f64,
}

/// One optimisation step: both forwards, one backward, one Adam update.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    batch: &[Example<T>],
    lr: f64,
) -> Result<LossBundle> {
    let (bundle, grads) = batch_gradients(model, batch)?;
    let finite = [bundle.l_pruned, bundle.l_unpruned, bundle.l_g2l, bundle.l_gp]
        .iter()
        .all(|v| v.is_finite());
    if !finite || grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite(format!(
            "step aborted: L_pruned={} L_unpruned={} L_G2L={} L_GP={}",
            bundle.l_pruned, bundle.l_unpruned, bundle.l_g2l, bundle.l_gp
        )));
    }
    model.params.zero_grads();
    model.params.accumulate(&grads)?;
    opt.step(&mut model.params, lr);
    Ok(bundle)
}

/// Trains for `cfg.train.steps` steps on shuffled mini-batches drawn with
/// the config seed, reporting each step to `on_step`.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    data: &[Example<T>],
    mut on_step: impl FnMut(&StepLog, &Model<T>) -> Result<()>,
) -> Result<Vec<StepLog>> {
    let tc = model.config.train.clone();
    if data.is_empty() {
        return Err(Error::arg("fit", "no training data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5eed);
    let mut opt = Adam::new(&tc, &model.params);
    let mut order: Vec<usize> = Vec::new();
    let mut logs = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size.min(data.len()) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(data[order.pop().expect("refilled")].clone());
        }
        let lr = lr_at(step, tc.steps, tc.lr);
        let loss = train_step(model, &mut opt, &batch, lr)?;
        let log = StepLog { step, loss, lr };
        on_step(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Result of moving a body-mode store to a whole-body configuration.
#[derive(Clone, Debug)]
pub struct Transfer<T: Real> {
    pub params: ParamStore<T>,
    /// Names that did not exist in the body store.
    pub new_names: Vec<String>,
}

/// Copies every stage-1 parameter by name into a whole-body layout and
/// initialises the whole-body-only ones.
pub fn curriculum_transfer<T: Real>(
    stage1: &ParamStore<T>,
    wholebody: &ModelConfig,
) -> Result<Transfer<T>> {
    wholebody.validate()?;
    let specs = param_specs(wholebody, &wholebody.schema());
    let mut params = ParamStore::new();
    let mut new_names = Vec::new();
    for s in &specs {
        match stage1.get(&s.name) {
            Some(v) if v.shape() == s.shape.as_slice() => params.insert(s.name.clone(), v.clone())?,
            Some(v) => {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?} in the body store, {:?} expected",
                    s.name,
                    v.shape(),
                    s.shape
                )))
            }
            None if WHOLEBODY_ONLY.contains(&s.name.as_str()) => {
                params.insert(s.name.clone(), init_param(s, wholebody.seed))?;
                new_names.push(s.name.clone());
            }
            None => {
                return Err(Error::Format(format!(
                    "body store lacks parameter `{}`",
                    s.name
                )))
            }
        }
    }
    if let Some(extra) = stage1.names().find(|n| params.get(n).is_none()) {
        return Err(Error::Format(format!(
            "body store parameter `{extra}` has no place in the whole-body model"
        )));
    }
    Ok(Transfer { params, new_names })
}


/// Pooled PCK over a dataset, overall and per keypoint group. The PCK
/// reference length is each sample's visible bounding-box diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub pck_01: f64,
    pub pck_02: f64,
    /// `(group, PCK@0.1, PCK@0.2)` for groups with visible keypoints.
    pub per_group: Vec<(String, f64, f64)>,
}

/// Decodes every sample with a pruned forward and scores it.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[Sample]) -> Result<EvalReport> {
    evaluate_with(model, samples, &ForwardOptions::pruned())
}

pub fn evaluate_with<T: Real>(
    model: &Model<T>,
    samples: &[Sample],
    opts: &ForwardOptions,
) -> Result<EvalReport> {
    let schema = model.schema.clone();
    let per_sample: Vec<Result<(Vec<[f64; 2]>, &Sample)>> = samples
        .par_iter()
        .map(|s| {
            let ex = prepare::<T>(s, &model.config)?;
            let tape = Tape::new();
            let out = model.forward(&tape, &ex.image, opts)?;
            Ok((out.heatmaps.decode(&tape), s))
        })
        .collect();
    let groups = crate::schema::Group::ALL;
    // hits and totals at thresholds 0.1 and 0.2, overall then per group
    let mut hits = vec![[0usize; 2]; groups.len() + 1];
    let mut total = vec![0usize; groups.len() + 1];
    for r in per_sample {
        let (pred, s) = r?;
        let gt: Vec<[f64; 2]> = s.coords.iter().map(|c| [c[0] as f64, c[1] as f64]).collect();
        let Some(diag) = bbox_diagonal(&gt, &s.visibility) else {
            continue;
        };
        for (i, (p, g)) in pred.iter().zip(&gt).enumerate() {
            if !s.visibility[i] {
                continue;
            }
            let err = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
            let slot = 1 + schema.group_of[i].index();
            for b in [0, slot] {
                total[b] += 1;
                for (t, thr) in [0.1, 0.2].into_iter().enumerate() {
                    if err <= thr * diag {
                        hits[b][t] += 1;
                    }
                }
            }
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    let per_group = groups
        .iter()
        .enumerate()
        .filter(|&(g, _)| total[g + 1] > 0)
        .map(|(g, grp)| {
            let (h, n) = (hits[g + 1], total[g + 1]);
            (grp.name().to_owned(), frac(h[0], n), frac(h[1], n))
        })
        .collect();
    Ok(EvalReport {
        samples: samples.len(),
        pck_01: frac(hits[0][0], total[0]),
        pck_02: frac(hits[0][1], total[0]),
        per_group,
    })
}

fn bbox_diagonal(gt: &[[f64; 2]], visible: &[bool]) -> Option<f64> {
    let mut it = gt.iter().zip(visible).filter(|(_, &v)| v).map(|(p, _)| p);
    let first = it.next()?;
    let (mut lo, mut hi) = (*first, *first);
    for p in it {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    Some(((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt())
}
