//! Analytic parameter and FLOPs accounting.
//!
//! One multiply-accumulate is two FLOPs. Softmax and layer normalisation are
//! charged five FLOPs per element they process. Elementwise activations,
//! residual additions and gathers are free.

use serde::{Deserialize, Serialize};

use crate::config::{AttentionKind, IntroductionMode, ModelConfig};
use crate::error::Result;
use crate::model::{ForwardOptions, Model};
use crate::numerics::{Array, Tape};
use crate::pruning::retained_count;
use crate::schema::{Group, KeypointSchema, Mode};
use crate::transition::active_groups;

pub const FLOPS_PER_MAC: u64 = 2;
pub const FLOPS_PER_NORM_ELEM: u64 = 5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub norm_elems: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    /// 1-based over coarse then fine layers.
    pub layer: usize,
    pub group: Option<Group>,
    pub queries: usize,
    pub keys: usize,
    pub visual: usize,
    pub macs: u64,
    pub norm_elems: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub pruned: bool,
    pub modules: Vec<ModuleCost>,
    pub layers: Vec<LayerCost>,
    pub params: u64,
    pub macs: u64,
    pub norm_elems: u64,
    /// `2 × macs`.
    pub matmul_flops: u64,
    /// `5 × norm_elems`.
    pub softmax_norm_flops: u64,
    pub total_flops: u64,
    /// Total FLOPs of the same model without pruning.
    pub unpruned_total_flops: u64,
    /// `100 · (1 − total / unpruned)`.
    pub reduction_pct: f64,
    /// Groups whose visual budget was clamped to one token.
    pub clamped: Vec<String>,
}

fn linear_params(fan_in: usize, fan_out: usize) -> u64 {
    (fan_in * fan_out + fan_out) as u64
}

/// Learnable scalars of one transformer layer.
pub fn layer_params(d: usize) -> u64 {
    // two layer norms, four projections, two FFN linears
    (4 * d) as u64 + 4 * linear_params(d, d) + linear_params(d, 4 * d) + linear_params(4 * d, d)
}

fn stem_params(cfg: &ModelConfig) -> u64 {
    let mut cin = cfg.image_channels;
    let mut total = 0;
    for _ in 0..cfg.stem_layers {
        total += linear_params(9 * cin, cfg.stem_channels);
        cin = cfg.stem_channels;
    }
    total
}

fn tokenizer_params(cfg: &ModelConfig) -> u64 {
    linear_params(cfg.patch_dim(), cfg.embed_dim) + (cfg.n_vis() * cfg.embed_dim) as u64
}

fn keypoint_params(cfg: &ModelConfig, schema: &KeypointSchema) -> u64 {
    let d = cfg.embed_dim as u64;
    let mut n = 1 + schema.num_sparse() as u64;
    if schema.mode == Mode::Wholebody {
        n += (schema.num_parts() + schema.num_dense()) as u64;
    }
    n * d
}

fn mask_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.embed_dim;
    if cfg.ablation.masking {
        linear_params(d, d) + linear_params(d, 3 * d)
    } else {
        0
    }
}

fn head_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.embed_dim;
    2 * d as u64 + linear_params(d, cfg.bins_x()) + linear_params(d, cfg.bins_y())
}

/// Exact number of learnable scalars.
pub fn count_params(cfg: &ModelConfig, schema: &KeypointSchema) -> u64 {
    stem_params(cfg)
        + tokenizer_params(cfg)
        + keypoint_params(cfg, schema)
        + (cfg.coarse_layers + cfg.fine_layers) as u64 * layer_params(cfg.embed_dim)
        + mask_params(cfg)
        + head_params(cfg)
}

#[derive(Default)]
struct Tally {
    macs: u64,
    norm: u64,
}

impl Tally {
    fn mm(&mut self, m: usize, k: usize, n: usize) {
        self.macs += (m * k * n) as u64;
    }

    fn norm(&mut self, rows: usize, cols: usize) {
        self.norm += (rows * cols) as u64;
    }

    /// Attention of `nq` queries over `nk` keys, excluding projections.
    fn attention(&mut self, nq: usize, nk: usize, d: usize, heads: usize) {
        let dh = d / heads;
        for _ in 0..heads {
            self.mm(nq, dh, nk);
            self.norm(nq, nk);
            self.mm(nq, nk, dh);
        }
    }

    /// Output projection, second norm and FFN over `n` rows.
    fn finish(&mut self, n: usize, d: usize) {
        self.mm(n, d, d);
        self.norm(n, d);
        self.mm(n, d, 4 * d);
        self.mm(n, 4 * d, d);
    }

    /// First norm plus Q, K, V projections over `n` rows.
    fn project(&mut self, n: usize, d: usize) {
        self.norm(n, d);
        self.mm(n, d, 3 * d);
    }
}

struct Schedule {
    stage1: usize,
    /// Per group: (sparse, dense, visual after stage 2, visual after stage 3).
    groups: Vec<(Option<Group>, usize, usize, usize, usize)>,
    clamped: Vec<String>,
}

fn schedule(cfg: &ModelConfig, schema: &KeypointSchema, prune: bool) -> Result<Schedule> {
    let n_vis = cfg.n_vis();
    let [a1, a2, a3] = cfg.prune_rates;
    let mut clamped = Vec::new();
    let coarse_prune = prune && cfg.coarse_layers > 0;
    let stage1 = if coarse_prune {
        retained_count(a1, n_vis, 0)?.min(n_vis)
    } else {
        n_vis
    };
    let mut groups = Vec::new();
    for g in active_groups(cfg.ablation.grouping) {
        let (ns, nd) = match g {
            Some(g) => (schema.sparse_in(g).len(), schema.dense_in(g).len()),
            None => (schema.num_sparse(), schema.num_dense()),
        };
        let name = g.map_or("all", Group::name);
        let mut stage = |alpha: f64, current: usize, on: bool| -> Result<usize> {
            if !on {
                return Ok(current);
            }
            let budget = ((1.0 - alpha) * n_vis as f64 + 1e-9).floor() as usize;
            if budget <= nd {
                clamped.push(format!("{name} group: budget {budget} with {nd} dense tokens"));
            }
            Ok(retained_count(alpha, n_vis, nd)?.min(current))
        };
        let s2 = stage(a2, stage1, coarse_prune)?;
        let s3 = stage(a3, s2, prune && cfg.fine_layers > 0)?;
        groups.push((g, ns, nd, s2, s3));
    }
    clamped.dedup();
    Ok(Schedule {
        stage1,
        groups,
        clamped,
    })
}

fn module(name: &str, params: u64, t: &Tally) -> ModuleCost {
    ModuleCost {
        name: name.to_owned(),
        params,
        macs: t.macs,
        norm_elems: t.norm,
        flops: FLOPS_PER_MAC * t.macs + FLOPS_PER_NORM_ELEM * t.norm,
    }
}

fn layer_cost(layer: usize, group: Option<Group>, q: usize, k: usize, v: usize, t: &Tally) -> LayerCost {
    LayerCost {
        layer,
        group,
        queries: q,
        keys: k,
        visual: v,
        macs: t.macs,
        norm_elems: t.norm,
        flops: FLOPS_PER_MAC * t.macs + FLOPS_PER_NORM_ELEM * t.norm,
    }
}

fn raw_cost(cfg: &ModelConfig, schema: &KeypointSchema, prune: bool) -> Result<CostReport> {
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let n_vis = cfg.n_vis();
    let ns_all = schema.num_sparse();
    let nd_all = schema.num_dense();
    let np = schema.num_parts();
    let sched = schedule(cfg, schema, prune)?;
    let mut modules = Vec::new();
    let mut layers = Vec::new();

    let mut t = Tally::default();
    let (mut h, mut w, mut c) = (cfg.image_height, cfg.image_width, cfg.image_channels);
    for _ in 0..cfg.stem_layers {
        let (ho, wo) = (h / 2, w / 2);
        t.mm(ho * wo, 9 * c, cfg.stem_channels);
        (h, w, c) = (ho, wo, cfg.stem_channels);
    }
    modules.push(module("stem", stem_params(cfg), &t));

    let mut t = Tally::default();
    t.mm(n_vis, cfg.patch_dim(), d);
    modules.push(module("tokenizer", tokenizer_params(cfg), &t));

    let (before, after) = match cfg.ablation.introduction_mode {
        IntroductionMode::HumanSparseDense => (1, ns_all + np),
        IntroductionMode::SparseDense => (ns_all + np, ns_all + np),
        IntroductionMode::Dense => (ns_all + nd_all, ns_all + nd_all),
    };
    let mut coarse = Tally::default();
    for l in 1..=cfg.coarse_layers {
        let (kp, vis) = if l <= cfg.h2k_layer {
            (before, n_vis)
        } else {
            (after, sched.stage1)
        };
        let n = kp + vis;
        let mut t = Tally::default();
        t.project(n, d);
        t.attention(n, n, d, heads);
        t.finish(n, d);
        layers.push(layer_cost(l, None, n, n, vis, &t));
        coarse.macs += t.macs;
        coarse.norm += t.norm;
    }
    modules.push(module(
        "coarse_encoder",
        keypoint_params(cfg, schema) + cfg.coarse_layers as u64 * layer_params(d),
        &coarse,
    ));

    let mut t = Tally::default();
    if cfg.ablation.masking && cfg.fine_layers > 0 {
        t.mm(sched.stage1, d, d);
        t.mm(sched.stage1, d, 3 * d);
    }
    modules.push(module("transition", mask_params(cfg), &t));

    let mut fine = Tally::default();
    for l in 1..=cfg.fine_layers {
        let layer_no = cfg.coarse_layers + l;
        let mut shared = Tally::default();
        shared.project(ns_all, d);
        fine.macs += shared.macs;
        fine.norm += shared.norm;
        for &(g, ns, nd, s2, s3) in &sched.groups {
            let vis = if l <= cfg.fine_prune_layer { s2 } else { s3 };
            let rows = nd + vis;
            let nq = ns + rows;
            let nk = match cfg.ablation.attention {
                AttentionKind::Mhga => ns_all + rows,
                AttentionKind::Mhsa => ns + rows,
            };
            let mut t = Tally::default();
            t.project(rows, d);
            t.attention(nq, nk, d, heads);
            t.finish(nq, d);
            layers.push(layer_cost(layer_no, g, nq, nk, vis, &t));
            fine.macs += t.macs;
            fine.norm += t.norm;
        }
    }
    modules.push(module("fine_encoder", cfg.fine_layers as u64 * layer_params(d), &fine));

    let mut t = Tally::default();
    let k = schema.num_keypoints();
    t.norm(k, d);
    t.mm(k, d, cfg.bins_x());
    t.mm(k, d, cfg.bins_y());
    modules.push(module("head", head_params(cfg), &t));

    let macs = modules.iter().map(|m| m.macs).sum::<u64>();
    let norm_elems = modules.iter().map(|m| m.norm_elems).sum::<u64>();
    let matmul_flops = FLOPS_PER_MAC * macs;
    let softmax_norm_flops = FLOPS_PER_NORM_ELEM * norm_elems;
    Ok(CostReport {
        pruned: prune,
        modules,
        layers,
        params: count_params(cfg, schema),
        macs,
        norm_elems,
        matmul_flops,
        softmax_norm_flops,
        total_flops: matmul_flops + softmax_norm_flops,
        unpruned_total_flops: 0,
        reduction_pct: 0.0,
        clamped: sched.clamped,
    })
}

/// Cost of one forward pass with the exact token counts of every layer and
/// group. Clamped group budgets are listed in the report, not rejected.
pub fn count_flops(cfg: &ModelConfig, schema: &KeypointSchema, prune: bool) -> Result<CostReport> {
    cfg.validate()?;
    let prune = prune && cfg.ablation.pruning;
    let mut report = raw_cost(cfg, schema, prune)?;
    let base = if prune {
        raw_cost(cfg, schema, false)?.total_flops
    } else {
        report.total_flops
    };
    report.unpruned_total_flops = base;
    report.reduction_pct = if base > 0 {
        100.0 * (1.0 - report.total_flops as f64 / base as f64)
    } else {
        0.0
    };
    Ok(report)
}

/// Multiply-accumulates and normalised elements counted while running the
/// real forward pass on a deterministic image.
pub fn mac_oracle(cfg: &ModelConfig, prune: bool) -> Result<(u64, u64)> {
    let model = Model::<f32>::new(cfg.clone())?;
    let image = Array::from_fn(&[cfg.image_height, cfg.image_width, cfg.image_channels], |i| {
        ((i * 2_654_435_761) % 1000) as f32 / 1000.0
    });
    let tape = Tape::new();
    let opts = ForwardOptions {
        prune,
        ..ForwardOptions::default()
    };
    model.forward(&tape, &image, &opts)?;
    Ok((tape.macs(), tape.norm_elems()))
}

impl CostReport {
    /// Fixed-width text rendering of the per-module breakdown.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>12} {:>16} {:>14} {:>16}\n",
            "module", "params", "macs", "norm elems", "flops"
        );
        for m in &self.modules {
            s += &format!(
                "{:<16} {:>12} {:>16} {:>14} {:>16}\n",
                m.name, m.params, m.macs, m.norm_elems, m.flops
            );
        }
        s += &format!(
            "{:<16} {:>12} {:>16} {:>14} {:>16}\n",
            "total", self.params, self.macs, self.norm_elems, self.total_flops
        );
        s += &format!(
            "pruned: {}  unpruned total: {}  reduction: {:.2}%\n",
            self.pruned, self.unpruned_total_flops, self.reduction_pct
        );
        for c in &self.clamped {
            s += &format!("clamped: {c}\n");
        }
        s
    }
}
