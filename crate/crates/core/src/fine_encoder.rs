//! Fine encoder: group transformer layers with multi-head group attention
//! and the third pruning stage.

use crate::coarse_encoder::{AttentionRecord, Role};
use crate::config::AttentionKind;
use crate::error::{Error, Result};
use crate::layers::{attend, finish, norm1, qkv, stack_heads, LayerVars};
use crate::model::{Context, LayerTokens};
use crate::numerics::{Real, Tape, Var};
use crate::pruning::{Pruner, Stage};
use crate::transition::{GroupState, GroupTokens};

/// The shared sparse tokens of one layer with their projections, computed
/// once and read by every group.
#[derive(Clone, Copy, Debug)]
pub struct SharedSparse {
    pub x: Var,
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub fn share_sparse<T: Real>(tape: &Tape<T>, l: &LayerVars, x_s: Var) -> Result<SharedSparse> {
    let (q, k, v) = qkv(tape, l, norm1(tape, l, x_s)?)?;
    Ok(SharedSparse { x: x_s, q, k, v })
}

#[derive(Clone, Debug)]
pub struct GroupOutput {
    /// Updated rows of the group's own sparse tokens.
    pub sparse: Var,
    pub dense: Option<Var>,
    pub visual: Var,
    /// Per-head `N_q × N_k` attention.
    pub attention: Vec<Var>,
    /// Column offset of the first visual key.
    pub visual_key_offset: usize,
}

/// One group's layer. Queries come from the group's own tokens; keys and
/// values prepend the whole shared sparse matrix (MHGA) or only the
/// group's sparse rows (plain MHSA within the group).
pub fn mhga<T: Real>(
    tape: &Tape<T>,
    l: &LayerVars,
    shared: &SharedSparse,
    g: &GroupTokens,
    heads: usize,
    kind: AttentionKind,
) -> Result<GroupOutput> {
    let n_s = tape.shape(shared.x)[0];
    if let Some(&bad) = g.sparse_idx.iter().find(|&&i| i >= n_s) {
        return Err(Error::arg(
            "mhga",
            format!("sparse row {bad} outside the shared {n_s}-row matrix"),
        ));
    }
    let ns_j = g.sparse_idx.len();
    let nd_j = g.dense_idx.len();
    let dv = match g.dense {
        Some(d) => tape.concat_rows(&[d, g.visual])?,
        None => g.visual,
    };
    let (qd, kd, vd) = qkv(tape, l, norm1(tape, l, dv)?)?;
    let q = tape.concat_rows(&[tape.gather_rows(shared.q, &g.sparse_idx)?, qd])?;
    let (k, v, offset) = match kind {
        AttentionKind::Mhga => (
            tape.concat_rows(&[shared.k, kd])?,
            tape.concat_rows(&[shared.v, vd])?,
            n_s + nd_j,
        ),
        AttentionKind::Mhsa => (
            tape.concat_rows(&[tape.gather_rows(shared.k, &g.sparse_idx)?, kd])?,
            tape.concat_rows(&[tape.gather_rows(shared.v, &g.sparse_idx)?, vd])?,
            ns_j + nd_j,
        ),
    };
    let (o, attention) = attend(tape, q, k, v, heads)?;
    let xj = tape.concat_rows(&[tape.gather_rows(shared.x, &g.sparse_idx)?, dv])?;
    let y = finish(tape, l, xj, o)?;

    let rows = tape.shape(y)[0];
    let range = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
    let sparse = tape.gather_rows(y, &range(0, ns_j))?;
    let dense = if nd_j > 0 {
        Some(tape.gather_rows(y, &range(ns_j, ns_j + nd_j))?)
    } else {
        None
    };
    let visual = tape.gather_rows(y, &range(ns_j + nd_j, rows))?;
    Ok(GroupOutput {
        sparse,
        dense,
        visual,
        attention,
        visual_key_offset: offset,
    })
}

fn key_roles(g: &GroupTokens, n_s: usize, kind: AttentionKind) -> Vec<Role> {
    let sparse: Vec<Role> = match kind {
        AttentionKind::Mhga => (0..n_s).map(Role::Sparse).collect(),
        AttentionKind::Mhsa => g.sparse_idx.iter().map(|&i| Role::Sparse(i)).collect(),
    };
    sparse
        .into_iter()
        .chain(g.dense_idx.iter().map(|&d| Role::Dense(d)))
        .chain(g.retained.iter().map(|&p| Role::Visual(p)))
        .collect()
}

/// Runs the fine layers. Each group writes back only its own sparse rows;
/// the shared matrix is reassembled at the end of every layer.
pub fn run_fine<T: Real>(
    cx: &Context<'_, T>,
    mut state: GroupState<T>,
    pruner: &mut Pruner,
) -> Result<GroupState<T>> {
    let cfg = cx.config;
    let tape = cx.tape;
    let kind = cfg.ablation.attention;
    let n_s = tape.shape(state.shared_sparse)[0];
    let mut owner_order: Vec<usize> = Vec::with_capacity(n_s);
    for g in &state.groups {
        owner_order.extend_from_slice(&g.sparse_idx);
    }
    let identity = owner_order.iter().enumerate().all(|(i, &s)| i == s);
    let mut inverse = vec![0; n_s];
    for (pos, &s) in owner_order.iter().enumerate() {
        inverse[s] = pos;
    }

    for l in 0..cfg.fine_layers {
        let layer_no = cfg.coarse_layers + l + 1;
        let layer = LayerVars::bind(tape, cx.params, &format!("fine.{l}"))?;
        let shared = share_sparse(tape, &layer, state.shared_sparse)?;
        let mut updated = Vec::with_capacity(state.groups.len());
        for g in state.groups.iter_mut() {
            let out = mhga(tape, &layer, &shared, g, cfg.heads, kind)?;
            let nq = g.sparse_idx.len() + g.dense_idx.len() + g.retained.len();
            state.trace.push(LayerTokens {
                layer: layer_no,
                group: g.group,
                queries: nq,
                keys: out.visual_key_offset + g.retained.len(),
                visual: g.retained.len(),
            });
            if cx.record_attention {
                let qr = g.query_roles();
                let kr = key_roles(g, n_s, kind);
                let rows: Vec<usize> = (0..qr.len()).collect();
                let cols: Vec<usize> = (0..kr.len()).collect();
                state.records.push(AttentionRecord {
                    layer: l + 1 + cfg.coarse_layers,
                    group: g.group,
                    attention: stack_heads(tape, &out.attention, &rows, &cols),
                    query_roles: qr,
                    key_roles: kr,
                });
            }
            g.dense = out.dense;
            g.visual = out.visual;
            if l + 1 == cfg.fine_prune_layer {
                let queries: Vec<usize> = (0..g.sparse_idx.len() + g.dense_idx.len()).collect();
                let cols: Vec<usize> =
                    (0..g.retained.len()).map(|c| out.visual_key_offset + c).collect();
                let slices = stack_heads(tape, &out.attention, &queries, &cols);
                let decision =
                    pruner.decide(Stage::Fine, g.group, Some(&slices), &g.retained, g.dense_idx.len())?;
                if decision.kept.len() < g.retained.len() {
                    g.visual = tape.gather_rows(g.visual, &decision.kept)?;
                }
                g.retained = decision.retained;
            }
            updated.push(out.sparse);
        }
        let stacked = if updated.len() == 1 {
            updated[0]
        } else {
            tape.concat_rows(&updated)?
        };
        state.shared_sparse = if identity {
            stacked
        } else {
            tape.gather_rows(stacked, &inverse)?
        };
    }
    if cfg.fine_layers == 0 {
        for g in state.groups.iter() {
            pruner.decide::<T>(Stage::Fine, g.group, None, &g.retained, g.dense_idx.len())?;
        }
    }
    Ok(state)
}
