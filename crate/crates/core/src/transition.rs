//! Coarse-to-fine transition: dense tokens from part tokens, group routing,
//! per-group visual masks and the second pruning stage.

use crate::coarse_encoder::{AttentionRecord, Role, TokenState};
use crate::error::{Error, Result};
use crate::layers::{linear, stack_heads};
use crate::model::{Context, LayerTokens};
use crate::numerics::{Real, Tape, Var};
use crate::pruning::{Pruner, Stage};
use crate::schema::{Group, KeypointSchema, Mode};

/// Each dense token is its owning part token plus its own embedding row.
pub fn make_dense<T: Real>(
    tape: &Tape<T>,
    parts: Var,
    dense_embed: Var,
    schema: &KeypointSchema,
) -> Result<Var> {
    if schema.mode == Mode::Body {
        return Err(Error::Schema("body mode has no dense keypoints".into()));
    }
    let owners = tape.gather_rows(parts, &schema.dense_owner)?;
    tape.add(owners, dense_embed)
}

/// Per-group masks `M^j = sigmoid(MLP(X_v))[:, j·d..(j+1)·d]` and masked
/// tokens `X_v ⊙ M^j`. Without masking, or with no fine layers to read the
/// result, every group sees `X_v` unchanged.
pub fn mask_visual<T: Real>(
    cx: &Context<'_, T>,
    x_v: Var,
    groups: usize,
) -> Result<(Vec<Option<Var>>, Vec<Var>)> {
    if !cx.config.ablation.masking || cx.config.fine_layers == 0 {
        return Ok((vec![None; groups], vec![x_v; groups]));
    }
    let tape = cx.tape;
    let d = cx.config.embed_dim;
    let h = tape.gelu(linear(tape, x_v, cx.param("mask.w1")?, cx.param("mask.b1")?)?);
    let m = tape.sigmoid(linear(tape, h, cx.param("mask.w2")?, cx.param("mask.b2")?)?);
    let mut masks = Vec::with_capacity(groups);
    let mut out = Vec::with_capacity(groups);
    for j in 0..groups {
        let mj = tape.slice_cols(m, j * d, d)?;
        out.push(tape.mul(x_v, mj)?);
        masks.push(Some(mj));
    }
    Ok((masks, out))
}

/// Tokens owned by one group of the fine encoder.
#[derive(Clone, Debug)]
pub struct GroupTokens {
    /// `None` when grouping is disabled and one group holds everything.
    pub group: Option<Group>,
    /// Rows of the shared sparse matrix owned by this group.
    pub sparse_idx: Vec<usize>,
    /// Dense keypoint indices owned by this group.
    pub dense_idx: Vec<usize>,
    pub dense: Option<Var>,
    pub visual: Var,
    pub mask: Option<Var>,
    /// Original patch indices of this group's visual tokens.
    pub retained: Vec<usize>,
}

impl GroupTokens {
    pub fn query_roles(&self) -> Vec<Role> {
        self.sparse_idx
            .iter()
            .map(|&i| Role::Sparse(i))
            .chain(self.dense_idx.iter().map(|&d| Role::Dense(d)))
            .chain(self.retained.iter().map(|&p| Role::Visual(p)))
            .collect()
    }
}

pub struct GroupState<T> {
    /// `N_s × d`, shared by every group.
    pub shared_sparse: Var,
    pub groups: Vec<GroupTokens>,
    pub records: Vec<AttentionRecord<T>>,
    pub trace: Vec<LayerTokens>,
}

impl<T: Real> GroupState<T> {
    /// All keypoint tokens in schema order: sparse, then dense.
    pub fn keypoint_tokens(&self, cx: &Context<'_, T>) -> Result<Var> {
        let mut dense_parts = Vec::new();
        let mut order = Vec::new();
        for g in &self.groups {
            if let Some(d) = g.dense {
                dense_parts.push(d);
                order.extend_from_slice(&g.dense_idx);
            }
        }
        if dense_parts.is_empty() {
            return Ok(self.shared_sparse);
        }
        let stacked = cx.tape.concat_rows(&dense_parts)?;
        let mut inverse = vec![0; order.len()];
        for (pos, &d) in order.iter().enumerate() {
            inverse[d] = pos;
        }
        let dense = cx.tape.gather_rows(stacked, &inverse)?;
        cx.tape.concat_rows(&[self.shared_sparse, dense])
    }
}

/// The group list used by the fine encoder.
pub fn active_groups(grouping: bool) -> Vec<Option<Group>> {
    if grouping {
        Group::ALL.iter().copied().map(Some).collect()
    } else {
        vec![None]
    }
}

/// Routes tokens to groups, masks the visual tokens and applies the second
/// pruning stage per group, scored with the last coarse layer's attention.
pub fn assign_groups<T: Real>(
    cx: &Context<'_, T>,
    state: TokenState<T>,
    pruner: &mut Pruner,
) -> Result<GroupState<T>> {
    let tape = cx.tape;
    let schema = cx.schema;
    let ns = schema.num_sparse();
    let rows_where = |f: &dyn Fn(Role) -> bool| -> Vec<usize> {
        (0..state.roles.len()).filter(|&i| f(state.roles[i])).collect()
    };
    let sparse_rows = rows_where(&|r| matches!(r, Role::Sparse(_)));
    let part_rows = rows_where(&|r| matches!(r, Role::Part(_)));
    let dense_rows = rows_where(&|r| matches!(r, Role::Dense(_)));
    let visual_rows = rows_where(&Role::is_visual);

    let sparse_ok = sparse_rows.len() == ns
        && sparse_rows.iter().enumerate().all(|(i, &r)| state.roles[r] == Role::Sparse(i));
    if !sparse_ok {
        return Err(Error::Schema(format!(
            "expected {ns} sparse tokens in schema order at the transition"
        )));
    }
    let shared_sparse = tape.gather_rows(state.tokens, &sparse_rows)?;
    let dense_all = if !part_rows.is_empty() {
        let parts = tape.gather_rows(state.tokens, &part_rows)?;
        Some(make_dense(tape, parts, cx.param("dense_embed")?, schema)?)
    } else if !dense_rows.is_empty() {
        Some(tape.gather_rows(state.tokens, &dense_rows)?)
    } else {
        None
    };
    let n_dense = dense_all.map_or(0, |d| tape.shape(d)[0]);
    if n_dense != schema.num_dense() {
        return Err(Error::Schema(format!(
            "{n_dense} dense tokens for {} dense keypoints",
            schema.num_dense()
        )));
    }
    let x_v = tape.gather_rows(state.tokens, &visual_rows)?;
    let retained = state.retained();

    let groups = active_groups(cx.config.ablation.grouping);
    let (masks, masked) = mask_visual(cx, x_v, groups.len())?;
    let mut out = Vec::with_capacity(groups.len());
    for (j, &group) in groups.iter().enumerate() {
        let (sparse_idx, dense_idx) = match group {
            Some(g) => (schema.sparse_in(g), schema.dense_in(g)),
            None => ((0..ns).collect(), (0..n_dense).collect()),
        };
        let slices = state.last_attention.as_ref().map(|(attn, roles)| {
            let keypoint = |r: Role| match group {
                Some(g) => r.group(schema) == Some(g),
                None => !r.is_visual(),
            };
            let mut queries: Vec<usize> = (0..roles.len()).filter(|&i| keypoint(roles[i])).collect();
            if queries.is_empty() {
                queries = (0..roles.len()).filter(|&i| roles[i] == Role::Human).collect();
            }
            let cols = visual_columns(roles, &retained);
            stack_heads(tape, attn, &queries, &cols)
        });
        let decision = pruner.decide(
            Stage::Transition,
            group,
            slices.as_ref(),
            &retained,
            dense_idx.len(),
        )?;
        let visual = if decision.kept.len() < retained.len() {
            tape.gather_rows(masked[j], &decision.kept)?
        } else {
            masked[j]
        };
        let dense = match dense_all {
            Some(d) if !dense_idx.is_empty() => Some(tape.gather_rows(d, &dense_idx)?),
            _ => None,
        };
        out.push(GroupTokens {
            group,
            sparse_idx,
            dense_idx,
            dense,
            visual,
            mask: masks[j],
            retained: decision.retained,
        });
    }
    Ok(GroupState {
        shared_sparse,
        groups: out,
        records: state.records,
        trace: state.trace,
    })
}

/// Columns of `roles` holding the visual tokens in `alive`, in order.
pub(crate) fn visual_columns(roles: &[Role], alive: &[usize]) -> Vec<usize> {
    let mut cols = Vec::with_capacity(alive.len());
    let mut next = alive.iter().peekable();
    for (c, r) in roles.iter().enumerate() {
        if let (Role::Visual(p), Some(&&want)) = (r, next.peek()) {
            if *p == want {
                cols.push(c);
                next.next();
            }
        }
    }
    cols
}
