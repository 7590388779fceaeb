//! Coarse encoder: plain transformer layers over keypoint and visual tokens,
//! with the human-to-keypoint expansion and the first pruning stage.

use serde::{Deserialize, Serialize};

use crate::config::IntroductionMode;
use crate::error::{Error, Result};
use crate::layers::{mhsa_layer, stack_heads, LayerVars};
use crate::model::{Context, LayerTokens};
use crate::numerics::{Array, Real, Var};
use crate::pruning::{Pruner, Stage};
use crate::schema::{Group, KeypointSchema, Mode};
use crate::tokenizer::VisualTokens;

/// What a row of the token sequence stands for. Indices are into the
/// schema's sparse, part and dense lists, or the original patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Human,
    Sparse(usize),
    Part(usize),
    Dense(usize),
    Visual(usize),
}

impl Role {
    pub fn is_visual(self) -> bool {
        matches!(self, Role::Visual(_))
    }

    /// Group of a keypoint or part token; `None` for human and visual tokens.
    pub fn group(self, schema: &KeypointSchema) -> Option<Group> {
        match self {
            Role::Sparse(i) => Some(schema.group_of[i]),
            Role::Part(p) => Some(schema.part_group[p]),
            Role::Dense(d) => Some(schema.group_of[schema.num_sparse() + d]),
            Role::Human | Role::Visual(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionRecord<T> {
    /// 1-based over coarse then fine layers.
    pub layer: usize,
    pub group: Option<Group>,
    /// `h × N_q × N_k`.
    pub attention: Array<T>,
    pub query_roles: Vec<Role>,
    pub key_roles: Vec<Role>,
}

/// The live sequence inside the coarse encoder.
pub struct TokenState<T> {
    /// `N × d`, non-visual tokens first.
    pub tokens: Var,
    pub roles: Vec<Role>,
    pub records: Vec<AttentionRecord<T>>,
    pub trace: Vec<LayerTokens>,
    /// Per-head attention of the last coarse layer and the roles it saw.
    pub last_attention: Option<(Vec<Var>, Vec<Role>)>,
}

impl<T: Real> TokenState<T> {
    /// Original patch indices of the visual tokens still alive.
    pub fn retained(&self) -> Vec<usize> {
        self.roles
            .iter()
            .filter_map(|r| match r {
                Role::Visual(p) => Some(*p),
                _ => None,
            })
            .collect()
    }

    pub fn count(&self, pred: impl Fn(Role) -> bool) -> usize {
        self.roles.iter().filter(|&&r| pred(r)).count()
    }

    /// Bookkeeping invariants: one row per role, at most one human token,
    /// non-visual tokens before visual ones, retained patches increasing.
    pub fn check(&self, cx: &Context<'_, T>) -> Result<()> {
        let rows = cx.tape.shape(self.tokens)[0];
        if rows != self.roles.len() {
            return Err(Error::State(format!(
                "{rows} token rows but {} roles",
                self.roles.len()
            )));
        }
        if self.count(|r| r == Role::Human) > 1 {
            return Err(Error::State("more than one human token".into()));
        }
        let first_visual = self.roles.iter().position(|r| r.is_visual()).unwrap_or(rows);
        if self.roles[first_visual..].iter().any(|r| !r.is_visual()) {
            return Err(Error::State("keypoint token after visual tokens".into()));
        }
        if self.retained().windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::State("retained patches not strictly increasing".into()));
        }
        Ok(())
    }
}

/// Keypoint tokens present at the first coarse layer.
fn initial_tokens<T: Real>(cx: &Context<'_, T>) -> Result<(Vec<Var>, Vec<Role>)> {
    let tape = cx.tape;
    let schema = cx.schema;
    let human = cx.param("human_token")?;
    let mode = cx.config.ablation.introduction_mode;
    if mode == IntroductionMode::HumanSparseDense {
        return Ok((vec![human], vec![Role::Human]));
    }
    let sparse = tape.add_row(cx.param("sparse_embed")?, human)?;
    let mut parts = vec![sparse];
    let mut roles: Vec<Role> = (0..schema.num_sparse()).map(Role::Sparse).collect();
    if schema.mode == Mode::Wholebody {
        let p = tape.add_row(cx.param("part_embed")?, human)?;
        if mode == IntroductionMode::SparseDense {
            parts.push(p);
            roles.extend((0..schema.num_parts()).map(Role::Part));
        } else {
            let dense = crate::transition::make_dense(tape, p, cx.param("dense_embed")?, schema)?;
            parts.push(dense);
            roles.extend((0..schema.num_dense()).map(Role::Dense));
        }
    }
    Ok((parts, roles))
}

/// Replaces the human token by `X_h + E_s` sparse tokens and, in whole-body
/// mode, `X_h + E_p` part tokens, placed before the visual tokens.
pub fn h2k<T: Real>(cx: &Context<'_, T>, state: &mut TokenState<T>) -> Result<()> {
    if state.roles.first() != Some(&Role::Human) {
        return Err(Error::State("human-to-keypoint expansion needs a human token".into()));
    }
    let tape = cx.tape;
    let n = state.roles.len();
    let xh = tape.gather_rows(state.tokens, &[0])?;
    let mut parts = vec![tape.add_row(cx.param("sparse_embed")?, xh)?];
    let mut roles: Vec<Role> = (0..cx.schema.num_sparse()).map(Role::Sparse).collect();
    if cx.schema.mode == Mode::Wholebody {
        parts.push(tape.add_row(cx.param("part_embed")?, xh)?);
        roles.extend((0..cx.schema.num_parts()).map(Role::Part));
    }
    if n > 1 {
        let rest: Vec<usize> = (1..n).collect();
        parts.push(tape.gather_rows(state.tokens, &rest)?);
    }
    roles.extend_from_slice(&state.roles[1..]);
    state.tokens = tape.concat_rows(&parts)?;
    state.roles = roles;
    Ok(())
}

/// Stage-1 pruning from the non-visual query rows of one layer's attention.
fn prune_stage1<T: Real>(
    cx: &Context<'_, T>,
    state: &mut TokenState<T>,
    attn: Option<&[Var]>,
    pruner: &mut Pruner,
) -> Result<()> {
    let (queries, visual): (Vec<usize>, Vec<usize>) =
        (0..state.roles.len()).partition(|&i| !state.roles[i].is_visual());
    let slices = attn.map(|a| stack_heads(cx.tape, a, &queries, &visual));
    let current = state.retained();
    let decision = pruner.decide(Stage::Coarse, None, slices.as_ref(), &current, 0)?;
    if decision.kept.len() < visual.len() {
        let rows: Vec<usize> = queries
            .iter()
            .copied()
            .chain(decision.kept.iter().map(|&k| visual[k]))
            .collect();
        state.tokens = cx.tape.gather_rows(state.tokens, &rows)?;
        state.roles = rows.iter().map(|&r| state.roles[r]).collect();
    }
    Ok(())
}

/// Runs the coarse layers. Pruning at the expansion layer uses the attention
/// computed while the human token is still present, then expands.
pub fn run_coarse<T: Real>(
    cx: &Context<'_, T>,
    visual: &VisualTokens,
    pruner: &mut Pruner,
) -> Result<TokenState<T>> {
    let cfg = cx.config;
    let (mut parts, mut roles) = initial_tokens(cx)?;
    parts.push(visual.tokens);
    roles.extend((0..visual.len()).map(Role::Visual));
    let mut state = TokenState {
        tokens: cx.tape.concat_rows(&parts)?,
        roles,
        records: Vec::new(),
        trace: Vec::new(),
        last_attention: None,
    };
    let hsd = cfg.ablation.introduction_mode == IntroductionMode::HumanSparseDense;

    if cfg.coarse_layers == 0 {
        prune_stage1(cx, &mut state, None, pruner)?;
        if hsd {
            h2k(cx, &mut state)?;
        }
    }
    for l in 0..cfg.coarse_layers {
        let layer = LayerVars::bind(cx.tape, cx.params, &format!("coarse.{l}"))?;
        let (x, attn) = mhsa_layer(cx.tape, &layer, state.tokens, cfg.heads)?;
        let n = state.roles.len();
        state.tokens = x;
        state.trace.push(LayerTokens {
            layer: l + 1,
            group: None,
            queries: n,
            keys: n,
            visual: state.count(Role::is_visual),
        });
        if cx.record_attention {
            let all: Vec<usize> = (0..n).collect();
            state.records.push(AttentionRecord {
                layer: l + 1,
                group: None,
                attention: stack_heads(cx.tape, &attn, &all, &all),
                query_roles: state.roles.clone(),
                key_roles: state.roles.clone(),
            });
        }
        if l + 1 == cfg.coarse_layers {
            state.last_attention = Some((attn.clone(), state.roles.clone()));
        }
        if l + 1 == cfg.h2k_layer {
            prune_stage1(cx, &mut state, Some(&attn), pruner)?;
            if hsd {
                h2k(cx, &mut state)?;
            }
        }
        state.check(cx)?;
    }
    Ok(state)
}
