//! Attention-driven visual token pruning.
//!
//! Importance of each visual token is a softmax-weighted pool of its
//! attention weights over all (head, keypoint-query) pairs. The number of
//! tokens kept at a stage is derived from the ORIGINAL visual-token count and
//! the number of dense keypoint tokens that share the group's budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, Real};
use crate::schema::Group;

/// Guards the floor against representation error, e.g. `(1 - 0.55) * 100`.
const FLOOR_SLACK: f64 = 1e-9;

/// Softmax pooling of `h × N_k × N_v` attention slices into `N_v` scores.
///
/// For token `v` the weights are a softmax over every `(head, query)` entry
/// of column `v`, and the score is the weighted sum of those entries.
pub fn softmax_pool<T: Real>(attn: &Array<T>) -> Result<Vec<f64>> {
    let (h, nk, nv) = match attn.shape() {
        &[h, nk, nv] => (h, nk, nv),
        other => {
            return Err(Error::arg(
                "softmax_pool",
                format!("expected heads x queries x tokens, got {other:?}"),
            ))
        }
    };
    if nv == 0 {
        return Err(Error::arg("softmax_pool", "no visual tokens to score"));
    }
    if h * nk == 0 {
        return Err(Error::arg("softmax_pool", "no attention slices"));
    }
    let data = attn.data();
    let mut scores = Vec::with_capacity(nv);
    let mut column = Vec::with_capacity(h * nk);
    for v in 0..nv {
        column.clear();
        column.extend((0..h * nk).map(|s| data[s * nv + v].as_f64()));
        let m = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for &a in &column {
            let w = (a - m).exp();
            num += w * a;
            den += w;
        }
        scores.push(num / den);
    }
    Ok(scores)
}

/// `max(1, ⌊(1 − α)·N_vis⌋ − N_d)`.
pub fn retained_count(alpha: f64, n_vis: usize, n_dense: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::arg(
            "retained_count",
            format!("pruning rate {alpha} outside [0, 1)"),
        ));
    }
    let budget = ((1.0 - alpha) * n_vis as f64 + FLOOR_SLACK).floor() as usize;
    Ok(budget.saturating_sub(n_dense).max(1))
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// ascending index order.
pub fn select(scores: &[f64], k: usize) -> Vec<usize> {
    let k = if k > scores.len() {
        log::warn!("select: asked for {k} of {} tokens, keeping all", scores.len());
        scores.len()
    } else {
        k
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Human-token pruning inside the coarse encoder.
    Coarse = 1,
    /// Per-group pruning at the coarse-to-fine transition.
    Transition = 2,
    /// Per-group pruning inside the fine encoder.
    Fine = 3,
}

impl Stage {
    pub fn index(self) -> usize {
        self as usize - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub stage: Stage,
    pub group: Option<Group>,
    /// Importance score of every visual token alive before this stage.
    pub scores: Vec<f64>,
    /// Positions (into the pre-stage visual list) that survive.
    pub kept: Vec<usize>,
    /// Original patch indices that survive, strictly increasing.
    pub retained: Vec<usize>,
    pub alpha: f64,
    pub n_hat: usize,
    pub n_dense: usize,
}

/// Stage hooks shared by both encoders. Disabled pruners keep every token;
/// a replaying pruner reuses earlier decisions so repeated forwards follow
/// one token path.
#[derive(Clone, Debug, Default)]
pub struct Pruner {
    enabled: bool,
    rates: [f64; 3],
    n_vis: usize,
    replay: Option<Vec<PruneDecision>>,
    cursor: usize,
    decisions: Vec<PruneDecision>,
}

impl Pruner {
    pub fn new(enabled: bool, rates: [f64; 3], n_vis: usize) -> Self {
        Self {
            enabled,
            rates,
            n_vis,
            ..Self::default()
        }
    }

    pub fn replaying(decisions: Vec<PruneDecision>) -> Self {
        Self {
            enabled: true,
            replay: Some(decisions),
            ..Self::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn decisions(&self) -> &[PruneDecision] {
        &self.decisions
    }

    pub fn into_decisions(self) -> Vec<PruneDecision> {
        self.decisions
    }

    /// Decides which of the `current` visual tokens (original patch ids)
    /// survive, given their attention slices `h × N_k × |current|`.
    pub fn decide<T: Real>(
        &mut self,
        stage: Stage,
        group: Option<Group>,
        slices: Option<&Array<T>>,
        current: &[usize],
        n_dense: usize,
    ) -> Result<PruneDecision> {
        let scores = match slices {
            Some(a) if !current.is_empty() => {
                if a.shape()[2] != current.len() {
                    return Err(Error::shape("prune", a.shape(), &[current.len()]));
                }
                softmax_pool(a)?
            }
            _ => Vec::new(),
        };

        let decision = if let Some(replay) = &self.replay {
            let prev = replay.get(self.cursor).ok_or_else(|| {
                Error::State(format!("no recorded decision for stage {stage:?} group {group:?}"))
            })?;
            self.cursor += 1;
            if prev.stage != stage || prev.group != group {
                return Err(Error::State(format!(
                    "replayed decision is for stage {:?} group {:?}, expected {stage:?} group {group:?}",
                    prev.stage, prev.group
                )));
            }
            let kept = positions_of(current, &prev.retained)?;
            PruneDecision {
                scores,
                kept,
                ..prev.clone()
            }
        } else if self.enabled && slices.is_some() {
            let alpha = self.rates[stage.index()];
            let n_hat = retained_count(alpha, self.n_vis, n_dense)?.min(current.len());
            let kept = select(&scores, n_hat);
            let retained = kept.iter().map(|&p| current[p]).collect();
            PruneDecision {
                stage,
                group,
                scores,
                kept,
                retained,
                alpha,
                n_hat,
                n_dense,
            }
        } else {
            PruneDecision {
                stage,
                group,
                scores,
                kept: (0..current.len()).collect(),
                retained: current.to_vec(),
                alpha: 0.0,
                n_hat: current.len(),
                n_dense,
            }
        };
        self.decisions.push(decision.clone());
        Ok(decision)
    }
}

/// Positions of `wanted` inside `current`; both sorted ascending.
fn positions_of(current: &[usize], wanted: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(wanted.len());
    let mut i = 0;
    for &w in wanted {
        while i < current.len() && current[i] < w {
            i += 1;
        }
        if i == current.len() || current[i] != w {
            return Err(Error::State(format!("patch {w} is no longer alive")));
        }
        out.push(i);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(h: usize, k: usize, v: usize, data: Vec<f64>) -> Array<f64> {
        Array::new(&[h, k, v], data).unwrap()
    }

    #[test]
    fn single_slice_scores_equal_attention() {
        let a = arr(1, 1, 4, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(softmax_pool(&a).unwrap(), vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn constant_attention_scores_constant() {
        let a = arr(2, 3, 5, vec![0.25; 30]);
        for s in softmax_pool(&a).unwrap() {
            assert!((s - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_entry_example() {
        let a = arr(2, 1, 1, vec![0.8, 0.2]);
        let s = softmax_pool(&a).unwrap()[0];
        let (e8, e2) = (0.8f64.exp(), 0.2f64.exp());
        let direct = (e8 * 0.8 + e2 * 0.2) / (e8 + e2);
        assert!((s - direct).abs() < 1e-15);
        assert!((s - 0.5874).abs() < 5e-5);
    }

    #[test]
    fn empty_token_set_rejected() {
        assert!(softmax_pool(&Array::<f64>::zeros(&[1, 1, 1]).reshape(&[1, 1, 1]).unwrap()).is_ok());
        let empty = Array::<f64>::new(&[1, 1, 0], vec![]).unwrap();
        assert!(softmax_pool(&empty).is_err());
    }

    #[test]
    fn retained_count_examples() {
        assert_eq!(retained_count(0.0, 48, 0).unwrap(), 48);
        assert_eq!(retained_count(0.5, 100, 10).unwrap(), 40);
        assert_eq!(retained_count(0.75, 192, 68).unwrap(), 1);
        assert_eq!(retained_count(0.75, 192, 6).unwrap(), 42);
        assert_eq!(retained_count(0.25, 192, 0).unwrap(), 144);
        assert_eq!(retained_count(0.55, 100, 0).unwrap(), 45);
        assert!(retained_count(1.0, 10, 0).is_err());
        assert!(retained_count(-0.1, 10, 0).is_err());
    }

    #[test]
    fn select_examples() {
        assert_eq!(select(&[0.1, 0.9, 0.5], 2), vec![1, 2]);
        assert_eq!(select(&[0.3, 0.3, 0.3], 2), vec![0, 1]);
        assert_eq!(select(&[0.3, 0.1], 5), vec![0, 1]);
    }

    #[test]
    fn disabled_pruner_keeps_everything() {
        let mut p = Pruner::new(false, [0.5; 3], 4);
        let a = arr(1, 1, 4, vec![0.4, 0.3, 0.2, 0.1]);
        let d = p.decide(Stage::Coarse, None, Some(&a), &[0, 2, 5, 7], 0).unwrap();
        assert_eq!(d.retained, vec![0, 2, 5, 7]);
    }

    #[test]
    fn replay_reuses_patches() {
        let mut p = Pruner::new(true, [0.5; 3], 4);
        let a = arr(1, 1, 4, vec![0.1, 0.4, 0.3, 0.2]);
        let d = p.decide(Stage::Coarse, None, Some(&a), &[0, 1, 2, 3], 0).unwrap();
        assert_eq!(d.retained, vec![1, 2]);
        let mut r = Pruner::replaying(p.into_decisions());
        let b = arr(1, 1, 4, vec![0.9, 0.0, 0.0, 0.9]);
        let d2 = r.decide(Stage::Coarse, None, Some(&b), &[0, 1, 2, 3], 0).unwrap();
        assert_eq!(d2.retained, vec![1, 2]);
        assert_eq!(d2.kept, vec![1, 2]);
    }
}
