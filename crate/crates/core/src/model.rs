//! Parameter layout, initialisation and the full forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coarse_encoder::{run_coarse, AttentionRecord};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fine_encoder::run_fine;
use crate::layers::layer_param_shapes;
use crate::numerics::{Array, ParamStore, Real, Tape, Var};
use crate::pruning::{PruneDecision, Pruner};
use crate::schema::{Group, KeypointSchema, Mode};
use crate::simcc_head::{head_forward, HeatmapPair};
use crate::tokenizer::{patchify_embed, stem};
use crate::transition::assign_groups;

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform with bound `sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Uniform with bound `sqrt(6 / fan_in)`, for GELU conv blocks.
    He,
    Normal(f64),
    /// 2-D sine/cosine table over a `rows × cols` token grid: the first half
    /// of the channels encode the row, the rest the column.
    Sine2d { rows: usize, cols: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape,
        init,
    }
}

fn layer_specs(prefix: &str, d: usize) -> impl Iterator<Item = ParamSpec> {
    layer_param_shapes(prefix, d).into_iter().map(|(name, shape)| {
        let init = if name.ends_with(".gain") {
            Init::Ones
        } else if shape[0] == 1 {
            Init::Zeros
        } else {
            Init::Xavier
        };
        spec(name, shape, init)
    })
}

const EMBED_STD: f64 = 1.0;

/// Every learnable array of a model, in store order.
pub fn param_specs(config: &ModelConfig, schema: &KeypointSchema) -> Vec<ParamSpec> {
    let d = config.embed_dim;
    let mut out = Vec::new();
    let mut cin = config.image_channels;
    for i in 0..config.stem_layers {
        let cout = config.stem_channels;
        out.push(spec(format!("stem.{i}.weight"), vec![9 * cin, cout], Init::He));
        out.push(spec(format!("stem.{i}.bias"), vec![1, cout], Init::Zeros));
        cin = cout;
    }
    out.push(spec("patch_embed.weight", vec![config.patch_dim(), d], Init::Xavier));
    out.push(spec("patch_embed.bias", vec![1, d], Init::Zeros));
    out.push(spec(
        "pos_embed",
        vec![config.n_vis(), d],
        Init::Sine2d {
            rows: config.grid_rows(),
            cols: config.grid_cols(),
        },
    ));
    out.push(spec("human_token", vec![1, d], Init::Normal(EMBED_STD)));
    out.push(spec("sparse_embed", vec![schema.num_sparse(), d], Init::Normal(EMBED_STD)));
    if schema.mode == Mode::Wholebody {
        out.push(spec("part_embed", vec![schema.num_parts(), d], Init::Normal(EMBED_STD)));
        out.push(spec("dense_embed", vec![schema.num_dense(), d], Init::Normal(EMBED_STD)));
    }
    for l in 0..config.coarse_layers {
        out.extend(layer_specs(&format!("coarse.{l}"), d));
    }
    for l in 0..config.fine_layers {
        out.extend(layer_specs(&format!("fine.{l}"), d));
    }
    if config.ablation.masking {
        out.push(spec("mask.w1", vec![d, d], Init::Xavier));
        out.push(spec("mask.b1", vec![1, d], Init::Zeros));
        out.push(spec("mask.w2", vec![d, 3 * d], Init::Xavier));
        out.push(spec("mask.b2", vec![1, 3 * d], Init::Zeros));
    }
    out.push(spec("head.norm.gain", vec![1, d], Init::Ones));
    out.push(spec("head.norm.bias", vec![1, d], Init::Zeros));
    out.push(spec("head.x.weight", vec![d, config.bins_x()], Init::Xavier));
    out.push(spec("head.x.bias", vec![1, config.bins_x()], Init::Zeros));
    out.push(spec("head.y.weight", vec![d, config.bins_y()], Init::Xavier));
    out.push(spec("head.y.bias", vec![1, config.bins_y()], Init::Zeros));
    out
}

/// FNV-1a, so each parameter's draw depends only on its name and the seed.
fn name_seed(name: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn sine_table(rows: usize, cols: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let axis = |pos: usize, len: usize, dims: usize, out: &mut Vec<f64>| {
        let x = (pos as f64 + 0.5) / len as f64 * std::f64::consts::TAU;
        for i in 0..dims {
            let freq = 10000f64.powf((i / 2 * 2) as f64 / dims.max(1) as f64);
            out.push(if i % 2 == 0 { (x / freq).sin() } else { (x / freq).cos() });
        }
    };
    let mut out = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            axis(r, rows, half, &mut out);
            axis(c, cols, d - half, &mut out);
        }
    }
    out
}

pub fn init_param<T: Real>(spec: &ParamSpec, seed: u64) -> Array<T> {
    let n: usize = spec.shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(&spec.name, seed));
    let (fan_in, fan_out) = (spec.shape[0] as f64, spec.shape[spec.shape.len() - 1] as f64);
    let data: Vec<T> = match spec.init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Xavier | Init::He => {
            let bound = if spec.init == Init::Xavier {
                (6.0 / (fan_in + fan_out)).sqrt()
            } else {
                (6.0 / fan_in).sqrt()
            };
            (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect()
        }
        Init::Sine2d { rows, cols } => sine_table(rows, cols, spec.shape[1])
            .into_iter()
            .map(T::lit)
            .collect(),
    };
    Array::new(&spec.shape, data).expect("spec shape")
}

pub fn init_params<T: Real>(config: &ModelConfig, schema: &KeypointSchema) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for s in param_specs(config, schema) {
        let v = init_param(&s, config.seed);
        store.insert(s.name, v).expect("unique names");
    }
    store
}

/// Read-only bundle passed through the forward pass.
pub struct Context<'a, T: Real> {
    pub tape: &'a Tape<T>,
    pub params: &'a ParamStore<T>,
    pub config: &'a ModelConfig,
    pub schema: &'a KeypointSchema,
    pub record_attention: bool,
}

impl<T: Real> Context<'_, T> {
    pub fn param(&self, name: &str) -> Result<Var> {
        self.tape.param(self.params, name)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub prune: bool,
    pub record_attention: bool,
    /// Reuse these decisions instead of scoring, keeping the token path fixed.
    pub replay: Option<Vec<PruneDecision>>,
}

impl ForwardOptions {
    pub fn pruned() -> Self {
        Self {
            prune: true,
            ..Self::default()
        }
    }

    pub fn unpruned() -> Self {
        Self::default()
    }
}

/// Token counts seen by one layer (and group, in the fine encoder).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTokens {
    /// 1-based over coarse then fine layers.
    pub layer: usize,
    pub group: Option<Group>,
    /// Query rows.
    pub queries: usize,
    /// Key rows.
    pub keys: usize,
    pub visual: usize,
}

pub struct ForwardOutput<T> {
    pub heatmaps: HeatmapPair,
    /// Keypoint tokens in canonical schema order, before the head.
    pub keypoints: Var,
    pub decisions: Vec<PruneDecision>,
    pub records: Vec<AttentionRecord<T>>,
    pub trace: Vec<LayerTokens>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub schema: KeypointSchema,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let schema = config.schema();
        let params = init_params(&config, &schema);
        Ok(Self {
            config,
            schema,
            params,
        })
    }

    /// Wraps an existing store, checking it has exactly the expected names
    /// and shapes.
    pub fn with_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let schema = config.schema();
        let specs = param_specs(&config, &schema);
        if specs.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            let v = params
                .get(&s.name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{}`", s.name)))?;
            if v.shape() != s.shape.as_slice() {
                return Err(Error::shape("with_params", &s.shape, v.shape()));
            }
        }
        Ok(Self {
            config,
            schema,
            params,
        })
    }

    pub fn context<'a>(&'a self, tape: &'a Tape<T>, record_attention: bool) -> Context<'a, T> {
        Context {
            tape,
            params: &self.params,
            config: &self.config,
            schema: &self.schema,
            record_attention,
        }
    }

    pub fn forward(
        &self,
        tape: &Tape<T>,
        image: &Array<T>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<T>> {
        forward_with(&self.context(tape, opts.record_attention), image, opts)
    }
}

/// Runs stem, tokenizer, both encoders and the head on one image.
pub fn forward_with<T: Real>(
    cx: &Context<'_, T>,
    image: &Array<T>,
    opts: &ForwardOptions,
) -> Result<ForwardOutput<T>> {
    let cfg = cx.config;
    let mut pruner = match &opts.replay {
        Some(d) => Pruner::replaying(d.clone()),
        None => Pruner::new(
            opts.prune && cfg.ablation.pruning,
            cfg.prune_rates,
            cfg.n_vis(),
        ),
    };
    let image = cx.tape.constant(image.clone());
    let fm = stem(cx, image)?;
    let visual = patchify_embed(cx, &fm)?;
    let coarse = run_coarse(cx, &visual, &mut pruner)?;
    let groups = assign_groups(cx, coarse, &mut pruner)?;
    let fine = run_fine(cx, groups, &mut pruner)?;
    let keypoints = fine.keypoint_tokens(cx)?;
    let heatmaps = head_forward(cx, keypoints)?;
    Ok(ForwardOutput {
        heatmaps,
        keypoints,
        decisions: pruner.into_decisions(),
        records: fine.records,
        trace: fine.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_name_addressed() {
        let cfg = ModelConfig::default();
        let a = init_params::<f32>(&cfg, &cfg.schema());
        let b = init_params::<f32>(&cfg, &cfg.schema());
        for ((na, va), (nb, vb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va.data(), vb.data());
        }
        let wb = cfg.with_mode(Mode::Wholebody);
        let c = init_params::<f32>(&wb, &wb.schema());
        assert_eq!(a.get("coarse.0.attn.wq").unwrap(), c.get("coarse.0.attn.wq").unwrap());
    }

    #[test]
    fn body_mode_has_no_part_or_dense_embeddings() {
        let cfg = ModelConfig::default();
        let names: Vec<_> = param_specs(&cfg, &cfg.schema()).into_iter().map(|s| s.name).collect();
        assert!(!names.iter().any(|n| n == "part_embed" || n == "dense_embed"));
    }

    fn image(cfg: &ModelConfig) -> Array<f32> {
        Array::from_fn(&[cfg.image_height, cfg.image_width, cfg.image_channels], |i| {
            ((i * 7919) % 101) as f32 / 101.0
        })
    }

    #[test]
    fn pruned_forward_follows_the_schedule() {
        let cfg = ModelConfig::default();
        let model = Model::<f32>::new(cfg.clone()).unwrap();
        let tape = Tape::new();
        let out = model.forward(&tape, &image(&cfg), &ForwardOptions::pruned()).unwrap();
        assert_eq!(tape.shape(out.heatmaps.logits_x), vec![17, 96]);
        assert_eq!(tape.shape(out.heatmaps.logits_y), vec![17, 128]);
        // stage 1, three groups at stage 2, three at stage 3
        assert_eq!(out.decisions.len(), 7);
        assert_eq!(out.decisions[0].retained.len(), 134);
        for d in &out.decisions[1..4] {
            assert_eq!(d.retained.len(), 86);
        }
        for d in &out.decisions[4..] {
            assert_eq!(d.retained.len(), 48);
        }
    }

    #[test]
    fn wholebody_forward_runs_in_every_introduction_mode() {
        use crate::config::IntroductionMode::*;
        for mode in [Dense, SparseDense, HumanSparseDense] {
            let mut cfg = ModelConfig::default().with_mode(Mode::Wholebody);
            cfg.ablation.introduction_mode = mode;
            let model = Model::<f32>::new(cfg.clone()).unwrap();
            let tape = Tape::new();
            let out = model.forward(&tape, &image(&cfg), &ForwardOptions::pruned()).unwrap();
            assert_eq!(tape.shape(out.keypoints), vec![59, cfg.embed_dim]);
            let first = &out.trace[0];
            let expected = match mode {
                Dense => 192 + 59,
                SparseDense => 192 + 17 + 5,
                HumanSparseDense => 193,
            };
            assert_eq!(first.queries, expected);
        }
    }
}
