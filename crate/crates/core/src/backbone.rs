//! The shared decoder-only transformer.
//!
//! Pre-norm residual blocks (masked multi-head attention, then a GELU MLP)
//! and a final layer norm. Only the tokens a caller needs are computed:
//! padded slots never influence anything, so they are dropped before the
//! first layer and come back as zero rows.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assembler::AssembledWindow;
use crate::autodiff::{randn, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::heads::HeadKind;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_mlp: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_mlp == 0 {
            return Err(Error::Config("d_mlp must be positive".into()));
        }
        Ok(())
    }

    /// Parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let (d, m) = (self.d_model, self.d_mlp);
        let per_layer = 4 * (d * d + d) + (d * m + m) + (m * d + d) + 4 * d;
        self.layers * per_layer + 2 * d
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.insert(&format!("{name}.w"), randn(&[fan_in, fan_out], std, rng), true),
            b: store.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]), true),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        let b = g.param(store, self.b);
        g.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn init<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.insert(&format!("{name}.gain"), Tensor::full(&[d], T::one()), false),
            bias: store.insert(&format!("{name}.bias"), Tensor::zeros(&[d]), false),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, T::c(LN_EPS))
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm2: Norm,
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    config: BackboneConfig,
    blocks: Vec<Block>,
    final_norm: Norm,
}

impl BackboneParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        config: &BackboneConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (d, m) = (config.d_model, config.d_mlp);
        let std = 0.02;
        // residual projections shrink with depth
        let res_std = std / (2.0 * config.layers.max(1) as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("backbone.layer{l}");
                Block {
                    norm1: Norm::init(store, &format!("{p}.norm1"), d),
                    q: Linear::init(store, &format!("{p}.attn.q"), d, d, std, rng),
                    k: Linear::init(store, &format!("{p}.attn.k"), d, d, std, rng),
                    v: Linear::init(store, &format!("{p}.attn.v"), d, d, std, rng),
                    out: Linear::init(store, &format!("{p}.attn.out"), d, d, res_std, rng),
                    norm2: Norm::init(store, &format!("{p}.norm2"), d),
                    up: Linear::init(store, &format!("{p}.mlp.up"), d, m, std, rng),
                    down: Linear::init(store, &format!("{p}.mlp.down"), m, d, res_std, rng),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            blocks,
            final_norm: Norm::init(store, "backbone.final_norm", d),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }
}

/// Token indices the backbone computes for `window`: every non-padded
/// observation token plus the readouts of `heads` (all heads if `None`).
pub fn active_tokens(window: &AssembledWindow, heads: Option<&[HeadKind]>) -> Vec<usize> {
    let mut wanted = vec![true; window.pad.len()];
    if let Some(keep) = heads {
        for (head, ranges) in &window.readouts {
            if !keep.contains(head) {
                for r in ranges {
                    wanted[r.clone()].iter_mut().for_each(|w| *w = false);
                }
            }
        }
    }
    (0..window.pad.len())
        .filter(|&i| !window.pad[i] && wanted[i])
        .collect()
}

/// Runs the transformer over `window` and returns `[k*S, d_model]`
/// embeddings. Rows outside [`active_tokens`] are zero.
pub fn forward<T: Real>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &BackboneParams,
    window: &AssembledWindow,
    heads: Option<&[HeadKind]>,
) -> Result<Var> {
    let active = active_tokens(window, heads);
    run(graph, store, params, window, &active)
}

/// Runs the transformer over every slot, padded ones included, under the
/// window's full attention mask.
pub fn forward_all<T: Real>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &BackboneParams,
    window: &AssembledWindow,
) -> Result<Var> {
    let all: Vec<usize> = (0..window.pad.len()).collect();
    run(graph, store, params, window, &all)
}

fn run<T: Real>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &BackboneParams,
    window: &AssembledWindow,
    active: &[usize],
) -> Result<Var> {
    let n = window.pad.len();
    let shape = graph.shape(window.tokens).to_vec();
    if shape != [n, params.config.d_model] {
        return Err(Error::dim(format!(
            "window tokens {shape:?} do not match d_model {}",
            params.config.d_model
        )));
    }
    let keys = Arc::new(window.mask.key_lists(active)?);
    let mut x = graph.gather_rows(window.tokens, active)?;
    for block in &params.blocks {
        let h = block.norm1.apply(graph, store, x)?;
        let q = block.q.apply(graph, store, h)?;
        let k = block.k.apply(graph, store, h)?;
        let v = block.v.apply(graph, store, h)?;
        let a = graph.attention(q, k, v, keys.clone(), params.config.heads)?;
        let a = block.out.apply(graph, store, a)?;
        x = graph.add(x, a)?;
        let h = block.norm2.apply(graph, store, x)?;
        let h = block.up.apply(graph, store, h)?;
        let h = graph.gelu(h);
        let h = block.down.apply(graph, store, h)?;
        x = graph.add(x, h)?;
    }
    let x = params.final_norm.apply(graph, store, x)?;
    graph.scatter_rows(x, active, n)
}

/// Readout embeddings of `head` at every valid step, oldest first, each
/// `[chunk, d_model]`. Pairs are `(step, slice)`.
pub fn readout_embeddings<T: Real>(
    graph: &mut Graph<T>,
    embeddings: Var,
    window: &AssembledWindow,
    head: HeadKind,
) -> Result<Vec<(usize, Var)>> {
    let ranges = window.readouts.get(&head).ok_or_else(|| Error::Lookup {
        kind: "head",
        name: head.to_string(),
    })?;
    ranges
        .iter()
        .enumerate()
        .filter(|(s, _)| window.valid_steps[*s])
        .map(|(s, r)| {
            let idx: Vec<usize> = r.clone().collect();
            Ok((s, graph.gather_rows(embeddings, &idx)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembler::ObservationFrame;
    use crate::config::Config;
    use crate::envs::Env;
    use crate::model::PolicyModel;

    fn frames(name: &str, n: usize) -> Vec<ObservationFrame> {
        let (mut env, f, _) = Env::reset(name, 5).unwrap();
        let mut out = vec![f];
        while out.len() < n {
            let a = env.expert_action();
            out.push(env.step(&a).unwrap().0);
        }
        out
    }

    fn model_with(backbone: BackboneConfig) -> (PolicyModel, ParamStore<f64>) {
        let mut c = Config::desk();
        c.backbone = backbone;
        PolicyModel::init::<f64>(&c, 1).unwrap()
    }

    fn layer_norm_oracle(row: &[f64]) -> Vec<f64> {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        row.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()).collect()
    }

    #[test]
    fn zero_layers_is_final_norm() {
        let (m, s) = model_with(BackboneConfig {
            layers: 0,
            ..BackboneConfig::default()
        });
        let mut g = Graph::new();
        let w = m.assemble(&mut g, &s, &frames("nav", 3)).unwrap();
        let out = forward_all(&mut g, &s, &m.backbone, &w).unwrap();
        let (x, y) = (g.value(w.tokens).clone(), g.value(out).clone());
        assert_eq!(y.shape(), x.shape());
        for i in 0..w.pad.len() {
            if w.pad[i] {
                continue;
            }
            let expect = layer_norm_oracle(&x.data()[i * 64..(i + 1) * 64]);
            for (a, b) in y.data()[i * 64..(i + 1) * 64].iter().zip(expect) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn shape_preserved_and_pads_zero() {
        let (m, s) = model_with(BackboneConfig::default());
        let mut g = Graph::new();
        let w = m.assemble(&mut g, &s, &frames("bimanual", 2)).unwrap();
        let out = forward(&mut g, &s, &m.backbone, &w, None).unwrap();
        assert_eq!(g.shape(out), &[335, 64]);
        let y = g.value(out);
        for (i, &p) in w.pad.iter().enumerate() {
            if p {
                assert!(y.data()[i * 64..(i + 1) * 64].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn compacted_matches_full_on_active_rows() {
        let (m, s) = model_with(BackboneConfig::default());
        let mut g = Graph::new();
        let w = m.assemble(&mut g, &s, &frames("arm1", 4)).unwrap();
        let heads = [HeadKind::SingleArm];
        let a = forward(&mut g, &s, &m.backbone, &w, Some(&heads)).unwrap();
        let b = forward_all(&mut g, &s, &m.backbone, &w).unwrap();
        let (a, b) = (g.value(a), g.value(b));
        for i in active_tokens(&w, Some(&heads)) {
            for c in 0..64 {
                let (x, y) = (a.data()[i * 64 + c], b.data()[i * 64 + c]);
                assert!((x - y).abs() < 1e-12, "row {i}");
            }
        }
    }

    #[test]
    fn active_tokens_keep_requested_readouts() {
        let (m, s) = model_with(BackboneConfig::default());
        let mut g = Graph::new();
        let w = m.assemble(&mut g, &s, &frames("quad", 5)).unwrap();
        let all = active_tokens(&w, None);
        let quad = active_tokens(&w, Some(&[HeadKind::Quadruped]));
        // 5 steps x (1 proprio + 29 readouts) vs 5 x (1 + 1)
        assert_eq!(all.len(), 150);
        assert_eq!(quad.len(), 10);
    }

    #[test]
    fn readout_slices() {
        let (m, s) = model_with(BackboneConfig::default());
        let mut g = Graph::new();
        let w = m.assemble(&mut g, &s, &frames("arm1", 5)).unwrap();
        let emb = forward(&mut g, &s, &m.backbone, &w, None).unwrap();
        let arm = readout_embeddings(&mut g, emb, &w, HeadKind::SingleArm).unwrap();
        assert_eq!(arm.len(), 5);
        assert!(arm.iter().all(|(_, v)| g.shape(*v) == [4, 64]));
        let quad = readout_embeddings(&mut g, emb, &w, HeadKind::Quadruped).unwrap();
        assert!(quad.iter().all(|(_, v)| g.shape(*v) == [1, 64]));

        let w2 = m.assemble(&mut g, &s, &frames("arm1", 2)).unwrap();
        let emb2 = forward(&mut g, &s, &m.backbone, &w2, None).unwrap();
        let two = readout_embeddings(&mut g, emb2, &w2, HeadKind::SingleArm).unwrap();
        assert_eq!(two.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![3, 4]);

        let mut missing = w2.clone();
        missing.readouts.remove(&HeadKind::Navigation);
        assert!(matches!(
            readout_embeddings(&mut g, emb2, &missing, HeadKind::Navigation),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let (m, s) = model_with(BackboneConfig::default());
        let (m32, s32) = model_with(BackboneConfig {
            d_model: 32,
            d_mlp: 64,
            ..BackboneConfig::default()
        });
        let mut g = Graph::new();
        let w = m.assemble(&mut g, &s, &frames("nav", 1)).unwrap();
        let _ = s32;
        let err = forward(&mut g, &s, &m32.backbone, &w, None);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn config_validation_and_param_count() {
        assert!(BackboneConfig {
            heads: 3,
            ..BackboneConfig::default()
        }
        .validate()
        .is_err());
        for cfg in [
            BackboneConfig::default(),
            BackboneConfig {
                layers: 3,
                heads: 2,
                d_model: 16,
                d_mlp: 24,
            },
        ] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = crate::rng::stream_rng(0, 0, 0);
            BackboneParams::init(&mut store, &cfg, &mut rng).unwrap();
            assert_eq!(store.numel(), cfg.param_count());
        }
    }

    #[test]
    fn deterministic_and_every_parameter_gets_gradient() {
        let (m, s) = model_with(BackboneConfig::default());
        let run = || {
            let mut g = Graph::new();
            let w = m.assemble(&mut g, &s, &frames("bimanual", 5)).unwrap();
            let out = forward(&mut g, &s, &m.backbone, &w, None).unwrap();
            // a random linear readout of every embedding
            let r = crate::autodiff::randn(&[335, 64], 1.0, &mut crate::rng::stream_rng(0, 0, 1));
            let r = g.constant(r);
            let prod = g.mul(out, r).unwrap();
            let loss = g.sum(prod);
            let grads = g.backward(loss, &s).unwrap();
            (g.value(out).clone(), grads)
        };
        let (a, grads) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        for id in s.ids().filter(|&id| s.name(id).starts_with("backbone.")) {
            let norm: f64 = grads.get(id).data().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "{} has no gradient", s.name(id));
        }
    }
}
