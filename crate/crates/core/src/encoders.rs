//! Observation and task tokenizers.
//!
//! Images go through a small strided convolution stack (one parameter set
//! per camera view, shared by every embodiment with that view), modulated
//! per stage by FiLM from the language embedding. Goal images are stacked on
//! the current image along the channel axis; an absent goal is a zero image.
//! Proprioception is a single affine projection to one token.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{randn, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewKind {
    Workspace,
    Navigation,
    WristLeft,
    WristRight,
}

impl ViewKind {
    pub const ALL: [ViewKind; 4] = [
        ViewKind::Workspace,
        ViewKind::Navigation,
        ViewKind::WristLeft,
        ViewKind::WristRight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::Workspace => "workspace",
            ViewKind::Navigation => "navigation",
            ViewKind::WristLeft => "wrist-left",
            ViewKind::WristRight => "wrist-right",
        }
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProprioKind {
    Quadruped,
    Bimanual,
}

impl ProprioKind {
    pub const ALL: [ProprioKind; 2] = [ProprioKind::Quadruped, ProprioKind::Bimanual];

    pub fn dim(self) -> usize {
        match self {
            ProprioKind::Quadruped => 59,
            ProprioKind::Bimanual => 14,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProprioKind::Quadruped => "quadruped",
            ProprioKind::Bimanual => "bimanual",
        }
    }
}

impl fmt::Display for ProprioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `[3, size, size]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageObservation {
    pub view: ViewKind,
    pub size: usize,
    pub pixels: Vec<f32>,
}

impl ImageObservation {
    pub fn new(view: ViewKind, size: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != IMAGE_CHANNELS * size * size {
            return Err(Error::dim(format!(
                "{view} image of size {size} needs {} values, got {}",
                IMAGE_CHANNELS * size * size,
                pixels.len()
            )));
        }
        Ok(Self { view, size, pixels })
    }

    pub fn blank(view: ViewKind, size: usize) -> Self {
        Self {
            view,
            size,
            pixels: vec![0.0; IMAGE_CHANNELS * size * size],
        }
    }
}

/// A goal shares the layout and view of the image it conditions.
pub type GoalImage = ImageObservation;

#[derive(Clone, Debug, PartialEq)]
pub struct ProprioObservation {
    pub kind: ProprioKind,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    /// Output channels of each strided conv stage.
    pub stage_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub lang_dim: usize,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 24,
            stage_channels: vec![16, 32, 32],
            kernel: 3,
            stride: 2,
            lang_dim: 16,
            vocab_size: 32,
        }
    }
}

impl EncoderConfig {
    /// Spatial side of the final feature map.
    pub fn feature_side(&self) -> usize {
        self.stage_channels
            .iter()
            .fold(self.image_size, |h, _| h.div_ceil(self.stride.max(1)))
    }

    /// Tokens per image: the flattened final feature map.
    pub fn image_tokens(&self) -> usize {
        self.feature_side().pow(2)
    }
}

#[derive(Clone, Debug)]
struct ConvStage {
    kernels: ParamId,
    bias: ParamId,
    film_gamma: ParamId,
    film_beta: ParamId,
}

#[derive(Clone, Debug)]
struct ImageEncoder {
    stages: Vec<ConvStage>,
    proj_w: ParamId,
    proj_b: ParamId,
}

#[derive(Clone, Debug)]
struct ProprioProjector {
    w: ParamId,
    b: ParamId,
}

/// Handles to every encoder parameter inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct EncoderBank {
    config: EncoderConfig,
    d_model: usize,
    images: BTreeMap<ViewKind, ImageEncoder>,
    proprio: BTreeMap<ProprioKind, ProprioProjector>,
    lang_table: ParamId,
}

impl EncoderBank {
    /// Registers one image encoder per view kind, one projector per proprio
    /// kind and the language table. FiLM projections start at zero.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        config: &EncoderConfig,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.stage_channels.is_empty() || config.kernel == 0 || config.stride == 0 {
            return Err(Error::Config(
                "encoder needs at least one stage with positive kernel and stride".into(),
            ));
        }
        if config.vocab_size == 0 || config.lang_dim == 0 {
            return Err(Error::Config("language vocabulary and width must be positive".into()));
        }
        let mut images = BTreeMap::new();
        for view in ViewKind::ALL {
            let mut stages = Vec::new();
            let mut c_in = 2 * IMAGE_CHANNELS;
            for (i, &c_out) in config.stage_channels.iter().enumerate() {
                let fan_in = c_in * config.kernel * config.kernel;
                let p = format!("enc.{view}.stage{i}");
                stages.push(ConvStage {
                    kernels: store.insert(
                        &format!("{p}.kernels"),
                        randn(
                            &[c_out, c_in, config.kernel, config.kernel],
                            (2.0 / fan_in as f64).sqrt(),
                            rng,
                        ),
                        true,
                    ),
                    bias: store.insert(&format!("{p}.bias"), Tensor::zeros(&[c_out]), true),
                    film_gamma: store.insert(
                        &format!("{p}.film_gamma"),
                        Tensor::zeros(&[config.lang_dim, c_out]),
                        true,
                    ),
                    film_beta: store.insert(
                        &format!("{p}.film_beta"),
                        Tensor::zeros(&[config.lang_dim, c_out]),
                        true,
                    ),
                });
                c_in = c_out;
            }
            let proj_w = store.insert(
                &format!("enc.{view}.proj.w"),
                randn(&[c_in, d_model], (1.0 / c_in as f64).sqrt(), rng),
                true,
            );
            let proj_b = store.insert(&format!("enc.{view}.proj.b"), Tensor::zeros(&[d_model]), true);
            images.insert(
                view,
                ImageEncoder {
                    stages,
                    proj_w,
                    proj_b,
                },
            );
        }
        let mut proprio = BTreeMap::new();
        for kind in ProprioKind::ALL {
            let dim = kind.dim();
            proprio.insert(
                kind,
                ProprioProjector {
                    w: store.insert(
                        &format!("enc.proprio.{kind}.w"),
                        randn(&[dim, d_model], (1.0 / dim as f64).sqrt(), rng),
                        true,
                    ),
                    b: store.insert(
                        &format!("enc.proprio.{kind}.b"),
                        Tensor::zeros(&[d_model]),
                        true,
                    ),
                },
            );
        }
        let lang_table = store.insert(
            "enc.lang",
            randn(&[config.vocab_size, config.lang_dim], 1.0, rng),
            false,
        );
        Ok(Self {
            config: config.clone(),
            d_model,
            images,
            proprio,
            lang_table,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Every parameter id read by the encoder of `view`.
    pub fn view_params(&self, view: ViewKind) -> Vec<ParamId> {
        let enc = &self.images[&view];
        enc.stages
            .iter()
            .flat_map(|s| [s.kernels, s.bias, s.film_gamma, s.film_beta])
            .chain([enc.proj_w, enc.proj_b])
            .collect()
    }

    pub fn film_params(&self, view: ViewKind) -> Vec<(ParamId, ParamId)> {
        self.images[&view]
            .stages
            .iter()
            .map(|s| (s.film_gamma, s.film_beta))
            .collect()
    }

    pub fn lang_table(&self) -> ParamId {
        self.lang_table
    }

    /// Language embedding `[1, lang_dim]`; id 0 is the all-zero null token.
    pub fn embed_language<T: Real>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        id: u32,
    ) -> Result<Var> {
        let vocab = self.config.vocab_size;
        if id as usize >= vocab {
            return Err(Error::Range {
                index: id as usize,
                size: vocab,
            });
        }
        if id == 0 {
            return Ok(graph.constant(Tensor::zeros(&[1, self.config.lang_dim])));
        }
        let table = graph.param(store, self.lang_table);
        graph.gather_rows(table, &[id as usize])
    }

    /// Per-channel `(1 + gamma(lang)) * x + beta(lang)` for one conv stage.
    pub fn film<T: Real>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        view: ViewKind,
        stage: usize,
        features: Var,
        lang: Var,
    ) -> Result<Var> {
        let st = self.images[&view].stages.get(stage).ok_or(Error::Range {
            index: stage,
            size: self.config.stage_channels.len(),
        })?;
        let c = self.config.stage_channels[stage];
        if graph.shape(features)[0] != c {
            return Err(Error::dim(format!(
                "FiLM stage {stage} expects {c} channels, features are {:?}",
                graph.shape(features)
            )));
        }
        let wg = graph.param(store, st.film_gamma);
        let wb = graph.param(store, st.film_beta);
        let gamma = graph.matmul(lang, wg)?;
        let beta = graph.matmul(lang, wb)?;
        graph.film(features, gamma, beta)
    }

    /// Encodes one image (plus optional goal) into `[T_img, d_model]` tokens.
    ///
    /// `lang` of `None` skips FiLM, which equals FiLM with the null embedding.
    pub fn encode_image<T: Real>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &ImageObservation,
        goal: Option<&GoalImage>,
        lang: Option<Var>,
    ) -> Result<Var> {
        let size = self.config.image_size;
        if image.size != size || image.pixels.len() != IMAGE_CHANNELS * size * size {
            return Err(Error::dim(format!(
                "{} image is {}x{}, encoder expects {size}x{size}",
                image.view, image.size, image.size
            )));
        }
        let mut input = Vec::with_capacity(2 * IMAGE_CHANNELS * size * size);
        input.extend(image.pixels.iter().map(|&x| T::c(x as f64)));
        match goal {
            Some(g) => {
                if g.view != image.view || g.size != size || g.pixels.len() != image.pixels.len() {
                    return Err(Error::dim(format!(
                        "goal {} {}x{} does not match {} {size}x{size}",
                        g.view, g.size, g.size, image.view
                    )));
                }
                input.extend(g.pixels.iter().map(|&x| T::c(x as f64)));
            }
            None => input.resize(2 * IMAGE_CHANNELS * size * size, T::zero()),
        }
        let enc = &self.images[&image.view];
        let mut x = graph.constant(Tensor::new(&[2 * IMAGE_CHANNELS, size, size], input)?);
        for (i, st) in enc.stages.iter().enumerate() {
            let k = graph.param(store, st.kernels);
            x = graph.conv2d(x, k, self.config.stride)?;
            let b = graph.param(store, st.bias);
            x = graph.add_channel_bias(x, b)?;
            if let Some(l) = lang {
                x = self.film(graph, store, image.view, i, x, l)?;
            }
            x = graph.gelu(x);
        }
        let shape = graph.shape(x).to_vec();
        let x = graph.reshape(x, &[shape[0], shape[1] * shape[2]])?;
        let x = graph.transpose(x)?;
        let w = graph.param(store, enc.proj_w);
        let x = graph.matmul(x, w)?;
        let b = graph.param(store, enc.proj_b);
        graph.add_bias(x, b)
    }

    /// Projects a proprioceptive vector to one `[1, d_model]` token.
    pub fn encode_proprio<T: Real>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        obs: &ProprioObservation,
    ) -> Result<Var> {
        let dim = obs.kind.dim();
        if obs.values.len() != dim {
            return Err(Error::dim(format!(
                "{} proprioception has {dim} dims, got {}",
                obs.kind,
                obs.values.len()
            )));
        }
        let proj = &self.proprio[&obs.kind];
        let x = graph.constant(Tensor::from_f32(&[1, dim], &obs.values)?);
        let w = graph.param(store, proj.w);
        let x = graph.matmul(x, w)?;
        let b = graph.param(store, proj.b);
        graph.add_bias(x, b)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn bank() -> (EncoderBank, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = EncoderBank::init(&mut store, &EncoderConfig::default(), 64, &mut rng).unwrap();
        (b, store)
    }

    fn image(view: ViewKind, seed: u64) -> ImageObservation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..3 * 24 * 24).map(|_| rng.gen::<f32>()).collect();
        ImageObservation::new(view, 24, px).unwrap()
    }

    fn encode(
        b: &EncoderBank,
        s: &ParamStore<f64>,
        img: &ImageObservation,
        goal: Option<&GoalImage>,
        lang: Option<u32>,
    ) -> Tensor<f64> {
        let mut g = Graph::new();
        let l = lang.map(|id| b.embed_language(&mut g, s, id).unwrap());
        let out = b.encode_image(&mut g, s, img, goal, l).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn language_lookup() {
        let (b, s) = bank();
        let mut g = Graph::new();
        let zero = b.embed_language(&mut g, &s, 0).unwrap();
        assert_eq!(g.value(zero).data(), &[0.0; 16]);
        let five = b.embed_language(&mut g, &s, 5).unwrap();
        assert_eq!(g.value(five).data(), &s.get(b.lang_table()).data()[5 * 16..6 * 16]);
        let six = b.embed_language(&mut g, &s, 6).unwrap();
        assert_ne!(g.value(five).data(), g.value(six).data());
        assert!(matches!(
            b.embed_language(&mut g, &s, 32),
            Err(Error::Range { index: 32, size: 32 })
        ));
    }

    #[test]
    fn film_arithmetic() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 1, 1], 2.0));
        let gamma = g.constant(Tensor::full(&[1, 2], 0.5));
        let beta = g.constant(Tensor::full(&[1, 2], 0.25));
        let y = g.film(x, gamma, beta).unwrap();
        assert_eq!(g.value(y).data(), &[3.25, 3.25]);
        let gamma = g.constant(Tensor::full(&[1, 2], -1.0));
        let beta = g.constant(Tensor::zeros(&[1, 2]));
        let y = g.film(x, gamma, beta).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        let short = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.film(x, short, short).is_err());
    }

    #[test]
    fn film_is_identity_at_init() {
        let (b, s) = bank();
        let img = image(ViewKind::Workspace, 1);
        let plain = encode(&b, &s, &img, None, None);
        for id in [0, 3, 17] {
            assert_eq!(encode(&b, &s, &img, None, Some(id)), plain);
        }
    }

    #[test]
    fn film_channel_mismatch_is_dimension_error() {
        let (b, s) = bank();
        let mut g = Graph::new();
        let l = b.embed_language(&mut g, &s, 2).unwrap();
        let x = g.constant(Tensor::zeros(&[5, 2, 2]));
        assert!(matches!(
            b.film(&mut g, &s, ViewKind::Workspace, 0, x, l),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn nine_tokens_and_absent_goal_is_zero_goal() {
        let (b, s) = bank();
        assert_eq!(EncoderConfig::default().image_tokens(), 9);
        let img = image(ViewKind::Navigation, 2);
        let a = encode(&b, &s, &img, None, Some(4));
        assert_eq!(a.shape(), &[9, 64]);
        let zero = ImageObservation::blank(ViewKind::Navigation, 24);
        assert_eq!(encode(&b, &s, &img, Some(&zero), Some(4)), a);
        assert_eq!(encode(&b, &s, &img, None, Some(4)), a);
        let goal = image(ViewKind::Navigation, 3);
        assert_ne!(encode(&b, &s, &img, Some(&goal), Some(4)), a);
    }

    #[test]
    fn views_share_weights_only_within_kind() {
        let (b, mut s) = bank();
        let ws = image(ViewKind::Workspace, 4);
        let nav = image(ViewKind::Navigation, 4);
        let (ws0, nav0) = (encode(&b, &s, &ws, None, None), encode(&b, &s, &nav, None, None));
        let id = b.view_params(ViewKind::Workspace)[0];
        s.get_mut(id).data_mut()[0] += 0.5;
        assert_ne!(encode(&b, &s, &ws, None, None), ws0);
        assert_eq!(encode(&b, &s, &nav, None, None), nav0);
    }

    #[test]
    fn wrong_resolution_or_goal_view_rejected() {
        let (b, s) = bank();
        let mut g = Graph::new();
        let small = ImageObservation::blank(ViewKind::Workspace, 12);
        assert!(b.encode_image(&mut g, &s, &small, None, None).is_err());
        let img = image(ViewKind::Workspace, 5);
        let goal = ImageObservation::blank(ViewKind::WristLeft, 24);
        assert!(b.encode_image(&mut g, &s, &img, Some(&goal), None).is_err());
        assert!(ImageObservation::new(ViewKind::Workspace, 24, vec![0.0; 10]).is_err());
    }

    #[test]
    fn proprio_projection() {
        let (b, s) = bank();
        let mut g = Graph::new();
        let zero = ProprioObservation {
            kind: ProprioKind::Quadruped,
            values: vec![0.0; 59],
        };
        let t = b.encode_proprio(&mut g, &s, &zero).unwrap();
        assert_eq!(g.shape(t), &[1, 64]);
        assert!(g.value(t).data().iter().all(|&v| v == 0.0));
        let short = ProprioObservation {
            kind: ProprioKind::Quadruped,
            values: vec![0.0; 58],
        };
        assert!(matches!(b.encode_proprio(&mut g, &s, &short), Err(Error::Dimension(_))));
        let bi = ProprioObservation {
            kind: ProprioKind::Bimanual,
            values: vec![0.1; 14],
        };
        assert!(b.encode_proprio(&mut g, &s, &bi).is_ok());
    }

    #[test]
    fn token_count_follows_geometry() {
        for (size, stages, tokens) in [(24, 3, 9), (24, 2, 36), (16, 3, 4), (8, 3, 1)] {
            let c = EncoderConfig {
                image_size: size,
                stage_channels: vec![4; stages],
                ..EncoderConfig::default()
            };
            assert_eq!(c.image_tokens(), tokens, "{size} {stages}");
        }
    }
}
