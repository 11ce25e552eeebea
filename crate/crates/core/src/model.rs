//! The complete policy: encoders, window assembly, backbone and heads.
//!
//! [`PolicyModel`] holds only parameter handles, so the same model runs
//! against a 32-bit store for training and a 64-bit copy for gradient
//! checks.

use crate::assembler::{assemble_window, AssembledWindow, AssemblerParams, ObservationFrame, SlotLayout};
use crate::autodiff::{Gradients, Graph, ParamStore, Real, Var};
use crate::backbone::{self, BackboneParams};
use crate::config::Config;
use crate::datapipe::TrainingExample;
use crate::encoders::EncoderBank;
use crate::error::{Error, Result};
use crate::heads::{ActionChunk, HeadBank, HeadKind, LossKind};
use crate::rng::{stream, stream_rng};

#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub config: Config,
    pub layout: SlotLayout,
    pub encoders: EncoderBank,
    pub assembler: AssemblerParams,
    pub backbone: BackboneParams,
    pub heads: HeadBank,
}

impl PolicyModel {
    /// Registers every parameter in a fresh store, initialized from `seed`.
    pub fn init<T: Real>(config: &Config, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.backbone.validate()?;
        config.train.validate()?;
        let layout = SlotLayout::build(&config.layout, &config.heads, &config.encoders)?;
        let d = config.backbone.d_model;
        let mut rng = stream_rng(seed, stream::PARAM_INIT, 0);
        let mut store = ParamStore::new();
        let encoders = EncoderBank::init(&mut store, &config.encoders, d, &mut rng)?;
        let assembler = AssemblerParams::init(&mut store, &layout, d, &mut rng);
        let backbone = BackboneParams::init(&mut store, &config.backbone, &mut rng)?;
        let heads = HeadBank::init(&mut store, &config.heads, d)?;
        let model = Self {
            config: config.clone(),
            layout,
            encoders,
            assembler,
            backbone,
            heads,
        };
        Ok((model, store))
    }

    pub fn assemble<T: Real>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        frames: &[ObservationFrame],
    ) -> Result<AssembledWindow> {
        assemble_window(graph, store, &self.encoders, &self.assembler, &self.layout, frames)
    }

    /// Backbone embeddings of a window; only readouts of `heads` are computed.
    pub fn embed<T: Real>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        window: &AssembledWindow,
        heads: Option<&[HeadKind]>,
    ) -> Result<Var> {
        backbone::forward(graph, store, &self.backbone, window, heads)
    }

    /// Masked loss of one example against its own head.
    pub fn example_loss<T: Real>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        example: &TrainingExample,
        kind: LossKind,
    ) -> Result<Var> {
        let head = example
            .head()
            .ok_or_else(|| Error::Contract("batch element owns no action head".into()))?;
        let window = self.assemble(graph, store, &example.frames)?;
        let emb = self.embed(graph, store, &window, Some(&[head]))?;
        self.heads
            .element_loss(graph, store, &self.layout, emb, &example.target, kind)
    }

    /// Batch-mean loss and its gradients. Each element is differentiated on
    /// its own record and the gradients are reduced in batch order.
    pub fn loss_and_grads<T: Real>(
        &self,
        store: &ParamStore<T>,
        examples: &[TrainingExample],
        kind: LossKind,
    ) -> Result<(f64, Gradients<T>)> {
        if examples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut grads = Gradients::zeros(store);
        let mut total = 0.0;
        for ex in examples {
            let mut g = Graph::new();
            let loss = self.example_loss(&mut g, store, ex, kind)?;
            total += g.value(loss).data()[0].as_f64();
            grads.add_assign(&g.backward(loss, store)?);
        }
        let n = examples.len() as f64;
        grads.scale(T::c(1.0 / n));
        Ok((total / n, grads))
    }

    /// Batch-mean loss without gradients.
    pub fn batch_loss<T: Real>(
        &self,
        store: &ParamStore<T>,
        examples: &[TrainingExample],
        kind: LossKind,
    ) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut total = 0.0;
        for ex in examples {
            let mut g = Graph::new();
            let loss = self.example_loss(&mut g, store, ex, kind)?;
            total += g.value(loss).data()[0].as_f64();
        }
        Ok(total / examples.len() as f64)
    }

    /// Action chunk of `head` at the newest valid step of the window.
    pub fn predict<T: Real>(
        &self,
        store: &ParamStore<T>,
        frames: &[ObservationFrame],
        head: HeadKind,
    ) -> Result<ActionChunk> {
        let mut g = Graph::new();
        let window = self.assemble(&mut g, store, frames)?;
        let emb = self.embed(&mut g, store, &window, Some(&[head]))?;
        let step = window
            .newest_valid_step()
            .ok_or_else(|| Error::Contract("window has no valid step".into()))?;
        let rows: Vec<usize> = window.readouts[&head][step].clone().collect();
        let r = g.gather_rows(emb, &rows)?;
        let out = self.heads.decode(&mut g, store, head, r)?;
        ActionChunk::new(head, g.value(out).cast())
    }
}
