use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::assembler::{build_attention_mask, AssembledWindow, GroupConfig, LayoutConfig, SlotLayout};
use crate::autodiff::{finite_diff_check, randn, sample_probes, FdReport, Graph, ParamStore, Tensor};
use crate::backbone::{self, BackboneConfig, BackboneParams};
use crate::config::{Config, PAPER_MIXTURE_JSON};
use crate::datapipe::{
    build_example, decode_shard, encode_shard, relabel_goal, AugmentConfig, MixtureSampler,
    MixtureSpec, TrainingExample,
};
use crate::encoders::{EncoderConfig, ProprioKind, ViewKind};
use crate::envs::generate_dataset;
use crate::error::{Error, Result};
use crate::heads::{ActionHeadSpec, HeadKind, LossKind};
use crate::model::PolicyModel;
use crate::rng::{derive_seed, stream, stream_rng, StreamRng};
use crate::trainer::{Checkpoint, Metrics, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyKind {
    Masks,
    Grads,
    Mixture,
    Relabel,
    Format,
}

impl VerifyKind {
    pub const ALL: [VerifyKind; 5] = [
        VerifyKind::Masks,
        VerifyKind::Grads,
        VerifyKind::Mixture,
        VerifyKind::Relabel,
        VerifyKind::Format,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VerifyKind::Masks => "masks",
            VerifyKind::Grads => "grads",
            VerifyKind::Mixture => "mixture",
            VerifyKind::Relabel => "relabel",
            VerifyKind::Format => "format",
        }
    }
}

impl fmt::Display for VerifyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerifyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Lookup {
                kind: "verify suite",
                name: s.to_owned(),
            })
    }
}

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub kind: VerifyKind,
    pub passed: bool,
    /// Human-readable diagnostics.
    pub lines: Vec<String>,
    pub counterexample: Option<String>,
}

impl VerifyReport {
    fn new(kind: VerifyKind) -> Self {
        Self {
            kind,
            passed: true,
            lines: Vec::new(),
            counterexample: None,
        }
    }

    fn fail(&mut self, what: String) {
        self.passed = false;
        if self.counterexample.is_none() {
            self.counterexample = Some(what);
        }
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "  {l}")?;
        }
        if let Some(c) = &self.counterexample {
            writeln!(f, "  counterexample: {c}")?;
        }
        write!(
            f,
            "verify {}: {}",
            self.kind,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Runs one suite against `config` (the desk configuration by default).
pub fn verify(kind: VerifyKind, config: &Config, seed: u64) -> Result<VerifyReport> {
    match kind {
        VerifyKind::Masks => verify_masks(50, seed),
        VerifyKind::Grads => verify_grads(config, seed, &GradCheckOptions::default()),
        VerifyKind::Mixture => verify_mixture(config, 100_000, seed),
        VerifyKind::Relabel => verify_relabel(40_000, seed),
        VerifyKind::Format => verify_format(config, seed),
    }
}

// ---------------------------------------------------------------- masks

/// A random layout, a random presence pattern and random input tokens.
#[derive(Clone, Debug)]
pub struct MaskCase {
    pub layout: SlotLayout,
    pub pad: Vec<bool>,
    pub tokens: Tensor<f64>,
    pub backbone: BackboneConfig,
}

/// Draws a layout with a random subset and order of groups, random readout
/// sizes, history 1..=5, leading padded steps and absent groups.
pub fn random_mask_case(rng: &mut impl Rng) -> Result<MaskCase> {
    let image_size = *[8usize, 12, 16].choose(rng).expect("non-empty");
    let encoders = EncoderConfig {
        image_size,
        ..EncoderConfig::default()
    };
    let tokens = encoders.image_tokens();
    let mut groups: Vec<GroupConfig> = Vec::new();
    for view in ViewKind::ALL {
        if rng.gen_bool(0.5) {
            groups.push(GroupConfig::ObsImage {
                name: format!("img-{view}"),
                view,
                tokens,
            });
        }
    }
    for proprio in ProprioKind::ALL {
        if rng.gen_bool(0.5) || groups.is_empty() {
            groups.push(GroupConfig::ObsProprio {
                name: format!("proprio-{proprio}"),
                proprio,
                tokens: 1,
            });
        }
    }
    let mut heads = Vec::new();
    for head in HeadKind::ALL {
        if rng.gen_bool(0.5) || heads.is_empty() && head == HeadKind::Quadruped {
            let chunk = rng.gen_range(1..=4);
            heads.push(ActionHeadSpec {
                name: head,
                action_dim: head.action_dim(),
                chunk_size: chunk,
                control_hz: 0.0,
            });
            groups.push(GroupConfig::Readout {
                name: format!("readout-{head}"),
                head,
                tokens: chunk,
            });
        }
    }
    groups.shuffle(rng);
    let history = rng.gen_range(1..=5);
    let layout = SlotLayout::build(&LayoutConfig { history, groups }, &heads, &encoders)?;

    // present observation groups are fixed per window, like an embodiment
    let obs: Vec<usize> = (0..layout.groups().len())
        .filter(|&g| !layout.groups()[g].kind.is_readout())
        .collect();
    let mut present: Vec<usize> = obs.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
    if present.is_empty() {
        present.push(*obs.choose(rng).expect("at least one observation group"));
    }
    let lead = rng.gen_range(0..history);
    let mut pad = vec![true; layout.context_len()];
    for step in lead..history {
        for (g, slot) in layout.groups().iter().enumerate() {
            if slot.kind.is_readout() || present.contains(&g) {
                pad[layout.range(step, g)].iter_mut().for_each(|p| *p = false);
            }
        }
    }
    let d_model = 8 * rng.gen_range(1..=2);
    let backbone = BackboneConfig {
        layers: rng.gen_range(1..=2),
        heads: *[1usize, 2, 4].choose(rng).expect("non-empty"),
        d_model,
        d_mlp: 2 * d_model,
    };
    let tokens = randn(&[layout.context_len(), d_model], 1.0, rng);
    Ok(MaskCase {
        layout,
        pad,
        tokens,
        backbone,
    })
}

impl MaskCase {
    fn window(&self, graph: &mut Graph<f64>, tokens: &Tensor<f64>) -> Result<AssembledWindow> {
        let k = self.layout.history();
        let valid_steps = (0..k)
            .map(|s| {
                let r = s * self.layout.step_tokens()..(s + 1) * self.layout.step_tokens();
                self.pad[r].iter().any(|p| !p)
            })
            .collect();
        let readouts = self
            .layout
            .groups()
            .iter()
            .filter_map(|g| match g.kind {
                crate::assembler::GroupKind::Readout(h) => Some(h),
                _ => None,
            })
            .map(|h| Ok((h, self.layout.readout_ranges(h)?)))
            .collect::<Result<_>>()?;
        Ok(AssembledWindow {
            embodiment: "random".into(),
            tokens: graph.constant(tokens.clone()),
            pad: self.pad.clone(),
            mask: build_attention_mask(&self.layout, &self.pad)?,
            readouts,
            valid_steps,
        })
    }

    /// Backbone output over every slot for the given input tokens.
    pub fn run(&self, store: &ParamStore<f64>, params: &BackboneParams, tokens: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let w = self.window(&mut g, tokens)?;
        let out = backbone::forward_all(&mut g, store, params, &w)?;
        Ok(g.value(out).clone())
    }
}

/// Rows that differ (bitwise) between two outputs, restricted to `rows`.
fn changed_rows(a: &Tensor<f64>, b: &Tensor<f64>, rows: impl Iterator<Item = usize>) -> Vec<usize> {
    let d = a.shape()[1];
    rows.filter(|&r| {
        a.data()[r * d..(r + 1) * d]
            .iter()
            .zip(&b.data()[r * d..(r + 1) * d])
            .any(|(x, y)| x.to_bits() != y.to_bits())
    })
    .collect()
}

fn perturb(tokens: &Tensor<f64>, rows: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let d = tokens.shape()[1];
    let mut t = tokens.clone();
    for &r in rows {
        for v in &mut t.data_mut()[r * d..(r + 1) * d] {
            *v += rng.gen_range(-2.0..2.0);
        }
    }
    t
}

/// Property results of one case: `Err(description)` on the first violation.
pub fn check_mask_case(case: &MaskCase, rng: &mut impl Rng) -> Result<std::result::Result<(), String>> {
    let mut store = ParamStore::new();
    let params = BackboneParams::init(&mut store, &case.backbone, rng)?;
    let layout = &case.layout;
    let n = layout.context_len();
    let base = case.run(&store, &params, &case.tokens)?;
    let step_of = |i: usize| layout.slot(i).step;

    // causality: later steps cannot reach earlier ones
    if layout.history() > 1 {
        let t = rng.gen_range(0..layout.history() - 1);
        let later: Vec<usize> = (0..n).filter(|&i| step_of(i) > t).collect();
        let out = case.run(&store, &params, &perturb(&case.tokens, &later, rng))?;
        let bad = changed_rows(&base, &out, (0..n).filter(|&i| step_of(i) <= t));
        if let Some(&r) = bad.first() {
            return Ok(Err(format!(
                "causality: perturbing steps > {t} changed token {r} ({:?}) of layout {}",
                layout.slot(r),
                layout.canonical()
            )));
        }
    }

    // readout passivity: a readout input only reaches its own output
    let readouts: Vec<usize> = (0..n).filter(|&i| layout.is_readout(i)).collect();
    if let Some(&r) = readouts.choose(rng) {
        let out = case.run(&store, &params, &perturb(&case.tokens, &[r], rng))?;
        let bad = changed_rows(&base, &out, (0..n).filter(|&i| i != r));
        if let Some(&b) = bad.first() {
            return Ok(Err(format!(
                "readout passivity: perturbing readout token {r} changed token {b} of layout {}",
                layout.canonical()
            )));
        }
    }

    // pad invariance: padded inputs never reach real tokens
    let pads: Vec<usize> = (0..n).filter(|&i| case.pad[i]).collect();
    if !pads.is_empty() {
        let out = case.run(&store, &params, &perturb(&case.tokens, &pads, rng))?;
        let bad = changed_rows(&base, &out, (0..n).filter(|&i| !case.pad[i]));
        if let Some(&b) = bad.first() {
            return Ok(Err(format!(
                "pad invariance: perturbing padded tokens changed token {b} of layout {}",
                layout.canonical()
            )));
        }
    }
    Ok(Ok(()))
}

pub fn verify_masks(cases: usize, seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::new(VerifyKind::Masks);
    let mut rng = stream_rng(seed, stream::VERIFY, 1);
    let mut tokens = 0;
    for i in 0..cases {
        let case = random_mask_case(&mut rng)?;
        tokens += case.layout.context_len();
        if let Err(what) = check_mask_case(&case, &mut rng)? {
            report.fail(format!("case {i}: {what}"));
            break;
        }
    }
    report.lines.push(format!(
        "{cases} random layouts ({tokens} tokens): causality, readout passivity, pad invariance"
    ));
    Ok(report)
}

// ---------------------------------------------------------------- grads

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Uniformly drawn probes on top of one probe per parameter tensor.
    pub uniform_probes: usize,
    pub eps: f64,
    pub threshold: f64,
    pub loss: LossKind,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            uniform_probes: 128,
            eps: 1e-4,
            threshold: 1e-5,
            // the L1 kink makes central differences meaningless for residuals
            // within eps of zero; MSE exercises the same graph smoothly
            loss: LossKind::Mse,
        }
    }
}

/// One expert window per embodiment, as a training batch.
pub fn mixed_batch(config: &Config, layout: &SlotLayout, seed: u64) -> Result<Vec<TrainingExample>> {
    let mut rng = stream_rng(seed, stream::VERIFY, 2);
    let mut out = Vec::new();
    for name in ["arm1", "nav", "bimanual", "quad"] {
        let shard = generate_dataset(name, 1, derive_seed(seed, stream::VERIFY, 3))?;
        let traj = &shard.trajectories[0];
        let spec = config
            .heads
            .iter()
            .find(|h| h.name == shard.header.head)
            .ok_or_else(|| Error::Config(format!("no head {}", shard.header.head)))?;
        let t = rng.gen_range(0..traj.steps);
        out.push(build_example(
            &shard,
            traj,
            layout,
            spec,
            t,
            &AugmentConfig::default(),
            &mut rng,
        )?);
    }
    Ok(out)
}

/// Standard deviation of the noise added to every parameter before a
/// gradient check.
pub const PERTURBATION: f64 = 0.05;

/// Analytic gradients of the full policy loss against central
/// differences at 64-bit.
pub fn grad_check(config: &Config, seed: u64, opts: &GradCheckOptions) -> Result<FdReport> {
    let (model, mut store) = PolicyModel::init::<f64>(config, seed)?;
    // move off the zero-initialized heads and FiLM projections, where most
    // upstream gradients vanish
    let mut jitter = stream_rng(seed, stream::VERIFY, 5);
    for id in store.ids().collect::<Vec<_>>() {
        let noise: Tensor<f64> = randn(store.get(id).shape(), PERTURBATION, &mut jitter);
        for (p, n) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *p += n;
        }
    }
    let batch = mixed_batch(config, &model.layout, seed)?;
    let (_, grads) = model.loss_and_grads(&store, &batch, opts.loss)?;
    let mut rng = stream_rng(seed, stream::VERIFY, 4);
    let mut probes: Vec<_> = store
        .ids()
        .map(|id| (id, rng.gen_range(0..store.get(id).numel())))
        .collect();
    probes.extend(sample_probes(&store, opts.uniform_probes, &mut rng));
    finite_diff_check(
        |s| model.batch_loss(s, &batch, opts.loss),
        &store,
        &grads,
        &probes,
        opts.eps,
    )
}

pub fn verify_grads(config: &Config, seed: u64, opts: &GradCheckOptions) -> Result<VerifyReport> {
    let mut report = VerifyReport::new(VerifyKind::Grads);
    let fd = grad_check(config, seed, opts)?;
    report.lines.push(format!(
        "{:?} loss, eps {:.0e}: {} probes checked, {} kinks skipped, max relative error {:.3e} (threshold {:.0e})",
        opts.loss,
        opts.eps,
        fd.checked.len(),
        fd.kinks.len(),
        fd.max_rel_err,
        opts.threshold
    ));
    if fd.max_rel_err >= opts.threshold {
        let w = fd.worst().expect("a probe exceeded the threshold");
        report.fail(format!(
            "{}[{}]: analytic {:.9e}, numeric {:.9e}",
            w.param, w.index, w.analytic, w.numeric
        ));
    }
    Ok(report)
}

// ---------------------------------------------------------------- mixture

/// `(dataset, weight, observed frequency)` over `draws` samples.
pub fn mixture_audit(spec: &MixtureSpec, draws: usize, seed: u64) -> Result<Vec<(String, f64, f64)>> {
    let sampler = MixtureSampler::new(spec)?;
    let mut rng = stream_rng(seed, stream::VERIFY, 5);
    let mut counts = vec![0usize; sampler.names().len()];
    for _ in 0..draws {
        counts[sampler.sample_index(&mut rng)] += 1;
    }
    Ok(spec
        .normalized()?
        .into_iter()
        .zip(counts)
        .map(|((name, w), c)| (name, w, c as f64 / draws as f64))
        .collect())
}

pub const MIXTURE_TOLERANCE: f64 = 0.005;

pub fn verify_mixture(config: &Config, draws: usize, seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::new(VerifyKind::Mixture);
    let paper: MixtureSpec = serde_json::from_str(PAPER_MIXTURE_JSON)?;
    for (label, spec) in [("config", &config.mixture), ("paper", &paper)] {
        let audit = mixture_audit(spec, draws, seed)?;
        let worst = audit
            .iter()
            .max_by(|a, b| (a.1 - a.2).abs().total_cmp(&(b.1 - b.2).abs()))
            .cloned()
            .unwrap_or_default();
        let err = (worst.1 - worst.2).abs();
        report.lines.push(format!(
            "{label} mixture: {} datasets, {draws} draws, max |freq - weight| = {err:.4} ({})",
            audit.len(),
            worst.0
        ));
        if err > MIXTURE_TOLERANCE {
            report.fail(format!(
                "{label} mixture dataset `{}`: weight {:.4}, observed {:.4}",
                worst.0, worst.1, worst.2
            ));
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------- relabel

/// Chi-square statistic of `n` hindsight goal draws for step `t` of a
/// `steps`-long trajectory, with its degrees of freedom.
pub fn relabel_chi_square(n: usize, t: usize, steps: usize, rng: &mut StreamRng) -> Result<(f64, f64)> {
    let bins = steps - t;
    let mut counts = vec![0usize; bins];
    for _ in 0..n {
        counts[relabel_goal(t, steps, rng)? - t] += 1;
    }
    let expected = n as f64 / bins as f64;
    let stat = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    Ok((stat, (bins - 1) as f64))
}

pub fn verify_relabel(n: usize, seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::new(VerifyKind::Relabel);
    let mut rng = stream_rng(seed, stream::VERIFY, 6);
    let (t, steps) = (10, 60);
    let (stat, df) = relabel_chi_square(n, t, steps, &mut rng)?;
    let critical = ChiSquared::new(df)
        .map_err(|e| Error::Evaluation(e.to_string()))?
        .inverse_cdf(0.99);
    report.lines.push(format!(
        "t={t}, trajectory length {steps}: chi2 = {stat:.2} over {df} dof, critical value at 0.01 = {critical:.2}"
    ));
    if stat > critical {
        report.fail(format!("chi2 {stat:.2} > {critical:.2}"));
    }
    Ok(report)
}

// ---------------------------------------------------------------- format

pub fn verify_format(config: &Config, seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::new(VerifyKind::Format);
    for name in ["arm1", "nav", "bimanual", "quad"] {
        let shard = generate_dataset(name, 2, seed)?;
        let bytes = encode_shard(&shard.header, &shard.trajectories)?;
        let back = decode_shard(&bytes)?;
        let again = encode_shard(&back.header, &back.trajectories)?;
        if back != shard || again != bytes {
            report.fail(format!("{name} shard does not round-trip"));
        }
    }
    report.lines.push("XEDS1 shards round-trip for every embodiment".into());

    let (model, store) = PolicyModel::init::<f32>(config, seed)?;
    let batch = mixed_batch(config, &model.layout, seed)?;
    let (_, grads) = model.loss_and_grads(&store, &batch, LossKind::L1)?;
    let mut opt = OptimizerState::new(&store);
    let mut params = store.clone();
    crate::trainer::adamw_step(&mut params, &grads, &mut opt, 1e-3, &crate::trainer::AdamW::new(0.1))?;
    let ckpt = Checkpoint {
        config: config.clone(),
        layout: model.layout.canonical(),
        step: 1,
        metrics: Metrics::default(),
        params: params.clone(),
        optimizer: Some(opt),
    };
    let bytes = ckpt.encode()?;
    let back = Checkpoint::decode(&bytes)?;
    if back.encode()? != bytes {
        report.fail("checkpoint bytes differ after decode and re-encode".into());
    }
    let (m2, s2) = back.policy()?;
    for ex in &batch {
        let head = ex.head().expect("examples own a head");
        let a = model.predict(&params, &ex.frames, head)?;
        let b = m2.predict(&s2, &ex.frames, head)?;
        let same = a
            .values
            .data()
            .iter()
            .zip(b.values.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            report.fail(format!("{head} prediction changed after checkpoint reload"));
        }
    }
    report.lines.push(format!(
        "XCKPT1 checkpoint of {} bytes round-trips; reloaded predictions are bit-identical",
        bytes.len()
    ));
    Ok(report)
}
