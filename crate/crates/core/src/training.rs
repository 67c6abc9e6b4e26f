//! Training procedures for both approaches, checkpointing and audits.
//!
//! A1 alternates a discriminator step (real and fake samples concatenated
//! and shuffled into one batch per head) with a generator step. A2 runs a
//! discriminator step on real data only, followed by a generator step that
//! reuses the same encoder parameters.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{backprop::GradStore, DType, Device, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    sample_content_pairs, sample_style_batch, ImageMatrix, PairBatch, StyleBatch, StyleCorpus,
    TripletSample, TripletSampler,
};
use crate::error::{Error, Result};
use crate::image::{stack_nchw, ImageTensor};
use crate::losses::{
    bce_discriminator_loss, bce_generator_loss, default_gamma, gram_similarity, l1_loss,
    pairwise_marginal_loss, rgan_combine, scalar, style_class_nll, AdversarialWeights, Margins,
    PairLabel,
};
use crate::models::a1::{A1Bundle, A1Config};
use crate::models::a2::{A2Config, GeneratorA2};
use crate::models::{is_pow2, Model, StyleTransfer};
use crate::nn::{Adam, AdamState, Mode, ParamSet};
use crate::util;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approach {
    A1,
    A2,
}

impl std::fmt::Display for Approach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Approach::A1 => "a1",
            Approach::A2 => "a2",
        })
    }
}

impl std::str::FromStr for Approach {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a1" => Ok(Approach::A1),
            "a2" => Ok(Approach::A2),
            other => Err(Error::arg(format!("unknown approach `{other}` (expected a1 or a2)"))),
        }
    }
}

/// Learning rate per parameter group. For A1 the groups are generator,
/// content head and style head; for A2 decoder, content encoder and style
/// encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub generator: f64,
    pub content: f64,
    pub style: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            generator: 2e-4,
            content: 2e-4,
            style: 2e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub approach: Approach,
    pub image_size: (usize, usize),
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    /// A2: style reference images per batch.
    pub styles_per_batch: usize,
    pub checkpoint_every: u64,
    pub weights: AdversarialWeights,
    pub margins: Margins,
    /// Gram temperature; `None` means the square root of the style latent
    /// length.
    pub gamma: Option<f64>,
    pub learning_rates: LearningRates,
    pub betas: (f64, f64),
    pub grad_clip: Option<f64>,
    pub encoder_update_in_gen_step: bool,
    pub history_len: usize,
    pub a1: A1Config,
    pub a2: A2Config,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            approach: Approach::A2,
            image_size: (128, 128),
            seed: 0,
            steps: 1000,
            batch_size: 4,
            styles_per_batch: 8,
            checkpoint_every: 100,
            weights: AdversarialWeights::default(),
            margins: Margins::default(),
            gamma: None,
            learning_rates: LearningRates::default(),
            betas: (0.5, 0.999),
            grad_clip: None,
            encoder_update_in_gen_step: true,
            history_len: 100,
            a1: A1Config::default(),
            a2: A2Config::default(),
        }
    }
}

impl TrainConfig {
    /// Copy with the shared image size pushed into the model configs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.a1.generator.image_size = c.image_size;
        c.a2.image_size = c.image_size;
        c
    }

    pub fn validation_errors(&self) -> Vec<String> {
        let c = self.resolved();
        let mut errs = Vec::new();
        let (h, w) = c.image_size;
        if !is_pow2(h) || !is_pow2(w) {
            errs.push(format!("image_size ({h}, {w}) must be powers of two"));
        }
        if c.steps == 0 {
            errs.push("steps must be >= 1".into());
        }
        if c.batch_size == 0 {
            errs.push("batch_size must be >= 1".into());
        }
        if c.styles_per_batch == 0 {
            errs.push("styles_per_batch must be >= 1".into());
        }
        if c.checkpoint_every == 0 {
            errs.push("checkpoint_every must be >= 1".into());
        }
        if c.history_len == 0 {
            errs.push("history_len must be >= 1".into());
        }
        if let Err(e) = c.weights.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = c.margins.validate() {
            errs.push(e.to_string());
        }
        if let Some(g) = c.gamma {
            if !(g > 0.0 && g.is_finite()) {
                errs.push(format!("gamma must be positive and finite, got {g}"));
            }
        }
        for (name, lr) in [
            ("generator", c.learning_rates.generator),
            ("content", c.learning_rates.content),
            ("style", c.learning_rates.style),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                errs.push(format!("learning_rates.{name} must be positive, got {lr}"));
            }
        }
        let (b1, b2) = c.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            errs.push(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if let Some(clip) = c.grad_clip {
            if !(clip > 0.0) {
                errs.push(format!("grad_clip must be positive, got {clip}"));
            }
        }
        match c.approach {
            Approach::A1 => errs.extend(c.a1.validation_errors()),
            Approach::A2 => errs.extend(c.a2.validation_errors()),
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
            .unwrap_or_else(|| default_gamma(self.a2.style_encoder.latent_dim))
    }

    /// SHA-256 of the canonical (key-sorted) JSON of the resolved config,
    /// leaving out the run length and checkpoint cadence so a run can be
    /// extended on resume.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self.resolved())?;
        if let Some(map) = v.as_object_mut() {
            map.remove("steps");
            map.remove("checkpoint_every");
        }
        Ok(util::sha256_hex(serde_json::to_string(&v)?.as_bytes()))
    }

    /// Reads a TOML or JSON config file (by extension; TOML otherwise).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            Ok(serde_json::from_str(&text)?)
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
        }
    }
}

// ---------------------------------------------------------------------------

/// Named scalar losses of one training iteration plus its wall time.
/// Equality ignores the timing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(flatten)]
    pub losses: BTreeMap<String, f64>,
    pub elapsed_ms: f64,
}

impl PartialEq for StepMetrics {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.losses.len() == other.losses.len()
            && self
                .losses
                .iter()
                .zip(&other.losses)
                .all(|((ka, va), (kb, vb))| ka == kb && va.to_bits() == vb.to_bits())
    }
}

impl StepMetrics {
    fn new(step: u64) -> Self {
        Self {
            step,
            losses: BTreeMap::new(),
            elapsed_ms: 0.0,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.losses.get(name).copied()
    }

    fn merge(&mut self, other: StepMetrics) {
        self.losses.extend(other.losses);
        self.elapsed_ms += other.elapsed_ms;
    }
}

pub const METRIC_NAMES: [&str; 6] = [
    "g_total",
    "g_adv_style",
    "g_adv_content",
    "g_l1",
    "d_content",
    "d_style",
];

/// Counters and identity sets backing the pipeline contracts.
#[derive(Clone, Debug, Default)]
pub struct Audit {
    pub d_steps: u64,
    pub g_steps: u64,
    /// A1: forward calls into each head made by discriminator steps.
    pub d_content_head_calls: u64,
    pub d_style_head_calls: u64,
    /// A2: decoder outputs produced while a discriminator step ran.
    pub generated_in_d_steps: u64,
    /// A2: images the discriminator steps fed to the encoders.
    pub real_images_in_d_steps: u64,
    /// A2: parameters updated by discriminator steps.
    pub d_updated: HashSet<TensorId>,
    /// A2: encoder parameters read by generator steps (received gradient).
    pub g_read: HashSet<TensorId>,
    /// A2: encoder parameters updated by generator steps.
    pub g_updated: HashSet<TensorId>,
}

pub enum Models {
    A1(A1Bundle),
    A2(GeneratorA2),
}

impl Models {
    pub fn approach(&self) -> Approach {
        match self {
            Models::A1(_) => Approach::A1,
            Models::A2(_) => Approach::A2,
        }
    }

    /// Every parameter (trainable or not), prefixed by sub-model.
    pub fn all_params(&self) -> ParamSet {
        match self {
            Models::A1(b) => b.all_params(),
            Models::A2(g) => g.all_params(),
        }
    }

    pub fn breakdown(&self) -> Vec<(String, usize)> {
        match self {
            Models::A1(b) => b.breakdown(),
            Models::A2(g) => g.breakdown(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.breakdown().iter().map(|(_, n)| n).sum()
    }
}

impl StyleTransfer for Models {
    fn transfer_batch(&self, content: &Tensor, style: &Tensor) -> Result<Tensor> {
        match self {
            Models::A1(b) => b.generator.transfer_batch(content, style),
            Models::A2(g) => g.transfer_batch(content, style),
        }
    }
}

pub struct TrainState {
    config: TrainConfig,
    pub models: Models,
    /// `(group name, optimiser)`, three groups per approach.
    optimizers: Vec<(String, Adam)>,
    step: u64,
    rng: ChaCha8Rng,
    history: VecDeque<StepMetrics>,
    pub audit: Audit,
}

const RNG_STREAM: u64 = 99;

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let models = match config.approach {
            Approach::A1 => Models::A1(A1Bundle::new(&config.a1, config.seed)?),
            Approach::A2 => Models::A2(GeneratorA2::new(&config.a2, config.seed)?),
        };
        let lr = config.learning_rates;
        let groups: Vec<(&str, &ParamSet, f64)> = match &models {
            Models::A1(b) => vec![
                ("generator", b.generator.params(), lr.generator),
                ("content_head", b.content_head.params(), lr.content),
                ("style_head", b.style_head.params(), lr.style),
            ],
            Models::A2(g) => vec![
                ("decoder", g.decoder.params(), lr.generator),
                ("content_encoder", g.content_encoder.params(), lr.content),
                ("style_encoder", g.style_encoder.params(), lr.style),
            ],
        };
        let optimizers = groups
            .into_iter()
            .map(|(name, params, lr)| {
                let mut opt = Adam::new(params, lr, config.betas)?;
                opt.clip = config.grad_clip;
                Ok((name.to_string(), opt))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(RNG_STREAM);
        Ok(Self {
            config,
            models,
            optimizers,
            step: 0,
            rng,
            history: VecDeque::new(),
            audit: Audit::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> impl Iterator<Item = &StepMetrics> {
        self.history.iter()
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn optimizer_states(&self) -> Result<Vec<(String, AdamState)>> {
        self.optimizers
            .iter()
            .map(|(n, o)| Ok((n.clone(), o.export()?)))
            .collect()
    }

    pub fn a1(&self) -> Option<&A1Bundle> {
        match &self.models {
            Models::A1(b) => Some(b),
            Models::A2(_) => None,
        }
    }

    pub fn a2(&self) -> Option<&GeneratorA2> {
        match &self.models {
            Models::A2(g) => Some(g),
            Models::A1(_) => None,
        }
    }

    fn a1_or_err(&self) -> Result<&A1Bundle> {
        self.a1()
            .ok_or_else(|| Error::arg("this step requires an A1 training state"))
    }

    fn a2_or_err(&self) -> Result<&GeneratorA2> {
        self.a2()
            .ok_or_else(|| Error::arg("this step requires an A2 training state"))
    }

    fn optimizer(&mut self, group: &str) -> &mut Adam {
        &mut self
            .optimizers
            .iter_mut()
            .find(|(n, _)| n == group)
            .expect("optimiser group exists")
            .1
    }

    fn record(&mut self, m: &StepMetrics) {
        if self.history.len() == self.config.history_len {
            self.history.pop_front();
        }
        self.history.push_back(m.clone());
    }
}

/// Serializable ChaCha position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since the position is 128 bits wide.
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Checkpoint(format!("malformed rng {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

// ---------------------------------------------------------------------------

fn to_tensor(images: &[ImageTensor]) -> Result<Tensor> {
    stack_nchw(images, DType::F32)
}

fn labels_from(values: &[u32]) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), values.len(), &Device::Cpu)?)
}

fn check_finite(step: u64, losses: &BTreeMap<String, f64>) -> Result<()> {
    for (k, &v) in losses {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step,
                metric: k.clone(),
                value: v,
            });
        }
    }
    Ok(())
}

fn trainable_with_grad(params: &ParamSet, grads: &GradStore) -> HashSet<TensorId> {
    params
        .trainable()
        .filter(|p| grads.get(p.var.as_tensor()).is_some())
        .map(|p| p.var.id())
        .collect()
}

/// One A1 iteration: a discriminator step on the concatenated, shuffled
/// real and fake sets, then a generator step. Does not advance the step
/// counter.
pub fn train_step_a1(state: &mut TrainState, batch: &[TripletSample]) -> Result<StepMetrics> {
    let t0 = Instant::now();
    let step = state.step + 1;
    if batch.is_empty() {
        return Err(Error::arg("empty triplet batch"));
    }
    let content: Vec<_> = batch.iter().map(|t| t.content.clone()).collect();
    let style: Vec<_> = batch.iter().map(|t| t.style.clone()).collect();
    let target: Vec<_> = batch.iter().map(|t| t.target.clone()).collect();
    let (c, s, t) = (to_tensor(&content)?, to_tensor(&style)?, to_tensor(&target)?);
    let n = batch.len();
    let weights = state.config.weights;
    let margins = state.config.margins;

    // Draw everything random up front so the step consumes a fixed amount
    // of the stream.
    let mut perm: Vec<u32> = (0..2 * n as u32).collect();
    {
        use rand::seq::SliceRandom;
        perm.shuffle(&mut state.rng);
    }
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(state.rng.random());

    let (d_content, d_style, fake) = {
        let b = state.a1_or_err()?;
        let fake = b
            .generator
            .forward(&c, &s, Mode::Train, Some(&mut dropout_rng))?;
        let fake_d = fake.detach();
        let idx = labels_from(&perm)?;
        let cond = Tensor::cat(&[&c, &c], 0)?.index_select(&idx, 0)?;
        let cand = Tensor::cat(&[&t, &fake_d], 0)?.index_select(&idx, 0)?;
        let refs = Tensor::cat(&[&s, &s], 0)?.index_select(&idx, 0)?;
        let is_real: Vec<bool> = perm.iter().map(|&p| (p as usize) < n).collect();
        let real_pos: Vec<u32> = (0..2 * n as u32).filter(|&k| is_real[k as usize]).collect();
        let fake_pos: Vec<u32> = (0..2 * n as u32).filter(|&k| !is_real[k as usize]).collect();

        let probs = b.content_head.forward(&cond, &cand, Mode::Train)?;
        let d_content = bce_discriminator_loss(
            &probs.index_select(&labels_from(&real_pos)?, 0)?,
            &probs.index_select(&labels_from(&fake_pos)?, 0)?,
        )?;
        let joint = b.style_head.forward(&refs, &cand)?;
        let (e_ref, e_cand) = b.style_head.split(&joint)?;
        let labels: Vec<PairLabel> = is_real.iter().map(|&r| PairLabel::from_bool(r)).collect();
        let d_style = pairwise_marginal_loss(&e_ref, &e_cand, &labels, margins)?;
        (d_content, d_style, fake)
    };
    state.audit.d_content_head_calls += 1;
    state.audit.d_style_head_calls += 1;
    state.audit.d_steps += 1;

    let mut m = StepMetrics::new(step);
    m.losses.insert("d_content".into(), scalar(&d_content)?);
    m.losses.insert("d_style".into(), scalar(&d_style)?);
    check_finite(step, &m.losses)?;
    let grads = (&d_content + &d_style)?.backward()?;
    state.optimizer("content_head").step(&grads)?;
    state.optimizer("style_head").step(&grads)?;

    let (g_total, g_style, g_content, g_l1) = {
        let b = state.a1_or_err()?;
        let probs = b.content_head.forward(&c, &fake, Mode::TrainFrozenStats)?;
        let g_content = bce_generator_loss(&probs)?;
        let joint = b.style_head.forward(&s, &fake)?;
        let (e_s, e_f) = b.style_head.split(&joint)?;
        let g_style = pairwise_marginal_loss(&e_s, &e_f, &vec![PairLabel::Positive; n], margins)?;
        let g_l1 = l1_loss(&fake, &t)?;
        let g_total = (rgan_combine(&weights, &g_style, &g_content)? + (&g_l1 * weights.lambda_l1)?)?;
        (g_total, g_style, g_content, g_l1)
    };
    m.losses.insert("g_total".into(), scalar(&g_total)?);
    m.losses.insert("g_adv_style".into(), scalar(&g_style)?);
    m.losses.insert("g_adv_content".into(), scalar(&g_content)?);
    m.losses.insert("g_l1".into(), scalar(&g_l1)?);
    check_finite(step, &m.losses)?;
    let grads = g_total.backward()?;
    state.optimizer("generator").step(&grads)?;
    state.audit.g_steps += 1;
    m.elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(m)
}

/// A2 discriminator step: the content encoder learns pair verification on
/// real pairs and the style encoder learns class similarity. No generated
/// image is involved.
pub fn train_step_a2_discriminator(
    state: &mut TrainState,
    pairs: &PairBatch,
    styles: &StyleBatch,
) -> Result<StepMetrics> {
    let t0 = Instant::now();
    let step = state.step + 1;
    let margins = state.config.margins;
    let gamma = state.config.gamma();
    let g = state.a2_or_err()?;
    let calls_before = g.decoder.call_count();

    let np = pairs.len();
    let both = to_tensor(&[pairs.anchors.as_slice(), pairs.partners.as_slice()].concat())?;
    let lat = g.content_encoder.forward(&both, Mode::Train)?.latent;
    let d_content = pairwise_marginal_loss(
        &lat.narrow(0, 0, np)?,
        &lat.narrow(0, np, np)?,
        &pairs.labels,
        margins,
    )?;

    let na = styles.anchors.len();
    let ns = styles.styles.len();
    let imgs = to_tensor(&[styles.anchors.as_slice(), styles.styles.as_slice()].concat())?;
    let emb = g.style_encoder.forward(&imgs, Mode::Train)?.latent;
    let h = gram_similarity(&emb.narrow(0, 0, na)?, &emb.narrow(0, na, ns)?, gamma)?;
    let d_style = style_class_nll(&h, &styles.style_labels, &styles.anchor_labels)?;
    let generated = g.decoder.call_count() - calls_before;

    let mut m = StepMetrics::new(step);
    m.losses.insert("d_content".into(), scalar(&d_content)?);
    m.losses.insert("d_style".into(), scalar(&d_style)?);
    check_finite(step, &m.losses)?;
    let grads = (&d_content + &d_style)?.backward()?;
    let mut updated = state.optimizer("content_encoder").step(&grads)?;
    updated.extend(state.optimizer("style_encoder").step(&grads)?);

    let a = &mut state.audit;
    a.d_steps += 1;
    a.generated_in_d_steps += generated;
    a.real_images_in_d_steps += (2 * np + na + ns) as u64;
    a.d_updated.extend(updated);
    m.elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(m)
}

/// A2 generator step on contents `c` and style images `styles.anchors`,
/// classified against `styles.styles`. The decoder is always updated; the
/// encoders too when `encoder_update_in_gen_step` is set.
pub fn train_step_a2_generator(
    state: &mut TrainState,
    contents: &[ImageTensor],
    styles: &StyleBatch,
) -> Result<StepMetrics> {
    let t0 = Instant::now();
    let step = state.step + 1;
    if contents.len() != styles.anchors.len() {
        return Err(Error::shape(format!(
            "{} contents but {} style images",
            contents.len(),
            styles.anchors.len()
        )));
    }
    let weights = state.config.weights;
    let margins = state.config.margins;
    let gamma = state.config.gamma();
    let update_encoders = state.config.encoder_update_in_gen_step;
    let g = state.a2_or_err()?;
    let n = contents.len();
    let c = to_tensor(contents)?;
    let s = to_tensor(&styles.anchors)?;
    let refs = to_tensor(&styles.styles)?;

    let enc = g.content_encoder.forward(&c, Mode::TrainFrozenStats)?;
    let sty = g.style_encoder.forward(&s, Mode::TrainFrozenStats)?;
    let fake = g.decoder.forward(&sty.latent, &enc.skips, Mode::Train)?;

    let ns = refs.dim(0)?;
    let emb = g
        .style_encoder
        .forward(&Tensor::cat(&[&fake, &refs], 0)?, Mode::TrainFrozenStats)?
        .latent;
    let h = gram_similarity(&emb.narrow(0, 0, n)?, &emb.narrow(0, n, ns)?, gamma)?;
    let g_style = style_class_nll(&h, &styles.style_labels, &styles.anchor_labels)?;
    let fake_lat = g.content_encoder.forward(&fake, Mode::TrainFrozenStats)?.latent;
    let g_content =
        pairwise_marginal_loss(&fake_lat, &enc.latent, &vec![PairLabel::Positive; n], margins)?;
    let g_l1 = l1_loss(&fake, &c)?;
    let g_total = (rgan_combine(&weights, &g_style, &g_content)? + (&g_l1 * weights.lambda_l1)?)?;

    let mut m = StepMetrics::new(step);
    m.losses.insert("g_total".into(), scalar(&g_total)?);
    m.losses.insert("g_adv_style".into(), scalar(&g_style)?);
    m.losses.insert("g_adv_content".into(), scalar(&g_content)?);
    m.losses.insert("g_l1".into(), scalar(&g_l1)?);
    check_finite(step, &m.losses)?;
    let grads = g_total.backward()?;
    let mut read = trainable_with_grad(g.content_encoder.params(), &grads);
    read.extend(trainable_with_grad(g.style_encoder.params(), &grads));

    state.optimizer("decoder").step(&grads)?;
    let mut updated = HashSet::new();
    if update_encoders {
        updated.extend(state.optimizer("content_encoder").step(&grads)?);
        updated.extend(state.optimizer("style_encoder").step(&grads)?);
    }
    let a = &mut state.audit;
    a.g_steps += 1;
    a.g_read.extend(read);
    a.g_updated.extend(updated);
    m.elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(m)
}

// ---------------------------------------------------------------------------

/// Corpora for a training run.
pub enum TrainData {
    A1 { matrix: ImageMatrix },
    A2 { contents: Vec<ImageTensor>, styles: StyleCorpus },
}

impl TrainData {
    pub fn approach(&self) -> Approach {
        match self {
            TrainData::A1 { .. } => Approach::A1,
            TrainData::A2 { .. } => Approach::A2,
        }
    }

    fn check(&self, cfg: &TrainConfig) -> Result<()> {
        if self.approach() != cfg.approach {
            return Err(Error::arg(format!(
                "config approach {} but {} data supplied",
                cfg.approach,
                self.approach()
            )));
        }
        let (h, w) = cfg.image_size;
        let shape = match self {
            TrainData::A1 { matrix } => matrix.image_shape(),
            TrainData::A2 { contents, styles } => {
                if contents.len() < 2 {
                    return Err(Error::arg("A2 training needs at least 2 content images"));
                }
                styles.ensure_metric_ready()?;
                if styles.images[0].shape() != (h, w, 3) {
                    return Err(Error::shape(format!(
                        "style corpus images are {:?}, config expects ({h}, {w}, 3)",
                        styles.images[0].shape()
                    )));
                }
                contents[0].shape()
            }
        };
        if shape != (h, w, 3) {
            return Err(Error::shape(format!(
                "training images are {shape:?}, config expects ({h}, {w}, 3)"
            )));
        }
        Ok(())
    }
}

/// Samples the next batch and runs one full iteration of the approach's
/// schedule, advancing the step counter.
pub fn train_iteration(state: &mut TrainState, data: &TrainData) -> Result<StepMetrics> {
    let bs = state.config.batch_size;
    let mut m = match data {
        TrainData::A1 { matrix } => {
            let sampler = TripletSampler::new(matrix, state.config.seed);
            let batch: Vec<_> = sampler
                .batch_indices(state.step, bs)
                .into_iter()
                .map(|(i, j)| matrix.triplet(i, j))
                .collect();
            train_step_a1(state, &batch)?
        }
        TrainData::A2 { contents, styles } => {
            let spb = state.config.styles_per_batch;
            let pairs = sample_content_pairs(contents, bs, &mut state.rng)?;
            let sb = sample_style_batch(styles, bs, spb, &mut state.rng)?;
            let picks: Vec<ImageTensor> = (0..bs)
                .map(|_| contents[state.rng.random_range(0..contents.len())].clone())
                .collect();
            let mut m = train_step_a2_discriminator(state, &pairs, &sb)?;
            m.merge(train_step_a2_generator(state, &picks, &sb)?);
            m
        }
    };
    state.step += 1;
    m.step = state.step;
    state.record(&m);
    Ok(m)
}

#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    /// Receives `metrics.jsonl` and `checkpoints/`.
    pub out_dir: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Metrics of the steps run in this invocation.
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}"))
}

/// Runs `config.steps` iterations (counting those already in a resumed
/// checkpoint), checkpointing every `checkpoint_every` steps and after the
/// final one. On a non-finite loss the run stops with an error and the last
/// written checkpoint is left untouched.
pub fn train_loop(config: &TrainConfig, data: &TrainData, opts: &LoopOptions) -> Result<TrainOutcome> {
    config.validate()?;
    data.check(&config.resolved())?;
    let mut state = match &opts.resume_from {
        Some(dir) => resume_checkpoint(dir, config)?,
        None => TrainState::new(config)?,
    };
    let mut log = match &opts.out_dir {
        Some(dir) => {
            util::create_dir_all(dir)?;
            Some(open_metrics_log(&dir.join("metrics.jsonl"), state.step)?)
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    while state.step < config.steps {
        let m = train_iteration(&mut state, data)?;
        log::debug!("step {} {:?}", m.step, m.losses);
        if let Some((f, path)) = log.as_mut() {
            let mut line = serde_json::to_vec(&m)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(path.as_path(), e))?;
            f.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        metrics.push(m);
        if let Some(dir) = &opts.out_dir {
            if state.step % config.checkpoint_every == 0 || state.step == config.steps {
                let path = checkpoint_dir(dir, state.step);
                save_checkpoint(&state, &path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome {
        state,
        metrics,
        checkpoints,
    })
}

/// Opens the metrics log for appending, dropping lines past `keep_step`.
fn open_metrics_log(path: &Path, keep_step: u64) -> Result<(fs::File, PathBuf)> {
    let mut kept = Vec::new();
    if keep_step > 0 && path.exists() {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let m: StepMetrics = serde_json::from_str(&line)?;
            if m.step <= keep_step {
                kept.push(line);
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok((f, path.to_path_buf()))
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub approach: Approach,
    pub config: TrainConfig,
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    pub rng: RngState,
    /// Step counter of each optimiser group.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub blobs: Vec<BlobEntry>,
}

/// `u32 ndim | u64 dims... | f32 data`, little-endian.
pub fn encode_blob(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * shape.len() + 4 * data.len());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_blob(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let short = || Error::Checkpoint("blob is truncated".into());
    let ndim = u32::from_le_bytes(bytes.get(..4).ok_or_else(short)?.try_into().unwrap()) as usize;
    let mut off = 4;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(bytes.get(off..off + 8).ok_or_else(short)?.try_into().unwrap());
        shape.push(d as usize);
        off += 8;
    }
    let n: usize = shape.iter().product();
    let body = bytes.get(off..).ok_or_else(short)?;
    if body.len() != 4 * n {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes of data, shape {shape:?} needs {}",
            body.len(),
            4 * n
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

/// Writes the state into directory `dir` atomically (built under a
/// temporary sibling, then renamed into place).
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<CheckpointManifest> {
    let tmp = util::tmp_sibling(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let blob_dir = tmp.join("blobs");
    util::create_dir_all(&blob_dir)?;
    let mut blobs = Vec::new();
    let mut put = |name: String, shape: Vec<usize>, data: &[f32]| -> Result<()> {
        let file = format!("blobs/{:05}.bin", blobs.len());
        let bytes = encode_blob(&shape, data);
        fs::write(tmp.join(&file), &bytes).map_err(|e| Error::io(tmp.join(&file), e))?;
        blobs.push(BlobEntry {
            name,
            file,
            shape,
            sha256: util::sha256_hex(&bytes),
        });
        Ok(())
    };
    for p in state.models.all_params().iter() {
        let data: Vec<f32> = p.var.flatten_all()?.to_vec1()?;
        put(format!("param/{}", p.name), p.var.dims().to_vec(), &data)?;
    }
    let mut optimizer_steps = BTreeMap::new();
    for (group, st) in state.optimizer_states()? {
        optimizer_steps.insert(group.clone(), st.step);
        for (name, m, v) in &st.moments {
            put(format!("adam/{group}/{name}/m"), vec![m.len()], m)?;
            put(format!("adam/{group}/{name}/v"), vec![v.len()], v)?;
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        approach: state.config.approach,
        config: state.config.clone(),
        config_hash: state.config.hash()?,
        step: state.step,
        seed: state.config.seed,
        rng: state.rng_state(),
        optimizer_steps,
        blobs,
    };
    fs::write(tmp.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(tmp.join("manifest.json"), e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if let Some(parent) = dir.parent() {
        util::create_dir_all(parent)?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    Ok(manifest)
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let m: CheckpointManifest = serde_json::from_slice(&util::read(&path)?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            m.version
        )));
    }
    Ok(m)
}

/// Rebuilds the training state stored in `dir`. Every blob is read and
/// checksummed before any state is constructed.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let m = read_checkpoint_manifest(dir)?;
    if m.config.hash()? != m.config_hash {
        return Err(Error::Checksum(format!("{} (config hash)", dir.join("manifest.json").display())));
    }
    let mut blobs: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for b in &m.blobs {
        let path = dir.join(&b.file);
        let bytes = util::read(&path)?;
        if util::sha256_hex(&bytes) != b.sha256 {
            return Err(Error::Checksum(path.display().to_string()));
        }
        let (shape, data) = decode_blob(&bytes)?;
        if shape != b.shape {
            return Err(Error::Checkpoint(format!("blob {} has shape {shape:?}, manifest says {:?}", b.name, b.shape)));
        }
        blobs.insert(b.name.clone(), (shape, data));
    }

    let mut state = TrainState::new(&m.config)?;
    if state.config.approach != m.approach {
        return Err(Error::Checkpoint("manifest approach disagrees with its config".into()));
    }
    for p in state.models.all_params().iter() {
        let key = format!("param/{}", p.name);
        let (shape, data) = blobs
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter blob {key}")))?;
        if shape.as_slice() != p.var.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, checkpoint has {shape:?}",
                p.name,
                p.var.dims()
            )));
        }
        p.var.set(&Tensor::from_vec(data.clone(), shape.as_slice(), &Device::Cpu)?)?;
    }
    for (group, opt) in state.optimizers.iter_mut() {
        let current = opt.export()?;
        let moments = current
            .moments
            .iter()
            .map(|(name, _, _)| {
                let get = |k: &str| {
                    blobs
                        .get(&format!("adam/{group}/{name}/{k}"))
                        .map(|b| b.1.clone())
                        .ok_or_else(|| Error::Checkpoint(format!("missing optimiser blob {group}/{name}/{k}")))
                };
                Ok((name.clone(), get("m")?, get("v")?))
            })
            .collect::<Result<Vec<_>>>()?;
        let step = *m
            .optimizer_steps
            .get(group)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimiser step for {group}")))?;
        opt.import(&AdamState { step, moments })?;
    }
    state.step = m.step;
    state.rng = m.rng.restore()?;
    Ok(state)
}

/// Loads a checkpoint for continued training, rejecting a run config whose
/// hash differs from the stored one.
pub fn resume_checkpoint(dir: &Path, config: &TrainConfig) -> Result<TrainState> {
    let m = read_checkpoint_manifest(dir)?;
    let actual = config.hash()?;
    if actual != m.config_hash {
        return Err(Error::ConfigMismatch {
            expected: m.config_hash,
            actual,
        });
    }
    let mut state = load_checkpoint(dir)?;
    state.config.steps = config.steps;
    state.config.checkpoint_every = config.checkpoint_every;
    Ok(state)
}
