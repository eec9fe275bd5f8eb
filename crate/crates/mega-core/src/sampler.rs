//! Masking schedules and generation.
//!
//! Training-time masking draws the visible count from a cosine schedule.
//! Inference starts from a fully masked sequence and either predicts every
//! token in one forward pass (deterministic mode) or commits tokens over T
//! steps, sampling candidates with the Gumbel-max trick and selecting which
//! candidates to commit with a second, annealed Gumbel round (stochastic and
//! unconditional modes).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::{CanonicalMesh, Observation};
use crate::error::{Error, Result};
use crate::model::{MaskedSequence, MegaModel};
use crate::nn::Tensor;
use crate::tokenizer::{decode_tokens, TokenSequence, TokenizerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationMode {
    Deterministic,
    Stochastic,
    Unconditional,
}

/// Annealing law for the stage-2 selection noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnealMode {
    /// A * (1 - t/T)
    Conditioned,
    /// (A * (1 - t/T))^6
    Unconditional,
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationConfig {
    pub mode: GenerationMode,
    /// Step count T.
    pub steps: usize,
    /// Initial noise temperature A.
    pub temperature: f64,
    /// Samples per input Q (stochastic mode).
    pub samples: usize,
    pub seed: u64,
    /// Test hook: suppress all Gumbel noise (both stages consume no
    /// randomness), making every step greedy.
    pub suppress_noise: bool,
}

impl GenerationConfig {
    pub fn stochastic(steps: usize, temperature: f64, samples: usize, seed: u64) -> Self {
        GenerationConfig {
            mode: GenerationMode::Stochastic,
            steps,
            temperature,
            samples,
            seed,
            suppress_noise: false,
        }
    }

    /// Defaults for unconditional generation: 20 steps, A = 1.2,
    /// sixth-power annealing.
    pub fn unconditional(samples: usize, seed: u64) -> Self {
        GenerationConfig {
            mode: GenerationMode::Unconditional,
            steps: 20,
            temperature: 1.2,
            samples,
            seed,
            suppress_noise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("generation needs T >= 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("generation needs Q >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!(
                "noise temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Training-time visible count: floor(N cos(pi tau / 2)), clamped to N - 1
/// so at least one position stays hidden.
pub fn visible_count(n: usize, tau: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Domain(format!("tau = {tau} outside [0, 1)")));
    }
    let m = (n as f64 * (std::f64::consts::FRAC_PI_2 * tau).cos()).floor() as usize;
    Ok(m.min(n.saturating_sub(1)))
}

/// Ablation: linear masking rate, floor(N tau) with the same clamp.
pub fn linear_visible_count(n: usize, tau: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Domain(format!("tau = {tau} outside [0, 1)")));
    }
    let m = (n as f64 * tau).floor() as usize;
    Ok(m.min(n.saturating_sub(1)))
}

/// Uniformly random M-subset of positions made visible (Fisher-Yates).
pub fn apply_mask(
    tokens: &TokenSequence,
    m: usize,
    rng: &mut impl Rng,
) -> Result<MaskedSequence> {
    let n = tokens.len();
    if m >= n {
        return Err(Error::Domain(format!("M = {m} must be < N = {n}")));
    }
    let mut positions: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        positions.swap(i, j);
    }
    let mut visible = vec![false; n];
    for &p in &positions[..m] {
        visible[p] = true;
    }
    Ok(MaskedSequence::from_tokens(tokens, visible))
}

/// Cumulative committed-token counts n_1..n_T with
/// n_t = floor(N (1 - cos(pi t / 2T))); the final count is forced to N.
pub fn schedule_counts(n: usize, t_steps: usize) -> Vec<usize> {
    assert!(t_steps >= 1, "schedule needs T >= 1");
    let mut counts: Vec<usize> = (1..=t_steps)
        .map(|t| {
            let arg = std::f64::consts::FRAC_PI_2 * t as f64 / t_steps as f64;
            (n as f64 * (1.0 - arg.cos())).floor() as usize
        })
        .collect();
    counts[t_steps - 1] = n;
    counts
}

/// Stage-2 noise scale at step t of T.
pub fn anneal_temperature(a: f64, t: usize, t_steps: usize, mode: AnnealMode) -> f64 {
    debug_assert!((1..=t_steps).contains(&t));
    let base = a * (1.0 - t as f64 / t_steps as f64);
    match mode {
        AnnealMode::Conditioned => base,
        AnnealMode::Unconditional => base.powi(6),
    }
}

fn standard_gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

/// One committed (position, token) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Commitment {
    pub position: usize,
    pub token: u32,
}

/// Two-stage Gumbel-max step.
///
/// Stage 1 samples a candidate token per hidden position exactly from the
/// categorical softmax (unit Gumbel noise on the logits, argmax). Stage 2
/// commits the k candidates with the largest logit plus `noise_scale` times
/// fresh Gumbel noise; ties break toward the lowest position index. With
/// `suppress` both stages are greedy and no randomness is consumed.
pub fn gumbel_step(
    logits: &Tensor,
    hidden: &[usize],
    k: usize,
    noise_scale: f64,
    rng: &mut impl Rng,
    suppress: bool,
) -> Result<Vec<Commitment>> {
    if k > hidden.len() {
        return Err(Error::Schedule(format!(
            "cannot commit {k} tokens with only {} hidden positions",
            hidden.len()
        )));
    }
    let s = logits.cols();
    let mut scored: Vec<(usize, u32, f64)> = Vec::with_capacity(hidden.len());
    for &p in hidden {
        let row = logits.row(p);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (token, &logit) in row.iter().enumerate() {
            let perturbed = if suppress {
                logit
            } else {
                logit + standard_gumbel(rng)
            };
            if perturbed > best.0 {
                best = (perturbed, token);
            }
        }
        debug_assert!(best.1 < s);
        scored.push((p, best.1 as u32, row[best.1]));
    }
    let mut selection: Vec<(usize, u32, f64)> = scored
        .into_iter()
        .map(|(p, token, confidence)| {
            let score = if suppress {
                confidence
            } else {
                confidence + noise_scale * standard_gumbel(rng)
            };
            (p, token, score)
        })
        .collect();
    selection.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    Ok(selection[..k]
        .iter()
        .map(|&(position, token, _)| Commitment { position, token })
        .collect())
}

fn argmax_row(row: &[f64]) -> u32 {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, &v) in row.iter().enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1 as u32
}

/// Single forward pass from a fully masked sequence, argmax per position
/// (ties to the lowest token index). Seed-independent; the encoder is never
/// evaluated.
pub fn generate_deterministic(
    model: &MegaModel,
    tokenizer: &TokenizerModel,
    obs: &Observation,
) -> Result<(TokenSequence, CanonicalMesh)> {
    let masked = MaskedSequence::fully_hidden(model.cfg.n_tokens);
    let logits = model.logits_value(&masked, Some(obs))?;
    let indices: Vec<u32> = (0..model.cfg.n_tokens)
        .map(|p| argmax_row(logits.row(p)))
        .collect();
    let tokens = TokenSequence { indices };
    let mesh = decode_tokens(tokenizer, &tokens)?;
    Ok((tokens, mesh))
}

/// Iterative generation of one chain; records the partial token sequence
/// after every step when `trace` is given (hidden slots as token 0).
fn generate_chain(
    model: &MegaModel,
    obs: Option<&Observation>,
    cfg: &GenerationConfig,
    anneal: AnnealMode,
    rng: &mut ChaCha8Rng,
    mut trace: Option<&mut Vec<TokenSequence>>,
) -> Result<TokenSequence> {
    let n = model.cfg.n_tokens;
    let counts = schedule_counts(n, cfg.steps);
    let mut masked = MaskedSequence::fully_hidden(n);
    let mut committed = 0usize;
    for t in 1..=cfg.steps {
        let k = counts[t - 1] - committed;
        if k > 0 {
            let logits = model.logits_value(&masked, obs)?;
            let hidden: Vec<usize> = (0..n).filter(|&p| !masked.visible[p]).collect();
            let noise = anneal_temperature(cfg.temperature, t, cfg.steps, anneal);
            for c in gumbel_step(&logits, &hidden, k, noise, rng, cfg.suppress_noise)? {
                masked.indices[c.position] = c.token;
                masked.visible[c.position] = true;
            }
            committed = counts[t - 1];
        }
        if let Some(tr) = trace.as_deref_mut() {
            let partial: Vec<u32> = masked
                .indices
                .iter()
                .zip(&masked.visible)
                .map(|(&i, &v)| if v { i } else { 0 })
                .collect();
            tr.push(TokenSequence { indices: partial });
        }
    }
    debug_assert!(masked.visible.iter().all(|&v| v));
    Ok(TokenSequence {
        indices: masked.indices,
    })
}

/// Q independent chains consumed sequentially from one seeded stream.
pub fn generate_stochastic(
    model: &MegaModel,
    tokenizer: &TokenizerModel,
    obs: &Observation,
    cfg: &GenerationConfig,
) -> Result<Vec<(TokenSequence, CanonicalMesh)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let tokens = generate_chain(model, Some(obs), cfg, AnnealMode::Conditioned, &mut rng, None)?;
        let mesh = decode_tokens(tokenizer, &tokens)?;
        out.push((tokens, mesh));
    }
    Ok(out)
}

/// Unconditional generation from a pre-trained (stage-1) model: no
/// conditioning tokens, sixth-power annealing.
pub fn generate_unconditional(
    model: &MegaModel,
    tokenizer: &TokenizerModel,
    cfg: &GenerationConfig,
) -> Result<Vec<(TokenSequence, CanonicalMesh)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let tokens = generate_chain(model, None, cfg, AnnealMode::Unconditional, &mut rng, None)?;
        let mesh = decode_tokens(tokenizer, &tokens)?;
        out.push((tokens, mesh));
    }
    Ok(out)
}

/// One unconditional chain with per-step partial sequences (for inspecting
/// the coarse-to-fine refinement).
pub fn generate_unconditional_traced(
    model: &MegaModel,
    cfg: &GenerationConfig,
    chain_seed: u64,
) -> Result<Vec<TokenSequence>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(chain_seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    generate_chain(
        model,
        None,
        cfg,
        AnnealMode::Unconditional,
        &mut rng,
        Some(&mut trace),
    )?;
    Ok(trace)
}
