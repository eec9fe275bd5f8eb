//! Training loops, the evaluation protocol and the command-level pipeline:
//! synth -> fit-tokenizer -> pretrain -> train -> infer/generate -> eval.
//!
//! Reproducibility: every stage derives its randomness from the run seed
//! alone. Batch items run in parallel over a fixed number of chunks with
//! per-item masking drawn up front, so gradient summation order (and thus
//! every checkpoint bit) is independent of thread scheduling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::body::dataset::{make_dataset, read_dataset, write_dataset, DatasetRecord};
use crate::body::skeleton::Skeleton;
use crate::body::{CanonicalMesh, Observation};
use crate::config::{MaskingMode, RunConfig};
use crate::error::{Error, Result};
use crate::geom::{geodesic_angle, joints_from_mesh, rot6d_to_matrix};
use crate::metrics::{
    best_of_q, mean_mesh, mesh_distance, mesh_errors, vertex_sd, ItemMetrics, MetricsReport,
};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, validate_config};
use crate::model::{loss_rot_cam, MaskedSequence, MegaModel};
use crate::nn::{cosine_lr, AdamW, Gradients, Graph};
use crate::sampler::{
    apply_mask, generate_deterministic, generate_stochastic, generate_unconditional,
    linear_visible_count, visible_count, GenerationConfig,
};
use crate::tokenizer::{
    encode_mesh, fit_tokenizer, load_tokenizer, save_tokenizer, TokenSequence, TokenizerModel,
};

/// Fixed parallel-reduction width; keeps float summation order identical
/// across machines regardless of thread count.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub masking: MaskingMode,
    pub seed: u64,
}

impl TrainOpts {
    pub fn pretrain_from(cfg: &RunConfig) -> Self {
        TrainOpts {
            epochs: cfg.pretrain_epochs,
            batch_size: cfg.batch_size,
            base_lr: cfg.base_lr,
            warmup_epochs: cfg.warmup_epochs,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            masking: cfg.masking,
            seed: cfg.seed,
        }
    }

    pub fn train_from(cfg: &RunConfig) -> Self {
        TrainOpts {
            epochs: cfg.train_epochs,
            ..Self::pretrain_from(cfg)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStats {
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
    pub steps: usize,
}

/// Conditioned training set with everything the loss needs precomputed.
pub struct ConditionedData {
    pub tokens: Vec<TokenSequence>,
    pub observations: Vec<Observation>,
    pub rotations: Vec<Matrix3<f64>>,
    pub joints: Vec<Vec<[f64; 3]>>,
}

impl ConditionedData {
    pub fn from_records(
        records: &[DatasetRecord],
        tokenizer: &TokenizerModel,
        skeleton: &Skeleton,
    ) -> Result<Self> {
        let tokens = records
            .iter()
            .map(|r| encode_mesh(tokenizer, &r.canonical))
            .collect::<Result<Vec<_>>>()?;
        Ok(ConditionedData {
            tokens,
            observations: records.iter().map(|r| r.observation.clone()).collect(),
            rotations: records.iter().map(|r| r.params.root_rotation).collect(),
            joints: records
                .iter()
                .map(|r| joints_from_mesh(&r.canonical.vertices, skeleton.keypoint_rings()))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn draw_mask(
    tokens: &TokenSequence,
    masking: MaskingMode,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedSequence> {
    let n = tokens.len();
    match masking {
        MaskingMode::Full => Ok(MaskedSequence::from_tokens(tokens, vec![false; n])),
        MaskingMode::Cosine => {
            let m = visible_count(n, rng.random::<f64>())?;
            apply_mask(tokens, m, rng)
        }
        MaskingMode::Linear => {
            let m = linear_visible_count(n, rng.random::<f64>())?;
            apply_mask(tokens, m, rng)
        }
    }
}

/// Self-supervised stage: cross-entropy on hidden tokens, no conditioning.
pub fn pretrain(
    model: &mut MegaModel,
    tokens: &[TokenSequence],
    opts: &TrainOpts,
    log: &mut dyn Write,
) -> Result<TrainStats> {
    run_stage(model, tokens.len(), opts, log, "pretrain", |item| &tokens[item], |model, g, item, masked| {
        let logits = model.forward_logits(g, masked, None)?;
        model.loss_tokens(g, logits, &tokens[item], &masked.visible)
    })
}

/// Conditioned stage: token cross-entropy plus the rotation/camera loss.
pub fn train_conditioned(
    model: &mut MegaModel,
    data: &ConditionedData,
    opts: &TrainOpts,
    log: &mut dyn Write,
) -> Result<TrainStats> {
    run_stage(
        model,
        data.len(),
        opts,
        log,
        "train",
        |item| &data.tokens[item],
        |model, g, item, masked| {
            let obs = &data.observations[item];
            let logits = model.forward_logits(g, masked, Some(obs))?;
            let ce = model.loss_tokens(g, logits, &data.tokens[item], &masked.visible)?;
            let (r6, pi) = model.rot_cam_nodes(g, obs)?;
            let rc = loss_rot_cam(g, r6, pi, &data.rotations[item], &data.joints[item], obs)?;
            g.add(ce, rc)
        },
    )
}

fn run_stage<'a, T, F>(
    model: &mut MegaModel,
    n_items: usize,
    opts: &TrainOpts,
    log: &mut dyn Write,
    stage: &str,
    tokens_of: T,
    item_loss: F,
) -> Result<TrainStats>
where
    T: Fn(usize) -> &'a TokenSequence + Sync,
    F: Fn(&MegaModel, &mut Graph, usize, &MaskedSequence) -> Result<crate::nn::NodeId> + Sync,
{
    if n_items == 0 {
        return Err(Error::Config("empty training set".into()));
    }
    let steps_per_epoch = n_items.div_ceil(opts.batch_size);
    let total_steps = opts.epochs * steps_per_epoch;
    let warmup_steps = (opts.warmup_epochs * steps_per_epoch).min(total_steps.saturating_sub(1));
    let mut opt = AdamW::new(&model.params, opts.beta1, opts.beta2, opts.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut indices: Vec<usize> = (0..n_items).collect();
    let mut global_step = 0usize;
    let mut first_epoch_loss = f64::NAN;
    let mut final_epoch_loss = f64::NAN;

    for epoch in 0..opts.epochs {
        for i in (1..indices.len()).rev() {
            let j = rng.random_range(0..=i);
            indices.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in indices.chunks(opts.batch_size) {
            let lr = cosine_lr(global_step, total_steps, warmup_steps, opts.base_lr);
            let scale = 1.0 / batch.len() as f64;
            let chunk_len = batch.len().div_ceil(GRAD_CHUNKS).max(1);
            let masks: Vec<(usize, MaskedSequence)> = batch
                .iter()
                .map(|&item| Ok((item, draw_mask(tokens_of(item), opts.masking, &mut rng)?)))
                .collect::<Result<Vec<_>>>()?;

            let partials: Vec<Result<(Gradients, f64)>> = masks
                .par_chunks(chunk_len)
                .map(|chunk| {
                    let mut grads = Gradients::zeros(model.params.len());
                    let mut loss_sum = 0.0;
                    for (item, masked) in chunk {
                        let mut g = Graph::new(&model.params);
                        let loss = item_loss(model, &mut g, *item, masked)?;
                        let scaled = g.scale(loss, scale);
                        loss_sum += g.value(scaled).item();
                        grads.add_scaled(&g.backward(scaled), 1.0);
                    }
                    Ok((grads, loss_sum))
                })
                .collect();

            let mut grads = Gradients::zeros(model.params.len());
            let mut batch_loss = 0.0;
            for part in partials {
                let (g, l) = part?;
                grads.add_scaled(&g, 1.0);
                batch_loss += l;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!("{stage} batch loss")));
            }
            opt.step(&mut model.params, &grads, lr)?;
            global_step += 1;
            epoch_loss += batch_loss;
            epoch_batches += 1;
            writeln!(
                log,
                "epoch={epoch} step={global_step} loss={batch_loss:.6} lr={lr:.6e}"
            )
            .map_err(|e| Error::io("<log>", e))?;
        }
        let mean = epoch_loss / epoch_batches as f64;
        if epoch == 0 {
            first_epoch_loss = mean;
        }
        final_epoch_loss = mean;
    }
    Ok(TrainStats {
        first_epoch_loss,
        final_epoch_loss,
        steps: global_step,
    })
}

/// Argmax token accuracy and cross-entropy at M = 0 with conditioning: the
/// deterministic-mode prediction measured against the encoded targets.
pub fn masked_token_accuracy(
    model: &MegaModel,
    data: &ConditionedData,
) -> Result<(f64, f64)> {
    let n = model.cfg.n_tokens;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut ce_sum = 0.0;
    for item in 0..data.len() {
        let masked = MaskedSequence::fully_hidden(n);
        let logits = model.logits_value(&masked, Some(&data.observations[item]))?;
        for p in 0..n {
            let row = logits.row(p);
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (i, &v) in row.iter().enumerate() {
                if v > best.0 {
                    best = (v, i);
                }
            }
            let target = data.tokens[item].indices[p] as usize;
            if best.1 == target {
                correct += 1;
            }
            let lse = crate::nn::graph::log_sum_exp(row);
            ce_sum += lse - row[target];
            total += 1;
        }
    }
    Ok((correct as f64 / total as f64, ce_sum / total as f64))
}

/// Deterministic per-item seed for parallel evaluation streams.
pub fn item_seed(master: u64, item: usize) -> u64 {
    master ^ (item as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub items: usize,
    pub mean_pve: f64,
    pub mean_mpjpe: f64,
    pub mean_pampjpe: f64,
    pub q_list: Vec<usize>,
    pub best_means: Vec<f64>,
    pub improvement_percent: f64,
    pub dist_to_det: Vec<(usize, f64)>,
    pub mean_vertex_sd: f64,
    pub mean_rotation_error: f64,
}

impl EvalSummary {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "items={} pve={:.3} mpjpe={:.3} pampjpe={:.3}\n",
            self.items, self.mean_pve, self.mean_mpjpe, self.mean_pampjpe
        ));
        for (q, m) in self.q_list.iter().zip(&self.best_means) {
            out.push_str(&format!("best_of_{q}={m:.3}\n"));
        }
        out.push_str(&format!("improvement_percent={:.2}\n", self.improvement_percent));
        for (q, d) in &self.dist_to_det {
            out.push_str(&format!("dist_to_det_q{q}={d:.3}\n"));
        }
        out.push_str(&format!("mean_vertex_sd={:.3}\n", self.mean_vertex_sd));
        out.push_str(&format!(
            "mean_rotation_error_rad={:.4}\n",
            self.mean_rotation_error
        ));
        out
    }
}

struct ItemEval {
    metrics: ItemMetrics,
    dist_to_det: Vec<f64>,
    sd: f64,
    rot_err: f64,
}

/// Full evaluation protocol: deterministic metrics, best-of-Q over
/// stochastic samples, mean-mesh distance to the deterministic prediction,
/// per-vertex uncertainty and rotation error.
pub fn evaluate(
    model: &MegaModel,
    tokenizer: &TokenizerModel,
    records: &[DatasetRecord],
    skeleton: &Skeleton,
    cfg: &RunConfig,
) -> Result<(MetricsReport, EvalSummary)> {
    if records.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    // The report's best-of-Q table is fixed at Q in {1, 5, 10, 25}; at least
    // 25 samples are always drawn per item.
    let q_list = vec![1usize, 5, 10, 25];
    let q_gen = cfg.q.max(25);
    let rings = skeleton.keypoint_rings();

    let evals: Vec<Result<(ItemEval, Vec<f64>)>> = records
        .par_iter()
        .enumerate()
        .map(|(item, rec)| {
            let (_, det_mesh) = generate_deterministic(model, tokenizer, &rec.observation)?;
            let (pve, mpjpe, pampjpe) = mesh_errors(&det_mesh, &rec.canonical, rings)?;

            let gen = GenerationConfig::stochastic(
                cfg.t,
                cfg.a,
                q_gen,
                item_seed(cfg.seed, item),
            );
            let samples = generate_stochastic(model, tokenizer, &rec.observation, &gen)?;
            let sample_errs: Vec<f64> = samples
                .iter()
                .map(|(_, mesh)| mesh_errors(mesh, &rec.canonical, rings).map(|e| e.0))
                .collect::<Result<Vec<_>>>()?;

            let meshes: Vec<CanonicalMesh> =
                samples.into_iter().map(|(_, mesh)| mesh).collect();
            let dist_to_det = q_list
                .iter()
                .map(|&q| {
                    let mm = mean_mesh(&meshes[..q])?;
                    mesh_distance(&mm, &det_mesh)
                })
                .collect::<Result<Vec<_>>>()?;
            let sd = vertex_sd(&meshes)?.1;

            let (r6, _) = model.predict_rot_cam(&rec.observation)?;
            let rot_err = match rot6d_to_matrix(&r6) {
                Ok(r) => geodesic_angle(&r, &rec.params.root_rotation),
                Err(_) => std::f64::consts::PI,
            };

            Ok((
                ItemEval {
                    metrics: ItemMetrics {
                        item,
                        pve,
                        mpjpe,
                        pampjpe,
                        best: Vec::new(),
                    },
                    dist_to_det,
                    sd,
                    rot_err,
                },
                sample_errs,
            ))
        })
        .collect();

    let mut rows = Vec::with_capacity(records.len());
    let mut all_errs = Vec::with_capacity(records.len());
    let mut dist_acc = vec![0.0; q_list.len()];
    let mut sd_acc = 0.0;
    let mut rot_acc = 0.0;
    for e in evals {
        let (e, errs) = e?;
        for (acc, d) in dist_acc.iter_mut().zip(&e.dist_to_det) {
            *acc += d;
        }
        sd_acc += e.sd;
        rot_acc += e.rot_err;
        rows.push(e.metrics);
        all_errs.push(errs);
    }
    let n = rows.len() as f64;
    let b = best_of_q(&all_errs, &q_list)?;
    for (row, table_row) in rows.iter_mut().zip(&b.table) {
        row.best = table_row.clone();
    }
    let best_means = b.means.clone();
    let improvement = b.improvement_percent;

    let summary = EvalSummary {
        items: rows.len(),
        mean_pve: rows.iter().map(|r| r.pve).sum::<f64>() / n,
        mean_mpjpe: rows.iter().map(|r| r.mpjpe).sum::<f64>() / n,
        mean_pampjpe: rows.iter().map(|r| r.pampjpe).sum::<f64>() / n,
        q_list: q_list.clone(),
        best_means,
        improvement_percent: improvement,
        dist_to_det: q_list
            .iter()
            .cloned()
            .zip(dist_acc.iter().map(|d| d / n))
            .collect(),
        mean_vertex_sd: sd_acc / n,
        mean_rotation_error: rot_acc / n,
    };
    let report = MetricsReport {
        rows,
        best_q_list: q_list,
        improvement_percent: summary.improvement_percent,
        apd: None,
        fid: None,
        dist_to_det: summary.dist_to_det.clone(),
        mean_vertex_sd: Some(summary.mean_vertex_sd),
    };
    Ok((report, summary))
}

// ---------------------------------------------------------------------------
// Command-level pipeline
// ---------------------------------------------------------------------------

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn open_log(path: &Path) -> Result<BufWriter<File>> {
    create_parent(path)?;
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

pub struct Workspace {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
}

impl Workspace {
    pub fn new(cfg: RunConfig, out_dir: impl Into<PathBuf>) -> Self {
        Workspace {
            cfg,
            out_dir: out_dir.into(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.cfg.resolve(&self.out_dir, rel)
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton::with_rings(self.cfg.rings_per_segment())
    }

    fn require(&self, rel: &str, what: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::Config(format!(
                "{what} not found at {}; run the producing command first",
                p.display()
            )));
        }
        Ok(p)
    }

    /// Generate the train and test datasets.
    pub fn run_synth(&self) -> Result<(usize, usize)> {
        let sk = self.skeleton();
        let train = make_dataset(&sk, self.cfg.train_count, self.cfg.occlusion_rate, self.cfg.seed)?;
        let test = make_dataset(
            &sk,
            self.cfg.test_count,
            self.cfg.occlusion_rate,
            self.cfg.seed + 1,
        )?;
        let train_path = self.path(&self.cfg.train_data);
        let test_path = self.path(&self.cfg.test_data);
        create_parent(&train_path)?;
        create_parent(&test_path)?;
        write_dataset(&train_path, &train)?;
        write_dataset(&test_path, &test)?;
        Ok((train.len(), test.len()))
    }

    pub fn run_fit_tokenizer(&self) -> Result<()> {
        let train_path = self.require(&self.cfg.train_data, "training dataset")?;
        let records = read_dataset(&train_path)?;
        let meshes: Vec<CanonicalMesh> = records.into_iter().map(|r| r.canonical).collect();
        let sk = self.skeleton();
        let model = fit_tokenizer(&meshes, &sk, self.cfg.n, self.cfg.l, self.cfg.s, self.cfg.seed)?;
        let out = self.path(&self.cfg.tokenizer);
        create_parent(&out)?;
        save_tokenizer(&out, &model)
    }

    pub fn run_pretrain(&self) -> Result<TrainStats> {
        let train_path = self.require(&self.cfg.train_data, "training dataset")?;
        let tok_path = self.require(&self.cfg.tokenizer, "tokenizer")?;
        let records = read_dataset(&train_path)?;
        let tokenizer = load_tokenizer(&tok_path)?;
        let tokens: Vec<TokenSequence> = records
            .iter()
            .map(|r| encode_mesh(&tokenizer, &r.canonical))
            .collect::<Result<Vec<_>>>()?;
        let mut model = MegaModel::new(self.cfg.model_config(), self.cfg.seed)?;
        let mut log = open_log(&self.path("pretrain.log"))?;
        let stats = pretrain(
            &mut model,
            &tokens,
            &TrainOpts::pretrain_from(&self.cfg),
            &mut log,
        )?;
        log.flush().map_err(|e| Error::io("pretrain.log", e))?;
        let ckpt = self.path(&self.cfg.pretrain_checkpoint);
        create_parent(&ckpt)?;
        save_checkpoint(&ckpt, &model)?;
        Ok(stats)
    }

    pub fn run_train(&self) -> Result<TrainStats> {
        let train_path = self.require(&self.cfg.train_data, "training dataset")?;
        let tok_path = self.require(&self.cfg.tokenizer, "tokenizer")?;
        let records = read_dataset(&train_path)?;
        let tokenizer = load_tokenizer(&tok_path)?;
        let sk = self.skeleton();
        let data = ConditionedData::from_records(&records, &tokenizer, &sk)?;
        let mut model = if self.cfg.pretrain {
            let ckpt = self.require(&self.cfg.pretrain_checkpoint, "pretrain checkpoint")?;
            let m = load_checkpoint(&ckpt, self.cfg.heads)?;
            validate_config(&m, &self.cfg.model_config())?;
            m
        } else {
            MegaModel::new(self.cfg.model_config(), self.cfg.seed)?
        };
        let mut log = open_log(&self.path("train.log"))?;
        let stats = train_conditioned(
            &mut model,
            &data,
            &TrainOpts::train_from(&self.cfg),
            &mut log,
        )?;
        log.flush().map_err(|e| Error::io("train.log", e))?;
        let ckpt = self.path(&self.cfg.checkpoint);
        create_parent(&ckpt)?;
        save_checkpoint(&ckpt, &model)?;
        Ok(stats)
    }

    fn load_model(&self, which: &str) -> Result<MegaModel> {
        let ckpt = self.require(which, "checkpoint")?;
        let model = load_checkpoint(&ckpt, self.cfg.heads)?;
        validate_config(&model, &self.cfg.model_config())?;
        Ok(model)
    }

    /// Inference over the test set. Deterministic mode writes one mesh per
    /// record; stochastic mode writes Q meshes per record plus a per-record
    /// vertex-SD summary.
    pub fn run_infer(
        &self,
        mode: crate::sampler::GenerationMode,
        samples: usize,
        steps: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<usize> {
        use crate::sampler::GenerationMode::*;
        let test_path = self.require(&self.cfg.test_data, "test dataset")?;
        let tok_path = self.require(&self.cfg.tokenizer, "tokenizer")?;
        let records = read_dataset(&test_path)?;
        let tokenizer = load_tokenizer(&tok_path)?;
        let model = self.load_model(&self.cfg.checkpoint)?;
        let dir = self.out_dir.join("infer");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let mut sd_lines = Vec::new();
        for (i, rec) in records.iter().enumerate() {
            match mode {
                Deterministic => {
                    let (tokens, mesh) = generate_deterministic(&model, &tokenizer, &rec.observation)?;
                    write_tokens(&dir.join(format!("rec{i:04}.tokens")), &[tokens])?;
                    write_obj(&dir.join(format!("rec{i:04}.obj")), &mesh)?;
                }
                Stochastic => {
                    let gen = GenerationConfig::stochastic(
                        steps,
                        temperature,
                        samples,
                        item_seed(seed, i),
                    );
                    let out = generate_stochastic(&model, &tokenizer, &rec.observation, &gen)?;
                    let tokens: Vec<TokenSequence> =
                        out.iter().map(|(t, _)| t.clone()).collect();
                    write_tokens(&dir.join(format!("rec{i:04}.tokens")), &tokens)?;
                    let meshes: Vec<CanonicalMesh> =
                        out.into_iter().map(|(_, m)| m).collect();
                    for (q, mesh) in meshes.iter().enumerate() {
                        write_obj(&dir.join(format!("rec{i:04}_s{q:02}.obj")), mesh)?;
                    }
                    let sd = if meshes.len() >= 2 { vertex_sd(&meshes)?.1 } else { 0.0 };
                    sd_lines.push(format!("record={i} mean_sd={sd:.3}"));
                }
                Unconditional => {
                    return Err(Error::Config(
                        "infer runs det|stoch; use the generate command for unconditional output"
                            .into(),
                    ))
                }
            }
        }
        if !sd_lines.is_empty() {
            let path = dir.join("vertex_sd.txt");
            std::fs::write(&path, sd_lines.join("\n") + "\n")
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(records.len())
    }

    /// Unconditional generation from the pretrain-stage checkpoint.
    pub fn run_generate(&self, count: usize, seed: u64) -> Result<usize> {
        let tok_path = self.require(&self.cfg.tokenizer, "tokenizer")?;
        let tokenizer = load_tokenizer(&tok_path)?;
        let model = self.load_model(&self.cfg.pretrain_checkpoint)?;
        let dir = self.out_dir.join("generated");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut cfg = GenerationConfig::unconditional(count, seed);
        cfg.steps = self.cfg.t.max(cfg.steps);
        cfg.temperature = self.cfg.a;
        let out = generate_unconditional(&model, &tokenizer, &cfg)?;
        let tokens: Vec<TokenSequence> = out.iter().map(|(t, _)| t.clone()).collect();
        write_tokens(&dir.join("generated.tokens"), &tokens)?;
        for (i, (_, mesh)) in out.iter().enumerate() {
            write_obj(&dir.join(format!("gen{i:04}.obj")), mesh)?;
        }
        Ok(out.len())
    }

    pub fn run_eval(&self) -> Result<EvalSummary> {
        let test_path = self.require(&self.cfg.test_data, "test dataset")?;
        let tok_path = self.require(&self.cfg.tokenizer, "tokenizer")?;
        let records = read_dataset(&test_path)?;
        let tokenizer = load_tokenizer(&tok_path)?;
        let model = self.load_model(&self.cfg.checkpoint)?;
        let sk = self.skeleton();
        let (report, summary) = evaluate(&model, &tokenizer, &records, &sk, &self.cfg)?;
        let csv_path = self.out_dir.join("metrics.csv");
        create_parent(&csv_path)?;
        std::fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        let txt_path = self.out_dir.join("eval.txt");
        std::fs::write(&txt_path, summary.render()).map_err(|e| Error::io(&txt_path, e))?;
        Ok(summary)
    }
}

pub fn write_obj(path: &Path, mesh: &CanonicalMesh) -> Result<()> {
    let mut out = String::with_capacity(mesh.vertex_count() * 32);
    for v in &mesh.vertices {
        out.push_str(&format!("v {:.8e} {:.8e} {:.8e}\n", v[0], v[1], v[2]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_tokens(path: &Path, sequences: &[TokenSequence]) -> Result<()> {
    let mut out = String::new();
    for seq in sequences {
        let words: Vec<String> = seq.indices.iter().map(|i| i.to_string()).collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
