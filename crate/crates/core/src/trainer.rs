//! Denoiser training: noise-prediction MSE with per-example conditioning
//! dropout, token position randomization, a timestep-gated identity
//! regularizer, Adam with global gradient clipping, and bit-exact
//! checkpointing. The loop is single-threaded and fully seeded, so two runs
//! with the same inputs produce identical parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diffusion::{predict_x0, q_sample, NoiseSchedule};
use crate::error::{EditError, Result};
use crate::io;
use crate::model::{
    init_model, BatchInput, Conditioning, Model, ModelConfig, Params, TensorMut, TensorRef,
};
use crate::num::{self, Real};
use crate::seed::{child_seed, rng_from};
use crate::textcond::{
    place_with_tpr, tokenize, TextEmbedder, Vocabulary, TPR_MAX_START,
};
use crate::world::{CameraPose, LatentCode, World, WorldConfig};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of dropping image and text conditioning together.
    pub p_both_null: f64,
    /// Probability of dropping only the text, given the image was kept.
    pub p_text_null: f64,
    pub lambda_id: f64,
    /// Identity loss applies only at t below this threshold.
    pub t_id_threshold: usize,
    pub clip_norm: f64,
    /// Cosine decay floor as a fraction of `lr`; 1.0 keeps the rate constant.
    pub lr_min_factor: f64,
    pub seed: u64,
    pub tpr_enabled: bool,
    pub id_module_enabled: bool,
    pub id_loss_enabled: bool,
    /// EMA decay per step; `None` disables the shadow copy.
    pub ema_decay: Option<f64>,
    pub log_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 64,
            lr: 1e-4,
            p_both_null: 0.05,
            p_text_null: 0.05,
            lambda_id: 0.1,
            t_id_threshold: 600,
            clip_norm: 1.0,
            lr_min_factor: 1.0,
            seed: 0,
            tpr_enabled: true,
            id_module_enabled: true,
            id_loss_enabled: true,
            ema_decay: None,
            log_every: 100,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(EditError::InvalidConfig("steps and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EditError::InvalidConfig(format!("lr = {}", self.lr)));
        }
        for (name, p) in [("p_both_null", self.p_both_null), ("p_text_null", self.p_text_null)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(EditError::InvalidConfig(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.p_both_null + self.p_text_null > 1.0 {
            return Err(EditError::InvalidConfig(
                "p_both_null + p_text_null exceeds 1".into(),
            ));
        }
        if !(0.0 < self.lr_min_factor && self.lr_min_factor <= 1.0) {
            return Err(EditError::InvalidConfig(format!(
                "lr_min_factor = {} outside (0, 1]",
                self.lr_min_factor
            )));
        }
        if self.lambda_id < 0.0 || self.clip_norm <= 0.0 {
            return Err(EditError::InvalidConfig(
                "lambda_id must be >= 0 and clip_norm > 0".into(),
            ));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(EditError::InvalidConfig(format!("ema_decay = {d} outside [0, 1)")));
            }
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(EditError::InvalidConfig(
                "checkpoint_every set without checkpoint_dir".into(),
            ));
        }
        Ok(())
    }
}

/// Shared text stack so training, editing and evaluation agree bit-for-bit:
/// the embedder seed is derived from the world seed.
pub fn text_stack(world_seed_used: u64, n_attr: usize, d_txt: usize) -> (Vocabulary, TextEmbedder) {
    let vocab = Vocabulary::builtin(n_attr);
    let embedder = TextEmbedder::new(
        vocab.size(),
        d_txt,
        child_seed(world_seed_used, "text-embedder"),
    );
    (vocab, embedder)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropDecision {
    Keep,
    TextNull,
    BothNull,
}

/// Per-example conditioning dropout. One uniform draw partitioned into
/// [0, p_both) -> drop everything, [p_both, p_both + p_text) -> drop only the
/// text, rest -> keep, so the branch frequencies are exactly (p1, p2, 1-p1-p2).
pub fn dropout_decision<R: Rng>(rng: &mut R, p_both: f64, p_text: f64) -> DropDecision {
    let u: f64 = rng.gen();
    if u < p_both {
        DropDecision::BothNull
    } else if u < p_both + p_text {
        DropDecision::TextNull
    } else {
        DropDecision::Keep
    }
}

/// Scales grads in place so the global L2 norm is at most `clip`; returns the
/// pre-clip norm.
pub fn clip_global_norm<F: Real>(grads: &mut Params<F>, clip: f64) -> f64 {
    let norm = grads.l2_norm().to_f64();
    if norm > clip {
        grads.scale(F::from_f64(clip / norm));
    }
    norm
}

struct Adam<F> {
    m: Params<F>,
    v: Params<F>,
    step: usize,
}

impl<F: Real> Adam<F> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(template: &Params<F>) -> Self {
        Self { m: template.zeros_like(), v: template.zeros_like(), step: 0 }
    }

    fn update(&mut self, params: &mut Params<F>, grads: &Params<F>, lr: f64) {
        self.step += 1;
        let b1 = F::from_f64(Self::BETA1);
        let b2 = F::from_f64(Self::BETA2);
        let one = F::one();
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        let rate = F::from_f64(lr / bc1);
        let denom_scale = F::from_f64(1.0 / bc2.sqrt());
        let eps = F::from_f64(Self::EPS);

        let mut ps = params.tensors_mut();
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        let gs = grads.tensors();
        for i in 0..ps.len() {
            let apply = |p: &mut F, m: &mut F, v: &mut F, g: F| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= rate * *m / ((*v).sqrt() * denom_scale + eps);
            };
            match (&mut ps[i].1, &mut ms[i].1, &mut vs[i].1, &gs[i].1) {
                (TensorMut::M(p), TensorMut::M(m), TensorMut::M(v), TensorRef::M(g)) => {
                    for ((p, m), (v, g)) in
                        p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut().zip(g.iter()))
                    {
                        apply(p, m, v, *g);
                    }
                }
                (TensorMut::V(p), TensorMut::V(m), TensorMut::V(v), TensorRef::V(g)) => {
                    for ((p, m), (v, g)) in
                        p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut().zip(g.iter()))
                    {
                        apply(p, m, v, *g);
                    }
                }
                _ => unreachable!("mismatched tensor kinds"),
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub total: f64,
    pub mse: f64,
    pub id: f64,
}

pub struct TrainResult<F> {
    pub model: Model<F>,
    pub ema: Option<Model<F>>,
    pub history: Vec<LossPoint>,
}

/// Identity-regularizer term for one example: returns the loss value and the
/// gradient with respect to the predicted noise (chained through the one-step
/// clean-latent estimate).
pub fn identity_term<F: Real>(
    world: &World<F>,
    sched: &NoiseSchedule,
    w_t: &LatentCode<F>,
    t: usize,
    eps_hat: &LatentCode<F>,
    target: &crate::world::IdentityEmbedding<F>,
) -> Result<(f64, LatentCode<F>)> {
    let w0_hat = predict_x0(sched, w_t, t, eps_hat)?;
    let (loss, dw) = world.identity_cosine_loss_grad(&w0_hat, target)?;
    let ab = sched.alpha_bar(t);
    let factor = F::from_f64(-(1.0 - ab).sqrt() / ab.sqrt());
    Ok((loss.to_f64(), dw.mapv(|v| v * factor)))
}

const DIVERGENCE_CEILING: f64 = 1e6;

#[allow(clippy::too_many_arguments)]
pub fn train<F: Real>(
    world: &World<F>,
    dataset: &Dataset<F>,
    sched: &NoiseSchedule,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    embedder: &TextEmbedder,
    mut on_log: impl FnMut(&LossPoint),
) -> Result<TrainResult<F>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.is_empty() {
        return Err(EditError::InvalidConfig("cannot train on an empty dataset".into()));
    }
    if model_cfg.k != world.k() || model_cfg.d != world.d() {
        return Err(EditError::Incompatible(format!(
            "model latent {}x{} does not match world {}x{}",
            model_cfg.k,
            model_cfg.d,
            world.k(),
            world.d()
        )));
    }
    if model_cfg.id_dim != world.config.id_dim {
        return Err(EditError::Incompatible(format!(
            "model id_dim {} does not match world {}",
            model_cfg.id_dim, world.config.id_dim
        )));
    }
    if model_cfg.d_txt != embedder.d_txt() {
        return Err(EditError::Incompatible(format!(
            "model d_txt {} does not match embedder {}",
            model_cfg.d_txt,
            embedder.d_txt()
        )));
    }
    if model_cfg.t_max != sched.t_max {
        return Err(EditError::Incompatible(format!(
            "model t_max {} does not match schedule {}",
            model_cfg.t_max, sched.t_max
        )));
    }

    let mut model: Model<F> = init_model(model_cfg, child_seed(cfg.seed, "model-init"))?;
    let mut ema = cfg.ema_decay.map(|_| model.params.clone());
    let mut adam = Adam::new(&model.params);
    let mut rng = rng_from(child_seed(cfg.seed, "train-loop"));
    let frontal = CameraPose::frontal();
    let mut history = Vec::new();

    let inv_count = 1.0 / (cfg.batch * model_cfg.k * model_cfg.d) as f64;
    for step in 1..=cfg.steps {
        let mut w_ts = Vec::with_capacity(cfg.batch);
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut conds = Vec::with_capacity(cfg.batch);
        let mut noises = Vec::with_capacity(cfg.batch);
        let mut id_targets = Vec::with_capacity(cfg.batch);

        for _ in 0..cfg.batch {
            let ex = &dataset.examples[rng.gen_range(0..dataset.len())];
            let t = rng.gen_range(1..=sched.t_max);
            let eps = num::normal_mat::<F, _>(&mut rng, model_cfg.k, model_cfg.d, 1.0);
            let w_t = q_sample(sched, &ex.w_e, t, &eps)?;
            let drop = dropout_decision(&mut rng, cfg.p_both_null, cfg.p_text_null);
            let cond = match drop {
                DropDecision::BothNull => Conditioning::null(),
                keep_image => {
                    let id_emb = if cfg.id_module_enabled {
                        let x = world.generate(&ex.w_o, frontal)?;
                        world.extract_identity(&x)?.0
                    } else {
                        Array1::zeros(model_cfg.id_dim)
                    };
                    let text = if keep_image == DropDecision::TextNull {
                        None
                    } else {
                        let mut seq = tokenize(vocab, &ex.instruction)?;
                        if cfg.tpr_enabled {
                            seq = place_with_tpr(&seq, &mut rng, TPR_MAX_START);
                        }
                        Some(embedder.embed::<F>(&seq)?)
                    };
                    Conditioning { w_o: Some(ex.w_o.clone()), id_emb: Some(id_emb), text }
                }
            };
            let id_target = if cfg.id_loss_enabled && cfg.id_module_enabled && t < cfg.t_id_threshold
            {
                let x_e = world.generate(&ex.w_e, frontal)?;
                Some(world.extract_identity(&x_e)?)
            } else {
                None
            };
            w_ts.push(w_t);
            ts.push(t);
            conds.push(cond);
            noises.push(eps);
            id_targets.push(id_target);
        }

        let input = BatchInput { w_t: w_ts, t: ts, conds };
        let (eps_hat, cache) = model.forward_batch(&input)?;

        let mut mse = 0.0f64;
        let mut id_sum = 0.0f64;
        let mut d_eps = Vec::with_capacity(cfg.batch);
        let lambda = F::from_f64(cfg.lambda_id / cfg.batch as f64);
        for bi in 0..cfg.batch {
            let diff = &eps_hat[bi] - &noises[bi];
            mse += diff.iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>() * inv_count;
            let mut g = diff.mapv(|v| v * F::from_f64(2.0 * inv_count));
            if let Some(target) = &id_targets[bi] {
                let (l, g_id) =
                    identity_term(world, sched, &input.w_t[bi], input.t[bi], &eps_hat[bi], target)?;
                id_sum += l / cfg.batch as f64;
                g = g + g_id.mapv(|v| v * lambda);
            }
            d_eps.push(g);
        }
        let total = mse + cfg.lambda_id * id_sum;
        if !total.is_finite() || total > DIVERGENCE_CEILING {
            return Err(EditError::Diverged { step, loss: total });
        }

        let mut grads = model.backward_batch(&input, &cache, &d_eps)?;
        clip_global_norm(&mut grads, cfg.clip_norm);
        let progress = (step - 1) as f64 / cfg.steps.max(1) as f64;
        let floor = cfg.lr_min_factor;
        let lr = cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        adam.update(&mut model.params, &grads, lr);
        if !model.params.all_finite() {
            return Err(EditError::Diverged { step, loss: total });
        }
        if let (Some(ema_params), Some(decay)) = (&mut ema, cfg.ema_decay) {
            let d = F::from_f64(decay);
            ema_params.scale(d);
            ema_params.axpy(F::one() - d, &model.params);
        }

        if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
            let point = LossPoint { step, total, mse, id: id_sum };
            on_log(&point);
            history.push(point);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            let dir = cfg.checkpoint_dir.as_ref().expect("validated");
            save_checkpoint(&dir.join(format!("step-{step:07}")), &model, cfg, world, step, total)?;
        }
    }

    let ema_model = ema.map(|params| Model {
        config: model.config.clone(),
        params,
        init_seed: model.init_seed,
    });
    Ok(TrainResult { model, ema: ema_model, history })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub world_seed_used: u64,
    pub world_config: WorldConfig,
    pub init_seed: u64,
    pub step: usize,
    pub loss: f64,
    pub checksums: BTreeMap<String, String>,
}

pub fn params_to_f32<F: Real>(params: &Params<F>) -> Vec<f32> {
    let mut out = Vec::new();
    for (_, t) in params.tensors() {
        match t {
            TensorRef::M(m) => out.extend(m.iter().map(|&v| v.to_f64() as f32)),
            TensorRef::V(v) => out.extend(v.iter().map(|&x| x.to_f64() as f32)),
        }
    }
    out
}

pub fn params_from_f32<F: Real>(params: &mut Params<F>, flat: &[f32]) -> Result<()> {
    let mut offset = 0usize;
    for (_, t) in params.tensors_mut() {
        match t {
            TensorMut::M(m) => {
                for v in m.iter_mut() {
                    *v = F::from_f64(flat[offset] as f64);
                    offset += 1;
                }
            }
            TensorMut::V(vec) => {
                for v in vec.iter_mut() {
                    *v = F::from_f64(flat[offset] as f64);
                    offset += 1;
                }
            }
        }
    }
    if offset != flat.len() {
        return Err(EditError::ShapeMismatch {
            expected: format!("{offset} parameters"),
            got: format!("{} values", flat.len()),
        });
    }
    Ok(())
}

pub fn save_checkpoint<F: Real>(
    dir: &Path,
    model: &Model<F>,
    train_config: &TrainConfig,
    world: &World<F>,
    step: usize,
    loss: f64,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let flat = params_to_f32(&model.params);
    let path = dir.join("params.bin");
    io::write_blob(&path, &flat)?;
    let mut checksums = BTreeMap::new();
    checksums.insert("params".to_string(), io::sha256_file(&path)?);
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        model_config: model.config.clone(),
        train_config: train_config.clone(),
        world_seed_used: world.seed_used,
        world_config: world.config.clone(),
        init_seed: model.init_seed,
        step,
        loss,
        checksums,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(dir: &Path, world: &World<F>) -> Result<(Model<F>, CheckpointManifest)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(EditError::Incompatible(format!(
            "checkpoint schema version {} (expected {})",
            manifest.schema_version, CHECKPOINT_SCHEMA_VERSION
        )));
    }
    if manifest.world_seed_used != world.seed_used || manifest.world_config != world.config {
        return Err(EditError::Incompatible(
            "checkpoint was trained against a different world".into(),
        ));
    }
    let path = dir.join("params.bin");
    let sum = manifest
        .checksums
        .get("params")
        .ok_or_else(|| EditError::Integrity("manifest missing params checksum".into()))?;
    io::verify_checksum(&path, sum)?;
    let mut model: Model<F> = init_model(&manifest.model_config, manifest.init_seed)?;
    let flat = io::read_blob(&path, model.params.n_params())?;
    params_from_f32(&mut model.params, &flat)?;
    Ok((model, manifest))
}
