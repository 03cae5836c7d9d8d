//! Noise-schedule algebra, the forward process, one-step x0 prediction,
//! deterministic (eta = 0) DDIM stepping, dual-scale classifier-free guidance
//! composition, and the partial-noising edit sampler.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::model::{Conditioning, Model};
use crate::num::{self, Real};
use crate::textcond::{self, TextEmbedder, Vocabulary};
use crate::world::{CameraPose, LatentCode, World};

/// Forward-process algebra: betas, alphas, and cumulative alpha-bar.
/// `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

/// Linear-beta schedule.
pub fn make_schedule(t_max: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(EditError::InvalidConfig(format!("T = {t_max} (need >= 2)")));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(EditError::InvalidConfig(format!(
            "invalid beta bounds ({beta_min}, {beta_max})"
        )));
    }
    let mut betas = Vec::with_capacity(t_max);
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut cum = 1.0f64;
    for i in 0..t_max {
        let beta = beta_min + (beta_max - beta_min) * i as f64 / (t_max - 1) as f64;
        cum *= 1.0 - beta;
        betas.push(beta);
        alpha_bars.push(cum);
    }
    Ok(NoiseSchedule { t_max, betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of alphas up to step t; alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(EditError::OutOfRange(format!(
                "timestep {t} outside [1, {}]",
                self.t_max
            )));
        }
        Ok(())
    }
}

fn check_same_shape<F: Real>(a: &Array2<F>, b: &Array2<F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(EditError::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// Forward process: sqrt(abar_t) w0 + sqrt(1 - abar_t) eps.
pub fn q_sample<F: Real>(
    sched: &NoiseSchedule,
    w0: &Array2<F>,
    t: usize,
    eps: &Array2<F>,
) -> Result<Array2<F>> {
    sched.check_t(t)?;
    check_same_shape(w0, eps)?;
    let ab = sched.alpha_bar(t);
    let a = F::from_f64(ab.sqrt());
    let b = F::from_f64((1.0 - ab).sqrt());
    Ok(w0.mapv(|v| v * a) + &eps.mapv(|v| v * b))
}

/// One-step clean-latent estimate: (w_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
pub fn predict_x0<F: Real>(
    sched: &NoiseSchedule,
    w_t: &Array2<F>,
    t: usize,
    eps_hat: &Array2<F>,
) -> Result<Array2<F>> {
    sched.check_t(t)?;
    check_same_shape(w_t, eps_hat)?;
    let ab = sched.alpha_bar(t);
    let a = F::from_f64(ab.sqrt());
    let b = F::from_f64((1.0 - ab).sqrt());
    Ok((w_t - &eps_hat.mapv(|v| v * b)).mapv(|v| v / a))
}

/// Deterministic DDIM update from t to t_prev (t_prev may be 0).
pub fn ddim_step<F: Real>(
    sched: &NoiseSchedule,
    w_t: &Array2<F>,
    t: usize,
    t_prev: usize,
    eps_hat: &Array2<F>,
) -> Result<Array2<F>> {
    if t_prev >= t {
        return Err(EditError::OutOfRange(format!(
            "DDIM step must decrease: t = {t}, t_prev = {t_prev}"
        )));
    }
    let x0 = predict_x0(sched, w_t, t, eps_hat)?;
    let ab_prev = sched.alpha_bar(t_prev);
    let a = F::from_f64(ab_prev.sqrt());
    let b = F::from_f64((1.0 - ab_prev).sqrt());
    Ok(x0.mapv(|v| v * a) + &eps_hat.mapv(|v| v * b))
}

/// Strictly decreasing timestep subsequence; the final step denoises to 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DdimPlan {
    pub timesteps: Vec<usize>,
}

impl DdimPlan {
    /// `n_steps` timesteps evenly spaced from `t_start` down toward 0.
    pub fn new(t_start: usize, n_steps: usize, t_max: usize) -> Result<Self> {
        if t_start == 0 || t_start > t_max {
            return Err(EditError::OutOfRange(format!(
                "t_start = {t_start} outside [1, {t_max}]"
            )));
        }
        if n_steps == 0 || n_steps > t_start {
            return Err(EditError::InvalidConfig(format!(
                "n_steps = {n_steps} incompatible with t_start = {t_start}"
            )));
        }
        let mut timesteps = Vec::with_capacity(n_steps);
        for i in 0..n_steps {
            let t = ((t_start as f64) * (n_steps - i) as f64 / n_steps as f64).round() as usize;
            timesteps.push(t.max(1));
        }
        timesteps.dedup();
        let plan = Self { timesteps };
        plan.validate(t_max)?;
        Ok(plan)
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.timesteps.is_empty() {
            return Err(EditError::InvalidConfig("empty DDIM plan".into()));
        }
        for pair in self.timesteps.windows(2) {
            if pair[1] >= pair[0] {
                return Err(EditError::InvalidConfig(format!(
                    "plan not strictly decreasing at {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        let first = self.timesteps[0];
        let last = *self.timesteps.last().expect("non-empty");
        if first > t_max || last == 0 {
            return Err(EditError::OutOfRange(format!(
                "plan range [{last}, {first}] outside [1, {t_max}]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceScales {
    pub image: f64,
    pub text: f64,
}

impl GuidanceScales {
    pub fn new(image: f64, text: f64) -> Result<Self> {
        if !image.is_finite() || !text.is_finite() || image < 0.0 || text < 0.0 {
            return Err(EditError::InvalidConfig(format!(
                "guidance scales ({image}, {text}) must be finite and >= 0"
            )));
        }
        Ok(Self { image, text })
    }
}

/// Dual-scale guidance composition:
/// eps = eps_uncond + s_I (eps_img - eps_uncond) + s_T (eps_full - eps_img).
pub fn cfg_compose<F: Real>(
    eps_uncond: &Array2<F>,
    eps_img: &Array2<F>,
    eps_full: &Array2<F>,
    scales: GuidanceScales,
) -> Result<Array2<F>> {
    check_same_shape(eps_uncond, eps_img)?;
    check_same_shape(eps_uncond, eps_full)?;
    // Expanded so the corner cases (0,0), (1,0) and (1,1) reproduce the
    // inputs bit for bit.
    let cu = F::from_f64(1.0 - scales.image);
    let ci = F::from_f64(scales.image - scales.text);
    let cf = F::from_f64(scales.text);
    let mut out = eps_uncond.clone();
    ndarray::Zip::from(&mut out)
        .and(eps_img)
        .and(eps_full)
        .for_each(|o, &i, &f| {
            *o = cu * *o + ci * i + cf * f;
        });
    Ok(out)
}

/// Everything the sampler needs to turn an instruction into conditioning.
pub struct TextPipeline<'a> {
    pub vocab: &'a Vocabulary,
    pub embedder: &'a TextEmbedder,
}

/// Partial-noising instructed edit: forward-noise `w_o` to `t_start`, then
/// run guided DDIM with the three conditioning passes per step.
#[allow(clippy::too_many_arguments)]
pub fn sample_edit<F: Real, R: Rng>(
    model: &Model<F>,
    world: &World<F>,
    sched: &NoiseSchedule,
    text: &TextPipeline<'_>,
    w_o: &LatentCode<F>,
    instruction: &str,
    scales: GuidanceScales,
    plan: &DdimPlan,
    rng: &mut R,
) -> Result<LatentCode<F>> {
    plan.validate(sched.t_max)?;
    let seq = textcond::tokenize(text.vocab, instruction)?;
    let text_emb = text.embedder.embed::<F>(&seq)?;
    let x_o = world.generate(w_o, CameraPose::frontal())?;
    let id = world.extract_identity(&x_o)?;

    let cond_full = Conditioning {
        w_o: Some(w_o.clone()),
        id_emb: Some(id.0.clone()),
        text: Some(text_emb),
    };
    let cond_img = Conditioning {
        w_o: Some(w_o.clone()),
        id_emb: Some(id.0),
        text: None,
    };
    let cond_null = Conditioning::null();

    let t_start = plan.timesteps[0];
    let eps0 = num::normal_mat::<F, _>(rng, w_o.dim().0, w_o.dim().1, 1.0);
    let mut w_t = q_sample(sched, w_o, t_start, &eps0)?;

    for (i, &t) in plan.timesteps.iter().enumerate() {
        let t_prev = plan.timesteps.get(i + 1).copied().unwrap_or(0);
        let eps_uncond = model.forward(&w_t, t, &cond_null)?;
        let eps_img = model.forward(&w_t, t, &cond_img)?;
        let eps_full = model.forward(&w_t, t, &cond_full)?;
        let eps = cfg_compose(&eps_uncond, &eps_img, &eps_full, scales)?;
        w_t = ddim_step(sched, &w_t, t, t_prev, &eps)?;
    }
    Ok(w_t)
}
