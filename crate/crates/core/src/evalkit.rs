//! Evaluation: probe-based edit metrics, multi-view identity scoring, joint
//! space directional alignment, composite-instruction stress tests, and the
//! CSV writers for ablation comparisons.
//!
//! All metrics are normalized by the frozen probe standard deviations, so a
//! perfect single edit scores exactly beta / sigma on its own attribute and
//! zero on every other.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_edit, DdimPlan, GuidanceScales, NoiseSchedule, TextPipeline};
use crate::error::{EditError, Result};
use crate::model::Model;
use crate::num::{self, Real};
use crate::parallel::parallel_map;
use crate::seed::{child_seed, rng_from};
use crate::textcond::{
    attribute_word, concat_instructions, render_instruction, InstructionTemplateSet, TextEmbedder,
    Vocabulary,
};
use crate::world::{CameraPose, LatentCode, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_latents: usize,
    pub seed: u64,
    pub scales: GuidanceScales,
    pub t_start: usize,
    pub n_steps: usize,
    /// Composite sizes to stress, e.g. [2, 3].
    pub composite_sizes: Vec<usize>,
    /// Evaluate on paraphrases never seen in training.
    pub use_held_out_templates: bool,
    pub yaw: f64,
    pub pitch: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_latents: 16,
            seed: 0,
            scales: GuidanceScales { image: 1.0, text: 1.0 },
            t_start: 600,
            n_steps: 15,
            composite_sizes: vec![2, 3],
            use_held_out_templates: true,
            yaw: 30f64.to_radians(),
            pitch: 20f64.to_radians(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.n_latents == 0 {
            return Err(EditError::InvalidConfig("n_latents must be positive".into()));
        }
        DdimPlan::new(self.t_start, self.n_steps, t_max)?;
        GuidanceScales::new(self.scales.image, self.scales.text)?;
        if self.yaw.abs() > std::f64::consts::FRAC_PI_2
            || self.pitch.abs() > std::f64::consts::FRAC_PI_2
        {
            return Err(EditError::OutOfRange("view angles outside +/- pi/2".into()));
        }
        Ok(())
    }

    /// The four evaluation views: left/right yaw, down/up pitch.
    pub fn poses(&self) -> Vec<CameraPose> {
        vec![
            CameraPose { yaw: -self.yaw, pitch: 0.0 },
            CameraPose { yaw: self.yaw, pitch: 0.0 },
            CameraPose { yaw: 0.0, pitch: -self.pitch },
            CameraPose { yaw: 0.0, pitch: self.pitch },
        ]
    }
}

/// Signed probe shift on the edited attribute, in units of the probe sigma.
/// Positive means the edit moved in the instructed direction.
pub fn attribute_altering<F: Real>(
    world: &World<F>,
    w_o: &LatentCode<F>,
    w_edit: &LatentCode<F>,
    attr: usize,
    sign: i8,
) -> Result<f64> {
    let before = world.attribute_logits(w_o)?;
    let after = world.attribute_logits(w_edit)?;
    let sigma = world.probe_std(attr)?.to_f64();
    Ok(sign as f64 * (after[attr] - before[attr]).to_f64() / sigma)
}

/// Mean absolute probe shift over the attributes that were not instructed,
/// each in units of its own sigma. Lower is better.
pub fn attribute_dependency<F: Real>(
    world: &World<F>,
    w_o: &LatentCode<F>,
    w_edit: &LatentCode<F>,
    attr: usize,
) -> Result<f64> {
    if attr >= world.n_attr() {
        return Err(EditError::UnknownAttribute(attr));
    }
    let before = world.attribute_logits(w_o)?;
    let after = world.attribute_logits(w_edit)?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for b in 0..world.n_attr() {
        if b == attr {
            continue;
        }
        let sigma = world.probe_std(b)?.to_f64();
        acc += (after[b] - before[b]).to_f64().abs() / sigma;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { acc / count as f64 })
}

/// Mean identity cosine between the original and edited renders across views.
pub fn id_score<F: Real>(
    world: &World<F>,
    w_o: &LatentCode<F>,
    w_edit: &LatentCode<F>,
    poses: &[CameraPose],
) -> Result<f64> {
    if poses.is_empty() {
        return Err(EditError::InvalidConfig("need at least one view".into()));
    }
    let mut acc = 0.0;
    for &pose in poses {
        let a = world.extract_identity(&world.generate(w_o, pose)?)?;
        let b = world.extract_identity(&world.generate(w_edit, pose)?)?;
        acc += num::cosine(&a.0, &b.0).to_f64();
    }
    Ok(acc / poses.len() as f64)
}

/// Cosine between the joint-space image delta and the frozen text direction
/// for (attr, sign). An unchanged latent scores exactly zero.
pub fn directional_score<F: Real>(
    world: &World<F>,
    w_o: &LatentCode<F>,
    w_edit: &LatentCode<F>,
    attr: usize,
    sign: i8,
) -> Result<f64> {
    let frontal = CameraPose::frontal();
    let j0 = world.joint_embed_image(&world.generate(w_o, frontal)?)?;
    let j1 = world.joint_embed_image(&world.generate(w_edit, frontal)?)?;
    let delta = &j1 - &j0;
    let dir = world.joint_text_direction(attr, sign)?;
    Ok(num::cosine(&delta, &dir).to_f64())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttrMetrics {
    pub attr: usize,
    pub word: String,
    pub aa: f64,
    pub ad: f64,
    pub id: f64,
    pub dir: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositeMetrics {
    pub m: usize,
    /// Mean over trials of the worst per-constituent attribute-altering score.
    pub aa_min: f64,
    /// Mean per-constituent directional score.
    pub dir: f64,
    pub id: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_latents: usize,
    pub n_single_edits: usize,
    pub aa: f64,
    pub ad: f64,
    pub id: f64,
    pub dir: f64,
    pub per_attr: Vec<AttrMetrics>,
    pub composite: Vec<CompositeMetrics>,
    pub config: EvalConfig,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn composite_aa_min(&self, m: usize) -> Option<f64> {
        self.composite.iter().find(|c| c.m == m).map(|c| c.aa_min)
    }
}

struct LatentOutcome {
    // Per (attr, sign) flattened: aa, ad, id, dir.
    singles: Vec<(usize, f64, f64, f64, f64)>,
    // Per composite: m, aa_min, dir, id.
    composites: Vec<(usize, f64, f64, f64)>,
}

/// Runs the full metric battery on a trained denoiser.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<F: Real>(
    model: &Model<F>,
    world: &World<F>,
    sched: &NoiseSchedule,
    vocab: &Vocabulary,
    embedder: &TextEmbedder,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate(sched.t_max)?;
    let templates = if cfg.use_held_out_templates {
        InstructionTemplateSet::held_out(world.n_attr())
    } else {
        InstructionTemplateSet::builtin(world.n_attr())
    };
    let plan = DdimPlan::new(cfg.t_start, cfg.n_steps, sched.t_max)?;
    let poses = cfg.poses();
    let n_attr = world.n_attr();

    let outcomes: Vec<Result<LatentOutcome>> = parallel_map(cfg.n_latents, |i| {
        let mut rng = rng_from(child_seed(cfg.seed, &format!("eval-latent-{i}")));
        let text = TextPipeline { vocab, embedder };
        let w_o = world.sample_prior_with(&mut rng);
        let mut singles = Vec::with_capacity(n_attr * 2);
        for attr in 0..n_attr {
            for &sign in &[1i8, -1] {
                let instruction = render_instruction(&templates, attr, sign, &mut rng)?;
                let w_edit = sample_edit(
                    model, world, sched, &text, &w_o, &instruction, cfg.scales, &plan, &mut rng,
                )?;
                singles.push((
                    attr,
                    attribute_altering(world, &w_o, &w_edit, attr, sign)?,
                    attribute_dependency(world, &w_o, &w_edit, attr)?,
                    id_score(world, &w_o, &w_edit, &poses)?,
                    directional_score(world, &w_o, &w_edit, attr, sign)?,
                ));
            }
        }
        let mut composites = Vec::new();
        for &m in &cfg.composite_sizes {
            if m == 0 || m > n_attr {
                return Err(EditError::InvalidConfig(format!(
                    "composite size {m} incompatible with {n_attr} attributes"
                )));
            }
            // m distinct attributes with random signs.
            let mut attrs: Vec<usize> = (0..n_attr).collect();
            for j in (1..attrs.len()).rev() {
                let pick = rng.gen_range(0..=j);
                attrs.swap(j, pick);
            }
            let chosen: Vec<(usize, i8)> = attrs[..m]
                .iter()
                .map(|&a| (a, if rng.gen_bool(0.5) { 1 } else { -1 }))
                .collect();
            let parts = chosen
                .iter()
                .map(|&(a, s)| render_instruction(&templates, a, s, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let instruction = concat_instructions(vocab, &parts)?;
            let w_edit = sample_edit(
                model, world, sched, &text, &w_o, &instruction, cfg.scales, &plan, &mut rng,
            )?;
            let mut worst = f64::INFINITY;
            let mut dir_acc = 0.0;
            for &(a, s) in &chosen {
                worst = worst.min(attribute_altering(world, &w_o, &w_edit, a, s)?);
                dir_acc += directional_score(world, &w_o, &w_edit, a, s)?;
            }
            composites.push((
                m,
                worst,
                dir_acc / m as f64,
                id_score(world, &w_o, &w_edit, &poses)?,
            ));
        }
        Ok(LatentOutcome { singles, composites })
    });

    let mut per_attr_acc = vec![(0.0f64, 0.0f64, 0.0f64, 0.0f64, 0usize); n_attr];
    let mut composite_acc: std::collections::BTreeMap<usize, (f64, f64, f64, usize)> =
        std::collections::BTreeMap::new();
    let mut n_single_edits = 0usize;
    for outcome in outcomes {
        let outcome = outcome?;
        for (attr, aa, ad, id, dir) in outcome.singles {
            let slot = &mut per_attr_acc[attr];
            slot.0 += aa;
            slot.1 += ad;
            slot.2 += id;
            slot.3 += dir;
            slot.4 += 1;
            n_single_edits += 1;
        }
        for (m, aa_min, dir, id) in outcome.composites {
            let slot = composite_acc.entry(m).or_insert((0.0, 0.0, 0.0, 0));
            slot.0 += aa_min;
            slot.1 += dir;
            slot.2 += id;
            slot.3 += 1;
        }
    }

    let per_attr: Vec<AttrMetrics> = per_attr_acc
        .iter()
        .enumerate()
        .map(|(attr, &(aa, ad, id, dir, n))| {
            let n = n.max(1) as f64;
            AttrMetrics {
                attr,
                word: attribute_word(attr),
                aa: aa / n,
                ad: ad / n,
                id: id / n,
                dir: dir / n,
            }
        })
        .collect();
    let mean = |f: fn(&AttrMetrics) -> f64| -> f64 {
        per_attr.iter().map(f).sum::<f64>() / per_attr.len().max(1) as f64
    };
    let composite: Vec<CompositeMetrics> = composite_acc
        .into_iter()
        .map(|(m, (aa, dir, id, n))| {
            let n = n.max(1) as f64;
            CompositeMetrics { m, aa_min: aa / n, dir: dir / n, id: id / n }
        })
        .collect();

    Ok(MetricsReport {
        n_latents: cfg.n_latents,
        n_single_edits,
        aa: mean(|a| a.aa),
        ad: mean(|a| a.ad),
        id: mean(|a| a.id),
        dir: mean(|a| a.dir),
        per_attr,
        composite,
        config: cfg.clone(),
    })
}

/// Side-by-side metric table for named model variants.
pub fn write_comparison_csv(path: &Path, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut out = String::from("variant,aa,ad,id,dir");
    let composite_sizes: Vec<usize> = rows
        .first()
        .map(|(_, r)| r.composite.iter().map(|c| c.m).collect())
        .unwrap_or_default();
    for m in &composite_sizes {
        out.push_str(&format!(",aa_min_{m}"));
    }
    out.push('\n');
    for (name, report) in rows {
        out.push_str(&format!(
            "{name},{:.6},{:.6},{:.6},{:.6}",
            report.aa, report.ad, report.id, report.dir
        ));
        for m in &composite_sizes {
            let v = report.composite_aa_min(*m).unwrap_or(f64::NAN);
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn improvement_rate(with: f64, without: f64) -> f64 {
    (with - without) / without.abs().max(1e-9)
}

/// Relative gain of the `with` variant over the `without` variant as the
/// instruction count grows, for the worst-constituent attribute score and the
/// directional score.
pub fn write_improvement_csv(
    path: &Path,
    with: &MetricsReport,
    without: &MetricsReport,
) -> Result<()> {
    let mut out = String::from("instruction_count,aa_improvement_rate,directional_improvement_rate\n");
    for c in &with.composite {
        let Some(base) = without.composite.iter().find(|b| b.m == c.m) else {
            return Err(EditError::Incompatible(format!(
                "baseline report lacks composite size {}",
                c.m
            )));
        };
        out.push_str(&format!(
            "{},{:.6},{:.6}\n",
            c.m,
            improvement_rate(c.aa_min, base.aa_min),
            improvement_rate(c.dir, base.dir),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AblationVariant {
    pub name: String,
    pub train: crate::trainer::TrainConfig,
}

/// Trains every variant on the same dataset and evaluates each with the same
/// seed. Writes `<name>.json` per variant plus `comparison.csv`; when
/// `improvement_pair` names two variants, also writes `improvement.csv`
/// comparing the first against the second.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run<F: Real>(
    world: &World<F>,
    dataset: &crate::dataset::Dataset<F>,
    sched: &NoiseSchedule,
    model_cfg: &crate::model::ModelConfig,
    variants: &[AblationVariant],
    eval_cfg: &EvalConfig,
    vocab: &Vocabulary,
    embedder: &TextEmbedder,
    out_dir: &Path,
    improvement_pair: Option<(&str, &str)>,
) -> Result<Vec<(String, MetricsReport)>> {
    if variants.is_empty() {
        return Err(EditError::InvalidConfig("no ablation variants given".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut reports = Vec::with_capacity(variants.len());
    for variant in variants {
        let result = crate::trainer::train(
            world, dataset, sched, model_cfg, &variant.train, vocab, embedder, |_| {},
        )?;
        let report = evaluate(&result.model, world, sched, vocab, embedder, eval_cfg)?;
        report.save(&out_dir.join(format!("{}.json", variant.name)))?;
        reports.push((variant.name.clone(), report));
    }
    write_comparison_csv(&out_dir.join("comparison.csv"), &reports)?;
    if let Some((with, without)) = improvement_pair {
        let find = |name: &str| -> Result<&MetricsReport> {
            reports
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, r)| r)
                .ok_or_else(|| EditError::InvalidConfig(format!("unknown variant {name:?}")))
        };
        write_improvement_csv(&out_dir.join("improvement.csv"), find(with)?, find(without)?)?;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::model::{init_model, ModelConfig};
    use crate::trainer::text_stack;
    use crate::world::{build_world, WorldConfig};
    use approx::assert_abs_diff_eq;

    fn small_world() -> World<f64> {
        build_world(&WorldConfig {
            k: 4,
            d: 16,
            n_attr: 4,
            img_dim: 32,
            id_dim: 16,
            joint_dim: 8,
            seed: 11,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn oracle_edit_scores_beta_over_sigma() {
        let world = small_world();
        let beta = world.config.edit_magnitude;
        let mut rng = rng_from(1);
        for _ in 0..20 {
            let w_o = world.sample_prior_with(&mut rng);
            for attr in 0..world.n_attr() {
                for &sign in &[1i8, -1] {
                    let w_edit = world.apply_edit(&w_o, attr, sign, beta).unwrap();
                    let aa = attribute_altering(&world, &w_o, &w_edit, attr, sign).unwrap();
                    let sigma = world.probe_std(attr).unwrap();
                    assert_abs_diff_eq!(aa, beta / sigma, epsilon = 1e-9);
                    let ad = attribute_dependency(&world, &w_o, &w_edit, attr).unwrap();
                    assert_abs_diff_eq!(ad, 0.0, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn unchanged_latent_scores_zero() {
        let world = small_world();
        let mut rng = rng_from(2);
        let w = world.sample_prior_with(&mut rng);
        assert_abs_diff_eq!(
            attribute_altering(&world, &w, &w, 0, 1).unwrap(),
            0.0,
            epsilon = 0.0
        );
        assert_abs_diff_eq!(
            attribute_dependency(&world, &w, &w, 0).unwrap(),
            0.0,
            epsilon = 0.0
        );
        // Zero image delta gives a directional score of exactly zero.
        assert_abs_diff_eq!(
            directional_score(&world, &w, &w, 0, 1).unwrap(),
            0.0,
            epsilon = 0.0
        );
        let poses = EvalConfig::default().poses();
        assert_abs_diff_eq!(id_score(&world, &w, &w, &poses).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn oracle_edit_keeps_identity_high() {
        let world = small_world();
        let poses = EvalConfig::default().poses();
        let mut rng = rng_from(3);
        let mut acc = 0.0;
        let trials = 20;
        for _ in 0..trials {
            let w_o = world.sample_prior_with(&mut rng);
            let w_edit = world
                .apply_edit(&w_o, 1, 1, world.config.edit_magnitude)
                .unwrap();
            acc += id_score(&world, &w_o, &w_edit, &poses).unwrap();
        }
        let mean = acc / trials as f64;
        assert!(mean > 0.7, "oracle identity score {mean}");
    }

    #[test]
    fn oracle_edit_aligns_with_text_direction() {
        let world = small_world();
        let mut rng = rng_from(4);
        let mut aligned = 0.0;
        let mut mismatched = 0.0;
        let trials = 40;
        for _ in 0..trials {
            let w_o = world.sample_prior_with(&mut rng);
            let w_edit = world
                .apply_edit(&w_o, 0, 1, world.config.edit_magnitude)
                .unwrap();
            aligned += directional_score(&world, &w_o, &w_edit, 0, 1).unwrap();
            mismatched += directional_score(&world, &w_o, &w_edit, 1, 1).unwrap();
        }
        let aligned = aligned / trials as f64;
        let mismatched = mismatched / trials as f64;
        assert!(aligned > 0.5, "aligned score {aligned}");
        assert!(
            aligned > mismatched + 0.3,
            "aligned {aligned} vs mismatched {mismatched}"
        );
        // Opposite sign flips the score.
        let w_o = world.sample_prior_with(&mut rng);
        let w_edit = world
            .apply_edit(&w_o, 0, 1, world.config.edit_magnitude)
            .unwrap();
        let pos = directional_score(&world, &w_o, &w_edit, 0, 1).unwrap();
        let neg = directional_score(&world, &w_o, &w_edit, 0, -1).unwrap();
        assert_abs_diff_eq!(pos, -neg, epsilon = 1e-12);
    }

    #[test]
    fn evaluate_smoke_and_report_round_trip() {
        let world = small_world();
        let model_cfg = ModelConfig {
            k: world.k(),
            d: world.d(),
            hidden: 32,
            n_blocks: 1,
            n_heads: 4,
            d_txt: 16,
            id_dim: world.config.id_dim,
            mlp_ratio: 2,
            t_max: 100,
        };
        let sched = make_schedule(model_cfg.t_max, 1e-4, 0.02).unwrap();
        let model = init_model::<f64>(&model_cfg, 5).unwrap();
        let (vocab, embedder) = text_stack(world.seed_used, world.n_attr(), model_cfg.d_txt);
        let cfg = EvalConfig {
            n_latents: 2,
            t_start: 60,
            n_steps: 5,
            composite_sizes: vec![2],
            ..EvalConfig::default()
        };
        let report = evaluate(&model, &world, &sched, &vocab, &embedder, &cfg).unwrap();
        assert_eq!(report.n_latents, 2);
        assert_eq!(report.n_single_edits, 2 * world.n_attr() * 2);
        assert!(report.aa.is_finite() && report.ad.is_finite());
        assert!(report.id.is_finite() && report.dir.is_finite());
        assert_eq!(report.per_attr.len(), world.n_attr());
        assert!(report.composite_aa_min(2).is_some());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        let back = MetricsReport::load(&path).unwrap();
        assert_eq!(back.aa, report.aa);
        assert_eq!(back.composite.len(), report.composite.len());

        // Same seed, same report.
        let again = evaluate(&model, &world, &sched, &vocab, &embedder, &cfg).unwrap();
        assert_eq!(again.aa, report.aa);
        assert_eq!(again.id, report.id);
    }

    #[test]
    fn csv_writers_produce_expected_rows() {
        let world = small_world();
        let model_cfg = ModelConfig {
            k: world.k(),
            d: world.d(),
            hidden: 32,
            n_blocks: 1,
            n_heads: 4,
            d_txt: 16,
            id_dim: world.config.id_dim,
            mlp_ratio: 2,
            t_max: 100,
        };
        let sched = make_schedule(model_cfg.t_max, 1e-4, 0.02).unwrap();
        let model = init_model::<f64>(&model_cfg, 5).unwrap();
        let (vocab, embedder) = text_stack(world.seed_used, world.n_attr(), model_cfg.d_txt);
        let cfg = EvalConfig {
            n_latents: 1,
            t_start: 60,
            n_steps: 3,
            composite_sizes: vec![2],
            ..EvalConfig::default()
        };
        let report = evaluate(&model, &world, &sched, &vocab, &embedder, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let cmp = dir.path().join("comparison.csv");
        write_comparison_csv(
            &cmp,
            &[("base".to_string(), report.clone()), ("variant".to_string(), report)],
        )
        .unwrap();
        let text = std::fs::read_to_string(&cmp).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("variant,aa,ad,id,dir,aa_min_2"));

        let curve = dir.path().join("improvement.csv");
        let mut with = MetricsReport::load(&dir.path().join("missing.json"));
        assert!(with.is_err());
        with = Ok(report_with_composite(0.8, 0.6));
        let without = report_with_composite(0.4, 0.3);
        write_improvement_csv(&curve, &with.unwrap(), &without).unwrap();
        let text = std::fs::read_to_string(&curve).unwrap();
        assert!(text.starts_with(
            "instruction_count,aa_improvement_rate,directional_improvement_rate"
        ));
        // (0.8 - 0.4) / 0.4 = 1.0 for aa, (0.6 - 0.3) / 0.3 = 1.0 for dir.
        assert!(text.contains("2,1.000000,1.000000"));
    }

    fn report_with_composite(aa_min: f64, dir: f64) -> MetricsReport {
        MetricsReport {
            n_latents: 1,
            n_single_edits: 0,
            aa: 0.0,
            ad: 0.0,
            id: 1.0,
            dir: 0.0,
            per_attr: vec![],
            composite: vec![CompositeMetrics { m: 2, aa_min, dir, id: 1.0 }],
            config: EvalConfig::default(),
        }
    }
}
