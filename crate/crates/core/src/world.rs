//! The frozen synthetic stand-in for the pretrained stack: a seeded generator
//! `G`, an oracle inversion `E`, an identity extractor `F`, ground-truth
//! orthonormal attribute directions, and an exact attribute probe.
//!
//! Everything is a pure function of the build seed; the world is immutable
//! after construction.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::io;
use crate::num::{self, Real};
use crate::seed::rng_from;

pub const WORLD_SCHEMA_VERSION: u32 = 1;

/// A point in the toy W+ space: a k x d real matrix.
pub type LatentCode<F> = Array2<F>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct WorldConfig {
    pub k: usize,
    pub d: usize,
    pub n_attr: usize,
    pub img_dim: usize,
    pub id_dim: usize,
    pub joint_dim: usize,
    /// Ground-truth edit magnitude beta.
    pub edit_magnitude: f64,
    pub prior_scale: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            k: 8,
            d: 32,
            n_attr: 6,
            img_dim: 256,
            id_dim: 64,
            joint_dim: 32,
            edit_magnitude: 1.0,
            prior_scale: 1.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.d < 4 {
            return Err(EditError::InvalidConfig(format!(
                "latent shape {}x{} too small (need k >= 2, d >= 4)",
                self.k, self.d
            )));
        }
        if self.n_attr < 3 {
            return Err(EditError::InvalidConfig(format!(
                "n_attr = {} (need at least 3)",
                self.n_attr
            )));
        }
        if self.n_attr > self.k * self.d / 4 {
            return Err(EditError::InvalidConfig(format!(
                "n_attr = {} exceeds capacity {} for a {}x{} latent",
                self.n_attr,
                self.k * self.d / 4,
                self.k,
                self.d
            )));
        }
        if self.img_dim == 0 || self.id_dim == 0 || self.joint_dim == 0 {
            return Err(EditError::InvalidConfig("zero-sized embedding dim".into()));
        }
        if self.joint_dim < self.n_attr {
            return Err(EditError::InvalidConfig(format!(
                "joint_dim = {} must be >= n_attr = {}",
                self.joint_dim, self.n_attr
            )));
        }
        // Negated form so NaN fails validation too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.edit_magnitude > 0.0) || !(self.prior_scale > 0.0) {
            return Err(EditError::InvalidConfig(
                "edit_magnitude and prior_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub yaw: f64,
    pub pitch: f64,
}

impl CameraPose {
    pub fn new(yaw: f64, pitch: f64) -> Result<Self> {
        if yaw.abs() > FRAC_PI_2 || pitch.abs() > FRAC_PI_2 {
            return Err(EditError::OutOfRange(format!(
                "camera pose ({yaw}, {pitch}) outside +/- pi/2"
            )));
        }
        Ok(Self { yaw, pitch })
    }

    /// Frontal pose: yaw = 0, pitch = 0.
    pub fn frontal() -> Self {
        Self { yaw: 0.0, pitch: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageVec<F>(pub Array1<F>);

/// Unit-norm identity feature.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding<F>(pub Array1<F>);

/// A rendered image together with its source latent, the oracle hook that
/// stands in for a learned inversion encoder.
#[derive(Debug, Clone)]
pub struct ImageRecord<F> {
    pub image: ImageVec<F>,
    pub source_latent: Option<LatentCode<F>>,
}

#[derive(Debug, Clone)]
pub struct World<F> {
    pub config: WorldConfig,
    /// Seed actually used after identity-separation retries.
    pub seed_used: u64,
    // Generator: x = tanh(z @ w1) @ w2 with z = [flat(w); yaw; pitch].
    gen_w1: Array2<F>,
    gen_w2: Array2<F>,
    id_proj: Array2<F>,
    directions: Vec<Array2<F>>,
    mu: Array2<F>,
    probe_std: Array1<F>,
    /// Joint image embedding: j = x @ joint_img.
    joint_img: Array2<F>,
    /// Unit text-direction rows, one per attribute; negative sign negates.
    joint_txt: Array2<F>,
}

const SEPARATION_GATE: f64 = 0.2;
const MAX_SEED_RETRIES: u64 = 8;
const PROBE_SAMPLES: usize = 10_000;
const JOINT_FIT_SAMPLES: usize = 128;

pub fn build_world<F: Real>(config: &WorldConfig) -> Result<World<F>> {
    config.validate()?;
    let mut last_gap = f64::NEG_INFINITY;
    for retry in 0..=MAX_SEED_RETRIES {
        let seed = config.seed.wrapping_add(retry);
        let world = build_with_seed::<F>(config, seed)?;
        let gap = identity_separation_gap(&world, 200, seed ^ 0x5eed);
        if gap >= SEPARATION_GATE {
            return Ok(world);
        }
        last_gap = gap;
    }
    Err(EditError::Degenerate(format!(
        "identity separation gate not met after {MAX_SEED_RETRIES} retries (last gap {last_gap:.3})"
    )))
}

fn build_with_seed<F: Real>(config: &WorldConfig, seed: u64) -> Result<World<F>> {
    let WorldConfig {
        k,
        d,
        n_attr,
        img_dim,
        id_dim,
        joint_dim,
        ..
    } = *config;
    let hidden = 4 * img_dim;
    let fan_in = k * d + 2;

    let mut rng = rng_from(seed);
    let gen_w1 = num::normal_mat::<f64, _>(&mut rng, fan_in, hidden, (2.0 / fan_in as f64).sqrt());
    let gen_w2 = num::normal_mat::<f64, _>(&mut rng, hidden, img_dim, (2.0 / hidden as f64).sqrt());
    let id_proj = num::normal_mat::<f64, _>(&mut rng, img_dim, id_dim, (1.0 / img_dim as f64).sqrt());
    let mu = num::normal_mat::<f64, _>(&mut rng, k, d, 1.0);

    let directions = orthonormal_directions(&mut rng, n_attr, k, d)?;
    let joint_txt = orthonormal_rows(&mut rng, n_attr, joint_dim)?;

    let mut world = World {
        config: config.clone(),
        seed_used: seed,
        gen_w1: gen_w1.mapv(F::from_f64),
        gen_w2: gen_w2.mapv(F::from_f64),
        id_proj: id_proj.mapv(F::from_f64),
        directions: directions.iter().map(|m| m.mapv(F::from_f64)).collect(),
        mu: mu.mapv(F::from_f64),
        probe_std: Array1::from_elem(n_attr, F::one()),
        joint_img: Array2::zeros((img_dim, joint_dim)),
        joint_txt: joint_txt.mapv(F::from_f64),
    };

    // Probe std over 10k prior samples, the fixed normalizer for AA/AD.
    let mut probe_rng = rng_from(seed ^ 0x9e3779b97f4a7c15);
    let mut sums = vec![0.0f64; n_attr];
    let mut sqsums = vec![0.0f64; n_attr];
    for _ in 0..PROBE_SAMPLES {
        let w = world.sample_prior_with(&mut probe_rng);
        let logits = world.attribute_logits(&w)?;
        for (a, &l) in logits.iter().enumerate() {
            let l = l.to_f64();
            sums[a] += l;
            sqsums[a] += l * l;
        }
    }
    let n = PROBE_SAMPLES as f64;
    let probe_std: Vec<f64> = (0..n_attr)
        .map(|a| {
            let mean = sums[a] / n;
            (sqsums[a] / n - mean * mean).max(0.0).sqrt()
        })
        .collect();
    if probe_std.iter().any(|&s| s <= 1e-9) {
        return Err(EditError::Degenerate("probe std collapsed to zero".into()));
    }
    world.probe_std = Array1::from_iter(probe_std.into_iter().map(F::from_f64));

    world.joint_img = fit_joint_image_map(&world, seed ^ 0x1234_5678_9abc_def0)?;
    Ok(world)
}

/// Random matrices orthonormalized under the Frobenius inner product.
fn orthonormal_directions<R: Rng>(
    rng: &mut R,
    n: usize,
    k: usize,
    d: usize,
) -> Result<Vec<Array2<f64>>> {
    let mut out: Vec<Array2<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut cand = num::normal_mat::<f64, _>(rng, k, d, 1.0);
        for prev in &out {
            let proj = num::frob_dot(&cand, prev);
            cand = cand - prev.mapv(|v| v * proj);
        }
        let norm = num::frob_norm(&cand);
        if norm < 1e-8 {
            return Err(EditError::Degenerate(format!(
                "direction {i} linearly dependent; reduce n_attr"
            )));
        }
        out.push(cand.mapv(|v| v / norm));
    }
    Ok(out)
}

fn orthonormal_rows<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Result<Array2<f64>> {
    let mut rows: Vec<Array1<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut cand = num::normal_vec::<f64, _>(rng, dim, 1.0);
        for prev in &rows {
            let proj = cand.dot(prev);
            cand = cand - prev.mapv(|v| v * proj);
        }
        let norm = cand.dot(&cand).sqrt();
        if norm < 1e-8 {
            return Err(EditError::Degenerate(format!("joint text row {i} degenerate")));
        }
        rows.push(cand.mapv(|v| v / norm));
    }
    let mut out = Array2::zeros((n, dim));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r);
    }
    Ok(out)
}

/// Ridge least-squares fit of the image-to-joint map so that the image delta
/// of each ground-truth edit lands on that attribute's text direction.
fn fit_joint_image_map<F: Real>(world: &World<F>, seed: u64) -> Result<Array2<F>> {
    let cfg = &world.config;
    let img_dim = cfg.img_dim;
    let joint_dim = cfg.joint_dim;
    let beta = cfg.edit_magnitude;
    let mut rng = rng_from(seed);
    let frontal = CameraPose::frontal();

    let n_total = JOINT_FIT_SAMPLES * 2 * cfg.n_attr;
    let mut xtx = nalgebra::DMatrix::<f64>::zeros(img_dim, img_dim);
    let mut xtu = nalgebra::DMatrix::<f64>::zeros(img_dim, joint_dim);
    for attr in 0..cfg.n_attr {
        for &sign in &[1.0f64, -1.0] {
            for _ in 0..JOINT_FIT_SAMPLES {
                let w = world.sample_prior_with(&mut rng);
                let we = world.apply_edit(&w, attr, sign as i8, beta)?;
                let x0 = world.generate(&w, frontal)?;
                let x1 = world.generate(&we, frontal)?;
                let dx: Vec<f64> = x1
                    .0
                    .iter()
                    .zip(x0.0.iter())
                    .map(|(&a, &b)| a.to_f64() - b.to_f64())
                    .collect();
                for i in 0..img_dim {
                    for j in 0..img_dim {
                        xtx[(i, j)] += dx[i] * dx[j];
                    }
                    for j in 0..joint_dim {
                        xtu[(i, j)] += dx[i] * sign * world.joint_txt[[attr, j]].to_f64();
                    }
                }
            }
        }
    }
    let ridge = 1e-3 * xtx.trace() / img_dim as f64 + 1e-9;
    for i in 0..img_dim {
        xtx[(i, i)] += ridge;
    }
    let chol = nalgebra::Cholesky::new(xtx).ok_or_else(|| {
        EditError::Degenerate("joint-map normal equations not positive definite".into())
    })?;
    let solved = chol.solve(&xtu);
    let _ = n_total;
    let mut out = Array2::zeros((img_dim, joint_dim));
    for i in 0..img_dim {
        for j in 0..joint_dim {
            out[[i, j]] = F::from_f64(solved[(i, j)]);
        }
    }
    Ok(out)
}

fn identity_separation_gap<F: Real>(world: &World<F>, trials: usize, seed: u64) -> f64 {
    let mut rng = rng_from(seed);
    let mut same_acc = 0.0;
    let mut cross_acc = 0.0;
    let mut used = 0usize;
    for _ in 0..trials {
        let w = world.sample_prior_with(&mut rng);
        let w2 = world.sample_prior_with(&mut rng);
        let c1 = random_pose(&mut rng);
        let c2 = random_pose(&mut rng);
        let f = |w: &LatentCode<F>, c: CameraPose| -> Option<IdentityEmbedding<F>> {
            world
                .generate(w, c)
                .ok()
                .and_then(|x| world.extract_identity(&x).ok())
        };
        let (Some(a), Some(b), Some(c)) = (f(&w, c1), f(&w, c2), f(&w2, c1)) else {
            continue;
        };
        same_acc += num::cosine(&a.0, &b.0).to_f64();
        cross_acc += num::cosine(&a.0, &c.0).to_f64();
        used += 1;
    }
    if used == 0 {
        return f64::NEG_INFINITY;
    }
    (same_acc - cross_acc) / used as f64
}

fn random_pose<R: Rng>(rng: &mut R) -> CameraPose {
    CameraPose {
        yaw: rng.gen_range(-FRAC_PI_2..FRAC_PI_2),
        pitch: rng.gen_range(-FRAC_PI_2..FRAC_PI_2),
    }
}

impl<F: Real> World<F> {
    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn n_attr(&self) -> usize {
        self.config.n_attr
    }

    pub fn prior_mean(&self) -> &Array2<F> {
        &self.mu
    }

    pub fn direction(&self, attr: usize) -> Result<&Array2<F>> {
        self.directions
            .get(attr)
            .ok_or(EditError::UnknownAttribute(attr))
    }

    pub fn probe_std(&self, attr: usize) -> Result<F> {
        if attr >= self.config.n_attr {
            return Err(EditError::UnknownAttribute(attr));
        }
        Ok(self.probe_std[attr])
    }

    /// One latent from the prior N(mu, prior_scale^2 I).
    pub fn sample_prior_with<R: Rng>(&self, rng: &mut R) -> LatentCode<F> {
        let scale = self.config.prior_scale;
        let noise = num::normal_mat::<F, _>(rng, self.config.k, self.config.d, scale);
        &self.mu + &noise
    }

    fn check_latent_shape(&self, w: &LatentCode<F>) -> Result<()> {
        if w.dim() != (self.config.k, self.config.d) {
            return Err(EditError::ShapeMismatch {
                expected: format!("{}x{}", self.config.k, self.config.d),
                got: format!("{}x{}", w.dim().0, w.dim().1),
            });
        }
        Ok(())
    }

    /// Renders a latent at a camera pose: x = tanh([flat(w); yaw; pitch] @ W1) @ W2.
    pub fn generate(&self, w: &LatentCode<F>, pose: CameraPose) -> Result<ImageVec<F>> {
        self.check_latent_shape(w)?;
        let (x, _hidden) = self.generate_cached(w, pose);
        Ok(x)
    }

    fn generator_input(&self, w: &LatentCode<F>, pose: CameraPose) -> Array1<F> {
        let n = self.config.k * self.config.d;
        let mut z = Array1::zeros(n + 2);
        for (i, v) in w.iter().enumerate() {
            z[i] = *v;
        }
        z[n] = F::from_f64(pose.yaw);
        z[n + 1] = F::from_f64(pose.pitch);
        z
    }

    fn generate_cached(&self, w: &LatentCode<F>, pose: CameraPose) -> (ImageVec<F>, Array1<F>) {
        let z = self.generator_input(w, pose);
        let hidden = z.dot(&self.gen_w1).mapv(|v| v.tanh());
        let x = hidden.dot(&self.gen_w2);
        (ImageVec(x), hidden)
    }

    /// Oracle inversion: returns the latent stored with the record.
    pub fn invert(&self, record: &ImageRecord<F>) -> Result<LatentCode<F>> {
        let w = record.source_latent.as_ref().ok_or_else(|| {
            EditError::Degenerate("record carries no source latent; oracle inversion impossible".into())
        })?;
        self.check_latent_shape(w)?;
        Ok(w.clone())
    }

    pub fn record(&self, w: &LatentCode<F>, pose: CameraPose) -> Result<ImageRecord<F>> {
        Ok(ImageRecord {
            image: self.generate(w, pose)?,
            source_latent: Some(w.clone()),
        })
    }

    pub fn extract_identity(&self, x: &ImageVec<F>) -> Result<IdentityEmbedding<F>> {
        if x.0.len() != self.config.img_dim {
            return Err(EditError::ShapeMismatch {
                expected: format!("image of length {}", self.config.img_dim),
                got: format!("{}", x.0.len()),
            });
        }
        let p = x.0.dot(&self.id_proj);
        let norm = p.dot(&p).sqrt();
        if norm.to_f64() < 1e-12 {
            return Err(EditError::Degenerate(
                "identity projection is the zero vector".into(),
            ));
        }
        Ok(IdentityEmbedding(p.mapv(|v| v / norm)))
    }

    pub fn apply_edit(
        &self,
        w: &LatentCode<F>,
        attr: usize,
        sign: i8,
        magnitude: f64,
    ) -> Result<LatentCode<F>> {
        self.check_latent_shape(w)?;
        let dir = self.direction(attr)?;
        let s = F::from_f64(sign as f64 * magnitude);
        Ok(w + &dir.mapv(|v| v * s))
    }

    /// Oracle probe: l_a(w) = <w - mu, D_a>_F.
    pub fn attribute_logits(&self, w: &LatentCode<F>) -> Result<Array1<F>> {
        self.check_latent_shape(w)?;
        let centered = w - &self.mu;
        Ok(Array1::from_iter(
            self.directions.iter().map(|d| num::frob_dot(&centered, d)),
        ))
    }

    /// Joint-space embedding of an image, the toy CLIP image tower.
    pub fn joint_embed_image(&self, x: &ImageVec<F>) -> Result<Array1<F>> {
        if x.0.len() != self.config.img_dim {
            return Err(EditError::ShapeMismatch {
                expected: format!("image of length {}", self.config.img_dim),
                got: format!("{}", x.0.len()),
            });
        }
        Ok(x.0.dot(&self.joint_img))
    }

    /// Frozen unit text direction for (attr, sign) in the joint space.
    pub fn joint_text_direction(&self, attr: usize, sign: i8) -> Result<Array1<F>> {
        if attr >= self.config.n_attr {
            return Err(EditError::UnknownAttribute(attr));
        }
        let s = F::from_f64(sign as f64);
        Ok(self.joint_txt.row(attr).mapv(|v| v * s))
    }

    /// Value and latent-gradient of `1 - <target, F(G(w, c0))>` at the frontal
    /// pose. Used by the identity regularizer; the chain through tanh and the
    /// normalization is closed-form.
    pub fn identity_cosine_loss_grad(
        &self,
        w: &LatentCode<F>,
        target: &IdentityEmbedding<F>,
    ) -> Result<(F, Array2<F>)> {
        self.check_latent_shape(w)?;
        let (x, hidden) = self.generate_cached(w, CameraPose::frontal());
        let p = x.0.dot(&self.id_proj);
        let norm = p.dot(&p).sqrt();
        if norm.to_f64() < 1e-12 {
            return Err(EditError::Degenerate(
                "identity projection is the zero vector".into(),
            ));
        }
        let y = p.mapv(|v| v / norm);
        let loss = F::one() - target.0.dot(&y);

        // dL/dy = -target; through y = p/|p|: dL/dp = (dL/dy - y <y, dL/dy>)/|p|.
        let dy = target.0.mapv(|v| -v);
        let yd = y.dot(&dy);
        let dp = Array1::from_iter(y.iter().zip(dy.iter()).map(|(&yi, &di)| (di - yi * yd) / norm));
        // p = x @ id_proj
        let dx = self.id_proj.dot(&dp);
        // x = hidden @ w2
        let dhidden_post = self.gen_w2.dot(&dx);
        // hidden = tanh(pre)
        let dpre = Array1::from_iter(
            hidden
                .iter()
                .zip(dhidden_post.iter())
                .map(|(&h, &g)| g * (F::one() - h * h)),
        );
        // pre = z @ w1; latent part of z is flat(w).
        let dz = self.gen_w1.dot(&dpre);
        let mut dw = Array2::zeros((self.config.k, self.config.d));
        for (i, g) in dw.iter_mut().enumerate() {
            *g = dz[i];
        }
        Ok((loss, dw))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut checksums = BTreeMap::new();
        let blobs: Vec<(&str, Vec<f32>)> = vec![
            ("gen_w1", io::mat_to_f32(&self.gen_w1)),
            ("gen_w2", io::mat_to_f32(&self.gen_w2)),
            ("id_proj", io::mat_to_f32(&self.id_proj)),
            (
                "directions",
                self.directions
                    .iter()
                    .flat_map(|m| io::mat_to_f32(m))
                    .collect(),
            ),
            ("mu", io::mat_to_f32(&self.mu)),
            ("joint_img", io::mat_to_f32(&self.joint_img)),
            ("joint_txt", io::mat_to_f32(&self.joint_txt)),
        ];
        for (name, data) in &blobs {
            let path = dir.join(format!("{name}.bin"));
            io::write_blob(&path, data)?;
            checksums.insert(name.to_string(), io::sha256_file(&path)?);
        }
        let manifest = WorldManifest {
            schema_version: WORLD_SCHEMA_VERSION,
            config: self.config.clone(),
            seed_used: self.seed_used,
            probe_std: self.probe_std.iter().map(|&v| v.to_f64() as f32).collect(),
            checksums,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<World<F>> {
        let manifest: WorldManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.schema_version != WORLD_SCHEMA_VERSION {
            return Err(EditError::Incompatible(format!(
                "world schema version {} (expected {})",
                manifest.schema_version, WORLD_SCHEMA_VERSION
            )));
        }
        let cfg = &manifest.config;
        cfg.validate()?;
        let hidden = 4 * cfg.img_dim;
        let fan_in = cfg.k * cfg.d + 2;
        let read = |name: &str, len: usize| -> Result<Vec<f32>> {
            let path = dir.join(format!("{name}.bin"));
            let expected = manifest
                .checksums
                .get(name)
                .ok_or_else(|| EditError::Integrity(format!("manifest missing checksum for {name}")))?;
            io::verify_checksum(&path, expected)?;
            io::read_blob(&path, len)
        };
        let dir_flat = read("directions", cfg.n_attr * cfg.k * cfg.d)?;
        let directions = (0..cfg.n_attr)
            .map(|a| {
                io::mat_from_f32(
                    &dir_flat[a * cfg.k * cfg.d..(a + 1) * cfg.k * cfg.d],
                    cfg.k,
                    cfg.d,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(World {
            config: manifest.config.clone(),
            seed_used: manifest.seed_used,
            gen_w1: io::mat_from_f32(&read("gen_w1", fan_in * hidden)?, fan_in, hidden)?,
            gen_w2: io::mat_from_f32(&read("gen_w2", hidden * cfg.img_dim)?, hidden, cfg.img_dim)?,
            id_proj: io::mat_from_f32(&read("id_proj", cfg.img_dim * cfg.id_dim)?, cfg.img_dim, cfg.id_dim)?,
            directions,
            mu: io::mat_from_f32(&read("mu", cfg.k * cfg.d)?, cfg.k, cfg.d)?,
            probe_std: Array1::from_iter(manifest.probe_std.iter().map(|&v| F::from_f64(v as f64))),
            joint_img: io::mat_from_f32(
                &read("joint_img", cfg.img_dim * cfg.joint_dim)?,
                cfg.img_dim,
                cfg.joint_dim,
            )?,
            joint_txt: io::mat_from_f32(
                &read("joint_txt", cfg.n_attr * cfg.joint_dim)?,
                cfg.n_attr,
                cfg.joint_dim,
            )?,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WorldManifest {
    schema_version: u32,
    config: WorldConfig,
    seed_used: u64,
    probe_std: Vec<f32>,
    checksums: BTreeMap<String, String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_config() -> WorldConfig {
        WorldConfig {
            k: 4,
            d: 16,
            n_attr: 4,
            img_dim: 32,
            id_dim: 16,
            joint_dim: 8,
            seed: 11,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_config_builds_identical_worlds() {
        let a = build_world::<f32>(&small_config()).unwrap();
        let b = build_world::<f32>(&small_config()).unwrap();
        assert_eq!(a.gen_w1, b.gen_w1);
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.probe_std, b.probe_std);
        assert_eq!(a.seed_used, b.seed_used);
    }

    #[test]
    fn directions_are_orthonormal() {
        let w = build_world::<f64>(&small_config()).unwrap();
        for a in 0..w.n_attr() {
            for b in 0..w.n_attr() {
                let dot = num::frob_dot(w.direction(a).unwrap(), w.direction(b).unwrap());
                let expected = if a == b { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dot, expected, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn probe_std_near_unit_for_unit_prior() {
        let w = build_world::<f64>(&small_config()).unwrap();
        for a in 0..w.n_attr() {
            let s = w.probe_std(a).unwrap();
            assert!((s - 1.0).abs() < 0.05, "sigma[{a}] = {s}");
        }
    }

    #[test]
    fn capacity_overflow_rejected() {
        let mut cfg = small_config();
        cfg.n_attr = cfg.k * cfg.d / 4 + 1;
        assert!(build_world::<f32>(&cfg).is_err());
    }

    #[test]
    fn generate_is_deterministic_and_pose_sensitive() {
        let world = build_world::<f64>(&small_config()).unwrap();
        let mut rng = rng_from(3);
        let mut differs = 0;
        for _ in 0..100 {
            let w = world.sample_prior_with(&mut rng);
            let a = world.generate(&w, CameraPose::frontal()).unwrap();
            let b = world.generate(&w, CameraPose::frontal()).unwrap();
            assert_eq!(a.0, b.0);
            let c = world.generate(&w, CameraPose::new(0.5, 0.0).unwrap()).unwrap();
            if a.0 != c.0 {
                differs += 1;
            }
        }
        assert_eq!(differs, 100);
    }

    #[test]
    fn generate_finite_on_prior_samples() {
        let world = build_world::<f32>(&small_config()).unwrap();
        let mut rng = rng_from(4);
        for _ in 0..1000 {
            let w = world.sample_prior_with(&mut rng);
            let x = world.generate(&w, CameraPose::frontal()).unwrap();
            assert!(x.0.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn oracle_inversion_round_trip() {
        let world = build_world::<f64>(&small_config()).unwrap();
        let mut rng = rng_from(5);
        let w = world.sample_prior_with(&mut rng);
        let rec = world.record(&w, CameraPose::frontal()).unwrap();
        let back = world.invert(&rec).unwrap();
        assert_eq!(w, back);
        let x1 = world.generate(&back, CameraPose::new(0.3, -0.1).unwrap()).unwrap();
        let x2 = world.generate(&w, CameraPose::new(0.3, -0.1).unwrap()).unwrap();
        assert_eq!(x1.0, x2.0);

        let no_latent = ImageRecord {
            image: rec.image,
            source_latent: None,
        };
        assert!(world.invert(&no_latent).is_err());
    }

    #[test]
    fn identity_embedding_is_unit_norm() {
        let world = build_world::<f64>(&small_config()).unwrap();
        let mut rng = rng_from(6);
        let w = world.sample_prior_with(&mut rng);
        let x = world.generate(&w, CameraPose::frontal()).unwrap();
        let id = world.extract_identity(&x).unwrap();
        assert_abs_diff_eq!(id.0.dot(&id.0).sqrt(), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(num::cosine(&id.0, &id.0), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_image_rejected() {
        let world = build_world::<f64>(&small_config()).unwrap();
        let zero = ImageVec(Array1::zeros(world.config.img_dim));
        assert!(world.extract_identity(&zero).is_err());
    }

    #[test]
    fn identity_separation_holds() {
        let world = build_world::<f64>(&small_config()).unwrap();
        let gap = identity_separation_gap(&world, 200, 999);
        assert!(gap >= 0.2, "separation gap {gap}");
    }

    #[test]
    fn edit_probe_consistency() {
        let world = build_world::<f64>(&small_config()).unwrap();
        let mut rng = rng_from(7);
        let w = world.sample_prior_with(&mut rng);
        let beta = world.config.edit_magnitude;
        for attr in 0..world.n_attr() {
            for &sign in &[1i8, -1] {
                let we = world.apply_edit(&w, attr, sign, beta).unwrap();
                let before = world.attribute_logits(&w).unwrap();
                let after = world.attribute_logits(&we).unwrap();
                for b in 0..world.n_attr() {
                    let expected = if b == attr { sign as f64 * beta } else { 0.0 };
                    assert_abs_diff_eq!(after[b] - before[b], expected, epsilon = 1e-6);
                }
            }
        }
        // Zero magnitude leaves the latent unchanged.
        let same = world.apply_edit(&w, 0, 1, 0.0).unwrap();
        assert_eq!(same, w);
        assert!(world.apply_edit(&w, world.n_attr(), 1, 1.0).is_err());
    }

    #[test]
    fn logits_match_brute_force() {
        let world = build_world::<f64>(&small_config()).unwrap();
        let mut rng = rng_from(8);
        let zero_logits = world.attribute_logits(world.prior_mean()).unwrap();
        for l in zero_logits.iter() {
            assert_abs_diff_eq!(*l, 0.0, epsilon = 1e-9);
        }
        for _ in 0..100 {
            let w = world.sample_prior_with(&mut rng);
            let logits = world.attribute_logits(&w).unwrap();
            for a in 0..world.n_attr() {
                let mut acc = 0.0;
                let dir = world.direction(a).unwrap();
                for (i, v) in w.iter().enumerate() {
                    let (r, c) = (i / world.d(), i % world.d());
                    acc += (v - world.prior_mean()[[r, c]]) * dir[[r, c]];
                }
                assert_abs_diff_eq!(logits[a], acc, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn world_save_load_round_trip() {
        let world = build_world::<f32>(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        world.save(dir.path()).unwrap();
        let loaded = World::<f32>::load(dir.path()).unwrap();
        assert_eq!(world.gen_w1, loaded.gen_w1);
        assert_eq!(world.mu, loaded.mu);
        assert_eq!(world.probe_std, loaded.probe_std);
        // Save again: identical bytes.
        let dir2 = tempfile::tempdir().unwrap();
        loaded.save(dir2.path()).unwrap();
        for name in ["gen_w1", "mu", "directions"] {
            let a = std::fs::read(dir.path().join(format!("{name}.bin"))).unwrap();
            let b = std::fs::read(dir2.path().join(format!("{name}.bin"))).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn camera_pose_bounds() {
        assert!(CameraPose::new(2.0, 0.0).is_err());
        assert!(CameraPose::new(0.0, -2.0).is_err());
        assert!(CameraPose::new(1.0, 0.5).is_ok());
    }

    #[test]
    fn identity_loss_grad_matches_finite_differences() {
        let world = build_world::<f64>(&small_config()).unwrap();
        let mut rng = rng_from(21);
        let w = world.sample_prior_with(&mut rng);
        let target = world
            .extract_identity(&world.generate(&world.sample_prior_with(&mut rng), CameraPose::frontal()).unwrap())
            .unwrap();
        let (_, grad) = world.identity_cosine_loss_grad(&w, &target).unwrap();
        let eps = 1e-6;
        for &(i, j) in &[(0usize, 0usize), (1, 3), (3, 15), (2, 7)] {
            let mut wp = w.clone();
            wp[[i, j]] += eps;
            let mut wm = w.clone();
            wm[[i, j]] -= eps;
            let lp = world.identity_cosine_loss_grad(&wp, &target).unwrap().0;
            let lm = world.identity_cosine_loss_grad(&wm, &target).unwrap().0;
            let fd = (lp - lm) / (2.0 * eps);
            assert_abs_diff_eq!(grad[[i, j]], fd, epsilon = 1e-6);
        }
    }
}
