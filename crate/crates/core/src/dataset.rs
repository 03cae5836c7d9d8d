//! Triplet dataset synthesis: (original latent, instruction, edited latent)
//! drawn from the frozen world, persisted as little-endian f32 blobs plus a
//! JSON manifest and an instruction sidecar (one JSON object per line).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::io;
use crate::num::Real;
use crate::seed::{child_seed, rng_from};
use crate::textcond::{render_instruction, InstructionTemplateSet};
use crate::world::{LatentCode, World, WorldConfig};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TripletExample<F> {
    pub w_o: LatentCode<F>,
    pub w_e: LatentCode<F>,
    pub attr: usize,
    pub sign: i8,
    pub instruction: String,
}

#[derive(Debug, Clone)]
pub struct Dataset<F> {
    pub examples: Vec<TripletExample<F>>,
    pub world_seed_used: u64,
    pub world_config: WorldConfig,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    schema_version: u32,
    n_examples: usize,
    k: usize,
    d: usize,
    seed: u64,
    world_seed_used: u64,
    world_config: WorldConfig,
    checksums: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstructionRecord {
    index: usize,
    attr: usize,
    sign: i8,
    text: String,
}

/// One training triplet: prior latent, uniform (attribute, sign), exact edit
/// of magnitude beta, and a rendered paraphrase of the instruction.
pub fn sample_triplet<F: Real, R: Rng>(
    world: &World<F>,
    templates: &InstructionTemplateSet,
    rng: &mut R,
) -> Result<TripletExample<F>> {
    let attr = rng.gen_range(0..world.n_attr());
    let sign: i8 = if rng.gen_bool(0.5) { 1 } else { -1 };
    let w_o = world.sample_prior_with(rng);
    let w_e = world.apply_edit(&w_o, attr, sign, world.config.edit_magnitude)?;
    let instruction = render_instruction(templates, attr, sign, rng)?;
    Ok(TripletExample { w_o, w_e, attr, sign, instruction })
}

pub fn build_dataset<F: Real>(
    world: &World<F>,
    templates: &InstructionTemplateSet,
    n: usize,
    seed: u64,
) -> Result<Dataset<F>> {
    if templates.n_attr() != world.n_attr() {
        return Err(EditError::Incompatible(format!(
            "template set covers {} attributes, world has {}",
            templates.n_attr(),
            world.n_attr()
        )));
    }
    let mut rng = rng_from(child_seed(seed, "triplets"));
    let examples = (0..n)
        .map(|_| sample_triplet(world, templates, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        examples,
        world_seed_used: world.seed_used,
        world_config: world.config.clone(),
        seed,
    })
}

impl<F: Real> Dataset<F> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Leading/trailing split on the stored order; the halves share no example.
    pub fn split(&self, n_head: usize) -> Result<(Dataset<F>, Dataset<F>)> {
        if n_head > self.len() {
            return Err(EditError::OutOfRange(format!(
                "split at {n_head} exceeds dataset of {}",
                self.len()
            )));
        }
        let mk = |examples: Vec<TripletExample<F>>| Dataset {
            examples,
            world_seed_used: self.world_seed_used,
            world_config: self.world_config.clone(),
            seed: self.seed,
        };
        Ok((
            mk(self.examples[..n_head].to_vec()),
            mk(self.examples[n_head..].to_vec()),
        ))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (k, d) = (self.world_config.k, self.world_config.d);
        let mut w_o_flat = Vec::with_capacity(self.len() * k * d);
        let mut w_e_flat = Vec::with_capacity(self.len() * k * d);
        for ex in &self.examples {
            w_o_flat.extend(io::mat_to_f32(&ex.w_o));
            w_e_flat.extend(io::mat_to_f32(&ex.w_e));
        }
        let mut checksums = BTreeMap::new();
        for (name, data) in [("w_o", &w_o_flat), ("w_e", &w_e_flat)] {
            let path = dir.join(format!("{name}.bin"));
            io::write_blob(&path, data)?;
            checksums.insert(name.to_string(), io::sha256_file(&path)?);
        }
        let jsonl_path = dir.join("instructions.jsonl");
        {
            let mut f = fs::File::create(&jsonl_path)?;
            for (index, ex) in self.examples.iter().enumerate() {
                let rec = InstructionRecord {
                    index,
                    attr: ex.attr,
                    sign: ex.sign,
                    text: ex.instruction.clone(),
                };
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
        }
        checksums.insert("instructions".to_string(), io::sha256_file(&jsonl_path)?);
        let manifest = DatasetManifest {
            schema_version: DATASET_SCHEMA_VERSION,
            n_examples: self.len(),
            k,
            d,
            seed: self.seed,
            world_seed_used: self.world_seed_used,
            world_config: self.world_config.clone(),
            checksums,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    /// Loads and revalidates checksums; refuses datasets built against a
    /// different world.
    pub fn load(dir: &Path, world: &World<F>) -> Result<Dataset<F>> {
        let manifest: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.schema_version != DATASET_SCHEMA_VERSION {
            return Err(EditError::Incompatible(format!(
                "dataset schema version {} (expected {})",
                manifest.schema_version, DATASET_SCHEMA_VERSION
            )));
        }
        if manifest.world_seed_used != world.seed_used || manifest.world_config != world.config {
            return Err(EditError::Incompatible(
                "dataset was built against a different world".into(),
            ));
        }
        let (k, d, n) = (manifest.k, manifest.d, manifest.n_examples);
        let checked = |name: &str| -> Result<std::path::PathBuf> {
            let path = dir.join(match name {
                "instructions" => "instructions.jsonl".to_string(),
                other => format!("{other}.bin"),
            });
            let sum = manifest.checksums.get(name).ok_or_else(|| {
                EditError::Integrity(format!("manifest missing checksum for {name}"))
            })?;
            io::verify_checksum(&path, sum)?;
            Ok(path)
        };
        let w_o_flat = io::read_blob(&checked("w_o")?, n * k * d)?;
        let w_e_flat = io::read_blob(&checked("w_e")?, n * k * d)?;
        let jsonl = fs::File::open(checked("instructions")?)?;
        let mut records = Vec::with_capacity(n);
        for line in BufReader::new(jsonl).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<InstructionRecord>(&line)?);
        }
        if records.len() != n {
            return Err(EditError::Integrity(format!(
                "instructions.jsonl has {} records, manifest says {n}",
                records.len()
            )));
        }
        let mut examples = Vec::with_capacity(n);
        for (i, rec) in records.into_iter().enumerate() {
            if rec.index != i {
                return Err(EditError::Integrity(format!(
                    "instruction record {i} carries index {}",
                    rec.index
                )));
            }
            if rec.attr >= world.n_attr() || (rec.sign != 1 && rec.sign != -1) {
                return Err(EditError::Integrity(format!(
                    "record {i}: invalid attribute {} or sign {}",
                    rec.attr, rec.sign
                )));
            }
            examples.push(TripletExample {
                w_o: io::mat_from_f32(&w_o_flat[i * k * d..(i + 1) * k * d], k, d)?,
                w_e: io::mat_from_f32(&w_e_flat[i * k * d..(i + 1) * k * d], k, d)?,
                attr: rec.attr,
                sign: rec.sign,
                instruction: rec.text,
            });
        }
        Ok(Dataset {
            examples,
            world_seed_used: manifest.world_seed_used,
            world_config: manifest.world_config,
            seed: manifest.seed,
        })
    }
}
