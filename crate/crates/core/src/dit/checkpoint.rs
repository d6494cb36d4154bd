use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DitConfig, ModelParams};
use crate::error::{bail, Result};
use crate::numkernel::{read_tensors, write_tensors, Tensor};

const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors.nkt";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: DitConfig,
    tensors: Vec<Entry>,
}

/// Writes `manifest.json` (config plus tensor names and shapes) and
/// `tensors.nkt` (the tensors, in manifest order) into `dir`.
pub fn save_checkpoint(dir: &Path, cfg: &DitConfig, params: &ModelParams<Tensor>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let named = params.named();
    let manifest = Manifest {
        config: cfg.clone(),
        tensors: named
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut m = BufWriter::new(File::create(dir.join(MANIFEST))?);
    serde_json::to_writer_pretty(&mut m, &manifest)?;
    m.flush()?;
    let mut w = BufWriter::new(File::create(dir.join(TENSORS))?);
    write_tensors(&mut w, named.iter().map(|(_, t)| *t))?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(DitConfig, ModelParams<Tensor>)> {
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST))?))?;
    let cfg = manifest.config;
    cfg.validate()?;
    let skeleton = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let expected = skeleton.named();
    if expected.len() != manifest.tensors.len() {
        bail!(
            Format,
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            expected.len()
        );
    }
    for ((name, t), e) in expected.iter().zip(&manifest.tensors) {
        if *name != e.name || t.shape() != e.shape.as_slice() {
            bail!(Format, "manifest entry {} {:?} does not match {name} {:?}", e.name, e.shape, t.shape());
        }
    }
    let mut r = BufReader::new(File::open(dir.join(TENSORS))?);
    let tensors = read_tensors(&mut r, expected.len())?;
    for (t, e) in tensors.iter().zip(&manifest.tensors) {
        if t.shape() != e.shape.as_slice() {
            bail!(Format, "tensor {} has shape {:?}, manifest says {:?}", e.name, t.shape(), e.shape);
        }
    }
    Ok((cfg, skeleton.from_leaves(tensors)))
}
