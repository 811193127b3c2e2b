//! Versioned JSON files for models, parameter boxes and certificate bundles.
//!
//! A bundle is a directory holding `manifest.json` and one `box_k{k}.json`
//! per ladder entry. Every file records the hash of the config that produced
//! it, and readers refuse files whose hash disagrees with the manifest.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::certifier::CertificateBundle;
use crate::error::{AgtError, Result};
use crate::nn::{Dense, Mlp, ModelShape};
use crate::parambox::{BoxOrigin, ParamBox};
use crate::trainer::Mode;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows × cols`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerFile>,
}

impl ModelFile {
    pub fn from_model(model: &Mlp) -> Self {
        Self {
            format: "agt-mlp".into(),
            version: FORMAT_VERSION,
            layers: model
                .layers()
                .iter()
                .map(|l| LayerFile {
                    rows: l.outputs(),
                    cols: l.inputs(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<Mlp> {
        check_format(&self.format, "agt-mlp", self.version)?;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if l.bias.len() != l.rows {
                    return Err(AgtError::dim(format!(
                        "bias has {} entries for {} rows",
                        l.bias.len(),
                        l.rows
                    )));
                }
                let weight = ndarray::Array2::from_shape_vec((l.rows, l.cols), l.weight.clone())
                    .map_err(|e| AgtError::dim(e.to_string()))?;
                Ok(Dense {
                    weight,
                    bias: l.bias.clone().into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }
}

fn check_format(found: &str, expected: &str, version: u32) -> Result<()> {
    if found != expected {
        return Err(AgtError::Usage(format!(
            "expected a {expected} file, found {found:?}"
        )));
    }
    if version != FORMAT_VERSION {
        return Err(AgtError::Usage(format!(
            "{expected} format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxFile {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub k: usize,
    pub mode: Mode,
    pub origin: Option<BoxOrigin>,
    pub nominal: ModelFile,
    pub lower: ModelFile,
    pub upper: ModelFile,
}

impl BoxFile {
    pub fn new(pbox: &ParamBox, k: usize, mode: Mode, config_hash: &str) -> Self {
        Self {
            format: "agt-parambox".into(),
            version: FORMAT_VERSION,
            config_hash: config_hash.into(),
            k,
            mode,
            origin: pbox.origin().cloned(),
            nominal: ModelFile::from_model(pbox.nominal()),
            lower: ModelFile::from_model(&pbox.lower()),
            upper: ModelFile::from_model(&pbox.upper()),
        }
    }

    pub fn to_box(&self) -> Result<ParamBox> {
        check_format(&self.format, "agt-parambox", self.version)?;
        let pbox = ParamBox::from_bounds(
            self.nominal.to_model()?,
            self.lower.to_model()?,
            self.upper.to_model()?,
        )?;
        Ok(match &self.origin {
            Some(o) => pbox.with_origin(o.clone()),
            None => pbox,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub version: u32,
    pub crate_version: String,
    pub config_hash: String,
    pub mode: Mode,
    pub beta: f64,
    pub kset: Vec<usize>,
    pub shape: ModelShape,
    pub shuffle_seed: Option<u64>,
    pub init_seed: Option<u64>,
    pub boxes: Vec<String>,
}

impl BundleManifest {
    pub fn check_hash(&self, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(AgtError::Usage(format!(
                "bundle was built from config {} but the current config hashes to {config_hash}",
                self.config_hash
            )));
        }
        Ok(())
    }
}

pub fn box_file_name(k: usize) -> String {
    format!("box_k{k}.json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn save_model(model: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), &ModelFile::from_model(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Mlp> {
    read_json::<ModelFile>(path.as_ref())?.to_model()
}

pub fn save_box(
    pbox: &ParamBox,
    k: usize,
    mode: Mode,
    config_hash: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_json(path.as_ref(), &BoxFile::new(pbox, k, mode, config_hash))
}

pub fn load_box(path: impl AsRef<Path>) -> Result<(ParamBox, BoxFile)> {
    let file: BoxFile = read_json(path.as_ref())?;
    Ok((file.to_box()?, file))
}

/// Writes `manifest.json` and one box file per ladder entry into `dir`.
pub fn write_bundle(
    dir: impl AsRef<Path>,
    bundle: &CertificateBundle,
    config_hash: &str,
) -> Result<BundleManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for (&k, b) in bundle.kset().iter().zip(bundle.boxes()) {
        let name = box_file_name(k);
        save_box(b, k, bundle.mode(), config_hash, dir.join(&name))?;
        names.push(name);
    }
    let origin = bundle.boxes()[0].origin();
    let manifest = BundleManifest {
        format: "agt-bundle".into(),
        version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config_hash.into(),
        mode: bundle.mode(),
        beta: bundle.beta(),
        kset: bundle.kset().to_vec(),
        shape: bundle.shape(),
        shuffle_seed: origin.map(|o| o.train.shuffle_seed),
        init_seed: origin.map(|o| o.train.init_seed),
        boxes: names,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<BundleManifest> {
    let manifest: BundleManifest = read_json(&dir.as_ref().join(MANIFEST_FILE))?;
    check_format(&manifest.format, "agt-bundle", manifest.version)?;
    Ok(manifest)
}

/// Reads a bundle written by [`write_bundle`], checking that every box file
/// agrees with the manifest.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<(CertificateBundle, BundleManifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.boxes.len() != manifest.kset.len() {
        return Err(AgtError::Usage(
            "manifest lists a different number of boxes than ladder entries".into(),
        ));
    }
    let mut boxes = Vec::with_capacity(manifest.boxes.len());
    for (name, &k) in manifest.boxes.iter().zip(&manifest.kset) {
        let (pbox, file) = load_box(dir.join(name))?;
        if file.config_hash != manifest.config_hash {
            return Err(AgtError::Usage(format!(
                "{name} was built from a different config than the manifest"
            )));
        }
        if file.k != k || file.mode != manifest.mode {
            return Err(AgtError::Usage(format!(
                "{name} does not match its manifest entry"
            )));
        }
        if pbox.shape() != manifest.shape {
            return Err(AgtError::dim(format!(
                "{name} has a different model shape than the manifest"
            )));
        }
        boxes.push(pbox);
    }
    let bundle =
        CertificateBundle::new(manifest.kset.clone(), boxes, manifest.mode, manifest.beta)?;
    Ok((bundle, manifest))
}
