//! Descriptor and weights identity for Stable Diffusion 2.1.
//!
//! The 16 transformer blocks of the SD 2.1 UNet are numbered 1..=16 in
//! execution order (6 down, 1 mid, 9 up). Cross-attention is probed on
//! blocks 8–12 and self-attention on the last three (64×64 resolution).
//!
//! This crate ships no tensor runtime for the 865M-parameter UNet, so the
//! adapter only identifies the weights; compute entry points report
//! [`Error::Unavailable`].

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{
    Backbone, BackboneDescriptor, GraphProbes, LatentImage, NoisySample, PromptEmbeddings,
};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::scheduler::{BetaSchedule, NoiseScheduler};

pub fn sd21_descriptor(parameter_digest: String) -> BackboneDescriptor {
    BackboneDescriptor {
        name: "sd21".into(),
        cross_attention_layer_ids: (8..=12).collect(),
        self_attention_layer_ids: vec![14, 15, 16],
        latent_shape: (4, 64, 64),
        input_size: (512, 512),
        token_capacity: 77,
        embedding_dim: 1024,
        max_timestep: 999,
        parameter_digest,
    }
}

#[derive(Debug, Clone)]
pub struct Sd21Backbone {
    descriptor: BackboneDescriptor,
    scheduler: NoiseScheduler,
    weights: PathBuf,
}

fn file_digest(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl Sd21Backbone {
    pub fn open(weights: &Path) -> Result<Self> {
        let digest = file_digest(weights)?;
        Ok(Self {
            descriptor: sd21_descriptor(digest),
            scheduler: NoiseScheduler::new(BetaSchedule::ScaledLinear, 0.00085, 0.012, 1000),
            weights: weights.to_path_buf(),
        })
    }

    pub fn weights(&self) -> &Path {
        &self.weights
    }

    fn unavailable(&self, what: &str) -> Error {
        Error::Unavailable(format!(
            "sd21 {what} needs a GPU tensor runtime that is not built into this crate (weights: {})",
            self.weights.display()
        ))
    }
}

impl Backbone for Sd21Backbone {
    fn descriptor(&self) -> &BackboneDescriptor {
        &self.descriptor
    }

    fn scheduler(&self) -> &NoiseScheduler {
        &self.scheduler
    }

    fn encode_image(&self, image: &Image) -> Result<LatentImage> {
        let (h, w, _) = image.dim();
        if (h, w) != self.descriptor.input_size {
            return Err(Error::InputShape(format!(
                "sd21 expects 512×512 input, got {h}×{w}"
            )));
        }
        Err(self.unavailable("image encoding"))
    }

    fn encode_prompt(
        &self,
        _text: &str,
        class_names: &[String],
        _seed: u64,
    ) -> Result<PromptEmbeddings> {
        if class_names.len() > self.descriptor.token_capacity {
            return Err(Error::ClassCount {
                k: class_names.len(),
                capacity: self.descriptor.token_capacity,
            });
        }
        Err(self.unavailable("text encoding"))
    }

    fn forward(&self, _g: &mut Graph, _sample: &NoisySample, _prompt: Var) -> Result<GraphProbes> {
        Err(self.unavailable("denoising"))
    }

    fn parameter_digest(&self) -> String {
        file_digest(&self.weights).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_layout() {
        let d = sd21_descriptor("x".into());
        assert_eq!(d.cross_attention_layer_ids, vec![8, 9, 10, 11, 12]);
        assert_eq!(d.self_attention_layer_ids, vec![14, 15, 16]);
        assert_eq!(d.latent_shape, (4, 64, 64));
    }

    #[test]
    fn open_hashes_weights_and_refuses_compute() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        std::fs::write(&path, b"weights").unwrap();
        let bb = Sd21Backbone::open(&path).unwrap();
        assert_eq!(bb.descriptor().parameter_digest, bb.parameter_digest());
        let img = Image::zeros((512, 512, 3));
        assert!(matches!(bb.encode_image(&img), Err(Error::Unavailable(_))));
        assert!(matches!(
            bb.encode_image(&Image::zeros((64, 64, 3))),
            Err(Error::InputShape(_))
        ));
        assert!(Sd21Backbone::open(&dir.path().join("missing")).is_err());
    }
}
