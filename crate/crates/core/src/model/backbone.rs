//! Backbone registry, desk-scale feature extractors and the pretrained
//! weight provider.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::layers::{Layer, Tensor3};
use crate::error::{Error, Result};
use crate::image::{Image, MAX_INTENSITY};

/// Saved activations for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub activations: Vec<Tensor3>,
}

/// Maps an image to a feature vector, with a backward pass for fine-tuning.
pub trait FeatureExtractor: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn num_params(&self) -> usize;
    /// Fills `params` (length `num_params`) with a fresh initialization.
    fn init_params(&self, params: &mut [f64], rng: &mut dyn rand::RngCore);
    fn forward(&self, params: &[f64], image: &Image) -> (Vec<f64>, Trace);
    /// Accumulates parameter gradients for `d_features` into `grad`.
    fn backward(&self, params: &[f64], trace: &Trace, d_features: &[f64], grad: &mut [f64]);
}

/// Stack of layers ending in global pooling.
#[derive(Debug, Clone)]
pub struct SequentialBackbone {
    layers: Vec<Layer>,
    embed_dim: usize,
    num_params: usize,
}

impl SequentialBackbone {
    fn new(specs: Vec<Layer>, embed_dim: usize) -> Self {
        let mut offset = 0;
        let layers = specs
            .into_iter()
            .map(|l| match l {
                Layer::Conv2d {
                    in_c,
                    out_c,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    let layer = Layer::Conv2d {
                        in_c,
                        out_c,
                        kernel,
                        stride,
                        pad,
                        offset,
                    };
                    offset += layer.num_params();
                    layer
                }
                other => other,
            })
            .collect();
        Self {
            layers,
            embed_dim,
            num_params: offset,
        }
    }
}

fn conv(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Layer {
    Layer::Conv2d {
        in_c,
        out_c,
        kernel,
        stride,
        pad,
        offset: 0,
    }
}

/// Scales `[0, 255]` intensities to `[-1, 1]` in channel-major layout.
pub fn image_to_tensor(image: &Image) -> Tensor3 {
    let (h, w, c) = image.shape();
    let mut t = Tensor3::zeros(c, h, w);
    let half = f64::from(MAX_INTENSITY) / 2.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                t.data[(ch * h + y) * w + x] = f64::from(image.get(y, x, ch)) / half - 1.0;
            }
        }
    }
    t
}

impl FeatureExtractor for SequentialBackbone {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn num_params(&self) -> usize {
        self.num_params
    }

    fn init_params(&self, params: &mut [f64], rng: &mut dyn rand::RngCore) {
        for layer in &self.layers {
            layer.init(params, rng);
        }
    }

    fn forward(&self, params: &[f64], image: &Image) -> (Vec<f64>, Trace) {
        let mut x = image_to_tensor(image);
        let mut activations = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let y = layer.forward(params, &x);
            activations.push(x);
            x = y;
        }
        (x.data, Trace { activations })
    }

    fn backward(&self, params: &[f64], trace: &Trace, d_features: &[f64], grad: &mut [f64]) {
        let mut dy = Tensor3 {
            c: d_features.len(),
            h: 1,
            w: 1,
            data: d_features.to_vec(),
        };
        for (layer, x) in self.layers.iter().zip(&trace.activations).rev() {
            dy = layer.backward(params, x, &dy, grad);
        }
    }
}

/// Where a backbone comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneScale {
    /// Small randomly initialized extractor that runs on a laptop CPU.
    Desk,
    /// Pretrained network whose weights arrive through a [`WeightProvider`].
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneDescriptor {
    pub id: &'static str,
    pub scale: BackboneScale,
    /// Width of the feature vector handed to the classification head.
    pub embed_dim: usize,
    /// Parameter count of the backbone without any classification head.
    pub backbone_params: usize,
}

const PRETRAINED: [BackboneDescriptor; 3] = [
    BackboneDescriptor {
        id: "swinv2-tiny",
        scale: BackboneScale::Pretrained,
        embed_dim: 768,
        backbone_params: 27_500_000,
    },
    BackboneDescriptor {
        id: "convnextv2-tiny",
        scale: BackboneScale::Pretrained,
        embed_dim: 768,
        // 28.6M published total minus its 1000-way ImageNet head.
        backbone_params: 27_866_000,
    },
    BackboneDescriptor {
        id: "dinobloom-small",
        scale: BackboneScale::Pretrained,
        // ViT-S/14 class token concatenated with the mean patch token.
        embed_dim: 768,
        backbone_params: 22_056_000,
    },
];

pub const DESK_BACKBONES: [&str; 3] = ["tiny-conv", "tiny-patch", "tiny-pool"];

fn desk_backbone(id: &str) -> Option<SequentialBackbone> {
    Some(match id {
        "tiny-conv" => SequentialBackbone::new(
            vec![
                conv(3, 8, 3, 2, 1),
                Layer::Relu,
                conv(8, 16, 3, 2, 1),
                Layer::Relu,
                Layer::GlobalAvgPool,
            ],
            16,
        ),
        "tiny-patch" => SequentialBackbone::new(
            vec![conv(3, 16, 8, 8, 0), Layer::Relu, Layer::GlobalAvgPool],
            16,
        ),
        "tiny-pool" => SequentialBackbone::new(
            vec![
                Layer::AvgPool(4),
                conv(3, 12, 3, 1, 1),
                Layer::Relu,
                Layer::GlobalAvgPool,
            ],
            12,
        ),
        _ => return None,
    })
}

pub fn descriptor(id: &str) -> Result<BackboneDescriptor> {
    if let Some(b) = desk_backbone(id) {
        let id = DESK_BACKBONES.into_iter().find(|d| *d == id).expect("desk id");
        return Ok(BackboneDescriptor {
            id,
            scale: BackboneScale::Desk,
            embed_dim: b.embed_dim,
            backbone_params: b.num_params,
        });
    }
    PRETRAINED
        .iter()
        .find(|d| d.id == id)
        .cloned()
        .ok_or_else(|| Error::UnknownBackbone(id.to_string()))
}

/// Serialized pretrained weights plus their content digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightBlob {
    pub backbone_id: String,
    pub digest: String,
    pub bytes: Vec<u8>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Supplies pretrained backbone weights.
pub trait WeightProvider: Send + Sync {
    fn fetch(&self, backbone_id: &str) -> Result<WeightBlob>;
}

/// Provider with no remote; every fetch is a network failure.
#[derive(Debug, Clone, Copy, Default)]
pub struct Offline;

impl WeightProvider for Offline {
    fn fetch(&self, backbone_id: &str) -> Result<WeightBlob> {
        Err(Error::FetchNetwork {
            backbone: backbone_id.to_string(),
            reason: "no remote weight source configured".into(),
        })
    }
}

/// On-disk cache keyed by `(backbone_id, content digest)` in front of an
/// upstream provider. Layout: `<root>/<backbone_id>/<sha256>.bin`.
pub struct CachedProvider<P> {
    root: PathBuf,
    expected: BTreeMap<String, String>,
    upstream: P,
}

impl<P: WeightProvider> CachedProvider<P> {
    pub fn new(root: impl Into<PathBuf>, upstream: P) -> Self {
        Self {
            root: root.into(),
            expected: BTreeMap::new(),
            upstream,
        }
    }

    /// Pins the digest a backbone's weights must hash to.
    pub fn expect_digest(mut self, backbone_id: &str, sha256: &str) -> Self {
        self.expected
            .insert(backbone_id.to_string(), sha256.to_ascii_lowercase());
        self
    }

    fn verify(&self, blob: &WeightBlob) -> Result<()> {
        let actual = sha256_hex(&blob.bytes);
        let expected = self
            .expected
            .get(&blob.backbone_id)
            .cloned()
            .unwrap_or_else(|| blob.digest.clone());
        if actual != expected {
            return Err(Error::FetchChecksum {
                backbone: blob.backbone_id.clone(),
                expected,
                actual,
            });
        }
        Ok(())
    }
}

impl<P: WeightProvider> WeightProvider for CachedProvider<P> {
    fn fetch(&self, backbone_id: &str) -> Result<WeightBlob> {
        if let Some(digest) = self.expected.get(backbone_id) {
            let path = self.root.join(backbone_id).join(format!("{digest}.bin"));
            if let Ok(bytes) = std::fs::read(&path) {
                let blob = WeightBlob {
                    backbone_id: backbone_id.to_string(),
                    digest: digest.clone(),
                    bytes,
                };
                self.verify(&blob)?;
                return Ok(blob);
            }
        }
        let blob = self.upstream.fetch(backbone_id)?;
        self.verify(&blob)?;
        let dir = self.root.join(backbone_id);
        std::fs::create_dir_all(&dir)?;
        let tmp = dir.join(format!("{}.bin.tmp", blob.digest));
        std::fs::write(&tmp, &blob.bytes)?;
        std::fs::rename(&tmp, dir.join(format!("{}.bin", blob.digest)))?;
        Ok(blob)
    }
}

/// Builds an extractor for a pretrained backbone from its fetched weights.
pub type BackboneLoader = Arc<dyn Fn(&WeightBlob) -> Result<Arc<dyn FeatureExtractor>> + Send + Sync>;

/// Runtimes for pretrained backbones. Desk-scale backbones need no entry.
#[derive(Clone, Default)]
pub struct BackboneRuntimes {
    loaders: BTreeMap<String, BackboneLoader>,
}

impl BackboneRuntimes {
    pub fn register(&mut self, backbone_id: &str, loader: BackboneLoader) {
        self.loaders.insert(backbone_id.to_string(), loader);
    }

    pub(crate) fn resolve(
        &self,
        descriptor: &BackboneDescriptor,
        provider: &dyn WeightProvider,
    ) -> Result<(Arc<dyn FeatureExtractor>, Option<WeightBlob>)> {
        match descriptor.scale {
            BackboneScale::Desk => {
                let b = desk_backbone(descriptor.id).expect("desk descriptor");
                Ok((Arc::new(b), None))
            }
            BackboneScale::Pretrained => {
                let loader = self
                    .loaders
                    .get(descriptor.id)
                    .ok_or_else(|| Error::BackboneUnavailable(descriptor.id.to_string()))?;
                let blob = provider.fetch(descriptor.id)?;
                Ok((loader(&blob)?, Some(blob)))
            }
        }
    }
}

pub(crate) fn random_init(extractor: &dyn FeatureExtractor, rng: &mut impl Rng) -> Vec<f64> {
    let mut params = vec![0.0; extractor.num_params()];
    extractor.init_params(&mut params, rng);
    params
}
