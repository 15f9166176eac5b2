//! Backbone + MLP-head classifiers and everything needed to train them.

pub mod backbone;
pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod train;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use self::backbone::{
    random_init, BackboneRuntimes, FeatureExtractor, Trace, WeightProvider,
};
use self::layers::Linear;
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::registry::NUM_CLASSES;

pub use self::backbone::{descriptor, BackboneDescriptor, BackboneScale, Offline, DESK_BACKBONES};

/// Four `Linear → ReLU → Dropout` blocks followed by a final `Linear`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub hidden_dims: [usize; 4],
    pub dropout_rate: f64,
    pub output_dim: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            hidden_dims: [512, 256, 128, 64],
            dropout_rate: 0.1,
            output_dim: NUM_CLASSES,
        }
    }
}

impl HeadSpec {
    pub fn num_params(&self, input_dim: usize) -> usize {
        let mut dims = vec![input_dim];
        dims.extend(self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone_id: String,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub head: HeadSpec,
}

impl ModelSpec {
    /// Spec for a registered backbone with its native embedding width.
    pub fn for_backbone(backbone_id: &str, head: HeadSpec) -> Result<Self> {
        let d = descriptor(backbone_id)?;
        let spec = Self {
            backbone_id: backbone_id.to_string(),
            embed_dim: d.embed_dim,
            num_classes: NUM_CLASSES,
            head,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let d = descriptor(&self.backbone_id)?;
        if self.embed_dim == 0 || self.embed_dim != d.embed_dim {
            return Err(invalid(format!(
                "{}: embed_dim {} does not match backbone width {}",
                self.backbone_id, self.embed_dim, d.embed_dim
            )));
        }
        if self.num_classes != NUM_CLASSES || self.head.output_dim != self.num_classes {
            return Err(invalid(format!(
                "model must predict {NUM_CLASSES} classes, got {}/{}",
                self.num_classes, self.head.output_dim
            )));
        }
        if self.head.hidden_dims.contains(&0) {
            return Err(invalid("head hidden widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.head.dropout_rate) {
            return Err(invalid("head dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Backbone plus head parameters, from the registry's backbone size.
    pub fn total_param_count(&self) -> Result<usize> {
        let d = descriptor(&self.backbone_id)?;
        Ok(d.backbone_params + self.head.num_params(self.embed_dim))
    }
}

#[derive(Debug, Clone)]
struct Head {
    linears: Vec<Linear>,
    dropout: f64,
}

impl Head {
    fn new(spec: &HeadSpec, input_dim: usize, offset: usize) -> Self {
        let mut dims = vec![input_dim];
        dims.extend(spec.hidden_dims);
        dims.push(spec.output_dim);
        let mut offset = offset;
        let linears = dims
            .windows(2)
            .map(|w| {
                let l = Linear {
                    inputs: w[0],
                    outputs: w[1],
                    offset,
                };
                offset += l.num_params();
                l
            })
            .collect();
        Self {
            linears,
            dropout: spec.dropout_rate,
        }
    }

    fn num_params(&self) -> usize {
        self.linears.iter().map(Linear::num_params).sum()
    }
}

/// Per-sample saved state for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    backbone: Trace,
    /// Inputs to each head linear layer.
    head_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden block.
    pre_activations: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers (0 or 1/(1-p)) per hidden block.
    dropout_masks: Vec<Vec<f64>>,
}

/// Model structure. Weights are kept outside as one flat vector:
/// backbone parameters first, then the head.
#[derive(Clone)]
pub struct Network {
    spec: ModelSpec,
    backbone: Arc<dyn FeatureExtractor>,
    head: Head,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("num_params", &self.num_params())
            .finish()
    }
}

impl Network {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.backbone.num_params() + self.head.num_params()
    }

    fn backbone_len(&self) -> usize {
        self.backbone.num_params()
    }

    /// Forward pass for one image. `dropout_rng = None` is inference mode.
    pub fn forward(
        &self,
        params: &[f64],
        image: &Image,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<f64>, ForwardTrace) {
        let split = self.backbone_len();
        let (features, backbone) = self.backbone.forward(&params[..split], image);
        let mut trace = ForwardTrace {
            backbone,
            head_inputs: Vec::with_capacity(self.head.linears.len()),
            pre_activations: Vec::new(),
            dropout_masks: Vec::new(),
        };
        let keep = 1.0 - self.head.dropout;
        let mut rng = dropout_rng;
        let mut x = features;
        let last = self.head.linears.len() - 1;
        for (i, lin) in self.head.linears.iter().enumerate() {
            let z = lin.forward(params, &x);
            trace.head_inputs.push(x);
            if i == last {
                return (z, trace);
            }
            let mask: Vec<f64> = match rng.as_deref_mut() {
                Some(r) if self.head.dropout > 0.0 => (0..z.len())
                    .map(|_| if r.random_bool(keep) { 1.0 / keep } else { 0.0 })
                    .collect(),
                _ => vec![1.0; z.len()],
            };
            x = z.iter().zip(&mask).map(|(&v, &m)| v.max(0.0) * m).collect();
            trace.pre_activations.push(z);
            trace.dropout_masks.push(mask);
        }
        unreachable!("head has a final layer")
    }

    pub fn backward(&self, params: &[f64], trace: &ForwardTrace, d_logits: &[f64], grad: &mut [f64]) {
        let split = self.backbone_len();
        let mut dy = d_logits.to_vec();
        for (i, lin) in self.head.linears.iter().enumerate().rev() {
            let dx = lin.backward(params, &trace.head_inputs[i], &dy, grad);
            if i == 0 {
                dy = dx;
                break;
            }
            let pre = &trace.pre_activations[i - 1];
            let mask = &trace.dropout_masks[i - 1];
            dy = dx
                .iter()
                .zip(pre)
                .zip(mask)
                .map(|((&g, &z), &m)| if z > 0.0 { g * m } else { 0.0 })
                .collect();
        }
        self.backbone
            .backward(&params[..split], &trace.backbone, &dy, &mut grad[..split]);
    }

    /// Inference-mode logits for one image.
    pub fn logits(&self, params: &[f64], image: &Image) -> Vec<f64> {
        self.forward(params, image, None).0
    }
}

/// A network together with the weights it runs with.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: Network,
    pub weights: Vec<f64>,
}

impl Model {
    /// `B` images to a `B×13` logit matrix, inference mode.
    pub fn forward_batch(&self, images: &[Image]) -> Vec<Vec<f64>> {
        images
            .iter()
            .map(|img| self.network.logits(&self.weights, img))
            .collect()
    }
}

/// Decodes little-endian `f64` backbone weights from a fetched blob.
fn decode_weights(bytes: &[u8], expected: usize, backbone: &str) -> Result<Vec<f64>> {
    if bytes.len() != expected * 8 {
        return Err(Error::Shape(format!(
            "{backbone}: weight blob holds {} bytes, need {}",
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Builds the network and initial weights. Desk-scale backbones are randomly
/// initialized from `seed`; pretrained ones load through `provider` and a
/// registered runtime. The head is always freshly initialized from `seed`.
pub fn build_model_with(
    spec: &ModelSpec,
    runtimes: &BackboneRuntimes,
    provider: &dyn WeightProvider,
    seed: u64,
) -> Result<Model> {
    spec.validate()?;
    let d = descriptor(&spec.backbone_id)?;
    let (backbone, blob) = runtimes.resolve(&d, provider)?;
    if backbone.embed_dim() != spec.embed_dim {
        return Err(invalid(format!(
            "{}: runtime produces {} features, spec says {}",
            spec.backbone_id,
            backbone.embed_dim(),
            spec.embed_dim
        )));
    }
    let head = Head::new(&spec.head, spec.embed_dim, backbone.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = match &blob {
        Some(b) => decode_weights(&b.bytes, backbone.num_params(), &spec.backbone_id)?,
        None => random_init(backbone.as_ref(), &mut rng),
    };
    weights.resize(backbone.num_params() + head.num_params(), 0.0);
    let last = head.linears.len() - 1;
    for (i, lin) in head.linears.iter().enumerate() {
        lin.init(&mut weights, if i == last { 1.0 } else { 2.0 }, &mut rng);
    }
    Ok(Model {
        network: Network {
            spec: spec.clone(),
            backbone,
            head,
        },
        weights,
    })
}

/// [`build_model_with`] using no pretrained runtimes and no remote weights;
/// sufficient for every desk-scale backbone.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    build_model_with(spec, &BackboneRuntimes::default(), &Offline, seed)
}
