//! Flow prediction: an unsupervised registration network that maps a pair
//! of masks to a dense displacement field, and the backward warp that
//! applies such fields to images.

use cellsynth_nn::{warp_forward, Adam, AdamConfig, Graph, Tensor, UNet, UNetConfig, UNetConfigError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{check_divergence, TrainOptions, TrainReport};
use crate::raster::{FlowField, ImagePlane, LabelMask, RasterError};

pub const DEFAULT_LAMBDA_SMOOTH: f64 = 0.01;
/// Intensities used to render binary masks for the flow network.
pub const MASK_FOREGROUND: f64 = 1.0;
pub const MASK_BACKGROUND: f64 = -1.0;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("network cannot process {height}x{width} rasters: {reason}")]
    Extent {
        height: usize,
        width: usize,
        reason: String,
    },
    #[error("training set is empty")]
    NoData,
}

/// Backward bilinear warp `out(p) = image(p + flow(p))`, clamping samples
/// to the border.
pub fn warp(image: &ImagePlane, flow: &FlowField) -> Result<ImagePlane, FlowError> {
    image.ensure_size(flow.width(), flow.height())?;
    let out = warp_forward(&image.to_tensor(), &flow.to_tensor());
    Ok(ImagePlane::from_tensor(&out, 0, image.domain()))
}

/// Mean over the four forward-difference images (`∂x dx`, `∂y dx`,
/// `∂x dy`, `∂y dy`) of their mean squared value.
pub fn smoothness_penalty(flow: &FlowField) -> f64 {
    let mut graph = Graph::new();
    let f = graph.input(flow.to_tensor());
    let p = smoothness_term(&mut graph, f);
    graph.value(p).data()[0]
}

/// Both channels of an `(n, 2, h, w)` flow contribute equally per axis, so
/// averaging the two per-axis means equals the mean over the four
/// difference images.
fn smoothness_term(graph: &mut Graph, flow: Var) -> Var {
    let (_, _, h, w) = graph.value(flow).dims4();
    let mut terms = Vec::new();
    if w > 1 {
        let d = graph.diff_x(flow);
        terms.push(graph.mean_square(d));
    }
    if h > 1 {
        let d = graph.diff_y(flow);
        terms.push(graph.mean_square(d));
    }
    match terms.as_slice() {
        [] => {
            let z = graph.input(Tensor::scalar(0.0));
            graph.scale(z, 0.0)
        }
        [one] => graph.scale(*one, 0.5),
        [a, b] => {
            let s = graph.add(*a, *b);
            graph.scale(s, 0.5)
        }
        _ => unreachable!(),
    }
}

/// Registration network: `(source, target)` masks in, `(dx, dy)` out.
#[derive(Clone, Debug)]
pub struct FlowNetwork {
    net: UNet,
    steps_trained: u64,
}

impl FlowNetwork {
    /// The config is forced to two input and output channels, no time
    /// conditioning, and a zero output layer so the untrained network
    /// predicts the identity transform.
    pub fn new(base_width: usize, levels: usize, seed: u64) -> Result<Self, UNetConfigError> {
        Self::from_config(Self::config(base_width, levels), seed)
    }

    pub fn config(base_width: usize, levels: usize) -> UNetConfig {
        UNetConfig {
            in_channels: 2,
            out_channels: 2,
            base_width,
            levels,
            time_embedding: false,
            zero_init_output: true,
        }
    }

    pub fn from_config(config: UNetConfig, seed: u64) -> Result<Self, UNetConfigError> {
        Ok(Self {
            net: UNet::new(config, seed)?,
            steps_trained: 0,
        })
    }

    pub fn unet(&self) -> &UNet {
        &self.net
    }

    pub fn unet_mut(&mut self) -> &mut UNet {
        &mut self.net
    }

    pub fn steps_trained(&self) -> u64 {
        self.steps_trained
    }

    pub fn set_steps_trained(&mut self, steps: u64) {
        self.steps_trained = steps;
    }

    pub fn accepts(&self, height: usize, width: usize) -> bool {
        self.net.config().check_extent(height, width).is_ok()
    }

    fn check(&self, height: usize, width: usize) -> Result<(), FlowError> {
        self.net
            .config()
            .check_extent(height, width)
            .map_err(|e| FlowError::Extent {
                height,
                width,
                reason: e.to_string(),
            })
    }

    fn forward(&self, graph: &mut Graph, src: Var, tgt: Var) -> Var {
        let x = graph.concat(src, tgt);
        self.net.forward(graph, x, None)
    }
}

/// Render a mask to the image the flow network consumes.
pub fn mask_image(mask: &LabelMask) -> ImagePlane {
    mask.to_image(MASK_FOREGROUND, MASK_BACKGROUND)
}

/// `(n, 1, h, w)` tensor of rendered masks.
fn mask_batch(masks: &[&LabelMask]) -> Tensor {
    let planes: Vec<ImagePlane> = masks.iter().map(|m| mask_image(m)).collect();
    let refs: Vec<&ImagePlane> = planes.iter().collect();
    ImagePlane::stack(&refs)
}

/// Record `mse(warp(src, g(src, tgt)), tgt) + λ·smoothness(g)` on `graph`.
pub fn flow_loss(net: &FlowNetwork, graph: &mut Graph, src: &Tensor, tgt: &Tensor, lambda_smooth: f64) -> Var {
    let s = graph.input(src.clone());
    let t = graph.input(tgt.clone());
    let flow = net.forward(graph, s, t);
    registration_loss(graph, s, t, flow, lambda_smooth)
}

/// Loss of an explicit flow variable; exposed for gradient checks.
pub fn registration_loss(graph: &mut Graph, src: Var, tgt: Var, flow: Var, lambda_smooth: f64) -> Var {
    let moved = graph.warp(src, flow);
    let sim = graph.mse(moved, tgt);
    let smooth = smoothness_term(graph, flow);
    let smooth = graph.scale(smooth, lambda_smooth);
    graph.add(sim, smooth)
}

/// Train on `(source, target)` mask pairs.
pub fn train_fpm(
    pairs: &[(LabelMask, LabelMask)],
    net: &mut FlowNetwork,
    options: &TrainOptions,
    lambda_smooth: f64,
) -> Result<TrainReport, FlowError> {
    let mut report = TrainReport::default();
    if options.iters == 0 {
        return Ok(report);
    }
    let Some((first, _)) = pairs.first() else {
        return Err(FlowError::NoData);
    };
    let (w, h) = first.size();
    net.check(h, w)?;
    for (a, b) in pairs {
        a.ensure_size(w, h)?;
        b.ensure_size(w, h)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(options.lr), net.net.params());
    let batch = options.batch.max(1);
    for _ in 0..options.iters {
        let picks: Vec<usize> = (0..batch).map(|_| rng.random_range(0..pairs.len())).collect();
        let src: Vec<&LabelMask> = picks.iter().map(|&i| &pairs[i].0).collect();
        let tgt: Vec<&LabelMask> = picks.iter().map(|&i| &pairs[i].1).collect();
        let mut graph = Graph::new();
        let loss = flow_loss(net, &mut graph, &mask_batch(&src), &mask_batch(&tgt), lambda_smooth);
        report.losses.push(graph.value(loss).data()[0]);
        let grads = graph.backward(loss);
        adam.step(net.net.params_mut(), &grads);
        net.steps_trained += 1;
        if !report.diverged && check_divergence(&report.losses, options.iters) {
            log::warn!("flow training loss rising after {} iterations", report.losses.len());
            report.diverged = true;
        }
    }
    Ok(report)
}

/// Field aligning `src` to `tgt`: `warp(src, flow) ≈ tgt`.
pub fn predict_flow(net: &FlowNetwork, src: &LabelMask, tgt: &LabelMask) -> Result<FlowField, FlowError> {
    Ok(predict_flows(net, &[(src, tgt)])?.remove(0))
}

/// One field per pair, in order.
pub fn predict_flows(net: &FlowNetwork, pairs: &[(&LabelMask, &LabelMask)]) -> Result<Vec<FlowField>, FlowError> {
    let Some((first, _)) = pairs.first() else {
        return Ok(Vec::new());
    };
    let (w, h) = first.size();
    net.check(h, w)?;
    for (a, b) in pairs {
        a.ensure_size(w, h)?;
        b.ensure_size(w, h)?;
    }
    let src: Vec<&LabelMask> = pairs.iter().map(|p| p.0).collect();
    let tgt: Vec<&LabelMask> = pairs.iter().map(|p| p.1).collect();
    let mut graph = Graph::new();
    let s = graph.input(mask_batch(&src));
    let t = graph.input(mask_batch(&tgt));
    let out = net.forward(&mut graph, s, t);
    let out = graph.into_value(out);
    Ok((0..pairs.len()).map(|i| FlowField::from_tensor(&out, i)).collect())
}

/// Hyperparameters echoed into checkpoints and manifests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTraining {
    pub options: TrainOptions,
    pub lambda_smooth: f64,
}
