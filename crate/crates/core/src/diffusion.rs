//! Denoising diffusion: noise schedule, closed-form forward process,
//! denoiser training and truncated ancestral sampling.

use std::cell::Cell;

use cellsynth_nn::{Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor, UNet, UNetConfig, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{ImagePlane, LabelMask, RasterError, ValueDomain};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Domain(String),
    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("expected a {expected:?} image, got {actual:?}")]
    WrongDomain {
        expected: ValueDomain,
        actual: ValueDomain,
    },
    #[error("guidance needs distinct values in [-1, 1], got foreground {fg} and background {bg}")]
    Guidance { fg: f64, bg: f64 },
    #[error("training set is empty")]
    NoData,
}

/// Variance schedule `β_1..β_T` with `α_t = 1 - β_t` and
/// `ᾱ_t = α_1·…·α_t`. Timesteps are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Parameters of a linear schedule, as stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        build_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Linear `β` from `beta_start` to `beta_end` over `steps` steps.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::Domain("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::Domain(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::Domain("T must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::Domain(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1-ᾱ_t)·ε`.
pub fn forward_diffuse(
    x0: &ImagePlane,
    t: usize,
    eps: &ImagePlane,
    schedule: &NoiseSchedule,
) -> Result<ImagePlane, DiffusionError> {
    schedule.check(t)?;
    eps.ensure_size(x0.width(), x0.height())?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Ok(ImagePlane::new(x0.width(), x0.height(), x0.domain(), data)?)
}

/// Anything that maps a batch of noisy images `(n, 1, h, w)` and their
/// timesteps to a noise estimate of the same shape.
pub trait NoisePredictor {
    fn predict_noise(&self, x: &Tensor, timesteps: &[usize]) -> Tensor;

    /// Whether `(height, width)` rasters are accepted.
    fn accepts(&self, _height: usize, _width: usize) -> bool {
        true
    }
}

/// Predicts zero noise everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl NoisePredictor for ZeroNoise {
    fn predict_noise(&self, x: &Tensor, _timesteps: &[usize]) -> Tensor {
        Tensor::zeros(x.shape())
    }
}

/// Counts calls made to the wrapped predictor.
pub struct CountingPredictor<'a> {
    inner: &'a dyn NoisePredictor,
    calls: Cell<usize>,
}

impl<'a> CountingPredictor<'a> {
    pub fn new(inner: &'a dyn NoisePredictor) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl NoisePredictor for CountingPredictor<'_> {
    fn predict_noise(&self, x: &Tensor, timesteps: &[usize]) -> Tensor {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict_noise(x, timesteps)
    }

    fn accepts(&self, height: usize, width: usize) -> bool {
        self.inner.accepts(height, width)
    }
}

/// A model whose noise estimate can be recorded on a tape for training.
pub trait TrainableDenoiser {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward(&self, graph: &mut Graph, x: Var, timesteps: &[usize]) -> Var;
}

/// Time-conditioned U-Net noise estimator.
#[derive(Clone, Debug)]
pub struct DenoiserNetwork {
    net: UNet,
    steps_trained: u64,
}

impl DenoiserNetwork {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self, cellsynth_nn::UNetConfigError> {
        Ok(Self {
            net: UNet::new(config, seed)?,
            steps_trained: 0,
        })
    }

    /// Four levels, base width 32: roughly 1.9 M parameters.
    pub fn default_config() -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            base_width: 32,
            levels: 4,
            time_embedding: true,
            zero_init_output: true,
        }
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

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }
}

impl NoisePredictor for DenoiserNetwork {
    fn predict_noise(&self, x: &Tensor, timesteps: &[usize]) -> Tensor {
        self.net.predict(x, Some(timesteps))
    }

    fn accepts(&self, height: usize, width: usize) -> bool {
        self.net.config().check_extent(height, width).is_ok()
    }
}

impl TrainableDenoiser for DenoiserNetwork {
    fn params(&self) -> &ParamStore {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.net.params_mut()
    }

    fn forward(&self, graph: &mut Graph, x: Var, timesteps: &[usize]) -> Var {
        self.net.forward(graph, x, Some(timesteps))
    }
}

/// `ε̂ = a·x + b`, two scalars shared by all pixels and timesteps.
#[derive(Clone, Debug)]
pub struct LinearToyDenoiser {
    params: ParamStore,
    a: ParamId,
    b: ParamId,
}

impl LinearToyDenoiser {
    pub fn new(a: f64, b: f64) -> Self {
        let mut params = ParamStore::new();
        let a = params.add("a", Tensor::scalar(a));
        let b = params.add("b", Tensor::scalar(b));
        Self { params, a, b }
    }

    pub fn coefficients(&self) -> (f64, f64) {
        (self.params.get(self.a).data()[0], self.params.get(self.b).data()[0])
    }

    pub fn set_coefficients(&mut self, a: f64, b: f64) {
        self.params.get_mut(self.a).data_mut()[0] = a;
        self.params.get_mut(self.b).data_mut()[0] = b;
    }

    pub fn ids(&self) -> (ParamId, ParamId) {
        (self.a, self.b)
    }
}

impl TrainableDenoiser for LinearToyDenoiser {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(&self, graph: &mut Graph, x: Var, _timesteps: &[usize]) -> Var {
        let a = graph.param(&self.params, self.a);
        let b = graph.param(&self.params, self.b);
        let ax = graph.mul_scalar(x, a);
        graph.add_scalar(ax, b)
    }
}

impl NoisePredictor for LinearToyDenoiser {
    fn predict_noise(&self, x: &Tensor, _timesteps: &[usize]) -> Tensor {
        let (a, b) = self.coefficients();
        x.map(|v| a * v + b)
    }
}

/// Noisy inputs `x_t` for clean images `x0` (`(n, 1, h, w)`), per-item
/// timesteps and noise `eps` of the same shape.
pub fn noisy_batch(x0: &Tensor, timesteps: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Tensor {
    let n = x0.shape()[0];
    let per = x0.len() / n;
    let mut out = x0.clone();
    for (i, &t) in timesteps.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = i * per..(i + 1) * per;
        for (o, e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = a * *o + b * e;
        }
    }
    out
}

/// Record the denoising objective `mean((ε - ε̂(x_t, t))²)` on `graph`.
pub fn denoising_loss(
    net: &dyn TrainableDenoiser,
    graph: &mut Graph,
    x0: &Tensor,
    timesteps: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Var {
    let xt = graph.input(noisy_batch(x0, timesteps, eps, schedule));
    let target = graph.input(eps.clone());
    let pred = net.forward(graph, xt, timesteps);
    graph.mse(pred, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch: usize,
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of every iteration, in order.
    pub losses: Vec<f64>,
    /// Set when the moving average rose above its starting value.
    pub diverged: bool,
}

impl TrainReport {
    /// Mean of the first `n` losses.
    pub fn head_mean(&self, n: usize) -> f64 {
        let n = n.min(self.losses.len()).max(1);
        self.losses[..n].iter().sum::<f64>() / n as f64
    }

    /// Mean of the last `n` losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64
    }
}

const DIVERGENCE_WINDOW: usize = 100;

/// After the first tenth of training, flag the run if the trailing
/// 100-iteration mean exceeds the mean of the first window.
pub(crate) fn check_divergence(losses: &[f64], total_iters: usize) -> bool {
    let i = losses.len();
    if i < DIVERGENCE_WINDOW.min(total_iters) || i * 10 < total_iters {
        return false;
    }
    let w = DIVERGENCE_WINDOW.min(i);
    let initial = losses[..w].iter().sum::<f64>() / w as f64;
    let recent = losses[i - w..].iter().sum::<f64>() / w as f64;
    recent > initial || !recent.is_finite()
}

/// Train `net` on normalized crops, drawing items, timesteps and noise
/// from `options.seed`.
pub fn train(
    crops: &[ImagePlane],
    net: &mut dyn TrainableDenoiser,
    schedule: &NoiseSchedule,
    options: &TrainOptions,
) -> Result<TrainReport, DiffusionError> {
    let mut report = TrainReport::default();
    if options.iters == 0 {
        return Ok(report);
    }
    if crops.is_empty() {
        return Err(DiffusionError::NoData);
    }
    for c in crops {
        if c.domain() != ValueDomain::Normalized {
            return Err(DiffusionError::WrongDomain {
                expected: ValueDomain::Normalized,
                actual: c.domain(),
            });
        }
        c.ensure_size(crops[0].width(), crops[0].height())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(options.lr), net.params());
    let batch = options.batch.max(1);
    for _ in 0..options.iters {
        let picks: Vec<&ImagePlane> = (0..batch).map(|_| &crops[rng.random_range(0..crops.len())]).collect();
        let x0 = ImagePlane::stack(&picks);
        let timesteps: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let eps = Tensor::randn(x0.shape(), 1.0, &mut rng);
        let mut graph = Graph::new();
        let loss = denoising_loss(&*net, &mut graph, &x0, &timesteps, &eps, schedule);
        report.losses.push(graph.value(loss).data()[0]);
        let grads = graph.backward(loss);
        adam.step(net.params_mut(), &grads);
        if !report.diverged && check_divergence(&report.losses, options.iters) {
            log::warn!(
                "denoiser training loss rising after {} iterations",
                report.losses.len()
            );
            report.diverged = true;
        }
    }
    Ok(report)
}

/// Whether the reverse chain injects fresh noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseMode {
    /// Draw noise from a generator seeded with the given value.
    Stochastic(u64),
    /// Deterministic chain with every noise term set to zero.
    Suppressed,
}

struct NoiseSource(Option<ChaCha8Rng>);

impl NoiseSource {
    fn new(mode: NoiseMode) -> Self {
        match mode {
            NoiseMode::Stochastic(seed) => Self(Some(ChaCha8Rng::seed_from_u64(seed))),
            NoiseMode::Suppressed => Self(None),
        }
    }

    fn fill(&mut self, out: &mut [f64]) {
        match &mut self.0 {
            Some(rng) => out.iter_mut().for_each(|v| *v = rng.sample(StandardNormal)),
            None => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }
}

/// Reverse chain from `t_start` down to 1:
/// `x_{t-1} = (x_t - β_t/√(1-ᾱ_t)·ε̂)/√α_t + σ_t·z`, `σ_t² = β_t`, with no
/// noise added on the final step.
pub fn sample_from(
    x_start: &ImagePlane,
    t_start: usize,
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    noise: NoiseMode,
) -> Result<ImagePlane, DiffusionError> {
    schedule.check(t_start)?;
    if x_start.domain() != ValueDomain::Normalized {
        return Err(DiffusionError::WrongDomain {
            expected: ValueDomain::Normalized,
            actual: x_start.domain(),
        });
    }
    let mut source = NoiseSource::new(noise);
    let out = reverse_chain(x_start.to_tensor(), t_start, net, schedule, &mut source);
    Ok(ImagePlane::from_tensor(&out, 0, ValueDomain::Normalized))
}

fn reverse_chain(
    mut x: Tensor,
    t_start: usize,
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    source: &mut NoiseSource,
) -> Tensor {
    let n = x.shape()[0];
    let mut z = vec![0.0; x.len()];
    for t in (1..=t_start).rev() {
        let eps = net.predict_noise(&x, &vec![t; n]);
        let alpha = schedule.alpha(t);
        let beta = schedule.beta(t);
        let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let sigma = beta.sqrt();
        if t > 1 {
            source.fill(&mut z);
        }
        for (i, (v, e)) in x.data_mut().iter_mut().zip(eps.data()).enumerate() {
            *v = inv * (*v - coef * e);
            if t > 1 {
                *v += sigma * z[i];
            }
        }
    }
    x
}

/// Mask rendered as an image: foreground at the cell brightness,
/// background at the background level.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceImage(ImagePlane);

impl GuidanceImage {
    pub fn new(mask: &LabelMask, brightness: f64, background: f64) -> Result<Self, DiffusionError> {
        let ok = |v: f64| (-1.0..=1.0).contains(&v);
        if !(ok(brightness) && ok(background)) || brightness == background {
            return Err(DiffusionError::Guidance {
                fg: brightness,
                bg: background,
            });
        }
        Ok(Self(mask.to_image(brightness, background)))
    }

    pub fn image(&self) -> &ImagePlane {
        &self.0
    }
}

/// Jump the guidance image to step `t_steps` with fresh noise, then run
/// the reverse chain back to a clean image. `Suppressed` zeroes both the
/// forward noise and the reverse-chain noise.
pub fn guided_generate(
    guidance: &GuidanceImage,
    t_steps: usize,
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    noise: NoiseMode,
) -> Result<ImagePlane, DiffusionError> {
    refine(guidance.image(), t_steps, net, schedule, noise)
}

/// Noise `image` to step `t_steps` in closed form and denoise it again.
pub fn refine(
    image: &ImagePlane,
    t_steps: usize,
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    noise: NoiseMode,
) -> Result<ImagePlane, DiffusionError> {
    schedule.check(t_steps)?;
    let mut source = NoiseSource::new(noise);
    let mut eps = vec![0.0; image.data().len()];
    source.fill(&mut eps);
    let eps = ImagePlane::new(image.width(), image.height(), image.domain(), eps)?;
    let xt = forward_diffuse(image, t_steps, &eps, schedule)?;
    let out = reverse_chain(xt.to_tensor(), t_steps, net, schedule, &mut source);
    Ok(ImagePlane::from_tensor(&out, 0, ValueDomain::Normalized))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(v: f64) -> ImagePlane {
        ImagePlane::filled(4, 4, ValueDomain::Normalized, v)
    }

    #[test]
    fn cumulative_product_by_hand() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        for (got, want) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504, 0.3024]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(matches!(build_schedule(10, 0.0, 0.0), Err(DiffusionError::Domain(_))));
        assert!(build_schedule(0, 1e-4, 0.02).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn default_schedule_nearly_destroys_signal() {
        let s = ScheduleSpec::default().build().unwrap();
        assert!(s.alpha_bar(1000) < 1e-3);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!((s.beta(1) - 1e-4).abs() < 1e-15 && (s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn closed_form_forward_value() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let out = forward_diffuse(&plane(2.0), 1, &plane(1.0), &s).unwrap();
        let want = 0.5 * 2.0 + 0.75f64.sqrt();
        assert!(out.data().iter().all(|v| (v - want).abs() < 1e-12));
        assert!((want - 1.86603).abs() < 1e-5);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let s = NoiseSchedule::from_betas(vec![0.1; 3]).unwrap();
        let small = ImagePlane::filled(2, 2, ValueDomain::Normalized, 0.0);
        assert!(matches!(
            forward_diffuse(&plane(0.0), 1, &small, &s),
            Err(DiffusionError::Raster(_))
        ));
        assert!(forward_diffuse(&plane(0.0), 4, &plane(0.0), &s).is_err());
    }

    #[test]
    fn single_step_zero_noise_stub() {
        let s = NoiseSchedule::from_betas(vec![0.01; 5]).unwrap();
        let out = sample_from(&plane(0.3), 1, &ZeroNoise, &s, NoiseMode::Stochastic(1)).unwrap();
        let want = 0.3 / 0.99f64.sqrt();
        assert!(out.data().iter().all(|v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn evaluation_count_equals_start_step() {
        let s = NoiseSchedule::from_betas(vec![0.01; 50]).unwrap();
        let counter = CountingPredictor::new(&ZeroNoise);
        sample_from(&plane(0.0), 37, &counter, &s, NoiseMode::Stochastic(3)).unwrap();
        assert_eq!(counter.calls(), 37);
    }

    #[test]
    fn guidance_requires_distinct_levels() {
        let mask = LabelMask::empty(4, 4);
        assert!(GuidanceImage::new(&mask, 0.2, 0.2).is_err());
        assert!(GuidanceImage::new(&mask, 1.5, 0.2).is_err());
        assert!(GuidanceImage::new(&mask, 0.5, -0.5).is_ok());
    }

    #[test]
    fn divergence_detector() {
        let falling: Vec<f64> = (0..300).map(|i| 1.0 / (1.0 + i as f64)).collect();
        assert!(!check_divergence(&falling, 300));
        let rising: Vec<f64> = (0..300).map(|i| i as f64).collect();
        assert!(check_divergence(&rising, 300));
    }
}
