//! Encoder-decoder with skip connections and optional sinusoidal timestep
//! conditioning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel count of the first level; doubles at every level below.
    pub base_width: usize,
    /// Number of resolution levels (including the full-resolution one).
    pub levels: usize,
    /// Condition every level on a sinusoidal embedding of the timestep.
    pub time_embedding: bool,
    /// Start the final convolution at zero so the untrained net outputs 0.
    pub zero_init_output: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum UNetConfigError {
    #[error("levels must be at least 1")]
    NoLevels,
    #[error("base_width must be even and at least 2, got {0}")]
    BadWidth(usize),
    #[error("in_channels and out_channels must be positive")]
    NoChannels,
    #[error("input {height}x{width} is not divisible by {multiple}")]
    Indivisible {
        height: usize,
        width: usize,
        multiple: usize,
    },
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), UNetConfigError> {
        if self.levels == 0 {
            return Err(UNetConfigError::NoLevels);
        }
        if self.base_width < 2 || self.base_width % 2 != 0 {
            return Err(UNetConfigError::BadWidth(self.base_width));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(UNetConfigError::NoChannels);
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this value.
    pub fn input_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_extent(&self, height: usize, width: usize) -> Result<(), UNetConfigError> {
        let multiple = self.input_multiple();
        if height % multiple != 0 || width % multiple != 0 || height == 0 || width == 0 {
            return Err(UNetConfigError::Indivisible {
                height,
                width,
                multiple,
            });
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    fn embed_width(&self) -> usize {
        4 * self.base_width
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    first: Conv,
    second: Conv,
    time: Option<Dense>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
    time_mlp: Option<(Dense, Dense)>,
    stem: Conv,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    head: Conv,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Conv {
        let std = if zero {
            0.0
        } else {
            (2.0 / (cin * k * k) as f64).sqrt()
        };
        let w = Tensor::randn(&[cout, cin, k, k], std, &mut self.rng);
        Conv {
            w: self.store.add(format!("{name}.weight"), w),
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn dense(&mut self, name: &str, cin: usize, cout: usize) -> Dense {
        let std = (2.0 / cin as f64).sqrt();
        let w = Tensor::randn(&[cout, cin], std, &mut self.rng);
        Dense {
            w: self.store.add(format!("{name}.weight"), w),
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, embed: Option<usize>) -> Block {
        Block {
            first: self.conv(&format!("{name}.conv1"), cin, cout, 3, false),
            second: self.conv(&format!("{name}.conv2"), cout, cout, 3, false),
            time: embed.map(|e| self.dense(&format!("{name}.time"), e, cout)),
        }
    }
}

impl UNet {
    /// Build a network with weights drawn deterministically from `seed`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self, UNetConfigError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let embed = config.time_embedding.then(|| config.embed_width());
        let time_mlp = embed.map(|e| {
            (
                init.dense("time.fc1", config.base_width, e),
                init.dense("time.fc2", e, e),
            )
        });
        let stem = init.conv("stem", config.in_channels, config.width(0), 3, false);
        let mut encoder = Vec::with_capacity(config.levels);
        for level in 0..config.levels {
            let cin = if level == 0 {
                config.width(0)
            } else {
                config.width(level - 1)
            };
            encoder.push(init.block(&format!("enc{level}"), cin, config.width(level), embed));
        }
        let mut decoder = Vec::with_capacity(config.levels.saturating_sub(1));
        for level in 0..config.levels - 1 {
            let cin = config.width(level + 1) + config.width(level);
            decoder.push(init.block(&format!("dec{level}"), cin, config.width(level), embed));
        }
        let head = init.conv(
            "head",
            config.width(0),
            config.out_channels,
            3,
            config.zero_init_output,
        );
        Ok(Self {
            config,
            params,
            time_mlp,
            stem,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Record a forward pass on `graph`. `x` is `(n, in_channels, h, w)`;
    /// `timesteps` must hold `n` entries when the net is time-conditioned.
    pub fn forward(&self, graph: &mut Graph, x: Var, timesteps: Option<&[usize]>) -> Var {
        let (n, _, h, w) = graph.value(x).dims4();
        self.config
            .check_extent(h, w)
            .expect("input extent incompatible with network depth");

        let embedding = match (&self.time_mlp, timesteps) {
            (Some((fc1, fc2)), Some(ts)) => {
                assert_eq!(ts.len(), n, "one timestep per batch item");
                let sin = graph.input(sinusoidal_embedding(ts, self.config.base_width));
                let e = self.dense(graph, fc1, sin);
                let e = graph.silu(e);
                let e = self.dense(graph, fc2, e);
                Some(graph.silu(e))
            }
            (None, _) => None,
            (Some(_), None) => panic!("time-conditioned network called without timesteps"),
        };

        let mut h = self.conv(graph, &self.stem, x);
        let mut skips = Vec::with_capacity(self.config.levels);
        for (level, block) in self.encoder.iter().enumerate() {
            h = self.block(graph, block, h, embedding);
            skips.push(h);
            if level + 1 < self.config.levels {
                h = graph.avg_pool2(h);
            }
        }
        for (level, block) in self.decoder.iter().enumerate().rev() {
            let up = graph.upsample2(h);
            let joined = graph.concat(up, skips[level]);
            h = self.block(graph, block, joined, embedding);
        }
        self.conv(graph, &self.head, h)
    }

    /// Evaluate without keeping the tape.
    pub fn predict(&self, x: &Tensor, timesteps: Option<&[usize]>) -> Tensor {
        let mut graph = Graph::new();
        let input = graph.input(x.clone());
        let out = self.forward(&mut graph, input, timesteps);
        graph.into_value(out)
    }

    fn conv(&self, graph: &mut Graph, conv: &Conv, x: Var) -> Var {
        let w = graph.param(&self.params, conv.w);
        let b = graph.param(&self.params, conv.b);
        graph.conv2d(x, w, b)
    }

    fn dense(&self, graph: &mut Graph, dense: &Dense, x: Var) -> Var {
        let w = graph.param(&self.params, dense.w);
        let b = graph.param(&self.params, dense.b);
        graph.linear(x, w, b)
    }

    fn block(&self, graph: &mut Graph, block: &Block, x: Var, embedding: Option<Var>) -> Var {
        let mut h = self.conv(graph, &block.first, x);
        if let (Some(proj), Some(e)) = (&block.time, embedding) {
            let bias = self.dense(graph, proj, e);
            h = graph.add_channel(h, bias);
        }
        let h = graph.silu(h);
        let h = self.conv(graph, &block.second, h);
        graph.silu(h)
    }
}

/// Transformer-style sinusoidal features of integer timesteps, `(n, dim)`.
pub fn sinusoidal_embedding(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * freq).cos());
        }
    }
    Tensor::from_vec(&[timesteps.len(), dim], data).expect("embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(time: bool, zero: bool) -> UNetConfig {
        UNetConfig {
            in_channels: 2,
            out_channels: 2,
            base_width: 4,
            levels: 2,
            time_embedding: time,
            zero_init_output: zero,
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let net = UNet::new(tiny(true, false), 1).unwrap();
        let x = Tensor::full(&[3, 2, 8, 8], 0.5);
        let y = net.predict(&x, Some(&[1, 5, 9]));
        assert_eq!(y.shape(), [3, 2, 8, 8]);
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let net = UNet::new(tiny(false, true), 1).unwrap();
        let x = Tensor::full(&[1, 2, 8, 8], 0.7);
        assert!(net.predict(&x, None).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = UNet::new(tiny(true, false), 7).unwrap();
        let b = UNet::new(tiny(true, false), 7).unwrap();
        for ((_, ta), (_, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn default_scale_parameter_count() {
        let net = UNet::new(
            UNetConfig {
                in_channels: 1,
                out_channels: 1,
                base_width: 32,
                levels: 4,
                time_embedding: true,
                zero_init_output: true,
            },
            0,
        )
        .unwrap();
        let count = net.parameter_count();
        assert!((1_000_000..=3_000_000).contains(&count), "{count}");
    }

    #[test]
    fn rejects_bad_config_and_extent() {
        let mut cfg = tiny(false, false);
        cfg.levels = 0;
        assert_eq!(UNet::new(cfg, 0).unwrap_err(), UNetConfigError::NoLevels);
        let cfg = UNetConfig {
            levels: 3,
            ..tiny(false, false)
        };
        assert!(cfg.check_extent(10, 8).is_err());
        assert!(cfg.check_extent(12, 8).is_ok());
    }
}
