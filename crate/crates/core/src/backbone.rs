//! Miniature SqueezeNet-style feature extractor.
//!
//! The stem is two 3x3 same-padded convolutions (standing in for a single
//! 7x7), followed by a stack of fire modules with 2x2 max pools after
//! selected stages. Fully convolutional; ReLU throughout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ConvKernel, ParamStore};
use crate::tape::{Tape, Val};

/// One fire module: a 1x1 squeeze followed by parallel 1x1 and 3x3 expands
/// whose outputs concatenate on the channel axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FireConfig {
    pub squeeze_1x1: usize,
    pub expand_1x1: usize,
    pub expand_3x3: usize,
}

impl FireConfig {
    pub fn new(squeeze_1x1: usize, expand_1x1: usize, expand_3x3: usize) -> Result<FireConfig> {
        if squeeze_1x1 == 0 || expand_1x1 == 0 || expand_3x3 == 0 {
            return Err(Error::Input("fire module channel counts must be >= 1".into()));
        }
        Ok(FireConfig { squeeze_1x1, expand_1x1, expand_3x3 })
    }

    pub fn out_channels(&self) -> usize {
        self.expand_1x1 + self.expand_3x3
    }
}

/// Backbone layout. Stage 0 is the stem; stage i >= 1 is fire module i-1.
/// `pool_after` lists the stages followed by a 2x2 max pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub fire_stack: Vec<FireConfig>,
    pub pool_after: Vec<usize>,
}

impl BackboneConfig {
    /// Desk-scale default: stem 3->16, pools after stages {0,1,2}, fire stack
    /// ending in 64 output channels. Keeps the structure of the full-width
    /// network at a size a CPU can train. The layer table of the original
    /// 512-channel backbone is not published, so this is a reconstruction.
    pub fn paper_mini() -> BackboneConfig {
        BackboneConfig {
            stem_channels: 16,
            fire_stack: vec![
                FireConfig { squeeze_1x1: 4, expand_1x1: 8, expand_3x3: 8 },
                FireConfig { squeeze_1x1: 8, expand_1x1: 16, expand_3x3: 16 },
                FireConfig { squeeze_1x1: 8, expand_1x1: 16, expand_3x3: 16 },
                FireConfig { squeeze_1x1: 8, expand_1x1: 32, expand_3x3: 32 },
            ],
            pool_after: vec![0, 1, 2],
        }
    }

    /// Full-width variant topping out at 512 channels, selectable for
    /// shape-level checks.
    pub fn paper_512() -> BackboneConfig {
        BackboneConfig {
            stem_channels: 64,
            fire_stack: vec![
                FireConfig { squeeze_1x1: 16, expand_1x1: 64, expand_3x3: 64 },
                FireConfig { squeeze_1x1: 32, expand_1x1: 128, expand_3x3: 128 },
                FireConfig { squeeze_1x1: 48, expand_1x1: 192, expand_3x3: 192 },
                FireConfig { squeeze_1x1: 64, expand_1x1: 256, expand_3x3: 256 },
            ],
            pool_after: vec![0, 1, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 {
            return Err(Error::Input("stem_channels must be >= 1".into()));
        }
        if self.fire_stack.is_empty() {
            return Err(Error::Input("backbone needs at least one fire module".into()));
        }
        for f in &self.fire_stack {
            FireConfig::new(f.squeeze_1x1, f.expand_1x1, f.expand_3x3)?;
        }
        let stages = self.fire_stack.len();
        for &p in &self.pool_after {
            if p > stages {
                return Err(Error::Input(format!(
                    "pool_after stage {p} out of range (stages 0..={stages})"
                )));
            }
        }
        let mut sorted = self.pool_after.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.pool_after.len() {
            return Err(Error::Input("pool_after contains duplicate stages".into()));
        }
        Ok(())
    }

    /// Channels of the final feature map.
    pub fn out_channels(&self) -> usize {
        self.fire_stack.last().map(|f| f.out_channels()).unwrap_or(0)
    }

    /// Number of 2x2 pools; the spatial reduction factor is 2^pool_count.
    pub fn pool_count(&self) -> usize {
        self.pool_after.len()
    }

    pub fn reduction(&self) -> usize {
        1 << self.pool_count()
    }
}

pub struct FireParams {
    pub squeeze: ConvKernel,
    pub expand1: ConvKernel,
    pub expand3: ConvKernel,
}

pub struct BackboneParams {
    pub stem1: ConvKernel,
    pub stem2: ConvKernel,
    pub fires: Vec<FireParams>,
}

impl BackboneParams {
    pub fn new(
        store: &mut ParamStore,
        cfg: &BackboneConfig,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<BackboneParams> {
        cfg.validate()?;
        // ReLU follows every conv here, so use the sqrt(6) gain: with the
        // plain 1/sqrt(fan_in) bound each conv+ReLU pair shrinks activations
        // by ~0.4x and ten layers starve the detection head of signal.
        const GAIN: f64 = 2.449489742783178; // sqrt(6)
        let stem1 = ConvKernel::with_gain(
            store,
            &format!("{prefix}/stem1"),
            cfg.stem_channels,
            3,
            3,
            3,
            true,
            GAIN,
            rng,
        )?;
        let stem2 = ConvKernel::with_gain(
            store,
            &format!("{prefix}/stem2"),
            cfg.stem_channels,
            cfg.stem_channels,
            3,
            3,
            true,
            GAIN,
            rng,
        )?;
        let mut fires = Vec::with_capacity(cfg.fire_stack.len());
        let mut in_c = cfg.stem_channels;
        for (i, f) in cfg.fire_stack.iter().enumerate() {
            let p = format!("{prefix}/fire{i}");
            fires.push(FireParams {
                squeeze: ConvKernel::with_gain(
                    store,
                    &format!("{p}/squeeze"),
                    f.squeeze_1x1,
                    in_c,
                    1,
                    1,
                    true,
                    GAIN,
                    rng,
                )?,
                expand1: ConvKernel::with_gain(
                    store,
                    &format!("{p}/expand1"),
                    f.expand_1x1,
                    f.squeeze_1x1,
                    1,
                    1,
                    true,
                    GAIN,
                    rng,
                )?,
                expand3: ConvKernel::with_gain(
                    store,
                    &format!("{p}/expand3"),
                    f.expand_3x3,
                    f.squeeze_1x1,
                    3,
                    3,
                    true,
                    GAIN,
                    rng,
                )?,
            });
            in_c = f.out_channels();
        }
        Ok(BackboneParams { stem1, stem2, fires })
    }
}

/// Squeeze + parallel expands + channel concat; spatial size unchanged.
pub fn fire_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    x: Val,
    fire: &FireParams,
) -> Result<Val> {
    let s = fire.squeeze.apply_same(tape, bound, x)?;
    let s = tape.relu(s)?;
    let e1 = fire.expand1.apply_same(tape, bound, s)?;
    let e1 = tape.relu(e1)?;
    let e3 = fire.expand3.apply_same(tape, bound, s)?;
    let e3 = tape.relu(e3)?;
    tape.concat_channels(&[e1, e3])
}

/// Full backbone: (n,3,h,w) image to (n, out_channels, h/2^P, w/2^P) features.
pub fn forward(
    tape: &mut Tape,
    bound: &BoundParams,
    image: Val,
    cfg: &BackboneConfig,
    params: &BackboneParams,
) -> Result<Val> {
    let shape = tape.value(image).shape();
    if shape.c != 3 {
        return Err(Error::Shape(format!("backbone expects 3 input channels, got {}", shape.c)));
    }
    let red = cfg.reduction();
    if shape.h % red != 0 || shape.w % red != 0 {
        return Err(Error::Shape(format!(
            "input {}x{} not divisible by total pooling factor {red}",
            shape.h, shape.w
        )));
    }
    let mut x = params.stem1.apply_same(tape, bound, image)?;
    x = tape.relu(x)?;
    x = params.stem2.apply_same(tape, bound, x)?;
    x = tape.relu(x)?;
    if cfg.pool_after.contains(&0) {
        x = tape.maxpool2(x)?;
    }
    for (i, fire) in params.fires.iter().enumerate() {
        x = fire_forward(tape, bound, x, fire)?;
        if cfg.pool_after.contains(&(i + 1)) {
            x = tape.maxpool2(x)?;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn paper_mini_out_channels_is_64() {
        let cfg = BackboneConfig::paper_mini();
        cfg.validate().unwrap();
        assert_eq!(cfg.out_channels(), 64);
        assert_eq!(cfg.pool_count(), 3);
    }

    #[test]
    fn paper_512_tops_out_at_512() {
        let cfg = BackboneConfig::paper_512();
        cfg.validate().unwrap();
        assert_eq!(cfg.out_channels(), 512);
    }

    #[test]
    fn fire_output_channels_add_up() {
        // cfg (s=2, e1=3, e3=5) on 1x4x8x8 -> 1x8x8x8
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(3);
        let fire = FireParams {
            squeeze: ConvKernel::new(&mut store, "f/s", 2, 4, 1, 1, true, &mut rng).unwrap(),
            expand1: ConvKernel::new(&mut store, "f/e1", 3, 2, 1, 1, true, &mut rng).unwrap(),
            expand3: ConvKernel::new(&mut store, "f/e3", 5, 2, 3, 3, true, &mut rng).unwrap(),
        };
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Tensor::filled(Shape::new(1, 4, 8, 8).unwrap(), 0.5));
        let y = fire_forward(&mut tape, &bound, x, &fire).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(1, 8, 8, 8).unwrap());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(3);
        let fire = FireParams {
            squeeze: ConvKernel::new(&mut store, "f/s", 2, 4, 1, 1, true, &mut rng).unwrap(),
            expand1: ConvKernel::new(&mut store, "f/e1", 3, 2, 1, 1, true, &mut rng).unwrap(),
            expand3: ConvKernel::new(&mut store, "f/e3", 5, 2, 3, 3, true, &mut rng).unwrap(),
        };
        for e in store.iter_mut() {
            e.value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Tensor::from_fn(Shape::new(1, 4, 8, 8).unwrap(), |_, c, h, w| {
            (c + h + w) as f64 * 0.1 - 0.5
        }));
        let y = fire_forward(&mut tape, &bound, x, &fire).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fire_matches_manual_composition() {
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(11);
        let fire = FireParams {
            squeeze: ConvKernel::new(&mut store, "f/s", 3, 2, 1, 1, true, &mut rng).unwrap(),
            expand1: ConvKernel::new(&mut store, "f/e1", 2, 3, 1, 1, true, &mut rng).unwrap(),
            expand3: ConvKernel::new(&mut store, "f/e3", 4, 3, 3, 3, true, &mut rng).unwrap(),
        };
        for e in store.iter_mut() {
            for v in e.value.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let input = Tensor::from_fn(Shape::new(1, 2, 5, 5).unwrap(), |_, _, _, _| {
            rng.random_range(-1.0..1.0)
        });

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(input.clone());
        let y = fire_forward(&mut tape, &bound, x, &fire).unwrap();

        // compose the three convolutions by hand on a second tape
        let mut tape2 = Tape::new();
        let bound2 = store.bind(&mut tape2);
        let x2 = tape2.leaf(input);
        let s = fire.squeeze.apply(&mut tape2, &bound2, x2, 1, 0).unwrap();
        let s = tape2.relu(s).unwrap();
        let e1 = fire.expand1.apply(&mut tape2, &bound2, s, 1, 0).unwrap();
        let e1 = tape2.relu(e1).unwrap();
        let e3 = fire.expand3.apply(&mut tape2, &bound2, s, 1, 1).unwrap();
        let e3 = tape2.relu(e3).unwrap();
        let y2 = tape2.concat_channels(&[e1, e3]).unwrap();

        assert_eq!(tape.value(y).data(), tape2.value(y2).data());
    }

    #[test]
    fn preset_shape_128_to_16() {
        let cfg = BackboneConfig::paper_mini();
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(5);
        let params = BackboneParams::new(&mut store, &cfg, "backbone", &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let img = tape.leaf(Tensor::filled(Shape::new(1, 3, 128, 128).unwrap(), 0.25));
        let y = forward(&mut tape, &bound, img, &cfg, &params).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(1, 64, 16, 16).unwrap());
    }

    #[test]
    fn stem_preserves_spatial_size_before_pool() {
        let cfg = BackboneConfig::paper_mini();
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(5);
        let params = BackboneParams::new(&mut store, &cfg, "backbone", &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let img = tape.leaf(Tensor::filled(Shape::new(1, 3, 128, 128).unwrap(), 0.25));
        let x = params.stem1.apply_same(&mut tape, &bound, img).unwrap();
        let x = params.stem2.apply_same(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(x).shape(), Shape::new(1, 16, 128, 128).unwrap());
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = BackboneConfig::paper_mini();
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(5);
        let params = BackboneParams::new(&mut store, &cfg, "backbone", &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let img = tape.leaf(Tensor::filled(Shape::new(1, 3, 36, 36).unwrap(), 0.25));
        assert!(forward(&mut tape, &bound, img, &cfg, &params).is_err());
    }

    #[test]
    fn batch_items_are_independent() {
        let cfg = BackboneConfig::paper_mini();
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(9);
        let params = BackboneParams::new(&mut store, &cfg, "backbone", &mut rng).unwrap();
        let a = Tensor::from_fn(Shape::new(1, 3, 32, 32).unwrap(), |_, _, _, _| {
            rng.random_range(0.0..1.0)
        });
        let b = Tensor::from_fn(Shape::new(1, 3, 32, 32).unwrap(), |_, _, _, _| {
            rng.random_range(0.0..1.0)
        });
        let mut batch = Tensor::zeros(Shape::new(2, 3, 32, 32).unwrap());
        let half = a.data().len();
        batch.data_mut()[..half].copy_from_slice(a.data());
        batch.data_mut()[half..].copy_from_slice(b.data());

        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = tape.leaf(input);
            let y = forward(&mut tape, &bound, x, &cfg, &params).unwrap();
            tape.value(y).data().to_vec()
        };
        let joint = run(batch);
        let solo_a = run(a);
        let solo_b = run(b);
        assert_eq!(&joint[..solo_a.len()], solo_a.as_slice());
        assert_eq!(&joint[solo_a.len()..], solo_b.as_slice());
    }

    #[test]
    fn gradients_reach_every_parameter() {
        // probabilistic: three seeds, every parameter picks up a nonzero grad
        for seed in [1u64, 2, 3] {
            let cfg = BackboneConfig::paper_mini();
            let mut store = ParamStore::new();
            let mut rng = StdRng::seed_from_u64(seed);
            let params = BackboneParams::new(&mut store, &cfg, "backbone", &mut rng).unwrap();
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let img = tape.leaf(Tensor::from_fn(Shape::new(1, 3, 16, 16).unwrap(), |_, _, _, _| {
                rng.random_range(0.0..1.0)
            }));
            let y = forward(&mut tape, &bound, img, &cfg, &params).unwrap();
            let sq = tape.hadamard(y, y).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss).unwrap();
            store.absorb_grads(&tape, &bound);
            for e in store.iter() {
                let g = e.value.grad().unwrap();
                assert!(
                    g.iter().any(|&v| v != 0.0),
                    "parameter {} has an all-zero gradient (seed {seed})",
                    e.name
                );
            }
        }
    }
}
