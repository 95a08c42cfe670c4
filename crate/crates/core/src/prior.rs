//! Learnable reverse-Gaussian prior maps.
//!
//! Each prior is a 2-D Gaussian with freely learnable mean and per-axis
//! sigma, evaluated on normalized cell centers and divided by its analytic
//! peak so the map tops out at 1. The reverse map 1 - f encodes "look away
//! from the attended center": near zero at the mean, approaching one far
//! from it. Rendered maps concatenate onto feature channels.

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tape::{Tape, Val};
use crate::tensor::{Shape, Tensor};

/// Default lower bound for sigma after optimizer clamping.
pub const DEFAULT_SIGMA_MIN: f64 = 0.02;

/// Mean and sigma of one prior, in normalized [0,1] grid coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPriorParams {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl GaussianPriorParams {
    pub fn validate(&self, sigma_min: f64) -> Result<()> {
        if !(self.sigma_x >= sigma_min && self.sigma_y >= sigma_min) {
            return Err(Error::Param(format!(
                "sigma ({}, {}) below minimum {sigma_min}",
                self.sigma_x, self.sigma_y
            )));
        }
        Ok(())
    }

    /// Pack as a (1,4,1,1) tensor [mu_x, mu_y, sigma_x, sigma_y].
    pub fn pack(&self) -> Tensor {
        Tensor::new(
            Shape { n: 1, c: 4, h: 1, w: 1 },
            vec![self.mu_x, self.mu_y, self.sigma_x, self.sigma_y],
        )
        .expect("fixed shape")
    }

    pub fn unpack(t: &Tensor) -> Result<GaussianPriorParams> {
        if t.shape() != (Shape { n: 1, c: 4, h: 1, w: 1 }) {
            return Err(Error::Shape(format!("prior parameters must be (1,4,1,1), got {}", t.shape())));
        }
        let d = t.data();
        Ok(GaussianPriorParams { mu_x: d[0], mu_y: d[1], sigma_x: d[2], sigma_y: d[3] })
    }
}

/// Peak-normalized Gaussian sampled at cell centers ((j+0.5)/w, (i+0.5)/h);
/// shape (1,1,h,w), supremum 1 (exactly 1.0 when the mean sits on a cell
/// center).
pub fn gaussian_map(p: &GaussianPriorParams, h: usize, w: usize) -> Result<Tensor> {
    p.validate(DEFAULT_SIGMA_MIN)?;
    if h == 0 || w == 0 {
        return Err(Error::Input("map extents must be >= 1".into()));
    }
    let mut out = Tensor::zeros(Shape::new(1, 1, h, w)?);
    kernels::gaussian_map_forward(p.mu_x, p.mu_y, p.sigma_x, p.sigma_y, h, w, out.data_mut());
    Ok(out)
}

/// 1 minus the peak-normalized Gaussian; values in [0,1], zero at an aligned
/// peak cell, approaching one far from the mean.
pub fn reverse_gaussian_map(p: &GaussianPriorParams, h: usize, w: usize) -> Result<Tensor> {
    let mut m = gaussian_map(p, h, w)?;
    for v in m.data_mut() {
        *v = 1.0 - *v;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug)]
pub struct PriorBankConfig {
    /// Number of prior maps N.
    pub count: usize,
    /// Lower clamp for both sigmas.
    pub sigma_min: f64,
    /// Radius of the initialization ring around (0.5, 0.5).
    pub ring_radius: f64,
    /// Initial sigma for every prior.
    pub sigma_init: f64,
}

impl Default for PriorBankConfig {
    fn default() -> Self {
        PriorBankConfig { count: 16, sigma_min: DEFAULT_SIGMA_MIN, ring_radius: 0.3, sigma_init: 0.15 }
    }
}

/// N learnable priors registered in a parameter store. Means start spread on
/// a ring around the image center: objects of interest sit away from the
/// gazed drivable area, but everything stays free to move during training.
pub struct PriorBank {
    pub params: Vec<ParamId>,
    pub sigma_min: f64,
}

impl PriorBank {
    pub fn new(store: &mut ParamStore, cfg: &PriorBankConfig, prefix: &str) -> Result<PriorBank> {
        if cfg.count == 0 {
            return Err(Error::Input("prior count must be >= 1".into()));
        }
        if cfg.sigma_init < cfg.sigma_min {
            return Err(Error::Param(format!(
                "sigma_init {} below sigma_min {}",
                cfg.sigma_init, cfg.sigma_min
            )));
        }
        let mut params = Vec::with_capacity(cfg.count);
        for i in 0..cfg.count {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / cfg.count as f64;
            let p = GaussianPriorParams {
                mu_x: (0.5 + cfg.ring_radius * angle.cos()).clamp(0.0, 1.0),
                mu_y: (0.5 + cfg.ring_radius * angle.sin()).clamp(0.0, 1.0),
                sigma_x: cfg.sigma_init,
                sigma_y: cfg.sigma_init,
            };
            params.push(store.add(&format!("{prefix}/{i}"), p.pack())?);
        }
        Ok(PriorBank { params, sigma_min: cfg.sigma_min })
    }

    pub fn count(&self) -> usize {
        self.params.len()
    }

    /// Current parameter values of prior `i`.
    pub fn get(&self, store: &ParamStore, i: usize) -> GaussianPriorParams {
        GaussianPriorParams::unpack(store.get(self.params[i])).expect("prior tensors are (1,4,1,1)")
    }

    /// Re-impose the parameter constraints after an optimizer step:
    /// mu clamped to [0,1], sigma to at least sigma_min.
    pub fn clamp(&self, store: &mut ParamStore) {
        for &id in &self.params {
            let d = store.get_mut(id).data_mut();
            d[0] = d[0].clamp(0.0, 1.0);
            d[1] = d[1].clamp(0.0, 1.0);
            d[2] = d[2].max(self.sigma_min);
            d[3] = d[3].max(self.sigma_min);
        }
    }
}

/// Render every prior's reverse map at the feature resolution, broadcast over
/// the batch, and concatenate after the feature channels:
/// (n, W, h, w) -> (n, W + N, h, w).
pub fn inject_priors(
    tape: &mut Tape,
    bound: &BoundParams,
    features: Val,
    bank: &PriorBank,
) -> Result<Val> {
    let fs = tape.value(features).shape();
    let mut chans = Vec::with_capacity(1 + bank.count());
    chans.push(features);
    for &id in &bank.params {
        let g = tape.gaussian_map(bound.val(id), fs.h, fs.w, bank.sigma_min)?;
        let r = tape.affine(g, -1.0, 1.0)?;
        let tiled = if fs.n == 1 { r } else { tape.repeat_batch(r, fs.n)? };
        chans.push(tiled);
    }
    tape.concat_channels(&chans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn peak_cell_holds_the_maximum_and_aligned_peak_is_one() {
        // mean on the center cell of a 5x5 grid: cell centers are at
        // (i+0.5)/5, so (0.5, 0.5) is exactly a cell center.
        let p = GaussianPriorParams { mu_x: 0.5, mu_y: 0.5, sigma_x: 0.1, sigma_y: 0.2 };
        let m = gaussian_map(&p, 5, 5).unwrap();
        let center = m.at(0, 0, 2, 2);
        assert_eq!(center, 1.0);
        for &v in m.data() {
            assert!(v <= center);
        }
    }

    #[test]
    fn map_is_symmetric_about_the_mean() {
        let p = GaussianPriorParams { mu_x: 0.5, mu_y: 0.5, sigma_x: 0.13, sigma_y: 0.07 };
        let m = gaussian_map(&p, 5, 7).unwrap();
        for d in 1..=3usize {
            assert!((m.at(0, 0, 2, 3 - d) - m.at(0, 0, 2, 3 + d)).abs() < 1e-15);
        }
        for d in 1..=2usize {
            assert!((m.at(0, 0, 2 - d, 3) - m.at(0, 0, 2 + d, 3)).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_direct_density_evaluation() {
        // normalized literal density against the exp-form implementation
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..10 {
            let p = GaussianPriorParams {
                mu_x: rng.random_range(0.0..1.0),
                mu_y: rng.random_range(0.0..1.0),
                sigma_x: rng.random_range(0.05..0.5),
                sigma_y: rng.random_range(0.05..0.5),
            };
            let m = gaussian_map(&p, 5, 5).unwrap();
            let peak = 1.0 / (2.0 * std::f64::consts::PI * p.sigma_x * p.sigma_y);
            for i in 0..5 {
                for j in 0..5 {
                    let x = (j as f64 + 0.5) / 5.0;
                    let y = (i as f64 + 0.5) / 5.0;
                    let density = peak
                        * (-((x - p.mu_x).powi(2) / (2.0 * p.sigma_x * p.sigma_x)
                            + (y - p.mu_y).powi(2) / (2.0 * p.sigma_y * p.sigma_y)))
                            .exp();
                    assert!((m.at(0, 0, i, j) - density / peak).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reverse_map_is_zero_at_aligned_peak_and_one_in_far_tail() {
        let p = GaussianPriorParams { mu_x: 0.5, mu_y: 0.5, sigma_x: 0.05, sigma_y: 0.05 };
        let r = reverse_gaussian_map(&p, 5, 5).unwrap();
        assert_eq!(r.at(0, 0, 2, 2), 0.0);
        assert!(r.at(0, 0, 0, 0) >= 1.0 - 1e-6);
        for &v in r.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn sigma_below_minimum_is_rejected() {
        let p = GaussianPriorParams { mu_x: 0.5, mu_y: 0.5, sigma_x: 0.001, sigma_y: 0.1 };
        assert!(gaussian_map(&p, 4, 4).is_err());
    }

    #[test]
    fn injection_extends_channels_and_preserves_features() {
        let mut store = ParamStore::new();
        let bank = PriorBank::new(&mut store, &PriorBankConfig::default(), "prior").unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut rng = StdRng::seed_from_u64(4);
        let feats = Tensor::from_fn(Shape::new(2, 64, 4, 4).unwrap(), |_, _, _, _| {
            rng.random_range(-1.0..1.0)
        });
        let f = tape.leaf(feats.clone());
        let out = inject_priors(&mut tape, &bound, f, &bank).unwrap();
        let os = tape.value(out).shape();
        assert_eq!(os, Shape::new(2, 80, 4, 4).unwrap());
        // leading channels are the untouched features
        let plane = 4 * 4;
        for n in 0..2 {
            let got = &tape.value(out).data()[os.offset(n, 0, 0, 0)..os.offset(n, 0, 0, 0) + 64 * plane];
            let want = &feats.data()[feats.shape().offset(n, 0, 0, 0)..feats.shape().offset(n, 0, 0, 0) + 64 * plane];
            assert_eq!(got, want);
        }
        // appended channels are valid reverse maps
        for n in 0..2 {
            for c in 64..80 {
                for i in 0..4 {
                    for j in 0..4 {
                        let v = tape.value(out).at(n, c, i, j);
                        assert!((0.0..=1.0).contains(&v));
                    }
                }
            }
        }
    }

    #[test]
    fn paper_width_yields_528_channels() {
        let mut store = ParamStore::new();
        let bank = PriorBank::new(&mut store, &PriorBankConfig::default(), "prior").unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = tape.leaf(Tensor::filled(Shape::new(1, 512, 4, 4).unwrap(), 0.1));
        let out = inject_priors(&mut tape, &bound, f, &bank).unwrap();
        assert_eq!(tape.value(out).shape().c, 528);
    }

    #[test]
    fn clamp_restores_bounds() {
        let mut store = ParamStore::new();
        let bank = PriorBank::new(&mut store, &PriorBankConfig::default(), "prior").unwrap();
        {
            let d = store.get_mut(bank.params[0]).data_mut();
            d[0] = -0.3;
            d[1] = 1.7;
            d[2] = 0.001;
            d[3] = 0.5;
        }
        bank.clamp(&mut store);
        let p = bank.get(&store, 0);
        assert_eq!(p.mu_x, 0.0);
        assert_eq!(p.mu_y, 1.0);
        assert_eq!(p.sigma_x, DEFAULT_SIGMA_MIN);
        assert_eq!(p.sigma_y, 0.5);
    }

    #[test]
    fn ring_initialization_spreads_means() {
        let mut store = ParamStore::new();
        let bank = PriorBank::new(&mut store, &PriorBankConfig::default(), "prior").unwrap();
        for i in 0..bank.count() {
            let p = bank.get(&store, i);
            let r = ((p.mu_x - 0.5).powi(2) + (p.mu_y - 0.5).powi(2)).sqrt();
            assert!((r - 0.3).abs() < 1e-12);
            assert_eq!(p.sigma_x, 0.15);
        }
    }
}
