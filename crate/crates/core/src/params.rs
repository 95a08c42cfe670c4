//! Named learnable parameters shared by the model layers.
//!
//! A [`ParamStore`] owns every parameter tensor together with its persistent
//! gradient accumulator. For each training step the store is bound onto a
//! fresh tape (parameters become leaves); after backward the tape gradients
//! are absorbed back. Entry order is fixed at construction, which makes
//! optimizer updates and checkpoint serialization deterministic.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Val};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(usize);

pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Tape leaves for every parameter, in store order.
pub struct BoundParams {
    vals: Vec<Val>,
}

impl BoundParams {
    pub fn val(&self, id: ParamId) -> Val {
        self.vals[id.0]
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Register a parameter under a unique name.
    pub fn add(&mut self, name: &str, mut value: Tensor) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Param(format!("duplicate parameter name {name}")));
        }
        value.ensure_grad();
        self.entries.push(ParamEntry { name: name.to_string(), value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    /// Register every parameter value as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vals = self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect();
        BoundParams { vals }
    }

    /// Wrap caller-created leaves (one per parameter, in store order) as a
    /// binding. Lets gradient checks own the leaf tensors.
    pub fn bind_leaves(&self, leaves: &[Val]) -> Result<BoundParams> {
        if leaves.len() != self.entries.len() {
            return Err(Error::Param(format!(
                "expected {} leaves, got {}",
                self.entries.len(),
                leaves.len()
            )));
        }
        Ok(BoundParams { vals: leaves.to_vec() })
    }

    /// Add the tape gradients of the bound leaves into the persistent
    /// gradient accumulators.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for (entry, &val) in self.entries.iter_mut().zip(&bound.vals) {
            if let Some(g) = tape.grad(val) {
                entry.value.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.value.zero_grad();
        }
    }

    /// Global L2 norm over all gradient accumulators.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        for e in &self.entries {
            if let Some(g) = e.value.grad() {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        sq.sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            if let Some(g) = e.value.grad_mut() {
                for v in g {
                    *v *= factor;
                }
            }
        }
    }
}

/// A convolution kernel registered in a [`ParamStore`]: weights shaped
/// (out_channels, in_channels, kh, kw) plus an optional per-channel bias.
/// Kernel extents must be odd so same-padding convolutions preserve the
/// spatial size.
#[derive(Clone, Copy, Debug)]
pub struct ConvKernel {
    pub weights: ParamId,
    pub bias: Option<ParamId>,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvKernel {
    /// Create and register a kernel. Weights draw from the uniform range
    /// [-1/sqrt(fan_in), +1/sqrt(fan_in)] with fan_in = in_channels*kh*kw;
    /// biases start at zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<ConvKernel> {
        Self::with_gain(store, name, out_channels, in_channels, kh, kw, with_bias, 1.0, rng)
    }

    /// Like [`ConvKernel::new`] with the uniform bound widened to
    /// gain/sqrt(fan_in). ReLU stacks need gain sqrt(6) to keep activation
    /// variance from collapsing layer over layer.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        with_bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<ConvKernel> {
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::Param(format!("{name}: channel counts must be >= 1")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Param(format!("{name}: kernel extents must be odd, got {kh}x{kw}")));
        }
        let fan_in = (in_channels * kh * kw) as f64;
        let bound = gain / fan_in.sqrt();
        let wshape = Shape::new(out_channels, in_channels, kh, kw)?;
        let weights = Tensor::from_fn(wshape, |_, _, _, _| rng.random_range(-bound..bound));
        let weights = store.add(&format!("{name}/w"), weights)?;
        let bias = if with_bias {
            let b = Tensor::zeros(Shape::new(1, out_channels, 1, 1)?);
            Some(store.add(&format!("{name}/b"), b)?)
        } else {
            None
        };
        Ok(ConvKernel { weights, bias, out_channels, in_channels, kh, kw })
    }

    /// Record this kernel's convolution on the tape.
    pub fn apply(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Val,
        stride: usize,
        pad: usize,
    ) -> Result<Val> {
        tape.conv2d(x, bound.val(self.weights), self.bias.map(|b| bound.val(b)), stride, pad)
    }

    /// Same-padding stride-1 convolution (pad = (k-1)/2).
    pub fn apply_same(&self, tape: &mut Tape, bound: &BoundParams, x: Val) -> Result<Val> {
        self.apply(tape, bound, x, 1, (self.kh - 1) / 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(1.0)).unwrap();
        assert!(store.add("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn kernel_init_within_fan_in_bound() {
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(7);
        let k = ConvKernel::new(&mut store, "conv", 4, 2, 3, 3, true, &mut rng).unwrap();
        let bound = 1.0 / (2.0 * 9.0f64).sqrt();
        for &v in store.get(k.weights).data() {
            assert!(v.abs() <= bound);
        }
        assert!(store.get(k.bias.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn even_kernels_rejected() {
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(7);
        assert!(ConvKernel::new(&mut store, "bad", 1, 1, 2, 3, false, &mut rng).is_err());
    }

    #[test]
    fn absorb_accumulates_gradients() {
        let mut store = ParamStore::new();
        let id = store
            .add("p", Tensor::new(Shape::new(1, 1, 1, 2).unwrap(), vec![3.0, -1.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let v = bound.val(id);
        let sq = tape.hadamard(v, v).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        store.absorb_grads(&tape, &bound);
        assert_eq!(store.get(id).grad().unwrap(), &[6.0, -2.0]);
        // a second absorb adds on top
        store.absorb_grads(&tape, &bound);
        assert_eq!(store.get(id).grad().unwrap(), &[12.0, -4.0]);
    }
}
