//! Dense value networks with reverse-mode gradients and an Adam optimizer.
//!
//! A network optionally projects each input group to a shared latent width
//! with its own linear layer, concatenates the projections, then runs a ReLU
//! trunk (with inverted dropout after every hidden layer) ending in a single
//! scalar. All parameters live in one flat vector so optimizer state,
//! clipping, target copies and checkpoints work on plain arrays.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("input width {got} does not match network input width {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("upstream length {got} does not match batch size {expected}")]
    Upstream { expected: usize, got: usize },
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("non-finite gradient entry at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("parameter vector has {got} entries, spec needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// Widths of the separately projected input blocks, in input order.
    pub input_groups: Vec<usize>,
    /// Per-group projection width; `None` feeds the raw concatenation to the trunk.
    pub latent: Option<usize>,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl MlpSpec {
    /// Plain MLP on a single input block.
    pub fn plain(input: usize, hidden: Vec<usize>, dropout: f64) -> Self {
        MlpSpec { input_groups: vec![input], latent: None, hidden, dropout }
    }

    pub fn input_dim(&self) -> usize {
        self.input_groups.iter().sum()
    }

    fn validate(&self) -> Result<(), NnError> {
        if self.input_groups.is_empty() || self.input_groups.contains(&0) {
            return Err(NnError::Spec("input groups must be non-empty and positive".into()));
        }
        if self.latent == Some(0) || self.hidden.contains(&0) {
            return Err(NnError::Spec("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::Spec(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

impl Slot {
    fn w_range(&self) -> Range<usize> {
        self.w..self.w + self.fan_in * self.fan_out
    }
    fn b_range(&self) -> Range<usize> {
        self.b..self.b + self.fan_out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Inverted dropout with masks drawn from this seed.
    Train { mask_seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    spec: MlpSpec,
    projections: Vec<Slot>,
    layers: Vec<Slot>,
    pub params: Array1<T>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    input: Array2<T>,
    /// Input to each trunk layer (index 0 is the projected/concatenated input).
    acts: Vec<Array2<T>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<T>>,
    /// Dropout scale per hidden unit (0 or 1/(1-p)); absent in eval mode.
    masks: Vec<Option<Array2<T>>>,
}

/// Serializable form of an [`Mlp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpRecord<T> {
    pub spec: MlpSpec,
    pub params: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    /// Builds a network with all-zero parameters.
    pub fn zeros(spec: MlpSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let mut offset = 0;
        let mut alloc = |fan_in: usize, fan_out: usize| {
            let slot = Slot { fan_in, fan_out, w: offset, b: offset + fan_in * fan_out };
            offset += fan_in * fan_out + fan_out;
            slot
        };
        let (projections, trunk_in) = match spec.latent {
            Some(l) => (spec.input_groups.iter().map(|&g| alloc(g, l)).collect(), l * spec.input_groups.len()),
            None => (Vec::new(), spec.input_dim()),
        };
        let mut layers = Vec::new();
        let mut width = trunk_in;
        for &h in &spec.hidden {
            layers.push(alloc(width, h));
            width = h;
        }
        layers.push(alloc(width, 1));
        Ok(Mlp { spec, projections, layers, params: Array1::zeros(offset) })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn new(spec: MlpSpec, init_seed: u64) -> Result<Self, NnError> {
        let mut net = Self::zeros(spec)?;
        let mut rng = seed::rng(init_seed);
        let slots: Vec<Slot> = net.projections.iter().chain(&net.layers).cloned().collect();
        for slot in slots {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for i in slot.w_range().chain(slot.b_range()) {
                net.params[i] = T::of(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn from_record(record: MlpRecord<T>) -> Result<Self, NnError> {
        let mut net = Self::zeros(record.spec)?;
        if record.params.len() != net.params.len() {
            return Err(NnError::ParamCount { expected: net.params.len(), got: record.params.len() });
        }
        net.params = Array1::from(record.params);
        Ok(net)
    }

    pub fn to_record(&self) -> MlpRecord<T> {
        MlpRecord { spec: self.spec.clone(), params: self.params.to_vec() }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    /// 1 for weight entries, 0 for biases.
    pub fn weight_mask(&self) -> Array1<T> {
        let mut m = Array1::zeros(self.params.len());
        for slot in self.projections.iter().chain(&self.layers) {
            m.slice_mut(s![slot.w_range()]).fill(T::one());
        }
        m
    }

    /// Content hash of the parameter values.
    pub fn param_hash(&self) -> String {
        let bytes: Vec<u8> = self.params.iter().flat_map(|p| p.as_f64().to_bits().to_le_bytes()).collect();
        seed::sha256_hex(&bytes)
    }

    fn weights(&self, slot: &Slot) -> ArrayView2<'_, T> {
        let flat = self.params.as_slice().expect("params are contiguous");
        ArrayView2::from_shape((slot.fan_in, slot.fan_out), &flat[slot.w_range()]).expect("slot shape")
    }

    fn bias(&self, slot: &Slot) -> ArrayView1<'_, T> {
        self.params.slice(s![slot.b_range()])
    }

    fn affine(&self, x: &ArrayView2<'_, T>, slot: &Slot) -> Array2<T> {
        let mut out = Array2::zeros((x.nrows(), slot.fan_out));
        out += &self.bias(slot);
        general_mat_mul(T::one(), x, &self.weights(slot), T::one(), &mut out);
        out
    }

    /// Batched forward pass over rows of `x`; returns outputs and the tape.
    pub fn forward(&self, x: ArrayView2<'_, T>, mode: Mode) -> Result<(Array1<T>, Tape<T>), NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::InputDim { expected: self.input_dim(), got: x.ncols() });
        }
        let batch = x.nrows();
        let trunk_in = match self.spec.latent {
            Some(l) => {
                let mut z = Array2::zeros((batch, l * self.projections.len()));
                let mut col = 0;
                for (g, slot) in self.projections.iter().enumerate() {
                    let xg = x.slice(s![.., col..col + slot.fan_in]);
                    z.slice_mut(s![.., g * l..(g + 1) * l]).assign(&self.affine(&xg, slot));
                    col += slot.fan_in;
                }
                z
            }
            None => x.to_owned(),
        };

        let keep = 1.0 - self.spec.dropout;
        let mut mask_rng = match mode {
            Mode::Train { mask_seed } if self.spec.dropout > 0.0 => Some(seed::rng(mask_seed)),
            _ => None,
        };
        let scale = T::of(1.0 / keep);
        let mut acts = vec![trunk_in];
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut masks = Vec::with_capacity(self.layers.len() - 1);
        for slot in &self.layers[..self.layers.len() - 1] {
            let h = self.affine(&acts.last().expect("non-empty").view(), slot);
            let mut a = h.mapv(|v| v.max(T::zero()));
            let mask = mask_rng.as_mut().map(|rng| {
                Array2::from_shape_fn(a.raw_dim(), |_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            });
            if let Some(m) = &mask {
                a *= m;
            }
            pre.push(h);
            masks.push(mask);
            acts.push(a);
        }
        let out_slot = self.layers.last().expect("output layer");
        let y = self.affine(&acts.last().expect("non-empty").view(), out_slot).index_axis_move(Axis(1), 0);
        Ok((y, Tape { input: x.to_owned(), acts, pre, masks }))
    }

    /// Batched forward without keeping a tape.
    pub fn predict(&self, x: ArrayView2<'_, T>, mode: Mode) -> Result<Array1<T>, NnError> {
        self.forward(x, mode).map(|(y, _)| y)
    }

    /// Single-input forward pass.
    pub fn forward_one(&self, input: &[T], mode: Mode) -> Result<T, NnError> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.predict(x, mode)?[0])
    }

    /// Gradient of `sum_i upstream_i * y_i` with respect to every parameter,
    /// laid out like `params`.
    pub fn backward(&self, tape: &Tape<T>, upstream: ArrayView1<'_, T>) -> Result<Array1<T>, NnError> {
        let batch = tape.input.nrows();
        if upstream.len() != batch {
            return Err(NnError::Upstream { expected: batch, got: upstream.len() });
        }
        let mut grads = Array1::<T>::zeros(self.params.len());
        let g = upstream.to_owned().insert_axis(Axis(1));
        let mut delta = g; // d loss / d (layer output), batch x fan_out

        for (li, slot) in self.layers.iter().enumerate().rev() {
            let input = &tape.acts[li];
            self.accumulate(&mut grads, slot, &input.view(), &delta);
            let mut d_in = Array2::zeros((batch, slot.fan_in));
            general_mat_mul(T::one(), &delta, &self.weights(slot).t(), T::zero(), &mut d_in);
            if li > 0 {
                // back through dropout and ReLU of the previous hidden layer
                if let Some(m) = &tape.masks[li - 1] {
                    d_in *= m;
                }
                Zip::from(&mut d_in).and(&tape.pre[li - 1]).for_each(|d, &h| {
                    if h <= T::zero() {
                        *d = T::zero();
                    }
                });
            }
            delta = d_in;
        }

        if let Some(l) = self.spec.latent {
            let mut col = 0;
            for (gi, slot) in self.projections.iter().enumerate() {
                let xg = tape.input.slice(s![.., col..col + slot.fan_in]);
                let dg = delta.slice(s![.., gi * l..(gi + 1) * l]).to_owned();
                self.accumulate(&mut grads, slot, &xg, &dg);
                col += slot.fan_in;
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut Array1<T>, slot: &Slot, input: &ArrayView2<'_, T>, delta: &Array2<T>) {
        let flat = grads.as_slice_mut().expect("grads are contiguous");
        let mut gw = ArrayViewMut2::from_shape((slot.fan_in, slot.fan_out), &mut flat[slot.w_range()]).expect("slot shape");
        general_mat_mul(T::one(), &input.t(), delta, T::one(), &mut gw);
        let gb = delta.sum_axis(Axis(0));
        for (dst, src) in flat[slot.b_range()].iter_mut().zip(gb.iter()) {
            *dst += *src;
        }
    }

    /// Gradient of `upstream * f(input)` for a single input.
    pub fn grad_one(&self, input: &[T], mode: Mode, upstream: T) -> Result<Array1<T>, NnError> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        let (_, tape) = self.forward(x, mode)?;
        self.backward(&tape, Array1::from_elem(1, upstream).view())
    }
}

/// Cosine decay from `base_lr` at step 0 to exactly zero at `total_steps`.
pub fn cosine_lr<T: Scalar>(step: u64, total_steps: u64, base_lr: T) -> T {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * T::of(0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Array1<T>, max_norm: T) -> T {
    let norm = grads.iter().map(|g| *g * *g).sum::<T>().sqrt();
    if norm > max_norm && norm > T::zero() {
        let k = max_norm / norm;
        grads.mapv_inplace(|g| g * k);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { base_lr: 3e-4, total_steps: 1, weight_decay: 1e-4, clip_norm: 1.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub m: Array1<T>,
    pub v: Array1<T>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport<T> {
    pub lr: T,
    pub grad_norm: T,
    pub clipped_norm: T,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        OptimState { config, m: Array1::zeros(num_params), v: Array1::zeros(num_params), step: 0 }
    }

    pub fn lr(&self) -> T {
        cosine_lr(self.step, self.config.total_steps, T::of(self.config.base_lr))
    }

    /// Clips, applies decoupled weight decay to entries where `decay_mask`
    /// is 1, then takes a bias-corrected Adam step. A non-finite gradient
    /// leaves parameters and moments untouched.
    pub fn apply(&mut self, params: &mut Array1<T>, mut grads: Array1<T>, decay_mask: &Array1<T>) -> Result<StepReport<T>, NnError> {
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient { index });
        }
        let c = &self.config;
        let grad_norm = clip_global_norm(&mut grads, T::of(c.clip_norm));
        let clipped_norm = grads.iter().map(|g| *g * *g).sum::<T>().sqrt();
        let lr = self.lr();
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
        let t = (self.step + 1) as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let wd = lr * T::of(c.weight_decay);
        Zip::from(params)
            .and(&grads)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(decay_mask)
            .for_each(|p, &g, m, v, &mask| {
                *p -= wd * mask * *p;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        self.step += 1;
        Ok(StepReport { lr, grad_norm, clipped_norm })
    }

    /// Convenience wrapper for stepping a whole network.
    pub fn step_net(&mut self, net: &mut Mlp<T>, grads: Array1<T>) -> Result<StepReport<T>, NnError> {
        let mask = net.weight_mask();
        self.apply(&mut net.params, grads, &mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> MlpSpec {
        MlpSpec { input_groups: vec![3, 2], latent: Some(4), hidden: vec![5, 3], dropout: 0.1 }
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut net = Mlp::<f64>::zeros(MlpSpec::plain(3, vec![4], 0.0)).unwrap();
        let n = net.num_params();
        net.params[n - 1] = 0.75;
        assert_eq!(net.forward_one(&[1.0, -2.0, 3.0], Mode::Eval).unwrap(), 0.75);
    }

    #[test]
    fn single_linear_layer_is_a_dot_product() {
        let mut net = Mlp::<f64>::zeros(MlpSpec::plain(2, vec![], 0.0)).unwrap();
        net.params.assign(&Array1::from(vec![0.5, -1.5, 0.25]));
        // 1*0.5 + 2*(-1.5) + 0.25
        assert_eq!(net.forward_one(&[1.0, 2.0], Mode::Eval).unwrap(), -2.25);
        let g = net.grad_one(&[1.0, 2.0], Mode::Eval, 3.0).unwrap();
        assert_eq!(g.to_vec(), vec![3.0, 6.0, 3.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = Mlp::<f64>::new(small_spec(), 1).unwrap();
        assert_eq!(net.forward_one(&[1.0; 4], Mode::Eval), Err(NnError::InputDim { expected: 5, got: 4 }));
    }

    #[test]
    fn eval_is_deterministic_and_train_masks_are_seeded() {
        let net = Mlp::<f64>::new(small_spec(), 3).unwrap();
        let x = [0.1, -0.2, 0.3, 0.4, -0.5];
        assert_eq!(net.forward_one(&x, Mode::Eval).unwrap(), net.forward_one(&x, Mode::Eval).unwrap());
        let t1 = net.forward_one(&x, Mode::Train { mask_seed: 9 }).unwrap();
        assert_eq!(t1, net.forward_one(&x, Mode::Train { mask_seed: 9 }).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = Mlp::<f64>::new(small_spec(), 4).unwrap();
        let g = net.grad_one(&[0.3, 0.1, -0.2, 0.5, 0.9], Mode::Eval, 0.0).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batched_backward_sums_per_sample_gradients() {
        let net = Mlp::<f64>::new(small_spec(), 5).unwrap();
        let rows = [[0.3, 0.1, -0.2, 0.5, 0.9], [-0.4, 0.7, 0.2, -0.1, 0.3]];
        let x = Array2::from_shape_vec((2, 5), rows.concat()).unwrap();
        let (_, tape) = net.forward(x.view(), Mode::Eval).unwrap();
        let g = net.backward(&tape, Array1::from(vec![1.0, -2.0]).view()).unwrap();
        let expect = net.grad_one(&rows[0], Mode::Eval, 1.0).unwrap() + net.grad_one(&rows[1], Mode::Eval, -2.0).unwrap();
        for (a, b) in g.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 1000, 3e-4f64), 3e-4);
        assert_eq!(cosine_lr(1000, 1000, 3e-4f64), 0.0);
        assert!((cosine_lr(500, 1000, 3e-4f64) - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn clipping_scales_to_threshold() {
        let mut g = Array1::from(vec![1.2f64, 1.6]);
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 2.0).abs() < 1e-12);
        let after = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut net = Mlp::<f64>::new(small_spec(), 6).unwrap();
        let before = net.params.clone();
        let mut opt = OptimState::new(AdamConfig { weight_decay: 0.0, total_steps: 10, ..Default::default() }, net.num_params());
        let n = net.num_params();
        opt.step_net(&mut net, Array1::zeros(n)).unwrap();
        assert_eq!(net.params, before);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut net = Mlp::<f64>::new(small_spec(), 6).unwrap();
        let before = net.params.clone();
        let mut opt = OptimState::new(AdamConfig::default(), net.num_params());
        let mut g = Array1::zeros(net.num_params());
        g[2] = f64::NAN;
        assert_eq!(opt.step_net(&mut net, g), Err(NnError::NonFiniteGradient { index: 2 }));
        assert_eq!(net.params, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn f32_networks_work() {
        let net = Mlp::<f32>::new(small_spec(), 2).unwrap();
        let y = net.forward_one(&[0.1, 0.2, 0.3, 0.4, 0.5], Mode::Eval).unwrap();
        assert!(y.is_finite());
        let g = net.grad_one(&[0.1, 0.2, 0.3, 0.4, 0.5], Mode::Eval, 1.0).unwrap();
        assert_eq!(g.len(), net.num_params());
    }
}
