//! Architectures, parameters, forward passes and the degeneracy tests.
//!
//! Layers are numbered `0..=L`. `weights[l - 1]` holds `W_l`, an
//! `N_l x N_{l-1}` matrix whose entry `(v', v)` is the weight of the edge
//! `v -> v'`; `biases[l - 1]` holds `b_l`. Hidden layers use ReLU, the
//! output layer is affine.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::Architecture(format!("need at least one hidden layer (L >= 2), got {} layer sizes", layer_sizes.len())));
        }
        if let Some(pos) = layer_sizes.iter().position(|&n| n == 0) {
            return Err(Error::Architecture(format!("layer {pos} has zero neurons")));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn width(&self, layer: usize) -> usize {
        self.layer_sizes[layer]
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layer_sizes[self.depth()]
    }

    /// `|E|`, edges between consecutive layers.
    pub fn num_edges(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1]).sum()
    }

    /// `|B|`, the non-input neurons.
    pub fn num_biases(&self) -> usize {
        self.layer_sizes[1..].iter().sum()
    }

    pub fn num_hidden(&self) -> usize {
        self.layer_sizes[1..self.depth()].iter().sum()
    }

    pub fn num_params(&self) -> usize {
        self.num_edges() + self.num_biases()
    }

    /// `N_0 N_1 + ... + N_{L-1} N_L + N_L`.
    pub fn manifold_dimension(&self) -> usize {
        self.num_edges() + self.output_dim()
    }

    pub fn hidden_neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        (1..self.depth()).flat_map(move |layer| (0..self.layer_sizes[layer]).map(move |index| NeuronId { layer, index }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl std::fmt::Display for NeuronId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "v{}_{}", self.layer, self.index)
    }
}

/// Parameters `theta = (W_1, b_1, ..., W_L, b_L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T: Scalar = f64> {
    arch: Architecture,
    weights: Vec<DMatrix<T>>,
    biases: Vec<DVector<T>>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn new(arch: Architecture, weights: Vec<DMatrix<T>>, biases: Vec<DVector<T>>) -> Result<Self> {
        let depth = arch.depth();
        if weights.len() != depth || biases.len() != depth {
            return Err(Error::Shape(format!(
                "expected {depth} weight matrices and bias vectors, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for l in 1..=depth {
            let w = &weights[l - 1];
            let (rows, cols) = (arch.width(l), arch.width(l - 1));
            if w.shape() != (rows, cols) {
                return Err(Error::Shape(format!("weights[{}] has shape {:?}, expected ({rows}, {cols})", l - 1, w.shape())));
            }
            if biases[l - 1].len() != rows {
                return Err(Error::Shape(format!("biases[{}] has length {}, expected {rows}", l - 1, biases[l - 1].len())));
            }
            if !w.iter().all(Scalar::is_finite) {
                return Err(Error::NonFinite(format!("weights[{}]", l - 1)));
            }
            if !biases[l - 1].iter().all(Scalar::is_finite) {
                return Err(Error::NonFinite(format!("biases[{}]", l - 1)));
            }
        }
        Ok(Self { arch, weights, biases })
    }

    /// Builds parameters from a flat vector: every weight matrix in layer
    /// order (row-major, row = target neuron), then every bias vector.
    pub fn from_flat(arch: Architecture, flat: &[T]) -> Result<Self> {
        if flat.len() != arch.num_params() {
            return Err(Error::Shape(format!("flat parameter vector has length {}, expected {}", flat.len(), arch.num_params())));
        }
        let mut it = flat.iter().cloned();
        let mut weights = Vec::with_capacity(arch.depth());
        for l in 1..=arch.depth() {
            let (rows, cols) = (arch.width(l), arch.width(l - 1));
            let data: Vec<T> = it.by_ref().take(rows * cols).collect();
            weights.push(DMatrix::from_row_slice(rows, cols, &data));
        }
        let mut biases = Vec::with_capacity(arch.depth());
        for l in 1..=arch.depth() {
            let data: Vec<T> = it.by_ref().take(arch.width(l)).collect();
            biases.push(DVector::from_vec(data));
        }
        Self::new(arch, weights, biases)
    }

    /// Inverse of [`NetworkParams::from_flat`].
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.arch.num_params());
        for w in &self.weights {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out.push(w[(r, c)].clone());
                }
            }
        }
        for b in &self.biases {
            out.extend(b.iter().cloned());
        }
        out
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// `W_l` for `l` in `1..=L`.
    pub fn weight_matrix(&self, layer: usize) -> &DMatrix<T> {
        &self.weights[layer - 1]
    }

    /// `b_l` for `l` in `1..=L`.
    pub fn bias_vector(&self, layer: usize) -> &DVector<T> {
        &self.biases[layer - 1]
    }

    /// Weight of the edge from neuron `source` of layer `source_layer` to
    /// neuron `target` of the next layer.
    pub fn weight(&self, source_layer: usize, source: usize, target: usize) -> &T {
        &self.weights[source_layer][(target, source)]
    }

    pub fn weight_mut(&mut self, source_layer: usize, source: usize, target: usize) -> &mut T {
        &mut self.weights[source_layer][(target, source)]
    }

    pub fn bias(&self, layer: usize, index: usize) -> &T {
        &self.biases[layer - 1][index]
    }

    pub fn bias_mut(&mut self, layer: usize, index: usize) -> &mut T {
        &mut self.biases[layer - 1][index]
    }

    pub fn max_abs(&self) -> T {
        let w = self.weights.iter().flat_map(|m| m.iter());
        let b = self.biases.iter().flat_map(|v| v.iter());
        T::max_abs(w.chain(b))
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&T) -> U) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch.clone(),
            weights: self.weights.iter().map(|m| m.map(|x| f(&x))).collect(),
            biases: self.biases.iter().map(|v| v.map(|x| f(&x))).collect(),
        }
    }
}

impl NetworkParams<f64> {
    /// Parameters with i.i.d. standard normal entries.
    pub fn random_normal<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let flat: Vec<f64> = (0..arch.num_params()).map(|_| rng.sample(StandardNormal)).collect();
        Self::from_flat(arch, &flat).expect("flat length matches architecture")
    }

    /// Parameters with i.i.d. integer entries in `[-bound, bound]`.
    pub fn random_integer<R: Rng + ?Sized>(arch: Architecture, bound: i64, rng: &mut R) -> Self {
        let flat: Vec<f64> = (0..arch.num_params()).map(|_| rng.random_range(-bound..=bound) as f64).collect();
        Self::from_flat(arch, &flat).expect("flat length matches architecture")
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T: Scalar = f64> {
    /// `z_l` for `l` in `1..=L`, stored at index `l - 1`.
    pub preactivations: Vec<DVector<T>>,
    /// `f_l(x)` for `l` in `1..=L`, stored at index `l - 1`.
    pub activations: Vec<DVector<T>>,
    /// Activation bits `a_v` for hidden layers `1..L`, stored at index `l - 1`.
    pub bits: Vec<Vec<bool>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn output(&self) -> &DVector<T> {
        self.activations.last().expect("at least one layer")
    }

    pub fn bit(&self, layer: usize, index: usize) -> bool {
        self.bits[layer - 1][index]
    }
}

/// Evaluates `f_theta(x)` and records the trace. Ties `z = 0` count as active.
pub fn forward<T: Scalar>(params: &NetworkParams<T>, x: &[T]) -> Result<(DVector<T>, ForwardTrace<T>)> {
    let arch = params.arch();
    if x.len() != arch.input_dim() {
        return Err(Error::Shape(format!("input has length {}, expected {}", x.len(), arch.input_dim())));
    }
    let depth = arch.depth();
    let mut current = DVector::from_column_slice(x);
    let mut trace = ForwardTrace {
        preactivations: Vec::with_capacity(depth),
        activations: Vec::with_capacity(depth),
        bits: Vec::with_capacity(depth - 1),
    };
    for l in 1..=depth {
        let z = params.weight_matrix(l) * &current + params.bias_vector(l);
        let f = if l < depth {
            let bits: Vec<bool> = z.iter().map(|v| *v >= T::zero()).collect();
            let f = DVector::from_iterator(z.len(), z.iter().zip(&bits).map(|(v, &on)| if on { v.clone() } else { T::zero() }));
            trace.bits.push(bits);
            f
        } else {
            z.clone()
        };
        trace.preactivations.push(z);
        trace.activations.push(f.clone());
        current = f;
    }
    Ok((current, trace))
}

/// Rows of `inputs` are the samples `x^i`; returns the `n x N_L` output matrix.
pub fn forward_batch<T: Scalar>(params: &NetworkParams<T>, inputs: &DMatrix<T>) -> Result<DMatrix<T>> {
    let traces = forward_traces(params, inputs)?;
    let n_out = params.arch().output_dim();
    Ok(DMatrix::from_fn(inputs.nrows(), n_out, |i, j| traces[i].output()[j].clone()))
}

pub fn forward_traces<T: Scalar>(params: &NetworkParams<T>, inputs: &DMatrix<T>) -> Result<Vec<ForwardTrace<T>>> {
    check_inputs(params.arch(), inputs)?;
    (0..inputs.nrows())
        .map(|i| {
            let x: Vec<T> = inputs.row(i).iter().cloned().collect();
            forward(params, &x).map(|(_, t)| t)
        })
        .collect()
}

pub(crate) fn check_inputs<T: Scalar>(arch: &Architecture, inputs: &DMatrix<T>) -> Result<()> {
    if inputs.ncols() != arch.input_dim() {
        return Err(Error::Shape(format!("sample has {} columns, expected N_0 = {}", inputs.ncols(), arch.input_dim())));
    }
    if !inputs.iter().all(Scalar::is_finite) {
        return Err(Error::NonFinite("sample".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegeneracyKind {
    /// All outgoing weights vanish.
    NoOutflow,
    /// All incoming weights and the bias vanish.
    NoInflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyWitness {
    pub neuron: NeuronId,
    pub kind: DegeneracyKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyCheck {
    pub degenerate: bool,
    pub witnesses: Vec<DegeneracyWitness>,
}

impl DegeneracyCheck {
    pub fn neurons(&self) -> Vec<NeuronId> {
        let mut out: Vec<NeuronId> = self.witnesses.iter().map(|w| w.neuron).collect();
        out.dedup();
        out
    }
}

/// Tests membership in `S`: some hidden neuron has all outgoing weights
/// `<= tol_s` in max-norm, or all incoming weights and its bias `<= tol_s`.
pub fn is_degenerate_s<T: Scalar>(params: &NetworkParams<T>, tol_s: &T) -> DegeneracyCheck {
    let arch = params.arch();
    let mut witnesses = Vec::new();
    for v in arch.hidden_neurons() {
        let out_norm = T::max_abs(params.weight_matrix(v.layer + 1).column(v.index).iter());
        let in_norm = T::max_abs(params.weight_matrix(v.layer).row(v.index).iter().chain(std::iter::once(params.bias(v.layer, v.index))));
        if out_norm <= *tol_s {
            witnesses.push(DegeneracyWitness { neuron: v, kind: DegeneracyKind::NoOutflow });
        }
        if in_norm <= *tol_s {
            witnesses.push(DegeneracyWitness { neuron: v, kind: DegeneracyKind::NoInflow });
        }
    }
    DegeneracyCheck { degenerate: !witnesses.is_empty(), witnesses }
}

/// `1e-12 * (1 + max |theta|)`.
pub fn default_tol_s(params: &NetworkParams<f64>) -> f64 {
    1e-12 * (1.0 + params.max_abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMargin {
    /// Smallest `|z_v(x^i)|` over inputs and hidden neurons.
    pub value: f64,
    /// Input row attaining the minimum.
    pub input: usize,
    pub neuron: NeuronId,
    /// Largest `|z_v(x^i)|`, used to scale the warning threshold.
    pub max_abs_preactivation: f64,
}

impl ActivationMargin {
    /// `1e-6 * (1 + max |z|)`.
    pub fn default_threshold(&self) -> f64 {
        1e-6 * (1.0 + self.max_abs_preactivation)
    }
}

/// Smallest absolute hidden preactivation over the sample, a proxy for the
/// distance of `theta` to the boundary set where the activation pattern
/// of `X` changes.
pub fn activation_margin<T: Scalar>(params: &NetworkParams<T>, inputs: &DMatrix<T>) -> Result<ActivationMargin> {
    let traces = forward_traces(params, inputs)?;
    let depth = params.arch().depth();
    let mut best: Option<ActivationMargin> = None;
    let mut max_abs = 0.0f64;
    for (i, trace) in traces.iter().enumerate() {
        for layer in 1..depth {
            for (index, z) in trace.preactivations[layer - 1].iter().enumerate() {
                let a = z.to_f64().abs();
                max_abs = max_abs.max(a);
                if best.as_ref().is_none_or(|b| a < b.value) {
                    best = Some(ActivationMargin { value: a, input: i, neuron: NeuronId { layer, index }, max_abs_preactivation: 0.0 });
                }
            }
        }
    }
    let mut m = best.ok_or_else(|| Error::Shape("empty sample".into()))?;
    m.max_abs_preactivation = max_abs;
    Ok(m)
}

/// `sgn(theta)` in the flat parameter order of [`NetworkParams::to_flat`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignPattern(pub Vec<i8>);

pub fn sign_pattern<T: Scalar>(params: &NetworkParams<T>) -> SignPattern {
    SignPattern(
        params
            .to_flat()
            .iter()
            .map(|v| {
                if *v > T::zero() {
                    1
                } else if *v < T::zero() {
                    -1
                } else {
                    0
                }
            })
            .collect(),
    )
}
