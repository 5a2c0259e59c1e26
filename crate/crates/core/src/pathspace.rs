//! Path enumeration, the lifting `phi(theta)` and the activation operator
//! `alpha(X, theta)`.
//!
//! A path starts at some layer `l < L` and visits one neuron per layer up
//! to `L - 1`; the extra path `Beta` indexes the output biases. Paths are
//! ordered canonically: all paths starting at layer 0 in lexicographic
//! neuron order, then those starting at layer 1, and so on, `Beta` last.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{check_inputs, forward, forward_batch, Architecture, ForwardTrace, NetworkParams};
use crate::scalar::Scalar;

/// Identifier written into exported matrices so external tools can tell
/// which column order they are looking at.
pub const PATH_ORDER_VERSION: &str = "canonical-v1";

pub const DEFAULT_PATH_CAP: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathIndex {
    Beta,
    Path { start_layer: usize, neurons: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathEnumeration {
    arch: Architecture,
    /// Ordinal of the first path of each start layer; the last entry is `Beta`.
    offsets: Vec<usize>,
}

/// Enumerates the path set, refusing when the largest block
/// `N_0 * ... * N_{L-1}` exceeds `cap`.
pub fn enumerate_paths(arch: &Architecture, cap: u128) -> Result<PathEnumeration> {
    let depth = arch.depth();
    let product: u128 = arch.layer_sizes()[..depth].iter().map(|&n| n as u128).product();
    if product > cap {
        return Err(Error::PathExplosion { product, cap });
    }
    let mut offsets = Vec::with_capacity(depth + 1);
    let mut next = 0usize;
    for l in 0..depth {
        offsets.push(next);
        next += arch.layer_sizes()[l..depth].iter().product::<usize>();
    }
    offsets.push(next);
    Ok(PathEnumeration { arch: arch.clone(), offsets })
}

impl PathEnumeration {
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// `|P|`, including `Beta`.
    pub fn len(&self) -> usize {
        self.beta() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta(&self) -> usize {
        *self.offsets.last().expect("offsets never empty")
    }

    /// Ordinal range of the paths starting at `layer`.
    pub fn block(&self, layer: usize) -> std::ops::Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    pub fn ordinal(&self, path: &PathIndex) -> Result<usize> {
        match path {
            PathIndex::Beta => Ok(self.beta()),
            PathIndex::Path { start_layer, neurons } => {
                let depth = self.arch.depth();
                if *start_layer >= depth || neurons.len() != depth - start_layer {
                    return Err(Error::MalformedPath(format!(
                        "path starting at layer {start_layer} must have {} neurons, got {}",
                        depth.saturating_sub(*start_layer),
                        neurons.len()
                    )));
                }
                let mut code = 0usize;
                for (k, &v) in neurons.iter().enumerate() {
                    let width = self.arch.width(start_layer + k);
                    if v >= width {
                        return Err(Error::MalformedPath(format!(
                            "neuron {v} out of range for layer {} of width {width}",
                            start_layer + k
                        )));
                    }
                    code = code * width + v;
                }
                Ok(self.offsets[*start_layer] + code)
            }
        }
    }

    pub fn path(&self, ordinal: usize) -> PathIndex {
        assert!(ordinal < self.len(), "ordinal {ordinal} out of range");
        if ordinal == self.beta() {
            return PathIndex::Beta;
        }
        let start_layer = self.offsets.partition_point(|&o| o <= ordinal) - 1;
        let mut code = ordinal - self.offsets[start_layer];
        let depth = self.arch.depth();
        let mut neurons = vec![0; depth - start_layer];
        for k in (0..neurons.len()).rev() {
            let width = self.arch.width(start_layer + k);
            neurons[k] = code % width;
            code /= width;
        }
        PathIndex::Path { start_layer, neurons }
    }

    pub fn iter(&self) -> impl Iterator<Item = PathIndex> + '_ {
        (0..self.len()).map(move |o| self.path(o))
    }
}

/// Calls `f` on every tuple drawn from `choices` in lexicographic order.
pub(crate) fn for_each_tuple(choices: &[Vec<usize>], mut f: impl FnMut(&[usize])) {
    if choices.iter().any(Vec::is_empty) {
        return;
    }
    let mut pos = vec![0usize; choices.len()];
    let mut tuple: Vec<usize> = choices.iter().map(|c| c[0]).collect();
    loop {
        f(&tuple);
        let mut k = choices.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            pos[k] += 1;
            if pos[k] < choices[k].len() {
                tuple[k] = choices[k][pos[k]];
                break;
            }
            pos[k] = 0;
            tuple[k] = choices[k][0];
        }
    }
}

/// `phi(theta)`, one row per path and one column per output neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedMatrix<T: Scalar = f64> {
    pub matrix: DMatrix<T>,
}

impl<T: Scalar> LiftedMatrix<T> {
    /// Column-stacked vector indexed `(p, v_L)` with `p` major.
    pub fn to_vector(&self) -> DVector<T> {
        let (rows, cols) = self.matrix.shape();
        DVector::from_fn(rows * cols, |k, _| self.matrix[(k / cols, k % cols)].clone())
    }
}

pub fn lift<T: Scalar>(params: &NetworkParams<T>, paths: &PathEnumeration) -> LiftedMatrix<T> {
    let arch = params.arch();
    let depth = arch.depth();
    let n_out = arch.output_dim();
    let mut matrix = DMatrix::from_element(paths.len(), n_out, T::zero());
    for start in 0..depth {
        let choices: Vec<Vec<usize>> = (start..depth).map(|k| (0..arch.width(k)).collect()).collect();
        let mut ordinal = paths.block(start).start;
        for_each_tuple(&choices, |neurons| {
            let mut prod = if start == 0 { T::one() } else { params.bias(start, neurons[0]).clone() };
            for k in 0..neurons.len() - 1 {
                prod *= params.weight(start + k, neurons[k], neurons[k + 1]).clone();
            }
            let last = *neurons.last().expect("non-empty path");
            for out in 0..n_out {
                matrix[(ordinal, out)] = prod.clone() * params.weight(depth - 1, last, out).clone();
            }
            ordinal += 1;
        });
    }
    let beta = paths.beta();
    for out in 0..n_out {
        matrix[(beta, out)] = params.bias(depth, out).clone();
    }
    LiftedMatrix { matrix }
}

/// Sparse matrix in coordinate form. Entries are kept sorted by
/// `(row, col)` and only nonzeros are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletMatrix<T: Scalar = f64> {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, T)>,
}

impl<T: Scalar> TripletMatrix<T> {
    pub fn from_dense(m: &DMatrix<T>) -> Self {
        let mut entries = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if !m[(r, c)].is_zero() {
                    entries.push((r, c, m[(r, c)].clone()));
                }
            }
        }
        Self { nrows: m.nrows(), ncols: m.ncols(), entries }
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut m = DMatrix::from_element(self.nrows, self.ncols, T::zero());
        for (r, c, v) in &self.entries {
            m[(*r, *c)] = v.clone();
        }
        m
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Dense copy restricted to the columns holding at least one nonzero,
    /// in increasing column order.
    pub fn compressed_support(&self) -> DMatrix<T> {
        let mut cols: Vec<usize> = self.entries.iter().map(|e| e.1).collect();
        cols.sort_unstable();
        cols.dedup();
        let mut m = DMatrix::from_element(self.nrows, cols.len(), T::zero());
        for (r, c, v) in &self.entries {
            let k = cols.binary_search(c).expect("column collected above");
            m[(*r, k)] = v.clone();
        }
        m
    }

    /// `self * rhs` for a dense right-hand side.
    pub fn mul_dense(&self, rhs: &DMatrix<T>) -> DMatrix<T> {
        assert_eq!(self.ncols, rhs.nrows(), "inner dimensions differ");
        let mut out = DMatrix::from_element(self.nrows, rhs.ncols(), T::zero());
        for (r, c, v) in &self.entries {
            for j in 0..rhs.ncols() {
                out[(*r, j)] = out[(*r, j)].clone() + v.clone() * rhs[(*c, j)].clone();
            }
        }
        out
    }
}

/// `alpha(X, theta)`: one row per input, one column per path.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix<T: Scalar = f64> {
    pub triplets: TripletMatrix<T>,
}

/// Sparse row `alpha(x, theta)` computed from a forward trace, as
/// `(column, value)` pairs in increasing column order.
pub fn activation_row_from_trace<T: Scalar>(x: &[T], trace: &ForwardTrace<T>, paths: &PathEnumeration) -> Vec<(usize, T)> {
    let arch = paths.arch();
    let depth = arch.depth();
    let active: Vec<Vec<usize>> =
        trace.bits.iter().map(|bits| bits.iter().enumerate().filter(|(_, &on)| on).map(|(k, _)| k).collect()).collect();
    let mut row = Vec::new();
    for start in 0..depth {
        let mut choices: Vec<Vec<usize>> = Vec::with_capacity(depth - start);
        if start == 0 {
            choices.push((0..arch.width(0)).filter(|&k| !x[k].is_zero()).collect());
        }
        for layer in start.max(1)..depth {
            choices.push(active[layer - 1].clone());
        }
        for_each_tuple(&choices, |neurons| {
            let ordinal = paths
                .ordinal(&PathIndex::Path { start_layer: start, neurons: neurons.to_vec() })
                .expect("tuple drawn from valid neuron ranges");
            let value = if start == 0 { x[neurons[0]].clone() } else { T::one() };
            row.push((ordinal, value));
        });
    }
    row.push((paths.beta(), T::one()));
    row
}

pub fn activation_row<T: Scalar>(params: &NetworkParams<T>, x: &[T], paths: &PathEnumeration) -> Result<Vec<(usize, T)>> {
    let (_, trace) = forward(params, x)?;
    Ok(activation_row_from_trace(x, &trace, paths))
}

pub fn activation_matrix<T: Scalar>(
    params: &NetworkParams<T>,
    inputs: &DMatrix<T>,
    paths: &PathEnumeration,
) -> Result<ActivationMatrix<T>> {
    check_inputs(params.arch(), inputs)?;
    let mut entries = Vec::new();
    for i in 0..inputs.nrows() {
        let x: Vec<T> = inputs.row(i).iter().cloned().collect();
        for (c, v) in activation_row(params, &x, paths)? {
            entries.push((i, c, v));
        }
    }
    Ok(ActivationMatrix { triplets: TripletMatrix { nrows: inputs.nrows(), ncols: paths.len(), entries } })
}

/// `theta_{p_i}` for an input-side path `(v_{l'}, ..., v_l)` starting at
/// `start_layer = l'`: the weight product along the path, times
/// `b_{v_{l'}}` when `l' >= 1`.
pub fn input_path_product<T: Scalar>(params: &NetworkParams<T>, start_layer: usize, neurons: &[usize]) -> Result<T> {
    validate_path(params.arch(), start_layer, neurons)?;
    let head = if start_layer == 0 { T::one() } else { params.bias(start_layer, neurons[0]).clone() };
    Ok(head * weight_product(params, start_layer, neurons))
}

/// `theta_{p_o}` for an output-side path `(v_l, ..., v_L)`: the pure weight
/// product, `1` for the single-neuron path `(v_L)`.
pub fn output_path_product<T: Scalar>(params: &NetworkParams<T>, start_layer: usize, neurons: &[usize]) -> Result<T> {
    validate_path(params.arch(), start_layer, neurons)?;
    if start_layer + neurons.len() - 1 != params.arch().depth() {
        return Err(Error::MalformedPath(format!(
            "output path starting at layer {start_layer} with {} neurons does not end at the output layer",
            neurons.len()
        )));
    }
    Ok(weight_product(params, start_layer, neurons))
}

fn weight_product<T: Scalar>(params: &NetworkParams<T>, start_layer: usize, neurons: &[usize]) -> T {
    neurons.windows(2).enumerate().fold(T::one(), |acc, (k, pair)| acc * params.weight(start_layer + k, pair[0], pair[1]).clone())
}

fn validate_path(arch: &Architecture, start_layer: usize, neurons: &[usize]) -> Result<()> {
    if neurons.is_empty() {
        return Err(Error::MalformedPath("empty path".into()));
    }
    if start_layer + neurons.len() - 1 > arch.depth() {
        return Err(Error::MalformedPath(format!(
            "path of {} neurons starting at layer {start_layer} runs past the output layer",
            neurons.len()
        )));
    }
    for (k, &v) in neurons.iter().enumerate() {
        if v >= arch.width(start_layer + k) {
            return Err(Error::MalformedPath(format!("neuron {v} out of range for layer {}", start_layer + k)));
        }
    }
    Ok(())
}

/// Result of comparing `f_theta(X)` with `alpha(X, theta) phi(theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRepresentationCheck {
    pub max_abs_residual: f64,
    /// `max_abs_residual / (1 + max |f_theta(X)|)`.
    pub relative_residual: f64,
    pub rel_tol: f64,
    pub passed: bool,
}

/// `f_theta(X) - alpha(X, theta) phi(theta)` as a dense `n x N_L` matrix.
pub fn linear_representation_residual<T: Scalar>(
    params: &NetworkParams<T>,
    inputs: &DMatrix<T>,
    paths: &PathEnumeration,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let outputs = forward_batch(params, inputs)?;
    let alpha = activation_matrix(params, inputs, paths)?;
    let phi = lift(params, paths);
    let represented = alpha.triplets.mul_dense(&phi.matrix);
    let residual = DMatrix::from_fn(outputs.nrows(), outputs.ncols(), |i, j| outputs[(i, j)].clone() - represented[(i, j)].clone());
    Ok((outputs, residual))
}

pub fn check_linear_representation(
    params: &NetworkParams<f64>,
    inputs: &DMatrix<f64>,
    rel_tol: f64,
    cap: u128,
) -> Result<LinearRepresentationCheck> {
    let paths = enumerate_paths(params.arch(), cap)?;
    let (outputs, residual) = linear_representation_residual(params, inputs, &paths)?;
    let max_abs_residual = residual.amax();
    let relative_residual = max_abs_residual / (1.0 + outputs.amax());
    Ok(LinearRepresentationCheck {
        max_abs_residual,
        relative_residual,
        rel_tol,
        passed: relative_residual < rel_tol || relative_residual == 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn arch(sizes: &[usize]) -> Architecture {
        Architecture::new(sizes.to_vec()).unwrap()
    }

    fn chain(theta: [f64; 4]) -> NetworkParams {
        NetworkParams::from_flat(arch(&[1, 1, 1]), &theta).unwrap()
    }

    /// Counts paths by walking every tuple of every block.
    fn brute_count(a: &Architecture) -> usize {
        let depth = a.depth();
        let mut count = 1;
        for start in 0..depth {
            let choices: Vec<Vec<usize>> = (start..depth).map(|k| (0..a.width(k)).collect()).collect();
            for_each_tuple(&choices, |_| count += 1);
        }
        count
    }

    #[test]
    fn path_counts() {
        for (sizes, expected) in [(vec![1, 1, 1], 3), (vec![2, 3, 2], 10), (vec![3, 4, 4, 2], 69)] {
            let a = arch(&sizes);
            let e = enumerate_paths(&a, DEFAULT_PATH_CAP).unwrap();
            assert_eq!(e.len(), expected);
            assert_eq!(brute_count(&a), expected);
        }
    }

    #[test]
    fn ordinals_are_a_bijection_in_canonical_order() {
        let e = enumerate_paths(&arch(&[3, 4, 4, 2]), DEFAULT_PATH_CAP).unwrap();
        let all: Vec<PathIndex> = e.iter().collect();
        for (k, p) in all.iter().enumerate() {
            assert_eq!(e.ordinal(p).unwrap(), k);
        }
        assert_eq!(all[0], PathIndex::Path { start_layer: 0, neurons: vec![0, 0, 0] });
        assert_eq!(all[1], PathIndex::Path { start_layer: 0, neurons: vec![0, 0, 1] });
        assert_eq!(all[48], PathIndex::Path { start_layer: 1, neurons: vec![0, 0] });
        assert_eq!(all[64], PathIndex::Path { start_layer: 2, neurons: vec![0] });
        assert_eq!(*all.last().unwrap(), PathIndex::Beta);
    }

    #[test]
    fn cap_is_enforced() {
        let err = enumerate_paths(&arch(&[10, 10, 10, 1]), 999).unwrap_err();
        assert_eq!(err, Error::PathExplosion { product: 1000, cap: 999 });
    }

    #[test]
    fn malformed_ordinal_queries() {
        let e = enumerate_paths(&arch(&[2, 3, 2]), DEFAULT_PATH_CAP).unwrap();
        assert!(e.ordinal(&PathIndex::Path { start_layer: 0, neurons: vec![0] }).is_err());
        assert!(e.ordinal(&PathIndex::Path { start_layer: 1, neurons: vec![3] }).is_err());
        assert!(e.ordinal(&PathIndex::Path { start_layer: 2, neurons: vec![] }).is_err());
    }

    #[test]
    fn lift_examples() {
        let e = enumerate_paths(&arch(&[1, 1, 1]), DEFAULT_PATH_CAP).unwrap();
        let phi = lift(&chain([1.0, 1.0, 0.0, 0.0]), &e);
        assert_eq!(phi.matrix.as_slice(), &[1.0, 0.0, 0.0]);
        let phi = lift(&chain([3.0, 2.0, 5.0, 7.0]), &e);
        assert_eq!(phi.matrix.as_slice(), &[6.0, 10.0, 7.0]);
    }

    #[test]
    fn activation_row_examples() {
        let e = enumerate_paths(&arch(&[1, 1, 1]), DEFAULT_PATH_CAP).unwrap();
        let p = chain([1.0, 1.0, 0.0, 0.0]);
        assert_eq!(activation_row(&p, &[2.0], &e).unwrap(), vec![(0, 2.0), (1, 1.0), (2, 1.0)]);
        assert_eq!(activation_row(&p, &[-2.0], &e).unwrap(), vec![(2, 1.0)]);
    }

    #[test]
    fn activation_row_reproduces_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = arch(&[2, 3, 2]);
        let e = enumerate_paths(&a, DEFAULT_PATH_CAP).unwrap();
        for _ in 0..10 {
            let p = NetworkParams::random_normal(a.clone(), &mut rng);
            let x: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let row = activation_row(&p, &x, &e).unwrap();
            let phi = lift(&p, &e);
            let (f, _) = forward(&p, &x).unwrap();
            for out in 0..2 {
                let via_paths: f64 = row.iter().map(|(c, v)| v * phi.matrix[(*c, out)]).sum();
                assert!((via_paths - f[out]).abs() <= 1e-9 * (1.0 + f[out].abs()));
            }
            assert!(row.iter().all(|(c, v)| *c < 6 || *v == 1.0));
            assert_eq!(row.last(), Some(&(e.beta(), 1.0)));
        }
    }

    #[test]
    fn path_product_examples() {
        let p = chain([3.0, 2.0, 5.0, 7.0]);
        assert_eq!(output_path_product(&p, 2, &[0]).unwrap(), 1.0);
        assert_eq!(input_path_product(&p, 1, &[0]).unwrap(), 5.0);
        assert_eq!(output_path_product(&p, 1, &[0, 0]).unwrap(), 2.0);
        assert_eq!(input_path_product(&p, 0, &[0]).unwrap(), 1.0);
        assert!(output_path_product(&p, 1, &[0]).is_err());
        assert!(input_path_product(&p, 0, &[0, 1]).is_err());
        assert!(input_path_product(&p, 1, &[0, 0, 0]).is_err());
    }

    #[test]
    fn lift_factors_through_every_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = arch(&[2, 3, 3, 2]);
        let e = enumerate_paths(&a, DEFAULT_PATH_CAP).unwrap();
        let p = NetworkParams::random_normal(a.clone(), &mut rng);
        let phi = lift(&p, &e);
        for (ordinal, path) in e.iter().enumerate() {
            let PathIndex::Path { start_layer, neurons } = path else { continue };
            for out in 0..2 {
                let mut full = neurons.clone();
                full.push(out);
                for split in 0..full.len() {
                    let pi = input_path_product(&p, start_layer, &full[..=split]).unwrap();
                    let po = output_path_product(&p, start_layer + split, &full[split..]).unwrap();
                    let expected = phi.matrix[(ordinal, out)];
                    assert!((pi * po - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
                }
            }
        }
    }

    #[test]
    fn linear_representation_trivial_instance_is_exact() {
        let x = DMatrix::from_row_slice(1, 1, &[2.0]);
        let c = check_linear_representation(&chain([1.0, 1.0, 0.0, 0.0]), &x, 1e-9, DEFAULT_PATH_CAP).unwrap();
        assert_eq!(c.max_abs_residual, 0.0);
        assert!(c.passed);
    }

    #[test]
    fn alpha_is_locally_constant_in_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = arch(&[2, 3, 2]);
        let e = enumerate_paths(&a, DEFAULT_PATH_CAP).unwrap();
        let p = NetworkParams::random_normal(a.clone(), &mut rng);
        let x = DMatrix::from_fn(4, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let margin = crate::network::activation_margin(&p, &x).unwrap().value;
        let base = activation_matrix(&p, &x, &e).unwrap();
        // Zero-valued alpha entries only depend on the bits, so compare supports
        // and the input-valued entries.
        for _ in 0..10 {
            let delta: Vec<f64> = (0..a.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scale = 1e-3 * margin / (1.0 + x.amax()) / 3.0;
            let flat: Vec<f64> = p.to_flat().iter().zip(&delta).map(|(t, d)| t + scale * d).collect();
            let q = NetworkParams::from_flat(a.clone(), &flat).unwrap();
            assert_eq!(activation_matrix(&q, &x, &e).unwrap(), base);
        }
    }

    #[test]
    fn sparse_helpers() {
        let m = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]);
        let t = TripletMatrix::from_dense(&m);
        assert_eq!(t.nnz(), 3);
        assert_eq!(t.to_dense(), m);
        assert_eq!(t.compressed_support(), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]));
        let rhs = DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.mul_dense(&rhs), &m * &rhs);
    }
}
