//! Neuron-wise rescalings and the equivalences they generate.
//!
//! A rescaling assigns a nonzero factor `lambda^l_v` to every neuron, equal
//! to one on the input and output layers. It carries `theta_tilde` to
//! `theta` through `w_{v->v'} = (lambda^l_{v'} / lambda^{l-1}_v) w~_{v->v'}`
//! and `b_{v'} = lambda^l_{v'} b~_{v'}`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{is_degenerate_s, sign_pattern, Architecture, NetworkParams};
use crate::pathspace::output_path_product;

#[derive(Debug, Clone, PartialEq)]
pub struct RescalingVectors {
    /// One vector per layer `0..=L`.
    pub layers: Vec<DVector<f64>>,
}

impl RescalingVectors {
    pub fn identity(arch: &Architecture) -> Self {
        Self { layers: arch.layer_sizes().iter().map(|&n| DVector::from_element(n, 1.0)).collect() }
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        if self.layers.len() != arch.layer_sizes().len() {
            return Err(Error::Rescaling(format!("expected {} layers, got {}", arch.layer_sizes().len(), self.layers.len())));
        }
        for (l, v) in self.layers.iter().enumerate() {
            if v.len() != arch.width(l) {
                return Err(Error::Rescaling(format!("layer {l} has {} entries, expected {}", v.len(), arch.width(l))));
            }
            let boundary = l == 0 || l == arch.depth();
            if boundary && v.iter().any(|&x| x != 1.0) {
                return Err(Error::Rescaling(format!("boundary layer {l} must be all ones")));
            }
            if v.iter().any(|&x| x == 0.0 || !x.is_finite()) {
                return Err(Error::Rescaling(format!("layer {l} has a zero or non-finite entry")));
            }
        }
        Ok(())
    }

    /// Hidden-layer entries in layer order.
    pub fn hidden_entries(&self) -> Vec<f64> {
        let depth = self.layers.len() - 1;
        self.layers[1..depth].iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn inverse(&self) -> Self {
        Self { layers: self.layers.iter().map(|v| v.map(|x| 1.0 / x)).collect() }
    }

    /// Entrywise product, the composition of two rescalings.
    pub fn compose(&self, other: &Self) -> Self {
        Self { layers: self.layers.iter().zip(&other.layers).map(|(a, b)| a.component_mul(b)).collect() }
    }
}

/// Returns the parameters that `lambda` carries to `params`:
/// `w~_{v->v'} = (lambda^{l-1}_v / lambda^l_{v'}) w_{v->v'}` and
/// `b~_{v'} = b_{v'} / lambda^l_{v'}`.
pub fn apply_rescaling(params: &NetworkParams, lambda: &RescalingVectors) -> Result<NetworkParams> {
    let arch = params.arch();
    lambda.validate(arch)?;
    let mut out = params.clone();
    for l in 1..=arch.depth() {
        for target in 0..arch.width(l) {
            let lt = lambda.layers[l][target];
            for source in 0..arch.width(l - 1) {
                *out.weight_mut(l - 1, source, target) *= lambda.layers[l - 1][source] / lt;
            }
            *out.bias_mut(l, target) /= lt;
        }
    }
    Ok(out)
}

/// Hidden factors drawn log-uniformly from `[1/spread, spread]`, with a
/// random sign when `positive` is false. Deterministic per seed.
pub fn random_rescaling(arch: &Architecture, seed: u64, positive: bool, spread: f64) -> Result<RescalingVectors> {
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("spread must be positive, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_spread = spread.ln().abs();
    let mut lambda = RescalingVectors::identity(arch);
    for l in 1..arch.depth() {
        for x in lambda.layers[l].iter_mut() {
            let magnitude = if log_spread > 0.0 { rng.random_range(-log_spread..=log_spread).exp() } else { 1.0 };
            let sign = if positive || rng.random_bool(0.5) { 1.0 } else { -1.0 };
            *x = sign * magnitude;
        }
    }
    Ok(lambda)
}

/// `|a - b| <= tol * (1 + |a| + |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs() + b.abs())
}

pub fn params_close(a: &NetworkParams, b: &NetworkParams, tol: f64) -> bool {
    a.arch() == b.arch() && a.to_flat().iter().zip(b.to_flat()).all(|(x, y)| close(*x, y, tol))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Recovery {
    Equivalent(RescalingVectors),
    NotEquivalent,
}

/// First outgoing path `(v, v_{l+1}, ..., v_L)` built by repeatedly taking
/// the smallest-index successor with a nonzero weight.
pub fn greedy_output_path(params: &NetworkParams, layer: usize, index: usize) -> Option<Vec<usize>> {
    let arch = params.arch();
    let mut path = vec![index];
    let mut current = index;
    for l in layer..arch.depth() {
        let next = (0..arch.width(l + 1)).find(|&t| *params.weight(l, current, t) != 0.0)?;
        path.push(next);
        current = next;
    }
    Some(path)
}

fn require_nondegenerate(params: &NetworkParams, tol_s: f64) -> Result<()> {
    let check = is_degenerate_s(params, &tol_s);
    if check.degenerate {
        return Err(Error::Degenerate { witnesses: check.neurons() });
    }
    Ok(())
}

/// Finds `lambda` with `apply_rescaling(theta, lambda) = theta_tilde`, if any.
///
/// Candidate factors come from ratios of output path products; the
/// candidate is accepted only if re-applying it reproduces `theta_tilde`
/// entrywise within `tol` (see [`close`]).
pub fn recover_rescaling(theta: &NetworkParams, theta_tilde: &NetworkParams, tol: f64, tol_s: f64) -> Result<Recovery> {
    require_nondegenerate(theta, tol_s)?;
    let arch = theta.arch();
    if arch != theta_tilde.arch() {
        return Err(Error::Shape("parameters have different architectures".into()));
    }
    let mut lambda = RescalingVectors::identity(arch);
    for l in 1..arch.depth() {
        for v in 0..arch.width(l) {
            let path = greedy_output_path(theta, l, v)
                .ok_or_else(|| Error::Precondition(format!("hidden neuron v{l}_{v} has no nonzero outgoing path")))?;
            let ours = output_path_product(theta, l, &path)?;
            let theirs = output_path_product(theta_tilde, l, &path)?;
            let ratio = theirs / ours;
            if ratio == 0.0 || !ratio.is_finite() {
                return Ok(Recovery::NotEquivalent);
            }
            lambda.layers[l][v] = ratio;
        }
    }
    let rebuilt = apply_rescaling(theta, &lambda)?;
    if params_close(&rebuilt, theta_tilde, tol) {
        Ok(Recovery::Equivalent(lambda))
    } else {
        Ok(Recovery::NotEquivalent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Equivalence {
    /// Related by a rescaling with positive factors (same sign pattern).
    PositiveRescaling,
    /// Related by a rescaling, but the sign patterns differ.
    RescalingOnly,
    NotEquivalent,
}

pub fn are_equivalent(theta: &NetworkParams, theta_tilde: &NetworkParams, tol: f64, tol_s: f64) -> Result<Equivalence> {
    Ok(match recover_rescaling(theta, theta_tilde, tol, tol_s)? {
        Recovery::NotEquivalent => Equivalence::NotEquivalent,
        Recovery::Equivalent(_) if sign_pattern(theta) == sign_pattern(theta_tilde) => Equivalence::PositiveRescaling,
        Recovery::Equivalent(_) => Equivalence::RescalingOnly,
    })
}

/// Positive rescaling after which every hidden neuron's largest outgoing
/// weight has absolute value one. Returns the new parameters and the
/// factors used.
pub fn canonicalize(params: &NetworkParams, tol_s: f64) -> Result<(NetworkParams, RescalingVectors)> {
    require_nondegenerate(params, tol_s)?;
    let arch = params.arch();
    let mut lambda = RescalingVectors::identity(arch);
    for l in (1..arch.depth()).rev() {
        for v in 0..arch.width(l) {
            let largest = (0..arch.width(l + 1)).map(|t| (params.weight(l, v, t) / lambda.layers[l + 1][t]).abs()).fold(0.0, f64::max);
            lambda.layers[l][v] = 1.0 / largest;
        }
    }
    Ok((apply_rescaling(params, &lambda)?, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward_batch, Architecture};
    use crate::pathspace::{enumerate_paths, lift, DEFAULT_PATH_CAP};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn chain(theta: [f64; 4]) -> NetworkParams {
        NetworkParams::from_flat(Architecture::new(vec![1, 1, 1]).unwrap(), &theta).unwrap()
    }

    fn random_params(sizes: &[usize], seed: u64) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkParams::random_normal(Architecture::new(sizes.to_vec()).unwrap(), &mut rng)
    }

    fn lambda_chain(v: f64) -> RescalingVectors {
        RescalingVectors { layers: vec![DVector::from_element(1, 1.0), DVector::from_element(1, v), DVector::from_element(1, 1.0)] }
    }

    #[test]
    fn identity_rescaling_is_a_no_op() {
        let p = random_params(&[2, 3, 2], 1);
        assert_eq!(apply_rescaling(&p, &RescalingVectors::identity(p.arch())).unwrap(), p);
    }

    #[test]
    fn chain_rescaling_by_two() {
        let p = chain([1.0, 1.0, 0.0, 0.0]);
        let q = apply_rescaling(&p, &lambda_chain(2.0)).unwrap();
        assert_eq!(q.to_flat(), vec![0.5, 2.0, 0.0, 0.0]);
        let e = enumerate_paths(p.arch(), DEFAULT_PATH_CAP).unwrap();
        assert_eq!(lift(&p, &e), lift(&q, &e));
    }

    #[test]
    fn invalid_lambda_is_rejected() {
        let p = chain([1.0, 1.0, 0.0, 0.0]);
        assert!(apply_rescaling(&p, &lambda_chain(0.0)).is_err());
        let mut bad = lambda_chain(2.0);
        bad.layers[2][0] = 3.0;
        assert!(apply_rescaling(&p, &bad).is_err());
    }

    #[test]
    fn random_rescaling_contract() {
        let arch = Architecture::new(vec![2, 3, 4, 2]).unwrap();
        assert_eq!(random_rescaling(&arch, 3, true, 1.0).unwrap(), RescalingVectors::identity(&arch));
        let a = random_rescaling(&arch, 9, true, 10.0).unwrap();
        assert!(a.hidden_entries().iter().all(|&x| x > 0.0 && (0.1..=10.0).contains(&x)));
        assert_eq!(a, random_rescaling(&arch, 9, true, 10.0).unwrap());
        let signed = random_rescaling(&arch, 9, false, 10.0).unwrap();
        assert!(signed.hidden_entries().iter().any(|&x| x < 0.0));
        signed.validate(&arch).unwrap();
        assert!(random_rescaling(&arch, 0, true, 0.0).is_err());
    }

    #[test]
    fn recover_identity_and_perturbation() {
        let p = random_params(&[2, 3, 2], 4);
        match recover_rescaling(&p, &p, 1e-12, 1e-12).unwrap() {
            Recovery::Equivalent(l) => assert!(l.hidden_entries().iter().all(|&x| x == 1.0)),
            Recovery::NotEquivalent => panic!("theta must be equivalent to itself"),
        }
        let mut q = p.clone();
        *q.weight_mut(0, 1, 2) += 0.1;
        assert_eq!(recover_rescaling(&p, &q, 1e-9, 1e-12).unwrap(), Recovery::NotEquivalent);
    }

    #[test]
    fn recover_requires_nondegenerate_theta() {
        let p = chain([0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(recover_rescaling(&p, &p, 1e-9, 0.0), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn equivalence_classes() {
        let p = random_params(&[2, 3, 2], 6);
        let positive = random_rescaling(p.arch(), 1, true, 4.0).unwrap();
        let q = apply_rescaling(&p, &positive).unwrap();
        assert_eq!(are_equivalent(&p, &q, 1e-9, 1e-12).unwrap(), Equivalence::PositiveRescaling);

        let mut negative = RescalingVectors::identity(p.arch());
        negative.layers[1][0] = -2.0;
        let q = apply_rescaling(&p, &negative).unwrap();
        assert_eq!(are_equivalent(&p, &q, 1e-9, 1e-12).unwrap(), Equivalence::RescalingOnly);

        let other = random_params(&[2, 3, 2], 7);
        assert_eq!(are_equivalent(&p, &other, 1e-9, 1e-12).unwrap(), Equivalence::NotEquivalent);
    }

    #[test]
    fn canonical_form_has_unit_max_outflow() {
        let p = random_params(&[3, 4, 4, 2], 2);
        let (c, lambda) = canonicalize(&p, 1e-12).unwrap();
        assert!(lambda.hidden_entries().iter().all(|&x| x > 0.0));
        for v in p.arch().hidden_neurons() {
            let largest = c.weight_matrix(v.layer + 1).column(v.index).amax();
            assert!((largest - 1.0).abs() < 1e-12);
        }
        assert_eq!(are_equivalent(&p, &c, 1e-9, 1e-12).unwrap(), Equivalence::PositiveRescaling);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn lift_and_outputs_are_invariant(seed in 0u64..100_000, arch_pick in 0usize..3) {
            let sizes = [vec![2, 3, 2], vec![3, 4, 4, 2], vec![1, 2, 3, 1]][arch_pick].clone();
            let p = random_params(&sizes, seed);
            let lambda = random_rescaling(p.arch(), seed ^ 0xabcd, true, 5.0).unwrap();
            let q = apply_rescaling(&p, &lambda).unwrap();
            prop_assert_eq!(sign_pattern(&p), sign_pattern(&q));
            let e = enumerate_paths(p.arch(), DEFAULT_PATH_CAP).unwrap();
            let (a, b) = (lift(&p, &e).matrix, lift(&q, &e).matrix);
            prop_assert!((&a - &b).amax() <= 1e-12 * a.amax().max(1.0));

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(6, sizes[0], |_, _| rng.sample::<f64, _>(StandardNormal));
            let (fa, fb) = (forward_batch(&p, &x).unwrap(), forward_batch(&q, &x).unwrap());
            prop_assert!((&fa - &fb).amax() <= 1e-9 * (1.0 + fa.amax()));

            match recover_rescaling(&p, &q, 1e-10, 1e-12).unwrap() {
                Recovery::Equivalent(r) => {
                    for (x, y) in r.hidden_entries().iter().zip(lambda.hidden_entries()) {
                        prop_assert!((x - y).abs() <= 1e-10 * y.abs());
                    }
                }
                Recovery::NotEquivalent => prop_assert!(false, "round trip failed"),
            }
        }

        #[test]
        fn equivalence_relation_laws(seed in 0u64..100_000) {
            let p = random_params(&[2, 3, 3, 2], seed);
            let l1 = random_rescaling(p.arch(), seed + 1, true, 3.0).unwrap();
            let l2 = random_rescaling(p.arch(), seed + 2, true, 3.0).unwrap();
            let q = apply_rescaling(&p, &l1).unwrap();
            let r = apply_rescaling(&q, &l2).unwrap();
            prop_assert_eq!(are_equivalent(&p, &p, 1e-9, 1e-12).unwrap(), Equivalence::PositiveRescaling);
            prop_assert_eq!(are_equivalent(&q, &p, 1e-9, 1e-12).unwrap(), Equivalence::PositiveRescaling);
            prop_assert!(params_close(&apply_rescaling(&q, &l1.inverse()).unwrap(), &p, 1e-12));
            prop_assert_eq!(are_equivalent(&p, &r, 1e-9, 1e-12).unwrap(), Equivalence::PositiveRescaling);
            prop_assert!(params_close(&apply_rescaling(&p, &l1.compose(&l2)).unwrap(), &r, 1e-12));
        }
    }

    #[test]
    fn equal_lift_implies_rescaling() {
        // Build theta_tilde directly from path-product ratios so that the lifts
        // agree exactly, then recover.
        let p = NetworkParams::from_flat(Architecture::new(vec![1, 2, 1]).unwrap(), &[2.0, -1.0, 4.0, 3.0, 1.0, 2.0, 5.0]).unwrap();
        let q = NetworkParams::from_flat(p.arch().clone(), &[1.0, -4.0, 8.0, 0.75, 0.5, 8.0, 5.0]).unwrap();
        let e = enumerate_paths(p.arch(), DEFAULT_PATH_CAP).unwrap();
        assert_eq!(lift(&p, &e), lift(&q, &e));
        match recover_rescaling(&p, &q, 1e-12, 1e-12).unwrap() {
            Recovery::Equivalent(l) => assert_eq!(l.hidden_entries(), vec![2.0, 0.25]),
            Recovery::NotEquivalent => panic!("equal lifts must be rescaling-equivalent"),
        }
    }
}
