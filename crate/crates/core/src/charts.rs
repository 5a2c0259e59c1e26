//! Restricted parameterization around an anchor `theta`.
//!
//! For each hidden neuron the outgoing edge with the largest absolute
//! weight (smallest successor index on ties) is frozen at its anchor
//! value. The remaining edges (`F_theta`) and all biases form the
//! restricted coordinates `tau`. Coordinates are ordered: free edges by
//! (source layer, source, target), then biases by (layer, neuron).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{is_degenerate_s, NetworkParams, NeuronId};
use crate::pathspace::{for_each_tuple, lift, LiftedMatrix, PathEnumeration};
use crate::scalar::Scalar;

pub const TIE_BREAK_RULE: &str = "smallest-successor-index";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub source_layer: usize,
    pub source: usize,
    pub target: usize,
}

impl std::fmt::Display for Edge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "w{}:{}->{}", self.source_layer, self.source, self.target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coordinate {
    Edge(Edge),
    Bias(NeuronId),
}

impl std::fmt::Display for Coordinate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Coordinate::Edge(e) => e.fmt(f),
            Coordinate::Bias(v) => write!(f, "b{}:{}", v.layer, v.index),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartContext<T: Scalar = f64> {
    anchor: NetworkParams<T>,
    /// `smax[l - 1][v]` for hidden layer `l`.
    smax: Vec<Vec<usize>>,
    free_edges: Vec<Edge>,
    /// `edge_coord[l][source * N_{l+1} + target]`, `None` for fixed edges.
    edge_coord: Vec<Vec<Option<usize>>>,
    bias_offsets: Vec<usize>,
}

/// Restricted coordinates `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedParams<T: Scalar = f64>(pub DVector<T>);

pub fn build_chart<T: Scalar>(params: &NetworkParams<T>, tol_s: &T) -> Result<ChartContext<T>> {
    let check = is_degenerate_s(params, tol_s);
    if check.degenerate {
        return Err(Error::Degenerate { witnesses: check.neurons() });
    }
    let arch = params.arch();
    let depth = arch.depth();
    let mut smax = Vec::with_capacity(depth - 1);
    for l in 1..depth {
        let choice: Vec<usize> = (0..arch.width(l))
            .map(|v| {
                let mut best = 0;
                for t in 1..arch.width(l + 1) {
                    if params.weight(l, v, t).abs() > params.weight(l, v, best).abs() {
                        best = t;
                    }
                }
                best
            })
            .collect();
        smax.push(choice);
    }
    let mut free_edges = Vec::new();
    let mut edge_coord = Vec::with_capacity(depth);
    for l in 0..depth {
        let mut coords = vec![None; arch.width(l) * arch.width(l + 1)];
        for source in 0..arch.width(l) {
            for target in 0..arch.width(l + 1) {
                let fixed = l >= 1 && smax[l - 1][source] == target;
                if !fixed {
                    coords[source * arch.width(l + 1) + target] = Some(free_edges.len());
                    free_edges.push(Edge { source_layer: l, source, target });
                }
            }
        }
        edge_coord.push(coords);
    }
    let mut bias_offsets = Vec::with_capacity(depth);
    let mut next = free_edges.len();
    for l in 1..=depth {
        bias_offsets.push(next);
        next += arch.width(l);
    }
    Ok(ChartContext { anchor: params.clone(), smax, free_edges, edge_coord, bias_offsets })
}

impl<T: Scalar> ChartContext<T> {
    pub fn anchor(&self) -> &NetworkParams<T> {
        &self.anchor
    }

    /// `s_max(v)` for a hidden neuron.
    pub fn smax(&self, v: NeuronId) -> usize {
        self.smax[v.layer - 1][v.index]
    }

    pub fn free_edges(&self) -> &[Edge] {
        &self.free_edges
    }

    /// Frozen edges `v -> s_max(v)` with their anchor weights.
    pub fn fixed_edges(&self) -> Vec<(Edge, T)> {
        self.anchor
            .arch()
            .hidden_neurons()
            .map(|v| {
                let target = self.smax(v);
                (Edge { source_layer: v.layer, source: v.index, target }, self.anchor.weight(v.layer, v.index, target).clone())
            })
            .collect()
    }

    /// `|F_theta| + |B|`.
    pub fn dim(&self) -> usize {
        self.free_edges.len() + self.anchor.arch().num_biases()
    }

    pub fn edge_coordinate(&self, source_layer: usize, source: usize, target: usize) -> Option<usize> {
        let width = self.anchor.arch().width(source_layer + 1);
        self.edge_coord[source_layer][source * width + target]
    }

    pub fn bias_coordinate(&self, layer: usize, index: usize) -> usize {
        self.bias_offsets[layer - 1] + index
    }

    pub fn coordinate(&self, k: usize) -> Coordinate {
        if k < self.free_edges.len() {
            return Coordinate::Edge(self.free_edges[k]);
        }
        let layer = self.bias_offsets.partition_point(|&o| o <= k);
        Coordinate::Bias(NeuronId { layer, index: k - self.bias_offsets[layer - 1] })
    }

    pub fn coordinates(&self) -> Vec<Coordinate> {
        (0..self.dim()).map(|k| self.coordinate(k)).collect()
    }

    fn check_tau(&self, tau: &RestrictedParams<T>) -> Result<()> {
        if tau.0.len() != self.dim() {
            return Err(Error::Shape(format!("restricted vector has length {}, expected {}", tau.0.len(), self.dim())));
        }
        Ok(())
    }
}

/// `tau_theta`: the anchor's free weights and biases.
pub fn restricted_from<T: Scalar>(ctx: &ChartContext<T>) -> RestrictedParams<T> {
    let anchor = ctx.anchor();
    let arch = anchor.arch();
    let mut tau = Vec::with_capacity(ctx.dim());
    for e in ctx.free_edges() {
        tau.push(anchor.weight(e.source_layer, e.source, e.target).clone());
    }
    for l in 1..=arch.depth() {
        tau.extend(anchor.bias_vector(l).iter().cloned());
    }
    RestrictedParams(DVector::from_vec(tau))
}

/// `rho_theta(tau)`: free edges and biases from `tau`, frozen edges from the anchor.
pub fn embed<T: Scalar>(ctx: &ChartContext<T>, tau: &RestrictedParams<T>) -> Result<NetworkParams<T>> {
    ctx.check_tau(tau)?;
    let mut out = ctx.anchor().clone();
    for (k, e) in ctx.free_edges().iter().enumerate() {
        *out.weight_mut(e.source_layer, e.source, e.target) = tau.0[k].clone();
    }
    let arch = out.arch().clone();
    for l in 1..=arch.depth() {
        for v in 0..arch.width(l) {
            *out.bias_mut(l, v) = tau.0[ctx.bias_coordinate(l, v)].clone();
        }
    }
    Ok(out)
}

/// Whether `rho_theta(tau)` stays outside the degenerate set.
pub fn in_u_theta<T: Scalar>(ctx: &ChartContext<T>, tau: &RestrictedParams<T>, tol_s: &T) -> Result<bool> {
    Ok(!is_degenerate_s(&embed(ctx, tau)?, tol_s).degenerate)
}

/// `psi^theta(tau) = phi(rho_theta(tau))`.
pub fn local_lift<T: Scalar>(ctx: &ChartContext<T>, tau: &RestrictedParams<T>, paths: &PathEnumeration) -> Result<LiftedMatrix<T>> {
    Ok(lift(&embed(ctx, tau)?, paths))
}

/// Jacobian of `psi^theta` at `tau`, rows indexed `(p, v_L)` with the path
/// ordinal major, columns in restricted-coordinate order.
pub fn jacobian_psi<T: Scalar>(ctx: &ChartContext<T>, tau: &RestrictedParams<T>, paths: &PathEnumeration) -> Result<DMatrix<T>> {
    let params = embed(ctx, tau)?;
    let arch = params.arch();
    let depth = arch.depth();
    let n_out = arch.output_dim();
    let mut jac = DMatrix::from_element(paths.len() * n_out, ctx.dim(), T::zero());
    // Each entry of psi is a product of factors (optional bias, then edge
    // weights); the partial in one factor is the product of the others.
    let mut factors: Vec<(T, Option<usize>)> = Vec::with_capacity(depth + 1);
    for start in 0..depth {
        let choices: Vec<Vec<usize>> = (start..=depth).map(|k| (0..arch.width(k)).collect()).collect();
        let block_start = paths.block(start).start;
        let mut local = 0usize;
        for_each_tuple(&choices, |full| {
            let ordinal = block_start + local / n_out;
            let out = full[full.len() - 1];
            local += 1;
            factors.clear();
            if start >= 1 {
                factors.push((params.bias(start, full[0]).clone(), Some(ctx.bias_coordinate(start, full[0]))));
            }
            for k in 0..full.len() - 1 {
                let l = start + k;
                factors.push((params.weight(l, full[k], full[k + 1]).clone(), ctx.edge_coordinate(l, full[k], full[k + 1])));
            }
            let row = ordinal * n_out + out;
            let m = factors.len();
            let mut suffix = vec![T::one(); m + 1];
            for k in (0..m).rev() {
                suffix[k] = suffix[k + 1].clone() * factors[k].0.clone();
            }
            let mut prefix = T::one();
            for k in 0..m {
                if let Some(col) = factors[k].1 {
                    jac[(row, col)] = prefix.clone() * suffix[k + 1].clone();
                }
                prefix *= factors[k].0.clone();
            }
        });
    }
    let beta = paths.beta();
    for out in 0..n_out {
        jac[(beta * n_out + out, ctx.bias_coordinate(depth, out))] = T::one();
    }
    Ok(jac)
}

/// Human-readable description of a chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartReport {
    pub tie_break: String,
    pub smax: Vec<SmaxEntry>,
    pub fixed_edges: Vec<FixedEdge>,
    pub num_free_edges: usize,
    pub num_biases: usize,
    pub dimension: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmaxEntry {
    pub neuron: NeuronId,
    pub successor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEdge {
    pub edge: Edge,
    pub value: f64,
}

impl ChartContext<f64> {
    pub fn report(&self) -> ChartReport {
        let arch = self.anchor.arch();
        ChartReport {
            tie_break: TIE_BREAK_RULE.to_string(),
            smax: arch.hidden_neurons().map(|v| SmaxEntry { neuron: v, successor: self.smax(v) }).collect(),
            fixed_edges: self.fixed_edges().into_iter().map(|(edge, value)| FixedEdge { edge, value }).collect(),
            num_free_edges: self.free_edges.len(),
            num_biases: arch.num_biases(),
            dimension: self.dim(),
        }
    }
}
