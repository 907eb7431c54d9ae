//! Graph refinement over box proposals.
//!
//! Proposals become nodes of a radius graph (with self-loops). Each update
//! iteration transforms every neighbor state through an aggregation stack,
//! max-pools channel-wise, fuses the pooled vector through a ReLU stack and
//! adds it residually:
//!
//! ```text
//! h_N(i)^k = max_{j in N(i)} G_k(m_ij)
//! h_i^k    = h_i^{k-1} + relu(F_k(h_N(i)^k))
//! ```
//!
//! The vanilla variant uses `m_ij = h_j^{k-1}`; the extended variant uses
//! `m_ij = [x_i - x_j - dx_i^k ; h_j^{k-1}]`, where the alignment offset
//! `dx_i^k = A_k(h_i^{k-1})` is predicted once per node and iteration.
//! Iterations are synchronous: iteration `k` only reads states from `k - 1`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{decode_box, BoxEncoding};
use crate::interp::{dist2, SpatialHash};
use crate::nnet::{sigmoid, Activation, DenseStack, Parameters, StackTrace};
use crate::scene::Box3D;

/// Default cut-off radius between proposal centroids, meters.
pub const DEFAULT_RADIUS: f64 = 2.0;
/// Default number of update iterations.
pub const DEFAULT_ITERATIONS: usize = 3;
pub const MAX_ITERATIONS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub coords: [f64; 3],
    pub state: Vec<f64>,
    pub node_id: usize,
}

/// Undirected radius graph; every node lists itself among its neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodGraph {
    nodes: Vec<GraphNode>,
    adjacency: Vec<Vec<usize>>,
    radius: f64,
    state_dim: usize,
}

/// Connects proposals whose centroids are strictly closer than `radius`.
pub fn build_graph(proposals: &[(Box3D, Vec<f64>)], radius: f64) -> Result<NeighborhoodGraph> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Range(format!("graph radius {radius} must be positive")));
    }
    let state_dim = proposals.first().map_or(0, |(_, s)| s.len());
    let mut nodes = Vec::with_capacity(proposals.len());
    for (i, (b, s)) in proposals.iter().enumerate() {
        if s.len() != state_dim {
            return Err(Error::dim(state_dim, s.len(), "node state"));
        }
        if !b.is_finite() || s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range(format!("proposal {i} has non-finite values")));
        }
        nodes.push(GraphNode {
            coords: b.center,
            state: s.clone(),
            node_id: i,
        });
    }
    let coords: Vec<[f64; 3]> = nodes.iter().map(|n| n.coords).collect();
    let hash = SpatialHash::new(&coords, radius)?;
    // `within` uses the same strict comparison, and i is always within of itself.
    let adjacency = coords.iter().map(|&c| hash.within(c, radius)).collect();
    Ok(NeighborhoodGraph {
        nodes,
        adjacency,
        radius,
        state_dim,
    })
}

impl NeighborhoodGraph {
    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    /// Number of undirected edges, self-loops included.
    pub fn edge_count(&self) -> usize {
        let total: usize = self.adjacency.iter().map(Vec::len).sum();
        (total + self.nodes.len()) / 2
    }

    /// Replaces the neighbor list of node `i` by a reordering of itself.
    pub fn reorder_neighbors(&mut self, i: usize, order: Vec<usize>) -> Result<()> {
        let mut a = order.clone();
        let mut b = self.adjacency[i].clone();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(Error::Contract(format!("new neighbor list of node {i} is not a permutation")));
        }
        self.adjacency[i] = order;
        Ok(())
    }

    pub fn set_state(&mut self, i: usize, state: Vec<f64>) -> Result<()> {
        if state.len() != self.state_dim {
            return Err(Error::dim(self.state_dim, state.len(), "node state"));
        }
        self.nodes[i].state = state;
        Ok(())
    }

    pub fn set_coords(&mut self, i: usize, coords: [f64; 3]) {
        self.nodes[i].coords = coords;
    }

    /// Same edges and nodes, every coordinate shifted by `t`.
    pub fn translated(&self, t: [f64; 3]) -> Self {
        let mut g = self.clone();
        for n in &mut g.nodes {
            for a in 0..3 {
                n.coords[a] += t[a];
            }
        }
        g
    }

    /// Hop distances from `source` (`usize::MAX` when unreachable).
    pub fn hop_distances(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.len()];
        let mut queue = std::collections::VecDeque::from([source]);
        dist[source] = 0;
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Squared distance between two node centroids.
    pub fn centroid_dist2(&self, i: usize, j: usize) -> f64 {
        dist2(self.nodes[i].coords, self.nodes[j].coords)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    Vanilla,
    #[default]
    Extended,
}

/// Stacks of one update iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStep {
    pub aggregation: DenseStack,
    /// Ends in ReLU (the nonlinearity before the residual add).
    pub fusion: DenseStack,
    /// Extended mode only: state -> 3D alignment offset.
    pub alignment: Option<DenseStack>,
}

/// Layer widths of a [`GraphUpdater`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdaterShape {
    pub mode: UpdateMode,
    pub iterations: usize,
    /// Hidden widths of the aggregation stack followed by its output width.
    pub aggregation_widths: Vec<usize>,
    /// Hidden widths of the fusion stack (its output is the state width).
    pub fusion_hidden: Vec<usize>,
    /// Hidden widths of the alignment stack (its output is 3).
    pub alignment_hidden: Vec<usize>,
}

impl Default for UpdaterShape {
    fn default() -> Self {
        Self {
            mode: UpdateMode::Extended,
            iterations: DEFAULT_ITERATIONS,
            aggregation_widths: vec![32, 32],
            fusion_hidden: vec![],
            alignment_hidden: vec![16],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphUpdater {
    pub mode: UpdateMode,
    pub steps: Vec<UpdateStep>,
}

impl GraphUpdater {
    /// Glorot-initialized updater for node states of width `state_dim`.
    pub fn new(shape: &UpdaterShape, state_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::build(shape, state_dim, |dims, last| DenseStack::glorot(dims, last, rng))
    }

    /// All parameters zero: the fusion branch outputs `relu(0) = 0`, so the
    /// update is the identity.
    pub fn zeros(shape: &UpdaterShape, state_dim: usize) -> Result<Self> {
        Self::build(shape, state_dim, DenseStack::zeros)
    }

    fn build(
        shape: &UpdaterShape,
        state_dim: usize,
        mut make: impl FnMut(&[usize], Activation) -> Result<DenseStack>,
    ) -> Result<Self> {
        if shape.iterations > MAX_ITERATIONS {
            return Err(Error::Config(format!(
                "{} update iterations exceed the supported {MAX_ITERATIONS}",
                shape.iterations
            )));
        }
        if shape.aggregation_widths.is_empty() {
            return Err(Error::Config("aggregation stack needs an output width".into()));
        }
        if state_dim == 0 {
            return Err(Error::Config("node state width must be positive".into()));
        }
        let extended = shape.mode == UpdateMode::Extended;
        let agg_in = state_dim + if extended { 3 } else { 0 };
        let pooled = *shape.aggregation_widths.last().expect("non-empty");
        let mut steps = Vec::with_capacity(shape.iterations);
        for _ in 0..shape.iterations {
            let mut agg_dims = vec![agg_in];
            agg_dims.extend(&shape.aggregation_widths);
            let mut fus_dims = vec![pooled];
            fus_dims.extend(&shape.fusion_hidden);
            fus_dims.push(state_dim);
            let aggregation = make(&agg_dims, Activation::Identity)?;
            let fusion = make(&fus_dims, Activation::Relu)?;
            let alignment = if extended {
                let mut dims = vec![state_dim];
                dims.extend(&shape.alignment_hidden);
                dims.push(3);
                Some(make(&dims, Activation::Identity)?)
            } else {
                None
            };
            steps.push(UpdateStep {
                aggregation,
                fusion,
                alignment,
            });
        }
        Ok(Self {
            mode: shape.mode,
            steps,
        })
    }

    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |p| *p = 0.0);
        z
    }

    /// Checks every stack against node states of width `state_dim`.
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        let extended = self.mode == UpdateMode::Extended;
        let agg_in = state_dim + if extended { 3 } else { 0 };
        for step in &self.steps {
            if step.aggregation.input_dim() != agg_in {
                return Err(Error::dim(agg_in, step.aggregation.input_dim(), "aggregation input"));
            }
            if step.fusion.input_dim() != step.aggregation.output_dim() {
                return Err(Error::dim(
                    step.aggregation.output_dim(),
                    step.fusion.input_dim(),
                    "fusion input",
                ));
            }
            if step.fusion.output_dim() != state_dim {
                return Err(Error::dim(state_dim, step.fusion.output_dim(), "fusion output"));
            }
            match (&step.alignment, extended) {
                (Some(a), true) => {
                    if a.input_dim() != state_dim || a.output_dim() != 3 {
                        return Err(Error::dim(state_dim, a.input_dim(), "alignment stack"));
                    }
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(Error::Config("vanilla updater must not carry an alignment stack".into()))
                }
                (None, true) => {
                    return Err(Error::Config("extended updater needs an alignment stack".into()))
                }
            }
        }
        Ok(())
    }

    /// Runs the update in this updater's mode.
    pub fn run(&self, graph: &NeighborhoodGraph) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(graph)?.outputs().to_vec())
    }

    /// Forward pass keeping every intermediate needed by [`Self::backward`].
    pub fn forward(&self, graph: &NeighborhoodGraph) -> Result<UpdateTrace> {
        if !graph.is_empty() {
            self.validate(graph.state_dim)?;
        }
        let extended = self.mode == UpdateMode::Extended;
        let n = graph.len();
        let mut states: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.steps.len() + 1);
        states.push(graph.nodes.iter().map(|nd| nd.state.clone()).collect());
        let mut iters = Vec::with_capacity(self.steps.len());
        for step in &self.steps {
            let prev = states.last().expect("initial states");
            let mut it = IterationTrace {
                align: Vec::with_capacity(n),
                offsets: Vec::with_capacity(n),
                edges: Vec::with_capacity(n),
                argmax: Vec::with_capacity(n),
                fusion: Vec::with_capacity(n),
            };
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let (align, delta) = match (&step.alignment, extended) {
                    (Some(a), true) => {
                        let t = a.forward_trace(&prev[i])?;
                        let d = [t.output()[0], t.output()[1], t.output()[2]];
                        (Some(t), d)
                    }
                    _ => (None, [0.0; 3]),
                };
                let xi = graph.nodes[i].coords;
                let mut edge_traces = Vec::with_capacity(graph.adjacency[i].len());
                for &j in &graph.adjacency[i] {
                    let input = if extended {
                        let xj = graph.nodes[j].coords;
                        let mut m = Vec::with_capacity(3 + graph.state_dim);
                        for a in 0..3 {
                            m.push(xi[a] - xj[a] - delta[a]);
                        }
                        m.extend_from_slice(&prev[j]);
                        m
                    } else {
                        prev[j].clone()
                    };
                    edge_traces.push(step.aggregation.forward_trace(&input)?);
                }
                let (pooled, arg) = pool_max(&edge_traces, &graph.adjacency[i], step.aggregation.output_dim());
                let f = step.fusion.forward_trace(&pooled)?;
                let h: Vec<f64> = prev[i].iter().zip(f.output()).map(|(a, b)| a + b).collect();
                next.push(h);
                it.align.push(align);
                it.offsets.push(delta);
                it.edges.push(edge_traces);
                it.argmax.push(arg);
                it.fusion.push(f);
            }
            states.push(next);
            iters.push(it);
        }
        Ok(UpdateTrace { states, iters })
    }

    /// Backpropagates `d_out` (gradient w.r.t. every `z_i`) through a recorded pass.
    pub fn backward(
        &self,
        graph: &NeighborhoodGraph,
        trace: &UpdateTrace,
        d_out: &[Vec<f64>],
    ) -> Result<UpdateGradients> {
        let n = graph.len();
        if d_out.len() != n {
            return Err(Error::dim(n, d_out.len(), "updater output gradient"));
        }
        let extended = self.mode == UpdateMode::Extended;
        let mut grads = self.zeros_like();
        let mut d_coords = vec![[0.0; 3]; n];
        let mut d_h: Vec<Vec<f64>> = d_out.to_vec();
        for (k, step) in self.steps.iter().enumerate().rev() {
            let it = &trace.iters[k];
            let g = &mut grads.steps[k];
            // Residual path.
            let mut d_prev = d_h.clone();
            for i in 0..n {
                let d_pooled = step.fusion.backward_into(&it.fusion[i], &d_h[i], &mut g.fusion)?;
                let pooled_dim = d_pooled.len();
                // Route each pooled channel to the neighbor that won it.
                let mut d_edge: Vec<Vec<f64>> = vec![vec![0.0; pooled_dim]; it.edges[i].len()];
                for (c, win) in it.argmax[i].iter().enumerate() {
                    if let Some(e) = win {
                        d_edge[*e][c] += d_pooled[c];
                    }
                }
                let mut d_delta = [0.0; 3];
                for (e, &j) in graph.adjacency[i].iter().enumerate() {
                    if d_edge[e].iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let d_in = step
                        .aggregation
                        .backward_into(&it.edges[i][e], &d_edge[e], &mut g.aggregation)?;
                    let state_part = if extended {
                        for a in 0..3 {
                            d_coords[i][a] += d_in[a];
                            d_coords[j][a] -= d_in[a];
                            d_delta[a] -= d_in[a];
                        }
                        &d_in[3..]
                    } else {
                        &d_in[..]
                    };
                    for (dp, v) in d_prev[j].iter_mut().zip(state_part) {
                        *dp += v;
                    }
                }
                if let (Some(a), Some(t), Some(ga)) =
                    (&step.alignment, &it.align[i], g.alignment.as_mut())
                {
                    let d_state = a.backward_into(t, &d_delta, ga)?;
                    for (dp, v) in d_prev[i].iter_mut().zip(&d_state) {
                        *dp += v;
                    }
                }
            }
            d_h = d_prev;
        }
        Ok(UpdateGradients {
            params: grads,
            d_states: d_h,
            d_coords,
        })
    }
}

impl Parameters for GraphUpdater {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        for s in &self.steps {
            s.aggregation.visit(f);
            s.fusion.visit(f);
            if let Some(a) = &s.alignment {
                a.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        for s in &mut self.steps {
            s.aggregation.visit_mut(f);
            s.fusion.visit_mut(f);
            if let Some(a) = &mut s.alignment {
                a.visit_mut(f);
            }
        }
    }
}

/// Channel-wise max over the edge outputs. Exact ties go to the neighbor with
/// the lowest node id, independent of adjacency order.
fn pool_max(edges: &[StackTrace], neighbors: &[usize], dim: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut best = vec![0.0; dim];
    let mut arg: Vec<Option<usize>> = vec![None; dim];
    for (e, t) in edges.iter().enumerate() {
        let out = t.output();
        for c in 0..dim {
            let take = match arg[c] {
                None => true,
                Some(w) => out[c] > best[c] || (out[c] == best[c] && neighbors[e] < neighbors[w]),
            };
            if take {
                best[c] = out[c];
                arg[c] = Some(e);
            }
        }
    }
    (best, arg)
}

#[derive(Debug, Clone)]
struct IterationTrace {
    align: Vec<Option<StackTrace>>,
    offsets: Vec<[f64; 3]>,
    edges: Vec<Vec<StackTrace>>,
    argmax: Vec<Vec<Option<usize>>>,
    fusion: Vec<StackTrace>,
}

/// Recorded forward pass of a [`GraphUpdater`].
#[derive(Debug, Clone)]
pub struct UpdateTrace {
    states: Vec<Vec<Vec<f64>>>,
    iters: Vec<IterationTrace>,
}

impl UpdateTrace {
    /// Final states `z_i`.
    pub fn outputs(&self) -> &[Vec<f64>] {
        self.states.last().expect("initial states are always present")
    }

    /// States after iteration `k` (`k = 0` is the input).
    pub fn states(&self, k: usize) -> &[Vec<f64>] {
        &self.states[k]
    }

    /// Alignment offsets predicted at iteration `k` (1-based), one per node.
    pub fn alignment_offsets(&self, k: usize) -> &[[f64; 3]] {
        &self.iters[k - 1].offsets
    }
}

#[derive(Debug, Clone)]
pub struct UpdateGradients {
    pub params: GraphUpdater,
    /// Gradient with respect to the initial node states.
    pub d_states: Vec<Vec<f64>>,
    /// Gradient with respect to the node coordinates (extended mode).
    pub d_coords: Vec<[f64; 3]>,
}

/// Synchronous vanilla update; `updater` must be in vanilla mode.
pub fn update_vanilla(graph: &NeighborhoodGraph, updater: &GraphUpdater) -> Result<Vec<Vec<f64>>> {
    if updater.mode != UpdateMode::Vanilla {
        return Err(Error::Config("update_vanilla needs a vanilla-mode updater".into()));
    }
    updater.run(graph)
}

/// Synchronous extended update with relative offsets and alignment offsets.
pub fn update_extended(graph: &NeighborhoodGraph, updater: &GraphUpdater) -> Result<Vec<Vec<f64>>> {
    if updater.mode != UpdateMode::Extended {
        return Err(Error::Config("update_extended needs an extended-mode updater".into()));
    }
    updater.run(graph)
}

/// Number of box residuals predicted by the regression branch.
pub const BOX_RESIDUALS: usize = 7;

/// Two sibling branches on the refined state: a class logit and box residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphHeader {
    pub cls: DenseStack,
    pub reg: DenseStack,
}

#[derive(Debug, Clone)]
pub struct HeaderTrace {
    cls: StackTrace,
    reg: StackTrace,
}

impl HeaderTrace {
    pub fn logit(&self) -> f64 {
        self.cls.output()[0]
    }

    pub fn residuals(&self) -> [f64; BOX_RESIDUALS] {
        std::array::from_fn(|c| self.reg.output()[c])
    }
}

impl GraphHeader {
    pub fn new(cls: DenseStack, reg: DenseStack) -> Result<Self> {
        if cls.output_dim() != 1 {
            return Err(Error::dim(1, cls.output_dim(), "classification branch output"));
        }
        if reg.output_dim() != BOX_RESIDUALS {
            return Err(Error::dim(BOX_RESIDUALS, reg.output_dim(), "regression branch output"));
        }
        if cls.input_dim() != reg.input_dim() {
            return Err(Error::dim(cls.input_dim(), reg.input_dim(), "header branch inputs"));
        }
        Ok(Self { cls, reg })
    }

    /// Two-layer branches `state_dim -> hidden -> {1, 7}`, Glorot-initialized.
    pub fn glorot(state_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(
            DenseStack::glorot(&[state_dim, hidden, 1], Activation::Identity, rng)?,
            DenseStack::glorot(&[state_dim, hidden, BOX_RESIDUALS], Activation::Identity, rng)?,
        )
    }

    /// Zero branches: score 0.5 and zero residuals for every input.
    pub fn zeros(state_dim: usize, hidden: usize) -> Result<Self> {
        Self::new(
            DenseStack::zeros(&[state_dim, hidden, 1], Activation::Identity)?,
            DenseStack::zeros(&[state_dim, hidden, BOX_RESIDUALS], Activation::Identity)?,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.cls.input_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cls: self.cls.zeros_like(),
            reg: self.reg.zeros_like(),
        }
    }

    pub fn forward(&self, z: &[f64]) -> Result<HeaderTrace> {
        Ok(HeaderTrace {
            cls: self.cls.forward_trace(z)?,
            reg: self.reg.forward_trace(z)?,
        })
    }

    /// Adds parameter gradients into `grads`, returns the gradient w.r.t. `z`.
    pub fn backward_into(
        &self,
        trace: &HeaderTrace,
        d_logit: f64,
        d_residuals: &[f64; BOX_RESIDUALS],
        grads: &mut GraphHeader,
    ) -> Result<Vec<f64>> {
        let a = self.cls.backward_into(&trace.cls, &[d_logit], &mut grads.cls)?;
        let b = self.reg.backward_into(&trace.reg, d_residuals, &mut grads.reg)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x + y).collect())
    }
}

impl Parameters for GraphHeader {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.cls.visit(f);
        self.reg.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.cls.visit_mut(f);
        self.reg.visit_mut(f);
    }
}

/// Class score (sigmoid of the logit) and box residuals for one refined state.
pub fn graph_header(z: &[f64], cls: &DenseStack, reg: &DenseStack) -> Result<(f64, [f64; BOX_RESIDUALS])> {
    let header = GraphHeader::new(cls.clone(), reg.clone())?;
    let t = header.forward(z)?;
    Ok((sigmoid(t.logit()), t.residuals()))
}

/// Applies the header to a refined state and decodes the box against its proposal.
pub fn refine_box(header: &GraphHeader, z: &[f64], proposal: &Box3D) -> Result<Box3D> {
    let t = header.forward(z)?;
    let mut anchor = *proposal;
    anchor.score = Some(sigmoid(t.logit()));
    decode_box(&BoxEncoding(t.residuals()), &anchor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn proposal(x: f64, y: f64) -> Box3D {
        Box3D::new([x, y, 0.0], [3.9, 1.6, 1.56], 0.0).unwrap()
    }

    fn random_graph(rng: &mut impl Rng, n: usize, dim: usize, spread: f64, radius: f64) -> NeighborhoodGraph {
        let props: Vec<(Box3D, Vec<f64>)> = (0..n)
            .map(|_| {
                let b = proposal(rng.random_range(0.0..spread), rng.random_range(0.0..spread));
                (b, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            })
            .collect();
        build_graph(&props, radius).unwrap()
    }

    #[test]
    fn single_node_has_self_loop() {
        let g = build_graph(&[(proposal(1.0, 1.0), vec![0.5])], 2.0).unwrap();
        assert_eq!(g.neighbors(0), &[0]);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn radius_decides_cross_edge() {
        let props = vec![(proposal(0.0, 0.0), vec![0.0]), (proposal(1.0, 0.0), vec![0.0])];
        let g = build_graph(&props, 0.5).unwrap();
        assert_eq!(g.neighbors(0), &[0]);
        let g = build_graph(&props, 2.0).unwrap();
        assert_eq!(g.neighbors(0), &[0, 1]);
        assert_eq!(g.neighbors(1), &[0, 1]);
        // Strict inequality: distance exactly r is not an edge.
        let g = build_graph(&props, 1.0).unwrap();
        assert_eq!(g.neighbors(0), &[0]);
    }

    #[test]
    fn empty_graph() {
        let g = build_graph(&[], 1.0).unwrap();
        assert!(g.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = GraphUpdater::new(&UpdaterShape::default(), 4, &mut rng).unwrap();
        assert!(u.run(&g).unwrap().is_empty());
        assert!(build_graph(&[], 0.0).is_err());
    }

    #[test]
    fn zero_iterations_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_graph(&mut rng, 10, 5, 6.0, 2.0);
        for mode in [UpdateMode::Vanilla, UpdateMode::Extended] {
            let shape = UpdaterShape {
                mode,
                iterations: 0,
                ..UpdaterShape::default()
            };
            let u = GraphUpdater::new(&shape, 5, &mut rng).unwrap();
            let z = u.run(&g).unwrap();
            for (zi, n) in z.iter().zip(g.nodes()) {
                assert_eq!(zi, &n.state);
            }
        }
    }

    #[test]
    fn mode_mismatch_and_dims_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_graph(&mut rng, 4, 5, 3.0, 2.0);
        let u = GraphUpdater::new(&UpdaterShape::default(), 5, &mut rng).unwrap();
        assert!(update_vanilla(&g, &u).is_err());
        assert!(update_extended(&g, &u).is_ok());
        let wrong = GraphUpdater::new(&UpdaterShape::default(), 6, &mut rng).unwrap();
        assert!(wrong.run(&g).is_err());
        assert!(GraphUpdater::new(
            &UpdaterShape {
                iterations: 6,
                ..UpdaterShape::default()
            },
            5,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn extended_self_loop_offset_is_negated_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = UpdaterShape {
            iterations: 1,
            ..UpdaterShape::default()
        };
        let g = build_graph(&[(proposal(4.0, 2.0), vec![0.3, -0.7])], 2.0).unwrap();
        let u = GraphUpdater::new(&shape, 2, &mut rng).unwrap();
        let trace = u.forward(&g).unwrap();
        let delta = trace.alignment_offsets(1)[0];
        let want = u.steps[0].alignment.as_ref().unwrap().forward(&[0.3, -0.7]).unwrap();
        assert_eq!(delta.to_vec(), want);
        let input = vec![-delta[0], -delta[1], -delta[2], 0.3, -0.7];
        let pooled = u.steps[0].aggregation.forward(&input).unwrap();
        let fused = u.steps[0].fusion.forward(&pooled).unwrap();
        let z = &trace.outputs()[0];
        assert_eq!(z, &vec![0.3 + fused[0], -0.7 + fused[1]]);
    }

    #[test]
    fn zero_header_keeps_proposal() {
        let h = GraphHeader::zeros(6, 4).unwrap();
        let (score, res) = graph_header(&[1.0; 6], &h.cls, &h.reg).unwrap();
        assert_eq!(score, 0.5);
        assert_eq!(res, [0.0; 7]);
        let p = Box3D::new([1.0, 2.0, -1.0], [3.9, 1.6, 1.56], 0.4).unwrap();
        let b = refine_box(&h, &[0.3; 6], &p).unwrap();
        assert_eq!(b.center, p.center);
        assert_eq!(b.dims, p.dims);
        assert_eq!(b.yaw, p.yaw);
        assert_eq!(b.score, Some(0.5));
    }

    #[test]
    fn header_rejects_wrong_branch_widths() {
        let cls = DenseStack::zeros(&[4, 2], Activation::Identity).unwrap();
        let reg = DenseStack::zeros(&[4, 7], Activation::Identity).unwrap();
        assert!(GraphHeader::new(cls, reg).is_err());
    }

    #[test]
    fn reorder_requires_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = random_graph(&mut rng, 6, 2, 1.0, 5.0);
        assert!(g.reorder_neighbors(0, vec![5, 4, 3, 2, 1, 0]).is_ok());
        assert!(g.reorder_neighbors(0, vec![0, 1]).is_err());
    }
}
